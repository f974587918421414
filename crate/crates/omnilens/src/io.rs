//! File interchange: dataset export, run outputs, checkpoints.
//!
//! Training regenerates synthetic data in memory from the config seed, so
//! these files exist for inspection and external tooling, not as a required
//! input path.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use omnilens_core::array::Array;
use omnilens_core::scalar::Scalar;
use omnilens_core::param::ParamStore;
use omnilens_core::serialize::{
    decode_checkpoint, encode_checkpoint, encode_point_cloud, encode_wav, records_into_store,
    store_to_records, Waveform,
};
use omnilens_core::tokenize::grid::Grid;

use crate::config::{Modality, RunConfig};
use crate::synth::{Payload, SyntheticDataset};

/// Magic for the raw grid container: dims header then f32 little-endian data.
const GRID_MAGIC: &[u8; 4] = b"OLGR";

pub fn encode_grid(grid: &Grid) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + grid.data.len() * 4);
    out.extend_from_slice(GRID_MAGIC);
    for dim in [grid.h, grid.w, grid.c] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in &grid.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<Grid> {
    if bytes.len() < 16 || &bytes[..4] != GRID_MAGIC {
        bail!("not a grid container");
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 4 + i * 4;
        *d = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    }
    let (h, w, c) = (dims[0], dims[1], dims[2]);
    let need = 16 + h * w * c * 4;
    if bytes.len() != need {
        bail!("grid container holds {} bytes, header implies {}", bytes.len(), need);
    }
    let mut data = Vec::with_capacity(h * w * c);
    for i in 0..h * w * c {
        let at = 16 + i * 4;
        data.push(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64);
    }
    Ok(Grid { h, w, c, data })
}

fn cloud_to_f32(points: &Array<f64>) -> Array<f32> {
    let data: Vec<f32> = points.data().iter().map(|&v| v as f32).collect();
    Array::from_vec(points.rows(), points.cols(), data).unwrap()
}

/// Write every sample to disk plus a manifest describing the layout.
/// Returns the manifest path.
pub fn save_dataset(out_dir: &Path, ds: &SyntheticDataset, sample_rate: u32) -> Result<PathBuf> {
    let data_dir = out_dir.join("data");
    fs::create_dir_all(&data_dir)
        .with_context(|| format!("creating {}", data_dir.display()))?;
    let mut entries = Vec::with_capacity(ds.samples.len());
    for sample in &ds.samples {
        // Ids look like "train/sphere/0004"; flatten into one directory.
        let stem = sample.id.replace('/', "_");
        let (payload_name, bytes): (String, Vec<u8>) = match &sample.payload {
            Payload::Points(pc) => (
                format!("{stem}.olpc"),
                encode_point_cloud(&cloud_to_f32(&pc.points)).map_err(|e| anyhow!("{e}"))?,
            ),
            Payload::Audio(wave) => {
                let samples: Vec<f32> = wave.iter().map(|&v| v as f32).collect();
                (
                    format!("{stem}.wav"),
                    encode_wav(&Waveform { sample_rate, samples }),
                )
            }
            Payload::Grid(g) => (format!("{stem}.grid"), encode_grid(g)),
            Payload::Eeg(e) => {
                let grid = Grid {
                    h: e.values.rows(),
                    w: e.values.cols(),
                    c: 1,
                    data: e.values.data().to_vec(),
                };
                (format!("{stem}.grid"), encode_grid(&grid))
            }
        };
        fs::write(data_dir.join(&payload_name), bytes)?;
        let image_name = format!("{stem}_anchor.grid");
        fs::write(data_dir.join(&image_name), encode_grid(&sample.image))?;
        entries.push(json!({
            "id": sample.id,
            "label": sample.label,
            "class": ds.class_names[sample.label],
            "split": sample.split.tag(),
            "payload": format!("data/{payload_name}"),
            "anchor_image": format!("data/{image_name}"),
            "caption": sample.caption,
        }));
    }
    let manifest = json!({
        "modality": ds.modality,
        "classes": ds.class_names,
        "sample_rate": if ds.modality == Modality::Audio { Some(sample_rate) } else { None },
        "samples": entries,
    });
    let path = out_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Pretty-printed JSON for configs and reports.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: RunConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(cfg)
}

/// One JSON record per line; the records must already be serialized lines.
pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    if !lines.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Minimal CSV: caller guarantees cells need no quoting (numbers, plain names).
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn save_checkpoint<S: Scalar>(path: &Path, store: &ParamStore<S>) -> Result<()> {
    let bytes = encode_checkpoint(&store_to_records(store));
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Restore parameter values in place; names and shapes must match the store.
pub fn load_checkpoint<S: Scalar>(path: &Path, store: &mut ParamStore<S>) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let records = decode_checkpoint(&bytes).map_err(|e| anyhow!("{e}"))?;
    records_into_store(&records, store).map_err(|e| anyhow!("{e}"))?;
    Ok(())
}
