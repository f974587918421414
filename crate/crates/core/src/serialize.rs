//! Binary codecs for the project's file formats. Everything here works on
//! byte slices; the harness owns the actual files.
//!
//! Formats:
//! - "OLNS": checkpoint of named tensors, bit-exact f32 round-trip.
//! - "OLPC": point cloud, u32 count then f32 xyz triples.
//! - "OLFS": anchor feature store keyed by sample id.
//! - WAV: 16-bit PCM mono (read and write), used by the audio pipeline.
//!
//! All integers and floats are little-endian.

use alloc::string::String;
use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OLNS";
pub const POINTCLOUD_MAGIC: &[u8; 4] = b"OLPC";
pub const FEATURESTORE_MAGIC: &[u8; 4] = b"OLFS";
pub const FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn err(&self, msg: &str) -> Error {
        Error::Format {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.err("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, want: &[u8; 4], what: &str) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(Error::Format {
                offset: 0,
                msg: alloc::format!("bad magic for {what}"),
            });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(self.err("unsupported format version"));
        }
        Ok(())
    }

    fn string(&mut self, len: usize) -> Result<String> {
        let bytes = self.take(len)?;
        core::str::from_utf8(bytes)
            .map(|s| s.into())
            .map_err(|_| self.err("name is not valid utf-8"))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// One named tensor inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

/// Encode named tensors. Rank is always 2 here (rows, cols); readers accept
/// rank 1 as a single row.
pub fn encode_checkpoint(records: &[TensorRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    for r in records {
        put_u32(&mut out, r.name.len() as u32);
        out.extend_from_slice(r.name.as_bytes());
        put_u32(&mut out, 2);
        put_u32(&mut out, r.rows as u32);
        put_u32(&mut out, r.cols as u32);
        for &v in &r.data {
            put_f32(&mut out, v);
        }
    }
    out
}

/// Decode a checkpoint, reading records until the data ends.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<TensorRecord>> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC, "checkpoint")?;
    r.version()?;
    let mut records = Vec::new();
    while r.remaining() > 0 {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let rank = r.u32()? as usize;
        let (rows, cols) = match rank {
            1 => (1usize, r.u32()? as usize),
            2 => {
                let a = r.u32()? as usize;
                let b = r.u32()? as usize;
                (a, b)
            }
            _ => return Err(r.err("tensor rank above 2 is not supported")),
        };
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| r.err("tensor extent overflow"))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f32()?);
        }
        records.push(TensorRecord {
            name,
            rows,
            cols,
            data,
        });
    }
    Ok(records)
}

/// Snapshot every parameter (frozen included) into checkpoint records, in
/// registration order.
pub fn store_to_records<S: Scalar>(store: &ParamStore<S>) -> Vec<TensorRecord> {
    store
        .iter()
        .map(|(_, p)| TensorRecord {
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
            data: p.value.data().iter().map(|v| v.to_f32()).collect(),
        })
        .collect()
}

/// Load record values into a store with matching names and shapes. Every
/// store parameter must be present; extra records are an error too, so a
/// checkpoint can never silently half-apply.
pub fn records_into_store<S: Scalar>(
    records: &[TensorRecord],
    store: &mut ParamStore<S>,
) -> Result<()> {
    if records.len() != store.len() {
        return Err(Error::Usage(alloc::format!(
            "checkpoint has {} tensors, model has {}",
            records.len(),
            store.len()
        )));
    }
    for rec in records {
        let id = store
            .by_name(&rec.name)
            .ok_or_else(|| Error::Usage(alloc::format!("unknown tensor {:?}", rec.name)))?;
        let p = store.get_mut(id);
        if (p.value.rows(), p.value.cols()) != (rec.rows, rec.cols) {
            return Err(Error::Usage(alloc::format!(
                "tensor {:?} shape mismatch: file {}x{}, model {}x{}",
                rec.name,
                rec.rows,
                rec.cols,
                p.value.rows(),
                p.value.cols()
            )));
        }
        for (slot, &v) in p.value.data_mut().iter_mut().zip(&rec.data) {
            *slot = S::from_f32(v);
        }
    }
    Ok(())
}

pub fn encode_point_cloud(points: &Array<f32>) -> Result<Vec<u8>> {
    if points.cols() != 3 {
        return Err(Error::Usage("point cloud must be n x 3".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(POINTCLOUD_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, points.rows() as u32);
    for &v in points.data() {
        put_f32(&mut out, v);
    }
    Ok(out)
}

pub fn decode_point_cloud(bytes: &[u8]) -> Result<Array<f32>> {
    let mut r = Reader::new(bytes);
    r.magic(POINTCLOUD_MAGIC, "point cloud")?;
    r.version()?;
    let count = r.u32()? as usize;
    let mut data = Vec::with_capacity(count * 3);
    for _ in 0..count * 3 {
        data.push(r.f32()?);
    }
    if r.remaining() > 0 {
        return Err(r.err("trailing bytes after point data"));
    }
    Array::from_vec(count, 3, data)
}

/// Store of per-sample anchor embeddings: each record maps a sample id to
/// one d_out vector per anchor, anchors in a fixed declared order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub d_out: usize,
    pub n_anchors: usize,
    pub records: Vec<(String, Vec<Vec<f32>>)>,
}

impl FeatureStore {
    pub fn new(d_out: usize, n_anchors: usize) -> Self {
        FeatureStore {
            d_out,
            n_anchors,
            records: Vec::new(),
        }
    }

    pub fn insert(&mut self, id: &str, per_anchor: Vec<Vec<f32>>) -> Result<()> {
        if per_anchor.len() != self.n_anchors {
            return Err(Error::Usage("anchor count mismatch".into()));
        }
        if per_anchor.iter().any(|v| v.len() != self.d_out) {
            return Err(Error::Usage("embedding width mismatch".into()));
        }
        self.records.push((id.into(), per_anchor));
        Ok(())
    }

    pub fn lookup(&self, id: &str) -> Option<&Vec<Vec<f32>>> {
        self.records.iter().find(|(k, _)| k == id).map(|(_, v)| v)
    }

    pub fn records(&self) -> &[(String, Vec<Vec<f32>>)] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn encode_feature_store(fs: &FeatureStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURESTORE_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, fs.d_out as u32);
    put_u32(&mut out, fs.n_anchors as u32);
    for (id, per_anchor) in &fs.records {
        put_u32(&mut out, id.len() as u32);
        out.extend_from_slice(id.as_bytes());
        for vec in per_anchor {
            for &v in vec {
                put_f32(&mut out, v);
            }
        }
    }
    out
}

pub fn decode_feature_store(bytes: &[u8]) -> Result<FeatureStore> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURESTORE_MAGIC, "feature store")?;
    r.version()?;
    let d_out = r.u32()? as usize;
    let n_anchors = r.u32()? as usize;
    let mut fs = FeatureStore::new(d_out, n_anchors);
    while r.remaining() > 0 {
        let id_len = r.u32()? as usize;
        let id = r.string(id_len)?;
        let mut per_anchor = Vec::with_capacity(n_anchors);
        for _ in 0..n_anchors {
            let mut v = Vec::with_capacity(d_out);
            for _ in 0..d_out {
                v.push(r.f32()?);
            }
            per_anchor.push(v);
        }
        fs.records.push((id, per_anchor));
    }
    Ok(fs)
}

/// Mono PCM audio at a stated sample rate, samples scaled to [-1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

/// Write 16-bit PCM mono WAV. Samples are clamped to [-1, 1] then scaled by
/// 32767.
pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let n = w.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    put_u32(&mut out, 36 + data_len);
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    put_u32(&mut out, 16);
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    put_u32(&mut out, w.sample_rate);
    put_u32(&mut out, w.sample_rate * 2); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    put_u32(&mut out, data_len);
    for &s in &w.samples {
        let clamped = s.clamp(-1.0, 1.0);
        let q = libm::roundf(clamped * 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

/// Parse a WAV container, accepting only 16-bit PCM mono. Unknown chunks are
/// skipped; a mismatched layout is a format error so a wrong file cannot be
/// half-read.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    let mut r = Reader::new(bytes);
    r.magic(b"RIFF", "wav")?;
    let _riff_len = r.u32()?;
    let wave = r.take(4)?;
    if wave != b"WAVE" {
        return Err(Error::Format {
            offset: 8,
            msg: "not a WAVE container".into(),
        });
    }
    let mut sample_rate = None;
    let mut samples = None;
    while r.remaining() >= 8 {
        let tag: [u8; 4] = r.take(4)?.try_into().expect("len 4");
        let len = r.u32()? as usize;
        match &tag {
            b"fmt " => {
                if len < 16 {
                    return Err(r.err("fmt chunk too short"));
                }
                let format = r.u16()?;
                let channels = r.u16()?;
                let sr = r.u32()?;
                let _byte_rate = r.u32()?;
                let _block_align = r.u16()?;
                let bits = r.u16()?;
                r.take(len - 16)?;
                if format != 1 {
                    return Err(r.err("only uncompressed PCM is supported"));
                }
                if channels != 1 {
                    return Err(r.err("only mono audio is supported"));
                }
                if bits != 16 {
                    return Err(r.err("only 16-bit samples are supported"));
                }
                sample_rate = Some(sr);
            }
            b"data" => {
                if len % 2 != 0 {
                    return Err(r.err("odd data chunk length"));
                }
                let raw = r.take(len)?;
                let mut s = Vec::with_capacity(len / 2);
                for pair in raw.chunks_exact(2) {
                    let q = i16::from_le_bytes([pair[0], pair[1]]);
                    s.push(q as f32 / 32768.0);
                }
                samples = Some(s);
            }
            _ => {
                // Skip unknown chunks (word-aligned).
                r.take(len + (len & 1))?;
            }
        }
    }
    match (sample_rate, samples) {
        (Some(sr), Some(s)) => Ok(Waveform {
            sample_rate: sr,
            samples: s,
        }),
        _ => Err(Error::Format {
            offset: bytes.len(),
            msg: "missing fmt or data chunk".into(),
        }),
    }
}
