//! Training driver: seeded data, epoch batching, augmentation, AdamW with
//! warmup, periodic validation, checkpointing.
//!
//! Every random draw comes from named substreams of the config seed, and no
//! metrics record carries a timestamp, so two runs with the same config are
//! bit-identical in both the metrics log and the checkpoint.

use std::path::Path;

use anyhow::{bail, Result};
use serde_json::json;

use omnilens_core::alignment::{contrastive_loss, AlignmentBatch};
use omnilens_core::array::Array;
use omnilens_core::backbone::{frozen_snapshot, frozen_unchanged};
use omnilens_core::dsp::Spectrogram;
use omnilens_core::metrics::zero_shot_classify;
use omnilens_core::optim::{AdamW, AdamWConfig, DecayShape, Schedule};
use omnilens_core::rng::Rng;
use omnilens_core::scalar::Scalar;
use omnilens_core::serialize::{encode_checkpoint, store_to_records};
use omnilens_core::tape::Tape;
use omnilens_core::tokenize::augment::{
    augment_grid, augment_points, mixup_blend, mixup_lambda, spec_augment,
};
use omnilens_core::tokenize::point::PointCloud;

use crate::config::{Modality, RunConfig};
use crate::io;
use crate::model::{embed_samples, wrap, Pipeline, Prepared};
use crate::synth::{gen_synthetic, Payload, Split, SyntheticDataset};

/// Everything a finished run hands back; file output is optional on top.
pub struct TrainResult<S: Scalar> {
    pub pipeline: Pipeline<S>,
    pub dataset: SyntheticDataset,
    /// JSONL metrics lines in emission order.
    pub metrics: Vec<String>,
    /// Final encoded checkpoint.
    pub checkpoint: Vec<u8>,
    pub steps_run: usize,
    pub final_loss: Option<f64>,
    /// All frozen parameters bit-identical to their start-of-run values.
    pub frozen_ok: bool,
    /// Any trunk parameter differs bitwise from its start-of-run value.
    pub trunk_changed: bool,
}

/// Resampling floor: grouping needs at least this many points after dropout.
fn replenish_points(pc: &mut PointCloud, want: usize, rng: &mut Rng) {
    let have = pc.points.rows();
    if have >= want || have == 0 {
        return;
    }
    let mut rows: Vec<Vec<f64>> = (0..have).map(|r| pc.points.row_slice(r).to_vec()).collect();
    for _ in have..want {
        let pick = rng.below(have);
        rows.push(rows[pick].clone());
    }
    let d = pc.points.cols();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    pc.points = Array::from_vec(want, d, flat).unwrap();
}

fn renormalize_rows_f64(rows: &mut [f64]) {
    let norm = rows.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in rows.iter_mut() {
        *v /= norm;
    }
}

/// Blend two unit rows with the mixup weight, then put the result back on
/// the unit sphere so the loss contract still holds.
fn blend_unit_rows<S: Scalar>(a: &[S], b: &[S], lambda: f64) -> Vec<S> {
    let mut out: Vec<f64> = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| lambda * x.to_f64() + (1.0 - lambda) * y.to_f64())
        .collect();
    renormalize_rows_f64(&mut out);
    out.into_iter().map(S::from_f64).collect()
}

/// Train state shared by the step loop.
struct Driver<'a, S: Scalar> {
    cfg: &'a RunConfig,
    train_idx: Vec<usize>,
    /// Cached spectrograms per dataset index (audio only).
    specs: Vec<Option<Spectrogram>>,
    /// Precomputed anchor rows, one matrix per anchor modality, all samples.
    anchor_all: Vec<Array<S>>,
    batches_per_epoch: usize,
}

impl<'a, S: Scalar> Driver<'a, S> {
    fn new(cfg: &'a RunConfig, pipe: &Pipeline<S>, ds: &SyntheticDataset) -> Result<Self> {
        let train_idx = ds.indices(Split::Train);
        let order_len = train_idx.len() * cfg.train.sample_replication.max(1);
        if cfg.train.steps > 0 && cfg.train.batch > order_len {
            bail!("configuration: batch {} exceeds replicated train split {}", cfg.train.batch, order_len);
        }
        let batches_per_epoch = if cfg.train.batch == 0 { 0 } else { order_len / cfg.train.batch };
        let mut specs = vec![None; ds.samples.len()];
        if cfg.modality == Modality::Audio {
            for (i, s) in ds.samples.iter().enumerate() {
                if let Payload::Audio(wave) = &s.payload {
                    specs[i] = Some(pipe.spectrogram(wave)?);
                }
            }
        }
        let refs: Vec<&crate::synth::Sample> = ds.samples.iter().collect();
        let mut anchor_all = Vec::new();
        for &which in &cfg.anchors.anchors {
            anchor_all.push(pipe.anchor_rows(which, &refs)?);
        }
        Ok(Driver { cfg, train_idx, specs, anchor_all, batches_per_epoch })
    }

    /// Shuffled, replicated epoch order. Pure function of seed and epoch.
    fn epoch_order(&self, root: &Rng, epoch: usize) -> Vec<usize> {
        let rep = self.cfg.train.sample_replication.max(1);
        let mut order = Vec::with_capacity(self.train_idx.len() * rep);
        for _ in 0..rep {
            order.extend_from_slice(&self.train_idx);
        }
        let mut rng = root.substream("train.epoch", epoch as u64);
        rng.shuffle(&mut order);
        order
    }

    /// Batch inputs after augmentation: prepared payloads plus anchor rows
    /// (anchor rows leave precomputed values untouched; mixup blends copies).
    fn build_batch(
        &self,
        pipe: &Pipeline<S>,
        ds: &SyntheticDataset,
        batch_idx: &[usize],
        rng: &mut Rng,
    ) -> Result<(Vec<Prepared>, Vec<Array<S>>)> {
        let b = batch_idx.len();
        let d_out = self.cfg.anchors.d_out;
        let augment = self.cfg.train.augment.enabled;
        let mut anchor_rows: Vec<Vec<S>> = self
            .anchor_all
            .iter()
            .map(|all| {
                let mut rows = Vec::with_capacity(b * d_out);
                for &idx in batch_idx {
                    rows.extend_from_slice(all.row_slice(idx));
                }
                rows
            })
            .collect();
        let mut prepared = Vec::with_capacity(b);
        for (slot, &idx) in batch_idx.iter().enumerate() {
            let sample = &ds.samples[idx];
            let prep = match (&sample.payload, augment) {
                (Payload::Points(pc), true) => {
                    let mut cloud = pc.clone();
                    augment_points(&mut cloud, &self.cfg.train.augment.points, rng);
                    replenish_points(&mut cloud, self.cfg.tokenizer.n_points, rng);
                    Prepared::Points(cloud)
                }
                (Payload::Audio(_), _) => {
                    let base = self.specs[idx].as_ref().expect("cached spectrogram");
                    let mut values = base.values.clone();
                    if augment {
                        let audio_cfg = &self.cfg.train.augment.audio;
                        if audio_cfg.mixup_p > 0.0 && rng.coin(audio_cfg.mixup_p) {
                            let partner = batch_idx[rng.below(b)];
                            let lambda = mixup_lambda(rng);
                            let other = self.specs[partner].as_ref().expect("cached spectrogram");
                            values = mixup_blend(&values, &other.values, lambda).map_err(wrap)?;
                            for (all, rows) in self.anchor_all.iter().zip(anchor_rows.iter_mut()) {
                                let blended = blend_unit_rows(
                                    all.row_slice(idx),
                                    all.row_slice(partner),
                                    lambda,
                                );
                                rows[slot * d_out..(slot + 1) * d_out].copy_from_slice(&blended);
                            }
                        }
                        spec_augment(&mut values, audio_cfg, rng);
                    }
                    Prepared::Spec(Spectrogram {
                        values,
                        sample_rate: base.sample_rate,
                        win_ms: base.win_ms,
                        hop_ms: base.hop_ms,
                    })
                }
                (Payload::Grid(g), true) => {
                    let mut grid = g.clone();
                    augment_grid(&mut grid, &self.cfg.train.augment.grid, rng).map_err(wrap)?;
                    pipe.prepare(&Payload::Grid(grid))?
                }
                (payload, _) => pipe.prepare(payload)?,
            };
            prepared.push(prep);
        }
        let anchors = anchor_rows
            .into_iter()
            .map(|rows| Array::from_vec(b, d_out, rows).map_err(wrap))
            .collect::<Result<Vec<_>>>()?;
        Ok((prepared, anchors))
    }
}

/// Zero-shot top-1 on one split against template class embeddings.
fn split_zero_shot<S: Scalar>(
    pipe: &Pipeline<S>,
    ds: &SyntheticDataset,
    split: Split,
) -> Result<Option<f64>> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&crate::synth::Sample> = idx.iter().map(|&i| &ds.samples[i]).collect();
    let emb = embed_samples(pipe, &refs)?;
    let labels = ds.labels(split);
    let classes = pipe.class_matrix(&pipe.cfg.eval.templates)?;
    let acc = zero_shot_classify(&emb, &classes, &labels, 1).map_err(wrap)?;
    Ok(Some(acc))
}

/// Full training run. `out` mirrors results to disk; `resume` points at a
/// previous run directory whose config must match exactly. Optimizer moments
/// are not part of the checkpoint, so a resumed run matches a fresh one in
/// parameters only at the resume point, not in subsequent updates.
pub fn run_train<S: Scalar>(
    cfg: &RunConfig,
    out: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainResult<S>> {
    let mut pipe: Pipeline<S> = Pipeline::build(cfg)?;
    let ds = gen_synthetic(cfg, cfg.seed)?;
    let mut start_step = 0usize;
    if let Some(prev) = resume {
        let stored = io::read_config(&prev.join("run.json"))?;
        // The step budget is the one knob a resumed run may extend.
        let mut stored_v = serde_json::to_value(&stored)?;
        let mut cfg_v = serde_json::to_value(cfg)?;
        stored_v["train"]["steps"] = serde_json::Value::Null;
        cfg_v["train"]["steps"] = serde_json::Value::Null;
        if stored_v != cfg_v {
            bail!("configuration: resume config does not match {}", prev.display());
        }
        io::load_checkpoint(&prev.join("checkpoint.bin"), &mut pipe.store)?;
        let state: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(prev.join("state.json"))?)?;
        start_step = state["completed_steps"].as_u64().unwrap_or(0) as usize;
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        io::write_json(&dir.join("run.json"), cfg)?;
    }

    let driver = Driver::new(cfg, &pipe, &ds)?;
    let root = Rng::from_seed(cfg.seed);
    let schedule = Schedule {
        lr: cfg.train.lr,
        warmup_steps: cfg.train.warmup_steps,
        total_steps: cfg.train.steps,
        shape: DecayShape::Cosine { final_factor: 0.1 },
    };
    let mut opt: AdamW<S> = AdamW::new(AdamWConfig {
        weight_decay: cfg.train.weight_decay,
        ..AdamWConfig::default()
    });

    let frozen_start = frozen_snapshot(&pipe.store);
    let trunk_ids = pipe.trunk.trunk_param_ids();
    let trunk_start: Vec<Array<S>> =
        trunk_ids.iter().map(|&id| pipe.store.get(id).value.clone()).collect();

    let mut metrics: Vec<String> = Vec::new();
    let mut last_loss = None;
    let mut epoch_cache: Option<(usize, Vec<usize>)> = None;
    for t in start_step..cfg.train.steps {
        let epoch = t / driver.batches_per_epoch.max(1);
        let offset = (t % driver.batches_per_epoch.max(1)) * cfg.train.batch;
        if epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            epoch_cache = Some((epoch, driver.epoch_order(&root, epoch)));
        }
        let order = &epoch_cache.as_ref().unwrap().1;
        let batch_idx = &order[offset..offset + cfg.train.batch];

        let mut rng = root.substream("train.aug", t as u64);
        let (prepared, anchors) = driver.build_batch(&pipe, &ds, batch_idx, &mut rng)?;

        let mut tape: Tape<S> = Tape::new();
        let mut nodes = Vec::with_capacity(prepared.len());
        for prep in &prepared {
            let tokens = pipe.encode_tokens(&mut tape, prep)?;
            nodes.push(pipe.head(&mut tape, tokens)?);
        }
        let student = tape.concat_rows(&nodes).map_err(wrap)?;
        let anchor_nodes: Vec<_> = anchors.into_iter().map(|a| tape.constant(a)).collect();
        let batch = AlignmentBatch { student, anchors: anchor_nodes };
        let loss = contrastive_loss(&mut tape, &pipe.store, &batch, &pipe.temp).map_err(wrap)?;
        let loss_val = tape.value(loss).at(0, 0).to_f64();
        let lr = schedule.rate(t);

        pipe.store.zero_grads();
        let grads = tape.backward(loss).map_err(wrap)?;
        tape.accumulate_param_grads(&grads, &mut pipe.store);
        opt.step(&mut pipe.store, lr);
        last_loss = Some(loss_val);

        metrics.push(
            json!({
                "event": "step",
                "step": t,
                "loss": loss_val,
                "lr": lr,
                "tau": pipe.temp.value(&pipe.store),
            })
            .to_string(),
        );
        let done = t + 1;
        if cfg.train.eval_every > 0 && done % cfg.train.eval_every == 0 {
            if let Some(acc) = split_zero_shot(&pipe, &ds, Split::Val)? {
                metrics.push(
                    json!({"event": "eval", "step": done, "zero_shot_top1": acc}).to_string(),
                );
            }
        }
        if let Some(dir) = out {
            if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 {
                io::save_checkpoint(&dir.join(format!("checkpoint-{done}.bin")), &pipe.store)?;
            }
        }
    }

    let frozen_ok = frozen_unchanged(&pipe.store, &frozen_start);
    let trunk_changed = trunk_ids.iter().zip(trunk_start.iter()).any(|(&id, start)| {
        let now = &pipe.store.get(id).value;
        now.data()
            .iter()
            .zip(start.data().iter())
            .any(|(a, b)| a.to_f64().to_bits() != b.to_f64().to_bits())
    });
    metrics.push(
        json!({
            "event": "final",
            "steps": cfg.train.steps,
            "loss": last_loss,
            "frozen_ok": frozen_ok,
        })
        .to_string(),
    );

    let checkpoint = encode_checkpoint(&store_to_records(&pipe.store));
    if let Some(dir) = out {
        std::fs::write(dir.join("checkpoint.bin"), &checkpoint)?;
        io::write_lines(&dir.join("metrics.jsonl"), &metrics)?;
        io::write_json(
            &dir.join("state.json"),
            &json!({"completed_steps": cfg.train.steps, "final_loss": last_loss}),
        )?;
    }
    Ok(TrainResult {
        pipeline: pipe,
        dataset: ds,
        metrics,
        checkpoint,
        steps_run: cfg.train.steps.saturating_sub(start_step),
        final_loss: last_loss,
        frozen_ok,
        trunk_changed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;

    fn tiny_cfg(modality: Modality) -> RunConfig {
        let mut cfg = RunConfig::default_for(modality);
        cfg.data = DataConfig { classes: 2, train_per_class: 4, val_per_class: 2, test_per_class: 2 };
        cfg.tokenizer.n_points = 64;
        cfg.tokenizer.groups = 8;
        cfg.tokenizer.neighbors = 4;
        cfg.tokenizer.clip_seconds = 0.2;
        cfg.train.steps = 3;
        cfg.train.batch = 4;
        cfg.train.warmup_steps = 1;
        cfg.train.eval_every = 2;
        cfg.eval.probe_shots = 2;
        cfg
    }

    #[test]
    fn zero_steps_checkpoint_equals_initialization() {
        let mut cfg = tiny_cfg(Modality::Depth);
        cfg.train.steps = 0;
        let fresh: Pipeline<f64> = Pipeline::build(&cfg).unwrap();
        let want = encode_checkpoint(&store_to_records(&fresh.store));
        let run: TrainResult<f64> = run_train(&cfg, None, None).unwrap();
        assert_eq!(run.checkpoint, want);
        assert_eq!(run.steps_run, 0);
        assert!(run.final_loss.is_none());
        assert!(run.frozen_ok);
        assert!(!run.trunk_changed);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let cfg = tiny_cfg(Modality::PointCloud);
        let a: TrainResult<f64> = run_train(&cfg, None, None).unwrap();
        let b: TrainResult<f64> = run_train(&cfg, None, None).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.checkpoint, b.checkpoint);
        assert!(a.final_loss.unwrap().is_finite());
        assert!(a.frozen_ok);
    }

    #[test]
    fn audio_path_runs_with_mixup_and_masks() {
        let mut cfg = tiny_cfg(Modality::Audio);
        cfg.train.augment.audio.mixup_p = 1.0;
        let run: TrainResult<f64> = run_train(&cfg, None, None).unwrap();
        assert!(run.final_loss.unwrap().is_finite());
        assert!(run.frozen_ok);
        assert!(!run.trunk_changed);
    }

    #[test]
    fn trainable_trunk_breaks_the_frozen_comparison() {
        let mut cfg = tiny_cfg(Modality::Depth);
        cfg.backbone.trainable = true;
        let run: TrainResult<f64> = run_train(&cfg, None, None).unwrap();
        assert!(run.trunk_changed);
    }

    #[test]
    fn resume_rejects_mismatched_config() {
        let mut cfg = tiny_cfg(Modality::Eeg);
        cfg.train.steps = 1;
        let dir = std::env::temp_dir().join(format!("omnilens-train-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let _: TrainResult<f64> = run_train(&cfg, Some(&dir), None).unwrap();
        let mut other = cfg.clone();
        other.train.lr *= 2.0;
        other.train.steps = 2;
        let err = match run_train::<f64>(&other, None, Some(&dir)) {
            Err(e) => e,
            Ok(_) => panic!("mismatched resume config was accepted"),
        };
        assert!(err.to_string().contains("configuration"), "{err}");
        cfg.train.steps = 2;
        let resumed: TrainResult<f64> = run_train(&cfg, None, Some(&dir)).unwrap();
        assert_eq!(resumed.steps_run, 1);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
