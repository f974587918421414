//! End-to-end gradient checks on micro pipelines.
//!
//! Each configured modality gets a scaled-down but structurally complete
//! pipeline (tokenizer projection, positional table, lens, frozen trunk
//! slice, projection head, temperature, alignment loss) small enough that
//! 64-bit central differencing over every trainable element finishes in
//! seconds. The reverse pass is compared against finite differences of the
//! same loss, so the check is independent of the tape internals.

use anyhow::{ensure, Context, Result};

use omnilens_core::alignment::{contrastive_loss, AlignmentBatch};
use omnilens_core::array::Array;
use omnilens_core::error::Error as CoreError;
use omnilens_core::error::Result as CoreResult;
use omnilens_core::gradcheck::{check_gradients, GradCheckReport};
use omnilens_core::param::ParamStore;
use omnilens_core::tape::{NodeId, Tape};

use crate::bench::param_counts;
use crate::config::{Modality, RunConfig};
use crate::model::{Pipeline, Prepared};
use crate::synth::{gen_synthetic, Sample, Split};

/// Outcome of one micro-pipeline check.
#[derive(Debug, Clone)]
pub struct MicroCheck {
    pub modality: Modality,
    /// Trainable scalar count of the micro pipeline.
    pub trainable: usize,
    pub loss: f64,
    pub report: GradCheckReport,
}

impl MicroCheck {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// A structurally faithful pipeline shrunk for finite differencing: every
/// stage present, trainable element count in the low thousands.
pub fn micro_config(modality: Modality, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default_for(modality);
    cfg.seed = seed;
    cfg.data.classes = 2;
    cfg.data.train_per_class = 1;
    cfg.data.val_per_class = 1;
    cfg.data.test_per_class = 1;
    cfg.eval.probe_shots = 1;
    cfg.eval.k_list = vec![1, 2];

    let t = &mut cfg.tokenizer;
    t.n_points = 32;
    t.groups = 4;
    t.neighbors = 4;
    t.pointnet_hidden1 = 8;
    t.pointnet_hidden2 = 8;
    t.clip_seconds = 0.2;
    t.n_mels = 16;
    t.audio_patch = 8;
    t.audio_stride = 8;
    t.grid_h = 32;
    t.grid_w = 32;
    t.grid_patch = 8;
    t.eeg_channels = 8;
    t.eeg_steps = 64;
    t.eeg_group = 4;

    cfg.lens.d = 8;
    cfg.lens.heads = 2;
    cfg.lens.n_latents = 4;
    cfg.lens.blocks = 1;
    cfg.lens.self_layers = 1;

    cfg.backbone.d = 8;
    cfg.backbone.heads = 2;
    cfg.backbone.total_blocks = 2;
    cfg.backbone.l_first = 2;
    cfg.backbone.l_last = 2;
    cfg.backbone.d_out = 8;
    cfg.anchors.d_out = 8;

    cfg.teacher_image.patch = 16;
    cfg.teacher_image.d = 8;
    cfg.teacher_image.heads = 2;
    cfg.teacher_image.blocks = 1;
    cfg.teacher_image.d_out = 8;
    cfg.teacher_text.d = 8;
    cfg.teacher_text.d_out = 8;

    cfg.train.batch = 2;
    let m = cfg
        .tokenizer
        .token_count(modality)
        .expect("micro tokenizer sizes are valid");
    cfg.backbone.pos_len = cfg.lens.output_len(m) + usize::from(cfg.backbone.use_cls);
    cfg
}

fn reject(e: anyhow::Error) -> CoreError {
    CoreError::Input(format!("{e:#}"))
}

/// Check analytic gradients of the full alignment loss against central
/// differences for the given config. The config should come from
/// `micro_config`: cost scales with the trainable element count.
pub fn check_micro(cfg: &RunConfig, h: f64, tolerance: f64) -> Result<MicroCheck> {
    let pipe: Pipeline<f64> = Pipeline::build(cfg)?;
    // A second build of the same config yields bit-identical parameters;
    // this store is the one the checker perturbs, so `pipe` stays pristine
    // for anchor evaluation.
    let scratch: Pipeline<f64> = Pipeline::build(cfg)?;
    let mut store = scratch.store;
    let (_, trainable) = param_counts(&store);

    let ds = gen_synthetic(cfg, cfg.seed)?;
    let idx = ds.indices(Split::Train);
    ensure!(idx.len() >= 2, "micro gradcheck needs two training samples");
    let batch: Vec<&Sample> = idx.iter().take(2).map(|&i| &ds.samples[i]).collect();
    let prepared: Vec<Prepared> = batch
        .iter()
        .map(|s| pipe.prepare(&s.payload))
        .collect::<Result<_>>()
        .context("preparing gradcheck inputs")?;
    let mut anchor_mats: Vec<Array<f64>> = Vec::new();
    for &which in &cfg.anchors.anchors {
        anchor_mats.push(pipe.anchor_rows(which, &batch)?);
    }

    // Pure function of the store: fixed inputs, fixed anchors, no RNG.
    let forward = |store: &ParamStore<f64>, tape: &mut Tape<f64>| -> CoreResult<NodeId> {
        let mut rows = Vec::with_capacity(prepared.len());
        for p in &prepared {
            let tokens = pipe.encode_tokens_in(tape, store, p).map_err(reject)?;
            rows.push(pipe.head_in(tape, store, tokens).map_err(reject)?);
        }
        let student = tape.concat_rows(&rows)?;
        let anchors: Vec<NodeId> = anchor_mats
            .iter()
            .map(|a| tape.constant(a.clone()))
            .collect();
        contrastive_loss(tape, store, &AlignmentBatch { student, anchors }, &pipe.temp)
    };

    let analytic = |store: &mut ParamStore<f64>| -> CoreResult<f64> {
        let mut tape: Tape<f64> = Tape::new();
        let node = forward(store, &mut tape)?;
        let grads = tape.backward(node)?;
        tape.accumulate_param_grads(&grads, store);
        Ok(tape.value(node).data()[0])
    };
    let loss = |store: &ParamStore<f64>| -> CoreResult<f64> {
        let mut tape: Tape<f64> = Tape::new();
        let node = forward(store, &mut tape)?;
        Ok(tape.value(node).data()[0])
    };

    let report = check_gradients(&mut store, h, tolerance, analytic, loss)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    // Recompute the reference loss on the untouched pipeline for reporting.
    let loss_value = {
        let mut tape: Tape<f64> = Tape::new();
        let node = forward(&pipe.store, &mut tape).map_err(|e| anyhow::anyhow!("{e}"))?;
        tape.value(node).data()[0]
    };
    Ok(MicroCheck {
        modality: cfg.modality,
        trainable,
        loss: loss_value,
        report,
    })
}
