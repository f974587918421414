//! Self-contained invariant suite behind the `verify` subcommand: every
//! check pits an implementation against an independent definition and
//! reports pass/fail without touching the filesystem.

use anyhow::Result;

use omnilens_core::alignment::{contrastive_loss, AlignmentBatch, Temperature};
use omnilens_core::array::Array;
use omnilens_core::backbone::interpolate_pos_rows;
use omnilens_core::dsp::{fft_radix2, log_mel_spectrogram};
use omnilens_core::metrics::{
    fit_probe, mean_average_precision, retrieval_recall, zero_shot_classify, ProbeConfig,
};
use omnilens_core::oracle::{
    contrastive_loss_direct, fps_brute_force, knn_brute_force, logistic_newton, map_direct,
    naive_dft, recall_at_k_direct, zero_shot_direct,
};
use omnilens_core::param::ParamStore;
use omnilens_core::rng::Rng;
use omnilens_core::serialize::{
    decode_checkpoint, decode_point_cloud, decode_wav, encode_checkpoint, encode_point_cloud,
    encode_wav, records_into_store, store_to_records, Waveform,
};
use omnilens_core::tape::Tape;
use omnilens_core::tokenize::point::{fps, knn_group, PointCloud};

use crate::config::{DataConfig, Modality, RunConfig};
use crate::io::{decode_grid, encode_grid};
use crate::model::Pipeline;
use crate::synth::gen_synthetic;

pub struct Check {
    pub name: &'static str,
    pub error: Option<String>,
}

impl Check {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

fn check(name: &'static str, run: impl FnOnce() -> Result<(), String>) -> Check {
    Check { name, error: run().err() }
}

fn random_cloud(rng: &mut Rng, n: usize) -> PointCloud {
    let data: Vec<f64> = (0..n * 3).map(|_| rng.normal_f64()).collect();
    PointCloud { points: Array::from_vec(n, 3, data).unwrap() }
}

fn random_unit_rows(rng: &mut Rng, rows: usize, cols: usize) -> Array<f64> {
    let mut data = vec![0.0f64; rows * cols];
    for r in 0..rows {
        let mut norm = 0.0;
        for c in 0..cols {
            let v = rng.normal_f64();
            data[r * cols + c] = v;
            norm += v * v;
        }
        let inv = 1.0 / norm.sqrt().max(1e-12);
        for c in 0..cols {
            data[r * cols + c] *= inv;
        }
    }
    Array::from_vec(rows, cols, data).unwrap()
}

fn fps_vs_brute_force(seed: u64) -> Result<(), String> {
    let mut rng = Rng::from_seed(seed);
    for case in 0..20 {
        let n = 8 + rng.below(56);
        let g = 1 + rng.below(n.min(12));
        let pc = random_cloud(&mut rng, n);
        let got = fps(&pc, g, 0).map_err(|e| e.to_string())?;
        let want = fps_brute_force(&pc.points, g, 0);
        if got != want {
            return Err(format!("case {case}: selected {got:?}, brute force {want:?}"));
        }
    }
    Ok(())
}

fn knn_vs_brute_force(seed: u64) -> Result<(), String> {
    let mut rng = Rng::from_seed(seed);
    for case in 0..20 {
        let n = 10 + rng.below(40);
        let k = 1 + rng.below(6);
        let g = 1 + rng.below(6);
        let pc = random_cloud(&mut rng, n);
        let centers = fps(&pc, g, 0).map_err(|e| e.to_string())?;
        let patches = knn_group(&pc, &centers, k).map_err(|e| e.to_string())?;
        for (ci, &center_idx) in centers.iter().enumerate() {
            let want = knn_brute_force(&pc.points, center_idx, k);
            for (j, &nb) in want.iter().enumerate() {
                for axis in 0..3 {
                    let got = patches.groups.at(ci * k + j, axis);
                    let expect = pc.points.at(nb, axis) - pc.points.at(center_idx, axis);
                    if got.to_bits() != expect.to_bits() {
                        return Err(format!(
                            "case {case}: group {ci} neighbor {j} axis {axis}: {got} vs {expect}"
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

fn fft_vs_naive_dft(seed: u64) -> Result<(), String> {
    let mut rng = Rng::from_seed(seed);
    let n = 128;
    let x: Vec<f64> = (0..n).map(|_| rng.normal_f64()).collect();
    let mut re = x.clone();
    let mut im = vec![0.0f64; n];
    fft_radix2(&mut re, &mut im).map_err(|e| e.to_string())?;
    let (want_re, want_im) = naive_dft(&x);
    for i in 0..n {
        let err = ((re[i] - want_re[i]).powi(2) + (im[i] - want_im[i]).powi(2)).sqrt();
        if err > 1e-9 {
            return Err(format!("bin {i}: error {err:.3e}"));
        }
    }
    Ok(())
}

fn spectrogram_frame_law() -> Result<(), String> {
    for (seconds, want_frames) in [(5.0f64, 500usize), (1.0, 100), (0.2, 20)] {
        let sr = 16_000u32;
        let samples = vec![0.1f64; (seconds * sr as f64).round() as usize];
        let spec =
            log_mel_spectrogram(&samples, sr, 128, 25, 10).map_err(|e| e.to_string())?;
        if spec.n_mels() != 128 || spec.frames() != want_frames {
            return Err(format!(
                "{seconds}s: got {}x{}, want 128x{want_frames}",
                spec.n_mels(),
                spec.frames()
            ));
        }
    }
    Ok(())
}

fn zero_shot_vs_oracle(seed: u64) -> Result<(), String> {
    let mut rng = Rng::from_seed(seed);
    for case in 0..30 {
        let q = 1 + rng.below(16);
        let c = 2 + rng.below(10);
        let d = 2 + rng.below(8);
        let k = 1 + rng.below(c);
        let emb = random_unit_rows(&mut rng, q, d);
        let classes = random_unit_rows(&mut rng, c, d);
        let labels: Vec<usize> = (0..q).map(|_| rng.below(c)).collect();
        let got = zero_shot_classify(&emb, &classes, &labels, k).map_err(|e| e.to_string())?;
        let want = zero_shot_direct(&emb, &classes, &labels, k);
        if got != want {
            return Err(format!("case {case}: {got} vs oracle {want}"));
        }
    }
    Ok(())
}

fn recall_vs_oracle(seed: u64) -> Result<(), String> {
    let mut rng = Rng::from_seed(seed);
    for case in 0..30 {
        let q = 1 + rng.below(12);
        let g = 1 + rng.below(20);
        let d = 2 + rng.below(8);
        let k = 1 + rng.below(g);
        let queries = random_unit_rows(&mut rng, q, d);
        let gallery = random_unit_rows(&mut rng, g, d);
        let truth: Vec<usize> = (0..q).map(|_| rng.below(g)).collect();
        let got =
            retrieval_recall(&queries, &gallery, &truth, k).map_err(|e| e.to_string())?;
        let want = recall_at_k_direct(&queries, &gallery, &truth, k);
        if got != want {
            return Err(format!("case {case}: {got} vs oracle {want}"));
        }
    }
    Ok(())
}

fn map_vs_oracle(seed: u64) -> Result<(), String> {
    let mut rng = Rng::from_seed(seed);
    for case in 0..30 {
        let q = 1 + rng.below(10);
        let c = 2 + rng.below(8);
        let mut scores = vec![0.0f64; q * c];
        for v in scores.iter_mut() {
            *v = rng.normal_f64();
        }
        let scores = Array::from_vec(q, c, scores).unwrap();
        let mut labels = vec![false; q * c];
        for l in labels.iter_mut() {
            *l = rng.coin(0.3);
        }
        if !labels.iter().any(|&l| l) {
            labels[0] = true;
        }
        let got = mean_average_precision(&scores, &labels).map_err(|e| e.to_string())?;
        let want = map_direct(&scores, &labels).expect("some positives");
        if (got - want).abs() > 1e-12 {
            return Err(format!("case {case}: {got} vs oracle {want}"));
        }
    }
    Ok(())
}

fn metric_monotonicity(seed: u64) -> Result<(), String> {
    let mut rng = Rng::from_seed(seed);
    let q = 12;
    let c = 8;
    let d = 6;
    let emb = random_unit_rows(&mut rng, q, d);
    let classes = random_unit_rows(&mut rng, c, d);
    let labels: Vec<usize> = (0..q).map(|_| rng.below(c)).collect();
    let mut prev = 0.0;
    for k in 1..=c {
        let acc = zero_shot_classify(&emb, &classes, &labels, k).map_err(|e| e.to_string())?;
        if acc + 1e-15 < prev {
            return Err(format!("top-{k} accuracy {acc} dropped below top-{} {prev}", k - 1));
        }
        prev = acc;
    }
    let gallery = random_unit_rows(&mut rng, 10, d);
    let truth: Vec<usize> = (0..q).map(|_| rng.below(10)).collect();
    let mut prev = 0.0;
    for k in 1..=10 {
        let r = retrieval_recall(&emb, &gallery, &truth, k).map_err(|e| e.to_string())?;
        if r + 1e-15 < prev {
            return Err(format!("recall@{k} {r} dropped below recall@{} {prev}", k - 1));
        }
        prev = r;
    }
    Ok(())
}

fn alignment_loss_values(seed: u64) -> Result<(), String> {
    let mut store: ParamStore<f64> = ParamStore::new();
    let temp = Temperature::with_range(&mut store, "verify", 1.0, 0.01, 1.0)
        .map_err(|e| e.to_string())?;
    // One pair: the only logit is the diagonal, so the loss is exactly zero.
    let mut tape: Tape<f64> = Tape::new();
    let row = Array::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
    let s = tape.constant(row.clone());
    let a = tape.constant(row);
    let batch = AlignmentBatch { student: s, anchors: vec![a] };
    let loss = contrastive_loss(&mut tape, &store, &batch, &temp).map_err(|e| e.to_string())?;
    let got = tape.value(loss).at(0, 0);
    if got != 0.0 {
        return Err(format!("single-pair loss {got}, want exactly 0"));
    }
    // Two orthonormal pairs at tau=1: every direction sees logits (1, 0) with
    // the true class first, so the loss is ln(1 + e^-1).
    let mut tape: Tape<f64> = Tape::new();
    let eye = Array::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let s = tape.constant(eye.clone());
    let a = tape.constant(eye);
    let batch = AlignmentBatch { student: s, anchors: vec![a] };
    let loss = contrastive_loss(&mut tape, &store, &batch, &temp).map_err(|e| e.to_string())?;
    let got = tape.value(loss).at(0, 0);
    let want = (1.0 + (-1.0f64).exp()).ln();
    if (got - want).abs() > 1e-9 {
        return Err(format!("orthonormal-pair loss {got}, want {want}"));
    }
    // Random batch against the direct summation oracle.
    let mut rng = Rng::from_seed(seed);
    let student = random_unit_rows(&mut rng, 5, 8);
    let anchor1 = random_unit_rows(&mut rng, 5, 8);
    let anchor2 = random_unit_rows(&mut rng, 5, 8);
    let mut tape: Tape<f64> = Tape::new();
    let s = tape.constant(student.clone());
    let a1 = tape.constant(anchor1.clone());
    let a2 = tape.constant(anchor2.clone());
    let batch = AlignmentBatch { student: s, anchors: vec![a1, a2] };
    let loss = contrastive_loss(&mut tape, &store, &batch, &temp).map_err(|e| e.to_string())?;
    let got = tape.value(loss).at(0, 0);
    let want = contrastive_loss_direct(&student, &[anchor1, anchor2], 1.0);
    if (got - want).abs() > 1e-12 {
        return Err(format!("random batch loss {got}, oracle {want}"));
    }
    Ok(())
}

fn probe_vs_newton(seed: u64) -> Result<(), String> {
    let mut rng = Rng::from_seed(seed);
    let n = 24;
    let d = 3;
    let mut x = vec![0.0f64; n * d];
    let mut y64 = vec![0.0f64; n];
    let mut labels = vec![0usize; n];
    for i in 0..n {
        let cls = i % 2;
        labels[i] = cls;
        y64[i] = cls as f64;
        for j in 0..d {
            x[i * d + j] = rng.normal_f64() + if cls == 1 { 1.1 } else { -1.1 };
        }
    }
    let features = Array::from_vec(n, d, x).unwrap();
    let cfg = ProbeConfig { lr: 0.5, max_iters: 200_000, tol: 1e-12, l2: 0.2 };
    let model = fit_probe(&features, &labels, 2, &cfg).map_err(|e| e.to_string())?;
    // Two-class softmax with ridge l2 collapses to binary logistic with
    // ridge l2/2 on the row difference.
    let (w, b) = logistic_newton(&features, &y64, cfg.l2 / 2.0, 60);
    for j in 0..d {
        let diff = model.w[d + j] - model.w[j];
        if (diff - w[j]).abs() > 1e-6 {
            return Err(format!("weight {j}: probe diff {diff} vs newton {}", w[j]));
        }
    }
    let bdiff = model.b[1] - model.b[0];
    if (bdiff - b).abs() > 1e-6 {
        return Err(format!("bias: probe diff {bdiff} vs newton {b}"));
    }
    Ok(())
}

fn interpolation_identity(seed: u64) -> Result<(), String> {
    let mut rng = Rng::from_seed(seed);
    let table = random_unit_rows(&mut rng, 9, 4);
    let same = interpolate_pos_rows(&table, 9).map_err(|e| e.to_string())?;
    for (a, b) in same.data().iter().zip(table.data().iter()) {
        if a.to_bits() != b.to_bits() {
            return Err(format!("identity resize changed {b} to {a}"));
        }
    }
    Ok(())
}

fn containers_roundtrip(seed: u64) -> Result<(), String> {
    let mut rng = Rng::from_seed(seed);
    // Checkpoint: the container carries f32 payloads, so roundtrips are
    // bit-exact against an f32 parameter store.
    let mut cfg = RunConfig::default_for(Modality::Depth);
    cfg.data = DataConfig { classes: 2, train_per_class: 1, val_per_class: 1, test_per_class: 1 };
    cfg.eval.probe_shots = 1;
    let pipe: Pipeline<f32> = Pipeline::build(&cfg).map_err(|e| e.to_string())?;
    let bytes = encode_checkpoint(&store_to_records(&pipe.store));
    let records = decode_checkpoint(&bytes).map_err(|e| e.to_string())?;
    let mut other: Pipeline<f32> = Pipeline::build(&cfg).map_err(|e| e.to_string())?;
    records_into_store(&records, &mut other.store).map_err(|e| e.to_string())?;
    let a = pipe.store.snapshot();
    let b = other.store.snapshot();
    if a.len() != b.len()
        || a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits())
    {
        return Err("checkpoint roundtrip changed parameter bits".to_string());
    }
    let again = encode_checkpoint(&decode_checkpoint(&bytes).map_err(|e| e.to_string())?);
    if again != bytes {
        return Err("re-encoding decoded records changed the byte stream".to_string());
    }
    // Waveform: 16-bit quantization is exact for already-quantized samples.
    let samples: Vec<f32> =
        (0..64).map(|_| (rng.below(65536) as i32 - 32768) as f32 / 32768.0).collect();
    let wav = encode_wav(&Waveform { sample_rate: 16_000, samples: samples.clone() });
    let back = decode_wav(&wav).map_err(|e| e.to_string())?;
    if back.samples.len() != samples.len() {
        return Err("wav roundtrip changed length".to_string());
    }
    for (i, (x, y)) in samples.iter().zip(back.samples.iter()).enumerate() {
        if (x - y).abs() > 1.0 / 32768.0 {
            return Err(format!("wav sample {i}: {x} vs {y}"));
        }
    }
    // Point cloud container.
    let cloud: Vec<f32> = (0..30).map(|_| rng.normal_f64() as f32).collect();
    let arr = Array::from_vec(10, 3, cloud).unwrap();
    let bytes = encode_point_cloud(&arr).map_err(|e| e.to_string())?;
    let back = decode_point_cloud(&bytes).map_err(|e| e.to_string())?;
    if back.data().iter().zip(arr.data().iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err("point cloud roundtrip changed bits".to_string());
    }
    // Grid container.
    let grid = omnilens_core::tokenize::grid::Grid {
        h: 4,
        w: 5,
        c: 2,
        data: (0..40).map(|_| rng.normal_f64()).collect(),
    };
    let back = decode_grid(&encode_grid(&grid)).map_err(|e| e.to_string())?;
    for (a, b) in back.data.iter().zip(grid.data.iter()) {
        if (*a as f32).to_bits() != (*b as f32).to_bits() {
            return Err("grid roundtrip changed stored f32 bits".to_string());
        }
    }
    Ok(())
}

fn synthesis_determinism(seed: u64) -> Result<(), String> {
    for modality in Modality::ALL {
        let mut cfg = RunConfig::default_for(modality);
        cfg.data =
            DataConfig { classes: 2, train_per_class: 1, val_per_class: 1, test_per_class: 1 };
        cfg.tokenizer.n_points = 64;
        cfg.tokenizer.clip_seconds = 0.2;
        cfg.eval.probe_shots = 1;
        let a = gen_synthetic(&cfg, seed).map_err(|e| e.to_string())?;
        let b = gen_synthetic(&cfg, seed).map_err(|e| e.to_string())?;
        for (sa, sb) in a.samples.iter().zip(b.samples.iter()) {
            let same = match (&sa.payload, &sb.payload) {
                (crate::synth::Payload::Points(x), crate::synth::Payload::Points(y)) => x
                    .points
                    .data()
                    .iter()
                    .zip(y.points.data())
                    .all(|(p, q)| p.to_bits() == q.to_bits()),
                (crate::synth::Payload::Audio(x), crate::synth::Payload::Audio(y)) => {
                    x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits())
                }
                (crate::synth::Payload::Grid(x), crate::synth::Payload::Grid(y)) => {
                    x.data.iter().zip(y.data.iter()).all(|(p, q)| p.to_bits() == q.to_bits())
                }
                (crate::synth::Payload::Eeg(x), crate::synth::Payload::Eeg(y)) => x
                    .values
                    .data()
                    .iter()
                    .zip(y.values.data())
                    .all(|(p, q)| p.to_bits() == q.to_bits()),
                _ => false,
            };
            if !same {
                return Err(format!("{:?}: sample {} differs across runs", modality, sa.id));
            }
        }
    }
    Ok(())
}

fn token_counts_match_config(seed: u64) -> Result<(), String> {
    for modality in Modality::ALL {
        let mut cfg = RunConfig::default_for(modality);
        cfg.data =
            DataConfig { classes: 2, train_per_class: 1, val_per_class: 1, test_per_class: 1 };
        cfg.tokenizer.n_points = 64;
        cfg.tokenizer.groups = 8;
        cfg.tokenizer.neighbors = 4;
        cfg.tokenizer.clip_seconds = 0.2;
        cfg.eval.probe_shots = 1;
        let pipe: Pipeline<f64> = Pipeline::build(&cfg).map_err(|e| e.to_string())?;
        let ds = gen_synthetic(&cfg, seed).map_err(|e| e.to_string())?;
        let prepared =
            pipe.prepare(&ds.samples[0].payload).map_err(|e| e.to_string())?;
        let mut tape: Tape<f64> = Tape::new();
        let tokens = pipe.encode_tokens(&mut tape, &prepared).map_err(|e| e.to_string())?;
        let want = cfg.tokenizer.token_count(modality).map_err(|e| e.to_string())?;
        if tokens.m != want {
            return Err(format!("{modality:?}: {} tokens, config says {want}", tokens.m));
        }
    }
    Ok(())
}

fn lens_bottleneck_length(seed: u64) -> Result<(), String> {
    use omnilens_core::lens::{Lens, LensConfig, LensVariant};
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = Rng::from_seed(seed);
    let cfg = LensConfig {
        variant: LensVariant::IterCSAttn,
        d: 16,
        heads: 2,
        n_latents: 6,
        blocks: 2,
        self_layers: 1,
        tie_weights: false,
    };
    let lens = Lens::new(&mut store, &cfg, "verify", &mut rng).map_err(|e| e.to_string())?;
    for m in [5usize, 40, 72] {
        let mut tape: Tape<f64> = Tape::new();
        let tokens = random_unit_rows(&mut rng, m, 16);
        let node = tape.constant(tokens);
        let seq = omnilens_core::tokenize::TokenSequence { node, m, d: 16 };
        let out = lens.forward(&mut tape, &store, &seq).map_err(|e| e.to_string())?;
        if out.m != 6 {
            return Err(format!("input length {m} routed to {} tokens, want 6", out.m));
        }
    }
    Ok(())
}

/// Run every invariant check. All randomness derives from `seed`.
pub fn run_all(seed: u64) -> Vec<Check> {
    vec![
        check("farthest point sampling matches brute force", || fps_vs_brute_force(seed)),
        check("neighbor grouping matches brute force", || knn_vs_brute_force(seed)),
        check("fft matches naive dft", || fft_vs_naive_dft(seed)),
        check("spectrogram frame count follows the hop law", spectrogram_frame_law),
        check("zero-shot accuracy matches sort oracle", || zero_shot_vs_oracle(seed)),
        check("retrieval recall matches sort oracle", || recall_vs_oracle(seed)),
        check("mean average precision matches definitional oracle", || map_vs_oracle(seed)),
        check("top-k and recall@k are monotone in k", || metric_monotonicity(seed)),
        check("alignment loss hits closed-form values", || alignment_loss_values(seed)),
        check("linear probe matches newton solve", || probe_vs_newton(seed)),
        check("positional resize at equal length is identity", || interpolation_identity(seed)),
        check("containers roundtrip bit-exactly", || containers_roundtrip(seed)),
        check("synthetic data is seed-deterministic", || synthesis_determinism(seed)),
        check("token counts match configured geometry", || token_counts_match_config(seed)),
        check("iterative lens always emits the latent count", || lens_bottleneck_length(seed)),
    ]
}
