//! Analytic cost model and wall-clock measurement for the attention
//! bottleneck.
//!
//! Score FLOPs count the two quadratic matmuls per attention layer, summed
//! over heads (h heads of width d/h):
//!
//!   QK^T:    2 * s^2 * d   (multiply + add per cell)
//!   attn V:  2 * s^2 * d
//!
//! so score_flops(s, d) = 4 * s^2 * d per layer. Projections (8*s*d^2 per
//! layer) and the MLP (16*s*d^2) are linear in s and excluded: the routing
//! comparison is about how cost scales with input length, and only the
//! score terms scale quadratically.

use std::time::Instant;

use anyhow::Result;
use serde::Serialize;

use omnilens_core::array::Array;
use omnilens_core::nn::MultiHeadAttention;
use omnilens_core::param::ParamStore;
use omnilens_core::rng::Rng;
use omnilens_core::scalar::Scalar;
use omnilens_core::tape::Tape;

use crate::config::RunConfig;
use crate::model::wrap;

/// Quadratic score FLOPs for one attention layer at sequence length `s`.
pub fn score_flops_per_layer(s: usize, d: usize) -> u64 {
    4 * (s as u64) * (s as u64) * (d as u64)
}

/// Linear-in-s projection FLOPs (q, k, v, o) for one layer.
pub fn projection_flops_per_layer(s: usize, d: usize) -> u64 {
    8 * (s as u64) * (d as u64) * (d as u64)
}

/// Linear-in-s MLP FLOPs for one layer at the 4x hidden ratio.
pub fn mlp_flops_per_layer(s: usize, d: usize) -> u64 {
    16 * (s as u64) * (d as u64) * (d as u64)
}

/// Trunk sequence length for an input of `m` tokens under the configured
/// lens, counting the class token when the trunk prepends one.
pub fn trunk_seq_len(cfg: &RunConfig, m: usize) -> usize {
    cfg.lens.output_len(m) + usize::from(cfg.backbone.use_cls)
}

/// Total quadratic score FLOPs across the trunk blocks that actually run.
pub fn trunk_score_flops(cfg: &RunConfig, m: usize) -> u64 {
    let layers = (cfg.backbone.l_last - cfg.backbone.l_first + 1) as u64;
    layers * score_flops_per_layer(trunk_seq_len(cfg, m), cfg.backbone.d)
}

/// Element counts over a parameter store: (total, trainable).
pub fn param_counts<S: Scalar>(store: &ParamStore<S>) -> (usize, usize) {
    let mut total = 0usize;
    let mut trainable = 0usize;
    for (_, p) in store.iter() {
        total += p.value.len();
        if !p.frozen {
            trainable += p.value.len();
        }
    }
    (total, trainable)
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingRow {
    pub m: usize,
    pub score_flops: u64,
    /// Best-of-repeats wall time for the quadratic attention core.
    pub seconds: f64,
    /// Least-squares quadratic-law prediction c * m^2 over the row set.
    pub predicted: f64,
}

/// Time the quadratic part of one attention layer: per-head QK^T, scaling,
/// softmax, and attention-weighted sum. Projections run once outside the
/// timed region; they are linear in m and common to both routing modes.
pub fn time_attention_core<S: Scalar>(
    m: usize,
    d: usize,
    heads: usize,
    repeats: usize,
) -> Result<f64> {
    let mut store: ParamStore<S> = ParamStore::new();
    let mut rng = Rng::from_seed(0x5eed);
    let attn = MultiHeadAttention::new(&mut store, "bench", d, heads, &mut rng).map_err(wrap)?;
    let dh = d / heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut data = vec![0.0f64; m * d];
    for v in data.iter_mut() {
        *v = rng.normal_f64() * 0.3;
    }
    let input = Array::from_vec(m, d, data.iter().map(|&v| S::from_f64(v)).collect())
        .map_err(wrap)?;
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let mut tape: Tape<S> = Tape::new();
        let x = tape.constant(input.clone());
        let q = attn.wq.forward(&mut tape, &store, x).map_err(wrap)?;
        let k = attn.wk.forward(&mut tape, &store, x).map_err(wrap)?;
        let v = attn.wv.forward(&mut tape, &store, x).map_err(wrap)?;
        let mut slices = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh).map_err(wrap)?;
            let kh = tape.slice_cols(k, h * dh, dh).map_err(wrap)?;
            let vh = tape.slice_cols(v, h * dh, dh).map_err(wrap)?;
            let kt = tape.transpose(kh);
            slices.push((qh, kt, vh));
        }
        let start = Instant::now();
        for &(qh, kt, vh) in &slices {
            let scores = tape.matmul(qh, kt).map_err(wrap)?;
            let scaled = tape.scale(scores, scale);
            let attn_w = tape.softmax(scaled);
            let out = tape.matmul(attn_w, vh).map_err(wrap)?;
            // Touch the output so the work cannot be elided.
            std::hint::black_box(tape.value(out).at(0, 0));
        }
        let dt = start.elapsed().as_secs_f64();
        best = best.min(dt);
    }
    Ok(best)
}

/// Measure full-length routing at each m and attach the fitted quadratic
/// prediction. The fit minimizes squared error for t = c * m^2 over the
/// measured set, so systematic constants cancel and only departures from
/// the quadratic law remain.
pub fn routing_timings<S: Scalar>(
    ms: &[usize],
    d: usize,
    heads: usize,
    repeats: usize,
) -> Result<Vec<TimingRow>> {
    let mut rows: Vec<(usize, f64)> = Vec::with_capacity(ms.len());
    for &m in ms {
        rows.push((m, time_attention_core::<S>(m, d, heads, repeats)?));
    }
    let num: f64 = rows.iter().map(|&(m, t)| t * (m * m) as f64).sum();
    let den: f64 = rows.iter().map(|&(m, _)| ((m * m) as f64).powi(2)).sum();
    let c = if den > 0.0 { num / den } else { 0.0 };
    Ok(rows
        .into_iter()
        .map(|(m, seconds)| TimingRow {
            m,
            score_flops: score_flops_per_layer(m, d),
            seconds,
            predicted: c * (m * m) as f64,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Modality;

    #[test]
    fn doubling_length_quadruples_score_flops_exactly() {
        for m in [64usize, 256, 1000] {
            let a = score_flops_per_layer(m, 64);
            let b = score_flops_per_layer(2 * m, 64);
            assert_eq!(b, 4 * a);
        }
    }

    #[test]
    fn bottleneck_makes_trunk_flops_length_independent() {
        let cfg = RunConfig::default_for(Modality::PointCloud);
        let at_32 = trunk_score_flops(&cfg, 32);
        let at_196 = trunk_score_flops(&cfg, 196);
        let at_2048 = trunk_score_flops(&cfg, 2048);
        assert_eq!(at_32, at_196);
        assert_eq!(at_196, at_2048);
        assert!(at_32 > 0);
    }

    #[test]
    fn timing_rows_carry_fitted_prediction() {
        let rows = routing_timings::<f64>(&[32, 64], 16, 2, 2).unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert!(row.seconds > 0.0);
            assert!(row.predicted > 0.0);
        }
        assert_eq!(rows[1].score_flops, 4 * rows[0].score_flops);
    }
}
