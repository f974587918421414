//! Independent reference implementations used to verify the fast paths.
//!
//! Everything here is written as plain loops over plain arrays, never in
//! terms of the tape or the production kernels, so a bug in those cannot
//! hide in its own oracle. Unit tests, the acceptance suite, and the
//! `verify` command all call into this module.

use alloc::vec;
use alloc::vec::Vec;

use crate::array::Array;

/// Direct O(n^2) DFT of a real signal.
pub fn naive_dft(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for k in 0..n {
        let mut sr = 0.0;
        let mut si = 0.0;
        for (t, &v) in x.iter().enumerate() {
            let ang = -2.0 * core::f64::consts::PI * k as f64 * t as f64 / n as f64;
            sr += v * libm::cos(ang);
            si += v * libm::sin(ang);
        }
        re[k] = sr;
        im[k] = si;
    }
    (re, im)
}

fn linear(x: &Array<f64>, w: &Array<f64>, b: &Array<f64>) -> Array<f64> {
    let mut out = crate::array::matmul(x, w).expect("oracle shapes");
    for r in 0..out.rows() {
        for c in 0..out.cols() {
            *out.at_mut(r, c) += b.at(0, c);
        }
    }
    out
}

/// Weights for one attention module, plain arrays.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub wq: Array<f64>,
    pub bq: Array<f64>,
    pub wk: Array<f64>,
    pub bk: Array<f64>,
    pub wv: Array<f64>,
    pub bv: Array<f64>,
    pub wo: Array<f64>,
    pub bo: Array<f64>,
    pub heads: usize,
}

/// Multi-head attention by explicit per-query loops.
pub fn attention_explicit(
    q_in: &Array<f64>,
    kv_in: &Array<f64>,
    w: &AttentionWeights,
) -> Array<f64> {
    let d = w.wq.cols();
    let dh = d / w.heads;
    let q = linear(q_in, &w.wq, &w.bq);
    let k = linear(kv_in, &w.wk, &w.bk);
    let v = linear(kv_in, &w.wv, &w.bv);
    let (mq, mk) = (q.rows(), k.rows());
    let mut merged = Array::zeros(mq, d);
    for h in 0..w.heads {
        for i in 0..mq {
            let mut scores = vec![0.0f64; mk];
            for j in 0..mk {
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += q.at(i, h * dh + c) * k.at(j, h * dh + c);
                }
                scores[j] = dot / libm::sqrt(dh as f64);
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut den = 0.0;
            for s in scores.iter_mut() {
                *s = libm::exp(*s - mx);
                den += *s;
            }
            for c in 0..dh {
                let mut acc = 0.0;
                for j in 0..mk {
                    acc += scores[j] / den * v.at(j, h * dh + c);
                }
                *merged.at_mut(i, h * dh + c) = acc;
            }
        }
    }
    linear(&merged, &w.wo, &w.bo)
}

pub fn layer_norm_explicit(
    x: &Array<f64>,
    gain: &Array<f64>,
    bias: &Array<f64>,
    eps: f64,
) -> Array<f64> {
    let (m, d) = x.shape();
    let mut out = Array::zeros(m, d);
    for r in 0..m {
        let row = x.row_slice(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / libm::sqrt(var + eps);
        for c in 0..d {
            *out.at_mut(r, c) = (row[c] - mean) * inv * gain.at(0, c) + bias.at(0, c);
        }
    }
    out
}

pub fn gelu_explicit(x: &Array<f64>) -> Array<f64> {
    let mut out = x.clone();
    for v in out.data_mut() {
        let inner = 0.797_884_560_802_865_4 * (*v + 0.044_715 * *v * *v * *v);
        *v = 0.5 * *v * (1.0 + libm::tanh(inner));
    }
    out
}

/// Weights for one pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub ln1_gain: Array<f64>,
    pub ln1_bias: Array<f64>,
    /// Present only for cross-attention blocks.
    pub lnkv: Option<(Array<f64>, Array<f64>)>,
    pub attn: AttentionWeights,
    pub ln2_gain: Array<f64>,
    pub ln2_bias: Array<f64>,
    pub fc1_w: Array<f64>,
    pub fc1_b: Array<f64>,
    pub fc2_w: Array<f64>,
    pub fc2_b: Array<f64>,
}

fn add_arrays(a: &Array<f64>, b: &Array<f64>) -> Array<f64> {
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    out
}

/// Pre-norm block: x + attn(ln1 x), then + mlp(ln2 of that). `context`
/// switches on cross-attention through the kv norm.
pub fn transformer_block_explicit(
    x: &Array<f64>,
    context: Option<&Array<f64>>,
    w: &BlockWeights,
    eps: f64,
) -> Array<f64> {
    let q = layer_norm_explicit(x, &w.ln1_gain, &w.ln1_bias, eps);
    let attended = match (context, &w.lnkv) {
        (Some(ctx), Some((g, b))) => {
            let kv = layer_norm_explicit(ctx, g, b, eps);
            attention_explicit(&q, &kv, &w.attn)
        }
        (None, _) => attention_explicit(&q, &q, &w.attn),
        (Some(_), None) => panic!("oracle block has no kv norm for cross-attention"),
    };
    let x = add_arrays(x, &attended);
    let normed = layer_norm_explicit(&x, &w.ln2_gain, &w.ln2_bias, eps);
    let h = linear(&normed, &w.fc1_w, &w.fc1_b);
    let h = gelu_explicit(&h);
    let expanded = linear(&h, &w.fc2_w, &w.fc2_b);
    add_arrays(&x, &expanded)
}

fn dist2(points: &Array<f64>, a: usize, b: usize) -> f64 {
    let mut acc = 0.0;
    for c in 0..3 {
        let d = points.at(a, c) - points.at(b, c);
        acc += d * d;
    }
    acc
}

/// Farthest point sampling by the definition: start at `start`, then
/// repeatedly take the point maximizing the distance to the chosen set
/// (lowest index wins ties).
pub fn fps_brute_force(points: &Array<f64>, g: usize, start: usize) -> Vec<usize> {
    let n = points.rows();
    let mut chosen = vec![start];
    while chosen.len() < g {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for i in 0..n {
            if chosen.contains(&i) {
                continue;
            }
            // distance to the set = min over chosen
            let mut dmin = f64::INFINITY;
            for &c in &chosen {
                dmin = dmin.min(dist2(points, i, c));
            }
            if dmin > best.1 {
                best = (i, dmin);
            }
        }
        chosen.push(best.0);
    }
    chosen
}

/// k nearest points to `center_idx` by full sort (stable: ties by index).
pub fn knn_brute_force(points: &Array<f64>, center_idx: usize, k: usize) -> Vec<usize> {
    let n = points.rows();
    let mut order: Vec<usize> = (0..n).collect();
    // Insertion sort keeps this dependency-free and stable.
    for i in 1..n {
        let mut j = i;
        while j > 0 {
            let (a, b) = (order[j - 1], order[j]);
            let (da, db) = (dist2(points, center_idx, a), dist2(points, center_idx, b));
            if da > db || (da == db && a > b) {
                order.swap(j - 1, j);
                j -= 1;
            } else {
                break;
            }
        }
    }
    order.truncate(k);
    order
}

/// The symmetric multi-anchor contrastive loss by direct summation:
/// logits_ij = h_i . a_j / tau per anchor set, cross-entropy both ways,
/// averaged over 2 * B * n_anchors terms.
pub fn contrastive_loss_direct(student: &Array<f64>, anchors: &[Array<f64>], tau: f64) -> f64 {
    let b = student.rows();
    let mut total = 0.0;
    for a in anchors {
        let mut logits = Array::zeros(b, b);
        for i in 0..b {
            for j in 0..b {
                let mut dot = 0.0;
                for c in 0..student.cols() {
                    dot += student.at(i, c) * a.at(j, c);
                }
                *logits.at_mut(i, j) = dot / tau;
            }
        }
        for i in 0..b {
            // row softmax: student i against all anchors
            let row: Vec<f64> = (0..b).map(|j| logits.at(i, j)).collect();
            total -= log_softmax_at(&row, i);
            // column softmax: anchor i against all students
            let col: Vec<f64> = (0..b).map(|j| logits.at(j, i)).collect();
            total -= log_softmax_at(&col, i);
        }
    }
    total / (2.0 * b as f64 * anchors.len() as f64)
}

fn log_softmax_at(v: &[f64], idx: usize) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + libm::log(v.iter().map(|&e| libm::exp(e - mx)).sum::<f64>());
    v[idx] - lse
}

/// Endpoint-preserving linear resampling of rows: row j of the output sits
/// at fractional source position j*(old-1)/(new-1).
pub fn interp_rows_direct(table: &Array<f64>, new_len: usize) -> Array<f64> {
    let (old, d) = table.shape();
    let mut out = Array::zeros(new_len, d);
    if new_len == 1 {
        for c in 0..d {
            *out.at_mut(0, c) = table.at(0, c);
        }
        return out;
    }
    for j in 0..new_len {
        let x = j as f64 * (old - 1) as f64 / (new_len - 1) as f64;
        let i0 = libm::floor(x) as usize;
        let i1 = (i0 + 1).min(old - 1);
        let frac = x - i0 as f64;
        for c in 0..d {
            *out.at_mut(j, c) = table.at(i0, c) * (1.0 - frac) + table.at(i1, c) * frac;
        }
    }
    out
}

/// Direct bilinear resampling of a position table laid out as an h*w grid of
/// d-wide rows (row-major). Align-corners on both axes, matching
/// `interp_rows_direct` applied per axis.
pub fn interp_grid_direct(
    table: &Array<f64>,
    src: (usize, usize),
    dst: (usize, usize),
) -> Array<f64> {
    let d = table.cols();
    let (h, w) = src;
    let (h2, w2) = dst;
    let axis = |j: usize, n_dst: usize, n_src: usize| -> f64 {
        if n_dst == 1 {
            0.0
        } else {
            j as f64 * (n_src - 1) as f64 / (n_dst - 1) as f64
        }
    };
    let mut out = Array::zeros(h2 * w2, d);
    for gy in 0..h2 {
        let y = axis(gy, h2, h);
        let y0 = libm::floor(y) as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for gx in 0..w2 {
            let x = axis(gx, w2, w);
            let x0 = libm::floor(x) as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            for c in 0..d {
                let v00 = table.at(y0 * w + x0, c);
                let v01 = table.at(y0 * w + x1, c);
                let v10 = table.at(y1 * w + x0, c);
                let v11 = table.at(y1 * w + x1, c);
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                *out.at_mut(gy * w2 + gx, c) = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Copy attention parameters out of a store into oracle form.
pub fn snapshot_attention(
    store: &crate::param::ParamStore<f64>,
    attn: &crate::nn::MultiHeadAttention,
) -> AttentionWeights {
    AttentionWeights {
        wq: store.get(attn.wq.w).value.clone(),
        bq: store.get(attn.wq.b).value.clone(),
        wk: store.get(attn.wk.w).value.clone(),
        bk: store.get(attn.wk.b).value.clone(),
        wv: store.get(attn.wv.w).value.clone(),
        bv: store.get(attn.wv.b).value.clone(),
        wo: store.get(attn.wo.w).value.clone(),
        bo: store.get(attn.wo.b).value.clone(),
        heads: attn.heads,
    }
}

/// Copy a whole transformer block's parameters into oracle form.
pub fn snapshot_block(
    store: &crate::param::ParamStore<f64>,
    b: &crate::nn::TransformerBlock,
) -> BlockWeights {
    BlockWeights {
        ln1_gain: store.get(b.ln1.gain).value.clone(),
        ln1_bias: store.get(b.ln1.bias).value.clone(),
        lnkv: b.ln_kv.as_ref().map(|kv| {
            (
                store.get(kv.gain).value.clone(),
                store.get(kv.bias).value.clone(),
            )
        }),
        attn: snapshot_attention(store, &b.attn),
        ln2_gain: store.get(b.ln2.gain).value.clone(),
        ln2_bias: store.get(b.ln2.bias).value.clone(),
        fc1_w: store.get(b.mlp.fc1.w).value.clone(),
        fc1_b: store.get(b.mlp.fc1.b).value.clone(),
        fc2_w: store.get(b.mlp.fc2.w).value.clone(),
        fc2_b: store.get(b.mlp.fc2.b).value.clone(),
    }
}

fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Indices 0..n sorted by score descending, equal scores keeping the lower
/// index first. This is the ranking convention all retrieval-style metrics
/// are defined against.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Top-K accuracy by full sorting: score every query against every class
/// row, sort, and check membership of the true class among the first k.
pub fn zero_shot_direct(
    embeddings: &Array<f64>,
    class_matrix: &Array<f64>,
    labels: &[usize],
    k: usize,
) -> f64 {
    let q = embeddings.rows();
    let mut hits = 0usize;
    for i in 0..q {
        let scores: Vec<f64> = (0..class_matrix.rows())
            .map(|c| dot_f64(embeddings.row_slice(i), class_matrix.row_slice(c)))
            .collect();
        let order = rank_descending(&scores);
        if order[..k.min(order.len())].contains(&labels[i]) {
            hits += 1;
        }
    }
    hits as f64 / q as f64
}

/// Recall@K by full sorting of the whole gallery per query.
pub fn recall_at_k_direct(
    queries: &Array<f64>,
    gallery: &Array<f64>,
    truth: &[usize],
    k: usize,
) -> f64 {
    let q = queries.rows();
    let mut hits = 0usize;
    for i in 0..q {
        let scores: Vec<f64> = (0..gallery.rows())
            .map(|g| dot_f64(queries.row_slice(i), gallery.row_slice(g)))
            .collect();
        let order = rank_descending(&scores);
        if order[..k.min(order.len())].contains(&truth[i]) {
            hits += 1;
        }
    }
    hits as f64 / q as f64
}

/// Mean average precision straight from the definition: per class, sort the
/// queries by score, walk the ranking, and take the precision at every
/// positive. Classes with no positives are skipped; returns `None` when no
/// class has a positive. `multilabels` is row-major Q x C.
pub fn map_direct(scores: &Array<f64>, multilabels: &[bool]) -> Option<f64> {
    let (q, c) = scores.shape();
    let mut ap_sum = 0.0;
    let mut classes = 0usize;
    for class in 0..c {
        let col: Vec<f64> = (0..q).map(|i| scores.at(i, class)).collect();
        let positives = (0..q).filter(|&i| multilabels[i * c + class]).count();
        if positives == 0 {
            continue;
        }
        let order = rank_descending(&col);
        let mut seen = 0usize;
        let mut prec_sum = 0.0;
        for (rank0, &query) in order.iter().enumerate() {
            if multilabels[query * c + class] {
                seen += 1;
                prec_sum += seen as f64 / (rank0 + 1) as f64;
            }
        }
        ap_sum += prec_sum / positives as f64;
        classes += 1;
    }
    if classes == 0 {
        None
    } else {
        Some(ap_sum / classes as f64)
    }
}

/// Gaussian elimination with partial pivoting. `a` is n x n row-major.
pub fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) {
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[pivot * n + col].abs() {
                pivot = r;
            }
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / diag;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= f * a[col * n + j];
            }
            b[r] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for j in col + 1..n {
            s -= a[col * n + j] * b[j];
        }
        b[col] = s / a[col * n + col];
    }
}

/// Binary ridge-logistic regression solved by Newton's method (IRLS) with an
/// explicit Hessian. Labels are 0/1, the bias is unregularized, and the
/// objective is mean log loss plus (ridge/2)*|w|^2. Returns (w, bias).
pub fn logistic_newton(
    x: &Array<f64>,
    y: &[f64],
    ridge: f64,
    iters: usize,
) -> (Vec<f64>, f64) {
    let (n, d) = x.shape();
    let dim = d + 1;
    let mut w = vec![0.0f64; dim];
    for _ in 0..iters {
        let mut grad = vec![0.0f64; dim];
        let mut hess = vec![0.0f64; dim * dim];
        for i in 0..n {
            let row = x.row_slice(i);
            let z = dot_f64(row, &w[..d]) + w[d];
            let p = 1.0 / (1.0 + libm::exp(-z));
            let r = (p - y[i]) / n as f64;
            let s = p * (1.0 - p) / n as f64;
            for a_ in 0..dim {
                let xa = if a_ < d { row[a_] } else { 1.0 };
                grad[a_] += r * xa;
                for b_ in 0..dim {
                    let xb = if b_ < d { row[b_] } else { 1.0 };
                    hess[a_ * dim + b_] += s * xa * xb;
                }
            }
        }
        for j in 0..d {
            grad[j] += ridge * w[j];
            hess[j * dim + j] += ridge;
        }
        let mut step = grad.clone();
        solve_dense(&mut hess, &mut step, dim);
        let mut moved = 0.0f64;
        for j in 0..dim {
            w[j] -= step[j];
            moved = moved.max(step[j].abs());
        }
        if moved < 1e-12 {
            break;
        }
    }
    let bias = w[d];
    w.truncate(d);
    (w, bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_dft_of_impulse_is_flat() {
        let mut x = vec![0.0; 8];
        x[0] = 1.0;
        let (re, im) = naive_dft(&x);
        for k in 0..8 {
            assert!((re[k] - 1.0).abs() < 1e-12);
            assert!(im[k].abs() < 1e-12);
        }
    }

    #[test]
    fn fps_brute_force_on_a_line() {
        // Points at x = 0, 1, 2, 10. From 0 the farthest is 10, then 2.
        let pts = Array::from_vec(
            4,
            3,
            vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 10.0, 0.0, 0.0],
        )
        .unwrap();
        assert_eq!(fps_brute_force(&pts, 3, 0), vec![0, 3, 2]);
    }

    #[test]
    fn knn_brute_force_sorted_with_index_ties() {
        let pts = Array::from_vec(
            4,
            3,
            vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 3.0, 0.0, 0.0],
        )
        .unwrap();
        // Distances from point 0: [0, 1, 1, 9]; tie between 1 and 2 keeps index order.
        assert_eq!(knn_brute_force(&pts, 0, 3), vec![0, 1, 2]);
    }

    #[test]
    fn single_pair_loss_is_zero() {
        // B=1: both softmaxes are over one entry, so the loss is exactly 0.
        let h = Array::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let a = Array::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(contrastive_loss_direct(&h, &[a], 0.07), 0.0);
    }

    #[test]
    fn interp_identity_and_endpoints() {
        let t = Array::from_vec(3, 1, vec![1.0, 5.0, 9.0]).unwrap();
        let same = interp_rows_direct(&t, 3);
        assert_eq!(same.data(), t.data());
        let two = interp_rows_direct(&t, 2);
        assert_eq!(two.data(), &[1.0, 9.0]);
    }
}
