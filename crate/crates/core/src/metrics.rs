//! Evaluation metrics over fixed embeddings: zero-shot top-K accuracy,
//! retrieval recall@K, mean average precision, and a linear probe.
//!
//! All ranking follows one convention: higher dot product wins, and equal
//! scores are broken toward the lower index. The implementations here count
//! how many candidates beat the target instead of materializing a sorted
//! ranking, so the sort-based oracles exercise a genuinely different path.

use alloc::vec;
use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{config_err, input_err, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

fn dot_rows<S: Scalar>(a: &Array<S>, i: usize, b: &Array<S>, j: usize) -> f64 {
    a.row_slice(i)
        .iter()
        .zip(b.row_slice(j))
        .map(|(x, y)| x.to_f64() * y.to_f64())
        .sum()
}

/// 1-based rank of `target` among `scores` under the shared convention:
/// strictly higher scores rank first, ties go to the lower index.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    let mut ahead = 0usize;
    for (j, &s) in scores.iter().enumerate() {
        if s > t || (s == t && j < target) {
            ahead += 1;
        }
    }
    ahead + 1
}

/// Top-K classification accuracy. Queries are scored against every class
/// row by dot product (cosine, given unit-norm rows) and a query counts as
/// a hit when its true class ranks within the top K.
pub fn zero_shot_classify<S: Scalar>(
    embeddings: &Array<S>,
    class_matrix: &Array<S>,
    labels: &[usize],
    k: usize,
) -> Result<f64> {
    let q = embeddings.rows();
    let c = class_matrix.rows();
    if embeddings.cols() != class_matrix.cols() {
        return Err(config_err!(
            "embedding width {} does not match class matrix width {}",
            embeddings.cols(),
            class_matrix.cols()
        ));
    }
    if k == 0 || k > c {
        return Err(config_err!("top-K with K={} needs 1 <= K <= {} classes", k, c));
    }
    if labels.len() != q {
        return Err(config_err!("{} labels for {} queries", labels.len(), q));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(config_err!("label {} out of range for {} classes", bad, c));
    }
    if q == 0 {
        return Err(input_err!("no queries to classify"));
    }
    let mut hits = 0usize;
    for i in 0..q {
        let scores: Vec<f64> = (0..c).map(|j| dot_rows(embeddings, i, class_matrix, j)).collect();
        if rank_of(&scores, labels[i]) <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / q as f64)
}

/// Recall@K: the fraction of queries whose ground-truth gallery item ranks
/// within the top K by dot product. `ground_truth[i]` is the gallery index
/// that counts as correct for query i.
pub fn retrieval_recall<S: Scalar>(
    query_emb: &Array<S>,
    gallery_emb: &Array<S>,
    ground_truth: &[usize],
    k: usize,
) -> Result<f64> {
    let q = query_emb.rows();
    let g = gallery_emb.rows();
    if g == 0 {
        return Err(input_err!("empty gallery"));
    }
    if query_emb.cols() != gallery_emb.cols() {
        return Err(config_err!(
            "query width {} does not match gallery width {}",
            query_emb.cols(),
            gallery_emb.cols()
        ));
    }
    if k == 0 {
        return Err(config_err!("recall@K needs K >= 1"));
    }
    if ground_truth.len() != q {
        return Err(config_err!("{} ground-truth entries for {} queries", ground_truth.len(), q));
    }
    if let Some(&bad) = ground_truth.iter().find(|&&t| t >= g) {
        return Err(config_err!("ground-truth index {} out of range for gallery of {}", bad, g));
    }
    if q == 0 {
        return Err(input_err!("no queries to retrieve"));
    }
    let mut hits = 0usize;
    for i in 0..q {
        let scores: Vec<f64> = (0..g).map(|j| dot_rows(query_emb, i, gallery_emb, j)).collect();
        if rank_of(&scores, ground_truth[i]) <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / q as f64)
}

/// Mean average precision for multi-label ranking. `multilabels` is
/// row-major Q x C. Per class, average precision is the mean of the
/// precision at each positive query in the class's ranking; classes with no
/// positives are skipped, and the result averages the remaining classes.
pub fn mean_average_precision<S: Scalar>(scores: &Array<S>, multilabels: &[bool]) -> Result<f64> {
    let (q, c) = scores.shape();
    if multilabels.len() != q * c {
        return Err(config_err!(
            "{} labels for a {}x{} score matrix",
            multilabels.len(),
            q,
            c
        ));
    }
    if q == 0 {
        return Err(input_err!("no queries to rank"));
    }
    let mut ap_sum = 0.0;
    let mut classes = 0usize;
    for class in 0..c {
        let col: Vec<f64> = (0..q).map(|i| scores.at(i, class).to_f64()).collect();
        let positives: Vec<usize> = (0..q).filter(|&i| multilabels[i * c + class]).collect();
        if positives.is_empty() {
            continue;
        }
        // Precision at a positive p is (positives ranked at or above p) / rank(p);
        // both counts come from pairwise comparisons, no sort involved.
        let mut prec_sum = 0.0;
        for &p in &positives {
            let rank = rank_of(&col, p);
            let mut pos_at_or_above = 0usize;
            for &o in &positives {
                if rank_of(&col, o) <= rank {
                    pos_at_or_above += 1;
                }
            }
            prec_sum += pos_at_or_above as f64 / rank as f64;
        }
        ap_sum += prec_sum / positives.len() as f64;
        classes += 1;
    }
    if classes == 0 {
        return Err(input_err!("no positives in any class"));
    }
    Ok(ap_sum / classes as f64)
}

/// Settings for the linear probe optimizer: plain full-batch gradient
/// descent with a fixed step size, stopped by gradient norm or iteration cap.
#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub lr: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Ridge coefficient on the weight matrix; biases are never penalized.
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { lr: 1.0, max_iters: 4000, tol: 1e-8, l2: 1e-3 }
    }
}

/// Linear softmax classifier trained on frozen features.
pub struct ProbeModel {
    /// C x d weight matrix.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub classes: usize,
    pub dim: usize,
    pub iters_run: usize,
}

impl ProbeModel {
    pub fn predict<S: Scalar>(&self, features: &Array<S>, row: usize) -> usize {
        let x = features.row_slice(row);
        let mut best = 0usize;
        let mut best_z = f64::NEG_INFINITY;
        for c in 0..self.classes {
            let mut z = self.b[c];
            for j in 0..self.dim {
                z += self.w[c * self.dim + j] * x[j].to_f64();
            }
            if z > best_z {
                best_z = z;
                best = c;
            }
        }
        best
    }
}

/// Fit the softmax probe by full-batch gradient descent on mean cross
/// entropy plus the ridge term. Runs in f64 regardless of the feature
/// scalar. Zero-initialized, so the 2-class case keeps the two weight rows
/// exactly opposite and the row difference follows binary logistic
/// regression on the same data.
pub fn fit_probe<S: Scalar>(
    features: &Array<S>,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeModel> {
    let (n, d) = features.shape();
    if labels.len() != n {
        return Err(config_err!("{} labels for {} feature rows", labels.len(), n));
    }
    if n == 0 {
        return Err(input_err!("no training rows for the probe"));
    }
    if classes < 2 {
        return Err(config_err!("probe needs at least 2 classes, got {}", classes));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(config_err!("label {} out of range for {} classes", bad, classes));
    }
    if cfg.lr <= 0.0 || !cfg.lr.is_finite() {
        return Err(config_err!("probe lr must be positive and finite"));
    }
    if cfg.l2 < 0.0 {
        return Err(config_err!("probe ridge must be non-negative"));
    }
    let mut w = vec![0.0f64; classes * d];
    let mut b = vec![0.0f64; classes];
    let inv_n = 1.0 / n as f64;
    let mut iters_run = 0usize;
    for _ in 0..cfg.max_iters {
        let mut gw = vec![0.0f64; classes * d];
        let mut gb = vec![0.0f64; classes];
        for i in 0..n {
            let x = features.row_slice(i);
            let mut z = vec![0.0f64; classes];
            for c in 0..classes {
                let mut acc = b[c];
                for j in 0..d {
                    acc += w[c * d + j] * x[j].to_f64();
                }
                z[c] = acc;
            }
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for zc in z.iter_mut() {
                *zc = libm::exp(*zc - zmax);
                denom += *zc;
            }
            for c in 0..classes {
                let p = z[c] / denom;
                let r = (p - if labels[i] == c { 1.0 } else { 0.0 }) * inv_n;
                gb[c] += r;
                for j in 0..d {
                    gw[c * d + j] += r * x[j].to_f64();
                }
            }
        }
        let mut gmax = 0.0f64;
        for idx in 0..classes * d {
            gw[idx] += cfg.l2 * w[idx];
            gmax = gmax.max(gw[idx].abs());
        }
        for c in 0..classes {
            gmax = gmax.max(gb[c].abs());
        }
        iters_run += 1;
        if gmax < cfg.tol {
            break;
        }
        for idx in 0..classes * d {
            w[idx] -= cfg.lr * gw[idx];
        }
        for c in 0..classes {
            b[c] -= cfg.lr * gb[c];
        }
    }
    Ok(ProbeModel { w, b, classes, dim: d, iters_run })
}

/// Pick `shots` training rows per class without replacement, seeded. Class
/// pools keep dataset order; selection order within a pool is randomized by
/// a per-class substream so adding classes never reshuffles earlier ones.
pub fn sample_shots(
    labels: &[usize],
    classes: usize,
    shots: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if shots < 1 {
        return Err(config_err!("probe needs shots >= 1"));
    }
    let root = Rng::from_seed(seed);
    let mut picked = Vec::with_capacity(classes * shots);
    for c in 0..classes {
        let mut pool: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect();
        if pool.len() < shots {
            return Err(config_err!(
                "class {} has {} training rows, fewer than shots={}",
                c,
                pool.len(),
                shots
            ));
        }
        let mut rng = root.substream("probe.shots", c as u64);
        for i in 0..shots {
            let j = i + rng.below(pool.len() - i);
            pool.swap(i, j);
        }
        picked.extend_from_slice(&pool[..shots]);
    }
    Ok(picked)
}

/// Few-shot linear probing: sample `shots` rows per class from the training
/// features (seeded), fit the softmax probe on that subset, and report
/// accuracy on the test split. Ties in prediction go to the lower class.
pub fn linear_probe<S: Scalar>(
    train_features: &Array<S>,
    train_labels: &[usize],
    test_features: &Array<S>,
    test_labels: &[usize],
    shots: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    if train_features.cols() != test_features.cols() {
        return Err(config_err!(
            "train width {} does not match test width {}",
            train_features.cols(),
            test_features.cols()
        ));
    }
    if test_labels.len() != test_features.rows() {
        return Err(config_err!(
            "{} test labels for {} test rows",
            test_labels.len(),
            test_features.rows()
        ));
    }
    if test_labels.is_empty() {
        return Err(input_err!("no test rows to score"));
    }
    let classes = train_labels
        .iter()
        .chain(test_labels)
        .copied()
        .max()
        .map(|m| m + 1)
        .unwrap_or(0);
    if classes < 2 {
        return Err(config_err!("probe needs at least 2 classes, got {}", classes));
    }
    let picked = sample_shots(train_labels, classes, shots, seed)?;
    let mut rows = Vec::with_capacity(picked.len());
    let mut labels = Vec::with_capacity(picked.len());
    for &i in &picked {
        rows.push(train_features.slice_rows(i, 1));
        labels.push(train_labels[i]);
    }
    let subset = Array::vcat(&rows)?;
    let model = fit_probe(&subset, &labels, classes, cfg)?;
    let mut hits = 0usize;
    for (i, &truth) in test_labels.iter().enumerate() {
        if model.predict(test_features, i) == truth {
            hits += 1;
        }
    }
    Ok(hits as f64 / test_labels.len() as f64)
}

/// Mean-pool rows that are already unit-norm, then re-normalize. Used to
/// aggregate per-clip embeddings into one sample embedding.
pub fn pool_and_renormalize<S: Scalar>(rows: &Array<S>) -> Result<Vec<S>> {
    if rows.rows() == 0 {
        return Err(input_err!("no rows to pool"));
    }
    let d = rows.cols();
    let mut mean = vec![0.0f64; d];
    for i in 0..rows.rows() {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += rows.at(i, j).to_f64();
        }
    }
    let inv = 1.0 / rows.rows() as f64;
    let mut norm_sq = 0.0;
    for m in mean.iter_mut() {
        *m *= inv;
        norm_sq += *m * *m;
    }
    if norm_sq <= 0.0 {
        return Err(input_err!("pooled embedding has zero norm"));
    }
    let inv_norm = 1.0 / libm::sqrt(norm_sq);
    Ok(mean.iter().map(|&m| S::from_f64(m * inv_norm)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn unit_rows(rows: usize, cols: usize, seed: u64) -> Array<f64> {
        let mut rng = Rng::from_seed(seed);
        let mut a = Array::zeros(rows, cols);
        for i in 0..rows {
            let mut norm = 0.0;
            for j in 0..cols {
                let v = rng.normal_f64();
                *a.at_mut(i, j) = v;
                norm += v * v;
            }
            let inv = 1.0 / norm.sqrt();
            for j in 0..cols {
                *a.at_mut(i, j) *= inv;
            }
        }
        a
    }

    #[test]
    fn zero_shot_perfect_alignment_is_one() {
        // Orthonormal class rows, each query equal to its class row.
        let classes = Array::from_vec(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let queries = classes.clone();
        let acc = zero_shot_classify(&queries, &classes, &[0, 1, 2], 1).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn zero_shot_k_equals_c_is_one() {
        let queries = unit_rows(10, 8, 1);
        let classes = unit_rows(4, 8, 2);
        let labels = [0, 1, 2, 3, 0, 1, 2, 3, 0, 1];
        let acc = zero_shot_classify(&queries, &classes, &labels, 4).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn zero_shot_matches_sort_oracle_and_is_monotone() {
        for seed in 0..20u64 {
            let mut rng = Rng::from_seed(900 + seed);
            let q = 1 + rng.below(64);
            let c = 2 + rng.below(16);
            let d = 1 + rng.below(12);
            let queries = unit_rows(q, d, seed * 7 + 1);
            let classes = unit_rows(c, d, seed * 7 + 2);
            let labels: Vec<usize> = (0..q).map(|_| rng.below(c)).collect();
            let mut prev = 0.0;
            for k in 1..=c {
                let acc = zero_shot_classify(&queries, &classes, &labels, k).unwrap();
                let want = oracle::zero_shot_direct(&queries, &classes, &labels, k);
                assert_eq!(acc, want, "seed {} k {}", seed, k);
                assert!(acc >= prev, "accuracy dropped as K grew");
                prev = acc;
            }
            assert_eq!(prev, 1.0);
        }
    }

    #[test]
    fn zero_shot_ties_prefer_lower_class() {
        // Both classes identical: the tie must resolve to class 0.
        let classes = Array::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let queries = Array::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(zero_shot_classify(&queries, &classes, &[0, 0], 1).unwrap(), 1.0);
        assert_eq!(zero_shot_classify(&queries, &classes, &[1, 1], 1).unwrap(), 0.0);
        assert_eq!(zero_shot_classify(&queries, &classes, &[1, 1], 2).unwrap(), 1.0);
    }

    #[test]
    fn zero_shot_rejects_bad_k_and_shapes() {
        let queries = unit_rows(4, 8, 3);
        let classes = unit_rows(3, 8, 4);
        assert!(zero_shot_classify(&queries, &classes, &[0, 1, 2, 0], 4).is_err());
        assert!(zero_shot_classify(&queries, &classes, &[0, 1, 2, 0], 0).is_err());
        assert!(zero_shot_classify(&queries, &classes, &[0, 1], 1).is_err());
        assert!(zero_shot_classify(&queries, &classes, &[0, 1, 3, 0], 1).is_err());
        let narrow = unit_rows(3, 4, 5);
        assert!(zero_shot_classify(&queries, &narrow, &[0, 1, 2, 0], 1).is_err());
    }

    #[test]
    fn recall_identity_gallery_is_one() {
        let queries = unit_rows(12, 6, 10);
        let truth: Vec<usize> = (0..12).collect();
        let r = retrieval_recall(&queries, &queries, &truth, 1).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn recall_matches_sort_oracle_and_is_monotone() {
        for seed in 0..20u64 {
            let mut rng = Rng::from_seed(1700 + seed);
            let q = 1 + rng.below(48);
            let g = 1 + rng.below(64);
            let d = 1 + rng.below(12);
            let queries = unit_rows(q, d, seed * 11 + 1);
            let gallery = unit_rows(g, d, seed * 11 + 2);
            let truth: Vec<usize> = (0..q).map(|_| rng.below(g)).collect();
            let mut prev = 0.0;
            for k in 1..=g {
                let r = retrieval_recall(&queries, &gallery, &truth, k).unwrap();
                let want = oracle::recall_at_k_direct(&queries, &gallery, &truth, k);
                assert_eq!(r, want, "seed {} k {}", seed, k);
                assert!(r >= prev);
                prev = r;
            }
            assert_eq!(prev, 1.0, "recall@G must be 1");
        }
    }

    #[test]
    fn recall_rejects_empty_gallery() {
        let queries = unit_rows(3, 4, 20);
        let gallery = Array::<f64>::zeros(0, 4);
        let err = retrieval_recall(&queries, &gallery, &[0, 0, 0], 1).unwrap_err();
        let msg = alloc::format!("{}", err);
        assert!(msg.contains("gallery"), "unexpected error: {}", msg);
    }

    #[test]
    fn map_perfect_ranking_is_one() {
        // Per class, every positive outranks every negative.
        let scores = Array::from_vec(
            4,
            2,
            vec![0.9, 0.1, 0.8, 0.2, 0.1, 0.9, 0.2, 0.8],
        )
        .unwrap();
        let labels = [true, false, true, false, false, true, false, true];
        let map = mean_average_precision(&scores, &labels).unwrap();
        assert_eq!(map, 1.0);
    }

    #[test]
    fn map_hand_case_five_sixths() {
        // Single class, positives at ranks 1 and 3 of 3: AP = (1/1 + 2/3)/2.
        let scores = Array::from_vec(3, 1, vec![0.9, 0.5, 0.3]).unwrap();
        let labels = [true, false, true];
        let map = mean_average_precision(&scores, &labels).unwrap();
        assert!((map - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn map_single_positive_at_last_rank() {
        let n = 7;
        let mut data = Vec::new();
        for i in 0..n {
            data.push((n - i) as f64);
        }
        let scores = Array::from_vec(n, 1, data).unwrap();
        let mut labels = vec![false; n];
        labels[n - 1] = true;
        let map = mean_average_precision(&scores, &labels).unwrap();
        assert!((map - 1.0 / n as f64).abs() < 1e-15);
    }

    #[test]
    fn map_matches_definitional_oracle() {
        for seed in 0..20u64 {
            let mut rng = Rng::from_seed(2500 + seed);
            let q = 2 + rng.below(62);
            let c = 1 + rng.below(8);
            let mut scores = Array::zeros(q, c);
            for i in 0..q {
                for j in 0..c {
                    *scores.at_mut(i, j) = rng.normal_f64();
                }
            }
            let labels: Vec<bool> = (0..q * c).map(|_| rng.coin(0.3)).collect();
            let got = mean_average_precision(&scores, &labels);
            let want = oracle::map_direct(&scores, &labels);
            match want {
                Some(w) => {
                    let g = got.unwrap();
                    assert!((g - w).abs() < 1e-12, "seed {}: {} vs {}", seed, g, w);
                }
                None => assert!(got.is_err()),
            }
        }
    }

    #[test]
    fn map_skips_positive_free_class() {
        // Class 1 has no positives; mAP must equal class 0's AP alone.
        let scores = Array::from_vec(3, 2, vec![0.9, 0.5, 0.1, 0.4, 0.5, 0.3]).unwrap();
        let labels = [true, false, false, false, true, false];
        let map = mean_average_precision(&scores, &labels).unwrap();
        let solo = Array::from_vec(3, 1, vec![0.9, 0.1, 0.5]).unwrap();
        let solo_map = mean_average_precision(&solo, &[true, false, true]).unwrap();
        assert!((map - solo_map).abs() < 1e-15);
        let none = [false, false, false, false, false, false];
        assert!(mean_average_precision(&scores, &none).is_err());
    }

    #[test]
    fn probe_separable_two_classes_reaches_one() {
        let mut train = Array::zeros(16, 2);
        let mut labels = Vec::new();
        let mut rng = Rng::from_seed(31);
        for i in 0..16 {
            let class = i % 2;
            let center = if class == 0 { -2.0 } else { 2.0 };
            *train.at_mut(i, 0) = center + 0.3 * rng.normal_f64();
            *train.at_mut(i, 1) = rng.normal_f64();
            labels.push(class);
        }
        let acc = linear_probe(&train, &labels, &train, &labels, 8, &ProbeConfig::default(), 7)
            .unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn probe_boundary_matches_newton_oracle() {
        // 2-class softmax with ridge on weights reduces to binary logistic
        // regression on the row difference with half the ridge coefficient.
        let mut rng = Rng::from_seed(57);
        let n = 8;
        let mut x = Array::zeros(n, 2);
        let mut labels = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let class = i % 2;
            let center = if class == 0 { -1.0 } else { 1.0 };
            *x.at_mut(i, 0) = center + 0.8 * rng.normal_f64();
            *x.at_mut(i, 1) = 0.5 * rng.normal_f64();
            labels.push(class);
            y.push(class as f64);
        }
        let cfg = ProbeConfig { lr: 0.5, max_iters: 200_000, tol: 1e-12, l2: 0.2 };
        let model = fit_probe(&x, &labels, 2, &cfg).unwrap();
        let (w_ref, b_ref) = oracle::logistic_newton(&x, &y, cfg.l2 / 2.0, 60);
        let dw0 = model.w[2] - model.w[0];
        let dw1 = model.w[3] - model.w[1];
        let db = model.b[1] - model.b[0];
        assert!((dw0 - w_ref[0]).abs() < 1e-6, "{} vs {}", dw0, w_ref[0]);
        assert!((dw1 - w_ref[1]).abs() < 1e-6, "{} vs {}", dw1, w_ref[1]);
        assert!((db - b_ref).abs() < 1e-6, "{} vs {}", db, b_ref);
    }

    #[test]
    fn probe_shots_all_uses_every_row() {
        let labels = vec![0, 1, 0, 1, 0, 1];
        let picked = sample_shots(&labels, 2, 3, 99).unwrap();
        let mut sorted = picked.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn probe_sampling_is_seeded_and_validates() {
        let labels = vec![0, 0, 0, 1, 1, 1, 2, 2, 2];
        let a = sample_shots(&labels, 3, 2, 5).unwrap();
        let b = sample_shots(&labels, 3, 2, 5).unwrap();
        assert_eq!(a, b);
        let c = sample_shots(&labels, 3, 2, 6).unwrap();
        assert_eq!(a.len(), c.len());
        for (i, &idx) in a.iter().enumerate() {
            assert_eq!(labels[idx], i / 2, "per-class grouping broken");
        }
        assert!(sample_shots(&labels, 3, 0, 5).is_err());
        assert!(sample_shots(&labels, 3, 4, 5).is_err());
    }

    #[test]
    fn pool_of_identical_rows_is_identity() {
        let row = unit_rows(1, 6, 44);
        let stacked = Array::vcat(&[row.clone(), row.clone(), row.clone()]).unwrap();
        let pooled = pool_and_renormalize(&stacked).unwrap();
        for j in 0..6 {
            assert!((pooled[j] - row.at(0, j)).abs() < 1e-12);
        }
        let single = pool_and_renormalize(&row).unwrap();
        for j in 0..6 {
            assert!((single[j] - row.at(0, j)).abs() < 1e-15);
        }
    }

    #[test]
    fn pool_renormalizes_to_unit_length() {
        let rows = unit_rows(5, 8, 45);
        let pooled = pool_and_renormalize(&rows).unwrap();
        let norm: f64 = pooled.iter().map(|v| v * v).sum::<f64>();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(pool_and_renormalize(&Array::<f64>::zeros(0, 4)).is_err());
        assert!(pool_and_renormalize(&Array::<f64>::zeros(2, 4)).is_err());
    }
}
