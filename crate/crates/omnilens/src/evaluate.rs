//! Evaluation passes over a trained (or freshly initialized) pipeline:
//! zero-shot classification, cross-modal retrieval, mean average precision,
//! few-shot linear probing, and feature export.

use anyhow::{bail, Result};
use serde::Serialize;

use omnilens_core::anchors::AnchorModality;
use omnilens_core::array::Array;
use omnilens_core::metrics::{
    linear_probe, mean_average_precision, pool_and_renormalize, retrieval_recall,
    zero_shot_classify, ProbeConfig,
};
use omnilens_core::scalar::Scalar;
use omnilens_core::serialize::FeatureStore;

use crate::model::{embed_samples, wrap, Pipeline};
use crate::synth::{Payload, Sample, Split, SyntheticDataset};

fn split_refs(ds: &SyntheticDataset, split: Split) -> Vec<&Sample> {
    ds.indices(split).into_iter().map(|i| &ds.samples[i]).collect()
}

/// Embeddings for a split, honoring the multi-clip window for audio.
pub fn embed_split<S: Scalar>(
    pipe: &Pipeline<S>,
    ds: &SyntheticDataset,
    split: Split,
) -> Result<Array<S>> {
    let refs = split_refs(ds, split);
    if refs.is_empty() {
        bail!("split {} is empty", split.tag());
    }
    let window_s = pipe.cfg.eval.clip_window_s;
    if window_s <= 0.0 {
        return embed_samples(pipe, &refs);
    }
    let mut rows = Vec::with_capacity(refs.len());
    for s in &refs {
        match &s.payload {
            Payload::Audio(wave) => {
                let stride_s = pipe.cfg.eval.clip_stride_s;
                rows.push(multi_clip_aggregate(pipe, wave, window_s, stride_s)?);
            }
            other => rows.push(pipe.student_values(other)?),
        }
    }
    Array::vcat(&rows).map_err(wrap)
}

/// Mean-pool unit-norm clip embeddings over sliding windows, then put the
/// pooled vector back on the unit sphere. A sample shorter than one window
/// is zero-padded into a single clip, so aggregation is the identity there.
pub fn multi_clip_aggregate<S: Scalar>(
    pipe: &Pipeline<S>,
    wave: &[f64],
    window_s: f64,
    stride_s: f64,
) -> Result<Array<S>> {
    let t = &pipe.cfg.tokenizer;
    let window = (window_s * t.sample_rate as f64).round() as usize;
    let expect = (t.clip_seconds * t.sample_rate as f64).round() as usize;
    if window == 0 {
        bail!("configuration: clip window must cover at least one sample");
    }
    if window != expect {
        bail!(
            "configuration: clip window of {} samples does not match the tokenizer clip length {}",
            window,
            expect
        );
    }
    let stride = ((stride_s * t.sample_rate as f64).round() as usize).max(1);
    let mut clips: Vec<Vec<f64>> = Vec::new();
    let mut start = 0usize;
    while start + window <= wave.len() {
        clips.push(wave[start..start + window].to_vec());
        start += stride;
    }
    if clips.is_empty() {
        let mut padded = wave.to_vec();
        padded.resize(window, 0.0);
        clips.push(padded);
    }
    let mut rows = Vec::with_capacity(clips.len());
    for clip in &clips {
        rows.push(pipe.student_values(&Payload::Audio(clip.clone()))?);
    }
    let stacked = Array::vcat(&rows).map_err(wrap)?;
    let pooled = pool_and_renormalize(&stacked).map_err(wrap)?;
    Array::from_vec(1, pooled.len(), pooled).map_err(wrap)
}

/// Similarity of every embedding row against every class row.
fn score_matrix<S: Scalar>(embeddings: &Array<S>, classes: &Array<S>) -> Array<f64> {
    let q = embeddings.rows();
    let c = classes.rows();
    let mut out = vec![0.0f64; q * c];
    for i in 0..q {
        let e = embeddings.row_slice(i);
        for j in 0..c {
            let w = classes.row_slice(j);
            out[i * c + j] = e
                .iter()
                .zip(w.iter())
                .map(|(a, b)| a.to_f64() * b.to_f64())
                .sum();
        }
    }
    Array::from_vec(q, c, out).unwrap()
}

/// Fold merged member columns into one max-similarity column. Returns the
/// reduced score matrix, remapped labels, and the merged class-name list.
fn apply_class_merge(
    scores: &Array<f64>,
    labels: &[usize],
    class_names: &[String],
    merged_name: &str,
    members: &[String],
) -> Result<(Array<f64>, Vec<usize>, Vec<String>)> {
    let mut member_idx = Vec::with_capacity(members.len());
    for m in members {
        match class_names.iter().position(|n| n == m) {
            Some(i) => member_idx.push(i),
            None => bail!("configuration: merge member {m:?} is not a class"),
        }
    }
    let kept: Vec<usize> =
        (0..class_names.len()).filter(|i| !member_idx.contains(i)).collect();
    let mut names: Vec<String> = kept.iter().map(|&i| class_names[i].clone()).collect();
    names.push(merged_name.to_string());
    let merged_col = kept.len();
    let c_new = kept.len() + 1;
    let q = scores.rows();
    let mut out = vec![f64::NEG_INFINITY; q * c_new];
    for i in 0..q {
        for (j_new, &j_old) in kept.iter().enumerate() {
            out[i * c_new + j_new] = scores.at(i, j_old);
        }
        let best = member_idx
            .iter()
            .map(|&j| scores.at(i, j))
            .fold(f64::NEG_INFINITY, f64::max);
        out[i * c_new + merged_col] = best;
    }
    let new_labels: Vec<usize> = labels
        .iter()
        .map(|&l| kept.iter().position(|&k| k == l).unwrap_or(merged_col))
        .collect();
    Ok((Array::from_vec(q, c_new, out).unwrap(), new_labels, names))
}

/// Rank raw score rows with the shared classifier tie rules by treating the
/// score matrix as embeddings against an identity class basis.
fn topk_from_scores(scores: &Array<f64>, labels: &[usize], k: usize) -> Result<f64> {
    let c = scores.cols();
    let mut eye = vec![0.0f64; c * c];
    for j in 0..c {
        eye[j * c + j] = 1.0;
    }
    let identity = Array::from_vec(c, c, eye).unwrap();
    zero_shot_classify(scores, &identity, labels, k).map_err(wrap)
}

#[derive(Debug, Serialize)]
pub struct ZeroShotReport {
    pub split: String,
    pub samples: usize,
    /// (K, top-K accuracy) pairs in the configured order.
    pub top_k: Vec<(usize, f64)>,
    /// Present when a class-merge rule is configured.
    pub merged_top_k: Option<Vec<(usize, f64)>>,
    pub merged_classes: Option<Vec<String>>,
}

pub fn zero_shot_report<S: Scalar>(
    pipe: &Pipeline<S>,
    ds: &SyntheticDataset,
    split: Split,
) -> Result<ZeroShotReport> {
    let emb = embed_split(pipe, ds, split)?;
    let labels = ds.labels(split);
    let classes = pipe.class_matrix(&pipe.cfg.eval.templates)?;
    let mut top_k = Vec::new();
    for &k in &pipe.cfg.eval.k_list {
        let acc = zero_shot_classify(&emb, &classes, &labels, k).map_err(wrap)?;
        top_k.push((k, acc));
    }
    let mut merged_top_k = None;
    let mut merged_classes = None;
    if let Some(merge) = &pipe.cfg.eval.class_merge {
        let scores = score_matrix(&emb, &classes);
        let (m_scores, m_labels, names) = apply_class_merge(
            &scores,
            &labels,
            &pipe.class_names,
            &merge.merged_name,
            &merge.members,
        )?;
        let mut rows = Vec::new();
        for &k in &pipe.cfg.eval.k_list {
            if k <= names.len() {
                rows.push((k, topk_from_scores(&m_scores, &m_labels, k)?));
            }
        }
        merged_top_k = Some(rows);
        merged_classes = Some(names);
    }
    Ok(ZeroShotReport {
        split: split.tag().to_string(),
        samples: labels.len(),
        top_k,
        merged_top_k,
        merged_classes,
    })
}

#[derive(Debug, Serialize)]
pub struct RetrievalReport {
    pub split: String,
    pub queries: usize,
    pub gallery: usize,
    /// (K, recall@K) over the paired-image gallery, identity ground truth.
    pub recall_at: Vec<(usize, f64)>,
}

/// Student embeddings retrieve their own sample's paired teacher-image
/// embedding from the split's gallery.
pub fn retrieval_report<S: Scalar>(
    pipe: &Pipeline<S>,
    ds: &SyntheticDataset,
    split: Split,
) -> Result<RetrievalReport> {
    let refs = split_refs(ds, split);
    let queries = embed_split(pipe, ds, split)?;
    let gallery = pipe.anchor_rows(AnchorModality::Image, &refs)?;
    let truth: Vec<usize> = (0..refs.len()).collect();
    let mut recall_at = Vec::new();
    for &k in &pipe.cfg.eval.k_list {
        let r = retrieval_recall(&queries, &gallery, &truth, k).map_err(wrap)?;
        recall_at.push((k, r));
    }
    Ok(RetrievalReport {
        split: split.tag().to_string(),
        queries: refs.len(),
        gallery: refs.len(),
        recall_at,
    })
}

#[derive(Debug, Serialize)]
pub struct MapReport {
    pub split: String,
    pub samples: usize,
    pub mean_average_precision: f64,
}

/// mAP over class-similarity scores with one-hot relevance.
pub fn map_report<S: Scalar>(
    pipe: &Pipeline<S>,
    ds: &SyntheticDataset,
    split: Split,
) -> Result<MapReport> {
    let emb = embed_split(pipe, ds, split)?;
    let labels = ds.labels(split);
    let classes = pipe.class_matrix(&pipe.cfg.eval.templates)?;
    let scores = score_matrix(&emb, &classes);
    let c = classes.rows();
    let mut rel = vec![false; labels.len() * c];
    for (i, &l) in labels.iter().enumerate() {
        rel[i * c + l] = true;
    }
    let map = mean_average_precision(&scores, &rel).map_err(wrap)?;
    Ok(MapReport {
        split: split.tag().to_string(),
        samples: labels.len(),
        mean_average_precision: map,
    })
}

#[derive(Debug, Serialize)]
pub struct ProbeReport {
    pub shots: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub accuracy: f64,
}

/// Few-shot linear probe on frozen student embeddings: sample `probe_shots`
/// training rows per class (seeded), fit, score the test split.
pub fn probe_report<S: Scalar>(
    pipe: &Pipeline<S>,
    ds: &SyntheticDataset,
) -> Result<ProbeReport> {
    let train = embed_split(pipe, ds, Split::Train)?;
    let test = embed_split(pipe, ds, Split::Test)?;
    let train_labels = ds.labels(Split::Train);
    let test_labels = ds.labels(Split::Test);
    let shots = pipe.cfg.eval.probe_shots;
    let acc = linear_probe(
        &train,
        &train_labels,
        &test,
        &test_labels,
        shots,
        &ProbeConfig::default(),
        pipe.cfg.seed,
    )
    .map_err(wrap)?;
    Ok(ProbeReport {
        shots,
        train_samples: train_labels.len(),
        test_samples: test_labels.len(),
        accuracy: acc,
    })
}

/// Export student plus per-anchor teacher embeddings for every sample in the
/// split, keyed by sample id. Vector order per id: student, then anchors in
/// config order.
pub fn export_features<S: Scalar>(
    pipe: &Pipeline<S>,
    ds: &SyntheticDataset,
    split: Split,
) -> Result<FeatureStore> {
    let refs = split_refs(ds, split);
    let student = embed_split(pipe, ds, split)?;
    let mut per_anchor = Vec::new();
    for &which in &pipe.cfg.anchors.anchors {
        per_anchor.push(pipe.anchor_rows(which, &refs)?);
    }
    let d_out = pipe.cfg.anchors.d_out;
    let mut fs = FeatureStore::new(d_out, 1 + per_anchor.len());
    for (i, s) in refs.iter().enumerate() {
        let mut vectors = Vec::with_capacity(1 + per_anchor.len());
        let row: Vec<f32> = student.row_slice(i).iter().map(|v| v.to_f32()).collect();
        vectors.push(row);
        for anchor in &per_anchor {
            vectors.push(anchor.row_slice(i).iter().map(|v| v.to_f32()).collect());
        }
        fs.insert(&s.id, vectors).map_err(wrap)?;
    }
    Ok(fs)
}
