//! Fixed teacher encoders producing the anchor embeddings that alignment
//! trains against, plus helpers around the precomputed-feature store.
//!
//! Teachers are deliberately tiny. The method only needs a fixed target
//! space: a small frozen image trunk and a bag-of-embeddings text encoder
//! are enough to exercise every alignment contract at desk scale. Every
//! teacher parameter is frozen at construction and never receives a
//! gradient.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::array::Array;
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{config_err, input_err, Result};
use crate::nn::Linear;
use crate::param::{Decay, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::serialize::FeatureStore;
use crate::tape::Tape;
use crate::tokenize::grid::{Grid, GridPatcher};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AnchorModality {
    #[serde(rename = "image")]
    Image,
    #[serde(rename = "text")]
    Text,
}

/// The ordered anchor set for a run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AnchorSpec {
    pub anchors: Vec<AnchorModality>,
    pub d_out: usize,
}

impl AnchorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.anchors.is_empty() {
            return Err(config_err!("anchor set must not be empty"));
        }
        for (i, a) in self.anchors.iter().enumerate() {
            if self.anchors[..i].contains(a) {
                return Err(config_err!("anchor set repeats a modality"));
            }
        }
        if self.d_out == 0 {
            return Err(config_err!("anchor width must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ImageTeacherConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub d_out: usize,
}

/// Frozen image encoder: patcher + tiny trunk + projection.
pub struct ImageTeacher {
    patcher: GridPatcher,
    trunk: Backbone,
    grid_tiles: (usize, usize),
}

impl ImageTeacher {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &ImageTeacherConfig,
        scope: &str,
        rng: &mut Rng,
    ) -> Result<ImageTeacher> {
        if cfg.patch == 0 || cfg.image_h % cfg.patch != 0 || cfg.image_w % cfg.patch != 0 {
            return Err(config_err!(
                "teacher image {}x{} must tile exactly by patch {}",
                cfg.image_h,
                cfg.image_w,
                cfg.patch
            ));
        }
        let first = store.len();
        let patcher = GridPatcher::new(
            store,
            &format!("{scope}.patch"),
            cfg.patch,
            cfg.channels,
            cfg.d,
            false,
            rng,
        )?;
        let tiles = (cfg.image_h / cfg.patch, cfg.image_w / cfg.patch);
        let trunk_cfg = BackboneConfig {
            total_blocks: cfg.blocks,
            l_first: 1,
            l_last: cfg.blocks,
            d: cfg.d,
            heads: cfg.heads,
            d_out: cfg.d_out,
            pos_len: tiles.0 * tiles.1 + 1,
            use_cls: true,
            final_norm: true,
            pos_grid: Some(tiles),
            trainable: false,
        };
        let trunk = Backbone::new(store, &trunk_cfg, &format!("{scope}.trunk"), rng)?;
        let fresh: Vec<ParamId> = store.ids().skip(first).collect();
        for id in fresh {
            store.set_frozen(id, true);
        }
        Ok(ImageTeacher {
            patcher,
            trunk,
            grid_tiles: tiles,
        })
    }

    /// Unit-norm embedding of one image. Runs on a private tape; the result
    /// is a plain value, so nothing here can leak into a training graph.
    pub fn encode<S: Scalar>(&self, store: &ParamStore<S>, image: &Grid) -> Result<Array<S>> {
        let mut tape: Tape<S> = Tape::new();
        let tokens = self.patcher.forward(&mut tape, store, image)?;
        let out = self
            .trunk
            .forward(&mut tape, store, &tokens, Some(self.grid_tiles))?;
        let emb = self.trunk.project(&mut tape, store, out.pooled)?;
        Ok(tape.value(emb).clone())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.patcher.proj.param_ids();
        ids.extend(self.trunk.trunk_param_ids());
        ids.extend(self.trunk.head_param_ids());
        ids
    }

    #[cfg(test)]
    fn trunk(&self) -> &Backbone {
        &self.trunk
    }

    #[cfg(test)]
    fn patcher(&self) -> &GridPatcher {
        &self.patcher
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TextTeacherConfig {
    /// Word list; a word's position is its token id.
    pub vocab: Vec<String>,
    pub d: usize,
    pub d_out: usize,
}

/// Frozen bag-of-embeddings text encoder: mean token embedding, linear map,
/// l2 norm. Word order does not matter by construction.
pub struct TextTeacher {
    vocab: Vec<String>,
    embed: ParamId,
    proj: Linear,
}

impl TextTeacher {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &TextTeacherConfig,
        scope: &str,
        rng: &mut Rng,
    ) -> Result<TextTeacher> {
        if cfg.vocab.is_empty() {
            return Err(config_err!("text teacher needs a vocabulary"));
        }
        for (i, w) in cfg.vocab.iter().enumerate() {
            if cfg.vocab[..i].contains(w) {
                return Err(config_err!("vocabulary repeats {w:?}"));
            }
        }
        let first = store.len();
        let embed = store.register(
            &format!("{scope}.embed"),
            Array::trunc_normal(cfg.vocab.len(), cfg.d, 0.02, rng),
            Decay::Exclude,
        )?;
        let proj = Linear::new(store, &format!("{scope}.proj"), cfg.d, cfg.d_out, rng)?;
        let fresh: Vec<ParamId> = store.ids().skip(first).collect();
        for id in fresh {
            store.set_frozen(id, true);
        }
        Ok(TextTeacher {
            vocab: cfg.vocab.clone(),
            embed,
            proj,
        })
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    /// Lowercased whitespace tokenization against the vocabulary, with
    /// punctuation stripped from word edges.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        tokenize_words(&self.vocab, text)
    }

    /// Unit-norm embedding of a token id list.
    pub fn encode_ids<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        ids: &[usize],
    ) -> Result<Array<S>> {
        if ids.is_empty() {
            return Err(input_err!("empty token list"));
        }
        let table = &store.get(self.embed).value;
        for &id in ids {
            if id >= table.rows() {
                return Err(input_err!("token id {id} outside vocabulary"));
            }
        }
        let d = table.cols();
        let mut mean = Array::zeros(1, d);
        let inv = S::from_f64(1.0 / ids.len() as f64);
        for &id in ids {
            for c in 0..d {
                *mean.at_mut(0, c) = mean.at(0, c) + table.at(id, c) * inv;
            }
        }
        let mut tape: Tape<S> = Tape::new();
        let node = tape.constant(mean);
        let projected = self.proj.forward(&mut tape, store, node)?;
        let normed = tape.l2_normalize(projected)?;
        Ok(tape.value(normed).clone())
    }

    pub fn encode_text<S: Scalar>(&self, store: &ParamStore<S>, text: &str) -> Result<Array<S>> {
        let ids = self.tokenize(text)?;
        self.encode_ids(store, &ids)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = alloc::vec![self.embed];
        ids.extend(self.proj.param_ids());
        ids
    }
}

/// The one tokenization rule: whitespace split, ASCII-alphanumeric filter,
/// lowercase, exact vocabulary lookup. Shared by the text teacher and by
/// dataset generation so stored ids always match what the teacher expects.
pub fn tokenize_words(vocab: &[String], text: &str) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for raw in text.split_whitespace() {
        let word: String = raw
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        if word.is_empty() {
            continue;
        }
        match vocab.iter().position(|v| *v == word) {
            Some(id) => ids.push(id),
            None => return Err(input_err!("word {word:?} not in vocabulary")),
        }
    }
    if ids.is_empty() {
        return Err(input_err!("text tokenized to nothing"));
    }
    Ok(ids)
}

/// Per-class averages of templated text embeddings, re-normalized. Row i
/// belongs to class i.
pub fn class_template_embeddings<S: Scalar>(
    teacher: &TextTeacher,
    store: &ParamStore<S>,
    class_names: &[String],
    templates: &[String],
) -> Result<Array<S>> {
    if class_names.is_empty() {
        return Err(input_err!("no classes to embed"));
    }
    if templates.is_empty() {
        return Err(input_err!("no templates to fill"));
    }
    let mut rows: Vec<Array<S>> = Vec::with_capacity(class_names.len());
    for name in class_names {
        let mut acc: Option<Array<S>> = None;
        for t in templates {
            let filled = t.replace("{}", name);
            let emb = teacher.encode_text(store, &filled)?;
            acc = Some(match acc {
                None => emb,
                Some(mut a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(emb.data()) {
                        *x = *x + *y;
                    }
                    a
                }
            });
        }
        let mut mean = acc.expect("templates checked non-empty");
        let inv = S::from_f64(1.0 / templates.len() as f64);
        for x in mean.data_mut() {
            *x = *x * inv;
        }
        let mut tape: Tape<S> = Tape::new();
        let node = tape.constant(mean);
        let normed = tape.l2_normalize(node)?;
        rows.push(tape.value(normed).clone());
    }
    Array::vcat(&rows)
}

/// Every row in the store must be a unit vector; alignment divides by the
/// temperature only, never by anchor norms.
pub fn check_store_norms(store: &FeatureStore, tol: f64) -> Result<()> {
    for (id, rows) in store.records() {
        for (k, row) in rows.iter().enumerate() {
            let norm: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            let norm = libm::sqrt(norm);
            if (norm - 1.0).abs() > tol {
                return Err(input_err!(
                    "anchor {k} of sample {id:?} has norm {norm}, expected 1"
                ));
            }
        }
    }
    Ok(())
}
