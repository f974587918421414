//! The assembled pipeline: modality embedder, lens, frozen trunk,
//! projection, temperature, and the two frozen teachers, all in one
//! parameter store. Construction order is fixed so parameter ids and the
//! frozen mask are reproducible from (config, seed) alone.

use anyhow::{anyhow, bail, Result};

use omnilens_core::alignment::Temperature;
use omnilens_core::anchors::{
    class_template_embeddings, AnchorModality, ImageTeacher, TextTeacher, TextTeacherConfig,
};
use omnilens_core::array::Array;
use omnilens_core::backbone::Backbone;
use omnilens_core::dsp::{log_mel_spectrogram, Spectrogram};
use omnilens_core::lens::Lens;
use omnilens_core::param::{Decay, ParamId, ParamStore};
use omnilens_core::rng::Rng;
use omnilens_core::scalar::Scalar;
use omnilens_core::tape::{NodeId, Tape};
use omnilens_core::tokenize::eeg::{EEGSequence, EegTokenizer};
use omnilens_core::tokenize::grid::{depth_to_disparity, Grid, GridPatcher};
use omnilens_core::tokenize::point::{fps, knn_group, MiniPointNet, MiniPointNetConfig, PointCloud};
use omnilens_core::tokenize::{add_positional, audio::SpectrogramPatcher, TokenSequence};

use crate::config::{Modality, RunConfig};
use crate::synth::{Payload, Sample};

/// Modality embedder: tokenizer plus its learnable positional table.
pub enum ModEmbed {
    Points(MiniPointNet),
    Audio(SpectrogramPatcher),
    Grid(GridPatcher),
    Eeg(EegTokenizer),
}

pub struct Pipeline<S: Scalar> {
    pub cfg: RunConfig,
    pub store: ParamStore<S>,
    pub embed: ModEmbed,
    /// Learnable positional table added to the tokens before the lens.
    pub embed_pos: ParamId,
    pub lens: Lens,
    pub trunk: Backbone,
    pub temp: Temperature,
    pub teacher_image: ImageTeacher,
    pub teacher_text: TextTeacher,
    pub class_names: Vec<String>,
}

impl<S: Scalar> Pipeline<S> {
    /// Build every component from the validated config. The same (config,
    /// seed) always produces the same parameter names, values, and flags.
    pub fn build(cfg: &RunConfig) -> Result<Pipeline<S>> {
        cfg.validate()?;
        let class_names = cfg.class_names()?;
        let vocab = cfg.vocab()?;
        let root = Rng::from_seed(cfg.seed);
        let mut store: ParamStore<S> = ParamStore::new();
        let t = &cfg.tokenizer;
        let d = cfg.lens.d;

        let mut rng = root.substream("init.embed", 0);
        let embed = match cfg.modality {
            Modality::PointCloud => ModEmbed::Points(
                MiniPointNet::new(
                    &mut store,
                    "embed",
                    MiniPointNetConfig {
                        hidden1: t.pointnet_hidden1,
                        hidden2: t.pointnet_hidden2,
                        d,
                    },
                    &mut rng,
                )
                .map_err(wrap)?,
            ),
            Modality::Audio => ModEmbed::Audio(
                SpectrogramPatcher::new(&mut store, "embed", t.audio_patch, t.audio_stride, d, &mut rng)
                    .map_err(wrap)?,
            ),
            Modality::Depth => ModEmbed::Grid(
                GridPatcher::new(&mut store, "embed", t.grid_patch, 1, d, false, &mut rng)
                    .map_err(wrap)?,
            ),
            Modality::Tactile => ModEmbed::Grid(
                GridPatcher::new(&mut store, "embed", t.grid_patch, 3, d, false, &mut rng)
                    .map_err(wrap)?,
            ),
            Modality::Eeg => ModEmbed::Eeg(
                EegTokenizer::new(&mut store, "embed", t.eeg_channels, t.eeg_group, d, &mut rng)
                    .map_err(wrap)?,
            ),
        };
        let m = t.token_count(cfg.modality)?;
        let embed_pos = store
            .register("embed.pos", Array::trunc_normal(m, d, 0.02, &mut rng), Decay::Exclude)
            .map_err(wrap)?;

        let mut rng = root.substream("init.lens", 0);
        let lens = Lens::new(&mut store, &cfg.lens, "lens", &mut rng).map_err(wrap)?;

        let mut rng = root.substream("init.trunk", 0);
        let trunk =
            Backbone::new(&mut store, &cfg.backbone, "trunk", &mut rng).map_err(wrap)?;

        let temp = Temperature::new(&mut store, "align").map_err(wrap)?;

        let mut rng = root.substream("init.teacher_image", 0);
        let teacher_image =
            ImageTeacher::new(&mut store, &cfg.teacher_image, "timg", &mut rng)
                .map_err(wrap)?;

        let mut rng = root.substream("init.teacher_text", 0);
        let text_cfg = TextTeacherConfig {
            vocab,
            d: cfg.teacher_text.d,
            d_out: cfg.teacher_text.d_out,
        };
        let teacher_text =
            TextTeacher::new(&mut store, &text_cfg, "ttxt", &mut rng).map_err(wrap)?;

        Ok(Pipeline {
            cfg: cfg.clone(),
            store,
            embed,
            embed_pos,
            lens,
            trunk,
            temp,
            teacher_image,
            teacher_text,
            class_names,
        })
    }

    /// Off-tape audio frontend with the configured settings.
    pub fn spectrogram(&self, wave: &[f64]) -> Result<Spectrogram> {
        let t = &self.cfg.tokenizer;
        log_mel_spectrogram(wave, t.sample_rate, t.n_mels, t.win_ms, t.hop_ms).map_err(wrap)
    }

    /// Tokens for a prepared input. Audio arrives as a spectrogram so the
    /// training loop can mask and mix before projection; other modalities
    /// arrive raw.
    pub fn encode_tokens(
        &self,
        tape: &mut Tape<S>,
        input: &Prepared,
    ) -> Result<TokenSequence> {
        self.encode_tokens_in(tape, &self.store, input)
    }

    /// `encode_tokens` against an explicit store; the store must have been
    /// built from the same config so parameter ids line up.
    pub fn encode_tokens_in(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        input: &Prepared,
    ) -> Result<TokenSequence> {
        let seq = match (&self.embed, input) {
            (ModEmbed::Points(net), Prepared::Points(cloud)) => {
                let t = &self.cfg.tokenizer;
                if cloud.len() < t.n_points {
                    bail!("cloud has {} points, config expects {}", cloud.len(), t.n_points);
                }
                let centers = fps(cloud, t.groups, t.fps_start).map_err(wrap)?;
                let patches = knn_group(cloud, &centers, t.neighbors).map_err(wrap)?;
                net.forward(tape, store, &patches).map_err(wrap)?
            }
            (ModEmbed::Audio(patcher), Prepared::Spec(spec)) => {
                patcher.forward(tape, store, spec).map_err(wrap)?
            }
            (ModEmbed::Grid(patcher), Prepared::Grid(grid)) => {
                patcher.forward(tape, store, grid).map_err(wrap)?
            }
            (ModEmbed::Eeg(tok), Prepared::Eeg(eeg)) => {
                tok.forward(tape, store, eeg).map_err(wrap)?
            }
            _ => bail!("input does not match the configured modality"),
        };
        add_positional(tape, store, seq, self.embed_pos).map_err(wrap)
    }

    /// Normalize a payload into the form `encode_tokens` consumes: audio to
    /// a spectrogram, depth to standardized disparity, the rest passed on.
    pub fn prepare(&self, payload: &Payload) -> Result<Prepared> {
        Ok(match payload {
            Payload::Points(pc) => Prepared::Points(pc.clone()),
            Payload::Audio(wave) => Prepared::Spec(self.spectrogram(wave)?),
            Payload::Grid(g) => {
                if self.cfg.modality == Modality::Depth {
                    Prepared::Grid(
                        depth_to_disparity(g, self.cfg.tokenizer.disparity_scale).map_err(wrap)?,
                    )
                } else {
                    Prepared::Grid(g.clone())
                }
            }
            Payload::Eeg(e) => Prepared::Eeg(e.clone()),
        })
    }

    /// Lens, trunk, projection: tokens to a unit-norm 1 x d_out embedding.
    pub fn head(&self, tape: &mut Tape<S>, tokens: TokenSequence) -> Result<NodeId> {
        self.head_in(tape, &self.store, tokens)
    }

    /// `head` against an explicit store built from the same config.
    pub fn head_in(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        tokens: TokenSequence,
    ) -> Result<NodeId> {
        let routed = self.lens.forward(tape, store, &tokens).map_err(wrap)?;
        let grid = if routed.m == tokens.m {
            self.cfg.tokenizer.token_grid(self.cfg.modality)
        } else {
            None
        };
        let out = self.trunk.forward(tape, store, &routed, grid).map_err(wrap)?;
        self.trunk.project(tape, store, out.pooled).map_err(wrap)
    }

    /// Full evaluation path for one sample, no augmentation.
    pub fn student(&self, tape: &mut Tape<S>, payload: &Payload) -> Result<NodeId> {
        let prepared = self.prepare(payload)?;
        let tokens = self.encode_tokens(tape, &prepared)?;
        self.head(tape, tokens)
    }

    /// Off-tape embedding of one sample as plain data.
    pub fn student_values(&self, payload: &Payload) -> Result<Array<S>> {
        let mut tape: Tape<S> = Tape::new();
        let node = self.student(&mut tape, payload)?;
        Ok(tape.value(node).clone())
    }

    /// Teacher embeddings for one anchor modality over a sample list,
    /// stacked B x d_out. Always off-tape: anchors are supervision constants.
    pub fn anchor_rows(&self, which: AnchorModality, samples: &[&Sample]) -> Result<Array<S>> {
        let mut rows = Vec::with_capacity(samples.len());
        for s in samples {
            let row = match which {
                AnchorModality::Image => {
                    self.teacher_image.encode(&self.store, &s.image).map_err(wrap)?
                }
                AnchorModality::Text => {
                    self.teacher_text.encode_ids(&self.store, &s.text_ids).map_err(wrap)?
                }
            };
            rows.push(row);
        }
        Array::vcat(&rows).map_err(wrap)
    }

    /// Class rows for zero-shot scoring: template-averaged text embeddings.
    pub fn class_matrix(&self, templates: &[String]) -> Result<Array<S>> {
        class_template_embeddings(&self.teacher_text, &self.store, &self.class_names, templates)
            .map_err(wrap)
    }

    /// Ids of every parameter that trains under the current config.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| !self.store.get(id).frozen)
            .collect()
    }
}

/// Payload after deterministic preprocessing, ready for the embedder.
pub enum Prepared {
    Points(PointCloud),
    Spec(Spectrogram),
    Grid(Grid),
    Eeg(EEGSequence),
}

pub(crate) fn wrap(e: omnilens_core::error::Error) -> anyhow::Error {
    anyhow!("{e}")
}

/// Unit-norm embeddings for a sample list, stacked B x d_out, no augmentation.
pub fn embed_samples<S: Scalar>(pipe: &Pipeline<S>, samples: &[&Sample]) -> Result<Array<S>> {
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        rows.push(pipe.student_values(&s.payload)?);
    }
    Array::vcat(&rows).map_err(wrap)
}
