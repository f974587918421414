//! Lens adapters: the trainable modules that map modality token embeddings
//! into the trunk's input space.
//!
//! `SAttn` is a plain stack of pre-norm transformer blocks and preserves
//! sequence length. `IterCSAttn` repeatedly cross-attends a learned latent
//! array to the input tokens and refines the latents with self-attention
//! layers, so its output length is always `n_latents` no matter how many
//! tokens come in. With `tie_weights`, blocks 2..N share one parameter set;
//! block 1 always keeps its own.

use alloc::format;
use alloc::vec::Vec;

use crate::array::Array;

use crate::error::{config_err, Result};
use crate::nn::{block_prefix, TransformerBlock};
use crate::param::{Decay, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tokenize::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LensVariant {
    #[serde(rename = "s_attn")]
    SAttn,
    #[serde(rename = "iter_cs_attn")]
    IterCSAttn,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LensConfig {
    pub variant: LensVariant,
    /// Block count N.
    pub blocks: usize,
    /// Self-attention layers per block; IterCSAttn only.
    #[serde(default)]
    pub self_layers: usize,
    #[serde(default)]
    pub tie_weights: bool,
    /// Latent row count n; IterCSAttn only.
    #[serde(default)]
    pub n_latents: usize,
    pub d: usize,
    pub heads: usize,
}

impl LensConfig {
    /// Output sequence length for an m-token input.
    pub fn output_len(&self, m: usize) -> usize {
        match self.variant {
            LensVariant::SAttn => m,
            LensVariant::IterCSAttn => self.n_latents,
        }
    }
}

/// One IterCSAttn step: cross-attend the latents to the input, then run the
/// self-attention tower over the latents.
struct IterStage {
    cross: TransformerBlock,
    tower: Vec<TransformerBlock>,
}

enum LensBody {
    SelfStack(Vec<TransformerBlock>),
    Iterative {
        latents: ParamId,
        stages: Vec<IterStage>,
    },
}

pub struct Lens {
    cfg: LensConfig,
    body: LensBody,
    /// Application order as stage indices; tied models repeat index 1.
    schedule: Vec<usize>,
}

impl Lens {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &LensConfig,
        scope: &str,
        rng: &mut Rng,
    ) -> Result<Lens> {
        if cfg.d == 0 {
            return Err(config_err!("lens width must be positive"));
        }
        if cfg.tie_weights && cfg.blocks < 2 {
            return Err(config_err!(
                "weight tying shares blocks 2..N and needs N >= 2, got N={}",
                cfg.blocks
            ));
        }
        let distinct = if cfg.tie_weights { 2 } else { cfg.blocks };
        let schedule: Vec<usize> = (0..cfg.blocks).map(|i| i.min(distinct.saturating_sub(1))).collect();
        let hidden = 4 * cfg.d;
        let body = match cfg.variant {
            LensVariant::SAttn => {
                let mut blocks = Vec::with_capacity(distinct);
                for i in 0..distinct {
                    let prefix = block_prefix(scope, i + 1);
                    blocks.push(TransformerBlock::new(
                        store, &prefix, cfg.d, cfg.heads, hidden, false, rng,
                    )?);
                }
                LensBody::SelfStack(blocks)
            }
            LensVariant::IterCSAttn => {
                if cfg.n_latents == 0 {
                    return Err(config_err!("latent bottleneck needs n_latents >= 1"));
                }
                if cfg.blocks == 0 {
                    return Err(config_err!(
                        "a latent lens with zero blocks never reads its input"
                    ));
                }
                let latents = store.register(
                    &format!("{scope}.latents"),
                    Array::trunc_normal(cfg.n_latents, cfg.d, 0.02, rng),
                    Decay::Exclude,
                )?;
                let mut stages = Vec::with_capacity(distinct);
                for i in 0..distinct {
                    let prefix = block_prefix(scope, i + 1);
                    let cross = TransformerBlock::new(
                        store,
                        &format!("{prefix}.cross"),
                        cfg.d,
                        cfg.heads,
                        hidden,
                        true,
                        rng,
                    )?;
                    let mut tower = Vec::with_capacity(cfg.self_layers);
                    for j in 0..cfg.self_layers {
                        tower.push(TransformerBlock::new(
                            store,
                            &format!("{prefix}.self{}", j + 1),
                            cfg.d,
                            cfg.heads,
                            hidden,
                            false,
                            rng,
                        )?);
                    }
                    stages.push(IterStage { cross, tower });
                }
                LensBody::Iterative { latents, stages }
            }
        };
        Ok(Lens {
            cfg: cfg.clone(),
            body,
            schedule,
        })
    }

    pub fn config(&self) -> &LensConfig {
        &self.cfg
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        tokens: &TokenSequence,
    ) -> Result<TokenSequence> {
        if tokens.d != self.cfg.d {
            return Err(config_err!(
                "token width {} does not match lens width {}",
                tokens.d,
                self.cfg.d
            ));
        }
        let out = match &self.body {
            LensBody::SelfStack(blocks) => {
                let mut x = tokens.node;
                for &i in &self.schedule {
                    x = blocks[i].forward(tape, store, x)?;
                }
                x
            }
            LensBody::Iterative { latents, stages } => {
                let mut x = tape.param(store, *latents);
                for &i in &self.schedule {
                    let stage = &stages[i];
                    x = stage.cross.forward_cross(tape, store, x, tokens.node)?;
                    for block in &stage.tower {
                        x = block.forward(tape, store, x)?;
                    }
                }
                x
            }
        };
        Ok(TokenSequence::new(tape, out))
    }

    /// Distinct parameter ids in registration order. Tied blocks appear once.
    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.body {
            LensBody::SelfStack(blocks) => blocks.iter().flat_map(|b| b.param_ids()).collect(),
            LensBody::Iterative { latents, stages } => {
                let mut ids = alloc::vec![*latents];
                for s in stages {
                    ids.extend(s.cross.param_ids());
                    for b in &s.tower {
                        ids.extend(b.param_ids());
                    }
                }
                ids
            }
        }
    }

    pub fn latents(&self) -> Option<ParamId> {
        match &self.body {
            LensBody::SelfStack(_) => None,
            LensBody::Iterative { latents, .. } => Some(*latents),
        }
    }

    /// Seed an untied self-attention stack from donor blocks, one per lens
    /// block. The copies train independently of the donors afterwards.
    pub fn init_from_blocks<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        donors: &[TransformerBlock],
    ) -> Result<()> {
        let blocks = match &self.body {
            LensBody::SelfStack(blocks) => blocks,
            LensBody::Iterative { .. } => {
                return Err(config_err!(
                    "backbone initialization applies to self-attention lenses only"
                ));
            }
        };
        if self.cfg.tie_weights {
            return Err(config_err!(
                "cannot seed a tied lens from per-block donors"
            ));
        }
        if donors.len() != blocks.len() {
            return Err(config_err!(
                "lens has {} blocks but {} donor blocks were given",
                blocks.len(),
                donors.len()
            ));
        }
        for (mine, donor) in blocks.iter().zip(donors) {
            mine.copy_values_from(store, donor)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LAYER_NORM_EPS;
    use crate::oracle::{snapshot_block, transformer_block_explicit};
    use crate::optim::{AdamW, AdamWConfig};

    fn s_attn_cfg(blocks: usize, d: usize, heads: usize) -> LensConfig {
        LensConfig {
            variant: LensVariant::SAttn,
            blocks,
            self_layers: 0,
            tie_weights: false,
            n_latents: 0,
            d,
            heads,
        }
    }

    fn iter_cfg(blocks: usize, self_layers: usize, n_latents: usize, tie: bool) -> LensConfig {
        LensConfig {
            variant: LensVariant::IterCSAttn,
            blocks,
            self_layers,
            tie_weights: tie,
            n_latents,
            d: 8,
            heads: 2,
        }
    }

    fn tokens_of(tape: &mut Tape<f64>, values: Array<f64>) -> TokenSequence {
        let node = tape.constant(values);
        TokenSequence::new(tape, node)
    }

    #[test]
    fn empty_self_stack_is_identity() {
        let mut rng = Rng::from_seed(1);
        let mut store: ParamStore<f64> = ParamStore::new();
        let lens = Lens::new(&mut store, &s_attn_cfg(0, 8, 2), "lens", &mut rng).unwrap();
        assert_eq!(store.len(), 0);

        let mut tape: Tape<f64> = Tape::new();
        let input = Array::trunc_normal(5, 8, 1.0, &mut rng);
        let tokens = tokens_of(&mut tape, input.clone());
        let out = lens.forward(&mut tape, &store, &tokens).unwrap();
        assert_eq!(out.node, tokens.node);
        assert_eq!(tape.value(out.node).data(), input.data());
    }

    #[test]
    fn single_token_self_stack_keeps_shape() {
        let mut rng = Rng::from_seed(2);
        let mut store: ParamStore<f64> = ParamStore::new();
        let lens = Lens::new(&mut store, &s_attn_cfg(1, 8, 2), "lens", &mut rng).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let tokens = tokens_of(&mut tape, Array::trunc_normal(1, 8, 1.0, &mut rng));
        let out = lens.forward(&mut tape, &store, &tokens).unwrap();
        assert_eq!((out.m, out.d), (1, 8));
        assert!(tape.value(out.node).all_finite());
    }

    #[test]
    fn one_block_self_stack_matches_explicit_oracle() {
        let mut rng = Rng::from_seed(3);
        let mut store: ParamStore<f64> = ParamStore::new();
        let lens = Lens::new(&mut store, &s_attn_cfg(1, 8, 2), "lens", &mut rng).unwrap();
        let block = match &lens.body {
            LensBody::SelfStack(blocks) => &blocks[0],
            _ => unreachable!(),
        };
        let weights = snapshot_block(&store, block);

        let input = Array::trunc_normal(4, 8, 1.0, &mut rng);
        let mut tape: Tape<f64> = Tape::new();
        let tokens = tokens_of(&mut tape, input.clone());
        let out = lens.forward(&mut tape, &store, &tokens).unwrap();

        let want = transformer_block_explicit(&input, None, &weights, LAYER_NORM_EPS);
        for (a, b) in tape.value(out.node).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn latent_bottleneck_fixes_output_length() {
        let mut rng = Rng::from_seed(4);
        let mut store: ParamStore<f64> = ParamStore::new();
        let lens = Lens::new(&mut store, &iter_cfg(2, 1, 16, false), "lens", &mut rng).unwrap();
        for m in [32usize, 196, 2048] {
            let mut tape: Tape<f64> = Tape::new();
            let tokens = tokens_of(&mut tape, Array::trunc_normal(m, 8, 1.0, &mut rng));
            let out = lens.forward(&mut tape, &store, &tokens).unwrap();
            assert_eq!((out.m, out.d), (16, 8), "m={m}");
            assert!(tape.value(out.node).all_finite());
        }
    }

    #[test]
    fn single_latent_cross_block_matches_explicit_oracle() {
        let mut rng = Rng::from_seed(5);
        let mut store: ParamStore<f64> = ParamStore::new();
        let cfg = LensConfig {
            variant: LensVariant::IterCSAttn,
            blocks: 1,
            self_layers: 0,
            tie_weights: false,
            n_latents: 1,
            d: 4,
            heads: 1,
        };
        let lens = Lens::new(&mut store, &cfg, "lens", &mut rng).unwrap();
        let (latents_id, stage) = match &lens.body {
            LensBody::Iterative { latents, stages } => (*latents, &stages[0]),
            _ => unreachable!(),
        };
        let weights = snapshot_block(&store, &stage.cross);
        let latents = store.get(latents_id).value.clone();

        let input = Array::trunc_normal(2, 4, 1.0, &mut rng);
        let mut tape: Tape<f64> = Tape::new();
        let tokens = tokens_of(&mut tape, input.clone());
        let out = lens.forward(&mut tape, &store, &tokens).unwrap();

        let want = transformer_block_explicit(&latents, Some(&input), &weights, LAYER_NORM_EPS);
        assert_eq!((out.m, out.d), (1, 4));
        for (a, b) in tape.value(out.node).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn duplicated_tokens_leave_latent_output_unchanged() {
        let mut rng = Rng::from_seed(6);
        let mut store: ParamStore<f64> = ParamStore::new();
        let lens = Lens::new(&mut store, &iter_cfg(2, 1, 4, false), "lens", &mut rng).unwrap();

        let base = Array::trunc_normal(3, 8, 1.0, &mut rng);
        let mut doubled = base.data().to_vec();
        doubled.extend_from_slice(base.data());
        let doubled = Array::from_vec(6, 8, doubled).unwrap();

        let mut t1: Tape<f64> = Tape::new();
        let tok1 = tokens_of(&mut t1, base);
        let out1 = lens.forward(&mut t1, &store, &tok1).unwrap();
        let mut t2: Tape<f64> = Tape::new();
        let tok2 = tokens_of(&mut t2, doubled);
        let out2 = lens.forward(&mut t2, &store, &tok2).unwrap();

        for (a, b) in t1
            .value(out1.node)
            .data()
            .iter()
            .zip(t2.value(out2.node).data())
        {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn tied_depths_share_one_parameter_budget() {
        let untied_2 = {
            let mut rng = Rng::from_seed(7);
            let mut store: ParamStore<f64> = ParamStore::new();
            Lens::new(&mut store, &iter_cfg(2, 1, 16, false), "lens", &mut rng).unwrap();
            store.trainable_count()
        };
        for n in [4usize, 6, 8] {
            let mut rng = Rng::from_seed(7);
            let mut store: ParamStore<f64> = ParamStore::new();
            let lens = Lens::new(&mut store, &iter_cfg(n, 1, 16, true), "lens", &mut rng).unwrap();
            assert_eq!(store.trainable_count(), untied_2, "N={n}");
            assert_eq!(lens.schedule.len(), n);
            assert_eq!(lens.schedule[0], 0);
            assert!(lens.schedule[1..].iter().all(|&i| i == 1));
        }
    }

    #[test]
    fn tying_requires_at_least_two_blocks() {
        let mut rng = Rng::from_seed(8);
        let mut store: ParamStore<f64> = ParamStore::new();
        let err = Lens::new(&mut store, &iter_cfg(1, 1, 16, true), "lens", &mut rng);
        assert!(err.is_err());
    }

    #[test]
    fn latent_lens_rejects_zero_blocks_and_zero_latents() {
        let mut rng = Rng::from_seed(9);
        let mut store: ParamStore<f64> = ParamStore::new();
        assert!(Lens::new(&mut store, &iter_cfg(0, 1, 16, false), "a", &mut rng).is_err());
        assert!(Lens::new(&mut store, &iter_cfg(2, 1, 0, false), "b", &mut rng).is_err());
    }

    #[test]
    fn tied_blocks_have_no_third_block_storage_and_still_train() {
        let mut rng = Rng::from_seed(10);
        let mut store: ParamStore<f64> = ParamStore::new();
        let lens = Lens::new(&mut store, &iter_cfg(3, 1, 4, true), "lens", &mut rng).unwrap();
        assert!(store.by_name("lens.block2.cross.ln1.gain").is_some());
        assert!(store.by_name("lens.block3.cross.ln1.gain").is_none());

        let mut tape: Tape<f64> = Tape::new();
        let tokens = tokens_of(&mut tape, Array::trunc_normal(5, 8, 1.0, &mut rng));
        let out = lens.forward(&mut tape, &store, &tokens).unwrap();
        let loss = tape.sum_all(out.node);
        let grads = tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&grads, &mut store);

        // The shared block ran twice, so its gradient collects both passes.
        let shared = store.by_name("lens.block2.cross.attn.q.w");
        let shared_id = shared.expect("shared block parameter");
        let gnorm: f64 = store.get(shared_id).grad.data().iter().map(|g| g * g).sum();
        assert!(gnorm > 0.0);

        let mut opt: AdamW<f64> = AdamW::new(AdamWConfig::default());
        opt.step(&mut store, 1e-3);
        let mut t2: Tape<f64> = Tape::new();
        let tokens2 = tokens_of(&mut t2, Array::trunc_normal(5, 8, 1.0, &mut rng));
        let out2 = lens.forward(&mut t2, &store, &tokens2).unwrap();
        assert!(t2.value(out2.node).all_finite());
    }

    #[test]
    fn donor_seeded_stack_reproduces_donor_forward() {
        let mut rng = Rng::from_seed(11);
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut donors = Vec::new();
        for i in 0..4 {
            donors.push(
                TransformerBlock::new(
                    &mut store,
                    &block_prefix("trunk", i + 1),
                    8,
                    2,
                    32,
                    false,
                    &mut rng,
                )
                .unwrap(),
            );
        }
        let lens = Lens::new(&mut store, &s_attn_cfg(4, 8, 2), "lens", &mut rng).unwrap();
        lens.init_from_blocks(&mut store, &donors).unwrap();

        let input = Array::trunc_normal(3, 8, 1.0, &mut rng);
        let mut tape: Tape<f64> = Tape::new();
        let tokens = tokens_of(&mut tape, input.clone());
        let out = lens.forward(&mut tape, &store, &tokens).unwrap();

        let mut t2: Tape<f64> = Tape::new();
        let mut x = t2.constant(input);
        for d in &donors {
            x = d.forward(&mut t2, &store, x).unwrap();
        }
        assert_eq!(tape.value(out.node).data(), t2.value(x).data());
    }

    #[test]
    fn donor_seeding_rejects_mismatch_and_wrong_variant() {
        let mut rng = Rng::from_seed(12);
        let mut store: ParamStore<f64> = ParamStore::new();
        let donors = alloc::vec![
            TransformerBlock::new(&mut store, "t.block1", 8, 2, 32, false, &mut rng).unwrap(),
        ];
        let stack = Lens::new(&mut store, &s_attn_cfg(2, 8, 2), "sa", &mut rng).unwrap();
        assert!(stack.init_from_blocks(&mut store, &donors).is_err());
        let latent = Lens::new(&mut store, &iter_cfg(2, 1, 4, false), "it", &mut rng).unwrap();
        assert!(latent.init_from_blocks(&mut store, &donors).is_err());
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut rng = Rng::from_seed(13);
        let mut store: ParamStore<f64> = ParamStore::new();
        let lens = Lens::new(&mut store, &s_attn_cfg(1, 8, 2), "lens", &mut rng).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let tokens = tokens_of(&mut tape, Array::trunc_normal(3, 6, 1.0, &mut rng));
        assert!(lens.forward(&mut tape, &store, &tokens).is_err());
    }

    #[test]
    fn gradients_reach_the_latent_array() {
        let mut rng = Rng::from_seed(14);
        let mut store: ParamStore<f64> = ParamStore::new();
        let lens = Lens::new(&mut store, &iter_cfg(1, 1, 4, false), "lens", &mut rng).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let tokens = tokens_of(&mut tape, Array::trunc_normal(3, 8, 1.0, &mut rng));
        let out = lens.forward(&mut tape, &store, &tokens).unwrap();
        let loss = tape.sum_all(out.node);
        let grads = tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&grads, &mut store);
        let id = lens.latents().unwrap();
        let gnorm: f64 = store.get(id).grad.data().iter().map(|g| g * g).sum();
        assert!(gnorm > 0.0);
    }
}
