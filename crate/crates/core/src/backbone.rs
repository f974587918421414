//! The transformer trunk: a deterministic stand-in for a pretrained ViT.
//!
//! The full depth L is built once from a seed; forward passes run only the
//! configured suffix of blocks ("use the last l of L layers"). By default
//! every trunk weight is frozen and only the class token and the output
//! projection train. An ablation flag makes the whole trunk trainable so the
//! scratch and fine-tune encoder designs stay expressible with the same
//! plumbing.

use alloc::format;
use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{config_err, degenerate_err, Result};
use crate::nn::{block_prefix, LayerNormLayer, Linear, TransformerBlock};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tokenize::TokenSequence;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    /// Total block count L.
    pub total_blocks: usize,
    /// 1-based inclusive range of blocks run in forward. `l_first == l_last + 1`
    /// encodes the empty range (positions-only passthrough, test configs).
    pub l_first: usize,
    pub l_last: usize,
    pub d: usize,
    pub heads: usize,
    /// Output embedding width, matching the teacher space.
    pub d_out: usize,
    /// Native positional table length, counting the class row when `use_cls`.
    pub pos_len: usize,
    pub use_cls: bool,
    /// Keep the final layer norm before projection.
    #[serde(default = "default_true")]
    pub final_norm: bool,
    /// Native 2-D patch geometry of the positional table body, when it has one.
    #[serde(default)]
    pub pos_grid: Option<(usize, usize)>,
    /// Ablation switch: leave trunk weights trainable instead of frozen.
    #[serde(default)]
    pub trainable: bool,
}

fn default_true() -> bool {
    true
}

impl BackboneConfig {
    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_out == 0 {
            return Err(config_err!("trunk widths must be positive"));
        }
        let body = self.pos_len.saturating_sub(usize::from(self.use_cls));
        if body == 0 {
            return Err(config_err!(
                "positional table needs at least one non-class row"
            ));
        }
        if let Some((h, w)) = self.pos_grid {
            if h * w != body {
                return Err(config_err!(
                    "declared {h}x{w} grid does not tile the {body}-row positional body"
                ));
            }
        }
        let empty = self.l_first == self.l_last + 1;
        if empty {
            if self.l_last > self.total_blocks {
                return Err(config_err!("block range outside trunk"));
            }
        } else if self.l_first == 0 || self.l_first > self.l_last || self.l_last > self.total_blocks
        {
            return Err(config_err!(
                "block range {}..={} invalid for an L={} trunk",
                self.l_first,
                self.l_last,
                self.total_blocks
            ));
        }
        Ok(())
    }

    pub fn blocks_run(&self) -> usize {
        (self.l_last + 1).saturating_sub(self.l_first)
    }
}

pub struct TrunkOutput {
    /// Token sequence after the trunk, class row excluded.
    pub seq: NodeId,
    /// Class-token row when present, otherwise the mean over tokens.
    pub pooled: NodeId,
}

pub struct Backbone {
    cfg: BackboneConfig,
    blocks: Vec<TransformerBlock>,
    cls: Option<ParamId>,
    pos: ParamId,
    final_ln: LayerNormLayer,
    proj: Linear,
}

impl Backbone {
    /// Build all L blocks deterministically from the caller's rng and apply
    /// the configured frozen mask.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &BackboneConfig,
        scope: &str,
        rng: &mut Rng,
    ) -> Result<Backbone> {
        cfg.validate()?;
        let hidden = 4 * cfg.d;
        let mut blocks = Vec::with_capacity(cfg.total_blocks);
        for i in 0..cfg.total_blocks {
            blocks.push(TransformerBlock::new(
                store,
                &block_prefix(scope, i + 1),
                cfg.d,
                cfg.heads,
                hidden,
                false,
                rng,
            )?);
        }
        let cls = if cfg.use_cls {
            Some(store.register(
                &format!("{scope}.cls"),
                Array::trunc_normal(1, cfg.d, 0.02, rng),
                crate::param::Decay::Exclude,
            )?)
        } else {
            None
        };
        let pos = store.register(
            &format!("{scope}.pos"),
            Array::trunc_normal(cfg.pos_len, cfg.d, 0.02, rng),
            crate::param::Decay::Exclude,
        )?;
        let final_ln = LayerNormLayer::new(store, &format!("{scope}.ln_f"), cfg.d)?;
        let proj = Linear::new(store, &format!("{scope}.proj"), cfg.d, cfg.d_out, rng)?;
        let trunk = Backbone {
            cfg: cfg.clone(),
            blocks,
            cls,
            pos,
            final_ln,
            proj,
        };
        if !cfg.trainable {
            trunk.apply_frozen_mask(store);
        }
        Ok(trunk)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[TransformerBlock] {
        &self.blocks
    }

    /// Freeze the trunk proper: blocks, positional table, final norm. The
    /// class token and projection stay trainable (alignment plumbing).
    pub fn apply_frozen_mask<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for id in self.trunk_param_ids() {
            store.set_frozen(id, true);
        }
    }

    pub fn unfreeze_trunk<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for id in self.trunk_param_ids() {
            store.set_frozen(id, false);
        }
    }

    /// Parameters the default mode keeps frozen.
    pub fn trunk_param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.blocks.iter().flat_map(|b| b.param_ids()).collect();
        ids.push(self.pos);
        ids.extend(self.final_ln.param_ids());
        ids
    }

    /// Trainable head: class token (if any) and the projection.
    pub fn head_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some(cls) = self.cls {
            ids.push(cls);
        }
        ids.extend(self.proj.param_ids());
        ids
    }

    /// Positional rows for an n-token input, class row first when configured.
    /// Matching lengths reuse the stored table; anything else is resampled
    /// outside the tape (1-D over the index axis, bilinear when both the
    /// native table and the input declare grid geometry).
    fn positional_values<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        n: usize,
        token_grid: Option<(usize, usize)>,
    ) -> Result<Option<Array<S>>> {
        let body_native = self.cfg.pos_len - usize::from(self.cfg.use_cls);
        if n == body_native {
            return Ok(None);
        }
        let table = &store.get(self.pos).value;
        let skip = usize::from(self.cfg.use_cls);
        let body = table.slice_rows(skip, body_native);
        let resampled = match (self.cfg.pos_grid, token_grid) {
            (Some(src), Some(dst)) => {
                if dst.0 * dst.1 != n {
                    return Err(config_err!(
                        "token grid {}x{} does not tile {n} tokens",
                        dst.0,
                        dst.1
                    ));
                }
                interpolate_pos_grid(&body, src, dst)?
            }
            _ => interpolate_pos_rows(&body, n)?,
        };
        let mut rows = Vec::with_capacity(n + skip);
        if self.cfg.use_cls {
            rows.push(table.slice_rows(0, 1));
        }
        rows.push(resampled);
        Ok(Some(Array::vcat(&rows)?))
    }

    /// Prepend the class token, add positions, run the configured block
    /// range, and apply the final norm.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        tokens: &TokenSequence,
        token_grid: Option<(usize, usize)>,
    ) -> Result<TrunkOutput> {
        if tokens.d != self.cfg.d {
            return Err(config_err!(
                "token width {} does not match trunk width {}",
                tokens.d,
                self.cfg.d
            ));
        }
        let mut x = tokens.node;
        if let Some(cls) = self.cls {
            let cls_node = tape.param(store, cls);
            x = tape.concat_rows(&[cls_node, x])?;
        }
        let pos_node = match self.positional_values(store, tokens.m, token_grid)? {
            None => tape.param(store, self.pos),
            Some(values) => tape.constant(values),
        };
        x = tape.add(x, pos_node)?;
        for block in &self.blocks[self.l_range()] {
            x = block.forward(tape, store, x)?;
        }
        if self.cfg.final_norm {
            x = self.final_ln.forward(tape, store, x)?;
        }
        let (seq, pooled) = if self.cfg.use_cls {
            let pooled = tape.slice_rows(x, 0, 1)?;
            let seq = tape.slice_rows(x, 1, tokens.m)?;
            (seq, pooled)
        } else {
            (x, tape.mean_rows(x))
        };
        Ok(TrunkOutput { seq, pooled })
    }

    /// Project to the teacher space and normalize; this is the embedding the
    /// alignment loss consumes.
    pub fn project<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        pooled: NodeId,
    ) -> Result<NodeId> {
        let projected = self.proj.forward(tape, store, pooled)?;
        tape.l2_normalize(projected)
    }

    fn l_range(&self) -> core::ops::Range<usize> {
        (self.cfg.l_first - 1).min(self.cfg.l_last)..self.cfg.l_last
    }
}

/// Endpoint-preserving 1-D resampling of positional rows.
pub fn interpolate_pos_rows<S: Scalar>(body: &Array<S>, new_len: usize) -> Result<Array<S>> {
    if new_len == 0 {
        return Err(config_err!("cannot resample to zero rows"));
    }
    let (old, d) = body.shape();
    if old < 2 {
        return Err(degenerate_err!("resampling needs at least two source rows"));
    }
    if new_len == old {
        return Ok(body.clone());
    }
    let mut out = Array::zeros(new_len, d);
    for j in 0..new_len {
        let x = if new_len == 1 {
            0.0
        } else {
            j as f64 * (old - 1) as f64 / (new_len - 1) as f64
        };
        let i0 = libm::floor(x) as usize;
        let i1 = (i0 + 1).min(old - 1);
        let frac = S::from_f64(x - i0 as f64);
        let one = S::ONE;
        for c in 0..d {
            let v = body.at(i0, c) * (one - frac) + body.at(i1, c) * frac;
            *out.at_mut(j, c) = v;
        }
    }
    Ok(out)
}

/// Bilinear resampling of a grid-shaped positional body, done separably:
/// rows axis first, then columns axis.
pub fn interpolate_pos_grid<S: Scalar>(
    body: &Array<S>,
    src: (usize, usize),
    dst: (usize, usize),
) -> Result<Array<S>> {
    let (h, w) = src;
    let (h2, w2) = dst;
    if h * w != body.rows() {
        return Err(config_err!("source grid does not tile the table"));
    }
    if h2 == 0 || w2 == 0 {
        return Err(config_err!("cannot resample to an empty grid"));
    }
    if h < 2 || w < 2 {
        return Err(degenerate_err!("grid resampling needs a 2x2 source"));
    }
    let d = body.cols();
    // Pass 1: stretch columns within each source row of the grid.
    let mut pass1 = Array::zeros(h * w2, d);
    for gy in 0..h {
        let strip = body.slice_rows(gy * w, w);
        let wide = interpolate_pos_rows(&strip, w2)?;
        for gx in 0..w2 {
            for c in 0..d {
                *pass1.at_mut(gy * w2 + gx, c) = wide.at(gx, c);
            }
        }
    }
    // Pass 2: stretch rows within each column of the widened grid.
    let mut out = Array::zeros(h2 * w2, d);
    for gx in 0..w2 {
        let mut column = Array::zeros(h, d);
        for gy in 0..h {
            for c in 0..d {
                *column.at_mut(gy, c) = pass1.at(gy * w2 + gx, c);
            }
        }
        let tall = interpolate_pos_rows(&column, h2)?;
        for gy in 0..h2 {
            for c in 0..d {
                *out.at_mut(gy * w2 + gx, c) = tall.at(gy, c);
            }
        }
    }
    Ok(out)
}

/// Values of every frozen parameter, paired with its id.
pub fn frozen_snapshot<S: Scalar>(store: &ParamStore<S>) -> Vec<(ParamId, Array<S>)> {
    store
        .iter()
        .filter(|(_, p)| p.frozen)
        .map(|(id, p)| (id, p.value.clone()))
        .collect()
}

/// True iff every snapshotted parameter is still frozen and bit-identical.
pub fn frozen_unchanged<S: Scalar>(store: &ParamStore<S>, snap: &[(ParamId, Array<S>)]) -> bool {
    snap.iter().all(|(id, value)| {
        let p = store.get(*id);
        p.frozen
            && p.value.shape() == value.shape()
            && p.value
                .data()
                .iter()
                .zip(value.data())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LAYER_NORM_EPS;
    use crate::oracle::{
        interp_grid_direct, interp_rows_direct, layer_norm_explicit, snapshot_block,
        transformer_block_explicit,
    };
    use crate::optim::{AdamW, AdamWConfig};

    fn micro_cfg() -> BackboneConfig {
        BackboneConfig {
            total_blocks: 2,
            l_first: 1,
            l_last: 2,
            d: 8,
            heads: 2,
            d_out: 6,
            pos_len: 5,
            use_cls: true,
            final_norm: true,
            pos_grid: None,
            trainable: false,
        }
    }

    fn tokens_of(tape: &mut Tape<f64>, values: Array<f64>) -> TokenSequence {
        let node = tape.constant(values);
        TokenSequence::new(tape, node)
    }

    #[test]
    fn same_seed_builds_identical_trunks() {
        let build = || {
            let mut rng = Rng::from_seed(42);
            let mut store: ParamStore<f64> = ParamStore::new();
            Backbone::new(&mut store, &micro_cfg(), "trunk", &mut rng).unwrap();
            store.snapshot()
        };
        let a = build();
        let b = build();
        assert_eq!(a.len(), b.len());
        assert!(a
            .iter()
            .zip(&b)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn default_mask_freezes_trunk_but_not_head() {
        let mut rng = Rng::from_seed(1);
        let mut store: ParamStore<f64> = ParamStore::new();
        let trunk = Backbone::new(&mut store, &micro_cfg(), "trunk", &mut rng).unwrap();
        for id in trunk.trunk_param_ids() {
            assert!(store.get(id).frozen, "{}", store.get(id).name);
        }
        for id in trunk.head_param_ids() {
            assert!(!store.get(id).frozen, "{}", store.get(id).name);
        }
        let mut cfg = micro_cfg();
        cfg.trainable = true;
        let mut store2: ParamStore<f64> = ParamStore::new();
        let trainable = Backbone::new(&mut store2, &cfg, "trunk", &mut rng).unwrap();
        for id in trainable.trunk_param_ids() {
            assert!(!store2.get(id).frozen);
        }
    }

    #[test]
    fn forward_runs_only_the_selected_suffix() {
        let mut cfg = micro_cfg();
        cfg.total_blocks = 4;
        cfg.l_first = 3;
        cfg.l_last = 4;
        let mut rng = Rng::from_seed(2);
        let mut store: ParamStore<f64> = ParamStore::new();
        let trunk = Backbone::new(&mut store, &cfg, "trunk", &mut rng).unwrap();
        assert_eq!(cfg.blocks_run(), 2);

        let input = Array::trunc_normal(4, 8, 1.0, &mut rng);
        let mut tape: Tape<f64> = Tape::new();
        let tokens = tokens_of(&mut tape, input.clone());
        let out = trunk.forward(&mut tape, &store, &tokens, None).unwrap();

        // Manual composition touching blocks 3 and 4 only.
        let mut t2: Tape<f64> = Tape::new();
        let x0 = t2.constant(input);
        let cls = t2.param(&store, trunk.cls.unwrap());
        let mut x = t2.concat_rows(&[cls, x0]).unwrap();
        let pos = t2.param(&store, trunk.pos);
        x = t2.add(x, pos).unwrap();
        x = trunk.blocks[2].forward(&mut t2, &store, x).unwrap();
        x = trunk.blocks[3].forward(&mut t2, &store, x).unwrap();
        x = trunk.final_ln.forward(&mut t2, &store, x).unwrap();
        let pooled = t2.slice_rows(x, 0, 1).unwrap();
        assert_eq!(
            tape.value(out.pooled).data(),
            t2.value(pooled).data()
        );
    }

    #[test]
    fn empty_block_range_only_adds_positions() {
        let cfg = BackboneConfig {
            total_blocks: 2,
            l_first: 1,
            l_last: 0,
            d: 8,
            heads: 2,
            d_out: 4,
            pos_len: 3,
            use_cls: false,
            final_norm: false,
            pos_grid: None,
            trainable: false,
        };
        let mut rng = Rng::from_seed(3);
        let mut store: ParamStore<f64> = ParamStore::new();
        let trunk = Backbone::new(&mut store, &cfg, "trunk", &mut rng).unwrap();
        let input = Array::trunc_normal(3, 8, 1.0, &mut rng);
        let mut tape: Tape<f64> = Tape::new();
        let tokens = tokens_of(&mut tape, input.clone());
        let out = trunk.forward(&mut tape, &store, &tokens, None).unwrap();
        let pos = &store.get(trunk.pos).value;
        let got = tape.value(out.seq);
        for r in 0..3 {
            for c in 0..8 {
                assert_eq!(got.at(r, c), input.at(r, c) + pos.at(r, c));
            }
        }
    }

    #[test]
    fn micro_trunk_matches_explicit_oracle() {
        let mut rng = Rng::from_seed(4);
        let mut store: ParamStore<f64> = ParamStore::new();
        let trunk = Backbone::new(&mut store, &micro_cfg(), "trunk", &mut rng).unwrap();
        let input = Array::trunc_normal(4, 8, 1.0, &mut rng);

        let mut tape: Tape<f64> = Tape::new();
        let tokens = tokens_of(&mut tape, input.clone());
        let out = trunk.forward(&mut tape, &store, &tokens, None).unwrap();
        let emb = trunk.project(&mut tape, &store, out.pooled).unwrap();

        // Oracle: assemble rows, add positions, run both blocks explicitly,
        // norm, project row 0, normalize.
        let cls = store.get(trunk.cls.unwrap()).value.clone();
        let pos = store.get(trunk.pos).value.clone();
        let mut x = Array::zeros(5, 8);
        for c in 0..8 {
            *x.at_mut(0, c) = cls.at(0, c) + pos.at(0, c);
        }
        for r in 0..4 {
            for c in 0..8 {
                *x.at_mut(r + 1, c) = input.at(r, c) + pos.at(r + 1, c);
            }
        }
        for b in &trunk.blocks {
            x = transformer_block_explicit(&x, None, &snapshot_block(&store, b), LAYER_NORM_EPS);
        }
        let gain = store.get(trunk.final_ln.gain).value.clone();
        let bias = store.get(trunk.final_ln.bias).value.clone();
        x = layer_norm_explicit(&x, &gain, &bias, LAYER_NORM_EPS);
        let w = store.get(trunk.proj.w).value.clone();
        let b = store.get(trunk.proj.b).value.clone();
        let mut projected = alloc::vec![0.0f64; 6];
        for (j, p) in projected.iter_mut().enumerate() {
            let mut acc = b.at(0, j);
            for c in 0..8 {
                acc += x.at(0, c) * w.at(c, j);
            }
            *p = acc;
        }
        let norm = projected.iter().map(|v| v * v).sum::<f64>().sqrt();
        let got = tape.value(emb);
        assert_eq!(got.shape(), (1, 6));
        for (j, p) in projected.iter().enumerate() {
            assert!((got.at(0, j) - p / norm).abs() < 1e-10);
        }
    }

    #[test]
    fn resampling_to_native_length_is_bit_identity() {
        let mut rng = Rng::from_seed(5);
        let body: Array<f64> = Array::trunc_normal(7, 4, 1.0, &mut rng);
        let same = interpolate_pos_rows(&body, 7).unwrap();
        assert!(body
            .data()
            .iter()
            .zip(same.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn resampling_preserves_endpoints() {
        let body = Array::from_vec(3, 1, alloc::vec![1.0, 5.0, 9.0]).unwrap();
        let two = interpolate_pos_rows(&body, 2).unwrap();
        assert_eq!(two.data(), &[1.0, 9.0]);
    }

    #[test]
    fn resampling_matches_direct_oracle_and_hits_originals() {
        let mut rng = Rng::from_seed(6);
        let body: Array<f64> = Array::trunc_normal(6, 3, 1.0, &mut rng);
        for new_len in [2usize, 5, 11, 12, 17] {
            let got = interpolate_pos_rows(&body, new_len).unwrap();
            let want = interp_rows_direct(&body, new_len);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // Doubling minus one puts every original row at an even index.
        let spread = interpolate_pos_rows(&body, 11).unwrap();
        for r in 0..6 {
            for c in 0..3 {
                assert!((spread.at(2 * r, c) - body.at(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_resampling_matches_bilinear_oracle() {
        let mut rng = Rng::from_seed(7);
        let body: Array<f64> = Array::trunc_normal(12, 5, 1.0, &mut rng);
        for dst in [(2usize, 2usize), (3, 4), (5, 7), (4, 3)] {
            let got = interpolate_pos_grid(&body, (3, 4), dst).unwrap();
            let want = interp_grid_direct(&body, (3, 4), dst);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interpolated_positions_flow_through_forward() {
        let mut cfg = micro_cfg();
        cfg.pos_len = 9;
        let mut rng = Rng::from_seed(8);
        let mut store: ParamStore<f64> = ParamStore::new();
        let trunk = Backbone::new(&mut store, &cfg, "trunk", &mut rng).unwrap();
        let input = Array::trunc_normal(4, 8, 1.0, &mut rng);
        let mut tape: Tape<f64> = Tape::new();
        let tokens = tokens_of(&mut tape, input.clone());
        let out = trunk.forward(&mut tape, &store, &tokens, None).unwrap();
        assert_eq!(tape.shape(out.seq), (4, 8));

        // Same forward with the resampled table swapped in as the native one
        // must agree bit for bit.
        let table = store.get(trunk.pos).value.clone();
        let body = table.slice_rows(1, 8);
        let resampled = interpolate_pos_rows(&body, 4).unwrap();
        let mut swapped = Array::zeros(5, 8);
        for c in 0..8 {
            *swapped.at_mut(0, c) = table.at(0, c);
        }
        for r in 0..4 {
            for c in 0..8 {
                *swapped.at_mut(r + 1, c) = resampled.at(r, c);
            }
        }
        let mut cfg2 = micro_cfg();
        cfg2.pos_len = 5;
        let mut rng2 = Rng::from_seed(8);
        let mut store2: ParamStore<f64> = ParamStore::new();
        let trunk2 = Backbone::new(&mut store2, &cfg2, "trunk", &mut rng2).unwrap();
        // Align every shared weight, then overwrite the positional table.
        let flat = store.snapshot();
        let mut aligned: Vec<f64> = Vec::new();
        let mut off = 0;
        for (_, p) in store.iter() {
            let n = p.value.len();
            if core::ptr::eq(p, store.get(trunk.pos)) {
                off += n;
                continue;
            }
            aligned.extend_from_slice(&flat[off..off + n]);
            off += n;
        }
        let mut off2 = 0;
        let ids2: Vec<ParamId> = store2.ids().collect();
        for id in ids2 {
            if id == trunk2.pos {
                store2.get_mut(id).value = swapped.clone();
                continue;
            }
            let n = store2.get(id).value.len();
            store2
                .get_mut(id)
                .value
                .data_mut()
                .copy_from_slice(&aligned[off2..off2 + n]);
            off2 += n;
        }
        let mut t2: Tape<f64> = Tape::new();
        let tokens2 = tokens_of(&mut t2, input);
        let out2 = trunk2.forward(&mut t2, &store2, &tokens2, None).unwrap();
        assert_eq!(tape.value(out.seq).data(), t2.value(out2.seq).data());
    }

    #[test]
    fn projection_is_scale_invariant_after_normalization() {
        let mut rng = Rng::from_seed(9);
        let mut store: ParamStore<f64> = ParamStore::new();
        let trunk = Backbone::new(&mut store, &micro_cfg(), "trunk", &mut rng).unwrap();
        // The bias breaks exact scale invariance, so zero it first.
        let bias_id = trunk.proj.b;
        for x in store.get_mut(bias_id).value.data_mut() {
            *x = 0.0;
        }
        let v2 = Array::trunc_normal(1, 8, 1.0, &mut rng);
        let mut scaled2 = v2.clone();
        for x in scaled2.data_mut() {
            *x *= 5.0;
        }
        let mut t3: Tape<f64> = Tape::new();
        let n3 = t3.constant(v2);
        let e3 = trunk.project(&mut t3, &store, n3).unwrap();
        let mut t4: Tape<f64> = Tape::new();
        let n4 = t4.constant(scaled2);
        let e4 = trunk.project(&mut t4, &store, n4).unwrap();
        for (a, b) in t3.value(e3).data().iter().zip(t4.value(e4).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let norm: f64 = t3.value(e3).data().iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_survive_training_and_detect_tampering() {
        let mut rng = Rng::from_seed(10);
        let mut store: ParamStore<f64> = ParamStore::new();
        let trunk = Backbone::new(&mut store, &micro_cfg(), "trunk", &mut rng).unwrap();
        let snap = frozen_snapshot(&store);
        assert!(frozen_unchanged(&store, &snap));

        let mut opt: AdamW<f64> = AdamW::new(AdamWConfig::default());
        for step in 0..20 {
            let mut tape: Tape<f64> = Tape::new();
            let tokens = tokens_of(
                &mut tape,
                Array::trunc_normal(4, 8, 1.0, &mut Rng::from_seed(step)),
            );
            let out = trunk.forward(&mut tape, &store, &tokens, None).unwrap();
            let emb = trunk.project(&mut tape, &store, out.pooled).unwrap();
            let loss = tape.sum_all(emb);
            let grads = tape.backward(loss).unwrap();
            store.zero_grads();
            tape.accumulate_param_grads(&grads, &mut store);
            opt.step(&mut store, 1e-3);
        }
        assert!(frozen_unchanged(&store, &snap));

        let tampered = trunk.trunk_param_ids()[0];
        store.get_mut(tampered).value.data_mut()[0] += 1e-9;
        assert!(!frozen_unchanged(&store, &snap));
    }

    #[test]
    fn bad_ranges_and_grids_are_rejected() {
        let mut cfg = micro_cfg();
        cfg.l_first = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = micro_cfg();
        cfg.l_last = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = micro_cfg();
        cfg.l_first = 3;
        cfg.l_last = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = micro_cfg();
        cfg.pos_grid = Some((2, 3));
        assert!(cfg.validate().is_err());
    }
}
