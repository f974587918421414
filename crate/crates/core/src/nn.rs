//! Transformer building blocks shared by the lens and the trunk: linear
//! layers, layer norm, multi-head attention, and pre-norm residual blocks.
//!
//! Builders register parameters under a caller-supplied name prefix, so one
//! store can hold the tokenizer, lens, trunk, and head side by side and the
//! checkpoint stays self-describing.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{config_err, Result};
use crate::param::{init_weight, Decay, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = store.register(&format!("{prefix}.w"), init_weight(rng, d_in, d_out), Decay::Apply)?;
        let b = store.register(
            &format!("{prefix}.b"),
            Array::zeros(1, d_out),
            Decay::Exclude,
        )?;
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: NodeId,
    ) -> Result<NodeId> {
        if tape.shape(x).1 != self.d_in {
            return Err(config_err!(
                "linear expects width {}, got {}",
                self.d_in,
                tape.shape(x).1
            ));
        }
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let h = tape.matmul(x, w)?;
        tape.add_bias(h, b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        alloc::vec![self.w, self.b]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub gain: ParamId,
    pub bias: ParamId,
    pub d: usize,
}

impl LayerNormLayer {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, d: usize) -> Result<Self> {
        let gain = store.register(
            &format!("{prefix}.gain"),
            Array::filled(1, d, S::ONE),
            Decay::Exclude,
        )?;
        let bias = store.register(
            &format!("{prefix}.bias"),
            Array::zeros(1, d),
            Decay::Exclude,
        )?;
        Ok(LayerNormLayer { gain, bias, d })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: NodeId,
    ) -> Result<NodeId> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, S::from_f64(LAYER_NORM_EPS))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        alloc::vec![self.gain, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(config_err!("heads {heads} must divide width {d}"));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(store, &format!("{prefix}.q"), d, d, rng)?,
            wk: Linear::new(store, &format!("{prefix}.k"), d, d, rng)?,
            wv: Linear::new(store, &format!("{prefix}.v"), d, d, rng)?,
            wo: Linear::new(store, &format!("{prefix}.o"), d, d, rng)?,
            heads,
            d,
        })
    }

    /// Attention with queries from `q_input` and keys/values from
    /// `kv_input`; pass the same node twice for self-attention. Output has
    /// `q_input`'s length.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        q_input: NodeId,
        kv_input: NodeId,
    ) -> Result<NodeId> {
        let q = self.wq.forward(tape, store, q_input)?;
        let k = self.wk.forward(tape, store, kv_input)?;
        let v = self.wv.forward(tape, store, kv_input)?;
        let dh = self.d / self.heads;
        let scale = S::from_f64(1.0 / libm::sqrt(dh as f64));
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores);
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&head_outs)?;
        self.wo.forward(tape, store, merged)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.wq.param_ids();
        ids.extend(self.wk.param_ids());
        ids.extend(self.wv.param_ids());
        ids.extend(self.wo.param_ids());
        ids
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        d: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), d, hidden, rng)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, d, rng)?,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: NodeId,
    ) -> Result<NodeId> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.fc1.param_ids();
        ids.extend(self.fc2.param_ids());
        ids
    }
}

/// Pre-norm residual transformer block. With `ln_kv` present the attention
/// is cross-attention: queries from the block input, keys/values from a
/// separately normed context.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNormLayer,
    pub ln_kv: Option<LayerNormLayer>,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNormLayer,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        d: usize,
        heads: usize,
        hidden: usize,
        cross: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let ln1 = LayerNormLayer::new(store, &format!("{prefix}.ln1"), d)?;
        let ln_kv = if cross {
            Some(LayerNormLayer::new(store, &format!("{prefix}.lnkv"), d)?)
        } else {
            None
        };
        let attn = MultiHeadAttention::new(store, &format!("{prefix}.attn"), d, heads, rng)?;
        let ln2 = LayerNormLayer::new(store, &format!("{prefix}.ln2"), d)?;
        let mlp = Mlp::new(store, &format!("{prefix}.mlp"), d, hidden, rng)?;
        Ok(TransformerBlock {
            ln1,
            ln_kv,
            attn,
            ln2,
            mlp,
        })
    }

    /// Self-attention path: x + attn(ln(x)), then + mlp(ln(·)).
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: NodeId,
    ) -> Result<NodeId> {
        let normed = self.ln1.forward(tape, store, x)?;
        let attended = self.attn.forward(tape, store, normed, normed)?;
        let x = tape.add(x, attended)?;
        let normed = self.ln2.forward(tape, store, x)?;
        let expanded = self.mlp.forward(tape, store, normed)?;
        tape.add(x, expanded)
    }

    /// Cross-attention path; requires `ln_kv`.
    pub fn forward_cross<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: NodeId,
        context: NodeId,
    ) -> Result<NodeId> {
        let ln_kv = self
            .ln_kv
            .as_ref()
            .ok_or_else(|| config_err!("block was not built for cross-attention"))?;
        let q = self.ln1.forward(tape, store, x)?;
        let kv = ln_kv.forward(tape, store, context)?;
        let attended = self.attn.forward(tape, store, q, kv)?;
        let x = tape.add(x, attended)?;
        let normed = self.ln2.forward(tape, store, x)?;
        let expanded = self.mlp.forward(tape, store, normed)?;
        tape.add(x, expanded)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.ln1.param_ids();
        if let Some(kv) = &self.ln_kv {
            ids.extend(kv.param_ids());
        }
        ids.extend(self.attn.param_ids());
        ids.extend(self.ln2.param_ids());
        ids.extend(self.mlp.param_ids());
        ids
    }

    /// Copy another block's values into this block (shapes must agree).
    /// Used to seed lens blocks from trunk blocks.
    pub fn copy_values_from<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        src: &TransformerBlock,
    ) -> Result<()> {
        let dst_ids = self.param_ids_self_attn();
        let src_ids = src.param_ids_self_attn();
        for (d, s) in dst_ids.into_iter().zip(src_ids) {
            let value = store.get(s).value.clone();
            let dst = store.get_mut(d);
            if dst.value.shape() != value.shape() {
                return Err(config_err!(
                    "cannot copy block weights: {:?} vs {:?}",
                    dst.value.shape(),
                    value.shape()
                ));
            }
            dst.value = value;
        }
        Ok(())
    }

    /// Parameter ids excluding the cross-attention kv norm, i.e. the part
    /// with a one-to-one match between self-attention blocks.
    fn param_ids_self_attn(&self) -> Vec<ParamId> {
        let mut ids = self.ln1.param_ids();
        ids.extend(self.attn.param_ids());
        ids.extend(self.ln2.param_ids());
        ids.extend(self.mlp.param_ids());
        ids
    }
}

/// Name prefix helper so callers build "lens.block3" and friends without
/// repeating format strings.
pub fn block_prefix(scope: &str, index: usize) -> String {
    format!("{scope}.block{index}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{attention_explicit, snapshot_attention};

    #[test]
    fn attention_matches_explicit_loop_oracle() {
        let mut rng = Rng::from_seed(11);
        let mut store: ParamStore<f64> = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "t", 8, 2, &mut rng).unwrap();
        // Give biases nonzero values so the oracle exercises them.
        for id in attn.param_ids() {
            if store.get(id).value.rows() == 1 {
                let mut r2 = Rng::from_seed(mix_index(id.index()));
                store.get_mut(id).value = Array::trunc_normal(1, 8, 0.3, &mut r2);
            }
        }
        let q_in = Array::trunc_normal(3, 8, 1.0, &mut rng);
        let kv_in = Array::trunc_normal(5, 8, 1.0, &mut rng);

        let mut tape: Tape<f64> = Tape::new();
        let qn = tape.constant(q_in.clone());
        let kvn = tape.constant(kv_in.clone());
        let out = attn.forward(&mut tape, &store, qn, kvn).unwrap();

        let want = attention_explicit(&q_in, &kv_in, &snapshot_attention(&store, &attn));
        for (a, b) in tape.value(out).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    fn mix_index(i: usize) -> u64 {
        (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1)
    }

    #[test]
    fn self_attention_over_one_token_keeps_shape() {
        let mut rng = Rng::from_seed(3);
        let mut store: ParamStore<f64> = ParamStore::new();
        let block = TransformerBlock::new(&mut store, "b", 8, 2, 32, false, &mut rng).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Array::trunc_normal(1, 8, 1.0, &mut rng));
        let y = block.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), (1, 8));
        assert!(tape.value(y).all_finite());
    }

    #[test]
    fn duplicated_identical_keys_leave_cross_attention_unchanged() {
        let mut rng = Rng::from_seed(5);
        let mut store: ParamStore<f64> = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "x", 8, 2, &mut rng).unwrap();
        let q_in = Array::trunc_normal(2, 8, 1.0, &mut rng);
        let kv = Array::trunc_normal(4, 8, 1.0, &mut rng);
        let mut kv2_data = kv.data().to_vec();
        kv2_data.extend_from_slice(kv.data());
        let kv2 = Array::from_vec(8, 8, kv2_data).unwrap();

        let mut t1: Tape<f64> = Tape::new();
        let q1 = t1.constant(q_in.clone());
        let k1 = t1.constant(kv);
        let o1 = attn.forward(&mut t1, &store, q1, k1).unwrap();

        let mut t2: Tape<f64> = Tape::new();
        let q2 = t2.constant(q_in);
        let k2 = t2.constant(kv2);
        let o2 = attn.forward(&mut t2, &store, q2, k2).unwrap();

        for (a, b) in t1.value(o1).data().iter().zip(t2.value(o2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_block_requires_kv_norm() {
        let mut rng = Rng::from_seed(9);
        let mut store: ParamStore<f64> = ParamStore::new();
        let block = TransformerBlock::new(&mut store, "b", 8, 2, 16, false, &mut rng).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Array::zeros(2, 8));
        let c = tape.constant(Array::zeros(3, 8));
        assert!(block.forward_cross(&mut tape, &store, x, c).is_err());
    }

    #[test]
    fn block_copy_matches_source_forward() {
        let mut rng = Rng::from_seed(21);
        let mut store: ParamStore<f64> = ParamStore::new();
        let src = TransformerBlock::new(&mut store, "src", 8, 2, 32, false, &mut rng).unwrap();
        let dst = TransformerBlock::new(&mut store, "dst", 8, 2, 32, false, &mut rng).unwrap();
        dst.copy_values_from(&mut store, &src).unwrap();
        let x = Array::trunc_normal(3, 8, 1.0, &mut rng);

        let mut t1: Tape<f64> = Tape::new();
        let x1 = t1.constant(x.clone());
        let y1 = src.forward(&mut t1, &store, x1).unwrap();
        let mut t2: Tape<f64> = Tape::new();
        let x2 = t2.constant(x);
        let y2 = dst.forward(&mut t2, &store, x2).unwrap();
        assert_eq!(t1.value(y1).data(), t2.value(y2).data());
    }
}
