//! Modality embedders: raw signals in, token sequences out.
//!
//! Data preparation (sampling, DSP, normalization) runs off-tape in f64;
//! the learned projections run on the tape so they train with the rest of
//! the model. Every adapter ends in the same place: an m x d [`TokenSequence`]
//! for the lens.

pub mod audio;
pub mod augment;
pub mod eeg;
pub mod grid;
pub mod point;

use crate::error::{config_err, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

/// Token embeddings living on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence {
    pub node: NodeId,
    pub m: usize,
    pub d: usize,
}

impl TokenSequence {
    pub fn new<S: Scalar>(tape: &Tape<S>, node: NodeId) -> Self {
        let (m, d) = tape.shape(node);
        TokenSequence { node, m, d }
    }
}

/// Add a learnable per-index positional table to the tokens. The table must
/// already have exactly m rows; resampling a mismatched table is the trunk's
/// interpolation job, not this op's.
pub fn add_positional<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    seq: TokenSequence,
    table: ParamId,
) -> Result<TokenSequence> {
    let t = tape.param(store, table);
    let (rows, cols) = tape.shape(t);
    if rows != seq.m || cols != seq.d {
        return Err(config_err!(
            "positional table is {rows}x{cols}, tokens are {}x{}",
            seq.m,
            seq.d
        ));
    }
    let node = tape.add(seq.node, t)?;
    Ok(TokenSequence { node, ..seq })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::Array;
    use crate::param::Decay;

    #[test]
    fn positional_add_is_elementwise_and_strict_about_length() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let table = store
            .register(
                "pos",
                Array::from_vec(2, 2, alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
                Decay::Apply,
            )
            .unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Array::from_vec(2, 2, alloc::vec![10.0, 20.0, 30.0, 40.0]).unwrap());
        let seq = TokenSequence::new(&tape, x);
        let out = add_positional(&mut tape, &store, seq, table).unwrap();
        assert_eq!(tape.value(out.node).data(), &[11.0, 22.0, 33.0, 44.0]);

        let mut tape2: Tape<f64> = Tape::new();
        let y = tape2.constant(Array::zeros(3, 2));
        let seq2 = TokenSequence::new(&tape2, y);
        assert!(add_positional(&mut tape2, &store, seq2, table).is_err());
    }

    #[test]
    fn zero_table_is_identity() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let table = store
            .register("pos", Array::zeros(1, 3), Decay::Apply)
            .unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Array::from_vec(1, 3, alloc::vec![5.0, -1.0, 2.0]).unwrap());
        let seq = TokenSequence::new(&tape, x);
        let out = add_positional(&mut tape, &store, seq, table).unwrap();
        assert_eq!(tape.value(out.node).data(), &[5.0, -1.0, 2.0]);
    }
}
