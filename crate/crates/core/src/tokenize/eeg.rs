//! EEG embedder: group consecutive time steps across all channels and map
//! each group linearly to the model width. Default grouping is one step per
//! token, the conv-with-kernel-1 setting.

use crate::array::Array;
use crate::error::{config_err, Result};
use crate::nn::Linear;
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tokenize::TokenSequence;

/// C channels x T steps of real-valued signal.
#[derive(Debug, Clone)]
pub struct EEGSequence {
    pub values: Array<f64>,
}

impl EEGSequence {
    pub fn new(values: Array<f64>) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(config_err!("EEG sequence must be non-empty"));
        }
        if !values.all_finite() {
            return Err(crate::error::degenerate_err!("EEG has non-finite samples"));
        }
        Ok(EEGSequence { values })
    }

    pub fn channels(&self) -> usize {
        self.values.rows()
    }
    pub fn steps(&self) -> usize {
        self.values.cols()
    }
}

#[derive(Debug, Clone)]
pub struct EegTokenizer {
    pub proj: Linear,
    pub channels: usize,
    pub t_group: usize,
}

impl EegTokenizer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        channels: usize,
        t_group: usize,
        d: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if t_group == 0 || channels == 0 {
            return Err(config_err!("channels and t_group must be >= 1"));
        }
        Ok(EegTokenizer {
            proj: Linear::new(
                store,
                &alloc::format!("{prefix}.proj"),
                channels * t_group,
                d,
                rng,
            )?,
            channels,
            t_group,
        })
    }

    /// m = T / t_group tokens; token j covers steps [j*t_group, (j+1)*t_group)
    /// over all channels, flattened channel-major.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        eeg: &EEGSequence,
    ) -> Result<TokenSequence> {
        if eeg.channels() != self.channels {
            return Err(config_err!(
                "EEG has {} channels, tokenizer expects {}",
                eeg.channels(),
                self.channels
            ));
        }
        if eeg.steps() % self.t_group != 0 {
            return Err(config_err!(
                "{} steps not divisible by group size {}",
                eeg.steps(),
                self.t_group
            ));
        }
        let m = eeg.steps() / self.t_group;
        let width = self.channels * self.t_group;
        let mut flat = Array::zeros(m, width);
        for j in 0..m {
            for ch in 0..self.channels {
                for t in 0..self.t_group {
                    *flat.at_mut(j, ch * self.t_group + t) =
                        S::from_f64(eeg.values.at(ch, j * self.t_group + t));
                }
            }
        }
        let node = tape.constant(flat);
        let tokens = self.proj.forward(tape, store, node)?;
        Ok(TokenSequence::new(tape, tokens))
    }
}
