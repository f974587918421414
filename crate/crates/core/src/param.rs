//! Named, trainable tensors and the store that owns them.
//!
//! Registration order is the canonical parameter order: optimizers and
//! checkpoints iterate in that order, which keeps runs reproducible and
//! checkpoint files stable.

use alloc::string::String;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Weight-decay treatment, decided at registration time. Norm gains, every
/// bias, and the temperature are excluded from decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decay {
    Apply,
    Exclude,
}

pub struct Parameter<S: Scalar> {
    pub name: String,
    pub value: Array<S>,
    pub grad: Array<S>,
    pub frozen: bool,
    pub decay: Decay,
}

pub struct ParamStore<S: Scalar> {
    params: Vec<Parameter<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Register a trainable tensor. Names must be unique; they key the
    /// checkpoint format.
    pub fn register(&mut self, name: &str, value: Array<S>, decay: Decay) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Usage(alloc::format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let grad = Array::zeros(value.rows(), value.cols());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            frozen: false,
            decay,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn register_frozen(&mut self, name: &str, value: Array<S>) -> Result<ParamId> {
        let id = self.register(name, value, Decay::Exclude)?;
        self.params[id.0].frozen = true;
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }
    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
        }
    }

    /// Element count over trainable (non-frozen) parameters only.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = S::ZERO;
            }
        }
    }

    /// Flat copy of all values in registration order, used by the
    /// finite-difference checker and by hashing.
    pub fn snapshot(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.total_count());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    pub fn restore(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.total_count() {
            return Err(Error::Usage("restore length mismatch".into()));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Cast every tensor to another scalar type, preserving names, order,
    /// frozen flags, and decay treatment.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: Array::zeros(p.grad.rows(), p.grad.cols()),
                    frozen: p.frozen,
                    decay: p.decay,
                })
                .collect(),
        }
    }
}

/// Truncated-normal weight init (std 0.02, resampled beyond 2 std), the
/// convention for transformer projections here.
pub fn init_weight<S: Scalar>(rng: &mut Rng, rows: usize, cols: usize) -> Array<S> {
    Array::trunc_normal(rows, cols, 0.02, rng)
}

pub fn init_zeros<S: Scalar>(rows: usize, cols: usize) -> Array<S> {
    Array::zeros(rows, cols)
}

pub fn init_ones<S: Scalar>(rows: usize, cols: usize) -> Array<S> {
    Array::filled(rows, cols, S::ONE)
}
