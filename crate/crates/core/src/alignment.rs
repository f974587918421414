//! Multi-anchor symmetric contrastive alignment.
//!
//! For each anchor modality the loss is symmetric InfoNCE over in-batch
//! negatives: logits are dot products of unit-norm embeddings divided by a
//! learnable temperature, and both the student-to-anchor and
//! anchor-to-student directions contribute. Anchors are averaged with equal
//! weight, giving the overall 1/(2*B*|A|) coefficient.

use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{config_err, input_err, Result};
use crate::param::{Decay, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

/// Learnable temperature, stored as log tau and clamped after exp so the
/// effective value stays in a safe range. One temperature is shared across
/// all anchors.
pub struct Temperature {
    pub log_tau: ParamId,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Temperature {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, scope: &str) -> Result<Temperature> {
        Self::with_range(store, scope, TAU_INIT, TAU_MIN, TAU_MAX)
    }

    pub fn with_range<S: Scalar>(
        store: &mut ParamStore<S>,
        scope: &str,
        init: f64,
        tau_min: f64,
        tau_max: f64,
    ) -> Result<Temperature> {
        if !(tau_min > 0.0 && tau_min <= tau_max) {
            return Err(config_err!("temperature clamp range is empty or negative"));
        }
        if !(init >= tau_min && init <= tau_max) {
            return Err(config_err!("initial temperature outside clamp range"));
        }
        let log_tau = store.register(
            &alloc::format!("{scope}.log_tau"),
            Array::scalar(S::from_f64(libm::log(init))),
            Decay::Exclude,
        )?;
        Ok(Temperature {
            log_tau,
            tau_min,
            tau_max,
        })
    }

    /// exp(log_tau) clamped; gradient flows wherever the clamp is inactive.
    pub fn effective<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>) -> NodeId {
        let raw = tape.param(store, self.log_tau);
        let tau = tape.exp(raw);
        tape.clamp(tau, S::from_f64(self.tau_min), S::from_f64(self.tau_max))
    }

    /// Current effective value as a plain number.
    pub fn value<S: Scalar>(&self, store: &ParamStore<S>) -> f64 {
        let raw = store.get(self.log_tau).value.at(0, 0).to_f64();
        libm::exp(raw).clamp(self.tau_min, self.tau_max)
    }
}

/// Nodes entering the loss: one student block and one block per anchor, all
/// B x d_out with unit-norm rows and shared row order.
pub struct AlignmentBatch {
    pub student: NodeId,
    pub anchors: Vec<NodeId>,
}

/// Both directional cross-entropy sums for one anchor, before averaging:
/// (student-to-anchor, anchor-to-student), each a 1x1 node.
pub(crate) fn directional_terms<S: Scalar>(
    tape: &mut Tape<S>,
    student: NodeId,
    anchor: NodeId,
    inv_tau: NodeId,
) -> Result<(NodeId, NodeId)> {
    let (b, _) = tape.shape(student);
    let diag: Vec<usize> = (0..b).collect();
    let anchor_t = tape.transpose(anchor);
    let scores = tape.matmul(student, anchor_t)?;
    let logits = tape.mul_scalar(scores, inv_tau)?;

    let row_lse = tape.lse_rows(logits);
    let row_diag = tape.take_per_row(logits, &diag)?;
    let row_gap = tape.sub(row_lse, row_diag)?;
    let row_term = tape.sum_all(row_gap);

    let logits_t = tape.transpose(logits);
    let col_lse = tape.lse_rows(logits_t);
    let col_diag = tape.take_per_row(logits_t, &diag)?;
    let col_gap = tape.sub(col_lse, col_diag)?;
    let col_term = tape.sum_all(col_gap);

    Ok((row_term, col_term))
}

/// Symmetric InfoNCE for one anchor, averaged over both directions and the
/// batch: (row_term + col_term) / (2B).
pub fn symmetric_infonce<S: Scalar>(
    tape: &mut Tape<S>,
    student: NodeId,
    anchor: NodeId,
    inv_tau: NodeId,
) -> Result<NodeId> {
    let (b, d) = tape.shape(student);
    if b == 0 {
        return Err(input_err!("empty batch"));
    }
    if tape.shape(anchor) != (b, d) {
        return Err(config_err!(
            "anchor block {:?} does not match student block {:?}",
            tape.shape(anchor),
            (b, d)
        ));
    }
    let (row_term, col_term) = directional_terms(tape, student, anchor, inv_tau)?;
    let both = tape.add(row_term, col_term)?;
    Ok(tape.scale(both, S::from_f64(1.0 / (2.0 * b as f64))))
}

/// Equal-weight mean over per-anchor losses.
pub fn multi_anchor_mean<S: Scalar>(tape: &mut Tape<S>, losses: &[NodeId]) -> Result<NodeId> {
    if losses.is_empty() {
        return Err(input_err!("no anchors"));
    }
    if losses.len() == 1 {
        return Ok(losses[0]);
    }
    let stacked = tape.concat_rows(losses)?;
    Ok(tape.mean_rows(stacked))
}

/// The full alignment objective over all anchors.
pub fn contrastive_loss<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    batch: &AlignmentBatch,
    temp: &Temperature,
) -> Result<NodeId> {
    if batch.anchors.is_empty() {
        return Err(input_err!("no anchors"));
    }
    let tau = temp.effective(tape, store);
    let inv_tau = tape.recip(tau);
    let mut per_anchor = Vec::with_capacity(batch.anchors.len());
    for &anchor in &batch.anchors {
        per_anchor.push(symmetric_infonce(tape, batch.student, anchor, inv_tau)?);
    }
    multi_anchor_mean(tape, &per_anchor)
}

/// Upstream contract check: every row unit-norm within tol.
pub fn check_unit_rows<S: Scalar>(rows: &Array<S>, tol: f64) -> Result<()> {
    for r in 0..rows.rows() {
        let norm: f64 = rows
            .row_slice(r)
            .iter()
            .map(|v| {
                let x = v.to_f64();
                x * x
            })
            .sum();
        let norm = libm::sqrt(norm);
        if (norm - 1.0).abs() > tol {
            return Err(input_err!("row {r} has norm {norm}, expected 1"));
        }
    }
    Ok(())
}
