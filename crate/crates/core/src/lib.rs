//! Core library for multimodal representation alignment on a frozen
//! transformer trunk: deterministic numerics with reverse-mode autodiff,
//! modality tokenizers, lens adapters, teacher anchors, the contrastive
//! objective, and evaluation metrics.
//!
//! The crate is `no_std` (with `alloc`); everything that needs files or
//! clocks lives in the companion binary crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod alignment;
pub mod anchors;
pub mod array;
pub mod backbone;
pub mod dsp;
pub mod error;
pub mod gradcheck;
pub mod lens;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod serialize;
pub mod tape;
pub mod tokenize;
