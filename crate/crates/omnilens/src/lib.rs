//! Harness library: run configuration, synthetic data, the assembled
//! model pipeline, training and evaluation drivers, the FLOP bench, file
//! IO, and the invariant suite behind the `verify` subcommand.

pub mod bench;
pub mod config;
pub mod evaluate;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod plot;
pub mod synth;
pub mod train;
pub mod verify;
