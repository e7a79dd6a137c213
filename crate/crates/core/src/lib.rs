//! Trajectory transformer for instruction-guided navigation on graph worlds.
//!
//! The crate is `no_std` (with `alloc`) and carries everything that is pure
//! computation: the synthetic world and expert oracle ([`env`]), the fixed
//! instruction/view encoders ([`embed`]), a small reverse-mode autodiff
//! library ([`tensor`]), the causal decoder with its candidate-scoring head
//! ([`decoder`]), offline/online training ([`train`]) and the navigation
//! metrics ([`metrics`]). File formats, configuration files and the command
//! line live in the companion `waypoint` crate.
//!
//! All floating point math goes through [`math`], which wraps `libm`, so
//! results are bit-identical across platforms for a fixed seed.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod decoder;
pub mod embed;
pub mod env;
pub mod error;
pub mod math;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
