//! Automated search over contrastive-learning strategies for time series.
//!
//! A REINFORCE controller samples strategies from an 18-way discrete space
//! ([`space`]). Each sample is probed with one epoch of contrastive training
//! on a copy of the encoder and scored on a downstream validation task
//! ([`search`]). Accepted strategies become candidates that are then fully
//! pretrained and ranked.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod contrast;
pub mod controller;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod harness;
pub mod numerics;
pub mod optim;
pub mod rng;
pub mod search;
pub mod space;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
pub use space::Strategy;
