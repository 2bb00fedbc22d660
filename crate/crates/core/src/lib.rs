//! Time-frequency analysis of frequency-hopping signals with missing samples.
//!
//! The crate covers signal synthesis, joint lag/Doppler/time/frequency
//! representations, adaptive kernel design, kernel parameter search, a
//! structure-aware Bayesian sparse reconstruction and hop-detection metrics.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bcs;
pub mod error;
pub mod grid;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod prefopt;
pub mod seed;
pub mod signal;
pub mod tf;

pub use error::{Error, Result};
pub use grid::{CGrid, Grid, RGrid};
