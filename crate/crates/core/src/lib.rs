//! Forward simulation and inverse characterization of 220 GHz
//! urban-microcell channels measured with a direction-scan sounder.
//!
//! The forward chain turns a [`params::ParamBundle`] into per-link multipath
//! sets ([`synth`]) and simulated direction scans ([`sounder`]). The inverse
//! chain extracts multipath components from scans ([`estimation`]), groups
//! them ([`clustering`]), and fits channel statistics ([`characterization`]).

// `!(x > 0.0)` also rejects NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod characterization;
pub mod cli;
pub mod clustering;
pub mod error;
pub mod estimation;
pub mod params;
pub mod pipeline;
pub mod propagation;
pub mod sounder;
pub mod synth;

pub use error::{Error, Result};
