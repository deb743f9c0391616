//! Perturbation analysis of time-series attributions.
//!
//! The crate trains small 1D-CNN classifiers ([`model`]), explains their
//! predictions with six attribution techniques ([`attribution`]), perturbs
//! the most relevant time points with sixteen strategies
//! ([`perturbation`]), sweeps the perturbation threshold to find when each
//! prediction flips ([`analysis`]) and summarizes a run as a perturbation
//! analysis card ([`card`]).

pub mod analysis;
pub mod attribution;
pub mod card;
pub mod dataset;
pub mod error;
pub mod model;
pub mod perturbation;

pub use error::{Error, Result};
