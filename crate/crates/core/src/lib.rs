//! Parameter-set selection for parameter-isolation domain-incremental learning.
//!
//! Each domain's backbone features are compressed into a small summary
//! ([`gmc`]), resampled into pseudo-features when a new domain arrives
//! ([`dfr`]), and used to train a fusion network that predicts the domain
//! label of a test sample ([`mdfn`]). Training-free baselines live in
//! [`selectors`]; [`harness`] runs the incremental protocol and computes
//! selection metrics; [`io`] holds the on-disk formats and [`cli`] the
//! command-line front end.

pub mod cli;
pub mod cluster;
pub mod config;
pub mod dfr;
pub mod error;
pub mod gmc;
pub mod harness;
pub mod io;
pub mod math;
pub mod mdfn;
pub mod rng;
pub mod selectors;
pub mod types;

pub use error::{Error, Result};
pub use rng::{RngStream, StreamRng};
pub use types::{DomainId, FeatureMatrix, LabeledBatch, LevelId, ProbVector};
