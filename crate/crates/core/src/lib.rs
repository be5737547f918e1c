//! Federated-learning simulation with Gaussian-process client selection.
//!
//! The crate is organised bottom-up:
//!
//! - [`datagen`]: synthetic and IDX datasets, shard and Dirichlet partitions.
//! - [`model`]: small dense classifiers with exact gradients.
//! - [`gp`]: the embedding kernel, likelihood training and Gaussian conditioning.
//! - [`selection`]: the posterior-greedy selector and the baseline strategies.
//! - [`engine`]: FedAvg rounds, probe collection and the two-phase schedule.
//! - [`diagnostics`]: normality, covariance stationarity and embedding exports.
//! - [`plan`]: experiment plans, output files and summaries.

pub mod datagen;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod gp;
pub mod model;
pub mod plan;
pub mod rng;
pub mod selection;

pub use error::{Error, Result};
