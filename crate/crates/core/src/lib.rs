//! Simulator for adaptive clustered federated learning.
//!
//! Clients train personalized MLPs regularized toward their cluster center
//! and toward a shared global embedding. The server re-clusters clients
//! every round by cosine similarity in a PCA-reduced model space and
//! periodically merges or splits clusters based on their granularity.

pub mod clustering;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod io;
pub mod nn;
pub mod rng;
pub mod similarity;
pub mod stats;

pub use error::{FedError, Result};
