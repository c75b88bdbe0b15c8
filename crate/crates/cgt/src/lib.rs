//! Learns the distribution of a graph's computation graphs (sampled egonets)
//! and synthesizes privacy-controlled substitute datasets on which GNNs
//! reproduce the original graph's performance rankings.
//!
//! The pipeline has four stages:
//!
//! 1. [`encode`] — sample per-node computation graphs and duplicate-encode
//!    them into fixed-shape s-ary trees with null (zero-vector) padding,
//!    so every tree shares one constant adjacency matrix;
//! 2. [`quantize`] — cluster feature vectors (optionally with a minimum
//!    cluster size for k-anonymity, or with differential privacy) and map
//!    trees to cluster-id token sequences;
//! 3. [`model`] / [`train`] — fit a two-stream autoregressive transformer
//!    over the token sequences and generate new ones;
//! 4. [`gnn`] / [`metrics`] — benchmark reference GNNs on original vs
//!    generated trees and compare accuracy vectors and proxy statistics.
//!
//! [`pipeline`] orchestrates the stages behind the `cgt` CLI with
//! deterministic seeding and content-hashed run manifests.

pub mod encode;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod ppr;
pub mod privacy;
pub mod quantize;
pub mod rng;
pub mod tape;
pub mod train;
pub mod tree;

pub use error::{Error, Result};
