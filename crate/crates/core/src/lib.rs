//! Core library for coarse-to-fine rigid point cloud registration.
//!
//! The pipeline registers a source point cloud onto a target in two stages:
//! a correspondence-free coarse alignment computed in closed form from
//! rotation-equivariant global features, followed by an iterative local
//! refinement that matches rotation-invariant per-point descriptors.
//!
//! Module layout:
//! - [`mathcore`]: fixed-size and dense linear algebra, a 3x3 SVD, weighted
//!   Procrustes alignment, and a reverse-mode gradient tape.
//! - [`geometry`]: point clouds, rigid transforms, perturbation sampling,
//!   and registration error metrics.
//! - [`shapes`]: procedural solid models with exact signed distance and
//!   occupancy queries, used to generate training and evaluation data.
//! - [`equinet`]: the equivariant feature extractor (vector-neuron layers,
//!   global and local feature heads, checkpointing).
//! - [`global_register`]: closed-form global alignment from pooled features,
//!   the occupancy decoder, and first-stage training.
//! - [`local_register`]: salient point selection, similarity matching, and
//!   the iterative weighted refinement loop with second-stage training.

pub mod equinet;
pub mod geometry;
pub mod global_register;
pub mod local_register;
pub mod mathcore;
pub mod shapes;
