//! Experiment harness for the coarse-to-fine registration pipeline:
//! reproducible evaluation protocols over the four pair scenarios, model
//! bundle storage, report rendering, and a fast self-check suite. The `c2f`
//! binary is a thin layer over this library.

pub mod config;
pub mod experiment;
pub mod model;
pub mod report;
pub mod selftest;

use c2f_core::equinet::EquinetError;
use c2f_core::geometry::GeometryError;
use c2f_core::global_register::GlobalRegError;
use c2f_core::local_register::LocalRegError;
use c2f_core::shapes::ShapesError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}; pass --checkpoint or enable --fallback-scorer")]
    MissingCheckpoint(String),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("shape sampling: {0}")]
    Shapes(#[from] ShapesError),
    #[error("feature extraction: {0}")]
    Feature(#[from] EquinetError),
    #[error("coarse registration: {0}")]
    Coarse(#[from] GlobalRegError),
    #[error("fine registration: {0}")]
    Fine(#[from] LocalRegError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
}
