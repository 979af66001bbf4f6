//! Deterministic multi-fidelity data from three canonical PDEs.
//!
//! Each equation is solved on a coarse and a fine mesh, recorded on a regular
//! grid and stacked into a [`mfgar::gar::MultiFidelityDataset`].

pub mod burgers;
pub mod data;
pub mod grid;
pub mod heat;
pub mod io;
pub mod linalg;
pub mod poisson;
pub mod setup;
pub mod sobol;
pub mod validate;

pub use data::{generate, make_dataset, make_test_set, DatasetConfig, GeneratedDataset, Sampler, Structure};
pub use grid::{interpolation_matrix, upsample_bilinear, Axis, FieldSample, Grid};
pub use setup::{solve, solve_burgers, solve_heat, solve_poisson, Fidelity, MeshVariant, PdeKind, PdeSpec};
pub use sobol::{sobol_points, SobolConfig};

#[derive(Debug, thiserror::Error)]
pub enum PdeError {
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("point outside the grid domain: {0}")]
    OutOfDomain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("input out of range: {0}")]
    OutOfRange(String),
    #[error("invalid problem setup: {0}")]
    InvalidSpec(String),
    #[error("invalid combination: {0}")]
    InvalidCombination(String),
    #[error("nonlinear solve did not converge: {0}")]
    Nonconvergent(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] mfgar::Error),
}

pub type Result<T> = std::result::Result<T, PdeError>;
