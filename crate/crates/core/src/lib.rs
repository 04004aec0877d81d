//! Ground-truth side of the thermoelastic surrogate workbench.
//!
//! A board with clamped screw holes is rasterized onto a uniform grid
//! ([`geometry`]), temperature inputs are drawn from a Gaussian random field
//! ([`grf`]), and a finite-difference plane-stress solver ([`solver`]) turns
//! each temperature field into displacements and stresses. The same
//! stencils ([`stencils`]) drive the physics residuals ([`residual`]) used
//! as a training penalty, and [`datastore`] persists samples and manifests.

pub mod datastore;
pub mod geometry;
pub mod grf;
pub mod residual;
pub mod solver;
pub mod stencils;

pub use geometry::{build_grid, BoardGeometry, GridSpec, Hole, MaterialParams, NodeClass, NodeClassField};
pub use grf::{sample_temperature, GrfConfig};
pub use residual::{pde_loss, ResidualScales};
pub use solver::{generate_sample, FieldSample};
pub use stencils::{diff, DiffKind, ScalarField};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid material: {0}")]
    Material(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("covariance factorization failed even with jitter {jitter:e}")]
    Factorization { jitter: f64 },
    #[error("linear system is singular (pivot {pivot:e} at row {row})")]
    Singular { row: usize, pivot: f64 },
    #[error("solver did not converge: relative residual {residual:e} after {iterations} iterations")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("bad magic in {0}")]
    BadMagic(String),
    #[error("unsupported version {found} (expected {expected})")]
    BadVersion { found: u32, expected: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
