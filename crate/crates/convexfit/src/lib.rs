//! Scene abstraction by convex primitives.
//!
//! Fits a small set of smooth convex primitives (parallelepipeds blended by
//! logsumexp) to a depth map, optionally guided by a segmentation map. The
//! fit starts from a configurable start point (random, clustered, or an
//! imported prediction), is polished by gradient descent on a set of sample
//! classification losses, and pruned by backward selection. The result can
//! be rendered back to depth / normal / part-id rasters and scored with
//! standard depth, normal, and segmentation error metrics.
//!
//! Pipeline stages:
//!
//! 1. **sampling** — depth map + camera → labeled 3D sample sets.
//! 2. **losses** — classification, parametrization, Manhattan-world and
//!    segmentation-entropy losses over a sample set.
//! 3. **refine** — analytic-gradient descent polish, pruning, splitting.
//! 4. **render** — per-pixel raymarch of the fitted decomposition.
//! 5. **metrics** — AbsRel/RMSE, normal angle suite, segmentation accuracy,
//!    Chamfer-L1.

pub mod cli;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod refine;
pub mod render;
pub mod sampling;
pub mod synth;

/// Crate-wide error type. `Input`/`Parse` map to CLI exit code 1,
/// `Numeric` to exit code 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 2,
            _ => 1,
        }
    }
}
