//! Simulation-and-verification laboratory for the two-dimensional
//! scale-inhomogeneous discrete Gaussian free field.
//!
//! The crate is organized around the objects of study:
//!
//! * [`lattice`] — grids, boxes across scales, dyadic boxes, interior regions;
//! * [`greenfn`] — Green tables of the killed walk, harmonic measure, the
//!   potential kernel;
//! * [`sampler`] — reproducible random streams and dense Gaussian laws;
//! * [`fields`] — the homogeneous and scale-inhomogeneous field samplers,
//!   the three-field approximation, decompositions and cluster laws;
//! * [`extremal`] — centring sequences, local maxima and derived point
//!   processes;
//! * [`stats`] — estimators and distribution distances used by the checks;
//! * [`coupling`] — the coarse-field coupling sampler and its Laplace
//!   prediction;
//! * [`gausscmp`] — numerical comparison checks for Gaussian vectors;
//! * [`harness`] — experiment configs, the runner, and field serialization.

pub mod coupling;
pub mod extremal;
pub mod fields;
pub mod gausscmp;
pub mod greenfn;
pub mod harness;
pub mod lattice;
pub mod sampler;
pub mod stats;

#[cfg(test)]
pub(crate) mod testkit;

/// Unified error type. Variants map onto the harness exit codes: domain,
/// configuration and parse problems are usage errors (exit 2), resource-cap
/// violations exit 3, everything else is reported as a failure (exit 1).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A configuration (file or parameter set) is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// A resource cap would be exceeded (dense solves, grid sizes, ...).
    #[error("resource error: {0}")]
    Resource(String),
    /// Numerical linear algebra failed beyond the tolerated jitter.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A quadrature or extrapolation did not reach its tolerance.
    #[error("accuracy error: {what}: achieved {achieved:.3e}, required {required:.3e}")]
    Accuracy {
        what: String,
        achieved: f64,
        required: f64,
    },
    /// A rejection sampler exhausted its proposal budget.
    #[error("sampling error: {0}")]
    Sampling(String),
    /// An estimator received too little data.
    #[error("statistics error: {0}")]
    Stats(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// A serialized artifact (field file, config, CSV) is malformed.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
