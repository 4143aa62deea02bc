use thiserror::Error;

/// Errors produced by the solver pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("degenerate tetrahedron {element} (signed volume {volume:e})")]
    DegenerateElement { element: usize, volume: f64 },

    #[error("{solver} did not converge after {iterations} iterations (relative residual {residual:e})")]
    NotConverged {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("{solver} broke down at iteration {iteration} (relative residual {residual:e})")]
    Breakdown {
        solver: &'static str,
        iteration: usize,
        residual: f64,
    },

    #[error("matrix is not positive definite: pivot {index} = {value:e}")]
    NotPositiveDefinite { index: usize, value: f64 },

    #[error("matrix is singular: zero pivot in column {0}")]
    Singular(usize),

    #[error("coarse point {0} has zero radius (no pseudo-point is closest to it)")]
    ZeroRadius(usize),

    #[error("{} fine elements are not covered by any coarse patch (first: {:?}); increase gamma", .0.len(), &.0[..(.0.len().min(8))])]
    Uncovered(Vec<usize>),

    #[error("patch {patch}: {source}")]
    Patch {
        patch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("multiscale basis is numerically dependent (Gram condition {0:e}); use fewer modes")]
    LinearDependence(f64),

    #[error("projected operator {name} is asymmetric ({asymmetry:e} > {tolerance:e})")]
    Asymmetric {
        name: &'static str,
        asymmetry: f64,
        tolerance: f64,
    },

    #[error("reference solution has zero {0} norm; relative error undefined")]
    ZeroReferenceNorm(&'static str),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn in_patch(self, patch: usize) -> Error {
        Error::Patch {
            patch,
            source: Box::new(self),
        }
    }
}
