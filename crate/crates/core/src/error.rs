//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the optimization stack.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter is out of its admissible range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// An inner solve hit its iteration cap before meeting its tolerance.
    /// Carries the best iterate found so far (as `f64`) and its residual.
    #[error("{context}: residual {residual:.3e} after {iterations} iterations (tol not met)")]
    Nonconverged {
        context: String,
        residual: f64,
        iterations: usize,
        best: Vec<f64>,
    },

    /// A quadratic subproblem matrix was not positive definite.
    #[error("subproblem matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// A node-local subproblem failed during a network step.
    #[error("node {node}: {source}")]
    NodeSolve {
        node: usize,
        #[source]
        source: Box<Error>,
    },

    /// Metrics were requested on an instance without a ground-truth solution.
    #[error("instance {0} has no ground-truth solution; run the oracle first")]
    MissingGroundTruth(String),

    /// Dataset or artifact files could not be read or parsed.
    #[error("{0}")]
    Data(String),

    /// Checkpoint or instance files that do not match the running setup.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attaches the node id to an error raised inside a per-node solve.
    pub fn at_node(self, node: usize) -> Error {
        Error::NodeSolve {
            node,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
