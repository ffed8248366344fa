use thiserror::Error;

/// Errors raised while building or evaluating a GATv2 instance.
#[derive(Debug, Error)]
pub enum GatError {
    #[error("non-finite value at index {index} in {what}")]
    NonFinite { what: &'static str, index: usize },

    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("node {node} out of range for graph with {num_nodes} nodes")]
    NodeOutOfRange { node: usize, num_nodes: usize },

    #[error("edge ({target}, {from}) has an endpoint outside [0, {num_nodes})")]
    EdgeOutOfRange {
        target: usize,
        from: usize,
        num_nodes: usize,
    },

    #[error("duplicate edge ({target}, {from})")]
    DuplicateEdge { target: usize, from: usize },

    #[error("graph must contain at least one node")]
    EmptyGraph,

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("attention weights sum to {sum}, expected 1")]
    Unnormalized { sum: f64 },

    #[error("invalid negative slope {0}: must lie in (0, 1]")]
    InvalidSlope(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at perturbed point ({param}, entry {index:?})")]
    NonFiniteLoss {
        param: &'static str,
        index: Vec<usize>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GatError>;

pub(crate) fn check_finite(what: &'static str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(GatError::NonFinite { what, index }),
        None => Ok(()),
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(GatError::ShapeMismatch {
            what,
            expected,
            actual,
        })
    }
}
