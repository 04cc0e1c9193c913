//! Crate-level error type for the branch, model, and training layers.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::attention::AttnError;
use crate::cluster::ClusterError;
use crate::tensor::TensorError;

#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    Tensor(TensorError),
    Cluster(ClusterError),
    Attn(AttnError),
    /// Cluster map entry outside the configured number of clusters.
    InvalidClusterIndex { index: usize, clusters: usize },
    /// Per-cluster outputs do not line up with the partition they came from.
    PartitionMisaligned { cluster: usize, expected: usize, got: usize },
    /// Invalid configuration value, with an explanation.
    Config(String),
    /// Dataset violates a precondition (e.g. class too small to split).
    Dataset(String),
    /// Training aborted on a non-finite loss; carries the per-term values.
    NonFiniteLoss { ce: f64, cluster_term: f64 },
    /// Training aborted on a non-finite gradient for the named parameter.
    NonFiniteGradient { param_index: usize },
    /// Shapes fed to fusion or evaluation do not match.
    ShapeMismatch { what: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Tensor(e) => write!(f, "{e}"),
            Error::Cluster(e) => write!(f, "{e}"),
            Error::Attn(e) => write!(f, "{e}"),
            Error::InvalidClusterIndex { index, clusters } => {
                write!(f, "cluster index {index} out of range for {clusters} clusters")
            }
            Error::PartitionMisaligned {
                cluster,
                expected,
                got,
            } => write!(
                f,
                "cluster {cluster}: partition expects {expected} tokens, got {got}"
            ),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Dataset(msg) => write!(f, "dataset error: {msg}"),
            Error::NonFiniteLoss { ce, cluster_term } => write!(
                f,
                "non-finite loss (ce = {ce}, cluster term = {cluster_term}); aborting"
            ),
            Error::NonFiniteGradient { param_index } => {
                write!(f, "non-finite gradient for parameter #{param_index}; aborting")
            }
            Error::ShapeMismatch { what, lhs, rhs } => {
                write!(f, "{what}: shape {lhs:?} does not match {rhs:?}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        Error::Tensor(e)
    }
}

impl From<ClusterError> for Error {
    fn from(e: ClusterError) -> Self {
        Error::Cluster(e)
    }
}

impl From<AttnError> for Error {
    fn from(e: AttnError) -> Self {
        Error::Attn(e)
    }
}
