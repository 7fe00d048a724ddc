//! Multi-scale transformer encoders on a small reverse-mode autodiff core.
//!
//! The crate is organized around a tape-based [`tensor::Graph`] that records
//! every operation eagerly and replays it backwards for exact gradients.
//! On top of that sit the attention kernels ([`attention`]), the per-layer
//! scale allocator ([`planner`]), encoder stacks ([`model`]), a training
//! loop with Adam ([`train`]), the mirrored-summation benchmark
//! ([`synthetic`]), and attention-distance analysis ([`probe`]).
//!
//! Everything runs in `f64`. Forward passes over independent graphs are
//! safe to evaluate in parallel; a single graph is single-threaded by
//! contract.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod planner;
pub mod probe;
mod seeding;
pub mod synthetic;
pub mod tensor;
pub mod text;
pub mod train;
pub mod verification;

pub use tensor::{Graph, Tensor, Var};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes, with both shapes named.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A scalar argument outside its valid range.
    #[error("invalid argument for {what}: {detail}")]
    Invalid { what: &'static str, detail: String },
    /// Non-finite values where finite ones are required (NaN gradients, diverged loss).
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Malformed configuration text or unknown keys.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed dataset, vocabulary, or corpus input.
    #[error("data error: {0}")]
    Data(String),
    /// Serialization format violations.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
