//! Graph-spectral analysis of token mixers, and a desk-scale reference
//! implementation of the spectral-adaptive modulation (SPAM) mixer and the
//! SPANetV2 backbone built from it.
//!
//! The library answers two kinds of questions:
//!
//! * **What does a token mixer do to each graph frequency?** A 2D convolution
//!   or a self-attention map can both be written as an `N x N` support matrix
//!   `C` acting on flattened patch signals. Projecting `C` onto the
//!   eigenbasis `U` of the patch graph's normalized Laplacian and reading off
//!   `diag(U^T C U)` gives a frequency response over the Laplacian spectrum.
//!   The [`profiler`] module runs randomized campaigns of such profiles and
//!   ring-averaged log-amplitude analyses of feature maps.
//! * **What does the SPAM mixer compute, exactly?** The [`spam`] module is a
//!   plain-`f64` forward and hand-derived backward pass for the mixer (value
//!   projection, multi-kernel depthwise context aggregation with learnable
//!   spectral re-scaling, modulation, output linear), and [`backbone`]
//!   assembles four-stage pure and hybrid models from it. Gradients are
//!   validated against central finite differences ([`gradcheck`]).
//!
//! Everything is deterministic: randomness flows from a single seed through
//! splittable, label-keyed streams ([`rng::SeedStream`]), so campaigns produce
//! bit-identical results regardless of thread count.

pub mod attention;
pub mod backbone;
pub mod cli;
pub mod container;
pub mod conv_support;
pub mod gradcheck;
pub mod graphs;
pub mod profiler;
pub mod rng;
pub mod spam;
pub mod tensor;

/// Unified error type for all fallible operations in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A graph node has degree zero, so `D^{-1/2}` is undefined.
    #[error("node {node} is isolated (degree 0); normalized Laplacian undefined")]
    IsolatedNode { node: usize },

    /// The Jacobi eigensolver did not reach its tolerance within budget.
    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal residual {residual:.3e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    /// Operands have incompatible shapes; the message names both sides.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An operation that requires square spatial dims received H != W.
    #[error("input is not spatially square: {h} rows x {w} cols")]
    NonSquareInput { h: usize, w: usize },

    /// A model or campaign configuration violates a structural constraint.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An input tensor has the wrong shape for the model it is fed to.
    #[error("shape error: {0}")]
    ShapeError(String),

    /// Two evaluations of a supposedly pure loss differed.
    #[error("loss function is not deterministic (evaluations differ by {delta:.3e})")]
    NonDeterministicLoss { delta: f64 },

    /// A serialized parameter container failed validation.
    #[error("malformed container: {0}")]
    MalformedContainer(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
