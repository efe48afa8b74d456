//! Numerical primitives shared by the analysis modules.

mod eigen;
mod logistic;
mod mds;
pub mod special;
mod stats;

use thiserror::Error;

pub use eigen::{symmetric_eig, SymmetricEigen};
pub use logistic::{
    fit_logistic_lsq, initial_grid, FitDirection, FitOptions, FitResult, LogisticBounds, LogisticParams,
};
pub use mds::{classical_mds, pairwise_euclidean, stress, MdsResult};
pub use stats::{
    mean, median, paired_t_greater, pearson, pearson_test, percentile, sample_std, sample_variance, welch_effect,
    zscore, Correlation, EffectStats, PairedTest,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("correlation undefined for constant input")]
    UndefinedCorrelation,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("zero variance")]
    ZeroVariance,
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max |m_ij - m_ji| = {max_diff:e})")]
    Asymmetric { max_diff: f64 },
    #[error("invalid distance matrix: {0}")]
    InvalidDistance(String),
    #[error("{what} did not converge")]
    NoConvergence { what: &'static str },
}
