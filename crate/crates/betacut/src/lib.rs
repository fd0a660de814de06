//! Numerics for one-cut beta ensembles with polynomial confining potentials.
//!
//! The crate computes the equilibrium measure of the eigenvalue gas, runs the
//! loop-equation recursion that produces the full `1/N` expansion of the
//! correlators, assembles the free-energy expansion by interpolation against a
//! Gaussian reference, evaluates CLT mean/covariance functionals for linear
//! statistics, and cross-checks everything against finite-`N` Metropolis
//! sampling.
//!
//! Everything off the spectral cut is represented through the Joukowski change
//! of variable `x = c + gamma (z + 1/z)`, which turns square-root branch cuts
//! into rational functions of `z` and makes every contour integral a circle
//! quadrature.

pub mod asymptotics;
pub mod cli;
pub mod config;
pub mod equilibrium;
pub mod kernel;
pub mod montecarlo;
pub mod operators;
pub mod potential;
pub mod recursion;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("order absent: potential has no order {0}")]
    OrderAbsent(usize),
    #[error("mismatched intervals")]
    MismatchedIntervals,
    #[error("degenerate interval: need a_minus < a_plus")]
    DegenerateInterval,
    #[error("cut evaluation: point lies on [alpha_minus, alpha_plus]")]
    CutEvaluation,
    #[error("not in H1: sampled function has non-negative-power content {0:.3e}")]
    NotInH1(f64),
    #[error("series accuracy loss: scaled tail {0:.3e}")]
    AccuracyLoss(f64),
    #[error("newton diverged: {0}")]
    NewtonDiverged(String),
    #[error("one-cut violated: negative density detected at x = {0}")]
    OneCutViolated(f64),
    #[error("soft endpoint escaped interval: alpha = {0}")]
    SoftEndpointEscaped(f64),
    #[error("margin crosses an S-zero (offcriticality lost on working interval)")]
    MarginCrossesSZero,
    #[error("hard edge requires a finite interval endpoint")]
    HardEdgeInfinite,
    #[error("not O(1/x^2): series has nonzero 1/x coefficient {0:.3e}")]
    NotH2(f64),
    #[error("not in Im K: K o K^-1 residual {residual:.3e} exceeds {tol:.1e}")]
    NotInImK { residual: f64, tol: f64 },
    #[error("Im K violation at (n,k) = ({n},{k}): residual {residual:.3e}")]
    ImKViolation { n: usize, k: i32, residual: f64 },
    #[error("contour invalid: {0}")]
    ContourInvalid(String),
    #[error("missing prerequisite term (n,k) = ({0},{1})")]
    MissingTerm(usize, i32),
    #[error("interpolation path leaves one-cut class at s = {0}")]
    PathLeavesOneCut(f64),
    #[error("step tuning failed: acceptance stuck at zero")]
    StepTuningFailed,
    #[error("insufficient effective samples ({0:.1})")]
    InsufficientSamples(f64),
    #[error("singular system: beta samples ill-chosen")]
    SingularSystem,
    #[error("quadrature failure: {0}")]
    QuadratureFailure(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
