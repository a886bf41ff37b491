//! Learning piecewise-constant controls for one-dimensional controlled
//! diffusions with time-sampled, space-quantized Q-learning.
//!
//! The pipeline is:
//!
//! 1. [`diffusion`] simulates `dX = b(X,u) dt + σ(X,u) dB` under controls that
//!    are frozen over each sampling interval of length `h`.
//! 2. [`discretize`] builds the finite state and action sets and the
//!    nearest-neighbour quantizer.
//! 3. [`qlearn`] runs asynchronous Q-learning on the quantized sampled chain.
//! 4. [`approx_mdp`] builds the aggregated finite MDP by Monte Carlo and solves
//!    it exactly; this is the fixed point Q-learning converges to.
//! 5. [`policy_eval`] measures discounted costs, performance gaps and
//!    Wasserstein-Lipschitz constants of the sampled kernel.
//! 6. [`bounds`] evaluates the closed-form approximation-error bounds and
//!    sample-complexity expressions.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! at the crate root fix the scalar to `f64`, which is what the command-line
//! tools use.

pub mod approx_mdp;
pub mod bounds;
pub mod diffusion;
pub mod discretize;
mod error;
pub mod io;
pub mod policy_eval;
pub mod qlearn;
pub mod rng;
mod scalar;

pub use error::{Error, Result};
pub use scalar::{lit, Scalar};

pub type DiffusionModel = diffusion::DiffusionModel<f64>;
pub type OuParams = diffusion::OuParams<f64>;
pub type SamplingScheme = diffusion::SamplingScheme<f64>;
pub type Trajectory = diffusion::Trajectory<f64>;
pub type CostEstimate = diffusion::CostEstimate<f64>;
pub type Interval = diffusion::Interval<f64>;

pub type StateGrid = discretize::StateGrid<f64>;
pub type ActionGrid = discretize::ActionGrid<f64>;

pub type FiniteMdp = approx_mdp::FiniteMdp<f64>;
pub type QMatrix = approx_mdp::QMatrix<f64>;

pub type QTable = qlearn::QTable<f64>;
pub type LearnHistory = qlearn::LearnHistory<f64>;

pub type GapReport = policy_eval::GapReport<f64>;
pub type LipschitzRow = policy_eval::LipschitzRow<f64>;

pub type BoundReport = bounds::BoundReport<f64>;
pub type ComplexityReport = bounds::ComplexityReport<f64>;

/// Single-precision variants, mostly useful for memory-bound experiments.
pub mod f32 {
    pub type DiffusionModel = crate::diffusion::DiffusionModel<f32>;
    pub type StateGrid = crate::discretize::StateGrid<f32>;
    pub type ActionGrid = crate::discretize::ActionGrid<f32>;
    pub type FiniteMdp = crate::approx_mdp::FiniteMdp<f32>;
    pub type QMatrix = crate::approx_mdp::QMatrix<f32>;
    pub type QTable = crate::qlearn::QTable<f32>;
    pub type BoundReport = crate::bounds::BoundReport<f32>;
}
