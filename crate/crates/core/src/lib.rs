//! Stochastic calculus of variations on simulated diffusion ensembles.
//!
//! The crate estimates Nelson's forward and backward derivatives of diffusion
//! processes, assembles the complex derivative `𝒟 = (D + D₊)/2 + i(D − D₊)/2`,
//! and uses it to evaluate the stochastic action `E[∫ L(X_t, 𝒟X_t) dt]`, its
//! directional derivatives, the stochastic Euler–Lagrange residual and the
//! Noether first integral attached to a one-parameter symmetry group.
//!
//! Conditional expectations are taken with respect to the current state only
//! (`E[· | X_t]`), which is exact for the Markov diffusions simulated here.
//!
//! Module map:
//! - [`lagrangian`]: natural Lagrangians `L(x, v) = q(v) − U(x)` with holomorphic `q`.
//! - [`diffusion`]: time grids, diffusion models, Euler–Maruyama ensembles, densities.
//! - [`nelson`]: regression and density-based routes to `D`, `D₊`, `𝒟`, `𝒟̄`, `𝒟²`.
//! - [`variation`]: action functional, variations, Euler–Lagrange residuals, coherence.
//! - [`noether`]: affine one-parameter groups and conserved quantities.
//! - [`scenario`] / [`pipeline`]: batch scenarios, registries and run reports.

pub mod diffusion;
pub mod error;
pub mod lagrangian;
mod linalg;
pub mod nelson;
pub mod noether;
pub mod pipeline;
pub mod scenario;
mod smoothing;
pub mod stats;
pub mod variation;

pub use error::{Error, Result};
pub use num_complex::Complex64;
