//! Diffusion models, Euler–Maruyama path ensembles and marginal densities.

mod density;
mod ensemble;
mod grid;
mod model;
mod simulate;

pub use density::{
    kde_fit, BandwidthRule, DensityKind, DensityModel, DensityPoint, GaussianFamily, GaussianMarginal, GradientBandwidth,
    KernelDensity, DENSITY_FLOOR, KDE_MIN_SAMPLES,
};
pub use ensemble::{PathEnsemble, ENSEMBLE_MAGIC, ENSEMBLE_VERSION};
pub use grid::{TimeGrid, TimeSelection};
pub use model::{DiffusionModel, Dispersion, Drift, InitialLaw, VectorField};
pub use simulate::{path_rng, simulate};
