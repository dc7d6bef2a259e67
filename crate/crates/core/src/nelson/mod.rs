//! Nelson derivatives of diffusion ensembles.
//!
//! Conditional expectations `E[· | 𝒫_t]` and `E[· | ℱ_t]` are replaced by
//! `E[· | X_t]`, which is exact for Markov diffusions. Two routes are offered:
//! nonparametric regression of difference quotients on the current state, and
//! the density formula
//! `𝒟X = b − (1/2p)∂_j(a^{·j}p) + (i/2p)∂_j(a^{·j}p)`, evaluated pathwise.

mod analytic;
mod field;
mod product;
mod regression;
mod estimators;

use serde::{Deserialize, Serialize};

use crate::diffusion::{BandwidthRule, TimeGrid, TimeSelection};
use crate::{Error, Result};

pub use analytic::{
    analytic_complex_derivative, conjugate_second_derivative, derivative_of_function, dirac_complex_derivative, dirac_second_derivative,
    second_derivative, AffineMap, GaussianVelocity, SmoothFunction,
};
pub(crate) use analytic::path_acceleration;
pub use estimators::{backward_derivative, complex_derivative, forward_derivative, regression_complex_derivative};
pub use field::{c1_norm, l2_modulus, DerivativeField, Method, Operator};
pub use product::{product_rule_check, ProductRuleReport};

/// Conditional-mean estimator used on each cross-section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Regression {
    /// Gaussian-kernel Nadaraya–Watson smoother.
    NadarayaWatson { bandwidth: BandwidthRule },
    /// Mean of the `k` nearest cross-section samples (including the query).
    Knn { k: usize },
    /// Each path's own difference quotient. Exact only when the future state
    /// is a function of the present one (σ = 0).
    Pathwise,
}

impl Default for Regression {
    fn default() -> Self {
        Regression::NadarayaWatson {
            bandwidth: BandwidthRule::Silverman,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Difference step `h` in grid steps.
    pub step: usize,
    pub regression: Regression,
    /// Mask points whose estimated density falls below the floor.
    pub mask_low_density: bool,
    /// Neighbours used where the kernel mass is too small.
    pub knn_fallback: usize,
    /// Minimum kernel mass (effective sample count) before falling back.
    pub min_kernel_mass: f64,
    /// Allows `𝒟²` by regressing the regression `𝒟X` field a second time.
    pub nested_regression: bool,
    pub times: TimeSelection,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            step: 1,
            regression: Regression::default(),
            mask_low_density: true,
            knn_fallback: 64,
            min_kernel_mass: 5.0,
            nested_regression: false,
            times: TimeSelection::All,
        }
    }
}

/// Minimum `k` for nearest-neighbour regression.
pub const MIN_KNN: usize = 10;
/// Minimum cross-section size for the regression estimators.
pub const MIN_REGRESSION_SAMPLES: usize = 100;

impl EstimatorConfig {
    /// Sets `h` in time units; it must be a positive multiple of the grid step.
    pub fn with_h(mut self, grid: &TimeGrid, h: f64) -> Result<Self> {
        self.step = grid
            .steps_in(h)
            .filter(|s| *s > 0)
            .ok_or_else(|| Error::input(format!("h = {h} is not a positive multiple of Δt = {}", grid.dt())))?;
        Ok(self)
    }

    pub fn with_times(mut self, times: TimeSelection) -> Self {
        self.times = times;
        self
    }

    pub fn with_step(mut self, step: usize) -> Self {
        self.step = step;
        self
    }

    pub fn h(&self, grid: &TimeGrid) -> f64 {
        self.step as f64 * grid.dt()
    }

    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        if self.step == 0 || self.step > grid.steps() {
            return Err(Error::input(format!(
                "difference step must be between 1 and {} grid steps, got {}",
                grid.steps(),
                self.step
            )));
        }
        if let Regression::Knn { k } = self.regression {
            if k < MIN_KNN {
                return Err(Error::input(format!("kNN regression needs k ≥ {MIN_KNN}, got {k}")));
            }
        }
        if self.knn_fallback < MIN_KNN {
            return Err(Error::input(format!("kNN fallback needs k ≥ {MIN_KNN}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let grid = TimeGrid::new(1.0, 2.0, 1000).unwrap();
        assert!(EstimatorConfig::default().validate(&grid).is_ok());
        let cfg = EstimatorConfig::default().with_h(&grid, 0.25).unwrap();
        assert_eq!(cfg.step, 250);
        assert!((cfg.h(&grid) - 0.25).abs() < 1e-15);
        assert!(EstimatorConfig::default().with_h(&grid, 0.00025).is_err());
        assert!(EstimatorConfig::default().with_h(&grid, 0.0).is_err());
        let knn = EstimatorConfig {
            regression: Regression::Knn { k: 5 },
            ..Default::default()
        };
        assert!(knn.validate(&grid).is_err());
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = EstimatorConfig {
            step: 4,
            regression: Regression::Knn { k: 32 },
            ..Default::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        let back: EstimatorConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
