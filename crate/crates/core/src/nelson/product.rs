use num_complex::Complex64;
use serde::Serialize;

use super::{DerivativeField, Operator};
use crate::diffusion::PathEnsemble;
use crate::stats::{mean_stderr, ComplexMean};
use crate::{Error, Result};

/// `d/dt E[X·Y]` against `E[𝒟X·Y + X·𝒟̄Y]` at one time.
#[derive(Clone, Debug, Serialize)]
pub struct ProductRuleReport {
    pub t: f64,
    pub delta: f64,
    /// Central difference `(E[X·Y](t+δ) − E[X·Y](t−δ))/(2δ)`.
    pub lhs: f64,
    pub lhs_stderr: f64,
    pub rhs: Complex64,
    pub rhs_stderr: f64,
    /// `|lhs − rhs|`.
    pub residual: f64,
    /// `√(se_lhs² + se_rhs²)`.
    pub stderr: f64,
    /// Standard error of the per-path difference, which accounts for the
    /// correlation between the two sides.
    pub paired_stderr: f64,
    pub paths_used: usize,
}

impl ProductRuleReport {
    pub fn within(&self, k: f64) -> bool {
        self.residual <= k * self.stderr
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Checks `E[𝒟X_t·Y_t + X_t·𝒟̄Y_t] = d/dt E[X_t·Y_t]`. Both ensembles must
/// share grid and path indexing (the same probability space).
pub fn product_rule_check(
    xf: &DerivativeField,
    yf: &DerivativeField,
    ens_x: &PathEnsemble,
    ens_y: &PathEnsemble,
    t: f64,
    delta: f64,
) -> Result<ProductRuleReport> {
    xf.check_matches(ens_x)?;
    yf.check_matches(ens_y)?;
    if ens_x.grid() != ens_y.grid() || ens_x.n_paths() != ens_y.n_paths() {
        return Err(Error::input("product rule needs both processes on the same grid and paths"));
    }
    crate::error::check_dim(ens_x.dim(), ens_y.dim())?;
    if xf.operator() != Operator::Complex {
        return Err(Error::input("first field must be 𝒟X"));
    }
    if yf.operator() != Operator::Conjugate {
        return Err(Error::input("second field must be 𝒟̄Y (use DerivativeField::conjugate)"));
    }
    let grid = ens_x.grid();
    let m = grid.index_of(t).ok_or_else(|| Error::input(format!("t = {t} is not on the grid")))?;
    let k = grid
        .steps_in(delta)
        .filter(|k| *k > 0)
        .ok_or_else(|| Error::input(format!("δ = {delta} is not a positive multiple of Δt")))?;
    if m < k || m + k > grid.steps() {
        return Err(Error::input(format!("t = {t} is too close to the boundary for δ = {delta}")));
    }
    let (sx, sy) = match (xf.slot_of(m), yf.slot_of(m)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::input(format!("derivative fields do not cover t = {t}"))),
    };
    let h = (grid.time(m + k) - grid.time(m - k)) / 2.0;
    let mut q = Vec::new();
    let mut r = Vec::new();
    for p in 0..ens_x.n_paths() {
        if !(xf.is_valid(sx, p) && yf.is_valid(sy, p)) {
            continue;
        }
        let ahead = dot(ens_x.state(m + k, p), ens_y.state(m + k, p));
        let behind = dot(ens_x.state(m - k, p), ens_y.state(m - k, p));
        q.push((ahead - behind) / (2.0 * h));
        let x = ens_x.state(m, p);
        let y = ens_y.state(m, p);
        let dx = xf.value(sx, p);
        let dy = yf.value(sy, p);
        r.push((0..x.len()).map(|j| dx[j] * y[j] + x[j] * dy[j]).sum::<Complex64>());
    }
    if q.is_empty() {
        return Err(Error::Estimation(format!("no valid paths at t = {t}")));
    }
    let (lhs, lhs_se) = mean_stderr(&q);
    let rhs = ComplexMean::from_samples(&r);
    let diff: Vec<Complex64> = q.iter().zip(&r).map(|(a, b)| Complex64::new(*a, 0.0) - b).collect();
    let paired = ComplexMean::from_samples(&diff);
    Ok(ProductRuleReport {
        t,
        delta,
        lhs,
        lhs_stderr: lhs_se,
        rhs: rhs.mean,
        rhs_stderr: rhs.stderr(),
        residual: (Complex64::new(lhs, 0.0) - rhs.mean).norm(),
        stderr: lhs_se.hypot(rhs.stderr()),
        paired_stderr: paired.stderr(),
        paths_used: q.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{simulate, DensityModel, DiffusionModel, InitialLaw, TimeGrid};
    use crate::nelson::{analytic_complex_derivative, regression_complex_derivative, EstimatorConfig};

    #[test]
    fn brownian_square() {
        let model = DiffusionModel::brownian(1, 1.0, InitialLaw::brownian_at(vec![0.0], 1.0, 1.0)).unwrap();
        let ens = simulate(&model, &TimeGrid::new(1.0, 2.0, 1000).unwrap(), 20_000, 21).unwrap();
        let dm = DensityModel::analytic_gaussian(&model, 1.0).unwrap();
        let f = analytic_complex_derivative(&model, &dm, &ens, &EstimatorConfig::default()).unwrap();
        let rep = product_rule_check(&f, &f.conjugate(), &ens, &ens, 1.5, 0.1).unwrap();
        assert!(rep.within(3.0), "{rep:?}");
        assert!((rep.rhs.re - 1.0).abs() < 0.05 && rep.rhs.im.abs() < 1e-12);
    }

    #[test]
    fn constants_give_exact_zero() {
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let ens = PathEnsemble::from_fn(grid, 200, 1, |_, _, x| x[0] = 3.0).unwrap();
        let f = regression_complex_derivative(&ens, &EstimatorConfig::default()).unwrap();
        let rep = product_rule_check(&f, &f.conjugate(), &ens, &ens, 0.5, 0.05).unwrap();
        assert_eq!(rep.lhs, 0.0);
        assert_eq!(rep.rhs, Complex64::new(0.0, 0.0));
        assert_eq!(rep.residual, 0.0);
    }

    #[test]
    fn time_times_brownian() {
        let model = DiffusionModel::brownian(1, 1.0, InitialLaw::brownian_at(vec![0.0], 1.0, 1.0)).unwrap();
        let grid = TimeGrid::new(1.0, 2.0, 200).unwrap();
        let w = simulate(&model, &grid, 20_000, 22).unwrap();
        let x = PathEnsemble::from_fn(grid, 20_000, 1, |t, _, x| x[0] = t).unwrap();
        let cfg = EstimatorConfig::default();
        let fx = regression_complex_derivative(&x, &cfg).unwrap();
        let fw = analytic_complex_derivative(&model, &DensityModel::analytic_gaussian(&model, 1.0).unwrap(), &w, &cfg).unwrap();
        let rep = product_rule_check(&fx, &fw.conjugate(), &x, &w, 1.5, 0.1).unwrap();
        assert!(rep.within(3.0), "{rep:?}");
        assert!((fx.value(fx.slot_at(1.5).unwrap(), 0)[0].re - 1.0).abs() < 1e-9);
    }

    #[test]
    fn boundary_and_operator_errors() {
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let ens = PathEnsemble::from_fn(grid, 200, 1, |t, p, x| x[0] = t + p as f64).unwrap();
        let f = regression_complex_derivative(&ens, &EstimatorConfig::default()).unwrap();
        assert!(product_rule_check(&f, &f.conjugate(), &ens, &ens, 0.02, 0.05).is_err());
        assert!(product_rule_check(&f, &f, &ens, &ens, 0.5, 0.05).is_err());
        assert!(product_rule_check(&f, &f.conjugate(), &ens, &ens, 0.5, 0.0).is_err());
    }
}
