use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DensityModel, DiffusionModel, PathEnsemble, TimeGrid};
use crate::error::check_dim;
use crate::lagrangian::LagrangianSpec;
use crate::nelson::{
    conjugate_second_derivative, path_acceleration, second_derivative, DerivativeField, EstimatorConfig, Operator,
};
use crate::stats::{mean_stderr, trapezoid_weights};
use crate::{linalg, Error, Result};

/// Largest difference between the stochastic and classical residuals on a
/// σ = 0 path for which the two are said to coincide.
pub const COMMUTATION_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualVariant {
    /// `∂_x L − 𝒟∂_v L`
    #[default]
    Complex,
    /// `∂_x L − 𝒟̄∂_v L`
    Conjugate,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResidualSummary {
    pub t: f64,
    /// `E‖residual‖²`
    pub mean_sq: f64,
    pub mean_sq_stderr: f64,
    /// `E‖∇U(X)‖²`, the natural scale of the residual.
    pub grad_sq: f64,
    pub grad_sq_stderr: f64,
    pub valid_paths: usize,
}

/// Pathwise stochastic Euler–Lagrange residual with per-time summaries.
#[derive(Clone, Debug)]
pub struct ELResidualField {
    field: DerivativeField,
    variant: ResidualVariant,
    summary: Vec<ResidualSummary>,
}

impl ELResidualField {
    pub fn field(&self) -> &DerivativeField {
        &self.field
    }

    pub fn variant(&self) -> ResidualVariant {
        self.variant
    }

    pub fn summary(&self) -> &[ResidualSummary] {
        &self.summary
    }

    /// `∫E‖residual‖² dt / ∫E‖∇U(X)‖² dt` over the times with valid paths.
    pub fn relative_size(&self) -> f64 {
        let used: Vec<&ResidualSummary> = self.summary.iter().filter(|s| s.valid_paths > 0).collect();
        let w = if used.len() >= 2 {
            trapezoid_weights(&used.iter().map(|s| s.t).collect::<Vec<_>>())
        } else {
            vec![1.0; used.len()]
        };
        let num: f64 = used.iter().zip(&w).map(|(s, w)| s.mean_sq * w).sum();
        let den: f64 = used.iter().zip(&w).map(|(s, w)| s.grad_sq * w).sum();
        num / den
    }

    /// Largest component modulus over all valid entries.
    pub fn sup_norm(&self) -> f64 {
        self.fold(|z| z.norm())
    }

    pub fn max_imag(&self) -> f64 {
        self.fold(|z| z.im.abs())
    }

    fn fold(&self, f: impl Fn(&Complex64) -> f64) -> f64 {
        let f_ = &self.field;
        (0..f_.slots().len())
            .flat_map(|s| (0..f_.n_paths()).map(move |p| (s, p)))
            .filter(|&(s, p)| f_.is_valid(s, p))
            .flat_map(|(s, p)| f_.value(s, p).iter().map(&f))
            .fold(0.0, f64::max)
    }

    /// Summary table: `t,mean_sq,mean_sq_stderr,grad_sq,grad_sq_stderr,valid_paths`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,mean_sq,mean_sq_stderr,grad_sq,grad_sq_stderr,valid_paths")?;
        for s in &self.summary {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                s.t, s.mean_sq, s.mean_sq_stderr, s.grad_sq, s.grad_sq_stderr, s.valid_paths
            )?;
        }
        Ok(())
    }
}

/// `−∇U(X) − Q·𝒟²X` (or `Q·𝒟̄𝒟X`) for a natural Lagrangian. Fails as
/// [`second_derivative`] does when no route to `𝒟²X` is available.
pub fn el_residual(
    ens: &PathEnsemble,
    model: &DiffusionModel,
    dm: &DensityModel,
    lag: &LagrangianSpec,
    variant: ResidualVariant,
    cfg: &EstimatorConfig,
) -> Result<ELResidualField> {
    let second = match variant {
        ResidualVariant::Complex => second_derivative(model, dm, ens, cfg)?,
        ResidualVariant::Conjugate => conjugate_second_derivative(model, dm, ens, cfg)?,
    };
    el_residual_from(ens, &second, lag)
}

/// Residual from a precomputed `𝒟²X` or `𝒟̄𝒟X` field.
pub fn el_residual_from(ens: &PathEnsemble, second: &DerivativeField, lag: &LagrangianSpec) -> Result<ELResidualField> {
    second.check_matches(ens)?;
    let d = lag.dim();
    check_dim(d, ens.dim())?;
    let variant = match second.operator() {
        Operator::Second => ResidualVariant::Complex,
        Operator::ConjugateSecond => ResidualVariant::Conjugate,
        _ => return Err(Error::input("the residual needs a 𝒟²X or 𝒟̄𝒟X field")),
    };
    let slots = second.slots().to_vec();
    let field = second.map(Operator::Function, |s, p, accel, out| {
        let grad = lag.potential.gradient(ens.state(slots[s], p));
        lag.q.apply_into(accel, out);
        for j in 0..d {
            out[j] = -grad[j] - out[j];
        }
    });
    let summary = slots
        .iter()
        .enumerate()
        .map(|(s, &m)| {
            let mut res = Vec::new();
            let mut grad = Vec::new();
            for p in (0..ens.n_paths()).filter(|&p| field.is_valid(s, p)) {
                res.push(field.value(s, p).iter().map(|z| z.norm_sqr()).sum::<f64>());
                grad.push(lag.potential.gradient(ens.state(m, p)).iter().map(|g| g * g).sum::<f64>());
            }
            let (mean_sq, mean_sq_stderr) = mean_stderr(&res);
            let (grad_sq, grad_sq_stderr) = mean_stderr(&grad);
            ResidualSummary {
                t: ens.grid().time(m),
                mean_sq,
                mean_sq_stderr,
                grad_sq,
                grad_sq_stderr,
                valid_paths: res.len(),
            }
        })
        .collect();
    Ok(ELResidualField {
        field,
        variant,
        summary,
    })
}

/// Deterministic trajectory sampled on a grid.
#[derive(Clone, Debug, Serialize)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub dim: usize,
    /// `(steps + 1) × dim`
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
}

impl Trajectory {
    pub fn position(&self, m: usize) -> &[f64] {
        &self.positions[m * self.dim..(m + 1) * self.dim]
    }

    pub fn velocity(&self, m: usize) -> &[f64] {
        &self.velocities[m * self.dim..(m + 1) * self.dim]
    }

    /// The trajectory as a one-path σ = 0 ensemble.
    pub fn to_ensemble(&self) -> Result<PathEnsemble> {
        PathEnsemble::from_trajectory(self.grid, self.dim, &self.positions)
    }
}

/// Classical Euler–Lagrange equation `Q·x″ = −∇U(x)`, one RK4 step per grid step.
pub fn classical_el_solve(lag: &LagrangianSpec, x0: &[f64], v0: &[f64], grid: &TimeGrid) -> Result<Trajectory> {
    let d = lag.dim();
    check_dim(d, x0.len())?;
    check_dim(d, v0.len())?;
    let q_inv = lag.q.inverse()?;
    let accel = |x: &[f64], out: &mut [f64]| {
        let g = lag.potential.gradient(x);
        linalg::matvec(d, &q_inv, &g, out);
        out.iter_mut().for_each(|a| *a = -*a);
    };
    let h = grid.dt();
    let mut positions = Vec::with_capacity(grid.len() * d);
    let mut velocities = Vec::with_capacity(grid.len() * d);
    let (mut x, mut v) = (x0.to_vec(), v0.to_vec());
    positions.extend_from_slice(&x);
    velocities.extend_from_slice(&v);
    let mut k = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut xs = vec![0.0; d];
    for m in 0..grid.steps() {
        // (x, v)' = (v, a(x)); stage velocities are v + c·h·k_{prev}
        accel(&x, &mut k[0]);
        xs.iter_mut().enumerate().for_each(|(j, s)| *s = x[j] + 0.5 * h * v[j]);
        accel(&xs, &mut k[1]);
        xs.iter_mut()
            .enumerate()
            .for_each(|(j, s)| *s = x[j] + 0.5 * h * (v[j] + 0.5 * h * k[0][j]));
        accel(&xs, &mut k[2]);
        xs.iter_mut()
            .enumerate()
            .for_each(|(j, s)| *s = x[j] + h * (v[j] + 0.5 * h * k[1][j]));
        accel(&xs, &mut k[3]);
        for j in 0..d {
            let vel_avg = v[j] + h * (k[0][j] + k[1][j] + k[2][j]) / 6.0;
            x[j] += h * vel_avg;
            v[j] += h * (k[0][j] + 2.0 * k[1][j] + 2.0 * k[2][j] + k[3][j]) / 6.0;
        }
        if x.iter().chain(&v).any(|c| !c.is_finite()) {
            return Err(Error::Simulation {
                t: grid.time(m + 1),
                path: 0,
                state: x,
            });
        }
        positions.extend_from_slice(&x);
        velocities.extend_from_slice(&v);
    }
    Ok(Trajectory {
        grid: *grid,
        dim: d,
        positions,
        velocities,
    })
}

/// Trapezoid rule for `∫ L(x, x′) dt` along a solved trajectory.
pub fn classical_action(lag: &LagrangianSpec, traj: &Trajectory) -> Result<f64> {
    check_dim(lag.dim(), traj.dim)?;
    let w = trapezoid_weights(&traj.grid.times());
    Ok((0..traj.grid.len())
        .map(|m| {
            let v: Vec<Complex64> = traj.velocity(m).iter().map(|&c| Complex64::new(c, 0.0)).collect();
            w[m] * lag.eval_unchecked(traj.position(m), &v).re
        })
        .sum())
}

#[derive(Clone, Debug, Serialize)]
pub struct CoherenceReport {
    /// Real part of the stochastic residual, `(steps + 1) × dim`.
    pub stochastic: Vec<f64>,
    /// Classical residual `−∇U(x) − Q·x″`, same layout.
    pub classical: Vec<f64>,
    pub max_difference: f64,
    pub stochastic_sup: f64,
    pub classical_sup: f64,
    /// Largest imaginary part of the stochastic residual.
    pub max_imag: f64,
    pub tolerance: f64,
    /// Both residuals are below `tolerance`.
    pub within_tolerance: bool,
    /// The two pipelines agree to [`COMMUTATION_TOLERANCE`] with no imaginary part.
    pub commutes: bool,
}

/// Solves the classical equation, embeds the solution as a σ = 0 ensemble and
/// compares its stochastic residual with the classical one.
pub fn coherence_check(
    lag: &LagrangianSpec,
    x0: &[f64],
    v0: &[f64],
    grid: &TimeGrid,
    tolerance: f64,
) -> Result<CoherenceReport> {
    let traj = classical_el_solve(lag, x0, v0, grid)?;
    coherence_check_path(lag, &traj.to_ensemble()?, tolerance)
}

/// The same comparison for an arbitrary embedded path (one-path ensemble).
pub fn coherence_check_path(lag: &LagrangianSpec, path: &PathEnsemble, tolerance: f64) -> Result<CoherenceReport> {
    if path.n_paths() != 1 {
        return Err(Error::input("coherence check takes a single embedded path"));
    }
    let d = lag.dim();
    check_dim(d, path.dim())?;
    let residual = el_residual(
        path,
        &DiffusionModel::embedding(d),
        &DensityModel::dirac(d),
        lag,
        ResidualVariant::Complex,
        &EstimatorConfig::default(),
    )?;
    let grid = path.grid();
    let field = residual.field();
    let mut stochastic = Vec::with_capacity(grid.len() * d);
    let mut classical = Vec::with_capacity(grid.len() * d);
    let mut max_imag = 0.0f64;
    let mut accel = vec![0.0; d];
    let mut qa = vec![0.0; d];
    for m in 0..grid.len() {
        let s = field
            .slot_of(m)
            .ok_or_else(|| Error::Estimation(format!("no residual at grid index {m}")))?;
        for (k, a) in accel.iter_mut().enumerate() {
            *a = path_acceleration(|j| path.state(j, 0)[k], m, grid.steps(), grid.dt());
        }
        linalg::matvec(d, lag.q.coeffs(), &accel, &mut qa);
        let grad = lag.potential.gradient(path.state(m, 0));
        for j in 0..d {
            let z = field.value(s, 0)[j];
            stochastic.push(z.re);
            max_imag = max_imag.max(z.im.abs());
            classical.push(-grad[j] - qa[j]);
        }
    }
    let sup = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let max_difference = stochastic
        .iter()
        .zip(&classical)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let (stochastic_sup, classical_sup) = (sup(&stochastic), sup(&classical));
    Ok(CoherenceReport {
        max_difference,
        stochastic_sup,
        classical_sup,
        max_imag,
        tolerance,
        within_tolerance: stochastic_sup <= tolerance && classical_sup <= tolerance,
        commutes: max_difference <= COMMUTATION_TOLERANCE && max_imag == 0.0,
        stochastic,
        classical,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::diffusion::{simulate, InitialLaw, KernelDensity, BandwidthRule};
    use crate::lagrangian::{Potential, QuadraticForm};

    fn harmonic(d: usize) -> LagrangianSpec {
        LagrangianSpec::natural(d, 1.0, Potential::harmonic(1.0))
    }

    fn free(d: usize) -> LagrangianSpec {
        LagrangianSpec::natural(d, 1.0, Potential::Free)
    }

    #[test]
    fn harmonic_oscillator_half_period() {
        let grid = TimeGrid::new(0.0, PI, 1000).unwrap();
        let traj = classical_el_solve(&harmonic(1), &[1.0], &[0.0], &grid).unwrap();
        assert!((traj.position(1000)[0] + 1.0).abs() < 1e-6);
        assert!(traj.velocity(1000)[0].abs() < 1e-6);
    }

    #[test]
    fn free_motion_is_linear() {
        let grid = TimeGrid::new(0.0, 3.0, 300).unwrap();
        let traj = classical_el_solve(&free(2), &[1.0, -2.0], &[0.5, 0.25], &grid).unwrap();
        for m in 0..=300 {
            let t = grid.time(m);
            assert!((traj.position(m)[0] - (1.0 + 0.5 * t)).abs() < 1e-12);
            assert!((traj.position(m)[1] - (-2.0 + 0.25 * t)).abs() < 1e-12);
        }
        let rest = classical_el_solve(&free(1), &[4.0], &[0.0], &grid).unwrap();
        assert!(rest.positions.iter().all(|x| *x == 4.0));
    }

    #[test]
    fn singular_mass_matrix_is_rejected() {
        let lag = LagrangianSpec::new(QuadraticForm::new(2, vec![1.0, 1.0, 1.0, 1.0]).unwrap(), Potential::Free);
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        assert!(matches!(classical_el_solve(&lag, &[0.0, 0.0], &[1.0, 0.0], &grid), Err(Error::Input(_))));
    }

    #[test]
    fn anisotropic_mass_matches_scaled_frequency() {
        // Q = diag(4, 1), U = ½|x|²: the first coordinate oscillates at ω = 1/2
        let lag = LagrangianSpec::new(QuadraticForm::new(2, vec![4.0, 0.0, 0.0, 1.0]).unwrap(), Potential::harmonic(1.0));
        let grid = TimeGrid::new(0.0, 2.0 * PI, 2000).unwrap();
        let traj = classical_el_solve(&lag, &[1.0, 1.0], &[0.0, 0.0], &grid).unwrap();
        assert!((traj.position(2000)[0] + 1.0).abs() < 1e-8);
        assert!((traj.position(2000)[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn stationary_ou_solves_the_stochastic_equation() {
        let model = DiffusionModel::ornstein_uhlenbeck(1, 1.0, 2f64.sqrt(), InitialLaw::ou_stationary(1, 1.0, 2f64.sqrt())).unwrap();
        let ens = simulate(&model, &TimeGrid::new(0.0, 1.0, 100).unwrap(), 5000, 31).unwrap();
        let dm = DensityModel::analytic_gaussian(&model, 0.0).unwrap();
        let res = el_residual(&ens, &model, &dm, &harmonic(1), ResidualVariant::Complex, &EstimatorConfig::default()).unwrap();
        assert!(res.relative_size() <= 0.01);
        assert!(res.sup_norm() < 1e-12);
        assert_eq!(res.variant(), ResidualVariant::Complex);
    }

    #[test]
    fn brownian_motion_is_not_harmonic() {
        let model = DiffusionModel::brownian(1, 1.0, InitialLaw::brownian_at(vec![0.0], 1.0, 1.0)).unwrap();
        let ens = simulate(&model, &TimeGrid::new(1.0, 2.0, 200).unwrap(), 20_000, 32).unwrap();
        let dm = DensityModel::analytic_gaussian(&model, 1.0).unwrap();
        let res = el_residual(&ens, &model, &dm, &harmonic(1), ResidualVariant::Complex, &EstimatorConfig::default()).unwrap();
        assert!(res.relative_size() > 0.2);
        for (s, summary) in res.summary().iter().enumerate() {
            let t = summary.t;
            let closed = t * (1.0 - 0.5 / (t * t)).powi(2);
            assert!((summary.mean_sq - closed).abs() <= 0.1 * closed, "{summary:?}");
            let x = ens.state(res.field().slots()[s], 3)[0];
            let r = res.field().value(s, 3)[0];
            assert!((r.re + x * (1.0 - 0.5 / (t * t))).abs() < 1e-12 && r.im.abs() < 1e-12);
        }
        let mut csv = Vec::new();
        res.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 202);
    }

    #[test]
    fn conjugate_variant_on_stationary_ou() {
        // 𝒟̄𝒟X = ω²X, so the conjugate residual is −2X for the harmonic Lagrangian
        let model = DiffusionModel::ornstein_uhlenbeck(1, 1.0, 2f64.sqrt(), InitialLaw::ou_stationary(1, 1.0, 2f64.sqrt())).unwrap();
        let ens = simulate(&model, &TimeGrid::new(0.0, 1.0, 50).unwrap(), 1000, 33).unwrap();
        let dm = DensityModel::analytic_gaussian(&model, 0.0).unwrap();
        let res = el_residual(&ens, &model, &dm, &harmonic(1), ResidualVariant::Conjugate, &EstimatorConfig::default()).unwrap();
        assert_eq!(res.variant(), ResidualVariant::Conjugate);
        let r = res.field().value(10, 7)[0];
        assert!((r.re + 2.0 * ens.state(10, 7)[0]).abs() < 1e-12);
    }

    #[test]
    fn variants_coincide_on_deterministic_paths() {
        let grid = TimeGrid::new(0.0, 2.0, 400).unwrap();
        let traj = classical_el_solve(&harmonic(2), &[1.0, 0.0], &[0.0, 1.0], &grid).unwrap();
        let ens = traj.to_ensemble().unwrap();
        let cfg = EstimatorConfig::default();
        let (model, dm) = (DiffusionModel::embedding(2), DensityModel::dirac(2));
        let a = el_residual(&ens, &model, &dm, &harmonic(2), ResidualVariant::Complex, &cfg).unwrap();
        let b = el_residual(&ens, &model, &dm, &harmonic(2), ResidualVariant::Conjugate, &cfg).unwrap();
        for s in 0..a.field().slots().len() {
            assert_eq!(a.field().value(s, 0), b.field().value(s, 0));
        }
        assert_eq!(a.max_imag(), 0.0);
    }

    #[test]
    fn kernel_density_needs_nested_regression() {
        let model = DiffusionModel::brownian(1, 1.0, InitialLaw::brownian_at(vec![0.0], 1.0, 1.0)).unwrap();
        let ens = simulate(&model, &TimeGrid::new(1.0, 2.0, 20).unwrap(), 500, 34).unwrap();
        let dm = DensityModel::kernel_series(&ens, BandwidthRule::Silverman, model.dispersion(), &[5, 10]).unwrap();
        let err = el_residual(&ens, &model, &dm, &harmonic(1), ResidualVariant::Complex, &EstimatorConfig::default());
        assert!(matches!(err, Err(Error::Capability(_))));
        let _ = KernelDensity::fit(ens.slice(5), 1, BandwidthRule::Silverman).unwrap();
    }

    #[test]
    fn classical_solution_has_small_residual() {
        let grid = TimeGrid::new(0.0, PI, 1000).unwrap();
        let rep = coherence_check(&harmonic(1), &[1.0], &[0.0], &grid, 1e-3).unwrap();
        assert!(rep.within_tolerance && rep.commutes, "{}", rep.max_difference);
        assert!(rep.max_difference <= 1e-10);
        assert_eq!(rep.max_imag, 0.0);
    }

    #[test]
    fn coherence_holds_off_solutions() {
        let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let ens = PathEnsemble::from_fn(grid, 1, 1, |t, _, x| x[0] = t * t).unwrap();
        let rep = coherence_check_path(&free(1), &ens, 1e-3).unwrap();
        assert!(rep.commutes && !rep.within_tolerance);
        assert!(rep.stochastic.iter().chain(&rep.classical).all(|r| (r + 2.0).abs() <= 1e-6));
    }

    #[test]
    fn free_particle_coherence() {
        let grid = TimeGrid::new(0.0, 2.0, 500).unwrap();
        let rep = coherence_check(&free(3), &[0.0, 1.0, 2.0], &[1.0, -1.0, 0.5], &grid, 1e-9).unwrap();
        assert!(rep.within_tolerance && rep.commutes);
    }

    #[test]
    fn classical_action_oracle() {
        let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let traj = classical_el_solve(&harmonic(1), &[1.0], &[0.0], &grid).unwrap();
        assert!((classical_action(&harmonic(1), &traj).unwrap() + 2f64.sin() / 4.0).abs() < 1e-6);
    }
}
