use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{VariationClass, VariationProcess};
use crate::diffusion::PathEnsemble;
use crate::error::check_dim;
use crate::lagrangian::{AdmissibleLagrangian, LagrangianSpec};
use crate::nelson::{DerivativeField, Operator};
use crate::stats::{trapezoid_weights, ComplexMean};
use crate::{Error, Result};

/// Dimensions up to this use stack buffers in the inner loops.
const STACK_DIM: usize = 8;

/// Estimates whose integrand is masked on more than this share of the used
/// grid are flagged unreliable.
pub const MAX_MASKED_FRACTION: f64 = 0.2;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Trapezoid rule over the slots on which at least one path is valid,
/// stored as weights normalised to sum to one.
pub(crate) struct Quadrature {
    /// Slot indices into the driving field(s).
    pub slots: Vec<usize>,
    pub weights: Vec<f64>,
    pub start: f64,
    pub end: f64,
}

impl Quadrature {
    pub(crate) fn new(times: &[f64], used: impl Fn(usize) -> bool) -> Result<Self> {
        let slots: Vec<usize> = (0..times.len()).filter(|&s| used(s)).collect();
        if slots.len() < 2 {
            return Err(Error::Estimation(
                "fewer than two time points carry valid derivative values; the interior grid is empty".into(),
            ));
        }
        let t: Vec<f64> = slots.iter().map(|&s| times[s]).collect();
        let mut weights = trapezoid_weights(&t);
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Quadrature {
            weights,
            start: t[0],
            end: t[t.len() - 1],
            slots,
        })
    }
}

/// Time integrals of a multi-channel integrand, both as the weighted sum of
/// slot means and per path. Masked entries are imputed by the slot mean, so
/// the mean of the per-path integrals equals the integral of the means.
pub(crate) struct Integral {
    pub value: Vec<Complex64>,
    /// `n_paths × channels`
    pub per_path: Vec<Complex64>,
    pub masked: usize,
    pub entries: usize,
}

impl Integral {
    pub(crate) fn channel(&self, c: usize, channels: usize) -> Vec<Complex64> {
        self.per_path.iter().skip(c).step_by(channels).copied().collect()
    }
}

/// `f(slot, path, out)` returns false when the entry is masked.
pub(crate) fn integrate(
    q: &Quadrature,
    n: usize,
    channels: usize,
    f: impl Fn(usize, usize, &mut [Complex64]) -> bool + Sync,
) -> Result<Integral> {
    let means: Vec<(Vec<Complex64>, usize)> = q
        .slots
        .par_iter()
        .map(|&s| {
            let mut sum = vec![ZERO; channels];
            let mut out = vec![ZERO; channels];
            let mut count = 0;
            for p in 0..n {
                if f(s, p, &mut out) {
                    sum.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
                    count += 1;
                }
            }
            if count > 0 {
                sum.iter_mut().for_each(|a| *a /= count as f64);
            }
            (sum, count)
        })
        .collect();
    if means.iter().any(|(_, c)| *c == 0) {
        return Err(Error::Estimation("a quadrature node has no valid paths".into()));
    }
    // span·(f₀ + Σ ŵ(f − f₀)) is the trapezoid rule, written so that constant
    // integrands come out exact
    let span = q.end - q.start;
    let reference = means[0].0.clone();
    let mut value = vec![ZERO; channels];
    for ((m, _), w) in means.iter().zip(&q.weights) {
        for c in 0..channels {
            value[c] += (m[c] - reference[c]) * w;
        }
    }
    value.iter_mut().zip(&reference).for_each(|(v, r)| *v = (*v + r) * span);
    let per_path: Vec<Complex64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|p| {
            let mut acc = vec![ZERO; channels];
            let mut out = vec![ZERO; channels];
            let mut first = vec![ZERO; channels];
            for (k, &s) in q.slots.iter().enumerate() {
                let src = if f(s, p, &mut out) { &out } else { &means[k].0 };
                if k == 0 {
                    first.copy_from_slice(src);
                }
                for c in 0..channels {
                    acc[c] += (src[c] - first[c]) * q.weights[k];
                }
            }
            acc.iter_mut().zip(&first).for_each(|(v, r)| *v = (*v + r) * span);
            acc
        })
        .collect();
    let valid: usize = means.iter().map(|(_, c)| c).sum();
    Ok(Integral {
        value,
        per_path,
        masked: q.slots.len() * n - valid,
        entries: q.slots.len() * n,
    })
}

fn check_first_field(ens: &PathEnsemble, dfield: &DerivativeField, dim: usize) -> Result<()> {
    dfield.check_matches(ens)?;
    check_dim(dim, ens.dim())?;
    if dfield.operator() != Operator::Complex {
        return Err(Error::input("the action is evaluated on a 𝒟X field"));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct ActionEstimate {
    pub value: Complex64,
    pub stderr_re: f64,
    pub stderr_im: f64,
    /// Modulus of the complex standard error.
    pub mc_stderr: f64,
    pub quadrature: &'static str,
    pub t_start: f64,
    pub t_end: f64,
    pub nodes: usize,
    pub masked_fraction: f64,
    pub unreliable: bool,
    /// `E[∫|L| dt]`, the empirical integrability check.
    pub abs_integral: f64,
    pub integrable: bool,
    /// Share of `E[∫|L| dt]` carried by the top 0.1% of paths; values near 1
    /// point at a heavy tail.
    pub tail_share: f64,
}

/// `E[∫ L(X_t, 𝒟X_t) dt]` by the trapezoid rule over the valid interior grid.
pub fn action(ens: &PathEnsemble, dfield: &DerivativeField, lag: &dyn AdmissibleLagrangian) -> Result<ActionEstimate> {
    check_first_field(ens, dfield, lag.dim())?;
    let q = Quadrature::new(&dfield.times(), |s| dfield.valid_count(s) > 0)?;
    let slots = dfield.slots();
    let integral = integrate(&q, ens.n_paths(), 2, |s, p, out| {
        if !dfield.is_valid(s, p) {
            return false;
        }
        let l = lag.value(ens.state(slots[s], p), dfield.value(s, p));
        out[0] = l;
        out[1] = Complex64::new(l.norm(), 0.0);
        true
    })?;
    let stats = ComplexMean::from_samples(&integral.channel(0, 2));
    let mut abs: Vec<f64> = integral.channel(1, 2).iter().map(|z| z.re).collect();
    let abs_integral = integral.value[1].re;
    abs.sort_by(|a, b| b.total_cmp(a));
    let top = abs.len().div_ceil(1000);
    let total: f64 = abs.iter().sum();
    let masked_fraction = integral.masked as f64 / integral.entries as f64;
    Ok(ActionEstimate {
        value: integral.value[0],
        stderr_re: stats.stderr_re,
        stderr_im: stats.stderr_im,
        mc_stderr: stats.stderr(),
        quadrature: "trapezoid",
        t_start: q.start,
        t_end: q.end,
        nodes: q.slots.len(),
        masked_fraction,
        unreliable: masked_fraction > MAX_MASKED_FRACTION,
        abs_integral,
        integrable: abs_integral.is_finite(),
        tail_share: if total > 0.0 { abs[..top].iter().sum::<f64>() / total } else { 0.0 },
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FdOptions {
    /// Defaults to `1e-3 / sup‖Z‖`.
    pub eps: Option<f64>,
    /// Combine steps `ε` and `ε/2` as `(4·d(ε/2) − d(ε))/3`.
    pub richardson: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct FdEstimate {
    pub value: Complex64,
    pub stderr_re: f64,
    pub stderr_im: f64,
    pub stderr: f64,
    pub eps: f64,
    pub richardson: bool,
    /// Rough bound on the floating-point cancellation error.
    pub rounding: f64,
    /// Set when `rounding` is not small against the Monte Carlo error.
    pub cancellation: bool,
    pub masked_fraction: f64,
}

/// `(F(X + εZ) − F(X − εZ))/(2ε)` on common random numbers: every path is
/// shifted by `εZ(t)` and its `𝒟` value by `εZ′(t)`.
pub fn directional_derivative_fd(
    ens: &PathEnsemble,
    dfield: &DerivativeField,
    lag: &dyn AdmissibleLagrangian,
    z: &VariationProcess,
    opts: &FdOptions,
) -> Result<FdEstimate> {
    check_first_field(ens, dfield, lag.dim())?;
    check_dim(lag.dim(), z.dim())?;
    let eps = match opts.eps {
        Some(e) => e,
        None => {
            let sup = z.sup_norm(ens.grid());
            if sup > 0.0 {
                1e-3 / sup
            } else {
                1e-3
            }
        }
    };
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::input(format!("finite-difference step must be positive, got {eps}")));
    }
    let d = lag.dim();
    let q = Quadrature::new(&dfield.times(), |s| dfield.valid_count(s) > 0)?;
    let slots = dfield.slots();
    let grid = ens.grid();
    let zs: Vec<(Vec<f64>, Vec<f64>)> = slots
        .iter()
        .map(|&m| (z.value(grid.time(m)), z.derivative(grid.time(m))))
        .collect();
    let quotient = |x: &[f64], v: &[Complex64], zv: &[f64], dz: &[f64], e: f64| {
        let shifted = |sign: f64, xs: &mut [f64], vs: &mut [Complex64]| {
            for k in 0..d {
                xs[k] = x[k] + sign * e * zv[k];
                vs[k] = v[k] + sign * e * dz[k];
            }
            lag.value(xs, vs)
        };
        let (plus, minus) = if d <= STACK_DIM {
            let mut xs = [0.0; STACK_DIM];
            let mut vs = [Complex64::new(0.0, 0.0); STACK_DIM];
            (shifted(1.0, &mut xs[..d], &mut vs[..d]), shifted(-1.0, &mut xs[..d], &mut vs[..d]))
        } else {
            let mut xs = vec![0.0; d];
            let mut vs = vec![Complex64::new(0.0, 0.0); d];
            (shifted(1.0, &mut xs, &mut vs), shifted(-1.0, &mut xs, &mut vs))
        };
        (plus - minus) / (2.0 * e)
    };
    let integral = integrate(&q, ens.n_paths(), 2, |s, p, out| {
        if !dfield.is_valid(s, p) {
            return false;
        }
        let x = ens.state(slots[s], p);
        let v = dfield.value(s, p);
        let (zv, dz) = &zs[s];
        let coarse = quotient(x, v, zv, dz, eps);
        out[0] = if opts.richardson {
            (4.0 * quotient(x, v, zv, dz, 0.5 * eps) - coarse) / 3.0
        } else {
            coarse
        };
        out[1] = Complex64::new(lag.value(x, v).norm(), 0.0);
        true
    })?;
    let stats = ComplexMean::from_samples(&integral.channel(0, 2));
    let amplification = if opts.richardson { 3.0 } else { 1.0 };
    let rounding = amplification * f64::EPSILON * integral.value[1].re / eps;
    let scale = stats.stderr().max(1e-8 * integral.value[1].re);
    Ok(FdEstimate {
        value: integral.value[0],
        stderr_re: stats.stderr_re,
        stderr_im: stats.stderr_im,
        stderr: stats.stderr(),
        eps,
        richardson: opts.richardson,
        rounding,
        cancellation: rounding > 0.1 * scale,
        masked_fraction: integral.masked as f64 / integral.entries as f64,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct FormulaEstimate {
    /// `E[∫ (∂_x L − 𝒟∂_v L)·Z dt]`
    pub bulk: Complex64,
    pub bulk_stderr: f64,
    /// `g(b) = E[Z_b·∂_v L(X_b, 𝒟X_b)]`
    pub boundary_end: Complex64,
    /// `g(a)`
    pub boundary_start: Complex64,
    /// `bulk + g(b) − g(a)`
    pub total: Complex64,
    pub stderr_re: f64,
    pub stderr_im: f64,
    /// Standard error of the per-path totals, in modulus.
    pub stderr: f64,
    /// Whether `𝒟X` at an end of the grid was taken from the nearest valid time.
    pub start_extrapolated: bool,
    pub end_extrapolated: bool,
    pub masked_fraction: f64,
}

/// Integration by parts of the directional derivative for a natural
/// Lagrangian, where `∂_v L = Q𝒟X` and `𝒟∂_v L = Q𝒟²X`. `second` is the
/// `𝒟²X` field over the same ensemble.
pub fn directional_derivative_formula(
    ens: &PathEnsemble,
    dfield: &DerivativeField,
    second: &DerivativeField,
    lag: &LagrangianSpec,
    z: &VariationProcess,
) -> Result<FormulaEstimate> {
    let d = lag.dim();
    check_first_field(ens, dfield, d)?;
    second.check_matches(ens)?;
    check_dim(d, z.dim())?;
    if second.operator() != Operator::Second {
        return Err(Error::input("the bulk term needs a 𝒟²X field"));
    }
    if z.class() != VariationClass::N1 {
        return Err(Error::input(format!("variation `{}` is not tagged N1", z.label())));
    }
    let grid = ens.grid();
    let n = ens.n_paths();

    // nodes where both fields are evaluated
    let pairs: Vec<(usize, usize)> = second
        .slots()
        .iter()
        .enumerate()
        .filter_map(|(s2, &m)| dfield.slot_of(m).map(|s1| (s1, s2)))
        .collect();
    let times: Vec<f64> = pairs.iter().map(|&(_, s2)| grid.time(second.slots()[s2])).collect();
    let joint = |k: usize, p: usize| dfield.is_valid(pairs[k].0, p) && second.is_valid(pairs[k].1, p);
    let q = Quadrature::new(&times, |k| (0..n).any(|p| joint(k, p)))?;
    let zs: Vec<Vec<f64>> = times.iter().map(|&t| z.value(t)).collect();
    let bulk = integrate(&q, n, 1, |k, p, out| {
        if !joint(k, p) {
            return false;
        }
        let m = second.slots()[pairs[k].1];
        let x = ens.state(m, p);
        let term = |accel: &mut [Complex64], grad: &mut [f64]| {
            lag.q.apply_into(second.value(pairs[k].1, p), accel);
            lag.potential.gradient_into(x, grad);
            (0..d).map(|j| (-grad[j] - accel[j]) * zs[k][j]).sum()
        };
        out[0] = if d <= STACK_DIM {
            term(&mut [ZERO; STACK_DIM][..d], &mut [0.0; STACK_DIM][..d])
        } else {
            term(&mut vec![ZERO; d], &mut vec![0.0; d])
        };
        true
    })?;

    // boundary terms from the nearest slot of the 𝒟X field with valid paths
    let used: Vec<usize> = (0..dfield.slots().len()).filter(|&s| dfield.valid_count(s) > 0).collect();
    if used.is_empty() {
        return Err(Error::Estimation("the 𝒟X field has no valid values".into()));
    }
    let first = used[0];
    let last = *used.last().unwrap();
    let boundary = |s: usize, t: f64| -> (Complex64, Vec<Option<Complex64>>) {
        let zt = z.value(t);
        let per: Vec<Option<Complex64>> = (0..n)
            .map(|p| {
                dfield.is_valid(s, p).then(|| {
                    let momentum = lag.q.apply(dfield.value(s, p));
                    (0..d).map(|j| momentum[j] * zt[j]).sum()
                })
            })
            .collect();
        let vals: Vec<Complex64> = per.iter().flatten().copied().collect();
        let mean = vals.iter().sum::<Complex64>() / vals.len() as f64;
        (mean, per)
    };
    let (g_a, per_a) = boundary(first, grid.start());
    let (g_b, per_b) = boundary(last, grid.end());
    let totals: Vec<Complex64> = (0..n)
        .map(|p| bulk.per_path[p] + per_b[p].unwrap_or(g_b) - per_a[p].unwrap_or(g_a))
        .collect();
    let stats = ComplexMean::from_samples(&totals);
    let bulk_stats = ComplexMean::from_samples(&bulk.per_path);
    Ok(FormulaEstimate {
        bulk: bulk.value[0],
        bulk_stderr: bulk_stats.stderr(),
        boundary_end: g_b,
        boundary_start: g_a,
        total: bulk.value[0] + g_b - g_a,
        stderr_re: stats.stderr_re,
        stderr_im: stats.stderr_im,
        stderr: stats.stderr(),
        start_extrapolated: dfield.slots()[first] != 0,
        end_extrapolated: dfield.slots()[last] != grid.steps(),
        masked_fraction: bulk.masked as f64 / bulk.entries as f64,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::diffusion::{simulate, DensityModel, DiffusionModel, InitialLaw, TimeGrid, TimeSelection};
    use crate::lagrangian::Potential;
    use crate::nelson::{
        analytic_complex_derivative, dirac_complex_derivative, dirac_second_derivative, regression_complex_derivative,
        second_derivative, EstimatorConfig,
    };
    use crate::variation::{classical_el_solve, VariationShape};

    fn free() -> LagrangianSpec {
        LagrangianSpec::natural(1, 1.0, Potential::Free)
    }

    fn harmonic() -> LagrangianSpec {
        LagrangianSpec::natural(1, 1.0, Potential::harmonic(1.0))
    }

    fn bm(n: usize, seed: u64) -> (DiffusionModel, DensityModel, PathEnsemble) {
        let model = DiffusionModel::brownian(1, 1.0, InitialLaw::brownian_at(vec![0.0], 1.0, 1.0)).unwrap();
        let ens = simulate(&model, &TimeGrid::new(1.0, 2.0, 500).unwrap(), n, seed).unwrap();
        let dm = DensityModel::analytic_gaussian(&model, 1.0).unwrap();
        (model, dm, ens)
    }

    fn shape(s: VariationShape, a: f64, b: f64) -> VariationProcess {
        VariationProcess::from_shape(&s, a, b).unwrap()
    }

    fn embed(grid: TimeGrid, x: impl Fn(f64) -> f64) -> PathEnsemble {
        PathEnsemble::from_fn(grid, 1, 1, |t, _, s| s[0] = x(t)).unwrap()
    }

    #[test]
    fn constant_process_action_is_exact() {
        let grid = TimeGrid::new(0.0, 2.0, 100).unwrap();
        let ens = embed(grid, |_| 1.5);
        let f = dirac_complex_derivative(&ens, &TimeSelection::All).unwrap();
        let est = action(&ens, &f, &harmonic()).unwrap();
        assert_eq!(est.value, Complex64::new(-0.5 * 1.5 * 1.5 * 2.0, 0.0));
        assert_eq!(est.mc_stderr, 0.0);
        assert!(!est.unreliable && est.integrable);

        // the regression route gives 𝒟X = 0 exactly as well, over the interior
        let ens = PathEnsemble::from_fn(grid, 200, 1, |_, _, s| s[0] = 1.5).unwrap();
        let f = regression_complex_derivative(&ens, &EstimatorConfig::default()).unwrap();
        let est = action(&ens, &f, &harmonic()).unwrap();
        assert_eq!(est.value.im, 0.0);
        assert!((est.value.re + 1.125 * (est.t_end - est.t_start)).abs() < 1e-12);
    }

    #[test]
    fn classical_action_of_harmonic_solution() {
        let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let traj = classical_el_solve(&harmonic(), &[1.0], &[0.0], &grid).unwrap();
        let ens = traj.to_ensemble().unwrap();
        let f = dirac_complex_derivative(&ens, &TimeSelection::All).unwrap();
        let est = action(&ens, &f, &harmonic()).unwrap();
        // L = ½sin²t − ½cos²t = −½cos 2t
        assert!((est.value.re + 2f64.sin() / 4.0).abs() <= 1e-6, "{}", est.value);
        assert_eq!(est.value.im, 0.0);
    }

    #[test]
    fn free_particle_action_under_brownian_motion() {
        let (model, dm, ens) = bm(20_000, 5);
        let f = analytic_complex_derivative(&model, &dm, &ens, &EstimatorConfig::default()).unwrap();
        let est = action(&ens, &f, &free()).unwrap();
        let target = -2f64.ln() / 4.0;
        assert!(est.value.re.abs() <= 3.0 * est.stderr_re);
        assert!((est.value.im - target).abs() <= 0.05 * target.abs(), "{est:?}");
        assert_eq!(est.masked_fraction, 0.0);
    }

    #[test]
    fn heavily_masked_fields_are_flagged() {
        let (model, dm, ens) = bm(2000, 6);
        let f = analytic_complex_derivative(&model, &dm, &ens, &EstimatorConfig::default()).unwrap();
        // hide 30% of the paths at every time
        let parts = (0..f.slots().len())
            .map(|s| (f.slot_values(s).to_vec(), (0..f.n_paths()).map(|p| p % 10 >= 3).collect()))
            .collect();
        let g = DerivativeField::assemble(*f.grid(), f.slots().to_vec(), f.n_paths(), 1, parts, Operator::Complex, f.method());
        let est = action(&ens, &g, &free()).unwrap();
        assert!(est.unreliable && (est.masked_fraction - 0.3).abs() < 1e-12);
    }

    #[test]
    fn zero_direction_gives_exact_zero() {
        let (model, dm, ens) = bm(1000, 7);
        let f = analytic_complex_derivative(&model, &dm, &ens, &EstimatorConfig::default()).unwrap();
        let est = directional_derivative_fd(&ens, &f, &harmonic(), &VariationProcess::zero(1).unwrap(), &FdOptions::default()).unwrap();
        assert_eq!(est.value, Complex64::new(0.0, 0.0));
        assert!(!est.cancellation);
    }

    #[test]
    fn classical_solution_is_stationary() {
        let grid = TimeGrid::new(0.0, PI, 1000).unwrap();
        let traj = classical_el_solve(&harmonic(), &[1.0], &[0.3], &grid).unwrap();
        let ens = traj.to_ensemble().unwrap();
        let f = dirac_complex_derivative(&ens, &TimeSelection::All).unwrap();
        for s in [
            VariationShape::Sine { amplitude: vec![2.0], harmonic: 1 },
            VariationShape::Bump { amplitude: vec![-1.0] },
            VariationShape::Sine { amplitude: vec![0.5], harmonic: 3 },
        ] {
            let z = shape(s, 0.0, PI);
            let norm = z.sup_norm(&grid);
            for richardson in [false, true] {
                let est = directional_derivative_fd(&ens, &f, &harmonic(), &z, &FdOptions { eps: None, richardson }).unwrap();
                assert!(est.value.norm() <= 1e-4 * norm, "{est:?}");
                assert!(!est.cancellation);
            }
        }
    }

    #[test]
    fn tiny_steps_are_flagged_as_cancellation() {
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let ens = embed(grid, |t| 1.0 + t);
        let f = dirac_complex_derivative(&ens, &TimeSelection::All).unwrap();
        let z = shape(VariationShape::Ramp { amplitude: vec![1.0] }, 0.0, 1.0);
        let opts = FdOptions { eps: Some(1e-13), richardson: false };
        assert!(directional_derivative_fd(&ens, &f, &harmonic(), &z, &opts).unwrap().cancellation);
        assert!(directional_derivative_fd(&ens, &f, &harmonic(), &z, &FdOptions { eps: Some(0.0), ..opts }).is_err());
    }

    #[test]
    fn classical_first_variation_of_a_non_solution() {
        // x(t) = t on [0, 1] under the harmonic Lagrangian, Z(t) = t:
        // ∫(−x − x″)Z dt + [x′Z] = −1/3 + 1
        let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let ens = embed(grid, |t| t);
        let f = dirac_complex_derivative(&ens, &TimeSelection::All).unwrap();
        let a = dirac_second_derivative(&ens, &TimeSelection::All).unwrap();
        let z = shape(VariationShape::Ramp { amplitude: vec![1.0] }, 0.0, 1.0);
        let est = directional_derivative_formula(&ens, &f, &a, &harmonic(), &z).unwrap();
        assert!((est.total.re - 2.0 / 3.0).abs() <= 1e-4, "{est:?}");
        assert_eq!(est.total.im, 0.0);
        assert!((est.boundary_end.re - 1.0).abs() < 1e-9 && est.boundary_start.re.abs() < 1e-12);
        let fd = directional_derivative_fd(&ens, &f, &harmonic(), &z, &FdOptions::default()).unwrap();
        assert!((fd.value.re - 2.0 / 3.0).abs() <= 1e-4);
    }

    #[test]
    fn vanishing_variation_has_no_boundary_terms() {
        let (model, dm, ens) = bm(2000, 8);
        let cfg = EstimatorConfig::default();
        let f = analytic_complex_derivative(&model, &dm, &ens, &cfg).unwrap();
        let a = second_derivative(&model, &dm, &ens, &cfg).unwrap();
        let z = shape(VariationShape::Sine { amplitude: vec![1.0], harmonic: 2 }, 1.0, 2.0);
        let est = directional_derivative_formula(&ens, &f, &a, &harmonic(), &z).unwrap();
        assert_eq!(est.boundary_end, Complex64::new(0.0, 0.0));
        assert_eq!(est.boundary_start, Complex64::new(0.0, 0.0));
        assert_eq!(est.total, est.bulk);
        assert!(!est.start_extrapolated && !est.end_extrapolated);
    }

    #[test]
    fn formula_rejects_c1_tags_and_wrong_fields() {
        let (model, dm, ens) = bm(500, 9);
        let cfg = EstimatorConfig::default();
        let f = analytic_complex_derivative(&model, &dm, &ens, &cfg).unwrap();
        let a = second_derivative(&model, &dm, &ens, &cfg).unwrap();
        let z = shape(VariationShape::Ramp { amplitude: vec![1.0] }, 1.0, 2.0);
        let c1 = z.clone().with_class(VariationClass::C1);
        assert!(directional_derivative_formula(&ens, &f, &a, &free(), &c1).is_err());
        assert!(directional_derivative_formula(&ens, &f, &f, &free(), &z).is_err());
        assert!(directional_derivative_formula(&ens, &a, &a, &free(), &z).is_err());
    }

    #[test]
    fn constant_variation_matches_closed_form_and_fd() {
        // bulk = −c∫E[𝒟²W]dt = 0 in mean; boundary = c·E[𝒟W_b − 𝒟W_a]
        let (model, dm, ens) = bm(20_000, 10);
        let cfg = EstimatorConfig::default();
        let f = analytic_complex_derivative(&model, &dm, &ens, &cfg).unwrap();
        let a = second_derivative(&model, &dm, &ens, &cfg).unwrap();
        let z = shape(VariationShape::Constant { value: vec![0.8] }, 1.0, 2.0);
        let form = directional_derivative_formula(&ens, &f, &a, &free(), &z).unwrap();
        let fd = directional_derivative_fd(&ens, &f, &free(), &z, &FdOptions::default()).unwrap();
        // for the free particle Z′ = 0 gives an FD value of exactly zero
        assert_eq!(fd.value, Complex64::new(0.0, 0.0));
        assert!((form.total - fd.value).norm() <= 3.0 * form.stderr.hypot(fd.stderr), "{form:?}");
        let mean_w = |m: usize| ens.slice(m).iter().sum::<f64>() / ens.n_paths() as f64;
        let grid = ens.grid();
        let expected_b = 0.8 * Complex64::new(1.0, -1.0) * mean_w(grid.steps()) / 4.0;
        assert!((form.boundary_end - expected_b).norm() < 1e-12);
        let expected_a = 0.8 * Complex64::new(1.0, -1.0) * mean_w(0) / 2.0;
        assert!((form.boundary_start - expected_a).norm() < 1e-12);
    }

    #[test]
    fn formula_and_fd_agree_on_brownian_motion() {
        let (model, dm, ens) = bm(20_000, 11);
        let cfg = EstimatorConfig::default();
        let f = analytic_complex_derivative(&model, &dm, &ens, &cfg).unwrap();
        let a = second_derivative(&model, &dm, &ens, &cfg).unwrap();
        for lag in [free(), harmonic()] {
            for s in [
                VariationShape::Sine { amplitude: vec![1.0], harmonic: 1 },
                VariationShape::Ramp { amplitude: vec![1.0] },
                VariationShape::Cosine { amplitude: vec![1.0], harmonic: 1 },
            ] {
                let z = shape(s.clone(), 1.0, 2.0);
                let form = directional_derivative_formula(&ens, &f, &a, &lag, &z).unwrap();
                let fd = directional_derivative_fd(&ens, &f, &lag, &z, &FdOptions::default()).unwrap();
                let se = form.stderr.hypot(fd.stderr);
                assert!((form.total - fd.value).norm() <= 3.0 * se.max(1e-6), "{s:?}: {form:?} vs {fd:?}");
            }
        }
    }

    #[test]
    fn endpoints_are_extrapolated_for_regression_fields() {
        let (_, _, ens) = bm(2000, 12);
        let cfg = EstimatorConfig::default().with_step(5);
        let f = regression_complex_derivative(&ens, &cfg).unwrap();
        let a = f.map(Operator::Second, |_, _, _, out| out.fill(Complex64::new(0.0, 0.0)));
        let z = shape(VariationShape::Constant { value: vec![1.0] }, 1.0, 2.0);
        let est = directional_derivative_formula(&ens, &f, &a, &free(), &z).unwrap();
        assert!(est.start_extrapolated && est.end_extrapolated);
        let act = action(&ens, &f, &free()).unwrap();
        assert!(act.t_start > 1.0 && act.t_end < 2.0);
    }
}
