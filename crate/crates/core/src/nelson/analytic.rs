use num_complex::Complex64;
use rayon::prelude::*;

use super::estimators::{regress_complex_process, regression_complex_derivative};
use super::field::SlotData;
use super::{DerivativeField, EstimatorConfig, Method, Operator};
use crate::diffusion::{DensityKind, DensityModel, DiffusionModel, Drift, GaussianFamily, PathEnsemble, TimeSelection};
use crate::error::check_dim;
use crate::{linalg, Error, Result};

const NAN: Complex64 = Complex64::new(f64::NAN, f64::NAN);

/// A (possibly complex-valued) function `f(t, x)` with the partial
/// derivatives needed by the function rule.
pub trait SmoothFunction: Send + Sync {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    fn value(&self, t: f64, x: &[f64], out: &mut [Complex64]);
    fn time_derivative(&self, t: f64, x: &[f64], out: &mut [Complex64]);
    /// `∂f_j/∂x_k`, row-major `dim_out × dim_in`.
    fn jacobian(&self, t: f64, x: &[f64], out: &mut [Complex64]);
    /// `∂²f_j/∂x_k∂x_l`, laid out `[j][k][l]`. Returns `false` when the
    /// function does not provide them.
    fn second_partials(&self, t: f64, x: &[f64], out: &mut [Complex64]) -> bool;
}

/// `f(x) = A x + c` with complex coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    dim_in: usize,
    dim_out: usize,
    matrix: Vec<Complex64>,
    offset: Vec<Complex64>,
}

impl AffineMap {
    pub fn new(dim_out: usize, dim_in: usize, matrix: Vec<Complex64>, offset: Vec<Complex64>) -> Result<Self> {
        check_dim(dim_out * dim_in, matrix.len())?;
        check_dim(dim_out, offset.len())?;
        Ok(AffineMap {
            dim_in,
            dim_out,
            matrix,
            offset,
        })
    }

    pub fn real(dim_out: usize, dim_in: usize, matrix: &[f64], offset: &[f64]) -> Result<Self> {
        Self::new(
            dim_out,
            dim_in,
            matrix.iter().map(|v| Complex64::new(*v, 0.0)).collect(),
            offset.iter().map(|v| Complex64::new(*v, 0.0)).collect(),
        )
    }

    /// `f(x) = c·x`.
    pub fn scaled(dim: usize, c: Complex64) -> Self {
        let mut matrix = vec![Complex64::new(0.0, 0.0); dim * dim];
        for k in 0..dim {
            matrix[k * dim + k] = c;
        }
        AffineMap {
            dim_in: dim,
            dim_out: dim,
            matrix,
            offset: vec![Complex64::new(0.0, 0.0); dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled(dim, Complex64::new(1.0, 0.0))
    }
}

impl SmoothFunction for AffineMap {
    fn dim_in(&self) -> usize {
        self.dim_in
    }

    fn dim_out(&self) -> usize {
        self.dim_out
    }

    fn value(&self, _t: f64, x: &[f64], out: &mut [Complex64]) {
        for j in 0..self.dim_out {
            let row = &self.matrix[j * self.dim_in..(j + 1) * self.dim_in];
            out[j] = self.offset[j] + row.iter().zip(x).map(|(a, v)| a * v).sum::<Complex64>();
        }
    }

    fn time_derivative(&self, _t: f64, _x: &[f64], out: &mut [Complex64]) {
        out[..self.dim_out].fill(Complex64::new(0.0, 0.0));
    }

    fn jacobian(&self, _t: f64, _x: &[f64], out: &mut [Complex64]) {
        out[..self.matrix.len()].copy_from_slice(&self.matrix);
    }

    fn second_partials(&self, _t: f64, _x: &[f64], out: &mut [Complex64]) -> bool {
        out[..self.dim_out * self.dim_in * self.dim_in].fill(Complex64::new(0.0, 0.0));
        true
    }
}

/// The analytic `𝒟X` of a linear-Gaussian diffusion as a function of `(t, x)`:
/// `f(t, x) = −ω(x − c) + ½(1 − i) K(t)(x − μ(t))` with `K = aΣ⁻¹`.
#[derive(Clone, Debug)]
pub struct GaussianVelocity {
    family: GaussianFamily,
}

/// Time-dependent coefficients of [`GaussianVelocity`] at one instant.
struct VelocityAt {
    k: Vec<f64>,
    dk: Vec<f64>,
    mean: Vec<f64>,
    dmean: Vec<f64>,
}

impl GaussianVelocity {
    pub fn new(family: GaussianFamily) -> Self {
        GaussianVelocity { family }
    }

    pub fn from_density(dm: &DensityModel) -> Result<Self> {
        dm.gaussian()
            .cloned()
            .map(Self::new)
            .ok_or_else(|| Error::Capability("closed-form 𝒟X needs an analytic Gaussian density".into()))
    }

    fn at(&self, t: f64) -> Option<VelocityAt> {
        let marg = self.family.marginal(t);
        let d = marg.mean.len();
        let p = marg.precision.as_ref()?;
        let a = self.family.diffusion();
        let k = linalg::matmul(d, a, p);
        // K' = −a P Σ' P
        let dk: Vec<f64> = linalg::matmul(d, &k, &linalg::matmul(d, &marg.dcov, p)).iter().map(|v| -v).collect();
        Some(VelocityAt {
            k,
            dk,
            mean: marg.mean,
            dmean: marg.dmean,
        })
    }

    fn eval_with(&self, c: &VelocityAt, x: &[f64], value: &mut [Complex64], dt: &mut [Complex64]) {
        let d = x.len();
        let w = self.family.rate();
        let center = self.family.center();
        let half = Complex64::new(0.5, -0.5);
        for j in 0..d {
            let kx: f64 = (0..d).map(|l| c.k[j * d + l] * (x[l] - c.mean[l])).sum();
            value[j] = Complex64::new(-w * (x[j] - center[j]), 0.0) + half * kx;
            let dkx: f64 = (0..d)
                .map(|l| c.dk[j * d + l] * (x[l] - c.mean[l]) - c.k[j * d + l] * c.dmean[l])
                .sum();
            dt[j] = half * dkx;
        }
    }

    fn jacobian_with(&self, c: &VelocityAt, out: &mut [Complex64]) {
        let d = c.mean.len();
        let half = Complex64::new(0.5, -0.5);
        for j in 0..d {
            for l in 0..d {
                let diag = if j == l { -self.family.rate() } else { 0.0 };
                out[j * d + l] = Complex64::new(diag, 0.0) + half * c.k[j * d + l];
            }
        }
    }
}

impl SmoothFunction for GaussianVelocity {
    fn dim_in(&self) -> usize {
        self.family.center().len()
    }

    fn dim_out(&self) -> usize {
        self.dim_in()
    }

    fn value(&self, t: f64, x: &[f64], out: &mut [Complex64]) {
        match self.at(t) {
            Some(c) => {
                let mut dt = vec![Complex64::new(0.0, 0.0); x.len()];
                self.eval_with(&c, x, out, &mut dt);
            }
            None => out[..x.len()].fill(NAN),
        }
    }

    fn time_derivative(&self, t: f64, x: &[f64], out: &mut [Complex64]) {
        match self.at(t) {
            Some(c) => {
                let mut v = vec![Complex64::new(0.0, 0.0); x.len()];
                self.eval_with(&c, x, &mut v, out);
            }
            None => out[..x.len()].fill(NAN),
        }
    }

    fn jacobian(&self, t: f64, x: &[f64], out: &mut [Complex64]) {
        match self.at(t) {
            Some(c) => self.jacobian_with(&c, out),
            None => out[..x.len() * x.len()].fill(NAN),
        }
    }

    fn second_partials(&self, _t: f64, x: &[f64], out: &mut [Complex64]) -> bool {
        let d = x.len();
        out[..d * d * d].fill(Complex64::new(0.0, 0.0));
        true
    }
}

/// Density-formula `𝒟X`:
/// `𝒟X = b − u/2 + i u/2` with `u = (1/p)∂_j(a^{·j}p) = div a + a∇log p`,
/// evaluated at each `(t, X_t)`. With the dirac density (σ = 0) it is `b`.
pub fn analytic_complex_derivative(
    model: &DiffusionModel,
    dm: &DensityModel,
    ens: &PathEnsemble,
    cfg: &EstimatorConfig,
) -> Result<DerivativeField> {
    let d = ens.dim();
    check_dim(model.dim(), d)?;
    check_dim(dm.dim(), d)?;
    if dm.is_dirac() && !model.is_deterministic() {
        return Err(Error::input("the dirac density describes σ = 0 processes only"));
    }
    let slots = cfg.times.resolve(ens.grid())?;
    let n = ens.n_paths();
    let parts = slots
        .par_iter()
        .map(|&m| analytic_slot(model, dm, ens, m, cfg.mask_low_density))
        .collect::<Result<Vec<_>>>()?;
    Ok(DerivativeField::assemble(*ens.grid(), slots, n, d, parts, Operator::Complex, Method::Analytic))
}

fn analytic_slot(model: &DiffusionModel, dm: &DensityModel, ens: &PathEnsemble, m: usize, mask: bool) -> Result<SlotData> {
    let d = ens.dim();
    let n = ens.n_paths();
    let t = ens.grid().time(m);
    let mut values = vec![NAN; n * d];
    let mut valid = vec![false; n];
    let mut b = vec![0.0; d];
    let mut a = vec![0.0; d * d];
    let mut div_a = vec![0.0; d];
    let mut score = vec![0.0; d];
    let marginal = dm.gaussian().map(|g| g.marginal(t));
    let kde = match dm.kind() {
        DensityKind::Kernel { .. } => Some(
            dm.kernel_at(m)
                .ok_or_else(|| Error::input(format!("no kernel density fitted at t = {t}")))?,
        ),
        _ => None,
    };
    for p in 0..n {
        let x = ens.state(m, p);
        model.drift_into(t, x, &mut b);
        let out = &mut values[p * d..(p + 1) * d];
        if dm.is_dirac() {
            for k in 0..d {
                out[k] = Complex64::new(b[k], 0.0);
            }
            valid[p] = true;
            continue;
        }
        if let Some(marg) = &marginal {
            if marg.precision.is_none() || (mask && marg.is_low_density(x)) {
                continue;
            }
            marg.score_into(x, &mut score);
        } else if let Some(kde) = kde {
            let (pv, grad) = kde.eval(x);
            if !(pv > 0.0) || (mask && kde.is_low_density(pv)) {
                continue;
            }
            for k in 0..d {
                score[k] = grad[k] / pv;
            }
        }
        model.diffusion_matrix_into(t, x, &mut a);
        model.dispersion().divergence_into(d, t, x, &mut div_a);
        for k in 0..d {
            let u = div_a[k] + (0..d).map(|j| a[k * d + j] * score[j]).sum::<f64>();
            out[k] = Complex64::new(b[k] - 0.5 * u, 0.5 * u);
        }
        valid[p] = true;
    }
    Ok((values, valid))
}

/// Function rule. For a `𝒟X` field:
/// `𝒟f = ∂_t f + J_f·𝒟X + (i/2) a^{kl}∂_{kl}f`; for a `𝒟̄X` field:
/// `𝒟̄f = ∂_t f + J_f·𝒟̄X − (i/2) a^{kl}∂_{kl}f`.
pub fn derivative_of_function(
    f: &dyn SmoothFunction,
    dfield: &DerivativeField,
    model: &DiffusionModel,
    ens: &PathEnsemble,
) -> Result<DerivativeField> {
    dfield.check_matches(ens)?;
    let d = ens.dim();
    check_dim(d, f.dim_in())?;
    check_dim(d, model.dim())?;
    let sign = match dfield.operator() {
        Operator::Complex => 1.0,
        Operator::Conjugate => -1.0,
        _ => return Err(Error::input("derivative_of_function needs a 𝒟X or 𝒟̄X field")),
    };
    let q = f.dim_out();
    let n = ens.n_paths();
    let parts = dfield
        .slots()
        .par_iter()
        .enumerate()
        .map(|(s, &m)| {
            let t = ens.grid().time(m);
            let mut values = vec![NAN; n * q];
            let mut valid = dfield.slot_valid(s).to_vec();
            let mut dt = vec![Complex64::new(0.0, 0.0); q];
            let mut jac = vec![Complex64::new(0.0, 0.0); q * d];
            let mut hess = vec![Complex64::new(0.0, 0.0); q * d * d];
            let mut a = vec![0.0; d * d];
            for p in 0..n {
                if !valid[p] {
                    continue;
                }
                let x = ens.state(m, p);
                let v = dfield.value(s, p);
                f.time_derivative(t, x, &mut dt);
                f.jacobian(t, x, &mut jac);
                model.diffusion_matrix_into(t, x, &mut a);
                let noisy = a.iter().any(|v| *v != 0.0);
                if noisy && !f.second_partials(t, x, &mut hess) {
                    return Err(Error::input("function rule needs second partials when the diffusion matrix is nonzero"));
                }
                let out = &mut values[p * q..(p + 1) * q];
                for j in 0..q {
                    let mut acc = dt[j] + (0..d).map(|k| jac[j * d + k] * v[k]).sum::<Complex64>();
                    if noisy {
                        let trace: Complex64 = (0..d * d).map(|kl| hess[j * d * d + kl] * a[kl]).sum();
                        acc += Complex64::new(0.0, 0.5 * sign) * trace;
                    }
                    out[j] = acc;
                }
                valid[p] = out.iter().all(|z| z.re.is_finite() && z.im.is_finite());
            }
            Ok((values, valid))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DerivativeField::assemble(
        *ens.grid(),
        dfield.slots().to_vec(),
        n,
        q,
        parts,
        Operator::Function,
        dfield.method(),
    ))
}

/// `𝒟²X`. Routes, in order of preference:
/// - analytic Gaussian density: the function rule applied to the closed-form
///   `𝒟X = f(t, x)`;
/// - dirac density: the classical second difference along each path;
/// - otherwise nested regression, when `cfg.nested_regression` opts in.
pub fn second_derivative(
    model: &DiffusionModel,
    dm: &DensityModel,
    ens: &PathEnsemble,
    cfg: &EstimatorConfig,
) -> Result<DerivativeField> {
    second_with(model, dm, ens, cfg, false)
}

/// `𝒟̄𝒟X`, by the same routes as [`second_derivative`]. On the dirac branch it
/// coincides with `𝒟²X`.
pub fn conjugate_second_derivative(
    model: &DiffusionModel,
    dm: &DensityModel,
    ens: &PathEnsemble,
    cfg: &EstimatorConfig,
) -> Result<DerivativeField> {
    second_with(model, dm, ens, cfg, true)
}

fn second_with(
    model: &DiffusionModel,
    dm: &DensityModel,
    ens: &PathEnsemble,
    cfg: &EstimatorConfig,
    conjugate: bool,
) -> Result<DerivativeField> {
    check_dim(model.dim(), ens.dim())?;
    check_dim(dm.dim(), ens.dim())?;
    match dm.kind() {
        DensityKind::Gaussian(family) => {
            match model.drift() {
                Drift::Relaxation { rate, center } if *rate == family.rate() && center == family.center() => {}
                _ => {
                    return Err(Error::Capability(
                        "analytic 𝒟² needs the linear drift the Gaussian density was built from".into(),
                    ))
                }
            }
            gaussian_second(&GaussianVelocity::new(family.clone()), ens, cfg, conjugate)
        }
        DensityKind::Dirac => {
            if !model.is_deterministic() {
                return Err(Error::input("the dirac density describes σ = 0 processes only"));
            }
            let field = dirac_second_derivative(ens, &cfg.times)?;
            Ok(if conjugate { field.map(Operator::ConjugateSecond, |_, _, v, out| out.copy_from_slice(v)) } else { field })
        }
        DensityKind::Kernel { .. } if cfg.nested_regression => nested_second(ens, cfg, conjugate),
        DensityKind::Kernel { .. } => Err(Error::Capability(
            "𝒟² has no closed form for a kernel density; enable nested regression to estimate it".into(),
        )),
    }
}

fn second_operator(conjugate: bool) -> Operator {
    if conjugate {
        Operator::ConjugateSecond
    } else {
        Operator::Second
    }
}

fn gaussian_second(vel: &GaussianVelocity, ens: &PathEnsemble, cfg: &EstimatorConfig, conjugate: bool) -> Result<DerivativeField> {
    let d = ens.dim();
    let n = ens.n_paths();
    let slots = cfg.times.resolve(ens.grid())?;
    let parts = slots
        .par_iter()
        .map(|&m| {
            let t = ens.grid().time(m);
            let mut values = vec![NAN; n * d];
            let mut valid = vec![false; n];
            let Some(c) = vel.at(t) else {
                return (values, valid);
            };
            let marg = vel.family.marginal(t);
            let mut jac = vec![Complex64::new(0.0, 0.0); d * d];
            vel.jacobian_with(&c, &mut jac);
            let mut v = vec![Complex64::new(0.0, 0.0); d];
            let mut dt = vec![Complex64::new(0.0, 0.0); d];
            for p in 0..n {
                let x = ens.state(m, p);
                if cfg.mask_low_density && marg.is_low_density(x) {
                    continue;
                }
                vel.eval_with(&c, x, &mut v, &mut dt);
                if conjugate {
                    // 𝒟̄X = conj(𝒟X) for real states; the field has no curvature
                    v.iter_mut().for_each(|z| *z = z.conj());
                }
                for j in 0..d {
                    values[p * d + j] = dt[j] + (0..d).map(|k| jac[j * d + k] * v[k]).sum::<Complex64>();
                }
                valid[p] = true;
            }
            (values, valid)
        })
        .collect();
    Ok(DerivativeField::assemble(*ens.grid(), slots, n, d, parts, second_operator(conjugate), Method::Analytic))
}

fn nested_second(ens: &PathEnsemble, cfg: &EstimatorConfig, conjugate: bool) -> Result<DerivativeField> {
    cfg.validate(ens.grid())?;
    let slots = cfg.times.resolve(ens.grid())?;
    let s = cfg.step;
    let mut needed: Vec<usize> = slots
        .iter()
        .flat_map(|&m| [m.checked_sub(s), Some(m), Some(m + s)])
        .flatten()
        .filter(|&m| m <= ens.grid().steps())
        .collect();
    needed.sort_unstable();
    needed.dedup();
    let inner = regression_complex_derivative(ens, &cfg.clone().with_times(TimeSelection::Indices(needed)))?;
    let d = ens.dim();
    let parts = slots
        .par_iter()
        .map(|&m| {
            regress_complex_process(ens, cfg, m, d, conjugate, |j, p| {
                let slot = inner.slot_of(j)?;
                inner.is_valid(slot, p).then(|| inner.value(slot, p).to_vec())
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DerivativeField::assemble(*ens.grid(), slots, ens.n_paths(), d, parts, second_operator(conjugate), Method::NestedRegression)
        .with_warning("nested regression: smoothing and O(h) biases compound across the two levels"))
}

/// Classical velocity of a path at grid index `m`: central difference in the
/// interior, second-order one-sided stencils at the two ends.
pub(crate) fn path_velocity(series: impl Fn(usize) -> f64, m: usize, steps: usize, dt: f64) -> f64 {
    if m == 0 {
        (-3.0 * series(0) + 4.0 * series(1) - series(2)) / (2.0 * dt)
    } else if m == steps {
        (3.0 * series(steps) - 4.0 * series(steps - 1) + series(steps - 2)) / (2.0 * dt)
    } else {
        (series(m + 1) - series(m - 1)) / (2.0 * dt)
    }
}

/// Classical acceleration at grid index `m`. Interior points use the compact
/// stencil evaluated as a difference of forward quotients,
/// `((x_{m+1} − x_m)/Δt − (x_m − x_{m−1})/Δt)/Δt`; the ends use second-order
/// one-sided stencils (three-point when the grid has only two steps).
pub(crate) fn path_acceleration(series: impl Fn(usize) -> f64, m: usize, steps: usize, dt: f64) -> f64 {
    let one_sided = |i: &dyn Fn(usize) -> usize| {
        if steps >= 3 {
            (2.0 * series(i(0)) - 5.0 * series(i(1)) + 4.0 * series(i(2)) - series(i(3))) / (dt * dt)
        } else {
            (series(i(0)) - 2.0 * series(i(1)) + series(i(2))) / (dt * dt)
        }
    };
    if m == 0 {
        one_sided(&|k| k)
    } else if m == steps {
        one_sided(&|k| steps - k)
    } else {
        let ahead = (series(m + 1) - series(m)) / dt;
        let behind = (series(m) - series(m - 1)) / dt;
        (ahead - behind) / dt
    }
}

fn path_difference_field(
    ens: &PathEnsemble,
    times: &TimeSelection,
    operator: Operator,
    stencil: fn(&dyn Fn(usize) -> f64, usize, usize, f64) -> f64,
) -> Result<DerivativeField> {
    let grid = *ens.grid();
    let slots = times.resolve(&grid)?;
    let (n, d) = (ens.n_paths(), ens.dim());
    let parts = slots
        .iter()
        .map(|&m| {
            let mut values = vec![Complex64::new(0.0, 0.0); n * d];
            for p in 0..n {
                for k in 0..d {
                    let series = |j: usize| ens.state(j, p)[k];
                    values[p * d + k] = Complex64::new(stencil(&series, m, grid.steps(), grid.dt()), 0.0);
                }
            }
            (values, vec![true; n])
        })
        .collect();
    Ok(DerivativeField::assemble(grid, slots, n, d, parts, operator, Method::PathDifference))
}

/// `𝒟X` of a σ = 0 ensemble: `D = D₊ = x′`, so the field is the classical
/// velocity with an imaginary part of exactly zero.
pub fn dirac_complex_derivative(ens: &PathEnsemble, times: &TimeSelection) -> Result<DerivativeField> {
    path_difference_field(ens, times, Operator::Complex, |s, m, steps, dt| path_velocity(s, m, steps, dt))
}

/// `𝒟²X = x″` of a σ = 0 ensemble, imaginary part exactly zero.
pub fn dirac_second_derivative(ens: &PathEnsemble, times: &TimeSelection) -> Result<DerivativeField> {
    path_difference_field(ens, times, Operator::Second, |s, m, steps, dt| path_acceleration(s, m, steps, dt))
}
