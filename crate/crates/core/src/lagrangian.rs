//! Natural Lagrangians `L(x, v) = q(v) − U(x)`.
//!
//! Positions are real, velocities complex. The quadratic form is extended to
//! complex velocities holomorphically, i.e. `q(v) = ½ vᵀQv` without
//! conjugation, so `L` is real whenever `v` is real and `∂_v L = Qv` is
//! complex-linear.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use serde::Serialize;

use crate::error::check_dim;
use crate::{linalg, Error, Result};

/// Symmetric coefficient table `Q` of the kinetic term.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticForm {
    dim: usize,
    coeffs: Vec<f64>,
}

impl QuadraticForm {
    pub fn new(dim: usize, coeffs: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("quadratic form dimension must be positive"));
        }
        check_dim(dim * dim, coeffs.len())?;
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::input("quadratic form has non-finite coefficients"));
        }
        if !linalg::is_symmetric(dim, &coeffs) {
            return Err(Error::input("quadratic form must be symmetric"));
        }
        Ok(QuadraticForm { dim, coeffs })
    }

    /// `q(v) = (m/2)|v|²`.
    pub fn scaled_identity(dim: usize, mass: f64) -> Self {
        let mut coeffs = vec![0.0; dim * dim];
        for k in 0..dim {
            coeffs[k * dim + k] = mass;
        }
        QuadraticForm { dim, coeffs }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// `½ vᵀQv`, no conjugation.
    pub fn eval(&self, v: &[Complex64]) -> Complex64 {
        let d = self.dim;
        let mut acc = Complex64::new(0.0, 0.0);
        for k in 0..d {
            let mut row = Complex64::new(0.0, 0.0);
            for j in 0..d {
                row += v[j] * self.coeffs[k * d + j];
            }
            acc += v[k] * row;
        }
        acc * 0.5
    }

    /// `out = Qv`.
    pub fn apply_into(&self, v: &[Complex64], out: &mut [Complex64]) {
        let d = self.dim;
        for k in 0..d {
            let mut s = Complex64::new(0.0, 0.0);
            for j in 0..d {
                s += v[j] * self.coeffs[k * d + j];
            }
            out[k] = s;
        }
    }

    pub fn apply(&self, v: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.dim];
        self.apply_into(v, &mut out);
        out
    }

    pub fn inverse(&self) -> Result<Vec<f64>> {
        linalg::inverse(self.dim, &self.coeffs)
            .map_err(|_| Error::input("quadratic form Q is not invertible"))
    }
}

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Smoothness {
    C1,
    C2,
}

/// Radially tabulated potential `U(|x|)` on a uniform radius grid, with a
/// C¹ cubic Hermite interpolant (`U'(0) = 0` so the gradient is continuous
/// at the origin).
#[derive(Clone, Debug, PartialEq)]
pub struct RadialTable {
    r_max: f64,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl RadialTable {
    pub fn new(r_max: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() < 3 || !(r_max > 0.0) {
            return Err(Error::input(
                "tabulated potential needs at least 3 samples and r_max > 0",
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("tabulated potential has non-finite samples"));
        }
        let n = values.len();
        let h = r_max / (n - 1) as f64;
        let mut slopes = vec![0.0; n];
        for i in 1..n - 1 {
            slopes[i] = (values[i + 1] - values[i - 1]) / (2.0 * h);
        }
        slopes[n - 1] = (values[n - 1] - values[n - 2]) / h;
        Ok(RadialTable {
            r_max,
            values,
            slopes,
        })
    }

    fn step(&self) -> f64 {
        self.r_max / (self.values.len() - 1) as f64
    }

    /// `(U(r), U'(r))`.
    pub fn eval(&self, r: f64) -> (f64, f64) {
        let n = self.values.len();
        let h = self.step();
        if r >= self.r_max {
            let s = self.slopes[n - 1];
            return (self.values[n - 1] + s * (r - self.r_max), s);
        }
        let i = ((r / h).floor() as usize).min(n - 2);
        let u = r / h - i as f64;
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (m0, m1) = (self.slopes[i] * h, self.slopes[i + 1] * h);
        let u2 = u * u;
        let u3 = u2 * u;
        let value = (2.0 * u3 - 3.0 * u2 + 1.0) * y0
            + (u3 - 2.0 * u2 + u) * m0
            + (-2.0 * u3 + 3.0 * u2) * y1
            + (u3 - u2) * m1;
        let deriv = ((6.0 * u2 - 6.0 * u) * y0
            + (3.0 * u2 - 4.0 * u + 1.0) * m0
            + (-6.0 * u2 + 6.0 * u) * y1
            + (3.0 * u2 - 2.0 * u) * m1)
            / h;
        (value, deriv)
    }
}

/// Potential energy `U : ℝ^d → ℝ` with a user- or closed-form gradient.
#[derive(Clone)]
pub enum Potential {
    Free,
    /// `U(x) = ½ω²|x|²`.
    Harmonic { omega: f64 },
    /// `U(x) = k|x|^α`, α > 1.
    CentralPower { k: f64, alpha: f64 },
    Tabulated(RadialTable),
    Custom {
        name: String,
        value: ScalarFn,
        gradient: GradientFn,
        smoothness: Smoothness,
    },
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Potential::Free => write!(f, "Free"),
            Potential::Harmonic { omega } => write!(f, "Harmonic {{ omega: {omega} }}"),
            Potential::CentralPower { k, alpha } => {
                write!(f, "CentralPower {{ k: {k}, alpha: {alpha} }}")
            }
            Potential::Tabulated(t) => write!(f, "Tabulated({} samples)", t.values.len()),
            Potential::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

impl Potential {
    pub fn harmonic(omega: f64) -> Self {
        Potential::Harmonic { omega }
    }

    pub fn central_power(k: f64, alpha: f64) -> Result<Self> {
        if !(alpha > 1.0) {
            return Err(Error::input("central_power needs alpha > 1 for a C¹ potential"));
        }
        Ok(Potential::CentralPower { k, alpha })
    }

    pub fn custom(
        name: impl Into<String>,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Potential::Custom {
            name: name.into(),
            value: Arc::new(value),
            gradient: Arc::new(gradient),
            smoothness: Smoothness::C1,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Potential::Free => "free".into(),
            Potential::Harmonic { .. } => "harmonic".into(),
            Potential::CentralPower { .. } => "central_power".into(),
            Potential::Tabulated(_) => "tabulated".into(),
            Potential::Custom { name, .. } => name.clone(),
        }
    }

    pub fn smoothness(&self) -> Smoothness {
        match self {
            Potential::Free | Potential::Harmonic { .. } => Smoothness::C2,
            Potential::CentralPower { alpha, .. } if *alpha >= 2.0 => Smoothness::C2,
            Potential::CentralPower { .. } | Potential::Tabulated(_) => Smoothness::C1,
            Potential::Custom { smoothness, .. } => *smoothness,
        }
    }

    /// Whether the second differentials of `U` are bounded on ℝ^d. Reported
    /// alongside directional derivatives; it is not enforced.
    pub fn bounded_second_derivatives(&self) -> Option<bool> {
        match self {
            Potential::Free | Potential::Harmonic { .. } => Some(true),
            Potential::CentralPower { alpha, .. } => Some(*alpha == 2.0),
            Potential::Tabulated(_) => Some(true),
            Potential::Custom { .. } => None,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Potential::Free => 0.0,
            Potential::Harmonic { omega } => 0.5 * omega * omega * norm_sq(x),
            Potential::CentralPower { k, alpha } => k * norm_sq(x).sqrt().powf(*alpha),
            Potential::Tabulated(t) => t.eval(norm_sq(x).sqrt()).0,
            Potential::Custom { value, .. } => value(x),
        }
    }

    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Potential::Free => out.iter_mut().for_each(|g| *g = 0.0),
            Potential::Harmonic { omega } => {
                let w2 = omega * omega;
                for (g, xi) in out.iter_mut().zip(x) {
                    *g = w2 * xi;
                }
            }
            Potential::CentralPower { k, alpha } => {
                let r = norm_sq(x).sqrt();
                let scale = if r > 0.0 {
                    k * alpha * r.powf(alpha - 2.0)
                } else {
                    0.0
                };
                for (g, xi) in out.iter_mut().zip(x) {
                    *g = scale * xi;
                }
            }
            Potential::Tabulated(t) => {
                let r = norm_sq(x).sqrt();
                let scale = if r > 0.0 { t.eval(r).1 / r } else { 0.0 };
                for (g, xi) in out.iter_mut().zip(x) {
                    *g = scale * xi;
                }
            }
            Potential::Custom { gradient, .. } => gradient(x, out),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.gradient_into(x, &mut out);
        out
    }
}

fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Interface for admissible Lagrangians: C¹ in `x`, holomorphic in `v`, real
/// on real arguments. Only [`LagrangianSpec`] ships with the crate; the
/// functionals in [`crate::variation`] that need nothing beyond values and
/// first partials accept any implementor.
pub trait AdmissibleLagrangian: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64], v: &[Complex64]) -> Complex64;
    /// Writes `∂_x L` and `∂_v L` at `(x, v)`.
    fn partials_into(&self, x: &[f64], v: &[Complex64], dx: &mut [Complex64], dv: &mut [Complex64]);
}

/// Natural Lagrangian `L(x, v) = q(v) − U(x)`.
#[derive(Clone, Debug)]
pub struct LagrangianSpec {
    pub q: QuadraticForm,
    pub potential: Potential,
}

#[derive(Clone, Debug, Serialize)]
pub struct AdmissibilityReport {
    pub passed: bool,
    pub real_on_real: bool,
    pub max_imag: f64,
    pub gradient_consistent: bool,
    /// Worst `|FD(U) − ∇U|_∞ / max(1, |∇U|_∞)` over the probes.
    pub max_gradient_error: f64,
    pub worst_probe: usize,
}

/// Relative tolerance for the finite-difference gradient check.
pub const GRADIENT_TOLERANCE: f64 = 1e-5;

impl LagrangianSpec {
    pub fn new(q: QuadraticForm, potential: Potential) -> Self {
        LagrangianSpec { q, potential }
    }

    /// `L = ½m|v|² − U(x)`.
    pub fn natural(dim: usize, mass: f64, potential: Potential) -> Self {
        LagrangianSpec {
            q: QuadraticForm::scaled_identity(dim, mass),
            potential,
        }
    }

    pub fn dim(&self) -> usize {
        self.q.dim()
    }

    pub fn eval(&self, x: &[f64], v: &[Complex64]) -> Result<Complex64> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), v.len())?;
        Ok(self.eval_unchecked(x, v))
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64], v: &[Complex64]) -> Complex64 {
        self.q.eval(v) - self.potential.value(x)
    }

    /// `(∂_x L, ∂_v L) = (−∇U(x), Qv)`.
    pub fn partials(&self, x: &[f64], v: &[Complex64]) -> Result<(Vec<f64>, Vec<Complex64>)> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), v.len())?;
        let mut dx = self.potential.gradient(x);
        dx.iter_mut().for_each(|g| *g = -*g);
        Ok((dx, self.q.apply(v)))
    }

    /// Checks that `L` is real on real arguments and that the supplied
    /// gradient of `U` agrees with central differences of `U`.
    pub fn check_admissible(&self, probes: &[(Vec<f64>, Vec<f64>)]) -> Result<AdmissibilityReport> {
        if probes.is_empty() {
            return Err(Error::input("admissibility check needs at least one probe"));
        }
        let d = self.dim();
        let mut max_imag = 0.0f64;
        let mut max_err = 0.0f64;
        let mut worst = 0;
        for (i, (x, v)) in probes.iter().enumerate() {
            check_dim(d, x.len())?;
            check_dim(d, v.len())?;
            let vc: Vec<Complex64> = v.iter().map(|&r| Complex64::new(r, 0.0)).collect();
            max_imag = max_imag.max(self.eval_unchecked(x, &vc).im.abs());

            let grad = self.potential.gradient(x);
            let mut xp = x.clone();
            let mut err = 0.0f64;
            for k in 0..d {
                let eps = 1e-5 * x[k].abs().max(1.0);
                xp[k] = x[k] + eps;
                let up = self.potential.value(&xp);
                xp[k] = x[k] - eps;
                let um = self.potential.value(&xp);
                xp[k] = x[k];
                let fd = (up - um) / (2.0 * eps);
                err = err.max((fd - grad[k]).abs());
            }
            let scale = grad.iter().fold(1.0f64, |m, g| m.max(g.abs()));
            let rel = err / scale;
            if rel > max_err || !rel.is_finite() {
                max_err = if rel.is_finite() { rel } else { f64::INFINITY };
                worst = i;
            }
        }
        let real_on_real = max_imag == 0.0;
        let gradient_consistent = max_err <= GRADIENT_TOLERANCE;
        Ok(AdmissibilityReport {
            passed: real_on_real && gradient_consistent,
            real_on_real,
            max_imag,
            gradient_consistent,
            max_gradient_error: max_err,
            worst_probe: worst,
        })
    }
}

impl AdmissibleLagrangian for LagrangianSpec {
    fn dim(&self) -> usize {
        self.q.dim()
    }

    fn value(&self, x: &[f64], v: &[Complex64]) -> Complex64 {
        self.eval_unchecked(x, v)
    }

    fn partials_into(&self, x: &[f64], v: &[Complex64], dx: &mut [Complex64], dv: &mut [Complex64]) {
        let d = x.len();
        let mut write = |g: &mut [f64]| {
            self.potential.gradient_into(x, g);
            for (k, g) in g.iter().enumerate() {
                dx[k] = Complex64::new(-g, 0.0);
            }
        };
        if d <= 8 {
            write(&mut [0.0; 8][..d]);
        } else {
            write(&mut vec![0.0; d]);
        }
        self.q.apply_into(v, dv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn harmonic1() -> LagrangianSpec {
        LagrangianSpec::natural(1, 1.0, Potential::harmonic(1.0))
    }

    #[test]
    fn eval_examples() {
        let l = harmonic1();
        assert_eq!(l.eval(&[0.0], &[c(0.0, 0.0)]).unwrap(), c(0.0, 0.0));
        assert_eq!(l.eval(&[2.0], &[c(3.0, 0.0)]).unwrap(), c(2.5, 0.0));
        assert_eq!(l.eval(&[1.0], &[c(0.0, 1.0)]).unwrap(), c(-1.0, 0.0));
    }

    #[test]
    fn eval_rejects_dimension_mismatch() {
        let l = harmonic1();
        assert!(matches!(
            l.eval(&[0.0, 1.0], &[c(0.0, 0.0)]),
            Err(Error::Dimension { expected: 1, got: 2 })
        ));
        assert!(l.partials(&[0.0], &[]).is_err());
    }

    #[test]
    fn partials_examples() {
        let (dx, dv) = harmonic1().partials(&[1.0], &[c(1.0, 1.0)]).unwrap();
        assert_eq!(dx, vec![-1.0]);
        assert_eq!(dv, vec![c(1.0, 1.0)]);

        let free = LagrangianSpec::natural(1, 1.0, Potential::Free);
        let (dx, dv) = free.partials(&[3.7], &[c(0.0, 0.0)]).unwrap();
        assert_eq!(dx[0], 0.0);
        assert_eq!(dv[0], c(0.0, 0.0));

        let l2 = LagrangianSpec::natural(2, 1.0, Potential::harmonic(2.0));
        let (dx, dv) = l2.partials(&[1.0, 0.0], &[c(0.0, 0.0), c(0.0, 1.0)]).unwrap();
        assert_eq!(dx, vec![-4.0, 0.0]);
        assert_eq!(dv, vec![c(0.0, 0.0), c(0.0, 1.0)]);
    }

    #[test]
    fn asymmetric_form_rejected() {
        assert!(QuadraticForm::new(2, vec![1.0, 0.5, 0.0, 1.0]).is_err());
        assert!(QuadraticForm::new(2, vec![1.0, 0.5, 0.5, 1.0]).is_ok());
    }

    fn random_probes(d: usize, n: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let v = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                (x, v)
            })
            .collect()
    }

    #[test]
    fn harmonic_is_admissible() {
        let l = LagrangianSpec::natural(2, 1.0, Potential::harmonic(1.5));
        let report = l.check_admissible(&random_probes(2, 100, 1)).unwrap();
        assert!(report.passed);
        assert_eq!(report.max_imag, 0.0);
    }

    #[test]
    fn broken_gradient_fails() {
        let broken = Potential::custom(
            "broken",
            |x: &[f64]| 0.5 * x[0] * x[0],
            |x: &[f64], g: &mut [f64]| g[0] = 2.0 * x[0],
        );
        let l = LagrangianSpec::natural(1, 1.0, broken);
        let report = l.check_admissible(&random_probes(1, 100, 2)).unwrap();
        assert!(!report.passed);
        assert!(!report.gradient_consistent);
        assert!(report.real_on_real);
    }

    #[test]
    fn cosine_potential_passes_fd_check() {
        let cos = Potential::custom(
            "cos",
            |x: &[f64]| x[0].cos(),
            |x: &[f64], g: &mut [f64]| g[0] = -x[0].sin(),
        );
        let l = LagrangianSpec::natural(1, 1.0, cos);
        let report = l.check_admissible(&random_probes(1, 100, 3)).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_gradient_error < 1e-5);
    }

    #[test]
    fn bundled_potentials_have_consistent_gradients() {
        let table: Vec<f64> = (0..41).map(|i| (0.1 * i as f64).powi(2) * 0.7).collect();
        for pot in [
            Potential::Free,
            Potential::harmonic(0.7),
            Potential::central_power(1.3, 3.0).unwrap(),
            Potential::central_power(0.5, 1.5).unwrap(),
            Potential::Tabulated(RadialTable::new(4.0, table).unwrap()),
        ] {
            let l = LagrangianSpec::natural(3, 1.0, pot.clone());
            let report = l.check_admissible(&random_probes(3, 100, 4)).unwrap();
            assert!(report.passed, "{pot:?}: {report:?}");
        }
    }

    #[test]
    fn empty_probe_set_is_an_error() {
        assert!(harmonic1().check_admissible(&[]).is_err());
    }

    fn cplx() -> impl Strategy<Value = Complex64> {
        (-3.0..3.0f64, -3.0..3.0f64).prop_map(|(a, b)| c(a, b))
    }

    proptest! {
        #[test]
        fn real_on_real(x in -5.0..5.0f64, y in -5.0..5.0f64, u in -5.0..5.0f64, w in -5.0..5.0f64) {
            let q = QuadraticForm::new(2, vec![2.0, 0.3, 0.3, 1.0]).unwrap();
            let l = LagrangianSpec::new(q, Potential::central_power(1.0, 2.5).unwrap());
            let val = l.eval(&[x, y], &[c(u, 0.0), c(w, 0.0)]).unwrap();
            prop_assert_eq!(val.im, 0.0);
        }

        #[test]
        fn q_is_two_homogeneous(v0 in cplx(), v1 in cplx(), lam in cplx()) {
            let q = QuadraticForm::new(2, vec![2.0, 0.3, 0.3, 1.0]).unwrap();
            let lhs = q.eval(&[lam * v0, lam * v1]);
            let rhs = lam * lam * q.eval(&[v0, v1]);
            prop_assert!((lhs - rhs).norm() <= 1e-10 * (1.0 + rhs.norm()));
        }

        #[test]
        fn dv_is_additive(a0 in cplx(), a1 in cplx(), b0 in cplx(), b1 in cplx()) {
            let l = LagrangianSpec::new(
                QuadraticForm::new(2, vec![2.0, 0.3, 0.3, 1.0]).unwrap(),
                Potential::harmonic(1.0),
            );
            let x = [0.2, -0.4];
            let (_, da) = l.partials(&x, &[a0, a1]).unwrap();
            let (_, db) = l.partials(&x, &[b0, b1]).unwrap();
            let (_, dab) = l.partials(&x, &[a0 + b0, a1 + b1]).unwrap();
            for k in 0..2 {
                prop_assert!((dab[k] - da[k] - db[k]).norm() <= 1e-12);
            }
        }

        #[test]
        fn dv_matches_complex_finite_difference(v0 in cplx(), v1 in cplx(), h0 in cplx(), h1 in cplx()) {
            let l = LagrangianSpec::new(
                QuadraticForm::new(2, vec![2.0, 0.3, 0.3, 1.0]).unwrap(),
                Potential::harmonic(1.0),
            );
            let x = [0.5, 0.1];
            let eps = 1e-5;
            let lp = l.eval(&x, &[v0 + h0 * eps, v1 + h1 * eps]).unwrap();
            let lm = l.eval(&x, &[v0 - h0 * eps, v1 - h1 * eps]).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            let (_, dv) = l.partials(&x, &[v0, v1]).unwrap();
            let exact = dv[0] * h0 + dv[1] * h1;
            prop_assert!((fd - exact).norm() <= 1e-4 * exact.norm().max(1.0));
        }
    }
}
