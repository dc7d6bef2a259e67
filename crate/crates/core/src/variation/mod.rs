//! The action functional `F_J(X) = E[∫_J L(X_t, 𝒟X_t) dt]`, its directional
//! derivatives along deterministic variations, the stochastic Euler–Lagrange
//! residual and its σ = 0 reduction to classical mechanics.
//!
//! Variations are deterministic C¹ maps `Z: J → ℝ^d`. For these `DZ = D₊Z = Z′`,
//! so they belong to `𝒩¹(J)` and shifting an ensemble by `εZ` shifts its `𝒟`
//! field by exactly `εZ′`.

mod functional;
mod residual;

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion::{PathEnsemble, TimeGrid, TimeSelection};
use crate::nelson::dirac_complex_derivative;
use crate::{Error, Result};

pub use functional::{
    action, directional_derivative_fd, directional_derivative_formula, ActionEstimate, FdEstimate, FdOptions,
    FormulaEstimate, MAX_MASKED_FRACTION,
};
pub use residual::{
    classical_action, classical_el_solve, coherence_check, coherence_check_path, el_residual, el_residual_from,
    CoherenceReport, ELResidualField, ResidualSummary, ResidualVariant, Trajectory, COMMUTATION_TOLERANCE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariationClass {
    /// `DZ = D₊Z`: admissible for the directional-derivative formula.
    N1,
    /// Only known to be C¹.
    C1,
}

/// Closed-form variations on `J = [a, b]`, written with `s = (t − a)/(b − a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "shape")]
pub enum VariationShape {
    Zero { dim: usize },
    Constant { value: Vec<f64> },
    /// `c·s`
    Ramp { amplitude: Vec<f64> },
    /// `c·sin(kπs)`, zero at both ends.
    Sine {
        amplitude: Vec<f64>,
        #[serde(default = "first_harmonic")]
        harmonic: u32,
    },
    /// `c·cos(kπs)`, nonzero at both ends.
    Cosine {
        amplitude: Vec<f64>,
        #[serde(default = "first_harmonic")]
        harmonic: u32,
    },
    /// `4c·s(1 − s)`, zero at both ends.
    Bump { amplitude: Vec<f64> },
}

fn first_harmonic() -> u32 {
    1
}

impl VariationShape {
    pub fn dim(&self) -> usize {
        match self {
            VariationShape::Zero { dim } => *dim,
            VariationShape::Constant { value } => value.len(),
            VariationShape::Ramp { amplitude }
            | VariationShape::Sine { amplitude, .. }
            | VariationShape::Cosine { amplitude, .. }
            | VariationShape::Bump { amplitude } => amplitude.len(),
        }
    }

    fn label(&self) -> String {
        match self {
            VariationShape::Zero { .. } => "zero".into(),
            VariationShape::Constant { value } => format!("constant{value:?}"),
            VariationShape::Ramp { amplitude } => format!("ramp{amplitude:?}"),
            VariationShape::Sine { amplitude, harmonic } => format!("sine(k={harmonic}){amplitude:?}"),
            VariationShape::Cosine { amplitude, harmonic } => format!("cosine(k={harmonic}){amplitude:?}"),
            VariationShape::Bump { amplitude } => format!("bump{amplitude:?}"),
        }
    }
}

/// `sin(πx)`, exactly zero at integers.
fn sin_pi(x: f64) -> f64 {
    if x == x.round() {
        0.0
    } else {
        (PI * x).sin()
    }
}

/// `cos(πx)`, exactly zero at half-integers.
fn cos_pi(x: f64) -> f64 {
    if x - 0.5 == (x - 0.5).round() {
        0.0
    } else {
        (PI * x).cos()
    }
}

type Evaluator = Arc<dyn Fn(f64, &mut [f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
enum Repr {
    Analytic(Evaluator),
    Sampled(Vec<CubicSpline>),
}

/// Deterministic C¹ variation `Z` with value and derivative evaluators.
#[derive(Clone)]
pub struct VariationProcess {
    dim: usize,
    class: VariationClass,
    label: String,
    repr: Repr,
}

impl fmt::Debug for VariationProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VariationProcess")
            .field("dim", &self.dim)
            .field("class", &self.class)
            .field("label", &self.label)
            .finish_non_exhaustive()
    }
}

impl VariationProcess {
    /// `eval(t, z, dz)` writes `Z(t)` and `Z′(t)`.
    pub fn analytic(
        dim: usize,
        label: impl Into<String>,
        eval: impl Fn(f64, &mut [f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("variation dimension must be positive"));
        }
        Ok(VariationProcess {
            dim,
            class: VariationClass::N1,
            label: label.into(),
            repr: Repr::Analytic(Arc::new(eval)),
        })
    }

    pub fn zero(dim: usize) -> Result<Self> {
        Self::analytic(dim, "zero", |_, z, dz| {
            z.fill(0.0);
            dz.fill(0.0);
        })
    }

    pub fn from_shape(shape: &VariationShape, a: f64, b: f64) -> Result<Self> {
        let dim = shape.dim();
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::input(format!("variation interval needs a < b, got [{a}, {b}]")));
        }
        if let VariationShape::Sine { harmonic: 0, .. } | VariationShape::Cosine { harmonic: 0, .. } = shape {
            return Err(Error::input("harmonic index must be positive"));
        }
        let len = b - a;
        let label = shape.label();
        let shape = shape.clone();
        Self::analytic(dim, label, move |t, z, dz| {
            let s = (t - a) / len;
            let (amp, f, df): (&[f64], f64, f64) = match &shape {
                VariationShape::Zero { .. } => {
                    z.fill(0.0);
                    dz.fill(0.0);
                    return;
                }
                VariationShape::Constant { value } => (value, 1.0, 0.0),
                VariationShape::Ramp { amplitude } => (amplitude, s, 1.0 / len),
                VariationShape::Sine { amplitude, harmonic } => {
                    let k = f64::from(*harmonic);
                    (amplitude, sin_pi(k * s), k * PI / len * cos_pi(k * s))
                }
                VariationShape::Cosine { amplitude, harmonic } => {
                    let k = f64::from(*harmonic);
                    (amplitude, cos_pi(k * s), -k * PI / len * sin_pi(k * s))
                }
                VariationShape::Bump { amplitude } => (amplitude, 4.0 * s * (1.0 - s), 4.0 * (1.0 - 2.0 * s) / len),
            };
            for k in 0..amp.len() {
                z[k] = amp[k] * f;
                dz[k] = amp[k] * df;
            }
        })
    }

    /// Natural cubic spline through `values` (`times.len() × dim`, row-major);
    /// the derivative is the spline's.
    pub fn sampled(times: &[f64], dim: usize, values: &[f64], label: impl Into<String>) -> Result<Self> {
        if dim == 0 || values.len() != times.len() * dim {
            return Err(Error::input("sampled variation needs times.len() × dim values"));
        }
        let splines = (0..dim)
            .map(|k| {
                let ys: Vec<f64> = values.chunks_exact(dim).map(|r| r[k]).collect();
                CubicSpline::natural(times, &ys)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VariationProcess {
            dim,
            class: VariationClass::N1,
            label: label.into(),
            repr: Repr::Sampled(splines),
        })
    }

    /// Overrides the class tag.
    pub fn with_class(mut self, class: VariationClass) -> Self {
        self.class = class;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class(&self) -> VariationClass {
        self.class
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Writes `Z(t)` into `z` and `Z′(t)` into `dz`.
    pub fn eval_into(&self, t: f64, z: &mut [f64], dz: &mut [f64]) {
        match &self.repr {
            Repr::Analytic(f) => f(t, z, dz),
            Repr::Sampled(splines) => {
                for (k, s) in splines.iter().enumerate() {
                    (z[k], dz[k]) = s.eval(t);
                }
            }
        }
    }

    pub fn value(&self, t: f64) -> Vec<f64> {
        let (mut z, mut dz) = (vec![0.0; self.dim], vec![0.0; self.dim]);
        self.eval_into(t, &mut z, &mut dz);
        z
    }

    pub fn derivative(&self, t: f64) -> Vec<f64> {
        let (mut z, mut dz) = (vec![0.0; self.dim], vec![0.0; self.dim]);
        self.eval_into(t, &mut z, &mut dz);
        dz
    }

    /// `max_t ‖Z(t)‖` over the grid points.
    pub fn sup_norm(&self, grid: &TimeGrid) -> f64 {
        grid.times()
            .iter()
            .map(|&t| self.value(t).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Embeds `Z` as a σ = 0 ensemble and checks on the grid that
    /// `DZ − D₊Z = 0` and that `Z`, `Z′` are finite.
    pub fn certify_n1(&self, grid: &TimeGrid) -> Result<N1Certificate> {
        let d = self.dim;
        let times = grid.times();
        let mut positions = Vec::with_capacity(times.len() * d);
        let mut sup_value = 0.0f64;
        let mut sup_derivative = 0.0f64;
        let (mut z, mut dz) = (vec![0.0; d], vec![0.0; d]);
        let mut bounded = true;
        for &t in &times {
            self.eval_into(t, &mut z, &mut dz);
            bounded &= z.iter().chain(&dz).all(|v| v.is_finite());
            sup_value = sup_value.max(z.iter().fold(0.0, |m, v| m.max(v.abs())));
            sup_derivative = sup_derivative.max(dz.iter().fold(0.0, |m, v| m.max(v.abs())));
            positions.extend_from_slice(&z);
        }
        if !bounded {
            return Ok(N1Certificate {
                certified: false,
                bounded,
                max_gap: f64::NAN,
                sup_value,
                sup_derivative,
            });
        }
        let ens = PathEnsemble::from_trajectory(*grid, d, &positions)?;
        let field = dirac_complex_derivative(&ens, &TimeSelection::All)?;
        // Im 𝒟Z = (DZ − D₊Z)/2
        let max_gap = (0..field.slots().len())
            .flat_map(|s| field.value(s, 0).iter().map(|v| 2.0 * v.im.abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        Ok(N1Certificate {
            certified: max_gap == 0.0 && self.class == VariationClass::N1,
            bounded,
            max_gap,
            sup_value,
            sup_derivative,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct N1Certificate {
    pub certified: bool,
    pub bounded: bool,
    /// `max |DZ − D₊Z|` on the σ = 0 branch.
    pub max_gap: f64,
    pub sup_value: f64,
    pub sup_derivative: f64,
}

/// Natural cubic spline of one scalar series.
#[derive(Clone, Debug)]
struct CubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    fn natural(x: &[f64], y: &[f64]) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(Error::input("spline needs at least two knots"));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) || x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::input("spline knots must be finite and strictly increasing"));
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            // tridiagonal system for the interior second derivatives (Thomas algorithm)
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 1..n - 1 {
                let h0 = x[i] - x[i - 1];
                let h1 = x[i + 1] - x[i];
                diag[i - 1] = 2.0 * (h0 + h1);
                upper[i - 1] = h1;
                rhs[i - 1] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            for i in 1..k {
                let lower = x[i + 1] - x[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }
        Ok(CubicSpline {
            x: x.to_vec(),
            y: y.to_vec(),
            m,
        })
    }

    /// Value and derivative; linear continuation outside the knots.
    fn eval(&self, t: f64) -> (f64, f64) {
        let n = self.x.len();
        let i = self.x.partition_point(|&v| v <= t).clamp(1, n - 1) - 1;
        let h = self.x[i + 1] - self.x[i];
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let (y0, y1) = (self.y[i], self.y[i + 1]);
        let slope = (y1 - y0) / h - h * (2.0 * m0 + m1) / 6.0;
        if t < self.x[0] {
            return (y0 + slope * (t - self.x[0]), slope);
        }
        if t > self.x[n - 1] {
            let end = (y1 - y0) / h + h * (m0 + 2.0 * m1) / 6.0;
            return (y1 + end * (t - self.x[n - 1]), end);
        }
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        let value = a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
        let deriv = (y1 - y0) / h + ((1.0 - 3.0 * a * a) * m0 + (3.0 * b * b - 1.0) * m1) * h / 6.0;
        (value, deriv)
    }
}
