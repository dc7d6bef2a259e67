use std::fmt;
use std::sync::Arc;

use crate::error::check_dim;
use crate::{linalg, Error, Result};

/// `(t, x, out)`; writes a vector (drift) or a row-major d×d table (dispersion).
pub type VectorField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub enum Drift {
    /// `b(x) = −rate·(x − center)`; `rate = 0` is driftless.
    Relaxation { rate: f64, center: Vec<f64> },
    Custom(VectorField),
}

#[derive(Clone)]
pub enum Dispersion {
    /// Constant `σ`, row-major d×d.
    Constant(Vec<f64>),
    Custom(VectorField),
}

impl Dispersion {
    /// `a = σσᵀ` at `(t, x)`.
    pub fn diffusion_matrix_into(&self, dim: usize, t: f64, x: &[f64], out: &mut [f64]) {
        let sigma = match self {
            Dispersion::Constant(s) => std::borrow::Cow::Borrowed(s.as_slice()),
            Dispersion::Custom(f) => {
                let mut s = vec![0.0; dim * dim];
                f(t, x, &mut s);
                std::borrow::Cow::Owned(s)
            }
        };
        for i in 0..dim {
            for j in 0..dim {
                out[i * dim + j] = (0..dim).map(|k| sigma[i * dim + k] * sigma[j * dim + k]).sum();
            }
        }
    }

    /// `a = σσᵀ` when the dispersion does not depend on `(t, x)`.
    pub fn constant_diffusion(&self, dim: usize) -> Option<Vec<f64>> {
        if let Dispersion::Custom(_) = self {
            return None;
        }
        let mut a = vec![0.0; dim * dim];
        self.diffusion_matrix_into(dim, 0.0, &[], &mut a);
        Some(a)
    }

    /// `(∂_j a^{kj})_k`; zero for constant dispersion, central differences otherwise.
    pub fn divergence_into(&self, dim: usize, t: f64, x: &[f64], out: &mut [f64]) {
        out[..dim].iter_mut().for_each(|o| *o = 0.0);
        if let Dispersion::Custom(_) = self {
            let mut xp = x.to_vec();
            let mut ap = vec![0.0; dim * dim];
            let mut am = vec![0.0; dim * dim];
            for j in 0..dim {
                let eps = 1e-5 * x[j].abs().max(1.0);
                xp[j] = x[j] + eps;
                self.diffusion_matrix_into(dim, t, &xp, &mut ap);
                xp[j] = x[j] - eps;
                self.diffusion_matrix_into(dim, t, &xp, &mut am);
                xp[j] = x[j];
                for k in 0..dim {
                    out[k] += (ap[k * dim + j] - am[k * dim + j]) / (2.0 * eps);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitialLaw {
    Point(Vec<f64>),
    Gaussian { mean: Vec<f64>, cov: Vec<f64> },
}

impl InitialLaw {
    /// Law at time `origin + elapsed` of a Brownian motion `σW` that sits at
    /// `start` at time `origin`.
    pub fn brownian_at(start: Vec<f64>, sigma: f64, elapsed: f64) -> Self {
        let d = start.len();
        if elapsed <= 0.0 || sigma == 0.0 {
            return InitialLaw::Point(start);
        }
        let mut cov = linalg::identity(d);
        cov.iter_mut().for_each(|c| *c *= sigma * sigma * elapsed);
        InitialLaw::Gaussian { mean: start, cov }
    }

    /// Stationary law `N(0, σ²/(2ω) I)` of `dX = −ωX dt + σ dW`.
    pub fn ou_stationary(dim: usize, omega: f64, sigma: f64) -> Self {
        let mut cov = linalg::identity(dim);
        cov.iter_mut().for_each(|c| *c *= sigma * sigma / (2.0 * omega));
        InitialLaw::Gaussian {
            mean: vec![0.0; dim],
            cov,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Point(x) => x.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn mean(&self) -> &[f64] {
        match self {
            InitialLaw::Point(x) => x,
            InitialLaw::Gaussian { mean, .. } => mean,
        }
    }

    pub fn covariance(&self) -> Vec<f64> {
        match self {
            InitialLaw::Point(x) => vec![0.0; x.len() * x.len()],
            InitialLaw::Gaussian { cov, .. } => cov.clone(),
        }
    }
}

/// `dX_t = b(t, X_t) dt + σ(t, X_t) dW_t` with an initial law at the start
/// of the time grid.
#[derive(Clone)]
pub struct DiffusionModel {
    dim: usize,
    drift: Drift,
    dispersion: Dispersion,
    initial: InitialLaw,
    label: String,
}

impl fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("dim", &self.dim)
            .field("label", &self.label)
            .field("initial", &self.initial)
            .finish()
    }
}

impl DiffusionModel {
    pub fn new(dim: usize, drift: Drift, dispersion: Dispersion, initial: InitialLaw, label: impl Into<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("model dimension must be positive"));
        }
        if let Drift::Relaxation { center, rate } = &drift {
            check_dim(dim, center.len())?;
            if !rate.is_finite() {
                return Err(Error::input("relaxation rate must be finite"));
            }
        }
        if let Dispersion::Constant(s) = &dispersion {
            check_dim(dim * dim, s.len())?;
        }
        check_dim(dim, initial.dim())?;
        if let InitialLaw::Gaussian { cov, .. } = &initial {
            check_dim(dim * dim, cov.len())?;
            linalg::cholesky(dim, cov)?;
        }
        Ok(DiffusionModel {
            dim,
            drift,
            dispersion,
            initial,
            label: label.into(),
        })
    }

    fn isotropic(dim: usize, sigma: f64) -> Dispersion {
        let mut s = linalg::identity(dim);
        s.iter_mut().for_each(|v| *v *= sigma);
        Dispersion::Constant(s)
    }

    /// `dX = σ dW`.
    pub fn brownian(dim: usize, sigma: f64, initial: InitialLaw) -> Result<Self> {
        Self::new(
            dim,
            Drift::Relaxation {
                rate: 0.0,
                center: vec![0.0; dim],
            },
            Self::isotropic(dim, sigma),
            initial,
            format!("bm(sigma={sigma})"),
        )
    }

    /// `dX = −ωX dt + σ dW`.
    pub fn ornstein_uhlenbeck(dim: usize, omega: f64, sigma: f64, initial: InitialLaw) -> Result<Self> {
        Self::new(
            dim,
            Drift::Relaxation {
                rate: omega,
                center: vec![0.0; dim],
            },
            Self::isotropic(dim, sigma),
            initial,
            format!("ou(omega={omega}, sigma={sigma})"),
        )
    }

    /// `dX = b(t, X) dt` (σ = 0).
    pub fn deterministic(
        dim: usize,
        drift: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        start: Vec<f64>,
    ) -> Result<Self> {
        Self::new(
            dim,
            Drift::Custom(Arc::new(drift)),
            Dispersion::Constant(vec![0.0; dim * dim]),
            InitialLaw::Point(start),
            "deterministic",
        )
    }

    /// σ = 0 model with zero drift, used as the carrier of trajectories that
    /// are embedded directly rather than simulated.
    pub fn embedding(dim: usize) -> Self {
        DiffusionModel {
            dim,
            drift: Drift::Relaxation {
                rate: 0.0,
                center: vec![0.0; dim],
            },
            dispersion: Dispersion::Constant(vec![0.0; dim * dim]),
            initial: InitialLaw::Point(vec![0.0; dim]),
            label: "embedded".into(),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn drift(&self) -> &Drift {
        &self.drift
    }

    pub fn dispersion(&self) -> &Dispersion {
        &self.dispersion
    }

    pub fn initial(&self) -> &InitialLaw {
        &self.initial
    }

    pub fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.drift {
            Drift::Relaxation { rate, center } => {
                for k in 0..self.dim {
                    out[k] = -rate * (x[k] - center[k]);
                }
            }
            Drift::Custom(f) => f(t, x, out),
        }
    }

    pub fn dispersion_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.dispersion {
            Dispersion::Constant(s) => out.copy_from_slice(s),
            Dispersion::Custom(f) => f(t, x, out),
        }
    }

    pub fn diffusion_matrix_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.dispersion.diffusion_matrix_into(self.dim, t, x, out);
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(&self.dispersion, Dispersion::Constant(s) if s.iter().all(|v| *v == 0.0))
    }

    /// Model of `RX` for an orthogonal `R` (row-major d×d). Only available for
    /// relaxation drifts and constant dispersion.
    pub fn push_forward(&self, rotation: &[f64]) -> Result<Self> {
        let d = self.dim;
        check_dim(d * d, rotation.len())?;
        let rt = linalg::transpose(d, rotation);
        let orth = linalg::matmul(d, rotation, &rt);
        let id = linalg::identity(d);
        if orth.iter().zip(&id).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(Error::input("push_forward needs an orthogonal matrix"));
        }
        let mut out = self.push_forward_affine(rotation, &vec![0.0; d])?;
        out.label = format!("{} (rotated)", self.label);
        Ok(out)
    }

    /// Model of `AX + c` for an invertible `A`: a relaxation drift
    /// `−ω(x − x*)` becomes `−ω(y − (Ax* + c))` and the dispersion becomes `Aσ`.
    pub fn push_forward_affine(&self, matrix: &[f64], offset: &[f64]) -> Result<Self> {
        let d = self.dim;
        check_dim(d * d, matrix.len())?;
        check_dim(d, offset.len())?;
        if linalg::inverse(d, matrix).is_err() {
            return Err(Error::input("push-forward needs an invertible matrix"));
        }
        let map = |x: &[f64]| {
            let mut y = vec![0.0; d];
            linalg::matvec(d, matrix, x, &mut y);
            y.iter_mut().zip(offset).for_each(|(a, b)| *a += b);
            y
        };
        let drift = match &self.drift {
            Drift::Relaxation { rate, center } => Drift::Relaxation {
                rate: *rate,
                center: map(center),
            },
            Drift::Custom(_) => return Err(Error::Capability("push_forward of a custom drift".into())),
        };
        let dispersion = match &self.dispersion {
            Dispersion::Constant(s) => Dispersion::Constant(linalg::matmul(d, matrix, s)),
            Dispersion::Custom(_) => {
                return Err(Error::Capability("push_forward of a custom dispersion".into()))
            }
        };
        let initial = match &self.initial {
            InitialLaw::Point(x) => InitialLaw::Point(map(x)),
            InitialLaw::Gaussian { mean, cov } => {
                let at = linalg::transpose(d, matrix);
                let c = linalg::matmul(d, &linalg::matmul(d, matrix, cov), &at);
                // symmetrize rounding
                let c = (0..d * d)
                    .map(|idx| {
                        let (i, j) = (idx / d, idx % d);
                        0.5 * (c[i * d + j] + c[j * d + i])
                    })
                    .collect();
                InitialLaw::Gaussian { mean: map(mean), cov: c }
            }
        };
        Ok(DiffusionModel {
            dim: d,
            drift,
            dispersion,
            initial,
            label: format!("{} (transformed)", self.label),
        })
    }
}
