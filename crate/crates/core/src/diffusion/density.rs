use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{DiffusionModel, Dispersion, Drift, PathEnsemble, TimeGrid};
use crate::error::check_dim;
use crate::smoothing::{KernelLattice, Taps};
use crate::{linalg, Error, Result};

/// Points whose density is below this fraction of the per-time maximum are
/// flagged and masked out of derivative averages.
pub const DENSITY_FLOOR: f64 = 1e-12;

/// Minimum ensemble size for a kernel density fit.
pub const KDE_MIN_SAMPLES: usize = 100;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// `(4/(d+2))^{1/(d+4)} σ_k n^{−1/(d+4)}` per dimension.
    #[default]
    Silverman,
    /// `σ_k n^{−1/(d+4)}`.
    Scott,
    Fixed(f64),
}

impl BandwidthRule {
    /// Per-dimension bandwidths; a zero entry means that coordinate has no spread.
    pub fn bandwidths(&self, points: &[f64], dim: usize) -> Vec<f64> {
        let n = points.len() / dim;
        if let BandwidthRule::Fixed(h) = self {
            return vec![*h; dim];
        }
        let factor = match self {
            BandwidthRule::Silverman => (4.0 / (dim as f64 + 2.0)).powf(1.0 / (dim as f64 + 4.0)),
            _ => 1.0,
        };
        let shrink = (n as f64).powf(-1.0 / (dim as f64 + 4.0));
        (0..dim)
            .map(|k| {
                let mean = points.iter().skip(k).step_by(dim).sum::<f64>() / n as f64;
                let var = points
                    .iter()
                    .skip(k)
                    .step_by(dim)
                    .map(|x| (x - mean).powi(2))
                    .sum::<f64>()
                    / (n.max(2) - 1) as f64;
                factor * var.sqrt() * shrink
            })
            .collect()
    }
}

/// `p_t(x)`, `∇p_t(x)` and `(∂_j(a^{kj} p_t))_k` at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityPoint {
    pub p: f64,
    pub grad_p: Vec<f64>,
    pub div_a_p: Vec<f64>,
    pub low_density: bool,
}

/// Closed-form Gaussian marginal of a linear diffusion at one time.
#[derive(Clone, Debug)]
pub struct GaussianMarginal {
    pub t: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    pub precision: Option<Vec<f64>>,
    pub dmean: Vec<f64>,
    pub dcov: Vec<f64>,
    log_norm: f64,
}

impl GaussianMarginal {
    pub fn mahalanobis_sq(&self, x: &[f64]) -> f64 {
        let Some(p) = &self.precision else {
            return f64::INFINITY;
        };
        let d = self.mean.len();
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += (x[i] - self.mean[i]) * p[i * d + j] * (x[j] - self.mean[j]);
            }
        }
        s
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        if self.precision.is_none() {
            return 0.0;
        }
        (self.log_norm - 0.5 * self.mahalanobis_sq(x)).exp()
    }

    /// `∇ log p = −Σ⁻¹(x − μ)`.
    pub fn score_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.mean.len();
        match &self.precision {
            Some(p) => {
                for i in 0..d {
                    out[i] = -(0..d).map(|j| p[i * d + j] * (x[j] - self.mean[j])).sum::<f64>();
                }
            }
            None => out[..d].iter_mut().for_each(|o| *o = f64::NAN),
        }
    }

    /// Below the density floor relative to the peak `p(μ)`.
    pub fn is_low_density(&self, x: &[f64]) -> bool {
        !(self.mahalanobis_sq(x) <= -2.0 * DENSITY_FLOOR.ln())
    }
}

/// Gaussian marginals of `dX = −ω(X − c)dt + σ dW` with constant σ and a
/// Gaussian (or point) law at `t0`.
#[derive(Clone, Debug)]
pub struct GaussianFamily {
    dim: usize,
    rate: f64,
    center: Vec<f64>,
    mean0: Vec<f64>,
    cov0: Vec<f64>,
    diffusion: Vec<f64>,
    t0: f64,
}

impl GaussianFamily {
    pub fn from_model(model: &DiffusionModel, t0: f64) -> Result<Self> {
        let (rate, center) = match model.drift() {
            Drift::Relaxation { rate, center } => (*rate, center.clone()),
            Drift::Custom(_) => {
                return Err(Error::Capability(
                    "analytic Gaussian density needs a linear (relaxation) drift".into(),
                ))
            }
        };
        let diffusion = model.dispersion().constant_diffusion(model.dim()).ok_or_else(|| {
            Error::Capability("analytic Gaussian density needs constant dispersion".into())
        })?;
        Ok(GaussianFamily {
            dim: model.dim(),
            rate,
            center,
            mean0: model.initial().mean().to_vec(),
            cov0: model.initial().covariance(),
            diffusion,
            t0,
        })
    }

    pub fn diffusion(&self) -> &[f64] {
        &self.diffusion
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    /// Time at which the initial law holds.
    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn marginal(&self, t: f64) -> GaussianMarginal {
        let d = self.dim;
        let tau = t - self.t0;
        let w = self.rate;
        let decay = (-w * tau).exp();
        let decay2 = (-2.0 * w * tau).exp();
        let growth = if w == 0.0 {
            tau
        } else {
            -(-2.0 * w * tau).exp_m1() / (2.0 * w)
        };
        let mean: Vec<f64> = (0..d)
            .map(|k| self.center[k] + (self.mean0[k] - self.center[k]) * decay)
            .collect();
        let cov: Vec<f64> = (0..d * d)
            .map(|i| decay2 * self.cov0[i] + growth * self.diffusion[i])
            .collect();
        let dmean = (0..d).map(|k| -w * (mean[k] - self.center[k])).collect();
        let dcov = (0..d * d).map(|i| -2.0 * w * cov[i] + self.diffusion[i]).collect();
        let det = linalg::determinant(d, &cov);
        let precision = if det > 0.0 && det.is_finite() {
            linalg::inverse(d, &cov).ok()
        } else {
            None
        };
        let log_norm = -0.5 * (d as f64 * (2.0 * PI).ln() + det.ln());
        GaussianMarginal {
            t,
            mean,
            cov,
            precision,
            dmean,
            dcov,
            log_norm,
        }
    }
}

/// Bandwidth used for the gradient channel `∇p`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientBandwidth {
    /// Normal-reference rule for density gradients,
    /// `(4/(d+4))^{1/(d+6)} σ_k n^{−1/(d+6)}`. The density-optimal width is
    /// too narrow for a derivative: at N = 20000 it roughly doubles the
    /// standard deviation of the score `∇p/p`.
    #[default]
    NormalReference,
    /// Reuse the density bandwidth.
    SameAsDensity,
}

impl GradientBandwidth {
    fn bandwidths(&self, points: &[f64], dim: usize, density: &[f64], rule: BandwidthRule) -> Vec<f64> {
        match (self, rule) {
            (GradientBandwidth::SameAsDensity, _) | (_, BandwidthRule::Fixed(_)) => density.to_vec(),
            (GradientBandwidth::NormalReference, _) => {
                let n = points.len() / dim;
                let d = dim as f64;
                let factor = (4.0 / (d + 4.0)).powf(1.0 / (d + 6.0)) * (n as f64).powf(-1.0 / (d + 6.0));
                // density rule with unit factor and n^{−1/(d+4)} gives σ_k back
                let sd = BandwidthRule::Scott.bandwidths(points, dim);
                let undo = (n as f64).powf(1.0 / (d + 4.0));
                sd.iter().map(|h| h * undo * factor).collect()
            }
        }
    }
}

/// Smoothed kernel sums on one lattice.
#[derive(Clone, Debug)]
struct Channel {
    lattice: KernelLattice,
    sums: Vec<f64>,
    channels: usize,
    norm: f64,
}

impl Channel {
    fn build(points: &[f64], dim: usize, bandwidth: &[f64], kernels: Vec<Vec<Taps>>) -> Self {
        let n = points.len() / dim;
        let per_bw = match dim {
            1 => 8.0,
            2 => 5.0,
            _ => 3.0,
        };
        let lattice = KernelLattice::new(points, dim, bandwidth, per_bw, 1 << 22);
        let channels = kernels.len();
        let ones = vec![1.0; n * channels];
        let mut sums = lattice.bin(points, &ones, channels);
        lattice.convolve(&mut sums, channels, &kernels);
        let norm = 1.0 / (n as f64 * bandwidth.iter().product::<f64>() * (2.0 * PI).powf(dim as f64 / 2.0));
        Channel {
            lattice,
            sums,
            channels,
            norm,
        }
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        self.lattice.interpolate(&self.sums, self.channels, x, out);
        out[..self.channels].iter_mut().for_each(|v| *v *= self.norm);
    }
}

/// Gaussian kernel density estimate of one cross-section, evaluated through a
/// binned lattice.
#[derive(Clone, Debug)]
pub struct KernelDensity {
    dim: usize,
    n: usize,
    bandwidth: Vec<f64>,
    gradient_bandwidth: Vec<f64>,
    density: Channel,
    gradient: Channel,
    peak: f64,
}

impl KernelDensity {
    pub fn fit(points: &[f64], dim: usize, rule: BandwidthRule) -> Result<Self> {
        Self::fit_with(points, dim, rule, GradientBandwidth::default())
    }

    pub fn fit_with(points: &[f64], dim: usize, rule: BandwidthRule, gradient: GradientBandwidth) -> Result<Self> {
        let n = points.len() / dim;
        if n < KDE_MIN_SAMPLES {
            return Err(Error::Estimation(format!(
                "kernel density needs at least {KDE_MIN_SAMPLES} samples, got {n}"
            )));
        }
        let bandwidth = rule.bandwidths(points, dim);
        if bandwidth.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::Estimation(
                "zero-variance cross-section: use the dirac density for σ = 0 ensembles".into(),
            ));
        }
        let gradient_bandwidth = gradient.bandwidths(points, dim, &bandwidth, rule);
        let density = Channel::build(points, dim, &bandwidth, vec![vec![Taps::Gauss; dim]]);
        let kernels = (0..dim)
            .map(|c| {
                (0..dim)
                    .map(|k| if c == k { Taps::GaussDerivative } else { Taps::Gauss })
                    .collect()
            })
            .collect();
        let gradient = Channel::build(points, dim, &gradient_bandwidth, kernels);
        let peak = density.sums.iter().fold(0.0f64, |m, v| m.max(*v)) * density.norm;
        Ok(KernelDensity {
            dim,
            n,
            bandwidth,
            gradient_bandwidth,
            density,
            gradient,
            peak,
        })
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn gradient_bandwidth(&self) -> &[f64] {
        &self.gradient_bandwidth
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    /// `(p(x), ∇p(x))`.
    pub fn eval(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut p = [0.0];
        self.density.eval(x, &mut p);
        let mut grad = vec![0.0; self.dim];
        self.gradient.eval(x, &mut grad);
        (p[0], grad)
    }

    pub fn is_low_density(&self, p: f64) -> bool {
        !(p > DENSITY_FLOOR * self.peak)
    }
}

#[derive(Clone, Debug)]
pub enum DensityKind {
    Gaussian(GaussianFamily),
    /// Kernel fits keyed by grid index.
    Kernel { grid: TimeGrid, fits: BTreeMap<usize, KernelDensity> },
    /// Degenerate law of a σ = 0 process.
    Dirac,
}

/// Marginal densities `p_t` together with the diffusion matrix they are
/// paired with in `∂_j(a^{kj} p_t)`.
#[derive(Clone)]
pub struct DensityModel {
    dim: usize,
    kind: DensityKind,
    dispersion: Dispersion,
}

impl std::fmt::Debug for DensityModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DensityModel").field("dim", &self.dim).field("kind", &self.kind).finish()
    }
}

impl DensityModel {
    /// Closed-form Gaussian marginals of a linear diffusion whose initial law
    /// holds at `t0`.
    pub fn analytic_gaussian(model: &DiffusionModel, t0: f64) -> Result<Self> {
        Ok(DensityModel {
            dim: model.dim(),
            kind: DensityKind::Gaussian(GaussianFamily::from_model(model, t0)?),
            dispersion: model.dispersion().clone(),
        })
    }

    pub fn dirac(dim: usize) -> Self {
        DensityModel {
            dim,
            kind: DensityKind::Dirac,
            dispersion: Dispersion::Constant(vec![0.0; dim * dim]),
        }
    }

    /// Kernel density fits at the given grid indices.
    pub fn kernel_series(ens: &PathEnsemble, rule: BandwidthRule, dispersion: &Dispersion, indices: &[usize]) -> Result<Self> {
        use rayon::prelude::*;
        let fits = indices
            .par_iter()
            .map(|&m| Ok((m, KernelDensity::fit(ens.slice(m), ens.dim(), rule)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DensityModel {
            dim: ens.dim(),
            kind: DensityKind::Kernel {
                grid: *ens.grid(),
                fits: fits.into_iter().collect(),
            },
            dispersion: dispersion.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &DensityKind {
        &self.kind
    }

    pub fn dispersion(&self) -> &Dispersion {
        &self.dispersion
    }

    pub fn is_dirac(&self) -> bool {
        matches!(self.kind, DensityKind::Dirac)
    }

    pub fn gaussian(&self) -> Option<&GaussianFamily> {
        match &self.kind {
            DensityKind::Gaussian(g) => Some(g),
            _ => None,
        }
    }

    pub(crate) fn kernel_at(&self, m: usize) -> Option<&KernelDensity> {
        match &self.kind {
            DensityKind::Kernel { fits, .. } => fits.get(&m),
            _ => None,
        }
    }

    /// `p_t(x)`, `∇p_t(x)` and `∂_j(a^{kj}p_t)(x)`.
    pub fn density_at(&self, t: f64, x: &[f64]) -> Result<DensityPoint> {
        let d = self.dim;
        check_dim(d, x.len())?;
        let (p, grad_p, low) = match &self.kind {
            DensityKind::Dirac => {
                return Ok(DensityPoint {
                    p: 1.0,
                    grad_p: vec![0.0; d],
                    div_a_p: vec![0.0; d],
                    low_density: false,
                })
            }
            DensityKind::Gaussian(g) => {
                let marg = g.marginal(t);
                let p = marg.density(x);
                let mut score = vec![0.0; d];
                marg.score_into(x, &mut score);
                let grad = score.iter().map(|s| if p > 0.0 { s * p } else { 0.0 }).collect();
                (p, grad, marg.is_low_density(x))
            }
            DensityKind::Kernel { grid, fits } => {
                let m = grid
                    .index_of(t)
                    .filter(|m| fits.contains_key(m))
                    .ok_or_else(|| Error::input(format!("no kernel density fitted at t = {t}")))?;
                let kde = &fits[&m];
                let (p, grad) = kde.eval(x);
                (p, grad, kde.is_low_density(p))
            }
        };
        let mut a = vec![0.0; d * d];
        self.dispersion.diffusion_matrix_into(d, t, x, &mut a);
        let mut div_a = vec![0.0; d];
        self.dispersion.divergence_into(d, t, x, &mut div_a);
        let div_a_p = (0..d)
            .map(|k| div_a[k] * p + (0..d).map(|j| a[k * d + j] * grad_p[j]).sum::<f64>())
            .collect();
        Ok(DensityPoint {
            p,
            grad_p,
            div_a_p,
            low_density: low,
        })
    }
}

/// Kernel density of the cross-section of `ens` at time `t`.
pub fn kde_fit(ens: &PathEnsemble, t: f64, rule: BandwidthRule, dispersion: &Dispersion) -> Result<DensityModel> {
    let m = ens
        .grid()
        .index_of(t)
        .ok_or_else(|| Error::input(format!("t = {t} is not on the ensemble grid")))?;
    DensityModel::kernel_series(ens, rule, dispersion, &[m])
}
