//! Monte Carlo summaries and least-squares helpers shared by the estimators.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Sample mean and standard error of the mean (two-pass, fixed summation order).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Mean of complex samples with separate standard errors for the real and
/// imaginary parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComplexMean {
    pub mean: Complex64,
    pub stderr_re: f64,
    pub stderr_im: f64,
}

impl ComplexMean {
    pub fn from_samples(zs: &[Complex64]) -> Self {
        let re: Vec<f64> = zs.iter().map(|z| z.re).collect();
        let im: Vec<f64> = zs.iter().map(|z| z.im).collect();
        let (mr, sr) = mean_stderr(&re);
        let (mi, si) = mean_stderr(&im);
        ComplexMean {
            mean: Complex64::new(mr, mi),
            stderr_re: sr,
            stderr_im: si,
        }
    }

    /// Standard error of the complex mean measured in modulus.
    pub fn stderr(&self) -> f64 {
        self.stderr_re.hypot(self.stderr_im)
    }
}

/// Trapezoidal weights for (possibly non-uniform) abscissae.
pub fn trapezoid_weights(times: &[f64]) -> Vec<f64> {
    let n = times.len();
    let mut w = vec![0.0; n];
    for i in 1..n {
        let h = times[i] - times[i - 1];
        w[i - 1] += 0.5 * h;
        w[i] += 0.5 * h;
    }
    w
}

/// Ordinary least squares fit `y ≈ intercept + slope·x`.
pub fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Weighted linear fit in time. `slope_coefficients` expresses the fitted
/// slope as the linear functional `Σ c_i y_i`, which lets callers propagate
/// correlated errors through it.
#[derive(Clone, Debug)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_coefficients: Vec<f64>,
}

pub fn weighted_linear_fit(ts: &[f64], ys: &[f64], weights: &[f64]) -> LinearFit {
    let sw: f64 = weights.iter().sum();
    let tbar = ts.iter().zip(weights).map(|(t, w)| t * w).sum::<f64>() / sw;
    let ybar = ys.iter().zip(weights).map(|(y, w)| y * w).sum::<f64>() / sw;
    let stt: f64 = ts
        .iter()
        .zip(weights)
        .map(|(t, w)| w * (t - tbar).powi(2))
        .sum();
    let coeffs: Vec<f64> = ts
        .iter()
        .zip(weights)
        .map(|(t, w)| w * (t - tbar) / stt)
        .collect();
    let slope = coeffs.iter().zip(ys).map(|(c, y)| c * y).sum::<f64>();
    LinearFit {
        slope,
        intercept: ybar - slope * tbar,
        slope_coefficients: coeffs,
    }
}

/// Two-sided standard normal quantile for a confidence level in (0, 1).
pub fn two_sided_z(level: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    normal.inverse_cdf(0.5 + 0.5 * level)
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
