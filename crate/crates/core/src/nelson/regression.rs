//! Conditional means `E[Y | X = x_n]` at the cross-section samples.

use super::{EstimatorConfig, Regression, MIN_REGRESSION_SAMPLES};
use crate::diffusion::DENSITY_FLOOR;
use crate::smoothing::{KernelLattice, Taps};
use crate::{Error, Result};

/// Fitted values (`n × channels`) and validity flags.
pub(crate) struct Fitted {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Coordinates with no spread carry no information and are dropped; returns
/// the remaining coordinates as a packed `n × active` array.
fn active_coordinates(points: &[f64], dim: usize) -> (Vec<f64>, usize) {
    let n = points.len() / dim;
    let active: Vec<usize> = (0..dim)
        .filter(|&k| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for p in points.chunks_exact(dim) {
                lo = lo.min(p[k]);
                hi = hi.max(p[k]);
            }
            hi - lo > 1e-12 * lo.abs().max(hi.abs()).max(1.0)
        })
        .collect();
    if active.len() == dim {
        return (points.to_vec(), dim);
    }
    let mut packed = Vec::with_capacity(n * active.len());
    for p in points.chunks_exact(dim) {
        packed.extend(active.iter().map(|&k| p[k]));
    }
    (packed, active.len())
}

pub(crate) fn conditional_mean(
    points: &[f64],
    dim: usize,
    targets: &[f64],
    channels: usize,
    cfg: &EstimatorConfig,
) -> Result<Fitted> {
    let n = points.len() / dim;
    if matches!(cfg.regression, Regression::Pathwise) {
        return Ok(Fitted {
            values: targets.to_vec(),
            valid: vec![true; n],
        });
    }
    if n < MIN_REGRESSION_SAMPLES {
        return Err(Error::Estimation(format!(
            "regression needs at least {MIN_REGRESSION_SAMPLES} paths, got {n}"
        )));
    }
    let (pts, active) = active_coordinates(points, dim);
    if active == 0 {
        // every path sits at the same state: the conditional mean is the mean
        let mut mean = vec![0.0; channels];
        for y in targets.chunks_exact(channels) {
            for (m, v) in mean.iter_mut().zip(y) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        return Ok(Fitted {
            values: mean.repeat(n),
            valid: vec![true; n],
        });
    }
    match &cfg.regression {
        Regression::Knn { k } => Ok(Fitted {
            values: Neighbours::new(&pts, active).mean_all(targets, channels, *k),
            valid: vec![true; n],
        }),
        Regression::NadarayaWatson { bandwidth } => {
            nadaraya_watson(&pts, active, targets, channels, bandwidth.bandwidths(&pts, active), cfg)
        }
        Regression::Pathwise => unreachable!(),
    }
}

fn nadaraya_watson(
    pts: &[f64],
    dim: usize,
    targets: &[f64],
    channels: usize,
    bandwidth: Vec<f64>,
    cfg: &EstimatorConfig,
) -> Result<Fitted> {
    let n = pts.len() / dim;
    if bandwidth.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
        return Err(Error::Estimation("regression bandwidth must be positive".into()));
    }
    let per_bw = match dim {
        1 => 8.0,
        2 => 5.0,
        _ => 3.0,
    };
    let lattice = KernelLattice::new(pts, dim, &bandwidth, per_bw, 1 << 22);
    let width = 1 + channels;
    let mut weighted = Vec::with_capacity(n * width);
    for y in targets.chunks_exact(channels) {
        weighted.push(1.0);
        weighted.extend_from_slice(y);
    }
    let mut sums = lattice.bin(pts, &weighted, width);
    lattice.convolve(&mut sums, width, &vec![vec![Taps::Gauss; dim]; width]);
    let peak = sums.iter().step_by(width).fold(0.0f64, |m, v| m.max(*v));

    let mut values = vec![0.0; n * channels];
    let mut valid = vec![true; n];
    let mut fallback = Vec::new();
    let mut out = vec![0.0; width];
    for (i, x) in pts.chunks_exact(dim).enumerate() {
        lattice.interpolate(&sums, width, x, &mut out);
        let mass = out[0];
        if cfg.mask_low_density && !(mass > DENSITY_FLOOR * peak) {
            valid[i] = false;
            values[i * channels..(i + 1) * channels].iter_mut().for_each(|v| *v = f64::NAN);
        } else if mass < cfg.min_kernel_mass {
            fallback.push(i);
        } else {
            for c in 0..channels {
                values[i * channels + c] = out[1 + c] / mass;
            }
        }
    }
    if !fallback.is_empty() {
        let nb = Neighbours::new(pts, dim);
        let mut idx = Vec::new();
        for i in fallback {
            nb.nearest(i, cfg.knn_fallback, &mut idx);
            mean_of(&idx, targets, channels, &mut values[i * channels..(i + 1) * channels]);
        }
    }
    Ok(Fitted { values, valid })
}

fn mean_of(idx: &[usize], targets: &[f64], channels: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for &j in idx {
        for c in 0..channels {
            out[c] += targets[j * channels + c];
        }
    }
    out.iter_mut().for_each(|o| *o /= idx.len() as f64);
}

/// Exact nearest neighbours: a sorted sweep in one dimension, brute force
/// (`O(n)` per query) otherwise.
struct Neighbours<'a> {
    pts: &'a [f64],
    dim: usize,
    order: Vec<usize>,
    rank: Vec<usize>,
}

impl<'a> Neighbours<'a> {
    fn new(pts: &'a [f64], dim: usize) -> Self {
        let n = pts.len() / dim;
        let (mut order, mut rank) = (Vec::new(), Vec::new());
        if dim == 1 {
            order = (0..n).collect();
            order.sort_by(|&a, &b| pts[a].total_cmp(&pts[b]).then(a.cmp(&b)));
            rank = vec![0; n];
            for (r, &i) in order.iter().enumerate() {
                rank[i] = r;
            }
        }
        Neighbours { pts, dim, order, rank }
    }

    fn nearest(&self, i: usize, k: usize, out: &mut Vec<usize>) {
        let n = self.pts.len() / self.dim;
        let k = k.min(n);
        out.clear();
        if self.dim == 1 {
            let x = self.pts[i];
            let r = self.rank[i];
            let (mut lo, mut hi) = (r, r + 1); // window [lo, hi) in sorted order
            while hi - lo < k {
                let take_lo = if lo == 0 {
                    false
                } else if hi == n {
                    true
                } else {
                    (x - self.pts[self.order[lo - 1]]) <= (self.pts[self.order[hi]] - x)
                };
                if take_lo {
                    lo -= 1;
                } else {
                    hi += 1;
                }
            }
            out.extend_from_slice(&self.order[lo..hi]);
            return;
        }
        let xi = &self.pts[i * self.dim..(i + 1) * self.dim];
        let mut dist: Vec<(f64, usize)> = self
            .pts
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(j, p)| (p.iter().zip(xi).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), j))
            .collect();
        dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(dist[..k].iter().map(|(_, j)| *j));
        out.sort_unstable();
    }

    fn mean_all(&self, targets: &[f64], channels: usize, k: usize) -> Vec<f64> {
        let n = self.pts.len() / self.dim;
        let mut values = vec![0.0; n * channels];
        let mut idx = Vec::new();
        for i in 0..n {
            self.nearest(i, k, &mut idx);
            mean_of(&idx, targets, channels, &mut values[i * channels..(i + 1) * channels]);
        }
        values
    }
}
