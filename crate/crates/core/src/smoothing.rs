//! Binned Gaussian kernel sums on a regular lattice.
//!
//! Samples are spread onto lattice nodes by multilinear binning, convolved
//! axis by axis with a truncated Gaussian (or its derivative) and read back by
//! multilinear interpolation. Cost is O(N·2^d + cells·taps) instead of O(N²).

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Taps {
    /// `exp(−u²/2)`
    Gauss,
    /// `∂_x exp(−(x/h)²/2) = −(u/h) exp(−u²/2)`
    GaussDerivative,
}

/// Number of bandwidths covered by the truncated kernel.
const CUTOFF: f64 = 5.0;

#[derive(Clone, Debug)]
pub(crate) struct KernelLattice {
    dim: usize,
    lo: Vec<f64>,
    step: Vec<f64>,
    shape: Vec<usize>,
    strides: Vec<usize>,
    bandwidth: Vec<f64>,
}

impl KernelLattice {
    /// Lattice covering the bounding box of `points` (N×dim, row-major) with
    /// roughly `per_bandwidth` nodes per bandwidth, capped at `max_cells`.
    /// Every axis must have positive spread and positive bandwidth.
    pub fn new(points: &[f64], dim: usize, bandwidth: &[f64], per_bandwidth: f64, max_cells: usize) -> Self {
        let n = points.len() / dim;
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for p in points.chunks_exact(dim) {
            for k in 0..dim {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        debug_assert!(n > 0);
        let mut scale = 1.0;
        loop {
            let step: Vec<f64> = bandwidth.iter().map(|h| scale * h / per_bandwidth).collect();
            let shape: Vec<usize> = (0..dim)
                .map(|k| (((hi[k] - lo[k]) / step[k]).ceil() as usize + 1).max(2))
                .collect();
            let cells: usize = shape.iter().product();
            if cells <= max_cells || scale > 64.0 {
                let mut strides = vec![1; dim];
                for k in (0..dim.saturating_sub(1)).rev() {
                    strides[k] = strides[k + 1] * shape[k + 1];
                }
                return KernelLattice {
                    dim,
                    lo,
                    step,
                    shape,
                    strides,
                    bandwidth: bandwidth.to_vec(),
                };
            }
            scale *= 1.25;
        }
    }

    pub fn cells(&self) -> usize {
        self.shape.iter().product()
    }

    /// Base node and fractional offsets of the cell containing `x`.
    fn locate(&self, x: &[f64], base: &mut [usize], frac: &mut [f64]) {
        for k in 0..self.dim {
            let u = ((x[k] - self.lo[k]) / self.step[k]).max(0.0);
            let i = (u.floor() as usize).min(self.shape[k] - 2);
            base[k] = i;
            frac[k] = (u - i as f64).clamp(0.0, 1.0);
        }
    }

    fn for_each_corner(&self, base: &[usize], frac: &[f64], mut f: impl FnMut(usize, f64)) {
        for corner in 0..(1usize << self.dim) {
            let mut idx = 0;
            let mut w = 1.0;
            for k in 0..self.dim {
                let up = (corner >> k) & 1 == 1;
                idx += (base[k] + up as usize) * self.strides[k];
                w *= if up { frac[k] } else { 1.0 - frac[k] };
            }
            f(idx, w);
        }
    }

    /// Spreads per-sample channel values onto the lattice. `values` is
    /// N×channels; the result is cells×channels.
    pub fn bin(&self, points: &[f64], values: &[f64], channels: usize) -> Vec<f64> {
        let mut grid = vec![0.0; self.cells() * channels];
        let mut base = vec![0; self.dim];
        let mut frac = vec![0.0; self.dim];
        for (p, v) in points.chunks_exact(self.dim).zip(values.chunks_exact(channels)) {
            self.locate(p, &mut base, &mut frac);
            self.for_each_corner(&base, &frac, |idx, w| {
                let cell = &mut grid[idx * channels..(idx + 1) * channels];
                for (g, val) in cell.iter_mut().zip(v) {
                    *g += w * val;
                }
            });
        }
        grid
    }

    fn taps(&self, axis: usize, kind: Taps) -> (usize, Vec<f64>) {
        let h = self.bandwidth[axis];
        let delta = self.step[axis];
        let half = ((CUTOFF * h / delta).ceil() as usize).min(self.shape[axis] - 1);
        let taps = (0..=2 * half)
            .map(|i| {
                let u = (i as f64 - half as f64) * delta / h;
                let g = (-0.5 * u * u).exp();
                match kind {
                    Taps::Gauss => g,
                    Taps::GaussDerivative => -u / h * g,
                }
            })
            .collect();
        (half, taps)
    }

    /// Convolves every channel along every axis; `kernels[c][k]` selects the
    /// taps used for channel `c` on axis `k`.
    pub fn convolve(&self, grid: &mut Vec<f64>, channels: usize, kernels: &[Vec<Taps>]) {
        let cells = self.cells();
        for axis in 0..self.dim {
            let gauss = self.taps(axis, Taps::Gauss);
            let deriv = self.taps(axis, Taps::GaussDerivative);
            let stride = self.strides[axis];
            let len = self.shape[axis] as isize;
            let mut out = vec![0.0; cells * channels];
            for cell in 0..cells {
                let pos = ((cell / stride) % self.shape[axis]) as isize;
                for c in 0..channels {
                    let (half, taps) = match kernels[c][axis] {
                        Taps::Gauss => (&gauss.0, &gauss.1),
                        Taps::GaussDerivative => (&deriv.0, &deriv.1),
                    };
                    let half = *half as isize;
                    let mut acc = 0.0;
                    // out[i] = Σ_j in[i − j]·taps[j + half]
                    let jmin = (pos - (len - 1)).max(-half);
                    let jmax = pos.min(half);
                    for j in jmin..=jmax {
                        let src = (cell as isize - j * stride as isize) as usize;
                        acc += grid[src * channels + c] * taps[(j + half) as usize];
                    }
                    out[cell * channels + c] = acc;
                }
            }
            *grid = out;
        }
    }

    /// Multilinear read-back of all channels at `x`.
    pub fn interpolate(&self, grid: &[f64], channels: usize, x: &[f64], out: &mut [f64]) {
        let mut base = vec![0; self.dim];
        let mut frac = vec![0.0; self.dim];
        self.locate(x, &mut base, &mut frac);
        out[..channels].iter_mut().for_each(|o| *o = 0.0);
        self.for_each_corner(&base, &frac, |idx, w| {
            for c in 0..channels {
                out[c] += w * grid[idx * channels + c];
            }
        });
    }
}
