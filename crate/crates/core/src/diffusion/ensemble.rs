use std::io::{BufRead, Read, Write};

use super::TimeGrid;
use crate::error::check_dim;
use crate::{Error, Result};

/// `N` sample paths of a d-dimensional process on a uniform grid.
///
/// Samples are stored time-major (`[time][path][component]`) so that the
/// cross-section at one time, which every conditional-expectation estimator
/// works on, is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    dim: usize,
    values: Vec<f64>,
    seed: u64,
    provenance: String,
}

/// Magic bytes of the binary ensemble dump.
pub const ENSEMBLE_MAGIC: &[u8; 8] = b"STVARENS";
pub const ENSEMBLE_VERSION: u32 = 1;

impl PathEnsemble {
    /// Wraps time-major samples.
    pub fn from_values(grid: TimeGrid, n_paths: usize, dim: usize, values: Vec<f64>, seed: u64, provenance: impl Into<String>) -> Result<Self> {
        if n_paths == 0 || dim == 0 {
            return Err(Error::input("ensemble needs at least one path and one dimension"));
        }
        check_dim(grid.len() * n_paths * dim, values.len())?;
        Ok(PathEnsemble {
            grid,
            n_paths,
            dim,
            values,
            seed,
            provenance: provenance.into(),
        })
    }

    /// Builds an ensemble from `f(t, path, out)`.
    pub fn from_fn(grid: TimeGrid, n_paths: usize, dim: usize, mut f: impl FnMut(f64, usize, &mut [f64])) -> Result<Self> {
        let mut values = vec![0.0; grid.len() * n_paths * dim];
        for m in 0..grid.len() {
            let t = grid.time(m);
            for n in 0..n_paths {
                let off = (m * n_paths + n) * dim;
                f(t, n, &mut values[off..off + dim]);
            }
        }
        Self::from_values(grid, n_paths, dim, values, 0, "constructed")
    }

    /// One deterministic trajectory given as `(steps+1)×dim` row-major samples.
    pub fn from_trajectory(grid: TimeGrid, dim: usize, positions: &[f64]) -> Result<Self> {
        Self::from_values(grid, 1, dim, positions.to_vec(), 0, "embedded trajectory")
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// All paths at grid index `m`, `n_paths × dim`.
    pub fn slice(&self, m: usize) -> &[f64] {
        let w = self.n_paths * self.dim;
        &self.values[m * w..(m + 1) * w]
    }

    pub fn state(&self, m: usize, path: usize) -> &[f64] {
        let off = (m * self.n_paths + path) * self.dim;
        &self.values[off..off + self.dim]
    }

    /// Applies `f(t, x_in, x_out)` to every sample.
    pub fn map_states(&self, provenance: impl Into<String>, f: impl Fn(f64, &[f64], &mut [f64])) -> Self {
        let mut values = vec![0.0; self.values.len()];
        let w = self.n_paths * self.dim;
        for m in 0..self.grid.len() {
            let t = self.grid.time(m);
            for (src, dst) in self.values[m * w..(m + 1) * w]
                .chunks_exact(self.dim)
                .zip(values[m * w..(m + 1) * w].chunks_exact_mut(self.dim))
            {
                f(t, src, dst);
            }
        }
        PathEnsemble {
            values,
            provenance: provenance.into(),
            ..self.clone()
        }
    }

    /// Per-component sample mean and variance at grid index `m`.
    pub fn moments(&self, m: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let slice = self.slice(m);
        let n = self.n_paths as f64;
        let mut mean = vec![0.0; d];
        for x in slice.chunks_exact(d) {
            for k in 0..d {
                mean[k] += x[k];
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let mut var = vec![0.0; d];
        for x in slice.chunks_exact(d) {
            for k in 0..d {
                var[k] += (x[k] - mean[k]).powi(2);
            }
        }
        let denom = (self.n_paths.max(2) - 1) as f64;
        var.iter_mut().for_each(|v| *v /= denom);
        (mean, var)
    }

    /// CSV with columns `path,t,x_1..x_d`, path-major.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "path,t")?;
        for k in 1..=self.dim {
            write!(w, ",x_{k}")?;
        }
        writeln!(w)?;
        for n in 0..self.n_paths {
            for m in 0..self.grid.len() {
                write!(w, "{n},{}", self.grid.time(m))?;
                for v in self.state(m, n) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    /// Binary dump, little-endian throughout:
    ///
    /// ```text
    /// magic     [u8; 8]  "STVARENS"
    /// version   u32      1
    /// d         u32
    /// N         u64      paths
    /// M         u64      steps (M+1 time points)
    /// a, b      f64
    /// seed      u64
    /// samples   f64 × N·(M+1)·d, row-major over (path, time, component)
    /// ```
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(ENSEMBLE_MAGIC)?;
        w.write_all(&ENSEMBLE_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.n_paths as u64).to_le_bytes())?;
        w.write_all(&(self.grid.steps() as u64).to_le_bytes())?;
        w.write_all(&self.grid.start().to_le_bytes())?;
        w.write_all(&self.grid.end().to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for n in 0..self.n_paths {
            for m in 0..self.grid.len() {
                for v in self.state(m, n) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        fn take<const K: usize, R: Read>(r: &mut R) -> Result<[u8; K]> {
            let mut buf = [0u8; K];
            r.read_exact(&mut buf)
                .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
            Ok(buf)
        }
        let magic: [u8; 8] = take(&mut r)?;
        if &magic != ENSEMBLE_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != ENSEMBLE_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(take(&mut r)?) as usize;
        let n_paths = u64::from_le_bytes(take(&mut r)?) as usize;
        let steps = u64::from_le_bytes(take(&mut r)?) as usize;
        let a = f64::from_le_bytes(take(&mut r)?);
        let b = f64::from_le_bytes(take(&mut r)?);
        let seed = u64::from_le_bytes(take(&mut r)?);
        let grid = TimeGrid::new(a, b, steps)?;
        let mut values = vec![0.0; grid.len() * n_paths * dim];
        let mut buf = [0u8; 8];
        for n in 0..n_paths {
            for m in 0..grid.len() {
                for k in 0..dim {
                    r.read_exact(&mut buf)
                        .map_err(|e| Error::Format(format!("truncated samples: {e}")))?;
                    values[(m * n_paths + n) * dim + k] = f64::from_le_bytes(buf);
                }
            }
        }
        Self::from_values(grid, n_paths, dim, values, seed, "binary dump")
    }

    /// Reads the CSV written by [`write_csv`](Self::write_csv). The grid is
    /// reconstructed from the first path's time column.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty csv".into()))?
            .map_err(|e| Error::Format(e.to_string()))?;
        let dim = header.split(',').count().checked_sub(2).filter(|d| *d > 0)
            .ok_or_else(|| Error::Format("csv header needs path,t,x_1..".into()))?;
        let mut rows: Vec<(usize, f64, Vec<f64>)> = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Format(e.to_string()))?;
            let mut it = line.split(',');
            let parse_err = || Error::Format(format!("bad csv row {}", i + 2));
            let path: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
            let t: f64 = it.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
            let x: Vec<f64> = it.map(|s| s.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| parse_err())?;
            if x.len() != dim {
                return Err(parse_err());
            }
            rows.push((path, t, x));
        }
        let n_paths = rows.iter().map(|r| r.0).max().map(|p| p + 1).unwrap_or(0);
        if n_paths == 0 || rows.len() % n_paths != 0 {
            return Err(Error::Format("ragged csv".into()));
        }
        let len = rows.len() / n_paths;
        let grid = TimeGrid::new(rows[0].1, rows[len - 1].1, len - 1)?;
        let mut values = vec![0.0; rows.len() * dim];
        for (i, (path, _, x)) in rows.into_iter().enumerate() {
            let m = i % len;
            values[(m * n_paths + path) * dim..(m * n_paths + path + 1) * dim].copy_from_slice(&x);
        }
        Self::from_values(grid, n_paths, dim, values, 0, "csv")
    }
}
