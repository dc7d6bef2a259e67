use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Uniform grid `t_m = a + mΔt`, `m = 0..=steps`, over `J = [a, b]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    a: f64,
    b: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(a: f64, b: f64, steps: usize) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::input(format!("time grid needs finite a < b, got [{a}, {b}]")));
        }
        if steps < 2 {
            return Err(Error::input("time grid needs at least 2 steps"));
        }
        Ok(TimeGrid { a, b, steps })
    }

    pub fn start(&self) -> f64 {
        self.a
    }

    pub fn end(&self) -> f64 {
        self.b
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of grid points, `steps + 1`.
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        (self.b - self.a) / self.steps as f64
    }

    pub fn time(&self, m: usize) -> f64 {
        if m == self.steps {
            self.b
        } else {
            self.a + m as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|m| self.time(m)).collect()
    }

    /// Grid index of `t`, if `t` lies on the grid (to 1e-9 of a step).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let u = (t - self.a) / self.dt();
        let m = u.round();
        if m < 0.0 || m > self.steps as f64 || (u - m).abs() > 1e-9 {
            return None;
        }
        Some(m as usize)
    }

    /// Number of whole steps in a duration, if it is a positive grid multiple.
    pub fn steps_in(&self, duration: f64) -> Option<usize> {
        let u = duration / self.dt();
        let m = u.round();
        if m < 1.0 || (u - m).abs() > 1e-9 {
            return None;
        }
        Some(m as usize)
    }
}

/// Grid indices at which a derivative field is evaluated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSelection {
    #[default]
    All,
    /// Every `n`-th index, always including the last one.
    Stride(usize),
    Indices(Vec<usize>),
}

impl TimeSelection {
    pub fn at_times(grid: &TimeGrid, times: &[f64]) -> Result<Self> {
        let idx = times
            .iter()
            .map(|&t| {
                grid.index_of(t)
                    .ok_or_else(|| Error::input(format!("t = {t} is not on the grid")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TimeSelection::Indices(idx))
    }

    pub fn resolve(&self, grid: &TimeGrid) -> Result<Vec<usize>> {
        let m = grid.steps();
        match self {
            TimeSelection::All => Ok((0..=m).collect()),
            TimeSelection::Stride(0) => Err(Error::input("time stride must be positive")),
            TimeSelection::Stride(s) => {
                let mut v: Vec<usize> = (0..=m).step_by(*s).collect();
                if *v.last().unwrap() != m {
                    v.push(m);
                }
                Ok(v)
            }
            TimeSelection::Indices(idx) => {
                let mut v = idx.clone();
                v.sort_unstable();
                v.dedup();
                if v.iter().any(|&i| i > m) {
                    return Err(Error::input("time index beyond the grid"));
                }
                if v.is_empty() {
                    return Err(Error::input("empty time selection"));
                }
                Ok(v)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_points() {
        let g = TimeGrid::new(1.0, 2.0, 1000).unwrap();
        assert_eq!(g.time(0), 1.0);
        assert_eq!(g.time(1000), 2.0);
        assert!((g.dt() - 1e-3).abs() < 1e-15);
        assert_eq!(g.index_of(1.5), Some(500));
        assert_eq!(g.index_of(1.5004), None);
        assert_eq!(g.steps_in(0.05), Some(50));
    }

    #[test]
    fn invalid_grids() {
        assert!(TimeGrid::new(2.0, 1.0, 10).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn stride_includes_endpoint() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        assert_eq!(TimeSelection::Stride(4).resolve(&g).unwrap(), vec![0, 4, 8, 10]);
    }
}
