use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::diffusion::{PathEnsemble, TimeGrid};
use crate::stats::ComplexMean;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    /// `D`
    Forward,
    /// `D₊`
    Backward,
    /// `𝒟`
    Complex,
    /// `𝒟̄`
    Conjugate,
    /// `𝒟²`
    Second,
    /// `𝒟̄𝒟`
    ConjugateSecond,
    /// `𝒟f(t, X_t)` or `𝒟̄f(t, X_t)` for a user function.
    Function,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Regression,
    Analytic,
    /// Classical difference quotients along each path (σ = 0).
    PathDifference,
    NestedRegression,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Regression => "regression",
            Method::Analytic => "analytic",
            Method::PathDifference => "path_difference",
            Method::NestedRegression => "nested_regression",
        }
    }
}

/// Per-path, per-time complex `d`-vectors on a subset ("slots") of the grid.
#[derive(Clone, Debug)]
pub struct DerivativeField {
    grid: TimeGrid,
    slots: Vec<usize>,
    n_paths: usize,
    dim: usize,
    values: Vec<Complex64>,
    valid: Vec<bool>,
    operator: Operator,
    method: Method,
    stderr: Vec<f64>,
    warnings: Vec<String>,
}

/// Values and validity flags of one slot, `n_paths × dim` and `n_paths`.
pub(crate) type SlotData = (Vec<Complex64>, Vec<bool>);

impl DerivativeField {
    pub(crate) fn assemble(
        grid: TimeGrid,
        slots: Vec<usize>,
        n_paths: usize,
        dim: usize,
        parts: Vec<SlotData>,
        operator: Operator,
        method: Method,
    ) -> Self {
        debug_assert_eq!(parts.len(), slots.len());
        let mut values = Vec::with_capacity(slots.len() * n_paths * dim);
        let mut valid = Vec::with_capacity(slots.len() * n_paths);
        for (v, ok) in parts {
            debug_assert_eq!(v.len(), n_paths * dim);
            values.extend(v);
            valid.extend(ok);
        }
        Self::from_buffers(grid, slots, n_paths, dim, values, valid, operator, method)
    }

    #[allow(clippy::too_many_arguments)]
    fn from_buffers(
        grid: TimeGrid,
        slots: Vec<usize>,
        n_paths: usize,
        dim: usize,
        values: Vec<Complex64>,
        valid: Vec<bool>,
        operator: Operator,
        method: Method,
    ) -> Self {
        let mut field = DerivativeField {
            grid,
            slots,
            n_paths,
            dim,
            values,
            valid,
            operator,
            method,
            stderr: Vec::new(),
            warnings: Vec::new(),
        };
        field.stderr = (0..field.slots.len())
            .map(|s| {
                field
                    .slot_means(s)
                    .iter()
                    .map(ComplexMean::stderr)
                    .filter(|e| e.is_finite())
                    .fold(0.0, f64::max)
            })
            .collect();
        field
    }

    pub(crate) fn with_warning(mut self, w: impl Into<String>) -> Self {
        self.warnings.push(w.into());
        self
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Grid indices carried by the field, ascending.
    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn times(&self) -> Vec<f64> {
        self.slots.iter().map(|&m| self.grid.time(m)).collect()
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn operator(&self) -> Operator {
        self.operator
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Standard error of the cross-sectional mean per slot (worst component).
    pub fn stderr(&self) -> &[f64] {
        &self.stderr
    }

    pub fn slot_of(&self, m: usize) -> Option<usize> {
        self.slots.binary_search(&m).ok()
    }

    pub fn slot_at(&self, t: f64) -> Option<usize> {
        self.grid.index_of(t).and_then(|m| self.slot_of(m))
    }

    pub fn value(&self, slot: usize, path: usize) -> &[Complex64] {
        let i = (slot * self.n_paths + path) * self.dim;
        &self.values[i..i + self.dim]
    }

    pub fn slot_values(&self, slot: usize) -> &[Complex64] {
        let w = self.n_paths * self.dim;
        &self.values[slot * w..(slot + 1) * w]
    }

    pub fn is_valid(&self, slot: usize, path: usize) -> bool {
        self.valid[slot * self.n_paths + path]
    }

    pub fn slot_valid(&self, slot: usize) -> &[bool] {
        &self.valid[slot * self.n_paths..(slot + 1) * self.n_paths]
    }

    pub fn valid_count(&self, slot: usize) -> usize {
        self.slot_valid(slot).iter().filter(|v| **v).count()
    }

    /// Fraction of masked (path, slot) entries.
    pub fn masked_fraction(&self) -> f64 {
        if self.valid.is_empty() {
            return 0.0;
        }
        self.valid.iter().filter(|v| !**v).count() as f64 / self.valid.len() as f64
    }

    /// Cross-sectional mean of each component over valid paths.
    pub fn slot_means(&self, slot: usize) -> Vec<ComplexMean> {
        (0..self.dim)
            .map(|k| {
                let zs: Vec<Complex64> = (0..self.n_paths)
                    .filter(|&n| self.is_valid(slot, n))
                    .map(|n| self.value(slot, n)[k])
                    .collect();
                ComplexMean::from_samples(&zs)
            })
            .collect()
    }

    /// `𝒟̄` from `𝒟` (and back): pointwise complex conjugate.
    pub fn conjugate(&self) -> Self {
        let operator = match self.operator {
            Operator::Complex => Operator::Conjugate,
            Operator::Conjugate => Operator::Complex,
            other => other,
        };
        DerivativeField {
            grid: self.grid,
            slots: self.slots.clone(),
            n_paths: self.n_paths,
            dim: self.dim,
            values: self.values.iter().map(|z| z.conj()).collect(),
            valid: self.valid.clone(),
            operator,
            method: self.method,
            stderr: self.stderr.clone(),
            warnings: self.warnings.clone(),
        }
    }

    /// Applies a per-entry transform, keeping the mask.
    pub fn map(&self, operator: Operator, f: impl Fn(usize, usize, &[Complex64], &mut [Complex64])) -> Self {
        let d = self.dim;
        let mut values = self.values.clone();
        for s in 0..self.slots.len() {
            for n in 0..self.n_paths {
                let i = (s * self.n_paths + n) * d;
                f(s, n, &self.values[i..i + d], &mut values[i..i + d]);
            }
        }
        let mut out = Self::from_buffers(
            self.grid,
            self.slots.clone(),
            self.n_paths,
            d,
            values,
            self.valid.clone(),
            operator,
            self.method,
        );
        out.warnings = self.warnings.clone();
        out
    }

    /// Checks that this field was computed over `ens`.
    pub fn check_matches(&self, ens: &PathEnsemble) -> Result<()> {
        if ens.grid() != &self.grid || ens.n_paths() != self.n_paths {
            return Err(Error::input("derivative field and ensemble have different grids or path counts"));
        }
        crate::error::check_dim(self.dim, ens.dim())
    }

    /// CSV with columns `path,t,re_1,im_1,…,re_d,im_d,mask,method`; `mask` is
    /// 1 for masked entries.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "path,t")?;
        for k in 1..=self.dim {
            write!(w, ",re_{k},im_{k}")?;
        }
        writeln!(w, ",mask,method")?;
        let method = self.method.as_str();
        for n in 0..self.n_paths {
            for (s, &m) in self.slots.iter().enumerate() {
                write!(w, "{n},{}", self.grid.time(m))?;
                for z in self.value(s, n) {
                    write!(w, ",{},{}", z.re, z.im)?;
                }
                writeln!(w, ",{},{method}", u8::from(!self.is_valid(s, n)))?;
            }
        }
        Ok(())
    }
}

fn l2_norm_at(values: &[Complex64], valid: &[bool], dim: usize) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for (v, ok) in values.chunks_exact(dim).zip(valid) {
        if *ok {
            acc += v.iter().map(|z| z.norm_sqr()).sum::<f64>();
            count += 1;
        }
    }
    (acc / count.max(1) as f64).sqrt()
}

/// Diagnostic `sup_t (‖X_t‖_{L²} + ‖DX_t‖_{L²} + ‖D₊X_t‖_{L²})` over the
/// slots where both one-sided fields are valid. Not enforced anywhere.
pub fn c1_norm(ens: &PathEnsemble, fwd: &DerivativeField, bwd: &DerivativeField) -> Result<f64> {
    fwd.check_matches(ens)?;
    bwd.check_matches(ens)?;
    let d = ens.dim();
    let mut sup = 0.0f64;
    for (s, &m) in fwd.slots().iter().enumerate() {
        let Some(sb) = bwd.slot_of(m) else { continue };
        if fwd.valid_count(s) == 0 || bwd.valid_count(sb) == 0 {
            continue;
        }
        let x = ens.slice(m);
        let xl2 = (x.iter().map(|v| v * v).sum::<f64>() / ens.n_paths() as f64).sqrt();
        let total = xl2
            + l2_norm_at(fwd.slot_values(s), fwd.slot_valid(s), d)
            + l2_norm_at(bwd.slot_values(sb), bwd.slot_valid(sb), d);
        sup = sup.max(total);
    }
    Ok(sup)
}

/// Discrete L² modulus of continuity `(t_s, ‖F_{s+1} − F_s‖_{L²})` between
/// consecutive slots, over paths valid at both. A diagnostic for continuity
/// of `t ↦ F_t`; large jumps relative to the slot spacing flag trouble.
pub fn l2_modulus(field: &DerivativeField) -> Vec<(f64, f64)> {
    let d = field.dim();
    (1..field.slots().len())
        .map(|s| {
            let mut acc = 0.0;
            let mut count = 0usize;
            for n in 0..field.n_paths() {
                if field.is_valid(s, n) && field.is_valid(s - 1, n) {
                    acc += (0..d)
                        .map(|k| (field.value(s, n)[k] - field.value(s - 1, n)[k]).norm_sqr())
                        .sum::<f64>();
                    count += 1;
                }
            }
            let t = field.grid().time(field.slots()[s - 1]);
            (t, if count == 0 { f64::NAN } else { (acc / count as f64).sqrt() })
        })
        .collect()
}
