use num_complex::Complex64;
use rayon::prelude::*;

use super::field::SlotData;
use super::regression::conditional_mean;
use super::{DerivativeField, EstimatorConfig, Method, Operator};
use crate::diffusion::PathEnsemble;
use crate::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Forward,
    Backward,
}

fn invalid_slot(n: usize, d: usize) -> SlotData {
    (vec![Complex64::new(f64::NAN, f64::NAN); n * d], vec![false; n])
}

/// Regression of `(X_{t+h} − X_t)/h` or `(X_t − X_{t−h})/h` on `X_t`, as a
/// real `n × d` array; `None` where the quotient is undefined.
fn one_sided(ens: &PathEnsemble, cfg: &EstimatorConfig, m: usize, side: Side) -> Result<Option<(Vec<f64>, Vec<bool>)>> {
    let s = cfg.step;
    let (from, to) = match side {
        Side::Forward if m + s <= ens.grid().steps() => (m, m + s),
        Side::Backward if m >= s => (m - s, m),
        _ => return Ok(None),
    };
    let h = cfg.h(ens.grid());
    let targets: Vec<f64> = ens.slice(to).iter().zip(ens.slice(from)).map(|(b, a)| (b - a) / h).collect();
    let fit = conditional_mean(ens.slice(m), ens.dim(), &targets, ens.dim(), cfg)?;
    Ok(Some((fit.values, fit.valid)))
}

fn real_slot(fit: Option<(Vec<f64>, Vec<bool>)>, n: usize, d: usize) -> SlotData {
    match fit {
        None => invalid_slot(n, d),
        Some((v, ok)) => (v.into_iter().map(|x| Complex64::new(x, 0.0)).collect(), ok),
    }
}

fn one_sided_field(ens: &PathEnsemble, cfg: &EstimatorConfig, side: Side) -> Result<DerivativeField> {
    cfg.validate(ens.grid())?;
    let slots = cfg.times.resolve(ens.grid())?;
    let (n, d) = (ens.n_paths(), ens.dim());
    let parts = slots
        .par_iter()
        .map(|&m| Ok(real_slot(one_sided(ens, cfg, m, side)?, n, d)))
        .collect::<Result<Vec<_>>>()?;
    let op = match side {
        Side::Forward => Operator::Forward,
        Side::Backward => Operator::Backward,
    };
    Ok(DerivativeField::assemble(*ens.grid(), slots, n, d, parts, op, Method::Regression))
}

/// `DX_t ≈ E[(X_{t+h} − X_t)/h | X_t]`; undefined (masked) for `t > b − h`.
pub fn forward_derivative(ens: &PathEnsemble, cfg: &EstimatorConfig) -> Result<DerivativeField> {
    one_sided_field(ens, cfg, Side::Forward)
}

/// `D₊X_t ≈ E[(X_t − X_{t−h})/h | X_t]`; undefined (masked) for `t < a + h`.
pub fn backward_derivative(ens: &PathEnsemble, cfg: &EstimatorConfig) -> Result<DerivativeField> {
    one_sided_field(ens, cfg, Side::Backward)
}

fn combine(fwd: &[Complex64], bwd: &[Complex64]) -> Vec<Complex64> {
    fwd.iter()
        .zip(bwd)
        .map(|(f, b)| {
            let (d, ds) = (f.re, b.re);
            Complex64::new(0.5 * (d + ds), 0.5 * (d - ds))
        })
        .collect()
}

/// `𝒟 = (D + D₊)/2 + i(D − D₊)/2` with the intersection of both masks.
pub fn complex_derivative(fwd: &DerivativeField, bwd: &DerivativeField) -> Result<DerivativeField> {
    if fwd.operator() != Operator::Forward || bwd.operator() != Operator::Backward {
        return Err(Error::input("complex_derivative expects a forward and a backward field"));
    }
    if fwd.grid() != bwd.grid() || fwd.slots() != bwd.slots() || fwd.n_paths() != bwd.n_paths() || fwd.dim() != bwd.dim() {
        return Err(Error::input("forward and backward fields are on different grids or ensembles"));
    }
    let parts = (0..fwd.slots().len())
        .map(|s| {
            let valid = fwd.slot_valid(s).iter().zip(bwd.slot_valid(s)).map(|(a, b)| *a && *b).collect();
            (combine(fwd.slot_values(s), bwd.slot_values(s)), valid)
        })
        .collect();
    Ok(DerivativeField::assemble(
        *fwd.grid(),
        fwd.slots().to_vec(),
        fwd.n_paths(),
        fwd.dim(),
        parts,
        Operator::Complex,
        fwd.method(),
    ))
}

/// Regression `𝒟X` without materialising the one-sided fields.
pub fn regression_complex_derivative(ens: &PathEnsemble, cfg: &EstimatorConfig) -> Result<DerivativeField> {
    cfg.validate(ens.grid())?;
    let slots = cfg.times.resolve(ens.grid())?;
    let (n, d) = (ens.n_paths(), ens.dim());
    let parts = slots
        .par_iter()
        .map(|&m| {
            let fwd = one_sided(ens, cfg, m, Side::Forward)?;
            let bwd = one_sided(ens, cfg, m, Side::Backward)?;
            Ok(match (fwd, bwd) {
                (Some((f, fo)), Some((b, bo))) => {
                    let v = f
                        .iter()
                        .zip(&b)
                        .map(|(d, ds)| Complex64::new(0.5 * (d + ds), 0.5 * (d - ds)))
                        .collect();
                    (v, fo.iter().zip(&bo).map(|(a, b)| *a && *b).collect())
                }
                _ => invalid_slot(n, d),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DerivativeField::assemble(*ens.grid(), slots, n, d, parts, Operator::Complex, Method::Regression))
}

/// `𝒟` (or `𝒟̄` when `conjugate`) of a complex per-path process `Y` given at
/// grid indices through `value`, by regressing its forward and backward
/// quotients on `X_t`.
pub(crate) fn regress_complex_process(
    ens: &PathEnsemble,
    cfg: &EstimatorConfig,
    m: usize,
    channels: usize,
    conjugate: bool,
    value: impl Fn(usize, usize) -> Option<Vec<Complex64>>,
) -> Result<SlotData> {
    let n = ens.n_paths();
    let s = cfg.step;
    if m < s || m + s > ens.grid().steps() {
        return Ok(invalid_slot(n, channels));
    }
    let h = cfg.h(ens.grid());
    let mut fwd = vec![0.0; n * 2 * channels];
    let mut bwd = vec![0.0; n * 2 * channels];
    let mut ok = vec![true; n];
    for p in 0..n {
        match (value(m - s, p), value(m, p), value(m + s, p)) {
            (Some(prev), Some(cur), Some(next)) => {
                for c in 0..channels {
                    let f = (next[c] - cur[c]) / h;
                    let b = (cur[c] - prev[c]) / h;
                    fwd[p * 2 * channels + 2 * c] = f.re;
                    fwd[p * 2 * channels + 2 * c + 1] = f.im;
                    bwd[p * 2 * channels + 2 * c] = b.re;
                    bwd[p * 2 * channels + 2 * c + 1] = b.im;
                }
            }
            _ => ok[p] = false,
        }
    }
    let ff = conditional_mean(ens.slice(m), ens.dim(), &fwd, 2 * channels, cfg)?;
    let bf = conditional_mean(ens.slice(m), ens.dim(), &bwd, 2 * channels, cfg)?;
    let i = if conjugate { -Complex64::i() } else { Complex64::i() };
    let mut out = vec![Complex64::new(f64::NAN, f64::NAN); n * channels];
    for p in 0..n {
        ok[p] = ok[p] && ff.valid[p] && bf.valid[p];
        if !ok[p] {
            continue;
        }
        for c in 0..channels {
            let k = p * 2 * channels + 2 * c;
            let dy = Complex64::new(ff.values[k], ff.values[k + 1]);
            let dsy = Complex64::new(bf.values[k], bf.values[k + 1]);
            // 𝒟 is complex-linear: 𝒟Y = (DY + D₊Y)/2 ± i(DY − D₊Y)/2
            out[p * channels + c] = 0.5 * (dy + dsy) + i * 0.5 * (dy - dsy);
        }
    }
    Ok((out, ok))
}
