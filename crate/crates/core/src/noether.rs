//! One-parameter groups of affine maps `φ_s(x) = A(s)x + c(s)`, invariance of
//! Lagrangians under them, and the Noether first integral
//! `I(t) = E[∂_v L(X_t, 𝒟X_t)·(G X_t + g₀)]`.
//!
//! For affine maps `𝒟(φ_s X) = A(s)𝒟X` by linearity of conditional
//! expectation, so transformed fields are obtained without re-estimation.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DensityModel, DiffusionModel, PathEnsemble};
use crate::error::check_dim;
use crate::lagrangian::AdmissibleLagrangian;
use crate::nelson::{analytic_complex_derivative, derivative_of_function, AffineMap, DerivativeField, EstimatorConfig, Operator};
use crate::stats::{median, two_sided_z, weighted_linear_fit, ComplexMean};
use crate::{linalg, Error, Result};

/// Largest mean deviation `|L(φ_s X, A𝒟X) − L(X, 𝒟X)|` accepted as invariance.
pub const INVARIANCE_TOLERANCE: f64 = 1e-10;
/// Group-law residual accepted on probes.
pub const GROUP_LAW_TOLERANCE: f64 = 1e-9;
/// Parameter values used when the conserved quantity checks invariance itself.
pub const DEFAULT_S_VALUES: [f64; 4] = [-1.0, -0.5, 0.5, 1.0];
/// Minimum number of times for the constancy test.
pub const MIN_CONSTANCY_TIMES: usize = 10;
pub const NOETHER_INAPPLICABLE: &str = "not invariant — Noether inapplicable";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GroupKind {
    Rotation { i: usize, j: usize },
    Translation { direction: Vec<f64> },
    Scaling,
    Custom { name: String },
}

type Coefficients = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub struct OneParameterGroup {
    dim: usize,
    kind: GroupKind,
    matrix: Coefficients,
    offset: Coefficients,
    generator: Vec<f64>,
    generator_offset: Vec<f64>,
}

impl fmt::Debug for OneParameterGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OneParameterGroup")
            .field("dim", &self.dim)
            .field("kind", &self.kind)
            .field("generator", &self.generator)
            .field("generator_offset", &self.generator_offset)
            .finish_non_exhaustive()
    }
}

impl OneParameterGroup {
    /// Rotation by angle `s` in the `(i, j)` coordinate plane, taking `e_i` towards `e_j`.
    pub fn rotation(dim: usize, i: usize, j: usize) -> Result<Self> {
        if i == j || i >= dim || j >= dim {
            return Err(Error::input(format!("invalid rotation plane ({i}, {j}) in dimension {dim}")));
        }
        let mut generator = vec![0.0; dim * dim];
        generator[i * dim + j] = -1.0;
        generator[j * dim + i] = 1.0;
        Ok(OneParameterGroup {
            dim,
            kind: GroupKind::Rotation { i, j },
            matrix: Arc::new(move |s, a| {
                a.fill(0.0);
                for k in 0..dim {
                    a[k * dim + k] = 1.0;
                }
                let (sin, cos) = s.sin_cos();
                a[i * dim + i] = cos;
                a[j * dim + j] = cos;
                a[i * dim + j] = -sin;
                a[j * dim + i] = sin;
            }),
            offset: Arc::new(|_, c| c.fill(0.0)),
            generator,
            generator_offset: vec![0.0; dim],
        })
    }

    /// `x ↦ x + s·e`.
    pub fn translation(direction: Vec<f64>) -> Result<Self> {
        let dim = direction.len();
        if dim == 0 || direction.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("translation needs a finite, non-empty direction"));
        }
        let e = direction.clone();
        Ok(OneParameterGroup {
            dim,
            kind: GroupKind::Translation { direction: direction.clone() },
            matrix: Arc::new(move |_, a| {
                a.fill(0.0);
                for k in 0..dim {
                    a[k * dim + k] = 1.0;
                }
            }),
            offset: Arc::new(move |s, c| c.iter_mut().zip(&e).for_each(|(c, e)| *c = s * e)),
            generator: vec![0.0; dim * dim],
            generator_offset: direction,
        })
    }

    /// `x ↦ eˢx`.
    pub fn scaling(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("scaling needs a positive dimension"));
        }
        Ok(OneParameterGroup {
            dim,
            kind: GroupKind::Scaling,
            matrix: Arc::new(move |s, a| {
                a.fill(0.0);
                let e = s.exp();
                for k in 0..dim {
                    a[k * dim + k] = e;
                }
            }),
            offset: Arc::new(|_, c| c.fill(0.0)),
            generator: linalg::identity(dim),
            generator_offset: vec![0.0; dim],
        })
    }

    /// User-supplied affine group. The generator is taken by a Richardson
    /// central difference at `s = 0`; `φ_0` must be the identity exactly and
    /// the group law must hold on a probe set.
    pub fn custom(
        dim: usize,
        name: impl Into<String>,
        matrix: impl Fn(f64, &mut [f64]) + Send + Sync + 'static,
        offset: impl Fn(f64, &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("custom group needs a positive dimension"));
        }
        let matrix: Coefficients = Arc::new(matrix);
        let offset: Coefficients = Arc::new(offset);
        let diff = |f: &Coefficients, len: usize| {
            let at = |s: f64| {
                let mut v = vec![0.0; len];
                f(s, &mut v);
                v
            };
            let cd = |h: f64| -> Vec<f64> {
                at(h).iter().zip(at(-h)).map(|(a, b)| (a - b) / (2.0 * h)).collect()
            };
            let (coarse, fine) = (cd(1e-3), cd(5e-4));
            fine.iter().zip(coarse).map(|(f, c)| (4.0 * f - c) / 3.0).collect::<Vec<f64>>()
        };
        let generator = diff(&matrix, dim * dim);
        let generator_offset = diff(&offset, dim);
        let grp = OneParameterGroup {
            dim,
            kind: GroupKind::Custom { name: name.into() },
            matrix,
            offset,
            generator,
            generator_offset,
        };
        let report = grp.check_group_law(&default_probes(dim))?;
        if !report.identity_exact {
            return Err(Error::input("custom group: φ_0 is not the identity"));
        }
        if !report.passed {
            return Err(Error::input(format!(
                "custom group violates the group law (composition error {:.3e}, inverse error {:.3e})",
                report.composition_error, report.inverse_error
            )));
        }
        Ok(grp)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &GroupKind {
        &self.kind
    }

    pub fn label(&self) -> String {
        match &self.kind {
            GroupKind::Rotation { i, j } => format!("rotation({i},{j})"),
            GroupKind::Translation { direction } => format!("translation{direction:?}"),
            GroupKind::Scaling => "scaling".into(),
            GroupKind::Custom { name } => name.clone(),
        }
    }

    /// `A(s)`, row-major.
    pub fn matrix(&self, s: f64) -> Vec<f64> {
        let mut a = vec![0.0; self.dim * self.dim];
        (self.matrix)(s, &mut a);
        a
    }

    /// `c(s)`.
    pub fn offset(&self, s: f64) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        (self.offset)(s, &mut c);
        c
    }

    /// `G = A′(0)`.
    pub fn generator(&self) -> &[f64] {
        &self.generator
    }

    /// `g₀ = c′(0)`.
    pub fn generator_offset(&self) -> &[f64] {
        &self.generator_offset
    }

    /// `φ_s(x)`.
    pub fn apply(&self, s: f64, x: &[f64]) -> Vec<f64> {
        let (a, c) = (self.matrix(s), self.offset(s));
        let mut y = vec![0.0; self.dim];
        linalg::matvec(self.dim, &a, x, &mut y);
        y.iter_mut().zip(c).for_each(|(y, c)| *y += c);
        y
    }

    /// `∂_s φ_s(x)|_{s=0} = Gx + g₀`.
    pub fn infinitesimal(&self, x: &[f64], out: &mut [f64]) {
        linalg::matvec(self.dim, &self.generator, x, out);
        out.iter_mut().zip(&self.generator_offset).for_each(|(o, g)| *o += g);
    }

    /// `∂_s φ_s = ξ∘φ_s` with `ξ(x) = Gx + g₀`: returns `(GA(s), Gc(s) + g₀)`.
    pub fn velocity_at(&self, s: f64) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let a = linalg::matmul(d, &self.generator, &self.matrix(s));
        let mut c = vec![0.0; d];
        linalg::matvec(d, &self.generator, &self.offset(s), &mut c);
        c.iter_mut().zip(&self.generator_offset).for_each(|(c, g)| *c += g);
        (a, c)
    }

    /// Identity, composition, inverse, generator and smoothness checks on probes.
    pub fn check_group_law(&self, probes: &[Vec<f64>]) -> Result<GroupLawReport> {
        if probes.is_empty() {
            return Err(Error::input("group-law check needs at least one probe"));
        }
        let params = [-1.0, -0.6, -0.25, 0.0, 0.3, 0.7, 1.0];
        let mut identity_exact = true;
        let mut composition_error = 0.0f64;
        let mut inverse_error = 0.0f64;
        let mut generator_error = 0.0f64;
        let mut smooth = true;
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        for x in probes {
            check_dim(self.dim, x.len())?;
            identity_exact &= self.apply(0.0, x) == *x;
            for &s in &params {
                for &r in &params {
                    let lhs = self.apply(s, &self.apply(r, x));
                    composition_error = composition_error.max(dist(&lhs, &self.apply(s + r, x)));
                }
                inverse_error = inverse_error.max(dist(&self.apply(-s, &self.apply(s, x)), x));
            }
            let h = 1e-4;
            let (p, m) = (self.apply(h, x), self.apply(-h, x));
            let mut xi = vec![0.0; self.dim];
            self.infinitesimal(x, &mut xi);
            let fd: Vec<f64> = p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            generator_error = generator_error.max(dist(&fd, &xi));
            // second differences at two step sizes agree for a C² family
            for s in [-0.5, 0.5] {
                let second = |h: f64| -> Vec<f64> {
                    let (a, b, c) = (self.apply(s + h, x), self.apply(s, x), self.apply(s - h, x));
                    (0..self.dim).map(|k| (a[k] - 2.0 * b[k] + c[k]) / (h * h)).collect()
                };
                let (c1, c2) = (second(1e-3), second(5e-4));
                smooth &= c1.iter().zip(&c2).all(|(a, b)| (a - b).abs() <= 1e-3 * a.abs().max(1.0));
            }
        }
        Ok(GroupLawReport {
            passed: identity_exact && composition_error <= GROUP_LAW_TOLERANCE && inverse_error <= GROUP_LAW_TOLERANCE,
            identity_exact,
            composition_error,
            inverse_error,
            generator_error,
            smooth,
        })
    }
}

/// Deterministic probe set used by [`OneParameterGroup::custom`].
pub fn default_probes(dim: usize) -> Vec<Vec<f64>> {
    (0..8)
        .map(|i| (0..dim).map(|k| ((i * 7 + k * 3) % 11) as f64 / 5.5 - 1.0).collect())
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupLawReport {
    pub passed: bool,
    pub identity_exact: bool,
    /// `max |φ_s∘φ_r(x) − φ_{s+r}(x)|` over `|s|, |r| ≤ 1`.
    pub composition_error: f64,
    /// `max |φ_{−s}∘φ_s(x) − x|`.
    pub inverse_error: f64,
    /// `|(φ_δ − φ_{−δ})(x)/(2δ) − (Gx + g₀)|` at `δ = 1e-4`.
    pub generator_error: f64,
    pub smooth: bool,
}

/// Applies `φ_s` to every sample; grid, path count and seed are kept.
pub fn apply_group(ens: &PathEnsemble, grp: &OneParameterGroup, s: f64) -> Result<PathEnsemble> {
    check_dim(grp.dim(), ens.dim())?;
    if !s.is_finite() {
        return Err(Error::input("group parameter must be finite"));
    }
    if s == 0.0 {
        return Ok(ens.clone());
    }
    let d = grp.dim();
    let (a, c) = (grp.matrix(s), grp.offset(s));
    Ok(ens.map_states(format!("{} ∘ {}(s={s})", ens.provenance(), grp.label()), |_, x, y| {
        linalg::matvec(d, &a, x, y);
        y.iter_mut().zip(&c).for_each(|(y, c)| *y += c);
    }))
}

/// `A(s)·𝒟X` for every entry of a `𝒟X` field.
pub fn transform_field(field: &DerivativeField, grp: &OneParameterGroup, s: f64) -> Result<DerivativeField> {
    check_dim(grp.dim(), field.dim())?;
    Ok(linear_image(field, &grp.matrix(s), field.operator()))
}

fn linear_image(field: &DerivativeField, a: &[f64], operator: Operator) -> DerivativeField {
    let d = field.dim();
    field.map(operator, |_, _, v, out| {
        for j in 0..d {
            out[j] = (0..d).map(|k| v[k] * a[j * d + k]).sum();
        }
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct InvarianceAtS {
    pub s: f64,
    pub mean_deviation: f64,
    pub max_deviation: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct InvarianceReport {
    pub group: String,
    pub per_s: Vec<InvarianceAtS>,
    pub max_mean_deviation: f64,
    pub tolerance: f64,
    pub invariant: bool,
}

/// `|L(φ_s X, A(s)𝒟X) − L(X, 𝒟X)|` over the valid entries of the field.
pub fn invariance_check(
    lag: &dyn AdmissibleLagrangian,
    grp: &OneParameterGroup,
    ens: &PathEnsemble,
    dfield: &DerivativeField,
    s_values: &[f64],
    tolerance: f64,
) -> Result<InvarianceReport> {
    dfield.check_matches(ens)?;
    check_dim(grp.dim(), ens.dim())?;
    check_dim(lag.dim(), ens.dim())?;
    if dfield.operator() != Operator::Complex {
        return Err(Error::input("invariance is checked on a 𝒟X field"));
    }
    if s_values.is_empty() {
        return Err(Error::input("invariance check needs at least one parameter value"));
    }
    let d = grp.dim();
    let per_s = s_values
        .iter()
        .map(|&s| {
            let (a, c) = (grp.matrix(s), grp.offset(s));
            let per_slot: Vec<(f64, f64, usize)> = (0..dfield.slots().len())
                .into_par_iter()
                .map(|slot| {
                    let m = dfield.slots()[slot];
                    let (mut sum, mut max, mut count) = (0.0, 0.0f64, 0usize);
                    let mut y = vec![0.0; d];
                    let mut w = vec![Complex64::new(0.0, 0.0); d];
                    for p in (0..ens.n_paths()).filter(|&p| dfield.is_valid(slot, p)) {
                        let x = ens.state(m, p);
                        let v = dfield.value(slot, p);
                        linalg::matvec(d, &a, x, &mut y);
                        y.iter_mut().zip(&c).for_each(|(y, c)| *y += c);
                        for j in 0..d {
                            w[j] = (0..d).map(|k| v[k] * a[j * d + k]).sum();
                        }
                        let dev = (lag.value(&y, &w) - lag.value(x, v)).norm();
                        sum += dev;
                        max = max.max(dev);
                        count += 1;
                    }
                    (sum, max, count)
                })
                .collect();
            let count: usize = per_slot.iter().map(|r| r.2).sum();
            let sum: f64 = per_slot.iter().map(|r| r.0).sum();
            InvarianceAtS {
                s,
                mean_deviation: if count > 0 { sum / count as f64 } else { f64::NAN },
                max_deviation: per_slot.iter().map(|r| r.1).fold(0.0, f64::max),
            }
        })
        .collect::<Vec<_>>();
    let max_mean_deviation = per_s.iter().map(|r| r.mean_deviation).fold(0.0, f64::max);
    Ok(InvarianceReport {
        group: grp.label(),
        invariant: max_mean_deviation <= tolerance && per_s.iter().all(|r| r.mean_deviation.is_finite()),
        per_s,
        max_mean_deviation,
        tolerance,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CommutationReport {
    pub s: f64,
    pub ds: f64,
    /// `max |∂_s[A(s)𝒟X] − 𝒟[∂_s φ_s(X)]|` over valid entries.
    pub max_discrepancy: f64,
    /// `max |𝒟[∂_s φ_s(X)]|`, for scale.
    pub rhs_scale: f64,
    /// With `resimulate`: `max |𝒟(φ_s X) − A(s)𝒟X|` where the left side comes
    /// from the pushed-forward model's own analytic field.
    pub pushforward_discrepancy: Option<f64>,
}

/// `∂_s[𝒟(φ_s X)]` (central difference in `s` of `A(s)𝒟X`) against
/// `𝒟[∂_s φ_s(X)]` (function rule on `x ↦ GA(s)x + Gc(s) + g₀`).
#[allow(clippy::too_many_arguments)]
pub fn commutation_check(
    grp: &OneParameterGroup,
    model: &DiffusionModel,
    dm: &DensityModel,
    ens: &PathEnsemble,
    s: f64,
    ds: f64,
    cfg: &EstimatorConfig,
    resimulate: bool,
) -> Result<CommutationReport> {
    check_dim(grp.dim(), ens.dim())?;
    if !(ds > 0.0 && ds.is_finite() && s.is_finite()) {
        return Err(Error::input("commutation check needs finite s and δs > 0"));
    }
    let d = grp.dim();
    let field = analytic_complex_derivative(model, dm, ens, cfg)?;
    let (ap, am) = (grp.matrix(s + ds), grp.matrix(s - ds));
    let da: Vec<f64> = ap.iter().zip(&am).map(|(p, m)| (p - m) / (2.0 * ds)).collect();
    let lhs = linear_image(&field, &da, Operator::Function);
    let (vel_a, vel_c) = grp.velocity_at(s);
    let rhs = derivative_of_function(&AffineMap::real(d, d, &vel_a, &vel_c)?, &field, model, ens)?;
    let (mut max_discrepancy, mut rhs_scale) = (0.0f64, 0.0f64);
    for slot in 0..field.slots().len() {
        for p in (0..ens.n_paths()).filter(|&p| lhs.is_valid(slot, p) && rhs.is_valid(slot, p)) {
            for (l, r) in lhs.value(slot, p).iter().zip(rhs.value(slot, p)) {
                max_discrepancy = max_discrepancy.max((l - r).norm());
                rhs_scale = rhs_scale.max(r.norm());
            }
        }
    }
    let pushforward_discrepancy = if resimulate {
        let t0 = dm
            .gaussian()
            .ok_or_else(|| Error::Capability("push-forward cross-check needs the analytic Gaussian density".into()))?
            .t0();
        let moved = model.push_forward_affine(&grp.matrix(s), &grp.offset(s))?;
        let moved_dm = DensityModel::analytic_gaussian(&moved, t0)?;
        let moved_ens = apply_group(ens, grp, s)?;
        let direct = analytic_complex_derivative(&moved, &moved_dm, &moved_ens, cfg)?;
        let pushed = transform_field(&field, grp, s)?;
        let mut worst = 0.0f64;
        for slot in 0..field.slots().len() {
            for p in (0..ens.n_paths()).filter(|&p| direct.is_valid(slot, p) && pushed.is_valid(slot, p)) {
                for (a, b) in direct.value(slot, p).iter().zip(pushed.value(slot, p)) {
                    worst = worst.max((a - b).norm());
                }
            }
        }
        Some(worst)
    } else {
        None
    };
    Ok(CommutationReport {
        s,
        ds,
        max_discrepancy,
        rhs_scale,
        pushforward_discrepancy,
    })
}

/// `I(t)` on the interior times of a `𝒟X` field.
#[derive(Clone, Debug, Serialize)]
pub struct ConservedQuantitySeries {
    pub group: String,
    pub times: Vec<f64>,
    pub values: Vec<Complex64>,
    pub stderr_re: Vec<f64>,
    pub stderr_im: Vec<f64>,
    /// Floating-point resolution of each value, `64ε·E[|∂_v L|·|Gx + g₀|]`;
    /// standard errors below it carry no information.
    pub resolution: Vec<f64>,
    pub valid_paths: Vec<usize>,
    /// Slope standard errors `(Re, Im)` from per-path influence, which
    /// accounts for the correlation between times.
    pub pathwise_slope_stderr: Option<(f64, f64)>,
    pub invariance: Option<InvarianceReport>,
    pub warnings: Vec<String>,
}

impl ConservedQuantitySeries {
    /// A series from precomputed values (no per-path information).
    pub fn from_values(times: Vec<f64>, values: Vec<Complex64>, stderr_re: Vec<f64>, stderr_im: Vec<f64>) -> Result<Self> {
        let n = times.len();
        if values.len() != n || stderr_re.len() != n || stderr_im.len() != n {
            return Err(Error::input("series columns differ in length"));
        }
        if stderr_re.iter().chain(&stderr_im).any(|s| !(*s >= 0.0)) {
            return Err(Error::input("standard errors must be non-negative"));
        }
        Ok(ConservedQuantitySeries {
            group: String::new(),
            valid_paths: vec![0; n],
            resolution: vec![0.0; n],
            times,
            values,
            stderr_re,
            stderr_im,
            pathwise_slope_stderr: None,
            invariance: None,
            warnings: Vec::new(),
        })
    }

    /// `t,re,im,stderr`
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,re,im,stderr")?;
        for i in 0..self.times.len() {
            writeln!(
                w,
                "{},{},{},{}",
                self.times[i],
                self.values[i].re,
                self.values[i].im,
                self.stderr_re[i].hypot(self.stderr_im[i])
            )?;
        }
        Ok(())
    }

    /// Effective standard errors (floored at the resolution).
    fn effective_stderr(&self) -> (Vec<f64>, Vec<f64>) {
        let floor = |se: &[f64]| se.iter().zip(&self.resolution).map(|(s, r)| s.max(*r)).collect::<Vec<_>>();
        (floor(&self.stderr_re), floor(&self.stderr_im))
    }
}

/// Inverse-variance weights, or uniform weights when some error is zero.
fn fit_weights(se: &[f64]) -> Vec<f64> {
    if se.iter().all(|s| *s > 0.0 && s.is_finite()) {
        se.iter().map(|s| 1.0 / (s * s)).collect()
    } else {
        vec![1.0; se.len()]
    }
}

/// Noether quantity `E[∂_v L(X_t, 𝒟X_t)·(G X_t + g₀)]`. Invariance of `lag`
/// under the group is checked on the same data; when it fails the series
/// carries a warning instead of a conservation claim.
pub fn conserved_quantity(
    lag: &dyn AdmissibleLagrangian,
    grp: &OneParameterGroup,
    ens: &PathEnsemble,
    dfield: &DerivativeField,
) -> Result<ConservedQuantitySeries> {
    let invariance = invariance_check(lag, grp, ens, dfield, &DEFAULT_S_VALUES, INVARIANCE_TOLERANCE)?;
    let d = grp.dim();
    let n = ens.n_paths();
    let used: Vec<usize> = (0..dfield.slots().len()).filter(|&s| dfield.valid_count(s) > 0).collect();
    if used.is_empty() {
        return Err(Error::input("the 𝒟X field has no valid values"));
    }
    let sample = |slot: usize, p: usize| -> (Complex64, f64) {
        let x = ens.state(dfield.slots()[slot], p);
        let v = dfield.value(slot, p);
        let mut dx = vec![Complex64::new(0.0, 0.0); d];
        let mut dv = vec![Complex64::new(0.0, 0.0); d];
        lag.partials_into(x, v, &mut dx, &mut dv);
        let mut xi = vec![0.0; d];
        grp.infinitesimal(x, &mut xi);
        let value = (0..d).map(|k| dv[k] * xi[k]).sum();
        let scale = (0..d).map(|k| dv[k].norm() * xi[k].abs()).sum();
        (value, scale)
    };
    let per_time: Vec<(ComplexMean, f64, usize)> = used
        .par_iter()
        .map(|&slot| {
            let mut vals = Vec::with_capacity(n);
            let mut scale = 0.0;
            for p in (0..n).filter(|&p| dfield.is_valid(slot, p)) {
                let (v, s) = sample(slot, p);
                vals.push(v);
                scale += s;
            }
            let count = vals.len();
            (ComplexMean::from_samples(&vals), 64.0 * f64::EPSILON * scale / count as f64, count)
        })
        .collect();
    let mut series = ConservedQuantitySeries {
        group: grp.label(),
        times: used.iter().map(|&s| ens.grid().time(dfield.slots()[s])).collect(),
        values: per_time.iter().map(|r| r.0.mean).collect(),
        stderr_re: per_time.iter().map(|r| r.0.stderr_re).collect(),
        stderr_im: per_time.iter().map(|r| r.0.stderr_im).collect(),
        resolution: per_time.iter().map(|r| r.1).collect(),
        valid_paths: per_time.iter().map(|r| r.2).collect(),
        pathwise_slope_stderr: None,
        warnings: Vec::new(),
        invariance: None,
    };
    if series.times.len() >= 2 {
        // slope = Σ cᵢ I(tᵢ); its per-path influence is Σ cᵢ (I_p(tᵢ) − imputed)
        let (se_re, se_im) = series.effective_stderr();
        let c_re = weighted_linear_fit(&series.times, &vec![0.0; used.len()], &fit_weights(&se_re)).slope_coefficients;
        let c_im = weighted_linear_fit(&series.times, &vec![0.0; used.len()], &fit_weights(&se_im)).slope_coefficients;
        let influence: Vec<(f64, f64)> = (0..n)
            .into_par_iter()
            .map(|p| {
                let (mut re, mut im) = (0.0, 0.0);
                for (k, &slot) in used.iter().enumerate() {
                    let v = if dfield.is_valid(slot, p) { sample(slot, p).0 } else { series.values[k] };
                    re += c_re[k] * v.re;
                    im += c_im[k] * v.im;
                }
                (re, im)
            })
            .collect();
        let re: Vec<f64> = influence.iter().map(|r| r.0).collect();
        let im: Vec<f64> = influence.iter().map(|r| r.1).collect();
        series.pathwise_slope_stderr = Some((crate::stats::mean_stderr(&re).1, crate::stats::mean_stderr(&im).1));
    }
    if !invariance.invariant {
        series.warnings.push(format!(
            "{NOETHER_INAPPLICABLE}: mean deviation {:.3e} under {}",
            invariance.max_mean_deviation, invariance.group
        ));
    }
    series.invariance = Some(invariance);
    Ok(series)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Conserved,
    Drifting,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConstancyReport {
    pub verdict: Verdict,
    pub slope_re: f64,
    pub slope_re_stderr: f64,
    pub slope_im: f64,
    pub slope_im_stderr: f64,
    pub ci_re: (f64, f64),
    pub ci_im: (f64, f64),
    pub range_re: f64,
    pub range_im: f64,
    pub median_stderr_re: f64,
    pub median_stderr_im: f64,
    pub times: usize,
    /// Whether the slope errors come from per-path influence.
    pub pathwise: bool,
}

/// CONSERVED when both 99% slope intervals contain 0 and the series range is
/// at most five median standard errors in each part; DRIFTING otherwise.
pub fn constancy_test(series: &ConservedQuantitySeries) -> Result<ConstancyReport> {
    let k = series.times.len();
    if k == 0 || series.values.iter().all(|v| !(v.re.is_finite() && v.im.is_finite())) {
        return Err(Error::input("degenerate series: no unmasked values"));
    }
    if k < MIN_CONSTANCY_TIMES {
        return Err(Error::input(format!(
            "constancy test needs at least {MIN_CONSTANCY_TIMES} times, got {k}"
        )));
    }
    let (se_re, se_im) = series.effective_stderr();
    let re: Vec<f64> = series.values.iter().map(|v| v.re).collect();
    let im: Vec<f64> = series.values.iter().map(|v| v.im).collect();
    let fit_re = weighted_linear_fit(&series.times, &re, &fit_weights(&se_re));
    let fit_im = weighted_linear_fit(&series.times, &im, &fit_weights(&se_im));
    let independent = |c: &[f64], se: &[f64]| c.iter().zip(se).map(|(c, s)| (c * s).powi(2)).sum::<f64>().sqrt();
    // the resolution floor bounds the slope error from below as well
    let floor_re = independent(&fit_re.slope_coefficients, &series.resolution);
    let floor_im = independent(&fit_im.slope_coefficients, &series.resolution);
    let (sl_re, sl_im, pathwise) = match series.pathwise_slope_stderr {
        Some((r, i)) => (r.max(floor_re), i.max(floor_im), true),
        None => (
            independent(&fit_re.slope_coefficients, &se_re),
            independent(&fit_im.slope_coefficients, &se_im),
            false,
        ),
    };
    let z = two_sided_z(0.99);
    let ci_re = (fit_re.slope - z * sl_re, fit_re.slope + z * sl_re);
    let ci_im = (fit_im.slope - z * sl_im, fit_im.slope + z * sl_im);
    let range = |v: &[f64]| {
        v.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x)) - v.iter().fold(f64::INFINITY, |m, x| m.min(*x))
    };
    let (range_re, range_im) = (range(&re), range(&im));
    let (median_stderr_re, median_stderr_im) = (median(&se_re), median(&se_im));
    let contains = |ci: (f64, f64)| ci.0 <= 0.0 && 0.0 <= ci.1;
    let conserved = contains(ci_re)
        && contains(ci_im)
        && range_re <= 5.0 * median_stderr_re
        && range_im <= 5.0 * median_stderr_im;
    Ok(ConstancyReport {
        verdict: if conserved { Verdict::Conserved } else { Verdict::Drifting },
        slope_re: fit_re.slope,
        slope_re_stderr: sl_re,
        slope_im: fit_im.slope,
        slope_im_stderr: sl_im,
        ci_re,
        ci_im,
        range_re,
        range_im,
        median_stderr_re,
        median_stderr_im,
        times: k,
        pathwise,
    })
}
