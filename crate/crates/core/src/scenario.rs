//! Scenario files and the name registries they resolve against.
//!
//! A scenario is a TOML document. Everything is in natural units; the noise
//! scale σ absorbs any physical constants. Schema (keys marked `?` are
//! optional):
//!
//! ```toml
//! id = "bm_free_particle"
//! description? = "..."
//! seed = 7
//! paths = 20000
//! tasks = ["simulate", "derivatives", "action", "df", "residual", "noether", "coherence"]
//!
//! [grid]                  # J = [start, end] with `steps` Euler steps
//! start = 1.0
//! end = 2.0
//! steps = 1000
//!
//! [model]                 # required by every task except coherence
//! kind = "brownian"       # brownian {dim, sigma} | ornstein_uhlenbeck {dim, omega, sigma}
//!                         # | linear {dim, rate, center?, start} (σ = 0)
//! dim = 1
//! sigma = 1.0
//! initial = { law = "brownian_at", start = [0.0], elapsed = 1.0 }
//!                         # point {x} | brownian_at {start, elapsed} | ou_stationary | gaussian {mean, cov}
//!
//! [lagrangian]            # L(x, v) = q(v) − U(x)
//! mass? = 1.0             # q(v) = ½ m v·v, or q? = [row-major d×d matrix]
//! potential = "harmonic"  # a name in the potential registry
//! params? = { omega = 1.0 }
//!
//! [density]
//! route? = "analytic"     # analytic | kde | dirac
//! family? = "bm"          # analytic route: a name in the density registry (inferred when absent)
//! t0? = 1.0               # time at which the initial law holds (default: grid start)
//! bandwidth? = "silverman"
//!
//! [estimator]             # nelson::EstimatorConfig, all keys optional
//! [derivatives]           # product_rule_times?, product_rule_delta?
//! [action]                # expected_re?, expected_im?
//! [df]                    # variations = [VariationShape…], route? = both|fd|formula, expect?, fd?
//! [residual]              # variant? = complex|conjugate, expect? = solution|non_solution|none
//! [coherence]             # x0, v0
//! [noether]               # groups = [{kind = "rotation", i = 0, j = 1, expect? = "conserved"}], delta_s?, s?
//! [tolerances]            # see `Tolerances`
//! [output]                # ensemble? = "csv" | "binary", fields? = false
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion::{BandwidthRule, DensityModel, DiffusionModel, Dispersion, Drift, InitialLaw, TimeGrid};
use crate::lagrangian::{LagrangianSpec, Potential, QuadraticForm};
use crate::nelson::EstimatorConfig;
use crate::noether::OneParameterGroup;
use crate::variation::{FdOptions, ResidualVariant, VariationProcess, VariationShape};
use crate::{Error, Result};

pub type PotentialFactory = Arc<dyn Fn(usize, &toml::Table) -> Result<Potential> + Send + Sync>;
pub type GroupFactory = Arc<dyn Fn(usize, &toml::Table) -> Result<OneParameterGroup> + Send + Sync>;

/// Scenarios shipped with the crate, as `(name, TOML source)`.
pub const BUNDLED: [(&str, &str); 5] = [
    ("bm_free_particle", include_str!("../scenarios/bm_free_particle.toml")),
    ("ou_harmonic_ground_state", include_str!("../scenarios/ou_harmonic_ground_state.toml")),
    ("ou2d_rotation_noether", include_str!("../scenarios/ou2d_rotation_noether.toml")),
    ("harmonic_coherence", include_str!("../scenarios/harmonic_coherence.toml")),
    ("bm_harmonic_negative", include_str!("../scenarios/bm_harmonic_negative.toml")),
];

/// Analytic density families accepted by the `analytic` route.
pub const DENSITY_FAMILIES: [(&str, &str); 4] = [
    ("bm", "Brownian motion from a point or Gaussian law"),
    ("ou", "Ornstein–Uhlenbeck from a point or Gaussian law"),
    ("ou_stationary", "Ornstein–Uhlenbeck started in its stationary law"),
    ("deterministic", "σ = 0 linear flow (point mass)"),
];

fn params<T: serde::de::DeserializeOwned>(table: &toml::Table, what: &str) -> Result<T> {
    toml::Value::Table(table.clone())
        .try_into()
        .map_err(|e| Error::Scenario(format!("{what}: {e}")))
}

/// Potential and group names available to scenario files.
#[derive(Clone)]
pub struct Registries {
    potentials: BTreeMap<String, PotentialFactory>,
    groups: BTreeMap<String, GroupFactory>,
}

impl Default for Registries {
    fn default() -> Self {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Free {}
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Harmonic {
            #[serde(default = "one")]
            omega: f64,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Central {
            #[serde(default = "one")]
            k: f64,
            alpha: f64,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Rotation {
            #[serde(default)]
            i: usize,
            #[serde(default = "one_usize")]
            j: usize,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Translation {
            direction: Vec<f64>,
        }
        fn one() -> f64 {
            1.0
        }
        fn one_usize() -> usize {
            1
        }
        let mut r = Registries::empty();
        r.register_potential("free", |_, p| {
            params::<Free>(p, "free potential")?;
            Ok(Potential::Free)
        });
        r.register_potential("harmonic", |_, p| Ok(Potential::harmonic(params::<Harmonic>(p, "harmonic potential")?.omega)));
        r.register_potential("central_power", |_, p| {
            let c: Central = params(p, "central_power potential")?;
            Potential::central_power(c.k, c.alpha)
        });
        r.register_group("rotation", |dim, p| {
            let g: Rotation = params(p, "rotation group")?;
            OneParameterGroup::rotation(dim, g.i, g.j)
        });
        r.register_group("translation", |dim, p| {
            let g: Translation = params(p, "translation group")?;
            crate::error::check_dim(dim, g.direction.len())?;
            OneParameterGroup::translation(g.direction)
        });
        r.register_group("scaling", |dim, p| {
            params::<Free>(p, "scaling group")?;
            OneParameterGroup::scaling(dim)
        });
        r
    }
}

impl Registries {
    /// No potentials or groups at all.
    pub fn empty() -> Self {
        Registries {
            potentials: BTreeMap::new(),
            groups: BTreeMap::new(),
        }
    }

    /// Adds (or replaces) a potential; the factory receives the state
    /// dimension and the `lagrangian.params` table.
    pub fn register_potential(
        &mut self,
        name: impl Into<String>,
        factory: impl Fn(usize, &toml::Table) -> Result<Potential> + Send + Sync + 'static,
    ) {
        self.potentials.insert(name.into(), Arc::new(factory));
    }

    /// Adds (or replaces) a group; the factory receives the state dimension
    /// and the group's table without its `kind` and `expect` keys.
    pub fn register_group(
        &mut self,
        name: impl Into<String>,
        factory: impl Fn(usize, &toml::Table) -> Result<OneParameterGroup> + Send + Sync + 'static,
    ) {
        self.groups.insert(name.into(), Arc::new(factory));
    }

    pub fn potential_names(&self) -> Vec<&str> {
        self.potentials.keys().map(String::as_str).collect()
    }

    pub fn group_names(&self) -> Vec<&str> {
        self.groups.keys().map(String::as_str).collect()
    }

    pub fn potential(&self, key: &str, name: &str, dim: usize, p: &toml::Table) -> Result<Potential> {
        let f = self.potentials.get(name).ok_or_else(|| Error::Registry {
            registry: "potential",
            key: key.into(),
            name: name.into(),
        })?;
        f(dim, p)
    }

    pub fn group(&self, key: &str, name: &str, dim: usize, p: &toml::Table) -> Result<OneParameterGroup> {
        let f = self.groups.get(name).ok_or_else(|| Error::Registry {
            registry: "group",
            key: key.into(),
            name: name.into(),
        })?;
        f(dim, p)
    }

    /// Human-readable listing of everything a scenario can name.
    pub fn list(&self) -> String {
        let mut out = String::from("potentials:\n");
        for name in self.potentials.keys() {
            out += &format!("  {name}\n");
        }
        out += "density routes:\n  analytic\n  kde\n  dirac\ndensity families:\n";
        for (name, what) in DENSITY_FAMILIES {
            out += &format!("  {name:<15} {what}\n");
        }
        out += "groups:\n";
        for name in self.groups.keys() {
            out += &format!("  {name}\n");
        }
        out += "bundled scenarios:\n";
        for (name, _) in BUNDLED {
            out += &format!("  {name}\n");
        }
        out
    }
}

/// Text listing of the default registries.
pub fn list_registries() -> String {
    Registries::default().list()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Simulate,
    Derivatives,
    Action,
    #[serde(alias = "dF")]
    Df,
    Residual,
    Noether,
    Coherence,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Simulate => "simulate",
            Task::Derivatives => "derivatives",
            Task::Action => "action",
            Task::Df => "df",
            Task::Residual => "residual",
            Task::Noether => "noether",
            Task::Coherence => "coherence",
        }
    }

    fn needs_model(&self) -> bool {
        *self != Task::Coherence
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityRoute {
    #[default]
    Analytic,
    Kde,
    Dirac,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfRoute {
    #[default]
    Both,
    Fd,
    Formula,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfExpectation {
    /// `|dF| ≤ df_k` standard errors for every variation.
    Stationary,
    /// `|dF| > df_detect_k` standard errors for at least one variation.
    NonStationary,
    /// No verdict on the value; with route `both` the two estimates must agree.
    #[default]
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualExpectation {
    #[default]
    Solution,
    NonSolution,
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupExpectation {
    /// Invariant pairing whose first integral passes the constancy test.
    #[default]
    Conserved,
    /// Non-invariant pairing that must raise the inapplicability warning.
    Inapplicable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleFormat {
    Csv,
    Binary,
}

/// Verdict thresholds. Defaults match the acceptance criteria.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Product rule: |lhs − rhs| within this many combined standard errors (3).
    pub product_rule_k: f64,
    /// Action: relative error of Im against `expected_im` (0.05).
    pub action_rel: f64,
    /// Action: |Re − expected_re| within this many standard errors (3).
    pub action_k: f64,
    /// dF on a solution: |dF| within this many standard errors (3).
    pub df_k: f64,
    /// dF on a non-solution: some |dF| above this many standard errors (5).
    pub df_detect_k: f64,
    /// Formula and FD routes agree within this many combined standard errors (3).
    pub df_agreement_k: f64,
    /// Residual: ∫E‖r‖² / ∫E‖∇U‖² at most this on a solution (0.01).
    pub residual_relative: f64,
    /// Coherence: pointwise agreement of the two residuals (1e-10).
    pub coherence: f64,
    /// Coherence: sup norm of each residual (1e-3).
    pub coherence_sup: f64,
    /// Noether: mean invariance deviation (1e-10).
    pub invariance: f64,
    /// Noether: commutation residual (1e-6).
    pub commutation: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            product_rule_k: 3.0,
            action_rel: 0.05,
            action_k: 3.0,
            df_k: 3.0,
            df_detect_k: 5.0,
            df_agreement_k: 3.0,
            residual_relative: 0.01,
            coherence: 1e-10,
            coherence_sup: 1e-3,
            invariance: crate::noether::INVARIANCE_TOLERANCE,
            commutation: 1e-6,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSpec {
    start: f64,
    end: f64,
    steps: usize,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum ModelSpec {
    Brownian {
        dim: usize,
        sigma: f64,
        initial: InitialSpec,
    },
    OrnsteinUhlenbeck {
        dim: usize,
        omega: f64,
        sigma: f64,
        initial: InitialSpec,
    },
    Linear {
        dim: usize,
        rate: f64,
        center: Option<Vec<f64>>,
        start: Vec<f64>,
    },
}

#[derive(Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
enum InitialSpec {
    Point { x: Vec<f64> },
    BrownianAt { start: Vec<f64>, elapsed: f64 },
    OuStationary,
    Gaussian { mean: Vec<f64>, cov: Vec<f64> },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LagrangianFile {
    mass: Option<f64>,
    q: Option<Vec<f64>>,
    potential: String,
    #[serde(default)]
    params: toml::Table,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DensityFile {
    #[serde(default)]
    route: DensityRoute,
    family: Option<String>,
    t0: Option<f64>,
    #[serde(default)]
    bandwidth: BandwidthRule,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DerivativesFile {
    product_rule_times: Option<Vec<f64>>,
    product_rule_delta: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSpec {
    pub expected_re: Option<f64>,
    pub expected_im: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DfFile {
    #[serde(default)]
    variations: Vec<VariationShape>,
    #[serde(default)]
    route: DfRoute,
    #[serde(default)]
    expect: DfExpectation,
    #[serde(default)]
    fd: FdOptions,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualSpec {
    #[serde(default)]
    pub variant: ResidualVariant,
    #[serde(default)]
    pub expect: ResidualExpectation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoherenceSpec {
    pub x0: Vec<f64>,
    pub v0: Vec<f64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoetherFile {
    #[serde(default)]
    groups: Vec<toml::Table>,
    delta_s: Option<f64>,
    s: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Also write the simulated paths.
    pub ensemble: Option<EnsembleFormat>,
    /// Also write the full per-path derivative fields.
    #[serde(default)]
    pub fields: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    id: String,
    #[serde(default)]
    description: String,
    seed: u64,
    paths: usize,
    tasks: Vec<Task>,
    grid: GridSpec,
    model: Option<ModelSpec>,
    lagrangian: LagrangianFile,
    #[serde(default)]
    density: DensityFile,
    #[serde(default)]
    estimator: EstimatorConfig,
    #[serde(default)]
    derivatives: DerivativesFile,
    #[serde(default)]
    action: ActionSpec,
    #[serde(default)]
    df: DfFile,
    #[serde(default)]
    residual: ResidualSpec,
    coherence: Option<CoherenceSpec>,
    #[serde(default)]
    noether: NoetherFile,
    #[serde(default)]
    tolerances: Tolerances,
    #[serde(default)]
    output: OutputSpec,
}

/// Model together with the family name its closed-form density belongs to.
#[derive(Clone, Debug)]
pub struct ModelEntry {
    pub model: DiffusionModel,
    /// `bm`, `ou`, `ou_stationary` or `deterministic`.
    pub family: &'static str,
}

#[derive(Clone, Debug)]
pub struct DfSpec {
    pub variations: Vec<(String, VariationProcess)>,
    pub route: DfRoute,
    pub expect: DfExpectation,
    pub fd: FdOptions,
}

#[derive(Clone, Debug)]
pub struct GroupEntry {
    pub group: OneParameterGroup,
    pub expect: GroupExpectation,
}

#[derive(Clone, Debug)]
pub struct NoetherSpec {
    pub groups: Vec<GroupEntry>,
    /// Step of the central difference in the group parameter.
    pub delta_s: f64,
    /// Parameter value at which the commutation lemma is checked.
    pub s: f64,
}

/// A scenario with every name resolved.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub id: String,
    pub description: String,
    pub seed: u64,
    pub paths: usize,
    /// Requested tasks in execution order, each once.
    pub tasks: Vec<Task>,
    pub grid: TimeGrid,
    pub model: Option<ModelEntry>,
    pub lagrangian: LagrangianSpec,
    pub route: DensityRoute,
    pub t0: f64,
    pub bandwidth: BandwidthRule,
    pub estimator: EstimatorConfig,
    /// Product-rule check times (on the grid) and half-width δ.
    pub product_rule_times: Vec<f64>,
    pub product_rule_delta: f64,
    pub action: ActionSpec,
    pub df: DfSpec,
    pub residual: ResidualSpec,
    pub coherence: Option<CoherenceSpec>,
    pub noether: NoetherSpec,
    pub tolerances: Tolerances,
    pub output: OutputSpec,
}

fn resolve_model(spec: ModelSpec) -> Result<ModelEntry> {
    let initial = |init: InitialSpec, dim: usize, sigma: f64, omega: f64| -> Result<(InitialLaw, bool)> {
        Ok(match init {
            InitialSpec::Point { x } => (InitialLaw::Point(x), false),
            InitialSpec::BrownianAt { start, elapsed } => (InitialLaw::brownian_at(start, sigma, elapsed), false),
            InitialSpec::OuStationary => {
                if !(omega > 0.0) {
                    return Err(Error::Scenario("model.initial: ou_stationary needs an Ornstein–Uhlenbeck model".into()));
                }
                (InitialLaw::ou_stationary(dim, omega, sigma), true)
            }
            InitialSpec::Gaussian { mean, cov } => (InitialLaw::Gaussian { mean, cov }, false),
        })
    };
    Ok(match spec {
        ModelSpec::Brownian { dim, sigma, initial: init } => {
            let (law, _) = initial(init, dim, sigma, 0.0)?;
            ModelEntry {
                model: DiffusionModel::brownian(dim, sigma, law)?,
                family: "bm",
            }
        }
        ModelSpec::OrnsteinUhlenbeck { dim, omega, sigma, initial: init } => {
            let (law, stationary) = initial(init, dim, sigma, omega)?;
            ModelEntry {
                model: DiffusionModel::ornstein_uhlenbeck(dim, omega, sigma, law)?,
                family: if stationary { "ou_stationary" } else { "ou" },
            }
        }
        ModelSpec::Linear { dim, rate, center, start } => ModelEntry {
            model: DiffusionModel::new(
                dim,
                Drift::Relaxation {
                    rate,
                    center: center.unwrap_or_else(|| vec![0.0; dim]),
                },
                Dispersion::Constant(vec![0.0; dim * dim]),
                InitialLaw::Point(start),
                "linear",
            )?,
            family: "deterministic",
        },
    })
}

impl Scenario {
    /// Parses and resolves a scenario. Parse errors carry the line and column.
    pub fn from_toml_str(text: &str, registries: &Registries) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        Self::resolve(file, registries)
    }

    pub fn from_file(path: impl AsRef<Path>, registries: &Registries) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, registries).map_err(|e| match e {
            Error::Scenario(msg) => Error::Scenario(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// One of the [`BUNDLED`] scenarios.
    pub fn bundled(name: &str, registries: &Registries) -> Result<Self> {
        let (_, text) = BUNDLED.iter().find(|(n, _)| *n == name).ok_or_else(|| Error::Registry {
            registry: "bundled scenario",
            key: "scenario".into(),
            name: name.into(),
        })?;
        Self::from_toml_str(text, registries)
    }

    fn resolve(file: ScenarioFile, registries: &Registries) -> Result<Self> {
        if file.id.is_empty() || file.id.contains(['/', '\\']) {
            return Err(Error::Scenario("id must be a non-empty name without path separators".into()));
        }
        let mut tasks = file.tasks.clone();
        tasks.sort();
        if let Some(w) = tasks.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Scenario(format!("task `{}` is listed twice", w[0].as_str())));
        }
        if tasks.is_empty() {
            return Err(Error::Scenario("no tasks requested".into()));
        }
        let grid = TimeGrid::new(file.grid.start, file.grid.end, file.grid.steps)?;
        let model = file.model.map(resolve_model).transpose()?;
        if model.is_none() && tasks.iter().any(Task::needs_model) {
            return Err(Error::Scenario("a [model] section is required for every task except coherence".into()));
        }
        let dim = match (&model, &file.coherence) {
            (Some(m), _) => m.model.dim(),
            (None, Some(c)) => c.x0.len(),
            (None, None) => return Err(Error::Scenario("coherence needs a [coherence] section with x0 and v0".into())),
        };
        if tasks.contains(&Task::Coherence) && file.coherence.is_none() {
            return Err(Error::Scenario("coherence needs a [coherence] section with x0 and v0".into()));
        }

        let potential = registries.potential("lagrangian.potential", &file.lagrangian.potential, dim, &file.lagrangian.params)?;
        let q = match (file.lagrangian.mass, file.lagrangian.q) {
            (Some(_), Some(_)) => return Err(Error::Scenario("lagrangian: give either mass or q, not both".into())),
            (None, Some(q)) => QuadraticForm::new(dim, q)?,
            (m, None) => QuadraticForm::scaled_identity(dim, m.unwrap_or(1.0)),
        };
        let lagrangian = LagrangianSpec::new(q, potential);

        let route = file.density.route;
        if let Some(m) = &model {
            match route {
                DensityRoute::Dirac if !m.model.is_deterministic() => {
                    return Err(Error::Scenario("density route `dirac` requires σ = 0".into()))
                }
                DensityRoute::Analytic => {
                    if let Some(name) = &file.density.family {
                        if !DENSITY_FAMILIES.iter().any(|(n, _)| n == name) {
                            return Err(Error::Registry {
                                registry: "density family",
                                key: "density.family".into(),
                                name: name.clone(),
                            });
                        }
                        // an OU model started in its stationary law is also a member of `ou`
                        let fits = name == m.family || (name == "ou" && m.family == "ou_stationary");
                        if !fits {
                            return Err(Error::Scenario(format!(
                                "density family `{name}` does not describe a `{}` model",
                                m.family
                            )));
                        }
                    }
                }
                _ => {}
            }
        }
        file.estimator.validate(&grid)?;

        let m = grid.steps();
        let product_rule_delta = match file.derivatives.product_rule_delta {
            Some(d) => d,
            None => ((0.1 / grid.dt()).round().max(1.0)) * grid.dt(),
        };
        let product_rule_times = match file.derivatives.product_rule_times {
            Some(ts) => ts,
            None => (1..=5).map(|k| grid.time((k * m + 3) / 6)).collect(),
        };

        let variations = file
            .df
            .variations
            .iter()
            .map(|shape| {
                crate::error::check_dim(dim, shape.dim())?;
                Ok((shape_label(shape), VariationProcess::from_shape(shape, grid.start(), grid.end())?))
            })
            .collect::<Result<Vec<_>>>()?;
        if tasks.contains(&Task::Df) && variations.is_empty() {
            return Err(Error::Scenario("df needs at least one entry in df.variations".into()));
        }

        let groups = file
            .noether
            .groups
            .iter()
            .enumerate()
            .map(|(i, table)| {
                let mut table = table.clone();
                let kind = match table.remove("kind") {
                    Some(toml::Value::String(s)) => s,
                    _ => return Err(Error::Scenario(format!("noether.groups[{i}] needs a string `kind`"))),
                };
                let expect = match table.remove("expect") {
                    None => GroupExpectation::default(),
                    Some(v) => v.try_into().map_err(|e| Error::Scenario(format!("noether.groups[{i}].expect: {e}")))?,
                };
                Ok(GroupEntry {
                    group: registries.group(&format!("noether.groups[{i}].kind"), &kind, dim, &table)?,
                    expect,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if tasks.contains(&Task::Noether) && groups.is_empty() {
            return Err(Error::Scenario("noether needs at least one entry in noether.groups".into()));
        }
        if let Some(c) = &file.coherence {
            crate::error::check_dim(dim, c.x0.len())?;
            crate::error::check_dim(dim, c.v0.len())?;
        }
        if file.paths == 0 {
            return Err(Error::Scenario("paths must be positive".into()));
        }

        Ok(Scenario {
            id: file.id,
            description: file.description,
            seed: file.seed,
            paths: file.paths,
            tasks,
            grid,
            model,
            lagrangian,
            route,
            t0: file.density.t0.unwrap_or(grid.start()),
            bandwidth: file.density.bandwidth,
            estimator: file.estimator,
            product_rule_times,
            product_rule_delta,
            action: file.action,
            df: DfSpec {
                variations,
                route: file.df.route,
                expect: file.df.expect,
                fd: file.df.fd,
            },
            residual: file.residual,
            coherence: file.coherence,
            noether: NoetherSpec {
                groups,
                delta_s: file.noether.delta_s.unwrap_or(1e-4),
                s: file.noether.s.unwrap_or(0.3),
            },
            tolerances: file.tolerances,
            output: file.output,
        })
    }

    /// Density model for the `analytic` and `dirac` routes. The `kde` route
    /// needs the simulated ensemble and is built by the pipeline.
    pub fn closed_form_density(&self) -> Result<Option<DensityModel>> {
        let Some(entry) = &self.model else { return Ok(None) };
        Ok(match self.route {
            DensityRoute::Dirac => Some(DensityModel::dirac(entry.model.dim())),
            DensityRoute::Analytic if entry.family == "deterministic" => Some(DensityModel::dirac(entry.model.dim())),
            DensityRoute::Analytic => Some(DensityModel::analytic_gaussian(&entry.model, self.t0)?),
            DensityRoute::Kde => None,
        })
    }
}

fn shape_label(shape: &VariationShape) -> String {
    match shape {
        VariationShape::Zero { .. } => "zero".into(),
        VariationShape::Constant { value } => format!("constant{value:?}"),
        VariationShape::Ramp { amplitude } => format!("ramp{amplitude:?}"),
        VariationShape::Bump { amplitude } => format!("bump{amplitude:?}"),
        VariationShape::Sine { amplitude, harmonic } => format!("sine{harmonic}{amplitude:?}"),
        VariationShape::Cosine { amplitude, harmonic } => format!("cosine{harmonic}{amplitude:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
id = "tiny"
seed = 3
paths = 200
tasks = ["action", "simulate"]

[grid]
start = 1.0
end = 2.0
steps = 100

[model]
kind = "brownian"
dim = 1
sigma = 1.0
initial = { law = "brownian_at", start = [0.0], elapsed = 1.0 }

[lagrangian]
potential = "free"
"#;

    #[test]
    fn bundled_scenarios_resolve() {
        let reg = Registries::default();
        for (name, _) in BUNDLED {
            let s = Scenario::bundled(name, &reg).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(s.id, name);
        }
    }

    #[test]
    fn minimal_scenario_defaults() {
        let s = Scenario::from_toml_str(MINIMAL, &Registries::default()).unwrap();
        assert_eq!(s.tasks, vec![Task::Simulate, Task::Action]);
        assert_eq!(s.route, DensityRoute::Analytic);
        assert_eq!(s.t0, 1.0);
        assert_eq!(s.tolerances, Tolerances::default());
        assert_eq!(s.product_rule_times.len(), 5);
        assert!(s.product_rule_times.iter().all(|t| *t > 1.0 && *t < 2.0 && s.grid.index_of(*t).is_some()));
        assert!((s.product_rule_delta - 0.1).abs() < 1e-12);
        assert_eq!(s.model.as_ref().unwrap().family, "bm");
        assert!(s.closed_form_density().unwrap().unwrap().gaussian().is_some());
    }

    #[test]
    fn unknown_potential_names_registry_and_key() {
        let text = MINIMAL.replace("potential = \"free\"", "potential = \"morse\"");
        let err = Scenario::from_toml_str(&text, &Registries::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("potential registry") && msg.contains("lagrangian.potential") && msg.contains("morse"), "{msg}");
    }

    #[test]
    fn parse_errors_name_the_line() {
        let text = MINIMAL.replace("paths = 200", "paths = \"many\"");
        let msg = Scenario::from_toml_str(&text, &Registries::default()).unwrap_err().to_string();
        assert!(msg.contains("line 4"), "{msg}");
    }

    #[test]
    fn structural_errors() {
        let reg = Registries::default();
        let dup = MINIMAL.replace("tasks = [\"action\", \"simulate\"]", "tasks = [\"action\", \"action\"]");
        assert!(Scenario::from_toml_str(&dup, &reg).is_err());
        let dirac = format!("{MINIMAL}\n[density]\nroute = \"dirac\"\n");
        assert!(Scenario::from_toml_str(&dirac, &reg).unwrap_err().to_string().contains("σ = 0"));
        let family = format!("{MINIMAL}\n[density]\nfamily = \"ou_stationary\"\n");
        assert!(Scenario::from_toml_str(&family, &reg).is_err());
        let unknown_family = format!("{MINIMAL}\n[density]\nfamily = \"cauchy\"\n");
        assert!(matches!(Scenario::from_toml_str(&unknown_family, &reg), Err(Error::Registry { .. })));
        let df = MINIMAL.replace("\"simulate\"]", "\"df\"]");
        assert!(Scenario::from_toml_str(&df, &reg).is_err());
        let group = format!(
            "{}\n[noether]\ngroups = [{{ kind = \"boost\" }}]\n",
            MINIMAL.replace("\"simulate\"]", "\"noether\"]")
        );
        let msg = Scenario::from_toml_str(&group, &reg).unwrap_err().to_string();
        assert!(msg.contains("group registry") && msg.contains("noether.groups[0].kind"), "{msg}");
        let extra = MINIMAL.replace("potential = \"free\"", "potential = \"free\"\nparams = { omega = 2.0 }");
        assert!(Scenario::from_toml_str(&extra, &reg).is_err());
    }

    #[test]
    fn registry_listing() {
        let text = list_registries();
        for name in ["free", "harmonic", "central_power", "rotation", "translation", "scaling", "bm_free_particle", "ou_stationary", "kde"] {
            assert!(text.contains(name), "{name}");
        }
        let mut reg = Registries::empty();
        assert!(reg.list().contains("potentials:"));
        reg.register_potential("quartic", |_, _| {
            Ok(Potential::custom("quartic", |x| x[0].powi(4), |x, g| g[0] = 4.0 * x[0].powi(3)))
        });
        assert!(reg.list().contains("quartic"));
        let mut full = Registries::default();
        full.register_potential("quartic", |_, _| Ok(Potential::Free));
        let text = MINIMAL.replace("potential = \"free\"", "potential = \"quartic\"");
        assert!(Scenario::from_toml_str(&text, &full).is_ok());
        assert_eq!(full.potential_names(), vec!["central_power", "free", "harmonic", "quartic"]);
    }
}
