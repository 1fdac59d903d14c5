//! Experiment configuration: parsing, overrides and validation.

use rcmlab_core::assumptions::Thresholds;
use rcmlab_core::env::MuMode;
use rcmlab_core::green::HarnackFamily;
use rcmlab_core::lattice::LatticeSpec;
use rcmlab_core::law::ConductanceLaw;
use rcmlab_core::trap::DEFAULT_POWER_BUDGET;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Assumptions,
    HeatKernel,
    BoundsCheck,
    ExitTimes,
    DynkinHunt,
    LevySystem,
    Green,
    Harnack,
    EhiCondition,
    TrapReturn,
    Llt,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Assumptions => "assumptions",
            Experiment::HeatKernel => "heat-kernel",
            Experiment::BoundsCheck => "bounds-check",
            Experiment::ExitTimes => "exit-times",
            Experiment::DynkinHunt => "dynkin-hunt",
            Experiment::LevySystem => "levy-system",
            Experiment::Green => "green",
            Experiment::Harnack => "harnack",
            Experiment::EhiCondition => "ehi-condition",
            Experiment::TrapReturn => "trap-return",
            Experiment::Llt => "llt",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        FieldError { field: field.into(), message: message.into() }
    }
}

fn constant_one() -> ConductanceLaw {
    ConductanceLaw::Constant { value: 1.0 }
}

fn zero_seed() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentBlock {
    pub lattice: LatticeSpec,
    #[serde(default = "constant_one")]
    pub law: ConductanceLaw,
    #[serde(default = "counting")]
    pub mu_mode: MuMode,
    pub alpha: f64,
    /// One environment per seed.
    #[serde(default = "zero_seed")]
    pub seeds: Vec<u64>,
}

fn counting() -> MuMode {
    MuMode::Counting
}

pub const DEFAULT_SAMPLE_BUDGET: u64 = 100_000_000;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Caps {
    pub site_cap: usize,
    /// Site-steps for matrix powers.
    pub power_budget: u64,
    /// Monte Carlo paths per environment.
    pub sample_budget: u64,
}

impl Default for Caps {
    fn default() -> Self {
        Caps {
            site_cap: rcmlab_core::lattice::DEFAULT_SITE_CAP,
            power_budget: DEFAULT_POWER_BUDGET,
            sample_budget: DEFAULT_SAMPLE_BUDGET,
        }
    }
}

/// Configuration as read from disk, before the parameter block is typed.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    experiment: Option<Experiment>,
    environment: EnvironmentBlock,
    #[serde(default)]
    params: Option<Value>,
    /// Monte Carlo seed.
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    caps: Caps,
}

/// Fully resolved configuration; serializing it gives a complete re-runnable config.
#[derive(Clone, Debug, Serialize)]
pub struct Config {
    pub experiment: Experiment,
    pub environment: EnvironmentBlock,
    pub params: Params,
    pub seed: u64,
    pub caps: Caps,
}

#[derive(Clone, Debug, Serialize)]
#[serde(untagged)]
pub enum Params {
    Assumptions(AssumptionParams),
    HeatKernel(HeatKernelParams),
    BoundsCheck(BoundsParams),
    ExitTimes(ExitParams),
    DynkinHunt(DynkinParams),
    LevySystem(LevyParams),
    Green(GreenParams),
    Harnack(HarnackParams),
    EhiCondition(EhiParams),
    TrapReturn(TrapParams),
    Llt(LltParams),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssumptionParams {
    pub theta: f64,
    pub r_grid: Vec<usize>,
    pub thresholds: Thresholds,
}

impl Default for AssumptionParams {
    fn default() -> Self {
        AssumptionParams { theta: 0.5, r_grid: vec![2, 3, 4, 5], thresholds: Thresholds::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatKernelParams {
    pub t_grid: Vec<f64>,
    pub x0: Option<Vec<i32>>,
    pub tol: f64,
    /// Kill on leaving `B(x0, domain_radius)` when set.
    pub domain_radius: Option<f64>,
    /// Compare against the dense eigensolver (at most 2000 sites).
    pub eigen_check: bool,
    /// Hoelder regression on the killed kernel; needs `domain_radius`.
    pub hoelder: bool,
}

impl Default for HeatKernelParams {
    fn default() -> Self {
        HeatKernelParams { t_grid: vec![1.0], x0: None, tol: 1e-10, domain_radius: None, eigen_check: false, hoelder: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsParams {
    pub t_grid: Vec<f64>,
    pub x0: Option<Vec<i32>>,
    /// Targets `y` with `|y - x0| <= y_radius`.
    pub y_radius: f64,
    /// Keep targets whose offsets from `x0` are multiples of `y_step`.
    pub y_step: usize,
    pub tol: f64,
    /// `(C1, C2)` for the smallest-passing-time scan.
    pub reference: Option<(f64, f64)>,
    /// Re-run on a grid with geometric time midpoints and halved target spacing.
    pub refine: bool,
    /// Allowed relative change of `C2/C1` under refinement.
    pub refine_tolerance: f64,
}

impl Default for BoundsParams {
    fn default() -> Self {
        BoundsParams {
            t_grid: vec![8.0, 16.0, 32.0, 64.0],
            x0: None,
            y_radius: 256.0,
            y_step: 2,
            tol: 1e-12,
            reference: None,
            refine: true,
            refine_tolerance: 0.2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExitParams {
    pub x0: Option<Vec<i32>>,
    pub r_grid: Vec<f64>,
    pub nsamples: usize,
    /// Allowed distance of the fitted exponent from alpha.
    pub exponent_tolerance: f64,
}

impl Default for ExitParams {
    fn default() -> Self {
        ExitParams { x0: None, r_grid: vec![8.0, 16.0, 32.0, 64.0], nsamples: 10_000, exponent_tolerance: 0.2 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynkinParams {
    pub x0: Option<Vec<i32>>,
    pub domain_radius: f64,
    pub t: f64,
    /// Target sites; `x0` when empty.
    pub targets: Vec<Vec<i32>>,
    pub nsamples: usize,
    pub tol: f64,
    /// Residuals must stay within this many standard errors.
    pub sigmas: f64,
}

impl Default for DynkinParams {
    fn default() -> Self {
        DynkinParams { x0: None, domain_radius: 32.0, t: 8.0, targets: Vec::new(), nsamples: 10_000, tol: 1e-12, sigmas: 3.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PairFunction {
    Zero,
    AnyJump,
    /// Jumps landing at coordinate `>= threshold` along `axis`.
    LandsInHalfSpace { axis: usize, threshold: i32 },
    LandsInBall { center: Vec<i32>, radius: f64 },
    Transition { from: Vec<i32>, to: Vec<i32> },
}

impl PairFunction {
    pub fn label(&self) -> String {
        match self {
            PairFunction::Zero => "zero".into(),
            PairFunction::AnyJump => "any_jump".into(),
            PairFunction::LandsInHalfSpace { axis, threshold } => format!("half_space(axis={axis},from={threshold})"),
            PairFunction::LandsInBall { center, radius } => format!("ball({center:?},{radius})"),
            PairFunction::Transition { from, to } => format!("transition({from:?}->{to:?})"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LevyParams {
    pub x0: Option<Vec<i32>>,
    pub domain_radius: f64,
    pub functions: Vec<PairFunction>,
    pub nsamples: usize,
    pub sigmas: f64,
}

impl Default for LevyParams {
    fn default() -> Self {
        LevyParams {
            x0: None,
            domain_radius: 32.0,
            functions: vec![PairFunction::LandsInHalfSpace { axis: 0, threshold: 10 }, PairFunction::AnyJump],
            nsamples: 10_000,
            sigmas: 3.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GreenParams {
    pub x0: Option<Vec<i32>>,
    /// Defaults to three quarters of the box radius.
    pub domain_radius: Option<f64>,
    pub fit_range: (f64, f64),
    /// Allowed distance of the fitted slope from `alpha - d`.
    pub slope_tolerance: f64,
    /// Cross-check the solve against the time integral of the killed kernel.
    pub cross_check: bool,
    pub cross_tolerance: f64,
}

impl Default for GreenParams {
    fn default() -> Self {
        GreenParams {
            x0: None,
            domain_radius: None,
            fit_range: (4.0, 24.0),
            slope_tolerance: 0.2,
            cross_check: false,
            cross_tolerance: 1e-6,
        }
    }
}

fn hitting_all() -> HarnackFamily {
    HarnackFamily::HittingProfiles { max_count: None, seed: 0 }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnackParams {
    pub x0: Option<Vec<i32>>,
    pub r_grid: Vec<f64>,
    pub family: HarnackFamily,
    /// Restrict the box to radius `ceil(box_factor * R)` for each `R`.
    pub box_factor: Option<f64>,
    /// Diagnostic bound on the WEHI growth across the grid.
    pub wehi_factor: f64,
}

impl Default for HarnackParams {
    fn default() -> Self {
        HarnackParams { x0: None, r_grid: vec![4.0, 8.0, 16.0], family: hitting_all(), box_factor: None, wehi_factor: 3.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EhiParams {
    pub x0: Option<Vec<i32>>,
    pub r: f64,
    pub theta_prime: f64,
    pub max_annuli: usize,
}

impl Default for EhiParams {
    fn default() -> Self {
        EhiParams { x0: None, r: 2.0, theta_prime: 0.1, max_annuli: 8 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrapParams {
    pub levels: Vec<u32>,
    pub eps: f64,
    /// Explicit step counts `n` per level; `n = 2^{N-1}` when absent.
    pub n_grid: Option<Vec<usize>>,
    /// Allowed spread of `P(2n,0,0) 2^{2N}` across levels.
    pub max_factor: f64,
}

impl Default for TrapParams {
    fn default() -> Self {
        TrapParams { levels: vec![3, 4, 5, 6, 7, 8], eps: 0.5, n_grid: None, max_factor: 10.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LltParams {
    pub n_grid: Vec<usize>,
    pub t_window: (f64, f64),
    pub t_points: usize,
    pub k_radius: f64,
    pub torus_radius: Option<Vec<usize>>,
    pub site_cap: usize,
}

impl Default for LltParams {
    fn default() -> Self {
        LltParams {
            n_grid: vec![4, 8, 16, 32],
            t_window: (0.5, 2.0),
            t_points: 7,
            k_radius: 2.0,
            torus_radius: None,
            site_cap: 1 << 16,
        }
    }
}

/// Sets `path` (dot separated) in a JSON object; the value is parsed as JSON
/// when possible and kept as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), FieldError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| FieldError::new(assignment, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(FieldError::new(key, "empty path segment in override"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Map::new());
            } else {
                return Err(FieldError::new(parts[..i].join("."), "cannot override inside a non-object value"));
            }
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last segment")
}

fn typed<T: DeserializeOwned + Default>(params: Option<Value>) -> Result<T, Vec<FieldError>> {
    match params {
        None | Some(Value::Null) => Ok(T::default()),
        Some(v) => serde_path_to_error::deserialize(v).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "params".to_string() } else { format!("params.{path}") };
            vec![FieldError::new(field, e.into_inner().to_string())]
        }),
    }
}

/// Parses a config document after overrides; `experiment` from the command line wins
/// when the document names none, and must match otherwise.
pub fn resolve(mut doc: Value, cli_experiment: Option<Experiment>, overrides: &[String]) -> Result<Config, Vec<FieldError>> {
    let mut errors = Vec::new();
    for o in overrides {
        if let Err(e) = apply_override(&mut doc, o) {
            errors.push(e);
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    let raw: RawConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "config".to_string() } else { path };
        vec![FieldError::new(field, e.into_inner().to_string())]
    })?;
    let experiment = match (raw.experiment, cli_experiment) {
        (Some(a), Some(b)) if a != b => {
            return Err(vec![FieldError::new(
                "experiment",
                format!("config names `{}` but the command asks for `{}`", a.name(), b.name()),
            )])
        }
        (Some(a), _) => a,
        (None, Some(b)) => b,
        (None, None) => return Err(vec![FieldError::new("experiment", "no experiment given")]),
    };
    let params = match experiment {
        Experiment::Assumptions => Params::Assumptions(typed(raw.params)?),
        Experiment::HeatKernel => Params::HeatKernel(typed(raw.params)?),
        Experiment::BoundsCheck => Params::BoundsCheck(typed(raw.params)?),
        Experiment::ExitTimes => Params::ExitTimes(typed(raw.params)?),
        Experiment::DynkinHunt => Params::DynkinHunt(typed(raw.params)?),
        Experiment::LevySystem => Params::LevySystem(typed(raw.params)?),
        Experiment::Green => Params::Green(typed(raw.params)?),
        Experiment::Harnack => Params::Harnack(typed(raw.params)?),
        Experiment::EhiCondition => Params::EhiCondition(typed(raw.params)?),
        Experiment::TrapReturn => Params::TrapReturn(typed(raw.params)?),
        Experiment::Llt => Params::Llt(typed(raw.params)?),
    };
    let config = Config { experiment, environment: raw.environment, params, seed: raw.seed, caps: raw.caps };
    let errors = validate(&config);
    if errors.is_empty() {
        Ok(config)
    } else {
        Err(errors)
    }
}

fn positive_list(errors: &mut Vec<FieldError>, field: &str, v: &[f64]) {
    if v.is_empty() {
        errors.push(FieldError::new(field, "must not be empty"));
    } else if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        errors.push(FieldError::new(field, "entries must be positive and finite"));
    }
}

fn check_site(errors: &mut Vec<FieldError>, field: &str, coords: &Option<Vec<i32>>, dim: usize) {
    if let Some(c) = coords {
        if c.len() != dim {
            errors.push(FieldError::new(field, format!("needs {dim} coordinates")));
        }
    }
}

fn check_positive(errors: &mut Vec<FieldError>, field: &str, v: f64) {
    if !(v.is_finite() && v > 0.0) {
        errors.push(FieldError::new(field, "must be positive and finite"));
    }
}

fn check_tol(errors: &mut Vec<FieldError>, field: &str, v: f64) {
    if !(v > 0.0 && v <= 1e-6) {
        errors.push(FieldError::new(field, "must lie in (0, 1e-6]"));
    }
}

/// Semantic checks; all problems are collected.
pub fn validate(c: &Config) -> Vec<FieldError> {
    let mut e = Vec::new();
    let env = &c.environment;
    if !(env.alpha > 0.0 && env.alpha < 2.0) {
        e.push(FieldError::new("environment.alpha", "must lie in (0, 2)"));
    }
    if let Err(rcmlab_core::Error::InvalidParameter { field, reason }) = env.lattice.validate() {
        e.push(FieldError::new(format!("environment.lattice.{field}"), reason));
    }
    if let Err(rcmlab_core::Error::InvalidParameter { field, reason }) = env.law.validate() {
        let field = field.strip_prefix("law.").unwrap_or(&field).to_string();
        e.push(FieldError::new(format!("environment.law.{field}"), reason));
    }
    if env.seeds.is_empty() {
        e.push(FieldError::new("environment.seeds", "must not be empty"));
    }
    if let MuMode::Custom(mu) = &env.mu_mode {
        if mu.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            e.push(FieldError::new("environment.mu_mode.custom", "entries must be positive and finite"));
        }
    }
    if c.caps.site_cap == 0 {
        e.push(FieldError::new("caps.site_cap", "must be positive"));
    }
    let dim = env.lattice.dim();
    match &c.params {
        Params::Assumptions(p) => {
            if !(p.theta > 0.0 && p.theta < 1.0) {
                e.push(FieldError::new("params.theta", "must lie in (0, 1)"));
            }
            if p.r_grid.is_empty() || p.r_grid.contains(&0) {
                e.push(FieldError::new("params.r_grid", "must be a nonempty list of positive radii"));
            }
            if !(p.thresholds.c0 >= 0.5 && p.thresholds.c0 <= 1.0) {
                e.push(FieldError::new("params.thresholds.c0", "must lie in [1/2, 1]"));
            }
        }
        Params::HeatKernel(p) => {
            if p.t_grid.is_empty() || p.t_grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
                e.push(FieldError::new("params.t_grid", "must be a nonempty list of nonnegative times"));
            }
            check_site(&mut e, "params.x0", &p.x0, dim);
            check_tol(&mut e, "params.tol", p.tol);
            if let Some(r) = p.domain_radius {
                check_positive(&mut e, "params.domain_radius", r);
            }
            if p.hoelder && p.domain_radius.is_none() {
                e.push(FieldError::new("params.hoelder", "needs params.domain_radius"));
            }
        }
        Params::BoundsCheck(p) => {
            positive_list(&mut e, "params.t_grid", &p.t_grid);
            check_site(&mut e, "params.x0", &p.x0, dim);
            check_positive(&mut e, "params.y_radius", p.y_radius);
            if p.y_step == 0 {
                e.push(FieldError::new("params.y_step", "must be positive"));
            }
            check_tol(&mut e, "params.tol", p.tol);
            if let Some((lo, hi)) = p.reference {
                if !(lo > 0.0 && hi >= lo) {
                    e.push(FieldError::new("params.reference", "needs 0 < C1 <= C2"));
                }
            }
            check_positive(&mut e, "params.refine_tolerance", p.refine_tolerance);
        }
        Params::ExitTimes(p) => {
            check_site(&mut e, "params.x0", &p.x0, dim);
            positive_list(&mut e, "params.r_grid", &p.r_grid);
            if p.nsamples < 400 {
                e.push(FieldError::new("params.nsamples", "at least 400 samples are needed"));
            }
            check_positive(&mut e, "params.exponent_tolerance", p.exponent_tolerance);
        }
        Params::DynkinHunt(p) => {
            check_site(&mut e, "params.x0", &p.x0, dim);
            check_positive(&mut e, "params.domain_radius", p.domain_radius);
            check_positive(&mut e, "params.t", p.t);
            for (i, y) in p.targets.iter().enumerate() {
                if y.len() != dim {
                    e.push(FieldError::new(format!("params.targets[{i}]"), format!("needs {dim} coordinates")));
                }
            }
            if p.nsamples < 1000 {
                e.push(FieldError::new("params.nsamples", "at least 1000 samples are needed"));
            }
            check_tol(&mut e, "params.tol", p.tol);
            check_positive(&mut e, "params.sigmas", p.sigmas);
        }
        Params::LevySystem(p) => {
            check_site(&mut e, "params.x0", &p.x0, dim);
            check_positive(&mut e, "params.domain_radius", p.domain_radius);
            if p.functions.is_empty() {
                e.push(FieldError::new("params.functions", "must not be empty"));
            }
            for (i, f) in p.functions.iter().enumerate() {
                let field = format!("params.functions[{i}]");
                match f {
                    PairFunction::LandsInHalfSpace { axis, .. } if *axis >= dim => {
                        e.push(FieldError::new(field, "axis out of range"))
                    }
                    PairFunction::LandsInBall { center, .. } if center.len() != dim => {
                        e.push(FieldError::new(field, format!("center needs {dim} coordinates")))
                    }
                    PairFunction::Transition { from, to } if from.len() != dim || to.len() != dim => {
                        e.push(FieldError::new(field, format!("endpoints need {dim} coordinates")))
                    }
                    PairFunction::Transition { from, to } if from == to => {
                        e.push(FieldError::new(field, "must vanish on the diagonal"))
                    }
                    _ => {}
                }
            }
            if p.nsamples < 2 {
                e.push(FieldError::new("params.nsamples", "at least 2 samples are needed"));
            }
            check_positive(&mut e, "params.sigmas", p.sigmas);
        }
        Params::Green(p) => {
            check_site(&mut e, "params.x0", &p.x0, dim);
            if let Some(r) = p.domain_radius {
                check_positive(&mut e, "params.domain_radius", r);
            }
            if !(p.fit_range.0 > 0.0 && p.fit_range.1 > p.fit_range.0) {
                e.push(FieldError::new("params.fit_range", "needs 0 < lo < hi"));
            }
            check_positive(&mut e, "params.slope_tolerance", p.slope_tolerance);
            check_positive(&mut e, "params.cross_tolerance", p.cross_tolerance);
        }
        Params::Harnack(p) => {
            check_site(&mut e, "params.x0", &p.x0, dim);
            if p.r_grid.is_empty() || p.r_grid.iter().any(|r| !(*r >= 1.0 && r.is_finite())) {
                e.push(FieldError::new("params.r_grid", "must be a nonempty list of radii >= 1"));
            }
            if let Some(f) = p.box_factor {
                if !(f >= 2.0 && f.is_finite()) {
                    e.push(FieldError::new("params.box_factor", "must be at least 2"));
                }
            }
            if let HarnackFamily::HittingProfiles { max_count: Some(0), .. } = p.family {
                e.push(FieldError::new("params.family.max_count", "must be positive"));
            }
            check_positive(&mut e, "params.wehi_factor", p.wehi_factor);
        }
        Params::EhiCondition(p) => {
            check_site(&mut e, "params.x0", &p.x0, dim);
            if !(p.r >= 1.0) {
                e.push(FieldError::new("params.r", "must be at least 1"));
            }
            if !(p.theta_prime >= 0.0) {
                e.push(FieldError::new("params.theta_prime", "must be nonnegative"));
            }
            if p.max_annuli == 0 {
                e.push(FieldError::new("params.max_annuli", "must be positive"));
            }
            if !(dim as f64 > env.alpha) {
                e.push(FieldError::new("environment.alpha", "the condition needs d > alpha"));
            }
        }
        Params::TrapReturn(p) => {
            if p.levels.is_empty() || p.levels.iter().any(|&l| l == 0 || l > 40) {
                e.push(FieldError::new("params.levels", "must be a nonempty list in 1..=40"));
            }
            check_positive(&mut e, "params.eps", p.eps);
            if let Some(g) = &p.n_grid {
                if g.is_empty() {
                    e.push(FieldError::new("params.n_grid", "must not be empty"));
                }
            }
            check_positive(&mut e, "params.max_factor", p.max_factor);
        }
        Params::Llt(p) => {
            if p.n_grid.is_empty() || p.n_grid.contains(&0) {
                e.push(FieldError::new("params.n_grid", "must be a nonempty list of positive scales"));
            }
            if !(p.t_window.0 > 0.0 && p.t_window.1 >= p.t_window.0) {
                e.push(FieldError::new("params.t_window", "needs 0 < lo <= hi"));
            }
            if p.t_points == 0 {
                e.push(FieldError::new("params.t_points", "must be positive"));
            }
            check_positive(&mut e, "params.k_radius", p.k_radius);
            if let Some(r) = &p.torus_radius {
                if r.len() != p.n_grid.len() {
                    e.push(FieldError::new("params.torus_radius", "needs one radius per scale"));
                }
            }
        }
    }
    e
}
