//! Run configuration: parsing, default resolution and validation.
//!
//! A config file is TOML with top-level `seed`, `output_dir` and `workers`
//! plus `[model]`, `[noise]`, `[integrator]` and `[experiment]` tables.
//! Every missing value is filled with its default, and the resolved
//! config is what the run manifest records.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use shelllab::bel::TestFunction;
use shelllab::ergolab;
use shelllab::integrator::{Scheme, SdePathConfig};
use shelllab::levy::{JumpSampler, LevyMeasure, LevySpec};
use shelllab::rng;
use shelllab::shell::{ModelParams, ShellModel, ShellState};

use crate::CliError;

pub const DEFAULT_OUTPUT_DIR: &str = "shelllab-out";
pub const OUTPUT_DIR_ENV: &str = "SHELLLAB_OUTPUT_DIR";

/// The experiment a subcommand runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Simulate,
    BelCheck,
    Ergodicity,
    NoiseCheck,
    Refine,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Simulate => "simulate",
            Kind::BelCheck => "bel_check",
            Kind::Ergodicity => "ergodicity",
            Kind::NoiseCheck => "noise_check",
            Kind::Refine => "refine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    TemperedStable,
    VarianceGamma,
}

// ---------------------------------------------------------------- input

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    workers: Option<usize>,
    #[serde(default)]
    model: ModelParams,
    #[serde(default)]
    noise: NoiseInput,
    #[serde(default)]
    integrator: IntegratorBlock,
    #[serde(default)]
    experiment: toml::Table,
    streams: Option<StreamInfo>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseInput {
    family: Option<Family>,
    c_plus: Option<f64>,
    c_minus: Option<f64>,
    beta_plus: Option<f64>,
    beta_minus: Option<f64>,
    alpha: Option<f64>,
    sigma: Option<f64>,
    theta: Option<f64>,
    vartheta: Option<f64>,
    delta_cut: Option<f64>,
}

impl NoiseInput {
    fn resolve(&self, v: &mut Vec<String>) -> NoiseBlock {
        let family = self.family.unwrap_or(Family::VarianceGamma);
        let foreign: &[(&str, Option<f64>)] = match family {
            Family::TemperedStable => &[("sigma", self.sigma), ("theta", self.theta), ("vartheta", self.vartheta)],
            Family::VarianceGamma => &[
                ("c_plus", self.c_plus),
                ("c_minus", self.c_minus),
                ("beta_plus", self.beta_plus),
                ("beta_minus", self.beta_minus),
                ("alpha", self.alpha),
            ],
        };
        for (name, value) in foreign {
            if value.is_some() {
                v.push(format!("noise.{name} is not a parameter of the {family:?} family"));
            }
        }
        let spec = match family {
            Family::TemperedStable => LevySpec::TemperedStable {
                c_plus: self.c_plus.unwrap_or(1.0),
                c_minus: self.c_minus.unwrap_or(1.0),
                beta_plus: self.beta_plus.unwrap_or(1.0),
                beta_minus: self.beta_minus.unwrap_or(1.0),
                alpha: self.alpha.unwrap_or(0.5),
            },
            Family::VarianceGamma => LevySpec::VarianceGamma {
                sigma: self.sigma.unwrap_or(1.0),
                theta: self.theta.unwrap_or(0.0),
                vartheta: self.vartheta.unwrap_or(1.0),
            },
        };
        NoiseBlock { spec, delta_cut: self.delta_cut.unwrap_or(1e-3) }
    }
}

// ---------------------------------------------------------------- resolved

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseBlock {
    #[serde(flatten)]
    pub spec: LevySpec,
    pub delta_cut: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorBlock {
    pub dt: f64,
    /// Time horizon `T`.
    pub horizon: f64,
    pub scheme: Scheme,
    /// Truncation level `R`; absent integrates the full equation.
    pub truncation: Option<f64>,
}

impl Default for IntegratorBlock {
    fn default() -> Self {
        let d = SdePathConfig::default();
        IntegratorBlock { dt: d.dt, horizon: d.horizon, scheme: d.scheme, truncation: d.truncation }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamInfo {
    pub derivation: String,
    pub domains: BTreeMap<String, u64>,
}

impl StreamInfo {
    pub fn current() -> Self {
        use rng::domain::*;
        let domains = [
            ("trajectory", TRAJECTORY),
            ("ensemble_a", ENSEMBLE_A),
            ("ensemble_b", ENSEMBLE_B),
            ("bel", BEL),
            ("noise_check", NOISE_CHECK),
            ("constants", CONSTANTS),
            ("refine", REFINE),
            ("accessibility", ACCESSIBILITY),
        ];
        StreamInfo {
            derivation: rng::STREAM_DERIVATION.to_string(),
            domains: domains.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateParams {
    /// Leading real coordinates `(Re u₁, Im u₁, Re u₂, …)`; the rest are 0.
    pub initial_state: Vec<f64>,
    /// Noise stream index of the simulated path.
    pub path_index: u64,
}

impl Default for SimulateParams {
    fn default() -> Self {
        SimulateParams { initial_state: vec![1.0], path_index: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BelCheckParams {
    pub initial_state: Vec<f64>,
    /// Time `t` of the gradient `∇E Φ(u(t, x))`.
    pub time: f64,
    pub samples: usize,
    pub fd_step: f64,
    /// Weight window; 0 selects the default window.
    pub window: f64,
    /// Exponent `δ` of the gradient bound reported as `bound_rhs`.
    pub bound_delta: f64,
    pub test_functions: Vec<TestFunction>,
}

impl Default for BelCheckParams {
    fn default() -> Self {
        BelCheckParams {
            initial_state: vec![0.3, -0.15, 0.1, 0.05],
            time: 0.5,
            samples: 10_000,
            fd_step: 1e-2,
            window: 0.0,
            bound_delta: 0.0,
            test_functions: default_test_functions(),
        }
    }
}

/// Cosine, logistic and Gaussian bump, the three shapes used for the
/// gradient comparison.
pub fn default_test_functions() -> Vec<TestFunction> {
    vec![
        TestFunction::CosineOfCoordinate { coord: 0, frequency: 1.0 },
        TestFunction::LogisticOfLinear { weights: vec![1.0, -0.5, 0.5, 0.25] },
        TestFunction::BumpOfNormSq { center: vec![0.2], scale: 1.0 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErgodicityParams {
    pub xi_a: Vec<f64>,
    pub xi_b: Vec<f64>,
    /// First observation time; negative selects `5/(κλ₁)`.
    pub burn_in: f64,
    /// Last observation time; negative selects `20/(κλ₁)`.
    pub horizon: f64,
    pub times: usize,
    pub ensemble: usize,
}

impl Default for ErgodicityParams {
    fn default() -> Self {
        ErgodicityParams { xi_a: vec![], xi_b: vec![10.0], burn_in: -1.0, horizon: -1.0, times: 7, ensemble: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseCheckParams {
    /// Orders `q ≥ 1` of the tabulated moments `∫|z|^q ν(dz)`.
    pub moments: Vec<f64>,
    pub probe_horizon: f64,
    pub probe_epsilon: f64,
    pub probe_samples: usize,
    pub order_direction: f64,
    /// Decreasing ε grid of the order-condition estimate.
    pub order_grid: Vec<f64>,
}

impl Default for NoiseCheckParams {
    fn default() -> Self {
        NoiseCheckParams {
            moments: vec![1.0, 2.0, 4.0],
            probe_horizon: 1.0,
            probe_epsilon: 0.5,
            probe_samples: 10_000,
            order_direction: 1.0,
            order_grid: (0..9).map(|i| 10f64.powf(-1.0 - 0.5 * i as f64)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineParams {
    pub initial_state: Vec<f64>,
    /// Coarse shell counts; empty selects `n/2`.
    pub coarse_sizes: Vec<usize>,
    pub paths: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams { initial_state: vec![1.0], coarse_sizes: vec![], paths: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Experiment {
    Simulate(SimulateParams),
    BelCheck(BelCheckParams),
    Ergodicity(ErgodicityParams),
    NoiseCheck(NoiseCheckParams),
    Refine(RefineParams),
}

/// A fully resolved and validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub model: ModelParams,
    pub noise: NoiseBlock,
    pub integrator: IntegratorBlock,
    pub experiment: Experiment,
    pub streams: StreamInfo,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

impl RunConfig {
    /// Parses `text` (empty for all defaults), applies overrides and
    /// validates every block, listing all violations.
    pub fn load(text: &str, kind: Kind, overrides: &Overrides, env_output_dir: Option<PathBuf>) -> Result<RunConfig, CliError> {
        let file: FileConfig = toml::from_str(text).map_err(|e| CliError::Config(vec![e.message().to_string()]))?;
        let mut v = Vec::new();
        if let Some(s) = &file.streams {
            if *s != StreamInfo::current() {
                v.push("streams: the config was produced with a different stream derivation".into());
            }
        }
        let noise = file.noise.resolve(&mut v);
        let experiment = parse_experiment(file.experiment, kind, &file.model, &mut v);
        let workers = overrides.workers.or(file.workers).unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if workers == 0 {
            v.push("workers must be ≥ 1".into());
        }
        let cfg = RunConfig {
            seed: overrides.seed.or(file.seed).unwrap_or(0),
            output_dir: overrides.output_dir.clone().or(env_output_dir).or(file.output_dir).unwrap_or_else(|| DEFAULT_OUTPUT_DIR.into()),
            workers,
            model: file.model,
            noise,
            integrator: file.integrator,
            experiment,
            streams: StreamInfo::current(),
        };
        v.extend(cfg.violations());
        if v.is_empty() { Ok(cfg) } else { Err(CliError::Config(v)) }
    }

    fn violations(&self) -> Vec<String> {
        let mut v = self.model.violations();
        v.extend(self.noise.spec.violations());
        v.extend(self.path_config().violations());
        let n = self.model.n;
        let dim = 2 * n;
        let mut state = |name: &str, x: &[f64]| {
            if x.len() > dim {
                v.push(format!("experiment.{name} has {} entries, the state has {dim} real coordinates", x.len()));
            }
            if x.iter().any(|c| !c.is_finite()) {
                v.push(format!("experiment.{name} must be finite"));
            }
        };
        match &self.experiment {
            Experiment::Simulate(p) => state("initial_state", &p.initial_state),
            Experiment::BelCheck(p) => {
                state("initial_state", &p.initial_state);
                if p.samples < 1000 {
                    v.push(format!("experiment.samples = {} must be ≥ 1000", p.samples));
                }
                if !(p.time > 0.0 && p.time.is_finite()) {
                    v.push(format!("experiment.time = {} must be > 0", p.time));
                }
                if !(p.fd_step > 0.0) {
                    v.push(format!("experiment.fd_step = {} must be > 0", p.fd_step));
                }
                if !(p.window >= 0.0 && p.window <= p.time) {
                    v.push(format!("experiment.window = {} must lie in [0, time]", p.window));
                }
                if !(0.0..=0.5).contains(&p.bound_delta) {
                    v.push(format!("experiment.bound_delta = {} must lie in [0, 1/2]", p.bound_delta));
                }
                if p.test_functions.is_empty() {
                    v.push("experiment.test_functions must not be empty".into());
                }
                for (i, f) in p.test_functions.iter().enumerate() {
                    v.extend(f.violations(dim).into_iter().map(|m| format!("experiment.test_functions[{i}]: {m}")));
                }
            }
            Experiment::Ergodicity(p) => {
                state("xi_a", &p.xi_a);
                state("xi_b", &p.xi_b);
                if padded(&p.xi_a, dim) == padded(&p.xi_b, dim) {
                    v.push("experiment.xi_a and experiment.xi_b must differ".into());
                }
                if p.ensemble < ergolab::MIN_ENSEMBLE {
                    v.push(format!("experiment.ensemble = {} must be ≥ {}", p.ensemble, ergolab::MIN_ENSEMBLE));
                }
                if p.times == 0 {
                    v.push("experiment.times must be ≥ 1".into());
                }
                if !(p.burn_in >= 0.0 && p.horizon >= p.burn_in && p.horizon.is_finite()) {
                    v.push(format!("experiment: need 0 ≤ burn_in ({}) ≤ horizon ({})", p.burn_in, p.horizon));
                }
            }
            Experiment::NoiseCheck(p) => {
                if p.moments.iter().any(|q| !(*q >= 1.0)) {
                    v.push("experiment.moments: every order must be ≥ 1".into());
                }
                if p.probe_samples < 10_000 {
                    v.push(format!("experiment.probe_samples = {} must be ≥ 10000", p.probe_samples));
                }
                if !(p.probe_epsilon > 0.0) || !(p.probe_horizon > 0.0) {
                    v.push("experiment.probe_epsilon and probe_horizon must be > 0".into());
                }
                if p.order_grid.len() < 3 || p.order_grid.iter().any(|e| !(*e > 0.0)) || p.order_grid.windows(2).any(|w| w[1] >= w[0]) {
                    v.push("experiment.order_grid must hold ≥ 3 strictly decreasing positive values".into());
                }
                if p.order_direction == 0.0 || !p.order_direction.is_finite() {
                    v.push("experiment.order_direction must be finite and nonzero".into());
                }
            }
            Experiment::Refine(p) => {
                state("initial_state", &p.initial_state);
                if p.paths == 0 {
                    v.push("experiment.paths must be ≥ 1".into());
                }
                for &c in &p.coarse_sizes {
                    if !(2..n).contains(&c) {
                        v.push(format!("experiment.coarse_sizes: {c} must lie in [2, n = {n})"));
                    }
                }
            }
        }
        v
    }

    pub fn path_config(&self) -> SdePathConfig {
        SdePathConfig {
            dt: self.integrator.dt,
            horizon: self.integrator.horizon,
            delta_cut: self.noise.delta_cut,
            seed: self.seed,
            truncation: self.integrator.truncation,
            scheme: self.integrator.scheme,
        }
    }

    pub fn build_model(&self) -> shelllab::Result<ShellModel> {
        ShellModel::new(self.model.clone())
    }

    pub fn build_sampler(&self) -> shelllab::Result<JumpSampler> {
        JumpSampler::new(&LevyMeasure::new(self.noise.spec)?, self.noise.delta_cut)
    }

    /// The manifest: the resolved config as TOML, loadable with `--config`.
    pub fn manifest(&self) -> String {
        let mut text = format!("# shelllab {} resolved run config\n", env!("CARGO_PKG_VERSION"));
        if self.integrator.truncation.is_none() {
            text.push_str("# integrator.truncation absent: the full (untruncated) equation\n");
        }
        text.push_str(&toml::to_string(self).expect("config serializes"));
        text
    }
}

/// Pads a real coordinate prefix with zeros to the full state.
pub fn state_from_prefix(x: &[f64], n: usize) -> ShellState {
    ShellState::from_real(&padded(x, 2 * n))
}

fn padded(x: &[f64], dim: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    out.resize(dim.max(x.len()), 0.0);
    out
}

fn parse_experiment(mut table: toml::Table, kind: Kind, model: &ModelParams, v: &mut Vec<String>) -> Experiment {
    if let Some(k) = table.remove("kind") {
        if k.as_str() != Some(kind.name()) {
            v.push(format!("experiment.kind = {k} does not match the subcommand ({})", kind.name()));
        }
    }
    fn get<T: Default + for<'de> Deserialize<'de>>(table: toml::Table, v: &mut Vec<String>) -> T {
        table.try_into().unwrap_or_else(|e: toml::de::Error| {
            v.push(format!("experiment: {}", e.message()));
            T::default()
        })
    }
    let (kappa, l1) = (model.kappa, model.k0 * model.lambda * model.lambda);
    match kind {
        Kind::Simulate => Experiment::Simulate(get(table, v)),
        Kind::BelCheck => Experiment::BelCheck(get(table, v)),
        Kind::Ergodicity => {
            let mut p: ErgodicityParams = get(table, v);
            if p.burn_in < 0.0 {
                p.burn_in = 5.0 / (kappa * l1);
            }
            if p.horizon < 0.0 {
                p.horizon = 20.0 / (kappa * l1);
            }
            Experiment::Ergodicity(p)
        }
        Kind::NoiseCheck => Experiment::NoiseCheck(get(table, v)),
        Kind::Refine => {
            let mut p: RefineParams = get(table, v);
            if p.coarse_sizes.is_empty() {
                p.coarse_sizes = vec![(model.n / 2).max(2)];
            }
            Experiment::Refine(p)
        }
    }
}
