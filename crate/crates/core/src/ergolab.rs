//! Ensemble experiments around ergodicity: moment and decay diagnostics,
//! small-deviation and accessibility probes, and two-ensemble
//! Kolmogorov–Smirnov comparisons.
//!
//! Every path draws its noise from its own `(seed, domain, index)` stream
//! and per-path records are reduced in index order, so results do not depend
//! on the number of worker threads.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrator::{self, SdePathConfig};
use crate::levy::{JumpPath, JumpSampler};
use crate::rng::{self, domain};
use crate::shell::{self, ShellModel, ShellState};
use crate::stats::{self, Estimate, KsResult, LinearFit, Proportion, Running};

/// Quantile levels reported per recorded time.
pub const QUANTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Smallest ensemble accepted by the diagnostics.
pub const MIN_ENSEMBLE: usize = 1000;

/// Failure fraction above which a run is flagged unreliable.
pub const FAILURE_LIMIT: f64 = 0.01;

/// Observables recorded at the fixed grid times of one path.
#[derive(Debug, Clone)]
struct PathRecord {
    times: Vec<f64>,
    /// `|u|`.
    h_norm: Vec<f64>,
    /// `‖u‖ = |A^{1/2} u|`.
    v_norm: Vec<f64>,
    /// `Re u₁`.
    first_re: Vec<f64>,
    /// `sup_{s ≤ t} |u(s)|^p`, over every grid point.
    sup_power: Vec<f64>,
    /// `∫_0^t |u|^{p−2} ‖u‖² ds`, left-point rule on the merged grid.
    integral: Vec<f64>,
    poincare_violations: u64,
}

fn record_path(model: &ShellModel, cfg: &SdePathConfig, xi: &ShellState, path: &JumpPath, power: i32) -> Result<PathRecord> {
    let lambda1 = model.eigenvalue(1);
    let mut rec = PathRecord {
        times: Vec::new(),
        h_norm: Vec::new(),
        v_norm: Vec::new(),
        first_re: Vec::new(),
        sup_power: Vec::new(),
        integral: Vec::new(),
        poincare_violations: 0,
    };
    let (mut sup, mut acc, mut prev_t, mut prev_f) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    integrator::integrate(model, cfg, xi, path, |p, u| {
        let h2 = shell::norm_sq(u);
        let v2 = model.v_norm_sq(u);
        acc += prev_f * (p.time - prev_t);
        prev_t = p.time;
        prev_f = h2.powi(power / 2 - 1) * v2;
        sup = sup.max(h2.powi(power / 2));
        if p.fixed {
            let (h, v) = (h2.sqrt(), v2.sqrt());
            if v < lambda1.sqrt() * h * (1.0 - 1e-12) {
                rec.poincare_violations += 1;
            }
            rec.times.push(p.time);
            rec.h_norm.push(h);
            rec.v_norm.push(v);
            rec.first_re.push(u[0].re);
            rec.sup_power.push(sup);
            rec.integral.push(acc);
        }
    })?;
    Ok(rec)
}

/// Runs `count` paths from `xi` on streams `(cfg.seed, dom, i)`. Blow-ups are
/// counted as failures; other errors abort.
fn run_ensemble(
    model: &ShellModel,
    cfg: &SdePathConfig,
    sampler: &JumpSampler,
    xi: &ShellState,
    count: usize,
    dom: u64,
    power: i32,
) -> Result<(Vec<PathRecord>, u64)> {
    cfg.validate()?;
    if xi.len() != model.n() {
        return Err(Error::Domain(format!("initial state has {} shells, model has {}", xi.len(), model.n())));
    }
    let out: Vec<Result<Option<PathRecord>>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(cfg.seed, dom, i as u64);
            let path = integrator::sample_noise(model, cfg, sampler, &mut rng)?;
            match record_path(model, cfg, xi, &path, power) {
                Ok(r) => Ok(Some(r)),
                Err(Error::BlowUp { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut records = Vec::with_capacity(count);
    let mut failures = 0;
    for r in out {
        match r? {
            Some(rec) => records.push(rec),
            None => failures += 1,
        }
    }
    Ok((records, failures))
}

fn check_ensemble(count: usize) -> Result<()> {
    if count < MIN_ENSEMBLE {
        return Err(Error::Config(vec![format!("ensemble size {count} must be ≥ {MIN_ENSEMBLE}")]));
    }
    Ok(())
}

fn unreliable(failures: u64, total: usize) -> bool {
    failures as f64 > FAILURE_LIMIT * total as f64
}

fn column<F: Fn(&PathRecord) -> &Vec<f64>>(records: &[PathRecord], k: usize, field: F) -> Vec<f64> {
    records.iter().map(|r| field(r)[k]).collect()
}

fn quantiles(mut xs: Vec<f64>) -> [f64; 5] {
    xs.sort_by(f64::total_cmp);
    QUANTILE_LEVELS.map(|q| stats::quantile_sorted(&xs, q))
}

fn estimate(xs: impl IntoIterator<Item = f64>) -> Estimate {
    xs.into_iter().collect::<Running>().estimate()
}

/// Ensemble statistics at one recorded time.
#[derive(Debug, Clone, Serialize)]
pub struct TimeSummary {
    pub time: f64,
    /// Quantiles of `|u|` at [`QUANTILE_LEVELS`].
    pub h_quantiles: [f64; 5],
    /// Quantiles of `‖u‖` at [`QUANTILE_LEVELS`].
    pub v_quantiles: [f64; 5],
    pub h_mean: Estimate,
    /// `E|u|²`.
    pub h_second: Estimate,
    /// `E|u|⁴`.
    pub h_fourth: Estimate,
    pub v_mean: Estimate,
    /// `E‖u‖²`.
    pub v_second: Estimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSummary {
    pub sample_count: usize,
    pub failures: u64,
    /// Recorded samples with `‖u‖ < √λ₁ |u|`; always zero for a correct model.
    pub poincare_violations: u64,
    pub unreliable: bool,
    pub times: Vec<TimeSummary>,
}

fn summarize(records: &[PathRecord], failures: u64) -> EnsembleSummary {
    let total = records.len() + failures as usize;
    let times = match records.first() {
        None => Vec::new(),
        Some(first) => (0..first.times.len())
            .map(|k| {
                let h = column(records, k, |r| &r.h_norm);
                let v = column(records, k, |r| &r.v_norm);
                TimeSummary {
                    time: first.times[k],
                    h_mean: estimate(h.iter().copied()),
                    h_second: estimate(h.iter().map(|x| x * x)),
                    h_fourth: estimate(h.iter().map(|x| x.powi(4))),
                    v_mean: estimate(v.iter().copied()),
                    v_second: estimate(v.iter().map(|x| x * x)),
                    h_quantiles: quantiles(h),
                    v_quantiles: quantiles(v),
                }
            })
            .collect(),
    };
    EnsembleSummary {
        sample_count: records.len(),
        failures,
        poincare_violations: records.iter().map(|r| r.poincare_violations).sum(),
        unreliable: unreliable(failures, total),
        times,
    }
}

/// Smallest envelope `(K₀ t + |ξ|^p) e^{K₁ t}` that dominates a curve.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct EnvelopeFit {
    pub k0: f64,
    pub k1: f64,
    /// `max_t curve / envelope`; at most 1 by construction.
    pub max_ratio: f64,
}

impl EnvelopeFit {
    pub fn value(&self, start: f64, t: f64) -> f64 {
        (self.k0 * t + start) * (self.k1 * t).exp()
    }
}

/// Scans `K₁` over a grid, takes the least `K₀` for which the envelope
/// dominates `curve` at every time, and keeps the pair with the smallest
/// total envelope.
pub fn fit_envelope(times: &[f64], curve: &[f64], start: f64) -> EnvelopeFit {
    let horizon = times.iter().copied().fold(0.0, f64::max);
    let k1_max = if horizon > 0.0 { 50.0 / horizon } else { 0.0 };
    let mut best: Option<(f64, EnvelopeFit)> = None;
    for i in 0..=1000 {
        let k1 = k1_max * i as f64 / 1000.0;
        let k0 = times
            .iter()
            .zip(curve)
            .filter(|(t, _)| **t > 0.0)
            .map(|(t, c)| (c * (-k1 * t).exp() - start) / t)
            .fold(0.0, f64::max);
        let fit = EnvelopeFit { k0, k1, max_ratio: 0.0 };
        let area: f64 = times.iter().map(|&t| fit.value(start, t)).sum();
        if best.as_ref().is_none_or(|(a, _)| area < *a) {
            best = Some((area, fit));
        }
    }
    let mut fit = best.map(|b| b.1).unwrap_or(EnvelopeFit { k0: 0.0, k1: 0.0, max_ratio: 0.0 });
    fit.max_ratio = times
        .iter()
        .zip(curve)
        .map(|(&t, c)| {
            let e = fit.value(start, t);
            if e > 0.0 { c / e } else if *c > 0.0 { f64::INFINITY } else { 0.0 }
        })
        .fold(0.0, f64::max);
    fit
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentDiagnostics {
    pub power: i32,
    pub summary: EnsembleSummary,
    /// `E sup_{s ≤ t} |u(s)|^p` per recorded time.
    pub sup_moment: Vec<Estimate>,
    /// `κ E ∫_0^t |u|^{p−2} ‖u‖² ds` per recorded time.
    pub dissipation: Vec<Estimate>,
    /// Envelope of `E sup|u|^p + 2pκ E∫|u|^{p−2}‖u‖²`.
    pub envelope: EnvelopeFit,
    /// Every estimate above is finite.
    pub finite: bool,
}

/// Moments of `sup |u|^p` and of the dissipation integral over the horizon
/// of `cfg`, with the exponential envelope that bounds their sum.
pub fn moment_diagnostics(
    model: &ShellModel,
    cfg: &SdePathConfig,
    sampler: &JumpSampler,
    xi: &ShellState,
    power: i32,
    ensemble: usize,
) -> Result<MomentDiagnostics> {
    if power != 2 && power != 4 {
        return Err(Error::Config(vec![format!("moment power {power} must be 2 or 4")]));
    }
    check_ensemble(ensemble)?;
    let (records, failures) = run_ensemble(model, cfg, sampler, xi, ensemble, domain::TRAJECTORY, power)?;
    let summary = summarize(&records, failures);
    let kappa = model.kappa();
    let steps = summary.times.len();
    let sup_moment: Vec<Estimate> = (0..steps).map(|k| estimate(records.iter().map(|r| r.sup_power[k]))).collect();
    let dissipation: Vec<Estimate> = (0..steps).map(|k| estimate(records.iter().map(|r| kappa * r.integral[k]))).collect();
    let times: Vec<f64> = summary.times.iter().map(|s| s.time).collect();
    let curve: Vec<f64> = sup_moment.iter().zip(&dissipation).map(|(s, d)| s.mean + 2.0 * power as f64 * d.mean).collect();
    let start = xi.norm_sq().powi(power / 2);
    let envelope = fit_envelope(&times, &curve, start);
    let finite = !records.is_empty() && curve.iter().all(|c| c.is_finite()) && envelope.k0.is_finite();
    Ok(MomentDiagnostics { power, summary, sup_moment, dissipation, envelope, finite })
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayReport {
    pub initial_sq: f64,
    pub times: Vec<f64>,
    /// `E|u(t)|²` per recorded time.
    pub mean_sq: Vec<Estimate>,
    /// `κ/λ₁²`, the rate appearing in the energy-estimate proof.
    pub predicted_rate: f64,
    /// `2κλ₁`, the decay rate of shell 1 without nonlinearity or noise.
    pub linear_rate: f64,
    /// Least-squares fit of `ln E|u|²` against time while the ensemble
    /// mean is still well above its final level.
    pub fit: Option<LinearFit>,
    pub fit_points: usize,
    /// `λ₁² ln 2 / κ`, where the predicted decay halves the energy.
    pub horizon: f64,
    pub at_horizon: Estimate,
    /// `|ξ|²/2`.
    pub threshold: f64,
    /// `mean + 3 SE ≤ threshold` at the horizon.
    pub passed: bool,
    pub failures: u64,
    pub unreliable: bool,
}

impl DecayReport {
    pub fn fitted_rate(&self) -> Option<f64> {
        self.fit.map(|f| -f.slope)
    }
}

/// Half-life horizon `λ₁² ln 2 / κ` of the decay rate `κ/λ₁²`.
pub fn decay_horizon(model: &ShellModel) -> f64 {
    let l1 = model.eigenvalue(1);
    l1 * l1 * std::f64::consts::LN_2 / model.kappa()
}

/// Energy decay from a large initial state. The run covers `horizon`
/// (default [`decay_horizon`]) and records `E|u|²` at every fixed grid time.
pub fn decay_probe(
    model: &ShellModel,
    cfg: &SdePathConfig,
    sampler: &JumpSampler,
    xi: &ShellState,
    ensemble: usize,
    horizon: Option<f64>,
) -> Result<DecayReport> {
    if !sampler.measure().is_symmetric() {
        return Err(Error::Config(vec!["decay probe requires a symmetric Lévy measure".into()]));
    }
    check_ensemble(ensemble)?;
    let t_star = decay_horizon(model);
    let horizon = horizon.unwrap_or(t_star);
    let run_cfg = cfg.with_horizon(horizon);
    let (records, failures) = run_ensemble(model, &run_cfg, sampler, xi, ensemble, domain::TRAJECTORY, 2)?;
    let times: Vec<f64> = records.first().map(|r| r.times.clone()).unwrap_or_default();
    let mean_sq: Vec<Estimate> = (0..times.len()).map(|k| estimate(records.iter().map(|r| r.h_norm[k].powi(2)))).collect();
    let initial_sq = xi.norm_sq();
    let floor = mean_sq.last().map_or(0.0, |e| e.mean);
    let cut = (1e-2 * initial_sq).max(10.0 * floor);
    let (fx, fy): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(&mean_sq)
        .take_while(|(_, e)| e.mean >= cut && e.mean > 0.0)
        .map(|(t, e)| (*t, e.mean.ln()))
        .unzip();
    let fit = (fx.len() >= 3).then(|| stats::linear_fit(&fx, &fy));
    // value at the grid time closest to the halving horizon
    let k = times
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - t_star).abs().total_cmp(&(b.1 - t_star).abs()))
        .map_or(0, |(k, _)| k);
    let at_horizon = mean_sq.get(k).copied().unwrap_or(Estimate { mean: f64::NAN, se: f64::NAN, n: 0 });
    let threshold = initial_sq / 2.0;
    let l1 = model.eigenvalue(1);
    Ok(DecayReport {
        initial_sq,
        predicted_rate: model.kappa() / (l1 * l1),
        linear_rate: 2.0 * model.kappa() * l1,
        fit,
        fit_points: fx.len(),
        horizon: t_star,
        passed: at_horizon.mean + 3.0 * at_horizon.se <= threshold,
        at_horizon,
        threshold,
        failures,
        unreliable: unreliable(failures, ensemble),
        times,
        mean_sq,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SmallDeviationProbe {
    pub horizon: f64,
    pub epsilon: f64,
    pub probability: Proportion,
    /// The Wilson interval excludes 0.
    pub passed: bool,
}

/// Fraction of one-component noise paths with `sup_{[0,T]} |l| < ε`.
pub fn small_deviation_probe(sampler: &JumpSampler, horizon: f64, epsilon: f64, samples: usize, seed: u64) -> Result<SmallDeviationProbe> {
    let mut v = Vec::new();
    if samples < 10_000 {
        v.push(format!("sample count {samples} must be ≥ 10000"));
    }
    if !(epsilon > 0.0) {
        v.push(format!("epsilon = {epsilon} must be > 0"));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        v.push(format!("horizon = {horizon} must be > 0"));
    }
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let hits: Vec<Result<bool>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, domain::NOISE_CHECK, i as u64);
            Ok(sampler.sample_path(horizon, 1, &mut rng)?.sup_abs(0) < epsilon)
        })
        .collect();
    let mut count = 0u64;
    for h in hits {
        count += h? as u64;
    }
    let probability = stats::wilson(count, samples as u64);
    Ok(SmallDeviationProbe { horizon, epsilon, passed: probability.lower > 0.0, probability })
}

/// Inputs of [`accessibility_probe`].
#[derive(Debug, Clone, Serialize)]
pub struct AccessibilitySettings {
    /// Every initial state must satisfy `|ξ| ≤ radius`.
    pub radius: f64,
    pub gamma: f64,
    /// Convolution paths sampled for the small-ball event.
    pub samples: usize,
    /// Paths from `ξ = 0` used to estimate the noise floor `E|u(T₀)|²`.
    pub floor_ensemble: usize,
    /// Random pairs used to estimate the bilinear constant `C₀`.
    pub constant_samples: usize,
    /// Uses this `C₀` instead of estimating it.
    pub c0: Option<f64>,
}

/// `T₀` and `δ₀` for which the Gronwall bound on `v = u − 𝔖` gives
/// `|v(T₀)|² ≤ γ/4` and `|𝔖|² ≤ γ/4`, hence `|u(T₀)|² ≤ γ`.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct AccessibilityThresholds {
    pub t0: f64,
    pub delta0: f64,
    /// Bound on `sup_{[0,T₀]} |𝔖|²` defining the small-convolution event,
    /// `min(δ₀, κ²/(4λ₁C₀²))`.
    pub epsilon: f64,
    /// `R² e^{−κT₀/(2λ₁)} + 2κ⁻¹C₀² ε²`, the bound on `|v(T₀)|²`.
    pub v_bound: f64,
}

pub fn accessibility_thresholds(model: &ShellModel, radius: f64, gamma: f64, c0: f64) -> AccessibilityThresholds {
    let kappa = model.kappa();
    let l1 = model.eigenvalue(1);
    let c0_sq = c0 * c0;
    // |ξ|² e^{−κT/(2λ₁)} ≤ γ/8 and 2κ⁻¹C₀²δ² ≤ γ/8
    let t0 = (2.0 * l1 / kappa) * (8.0 * radius * radius / gamma).ln().max(0.0);
    let delta0 = (gamma / 4.0).min((gamma * kappa / (16.0 * c0_sq)).sqrt());
    let epsilon = delta0.min(kappa * kappa / (4.0 * l1 * c0_sq));
    let v_bound = radius * radius * (-kappa * t0 / (2.0 * l1)).exp() + 2.0 * c0_sq * epsilon * epsilon / kappa;
    AccessibilityThresholds { t0: t0.max(f64::MIN_POSITIVE), delta0, epsilon, v_bound }
}

#[derive(Debug, Clone, Serialize)]
pub struct AccessibilityReport {
    pub radius: f64,
    pub gamma: f64,
    pub c0: f64,
    pub thresholds: AccessibilityThresholds,
    /// `E|u(T₀)|²` from `ξ = 0`.
    pub noise_floor: Estimate,
    /// `ℙ(sup_{[0,T₀]} |𝔖|² < ε)`.
    pub p_hat_convolution_small: Proportion,
    /// Fraction of small-convolution paths with `|u(T₀, ξ)|² ≤ γ` for every `ξ`.
    pub conditional_success_rate: Proportion,
    /// `p_hat_convolution_small × conditional_success_rate`, a lower estimate
    /// of `ℙ(|u(T₀, ξ)|² ≤ γ)`.
    pub lower_bound: f64,
    /// Largest `|u(T₀, ξ)|²` seen on small-convolution paths.
    pub max_terminal_sq: f64,
}

/// Monte Carlo check of the accessibility argument: small convolution paths
/// are rare but not null, and on them every start in the ball ends in
/// `B(γ)` by time `T₀`.
pub fn accessibility_probe(
    model: &ShellModel,
    cfg: &SdePathConfig,
    sampler: &JumpSampler,
    starts: &[ShellState],
    settings: &AccessibilitySettings,
) -> Result<AccessibilityReport> {
    let mut v = Vec::new();
    if !(settings.gamma > 0.0) {
        v.push(format!("gamma = {} must be > 0", settings.gamma));
    }
    if !(settings.radius > 0.0) {
        v.push(format!("radius = {} must be > 0", settings.radius));
    }
    if starts.is_empty() {
        v.push("at least one initial state is required".into());
    }
    for (i, xi) in starts.iter().enumerate() {
        if xi.len() != model.n() {
            v.push(format!("initial state {i} has {} shells, model has {}", xi.len(), model.n()));
        } else if xi.norm() > settings.radius {
            v.push(format!("initial state {i} has |ξ| = {} > radius {}", xi.norm(), settings.radius));
        }
    }
    if settings.samples == 0 {
        v.push("sample count must be > 0".into());
    }
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let c0 = match settings.c0 {
        Some(c) => c,
        None => {
            let mut rng = rng::stream(cfg.seed, domain::CONSTANTS, 0);
            model.estimate_bilinear_constants(settings.constant_samples.max(1), &mut rng).c0
        }
    };
    let thresholds = accessibility_thresholds(model, settings.radius, settings.gamma, c0);
    let run_cfg = cfg.with_horizon(thresholds.t0);
    run_cfg.validate()?;

    check_ensemble(settings.floor_ensemble)?;
    let (floor_records, _) = run_ensemble(model, &run_cfg, sampler, &ShellState::zeros(model.n()), settings.floor_ensemble, domain::TRAJECTORY, 2)?;
    let noise_floor = estimate(floor_records.iter().map(|r| r.h_norm.last().map_or(f64::NAN, |h| h * h)));
    if !(settings.gamma > noise_floor.mean) {
        return Err(Error::Domain(format!(
            "gamma = {} does not exceed the noise floor E|u(T0)|² = {:.4e} from ξ = 0",
            settings.gamma, noise_floor.mean
        )));
    }

    // (small convolution, every start ends in B(γ), largest |u(T₀)|²)
    let outcomes: Vec<Result<Option<(bool, f64)>>> = (0..settings.samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(cfg.seed, domain::ACCESSIBILITY, i as u64);
            let path = integrator::sample_noise(model, &run_cfg, sampler, &mut rng)?;
            if integrator::convolution_sup_sq(model, &run_cfg, &path)? >= thresholds.epsilon {
                return Ok(None);
            }
            let mut ok = true;
            let mut largest = 0.0f64;
            for xi in starts {
                match integrator::integrate(model, &run_cfg, xi, &path, |_, _| {}) {
                    Ok(u) => {
                        let e = u.norm_sq();
                        largest = largest.max(e);
                        ok &= e <= settings.gamma;
                    }
                    Err(Error::BlowUp { .. }) => {
                        ok = false;
                        largest = f64::INFINITY;
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(Some((ok, largest)))
        })
        .collect();
    let (mut hits, mut successes, mut max_terminal_sq) = (0u64, 0u64, 0.0f64);
    for o in outcomes {
        if let Some((ok, largest)) = o? {
            hits += 1;
            successes += ok as u64;
            max_terminal_sq = max_terminal_sq.max(largest);
        }
    }
    if hits == 0 {
        return Err(Error::Inconclusive(format!(
            "no path of {} had sup|S|² < {:.4e}; enlarge the sample or reduce the noise",
            settings.samples, thresholds.epsilon
        )));
    }
    let p_hat_convolution_small = stats::wilson(hits, settings.samples as u64);
    let conditional_success_rate = stats::wilson(successes, hits);
    Ok(AccessibilityReport {
        radius: settings.radius,
        gamma: settings.gamma,
        c0,
        thresholds,
        noise_floor,
        lower_bound: p_hat_convolution_small.p_hat * conditional_success_rate.p_hat,
        p_hat_convolution_small,
        conditional_success_rate,
        max_terminal_sq,
    })
}

/// One-dimensional observables compared between ensembles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    /// `|u|`.
    HNorm,
    /// `Re u₁`.
    FirstRe,
    /// `‖u‖`.
    VNorm,
}

impl Observable {
    pub const ALL: [Observable; 3] = [Observable::HNorm, Observable::FirstRe, Observable::VNorm];

    pub fn name(self) -> &'static str {
        match self {
            Observable::HNorm => "h_norm",
            Observable::FirstRe => "first_re",
            Observable::VNorm => "v_norm",
        }
    }

    fn values(self, records: &[PathRecord], k: usize) -> Vec<f64> {
        match self {
            Observable::HNorm => column(records, k, |r| &r.h_norm),
            Observable::FirstRe => column(records, k, |r| &r.first_re),
            Observable::VNorm => column(records, k, |r| &r.v_norm),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KsRow {
    pub time: f64,
    pub observable: Observable,
    #[serde(flatten)]
    pub ks: KsResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub rows: Vec<KsRow>,
    /// Per observable, the fitted exponential decay rate of the KS
    /// statistic over the requested times (`None` with fewer than 3 times).
    pub decay_rates: Vec<(Observable, Option<f64>)>,
    pub failures_a: u64,
    pub failures_b: u64,
    pub unreliable: bool,
}

impl ConvergenceReport {
    pub fn rows_at(&self, time: f64) -> impl Iterator<Item = &KsRow> {
        self.rows.iter().filter(move |r| (r.time - time).abs() < 1e-9)
    }
}

/// Default burn-in `5/(κλ₁)`.
pub fn default_burn_in(model: &ShellModel) -> f64 {
    5.0 / (model.kappa() * model.eigenvalue(1))
}

/// Default horizon `20/(κλ₁)`.
pub fn default_convergence_horizon(model: &ShellModel) -> f64 {
    20.0 / (model.kappa() * model.eigenvalue(1))
}

/// `count` equally spaced times from `burn_in` to `horizon`.
pub fn observation_times(burn_in: f64, horizon: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![burn_in],
        _ => (0..count).map(|i| burn_in + (horizon - burn_in) * i as f64 / (count - 1) as f64).collect(),
    }
}

/// Two-sample KS statistics between ensembles started at `xi_a` and `xi_b`
/// (independent noise) at each requested time. Times are snapped to the
/// fixed grid of `cfg.dt`.
pub fn invariant_measure_convergence(
    model: &ShellModel,
    cfg: &SdePathConfig,
    sampler: &JumpSampler,
    xi_a: &ShellState,
    xi_b: &ShellState,
    times: &[f64],
    ensemble: usize,
) -> Result<ConvergenceReport> {
    check_ensemble(ensemble)?;
    if times.is_empty() || times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
        return Err(Error::Config(vec!["observation times must be a non-empty list of finite times ≥ 0".into()]));
    }
    let horizon = times.iter().copied().fold(0.0, f64::max).max(cfg.dt);
    let run_cfg = cfg.with_horizon(horizon);
    let (a, failures_a) = run_ensemble(model, &run_cfg, sampler, xi_a, ensemble, domain::ENSEMBLE_A, 2)?;
    let (b, failures_b) = run_ensemble(model, &run_cfg, sampler, xi_b, ensemble, domain::ENSEMBLE_B, 2)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::Inconclusive("every path of an ensemble blew up".into()));
    }
    let grid = &a[0].times;
    let mut rows = Vec::with_capacity(3 * times.len());
    for &t in times {
        let k = grid
            .iter()
            .enumerate()
            .min_by(|x, y| (x.1 - t).abs().total_cmp(&(y.1 - t).abs()))
            .map(|(k, _)| k)
            .expect("grid is non-empty");
        for obs in Observable::ALL {
            let ks = stats::ks_two_sample(&obs.values(&a, k), &obs.values(&b, k));
            rows.push(KsRow { time: grid[k], observable: obs, ks });
        }
    }
    let decay_rates = Observable::ALL
        .iter()
        .map(|&obs| {
            let (x, y): (Vec<f64>, Vec<f64>) =
                rows.iter().filter(|r| r.observable == obs && r.ks.statistic > 0.0).map(|r| (r.time, r.ks.statistic.ln())).unzip();
            (obs, (x.len() >= 3).then(|| -stats::linear_fit(&x, &y).slope))
        })
        .collect();
    Ok(ConvergenceReport {
        rows,
        decay_rates,
        failures_a,
        failures_b,
        unreliable: unreliable(failures_a, ensemble) || unreliable(failures_b, ensemble),
    })
}
