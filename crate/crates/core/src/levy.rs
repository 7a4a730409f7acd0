//! Lévy measures of tempered-stable type, compound-Poisson path sampling
//! above a cutoff, and the small-deviation / order-condition checks.
//!
//! Both families share the density
//! `g(z) = c± |z|^{-1-α} e^{-β±|z|}` (sign of `z` picks the side); the
//! variance-gamma family is the `α = 0` member after reparametrisation.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violations};
use crate::quad::{self, QuadOptions, QuadResult};

const POS: usize = 0;
const NEG: usize = 1;

/// Number of knots in each side's tabulated CDF.
pub const CDF_KNOTS: usize = 2048;

/// Default cap on the expected number of events per component and path.
pub const DEFAULT_EVENT_CAP: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum LevySpec {
    TemperedStable {
        c_plus: f64,
        c_minus: f64,
        beta_plus: f64,
        beta_minus: f64,
        alpha: f64,
    },
    VarianceGamma {
        sigma: f64,
        /// Drift of the subordinated Brownian motion.
        theta: f64,
        /// Variance rate of the gamma subordinator.
        vartheta: f64,
    },
}

impl LevySpec {
    pub fn symmetric_tempered_stable(c: f64, beta: f64, alpha: f64) -> Self {
        LevySpec::TemperedStable { c_plus: c, c_minus: c, beta_plus: beta, beta_minus: beta, alpha }
    }

    pub fn symmetric_variance_gamma(sigma: f64, vartheta: f64) -> Self {
        LevySpec::VarianceGamma { sigma, theta: 0.0, vartheta }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Violations::default();
        match *self {
            LevySpec::TemperedStable { c_plus, c_minus, beta_plus, beta_minus, alpha } => {
                v.check(c_plus >= 0.0 && c_plus.is_finite(), || format!("noise.c_plus = {c_plus} must be ≥ 0"));
                v.check(c_minus >= 0.0 && c_minus.is_finite(), || format!("noise.c_minus = {c_minus} must be ≥ 0"));
                v.check(c_plus + c_minus > 0.0, || "noise: c_plus + c_minus must be > 0".into());
                v.check(beta_plus > 0.0 && beta_plus.is_finite(), || format!("noise.beta_plus = {beta_plus} must be > 0"));
                v.check(beta_minus > 0.0 && beta_minus.is_finite(), || format!("noise.beta_minus = {beta_minus} must be > 0"));
                v.check((0.0..1.0).contains(&alpha), || format!("noise.alpha = {alpha} must lie in [0, 1)"));
            }
            LevySpec::VarianceGamma { sigma, theta, vartheta } => {
                v.check(sigma > 0.0 && sigma.is_finite(), || format!("noise.sigma = {sigma} must be > 0"));
                v.check(theta.is_finite(), || format!("noise.theta = {theta} must be finite"));
                v.check(vartheta > 0.0 && vartheta.is_finite(), || format!("noise.vartheta = {vartheta} must be > 0"));
            }
        }
        v.0
    }
}

/// Which side of the origin a quantity refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Positive,
    Negative,
}

impl Side {
    fn idx(self) -> usize {
        match self {
            Side::Positive => POS,
            Side::Negative => NEG,
        }
    }

    fn sign(self) -> f64 {
        match self {
            Side::Positive => 1.0,
            Side::Negative => -1.0,
        }
    }
}

/// A validated measure in its common tempered-stable form.
#[derive(Debug, Clone, PartialEq)]
pub struct LevyMeasure {
    spec: LevySpec,
    c: [f64; 2],
    beta: [f64; 2],
    alpha: f64,
}

fn quad_opts() -> QuadOptions {
    QuadOptions { abs_tol: 1e-300, rel_tol: 1e-11, max_panels: 4000 }
}

impl LevyMeasure {
    pub fn new(spec: LevySpec) -> Result<Self> {
        let v = spec.violations();
        if !v.is_empty() {
            return Err(Error::Config(v));
        }
        let (c, beta, alpha) = match spec {
            LevySpec::TemperedStable { c_plus, c_minus, beta_plus, beta_minus, alpha } => {
                ([c_plus, c_minus], [beta_plus, beta_minus], alpha)
            }
            LevySpec::VarianceGamma { sigma, theta, vartheta } => {
                let c = 1.0 / vartheta;
                let root = (2.0 * sigma * sigma / vartheta + theta * theta).sqrt();
                ([c, c], [2.0 * c / (root + theta), 2.0 * c / (root - theta)], 0.0)
            }
        };
        Ok(LevyMeasure { spec, c, beta, alpha })
    }

    pub fn spec(&self) -> &LevySpec {
        &self.spec
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn c(&self, side: Side) -> f64 {
        self.c[side.idx()]
    }

    pub fn beta(&self, side: Side) -> f64 {
        self.beta[side.idx()]
    }

    pub fn is_symmetric(&self) -> bool {
        self.c[0] == self.c[1] && self.beta[0] == self.beta[1]
    }

    /// Density of one side at magnitude `x > 0`.
    #[inline]
    fn side_density(&self, side: usize, x: f64) -> f64 {
        let c = self.c[side];
        if c == 0.0 {
            return 0.0;
        }
        c * x.powf(-1.0 - self.alpha) * (-self.beta[side] * x).exp()
    }

    /// `g(z)` for `z ≠ 0`.
    pub fn density(&self, z: f64) -> Result<f64> {
        if z == 0.0 || !z.is_finite() {
            return Err(Error::Domain(format!("density requires finite z ≠ 0, got {z}")));
        }
        let side = if z > 0.0 { POS } else { NEG };
        Ok(self.side_density(side, z.abs()))
    }

    /// `g'(z)/g(z)` for `z` in the support.
    pub fn log_density_ratio(&self, z: f64) -> Result<f64> {
        if z == 0.0 || !z.is_finite() {
            return Err(Error::Domain(format!("log-density ratio requires finite z ≠ 0, got {z}")));
        }
        let side = if z > 0.0 { POS } else { NEG };
        if self.c[side] == 0.0 {
            return Err(Error::Domain(format!("z = {z} lies outside the support of the measure")));
        }
        Ok(self.log_density_ratio_unchecked(z))
    }

    #[inline]
    pub(crate) fn log_density_ratio_unchecked(&self, z: f64) -> f64 {
        if z > 0.0 {
            -(1.0 + self.alpha) / z - self.beta[POS]
        } else {
            -(1.0 + self.alpha) / z + self.beta[NEG]
        }
    }

    /// Constant `C` with `|g'/g(z)| ≤ C (1 + |z|^{-1})` on the support.
    pub fn ratio_constant(&self) -> f64 {
        let mut c = 1.0 + self.alpha;
        for s in [POS, NEG] {
            if self.c[s] > 0.0 {
                c = c.max(self.beta[s]);
            }
        }
        c
    }

    /// Magnitude beyond which `g(x) x^power` stays below `1e-16` on a side.
    pub fn tail_cutoff(&self, side: Side, power: f64) -> f64 {
        let s = side.idx();
        let f = |x: f64| self.side_density(s, x) * x.powf(power);
        let mut hi: f64 = 1.0;
        while f(hi) >= 1e-16 || f(2.0 * hi) >= 1e-16 {
            hi *= 2.0;
            if hi > 1e300 {
                break;
            }
        }
        hi
    }

    /// `∫ f(x) g(±x) dx` over magnitudes `x ∈ [lo, hi]` on one side.
    /// `f` receives the magnitude. `hi = ∞` is replaced by the tail cutoff
    /// for integrands growing at most like `x^tail_power`. `kinks` are extra
    /// split points where `f` is not smooth.
    pub fn integrate_side<F: Fn(f64) -> f64>(
        &self,
        side: Side,
        f: F,
        lo: f64,
        hi: f64,
        tail_power: f64,
        kinks: &[f64],
    ) -> QuadResult {
        let s = side.idx();
        if self.c[s] == 0.0 || hi <= lo {
            return QuadResult { value: 0.0, abs_error: 0.0, converged: true };
        }
        let hi = hi.min(self.tail_cutoff(side, tail_power.max(4.0)));
        if hi <= lo {
            return QuadResult { value: 0.0, abs_error: 0.0, converged: true };
        }
        let mut cuts = vec![lo, hi];
        for &k in kinks.iter().chain(std::iter::once(&1.0)) {
            if k > lo && k < hi {
                cuts.push(k);
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let integrand = |x: f64| f(x) * self.side_density(s, x);
        let mut total = QuadResult { value: 0.0, abs_error: 0.0, converged: true };
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let r = if a == 0.0 {
                quad::integrate_singular_origin(&integrand, b, self.alpha, quad_opts())
            } else if b / a > 4.0 {
                quad::integrate_log(&integrand, a, b, quad_opts())
            } else {
                quad::integrate(&integrand, a, b, quad_opts())
            };
            total.value += r.value;
            total.abs_error += r.abs_error;
            total.converged &= r.converged;
        }
        total
    }

    fn both_sides<F: Fn(Side, f64) -> f64>(&self, f: F, lo: f64, hi: f64, power: f64, kinks: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for side in [Side::Positive, Side::Negative] {
            let r = self.integrate_side(side, |x| f(side, x), lo, hi, power, kinks);
            if !r.converged || !r.value.is_finite() {
                return Err(Error::Numerical(format!(
                    "quadrature did not converge on the {side:?} side (value {}, error {})",
                    r.value, r.abs_error
                )));
            }
            total += r.value;
        }
        Ok(total)
    }

    /// `∫ |z|^q ν(dz)` for `q ≥ 1`.
    pub fn moment(&self, q: f64) -> Result<f64> {
        if !(q >= 1.0) {
            return Err(Error::Domain(format!("moment order q = {q} must be ≥ 1")));
        }
        self.both_sides(|_, x| x.powf(q), 0.0, f64::INFINITY, q, &[])
    }

    /// `∫_{|z| ≥ lo} |z|^q ν(dz)` for any real `q` when `lo > 0`.
    pub fn moment_above(&self, q: f64, lo: f64) -> Result<f64> {
        if !(lo > 0.0) {
            return Err(Error::Domain(format!("lower cutoff must be > 0, got {lo}")));
        }
        self.both_sides(|_, x| x.powf(q), lo, f64::INFINITY, q.max(0.0), &[])
    }

    /// `ν({|z| ≥ δ})` on one side.
    pub fn side_mass_above(&self, side: Side, delta: f64) -> f64 {
        self.integrate_side(side, |_| 1.0, delta, f64::INFINITY, 0.0, &[]).value
    }

    /// `ν({|z| ≥ δ})`.
    pub fn mass_above(&self, delta: f64) -> Result<f64> {
        self.moment_above(0.0, delta)
    }

    /// `−∫_{lo ≤ |z| ≤ 1} z ν(dz)`; with `lo = 0` this is the drift `ℰ` of
    /// the small-deviation rule.
    pub fn compensator_drift(&self, lo: f64) -> Result<f64> {
        if lo >= 1.0 {
            return Ok(0.0);
        }
        let signed = self.both_sides(|side, x| side.sign() * x, lo, 1.0, 1.0, &[])?;
        Ok(-signed)
    }

    /// `∫ d/dz (z² g(z)) dz` over both half-lines, evaluated as the
    /// quadrature of `z g(z) (2 + z g'/g)`.
    pub fn compensator_identity(&self) -> Result<f64> {
        self.both_sides(
            |side, x| {
                let z = side.sign() * x;
                z * (2.0 + z * self.log_density_ratio_unchecked(z))
            },
            0.0,
            f64::INFINITY,
            2.0,
            &[],
        )
    }

    pub fn small_deviation_verdict(&self) -> SmallDeviationReport {
        let type_one_integral = self.both_sides(|_, x| x, 0.0, 1.0, 1.0, &[]);
        let (type_one, value) = match type_one_integral {
            Ok(v) => (v.is_finite(), v),
            Err(_) => (false, f64::INFINITY),
        };
        let drift = if type_one { self.compensator_drift(0.0).unwrap_or(f64::NAN) } else { f64::NAN };
        let scale = value.abs().max(1.0);
        classify_small_deviation(type_one, drift, self.c[NEG] > 0.0, self.c[POS] > 0.0, 1e-9 * scale)
            .with_integral(value)
    }

    /// Scaling exponent of `F(ε) = ∫ (|z y/ε|² ∧ 1) ν(dz)` as `ε → 0`.
    pub fn order_condition_estimate(&self, y: f64, epsilon_grid: &[f64]) -> Result<OrderEstimate> {
        if y == 0.0 || !y.is_finite() {
            return Err(Error::Domain(format!("direction y must be finite and nonzero, got {y}")));
        }
        if epsilon_grid.len() < 3
            || epsilon_grid.iter().any(|e| !(*e > 0.0))
            || epsilon_grid.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(Error::Config(vec!["epsilon grid must hold ≥ 3 strictly decreasing positive values".into()]));
        }
        let span = (epsilon_grid[0] / epsilon_grid[epsilon_grid.len() - 1]).log10();
        if span < 4.0 - 1e-12 {
            return Err(Error::Config(vec![format!("epsilon grid spans {span:.2} decades; at least 4 required")]));
        }
        let ya = y.abs();
        let mut f_vals = Vec::with_capacity(epsilon_grid.len());
        for &eps in epsilon_grid {
            let kink = eps / ya;
            let scale = ya * ya / (eps * eps);
            let v = self.both_sides(|_, x| if x < kink { scale * x * x } else { 1.0 }, 0.0, f64::INFINITY, 0.0, &[kink])?;
            f_vals.push(v);
        }
        if f_vals.iter().all(|f| *f < 1e-12) {
            return Err(Error::Inconclusive("F(ε) is below quadrature tolerance on the whole grid".into()));
        }
        let xs: Vec<f64> = epsilon_grid.iter().map(|e| (1.0 / e).ln()).collect();
        let ys: Vec<f64> = f_vals.iter().map(|f| f.ln()).collect();
        // the exponent is a small-ε property, so fit the finer half of the grid
        let half = xs.len() / 2;
        let fit = crate::stats::linear_fit(&xs[half..], &ys[half..]);
        let k = xs.len() - 1;
        let last = (ys[k] - ys[k - 1]) / (xs[k] - xs[k - 1]);
        // F ~ ε^{−α} keeps slope·ln(1/ε) growing; F ~ ln(1/ε) keeps it near 1
        let logarithmic = last * xs[k] < 1.5;
        let alpha_hat = if logarithmic { 0.0 } else { fit.slope };
        let liminf_proxy = epsilon_grid
            .iter()
            .zip(&f_vals)
            .map(|(e, f)| e.powf(alpha_hat) * f)
            .fold(f64::INFINITY, f64::min);
        let status = if logarithmic {
            Verdict::Undetermined
        } else if alpha_hat > 0.0 && liminf_proxy > 0.0 {
            Verdict::Holds
        } else {
            Verdict::Fails
        };
        Ok(OrderEstimate { alpha_hat, fitted_slope: fit.slope, liminf_proxy, status, f_values: f_vals, logarithmic })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Holds,
    Fails,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmallDeviationReport {
    pub verdict: Verdict,
    pub type_one: bool,
    /// `∫_{|z|≤1} |z| ν(dz)`.
    pub type_one_integral: f64,
    /// `ℰ = −∫_{|z|≤1} z ν(dz)`; NaN when not of type (I).
    pub drift: f64,
    pub explanation: String,
}

impl SmallDeviationReport {
    fn with_integral(mut self, v: f64) -> Self {
        self.type_one_integral = v;
        self
    }
}

/// The three-case small-deviation rule. `mass_left` / `mass_right` state
/// whether every neighbourhood `[−ε, 0)` / `(0, ε]` carries mass.
pub fn classify_small_deviation(
    type_one: bool,
    drift: f64,
    mass_left: bool,
    mass_right: bool,
    tol: f64,
) -> SmallDeviationReport {
    let mk = |verdict, explanation: String| SmallDeviationReport {
        verdict,
        type_one,
        type_one_integral: f64::NAN,
        drift,
        explanation,
    };
    if !type_one {
        return mk(Verdict::Holds, "∫_{|z|≤1}|z|ν(dz) = ∞: not of type (I), small deviations hold".into());
    }
    if !drift.is_finite() {
        return mk(Verdict::Undetermined, "drift ℰ could not be evaluated".into());
    }
    if drift.abs() <= tol {
        let note = if drift == 0.0 { String::new() } else { format!(" (|ℰ| = {:.3e} below tolerance {tol:.1e}, treated as 0)", drift.abs()) };
        return mk(Verdict::Holds, format!("type (I) with ℰ = 0{note}"));
    }
    if drift > 0.0 {
        if mass_left {
            mk(Verdict::Holds, format!("type (I), ℰ = {drift:.6e} > 0 and mass on every [−ε, 0)"))
        } else {
            mk(Verdict::Fails, format!("type (I), ℰ = {drift:.6e} > 0 but no mass near 0 on the negative side"))
        }
    } else if mass_right {
        mk(Verdict::Holds, format!("type (I), ℰ = {drift:.6e} < 0 and mass on every (0, ε]"))
    } else {
        mk(Verdict::Fails, format!("type (I), ℰ = {drift:.6e} < 0 but no mass near 0 on the positive side"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderEstimate {
    /// Scaling exponent; 0 when logarithmic growth is detected.
    pub alpha_hat: f64,
    /// Least-squares slope of `log F` against `log(1/ε)` on the finer half of the grid.
    pub fitted_slope: f64,
    /// `min_ε ε^{α̂} F(ε)` over the grid.
    pub liminf_proxy: f64,
    pub status: Verdict,
    pub f_values: Vec<f64>,
    pub logarithmic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JumpEvent {
    pub time: f64,
    pub size: f64,
}

/// Jumps of `|z| ≥ δ_cut` for each noise component over `(0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpPath {
    pub horizon: f64,
    pub delta_cut: f64,
    pub events: Vec<Vec<JumpEvent>>,
    /// Per-component drift per unit time from compensating jumps in `[δ_cut, 1]`.
    pub small_jump_drift: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergedEvent {
    pub time: f64,
    pub component: usize,
    pub size: f64,
}

impl JumpPath {
    pub fn component_count(&self) -> usize {
        self.events.len()
    }

    pub fn total_events(&self) -> usize {
        self.events.iter().map(Vec::len).sum()
    }

    /// All events ordered by time, ties broken by component.
    pub fn merged(&self) -> Vec<MergedEvent> {
        let mut all: Vec<MergedEvent> = self
            .events
            .iter()
            .enumerate()
            .flat_map(|(k, ev)| ev.iter().map(move |e| MergedEvent { time: e.time, component: k, size: e.size }))
            .collect();
        all.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.component.cmp(&b.component)));
        all
    }

    /// Keeps only the first `count` components.
    pub fn restrict(&self, count: usize) -> JumpPath {
        JumpPath {
            horizon: self.horizon,
            delta_cut: self.delta_cut,
            events: self.events[..count].to_vec(),
            small_jump_drift: self.small_jump_drift[..count].to_vec(),
        }
    }

    /// `l_k(t) = Σ_{s ≤ t} z + drift·t`.
    pub fn levy_value(&self, component: usize, t: f64) -> f64 {
        let jumps: f64 = self.events[component].iter().take_while(|e| e.time <= t).map(|e| e.size).sum();
        jumps + self.small_jump_drift[component] * t
    }

    /// `sup_{t ≤ T} |l_k(t)|`. The path is linear between jumps, so the sup
    /// is attained at a jump (either one-sided limit) or an endpoint.
    pub fn sup_abs(&self, component: usize) -> f64 {
        let d = self.small_jump_drift[component];
        let mut acc = 0.0;
        let mut best: f64 = 0.0;
        for e in &self.events[component] {
            let left = acc + d * e.time;
            acc += e.size;
            best = best.max(left.abs()).max((acc + d * e.time).abs());
        }
        best.max((acc + d * self.horizon).abs())
    }
}

/// Tabulated inverse-CDF sampler for jumps with `|z| ≥ δ_cut`.
#[derive(Debug, Clone)]
pub struct JumpSampler {
    measure: LevyMeasure,
    delta_cut: f64,
    side_mass: [f64; 2],
    knots: [Vec<f64>; 2],
    cdf: [Vec<f64>; 2],
    drift: f64,
    event_cap: f64,
}

impl JumpSampler {
    pub fn new(measure: &LevyMeasure, delta_cut: f64) -> Result<Self> {
        Self::with_cap(measure, delta_cut, DEFAULT_EVENT_CAP)
    }

    pub fn with_cap(measure: &LevyMeasure, delta_cut: f64, event_cap: f64) -> Result<Self> {
        if !(delta_cut > 0.0 && delta_cut <= 1.0) {
            return Err(Error::Config(vec![format!("delta_cut = {delta_cut} must lie in (0, 1]")]));
        }
        let mut side_mass = [0.0; 2];
        let mut knots: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        let mut cdf: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for side in [Side::Positive, Side::Negative] {
            let s = side.idx();
            if measure.c[s] == 0.0 {
                continue;
            }
            let r = measure.integrate_side(side, |_| 1.0, delta_cut, f64::INFINITY, 0.0, &[]);
            if !r.converged {
                return Err(Error::Numerical("restricted mass quadrature did not converge".into()));
            }
            side_mass[s] = r.value;
            let top = measure.tail_cutoff(side, 0.0).max(delta_cut * 1.0001);
            let (l0, l1) = (delta_cut.ln(), top.ln());
            let z: Vec<f64> = (0..CDF_KNOTS)
                .map(|i| (l0 + (l1 - l0) * i as f64 / (CDF_KNOTS - 1) as f64).exp())
                .collect();
            let mut c = vec![0.0; CDF_KNOTS];
            for i in 1..CDF_KNOTS {
                let (m, _) = quad::gk15(&|t: f64| { let x = t.exp(); measure.side_density(s, x) * x }, z[i - 1].ln(), z[i].ln());
                c[i] = c[i - 1] + m;
            }
            let total = c[CDF_KNOTS - 1];
            for v in c.iter_mut() {
                *v /= total;
            }
            knots[s] = z;
            cdf[s] = c;
        }
        let drift = measure.compensator_drift(delta_cut)?;
        Ok(JumpSampler { measure: measure.clone(), delta_cut, side_mass, knots, cdf, drift, event_cap })
    }

    pub fn measure(&self) -> &LevyMeasure {
        &self.measure
    }

    pub fn delta_cut(&self) -> f64 {
        self.delta_cut
    }

    /// `ν({|z| ≥ δ_cut})`.
    pub fn rate(&self) -> f64 {
        self.side_mass[0] + self.side_mass[1]
    }

    pub fn small_jump_drift(&self) -> f64 {
        self.drift
    }

    /// Draws one jump size from the normalised restricted measure.
    pub fn sample_size<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random::<f64>() * self.rate();
        let s = if u < self.side_mass[POS] { POS } else { NEG };
        let v: f64 = rng.random();
        let cdf = &self.cdf[s];
        let z = &self.knots[s];
        // first knot with cdf > v
        let i = cdf.partition_point(|c| *c <= v).clamp(1, CDF_KNOTS - 1);
        let (f0, f1) = (cdf[i - 1], cdf[i]);
        let frac = if f1 > f0 { ((v - f0) / (f1 - f0)).clamp(0.0, 1.0) } else { 0.0 };
        let mag = z[i - 1] * (z[i] / z[i - 1]).powf(frac);
        if s == POS { mag } else { -mag }
    }

    fn check_cap(&self, horizon: f64) -> Result<()> {
        let expected = horizon * self.rate();
        if expected > self.event_cap {
            // bisect in log δ for the cutoff meeting the cap
            let (mut lo, mut hi) = (self.delta_cut.ln(), 0.0f64);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let m = self.measure.mass_above(mid.exp()).unwrap_or(f64::INFINITY);
                if horizon * m > self.event_cap { lo = mid } else { hi = mid }
            }
            return Err(Error::Resource { expected, cap: self.event_cap, suggested_delta: hi.exp() });
        }
        Ok(())
    }

    /// Samples `components` independent jump paths on `(0, T]`.
    pub fn sample_path<R: Rng + ?Sized>(&self, horizon: f64, components: usize, rng: &mut R) -> Result<JumpPath> {
        if !(horizon >= 0.0) || !horizon.is_finite() {
            return Err(Error::Domain(format!("horizon must be finite and ≥ 0, got {horizon}")));
        }
        self.check_cap(horizon)?;
        let mean = horizon * self.rate();
        let poisson = if mean > 0.0 {
            Some(Poisson::new(mean).map_err(|e| Error::Numerical(e.to_string()))?)
        } else {
            None
        };
        let mut events = Vec::with_capacity(components);
        for _ in 0..components {
            let count = poisson.as_ref().map_or(0, |p| p.sample(rng) as usize);
            let mut times: Vec<f64> = (0..count).map(|_| horizon * (1.0 - rng.random::<f64>())).collect();
            times.sort_by(f64::total_cmp);
            let ev: Vec<JumpEvent> = times.into_iter().map(|t| JumpEvent { time: t, size: self.sample_size(rng) }).collect();
            events.push(ev);
        }
        Ok(JumpPath {
            horizon,
            delta_cut: self.delta_cut,
            events,
            small_jump_drift: vec![if horizon > 0.0 { self.drift } else { 0.0 }; components],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts() -> LevyMeasure {
        LevyMeasure::new(LevySpec::symmetric_tempered_stable(1.0, 1.0, 0.5)).unwrap()
    }

    #[test]
    fn density_values() {
        assert!((ts().density(1.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!(matches!(ts().density(0.0), Err(Error::Domain(_))));
        let vg = LevyMeasure::new(LevySpec::symmetric_variance_gamma(1.0, 1.0)).unwrap();
        assert!((vg.c(Side::Positive) - 1.0).abs() < 1e-15);
        assert!((vg.beta(Side::Positive) - 2f64.sqrt()).abs() < 1e-15);
        assert!((vg.beta(Side::Negative) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ratio_values() {
        assert!((ts().log_density_ratio(2.0).unwrap() + 1.75).abs() < 1e-15);
        assert!((ts().log_density_ratio(-2.0).unwrap() - 1.75).abs() < 1e-15);
        let vg = LevyMeasure::new(LevySpec::symmetric_variance_gamma(1.0, 1.0)).unwrap();
        assert!((vg.log_density_ratio(1.0).unwrap() + 1.0 + 2f64.sqrt()).abs() < 1e-14);
        let one_sided = LevyMeasure::new(LevySpec::TemperedStable {
            c_plus: 1.0, c_minus: 0.0, beta_plus: 1.0, beta_minus: 1.0, alpha: 0.3,
        }).unwrap();
        assert!(matches!(one_sided.log_density_ratio(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn invalid_specs_list_every_violation() {
        let bad = LevySpec::TemperedStable { c_plus: -1.0, c_minus: 0.0, beta_plus: 0.0, beta_minus: 1.0, alpha: 1.2 };
        match LevyMeasure::new(bad) {
            Err(Error::Config(v)) => assert_eq!(v.len(), 4, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inverse_cdf_is_monotone_and_in_range() {
        let s = JumpSampler::new(&ts(), 1e-3).unwrap();
        for side in 0..2 {
            assert!(s.cdf[side].windows(2).all(|w| w[1] >= w[0]));
            assert_eq!(s.cdf[side][0], 0.0);
            assert!((s.cdf[side][CDF_KNOTS - 1] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn classify_branches() {
        assert_eq!(classify_small_deviation(false, f64::NAN, true, true, 1e-9).verdict, Verdict::Holds);
        assert_eq!(classify_small_deviation(true, 0.0, false, false, 1e-9).verdict, Verdict::Holds);
        assert_eq!(classify_small_deviation(true, 0.5, true, false, 1e-9).verdict, Verdict::Holds);
        assert_eq!(classify_small_deviation(true, 0.5, false, true, 1e-9).verdict, Verdict::Fails);
        assert_eq!(classify_small_deviation(true, -0.5, true, false, 1e-9).verdict, Verdict::Fails);
        assert_eq!(classify_small_deviation(true, -0.5, false, true, 1e-9).verdict, Verdict::Holds);
        let near = classify_small_deviation(true, 1e-12, false, false, 1e-9);
        assert_eq!(near.verdict, Verdict::Holds);
        assert!(near.explanation.contains("treated as 0"));
        assert_eq!(classify_small_deviation(true, f64::NAN, true, true, 1e-9).verdict, Verdict::Undetermined);
    }
}
