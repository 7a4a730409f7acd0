//! Event-driven time stepping of the finite-shell jump SDE.
//!
//! The grid is the uniform grid `0, dt, 2dt, …, T` merged with every jump
//! time. Between grid points the deterministic part is advanced by one
//! step; jumps are added at their exact times afterwards, so left limits at
//! jump times are the pre-jump states of the step that lands there.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violations};
use crate::levy::{JumpPath, JumpSampler, MergedEvent};
use crate::shell::{self, ShellModel, ShellState};

/// States with `|u|` above this are declared blown up.
pub const BLOWUP_NORM: f64 = 1e12;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// `(I + h κA) u⁺ = u + h(−B(u) + drift)`.
    SemiImplicitEuler,
    /// `u⁺ = e^{−hκA} u + φ₁(hκA) h (−B(u) + drift)`; the linear part is exact.
    ExponentialEuler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdePathConfig {
    pub dt: f64,
    pub horizon: f64,
    pub delta_cut: f64,
    pub seed: u64,
    /// Truncation level `R`; `None` integrates the full equation.
    pub truncation: Option<f64>,
    pub scheme: Scheme,
}

impl Default for SdePathConfig {
    fn default() -> Self {
        SdePathConfig {
            dt: 1e-2,
            horizon: 1.0,
            delta_cut: 1e-3,
            seed: 0,
            truncation: None,
            scheme: Scheme::SemiImplicitEuler,
        }
    }
}

impl SdePathConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Violations::default();
        v.check(self.dt > 0.0 && self.dt.is_finite(), || format!("integrator.dt = {} must be > 0", self.dt));
        v.check(self.horizon > 0.0 && self.horizon.is_finite(), || format!("integrator.horizon = {} must be > 0", self.horizon));
        v.check(!(self.dt > self.horizon), || format!("integrator.dt = {} must not exceed horizon {}", self.dt, self.horizon));
        v.check(self.delta_cut > 0.0 && self.delta_cut <= 1.0, || format!("noise.delta_cut = {} must lie in (0, 1]", self.delta_cut));
        if let Some(r) = self.truncation {
            v.check(r > 0.0 && r.is_finite(), || format!("integrator.truncation = {r} must be > 0"));
        }
        v.0
    }

    pub fn validate(&self) -> Result<()> {
        Violations(self.violations()).into_result()
    }

    pub fn with_horizon(&self, horizon: f64) -> Self {
        SdePathConfig { horizon, ..self.clone() }
    }
}

/// Merged time grid of one jump path.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    pub times: Vec<f64>,
    /// Whether each grid point belongs to the uniform grid.
    pub fixed: Vec<bool>,
    pub events: Vec<MergedEvent>,
    /// `events[starts[i]..starts[i+1]]` happen at `times[i]`.
    starts: Vec<usize>,
}

impl TimeGrid {
    pub fn new(dt: f64, horizon: f64, path: &JumpPath) -> Self {
        let steps = ((horizon / dt) - 1e-9).ceil().max(1.0) as usize;
        let fixed_time = |m: usize| if m == steps { horizon } else { m as f64 * dt };
        let events = path.merged();
        let mut times = Vec::with_capacity(steps + 1 + events.len());
        let mut fixed = Vec::with_capacity(times.capacity());
        let mut starts = Vec::with_capacity(times.capacity() + 1);
        let (mut m, mut e) = (0usize, 0usize);
        while m <= steps || e < events.len() {
            let tf = if m <= steps { fixed_time(m) } else { f64::INFINITY };
            let te = if e < events.len() { events[e].time } else { f64::INFINITY };
            let t = tf.min(te);
            times.push(t);
            fixed.push(tf == t);
            if tf == t {
                m += 1;
            }
            starts.push(e);
            while e < events.len() && events[e].time == t {
                e += 1;
            }
        }
        starts.push(e);
        TimeGrid { times, fixed, events, starts }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn events_at(&self, i: usize) -> &[MergedEvent] {
        &self.events[self.starts[i]..self.starts[i + 1]]
    }
}

/// Grid of `path` over its own horizon.
pub fn grid_for(cfg: &SdePathConfig, path: &JumpPath) -> Result<TimeGrid> {
    if !(path.horizon > 0.0) {
        return Err(Error::Domain(format!("path horizon must be > 0, got {}", path.horizon)));
    }
    Ok(TimeGrid::new(cfg.dt.min(path.horizon), path.horizon, path))
}

/// Per-step linear factors: `u⁺ = decay·u + gain·(forcing)`.
pub(crate) fn step_factors(model: &ShellModel, scheme: Scheme, h: f64, decay: &mut [f64], gain: &mut [f64]) {
    let kappa = model.kappa();
    for ((d, g), l) in decay.iter_mut().zip(gain.iter_mut()).zip(model.eigenvalues()) {
        let rate = kappa * l;
        match scheme {
            Scheme::SemiImplicitEuler => {
                let inv = 1.0 / (1.0 + h * rate);
                *d = inv;
                *g = h * inv;
            }
            Scheme::ExponentialEuler => {
                let x = h * rate;
                *d = (-x).exp();
                *g = -(-x).exp_m1() / rate;
            }
        }
    }
}

/// Deterministic and jump updates for one model and scheme, with scratch
/// buffers so that stepping does not allocate.
#[derive(Debug, Clone)]
pub struct Stepper<'a> {
    model: &'a ShellModel,
    scheme: Scheme,
    radius: Option<f64>,
    /// `β_j (d_re, d_im)` per shell.
    drift: Vec<Complex64>,
    decay: Vec<f64>,
    gain: Vec<f64>,
    nonlin: Vec<Complex64>,
}

impl<'a> Stepper<'a> {
    pub fn new(model: &'a ShellModel, scheme: Scheme, radius: Option<f64>, small_jump_drift: &[f64]) -> Self {
        let n = model.n();
        let drift = (0..n)
            .map(|j| {
                let b = model.noise_scales()[j];
                let d = |m: usize| small_jump_drift.get(m).copied().unwrap_or(0.0);
                Complex64::new(b * d(2 * j), b * d(2 * j + 1))
            })
            .collect();
        Stepper { model, scheme, radius, drift, decay: vec![0.0; n], gain: vec![0.0; n], nonlin: vec![ZERO; n] }
    }

    pub fn model(&self) -> &ShellModel {
        self.model
    }

    /// Computes the linear factors for a step of length `h`.
    pub fn prepare(&mut self, h: f64) {
        step_factors(self.model, self.scheme, h, &mut self.decay, &mut self.gain);
    }

    /// Advances `u` over the step prepared last. The untruncated `B(u,u)` at
    /// the pre-step state stays available through [`Stepper::raw_nonlinearity`].
    pub fn advance(&mut self, u: &mut [Complex64]) {
        self.model.bilinear_into(u, u, &mut self.nonlin);
        let w = match self.radius {
            None => 1.0,
            Some(r) => shell::rho(shell::norm_sq(u) / r),
        };
        for j in 0..u.len() {
            u[j] = u[j] * self.decay[j] + (self.drift[j] - self.nonlin[j] * w) * self.gain[j];
        }
    }

    pub fn raw_nonlinearity(&self) -> &[Complex64] {
        &self.nonlin
    }

    /// Advances a tangent vector `w` at base point `u` (evaluated before the
    /// step). `buu` holds the untruncated `B(u,u)`.
    pub fn advance_tangent(&self, u: &[Complex64], buu: &[Complex64], w: &mut [Complex64], lin: &mut [Complex64], scratch: &mut [Complex64]) {
        self.model.linearized_into(self.radius, u, buu, w, lin, scratch);
        for j in 0..w.len() {
            w[j] = w[j] * self.decay[j] - lin[j] * self.gain[j];
        }
    }

    pub fn decay(&self) -> &[f64] {
        &self.decay
    }

    pub fn gain(&self) -> &[f64] {
        &self.gain
    }
}

/// Adds `β_k z` to real coordinate `k` for each event.
#[inline]
pub fn apply_jumps(model: &ShellModel, u: &mut [Complex64], events: &[MergedEvent]) {
    for e in events {
        let c = &mut u[e.component / 2];
        let inc = model.coord_noise_scale(e.component) * e.size;
        if e.component % 2 == 0 { c.re += inc } else { c.im += inc }
    }
}

#[inline]
fn check_finite(u: &[Complex64], t: f64) -> Result<()> {
    let nsq = shell::norm_sq(u);
    if !nsq.is_finite() || nsq > BLOWUP_NORM * BLOWUP_NORM {
        return Err(Error::BlowUp { time: t, norm: nsq.sqrt() });
    }
    Ok(())
}

/// One step of the (untruncated) Galerkin system followed by the jumps at
/// the end of the step.
pub fn step_galerkin(
    model: &ShellModel,
    cfg: &SdePathConfig,
    state: &ShellState,
    h: f64,
    small_jump_drift: &[f64],
    events: &[MergedEvent],
    t_end: f64,
) -> Result<ShellState> {
    step_with(model, cfg.scheme, None, state, h, small_jump_drift, events, t_end)
}

/// As [`step_galerkin`] with the nonlinearity truncated at `cfg.truncation`.
pub fn step_truncated(
    model: &ShellModel,
    cfg: &SdePathConfig,
    state: &ShellState,
    h: f64,
    small_jump_drift: &[f64],
    events: &[MergedEvent],
    t_end: f64,
) -> Result<ShellState> {
    let r = cfg
        .truncation
        .ok_or_else(|| Error::Config(vec!["step_truncated needs a truncation level".into()]))?;
    step_with(model, cfg.scheme, Some(r), state, h, small_jump_drift, events, t_end)
}

#[allow(clippy::too_many_arguments)]
fn step_with(
    model: &ShellModel,
    scheme: Scheme,
    radius: Option<f64>,
    state: &ShellState,
    h: f64,
    drift: &[f64],
    events: &[MergedEvent],
    t_end: f64,
) -> Result<ShellState> {
    if state.len() != model.n() {
        return Err(Error::Domain(format!("state has {} shells, model has {}", state.len(), model.n())));
    }
    let mut st = Stepper::new(model, scheme, radius, drift);
    let mut u = state.amps.clone();
    st.prepare(h);
    st.advance(&mut u);
    apply_jumps(model, &mut u, events);
    check_finite(&u, t_end)?;
    Ok(ShellState { amps: u })
}

/// View handed to trajectory observers after each grid point.
pub struct GridPoint<'g> {
    pub index: usize,
    pub time: f64,
    pub fixed: bool,
    pub events: &'g [MergedEvent],
}

/// Integrates from `xi` along `path`, calling `observe` at every grid point
/// (including `t = 0`) with the right-continuous state. Returns the final
/// state.
pub fn integrate<F>(model: &ShellModel, cfg: &SdePathConfig, xi: &ShellState, path: &JumpPath, mut observe: F) -> Result<ShellState>
where
    F: FnMut(&GridPoint, &[Complex64]),
{
    if xi.len() != model.n() {
        return Err(Error::Domain(format!("initial state has {} shells, model has {}", xi.len(), model.n())));
    }
    let grid = grid_for(cfg, path)?;
    integrate_on(model, cfg, xi, path, &grid, &mut observe)
}

pub(crate) fn integrate_on<F>(
    model: &ShellModel,
    cfg: &SdePathConfig,
    xi: &ShellState,
    path: &JumpPath,
    grid: &TimeGrid,
    observe: &mut F,
) -> Result<ShellState>
where
    F: FnMut(&GridPoint, &[Complex64]),
{
    let mut st = Stepper::new(model, cfg.scheme, cfg.truncation, &path.small_jump_drift);
    let mut u = xi.amps.clone();
    check_finite(&u, 0.0)?;
    observe(&GridPoint { index: 0, time: 0.0, fixed: true, events: &[] }, &u);
    for i in 1..grid.len() {
        let h = grid.times[i] - grid.times[i - 1];
        st.prepare(h);
        st.advance(&mut u);
        let ev = grid.events_at(i);
        apply_jumps(model, &mut u, ev);
        check_finite(&u, grid.times[i])?;
        observe(&GridPoint { index: i, time: grid.times[i], fixed: grid.fixed[i], events: ev }, &u);
    }
    Ok(ShellState { amps: u })
}

/// A stored path of the system.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<ShellState>,
    pub noise: JumpPath,
    pub convolution: Option<Vec<ShellState>>,
}

impl Trajectory {
    /// Index of the first grid point with `|u|² > R`, if any.
    pub fn first_exit(&self, radius: f64) -> Option<usize> {
        self.states.iter().position(|s| s.norm_sq() > radius)
    }
}

/// Samples the `2n` noise components over the configured horizon.
pub fn sample_noise<R: Rng + ?Sized>(model: &ShellModel, cfg: &SdePathConfig, sampler: &JumpSampler, rng: &mut R) -> Result<JumpPath> {
    sampler.sample_path(cfg.horizon, model.dim(), rng)
}

/// Integrates and stores every grid point.
pub fn simulate(model: &ShellModel, cfg: &SdePathConfig, xi: &ShellState, path: &JumpPath) -> Result<Trajectory> {
    cfg.validate()?;
    let mut times = Vec::new();
    let mut states = Vec::new();
    integrate(model, cfg, xi, path, |p, u| {
        times.push(p.time);
        states.push(ShellState { amps: u.to_vec() });
    })?;
    Ok(Trajectory { times, states, noise: path.clone(), convolution: None })
}

/// Stochastic convolution `𝔖` on the grid of `path`, by the exact
/// exponential recursion per component.
pub fn ou_convolution(model: &ShellModel, cfg: &SdePathConfig, path: &JumpPath) -> Result<(Vec<f64>, Vec<ShellState>)> {
    let grid = grid_for(cfg, path)?;
    let mut out = Vec::with_capacity(grid.len());
    ou_convolution_on(model, path, &grid, |_, s| out.push(ShellState { amps: s.to_vec() }));
    Ok((grid.times, out))
}

pub(crate) fn ou_convolution_on<F: FnMut(usize, &[Complex64])>(model: &ShellModel, path: &JumpPath, grid: &TimeGrid, mut observe: F) {
    let n = model.n();
    let mut st = Stepper::new(model, Scheme::ExponentialEuler, None, &path.small_jump_drift);
    let mut s = vec![ZERO; n];
    observe(0, &s);
    for i in 1..grid.len() {
        st.prepare(grid.times[i] - grid.times[i - 1]);
        let (decay, gain) = (st.decay(), st.gain());
        for j in 0..n {
            s[j] = s[j] * decay[j] + st.drift[j] * gain[j];
        }
        apply_jumps(model, &mut s, grid.events_at(i));
        observe(i, &s);
    }
}

/// `sup_t |𝔖(t)|²` over the grid of `path`, without storing the path.
pub fn convolution_sup_sq(model: &ShellModel, cfg: &SdePathConfig, path: &JumpPath) -> Result<f64> {
    let grid = grid_for(cfg, path)?;
    let mut best = 0.0f64;
    ou_convolution_on(model, path, &grid, |_, s| best = best.max(shell::norm_sq(s)));
    Ok(best)
}

/// Solves `v' + κAv + ρ(|v+𝔖|²/R) B(v+𝔖, v+𝔖) = 0` with frozen `𝔖` on the
/// given grid by semi-implicit Euler. `radius = None` drops the cutoff.
pub fn solve_v(
    model: &ShellModel,
    radius: Option<f64>,
    times: &[f64],
    convolution: &[ShellState],
    v0: &ShellState,
) -> Result<Vec<ShellState>> {
    if times.len() != convolution.len() {
        return Err(Error::Domain("convolution and grid lengths differ".into()));
    }
    let n = model.n();
    let mut decay = vec![0.0; n];
    let mut gain = vec![0.0; n];
    let mut v = v0.amps.clone();
    let mut w = vec![ZERO; n];
    let mut b = vec![ZERO; n];
    let mut out = Vec::with_capacity(times.len());
    out.push(v0.clone());
    for i in 1..times.len() {
        step_factors(model, Scheme::SemiImplicitEuler, times[i] - times[i - 1], &mut decay, &mut gain);
        for j in 0..n {
            w[j] = v[j] + convolution[i - 1].amps[j];
        }
        model.drift_nonlinearity_into(radius, &w, &mut b);
        for j in 0..n {
            v[j] = v[j] * decay[j] - b[j] * gain[j];
        }
        check_finite(&v, times[i])?;
        out.push(ShellState { amps: v.clone() });
    }
    Ok(out)
}

/// Distances between a coarse Galerkin run and a fine one on shared noise.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RefinementRow {
    pub n_coarse: usize,
    /// `∫₀ᵀ |u_coarse − Π_coarse u_fine|² dt`.
    pub projected: f64,
    /// `∫₀ᵀ |u_coarse − u_fine|² dt`, which adds the energy of the fine
    /// run's shells beyond `n_coarse`.
    pub full: f64,
}

/// Runs the fine model and each coarse prefix model on one shared jump path
/// (the coarse runs see the first `2 n_coarse` components) and integrates
/// the squared distances over the uniform grid by the trapezoid rule.
pub fn galerkin_refinement(
    fine: &ShellModel,
    cfg: &SdePathConfig,
    xi_fine: &ShellState,
    coarse_sizes: &[usize],
    path: &JumpPath,
) -> Result<Vec<RefinementRow>> {
    let record = |model: &ShellModel, xi: &ShellState, p: &JumpPath| -> Result<Vec<(f64, Vec<Complex64>)>> {
        let mut states = Vec::new();
        integrate(model, cfg, xi, p, |g, u| {
            if g.fixed {
                states.push((g.time, u.to_vec()));
            }
        })?;
        Ok(states)
    };
    let fine_states = record(fine, xi_fine, path)?;
    let mut rows = Vec::new();
    for &nc in coarse_sizes {
        if nc > fine.n() || nc < 3 {
            return Err(Error::Config(vec![format!("coarse size {nc} must lie in [3, {}]", fine.n())]));
        }
        let coarse = ShellModel::new(crate::shell::ModelParams { n: nc, ..fine.params().clone() })?;
        let cs = record(&coarse, &xi_fine.truncate(nc), &path.restrict(2 * nc))?;
        let (mut proj, mut full) = (0.0, 0.0);
        let dist = |a: &[Complex64], b: &[Complex64]| -> (f64, f64) {
            let p: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
            (p, p + shell::norm_sq(&b[a.len()..]))
        };
        for k in 1..cs.len() {
            let h = cs[k].0 - cs[k - 1].0;
            let (p0, f0) = dist(&cs[k - 1].1, &fine_states[k - 1].1);
            let (p1, f1) = dist(&cs[k].1, &fine_states[k].1);
            proj += 0.5 * h * (p0 + p1);
            full += 0.5 * h * (f0 + f1);
        }
        rows.push(RefinementRow { n_coarse: nc, projected: proj, full });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy::JumpEvent;
    use crate::shell::ModelParams;

    fn empty_path(dim: usize, horizon: f64) -> JumpPath {
        JumpPath { horizon, delta_cut: 1e-3, events: vec![Vec::new(); dim], small_jump_drift: vec![0.0; dim] }
    }

    #[test]
    fn grid_contains_each_jump_once() {
        let mut p = empty_path(4, 1.0);
        p.events[0] = vec![JumpEvent { time: 0.25, size: 1.0 }, JumpEvent { time: 0.333, size: -1.0 }];
        p.events[3] = vec![JumpEvent { time: 0.5, size: 2.0 }];
        let g = TimeGrid::new(0.25, 1.0, &p);
        assert_eq!(g.times, vec![0.0, 0.25, 0.333, 0.5, 0.75, 1.0]);
        assert_eq!(g.events_at(1).len(), 1);
        assert_eq!(g.events_at(2).len(), 1);
        assert_eq!(g.events_at(3)[0].component, 3);
        assert!(!g.fixed[2]);
    }

    #[test]
    fn single_jump_is_exact() {
        let m = ShellModel::new(ModelParams { n: 4, ..Default::default() }).unwrap();
        let cfg = SdePathConfig::default();
        let ev = [MergedEvent { time: 0.01, component: 3, size: 0.7 }];
        let out = step_galerkin(&m, &cfg, &ShellState::zeros(4), 0.01, &[0.0; 8], &ev, 0.01).unwrap();
        assert_eq!(out.coord(3), m.coord_noise_scale(3) * 0.7);
        assert_eq!(out.norm_sq(), (m.coord_noise_scale(3) * 0.7).powi(2));
    }
}
