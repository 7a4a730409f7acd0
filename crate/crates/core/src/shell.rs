//! Finite-shell GOY and SABRA models: the viscous operator, the bilinear
//! nonlinearity and its smooth truncation.
//!
//! Shells are numbered from 1 in the formulas and stored from 0. Terms that
//! would need a shell below 1 or above `n` are dropped, which is the Galerkin
//! projection onto the first `n` shells.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violations};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ShellKind {
    Goy,
    Sabra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub model: ShellKind,
    /// Viscosity.
    pub kappa: f64,
    pub a: f64,
    pub b: f64,
    pub k0: f64,
    /// Shell spacing ratio.
    pub lambda: f64,
    /// Noise roughness exponent.
    pub theta: f64,
    pub n: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams { model: ShellKind::Sabra, kappa: 1.0, a: 1.0, b: -0.5, k0: 1.0, lambda: 2.0, theta: 0.3, n: 32 }
    }
}

impl ModelParams {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Violations::default();
        v.check(self.kappa > 0.0 && self.kappa.is_finite(), || format!("model.kappa = {} must be > 0", self.kappa));
        v.check(self.a.is_finite(), || format!("model.a = {} must be finite", self.a));
        v.check(self.b.is_finite(), || format!("model.b = {} must be finite", self.b));
        v.check(self.k0 > 0.0 && self.k0.is_finite(), || format!("model.k0 = {} must be > 0", self.k0));
        v.check(self.lambda > 1.0 && self.lambda.is_finite(), || format!("model.lambda = {} must be > 1", self.lambda));
        v.check(self.theta > 0.25 && self.theta < 0.5, || format!("model.theta = {} violates θ ∈ (1/4,1/2)", self.theta));
        v.check(self.n >= 2, || format!("model.n = {} must be ≥ 2", self.n));
        v.0
    }
}

/// Shell amplitudes `u_1, …, u_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShellState {
    pub amps: Vec<Complex64>,
}

impl ShellState {
    pub fn zeros(n: usize) -> Self {
        ShellState { amps: vec![ZERO; n] }
    }

    /// Unit vector in real coordinate `m` (`2(j−1)` is `Re u_j`, `2(j−1)+1` is `Im u_j`).
    pub fn unit(n: usize, m: usize) -> Self {
        let mut s = Self::zeros(n);
        s.set_coord(m, 1.0);
        s
    }

    pub fn from_real(x: &[f64]) -> Self {
        ShellState { amps: x.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect() }
    }

    pub fn to_real(&self) -> Vec<f64> {
        self.amps.iter().flat_map(|c| [c.re, c.im]).collect()
    }

    pub fn len(&self) -> usize {
        self.amps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amps.is_empty()
    }

    #[inline]
    pub fn coord(&self, m: usize) -> f64 {
        coord(&self.amps, m)
    }

    #[inline]
    pub fn set_coord(&mut self, m: usize, x: f64) {
        let c = &mut self.amps[m / 2];
        if m % 2 == 0 { c.re = x } else { c.im = x }
    }

    pub fn norm_sq(&self) -> f64 {
        norm_sq(&self.amps)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Real inner product `Σ Re(u_j conj(v_j))`.
    pub fn inner(&self, other: &ShellState) -> f64 {
        inner(&self.amps, &other.amps)
    }

    pub fn is_finite(&self) -> bool {
        self.amps.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn axpy(&mut self, alpha: f64, x: &ShellState) {
        for (u, v) in self.amps.iter_mut().zip(&x.amps) {
            *u += v * alpha;
        }
    }

    pub fn sub(&self, other: &ShellState) -> ShellState {
        ShellState { amps: self.amps.iter().zip(&other.amps).map(|(a, b)| a - b).collect() }
    }

    /// Keeps the first `m` shells.
    pub fn truncate(&self, m: usize) -> ShellState {
        ShellState { amps: self.amps[..m].to_vec() }
    }
}

#[inline]
pub(crate) fn coord(u: &[Complex64], m: usize) -> f64 {
    let c = u[m / 2];
    if m % 2 == 0 { c.re } else { c.im }
}

#[inline]
pub(crate) fn norm_sq(u: &[Complex64]) -> f64 {
    u.iter().map(|c| c.norm_sqr()).sum()
}

#[inline]
pub(crate) fn inner(u: &[Complex64], v: &[Complex64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a.re * b.re + a.im * b.im).sum()
}

/// `ψ(t) = e^{-1/t}` for `t > 0`, else 0.
fn psi(t: f64) -> f64 {
    if t > 0.0 { (-1.0 / t).exp() } else { 0.0 }
}

fn psi_prime(t: f64) -> f64 {
    if t > 0.0 { (-1.0 / t).exp() / (t * t) } else { 0.0 }
}

fn psi_second(t: f64) -> f64 {
    if t > 0.0 { (-1.0 / t).exp() * (1.0 - 2.0 * t) / t.powi(4) } else { 0.0 }
}

/// Smooth cutoff: 1 on `[0,1]`, 0 on `[2,∞)`, monotone in between.
/// Callers must pass `x ≥ 0`; see [`cutoff_rho`] for the checked version.
#[inline]
pub fn rho(x: f64) -> f64 {
    if x <= 1.0 {
        1.0
    } else if x >= 2.0 {
        0.0
    } else {
        let p = psi(2.0 - x);
        p / (p + psi(x - 1.0))
    }
}

/// Derivative of [`rho`].
#[inline]
pub fn rho_prime(x: f64) -> f64 {
    if x <= 1.0 || x >= 2.0 {
        return 0.0;
    }
    let (p, q) = (psi(2.0 - x), psi(x - 1.0));
    let (dp, dq) = (-psi_prime(2.0 - x), psi_prime(x - 1.0));
    (dp * q - p * dq) / ((p + q) * (p + q))
}

/// Second derivative of [`rho`].
#[inline]
pub fn rho_second(x: f64) -> f64 {
    if x <= 1.0 || x >= 2.0 {
        return 0.0;
    }
    let (p, q) = (psi(2.0 - x), psi(x - 1.0));
    let (dp, dq) = (-psi_prime(2.0 - x), psi_prime(x - 1.0));
    let (ddp, ddq) = (psi_second(2.0 - x), psi_second(x - 1.0));
    let s = p + q;
    let num = dp * q - p * dq;
    (ddp * q - p * ddq) / (s * s) - 2.0 * num * (dp + dq) / (s * s * s)
}

pub fn cutoff_rho(x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("cutoff argument must be ≥ 0, got {x}")));
    }
    Ok(rho(x))
}

/// Empirical constants of the bilinear bounds
/// `‖B(u,v)‖_{V*} ≤ C₀|u||v|` and `|B(u,v)| ≤ C₁ min(‖u‖|v|, |u|‖v‖)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BilinearConstants {
    pub c0: f64,
    pub c1: f64,
}

/// A validated model with its precomputed spectrum.
#[derive(Debug, Clone)]
pub struct ShellModel {
    params: ModelParams,
    /// `k_m = k0 λ^m` for `m = 0..=n+2`.
    wave: Vec<f64>,
    /// `λ_j` for shells `1..=n`.
    eigen: Vec<f64>,
    /// `β_j = λ_j^{-θ}`.
    noise_scale: Vec<f64>,
}

impl ShellModel {
    pub fn new(params: ModelParams) -> Result<Self> {
        let v = params.violations();
        if !v.is_empty() {
            return Err(Error::Config(v));
        }
        let n = params.n;
        let wave = (0..=n + 2).map(|m| params.k0 * params.lambda.powi(m as i32)).collect();
        let eigen: Vec<f64> = (1..=n).map(|j| params.k0 * params.lambda.powi(2 * j as i32)).collect();
        let noise_scale = eigen.iter().map(|l| l.powf(-params.theta)).collect();
        Ok(ShellModel { params, wave, eigen, noise_scale })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn n(&self) -> usize {
        self.params.n
    }

    /// Number of real coordinates (and noise components), `2n`.
    pub fn dim(&self) -> usize {
        2 * self.params.n
    }

    pub fn kappa(&self) -> f64 {
        self.params.kappa
    }

    /// `k_m` for `m = 0..=n+2`.
    pub fn wave_number(&self, m: usize) -> f64 {
        self.wave[m]
    }

    /// `λ_j` for shell `j` (1-based).
    pub fn eigenvalue(&self, j: usize) -> f64 {
        self.eigen[j - 1]
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigen
    }

    /// `β_j` for each shell (0-based storage).
    pub fn noise_scales(&self) -> &[f64] {
        &self.noise_scale
    }

    /// `β` of real coordinate `m`.
    #[inline]
    pub fn coord_noise_scale(&self, m: usize) -> f64 {
        self.noise_scale[m / 2]
    }

    /// `λ` of real coordinate `m`.
    #[inline]
    pub fn coord_eigenvalue(&self, m: usize) -> f64 {
        self.eigen[m / 2]
    }

    /// `C_β = Σ_{j≥1} λ_j^{-θα}`, summed in closed form over all shells.
    pub fn beta_tail_constant(&self, alpha: f64) -> f64 {
        let p = &self.params;
        let q = p.lambda.powf(-2.0 * p.theta * alpha);
        p.k0.powf(-p.theta * alpha) * q / (1.0 - q)
    }

    fn check_len(&self, u: &ShellState) -> Result<()> {
        if u.len() != self.n() {
            return Err(Error::Domain(format!("state has {} shells, model has {}", u.len(), self.n())));
        }
        Ok(())
    }

    pub fn apply_a(&self, u: &ShellState, power: f64) -> Result<ShellState> {
        self.check_len(u)?;
        Ok(ShellState { amps: u.amps.iter().zip(&self.eigen).map(|(c, l)| c * l.powf(power)).collect() })
    }

    /// `|A^{1/2} u|²`.
    pub fn v_norm_sq(&self, u: &[Complex64]) -> f64 {
        u.iter().zip(&self.eigen).map(|(c, l)| l * c.norm_sqr()).sum()
    }

    /// `|A^{-1/2} u|²`.
    pub fn vstar_norm_sq(&self, u: &[Complex64]) -> f64 {
        u.iter().zip(&self.eigen).map(|(c, l)| c.norm_sqr() / l).sum()
    }

    pub fn nonlinearity(&self, u: &ShellState, v: &ShellState) -> Result<ShellState> {
        self.check_len(u)?;
        self.check_len(v)?;
        let mut out = ShellState::zeros(self.n());
        self.bilinear_into(&u.amps, &v.amps, &mut out.amps);
        Ok(out)
    }

    /// Writes `B(u, v)` into `out`.
    pub fn bilinear_into(&self, u: &[Complex64], v: &[Complex64], out: &mut [Complex64]) {
        let n = self.n() as isize;
        let at = |s: &[Complex64], m: isize| if m >= 1 && m <= n { s[(m - 1) as usize] } else { ZERO };
        let (a, b) = (self.params.a, self.params.b);
        let k = &self.wave;
        for j in 1..=n {
            let ju = j as usize;
            let (kp, kj, km) = (k[ju + 1], k[ju], k[ju - 1]);
            let val = match self.params.model {
                ShellKind::Sabra => {
                    let s = a * kp * at(u, j + 1).conj() * at(v, j + 2)
                        + b * kj * at(u, j - 1).conj() * at(v, j + 1)
                        + a * km * at(u, j - 1) * at(v, j - 2)
                        + b * km * at(u, j - 2) * at(v, j - 1);
                    -I * s
                }
                ShellKind::Goy => {
                    let s = a * kp * at(u, j + 1).conj() * at(v, j + 2).conj()
                        + b * kj * at(u, j - 1).conj() * at(v, j + 1).conj()
                        - a * km * at(u, j - 1).conj() * at(v, j - 2).conj()
                        - b * km * at(u, j - 2).conj() * at(v, j - 1).conj();
                    I * s
                }
            };
            out[ju - 1] = val;
        }
    }

    /// `ρ(|u|²/R) B(u,u)`.
    pub fn truncated_nonlinearity(&self, radius: f64, u: &ShellState) -> Result<ShellState> {
        self.check_len(u)?;
        if !(radius > 0.0) {
            return Err(Error::Domain(format!("truncation level must be > 0, got {radius}")));
        }
        let mut out = ShellState::zeros(self.n());
        self.drift_nonlinearity_into(Some(radius), &u.amps, &mut out.amps);
        Ok(out)
    }

    /// `B(u,u)` or its truncation, the nonlinear drift used by the steppers.
    #[inline]
    pub fn drift_nonlinearity_into(&self, radius: Option<f64>, u: &[Complex64], out: &mut [Complex64]) {
        match radius {
            None => self.bilinear_into(u, u, out),
            Some(r) => {
                let w = rho(norm_sq(u) / r);
                if w == 0.0 {
                    out.fill(ZERO);
                } else {
                    self.bilinear_into(u, u, out);
                    if w != 1.0 {
                        for c in out.iter_mut() {
                            *c *= w;
                        }
                    }
                }
            }
        }
    }

    /// Directional derivative of `u ↦ B^R(u,u)` in direction `w`.
    pub fn linearized_nonlinearity(&self, radius: f64, u: &ShellState, w: &ShellState) -> Result<ShellState> {
        self.check_len(u)?;
        self.check_len(w)?;
        if !(radius > 0.0) {
            return Err(Error::Domain(format!("truncation level must be > 0, got {radius}")));
        }
        let mut buu = vec![ZERO; self.n()];
        self.bilinear_into(&u.amps, &u.amps, &mut buu);
        let mut out = ShellState::zeros(self.n());
        let mut scratch = vec![ZERO; self.n()];
        self.linearized_into(Some(radius), &u.amps, &buu, &w.amps, &mut out.amps, &mut scratch);
        Ok(out)
    }

    /// Directional derivative of the drift nonlinearity at `u` along `w`.
    /// `buu` must hold the untruncated `B(u,u)`.
    pub fn linearized_into(
        &self,
        radius: Option<f64>,
        u: &[Complex64],
        buu: &[Complex64],
        w: &[Complex64],
        out: &mut [Complex64],
        scratch: &mut [Complex64],
    ) {
        let (weight, slope) = match radius {
            None => (1.0, 0.0),
            Some(r) => {
                let x = norm_sq(u) / r;
                (rho(x), rho_prime(x) * 2.0 * inner(u, w) / r)
            }
        };
        if weight == 0.0 && slope == 0.0 {
            out.fill(ZERO);
            return;
        }
        self.bilinear_into(u, w, out);
        self.bilinear_into(w, u, scratch);
        for ((o, s), b) in out.iter_mut().zip(scratch.iter()).zip(buu) {
            *o = (*o + s) * weight + b * slope;
        }
    }

    /// Second derivative of the drift nonlinearity at `u` along `(a, b)`.
    /// `buu` must hold the untruncated `B(u,u)`; `s1`, `s2` are scratch.
    #[allow(clippy::too_many_arguments)]
    pub fn second_variation_into(
        &self,
        radius: Option<f64>,
        u: &[Complex64],
        buu: &[Complex64],
        a: &[Complex64],
        b: &[Complex64],
        out: &mut [Complex64],
        s1: &mut [Complex64],
        s2: &mut [Complex64],
    ) {
        let (r0, r1, r2, level) = match radius {
            None => (1.0, 0.0, 0.0, 1.0),
            Some(r) => {
                let x = norm_sq(u) / r;
                (rho(x), rho_prime(x), rho_second(x), r)
            }
        };
        if r0 == 0.0 && r1 == 0.0 {
            out.fill(ZERO);
            return;
        }
        self.bilinear_into(a, b, out);
        self.bilinear_into(b, a, s1);
        for (o, s) in out.iter_mut().zip(s1.iter()) {
            *o = (*o + s) * r0;
        }
        if r1 == 0.0 && r2 == 0.0 {
            return;
        }
        let da = 2.0 * inner(u, a) / level;
        let db = 2.0 * inner(u, b) / level;
        let dab = 2.0 * inner(a, b) / level;
        self.bilinear_into(u, b, s1);
        self.bilinear_into(b, u, s2);
        for ((o, p), q) in out.iter_mut().zip(s1.iter()).zip(s2.iter()) {
            *o += (p + q) * (r1 * da);
        }
        self.bilinear_into(u, a, s1);
        self.bilinear_into(a, u, s2);
        for ((o, p), q) in out.iter_mut().zip(s1.iter()).zip(s2.iter()) {
            *o += (p + q) * (r1 * db);
        }
        let c = r2 * da * db + r1 * dab;
        for (o, q) in out.iter_mut().zip(buu) {
            *o += q * c;
        }
    }

    fn random_state<R: Rng + ?Sized>(&self, rng: &mut R, window: Option<(usize, usize)>) -> Vec<Complex64> {
        let n = self.n();
        let (lo, hi) = window.unwrap_or((0, n));
        (0..n)
            .map(|i| {
                if i >= lo && i < hi {
                    Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
                } else {
                    ZERO
                }
            })
            .collect()
    }

    /// Random states for constant estimation: half spread over all shells,
    /// half concentrated on a window of four neighbouring shells where the
    /// local interactions saturate the bounds.
    fn random_pair<R: Rng + ?Sized>(&self, rng: &mut R, i: usize) -> (Vec<Complex64>, Vec<Complex64>) {
        let n = self.n();
        if i % 2 == 0 {
            (self.random_state(rng, None), self.random_state(rng, None))
        } else {
            let width = 4.min(n);
            let start = rng.random_range(0..=n - width);
            let w = Some((start, start + width));
            (self.random_state(rng, w), self.random_state(rng, w))
        }
    }

    /// Monte Carlo lower estimates of the bilinear-bound constants.
    pub fn estimate_bilinear_constants<R: Rng + ?Sized>(&self, samples: usize, rng: &mut R) -> BilinearConstants {
        let mut out = vec![ZERO; self.n()];
        let (mut c0, mut c1) = (0.0f64, 0.0f64);
        for i in 0..samples {
            let (u, v) = self.random_pair(rng, i);
            self.bilinear_into(&u, &v, &mut out);
            let (hu, hv) = (norm_sq(&u).sqrt(), norm_sq(&v).sqrt());
            let (vu, vv) = (self.v_norm_sq(&u).sqrt(), self.v_norm_sq(&v).sqrt());
            c0 = c0.max(self.vstar_norm_sq(&out).sqrt() / (hu * hv));
            let bh = norm_sq(&out).sqrt();
            c1 = c1.max(bh / (vu * hv).min(hu * vv));
        }
        BilinearConstants { c0, c1 }
    }

    /// Monte Carlo lower estimate of the Lipschitz constant of
    /// `u ↦ B^R(u,u)` from `H` into `V*`.
    pub fn estimate_truncation_lipschitz<R: Rng + ?Sized>(&self, radius: f64, samples: usize, rng: &mut R) -> f64 {
        let n = self.n();
        let (mut bu, mut bw) = (vec![ZERO; n], vec![ZERO; n]);
        let mut best = 0.0f64;
        for i in 0..samples {
            let (mut u, d) = self.random_pair(rng, i);
            // place u inside the transition band and perturb it slightly
            let target = radius * rng.random_range(0.0..2.5);
            let s = (target / norm_sq(&u)).sqrt();
            u.iter_mut().for_each(|c| *c *= s);
            let eps = 1e-3 * radius.sqrt() / norm_sq(&d).sqrt();
            let w: Vec<Complex64> = u.iter().zip(&d).map(|(a, b)| a + b * eps).collect();
            self.drift_nonlinearity_into(Some(radius), &u, &mut bu);
            self.drift_nonlinearity_into(Some(radius), &w, &mut bw);
            let diff: Vec<Complex64> = bu.iter().zip(&bw).map(|(a, b)| a - b).collect();
            let du: f64 = u.iter().zip(&w).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
            best = best.max(self.vstar_norm_sq(&diff).sqrt() / du);
        }
        best
    }
}
