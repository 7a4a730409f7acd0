//! Gradient of the Galerkin semigroup without differentiating the test
//! function: Jacobian flow, jump functionals and the Monte Carlo estimator.
//!
//! Perturbing each simulated jump `z` of real component `j` along
//! `ϱ(z) h`, with `ϱ` the jump [`perturbation_profile`] that vanishes at the
//! truncation level `δ`, moves the terminal state by `U(t) v` where `v = U(s)⁻¹ β_j e_j`. With the
//! Malliavin matrix `C = Σ ϱ v vᵀ` and `h = vᵀ C⁻¹ e_k` the perturbations add
//! up to `U(t) e_k`, and integrating by parts in every jump size gives
//!
//! `∇_{x_k} E[Φ(X_t)] = E[Φ(X_t) W_k]`,
//! `W = C⁻¹ (T(C⁻¹) − S)`
//!
//! where `S = Σ (ϱ' + ϱ g'/g(z)) v` and `T` collects the derivatives of
//! `C⁻¹` in the jump sizes. Those need `∂U(s)/∂z`, which is carried as a
//! second-order tangent along the path.
//!
//! The scalar functionals `𝒜 = Σ z²`, `K_k = 2 Σ z³ β_j⁻¹ U_kj(s−)` and
//! `J_k = Σ (z² g'/g(z) + 2z) β_j⁻¹ U_kj(s−)` are also accumulated. The
//! weight `K/𝒜² − J/𝒜` built from them is exact for a single real
//! component but biased once there are several, because every jump only
//! moves its own coordinate. It is kept for comparison and for the moments
//! `E[𝒜^{−2p}]` of the gradient bound.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{self, apply_jumps, grid_for, SdePathConfig, Stepper, Trajectory};
use crate::levy::{JumpPath, JumpSampler, LevyMeasure, MergedEvent};
use crate::rng::{self, domain};
use crate::shell::{self, ShellModel, ShellState};
use crate::stats::{Estimate, Running};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Smooth bounded test functions on the real coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunction {
    /// `exp(−|x − c|² / s²)`; a missing tail of `center` is zero.
    BumpOfNormSq { center: Vec<f64>, scale: f64 },
    /// `cos(ω x_k)`, `k` a 0-based real coordinate.
    CosineOfCoordinate { coord: usize, frequency: f64 },
    /// `1 / (1 + exp(−w·x))`; a missing tail of `weights` is zero.
    LogisticOfLinear { weights: Vec<f64> },
}

impl TestFunction {
    pub fn violations(&self, dim: usize) -> Vec<String> {
        let mut v = Vec::new();
        match self {
            TestFunction::BumpOfNormSq { center, scale } => {
                if center.len() > dim {
                    v.push(format!("bump center has {} entries, dimension is {dim}", center.len()));
                }
                if !(*scale > 0.0) {
                    v.push(format!("bump scale = {scale} must be > 0"));
                }
            }
            TestFunction::CosineOfCoordinate { coord, frequency } => {
                if *coord >= dim {
                    v.push(format!("cosine coordinate {coord} out of range 0..{dim}"));
                }
                if !frequency.is_finite() {
                    v.push("cosine frequency must be finite".into());
                }
            }
            TestFunction::LogisticOfLinear { weights } => {
                if weights.len() > dim {
                    v.push(format!("logistic weights have {} entries, dimension is {dim}", weights.len()));
                }
            }
        }
        v
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::BumpOfNormSq { center, scale } => {
                let d2: f64 = x.iter().enumerate().map(|(i, xi)| (xi - center.get(i).copied().unwrap_or(0.0)).powi(2)).sum();
                (-d2 / (scale * scale)).exp()
            }
            TestFunction::CosineOfCoordinate { coord, frequency } => (frequency * x[*coord]).cos(),
            TestFunction::LogisticOfLinear { weights } => {
                let s: f64 = weights.iter().zip(x).map(|(w, xi)| w * xi).sum();
                1.0 / (1.0 + (-s).exp())
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match self {
            TestFunction::BumpOfNormSq { center, scale } => {
                let f = self.value(x);
                x.iter()
                    .enumerate()
                    .map(|(i, xi)| -2.0 * (xi - center.get(i).copied().unwrap_or(0.0)) / (scale * scale) * f)
                    .collect()
            }
            TestFunction::CosineOfCoordinate { coord, frequency } => {
                let mut g = vec![0.0; x.len()];
                g[*coord] = -frequency * (frequency * x[*coord]).sin();
                g
            }
            TestFunction::LogisticOfLinear { weights } => {
                let f = self.value(x);
                (0..x.len()).map(|i| weights.get(i).copied().unwrap_or(0.0) * f * (1.0 - f)).collect()
            }
        }
    }

    /// `‖Φ‖_∞`.
    pub fn sup_norm(&self) -> f64 {
        1.0
    }
}

/// `U_kj = ∂X^{(j)}/∂x_k` at every grid point, stored as `u[k·d + j]`.
#[derive(Debug, Clone)]
pub struct JacobianFlow {
    pub dim: usize,
    pub times: Vec<f64>,
    pub matrices: Vec<Vec<f64>>,
}

impl JacobianFlow {
    /// `U_kj` at grid index `i`.
    pub fn entry(&self, i: usize, k: usize, j: usize) -> f64 {
        self.matrices[i][k * self.dim + j]
    }

    /// Applies `U(t_i)` to `x`: `(U x)_j = Σ_k U_kj x_k`.
    pub fn apply(&self, i: usize, x: &[f64]) -> Vec<f64> {
        (0..self.dim).map(|j| (0..self.dim).map(|k| self.entry(i, k, j) * x[k]).sum()).collect()
    }

    /// Smallest `C` with `|U(t)x|² ≤ |x|² (1 + C e^{4t/κ})` on the grid,
    /// tested on the coordinate directions.
    pub fn envelope_constant(&self, kappa: f64) -> f64 {
        let mut c = 0.0f64;
        for (i, t) in self.times.iter().enumerate() {
            for k in 0..self.dim {
                let col: f64 = (0..self.dim).map(|j| self.entry(i, k, j).powi(2)).sum();
                c = c.max((col - 1.0).max(0.0) * (-4.0 * t / kappa).exp());
            }
        }
        c
    }
}

/// Tangent vectors `U e_k` for `k = 0..d`, each stored as shell amplitudes.
struct Tangents {
    cols: Vec<Vec<Complex64>>,
    lin: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl Tangents {
    fn identity(n: usize) -> Self {
        let cols = (0..2 * n)
            .map(|k| {
                let mut c = vec![ZERO; n];
                if k % 2 == 0 { c[k / 2].re = 1.0 } else { c[k / 2].im = 1.0 }
                c
            })
            .collect();
        Tangents { cols, lin: vec![ZERO; n], scratch: vec![ZERO; n] }
    }

    fn advance(&mut self, st: &Stepper, u_prev: &[Complex64], buu: &[Complex64]) {
        for c in self.cols.iter_mut() {
            st.advance_tangent(u_prev, buu, c, &mut self.lin, &mut self.scratch);
        }
    }

    #[inline]
    fn entry(&self, k: usize, j: usize) -> f64 {
        shell::coord(&self.cols[k], j)
    }

    fn flatten(&self) -> Vec<f64> {
        let d = self.cols.len();
        let mut m = vec![0.0; d * d];
        for k in 0..d {
            for j in 0..d {
                m[k * d + j] = self.entry(k, j);
            }
        }
        m
    }
}

/// Integrates the linearised equation along a stored trajectory with the
/// trajectory's own scheme and grid.
pub fn jacobian_flow(model: &ShellModel, cfg: &SdePathConfig, traj: &Trajectory) -> Result<JacobianFlow> {
    let grid = grid_for(cfg, &traj.noise)?;
    if grid.times != traj.times {
        return Err(Error::Domain("trajectory grid does not match its jump path".into()));
    }
    let n = model.n();
    let mut st = Stepper::new(model, cfg.scheme, cfg.truncation, &traj.noise.small_jump_drift);
    let mut tan = Tangents::identity(n);
    let mut buu = vec![ZERO; n];
    let mut matrices = vec![tan.flatten()];
    for i in 1..grid.len() {
        st.prepare(grid.times[i] - grid.times[i - 1]);
        let u_prev = &traj.states[i - 1].amps;
        model.bilinear_into(u_prev, u_prev, &mut buu);
        tan.advance(&st, u_prev, &buu);
        matrices.push(tan.flatten());
    }
    Ok(JacobianFlow { dim: 2 * n, times: grid.times, matrices })
}

/// Jump functionals of one path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BelWeights {
    /// `𝒜 = Σ z²`.
    pub a: f64,
    pub k: Vec<f64>,
    pub j: Vec<f64>,
    /// Set when the path has no jumps, so `𝒜 = 0`.
    pub degenerate: bool,
}

impl BelWeights {
    fn zero(d: usize) -> Self {
        BelWeights { a: 0.0, k: vec![0.0; d], j: vec![0.0; d], degenerate: true }
    }

    #[inline]
    fn add_jump(&mut self, levy: &LevyMeasure, z: f64, inv_beta: f64, column: impl Fn(usize) -> f64) {
        self.a += z * z;
        self.degenerate = false;
        let wk = 2.0 * z * z * z * inv_beta;
        let wj = (z * z * levy.log_density_ratio_unchecked(z) + 2.0 * z) * inv_beta;
        for k in 0..self.k.len() {
            let u = column(k);
            self.k[k] += wk * u;
            self.j[k] += wj * u;
        }
    }

    /// The per-sample gradient weight `K/𝒜² − J/𝒜`.
    pub fn gradient_weight(&self) -> Vec<f64> {
        let a2 = self.a * self.a;
        self.k.iter().zip(&self.j).map(|(k, j)| k / a2 - j / self.a).collect()
    }
}

/// Evaluates the jump functionals of a stored trajectory.
pub fn bel_weights(model: &ShellModel, cfg: &SdePathConfig, traj: &Trajectory, flow: &JacobianFlow, levy: &LevyMeasure) -> Result<BelWeights> {
    let grid = grid_for(cfg, &traj.noise)?;
    let d = model.dim();
    let mut w = BelWeights::zero(d);
    for i in 1..grid.len() {
        for e in grid.events_at(i) {
            let inv_beta = 1.0 / model.coord_noise_scale(e.component);
            w.add_jump(levy, e.size, inv_beta, |k| flow.entry(i, k, e.component));
        }
    }
    Ok(w)
}

/// `(ϱ(z), ϱ'(z))` for a jump of size `z`, `|z| ≥ δ`: `ϱ = z²` for `|z| ≥ 2δ`,
/// ramping as `z² (z² − δ²) / 3δ²` below so that the integration by parts
/// in the jump size has no boundary term at `±δ`.
pub fn perturbation_profile(z: f64, delta_cut: f64) -> (f64, f64) {
    let d2 = delta_cut * delta_cut;
    if z.abs() >= 2.0 * delta_cut {
        (z * z, 2.0 * z)
    } else {
        let z2 = z * z;
        (z2 * (z2 - d2) / (3.0 * d2), (4.0 * z2 * z - 2.0 * z * d2) / (3.0 * d2))
    }
}

/// Smallest accepted Cholesky pivot of the unit-diagonal terminal-frame
/// Malliavin matrix.
const MIN_PIVOT: f64 = 1e-6;

/// Gradient weight of one path from the Malliavin matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixWeights {
    /// `W_k`, so that `∇_k E[Φ] = E[Φ W_k]`.
    pub weight: Vec<f64>,
    /// `C`, row-major.
    pub malliavin: Vec<f64>,
    /// Set when `C` is singular or too badly conditioned to invert.
    pub degenerate: bool,
}

/// Path functionals of the matrix weight, accumulated jump by jump.
struct MatrixAccumulator {
    d: usize,
    delta_cut: f64,
    c: DMatrix<f64>,
    /// Block `q` holds `G_p e_q = Σ ϱ v_p ∂U e_q/∂z` in column `p`.
    second: Vec<DMatrix<f64>>,
    s: Vec<f64>,
    /// `Σ ϱ'ϱ v_a v_b v_c`.
    cubic: Vec<f64>,
    /// `Σ ϱ E_mp v_a` at `(m·d + p)·d + a`, with `E = U⁻¹ [G_1 v … G_d v]`.
    mixed: Vec<f64>,
    any_jump: bool,
    /// `U` at the last grid point of the weight window.
    frame: DMatrix<f64>,
    // per-step work space
    jac: DMatrix<f64>,
    pairs: Vec<DMatrix<f64>>,
    along_u: DMatrix<f64>,
    along_y: DMatrix<f64>,
    gram: DMatrix<f64>,
    y_gram: DMatrix<f64>,
    at_u: DVector<f64>,
    y_at_u: DVector<f64>,
    buu: DMatrix<f64>,
    force: DMatrix<f64>,
    unit: Vec<Complex64>,
    lin: Vec<Complex64>,
    s1: Vec<Complex64>,
    s2: Vec<Complex64>,
}

/// `out = beta·out + alpha·a·b` for the small square matrices used here,
/// where blocked gemm costs more in packing than it saves.
fn small_gemm(out: &mut DMatrix<f64>, alpha: f64, a: &DMatrix<f64>, b: &DMatrix<f64>, beta: f64) {
    let (rows, inner, cols) = (a.nrows(), a.ncols(), b.ncols());
    let (a, b) = (a.as_slice(), b.as_slice());
    let o = out.as_mut_slice();
    for c in 0..cols {
        let oc = &mut o[c * rows..(c + 1) * rows];
        if beta == 0.0 {
            oc.fill(0.0);
        } else if beta != 1.0 {
            oc.iter_mut().for_each(|x| *x *= beta);
        }
        for k in 0..inner {
            let f = alpha * b[c * inner + k];
            if f != 0.0 {
                for (x, y) in oc.iter_mut().zip(&a[k * rows..(k + 1) * rows]) {
                    *x += f * y;
                }
            }
        }
    }
}

fn real_column(m: &mut DMatrix<f64>, col: usize, v: &[Complex64]) {
    for (j, z) in v.iter().enumerate() {
        m[(2 * j, col)] = z.re;
        m[(2 * j + 1, col)] = z.im;
    }
}

impl MatrixAccumulator {
    fn new(n: usize, delta_cut: f64) -> Self {
        let d = 2 * n;
        MatrixAccumulator {
            d,
            delta_cut,
            c: DMatrix::zeros(d, d),
            second: vec![DMatrix::zeros(d, d); d],
            s: vec![0.0; d],
            cubic: vec![0.0; d * d * d],
            mixed: vec![0.0; d * d * d],
            any_jump: false,
            frame: DMatrix::identity(d, d),
            jac: DMatrix::zeros(d, d),
            pairs: vec![DMatrix::zeros(d, d); d],
            along_u: DMatrix::zeros(d, d),
            along_y: DMatrix::zeros(d, d),
            gram: DMatrix::zeros(d, d),
            y_gram: DMatrix::zeros(d, d),
            at_u: DVector::zeros(d),
            y_at_u: DVector::zeros(d),
            buu: DMatrix::zeros(d, 1),
            force: DMatrix::zeros(d, d),
            unit: vec![ZERO; n],
            lin: vec![ZERO; n],
            s1: vec![ZERO; n],
            s2: vec![ZERO; n],
        }
    }

    /// Advances the second-order tangents over one step. Must run before the
    /// first-order tangents move, since both use the pre-step state.
    ///
    /// `G_p e_q` follows the linearised flow forced by `D²N(u)[Y_p, U e_q]`
    /// with `Y_p = U C e_p`, the summed response of the state.
    fn advance(&mut self, model: &ShellModel, radius: Option<f64>, st: &Stepper, u: &[Complex64], buu: &[Complex64], tan: &Tangents) {
        if !self.any_jump {
            return;
        }
        let d = self.d;
        // DN(u) as a real matrix
        for a in 0..d {
            self.unit.fill(ZERO);
            if a % 2 == 0 { self.unit[a / 2].re = 1.0 } else { self.unit[a / 2].im = 1.0 }
            model.linearized_into(radius, u, buu, &self.unit, &mut self.lin, &mut self.s1);
            real_column(&mut self.jac, a, &self.lin);
        }
        let (r0, r1, r2, level) = match radius {
            None => (1.0, 0.0, 0.0, 1.0),
            Some(r) => {
                let x = shell::norm_sq(u) / r;
                (shell::rho(x), shell::rho_prime(x), shell::rho_second(x), r)
            }
        };
        // pairs[q] column r: B(U e_r, U e_q) + B(U e_q, U e_r)
        for q in 0..d {
            for r in 0..=q {
                model.bilinear_into(&tan.cols[r], &tan.cols[q], &mut self.s1);
                model.bilinear_into(&tan.cols[q], &tan.cols[r], &mut self.s2);
                for (x, y) in self.s1.iter_mut().zip(&self.s2) {
                    *x += y;
                }
                real_column(&mut self.pairs[q], r, &self.s1);
                if r != q {
                    real_column(&mut self.pairs[r], q, &self.s1);
                }
            }
        }
        let curved = r1 != 0.0 || r2 != 0.0;
        if curved {
            for r in 0..d {
                model.bilinear_into(u, &tan.cols[r], &mut self.s1);
                model.bilinear_into(&tan.cols[r], u, &mut self.s2);
                for (x, y) in self.s1.iter_mut().zip(&self.s2) {
                    *x += y;
                }
                real_column(&mut self.along_u, r, &self.s1);
                self.at_u[r] = shell::inner(u, &tan.cols[r]);
                for q in 0..=r {
                    let g = shell::inner(&tan.cols[r], &tan.cols[q]);
                    self.gram[(r, q)] = g;
                    self.gram[(q, r)] = g;
                }
            }
            // ⟨u, Y_p⟩, ⟨Y_p, U e_q⟩ and S(u, Y_p)
            // C is symmetric
            for p in 0..d {
                self.y_at_u[p] = self.c.column(p).dot(&self.at_u);
            }
            small_gemm(&mut self.y_gram, 1.0, &self.c, &self.gram, 0.0);
            small_gemm(&mut self.along_y, 1.0, &self.along_u, &self.c, 0.0);
            real_column(&mut self.buu, 0, buu);
        }
        let decay = st.decay();
        let gain = st.gain();
        for q in 0..d {
            small_gemm(&mut self.force, 1.0, &self.jac, &self.second[q], 0.0);
            small_gemm(&mut self.force, r0, &self.pairs[q], &self.c, 1.0);
            if curved {
                let db = 2.0 * self.at_u[q] / level;
                for p in 0..d {
                    let da = 2.0 * self.y_at_u[p] / level;
                    let dab = 2.0 * self.y_gram[(p, q)] / level;
                    let cc = r2 * da * db + r1 * dab;
                    for j in 0..d {
                        self.force[(j, p)] += r1 * da * self.along_u[(j, q)] + r1 * db * self.along_y[(j, p)] + cc * self.buu[(j, 0)];
                    }
                }
            }
            let g = &mut self.second[q];
            for p in 0..d {
                for j in 0..d {
                    g[(j, p)] = g[(j, p)] * decay[j / 2] - self.force[(j, p)] * gain[j / 2];
                }
            }
        }
    }

    /// Records the jumps at one grid point; `tan` holds `U(s)`.
    fn add_jumps(&mut self, model: &ShellModel, levy: &LevyMeasure, tan: &Tangents, events: &[MergedEvent]) -> Result<()> {
        if events.is_empty() {
            return Ok(());
        }
        let d = self.d;
        let flow = DMatrix::from_fn(d, d, |j, k| tan.entry(k, j));
        let lu = flow.lu();
        let singular = || Error::Numerical("Jacobian flow became singular".into());
        for e in events {
            let z = e.size;
            let (weight, slope) = perturbation_profile(z, self.delta_cut);
            let mut rhs = DVector::zeros(d);
            rhs[e.component] = model.coord_noise_scale(e.component);
            let v = lu.solve(&rhs).ok_or_else(singular)?;
            // E = U⁻¹ [G_1 v … G_d v]
            let mut gv = DMatrix::zeros(d, d);
            for q in 0..d {
                for (x, y) in gv.as_mut_slice().iter_mut().zip(self.second[q].as_slice()) {
                    *x += v[q] * y;
                }
            }
            let ecols = lu.solve(&gv).ok_or_else(singular)?;
            let first = slope + weight * levy.log_density_ratio_unchecked(z);
            let c3 = slope * weight;
            for a in 0..d {
                self.s[a] += first * v[a];
                for b in 0..d {
                    self.c[(a, b)] += weight * v[a] * v[b];
                    let vab = c3 * v[a] * v[b];
                    let eab = weight * ecols[(a, b)];
                    for c in 0..d {
                        self.cubic[(a * d + b) * d + c] += vab * v[c];
                        self.mixed[(a * d + b) * d + c] += eab * v[c];
                    }
                }
            }
            self.any_jump = true;
        }
        Ok(())
    }

    fn close_window(&mut self, tan: &Tangents) {
        self.frame = DMatrix::from_fn(self.d, self.d, |j, k| tan.entry(k, j));
    }

    fn finish(&self) -> MatrixWeights {
        let d = self.d;
        let malliavin: Vec<f64> = self.c.transpose().iter().copied().collect();
        let degenerate = || MatrixWeights { weight: vec![0.0; d], malliavin: malliavin.clone(), degenerate: true };
        // conditioning is judged on Γ = U C Uᵀ, U taken at the window end,
        // scaled to unit diagonal
        let flow = &self.frame;
        let gamma = flow * &self.c * flow.transpose();
        let scale: Vec<f64> = (0..d).map(|a| gamma[(a, a)].sqrt()).collect();
        if scale.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
            return degenerate();
        }
        let unit = DMatrix::from_fn(d, d, |a, b| gamma[(a, b)] / (scale[a] * scale[b]));
        let Some(chol) = unit.cholesky() else {
            return degenerate();
        };
        let lo = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |l, x| l.min(*x));
        if !(lo > MIN_PIVOT) {
            return degenerate();
        }
        let mut gamma_inv = chol.inverse();
        for a in 0..d {
            for b in 0..d {
                gamma_inv[(a, b)] /= scale[a] * scale[b];
            }
        }
        let inv = flow.transpose() * gamma_inv * flow;
        let mut w = DVector::from_fn(d, |c, _| -self.s[c]);
        for c in 0..d {
            let mut acc = 0.0;
            for a in 0..d {
                for b in 0..d {
                    acc += self.cubic[(a * d + b) * d + c] * inv[(a, b)];
                    acc -= self.mixed[(a * d + b) * d + c] * inv[(a, b)];
                    acc -= self.mixed[(c * d + a) * d + b] * inv[(a, b)];
                }
            }
            w[c] += acc;
        }
        let weight = &inv * w;
        MatrixWeights { weight: weight.iter().copied().collect(), malliavin, degenerate: false }
    }
}

/// Everything one fused sample produces.
#[derive(Debug, Clone)]
pub struct BelSample {
    pub terminal: Vec<f64>,
    pub weights: BelWeights,
    pub matrix: MatrixWeights,
    /// `U_kj(t)` stored as `[k·d + j]`.
    pub terminal_flow: Vec<f64>,
    /// `∫₀ᵗ Σ_k U_kj(s)² ds` per coordinate `j` (trapezoid rule on the grid).
    pub flow_energy: Vec<f64>,
}

/// Largest growth `e^{κλ_n s}` of the pulled-back directions `U(s)⁻¹ e_j`
/// allowed inside the weight window.
pub const MAX_PULLBACK_GROWTH: f64 = 1e6;

/// Default window `[0, t₁]` whose jumps build the matrix weight:
/// `t₁ = min(t, ln(MAX_PULLBACK_GROWTH) / (κ λ_n))`.
///
/// By the Markov property `∇E[Φ(X_t)] = E[∇u(t₁, X_{t₁}) U(t₁)]` with
/// `u(t₁, ·) = E[Φ(X_{t−t₁})]`, so jumps up to any `t₁ ≤ t` suffice. Long
/// windows make `U(s)⁻¹` too ill-conditioned on the fast shells.
pub fn default_weight_window(model: &ShellModel, t: f64) -> f64 {
    let fastest = model.kappa() * model.eigenvalue(model.n());
    t.min(MAX_PULLBACK_GROWTH.ln() / fastest)
}

/// Integrates state, Jacobian, second-order tangents and weights along one
/// path in a single pass. The matrix weight uses the jumps in
/// `[0, window]`; the scalar functionals use every jump.
pub fn bel_sample(model: &ShellModel, cfg: &SdePathConfig, levy: &LevyMeasure, x: &ShellState, path: &JumpPath, window: f64) -> Result<BelSample> {
    fused_sample(model, cfg, levy, x, path, window).map(|(s, _)| s)
}

fn fused_sample(
    model: &ShellModel,
    cfg: &SdePathConfig,
    levy: &LevyMeasure,
    x: &ShellState,
    path: &JumpPath,
    window: f64,
) -> Result<(BelSample, MatrixAccumulator)> {
    let grid = grid_for(cfg, path)?;
    let n = model.n();
    let d = 2 * n;
    let mut st = Stepper::new(model, cfg.scheme, cfg.truncation, &path.small_jump_drift);
    let mut tan = Tangents::identity(n);
    let mut mat = MatrixAccumulator::new(n, path.delta_cut);
    let mut u = x.amps.clone();
    let mut u_prev = u.clone();
    let mut w = BelWeights::zero(d);
    let mut energy = vec![0.0; d];
    let col_sq = |tan: &Tangents, j: usize| -> f64 { (0..d).map(|k| tan.entry(k, j).powi(2)).sum() };
    let mut prev_sq: Vec<f64> = (0..d).map(|j| col_sq(&tan, j)).collect();
    for i in 1..grid.len() {
        let h = grid.times[i] - grid.times[i - 1];
        st.prepare(h);
        u_prev.copy_from_slice(&u);
        st.advance(&mut u);
        let in_window = grid.times[i] <= window;
        if in_window {
            mat.advance(model, cfg.truncation, &st, &u_prev, st.raw_nonlinearity(), &tan);
        }
        tan.advance(&st, &u_prev, st.raw_nonlinearity());
        for j in 0..d {
            let s = col_sq(&tan, j);
            energy[j] += 0.5 * h * (prev_sq[j] + s);
            prev_sq[j] = s;
        }
        let ev = grid.events_at(i);
        for e in ev {
            let inv_beta = 1.0 / model.coord_noise_scale(e.component);
            w.add_jump(levy, e.size, inv_beta, |k| tan.entry(k, e.component));
        }
        if in_window {
            mat.add_jumps(model, levy, &tan, ev)?;
            if i + 1 == grid.len() || grid.times[i + 1] > window {
                mat.close_window(&tan);
            }
        }
        apply_jumps(model, &mut u, ev);
        let nsq = shell::norm_sq(&u);
        if !nsq.is_finite() || nsq > integrator::BLOWUP_NORM * integrator::BLOWUP_NORM {
            return Err(Error::BlowUp { time: grid.times[i], norm: nsq.sqrt() });
        }
    }
    let sample = BelSample { terminal: ShellState { amps: u }.to_real(), weights: w, matrix: mat.finish(), terminal_flow: tan.flatten(), flow_energy: energy };
    Ok((sample, mat))
}

/// Terminal real coordinates of a plain run.
fn terminal(model: &ShellModel, cfg: &SdePathConfig, x: &ShellState, path: &JumpPath) -> Result<Vec<f64>> {
    Ok(integrator::integrate(model, cfg, x, path, |_, _| {})?.to_real())
}

/// Monte Carlo gradient estimate.
#[derive(Debug, Clone, Serialize)]
pub struct BelEstimate {
    pub gradient: Vec<Estimate>,
    pub accepted: u64,
    pub rejected: u64,
}

impl BelEstimate {
    pub fn rejected_fraction(&self) -> f64 {
        self.rejected as f64 / (self.accepted + self.rejected) as f64
    }

    pub fn norm(&self) -> f64 {
        self.gradient.iter().map(|e| e.mean * e.mean).sum::<f64>().sqrt()
    }
}

/// Settings shared by the estimators.
#[derive(Debug, Clone)]
pub struct BelRun<'a> {
    pub model: &'a ShellModel,
    pub cfg: &'a SdePathConfig,
    pub sampler: &'a JumpSampler,
    pub x: &'a ShellState,
    pub t: f64,
    pub samples: usize,
    pub seed: u64,
    /// Weight window; `None` uses [`default_weight_window`].
    pub window: Option<f64>,
}

impl BelRun<'_> {
    fn check(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.samples < 1000 {
            v.push(format!("sample count {} must be ≥ 1000", self.samples));
        }
        if !(self.t > 0.0) {
            v.push(format!("gradient time t = {} must be > 0", self.t));
        }
        if let Some(w) = self.window {
            if !(w > 0.0 && w <= self.t) {
                v.push(format!("weight window {w} must lie in (0, t = {}]", self.t));
            }
        }
        if self.x.len() != self.model.n() {
            v.push(format!("initial state has {} shells, model has {}", self.x.len(), self.model.n()));
        }
        if v.is_empty() { Ok(()) } else { Err(Error::Config(v)) }
    }

    fn path(&self, i: usize) -> Result<JumpPath> {
        let mut rng = rng::stream(self.seed, domain::BEL, i as u64);
        self.sampler.sample_path(self.t, self.model.dim(), &mut rng)
    }

    pub fn window(&self) -> f64 {
        self.window.unwrap_or_else(|| default_weight_window(self.model, self.t))
    }

    fn cfg_t(&self) -> SdePathConfig {
        self.cfg.with_horizon(self.t)
    }

    fn reject_check(&self, rejected: u64, total: u64) -> Result<()> {
        if rejected * 2 > total {
            return Err(Error::Inconclusive(format!(
                "{rejected} of {total} samples had a singular Malliavin matrix; lower delta_cut (currently {})",
                self.sampler.delta_cut()
            )));
        }
        Ok(())
    }
}

/// `E[Φ(X_t) W]` per coordinate, rejecting samples whose Malliavin matrix
/// cannot be inverted.
pub fn bel_gradient(run: &BelRun, phi: &TestFunction) -> Result<BelEstimate> {
    run.check()?;
    let d = run.model.dim();
    let v = phi.violations(d);
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let cfg = run.cfg_t();
    let levy = run.sampler.measure();
    let samples: Vec<Result<Option<Vec<f64>>>> = (0..run.samples)
        .into_par_iter()
        .map(|i| {
            let s = bel_sample(run.model, &cfg, levy, run.x, &run.path(i)?, run.window())?;
            if s.matrix.degenerate {
                return Ok(None);
            }
            let f = phi.value(&s.terminal);
            Ok(Some(s.matrix.weight.iter().map(|w| f * w).collect()))
        })
        .collect();
    let mut acc = vec![Running::default(); d];
    let mut rejected = 0u64;
    for s in samples {
        match s? {
            None => rejected += 1,
            Some(g) => acc.iter_mut().zip(g).for_each(|(a, x)| a.push(x)),
        }
    }
    run.reject_check(rejected, run.samples as u64)?;
    Ok(BelEstimate { gradient: acc.iter().map(Running::estimate).collect(), accepted: run.samples as u64 - rejected, rejected })
}

/// BEL and central finite-difference gradients on shared paths.
#[derive(Debug, Clone, Serialize)]
pub struct GradientComparison {
    pub bel: Vec<Estimate>,
    pub fd: Vec<Estimate>,
    /// Per-sample difference `bel − fd`, whose standard error accounts for
    /// the correlation induced by the shared paths.
    pub difference: Vec<Estimate>,
    /// The scalar-normalised weight `K/𝒜² − J/𝒜` on the same samples.
    pub scalar: Vec<Estimate>,
    /// `E[∇Φ(X_t) U(t)]`, the pathwise derivative on the same samples.
    pub pathwise: Vec<Estimate>,
    pub accepted: u64,
    pub rejected: u64,
}

impl GradientComparison {
    /// Whether coordinate `k` agrees within `z` standard errors of the paired difference.
    pub fn agrees(&self, k: usize, z: f64) -> bool {
        self.difference[k].mean.abs() <= z * self.difference[k].se
    }
}

/// Evaluates several test functions against BEL and finite differences with
/// step `h` (common random numbers), all on the same paths.
pub fn compare_with_finite_differences(run: &BelRun, phis: &[TestFunction], h: f64) -> Result<Vec<GradientComparison>> {
    run.check()?;
    let d = run.model.dim();
    for phi in phis {
        let v = phi.violations(d);
        if !v.is_empty() {
            return Err(Error::Config(v));
        }
    }
    let cfg = run.cfg_t();
    let levy = run.sampler.measure();
    // per sample and function: (bel, fd, scalar, pathwise) per coordinate
    type Rec = Vec<[Vec<f64>; 4]>;
    let recs: Vec<Result<Option<Rec>>> = (0..run.samples)
        .into_par_iter()
        .map(|i| {
            let path = run.path(i)?;
            let s = bel_sample(run.model, &cfg, levy, run.x, &path, run.window())?;
            if s.matrix.degenerate {
                return Ok(None);
            }
            let scalar_w = s.weights.gradient_weight();
            let flow = &s.terminal_flow;
            let mut plus = Vec::with_capacity(d);
            let mut minus = Vec::with_capacity(d);
            for k in 0..d {
                let mut xp = run.x.clone();
                xp.set_coord(k, run.x.coord(k) + h);
                let mut xm = run.x.clone();
                xm.set_coord(k, run.x.coord(k) - h);
                plus.push(terminal(run.model, &cfg, &xp, &path)?);
                minus.push(terminal(run.model, &cfg, &xm, &path)?);
            }
            Ok(Some(
                phis.iter()
                    .map(|phi| {
                        let f = phi.value(&s.terminal);
                        let bel: Vec<f64> = s.matrix.weight.iter().map(|w| f * w).collect();
                        let fd: Vec<f64> = (0..d).map(|k| (phi.value(&plus[k]) - phi.value(&minus[k])) / (2.0 * h)).collect();
                        let scalar: Vec<f64> = scalar_w.iter().map(|w| f * w).collect();
                        let g = phi.gradient(&s.terminal);
                        let pathwise: Vec<f64> = (0..d).map(|k| (0..d).map(|j| flow[k * d + j] * g[j]).sum()).collect();
                        [bel, fd, scalar, pathwise]
                    })
                    .collect(),
            ))
        })
        .collect();
    let mut acc: Vec<[Vec<Running>; 5]> = phis.iter().map(|_| std::array::from_fn(|_| vec![Running::default(); d])).collect();
    let mut rejected = 0u64;
    for r in recs {
        match r? {
            None => rejected += 1,
            Some(per_phi) => {
                for (a, [bel, fd, scalar, pathwise]) in acc.iter_mut().zip(per_phi) {
                    for k in 0..d {
                        a[0][k].push(bel[k]);
                        a[1][k].push(fd[k]);
                        a[2][k].push(bel[k] - fd[k]);
                        a[3][k].push(scalar[k]);
                        a[4][k].push(pathwise[k]);
                    }
                }
            }
        }
    }
    run.reject_check(rejected, run.samples as u64)?;
    let est = |v: &Vec<Running>| v.iter().map(Running::estimate).collect::<Vec<_>>();
    Ok(acc
        .iter()
        .map(|a| GradientComparison {
            bel: est(&a[0]),
            fd: est(&a[1]),
            difference: est(&a[2]),
            scalar: est(&a[3]),
            pathwise: est(&a[4]),
            accepted: run.samples as u64 - rejected,
            rejected,
        })
        .collect())
}

/// Right-hand side of the gradient bound
/// `|∇EΦ| ≤ C(t) (Σ_j β_j⁻² λ_j^{−2δ})^{1/2} ‖Φ‖_∞ (E∫₀ᵗ|A^δ U|² ds)^{1/2}`
/// with `C(t) = C₂^{1/2}(1+t)^{1/2} + C₁^{1/2}`, `C_p = E[𝒜^{−2p}]`.
#[derive(Debug, Clone, Serialize)]
pub struct GradientBoundReport {
    pub delta: f64,
    /// Norm of the matrix-weight gradient estimate.
    pub estimate_norm: f64,
    pub c1: Estimate,
    pub c2: Estimate,
    /// `(Σ_j β_j⁻² λ_j^{−2δ})^{1/2}` over real coordinates.
    pub prefactor: f64,
    /// `E∫₀ᵗ |A^δ U|² ds`.
    pub flow_energy: f64,
    pub sup_norm: f64,
    pub rhs: f64,
    /// `rhs / estimate_norm`.
    pub slack: f64,
    /// `‖Φ‖_∞ (C₂^{1/2} (Σ_k E K_k²)^{1/2} + C₁^{1/2} (Σ_k E J_k²)^{1/2})`,
    /// the Cauchy–Schwarz bound on the scalar-weight estimator.
    pub cauchy_schwarz: f64,
    pub holds: bool,
    /// Set when either `C_p` has relative standard error above 50%.
    pub inconclusive: bool,
}

/// Evaluates the gradient bound for each `δ` in `deltas` on one ensemble.
pub fn gradient_bound_check(run: &BelRun, phi: &TestFunction, scale: f64, deltas: &[f64]) -> Result<Vec<GradientBoundReport>> {
    run.check()?;
    if let Some(dl) = deltas.iter().find(|d| !(0.0..=0.5).contains(*d)) {
        return Err(Error::Config(vec![format!("bound exponent δ = {dl} must lie in [0, 1/2]")]));
    }
    let d = run.model.dim();
    let cfg = run.cfg_t();
    let levy = run.sampler.measure();
    let samples: Vec<Result<BelSample>> = (0..run.samples).into_par_iter().map(|i| bel_sample(run.model, &cfg, levy, run.x, &run.path(i)?, run.window())).collect();
    let mut grad = vec![Running::default(); d];
    let (mut c1, mut c2, mut ksq, mut jsq) = (Running::default(), Running::default(), Running::default(), Running::default());
    let mut energy = vec![Running::default(); d];
    let mut rejected = 0u64;
    for s in samples {
        let s = s?;
        if s.weights.degenerate || s.matrix.degenerate {
            rejected += 1;
            continue;
        }
        let f = scale * phi.value(&s.terminal);
        for (g, w) in grad.iter_mut().zip(&s.matrix.weight) {
            g.push(f * w);
        }
        c1.push(s.weights.a.powi(-2));
        c2.push(s.weights.a.powi(-4));
        ksq.push(s.weights.k.iter().map(|x| x * x).sum());
        jsq.push(s.weights.j.iter().map(|x| x * x).sum());
        for (e, v) in energy.iter_mut().zip(&s.flow_energy) {
            e.push(*v);
        }
    }
    run.reject_check(rejected, run.samples as u64)?;
    let est_norm = grad.iter().map(|g| g.mean().powi(2)).sum::<f64>().sqrt();
    let sup = scale.abs() * phi.sup_norm();
    let (c1e, c2e) = (c1.estimate(), c2.estimate());
    let inconclusive = c1e.rel_se() > 0.5 || c2e.rel_se() > 0.5;
    let ct = c2e.mean.sqrt() * (1.0 + run.t).sqrt() + c1e.mean.sqrt();
    let cs = sup * (c2e.mean.sqrt() * ksq.mean().sqrt() + c1e.mean.sqrt() * jsq.mean().sqrt());
    Ok(deltas
        .iter()
        .map(|&delta| {
            let pre: f64 = (0..d)
                .map(|j| run.model.coord_noise_scale(j).powi(-2) * run.model.coord_eigenvalue(j).powf(-2.0 * delta))
                .sum::<f64>()
                .sqrt();
            let flow: f64 = (0..d).map(|j| run.model.coord_eigenvalue(j).powf(2.0 * delta) * energy[j].mean()).sum();
            let rhs = ct * pre * sup * flow.sqrt();
            GradientBoundReport {
                delta,
                estimate_norm: est_norm,
                c1: c1e,
                c2: c2e,
                prefactor: pre,
                flow_energy: flow,
                sup_norm: sup,
                rhs,
                slack: rhs / est_norm,
                cauchy_schwarz: cs,
                holds: est_norm <= rhs,
                inconclusive,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy::LevySpec;
    use crate::shell::ModelParams;

    #[test]
    fn second_order_tangents_match_differences() {
        // the second start crosses the cutoff shell |u|² ∈ (R, 2R)
        for x in [ShellState::from_real(&[0.3, -0.2, 0.2, 0.1, -0.1, 0.2]), ShellState::from_real(&[1.0, -0.6, 0.5, 0.4, -0.3, 0.2])] {
            second_order_case(&x);
        }
    }

    fn second_order_case(x: &ShellState) {
        let n = 3;
        let d = 6;
        let model = ShellModel::new(ModelParams { n, lambda: 1.3, ..Default::default() }).unwrap();
        let levy = LevyMeasure::new(LevySpec::symmetric_variance_gamma(1.0, 1.0)).unwrap();
        let sampler = JumpSampler::new(&levy, 1e-3).unwrap();
        let cfg = SdePathConfig { dt: 0.01, horizon: 0.2, truncation: Some(1.0), scheme: integrator::Scheme::ExponentialEuler, ..Default::default() };
        let mut rng = rng::stream(0, domain::BEL, 1);
        let mut path = sampler.sample_path(0.2, d, &mut rng).unwrap();
        for c in 0..d {
            path.events[c].truncate(2);
        }
        let (_, mat) = fused_sample(&model, &cfg, &levy, x, &path, 0.2).unwrap();
        let flow_of = |p: &JumpPath| fused_sample(&model, &cfg, &levy, x, p, 0.2).unwrap().0.terminal_flow;
        // Σ_i ϱ_i v_i ⊗ ∂U(t)/∂z_i by differences, v_i = U(s_i)⁻¹ β e_j
        let mut expect = vec![0.0; d * d * d]; // [p][q][j] = (G_p e_q)_j
        for c in 0..d {
            for e in 0..path.events[c].len() {
                let z = path.events[c][e].size;
                let (rho, _) = perturbation_profile(z, 1e-3);
                // v_i from the flow at s_i: rerun to s_i
                let si = path.events[c][e].time;
                let cfg_s = cfg.with_horizon(si);
                let mut ps = path.clone();
                for cc in 0..d {
                    ps.events[cc].retain(|ev| ev.time <= si);
                }
                ps.horizon = si;
                let us = fused_sample(&model, &cfg_s, &levy, x, &ps, si).unwrap().0.terminal_flow;
                let um = DMatrix::from_fn(d, d, |j, k| us[k * d + j]);
                let mut rhs = DVector::zeros(d);
                rhs[c] = model.coord_noise_scale(c);
                let v = um.lu().solve(&rhs).unwrap();
                let h = 1e-6;
                let mut pp = path.clone();
                pp.events[c][e].size += h;
                let mut pm = path.clone();
                pm.events[c][e].size -= h;
                let (fp, fm) = (flow_of(&pp), flow_of(&pm));
                for p in 0..d {
                    for q in 0..d {
                        for j in 0..d {
                            expect[(p * d + q) * d + j] += rho * v[p] * (fp[q * d + j] - fm[q * d + j]) / (2.0 * h);
                        }
                    }
                }
            }
        }
        let mut worst = 0.0f64;
        let scale = expect.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        for p in 0..d {
            for q in 0..d {
                for j in 0..d {
                    let got = mat.second[q][(j, p)];
                    worst = worst.max((got - expect[(p * d + q) * d + j]).abs());
                }
            }
        }
        assert!(worst < 1e-6 * scale, "worst {worst} scale {scale}");
    }

    #[test]
    fn mixed_tensor_matches_differences() {
        let n = 3;
        let d = 6;
        let model = ShellModel::new(ModelParams { n, lambda: 1.3, ..Default::default() }).unwrap();
        let levy = LevyMeasure::new(LevySpec::symmetric_variance_gamma(1.0, 1.0)).unwrap();
        let sampler = JumpSampler::new(&levy, 1e-3).unwrap();
        let cfg = SdePathConfig { dt: 0.01, horizon: 0.2, truncation: Some(1.0), scheme: integrator::Scheme::ExponentialEuler, ..Default::default() };
        let x = ShellState::from_real(&[0.3, -0.2, 0.2, 0.1, -0.1, 0.2]);
        let mut rng = rng::stream(0, domain::BEL, 1);
        let mut path = sampler.sample_path(0.2, d, &mut rng).unwrap();
        for c in 0..d {
            path.events[c].truncate(2);
        }
        let (_, mat) = fused_sample(&model, &cfg, &levy, &x, &path, 0.2).unwrap();
        let c_of = |p: &JumpPath| fused_sample(&model, &cfg, &levy, &x, p, 0.2).unwrap().0.matrix.malliavin;
        // Σ_i ϱ_i v_i ⊗ (∂C/∂z_i − ϱ'_i v_i v_iᵀ)
        let mut expect = vec![0.0; d * d * d]; // [a][p][b]
        for c in 0..d {
            for e in 0..path.events[c].len() {
                let z = path.events[c][e].size;
                let (rho, slope) = perturbation_profile(z, 1e-3);
                let si = path.events[c][e].time;
                let cfg_s = cfg.with_horizon(si);
                let mut ps = path.clone();
                for cc in 0..d {
                    ps.events[cc].retain(|ev| ev.time <= si);
                }
                ps.horizon = si;
                let us = fused_sample(&model, &cfg_s, &levy, &x, &ps, si).unwrap().0.terminal_flow;
                let um = DMatrix::from_fn(d, d, |j, k| us[k * d + j]);
                let mut rhs = DVector::zeros(d);
                rhs[c] = model.coord_noise_scale(c);
                let v = um.lu().solve(&rhs).unwrap();
                let h = 1e-6;
                let mut pp = path.clone();
                pp.events[c][e].size += h;
                let mut pm = path.clone();
                pm.events[c][e].size -= h;
                let (cp, cm) = (c_of(&pp), c_of(&pm));
                for a in 0..d {
                    for b in 0..d {
                        let dc = (cp[a * d + b] - cm[a * d + b]) / (2.0 * h) - slope * v[a] * v[b];
                        for p in 0..d {
                            expect[(a * d + p) * d + b] += rho * v[p] * dc;
                        }
                    }
                }
            }
        }
        let mut worst = 0.0f64;
        let scale = expect.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        for a in 0..d {
            for p in 0..d {
                for b in 0..d {
                    let got = -mat.mixed[(a * d + p) * d + b] - mat.mixed[(b * d + p) * d + a];
                    let err = (got - expect[(a * d + p) * d + b]).abs();
                    worst = worst.max(err);
                }
            }
        }
        assert!(worst < 1e-5 * scale);
    }

    #[test]
    fn matrix_weight_matches_divergence() {
        let n = 3;
        let d = 6;
        let model = ShellModel::new(ModelParams { n, lambda: 1.3, ..Default::default() }).unwrap();
        let levy = LevyMeasure::new(LevySpec::symmetric_variance_gamma(1.0, 1.0)).unwrap();
        let sampler = JumpSampler::new(&levy, 1e-3).unwrap();
        let cfg = SdePathConfig { dt: 0.01, horizon: 0.2, truncation: Some(1.0), scheme: integrator::Scheme::ExponentialEuler, ..Default::default() };
        let x = ShellState::from_real(&[0.3, -0.2, 0.2, 0.1, -0.1, 0.2]);
        let mut rng = rng::stream(0, domain::BEL, 1);
        let mut path = sampler.sample_path(0.2, d, &mut rng).unwrap();
        for c in 0..d {
            path.events[c].truncate(2);
        }
        let (s0, _) = fused_sample(&model, &cfg, &levy, &x, &path, 0.2).unwrap();
        let jumps: Vec<(usize, usize)> = (0..d).flat_map(|c| (0..path.events[c].len()).map(move |e| (c, e))).collect();
        let v_of = |p: &JumpPath, c: usize, e: usize| -> DVector<f64> {
            let si = p.events[c][e].time;
            let mut ps = p.clone();
            for cc in 0..d {
                ps.events[cc].retain(|ev| ev.time <= si);
            }
            ps.horizon = si;
            let us = fused_sample(&model, &cfg.with_horizon(si), &levy, &x, &ps, si).unwrap().0.terminal_flow;
            let um = DMatrix::from_fn(d, d, |j, k| us[k * d + j]);
            let mut rhs = DVector::zeros(d);
            rhs[c] = model.coord_noise_scale(c);
            um.lu().solve(&rhs).unwrap()
        };
        let h_of = |p: &JumpPath, c: usize, e: usize| -> DVector<f64> {
            let cm = DMatrix::from_row_slice(d, d, &fused_sample(&model, &cfg, &levy, &x, p, 0.2).unwrap().0.matrix.malliavin);
            cm.try_inverse().unwrap() * v_of(p, c, e)
        };
        let mut want = DVector::zeros(d);
        for &(c, e) in &jumps {
            let z = path.events[c][e].size;
            let (rho, slope) = perturbation_profile(z, 1e-3);
            let first = slope + rho * levy.log_density_ratio(z).unwrap();
            let eps = 1e-6;
            let mut pp = path.clone();
            pp.events[c][e].size += eps;
            let mut pm = path.clone();
            pm.events[c][e].size -= eps;
            let dh = (h_of(&pp, c, e) - h_of(&pm, c, e)) / (2.0 * eps);
            want -= first * h_of(&path, c, e) + rho * dh;
        }
        let got = DVector::from_vec(s0.matrix.weight.clone());
        assert!(!s0.matrix.degenerate);
        assert!((&got - &want).amax() < 1e-4 * want.amax(), "{} vs {}", got.transpose(), want.transpose());
    }

    #[test]
    fn test_function_gradients_match_differences() {
        let x = [0.3, -0.2, 0.5, 0.1];
        let fs = [
            TestFunction::BumpOfNormSq { center: vec![0.1, 0.0], scale: 0.7 },
            TestFunction::CosineOfCoordinate { coord: 2, frequency: 1.3 },
            TestFunction::LogisticOfLinear { weights: vec![1.0, -2.0, 0.5, 0.3] },
        ];
        for f in &fs {
            let g = f.gradient(&x);
            for k in 0..4 {
                let h = 1e-6;
                let mut xp = x;
                xp[k] += h;
                let mut xm = x;
                xm[k] -= h;
                let fd = (f.value(&xp) - f.value(&xm)) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-8, "{f:?} coord {k}");
            }
            assert!(f.value(&x).abs() <= f.sup_norm());
        }
    }
}
