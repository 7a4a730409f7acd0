//! Adaptive Gauss–Kronrod quadrature (7-point Gauss embedded in 15-point Kronrod).
//!
//! Global subdivision: the panel with the largest error estimate is bisected
//! until the summed error meets the tolerance or the panel budget runs out.

use std::collections::BinaryHeap;
use std::cmp::Ordering;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    pub abs_error: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_panels: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions {
            abs_tol: 1e-300,
            rel_tol: 1e-11,
            max_panels: 4000,
        }
    }
}

struct Panel {
    lo: f64,
    hi: f64,
    value: f64,
    err: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.err.total_cmp(&other.err)
    }
}

/// One G7K15 panel: returns (Kronrod value, |Kronrod − Gauss|).
pub fn gk15<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64) -> (f64, f64) {
    let c = 0.5 * (lo + hi);
    let h = 0.5 * (hi - lo);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for i in 0..7 {
        let dx = h * XGK[i];
        let s = f(c - dx) + f(c + dx);
        kron += WGK[i] * s;
        if i % 2 == 1 {
            gauss += WG[i / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Integrates `f` over `[lo, hi]` adaptively.
pub fn integrate<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, opts: QuadOptions) -> QuadResult {
    if lo == hi {
        return QuadResult { value: 0.0, abs_error: 0.0, converged: true };
    }
    let (v, e) = gk15(&f, lo, hi);
    let mut heap = BinaryHeap::new();
    heap.push(Panel { lo, hi, value: v, err: e });
    let mut total = v;
    let mut total_err = e;
    let mut panels = 1;
    loop {
        let tol = opts.abs_tol.max(opts.rel_tol * total.abs());
        if total_err <= tol {
            return QuadResult { value: total, abs_error: total_err, converged: true };
        }
        if panels >= opts.max_panels {
            return QuadResult { value: total, abs_error: total_err, converged: false };
        }
        let worst = heap.pop().expect("heap never empty");
        let mid = 0.5 * (worst.lo + worst.hi);
        if mid <= worst.lo || mid >= worst.hi {
            // panel cannot be split further in floating point
            heap.push(Panel { err: 0.0, ..worst });
            total_err = heap.iter().map(|p| p.err).sum();
            if heap.iter().all(|p| p.err == 0.0) {
                return QuadResult { value: total, abs_error: total_err, converged: false };
            }
            continue;
        }
        let (v1, e1) = gk15(&f, worst.lo, mid);
        let (v2, e2) = gk15(&f, mid, worst.hi);
        total += v1 + v2 - worst.value;
        heap.push(Panel { lo: worst.lo, hi: mid, value: v1, err: e1 });
        heap.push(Panel { lo: mid, hi: worst.hi, value: v2, err: e2 });
        panels += 1;
        // resum to avoid drift from repeated subtraction
        total_err = heap.iter().map(|p| p.err).sum();
        if panels % 64 == 0 {
            total = heap.iter().map(|p| p.value).sum();
        }
    }
}

/// Integrates over `[lo, hi]` with `0 < lo`, after the substitution `z = e^s`,
/// which flattens power-law integrands spanning many decades.
pub fn integrate_log<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, opts: QuadOptions) -> QuadResult {
    debug_assert!(lo > 0.0 && hi >= lo);
    integrate(|s: f64| {
        let z = s.exp();
        f(z) * z
    }, lo.ln(), hi.ln(), opts)
}

/// Integrates over `[0, hi]` an integrand behaving like `z^{-power}` near zero
/// (`power < 1`), via `z = u^{1/(1-power)}` which removes the singularity.
pub fn integrate_singular_origin<F: Fn(f64) -> f64>(
    f: F,
    hi: f64,
    power: f64,
    opts: QuadOptions,
) -> QuadResult {
    debug_assert!(power < 1.0);
    let e = 1.0 / (1.0 - power);
    let uh = hi.powf(1.0 - power);
    integrate(|u: f64| {
        if u <= 0.0 {
            return 0.0;
        }
        let z = u.powf(e);
        // dz/du = e u^{e-1}
        f(z) * e * z / u
    }, 0.0, uh, opts)
}
