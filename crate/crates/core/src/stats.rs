//! Small statistics toolkit: running moments, Wilson intervals, two-sample
//! Kolmogorov–Smirnov, chi-squared goodness of fit and least squares.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Welford accumulator for mean and variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct Running {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Running {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate { mean: self.mean(), se: self.se(), n: self.n }
    }
}

impl FromIterator<f64> for Running {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut r = Running::default();
        for x in iter {
            r.push(x);
        }
        r
    }
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: u64,
}

impl Estimate {
    pub fn rel_se(&self) -> f64 {
        self.se / self.mean.abs()
    }
}

/// Binomial proportion with a 95% Wilson score interval.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct Proportion {
    pub hits: u64,
    pub trials: u64,
    pub p_hat: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn wilson(hits: u64, trials: u64) -> Proportion {
    let z = 1.959_963_984_540_054;
    if trials == 0 {
        return Proportion { hits, trials, p_hat: f64::NAN, lower: 0.0, upper: 1.0 };
    }
    let n = trials as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    Proportion {
        hits,
        trials,
        p_hat: p,
        lower: if hits == 0 { 0.0 } else { (centre - half).max(0.0) },
        upper: if hits == trials { 1.0 } else { (centre + half).min(1.0) },
    }
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=200 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-17 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value
/// (effective-size correction of Stephens).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let s = ne.sqrt();
    KsResult { statistic: d, p_value: kolmogorov_sf((s + 0.12 + 0.11 / s) * d) }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ChiSquaredResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson chi-squared test of observed counts against a Poisson law with
/// known mean. Bins with expected count below 5 are pooled.
pub fn poisson_goodness_of_fit(counts: &[u64], mean: f64) -> ChiSquaredResult {
    let total = counts.len() as f64;
    let max_k = counts.iter().copied().max().unwrap_or(0) as usize;
    let mut observed = vec![0u64; max_k + 1];
    for &c in counts {
        observed[c as usize] += 1;
    }
    // Poisson pmf by recursion in log space
    let mut expected = Vec::with_capacity(max_k + 1);
    let mut logp = -mean;
    for k in 0..=max_k {
        if k > 0 {
            logp += mean.ln() - (k as f64).ln();
        }
        expected.push(total * logp.exp());
    }
    // the last bin collects the upper tail
    let head: f64 = expected.iter().sum();
    if let Some(last) = expected.last_mut() {
        *last += total - head;
    }
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for k in 0..=max_k {
        o_acc += observed[k] as f64;
        e_acc += expected[k];
        if e_acc >= 5.0 {
            bins.push((o_acc, e_acc));
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    if e_acc > 0.0 || o_acc > 0.0 {
        match bins.last_mut() {
            Some(b) => {
                b.0 += o_acc;
                b.1 += e_acc;
            }
            None => bins.push((o_acc, e_acc)),
        }
    }
    let stat: f64 = bins.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dof = bins.len().saturating_sub(1).max(1);
    let p = 1.0 - ChiSquared::new(dof as f64).expect("dof > 0").cdf(stat);
    ChiSquaredResult { statistic: stat, dof, p_value: p }
}

/// Ordinary least squares `y ≈ intercept + slope·x`.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let slope_se = if x.len() > 2 { (rss / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    LinearFit { slope, intercept, slope_se }
}

/// Sample quantile with linear interpolation between order statistics.
/// `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_matches_two_pass() {
        let xs = [1.0, 2.0, 4.0, 7.0, 11.0];
        let r: Running = xs.iter().copied().collect();
        let m = xs.iter().sum::<f64>() / 5.0;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
        assert!((r.mean() - m).abs() < 1e-14);
        assert!((r.variance() - v).abs() < 1e-12);
    }

    #[test]
    fn wilson_known_value() {
        // 10 of 100: interval (0.0552, 0.1744)
        let p = wilson(10, 100);
        assert!((p.lower - 0.05523).abs() < 1e-4);
        assert!((p.upper - 0.17437).abs() < 1e-4);
        let z = wilson(0, 50);
        assert_eq!(z.lower, 0.0);
        assert!(z.upper > 0.0);
    }

    #[test]
    fn kolmogorov_reference_points() {
        // classic critical values: sf(1.3581) = 0.05, sf(1.6276) = 0.01
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_sf(1.6276) - 0.01).abs() < 1e-4);
    }

    #[test]
    fn ks_detects_shift_and_accepts_identity() {
        let a: Vec<f64> = (0..500).map(|i| (i as f64 + 0.5) / 500.0).collect();
        let b: Vec<f64> = (0..400).map(|i| (i as f64 + 0.25) / 400.0).collect();
        assert!(ks_two_sample(&a, &b).p_value > 0.5);
        let c: Vec<f64> = a.iter().map(|x| x + 0.2).collect();
        assert!(ks_two_sample(&a, &c).p_value < 1e-6);
    }

    #[test]
    fn linear_fit_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let f = linear_fit(&x, &y);
        assert!((f.slope - 2.0).abs() < 1e-14);
        assert!((f.intercept - 1.0).abs() < 1e-14);
    }

    #[test]
    fn quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.0), 1.0);
        assert_eq!(quantile_sorted(&s, 1.0), 4.0);
        assert!((quantile_sorted(&s, 0.5) - 2.5).abs() < 1e-15);
    }
}
