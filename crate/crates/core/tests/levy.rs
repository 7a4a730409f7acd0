use shelllab::levy::{JumpSampler, LevyMeasure, LevySpec, Verdict};
use shelllab::rng::{self, domain};
use shelllab::stats::{self, Running};
use shelllab::Error;

fn measure(spec: LevySpec) -> LevyMeasure {
    LevyMeasure::new(spec).unwrap()
}

fn specs() -> Vec<LevySpec> {
    vec![
        LevySpec::symmetric_tempered_stable(1.0, 1.0, 0.5),
        LevySpec::TemperedStable { c_plus: 0.7, c_minus: 1.3, beta_plus: 2.0, beta_minus: 0.8, alpha: 0.3 },
        LevySpec::symmetric_variance_gamma(1.0, 1.0),
        LevySpec::VarianceGamma { sigma: 0.8, theta: 0.3, vartheta: 0.5 },
    ]
}

#[test]
fn closed_form_moments() {
    let vg = measure(LevySpec::symmetric_variance_gamma(1.0, 1.0));
    assert!((vg.moment(2.0).unwrap() - 1.0).abs() < 1e-6);
    let ts = measure(LevySpec::symmetric_tempered_stable(1.0, 1.0, 0.0));
    assert!((ts.moment(1.0).unwrap() - 2.0).abs() < 2e-6);
    // Γ(2 − α)·2c/β^{2−α} for the second moment of a symmetric tempered stable law
    let ts = measure(LevySpec::symmetric_tempered_stable(1.0, 2.0, 0.5));
    let want = 2.0 * statrs::function::gamma::gamma(1.5) / 2f64.powf(1.5);
    assert!((ts.moment(2.0).unwrap() / want - 1.0).abs() < 1e-6);
    assert!(matches!(ts.moment(0.5), Err(Error::Domain(_))));
}

#[test]
fn moments_finite_and_tails_decrease() {
    for spec in specs() {
        let m = measure(spec);
        for q in [1.0, 2.0, 3.0, 4.0] {
            let v = m.moment(q).unwrap();
            assert!(v.is_finite() && v > 0.0, "{spec:?} q={q}");
        }
        for side in [1.0, -1.0] {
            let tail: Vec<f64> = [1e2, 1e3, 1e4].iter().map(|z| z * z * m.density(side * z).unwrap()).collect();
            assert!(tail[0] > tail[1] && tail[1] >= tail[2], "{spec:?}");
        }
    }
}

#[test]
fn log_density_ratio_matches_differences() {
    for spec in specs() {
        let m = measure(spec);
        for i in 1..=40 {
            for z in [i as f64 * 0.1, -(i as f64) * 0.1] {
                let h = 1e-5 * z.abs();
                let fd = (m.density(z + h).unwrap().ln() - m.density(z - h).unwrap().ln()) / (2.0 * h);
                let r = m.log_density_ratio(z).unwrap();
                assert!((fd - r).abs() <= 1e-6 * r.abs().max(1.0), "{spec:?} z={z}: {fd} vs {r}");
            }
        }
    }
    let sym = measure(LevySpec::symmetric_tempered_stable(1.0, 1.0, 0.5));
    assert_eq!(sym.log_density_ratio(0.7).unwrap(), -sym.log_density_ratio(-0.7).unwrap());
}

#[test]
fn compensator_identity_vanishes() {
    let grid = [0.5, 1.0, 2.0];
    for &p in &grid {
        let ts = measure(LevySpec::TemperedStable { c_plus: p, c_minus: 1.0, beta_plus: p, beta_minus: 1.5, alpha: 0.2 * p });
        let vg = measure(LevySpec::VarianceGamma { sigma: p, theta: 0.1 * p, vartheta: p });
        for m in [ts, vg] {
            let v = m.compensator_identity().unwrap();
            assert!(v.abs() <= 1e-8, "{:?}: {v}", m.spec());
        }
    }
}

#[test]
fn empty_horizon_gives_empty_path() {
    let s = JumpSampler::new(&measure(LevySpec::symmetric_variance_gamma(1.0, 1.0)), 1e-3).unwrap();
    let p = s.sample_path(0.0, 3, &mut rng::stream(0, domain::NOISE_CHECK, 0)).unwrap();
    assert_eq!(p.total_events(), 0);
    assert!(p.small_jump_drift.iter().all(|d| *d == 0.0));
}

#[test]
fn path_invariants() {
    let s = JumpSampler::new(&measure(specs()[1]), 1e-2).unwrap();
    for i in 0..200 {
        let p = s.sample_path(2.0, 4, &mut rng::stream(1, domain::NOISE_CHECK, i)).unwrap();
        for ev in &p.events {
            assert!(ev.windows(2).all(|w| w[0].time < w[1].time));
            assert!(ev.iter().all(|e| e.time > 0.0 && e.time <= 2.0 && e.size.abs() >= 1e-2));
        }
    }
}

#[test]
fn counts_are_poisson_and_sizes_match_quadrature() {
    for spec in [specs()[1], specs()[3]] {
        let delta = 1e-2;
        let s = JumpSampler::new(&measure(spec), delta).unwrap();
        let mean = s.rate();
        let m = s.measure();
        let mut counts = Vec::new();
        let (mut q1, mut q2) = (Running::default(), Running::default());
        for i in 0..10_000 {
            let p = s.sample_path(1.0, 1, &mut rng::stream(2, domain::NOISE_CHECK, i)).unwrap();
            counts.push(p.events[0].len() as u64);
            q1.push(p.events[0].iter().map(|e| e.size.abs()).sum());
            q2.push(p.events[0].iter().map(|e| e.size * e.size).sum());
        }
        let c: Running = counts.iter().map(|&c| c as f64).collect();
        assert!((c.mean() - mean).abs() <= 3.0 * c.se(), "{spec:?}: {} vs {mean}", c.mean());
        assert!(stats::poisson_goodness_of_fit(&counts, mean).p_value > 0.01);
        for (q, est) in [(1.0, q1), (2.0, q2)] {
            let want = m.moment_above(q, delta).unwrap();
            assert!((est.mean() - want).abs() <= 3.0 * est.se(), "{spec:?} q={q}: {} vs {want}", est.mean());
        }
    }
}

#[test]
fn symmetric_paths_have_zero_mean() {
    let s = JumpSampler::new(&measure(LevySpec::symmetric_tempered_stable(1.0, 1.0, 0.5)), 1e-3).unwrap();
    let r: Running = (0..10_000)
        .map(|i| s.sample_path(1.0, 1, &mut rng::stream(3, domain::NOISE_CHECK, i)).unwrap().events[0].iter().map(|e| e.size).sum::<f64>())
        .collect();
    assert!(r.mean().abs() <= 3.0 * r.se());
    assert_eq!(s.small_jump_drift(), 0.0);
}

#[test]
fn tiny_cutoff_is_a_resource_error() {
    let s = JumpSampler::new(&measure(LevySpec::symmetric_tempered_stable(1.0, 1.0, 0.9)), 1e-12).unwrap();
    match s.sample_path(1.0, 1, &mut rng::stream(0, 0, 0)) {
        Err(Error::Resource { suggested_delta, .. }) => {
            let ok = JumpSampler::new(s.measure(), suggested_delta * 1.01).unwrap();
            assert!(ok.rate() <= shelllab::levy::DEFAULT_EVENT_CAP);
        }
        other => panic!("expected a resource error, got {other:?}"),
    }
}

#[test]
fn small_deviation_verdicts() {
    for spec in [LevySpec::symmetric_tempered_stable(1.0, 1.0, 0.5), LevySpec::symmetric_variance_gamma(1.0, 1.0)] {
        let r = measure(spec).small_deviation_verdict();
        assert!(r.type_one);
        assert!(r.drift.abs() < 1e-9);
        assert_eq!(r.verdict, Verdict::Holds);
    }
    for spec in [
        LevySpec::TemperedStable { c_plus: 1.0, c_minus: 0.0, beta_plus: 1.0, beta_minus: 1.0, alpha: 0.5 },
        LevySpec::TemperedStable { c_plus: 0.0, c_minus: 1.0, beta_plus: 1.0, beta_minus: 1.0, alpha: 0.5 },
    ] {
        let r = measure(spec).small_deviation_verdict();
        assert!(r.type_one);
        assert!(r.drift != 0.0);
        assert_eq!(r.verdict, Verdict::Holds, "{}", r.explanation);
    }
}

#[test]
fn order_condition_exponents() {
    let grid: Vec<f64> = (0..=20).map(|i| 10f64.powf(-0.25 * i as f64)).collect();
    let ts = measure(LevySpec::symmetric_tempered_stable(1.0, 1.0, 0.5));
    let a = ts.order_condition_estimate(1.0, &grid).unwrap();
    let b = ts.order_condition_estimate(2.0, &grid).unwrap();
    assert!((a.alpha_hat - 0.5).abs() < 0.05, "{}", a.alpha_hat);
    assert!((a.alpha_hat - b.alpha_hat).abs() < 0.02);
    assert_eq!(a.status, Verdict::Holds);
    let vg = measure(LevySpec::symmetric_variance_gamma(1.0, 1.0));
    let v = vg.order_condition_estimate(1.0, &grid).unwrap();
    assert_eq!(v.status, Verdict::Undetermined);
    assert_eq!(v.alpha_hat, 0.0);
}

#[test]
fn sampled_sizes_lie_above_cutoff() {
    let s = JumpSampler::new(&measure(specs()[3]), 5e-3).unwrap();
    let mut rng = rng::stream(9, domain::NOISE_CHECK, 0);
    for _ in 0..10_000 {
        let z = s.sample_size(&mut rng);
        assert!(z.abs() >= 5e-3 * (1.0 - 1e-12) && z.is_finite());
    }
}
