use std::fmt::Write as _;

use serde::Serialize;
use shelllab::bel::{self, BelRun};
use shelllab::ergolab::{self, Observable};
use shelllab::integrator;
use shelllab::levy::Verdict;
use shelllab::rng::{self, domain};

use crate::config::{state_from_prefix, BelCheckParams, ErgodicityParams, Experiment, NoiseCheckParams, RefineParams, RunConfig, SimulateParams};
use crate::output::{jsonl, num, write_text, Csv};
use crate::CliError;

pub fn dispatch(cfg: &RunConfig) -> Result<String, CliError> {
    match &cfg.experiment {
        Experiment::Simulate(p) => simulate(cfg, p),
        Experiment::BelCheck(p) => bel_check(cfg, p),
        Experiment::Ergodicity(p) => ergodicity(cfg, p),
        Experiment::NoiseCheck(p) => noise_check(cfg, p),
        Experiment::Refine(p) => refine(cfg, p),
    }
}

/// `trajectory.csv` holds every grid point after `t = 0`: the uniform
/// points and one point per jump time, each with one row per shell.
fn simulate(cfg: &RunConfig, p: &SimulateParams) -> Result<String, CliError> {
    let model = cfg.build_model()?;
    let sampler = cfg.build_sampler()?;
    let path_cfg = cfg.path_config();
    let path = integrator::sample_noise(&model, &path_cfg, &sampler, &mut rng::stream(cfg.seed, domain::TRAJECTORY, p.path_index))?;
    let xi = state_from_prefix(&p.initial_state, model.n());
    let traj = integrator::simulate(&model, &path_cfg, &xi, &path)?;
    let mut csv = Csv::new(&["t", "shell", "u_re", "u_im"]);
    for (t, state) in traj.times.iter().zip(&traj.states).skip(1) {
        for (j, u) in state.amps.iter().enumerate() {
            csv.row(&[num(*t), (j + 1).to_string(), num(u.re), num(u.im)]);
        }
    }
    csv.save(&cfg.output_dir.join("trajectory.csv"))?;
    let final_sq = traj.states.last().map_or(f64::NAN, |s| s.norm_sq());
    let max_sq = traj.states.iter().map(|s| s.norm_sq()).fold(0.0, f64::max);
    let mut s = String::new();
    let _ = writeln!(s, "simulate: n = {}, T = {}, dt = {}", model.n(), path_cfg.horizon, path_cfg.dt);
    let _ = writeln!(s, "grid points after t = 0: {}", traj.times.len() - 1);
    let _ = writeln!(s, "jumps: {}", path.total_events());
    let _ = writeln!(s, "|u(T)|^2 = {}", num(final_sq));
    let _ = writeln!(s, "max |u|^2 = {}", num(max_sq));
    if let Some(r) = path_cfg.truncation {
        match traj.first_exit(r) {
            Some(i) => {
                let _ = writeln!(s, "first exit from |u|^2 <= {r}: t = {}", num(traj.times[i]));
            }
            None => {
                let _ = writeln!(s, "no exit from |u|^2 <= {r}");
            }
        }
    }
    Ok(s)
}

#[derive(Serialize)]
struct BelRecord {
    test_function: usize,
    coord: usize,
    bel_mean: f64,
    bel_se: f64,
    fd_mean: f64,
    fd_se: f64,
    /// Standard error of the per-sample difference on shared paths.
    diff_se: f64,
    rejected_fraction: f64,
    bound_rhs: f64,
}

fn bel_check(cfg: &RunConfig, p: &BelCheckParams) -> Result<String, CliError> {
    let model = cfg.build_model()?;
    let sampler = cfg.build_sampler()?;
    let path_cfg = cfg.path_config();
    let x = state_from_prefix(&p.initial_state, model.n());
    let run = BelRun {
        model: &model,
        cfg: &path_cfg,
        sampler: &sampler,
        x: &x,
        t: p.time,
        samples: p.samples,
        seed: cfg.seed,
        window: (p.window > 0.0).then_some(p.window),
    };
    let comparisons = bel::compare_with_finite_differences(&run, &p.test_functions, p.fd_step)?;
    let mut records = Vec::new();
    let mut s = String::new();
    let _ = writeln!(s, "bel-check: n = {}, t = {}, samples = {}", model.n(), p.time, p.samples);
    for (i, (phi, cmp)) in p.test_functions.iter().zip(&comparisons).enumerate() {
        let bound = bel::gradient_bound_check(&run, phi, 1.0, &[p.bound_delta])?;
        let rhs = bound[0].rhs;
        let total = (cmp.accepted + cmp.rejected) as f64;
        let agree = (0..model.dim()).filter(|&k| cmp.agrees(k, 3.0)).count();
        let _ = writeln!(s, "test function {i}: {agree}/{} coordinates within 3 SE, bound rhs {}", model.dim(), num(rhs));
        for k in 0..model.dim() {
            records.push(BelRecord {
                test_function: i,
                coord: k,
                bel_mean: cmp.bel[k].mean,
                bel_se: cmp.bel[k].se,
                fd_mean: cmp.fd[k].mean,
                fd_se: cmp.fd[k].se,
                diff_se: cmp.difference[k].se,
                rejected_fraction: cmp.rejected as f64 / total,
                bound_rhs: rhs,
            });
        }
    }
    write_text(&cfg.output_dir.join("bel_check.jsonl"), &jsonl(&records))?;
    Ok(s)
}

/// `ergodicity.csv` has columns `t, statistic, value, se`; the statistics
/// are `ks_<observable>` and `p_<observable>` (no standard error).
fn ergodicity(cfg: &RunConfig, p: &ErgodicityParams) -> Result<String, CliError> {
    let model = cfg.build_model()?;
    let sampler = cfg.build_sampler()?;
    let xi_a = state_from_prefix(&p.xi_a, model.n());
    let xi_b = state_from_prefix(&p.xi_b, model.n());
    let times = ergolab::observation_times(p.burn_in, p.horizon, p.times);
    let r = ergolab::invariant_measure_convergence(&model, &cfg.path_config(), &sampler, &xi_a, &xi_b, &times, p.ensemble)?;
    let mut csv = Csv::new(&["t", "statistic", "value", "se"]);
    for row in &r.rows {
        csv.row(&[num(row.time), format!("ks_{}", row.observable.name()), num(row.ks.statistic), String::new()]);
        csv.row(&[num(row.time), format!("p_{}", row.observable.name()), num(row.ks.p_value), String::new()]);
    }
    csv.save(&cfg.output_dir.join("ergodicity.csv"))?;
    let mut s = String::new();
    let _ = writeln!(s, "ergodicity: n = {}, ensemble = {} per start, times {} .. {}", model.n(), p.ensemble, num(p.burn_in), num(p.horizon));
    let _ = writeln!(s, "failures: {} (a), {} (b){}", r.failures_a, r.failures_b, if r.unreliable { ", UNRELIABLE (> 1%)" } else { "" });
    let first = r.rows.first().map_or(f64::NAN, |row| row.time);
    for obs in Observable::ALL {
        let p_first = r.rows_at(first).find(|row| row.observable == obs).map_or(f64::NAN, |row| row.ks.p_value);
        let rate = r.decay_rates.iter().find(|(o, _)| *o == obs).and_then(|(_, v)| *v);
        let _ = writeln!(
            s,
            "{:>8}: p-value at t = {}: {}, KS decay rate: {}",
            obs.name(),
            num(first),
            num(p_first),
            rate.map_or("n/a".into(), num)
        );
    }
    Ok(s)
}

fn noise_check(cfg: &RunConfig, p: &NoiseCheckParams) -> Result<String, CliError> {
    let sampler = cfg.build_sampler()?;
    let levy = sampler.measure();
    let verdict = levy.small_deviation_verdict();
    let order = levy.order_condition_estimate(p.order_direction, &p.order_grid)?;
    let probe = ergolab::small_deviation_probe(&sampler, p.probe_horizon, p.probe_epsilon, p.probe_samples, cfg.seed)?;
    let mut csv = Csv::new(&["quantity", "value"]);
    let mut put = |k: String, v: String| csv.row(&[k, v]);
    put("small_deviation_verdict".into(), format!("{:?}", verdict.verdict));
    put("type_one".into(), verdict.type_one.to_string());
    put("type_one_integral".into(), num(verdict.type_one_integral));
    put("drift".into(), num(verdict.drift));
    put("compensator_identity".into(), num(levy.compensator_identity()?));
    put("mass_above_delta_cut".into(), num(levy.mass_above(cfg.noise.delta_cut)?));
    put("small_jump_drift".into(), num(sampler.small_jump_drift()));
    for &q in &p.moments {
        put(format!("moment_{}", num(q)), num(levy.moment(q)?));
    }
    put("order_alpha_hat".into(), num(order.alpha_hat));
    put("order_logarithmic".into(), order.logarithmic.to_string());
    put("order_status".into(), format!("{:?}", order.status));
    put("probe_horizon".into(), num(p.probe_horizon));
    put("probe_epsilon".into(), num(p.probe_epsilon));
    put("probe_p_hat".into(), num(probe.probability.p_hat));
    put("probe_lower".into(), num(probe.probability.lower));
    put("probe_upper".into(), num(probe.probability.upper));
    csv.save(&cfg.output_dir.join("noise_check.csv"))?;
    let mut s = format!("small-deviation verdict: {:?} ({})\n", verdict.verdict, verdict.explanation);
    if verdict.verdict == Verdict::Holds && !probe.passed {
        let _ = writeln!(
            s,
            "note: the Monte Carlo estimate at epsilon = {} is consistent with 0; the verdict is asymptotic and the probability may lie below what {} samples resolve",
            num(p.probe_epsilon),
            p.probe_samples
        );
    }
    s.push_str(csv.as_str());
    Ok(s)
}

fn refine(cfg: &RunConfig, p: &RefineParams) -> Result<String, CliError> {
    let model = cfg.build_model()?;
    let sampler = cfg.build_sampler()?;
    let path_cfg = cfg.path_config();
    let xi = state_from_prefix(&p.initial_state, model.n());
    let mut csv = Csv::new(&["path", "n_coarse", "projected", "full"]);
    let mut s = format!("refine: n = {}, coarse sizes {:?}, {} paths\n", model.n(), p.coarse_sizes, p.paths);
    let mut worst = vec![0.0f64; p.coarse_sizes.len()];
    for i in 0..p.paths {
        let path = integrator::sample_noise(&model, &path_cfg, &sampler, &mut rng::stream(cfg.seed, domain::REFINE, i as u64))?;
        let rows = integrator::galerkin_refinement(&model, &path_cfg, &xi, &p.coarse_sizes, &path)?;
        for (w, row) in worst.iter_mut().zip(&rows) {
            *w = w.max(row.projected);
            csv.row(&[i.to_string(), row.n_coarse.to_string(), num(row.projected), num(row.full)]);
        }
    }
    csv.save(&cfg.output_dir.join("refine.csv"))?;
    for (c, w) in p.coarse_sizes.iter().zip(&worst) {
        let _ = writeln!(s, "n_coarse = {c}: largest projected distance {}", num(*w));
    }
    Ok(s)
}
