//! The `certify`, `simulate`, `verify-bound`, `sweep` and `spde` commands.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use slide_core::filippov::{DriftEvaluation, Mollifier};
use slide_core::reaching::{
    default_band, run_batch, run_spde_batch, verify_bound, BatchOptions, BoundSpec, BoundVerdict,
    ReachingStats,
};
use slide_core::rng::{StreamingNoise, PRIMARY_CHANNEL};
use slide_core::sde::{coupling_rule_holds, moment_statistics, PathObserver, Simulator};
use slide_core::spde::{check_noise_regularity, SpdeSimulator};
use slide_core::systems::{certify_conditions, certify_spde_hypotheses, ConditionReport, StateBox};

use crate::config::{ConfigError, Format, ScenarioConfig};
use crate::export::{fmt_f64, write_atomic, Csv, Report};
use crate::scenario::{build, Built, FiniteScenario, SpdeSetup};

/// Number of violations listed in the report.
const REPORTED_VIOLATIONS: usize = 16;
/// Paths per level in the coupled strong-error column of an `eps` sweep.
pub const STRONG_ERROR_PATHS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

impl Outcome {
    fn from_pass(pass: bool) -> Self {
        if pass {
            Outcome::Pass
        } else {
            Outcome::Fail
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Eps,
    Dt,
    NModes,
}

impl SweepAxis {
    fn name(self) -> &'static str {
        match self {
            SweepAxis::Eps => "eps",
            SweepAxis::Dt => "dt",
            SweepAxis::NModes => "n_modes",
        }
    }
}

fn out_dir(cfg: &ScenarioConfig) -> PathBuf {
    cfg.output.directory.clone()
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let p = dir.join(name);
    write_atomic(&p, contents).with_context(|| format!("writing {}", p.display()))
}

fn header(report: &mut Report, command: &str, cfg: &ScenarioConfig) {
    report.section("run");
    report.kv("command", command);
    report.kv("slide_version", env!("CARGO_PKG_VERSION"));
    report.kv("master_seed", cfg.mc.master_seed);
    report.section("config");
    report.block(&cfg.echo());
}

fn evaluation(cfg: &ScenarioConfig) -> DriftEvaluation {
    if cfg.numerics.drift_table {
        DriftEvaluation::Table
    } else {
        DriftEvaluation::Direct
    }
}

fn certify_built(cfg: &ScenarioConfig, built: &Built) -> Result<ConditionReport> {
    let c = &cfg.certify;
    let seed = cfg.mc.master_seed;
    Ok(match built {
        Built::Finite(f) => certify_conditions(&f.system, &f.domain, c.n_samples, seed)?,
        Built::Spde(s) => match (&s.hypotheses, &s.coupled_system) {
            (Some(h), _) => certify_spde_hypotheses(h, s.interval, c.n_samples, seed)?,
            (None, Some(sys)) => {
                let domain = StateBox::cube(2, c.half_width)?;
                certify_conditions(sys, &domain, c.n_samples, seed)?
            }
            (None, None) => unreachable!("heat scenarios carry hypotheses or a pointwise system"),
        },
    })
}

fn write_certification(report: &mut Report, rep: &ConditionReport) {
    report.section("certification");
    report.kv("passed", rep.passed());
    report.kv("samples", rep.sample_count);
    report.num("alpha_estimate", rep.alpha_estimate);
    report.num("c_star_estimate", rep.c_star_estimate);
    report.num("invariance_constant", rep.invariance_constant);
    report.num("lipschitz_g_estimate", rep.lipschitz_g_estimate);
    report.num("surface_bound", rep.surface_bound);
    for (cond, n) in &rep.violation_counts {
        report.kv(&format!("violations.{}", cond.id()), n);
    }
    for v in rep.violations.iter().take(REPORTED_VIOLATIONS) {
        let point: Vec<String> = v.point.iter().map(|x| fmt_f64(*x)).collect();
        report.kv(
            "violation",
            format!(
                "{} at [{}] residual {}",
                v.condition.id(),
                point.join(", "),
                fmt_f64(v.residual)
            ),
        );
    }
}

fn finish(cfg: &ScenarioConfig, mut report: Report, started: Instant) -> Result<()> {
    report.timing("wall_seconds", started.elapsed().as_secs_f64());
    if cfg.wants(Format::Report) {
        write(&out_dir(cfg), "report.txt", &report.render())?;
    }
    Ok(())
}

pub fn cmd_certify(cfg: &ScenarioConfig, strict: bool) -> Result<Outcome> {
    let started = Instant::now();
    let built = build(cfg)?;
    let rep = certify_built(cfg, &built)?;
    let mut report = Report::default();
    header(&mut report, "certify", cfg);
    write_certification(&mut report, &rep);
    finish(cfg, report, started)?;
    if rep.passed() {
        println!("certification passed ({} samples)", rep.sample_count);
    } else {
        println!("certification found violations:");
        for (cond, n) in &rep.violation_counts {
            println!("  {}: {n}", cond.id());
        }
    }
    Ok(Outcome::from_pass(rep.passed() || !strict))
}

/// Result of one reaching-time batch with its verdict.
pub struct BoundRun {
    pub stats: ReachingStats,
    pub bound: BoundSpec,
    pub verdict: BoundVerdict,
    pub table_error: Option<f64>,
}

impl BoundRun {
    pub fn csv(&self, strict: bool) -> Csv {
        let mut csv = Csv::new(&["t", "p_hat", "ci_upper", "bound", "pass"]);
        for r in &self.verdict.rows {
            let pass = if strict { r.strict_pass } else { r.pass };
            csv.row(&[
                fmt_f64(r.t),
                fmt_f64(r.p_hat),
                fmt_f64(r.ci_upper),
                fmt_f64(r.bound),
                pass.to_string(),
            ]);
        }
        csv
    }

    pub fn passed(&self, strict: bool) -> bool {
        if strict {
            self.verdict.strict_pass
        } else {
            self.verdict.pass
        }
    }
}

fn run_finite_bound(cfg: &ScenarioConfig, f: &FiniteScenario, rep: &ConditionReport) -> Result<BoundRun> {
    let n = &cfg.numerics;
    let system = &f.system;
    let sim = Simulator::new(system, Mollifier::standard(), n.eps, f.grid, evaluation(cfg))?;
    let band = n.band.unwrap_or_else(|| default_band(system, n.eps, n.dt, &f.x0));
    let opts = BatchOptions {
        occupation_paths: cfg.mc.occupation_paths,
    };
    let stats = run_batch(&sim, &f.x0, cfg.mc.n_paths, cfg.mc.master_seed, band, opts)?;
    let surface = system.surface();
    let c_tilde = cfg.certify.c1 * rep.c_star_estimate;
    let bound = BoundSpec::new(surface.alpha, c_tilde, surface.g(&f.x0).abs())?;
    let verdict = verify_bound(&stats, &bound, &cfg.mc.t_grid, cfg.mc.confidence)?;
    Ok(BoundRun {
        stats,
        bound,
        verdict,
        table_error: sim.mollified_drift().table_error(),
    })
}

fn run_spde_bound(cfg: &ScenarioConfig, s: &SpdeSetup, rep: &ConditionReport) -> Result<BoundRun> {
    let n = &cfg.numerics;
    let sim = SpdeSimulator::new(&s.scenario, n.eps, n.allow_divergent_noise)?;
    let band = n.band.unwrap_or_else(|| s.scenario.default_band(n.eps));
    let opts = BatchOptions {
        occupation_paths: cfg.mc.occupation_paths,
    };
    let stats = run_spde_batch(&sim, cfg.mc.n_paths, cfg.mc.master_seed, band, opts)?;
    let g0 = s.scenario.initial_g_norm();
    let g0 = if cfg.bound_squared_norm { g0 * g0 } else { g0 };
    let c_tilde = cfg.certify.c1 * rep.c_star_estimate;
    let bound = BoundSpec::new(s.alpha, c_tilde, g0)?;
    let verdict = verify_bound(&stats, &bound, &cfg.mc.t_grid, cfg.mc.confidence)?;
    Ok(BoundRun {
        stats,
        bound,
        verdict,
        table_error: None,
    })
}

fn run_bound(cfg: &ScenarioConfig, built: &Built, rep: &ConditionReport) -> Result<BoundRun> {
    match built {
        Built::Finite(f) => run_finite_bound(cfg, f, rep),
        Built::Spde(s) => run_spde_bound(cfg, s, rep),
    }
}

fn write_bound_run(report: &mut Report, cfg: &ScenarioConfig, run: &BoundRun, strict: bool) {
    report.section("numerics");
    report.num("eps", cfg.numerics.eps);
    report.num("dt", cfg.numerics.dt);
    report.kv("coupling_rule", "dt <= eps^2/4");
    report.kv(
        "coupling_rule_holds",
        coupling_rule_holds(cfg.numerics.dt, cfg.numerics.eps),
    );
    report.num("band", run.stats.band);
    if let Some(e) = run.table_error {
        report.num("drift_table_error", e);
    }
    report.section("bound");
    report.num("alpha", run.bound.alpha);
    report.num("c1", cfg.certify.c1);
    report.num("c_tilde", run.bound.c_tilde);
    report.num("g0_norm", run.bound.g0_norm);
    report.kv("g0_squared", cfg.bound_squared_norm);
    report.section("statistics");
    report.kv("n_paths", run.stats.n_paths);
    report.kv("reached", run.stats.reached());
    report.kv("failed_paths", run.stats.failed_paths.len());
    report.num("horizon", run.stats.horizon);
    if let Some(o) = run.stats.occupation {
        report.num("occupation_fraction", o.mean_fraction);
        report.kv("occupation_paths", o.paths);
    }
    report.section("verdict");
    report.num("confidence", run.verdict.confidence);
    report.kv(
        "rule",
        if strict {
            "ci_upper <= bound"
        } else {
            "p_hat <= bound + ci width"
        },
    );
    for r in &run.verdict.rows {
        report.kv(
            &format!("t={}", fmt_f64(r.t)),
            format!(
                "p_hat {} ci_upper {} bound {} pass {} strict_pass {}",
                fmt_f64(r.p_hat),
                fmt_f64(r.ci_upper),
                fmt_f64(r.bound),
                r.pass,
                r.strict_pass
            ),
        );
    }
    report.kv("pass", run.passed(strict));
}

pub fn cmd_verify_bound(cfg: &ScenarioConfig, strict: bool, override_cert: bool) -> Result<Outcome> {
    let started = Instant::now();
    let built = build(cfg)?;
    let rep = certify_built(cfg, &built)?;
    let mut report = Report::default();
    header(&mut report, "verify-bound", cfg);
    write_certification(&mut report, &rep);
    report.kv("override", override_cert);
    if !rep.passed() && !override_cert {
        report.section("verdict");
        report.kv("pass", false);
        report.kv(
            "reason",
            "certification failed; rerun with --override to simulate anyway",
        );
        finish(cfg, report, started)?;
        eprintln!("certification failed; pass --override to run the bound check anyway");
        return Ok(Outcome::Fail);
    }
    let run = run_bound(cfg, &built, &rep)?;
    if cfg.wants(Format::Csv) {
        write(&out_dir(cfg), "tail_bound.csv", run.csv(strict).as_str())?;
    }
    write_bound_run(&mut report, cfg, &run, strict);
    finish(cfg, report, started)?;
    let pass = run.passed(strict);
    println!(
        "bound check {}: {} of {} paths reached the band",
        if pass { "passed" } else { "failed" },
        run.stats.reached(),
        run.stats.n_paths
    );
    Ok(Outcome::from_pass(pass))
}

pub fn cmd_simulate(cfg: &ScenarioConfig) -> Result<Outcome> {
    let started = Instant::now();
    let built = build(cfg)?;
    let f = match &built {
        Built::Finite(f) => f,
        Built::Spde(s) => return spde_run(cfg, s, "simulate", started),
    };
    let n = &cfg.numerics;
    let sim = Simulator::new(&f.system, Mollifier::standard(), n.eps, f.grid, evaluation(cfg))?;
    let seed = cfg.mc.master_seed;
    let paths: Vec<_> = (0..cfg.output.trajectories as u64)
        .into_par_iter()
        .map(|i| sim.simulate_streaming(&f.x0, seed, i))
        .collect::<slide_core::Result<_>>()?;
    let dim = f.system.dim();
    if cfg.wants(Format::Csv) {
        let mut header = vec!["t".to_string()];
        header.extend((1..=dim).map(|i| format!("x{i}")));
        header.push("g".into());
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        for (i, tr) in paths.iter().enumerate() {
            let mut csv = Csv::new(&header);
            for k in 0..tr.len() {
                let mut cells = vec![fmt_f64(tr.times[k])];
                cells.extend(tr.state(k).iter().map(|v| fmt_f64(*v)));
                cells.push(fmt_f64(tr.g_values[k]));
                csv.row(&cells);
            }
            write(&out_dir(cfg), &format!("trajectory_{i}.csv"), csv.as_str())?;
        }
    }
    let mut report = Report::default();
    header(&mut report, "simulate", cfg);
    report.section("numerics");
    report.num("eps", n.eps);
    report.num("dt", n.dt);
    report.kv("coupling_rule_holds", coupling_rule_holds(n.dt, n.eps));
    report.kv("drift_table", sim.mollified_drift().uses_table());
    report.section("paths");
    report.kv("count", paths.len());
    for (i, tr) in paths.iter().enumerate() {
        let fin: Vec<String> = tr.final_state().iter().map(|v| fmt_f64(*v)).collect();
        report.kv(&format!("final_state.{i}"), format!("[{}]", fin.join(", ")));
    }
    if let Ok(st) = moment_statistics(&paths) {
        report.num("sup_moment", st.sup_moment);
        report.num("increment_constant", st.increment_constant);
        if let Some(p) = st.increment_exponent {
            report.num("increment_exponent", p);
        }
    }
    finish(cfg, report, started)?;
    println!("simulated {} path(s)", paths.len());
    Ok(Outcome::Pass)
}

fn spde_run(cfg: &ScenarioConfig, s: &SpdeSetup, command: &str, started: Instant) -> Result<Outcome> {
    let n = &cfg.numerics;
    let es = &s.scenario.eigensystem;
    let regularity = check_noise_regularity(&s.scenario.noise, es);
    let sim = SpdeSimulator::new(&s.scenario, n.eps, n.allow_divergent_noise)?;
    let seed = cfg.mc.master_seed;
    let runs: Vec<_> = (0..cfg.output.trajectories as u64)
        .into_par_iter()
        .map(|i| sim.simulate(seed, i, false))
        .collect::<slide_core::Result<_>>()?;
    if cfg.wants(Format::Csv) {
        for (i, run) in runs.iter().enumerate() {
            let mut csv = Csv::new(&["t", "norm", "g_norm"]);
            for k in 0..run.times.len() {
                csv.row(&[
                    fmt_f64(run.times[k]),
                    fmt_f64(run.energy[k]),
                    fmt_f64(run.g_norm[k]),
                ]);
            }
            let name = if i == 0 {
                "spde_energy.csv".to_string()
            } else {
                format!("spde_energy_{i}.csv")
            };
            write(&out_dir(cfg), &name, csv.as_str())?;
        }
    }
    let band = n.band.unwrap_or_else(|| s.scenario.default_band(n.eps));
    let mut report = Report::default();
    header(&mut report, command, cfg);
    report.section("noise");
    report.num("regularity_partial_sum", regularity.partial_sum);
    if let Some(p) = regularity.decay_exponent {
        report.num("regularity_decay_exponent", p);
    }
    report.kv("regularity_convergent", regularity.convergent);
    report.section("numerics");
    report.num("eps", n.eps);
    report.num("dt", n.dt);
    report.kv("n_modes", es.n_modes());
    report.kv("n_grid", es.n_grid());
    report.num("band", band);
    report.section("paths");
    for (i, run) in runs.iter().enumerate() {
        let last = run.times.len() - 1;
        report.num(&format!("final_norm.{i}"), run.energy[last]);
        report.num(&format!("final_g_norm.{i}"), run.g_norm[last]);
        let tau = slide_core::reaching::reaching_time_series(&run.times, &run.g_norm, band);
        report.kv(
            &format!("reaching_time.{i}"),
            tau.map_or("none".to_string(), fmt_f64),
        );
    }
    finish(cfg, report, started)?;
    println!("simulated {} heat-equation path(s)", runs.len());
    Ok(Outcome::Pass)
}

pub fn cmd_spde(cfg: &ScenarioConfig) -> Result<Outcome> {
    let started = Instant::now();
    if !cfg.kind.is_spde() {
        return Err(ConfigError::invalid("kind", "the spde command needs spde_heat or spde_coupled").into());
    }
    let Built::Spde(s) = build(cfg)? else {
        unreachable!("heat-equation kinds build heat scenarios")
    };
    spde_run(cfg, &s, "spde", started)
}

/// Keeps the last state of a path.
struct FinalState(Vec<f64>);

impl PathObserver for FinalState {
    fn observe(&mut self, _k: usize, _t: f64, x: &[f64], _g: f64, _drift: &[f64]) -> ControlFlow<()> {
        self.0.clear();
        self.0.extend_from_slice(x);
        ControlFlow::Continue(())
    }
}

/// Final states at the horizon of paths `0..n` driven by the shared noise
/// streams, so runs at different `eps` are coupled path by path.
pub fn coupled_final_states(cfg: &ScenarioConfig, f: &FiniteScenario, n: usize) -> Result<Vec<Vec<f64>>> {
    let sim = Simulator::new(
        &f.system,
        Mollifier::standard(),
        cfg.numerics.eps,
        f.grid,
        evaluation(cfg),
    )?;
    let dt = f.grid.dt();
    let seed = cfg.mc.master_seed;
    let states = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut obs = FinalState(Vec::new());
            let mut noise = StreamingNoise::new(seed, PRIMARY_CHANNEL, i, dt);
            sim.integrate(&f.x0, &mut noise, &mut obs)?;
            Ok(obs.0)
        })
        .collect::<slide_core::Result<_>>()?;
    Ok(states)
}

fn check_sweep_values(axis: SweepAxis, values: &[f64]) -> Result<(), ConfigError> {
    if values.is_empty() {
        return Err(ConfigError::invalid("values", "must not be empty"));
    }
    if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(ConfigError::invalid("values", "must be positive and finite"));
    }
    let up = values.windows(2).all(|w| w[0] < w[1]);
    let down = values.windows(2).all(|w| w[0] > w[1]);
    if !(up || down) {
        return Err(ConfigError::invalid("values", "must be strictly sorted"));
    }
    if axis == SweepAxis::NModes && values.iter().any(|v| v.fract() != 0.0) {
        return Err(ConfigError::invalid("values", "n_modes must be integers"));
    }
    Ok(())
}

fn with_axis(cfg: &ScenarioConfig, axis: SweepAxis, v: f64) -> Result<ScenarioConfig, ConfigError> {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::Eps => c.numerics.eps = v,
        SweepAxis::Dt => c.numerics.dt = v,
        SweepAxis::NModes => {
            c.numerics.n_modes = v as usize;
            c.numerics.n_grid = c.numerics.n_grid.max(4 * c.numerics.n_modes);
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn cmd_sweep(
    cfg: &ScenarioConfig,
    axis: SweepAxis,
    values: &[f64],
    strict: bool,
    override_cert: bool,
) -> Result<Outcome> {
    let started = Instant::now();
    check_sweep_values(axis, values)?;
    if axis == SweepAxis::NModes && !cfg.kind.is_spde() {
        return Err(ConfigError::invalid("axis", "n_modes applies to heat-equation kinds only").into());
    }
    let mut report = Report::default();
    header(&mut report, "sweep", cfg);
    report.section("sweep");
    report.kv("axis", axis.name());
    report.kv(
        "values",
        values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(","),
    );
    let mut table = Csv::new(&["value", "p_hat", "ci_upper", "bound", "pass", "strong_error"]);
    let mut all_pass = true;
    let mut previous: Option<Vec<Vec<f64>>> = None;
    let strong_paths = STRONG_ERROR_PATHS.min(cfg.mc.n_paths);
    for (k, &v) in values.iter().enumerate() {
        let sub = with_axis(cfg, axis, v)?;
        let built = build(&sub)?;
        let rep = certify_built(&sub, &built)?;
        if k == 0 {
            write_certification(&mut report, &rep);
            report.section("sweep");
        }
        if !rep.passed() && !override_cert {
            bail!(ConfigError::invalid(
                "certification",
                format!("failed at {}={}; rerun with --override", axis.name(), fmt_f64(v))
            ));
        }
        let run = run_bound(&sub, &built, &rep)?;
        if cfg.wants(Format::Csv) {
            write(
                &out_dir(cfg),
                &format!("tail_bound_{k}.csv"),
                run.csv(strict).as_str(),
            )?;
        }
        let strong = match (&built, axis) {
            (Built::Finite(f), SweepAxis::Eps) => {
                let states = coupled_final_states(&sub, f, strong_paths)?;
                let err = previous
                    .as_ref()
                    .map(|prev| mean_square_difference(prev, &states));
                previous = Some(states);
                err
            }
            _ => None,
        };
        let last = run.verdict.rows.last().expect("t_grid is nonempty");
        let pass = run.passed(strict);
        all_pass &= pass;
        table.row(&[
            fmt_f64(v),
            fmt_f64(last.p_hat),
            fmt_f64(last.ci_upper),
            fmt_f64(last.bound),
            pass.to_string(),
            strong.map_or(String::new(), fmt_f64),
        ]);
        report.kv(
            &format!("{}={}", axis.name(), fmt_f64(v)),
            format!(
                "band {} reached {} pass {}{}",
                fmt_f64(run.stats.band),
                run.stats.reached(),
                pass,
                strong.map_or(String::new(), |e| format!(" strong_error {}", fmt_f64(e)))
            ),
        );
    }
    if cfg.wants(Format::Csv) {
        write(&out_dir(cfg), "sweep.csv", table.as_str())?;
    }
    report.kv("pass", all_pass);
    finish(cfg, report, started)?;
    println!(
        "sweep over {} value(s): {}",
        values.len(),
        if all_pass { "passed" } else { "failed" }
    );
    Ok(Outcome::from_pass(all_pass))
}

fn mean_square_difference(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>())
        .sum();
    total / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_values_are_checked() {
        assert!(check_sweep_values(SweepAxis::Eps, &[]).is_err());
        assert!(check_sweep_values(SweepAxis::Eps, &[0.1, -0.1]).is_err());
        assert!(check_sweep_values(SweepAxis::Eps, &[0.1, 0.2, 0.15]).is_err());
        assert!(check_sweep_values(SweepAxis::NModes, &[8.0, 16.5]).is_err());
        assert!(check_sweep_values(SweepAxis::Eps, &[0.2, 0.1, 0.05]).is_ok());
        assert!(check_sweep_values(SweepAxis::Dt, &[1e-3]).is_ok());
    }

    #[test]
    fn mean_square_difference_oracle() {
        let a = vec![vec![0.0, 1.0], vec![2.0, 2.0]];
        let b = vec![vec![1.0, 1.0], vec![2.0, 0.0]];
        assert_eq!(mean_square_difference(&a, &b), 2.5);
    }
}
