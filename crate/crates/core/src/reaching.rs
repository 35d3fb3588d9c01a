//! Reaching times of the switching surface, their tail bounds, Monte Carlo
//! batches and the supermartingale diagnostic.

use std::ops::ControlFlow;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{StreamingNoise, PRIMARY_CHANNEL};
use crate::sde::{PathObserver, Simulator, Trajectory};
use crate::spde::{SpdeObserver, SpdeSample, SpdeSimulator, SpectralField};
use crate::stats::{clopper_pearson_upper, mean_and_se};
use crate::systems::{SlidingSurface, SystemSpec};

pub const DEFAULT_CONFIDENCE: f64 = 0.99;
/// Paths (by lowest index) that keep running after reaching the surface so
/// that the post-reach occupation can be measured.
pub const DEFAULT_OCCUPATION_PATHS: usize = 256;
/// Number of diagnostic times in the supermartingale test.
pub const DEFAULT_DIAGNOSTIC_POINTS: usize = 21;

/// First parameter `s ∈ [0, 1]` at which the segment from `a` to `b` enters
/// `[−band, band]`.
fn entry_fraction(a: f64, b: f64, band: f64) -> Option<f64> {
    if a.abs() <= band {
        return Some(0.0);
    }
    let s = if a > band {
        (b < a).then(|| (a - band) / (a - b))
    } else {
        (b > a).then(|| (-band - a) / (b - a))
    }?;
    (s <= 1.0).then_some(s)
}

/// First time `|g| ≤ band`, linearly interpolated between the bracketing
/// samples. A sign change between samples counts as a crossing.
pub fn reaching_time_series(times: &[f64], g: &[f64], band: f64) -> Option<f64> {
    let (&t0, &g0) = (times.first()?, g.first()?);
    if g0.abs() <= band {
        return Some(t0);
    }
    times
        .windows(2)
        .zip(g.windows(2))
        .find_map(|(t, v)| entry_fraction(v[0], v[1], band).map(|s| t[0] + s * (t[1] - t[0])))
}

pub fn reaching_time(traj: &Trajectory, band: f64) -> Option<f64> {
    reaching_time_series(&traj.times, &traj.g_values, band)
}

/// Default band `max(4·sqrt(dt)·|∇g(x0)ᵀσ(x0)|, 2·eps·Lip(g))`.
pub fn default_band(system: &SystemSpec, eps: f64, dt: f64, x0: &[f64]) -> f64 {
    let n = system.dim();
    let m = system.noise_dim();
    let mut grad = vec![0.0; n];
    let mut sigma = vec![0.0; n * m];
    system.surface().grad(x0, &mut grad);
    system.eval_sigma(x0, &mut sigma);
    let local: f64 = (0..m)
        .map(|j| (0..n).map(|i| grad[i] * sigma[i * m + j]).sum::<f64>().powi(2))
        .sum::<f64>()
        .sqrt();
    (4.0 * dt.sqrt() * local).max(2.0 * eps * system.surface().lipschitz)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupationStats {
    /// Mean over contributing paths of the post-reach fraction of grid times
    /// with `|g| ≤ 2·band`.
    pub mean_fraction: f64,
    pub paths: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachingStats {
    /// `None` marks a path censored at the horizon.
    pub tau_samples: Vec<Option<f64>>,
    pub n_paths: usize,
    pub horizon: f64,
    pub band: f64,
    pub master_seed: u64,
    pub occupation: Option<OccupationStats>,
    /// Indices of paths that aborted numerically; they count as censored.
    pub failed_paths: Vec<u64>,
}

impl ReachingStats {
    /// Wraps externally produced samples.
    pub fn from_samples(
        tau_samples: Vec<Option<f64>>,
        horizon: f64,
        band: f64,
        master_seed: u64,
    ) -> Result<Self> {
        if tau_samples.is_empty() {
            return Err(Error::EmptySample);
        }
        if tau_samples.iter().flatten().any(|t| !(0.0..=horizon).contains(t)) {
            return Err(Error::invalid(
                "tau_samples",
                "reaching times must lie in [0, horizon]",
            ));
        }
        Ok(Self {
            n_paths: tau_samples.len(),
            tau_samples,
            horizon,
            band,
            master_seed,
            occupation: None,
            failed_paths: Vec::new(),
        })
    }

    pub fn reached(&self) -> usize {
        self.tau_samples.iter().flatten().count()
    }
}

/// Tracks the reaching time and post-reach occupation of one path.
#[derive(Debug, Clone)]
pub struct ReachObserver {
    band: f64,
    stop_at_reach: bool,
    prev: Option<(f64, f64)>,
    pub tau: Option<f64>,
    post_total: usize,
    post_inside: usize,
}

impl ReachObserver {
    pub fn new(band: f64, stop_at_reach: bool) -> Self {
        Self {
            band,
            stop_at_reach,
            prev: None,
            tau: None,
            post_total: 0,
            post_inside: 0,
        }
    }

    fn push(&mut self, t: f64, g: f64) -> ControlFlow<()> {
        match self.tau {
            None => {
                self.tau = match self.prev {
                    None => (g.abs() <= self.band).then_some(t),
                    Some((tp, gp)) => entry_fraction(gp, g, self.band).map(|s| tp + s * (t - tp)),
                };
                self.prev = Some((t, g));
                if self.tau.is_some() && self.stop_at_reach {
                    return ControlFlow::Break(());
                }
            }
            Some(tau) => {
                if t > tau {
                    self.post_total += 1;
                    if g.abs() <= 2.0 * self.band {
                        self.post_inside += 1;
                    }
                }
            }
        }
        ControlFlow::Continue(())
    }

    /// Post-reach occupation fraction, if the path reached and kept running.
    pub fn occupation(&self) -> Option<f64> {
        (self.post_total > 0).then(|| self.post_inside as f64 / self.post_total as f64)
    }
}

impl PathObserver for ReachObserver {
    fn observe(&mut self, _k: usize, t: f64, _x: &[f64], g: f64, _d: &[f64]) -> ControlFlow<()> {
        self.push(t, g)
    }
}

impl SpdeObserver for ReachObserver {
    fn observe(&mut self, _k: usize, s: SpdeSample, _f: &[SpectralField]) -> ControlFlow<()> {
        self.push(s.t, s.g_norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOptions {
    pub occupation_paths: usize,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            occupation_paths: DEFAULT_OCCUPATION_PATHS,
        }
    }
}

type PathResult = std::result::Result<(Option<f64>, Option<f64>), Error>;

fn collect_batch(
    results: Vec<PathResult>,
    horizon: f64,
    band: f64,
    master_seed: u64,
) -> Result<ReachingStats> {
    let n = results.len();
    let mut tau_samples = Vec::with_capacity(n);
    let mut failed_paths = Vec::new();
    let mut first_failure = None;
    let mut occ = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok((tau, o)) => {
                tau_samples.push(tau);
                occ.extend(o);
            }
            Err(e) => {
                tau_samples.push(None);
                failed_paths.push(i as u64);
                first_failure.get_or_insert(e);
            }
        }
    }
    if failed_paths.len() * 1000 > n {
        return Err(Error::BatchFailure {
            failed: failed_paths.len(),
            total: n,
            first: Box::new(first_failure.expect("at least one failure")),
        });
    }
    let occupation = (!occ.is_empty()).then(|| OccupationStats {
        mean_fraction: occ.iter().sum::<f64>() / occ.len() as f64,
        paths: occ.len(),
    });
    Ok(ReachingStats {
        n_paths: n,
        tau_samples,
        horizon,
        band,
        master_seed,
        occupation,
        failed_paths,
    })
}

/// Simulates paths `0..n_paths` and collects their reaching times. The batch
/// fails if more than 0.1% of the paths abort.
pub fn run_batch(
    sim: &Simulator,
    x0: &[f64],
    n_paths: usize,
    master_seed: u64,
    band: f64,
    options: BatchOptions,
) -> Result<ReachingStats> {
    check_batch(n_paths, band)?;
    let dt = sim.grid().dt();
    let results: Vec<PathResult> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut obs = ReachObserver::new(band, (i as usize) >= options.occupation_paths);
            let mut noise = StreamingNoise::new(master_seed, PRIMARY_CHANNEL, i, dt);
            sim.integrate(x0, &mut noise, &mut obs)?;
            Ok((obs.tau, obs.occupation()))
        })
        .collect();
    collect_batch(results, sim.grid().horizon(), band, master_seed)
}

/// Heat-equation counterpart of [`run_batch`], driven by `|g(X(t))|₂`.
pub fn run_spde_batch(
    sim: &SpdeSimulator,
    n_paths: usize,
    master_seed: u64,
    band: f64,
    options: BatchOptions,
) -> Result<ReachingStats> {
    check_batch(n_paths, band)?;
    let results: Vec<PathResult> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut obs = ReachObserver::new(band, (i as usize) >= options.occupation_paths);
            sim.integrate(master_seed, i, &mut obs)?;
            Ok((obs.tau, obs.occupation()))
        })
        .collect();
    collect_batch(results, sim.scenario().grid.horizon(), band, master_seed)
}

fn check_batch(n_paths: usize, band: f64) -> Result<()> {
    if n_paths == 0 {
        return Err(Error::invalid("n_paths", "must be at least 1"));
    }
    if !(band >= 0.0 && band.is_finite()) {
        return Err(Error::invalid("band", "must be finite and nonnegative"));
    }
    Ok(())
}

/// Parameters of the reaching-time tail bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundSpec {
    pub alpha: f64,
    pub c_tilde: f64,
    /// `|g(x)|`, or `|g(x)|₂` for heat-equation scenarios.
    pub g0_norm: f64,
}

impl BoundSpec {
    pub fn new(alpha: f64, c_tilde: f64, g0_norm: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid("alpha", "must be positive and finite"));
        }
        if !(c_tilde >= 0.0 && c_tilde.is_finite()) {
            return Err(Error::invalid("c_tilde", "must be finite and nonnegative"));
        }
        if !(g0_norm >= 0.0 && g0_norm.is_finite()) {
            return Err(Error::invalid("g0_norm", "must be finite and nonnegative"));
        }
        Ok(Self {
            alpha,
            c_tilde,
            g0_norm,
        })
    }
}

/// `P(τ > t) ≤ (C̃/α)(1 − e^{−C̃t})^{−1}|g(x)|`, or `|g(x)|/(αt)` when
/// `C̃ = 0`, clamped to `[0, 1]`.
pub fn theoretical_tail_bound(b: &BoundSpec, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::invalid("t", "must be positive"));
    }
    if b.g0_norm == 0.0 {
        return Ok(0.0);
    }
    let x = b.c_tilde * t;
    // x / (1 − e^{−x}) → 1 as x → 0; expm1 keeps this accurate for tiny x
    let factor = if x == 0.0 { 1.0 } else { x / -(-x).exp_m1() };
    Ok((factor * b.g0_norm / (b.alpha * t)).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailEstimate {
    pub p_hat: f64,
    pub ci_upper: f64,
    pub exceed: usize,
}

/// Fraction of paths with `τ > t` (censored paths included) and its exact
/// one-sided upper confidence limit.
pub fn empirical_tail(stats: &ReachingStats, t: f64, confidence: f64) -> Result<TailEstimate> {
    if t > stats.horizon * (1.0 + 1e-12) {
        return Err(Error::invalid("t", "must not exceed the horizon"));
    }
    let exceed = stats
        .tau_samples
        .iter()
        .filter(|s| s.is_none_or(|tau| tau > t))
        .count();
    let n = stats.tau_samples.len();
    let ci_upper = clopper_pearson_upper(exceed, n, confidence)?;
    Ok(TailEstimate {
        p_hat: exceed as f64 / n as f64,
        ci_upper,
        exceed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerdictRow {
    pub t: f64,
    pub p_hat: f64,
    pub ci_upper: f64,
    pub bound: f64,
    /// `p_hat ≤ bound + (ci_upper − p_hat)`.
    pub pass: bool,
    /// `ci_upper ≤ bound`.
    pub strict_pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundVerdict {
    pub rows: Vec<VerdictRow>,
    pub confidence: f64,
    pub pass: bool,
    pub strict_pass: bool,
}

pub fn verify_bound(
    stats: &ReachingStats,
    b: &BoundSpec,
    t_grid: &[f64],
    confidence: f64,
) -> Result<BoundVerdict> {
    if t_grid.is_empty() {
        return Err(Error::invalid("t_grid", "must be nonempty"));
    }
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        if !(t > 0.0) || t > stats.horizon * (1.0 + 1e-12) {
            return Err(Error::invalid("t_grid", format!("{t} lies outside (0, horizon]")));
        }
        let est = empirical_tail(stats, t, confidence)?;
        let bound = theoretical_tail_bound(b, t)?;
        let width = est.ci_upper - est.p_hat;
        rows.push(VerdictRow {
            t,
            p_hat: est.p_hat,
            ci_upper: est.ci_upper,
            bound,
            pass: est.p_hat <= bound + width,
            strict_pass: est.ci_upper <= bound,
        });
    }
    Ok(BoundVerdict {
        pass: rows.iter().all(|r| r.pass),
        strict_pass: rows.iter().all(|r| r.strict_pass),
        rows,
        confidence,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupermartingaleReport {
    pub times: Vec<f64>,
    pub mean_z: Vec<f64>,
    /// Mean and standard error of `Z(t_{i+1}) − Z(t_i)` per interval.
    pub increments: Vec<(f64, f64)>,
    /// Intervals whose mean increase exceeds three standard errors.
    pub failed_intervals: Vec<usize>,
    pub monotone_pass: bool,
}

fn diagnostic_indices(n_steps: usize, points: usize) -> Vec<usize> {
    let points = points.max(2);
    let mut idx: Vec<usize> = (0..points)
        .map(|i| ((i as f64 / (points - 1) as f64) * n_steps as f64).round() as usize)
        .collect();
    idx.dedup();
    idx
}

fn assemble_supermartingale(times: Vec<f64>, z: &[Vec<f64>]) -> SupermartingaleReport {
    let p = times.len();
    let mean_z: Vec<f64> = (0..p)
        .map(|i| z.iter().map(|row| row[i]).sum::<f64>() / z.len() as f64)
        .collect();
    let increments: Vec<(f64, f64)> = (0..p.saturating_sub(1))
        .map(|i| {
            let d: Vec<f64> = z.iter().map(|row| row[i + 1] - row[i]).collect();
            mean_and_se(&d)
        })
        .collect();
    let failed_intervals: Vec<usize> = increments
        .iter()
        .enumerate()
        .filter(|(_, (m, se))| *m > 3.0 * se)
        .map(|(i, _)| i)
        .collect();
    SupermartingaleReport {
        times,
        mean_z,
        increments,
        monotone_pass: failed_intervals.is_empty(),
        failed_intervals,
    }
}

/// Batch mean of `Z(t) = |g(X(t))|e^{−C̃t}` at evenly spaced grid times, and
/// a paired test that it does not increase beyond three standard errors.
pub fn supermartingale_diagnostic(
    batch: &[Trajectory],
    surface: &SlidingSurface,
) -> Result<SupermartingaleReport> {
    let first = batch.first().ok_or(Error::EmptySample)?;
    if batch.iter().any(|t| t.times != first.times) {
        return Err(Error::GridMismatch);
    }
    let idx = diagnostic_indices(first.len() - 1, DEFAULT_DIAGNOSTIC_POINTS);
    let times: Vec<f64> = idx.iter().map(|&k| first.times[k]).collect();
    let z: Vec<Vec<f64>> = batch
        .iter()
        .map(|tr| {
            idx.iter()
                .map(|&k| tr.g_values[k].abs() * (-surface.c_tilde * tr.times[k]).exp())
                .collect()
        })
        .collect();
    Ok(assemble_supermartingale(times, &z))
}

struct ZObserver<'a> {
    idx: &'a [usize],
    next: usize,
    c_tilde: f64,
    z: Vec<f64>,
}

impl PathObserver for ZObserver<'_> {
    fn observe(&mut self, k: usize, t: f64, _x: &[f64], g: f64, _d: &[f64]) -> ControlFlow<()> {
        if self.next < self.idx.len() && self.idx[self.next] == k {
            self.z.push(g.abs() * (-self.c_tilde * t).exp());
            self.next += 1;
        }
        ControlFlow::Continue(())
    }
}

/// Streaming form of [`supermartingale_diagnostic`] that never stores whole
/// trajectories.
pub fn supermartingale_batch(
    sim: &Simulator,
    x0: &[f64],
    n_paths: usize,
    master_seed: u64,
    points: usize,
) -> Result<SupermartingaleReport> {
    if n_paths == 0 {
        return Err(Error::EmptySample);
    }
    let grid = *sim.grid();
    let idx = diagnostic_indices(grid.n_steps(), points);
    let c_tilde = sim.system().surface().c_tilde;
    let z: Vec<Vec<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut obs = ZObserver {
                idx: &idx,
                next: 0,
                c_tilde,
                z: Vec::with_capacity(idx.len()),
            };
            let mut noise = StreamingNoise::new(master_seed, PRIMARY_CHANNEL, i, grid.dt());
            sim.integrate(x0, &mut noise, &mut obs)?;
            Ok(obs.z)
        })
        .collect::<Result<_>>()?;
    let times = idx.iter().map(|&k| grid.time(k)).collect();
    Ok(assemble_supermartingale(times, &z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn starting_on_the_surface_reaches_at_zero() {
        assert_eq!(reaching_time_series(&[0.0, 0.1], &[0.0, 0.3], 0.0), Some(0.0));
    }

    #[test]
    fn interpolates_band_entry() {
        let t = reaching_time_series(&[0.0, 1.0, 2.0], &[1.0, 0.6, 0.2], 0.4).unwrap();
        assert_abs_diff_eq!(t, 1.5, epsilon = 1e-14);
        let cross = reaching_time_series(&[0.0, 1.0], &[0.5, -0.5], 0.0).unwrap();
        assert_abs_diff_eq!(cross, 0.5, epsilon = 1e-14);
        assert_eq!(reaching_time_series(&[0.0, 1.0], &[0.5, 0.45], 0.1), None);
    }

    #[test]
    fn tail_bound_examples() {
        let b = BoundSpec::new(1.0, 0.0, 0.5).unwrap();
        assert_abs_diff_eq!(theoretical_tail_bound(&b, 1.0).unwrap(), 0.5, epsilon = 1e-15);
        let b = BoundSpec::new(1.0, 1.0, 0.1).unwrap();
        assert_abs_diff_eq!(
            theoretical_tail_bound(&b, 1.0).unwrap(),
            0.1 / (1.0 - (-1.0f64).exp()),
            epsilon = 1e-15
        );
        let zero = BoundSpec::new(1.0, 0.3, 0.0).unwrap();
        assert_eq!(theoretical_tail_bound(&zero, 2.0).unwrap(), 0.0);
        assert!(theoretical_tail_bound(&b, 0.0).is_err());
    }

    #[test]
    fn tail_estimates() {
        let all = ReachingStats::from_samples(vec![Some(0.1); 50], 1.0, 0.0, 0).unwrap();
        let e = empirical_tail(&all, 0.5, 0.99).unwrap();
        assert_eq!(e.p_hat, 0.0);
        assert_abs_diff_eq!(e.ci_upper, 1.0 - 0.01f64.powf(1.0 / 50.0), epsilon = 1e-15);
        let none = ReachingStats::from_samples(vec![None; 20], 1.0, 0.0, 0).unwrap();
        assert_eq!(empirical_tail(&none, 0.5, 0.99).unwrap().p_hat, 1.0);
    }

    #[test]
    fn verdicts() {
        let on = ReachingStats::from_samples(vec![Some(0.0); 100], 2.0, 0.0, 0).unwrap();
        let b0 = BoundSpec::new(2.0, 0.0, 0.0).unwrap();
        assert!(verify_bound(&on, &b0, &[0.5, 1.0], 0.99).unwrap().pass);
        let censored = ReachingStats::from_samples(vec![None; 100], 2.0, 0.0, 0).unwrap();
        let b = BoundSpec::new(1.0, 0.0, 0.1).unwrap();
        assert!(!verify_bound(&censored, &b, &[1.0], 0.99).unwrap().pass);
        assert!(verify_bound(&censored, &b, &[0.0], 0.99).is_err());
        assert!(verify_bound(&censored, &b, &[3.0], 0.99).is_err());
    }
}
