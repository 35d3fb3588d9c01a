//! Euler–Maruyama integration of the mollified system
//! `dX + f_eps(X) dt = σ(X) dW`.

use std::ops::ControlFlow;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filippov::{DriftEvaluation, MollifiedDrift, Mollifier};
use crate::rng::{path_rng, BlockCursor, IncrementSource, StreamingNoise, PRIMARY_CHANNEL};
use crate::systems::SystemSpec;

use rand::Rng;
use rand_distr::StandardNormal;

/// Uniform time grid on `[0, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimGrid {
    t_end: f64,
    dt: f64,
    n_steps: usize,
}

impl SimGrid {
    pub fn new(t_end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid("dt", "must be positive and finite"));
        }
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::invalid("t_end", "must be positive and finite"));
        }
        let q = t_end / dt;
        // t_end/dt that is an integer up to rounding must not gain a step
        let nearest = q.round();
        let n = if (q - nearest).abs() <= 1e-9 * q.max(1.0) {
            nearest
        } else {
            q.ceil()
        };
        if n > u32::MAX as f64 {
            return Err(Error::invalid("dt", "grid would exceed 2^32 steps"));
        }
        Ok(Self {
            t_end,
            dt,
            n_steps: (n as usize).max(1),
        })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Horizon actually covered, `n_steps · dt`.
    pub fn horizon(&self) -> f64 {
        self.time(self.n_steps)
    }
}

/// Whether `dt ≤ eps²/4`, the rule tying the time step to the mollification
/// scale so that one step of noise cannot jump across the smoothed band.
pub fn coupling_rule_holds(dt: f64, eps: f64) -> bool {
    dt <= eps * eps / 4.0
}

/// Stored Gaussian increments for one path, row-major `(step, component)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBlock {
    pub increments: Vec<f64>,
    pub dim: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub master_seed: u64,
    pub path_index: u64,
}

impl NoiseBlock {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }

    pub fn cursor(&self) -> BlockCursor<'_> {
        BlockCursor::new(&self.increments, self.dim)
    }

    pub fn mean(&self) -> f64 {
        self.increments.iter().sum::<f64>() / self.increments.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.increments.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
            / (self.increments.len() as f64 - 1.0).max(1.0)
    }

    /// `|mean| ≤ 5·sqrt(dt/N)`.
    pub fn sanity_check(&self) -> bool {
        let n = self.increments.len() as f64;
        self.mean().abs() <= 5.0 * (self.dt / n).sqrt()
    }
}

/// The increments of path `path_index`: i.i.d. `N(0, dt)`, a deterministic
/// function of the seed and index.
pub fn wiener_block(dim: usize, grid: &SimGrid, master_seed: u64, path_index: u64) -> Result<NoiseBlock> {
    wiener_block_on(dim, grid, master_seed, PRIMARY_CHANNEL, path_index)
}

pub fn wiener_block_on(
    dim: usize,
    grid: &SimGrid,
    master_seed: u64,
    channel: u64,
    path_index: u64,
) -> Result<NoiseBlock> {
    if dim == 0 {
        return Err(Error::invalid("dim", "must be at least 1"));
    }
    let mut rng = path_rng(master_seed, channel, path_index);
    let scale = grid.dt().sqrt();
    let increments = (0..grid.n_steps() * dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            scale * z
        })
        .collect();
    Ok(NoiseBlock {
        increments,
        dim,
        n_steps: grid.n_steps(),
        dt: grid.dt(),
        master_seed,
        path_index,
    })
}

/// One Euler–Maruyama step written into `out`:
/// `out_i = x_i − f_i·dt + Σ_j σ_ij dW_j`, the sum accumulated in `j` order.
#[inline]
pub fn em_step_into(
    x: &[f64],
    f_eps: &[f64],
    sigma: &[f64],
    dw: &[f64],
    dt: f64,
    step: usize,
    out: &mut [f64],
) -> Result<()> {
    let m = dw.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &sigma[i * m..(i + 1) * m];
        let mut noise = 0.0;
        for (s, w) in row.iter().zip(dw) {
            noise += s * w;
        }
        let v = x[i] - f_eps[i] * dt + noise;
        if !v.is_finite() {
            return Err(Error::NumericOverflow { step, mode: None });
        }
        *o = v;
    }
    Ok(())
}

pub fn em_step(
    x: &[f64],
    f_eps: &[f64],
    sigma: &[f64],
    dw: &[f64],
    dt: f64,
    step: usize,
) -> Result<Vec<f64>> {
    let n = x.len();
    if f_eps.len() != n || sigma.len() != n * dw.len() {
        return Err(Error::Shape(format!(
            "state {n}, drift {}, sigma {} and noise {} are inconsistent",
            f_eps.len(),
            sigma.len(),
            dw.len()
        )));
    }
    let mut out = vec![0.0; n];
    em_step_into(x, f_eps, sigma, dw, dt, step, &mut out)?;
    Ok(out)
}

/// A sampled path with its switching values and recorded drift values.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// Row-major `(n_steps + 1) × dim`.
    pub states: Vec<f64>,
    pub g_values: Vec<f64>,
    /// `f_eps(X_k)` for every recorded state, same layout as `states`.
    pub drift_samples: Vec<f64>,
    pub dim: usize,
    pub seed: u64,
    pub path_index: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn drift_sample(&self, k: usize) -> &[f64] {
        &self.drift_samples[k * self.dim..(k + 1) * self.dim]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }
}

/// Receives every state visited by an integration, including the initial one.
pub trait PathObserver {
    fn observe(&mut self, k: usize, t: f64, x: &[f64], g: f64, drift: &[f64]) -> ControlFlow<()>;
}

/// Records the whole path.
#[derive(Debug, Default)]
pub struct Recorder {
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub g_values: Vec<f64>,
    pub drift_samples: Vec<f64>,
}

impl Recorder {
    pub fn with_capacity(steps: usize, dim: usize) -> Self {
        Self {
            times: Vec::with_capacity(steps + 1),
            states: Vec::with_capacity((steps + 1) * dim),
            g_values: Vec::with_capacity(steps + 1),
            drift_samples: Vec::with_capacity((steps + 1) * dim),
        }
    }
}

impl PathObserver for Recorder {
    fn observe(&mut self, _k: usize, t: f64, x: &[f64], g: f64, drift: &[f64]) -> ControlFlow<()> {
        self.times.push(t);
        self.states.extend_from_slice(x);
        self.g_values.push(g);
        self.drift_samples.extend_from_slice(drift);
        ControlFlow::Continue(())
    }
}

/// A system bound to a mollification scale and a grid.
pub struct Simulator<'a> {
    system: &'a SystemSpec,
    drift: MollifiedDrift<'a>,
    grid: SimGrid,
}

impl<'a> Simulator<'a> {
    pub fn new(
        system: &'a SystemSpec,
        mollifier: &'a Mollifier,
        eps: f64,
        grid: SimGrid,
        evaluation: DriftEvaluation,
    ) -> Result<Self> {
        let drift = MollifiedDrift::new(system.drift(), mollifier, eps, evaluation)?;
        Ok(Self { system, drift, grid })
    }

    pub fn system(&self) -> &SystemSpec {
        self.system
    }

    pub fn grid(&self) -> &SimGrid {
        &self.grid
    }

    pub fn eps(&self) -> f64 {
        self.drift.eps()
    }

    pub fn mollified_drift(&self) -> &MollifiedDrift<'a> {
        &self.drift
    }

    /// Runs the scheme from `x0`, feeding each visited state to `observer`
    /// until it breaks or the grid ends. Returns the index of the last
    /// observed state.
    pub fn integrate(
        &self,
        x0: &[f64],
        noise: &mut impl IncrementSource,
        observer: &mut impl PathObserver,
    ) -> Result<usize> {
        let n = self.system.dim();
        let m = self.system.noise_dim();
        if x0.len() != n {
            return Err(Error::Shape(format!("x0 has length {}, expected {n}", x0.len())));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("x0", "must be finite"));
        }
        let surface = self.system.surface();
        let dt = self.grid.dt();
        let mut x = x0.to_vec();
        let mut next = vec![0.0; n];
        let mut f = vec![0.0; n];
        let mut sigma = vec![0.0; n * m];
        let mut dw = vec![0.0; m];
        let constant_sigma = self.system.sigma_is_constant();
        if constant_sigma {
            self.system.eval_sigma(&x, &mut sigma);
        }
        for k in 0..=self.grid.n_steps() {
            let g = surface.g(&x);
            self.drift.eval(&x, &mut f);
            if observer.observe(k, self.grid.time(k), &x, g, &f).is_break() || k == self.grid.n_steps() {
                return Ok(k);
            }
            noise.fill(&mut dw);
            if !constant_sigma {
                self.system.eval_sigma(&x, &mut sigma);
            }
            em_step_into(&x, &f, &sigma, &dw, dt, k + 1, &mut next)?;
            std::mem::swap(&mut x, &mut next);
        }
        unreachable!("loop returns at the last grid index")
    }

    /// Full trajectory driven by a stored noise block.
    pub fn simulate(&self, x0: &[f64], noise: &NoiseBlock) -> Result<Trajectory> {
        if noise.dim != self.system.noise_dim() || noise.n_steps < self.grid.n_steps() {
            return Err(Error::Shape(format!(
                "noise block {}x{} does not cover {} steps of a {}-dimensional noise",
                noise.n_steps,
                noise.dim,
                self.grid.n_steps(),
                self.system.noise_dim()
            )));
        }
        let mut rec = Recorder::with_capacity(self.grid.n_steps(), self.system.dim());
        self.integrate(x0, &mut noise.cursor(), &mut rec)?;
        Ok(self.trajectory_from(rec, noise.master_seed, noise.path_index))
    }

    /// Full trajectory with increments drawn on the fly; identical to
    /// [`Self::simulate`] with the matching [`wiener_block`].
    pub fn simulate_streaming(&self, x0: &[f64], master_seed: u64, path_index: u64) -> Result<Trajectory> {
        let mut noise = StreamingNoise::new(master_seed, PRIMARY_CHANNEL, path_index, self.grid.dt());
        let mut rec = Recorder::with_capacity(self.grid.n_steps(), self.system.dim());
        self.integrate(x0, &mut noise, &mut rec)?;
        Ok(self.trajectory_from(rec, master_seed, path_index))
    }

    fn trajectory_from(&self, rec: Recorder, seed: u64, path_index: u64) -> Trajectory {
        Trajectory {
            times: rec.times,
            states: rec.states,
            g_values: rec.g_values,
            drift_samples: rec.drift_samples,
            dim: self.system.dim(),
            seed,
            path_index,
        }
    }

    /// Paths `0..n_paths`, simulated in parallel and returned in index order.
    pub fn simulate_batch(&self, x0: &[f64], n_paths: usize, master_seed: u64) -> Result<Vec<Trajectory>> {
        (0..n_paths as u64)
            .into_par_iter()
            .map(|i| self.simulate_streaming(x0, master_seed, i))
            .collect()
    }
}

/// Mollified trajectory with quadrature evaluated directly at every step.
pub fn simulate_path(
    s: &SystemSpec,
    eps: f64,
    grid: &SimGrid,
    x0: &[f64],
    noise: &NoiseBlock,
) -> Result<Trajectory> {
    Simulator::new(s, Mollifier::standard(), eps, *grid, DriftEvaluation::Direct)?.simulate(x0, noise)
}

/// Lags, in steps, used by the increment regression.
pub const DEFAULT_LAGS: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Clone, PartialEq)]
pub struct MomentStats {
    /// Batch mean of `sup_t |X(t)|²`.
    pub sup_moment: f64,
    /// Least-squares `C` in `E|X(t) − X(s)|² ≈ C |t − s|` through the origin.
    pub increment_constant: f64,
    /// Log–log slope of the mean-square increment against the lag; `None`
    /// when the increments vanish.
    pub increment_exponent: Option<f64>,
    /// `(lag in time units, mean-square increment)`.
    pub lag_table: Vec<(f64, f64)>,
}

pub fn moment_statistics(batch: &[Trajectory]) -> Result<MomentStats> {
    moment_statistics_with_lags(batch, &DEFAULT_LAGS)
}

pub fn moment_statistics_with_lags(batch: &[Trajectory], lags: &[usize]) -> Result<MomentStats> {
    let first = batch.first().ok_or(Error::EmptySample)?;
    if batch.iter().any(|t| t.times != first.times || t.dim != first.dim) {
        return Err(Error::GridMismatch);
    }
    let len = first.len();
    let dt = if len > 1 {
        first.times[1] - first.times[0]
    } else {
        0.0
    };
    let sup_moment = batch
        .iter()
        .map(|t| {
            t.states
                .chunks_exact(t.dim)
                .map(|x| x.iter().map(|v| v * v).sum::<f64>())
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / batch.len() as f64;
    let mut lag_table = Vec::new();
    for &lag in lags.iter().filter(|&&l| l >= 1 && l < len) {
        let mut acc = 0.0;
        let mut count = 0usize;
        for t in batch {
            for k in 0..len - lag {
                let (a, b) = (t.state(k), t.state(k + lag));
                acc += a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>();
                count += 1;
            }
        }
        lag_table.push((lag as f64 * dt, acc / count as f64));
    }
    let (sxy, sxx) = lag_table
        .iter()
        .fold((0.0, 0.0), |(sxy, sxx), (h, v)| (sxy + h * v, sxx + h * h));
    let increment_constant = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let increment_exponent = if lag_table.len() >= 2 && lag_table.iter().all(|(_, v)| *v > 0.0) {
        let pts: Vec<(f64, f64)> = lag_table.iter().map(|(h, v)| (h.ln(), v.ln())).collect();
        Some(crate::stats::linear_fit(&pts).slope)
    } else {
        None
    };
    Ok(MomentStats {
        sup_moment,
        increment_constant,
        increment_exponent,
        lag_table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filippov::{JumpDrift, LinearGrowth, SwitchedAffine};
    use crate::systems::{Diffusion, SlidingSurface};
    use approx::assert_abs_diff_eq;

    fn identity_system(sigma: f64) -> SystemSpec {
        let drift = JumpDrift::affine(SwitchedAffine {
            matrix: vec![1.0],
            upper_offset: vec![0.0],
            lower_offset: vec![0.0],
            normal: vec![1.0],
            level: 0.0,
        })
        .unwrap();
        let surface = SlidingSurface::linear(vec![1.0], 0.0, 1.0).unwrap();
        SystemSpec::new(drift, surface, Diffusion::Constant(vec![sigma]), 1).unwrap()
    }

    #[test]
    fn grid_step_count() {
        assert_eq!(SimGrid::new(1.0, 1e-4).unwrap().n_steps(), 10_000);
        assert_eq!(SimGrid::new(1.0, 0.3).unwrap().n_steps(), 4);
        assert!(SimGrid::new(1.0, 0.0).is_err());
        let g = SimGrid::new(4.0, 1e-4).unwrap();
        assert!(g.horizon() >= 4.0 * (1.0 - 1e-12));
    }

    #[test]
    fn em_step_formula() {
        let x = [0.7, -0.2];
        assert_eq!(
            em_step(&x, &[0.0, 0.0], &[0.0, 0.0], &[0.5], 0.1, 1).unwrap(),
            x.to_vec()
        );
        let y = em_step(&[2.0], &[2.0], &[0.0], &[0.3], 0.01, 1).unwrap();
        assert_eq!(y[0], 2.0 * (1.0 - 0.01));
        let err = em_step(&[f64::MAX], &[-f64::MAX], &[0.0], &[0.0], 10.0, 17).unwrap_err();
        assert_eq!(err, Error::NumericOverflow { step: 17, mode: None });
    }

    #[test]
    fn linear_decay_matches_exponential() {
        let s = identity_system(0.0);
        let grid = SimGrid::new(1.0, 1e-4).unwrap();
        let noise = wiener_block(1, &grid, 0, 0).unwrap();
        let tr = simulate_path(&s, 0.01, &grid, &[1.0], &noise).unwrap();
        assert_abs_diff_eq!(tr.final_state()[0], (-1.0f64).exp(), epsilon = 1e-3);
        assert_eq!(tr.len(), grid.n_steps() + 1);
    }

    #[test]
    fn streaming_matches_block() {
        let s = identity_system(0.4);
        let grid = SimGrid::new(0.5, 1e-3).unwrap();
        let sim = Simulator::new(&s, Mollifier::standard(), 0.05, grid, DriftEvaluation::Direct).unwrap();
        let block = wiener_block(1, &grid, 9, 5).unwrap();
        assert_eq!(
            sim.simulate(&[0.3], &block).unwrap(),
            sim.simulate_streaming(&[0.3], 9, 5).unwrap()
        );
    }

    #[test]
    fn constant_paths_have_zero_increments() {
        let s = identity_system(0.0);
        let grid = SimGrid::new(0.1, 1e-2).unwrap();
        let sim = Simulator::new(&s, Mollifier::standard(), 0.05, grid, DriftEvaluation::Direct).unwrap();
        let batch = sim.simulate_batch(&[0.0], 4, 1).unwrap();
        let st = moment_statistics(&batch).unwrap();
        assert_eq!(st.sup_moment, 0.0);
        assert_eq!(st.increment_constant, 0.0);
        assert!(st.increment_exponent.is_none());
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let s = identity_system(0.1);
        let g1 = SimGrid::new(0.1, 1e-2).unwrap();
        let g2 = SimGrid::new(0.2, 1e-2).unwrap();
        let a = Simulator::new(&s, Mollifier::standard(), 0.05, g1, DriftEvaluation::Direct)
            .unwrap()
            .simulate_streaming(&[0.0], 0, 0)
            .unwrap();
        let b = Simulator::new(&s, Mollifier::standard(), 0.05, g2, DriftEvaluation::Direct)
            .unwrap()
            .simulate_streaming(&[0.0], 0, 0)
            .unwrap();
        assert_eq!(moment_statistics(&[a, b]).unwrap_err(), Error::GridMismatch);
        assert_eq!(moment_statistics(&[]).unwrap_err(), Error::EmptySample);
    }

    #[test]
    fn growth_constants_survive_with_growth() {
        let s = identity_system(0.0);
        let g = s.drift().growth();
        assert_eq!(g, LinearGrowth { a1: 1.0, a2: 0.0 });
    }
}
