//! Spectral-Galerkin simulation of the stochastic heat equation
//!
//! ```text
//! dX − ΔX dt + f_eps(X) dt = b(X) dW      on (0, L), X = 0 at the ends,
//! ```
//!
//! and of its two-field coupled variant. States are stored as sine-mode
//! coefficients. Nonlinear terms are evaluated on an equispaced interior
//! collocation grid and projected back; the Laplacian is treated implicitly.

use std::f64::consts::PI;
use std::fmt;
use std::ops::ControlFlow;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filippov::{DriftEvaluation, DriftForm, JumpDrift, MollifiedDrift, Mollifier, ScalarField};
use crate::rng::{IncrementSource, StreamingNoise, PRIMARY_CHANNEL, SECONDARY_CHANNEL};
use crate::sde::SimGrid;
use crate::stats::linear_fit;

/// Dirichlet eigenpairs of `−Δ` on `(0, L)` with collocation machinery.
pub struct Eigensystem {
    length: f64,
    n_modes: usize,
    n_grid: usize,
    lambdas: Vec<f64>,
    basis: OnceLock<Vec<f64>>,
}

impl fmt::Debug for Eigensystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Eigensystem")
            .field("length", &self.length)
            .field("n_modes", &self.n_modes)
            .field("n_grid", &self.n_grid)
            .finish()
    }
}

pub fn build_eigensystem(length: f64, n_modes: usize, n_grid: usize) -> Result<Eigensystem> {
    if !(length > 0.0 && length.is_finite()) {
        return Err(Error::invalid("L", "must be positive and finite"));
    }
    if n_modes == 0 {
        return Err(Error::invalid("n_modes", "must be at least 1"));
    }
    if n_grid < 4 * n_modes {
        return Err(Error::invalid(
            "n_grid",
            format!("needs at least 4 points per mode ({} < {})", n_grid, 4 * n_modes),
        ));
    }
    let lambdas = (1..=n_modes).map(|j| (j as f64 * PI / length).powi(2)).collect();
    Ok(Eigensystem {
        length,
        n_modes,
        n_grid,
        lambdas,
        basis: OnceLock::new(),
    })
}

impl Eigensystem {
    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn n_grid(&self) -> usize {
        self.n_grid
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Interior grid point `ξ_m = m L/(M+1)`, `m = 1..=M`.
    pub fn grid_point(&self, m: usize) -> f64 {
        m as f64 * self.length / (self.n_grid + 1) as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (1..=self.n_grid).map(|m| self.grid_point(m)).collect()
    }

    /// Quadrature weight of every grid point.
    pub fn weight(&self) -> f64 {
        self.length / (self.n_grid + 1) as f64
    }

    /// `e_j(ξ) = sqrt(2/L)·sin(jπξ/L)`, `j ≥ 1`.
    pub fn eigenfunction(&self, j: usize, xi: f64) -> f64 {
        (2.0 / self.length).sqrt() * (j as f64 * PI * xi / self.length).sin()
    }

    /// Row-major `J × M` table of `e_j(ξ_m)`.
    fn basis(&self) -> &[f64] {
        self.basis.get_or_init(|| {
            let (j_max, m_max) = (self.n_modes, self.n_grid);
            let amp = (2.0 / self.length).sqrt();
            let mut table = vec![0.0; j_max * m_max];
            for j in 1..=j_max {
                for m in 1..=m_max {
                    // reduce the angle index exactly before scaling
                    let k = (j * m) % (2 * (m_max + 1));
                    table[(j - 1) * m_max + (m - 1)] = amp * (PI * k as f64 / (m_max + 1) as f64).sin();
                }
            }
            table
        })
    }

    /// Collocation values `Σ_j a_j e_j(ξ_m)`.
    pub fn synthesize(&self, coefficients: &[f64], values: &mut [f64]) {
        let m_max = self.n_grid;
        values.fill(0.0);
        for (row, &a) in self.basis().chunks_exact(m_max).zip(coefficients) {
            if a != 0.0 {
                for (v, e) in values.iter_mut().zip(row) {
                    *v += a * e;
                }
            }
        }
    }

    /// Quadrature projection `⟨h, e_j⟩` onto the first `J` modes.
    pub fn project(&self, values: &[f64], coefficients: &mut [f64]) {
        let w = self.weight();
        for (c, row) in coefficients
            .iter_mut()
            .zip(self.basis().chunks_exact(self.n_grid))
        {
            *c = w * row.iter().zip(values).map(|(e, h)| e * h).sum::<f64>();
        }
    }

    /// Discrete `L²` norm of collocation values.
    pub fn l2_norm(&self, values: &[f64]) -> f64 {
        (self.weight() * values.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }
}

/// Coefficients `μ_j` of the noise expansion `W = Σ μ_j β_j e_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub mu: Vec<f64>,
}

impl NoiseSpec {
    pub fn new(mu: Vec<f64>) -> Result<Self> {
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mu", "must be finite"));
        }
        Ok(Self { mu })
    }

    /// `μ_j = j^(−p)` for `j = 1..=n`.
    pub fn power_law(n: usize, p: f64) -> Self {
        Self {
            mu: (1..=n).map(|j| (j as f64).powf(-p)).collect(),
        }
    }

    /// The default decay `μ_j = j⁻³`.
    pub fn default_for(n: usize) -> Self {
        Self::power_law(n, 3.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseRegularity {
    /// `Σ_{j≤J} μ_j² λ_j²`.
    pub partial_sum: f64,
    /// Fitted exponent `p` in `μ_j²λ_j² ~ j^p` over the upper half of the
    /// modes; `None` when fewer than two terms are nonzero.
    pub decay_exponent: Option<f64>,
    pub convergent: bool,
}

/// Checks that `Σ μ_j²λ_j²` converges, by partial sum and a log–log tail fit.
pub fn check_noise_regularity(ns: &NoiseSpec, es: &Eigensystem) -> NoiseRegularity {
    let n = ns.mu.len().min(es.n_modes());
    let terms: Vec<f64> = (0..n).map(|j| (ns.mu[j] * es.lambdas[j]).powi(2)).collect();
    let partial_sum = terms.iter().sum();
    let start = if n >= 8 { n / 2 } else { 0 };
    let pts: Vec<(f64, f64)> = (start..n)
        .filter(|&j| terms[j] > 0.0)
        .map(|j| (((j + 1) as f64).ln(), terms[j].ln()))
        .collect();
    let decay_exponent = (pts.len() >= 2).then(|| linear_fit(&pts).slope);
    NoiseRegularity {
        partial_sum,
        decay_exponent,
        convergent: decay_exponent.is_none_or(|p| p < -1.0),
    }
}

/// A state given by its sine coefficients, with cached collocation values.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    pub coefficients: Vec<f64>,
    pub values: Vec<f64>,
}

impl SpectralField {
    pub fn from_coefficients(es: &Eigensystem, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() != es.n_modes() {
            return Err(Error::Shape(format!(
                "expected {} coefficients, got {}",
                es.n_modes(),
                coefficients.len()
            )));
        }
        let mut values = vec![0.0; es.n_grid()];
        es.synthesize(&coefficients, &mut values);
        Ok(Self { coefficients, values })
    }

    pub fn zero(es: &Eigensystem) -> Self {
        Self {
            coefficients: vec![0.0; es.n_modes()],
            values: vec![0.0; es.n_grid()],
        }
    }

    /// `scale · e_j`.
    pub fn mode(es: &Eigensystem, j: usize, scale: f64) -> Result<Self> {
        if j == 0 || j > es.n_modes() {
            return Err(Error::invalid(
                "mode",
                format!("must lie in 1..={}", es.n_modes()),
            ));
        }
        let mut c = vec![0.0; es.n_modes()];
        c[j - 1] = scale;
        Self::from_coefficients(es, c)
    }

    /// Galerkin projection of a function sampled on the grid.
    pub fn from_function(es: &Eigensystem, f: impl Fn(f64) -> f64) -> Self {
        let samples: Vec<f64> = es.grid().into_iter().map(f).collect();
        let mut c = vec![0.0; es.n_modes()];
        es.project(&samples, &mut c);
        Self::from_coefficients(es, c).expect("projection has the right length")
    }

    pub fn l2_norm(&self, es: &Eigensystem) -> f64 {
        es.l2_norm(&self.values)
    }
}

/// A heat-equation scenario with one field or two coupled fields. The drift
/// has the same dimension as the number of fields; `noise_coefficients[i]`
/// multiplies the noise of field `i` and sees all field values at a point.
#[derive(Clone)]
pub struct SpdeScenario {
    pub eigensystem: Arc<Eigensystem>,
    pub noise: NoiseSpec,
    pub grid: SimGrid,
    pub drift: JumpDrift,
    pub noise_coefficients: Vec<ScalarField>,
    pub x0: Vec<SpectralField>,
    /// Lipschitz constant of the switching function, used for the band.
    pub g_lipschitz: f64,
}

impl fmt::Debug for SpdeScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpdeScenario")
            .field("eigensystem", &self.eigensystem)
            .field("fields", &self.x0.len())
            .field("grid", &self.grid)
            .field("drift", &self.drift)
            .finish()
    }
}

impl SpdeScenario {
    pub fn scalar(
        eigensystem: Arc<Eigensystem>,
        noise: NoiseSpec,
        grid: SimGrid,
        drift: JumpDrift,
        b: impl Fn(f64) -> f64 + Send + Sync + 'static,
        x0: SpectralField,
    ) -> Result<Self> {
        Self::build(
            eigensystem,
            noise,
            grid,
            drift,
            vec![Arc::new(move |r: &[f64]| b(r[0]))],
            vec![x0],
        )
    }

    pub fn coupled(
        eigensystem: Arc<Eigensystem>,
        noise: NoiseSpec,
        grid: SimGrid,
        drift: JumpDrift,
        b: [ScalarField; 2],
        x0: SpectralField,
        y0: SpectralField,
    ) -> Result<Self> {
        let [b1, b2] = b;
        Self::build(eigensystem, noise, grid, drift, vec![b1, b2], vec![x0, y0])
    }

    fn build(
        eigensystem: Arc<Eigensystem>,
        noise: NoiseSpec,
        grid: SimGrid,
        drift: JumpDrift,
        noise_coefficients: Vec<ScalarField>,
        x0: Vec<SpectralField>,
    ) -> Result<Self> {
        let c = x0.len();
        if drift.dim() != c || noise_coefficients.len() != c {
            return Err(Error::Shape(format!(
                "{c} field(s) need a {c}-dimensional drift and {c} noise coefficient(s)"
            )));
        }
        if noise.mu.len() < eigensystem.n_modes() {
            return Err(Error::Shape(format!(
                "noise has {} coefficients for {} modes",
                noise.mu.len(),
                eigensystem.n_modes()
            )));
        }
        for f in &x0 {
            if f.coefficients.len() != eigensystem.n_modes() || f.values.len() != eigensystem.n_grid() {
                return Err(Error::Shape(
                    "initial field does not match the eigensystem".into(),
                ));
            }
        }
        let probe = vec![0.1; c];
        for b in &noise_coefficients {
            if !b(&probe).is_finite() {
                return Err(Error::invalid("b", "must be finite"));
            }
        }
        let g_lipschitz = switch_lipschitz(&drift);
        Ok(Self {
            eigensystem,
            noise,
            grid,
            drift,
            noise_coefficients,
            x0,
            g_lipschitz,
        })
    }

    pub fn n_fields(&self) -> usize {
        self.x0.len()
    }

    /// `|g(x0)|₂`.
    pub fn initial_g_norm(&self) -> f64 {
        let es = &self.eigensystem;
        let c = self.n_fields();
        let mut r = vec![0.0; c];
        let vals: Vec<f64> = (0..es.n_grid())
            .map(|m| {
                for (ri, f) in r.iter_mut().zip(&self.x0) {
                    *ri = f.values[m];
                }
                self.drift.switch(&r)
            })
            .collect();
        es.l2_norm(&vals)
    }

    /// `|x0|₂`, summed over fields.
    pub fn initial_norm(&self) -> f64 {
        self.x0
            .iter()
            .map(|f| f.l2_norm(&self.eigensystem).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Default reaching band `(sqrt(dt) + eps)·Lip(g)·|x0|₂`.
    pub fn default_band(&self, eps: f64) -> f64 {
        (self.grid.dt().sqrt() + eps) * self.g_lipschitz * self.initial_norm()
    }
}

/// Lipschitz constant of the switching function: exact for linear switches,
/// otherwise the largest sampled difference quotient on `[−2, 2]^n`.
fn switch_lipschitz(drift: &JumpDrift) -> f64 {
    if let DriftForm::Affine(sa) = drift.form() {
        return crate::filippov::norm(&sa.normal);
    }
    let n = drift.dim();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..512u32 {
        let p: Vec<f64> = (0..n)
            .map(|d| -2.0 + 4.0 * sobol_burley::sample(i, d as u32, 11) as f64)
            .collect();
        let mut grad2 = 0.0;
        for d in 0..n {
            let mut a = p.clone();
            let mut b = p.clone();
            a[d] += h;
            b[d] -= h;
            grad2 += ((drift.switch(&a) - drift.switch(&b)) / (2.0 * h)).powi(2);
        }
        worst = worst.max(grad2.sqrt());
    }
    worst
}

/// Diagnostics of one recorded state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpdeSample {
    pub t: f64,
    /// `|X(t)|₂` (both fields together when coupled).
    pub energy: f64,
    /// `|g(X(t))|₂`.
    pub g_norm: f64,
}

pub trait SpdeObserver {
    fn observe(&mut self, k: usize, sample: SpdeSample, fields: &[SpectralField]) -> ControlFlow<()>;
}

/// Output of a full simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdeRun {
    pub times: Vec<f64>,
    pub energy: Vec<f64>,
    pub g_norm: Vec<f64>,
    /// Modal coefficients per field per recorded time, when requested.
    pub fields: Vec<Vec<Vec<f64>>>,
    pub seed: u64,
    pub path_index: u64,
}

struct RunRecorder {
    run: SpdeRun,
    keep_fields: bool,
}

impl SpdeObserver for RunRecorder {
    fn observe(&mut self, _k: usize, s: SpdeSample, fields: &[SpectralField]) -> ControlFlow<()> {
        self.run.times.push(s.t);
        self.run.energy.push(s.energy);
        self.run.g_norm.push(s.g_norm);
        if self.keep_fields {
            self.run
                .fields
                .push(fields.iter().map(|f| f.coefficients.clone()).collect());
        }
        ControlFlow::Continue(())
    }
}

/// Scratch buffers for one stepping thread.
struct Workspace {
    r: Vec<f64>,
    f: Vec<f64>,
    noise_vals: Vec<Vec<f64>>,
    update: Vec<Vec<f64>>,
    modal: Vec<f64>,
    proj: Vec<f64>,
    g_vals: Vec<f64>,
}

impl Workspace {
    fn new(es: &Eigensystem, c: usize) -> Self {
        Self {
            r: vec![0.0; c],
            f: vec![0.0; c],
            noise_vals: vec![vec![0.0; es.n_grid()]; c],
            update: vec![vec![0.0; es.n_grid()]; c],
            modal: vec![0.0; es.n_modes()],
            proj: vec![0.0; es.n_modes()],
            g_vals: vec![0.0; es.n_grid()],
        }
    }
}

/// A scenario bound to a mollification scale.
pub struct SpdeSimulator<'a> {
    scen: &'a SpdeScenario,
    drift: MollifiedDrift<'a>,
}

impl<'a> SpdeSimulator<'a> {
    /// Refuses a noise expansion whose regularity sum diverges unless
    /// `allow_divergent_noise` is set.
    pub fn new(scen: &'a SpdeScenario, eps: f64, allow_divergent_noise: bool) -> Result<Self> {
        let reg = check_noise_regularity(&scen.noise, &scen.eigensystem);
        if !reg.convergent && !allow_divergent_noise {
            return Err(Error::DivergentNoise {
                exponent: reg.decay_exponent.unwrap_or(f64::NAN),
            });
        }
        let drift = MollifiedDrift::new(&scen.drift, Mollifier::standard(), eps, DriftEvaluation::Table)?;
        Ok(Self { scen, drift })
    }

    pub fn scenario(&self) -> &SpdeScenario {
        self.scen
    }

    fn diagnostics(&self, t: f64, fields: &[SpectralField], ws: &mut Workspace) -> SpdeSample {
        let es = &self.scen.eigensystem;
        let mut energy2 = 0.0;
        for f in fields {
            energy2 += es.l2_norm(&f.values).powi(2);
        }
        for m in 0..es.n_grid() {
            for (ri, f) in ws.r.iter_mut().zip(fields) {
                *ri = f.values[m];
            }
            ws.g_vals[m] = self.scen.drift.switch(&ws.r);
        }
        SpdeSample {
            t,
            energy: energy2.sqrt(),
            g_norm: es.l2_norm(&ws.g_vals),
        }
    }

    /// One semi-implicit step; `dw[i]` holds the modal increments of field `i`.
    fn step_with(
        &self,
        fields: &mut [SpectralField],
        dw: &[Vec<f64>],
        dt: f64,
        step: usize,
        ws: &mut Workspace,
    ) -> Result<()> {
        let es = &self.scen.eigensystem;
        let mu = &self.scen.noise.mu;
        for (i, vals) in ws.noise_vals.iter_mut().enumerate() {
            for ((m, &w), &u) in ws.modal.iter_mut().zip(&dw[i]).zip(mu) {
                *m = u * w;
            }
            es.synthesize(&ws.modal, vals);
        }
        for m in 0..es.n_grid() {
            for (ri, f) in ws.r.iter_mut().zip(fields.iter()) {
                *ri = f.values[m];
            }
            self.drift.eval(&ws.r, &mut ws.f);
            for i in 0..fields.len() {
                let b = (self.scen.noise_coefficients[i])(&ws.r);
                ws.update[i][m] = -dt * ws.f[i] + b * ws.noise_vals[i][m];
            }
        }
        for (field, upd) in fields.iter_mut().zip(&ws.update) {
            es.project(upd, &mut ws.proj);
            for (j, (a, (p, lam))) in field
                .coefficients
                .iter_mut()
                .zip(ws.proj.iter().zip(es.lambdas()))
                .enumerate()
            {
                let v = (*a + p) / (1.0 + lam * dt);
                if !v.is_finite() {
                    return Err(Error::NumericOverflow {
                        step,
                        mode: Some(j + 1),
                    });
                }
                *a = v;
            }
            es.synthesize(&field.coefficients, &mut field.values);
        }
        Ok(())
    }

    /// Runs path `path_index`, passing every recorded state to `observer`.
    pub fn integrate(
        &self,
        master_seed: u64,
        path_index: u64,
        observer: &mut impl SpdeObserver,
    ) -> Result<usize> {
        let es = &self.scen.eigensystem;
        let grid = &self.scen.grid;
        let dt = grid.dt();
        let c = self.scen.n_fields();
        let channels = [PRIMARY_CHANNEL, SECONDARY_CHANNEL];
        let mut sources: Vec<StreamingNoise> = (0..c)
            .map(|i| StreamingNoise::new(master_seed, channels[i], path_index, dt))
            .collect();
        let mut fields = self.scen.x0.clone();
        let mut ws = Workspace::new(es, c);
        let mut dw = vec![vec![0.0; es.n_modes()]; c];
        for k in 0..=grid.n_steps() {
            let sample = self.diagnostics(grid.time(k), &fields, &mut ws);
            if observer.observe(k, sample, &fields).is_break() || k == grid.n_steps() {
                return Ok(k);
            }
            for (src, d) in sources.iter_mut().zip(dw.iter_mut()) {
                src.fill(d);
            }
            self.step_with(&mut fields, &dw, dt, k + 1, &mut ws)?;
        }
        unreachable!("loop returns at the last grid index")
    }

    pub fn simulate(&self, master_seed: u64, path_index: u64, keep_fields: bool) -> Result<SpdeRun> {
        let mut rec = RunRecorder {
            run: SpdeRun {
                times: Vec::new(),
                energy: Vec::new(),
                g_norm: Vec::new(),
                fields: Vec::new(),
                seed: master_seed,
                path_index,
            },
            keep_fields,
        };
        self.integrate(master_seed, path_index, &mut rec)?;
        Ok(rec.run)
    }

    pub fn simulate_batch(&self, n_paths: usize, master_seed: u64) -> Result<Vec<SpdeRun>> {
        (0..n_paths as u64)
            .into_par_iter()
            .map(|i| self.simulate(master_seed, i, false))
            .collect()
    }
}

/// One semi-implicit step of a single-field scenario with modal increments
/// `dw`.
pub fn spde_step(
    state: &SpectralField,
    scen: &SpdeScenario,
    eps: f64,
    dw: &[f64],
    dt: f64,
) -> Result<SpectralField> {
    if scen.n_fields() != 1 {
        return Err(Error::Shape("spde_step takes a single-field scenario".into()));
    }
    let es = &scen.eigensystem;
    if dw.len() != es.n_modes() || state.coefficients.len() != es.n_modes() {
        return Err(Error::Shape(
            "state and increments must have one entry per mode".into(),
        ));
    }
    let sim = SpdeSimulator::new(scen, eps, true)?;
    let mut ws = Workspace::new(es, 1);
    let mut fields = [state.clone()];
    sim.step_with(&mut fields, &[dw.to_vec()], dt, 1, &mut ws)?;
    let [out] = fields;
    Ok(out)
}

/// Single-field simulation with the full modal trajectory recorded.
pub fn simulate_spde(
    scen: &SpdeScenario,
    eps: f64,
    master_seed: u64,
    path_index: u64,
    allow_divergent_noise: bool,
) -> Result<SpdeRun> {
    if scen.n_fields() != 1 {
        return Err(Error::Shape("simulate_spde takes a single-field scenario".into()));
    }
    SpdeSimulator::new(scen, eps, allow_divergent_noise)?.simulate(master_seed, path_index, true)
}

/// Two-field simulation with independent noises on the two fields.
pub fn simulate_coupled(
    scen: &SpdeScenario,
    eps: f64,
    master_seed: u64,
    path_index: u64,
    allow_divergent_noise: bool,
) -> Result<SpdeRun> {
    if scen.n_fields() != 2 {
        return Err(Error::Shape("simulate_coupled takes a two-field scenario".into()));
    }
    SpdeSimulator::new(scen, eps, allow_divergent_noise)?.simulate(master_seed, path_index, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filippov::SwitchedAffine;
    use approx::assert_abs_diff_eq;

    pub(crate) fn sign_drift(alpha: f64) -> JumpDrift {
        JumpDrift::affine(SwitchedAffine {
            matrix: vec![0.0],
            upper_offset: vec![alpha],
            lower_offset: vec![-alpha],
            normal: vec![1.0],
            level: 0.0,
        })
        .unwrap()
    }

    #[test]
    fn eigenvalues() {
        let es = build_eigensystem(PI, 4, 16).unwrap();
        assert_abs_diff_eq!(es.lambdas()[0], 1.0, epsilon = 1e-14);
        let es = build_eigensystem(1.0, 3, 12).unwrap();
        assert_abs_diff_eq!(es.lambdas()[2], 9.0 * PI * PI, epsilon = 1e-12);
        assert!(build_eigensystem(1.0, 8, 31).is_err());
    }

    #[test]
    fn gram_matrix_is_identity() {
        let es = build_eigensystem(PI, 16, 64).unwrap();
        let rows: Vec<Vec<f64>> = (1..=16)
            .map(|j| es.grid().iter().map(|&x| es.eigenfunction(j, x)).collect())
            .collect();
        for i in 0..16 {
            for j in 0..16 {
                let dot: f64 = es.weight() * rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>();
                assert_abs_diff_eq!(dot, if i == j { 1.0 } else { 0.0 }, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn values_and_coefficients_round_trip() {
        let es = build_eigensystem(2.0, 8, 40).unwrap();
        let coeffs: Vec<f64> = (0..8).map(|j| 1.0 / (j as f64 + 1.0)).collect();
        let f = SpectralField::from_coefficients(&es, coeffs.clone()).unwrap();
        let mut back = vec![0.0; 8];
        es.project(&f.values, &mut back);
        for (a, b) in coeffs.iter().zip(&back) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn regularity_examples() {
        let es = build_eigensystem(PI, 64, 256).unwrap();
        let r = check_noise_regularity(&NoiseSpec::default_for(64), &es);
        assert!(r.convergent);
        assert_abs_diff_eq!(r.decay_exponent.unwrap(), -2.0, epsilon = 1e-9);
        let flat = check_noise_regularity(&NoiseSpec::new(vec![1.0; 64]).unwrap(), &es);
        assert!(!flat.convergent);
        let zero = check_noise_regularity(&NoiseSpec::new(vec![0.0; 64]).unwrap(), &es);
        assert_eq!(zero.partial_sum, 0.0);
        assert!(zero.convergent);
    }

    #[test]
    fn single_step_damps_first_mode() {
        let es = Arc::new(build_eigensystem(PI, 8, 32).unwrap());
        let grid = SimGrid::new(1.0, 0.01).unwrap();
        let x0 = SpectralField::mode(&es, 1, 1.0).unwrap();
        let scen = SpdeScenario::scalar(
            es.clone(),
            NoiseSpec::default_for(8),
            grid,
            sign_drift(0.0),
            |_| 0.0,
            x0.clone(),
        )
        .unwrap();
        let out = spde_step(&x0, &scen, 0.05, &[0.3; 8], 0.01).unwrap();
        assert_abs_diff_eq!(out.coefficients[0], 1.0 / 1.01, epsilon = 1e-14);
    }

    #[test]
    fn divergent_noise_is_refused() {
        let es = Arc::new(build_eigensystem(PI, 8, 32).unwrap());
        let grid = SimGrid::new(0.1, 0.01).unwrap();
        let scen = SpdeScenario::scalar(
            es.clone(),
            NoiseSpec::new(vec![1.0; 8]).unwrap(),
            grid,
            sign_drift(1.0),
            |r| 0.1 * r,
            SpectralField::zero(&es),
        )
        .unwrap();
        assert!(matches!(
            simulate_spde(&scen, 0.05, 0, 0, false),
            Err(Error::DivergentNoise { .. })
        ));
        assert!(simulate_spde(&scen, 0.05, 0, 0, true).is_ok());
    }
}
