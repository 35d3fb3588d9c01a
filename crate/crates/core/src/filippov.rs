//! Regularization primitives for drifts that jump across a switching surface.
//!
//! A [`Mollifier`] convolves a two-branch drift with a smooth, even, compactly
//! supported kernel at scale `eps`:
//!
//! ```text
//! f_eps(r) = ∫ f(r - eps·θ) ρ(θ) dθ
//! ```
//!
//! In one and two dimensions the integral uses 64-node Gauss–Legendre
//! quadrature (tensor product in 2-D), with each integration line split at the
//! jump so both sides are integrated smoothly. Higher dimensions use a
//! fixed-seed antithetic Monte Carlo rule. Drifts whose branches are affine
//! with a common linear part and whose switching function is linear
//! ([`SwitchedAffine`]) reduce to a scalar switching profile and are evaluated
//! without per-node branch calls.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type Kernel = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

pub const QUADRATURE_NODES: usize = 64;
/// Knot count of the tabulated switching profile.
pub const PROFILE_INTERVALS: usize = 4096;
/// Maximum interpolation error accepted for a tabulated switching profile.
pub const PROFILE_TOLERANCE: f64 = 1e-6;

const CDF_INTERVALS: usize = 2048;
const CDF_PANEL_NODES: usize = 16;
const SIGN_SCAN_POINTS: usize = 64;
const MC_PAIRS: usize = 2048;
const MC_SEED: u64 = 0x6d6f_6c6c_6966_7931;

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let legendre = |x: f64| {
        let (mut p0, mut p1) = (1.0, x);
        for k in 2..=n {
            let k = k as f64;
            let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
            p0 = p1;
            p1 = p2;
        }
        // (P_n, P_n')
        (p1, n as f64 * (x * p1 - p0) / (x * x - 1.0))
    };
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        if n % 2 == 1 && i == n / 2 {
            x = 0.0;
        } else {
            for _ in 0..100 {
                let (p, dp) = legendre(x);
                let dx = p / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
        }
        let dp = if x == 0.0 && n == 1 { 1.0 } else { legendre(x).1 };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// The standard C∞ bump `exp(-1/(1-θ²))` on (-1, 1), unnormalized.
pub fn bump(theta: f64) -> f64 {
    let q = 1.0 - theta * theta;
    if q <= 0.0 {
        0.0
    } else {
        (-1.0 / q).exp()
    }
}

/// Cumulative distribution of the normalized kernel, tabulated on [0, 1] and
/// interpolated by cubic Hermite splines with the exact density as slope.
#[derive(Debug, Clone)]
struct KernelCdf {
    step: f64,
    half_mass: Vec<f64>,
    density: Vec<f64>,
    scale: f64,
}

impl KernelCdf {
    fn build(density: impl Fn(f64) -> f64) -> Self {
        let (x, w) = gauss_legendre(CDF_PANEL_NODES);
        let step = 1.0 / CDF_INTERVALS as f64;
        let mut half_mass = Vec::with_capacity(CDF_INTERVALS + 1);
        half_mass.push(0.0);
        let mut acc = 0.0;
        for i in 0..CDF_INTERVALS {
            let (a, b) = (i as f64 * step, (i + 1) as f64 * step);
            let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
            let panel: f64 = x
                .iter()
                .zip(&w)
                .map(|(xk, wk)| wk * density(mid + half * xk))
                .sum();
            acc += half * panel;
            half_mass.push(acc);
        }
        // pin F(1) = 1 exactly
        let scale = 0.5 / acc;
        half_mass.iter_mut().for_each(|v| *v *= scale);
        let density = (0..=CDF_INTERVALS)
            .map(|i| scale * density(i as f64 * step))
            .collect();
        Self {
            step,
            half_mass,
            density,
            scale,
        }
    }

    fn cdf(&self, t: f64) -> f64 {
        0.5 + self.centered(t)
    }

    /// `F(t) − 1/2`, exactly odd in `t`.
    fn centered(&self, t: f64) -> f64 {
        let s = t.abs();
        if s >= 1.0 {
            return 0.5f64.copysign(t);
        }
        let pos = s / self.step;
        let i = (pos as usize).min(CDF_INTERVALS - 1);
        let u = pos - i as f64;
        let g = hermite(
            u,
            self.step,
            self.half_mass[i],
            self.density[i],
            self.half_mass[i + 1],
            self.density[i + 1],
        );
        g.copysign(t)
    }
}

#[inline]
fn hermite(u: f64, h: f64, y0: f64, d0: f64, y1: f64, d1: f64) -> f64 {
    let u2 = u * u;
    let u3 = u2 * u;
    (2.0 * u3 - 3.0 * u2 + 1.0) * y0
        + (u3 - 2.0 * u2 + u) * h * d0
        + (-2.0 * u3 + 3.0 * u2) * y1
        + (u3 - u2) * h * d1
}

/// An even, nonnegative kernel supported in [-1, 1], normalized so that its
/// Gauss–Legendre integral is one.
pub struct Mollifier {
    kernel: Kernel,
    normalization: f64,
    nodes: Vec<f64>,
    gl_weights: Vec<f64>,
    weights: Vec<f64>,
    cdf: KernelCdf,
    mc_cache: Mutex<HashMap<usize, Arc<[f64]>>>,
}

impl fmt::Debug for Mollifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Mollifier")
            .field("normalization", &self.normalization)
            .field("quadrature_nodes", &self.nodes.len())
            .finish()
    }
}

impl Mollifier {
    /// The bump mollifier with 64 quadrature nodes, shared process-wide.
    pub fn standard() -> &'static Mollifier {
        static STANDARD: OnceLock<Mollifier> = OnceLock::new();
        STANDARD.get_or_init(|| {
            Mollifier::from_kernel(Arc::new(bump), QUADRATURE_NODES).expect("bump kernel has positive mass")
        })
    }

    pub fn from_kernel(kernel: Kernel, quadrature_nodes: usize) -> Result<Self> {
        if quadrature_nodes == 0 {
            return Err(Error::invalid("quadrature_nodes", "must be at least 1"));
        }
        let (nodes, gl_weights) = gauss_legendre(quadrature_nodes);
        let raw: Vec<f64> = nodes.iter().map(|&x| kernel(x)).collect();
        if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(
                "kernel",
                "must be finite and nonnegative on [-1, 1]",
            ));
        }
        let peak = raw.iter().cloned().fold(0.0, f64::max);
        let asymmetric = nodes
            .iter()
            .zip(&raw)
            .any(|(&x, &v)| (kernel(-x) - v).abs() > 1e-12 * peak.max(1e-300));
        if asymmetric {
            return Err(Error::invalid("kernel", "must be even"));
        }
        let mass: f64 = raw.iter().zip(&gl_weights).map(|(v, w)| v * w).sum();
        if !(mass > 0.0) {
            return Err(Error::DegenerateQuadrature);
        }
        let normalization = 1.0 / mass;
        let weights = raw
            .iter()
            .zip(&gl_weights)
            .map(|(v, w)| v * w * normalization)
            .collect();
        let k = kernel.clone();
        let cdf = KernelCdf::build(move |t| if t.abs() >= 1.0 { 0.0 } else { normalization * k(t) });
        Ok(Self {
            kernel,
            normalization,
            nodes,
            gl_weights,
            weights,
            cdf,
            mc_cache: Mutex::new(HashMap::new()),
        })
    }

    /// Normalized kernel value; zero outside (-1, 1).
    pub fn eval(&self, theta: f64) -> f64 {
        if theta.abs() >= 1.0 {
            0.0
        } else {
            self.normalization * (self.kernel)(theta)
        }
    }

    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Quadrature weights already multiplied by the normalized kernel.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `P(θ ≤ t)` for θ distributed with density ρ.
    pub fn cdf(&self, t: f64) -> f64 {
        self.cdf.cdf(t)
    }

    fn cdf_density(&self, t: f64) -> f64 {
        self.cdf.scale * self.eval(t)
    }

    /// Calls `visit(θ, w)` for a quadrature rule of `∫ h(θ) ρ(θ) dθ` on [-1, 1]
    /// whose pieces are split wherever `side(θ)` changes sign.
    fn for_each_split_node(&self, side: impl Fn(f64) -> f64, mut visit: impl FnMut(f64, f64)) {
        let mut roots: Vec<f64> = Vec::new();
        let mut prev_t = -1.0;
        let mut prev_pos = side(prev_t) > 0.0;
        for i in 1..=SIGN_SCAN_POINTS {
            let t = -1.0 + 2.0 * i as f64 / SIGN_SCAN_POINTS as f64;
            let pos = side(t) > 0.0;
            if pos != prev_pos {
                let (mut lo, mut hi) = (prev_t, t);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if (side(mid) > 0.0) == prev_pos {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo < 1e-15 {
                        break;
                    }
                }
                roots.push(0.5 * (lo + hi));
            }
            prev_t = t;
            prev_pos = pos;
        }
        if roots.is_empty() {
            for (&x, &w) in self.nodes.iter().zip(&self.weights) {
                visit(x, w);
            }
            return;
        }
        let mut a = -1.0;
        for b in roots.into_iter().chain(std::iter::once(1.0)) {
            if b > a {
                let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
                let piece: Vec<(f64, f64)> = self
                    .nodes
                    .iter()
                    .zip(&self.gl_weights)
                    .map(|(&x, &w)| {
                        let theta = mid + half * x;
                        (theta, half * w * self.eval(theta))
                    })
                    .collect();
                // rescale so each piece carries exactly its kernel mass
                let raw: f64 = piece.iter().map(|p| p.1).sum();
                let mass = self.cdf(b) - self.cdf(a);
                let scale = if raw > 0.0 { mass / raw } else { 0.0 };
                for (theta, w) in piece {
                    visit(theta, w * scale);
                }
            }
            a = b;
        }
    }

    /// Antithetic kernel samples in `dim` dimensions, row-major, fixed seed.
    fn mc_samples(&self, dim: usize) -> Arc<[f64]> {
        let mut cache = self.mc_cache.lock().expect("mollifier cache poisoned");
        cache
            .entry(dim)
            .or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(MC_SEED ^ dim as u64);
                let mut out = Vec::with_capacity(2 * MC_PAIRS * dim);
                for _ in 0..MC_PAIRS {
                    let draw: Vec<f64> = (0..dim).map(|_| self.inverse_cdf(rng.random::<f64>())).collect();
                    out.extend(draw.iter());
                    out.extend(draw.iter().map(|v| -v));
                }
                out.into()
            })
            .clone()
    }

    fn inverse_cdf(&self, u: f64) -> f64 {
        let (mut lo, mut hi) = (-1.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// `P(Σ wᵢθᵢ < t)` for independent kernel-distributed θᵢ, given the
    /// nonzero weight magnitudes sorted ascending.
    fn switch_probability(&self, abs_weights: &[f64], t: f64) -> f64 {
        let total: f64 = abs_weights.iter().sum();
        match abs_weights.len() {
            0 => heaviside_half(t),
            _ if t >= total => 1.0,
            _ if t <= -total => 0.0,
            1 => self.cdf(t / abs_weights[0]),
            2 => {
                // symmetric nodes are paired so that P(0) = 1/2 exactly
                let (small, large) = (abs_weights[0], abs_weights[1]);
                let n = self.nodes.len();
                let mut acc = 0.0;
                for k in 0..n / 2 {
                    let (x, w) = (self.nodes[n - 1 - k], self.weights[n - 1 - k]);
                    let pair = self.cdf.centered((t - small * x) / large)
                        + self.cdf.centered((t + small * x) / large);
                    acc += w * pair;
                }
                if n % 2 == 1 {
                    acc += self.weights[n / 2] * self.cdf.centered(t / large);
                }
                0.5 + acc
            }
            n => {
                // consecutive samples are antithetic pairs
                let large = abs_weights[n - 1];
                let others = &abs_weights[..n - 1];
                let samples = self.mc_samples(n - 1);
                let count = samples.len() / (n - 1);
                let sum: f64 = samples
                    .chunks_exact(2 * (n - 1))
                    .map(|pair| {
                        let shift: f64 = others.iter().zip(pair).map(|(w, v)| w * v).sum();
                        self.cdf.centered((t - shift) / large) + self.cdf.centered((t + shift) / large)
                    })
                    .sum();
                0.5 + sum / count as f64
            }
        }
    }

    /// Derivative of [`Self::switch_probability`] in `t`.
    fn switch_density(&self, abs_weights: &[f64], t: f64) -> f64 {
        match abs_weights.len() {
            0 => 0.0,
            1 => self.cdf_density(t / abs_weights[0]) / abs_weights[0],
            2 => {
                let (small, large) = (abs_weights[0], abs_weights[1]);
                self.nodes
                    .iter()
                    .zip(&self.weights)
                    .map(|(&x, &w)| w * self.cdf_density((t - small * x) / large))
                    .sum::<f64>()
                    / large
            }
            n => {
                let large = abs_weights[n - 1];
                let others = &abs_weights[..n - 1];
                let samples = self.mc_samples(n - 1);
                let count = samples.len() / (n - 1);
                let sum: f64 = samples
                    .chunks_exact(n - 1)
                    .map(|th| {
                        let shift: f64 = others.iter().zip(th).map(|(w, v)| w * v).sum();
                        self.cdf_density((t - shift) / large)
                    })
                    .sum();
                sum / (count as f64 * large)
            }
        }
    }

    /// Mollified drift at `r`, evaluated directly by quadrature.
    pub fn mollify(&self, drift: &JumpDrift, eps: f64, r: &[f64], out: &mut [f64]) -> Result<()> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::invalid("eps", "must be positive and finite"));
        }
        let n = drift.dim();
        if r.len() != n || out.len() != n {
            return Err(Error::Shape(format!(
                "state and output must have length {n}, got {} and {}",
                r.len(),
                out.len()
            )));
        }
        match &drift.form {
            DriftForm::Affine(sa) => {
                let abs_w = sorted_abs_weights(&sa.normal);
                let gamma = sa.switch(r);
                let p = self.switch_probability(&abs_w, gamma / eps);
                sa.mollified_from_probability(r, p, out);
            }
            DriftForm::General { .. } => self.mollify_general(drift, eps, r, out),
        }
        Ok(())
    }

    fn mollify_general(&self, drift: &JumpDrift, eps: f64, r: &[f64], out: &mut [f64]) {
        let n = drift.dim();
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut p = r.to_vec();
        let mut f = vec![0.0; n];
        match n {
            1 => {
                let side = |th: f64| drift.switch(&[r[0] - eps * th]);
                self.for_each_split_node(side, |th, w| {
                    p[0] = r[0] - eps * th;
                    drift.eval(&p, &mut f);
                    out[0] += w * f[0];
                });
            }
            2 => {
                for (&t1, &w1) in self.nodes.iter().zip(&self.weights) {
                    let x0 = r[0] - eps * t1;
                    let side = |th: f64| drift.switch(&[x0, r[1] - eps * th]);
                    self.for_each_split_node(side, |th, w| {
                        p[0] = x0;
                        p[1] = r[1] - eps * th;
                        drift.eval(&p, &mut f);
                        for (o, fv) in out.iter_mut().zip(&f) {
                            *o += w1 * w * fv;
                        }
                    });
                }
            }
            _ => {
                let samples = self.mc_samples(n);
                let count = samples.len() / n;
                for th in samples.chunks_exact(n) {
                    for ((pi, ri), ti) in p.iter_mut().zip(r).zip(th) {
                        *pi = ri - eps * ti;
                    }
                    drift.eval(&p, &mut f);
                    for (o, fv) in out.iter_mut().zip(&f) {
                        *o += fv;
                    }
                }
                out.iter_mut().for_each(|v| *v /= count as f64);
            }
        }
    }
}

fn heaviside_half(t: f64) -> f64 {
    if t > 0.0 {
        1.0
    } else if t < 0.0 {
        0.0
    } else {
        0.5
    }
}

fn sorted_abs_weights(normal: &[f64]) -> Vec<f64> {
    let mut w: Vec<f64> = normal.iter().map(|v| v.abs()).filter(|v| *v > 0.0).collect();
    w.sort_by(|a, b| a.total_cmp(b));
    w
}

/// Direct quadrature evaluation of the mollified drift.
pub fn mollify_drift(d: &JumpDrift, m: &Mollifier, eps: f64, r: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; d.dim()];
    m.mollify(d, eps, r, &mut out)?;
    Ok(out)
}

/// Evaluates a mollifier at `theta`.
pub fn mollifier_eval(m: &Mollifier, theta: f64) -> f64 {
    m.eval(theta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearGrowth {
    pub a1: f64,
    pub a2: f64,
}

impl LinearGrowth {
    pub fn bound(&self, norm: f64) -> f64 {
        self.a1 * norm + self.a2
    }
}

/// Two affine branches sharing their linear part, switched by a linear
/// function:
///
/// ```text
/// f₁(r) = A r + c₁   where w·r + level > 0
/// f₂(r) = A r + c₂   where w·r + level < 0
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchedAffine {
    /// Row-major `n × n`.
    pub matrix: Vec<f64>,
    pub upper_offset: Vec<f64>,
    pub lower_offset: Vec<f64>,
    pub normal: Vec<f64>,
    pub level: f64,
}

impl SwitchedAffine {
    fn dim(&self) -> usize {
        self.normal.len()
    }

    pub fn switch(&self, r: &[f64]) -> f64 {
        self.normal.iter().zip(r).map(|(w, x)| w * x).sum::<f64>() + self.level
    }

    fn linear_part(&self, r: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.matrix[i * n..(i + 1) * n];
            *o = row.iter().zip(r).map(|(a, x)| a * x).sum();
        }
    }

    #[inline]
    fn mollified_from_probability(&self, r: &[f64], p: f64, out: &mut [f64]) {
        let n = self.dim();
        let (r, out) = (&r[..n], &mut out[..n]);
        let (hi, lo) = (&self.upper_offset[..n], &self.lower_offset[..n]);
        for (i, row) in self.matrix.chunks_exact(n).take(n).enumerate() {
            let mut acc = lo[i] + (hi[i] - lo[i]) * p;
            for j in 0..n {
                acc += row[j] * r[j];
            }
            out[i] = acc;
        }
    }

    /// Growth constants `|fᵢ(r)| ≤ ‖A‖_F |r| + max |cᵢ|`.
    pub fn growth(&self) -> LinearGrowth {
        let frob = self.matrix.iter().map(|v| v * v).sum::<f64>().sqrt();
        LinearGrowth {
            a1: frob,
            a2: norm(&self.upper_offset).max(norm(&self.lower_offset)),
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone)]
pub enum DriftForm {
    General {
        upper: VectorField,
        lower: VectorField,
        switch: ScalarField,
    },
    Affine(SwitchedAffine),
}

/// A drift equal to `upper` where the switching function is positive and to
/// `lower` where it is negative.
#[derive(Clone)]
pub struct JumpDrift {
    dim: usize,
    form: DriftForm,
    growth: LinearGrowth,
}

impl fmt::Debug for JumpDrift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let form = match &self.form {
            DriftForm::General { .. } => "general".to_string(),
            DriftForm::Affine(sa) => format!("{sa:?}"),
        };
        f.debug_struct("JumpDrift")
            .field("dim", &self.dim)
            .field("form", &form)
            .field("growth", &self.growth)
            .finish()
    }
}

impl JumpDrift {
    pub fn general(
        dim: usize,
        upper: VectorField,
        lower: VectorField,
        switch: ScalarField,
        growth: LinearGrowth,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        check_growth(growth)?;
        Ok(Self {
            dim,
            form: DriftForm::General { upper, lower, switch },
            growth,
        })
    }

    /// Scalar-state drift from plain functions.
    pub fn scalar(
        upper: impl Fn(f64) -> f64 + Send + Sync + 'static,
        lower: impl Fn(f64) -> f64 + Send + Sync + 'static,
        switch: impl Fn(f64) -> f64 + Send + Sync + 'static,
        growth: LinearGrowth,
    ) -> Result<Self> {
        Self::general(
            1,
            Arc::new(move |r: &[f64], out: &mut [f64]| out[0] = upper(r[0])),
            Arc::new(move |r: &[f64], out: &mut [f64]| out[0] = lower(r[0])),
            Arc::new(move |r: &[f64]| switch(r[0])),
            growth,
        )
    }

    /// Affine switched drift; growth constants are derived from the
    /// coefficients.
    pub fn affine(sa: SwitchedAffine) -> Result<Self> {
        let n = sa.normal.len();
        if n == 0 {
            return Err(Error::invalid("normal", "must be nonempty"));
        }
        if sa.matrix.len() != n * n || sa.upper_offset.len() != n || sa.lower_offset.len() != n {
            return Err(Error::Shape(format!(
                "affine drift of dimension {n} needs an {n}x{n} matrix and length-{n} offsets"
            )));
        }
        if sa
            .matrix
            .iter()
            .chain(&sa.upper_offset)
            .chain(&sa.lower_offset)
            .chain(&sa.normal)
            .any(|v| !v.is_finite())
            || !sa.level.is_finite()
        {
            return Err(Error::invalid("affine drift", "coefficients must be finite"));
        }
        let growth = sa.growth();
        Ok(Self {
            dim: n,
            form: DriftForm::Affine(sa),
            growth,
        })
    }

    pub fn with_growth(mut self, growth: LinearGrowth) -> Result<Self> {
        check_growth(growth)?;
        self.growth = growth;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn growth(&self) -> LinearGrowth {
        self.growth
    }

    pub fn form(&self) -> &DriftForm {
        &self.form
    }

    pub fn switch(&self, r: &[f64]) -> f64 {
        match &self.form {
            DriftForm::General { switch, .. } => switch(r),
            DriftForm::Affine(sa) => sa.switch(r),
        }
    }

    pub fn upper(&self, r: &[f64], out: &mut [f64]) {
        match &self.form {
            DriftForm::General { upper, .. } => upper(r, out),
            DriftForm::Affine(sa) => {
                sa.linear_part(r, out);
                out.iter_mut().zip(&sa.upper_offset).for_each(|(o, c)| *o += c);
            }
        }
    }

    pub fn lower(&self, r: &[f64], out: &mut [f64]) {
        match &self.form {
            DriftForm::General { lower, .. } => lower(r, out),
            DriftForm::Affine(sa) => {
                sa.linear_part(r, out);
                out.iter_mut().zip(&sa.lower_offset).for_each(|(o, c)| *o += c);
            }
        }
    }

    /// The discontinuous drift itself. On the surface the midpoint of the two
    /// branches is returned.
    pub fn eval(&self, r: &[f64], out: &mut [f64]) {
        let g = self.switch(r);
        if g > 0.0 {
            self.upper(r, out);
        } else if g < 0.0 {
            self.lower(r, out);
        } else {
            let mut tmp = vec![0.0; self.dim];
            self.upper(r, out);
            self.lower(r, &mut tmp);
            out.iter_mut().zip(&tmp).for_each(|(o, t)| *o = 0.5 * (*o + t));
        }
    }
}

fn check_growth(growth: LinearGrowth) -> Result<()> {
    if !(growth.a1 >= 0.0 && growth.a2 >= 0.0 && growth.a1.is_finite() && growth.a2.is_finite()) {
        return Err(Error::invalid(
            "growth",
            "constants must be finite and nonnegative",
        ));
    }
    Ok(())
}

/// Tabulated `P(Σ|wᵢ|θᵢ < t)` on its transition band, cubic Hermite with the
/// exact density as slope.
#[derive(Debug, Clone)]
pub struct SwitchProfile {
    half_width: f64,
    step: f64,
    inv_step: f64,
    values: Vec<f64>,
    slopes: Vec<f64>,
    max_error: f64,
}

impl SwitchProfile {
    fn build(m: &Mollifier, abs_w: &[f64]) -> Self {
        let half_width: f64 = abs_w.iter().sum();
        let step = 2.0 * half_width / PROFILE_INTERVALS as f64;
        let knot = |i: usize| -half_width + i as f64 * step;
        let values: Vec<f64> = (0..=PROFILE_INTERVALS)
            .map(|i| m.switch_probability(abs_w, knot(i)))
            .collect();
        let slopes: Vec<f64> = (0..=PROFILE_INTERVALS)
            .map(|i| m.switch_density(abs_w, knot(i)))
            .collect();
        let mut profile = Self {
            half_width,
            step,
            inv_step: step.recip(),
            values,
            slopes,
            max_error: 0.0,
        };
        profile.max_error = (0..PROFILE_INTERVALS)
            .map(|i| {
                let t = knot(i) + 0.5 * step;
                (profile.eval(t) - m.switch_probability(abs_w, t)).abs()
            })
            .fold(0.0, f64::max);
        profile
    }

    #[inline]
    fn eval(&self, t: f64) -> f64 {
        if t >= self.half_width {
            return 1.0;
        }
        if t <= -self.half_width {
            return 0.0;
        }
        let pos = (t + self.half_width) * self.inv_step;
        let i = (pos as usize).min(PROFILE_INTERVALS - 1);
        let u = pos - i as f64;
        let (v, d) = (&self.values[i..i + 2], &self.slopes[i..i + 2]);
        hermite(u, self.step, v[0], d[0], v[1], d[1])
    }

    pub fn max_error(&self) -> f64 {
        self.max_error
    }
}

/// How the per-step mollified drift is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DriftEvaluation {
    /// Quadrature at every call.
    #[default]
    Direct,
    /// Tabulated switching profile for affine drifts with a multi-component
    /// surface normal; falls back to `Direct` when the table fails its
    /// self-check or the drift has no such structure.
    Table,
}

/// A drift bound to a mollifier and a scale, ready for repeated evaluation.
pub struct MollifiedDrift<'a> {
    drift: &'a JumpDrift,
    mollifier: &'a Mollifier,
    eps: f64,
    inv_eps: f64,
    abs_weights: Vec<f64>,
    profile: Option<SwitchProfile>,
    table_error: Option<f64>,
}

impl<'a> MollifiedDrift<'a> {
    pub fn new(
        drift: &'a JumpDrift,
        mollifier: &'a Mollifier,
        eps: f64,
        mode: DriftEvaluation,
    ) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::invalid("eps", "must be positive and finite"));
        }
        let mut abs_weights = Vec::new();
        let mut profile = None;
        let mut table_error = None;
        if let DriftForm::Affine(sa) = &drift.form {
            abs_weights = sorted_abs_weights(&sa.normal);
            if mode == DriftEvaluation::Table && abs_weights.len() >= 2 {
                let p = SwitchProfile::build(mollifier, &abs_weights);
                table_error = Some(p.max_error());
                if p.max_error() <= PROFILE_TOLERANCE {
                    profile = Some(p);
                }
            }
        }
        Ok(Self {
            drift,
            mollifier,
            eps,
            inv_eps: eps.recip(),
            abs_weights,
            profile,
            table_error,
        })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn drift(&self) -> &JumpDrift {
        self.drift
    }

    /// Self-check error of the switching table, if one was requested.
    pub fn table_error(&self) -> Option<f64> {
        self.table_error
    }

    pub fn uses_table(&self) -> bool {
        self.profile.is_some()
    }

    #[inline]
    pub fn eval(&self, r: &[f64], out: &mut [f64]) {
        match &self.drift.form {
            DriftForm::Affine(sa) => {
                let p = match &self.profile {
                    Some(profile) => profile.eval(sa.switch(r) * self.inv_eps),
                    None => self
                        .mollifier
                        .switch_probability(&self.abs_weights, sa.switch(r) / self.eps),
                };
                sa.mollified_from_probability(r, p, out);
            }
            DriftForm::General { .. } => {
                self.mollifier.mollify_general(self.drift, self.eps, r, out);
            }
        }
    }
}

/// The Filippov set of a two-branch drift at a point: a single value off the
/// surface, the segment between the branch values on it.
#[derive(Debug, Clone, PartialEq)]
pub enum FilippovSet {
    Point(Vec<f64>),
    Segment { upper: Vec<f64>, lower: Vec<f64> },
}

pub fn filippov_set(d: &JumpDrift, r: &[f64]) -> FilippovSet {
    let g = d.switch(r);
    let mut a = vec![0.0; d.dim()];
    if g > 0.0 {
        d.upper(r, &mut a);
        FilippovSet::Point(a)
    } else if g < 0.0 {
        d.lower(r, &mut a);
        FilippovSet::Point(a)
    } else {
        let mut b = vec![0.0; d.dim()];
        d.upper(r, &mut a);
        d.lower(r, &mut b);
        if a == b {
            FilippovSet::Point(a)
        } else {
            FilippovSet::Segment { upper: a, lower: b }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn is_singleton(&self) -> bool {
        self.lo == self.hi
    }
}

/// `[m(f), M(f)]` of a scalar two-branch drift at `r`.
pub fn filippov_interval(d: &JumpDrift, r: f64) -> Result<Interval> {
    if d.dim() != 1 {
        return Err(Error::Shape(format!(
            "filippov_interval needs a scalar drift, got dimension {}",
            d.dim()
        )));
    }
    Ok(match filippov_set(d, &[r]) {
        FilippovSet::Point(v) => Interval { lo: v[0], hi: v[0] },
        FilippovSet::Segment { upper, lower } => Interval {
            lo: upper[0].min(lower[0]),
            hi: upper[0].max(lower[0]),
        },
    })
}

/// Lipschitz ramp `r/λ` saturating at ±1.
pub fn yosida_sign(lambda: f64, r: f64) -> f64 {
    (r / lambda).clamp(-1.0, 1.0)
}

/// C² approximation of `|y|`: `y²/(2λ)` on `[0, λ]`, a quartic on `[λ, 2λ]`,
/// slope `1 + λ` beyond, extended evenly.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedAbs {
    lambda: f64,
    /// Quartic on `[λ, 2λ]` in powers of `s = (y - λ)/λ`.
    matching_polynomial: [f64; 5],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiValue {
    pub value: f64,
    pub first_derivative: f64,
    pub second_derivative: f64,
}

impl SmoothedAbs {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid("lambda", "must be positive and finite"));
        }
        // φ' on [λ, 2λ] is the cubic Hermite interpolant of
        // φ'(λ) = 1, φ''(λ) = 1/λ, φ'(2λ) = 1 + λ, φ''(2λ) = 0;
        // integrating from φ(λ) = λ/2 gives this quartic.
        let l = lambda;
        Ok(Self {
            lambda,
            matching_polynomial: [l / 2.0, l, l / 2.0, l * (l - 2.0 / 3.0), l * (0.25 - l / 2.0)],
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn matching_polynomial(&self) -> [f64; 5] {
        self.matching_polynomial
    }

    /// `sup |φ''| · λ` over the real line.
    pub fn second_derivative_constant(&self) -> f64 {
        // λφ'' on [λ, 2λ] is q(s) = 1 + (6λ - 4)s + (3 - 6λ)s², s ∈ [0, 1]
        let l = self.lambda;
        let (b, c) = (6.0 * l - 4.0, 3.0 - 6.0 * l);
        let q = |s: f64| 1.0 + b * s + c * s * s;
        let mut sup = q(0.0).abs().max(q(1.0).abs());
        if c != 0.0 {
            let s = -b / (2.0 * c);
            if (0.0..=1.0).contains(&s) {
                sup = sup.max(q(s).abs());
            }
        }
        sup.max(1.0)
    }

    pub fn eval(&self, y: f64) -> PhiValue {
        let l = self.lambda;
        let a = y.abs();
        let sign = if y < 0.0 { -1.0 } else { 1.0 };
        let (value, d1, d2) = if a <= l {
            (a * a / (2.0 * l), a / l, 1.0 / l)
        } else if a < 2.0 * l {
            let s = (a - l) / l;
            let c = &self.matching_polynomial;
            let value = c[0] + s * (c[1] + s * (c[2] + s * (c[3] + s * c[4])));
            let d1 = (c[1] + s * (2.0 * c[2] + s * (3.0 * c[3] + s * 4.0 * c[4]))) / l;
            let d2 = (2.0 * c[2] + s * (6.0 * c[3] + s * 12.0 * c[4])) / (l * l);
            (value, d1, d2)
        } else {
            let at_knot = self.matching_polynomial.iter().sum::<f64>();
            (at_knot + (1.0 + l) * (a - 2.0 * l), 1.0 + l, 0.0)
        };
        PhiValue {
            value,
            first_derivative: sign * d1,
            second_derivative: d2,
        }
    }
}

pub fn phi_lambda_eval(s: &SmoothedAbs, y: f64) -> PhiValue {
    s.eval(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn heaviside() -> JumpDrift {
        JumpDrift::scalar(|_| 1.0, |_| 0.0, |r| r, LinearGrowth { a1: 0.0, a2: 1.0 }).unwrap()
    }

    fn sign() -> JumpDrift {
        JumpDrift::scalar(|_| 1.0, |_| -1.0, |r| r, LinearGrowth { a1: 0.0, a2: 1.0 }).unwrap()
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(64);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-13);
        let quad: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(10)).sum();
        assert_abs_diff_eq!(quad, 2.0 / 11.0, epsilon = 1e-14);
        let (x5, _) = gauss_legendre(5);
        assert_eq!(x5[2], 0.0);
    }

    #[test]
    fn kernel_support_and_symmetry() {
        let m = Mollifier::standard();
        assert_eq!(m.eval(1.5), 0.0);
        assert_eq!(m.eval(-1.0), 0.0);
        assert_eq!(m.eval(0.4), m.eval(-0.4));
        let total: f64 = m.weights().iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn kernel_cdf_endpoints_and_center() {
        let m = Mollifier::standard();
        assert_eq!(m.cdf(0.0), 0.5);
        assert_eq!(m.cdf(-1.0), 0.0);
        assert_eq!(m.cdf(1.0), 1.0);
        for t in [0.1, 0.33, 0.9] {
            assert_abs_diff_eq!(m.cdf(-t), 1.0 - m.cdf(t), epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_mass_kernel_is_degenerate() {
        // supported strictly between the two Gauss nodes of a 2-point rule
        let k: Kernel = Arc::new(|t: f64| if t.abs() < 0.1 { 1.0 } else { 0.0 });
        let err = Mollifier::from_kernel(k, 2).unwrap_err();
        assert_eq!(err, Error::DegenerateQuadrature);
    }

    #[test]
    fn heaviside_splits_evenly_at_the_jump() {
        let m = Mollifier::standard();
        let v = mollify_drift(&heaviside(), m, 0.1, &[0.0]).unwrap();
        assert_abs_diff_eq!(v[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn sign_is_constant_two_eps_away() {
        let m = Mollifier::standard();
        let eps = 0.05;
        let v = mollify_drift(&sign(), m, eps, &[2.0 * eps]).unwrap();
        assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn identity_drift_is_preserved() {
        let m = Mollifier::standard();
        let id = JumpDrift::scalar(|r| r, |r| r, |r| r, LinearGrowth { a1: 1.0, a2: 0.0 }).unwrap();
        for r in [-1.3, -0.01, 0.0, 0.2, 4.0] {
            let v = mollify_drift(&id, m, 0.1, &[r]).unwrap();
            assert_abs_diff_eq!(v[0], r, epsilon = 1e-12);
        }
    }

    #[test]
    fn nonpositive_eps_is_rejected() {
        let m = Mollifier::standard();
        assert!(mollify_drift(&sign(), m, 0.0, &[0.0]).is_err());
    }

    #[test]
    fn affine_form_matches_general_quadrature() {
        let m = Mollifier::standard();
        let sa = SwitchedAffine {
            matrix: vec![0.0, -1.0, 0.0, 0.1],
            upper_offset: vec![0.0, 2.0],
            lower_offset: vec![0.0, -2.0],
            normal: vec![1.0, 1.0],
            level: 0.0,
        };
        let affine = JumpDrift::affine(sa.clone()).unwrap();
        let sa2 = sa.clone();
        let sa3 = sa.clone();
        let sa4 = sa.clone();
        let general = JumpDrift::general(
            2,
            Arc::new(move |r: &[f64], o: &mut [f64]| {
                let d = JumpDrift::affine(sa2.clone()).unwrap();
                d.upper(r, o)
            }),
            Arc::new(move |r: &[f64], o: &mut [f64]| {
                let d = JumpDrift::affine(sa3.clone()).unwrap();
                d.lower(r, o)
            }),
            Arc::new(move |r: &[f64]| sa4.switch(r)),
            affine.growth(),
        )
        .unwrap();
        let eps = 0.05;
        for r in [[0.01, -0.02], [0.3, -0.3], [0.02, 0.0], [1.0, 1.0], [-0.03, 0.05]] {
            let a = mollify_drift(&affine, m, eps, &r).unwrap();
            let g = mollify_drift(&general, m, eps, &r).unwrap();
            for (x, y) in a.iter().zip(&g) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn switch_table_passes_self_check_and_matches_direct() {
        let m = Mollifier::standard();
        let sa = SwitchedAffine {
            matrix: vec![0.0, -1.0, 0.0, 0.1],
            upper_offset: vec![0.0, 2.0],
            lower_offset: vec![0.0, -2.0],
            normal: vec![1.0, 1.0],
            level: 0.0,
        };
        let d = JumpDrift::affine(sa).unwrap();
        let table = MollifiedDrift::new(&d, m, 0.02, DriftEvaluation::Table).unwrap();
        let direct = MollifiedDrift::new(&d, m, 0.02, DriftEvaluation::Direct).unwrap();
        assert!(table.uses_table());
        assert!(table.table_error().unwrap() <= PROFILE_TOLERANCE);
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        for k in 0..200 {
            let x = -0.05 + 0.1 * k as f64 / 199.0;
            table.eval(&[x, 0.013], &mut a);
            direct.eval(&[x, 0.013], &mut b);
            assert_abs_diff_eq!(a[1], b[1], epsilon = 2.0 * 2.0 * PROFILE_TOLERANCE);
        }
    }

    #[test]
    fn higher_dimensions_use_symmetric_monte_carlo() {
        let m = Mollifier::standard();
        let sa = SwitchedAffine {
            matrix: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            upper_offset: vec![1.0, 0.0, 0.0],
            lower_offset: vec![-1.0, 0.0, 0.0],
            normal: vec![1.0, 0.5, 0.25],
            level: 0.0,
        };
        let d = JumpDrift::affine(sa).unwrap();
        let v = mollify_drift(&d, m, 0.1, &[0.0, 0.0, 0.0]).unwrap();
        // antithetic samples make the switch probability exactly one half at 0
        assert_abs_diff_eq!(v[0], 0.0, epsilon = 1e-12);
        let far = mollify_drift(&d, m, 0.1, &[1.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(far[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn filippov_interval_examples() {
        let h = heaviside();
        assert_eq!(filippov_interval(&h, 0.0).unwrap(), Interval { lo: 0.0, hi: 1.0 });
        assert_eq!(
            filippov_interval(&sign(), 0.0).unwrap(),
            Interval { lo: -1.0, hi: 1.0 }
        );
        let i = filippov_interval(&h, 0.3).unwrap();
        assert!(i.is_singleton() && i.lo == 1.0);
    }

    #[test]
    fn phi_lambda_examples() {
        let l = 0.01;
        let s = SmoothedAbs::new(l).unwrap();
        assert_eq!(s.eval(0.0).value, 0.0);
        assert_abs_diff_eq!(s.eval(l / 2.0).first_derivative, 0.5, epsilon = 1e-15);
        let far = s.eval(3.0 * l);
        assert_abs_diff_eq!(far.first_derivative, 1.0 + l, epsilon = 1e-15);
        assert_eq!(far.second_derivative, 0.0);
        assert!(SmoothedAbs::new(0.0).is_err());
    }

    #[test]
    fn yosida_examples() {
        let l = 0.2;
        assert_eq!(yosida_sign(l, 2.0 * l), 1.0);
        assert_eq!(yosida_sign(l, -2.0 * l), -1.0);
        assert_eq!(yosida_sign(l, 0.0), 0.0);
        assert_abs_diff_eq!(yosida_sign(l, 0.1), 0.5, epsilon = 1e-15);
    }
}
