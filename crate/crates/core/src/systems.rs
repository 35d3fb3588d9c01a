//! Jump systems, switching surfaces and sampled certification of the sliding
//! hypotheses.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filippov::{norm, JumpDrift, ScalarField, SwitchedAffine, VectorField};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Default constant linking the Gronwall rate to the curvature constant,
/// `c_tilde = c1 · c_star`.
pub const DEFAULT_C1: f64 = 0.5;
/// Round-off allowed when a margin equals the declared α exactly.
pub const MARGIN_ROUNDOFF: f64 = 1e-12;
/// Points with `|g|` below this are skipped by the one-sided margin checks.
pub const SURFACE_EXCLUSION: f64 = 1e-9;
/// Violations kept per condition; the rest are only counted.
pub const MAX_VIOLATIONS_PER_CONDITION: usize = 32;
pub const DEFAULT_CERTIFY_SAMPLES: usize = 1 << 16;
const DERIVATIVE_TOLERANCE: f64 = 1e-5;

/// The switching function with its derivatives and certified constants.
#[derive(Clone)]
pub struct SlidingSurface {
    dim: usize,
    g: ScalarField,
    grad: VectorField,
    hess: VectorField,
    linear: Option<(Vec<f64>, f64)>,
    pub alpha: f64,
    pub c_star: f64,
    pub c1: f64,
    pub c_tilde: f64,
    /// Lipschitz constant of `g` on the region of interest.
    pub lipschitz: f64,
}

impl fmt::Debug for SlidingSurface {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SlidingSurface")
            .field("dim", &self.dim)
            .field("linear", &self.linear)
            .field("alpha", &self.alpha)
            .field("c_star", &self.c_star)
            .field("c_tilde", &self.c_tilde)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl SlidingSurface {
    /// `g(r) = w·r + level`. Its Hessian vanishes, so `c_star = c_tilde = 0`.
    pub fn linear(normal: Vec<f64>, level: f64, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if normal.is_empty() {
            return Err(Error::invalid("normal", "must be nonempty"));
        }
        let dim = normal.len();
        let (w1, w2) = (normal.clone(), normal.clone());
        Ok(Self {
            dim,
            g: Arc::new(move |r: &[f64]| w1.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() + level),
            grad: Arc::new(move |_: &[f64], out: &mut [f64]| out.copy_from_slice(&w2)),
            hess: Arc::new(|_: &[f64], out: &mut [f64]| out.fill(0.0)),
            lipschitz: norm(&normal),
            linear: Some((normal, level)),
            alpha,
            c_star: 0.0,
            c1: DEFAULT_C1,
            c_tilde: 0.0,
        })
    }

    /// A general `C²` surface. `hess` writes a row-major `dim × dim` matrix.
    /// `c_star` starts at zero and is normally set from a certification run.
    pub fn new(
        dim: usize,
        g: ScalarField,
        grad: VectorField,
        hess: VectorField,
        alpha: f64,
        lipschitz: f64,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        if dim == 0 {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
            return Err(Error::invalid("lipschitz", "must be finite and nonnegative"));
        }
        Ok(Self {
            dim,
            g,
            grad,
            hess,
            linear: None,
            alpha,
            c_star: 0.0,
            c1: DEFAULT_C1,
            c_tilde: 0.0,
            lipschitz,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_linear(&self) -> bool {
        self.linear.is_some()
    }

    pub fn linear_coefficients(&self) -> Option<(&[f64], f64)> {
        self.linear.as_ref().map(|(w, l)| (w.as_slice(), *l))
    }

    #[inline]
    pub fn g(&self, r: &[f64]) -> f64 {
        match &self.linear {
            Some((w, level)) => w.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() + level,
            None => (self.g)(r),
        }
    }

    pub fn grad(&self, r: &[f64], out: &mut [f64]) {
        (self.grad)(r, out)
    }

    pub fn hess(&self, r: &[f64], out: &mut [f64]) {
        (self.hess)(r, out)
    }

    pub fn with_c1(mut self, c1: f64) -> Result<Self> {
        if !(c1 > 0.0 && c1.is_finite()) {
            return Err(Error::invalid("c1", "must be positive and finite"));
        }
        self.c1 = c1;
        self.c_tilde = c1 * self.c_star;
        Ok(self)
    }

    /// Adopts the constants estimated by a certification run.
    pub fn with_certified(mut self, report: &ConditionReport) -> Self {
        self.c_star = report.c_star_estimate;
        self.c_tilde = self.c1 * self.c_star;
        if report.lipschitz_g_estimate > self.lipschitz {
            self.lipschitz = report.lipschitz_g_estimate;
        }
        self
    }

    /// Worst relative mismatch between the analytic derivatives and central
    /// differences of `g` at `r`.
    pub fn derivative_mismatch(&self, r: &[f64]) -> f64 {
        let n = self.dim;
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n * n];
        self.grad(r, &mut grad);
        self.hess(r, &mut hess);
        let scale = 1.0 + norm(r);
        let h = 1e-4 * scale;
        let mut p = r.to_vec();
        let mut gp = vec![0.0; n];
        let mut gm = vec![0.0; n];
        let mut worst: f64 = 0.0;
        let grad_scale = 1.0 + norm(&grad);
        let hess_scale = 1.0 + norm(&hess);
        for i in 0..n {
            p[i] = r[i] + h;
            let fp = self.g(&p);
            self.grad(&p, &mut gp);
            p[i] = r[i] - h;
            let fm = self.g(&p);
            self.grad(&p, &mut gm);
            p[i] = r[i];
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max((fd - grad[i]).abs() / grad_scale);
            for j in 0..n {
                let fd2 = (gp[j] - gm[j]) / (2.0 * h);
                worst = worst.max((fd2 - hess[j * n + i]).abs() / hess_scale);
            }
        }
        worst
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("alpha", "must be positive and finite"));
    }
    Ok(())
}

/// Diffusion coefficient: an `n × m` matrix, row-major.
#[derive(Clone)]
pub enum Diffusion {
    Constant(Vec<f64>),
    Field { eval: VectorField, lipschitz: f64 },
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diffusion::Constant(m) => f.debug_tuple("Constant").field(m).finish(),
            Diffusion::Field { lipschitz, .. } => {
                f.debug_struct("Field").field("lipschitz", lipschitz).finish()
            }
        }
    }
}

/// A finite-dimensional jump system `dX + f(X) dt = σ(X) dW`.
#[derive(Clone, Debug)]
pub struct SystemSpec {
    drift: JumpDrift,
    surface: SlidingSurface,
    sigma: Diffusion,
    noise_dim: usize,
    sigma_lipschitz: f64,
}

impl SystemSpec {
    pub fn new(
        drift: JumpDrift,
        surface: SlidingSurface,
        sigma: Diffusion,
        noise_dim: usize,
    ) -> Result<Self> {
        let n = drift.dim();
        if surface.dim() != n {
            return Err(Error::Shape(format!(
                "surface dimension {} differs from drift dimension {n}",
                surface.dim()
            )));
        }
        if noise_dim == 0 {
            return Err(Error::invalid("noise_dim", "must be at least 1"));
        }
        let sigma_lipschitz = match &sigma {
            Diffusion::Constant(m) => {
                if m.len() != n * noise_dim {
                    return Err(Error::Shape(format!(
                        "constant sigma needs {n}x{noise_dim} entries, got {}",
                        m.len()
                    )));
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("sigma", "entries must be finite"));
                }
                0.0
            }
            Diffusion::Field { lipschitz, .. } => {
                if !(*lipschitz >= 0.0 && lipschitz.is_finite()) {
                    return Err(Error::invalid(
                        "sigma_lipschitz",
                        "must be finite and nonnegative",
                    ));
                }
                *lipschitz
            }
        };
        // the drift's switching function must be the surface's g
        let probes: Vec<Vec<f64>> = (0..8)
            .map(|k| {
                (0..n)
                    .map(|i| ((k * 7 + i * 3) % 11) as f64 / 5.0 - 1.0)
                    .collect()
            })
            .collect();
        for p in &probes {
            let (a, b) = (drift.switch(p), surface.g(p));
            if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                return Err(Error::invalid(
                    "surface",
                    format!("g differs from the drift's switching function at {p:?}"),
                ));
            }
        }
        Ok(Self {
            drift,
            surface,
            sigma,
            noise_dim,
            sigma_lipschitz,
        })
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn drift(&self) -> &JumpDrift {
        &self.drift
    }

    pub fn surface(&self) -> &SlidingSurface {
        &self.surface
    }

    pub fn surface_mut(&mut self) -> &mut SlidingSurface {
        &mut self.surface
    }

    pub fn sigma(&self) -> &Diffusion {
        &self.sigma
    }

    pub fn sigma_lipschitz_estimate(&self) -> f64 {
        self.sigma_lipschitz
    }

    pub fn sigma_is_constant(&self) -> bool {
        matches!(self.sigma, Diffusion::Constant(_))
    }

    #[inline]
    pub fn eval_sigma(&self, r: &[f64], out: &mut [f64]) {
        match &self.sigma {
            Diffusion::Constant(m) => out.copy_from_slice(m),
            Diffusion::Field { eval, .. } => eval(r, out),
        }
    }

    /// Replaces the drift, keeping the surface. The new drift must switch on
    /// the same function.
    pub fn with_drift(self, drift: JumpDrift) -> Result<Self> {
        if drift.dim() != self.dim() {
            return Err(Error::Shape("replacement drift has a different dimension".into()));
        }
        Self::new(drift, self.surface, self.sigma, self.noise_dim)
    }
}

/// Scalar diffusion intensity `σ₀` of the second-order example.
#[derive(Clone)]
pub enum Sigma0 {
    Constant(f64),
    Field { eval: ScalarField, lipschitz: f64 },
}

/// The controlled double integrator rewritten as a first-order jump system:
///
/// ```text
/// f₁(r) = (−r₂, a₁r₂ + α),  f₂(r) = (−r₂, a₁r₂ − α),  g(r) = a₂r₁ + r₂,
/// σ(r) = (0, σ₀(r))ᵀ.
/// ```
pub fn build_second_order_system(a1: f64, a2: f64, alpha: f64, sigma0: Sigma0) -> Result<SystemSpec> {
    check_alpha(alpha)?;
    if !a1.is_finite() || !a2.is_finite() {
        return Err(Error::invalid("a1/a2", "must be finite"));
    }
    let drift = JumpDrift::affine(second_order_affine(a1, a2, alpha))?;
    let surface = SlidingSurface::linear(vec![a2, 1.0], 0.0, alpha)?;
    let sigma = match sigma0 {
        Sigma0::Constant(s) => Diffusion::Constant(vec![0.0, s]),
        Sigma0::Field { eval, lipschitz } => Diffusion::Field {
            eval: Arc::new(move |r: &[f64], out: &mut [f64]| {
                out[0] = 0.0;
                out[1] = eval(r);
            }),
            lipschitz,
        },
    };
    SystemSpec::new(drift, surface, sigma, 1)
}

pub fn second_order_affine(a1: f64, a2: f64, alpha: f64) -> SwitchedAffine {
    SwitchedAffine {
        matrix: vec![0.0, -1.0, 0.0, a1],
        upper_offset: vec![0.0, alpha],
        lower_offset: vec![0.0, -alpha],
        normal: vec![a2, 1.0],
        level: 0.0,
    }
}

/// Lower bound `1 − |a₂x₀ + x₁|/(αt)` on the probability of reaching the
/// surface by time `t`, clamped to `[0, 1]`.
pub fn corollary_reach_probability(a2: f64, alpha: f64, x0: f64, x1: f64, t: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(t > 0.0) {
        return Err(Error::invalid("t", "must be positive"));
    }
    Ok((1.0 - (a2 * x0 + x1).abs() / (alpha * t)).clamp(0.0, 1.0))
}

/// An axis-aligned box of states.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl StateBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Shape(
                "box bounds must be nonempty and of equal length".into(),
            ));
        }
        if lo
            .iter()
            .zip(&hi)
            .any(|(a, b)| !(a <= b) || !a.is_finite() || !b.is_finite())
        {
            return Err(Error::invalid("box", "needs finite bounds with lo <= hi"));
        }
        Ok(Self { lo, hi })
    }

    pub fn cube(dim: usize, half_width: f64) -> Result<Self> {
        Self::new(vec![-half_width; dim], vec![half_width; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, r: &[f64]) -> bool {
        r.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(x, (a, b))| *a <= *x && *x <= *b)
    }

    /// Point `index` of the seeded Sobol sequence mapped into the box.
    pub fn sobol_point(&self, index: usize, seed: u64) -> Vec<f64> {
        let seed = (seed ^ (seed >> 32)) as u32;
        (0..self.dim())
            .map(|d| {
                let u = sobol_burley::sample(index as u32, d as u32, seed) as f64;
                self.lo[d] + u * (self.hi[d] - self.lo[d])
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    /// `|fᵢ(r)| ≤ a₁|r| + a₂`.
    LinearGrowth,
    /// `|∇g| + |D²g|` finite on the box.
    SurfaceRegularity,
    /// Analytic derivatives agree with finite differences of `g`.
    DerivativeConsistency,
    /// `∇g·f₁ ≥ α` where `g > 0`.
    UpperMargin,
    /// `∇g·f₂ ≤ −α` where `g < 0`.
    LowerMargin,
    /// `|D²g||σ|² ≤ C*|g|`.
    CurvatureNoise,
    /// Sampled difference quotients of `σ` within the declared constant.
    SigmaLipschitz,
    /// `g''·sgn(g) ≥ 0`.
    CurvatureSign,
    /// `b²(g g'' + g'²) ≤ C g²`, including near the zero set of `g`.
    InvarianceGrowth,
    /// `g g'' + g'² ≥ 0`.
    InvarianceSign,
}

impl Condition {
    pub fn id(&self) -> &'static str {
        match self {
            Condition::LinearGrowth => "linear-growth",
            Condition::SurfaceRegularity => "surface-regularity",
            Condition::DerivativeConsistency => "derivative-consistency",
            Condition::UpperMargin => "upper-margin",
            Condition::LowerMargin => "lower-margin",
            Condition::CurvatureNoise => "curvature-noise",
            Condition::SigmaLipschitz => "sigma-lipschitz",
            Condition::CurvatureSign => "curvature-sign",
            Condition::InvarianceGrowth => "invariance-growth",
            Condition::InvarianceSign => "invariance-sign",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub condition: Condition,
    pub point: Vec<f64>,
    /// Amount by which the inequality fails; always positive.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    /// Smallest sampled margin `min(∇g·f₁ on g>0, −∇g·f₂ on g<0)`.
    pub alpha_estimate: f64,
    pub c_star_estimate: f64,
    /// Largest sampled `b²(g g'' + g'²)/g²`; zero for finite-dimensional runs.
    pub invariance_constant: f64,
    pub lipschitz_g_estimate: f64,
    pub surface_bound: f64,
    /// At most [`MAX_VIOLATIONS_PER_CONDITION`] per condition, in sample order.
    pub violations: Vec<Violation>,
    pub violation_counts: BTreeMap<Condition, usize>,
    pub sample_count: usize,
}

impl ConditionReport {
    pub fn passed(&self) -> bool {
        self.violation_counts.is_empty()
    }

    pub fn count(&self, c: Condition) -> usize {
        self.violation_counts.get(&c).copied().unwrap_or(0)
    }

    fn empty(sample_count: usize) -> Self {
        Self {
            alpha_estimate: f64::INFINITY,
            c_star_estimate: 0.0,
            invariance_constant: 0.0,
            lipschitz_g_estimate: 0.0,
            surface_bound: 0.0,
            violations: Vec::new(),
            violation_counts: BTreeMap::new(),
            sample_count,
        }
    }

    fn push(&mut self, v: Violation) {
        let count = self.violation_counts.entry(v.condition).or_insert(0);
        *count += 1;
        if *count <= MAX_VIOLATIONS_PER_CONDITION {
            self.violations.push(v);
        }
    }
}

#[derive(Default)]
struct SampleOutcome {
    margin: Option<f64>,
    c_star: f64,
    invariance: f64,
    grad_norm: f64,
    surface: f64,
    violations: Vec<Violation>,
}

fn frobenius(m: &[f64]) -> f64 {
    norm(m)
}

/// Samples the box with a seeded Sobol sequence and checks the sliding
/// hypotheses for the finite-dimensional system at every point.
pub fn certify_conditions(
    s: &SystemSpec,
    domain: &StateBox,
    n_samples: usize,
    seed: u64,
) -> Result<ConditionReport> {
    if n_samples == 0 {
        return Err(Error::EmptySample);
    }
    if domain.dim() != s.dim() {
        return Err(Error::Shape(format!(
            "box dimension {} differs from system dimension {}",
            domain.dim(),
            s.dim()
        )));
    }
    let points: Vec<Vec<f64>> = (0..n_samples).map(|i| domain.sobol_point(i, seed)).collect();
    certify_points(s, &points)
}

/// Certification on an explicit point set; the report is assembled in point
/// order.
pub fn certify_points(s: &SystemSpec, points: &[Vec<f64>]) -> Result<ConditionReport> {
    if points.is_empty() {
        return Err(Error::EmptySample);
    }
    let n = s.dim();
    let m = s.noise_dim();
    if points.iter().any(|p| p.len() != n) {
        return Err(Error::Shape("sample point of wrong dimension".into()));
    }
    let surface = s.surface();
    let alpha = surface.alpha;
    let growth = s.drift().growth();
    let outcomes: Vec<SampleOutcome> = points
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut out = SampleOutcome::default();
            let mut violate = |condition, residual: f64| {
                out.violations.push(Violation {
                    condition,
                    point: r.clone(),
                    residual,
                })
            };
            let mut f1 = vec![0.0; n];
            let mut f2 = vec![0.0; n];
            let mut grad = vec![0.0; n];
            let mut hess = vec![0.0; n * n];
            let mut sig = vec![0.0; n * m];
            s.drift().upper(r, &mut f1);
            s.drift().lower(r, &mut f2);
            surface.grad(r, &mut grad);
            surface.hess(r, &mut hess);
            s.eval_sigma(r, &mut sig);
            let g = surface.g(r);

            let bound = growth.bound(norm(r));
            let tol = 1e-12 * (1.0 + bound);
            for f in [&f1, &f2] {
                let excess = norm(f) - bound;
                if excess > tol {
                    violate(Condition::LinearGrowth, excess);
                }
            }

            let (gn, hn) = (norm(&grad), frobenius(&hess));
            out.grad_norm = gn;
            out.surface = gn + hn;
            if !out.surface.is_finite() {
                violate(Condition::SurfaceRegularity, f64::INFINITY);
            }
            let mismatch = surface.derivative_mismatch(r);
            if !surface.is_linear() && mismatch > DERIVATIVE_TOLERANCE {
                violate(Condition::DerivativeConsistency, mismatch);
            }

            if g > SURFACE_EXCLUSION {
                let margin: f64 = grad.iter().zip(&f1).map(|(a, b)| a * b).sum();
                out.margin = Some(margin);
                if margin < alpha - MARGIN_ROUNDOFF * (1.0 + alpha) {
                    violate(Condition::UpperMargin, alpha - margin);
                }
            } else if g < -SURFACE_EXCLUSION {
                let margin: f64 = -grad.iter().zip(&f2).map(|(a, b)| a * b).sum::<f64>();
                out.margin = Some(margin);
                if margin < alpha - MARGIN_ROUNDOFF * (1.0 + alpha) {
                    violate(Condition::LowerMargin, alpha - margin);
                }
            }

            let lhs = hn * frobenius(&sig).powi(2);
            if g.abs() > SURFACE_EXCLUSION {
                out.c_star = lhs / g.abs();
            } else if lhs > 1e-12 {
                violate(Condition::CurvatureNoise, lhs);
            }

            if let Diffusion::Field { lipschitz, .. } = s.sigma() {
                // difference quotient against the next point in sequence order
                let q = &points[(i + 1) % points.len()];
                let dist: f64 = norm(&r.iter().zip(q).map(|(a, b)| a - b).collect::<Vec<_>>());
                if dist > 0.0 {
                    let mut sq = vec![0.0; n * m];
                    s.eval_sigma(q, &mut sq);
                    let diff: Vec<f64> = sig.iter().zip(&sq).map(|(a, b)| a - b).collect();
                    let quotient = frobenius(&diff) / dist;
                    if quotient > lipschitz * (1.0 + 1e-9) + 1e-12 {
                        violate(Condition::SigmaLipschitz, quotient - lipschitz);
                    }
                }
            }
            out
        })
        .collect();
    let mut report = fold_outcomes(outcomes, points.len());
    if report.alpha_estimate == f64::INFINITY {
        report.alpha_estimate = alpha;
    }
    Ok(report)
}

fn fold_outcomes(outcomes: Vec<SampleOutcome>, sample_count: usize) -> ConditionReport {
    let mut report = ConditionReport::empty(sample_count);
    for o in outcomes {
        if let Some(m) = o.margin {
            report.alpha_estimate = report.alpha_estimate.min(m);
        }
        report.c_star_estimate = report.c_star_estimate.max(o.c_star);
        report.invariance_constant = report.invariance_constant.max(o.invariance);
        report.lipschitz_g_estimate = report.lipschitz_g_estimate.max(o.grad_norm);
        report.surface_bound = report.surface_bound.max(o.surface);
        for v in o.violations {
            report.push(v);
        }
    }
    report
}

/// Scalar data of a heat-equation sliding scenario: reaction branches,
/// switching function with derivatives, and noise coefficient.
#[derive(Clone)]
pub struct ScalarHypotheses {
    pub f1: ScalarFn,
    pub f2: ScalarFn,
    pub g: ScalarFn,
    pub dg: ScalarFn,
    pub d2g: ScalarFn,
    pub b: ScalarFn,
    pub alpha: f64,
}

impl ScalarHypotheses {
    /// Derivatives of `g` by central differences.
    pub fn with_numeric_derivatives(
        f1: ScalarFn,
        f2: ScalarFn,
        g: ScalarFn,
        b: ScalarFn,
        alpha: f64,
    ) -> Self {
        let (g1, g2) = (g.clone(), g.clone());
        Self {
            f1,
            f2,
            dg: Arc::new(move |r| {
                let h = 1e-6 * (1.0 + r.abs());
                (g1(r + h) - g1(r - h)) / (2.0 * h)
            }),
            d2g: Arc::new(move |r| {
                let h = 1e-4 * (1.0 + r.abs());
                (g2(r + h) - 2.0 * g2(r) + g2(r - h)) / (h * h)
            }),
            g,
            b,
            alpha,
        }
    }
}

/// Ratio `b²(g g'' + g'²)/g²` evaluated at `r`.
fn invariance_ratio(h: &ScalarHypotheses, r: f64) -> f64 {
    let (g, dg, d2g, b) = ((h.g)(r), (h.dg)(r), (h.d2g)(r), (h.b)(r));
    b * b * (g * d2g + dg * dg) / (g * g)
}

/// Sampled check of the scalar hypotheses for the heat-equation scenarios
/// on `[lo, hi]`.
pub fn certify_spde_hypotheses(
    h: &ScalarHypotheses,
    interval: (f64, f64),
    n_samples: usize,
    seed: u64,
) -> Result<ConditionReport> {
    if n_samples == 0 {
        return Err(Error::EmptySample);
    }
    check_alpha(h.alpha)?;
    let (lo, hi) = interval;
    let domain = StateBox::new(vec![lo], vec![hi])?;
    let alpha = h.alpha;
    let outcomes: Vec<SampleOutcome> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let r = domain.sobol_point(i, seed)[0];
            let mut out = SampleOutcome::default();
            let mut violate = |condition, residual: f64| {
                out.violations.push(Violation {
                    condition,
                    point: vec![r],
                    residual,
                })
            };
            let (g, dg, d2g, b) = ((h.g)(r), (h.dg)(r), (h.d2g)(r), (h.b)(r));
            let (f1, f2) = ((h.f1)(r), (h.f2)(r));
            out.grad_norm = dg.abs();
            out.surface = dg.abs() + d2g.abs();
            if !out.surface.is_finite() {
                violate(Condition::SurfaceRegularity, f64::INFINITY);
            }
            if g > SURFACE_EXCLUSION {
                let margin = f1 * dg;
                out.margin = Some(margin);
                if margin < alpha - MARGIN_ROUNDOFF * (1.0 + alpha) {
                    violate(Condition::UpperMargin, alpha - margin);
                }
            } else if g < -SURFACE_EXCLUSION {
                let margin = -f2 * dg;
                out.margin = Some(margin);
                if margin < alpha - MARGIN_ROUNDOFF * (1.0 + alpha) {
                    violate(Condition::LowerMargin, alpha - margin);
                }
            }
            let lhs = d2g.abs() * b * b;
            if g.abs() > SURFACE_EXCLUSION {
                out.c_star = lhs / g.abs();
            } else if lhs > 1e-12 {
                violate(Condition::CurvatureNoise, lhs);
            }
            let sign_term = d2g * g.signum();
            if g != 0.0 && sign_term < -1e-12 {
                violate(Condition::CurvatureSign, -sign_term);
            }
            let inv = g * d2g + dg * dg;
            if inv < -1e-12 {
                violate(Condition::InvarianceSign, -inv);
            }
            if g.abs() > SURFACE_EXCLUSION {
                out.invariance = b * b * inv / (g * g);
            }
            out
        })
        .collect();
    let mut report = fold_outcomes(outcomes, n_samples);
    if report.alpha_estimate == f64::INFINITY {
        report.alpha_estimate = alpha;
    }
    for v in zero_set_probe(h, lo, hi) {
        report.push(v);
    }
    Ok(report)
}

/// Flags zeros of `g` near which `b²(g g'' + g'²)/g²` blows up, which no
/// finite constant can bound.
fn zero_set_probe(h: &ScalarHypotheses, lo: f64, hi: f64) -> Vec<Violation> {
    const SCAN: usize = 4096;
    let mut zeros = Vec::new();
    let at = |k: usize| lo + (hi - lo) * k as f64 / SCAN as f64;
    let mut prev = (h.g)(at(0));
    if prev == 0.0 {
        zeros.push(at(0));
    }
    for k in 1..=SCAN {
        let r = at(k);
        let v = (h.g)(r);
        if v == 0.0 {
            zeros.push(r);
        } else if prev != 0.0 && (v > 0.0) != (prev > 0.0) {
            let (mut a, mut b) = (at(k - 1), r);
            for _ in 0..80 {
                let mid = 0.5 * (a + b);
                if ((h.g)(mid) > 0.0) == (prev > 0.0) {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            zeros.push(0.5 * (a + b));
        }
        prev = v;
    }
    let mut out = Vec::new();
    for z in zeros {
        for side in [-1.0, 1.0] {
            let near = |k: i32| invariance_ratio(h, z + side * 10f64.powi(-k));
            let coarse = near(2);
            let fine = near(6);
            let unbounded = !fine.is_finite()
                || (coarse.abs() > 0.0 && fine.abs() > 100.0 * coarse.abs())
                || (coarse == 0.0 && fine.abs() > 1e-9);
            if unbounded {
                out.push(Violation {
                    condition: Condition::InvarianceGrowth,
                    point: vec![z + side * 1e-6],
                    residual: fine.abs(),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn example(a1: f64) -> SystemSpec {
        build_second_order_system(a1, 1.0, 2.0, Sigma0::Constant(0.3)).unwrap()
    }

    #[test]
    fn second_order_branches() {
        let s = example(0.1);
        let mut f = [0.0; 2];
        s.drift().upper(&[0.0, 1.0], &mut f);
        assert_abs_diff_eq!(f[0], -1.0);
        assert_abs_diff_eq!(f[1], 2.1, epsilon = 1e-15);
        assert_abs_diff_eq!(s.surface().g(&[0.3, 0.2]), 0.5, epsilon = 1e-15);
        assert_eq!(s.surface().c_star, 0.0);
        assert_eq!(s.surface().c_tilde, 0.0);
    }

    #[test]
    fn nonpositive_alpha_rejected() {
        assert!(build_second_order_system(0.1, 1.0, 0.0, Sigma0::Constant(0.3)).is_err());
        assert!(build_second_order_system(0.1, 1.0, -1.0, Sigma0::Constant(0.3)).is_err());
    }

    #[test]
    fn matched_example_certifies() {
        let s = build_second_order_system(1.0, 1.0, 2.0, Sigma0::Constant(0.3)).unwrap();
        let b = StateBox::cube(2, 5.0).unwrap();
        let rep = certify_conditions(&s, &b, 4096, 7).unwrap();
        assert!(rep.passed(), "{:?}", rep.violations.first());
        assert_abs_diff_eq!(rep.alpha_estimate, 2.0, epsilon = 1e-12);
        assert_eq!(rep.c_star_estimate, 0.0);
    }

    #[test]
    fn mismatched_gains_break_the_margin() {
        let s = example(0.1);
        let b = StateBox::cube(2, 5.0).unwrap();
        let rep = certify_conditions(&s, &b, 4096, 7).unwrap();
        assert!(rep.count(Condition::UpperMargin) + rep.count(Condition::LowerMargin) > 0);
        assert!(rep.violations.len() <= 2 * MAX_VIOLATIONS_PER_CONDITION);
    }

    #[test]
    fn repulsive_branch_is_reported() {
        let sa = SwitchedAffine {
            matrix: vec![0.0; 4],
            upper_offset: vec![0.0, -1.0],
            lower_offset: vec![0.0, 1.0],
            normal: vec![0.0, 1.0],
            level: 0.0,
        };
        let drift = JumpDrift::affine(sa).unwrap();
        let surf = SlidingSurface::linear(vec![0.0, 1.0], 0.0, 1.0).unwrap();
        let s = SystemSpec::new(drift, surf, Diffusion::Constant(vec![0.0, 0.1]), 1).unwrap();
        let rep = certify_conditions(&s, &StateBox::cube(2, 1.0).unwrap(), 256, 1).unwrap();
        assert!(rep.count(Condition::UpperMargin) > 0);
    }

    #[test]
    fn empty_sample_set_is_an_error() {
        let s = example(1.0);
        let b = StateBox::cube(2, 1.0).unwrap();
        assert_eq!(certify_conditions(&s, &b, 0, 0).unwrap_err(), Error::EmptySample);
    }

    #[test]
    fn mismatched_switch_rejected() {
        let drift = JumpDrift::affine(second_order_affine(0.1, 1.0, 2.0)).unwrap();
        let surf = SlidingSurface::linear(vec![2.0, 1.0], 0.0, 2.0).unwrap();
        assert!(SystemSpec::new(drift, surf, Diffusion::Constant(vec![0.0, 0.3]), 1).is_err());
    }

    #[test]
    fn reach_probability_examples() {
        assert_abs_diff_eq!(
            corollary_reach_probability(1.0, 2.0, 0.3, 0.2, 1.0).unwrap(),
            0.75,
            epsilon = 1e-15
        );
        assert_eq!(
            corollary_reach_probability(1.0, 2.0, 0.3, -0.3, 0.1).unwrap(),
            1.0
        );
        assert_eq!(
            corollary_reach_probability(1.0, 2.0, 0.3, 0.2, 1e-9).unwrap(),
            0.0
        );
        assert!(corollary_reach_probability(1.0, 2.0, 0.3, 0.2, 0.0).is_err());
    }

    fn scalar(
        f1: impl Fn(f64) -> f64 + Send + Sync + 'static,
        f2: impl Fn(f64) -> f64 + Send + Sync + 'static,
        g: (ScalarFn, ScalarFn, ScalarFn),
        b: impl Fn(f64) -> f64 + Send + Sync + 'static,
        alpha: f64,
    ) -> ScalarHypotheses {
        ScalarHypotheses {
            f1: Arc::new(f1),
            f2: Arc::new(f2),
            g: g.0,
            dg: g.1,
            d2g: g.2,
            b: Arc::new(b),
            alpha,
        }
    }

    fn identity() -> (ScalarFn, ScalarFn, ScalarFn) {
        (Arc::new(|r| r), Arc::new(|_| 1.0), Arc::new(|_| 0.0))
    }

    #[test]
    fn linear_spde_surface_passes() {
        let h = scalar(|_| 1.0, |_| -1.0, identity(), |r| r / 2.0, 1.0);
        let rep = certify_spde_hypotheses(&h, (-2.0, 2.0), 1024, 3).unwrap();
        assert!(rep.passed(), "{:?}", rep.violations);
        assert_eq!(rep.c_star_estimate, 0.0);
        assert_abs_diff_eq!(rep.invariance_constant, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn cubic_surface_with_noise_on_the_zero_set_fails() {
        let cubic: (ScalarFn, ScalarFn, ScalarFn) = (
            Arc::new(|r| r * r * r),
            Arc::new(|r| 3.0 * r * r),
            Arc::new(|r| 6.0 * r),
        );
        let h = scalar(|_| 1.0, |_| -1.0, cubic, |_| 1.0, 1e-3);
        let rep = certify_spde_hypotheses(&h, (-1.0, 1.0), 1024, 3).unwrap();
        assert!(rep.count(Condition::InvarianceGrowth) > 0);
        let v = rep
            .violations
            .iter()
            .find(|v| v.condition == Condition::InvarianceGrowth)
            .unwrap();
        assert!(v.point[0].abs() < 1e-3);
    }

    #[test]
    fn numeric_derivatives_match_analytic() {
        let h = ScalarHypotheses::with_numeric_derivatives(
            Arc::new(|_| 1.0),
            Arc::new(|_| -1.0),
            Arc::new(|r: f64| r.sin()),
            Arc::new(|_| 0.0),
            0.5,
        );
        for r in [-1.0, 0.2, 0.7] {
            assert_abs_diff_eq!((h.dg)(r), f64::cos(r), epsilon = 1e-8);
            assert_abs_diff_eq!((h.d2g)(r), -f64::sin(r), epsilon = 1e-5);
        }
    }
}
