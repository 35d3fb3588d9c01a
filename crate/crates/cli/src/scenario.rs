//! Turns a validated config into engine objects.

use std::collections::BTreeMap;
use std::sync::Arc;

use slide_core::filippov::{JumpDrift, LinearGrowth, SwitchedAffine};
use slide_core::sde::SimGrid;
use slide_core::spde::{build_eigensystem, NoiseSpec, SpdeScenario, SpectralField};
use slide_core::systems::{
    build_second_order_system, Diffusion, ScalarHypotheses, Sigma0, SlidingSurface, StateBox, SystemSpec,
};

use crate::config::{ConfigError, Kind, ScenarioConfig, Term, Terms};
use crate::expr::{parse, Expr, Scope};

/// Samples used to estimate growth and Lipschitz constants that the config
/// leaves implicit.
const ESTIMATE_SAMPLES: usize = 4096;
/// Sobol seed for those estimates, distinct from any certification seed.
const ESTIMATE_SEED: u64 = 0x5eed_e571;
/// Safety factor applied to sampled growth and Lipschitz estimates.
const ESTIMATE_MARGIN: f64 = 1.05;

// Built once per command, so the variant sizes do not matter.
#[allow(clippy::large_enum_variant)]
pub enum Built {
    Finite(FiniteScenario),
    Spde(SpdeSetup),
}

pub struct FiniteScenario {
    pub system: SystemSpec,
    pub x0: Vec<f64>,
    pub domain: StateBox,
    pub grid: SimGrid,
}

pub struct SpdeSetup {
    pub scenario: SpdeScenario,
    /// Scalar hypotheses of `spde_heat`.
    pub hypotheses: Option<ScalarHypotheses>,
    /// Two-variable system certified in place of `spde_coupled`.
    pub coupled_system: Option<SystemSpec>,
    pub interval: (f64, f64),
    pub alpha: f64,
}

fn err(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::invalid(field, reason)
}

fn core(field: &str, e: slide_core::Error) -> ConfigError {
    err(field, e.to_string())
}

fn scope(cfg: &ScenarioConfig, dim: usize) -> Scope {
    let s = &cfg.system;
    let mut params: BTreeMap<String, f64> = s.params.clone();
    for (k, v) in [("a1", s.a1), ("a2", s.a2), ("alpha", s.alpha)] {
        if let Some(v) = v {
            params.entry(k.to_string()).or_insert(v);
        }
    }
    Scope::state(dim, params)
}

fn parse_term(field: &str, t: &Term, scope: &Scope) -> Result<Expr, ConfigError> {
    match t {
        Term::Number(v) => Ok(Expr::Const(*v)),
        Term::Text(s) => parse(s, scope).map_err(|e| err(field, e.to_string())),
    }
}

fn parse_terms(field: &str, t: &Option<Terms>, dim: usize, scope: &Scope) -> Result<Vec<Expr>, ConfigError> {
    let t = t.as_ref().ok_or_else(|| err(field, "is required"))?.to_vec();
    if t.len() != dim {
        return Err(err(field, format!("needs {dim} component(s), got {}", t.len())));
    }
    t.iter()
        .enumerate()
        .map(|(i, term)| parse_term(&format!("{field}[{i}]"), term, scope))
        .collect()
}

/// Every expression must evaluate to a finite value at the probe point.
fn probe(field: &str, exprs: &[Expr], at: &[f64]) -> Result<(), ConfigError> {
    for (i, e) in exprs.iter().enumerate() {
        let v = e.eval(at);
        if !v.is_finite() {
            return Err(err(field, format!("component {i} evaluates to {v} at {at:?}")));
        }
    }
    Ok(())
}

fn probe_point(dim: usize) -> Vec<f64> {
    (0..dim).map(|i| 0.1 + 0.05 * i as f64).collect()
}

/// Row-major Jacobian of `exprs` in symbolic form.
fn jacobian(exprs: &[Expr], dim: usize) -> Vec<Expr> {
    exprs.iter().flat_map(|e| e.gradient(dim)).collect()
}

fn eval_all(exprs: &[Expr], r: &[f64], out: &mut [f64]) {
    for (o, e) in out.iter_mut().zip(exprs) {
        *o = e.eval(r);
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Exact affine decomposition `f(r) = A r + c`, when every component is
/// structurally affine.
fn affine_parts(exprs: &[Expr], dim: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    if !exprs.iter().all(Expr::is_affine) {
        return None;
    }
    let zero = vec![0.0; dim];
    let matrix = jacobian(exprs, dim).iter().map(|e| e.eval(&zero)).collect();
    let offset = exprs.iter().map(|e| e.eval(&zero)).collect();
    Some((matrix, offset))
}

/// Sampled linear-growth constants of both branches on `domain`, inflated
/// by a safety margin.
fn estimate_growth(f1: &[Expr], f2: &[Expr], domain: &StateBox) -> LinearGrowth {
    let dim = domain.dim();
    let zero = vec![0.0; dim];
    let mut buf = vec![0.0; f1.len()];
    let mut a2: f64 = 0.0;
    for f in [f1, f2] {
        eval_all(f, &zero, &mut buf);
        a2 = a2.max(norm(&buf));
    }
    let mut a1: f64 = 0.0;
    for i in 0..ESTIMATE_SAMPLES {
        let r = domain.sobol_point(i, ESTIMATE_SEED);
        let rn = norm(&r);
        if rn == 0.0 {
            continue;
        }
        for f in [f1, f2] {
            eval_all(f, &r, &mut buf);
            a1 = a1.max((norm(&buf) - a2) / rn);
        }
    }
    LinearGrowth {
        a1: a1 * ESTIMATE_MARGIN,
        a2: a2 * ESTIMATE_MARGIN,
    }
}

/// Largest sampled Frobenius norm of a symbolic Jacobian on `domain`.
fn estimate_lipschitz(jac: &[Expr], domain: &StateBox) -> f64 {
    let mut buf = vec![0.0; jac.len()];
    let mut worst: f64 = 0.0;
    for i in 0..ESTIMATE_SAMPLES {
        let r = domain.sobol_point(i, ESTIMATE_SEED);
        eval_all(jac, &r, &mut buf);
        worst = worst.max(norm(&buf));
    }
    worst * ESTIMATE_MARGIN
}

fn vector_field(exprs: Vec<Expr>) -> slide_core::filippov::VectorField {
    Arc::new(move |r: &[f64], out: &mut [f64]| eval_all(&exprs, r, out))
}

fn scalar_field(e: Expr) -> slide_core::filippov::ScalarField {
    Arc::new(move |r: &[f64]| e.eval(r))
}

/// Drift from two branch expressions and the switching function: the exact
/// switched-affine form when possible, otherwise a general drift.
fn build_drift(
    cfg: &ScenarioConfig,
    f1: Vec<Expr>,
    f2: Vec<Expr>,
    g: &Expr,
    domain: &StateBox,
) -> Result<JumpDrift, ConfigError> {
    let dim = domain.dim();
    if let (Some((a1, c1)), Some((a2, c2)), Some((w, level))) = (
        affine_parts(&f1, dim),
        affine_parts(&f2, dim),
        affine_parts(std::slice::from_ref(g), dim),
    ) {
        if a1 == a2 && w.iter().any(|v| *v != 0.0) {
            let drift = JumpDrift::affine(SwitchedAffine {
                matrix: a1,
                upper_offset: c1,
                lower_offset: c2,
                normal: w,
                level: level[0],
            })
            .map_err(|e| core("system", e))?;
            return match cfg.system.growth {
                Some(gr) => drift
                    .with_growth(LinearGrowth { a1: gr.a1, a2: gr.a2 })
                    .map_err(|e| core("system.growth", e)),
                None => Ok(drift),
            };
        }
    }
    let growth = match cfg.system.growth {
        Some(gr) => LinearGrowth { a1: gr.a1, a2: gr.a2 },
        None => estimate_growth(&f1, &f2, domain),
    };
    JumpDrift::general(
        dim,
        vector_field(f1),
        vector_field(f2),
        scalar_field(g.clone()),
        growth,
    )
    .map_err(|e| core("system", e))
}

fn build_surface(g: &Expr, alpha: f64, c1: f64, domain: &StateBox) -> Result<SlidingSurface, ConfigError> {
    let dim = domain.dim();
    let surface = match affine_parts(std::slice::from_ref(g), dim) {
        Some((w, level)) if w.iter().any(|v| *v != 0.0) => {
            SlidingSurface::linear(w, level[0], alpha).map_err(|e| core("system.g", e))?
        }
        Some(_) => return Err(err("system.g", "must depend on the state")),
        None => {
            let grad = g.gradient(dim);
            let hess = jacobian(&grad, dim);
            let lipschitz = estimate_lipschitz(&grad, domain);
            SlidingSurface::new(
                dim,
                scalar_field(g.clone()),
                vector_field(grad),
                vector_field(hess),
                alpha,
                lipschitz,
            )
            .map_err(|e| core("system.g", e))?
        }
    };
    surface.with_c1(c1).map_err(|e| core("certify.c1", e))
}

fn build_sigma(
    cfg: &ScenarioConfig,
    rows: &[Vec<Expr>],
    domain: &StateBox,
) -> Result<(Diffusion, usize), ConfigError> {
    let m = rows[0].len();
    if m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(err("system.sigma", "rows must be nonempty and of equal length"));
    }
    let flat: Vec<Expr> = rows.iter().flatten().cloned().collect();
    if flat.iter().all(Expr::is_constant) {
        return Ok((Diffusion::Constant(flat.iter().map(|e| e.eval(&[])).collect()), m));
    }
    let lipschitz = match cfg.system.sigma_lipschitz {
        Some(l) => l,
        None => estimate_lipschitz(&jacobian(&flat, domain.dim()), domain),
    };
    Ok((
        Diffusion::Field {
            eval: vector_field(flat),
            lipschitz,
        },
        m,
    ))
}

fn alpha(cfg: &ScenarioConfig) -> Result<f64, ConfigError> {
    cfg.system.alpha.ok_or_else(|| err("system.alpha", "is required"))
}

fn grid(cfg: &ScenarioConfig) -> Result<SimGrid, ConfigError> {
    SimGrid::new(cfg.numerics.t_end, cfg.numerics.dt).map_err(|e| core("numerics.dt", e))
}

pub fn build(cfg: &ScenarioConfig) -> Result<Built, ConfigError> {
    match cfg.kind {
        Kind::FiniteDim => build_finite(cfg).map(Built::Finite),
        Kind::SecondOrderExample => build_second_order(cfg).map(Built::Finite),
        Kind::SpdeHeat => build_spde_heat(cfg).map(Built::Spde),
        Kind::SpdeCoupled => build_spde_coupled(cfg).map(Built::Spde),
    }
}

fn required_x0(cfg: &ScenarioConfig) -> Result<Vec<f64>, ConfigError> {
    cfg.system
        .x0
        .clone()
        .ok_or_else(|| err("system.x0", "is required"))
}

fn build_finite(cfg: &ScenarioConfig) -> Result<FiniteScenario, ConfigError> {
    let x0 = required_x0(cfg)?;
    let n = x0.len();
    if n == 0 {
        return Err(err("system.x0", "must be nonempty"));
    }
    let sc = scope(cfg, n);
    let domain = StateBox::cube(n, cfg.certify.half_width).map_err(|e| core("certify.half_width", e))?;
    let f1 = parse_terms("system.f1", &cfg.system.f1, n, &sc)?;
    let f2 = parse_terms("system.f2", &cfg.system.f2, n, &sc)?;
    let g_text = cfg
        .system
        .g
        .as_ref()
        .ok_or_else(|| err("system.g", "is required"))?;
    let g = parse(g_text, &sc).map_err(|e| err("system.g", e.to_string()))?;
    let rows: Vec<Vec<Expr>> = match &cfg.system.sigma {
        Some(rows) => {
            if rows.len() != n {
                return Err(err("system.sigma", format!("needs {n} rows, got {}", rows.len())));
            }
            rows.iter()
                .enumerate()
                .map(|(i, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(j, t)| parse_term(&format!("system.sigma[{i}][{j}]"), t, &sc))
                        .collect()
                })
                .collect::<Result<_, _>>()?
        }
        None => vec![vec![Expr::Const(0.0)]; n],
    };
    let at = probe_point(n);
    probe("system.f1", &f1, &at)?;
    probe("system.f2", &f2, &at)?;
    probe("system.g", std::slice::from_ref(&g), &at)?;
    for (i, row) in rows.iter().enumerate() {
        probe(&format!("system.sigma[{i}]"), row, &at)?;
    }
    let alpha = alpha(cfg)?;
    let drift = build_drift(cfg, f1, f2, &g, &domain)?;
    let surface = build_surface(&g, alpha, cfg.certify.c1, &domain)?;
    let (sigma, m) = build_sigma(cfg, &rows, &domain)?;
    let system = SystemSpec::new(drift, surface, sigma, m).map_err(|e| core("system", e))?;
    Ok(FiniteScenario {
        system,
        x0,
        domain,
        grid: grid(cfg)?,
    })
}

fn build_second_order(cfg: &ScenarioConfig) -> Result<FiniteScenario, ConfigError> {
    let s = &cfg.system;
    let a1 = s.a1.ok_or_else(|| err("system.a1", "is required"))?;
    let a2 = s.a2.ok_or_else(|| err("system.a2", "is required"))?;
    let alpha = alpha(cfg)?;
    let x0 = required_x0(cfg)?;
    if x0.len() != 2 {
        return Err(err("system.x0", "needs two components"));
    }
    let domain = StateBox::cube(2, cfg.certify.half_width).map_err(|e| core("certify.half_width", e))?;
    let sc = scope(cfg, 2);
    let sigma0 = match s.sigma0.as_ref().unwrap_or(&Term::Number(0.0)) {
        Term::Number(v) => Sigma0::Constant(*v),
        t => {
            let e = parse_term("system.sigma0", t, &sc)?;
            probe("system.sigma0", std::slice::from_ref(&e), &probe_point(2))?;
            if e.is_constant() {
                Sigma0::Constant(e.eval(&[]))
            } else {
                let lipschitz = match s.sigma_lipschitz {
                    Some(l) => l,
                    None => estimate_lipschitz(&e.gradient(2), &domain),
                };
                Sigma0::Field {
                    eval: scalar_field(e),
                    lipschitz,
                }
            }
        }
    };
    let mut system = build_second_order_system(a1, a2, alpha, sigma0).map_err(|e| core("system", e))?;
    let surface = system
        .surface()
        .clone()
        .with_c1(cfg.certify.c1)
        .map_err(|e| core("certify.c1", e))?;
    *system.surface_mut() = surface;
    Ok(FiniteScenario {
        system,
        x0,
        domain,
        grid: grid(cfg)?,
    })
}

fn eigen_setup(cfg: &ScenarioConfig) -> Result<(Arc<slide_core::spde::Eigensystem>, NoiseSpec), ConfigError> {
    let n = &cfg.numerics;
    let es = build_eigensystem(n.length, n.n_modes, n.n_grid).map_err(|e| core("numerics.n_grid", e))?;
    let noise = NoiseSpec::power_law(n.n_modes, n.noise_exponent);
    Ok((Arc::new(es), noise))
}

fn modal_field(
    field: &str,
    es: &slide_core::spde::Eigensystem,
    coefficients: Option<&Vec<f64>>,
) -> Result<SpectralField, ConfigError> {
    let mut c = coefficients.cloned().unwrap_or_default();
    if c.len() > es.n_modes() {
        return Err(err(
            field,
            format!("has {} coefficients for {} modes", c.len(), es.n_modes()),
        ));
    }
    c.resize(es.n_modes(), 0.0);
    SpectralField::from_coefficients(es, c).map_err(|e| core(field, e))
}

fn build_spde_heat(cfg: &ScenarioConfig) -> Result<SpdeSetup, ConfigError> {
    let sc = scope(cfg, 1);
    let alpha = alpha(cfg)?;
    let h = cfg.certify.half_width;
    let domain = StateBox::cube(1, h).map_err(|e| core("certify.half_width", e))?;
    let f1 = parse_terms("system.f1", &cfg.system.f1, 1, &sc)?;
    let f2 = parse_terms("system.f2", &cfg.system.f2, 1, &sc)?;
    let g_text = cfg.system.g.as_deref().unwrap_or("x1");
    let g = parse(g_text, &sc).map_err(|e| err("system.g", e.to_string()))?;
    let b = parse_terms("system.b", &cfg.system.b, 1, &sc)?.remove(0);
    let at = probe_point(1);
    probe("system.f1", &f1, &at)?;
    probe("system.f2", &f2, &at)?;
    probe("system.g", std::slice::from_ref(&g), &at)?;
    probe("system.b", std::slice::from_ref(&b), &at)?;

    let scalar = |e: &Expr| -> slide_core::systems::ScalarFn {
        let e = e.clone();
        Arc::new(move |r: f64| e.eval(&[r]))
    };
    let dg = g.derivative(0);
    let hypotheses = ScalarHypotheses {
        f1: scalar(&f1[0]),
        f2: scalar(&f2[0]),
        g: scalar(&g),
        dg: scalar(&dg),
        d2g: scalar(&dg.derivative(0)),
        b: scalar(&b),
        alpha,
    };
    let drift = build_drift(cfg, f1, f2, &g, &domain)?;
    let (es, noise) = eigen_setup(cfg)?;
    let x0 = modal_field("system.x0", &es, cfg.system.x0.as_ref())?;
    let bf = b.clone();
    let scenario = SpdeScenario::scalar(es, noise, grid(cfg)?, drift, move |r| bf.eval(&[r]), x0)
        .map_err(|e| core("system", e))?;
    Ok(SpdeSetup {
        scenario,
        hypotheses: Some(hypotheses),
        coupled_system: None,
        interval: (-h, h),
        alpha,
    })
}

fn build_spde_coupled(cfg: &ScenarioConfig) -> Result<SpdeSetup, ConfigError> {
    let sc = scope(cfg, 2);
    let alpha = alpha(cfg)?;
    let h = cfg.certify.half_width;
    let domain = StateBox::cube(2, h).map_err(|e| core("certify.half_width", e))?;
    let f1 = parse_terms("system.f1", &cfg.system.f1, 2, &sc)?;
    let f2 = parse_terms("system.f2", &cfg.system.f2, 2, &sc)?;
    let g_text = cfg
        .system
        .g
        .as_ref()
        .ok_or_else(|| err("system.g", "is required"))?;
    let g = parse(g_text, &sc).map_err(|e| err("system.g", e.to_string()))?;
    let b = parse_terms("system.b", &cfg.system.b, 2, &sc)?;
    let at = probe_point(2);
    probe("system.f1", &f1, &at)?;
    probe("system.f2", &f2, &at)?;
    probe("system.g", std::slice::from_ref(&g), &at)?;
    probe("system.b", &b, &at)?;

    let drift = build_drift(cfg, f1, f2, &g, &domain)?;
    let surface = build_surface(&g, alpha, cfg.certify.c1, &domain)?;
    // the pointwise system with independent noises, σ = diag(b₁, b₂)
    let rows = vec![
        vec![b[0].clone(), Expr::Const(0.0)],
        vec![Expr::Const(0.0), b[1].clone()],
    ];
    let (sigma, m) = build_sigma(cfg, &rows, &domain)?;
    let coupled_system = SystemSpec::new(drift.clone(), surface, sigma, m).map_err(|e| core("system", e))?;

    let (es, noise) = eigen_setup(cfg)?;
    let x0 = modal_field("system.x0", &es, cfg.system.x0.as_ref())?;
    let y0 = modal_field("system.y0", &es, cfg.system.y0.as_ref())?;
    let [b1, b2] = [scalar_field(b[0].clone()), scalar_field(b[1].clone())];
    let scenario = SpdeScenario::coupled(es, noise, grid(cfg)?, drift, [b1, b2], x0, y0)
        .map_err(|e| core("system", e))?;
    Ok(SpdeSetup {
        scenario,
        hypotheses: None,
        coupled_system: Some(coupled_system),
        interval: (-h, h),
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_scenario_str;

    #[test]
    fn affine_expressions_become_the_closed_form() {
        let cfg = parse_scenario_str(
            r#"{"kind": "finite_dim", "system": {
                "params": {"a1": 0.1, "a2": 1.0}, "alpha": 2,
                "f1": ["-x2", "a1*x2 + alpha"], "f2": ["-x2", "a1*x2 - alpha"],
                "g": "a2*x1 + x2", "sigma": [[0], ["0.3"]], "x0": [0.3, 0.2]}}"#,
        )
        .unwrap();
        let Built::Finite(f) = build(&cfg).unwrap() else {
            panic!()
        };
        assert!(matches!(
            f.system.drift().form(),
            slide_core::filippov::DriftForm::Affine(_)
        ));
        assert!(f.system.sigma_is_constant());
        assert_eq!(f.system.surface().g(&[0.3, 0.2]), 0.5);
        // same drift as the built-in example
        let reference = build_second_order_system(0.1, 1.0, 2.0, Sigma0::Constant(0.3)).unwrap();
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        for p in [[0.3, 0.2], [-1.0, 0.5], [2.0, -4.0]] {
            f.system.drift().eval(&p, &mut a);
            reference.drift().eval(&p, &mut b);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn nonlinear_expressions_become_general() {
        let cfg = parse_scenario_str(
            r#"{"kind": "finite_dim", "system": {"alpha": 1,
                "f1": ["1 + 0.1*sin(x1)"], "f2": ["-1"], "g": "x1",
                "sigma": [["0.2*sin(x1)"]], "x0": [0.5]}}"#,
        )
        .unwrap();
        let Built::Finite(f) = build(&cfg).unwrap() else {
            panic!()
        };
        assert!(matches!(
            f.system.drift().form(),
            slide_core::filippov::DriftForm::General { .. }
        ));
        let gr = f.system.drift().growth();
        let mut v = [0.0];
        for k in 0..=10_000 {
            let r = -5.0 + k as f64 / 1000.0;
            for branch in [true, false] {
                if branch {
                    f.system.drift().upper(&[r], &mut v)
                } else {
                    f.system.drift().lower(&[r], &mut v)
                }
                assert!(v[0].abs() <= gr.a1 * r.abs() + gr.a2, "{r}");
            }
        }
        assert!(!f.system.sigma_is_constant());
        assert!((f.system.sigma_lipschitz_estimate() - 0.2 * ESTIMATE_MARGIN).abs() < 1e-3);
    }

    #[test]
    fn probe_rejects_non_finite_expressions() {
        let cfg = parse_scenario_str(
            r#"{"kind": "finite_dim", "system": {"alpha": 1,
                "f1": ["1/(x1 - 0.1)"], "f2": ["-1"], "g": "x1", "x0": [0.5]}}"#,
        )
        .unwrap();
        match build(&cfg) {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "system.f1"),
            Err(e) => panic!("{e}"),
            Ok(_) => panic!("accepted a pole at the probe point"),
        }
        let cfg = parse_scenario_str(
            r#"{"kind": "finite_dim", "system": {"alpha": 1,
                "f1": ["1"], "f2": ["-1"], "g": "x1 + y", "x0": [0.5]}}"#,
        )
        .unwrap();
        assert!(matches!(build(&cfg), Err(ConfigError::Invalid { field, .. }) if field == "system.g"));
    }

    #[test]
    fn spde_kinds_build() {
        let cfg = parse_scenario_str(
            r#"{"kind": "spde_heat", "system": {"alpha": 2, "f1": "2", "f2": "-2",
                "g": "x1", "b": "0.2*sin(x1)", "x0": [0.3]},
                "numerics": {"n_modes": 8}}"#,
        )
        .unwrap();
        let Built::Spde(s) = build(&cfg).unwrap() else {
            panic!()
        };
        assert!((s.scenario.initial_g_norm() - 0.3).abs() < 1e-12);
        let h = s.hypotheses.unwrap();
        assert_eq!((h.d2g)(0.7), 0.0);

        let cfg = parse_scenario_str(
            r#"{"kind": "spde_coupled", "system": {"alpha": 1,
                "f1": ["1", "1"], "f2": ["-1", "-1"], "g": "x1 + x2",
                "b": ["0.1*x1", "0.1*x2"], "x0": [0.2], "y0": [0, 0.1]},
                "numerics": {"n_modes": 8}}"#,
        )
        .unwrap();
        let Built::Spde(s) = build(&cfg).unwrap() else {
            panic!()
        };
        assert_eq!(s.scenario.n_fields(), 2);
        assert!(s.coupled_system.is_some());
    }
}
