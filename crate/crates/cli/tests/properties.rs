use std::collections::BTreeMap;

use proptest::prelude::*;
use slide_cli::export::fmt_f64;
use slide_cli::expr::{parse, Scope};

fn leaf() -> impl Strategy<Value = String> {
    prop_oneof![
        (0.1f64..5.0).prop_map(|c| format!("{c}")),
        Just("x1".to_string()),
        Just("x2".to_string()),
        Just("k".to_string()),
    ]
}

fn expression() -> impl Strategy<Value = String> {
    leaf().prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} + {b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} - {b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("{a} * {b}")),
            inner.clone().prop_map(|a| format!("-{a}")),
            inner.clone().prop_map(|a| format!("sin({a})")),
            inner.clone().prop_map(|a| format!("abs({a})")),
            (inner.clone(), inner).prop_map(|(a, b)| format!("max({a}, {b})")),
        ]
    })
}

fn scope() -> Scope {
    Scope::state(2, BTreeMap::from([("k".to_string(), 0.7)]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn csv_floats_round_trip(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn rendered_expressions_reparse_to_the_same_function(
        text in expression(),
        x1 in -2.0f64..2.0,
        x2 in -2.0f64..2.0,
    ) {
        let s = scope();
        let e = parse(&text, &s).unwrap();
        let again = parse(&e.to_string(), &s).unwrap();
        let (a, b) = (e.eval(&[x1, x2]), again.eval(&[x1, x2]));
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{} vs {}: {} {}", text, e, a, b);
    }

    #[test]
    fn affine_text_has_constant_gradient(
        a in -5.0f64..5.0,
        b in -5.0f64..5.0,
        c in -5.0f64..5.0,
        x1 in -3.0f64..3.0,
        x2 in -3.0f64..3.0,
    ) {
        let text = format!("{a}*x1 + ({b})*x2*k - ({c})");
        let e = parse(&text, &scope()).unwrap();
        prop_assert!(e.is_affine());
        let grad = e.gradient(2);
        prop_assert!(grad.iter().all(|g| g.is_constant()));
        prop_assert!((grad[0].eval(&[x1, x2]) - a).abs() <= 1e-12);
        prop_assert!((grad[1].eval(&[x1, x2]) - 0.7 * b).abs() <= 1e-12);
        let want = a * x1 + b * x2 * 0.7 - c;
        prop_assert!((e.eval(&[x1, x2]) - want).abs() <= 1e-12 * (1.0 + want.abs()));
    }

    #[test]
    fn derivative_matches_central_difference(
        text in expression(),
        x1 in -1.5f64..1.5,
        x2 in -1.5f64..1.5,
    ) {
        let e = parse(&text, &scope()).unwrap();
        let h = 1e-6;
        for v in 0..2 {
            let mut p = [x1, x2];
            let mut m = [x1, x2];
            p[v] += h;
            m[v] -= h;
            let (fp, fm) = (e.eval(&p), e.eval(&m));
            let fd = (fp - fm) / (2.0 * h);
            let d = e.derivative(v).eval(&[x1, x2]);
            // kinks of abs and max inside the stencil break the comparison
            let smooth = ((fp - e.eval(&[x1, x2])) - (e.eval(&[x1, x2]) - fm)).abs()
                <= 1e-6 * (1.0 + fd.abs());
            if smooth {
                prop_assert!((d - fd).abs() <= 1e-4 * (1.0 + fd.abs()), "{} d/dx{}: {} vs {}", e, v + 1, d, fd);
            }
        }
    }
}
