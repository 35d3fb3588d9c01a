//! A small arithmetic expression language for scenario functions.
//!
//! Grammar (usual precedence, left-associative):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := ('-' | '+') unary | primary
//! primary := number | name | name '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Names resolve to state variables, then to scenario parameters, then to
//! the constants `pi` and `e`. Functions: `sign`, `abs`, `exp`, `sin`,
//! `cos`, `min`, `max`. Everything else is rejected so that the certifier
//! only ever sees functions it can differentiate.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{message} at offset {offset} in `{source_text}`")]
pub struct ExprError {
    pub offset: usize,
    pub message: String,
    pub source_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sign,
    Abs,
    Exp,
    Sin,
    Cos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Unary(Unary, Box<Expr>),
    Binary(Binary, Box<Expr>, Box<Expr>),
}

/// Names visible to an expression.
#[derive(Debug, Clone, Default)]
pub struct Scope {
    pub variables: Vec<String>,
    pub parameters: BTreeMap<String, f64>,
}

impl Scope {
    /// State variables `x1, …, xn` plus the given parameters.
    pub fn state(dim: usize, parameters: BTreeMap<String, f64>) -> Self {
        Self {
            variables: (1..=dim).map(|i| format!("x{i}")).collect(),
            parameters,
        }
    }

    fn resolve(&self, name: &str) -> Option<Expr> {
        if let Some(i) = self.variables.iter().position(|v| v == name) {
            return Some(Expr::Var(i));
        }
        if let Some(v) = self.parameters.get(name) {
            return Some(Expr::Const(*v));
        }
        match name {
            "pi" => Some(Expr::Const(std::f64::consts::PI)),
            "e" => Some(Expr::Const(std::f64::consts::E)),
            _ => None,
        }
    }
}

pub fn parse(text: &str, scope: &Scope) -> Result<Expr, ExprError> {
    let mut p = Parser {
        text,
        bytes: text.as_bytes(),
        pos: 0,
        scope,
    };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.bytes.len() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    text: &'a str,
    bytes: &'a [u8],
    pos: usize,
    scope: &'a Scope,
}

impl Parser<'_> {
    fn error(&self, message: impl Into<String>) -> ExprError {
        ExprError {
            offset: self.pos,
            message: message.into(),
            source_text: self.text.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = add(lhs, self.term()?);
            } else if self.eat(b'-') {
                lhs = sub(lhs, self.term()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = mul(lhs, self.unary()?);
            } else if self.eat(b'/') {
                lhs = div(lhs, self.unary()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat(b'-') {
            Ok(neg(self.unary()?))
        } else if self.eat(b'+') {
            self.unary()
        } else {
            self.primary()
        }
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected `)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.name(),
            Some(_) => Err(self.error("unexpected character")),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        let b = self.bytes;
        let digits = |p: &mut usize| {
            while *p < b.len() && b[*p].is_ascii_digit() {
                *p += 1;
            }
        };
        digits(&mut self.pos);
        if self.pos < b.len() && b[self.pos] == b'.' {
            self.pos += 1;
            digits(&mut self.pos);
        }
        if self.pos < b.len() && (b[self.pos] == b'e' || b[self.pos] == b'E') {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < b.len() && (b[self.pos] == b'+' || b[self.pos] == b'-') {
                self.pos += 1;
            }
            let before = self.pos;
            digits(&mut self.pos);
            if self.pos == before {
                // not an exponent after all, e.g. `2e` is rejected below
                self.pos = mark;
            }
        }
        let s = &self.text[start..self.pos];
        s.parse::<f64>().map(Expr::Const).map_err(|_| ExprError {
            offset: start,
            message: format!("invalid number `{s}`"),
            source_text: self.text.to_string(),
        })
    }

    fn name(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        while self.pos < self.bytes.len()
            && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = &self.text[start..self.pos];
        if self.peek() == Some(b'(') {
            self.pos += 1;
            let mut args = vec![self.expr()?];
            while self.eat(b',') {
                args.push(self.expr()?);
            }
            if !self.eat(b')') {
                return Err(self.error("expected `)` after arguments"));
            }
            return self.call(start, name, args);
        }
        self.scope.resolve(name).ok_or_else(|| ExprError {
            offset: start,
            message: format!("unknown name `{name}`"),
            source_text: self.text.to_string(),
        })
    }

    fn call(&self, start: usize, name: &str, mut args: Vec<Expr>) -> Result<Expr, ExprError> {
        let arity = |n: usize| {
            if args.len() == n {
                Ok(())
            } else {
                Err(ExprError {
                    offset: start,
                    message: format!("`{name}` takes {n} argument(s), got {}", args.len()),
                    source_text: self.text.to_string(),
                })
            }
        };
        let unary = match name {
            "sign" => Some(Unary::Sign),
            "abs" => Some(Unary::Abs),
            "exp" => Some(Unary::Exp),
            "sin" => Some(Unary::Sin),
            "cos" => Some(Unary::Cos),
            _ => None,
        };
        if let Some(u) = unary {
            arity(1)?;
            return Ok(apply1(u, args.pop().unwrap()));
        }
        let binary = match name {
            "min" => Binary::Min,
            "max" => Binary::Max,
            _ => {
                return Err(ExprError {
                    offset: start,
                    message: format!("unknown function `{name}`"),
                    source_text: self.text.to_string(),
                })
            }
        };
        arity(2)?;
        let b = args.pop().unwrap();
        let a = args.pop().unwrap();
        Ok(apply2(binary, a, b))
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn eval1(u: Unary, v: f64) -> f64 {
    match u {
        Unary::Sign => sign(v),
        Unary::Abs => v.abs(),
        Unary::Exp => v.exp(),
        Unary::Sin => v.sin(),
        Unary::Cos => v.cos(),
    }
}

fn eval2(b: Binary, x: f64, y: f64) -> f64 {
    match b {
        Binary::Min => x.min(y),
        Binary::Max => x.max(y),
    }
}

// Constructors that fold constants and drop neutral elements.

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(v) => Expr::Const(-v),
        Expr::Neg(inner) => *inner,
        a => Expr::Neg(Box::new(a)),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
        (Expr::Const(0.0), e) | (e, Expr::Const(0.0)) => e,
        (a, b) => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
        (e, Expr::Const(0.0)) => e,
        (Expr::Const(0.0), e) => neg(e),
        (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
        (Expr::Const(0.0), _) | (_, Expr::Const(0.0)) => Expr::Const(0.0),
        (Expr::Const(1.0), e) | (e, Expr::Const(1.0)) => e,
        (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x / y),
        (Expr::Const(0.0), _) => Expr::Const(0.0),
        (e, Expr::Const(1.0)) => e,
        (a, b) => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn apply1(u: Unary, a: Expr) -> Expr {
    match a {
        Expr::Const(v) => Expr::Const(eval1(u, v)),
        a => Expr::Unary(u, Box::new(a)),
    }
}

fn apply2(op: Binary, a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(eval2(op, x, y)),
        (a, b) => Expr::Binary(op, Box::new(a), Box::new(b)),
    }
}

impl Expr {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const(v) => *v,
            Expr::Var(i) => x[*i],
            Expr::Neg(a) => -a.eval(x),
            Expr::Add(a, b) => a.eval(x) + b.eval(x),
            Expr::Sub(a, b) => a.eval(x) - b.eval(x),
            Expr::Mul(a, b) => a.eval(x) * b.eval(x),
            Expr::Div(a, b) => a.eval(x) / b.eval(x),
            Expr::Unary(u, a) => eval1(*u, a.eval(x)),
            Expr::Binary(op, a, b) => eval2(*op, a.eval(x), b.eval(x)),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Expr::Const(_) => true,
            Expr::Var(_) => false,
            Expr::Neg(a) | Expr::Unary(_, a) => a.is_constant(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Binary(_, a, b) => {
                a.is_constant() && b.is_constant()
            }
        }
    }

    /// Structural affinity: sums of variables scaled by constants. Sound but
    /// not complete; `abs(x1)*0 + x1` style tricks are folded away at parse
    /// time, anything subtler is treated as nonlinear.
    pub fn is_affine(&self) -> bool {
        match self {
            Expr::Const(_) | Expr::Var(_) => true,
            Expr::Neg(a) => a.is_affine(),
            Expr::Add(a, b) | Expr::Sub(a, b) => a.is_affine() && b.is_affine(),
            Expr::Mul(a, b) => (a.is_constant() && b.is_affine()) || (b.is_constant() && a.is_affine()),
            Expr::Div(a, b) => a.is_affine() && b.is_constant(),
            Expr::Unary(..) | Expr::Binary(..) => self.is_constant(),
        }
    }

    /// Symbolic partial derivative with respect to variable `v`. `sign` has
    /// derivative zero and `abs`, `min`, `max` use their one-sided branches,
    /// so the result is exact away from kinks.
    pub fn derivative(&self, v: usize) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(i) => Expr::Const(if *i == v { 1.0 } else { 0.0 }),
            Expr::Neg(a) => neg(a.derivative(v)),
            Expr::Add(a, b) => add(a.derivative(v), b.derivative(v)),
            Expr::Sub(a, b) => sub(a.derivative(v), b.derivative(v)),
            Expr::Mul(a, b) => add(
                mul(a.derivative(v), (**b).clone()),
                mul((**a).clone(), b.derivative(v)),
            ),
            Expr::Div(a, b) => {
                let (da, db) = (a.derivative(v), b.derivative(v));
                if db == Expr::Const(0.0) {
                    div(da, (**b).clone())
                } else {
                    div(
                        sub(mul(da, (**b).clone()), mul((**a).clone(), db)),
                        mul((**b).clone(), (**b).clone()),
                    )
                }
            }
            Expr::Unary(u, a) => {
                let da = a.derivative(v);
                if da == Expr::Const(0.0) {
                    return Expr::Const(0.0);
                }
                let outer = match u {
                    Unary::Sign => return Expr::Const(0.0),
                    Unary::Abs => apply1(Unary::Sign, (**a).clone()),
                    Unary::Exp => apply1(Unary::Exp, (**a).clone()),
                    Unary::Sin => apply1(Unary::Cos, (**a).clone()),
                    Unary::Cos => neg(apply1(Unary::Sin, (**a).clone())),
                };
                mul(outer, da)
            }
            Expr::Binary(op, a, b) => {
                // min/max(a, b) = (a + b)/2 ∓ |a − b|/2
                let (da, db) = (a.derivative(v), b.derivative(v));
                let mean = div(add(da.clone(), db.clone()), Expr::Const(2.0));
                let half = div(
                    mul(
                        apply1(Unary::Sign, sub((**a).clone(), (**b).clone())),
                        sub(da, db),
                    ),
                    Expr::Const(2.0),
                );
                match op {
                    Binary::Min => sub(mean, half),
                    Binary::Max => add(mean, half),
                }
            }
        }
    }

    pub fn gradient(&self, dim: usize) -> Vec<Expr> {
        (0..dim).map(|v| self.derivative(v)).collect()
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(v) => write!(f, "{v}"),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Unary(u, a) => {
                let name = match u {
                    Unary::Sign => "sign",
                    Unary::Abs => "abs",
                    Unary::Exp => "exp",
                    Unary::Sin => "sin",
                    Unary::Cos => "cos",
                };
                write!(f, "{name}({a})")
            }
            Expr::Binary(op, a, b) => {
                let name = match op {
                    Binary::Min => "min",
                    Binary::Max => "max",
                };
                write!(f, "{name}({a}, {b})")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scope2() -> Scope {
        Scope::state(
            2,
            BTreeMap::from([("a2".to_string(), 1.5), ("alpha".to_string(), 2.0)]),
        )
    }

    #[test]
    fn precedence_and_folding() {
        let s = scope2();
        assert_eq!(parse("1 + 2 * 3 - 4 / 2", &s).unwrap(), Expr::Const(5.0));
        assert_eq!(parse("-(2 - 5)", &s).unwrap(), Expr::Const(3.0));
        assert_eq!(parse("2 * alpha", &s).unwrap(), Expr::Const(4.0));
        assert_eq!(parse("1.5e-1 + .5", &s).unwrap(), Expr::Const(0.65));
        let e = parse("a2*x1 + x2", &s).unwrap();
        assert_eq!(e.eval(&[2.0, -1.0]), 2.0);
        assert_eq!(parse("sign(0) + sign(-3)", &s).unwrap(), Expr::Const(-1.0));
        assert_eq!(parse("max(1, min(x1, 3))", &s).unwrap().eval(&[7.0, 0.0]), 3.0);
    }

    #[test]
    fn rejects_unknown_names_and_garbage() {
        let s = scope2();
        let err = parse("x3 + 1", &s).unwrap_err();
        assert_eq!(err.offset, 0);
        assert!(err.message.contains("x3"));
        assert!(parse("sqrt(x1)", &s).is_err());
        assert!(parse("1 +", &s).is_err());
        assert!(parse("(x1", &s).is_err());
        assert!(parse("x1 x2", &s).is_err());
        assert!(parse("min(x1)", &s).is_err());
        assert!(parse("2e", &s).is_err());
        assert!(parse("x1 ^ 2", &s).is_err());
    }

    #[test]
    fn affine_detection() {
        let s = scope2();
        for (text, affine) in [
            ("a2*x1 + x2", true),
            ("-x2", true),
            ("(x1 - 3)/alpha", true),
            ("0.1*x2 + alpha", true),
            ("x1*x2", false),
            ("sin(x1)", false),
            ("abs(x1)", false),
            ("1/x1", false),
            ("exp(alpha) * x1", true),
        ] {
            assert_eq!(parse(text, &s).unwrap().is_affine(), affine, "{text}");
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let s = scope2();
        let points = [[0.3, -0.7], [1.1, 0.4], [-2.0, 1.3]];
        for text in [
            "a2*x1 + x2",
            "x1*x1*x1 - 2*x1*x2",
            "sin(x1)*exp(x2/3)",
            "cos(x1 + x2)/(2 + x1*x1)",
            "abs(x1 - 5) + min(x1, 4*x2) - max(x2, -x1)",
            "0.2*sin(x1)",
        ] {
            let e = parse(text, &s).unwrap();
            for p in &points {
                for v in 0..2 {
                    let h = 1e-6;
                    let (mut a, mut b) = (*p, *p);
                    a[v] += h;
                    b[v] -= h;
                    let fd = (e.eval(&a) - e.eval(&b)) / (2.0 * h);
                    assert_abs_diff_eq!(e.derivative(v).eval(p), fd, epsilon = 1e-7);
                }
            }
        }
    }

    #[test]
    fn affine_coefficients_are_exact() {
        let e = parse("0.1*x2 + alpha", &scope2()).unwrap();
        assert_eq!(e.derivative(1).eval(&[9.0, 9.0]), 0.1);
        assert_eq!(e.derivative(0), Expr::Const(0.0));
    }

    #[test]
    fn display_round_trips() {
        let s = scope2();
        let e = parse("min(x1, -x2) * sin(x1) / (x2 + 3) - abs(x1)", &s).unwrap();
        let again = parse(&e.to_string(), &s).unwrap();
        assert_eq!(again.eval(&[0.3, 0.9]), e.eval(&[0.3, 0.9]));
    }
}
