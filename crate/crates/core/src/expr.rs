//! Closed-form coefficient expressions over `(t, x1..xn)`.
//!
//! Grammar: numeric literals, identifiers `t`, `x1`..`x9` and `pi`, binary
//! operators `+ - * / ^`, unary minus, and the functions `sin`, `cos`, `exp`.
//! Expressions keep their tree so exact partial derivatives are available,
//! which the non-divergence rewrite of the operator depends on.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("unexpected character {0:?} at offset {1}")]
    UnexpectedChar(char, usize),
    #[error("unexpected end of input")]
    UnexpectedEnd,
    #[error("unexpected token {0:?}")]
    UnexpectedToken(String),
    #[error("unknown identifier {0:?}")]
    UnknownIdent(String),
    #[error("coordinate x{index} exceeds dimension {dim}")]
    DimensionExceeded { index: usize, dim: usize },
    #[error("expression {0} has no symbolic derivative (non-constant exponent)")]
    NonDifferentiable(String),
}

/// Independent variable of an expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    Time,
    /// Zero-based spatial coordinate.
    Coord(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Exp => v.exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Default for Expr {
    fn default() -> Self {
        Expr::Const(0.0)
    }
}

impl Expr {
    pub fn constant(v: f64) -> Self {
        Expr::Const(v)
    }

    pub fn time() -> Self {
        Expr::Var(Var::Time)
    }

    /// Zero-based coordinate `x_{i+1}`.
    pub fn coord(i: usize) -> Self {
        Expr::Var(Var::Coord(i))
    }

    /// Parses an expression; coordinates beyond `dim` are rejected.
    pub fn parse(src: &str, dim: usize) -> Result<Self, ExprError> {
        let tokens = tokenize(src)?;
        let mut p = Parser { tokens, pos: 0, dim };
        let e = p.expr()?;
        match p.peek() {
            None => Ok(e),
            Some(tok) => Err(ExprError::UnexpectedToken(format!("{tok:?}"))),
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(Var::Time) => t,
            Expr::Var(Var::Coord(i)) => x.get(*i).copied().unwrap_or(0.0),
            Expr::Neg(a) => -a.eval(t, x),
            Expr::Add(a, b) => a.eval(t, x) + b.eval(t, x),
            Expr::Sub(a, b) => a.eval(t, x) - b.eval(t, x),
            Expr::Mul(a, b) => a.eval(t, x) * b.eval(t, x),
            Expr::Div(a, b) => a.eval(t, x) / b.eval(t, x),
            Expr::Pow(a, b) => {
                let base = a.eval(t, x);
                match **b {
                    Expr::Const(e) if e == e.trunc() && e.abs() <= 64.0 => base.powi(e as i32),
                    _ => base.powf(b.eval(t, x)),
                }
            }
            Expr::Call(f, a) => f.apply(a.eval(t, x)),
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn depends_on(&self, var: Var) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(v) => *v == var,
            Expr::Neg(a) | Expr::Call(_, a) => a.depends_on(var),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                a.depends_on(var) || b.depends_on(var)
            }
        }
    }

    /// Largest zero-based coordinate index referenced, if any.
    pub fn max_coord(&self) -> Option<usize> {
        match self {
            Expr::Const(_) | Expr::Var(Var::Time) => None,
            Expr::Var(Var::Coord(i)) => Some(*i),
            Expr::Neg(a) | Expr::Call(_, a) => a.max_coord(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                match (a.max_coord(), b.max_coord()) {
                    (Some(p), Some(q)) => Some(p.max(q)),
                    (p, q) => p.or(q),
                }
            }
        }
    }

    /// Exact partial derivative, constant-folded.
    pub fn derivative(&self, var: Var) -> Result<Expr, ExprError> {
        Ok(match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(v) => Expr::Const(if *v == var { 1.0 } else { 0.0 }),
            Expr::Neg(a) => neg(a.derivative(var)?),
            Expr::Add(a, b) => add(a.derivative(var)?, b.derivative(var)?),
            Expr::Sub(a, b) => sub(a.derivative(var)?, b.derivative(var)?),
            Expr::Mul(a, b) => add(
                mul(a.derivative(var)?, (**b).clone()),
                mul((**a).clone(), b.derivative(var)?),
            ),
            Expr::Div(a, b) => {
                let num = sub(
                    mul(a.derivative(var)?, (**b).clone()),
                    mul((**a).clone(), b.derivative(var)?),
                );
                div(num, pow((**b).clone(), Expr::Const(2.0)))
            }
            Expr::Pow(a, b) => {
                if b.depends_on(var) {
                    return Err(ExprError::NonDifferentiable(self.to_string()));
                }
                let Some(e) = b.as_constant() else {
                    return Err(ExprError::NonDifferentiable(self.to_string()));
                };
                mul(
                    mul(Expr::Const(e), pow((**a).clone(), Expr::Const(e - 1.0))),
                    a.derivative(var)?,
                )
            }
            Expr::Call(f, a) => {
                let inner = a.derivative(var)?;
                let outer = match f {
                    Func::Sin => call(Func::Cos, (**a).clone()),
                    Func::Cos => neg(call(Func::Sin, (**a).clone())),
                    Func::Exp => call(Func::Exp, (**a).clone()),
                };
                mul(outer, inner)
            }
        })
    }
}

// Smart constructors fold constants so derivative trees stay small and
// constant coefficients are recognised as such.

pub fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(-c),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

pub fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(p), Expr::Const(q)) => Expr::Const(p + q),
        (Expr::Const(z), e) | (e, Expr::Const(z)) if z == 0.0 => e,
        (a, b) => Expr::Add(Box::new(a), Box::new(b)),
    }
}

pub fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(p), Expr::Const(q)) => Expr::Const(p - q),
        (e, Expr::Const(z)) if z == 0.0 => e,
        (Expr::Const(z), e) if z == 0.0 => neg(e),
        (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

pub fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(p), Expr::Const(q)) => Expr::Const(p * q),
        (Expr::Const(z), _) | (_, Expr::Const(z)) if z == 0.0 => Expr::Const(0.0),
        (Expr::Const(o), e) | (e, Expr::Const(o)) if o == 1.0 => e,
        (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

pub fn div(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(p), Expr::Const(q)) => Expr::Const(p / q),
        (Expr::Const(z), _) if z == 0.0 => Expr::Const(0.0),
        (e, Expr::Const(o)) if o == 1.0 => e,
        (a, b) => Expr::Div(Box::new(a), Box::new(b)),
    }
}

pub fn pow(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(p), Expr::Const(q)) => Expr::Const(p.powf(q)),
        (_, Expr::Const(z)) if z == 0.0 => Expr::Const(1.0),
        (e, Expr::Const(o)) if o == 1.0 => e,
        (a, b) => Expr::Pow(Box::new(a), Box::new(b)),
    }
}

pub fn call(f: Func, a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(f.apply(c)),
        other => Expr::Call(f, Box::new(other)),
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if *c < 0.0 {
                    write!(f, "({c:?})")
                } else {
                    write!(f, "{c:?}")
                }
            }
            Expr::Var(Var::Time) => write!(f, "t"),
            Expr::Var(Var::Coord(i)) => write!(f, "x{}", i + 1),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, b) => write!(f, "({a} ^ {b})"),
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<Token>, ExprError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // exponent part
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text
                .parse::<f64>()
                .map_err(|_| ExprError::UnexpectedToken(text.clone()))?;
            out.push(Token::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^".contains(c) {
            out.push(Token::Op(c));
            i += 1;
        } else if c == '(' {
            out.push(Token::LParen);
            i += 1;
        } else if c == ')' {
            out.push(Token::RParen);
            i += 1;
        } else {
            return Err(ExprError::UnexpectedChar(c, i));
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    dim: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    // expr := term (('+'|'-') term)*
    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        while let Some(Token::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' {
                Expr::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    // term := unary (('*'|'/') unary)*
    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(Token::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == '*' {
                Expr::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    // unary := '-' unary | power
    fn unary(&mut self) -> Result<Expr, ExprError> {
        if let Some(Token::Op('-')) = self.peek() {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        if let Some(Token::Op('+')) = self.peek() {
            self.pos += 1;
            return self.unary();
        }
        self.power()
    }

    // power := atom ('^' unary)?   (right associative)
    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if let Some(Token::Op('^')) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.next() {
            None => Err(ExprError::UnexpectedEnd),
            Some(Token::Num(v)) => Ok(Expr::Const(v)),
            Some(Token::LParen) => {
                let e = self.expr()?;
                match self.next() {
                    Some(Token::RParen) => Ok(e),
                    Some(tok) => Err(ExprError::UnexpectedToken(format!("{tok:?}"))),
                    None => Err(ExprError::UnexpectedEnd),
                }
            }
            Some(Token::Ident(name)) => self.ident(name),
            Some(tok) => Err(ExprError::UnexpectedToken(format!("{tok:?}"))),
        }
    }

    fn ident(&mut self, name: String) -> Result<Expr, ExprError> {
        let func = match name.as_str() {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            _ => None,
        };
        if let Some(func) = func {
            match self.next() {
                Some(Token::LParen) => {}
                Some(tok) => return Err(ExprError::UnexpectedToken(format!("{tok:?}"))),
                None => return Err(ExprError::UnexpectedEnd),
            }
            let arg = self.expr()?;
            match self.next() {
                Some(Token::RParen) => return Ok(Expr::Call(func, Box::new(arg))),
                Some(tok) => return Err(ExprError::UnexpectedToken(format!("{tok:?}"))),
                None => return Err(ExprError::UnexpectedEnd),
            }
        }
        match name.as_str() {
            "t" => Ok(Expr::time()),
            "pi" => Ok(Expr::Const(std::f64::consts::PI)),
            _ => {
                let idx = name
                    .strip_prefix('x')
                    .and_then(|d| d.parse::<usize>().ok())
                    .filter(|&k| k >= 1)
                    .ok_or_else(|| ExprError::UnknownIdent(name.clone()))?;
                if idx > self.dim {
                    return Err(ExprError::DimensionExceeded { index: idx, dim: self.dim });
                }
                Ok(Expr::coord(idx - 1))
            }
        }
    }
}

/// Expression with a constant fast path for hot loops.
#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Const(f64),
    Expr(Expr),
}

impl Field {
    pub fn new(expr: Expr) -> Self {
        let folded = fold(expr);
        match folded {
            Expr::Const(c) => Field::Const(c),
            e => Field::Expr(e),
        }
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            Field::Const(c) => *c,
            Field::Expr(e) => e.eval(t, x),
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Field::Const(c) => Some(*c),
            Field::Expr(_) => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Field::Const(c) if *c == 0.0)
    }
}

/// Constant-folds a parsed tree through the smart constructors.
pub fn fold(e: Expr) -> Expr {
    match e {
        Expr::Const(_) | Expr::Var(_) => e,
        Expr::Neg(a) => neg(fold(*a)),
        Expr::Add(a, b) => add(fold(*a), fold(*b)),
        Expr::Sub(a, b) => sub(fold(*a), fold(*b)),
        Expr::Mul(a, b) => mul(fold(*a), fold(*b)),
        Expr::Div(a, b) => div(fold(*a), fold(*b)),
        Expr::Pow(a, b) => pow(fold(*a), fold(*b)),
        Expr::Call(f, a) => call(f, fold(*a)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Expr {
        Expr::parse(s, 3).unwrap()
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(p("1 + 2 * 3").eval(0.0, &[]), 7.0);
        assert_eq!(p("2 ^ 3 ^ 2").eval(0.0, &[]), 512.0);
        assert_eq!(p("-x1^2").eval(0.0, &[3.0]), -9.0);
        assert_eq!(p("(1 - x1) * x1").eval(0.0, &[0.25]), 0.1875);
        assert_eq!(p("8 / 4 / 2").eval(0.0, &[]), 1.0);
        assert!((p("exp(t) + sin(pi/2) + cos(0)").eval(1.0, &[]) - (1f64.exp() + 2.0)).abs() < 1e-15);
        assert_eq!(p("1e-3 * 2.5E2").eval(0.0, &[]), 0.25);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(Expr::parse("x4", 3), Err(ExprError::DimensionExceeded { .. })));
        assert!(matches!(Expr::parse("y", 2), Err(ExprError::UnknownIdent(_))));
        assert!(Expr::parse("1 +", 1).is_err());
        assert!(Expr::parse("sin 2", 1).is_err());
        assert!(Expr::parse("(1", 1).is_err());
        assert!(Expr::parse("1 $ 2", 1).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let cases = ["x1*x2^2 + sin(t*x1)", "exp(-x1) / (1 + x2^2)", "cos(x1 - 2*x2) * t"];
        let pt = [0.3, -0.7, 0.2];
        let t = 0.4;
        for src in cases {
            let e = p(src);
            for (k, var) in [Var::Coord(0), Var::Coord(1), Var::Time].into_iter().enumerate() {
                let d = e.derivative(var).unwrap().eval(t, &pt);
                let h = 1e-6;
                let (fp, fm) = if k < 2 {
                    let mut a = pt;
                    let mut b = pt;
                    a[k] += h;
                    b[k] -= h;
                    (e.eval(t, &a), e.eval(t, &b))
                } else {
                    (e.eval(t + h, &pt), e.eval(t - h, &pt))
                };
                let fd = (fp - fm) / (2.0 * h);
                assert!((d - fd).abs() < 1e-7, "{src} d/d{var:?}: {d} vs {fd}");
            }
        }
    }

    #[test]
    fn non_constant_exponent_is_not_differentiable() {
        let e = p("x1 ^ x2");
        assert!(matches!(e.derivative(Var::Coord(0)), Err(ExprError::NonDifferentiable(_))));
    }

    #[test]
    fn display_round_trips() {
        for src in ["x1*(1-x1)", "-2.5 + exp(-t) * x2", "sin(x1)^2 / 3"] {
            let e = p(src);
            let again = p(&e.to_string());
            assert_eq!(e.eval(0.3, &[0.1, 0.2]), again.eval(0.3, &[0.1, 0.2]));
        }
    }

    #[test]
    fn folding_detects_constants() {
        assert_eq!(Field::new(p("2*3 - 1")), Field::Const(5.0));
        assert_eq!(Field::new(p("0 * x1")), Field::Const(0.0));
        assert!(matches!(Field::new(p("x1 + 0")), Field::Expr(Expr::Var(Var::Coord(0)))));
    }
}
