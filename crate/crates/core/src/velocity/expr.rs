//! A small expression language for potentials f(x, t).
//!
//! Grammar (usual precedence, `^` binds tighter than unary minus and is right
//! associative):
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | 'pi' | 'x1'..'x3' | 't' | func '(' expr ')' | '(' expr ')'
//! func  := 'exp' | 'sin' | 'cos' | 'abs'
//! ```
//!
//! Exponents must be constant. Derivatives are taken symbolically.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    X(usize),
    T,
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, f64),
    Exp(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Abs(Box<Expr>),
    Sign(Box<Expr>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    X(usize),
    T,
}

impl Expr {
    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::X(i) => x[*i],
            Expr::T => t,
            Expr::Neg(a) => -a.eval(x, t),
            Expr::Add(a, b) => a.eval(x, t) + b.eval(x, t),
            Expr::Sub(a, b) => a.eval(x, t) - b.eval(x, t),
            Expr::Mul(a, b) => a.eval(x, t) * b.eval(x, t),
            Expr::Div(a, b) => a.eval(x, t) / b.eval(x, t),
            Expr::Pow(a, p) => {
                let v = a.eval(x, t);
                if p.fract() == 0.0 && p.abs() < 1e9 {
                    v.powi(*p as i32)
                } else {
                    v.powf(*p)
                }
            }
            Expr::Exp(a) => a.eval(x, t).exp(),
            Expr::Sin(a) => a.eval(x, t).sin(),
            Expr::Cos(a) => a.eval(x, t).cos(),
            Expr::Abs(a) => a.eval(x, t).abs(),
            Expr::Sign(a) => {
                let v = a.eval(x, t);
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Symbolic partial derivative.
    pub fn diff(&self, v: Var) -> Expr {
        use Expr::*;
        match self {
            Const(_) | Sign(_) => Const(0.0),
            X(i) => Const(if v == Var::X(*i) { 1.0 } else { 0.0 }),
            T => Const(if v == Var::T { 1.0 } else { 0.0 }),
            Neg(a) => neg(a.diff(v)),
            Add(a, b) => add(a.diff(v), b.diff(v)),
            Sub(a, b) => sub(a.diff(v), b.diff(v)),
            Mul(a, b) => add(mul(a.diff(v), (**b).clone()), mul((**a).clone(), b.diff(v))),
            Div(a, b) => div(sub(mul(a.diff(v), (**b).clone()), mul((**a).clone(), b.diff(v))), pow((**b).clone(), 2.0)),
            Pow(a, p) => {
                if *p == 0.0 {
                    Const(0.0)
                } else {
                    mul(mul(Const(*p), pow((**a).clone(), p - 1.0)), a.diff(v))
                }
            }
            Exp(a) => mul(self.clone(), a.diff(v)),
            Sin(a) => mul(Cos(a.clone()), a.diff(v)),
            Cos(a) => neg(mul(Sin(a.clone()), a.diff(v))),
            Abs(a) => mul(Sign(a.clone()), a.diff(v)),
        }
    }

    pub fn depends_on(&self, v: Var) -> bool {
        use Expr::*;
        match self {
            Const(_) => false,
            X(i) => v == Var::X(*i),
            T => v == Var::T,
            Neg(a) | Pow(a, _) | Exp(a) | Sin(a) | Cos(a) | Abs(a) | Sign(a) => a.depends_on(v),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => a.depends_on(v) || b.depends_on(v),
        }
    }

    fn is_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    fn has_vars(&self) -> bool {
        use Expr::*;
        match self {
            Const(_) => false,
            X(_) | T => true,
            Neg(a) | Pow(a, _) | Exp(a) | Sin(a) | Cos(a) | Abs(a) | Sign(a) => a.has_vars(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => a.has_vars() || b.has_vars(),
        }
    }
}

fn neg(a: Expr) -> Expr {
    match a.is_const() {
        Some(c) => Expr::Const(-c),
        None => Expr::Neg(Box::new(a)),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (a.is_const(), b.is_const()) {
        (Some(x), Some(y)) => Expr::Const(x + y),
        (Some(0.0), None) => b,
        (None, Some(0.0)) => a,
        _ => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (a.is_const(), b.is_const()) {
        (Some(x), Some(y)) => Expr::Const(x - y),
        (Some(0.0), None) => neg(b),
        (None, Some(0.0)) => a,
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (a.is_const(), b.is_const()) {
        (Some(x), Some(y)) => Expr::Const(x * y),
        (Some(0.0), _) | (_, Some(0.0)) => Expr::Const(0.0),
        (Some(1.0), None) => b,
        (None, Some(1.0)) => a,
        _ => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (a.is_const(), b.is_const()) {
        (Some(x), Some(y)) => Expr::Const(x / y),
        (Some(0.0), _) => Expr::Const(0.0),
        (None, Some(1.0)) => a,
        _ => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn pow(a: Expr, p: f64) -> Expr {
    if p == 0.0 {
        return Expr::Const(1.0);
    }
    if p == 1.0 {
        return a;
    }
    match a.is_const() {
        Some(c) => Expr::Const(c.powf(p)),
        None => Expr::Pow(Box::new(a), p),
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<(usize, Tok)>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && ((bytes[i] as char).is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let v: f64 = text.parse().map_err(|_| Error::Expression { pos: start, msg: format!("bad number `{text}`") })?;
            out.push((start, Tok::Num(v)));
        } else if c.is_ascii_alphabetic() {
            let start = i;
            while i < bytes.len() && (bytes[i] as char).is_ascii_alphanumeric() {
                i += 1;
            }
            out.push((start, Tok::Ident(src[start..i].to_string())));
        } else if "+-*/^()".contains(c) {
            out.push((i, Tok::Op(c)));
            i += 1;
        } else {
            return Err(Error::Expression { pos: i, msg: format!("unexpected character `{c}`") });
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    dim: usize,
    end: usize,
}

/// Parses an expression over `x1..x{dim}` and `t`.
pub fn parse(src: &str, dim: usize) -> Result<Expr> {
    let toks = tokenize(src)?;
    let mut p = Parser { toks, pos: 0, dim, end: src.len() };
    let e = p.expr()?;
    if let Some((at, t)) = p.toks.get(p.pos) {
        return Err(Error::Expression { pos: *at, msg: format!("unexpected token {t:?}") });
    }
    Ok(e)
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map(|(p, _)| *p).unwrap_or(self.end)
    }

    fn eat(&mut self, op: char) -> bool {
        if self.peek() == Some(&Tok::Op(op)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut e = self.term()?;
        loop {
            if self.eat('+') {
                e = Expr::Add(Box::new(e), Box::new(self.term()?));
            } else if self.eat('-') {
                e = Expr::Sub(Box::new(e), Box::new(self.term()?));
            } else {
                return Ok(e);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut e = self.unary()?;
        loop {
            if self.eat('*') {
                e = Expr::Mul(Box::new(e), Box::new(self.unary()?));
            } else if self.eat('/') {
                e = Expr::Div(Box::new(e), Box::new(self.unary()?));
            } else {
                return Ok(e);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.eat('^') {
            let at = self.here();
            let exponent = self.unary()?;
            if exponent.has_vars() {
                return Err(Error::Expression { pos: at, msg: "exponent must be constant".into() });
            }
            let p = exponent.eval(&[], 0.0);
            return Ok(Expr::Pow(Box::new(base), p));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let at = self.here();
        let tok = self
            .toks
            .get(self.pos)
            .map(|(_, t)| t.clone())
            .ok_or(Error::Expression { pos: at, msg: "unexpected end of input".into() })?;
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(Expr::Const(v)),
            Tok::Op('(') => {
                let e = self.expr()?;
                if !self.eat(')') {
                    return Err(Error::Expression { pos: self.here(), msg: "expected `)`".into() });
                }
                Ok(e)
            }
            Tok::Ident(name) => match name.as_str() {
                "t" => Ok(Expr::T),
                "pi" => Ok(Expr::Const(std::f64::consts::PI)),
                "exp" | "sin" | "cos" | "abs" => {
                    if !self.eat('(') {
                        return Err(Error::Expression { pos: self.here(), msg: format!("expected `(` after {name}") });
                    }
                    let a = Box::new(self.expr()?);
                    if !self.eat(')') {
                        return Err(Error::Expression { pos: self.here(), msg: "expected `)`".into() });
                    }
                    Ok(match name.as_str() {
                        "exp" => Expr::Exp(a),
                        "sin" => Expr::Sin(a),
                        "cos" => Expr::Cos(a),
                        _ => Expr::Abs(a),
                    })
                }
                other => {
                    let idx = other.strip_prefix('x').and_then(|s| s.parse::<usize>().ok()).filter(|&k| k >= 1 && k <= self.dim);
                    match idx {
                        Some(k) => Ok(Expr::X(k - 1)),
                        None => Err(Error::Expression { pos: at, msg: format!("unknown identifier `{other}`") }),
                    }
                }
            },
            Tok::Op(c) => Err(Error::Expression { pos: at, msg: format!("unexpected `{c}`") }),
        }
    }
}
