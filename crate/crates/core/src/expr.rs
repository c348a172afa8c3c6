//! Scalar symbolic expressions over named real variables.
//!
//! The grammar is deliberately small: `+ - * / ^`, unary minus, parentheses
//! and the functions `sin cos exp log sqrt`. `^` binds tighter than unary
//! minus and is right-associative, so `-x^2` is `-(x^2)` and `x^y^z` is
//! `x^(y^z)`. Construction through [`Expr`]'s associated functions performs
//! constant folding and nothing else; no rewriting that could change the
//! domain of an expression is applied. Equality of expressions is structural,
//! which is why the pretty printer guarantees `parse(print(e)) == e` for any
//! tree built through the folding constructors.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

/// Builtin unary functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Exp => x.exp(),
            Func::Log => x.ln(),
            Func::Sqrt => x.sqrt(),
        }
    }
}

/// Expression tree. `Num` always stores a finite, non-negative value;
/// negative constants are represented as `Neg(Num(..))` so that printing and
/// re-parsing preserve structure exactly.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Arc<str>),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

/// Syntax errors carry the byte offset into the input text.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("unexpected character `{ch}` at byte {at}")]
    UnexpectedChar { ch: char, at: usize },
    #[error("unexpected end of input")]
    UnexpectedEnd,
    #[error("unknown function `{name}` at byte {at}")]
    UnknownFunction { name: String, at: usize },
    #[error("malformed number at byte {at}")]
    BadNumber { at: usize },
    #[error("trailing input at byte {at}")]
    Trailing { at: usize },
}

/// Evaluation failures name the offending subexpression so grid pre-scans can
/// report which factor went singular.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("unbound variable `{name}`")]
    Unbound { name: String },
    #[error("domain error in `{expr}`: {reason}")]
    Domain { expr: String, reason: String },
}

impl Expr {
    pub fn var(name: &str) -> Expr {
        Expr::Var(Arc::from(name))
    }

    /// Finite constant; negatives fold into a `Neg` wrapper.
    pub fn num(v: f64) -> Expr {
        assert!(v.is_finite(), "non-finite constant {v}");
        if v < 0.0 {
            Expr::Neg(Box::new(Expr::Num(-v)))
        } else {
            // normalises -0.0 to 0.0
            Expr::Num(v + 0.0)
        }
    }

    pub fn zero() -> Expr {
        Expr::Num(0.0)
    }

    pub fn one() -> Expr {
        Expr::Num(1.0)
    }

    fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Num(v) => Some(*v),
            Expr::Neg(inner) => inner.as_const().map(|v| -v),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    fn is_one(&self) -> bool {
        self.as_const() == Some(1.0)
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            if (x + y).is_finite() {
                return Expr::num(x + y);
            }
        }
        if a.is_zero() {
            return b;
        }
        if b.is_zero() {
            return a;
        }
        Expr::Add(Box::new(a), Box::new(b))
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            if (x - y).is_finite() {
                return Expr::num(x - y);
            }
        }
        if b.is_zero() {
            return a;
        }
        if a.is_zero() {
            return Expr::neg(b);
        }
        Expr::Sub(Box::new(a), Box::new(b))
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            if (x * y).is_finite() {
                return Expr::num(x * y);
            }
        }
        if a.is_zero() || b.is_zero() {
            return Expr::zero();
        }
        if a.is_one() {
            return b;
        }
        if b.is_one() {
            return a;
        }
        Expr::Mul(Box::new(a), Box::new(b))
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            if y != 0.0 && (x / y).is_finite() {
                return Expr::num(x / y);
            }
        }
        if a.is_zero() && !b.is_zero() {
            return Expr::zero();
        }
        if b.is_one() {
            return a;
        }
        Expr::Div(Box::new(a), Box::new(b))
    }

    pub fn pow(a: Expr, b: Expr) -> Expr {
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            let v = x.powf(y);
            if v.is_finite() {
                return Expr::num(v);
            }
        }
        if b.is_one() {
            return a;
        }
        if b.is_zero() && a.as_const() != Some(0.0) {
            return Expr::one();
        }
        Expr::Pow(Box::new(a), Box::new(b))
    }

    pub fn neg(a: Expr) -> Expr {
        if a.is_zero() {
            return Expr::zero();
        }
        if let Expr::Neg(inner) = a {
            return *inner;
        }
        Expr::Neg(Box::new(a))
    }

    pub fn call(f: Func, a: Expr) -> Expr {
        if let Some(x) = a.as_const() {
            let v = f.apply(x);
            if v.is_finite() {
                return Expr::num(v);
            }
        }
        Expr::Call(f, Box::new(a))
    }

    /// Convenience: `scale * e`.
    pub fn scale(factor: f64, e: Expr) -> Expr {
        Expr::mul(Expr::num(factor), e)
    }

    /// Names of all variables occurring in the tree.
    pub fn vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => {
                out.insert(v.to_string());
            }
            Expr::Neg(a) | Expr::Call(_, a) => a.collect_vars(out),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    pub fn depends_on(&self, name: &str) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(v) => &**v == name,
            Expr::Neg(a) | Expr::Call(_, a) => a.depends_on(name),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => a.depends_on(name) || b.depends_on(name),
        }
    }

    /// Exact partial derivative with respect to `var`. The result is folded
    /// but otherwise unsimplified.
    pub fn differentiate(&self, var: &str) -> Expr {
        match self {
            Expr::Num(_) => Expr::zero(),
            Expr::Var(v) => {
                if &**v == var {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Expr::Neg(a) => Expr::neg(a.differentiate(var)),
            Expr::Add(a, b) => Expr::add(a.differentiate(var), b.differentiate(var)),
            Expr::Sub(a, b) => Expr::sub(a.differentiate(var), b.differentiate(var)),
            Expr::Mul(a, b) => Expr::add(
                Expr::mul(a.differentiate(var), (**b).clone()),
                Expr::mul((**a).clone(), b.differentiate(var)),
            ),
            Expr::Div(a, b) => {
                // (a/b)' = (a'b - ab') / b^2
                let da = a.differentiate(var);
                let db = b.differentiate(var);
                Expr::div(
                    Expr::sub(
                        Expr::mul(da, (**b).clone()),
                        Expr::mul((**a).clone(), db),
                    ),
                    Expr::pow((**b).clone(), Expr::num(2.0)),
                )
            }
            Expr::Pow(a, b) => {
                let da = a.differentiate(var);
                let db = b.differentiate(var);
                if db.is_zero() {
                    // d a^c = c * a^(c-1) * a'
                    Expr::mul(
                        Expr::mul(
                            (**b).clone(),
                            Expr::pow((**a).clone(), Expr::sub((**b).clone(), Expr::one())),
                        ),
                        da,
                    )
                } else if da.is_zero() {
                    // d c^b = c^b * log(c) * b'
                    Expr::mul(
                        Expr::mul(
                            Expr::pow((**a).clone(), (**b).clone()),
                            Expr::call(Func::Log, (**a).clone()),
                        ),
                        db,
                    )
                } else {
                    // a^b = exp(b log a)
                    Expr::mul(
                        Expr::pow((**a).clone(), (**b).clone()),
                        Expr::add(
                            Expr::mul(db, Expr::call(Func::Log, (**a).clone())),
                            Expr::div(Expr::mul((**b).clone(), da), (**a).clone()),
                        ),
                    )
                }
            }
            Expr::Call(f, a) => {
                let da = a.differentiate(var);
                let outer = match f {
                    Func::Sin => Expr::call(Func::Cos, (**a).clone()),
                    Func::Cos => Expr::neg(Expr::call(Func::Sin, (**a).clone())),
                    Func::Exp => Expr::call(Func::Exp, (**a).clone()),
                    Func::Log => Expr::div(Expr::one(), (**a).clone()),
                    Func::Sqrt => Expr::div(
                        Expr::one(),
                        Expr::mul(Expr::num(2.0), Expr::call(Func::Sqrt, (**a).clone())),
                    ),
                };
                Expr::mul(outer, da)
            }
        }
    }

    /// Replace variables by expressions. Unlisted variables are untouched.
    pub fn substitute(&self, map: &[(&str, Expr)]) -> Expr {
        match self {
            Expr::Num(v) => Expr::Num(*v),
            Expr::Var(name) => {
                for (k, e) in map {
                    if *k == &**name {
                        return e.clone();
                    }
                }
                Expr::Var(name.clone())
            }
            Expr::Neg(a) => Expr::neg(a.substitute(map)),
            Expr::Add(a, b) => Expr::add(a.substitute(map), b.substitute(map)),
            Expr::Sub(a, b) => Expr::sub(a.substitute(map), b.substitute(map)),
            Expr::Mul(a, b) => Expr::mul(a.substitute(map), b.substitute(map)),
            Expr::Div(a, b) => Expr::div(a.substitute(map), b.substitute(map)),
            Expr::Pow(a, b) => Expr::pow(a.substitute(map), b.substitute(map)),
            Expr::Call(f, a) => Expr::call(*f, a.substitute(map)),
        }
    }

    /// Evaluate against a variable lookup.
    pub fn eval_with(&self, lookup: &dyn Fn(&str) -> Option<f64>) -> Result<f64, EvalError> {
        let v = match self {
            Expr::Num(v) => *v,
            Expr::Var(name) => lookup(name).ok_or_else(|| EvalError::Unbound {
                name: name.to_string(),
            })?,
            Expr::Neg(a) => -a.eval_with(lookup)?,
            Expr::Add(a, b) => a.eval_with(lookup)? + b.eval_with(lookup)?,
            Expr::Sub(a, b) => a.eval_with(lookup)? - b.eval_with(lookup)?,
            Expr::Mul(a, b) => a.eval_with(lookup)? * b.eval_with(lookup)?,
            Expr::Div(a, b) => {
                let denom = b.eval_with(lookup)?;
                if denom == 0.0 {
                    return Err(self.domain("division by zero"));
                }
                a.eval_with(lookup)? / denom
            }
            Expr::Pow(a, b) => {
                let base = a.eval_with(lookup)?;
                let exp = b.eval_with(lookup)?;
                if base == 0.0 && exp < 0.0 {
                    return Err(self.domain("zero base with negative exponent"));
                }
                if base < 0.0 && exp.fract() != 0.0 {
                    return Err(self.domain("negative base with non-integer exponent"));
                }
                base.powf(exp)
            }
            Expr::Call(f, a) => {
                let x = a.eval_with(lookup)?;
                match f {
                    Func::Log if x <= 0.0 => {
                        return Err(self.domain("log of non-positive argument"))
                    }
                    Func::Sqrt if x < 0.0 => {
                        return Err(self.domain("sqrt of negative argument"))
                    }
                    _ => {}
                }
                f.apply(x)
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.domain("non-finite result"))
        }
    }

    /// Evaluate with an ordered `(name, value)` slice.
    pub fn eval(&self, bindings: &[(&str, f64)]) -> Result<f64, EvalError> {
        self.eval_with(&|name| {
            bindings
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
        })
    }

    fn domain(&self, reason: &str) -> EvalError {
        EvalError::Domain {
            expr: self.to_string(),
            reason: reason.to_string(),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(..) => 3,
            Expr::Pow(..) => 4,
            Expr::Num(_) | Expr::Var(_) | Expr::Call(..) => 6,
        }
    }

    fn write(&self, f: &mut fmt::Formatter<'_>, min_level: u8) -> fmt::Result {
        let prec = self.precedence();
        let parens = prec < min_level;
        if parens {
            write!(f, "(")?;
        }
        match self {
            Expr::Num(v) => write!(f, "{v}")?,
            Expr::Var(name) => write!(f, "{name}")?,
            Expr::Neg(a) => {
                write!(f, "-")?;
                a.write(f, 3)?;
            }
            Expr::Add(a, b) => {
                a.write(f, 1)?;
                write!(f, " + ")?;
                b.write(f, 2)?;
            }
            Expr::Sub(a, b) => {
                a.write(f, 1)?;
                write!(f, " - ")?;
                b.write(f, 2)?;
            }
            Expr::Mul(a, b) => {
                a.write(f, 2)?;
                write!(f, "*")?;
                b.write(f, 3)?;
            }
            Expr::Div(a, b) => {
                a.write(f, 2)?;
                write!(f, "/")?;
                b.write(f, 3)?;
            }
            Expr::Pow(a, b) => {
                // base must be atomic, exponent may be a unary chain
                a.write(f, 5)?;
                write!(f, "^")?;
                b.write(f, 3)?;
            }
            Expr::Call(func, a) => {
                write!(f, "{}(", func.name())?;
                a.write(f, 0)?;
                write!(f, ")")?;
            }
        }
        if parens {
            write!(f, ")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write(f, 0)
    }
}

/// Parse a complete expression.
pub fn parse(text: &str) -> Result<Expr, ParseError> {
    let mut p = Parser {
        bytes: text.as_bytes(),
        pos: 0,
    };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.bytes.len() {
        return Err(ParseError::Trailing { at: p.pos });
    }
    Ok(e)
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len()
            && matches!(self.bytes[self.pos], b' ' | b'\t' | b'\n' | b'\r')
        {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    acc = Expr::add(acc, rhs);
                }
                Some(b'-') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    acc = Expr::sub(acc, rhs);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    acc = Expr::mul(acc, rhs);
                }
                Some(b'/') => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    acc = Expr::div(acc, rhs);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(Expr::neg(inner));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.base()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            // right-associative, exponent admits a leading minus
            let exp = self.unary()?;
            return Ok(Expr::pow(base, exp));
        }
        Ok(base)
    }

    fn base(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            None => Err(ParseError::UnexpectedEnd),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                match self.peek() {
                    Some(b')') => {
                        self.pos += 1;
                        Ok(inner)
                    }
                    Some(ch) => Err(ParseError::UnexpectedChar {
                        ch: ch as char,
                        at: self.pos,
                    }),
                    None => Err(ParseError::UnexpectedEnd),
                }
            }
            Some(c) if c.is_ascii_digit() => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            Some(ch) => Err(ParseError::UnexpectedChar {
                ch: ch as char,
                at: self.pos,
            }),
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.bytes.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            let frac_start = self.pos;
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if self.pos == frac_start {
                return Err(ParseError::BadNumber { at: start });
            }
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        text.parse::<f64>()
            .map(Expr::num)
            .map_err(|_| ParseError::BadNumber { at: start })
    }

    fn ident(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len()
            && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .to_string();
        // a call only when immediately followed by `(`
        if self.peek() == Some(b'(') {
            let func = match name.as_str() {
                "sin" => Some(Func::Sin),
                "cos" => Some(Func::Cos),
                "exp" => Some(Func::Exp),
                "log" => Some(Func::Log),
                "sqrt" => Some(Func::Sqrt),
                _ => None,
            };
            if let Some(func) = func {
                self.pos += 1; // consume `(`
                let arg = self.expr()?;
                match self.peek() {
                    Some(b')') => {
                        self.pos += 1;
                        return Ok(Expr::call(func, arg));
                    }
                    Some(ch) => {
                        return Err(ParseError::UnexpectedChar {
                            ch: ch as char,
                            at: self.pos,
                        })
                    }
                    None => return Err(ParseError::UnexpectedEnd),
                }
            }
            return Err(ParseError::UnknownFunction { name, at: start });
        }
        Ok(Expr::var(&name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(text: &str) -> Expr {
        parse(text).unwrap()
    }

    #[test]
    fn precedence_pow_over_unary_minus() {
        // -x^2 == -(x^2)
        assert_eq!(p("-x^2"), Expr::neg(Expr::pow(Expr::var("x"), Expr::num(2.0))));
        // (-x)^2 keeps the parenthesised structure
        assert_eq!(
            p("(-x)^2"),
            Expr::pow(Expr::neg(Expr::var("x")), Expr::num(2.0))
        );
    }

    #[test]
    fn pow_right_associative() {
        assert_eq!(
            p("x^y^z"),
            Expr::pow(
                Expr::var("x"),
                Expr::pow(Expr::var("y"), Expr::var("z"))
            )
        );
    }

    #[test]
    fn mul_div_left_associative() {
        assert_eq!(
            p("a/b/c"),
            Expr::div(Expr::div(Expr::var("a"), Expr::var("b")), Expr::var("c"))
        );
    }

    #[test]
    fn unary_minus_in_products_and_exponents() {
        assert_eq!(p("2*-3"), Expr::num(-6.0));
        assert_eq!(
            p("x^-2"),
            Expr::pow(Expr::var("x"), Expr::neg(Expr::num(2.0)))
        );
    }

    #[test]
    fn constant_folding_in_parser() {
        assert_eq!(p("2*3 + 1"), Expr::num(7.0));
        assert_eq!(p("2^10"), Expr::num(1024.0));
        assert_eq!(p("sin(0)"), Expr::num(0.0));
        // folding never evaluates outside the domain
        assert!(matches!(p("log(0)"), Expr::Call(Func::Log, _)));
    }

    #[test]
    fn eval_samples() {
        let e = p("y*(2+rho*y^2)/2");
        assert_eq!(e.eval(&[("y", 1.0), ("rho", 3.0)]).unwrap(), 2.5);
        let e = p("x/(1+y)^2");
        assert_eq!(e.eval(&[("x", 2.0), ("y", 1.0)]).unwrap(), 0.5);
        assert_eq!(p("exp(0)").eval(&[]).unwrap(), 1.0);
    }

    #[test]
    fn eval_domain_errors_name_subexpression() {
        let e = p("1/(1+y)");
        let err = e.eval(&[("y", -1.0)]).unwrap_err();
        match err {
            EvalError::Domain { expr, .. } => assert_eq!(expr, "1/(1 + y)"),
            other => panic!("unexpected error {other:?}"),
        }
        assert!(p("log(x)").eval(&[("x", -2.0)]).is_err());
        assert!(p("sqrt(x)").eval(&[("x", -1.0)]).is_err());
        assert!(p("x^0.5").eval(&[("x", -1.0)]).is_err());
        assert!(matches!(
            p("z + 1").eval(&[]),
            Err(EvalError::Unbound { .. })
        ));
    }

    #[test]
    fn derivative_of_quotient() {
        // d/dy [-y/(1+y)] = -1/(1+y)^2, checked numerically
        let e = p("-y/(1+y)");
        let d = e.differentiate("y");
        for y in [0.0, 0.5, 1.0, 2.0, -0.5] {
            let got = d.eval(&[("y", y)]).unwrap();
            let want = -1.0 / (1.0 + y).powi(2);
            assert!((got - want).abs() < 1e-12, "y={y}: {got} vs {want}");
        }
    }

    #[test]
    fn derivative_of_general_power() {
        let e = p("x^y");
        let dx = e.differentiate("x");
        let dy = e.differentiate("y");
        let at = [("x", 2.0_f64), ("y", 1.5_f64)];
        assert!((dx.eval(&at).unwrap() - 1.5 * 2.0_f64.powf(0.5)).abs() < 1e-12);
        assert!((dy.eval(&at).unwrap() - 2.0_f64.powf(1.5) * 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn print_parse_round_trip_hand_cases() {
        let cases = [
            "-x^2",
            "(-x)^2",
            "x^y^z",
            "(x^y)^z",
            "a - (b - c)",
            "a - b - c",
            "2*(x + 1)",
            "-(a*b)",
            "x^-2",
            "sin(cos(x) + 1)",
            "sqrt(x)/(1 + y)",
            "--x",
        ];
        for text in cases {
            let e = p(text);
            let round = parse(&e.to_string()).unwrap();
            assert_eq!(e, round, "case `{text}` printed as `{e}`");
        }
    }

    #[test]
    fn negative_constant_round_trip() {
        let e = Expr::num(-2.5);
        assert_eq!(e.to_string(), "-2.5");
        assert_eq!(parse("-2.5").unwrap(), e);
    }

    #[test]
    fn substitute_composes() {
        let e = p("x^2 + y");
        let s = e.substitute(&[("x", p("u + 1")), ("y", p("2*u"))]);
        let v = s.eval(&[("u", 3.0)]).unwrap();
        assert_eq!(v, 16.0 + 6.0);
    }

    #[test]
    fn syntax_errors_carry_location() {
        assert!(matches!(parse("1 +"), Err(ParseError::UnexpectedEnd)));
        assert!(matches!(
            parse("foo(x)"),
            Err(ParseError::UnknownFunction { .. })
        ));
        assert!(matches!(
            parse("1 ) 2"),
            Err(ParseError::Trailing { at: 2 })
        ));
        assert!(matches!(
            parse("2 + @"),
            Err(ParseError::UnexpectedChar { ch: '@', at: 4 })
        ));
        assert!(matches!(parse("1.x"), Err(ParseError::BadNumber { .. })));
    }
}
