//! Closed arithmetic expressions over child-vertex variables.
//!
//! Variables are written `x<id>` where `id` is the vertex number of the
//! child feeding the expression. Supported: numeric literals, `+ - * /`,
//! unary minus, `^` with a numeric exponent, and the functions `exp`, `log`,
//! `sqrt` and `square`. Derivatives are symbolic, so gradients are exact.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Value of the child vertex with this id.
    Var(usize),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    /// Power with a constant exponent.
    Pow(Box<Expr>, f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("syntax error at column {column}: {message}")]
pub struct ParseError {
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("log of non-positive value {0}")]
    Log(f64),
    #[error("sqrt of negative value {0}")]
    Sqrt(f64),
    #[error("division by zero")]
    DivisionByZero,
    #[error("{base}^{exponent} is undefined")]
    Pow { base: f64, exponent: f64 },
    #[error("non-finite intermediate value")]
    NonFinite,
}

impl Expr {
    pub fn parse(text: &str) -> Result<Expr, ParseError> {
        let mut parser = Parser::new(text);
        let expr = parser.expr()?;
        parser.skip_ws();
        if let Some(c) = parser.peek() {
            return Err(parser.error(format!("unexpected '{c}'")));
        }
        Ok(expr)
    }

    pub fn var(id: usize) -> Expr {
        Expr::Var(id)
    }

    /// Evaluates the expression, looking variables up through `var`.
    pub fn eval<F>(&self, var: &F) -> Result<f64, EvalError>
    where
        F: Fn(usize) -> f64,
    {
        let value = match self {
            Expr::Const(c) => *c,
            Expr::Var(id) => var(*id),
            Expr::Unary(op, arg) => {
                let x = arg.eval(var)?;
                match op {
                    UnaryOp::Neg => -x,
                    UnaryOp::Exp => x.exp(),
                    UnaryOp::Log => {
                        if x <= 0.0 {
                            return Err(EvalError::Log(x));
                        }
                        x.ln()
                    }
                    UnaryOp::Sqrt => {
                        if x < 0.0 {
                            return Err(EvalError::Sqrt(x));
                        }
                        x.sqrt()
                    }
                    UnaryOp::Square => x * x,
                }
            }
            Expr::Binary(op, lhs, rhs) => {
                let a = lhs.eval(var)?;
                let b = rhs.eval(var)?;
                match op {
                    BinaryOp::Add => a + b,
                    BinaryOp::Sub => a - b,
                    BinaryOp::Mul => a * b,
                    BinaryOp::Div => {
                        if b == 0.0 {
                            return Err(EvalError::DivisionByZero);
                        }
                        a / b
                    }
                }
            }
            Expr::Pow(base, exponent) => {
                let b = base.eval(var)?;
                let v = b.powf(*exponent);
                if !v.is_finite() {
                    return Err(EvalError::Pow {
                        base: b,
                        exponent: *exponent,
                    });
                }
                v
            }
        };
        if value.is_finite() {
            Ok(value)
        } else {
            Err(EvalError::NonFinite)
        }
    }

    /// Ids of all variables referenced.
    pub fn variables(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<usize>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(id) => {
                out.insert(*id);
            }
            Expr::Unary(_, a) | Expr::Pow(a, _) => a.collect_vars(out),
            Expr::Binary(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    /// Symbolic partial derivative with respect to variable `id`.
    pub fn derivative(&self, id: usize) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(v) => Expr::Const(if *v == id { 1.0 } else { 0.0 }),
            Expr::Unary(op, u) => {
                let du = u.derivative(id);
                if du.is_zero() {
                    return Expr::Const(0.0);
                }
                let u = (**u).clone();
                match op {
                    UnaryOp::Neg => neg(du),
                    UnaryOp::Exp => mul(unary(UnaryOp::Exp, u), du),
                    UnaryOp::Log => div(du, u),
                    UnaryOp::Sqrt => div(du, mul(Expr::Const(2.0), unary(UnaryOp::Sqrt, u))),
                    UnaryOp::Square => mul(mul(Expr::Const(2.0), u), du),
                }
            }
            Expr::Binary(op, u, v) => {
                let du = u.derivative(id);
                let dv = v.derivative(id);
                let (u, v) = ((**u).clone(), (**v).clone());
                match op {
                    BinaryOp::Add => add(du, dv),
                    BinaryOp::Sub => sub(du, dv),
                    BinaryOp::Mul => add(mul(du, v), mul(u, dv)),
                    BinaryOp::Div => sub(
                        div(du, v.clone()),
                        div(mul(u, dv), unary(UnaryOp::Square, v)),
                    ),
                }
            }
            Expr::Pow(u, c) => {
                let du = u.derivative(id);
                if du.is_zero() || *c == 0.0 {
                    return Expr::Const(0.0);
                }
                mul(mul(Expr::Const(*c), pow((**u).clone(), c - 1.0)), du)
            }
        }
    }

    /// Replaces variables for which `f` returns `Some`.
    pub fn substitute<F>(&self, f: &F) -> Expr
    where
        F: Fn(usize) -> Option<Expr>,
    {
        match self {
            Expr::Const(c) => Expr::Const(*c),
            Expr::Var(id) => f(*id).unwrap_or(Expr::Var(*id)),
            Expr::Unary(op, a) => Expr::Unary(*op, Box::new(a.substitute(f))),
            Expr::Binary(op, a, b) => {
                Expr::Binary(*op, Box::new(a.substitute(f)), Box::new(b.substitute(f)))
            }
            Expr::Pow(a, c) => Expr::Pow(Box::new(a.substitute(f)), *c),
        }
    }

    fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    fn is_one(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 1.0)
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(BinaryOp::Add | BinaryOp::Sub, ..) => 1,
            Expr::Binary(BinaryOp::Mul | BinaryOp::Div, ..) => 2,
            Expr::Unary(UnaryOp::Neg, _) => 3,
            Expr::Pow(..) => 4,
            Expr::Const(c) if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) => 3,
            _ => 5,
        }
    }
}

// Constructors used by `derivative`; they fold the trivial cases so that
// derivative trees stay small.

fn unary(op: UnaryOp, a: Expr) -> Expr {
    Expr::Unary(op, Box::new(a))
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(-c),
        Expr::Unary(UnaryOp::Neg, inner) => *inner,
        a => unary(UnaryOp::Neg, a),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
        (a, b) if a.is_zero() => b,
        (a, b) if b.is_zero() => a,
        (a, b) => Expr::Binary(BinaryOp::Add, Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
        (a, b) if b.is_zero() => a,
        (a, b) if a.is_zero() => neg(b),
        (a, b) => Expr::Binary(BinaryOp::Sub, Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
        (a, _) if a.is_zero() => Expr::Const(0.0),
        (_, b) if b.is_zero() => Expr::Const(0.0),
        (a, b) if a.is_one() => b,
        (a, b) if b.is_one() => a,
        (a, b) => Expr::Binary(BinaryOp::Mul, Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (a, _) if a.is_zero() => Expr::Const(0.0),
        (a, b) if b.is_one() => a,
        (a, b) => Expr::Binary(BinaryOp::Div, Box::new(a), Box::new(b)),
    }
}

fn pow(a: Expr, c: f64) -> Expr {
    if c == 0.0 {
        Expr::Const(1.0)
    } else if c == 1.0 {
        a
    } else {
        Expr::Pow(Box::new(a), c)
    }
}

fn fmt_number(c: f64, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if c < 0.0 || (c == 0.0 && c.is_sign_negative()) {
        write!(f, "-{:?}", -c)
    } else {
        write!(f, "{c:?}")
    }
}

impl Expr {
    fn fmt_operand(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        if self.precedence() < min_prec {
            write!(f, "({self})")
        } else {
            write!(f, "{self}")
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => fmt_number(*c, f),
            Expr::Var(id) => write!(f, "x{id}"),
            Expr::Unary(UnaryOp::Neg, a) => {
                f.write_str("-")?;
                a.fmt_operand(f, 3)
            }
            Expr::Unary(op, a) => {
                let name = match op {
                    UnaryOp::Exp => "exp",
                    UnaryOp::Log => "log",
                    UnaryOp::Sqrt => "sqrt",
                    UnaryOp::Square => "square",
                    UnaryOp::Neg => unreachable!(),
                };
                write!(f, "{name}({a})")
            }
            Expr::Binary(op, a, b) => {
                let (sym, prec) = match op {
                    BinaryOp::Add => ("+", 1),
                    BinaryOp::Sub => ("-", 1),
                    BinaryOp::Mul => ("*", 2),
                    BinaryOp::Div => ("/", 2),
                };
                a.fmt_operand(f, prec)?;
                f.write_str(sym)?;
                // operators are left-associative
                b.fmt_operand(f, prec + 1)
            }
            Expr::Pow(a, c) => {
                a.fmt_operand(f, 5)?;
                f.write_str("^")?;
                fmt_number(*c, f)
            }
        }
    }
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
}

impl Parser {
    fn new(src: &str) -> Self {
        Parser {
            chars: src.chars().collect(),
            pos: 0,
        }
    }

    fn error(&self, message: impl Into<String>) -> ParseError {
        ParseError {
            column: self.pos + 1,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.error(format!("expected '{c}'")))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat('+') {
                BinaryOp::Add
            } else if self.eat('-') {
                BinaryOp::Sub
            } else {
                return Ok(lhs);
            };
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat('*') {
                BinaryOp::Mul
            } else if self.eat('/') {
                BinaryOp::Div
            } else {
                return Ok(lhs);
            };
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat('-') {
            self.skip_ws();
            // a signed literal is a single constant, not a negation
            if self.peek().is_some_and(|c| c.is_ascii_digit() || c == '.') {
                let start = self.pos;
                let value = self.number()?;
                if self.peek_non_ws() != Some('^') {
                    return Ok(Expr::Const(-value));
                }
                self.pos = start;
            }
            let inner = self.unary()?;
            return Ok(Expr::Unary(UnaryOp::Neg, Box::new(inner)));
        }
        self.power()
    }

    fn peek_non_ws(&mut self) -> Option<char> {
        self.skip_ws();
        self.peek()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.eat('^') {
            let exponent = self.exponent()?;
            return Ok(Expr::Pow(Box::new(base), exponent));
        }
        Ok(base)
    }

    fn exponent(&mut self) -> Result<f64, ParseError> {
        let parens = self.eat('(');
        let negative = if self.eat('-') {
            true
        } else {
            self.eat('+');
            false
        };
        self.skip_ws();
        let value = self.number()?;
        if parens {
            self.expect(')')?;
        }
        Ok(if negative { -value } else { value })
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit() || c == '.') {
            self.pos += 1;
        }
        if matches!(self.peek(), Some('e' | 'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some('+' | '-')) {
                self.pos += 1;
            }
            if self.peek().is_some_and(|c| c.is_ascii_digit()) {
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
            } else {
                self.pos = mark;
            }
        }
        let literal: String = self.chars[start..self.pos].iter().collect();
        literal.parse::<f64>().map_err(|_| ParseError {
            column: start + 1,
            message: format!("invalid number '{literal}'"),
        })
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        match self.peek() {
            None => Err(self.error("unexpected end of expression")),
            Some('(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(')')?;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => Ok(Expr::Const(self.number()?)),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self
                    .peek()
                    .is_some_and(|c| c.is_ascii_alphanumeric() || c == '_')
                {
                    self.pos += 1;
                }
                let ident: String = self.chars[start..self.pos].iter().collect();
                let func = match ident.as_str() {
                    "exp" => Some(UnaryOp::Exp),
                    "log" => Some(UnaryOp::Log),
                    "sqrt" => Some(UnaryOp::Sqrt),
                    "square" => Some(UnaryOp::Square),
                    _ => None,
                };
                if let Some(op) = func {
                    self.expect('(')?;
                    let arg = self.expr()?;
                    self.expect(')')?;
                    return Ok(Expr::Unary(op, Box::new(arg)));
                }
                match ident.strip_prefix('x').map(str::parse::<usize>) {
                    Some(Ok(id)) => Ok(Expr::Var(id)),
                    _ => Err(ParseError {
                        column: start + 1,
                        message: format!("unknown identifier '{ident}'"),
                    }),
                }
            }
            Some(c) => Err(self.error(format!("unexpected '{c}'"))),
        }
    }
}
