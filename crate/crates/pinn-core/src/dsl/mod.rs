//! Text expression language for strong-form PDE residuals and condition
//! functions.
//!
//! Grammar (EBNF), precedence `^` over unary `-` over `*` `/` over `+` `-`,
//! `^` right-associative:
//! ```text
//! expr   := term  (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := '-' factor | power
//! power  := atom ('^' factor)?
//! atom   := number | identifier | func '(' expr ')' | '(' expr ')'
//! ```
//! So `-x^2` reads as `-(x^2)` and `x^2^2` as `x^(2^2)`.
//! Identifiers resolve to exactly one of: a domain dimension, the solution
//! symbol `u`, a derivative `u_<dims>` (total order <= 2), a declared
//! learnable parameter, or the constant `pi`. Exponents must be compile-time
//! constants; small integer exponents lower to repeated multiplication.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::autodiff::{AdError, ExprNode, Graph};
use crate::domain::Domain;

#[derive(Debug, Error)]
pub enum DslError {
    #[error("syntax error at position {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("unknown identifier `{name}` at position {pos}")]
    UnknownIdentifier { name: String, pos: usize },
    #[error("derivative `{name}` at position {pos} exceeds maximum order 2")]
    DerivativeOrder { name: String, pos: usize },
    #[error("derivative `{name}` at position {pos} names an unknown dimension")]
    DerivativeUnknownDimension { name: String, pos: usize },
    #[error("unsupported exponent at position {pos}: {message}")]
    UnsupportedExponent { pos: usize, message: String },
    #[error("the solution symbol `u` is not allowed in this expression (position {pos})")]
    SolutionNotAllowed { pos: usize },
    #[error("expression uses `{0}` but no node was provided for it")]
    MissingBinding(String),
    #[error(transparent)]
    Graph(#[from] AdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Tanh,
    Sin,
    Cos,
    Exp,
}

impl Func {
    fn name(&self) -> &'static str {
        match self {
            Func::Tanh => "tanh",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
        }
    }
}

/// Parsed expression tree. Identifiers are fully resolved at parse time.
#[derive(Debug, Clone, PartialEq)]
pub enum Ast {
    Number(f64),
    Pi,
    Dim(String),
    U,
    /// Derivative of `u` with respect to the named dimensions, in suffix
    /// order (e.g. `u_xt` -> ["x", "t"]).
    Deriv(Vec<String>),
    Param(String),
    Neg(Box<Ast>),
    Bin(BinOp, Box<Ast>, Box<Ast>),
    Call(Func, Box<Ast>),
}

/// A parsed strong-form residual, tied to the dimension and parameter names
/// it was resolved against.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualExpr {
    ast: Ast,
    params: Vec<String>,
}

impl ResidualExpr {
    pub fn ast(&self) -> &Ast {
        &self.ast
    }

    /// Sorted, de-duplicated learnable parameters appearing in the text.
    pub fn free_parameters(&self) -> &[String] {
        &self.params
    }

    /// Highest derivative suffixes referenced, for validation reports.
    pub fn derivative_suffixes(&self) -> Vec<String> {
        let mut out = Vec::new();
        collect_derivs(&self.ast, &mut out);
        out.sort();
        out.dedup();
        out
    }
}

fn collect_derivs(ast: &Ast, out: &mut Vec<String>) {
    match ast {
        Ast::Deriv(dims) => out.push(dims.join("")),
        Ast::Neg(a) | Ast::Call(_, a) => collect_derivs(a, out),
        Ast::Bin(_, a, b) => {
            collect_derivs(a, out);
            collect_derivs(b, out);
        }
        _ => {}
    }
}

fn collect_params(ast: &Ast, out: &mut Vec<String>) {
    match ast {
        Ast::Param(p) => out.push(p.clone()),
        Ast::Neg(a) | Ast::Call(_, a) => collect_params(a, out),
        Ast::Bin(_, a, b) => {
            collect_params(a, out);
            collect_params(b, out);
        }
        _ => {}
    }
}

// ---- lexer ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Number(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Number(v) => write!(f, "number `{v}`"),
            Tok::Ident(s) => write!(f, "identifier `{s}`"),
            Tok::Plus => write!(f, "`+`"),
            Tok::Minus => write!(f, "`-`"),
            Tok::Star => write!(f, "`*`"),
            Tok::Slash => write!(f, "`/`"),
            Tok::Caret => write!(f, "`^`"),
            Tok::LParen => write!(f, "`(`"),
            Tok::RParen => write!(f, "`)`"),
            Tok::Eof => write!(f, "end of input"),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>, DslError> {
    let bytes = text.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\r' | '\n' => i += 1,
            '+' => {
                toks.push((Tok::Plus, i));
                i += 1;
            }
            '-' => {
                toks.push((Tok::Minus, i));
                i += 1;
            }
            '*' => {
                toks.push((Tok::Star, i));
                i += 1;
            }
            '/' => {
                toks.push((Tok::Slash, i));
                i += 1;
            }
            '^' => {
                toks.push((Tok::Caret, i));
                i += 1;
            }
            '(' => {
                toks.push((Tok::LParen, i));
                i += 1;
            }
            ')' => {
                toks.push((Tok::RParen, i));
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let s = &text[start..i];
                let v: f64 = s.parse().map_err(|_| DslError::Syntax {
                    pos: start,
                    message: format!("malformed number `{s}`"),
                })?;
                toks.push((Tok::Number(v), start));
            }
            c if c.is_ascii_alphabetic() => {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                toks.push((Tok::Ident(text[start..i].to_string()), start));
            }
            other => {
                return Err(DslError::Syntax {
                    pos: i,
                    message: format!("unexpected character `{other}`"),
                })
            }
        }
    }
    toks.push((Tok::Eof, text.len()));
    Ok(toks)
}

// ---- parser -----------------------------------------------------------

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    dims: Vec<&'a str>,
    params: Vec<&'a str>,
    allow_u: bool,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &(Tok, usize) {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> (Tok, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, tok: Tok) -> Result<(), DslError> {
        let (t, p) = self.next();
        if t == tok {
            Ok(())
        } else {
            Err(DslError::Syntax {
                pos: p,
                message: format!("expected {tok}, found {t}"),
            })
        }
    }

    fn expr(&mut self) -> Result<Ast, DslError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek().0 {
                Tok::Plus => {
                    self.next();
                    let rhs = self.term()?;
                    lhs = Ast::Bin(BinOp::Add, Box::new(lhs), Box::new(rhs));
                }
                Tok::Minus => {
                    self.next();
                    let rhs = self.term()?;
                    lhs = Ast::Bin(BinOp::Sub, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Ast, DslError> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek().0 {
                Tok::Star => {
                    self.next();
                    let rhs = self.factor()?;
                    lhs = Ast::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
                }
                Tok::Slash => {
                    self.next();
                    let rhs = self.factor()?;
                    lhs = Ast::Bin(BinOp::Div, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Ast, DslError> {
        if self.peek().0 == Tok::Minus {
            self.next();
            let inner = self.factor()?;
            return Ok(Ast::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Ast, DslError> {
        let base = self.atom()?;
        if self.peek().0 == Tok::Caret {
            let (_, caret_pos) = self.next();
            let exp = self.factor()?; // right-associative; exponent may be negated
            validate_exponent(&exp, &base, caret_pos)?;
            return Ok(Ast::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Ast, DslError> {
        let (tok, pos) = self.next();
        match tok {
            Tok::Number(v) => Ok(Ast::Number(v)),
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(inner)
            }
            Tok::Ident(name) => self.resolve_ident(name, pos),
            other => Err(DslError::Syntax {
                pos,
                message: format!(
                    "expected a number, identifier, function call, or `(`, found {other}"
                ),
            }),
        }
    }

    fn resolve_ident(&mut self, name: String, pos: usize) -> Result<Ast, DslError> {
        match name.as_str() {
            "pi" => return Ok(Ast::Pi),
            "tanh" | "sin" | "cos" | "exp" => {
                let func = match name.as_str() {
                    "tanh" => Func::Tanh,
                    "sin" => Func::Sin,
                    "cos" => Func::Cos,
                    _ => Func::Exp,
                };
                self.expect(Tok::LParen)?;
                let arg = self.expr()?;
                self.expect(Tok::RParen)?;
                return Ok(Ast::Call(func, Box::new(arg)));
            }
            "u" => {
                if self.allow_u {
                    return Ok(Ast::U);
                }
                return Err(DslError::SolutionNotAllowed { pos });
            }
            _ => {}
        }
        if let Some(suffix) = name.strip_prefix("u_") {
            if !self.allow_u {
                return Err(DslError::SolutionNotAllowed { pos });
            }
            return self.resolve_derivative(&name, suffix, pos);
        }
        if self.dims.iter().any(|d| *d == name) {
            return Ok(Ast::Dim(name));
        }
        if self.params.iter().any(|p| *p == name) {
            return Ok(Ast::Param(name));
        }
        Err(DslError::UnknownIdentifier { name, pos })
    }

    /// Split a derivative suffix into dimension names, longest match first.
    fn resolve_derivative(&self, name: &str, suffix: &str, pos: usize) -> Result<Ast, DslError> {
        let mut dims_sorted: Vec<&str> = self.dims.clone();
        dims_sorted.sort_by_key(|d| std::cmp::Reverse(d.len()));
        let mut rest = suffix;
        let mut parts = Vec::new();
        while !rest.is_empty() {
            let hit = dims_sorted.iter().find(|d| rest.starts_with(**d));
            match hit {
                Some(d) => {
                    parts.push(d.to_string());
                    rest = &rest[d.len()..];
                }
                None => {
                    return Err(DslError::DerivativeUnknownDimension {
                        name: name.to_string(),
                        pos,
                    })
                }
            }
            if parts.len() > MAX_DERIVATIVE_ORDER {
                return Err(DslError::DerivativeOrder {
                    name: name.to_string(),
                    pos,
                });
            }
        }
        if parts.is_empty() {
            return Err(DslError::DerivativeUnknownDimension {
                name: name.to_string(),
                pos,
            });
        }
        Ok(Ast::Deriv(parts))
    }
}

/// Maximum total derivative order accepted by the language.
pub const MAX_DERIVATIVE_ORDER: usize = 2;

/// Exponents must be compile-time constants: integers 0..=4 on any base, or
/// anything on a constant base (folded at compile time).
fn validate_exponent(exp: &Ast, base: &Ast, pos: usize) -> Result<(), DslError> {
    let Some(e) = const_eval(exp) else {
        return Err(DslError::UnsupportedExponent {
            pos,
            message: "exponent must be a constant expression".into(),
        });
    };
    if const_eval(base).is_some() {
        return Ok(()); // whole power folds to a constant
    }
    if e.fract() != 0.0 {
        return Err(DslError::UnsupportedExponent {
            pos,
            message: format!("non-integer exponent {e} on a non-constant base"),
        });
    }
    let ei = e as i64;
    if !(0..=4).contains(&ei) {
        return Err(DslError::UnsupportedExponent {
            pos,
            message: format!("integer exponent {ei} outside supported range 0..=4"),
        });
    }
    Ok(())
}

/// Evaluate a constant subtree, if it is one.
fn const_eval(ast: &Ast) -> Option<f64> {
    match ast {
        Ast::Number(v) => Some(*v),
        Ast::Pi => Some(std::f64::consts::PI),
        Ast::Neg(a) => const_eval(a).map(|v| -v),
        Ast::Bin(op, a, b) => {
            let (a, b) = (const_eval(a)?, const_eval(b)?);
            Some(match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => a / b,
                BinOp::Pow => a.powf(b),
            })
        }
        Ast::Call(f, a) => {
            let a = const_eval(a)?;
            Some(match f {
                Func::Tanh => a.tanh(),
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Exp => a.exp(),
            })
        }
        _ => None,
    }
}

fn parse_with(
    text: &str,
    dims: &[&str],
    params: &[&str],
    allow_u: bool,
) -> Result<Ast, DslError> {
    let toks = lex(text)?;
    if toks.len() == 1 {
        return Err(DslError::Syntax {
            pos: 0,
            message: "empty expression".into(),
        });
    }
    let mut p = Parser {
        toks,
        pos: 0,
        dims: dims.to_vec(),
        params: params.to_vec(),
        allow_u,
    };
    let ast = p.expr()?;
    let (tok, pos) = p.peek().clone();
    if tok != Tok::Eof {
        return Err(DslError::Syntax {
            pos,
            message: format!("unexpected {tok} after expression"),
        });
    }
    Ok(ast)
}

/// Parse a residual expression against a domain and declared parameter
/// names.
pub fn parse(text: &str, domain: &Domain, params: &[&str]) -> Result<ResidualExpr, DslError> {
    let dims = domain.names();
    let ast = parse_with(text, &dims, params, true)?;
    let mut used = Vec::new();
    collect_params(&ast, &mut used);
    used.sort();
    used.dedup();
    Ok(ResidualExpr { ast, params: used })
}

/// Parse a condition function: dimensions and constants only, no `u`, no
/// derivatives, no learnable parameters.
pub fn parse_condition(text: &str, domain: &Domain) -> Result<Ast, DslError> {
    let dims = domain.names();
    parse_with(text, &dims, &[], false)
}

// ---- pretty printer ----------------------------------------------------

fn precedence(ast: &Ast) -> u8 {
    match ast {
        Ast::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
        Ast::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
        Ast::Neg(_) => 3,
        Ast::Bin(BinOp::Pow, ..) => 4,
        _ => 5,
    }
}

fn fmt_ast(ast: &Ast, out: &mut String) {
    match ast {
        Ast::Number(v) => {
            if *v < 0.0 {
                out.push_str(&format!("({v})"));
            } else {
                out.push_str(&v.to_string());
            }
        }
        Ast::Pi => out.push_str("pi"),
        Ast::Dim(d) => out.push_str(d),
        Ast::U => out.push('u'),
        Ast::Deriv(dims) => {
            out.push_str("u_");
            for d in dims {
                out.push_str(d);
            }
        }
        Ast::Param(p) => out.push_str(p),
        Ast::Neg(a) => {
            out.push('-');
            let need = precedence(a) < 3;
            if need {
                out.push('(');
            }
            fmt_ast(a, out);
            if need {
                out.push(')');
            }
        }
        Ast::Bin(op, a, b) => {
            let prec = precedence(ast);
            let (sym, left_min, right_min) = match op {
                BinOp::Add => ("+", prec, prec + 1),
                BinOp::Sub => ("-", prec, prec + 1),
                BinOp::Mul => ("*", prec, prec + 1),
                BinOp::Div => ("/", prec, prec + 1),
                // the base must be an atom; the exponent re-enters at the
                // unary level (so `x^-2` and `x^2^2` print bare)
                BinOp::Pow => ("^", prec + 1, 3),
            };
            let la = precedence(a) < left_min;
            if la {
                out.push('(');
            }
            fmt_ast(a, out);
            if la {
                out.push(')');
            }
            out.push_str(sym);
            let rb = precedence(b) < right_min;
            if rb {
                out.push('(');
            }
            fmt_ast(b, out);
            if rb {
                out.push(')');
            }
        }
        Ast::Call(f, a) => {
            out.push_str(f.name());
            out.push('(');
            fmt_ast(a, out);
            out.push(')');
        }
    }
}

/// Render an AST back to parseable text (`parse . pretty . parse` is a fixed
/// point on the AST).
pub fn pretty(ast: &Ast) -> String {
    let mut s = String::new();
    fmt_ast(ast, &mut s);
    s
}

impl fmt::Display for ResidualExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&pretty(&self.ast))
    }
}

// ---- compiler ----------------------------------------------------------

/// Everything the compiler needs to turn an AST into graph nodes at one
/// evaluation site: the per-dimension input variables, the instantiated
/// solution node, and variable nodes for learnable parameters.
pub struct CompileCtx<'a> {
    pub dims: &'a [(String, ExprNode)],
    pub u: Option<ExprNode>,
    pub params: &'a HashMap<String, ExprNode>,
}

/// Compile an AST into the graph. Derivative symbols become nested `derive`
/// calls against the context's input variables; results are cached per
/// suffix so `u_x` inside `u_xx` is built once.
pub fn compile(ast: &Ast, graph: &mut Graph, ctx: &CompileCtx) -> Result<ExprNode, DslError> {
    let mut deriv_cache: HashMap<String, ExprNode> = HashMap::new();
    compile_inner(ast, graph, ctx, &mut deriv_cache)
}

fn dim_node(ctx: &CompileCtx, name: &str) -> Result<ExprNode, DslError> {
    ctx.dims
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, node)| *node)
        .ok_or_else(|| DslError::MissingBinding(name.to_string()))
}

fn derivative_node(
    suffix: &[String],
    graph: &mut Graph,
    ctx: &CompileCtx,
    cache: &mut HashMap<String, ExprNode>,
) -> Result<ExprNode, DslError> {
    let key = suffix.join("\u{1}");
    if let Some(&n) = cache.get(&key) {
        return Ok(n);
    }
    let base = if suffix.len() == 1 {
        ctx.u.ok_or_else(|| DslError::MissingBinding("u".into()))?
    } else {
        derivative_node(&suffix[..suffix.len() - 1], graph, ctx, cache)?
    };
    let var = dim_node(ctx, suffix.last().unwrap())?;
    let node = graph.derive(base, &[var])?[0];
    cache.insert(key, node);
    Ok(node)
}

fn compile_inner(
    ast: &Ast,
    graph: &mut Graph,
    ctx: &CompileCtx,
    cache: &mut HashMap<String, ExprNode>,
) -> Result<ExprNode, DslError> {
    Ok(match ast {
        Ast::Number(v) => graph.constant(*v),
        Ast::Pi => graph.constant(std::f64::consts::PI),
        Ast::Dim(name) => dim_node(ctx, name)?,
        Ast::U => ctx.u.ok_or_else(|| DslError::MissingBinding("u".into()))?,
        Ast::Deriv(suffix) => derivative_node(suffix, graph, ctx, cache)?,
        Ast::Param(name) => *ctx
            .params
            .get(name)
            .ok_or_else(|| DslError::MissingBinding(name.clone()))?,
        Ast::Neg(a) => {
            let inner = compile_inner(a, graph, ctx, cache)?;
            graph.neg(inner)
        }
        Ast::Call(f, a) => {
            let inner = compile_inner(a, graph, ctx, cache)?;
            match f {
                Func::Tanh => graph.tanh(inner),
                Func::Sin => graph.sin(inner),
                Func::Cos => graph.cos(inner),
                Func::Exp => graph.exp(inner),
            }
        }
        Ast::Bin(BinOp::Pow, base, exp) => {
            // validated at parse: constant exponent, and either constant
            // base (fold) or integer exponent 0..=4
            let e = const_eval(exp).expect("parser guarantees constant exponent");
            if let Some(b) = const_eval(base) {
                graph.constant(b.powf(e))
            } else {
                let b = compile_inner(base, graph, ctx, cache)?;
                match e as i64 {
                    0 => graph.constant(1.0),
                    1 => b,
                    n => {
                        let mut acc = b;
                        for _ in 1..n {
                            acc = graph.mul(acc, b);
                        }
                        acc
                    }
                }
            }
        }
        Ast::Bin(op, a, b) => {
            let an = compile_inner(a, graph, ctx, cache)?;
            let bn = compile_inner(b, graph, ctx, cache)?;
            match op {
                BinOp::Add => graph.add(an, bn),
                BinOp::Sub => graph.sub(an, bn),
                BinOp::Mul => graph.mul(an, bn),
                BinOp::Div => graph.div(an, bn),
                BinOp::Pow => unreachable!(),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Dimension;

    fn burgers_domain() -> Domain {
        let mut d = Domain::new();
        d.add(Dimension::spatial("x", -1.0, 1.0).unwrap()).unwrap();
        d.add(Dimension::temporal("t", 0.0, 1.0).unwrap()).unwrap();
        d
    }

    #[test]
    fn parses_burgers_residual() {
        let d = burgers_domain();
        let r = parse("u_t + u*u_x - (0.01/pi)*u_xx", &d, &[]).unwrap();
        // top level is a sum/difference of three terms
        match r.ast() {
            Ast::Bin(BinOp::Sub, lhs, _) => match lhs.as_ref() {
                Ast::Bin(BinOp::Add, a, b) => {
                    assert_eq!(**a, Ast::Deriv(vec!["t".into()]));
                    assert!(matches!(**b, Ast::Bin(BinOp::Mul, ..)));
                }
                other => panic!("unexpected lhs {other:?}"),
            },
            other => panic!("unexpected top {other:?}"),
        }
        assert!(r.free_parameters().is_empty());
    }

    #[test]
    fn derivative_order_capped() {
        let d = burgers_domain();
        match parse("u_ttt", &d, &[]) {
            Err(DslError::DerivativeOrder { name, .. }) => assert_eq!(name, "u_ttt"),
            other => panic!("expected order error, got {other:?}"),
        }
    }

    #[test]
    fn derivative_unknown_dim() {
        let d = burgers_domain();
        assert!(matches!(
            parse("u_y", &d, &[]),
            Err(DslError::DerivativeUnknownDimension { .. })
        ));
    }

    #[test]
    fn learnable_parameter_resolves() {
        let d = burgers_domain();
        let r = parse("u_t + nu*u_xx", &d, &["nu"]).unwrap();
        assert_eq!(r.free_parameters(), &["nu".to_string()]);
    }

    #[test]
    fn free_parameters_dedup_sorted() {
        let d = burgers_domain();
        let r = parse("a*u_xx + b*u + a*u_x", &d, &["b", "a"]).unwrap();
        assert_eq!(
            r.free_parameters(),
            &["a".to_string(), "b".to_string()]
        );
    }

    #[test]
    fn unknown_identifier_positioned() {
        let d = burgers_domain();
        match parse("u_t + q*u_x", &d, &[]) {
            Err(DslError::UnknownIdentifier { name, pos }) => {
                assert_eq!(name, "q");
                assert_eq!(pos, 6);
            }
            other => panic!("expected unknown identifier, got {other:?}"),
        }
    }

    #[test]
    fn syntax_error_positioned() {
        let d = burgers_domain();
        match parse("u_t + * u_x", &d, &[]) {
            Err(DslError::Syntax { pos, .. }) => assert_eq!(pos, 6),
            other => panic!("expected syntax error, got {other:?}"),
        }
        assert!(parse("", &d, &[]).is_err());
        assert!(parse("(u_t", &d, &[]).is_err());
        assert!(parse("sin x", &d, &[]).is_err());
    }

    #[test]
    fn exponent_rules() {
        let d = burgers_domain();
        assert!(parse("u^2", &d, &[]).is_ok());
        assert!(parse("x^4", &d, &[]).is_ok());
        assert!(parse("2^0.5", &d, &[]).is_ok()); // constant base folds
        assert!(matches!(
            parse("u^2.5", &d, &[]),
            Err(DslError::UnsupportedExponent { .. })
        ));
        assert!(matches!(
            parse("x^5", &d, &[]),
            Err(DslError::UnsupportedExponent { .. })
        ));
        assert!(matches!(
            parse("x^t", &d, &[]),
            Err(DslError::UnsupportedExponent { .. })
        ));
        // right-associative exponent tower is a constant expression
        let r = parse("x^2^2", &d, &[]).unwrap();
        match r.ast() {
            Ast::Bin(BinOp::Pow, _, e) => assert_eq!(const_eval(e), Some(4.0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pretty_print_fixed_point() {
        let d = burgers_domain();
        let corpus = [
            "u_t + u*u_x - (0.01/pi)*u_xx",
            "u_t - u_xx",
            "-(x + t)*u",
            "u^2 - u^3 + sin(pi*x)",
            "exp(-t)*cos(x)/2",
            "1e-3*u_x + 2.5",
            "x^2^2",
            "-x^2",
            "(u_t + u_x)/(1 + x^2)",
            "tanh(u) - u_xt",
        ];
        for text in corpus {
            let a = parse(text, &d, &[]).unwrap();
            let printed = pretty(a.ast());
            let b = parse(&printed, &d, &[]).unwrap();
            assert_eq!(a, b, "fixed point failed for `{text}` -> `{printed}`");
        }
    }

    #[test]
    fn condition_rejects_solution_symbol() {
        let d = burgers_domain();
        assert!(matches!(
            parse_condition("u + x", &d),
            Err(DslError::SolutionNotAllowed { .. })
        ));
        assert!(matches!(
            parse_condition("u_x", &d),
            Err(DslError::SolutionNotAllowed { .. })
        ));
        assert!(parse_condition("-sin(pi*x)", &d).is_ok());
    }

    #[test]
    fn compile_derivative_of_injected_square() {
        // u = x^2 injected; u_x at x=3 is 6
        let d = burgers_domain();
        let r = parse("u_x", &d, &[]).unwrap();
        let mut g = Graph::new();
        let x = g.new_var("x").unwrap();
        let t = g.new_var("t").unwrap();
        let u = g.mul(x, x);
        let dims = vec![("x".to_string(), x), ("t".to_string(), t)];
        let ctx = CompileCtx {
            dims: &dims,
            u: Some(u),
            params: &HashMap::new(),
        };
        let node = compile(r.ast(), &mut g, &ctx).unwrap();
        g.bind("x", 3.0).unwrap();
        g.bind("t", 0.0).unwrap();
        assert!((g.eval(node).unwrap() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn burgers_residual_on_constant_is_zero() {
        let d = burgers_domain();
        let r = parse("u_t + u*u_x - (0.01/pi)*u_xx", &d, &[]).unwrap();
        let mut g = Graph::new();
        let x = g.new_var("x").unwrap();
        let t = g.new_var("t").unwrap();
        let u = g.constant(2.75);
        let dims = vec![("x".to_string(), x), ("t".to_string(), t)];
        let ctx = CompileCtx {
            dims: &dims,
            u: Some(u),
            params: &HashMap::new(),
        };
        let node = compile(r.ast(), &mut g, &ctx).unwrap();
        g.bind("x", 0.3).unwrap();
        g.bind("t", 0.6).unwrap();
        assert_eq!(g.eval(node).unwrap(), 0.0);
    }

    #[test]
    fn burgers_residual_on_linear_u() {
        // u(x,t) = x: u_t = 0, u*u_x = x, u_xx = 0 -> residual = x
        let d = burgers_domain();
        let r = parse("u_t + u*u_x - (0.01/pi)*u_xx", &d, &[]).unwrap();
        let mut g = Graph::new();
        let x = g.new_var("x").unwrap();
        let t = g.new_var("t").unwrap();
        let dims = vec![("x".to_string(), x), ("t".to_string(), t)];
        let ctx = CompileCtx {
            dims: &dims,
            u: Some(x),
            params: &HashMap::new(),
        };
        let node = compile(r.ast(), &mut g, &ctx).unwrap();
        g.bind("x", 0.7).unwrap();
        g.bind("t", 0.1).unwrap();
        assert!((g.eval(node).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn mixed_partials_commute() {
        // u = sin(x)*exp(t): u_xt == u_tx
        let d = burgers_domain();
        let rxt = parse("u_xt", &d, &[]).unwrap();
        let rtx = parse("u_tx", &d, &[]).unwrap();
        let mut g = Graph::new();
        let x = g.new_var("x").unwrap();
        let t = g.new_var("t").unwrap();
        let sx = g.sin(x);
        let et = g.exp(t);
        let u = g.mul(sx, et);
        let dims = vec![("x".to_string(), x), ("t".to_string(), t)];
        let ctx = CompileCtx {
            dims: &dims,
            u: Some(u),
            params: &HashMap::new(),
        };
        let nxt = compile(rxt.ast(), &mut g, &ctx).unwrap();
        let ntx = compile(rtx.ast(), &mut g, &ctx).unwrap();
        for (xv, tv) in [(0.3, 0.5), (-0.8, 0.1), (0.0, 0.9)] {
            g.bind("x", xv).unwrap();
            g.bind("t", tv).unwrap();
            let a = g.eval(nxt).unwrap();
            let b = g.eval(ntx).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }
}
