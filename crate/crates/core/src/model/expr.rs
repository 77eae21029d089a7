//! Propensity expressions: a small infix arithmetic language over population
//! variables `x1..xN`, numeric literals and named parameters.
//!
//! Parameters are substituted while parsing, so an [`Expr`] only ever holds
//! literals, variables and arithmetic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }
}

/// Expression tree of a propensity function.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    /// Population of the species with this 0-based index.
    Var(usize),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    /// Evaluates the expression at the population vector `x`.
    ///
    /// Only the entries of `x` named by [`Expr::reagents`] are read.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(i) => x[*i],
            Expr::Neg(e) => -e.eval(x),
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval(x), b.eval(x));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                }
            }
        }
    }

    /// Species indices occurring in the tree, in ascending order.
    pub fn reagents(&self) -> Vec<usize> {
        let mut set = BTreeSet::new();
        self.collect_vars(&mut set);
        set.into_iter().collect()
    }

    fn collect_vars(&self, set: &mut BTreeSet<usize>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(i) => {
                set.insert(*i);
            }
            Expr::Neg(e) => e.collect_vars(set),
            Expr::Bin(_, a, b) => {
                a.collect_vars(set);
                b.collect_vars(set);
            }
        }
    }

    /// Parses `text`, resolving identifiers against `parameters` and
    /// population variables `x1..x{n_species}`.
    pub fn parse(text: &str, n_species: usize, parameters: &BTreeMap<String, f64>, context: &str) -> Result<Expr> {
        let tokens = tokenize(text, context)?;
        let mut parser = Parser {
            tokens,
            pos: 0,
            n_species,
            parameters,
            context,
            end: text.len(),
        };
        let expr = parser.expr()?;
        if let Some(tok) = parser.tokens.get(parser.pos) {
            return Err(parser.error(tok.offset, "unexpected trailing input"));
        }
        Ok(expr)
    }
}

/// Fully parenthesized infix form; parsing it back yields an identical tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    offset: usize,
}

fn tokenize(text: &str, context: &str) -> Result<Vec<Token>> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let kind = match c {
            '+' | '-' | '*' | '/' => {
                i += 1;
                TokenKind::Op(c)
            }
            '(' => {
                i += 1;
                TokenKind::LParen
            }
            ')' => {
                i += 1;
                TokenKind::RParen
            }
            '0'..='9' | '.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                // exponent part, e.g. 2e-4 or 1.5E+3
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let lit = &text[start..i];
                let value = lit.parse::<f64>().map_err(|_| Error::Syntax {
                    context: context.to_string(),
                    offset: start,
                    message: format!("malformed number '{lit}'"),
                })?;
                TokenKind::Num(value)
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                TokenKind::Ident(text[start..i].to_string())
            }
            _ => {
                return Err(Error::Syntax {
                    context: context.to_string(),
                    offset: start,
                    message: format!("unexpected character '{c}'"),
                })
            }
        };
        tokens.push(Token { kind, offset: start });
    }
    Ok(tokens)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    n_species: usize,
    parameters: &'a BTreeMap<String, f64>,
    context: &'a str,
    end: usize,
}

impl Parser<'_> {
    fn error(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Syntax {
            context: self.context.to_string(),
            offset,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<&TokenKind> {
        self.tokens.get(self.pos).map(|t| &t.kind)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |t| t.offset)
    }

    // expr := term (('+' | '-') term)*
    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(TokenKind::Op(c @ ('+' | '-'))) = self.peek() {
            let op = if *c == '+' { BinOp::Add } else { BinOp::Sub };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    // term := unary (('*' | '/') unary)*
    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(TokenKind::Op(c @ ('*' | '/'))) = self.peek() {
            let op = if *c == '*' { BinOp::Mul } else { BinOp::Div };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    // unary := '-' unary | atom
    fn unary(&mut self) -> Result<Expr> {
        if let Some(TokenKind::Op('-')) = self.peek() {
            self.pos += 1;
            let inner = self.unary()?;
            // negated literals fold so that printed negative numbers re-parse identically
            return Ok(match inner {
                Expr::Num(v) => Expr::Num(-v),
                other => Expr::Neg(Box::new(other)),
            });
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr> {
        let offset = self.offset();
        let Some(tok) = self.tokens.get(self.pos).cloned() else {
            return Err(self.error(offset, "unexpected end of expression"));
        };
        self.pos += 1;
        match tok.kind {
            TokenKind::Num(v) => Ok(Expr::Num(v)),
            TokenKind::Ident(name) => self.resolve(&name, offset),
            TokenKind::LParen => {
                let inner = self.expr()?;
                match self.peek() {
                    Some(TokenKind::RParen) => {
                        self.pos += 1;
                        Ok(inner)
                    }
                    _ => Err(self.error(self.offset(), "expected ')'")),
                }
            }
            TokenKind::RParen => Err(self.error(offset, "unexpected ')'")),
            TokenKind::Op(c) => Err(self.error(offset, format!("unexpected operator '{c}'"))),
        }
    }

    fn resolve(&self, name: &str, offset: usize) -> Result<Expr> {
        if let Some(&value) = self.parameters.get(name) {
            return Ok(Expr::Num(value));
        }
        if let Some(digits) = name.strip_prefix('x') {
            if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
                let k: usize = digits
                    .parse()
                    .map_err(|_| self.error(offset, format!("bad variable '{name}'")))?;
                if k == 0 || k > self.n_species {
                    return Err(Error::InvalidModel(format!(
                        "{}: unknown species variable '{name}' (model has {} species)",
                        self.context, self.n_species
                    )));
                }
                return Ok(Expr::Var(k - 1));
            }
        }
        Err(Error::InvalidModel(format!(
            "{}: unknown parameter '{name}'",
            self.context
        )))
    }
}
