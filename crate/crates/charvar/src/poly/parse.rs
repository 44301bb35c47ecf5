//! Text DSL for polynomials and the two closed-form algebras.
//!
//! Grammar (standard precedence, explicit `*`, right-to-left unary minus):
//!
//! ```text
//! expr   := ['-'] term (('+'|'-') term)*
//! term   := factor ('*' factor)*
//! factor := atom ['^' exponent]
//! atom   := IDENT | INT | '(' expr ')' | '-' factor
//! exponent := INT | IDENT | '(' expr ')'
//! ```
//!
//! The same surface syntax parses into three value domains:
//! * [`parse_poly`] — plain polynomials; exponents must be non-negative
//!   integer constants.
//! * [`parse_genus_poly`] — exponents may be (parenthesized) integer-linear
//!   expressions in `g`, but only on the bases `q` and `q - 1`
//!   (e.g. `q^(2*g - 1)*(q - 1)^(2*g)`).
//! * [`parse_zeta_expr`] — exponents may be integer-linear expressions in `s`
//!   with non-positive slope and non-negative constant part, again only on
//!   `q` and `q - 1` (e.g. `q^(1 - 2*s)*(q - 1)`).
//!
//! The canonical printers of the three types are exact inverses of the
//! corresponding parsers.

use super::{GenusPoly, MultiPoly, Var, ZetaExpr};
use crate::{Error, Result};
use num_bigint::BigInt;
use num_traits::{Signed, ToPrimitive};

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(BigInt),
    Plus,
    Minus,
    Star,
    Caret,
    LParen,
    RParen,
}

fn lex(s: &str) -> Result<Vec<Tok>> {
    let mut out = Vec::new();
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push(Tok::Plus);
                i += 1;
            }
            '-' => {
                out.push(Tok::Minus);
                i += 1;
            }
            '*' => {
                out.push(Tok::Star);
                i += 1;
            }
            '^' => {
                out.push(Tok::Caret);
                i += 1;
            }
            '(' => {
                out.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1;
            }
            '0'..='9' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let text = &s[start..i];
                let val = BigInt::parse_bytes(text.as_bytes(), 10)
                    .ok_or_else(|| Error::Parse(format!("bad integer literal {text:?}")))?;
                out.push(Tok::Int(val));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push(Tok::Ident(s[start..i].to_string()));
            }
            other => {
                return Err(Error::Parse(format!(
                    "unexpected character {other:?} at byte {i}"
                )))
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// AST
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
enum Ast {
    Int(BigInt),
    Ident(String),
    Add(Box<Ast>, Box<Ast>),
    Sub(Box<Ast>, Box<Ast>),
    Neg(Box<Ast>),
    Mul(Box<Ast>, Box<Ast>),
    Pow(Box<Ast>, Box<Ast>),
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, t: Tok) -> Result<()> {
        match self.next() {
            Some(found) if found == t => Ok(()),
            other => Err(Error::Parse(format!("expected {t:?}, found {other:?}"))),
        }
    }

    fn parse_expr(&mut self) -> Result<Ast> {
        let mut acc = if self.peek() == Some(&Tok::Minus) {
            self.next();
            Ast::Neg(Box::new(self.parse_term()?))
        } else {
            self.parse_term()?
        };
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.next();
                    let rhs = self.parse_term()?;
                    acc = Ast::Add(Box::new(acc), Box::new(rhs));
                }
                Some(Tok::Minus) => {
                    self.next();
                    let rhs = self.parse_term()?;
                    acc = Ast::Sub(Box::new(acc), Box::new(rhs));
                }
                _ => return Ok(acc),
            }
        }
    }

    fn parse_term(&mut self) -> Result<Ast> {
        let mut acc = self.parse_factor()?;
        while self.peek() == Some(&Tok::Star) {
            self.next();
            let rhs = self.parse_factor()?;
            acc = Ast::Mul(Box::new(acc), Box::new(rhs));
        }
        Ok(acc)
    }

    fn parse_factor(&mut self) -> Result<Ast> {
        let base = self.parse_atom()?;
        if self.peek() == Some(&Tok::Caret) {
            self.next();
            let exp = self.parse_exponent()?;
            return Ok(Ast::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn parse_atom(&mut self) -> Result<Ast> {
        match self.next() {
            Some(Tok::Ident(name)) => Ok(Ast::Ident(name)),
            Some(Tok::Int(v)) => Ok(Ast::Int(v)),
            Some(Tok::LParen) => {
                let inner = self.parse_expr()?;
                self.expect(Tok::RParen)?;
                Ok(inner)
            }
            Some(Tok::Minus) => Ok(Ast::Neg(Box::new(self.parse_factor()?))),
            other => Err(Error::Parse(format!(
                "expected identifier, integer or '(', found {other:?}"
            ))),
        }
    }

    fn parse_exponent(&mut self) -> Result<Ast> {
        match self.next() {
            Some(Tok::Int(v)) => Ok(Ast::Int(v)),
            Some(Tok::Ident(name)) => Ok(Ast::Ident(name)),
            Some(Tok::LParen) => {
                let inner = self.parse_expr()?;
                self.expect(Tok::RParen)?;
                Ok(inner)
            }
            other => Err(Error::Parse(format!(
                "expected exponent after '^', found {other:?}"
            ))),
        }
    }
}

fn parse_ast(s: &str) -> Result<Ast> {
    let toks = lex(s)?;
    if toks.is_empty() {
        return Err(Error::Parse("empty input".into()));
    }
    let mut p = Parser { toks, pos: 0 };
    let ast = p.parse_expr()?;
    if p.pos != p.toks.len() {
        return Err(Error::Parse(format!(
            "trailing input from token {:?}",
            p.toks[p.pos]
        )));
    }
    Ok(ast)
}

// ---------------------------------------------------------------------------
// Interpretations
// ---------------------------------------------------------------------------

fn pow_exponent_u32(e: &MultiPoly) -> Result<u32> {
    let c = e
        .as_constant()
        .ok_or_else(|| Error::Parse(format!("exponent {e} is not an integer constant")))?;
    if c.is_negative() {
        return Err(Error::Parse(format!("negative exponent {c} not allowed here")));
    }
    c.to_u32()
        .ok_or_else(|| Error::Parse(format!("exponent {c} too large")))
}

fn ast_to_poly(ast: &Ast) -> Result<MultiPoly> {
    match ast {
        Ast::Int(v) => Ok(MultiPoly::constant(v.clone())),
        Ast::Ident(name) => Ok(MultiPoly::var(Var::intern(name))),
        Ast::Add(a, b) => Ok(ast_to_poly(a)?.add(&ast_to_poly(b)?)),
        Ast::Sub(a, b) => Ok(ast_to_poly(a)?.sub(&ast_to_poly(b)?)),
        Ast::Neg(a) => Ok(ast_to_poly(a)?.neg()),
        Ast::Mul(a, b) => Ok(ast_to_poly(a)?.mul(&ast_to_poly(b)?)),
        Ast::Pow(base, exp) => {
            let b = ast_to_poly(base)?;
            let e = pow_exponent_u32(&ast_to_poly(exp)?)?;
            Ok(b.pow(e))
        }
    }
}

/// Extracts `(slope, constant)` from an integer-linear polynomial in `sym`.
fn linear_in(p: &MultiPoly, sym: Var) -> Result<(i64, i64)> {
    if p.degree_in(sym) > 1 || p.vars().iter().any(|&v| v != sym) {
        return Err(Error::Parse(format!(
            "exponent {p} is not linear in {sym}"
        )));
    }
    let coeffs = p.coeffs_in(sym);
    let get = |c: Option<&MultiPoly>| -> Result<i64> {
        match c {
            None => Ok(0),
            Some(p) => p
                .as_constant()
                .and_then(|b| b.to_i64())
                .ok_or_else(|| Error::Parse("exponent coefficient out of range".into())),
        }
    };
    Ok((get(coeffs.get(1))?, get(coeffs.first())?))
}

const MAX_SYMBOLIC_POW: u32 = 64;

fn ast_to_genus(ast: &Ast) -> Result<GenusPoly> {
    let g = Var::intern("g");
    match ast {
        Ast::Int(v) => Ok(GenusPoly::constant(v.clone())),
        Ast::Ident(name) if name == "q" => Ok(GenusPoly::term(1, 0, 1, 0, 0)),
        Ast::Ident(name) => Err(Error::Parse(format!(
            "only q may appear as a base in genus closed forms, found {name}"
        ))),
        Ast::Add(a, b) => Ok(ast_to_genus(a)?.add(&ast_to_genus(b)?)),
        Ast::Sub(a, b) => Ok(ast_to_genus(a)?.sub(&ast_to_genus(b)?)),
        Ast::Neg(a) => Ok(ast_to_genus(a)?.neg()),
        Ast::Mul(a, b) => Ok(ast_to_genus(a)?.mul(&ast_to_genus(b)?)),
        Ast::Pow(base, exp) => {
            let e = ast_to_poly(exp)?;
            if e.mentions(g) {
                let (slope, konst) = linear_in(&e, g)?;
                let b = ast_to_poly(base)?;
                if b == MultiPoly::q() {
                    Ok(GenusPoly::term(1, slope, konst, 0, 0))
                } else if b == MultiPoly::q_minus_1() {
                    Ok(GenusPoly::term(1, 0, 0, slope, konst))
                } else {
                    Err(Error::Parse(format!(
                        "genus-dependent exponent on base {b}; only q and q - 1 allowed"
                    )))
                }
            } else {
                let c = e.as_constant().and_then(|b| b.to_i64()).ok_or_else(|| {
                    Error::Parse(format!("exponent {e} is not an integer constant"))
                })?;
                if c >= 0 {
                    if c as u32 > MAX_SYMBOLIC_POW {
                        return Err(Error::Parse(format!("exponent {c} too large")));
                    }
                    Ok(ast_to_genus(base)?.pow(c as u32))
                } else {
                    // Negative constant exponents are only meaningful on the
                    // invertible bases q and q − 1.
                    let b = ast_to_poly(base)?;
                    if b == MultiPoly::q() {
                        Ok(GenusPoly::term(1, 0, c, 0, 0))
                    } else if b == MultiPoly::q_minus_1() {
                        Ok(GenusPoly::term(1, 0, 0, 0, c))
                    } else {
                        Err(Error::Parse(format!(
                            "negative exponent on base {b}; only q and q - 1 allowed"
                        )))
                    }
                }
            }
        }
    }
}

fn ast_to_zeta(ast: &Ast) -> Result<ZetaExpr> {
    let s = Var::intern("s");
    match ast {
        Ast::Int(v) => Ok(ZetaExpr::constant(v.clone())),
        Ast::Ident(name) if name == "q" => Ok(ZetaExpr::from_qpoly(MultiPoly::q())),
        Ast::Ident(name) => Err(Error::Parse(format!(
            "only q may appear as a base in zeta expressions, found {name}"
        ))),
        Ast::Add(a, b) => Ok(ast_to_zeta(a)?.add(&ast_to_zeta(b)?)),
        Ast::Sub(a, b) => Ok(ast_to_zeta(a)?.sub(&ast_to_zeta(b)?)),
        Ast::Neg(a) => Ok(ast_to_zeta(a)?.neg()),
        Ast::Mul(a, b) => Ok(ast_to_zeta(a)?.mul(&ast_to_zeta(b)?)),
        Ast::Pow(base, exp) => {
            let e = ast_to_poly(exp)?;
            if e.mentions(s) {
                let (slope, konst) = linear_in(&e, s)?;
                if slope > 0 || konst < 0 {
                    return Err(Error::Parse(format!(
                        "zeta exponents must have non-positive s-slope and \
                         non-negative constant part, found {e}"
                    )));
                }
                let a = (-slope) as u32;
                let b = ast_to_poly(base)?;
                if b == MultiPoly::q() {
                    Ok(ZetaExpr::term(MultiPoly::q().pow(konst as u32), a, 0))
                } else if b == MultiPoly::q_minus_1() {
                    Ok(ZetaExpr::term(
                        MultiPoly::q_minus_1().pow(konst as u32),
                        0,
                        a,
                    ))
                } else {
                    Err(Error::Parse(format!(
                        "s-dependent exponent on base {b}; only q and q - 1 allowed"
                    )))
                }
            } else {
                let c = pow_exponent_u32(&e)?;
                if c > MAX_SYMBOLIC_POW {
                    return Err(Error::Parse(format!("exponent {c} too large")));
                }
                Ok(ast_to_zeta(base)?.pow(c))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Public entry points
// ---------------------------------------------------------------------------

/// Parses the plain polynomial DSL.
pub fn parse_poly(s: &str) -> Result<MultiPoly> {
    ast_to_poly(&parse_ast(s)?)
}

/// Parses a genus-symbolic closed form, e.g.
/// `q^(2*g - 1)*(q - 1)^(2*g) + q^(2*g - 1)*(q - 1)`.
pub fn parse_genus_poly(s: &str) -> Result<GenusPoly> {
    ast_to_genus(&parse_ast(s)?)
}

/// Parses a zeta closed form, e.g. `q^2 + (q - 1)*q^(-s)`.
pub fn parse_zeta_expr(s: &str) -> Result<ZetaExpr> {
    ast_to_zeta(&parse_ast(s)?)
}
