//! Representation zeta functions as exact closed forms:
//! finite sums of `p(q) · q^(−a·s) · (q−1)^(−b·s)` with `p ∈ ℤ[q]`.
//!
//! Canonical form: a map from the exponent pair `(a, b)` (both non-negative)
//! to a nonzero coefficient polynomial, so equality of zeta functions is
//! structural equality.

use super::{parse_zeta_expr, GenusPoly, MultiPoly, Var};
use crate::{Error, Result};
use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use std::collections::BTreeMap;
use std::fmt;

/// A zeta closed form `Σ p_{a,b}(q)·q^(−a·s)·(q−1)^(−b·s)`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ZetaExpr {
    terms: BTreeMap<(u32, u32), MultiPoly>,
}

impl ZetaExpr {
    pub fn zero() -> ZetaExpr {
        ZetaExpr {
            terms: BTreeMap::new(),
        }
    }

    pub fn one() -> ZetaExpr {
        ZetaExpr::constant(1)
    }

    pub fn constant(c: impl Into<BigInt>) -> ZetaExpr {
        ZetaExpr::from_qpoly(MultiPoly::constant(c))
    }

    /// Embeds an s-free polynomial in q.
    pub fn from_qpoly(p: MultiPoly) -> ZetaExpr {
        ZetaExpr::term(p, 0, 0)
    }

    /// The single term `p·q^(−a·s)·(q−1)^(−b·s)`.
    pub fn term(p: MultiPoly, a: u32, b: u32) -> ZetaExpr {
        let mut terms = BTreeMap::new();
        if !p.is_zero() {
            terms.insert((a, b), p);
        }
        ZetaExpr { terms }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_one(&self) -> bool {
        self.terms.len() == 1
            && self
                .terms
                .get(&(0, 0))
                .map(|p| p.is_one())
                .unwrap_or(false)
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// Terms in canonical ascending `(a, b)` order.
    pub fn terms(&self) -> impl Iterator<Item = (&(u32, u32), &MultiPoly)> + '_ {
        self.terms.iter()
    }

    pub fn neg(&self) -> ZetaExpr {
        ZetaExpr {
            terms: self
                .terms
                .iter()
                .map(|(&k, p)| (k, p.neg()))
                .collect(),
        }
    }

    pub fn add(&self, other: &ZetaExpr) -> ZetaExpr {
        let mut terms = self.terms.clone();
        for (&k, p) in &other.terms {
            let entry = terms.entry(k).or_insert_with(MultiPoly::zero);
            *entry = entry.add(p);
            if entry.is_zero() {
                terms.remove(&k);
            }
        }
        ZetaExpr { terms }
    }

    pub fn sub(&self, other: &ZetaExpr) -> ZetaExpr {
        self.add(&other.neg())
    }

    pub fn mul(&self, other: &ZetaExpr) -> ZetaExpr {
        let mut acc = ZetaExpr::zero();
        for (&(a1, b1), p1) in &self.terms {
            for (&(a2, b2), p2) in &other.terms {
                acc = acc.add(&ZetaExpr::term(p1.mul(p2), a1 + a2, b1 + b2));
            }
        }
        acc
    }

    /// Multiplies every coefficient by an s-free polynomial in q.
    pub fn mul_qpoly(&self, p: &MultiPoly) -> ZetaExpr {
        self.mul(&ZetaExpr::from_qpoly(p.clone()))
    }

    /// Multiplies by `q^(−a·s)·(q−1)^(−b·s)` (an index factor raised to −s).
    pub fn mul_index(&self, a: u32, b: u32) -> ZetaExpr {
        ZetaExpr {
            terms: self
                .terms
                .iter()
                .map(|(&(a0, b0), p)| ((a0 + a, b0 + b), p.clone()))
                .collect(),
        }
    }

    pub fn pow(&self, k: u32) -> ZetaExpr {
        let mut acc = ZetaExpr::one();
        for _ in 0..k {
            acc = acc.mul(self);
        }
        acc
    }

    /// Substitutes a concrete integer `s₀ ≤ 0`, yielding a polynomial in q.
    pub fn substitute_s(&self, s0: i64) -> Result<MultiPoly> {
        if s0 > 0 {
            return Err(Error::InvalidInput(format!(
                "substitute_s requires s₀ ≤ 0 to stay polynomial, got {s0}"
            )));
        }
        let q = MultiPoly::q();
        let qm1 = MultiPoly::q_minus_1();
        let mut acc = MultiPoly::zero();
        for (&(a, b), p) in &self.terms {
            let ea = (a as i64).checked_mul(-s0).unwrap() as u32;
            let eb = (b as i64).checked_mul(-s0).unwrap() as u32;
            acc = acc.add(&p.mul(&q.pow(ea)).mul(&qm1.pow(eb)));
        }
        Ok(acc)
    }

    /// The number of conjugacy classes `k(G) = ζ_G(0)` as a polynomial in q.
    pub fn conjugacy_count(&self) -> MultiPoly {
        self.substitute_s(0).expect("s₀ = 0 is always valid")
    }

    /// Converts to the genus-symbolic point count
    /// `|R_G(Σ_g)| = |G|^(2g−1)·ζ_G(2g−2)`, where the group order is
    /// `|G| = q^(order_q)·(q−1)^(order_qm1)`. Exponent-wise this maps
    /// `q^(−a·s) ↦ q^(a(2−2g))` and `(q−1)^(−b·s) ↦ (q−1)^(b(2−2g))`.
    pub fn to_genus(&self, order_q: i64, order_qm1: i64) -> GenusPoly {
        let mut acc = GenusPoly::zero();
        for (&(a, b), p) in &self.terms {
            let (a, b) = (a as i64, b as i64);
            let coeffs = p
                .univariate_coeffs(Var::q())
                .expect("zeta coefficients are univariate in q");
            let mut part = GenusPoly::zero();
            for (i, coeff) in coeffs.into_iter().enumerate() {
                if coeff.is_zero() {
                    continue;
                }
                part = part.add(&GenusPoly::term(
                    coeff,
                    2 * order_q - 2 * a,
                    2 * a - order_q + i as i64,
                    2 * order_qm1 - 2 * b,
                    2 * b - order_qm1,
                ));
            }
            acc = acc.add(&part);
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// Printing
// ---------------------------------------------------------------------------

/// Splits `p = sign·content·q^α·(q−1)^δ·unit` with `unit` primitive, positive
/// leading coefficient, not divisible by q or q−1.
fn split_coefficient(p: &MultiPoly) -> (bool, BigInt, u32, u32, MultiPoly) {
    let q = MultiPoly::q();
    let qm1 = MultiPoly::q_minus_1();
    let mut rest = p.clone();
    let mut alpha = 0;
    while let Some(d) = rest.divide_exact(&q) {
        rest = d;
        alpha += 1;
    }
    let mut delta = 0;
    while let Some(d) = rest.divide_exact(&qm1) {
        rest = d;
        delta += 1;
    }
    let neg = rest.leading().map(|(_, c)| c.is_negative()) == Some(true);
    let content = rest.content().max(BigInt::one());
    let scalar = if neg { -content.clone() } else { content.clone() };
    let unit = rest
        .divide_exact(&MultiPoly::constant(scalar))
        .unwrap_or_else(|| rest.clone());
    (neg, content, alpha, delta, unit)
}

/// Formats the exponent `konst − a·s`, e.g. `-s`, `-2*s`, `1 - s`, `2 - 3*s`.
fn format_linear_s(konst: u32, a: u32) -> String {
    let s_part = if a == 1 {
        "s".to_string()
    } else {
        format!("{a}*s")
    };
    if konst == 0 {
        format!("-{s_part}")
    } else {
        format!("{konst} - {s_part}")
    }
}

impl fmt::Display for ZetaExpr {
    /// Canonical display, e.g. `q^2 + (q - 1)*q^(-s)`; terms ascend in
    /// `(a, b)`, s-free factors precede the `s`-dependent powers. Inverted
    /// exactly by [`parse_zeta_expr`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (idx, (&(a, b), p)) in self.terms.iter().enumerate() {
            let (neg, content, alpha, delta, unit) = split_coefficient(p);
            if idx == 0 {
                if neg {
                    write!(f, "-")?;
                }
            } else if neg {
                write!(f, " - ")?;
            } else {
                write!(f, " + ")?;
            }
            let mut factors: Vec<String> = Vec::new();
            if !content.is_one() {
                factors.push(content.to_string());
            }
            if a == 0 && alpha > 0 {
                factors.push(if alpha == 1 {
                    "q".to_string()
                } else {
                    format!("q^{alpha}")
                });
            }
            if b == 0 && delta > 0 {
                factors.push(if delta == 1 {
                    "(q - 1)".to_string()
                } else {
                    format!("(q - 1)^{delta}")
                });
            }
            if !unit.is_one() {
                factors.push(format!("({unit})"));
            }
            if a > 0 {
                factors.push(format!("q^({})", format_linear_s(alpha, a)));
            }
            if b > 0 {
                factors.push(format!("(q - 1)^({})", format_linear_s(delta, b)));
            }
            if factors.is_empty() {
                factors.push("1".to_string());
            }
            write!(f, "{}", factors.join("*"))?;
        }
        Ok(())
    }
}

impl std::str::FromStr for ZetaExpr {
    type Err = Error;
    fn from_str(s: &str) -> Result<ZetaExpr> {
        parse_zeta_expr(s)
    }
}

// ---------------------------------------------------------------------------
// JSON schema: list of {p: coeff-map, a, b}
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct ZetaTermSer {
    /// Exponent (as decimal string) → coefficient (as decimal string).
    p: BTreeMap<String, String>,
    a: u32,
    b: u32,
}

impl serde::Serialize for ZetaExpr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let list: Vec<ZetaTermSer> = self
            .terms
            .iter()
            .map(|(&(a, b), p)| {
                let coeffs = p
                    .univariate_coeffs(Var::q())
                    .expect("zeta coefficients are univariate in q");
                ZetaTermSer {
                    p: coeffs
                        .into_iter()
                        .enumerate()
                        .filter(|(_, c)| !c.is_zero())
                        .map(|(i, c)| (i.to_string(), c.to_string()))
                        .collect(),
                    a,
                    b,
                }
            })
            .collect();
        list.serialize(s)
    }
}

impl<'de> serde::Deserialize<'de> for ZetaExpr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use std::str::FromStr as _;
        let list = Vec::<ZetaTermSer>::deserialize(d)?;
        let mut acc = ZetaExpr::zero();
        let q = Var::q();
        for t in list {
            let mut p = MultiPoly::zero();
            for (exp, coeff) in t.p {
                let e: u32 = exp.parse().map_err(serde::de::Error::custom)?;
                let c = BigInt::from_str(&coeff).map_err(serde::de::Error::custom)?;
                p = p.add(&MultiPoly::term(
                    super::Monomial::var(q).pow(e),
                    c,
                ));
            }
            acc = acc.add(&ZetaExpr::term(p, t.a, t.b));
        }
        Ok(acc)
    }
}
