//! Genus-symbolic closed forms: finite sums of `c·q^(a·g+b)·(q−1)^(c·g+d)`.
//!
//! This is the shape of every final genus-symbolic answer of the engine.
//! Beyond the sorted-and-merged invariant, terms are kept in a *strong*
//! canonical form so that structural equality coincides with equality as
//! functions of the genus: within each group of terms sharing the g-slopes
//! `(a, c)`, the Laurent coefficient `Σ coeff·q^b(q−1)^d` is rewritten as
//! `q^β·(q−1)^δ·P(q)` with `P ∈ ℤ[q]`, `P(0) ≠ 0 ≠ P(1)`, and re-expanded
//! along the monomials of `P`. That normal form is unique, so two formulas
//! that agree as functions are identical term lists.

use super::{display_factored_q, parse_genus_poly, MultiPoly, Var};
use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use std::fmt;

/// One canonical term `coeff · q^(a·g+b) · (q−1)^(c·g+d)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GenusTerm {
    /// Integer coefficient, serialized as a decimal string for exactness.
    #[serde(with = "bigint_string")]
    pub coeff: BigInt,
    pub a: i64,
    pub b: i64,
    pub c: i64,
    pub d: i64,
}

mod bigint_string {
    use num_bigint::BigInt;
    use serde::{Deserialize, Deserializer, Serializer};
    use std::str::FromStr;

    pub fn serialize<S: Serializer>(v: &BigInt, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigInt, D::Error> {
        let text = String::deserialize(d)?;
        BigInt::from_str(&text).map_err(serde::de::Error::custom)
    }
}

/// Canonical sum of genus terms; see the module docs for the normal form.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GenusPoly {
    terms: Vec<GenusTerm>,
}

impl GenusPoly {
    pub fn zero() -> GenusPoly {
        GenusPoly { terms: Vec::new() }
    }

    pub fn one() -> GenusPoly {
        GenusPoly::constant(1)
    }

    pub fn constant(c: impl Into<BigInt>) -> GenusPoly {
        GenusPoly::term(c, 0, 0, 0, 0)
    }

    /// The single term `coeff·q^(a·g+b)·(q−1)^(c·g+d)`.
    pub fn term(coeff: impl Into<BigInt>, a: i64, b: i64, c: i64, d: i64) -> GenusPoly {
        GenusPoly::normalize(vec![GenusTerm {
            coeff: coeff.into(),
            a,
            b,
            c,
            d,
        }])
    }

    /// Embeds a univariate-in-q polynomial as a genus-constant closed form.
    pub fn from_qpoly(p: &MultiPoly) -> crate::Result<GenusPoly> {
        let coeffs = p.univariate_coeffs(Var::q()).ok_or_else(|| {
            crate::Error::InvalidInput(format!("not univariate in q: {p}"))
        })?;
        Ok(GenusPoly::normalize(
            coeffs
                .into_iter()
                .enumerate()
                .map(|(i, c)| GenusTerm {
                    coeff: c,
                    a: 0,
                    b: i as i64,
                    c: 0,
                    d: 0,
                })
                .collect(),
        ))
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[GenusTerm] {
        &self.terms
    }

    pub fn neg(&self) -> GenusPoly {
        GenusPoly {
            terms: self
                .terms
                .iter()
                .map(|t| GenusTerm {
                    coeff: -&t.coeff,
                    ..*t
                })
                .collect(),
        }
    }

    pub fn add(&self, other: &GenusPoly) -> GenusPoly {
        let mut all = self.terms.clone();
        all.extend(other.terms.iter().cloned());
        GenusPoly::normalize(all)
    }

    pub fn sub(&self, other: &GenusPoly) -> GenusPoly {
        self.add(&other.neg())
    }

    pub fn mul(&self, other: &GenusPoly) -> GenusPoly {
        let mut all = Vec::with_capacity(self.terms.len() * other.terms.len());
        for t in &self.terms {
            for u in &other.terms {
                all.push(GenusTerm {
                    coeff: &t.coeff * &u.coeff,
                    a: t.a + u.a,
                    b: t.b + u.b,
                    c: t.c + u.c,
                    d: t.d + u.d,
                });
            }
        }
        GenusPoly::normalize(all)
    }

    /// Multiplies by the single factor `q^(a·g+b)·(q−1)^(c·g+d)`.
    pub fn mul_exp(&self, a: i64, b: i64, c: i64, d: i64) -> GenusPoly {
        GenusPoly::normalize(
            self.terms
                .iter()
                .map(|t| GenusTerm {
                    coeff: t.coeff.clone(),
                    a: t.a + a,
                    b: t.b + b,
                    c: t.c + c,
                    d: t.d + d,
                })
                .collect(),
        )
    }

    pub fn pow(&self, k: u32) -> GenusPoly {
        let mut acc = GenusPoly::one();
        for _ in 0..k {
            acc = acc.mul(self);
        }
        acc
    }

    /// Substitutes a concrete genus, returning the exact factored value.
    pub fn evaluate_at_genus(&self, g: i64) -> QFactored {
        let entries: Vec<(i64, i64, BigInt)> = self
            .terms
            .iter()
            .map(|t| (t.a * g + t.b, t.c * g + t.d, t.coeff.clone()))
            .collect();
        match normalize_laurent_group(&entries) {
            None => QFactored::zero(),
            Some((beta, delta, p)) => QFactored {
                num: p,
                q_exp: beta,
                qm1_exp: delta,
            },
        }
    }

    /// The strong canonical form described in the module docs.
    fn normalize(terms: Vec<GenusTerm>) -> GenusPoly {
        use std::collections::BTreeMap;
        let mut groups: BTreeMap<(i64, i64), Vec<(i64, i64, BigInt)>> = BTreeMap::new();
        for t in terms {
            if t.coeff.is_zero() {
                continue;
            }
            groups
                .entry((t.a, t.c))
                .or_default()
                .push((t.b, t.d, t.coeff));
        }
        let mut out = Vec::new();
        for ((a, c), entries) in groups {
            if let Some((beta, delta, p)) = normalize_laurent_group(&entries) {
                for (i, coeff) in p
                    .univariate_coeffs(Var::q())
                    .expect("normal form is univariate in q")
                    .into_iter()
                    .enumerate()
                {
                    if !coeff.is_zero() {
                        out.push(GenusTerm {
                            coeff,
                            a,
                            b: beta + i as i64,
                            c,
                            d: delta,
                        });
                    }
                }
            }
        }
        out.sort_by_key(|t| (t.a, t.c, t.b, t.d));
        GenusPoly { terms: out }
    }
}

/// Normalizes `Σ coeff·q^b·(q−1)^d` (b, d ∈ ℤ) to `q^β·(q−1)^δ·P(q)` with
/// `P(0) ≠ 0 ≠ P(1)`; `None` if the sum is zero.
fn normalize_laurent_group(entries: &[(i64, i64, BigInt)]) -> Option<(i64, i64, MultiPoly)> {
    if entries.is_empty() {
        return None;
    }
    let bmin = entries.iter().map(|e| e.0).min().unwrap();
    let dmin = entries.iter().map(|e| e.1).min().unwrap();
    let q = MultiPoly::q();
    let qm1 = MultiPoly::q_minus_1();
    let mut p = MultiPoly::zero();
    for (b, d, coeff) in entries {
        let t = q
            .pow((b - bmin) as u32)
            .mul(&qm1.pow((d - dmin) as u32))
            .scale(coeff);
        p = p.add(&t);
    }
    if p.is_zero() {
        return None;
    }
    let mut beta = bmin;
    let mut delta = dmin;
    while let Some(d) = p.divide_exact(&q) {
        p = d;
        beta += 1;
    }
    while let Some(d) = p.divide_exact(&qm1) {
        p = d;
        delta += 1;
    }
    Some((beta, delta, p))
}

// ---------------------------------------------------------------------------
// Factored evaluation results
// ---------------------------------------------------------------------------

/// An exact value `num(q)·q^(q_exp)·(q−1)^(qm1_exp)` with `num` not divisible
/// by `q` or `q−1` — the result of evaluating a [`GenusPoly`] at a concrete
/// genus. Negative exponents are allowed (the value is then a rational
/// function of q, not a polynomial).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QFactored {
    pub num: MultiPoly,
    pub q_exp: i64,
    pub qm1_exp: i64,
}

impl QFactored {
    pub fn zero() -> QFactored {
        QFactored {
            num: MultiPoly::zero(),
            q_exp: 0,
            qm1_exp: 0,
        }
    }

    pub fn one() -> QFactored {
        QFactored {
            num: MultiPoly::one(),
            q_exp: 0,
            qm1_exp: 0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.num.is_zero()
    }

    pub fn is_one(&self) -> bool {
        self.num.is_one() && self.q_exp == 0 && self.qm1_exp == 0
    }

    /// Expands to an ordinary polynomial in q when the exponents permit.
    pub fn to_poly(&self) -> Option<MultiPoly> {
        if self.is_zero() {
            return Some(MultiPoly::zero());
        }
        if self.q_exp < 0 || self.qm1_exp < 0 {
            return None;
        }
        Some(
            self.num
                .mul(&MultiPoly::q().pow(self.q_exp as u32))
                .mul(&MultiPoly::q_minus_1().pow(self.qm1_exp as u32)),
        )
    }
}

impl fmt::Display for QFactored {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        if let Some(p) = self.to_poly() {
            return write!(f, "{}", display_factored_q(&p));
        }
        // Rational-function case: show the factored form with explicit
        // (possibly negative) exponents.
        let mut parts: Vec<String> = Vec::new();
        match self.q_exp {
            0 => {}
            1 => parts.push("q".into()),
            e if e > 1 => parts.push(format!("q^{e}")),
            e => parts.push(format!("q^({e})")),
        }
        match self.qm1_exp {
            0 => {}
            1 => parts.push("(q - 1)".into()),
            e if e > 1 => parts.push(format!("(q - 1)^{e}")),
            e => parts.push(format!("(q - 1)^({e})")),
        }
        if !self.num.is_one() || parts.is_empty() {
            if self.num.num_terms() > 1 {
                parts.insert(0, format!("({})", self.num));
            } else {
                parts.insert(0, format!("{}", self.num));
            }
        }
        write!(f, "{}", parts.join("*"))
    }
}

// ---------------------------------------------------------------------------
// Printing / parsing
// ---------------------------------------------------------------------------

/// Formats `slope·g + konst` for an exponent position.
fn format_linear_g(slope: i64, konst: i64) -> String {
    if slope == 0 {
        return konst.to_string();
    }
    let head = match slope {
        1 => "g".to_string(),
        -1 => "-g".to_string(),
        s => format!("{s}*g"),
    };
    match konst.cmp(&0) {
        std::cmp::Ordering::Equal => head,
        std::cmp::Ordering::Greater => format!("{head} + {konst}"),
        std::cmp::Ordering::Less => format!("{head} - {}", -konst),
    }
}

fn format_power(base: &str, wrap: bool, slope: i64, konst: i64) -> Option<String> {
    if slope == 0 && konst == 0 {
        return None;
    }
    let b = if wrap {
        format!("({base})")
    } else {
        base.to_string()
    };
    if slope == 0 && konst == 1 {
        return Some(b);
    }
    if slope == 0 && konst > 1 {
        return Some(format!("{b}^{konst}"));
    }
    Some(format!("{b}^({})", format_linear_g(slope, konst)))
}

impl fmt::Display for GenusPoly {
    /// Canonical display, e.g. `q^(2*g - 1)*(q - 1)^(2*g) + q^(2*g - 1)*(q - 1)`;
    /// inverted exactly by [`parse_genus_poly`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (idx, t) in self.terms.iter().enumerate() {
            let neg = t.coeff.is_negative();
            let abs = t.coeff.abs();
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
            if !abs.is_one() {
                factors.push(abs.to_string());
            }
            if let Some(s) = format_power("q", false, t.a, t.b) {
                factors.push(s);
            }
            if let Some(s) = format_power("q - 1", true, t.c, t.d) {
                factors.push(s);
            }
            if factors.is_empty() {
                factors.push("1".to_string());
            }
            write!(f, "{}", factors.join("*"))?;
        }
        Ok(())
    }
}

impl std::str::FromStr for GenusPoly {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<GenusPoly> {
        parse_genus_poly(s)
    }
}
