//! Exact multivariate polynomial arithmetic over the integers.
//!
//! This module is the universal currency of the engine: every symbolic object
//! — stratification classes, Gröbner bases, TQFT matrix entries, zeta-function
//! coefficients — is built from [`MultiPoly`], a canonical sparse polynomial
//! with arbitrary-precision integer coefficients over globally interned
//! variable names.
//!
//! Two specialized closed-form algebras live in submodules: [`GenusPoly`]
//! (sums of `c·q^(a·g+b)·(q−1)^(c·g+d)`, the shape of all genus-symbolic
//! answers) and [`ZetaExpr`] (sums of `p(q)·q^(−a·s)·(q−1)^(−b·s)`, the shape
//! of representation zeta functions).

mod genus;
mod parse;
mod zeta_expr;

pub use genus::{GenusPoly, GenusTerm, QFactored};
pub use parse::{parse_genus_poly, parse_poly, parse_zeta_expr};
pub use zeta_expr::ZetaExpr;

use crate::{Error, Result};
use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, Zero};
use once_cell::sync::Lazy;
use smallvec::SmallVec;
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::RwLock;

// ---------------------------------------------------------------------------
// Variable interner
// ---------------------------------------------------------------------------

struct Interner {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

static INTERNER: Lazy<RwLock<Interner>> = Lazy::new(|| {
    RwLock::new(Interner {
        names: Vec::new(),
        ids: HashMap::new(),
    })
});

/// An interned variable name.
///
/// Equality and ordering are by intern id (creation order within the current
/// process); all user-facing canonical orderings (printing, serialization)
/// sort by the variable *name* instead, so output is stable across runs.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(u32);

impl Var {
    /// Interns `name` and returns its handle; repeated calls with the same
    /// name return the same handle.
    pub fn intern(name: &str) -> Var {
        if let Some(&id) = INTERNER.read().unwrap().ids.get(name) {
            return Var(id);
        }
        let mut int = INTERNER.write().unwrap();
        if let Some(&id) = int.ids.get(name) {
            return Var(id);
        }
        let id = int.names.len() as u32;
        int.names.push(name.to_string());
        int.ids.insert(name.to_string(), id);
        Var(id)
    }

    /// The distinguished variable `q` (the class of the affine line).
    pub fn q() -> Var {
        Var::intern("q")
    }

    /// Returns the variable's name.
    pub fn name(self) -> String {
        INTERNER.read().unwrap().names[self.0 as usize].clone()
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

impl serde::Serialize for Var {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> serde::Deserialize<'de> for Var {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        Ok(Var::intern(&name))
    }
}

/// Sorts variables by name (the canonical user-facing order).
pub fn sort_vars_by_name(vars: &mut [Var]) {
    vars.sort_by_key(|v| v.name());
}

// ---------------------------------------------------------------------------
// Monomials
// ---------------------------------------------------------------------------

/// A monomial: sparse exponent vector, sorted by variable id, exponents > 0.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Default)]
pub struct Monomial(SmallVec<[(Var, u32); 4]>);

impl Monomial {
    pub fn one() -> Monomial {
        Monomial(SmallVec::new())
    }

    pub fn var(v: Var) -> Monomial {
        Monomial(smallvec::smallvec![(v, 1)])
    }

    /// Builds a monomial from (variable, exponent) pairs; zero exponents are
    /// dropped, duplicates merged.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Var, u32)>) -> Monomial {
        let mut v: SmallVec<[(Var, u32); 4]> =
            pairs.into_iter().filter(|&(_, e)| e > 0).collect();
        v.sort_by_key(|&(var, _)| var);
        let mut out: SmallVec<[(Var, u32); 4]> = SmallVec::new();
        for (var, e) in v {
            match out.last_mut() {
                Some((last, le)) if *last == var => *le += e,
                _ => out.push((var, e)),
            }
        }
        Monomial(out)
    }

    pub fn is_one(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total_degree(&self) -> u32 {
        self.0.iter().map(|&(_, e)| e).sum()
    }

    pub fn deg_in(&self, v: Var) -> u32 {
        self.0
            .iter()
            .find(|&&(var, _)| var == v)
            .map_or(0, |&(_, e)| e)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, u32)> + '_ {
        self.0.iter().copied()
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.0.iter().map(|&(v, _)| v)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        let mut out: SmallVec<[(Var, u32); 4]> = SmallVec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.0.len() && j < other.0.len() {
            let (va, ea) = self.0[i];
            let (vb, eb) = other.0[j];
            match va.cmp(&vb) {
                Ordering::Less => {
                    out.push((va, ea));
                    i += 1;
                }
                Ordering::Greater => {
                    out.push((vb, eb));
                    j += 1;
                }
                Ordering::Equal => {
                    out.push((va, ea + eb));
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&self.0[i..]);
        out.extend_from_slice(&other.0[j..]);
        Monomial(out)
    }

    pub fn pow(&self, k: u32) -> Monomial {
        if k == 0 {
            return Monomial::one();
        }
        Monomial(self.0.iter().map(|&(v, e)| (v, e * k)).collect())
    }

    /// Exact division; `None` if `other` does not divide `self`.
    pub fn try_div(&self, other: &Monomial) -> Option<Monomial> {
        let mut out: SmallVec<[(Var, u32); 4]> = SmallVec::new();
        let mut i = 0;
        for &(vb, eb) in &other.0 {
            loop {
                if i >= self.0.len() {
                    return None;
                }
                let (va, ea) = self.0[i];
                match va.cmp(&vb) {
                    Ordering::Less => {
                        out.push((va, ea));
                        i += 1;
                    }
                    Ordering::Equal => {
                        if ea < eb {
                            return None;
                        }
                        if ea > eb {
                            out.push((va, ea - eb));
                        }
                        i += 1;
                        break;
                    }
                    Ordering::Greater => return None,
                }
            }
        }
        out.extend_from_slice(&self.0[i..]);
        Some(Monomial(out))
    }

    pub fn divides(&self, other: &Monomial) -> bool {
        other.try_div(self).is_some()
    }

    /// Least common multiple (used by Buchberger S-pairs).
    pub fn lcm(&self, other: &Monomial) -> Monomial {
        let mut out: SmallVec<[(Var, u32); 4]> = SmallVec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.0.len() && j < other.0.len() {
            let (va, ea) = self.0[i];
            let (vb, eb) = other.0[j];
            match va.cmp(&vb) {
                Ordering::Less => {
                    out.push((va, ea));
                    i += 1;
                }
                Ordering::Greater => {
                    out.push((vb, eb));
                    j += 1;
                }
                Ordering::Equal => {
                    out.push((va, ea.max(eb)));
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&self.0[i..]);
        out.extend_from_slice(&other.0[j..]);
        Monomial(out)
    }

    /// Graded-lexicographic comparison in intern-id order: first by total
    /// degree, then lexicographically (earlier id = more significant).
    fn grlex_cmp(&self, other: &Monomial) -> Ordering {
        match self.total_degree().cmp(&other.total_degree()) {
            Ordering::Equal => {}
            o => return o,
        }
        let (mut i, mut j) = (0, 0);
        loop {
            match (self.0.get(i), other.0.get(j)) {
                (None, None) => return Ordering::Equal,
                // Same total degree with one side exhausted cannot happen,
                // but a consistent answer keeps the order total.
                (None, Some(_)) => return Ordering::Less,
                (Some(_), None) => return Ordering::Greater,
                (Some(&(va, ea)), Some(&(vb, eb))) => match va.cmp(&vb) {
                    Ordering::Less => return Ordering::Greater,
                    Ordering::Greater => return Ordering::Less,
                    Ordering::Equal => {
                        if ea != eb {
                            return ea.cmp(&eb);
                        }
                        i += 1;
                        j += 1;
                    }
                },
            }
        }
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.grlex_cmp(other)
    }
}

// ---------------------------------------------------------------------------
// Polynomials
// ---------------------------------------------------------------------------

/// A canonical sparse multivariate polynomial over ℤ.
///
/// Terms are stored sorted by descending monomial order with no zero
/// coefficients, so structural equality coincides with ring equality.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct MultiPoly {
    terms: Vec<(Monomial, BigInt)>,
}

impl MultiPoly {
    // -- constructors -------------------------------------------------------

    pub fn zero() -> MultiPoly {
        MultiPoly { terms: Vec::new() }
    }

    pub fn one() -> MultiPoly {
        MultiPoly::constant(1)
    }

    pub fn constant(c: impl Into<BigInt>) -> MultiPoly {
        let c = c.into();
        if c.is_zero() {
            return MultiPoly::zero();
        }
        MultiPoly {
            terms: vec![(Monomial::one(), c)],
        }
    }

    pub fn var(v: Var) -> MultiPoly {
        MultiPoly {
            terms: vec![(Monomial::var(v), BigInt::one())],
        }
    }

    /// The distinguished polynomial `q`.
    pub fn q() -> MultiPoly {
        MultiPoly::var(Var::q())
    }

    /// The distinguished polynomial `q − 1`.
    pub fn q_minus_1() -> MultiPoly {
        &MultiPoly::q() - &MultiPoly::one()
    }

    pub fn term(m: Monomial, c: impl Into<BigInt>) -> MultiPoly {
        let c = c.into();
        if c.is_zero() {
            return MultiPoly::zero();
        }
        MultiPoly { terms: vec![(m, c)] }
    }

    /// Builds a polynomial from arbitrary (monomial, coefficient) pairs;
    /// sorts, merges duplicates, drops zeros.
    pub fn from_terms(pairs: impl IntoIterator<Item = (Monomial, BigInt)>) -> MultiPoly {
        let mut v: Vec<(Monomial, BigInt)> = pairs.into_iter().collect();
        v.sort_by(|a, b| b.0.cmp(&a.0));
        let mut out: Vec<(Monomial, BigInt)> = Vec::with_capacity(v.len());
        for (m, c) in v {
            match out.last_mut() {
                Some((lm, lc)) if *lm == m => *lc += c,
                _ => out.push((m, c)),
            }
        }
        out.retain(|(_, c)| !c.is_zero());
        MultiPoly { terms: out }
    }

    // -- queries ------------------------------------------------------------

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_one(&self) -> bool {
        self.terms.len() == 1 && self.terms[0].0.is_one() && self.terms[0].1.is_one()
    }

    pub fn is_constant(&self) -> bool {
        self.terms.len() <= 1 && self.terms.first().map_or(true, |(m, _)| m.is_one())
    }

    /// The constant value if this polynomial is constant (0 for the zero
    /// polynomial), `None` otherwise.
    pub fn as_constant(&self) -> Option<BigInt> {
        if self.is_zero() {
            return Some(BigInt::zero());
        }
        if self.is_constant() {
            return Some(self.terms[0].1.clone());
        }
        None
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &BigInt)> + '_ {
        self.terms.iter().map(|(m, c)| (m, c))
    }

    /// Leading (monomial, coefficient) in the internal graded-lex order.
    pub fn leading(&self) -> Option<(&Monomial, &BigInt)> {
        self.terms.first().map(|(m, c)| (m, c))
    }

    /// Trailing (smallest) term in the internal graded-lex order.
    pub fn trailing(&self) -> Option<(&Monomial, &BigInt)> {
        self.terms.last().map(|(m, c)| (m, c))
    }

    /// All variables actually occurring (sorted by intern id).
    pub fn vars(&self) -> BTreeSet<Var> {
        let mut s = BTreeSet::new();
        for (m, _) in &self.terms {
            s.extend(m.vars());
        }
        s
    }

    pub fn mentions(&self, v: Var) -> bool {
        self.terms.iter().any(|(m, _)| m.deg_in(v) > 0)
    }

    pub fn degree_in(&self, v: Var) -> u32 {
        self.terms.iter().map(|(m, _)| m.deg_in(v)).max().unwrap_or(0)
    }

    pub fn total_degree(&self) -> u32 {
        self.terms
            .iter()
            .map(|(m, _)| m.total_degree())
            .max()
            .unwrap_or(0)
    }

    /// Maximum degree in any single variable (resource-budget checks).
    pub fn max_var_degree(&self) -> u32 {
        self.vars()
            .into_iter()
            .map(|v| self.degree_in(v))
            .max()
            .unwrap_or(0)
    }

    // -- arithmetic ---------------------------------------------------------

    pub fn neg(&self) -> MultiPoly {
        MultiPoly {
            terms: self.terms.iter().map(|(m, c)| (m.clone(), -c)).collect(),
        }
    }

    pub fn add(&self, other: &MultiPoly) -> MultiPoly {
        let mut out: Vec<(Monomial, BigInt)> =
            Vec::with_capacity(self.terms.len() + other.terms.len());
        let (mut i, mut j) = (0, 0);
        while i < self.terms.len() && j < other.terms.len() {
            let (ma, ca) = &self.terms[i];
            let (mb, cb) = &other.terms[j];
            match mb.cmp(ma) {
                Ordering::Less => {
                    out.push((ma.clone(), ca.clone()));
                    i += 1;
                }
                Ordering::Greater => {
                    out.push((mb.clone(), cb.clone()));
                    j += 1;
                }
                Ordering::Equal => {
                    let c = ca + cb;
                    if !c.is_zero() {
                        out.push((ma.clone(), c));
                    }
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend(self.terms[i..].iter().cloned());
        out.extend(other.terms[j..].iter().cloned());
        MultiPoly { terms: out }
    }

    pub fn sub(&self, other: &MultiPoly) -> MultiPoly {
        self.add(&other.neg())
    }

    pub fn mul(&self, other: &MultiPoly) -> MultiPoly {
        if self.is_zero() || other.is_zero() {
            return MultiPoly::zero();
        }
        let mut pairs = Vec::with_capacity(self.terms.len() * other.terms.len());
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                pairs.push((ma.mul(mb), ca * cb));
            }
        }
        MultiPoly::from_terms(pairs)
    }

    pub fn scale(&self, c: &BigInt) -> MultiPoly {
        if c.is_zero() {
            return MultiPoly::zero();
        }
        MultiPoly {
            terms: self.terms.iter().map(|(m, k)| (m.clone(), k * c)).collect(),
        }
    }

    /// Multiplies by a single term (no re-sorting needed: monomial orders are
    /// multiplicative).
    pub fn mul_term(&self, m: &Monomial, c: &BigInt) -> MultiPoly {
        if c.is_zero() {
            return MultiPoly::zero();
        }
        MultiPoly {
            terms: self
                .terms
                .iter()
                .map(|(tm, tc)| (tm.mul(m), tc * c))
                .collect(),
        }
    }

    pub fn pow(&self, k: u32) -> MultiPoly {
        let mut result = MultiPoly::one();
        let mut base = self.clone();
        let mut k = k;
        while k > 0 {
            if k & 1 == 1 {
                result = result.mul(&base);
            }
            k >>= 1;
            if k > 0 {
                base = base.mul(&base);
            }
        }
        result
    }

    // -- structure ----------------------------------------------------------

    /// Coefficients of `self` viewed as a univariate polynomial in `v` with
    /// polynomial coefficients, ascending from degree 0.
    pub fn coeffs_in(&self, v: Var) -> Vec<MultiPoly> {
        let d = self.degree_in(v) as usize;
        let mut out = vec![MultiPoly::zero(); d + 1];
        for (m, c) in &self.terms {
            let e = m.deg_in(v) as usize;
            let rest = Monomial::from_pairs(m.iter().filter(|&(var, _)| var != v));
            out[e] = out[e].add(&MultiPoly::term(rest, c.clone()));
        }
        out
    }

    /// Coefficient vector if `self` is univariate in `v` (constants allowed),
    /// ascending from degree 0; `None` if any other variable occurs.
    pub fn univariate_coeffs(&self, v: Var) -> Option<Vec<BigInt>> {
        let mut out = vec![BigInt::zero(); self.degree_in(v) as usize + 1];
        for (m, c) in &self.terms {
            let e = m.deg_in(v);
            if m.total_degree() != e {
                return None;
            }
            out[e as usize] = c.clone();
        }
        Some(out)
    }

    /// Content: non-negative gcd of all coefficients (0 for the zero poly).
    pub fn content(&self) -> BigInt {
        let mut g = BigInt::zero();
        for (_, c) in &self.terms {
            g = g.gcd(c);
            if g.is_one() {
                break;
            }
        }
        g
    }

    /// Divides out the content (keeps the sign of the leading coefficient).
    pub fn primitive_part(&self) -> MultiPoly {
        let c = self.content();
        if c.is_zero() || c.is_one() {
            return self.clone();
        }
        MultiPoly {
            terms: self.terms.iter().map(|(m, k)| (m.clone(), k / &c)).collect(),
        }
    }

    /// Primitive part with positive leading coefficient — the canonical
    /// scalar normalization used for caching and set-membership.
    pub fn canonical_scaled(&self) -> MultiPoly {
        let p = self.primitive_part();
        match p.leading() {
            Some((_, c)) if c.is_negative() => p.neg(),
            _ => p,
        }
    }

    /// Exact division in ℤ[X]: `Some(h)` with `self = divisor·h`, or `None`
    /// if the division is not exact.
    pub fn divide_exact(&self, divisor: &MultiPoly) -> Option<MultiPoly> {
        if divisor.is_zero() {
            return None;
        }
        if self.is_zero() {
            return Some(MultiPoly::zero());
        }
        let (dm, dc) = divisor.leading().unwrap();
        let mut r = self.clone();
        let mut quo: Vec<(Monomial, BigInt)> = Vec::new();
        while let Some((rm, rc)) = r.leading() {
            let tm = rm.try_div(dm)?;
            let (tc, rem) = rc.div_rem(dc);
            if !rem.is_zero() {
                return None;
            }
            quo.push((tm.clone(), tc.clone()));
            r = r.sub(&divisor.mul_term(&tm, &tc));
        }
        // Quotient terms were produced in strictly decreasing order.
        Some(MultiPoly { terms: quo })
    }

    // -- evaluation / substitution -----------------------------------------

    /// Denominator-cleared evaluation in one variable:
    /// `ev_a(f, num/den) = den^(deg_a f) · f(a ↦ num/den)`, always a
    /// polynomial. `num` and `den` must not mention `a`.
    pub fn substitute(&self, a: Var, num: &MultiPoly, den: &MultiPoly) -> Result<MultiPoly> {
        if num.mentions(a) || den.mentions(a) {
            return Err(Error::InvalidInput(format!(
                "substitution value for {a} mentions {a}"
            )));
        }
        if den.is_zero() {
            return Err(Error::InvalidInput(
                "substitution denominator is zero".into(),
            ));
        }
        let d = self.degree_in(a) as usize;
        if d == 0 {
            return Ok(self.clone());
        }
        let coeffs = self.coeffs_in(a);
        // den^k for k = 0..=d
        let mut den_pows = Vec::with_capacity(d + 1);
        den_pows.push(MultiPoly::one());
        for k in 1..=d {
            den_pows.push(den_pows[k - 1].mul(den));
        }
        // Horner: r = c_d; r = r·num + c_i·den^(d−i) for i = d−1 .. 0
        let mut r = coeffs[d].clone();
        for i in (0..d).rev() {
            r = r.mul(num).add(&coeffs[i].mul(&den_pows[d - i]));
        }
        Ok(r)
    }

    /// Plain substitution of a polynomial value (no denominator clearing).
    pub fn subst_value(&self, a: Var, value: &MultiPoly) -> Result<MultiPoly> {
        self.substitute(a, value, &MultiPoly::one())
    }

    /// Simultaneous polynomial substitution; every variable of `self` must be
    /// mapped.
    pub fn eval_poly_map(&self, map: &BTreeMap<Var, MultiPoly>) -> Result<MultiPoly> {
        let mut acc = MultiPoly::zero();
        for (m, c) in &self.terms {
            let mut t = MultiPoly::constant(c.clone());
            for (v, e) in m.iter() {
                let img = map.get(&v).ok_or_else(|| {
                    Error::InvalidInput(format!("eval_poly_map: unmapped variable {v}"))
                })?;
                t = t.mul(&img.pow(e));
            }
            acc = acc.add(&t);
        }
        Ok(acc)
    }

    /// Exact integer evaluation; every variable must be mapped.
    pub fn eval_int(&self, map: &BTreeMap<Var, BigInt>) -> Result<BigInt> {
        let mut acc = BigInt::zero();
        for (m, c) in &self.terms {
            let mut t = c.clone();
            for (v, e) in m.iter() {
                let val = map.get(&v).ok_or_else(|| {
                    Error::InvalidInput(format!("eval_int: unmapped variable {v}"))
                })?;
                t *= val.pow(e);
            }
            acc += t;
        }
        Ok(acc)
    }

    /// Evaluates a univariate-in-`q` polynomial at an integer.
    pub fn eval_q(&self, q0: i64) -> Result<BigInt> {
        let coeffs = self.univariate_coeffs(Var::q()).ok_or_else(|| {
            Error::InvalidInput(format!("polynomial is not univariate in q: {self}"))
        })?;
        let q0 = BigInt::from(q0);
        let mut acc = BigInt::zero();
        for c in coeffs.into_iter().rev() {
            acc = acc * &q0 + c;
        }
        Ok(acc)
    }

    // -- roots and powers ---------------------------------------------------

    /// Exact polynomial n-th root, if one exists over ℤ.
    pub fn nth_root(&self, n: u32) -> Option<MultiPoly> {
        if n == 0 {
            return None;
        }
        if n == 1 {
            return Some(self.clone());
        }
        if self.is_zero() {
            return Some(MultiPoly::zero());
        }
        let (lm, lc) = self.leading().unwrap();
        if lm.iter().any(|(_, e)| e % n != 0) {
            return None;
        }
        let root_m = Monomial::from_pairs(lm.iter().map(|(v, e)| (v, e / n)));
        let root_c = int_nth_root_exact(lc, n)?;
        let denom_m = root_m.pow(n - 1);
        let denom_c = BigInt::from(n) * root_c.pow(n - 1);
        let mut u = MultiPoly::term(root_m.clone(), root_c);
        let mut last_m = root_m;
        for _ in 0..10_000 {
            let r = self.sub(&u.pow(n));
            if r.is_zero() {
                return Some(u);
            }
            let (rm, rc) = r.leading().unwrap();
            let tm = rm.try_div(&denom_m)?;
            if tm.cmp(&last_m) != Ordering::Less {
                return None;
            }
            let (tc, rem) = rc.div_rem(&denom_c);
            if !rem.is_zero() {
                return None;
            }
            u = u.add(&MultiPoly::term(tm.clone(), tc));
            last_m = tm;
        }
        None
    }

    /// Largest-exponent perfect-power decomposition: `Some((u, n))` with
    /// `self = u^n`, `n ≥ 2` maximal; `None` if `self` is not a proper power.
    pub fn perfect_power_root(&self) -> Option<(MultiPoly, u32)> {
        if self.is_zero() {
            return None;
        }
        if let Some(c) = self.as_constant() {
            // Constant case: largest n with c a perfect n-th power.
            for n in (2..=c.bits().max(2) as u32).rev() {
                if let Some(u) = int_nth_root_exact(&c, n) {
                    return Some((MultiPoly::constant(u), n));
                }
            }
            return None;
        }
        let (lm, _) = self.leading().unwrap();
        let (tm, _) = self.trailing().unwrap();
        let mut g = 0u32;
        for (_, e) in lm.iter().chain(tm.iter()) {
            g = gcd_u32(g, e);
        }
        if g < 2 {
            return None;
        }
        let mut divisors: Vec<u32> = (2..=g).filter(|d| g % d == 0).collect();
        divisors.sort_unstable_by(|a, b| b.cmp(a));
        for n in divisors {
            if let Some(u) = self.nth_root(n) {
                return Some((u, n));
            }
        }
        None
    }

    /// Exact square root with positive leading coefficient, if one exists.
    pub fn square_root(&self) -> Option<MultiPoly> {
        if self.is_zero() {
            return Some(MultiPoly::zero());
        }
        if self.leading().map(|(_, c)| c.is_negative()) == Some(true) {
            return None;
        }
        self.nth_root(2)
    }

    /// If `self` is univariate in `a` and splits into linear factors over ℚ,
    /// returns all roots (as reduced fractions `(num, den)`, `den > 0`) with
    /// multiplicity, sorted ascending; `None` otherwise.
    ///
    /// Degenerate inputs (constants, polynomials mentioning other variables)
    /// return `None` — the caller treats that as "rule does not apply".
    pub fn univariate_linear_factors(&self, a: Var) -> Option<Vec<(BigInt, BigInt)>> {
        let (roots, rest) = self.rational_root_split(a)?;
        if rest.len() <= 1 {
            Some(roots)
        } else {
            None
        }
    }

    /// All rational roots of a polynomial univariate in `a`, with
    /// multiplicity, as reduced `(num, den)` fractions (`den > 0`) sorted
    /// ascending. Unlike [`univariate_linear_factors`](Self::univariate_linear_factors)
    /// this succeeds with a partial list when the cofactor does not split.
    /// `None` for non-univariate/constant input or when root search exceeds
    /// its factoring budget.
    pub fn univariate_rational_roots(&self, a: Var) -> Option<Vec<(BigInt, BigInt)>> {
        self.rational_root_split(a).map(|(roots, _)| roots)
    }

    /// Shared deflation loop: peels rational roots off a univariate
    /// polynomial, returning `(roots, remaining coefficients)`.
    fn rational_root_split(&self, a: Var) -> Option<(Vec<(BigInt, BigInt)>, Vec<BigInt>)> {
        let mut coeffs = self.univariate_coeffs(a)?;
        if coeffs.len() < 2 {
            return None; // constant
        }
        // Strip content (roots unaffected); keeps the deflation exact.
        let mut g = BigInt::zero();
        for c in &coeffs {
            g = g.gcd(c);
        }
        if !g.is_one() && !g.is_zero() {
            for c in &mut coeffs {
                *c /= &g;
            }
        }
        let mut roots: Vec<(BigInt, BigInt)> = Vec::new();
        // Factor out a^k.
        while coeffs.first().map(|c| c.is_zero()) == Some(true) {
            coeffs.remove(0);
            roots.push((BigInt::zero(), BigInt::one()));
        }
        'outer: while coeffs.len() > 1 {
            let trailing = coeffs[0].clone();
            let leading = coeffs.last().unwrap().clone();
            let ps = divisors_budgeted(&trailing)?;
            let rs = divisors_budgeted(&leading)?;
            if ps.len().checked_mul(rs.len())? > 100_000 {
                return None;
            }
            for p_abs in &ps {
                for r in &rs {
                    for sign in [1i64, -1] {
                        let p = p_abs * BigInt::from(sign);
                        if !p.gcd(r).is_one() {
                            continue;
                        }
                        if eval_rational_cleared(&coeffs, &p, r).is_zero() {
                            // Deflate by (r·a − p):  h_{i−1} = (c_i + p·h_i)/r.
                            let d = coeffs.len() - 1;
                            let mut h = vec![BigInt::zero(); d];
                            let mut carry = BigInt::zero(); // h_i, starting with h_d = 0
                            for i in (1..=d).rev() {
                                let num = &coeffs[i] + &p * &carry;
                                let (quot, rem) = num.div_rem(r);
                                debug_assert!(rem.is_zero());
                                if !rem.is_zero() {
                                    return None;
                                }
                                h[i - 1] = quot.clone();
                                carry = quot;
                            }
                            roots.push((p, r.clone()));
                            coeffs = h;
                            continue 'outer;
                        }
                    }
                }
            }
            break; // no rational root for the remaining factor
        }
        roots.sort_by(|(p1, r1), (p2, r2)| (p1 * r2).cmp(&(p2 * r1)));
        Some((roots, coeffs))
    }

    /// Deterministic total order independent of interner state: terms are
    /// compared in descending name-graded-lex monomial order (the `Display`
    /// order), coefficients break ties. Used wherever rule selection or
    /// canonical output must not depend on variable-creation order.
    pub fn cmp_names(&self, other: &MultiPoly) -> Ordering {
        let mut vars: Vec<Var> = self.vars().union(&other.vars()).copied().collect();
        sort_vars_by_name(&mut vars);
        let rank: HashMap<Var, usize> = vars.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let keyed = |p: &MultiPoly| -> Vec<(Vec<(usize, u32)>, BigInt)> {
            let mut t: Vec<(Vec<(usize, u32)>, BigInt)> = p
                .terms
                .iter()
                .map(|(m, c)| (name_key(m, &rank), c.clone()))
                .collect();
            t.sort_by(|a, b| name_grlex_cmp(&b.0, &a.0));
            t
        };
        let (ta, tb) = (keyed(self), keyed(other));
        for (a, b) in ta.iter().zip(tb.iter()) {
            match name_grlex_cmp(&a.0, &b.0) {
                Ordering::Equal => {}
                o => return o,
            }
            match a.1.cmp(&b.1) {
                Ordering::Equal => {}
                o => return o,
            }
        }
        ta.len().cmp(&tb.len())
    }

    /// Applies a variable renaming structurally (no arithmetic). Unmapped
    /// variables are kept; mapping several variables to one target merges
    /// exponents and coefficients canonically.
    pub fn rename_vars(&self, map: &HashMap<Var, Var>) -> MultiPoly {
        MultiPoly::from_terms(self.terms.iter().map(|(m, c)| {
            (
                Monomial::from_pairs(
                    m.iter().map(|(v, e)| (map.get(&v).copied().unwrap_or(v), e)),
                ),
                c.clone(),
            )
        }))
    }
}

/// Exact integer n-th root (`None` unless `c` is a perfect n-th power;
/// negative `c` allowed for odd `n`).
fn int_nth_root_exact(c: &BigInt, n: u32) -> Option<BigInt> {
    if c.is_zero() {
        return Some(BigInt::zero());
    }
    if c.is_negative() && n % 2 == 0 {
        return None;
    }
    let root_abs = num_integer::Roots::nth_root(&c.abs(), n);
    let root = if c.is_negative() { -root_abs } else { root_abs };
    if root.pow(n) == *c {
        Some(root)
    } else {
        None
    }
}

fn gcd_u32(a: u32, b: u32) -> u32 {
    if a == 0 {
        b
    } else {
        gcd_u32(b % a, a)
    }
}

/// Positive divisors of |x|, or `None` when factoring exceeds the budget
/// (callers treat that as "rule does not apply").
fn divisors_budgeted(x: &BigInt) -> Option<Vec<BigInt>> {
    let mut n = x.abs();
    if n.is_zero() {
        return None;
    }
    let mut primes: Vec<(BigInt, u32)> = Vec::new();
    let mut p = BigInt::from(2);
    let limit = BigInt::from(1_000_000u64);
    while &p * &p <= n && p <= limit {
        let mut e = 0u32;
        while (&n % &p).is_zero() {
            n /= &p;
            e += 1;
        }
        if e > 0 {
            primes.push((p.clone(), e));
        }
        p += if p == BigInt::from(2) { 1 } else { 2 };
    }
    if !n.is_one() {
        // No factor ≤ 10^6 remains; if n ≤ 10^12 it must be prime.
        if n <= BigInt::from(1_000_000_000_000u64) {
            primes.push((n, 1));
        } else {
            return None;
        }
    }
    let mut divs = vec![BigInt::one()];
    for (p, e) in primes {
        let mut next = Vec::with_capacity(divs.len() * (e as usize + 1));
        for d in &divs {
            let mut pk = BigInt::one();
            for _ in 0..=e {
                next.push(d * &pk);
                pk *= &p;
            }
        }
        divs = next;
        if divs.len() > 4096 {
            return None;
        }
    }
    divs.sort();
    Some(divs)
}

/// Denominator-cleared evaluation Σ c_i·p^i·den^(d−i) of a coefficient
/// vector (ascending) at the rational point p/den.
fn eval_rational_cleared(coeffs: &[BigInt], p: &BigInt, den: &BigInt) -> BigInt {
    let d = coeffs.len() - 1;
    let mut acc = BigInt::zero();
    let mut den_pow = BigInt::one();
    for (i, c) in coeffs.iter().enumerate().rev() {
        acc *= p;
        if i < d {
            den_pow *= den;
        }
        acc += c * &den_pow;
    }
    acc
}

// ---------------------------------------------------------------------------
// Operator impls
// ---------------------------------------------------------------------------

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $inner:ident) => {
        impl std::ops::$trait<&MultiPoly> for &MultiPoly {
            type Output = MultiPoly;
            fn $method(self, rhs: &MultiPoly) -> MultiPoly {
                MultiPoly::$inner(self, rhs)
            }
        }
        impl std::ops::$trait<MultiPoly> for MultiPoly {
            type Output = MultiPoly;
            fn $method(self, rhs: MultiPoly) -> MultiPoly {
                MultiPoly::$inner(&self, &rhs)
            }
        }
    };
}

impl_binop!(Add, add, add);
impl_binop!(Sub, sub, sub);
impl_binop!(Mul, mul, mul);

impl std::ops::Neg for &MultiPoly {
    type Output = MultiPoly;
    fn neg(self) -> MultiPoly {
        MultiPoly::neg(self)
    }
}

// ---------------------------------------------------------------------------
// Canonical printing
// ---------------------------------------------------------------------------

/// Name-ordered view of a monomial: (rank-in-name-order, exponent) pairs.
fn name_key(m: &Monomial, rank: &HashMap<Var, usize>) -> Vec<(usize, u32)> {
    let mut v: Vec<(usize, u32)> = m.iter().map(|(var, e)| (rank[&var], e)).collect();
    v.sort_by_key(|&(r, _)| r);
    v
}

/// Graded-lex comparison on name-ordered keys (larger = printed first).
fn name_grlex_cmp(a: &[(usize, u32)], b: &[(usize, u32)]) -> Ordering {
    let ta: u32 = a.iter().map(|&(_, e)| e).sum();
    let tb: u32 = b.iter().map(|&(_, e)| e).sum();
    match ta.cmp(&tb) {
        Ordering::Equal => {}
        o => return o,
    }
    let (mut i, mut j) = (0, 0);
    loop {
        match (a.get(i), b.get(j)) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(&(ra, ea)), Some(&(rb, eb))) => match ra.cmp(&rb) {
                Ordering::Less => return Ordering::Greater,
                Ordering::Greater => return Ordering::Less,
                Ordering::Equal => {
                    if ea != eb {
                        return ea.cmp(&eb);
                    }
                    i += 1;
                    j += 1;
                }
            },
        }
    }
}

impl fmt::Display for MultiPoly {
    /// Canonical text form: terms in descending graded-lex order with
    /// variables ordered by name; `^` for powers, `*` between factors,
    /// ` + ` / ` - ` between terms. The DSL parser inverts this exactly.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let mut vars: Vec<Var> = self.vars().into_iter().collect();
        sort_vars_by_name(&mut vars);
        let rank: HashMap<Var, usize> = vars.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let mut terms: Vec<(Vec<(usize, u32)>, &Monomial, &BigInt)> = self
            .terms
            .iter()
            .map(|(m, c)| (name_key(m, &rank), m, c))
            .collect();
        terms.sort_by(|a, b| name_grlex_cmp(&b.0, &a.0));
        for (idx, (key, _, c)) in terms.iter().enumerate() {
            let neg = c.is_negative();
            let abs = c.abs();
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
            if !abs.is_one() || key.is_empty() {
                factors.push(abs.to_string());
            }
            for &(r, e) in key {
                let name = vars[r].name();
                if e == 1 {
                    factors.push(name);
                } else {
                    factors.push(format!("{name}^{e}"));
                }
            }
            write!(f, "{}", factors.join("*"))?;
        }
        Ok(())
    }
}

impl fmt::Debug for MultiPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl std::str::FromStr for MultiPoly {
    type Err = Error;
    fn from_str(s: &str) -> Result<MultiPoly> {
        parse::parse_poly(s)
    }
}

impl serde::Serialize for MultiPoly {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for MultiPoly {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse::parse_poly(&text).map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Factored q-presentation (used by CLI output)
// ---------------------------------------------------------------------------

/// Writes a univariate-in-q polynomial as `c * q^a * (q - 1)^b * (rest)`,
/// e.g. `q^2*(q - 1)` — the standard display shape of all final classes.
pub fn display_factored_q(p: &MultiPoly) -> String {
    if p.is_zero() {
        return "0".to_string();
    }
    let q = MultiPoly::q();
    let qm1 = MultiPoly::q_minus_1();
    let mut rest = p.clone();
    let mut a = 0u32;
    while let Some(d) = rest.divide_exact(&q) {
        rest = d;
        a += 1;
    }
    let mut b = 0u32;
    while let Some(d) = rest.divide_exact(&qm1) {
        rest = d;
        b += 1;
    }
    let mut factors: Vec<String> = Vec::new();
    let c = rest.content().max(BigInt::one());
    let neg = rest.leading().map(|(_, lc)| lc.is_negative()) == Some(true);
    let unit = rest
        .divide_exact(&MultiPoly::constant(if neg { -c.clone() } else { c.clone() }))
        .unwrap_or_else(|| rest.clone());
    let mut sign = String::new();
    if neg {
        sign = "-".to_string();
    }
    if !c.is_one() || (unit.is_one() && a == 0 && b == 0) {
        factors.push(c.to_string());
    }
    match a {
        0 => {}
        1 => factors.push("q".to_string()),
        _ => factors.push(format!("q^{a}")),
    }
    match b {
        0 => {}
        1 => factors.push("(q - 1)".to_string()),
        _ => factors.push(format!("(q - 1)^{b}")),
    }
    if !unit.is_one() {
        if unit.num_terms() > 1 {
            factors.push(format!("({unit})"));
        } else {
            factors.push(format!("{unit}"));
        }
    }
    format!("{sign}{}", factors.join("*"))
}
