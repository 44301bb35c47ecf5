//! Polynomial ideals with lexicographic Gröbner bases, used to compare
//! conjugation-orbit closures of upper-triangular matrices.
//!
//! The central type is [`Ideal`]: a generator list together with an explicit
//! variable priority list that fixes the lexicographic monomial order.  Each
//! ideal lazily computes and caches its reduced lexicographic Gröbner basis,
//! which is unique for the given order and therefore usable as a canonical
//! form.  Membership ([`Ideal::contains_poly`]) and containment
//! ([`ideal_contains`]) are decided by normal-form computations against the
//! cached basis.
//!
//! [`closure_equations`] produces the vanishing ideal of the Zariski closure
//! of a conjugation orbit: for a unipotent representative `ξ` inside the group
//! of upper-triangular matrices with last diagonal entry 1, it introduces
//! matrix coordinates `y_ij`, writes the relations `y = g·ξ·g⁻¹` with the
//! group entries and one denominator-inversion variable as auxiliary unknowns,
//! and eliminates the auxiliaries with a block lexicographic order.
//!
//! Arithmetic is exact: the Buchberger loop runs over ℚ, and every stored
//! polynomial is rescaled to a primitive integer form (content removed,
//! positive leading coefficient) after each reduction, which both controls
//! coefficient growth and makes all outputs deterministic.  Hard budgets on
//! the basis size and the per-variable degree turn runaway computations into
//! [`Error::ResourceBudget`] instead of unbounded memory use.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use once_cell::sync::OnceCell;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::poly::{parse_poly, Monomial, MultiPoly, Var};
use crate::{Error, Result};

/// Hard cap on the number of basis elements kept by the Buchberger loop.
const MAX_BASIS_SIZE: usize = 5000;
/// Hard cap on the degree of any single variable in any basis element.
const MAX_VAR_DEGREE: u16 = 40;

// ---------------------------------------------------------------------------
// Internal dense-exponent polynomials under a fixed lexicographic order
// ---------------------------------------------------------------------------

/// Exponent vector indexed by position in the ideal's variable priority list.
/// Position 0 is the *largest* variable in the lexicographic order.
type Exps = Vec<u16>;

fn exp_total(a: &[u16]) -> u32 {
    a.iter().map(|&e| e as u32).sum()
}

fn exp_divides(a: &[u16], b: &[u16]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y)
}

fn exp_sub(a: &[u16], b: &[u16]) -> Exps {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn exp_add(a: &[u16], b: &[u16]) -> Exps {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn exp_lcm(a: &[u16], b: &[u16]) -> Exps {
    a.iter().zip(b).map(|(x, y)| *x.max(y)).collect()
}

/// Plain lexicographic comparison of two exponent vectors of equal length.
/// `Vec<u16>`'s derived `Ord` agrees with this, but we keep an explicit helper
/// for clarity at call sites.
fn lex_cmp(a: &[u16], b: &[u16]) -> Ordering {
    a.cmp(b)
}

/// Polynomial with rational coefficients and terms sorted in strictly
/// descending lexicographic order.
#[derive(Clone, Debug, PartialEq)]
struct GPoly {
    terms: Vec<(Exps, BigRational)>,
}

impl GPoly {
    fn zero() -> GPoly {
        GPoly { terms: Vec::new() }
    }

    fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    fn leading(&self) -> Option<(&Exps, &BigRational)> {
        self.terms.first().map(|(m, c)| (m, c))
    }

    fn is_constant(&self) -> bool {
        self.terms.len() == 1 && exp_total(&self.terms[0].0) == 0
    }

    /// `self + scale · x^shift · other`, merging the two sorted term lists.
    fn add_scaled_shifted(&self, other: &GPoly, shift: &[u16], scale: &BigRational) -> GPoly {
        let mut out: Vec<(Exps, BigRational)> =
            Vec::with_capacity(self.terms.len() + other.terms.len());
        let mut i = 0;
        let mut j = 0;
        while i < self.terms.len() || j < other.terms.len() {
            let pick_left = if i == self.terms.len() {
                false
            } else if j == other.terms.len() {
                true
            } else {
                let shifted = exp_add(&other.terms[j].0, shift);
                match lex_cmp(&self.terms[i].0, &shifted) {
                    Ordering::Greater => true,
                    Ordering::Less => false,
                    Ordering::Equal => {
                        let c = &self.terms[i].1 + &other.terms[j].1 * scale;
                        if !c.is_zero() {
                            out.push((shifted, c));
                        }
                        i += 1;
                        j += 1;
                        continue;
                    }
                }
            };
            if pick_left {
                out.push(self.terms[i].clone());
                i += 1;
            } else {
                let c = &other.terms[j].1 * scale;
                if !c.is_zero() {
                    out.push((exp_add(&other.terms[j].0, shift), c));
                }
                j += 1;
            }
        }
        GPoly { terms: out }
    }

    /// Rescale to a primitive integer polynomial with positive leading
    /// coefficient.  This is the "content removal after every reduction" step
    /// that keeps coefficient sizes under control.
    fn normalize_content(&mut self) {
        if self.terms.is_empty() {
            return;
        }
        let mut denom_lcm = BigInt::one();
        for (_, c) in &self.terms {
            denom_lcm = num_integer::lcm(denom_lcm, c.denom().clone());
        }
        let mut numer_gcd = BigInt::zero();
        for (_, c) in &self.terms {
            let scaled = c.numer() * (&denom_lcm / c.denom());
            numer_gcd = num_integer::gcd(numer_gcd, scaled);
        }
        if numer_gcd.is_zero() {
            numer_gcd = BigInt::one();
        }
        if self.terms[0].1.is_negative() {
            numer_gcd = -numer_gcd;
        }
        let factor = BigRational::new(denom_lcm, numer_gcd);
        for (_, c) in &mut self.terms {
            *c *= &factor;
        }
    }

    fn max_var_degree(&self) -> u16 {
        self.terms
            .iter()
            .flat_map(|(m, _)| m.iter().copied())
            .max()
            .unwrap_or(0)
    }
}

/// Full normal form of `f` against `basis`: every term of the result is
/// reducible by no leading monomial of `basis`.
fn normal_form_g(f: &GPoly, basis: &[&GPoly]) -> GPoly {
    let mut tail = f.clone();
    let mut out: Vec<(Exps, BigRational)> = Vec::new();
    'outer: while let Some((lm, lc)) = tail.leading() {
        let (lm, lc) = (lm.clone(), lc.clone());
        for b in basis {
            if let Some((bm, bc)) = b.leading() {
                if exp_divides(bm, &lm) {
                    let shift = exp_sub(&lm, bm);
                    let scale = -(&lc / bc);
                    tail = tail.add_scaled_shifted(b, &shift, &scale);
                    continue 'outer;
                }
            }
        }
        out.push((lm, lc));
        tail.terms.remove(0);
    }
    GPoly { terms: out }
}

/// S-polynomial of `f` and `g`, both assumed nonzero.
fn s_poly(f: &GPoly, g: &GPoly) -> GPoly {
    let (fm, fc) = f.leading().expect("s_poly of zero polynomial");
    let (gm, gc) = g.leading().expect("s_poly of zero polynomial");
    let l = exp_lcm(fm, gm);
    let left = GPoly::zero().add_scaled_shifted(f, &exp_sub(&l, fm), &fc.recip());
    left.add_scaled_shifted(g, &exp_sub(&l, gm), &(-gc.recip()))
}

fn check_budget(g: &GPoly, basis_len: usize) -> Result<()> {
    if basis_len > MAX_BASIS_SIZE {
        return Err(Error::ResourceBudget(format!(
            "Groebner basis exceeded {MAX_BASIS_SIZE} elements"
        )));
    }
    let d = g.max_var_degree();
    if d > MAX_VAR_DEGREE {
        return Err(Error::ResourceBudget(format!(
            "Groebner basis element reached degree {d} in a single variable (limit {MAX_VAR_DEGREE})"
        )));
    }
    Ok(())
}

fn pair_key(i: usize, j: usize) -> (usize, usize) {
    (i.min(j), i.max(j))
}

/// Buchberger's algorithm with the normal selection strategy (pairs popped in
/// increasing total degree, then lexicographic order, of their lcm), the
/// coprime-leading-monomial criterion, and the chain criterion.
fn buchberger(mut basis: Vec<GPoly>) -> Result<Vec<GPoly>> {
    basis.retain(|g| !g.is_zero());
    for g in &basis {
        check_budget(g, basis.len())?;
    }
    let mut heap: BinaryHeap<Reverse<(u32, Exps, usize, usize)>> = BinaryHeap::new();
    let push_pairs =
        |heap: &mut BinaryHeap<Reverse<(u32, Exps, usize, usize)>>, basis: &[GPoly], j: usize| {
            for i in 0..j {
                let l = exp_lcm(basis[i].leading().unwrap().0, basis[j].leading().unwrap().0);
                heap.push(Reverse((exp_total(&l), l, i, j)));
            }
        };
    for j in 0..basis.len() {
        push_pairs(&mut heap, &basis, j);
    }
    let mut done: HashSet<(usize, usize)> = HashSet::new();
    while let Some(Reverse((_, lcm, i, j))) = heap.pop() {
        done.insert(pair_key(i, j));
        let mi = basis[i].leading().unwrap().0;
        let mj = basis[j].leading().unwrap().0;
        // Coprime criterion: if the leading monomials share no variable the
        // S-polynomial reduces to zero.
        if exp_add(mi, mj) == lcm {
            continue;
        }
        // Chain criterion: skip if some other element divides the lcm and
        // both connecting pairs were already treated.
        let chain = (0..basis.len()).any(|k| {
            k != i
                && k != j
                && exp_divides(basis[k].leading().unwrap().0, &lcm)
                && done.contains(&pair_key(i, k))
                && done.contains(&pair_key(j, k))
        });
        if chain {
            continue;
        }
        let refs: Vec<&GPoly> = basis.iter().collect();
        let mut r = normal_form_g(&s_poly(&basis[i], &basis[j]), &refs);
        if r.is_zero() {
            continue;
        }
        r.normalize_content();
        check_budget(&r, basis.len() + 1)?;
        basis.push(r);
        push_pairs(&mut heap, &basis, basis.len() - 1);
    }
    Ok(basis)
}

/// Minimalize and tail-reduce a Gröbner basis, then normalize and sort it, so
/// the result is the unique reduced basis for the order (up to the primitive
/// positive integer scaling of each element).
fn reduce_basis(basis: Vec<GPoly>) -> Vec<GPoly> {
    if basis.iter().any(|g| g.is_constant()) {
        let one = GPoly {
            terms: vec![(
                basis[0].terms[0].0.iter().map(|_| 0).collect(),
                BigRational::one(),
            )],
        };
        return vec![one];
    }
    // Minimal basis: drop any element whose leading monomial is divisible by
    // the leading monomial of another kept element.  Scanning in increasing
    // leading-monomial order guarantees divisors are kept before multiples.
    let mut order: Vec<usize> = (0..basis.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(basis[a].leading().unwrap().0, basis[b].leading().unwrap().0));
    let mut kept: Vec<usize> = Vec::new();
    for idx in order {
        let lm = basis[idx].leading().unwrap().0;
        if !kept
            .iter()
            .any(|&k| exp_divides(basis[k].leading().unwrap().0, lm))
        {
            kept.push(idx);
        }
    }
    // Tail reduction: leading monomials are pairwise non-divisible now, so a
    // single pass of full normal forms against the other elements suffices.
    let minimal: Vec<GPoly> = kept.iter().map(|&k| basis[k].clone()).collect();
    let mut reduced: Vec<GPoly> = Vec::with_capacity(minimal.len());
    for (pos, g) in minimal.iter().enumerate() {
        let others: Vec<&GPoly> = minimal
            .iter()
            .enumerate()
            .filter(|(p, _)| *p != pos)
            .map(|(_, h)| h)
            .collect();
        let mut r = normal_form_g(g, &others);
        r.normalize_content();
        reduced.push(r);
    }
    reduced.sort_by(|a, b| lex_cmp(a.leading().unwrap().0, b.leading().unwrap().0));
    reduced
}

// ---------------------------------------------------------------------------
// Conversions between MultiPoly and the dense internal representation
// ---------------------------------------------------------------------------

fn to_gpoly(p: &MultiPoly, index: &HashMap<Var, usize>, nvars: usize) -> Result<GPoly> {
    let mut terms: Vec<(Exps, BigRational)> = Vec::with_capacity(p.num_terms());
    for (m, c) in p.terms() {
        let mut exps = vec![0u16; nvars];
        for (v, e) in m.iter() {
            let pos = *index.get(&v).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "polynomial mentions variable `{}` outside the ideal's variable list",
                    v.name()
                ))
            })?;
            if e > MAX_VAR_DEGREE as u32 {
                return Err(Error::ResourceBudget(format!(
                    "input degree {e} in variable `{}` exceeds limit {MAX_VAR_DEGREE}",
                    v.name()
                )));
            }
            exps[pos] = e as u16;
        }
        terms.push((exps, BigRational::from(c.clone())));
    }
    terms.sort_by(|a, b| lex_cmp(&b.0, &a.0));
    Ok(GPoly { terms })
}

fn from_gpoly(g: &GPoly, vars: &[Var]) -> MultiPoly {
    let terms = g.terms.iter().map(|(exps, c)| {
        debug_assert!(c.is_integer(), "normalized basis coefficient not integral");
        let m = Monomial::from_pairs(
            exps.iter()
                .enumerate()
                .filter(|(_, e)| **e > 0)
                .map(|(i, e)| (vars[i], *e as u32)),
        );
        (m, c.numer().clone())
    });
    MultiPoly::from_terms(terms)
}

fn compute_groebner(vars: &[Var], generators: &[MultiPoly]) -> Result<Vec<MultiPoly>> {
    let index: HashMap<Var, usize> = vars.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let mut gens = Vec::with_capacity(generators.len());
    for p in generators {
        let mut g = to_gpoly(p, &index, vars.len())?;
        g.normalize_content();
        gens.push(g);
    }
    let basis = reduce_basis(buchberger(gens)?);
    Ok(basis.iter().map(|g| from_gpoly(g, vars)).collect())
}

// ---------------------------------------------------------------------------
// Public ideal type
// ---------------------------------------------------------------------------

/// A polynomial ideal in ℤ[vars] with a fixed lexicographic monomial order.
///
/// `vars` is the explicit priority list: the first variable is the largest in
/// the order.  The reduced lexicographic Gröbner basis is computed on first
/// use and cached; it is deterministic, so equal ideals under equal orders
/// always produce identical bases.
#[derive(Clone, Debug)]
pub struct Ideal {
    vars: Vec<Var>,
    generators: Vec<MultiPoly>,
    basis: OnceCell<Vec<MultiPoly>>,
}

impl PartialEq for Ideal {
    fn eq(&self, other: &Self) -> bool {
        self.vars == other.vars && self.generators == other.generators
    }
}

impl Eq for Ideal {}

impl Ideal {
    /// Create an ideal from a variable priority list and generators.
    ///
    /// The variable list must be duplicate-free and cover every variable
    /// mentioned by a generator.  Generators are normalized (zero polynomials
    /// dropped, content removed, positive leading coefficient, exact
    /// duplicates removed) but their order is preserved.
    pub fn new(vars: Vec<Var>, generators: Vec<MultiPoly>) -> Result<Ideal> {
        let mut seen = HashSet::new();
        for v in &vars {
            if !seen.insert(*v) {
                return Err(Error::InvalidInput(format!(
                    "duplicate variable `{}` in ideal variable list",
                    v.name()
                )));
            }
        }
        let mut gens: Vec<MultiPoly> = Vec::with_capacity(generators.len());
        for p in generators {
            for v in p.vars() {
                if !seen.contains(&v) {
                    return Err(Error::InvalidInput(format!(
                        "generator mentions variable `{}` outside the ideal's variable list",
                        v.name()
                    )));
                }
            }
            if p.is_zero() {
                continue;
            }
            let p = p.canonical_scaled();
            if !gens.contains(&p) {
                gens.push(p);
            }
        }
        Ok(Ideal {
            vars,
            generators: gens,
            basis: OnceCell::new(),
        })
    }

    /// The variable priority list (largest variable first).
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// The normalized generator list.
    pub fn generators(&self) -> &[MultiPoly] {
        &self.generators
    }

    /// The reduced lexicographic Gröbner basis, computed on first use and
    /// cached.  Elements are primitive integer polynomials with positive
    /// leading coefficients, listed in increasing leading-monomial order.
    pub fn groebner(&self) -> Result<&[MultiPoly]> {
        self.basis
            .get_or_try_init(|| compute_groebner(&self.vars, &self.generators))
            .map(Vec::as_slice)
    }

    /// Full normal form of `f` against the reduced basis, rescaled to a
    /// primitive integer polynomial (so it is canonical up to the positive
    /// rational factor lost in rescaling).  Zero exactly when `f` lies in the
    /// ideal.
    pub fn normal_form(&self, f: &MultiPoly) -> Result<MultiPoly> {
        let index: HashMap<Var, usize> =
            self.vars.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        let fg = to_gpoly(f, &index, self.vars.len())?;
        let basis: Vec<GPoly> = self
            .groebner()?
            .iter()
            .map(|p| to_gpoly(p, &index, self.vars.len()))
            .collect::<Result<_>>()?;
        let refs: Vec<&GPoly> = basis.iter().collect();
        let mut r = normal_form_g(&fg, &refs);
        r.normalize_content();
        Ok(from_gpoly(&r, &self.vars))
    }

    /// Whether `f` lies in the ideal.
    pub fn contains_poly(&self, f: &MultiPoly) -> Result<bool> {
        Ok(self.normal_form(f)?.is_zero())
    }

    /// Whether this ideal contains `other` (every generator of `other` has
    /// zero normal form here).  Requires `other`'s variables to be a subset
    /// of this ideal's variables.
    pub fn contains(&self, other: &Ideal) -> Result<bool> {
        for g in &other.generators {
            if !self.contains_poly(g)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

impl fmt::Display for Ideal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<")?;
        for (i, g) in self.generators.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{g}")?;
        }
        write!(f, ">")
    }
}

/// Whether `i ⊇ j` as ideals (equivalently, the variety of `i` is contained
/// in the variety of `j`).
pub fn ideal_contains(i: &Ideal, j: &Ideal) -> Result<bool> {
    i.contains(j)
}

#[derive(Serialize, Deserialize)]
struct IdealRepr {
    vars: Vec<String>,
    generators: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    groebner_basis: Option<Vec<String>>,
}

impl Serialize for Ideal {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = IdealRepr {
            vars: self.vars.iter().map(|v| v.name()).collect(),
            generators: self.generators.iter().map(|g| g.to_string()).collect(),
            groebner_basis: self
                .basis
                .get()
                .map(|b| b.iter().map(|g| g.to_string()).collect()),
        };
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Ideal {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = IdealRepr::deserialize(deserializer)?;
        let vars = repr.vars.iter().map(|n| Var::intern(n)).collect();
        let gens = repr
            .generators
            .iter()
            .map(|s| parse_poly(s))
            .collect::<Result<Vec<_>>>()
            .map_err(D::Error::custom)?;
        let ideal = Ideal::new(vars, gens).map_err(D::Error::custom)?;
        if let Some(basis) = repr.groebner_basis {
            let basis = basis
                .iter()
                .map(|s| parse_poly(s))
                .collect::<Result<Vec<_>>>()
                .map_err(D::Error::custom)?;
            let _ = ideal.basis.set(basis);
        }
        Ok(ideal)
    }
}

// ---------------------------------------------------------------------------
// Orbit-closure equations
// ---------------------------------------------------------------------------

/// Name of the matrix coordinate `y_ij` (1-based indices).
pub fn matrix_coord(i: usize, j: usize) -> Var {
    Var::intern(&format!("y_{i}_{j}"))
}

/// The matrix coordinates of the group of upper-triangular `n×n` matrices
/// with last diagonal entry fixed to 1: `y_ii` for `i < n` and `y_ij` for
/// `i < j`, in row-major order.
pub fn matrix_coords(n: usize) -> Vec<Var> {
    let mut vars = Vec::new();
    for i in 1..=n {
        for j in i..=n {
            if i == j && i == n {
                continue;
            }
            vars.push(matrix_coord(i, j));
        }
    }
    vars
}

/// Vanishing ideal of the Zariski closure of the conjugation orbit of `xi`
/// under the group of invertible upper-triangular matrices with last diagonal
/// entry 1 (conjugating by the full invertible upper-triangular group gives
/// the same orbit, since scalars act trivially).
///
/// `xi` is an `n×n` upper unitriangular integer matrix given in row-major
/// order.  The result lives in the matrix coordinates of [`matrix_coords`];
/// its generators are the reduced Gröbner basis of the elimination ideal and
/// are cached as such.
///
/// The construction adjoins auxiliary variables for the conjugating matrix
/// (diagonal entries `d_i`, strictly-upper entries `u_ij`) plus a single
/// variable `t` with `t·d_1⋯d_{n-1} = 1`, which both clears the denominators
/// of the triangular inverse and records that the diagonal entries are units.
/// A block lexicographic order with the auxiliaries ranked above the matrix
/// coordinates then eliminates them; the returned generators are exactly the
/// basis elements lying in ℤ[y].
pub fn closure_equations(n: usize, xi: &[Vec<i64>]) -> Result<Ideal> {
    if n == 0 {
        return Err(Error::InvalidInput("matrix size must be positive".into()));
    }
    if xi.len() != n || xi.iter().any(|row| row.len() != n) {
        return Err(Error::InvalidInput(format!(
            "representative must be a {n}x{n} matrix"
        )));
    }
    for i in 0..n {
        for j in 0..n {
            if i == j && xi[i][j] != 1 {
                return Err(Error::InvalidInput(
                    "representative must be unipotent (unit diagonal)".into(),
                ));
            }
            if i > j && xi[i][j] != 0 {
                return Err(Error::InvalidInput(
                    "representative must be upper triangular".into(),
                ));
            }
        }
    }

    // Variable priority: inversion marker, then the conjugating matrix's
    // diagonal and strictly-upper entries (the block to eliminate), then the
    // matrix coordinates.
    let t = Var::intern("t");
    let diag: Vec<Var> = (1..n).map(|i| Var::intern(&format!("d_{i}"))).collect();
    let mut upper: Vec<Var> = Vec::new();
    for i in 1..=n {
        for j in (i + 1)..=n {
            upper.push(Var::intern(&format!("u_{i}_{j}")));
        }
    }
    let y_vars = matrix_coords(n);
    let mut all_vars = vec![t];
    all_vars.extend_from_slice(&diag);
    all_vars.extend_from_slice(&upper);
    all_vars.extend_from_slice(&y_vars);

    // g: generic group element; entries indexed 0-based.
    let mut g = vec![vec![MultiPoly::zero(); n]; n];
    let mut upper_iter = upper.iter();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                g[i][j] = if i == n - 1 {
                    MultiPoly::one()
                } else {
                    MultiPoly::var(diag[i])
                };
            } else if i < j {
                g[i][j] = MultiPoly::var(*upper_iter.next().expect("upper entry"));
            }
        }
    }

    // det = d_1⋯d_{n-1}; m = det·g⁻¹, computed by back substitution.  All
    // the divisions below are exact in the polynomial ring.
    let det = diag
        .iter()
        .fold(MultiPoly::one(), |acc, v| acc.mul(&MultiPoly::var(*v)));
    let mut m = vec![vec![MultiPoly::zero(); n]; n];
    for j in (0..n).rev() {
        m[j][j] = det
            .divide_exact(&g[j][j])
            .ok_or_else(|| Error::Internal("triangular inverse: diagonal division failed".into()))?;
        for i in (0..j).rev() {
            let mut s = MultiPoly::zero();
            for k in (i + 1)..=j {
                s = s.add(&g[i][k].mul(&m[k][j]));
            }
            m[i][j] = s
                .neg()
                .divide_exact(&g[i][i])
                .ok_or_else(|| Error::Internal("triangular inverse: division failed".into()))?;
        }
    }

    // p = g·xi·m, so that g·xi·g⁻¹ = t·p on the locus t·det = 1.
    let xi_poly: Vec<Vec<MultiPoly>> = xi
        .iter()
        .map(|row| row.iter().map(|&e| MultiPoly::constant(e)).collect())
        .collect();
    let mut gxi = vec![vec![MultiPoly::zero(); n]; n];
    for i in 0..n {
        for j in i..n {
            let mut s = MultiPoly::zero();
            for k in i..=j {
                s = s.add(&g[i][k].mul(&xi_poly[k][j]));
            }
            gxi[i][j] = s;
        }
    }
    let mut p = vec![vec![MultiPoly::zero(); n]; n];
    for i in 0..n {
        for j in i..n {
            let mut s = MultiPoly::zero();
            for k in i..=j {
                s = s.add(&gxi[i][k].mul(&m[k][j]));
            }
            p[i][j] = s;
        }
    }

    let mut relations = Vec::new();
    relations.push(MultiPoly::var(t).mul(&det).sub(&MultiPoly::one()));
    for i in 0..n {
        for j in i..n {
            if i == j {
                // Conjugation by triangular matrices preserves the diagonal,
                // so the diagonal relations simplify to y_ii = 1.
                debug_assert_eq!(p[i][j], det);
                if i < n - 1 {
                    relations
                        .push(MultiPoly::var(matrix_coord(i + 1, j + 1)).sub(&MultiPoly::one()));
                }
            } else {
                let y = MultiPoly::var(matrix_coord(i + 1, j + 1));
                relations.push(y.sub(&MultiPoly::var(t).mul(&p[i][j])));
            }
        }
    }

    let full = Ideal::new(all_vars, relations)?;
    let basis = full.groebner()?;
    let y_set: HashSet<Var> = y_vars.iter().copied().collect();
    let eliminated: Vec<MultiPoly> = basis
        .iter()
        .filter(|p| p.vars().iter().all(|v| y_set.contains(v)))
        .cloned()
        .collect();
    let ideal = Ideal::new(y_vars, eliminated.clone())?;
    // The y-block of a reduced basis under a block order is itself a reduced
    // basis of the elimination ideal, so it can be cached directly.
    let _ = ideal.basis.set(eliminated);
    Ok(ideal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(name: &str) -> Var {
        Var::intern(name)
    }

    fn p(s: &str) -> MultiPoly {
        parse_poly(s).unwrap()
    }

    fn ideal(vars: &[&str], gens: &[&str]) -> Ideal {
        Ideal::new(
            vars.iter().map(|n| v(n)).collect(),
            gens.iter().map(|s| p(s)).collect(),
        )
        .unwrap()
    }

    fn basis_strings(i: &Ideal) -> Vec<String> {
        i.groebner()
            .unwrap()
            .iter()
            .map(|g| g.to_string())
            .collect()
    }

    #[test]
    fn already_reduced_basis_is_unchanged() {
        let i = ideal(&["x", "y"], &["x - y", "y^2"]);
        assert_eq!(basis_strings(&i), vec!["y^2", "x - y"]);
    }

    #[test]
    fn unit_ideal_collapses_to_one() {
        let i = ideal(&["x", "y"], &["x*y - 1", "x^2"]);
        assert_eq!(basis_strings(&i), vec!["1"]);
    }

    #[test]
    fn zero_and_empty_ideals() {
        let i = ideal(&["x"], &[]);
        assert!(i.groebner().unwrap().is_empty());
        let z = Ideal::new(vec![v("x")], vec![MultiPoly::zero()]).unwrap();
        assert!(z.groebner().unwrap().is_empty());
        assert!(!z.contains_poly(&p("x")).unwrap());
        assert!(z.contains_poly(&MultiPoly::zero()).unwrap());
    }

    #[test]
    fn lex_elimination_of_leading_block() {
        // <x - y^2, x - z> with x largest: the basis must expose y^2 - z.
        let i = ideal(&["x", "y", "z"], &["x - y^2", "x - z"]);
        let b = basis_strings(&i);
        assert!(b.contains(&"y^2 - z".to_string()), "basis {b:?}");
        assert!(i.contains_poly(&p("y^2 - z")).unwrap());
    }

    #[test]
    fn reduced_basis_is_independent_of_generator_order() {
        // Both generator orders give the identical cached reduced basis.
        let a = ideal(&["x", "y"], &["x^2 + y^2 - 1", "x*y - 1"]);
        let b = ideal(&["x", "y"], &["x*y - 1", "x^2 + y^2 - 1"]);
        assert_eq!(basis_strings(&a), basis_strings(&b));
    }

    #[test]
    fn normal_form_detects_membership() {
        let i = ideal(&["x", "y"], &["x^2 - y", "y^3"]);
        assert!(i.contains_poly(&p("x^6")).unwrap());
        assert!(i.contains_poly(&p("x^2*y^2 - y^3")).unwrap());
        assert!(!i.contains_poly(&p("x^4")).unwrap());
        assert_eq!(i.normal_form(&p("x^4")).unwrap(), p("y^2"));
    }

    #[test]
    fn containment_examples_and_partial_order() {
        let principal_x = ideal(&["x", "y"], &["x"]);
        let x_squared = ideal(&["x", "y"], &["x^2"]);
        let principal_y = ideal(&["x", "y"], &["y"]);
        assert!(ideal_contains(&principal_x, &x_squared).unwrap());
        assert!(!ideal_contains(&x_squared, &principal_x).unwrap());
        assert!(!ideal_contains(&principal_x, &principal_y).unwrap());
        // Reflexive, and antisymmetric on distinct ideals.
        assert!(ideal_contains(&principal_x, &principal_x).unwrap());
        let both = [&principal_x, &x_squared];
        for a in both {
            for b in both {
                if ideal_contains(a, b).unwrap() && ideal_contains(b, a).unwrap() {
                    assert_eq!(basis_strings(a), basis_strings(b));
                }
            }
        }
    }

    #[test]
    fn cached_basis_matches_recompute() {
        let a = ideal(&["x", "y", "z"], &["x*z - y^2", "x^3 - z^2"]);
        let first = basis_strings(&a);
        // Second call uses the cache.
        assert_eq!(basis_strings(&a), first);
        // A fresh ideal recomputes from scratch and must agree.
        let b = ideal(&["x", "y", "z"], &["x*z - y^2", "x^3 - z^2"]);
        assert_eq!(basis_strings(&b), first);
    }

    #[test]
    fn all_s_polynomials_reduce_to_zero() {
        for (vars, gens) in [
            (
                vec!["x", "y", "z"],
                vec!["x*z - y^2", "x^3 - z^2", "x*y - 1"],
            ),
            (vec!["x", "y"], vec!["x^2 + y^2 - 1", "x*y - 2"]),
            (vec!["x", "y", "z"], vec!["x + y + z", "x*y + y*z + z*x", "x*y*z - 1"]),
        ] {
            let i = ideal(&vars.iter().map(|s| *s).collect::<Vec<_>>(), &gens);
            let vars: Vec<Var> = i.vars().to_vec();
            let index: HashMap<Var, usize> =
                vars.iter().enumerate().map(|(k, v)| (*v, k)).collect();
            let basis: Vec<GPoly> = i
                .groebner()
                .unwrap()
                .iter()
                .map(|p| to_gpoly(p, &index, vars.len()).unwrap())
                .collect();
            let refs: Vec<&GPoly> = basis.iter().collect();
            for a in 0..basis.len() {
                for b in (a + 1)..basis.len() {
                    let s = s_poly(&basis[a], &basis[b]);
                    assert!(
                        normal_form_g(&s, &refs).is_zero(),
                        "S-polynomial of elements {a},{b} did not reduce to zero"
                    );
                }
            }
        }
    }

    #[test]
    fn degree_budget_is_enforced() {
        let i = ideal(&["x"], &["x^41 - 1"]);
        match i.groebner() {
            Err(Error::ResourceBudget(_)) => {}
            other => panic!("expected resource budget error, got {other:?}"),
        }
    }

    #[test]
    fn serde_roundtrip_preserves_cached_basis() {
        let i = ideal(&["x", "y"], &["x^2 - y", "y^3"]);
        i.groebner().unwrap();
        let json = serde_json::to_string(&i).unwrap();
        assert!(json.contains("groebner_basis"));
        let back: Ideal = serde_json::from_str(&json).unwrap();
        assert_eq!(back, i);
        assert_eq!(basis_strings(&back), basis_strings(&i));
        // Without a computed basis the field is omitted.
        let fresh = ideal(&["x", "y"], &["x^2 - y", "y^3"]);
        let json = serde_json::to_string(&fresh).unwrap();
        assert!(!json.contains("groebner_basis"));
    }

    #[test]
    fn invalid_ideals_are_rejected() {
        assert!(Ideal::new(vec![v("x"), v("x")], vec![]).is_err());
        assert!(Ideal::new(vec![v("x")], vec![p("x + y")]).is_err());
    }

    // -- closure equations --------------------------------------------------

    fn unitriangular(n: usize, ones: &[(usize, usize)]) -> Vec<Vec<i64>> {
        let mut m = vec![vec![0i64; n]; n];
        for i in 0..n {
            m[i][i] = 1;
        }
        for &(i, j) in ones {
            m[i - 1][j - 1] = 1;
        }
        m
    }

    #[test]
    fn identity_orbit_is_a_single_point() {
        let i = closure_equations(2, &unitriangular(2, &[])).unwrap();
        assert_eq!(
            basis_strings(&i),
            vec!["y_1_2".to_string(), "y_1_1 - 1".to_string()]
        );
    }

    #[test]
    fn regular_orbit_closure_is_a_line() {
        let i = closure_equations(2, &unitriangular(2, &[(1, 2)])).unwrap();
        assert_eq!(basis_strings(&i), vec!["y_1_1 - 1".to_string()]);
    }

    #[test]
    fn point_closure_contains_line_closure_ideal() {
        let point = closure_equations(2, &unitriangular(2, &[])).unwrap();
        let line = closure_equations(2, &unitriangular(2, &[(1, 2)])).unwrap();
        assert!(ideal_contains(&point, &line).unwrap());
        assert!(!ideal_contains(&line, &point).unwrap());
    }

    /// Deterministically generated pseudo-random sequence for sampling tests.
    struct Lcg(u64);
    impl Lcg {
        fn next(&mut self) -> u64 {
            self.0 = self
                .0
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            self.0 >> 33
        }
        fn pick<T: Copy>(&mut self, choices: &[T]) -> T {
            choices[(self.next() as usize) % choices.len()]
        }
    }

    /// Evaluate an integer polynomial at rational values of its variables.
    fn eval_rational(p: &MultiPoly, vals: &HashMap<Var, BigRational>) -> BigRational {
        let mut acc = BigRational::zero();
        for (m, c) in p.terms() {
            let mut term = BigRational::from(c.clone());
            for (var, e) in m.iter() {
                let base = vals.get(&var).expect("value for variable");
                for _ in 0..e {
                    term *= base;
                }
            }
            acc += term;
        }
        acc
    }

    /// Conjugate `xi` by a random upper-triangular matrix with the given
    /// diagonal choices, returning the matrix entries as rationals.
    fn random_conjugate(
        n: usize,
        xi: &[Vec<i64>],
        rng: &mut Lcg,
        diag_choices: &[i64],
    ) -> Vec<Vec<BigRational>> {
        let rat = |x: i64| BigRational::from(BigInt::from(x));
        let mut g = vec![vec![BigRational::zero(); n]; n];
        for i in 0..n {
            g[i][i] = if i == n - 1 {
                BigRational::one()
            } else {
                rat(rng.pick(diag_choices))
            };
            for j in (i + 1)..n {
                g[i][j] = rat(rng.pick(&[-2, -1, 0, 1, 2]));
            }
        }
        // Invert by back substitution.
        let mut inv = vec![vec![BigRational::zero(); n]; n];
        for j in (0..n).rev() {
            inv[j][j] = g[j][j].recip();
            for i in (0..j).rev() {
                let mut s = BigRational::zero();
                for k in (i + 1)..=j {
                    s += &g[i][k] * &inv[k][j];
                }
                inv[i][j] = -(s / &g[i][i]);
            }
        }
        let mut out = vec![vec![BigRational::zero(); n]; n];
        for i in 0..n {
            for j in i..n {
                let mut s = BigRational::zero();
                for k in i..=j {
                    for l in k..=j {
                        s += &g[i][k] * &inv[l][j] * rat(xi[k][l]);
                    }
                }
                out[i][j] = s;
            }
        }
        out
    }

    fn assert_orbit_points_vanish(n: usize, xi: &[Vec<i64>], samples: usize, seed: u64) {
        let ideal = closure_equations(n, xi).unwrap();
        let mut rng = Lcg(seed);
        for _ in 0..samples {
            let conj = random_conjugate(n, xi, &mut rng, &[-2, -1, 1, 2]);
            let mut vals = HashMap::new();
            for i in 1..=n {
                for j in i..=n {
                    if i == j && i == n {
                        continue;
                    }
                    vals.insert(matrix_coord(i, j), conj[i - 1][j - 1].clone());
                }
            }
            for g in ideal.generators() {
                assert!(
                    eval_rational(g, &vals).is_zero(),
                    "orbit point fails closure equation {g} for xi={xi:?}"
                );
            }
        }
    }

    #[test]
    fn orbit_points_satisfy_closure_equations_n2() {
        assert_orbit_points_vanish(2, &unitriangular(2, &[]), 25, 7);
        assert_orbit_points_vanish(2, &unitriangular(2, &[(1, 2)]), 25, 11);
    }

    #[test]
    fn orbit_points_satisfy_closure_equations_n3() {
        for (ones, seed) in [
            (vec![], 1u64),
            (vec![(1, 2)], 2),
            (vec![(2, 3)], 3),
            (vec![(1, 3)], 4),
            (vec![(1, 2), (2, 3)], 5),
        ] {
            assert_orbit_points_vanish(3, &unitriangular(3, &ones), 50, seed);
        }
    }

    #[test]
    fn superdiagonal_orbit_membership_sampling_n3() {
        // 20 random conjugates of I + E_12 over integer group elements with
        // unit diagonal must satisfy every closure equation exactly.
        let xi = unitriangular(3, &[(1, 2)]);
        let ideal = closure_equations(3, &xi).unwrap();
        let mut rng = Lcg(99);
        for _ in 0..20 {
            let conj = random_conjugate(3, &xi, &mut rng, &[-1, 1]);
            let mut vals = HashMap::new();
            for i in 1..=3 {
                for j in i..=3 {
                    if i == j && i == 3 {
                        continue;
                    }
                    assert!(conj[i - 1][j - 1].is_integer());
                    vals.insert(matrix_coord(i, j), conj[i - 1][j - 1].clone());
                }
            }
            for g in ideal.generators() {
                assert!(eval_rational(g, &vals).is_zero());
            }
        }
    }

    #[test]
    fn closure_equations_distinguish_n3_orbits() {
        // Orbit closures in the n = 3 unipotent cone: the regular orbit
        // (superdiagonal ones) has the largest closure; I + E_13 is in it;
        // the identity is in everything.
        let id = closure_equations(3, &unitriangular(3, &[])).unwrap();
        let e12 = closure_equations(3, &unitriangular(3, &[(1, 2)])).unwrap();
        let e13 = closure_equations(3, &unitriangular(3, &[(1, 3)])).unwrap();
        let reg = closure_equations(3, &unitriangular(3, &[(1, 2), (2, 3)])).unwrap();
        // Ideal containment is the reverse of closure containment.
        assert!(ideal_contains(&id, &e13).unwrap());
        assert!(ideal_contains(&e13, &reg).unwrap());
        assert!(ideal_contains(&id, &reg).unwrap());
        assert!(!ideal_contains(&reg, &id).unwrap());
        // E_12 and E_13 orbits are incomparable to each other?  No: the
        // closure of the E_12 orbit contains E_13's orbit (rank-one matrices
        // degenerate within the same Jordan type); verify via ideals.
        assert!(ideal_contains(&e13, &e12).unwrap());
        assert!(!ideal_contains(&e12, &e13).unwrap());
    }

    #[test]
    fn closure_ideal_separates_inside_and_outside_points() {
        // The E_12 orbit closure for n = 3 is {I + a·E_12 + b·E_13}: its
        // ideal must vanish on xi itself and must not vanish on the regular
        // element, which has a nonzero (2,3) entry.
        let xi = unitriangular(3, &[(1, 2)]);
        let ideal = closure_equations(3, &xi).unwrap();
        let rat = |x: i64| BigRational::from(BigInt::from(x));
        let mut on_xi = HashMap::new();
        let mut on_reg = HashMap::new();
        for i in 1..=3usize {
            for j in i..=3usize {
                if i == j && i == 3 {
                    continue;
                }
                let e = if i == j { 1 } else { i64::from(i == 1 && j == 2) };
                on_xi.insert(matrix_coord(i, j), rat(e));
                let e_reg = if i == j { 1 } else { i64::from(j == i + 1) };
                on_reg.insert(matrix_coord(i, j), rat(e_reg));
            }
        }
        assert!(ideal
            .generators()
            .iter()
            .all(|g| eval_rational(g, &on_xi).is_zero()));
        // The regular element I + E_12 + E_23 lies outside the E_12 closure.
        assert!(ideal
            .generators()
            .iter()
            .any(|g| !eval_rational(g, &on_reg).is_zero()));
    }

    #[test]
    fn closure_equation_budgets_do_not_fire_for_small_n() {
        for n in 1..=3 {
            let xi = unitriangular(n, &[]);
            assert!(closure_equations(n, &xi).is_ok());
        }
    }

    #[test]
    fn invalid_representatives_are_rejected() {
        assert!(closure_equations(0, &[]).is_err());
        assert!(closure_equations(2, &[vec![1, 0]]).is_err());
        let bad_diag = vec![vec![2, 0], vec![0, 1]];
        assert!(closure_equations(2, &bad_diag).is_err());
        let not_upper = vec![vec![1, 0], vec![1, 1]];
        assert!(closure_equations(2, &not_upper).is_err());
    }
}
