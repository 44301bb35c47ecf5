//! Brute-force finite-group oracles over the fields with at most 9 elements.
//!
//! Everything here is deliberately naive and independent of the symbolic
//! engines: group elements are enumerated explicitly, conjugacy classes are
//! computed by orbit search, and representation-variety point counts are
//! obtained by exhaustive convolution over the group. These counts are the
//! ground truth that the symbolic pipelines are tested against.

use crate::poly::{MultiPoly, Var};
use crate::{Error, Result};
use num_bigint::BigInt;
use num_integer::Integer;
use once_cell::sync::OnceCell;
use smallvec::SmallVec;
use std::collections::HashMap;

// ---------------------------------------------------------------------------
// Finite fields F_q, q ∈ {2,3,4,5,7,8,9}
// ---------------------------------------------------------------------------

/// A small finite field with fully tabulated arithmetic.
///
/// Prime-power fields are built from fixed irreducible polynomials:
/// `F_4 = F_2[x]/(x²+x+1)`, `F_8 = F_2[x]/(x³+x+1)`, `F_9 = F_3[x]/(x²+1)`.
/// Elements are encoded as base-p digit vectors of the residue polynomial,
/// so `0` and `1` are always the additive and multiplicative identities and
/// integer constants reduce into the prime subfield. The field axioms are
/// verified exhaustively at construction.
#[derive(Clone, Debug)]
pub struct FiniteField {
    pub q0: u8,
    p: u8,
    add_t: Vec<u8>,
    mul_t: Vec<u8>,
    neg_t: Vec<u8>,
    inv_t: Vec<u8>,
}

/// (p, k, non-leading coefficients of the degree-k irreducible modulus)
fn field_shape(q0: u8) -> Option<(u8, u32, Vec<u8>)> {
    match q0 {
        2 | 3 | 5 | 7 => Some((q0, 1, vec![])),
        4 => Some((2, 2, vec![1, 1])), // x² + x + 1
        8 => Some((2, 3, vec![1, 1, 0])), // x³ + x + 1
        9 => Some((3, 2, vec![1, 0])), // x² + 1
        _ => None,
    }
}

impl FiniteField {
    pub fn new(q0: u8) -> Result<FiniteField> {
        let (p, k, modulus) = field_shape(q0).ok_or_else(|| {
            Error::InvalidInput(format!(
                "unsupported field size {q0}; supported: 2,3,4,5,7,8,9"
            ))
        })?;
        let q = q0 as usize;
        let digits = |mut x: usize| -> Vec<u8> {
            let mut d = vec![0u8; k as usize];
            for e in d.iter_mut() {
                *e = (x % p as usize) as u8;
                x /= p as usize;
            }
            d
        };
        let undigits =
            |d: &[u8]| -> usize { d.iter().rev().fold(0usize, |acc, &c| acc * p as usize + c as usize) };
        let mut add_t = vec![0u8; q * q];
        let mut mul_t = vec![0u8; q * q];
        let mut neg_t = vec![0u8; q];
        for a in 0..q {
            let da = digits(a);
            let dn: Vec<u8> = da.iter().map(|&c| (p - c) % p).collect();
            neg_t[a] = undigits(&dn) as u8;
            for b in 0..q {
                let db = digits(b);
                let ds: Vec<u8> = da.iter().zip(&db).map(|(&x, &y)| (x + y) % p).collect();
                add_t[a * q + b] = undigits(&ds) as u8;
                // Polynomial product followed by reduction mod the modulus.
                let mut prod = vec![0u8; 2 * k as usize - 1];
                for (i, &x) in da.iter().enumerate() {
                    for (j, &y) in db.iter().enumerate() {
                        prod[i + j] = (prod[i + j] + x * y) % p;
                    }
                }
                for top in (k as usize..prod.len()).rev() {
                    let c = prod[top];
                    if c != 0 {
                        prod[top] = 0;
                        // x^k ≡ −(modulus tail)
                        for (off, &m) in modulus.iter().enumerate() {
                            let idx = top - k as usize + off;
                            prod[idx] = (prod[idx] + (p - m % p) * c) % p;
                        }
                    }
                }
                mul_t[a * q + b] = undigits(&prod[..k as usize]) as u8;
            }
        }
        let mut inv_t = vec![0u8; q];
        for a in 1..q {
            let mut found = None;
            for b in 1..q {
                if mul_t[a * q + b] == 1 {
                    found = Some(b as u8);
                    break;
                }
            }
            inv_t[a] = found.ok_or_else(|| {
                Error::Internal(format!("no multiplicative inverse for {a} in F_{q0}"))
            })?;
        }
        let f = FiniteField {
            q0,
            p,
            add_t,
            mul_t,
            neg_t,
            inv_t,
        };
        f.verify_axioms()?;
        Ok(f)
    }

    /// Exhaustive field-axiom verification (runs once per construction).
    fn verify_axioms(&self) -> Result<()> {
        let q = self.q0 as usize;
        let check = |ok: bool, what: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Internal(format!("field axiom failed in F_{q}: {what}")))
            }
        };
        for a in 0..q as u8 {
            check(self.add(a, 0) == a, "additive identity")?;
            check(self.mul(a, 1) == a, "multiplicative identity")?;
            check(self.add(a, self.neg(a)) == 0, "additive inverse")?;
            if a != 0 {
                check(self.mul(a, self.inv(a)) == 1, "multiplicative inverse")?;
            }
            for b in 0..q as u8 {
                check(self.add(a, b) == self.add(b, a), "additive commutativity")?;
                check(self.mul(a, b) == self.mul(b, a), "multiplicative commutativity")?;
                for c in 0..q as u8 {
                    check(
                        self.add(self.add(a, b), c) == self.add(a, self.add(b, c)),
                        "additive associativity",
                    )?;
                    check(
                        self.mul(self.mul(a, b), c) == self.mul(a, self.mul(b, c)),
                        "multiplicative associativity",
                    )?;
                    check(
                        self.mul(a, self.add(b, c)) == self.add(self.mul(a, b), self.mul(a, c)),
                        "distributivity",
                    )?;
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn add(&self, a: u8, b: u8) -> u8 {
        self.add_t[a as usize * self.q0 as usize + b as usize]
    }

    #[inline]
    pub fn sub(&self, a: u8, b: u8) -> u8 {
        self.add(a, self.neg(b))
    }

    #[inline]
    pub fn mul(&self, a: u8, b: u8) -> u8 {
        self.mul_t[a as usize * self.q0 as usize + b as usize]
    }

    #[inline]
    pub fn neg(&self, a: u8) -> u8 {
        self.neg_t[a as usize]
    }

    #[inline]
    pub fn inv(&self, a: u8) -> u8 {
        debug_assert!(a != 0, "inverse of zero");
        self.inv_t[a as usize]
    }

    pub fn pow(&self, a: u8, e: u32) -> u8 {
        let mut acc = 1u8;
        for _ in 0..e {
            acc = self.mul(acc, a);
        }
        acc
    }

    /// Reduces an integer into the prime subfield.
    pub fn reduce_bigint(&self, c: &BigInt) -> u8 {
        let m = c.mod_floor(&BigInt::from(self.p));
        let digits = m.to_u64_digits().1;
        digits.first().copied().unwrap_or(0) as u8
    }

    /// All field elements (0 first).
    pub fn elements(&self) -> impl Iterator<Item = u8> {
        0..self.q0
    }

    /// The nonzero elements.
    pub fn units(&self) -> impl Iterator<Item = u8> {
        1..self.q0
    }
}

// ---------------------------------------------------------------------------
// Compiled polynomial evaluation over a finite field
// ---------------------------------------------------------------------------

/// A polynomial pre-reduced for fast repeated evaluation over one field:
/// coefficients reduced, variables resolved to slot positions.
pub struct CompiledPoly {
    terms: Vec<(u8, SmallVec<[(u16, u8); 6]>)>,
}

impl CompiledPoly {
    pub fn compile(
        f: &MultiPoly,
        field: &FiniteField,
        positions: &HashMap<Var, usize>,
    ) -> Result<CompiledPoly> {
        let mut terms = Vec::with_capacity(f.num_terms());
        for (m, c) in f.terms() {
            let cr = field.reduce_bigint(c);
            if cr == 0 {
                continue;
            }
            let mut mono: SmallVec<[(u16, u8); 6]> = SmallVec::new();
            for (v, e) in m.iter() {
                let pos = positions.get(&v).ok_or_else(|| {
                    Error::InvalidInput(format!("unassigned variable {v} in point count"))
                })?;
                mono.push((*pos as u16, e.min(255) as u8));
            }
            terms.push((cr, mono));
        }
        Ok(CompiledPoly { terms })
    }

    pub fn eval(&self, field: &FiniteField, vals: &[u8]) -> u8 {
        let mut acc = 0u8;
        for (c, mono) in &self.terms {
            let mut t = *c;
            for &(pos, e) in mono {
                let base = vals[pos as usize];
                if base == 0 {
                    t = 0;
                    break;
                }
                t = field.mul(t, field.pow(base, e as u32));
            }
            acc = field.add(acc, t);
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// Matrices over a small field
// ---------------------------------------------------------------------------

/// A dense n×n matrix over a small finite field (entries as field indices).
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct FMatrix {
    pub n: usize,
    e: SmallVec<[u8; 36]>,
}

impl FMatrix {
    pub fn zero(n: usize) -> FMatrix {
        FMatrix {
            n,
            e: smallvec::smallvec![0; n * n],
        }
    }

    pub fn identity(n: usize) -> FMatrix {
        let mut m = FMatrix::zero(n);
        for i in 0..n {
            m.set(i, i, 1);
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.e[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: u8) {
        self.e[i * self.n + j] = v;
    }

    pub fn mul(&self, other: &FMatrix, f: &FiniteField) -> FMatrix {
        let n = self.n;
        let mut out = FMatrix::zero(n);
        for i in 0..n {
            // Upper-triangular support: j ≥ i suffices for all our groups,
            // but the general loop keeps this correct for any matrices.
            for j in 0..n {
                let mut acc = 0u8;
                for k in 0..n {
                    let a = self.get(i, k);
                    if a != 0 {
                        acc = f.add(acc, f.mul(a, other.get(k, j)));
                    }
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// Inverse of an invertible upper-triangular matrix (back-substitution).
    pub fn inv_upper(&self, f: &FiniteField) -> FMatrix {
        let n = self.n;
        let mut out = FMatrix::zero(n);
        for i in (0..n).rev() {
            let dii = f.inv(self.get(i, i));
            out.set(i, i, dii);
            for j in i + 1..n {
                let mut acc = 0u8;
                for k in i + 1..=j {
                    acc = f.add(acc, f.mul(self.get(i, k), out.get(k, j)));
                }
                out.set(i, j, f.neg(f.mul(dii, acc)));
            }
        }
        out
    }

    /// The commutator A·B·A⁻¹·B⁻¹ (upper-triangular inputs).
    pub fn commutator(&self, other: &FMatrix, f: &FiniteField) -> FMatrix {
        self.mul(other, f)
            .mul(&self.inv_upper(f), f)
            .mul(&other.inv_upper(f), f)
    }

    /// Conjugate g·self·g⁻¹.
    pub fn conjugate_by(&self, g: &FMatrix, g_inv: &FMatrix, f: &FiniteField) -> FMatrix {
        g.mul(self, f).mul(g_inv, f)
    }

    /// Packed key (4 bits per upper-triangular entry, row-major); valid for
    /// n ≤ 7 and field sizes ≤ 9.
    pub fn key(&self) -> u128 {
        let mut k = 0u128;
        for i in 0..self.n {
            for j in i..self.n {
                k = (k << 4) | self.get(i, j) as u128;
            }
        }
        k
    }

    pub fn is_upper_triangular(&self) -> bool {
        for i in 0..self.n {
            for j in 0..i {
                if self.get(i, j) != 0 {
                    return false;
                }
            }
        }
        true
    }
}

// ---------------------------------------------------------------------------
// Group views
// ---------------------------------------------------------------------------

/// The matrix-group families the oracle understands.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GroupKind {
    /// Unipotent upper-triangular (all diagonal entries 1).
    U(usize),
    /// Upper-triangular with invertible diagonal.
    T(usize),
    /// Upper-triangular with invertible diagonal and last diagonal entry 1.
    Ttilde(usize),
    /// An explicitly supplied subgroup (verified closed under the group laws).
    Explicit(String),
}

const MAX_GROUP_ORDER: usize = 1 << 24;
const MAX_CONVOLUTION_ORDER: usize = 1 << 20;
const MAX_PAIR_ENUMERATION: u128 = 1 << 26;

struct ClassData {
    /// Class id per element index.
    class_of: Vec<u32>,
    /// Element indices per class; class 0 is the class of the identity.
    orbits: Vec<Vec<u32>>,
}

/// A fully enumerated finite matrix group over a small field.
pub struct FiniteGroupView {
    pub field: FiniteField,
    pub kind: GroupKind,
    pub n: usize,
    elements: Vec<FMatrix>,
    index: HashMap<u128, u32>,
    classes: OnceCell<ClassData>,
}

/// Order polynomial of the standard families, as a polynomial in q.
pub fn order_polynomial(kind: &GroupKind, n: usize) -> MultiPoly {
    let offdiag = (n * (n - 1) / 2) as u32;
    let q = MultiPoly::q();
    let qm1 = MultiPoly::q_minus_1();
    match kind {
        GroupKind::U(_) => q.pow(offdiag),
        GroupKind::T(_) => q.pow(offdiag).mul(&qm1.pow(n as u32)),
        GroupKind::Ttilde(_) => q.pow(offdiag).mul(&qm1.pow(n as u32 - 1)),
        GroupKind::Explicit(_) => panic!("no closed-form order for explicit subgroups"),
    }
}

impl FiniteGroupView {
    /// Enumerates one of the standard families over F_{q0}.
    pub fn new(kind: GroupKind, q0: u8) -> Result<FiniteGroupView> {
        let field = FiniteField::new(q0)?;
        let n = match kind {
            GroupKind::U(n) | GroupKind::T(n) | GroupKind::Ttilde(n) => n,
            GroupKind::Explicit(_) => {
                return Err(Error::InvalidInput(
                    "use from_elements for explicit subgroups".into(),
                ))
            }
        };
        if n == 0 || n > 7 {
            return Err(Error::InvalidInput(format!("matrix size {n} out of range 1..=7")));
        }
        let expected = order_polynomial(&kind, n).eval_q(q0 as i64)?;
        if expected > BigInt::from(MAX_GROUP_ORDER) {
            return Err(Error::ResourceBudget(format!(
                "group order {expected} exceeds enumeration budget {MAX_GROUP_ORDER}"
            )));
        }
        // Diagonal alternatives per position.
        let diag_choices: Vec<Vec<u8>> = (0..n)
            .map(|i| match kind {
                GroupKind::U(_) => vec![1u8],
                GroupKind::T(_) => field.units().collect(),
                GroupKind::Ttilde(_) => {
                    if i == n - 1 {
                        vec![1u8]
                    } else {
                        field.units().collect()
                    }
                }
                GroupKind::Explicit(_) => unreachable!(),
            })
            .collect();
        let offdiag: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect();
        let mut elements = Vec::new();
        let mut diag_counter = vec![0usize; n];
        loop {
            let mut base = FMatrix::zero(n);
            for i in 0..n {
                base.set(i, i, diag_choices[i][diag_counter[i]]);
            }
            let mut off_counter = vec![0u8; offdiag.len()];
            loop {
                let mut m = base.clone();
                for (slot, &(i, j)) in offdiag.iter().enumerate() {
                    m.set(i, j, off_counter[slot]);
                }
                elements.push(m);
                // Increment the off-diagonal counter.
                let mut carry = true;
                for slot in 0..off_counter.len() {
                    if carry {
                        off_counter[slot] += 1;
                        if off_counter[slot] == q0 {
                            off_counter[slot] = 0;
                        } else {
                            carry = false;
                        }
                    }
                }
                if carry {
                    break;
                }
            }
            // Increment the diagonal counter.
            let mut carry = true;
            for i in 0..n {
                if carry {
                    diag_counter[i] += 1;
                    if diag_counter[i] == diag_choices[i].len() {
                        diag_counter[i] = 0;
                    } else {
                        carry = false;
                    }
                }
            }
            if carry {
                break;
            }
        }
        if BigInt::from(elements.len()) != expected {
            return Err(Error::Internal(format!(
                "enumerated {} elements, order polynomial predicts {expected}",
                elements.len()
            )));
        }
        let index = elements
            .iter()
            .enumerate()
            .map(|(i, m)| (m.key(), i as u32))
            .collect();
        Ok(FiniteGroupView {
            field,
            kind,
            n,
            elements,
            index,
            classes: OnceCell::new(),
        })
    }

    /// Wraps an explicit element list, verifying it is a subgroup (contains
    /// the identity, closed under products and inverses).
    pub fn from_elements(q0: u8, n: usize, name: &str, elements: Vec<FMatrix>) -> Result<FiniteGroupView> {
        let field = FiniteField::new(q0)?;
        if elements.is_empty() || elements.len() > MAX_GROUP_ORDER {
            return Err(Error::InvalidInput("empty or oversized element list".into()));
        }
        let index: HashMap<u128, u32> = elements
            .iter()
            .enumerate()
            .map(|(i, m)| (m.key(), i as u32))
            .collect();
        if index.len() != elements.len() {
            return Err(Error::InvalidInput("duplicate elements in subgroup list".into()));
        }
        if !index.contains_key(&FMatrix::identity(n).key()) {
            return Err(Error::InvalidInput("subgroup does not contain the identity".into()));
        }
        for a in &elements {
            if !a.is_upper_triangular() {
                return Err(Error::InvalidInput("subgroup element not upper-triangular".into()));
            }
            if !index.contains_key(&a.inv_upper(&field).key()) {
                return Err(Error::InvalidInput("subgroup not closed under inverses".into()));
            }
            for b in &elements {
                if !index.contains_key(&a.mul(b, &field).key()) {
                    return Err(Error::InvalidInput("subgroup not closed under products".into()));
                }
            }
        }
        Ok(FiniteGroupView {
            field,
            kind: GroupKind::Explicit(name.to_string()),
            n,
            elements,
            index,
            classes: OnceCell::new(),
        })
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn elements(&self) -> &[FMatrix] {
        &self.elements
    }

    pub fn element_index(&self, m: &FMatrix) -> Option<usize> {
        self.index.get(&m.key()).map(|&i| i as usize)
    }

    /// Conjugation generators: elementary unipotents for the whole family,
    /// plus single-entry diagonal tori where the diagonal is free. For
    /// explicit subgroups the full element list is used.
    fn conjugation_generators(&self) -> Vec<FMatrix> {
        match self.kind {
            GroupKind::Explicit(_) => self.elements.clone(),
            _ => {
                let n = self.n;
                let mut gens = Vec::new();
                for i in 0..n - 1 {
                    for t in self.field.units() {
                        let mut m = FMatrix::identity(n);
                        m.set(i, i + 1, t);
                        gens.push(m);
                    }
                }
                let diag_free: Vec<usize> = match self.kind {
                    GroupKind::U(_) => vec![],
                    GroupKind::T(_) => (0..n).collect(),
                    GroupKind::Ttilde(_) => (0..n - 1).collect(),
                    GroupKind::Explicit(_) => unreachable!(),
                };
                for i in diag_free {
                    for u in self.field.units() {
                        if u != 1 {
                            let mut m = FMatrix::identity(n);
                            m.set(i, i, u);
                            gens.push(m);
                        }
                    }
                }
                gens
            }
        }
    }

    fn class_data(&self) -> Result<&ClassData> {
        self.classes.get_or_try_init(|| {
            let gens = self.conjugation_generators();
            let gen_invs: Vec<FMatrix> =
                gens.iter().map(|g| g.inv_upper(&self.field)).collect();
            let mut class_of = vec![u32::MAX; self.order()];
            let mut orbits: Vec<Vec<u32>> = Vec::new();
            for start in 0..self.order() {
                if class_of[start] != u32::MAX {
                    continue;
                }
                let cid = orbits.len() as u32;
                let mut orbit = vec![start as u32];
                class_of[start] = cid;
                let mut queue = vec![start];
                while let Some(idx) = queue.pop() {
                    let m = &self.elements[idx];
                    for (g, gi) in gens.iter().zip(&gen_invs) {
                        let c = m.conjugate_by(g, gi, &self.field);
                        let ci = *self.index.get(&c.key()).ok_or_else(|| {
                            Error::Internal(
                                "conjugation left the group; generator set invalid".into(),
                            )
                        })? as usize;
                        if class_of[ci] == u32::MAX {
                            class_of[ci] = cid;
                            orbit.push(ci as u32);
                            queue.push(ci);
                        }
                    }
                }
                orbits.push(orbit);
            }
            // Class equation: orbit sizes partition the group.
            let total: usize = orbits.iter().map(|o| o.len()).sum();
            if total != self.order() {
                return Err(Error::Internal(format!(
                    "class equation violated: {} ≠ {}",
                    total,
                    self.order()
                )));
            }
            Ok(ClassData { class_of, orbits })
        })
    }

    /// Number of conjugacy classes, by explicit orbit partition.
    pub fn count_conjugacy_classes(&self) -> Result<usize> {
        Ok(self.class_data()?.orbits.len())
    }

    /// Sizes of all conjugacy classes.
    pub fn class_sizes(&self) -> Result<Vec<usize>> {
        Ok(self.class_data()?.orbits.iter().map(|o| o.len()).collect())
    }

    /// Size of the conjugacy class of a specific element.
    pub fn class_size_of(&self, m: &FMatrix) -> Result<usize> {
        let idx = self.element_index(m).ok_or_else(|| {
            Error::InvalidInput("element is not a member of this group".into())
        })?;
        let data = self.class_data()?;
        Ok(data.orbits[data.class_of[idx] as usize].len())
    }

    /// Number of commuting pairs via centralizer sums:
    /// Σ_A |C(A)| = Σ_classes |class|·(|G|/|class|) = k(G)·|G|.
    pub fn commuting_pairs_centralizer_sum(&self) -> Result<u128> {
        let data = self.class_data()?;
        let order = self.order() as u128;
        let mut total = 0u128;
        for orbit in &data.orbits {
            // Each element of the orbit has centralizer of size |G|/|orbit|.
            total += orbit.len() as u128 * (order / orbit.len() as u128);
        }
        Ok(total)
    }

    /// Naive commuting-pair enumeration (cross-check for the shortcut).
    pub fn commuting_pairs_naive(&self) -> Result<u128> {
        let order = self.order() as u128;
        if order * order > MAX_PAIR_ENUMERATION {
            return Err(Error::ResourceBudget(format!(
                "pair enumeration over order {order} exceeds budget"
            )));
        }
        let mut count = 0u128;
        for a in &self.elements {
            for b in &self.elements {
                if a.mul(b, &self.field) == b.mul(a, &self.field) {
                    count += 1;
                }
            }
        }
        Ok(count)
    }

    /// Full commutator distribution D[x] = #{(A,B) : [A,B] = x}.
    fn commutator_distribution(&self) -> Result<Vec<u128>> {
        let order = self.order();
        if order > MAX_CONVOLUTION_ORDER || (order as u128).pow(2) > MAX_PAIR_ENUMERATION {
            return Err(Error::ResourceBudget(format!(
                "commutator distribution over order {order} exceeds budget"
            )));
        }
        let mut dist = vec![0u128; order];
        let invs: Vec<FMatrix> = self
            .elements
            .iter()
            .map(|m| m.inv_upper(&self.field))
            .collect();
        for (ai, a) in self.elements.iter().enumerate() {
            for (bi, b) in self.elements.iter().enumerate() {
                let c = a
                    .mul(b, &self.field)
                    .mul(&invs[ai], &self.field)
                    .mul(&invs[bi], &self.field);
                let ci = *self.index.get(&c.key()).ok_or_else(|| {
                    Error::Internal("commutator left the group".into())
                })? as usize;
                dist[ci] += 1;
            }
        }
        Ok(dist)
    }

    /// Group convolution (f ∗ h)[x] = Σ_y f[y]·h[y⁻¹x].
    fn convolve(&self, f: &[u128], h: &[u128]) -> Result<Vec<u128>> {
        let order = self.order();
        let mut out = vec![0u128; order];
        let invs: Vec<FMatrix> = self
            .elements
            .iter()
            .map(|m| m.inv_upper(&self.field))
            .collect();
        for (yi, &fy) in f.iter().enumerate() {
            if fy == 0 {
                continue;
            }
            for (xi, slot) in out.iter_mut().enumerate() {
                let z = invs[yi].mul(&self.elements[xi], &self.field);
                let zi = *self
                    .index
                    .get(&z.key())
                    .ok_or_else(|| Error::Internal("convolution left the group".into()))?
                    as usize;
                *slot += fy * h[zi];
            }
        }
        Ok(out)
    }

    /// The conjugacy class of `rep` as an indicator vector.
    fn class_indicator(&self, rep: &FMatrix) -> Result<Vec<u128>> {
        let idx = self.element_index(rep).ok_or_else(|| {
            Error::InvalidInput("puncture representative not in group".into())
        })?;
        let data = self.class_data()?;
        let cid = data.class_of[idx];
        let mut ind = vec![0u128; self.order()];
        for &e in &data.orbits[cid as usize] {
            ind[e as usize] = 1;
        }
        Ok(ind)
    }

    /// Exhaustive point count of the (twisted) representation variety:
    /// number of tuples (A₁,B₁,…,A_g,B_g,C₁,…,C_r) with
    /// Π[A_i,B_i]·ΠC_j = 1 and C_j in the conjugacy class of the j-th
    /// puncture representative.
    pub fn count_representation_variety(
        &self,
        g: usize,
        punctures: &[FMatrix],
    ) -> Result<BigInt> {
        // Fast paths that avoid the full distribution.
        if punctures.is_empty() {
            if g == 0 {
                return Ok(BigInt::from(1));
            }
            if g == 1 {
                return Ok(BigInt::from(self.commuting_pairs_centralizer_sum()?));
            }
        }
        let dist = self.commutator_distribution()?;
        let mut acc: Option<Vec<u128>> = None;
        for _ in 0..g {
            acc = Some(match acc {
                None => dist.clone(),
                Some(prev) => self.convolve(&prev, &dist)?,
            });
        }
        for p in punctures {
            let ind = self.class_indicator(p)?;
            acc = Some(match acc {
                None => ind,
                Some(prev) => self.convolve(&prev, &ind)?,
            });
        }
        let id_idx = self
            .element_index(&FMatrix::identity(self.n))
            .expect("identity is in the group");
        match acc {
            None => Ok(BigInt::from(1)),
            Some(v) => Ok(BigInt::from(v[id_idx])),
        }
    }

    /// Partitions the given elements by conjugacy in this group; returns
    /// index sets into `elements`.
    pub fn orbit_partition(&self, elements: &[FMatrix]) -> Result<Vec<Vec<usize>>> {
        let data = self.class_data()?;
        let mut by_class: HashMap<u32, Vec<usize>> = HashMap::new();
        let mut order: Vec<u32> = Vec::new();
        for (i, m) in elements.iter().enumerate() {
            let idx = self.element_index(m).ok_or_else(|| {
                Error::InvalidInput(format!("element {i} not in group"))
            })?;
            let cid = data.class_of[idx];
            let bucket = by_class.entry(cid).or_default();
            if bucket.is_empty() {
                order.push(cid);
            }
            bucket.push(i);
        }
        Ok(order.into_iter().map(|cid| by_class.remove(&cid).unwrap()).collect())
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_supported_fields_construct() {
        for q0 in [2u8, 3, 4, 5, 7, 8, 9] {
            let f = FiniteField::new(q0).unwrap();
            assert_eq!(f.q0, q0);
        }
        assert!(FiniteField::new(6).is_err());
        assert!(FiniteField::new(11).is_err());
    }

    #[test]
    fn frobenius_in_characteristic_p() {
        // (a+b)^p = a^p + b^p in characteristic p.
        for q0 in [4u8, 8, 9] {
            let f = FiniteField::new(q0).unwrap();
            let p = if q0 == 9 { 3 } else { 2 };
            for a in f.elements() {
                for b in f.elements() {
                    assert_eq!(
                        f.pow(f.add(a, b), p),
                        f.add(f.pow(a, p), f.pow(b, p))
                    );
                }
            }
        }
    }

    #[test]
    fn multiplicative_group_is_cyclic_of_order_q_minus_1() {
        for q0 in [2u8, 3, 4, 5, 7, 8, 9] {
            let f = FiniteField::new(q0).unwrap();
            for a in f.units() {
                assert_eq!(f.pow(a, (q0 - 1) as u32), 1);
            }
        }
    }

    #[test]
    fn group_orders_match_polynomials() {
        for (kind, q0, expect) in [
            (GroupKind::U(3), 2u8, 8usize),
            (GroupKind::U(3), 3, 27),
            (GroupKind::U(4), 2, 64),
            (GroupKind::T(2), 3, 12),
            (GroupKind::Ttilde(2), 2, 2),
            (GroupKind::Ttilde(2), 3, 6),
            (GroupKind::Ttilde(3), 2, 8),
        ] {
            let v = FiniteGroupView::new(kind, q0).unwrap();
            assert_eq!(v.order(), expect);
        }
    }

    #[test]
    fn matrix_inverse_roundtrip() {
        let v = FiniteGroupView::new(GroupKind::T(3), 3).unwrap();
        for m in v.elements().iter().take(50) {
            let inv = m.inv_upper(&v.field);
            assert_eq!(m.mul(&inv, &v.field), FMatrix::identity(3));
            assert_eq!(inv.mul(m, &v.field), FMatrix::identity(3));
        }
    }

    #[test]
    fn conjugacy_classes_u3_f2() {
        // Heisenberg group over F_2 (dihedral of order 8): 5 classes.
        let v = FiniteGroupView::new(GroupKind::U(3), 2).unwrap();
        assert_eq!(v.count_conjugacy_classes().unwrap(), 5);
    }

    #[test]
    fn conjugacy_classes_u3_f3() {
        // Heisenberg over F_3: q² + q − 1 = 11 classes.
        let v = FiniteGroupView::new(GroupKind::U(3), 3).unwrap();
        assert_eq!(v.count_conjugacy_classes().unwrap(), 11);
    }

    #[test]
    fn conjugacy_classes_t2_f3() {
        // q(q−1) = 6 at q = 3.
        let v = FiniteGroupView::new(GroupKind::T(2), 3).unwrap();
        assert_eq!(v.count_conjugacy_classes().unwrap(), 6);
    }

    #[test]
    fn commuting_pairs_shortcut_matches_naive() {
        for (kind, q0) in [
            (GroupKind::U(3), 2u8),
            (GroupKind::U(3), 3),
            (GroupKind::T(2), 3),
            (GroupKind::Ttilde(2), 3),
            (GroupKind::U(4), 2),
        ] {
            let v = FiniteGroupView::new(kind.clone(), q0).unwrap();
            assert_eq!(
                v.commuting_pairs_centralizer_sum().unwrap(),
                v.commuting_pairs_naive().unwrap(),
                "{kind:?} over F_{q0}"
            );
        }
    }

    #[test]
    fn representation_variety_counts() {
        // U_3(F_2), g=1: |G|·k(G) = 8·5 = 40.
        let v = FiniteGroupView::new(GroupKind::U(3), 2).unwrap();
        assert_eq!(
            v.count_representation_variety(1, &[]).unwrap(),
            BigInt::from(40)
        );
        // g = 0 is a single point.
        assert_eq!(
            v.count_representation_variety(0, &[]).unwrap(),
            BigInt::from(1)
        );
        // T̃_2(F_2), g=1: q²(q−1) = 4 at q=2.
        let v = FiniteGroupView::new(GroupKind::Ttilde(2), 2).unwrap();
        assert_eq!(
            v.count_representation_variety(1, &[]).unwrap(),
            BigInt::from(4)
        );
    }

    #[test]
    fn genus_two_count_matches_frobenius() {
        // Independent cross-check of the convolution path: for U_3(F_2)
        // (dihedral of order 8), Frobenius' formula over its 5 classes with
        // degrees (1,1,1,1,2) gives |R(Σ_2)| = Σ (|G|/d)^2·|G| ... computed
        // directly: 4·8³ + 4⁴·... — we just check against the formula
        // |G|^3·Σ d^{−2} = 512·(4 + 1/4) = 2176.
        let v = FiniteGroupView::new(GroupKind::U(3), 2).unwrap();
        assert_eq!(
            v.count_representation_variety(2, &[]).unwrap(),
            BigInt::from(2176)
        );
    }

    #[test]
    fn twisted_count_t2tilde() {
        // T̃_2(F_2) = {[[1,b],[0,1]]} ≅ Z/2; with one puncture at the
        // nontrivial class {J}, solutions of [A,B]·C = 1 with C = J: none,
        // because the group is abelian so [A,B] = 1 ≠ J⁻¹.
        let v = FiniteGroupView::new(GroupKind::Ttilde(2), 2).unwrap();
        let mut j = FMatrix::identity(2);
        j.set(0, 1, 1);
        assert_eq!(
            v.count_representation_variety(1, &[j]).unwrap(),
            BigInt::from(0)
        );
    }

    #[test]
    fn orbit_partition_groups_conjugates() {
        let v = FiniteGroupView::new(GroupKind::Ttilde(2), 3).unwrap();
        // Elements [[1,0],[0,1]], [[1,1],[0,1]], [[1,2],[0,1]]: the latter
        // two are conjugate in T̃_2 (scaling by the torus), identity alone.
        let mut e0 = FMatrix::identity(2);
        let mut e1 = FMatrix::identity(2);
        e1.set(0, 1, 1);
        let mut e2 = FMatrix::identity(2);
        e2.set(0, 1, 2);
        e0.set(0, 0, 1);
        let part = v.orbit_partition(&[e0, e1, e2]).unwrap();
        assert_eq!(part, vec![vec![0], vec![1, 2]]);
    }

    #[test]
    fn explicit_subgroup_roundtrip() {
        // The center of U_3(F_2): {I, I + e_13}.
        let mut z = FMatrix::identity(3);
        z.set(0, 2, 1);
        let v = FiniteGroupView::from_elements(2, 3, "center", vec![FMatrix::identity(3), z])
            .unwrap();
        assert_eq!(v.order(), 2);
        assert_eq!(v.count_conjugacy_classes().unwrap(), 2);
        // Not closed: {I, J} with J² = I but missing products is fine for 2
        // elements; instead test a genuinely non-closed list.
        let mut a = FMatrix::identity(3);
        a.set(0, 1, 1);
        assert!(
            FiniteGroupView::from_elements(2, 3, "bad", vec![FMatrix::identity(3), a, {
                let mut b = FMatrix::identity(3);
                b.set(1, 2, 1);
                b
            }])
            .is_err()
        );
    }

    #[test]
    fn compiled_poly_eval() {
        let f = FiniteField::new(5).unwrap();
        let x = Var::intern("x");
        let y = Var::intern("y");
        let poly = crate::poly::parse_poly("x^2*y - 3*x + 7").unwrap();
        let positions: HashMap<Var, usize> = [(x, 0), (y, 1)].into_iter().collect();
        let c = CompiledPoly::compile(&poly, &f, &positions).unwrap();
        for xv in 0..5u8 {
            for yv in 0..5u8 {
                let expect = ((xv as i64 * xv as i64 * yv as i64 - 3 * xv as i64 + 7)
                    % 5
                    + 5) as u8
                    % 5;
                assert_eq!(c.eval(&f, &[xv, yv]), expect);
            }
        }
    }
}
