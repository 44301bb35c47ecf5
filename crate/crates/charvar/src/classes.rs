//! Conjugacy-class catalog for the group T̃_n of invertible upper-triangular
//! matrices with last diagonal entry 1.
//!
//! The catalog collects everything the fixed-genus pipeline needs about
//! conjugacy classes:
//!
//! * the unipotent classes, each with a 0/1 representative, the ideal of its
//!   orbit closure, its virtual class `[U_i] ∈ ℤ[q]`, and the virtual class
//!   of its stabilizer;
//! * the families of non-unipotent classes, indexed by a diagonal pattern
//!   (which diagonal entries coincide) and a unipotent part, with a base
//!   variety of admissible diagonal values and a constant orbit class along
//!   the base;
//! * the transition matrix of the stratification of the unipotent cone by
//!   the orbit closures, which converts closed-stratum classes into
//!   locally-closed-stratum classes.
//!
//! Every numeric ingredient is produced by the exact engines in
//! [`crate::strata`] and [`crate::elim`]; the catalog construction
//! additionally self-checks the motivic orbit–stabilizer products, the
//! total-measure identity Σ [base]·[orbit] = [T̃_n], and the transition-matrix
//! row identities, and fails hard if any of them break.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use num_bigint::BigInt;
use num_traits::Zero;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elim::{closure_equations, ideal_contains, matrix_coord, Ideal};
use crate::poly::{MultiPoly, Var};
use crate::strata::{StrataEngine, StratumSpec};
use crate::{Error, Result};

/// Version tag for the on-disk catalog format; bump on breaking changes.
pub const CATALOG_FORMAT_VERSION: u32 = 1;

/// An integer matrix in row-major order.
pub type Matrix = Vec<Vec<i64>>;

/// `[T̃_n] = (q−1)^{n−1} · q^{n(n−1)/2}`.
pub fn group_class(n: usize) -> MultiPoly {
    let offdiag = (n * (n - 1) / 2) as u32;
    MultiPoly::q_minus_1()
        .pow((n - 1) as u32)
        .mul(&MultiPoly::q().pow(offdiag))
}

fn check_group_element(n: usize, m: &Matrix) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidInput("matrix size must be positive".into()));
    }
    if m.len() != n || m.iter().any(|row| row.len() != n) {
        return Err(Error::InvalidInput(format!("expected a {n}x{n} matrix")));
    }
    for i in 0..n {
        for j in 0..i {
            if m[i][j] != 0 {
                return Err(Error::InvalidInput("matrix must be upper triangular".into()));
            }
        }
        if m[i][i] == 0 {
            return Err(Error::InvalidInput("diagonal entries must be nonzero".into()));
        }
    }
    if m[n - 1][n - 1] != 1 {
        return Err(Error::InvalidInput(
            "last diagonal entry must be 1 for this group".into(),
        ));
    }
    Ok(())
}

/// Name of the conjugator-entry variable used by the conjugation strata.
fn conjugator_var(i: usize, j: usize) -> Var {
    Var::intern(&format!("x_{i}_{j}"))
}

/// The stratum `{g ∈ T̃_n : g·a = b·g}` of conjugators from `a` to `b`, as a
/// locally closed set in the entries of `g`.  Its virtual class is nonzero
/// exactly when `a` and `b` are conjugate.
pub fn conjugation_spec(n: usize, a: &Matrix, b: &Matrix) -> Result<StratumSpec> {
    check_group_element(n, a)?;
    check_group_element(n, b)?;
    let mut vars = Vec::new();
    for i in 1..=n {
        for j in i..=n {
            if i == j && i == n {
                continue;
            }
            vars.push(conjugator_var(i, j));
        }
    }
    // g as a symbolic matrix, with the fixed last diagonal entry 1.
    let mut g = vec![vec![MultiPoly::zero(); n]; n];
    for i in 0..n {
        for j in i..n {
            g[i][j] = if i == j && i == n - 1 {
                MultiPoly::one()
            } else {
                MultiPoly::var(conjugator_var(i + 1, j + 1))
            };
        }
    }
    // Equations: entries of g·a − b·g (automatically upper triangular).
    let mut zero = Vec::new();
    for i in 0..n {
        for j in i..n {
            let mut e = MultiPoly::zero();
            for k in i..=j {
                e = e.add(&g[i][k].scale(&BigInt::from(a[k][j])));
                e = e.sub(&g[k][j].scale(&BigInt::from(b[i][k])));
            }
            if !e.is_zero() {
                zero.push(e);
            }
        }
    }
    let nonzero = (1..n)
        .map(|i| MultiPoly::var(conjugator_var(i, i)))
        .collect();
    StratumSpec::new(vars, zero, nonzero)
}

/// Whether `a` and `b` are conjugate in T̃_n over an algebraically closed
/// field of characteristic 0, decided by the (non)vanishing of the virtual
/// class of the conjugator stratum.
pub fn conjugacy_test(engine: &StrataEngine, n: usize, a: &Matrix, b: &Matrix) -> Result<bool> {
    if a == b {
        return Ok(true);
    }
    let spec = conjugation_spec(n, a, b)?;
    Ok(!engine.virtual_class(&spec)?.value.is_zero())
}

/// Virtual class of the stabilizer `{g ∈ T̃_n : g·a = a·g}`.
pub fn stabilizer_class(engine: &StrataEngine, n: usize, a: &Matrix) -> Result<MultiPoly> {
    let spec = conjugation_spec(n, a, a)?;
    Ok(engine.virtual_class(&spec)?.value)
}

/// Orbit class `[T̃_n] / [Stab(a)]`; the division is exact because the
/// stabilizers in this group are special.
pub fn orbit_class(engine: &StrataEngine, n: usize, a: &Matrix) -> Result<MultiPoly> {
    let stab = stabilizer_class(engine, n, a)?;
    group_class(n).divide_exact(&stab).ok_or_else(|| {
        Error::Internal(format!(
            "stabilizer class {stab} does not divide the group class"
        ))
    })
}

// ---------------------------------------------------------------------------
// Unipotent classes
// ---------------------------------------------------------------------------

/// Ranks of the powers `(ξ−1)^k`, `k = 1..n−1`, over ℚ — a conjugation
/// invariant used to pre-bucket candidates before the exact conjugacy test.
fn nilpotent_rank_profile(n: usize, xi: &Matrix) -> Vec<usize> {
    let mut nil = vec![vec![0i64; n]; n];
    for i in 0..n {
        for j in 0..n {
            nil[i][j] = xi[i][j] - i64::from(i == j);
        }
    }
    let mut power = nil.clone();
    let mut profile = Vec::new();
    for _ in 1..n {
        profile.push(rational_rank(&power));
        let mut next = vec![vec![0i64; n]; n];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    next[i][j] += power[i][k] * nil[k][j];
                }
            }
        }
        power = next;
    }
    profile
}

/// Rank of a small integer matrix over ℚ by exact Gaussian elimination.
fn rational_rank(m: &[Vec<i64>]) -> usize {
    let rows = m.len();
    if rows == 0 {
        return 0;
    }
    let cols = m[0].len();
    let mut a: Vec<Vec<num_rational::BigRational>> = m
        .iter()
        .map(|row| {
            row.iter()
                .map(|&e| num_rational::BigRational::from(BigInt::from(e)))
                .collect()
        })
        .collect();
    use num_traits::Zero;
    let mut rank = 0;
    for col in 0..cols {
        let Some(pivot) = (rank..rows).find(|&r| !a[r][col].is_zero()) else {
            continue;
        };
        a.swap(rank, pivot);
        for r in 0..rows {
            if r != rank && !a[r][col].is_zero() {
                let factor = &a[r][col] / &a[rank][col];
                for c in col..cols {
                    let delta = &factor * &a[rank][c];
                    a[r][c] -= delta;
                }
            }
        }
        rank += 1;
        if rank == rows {
            break;
        }
    }
    rank
}

/// All `2^{n(n−1)/2}` 0/1 upper unitriangular matrices, in ascending order of
/// the bitmask over the strictly-upper positions (row-major).
fn all_unitriangular01(n: usize) -> Vec<Matrix> {
    let mut positions = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            positions.push((i, j));
        }
    }
    let count = 1usize << positions.len();
    let mut out = Vec::with_capacity(count);
    for mask in 0..count {
        let mut m = vec![vec![0i64; n]; n];
        for i in 0..n {
            m[i][i] = 1;
        }
        for (b, &(i, j)) in positions.iter().enumerate() {
            if mask & (1 << b) != 0 {
                m[i][j] = 1;
            }
        }
        out.push(m);
    }
    out
}

/// One 0/1 representative per unipotent conjugacy class of T̃_n, in first-seen
/// order over the ascending bitmask enumeration (so the identity is always
/// class 1).  The 0/1 normal-form property this relies on holds for n ≤ 5
/// only, hence the bound.
pub fn enumerate_unipotent_classes(engine: &StrataEngine, n: usize) -> Result<Vec<Matrix>> {
    if n == 0 || n > 5 {
        return Err(Error::InvalidInput(
            "unipotent classes have 0/1 representatives only for 1 ≤ n ≤ 5".into(),
        ));
    }
    let mut reps: Vec<Matrix> = Vec::new();
    // Bucket representatives by their nilpotent rank profile so the exact
    // (and pricier) conjugacy test only runs within a bucket.
    let mut buckets: HashMap<Vec<usize>, Vec<usize>> = HashMap::new();
    for m in all_unitriangular01(n) {
        let profile = nilpotent_rank_profile(n, &m);
        let bucket = buckets.entry(profile).or_default();
        let mut found = false;
        for &r in bucket.iter() {
            if conjugacy_test(engine, n, &m, &reps[r])? {
                found = true;
                break;
            }
        }
        if !found {
            bucket.push(reps.len());
            reps.push(m);
        }
    }
    Ok(reps)
}

/// A unipotent conjugacy class of T̃_n.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnipotentClass {
    /// 1-based index; class 1 is the identity.
    pub index: usize,
    /// 0/1 upper unitriangular representative.
    pub representative: Matrix,
    /// Vanishing ideal of the orbit closure, in the matrix coordinates.
    pub closure_ideal: Ideal,
    /// Virtual class `[U_i]` of the orbit.
    pub class_poly: MultiPoly,
    /// Virtual class of the stabilizer of the representative.
    pub stabilizer_poly: MultiPoly,
}

// ---------------------------------------------------------------------------
// Diagonal patterns and class families
// ---------------------------------------------------------------------------

/// A partition of `{1..n}` recording which diagonal entries coincide.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagonalPattern {
    /// Blocks, each sorted ascending, ordered by their smallest element.
    blocks: Vec<Vec<usize>>,
}

impl DiagonalPattern {
    /// Build a pattern from blocks, validating that they partition `{1..n}`.
    pub fn new(n: usize, mut blocks: Vec<Vec<usize>>) -> Result<DiagonalPattern> {
        let mut seen = vec![false; n + 1];
        for block in &mut blocks {
            block.sort_unstable();
            for &e in block.iter() {
                if e == 0 || e > n || seen[e] {
                    return Err(Error::InvalidInput(
                        "blocks must partition {1..n} without repeats".into(),
                    ));
                }
                seen[e] = true;
            }
        }
        if !seen[1..=n].iter().all(|&s| s) {
            return Err(Error::InvalidInput("blocks must cover {1..n}".into()));
        }
        blocks.sort_by_key(|b| b[0]);
        Ok(DiagonalPattern { blocks })
    }

    /// All partitions of `{1..n}`, ordered by block count and then by the
    /// canonical block lists; the one-block (all-equal) pattern comes first.
    pub fn all(n: usize) -> Vec<DiagonalPattern> {
        // Restricted growth strings: a_1 = 0 and a_{k+1} ≤ max(a_1..a_k)+1.
        let mut out = Vec::new();
        let mut rgs = vec![0usize; n];
        fn rec(rgs: &mut Vec<usize>, pos: usize, max: usize, n: usize, out: &mut Vec<DiagonalPattern>) {
            if pos == n {
                let nblocks = max + 1;
                let mut blocks = vec![Vec::new(); nblocks];
                for (i, &b) in rgs.iter().enumerate() {
                    blocks[b].push(i + 1);
                }
                out.push(DiagonalPattern { blocks });
                return;
            }
            for b in 0..=max + 1 {
                rgs[pos] = b;
                rec(rgs, pos + 1, max.max(b), n, out);
            }
        }
        rec(&mut rgs, 1, 0, n, &mut out);
        out.sort_by(|a, b| {
            (a.blocks.len(), &a.blocks).cmp(&(b.blocks.len(), &b.blocks))
        });
        out
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    /// Whether all diagonal entries coincide (the unipotent pattern, since
    /// the block containing `n` is pinned to the value 1).
    pub fn is_trivial(&self) -> bool {
        self.blocks.len() == 1
    }

    /// Blocks other than the one containing `n`, in canonical order.  These
    /// carry the free diagonal values of the family base.
    pub fn free_blocks(&self, n: usize) -> Vec<&Vec<usize>> {
        self.blocks.iter().filter(|b| !b.contains(&n)).collect()
    }

    /// Diagonal vector with the block containing `n` set to 1 and the k-th
    /// free block set to `values[k]`.
    fn diagonal(&self, n: usize, values: &[i64]) -> Vec<i64> {
        let mut diag = vec![1i64; n];
        for (k, block) in self.free_blocks(n).into_iter().enumerate() {
            for &pos in block {
                diag[pos - 1] = values[k];
            }
        }
        diag
    }
}

/// A family of conjugacy classes sharing a diagonal pattern and a unipotent
/// part, parameterized by the admissible diagonal values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassFamily {
    /// 1-based index into the full family list; families `1..=M` are the
    /// unipotent classes.
    pub index: usize,
    pub pattern: DiagonalPattern,
    /// Index of the unipotent part among the unipotent classes (1-based).
    pub unipotent_index: usize,
    /// Base variety of free diagonal values: all ≠ 0, ≠ 1, pairwise distinct.
    pub base: StratumSpec,
    /// Virtual class of the base.
    pub base_poly: MultiPoly,
    /// Virtual class of the (constant) orbit of any member of the family.
    pub orbit_poly: MultiPoly,
    /// Virtual class of the (constant) stabilizer.
    pub stabilizer_poly: MultiPoly,
}

/// Variable holding the diagonal value of the free block whose smallest
/// element is `min_elem`.
pub fn block_value_var(min_elem: usize) -> Var {
    Var::intern(&format!("d_{min_elem}"))
}

fn family_base_spec(pattern: &DiagonalPattern, n: usize) -> Result<StratumSpec> {
    let free = pattern.free_blocks(n);
    let vars: Vec<Var> = free.iter().map(|b| block_value_var(b[0])).collect();
    let mut nonzero = Vec::new();
    for v in &vars {
        nonzero.push(MultiPoly::var(*v));
        nonzero.push(MultiPoly::var(*v).sub(&MultiPoly::one()));
    }
    for a in 0..vars.len() {
        for b in (a + 1)..vars.len() {
            nonzero.push(MultiPoly::var(vars[a]).sub(&MultiPoly::var(vars[b])));
        }
    }
    StratumSpec::new(vars, Vec::new(), nonzero)
}

/// The representative `D + ξ − 1` with diagonal `diag` and the strictly-upper
/// part of `xi`.
fn family_representative(n: usize, diag: &[i64], xi: &Matrix) -> Matrix {
    let mut m = vec![vec![0i64; n]; n];
    for i in 0..n {
        m[i][i] = diag[i];
        for j in (i + 1)..n {
            m[i][j] = xi[i][j];
        }
    }
    m
}

/// Three disjoint prime tuples used as generic diagonal specializations: a
/// family-level statement is accepted only if all three agree.
const SPECIALIZATION_TUPLES: [[i64; 4]; 3] = [
    [2, 3, 5, 7],
    [11, 13, 17, 19],
    [23, 29, 31, 37],
];

/// Build all class families of T̃_n from the unipotent representatives.
///
/// For every diagonal pattern and unipotent part, duplicates (pairs that
/// become conjugate once the diagonal is attached) are filtered by the exact
/// conjugacy test at three independent generic specializations of the free
/// diagonal values; any disagreement between specializations is a hard error.
pub fn build_families(
    engine: &StrataEngine,
    n: usize,
    reps: &[Matrix],
) -> Result<Vec<ClassFamily>> {
    let mut families = Vec::new();
    for pattern in DiagonalPattern::all(n) {
        let free_count = pattern.free_blocks(n).len();
        if free_count > SPECIALIZATION_TUPLES[0].len() {
            return Err(Error::Internal("more free blocks than specialization values".into()));
        }
        // Partition the unipotent indices by conjugacy of D + ξ_i − 1 at
        // each specialization; all three partitions must agree.
        let mut assignments: Vec<Vec<usize>> = Vec::new();
        for tuple in &SPECIALIZATION_TUPLES {
            let diag = pattern.diagonal(n, &tuple[..free_count]);
            let mut kept: Vec<usize> = Vec::new();
            let mut assign = Vec::with_capacity(reps.len());
            for (i, xi) in reps.iter().enumerate() {
                let a = family_representative(n, &diag, xi);
                let mut owner = None;
                for &r in &kept {
                    let b = family_representative(n, &diag, &reps[r]);
                    if conjugacy_test(engine, n, &a, &b)? {
                        owner = Some(r);
                        break;
                    }
                }
                let owner = owner.unwrap_or_else(|| {
                    kept.push(i);
                    i
                });
                assign.push(owner);
            }
            assignments.push(assign);
        }
        if assignments[1] != assignments[0] || assignments[2] != assignments[0] {
            return Err(Error::AlgorithmFailure(format!(
                "family deduplication disagrees between generic specializations for pattern {:?}",
                pattern.blocks
            )));
        }
        let base = family_base_spec(&pattern, n)?;
        let base_poly = engine.virtual_class(&base)?.value;
        for (i, xi) in reps.iter().enumerate() {
            if assignments[0][i] != i {
                continue;
            }
            // Stabilizer constancy along the base: the three specializations
            // must give the same stabilizer class.
            let mut stabs = Vec::new();
            for tuple in &SPECIALIZATION_TUPLES {
                let diag = pattern.diagonal(n, &tuple[..free_count]);
                let rep = family_representative(n, &diag, xi);
                stabs.push(stabilizer_class(engine, n, &rep)?);
            }
            if stabs[1] != stabs[0] || stabs[2] != stabs[0] {
                return Err(Error::AlgorithmFailure(format!(
                    "stabilizer class varies along the family base for pattern {:?}",
                    pattern.blocks
                )));
            }
            let stabilizer_poly = stabs.swap_remove(0);
            let orbit_poly = group_class(n).divide_exact(&stabilizer_poly).ok_or_else(|| {
                Error::Internal(format!(
                    "stabilizer class {stabilizer_poly} does not divide the group class"
                ))
            })?;
            families.push(ClassFamily {
                index: families.len() + 1,
                pattern: pattern.clone(),
                unipotent_index: i + 1,
                base: base.clone(),
                base_poly: base_poly.clone(),
                orbit_poly,
                stabilizer_poly,
            });
        }
    }
    Ok(families)
}

// ---------------------------------------------------------------------------
// Transition matrix
// ---------------------------------------------------------------------------

/// Transition matrix of the stratification of the unipotent cone by orbit
/// closures: converts classes over the closed sets `U̅_j` into classes over
/// the locally closed strata `U_i` via `[U_i] = Σ_j C_ij [U̅_j]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    /// `leq[i][j]` iff `U̅_i ⊆ U̅_j` (0-based).
    pub leq: Vec<Vec<bool>>,
    /// The integer matrix `C` (0-based `C[i][j] = C_{ij}`).
    pub matrix: Vec<Vec<i64>>,
}

fn build_transition(classes: &[UnipotentClass]) -> Result<TransitionMatrix> {
    let m = classes.len();
    let mut leq = vec![vec![false; m]; m];
    for i in 0..m {
        for j in 0..m {
            // U̅_i ⊆ U̅_j  ⟺  I(U̅_i) ⊇ I(U̅_j).
            leq[i][j] =
                ideal_contains(&classes[i].closure_ideal, &classes[j].closure_ideal)?;
        }
    }
    for i in 0..m {
        for j in 0..m {
            if i != j && leq[i][j] && leq[j][i] {
                return Err(Error::Internal(
                    "distinct strata with equal closures: stratification invalid".into(),
                ));
            }
        }
    }
    // Rows in a linear extension of the partial order: [X_i] = [X̄_i] −
    // Σ_{j<i} [X_j] expands to row_i = e_i − Σ_{j<i} row_j.
    let mut order: Vec<usize> = Vec::new();
    let mut placed = vec![false; m];
    while order.len() < m {
        let next = (0..m)
            .find(|&i| {
                !placed[i] && (0..m).all(|j| j == i || !leq[j][i] || placed[j])
            })
            .ok_or_else(|| Error::Internal("closure order contains a cycle".into()))?;
        placed[next] = true;
        order.push(next);
    }
    let mut matrix = vec![vec![0i64; m]; m];
    for &i in &order {
        matrix[i][i] = 1;
        for j in 0..m {
            if j != i && leq[j][i] {
                for k in 0..m {
                    matrix[i][k] -= matrix[j][k];
                }
            }
        }
    }
    // Row identity: Σ_j C_ij [U̅_j] = [U_i], with [U̅_j] = Σ_{k ≤ j} [U_k].
    let closure_polys: Vec<MultiPoly> = (0..m)
        .map(|j| {
            let mut acc = MultiPoly::zero();
            for k in 0..m {
                if leq[k][j] {
                    acc = acc.add(&classes[k].class_poly);
                }
            }
            acc
        })
        .collect();
    for i in 0..m {
        let mut acc = MultiPoly::zero();
        for j in 0..m {
            if matrix[i][j] != 0 {
                acc = acc.add(&closure_polys[j].scale(&BigInt::from(matrix[i][j])));
            }
        }
        if acc != classes[i].class_poly {
            return Err(Error::Internal(format!(
                "transition matrix row {} fails its defining identity",
                i + 1
            )));
        }
    }
    Ok(TransitionMatrix { leq, matrix })
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

/// The full conjugacy-class catalog of T̃_n.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCatalog {
    /// On-disk format version; see [`CATALOG_FORMAT_VERSION`].
    pub version: u32,
    pub n: usize,
    pub unipotent: Vec<UnipotentClass>,
    pub families: Vec<ClassFamily>,
    pub transition: TransitionMatrix,
}

impl ClassCatalog {
    /// Number of unipotent classes.
    pub fn class_count(&self) -> usize {
        self.unipotent.len()
    }

    /// Number of class families (the first `class_count()` are unipotent).
    pub fn family_count(&self) -> usize {
        self.families.len()
    }

    /// File name of the cached catalog for a given `n`.
    pub fn cache_file_name(n: usize) -> String {
        format!("classes-n{n}-v{CATALOG_FORMAT_VERSION}.json")
    }

    /// Write the catalog into `dir` (created if needed).
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)
            .map_err(|e| Error::InvalidInput(format!("cannot create cache dir: {e}")))?;
        let path = dir.join(Self::cache_file_name(self.n));
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("catalog serialization failed: {e}")))?;
        fs::write(&path, json)
            .map_err(|e| Error::InvalidInput(format!("cannot write cache file: {e}")))?;
        Ok(path)
    }

    /// Load a cached catalog for `n` from `dir`; `Ok(None)` if absent.
    pub fn load(dir: &Path, n: usize) -> Result<Option<ClassCatalog>> {
        let path = dir.join(Self::cache_file_name(n));
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => {
                return Err(Error::InvalidInput(format!(
                    "cannot read cache file {}: {e}",
                    path.display()
                )))
            }
        };
        let catalog: ClassCatalog = serde_json::from_str(&text).map_err(|e| {
            Error::Parse(format!("corrupt catalog cache {}: {e}", path.display()))
        })?;
        if catalog.version != CATALOG_FORMAT_VERSION || catalog.n != n {
            return Ok(None);
        }
        Ok(Some(catalog))
    }
}

/// Build the complete catalog for T̃_n.  Per-class work (closure ideals,
/// stabilizers) runs in parallel; assembly and verification are sequential.
pub fn build_catalog(engine: &StrataEngine, n: usize) -> Result<ClassCatalog> {
    let reps = enumerate_unipotent_classes(engine, n)?;
    let group = group_class(n);
    let unipotent: Vec<UnipotentClass> = reps
        .par_iter()
        .enumerate()
        .map(|(i, rep)| -> Result<UnipotentClass> {
            let closure_ideal = closure_equations(n, rep)?;
            let stabilizer_poly = stabilizer_class(engine, n, rep)?;
            let class_poly = group.divide_exact(&stabilizer_poly).ok_or_else(|| {
                Error::Internal(format!(
                    "stabilizer class {stabilizer_poly} does not divide the group class"
                ))
            })?;
            // The representative must lie on its own closure.
            let mut point = BTreeMap::new();
            for r in 1..=n {
                for c in r..=n {
                    if r == c && r == n {
                        continue;
                    }
                    point.insert(matrix_coord(r, c), BigInt::from(rep[r - 1][c - 1]));
                }
            }
            for g in closure_ideal.generators() {
                if !g.eval_int(&point)?.is_zero() {
                    return Err(Error::Internal(format!(
                        "representative of class {} violates its closure equation {g}",
                        i + 1
                    )));
                }
            }
            Ok(UnipotentClass {
                index: i + 1,
                representative: rep.clone(),
                closure_ideal,
                class_poly,
                stabilizer_poly,
            })
        })
        .collect::<Result<_>>()?;
    // Motivic orbit–stabilizer check for every class.
    for class in &unipotent {
        if class.class_poly.mul(&class.stabilizer_poly) != group {
            return Err(Error::Internal(format!(
                "orbit–stabilizer identity fails for unipotent class {}",
                class.index
            )));
        }
    }
    // The unipotent classes partition the unipotent cone.
    let unipotent_total = unipotent
        .iter()
        .fold(MultiPoly::zero(), |acc, c| acc.add(&c.class_poly));
    if unipotent_total != MultiPoly::q().pow((n * (n - 1) / 2) as u32) {
        return Err(Error::Internal(
            "unipotent classes do not add up to the unipotent cone".into(),
        ));
    }
    let families = build_families(engine, n, &reps)?;
    // The first families must be exactly the unipotent classes.
    if families.len() < unipotent.len()
        || families[..unipotent.len()]
            .iter()
            .enumerate()
            .any(|(i, f)| !f.pattern.is_trivial() || f.unipotent_index != i + 1)
    {
        return Err(Error::Internal(
            "family indexing does not start with the unipotent classes".into(),
        ));
    }
    // Total measure: the families partition the whole group.
    let total = families.iter().fold(MultiPoly::zero(), |acc, f| {
        acc.add(&f.base_poly.mul(&f.orbit_poly))
    });
    if total != group {
        return Err(Error::Internal(
            "class families do not add up to the full group class".into(),
        ));
    }
    let transition = build_transition(&unipotent)?;
    Ok(ClassCatalog {
        version: CATALOG_FORMAT_VERSION,
        n,
        unipotent,
        families,
        transition,
    })
}

/// Load the catalog from the cache directory if present, else build it (and
/// persist it when a cache directory is supplied).
pub fn load_or_build(
    engine: &StrataEngine,
    n: usize,
    cache_dir: Option<&Path>,
) -> Result<ClassCatalog> {
    if let Some(dir) = cache_dir {
        if let Some(catalog) = ClassCatalog::load(dir, n)? {
            return Ok(catalog);
        }
    }
    let catalog = build_catalog(engine, n)?;
    if let Some(dir) = cache_dir {
        catalog.save(dir)?;
    }
    Ok(catalog)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{FMatrix, FiniteGroupView, GroupKind};
    use num_rational::BigRational;
    use num_traits::{One, Signed, Zero};

    fn engine() -> StrataEngine {
        StrataEngine::new()
    }

    fn unitriangular(n: usize, ones: &[(usize, usize)]) -> Matrix {
        let mut m = vec![vec![0i64; n]; n];
        for i in 0..n {
            m[i][i] = 1;
        }
        for &(i, j) in ones {
            m[i - 1][j - 1] = 1;
        }
        m
    }

    fn qpoly(s: &str) -> MultiPoly {
        crate::poly::parse_poly(s).unwrap()
    }

    #[test]
    fn conjugacy_test_trivial_cases() {
        let e = engine();
        let id = unitriangular(2, &[]);
        let j = unitriangular(2, &[(1, 2)]);
        assert!(conjugacy_test(&e, 2, &id, &id).unwrap());
        assert!(conjugacy_test(&e, 2, &j, &j).unwrap());
        assert!(!conjugacy_test(&e, 2, &id, &j).unwrap());
        assert!(!conjugacy_test(&e, 2, &j, &id).unwrap());
    }

    #[test]
    fn stabilizer_examples_n2() {
        let e = engine();
        assert_eq!(
            stabilizer_class(&e, 2, &unitriangular(2, &[])).unwrap(),
            qpoly("q^2 - q")
        );
        assert_eq!(
            stabilizer_class(&e, 2, &unitriangular(2, &[(1, 2)])).unwrap(),
            qpoly("q")
        );
        assert_eq!(
            orbit_class(&e, 2, &unitriangular(2, &[(1, 2)])).unwrap(),
            qpoly("q - 1")
        );
    }

    #[test]
    fn unipotent_class_counts_small() {
        let e = engine();
        assert_eq!(enumerate_unipotent_classes(&e, 1).unwrap().len(), 1);
        assert_eq!(enumerate_unipotent_classes(&e, 2).unwrap().len(), 2);
        assert_eq!(enumerate_unipotent_classes(&e, 3).unwrap().len(), 5);
        assert!(enumerate_unipotent_classes(&e, 6).is_err());
    }

    #[test]
    fn unipotent_class_count_n4() {
        let e = engine();
        assert_eq!(enumerate_unipotent_classes(&e, 4).unwrap().len(), 16);
    }

    #[test]
    fn symbolic_partition_matches_finite_field_partition() {
        let e = engine();
        let n = 3;
        let all = all_unitriangular01(n);
        let reps = enumerate_unipotent_classes(&e, n).unwrap();
        // Symbolic assignment: which representative is each matrix
        // conjugate to?
        let mut symbolic = Vec::new();
        for m in &all {
            let owner = reps
                .iter()
                .position(|r| conjugacy_test(&e, n, m, r).unwrap())
                .expect("every matrix is conjugate to some representative");
            symbolic.push(owner);
        }
        for q0 in [2u8, 3] {
            let group = FiniteGroupView::new(GroupKind::Ttilde(n), q0).unwrap();
            let elements: Vec<FMatrix> = all
                .iter()
                .map(|m| {
                    let mut f = FMatrix::zero(n);
                    for i in 0..n {
                        for j in 0..n {
                            f.set(i, j, (m[i][j].rem_euclid(q0 as i64)) as u8);
                        }
                    }
                    f
                })
                .collect();
            let partition = group.orbit_partition(&elements).unwrap();
            // Same partition of indices, up to bucket order.
            let mut finite = vec![usize::MAX; all.len()];
            for bucket in &partition {
                for &idx in bucket {
                    finite[idx] = bucket[0];
                }
            }
            for a in 0..all.len() {
                for b in 0..all.len() {
                    assert_eq!(
                        symbolic[a] == symbolic[b],
                        finite[a] == finite[b],
                        "char-0 and F_{q0} conjugacy disagree on matrices {a},{b}"
                    );
                }
            }
        }
    }

    #[test]
    fn catalog_n2_matches_hand_computation() {
        let e = engine();
        let cat = build_catalog(&e, 2).unwrap();
        assert_eq!(cat.class_count(), 2);
        assert_eq!(cat.family_count(), 3);
        // Classes: identity (point) and the regular unipotent (a line minus
        // a point, orbit q−1).
        assert_eq!(cat.unipotent[0].class_poly, MultiPoly::one());
        assert_eq!(cat.unipotent[1].class_poly, qpoly("q - 1"));
        assert_eq!(cat.unipotent[0].stabilizer_poly, qpoly("q^2 - q"));
        assert_eq!(cat.unipotent[1].stabilizer_poly, qpoly("q"));
        // The third family is the split torus diag(a, 1), a ∉ {0, 1}.
        let torus = &cat.families[2];
        assert_eq!(torus.base_poly, qpoly("q - 2"));
        assert_eq!(torus.orbit_poly, qpoly("q"));
        assert_eq!(torus.unipotent_index, 1);
        // Transition matrix in the basis (identity, regular):
        assert_eq!(cat.transition.matrix, vec![vec![1, 0], vec![-1, 1]]);
        assert!(cat.transition.leq[0][1], "identity lies in the closure of the regular class");
        assert!(!cat.transition.leq[1][0]);
    }

    #[test]
    fn family_counts_match_reference_tables() {
        let e = engine();
        assert_eq!(build_catalog(&e, 2).unwrap().family_count(), 3);
        assert_eq!(build_catalog(&e, 3).unwrap().family_count(), 12);
    }

    #[test]
    fn n1_catalog_is_trivial() {
        // For n = 1 the group is trivial: one unipotent class and one family
        // (the single diagonal pattern pins the only entry to 1).
        let e = engine();
        let cat = build_catalog(&e, 1).unwrap();
        assert_eq!(cat.class_count(), 1);
        assert_eq!(cat.family_count(), 1);
        assert_eq!(cat.unipotent[0].class_poly, MultiPoly::one());
        assert_eq!(cat.transition.matrix, vec![vec![1]]);
    }

    #[test]
    fn catalog_n4_counts_and_identities() {
        let e = engine();
        let cat = build_catalog(&e, 4).unwrap();
        assert_eq!(cat.class_count(), 16);
        assert_eq!(cat.family_count(), 61);
    }

    #[test]
    fn class_polys_match_oracle_orbit_sizes() {
        let e = engine();
        for n in [2usize, 3] {
            let cat = build_catalog(&e, n).unwrap();
            for q0 in [2u8, 3] {
                let group = FiniteGroupView::new(GroupKind::Ttilde(n), q0).unwrap();
                for class in &cat.unipotent {
                    let mut f = FMatrix::zero(n);
                    for i in 0..n {
                        for j in 0..n {
                            f.set(i, j, (class.representative[i][j].rem_euclid(q0 as i64)) as u8);
                        }
                    }
                    let oracle_size = group.class_size_of(&f).unwrap();
                    let symbolic = class.class_poly.eval_q(q0 as i64).unwrap();
                    assert_eq!(
                        symbolic,
                        BigInt::from(oracle_size),
                        "class {} size at q={q0}",
                        class.index
                    );
                }
            }
        }
    }

    #[test]
    fn orbit_stabilizer_and_measure_identities_n3() {
        let e = engine();
        let cat = build_catalog(&e, 3).unwrap();
        let group = group_class(3);
        for class in &cat.unipotent {
            assert_eq!(class.class_poly.mul(&class.stabilizer_poly), group);
        }
        let unipotent_total = cat
            .unipotent
            .iter()
            .fold(MultiPoly::zero(), |acc, c| acc.add(&c.class_poly));
        assert_eq!(unipotent_total, qpoly("q^3"));
        let total = cat.families.iter().fold(MultiPoly::zero(), |acc, f| {
            acc.add(&f.base_poly.mul(&f.orbit_poly))
        });
        assert_eq!(total, group);
    }

    #[test]
    fn transition_matrix_n3_properties() {
        let e = engine();
        let cat = build_catalog(&e, 3).unwrap();
        let m = cat.class_count();
        let t = &cat.transition;
        // Row identities (also enforced during the build).
        for i in 0..m {
            let mut acc = MultiPoly::zero();
            for j in 0..m {
                if t.matrix[i][j] != 0 {
                    let mut closure = MultiPoly::zero();
                    for k in 0..m {
                        if t.leq[k][j] {
                            closure = closure.add(&cat.unipotent[k].class_poly);
                        }
                    }
                    acc = acc.add(&closure.scale(&BigInt::from(t.matrix[i][j])));
                }
            }
            assert_eq!(acc, cat.unipotent[i].class_poly);
        }
        // C is supported on the partial order and is unimodular.
        for i in 0..m {
            for j in 0..m {
                if t.matrix[i][j] != 0 {
                    assert!(t.leq[j][i], "support outside the closure order");
                }
            }
            assert_eq!(t.matrix[i][i], 1);
        }
        assert_eq!(integer_det(&t.matrix).abs(), BigRational::one().numer().clone());
    }

    fn integer_det(m: &[Vec<i64>]) -> BigInt {
        let size = m.len();
        let mut a: Vec<Vec<BigRational>> = m
            .iter()
            .map(|row| row.iter().map(|&e| BigRational::from(BigInt::from(e))).collect())
            .collect();
        let mut det = BigRational::one();
        for col in 0..size {
            let Some(p) = (col..size).find(|&r| !a[r][col].is_zero()) else {
                return BigInt::zero();
            };
            if p != col {
                a.swap(p, col);
                det = -det;
            }
            det *= &a[col][col];
            for r in (col + 1)..size {
                if !a[r][col].is_zero() {
                    let factor = &a[r][col] / &a[col][col];
                    for c in col..size {
                        let delta = &factor * &a[col][c];
                        a[r][c] -= delta;
                    }
                }
            }
        }
        assert!(det.is_integer());
        det.numer().clone()
    }

    #[test]
    fn representatives_lie_on_their_closures_n3() {
        let e = engine();
        let cat = build_catalog(&e, 3).unwrap();
        for class in &cat.unipotent {
            let mut point = BTreeMap::new();
            for r in 1..=3usize {
                for c in r..=3usize {
                    if r == c && r == 3 {
                        continue;
                    }
                    point.insert(
                        matrix_coord(r, c),
                        BigInt::from(class.representative[r - 1][c - 1]),
                    );
                }
            }
            for g in class.closure_ideal.generators() {
                assert!(g.eval_int(&point).unwrap().is_zero());
            }
        }
    }

    #[test]
    fn catalog_cache_roundtrip() {
        let e = engine();
        let cat = build_catalog(&e, 2).unwrap();
        let dir = std::env::temp_dir().join(format!("class-catalog-test-{}", std::process::id()));
        let path = cat.save(&dir).unwrap();
        assert!(path.ends_with(ClassCatalog::cache_file_name(2)));
        let loaded = ClassCatalog::load(&dir, 2).unwrap().unwrap();
        assert_eq!(loaded, cat);
        // load_or_build must use the cache.
        let via_cache = load_or_build(&e, 2, Some(&dir)).unwrap();
        assert_eq!(via_cache, cat);
        assert!(ClassCatalog::load(&dir, 3).unwrap().is_none());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    #[ignore = "n = 5 catalog is expensive; run explicitly"]
    fn catalog_n5_counts() {
        let e = engine();
        let cat = build_catalog(&e, 5).unwrap();
        assert_eq!(cat.class_count(), 61);
        assert_eq!(cat.family_count(), 372);
    }
}
