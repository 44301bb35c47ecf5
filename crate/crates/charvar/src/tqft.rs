//! Genus and puncture operators of the surface field theory, in the basis of
//! unipotent conjugacy classes.
//!
//! For the triangular groups the virtual class of the representation variety
//! factors through three module maps: a unit map sending `1` to the class of
//! the identity-element inclusion, a genus map glueing one handle, and a
//! counit map reading off the coefficient over the identity. Commutators in
//! the triangular group are unipotent, so the genus map preserves the span of
//! the indicator classes `1_i` of the unipotent conjugacy classes `U_i`, and
//! its matrix has entries in `ℤ[q]`.
//!
//! The matrix is assembled from two coefficient tables, each computed cell by
//! cell with the stratification engine:
//!
//! * the *commutator table* `Ē_ij`, the class of pairs `(A, t)` where `A`
//!   ranges over the group, `t` over the diagonal parameters of the `j`-th
//!   conjugacy-class family, and the commutator `[A, ξ_j(t)]` of `A` with the
//!   family representative lies in the closure `U̅_i`;
//! * the *translation table* `F̄_ijk`, the class of `{g ∈ U̅_j : g·ξ_k ∈ U̅_i}`.
//!
//! Contracting both tables with the transition matrix (closed sets → strata)
//! gives `E = C·Ē` and `F_ijk = Σ C_im C_jℓ F̄_mℓk`. The first column of the
//! genus matrix is `V_i = Σ_j E_ij·[Orbit_j]`, and the general entry is
//! `Z_ij = (Σ_k F_ijk·V_k)/[U_i]`, the division being exact. The same `F`
//! tensor also assembles the genus matrix of the unipotent subgroup (with a
//! first column computed over the subgroup) and the puncture operator
//! `P^{(k)}_ij = F_ijk·[U_k]/[U_i]` used for twisted representation
//! varieties.
//!
//! Fixed-genus classes come from iterated matrix–vector products; closed
//! forms symbolic in the genus come from interpolation against the matrix
//! eigenvalues, which are monomials `q^a(q−1)^b`, with verification at
//! held-out genera.

use crate::classes::{block_value_var, group_class, ClassCatalog};
use crate::elim::matrix_coord;
use crate::poly::{GenusPoly, MultiPoly, Var};
use crate::strata::{StrataEngine, StratumSpec};
use crate::{Error, Result};
use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

/// On-disk format version of the coefficient-table cache.
pub const TQFT_TABLES_FORMAT_VERSION: u32 = 1;

/// The three group families the surface field theory covers: `T̃_n` (upper
/// triangular, invertible diagonal, last diagonal entry 1), `T_n` (upper
/// triangular, invertible diagonal) and `U_n` (unipotent).
///
/// `T_n ≅ G_m × T̃_n`, so `T̃_n` and `T_n` share one genus matrix and the
/// torus factor contributes `(q−1)^{2g}` at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TqftGroup {
    /// `T̃_n`: invertible diagonal with last entry pinned to 1.
    Ttilde,
    /// `T_n`: invertible diagonal.
    T,
    /// `U_n`: all diagonal entries 1.
    U,
}

impl fmt::Display for TqftGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TqftGroup::Ttilde => write!(f, "T~"),
            TqftGroup::T => write!(f, "T"),
            TqftGroup::U => write!(f, "U"),
        }
    }
}

/// Dimension of the group as a variety.
pub fn group_dimension(group: TqftGroup, n: usize) -> usize {
    let upper = n * (n - 1) / 2;
    match group {
        TqftGroup::U => upper,
        TqftGroup::Ttilde => upper + n - 1,
        TqftGroup::T => upper + n,
    }
}

/// `[U_n] = q^(n(n−1)/2)`, the class of the unipotent group.
fn unipotent_order(n: usize) -> MultiPoly {
    MultiPoly::q().pow((n * (n - 1) / 2) as u32)
}

// ---------------------------------------------------------------------------
// Polynomial matrices
// ---------------------------------------------------------------------------

type PolyMatrix = Vec<Vec<MultiPoly>>;

fn poly_mat_mul(a: &PolyMatrix, b: &PolyMatrix) -> PolyMatrix {
    let n = a.len();
    let mut out = vec![vec![MultiPoly::zero(); n]; n];
    for i in 0..n {
        for k in 0..n {
            if a[i][k].is_zero() {
                continue;
            }
            for j in 0..n {
                if b[k][j].is_zero() {
                    continue;
                }
                out[i][j] = out[i][j].add(&a[i][k].mul(&b[k][j]));
            }
        }
    }
    out
}

/// For upper-triangular `A` with invertible diagonal and `det = Π diag(A)`,
/// the polynomial matrix `X = det·A⁻¹` (also upper triangular), obtained by
/// back substitution; every division is exact.
fn upper_scaled_inverse(a: &PolyMatrix, det: &MultiPoly) -> Result<PolyMatrix> {
    let n = a.len();
    let mut x = vec![vec![MultiPoly::zero(); n]; n];
    for j in (0..n).rev() {
        x[j][j] = det.divide_exact(&a[j][j]).ok_or_else(|| {
            Error::Internal("triangular inverse: diagonal does not divide the determinant".into())
        })?;
        for i in (0..j).rev() {
            let mut s = MultiPoly::zero();
            for m in (i + 1)..=j {
                if !a[i][m].is_zero() && !x[m][j].is_zero() {
                    s = s.add(&a[i][m].mul(&x[m][j]));
                }
            }
            if s.is_zero() {
                continue;
            }
            x[i][j] = s.neg().divide_exact(&a[i][i]).ok_or_else(|| {
                Error::Internal("triangular inverse: back substitution is not exact".into())
            })?;
        }
    }
    Ok(x)
}

/// Map from the ambient matrix coordinates `y_{r}_{c}` to 0-based positions.
fn coordinate_positions(n: usize) -> BTreeMap<Var, (usize, usize)> {
    let mut map = BTreeMap::new();
    for r in 1..=n {
        for c in r..=n {
            if r == n && c == n {
                continue;
            }
            map.insert(matrix_coord(r, c), (r - 1, c - 1));
        }
    }
    map
}

/// Evaluates a closure-ideal generator on a matrix whose entries are the
/// polynomials `m[r][c] / den`, clearing the denominator (which is a unit on
/// every stratum where this is used). The result vanishes exactly where the
/// generator vanishes on the substituted matrix.
fn eval_on_matrix(
    gen: &MultiPoly,
    m: &PolyMatrix,
    den: &MultiPoly,
    positions: &BTreeMap<Var, (usize, usize)>,
) -> Result<MultiPoly> {
    let mut acc = gen.clone();
    for v in gen.vars() {
        if let Some(&(r, c)) = positions.get(&v) {
            acc = acc.substitute(v, &m[r][c], den)?;
        }
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Table cells
// ---------------------------------------------------------------------------

/// Diagonal variable of the group element `A` (row `i`, 1-based, `i < n`).
fn a_diag_var(i: usize) -> Var {
    Var::intern(&format!("a_{i}"))
}

/// Strictly-upper variable of the group element `A` (1-based `r < c`).
fn a_upper_var(r: usize, c: usize) -> Var {
    Var::intern(&format!("a_{r}_{c}"))
}

/// Strictly-upper variable of the unipotent element `g` in translation-table
/// cells (1-based `r < c`).
fn g_upper_var(r: usize, c: usize) -> Var {
    Var::intern(&format!("u_{r}_{c}"))
}

/// The stratum of one commutator-table cell `(i, j)`: pairs `(A, t)` with `A`
/// in `T̃_n` (or `U_n` when `unipotent_group`), `t` in the parameter base of
/// family `j`, and `[A, ξ_j(t)]` in the closure `U̅_i`. The commutator is
/// `A·R·(det_A·A⁻¹)·(det_R·R⁻¹) / (det_A·det_R)` with the unit denominator
/// cleared into the equations.
fn ebar_spec(
    catalog: &ClassCatalog,
    i: usize,
    j: usize,
    unipotent_group: bool,
) -> Result<StratumSpec> {
    let n = catalog.n;
    let fam = &catalog.families[j];
    let xi = &catalog.unipotent[fam.unipotent_index - 1].representative;

    // The group element A.
    let mut a = vec![vec![MultiPoly::zero(); n]; n];
    let mut vars: Vec<Var> = Vec::new();
    let mut nonzero: Vec<MultiPoly> = Vec::new();
    for r in 0..n {
        if r + 1 < n && !unipotent_group {
            let v = a_diag_var(r + 1);
            vars.push(v);
            nonzero.push(MultiPoly::var(v));
            a[r][r] = MultiPoly::var(v);
        } else {
            a[r][r] = MultiPoly::one();
        }
        for c in (r + 1)..n {
            let v = a_upper_var(r + 1, c + 1);
            vars.push(v);
            a[r][c] = MultiPoly::var(v);
        }
    }

    // The family representative R = D(t) + ξ − 1: free blocks of the diagonal
    // pattern carry their parameter variable, the block containing n is 1.
    let free = fam.pattern.free_blocks(n);
    let mut r_mat = vec![vec![MultiPoly::zero(); n]; n];
    let mut diag_of_pos: Vec<MultiPoly> = vec![MultiPoly::one(); n];
    for block in &free {
        let v = block_value_var(block[0]);
        for &pos in block.iter() {
            diag_of_pos[pos - 1] = MultiPoly::var(v);
        }
    }
    for (r, d) in diag_of_pos.iter().enumerate() {
        r_mat[r][r] = d.clone();
        for c in (r + 1)..n {
            if xi[r][c] != 0 {
                r_mat[r][c] = MultiPoly::constant(BigInt::from(xi[r][c]));
            }
        }
    }
    vars.extend_from_slice(fam.base.vars());
    nonzero.extend(fam.base.nonzero().iter().cloned());

    // Commutator with cleared denominators.
    let det_a = a.iter().enumerate().fold(MultiPoly::one(), |acc, (r, row)| {
        acc.mul(&row[r])
    });
    let det_r = r_mat
        .iter()
        .enumerate()
        .fold(MultiPoly::one(), |acc, (r, row)| acc.mul(&row[r]));
    let inv_a = upper_scaled_inverse(&a, &det_a)?;
    let inv_r = upper_scaled_inverse(&r_mat, &det_r)?;
    let num = poly_mat_mul(&poly_mat_mul(&a, &r_mat), &poly_mat_mul(&inv_a, &inv_r));
    let den = det_a.mul(&det_r);

    let positions = coordinate_positions(n);
    let mut zero = Vec::new();
    for gen in catalog.unipotent[i].closure_ideal.generators() {
        let cleared = eval_on_matrix(gen, &num, &den, &positions)?;
        if !cleared.is_zero() {
            zero.push(cleared);
        }
    }
    StratumSpec::new(vars, zero, nonzero)
}

/// The stratum of one translation-table cell `(i, j, k)`:
/// `{g unipotent : g ∈ U̅_j and g·ξ_k ∈ U̅_i}`.
fn fbar_spec(catalog: &ClassCatalog, i: usize, j: usize, k: usize) -> Result<StratumSpec> {
    let n = catalog.n;
    let mut g = vec![vec![MultiPoly::zero(); n]; n];
    let mut vars = Vec::new();
    for r in 0..n {
        g[r][r] = MultiPoly::one();
        for c in (r + 1)..n {
            let v = g_upper_var(r + 1, c + 1);
            vars.push(v);
            g[r][c] = MultiPoly::var(v);
        }
    }
    let xi = &catalog.unipotent[k].representative;
    let mut g_xi = vec![vec![MultiPoly::zero(); n]; n];
    for r in 0..n {
        for c in r..n {
            let mut s = MultiPoly::zero();
            for m in r..=c {
                if xi[m][c] != 0 && !g[r][m].is_zero() {
                    s = s.add(&g[r][m].scale(&BigInt::from(xi[m][c])));
                }
            }
            g_xi[r][c] = s;
        }
    }

    let one = MultiPoly::one();
    let positions = coordinate_positions(n);
    let mut zero = Vec::new();
    for gen in catalog.unipotent[j].closure_ideal.generators() {
        let p = eval_on_matrix(gen, &g, &one, &positions)?;
        if !p.is_zero() {
            zero.push(p);
        }
    }
    for gen in catalog.unipotent[i].closure_ideal.generators() {
        let p = eval_on_matrix(gen, &g_xi, &one, &positions)?;
        if !p.is_zero() {
            zero.push(p);
        }
    }
    StratumSpec::new(vars, zero, Vec::new())
}

/// Wraps an engine error with the identity of the failing table cell,
/// preserving the error kind.
fn cell_error(table: &str, cell: &[usize], e: Error) -> Error {
    let ids: Vec<String> = cell.iter().map(|v| v.to_string()).collect();
    let tag = format!("{table} cell ({})", ids.join(", "));
    match e {
        Error::AlgorithmFailure(m) => Error::AlgorithmFailure(format!("{tag}: {m}")),
        Error::ResourceBudget(m) => Error::ResourceBudget(format!("{tag}: {m}")),
        Error::Parse(m) => Error::Parse(format!("{tag}: {m}")),
        Error::InvalidInput(m) => Error::InvalidInput(format!("{tag}: {m}")),
        Error::Internal(m) => Error::Internal(format!("{tag}: {m}")),
    }
}

/// Computes the commutator table `Ē` of `T̃_n` (rows: unipotent classes,
/// columns: conjugacy-class families). Cells are independent parallel jobs.
pub fn compute_ebar(engine: &StrataEngine, catalog: &ClassCatalog) -> Result<Vec<Vec<MultiPoly>>> {
    let m = catalog.class_count();
    let nf = catalog.family_count();
    let cells: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (0..nf).map(move |j| (i, j)))
        .collect();
    let flat: Vec<MultiPoly> = cells
        .par_iter()
        .map(|&(i, j)| {
            let spec = ebar_spec(catalog, i, j, false)
                .map_err(|e| cell_error("commutator table", &[i + 1, j + 1], e))?;
            engine
                .virtual_class(&spec)
                .map(|r| r.value)
                .map_err(|e| cell_error("commutator table", &[i + 1, j + 1], e))
        })
        .collect::<Result<_>>()?;
    Ok(flat.chunks(nf).map(|c| c.to_vec()).collect())
}

/// Commutator table of the unipotent subgroup `U_n` (columns: unipotent
/// classes; no diagonal parameters).
pub fn compute_ebar_unipotent(
    engine: &StrataEngine,
    catalog: &ClassCatalog,
) -> Result<Vec<Vec<MultiPoly>>> {
    let m = catalog.class_count();
    let cells: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .collect();
    let flat: Vec<MultiPoly> = cells
        .par_iter()
        .map(|&(i, j)| {
            let spec = ebar_spec(catalog, i, j, true)
                .map_err(|e| cell_error("unipotent commutator table", &[i + 1, j + 1], e))?;
            engine
                .virtual_class(&spec)
                .map(|r| r.value)
                .map_err(|e| cell_error("unipotent commutator table", &[i + 1, j + 1], e))
        })
        .collect::<Result<_>>()?;
    Ok(flat.chunks(m).map(|c| c.to_vec()).collect())
}

/// Computes the translation table `F̄` (`F̄[i][j][k] = [{g ∈ U̅_j : g·ξ_k ∈ U̅_i}]`).
pub fn compute_fbar(
    engine: &StrataEngine,
    catalog: &ClassCatalog,
) -> Result<Vec<Vec<Vec<MultiPoly>>>> {
    let m = catalog.class_count();
    let cells: Vec<(usize, usize, usize)> = (0..m)
        .flat_map(|i| (0..m).flat_map(move |j| (0..m).map(move |k| (i, j, k))))
        .collect();
    let flat: Vec<MultiPoly> = cells
        .par_iter()
        .map(|&(i, j, k)| {
            let spec = fbar_spec(catalog, i, j, k)
                .map_err(|e| cell_error("translation table", &[i + 1, j + 1, k + 1], e))?;
            engine
                .virtual_class(&spec)
                .map(|r| r.value)
                .map_err(|e| cell_error("translation table", &[i + 1, j + 1, k + 1], e))
        })
        .collect::<Result<_>>()?;
    Ok(flat
        .chunks(m * m)
        .map(|plane| plane.chunks(m).map(|c| c.to_vec()).collect())
        .collect())
}

// ---------------------------------------------------------------------------
// Coefficient tables
// ---------------------------------------------------------------------------

/// The two raw tables together with their transition-matrix contractions.
///
/// `ebar`/`fbar` are classes of *closed* loci; `e`/`f` are the contracted
/// stratum versions (`E = C·Ē`, `F_ijk = Σ C_im C_jℓ F̄_mℓk`). The
/// `*_unipotent` pair is the commutator table of the unipotent subgroup,
/// which shares `F` with the full group.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientTables {
    pub n: usize,
    pub ebar: Vec<Vec<MultiPoly>>,
    pub fbar: Vec<Vec<Vec<MultiPoly>>>,
    pub ebar_unipotent: Vec<Vec<MultiPoly>>,
    pub e: Vec<Vec<MultiPoly>>,
    pub f: Vec<Vec<Vec<MultiPoly>>>,
    pub e_unipotent: Vec<Vec<MultiPoly>>,
}

fn contract_rows(c: &[Vec<i64>], table: &[Vec<MultiPoly>]) -> Vec<Vec<MultiPoly>> {
    let m = c.len();
    let cols = table[0].len();
    let mut out = vec![vec![MultiPoly::zero(); cols]; m];
    for i in 0..m {
        for (k, &coef) in c[i].iter().enumerate() {
            if coef == 0 {
                continue;
            }
            let scale = BigInt::from(coef);
            for j in 0..cols {
                if !table[k][j].is_zero() {
                    out[i][j] = out[i][j].add(&table[k][j].scale(&scale));
                }
            }
        }
    }
    out
}

impl CoefficientTables {
    /// Computes all raw cells with the stratification engine, contracts them
    /// and verifies the marginal identities.
    pub fn compute(engine: &StrataEngine, catalog: &ClassCatalog) -> Result<CoefficientTables> {
        let ebar = compute_ebar(engine, catalog)?;
        let ebar_unipotent = compute_ebar_unipotent(engine, catalog)?;
        let fbar = compute_fbar(engine, catalog)?;
        CoefficientTables::from_raw(catalog, ebar, fbar, ebar_unipotent)
    }

    /// Contracts raw tables and runs the verification identities.
    fn from_raw(
        catalog: &ClassCatalog,
        ebar: Vec<Vec<MultiPoly>>,
        fbar: Vec<Vec<Vec<MultiPoly>>>,
        ebar_unipotent: Vec<Vec<MultiPoly>>,
    ) -> Result<CoefficientTables> {
        let c = &catalog.transition.matrix;
        let m = catalog.class_count();
        let e = contract_rows(c, &ebar);
        let e_unipotent = contract_rows(c, &ebar_unipotent);
        // F_ijk = Σ_{m,ℓ} C_im C_jℓ F̄_mℓk: contract the first index, then the
        // second.
        let mut half: Vec<Vec<Vec<MultiPoly>>> = Vec::with_capacity(m);
        for i in 0..m {
            let mut plane = vec![vec![MultiPoly::zero(); m]; m];
            for (mm, &ci) in c[i].iter().enumerate() {
                if ci == 0 {
                    continue;
                }
                let scale = BigInt::from(ci);
                for l in 0..m {
                    for k in 0..m {
                        if !fbar[mm][l][k].is_zero() {
                            plane[l][k] = plane[l][k].add(&fbar[mm][l][k].scale(&scale));
                        }
                    }
                }
            }
            half.push(plane);
        }
        let mut f: Vec<Vec<Vec<MultiPoly>>> = Vec::with_capacity(m);
        for half_i in &half {
            let mut plane = vec![vec![MultiPoly::zero(); m]; m];
            for (j, row) in plane.iter_mut().enumerate() {
                for (l, &cj) in c[j].iter().enumerate() {
                    if cj == 0 {
                        continue;
                    }
                    let scale = BigInt::from(cj);
                    for (k, slot) in row.iter_mut().enumerate() {
                        if !half_i[l][k].is_zero() {
                            *slot = slot.add(&half_i[l][k].scale(&scale));
                        }
                    }
                }
            }
            f.push(plane);
        }
        let tables = CoefficientTables {
            n: catalog.n,
            ebar,
            fbar,
            ebar_unipotent,
            e,
            f,
            e_unipotent,
        };
        tables.verify(catalog)?;
        Ok(tables)
    }

    /// The marginal identities every valid table satisfies:
    /// `Σ_i E_ij = [G]·[base_j]`, `Σ_i F_ijk = [U_j]`, `Σ_j F_ijk = [U_i]`,
    /// and the unipotent-group analogue of the first.
    pub fn verify(&self, catalog: &ClassCatalog) -> Result<()> {
        let m = catalog.class_count();
        let group = group_class(self.n);
        let group_u = unipotent_order(self.n);
        for (j, fam) in catalog.families.iter().enumerate() {
            let total: MultiPoly = (0..m)
                .fold(MultiPoly::zero(), |acc, i| acc.add(&self.e[i][j]));
            let want = group.mul(&fam.base_poly);
            if total != want {
                return Err(Error::Internal(format!(
                    "commutator-table column {} sums to {total}, expected [G]*[base] = {want}",
                    j + 1
                )));
            }
        }
        for j in 0..m {
            let total: MultiPoly = (0..m)
                .fold(MultiPoly::zero(), |acc, i| acc.add(&self.e_unipotent[i][j]));
            if total != group_u {
                return Err(Error::Internal(format!(
                    "unipotent commutator-table column {} sums to {total}, expected {group_u}",
                    j + 1
                )));
            }
        }
        for k in 0..m {
            for j in 0..m {
                let total: MultiPoly = (0..m)
                    .fold(MultiPoly::zero(), |acc, i| acc.add(&self.f[i][j][k]));
                let want = &catalog.unipotent[j].class_poly;
                if &total != want {
                    return Err(Error::Internal(format!(
                        "translation tensor: Σ_i F[i][{}][{}] = {total}, expected [U_{}] = {want}",
                        j + 1,
                        k + 1,
                        j + 1
                    )));
                }
            }
            for i in 0..m {
                let total: MultiPoly = (0..m)
                    .fold(MultiPoly::zero(), |acc, j| acc.add(&self.f[i][j][k]));
                let want = &catalog.unipotent[i].class_poly;
                if &total != want {
                    return Err(Error::Internal(format!(
                        "translation tensor: Σ_j F[{}][j][{}] = {total}, expected [U_{}] = {want}",
                        i + 1,
                        k + 1,
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// First column of the genus map: the classes `V_i` of
    /// `{(A, B) ∈ G² : [A, B] ∈ U_i}`, obtained by fibering over the
    /// conjugacy class of `B`.
    pub fn first_column(&self, catalog: &ClassCatalog, group: TqftGroup) -> Vec<MultiPoly> {
        let m = catalog.class_count();
        match group {
            TqftGroup::U => (0..m)
                .map(|i| {
                    (0..m).fold(MultiPoly::zero(), |acc, j| {
                        acc.add(&self.e_unipotent[i][j].mul(&catalog.unipotent[j].class_poly))
                    })
                })
                .collect(),
            _ => (0..m)
                .map(|i| {
                    catalog
                        .families
                        .iter()
                        .enumerate()
                        .fold(MultiPoly::zero(), |acc, (j, fam)| {
                            acc.add(&self.e[i][j].mul(&fam.orbit_poly))
                        })
                })
                .collect(),
        }
    }

    pub fn cache_file_name(n: usize) -> String {
        format!("tqft-n{n}-v{TQFT_TABLES_FORMAT_VERSION}.json")
    }

    /// Write the raw tables into `dir` (created if needed).
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)
            .map_err(|e| Error::InvalidInput(format!("cannot create cache dir: {e}")))?;
        let path = dir.join(Self::cache_file_name(self.n));
        let repr = TablesRepr {
            version: TQFT_TABLES_FORMAT_VERSION,
            n: self.n,
            ebar: strings2(&self.ebar),
            fbar: self.fbar.iter().map(|p| strings2(p)).collect(),
            ebar_unipotent: strings2(&self.ebar_unipotent),
        };
        let json = serde_json::to_string(&repr)
            .map_err(|e| Error::Internal(format!("table serialization failed: {e}")))?;
        fs::write(&path, json)
            .map_err(|e| Error::InvalidInput(format!("cannot write cache file: {e}")))?;
        Ok(path)
    }

    /// Load cached tables for `catalog` from `dir`; `Ok(None)` if absent or
    /// from a different format version. Loaded tables are re-contracted and
    /// re-verified.
    pub fn load(dir: &Path, catalog: &ClassCatalog) -> Result<Option<CoefficientTables>> {
        let path = dir.join(Self::cache_file_name(catalog.n));
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
        let repr: TablesRepr = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("corrupt table cache {}: {e}", path.display())))?;
        if repr.version != TQFT_TABLES_FORMAT_VERSION || repr.n != catalog.n {
            return Ok(None);
        }
        let ebar = polys2(&repr.ebar)?;
        let fbar = repr
            .fbar
            .iter()
            .map(|p| polys2(p))
            .collect::<Result<Vec<_>>>()?;
        let ebar_unipotent = polys2(&repr.ebar_unipotent)?;
        let m = catalog.class_count();
        let nf = catalog.family_count();
        if ebar.len() != m
            || ebar.iter().any(|r| r.len() != nf)
            || fbar.len() != m
            || fbar.iter().any(|p| p.len() != m || p.iter().any(|r| r.len() != m))
            || ebar_unipotent.len() != m
            || ebar_unipotent.iter().any(|r| r.len() != m)
        {
            return Err(Error::Parse(format!(
                "table cache {} has wrong dimensions",
                path.display()
            )));
        }
        CoefficientTables::from_raw(catalog, ebar, fbar, ebar_unipotent).map(Some)
    }

    /// Load from cache or compute (and cache) the tables.
    pub fn load_or_compute(
        engine: &StrataEngine,
        catalog: &ClassCatalog,
        cache_dir: Option<&Path>,
    ) -> Result<CoefficientTables> {
        if let Some(dir) = cache_dir {
            if let Some(tables) = CoefficientTables::load(dir, catalog)? {
                return Ok(tables);
            }
        }
        let tables = CoefficientTables::compute(engine, catalog)?;
        if let Some(dir) = cache_dir {
            tables.save(dir)?;
        }
        Ok(tables)
    }
}

#[derive(Serialize, Deserialize)]
struct TablesRepr {
    version: u32,
    n: usize,
    ebar: Vec<Vec<String>>,
    fbar: Vec<Vec<Vec<String>>>,
    ebar_unipotent: Vec<Vec<String>>,
}

fn strings2(t: &[Vec<MultiPoly>]) -> Vec<Vec<String>> {
    t.iter()
        .map(|row| row.iter().map(|p| p.to_string()).collect())
        .collect()
}

fn polys2(t: &[Vec<String>]) -> Result<Vec<Vec<MultiPoly>>> {
    t.iter()
        .map(|row| row.iter().map(|s| crate::poly::parse_poly(s)).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// Matrices
// ---------------------------------------------------------------------------

/// Which field-theory operator a matrix realizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixKind {
    /// One handle of the surface.
    Genus,
    /// One puncture with holonomy in the unipotent class of this 1-based
    /// index.
    Parabolic(usize),
}

/// A field-theory operator in the basis `1_1, …, 1_M` of unipotent-class
/// indicators: `op(1_j) = Σ_i entries[i][j]·1_i` with entries in `ℤ[q]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TqftMatrix {
    pub n: usize,
    /// Base group of the operator (`Ttilde`, shared with `T`, or `U`).
    pub group: TqftGroup,
    pub kind: MatrixKind,
    pub entries: Vec<Vec<MultiPoly>>,
}

impl TqftMatrix {
    pub fn size(&self) -> usize {
        self.entries.len()
    }

    /// Matrix–vector product (the operator applied to a coefficient vector).
    pub fn apply(&self, v: &[MultiPoly]) -> Vec<MultiPoly> {
        self.entries
            .iter()
            .map(|row| {
                row.iter()
                    .zip(v)
                    .filter(|(e, x)| !e.is_zero() && !x.is_zero())
                    .fold(MultiPoly::zero(), |acc, (e, x)| acc.add(&e.mul(x)))
            })
            .collect()
    }

    /// Integer specialization of the matrix at `q = q0`.
    fn eval_q(&self, q0: i64) -> Result<Vec<Vec<BigInt>>> {
        self.entries
            .iter()
            .map(|row| row.iter().map(|p| p.eval_q(q0)).collect())
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    n: usize,
    group: TqftGroup,
    kind: MatrixKind,
    entries: Vec<Vec<String>>,
}

impl Serialize for TqftMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixRepr {
            n: self.n,
            group: self.group,
            kind: self.kind,
            entries: strings2(&self.entries),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TqftMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = MatrixRepr::deserialize(d)?;
        Ok(TqftMatrix {
            n: repr.n,
            group: repr.group,
            kind: repr.kind,
            entries: polys2(&repr.entries).map_err(serde::de::Error::custom)?,
        })
    }
}

/// Assembles the genus matrix `Z_ij = (Σ_k F_ijk·V_k)/[U_i]` for the
/// triangular group (`Ttilde`, also used by `T`) or the unipotent subgroup,
/// and checks the column-mass identity `Σ_i Z_ij·[U_i] = [G]²·[U_j]`.
pub fn assemble_genus_matrix(
    catalog: &ClassCatalog,
    tables: &CoefficientTables,
    group: TqftGroup,
) -> Result<TqftMatrix> {
    let base = match group {
        TqftGroup::U => TqftGroup::U,
        _ => TqftGroup::Ttilde,
    };
    let m = catalog.class_count();
    let v = tables.first_column(catalog, base);
    let mut entries = vec![vec![MultiPoly::zero(); m]; m];
    for i in 0..m {
        let unit = &catalog.unipotent[i].class_poly;
        for j in 0..m {
            let mass = (0..m).fold(MultiPoly::zero(), |acc, k| {
                if tables.f[i][j][k].is_zero() || v[k].is_zero() {
                    acc
                } else {
                    acc.add(&tables.f[i][j][k].mul(&v[k]))
                }
            });
            entries[i][j] = mass.divide_exact(unit).ok_or_else(|| {
                Error::Internal(format!(
                    "genus entry ({}, {}): {mass} is not divisible by [U_{}] = {unit}",
                    i + 1,
                    j + 1,
                    i + 1
                ))
            })?;
        }
    }
    let matrix = TqftMatrix {
        n: catalog.n,
        group: base,
        kind: MatrixKind::Genus,
        entries,
    };
    let g_class = match base {
        TqftGroup::U => unipotent_order(catalog.n),
        _ => group_class(catalog.n),
    };
    let g2 = g_class.mul(&g_class);
    for j in 0..m {
        let mass = (0..m).fold(MultiPoly::zero(), |acc, i| {
            acc.add(&matrix.entries[i][j].mul(&catalog.unipotent[i].class_poly))
        });
        let want = g2.mul(&catalog.unipotent[j].class_poly);
        if mass != want {
            return Err(Error::Internal(format!(
                "genus column {} has mass {mass}, expected [G]²·[U_{}] = {want}",
                j + 1,
                j + 1
            )));
        }
    }
    Ok(matrix)
}

/// Assembles the puncture operator at the unipotent class `k` (1-based):
/// `P_ij = F_ijk·[U_k]/[U_i]`, each division exact.
pub fn assemble_parabolic_matrix(
    catalog: &ClassCatalog,
    tables: &CoefficientTables,
    k: usize,
) -> Result<TqftMatrix> {
    let m = catalog.class_count();
    if k == 0 || k > m {
        return Err(Error::InvalidInput(format!(
            "puncture class index {k} out of range 1..={m}"
        )));
    }
    let unit_k = &catalog.unipotent[k - 1].class_poly;
    let mut entries = vec![vec![MultiPoly::zero(); m]; m];
    for i in 0..m {
        let unit_i = &catalog.unipotent[i].class_poly;
        for j in 0..m {
            let mass = tables.f[i][j][k - 1].mul(unit_k);
            entries[i][j] = mass.divide_exact(unit_i).ok_or_else(|| {
                Error::Internal(format!(
                    "puncture entry ({}, {}): {mass} is not divisible by [U_{}] = {unit_i}",
                    i + 1,
                    j + 1,
                    i + 1
                ))
            })?;
        }
    }
    Ok(TqftMatrix {
        n: catalog.n,
        group: TqftGroup::Ttilde,
        kind: MatrixKind::Parabolic(k),
        entries,
    })
}

// ---------------------------------------------------------------------------
// Eigenvalues and closed-form reconstruction
// ---------------------------------------------------------------------------

/// One eigenvalue monomial `q^(q_exp)·(q−1)^(qm1_exp)` of a genus matrix,
/// with its algebraic multiplicity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EigenMonomial {
    pub q_exp: i64,
    pub qm1_exp: i64,
    pub multiplicity: usize,
}

/// Characteristic polynomial (monic, coefficients of `λ^m, λ^{m−1}, …, λ^0`)
/// of an integer matrix, by the Faddeev–LeVerrier recurrence.
fn bigint_charpoly(a: &[Vec<BigInt>]) -> Result<Vec<BigInt>> {
    let m = a.len();
    let mut coeffs = vec![BigInt::one()];
    if m == 0 {
        return Ok(coeffs);
    }
    let mut mk = a.to_vec();
    for k in 1..=m {
        let trace: BigInt = (0..m).map(|i| mk[i][i].clone()).sum();
        let (c, rem) = (-trace).div_rem(&BigInt::from(k));
        if !rem.is_zero() {
            return Err(Error::Internal(
                "characteristic polynomial: trace division is not exact".into(),
            ));
        }
        coeffs.push(c.clone());
        if k == m {
            break;
        }
        // M_{k+1} = A·(M_k + c_k·I)
        for i in 0..m {
            mk[i][i] += &c;
        }
        let mut next = vec![vec![BigInt::zero(); m]; m];
        for i in 0..m {
            for l in 0..m {
                if a[i][l].is_zero() {
                    continue;
                }
                for j in 0..m {
                    if !mk[l][j].is_zero() {
                        next[i][j] += &a[i][l] * &mk[l][j];
                    }
                }
            }
        }
        mk = next;
    }
    Ok(coeffs)
}

/// Divides out the root `r` as many times as possible; returns the
/// multiplicity (the coefficient vector is monic, most significant first).
fn peel_integer_root(coeffs: &mut Vec<BigInt>, r: &BigInt) -> usize {
    let mut mult = 0;
    loop {
        if coeffs.len() == 1 {
            return mult;
        }
        // Synthetic division by (λ − r).
        let mut quo = Vec::with_capacity(coeffs.len() - 1);
        let mut carry = BigInt::zero();
        for c in coeffs.iter() {
            carry = c + &carry * r;
            quo.push(carry.clone());
        }
        let rem = quo.pop().expect("length ≥ 1");
        if !rem.is_zero() {
            return mult;
        }
        *coeffs = quo;
        mult += 1;
    }
}

/// Finds the eigenvalues of a genus matrix among the monomials `q^a(q−1)^b`
/// with `0 ≤ a ≤ a_max`, `0 ≤ b ≤ b_max`, by factoring the characteristic
/// polynomial at two integer specializations of q (where distinct monomials
/// take distinct values). Fails if the characteristic polynomial has any
/// other root — the caller then falls back to fixed-genus evaluation.
pub fn matrix_eigenvalue_monomials(
    matrix: &TqftMatrix,
    a_max: i64,
    b_max: i64,
) -> Result<Vec<EigenMonomial>> {
    let mut per_prime: Vec<Vec<EigenMonomial>> = Vec::new();
    for q0 in [3i64, 5] {
        let mut coeffs = bigint_charpoly(&matrix.eval_q(q0)?)?;
        let mut found = Vec::new();
        for a in 0..=a_max {
            for b in 0..=b_max {
                let lam = BigInt::from(q0).pow(a as u32) * BigInt::from(q0 - 1).pow(b as u32);
                let mult = peel_integer_root(&mut coeffs, &lam);
                if mult > 0 {
                    found.push(EigenMonomial {
                        q_exp: a,
                        qm1_exp: b,
                        multiplicity: mult,
                    });
                }
            }
        }
        if coeffs.len() > 1 {
            return Err(Error::AlgorithmFailure(format!(
                "genus-matrix eigenvalues at q = {q0} are not all of the form \
                 q^a(q-1)^b with a ≤ {a_max}, b ≤ {b_max}: residual degree {}",
                coeffs.len() - 1
            )));
        }
        found.sort_by_key(|e| (e.q_exp, e.qm1_exp));
        per_prime.push(found);
    }
    if per_prime[0] != per_prime[1] {
        return Err(Error::Internal(
            "eigenvalue extraction disagrees between integer specializations".into(),
        ));
    }
    Ok(per_prime.remove(0))
}

/// Factors out all powers of `q` and `q−1`; returns `(α, β, rest)` with
/// `p = q^α·(q−1)^β·rest`. The input must be nonzero.
fn strip_q_qm1(p: &MultiPoly) -> (i64, i64, MultiPoly) {
    debug_assert!(!p.is_zero());
    let q = MultiPoly::q();
    let qm1 = MultiPoly::q_minus_1();
    let mut alpha = 0;
    let mut beta = 0;
    let mut rest = p.clone();
    while let Some(d) = rest.divide_exact(&q) {
        rest = d;
        alpha += 1;
    }
    while let Some(d) = rest.divide_exact(&qm1) {
        rest = d;
        beta += 1;
    }
    (alpha, beta, rest)
}

/// Reconstructs a closed form `Σ_t c_t·(q^{a_t}(q−1)^{b_t})^g` from values at
/// consecutive genera, where the candidate exponent pairs `(a_t, b_t)` are
/// given (normally the matrix eigenvalues). The coefficients `c_t` live in
/// `ℤ[q, q⁻¹, (q−1)⁻¹]`; each is isolated by applying the annihilators
/// `w ↦ w_{g+1} − λ_s·w_g` of all other candidates, and the assembled form is
/// verified against every supplied value. Underdetermined or inconsistent
/// data is an [`Error::AlgorithmFailure`].
pub fn reconstruct_closed_form(
    values: &[(usize, MultiPoly)],
    candidates: &[(i64, i64)],
) -> Result<GenusPoly> {
    let mut values: Vec<(usize, MultiPoly)> = values.to_vec();
    values.sort_by_key(|(g, _)| *g);
    if values.is_empty() {
        return Err(Error::InvalidInput("no genus values supplied".into()));
    }
    let g0 = values[0].0;
    for (offset, (g, _)) in values.iter().enumerate() {
        if *g != g0 + offset {
            return Err(Error::InvalidInput(
                "genus values must be at consecutive genera".into(),
            ));
        }
    }
    let mut cands: Vec<(i64, i64)> = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    if cands.iter().any(|&(a, b)| a < 0 || b < 0) {
        return Err(Error::InvalidInput(
            "candidate exponents must be non-negative".into(),
        ));
    }
    let r = cands.len();
    if values.len() < r {
        return Err(Error::AlgorithmFailure(format!(
            "underdetermined reconstruction: {} values for {r} candidate eigenvalues",
            values.len()
        )));
    }

    let q = MultiPoly::q();
    let qm1 = MultiPoly::q_minus_1();
    let lambda: Vec<MultiPoly> = cands
        .iter()
        .map(|&(a, b)| q.pow(a as u32).mul(&qm1.pow(b as u32)))
        .collect();

    let mut closed = GenusPoly::zero();
    for t in 0..r {
        // Apply Π_{s≠t} (shift − λ_s) to the value sequence; what survives is
        // c_t·λ_t^g·Π_{s≠t}(λ_t − λ_s).
        let mut seq: Vec<MultiPoly> = values.iter().map(|(_, v)| v.clone()).collect();
        for s in 0..r {
            if s == t {
                continue;
            }
            seq = (0..seq.len() - 1)
                .map(|m| seq[m + 1].sub(&lambda[s].mul(&seq[m])))
                .collect();
        }
        let numerator = &seq[0];
        if numerator.is_zero() {
            continue;
        }
        let mut denom = MultiPoly::one();
        for s in 0..r {
            if s != t {
                denom = denom.mul(&lambda[t].sub(&lambda[s]));
            }
        }
        let (alpha, beta, rest) = strip_q_qm1(&denom);
        let core = numerator.divide_exact(&rest).ok_or_else(|| {
            Error::AlgorithmFailure(format!(
                "reconstruction coefficient for q^{}·(q-1)^{} is not in ℤ[q, q⁻¹, (q-1)⁻¹]",
                cands[t].0, cands[t].1
            ))
        })?;
        let (a_t, b_t) = cands[t];
        let contribution = GenusPoly::from_qpoly(&core)?.mul_exp(
            a_t,
            -alpha - a_t * g0 as i64,
            b_t,
            -beta - b_t * g0 as i64,
        );
        closed = closed.add(&contribution);
    }

    for (g, v) in &values {
        let got = closed.evaluate_at_genus(*g as i64);
        let ok = match got.to_poly() {
            Some(p) => &p == v,
            None => false,
        };
        if !ok {
            return Err(Error::AlgorithmFailure(format!(
                "reconstructed closed form disagrees with the value at genus {g}"
            )));
        }
    }
    Ok(closed)
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// A representation-variety class: either the value at one fixed genus or a
/// closed form symbolic in the genus. `FixedFallback` reports a requested
/// closed form that could not be reconstructed.
#[derive(Clone, Debug, PartialEq)]
pub enum RepresentationVarietyClass {
    Fixed(MultiPoly),
    Symbolic(GenusPoly),
    /// Closed-form reconstruction failed; the fixed-genus value is returned
    /// together with the reason.
    FixedFallback { value: MultiPoly, reason: String },
}

/// Catalog, coefficient tables and the two assembled genus matrices for one
/// size `n` — everything needed to evaluate representation-variety classes.
pub struct TqftPipeline {
    catalog: ClassCatalog,
    tables: CoefficientTables,
    genus_triangular: TqftMatrix,
    genus_unipotent: TqftMatrix,
}

impl TqftPipeline {
    /// Build (or load from `cache_dir`) everything for size `n`.
    pub fn new(engine: &StrataEngine, n: usize, cache_dir: Option<&Path>) -> Result<TqftPipeline> {
        let catalog = crate::classes::load_or_build(engine, n, cache_dir)?;
        let tables = CoefficientTables::load_or_compute(engine, &catalog, cache_dir)?;
        TqftPipeline::from_parts(catalog, tables)
    }

    /// Assemble the genus matrices from existing parts (verifies the
    /// column-mass identities).
    pub fn from_parts(catalog: ClassCatalog, tables: CoefficientTables) -> Result<TqftPipeline> {
        if tables.n != catalog.n {
            return Err(Error::InvalidInput(format!(
                "coefficient tables are for n = {}, catalog for n = {}",
                tables.n, catalog.n
            )));
        }
        let genus_triangular = assemble_genus_matrix(&catalog, &tables, TqftGroup::Ttilde)?;
        let genus_unipotent = assemble_genus_matrix(&catalog, &tables, TqftGroup::U)?;
        Ok(TqftPipeline {
            catalog,
            tables,
            genus_triangular,
            genus_unipotent,
        })
    }

    pub fn n(&self) -> usize {
        self.catalog.n
    }

    pub fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    pub fn tables(&self) -> &CoefficientTables {
        &self.tables
    }

    /// The genus matrix acting for the given group (`T` shares `T̃`'s).
    pub fn genus_matrix(&self, group: TqftGroup) -> &TqftMatrix {
        match group {
            TqftGroup::U => &self.genus_unipotent,
            _ => &self.genus_triangular,
        }
    }

    /// `e₁`, the coefficient vector of the class of `{1} ↪ G`.
    fn unit_vector(&self) -> Vec<MultiPoly> {
        let mut v = vec![MultiPoly::zero(); self.catalog.class_count()];
        v[0] = MultiPoly::one();
        v
    }

    /// The torus correction `(q−1)^{2g}` distinguishing `T_n` from `T̃_n`.
    fn torus_factor(group: TqftGroup, g: usize) -> MultiPoly {
        match group {
            TqftGroup::T => MultiPoly::q_minus_1().pow(2 * g as u32),
            _ => MultiPoly::one(),
        }
    }

    /// `[R_G(Σ_g)]` at a fixed genus: `g` applications of the genus matrix to
    /// `e₁`, then the identity-class coefficient.
    pub fn class_fixed(&self, group: TqftGroup, g: usize) -> Result<MultiPoly> {
        let matrix = self.genus_matrix(group);
        let mut v = self.unit_vector();
        for _ in 0..g {
            v = matrix.apply(&v);
        }
        Ok(v.swap_remove(0).mul(&Self::torus_factor(group, g)))
    }

    /// Eigenvalue monomials of the genus matrix for this group, searched in
    /// the box `a ≤ 2·dim G`, `b ≤ 2n`.
    pub fn eigenvalue_monomials(&self, group: TqftGroup) -> Result<Vec<EigenMonomial>> {
        let base = match group {
            TqftGroup::U => TqftGroup::U,
            _ => TqftGroup::Ttilde,
        };
        let a_max = 2 * group_dimension(base, self.n()) as i64;
        let b_max = 2 * self.n() as i64;
        matrix_eigenvalue_monomials(self.genus_matrix(group), a_max, b_max)
    }

    /// `[R_G(Σ_g)]` as a closed form symbolic in the genus, via eigenvalue
    /// interpolation: with `r` distinct eigenvalue monomials, the linear
    /// system is solved from the values at genus `0..=r+2` and verified at
    /// three further genera.
    pub fn class_symbolic(&self, group: TqftGroup) -> Result<GenusPoly> {
        let eigen = self.eigenvalue_monomials(group)?;
        let cands: Vec<(i64, i64)> = eigen.iter().map(|e| (e.q_exp, e.qm1_exp)).collect();
        let solve_upto = cands.len() + 2;
        let verify_upto = solve_upto + 3;
        let matrix = self.genus_matrix(group);
        let mut values = Vec::with_capacity(verify_upto + 1);
        let mut v = self.unit_vector();
        for g in 0..=verify_upto {
            values.push((g, v[0].clone()));
            if g < verify_upto {
                v = matrix.apply(&v);
            }
        }
        let base_form = reconstruct_closed_form(&values, &cands)?;
        Ok(match group {
            TqftGroup::T => base_form.mul_exp(0, 0, 2, 0),
            _ => base_form,
        })
    }

    /// Fixed or symbolic class; a failed symbolic reconstruction falls back
    /// to the fixed value, reporting the reason.
    pub fn representation_variety_class(
        &self,
        group: TqftGroup,
        g: usize,
        symbolic: bool,
    ) -> Result<RepresentationVarietyClass> {
        if !symbolic {
            return Ok(RepresentationVarietyClass::Fixed(self.class_fixed(group, g)?));
        }
        match self.class_symbolic(group) {
            Ok(form) => Ok(RepresentationVarietyClass::Symbolic(form)),
            Err(Error::AlgorithmFailure(reason)) => Ok(RepresentationVarietyClass::FixedFallback {
                value: self.class_fixed(group, g)?,
                reason,
            }),
            Err(e) => Err(e),
        }
    }

    /// `[R_G(Σ_g, Q)]` for a parabolic structure `Q` with punctures in the
    /// unipotent classes of the given 1-based indices: the puncture operators
    /// are composed after the genus applications.
    pub fn twisted_class(
        &self,
        group: TqftGroup,
        g: usize,
        punctures: &[usize],
    ) -> Result<MultiPoly> {
        if group == TqftGroup::U && !punctures.is_empty() {
            return Err(Error::InvalidInput(
                "puncture classes are conjugacy classes of the triangular group; \
                 the unipotent subgroup splits them further"
                    .into(),
            ));
        }
        let matrix = self.genus_matrix(group);
        let mut v = self.unit_vector();
        for _ in 0..g {
            v = matrix.apply(&v);
        }
        for &k in punctures {
            let p = assemble_parabolic_matrix(&self.catalog, &self.tables, k)?;
            v = p.apply(&v);
        }
        Ok(v.swap_remove(0).mul(&Self::torus_factor(group, g)))
    }
}

// ===========================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{FMatrix, FiniteGroupView, GroupKind};
    use crate::poly::{parse_genus_poly, parse_poly};
    use once_cell::sync::Lazy;

    fn pipeline(n: usize) -> TqftPipeline {
        let engine = StrataEngine::new();
        TqftPipeline::new(&engine, n, None).expect("pipeline builds")
    }

    static PIPE2: Lazy<TqftPipeline> = Lazy::new(|| pipeline(2));
    static PIPE3: Lazy<TqftPipeline> = Lazy::new(|| pipeline(3));

    fn p(s: &str) -> MultiPoly {
        parse_poly(s).expect("test polynomial parses")
    }

    fn gp(s: &str) -> GenusPoly {
        parse_genus_poly(s).expect("test closed form parses")
    }

    fn fmatrix(n: usize, entries: &[(usize, usize, u8)]) -> FMatrix {
        let mut m = FMatrix::identity(n);
        for &(i, j, v) in entries {
            m.set(i, j, v);
        }
        m
    }

    // ------------------------------------------------------------------
    // Raw tables
    // ------------------------------------------------------------------

    #[test]
    fn commutator_table_n2_matches_hand_computation() {
        let t = &PIPE2.tables();
        // Rows: classes (identity, regular); columns: families
        // (identity, regular unipotent, diagonal torus).
        assert_eq!(t.ebar[0], vec![p("q*(q - 1)"), p("q"), p("(q - 1)*(q - 2)")]);
        assert_eq!(
            t.ebar[1],
            vec![p("q*(q - 1)"), p("q*(q - 1)"), p("q*(q - 1)*(q - 2)")]
        );
    }

    #[test]
    fn unipotent_commutator_table_n2_is_constant() {
        // U_2 is abelian: every commutator is the identity, which lies in
        // both closures.
        let t = &PIPE2.tables();
        for row in &t.ebar_unipotent {
            assert_eq!(row, &vec![p("q"), p("q")]);
        }
    }

    #[test]
    fn translation_table_n2_matches_hand_computation() {
        let t = &PIPE2.tables();
        let expect = [
            [[p("1"), p("0")], [p("1"), p("1")]],
            [[p("1"), p("1")], [p("q"), p("q")]],
        ];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    assert_eq!(t.fbar[i][j][k], expect[i][j][k], "cell ({i},{j},{k})");
                }
            }
        }
    }

    #[test]
    fn contracted_translation_tensor_n2() {
        let t = &PIPE2.tables();
        assert_eq!(t.f[0][0][0], p("1"));
        assert_eq!(t.f[0][0][1], p("0"));
        assert_eq!(t.f[0][1][0], p("0"));
        assert_eq!(t.f[0][1][1], p("1"));
        assert_eq!(t.f[1][1][0], p("q - 1"));
        assert_eq!(t.f[1][1][1], p("q - 2"));
    }

    #[test]
    fn first_column_n2_matches_hand_computation() {
        let v = PIPE2.tables().first_column(PIPE2.catalog(), TqftGroup::Ttilde);
        assert_eq!(v, vec![p("q^2*(q - 1)"), p("q^2*(q - 1)*(q - 2)")]);
        let vu = PIPE2.tables().first_column(PIPE2.catalog(), TqftGroup::U);
        assert_eq!(vu, vec![p("q^2"), p("0")]);
    }

    #[test]
    fn marginal_identities_hold_for_n3() {
        // `from_raw` verifies the sum identities; re-run them explicitly.
        PIPE3.tables().verify(PIPE3.catalog()).expect("identities hold");
        assert_eq!(PIPE3.catalog().class_count(), 5);
        assert_eq!(PIPE3.catalog().family_count(), 12);
    }

    // ------------------------------------------------------------------
    // Genus matrices
    // ------------------------------------------------------------------

    #[test]
    fn genus_matrix_n2_matches_closed_form() {
        let z = PIPE2.genus_matrix(TqftGroup::Ttilde);
        assert_eq!(z.entries[0][0], p("q^2*(q - 1)"));
        assert_eq!(z.entries[0][1], p("q^2*(q - 2)*(q - 1)"));
        assert_eq!(z.entries[1][0], p("q^2*(q - 2)"));
        assert_eq!(z.entries[1][1], p("q^2*(q^2 - 3*q + 3)"));
    }

    #[test]
    fn unipotent_genus_matrix_n2_is_scalar() {
        let z = PIPE2.genus_matrix(TqftGroup::U);
        assert_eq!(z.entries[0][0], p("q^2"));
        assert_eq!(z.entries[0][1], p("0"));
        assert_eq!(z.entries[1][0], p("0"));
        assert_eq!(z.entries[1][1], p("q^2"));
    }

    #[test]
    fn genus_matrix_trivial_group_is_identity() {
        let pipe = pipeline(1);
        for group in [TqftGroup::Ttilde, TqftGroup::U] {
            let z = pipe.genus_matrix(group);
            assert_eq!(z.entries, vec![vec![p("1")]]);
        }
        assert_eq!(pipe.class_fixed(TqftGroup::Ttilde, 3).unwrap(), p("1"));
    }

    // ------------------------------------------------------------------
    // Fixed-genus classes
    // ------------------------------------------------------------------

    #[test]
    fn fixed_genus_classes_match_closed_forms_n2() {
        let golden = gp("q^(2*g - 1)*(q - 1)^(2*g) + q^(2*g - 1)*(q - 1)");
        for g in 0..=3usize {
            let got = PIPE2.class_fixed(TqftGroup::Ttilde, g).unwrap();
            let want = golden.evaluate_at_genus(g as i64).to_poly().unwrap();
            assert_eq!(got, want, "genus {g}");
            let got_t = PIPE2.class_fixed(TqftGroup::T, g).unwrap();
            assert_eq!(
                got_t,
                want.mul(&MultiPoly::q_minus_1().pow(2 * g as u32)),
                "T at genus {g}"
            );
        }
    }

    #[test]
    fn genus_zero_class_is_one_for_every_group() {
        for pipe in [&*PIPE2, &*PIPE3] {
            for group in [TqftGroup::Ttilde, TqftGroup::T, TqftGroup::U] {
                assert_eq!(pipe.class_fixed(group, 0).unwrap(), p("1"));
            }
        }
    }

    #[test]
    fn fixed_genus_matches_oracle_counts() {
        // Commuting pairs (genus 1) and a genus-2 count, over F_2 and F_3.
        let cases: [(TqftGroup, GroupKind, i64, usize); 6] = [
            (TqftGroup::Ttilde, GroupKind::Ttilde(2), 2, 1),
            (TqftGroup::Ttilde, GroupKind::Ttilde(2), 3, 1),
            (TqftGroup::Ttilde, GroupKind::Ttilde(3), 2, 1),
            (TqftGroup::Ttilde, GroupKind::Ttilde(3), 3, 1),
            (TqftGroup::U, GroupKind::U(3), 2, 1),
            (TqftGroup::U, GroupKind::U(3), 2, 2),
        ];
        for (group, kind, q0, g) in cases {
            let n = match &kind {
                GroupKind::U(n) | GroupKind::T(n) | GroupKind::Ttilde(n) => *n,
                GroupKind::Explicit(_) => unreachable!(),
            };
            let pipe = if n == 2 { &*PIPE2 } else { &*PIPE3 };
            let symbolic = pipe.class_fixed(group, g).unwrap();
            let view = FiniteGroupView::new(kind, q0 as u8).unwrap();
            let count = view.count_representation_variety(g, &[]).unwrap();
            assert_eq!(
                symbolic.eval_q(q0).unwrap(),
                count,
                "{group} n={n} g={g} q={q0}"
            );
        }
    }

    #[test]
    fn u3_commuting_pairs_count_is_forty() {
        // |{(A,B) ∈ U_3(F_2)² : AB = BA}| = 40 and the genus-2 count is 2176.
        assert_eq!(
            PIPE3.class_fixed(TqftGroup::U, 1).unwrap().eval_q(2).unwrap(),
            BigInt::from(40)
        );
        assert_eq!(
            PIPE3.class_fixed(TqftGroup::U, 2).unwrap().eval_q(2).unwrap(),
            BigInt::from(2176)
        );
    }

    // ------------------------------------------------------------------
    // Eigenvalues and closed forms
    // ------------------------------------------------------------------

    #[test]
    fn eigenvalue_monomials_n2() {
        let eigen = PIPE2.eigenvalue_monomials(TqftGroup::Ttilde).unwrap();
        assert_eq!(
            eigen,
            vec![
                EigenMonomial { q_exp: 2, qm1_exp: 0, multiplicity: 1 },
                EigenMonomial { q_exp: 2, qm1_exp: 2, multiplicity: 1 },
            ]
        );
        let eigen_u = PIPE2.eigenvalue_monomials(TqftGroup::U).unwrap();
        assert_eq!(
            eigen_u,
            vec![EigenMonomial { q_exp: 2, qm1_exp: 0, multiplicity: 2 }]
        );
    }

    #[test]
    fn symbolic_closed_forms_match_goldens_small() {
        let t2 = PIPE2.class_symbolic(TqftGroup::Ttilde).unwrap();
        assert_eq!(t2, gp("q^(2*g - 1)*(q - 1)^(2*g) + q^(2*g - 1)*(q - 1)"));
        let u2 = PIPE2.class_symbolic(TqftGroup::U).unwrap();
        assert_eq!(u2, gp("q^(2*g)"));
        let u3 = PIPE3.class_symbolic(TqftGroup::U).unwrap();
        assert_eq!(u3, gp("q^(4*g - 1)*(q - 1) + q^(6*g - 1)"));
    }

    #[test]
    fn triangular_n3_closed_form_matches_frobenius_prediction() {
        // Predicted from the zeta function of T_3 through the Frobenius
        // formula |R| = |G|^(2g−1)·ζ(2g−2), divided by (q−1)^(2g).
        let want = gp(
            "q^(4*g - 1)*(q - 1)^(2*g + 1) + 2*q^(6*g - 3)*(q - 1)^(2*g + 1) \
             + q^(6*g - 3)*(q - 1)^(4*g) + q^(6*g - 3)*(q - 1)^2",
        );
        assert_eq!(PIPE3.class_symbolic(TqftGroup::Ttilde).unwrap(), want);
        assert_eq!(
            PIPE3.class_symbolic(TqftGroup::T).unwrap(),
            want.mul_exp(0, 0, 2, 0)
        );
    }

    #[test]
    fn symbolic_agrees_with_fixed_through_genus_six() {
        for (pipe, group) in [
            (&*PIPE2, TqftGroup::Ttilde),
            (&*PIPE2, TqftGroup::T),
            (&*PIPE3, TqftGroup::Ttilde),
            (&*PIPE3, TqftGroup::U),
        ] {
            let form = pipe.class_symbolic(group).unwrap();
            for g in 0..=6usize {
                let fixed = pipe.class_fixed(group, g).unwrap();
                let via_form = form.evaluate_at_genus(g as i64).to_poly().unwrap();
                assert_eq!(fixed, via_form, "{group} at genus {g}");
            }
        }
    }

    #[test]
    fn reconstruct_constant_sequence() {
        let values: Vec<(usize, MultiPoly)> =
            (0..4).map(|g| (g, MultiPoly::one())).collect();
        let form = reconstruct_closed_form(&values, &[(0, 0)]).unwrap();
        assert_eq!(form, GenusPoly::one());
    }

    #[test]
    fn reconstruct_rejects_bad_input() {
        // Underdetermined: one value, two candidates.
        let one = vec![(0usize, MultiPoly::one())];
        assert!(matches!(
            reconstruct_closed_form(&one, &[(0, 0), (1, 0)]),
            Err(Error::AlgorithmFailure(_))
        ));
        // Inconsistent: 1, 2, 4, 9 is not a sum c₀ + c₁·q^g.
        let vals: Vec<(usize, MultiPoly)> = [1i64, 2, 4, 9]
            .iter()
            .enumerate()
            .map(|(g, &v)| (g, MultiPoly::constant(BigInt::from(v))))
            .collect();
        assert!(matches!(
            reconstruct_closed_form(&vals, &[(0, 0), (1, 0)]),
            Err(Error::AlgorithmFailure(_))
        ));
    }

    // ------------------------------------------------------------------
    // Twisted classes
    // ------------------------------------------------------------------

    #[test]
    fn puncture_at_identity_is_the_identity_operator() {
        for pipe in [&*PIPE2, &*PIPE3] {
            let p1 = assemble_parabolic_matrix(pipe.catalog(), pipe.tables(), 1).unwrap();
            let m = pipe.catalog().class_count();
            for i in 0..m {
                for j in 0..m {
                    let want = if i == j { MultiPoly::one() } else { MultiPoly::zero() };
                    assert_eq!(p1.entries[i][j], want);
                }
            }
        }
    }

    #[test]
    fn empty_puncture_list_equals_plain_class() {
        for g in 0..=2usize {
            assert_eq!(
                PIPE2.twisted_class(TqftGroup::Ttilde, g, &[]).unwrap(),
                PIPE2.class_fixed(TqftGroup::Ttilde, g).unwrap()
            );
        }
    }

    #[test]
    fn twisted_class_n2_matches_hand_value_and_oracle() {
        // Genus 1, one puncture in the regular unipotent class.
        let twisted = PIPE2.twisted_class(TqftGroup::Ttilde, 1, &[2]).unwrap();
        assert_eq!(twisted, p("q^2*(q - 1)*(q - 2)"));
        for q0 in [2i64, 3] {
            let view = FiniteGroupView::new(GroupKind::Ttilde(2), q0 as u8).unwrap();
            let j = fmatrix(2, &[(0, 1, 1)]);
            let count = view.count_representation_variety(1, &[j]).unwrap();
            assert_eq!(twisted.eval_q(q0).unwrap(), count, "q = {q0}");
        }
    }

    #[test]
    fn twisted_two_punctures_genus_zero_counts_inverse_pairs() {
        // {(C₁, C₂) ∈ J × J : C₁C₂ = 1} ≅ J, so the class is q − 1.
        let twisted = PIPE2.twisted_class(TqftGroup::Ttilde, 0, &[2, 2]).unwrap();
        assert_eq!(twisted, p("q - 1"));
        let view = FiniteGroupView::new(GroupKind::Ttilde(2), 3).unwrap();
        let j = fmatrix(2, &[(0, 1, 1)]);
        let count = view
            .count_representation_variety(0, &[j.clone(), j])
            .unwrap();
        assert_eq!(twisted.eval_q(3).unwrap(), count);
    }

    #[test]
    fn twisted_rejects_unipotent_group_punctures() {
        assert!(matches!(
            PIPE2.twisted_class(TqftGroup::U, 1, &[2]),
            Err(Error::InvalidInput(_))
        ));
    }

    // ------------------------------------------------------------------
    // Caching
    // ------------------------------------------------------------------

    #[test]
    fn tables_cache_roundtrip() {
        let dir = std::env::temp_dir().join(format!(
            "charvar-tqft-cache-{}",
            std::process::id()
        ));
        let _ = fs::remove_dir_all(&dir);
        PIPE2.tables().save(&dir).expect("save succeeds");
        let loaded = CoefficientTables::load(&dir, PIPE2.catalog())
            .expect("load succeeds")
            .expect("cache file found");
        assert_eq!(&loaded, PIPE2.tables());
        let z = assemble_genus_matrix(PIPE2.catalog(), &loaded, TqftGroup::Ttilde).unwrap();
        assert_eq!(&z, PIPE2.genus_matrix(TqftGroup::Ttilde));
        let _ = fs::remove_dir_all(&dir);
    }

    // ------------------------------------------------------------------
    // Larger sizes (excluded from the default suite)
    // ------------------------------------------------------------------

    #[test]
    #[ignore = "n = 4 tables take minutes; exercised by the acceptance suite"]
    fn n4_closed_forms_match_goldens() {
        let pipe = pipeline(4);
        let u4 = pipe.class_symbolic(TqftGroup::U).unwrap();
        assert_eq!(
            u4,
            gp("q^(8*g - 1)*(q - 1) + q^(10*g - 3)*(q - 1)*(q + 1) + q^(12*g - 3)")
        );
        // Predicted from the zeta function of T_4 through the Frobenius
        // formula.
        let t4 = pipe.class_symbolic(TqftGroup::T).unwrap();
        assert_eq!(
            t4,
            gp("3*q^(10*g - 4)*(q - 1)^(4*g + 2) + 2*q^(10*g - 4)*(q - 1)^(6*g + 1) \
                + q^(8*g - 2)*(q - 1)^(6*g + 1) + q^(8*g - 2)*(q - 1)^(4*g + 2) \
                + q^(10*g - 4)*(q - 1)^(2*g + 3) + 3*q^(12*g - 6)*(q - 1)^(6*g + 1) \
                + 3*q^(12*g - 6)*(q - 1)^(4*g + 2) + q^(12*g - 6)*(q - 1)^(2*g + 3) \
                + q^(12*g - 6)*(q - 1)^(8*g)")
        );
        // Commuting-pair counts over F_2 and F_3.
        for (group, kind) in [
            (TqftGroup::U, GroupKind::U(4)),
            (TqftGroup::Ttilde, GroupKind::Ttilde(4)),
        ] {
            let fixed = pipe.class_fixed(group, 1).unwrap();
            for q0 in [2i64, 3] {
                let view = FiniteGroupView::new(kind.clone(), q0 as u8).unwrap();
                let count = view.count_representation_variety(1, &[]).unwrap();
                assert_eq!(fixed.eval_q(q0).unwrap(), count, "{group} q = {q0}");
            }
        }
    }

    #[test]
    #[ignore = "n = 5 tables are the long-running stretch configuration"]
    fn n5_spectrum_and_closed_forms_match_goldens() {
        let pipe = pipeline(5);

        // Algebraic multiplicities of the genus-matrix eigenvalue monomials.
        let eigen = pipe.eigenvalue_monomials(TqftGroup::Ttilde).unwrap();
        let got: Vec<(i64, i64, usize)> = eigen
            .iter()
            .map(|e| (e.q_exp, e.qm1_exp, e.multiplicity))
            .collect();
        let want = vec![
            (12, 4, 1),
            (14, 2, 2),
            (14, 4, 3),
            (14, 6, 1),
            (16, 0, 2),
            (16, 2, 7),
            (16, 4, 7),
            (16, 6, 2),
            (18, 0, 2),
            (18, 2, 7),
            (18, 4, 8),
            (18, 6, 3),
            (20, 0, 1),
            (20, 2, 4),
            (20, 4, 6),
            (20, 6, 4),
            (20, 8, 1),
        ];
        assert_eq!(got, want);

        let t5 = pipe.class_symbolic(TqftGroup::T).unwrap();
        assert_eq!(
            t5,
            gp("q^(12*g - 2)*(q - 1)^(6*g + 2) + 2*q^(14*g - 4)*(q - 1)^(4*g + 3) \
                + 3*q^(14*g - 4)*(q - 1)^(6*g + 2) + q^(14*g - 4)*(q - 1)^(8*g + 1) \
                + 2*q^(16*g - 6)*(q - 1)^(2*g + 4) + 7*q^(16*g - 6)*(q - 1)^(4*g + 3) \
                + 7*q^(16*g - 6)*(q - 1)^(6*g + 2) + 2*q^(16*g - 6)*(q - 1)^(8*g + 1) \
                + 2*q^(18*g - 8)*(q - 1)^(2*g + 4) + 7*q^(18*g - 8)*(q - 1)^(4*g + 3) \
                + 8*q^(18*g - 8)*(q - 1)^(6*g + 2) + 3*q^(18*g - 8)*(q - 1)^(8*g + 1) \
                + q^(20*g - 10)*(q - 1)^(10*g) + q^(20*g - 10)*(q - 1)^(2*g + 4) \
                + 4*q^(20*g - 10)*(q - 1)^(4*g + 3) + 6*q^(20*g - 10)*(q - 1)^(6*g + 2) \
                + 4*q^(20*g - 10)*(q - 1)^(8*g + 1)")
        );

        let u5 = pipe.class_symbolic(TqftGroup::U).unwrap();
        assert_eq!(
            u5,
            gp("q^(12*g - 2)*(q - 1)^2 + q^(14*g - 3)*(q - 1)*(2*q - 1) \
                + q^(16*g - 5)*(q - 1)*(q + 1)*(2*q - 1) \
                + q^(18*g - 6)*(q - 1)*(2*q + 1) + q^(20*g - 6)")
        );
    }
}
