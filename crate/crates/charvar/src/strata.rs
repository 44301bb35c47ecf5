//! Recursive stratification engine.
//!
//! Computes the virtual class `[X(A, F, G)] ∈ ℤ[q]` of the locally closed
//! set cut out of affine space `A^{|A|}` by the equations `f = 0` (f ∈ F)
//! and inequations `g ≠ 0` (g ∈ G), by structural recursion: free variables
//! split off affine factors, linear variables are eliminated, quadratics
//! with square discriminant split into root branches, discovered
//! factorizations and rational roots stratify further, and inequations are
//! resolved by inclusion–exclusion. Sets whose class is not forced by these
//! moves are reported as [`Error::AlgorithmFailure`] — the engine never
//! guesses.
//!
//! A brute-force point counter over the small finite fields doubles as an
//! independent oracle for every value the recursion produces.

use crate::oracle::{CompiledPoly, FiniteField};
use crate::poly::{parse_poly, MultiPoly, Var};
use crate::{Error, Result};
use dashmap::DashMap;
use num_bigint::BigInt;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

// ---------------------------------------------------------------------------
// Stratum specifications
// ---------------------------------------------------------------------------

/// A locally closed set `X(A, F, G)`: points of affine `|A|`-space where all
/// polynomials in `zero` vanish and all polynomials in `nonzero` do not.
///
/// Stored canonically: variables sorted by name, polynomials primitive with
/// positive leading coefficient, deduplicated, sorted; a nonzero constant
/// equation (or an identically zero inequation) collapses the whole spec to
/// the canonical empty set `X(∅, {1}, ∅)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StratumSpec {
    vars: Vec<Var>,
    zero: Vec<MultiPoly>,
    nonzero: Vec<MultiPoly>,
}

impl StratumSpec {
    /// Validating constructor for externally supplied data.
    pub fn new(vars: Vec<Var>, zero: Vec<MultiPoly>, nonzero: Vec<MultiPoly>) -> Result<StratumSpec> {
        let mut seen = HashSet::new();
        for &v in &vars {
            if v == Var::q() {
                return Err(Error::InvalidInput(
                    "the class variable q cannot be a stratum variable".into(),
                ));
            }
            if !seen.insert(v) {
                return Err(Error::InvalidInput(format!("duplicate variable {v}")));
            }
        }
        for p in zero.iter().chain(nonzero.iter()) {
            for v in p.vars() {
                if !seen.contains(&v) {
                    return Err(Error::InvalidInput(format!(
                        "polynomial {p} mentions {v}, which is not a declared variable"
                    )));
                }
            }
        }
        Ok(Self::canonicalize(vars, zero, nonzero))
    }

    /// Internal constructor for rule outputs (inputs known well-formed).
    fn canonicalize(
        mut vars: Vec<Var>,
        zero: Vec<MultiPoly>,
        nonzero: Vec<MultiPoly>,
    ) -> StratumSpec {
        crate::poly::sort_vars_by_name(&mut vars);
        vars.dedup();
        let mut f: Vec<MultiPoly> = Vec::with_capacity(zero.len());
        for p in &zero {
            let c = p.canonical_scaled();
            if !c.is_zero() {
                f.push(c);
            }
        }
        let mut g: Vec<MultiPoly> = Vec::with_capacity(nonzero.len());
        for p in &nonzero {
            let c = p.canonical_scaled();
            if c.is_zero() {
                return Self::empty_marker(); // 0 ≠ 0 is unsatisfiable
            }
            if !c.is_constant() {
                g.push(c); // nonzero constants are vacuous inequations
            }
        }
        if f.iter().any(|p| p.is_constant()) {
            return Self::empty_marker(); // c = 0 with c ≠ 0 is unsatisfiable
        }
        f.sort_by(|a, b| a.cmp_names(b));
        f.dedup();
        g.sort_by(|a, b| a.cmp_names(b));
        g.dedup();
        StratumSpec {
            vars,
            zero: f,
            nonzero: g,
        }
    }

    /// The canonical empty set.
    fn empty_marker() -> StratumSpec {
        StratumSpec {
            vars: Vec::new(),
            zero: vec![MultiPoly::one()],
            nonzero: Vec::new(),
        }
    }

    /// Parses the JSON document format used by the command-line interface:
    /// `{"vars": [...], "zero": ["poly", ...], "nonzero": [...]}`.
    pub fn from_json(text: &str) -> Result<StratumSpec> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("stratum spec JSON: {e}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn zero(&self) -> &[MultiPoly] {
        &self.zero
    }

    pub fn nonzero(&self) -> &[MultiPoly] {
        &self.nonzero
    }

    /// Exact number of points over F_{q0} by exhaustive enumeration.
    pub fn point_count(&self, q0: u8, max_points: u64) -> Result<BigInt> {
        let field = FiniteField::new(q0)?;
        let k = self.vars.len() as u32;
        let total = (q0 as u64)
            .checked_pow(k)
            .filter(|&t| t <= max_points)
            .ok_or_else(|| {
                Error::ResourceBudget(format!(
                    "point enumeration {q0}^{k} exceeds budget {max_points}"
                ))
            })?;
        let positions: HashMap<Var, usize> =
            self.vars.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let zero: Vec<CompiledPoly> = self
            .zero
            .iter()
            .map(|p| CompiledPoly::compile(p, &field, &positions))
            .collect::<Result<_>>()?;
        let nonzero: Vec<CompiledPoly> = self
            .nonzero
            .iter()
            .map(|p| CompiledPoly::compile(p, &field, &positions))
            .collect::<Result<_>>()?;
        let mut vals = vec![0u8; self.vars.len()];
        let mut count = 0u64;
        for _ in 0..total {
            let ok = zero.iter().all(|p| p.eval(&field, &vals) == 0)
                && nonzero.iter().all(|p| p.eval(&field, &vals) != 0);
            if ok {
                count += 1;
            }
            // Odometer increment over F_{q0}^k.
            for slot in vals.iter_mut() {
                *slot += 1;
                if *slot == q0 {
                    *slot = 0;
                } else {
                    break;
                }
            }
        }
        Ok(BigInt::from(count))
    }
}

impl fmt::Display for StratumSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vars: Vec<String> = self.vars.iter().map(|v| v.name()).collect();
        let zs: Vec<String> = self.zero.iter().map(|p| p.to_string()).collect();
        let gs: Vec<String> = self.nonzero.iter().map(|p| p.to_string()).collect();
        write!(
            f,
            "X(vars=[{}]; zero=[{}]; nonzero=[{}])",
            vars.join(", "),
            zs.join(", "),
            gs.join(", ")
        )
    }
}

impl Serialize for StratumSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("StratumSpec", 3)?;
        let vars: Vec<String> = self.vars.iter().map(|v| v.name()).collect();
        let zero: Vec<String> = self.zero.iter().map(|p| p.to_string()).collect();
        let nonzero: Vec<String> = self.nonzero.iter().map(|p| p.to_string()).collect();
        s.serialize_field("vars", &vars)?;
        s.serialize_field("zero", &zero)?;
        s.serialize_field("nonzero", &nonzero)?;
        s.end()
    }
}

impl<'de> Deserialize<'de> for StratumSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            vars: Vec<String>,
            #[serde(default)]
            zero: Vec<String>,
            #[serde(default)]
            nonzero: Vec<String>,
        }
        let raw = Raw::deserialize(deserializer)?;
        let vars = raw.vars.iter().map(|n| Var::intern(n)).collect();
        let parse_all = |texts: &[String]| -> std::result::Result<Vec<MultiPoly>, D::Error> {
            texts
                .iter()
                .map(|t| parse_poly(t).map_err(serde::de::Error::custom))
                .collect()
        };
        StratumSpec::new(vars, parse_all(&raw.zero)?, parse_all(&raw.nonzero)?)
            .map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Results and traces
// ---------------------------------------------------------------------------

/// One node of a derivation trace: which rule fired, on what, with the
/// resulting value; children are the sub-strata in summation order.
#[derive(Clone, Debug, Serialize, PartialEq, Eq)]
pub struct TraceNode {
    pub rule: String,
    pub detail: String,
    pub spec: String,
    pub value: String,
    pub children: Vec<TraceNode>,
}

/// The virtual class of a stratum, with an optional derivation trace.
#[derive(Clone, Debug)]
pub struct ClassResult {
    pub value: MultiPoly,
    pub trace: Option<TraceNode>,
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// Budgets for the recursion; exceeding them is a resource error, distinct
/// from the algorithm's own irreducibility failure.
#[derive(Clone, Copy, Debug)]
pub struct StrataConfig {
    pub max_depth: usize,
    pub max_nodes: u64,
}

impl Default for StrataConfig {
    fn default() -> Self {
        StrataConfig {
            max_depth: 2_000,
            max_nodes: 50_000_000,
        }
    }
}

/// The stratification engine. Cheap to share between threads: the memo is a
/// concurrent map with idempotent inserts (duplicated work is allowed,
/// divergent results are not — values are pure functions of the spec).
pub struct StrataEngine {
    memo: DashMap<String, MultiPoly>,
    pub config: StrataConfig,
}

impl Default for StrataEngine {
    fn default() -> Self {
        Self::new()
    }
}

/// One summand of a rule application: `sign · q^{q_exp} · [spec]`.
struct Part {
    spec: StratumSpec,
    sign: i8,
    q_exp: u32,
}

enum Step {
    Leaf {
        rule: &'static str,
        detail: String,
        value: MultiPoly,
    },
    Branch {
        rule: &'static str,
        detail: String,
        parts: Vec<Part>,
    },
}

impl StrataEngine {
    pub fn new() -> StrataEngine {
        Self::with_config(StrataConfig::default())
    }

    pub fn with_config(config: StrataConfig) -> StrataEngine {
        StrataEngine {
            memo: DashMap::new(),
            config,
        }
    }

    /// Number of distinct sub-strata currently memoized.
    pub fn memo_len(&self) -> usize {
        self.memo.len()
    }

    /// Computes `[X(A, F, G)]` as a polynomial in q.
    pub fn virtual_class(&self, spec: &StratumSpec) -> Result<ClassResult> {
        let nodes = AtomicU64::new(0);
        let (value, _) = self.eval(spec, 0, &nodes, false)?;
        Ok(ClassResult { value, trace: None })
    }

    /// As [`virtual_class`](Self::virtual_class), but records the full
    /// derivation tree (and bypasses the memo so the trace is complete).
    pub fn virtual_class_traced(&self, spec: &StratumSpec) -> Result<ClassResult> {
        let nodes = AtomicU64::new(0);
        let (value, trace) = self.eval(spec, 0, &nodes, true)?;
        Ok(ClassResult { value, trace })
    }

    fn eval(
        &self,
        spec: &StratumSpec,
        depth: usize,
        nodes: &AtomicU64,
        trace: bool,
    ) -> Result<(MultiPoly, Option<TraceNode>)> {
        if depth > self.config.max_depth {
            return Err(Error::ResourceBudget(format!(
                "recursion depth exceeded {} at {spec}",
                self.config.max_depth
            )));
        }
        if nodes.fetch_add(1, AtomicOrdering::Relaxed) >= self.config.max_nodes {
            return Err(Error::ResourceBudget(format!(
                "node budget {} exhausted",
                self.config.max_nodes
            )));
        }
        let key = if trace {
            None
        } else {
            let k = canonical_key(spec);
            if let Some(hit) = self.memo.get(&k) {
                return Ok((hit.clone(), None));
            }
            Some(k)
        };
        let step = self.select_rule(spec)?;
        let (value, node) = match step {
            Step::Leaf { rule, detail, value } => {
                let node = trace.then(|| TraceNode {
                    rule: rule.to_string(),
                    detail,
                    spec: spec.to_string(),
                    value: value.to_string(),
                    children: Vec::new(),
                });
                (value, node)
            }
            Step::Branch { rule, detail, parts } => {
                let mut total = MultiPoly::zero();
                let mut children = Vec::new();
                for part in &parts {
                    let (child, child_node) = self.eval(&part.spec, depth + 1, nodes, trace)?;
                    let mut term = child;
                    if part.q_exp > 0 {
                        term = term.mul(&MultiPoly::q().pow(part.q_exp));
                    }
                    total = if part.sign >= 0 {
                        total.add(&term)
                    } else {
                        total.sub(&term)
                    };
                    if let Some(n) = child_node {
                        children.push(n);
                    }
                }
                let node = trace.then(|| TraceNode {
                    rule: rule.to_string(),
                    detail,
                    spec: spec.to_string(),
                    value: total.to_string(),
                    children,
                });
                (total, node)
            }
        };
        debug_assert!(
            value.vars().iter().all(|&v| v == Var::q()),
            "virtual class must be a polynomial in q alone: {value}"
        );
        if let Some(k) = key {
            self.memo.insert(k, value.clone());
        }
        Ok((value, node))
    }

    /// Applies the rules in priority order and returns the first that fires.
    fn select_rule(&self, spec: &StratumSpec) -> Result<Step> {
        let vars = &spec.vars;
        let zero = &spec.zero;
        let nonzero = &spec.nonzero;

        // Rule 1: a nonzero constant equation — the set is empty. (An
        // identically zero inequation is canonicalized into this form.)
        if let Some(c) = zero.iter().find(|p| p.is_constant()) {
            return Ok(Step::Leaf {
                rule: "empty",
                detail: format!("unsatisfiable constraint {c} = 0"),
                value: MultiPoly::zero(),
            });
        }

        // Rule 2: no constraints — affine space.
        if zero.is_empty() && nonzero.is_empty() {
            return Ok(Step::Leaf {
                rule: "affine",
                detail: format!("free affine space of dimension {}", vars.len()),
                value: MultiPoly::q().pow(vars.len() as u32),
            });
        }

        // Rule 3: a variable no constraint mentions — an affine line factor.
        for (i, &a) in vars.iter().enumerate() {
            if !zero.iter().chain(nonzero.iter()).any(|p| p.mentions(a)) {
                let mut rest = vars.clone();
                rest.remove(i);
                return Ok(Step::Branch {
                    rule: "free-variable",
                    detail: format!("split off free variable {a}"),
                    parts: vec![Part {
                        spec: StratumSpec::canonicalize(rest, zero.clone(), nonzero.clone()),
                        sign: 1,
                        q_exp: 1,
                    }],
                });
            }
        }

        // Rule 4: a perfect power u^n imposes the same condition as u,
        // in equations and inequations alike.
        for (set, list) in [(0usize, zero), (1, nonzero)] {
            for (i, p) in list.iter().enumerate() {
                if let Some((u, n)) = p.perfect_power_root() {
                    let mut f = zero.clone();
                    let mut g = nonzero.clone();
                    if set == 0 {
                        f[i] = u.clone();
                    } else {
                        g[i] = u.clone();
                    }
                    return Ok(Step::Branch {
                        rule: "power-reduction",
                        detail: format!("replaced {p} by its root {u} (power {n})"),
                        parts: vec![Part {
                            spec: StratumSpec::canonicalize(vars.clone(), f, g),
                            sign: 1,
                            q_exp: 0,
                        }],
                    });
                }
            }
        }

        // Rule 5: a univariate equation that splits over ℚ pins its
        // variable to finitely many rational values.
        for (i, p) in zero.iter().enumerate() {
            let pvars: Vec<Var> = p.vars().into_iter().collect();
            if pvars.len() != 1 {
                continue;
            }
            let a = pvars[0];
            if let Some(mut roots) = p.univariate_linear_factors(a) {
                roots.dedup();
                let rest_vars: Vec<Var> = vars.iter().copied().filter(|&v| v != a).collect();
                let mut parts = Vec::with_capacity(roots.len());
                let mut described = Vec::new();
                for (num, den) in &roots {
                    let nump = MultiPoly::constant(num.clone());
                    let denp = MultiPoly::constant(den.clone());
                    let f = substitute_all(zero, Some(i), a, &nump, &denp)?;
                    let g = substitute_all(nonzero, None, a, &nump, &denp)?;
                    parts.push(Part {
                        spec: StratumSpec::canonicalize(rest_vars.clone(), f, g),
                        sign: 1,
                        q_exp: 0,
                    });
                    described.push(if den == &BigInt::from(1) {
                        format!("{num}")
                    } else {
                        format!("{num}/{den}")
                    });
                }
                return Ok(Step::Branch {
                    rule: "univariate-roots",
                    detail: format!("{p} = 0 pins {a} to {{{}}}", described.join(", ")),
                    parts,
                });
            }
        }

        // Rule 6: a discovered factorization f = u·v splits into the locus
        // of u and the locus of v off u.
        for (i, p) in zero.iter().enumerate() {
            if let Some((u, v)) = discover_factorization(p) {
                let mut f1 = without(zero, i);
                f1.push(u.clone());
                let mut f2 = without(zero, i);
                f2.push(v.clone());
                let mut g2 = nonzero.clone();
                g2.push(u.clone());
                return Ok(Step::Branch {
                    rule: "product-split",
                    detail: format!("{p} factors as ({u})·({v})"),
                    parts: vec![
                        Part {
                            spec: StratumSpec::canonicalize(vars.clone(), f1, nonzero.clone()),
                            sign: 1,
                            q_exp: 0,
                        },
                        Part {
                            spec: StratumSpec::canonicalize(vars.clone(), f2, g2),
                            sign: 1,
                            q_exp: 0,
                        },
                    ],
                });
            }
        }

        // Rule 7: an equation linear in some variable, f = a·u + v with u, v
        // free of a: either u = v = 0 (a unconstrained), or a = −v/u.
        for (i, p) in zero.iter().enumerate() {
            for &a in vars.iter() {
                if p.degree_in(a) != 1 {
                    continue;
                }
                let cs = p.coeffs_in(a);
                let v = cs[0].clone();
                let u = cs[1].clone();
                let mut f1 = without(zero, i);
                f1.push(u.clone());
                f1.push(v.clone());
                let rest_vars: Vec<Var> = vars.iter().copied().filter(|&x| x != a).collect();
                let neg_v = v.neg();
                let f2 = substitute_all(zero, Some(i), a, &neg_v, &u)?;
                let mut g2 = substitute_all(nonzero, None, a, &neg_v, &u)?;
                g2.push(u.clone());
                return Ok(Step::Branch {
                    rule: "linear-elimination",
                    detail: format!("{p} = 0 solves {a} = -({v})/({u})"),
                    parts: vec![
                        Part {
                            spec: StratumSpec::canonicalize(vars.clone(), f1, nonzero.clone()),
                            sign: 1,
                            q_exp: 0,
                        },
                        Part {
                            spec: StratumSpec::canonicalize(rest_vars, f2, g2),
                            sign: 1,
                            q_exp: 0,
                        },
                    ],
                });
            }
        }

        // Rule 8: an equation quadratic in some variable whose discriminant
        // is a perfect square splits into degenerate, double-root, and two
        // simple-root branches (characteristic 0 arithmetic, so dividing by
        // 2 is always legitimate).
        for (i, p) in zero.iter().enumerate() {
            for &a in vars.iter() {
                if p.degree_in(a) != 2 {
                    continue;
                }
                let cs = p.coeffs_in(a);
                let w = cs[0].clone();
                let v = cs[1].clone();
                let u = cs[2].clone();
                let disc = v.mul(&v).sub(&u.mul(&w).scale(&BigInt::from(4)));
                let d = if disc.is_zero() {
                    Some(MultiPoly::zero())
                } else {
                    disc.square_root()
                };
                let Some(d) = d else { continue };
                let rest_vars: Vec<Var> = vars.iter().copied().filter(|&x| x != a).collect();
                let two_u = u.scale(&BigInt::from(2));
                let neg_v = v.neg();

                // u = 0: the equation degenerates to a·v + w = 0.
                let mut f1 = without(zero, i);
                f1.push(u.clone());
                f1.push(MultiPoly::var(a).mul(&v).add(&w));

                // u ≠ 0, double root a = −v/(2u) on the locus disc = 0.
                let mut f2 = substitute_all(zero, Some(i), a, &neg_v, &two_u)?;
                f2.push(disc.clone());
                let mut g2 = substitute_all(nonzero, None, a, &neg_v, &two_u)?;
                g2.push(u.clone());

                // u ≠ 0, disc ≠ 0: the two simple roots (−v ∓ d)/(2u).
                let mut simple = Vec::new();
                for num in [neg_v.sub(&d), neg_v.add(&d)] {
                    let fr = substitute_all(zero, Some(i), a, &num, &two_u)?;
                    let mut gr = substitute_all(nonzero, None, a, &num, &two_u)?;
                    gr.push(u.clone());
                    gr.push(disc.clone());
                    simple.push(Part {
                        spec: StratumSpec::canonicalize(rest_vars.clone(), fr, gr),
                        sign: 1,
                        q_exp: 0,
                    });
                }

                let mut parts = vec![
                    Part {
                        spec: StratumSpec::canonicalize(vars.clone(), f1, nonzero.clone()),
                        sign: 1,
                        q_exp: 0,
                    },
                    Part {
                        spec: StratumSpec::canonicalize(rest_vars.clone(), f2, g2),
                        sign: 1,
                        q_exp: 0,
                    },
                ];
                parts.extend(simple);
                return Ok(Step::Branch {
                    rule: "quadratic-split",
                    detail: format!(
                        "{p} = 0 is quadratic in {a} with square discriminant {disc}"
                    ),
                    parts,
                });
            }
        }

        // Rule 9: resolve an inequation by inclusion–exclusion:
        // [X | g ≠ 0] = [X] − [X | g = 0].
        if let Some(g) = nonzero.first() {
            let rest_g = without(nonzero, 0);
            let mut f2 = zero.clone();
            f2.push(g.clone());
            return Ok(Step::Branch {
                rule: "inclusion-exclusion",
                detail: format!("{g} ≠ 0 resolved by complementation"),
                parts: vec![
                    Part {
                        spec: StratumSpec::canonicalize(vars.clone(), zero.clone(), rest_g.clone()),
                        sign: 1,
                        q_exp: 0,
                    },
                    Part {
                        spec: StratumSpec::canonicalize(vars.clone(), f2, rest_g),
                        sign: -1,
                        q_exp: 0,
                    },
                ],
            });
        }

        // Step 10: nothing applies.
        Err(Error::AlgorithmFailure(format!(
            "no rule applies to {spec}"
        )))
    }
}

/// Copy of `list` with index `skip` removed.
fn without(list: &[MultiPoly], skip: usize) -> Vec<MultiPoly> {
    list.iter()
        .enumerate()
        .filter(|&(i, _)| i != skip)
        .map(|(_, p)| p.clone())
        .collect()
}

/// Denominator-cleared substitution `a ↦ num/den` applied across a list,
/// optionally skipping one entry (the equation being consumed).
fn substitute_all(
    list: &[MultiPoly],
    skip: Option<usize>,
    a: Var,
    num: &MultiPoly,
    den: &MultiPoly,
) -> Result<Vec<MultiPoly>> {
    list.iter()
        .enumerate()
        .filter(|&(i, _)| Some(i) != skip)
        .map(|(_, p)| p.substitute(a, num, den))
        .collect()
}

/// Rule 6 factor discovery: a variable dividing every term, or — for a
/// univariate polynomial that does not fully split — one rational root
/// factor. Returns `(u, v)` with `f = u·v` up to a positive constant.
fn discover_factorization(f: &MultiPoly) -> Option<(MultiPoly, MultiPoly)> {
    // (a) A variable common to every monomial.
    let mut common: Option<Vec<Var>> = None;
    for (m, _) in f.terms() {
        let vs: HashSet<Var> = m.vars().collect();
        common = Some(match common {
            None => {
                let mut v: Vec<Var> = vs.into_iter().collect();
                crate::poly::sort_vars_by_name(&mut v);
                v
            }
            Some(prev) => prev.into_iter().filter(|v| vs.contains(v)).collect(),
        });
        if common.as_ref().map(|c| c.is_empty()) == Some(true) {
            break;
        }
    }
    if let Some(vs) = common {
        if let Some(&x) = vs.first() {
            let u = MultiPoly::var(x);
            if let Some(v) = f.divide_exact(&u) {
                if !v.is_constant() {
                    return Some((u, v));
                }
            }
        }
    }
    // (b) A rational root of a univariate polynomial (partial split).
    let fvars: Vec<Var> = f.vars().into_iter().collect();
    if fvars.len() == 1 {
        let a = fvars[0];
        if let Some(roots) = f.univariate_rational_roots(a) {
            if let Some((num, den)) = roots.first() {
                let u = MultiPoly::var(a)
                    .scale(den)
                    .sub(&MultiPoly::constant(num.clone()))
                    .canonical_scaled();
                if let Some(v) = f.divide_exact(&u) {
                    if !v.is_constant() {
                        return Some((u, v));
                    }
                }
            }
        }
    }
    // (c) A two-term factor. Candidates are differences of monomial characters
    // (v − 1, v_i − v_j, μ − ν, …), the factor shapes that products of
    // diagonal-character conditions produce; every candidate is built from a
    // pair of terms of f with their monomial gcd and integer content stripped,
    // and is only accepted when it divides f exactly, so the search is sound
    // regardless of what it misses. Capped to keep the pair scan linear-ish.
    const MAX_TERMS_FOR_PAIR_SCAN: usize = 80;
    let terms: Vec<(&crate::poly::Monomial, &BigInt)> = f.terms().collect();
    if terms.len() >= 2 && terms.len() <= MAX_TERMS_FOR_PAIR_SCAN {
        let mut tried: Vec<MultiPoly> = Vec::new();
        for i in 0..terms.len() {
            for j in (i + 1)..terms.len() {
                let (mi, ci) = terms[i];
                let (mj, cj) = terms[j];
                let g = crate::poly::Monomial::from_pairs(mi.iter().filter_map(|(v, e)| {
                    let e2 = mj.deg_in(v);
                    if e2 > 0 {
                        Some((v, e.min(e2)))
                    } else {
                        None
                    }
                }));
                let (mi_red, mj_red) = match (mi.try_div(&g), mj.try_div(&g)) {
                    (Some(a), Some(b)) => (a, b),
                    _ => continue,
                };
                let cand = MultiPoly::term(mi_red, ci.clone())
                    .add(&MultiPoly::term(mj_red, cj.clone()))
                    .canonical_scaled();
                if cand.is_constant() || cand.num_terms() != 2 {
                    continue;
                }
                if tried.iter().any(|p| p == &cand) {
                    continue;
                }
                if let Some(v) = f.divide_exact(&cand) {
                    if !v.is_constant() {
                        return Some((cand, v));
                    }
                }
                tried.push(cand);
            }
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Canonical memo keys
// ---------------------------------------------------------------------------

/// Renames an ordered variable set to position-indexed names determined by
/// structural signatures (name order only breaks genuine ties), then renders
/// the spec canonically. Equal keys therefore mean isomorphic strata, so
/// memo hits are always sound; richer signatures only improve sharing.
fn canonical_key(spec: &StratumSpec) -> String {
    let polys: Vec<(u8, &MultiPoly)> = spec
        .zero
        .iter()
        .map(|p| (0u8, p))
        .chain(spec.nonzero.iter().map(|p| (1u8, p)))
        .collect();

    // Name-independent polynomial invariants → polynomial ranks.
    type PolyInv = (u8, usize, u32, Vec<(u32, BigInt)>);
    let invariant = |&(set, p): &(u8, &MultiPoly)| -> PolyInv {
        let mut terms: Vec<(u32, BigInt)> = p
            .terms()
            .map(|(m, c)| (m.total_degree(), c.clone()))
            .collect();
        terms.sort();
        (set, p.num_terms(), p.total_degree(), terms)
    };
    let invs: Vec<PolyInv> = polys.iter().map(invariant).collect();
    let mut sorted_invs: Vec<&PolyInv> = invs.iter().collect();
    sorted_invs.sort();
    sorted_invs.dedup();
    let poly_rank: Vec<usize> = invs
        .iter()
        .map(|inv| sorted_invs.binary_search(&inv).unwrap())
        .collect();

    // Variable signatures from occurrences in ranked polynomials.
    type VarSig = Vec<(usize, Vec<(u32, u32, BigInt)>)>;
    let signature = |v: Var| -> VarSig {
        let mut sig: VarSig = Vec::new();
        for (pi, &(_, p)) in polys.iter().enumerate() {
            let mut occ: Vec<(u32, u32, BigInt)> = p
                .terms()
                .filter(|(m, _)| m.deg_in(v) > 0)
                .map(|(m, c)| (m.deg_in(v), m.total_degree(), c.clone()))
                .collect();
            if occ.is_empty() {
                continue;
            }
            occ.sort();
            sig.push((poly_rank[pi], occ));
        }
        sig.sort();
        sig
    };
    let mut order: Vec<(VarSig, String, Var)> = spec
        .vars
        .iter()
        .map(|&v| (signature(v), v.name(), v))
        .collect();
    order.sort();
    let map: HashMap<Var, Var> = order
        .iter()
        .enumerate()
        .map(|(i, &(_, _, v))| (v, Var::intern(&format!("~{i}"))))
        .collect();

    let render = |list: &[MultiPoly]| -> String {
        let mut out: Vec<String> = list.iter().map(|p| p.rename_vars(&map).to_string()).collect();
        out.sort();
        out.join(";")
    };
    format!(
        "{}|{}|{}",
        spec.vars.len(),
        render(&spec.zero),
        render(&spec.nonzero)
    )
}

// ---------------------------------------------------------------------------
// Bundled corpus
// ---------------------------------------------------------------------------

/// A named stratum specification from the bundled test corpus.
#[derive(Deserialize)]
pub struct CorpusEntry {
    pub name: String,
    #[serde(flatten)]
    pub spec: StratumSpec,
}

/// The bundled 40-spec corpus exercising every rule; used by the oracle
/// agreement and additivity test suites.
pub fn bundled_corpus() -> Result<Vec<CorpusEntry>> {
    serde_json::from_str(include_str!("../fixtures/strata_corpus.json"))
        .map_err(|e| Error::Parse(format!("bundled corpus: {e}")))
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::parse_poly;

    fn spec(vars: &[&str], zero: &[&str], nonzero: &[&str]) -> StratumSpec {
        StratumSpec::new(
            vars.iter().map(|n| Var::intern(n)).collect(),
            zero.iter().map(|t| parse_poly(t).unwrap()).collect(),
            nonzero.iter().map(|t| parse_poly(t).unwrap()).collect(),
        )
        .unwrap()
    }

    fn class(s: &StratumSpec) -> MultiPoly {
        StrataEngine::new().virtual_class(s).unwrap().value
    }

    fn poly(t: &str) -> MultiPoly {
        parse_poly(t).unwrap()
    }

    #[test]
    fn point_is_one() {
        assert_eq!(class(&spec(&[], &[], &[])), MultiPoly::one());
    }

    #[test]
    fn punctured_line() {
        assert_eq!(class(&spec(&["a"], &[], &["a"])), poly("q - 1"));
    }

    #[test]
    fn commuting_borel_pairs() {
        // {(a,b,x,y) : a·y − b·x + b − y = 0, a ≠ 0, x ≠ 0} — the commuting
        // pairs inside the 2×2 triangular group with unit determinant slice.
        let s = spec(
            &["a", "b", "x", "y"],
            &["a*y - b*x + b - y"],
            &["a", "x"],
        );
        assert_eq!(class(&s), poly("q^3 - q^2"));
    }

    #[test]
    fn hyperbola() {
        assert_eq!(class(&spec(&["a", "b"], &["a*b - 1"], &[])), poly("q - 1"));
    }

    #[test]
    fn circle_fails() {
        let s = spec(&["x", "y"], &["x^2 + y^2 - 1"], &[]);
        match StrataEngine::new().virtual_class(&s) {
            Err(Error::AlgorithmFailure(msg)) => {
                assert!(msg.contains("x^2 + y^2 - 1"), "{msg}");
            }
            other => panic!("expected algorithm failure, got {other:?}"),
        }
    }

    #[test]
    fn two_lines_via_quadratic_split() {
        assert_eq!(class(&spec(&["x", "y"], &["x^2 - y^2"], &[])), poly("2*q - 1"));
    }

    #[test]
    fn hyperbola_pair_via_quadratic_split() {
        assert_eq!(
            class(&spec(&["x", "y"], &["x^2*y^2 - 1"], &[])),
            poly("2*q - 2")
        );
    }

    #[test]
    fn quadratic_split_agrees_with_odd_characteristic_counts() {
        // Splitting a quadratic completes the square (divides by 2), so its
        // strata count points correctly only away from characteristic 2 —
        // which is why no quadratic-split entry sits in the bundled corpus.
        let engine = StrataEngine::new();
        for s in [
            spec(&["x", "y"], &["x^2 - y^2"], &[]),
            spec(&["x", "y"], &["x^2*y^2 - 1"], &[]),
            spec(&["x", "y"], &["x^4 - y^2"], &[]),
        ] {
            let value = engine.virtual_class(&s).unwrap().value;
            for q0 in [3u8, 5, 7, 9] {
                assert_eq!(
                    value.eval_q(q0 as i64).unwrap(),
                    s.point_count(q0, 1 << 20).unwrap(),
                    "over F_{q0}: {s}"
                );
            }
        }
    }

    #[test]
    fn sl2_point_count() {
        let s = spec(&["a", "b", "c", "d"], &["a*d - b*c - 1"], &[]);
        assert_eq!(class(&s), poly("q^3 - q"));
    }

    #[test]
    fn singular_two_by_two() {
        let s = spec(&["a", "b", "x", "y"], &["a*y - b*x"], &[]);
        assert_eq!(class(&s), poly("q^3 + q^2 - q"));
    }

    #[test]
    fn three_planes() {
        assert_eq!(
            class(&spec(&["x", "y", "z"], &["x*y*z"], &[])),
            poly("3*q^2 - 3*q + 1")
        );
    }

    #[test]
    fn parabola_is_affine_line() {
        assert_eq!(class(&spec(&["x", "y"], &["x^2 - y"], &[])), poly("q"));
    }

    #[test]
    fn partial_split_still_fails_downstream() {
        // (x − 1)(x² + 1): the rational root splits off but the quadratic
        // cofactor has non-square discriminant, so the branch fails.
        let s = spec(&["x"], &["x^3 - x^2 + x - 1"], &[]);
        assert!(matches!(
            StrataEngine::new().virtual_class(&s),
            Err(Error::AlgorithmFailure(_))
        ));
    }

    #[test]
    fn unsatisfiable_constants_collapse() {
        assert_eq!(class(&spec(&["x"], &["3"], &[])), MultiPoly::zero());
        assert_eq!(class(&spec(&["x"], &[], &["0"])), MultiPoly::zero());
        // Vacuous nonzero constant survives as the full line.
        assert_eq!(class(&spec(&["x"], &[], &["5"])), poly("q"));
    }

    #[test]
    fn contradictory_equations_give_zero() {
        assert_eq!(class(&spec(&["x"], &["x", "x - 1"], &[])), MultiPoly::zero());
        assert_eq!(class(&spec(&["x"], &["x"], &["x"])), MultiPoly::zero());
    }

    #[test]
    fn invalid_specs_rejected() {
        let x = Var::intern("x");
        let err = StratumSpec::new(vec![x], vec![poly("x*y")], vec![]);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
        let err = StratumSpec::new(vec![Var::q()], vec![], vec![]);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn point_counts() {
        assert_eq!(
            spec(&["a", "b"], &["a*b - 1"], &[]).point_count(3, 1 << 20).unwrap(),
            BigInt::from(2)
        );
        let commutator = spec(&["a", "b", "x", "y"], &["a*y - b*x + b - y"], &["a", "x"]);
        assert_eq!(commutator.point_count(2, 1 << 20).unwrap(), BigInt::from(4));
        assert_eq!(
            spec(&["a", "b", "c"], &[], &[]).point_count(2, 1 << 20).unwrap(),
            BigInt::from(8)
        );
        assert!(matches!(
            spec(&["a", "b", "c"], &[], &[]).point_count(2, 4),
            Err(Error::ResourceBudget(_))
        ));
    }

    #[test]
    fn node_budget_is_enforced() {
        let engine = StrataEngine::with_config(StrataConfig {
            max_depth: 2000,
            max_nodes: 3,
        });
        let s = spec(&["a", "b", "x", "y"], &["a*y - b*x + b - y"], &["a", "x"]);
        assert!(matches!(
            engine.virtual_class(&s),
            Err(Error::ResourceBudget(_))
        ));
    }

    #[test]
    fn corpus_agrees_with_point_counts() {
        let engine = StrataEngine::new();
        for entry in bundled_corpus().unwrap() {
            let result = engine
                .virtual_class(&entry.spec)
                .unwrap_or_else(|e| panic!("{} failed: {e}", entry.name));
            for q0 in [2u8, 3, 5] {
                let predicted = result.value.eval_q(q0 as i64).unwrap();
                let counted = entry.spec.point_count(q0, 1 << 22).unwrap();
                assert_eq!(
                    predicted, counted,
                    "{} disagrees with enumeration over F_{q0}",
                    entry.name
                );
            }
        }
    }

    #[test]
    fn corpus_size_and_names_unique() {
        let corpus = bundled_corpus().unwrap();
        assert_eq!(corpus.len(), 40);
        let names: HashSet<&str> = corpus.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names.len(), 40);
    }

    #[test]
    fn additivity_over_cut_polynomials() {
        let engine = StrataEngine::new();
        let cuts = ["x", "x - 1", "x*y", "x + y - 1"];
        for entry in bundled_corpus().unwrap() {
            let base = entry.spec.clone();
            let Ok(whole) = engine.virtual_class(&base) else { continue };
            for cut in cuts {
                let f = poly(cut);
                if !f.vars().iter().all(|v| base.vars().contains(v)) {
                    continue;
                }
                let mut zero = base.zero().to_vec();
                zero.push(f.clone());
                let closed =
                    StratumSpec::new(base.vars().to_vec(), zero, base.nonzero().to_vec()).unwrap();
                let mut nonzero = base.nonzero().to_vec();
                nonzero.push(f.clone());
                let open =
                    StratumSpec::new(base.vars().to_vec(), base.zero().to_vec(), nonzero).unwrap();
                if let (Ok(c), Ok(o)) = (engine.virtual_class(&closed), engine.virtual_class(&open))
                {
                    assert_eq!(
                        c.value.add(&o.value),
                        whole.value,
                        "additivity fails for {} cut by {cut}",
                        entry.name
                    );
                }
            }
        }
    }

    #[test]
    fn traces_are_deterministic() {
        let s = spec(&["a", "b", "x", "y"], &["a*y - b*x + b - y"], &["a", "x"]);
        let engine = StrataEngine::new();
        let t1 = engine.virtual_class_traced(&s).unwrap();
        let t2 = engine.virtual_class_traced(&s).unwrap();
        assert_eq!(t1.trace, t2.trace);
        let json = serde_json::to_string(&t1.trace.unwrap()).unwrap();
        assert!(json.contains("linear-elimination"), "{json}");
    }

    #[test]
    fn memo_is_reused_and_consistent() {
        let engine = StrataEngine::new();
        let s = spec(&["a", "b", "x", "y"], &["a*y - b*x + b - y"], &["a", "x"]);
        let first = engine.virtual_class(&s).unwrap().value;
        assert!(engine.memo_len() > 0);
        let second = engine.virtual_class(&s).unwrap().value;
        assert_eq!(first, second);
        // A renamed copy shares the canonical key and the same value.
        let renamed = spec(&["p", "r", "s", "t"], &["p*t - r*s + r - t"], &["p", "s"]);
        assert_eq!(engine.virtual_class(&renamed).unwrap().value, first);
    }

    #[test]
    fn spec_json_roundtrip() {
        let s = spec(&["a", "b"], &["a*b - 1"], &["a"]);
        let json = serde_json::to_string(&s).unwrap();
        let back: StratumSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        let parsed = StratumSpec::from_json(
            r#"{"vars": ["a", "b"], "zero": ["a*b - 1"], "nonzero": ["a"]}"#,
        )
        .unwrap();
        assert_eq!(parsed, s);
    }

    #[test]
    fn canonical_key_ignores_variable_names() {
        let s1 = spec(&["a", "b"], &["a*b - 1"], &[]);
        let s2 = spec(&["u", "z"], &["z*u - 1"], &[]);
        assert_eq!(canonical_key(&s1), canonical_key(&s2));
        let s3 = spec(&["a", "b"], &["a*b - 2"], &[]);
        assert_ne!(canonical_key(&s1), canonical_key(&s3));
    }
}
