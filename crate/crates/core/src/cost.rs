//! Symbolic iteration-time and auxiliary-memory polynomials.
//!
//! Time counts innermost-body executions of every leaf. A dense loop
//! contributes its extent. Loops walking the sparse input contribute one
//! prefix-count symbol for the deepest level reached: `nnz(B,d)` is the
//! number of stored coordinate prefixes of length `d`. Dense-format levels
//! below the last compressed one multiply in their full extent.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::expr::{ContractionExpr, IndexVar, LevelFormat};
use crate::igraph::{LoopKind, Schedule, TempTensor};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    Bound(IndexVar),
    PrefixNnz { tensor: Arc<str>, depth: usize },
    Sparsity(Arc<str>),
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Bound(i) => f.write_str(&i.bound_symbol()),
            Symbol::PrefixNnz { tensor, depth } => write!(f, "nnz({tensor},{depth})"),
            Symbol::Sparsity(t) => write!(f, "sparsity({t})"),
        }
    }
}

impl Symbol {
    /// Identifier usable in SMT-LIB and other plain-name contexts.
    pub fn plain_name(&self) -> String {
        match self {
            Symbol::Bound(i) => i.bound_symbol(),
            Symbol::PrefixNnz { tensor, depth } => format!("nnz_{tensor}_{depth}"),
            Symbol::Sparsity(t) => format!("sparsity_{t}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Term {
    pub coef: u64,
    /// Sorted, with repetition for powers.
    pub factors: Vec<Symbol>,
}

/// Sum of products with positive integer coefficients, kept canonical: terms
/// sorted by their factor lists, like terms merged, no zero terms.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SymPoly {
    terms: Vec<Term>,
}

impl SymPoly {
    pub fn zero() -> SymPoly {
        SymPoly::default()
    }

    pub fn constant(c: u64) -> SymPoly {
        SymPoly::from_terms(vec![Term {
            coef: c,
            factors: Vec::new(),
        }])
    }

    pub fn one() -> SymPoly {
        SymPoly::constant(1)
    }

    pub fn symbol(s: Symbol) -> SymPoly {
        SymPoly::from_terms(vec![Term {
            coef: 1,
            factors: vec![s],
        }])
    }

    pub fn bound(i: IndexVar) -> SymPoly {
        SymPoly::symbol(Symbol::Bound(i))
    }

    pub fn from_terms(terms: Vec<Term>) -> SymPoly {
        let mut merged: BTreeMap<Vec<Symbol>, u64> = BTreeMap::new();
        for mut t in terms {
            t.factors.sort();
            *merged.entry(t.factors).or_insert(0) += t.coef;
        }
        SymPoly {
            terms: merged
                .into_iter()
                .filter(|(_, c)| *c != 0)
                .map(|(factors, coef)| Term { coef, factors })
                .collect(),
        }
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn add(&self, other: &SymPoly) -> SymPoly {
        SymPoly::from_terms(self.terms.iter().chain(&other.terms).cloned().collect())
    }

    pub fn mul(&self, other: &SymPoly) -> SymPoly {
        let mut out = Vec::new();
        for a in &self.terms {
            for b in &other.terms {
                let mut factors = a.factors.clone();
                factors.extend(b.factors.iter().cloned());
                out.push(Term {
                    coef: a.coef * b.coef,
                    factors,
                });
            }
        }
        SymPoly::from_terms(out)
    }

    pub fn symbols(&self) -> std::collections::BTreeSet<Symbol> {
        self.terms
            .iter()
            .flat_map(|t| t.factors.iter().cloned())
            .collect()
    }

    /// Evaluates with a symbol lookup; `Err` names the first unbound symbol.
    pub fn eval_with(&self, lookup: impl Fn(&Symbol) -> Option<f64>) -> Result<f64, CostError> {
        let mut total = 0.0;
        for t in &self.terms {
            let mut v = t.coef as f64;
            for s in &t.factors {
                v *= lookup(s).ok_or_else(|| CostError::Unbound(s.to_string()))?;
            }
            total += v;
        }
        Ok(total)
    }

    /// Exact integer evaluation; `None` on an unbound symbol or overflow.
    pub fn eval_exact(&self, lookup: impl Fn(&Symbol) -> Option<u128>) -> Option<u128> {
        let mut total: u128 = 0;
        for t in &self.terms {
            let mut v = t.coef as u128;
            for s in &t.factors {
                v = v.checked_mul(lookup(s)?)?;
            }
            total = total.checked_add(v)?;
        }
        Some(total)
    }
}

impl fmt::Display for SymPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("0");
        }
        for (n, t) in self.terms.iter().enumerate() {
            if n > 0 {
                f.write_str(" + ")?;
            }
            let mut parts: Vec<String> = Vec::new();
            if t.coef != 1 || t.factors.is_empty() {
                parts.push(t.coef.to_string());
            }
            parts.extend(t.factors.iter().map(|s| s.to_string()));
            f.write_str(&parts.join("*"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CostError {
    #[error("unbound symbol {0}")]
    Unbound(String),
    #[error("cannot parse polynomial at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
}

fn parse_symbol(s: &str) -> Option<Symbol> {
    if let Some(inner) = s.strip_prefix("nnz(").and_then(|r| r.strip_suffix(')')) {
        let (t, d) = inner.split_once(',')?;
        let depth: usize = d.trim().parse().ok()?;
        let t = t.trim();
        if t.is_empty() || !t.chars().all(|c| c.is_ascii_alphanumeric()) || depth == 0 {
            return None;
        }
        return Some(Symbol::PrefixNnz {
            tensor: t.into(),
            depth,
        });
    }
    if let Some(t) = s.strip_prefix("sparsity(").and_then(|r| r.strip_suffix(')')) {
        let t = t.trim();
        if t.is_empty() || !t.chars().all(|c| c.is_ascii_alphanumeric()) {
            return None;
        }
        return Some(Symbol::Sparsity(t.into()));
    }
    if let Some(rest) = s.strip_prefix("nnz_") {
        let (t, d) = rest.rsplit_once('_')?;
        return parse_symbol(&format!("nnz({t},{d})"));
    }
    if let Some(t) = s.strip_prefix("sparsity_") {
        return parse_symbol(&format!("sparsity({t})"));
    }
    IndexVar::from_bound_symbol(s).map(Symbol::Bound)
}

impl FromStr for SymPoly {
    type Err = CostError;

    /// Parses the canonical text form, e.g. `2*I*J*nnz(B,2) + K`.
    fn from_str(text: &str) -> Result<SymPoly, CostError> {
        let mut terms = Vec::new();
        let mut offset = 0;
        for raw_term in text.split('+') {
            let mut coef: u64 = 1;
            let mut factors = Vec::new();
            // Split on '*' outside parentheses.
            let mut depth = 0;
            let mut start = 0;
            let bytes = raw_term.as_bytes();
            let mut pieces = Vec::new();
            for (n, &b) in bytes.iter().enumerate() {
                match b {
                    b'(' => depth += 1,
                    b')' => depth -= 1,
                    b'*' if depth == 0 => {
                        pieces.push((start, &raw_term[start..n]));
                        start = n + 1;
                    }
                    _ => {}
                }
            }
            pieces.push((start, &raw_term[start..]));
            for (at, piece) in pieces {
                let pos = offset + at + (piece.len() - piece.trim_start().len());
                let p = piece.trim();
                if p.is_empty() {
                    return Err(CostError::Parse {
                        pos,
                        msg: "empty factor".into(),
                    });
                }
                if p.bytes().all(|b| b.is_ascii_digit()) {
                    let c: u64 = p.parse().map_err(|_| CostError::Parse {
                        pos,
                        msg: format!("coefficient {p} too large"),
                    })?;
                    coef = coef.checked_mul(c).ok_or(CostError::Parse {
                        pos,
                        msg: "coefficient overflow".into(),
                    })?;
                } else {
                    factors.push(parse_symbol(p).ok_or_else(|| CostError::Parse {
                        pos,
                        msg: format!("unknown symbol {p}"),
                    })?);
                }
            }
            terms.push(Term { coef, factors });
            offset += raw_term.len() + 1;
        }
        Ok(SymPoly::from_terms(terms))
    }
}

impl Serialize for SymPoly {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SymPoly {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostProfile {
    pub time: SymPoly,
    pub mem: SymPoly,
    pub loop_depth: usize,
    pub mem_depth: usize,
    pub temps: Vec<TempTensor>,
}

/// Trip-count polynomial of a walk that reaches `depth` levels of the sparse
/// input.
fn sparse_walk(expr: &ContractionExpr, n: usize, depth: usize) -> SymPoly {
    let access = &expr.inputs[n];
    let last_compressed = (0..depth)
        .rev()
        .find(|&l| access.levels[l] == LevelFormat::Compressed);
    let mut p = match last_compressed {
        Some(c) => SymPoly::symbol(Symbol::PrefixNnz {
            tensor: access.tensor.clone(),
            depth: c + 1,
        }),
        None => SymPoly::one(),
    };
    let from = last_compressed.map_or(0, |c| c + 1);
    for l in from..depth {
        p = p.mul(&SymPoly::bound(access.indices[l]));
    }
    p
}

pub fn time_complexity(s: &Schedule) -> SymPoly {
    let expr = &s.expr;
    let mut total = SymPoly::zero();
    for path in s.graph.leaf_paths(expr) {
        let mut term = SymPoly::one();
        let mut reach = 0;
        for l in &path.loops {
            match l.kind {
                LoopKind::Dense => term = term.mul(&SymPoly::bound(l.index)),
                LoopKind::Sparse { level } => reach = reach.max(level + 1),
            }
        }
        if reach > 0 {
            let n = expr.sparse_input().expect("sparse loops need a sparse input");
            term = term.mul(&sparse_walk(expr, n, reach));
        }
        total = total.add(&term);
    }
    total
}

pub fn memory_complexity(s: &Schedule) -> SymPoly {
    s.graph.temps().iter().fold(SymPoly::zero(), |acc, t| {
        acc.add(
            &t.indices
                .iter()
                .fold(SymPoly::one(), |p, &i| p.mul(&SymPoly::bound(i))),
        )
    })
}

pub fn depths(s: &Schedule) -> (usize, usize) {
    (s.graph.loop_depth(), s.graph.mem_depth())
}

pub fn profile(s: &Schedule) -> CostProfile {
    let (loop_depth, mem_depth) = depths(s);
    CostProfile {
        time: time_complexity(s),
        mem: memory_complexity(s),
        loop_depth,
        mem_depth,
        temps: s.graph.temps().into_iter().cloned().collect(),
    }
}

fn default_elem_bytes() -> u64 {
    4
}

/// Concrete values for every symbol: extents by bound symbol (`"I"`),
/// sparsity per tensor, and optionally measured prefix counts that override
/// the uniform-sparsity estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Binding {
    pub bounds: BTreeMap<String, u64>,
    #[serde(default)]
    pub sparsity: BTreeMap<String, f64>,
    #[serde(default = "default_elem_bytes")]
    pub elem_bytes: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub prefix_nnz: BTreeMap<String, BTreeMap<usize, f64>>,
    /// Mode indices of each tensor, needed to estimate prefix counts.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub modes: BTreeMap<String, Vec<IndexVar>>,
}

impl Default for Binding {
    fn default() -> Self {
        Binding {
            bounds: BTreeMap::new(),
            sparsity: BTreeMap::new(),
            elem_bytes: default_elem_bytes(),
            prefix_nnz: BTreeMap::new(),
            modes: BTreeMap::new(),
        }
    }
}

impl Binding {
    pub fn new() -> Binding {
        Binding::default()
    }

    pub fn bound(mut self, symbol: &str, value: u64) -> Binding {
        self.bounds.insert(symbol.to_string(), value);
        self
    }

    pub fn sparse(mut self, tensor: &str, s: f64) -> Binding {
        self.sparsity.insert(tensor.to_string(), s);
        self
    }

    /// Records the mode order of every input so prefix counts can be
    /// estimated.
    pub fn for_expr(mut self, expr: &ContractionExpr) -> Binding {
        for a in &expr.inputs {
            self.modes.insert(a.tensor.to_string(), a.indices.clone());
        }
        self
    }

    fn extent(&self, i: IndexVar) -> Option<f64> {
        self.bounds.get(&i.bound_symbol()).map(|&v| v as f64)
    }

    /// Expected nonempty prefixes of length `depth` under uniform sparsity,
    /// unless a measured count was supplied.
    pub fn prefix_estimate(&self, tensor: &str, depth: usize) -> Option<f64> {
        if let Some(v) = self.prefix_nnz.get(tensor).and_then(|m| m.get(&depth)) {
            return Some(*v);
        }
        let modes = self.modes.get(tensor)?;
        if depth == 0 || depth > modes.len() {
            return None;
        }
        let s = *self.sparsity.get(tensor)?;
        let dims: Option<Vec<f64>> = modes.iter().map(|&i| self.extent(i)).collect();
        let dims = dims?;
        let outer: f64 = dims[..depth].iter().product();
        let inner: f64 = dims[depth..].iter().product();
        if depth == dims.len() {
            Some(s * outer)
        } else {
            Some(outer * (1.0 - (1.0 - s).powf(inner)))
        }
    }

    pub fn lookup(&self, sym: &Symbol) -> Option<f64> {
        match sym {
            Symbol::Bound(i) => self.extent(*i),
            Symbol::PrefixNnz { tensor, depth } => self.prefix_estimate(tensor, *depth),
            Symbol::Sparsity(t) => self.sparsity.get(&**t).copied(),
        }
    }
}

pub fn evaluate(p: &SymPoly, b: &Binding) -> Result<f64, CostError> {
    p.eval_with(|s| b.lookup(s))
}

/// Bytes needed for all temporaries; a scalar temporary takes one element.
pub fn aux_bytes(s: &Schedule, b: &Binding) -> Result<u64, CostError> {
    let elems = evaluate(&memory_complexity(s), b)?;
    Ok(elems.round() as u64 * b.elem_bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{idx, parse_einsum, parse_format_pattern, Formats};
    use crate::igraph::{loopfuse, reorder, Big, Lig};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn kernel() -> Arc<ContractionExpr> {
        let mut f = Formats::new();
        f.insert("B".into(), parse_format_pattern("ccc").unwrap());
        Arc::new(parse_einsum("A(l,m,n)=B(i,j,k)*C(i,l)*D(j,m)*E(k,n)", &f).unwrap())
    }

    fn ix(names: &str) -> Vec<IndexVar> {
        names.split(',').map(idx).collect()
    }

    fn unfused(e: &Arc<ContractionExpr>) -> Big {
        Big::Lig(Lig::from_expr(e, ix("l,m,n,i,j,k")))
    }

    fn case1() -> Binding {
        Binding::new()
            .bound("I", 1800)
            .bound("J", 800)
            .bound("K", 1000)
            .bound("L", 64)
            .bound("M", 16)
            .bound("N", 32)
            .sparse("B", 0.08)
    }

    fn p(s: &str) -> SymPoly {
        s.parse().unwrap()
    }

    #[test]
    fn linear_schedule_time_and_memory() {
        let e = kernel();
        let s = Schedule::new(e.clone(), &unfused(&e));
        assert_eq!(time_complexity(&s), p("nnz(B,3)*L*M*N"));
        assert!(memory_complexity(&s).is_zero());
        assert_eq!(depths(&s), (6, 0));
    }

    #[test]
    fn fused_k_temp_time_and_memory() {
        let e = kernel();
        let g = loopfuse(&unfused(&e), &e, &[], 3, true).unwrap();
        let s = Schedule::new(e.clone(), &g);
        assert_eq!(time_complexity(&s), p("nnz(B,3)*L*M + L*M*N*K"));
        assert_eq!(memory_complexity(&s), p("K"));
        assert_eq!(depths(&s), (5, 1));
    }

    #[test]
    fn two_level_memory_counts_scalar() {
        let e = kernel();
        let g = loopfuse(&unfused(&e), &e, &[], 2, true).unwrap();
        let g = reorder(&g, &e, &[1], &ix("m,k,n,j")).unwrap();
        let g = loopfuse(&g, &e, &[1], 2, true).unwrap();
        let s = Schedule::new(e.clone(), &g);
        assert_eq!(memory_complexity(&s), p("J*K + 1"));
        assert_eq!(time_complexity(&s), p("nnz(B,3)*L + L*M*K*J + L*M*K*N"));
    }

    #[test]
    fn unfused_three_index_temp_has_memory_depth_three() {
        let e = kernel();
        let l = unfused(&e);
        let split = crate::igraph::split_lig(
            l.as_lig().unwrap(),
            &Default::default(),
            &[0, 1],
            1,
            false,
        );
        let g = Big::Node(crate::igraph::BigNode {
            fused: split.fused,
            temp: split.temp,
            producer: Arc::new(Big::Lig(split.producer)),
            consumer: Arc::new(Big::Lig(split.consumer)),
        });
        let s = Schedule::new(e, &g);
        assert!(s.validate().is_empty());
        assert_eq!(depths(&s).1, 3);
    }

    #[test]
    fn dense_nest_is_product_of_bounds() {
        let e = Arc::new(parse_einsum("X(i,k)=A(i,j)*B(j,k)", &Formats::new()).unwrap());
        let s = Schedule::new(e.clone(), &Big::Lig(Lig::from_expr(&e, ix("i,k,j"))));
        assert_eq!(time_complexity(&s), p("I*J*K"));
    }

    #[test]
    fn dense_levels_multiply_after_last_compressed() {
        let mut f = Formats::new();
        f.insert("B".into(), parse_format_pattern("cd").unwrap());
        let e = Arc::new(parse_einsum("y(i)=B(i,j)*x(j)", &f).unwrap());
        let s = Schedule::new(e.clone(), &Big::Lig(Lig::from_expr(&e, ix("i,j"))));
        assert_eq!(time_complexity(&s), p("nnz(B,1)*J"));
        let mut f = Formats::new();
        f.insert("B".into(), parse_format_pattern("dc").unwrap());
        let e = Arc::new(parse_einsum("y(i)=B(i,j)*x(j)", &f).unwrap());
        let s = Schedule::new(e.clone(), &Big::Lig(Lig::from_expr(&e, ix("i,j"))));
        assert_eq!(time_complexity(&s), p("nnz(B,2)"));
    }

    #[test]
    fn case_one_values() {
        let e = kernel();
        let b = case1().for_expr(&e);
        let a = evaluate(&p("nnz(B,3)*L*M*N"), &b).unwrap();
        let direct = 0.08 * 1800.0 * 800.0 * 1000.0 * 64.0 * 16.0 * 32.0;
        assert_relative_eq!(a, direct, max_relative = 1e-12);
        assert_relative_eq!(a, 3.77487e12, max_relative = 1e-5);
        let fused = evaluate(&p("nnz(B,3)*L*M + L*M*N*K"), &b).unwrap();
        assert!((a / fused - 31.7).abs() < 0.5, "{}", a / fused);
        assert_eq!(evaluate(&SymPoly::one(), &Binding::new()).unwrap(), 1.0);
    }

    #[test]
    fn prefix_estimate_uses_nonempty_fiber_expectation() {
        let e = kernel();
        let b = case1().for_expr(&e);
        let want = 1800.0 * (1.0 - (1.0f64 - 0.08).powf(800.0 * 1000.0));
        assert_relative_eq!(b.prefix_estimate("B", 1).unwrap(), want);
        let mut m = b.clone();
        m.prefix_nnz.insert("B".into(), [(1, 7.0)].into());
        assert_eq!(m.prefix_estimate("B", 1), Some(7.0));
    }

    #[test]
    fn unbound_symbol_is_named() {
        assert_eq!(
            evaluate(&p("2*Q"), &Binding::new()),
            Err(CostError::Unbound("Q".into()))
        );
    }

    #[test]
    fn aux_bytes_of_temporaries() {
        let e = kernel();
        let g = loopfuse(&unfused(&e), &e, &[], 2, true).unwrap();
        let s = Schedule::new(e.clone(), &g);
        let b = Binding::new().bound("J", 800).bound("K", 1000);
        assert_eq!(aux_bytes(&s, &b).unwrap(), 3_200_000);
        let b = Binding::new().bound("J", 1600).bound("K", 2000);
        let mib = aux_bytes(&s, &b).unwrap() as f64 / (1u64 << 20) as f64;
        assert!((mib - 12.21).abs() < 0.01, "{mib}");
    }

    #[test]
    fn text_form_round_trips() {
        let q = p("3*K + I*J*nnz(B,2) + K");
        assert_eq!(q.to_string().parse::<SymPoly>().unwrap(), q);
        assert_eq!(q, p("I*J*nnz(B,2) + 4*K"));
        assert_eq!(p("J*I"), p("I*J"));
        assert!(matches!("I * foo".parse::<SymPoly>(), Err(CostError::Parse { pos: 4, .. })));
        assert_eq!(SymPoly::zero().to_string(), "0");
        assert_eq!(p("sparsity(B)*I").symbols().len(), 2);
    }

    fn arb_poly() -> impl Strategy<Value = SymPoly> {
        let sym = prop_oneof![
            Just(Symbol::Bound(idx("i"))),
            Just(Symbol::Bound(idx("j"))),
            Just(Symbol::PrefixNnz {
                tensor: "B".into(),
                depth: 1
            }),
        ];
        prop::collection::vec((1u64..5, prop::collection::vec(sym, 0..3)), 0..4).prop_map(|ts| {
            SymPoly::from_terms(
                ts.into_iter()
                    .map(|(coef, factors)| Term { coef, factors })
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn evaluation_is_a_ring_homomorphism(a in arb_poly(), b in arb_poly(), i in 1u64..50, j in 1u64..50, n in 1u64..50) {
            let mut bind = Binding::new().bound("I", i).bound("J", j);
            bind.prefix_nnz.insert("B".into(), [(1, n as f64)].into());
            let ev = |q: &SymPoly| evaluate(q, &bind).unwrap();
            prop_assert!((ev(&a.add(&b)) - (ev(&a) + ev(&b))).abs() < 1e-6);
            prop_assert!((ev(&a.mul(&b)) - ev(&a) * ev(&b)).abs() <= 1e-9 * ev(&a.mul(&b)).max(1.0));
        }

        #[test]
        fn printing_and_parsing_agree(a in arb_poly()) {
            prop_assert_eq!(a.to_string().parse::<SymPoly>().unwrap(), a);
        }
    }
}
