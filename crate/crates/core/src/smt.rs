//! Symbolic dominance between (time, memory) polynomial pairs, decided by an
//! external SMT-LIB2 solver over nonlinear real arithmetic.
//!
//! `s` is dominated by `c` when somewhere in the constrained region `s` is
//! strictly worse in one objective and no better in the other (Q1), and
//! nowhere is `s` strictly better in one objective and no worse in the other
//! (Q2). Unknown answers never remove anything.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::cost::{Binding, CostError, SymPoly, Symbol};
use crate::expr::{ContractionExpr, IndexVar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RelOp {
    Lt,
    Le,
    Eq,
    Ge,
    Gt,
}

impl RelOp {
    fn smt(self) -> &'static str {
        match self {
            RelOp::Lt => "<",
            RelOp::Le => "<=",
            RelOp::Eq => "=",
            RelOp::Ge => ">=",
            RelOp::Gt => ">",
        }
    }

    fn holds(self, a: f64, b: f64) -> bool {
        match self {
            RelOp::Lt => a < b,
            RelOp::Le => a <= b,
            RelOp::Eq => (a - b).abs() <= 1e-9 * a.abs().max(b.abs()),
            RelOp::Ge => a >= b,
            RelOp::Gt => a > b,
        }
    }
}

/// `lhs op rhs` over polynomials.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Relation {
    pub lhs: SymPoly,
    pub op: RelOp,
    pub rhs: SymPoly,
}

impl Relation {
    pub fn new(lhs: SymPoly, op: RelOp, rhs: SymPoly) -> Relation {
        Relation { lhs, op, rhs }
    }

    pub fn symbols(&self) -> BTreeSet<Symbol> {
        let mut s = self.lhs.symbols();
        s.extend(self.rhs.symbols());
        s
    }

    pub fn holds(&self, lookup: &impl Fn(&Symbol) -> Option<f64>) -> Result<bool, CostError> {
        Ok(self
            .op
            .holds(self.lhs.eval_with(lookup)?, self.rhs.eval_with(lookup)?))
    }

    fn to_smt(&self) -> String {
        format!("({} {} {})", self.op.smt(), poly_smt(&self.lhs), poly_smt(&self.rhs))
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.lhs, self.op.smt(), self.rhs)
    }
}

impl FromStr for Relation {
    type Err = CostError;

    /// `J = 2*I`, `K <= 4*I`, ...
    fn from_str(text: &str) -> Result<Relation, CostError> {
        for (tok, op) in [
            ("<=", RelOp::Le),
            (">=", RelOp::Ge),
            ("<", RelOp::Lt),
            (">", RelOp::Gt),
            ("=", RelOp::Eq),
        ] {
            if let Some(at) = text.find(tok) {
                let lhs = text[..at].parse::<SymPoly>()?;
                let rhs = text[at + tok.len()..].parse::<SymPoly>().map_err(|e| match e {
                    CostError::Parse { pos, msg } => CostError::Parse {
                        pos: pos + at + tok.len(),
                        msg,
                    },
                    other => other,
                })?;
                return Ok(Relation::new(lhs, op, rhs));
            }
        }
        Err(CostError::Parse {
            pos: 0,
            msg: "expected one of <, <=, =, >=, >".into(),
        })
    }
}

impl Serialize for Relation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Relation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

fn symbol_ser<S: Serializer>(sym: &Symbol, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&sym.to_string())
}

fn symbol_de<'de, D: Deserializer<'de>>(d: D) -> Result<Symbol, D::Error> {
    let text = String::deserialize(d)?;
    let p: SymPoly = text.parse().map_err(serde::de::Error::custom)?;
    match p.terms() {
        [t] if t.coef == 1 && t.factors.len() == 1 => Ok(t.factors[0].clone()),
        _ => Err(serde::de::Error::custom(format!("{text} is not a single symbol"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    #[serde(serialize_with = "symbol_ser", deserialize_with = "symbol_de")]
    pub symbol: Symbol,
    pub lo: f64,
    pub hi: f64,
}

/// Everything asserted about the symbols before a dominance query.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    #[serde(default)]
    pub ranges: Vec<Range>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inferred: Vec<Relation>,
    #[serde(default)]
    pub user: Vec<Relation>,
    /// Mode order of the sparse input, used to sample prefix counts.
    #[serde(skip)]
    pub modes: BTreeMap<String, Vec<IndexVar>>,
}

#[derive(Debug, Error)]
pub enum ConstraintError {
    #[error("range for {symbol} has lo {lo} > hi {hi}")]
    EmptyRange { symbol: String, lo: f64, hi: f64 },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ConstraintSet {
    pub fn from_json(text: &str) -> Result<ConstraintSet, ConstraintError> {
        let cs: ConstraintSet = serde_json::from_str(text)?;
        for r in &cs.ranges {
            if r.lo > r.hi {
                return Err(ConstraintError::EmptyRange {
                    symbol: r.symbol.to_string(),
                    lo: r.lo,
                    hi: r.hi,
                });
            }
        }
        Ok(cs)
    }

    pub fn with_inferred(mut self, expr: &ContractionExpr) -> ConstraintSet {
        self.inferred = infer_constraints(expr);
        if let Some(a) = expr.sparse_access() {
            self.modes.insert(a.tensor.to_string(), a.indices.clone());
        }
        self
    }

    pub fn range(mut self, symbol: Symbol, lo: f64, hi: f64) -> ConstraintSet {
        self.ranges.push(Range { symbol, lo, hi });
        self
    }

    pub fn symbols(&self) -> BTreeSet<Symbol> {
        let mut s: BTreeSet<Symbol> = self.ranges.iter().map(|r| r.symbol.clone()).collect();
        for r in self.inferred.iter().chain(&self.user) {
            s.extend(r.symbols());
        }
        s
    }

    fn range_of(&self, sym: &Symbol) -> Option<(f64, f64)> {
        self.ranges.iter().rev().find(|r| &r.symbol == sym).map(|r| (r.lo, r.hi))
    }

    /// True when every range and relation holds at the point.
    pub fn satisfied_by(&self, lookup: &impl Fn(&Symbol) -> Option<f64>) -> bool {
        self.ranges.iter().all(|r| {
            lookup(&r.symbol).is_some_and(|v| r.lo <= v && v <= r.hi)
        }) && self
            .inferred
            .iter()
            .chain(&self.user)
            .all(|rel| rel.holds(lookup).unwrap_or(false))
    }
}

/// Facts implied by storage: prefix counts grow with depth by at most the
/// next extent, never exceed the dense prefix size, and the full-depth count
/// is sparsity times the dense size. All extents are at least 1.
pub fn infer_constraints(expr: &ContractionExpr) -> Vec<Relation> {
    let mut out = Vec::new();
    for i in expr.all_indices() {
        out.push(Relation::new(SymPoly::bound(i), RelOp::Ge, SymPoly::one()));
    }
    if let Some(a) = expr.sparse_access() {
        let nnz = |d: usize| {
            SymPoly::symbol(Symbol::PrefixNnz {
                tensor: a.tensor.clone(),
                depth: d,
            })
        };
        let sparsity = SymPoly::symbol(Symbol::Sparsity(a.tensor.clone()));
        let mut dense = SymPoly::one();
        for d in 1..=a.order() {
            dense = dense.mul(&SymPoly::bound(a.indices[d - 1]));
            out.push(Relation::new(nnz(d), RelOp::Ge, SymPoly::zero()));
            out.push(Relation::new(nnz(d), RelOp::Le, dense.clone()));
            if d < a.order() {
                out.push(Relation::new(nnz(d), RelOp::Le, nnz(d + 1)));
                out.push(Relation::new(
                    nnz(d + 1),
                    RelOp::Le,
                    nnz(d).mul(&SymPoly::bound(a.indices[d])),
                ));
            }
        }
        out.push(Relation::new(nnz(a.order()), RelOp::Eq, sparsity.mul(&dense)));
        out.push(Relation::new(sparsity.clone(), RelOp::Gt, SymPoly::zero()));
        out.push(Relation::new(sparsity, RelOp::Le, SymPoly::one()));
    }
    out
}

fn real(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains('e') {
        // SMT-LIB has no exponent syntax.
        format!("{v:.12}")
    } else if s.contains('.') {
        s
    } else {
        format!("{s}.0")
    }
}

fn poly_smt(p: &SymPoly) -> String {
    let terms: Vec<String> = p
        .terms()
        .iter()
        .map(|t| {
            let mut parts: Vec<String> = Vec::new();
            if t.coef != 1 || t.factors.is_empty() {
                parts.push(real(t.coef as f64));
            }
            parts.extend(t.factors.iter().map(|s| s.plain_name()));
            if parts.len() == 1 {
                parts.pop().unwrap()
            } else {
                format!("(* {})", parts.join(" "))
            }
        })
        .collect();
    match terms.len() {
        0 => "0.0".into(),
        1 => terms[0].clone(),
        _ => format!("(+ {})", terms.join(" ")),
    }
}

/// Time and memory polynomials of one candidate.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Objectives {
    pub time: SymPoly,
    pub mem: SymPoly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Query {
    /// `s` is worse in both objectives somewhere, strictly in one.
    Q1,
    /// `s` is strictly better in either objective somewhere.
    Q2,
    /// `s` is better in both objectives somewhere, strictly in one.
    Q2Both,
}

/// What it takes to remove `s` in favor of `c`, given Q1 is sat.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    /// `s` is never strictly better in time or in memory ([`Query::Q2`]).
    #[default]
    Pointwise,
    /// `s` is never better in both at once ([`Query::Q2Both`]). Removes a
    /// schedule that is always faster but always larger.
    Both,
}

impl Rule {
    pub fn q2(self) -> Query {
        match self {
            Rule::Pointwise => Query::Q2,
            Rule::Both => Query::Q2Both,
        }
    }
}

impl FromStr for Rule {
    type Err = String;

    fn from_str(s: &str) -> Result<Rule, String> {
        match s {
            "pointwise" => Ok(Rule::Pointwise),
            "both" => Ok(Rule::Both),
            _ => Err(format!("expected `pointwise` or `both`, got `{s}`")),
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::Pointwise => "pointwise",
            Rule::Both => "both",
        })
    }
}

/// One complete SMT-LIB2 script deciding `query` for `s` against `c`.
pub fn emit_smtlib(query: Query, cs: &ConstraintSet, s: &Objectives, c: &Objectives) -> String {
    let mut syms = cs.symbols();
    for p in [&s.time, &s.mem, &c.time, &c.mem] {
        syms.extend(p.symbols());
    }
    let mut out = String::from("(set-logic QF_NRA)\n");
    for sym in &syms {
        let _ = writeln!(out, "(declare-fun {} () Real)", sym.plain_name());
    }
    for r in &cs.ranges {
        let name = r.symbol.plain_name();
        let _ = writeln!(out, "(assert (<= {} {name} {}))", real(r.lo), real(r.hi));
    }
    for rel in cs.inferred.iter().chain(&cs.user) {
        let _ = writeln!(out, "(assert {})", rel.to_smt());
    }
    let (ts, ns, tc, nc) = (
        poly_smt(&s.time),
        poly_smt(&s.mem),
        poly_smt(&c.time),
        poly_smt(&c.mem),
    );
    let clause = match query {
        Query::Q1 => format!(
            "(or (and (> {ts} {tc}) (>= {ns} {nc})) (and (>= {ts} {tc}) (> {ns} {nc})))"
        ),
        Query::Q2 => format!("(or (< {ts} {tc}) (< {ns} {nc}))"),
        Query::Q2Both => format!(
            "(or (and (<= {ts} {tc}) (< {ns} {nc})) (and (< {ts} {tc}) (<= {ns} {nc})))"
        ),
    };
    let _ = writeln!(out, "(assert {clause})");
    out.push_str("(check-sat)\n(exit)\n");
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SatResult {
    Sat,
    Unsat,
    Unknown(String),
}

/// An SMT-LIB2 solver run as a child process, one process per query.
#[derive(Clone, Debug)]
pub struct Solver {
    pub path: PathBuf,
    pub args: Vec<String>,
    pub timeout: Duration,
}

/// Environment variable naming the default solver executable.
pub const SOLVER_ENV: &str = "FUSESCHED_SOLVER";

impl Solver {
    pub fn new(path: impl Into<PathBuf>, timeout: Duration) -> Solver {
        Solver {
            path: path.into(),
            args: vec!["-in".into(), "-smt2".into()],
            timeout,
        }
    }

    /// Explicit path, else `$FUSESCHED_SOLVER`, else `z3` on the `PATH`.
    /// `None` when nothing runnable is found.
    pub fn locate(explicit: Option<PathBuf>, timeout: Duration) -> Option<Solver> {
        let candidate = explicit
            .or_else(|| std::env::var_os(SOLVER_ENV).map(PathBuf::from))
            .or_else(|| {
                std::env::var_os("PATH").and_then(|paths| {
                    std::env::split_paths(&paths)
                        .map(|d| d.join("z3"))
                        .find(|p| p.is_file())
                })
            })?;
        let s = Solver::new(candidate, timeout);
        s.available().then_some(s)
    }

    pub fn available(&self) -> bool {
        matches!(self.check("(check-sat)\n"), SatResult::Sat)
    }

    pub fn check(&self, script: &str) -> SatResult {
        let ms = self.timeout.as_millis().max(1);
        let full = format!("(set-option :timeout {ms})\n{script}");
        let mut child = match Command::new(&self.path)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
        {
            Ok(c) => c,
            Err(e) => return SatResult::Unknown(format!("cannot start solver: {e}")),
        };
        if let Some(mut stdin) = child.stdin.take() {
            let _ = stdin.write_all(full.as_bytes());
        }
        let deadline = Instant::now() + self.timeout;
        loop {
            match child.try_wait() {
                Ok(Some(_)) => break,
                Ok(None) if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return SatResult::Unknown("timeout".into());
                }
                Ok(None) => std::thread::sleep(Duration::from_micros(500)),
                Err(e) => return SatResult::Unknown(e.to_string()),
            }
        }
        let mut text = String::new();
        if let Some(mut out) = child.stdout.take() {
            let _ = out.read_to_string(&mut text);
        }
        match text.split_whitespace().next() {
            Some("sat") => SatResult::Sat,
            Some("unsat") => SatResult::Unsat,
            Some("unknown") => SatResult::Unknown("solver answered unknown".into()),
            _ => SatResult::Unknown(format!("unexpected solver output: {}", text.trim())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DominanceVerdict {
    Dominated,
    NotDominated,
    Unknown(String),
}

/// Draws points in the constrained region to find cheap witnesses before
/// calling the solver. Prefix counts follow the uniform-sparsity estimate.
pub struct Sampler<'a> {
    cs: &'a ConstraintSet,
    syms: Vec<Symbol>,
    rng: ChaCha8Rng,
}

impl<'a> Sampler<'a> {
    pub fn new(cs: &'a ConstraintSet, polys: &[&SymPoly], seed: u64) -> Sampler<'a> {
        let mut syms = cs.symbols();
        for p in polys {
            syms.extend(p.symbols());
        }
        Sampler {
            cs,
            syms: syms.into_iter().collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A random point, or `None` if it violates the constraints.
    pub fn draw(&mut self) -> Option<BTreeMap<Symbol, f64>> {
        let mut b = Binding::new();
        b.modes = self.cs.modes.clone();
        let mut point = BTreeMap::new();
        for s in &self.syms {
            let v = match s {
                Symbol::Bound(i) => {
                    let (lo, hi) = self.cs.range_of(s).unwrap_or((1.0, 4096.0));
                    let (lo, hi) = (lo.ceil(), hi.floor().max(lo.ceil()));
                    let v = self.rng.gen_range(lo..=hi).round();
                    b.bounds.insert(i.bound_symbol(), v as u64);
                    v
                }
                Symbol::Sparsity(t) => {
                    let (lo, hi) = self.cs.range_of(s).unwrap_or((1e-4, 1.0));
                    let v = if lo < hi { self.rng.gen_range(lo..=hi) } else { lo };
                    b.sparsity.insert(t.to_string(), v);
                    v
                }
                Symbol::PrefixNnz { .. } => continue,
            };
            point.insert(s.clone(), v);
        }
        for s in &self.syms {
            if let Symbol::PrefixNnz { .. } = s {
                let v = match b.lookup(s) {
                    Some(v) => v,
                    None => {
                        let (lo, hi) = self.cs.range_of(s).unwrap_or((0.0, 1e9));
                        if lo < hi { self.rng.gen_range(lo..=hi) } else { lo }
                    }
                };
                point.insert(s.clone(), v);
            }
        }
        self.cs
            .satisfied_by(&|x: &Symbol| point.get(x).copied())
            .then_some(point)
    }
}

fn eval_at(p: &SymPoly, point: &BTreeMap<Symbol, f64>) -> Option<f64> {
    p.eval_with(|x| point.get(x).copied()).ok()
}

/// Evaluates both queries' clauses at a concrete point.
/// Strict comparisons need a relative margin so rounding never fakes one.
fn clauses_at(
    rule: Rule,
    s: &Objectives,
    c: &Objectives,
    point: &BTreeMap<Symbol, f64>,
) -> Option<(bool, bool)> {
    let (ts, ns) = (eval_at(&s.time, point)?, eval_at(&s.mem, point)?);
    let (tc, nc) = (eval_at(&c.time, point)?, eval_at(&c.mem, point)?);
    let gt = |a: f64, b: f64| a > b + 1e-9 * a.abs().max(b.abs());
    let q1 = (gt(ts, tc) && ns >= nc) || (ts >= tc && gt(ns, nc));
    let q2 = match rule {
        Rule::Pointwise => gt(tc, ts) || gt(nc, ns),
        Rule::Both => (ts <= tc && gt(nc, ns)) || (gt(tc, ts) && ns <= nc),
    };
    Some((q1, q2))
}

/// Number of random points tried before asking the solver.
const PRESCREEN_SAMPLES: usize = 64;

pub fn check_dominates(
    rule: Rule,
    s: &Objectives,
    c: &Objectives,
    cs: &ConstraintSet,
    solver: &Solver,
) -> DominanceVerdict {
    // A sampled point where s is strictly better settles Q2 as sat.
    let mut sampler = Sampler::new(cs, &[&s.time, &s.mem, &c.time, &c.mem], 0x5eed);
    let mut q1_witness = false;
    for _ in 0..PRESCREEN_SAMPLES {
        if let Some(p) = sampler.draw() {
            if let Some((q1, q2)) = clauses_at(rule, s, c, &p) {
                if q2 {
                    return DominanceVerdict::NotDominated;
                }
                q1_witness |= q1;
            }
        }
    }
    if !q1_witness {
        match solver.check(&emit_smtlib(Query::Q1, cs, s, c)) {
            SatResult::Sat => {}
            SatResult::Unsat => return DominanceVerdict::NotDominated,
            SatResult::Unknown(why) => return DominanceVerdict::Unknown(why),
        }
    }
    match solver.check(&emit_smtlib(rule.q2(), cs, s, c)) {
        SatResult::Unsat => DominanceVerdict::Dominated,
        SatResult::Sat => DominanceVerdict::NotDominated,
        SatResult::Unknown(why) => DominanceVerdict::Unknown(why),
    }
}

/// The pure solver decision, without the sampling shortcut.
pub fn check_dominates_exact(
    rule: Rule,
    s: &Objectives,
    c: &Objectives,
    cs: &ConstraintSet,
    solver: &Solver,
) -> (SatResult, SatResult, DominanceVerdict) {
    let q1 = solver.check(&emit_smtlib(Query::Q1, cs, s, c));
    let q2 = solver.check(&emit_smtlib(rule.q2(), cs, s, c));
    let verdict = match (&q1, &q2) {
        (SatResult::Unknown(w), _) | (_, SatResult::Unknown(w)) => DominanceVerdict::Unknown(w.clone()),
        (SatResult::Sat, SatResult::Unsat) => DominanceVerdict::Dominated,
        _ => DominanceVerdict::NotDominated,
    };
    (q1, q2, verdict)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Removal {
    pub removed: usize,
    pub by: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Stage3Log {
    pub removals: Vec<Removal>,
    pub unknown: usize,
}

/// Indices of the candidates that survive: each is kept unless some other
/// candidate of the ORIGINAL list dominates it.
pub fn stage3_prune(
    rule: Rule,
    reps: &[Objectives],
    cs: &ConstraintSet,
    solver: &Solver,
) -> (Vec<usize>, Stage3Log) {
    #[cfg(feature = "parallel")]
    let all = (0..reps.len()).into_par_iter();
    #[cfg(not(feature = "parallel"))]
    let all = 0..reps.len();
    let verdicts: Vec<(Option<usize>, usize)> = all
        .map(|s| {
            let mut unknown = 0;
            for c in 0..reps.len() {
                if c == s {
                    continue;
                }
                match check_dominates(rule, &reps[s], &reps[c], cs, solver) {
                    DominanceVerdict::Dominated => return (Some(c), unknown),
                    DominanceVerdict::Unknown(why) => {
                        log::warn!("dominance of {s} by {c} undecided: {why}");
                        unknown += 1;
                    }
                    DominanceVerdict::NotDominated => {}
                }
            }
            (None, unknown)
        })
        .collect();
    let mut log = Stage3Log::default();
    let mut kept = Vec::new();
    for (s, (by, unknown)) in verdicts.into_iter().enumerate() {
        log.unknown += unknown;
        match by {
            Some(by) => log.removals.push(Removal { removed: s, by }),
            None => kept.push(s),
        }
    }
    (kept, log)
}
