//! Linear and branched iteration graphs.
//!
//! A [`Lig`] is a perfect loop nest: one loop per free index around a single
//! `lhs += f1 * f2 * ...` statement. A [`BigNode`] runs a shared (fused)
//! prefix of loops around two sub-graphs: the producer fills a dense
//! temporary, the consumer reads it. Producer and consumer are themselves
//! [`Big`]s, so the structure nests to any depth.
//!
//! The two mutators are [`loopfuse`] and [`reorder`]; both return a new graph
//! and refuse to build anything [`validate_big`] rejects.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::expr::{ContractionExpr, IndexVar, TensorAccess};

/// Which tensor an access reads or writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Output,
    Input(usize),
    Temp(u32),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Access {
    pub tensor: Arc<str>,
    pub role: Role,
    pub indices: Vec<IndexVar>,
}

impl Access {
    pub fn from_input(expr: &ContractionExpr, n: usize) -> Access {
        let a = &expr.inputs[n];
        Access {
            tensor: a.tensor.clone(),
            role: Role::Input(n),
            indices: a.indices.clone(),
        }
    }

    pub fn from_output(output: &TensorAccess) -> Access {
        Access {
            tensor: output.tensor.clone(),
            role: Role::Output,
            indices: output.indices.clone(),
        }
    }

    pub fn temp(id: u32, indices: Vec<IndexVar>) -> Access {
        Access {
            tensor: format!("t{id}").into(),
            role: Role::Temp(id),
            indices,
        }
    }

    /// Renders the access, replacing indices bound by enclosing loops with `_`.
    pub fn render(&self, bound: &BTreeSet<IndexVar>) -> String {
        if self.indices.is_empty() && matches!(self.role, Role::Temp(_)) {
            return self.tensor.to_string();
        }
        let parts: Vec<String> = self
            .indices
            .iter()
            .map(|i| {
                if bound.contains(i) {
                    "_".to_string()
                } else {
                    i.to_string()
                }
            })
            .collect();
        format!("{}({})", self.tensor, parts.join(","))
    }
}

impl fmt::Display for Access {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(&BTreeSet::new()))
    }
}

/// `lhs += factors[0] * factors[1] * ...`
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Body {
    pub lhs: Access,
    pub factors: Vec<Access>,
}

impl Body {
    pub fn indices(&self) -> BTreeSet<IndexVar> {
        std::iter::once(&self.lhs)
            .chain(&self.factors)
            .flat_map(|a| a.indices.iter().copied())
            .collect()
    }

    fn render(&self, bound: &BTreeSet<IndexVar>) -> String {
        let rhs: Vec<String> = self.factors.iter().map(|a| a.render(bound)).collect();
        format!("{} += {}", self.lhs.render(bound), rhs.join(" * "))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lig {
    pub order: Vec<IndexVar>,
    pub body: Body,
}

impl Lig {
    /// The unsplit nest of a whole contraction in the given loop order.
    pub fn from_expr(expr: &ContractionExpr, order: Vec<IndexVar>) -> Lig {
        Lig {
            order,
            body: Body {
                lhs: Access::from_output(&expr.output),
                factors: (0..expr.inputs.len())
                    .map(|n| Access::from_input(expr, n))
                    .collect(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TempTensor {
    pub id: u32,
    pub indices: Vec<IndexVar>,
}

impl TempTensor {
    pub fn name(&self) -> String {
        format!("t{}", self.id)
    }

    pub fn arity(&self) -> usize {
        self.indices.len()
    }

    pub fn access(&self) -> Access {
        Access::temp(self.id, self.indices.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BigNode {
    pub fused: Vec<IndexVar>,
    pub temp: TempTensor,
    pub producer: Arc<Big>,
    pub consumer: Arc<Big>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Big {
    Lig(Lig),
    Node(BigNode),
}

/// How a loop walks its index: the full dense extent, or the stored
/// coordinates of one level of the sparse input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoopKind {
    Dense,
    Sparse { level: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoopInfo {
    pub index: IndexVar,
    pub kind: LoopKind,
}

/// One root-to-leaf path of a loop tree.
#[derive(Clone, Debug)]
pub struct LeafPath<'a> {
    pub leaf_id: usize,
    pub loops: Vec<LoopInfo>,
    pub lig: &'a Lig,
    /// Indices bound by enclosing fused loops.
    pub bound: BTreeSet<IndexVar>,
}

impl Big {
    pub fn as_lig(&self) -> Option<&Lig> {
        match self {
            Big::Lig(l) => Some(l),
            Big::Node(_) => None,
        }
    }

    /// The access this section ultimately writes.
    pub fn output_access(&self) -> &Access {
        match self {
            Big::Lig(l) => &l.body.lhs,
            Big::Node(n) => n.consumer.output_access(),
        }
    }

    /// Leaves in producer-before-consumer order.
    pub fn leaves(&self) -> Vec<&Lig> {
        let mut out = Vec::new();
        self.visit_leaves(&mut |l| out.push(l));
        out
    }

    fn visit_leaves<'a>(&'a self, f: &mut impl FnMut(&'a Lig)) {
        match self {
            Big::Lig(l) => f(l),
            Big::Node(n) => {
                n.producer.visit_leaves(f);
                n.consumer.visit_leaves(f);
            }
        }
    }

    /// Temporaries in pre-order (a node's own temp before its children's).
    pub fn temps(&self) -> Vec<&TempTensor> {
        let mut out = Vec::new();
        fn go<'a>(b: &'a Big, out: &mut Vec<&'a TempTensor>) {
            if let Big::Node(n) = b {
                out.push(&n.temp);
                go(&n.producer, out);
                go(&n.consumer, out);
            }
        }
        go(self, &mut out);
        out
    }

    fn touches(&self, role: Role) -> bool {
        self.leaves()
            .iter()
            .any(|l| l.body.factors.iter().any(|a| a.role == role) || l.body.lhs.role == role)
    }

    /// Every index used by some leaf, minus those in `bound`.
    pub fn free_indices(&self, bound: &BTreeSet<IndexVar>) -> BTreeSet<IndexVar> {
        self.leaves()
            .iter()
            .flat_map(|l| l.body.indices())
            .filter(|i| !bound.contains(i))
            .collect()
    }

    /// Root-to-leaf loop paths with each loop classified as dense or sparse.
    ///
    /// A loop over a mode of the sparse input walks that level's stored
    /// coordinates whenever the sparse input is read somewhere beneath it.
    pub fn leaf_paths<'a>(&'a self, expr: &ContractionExpr) -> Vec<LeafPath<'a>> {
        let sparse = expr.sparse_input().map(|n| (n, &expr.inputs[n]));
        let mut out = Vec::new();
        let mut prefix = Vec::new();
        self.collect_paths(sparse, &mut prefix, &mut out);
        out
    }

    /// Kind of a loop over `index` whose body is `self`.
    pub(crate) fn loop_kind(&self, expr: &ContractionExpr, index: IndexVar) -> LoopKind {
        self.kind_of(expr.sparse_input().map(|n| (n, &expr.inputs[n])), index)
    }

    fn kind_of(&self, sparse: Option<(usize, &TensorAccess)>, index: IndexVar) -> LoopKind {
        match sparse {
            Some((n, access)) => match access.mode_of(index) {
                Some(level) if self.touches(Role::Input(n)) => LoopKind::Sparse { level },
                _ => LoopKind::Dense,
            },
            None => LoopKind::Dense,
        }
    }

    fn collect_paths<'a>(
        &'a self,
        sparse: Option<(usize, &TensorAccess)>,
        prefix: &mut Vec<LoopInfo>,
        out: &mut Vec<LeafPath<'a>>,
    ) {
        let classify = |index: IndexVar, below: &Big| below.kind_of(sparse, index);
        let depth = prefix.len();
        match self {
            Big::Lig(l) => {
                let bound = prefix.iter().map(|p| p.index).collect();
                let mut loops = prefix.clone();
                loops.extend(l.order.iter().map(|&index| LoopInfo {
                    index,
                    kind: classify(index, self),
                }));
                out.push(LeafPath {
                    leaf_id: out.len(),
                    loops,
                    lig: l,
                    bound,
                });
            }
            Big::Node(n) => {
                prefix.extend(n.fused.iter().map(|&index| LoopInfo {
                    index,
                    kind: classify(index, self),
                }));
                n.producer.collect_paths(sparse, prefix, out);
                n.consumer.collect_paths(sparse, prefix, out);
            }
        }
        prefix.truncate(depth);
    }

    pub fn loop_depth(&self) -> usize {
        match self {
            Big::Lig(l) => l.order.len(),
            Big::Node(n) => n.fused.len() + n.producer.loop_depth().max(n.consumer.loop_depth()),
        }
    }

    pub fn mem_depth(&self) -> usize {
        self.temps().iter().map(|t| t.arity()).max().unwrap_or(0)
    }

    fn max_temp_id(&self) -> u32 {
        self.temps().iter().map(|t| t.id).max().unwrap_or(0)
    }

    /// Renames temporaries to `t1, t2, ...` in pre-order.
    pub fn canonicalize_temps(&self) -> Big {
        let mut map = BTreeMap::new();
        for (n, t) in self.temps().iter().enumerate() {
            map.insert(t.id, n as u32 + 1);
        }
        self.rename_temps(&map)
    }

    fn rename_temps(&self, map: &BTreeMap<u32, u32>) -> Big {
        let fix = |a: &Access| match a.role {
            Role::Temp(id) => Access::temp(map[&id], a.indices.clone()),
            _ => a.clone(),
        };
        match self {
            Big::Lig(l) => Big::Lig(Lig {
                order: l.order.clone(),
                body: Body {
                    lhs: fix(&l.body.lhs),
                    factors: l.body.factors.iter().map(fix).collect(),
                },
            }),
            Big::Node(n) => Big::Node(BigNode {
                fused: n.fused.clone(),
                temp: TempTensor {
                    id: map[&n.temp.id],
                    indices: n.temp.indices.clone(),
                },
                producer: Arc::new(n.producer.rename_temps(map)),
                consumer: Arc::new(n.consumer.rename_temps(map)),
            }),
        }
    }

    /// Structural key: tree shape, loop orders, temp indices and factor
    /// multisets. Temporaries must already be canonical.
    pub fn structural_key(&self) -> String {
        let mut s = String::new();
        self.write_key(&mut s);
        s
    }

    fn write_key(&self, s: &mut String) {
        let list = |v: &[IndexVar]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
        match self {
            Big::Lig(l) => {
                let mut factors: Vec<String> = l.body.factors.iter().map(|a| a.to_string()).collect();
                factors.sort();
                let _ = write!(
                    s,
                    "[{}|{}<-{}]",
                    list(&l.order),
                    l.body.lhs,
                    factors.join("*")
                );
            }
            Big::Node(n) => {
                let _ = write!(s, "{{{}|{}(", list(&n.fused), n.temp.name());
                let _ = write!(s, "{})|", list(&n.temp.indices));
                n.producer.write_key(s);
                s.push('|');
                n.consumer.write_key(s);
                s.push('}');
            }
        }
    }

    /// Compact one-line rendering, e.g.
    /// `l,m <t1(k); producer: i,j,k: t1(k) += ...; consumer: n,k: A(_,_,n) += t1(k) * E(k,n)>`.
    pub fn pretty(&self) -> String {
        self.pretty_in(&BTreeSet::new())
    }

    fn pretty_in(&self, bound: &BTreeSet<IndexVar>) -> String {
        let list = |v: &[IndexVar]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
        match self {
            Big::Lig(l) if l.order.is_empty() => l.body.render(bound),
            Big::Lig(l) => format!("{}: {}", list(&l.order), l.body.render(bound)),
            Big::Node(n) => {
                let mut inner = bound.clone();
                inner.extend(n.fused.iter().copied());
                let head = if n.fused.is_empty() {
                    String::new()
                } else {
                    format!("{} ", list(&n.fused))
                };
                format!(
                    "{head}<{}; producer: {}; consumer: {}>",
                    n.temp.access().render(&inner),
                    n.producer.pretty_in(&inner),
                    n.consumer.pretty_in(&inner)
                )
            }
        }
    }

    /// `forall(...)` / `where(consumer, producer)` concrete index notation.
    pub fn to_ir(&self) -> String {
        let mut s = String::new();
        self.write_ir(&mut s, 0);
        s
    }

    fn write_ir(&self, s: &mut String, indent: usize) {
        match self {
            Big::Lig(l) => {
                for i in &l.order {
                    let _ = write!(s, "forall({i}, ");
                }
                s.push_str(&l.body.render(&BTreeSet::new()));
                s.push_str(&")".repeat(l.order.len()));
            }
            Big::Node(n) => {
                for i in &n.fused {
                    let _ = write!(s, "forall({i}, ");
                }
                let pad = " ".repeat(indent + 2);
                let _ = write!(s, "where(\n{pad}");
                n.consumer.write_ir(s, indent + 2);
                let _ = write!(s, ",\n{pad}");
                n.producer.write_ir(s, indent + 2);
                s.push(')');
                s.push_str(&")".repeat(n.fused.len()));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("leaf {leaf}: {tensor} traversed out of storage order along {path:?}")]
    AccessOrder {
        leaf: usize,
        tensor: String,
        path: Vec<IndexVar>,
    },
    #[error("temporary {temp}: producer and consumer force opposite orders of {a} and {b}")]
    SharedOrder { temp: String, a: IndexVar, b: IndexVar },
    #[error("temporary {temp} has indices {found:?}, expected {expected:?}")]
    TempIndices {
        temp: String,
        expected: Vec<IndexVar>,
        found: Vec<IndexVar>,
    },
    #[error("temporary {0} is not written by its producer or not read by its consumer")]
    TempWiring(String),
    #[error("index {index} repeats along {path:?}")]
    RepeatedIndex { index: IndexVar, path: Vec<IndexVar> },
    #[error("leaf {leaf}: loops {order:?} do not match the free indices {free:?} of its body")]
    LeafLoops {
        leaf: usize,
        order: Vec<IndexVar>,
        free: Vec<IndexVar>,
    },
}

/// Checks a loop tree against the structural validity rules.
///
/// 1. Along every root-to-leaf path, each sparse access is traversed in its
///    mode order.
/// 2. For every temporary, the orders of its indices forced by storage on
///    the producer side and on the consumer side can be made identical.
/// 3. Each temporary's indices are exactly the unfused indices shared by its
///    producer and consumer.
/// 4. No index repeats on a path, and every leaf loops exactly over its free
///    indices.
pub fn validate_big(graph: &Big, expr: &ContractionExpr) -> Vec<Violation> {
    let mut out = Vec::new();
    for path in graph.leaf_paths(expr) {
        let indices: Vec<IndexVar> = path.loops.iter().map(|l| l.index).collect();
        let mut seen = BTreeSet::new();
        for &i in &indices {
            if !seen.insert(i) {
                out.push(Violation::RepeatedIndex {
                    index: i,
                    path: indices.clone(),
                });
            }
        }
        let free: BTreeSet<IndexVar> = path
            .lig
            .body
            .indices()
            .into_iter()
            .filter(|i| !path.bound.contains(i))
            .collect();
        let order_set: BTreeSet<IndexVar> = path.lig.order.iter().copied().collect();
        if order_set != free || order_set.len() != path.lig.order.len() {
            out.push(Violation::LeafLoops {
                leaf: path.leaf_id,
                order: path.lig.order.clone(),
                free: free.into_iter().collect(),
            });
        }
        for a in &path.lig.body.factors {
            if let Role::Input(n) = a.role {
                if expr.inputs[n].is_sparse() && !is_subsequence(&a.indices, &indices) {
                    out.push(Violation::AccessOrder {
                        leaf: path.leaf_id,
                        tensor: a.to_string(),
                        path: indices.clone(),
                    });
                }
            }
        }
    }
    validate_nodes(graph, expr, &BTreeSet::new(), &mut out);
    out
}

fn is_subsequence(needle: &[IndexVar], hay: &[IndexVar]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}

/// Precedences among `among` forced by the sparse accesses inside `side`.
pub(crate) fn forced_order(
    side: &Big,
    expr: &ContractionExpr,
    among: &BTreeSet<IndexVar>,
) -> BTreeSet<(IndexVar, IndexVar)> {
    let mut edges = BTreeSet::new();
    for leaf in side.leaves() {
        for a in &leaf.body.factors {
            if let Role::Input(n) = a.role {
                if expr.inputs[n].is_sparse() {
                    let chain: Vec<IndexVar> =
                        a.indices.iter().copied().filter(|i| among.contains(i)).collect();
                    for x in 0..chain.len() {
                        for y in x + 1..chain.len() {
                            edges.insert((chain[x], chain[y]));
                        }
                    }
                }
            }
        }
    }
    edges
}

fn validate_nodes(
    graph: &Big,
    expr: &ContractionExpr,
    bound: &BTreeSet<IndexVar>,
    out: &mut Vec<Violation>,
) {
    let Big::Node(n) = graph else { return };
    let mut inner = bound.clone();
    inner.extend(n.fused.iter().copied());
    let shared: BTreeSet<IndexVar> = n
        .producer
        .free_indices(&inner)
        .intersection(&n.consumer.free_indices(&inner))
        .copied()
        .collect();
    let found: BTreeSet<IndexVar> = n.temp.indices.iter().copied().collect();
    if found != shared || found.len() != n.temp.indices.len() {
        out.push(Violation::TempIndices {
            temp: n.temp.name(),
            expected: shared.iter().copied().collect(),
            found: n.temp.indices.clone(),
        });
    }
    let role = Role::Temp(n.temp.id);
    let written = n.producer.output_access();
    let reads: usize = n
        .consumer
        .leaves()
        .iter()
        .map(|l| l.body.factors.iter().filter(|a| a.role == role).count())
        .sum();
    if written.role != role || written.indices != n.temp.indices || reads != 1 {
        out.push(Violation::TempWiring(n.temp.name()));
    }
    let mut forced = forced_order(&n.producer, expr, &found);
    forced.extend(forced_order(&n.consumer, expr, &found));
    if let Some(&(a, b)) = forced.iter().find(|&&(a, b)| forced.contains(&(b, a))) {
        out.push(Violation::SharedOrder {
            temp: n.temp.name(),
            a,
            b,
        });
    }
    validate_nodes(&n.producer, expr, &inner, out);
    validate_nodes(&n.consumer, expr, &inner, out);
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("path {0:?} does not address a linear section")]
    NotLinear(Vec<u8>),
    #[error("path {0:?} leaves the graph")]
    BadPath(Vec<u8>),
    #[error("split position {loc} out of range for {factors} factors")]
    LocOutOfRange { loc: usize, factors: usize },
    #[error("{0:?} is not a permutation of the section's loops")]
    NotPermutation(Vec<IndexVar>),
    #[error("transformation refused: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

/// Returns the linear section at `path` (0 = producer, 1 = consumer) and the
/// indices bound by fused loops above it.
pub fn section_at<'a>(
    graph: &'a Big,
    path: &[u8],
) -> Result<(&'a Lig, BTreeSet<IndexVar>), GraphError> {
    let mut cur = graph;
    let mut bound = BTreeSet::new();
    for &step in path {
        match cur {
            Big::Node(n) => {
                bound.extend(n.fused.iter().copied());
                cur = match step {
                    0 => &n.producer,
                    1 => &n.consumer,
                    _ => return Err(GraphError::BadPath(path.to_vec())),
                };
            }
            Big::Lig(_) => return Err(GraphError::BadPath(path.to_vec())),
        }
    }
    match cur {
        Big::Lig(l) => Ok((l, bound)),
        Big::Node(_) => Err(GraphError::NotLinear(path.to_vec())),
    }
}

fn replace_at(graph: &Big, path: &[u8], new: Big) -> Big {
    match path.split_first() {
        None => new,
        Some((&step, rest)) => {
            let Big::Node(n) = graph else {
                unreachable!("path validated by section_at")
            };
            let mut n = n.clone();
            if step == 0 {
                n.producer = Arc::new(replace_at(&n.producer, rest, new));
            } else {
                n.consumer = Arc::new(replace_at(&n.consumer, rest, new));
            }
            Big::Node(n)
        }
    }
}

/// Indices of the temporary produced by a split: the producer's free indices
/// that are still needed by the consumer or the output, ordered as in
/// `loop_order`.
pub fn temp_indices(
    producer: &BTreeSet<IndexVar>,
    consumer: &BTreeSet<IndexVar>,
    output: &BTreeSet<IndexVar>,
    loop_order: &[IndexVar],
) -> Vec<IndexVar> {
    loop_order
        .iter()
        .copied()
        .filter(|i| producer.contains(i) && (consumer.contains(i) || output.contains(i)))
        .collect()
}

/// [`temp_indices`] over plain tensor accesses: output indices in output
/// order, then the rest by first appearance in the producer.
pub fn temp_indices_of(
    producer: &[TensorAccess],
    consumer: &[TensorAccess],
    output: &TensorAccess,
) -> Vec<IndexVar> {
    let mut order: Vec<IndexVar> = output.indices.clone();
    for a in producer {
        for &i in &a.indices {
            if !order.contains(&i) {
                order.push(i);
            }
        }
    }
    temp_indices(
        &crate::expr::indices_of(producer),
        &crate::expr::indices_of(consumer),
        &crate::expr::indices_of([output]),
        &order,
    )
}

/// Result of splitting one linear section into producer and consumer.
#[derive(Debug, Clone)]
pub(crate) struct Split {
    pub fused: Vec<IndexVar>,
    pub temp: TempTensor,
    pub producer: Lig,
    pub consumer: Lig,
}

/// Splits `lig` so that `producer_factors` (positions into the body) feed a
/// new temporary. Both halves keep the relative loop order of `lig`; with
/// `fuse` their longest common prefix becomes the shared outer loops.
pub(crate) fn split_lig(
    lig: &Lig,
    bound: &BTreeSet<IndexVar>,
    producer_factors: &[usize],
    temp_id: u32,
    fuse: bool,
) -> Split {
    let free = |accs: &mut dyn Iterator<Item = &Access>| -> BTreeSet<IndexVar> {
        accs.flat_map(|a| a.indices.iter().copied())
            .filter(|i| !bound.contains(i))
            .collect()
    };
    let factors = &lig.body.factors;
    let is_prod = |n: usize| producer_factors.contains(&n);
    let prod_set = free(&mut factors.iter().enumerate().filter(|(n, _)| is_prod(*n)).map(|(_, a)| a));
    let cons_set = free(&mut factors.iter().enumerate().filter(|(n, _)| !is_prod(*n)).map(|(_, a)| a));
    let out_set = free(&mut std::iter::once(&lig.body.lhs));
    let shared = temp_indices(&prod_set, &cons_set, &out_set, &lig.order);

    let restrict = |keep: &dyn Fn(&IndexVar) -> bool| -> Vec<IndexVar> {
        lig.order.iter().copied().filter(|i| keep(i)).collect()
    };
    let prod_order = restrict(&|i| prod_set.contains(i));
    let cons_order = restrict(&|i| cons_set.contains(i) || out_set.contains(i) || shared.contains(i));
    let fused: Vec<IndexVar> = if fuse {
        prod_order
            .iter()
            .zip(&cons_order)
            .take_while(|(a, b)| a == b)
            .map(|(a, _)| *a)
            .collect()
    } else {
        Vec::new()
    };
    let strip = |v: &[IndexVar]| -> Vec<IndexVar> {
        v.iter().copied().filter(|i| !fused.contains(i)).collect()
    };
    let temp = TempTensor {
        id: temp_id,
        indices: strip(&shared),
    };

    let first_prod = producer_factors.iter().copied().min().unwrap_or(0);
    let mut cons_factors = Vec::new();
    for (n, a) in factors.iter().enumerate() {
        if n == first_prod {
            cons_factors.push(temp.access());
        }
        if !is_prod(n) {
            cons_factors.push(a.clone());
        }
    }
    let mut prod_positions: Vec<usize> = producer_factors.to_vec();
    prod_positions.sort_unstable();
    Split {
        producer: Lig {
            order: strip(&prod_order),
            body: Body {
                lhs: temp.access(),
                factors: prod_positions.iter().map(|&n| factors[n].clone()).collect(),
            },
        },
        consumer: Lig {
            order: strip(&cons_order),
            body: Body {
                lhs: lig.body.lhs.clone(),
                factors: cons_factors,
            },
        },
        fused,
        temp,
    }
}

/// Splits the linear section at `path` after `loc` factors and fuses the
/// common outer loops of the two halves.
///
/// With `producer_left` the first `loc` factors form the producer and the
/// temporary takes their place at the front of the consumer; otherwise the
/// last `loc` factors form the producer and the temporary is appended.
pub fn loopfuse(
    graph: &Big,
    expr: &ContractionExpr,
    path: &[u8],
    loc: usize,
    producer_left: bool,
) -> Result<Big, GraphError> {
    let (lig, bound) = section_at(graph, path)?;
    let n = lig.body.factors.len();
    if loc == 0 || loc >= n {
        return Err(GraphError::LocOutOfRange { loc, factors: n });
    }
    let producer: Vec<usize> = if producer_left {
        (0..loc).collect()
    } else {
        (n - loc..n).collect()
    };
    let split = split_lig(lig, &bound, &producer, graph.max_temp_id() + 1, true);
    let node = Big::Node(BigNode {
        fused: split.fused,
        temp: split.temp,
        producer: Arc::new(Big::Lig(split.producer)),
        consumer: Arc::new(Big::Lig(split.consumer)),
    });
    let result = replace_at(graph, path, node);
    let violations = validate_big(&result, expr);
    if violations.is_empty() {
        Ok(result)
    } else {
        Err(GraphError::Invalid(violations))
    }
}

/// Replaces the loop order of the linear section at `path`.
pub fn reorder(
    graph: &Big,
    expr: &ContractionExpr,
    path: &[u8],
    order: &[IndexVar],
) -> Result<Big, GraphError> {
    let (lig, _) = section_at(graph, path)?;
    let mut want = order.to_vec();
    let mut have = lig.order.clone();
    want.sort();
    have.sort();
    if want != have {
        return Err(GraphError::NotPermutation(order.to_vec()));
    }
    let result = replace_at(
        graph,
        path,
        Big::Lig(Lig {
            order: order.to_vec(),
            body: lig.body.clone(),
        }),
    );
    let violations = validate_big(&result, expr);
    if violations.is_empty() {
        Ok(result)
    } else {
        Err(GraphError::Invalid(violations))
    }
}

/// Collapses a branched graph into one equivalent linear nest.
///
/// Innermost nodes go first: the producer's factors replace the temporary in
/// the consumer, and the producer-only (contracted) loops are merged into the
/// consumer's chain. Storage order of the sparse input is a hard constraint;
/// otherwise consumer loops keep their order and the producer's extra loops
/// follow.
pub fn linearize(graph: &Big, expr: &ContractionExpr) -> Lig {
    linearize_in(graph, expr, &BTreeSet::new())
}

fn linearize_in(graph: &Big, expr: &ContractionExpr, bound: &BTreeSet<IndexVar>) -> Lig {
    let n = match graph {
        Big::Lig(l) => return l.clone(),
        Big::Node(n) => n,
    };
    let mut inner = bound.clone();
    inner.extend(n.fused.iter().copied());
    let producer = linearize_in(&n.producer, expr, &inner);
    let consumer = linearize_in(&n.consumer, expr, &inner);
    let role = Role::Temp(n.temp.id);
    let mut factors = Vec::new();
    for a in &consumer.body.factors {
        if a.role == role {
            factors.extend(producer.body.factors.iter().cloned());
        } else {
            factors.push(a.clone());
        }
    }
    let body = Body {
        lhs: consumer.body.lhs.clone(),
        factors,
    };

    let mut preference: Vec<IndexVar> = consumer.order.clone();
    preference.extend(producer.order.iter().copied().filter(|i| !consumer.order.contains(i)));
    let mut edges = BTreeSet::new();
    for a in &body.factors {
        if let Role::Input(k) = a.role {
            if expr.inputs[k].is_sparse() {
                let chain: Vec<IndexVar> =
                    a.indices.iter().copied().filter(|i| !inner.contains(i)).collect();
                edges.extend(chain.windows(2).map(|w| (w[0], w[1])));
            }
        }
    }
    let mut remaining = preference.clone();
    let mut merged = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let pos = remaining
            .iter()
            .position(|&c| !edges.iter().any(|&(a, b)| b == c && remaining.contains(&a)))
            .expect("valid graphs have acyclic storage constraints");
        merged.push(remaining.remove(pos));
    }
    let mut order = n.fused.clone();
    order.extend(merged);
    Lig { order, body }
}

/// A complete loop structure for a contraction, identified by a stable hash
/// of its structure.
#[derive(Clone, Debug, Serialize)]
pub struct Schedule {
    pub id: String,
    pub graph: Arc<Big>,
    #[serde(skip)]
    pub expr: Arc<ContractionExpr>,
}

impl PartialEq for Schedule {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}

impl Eq for Schedule {}

impl Schedule {
    /// Canonicalizes temporary names and derives the id.
    pub fn new(expr: Arc<ContractionExpr>, graph: &Big) -> Schedule {
        let graph = graph.canonicalize_temps();
        let id = structural_hash(&graph);
        Schedule {
            id,
            graph: Arc::new(graph),
            expr,
        }
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_big(&self.graph, &self.expr)
    }

    pub fn pretty(&self) -> String {
        self.graph.pretty()
    }
}

/// First 16 hex digits of the SHA-256 of the structural key.
pub fn structural_hash(graph: &Big) -> String {
    let digest = Sha256::digest(graph.structural_key().as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
