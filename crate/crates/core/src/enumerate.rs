//! Exhaustive generation of loop trees for one contraction.
//!
//! Every section (initially the whole contraction) contributes all of its
//! storage-respecting loop orders as plain nests, plus every way to carve a
//! subset of its factors into a producer: unfused, and fused over each
//! distinct common outer prefix that some loop order yields. Producer and
//! consumer are then generated recursively and combined as a cartesian
//! product.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;

use thiserror::Error;

use crate::expr::{ContractionExpr, IndexVar};
use crate::igraph::{self, Access, Big, BigNode, Body, Lig, Role, Schedule, TempTensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenConfig {
    /// Temporaries with more indices than this are never built.
    pub max_memory_depth: usize,
    /// Allow a section that already reads a temporary to split off a
    /// producer that does not include it (two producers feeding one
    /// consumer).
    pub enable_split_mode_b: bool,
    pub dedup: bool,
    pub cap: Option<usize>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_memory_depth: 2,
            enable_split_mode_b: true,
            dedup: true,
            cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnumError {
    #[error("schedule cap of {cap} exceeded after {partial} schedules")]
    CapExceeded { cap: usize, partial: usize },
}

/// All loop orders of `free` compatible with the precedence `edges`, in
/// lexicographic order.
pub fn linear_extensions(
    free: &BTreeSet<IndexVar>,
    edges: &BTreeSet<(IndexVar, IndexVar)>,
) -> Vec<Vec<IndexVar>> {
    fn go(
        left: &mut Vec<IndexVar>,
        edges: &BTreeSet<(IndexVar, IndexVar)>,
        cur: &mut Vec<IndexVar>,
        out: &mut Vec<Vec<IndexVar>>,
    ) {
        if left.is_empty() {
            out.push(cur.clone());
            return;
        }
        for n in 0..left.len() {
            let c = left[n];
            if edges.iter().any(|&(a, b)| b == c && left.contains(&a)) {
                continue;
            }
            left.remove(n);
            cur.push(c);
            go(left, edges, cur, out);
            cur.pop();
            left.insert(n, c);
        }
    }
    let mut left: Vec<IndexVar> = free.iter().copied().collect();
    let mut out = Vec::new();
    go(&mut left, edges, &mut Vec::new(), &mut out);
    out
}

/// Every storage-respecting loop order of the whole contraction.
pub fn gen_ligs(expr: &ContractionExpr) -> Vec<Lig> {
    let edges = expr.access_constraints().unwrap_or_default();
    linear_extensions(&expr.all_indices(), &edges)
        .into_iter()
        .map(|order| Lig::from_expr(expr, order))
        .collect()
}

/// `n! * 2^n * (m!)^(2^n) * (m+1)` for `n` inputs and `m` indices: an upper
/// bound on the number of distinct schedules.
pub fn finiteness_bound(n_inputs: usize, n_indices: usize) -> f64 {
    let fact = |k: usize| (1..=k).map(|x| x as f64).product::<f64>();
    let two_n = 2f64.powi(n_inputs as i32);
    fact(n_inputs) * two_n * fact(n_indices).powf(two_n) * (n_indices as f64 + 1.0)
}

struct Gen<'a> {
    expr: &'a ContractionExpr,
    cfg: &'a GenConfig,
}

impl Gen<'_> {
    fn edges(&self, body: &Body, bound: &BTreeSet<IndexVar>) -> BTreeSet<(IndexVar, IndexVar)> {
        let mut edges = BTreeSet::new();
        for a in &body.factors {
            if let Role::Input(n) = a.role {
                if self.expr.inputs[n].is_sparse() {
                    let chain: Vec<IndexVar> =
                        a.indices.iter().copied().filter(|i| !bound.contains(i)).collect();
                    edges.extend(chain.windows(2).map(|w| (w[0], w[1])));
                }
            }
        }
        edges
    }

    /// All loop trees computing `body` under outer loops `bound`. New
    /// temporaries at this level get id `slot`; children use `2*slot` and
    /// `2*slot+1`, so ids never collide within one tree.
    fn section(&self, body: &Body, bound: &BTreeSet<IndexVar>, slot: u32) -> Vec<Arc<Big>> {
        let free: BTreeSet<IndexVar> = body.indices().difference(bound).copied().collect();
        let orders = linear_extensions(&free, &self.edges(body, bound));
        let mut out: Vec<Arc<Big>> = orders
            .iter()
            .map(|o| {
                Arc::new(Big::Lig(Lig {
                    order: o.clone(),
                    body: body.clone(),
                }))
            })
            .collect();
        let n = body.factors.len();
        if n < 2 || slot >= 1 << 30 {
            return out;
        }
        let reads_temp = body.factors.iter().any(|a| matches!(a.role, Role::Temp(_)));
        for mask in 1u32..(1 << n) - 1 {
            let subset: Vec<usize> = (0..n).filter(|b| mask & (1 << b) != 0).collect();
            let takes_temp = subset
                .iter()
                .any(|&b| matches!(body.factors[b].role, Role::Temp(_)));
            if reads_temp && !takes_temp && !self.cfg.enable_split_mode_b {
                continue;
            }
            // Which fused prefixes can this subset get? One per loop order at
            // most; unfused is always available.
            let mut prefixes: BTreeSet<Vec<IndexVar>> = BTreeSet::new();
            prefixes.insert(Vec::new());
            for o in &orders {
                let lig = Lig {
                    order: o.clone(),
                    body: body.clone(),
                };
                prefixes.insert(igraph::split_lig(&lig, bound, &subset, slot, true).fused);
            }
            let probe = Lig {
                order: orders[0].clone(),
                body: body.clone(),
            };
            let unfused = igraph::split_lig(&probe, bound, &subset, slot, false);
            if subset.len() == 1 {
                let only: BTreeSet<IndexVar> = body.factors[subset[0]]
                    .indices
                    .iter()
                    .copied()
                    .filter(|i| !bound.contains(i))
                    .collect();
                // A lone factor only earns a producer if it sums something away.
                if unfused.temp.indices.len() >= only.len() {
                    continue;
                }
            }
            for fused in prefixes {
                out.extend(self.node(body, bound, slot, &unfused, fused));
            }
        }
        out
    }

    fn node(
        &self,
        body: &Body,
        bound: &BTreeSet<IndexVar>,
        slot: u32,
        unfused: &igraph::Split,
        fused: Vec<IndexVar>,
    ) -> Vec<Arc<Big>> {
        let temp_set: Vec<IndexVar> = unfused
            .temp
            .indices
            .iter()
            .copied()
            .filter(|i| !fused.contains(i))
            .collect();
        if temp_set.len() > self.cfg.max_memory_depth {
            return Vec::new();
        }
        let temp = TempTensor {
            id: slot,
            indices: temp_set,
        };
        let mut inner = bound.clone();
        inner.extend(fused.iter().copied());
        let prod_body = Body {
            lhs: temp.access(),
            factors: unfused.producer.body.factors.clone(),
        };
        let cons_body = Body {
            lhs: body.lhs.clone(),
            factors: unfused
                .consumer
                .body
                .factors
                .iter()
                .map(|a| if a.role == Role::Temp(slot) { temp.access() } else { a.clone() })
                .collect(),
        };
        let producers = self.section(&prod_body, &inner, 2 * slot);
        let consumers = self.section(&cons_body, &inner, 2 * slot + 1);
        let among: BTreeSet<IndexVar> = temp.indices.iter().copied().collect();
        let mut out = Vec::new();
        for p in &producers {
            let order = temp_order(p, &temp.indices);
            let p_forced = igraph::forced_order(p, self.expr, &among);
            let p = if order == temp.indices {
                p.clone()
            } else {
                Arc::new(set_temp_order(p, slot, &order))
            };
            for c in &consumers {
                let mut forced = p_forced.clone();
                forced.extend(igraph::forced_order(c, self.expr, &among));
                if forced.iter().any(|&(a, b)| forced.contains(&(b, a))) {
                    continue;
                }
                let c = if order == temp.indices {
                    c.clone()
                } else {
                    Arc::new(set_temp_order(c, slot, &order))
                };
                out.push(Arc::new(Big::Node(BigNode {
                    fused: fused.clone(),
                    temp: TempTensor {
                        id: slot,
                        indices: order.clone(),
                    },
                    producer: p.clone(),
                    consumer: c,
                })));
            }
        }
        out
    }
}

/// Loop order along the path of the leaf that writes a section's result.
fn writer_path(b: &Big) -> Vec<IndexVar> {
    match b {
        Big::Lig(l) => l.order.clone(),
        Big::Node(n) => {
            let mut v = n.fused.clone();
            v.extend(writer_path(&n.consumer));
            v
        }
    }
}

/// A temporary is laid out in the order its producer walks its indices.
fn temp_order(producer: &Big, indices: &[IndexVar]) -> Vec<IndexVar> {
    writer_path(producer)
        .into_iter()
        .filter(|i| indices.contains(i))
        .collect()
}

fn set_temp_order(b: &Big, id: u32, order: &[IndexVar]) -> Big {
    let fix = |a: &Access| {
        if a.role == Role::Temp(id) {
            Access::temp(id, order.to_vec())
        } else {
            a.clone()
        }
    };
    match b {
        Big::Lig(l) => Big::Lig(Lig {
            order: l.order.clone(),
            body: Body {
                lhs: fix(&l.body.lhs),
                factors: l.body.factors.iter().map(fix).collect(),
            },
        }),
        Big::Node(n) => Big::Node(BigNode {
            fused: n.fused.clone(),
            temp: n.temp.clone(),
            producer: Arc::new(set_temp_order(&n.producer, id, order)),
            consumer: Arc::new(set_temp_order(&n.consumer, id, order)),
        }),
    }
}

/// Generates every schedule of `expr` allowed by `cfg`, sorted by id.
pub fn gen_schedules(expr: &ContractionExpr, cfg: &GenConfig) -> Result<Vec<Schedule>, EnumError> {
    let shared = Arc::new(expr.clone());
    let g = Gen { expr, cfg };
    let root = Body {
        lhs: Access::from_output(&expr.output),
        factors: (0..expr.inputs.len()).map(|n| Access::from_input(expr, n)).collect(),
    };
    let graphs = g.section(&root, &BTreeSet::new(), 1);
    if let Some(cap) = cfg.cap {
        if graphs.len() > cap {
            return Err(EnumError::CapExceeded {
                cap,
                partial: graphs.len(),
            });
        }
    }
    let mut all: Vec<Schedule> = graphs
        .iter()
        .map(|b| Schedule::new(shared.clone(), b))
        .collect();
    if cfg.dedup {
        all = dedup(all);
    }
    all.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(all)
}

/// Drops later schedules whose structure repeats an earlier one.
pub fn dedup(schedules: Vec<Schedule>) -> Vec<Schedule> {
    let mut seen = HashSet::new();
    schedules
        .into_iter()
        .filter(|s| seen.insert(s.id.clone()))
        .collect()
}

/// Counts schedules by (loop depth, memory depth).
pub fn depth_histogram(schedules: &[Schedule]) -> BTreeMap<(usize, usize), usize> {
    let mut h = BTreeMap::new();
    for s in schedules {
        *h.entry((s.graph.loop_depth(), s.graph.mem_depth())).or_insert(0) += 1;
    }
    h
}
