//! The pruning pipeline. Stages 1-3 need only symbols; stages 4 and 5 need
//! concrete extents and sparsity.
//!
//! 1. Drop schedules whose temporaries have too many dimensions, then group
//!    the rest by their (time, memory) polynomials.
//! 2. Drop schedules beaten on (loop depth, memory depth).
//! 3. Drop groups dominated symbolically (see [`crate::smt`]).
//! 4. Keep the fastest schedules whose temporaries fit the cache budget.
//! 5. Pick the one with the cheapest innermost strides.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::cost::{self, Binding, CostError, CostProfile, SymPoly};
use crate::enumerate::{self, EnumError, GenConfig};
use crate::expr::{ContractionExpr, IndexVar};
use crate::igraph::Schedule;
use crate::smt::{self, ConstraintSet, Objectives, Rule, Solver, Stage3Log};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TieBreak {
    /// Lowest schedule id.
    Hash,
    /// Seeded uniform choice.
    Random(u64),
}

impl FromStr for TieBreak {
    type Err = String;

    fn from_str(s: &str) -> Result<TieBreak, String> {
        if s == "hash" {
            return Ok(TieBreak::Hash);
        }
        match s.strip_prefix("random:").map(str::parse) {
            Some(Ok(seed)) => Ok(TieBreak::Random(seed)),
            _ => Err(format!("expected `hash` or `random:SEED`, got `{s}`")),
        }
    }
}

impl fmt::Display for TieBreak {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TieBreak::Hash => f.write_str("hash"),
            TieBreak::Random(seed) => write!(f, "random:{seed}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub mem_depth_threshold: usize,
    pub llc_bytes: u64,
    pub llc_fraction: f64,
    pub skip_stage2: bool,
    pub skip_stage3: bool,
    pub tie_break: TieBreak,
    pub rule: Rule,
    pub solver: Option<PathBuf>,
    pub solver_timeout: Duration,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mem_depth_threshold: 2,
            llc_bytes: 20 << 20,
            llc_fraction: 0.5,
            skip_stage2: false,
            skip_stage3: false,
            tie_break: TieBreak::Hash,
            rule: Rule::Pointwise,
            solver: None,
            solver_timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Candidate {
    pub schedule: Schedule,
    pub profile: CostProfile,
}

impl Candidate {
    pub fn new(schedule: Schedule) -> Candidate {
        let profile = cost::profile(&schedule);
        Candidate { schedule, profile }
    }

    pub fn depths(&self) -> (usize, usize) {
        (self.profile.loop_depth, self.profile.mem_depth)
    }
}

/// Schedules sharing identical time and memory polynomials.
#[derive(Clone, Debug)]
pub struct Bucket {
    pub time: SymPoly,
    pub mem: SymPoly,
    pub members: Vec<Candidate>,
}

impl Bucket {
    pub fn objectives(&self) -> Objectives {
        Objectives {
            time: self.time.clone(),
            mem: self.mem.clone(),
        }
    }
}

fn count(buckets: &[Bucket]) -> usize {
    buckets.iter().map(|b| b.members.len()).sum()
}

/// Groups candidates by (time, memory), in polynomial order.
pub fn bucketize(cands: Vec<Candidate>) -> Vec<Bucket> {
    let mut map: BTreeMap<(SymPoly, SymPoly), Vec<Candidate>> = BTreeMap::new();
    for c in cands {
        map.entry((c.profile.time.clone(), c.profile.mem.clone()))
            .or_default()
            .push(c);
    }
    map.into_iter()
        .map(|((time, mem), members)| Bucket { time, mem, members })
        .collect()
}

pub fn stage1_memory_depth(cands: Vec<Candidate>, threshold: usize) -> Vec<Bucket> {
    bucketize(
        cands
            .into_iter()
            .filter(|c| c.profile.mem_depth <= threshold)
            .collect(),
    )
}

/// `s` loses to `c` on (loop depth, memory depth).
pub fn depth_dominated(s: (usize, usize), c: (usize, usize)) -> bool {
    (s.0 > c.0 && s.1 >= c.1) || (s.0 >= c.0 && s.1 > c.1)
}

pub fn stage2_depth_poset(buckets: Vec<Bucket>) -> Vec<Bucket> {
    let pairs: BTreeSet<(usize, usize)> = buckets
        .iter()
        .flat_map(|b| b.members.iter().map(Candidate::depths))
        .collect();
    let beaten = |d: (usize, usize)| pairs.iter().any(|&c| depth_dominated(d, c));
    buckets
        .into_iter()
        .filter_map(|mut b| {
            b.members.retain(|c| !beaten(c.depths()));
            (!b.members.is_empty()).then_some(b)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Evaluated {
    pub candidate: Candidate,
    pub time_value: f64,
    pub aux_bytes: u64,
}

/// Keeps the fastest schedules among those whose temporaries fit in
/// `llc_fraction` of the cache; if none fit, the fastest overall.
pub fn stage4_concrete(
    buckets: &[Bucket],
    b: &Binding,
    cfg: &PipelineConfig,
) -> Result<Vec<Evaluated>, CostError> {
    let mut all = Vec::new();
    for bucket in buckets {
        let time_value = cost::evaluate(&bucket.time, b)?;
        for c in &bucket.members {
            all.push(Evaluated {
                aux_bytes: cost::aux_bytes(&c.schedule, b)?,
                time_value,
                candidate: c.clone(),
            });
        }
    }
    let budget = cfg.llc_fraction * cfg.llc_bytes as f64;
    let fits: Vec<Evaluated> = all
        .iter()
        .filter(|e| e.aux_bytes as f64 <= budget)
        .cloned()
        .collect();
    let pool = if fits.is_empty() { all } else { fits };
    let best = pool.iter().map(|e| e.time_value).fold(f64::INFINITY, f64::min);
    Ok(pool
        .into_iter()
        .filter(|e| e.time_value <= best * (1.0 + 1e-12))
        .collect())
}

/// Stride penalty of one schedule: per leaf, for its innermost loop index
/// and each tensor the leaf touches, the product of extents of the modes
/// after that index (0 when the index is last or absent).
pub fn cache_cost(s: &Schedule, b: &Binding) -> Result<f64, CostError> {
    let mut total = 0.0;
    for path in s.graph.leaf_paths(&s.expr) {
        let Some(inner) = path.loops.last().map(|l| l.index) else {
            continue;
        };
        let body = &path.lig.body;
        for a in std::iter::once(&body.lhs).chain(&body.factors) {
            if let Some(p) = a.indices.iter().position(|&i| i == inner) {
                let stride = a.indices[p + 1..]
                    .iter()
                    .fold(SymPoly::one(), |acc, &i| acc.mul(&SymPoly::bound(i)));
                if p + 1 < a.indices.len() {
                    total += cost::evaluate(&stride, b)?;
                }
            }
        }
    }
    Ok(total)
}

/// How many accesses are walked in their own index order.
pub fn order_agreement(s: &Schedule) -> usize {
    let mut n = 0;
    for path in s.graph.leaf_paths(&s.expr) {
        let order: Vec<IndexVar> = path.loops.iter().map(|l| l.index).collect();
        let body = &path.lig.body;
        for a in std::iter::once(&body.lhs).chain(&body.factors) {
            let mut it = order.iter();
            if a.indices.iter().all(|x| it.any(|y| y == x)) {
                n += 1;
            }
        }
    }
    n
}

#[derive(Clone, Debug)]
pub struct Stage5Result {
    pub chosen: usize,
    pub cache_costs: Vec<f64>,
}

pub fn stage5_cache(
    cands: &[Candidate],
    b: &Binding,
    tie: TieBreak,
) -> Result<Stage5Result, PruneError> {
    if cands.is_empty() {
        return Err(PruneError::Empty);
    }
    let costs: Vec<f64> = cands
        .iter()
        .map(|c| cache_cost(&c.schedule, b))
        .collect::<Result<_, _>>()?;
    let best = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let cheapest: Vec<usize> = (0..cands.len()).filter(|&n| costs[n] <= best).collect();
    let agree: Vec<usize> = cheapest.iter().map(|&n| order_agreement(&cands[n].schedule)).collect();
    let top = *agree.iter().max().unwrap();
    let mut tied: Vec<usize> = cheapest
        .iter()
        .zip(&agree)
        .filter(|(_, &a)| a == top)
        .map(|(&n, _)| n)
        .collect();
    tied.sort_by(|&x, &y| cands[x].schedule.id.cmp(&cands[y].schedule.id));
    let chosen = match tie {
        TieBreak::Hash => tied[0],
        TieBreak::Random(seed) => tied[ChaCha8Rng::seed_from_u64(seed).gen_range(0..tied.len())],
    };
    Ok(Stage5Result {
        chosen,
        cache_costs: costs,
    })
}

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("no schedules to choose from")]
    Empty,
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Enumerate(#[from] EnumError),
}

/// Survivors after each stage; `None` for stages not run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StageCounts {
    pub enumerated: usize,
    pub stage1: usize,
    pub stage2: Option<usize>,
    pub stage3: Option<usize>,
    pub stage4: Option<usize>,
    pub stage5: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrontierEntry {
    pub time: SymPoly,
    pub mem: SymPoly,
    pub ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RemovalRecord {
    pub removed: FrontierEntry,
    pub by_time: SymPoly,
    pub by_mem: SymPoly,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Chosen {
    pub id: String,
    pub pretty: String,
    pub time: SymPoly,
    pub mem: SymPoly,
    pub loop_depth: usize,
    pub mem_depth: usize,
    pub time_value: f64,
    pub aux_bytes: u64,
    pub cache_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub expr: String,
    pub rule: Rule,
    pub counts: StageCounts,
    pub buckets: StageCounts,
    pub frontier: Vec<FrontierEntry>,
    pub stage3_removals: Vec<RemovalRecord>,
    pub stage3_unknown: usize,
    pub chosen: Option<Chosen>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn entry(b: &Bucket) -> FrontierEntry {
    FrontierEntry {
        time: b.time.clone(),
        mem: b.mem.clone(),
        ids: b.members.iter().map(|c| c.schedule.id.clone()).collect(),
    }
}

/// Stage 3 over bucket representatives.
pub fn stage3(
    rule: Rule,
    buckets: Vec<Bucket>,
    cs: &ConstraintSet,
    solver: &Solver,
) -> (Vec<Bucket>, Stage3Log) {
    let reps: Vec<Objectives> = buckets.iter().map(Bucket::objectives).collect();
    let (kept, log) = smt::stage3_prune(rule, &reps, cs, solver);
    let kept: BTreeSet<usize> = kept.into_iter().collect();
    let survivors = buckets
        .into_iter()
        .enumerate()
        .filter(|(n, _)| kept.contains(n))
        .map(|(_, b)| b)
        .collect();
    (survivors, log)
}

/// Runs the symbolic stages, then the concrete ones when a binding is given.
pub fn prune_schedules(
    expr: &ContractionExpr,
    schedules: Vec<Schedule>,
    cfg: &PipelineConfig,
    cs: &ConstraintSet,
    binding: Option<&Binding>,
) -> Result<Report, PruneError> {
    let mut warnings = Vec::new();
    let mut counts = StageCounts {
        enumerated: schedules.len(),
        ..StageCounts::default()
    };
    let mut bcounts = StageCounts {
        enumerated: schedules.len(),
        ..StageCounts::default()
    };
    let cands: Vec<Candidate> = schedules.into_iter().map(Candidate::new).collect();
    let mut buckets = stage1_memory_depth(cands, cfg.mem_depth_threshold);
    counts.stage1 = count(&buckets);
    bcounts.stage1 = buckets.len();
    if !cfg.skip_stage2 {
        buckets = stage2_depth_poset(buckets);
        counts.stage2 = Some(count(&buckets));
        bcounts.stage2 = Some(buckets.len());
    }
    let mut removals = Vec::new();
    let mut unknown = 0;
    let solver = if cfg.skip_stage3 {
        None
    } else {
        let s = Solver::locate(cfg.solver.clone(), cfg.solver_timeout);
        if s.is_none() {
            warnings.push("no SMT solver found; stage 3 skipped".to_string());
        }
        s
    };
    if let Some(solver) = solver {
        let cs = cs.clone().with_inferred(expr);
        let before = buckets.clone();
        let (kept, log) = stage3(cfg.rule, buckets, &cs, &solver);
        for r in &log.removals {
            removals.push(RemovalRecord {
                removed: entry(&before[r.removed]),
                by_time: before[r.by].time.clone(),
                by_mem: before[r.by].mem.clone(),
            });
        }
        unknown = log.unknown;
        if unknown > 0 {
            warnings.push(format!("{unknown} dominance queries undecided; kept conservatively"));
        }
        buckets = kept;
        counts.stage3 = Some(count(&buckets));
        bcounts.stage3 = Some(buckets.len());
    }
    let frontier: Vec<FrontierEntry> = buckets.iter().map(entry).collect();
    let mut chosen = None;
    if let Some(b) = binding {
        let b = b.clone().for_expr(expr);
        let best = stage4_concrete(&buckets, &b, cfg)?;
        if !best.is_empty() && best.iter().all(|e| e.aux_bytes as f64 > cfg.llc_fraction * cfg.llc_bytes as f64) {
            warnings.push("no schedule fits the cache budget; chose among all".to_string());
        }
        counts.stage4 = Some(best.len());
        let keys: BTreeSet<(&SymPoly, &SymPoly)> = best
            .iter()
            .map(|e| (&e.candidate.profile.time, &e.candidate.profile.mem))
            .collect();
        bcounts.stage4 = Some(keys.len());
        bcounts.stage5 = Some(1);
        let cands: Vec<Candidate> = best.iter().map(|e| e.candidate.clone()).collect();
        let r5 = stage5_cache(&cands, &b, cfg.tie_break)?;
        counts.stage5 = Some(1);
        let e = &best[r5.chosen];
        let c = &e.candidate;
        chosen = Some(Chosen {
            id: c.schedule.id.clone(),
            pretty: c.schedule.pretty(),
            time: c.profile.time.clone(),
            mem: c.profile.mem.clone(),
            loop_depth: c.profile.loop_depth,
            mem_depth: c.profile.mem_depth,
            time_value: e.time_value,
            aux_bytes: e.aux_bytes,
            cache_cost: r5.cache_costs[r5.chosen],
        });
    }
    Ok(Report {
        expr: expr.to_string(),
        rule: cfg.rule,
        counts,
        buckets: bcounts,
        frontier,
        stage3_removals: removals,
        stage3_unknown: unknown,
        chosen,
        warnings,
    })
}

/// Enumerates and prunes in one go.
pub fn run_pipeline(
    expr: &ContractionExpr,
    gen: &GenConfig,
    cfg: &PipelineConfig,
    cs: &ConstraintSet,
    binding: Option<&Binding>,
) -> Result<Report, PruneError> {
    let schedules = enumerate::gen_schedules(expr, gen)?;
    prune_schedules(expr, schedules, cfg, cs, binding)
}
