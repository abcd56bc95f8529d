//! `fusesched` command-line driver.
//!
//! Exit codes: 0 ok, 1 usage or input error, 2 validation failure,
//! 3 solver failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use fusesched::cost::{self, Binding};
use fusesched::emit::{self, Format};
use fusesched::enumerate::{self, GenConfig};
use fusesched::exec::{self, Operand, SparseCsf, TensorSet};
use fusesched::expr::{parse_einsum, parse_format_pattern, ContractionExpr, Formats, IndexVar};
use fusesched::igraph::Schedule;
use fusesched::prune::{self, PipelineConfig, TieBreak};
use fusesched::smt::{ConstraintSet, Rule, Solver};

#[derive(Parser)]
#[command(name = "fusesched", version, about = "Enumerate, prune and pick loop schedules for sparse tensor contractions")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write every valid schedule as JSON.
    Enumerate(EnumerateArgs),
    /// Run the symbolic stages and write the surviving frontier.
    Prune(PruneArgs),
    /// Run all stages under a concrete binding and report the winner.
    Select(SelectArgs),
    /// Check schedules against a reference contraction on random tensors.
    Verify(VerifyArgs),
    /// Print the loop nest of one schedule.
    Emit(EmitArgs),
    /// Write a random sparse tensor in coordinate text format.
    Random(RandomArgs),
}

#[derive(Args, Clone)]
struct ExprArgs {
    /// Run configuration file; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Contraction, e.g. "A(l,m,n)=B(i,j,k)*C(i,l)*D(j,m)*E(k,n)".
    #[arg(long)]
    expr: Option<String>,
    /// Storage format of a sparse input, e.g. B:ccc. Repeatable.
    #[arg(long = "sparse", value_name = "TENSOR:LEVELS")]
    sparse: Vec<String>,
    /// Largest number of indices a temporary may have.
    #[arg(long)]
    max_memory_depth: Option<usize>,
    /// Do not split a second producer off a section that reads a temporary.
    #[arg(long)]
    no_split_mode_b: bool,
    /// Stop with an error past this many schedules.
    #[arg(long)]
    cap: Option<usize>,
}

#[derive(Args, Clone)]
struct PipelineArgs {
    /// Constraint file with ranges and user relations.
    #[arg(long)]
    constraints: Option<PathBuf>,
    /// SMT-LIB2 solver executable (default: $FUSESCHED_SOLVER, then z3).
    #[arg(long)]
    solver: Option<PathBuf>,
    /// Per-query solver timeout in milliseconds.
    #[arg(long)]
    timeout_ms: Option<u64>,
    #[arg(long)]
    mem_depth_threshold: Option<usize>,
    #[arg(long)]
    skip_stage2: bool,
    #[arg(long)]
    skip_stage3: bool,
    /// Removal rule for stage 3: pointwise or both.
    #[arg(long)]
    dominance: Option<String>,
}

#[derive(Args)]
struct EnumerateArgs {
    #[command(flatten)]
    expr: ExprArgs,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    expr: ExprArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    expr: ExprArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Binding file: {"bounds": {...}, "sparsity": {...}, "elem_bytes": 4}.
    #[arg(long)]
    bounds: Option<PathBuf>,
    #[arg(long)]
    llc_bytes: Option<u64>,
    #[arg(long)]
    llc_fraction: Option<f64>,
    /// hash or random:SEED.
    #[arg(long)]
    tie_break: Option<String>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    expr: ExprArgs,
    /// Only these schedule ids (default: all).
    #[arg(long)]
    id: Vec<String>,
    /// Extent of one index, e.g. i=5. Repeatable.
    #[arg(long = "extent", value_name = "INDEX=N")]
    extents: Vec<String>,
    /// Extent of indices not given with --extent.
    #[arg(long, default_value_t = 4)]
    default_extent: usize,
    /// Comma-separated sparsities of the random sparse input.
    #[arg(long, default_value = "0.1,0.3,1.0", value_delimiter = ',')]
    sparsity: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Use a tensor from a coordinate file, e.g. B=b.coo. Repeatable.
    #[arg(long = "tensor", value_name = "NAME=FILE")]
    tensors: Vec<String>,
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EmitArgs {
    #[command(flatten)]
    expr: ExprArgs,
    #[arg(long)]
    id: String,
    /// pseudo or c.
    #[arg(long, default_value = "pseudo")]
    format: String,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RandomArgs {
    /// Comma-separated extents, e.g. 5,5,5.
    #[arg(long, value_delimiter = ',', required = true)]
    random: Vec<usize>,
    #[arg(long)]
    sparsity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

/// Settings read from `--config`. Paths are relative to the file.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    expr: Option<String>,
    sparse: Vec<String>,
    max_memory_depth: Option<usize>,
    constraints: Option<PathBuf>,
    bounds: Option<PathBuf>,
    solver: Option<PathBuf>,
    llc_bytes: Option<u64>,
    llc_fraction: Option<f64>,
    tie_break: Option<String>,
    dominance: Option<String>,
}

enum Failure {
    Usage(String),
    Validation(String),
    Solver(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Validation(_) => 2,
            Failure::Solver(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Validation(m) | Failure::Solver(m) => m,
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_out(path: &Option<PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| usage(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let mut cfg: RunConfig =
        serde_json::from_str(&read(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new(""));
    for p in [&mut cfg.constraints, &mut cfg.bounds].into_iter().flatten() {
        if p.is_relative() {
            *p = dir.join(&*p);
        }
    }
    // A bare solver name is looked up on PATH.
    if let Some(p) = cfg.solver.as_mut() {
        if p.is_relative() && p.components().count() > 1 {
            *p = dir.join(&*p);
        }
    }
    Ok(cfg)
}

struct Problem {
    expr: Arc<ContractionExpr>,
    gen: GenConfig,
    cfg: RunConfig,
}

fn problem(a: &ExprArgs) -> Result<Problem> {
    let cfg = load_config(&a.config)?;
    let text = a
        .expr
        .clone()
        .or_else(|| cfg.expr.clone())
        .ok_or_else(|| usage("missing field `expr` (give --expr or set it in --config)"))?;
    let mut formats = Formats::new();
    for spec in cfg.sparse.iter().chain(&a.sparse) {
        let (name, pattern) = spec
            .split_once(':')
            .ok_or_else(|| usage(format!("--sparse expects TENSOR:LEVELS, got `{spec}`")))?;
        formats.insert(name.to_string(), parse_format_pattern(pattern).map_err(usage)?);
    }
    let expr = parse_einsum(&text, &formats).map_err(usage)?;
    let gen = GenConfig {
        max_memory_depth: a
            .max_memory_depth
            .or(cfg.max_memory_depth)
            .unwrap_or(GenConfig::default().max_memory_depth),
        enable_split_mode_b: !a.no_split_mode_b,
        cap: a.cap,
        ..GenConfig::default()
    };
    Ok(Problem {
        expr: Arc::new(expr),
        gen,
        cfg,
    })
}

fn schedules(p: &Problem) -> Result<Vec<Schedule>> {
    enumerate::gen_schedules(&p.expr, &p.gen).map_err(usage)
}

fn pipeline_config(p: &Problem, a: &PipelineArgs) -> Result<(PipelineConfig, ConstraintSet)> {
    let mut cfg = PipelineConfig {
        skip_stage2: a.skip_stage2,
        skip_stage3: a.skip_stage3,
        ..PipelineConfig::default()
    };
    if let Some(t) = a.mem_depth_threshold {
        cfg.mem_depth_threshold = t;
    }
    if let Some(ms) = a.timeout_ms {
        cfg.solver_timeout = Duration::from_millis(ms);
    }
    if let Some(rule) = a.dominance.as_ref().or(p.cfg.dominance.as_ref()) {
        cfg.rule = rule.parse::<Rule>().map_err(usage)?;
    }
    let explicit = a.solver.clone().or_else(|| p.cfg.solver.clone());
    if let Some(path) = &explicit {
        if !cfg.skip_stage3 && !Solver::new(path.clone(), cfg.solver_timeout).available() {
            return Err(Failure::Solver(format!("solver {} cannot be run", path.display())));
        }
    }
    cfg.solver = explicit;
    let cs = match a.constraints.as_ref().or(p.cfg.constraints.as_ref()) {
        Some(path) => ConstraintSet::from_json(&read(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?,
        None => ConstraintSet::default(),
    };
    Ok((cfg, cs))
}

#[derive(Serialize)]
struct ScheduleEntry<'a> {
    id: &'a str,
    pretty: String,
    loop_depth: usize,
    mem_depth: usize,
    time: cost::SymPoly,
    mem: cost::SymPoly,
    graph: &'a fusesched::igraph::Big,
}

#[derive(Serialize)]
struct DepthCount {
    loop_depth: usize,
    mem_depth: usize,
    count: usize,
}

#[derive(Serialize)]
struct EnumerateOutput<'a> {
    expr: String,
    count: usize,
    histogram: Vec<DepthCount>,
    schedules: Vec<ScheduleEntry<'a>>,
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn cmd_enumerate(a: EnumerateArgs) -> Result<()> {
    let p = problem(&a.expr)?;
    let all = schedules(&p)?;
    let histogram = enumerate::depth_histogram(&all)
        .into_iter()
        .map(|((loop_depth, mem_depth), count)| DepthCount {
            loop_depth,
            mem_depth,
            count,
        })
        .collect();
    let entries = all
        .iter()
        .map(|s| {
            let prof = cost::profile(s);
            ScheduleEntry {
                id: &s.id,
                pretty: s.pretty(),
                loop_depth: prof.loop_depth,
                mem_depth: prof.mem_depth,
                time: prof.time,
                mem: prof.mem,
                graph: &s.graph,
            }
        })
        .collect();
    let out = EnumerateOutput {
        expr: p.expr.to_string(),
        count: all.len(),
        histogram,
        schedules: entries,
    };
    write_out(&a.output, &to_json(&out))
}

fn cmd_prune(a: PruneArgs) -> Result<()> {
    let p = problem(&a.expr)?;
    let (cfg, cs) = pipeline_config(&p, &a.pipeline)?;
    let report = prune::prune_schedules(&p.expr, schedules(&p)?, &cfg, &cs, None).map_err(usage)?;
    warn(&report.warnings);
    write_out(&a.output, &to_json(&report))
}

fn warn(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn cmd_select(a: SelectArgs) -> Result<()> {
    let p = problem(&a.expr)?;
    let (mut cfg, cs) = pipeline_config(&p, &a.pipeline)?;
    if let Some(b) = a.llc_bytes.or(p.cfg.llc_bytes) {
        cfg.llc_bytes = b;
    }
    if let Some(f) = a.llc_fraction.or(p.cfg.llc_fraction) {
        cfg.llc_fraction = f;
    }
    if let Some(t) = a.tie_break.as_ref().or(p.cfg.tie_break.as_ref()) {
        cfg.tie_break = t.parse::<TieBreak>().map_err(usage)?;
    }
    let path = a
        .bounds
        .clone()
        .or_else(|| p.cfg.bounds.clone())
        .ok_or_else(|| usage("missing field `bounds` (give --bounds or set it in --config)"))?;
    let binding: Binding =
        serde_json::from_str(&read(&path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let report = prune::prune_schedules(&p.expr, schedules(&p)?, &cfg, &cs, Some(&binding)).map_err(usage)?;
    warn(&report.warnings);
    if let Some(c) = &report.chosen {
        eprintln!("chosen {}: {}", c.id, c.pretty);
    }
    write_out(&a.output, &to_json(&report))
}

fn parse_extents(specs: &[String]) -> Result<BTreeMap<IndexVar, usize>> {
    let mut out = BTreeMap::new();
    for s in specs {
        let (name, n) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--extent expects INDEX=N, got `{s}`")))?;
        let n: usize = n.parse().map_err(|_| usage(format!("bad extent in `{s}`")))?;
        out.insert(fusesched::expr::idx(name), n);
    }
    Ok(out)
}

fn load_tensor(expr: &ContractionExpr, spec: &str) -> Result<(String, Operand)> {
    let (name, path) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("--tensor expects NAME=FILE, got `{spec}`")))?;
    let access = expr
        .inputs
        .iter()
        .find(|a| &*a.tensor == name)
        .ok_or_else(|| usage(format!("no input named {name}")))?;
    let (dims, entries) = exec::parse_coo_text(&read(Path::new(path))?).map_err(usage)?;
    if dims.len() != access.indices.len() {
        return Err(usage(format!("{path}: {} modes, {name} needs {}", dims.len(), access.indices.len())));
    }
    let csf = SparseCsf::from_coo(&dims, &access.levels, &entries);
    let op = if access.is_sparse() {
        Operand::Sparse(csf)
    } else {
        Operand::Dense(csf.to_dense())
    };
    Ok((name.to_string(), op))
}

#[derive(Serialize)]
struct VerifyRun {
    sparsity: f64,
    checked: usize,
    failed: Vec<exec::Verification>,
    worst_rel_diff: f64,
}

#[derive(Serialize)]
struct VerifyOutput {
    expr: String,
    seed: u64,
    runs: Vec<VerifyRun>,
    ok: bool,
}

fn cmd_verify(a: VerifyArgs) -> Result<()> {
    let p = problem(&a.expr)?;
    let mut all = schedules(&p)?;
    if !a.id.is_empty() {
        for id in &a.id {
            if !all.iter().any(|s| &s.id == id) {
                return Err(usage(format!("unknown schedule id {id}")));
            }
        }
        all.retain(|s| a.id.contains(&s.id));
    }
    let fixed = parse_extents(&a.extents)?;
    let extent = |i: IndexVar| fixed.get(&i).copied().unwrap_or(a.default_extent);
    let files: Vec<(String, Operand)> = a.tensors.iter().map(|t| load_tensor(&p.expr, t)).collect::<Result<_>>()?;
    let mut runs = Vec::new();
    for &s in &a.sparsity {
        if !(s > 0.0 && s <= 1.0) {
            return Err(usage(format!("sparsity {s} outside (0, 1]")));
        }
        let mut tensors: TensorSet = exec::random_inputs(&p.expr, &extent, s, a.seed);
        tensors.extend(files.iter().cloned());
        let reference = exec::reference_contract(&p.expr, &tensors).map_err(usage)?;
        let mut failed = Vec::new();
        let mut worst = 0.0f64;
        for sched in &all {
            let v = exec::verify_schedule(sched, &tensors, &reference, a.tolerance)
                .map_err(|e| Failure::Validation(format!("{}: {e}", sched.id)))?;
            worst = worst.max(v.max_rel_diff);
            if !v.ok {
                failed.push(v);
            }
        }
        runs.push(VerifyRun {
            sparsity: s,
            checked: all.len(),
            failed,
            worst_rel_diff: worst,
        });
    }
    let ok = runs.iter().all(|r| r.failed.is_empty());
    let out = VerifyOutput {
        expr: p.expr.to_string(),
        seed: a.seed,
        runs,
        ok,
    };
    write_out(&a.output, &to_json(&out))?;
    if ok {
        Ok(())
    } else {
        Err(Failure::Validation("some schedules disagree with the reference".into()))
    }
}

fn cmd_emit(a: EmitArgs) -> Result<()> {
    let p = problem(&a.expr)?;
    let format: Format = a.format.parse().map_err(usage)?;
    let all = schedules(&p)?;
    let s = all
        .iter()
        .find(|s| s.id == a.id)
        .ok_or_else(|| usage(format!("unknown schedule id {}", a.id)))?;
    write_out(&a.output, &emit::emit(s, format))
}

fn cmd_random(a: RandomArgs) -> Result<()> {
    if !(a.sparsity > 0.0 && a.sparsity <= 1.0) {
        return Err(usage(format!("sparsity {} outside (0, 1]", a.sparsity)));
    }
    if a.random.contains(&0) {
        return Err(usage("extents must be positive"));
    }
    let formats = vec![fusesched::expr::LevelFormat::Compressed; a.random.len()];
    let t = exec::random_sparse(&a.random, &formats, a.sparsity, a.seed);
    write_out(&a.output, &exec::write_coo_text(&t.dims, &t.entries()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Enumerate(a) => cmd_enumerate(a),
        Cmd::Prune(a) => cmd_prune(a),
        Cmd::Select(a) => cmd_select(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Emit(a) => cmd_emit(a),
        Cmd::Random(a) => cmd_random(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
