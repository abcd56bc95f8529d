//! Ground truth: dense reference contraction, a CSF-walking interpreter for
//! loop trees with per-leaf trip counts, and measured prefix counts.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cost::Symbol;
use crate::expr::{ContractionExpr, IndexVar, LevelFormat};
use crate::igraph::{Access, Big, Role, Schedule};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("index {index} has extent {a} in one tensor and {b} in another")]
    DimMismatch { index: IndexVar, a: usize, b: usize },
    #[error("no tensor supplied for {0}")]
    Missing(String),
    #[error("tensor {tensor} has order {got}, access needs {want}")]
    Order {
        tensor: String,
        got: usize,
        want: usize,
    },
    #[error("{0} must be supplied in compressed storage")]
    NeedsSparse(String),
    #[error("schedule is invalid: {0}")]
    Invalid(String),
    #[error("prefix depth {depth} out of range for order {order}")]
    Depth { depth: usize, order: usize },
    #[error("line {line}: {msg}")]
    Text { line: usize, msg: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(dims: &[usize]) -> DenseTensor {
        DenseTensor {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> DenseTensor {
        assert_eq!(data.len(), dims.iter().product::<usize>());
        DenseTensor {
            dims: dims.to_vec(),
            data,
        }
    }

    fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.dims)
    }

    pub fn get(&self, at: &[usize]) -> f64 {
        self.data[offset(&self.strides(), at)]
    }

    pub fn set(&mut self, at: &[usize], v: f64) {
        let o = offset(&self.strides(), at);
        self.data[o] = v;
    }

    /// Largest elementwise difference relative to the larger magnitude of
    /// the two tensors (1 if both are zero).
    pub fn max_rel_diff(&self, other: &DenseTensor) -> f64 {
        assert_eq!(self.dims, other.dims);
        let scale = self
            .data
            .iter()
            .chain(&other.data)
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-300);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            / scale
    }
}

fn row_major_strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for n in (0..dims.len().saturating_sub(1)).rev() {
        s[n] = s[n + 1] * dims[n + 1];
    }
    s
}

fn offset(strides: &[usize], at: &[usize]) -> usize {
    strides.iter().zip(at).map(|(s, i)| s * i).sum()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CsfLevel {
    Dense { size: usize },
    Compressed { pos: Vec<usize>, crd: Vec<usize> },
}

/// A level-format tree: each level is dense (all coordinates present) or
/// compressed (`pos`/`crd` arrays over the parent level's positions).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCsf {
    pub dims: Vec<usize>,
    pub levels: Vec<CsfLevel>,
    pub vals: Vec<f64>,
}

impl SparseCsf {
    /// Builds storage from coordinates; duplicates are summed.
    pub fn from_coo(
        dims: &[usize],
        formats: &[LevelFormat],
        entries: &[(Vec<usize>, f64)],
    ) -> SparseCsf {
        assert_eq!(dims.len(), formats.len());
        let mut sorted: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        for (c, v) in entries {
            assert!(c.iter().zip(dims).all(|(x, d)| x < d), "coordinate {c:?} outside {dims:?}");
            *sorted.entry(c.clone()).or_insert(0.0) += v;
        }
        let coords: Vec<(&Vec<usize>, f64)> = sorted.iter().map(|(c, v)| (c, *v)).collect();
        let mut at = vec![0usize; coords.len()];
        let mut parents = 1usize;
        let mut levels = Vec::with_capacity(dims.len());
        for (l, f) in formats.iter().enumerate() {
            match f {
                LevelFormat::Dense => {
                    for (n, (c, _)) in coords.iter().enumerate() {
                        at[n] = at[n] * dims[l] + c[l];
                    }
                    parents *= dims[l];
                    levels.push(CsfLevel::Dense { size: dims[l] });
                }
                LevelFormat::Compressed => {
                    let mut pos = vec![0usize; parents + 1];
                    let mut crd = Vec::new();
                    let mut last: Option<(usize, usize)> = None;
                    for (n, (c, _)) in coords.iter().enumerate() {
                        let key = (at[n], c[l]);
                        if last != Some(key) {
                            crd.push(c[l]);
                            pos[at[n] + 1] += 1;
                            last = Some(key);
                        }
                        at[n] = crd.len() - 1;
                    }
                    for p in 0..parents {
                        pos[p + 1] += pos[p];
                    }
                    parents = crd.len();
                    levels.push(CsfLevel::Compressed { pos, crd });
                }
            }
        }
        let mut vals = vec![0.0; parents];
        for (n, (_, v)) in coords.iter().enumerate() {
            vals[at[n]] = *v;
        }
        SparseCsf {
            dims: dims.to_vec(),
            levels,
            vals,
        }
    }

    pub fn from_dense(t: &DenseTensor, formats: &[LevelFormat]) -> SparseCsf {
        let entries: Vec<(Vec<usize>, f64)> = coords_of(&t.dims)
            .into_iter()
            .zip(&t.data)
            .filter(|(_, v)| **v != 0.0)
            .map(|(c, v)| (c, *v))
            .collect();
        SparseCsf::from_coo(&t.dims, formats, &entries)
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    /// Stored coordinates with their values, in storage order.
    pub fn entries(&self) -> Vec<(Vec<usize>, f64)> {
        let mut out = Vec::new();
        self.walk(0, 0, &mut Vec::new(), &mut |c, p| out.push((c.to_vec(), self.vals[p])));
        out
    }

    fn walk(&self, level: usize, parent: usize, coord: &mut Vec<usize>, f: &mut impl FnMut(&[usize], usize)) {
        if level == self.levels.len() {
            f(coord, parent);
            return;
        }
        match &self.levels[level] {
            CsfLevel::Dense { size } => {
                for c in 0..*size {
                    coord.push(c);
                    self.walk(level + 1, parent * size + c, coord, f);
                    coord.pop();
                }
            }
            CsfLevel::Compressed { pos, crd } => {
                for p in pos[parent]..pos[parent + 1] {
                    coord.push(crd[p]);
                    self.walk(level + 1, p, coord, f);
                    coord.pop();
                }
            }
        }
    }

    pub fn to_dense(&self) -> DenseTensor {
        let mut d = DenseTensor::zeros(&self.dims);
        for (c, v) in self.entries() {
            d.set(&c, v);
        }
        d
    }

    /// Stored coordinates whose value is nonzero.
    pub fn nnz(&self) -> usize {
        self.entries().iter().filter(|(_, v)| *v != 0.0).count()
    }
}

fn coords_of(dims: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for &d in dims {
        out = out
            .into_iter()
            .flat_map(|c| {
                (0..d).map(move |x| {
                    let mut c = c.clone();
                    c.push(x);
                    c
                })
            })
            .collect();
    }
    out
}

/// Distinct prefixes of length `depth` among the stored nonzero coordinates.
pub fn measured_nnz_prefix(t: &SparseCsf, depth: usize) -> Result<usize, ExecError> {
    if depth == 0 || depth > t.order() {
        return Err(ExecError::Depth {
            depth,
            order: t.order(),
        });
    }
    let prefixes: BTreeSet<Vec<usize>> = t
        .entries()
        .into_iter()
        .filter(|(_, v)| *v != 0.0)
        .map(|(c, _)| c[..depth].to_vec())
        .collect();
    Ok(prefixes.len())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Operand {
    Dense(DenseTensor),
    Sparse(SparseCsf),
}

impl Operand {
    pub fn dims(&self) -> &[usize] {
        match self {
            Operand::Dense(t) => &t.dims,
            Operand::Sparse(t) => &t.dims,
        }
    }

    pub fn to_dense(&self) -> DenseTensor {
        match self {
            Operand::Dense(t) => t.clone(),
            Operand::Sparse(t) => t.to_dense(),
        }
    }
}

pub type TensorSet = BTreeMap<String, Operand>;

/// Extent of every index, checked for consistency across inputs.
pub fn extents(expr: &ContractionExpr, tensors: &TensorSet) -> Result<BTreeMap<IndexVar, usize>, ExecError> {
    let mut ext: BTreeMap<IndexVar, usize> = BTreeMap::new();
    for a in &expr.inputs {
        let t = tensors
            .get(&*a.tensor)
            .ok_or_else(|| ExecError::Missing(a.tensor.to_string()))?;
        if t.dims().len() != a.order() {
            return Err(ExecError::Order {
                tensor: a.tensor.to_string(),
                got: t.dims().len(),
                want: a.order(),
            });
        }
        for (&i, &d) in a.indices.iter().zip(t.dims()) {
            match ext.get(&i) {
                Some(&e) if e != d => return Err(ExecError::DimMismatch { index: i, a: e, b: d }),
                _ => {
                    ext.insert(i, d);
                }
            }
        }
    }
    Ok(ext)
}

/// Naive nested-loop evaluation over every index value.
pub fn reference_contract(expr: &ContractionExpr, tensors: &TensorSet) -> Result<DenseTensor, ExecError> {
    let ext = extents(expr, tensors)?;
    let vars: Vec<IndexVar> = ext.keys().copied().collect();
    let dims: Vec<usize> = vars.iter().map(|v| ext[v]).collect();
    let dense: Vec<DenseTensor> = expr
        .inputs
        .iter()
        .map(|a| tensors[&*a.tensor].to_dense())
        .collect();
    let pos = |i: &IndexVar| vars.iter().position(|v| v == i).unwrap();
    let in_idx: Vec<Vec<usize>> = expr
        .inputs
        .iter()
        .map(|a| a.indices.iter().map(pos).collect())
        .collect();
    let out_idx: Vec<usize> = expr.output.indices.iter().map(pos).collect();
    let out_dims: Vec<usize> = out_idx.iter().map(|&n| dims[n]).collect();
    let mut out = DenseTensor::zeros(&out_dims);
    if dims.iter().any(|&d| d == 0) {
        return Ok(out);
    }
    let mut cur = vec![0usize; vars.len()];
    loop {
        let mut prod = 1.0;
        for (t, idx) in dense.iter().zip(&in_idx) {
            let at: Vec<usize> = idx.iter().map(|&n| cur[n]).collect();
            prod *= t.get(&at);
        }
        let at: Vec<usize> = out_idx.iter().map(|&n| cur[n]).collect();
        let o = offset(&out.strides(), &at);
        out.data[o] += prod;
        // Odometer step.
        let mut n = vars.len();
        loop {
            if n == 0 {
                return Ok(out);
            }
            n -= 1;
            cur[n] += 1;
            if cur[n] < dims[n] {
                break;
            }
            cur[n] = 0;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExecStats {
    pub leaf_trip_counts: BTreeMap<usize, u128>,
    pub total: u128,
}

enum Slot {
    Output,
    Temp(u32),
    Dense(usize),
    Sparse,
}

struct CompiledAccess {
    slot: Slot,
    vars: Vec<usize>,
    strides: Vec<usize>,
}

enum Loop {
    Dense { var: usize, extent: usize },
    Sparse { var: usize, level: usize },
}

enum Inner {
    Leaf {
        id: usize,
        lhs: CompiledAccess,
        factors: Vec<CompiledAccess>,
    },
    Node {
        temp: u32,
        producer: Box<Compiled>,
        consumer: Box<Compiled>,
    },
}

struct Compiled {
    loops: Vec<Loop>,
    inner: Inner,
}

struct Interp<'a> {
    env: Vec<usize>,
    positions: Vec<usize>,
    sparse: Option<&'a SparseCsf>,
    dense: Vec<&'a DenseTensor>,
    temps: BTreeMap<u32, Vec<f64>>,
    out: DenseTensor,
    stats: ExecStats,
}

impl Interp<'_> {
    fn run(&mut self, c: &Compiled, depth: usize) {
        if depth == c.loops.len() {
            match &c.inner {
                Inner::Leaf { id, lhs, factors } => {
                    let mut prod = 1.0;
                    for f in factors {
                        prod *= self.read(f);
                    }
                    let o = self.index(lhs);
                    match lhs.slot {
                        Slot::Output => self.out.data[o] += prod,
                        Slot::Temp(t) => self.temps.get_mut(&t).unwrap()[o] += prod,
                        _ => unreachable!("inputs are never written"),
                    }
                    *self.stats.leaf_trip_counts.entry(*id).or_insert(0) += 1;
                    self.stats.total += 1;
                }
                Inner::Node {
                    temp,
                    producer,
                    consumer,
                } => {
                    self.temps.get_mut(temp).unwrap().iter_mut().for_each(|v| *v = 0.0);
                    self.run(producer, 0);
                    self.run(consumer, 0);
                }
            }
            return;
        }
        match c.loops[depth] {
            Loop::Dense { var, extent } => {
                for x in 0..extent {
                    self.env[var] = x;
                    self.run(c, depth + 1);
                }
            }
            Loop::Sparse { var, level } => {
                let t = self.sparse.expect("sparse loop without sparse input");
                let parent = if level == 0 { 0 } else { self.positions[level - 1] };
                match &t.levels[level] {
                    CsfLevel::Dense { size } => {
                        for x in 0..*size {
                            self.env[var] = x;
                            self.positions[level] = parent * size + x;
                            self.run(c, depth + 1);
                        }
                    }
                    CsfLevel::Compressed { pos, crd } => {
                        for p in pos[parent]..pos[parent + 1] {
                            self.env[var] = crd[p];
                            self.positions[level] = p;
                            self.run(c, depth + 1);
                        }
                    }
                }
            }
        }
    }

    fn index(&self, a: &CompiledAccess) -> usize {
        a.vars.iter().zip(&a.strides).map(|(&v, s)| self.env[v] * s).sum()
    }

    fn read(&self, a: &CompiledAccess) -> f64 {
        match a.slot {
            Slot::Sparse => {
                let t = self.sparse.expect("sparse access without sparse input");
                t.vals[self.positions[t.order() - 1]]
            }
            Slot::Dense(n) => self.dense[n].data[self.index(a)],
            Slot::Temp(t) => self.temps[&t][self.index(a)],
            Slot::Output => unreachable!("the output is never read"),
        }
    }
}

struct Compiler<'a> {
    expr: &'a ContractionExpr,
    vars: Vec<IndexVar>,
    ext: &'a BTreeMap<IndexVar, usize>,
    sparse: Option<usize>,
    dense_slot: BTreeMap<usize, usize>,
    temp_sizes: BTreeMap<u32, usize>,
    leaves: usize,
}

impl Compiler<'_> {
    fn var(&self, i: IndexVar) -> usize {
        self.vars.iter().position(|&v| v == i).unwrap()
    }

    fn access(&mut self, a: &Access) -> CompiledAccess {
        let dims: Vec<usize> = a.indices.iter().map(|i| self.ext[i]).collect();
        let slot = match a.role {
            Role::Output => Slot::Output,
            Role::Temp(id) => {
                self.temp_sizes.insert(id, dims.iter().product());
                Slot::Temp(id)
            }
            Role::Input(n) if Some(n) == self.sparse => Slot::Sparse,
            Role::Input(n) => Slot::Dense(self.dense_slot[&n]),
        };
        CompiledAccess {
            slot,
            vars: a.indices.iter().map(|&i| self.var(i)).collect(),
            strides: row_major_strides(&dims),
        }
    }

    fn loops(&self, order: &[IndexVar], below: &Big) -> Vec<Loop> {
        let touches = self.sparse.is_some_and(|n| {
            below
                .leaves()
                .iter()
                .any(|l| l.body.factors.iter().any(|a| a.role == Role::Input(n)))
        });
        order
            .iter()
            .map(|&i| {
                let level = self.sparse.and_then(|n| self.expr.inputs[n].mode_of(i));
                match level {
                    Some(level) if touches => Loop::Sparse {
                        var: self.var(i),
                        level,
                    },
                    _ => Loop::Dense {
                        var: self.var(i),
                        extent: self.ext[&i],
                    },
                }
            })
            .collect()
    }

    fn compile(&mut self, b: &Big) -> Compiled {
        match b {
            Big::Lig(l) => {
                let id = self.leaves;
                self.leaves += 1;
                Compiled {
                    loops: self.loops(&l.order, b),
                    inner: Inner::Leaf {
                        id,
                        lhs: self.access(&l.body.lhs),
                        factors: l.body.factors.iter().map(|a| self.access(a)).collect(),
                    },
                }
            }
            Big::Node(n) => {
                let loops = self.loops(&n.fused, b);
                let producer = Box::new(self.compile(&n.producer));
                let consumer = Box::new(self.compile(&n.consumer));
                self.temp_sizes
                    .insert(n.temp.id, n.temp.indices.iter().map(|i| self.ext[i]).product());
                Compiled {
                    loops,
                    inner: Inner::Node {
                        temp: n.temp.id,
                        producer,
                        consumer,
                    },
                }
            }
        }
    }
}

/// Runs a schedule over concrete tensors. Extents come from the tensors; the
/// sparse input must be given in compressed storage.
pub fn interpret(s: &Schedule, tensors: &TensorSet) -> Result<(DenseTensor, ExecStats), ExecError> {
    let violations = s.validate();
    if let Some(v) = violations.first() {
        return Err(ExecError::Invalid(v.to_string()));
    }
    let expr = &*s.expr;
    let ext = extents(expr, tensors)?;
    let sparse = expr.sparse_input();
    let mut sparse_t = None;
    let mut dense = Vec::new();
    let mut dense_slot = BTreeMap::new();
    for (n, a) in expr.inputs.iter().enumerate() {
        match (&tensors[&*a.tensor], Some(n) == sparse) {
            (Operand::Sparse(t), true) => {
                if t.levels.iter().zip(&a.levels).any(|(l, f)| {
                    matches!(
                        (l, f),
                        (CsfLevel::Dense { .. }, LevelFormat::Compressed)
                            | (CsfLevel::Compressed { .. }, LevelFormat::Dense)
                    )
                }) {
                    return Err(ExecError::NeedsSparse(a.tensor.to_string()));
                }
                sparse_t = Some(t);
            }
            (Operand::Dense(_), true) => return Err(ExecError::NeedsSparse(a.tensor.to_string())),
            (op, false) => {
                dense_slot.insert(n, dense.len());
                dense.push(match op {
                    Operand::Dense(t) => t,
                    Operand::Sparse(_) => {
                        return Err(ExecError::Missing(format!("dense storage for {}", a.tensor)))
                    }
                });
            }
        }
    }
    let vars: Vec<IndexVar> = ext.keys().copied().collect();
    let mut c = Compiler {
        expr,
        vars: vars.clone(),
        ext: &ext,
        sparse,
        dense_slot,
        temp_sizes: BTreeMap::new(),
        leaves: 0,
    };
    let plan = c.compile(&s.graph);
    let out_dims: Vec<usize> = expr.output.indices.iter().map(|i| ext[i]).collect();
    let mut it = Interp {
        env: vec![0; vars.len()],
        positions: vec![0; sparse.map_or(0, |n| expr.inputs[n].order())],
        sparse: sparse_t,
        dense,
        temps: c.temp_sizes.iter().map(|(&id, &n)| (id, vec![0.0; n])).collect(),
        out: DenseTensor::zeros(&out_dims),
        stats: ExecStats::default(),
    };
    for leaf in 0..c.leaves {
        it.stats.leaf_trip_counts.insert(leaf, 0);
    }
    it.run(&plan, 0);
    Ok((it.out, it.stats))
}

/// Exact values for every symbol a time polynomial may mention: extents from
/// the tensors and prefix counts walked from the sparse storage.
pub fn measured_symbols(expr: &ContractionExpr, tensors: &TensorSet) -> Result<BTreeMap<Symbol, u128>, ExecError> {
    let ext = extents(expr, tensors)?;
    let mut out: BTreeMap<Symbol, u128> = ext
        .iter()
        .map(|(&i, &d)| (Symbol::Bound(i), d as u128))
        .collect();
    if let Some(n) = expr.sparse_input() {
        let a = &expr.inputs[n];
        if let Operand::Sparse(t) = &tensors[&*a.tensor] {
            for d in 1..=t.order() {
                out.insert(
                    Symbol::PrefixNnz {
                        tensor: a.tensor.clone(),
                        depth: d,
                    },
                    stored_prefixes(t, d) as u128,
                );
            }
        }
    }
    Ok(out)
}

/// Positions stored at level `depth` (dense levels count every coordinate).
/// For a compressed level this is the number of distinct nonempty prefixes.
fn stored_prefixes(t: &SparseCsf, depth: usize) -> usize {
    let mut count = 1;
    for l in &t.levels[..depth] {
        count = match l {
            CsfLevel::Dense { size } => count * size,
            CsfLevel::Compressed { crd, .. } => crd.len(),
        };
    }
    count
}

/// Deterministic random tensor: each coordinate is stored with probability
/// `sparsity`, with a nonzero value in [-1, 1].
pub fn random_sparse(dims: &[usize], formats: &[LevelFormat], sparsity: f64, seed: u64) -> SparseCsf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries: Vec<(Vec<usize>, f64)> = coords_of(dims)
        .into_iter()
        .filter_map(|c| {
            let keep = rng.gen_bool(sparsity.clamp(0.0, 1.0));
            let v = nonzero(&mut rng);
            keep.then_some((c, v))
        })
        .collect();
    SparseCsf::from_coo(dims, formats, &entries)
}

pub fn random_dense(dims: &[usize], seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    DenseTensor::from_vec(dims, (0..n).map(|_| nonzero(&mut rng)).collect())
}

fn nonzero(rng: &mut ChaCha8Rng) -> f64 {
    let v: f64 = rng.gen_range(-1.0..1.0);
    if v == 0.0 {
        1.0
    } else {
        v
    }
}

/// Random inputs for a whole contraction with per-index extents.
pub fn random_inputs(
    expr: &ContractionExpr,
    extent: &dyn Fn(IndexVar) -> usize,
    sparsity: f64,
    seed: u64,
) -> TensorSet {
    let mut out = TensorSet::new();
    for (n, a) in expr.inputs.iter().enumerate() {
        let dims: Vec<usize> = a.indices.iter().map(|&i| extent(i)).collect();
        let s = seed.wrapping_mul(31).wrapping_add(n as u64);
        let op = if a.is_sparse() {
            Operand::Sparse(random_sparse(&dims, &a.levels, sparsity, s))
        } else {
            Operand::Dense(random_dense(&dims, s))
        };
        out.insert(a.tensor.to_string(), op);
    }
    out
}

/// Reads `dims d1 d2 ...` followed by `c1 c2 ... value` lines. Blank lines
/// and `#` comments are ignored.
pub fn parse_coo_text(text: &str) -> Result<(Vec<usize>, Vec<(Vec<usize>, f64)>), ExecError> {
    let mut dims: Option<Vec<usize>> = None;
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| ExecError::Text { line: n + 1, msg };
        let words: Vec<&str> = line.split_whitespace().collect();
        match &dims {
            None => {
                if words[0] != "dims" {
                    return Err(err("expected `dims` header".into()));
                }
                let d: Result<Vec<usize>, _> = words[1..].iter().map(|w| w.parse()).collect();
                dims = Some(d.map_err(|e| err(e.to_string()))?);
            }
            Some(d) => {
                if words.len() != d.len() + 1 {
                    return Err(err(format!("expected {} coordinates and a value", d.len())));
                }
                let c: Result<Vec<usize>, _> = words[..d.len()].iter().map(|w| w.parse()).collect();
                let c = c.map_err(|e| err(e.to_string()))?;
                if c.iter().zip(d).any(|(x, e)| x >= e) {
                    return Err(err(format!("coordinate {c:?} outside {d:?}")));
                }
                let v: f64 = words[d.len()].parse().map_err(|_| err("bad value".into()))?;
                entries.push((c, v));
            }
        }
    }
    let dims = dims.ok_or(ExecError::Text {
        line: 0,
        msg: "empty tensor file".into(),
    })?;
    Ok((dims, entries))
}

pub fn write_coo_text(dims: &[usize], entries: &[(Vec<usize>, f64)]) -> String {
    let mut s = format!(
        "dims {}\n",
        dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ")
    );
    for (c, v) in entries {
        for x in c {
            s.push_str(&x.to_string());
            s.push(' ');
        }
        s.push_str(&format!("{v:e}\n"));
    }
    s
}

/// Outcome of running one schedule against the reference.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct Verification {
    pub id: String,
    pub max_rel_diff: f64,
    pub trips: u128,
    /// The time polynomial at the measured symbol values.
    pub predicted: Option<u128>,
    pub ok: bool,
}

/// Interprets `s` and checks it against `reference` within `tol`, and its
/// trip count against the time polynomial.
pub fn verify_schedule(
    s: &Schedule,
    tensors: &TensorSet,
    reference: &DenseTensor,
    tol: f64,
) -> Result<Verification, ExecError> {
    let (out, stats) = interpret(s, tensors)?;
    let measured = measured_symbols(&s.expr, tensors)?;
    let predicted = crate::cost::time_complexity(s).eval_exact(|sym| measured.get(sym).copied());
    let max_rel_diff = out.max_rel_diff(reference);
    Ok(Verification {
        id: s.id.clone(),
        max_rel_diff,
        trips: stats.total,
        predicted,
        ok: max_rel_diff <= tol && predicted == Some(stats.total),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::time_complexity;
    use crate::expr::{idx, parse_einsum, parse_format_pattern, Formats};
    use crate::igraph::{linearize, loopfuse, reorder, Lig};
    use std::sync::Arc;

    fn kernel() -> Arc<ContractionExpr> {
        let mut f = Formats::new();
        f.insert("B".into(), parse_format_pattern("ccc").unwrap());
        Arc::new(parse_einsum("A(l,m,n)=B(i,j,k)*C(i,l)*D(j,m)*E(k,n)", &f).unwrap())
    }

    fn ix(names: &str) -> Vec<IndexVar> {
        names.split(',').map(idx).collect()
    }

    fn inputs(e: &ContractionExpr, sparsity: f64, seed: u64) -> TensorSet {
        random_inputs(e, &|_| 4, sparsity, seed)
    }

    #[test]
    fn matmul_by_hand() {
        let e = parse_einsum("X(i,k)=A(i,j)*B(j,k)", &Formats::new()).unwrap();
        let mut t = TensorSet::new();
        t.insert("A".into(), Operand::Dense(DenseTensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0])));
        t.insert("B".into(), Operand::Dense(DenseTensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0])));
        let x = reference_contract(&e, &t).unwrap();
        assert_eq!(x.data, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn copy_and_zero_input() {
        let e = parse_einsum("Y(i)=Z(i)", &Formats::new()).unwrap();
        let mut t = TensorSet::new();
        t.insert("Z".into(), Operand::Dense(DenseTensor::from_vec(&[3], vec![1.0, -2.0, 3.0])));
        assert_eq!(reference_contract(&e, &t).unwrap().data, vec![1.0, -2.0, 3.0]);
        let e = parse_einsum("X(i,k)=A(i,j)*B(j,k)", &Formats::new()).unwrap();
        let mut t = TensorSet::new();
        t.insert("A".into(), Operand::Dense(DenseTensor::zeros(&[2, 3])));
        t.insert("B".into(), Operand::Dense(random_dense(&[3, 2], 1)));
        assert!(reference_contract(&e, &t).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dim_mismatch_names_index() {
        let e = parse_einsum("X(i,k)=A(i,j)*B(j,k)", &Formats::new()).unwrap();
        let mut t = TensorSet::new();
        t.insert("A".into(), Operand::Dense(DenseTensor::zeros(&[2, 3])));
        t.insert("B".into(), Operand::Dense(DenseTensor::zeros(&[4, 2])));
        assert!(matches!(
            reference_contract(&e, &t),
            Err(ExecError::DimMismatch { index, .. }) if index == idx("j")
        ));
    }

    #[test]
    fn csf_round_trips_all_formats() {
        let d = DenseTensor::from_vec(
            &[2, 3, 2],
            vec![0.0, 1.0, 0.0, 0.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 4.0],
        );
        for pat in ["ccc", "dcc", "cdc", "ccd", "dcd", "ddc"] {
            let f = parse_format_pattern(pat).unwrap();
            let s = SparseCsf::from_dense(&d, &f);
            assert_eq!(s.to_dense(), d, "{pat}");
            assert_eq!(s.nnz(), 4);
        }
    }

    #[test]
    fn prefix_counts_match_recount() {
        let f = parse_format_pattern("ccc").unwrap();
        let t = random_sparse(&[6, 6, 6], &f, 0.1, 9);
        let coords: Vec<Vec<usize>> = t.to_dense().data.iter().enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(n, _)| vec![n / 36, (n / 6) % 6, n % 6])
            .collect();
        for d in 1..=3 {
            let brute: BTreeSet<Vec<usize>> = coords.iter().map(|c| c[..d].to_vec()).collect();
            assert_eq!(measured_nnz_prefix(&t, d).unwrap(), brute.len());
            assert_eq!(stored_prefixes(&t, d), brute.len());
        }
        assert_eq!(measured_nnz_prefix(&t, 3).unwrap(), t.nnz());
        assert!(measured_nnz_prefix(&t, 0).is_err());
        assert!(measured_nnz_prefix(&t, 4).is_err());
        let csr = random_sparse(&[5, 5], &parse_format_pattern("dc").unwrap(), 0.2, 3);
        let rows = (0..5)
            .filter(|&r| (0..5).any(|c| csr.to_dense().get(&[r, c]) != 0.0))
            .count();
        assert_eq!(measured_nnz_prefix(&csr, 1).unwrap(), rows);
    }

    fn check(s: &Schedule, t: &TensorSet) {
        let want = reference_contract(&s.expr, t).unwrap();
        let (got, stats) = interpret(s, t).unwrap();
        assert!(got.max_rel_diff(&want) < 1e-10, "{}", s.pretty());
        let sym = measured_symbols(&s.expr, t).unwrap();
        let expect = time_complexity(s).eval_exact(|x| sym.get(x).copied()).unwrap();
        assert_eq!(stats.total, expect, "{}", s.pretty());
        assert_eq!(stats.total, stats.leaf_trip_counts.values().sum::<u128>());
    }

    #[test]
    fn fused_schedules_match_reference_and_trip_counts() {
        let e = kernel();
        let a = Big::Lig(Lig::from_expr(&e, ix("l,m,n,i,j,k")));
        let b = loopfuse(&a, &e, &[], 3, true).unwrap();
        let c = loopfuse(&a, &e, &[], 2, true).unwrap();
        let c = reorder(&c, &e, &[1], &ix("m,k,n,j")).unwrap();
        let c = loopfuse(&c, &e, &[1], 2, true).unwrap();
        for sp in [0.1, 0.3, 1.0] {
            let t = inputs(&e, sp, 7);
            for g in [&a, &b, &c] {
                check(&Schedule::new(e.clone(), g), &t);
                let lin = linearize(g, &e);
                check(&Schedule::new(e.clone(), &Big::Lig(lin)), &t);
            }
        }
    }

    #[test]
    fn empty_sparse_input_gives_zero_and_no_sparse_trips() {
        let e = kernel();
        let mut t = inputs(&e, 0.0, 1);
        assert!(matches!(&t["B"], Operand::Sparse(s) if s.nnz() == 0));
        let a = Big::Lig(Lig::from_expr(&e, ix("l,m,n,i,j,k")));
        let (out, stats) = interpret(&Schedule::new(e.clone(), &a), &t).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
        assert_eq!(stats.total, 0);
        t.insert("B".into(), Operand::Dense(DenseTensor::zeros(&[4, 4, 4])));
        assert!(matches!(
            interpret(&Schedule::new(e, &a), &t),
            Err(ExecError::NeedsSparse(_))
        ));
    }

    #[test]
    fn text_format_round_trips() {
        let f = parse_format_pattern("cc").unwrap();
        let t = random_sparse(&[3, 4], &f, 0.5, 2);
        let text = write_coo_text(&t.dims, &t.entries());
        let (dims, entries) = parse_coo_text(&format!("# comment\n{text}")).unwrap();
        assert_eq!(SparseCsf::from_coo(&dims, &f, &entries), t);
        assert!(matches!(parse_coo_text("dims 2\n5 1.0"), Err(ExecError::Text { line: 2, .. })));
        assert!(parse_coo_text("").is_err());
    }

    #[test]
    fn random_generation_is_seeded() {
        let f = parse_format_pattern("ccc").unwrap();
        assert_eq!(random_sparse(&[4, 4, 4], &f, 0.3, 5), random_sparse(&[4, 4, 4], &f, 0.3, 5));
        assert_ne!(random_sparse(&[4, 4, 4], &f, 0.3, 5), random_sparse(&[4, 4, 4], &f, 0.3, 6));
        assert_eq!(random_sparse(&[3, 3], &parse_format_pattern("cc").unwrap(), 1.0, 0).nnz(), 9);
    }
}
