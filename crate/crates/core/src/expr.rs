//! Einsum contractions over dense and level-format sparse tensors.
//!
//! A [`ContractionExpr`] is one output access fed by a product of input
//! accesses. Any index that appears on the right but not on the left is
//! summed over. Tensors stored with at least one compressed level impose a
//! precedence on the loops that traverse them: their modes must be visited
//! outermost-first, see [`ContractionExpr::access_constraints`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("index `{index}` repeated within access {tensor}")]
    RepeatedIndex { tensor: String, index: IndexVar },
    #[error("format given for unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("output index `{0}` does not appear in any input")]
    OutputIndexMissing(IndexVar),
    #[error("tensor {tensor} has order {order} but {levels} level formats were given")]
    FormatArity {
        tensor: String,
        order: usize,
        levels: usize,
    },
    #[error("output tensor {0} must be stored densely")]
    SparseOutput(String),
    #[error("output tensor {0} also appears as an input")]
    OutputIsInput(String),
    #[error("tensor {0} is used with different orders")]
    InconsistentOrder(String),
    #[error("at most one sparse input is supported, found {0} and {1}")]
    MultipleSparse(String, String),
    #[error("cyclic access constraints between {}", .0.join(", "))]
    ConstraintCycle(Vec<String>),
    #[error("bad level format `{0}` (expected a string over {{d,c}})")]
    BadFormat(String),
}

/// A loop index: one lowercase letter optionally followed by digits.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IndexVar {
    letter: u8,
    suffix: Option<u16>,
}

impl IndexVar {
    pub fn new(name: &str) -> Option<IndexVar> {
        let bytes = name.as_bytes();
        let (&first, rest) = bytes.split_first()?;
        if !first.is_ascii_lowercase() {
            return None;
        }
        let suffix = if rest.is_empty() {
            None
        } else if rest.iter().all(u8::is_ascii_digit) {
            Some(std::str::from_utf8(rest).ok()?.parse().ok()?)
        } else {
            return None;
        };
        Some(IndexVar {
            letter: first,
            suffix,
        })
    }

    /// Parses the upper-case extent symbol (`J2` for `j2`).
    pub fn from_bound_symbol(sym: &str) -> Option<IndexVar> {
        let mut chars = sym.chars();
        let first = chars.next()?;
        if !first.is_ascii_uppercase() {
            return None;
        }
        let lowered: String = std::iter::once(first.to_ascii_lowercase())
            .chain(chars)
            .collect();
        IndexVar::new(&lowered)
    }

    pub fn name(&self) -> String {
        self.to_string()
    }

    /// The dense extent this index ranges over (`I` for `i`).
    pub fn bound_symbol(&self) -> String {
        let mut s = self.to_string();
        s[..1].make_ascii_uppercase();
        s
    }
}

impl fmt::Display for IndexVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter as char)?;
        if let Some(n) = self.suffix {
            write!(f, "{n}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for IndexVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for IndexVar {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        IndexVar::new(s).ok_or_else(|| ExprError::Syntax {
            pos: 0,
            msg: format!("`{s}` is not an index name"),
        })
    }
}

impl Serialize for IndexVar {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for IndexVar {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        IndexVar::new(&s).ok_or_else(|| serde::de::Error::custom(format!("bad index `{s}`")))
    }
}

/// Shorthand used throughout the tests: `idx("i")`.
pub fn idx(name: &str) -> IndexVar {
    IndexVar::new(name).unwrap_or_else(|| panic!("bad index name {name}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelFormat {
    Dense,
    Compressed,
}

impl LevelFormat {
    pub fn code(self) -> char {
        match self {
            LevelFormat::Dense => 'd',
            LevelFormat::Compressed => 'c',
        }
    }
}

/// Parses a per-level pattern such as `dc` (CSR) or `ccc` (CSF).
pub fn parse_format_pattern(pattern: &str) -> Result<Vec<LevelFormat>, ExprError> {
    pattern
        .chars()
        .map(|c| match c {
            'd' | 'D' => Ok(LevelFormat::Dense),
            'c' | 'C' | 's' | 'S' => Ok(LevelFormat::Compressed),
            _ => Err(ExprError::BadFormat(pattern.to_string())),
        })
        .collect()
}

/// Parses a `NAME:pattern` command-line flag.
pub fn parse_sparse_flag(flag: &str) -> Result<(String, Vec<LevelFormat>), ExprError> {
    let (name, pattern) = flag
        .split_once(':')
        .ok_or_else(|| ExprError::BadFormat(flag.to_string()))?;
    Ok((name.trim().to_string(), parse_format_pattern(pattern.trim())?))
}

pub type Formats = BTreeMap<String, Vec<LevelFormat>>;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorAccess {
    pub tensor: Arc<str>,
    pub indices: Vec<IndexVar>,
    pub levels: Vec<LevelFormat>,
}

impl TensorAccess {
    pub fn dense(tensor: &str, indices: &[IndexVar]) -> TensorAccess {
        TensorAccess {
            tensor: tensor.into(),
            indices: indices.to_vec(),
            levels: vec![LevelFormat::Dense; indices.len()],
        }
    }

    pub fn with_levels(tensor: &str, indices: &[IndexVar], levels: &[LevelFormat]) -> TensorAccess {
        TensorAccess {
            tensor: tensor.into(),
            indices: indices.to_vec(),
            levels: levels.to_vec(),
        }
    }

    pub fn order(&self) -> usize {
        self.indices.len()
    }

    pub fn is_sparse(&self) -> bool {
        self.levels.contains(&LevelFormat::Compressed)
    }

    /// Mode position of `index` in this access.
    pub fn mode_of(&self, index: IndexVar) -> Option<usize> {
        self.indices.iter().position(|&i| i == index)
    }
}

impl fmt::Display for TensorAccess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.tensor)?;
        for (n, i) in self.indices.iter().enumerate() {
            if n > 0 {
                f.write_str(",")?;
            }
            write!(f, "{i}")?;
        }
        f.write_str(")")
    }
}

/// Union of the mode indices of the given accesses.
pub fn indices_of<'a>(accesses: impl IntoIterator<Item = &'a TensorAccess>) -> BTreeSet<IndexVar> {
    accesses
        .into_iter()
        .flat_map(|a| a.indices.iter().copied())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContractionExpr {
    pub output: TensorAccess,
    pub inputs: Vec<TensorAccess>,
    pub contracted: BTreeSet<IndexVar>,
}

impl ContractionExpr {
    /// Builds and validates a contraction.
    pub fn new(output: TensorAccess, inputs: Vec<TensorAccess>) -> Result<Self, ExprError> {
        let expr = ContractionExpr::from_parts(output, inputs);
        expr.validate()?;
        Ok(expr)
    }

    /// Builds a contraction without validating it. Only the contracted set is
    /// derived; callers are responsible for the remaining invariants.
    pub fn from_parts(output: TensorAccess, inputs: Vec<TensorAccess>) -> Self {
        let out = indices_of([&output]);
        let contracted = indices_of(&inputs)
            .into_iter()
            .filter(|i| !out.contains(i))
            .collect();
        ContractionExpr {
            output,
            inputs,
            contracted,
        }
    }

    pub fn validate(&self) -> Result<(), ExprError> {
        for access in std::iter::once(&self.output).chain(&self.inputs) {
            let mut seen = BTreeSet::new();
            for &i in &access.indices {
                if !seen.insert(i) {
                    return Err(ExprError::RepeatedIndex {
                        tensor: access.to_string(),
                        index: i,
                    });
                }
            }
            if access.levels.len() != access.order() {
                return Err(ExprError::FormatArity {
                    tensor: access.tensor.to_string(),
                    order: access.order(),
                    levels: access.levels.len(),
                });
            }
        }
        if self.output.is_sparse() {
            return Err(ExprError::SparseOutput(self.output.tensor.to_string()));
        }
        if self.inputs.iter().any(|a| a.tensor == self.output.tensor) {
            return Err(ExprError::OutputIsInput(self.output.tensor.to_string()));
        }
        let mut orders: BTreeMap<&str, (usize, &[LevelFormat])> = BTreeMap::new();
        for a in &self.inputs {
            match orders.insert(&a.tensor, (a.order(), &a.levels)) {
                Some((o, lv)) if o != a.order() || lv != a.levels.as_slice() => {
                    return Err(ExprError::InconsistentOrder(a.tensor.to_string()))
                }
                _ => {}
            }
        }
        let inputs = indices_of(&self.inputs);
        if let Some(&missing) = self.output.indices.iter().find(|i| !inputs.contains(i)) {
            return Err(ExprError::OutputIndexMissing(missing));
        }
        let sparse: Vec<&TensorAccess> = self.inputs.iter().filter(|a| a.is_sparse()).collect();
        if sparse.len() > 1 {
            return Err(ExprError::MultipleSparse(
                sparse[0].to_string(),
                sparse[1].to_string(),
            ));
        }
        self.access_constraints()?;
        Ok(())
    }

    /// Position of the (single) input with a compressed level.
    pub fn sparse_input(&self) -> Option<usize> {
        self.inputs.iter().position(TensorAccess::is_sparse)
    }

    pub fn sparse_access(&self) -> Option<&TensorAccess> {
        self.sparse_input().map(|n| &self.inputs[n])
    }

    /// Every index of the contraction, in sorted order.
    pub fn all_indices(&self) -> BTreeSet<IndexVar> {
        let mut all = indices_of(&self.inputs);
        all.extend(self.output.indices.iter().copied());
        all
    }

    /// Precedence edges `(outer, inner)` imposed by sparse storage.
    ///
    /// Every input with at least one compressed level contributes the chain of
    /// adjacent pairs over its whole mode order; dense inputs contribute
    /// nothing. The union must be acyclic.
    pub fn access_constraints(&self) -> Result<BTreeSet<(IndexVar, IndexVar)>, ExprError> {
        let mut edges = BTreeSet::new();
        for a in self.inputs.iter().filter(|a| a.is_sparse()) {
            edges.extend(a.indices.windows(2).map(|w| (w[0], w[1])));
        }
        let nodes: BTreeSet<IndexVar> = edges.iter().flat_map(|&(a, b)| [a, b]).collect();
        if topo_order(&nodes, &edges).is_none() {
            let culprits = self
                .inputs
                .iter()
                .filter(|a| a.is_sparse())
                .map(|a| a.to_string())
                .collect();
            return Err(ExprError::ConstraintCycle(culprits));
        }
        Ok(edges)
    }
}

fn topo_order(
    nodes: &BTreeSet<IndexVar>,
    edges: &BTreeSet<(IndexVar, IndexVar)>,
) -> Option<Vec<IndexVar>> {
    let mut remaining = nodes.clone();
    let mut order = Vec::with_capacity(nodes.len());
    while !remaining.is_empty() {
        let next = *remaining
            .iter()
            .find(|&&n| !edges.iter().any(|&(a, b)| b == n && remaining.contains(&a)))?;
        remaining.remove(&next);
        order.push(next);
    }
    Some(order)
}

impl fmt::Display for ContractionExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}=", self.output)?;
        for (n, a) in self.inputs.iter().enumerate() {
            if n > 0 {
                f.write_str("*")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

impl ContractionExpr {
    /// `B:ccc`-style summary of the non-dense formats, for round-tripping
    /// through [`parse_einsum`].
    pub fn formats(&self) -> Formats {
        self.inputs
            .iter()
            .filter(|a| a.is_sparse())
            .map(|a| (a.tensor.to_string(), a.levels.clone()))
            .collect()
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError::Syntax {
            pos: self.pos,
            msg: msg.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.src[self.pos..].starts_with(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.src[self.pos..].chars().next()
    }

    fn expect(&mut self, c: char) -> Result<(), ExprError> {
        match self.peek() {
            Some(got) if got == c => {
                self.pos += 1;
                Ok(())
            }
            Some(got) => self.err(format!("expected `{c}`, found `{got}`")),
            None => self.err(format!("expected `{c}`, found end of input")),
        }
    }

    fn word(&mut self) -> &'a str {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.src[start..];
        let len = rest
            .find(|c: char| !c.is_ascii_alphanumeric() && c != '_')
            .unwrap_or(rest.len());
        self.pos += len;
        &self.src[start..start + len]
    }

    fn access(&mut self) -> Result<(String, Vec<IndexVar>), ExprError> {
        let start = {
            self.skip_ws();
            self.pos
        };
        let name = self.word();
        if name.is_empty() || !name.starts_with(|c: char| c.is_ascii_alphabetic()) {
            self.pos = start;
            return self.err("expected a tensor name");
        }
        self.expect('(')?;
        let mut indices = Vec::new();
        if self.peek() == Some(')') {
            self.pos += 1;
            return Ok((name.to_string(), indices));
        }
        loop {
            let at = {
                self.skip_ws();
                self.pos
            };
            let w = self.word();
            match IndexVar::new(w) {
                Some(i) => indices.push(i),
                None => {
                    self.pos = at;
                    return self.err(format!("`{w}` is not an index (lowercase letter plus digits)"));
                }
            }
            match self.peek() {
                Some(',') => self.pos += 1,
                Some(')') => {
                    self.pos += 1;
                    return Ok((name.to_string(), indices));
                }
                _ => return self.err("expected `,` or `)`"),
            }
        }
    }
}

/// Parses `Out(idx,...) = In1(idx,...) * In2(idx,...) * ...`.
///
/// Tensors missing from `formats` are dense.
pub fn parse_einsum(text: &str, formats: &Formats) -> Result<ContractionExpr, ExprError> {
    let mut p = Parser { src: text, pos: 0 };
    let (out_name, out_idx) = p.access()?;
    p.expect('=')?;
    let mut inputs = vec![p.access()?];
    while p.peek() == Some('*') {
        p.pos += 1;
        inputs.push(p.access()?);
    }
    if let Some(c) = p.peek() {
        return p.err(format!("unexpected `{c}`"));
    }

    let names: BTreeSet<&str> = std::iter::once(out_name.as_str())
        .chain(inputs.iter().map(|(n, _)| n.as_str()))
        .collect();
    if let Some(unknown) = formats.keys().find(|k| !names.contains(k.as_str())) {
        return Err(ExprError::UnknownTensor(unknown.clone()));
    }
    let make = |name: &str, indices: Vec<IndexVar>| {
        let levels = formats
            .get(name)
            .cloned()
            .unwrap_or_else(|| vec![LevelFormat::Dense; indices.len()]);
        TensorAccess {
            tensor: name.into(),
            indices,
            levels,
        }
    };
    let output = make(&out_name, out_idx);
    let inputs = inputs.into_iter().map(|(n, i)| make(&n, i)).collect();
    ContractionExpr::new(output, inputs)
}
