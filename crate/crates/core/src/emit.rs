//! Loop-nest source text for a schedule.
//!
//! `pseudo` is the forall/where notation. `c` is a C function over CSF
//! arrays: level `d` of the sparse input `B` is `B{d}_pos`/`B{d}_crd` when
//! compressed, and its values are `B_vals`. Dense operands are row-major.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::expr::{ContractionExpr, IndexVar, LevelFormat};
use crate::igraph::{Access, Big, LoopKind, Role, Schedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Pseudo,
    C,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Format, String> {
        match s {
            "pseudo" => Ok(Format::Pseudo),
            "c" => Ok(Format::C),
            _ => Err(format!("unknown format `{s}`; expected `pseudo` or `c`")),
        }
    }
}

pub fn emit(s: &Schedule, format: Format) -> String {
    match format {
        Format::Pseudo => {
            let mut out = s.graph.to_ir();
            out.push('\n');
            out
        }
        Format::C => emit_c(s),
    }
}

struct CWriter<'a> {
    expr: &'a ContractionExpr,
    out: String,
    depth: usize,
}

impl CWriter<'_> {
    fn line(&mut self, text: &str) {
        let _ = writeln!(self.out, "{}{text}", "  ".repeat(self.depth));
    }

    fn open_loop(&mut self, index: IndexVar, kind: LoopKind) {
        let bound = index.bound_symbol();
        let LoopKind::Sparse { level } = kind else {
            self.line(&format!("for (int {index} = 0; {index} < {bound}; {index}++) {{"));
            self.depth += 1;
            return;
        };
        let sp = &self.expr.inputs[self.expr.sparse_input().expect("sparse loop needs a sparse input")];
        let t = &sp.tensor;
        let parent = if level == 0 { "0".to_string() } else { format!("p{t}{level}") };
        let p = format!("p{t}{}", level + 1);
        match sp.levels[level] {
            LevelFormat::Dense => {
                self.line(&format!("for (int {index} = 0; {index} < {bound}; {index}++) {{"));
                self.depth += 1;
                self.line(&format!("int {p} = {parent} * {bound} + {index};"));
            }
            LevelFormat::Compressed => {
                let l = level + 1;
                self.line(&format!(
                    "for (int {p} = {t}{l}_pos[{parent}]; {p} < {t}{l}_pos[{parent} + 1]; {p}++) {{"
                ));
                self.depth += 1;
                self.line(&format!("int {index} = {t}{l}_crd[{p}];"));
            }
        }
    }

    fn close(&mut self, n: usize) {
        for _ in 0..n {
            self.depth -= 1;
            self.line("}");
        }
    }

    fn access(&self, a: &Access) -> String {
        if let Role::Input(n) = a.role {
            if Some(n) == self.expr.sparse_input() {
                return format!("{}_vals[p{}{}]", a.tensor, a.tensor, a.indices.len());
            }
        }
        if a.indices.is_empty() {
            return match a.role {
                Role::Temp(_) => a.tensor.to_string(),
                _ => format!("{}[0]", a.tensor),
            };
        }
        format!("{}[{}]", a.tensor, flat_index(&a.indices))
    }

    fn section(&mut self, g: &Big) {
        match g {
            Big::Lig(l) => {
                for &i in &l.order {
                    self.open_loop(i, g.loop_kind(self.expr, i));
                }
                let rhs: Vec<String> = l.body.factors.iter().map(|a| self.access(a)).collect();
                let stmt = format!("{} += {};", self.access(&l.body.lhs), rhs.join(" * "));
                self.line(&stmt);
                self.close(l.order.len());
            }
            Big::Node(n) => {
                for &i in &n.fused {
                    self.open_loop(i, g.loop_kind(self.expr, i));
                }
                let name = n.temp.name();
                if n.temp.indices.is_empty() {
                    self.line(&format!("double {name} = 0.0;"));
                } else {
                    let size: Vec<String> = n.temp.indices.iter().map(|i| i.bound_symbol()).collect();
                    self.line(&format!("double {name}[{}];", size.join(" * ")));
                    self.line(&format!("memset({name}, 0, sizeof {name});"));
                }
                self.section(&n.producer);
                self.section(&n.consumer);
                self.close(n.fused.len());
            }
        }
    }
}

/// Row-major offset, e.g. `(i * J + j) * K + k`.
fn flat_index(indices: &[IndexVar]) -> String {
    let mut s = indices[0].to_string();
    for i in &indices[1..] {
        if s.contains(' ') {
            s = format!("({s})");
        }
        s = format!("{s} * {} + {i}", i.bound_symbol());
    }
    s
}

fn emit_c(s: &Schedule) -> String {
    let expr = &*s.expr;
    let mut params: Vec<String> = expr
        .all_indices()
        .iter()
        .map(|i| format!("int {}", i.bound_symbol()))
        .collect();
    for (n, a) in expr.inputs.iter().enumerate() {
        if Some(n) == expr.sparse_input() {
            for (d, f) in a.levels.iter().enumerate() {
                if *f == LevelFormat::Compressed {
                    let t = &a.tensor;
                    params.push(format!("const int *{t}{}_pos", d + 1));
                    params.push(format!("const int *{t}{}_crd", d + 1));
                }
            }
            params.push(format!("const double *{}_vals", a.tensor));
        } else {
            params.push(format!("const double *{}", a.tensor));
        }
    }
    params.push(format!("double *{}", expr.output.tensor));
    let mut w = CWriter {
        expr,
        out: String::new(),
        depth: 1,
    };
    let _ = writeln!(w.out, "#include <string.h>\n\n/* {} */", s.pretty());
    let _ = writeln!(w.out, "void kernel({}) {{", params.join(", "));
    let out = &expr.output;
    let size = if out.indices.is_empty() {
        "1".to_string()
    } else {
        out.indices.iter().map(|i| i.bound_symbol()).collect::<Vec<_>>().join(" * ")
    };
    w.line(&format!("memset({}, 0, sizeof(double) * {size});", out.tensor));
    w.section(&s.graph);
    w.out.push_str("}\n");
    w.out
}
