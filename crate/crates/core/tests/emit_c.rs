//! Compiles emitted C with the system compiler and checks it against the
//! dense reference. Skipped (with a note) when no `cc` is on PATH.

use std::fmt::Write as _;
use std::process::Command;
use std::sync::Arc;

use fusesched::emit::{emit, Format};
use fusesched::enumerate::{gen_schedules, GenConfig};
use fusesched::exec::{random_inputs, reference_contract, CsfLevel, Operand, TensorSet};
use fusesched::expr::{idx, parse_einsum, parse_format_pattern, ContractionExpr, Formats, IndexVar};
use fusesched::igraph::Schedule;

fn expr(text: &str, sparse: &[(&str, &str)]) -> Arc<ContractionExpr> {
    let mut f = Formats::new();
    for (t, p) in sparse {
        f.insert(t.to_string(), parse_format_pattern(p).unwrap());
    }
    Arc::new(parse_einsum(text, &f).unwrap())
}

fn c_array(out: &mut String, ty: &str, name: &str, xs: impl Iterator<Item = String>) {
    let xs: Vec<String> = xs.collect();
    let body = if xs.is_empty() { "0".to_string() } else { xs.join(", ") };
    let _ = writeln!(out, "static {ty} {name}[] = {{{body}}};");
}

/// Every kernel in one translation unit; `main` prints each output on one
/// line.
fn program(e: &ContractionExpr, schedules: &[&Schedule], tensors: &TensorSet, extent: &dyn Fn(IndexVar) -> usize) -> String {
    let mut src = String::from("#include <stdio.h>\n");
    for (n, s) in schedules.iter().enumerate() {
        let text = emit(s, Format::C).replace("void kernel(", &format!("void kernel_{n}("));
        src.push_str(&text);
    }
    let mut args: Vec<String> = e.all_indices().iter().map(|&i| extent(i).to_string()).collect();
    for a in &e.inputs {
        let t = &a.tensor;
        match &tensors[&t.to_string()] {
            Operand::Sparse(csf) => {
                for (d, level) in csf.levels.iter().enumerate() {
                    if let CsfLevel::Compressed { pos, crd } = level {
                        let l = d + 1;
                        c_array(&mut src, "const int", &format!("{t}{l}_pos"), pos.iter().map(|v| v.to_string()));
                        c_array(&mut src, "const int", &format!("{t}{l}_crd"), crd.iter().map(|v| v.to_string()));
                        args.push(format!("{t}{l}_pos"));
                        args.push(format!("{t}{l}_crd"));
                    }
                }
                c_array(&mut src, "const double", &format!("{t}_vals"), csf.vals.iter().map(|v| format!("{v:e}")));
                args.push(format!("{t}_vals"));
            }
            Operand::Dense(d) => {
                c_array(&mut src, "const double", &format!("{t}_data"), d.data.iter().map(|v| format!("{v:e}")));
                args.push(format!("{t}_data"));
            }
        }
    }
    let size: usize = e.output.indices.iter().map(|&i| extent(i)).product();
    let _ = writeln!(src, "static double out[{}];", size.max(1));
    args.push("out".to_string());
    src.push_str("int main(void) {\n");
    for n in 0..schedules.len() {
        let _ = writeln!(
            src,
            "  kernel_{n}({});\n  for (int x = 0; x < {size}; x++) printf(\"%.17g \", out[x]);\n  printf(\"\\n\");",
            args.join(", ")
        );
    }
    src.push_str("  return 0;\n}\n");
    src
}

fn compile_and_run(name: &str, src: &str) -> Option<String> {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return None;
    }
    let dir = std::env::temp_dir().join(format!("fusesched-emit-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let c = dir.join("k.c");
    let bin = dir.join("k");
    std::fs::write(&c, src).unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-O1", "-Wall", "-Werror", "-Wno-unused-variable", "-o"])
        .arg(&bin)
        .arg(&c)
        .output()
        .unwrap();
    assert!(out.status.success(), "cc failed:\n{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success());
    Some(String::from_utf8(run.stdout).unwrap())
}

fn check(name: &str, e: &Arc<ContractionExpr>, pick: impl Fn(usize) -> bool, extents: &[(&str, usize)]) {
    let extent = |i: IndexVar| extents.iter().find(|(n, _)| idx(n) == i).map(|p| p.1).unwrap();
    let tensors = random_inputs(e, &extent, 0.4, 7);
    let reference = reference_contract(e, &tensors).unwrap();
    let all = gen_schedules(e, &GenConfig::default()).unwrap();
    let chosen: Vec<&Schedule> = all.iter().enumerate().filter(|(n, _)| pick(*n)).map(|p| p.1).collect();
    let Some(stdout) = compile_and_run(name, &program(e, &chosen, &tensors, &extent)) else {
        return;
    };
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), chosen.len());
    for (s, line) in chosen.iter().zip(lines) {
        let got: Vec<f64> = line.split_whitespace().map(|v| v.parse().unwrap()).collect();
        assert_eq!(got.len(), reference.data.len().max(1));
        for (a, b) in got.iter().zip(&reference.data) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{}: {a} vs {b}", s.pretty());
        }
    }
}

#[test]
fn spmm_every_schedule() {
    let e = expr("X(i,k)=B(i,j)*C(j,k)", &[("B", "dc")]);
    check("spmm", &e, |_| true, &[("i", 4), ("j", 5), ("k", 3)]);
}

#[test]
fn four_input_kernel_sample() {
    let e = expr("A(l,m,n)=B(i,j,k)*C(i,l)*D(j,m)*E(k,n)", &[("B", "ccc")]);
    check(
        "kernel",
        &e,
        |n| n % 97 == 0,
        &[("i", 3), ("j", 4), ("k", 5), ("l", 2), ("m", 3), ("n", 4)],
    );
}

#[test]
fn chain_with_dense_middle_level() {
    let e = expr("X(i,l)=B(i,j,k)*C(j,k,l)", &[("B", "cdc")]);
    check("chain", &e, |n| n % 5 == 0, &[("i", 3), ("j", 4), ("k", 3), ("l", 2)]);
}
