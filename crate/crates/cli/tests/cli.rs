use std::path::PathBuf;
use std::process::{Command, Output};
use std::sync::Arc;

use fusesched::expr::{idx, parse_einsum, parse_format_pattern, Formats};
use fusesched::igraph::{loopfuse, reorder, Big, Lig, Schedule};
use serde_json::Value;

const KERNEL: &str = "A(l,m,n)=B(i,j,k)*C(i,l)*D(j,m)*E(k,n)";

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusesched"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("valid json")
}

#[test]
fn enumerate_kernel_has_depths_four_to_six() {
    let v = json(&run(&["enumerate", "--expr", KERNEL, "--sparse", "B:ccc"]));
    let depths: Vec<u64> = v["histogram"]
        .as_array()
        .unwrap()
        .iter()
        .map(|h| h["loop_depth"].as_u64().unwrap())
        .collect();
    for d in [4, 5, 6] {
        assert!(depths.contains(&d), "{depths:?}");
    }
    assert_eq!(v["count"].as_u64().unwrap() as usize, v["schedules"].as_array().unwrap().len());
}

#[test]
fn select_case_one_picks_depth_four() {
    let out = run(&[
        "select",
        "--expr",
        KERNEL,
        "--sparse",
        "B:ccc",
        "--bounds",
        data("case1.json").to_str().unwrap(),
        "--constraints",
        data("ranges.json").to_str().unwrap(),
        "--llc-bytes",
        "20971520",
    ]);
    let v = json(&out);
    assert_eq!(v["chosen"]["loop_depth"], 4);
    assert_eq!(v["counts"]["stage5"], 1);
}

#[test]
fn config_file_resolves_relative_paths() {
    let v = json(&run(&["select", "--config", data("kernel.json").to_str().unwrap(), "--skip-stage3"]));
    assert_eq!(v["chosen"]["loop_depth"], 4);
    assert_eq!(v["counts"]["stage3"], Value::Null);
}

#[test]
fn select_is_byte_identical_across_runs() {
    let config = data("kernel.json");
    let args = [
        "select",
        "--config",
        config.to_str().unwrap(),
        "--tie-break",
        "random:9",
    ];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn emit_pseudo_for_the_two_temp_schedule() {
    let mut f = Formats::new();
    f.insert("B".into(), parse_format_pattern("ccc").unwrap());
    let e = Arc::new(parse_einsum(KERNEL, &f).unwrap());
    let a = Big::Lig(Lig::from_expr(&e, "l,m,n,i,j,k".split(',').map(idx).collect()));
    let g = loopfuse(&a, &e, &[], 2, true).unwrap();
    let g = reorder(&g, &e, &[1], &"m,k,n,j".split(',').map(idx).collect::<Vec<_>>()).unwrap();
    let g = loopfuse(&g, &e, &[1], 2, true).unwrap();
    let id = Schedule::new(e, &g).id;

    let out = run(&["emit", "--expr", KERNEL, "--sparse", "B:ccc", "--id", &id, "--format", "pseudo"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.matches("where(").count(), 2, "{text}");
    assert!(text.contains("t1(j,k)"));
    assert!(text.contains("t2 += t1(j,k) * D(j,m)"));

    let out = run(&["emit", "--expr", KERNEL, "--sparse", "B:ccc", "--id", &id, "--format", "c"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("B3_crd[pB3]"));
}

#[test]
fn verify_spmm_passes_and_fails_on_impossible_tolerance() {
    let base = ["verify", "--expr", "X(i,k)=B(i,j)*C(j,k)", "--sparse", "B:dc", "--seed", "3"];
    let v = json(&run(&base));
    assert_eq!(v["ok"], true);
    assert_eq!(v["runs"].as_array().unwrap().len(), 3);

    let mut strict = base.to_vec();
    strict.push("--tolerance=-1");
    assert_eq!(run(&strict).status.code(), Some(2));
}

#[test]
fn verify_reads_tensor_files() {
    let dir = std::env::temp_dir().join(format!("fusesched-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("b.coo");
    let out = run(&["random", "--random", "4,6", "--sparsity", "0.4", "--seed", "5", "-o", path.to_str().unwrap()]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("dims 4 6\n"));
    let tensor = format!("B={}", path.display());
    let v = json(&run(&[
        "verify", "--expr", "X(i,k)=B(i,j)*C(j,k)", "--sparse", "B:dc", "--tensor", &tensor, "--extent", "i=4",
        "--extent", "j=6", "--sparsity", "1.0",
    ]));
    assert_eq!(v["ok"], true);
    let again = run(&["random", "--random", "4,6", "--sparsity", "0.4", "--seed", "5"]);
    assert_eq!(again.stdout, text.as_bytes());
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["enumerate"]).status.code(), Some(1));
    assert_eq!(run(&["enumerate", "--expr", "A(i)=B(i"]).status.code(), Some(1));
    assert_eq!(
        run(&["emit", "--expr", "X(i)=B(i)", "--id", "0000000000000000"]).status.code(),
        Some(1)
    );
    let missing = run(&["prune", "--expr", "X(i,k)=B(i,j)*C(j,k)", "--solver", "/nonexistent/solver"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(run(&["--help"]).status.success());
}

#[test]
fn prune_skip_stage2_feeds_stage1_output_to_stage3() {
    let v = json(&run(&[
        "prune",
        "--expr",
        KERNEL,
        "--sparse",
        "B:ccc",
        "--skip-stage2",
        "--skip-stage3",
    ]));
    assert_eq!(v["counts"]["stage2"], Value::Null);
    assert_eq!(v["counts"]["stage1"], v["counts"]["enumerated"]);
    let frontier: usize = v["frontier"].as_array().unwrap().iter().map(|b| b["ids"].as_array().unwrap().len()).sum();
    assert_eq!(frontier as u64, v["counts"]["stage1"].as_u64().unwrap());
}
