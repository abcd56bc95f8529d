//! Browser demo. Each export takes plain strings and returns JSON or source
//! text, so the page needs no bindings beyond `wasm-bindgen`'s glue.
//!
//! The `*_json` functions are ordinary Rust and are what the native tests
//! exercise; the `#[wasm_bindgen]` wrappers only turn errors into JS
//! exceptions.

use std::sync::Arc;

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use fusesched::cost::{self, Binding};
use fusesched::emit::{self, Format};
use fusesched::enumerate::{self, GenConfig};
use fusesched::expr::{parse_einsum, parse_format_pattern, ContractionExpr, Formats};
use fusesched::igraph::Schedule;
use fusesched::prune::{self, PipelineConfig};
use fusesched::smt::ConstraintSet;

/// Larger spaces take too long to be pleasant in a tab.
const CAP: usize = 50_000;

/// `sparse` is a space separated list like `B:ccc C:dc`.
fn problem(expr: &str, sparse: &str, max_memory_depth: usize) -> Result<(Arc<ContractionExpr>, Vec<Schedule>), String> {
    let mut formats = Formats::new();
    for spec in sparse.split_whitespace() {
        let (name, pattern) = spec
            .split_once(':')
            .ok_or_else(|| format!("expected TENSOR:LEVELS, got `{spec}`"))?;
        formats.insert(name.to_string(), parse_format_pattern(pattern).map_err(|e| e.to_string())?);
    }
    let e = Arc::new(parse_einsum(expr, &formats).map_err(|e| e.to_string())?);
    let gen = GenConfig {
        max_memory_depth,
        cap: Some(CAP),
        ..GenConfig::default()
    };
    let all = enumerate::gen_schedules(&e, &gen).map_err(|e| e.to_string())?;
    Ok((e, all))
}

pub fn enumerate_json(expr: &str, sparse: &str, max_memory_depth: usize) -> Result<String, String> {
    let (e, all) = problem(expr, sparse, max_memory_depth)?;
    let histogram: Vec<Value> = enumerate::depth_histogram(&all)
        .into_iter()
        .map(|((l, m), n)| json!({"loop_depth": l, "mem_depth": m, "count": n}))
        .collect();
    Ok(json!({"expr": e.to_string(), "count": all.len(), "histogram": histogram}).to_string())
}

/// Every schedule evaluated at `bounds` (a binding in the CLI's JSON form),
/// plus the id the pipeline picks without the solver stage.
pub fn scatter_json(expr: &str, sparse: &str, bounds: &str, llc_bytes: u64) -> Result<String, String> {
    let (e, all) = problem(expr, sparse, 2)?;
    let binding: Binding = serde_json::from_str(bounds).map_err(|e| format!("bounds: {e}"))?;
    let local = binding.clone().for_expr(&e);
    let mut points = Vec::with_capacity(all.len());
    for s in &all {
        let p = cost::profile(s);
        let time = cost::evaluate(&p.time, &local).map_err(|e| e.to_string())?;
        let bytes = cost::aux_bytes(s, &local).map_err(|e| e.to_string())?;
        points.push(json!({
            "id": s.id,
            "pretty": s.pretty(),
            "loop_depth": p.loop_depth,
            "mem_depth": p.mem_depth,
            "time": time,
            "aux_bytes": bytes,
        }));
    }
    let cfg = PipelineConfig {
        skip_stage3: true,
        llc_bytes,
        ..PipelineConfig::default()
    };
    let report = prune::prune_schedules(&e, all, &cfg, &ConstraintSet::default(), Some(&binding))
        .map_err(|e| e.to_string())?;
    let chosen = report.chosen.map(|c| c.id);
    Ok(json!({"points": points, "chosen": chosen, "warnings": report.warnings}).to_string())
}

pub fn emit_text(expr: &str, sparse: &str, id: &str, format: &str) -> Result<String, String> {
    let format: Format = format.parse()?;
    let (_, all) = problem(expr, sparse, 2)?;
    let s = all
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| format!("unknown schedule id {id}"))?;
    Ok(emit::emit(s, format))
}

#[wasm_bindgen]
pub fn enumerate(expr: &str, sparse: &str, max_memory_depth: usize) -> Result<String, JsError> {
    enumerate_json(expr, sparse, max_memory_depth).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn scatter(expr: &str, sparse: &str, bounds: &str, llc_bytes: u64) -> Result<String, JsError> {
    scatter_json(expr, sparse, bounds, llc_bytes).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = emitSource)]
pub fn emit_source(expr: &str, sparse: &str, id: &str, format: &str) -> Result<String, JsError> {
    emit_text(expr, sparse, id, format).map_err(|e| JsError::new(&e))
}
