//! WebAssembly bindings behind `www/index.html`.
//!
//! Every exported function takes plain numbers or JSON text and returns JSON
//! text. The `*_json` functions hold the logic and are what the native tests
//! call; the `#[wasm_bindgen]` wrappers only convert the error type.

use cktwam_core::backbone::{axis_pairs, rope_phases, StudentConfig};
use cktwam_core::ckt::{CktConfig, CktModule, Grouping};
use cktwam_core::harness::{apply_override, budget_table, RunConfig, REFERENCE_SIZES};
use cktwam_core::tensor::{Precision, Tape, Tensor};
use cktwam_core::training::{load_balance_value, selection_frequency};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

/// Paper-scale module config with `overrides` (a flat JSON object such as
/// `{"M": 4, "d_b": 256}`) applied on top.
fn ckt_config(overrides: &str) -> Result<CktConfig, String> {
    let mut root = json!({ "ckt": serde_json::to_value(CktConfig::paper()).map_err(|e| e.to_string())? });
    let patch: Value = if overrides.trim().is_empty() {
        json!({})
    } else {
        serde_json::from_str(overrides).map_err(|e| format!("overrides are not JSON: {e}"))?
    };
    let obj = patch.as_object().ok_or("overrides must be a JSON object")?;
    for (k, v) in obj {
        apply_override(&mut root, &format!("ckt.{k}={v}")).map_err(|e| e.to_string())?;
    }
    let cfg: CktConfig = serde_json::from_value(root["ckt"].clone()).map_err(|e| e.to_string())?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

pub fn budget_json(overrides: &str, grouping: &str) -> Result<String, String> {
    let cfg = ckt_config(overrides)?;
    let g = Grouping::parse(grouping).ok_or_else(|| format!("unknown grouping '{grouping}'"))?;
    let (b, table) = budget_table(&cfg, g);
    let overheads: Vec<Value> = REFERENCE_SIZES
        .iter()
        .map(|(label, size)| json!({ "reference": label, "percent": b.overhead_pct(*size) }))
        .collect();
    Ok(json!({ "table": table, "budget": b, "overheads": overheads }).to_string())
}

/// Budget table of the paper-scale module with overrides applied.
#[wasm_bindgen]
pub fn budget(overrides: &str, grouping: &str) -> Result<String, JsValue> {
    js(budget_json(overrides, grouping))
}

pub fn route_json(experts: usize, top_k: usize, spread: f64, batch: usize, seed: u64) -> Result<String, String> {
    if !(0.0..=50.0).contains(&spread) {
        return Err("spread must lie in [0, 50]".into());
    }
    if batch == 0 || batch > 64 {
        return Err("batch must be between 1 and 64".into());
    }
    let cfg = CktConfig {
        experts,
        top_k,
        seed,
        ..CktConfig::desk()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let mut m = CktModule::new(cfg.clone()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = m
        .params()
        .find("router.w2.weight")
        .ok_or("router has no output layer")?;
    let shape = m.params().get(id).shape().to_vec();
    let w = Tensor::randn(&shape, spread, &mut rng);
    m.params_mut().assign(id, w.data()).map_err(|e| e.to_string())?;

    let h = Tensor::randn(&[batch, 6, cfg.d_tea], 1.0, &mut rng);
    let mut tape = Tape::new(Precision::F64);
    let b = m.bind(&mut tape);
    let hv = tape.leaf(&h);
    let rec = m
        .route(&mut tape, &b, hv, false, &mut rng)
        .map_err(|e| e.to_string())?
        .record;
    let probs: Vec<&[f64]> = rec.probs.chunks(experts).collect();
    Ok(json!({
        "probs": probs,
        "selected": rec.selected,
        "renorm": rec.renorm,
        "frequency": selection_frequency(&rec),
        "l_bal": load_balance_value(&rec),
    })
    .to_string())
}

/// Eval-mode routing of random teacher states through a desk-sized router
/// whose output weights are drawn with standard deviation `spread`.
#[wasm_bindgen]
pub fn route(experts: usize, top_k: usize, spread: f64, batch: usize, seed: u64) -> Result<String, JsValue> {
    js(route_json(experts, top_k, spread, batch, seed))
}

fn student(scale: &str) -> Result<StudentConfig, String> {
    match scale {
        "desk" => Ok(RunConfig::desk().student),
        "paper" => Ok(RunConfig::paper().student),
        other => Err(format!("unknown scale '{other}' (desk or paper)")),
    }
}

pub fn rope_json(scale: &str, t: usize, h: usize, w: usize) -> Result<String, String> {
    let cfg = student(scale)?;
    let p = rope_phases(&cfg, t, h, w).map_err(|e| e.to_string())?;
    Ok(json!({
        "grid": cfg.grid,
        "head_dim": cfg.head_dim(),
        "pairs": axis_pairs(cfg.head_dim()),
        "temporal": p.temporal,
        "height": p.height,
        "width": p.width,
    })
    .to_string())
}

/// Rotary angles of one visual patch of the student.
#[wasm_bindgen]
pub fn rope(scale: &str, t: usize, h: usize, w: usize) -> Result<String, JsValue> {
    js(rope_json(scale, t, h, w))
}
