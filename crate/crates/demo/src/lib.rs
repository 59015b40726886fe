//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes plain numbers and returns a JSON string, so the page
//! needs no bundler or generated type definitions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repeater_core::engine;
use repeater_core::metrics::{self, MetricsSummary};
use repeater_core::model::{success_probability, AttemptOutcome, AttemptTable};
use repeater_core::oracle::{self, BellOutcome};
use repeater_core::{Protocol, SimConfig};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Upper bound on slots per call so a page cannot hang the tab.
pub const MAX_DEMO_SLOTS: u64 = 5_000_000;
const CURVE_POINTS: u64 = 400;

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

/// Runs both protocols on the same parameters and returns completion
/// curves plus summary metrics.
pub fn compare_protocols(n: u32, m: u32, p: f64, slots: u64, seed: u64) -> Result<Value, String> {
    if slots == 0 || slots > MAX_DEMO_SLOTS {
        return Err(format!("slots must be in 1..={MAX_DEMO_SLOTS}"));
    }
    let mut out = serde_json::Map::new();
    for protocol in Protocol::ALL {
        let raw = repeater_core::model::RawConfig {
            protocol: Some(protocol),
            n_repeaters: Some(i64::from(n)),
            m_per_node: Some(i64::from(m)),
            p_success: Some(p),
            max_slots: Some(slots as i64),
            seed: Some(seed),
            ..Default::default()
        };
        let cfg: SimConfig = repeater_core::model::validate_config(&raw).map_err(|errs| {
            errs.iter()
                .map(|e| format!("{}: {}", e.field, e.message))
                .collect::<Vec<_>>()
                .join("; ")
        })?;
        let run = engine::run(&cfg, 0).map_err(|e| e.to_string())?;
        let summary = MetricsSummary::from_run(&run, metrics::DEFAULT_BURN_IN_FRACTION);
        let step = (slots / CURVE_POINTS).max(1);
        out.insert(
            protocol.to_string(),
            json!({
                "curve": run.completion_series(step),
                "latency": metrics::latency(&run).ok(),
                "throughput_per_slot": summary.throughput().map(|e| e.mean),
                "mean_transfer_slots": summary.transfer().map(|e| e.mean),
                "completed": run.completed_count(),
                "in_flight": run.in_flight_count(),
            }),
        );
    }
    Ok(Value::Object(out))
}

/// Empirical distribution of the successful emitter index for one segment,
/// next to the closed-form truncated geometric law.
pub fn segment_distribution(m: u32, p: f64, trials: u32, seed: u64) -> Result<Value, String> {
    let m = m as usize;
    if m == 0 || m > 64 {
        return Err("m must be in 1..=64".into());
    }
    let table = AttemptTable::new(m, p).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; m];
    let mut failures = 0u64;
    for _ in 0..trials {
        match table.outcome(m, rng.random::<f64>()) {
            AttemptOutcome::Success(k) => counts[k] += 1,
            AttemptOutcome::Failure => failures += 1,
        }
    }
    let n = f64::from(trials.max(1));
    let expected: Vec<f64> = (0..m).map(|k| (1.0 - p).powi(k as i32) * p).collect();
    Ok(json!({
        "success_probability": success_probability(m, p).map_err(|e| e.to_string())?,
        "empirical_success": (n - failures as f64) / n,
        "empirical": counts.iter().map(|&c| c as f64 / n).collect::<Vec<_>>(),
        "expected": expected,
    }))
}

/// Derived correction tables and the worst teleportation fidelity over
/// `payloads` random states.
pub fn oracle_summary(payloads: u32, seed: u64) -> Result<Value, String> {
    let err = |e: oracle::OracleError| e.to_string();
    let link = oracle::link_generation_check().map_err(err)?;
    let tele = oracle::derive_teleport_table().map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 1.0f64;
    for _ in 0..payloads {
        let (theta, phi) = oracle::random_bloch(&mut rng);
        let r = oracle::teleport_check_with(theta, phi, link.table, tele).map_err(err)?;
        worst = worst.min(r.min_fidelity());
    }
    let table = |t: oracle::CorrectionTable| -> Value {
        BellOutcome::ALL
            .iter()
            .map(|&o| (o.to_string(), Value::from(t.get(o).to_string())))
            .collect::<serde_json::Map<_, _>>()
            .into()
    };
    Ok(json!({
        "link_table": table(link.table),
        "teleport_table": table(tele),
        "link_branches": link.branches,
        "payloads": payloads,
        "min_teleport_fidelity": worst,
    }))
}

#[wasm_bindgen]
pub fn compare(n: u32, m: u32, p: f64, slots: u32, seed: u32) -> Result<String, JsValue> {
    to_js(compare_protocols(
        n,
        m,
        p,
        u64::from(slots),
        u64::from(seed),
    ))
}

#[wasm_bindgen]
pub fn segment(m: u32, p: f64, trials: u32, seed: u32) -> Result<String, JsValue> {
    to_js(segment_distribution(m, p, trials, u64::from(seed)))
}

#[wasm_bindgen]
pub fn teleport(payloads: u32, seed: u32) -> Result<String, JsValue> {
    to_js(oracle_summary(payloads, u64::from(seed)))
}

#[wasm_bindgen]
pub fn version() -> String {
    repeater_core::VERSION.to_string()
}
