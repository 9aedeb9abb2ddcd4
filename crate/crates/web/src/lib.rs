//! WebAssembly entry points for the browser demo. Every operation returns
//! JSON text; bad input surfaces as a thrown string.

use moesim::cache::PolicyKind;
use moesim::cost::{CostModel, HardwareProfile};
use moesim::engine::{run_trace, EnginePolicy, Scheduling};
use moesim::model::{ExpertRef, LayerRequest, ModelConfig, Trace};
use moesim::scheduler::{
    all_cpu_plan, all_gpu_plan, build_queues, oracle_optimal, select_plan, ORACLE_MAX_EXPERTS,
};
use moesim::tracegen::stats::{analyze_trace, neuron_reference};
use moesim::tracegen::{generate_trace, GenParams};
use serde_json::{json, Value};
use std::collections::BTreeSet;
use wasm_bindgen::prelude::*;

/// Longest trace the page may request; keeps the tab responsive.
pub const MAX_DECODE_STEPS: usize = 400;

pub const CURVE_RATIOS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("bad {what} '{s}'")))
        .collect()
}

/// Plans one layer. `loads` lists tokens per activated expert, `cached` the
/// positions in that list already on the GPU. Times are in milliseconds.
pub fn schedule_layer_value(
    loads: &str,
    cached: &str,
    cpu_slope: f64,
    transfer: f64,
    gpu_time: f64,
) -> Result<Value, String> {
    let loads: Vec<u32> = parse_list(loads, "load")?;
    if loads.is_empty() || loads.len() > 16 {
        return Err("give between 1 and 16 loads".into());
    }
    if loads.contains(&0) {
        return Err("loads must be positive".into());
    }
    let n = loads.len();
    let mut resident = BTreeSet::new();
    for i in parse_list::<usize>(cached, "cached position")? {
        if i >= n {
            return Err(format!("cached position {i} is past the last expert"));
        }
        resident.insert(ExpertRef::new(0, i));
    }
    let profile = HardwareProfile {
        gpu_time_per_expert: gpu_time,
        gpu_saturation_load: moesim::cost::DEFAULT_GPU_SATURATION,
        gpu_slope: 0.0,
        cpu_slope,
        cpu_first_expert_penalty: moesim::cost::DEFAULT_CPU_PENALTY,
        transfer_bandwidth: 1.0,
        transfer_latency: transfer,
        shared_expert_time: 0.0,
        non_expert_time: 0.0,
    };
    profile.validate().map_err(|e| e.to_string())?;
    let cost = CostModel::new(profile, 0);

    let request = LayerRequest::new(0, loads, vec![1.0 / n as f64; n]);
    let plan = select_plan(&request, &resident, &cost);
    let queues = build_queues(&request, &resident);
    let optimum = (n <= ORACLE_MAX_EXPERTS)
        .then(|| oracle_optimal(&request, &resident, &cost).ok())
        .flatten();
    let placement: Vec<Value> = plan
        .assignment
        .iter()
        .map(|(e, p)| json!({ "expert": e.expert, "placement": p }))
        .collect();
    Ok(json!({
        "plan": { "events": plan.events, "makespan": plan.makespan, "placement": placement },
        "all_cpu": all_cpu_plan(&queues, &cost).makespan,
        "all_gpu": all_gpu_plan(&queues, &cost).makespan,
        "optimum": optimum,
    }))
}

fn demo_trace(model: &str, seed: u64, decode_steps: usize) -> Result<Trace, String> {
    if decode_steps == 0 || decode_steps > MAX_DECODE_STEPS {
        return Err(format!("decode steps must be in 1..={MAX_DECODE_STEPS}"));
    }
    let cfg = ModelConfig::preset(model).map_err(|e| e.to_string())?;
    generate_trace(&cfg, &GenParams::calibrated(&cfg, seed), 0, decode_steps)
        .map_err(|e| e.to_string())
}

/// Decode hit rate of each replacement policy across cache sizes, with
/// every miss loaded on demand so the policy is the only variable.
pub fn cache_curve_value(model: &str, seed: u64, decode_steps: usize) -> Result<Value, String> {
    let trace = demo_trace(model, seed, decode_steps)?;
    let profile = HardwareProfile::reference_for(&trace.config);
    let mut curves = serde_json::Map::new();
    for kind in [PolicyKind::Mrs, PolicyKind::Lru, PolicyKind::Lfu] {
        let policy = EnginePolicy::new(kind.as_str(), Scheduling::GpuOndemand, kind);
        let rates = CURVE_RATIOS
            .iter()
            .map(|&ratio| {
                run_trace(&trace, &policy, ratio, &profile, seed)
                    .map(|m| m.decode_cache_stats.hit_rate().unwrap_or(0.0))
                    .map_err(|e| e.to_string())
            })
            .collect::<Result<Vec<f64>, String>>()?;
        curves.insert(kind.as_str().to_string(), json!(rates));
    }
    Ok(json!({ "ratios": CURVE_RATIOS, "hit_rate": curves }))
}

/// Activation CDF (with the neuron-level reference) and reuse by score
/// decile of a generated trace.
pub fn trace_stats_value(model: &str, seed: u64, decode_steps: usize) -> Result<Value, String> {
    let stats = analyze_trace(&demo_trace(model, seed, decode_steps.max(2))?);
    let reference: Vec<(f64, f64)> = stats
        .activation_cdf
        .iter()
        .map(|&(x, _)| (x, neuron_reference(x)))
        .collect();
    Ok(json!({
        "activation_cdf": stats.activation_cdf,
        "reference_cdf": reference,
        "flatter_than_reference": stats.flatter_than_reference(),
        "reuse_by_decile": stats.reuse_by_decile,
    }))
}

fn to_js(result: Result<Value, String>) -> Result<String, JsValue> {
    result
        .map(|v| v.to_string())
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn schedule_layer(
    loads: &str,
    cached: &str,
    cpu_slope: f64,
    transfer: f64,
    gpu_time: f64,
) -> Result<String, JsValue> {
    to_js(schedule_layer_value(
        loads, cached, cpu_slope, transfer, gpu_time,
    ))
}

#[wasm_bindgen]
pub fn cache_curve(model: &str, seed: u32, decode_steps: u32) -> Result<String, JsValue> {
    to_js(cache_curve_value(model, seed as u64, decode_steps as usize))
}

#[wasm_bindgen]
pub fn trace_stats(model: &str, seed: u32, decode_steps: u32) -> Result<String, JsValue> {
    to_js(trace_stats_value(model, seed as u64, decode_steps as usize))
}
