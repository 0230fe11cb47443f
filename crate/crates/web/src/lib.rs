//! Browser bindings for three small interactive views: the layer offload
//! planner, prototype-grouped MoE routing and the cosine learning-rate
//! schedule. The plain functions are usable (and tested) natively; the
//! `#[wasm_bindgen]` wrappers only convert errors for JavaScript.

use p2r::moe::{dispatch, MoeConfig};
use p2r::offload::{plan_offload, simulate_step, ByteProfile, CostModel, MovementCoefficients, Phase};
use p2r::optim::CosineSchedule;
use p2r::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const MB: f64 = 1e6;

#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct PlanView {
    slow: Vec<u32>,
    phase_mb: Vec<f64>,
    step_time_s: f64,
    resident_mb: f64,
    total_mb: f64,
}

#[wasm_bindgen]
impl PlanView {
    /// Indices of layers placed in the slow tier.
    #[wasm_bindgen(getter)]
    pub fn slow(&self) -> Vec<u32> {
        self.slow.clone()
    }

    /// Bytes moved per step (MB) in forward-load, backward-load,
    /// grad-offload and apply-writeback order.
    #[wasm_bindgen(getter)]
    pub fn phase_mb(&self) -> Vec<f64> {
        self.phase_mb.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn step_time_s(&self) -> f64 {
        self.step_time_s
    }

    #[wasm_bindgen(getter)]
    pub fn resident_mb(&self) -> f64 {
        self.resident_mb
    }

    /// Fast-tier residency if nothing were offloaded.
    #[wasm_bindgen(getter)]
    pub fn total_mb(&self) -> f64 {
        self.total_mb
    }
}

/// Plans `layer_mb` (parameter MB per layer) under `budget_mb` of fast
/// memory over a link of `bandwidth_mbs`, with `compute_s` of compute per
/// layer per step.
pub fn plan(layer_mb: &[f64], budget_mb: f64, bandwidth_mbs: f64, compute_s: f64) -> Result<PlanView, String> {
    if layer_mb.is_empty() || layer_mb.iter().any(|&m| !(m > 0.0)) {
        return Err("layer sizes must be positive".into());
    }
    if !(bandwidth_mbs > 0.0) || !(budget_mb >= 0.0) || !(compute_s >= 0.0) {
        return Err("budget, bandwidth and compute must be non-negative".into());
    }
    let profile = ByteProfile::from_sizes(layer_mb.iter().map(|m| (m * MB) as u64).collect());
    let cost = CostModel {
        bandwidth: bandwidth_mbs * MB,
        forward_s_per_layer: compute_s / 3.0,
        backward_s_per_layer: 2.0 * compute_s / 3.0,
        apply_s_per_layer: 0.0,
        latency_s: 0.0,
    };
    let coeffs = MovementCoefficients::default();
    let p = plan_offload(&profile, (budget_mb * MB) as u64, &cost, &coeffs).map_err(|e| e.to_string())?;
    let report = simulate_step(&profile, &p.placement, &coeffs).map_err(|e| e.to_string())?;
    Ok(PlanView {
        slow: p.slow_layers().into_iter().map(|i| i as u32).collect(),
        phase_mb: Phase::ALL.iter().map(|&ph| report.phase(ph) as f64 / MB).collect(),
        step_time_s: p.step_time_s,
        resident_mb: p.resident_bytes as f64 / MB,
        total_mb: profile.total_residency() as f64 / MB,
    })
}

#[wasm_bindgen(js_name = plan)]
pub fn plan_js(layer_mb: Vec<f64>, budget_mb: f64, bandwidth_mbs: f64, compute_s: f64) -> Result<PlanView, JsError> {
    plan(&layer_mb, budget_mb, bandwidth_mbs, compute_s).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingView {
    load: Vec<u32>,
    capacity: u32,
    dropped: u32,
    selections: u32,
    max_weight_error: f64,
}

#[wasm_bindgen]
impl RoutingView {
    /// Tokens kept by each expert after the capacity limit.
    #[wasm_bindgen(getter)]
    pub fn load(&self) -> Vec<u32> {
        self.load.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    #[wasm_bindgen(getter)]
    pub fn dropped(&self) -> u32 {
        self.dropped
    }

    /// Expert selections before capacity, `tokens · n_prototypes`.
    #[wasm_bindgen(getter)]
    pub fn selections(&self) -> u32 {
        self.selections
    }

    /// Largest deviation of a token's combine weights from summing to one.
    #[wasm_bindgen(getter)]
    pub fn max_weight_error(&self) -> f64 {
        self.max_weight_error
    }
}

/// Routes `tokens` random gate vectors through `n_experts` experts split
/// into `n_prototypes` groups.
pub fn route(tokens: usize, n_experts: usize, n_prototypes: usize, capacity_factor: f32, seed: u64) -> Result<RoutingView, String> {
    let moe = MoeConfig {
        n_experts,
        n_prototypes,
        n_shards: 1,
        capacity_factor,
    };
    moe.validate().map_err(|e| e.to_string())?;
    if tokens == 0 {
        return Err("need at least one token".into());
    }
    let logits = Tensor::randn(&[tokens, n_experts], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let r = dispatch(&logits, &moe).map_err(|e| e.to_string())?;
    let mut max_err = 0.0f64;
    for sel in &r.selections {
        if sel.iter().any(|s| !s.dropped) {
            let w: f64 = sel.iter().map(|s| s.weight as f64).sum();
            max_err = max_err.max((w - 1.0).abs());
        }
    }
    Ok(RoutingView {
        load: r.load.iter().map(|&l| l as u32).collect(),
        capacity: r.capacity as u32,
        dropped: r.dropped() as u32,
        selections: r.selections.iter().map(Vec::len).sum::<usize>() as u32,
        max_weight_error: max_err,
    })
}

#[wasm_bindgen(js_name = route)]
pub fn route_js(tokens: usize, n_experts: usize, n_prototypes: usize, capacity_factor: f32, seed: u64) -> Result<RoutingView, JsError> {
    route(tokens, n_experts, n_prototypes, capacity_factor, seed).map_err(|e| JsError::new(&e))
}

/// Learning rate at every step `0..total_steps`.
#[wasm_bindgen]
pub fn lr_curve(peak_lr: f32, warmup_ratio: f64, total_steps: u32, min_lr_ratio: f32) -> Vec<f32> {
    let s = CosineSchedule {
        peak_lr,
        warmup_ratio,
        total_steps: total_steps as u64,
        min_lr_ratio,
    };
    (0..total_steps as u64).map(|t| s.lr(t)).collect()
}
