//! Two-tier parameter placement: a byte-budgeted fast tier and an unbounded
//! slow tier. SLOW layers are staged through the fast tier once per phase,
//! moving `4·W` bytes per step for `W` bytes of offloaded parameters:
//! a forward load, a backward load (activations are recomputed), a gradient
//! offload and a write-back of the updated parameters.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{count_params, Model, ModelConfig};
use crate::optim::AdamW;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tier {
    Fast,
    Slow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    ForwardLoad,
    BackwardLoad,
    GradOffload,
    ApplyWriteback,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::ForwardLoad,
        Phase::BackwardLoad,
        Phase::GradOffload,
        Phase::ApplyWriteback,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Phase::ForwardLoad => "fn_load",
            Phase::BackwardLoad => "bn_load",
            Phase::GradOffload => "grad_offload",
            Phase::ApplyWriteback => "apply_writeback",
        }
    }
}

/// Multiples of a layer's parameter bytes moved in each phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MovementCoefficients {
    pub forward_load: u64,
    pub backward_load: u64,
    pub grad_offload: u64,
    pub apply_writeback: u64,
}

impl Default for MovementCoefficients {
    fn default() -> Self {
        Self {
            forward_load: 1,
            backward_load: 1,
            grad_offload: 1,
            apply_writeback: 1,
        }
    }
}

impl MovementCoefficients {
    pub fn get(&self, phase: Phase) -> u64 {
        match phase {
            Phase::ForwardLoad => self.forward_load,
            Phase::BackwardLoad => self.backward_load,
            Phase::GradOffload => self.grad_offload,
            Phase::ApplyWriteback => self.apply_writeback,
        }
    }

    pub fn total(&self) -> u64 {
        Phase::ALL.iter().map(|&p| self.get(p)).sum()
    }

    pub fn transfers(&self) -> u64 {
        Phase::ALL.iter().filter(|&&p| self.get(p) > 0).count() as u64
    }
}

/// Per parameter-layer byte sizes plus the graph-position → parameter-layer map.
#[derive(Debug, Clone, PartialEq)]
pub struct ByteProfile {
    pub layer_param_bytes: Vec<u64>,
    pub graph_to_param: Vec<usize>,
    /// Optimizer moments per parameter (2 for AdamW).
    pub moments: u64,
}

impl ByteProfile {
    pub fn uniform(layers: usize, param_bytes: u64) -> Self {
        Self {
            layer_param_bytes: vec![param_bytes; layers],
            graph_to_param: (0..layers).collect(),
            moments: 2,
        }
    }

    pub fn from_sizes(sizes: Vec<u64>) -> Self {
        let n = sizes.len();
        Self {
            layer_param_bytes: sizes,
            graph_to_param: (0..n).collect(),
            moments: 2,
        }
    }

    pub fn from_config(config: &ModelConfig) -> Self {
        let per = count_params(config).per_layer_params * 4;
        Self {
            layer_param_bytes: vec![per; config.n_layers_params],
            graph_to_param: (0..config.n_layers_graph)
                .map(|i| config.param_index(i))
                .collect(),
            moments: 2,
        }
    }

    pub fn from_model(model: &Model) -> Self {
        Self {
            layer_param_bytes: model.layers.iter().map(|l| l.bytes()).collect(),
            graph_to_param: (0..model.config.n_layers_graph)
                .map(|i| model.config.param_index(i))
                .collect(),
            moments: 2,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layer_param_bytes.len()
    }

    /// Parameter + gradient + optimizer bytes of a FAST layer.
    pub fn residency(&self, layer: usize) -> u64 {
        self.layer_param_bytes[layer] * (2 + self.moments)
    }

    pub fn total_residency(&self) -> u64 {
        (0..self.n_layers()).map(|i| self.residency(i)).sum()
    }

    /// Fast-tier bytes a SLOW layer occupies while staged (parameters and
    /// the gradient being produced).
    pub fn staging(&self, layer: usize) -> u64 {
        2 * self.layer_param_bytes[layer]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    /// Slow↔fast link bandwidth, bytes/s.
    pub bandwidth: f64,
    pub forward_s_per_layer: f64,
    /// Backward including recomputation.
    pub backward_s_per_layer: f64,
    pub apply_s_per_layer: f64,
    pub latency_s: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.bandwidth,
            self.forward_s_per_layer,
            self.backward_s_per_layer,
            self.apply_s_per_layer,
            self.latency_s,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) || self.bandwidth <= 0.0 {
            return Err(Error::Config(format!("invalid cost model {self:?}")));
        }
        Ok(())
    }

    pub fn compute_time(&self, profile: &ByteProfile) -> f64 {
        profile.graph_to_param.len() as f64 * (self.forward_s_per_layer + self.backward_s_per_layer)
            + profile.n_layers() as f64 * self.apply_s_per_layer
    }

    /// Solves for the bandwidth that makes `placement` take `observed_s`,
    /// holding compute and latency fixed.
    pub fn fit_bandwidth(
        mut self,
        profile: &ByteProfile,
        placement: &[Tier],
        coefficients: &MovementCoefficients,
        observed_s: f64,
    ) -> Result<Self> {
        let report = simulate_step(profile, placement, coefficients)?;
        let fixed = self.compute_time(profile) + report.transfers as f64 * self.latency_s;
        let movement_s = observed_s - fixed;
        if report.total() == 0 || movement_s <= 0.0 {
            return Err(Error::Config(format!(
                "cannot fit bandwidth: {} bytes moved, {movement_s:.3}s left for movement",
                report.total()
            )));
        }
        self.bandwidth = report.total() as f64 / movement_s;
        Ok(self)
    }
}

/// Byte counts for one training step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MovementReport {
    pub by_phase: BTreeMap<Phase, u64>,
    pub per_layer: Vec<u64>,
    pub transfers: u64,
    pub peak_resident: u64,
    pub peak_staged: u64,
}

impl MovementReport {
    pub fn total(&self) -> u64 {
        self.by_phase.values().sum()
    }

    pub fn phase(&self, p: Phase) -> u64 {
        self.by_phase.get(&p).copied().unwrap_or(0)
    }
}

/// Fast-tier accounting for one run. Training code calls the phase hooks in
/// execution order; the store counts movement and tracks occupancy.
#[derive(Debug, Clone)]
pub struct TieredStore {
    profile: ByteProfile,
    placement: Vec<Tier>,
    coefficients: MovementCoefficients,
    budget: u64,
    staging_capacity: u64,
    resident: u64,
    staged: BTreeMap<usize, u64>,
    phase: Option<Phase>,
    report: MovementReport,
}

impl TieredStore {
    pub fn new(
        profile: ByteProfile,
        placement: Vec<Tier>,
        budget: u64,
        coefficients: MovementCoefficients,
    ) -> Result<Self> {
        if placement.len() != profile.n_layers() {
            return Err(Error::Config(format!(
                "placement covers {} of {} layers",
                placement.len(),
                profile.n_layers()
            )));
        }
        let resident: u64 = (0..profile.n_layers())
            .filter(|&i| placement[i] == Tier::Fast)
            .map(|i| profile.residency(i))
            .sum();
        if resident > budget {
            return Err(Error::Capacity(format!(
                "resident layers need {resident} bytes, budget is {budget}"
            )));
        }
        let staging_capacity = (0..profile.n_layers())
            .filter(|&i| placement[i] == Tier::Slow)
            .map(|i| profile.staging(i))
            .max()
            .unwrap_or(0);
        let n = profile.n_layers();
        Ok(Self {
            profile,
            placement,
            coefficients,
            budget,
            staging_capacity,
            resident,
            staged: BTreeMap::new(),
            phase: None,
            report: MovementReport {
                per_layer: vec![0; n],
                ..Default::default()
            },
        })
    }

    /// Everything resident, nothing moves.
    pub fn all_fast(profile: ByteProfile) -> Self {
        let n = profile.n_layers();
        let budget = profile.total_residency();
        Self::new(profile, vec![Tier::Fast; n], budget, MovementCoefficients::default())
            .expect("full budget always fits")
    }

    pub fn placement(&self) -> &[Tier] {
        &self.placement
    }

    pub fn profile(&self) -> &ByteProfile {
        &self.profile
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn staging_capacity(&self) -> u64 {
        self.staging_capacity
    }

    pub fn occupancy(&self) -> (u64, u64) {
        (self.resident, self.staged.values().sum())
    }

    pub fn any_slow(&self) -> bool {
        self.placement.contains(&Tier::Slow)
    }

    pub fn begin_step(&mut self) {
        let n = self.profile.n_layers();
        self.report = MovementReport {
            per_layer: vec![0; n],
            peak_resident: self.resident,
            ..Default::default()
        };
        self.staged.clear();
        self.phase = None;
    }

    fn count(&mut self, layer: usize, phase: Phase) {
        let bytes = self.coefficients.get(phase) * self.profile.layer_param_bytes[layer];
        if bytes > 0 {
            *self.report.by_phase.entry(phase).or_insert(0) += bytes;
            self.report.per_layer[layer] += bytes;
            self.report.transfers += 1;
        }
    }

    fn stage(&mut self, layer: usize, bytes: u64) -> Result<()> {
        self.staged.insert(layer, bytes);
        let staged: u64 = self.staged.values().sum();
        if staged > self.staging_capacity || self.resident > self.budget {
            return Err(Error::Capacity(format!(
                "staging {staged} bytes exceeds capacity {}",
                self.staging_capacity
            )));
        }
        self.report.peak_staged = self.report.peak_staged.max(staged);
        self.report.peak_resident = self.report.peak_resident.max(self.resident);
        Ok(())
    }

    fn last_use(&self, graph_layer: usize, descending: bool) -> bool {
        let p = self.profile.graph_to_param[graph_layer];
        let g = &self.profile.graph_to_param;
        if descending {
            !g[..graph_layer].contains(&p)
        } else {
            !g[graph_layer + 1..].contains(&p)
        }
    }

    /// Forward use of graph layer `i`: a SLOW parameter layer is loaded on
    /// first use in the phase and released after its last.
    pub fn forward_use(&mut self, graph_layer: usize) -> Result<()> {
        if self.phase != Some(Phase::ForwardLoad) {
            self.staged.clear();
            self.phase = Some(Phase::ForwardLoad);
        }
        let p = self.profile.graph_to_param[graph_layer];
        if self.placement[p] == Tier::Slow {
            if !self.staged.contains_key(&p) {
                self.count(p, Phase::ForwardLoad);
                let bytes = self.profile.layer_param_bytes[p];
                self.stage(p, bytes)?;
            }
            if self.last_use(graph_layer, false) {
                self.staged.remove(&p);
            }
        }
        Ok(())
    }

    /// Backward use (graph layers visited in descending order): reload the
    /// parameters for recomputation, hold a gradient buffer, and offload the
    /// gradient after the last use.
    pub fn backward_use(&mut self, graph_layer: usize) -> Result<()> {
        if self.phase != Some(Phase::BackwardLoad) {
            self.staged.clear();
            self.phase = Some(Phase::BackwardLoad);
        }
        let p = self.profile.graph_to_param[graph_layer];
        if self.placement[p] == Tier::Slow {
            if !self.staged.contains_key(&p) {
                self.count(p, Phase::BackwardLoad);
                let bytes = self.profile.staging(p);
                self.stage(p, bytes)?;
            }
            if self.last_use(graph_layer, true) {
                self.count(p, Phase::GradOffload);
                self.staged.remove(&p);
            }
        }
        Ok(())
    }

    /// Optimizer apply for parameter layer `p`. SLOW layers update on the
    /// slow tier next to their moments and write the parameters back.
    pub fn apply(&mut self, param_layer: usize) {
        self.phase = None;
        self.staged.clear();
        if self.placement[param_layer] == Tier::Slow {
            self.count(param_layer, Phase::ApplyWriteback);
        }
    }

    pub fn report(&self) -> &MovementReport {
        &self.report
    }

    /// Simulated seconds spent moving this step's bytes.
    pub fn movement_time(&self, cost: &CostModel) -> f64 {
        self.report.total() as f64 / cost.bandwidth + self.report.transfers as f64 * cost.latency_s
    }
}

/// Runs the phase hooks of one forward/backward/apply step without compute.
pub fn simulate_step(
    profile: &ByteProfile,
    placement: &[Tier],
    coefficients: &MovementCoefficients,
) -> Result<MovementReport> {
    let budget = (0..profile.n_layers())
        .filter(|&i| placement.get(i) == Some(&Tier::Fast))
        .map(|i| profile.residency(i))
        .sum();
    let mut store = TieredStore::new(profile.clone(), placement.to_vec(), budget, *coefficients)?;
    run_step_hooks(&mut store)?;
    Ok(store.report().clone())
}

fn run_step_hooks(store: &mut TieredStore) -> Result<()> {
    store.begin_step();
    let graph = store.profile.graph_to_param.len();
    for i in 0..graph {
        store.forward_use(i)?;
    }
    for i in (0..graph).rev() {
        store.backward_use(i)?;
    }
    for p in 0..store.profile.n_layers() {
        store.apply(p);
    }
    Ok(())
}

/// One training step's movement for the store's placement.
pub fn account_step(store: &mut TieredStore) -> Result<MovementReport> {
    run_step_hooks(store)?;
    Ok(store.report().clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffloadPlan {
    pub placement: Vec<Tier>,
    pub movement_bytes: u64,
    pub step_time_s: f64,
    pub resident_bytes: u64,
}

impl OffloadPlan {
    pub fn slow_layers(&self) -> Vec<usize> {
        (0..self.placement.len())
            .filter(|&i| self.placement[i] == Tier::Slow)
            .collect()
    }
}

pub fn predict_step_time(
    profile: &ByteProfile,
    placement: &[Tier],
    cost: &CostModel,
    coefficients: &MovementCoefficients,
) -> Result<f64> {
    cost.validate()?;
    let report = simulate_step(profile, placement, coefficients)?;
    Ok(cost.compute_time(profile)
        + report.total() as f64 / cost.bandwidth
        + report.transfers as f64 * cost.latency_s)
}

fn evaluate(
    profile: &ByteProfile,
    placement: Vec<Tier>,
    cost: &CostModel,
    coefficients: &MovementCoefficients,
) -> Result<OffloadPlan> {
    let report = simulate_step(profile, &placement, coefficients)?;
    let resident = (0..profile.n_layers())
        .filter(|&i| placement[i] == Tier::Fast)
        .map(|i| profile.residency(i))
        .sum();
    let step_time_s = cost.compute_time(profile)
        + report.total() as f64 / cost.bandwidth
        + report.transfers as f64 * cost.latency_s;
    Ok(OffloadPlan {
        placement,
        movement_bytes: report.total(),
        step_time_s,
        resident_bytes: resident,
    })
}

/// Strict preference between two feasible plans: lower predicted time, then
/// (on a tie) the plan whose offloaded index set is lexicographically
/// smallest, i.e. offloads the lowest-indexed layers first.
pub fn plan_precedes(a: &OffloadPlan, b: &OffloadPlan) -> bool {
    let scale = a.step_time_s.abs().max(b.step_time_s.abs()).max(1e-300);
    if (a.step_time_s - b.step_time_s).abs() > 1e-12 * scale {
        return a.step_time_s < b.step_time_s;
    }
    a.slow_layers() < b.slow_layers()
}

const MAX_ENUMERATION: u128 = 1 << 24;

/// Feasible placement minimizing predicted step time under `budget` bytes of
/// fast-tier residency.
///
/// Layers of equal size are interchangeable, so the search enumerates how
/// many of each size class stay FAST (the highest-indexed members of the
/// class, so offloading favours low indices). This is exact and cheap for
/// the usual handful of distinct layer sizes.
pub fn plan_offload(
    profile: &ByteProfile,
    budget: u64,
    cost: &CostModel,
    coefficients: &MovementCoefficients,
) -> Result<OffloadPlan> {
    cost.validate()?;
    let n = profile.n_layers();
    if n == 0 {
        return evaluate(profile, Vec::new(), cost, coefficients);
    }
    let largest = (0..n).map(|i| profile.residency(i)).max().unwrap_or(0);
    if budget < largest {
        return Err(Error::Capacity(format!(
            "budget {budget} is below the largest layer residency {largest}"
        )));
    }
    let mut classes: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        classes.entry(profile.layer_param_bytes[i]).or_default().push(i);
    }
    let classes: Vec<(u64, Vec<usize>)> = classes.into_iter().collect();
    let space: u128 = classes
        .iter()
        .map(|(_, m)| m.len() as u128 + 1)
        .try_fold(1u128, |acc, c| acc.checked_mul(c))
        .unwrap_or(u128::MAX);
    if space > MAX_ENUMERATION {
        return Err(Error::Capacity(format!(
            "{} distinct layer sizes exceed the exact planner's search limit",
            classes.len()
        )));
    }
    let mut best: Option<OffloadPlan> = None;
    let mut counts = vec![0usize; classes.len()];
    loop {
        let resident: u64 = classes
            .iter()
            .zip(&counts)
            .map(|((bytes, _), &c)| c as u64 * bytes * (2 + profile.moments))
            .sum();
        if resident <= budget {
            let mut placement = vec![Tier::Slow; n];
            for ((_, members), &c) in classes.iter().zip(&counts) {
                for &i in members.iter().rev().take(c) {
                    placement[i] = Tier::Fast;
                }
            }
            let plan = evaluate(profile, placement, cost, coefficients)?;
            if best.as_ref().map_or(true, |b| plan_precedes(&plan, b)) {
                best = Some(plan);
            }
        }
        // Odometer increment over per-class FAST counts.
        let mut k = 0;
        while k < counts.len() {
            counts[k] += 1;
            if counts[k] <= classes[k].1.len() {
                break;
            }
            counts[k] = 0;
            k += 1;
        }
        if k == counts.len() {
            break;
        }
    }
    best.ok_or_else(|| Error::Capacity("no feasible placement".into()))
}

/// Byte accounting over allocated buffers, split into the non-embedding
/// (per-layer) part and the embedding part.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryReport {
    pub param_bytes: u64,
    pub grad_bytes: u64,
    pub optstate_bytes: u64,
    pub embedding_param_bytes: u64,
    pub embedding_optstate_bytes: u64,
    pub layer_bytes: u64,
}

/// Gradient buffers are counted at their peak: a shared stack needs the
/// accumulator plus the gradient of the layer being differentiated; an
/// unshared stack one buffer per layer.
pub fn measure_memory(model: &Model, optimizer: Option<&AdamW>) -> MemoryReport {
    let param_bytes: u64 = model.layers.iter().map(|l| l.bytes()).sum();
    let layer_bytes = model.layers.first().map_or(0, |l| l.bytes());
    let grad_buffers = if model.is_shared() {
        model.config.n_layers_graph.min(2) as u64
    } else {
        model.layers.len() as u64
    };
    let (optstate_bytes, embedding_optstate_bytes) = match optimizer {
        Some(o) => (
            o.m.layers.iter().chain(&o.v.layers).map(|l| l.bytes()).sum(),
            o.m.embed.bytes() + o.v.embed.bytes(),
        ),
        None => (2 * param_bytes, 2 * model.embed.bytes()),
    };
    MemoryReport {
        param_bytes,
        grad_bytes: grad_buffers * layer_bytes,
        optstate_bytes,
        embedding_param_bytes: model.embed.bytes(),
        embedding_optstate_bytes,
        layer_bytes,
    }
}

/// `key=value` plan report.
pub fn format_plan_report(
    plan: &OffloadPlan,
    profile: &ByteProfile,
    budget: u64,
    coefficients: &MovementCoefficients,
    measured_step_s: Option<f64>,
) -> Result<String> {
    let report = simulate_step(profile, &plan.placement, coefficients)?;
    let mut s = String::new();
    let _ = writeln!(s, "budget_bytes={budget}");
    let _ = writeln!(s, "layers={}", plan.placement.len());
    let _ = writeln!(s, "offloaded_layers={}", plan.slow_layers().len());
    for (i, t) in plan.placement.iter().enumerate() {
        let tier = match t {
            Tier::Fast => "FAST",
            Tier::Slow => "SLOW",
        };
        let _ = writeln!(s, "layer.{i}.tier={tier}");
        let _ = writeln!(s, "layer.{i}.param_bytes={}", profile.layer_param_bytes[i]);
    }
    for p in Phase::ALL {
        let _ = writeln!(s, "bytes.{}={}", p.key(), report.phase(p));
    }
    let _ = writeln!(s, "bytes.total={}", report.total());
    let _ = writeln!(s, "resident_bytes={}", plan.resident_bytes);
    let _ = writeln!(s, "predicted_step_s={}", plan.step_time_s);
    match measured_step_s {
        Some(m) => {
            let _ = writeln!(s, "measured_step_s={m}");
        }
        None => {
            let _ = writeln!(s, "measured_step_s=NA");
        }
    }
    Ok(s)
}

/// Layer-size table for capacity diagnostics.
pub fn layer_size_table(profile: &ByteProfile) -> String {
    let mut s = String::from("layer\tparam_bytes\tresident_bytes\n");
    for i in 0..profile.n_layers() {
        let _ = writeln!(
            s,
            "{i}\t{}\t{}",
            profile.layer_param_bytes[i],
            profile.residency(i)
        );
    }
    s
}
