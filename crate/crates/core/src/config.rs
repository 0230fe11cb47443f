//! Run configuration: flat `key=value` text with dotted section prefixes.
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected so typos cannot silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::controller::{RunSettings, StageSettings, SwitchPolicy};
use crate::data::{DenoiseParams, TaskSchedule};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::moe::MoeConfig;
use crate::offload::{CostModel, MovementCoefficients};
use crate::optim::AdamWConfig;
use crate::train::VirtualClock;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Pseudo training with detector-driven switching.
    Auto,
    PseudoOnly,
    RealOnly,
    /// Like `Auto`, additionally honoring a forced switch time.
    P2r,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Auto => "AUTO",
            RunMode::PseudoOnly => "PSEUDO_ONLY",
            RunMode::RealOnly => "REAL_ONLY",
            RunMode::P2r => "P2R",
        }
    }
}

impl FromStr for RunMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "AUTO" => Ok(RunMode::Auto),
            "PSEUDO_ONLY" => Ok(RunMode::PseudoOnly),
            "REAL_ONLY" => Ok(RunMode::RealOnly),
            "P2R" => Ok(RunMode::P2r),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: RunMode,
    /// Graph-depth model; the sharing mode follows from `mode`.
    pub model: ModelConfig,
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
    pub vocab_path: Option<PathBuf>,
    pub holdout_fraction: f64,
    pub eval_batches: usize,
    pub eval_batch_size: usize,
    pub schedule: TaskSchedule,
    pub denoise: DenoiseParams,
    pub micro_batch: usize,
    pub accumulation: usize,
    pub total_batch: usize,
    pub replicas: usize,
    pub real_micro_batch: usize,
    pub real_accumulation: usize,
    pub pseudo_lr: f32,
    pub real_lr: f32,
    pub warmup_ratio: f64,
    pub min_lr_ratio: f32,
    pub adam: AdamWConfig,
    pub copy_moments_on_delink: bool,
    pub switch: SwitchPolicy,
    pub force_switch_s: Option<f64>,
    /// Stop after this many updates (0 = no limit).
    pub max_steps: u64,
    /// Stop once simulated wall time reaches this (0 = no limit).
    pub budget_s: f64,
    /// Cosine horizons in updates; 0 derives them from the stop condition.
    pub pseudo_steps: u64,
    pub real_steps: u64,
    pub log_interval: u64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    pub offload_budget: Option<u64>,
    pub link: CostModel,
    pub coefficients: MovementCoefficients,
    pub device_flops: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: RunMode::P2r,
            model: ModelConfig::desk(),
            train_path: None,
            eval_path: None,
            vocab_path: None,
            holdout_fraction: 0.01,
            eval_batches: 4,
            eval_batch_size: 8,
            schedule: TaskSchedule::default(),
            denoise: DenoiseParams::default(),
            micro_batch: 32,
            accumulation: 4,
            total_batch: 128,
            replicas: 1,
            real_micro_batch: 32,
            real_accumulation: 4,
            pseudo_lr: 2e-4,
            real_lr: 8e-5,
            warmup_ratio: 0.001,
            min_lr_ratio: 0.1,
            adam: AdamWConfig::default(),
            copy_moments_on_delink: true,
            switch: SwitchPolicy::default(),
            force_switch_s: None,
            max_steps: 0,
            budget_s: 0.0,
            pseudo_steps: 0,
            real_steps: 0,
            log_interval: 10,
            eval_interval: 50,
            checkpoint_interval: 100,
            offload_budget: None,
            link: CostModel {
                bandwidth: 25e6,
                forward_s_per_layer: 0.0,
                backward_s_per_layer: 0.0,
                apply_s_per_layer: 0.0,
                latency_s: 1e-4,
            },
            coefficients: MovementCoefficients::default(),
            device_flops: 6.5e9,
        }
    }
}

fn moe_mut(moe: &mut Option<MoeConfig>) -> &mut MoeConfig {
    moe.get_or_insert(MoeConfig {
        n_experts: 8,
        n_prototypes: 2,
        n_shards: 4,
        capacity_factor: 1.25,
    })
}

fn parse_value<T: FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
    v.parse().map_err(|_| {
        Error::Config(format!("line {line}: cannot parse {key}={v:?}"))
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut moe = c.model.moe.clone();
        let mut dense = false;
        let mut real_micro = None;
        let mut real_accum = None;
        let mut total = None;
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), line).is_some() {
                return Err(Error::Config(format!("line {line}: duplicate key {k}")));
            }
            macro_rules! set {
                ($field:expr) => {
                    $field = parse_value(k, v, line)?
                };
            }
            match k {
                "seed" => set!(c.seed),
                "mode" => c.mode = v.parse()?,
                "model.d_model" => set!(c.model.d_model),
                "model.d_ff" => set!(c.model.d_ff),
                "model.n_layers" => set!(c.model.n_layers_graph),
                "model.n_heads" => set!(c.model.n_heads),
                "model.vocab_size" => set!(c.model.vocab_size),
                "model.seq_len" => set!(c.model.seq_len),
                "model.moe" => {
                    dense = match v {
                        "on" => false,
                        "off" => true,
                        _ => return Err(Error::Config(format!("line {line}: model.moe is on|off"))),
                    }
                }
                "model.moe.n_experts" => set!(moe_mut(&mut moe).n_experts),
                "model.moe.n_prototypes" => set!(moe_mut(&mut moe).n_prototypes),
                "model.moe.n_shards" => set!(moe_mut(&mut moe).n_shards),
                "model.moe.capacity_factor" => set!(moe_mut(&mut moe).capacity_factor),
                "data.train" => c.train_path = Some(PathBuf::from(v)),
                "data.eval" => c.eval_path = Some(PathBuf::from(v)),
                "data.vocab" => c.vocab_path = Some(PathBuf::from(v)),
                "data.holdout_fraction" => set!(c.holdout_fraction),
                "data.eval_batches" => set!(c.eval_batches),
                "data.eval_batch_size" => set!(c.eval_batch_size),
                "data.lm_ratio" => set!(c.schedule.lm),
                "data.denoise_ratio" => set!(c.schedule.denoise),
                "data.corrupt_ratio" => set!(c.denoise.corrupt_ratio),
                "data.mean_span" => set!(c.denoise.mean_span),
                "batch.micro" => set!(c.micro_batch),
                "batch.accumulation" => set!(c.accumulation),
                "batch.total" => total = Some(parse_value(k, v, line)?),
                "batch.replicas" => set!(c.replicas),
                "batch.real_micro" => real_micro = Some(parse_value(k, v, line)?),
                "batch.real_accumulation" => real_accum = Some(parse_value(k, v, line)?),
                "optim.pseudo_lr" => set!(c.pseudo_lr),
                "optim.real_lr" => set!(c.real_lr),
                "optim.warmup_ratio" => set!(c.warmup_ratio),
                "optim.schedule" => {
                    if v != "cosine" {
                        return Err(Error::Config(format!(
                            "line {line}: only the cosine schedule is supported"
                        )));
                    }
                }
                "optim.min_lr_ratio" => set!(c.min_lr_ratio),
                "optim.beta1" => set!(c.adam.beta1),
                "optim.beta2" => set!(c.adam.beta2),
                "optim.eps" => set!(c.adam.eps),
                "optim.weight_decay" => set!(c.adam.weight_decay),
                "optim.delink_moments" => {
                    c.copy_moments_on_delink = match v {
                        "copy" => true,
                        "zero" => false,
                        _ => {
                            return Err(Error::Config(format!(
                                "line {line}: optim.delink_moments is copy|zero"
                            )))
                        }
                    }
                }
                "switch.eval_interval" => set!(c.switch.eval_interval_steps),
                "switch.trial_budget" => set!(c.switch.trial_budget_steps),
                "switch.slope_window" => set!(c.switch.slope_window),
                "switch.force_time_s" => c.force_switch_s = Some(parse_value(k, v, line)?),
                "train.max_steps" => set!(c.max_steps),
                "train.budget_s" => set!(c.budget_s),
                "train.pseudo_steps" => set!(c.pseudo_steps),
                "train.real_steps" => set!(c.real_steps),
                "train.log_interval" => set!(c.log_interval),
                "train.eval_interval" => set!(c.eval_interval),
                "train.checkpoint_interval" => set!(c.checkpoint_interval),
                "offload.budget_bytes" => c.offload_budget = Some(parse_value(k, v, line)?),
                "offload.bandwidth" => set!(c.link.bandwidth),
                "offload.latency_s" => set!(c.link.latency_s),
                "offload.fn_load" => set!(c.coefficients.forward_load),
                "offload.bn_load" => set!(c.coefficients.backward_load),
                "offload.grad_offload" => set!(c.coefficients.grad_offload),
                "offload.apply_writeback" => set!(c.coefficients.apply_writeback),
                "clock.device_flops" => set!(c.device_flops),
                _ => return Err(Error::Config(format!("line {line}: unknown key {k}"))),
            }
        }
        c.model.moe = if dense { None } else { moe };
        c.real_micro_batch = real_micro.unwrap_or(c.micro_batch);
        c.real_accumulation = real_accum.unwrap_or(c.accumulation);
        c.total_batch = total.unwrap_or(c.micro_batch * c.accumulation * c.replicas);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.replicas != 1 {
            return Err(Error::Config("batch.replicas must be 1".into()));
        }
        if self.micro_batch == 0 || self.accumulation == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.total_batch != self.micro_batch * self.accumulation * self.replicas {
            return Err(Error::Config(format!(
                "batch.total {} != micro {} x accumulation {} x replicas {}",
                self.total_batch, self.micro_batch, self.accumulation, self.replicas
            )));
        }
        if self.real_micro_batch == 0 || self.real_accumulation == 0 {
            return Err(Error::Config("Real-stage batch sizes must be positive".into()));
        }
        if self.schedule.denoise > 0 {
            self.denoise.validate()?;
        }
        if self.schedule.lm + self.schedule.denoise == 0 {
            return Err(Error::Config("at least one task ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("data.holdout_fraction must be in [0, 1)".into()));
        }
        if self.eval_batches == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("evaluation set must be non-empty".into()));
        }
        if !(self.pseudo_lr > 0.0 && self.real_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config("warmup and min-lr ratios must be in [0, 1]".into()));
        }
        if matches!(self.mode, RunMode::Auto | RunMode::P2r) {
            self.switch.validate()?;
        }
        if self.max_steps == 0 && self.budget_s <= 0.0 {
            return Err(Error::Config(
                "set train.max_steps or train.budget_s to bound the run".into(),
            ));
        }
        if self.log_interval == 0 || self.eval_interval == 0 || self.checkpoint_interval == 0 {
            return Err(Error::Config("intervals must be positive".into()));
        }
        if !(self.device_flops > 0.0) {
            return Err(Error::Config("clock.device_flops must be positive".into()));
        }
        self.link.validate()
    }

    /// The model as built for `shared` (Pseudo) or unshared (Real) mode.
    pub fn model_config(&self, shared: bool) -> ModelConfig {
        if shared {
            self.model.clone().shared()
        } else {
            self.model.clone().unshared()
        }
    }

    pub fn settings(&self, pseudo_steps: u64, real_steps: u64) -> RunSettings {
        RunSettings {
            pseudo: StageSettings {
                peak_lr: self.pseudo_lr,
                total_steps: pseudo_steps,
                micro_batch: self.micro_batch,
                accumulation: self.accumulation,
            },
            real: StageSettings {
                peak_lr: self.real_lr,
                total_steps: real_steps,
                micro_batch: self.real_micro_batch,
                accumulation: self.real_accumulation,
            },
            warmup_ratio: self.warmup_ratio,
            min_lr_ratio: self.min_lr_ratio,
            adam: self.adam,
            clock: VirtualClock {
                device_flops: self.device_flops,
                link: self.link,
            },
            coefficients: self.coefficients,
            offload_budget: self.offload_budget,
            copy_moments_on_delink: self.copy_moments_on_delink,
        }
    }

    /// Every setting written out, suitable for re-parsing.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        kv("mode", self.mode.as_str().into());
        let m = &self.model;
        kv("model.d_model", m.d_model.to_string());
        kv("model.d_ff", m.d_ff.to_string());
        kv("model.n_layers", m.n_layers_graph.to_string());
        kv("model.n_heads", m.n_heads.to_string());
        kv("model.vocab_size", m.vocab_size.to_string());
        kv("model.seq_len", m.seq_len.to_string());
        match &m.moe {
            None => kv("model.moe", "off".into()),
            Some(e) => {
                kv("model.moe", "on".into());
                kv("model.moe.n_experts", e.n_experts.to_string());
                kv("model.moe.n_prototypes", e.n_prototypes.to_string());
                kv("model.moe.n_shards", e.n_shards.to_string());
                kv("model.moe.capacity_factor", e.capacity_factor.to_string());
            }
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        if let Some(p) = path(&self.train_path) {
            kv("data.train", p);
        }
        if let Some(p) = path(&self.eval_path) {
            kv("data.eval", p);
        }
        if let Some(p) = path(&self.vocab_path) {
            kv("data.vocab", p);
        }
        kv("data.holdout_fraction", self.holdout_fraction.to_string());
        kv("data.eval_batches", self.eval_batches.to_string());
        kv("data.eval_batch_size", self.eval_batch_size.to_string());
        kv("data.lm_ratio", self.schedule.lm.to_string());
        kv("data.denoise_ratio", self.schedule.denoise.to_string());
        kv("data.corrupt_ratio", self.denoise.corrupt_ratio.to_string());
        kv("data.mean_span", self.denoise.mean_span.to_string());
        kv("batch.micro", self.micro_batch.to_string());
        kv("batch.accumulation", self.accumulation.to_string());
        kv("batch.total", self.total_batch.to_string());
        kv("batch.replicas", self.replicas.to_string());
        kv("batch.real_micro", self.real_micro_batch.to_string());
        kv("batch.real_accumulation", self.real_accumulation.to_string());
        kv("optim.pseudo_lr", self.pseudo_lr.to_string());
        kv("optim.real_lr", self.real_lr.to_string());
        kv("optim.warmup_ratio", self.warmup_ratio.to_string());
        kv("optim.schedule", "cosine".into());
        kv("optim.min_lr_ratio", self.min_lr_ratio.to_string());
        kv("optim.beta1", self.adam.beta1.to_string());
        kv("optim.beta2", self.adam.beta2.to_string());
        kv("optim.eps", self.adam.eps.to_string());
        kv("optim.weight_decay", self.adam.weight_decay.to_string());
        kv(
            "optim.delink_moments",
            if self.copy_moments_on_delink { "copy" } else { "zero" }.into(),
        );
        kv("switch.eval_interval", self.switch.eval_interval_steps.to_string());
        kv("switch.trial_budget", self.switch.trial_budget_steps.to_string());
        kv("switch.slope_window", self.switch.slope_window.to_string());
        if let Some(t) = self.force_switch_s {
            kv("switch.force_time_s", t.to_string());
        }
        kv("train.max_steps", self.max_steps.to_string());
        kv("train.budget_s", self.budget_s.to_string());
        kv("train.pseudo_steps", self.pseudo_steps.to_string());
        kv("train.real_steps", self.real_steps.to_string());
        kv("train.log_interval", self.log_interval.to_string());
        kv("train.eval_interval", self.eval_interval.to_string());
        kv("train.checkpoint_interval", self.checkpoint_interval.to_string());
        if let Some(b) = self.offload_budget {
            kv("offload.budget_bytes", b.to_string());
        }
        kv("offload.bandwidth", self.link.bandwidth.to_string());
        kv("offload.latency_s", self.link.latency_s.to_string());
        kv("offload.fn_load", self.coefficients.forward_load.to_string());
        kv("offload.bn_load", self.coefficients.backward_load.to_string());
        kv("offload.grad_offload", self.coefficients.grad_offload.to_string());
        kv("offload.apply_writeback", self.coefficients.apply_writeback.to_string());
        kv("clock.device_flops", self.device_flops.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "train.max_steps=10\n";

    #[test]
    fn defaults_follow_the_recipe() {
        let c = RunConfig::parse(BASE).unwrap();
        assert_eq!((c.micro_batch, c.accumulation, c.total_batch), (32, 4, 128));
        assert_eq!((c.pseudo_lr, c.real_lr), (2e-4, 8e-5));
        assert_eq!(c.warmup_ratio, 0.001);
        assert_eq!(c.model.d_model, 128);
        assert_eq!(c.model.n_layers_graph, 8);
    }

    #[test]
    fn batch_identity_enforced() {
        let bad = format!("{BASE}batch.micro=16\nbatch.accumulation=4\nbatch.total=128\n");
        assert!(matches!(RunConfig::parse(&bad), Err(Error::Config(_))));
        let ok = format!("{BASE}batch.micro=16\nbatch.accumulation=8\nbatch.total=128\n");
        assert!(RunConfig::parse(&ok).is_ok());
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(RunConfig::parse("train.max_steps=1\nmodel.dmodel=3\n").is_err());
        assert!(RunConfig::parse("train.max_steps=1\ntrain.max_steps=2\n").is_err());
        assert!(RunConfig::parse("model.d_model=abc\ntrain.max_steps=1\n").is_err());
    }

    #[test]
    fn text_round_trips() {
        let src = format!(
            "{BASE}mode=REAL_ONLY\nmodel.moe=off\noffload.budget_bytes=1000000\ndata.train=/tmp/x\nswitch.force_time_s=12.5\n"
        );
        let c = RunConfig::parse(&src).unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert!(c.model.moe.is_none());
    }
}
