//! AdamW and the warmup + cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::model::{EmbedParams, LayerParams, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Linear warmup to `peak_lr` over `ceil(warmup_ratio · total_steps)` steps,
/// then cosine decay to `min_lr_ratio · peak_lr` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub peak_lr: f32,
    pub warmup_ratio: f64,
    pub total_steps: u64,
    pub min_lr_ratio: f32,
}

impl CosineSchedule {
    pub fn warmup_steps(&self) -> u64 {
        ((self.warmup_ratio * self.total_steps as f64).ceil() as u64).max(1)
    }

    /// Learning rate for the update at zero-based `step`. Warmup is
    /// `peak · (step + 1) / (warmup + 1)`, reaching `peak` at `step == warmup`.
    pub fn lr(&self, step: u64) -> f32 {
        let w = self.warmup_steps();
        let min = self.peak_lr * self.min_lr_ratio;
        if step < w {
            return self.peak_lr * (step + 1) as f32 / (w + 1) as f32;
        }
        if step >= self.total_steps {
            return min;
        }
        let span = (self.total_steps - w).max(1) as f64;
        let progress = (step - w) as f64 / span;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        min + (self.peak_lr - min) * cos as f32
    }
}

/// First and second moments, laid out like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub embed: EmbedParams,
    pub layers: Vec<LayerParams>,
}

impl Moments {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            embed: model.embed.zeros_like(),
            layers: model.layers.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    pub fn bytes(&self) -> u64 {
        self.embed.bytes() + self.layers.iter().map(|l| l.bytes()).sum::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Moments,
    pub v: Moments,
    /// Number of updates applied (bias correction uses `t = step + 1`).
    pub step: u64,
}

/// Gradients in model layout. Layer slots are `None` until a gradient lands.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub embed: EmbedParams,
    pub layers: Vec<Option<LayerParams>>,
}

impl ModelGrads {
    pub fn empty(model: &Model) -> Self {
        Self {
            embed: model.embed.zeros_like(),
            layers: vec![None; model.layers.len()],
        }
    }
}

fn adamw_update(
    p: &mut Tensor,
    g: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    c: &AdamWConfig,
    lr: f32,
    bc1: f32,
    bc2: f32,
) {
    let decay = if p.shape().len() >= 2 { c.weight_decay } else { 0.0 };
    let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
    for i in 0..pd.len() {
        let gi = g.data()[i];
        md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
        vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
        let mhat = md[i] / bc1;
        let vhat = vd[i] / bc2;
        pd[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * pd[i]);
    }
}

impl AdamW {
    pub fn new(model: &Model, config: AdamWConfig) -> Self {
        Self {
            config,
            m: Moments::zeros_like(model),
            v: Moments::zeros_like(model),
            step: 0,
        }
    }

    /// Decoupled weight decay applies to matrices only.
    pub fn apply(&mut self, model: &mut Model, grads: &ModelGrads, lr: f32) -> Result<()> {
        if grads.layers.len() != model.layers.len() || self.m.layers.len() != model.layers.len() {
            return Err(Error::State(format!(
                "optimizer has {} layer slots, gradients {}, model {}",
                self.m.layers.len(),
                grads.layers.len(),
                model.layers.len()
            )));
        }
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.config.beta1.powi(t);
        let bc2 = 1.0 - self.config.beta2.powi(t);
        let c = self.config;
        {
            let gs: Vec<&Tensor> = grads.embed.named_tensors().into_iter().map(|(_, t)| t).collect();
            let ps = model.embed.tensors_mut();
            let ms = self.m.embed.tensors_mut();
            let vs = self.v.embed.tensors_mut();
            for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
                adamw_update(p, g, m, v, &c, lr, bc1, bc2);
            }
        }
        for (i, layer) in model.layers.iter_mut().enumerate() {
            let Some(gl) = &grads.layers[i] else {
                return Err(Error::State(format!("layer {i} has no gradient")));
            };
            let gs: Vec<&Tensor> = gl.named_tensors().into_iter().map(|(_, t)| t).collect();
            let ps = layer.tensors_mut();
            let ms = self.m.layers[i].tensors_mut();
            let vs = self.v.layers[i].tensors_mut();
            for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
                adamw_update(p, g, m, v, &c, lr, bc1, bc2);
            }
        }
        self.step += 1;
        Ok(())
    }

    pub fn bytes(&self) -> u64 {
        self.m.bytes() + self.v.bytes()
    }
}
