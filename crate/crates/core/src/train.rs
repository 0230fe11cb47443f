//! Layer-granular training step. Forward keeps only each layer's input;
//! backward walks the graph layers in reverse, recomputing one layer at a
//! time on a fresh tape and folding its parameter gradient into the
//! per-parameter-layer accumulator.

use crate::autodiff::Tape;
use crate::data::{Batch, DataPipeline, Task};
use crate::error::{Error, Result};
use crate::model::{
    embed_forward, head_forward, layer_forward, AttentionMode, EmbedVars, ForwardCtx, LayerVars,
    Model,
};
use crate::offload::{CostModel, MovementReport, TieredStore};
use crate::optim::{AdamW, CosineSchedule, ModelGrads};
use crate::tensor::Tensor;

/// Counts live layer-gradient buffers during backward.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradTracker {
    pub live: usize,
    pub peak: usize,
}

impl GradTracker {
    fn alloc(&mut self) {
        self.live += 1;
        self.peak = self.peak.max(self.live);
    }

    fn free(&mut self) {
        self.live -= 1;
    }
}

fn attention_mode(task: Task) -> AttentionMode {
    match task {
        Task::Lm => AttentionMode::Causal,
        Task::Denoise => AttentionMode::Full,
    }
}

/// Forward and backward for one micro-batch. The loss is seeded with
/// `loss_scale` so that micro-batch contributions sum to a batch mean.
/// Returns the unscaled micro-batch loss and the FLOPs spent.
pub fn accumulate_grads(
    model: &Model,
    batch: &Batch,
    loss_scale: f32,
    grads: &mut ModelGrads,
    tracker: &mut GradTracker,
    mut store: Option<&mut TieredStore>,
) -> Result<(f32, u64)> {
    model.check_tokens(&batch.inputs)?;
    let config = &model.config;
    let mode = attention_mode(batch.task);
    let ctx = ForwardCtx {
        batch: batch.inputs.rows,
        seq: batch.inputs.cols,
        mode,
        key_valid: (mode == AttentionMode::Full).then_some(batch.valid.as_slice()),
    };
    let mut flops = 0u64;

    let mut et = Tape::new();
    let ev = EmbedVars::record(&mut et, &model.embed, true);
    let x0 = embed_forward(&mut et, &ev, &batch.inputs)?;

    let n = config.n_layers_graph;
    let mut inputs: Vec<Tensor> = Vec::with_capacity(n + 1);
    inputs.push(et.value(x0).clone());
    for i in 0..n {
        if let Some(s) = store.as_deref_mut() {
            s.forward_use(i)?;
        }
        let mut lt = Tape::new();
        let lv = LayerVars::record(&mut lt, model.layer_for(i), false);
        let xin = lt.leaf(inputs[i].clone());
        let y = layer_forward(&mut lt, &lv, xin, &ctx, config)?;
        flops += lt.flops();
        inputs.push(lt.into_value(y));
    }

    let mut ht = Tape::new();
    let hv = EmbedVars::record(&mut ht, &model.embed, true);
    let xl = ht.leaf(inputs[n].clone().with_grad(true));
    let logits = head_forward(&mut ht, &hv, xl)?;
    let targets: Vec<usize> = batch.targets.ids.iter().map(|&t| t as usize).collect();
    let loss_var = ht.cross_entropy(logits, &targets, &batch.loss_mask)?;
    let loss = ht.value(loss_var).item();
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            loss,
        });
    }
    let mut hg = ht.backward(loss_var, loss_scale);
    flops += ht.flops();
    let mut upstream = hg
        .take(xl)
        .ok_or_else(|| Error::State("no gradient reached the final layer".into()))?;
    grads
        .embed
        .add_assign(&hv.collect_grads(&mut hg, &model.embed));

    for i in (0..n).rev() {
        if let Some(s) = store.as_deref_mut() {
            s.backward_use(i)?;
        }
        let mut lt = Tape::new();
        let params = model.layer_for(i);
        let lv = LayerVars::record(&mut lt, params, true);
        let xin = lt.leaf(inputs[i].clone().with_grad(true));
        let y = layer_forward(&mut lt, &lv, xin, &ctx, config)?;
        let mut g = lt.backward_with(y, upstream);
        flops += lt.flops();
        upstream = g
            .take(xin)
            .ok_or_else(|| Error::State(format!("no gradient reached layer {i} input")))?;
        let current = lv.collect_grads(&mut g, params);
        tracker.alloc();
        let slot = &mut grads.layers[config.param_index(i)];
        match slot {
            Some(acc) => {
                acc.add_assign(&current);
                tracker.free();
            }
            None => *slot = Some(current),
        }
        // Drop the stored activation as soon as it has been used.
        inputs.truncate(i + 1);
    }

    let mut eg = et.backward_with(x0, upstream);
    flops += et.flops();
    grads
        .embed
        .add_assign(&ev.collect_grads(&mut eg, &model.embed));
    Ok((loss, flops))
}

/// Mean evaluation loss over `batches`, weighted by loss tokens.
pub fn eval_loss(model: &Model, batches: &[Batch]) -> Result<f32> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for b in batches {
        let logits = model.forward_with(
            &b.inputs,
            attention_mode(b.task),
            (b.task == Task::Denoise).then_some(b.valid.as_slice()),
        )?;
        let v = model.config.vocab_size;
        let mut tape = Tape::new();
        let lv = tape.leaf(logits.reshape(vec![b.inputs.rows * b.inputs.cols, v])?);
        let targets: Vec<usize> = b.targets.ids.iter().map(|&t| t as usize).collect();
        let l = tape.cross_entropy(lv, &targets, &b.loss_mask)?;
        let k = b.loss_tokens();
        total += tape.value(l).item() as f64 * k as f64;
        count += k;
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok((total / count as f64) as f32)
}

fn grads_finite(g: &ModelGrads) -> bool {
    g.embed.named_tensors().iter().all(|(_, t)| t.is_finite())
        && g.layers.iter().flatten().all(|l| l.named_tensors().iter().all(|(_, t)| t.is_finite()))
}

/// Converts work into simulated seconds so that timing is reproducible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualClock {
    /// Sustained compute rate, FLOP/s.
    pub device_flops: f64,
    pub link: CostModel,
}

impl VirtualClock {
    pub fn step_time(&self, flops: u64, movement: &MovementReport) -> f64 {
        flops as f64 / self.device_flops
            + movement.total() as f64 / self.link.bandwidth
            + movement.transfers as f64 * self.link.latency_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss: f32,
    pub lr: f32,
    pub flops: u64,
    pub movement: MovementReport,
    pub time_s: f64,
    pub samples: u64,
    pub peak_grad_buffers: usize,
}

/// Model, optimizer, schedule and offload store for one stage.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub schedule: CosineSchedule,
    pub store: TieredStore,
    pub clock: VirtualClock,
    pub micro_batch: usize,
    pub accumulation: usize,
    /// Updates applied in this stage (drives the schedule).
    pub stage_step: u64,
}

impl Trainer {
    /// One optimizer update over `accumulation` micro-batches.
    pub fn step(&mut self, data: &mut DataPipeline) -> Result<StepStats> {
        let batches: Vec<Batch> = (0..self.accumulation)
            .map(|_| data.next_batch(self.micro_batch))
            .collect();
        self.step_on(&batches)
    }

    /// One update on explicit micro-batches; the loss is the mean over all
    /// of their loss tokens.
    pub fn step_on(&mut self, batches: &[Batch]) -> Result<StepStats> {
        let total: usize = batches.iter().map(Batch::loss_tokens).sum();
        let mut grads = ModelGrads::empty(&self.model);
        let mut tracker = GradTracker::default();
        let mut loss = 0.0f64;
        let mut flops = 0u64;
        self.store.begin_step();
        for b in batches {
            let k = b.loss_tokens();
            let scale = if total == 0 { 0.0 } else { k as f32 / total as f32 };
            let (l, f) = accumulate_grads(
                &self.model,
                b,
                scale,
                &mut grads,
                &mut tracker,
                Some(&mut self.store),
            )
            .map_err(|e| match e {
                Error::Divergence { loss, .. } => Error::Divergence {
                    step: self.stage_step,
                    loss,
                },
                other => other,
            })?;
            loss += l as f64 * scale as f64;
            flops += f;
        }
        if !grads_finite(&grads) {
            return Err(Error::Divergence {
                step: self.stage_step,
                loss: loss as f32,
            });
        }
        let lr = self.schedule.lr(self.stage_step);
        for p in 0..self.model.layers.len() {
            self.store.apply(p);
        }
        self.optimizer.apply(&mut self.model, &grads, lr)?;
        flops += 10 * self.model.param_bytes() / 4;
        if !self.model.is_finite() {
            return Err(Error::Divergence {
                step: self.stage_step,
                loss: f32::NAN,
            });
        }
        self.stage_step += 1;
        let movement = self.store.report().clone();
        let time_s = self.clock.step_time(flops, &movement);
        Ok(StepStats {
            loss: loss as f32,
            lr,
            flops,
            movement,
            time_s,
            samples: batches.iter().map(|b| b.size() as u64).sum(),
            peak_grad_buffers: tracker.peak,
        })
    }
}
