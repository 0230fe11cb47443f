//! Stacked pre-norm transformer with dense or mixture-of-experts FFN
//! sublayers, buildable with one shared layer (Pseudo) or one layer per
//! graph position (Real).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttentionDims, Gradients, Tape, Var};
use crate::data::IdMatrix;
use crate::error::{Error, Result};
use crate::moe::{self, MoeConfig};
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    /// Depth of the computation graph (L).
    pub n_layers_graph: usize,
    /// Distinct parameterized layers (l): 1 when shared, L otherwise.
    pub n_layers_params: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub moe: Option<MoeConfig>,
}

impl ModelConfig {
    /// Small defaults used across the examples and the CLI.
    pub fn desk() -> Self {
        Self {
            d_model: 128,
            d_ff: 512,
            n_layers_graph: 8,
            n_layers_params: 1,
            n_heads: 4,
            vocab_size: 260,
            seq_len: 64,
            moe: Some(MoeConfig {
                n_experts: 8,
                n_prototypes: 2,
                n_shards: 4,
                capacity_factor: 1.25,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.d_ff == 0 || self.n_layers_graph == 0 {
            return fail("d_model, d_ff and n_layers must be positive".into());
        }
        if self.vocab_size == 0 || self.seq_len == 0 {
            return fail("vocab_size and seq_len must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers_params != 1 && self.n_layers_params != self.n_layers_graph {
            return fail(format!(
                "n_layers_params must be 1 or {} (got {})",
                self.n_layers_graph, self.n_layers_params
            ));
        }
        if let Some(m) = &self.moe {
            m.validate()?;
        }
        Ok(())
    }

    pub fn is_shared(&self) -> bool {
        self.n_layers_params == 1 && self.n_layers_graph > 1
    }

    pub fn shared(mut self) -> Self {
        self.n_layers_params = 1;
        self
    }

    pub fn unshared(mut self) -> Self {
        self.n_layers_params = self.n_layers_graph;
        self
    }

    /// Parameter layer used at graph position `i`.
    pub fn param_index(&self, graph_layer: usize) -> usize {
        if self.n_layers_params == 1 {
            0
        } else {
            graph_layer
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub embedding_params: u64,
    pub per_layer_params: u64,
    pub total_params: u64,
}

impl ParamCount {
    pub fn non_embedding(&self) -> u64 {
        self.total_params - self.embedding_params
    }
}

/// Closed-form parameter count.
pub fn count_params(config: &ModelConfig) -> ParamCount {
    let d = config.d_model as u64;
    let ff = config.d_ff as u64;
    let v = config.vocab_size as u64;
    let s = config.seq_len as u64;
    let expert = d * ff + ff + ff * d + d;
    let ffn = match &config.moe {
        None => expert,
        Some(m) => d * m.n_experts as u64 + m.n_experts as u64 * expert,
    };
    let per_layer = 4 * d * d + 4 * d + 4 * d + ffn;
    let embedding = v * d + s * d + 2 * d;
    ParamCount {
        embedding_params: embedding,
        per_layer_params: per_layer,
        total_params: embedding + per_layer * config.n_layers_params as u64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ExpertParams {
    fn init(d: usize, ff: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: Tensor::randn(&[d, ff], INIT_STD, rng),
            b1: Tensor::zeros(&[ff]),
            w2: Tensor::randn(&[ff, d], INIT_STD, rng),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FfnParams {
    Dense(ExpertParams),
    Moe {
        gate: Tensor,
        experts: Vec<ExpertParams>,
    },
}

/// One transformer layer's parameters. Gradients and optimizer moments reuse
/// this structure.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ffn: FfnParams,
}

impl LayerParams {
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.d_model;
        let sq = |rng: &mut ChaCha8Rng| Tensor::randn(&[d, d], INIT_STD, rng);
        let wq = sq(rng);
        let wk = sq(rng);
        let wv = sq(rng);
        let wo = sq(rng);
        let ffn = match &config.moe {
            None => FfnParams::Dense(ExpertParams::init(d, config.d_ff, rng)),
            Some(m) => FfnParams::Moe {
                gate: Tensor::randn(&[d, m.n_experts], INIT_STD, rng),
                experts: (0..m.n_experts)
                    .map(|_| ExpertParams::init(d, config.d_ff, rng))
                    .collect(),
            },
        };
        Self {
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            wq,
            bq: Tensor::zeros(&[d]),
            wk,
            bk: Tensor::zeros(&[d]),
            wv,
            bv: Tensor::zeros(&[d]),
            wo,
            bo: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            ffn,
        }
    }

    /// Named buffers in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("ln1.gain".into(), &self.ln1_gain),
            ("ln1.bias".into(), &self.ln1_bias),
            ("attn.wq".into(), &self.wq),
            ("attn.bq".into(), &self.bq),
            ("attn.wk".into(), &self.wk),
            ("attn.bk".into(), &self.bk),
            ("attn.wv".into(), &self.wv),
            ("attn.bv".into(), &self.bv),
            ("attn.wo".into(), &self.wo),
            ("attn.bo".into(), &self.bo),
            ("ln2.gain".into(), &self.ln2_gain),
            ("ln2.bias".into(), &self.ln2_bias),
        ];
        const EXPERT_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];
        match &self.ffn {
            FfnParams::Dense(e) => {
                for (n, t) in EXPERT_NAMES.iter().zip(e.tensors()) {
                    out.push((format!("ffn.{n}"), t));
                }
            }
            FfnParams::Moe { gate, experts } => {
                out.push(("moe.gate".into(), gate));
                for (i, e) in experts.iter().enumerate() {
                    for (n, t) in EXPERT_NAMES.iter().zip(e.tensors()) {
                        out.push((format!("moe.expert{i}.{n}"), t));
                    }
                }
            }
        }
        out
    }

    /// Same order as [`LayerParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ];
        match &mut self.ffn {
            FfnParams::Dense(e) => out.extend(e.tensors_mut()),
            FfnParams::Moe { gate, experts } => {
                out.push(gate);
                for e in experts.iter_mut() {
                    out.extend(e.tensors_mut());
                }
            }
        }
        out
    }

    pub fn numel(&self) -> u64 {
        self.named_tensors().iter().map(|(_, t)| t.numel() as u64).sum()
    }

    pub fn bytes(&self) -> u64 {
        self.named_tensors().iter().map(|(_, t)| t.bytes()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    pub fn add_assign(&mut self, other: &LayerParams) {
        let theirs: Vec<&Tensor> = other.named_tensors().into_iter().map(|(_, t)| t).collect();
        for (mine, t) in self.tensors_mut().into_iter().zip(theirs) {
            mine.add_assign(t);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedParams {
    /// Token table, also used (transposed) as the output projection.
    pub tokens: Tensor,
    pub positions: Tensor,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
}

impl EmbedParams {
    fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.d_model;
        Self {
            tokens: Tensor::randn(&[config.vocab_size, d], INIT_STD, rng),
            positions: Tensor::randn(&[config.seq_len, d], INIT_STD, rng),
            lnf_gain: Tensor::full(&[d], 1.0),
            lnf_bias: Tensor::zeros(&[d]),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("tokens".into(), &self.tokens),
            ("positions".into(), &self.positions),
            ("lnf.gain".into(), &self.lnf_gain),
            ("lnf.bias".into(), &self.lnf_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.tokens,
            &mut self.positions,
            &mut self.lnf_gain,
            &mut self.lnf_bias,
        ]
    }

    pub fn bytes(&self) -> u64 {
        self.named_tensors().iter().map(|(_, t)| t.bytes()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    pub fn add_assign(&mut self, other: &EmbedParams) {
        let theirs: Vec<&Tensor> = other.named_tensors().into_iter().map(|(_, t)| t).collect();
        for (mine, t) in self.tensors_mut().into_iter().zip(theirs) {
            mine.add_assign(t);
        }
    }
}

/// Assignment of experts to logical shards. Contiguous blocks of
/// `n_experts / n_shards`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertLayout {
    pub shards: Vec<Vec<usize>>,
}

impl ExpertLayout {
    pub fn contiguous(n_experts: usize, n_shards: usize) -> Result<Self> {
        if n_shards == 0 || n_experts % n_shards != 0 {
            return Err(Error::Config(format!(
                "{n_experts} experts cannot be split over {n_shards} shards"
            )));
        }
        let per = n_experts / n_shards;
        Ok(Self {
            shards: (0..n_shards)
                .map(|s| (s * per..(s + 1) * per).collect())
                .collect(),
        })
    }

    pub fn shard_of(&self, expert: usize) -> Option<usize> {
        self.shards.iter().position(|s| s.contains(&expert))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: EmbedParams,
    pub layers: Vec<LayerParams>,
    pub layout: Option<ExpertLayout>,
}

/// Attention visibility for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Language modeling: each position sees itself and earlier positions.
    Causal,
    /// Denoising: every unpadded position is visible.
    Full,
}

/// Everything a layer forward needs besides parameters.
#[derive(Debug, Clone)]
pub struct ForwardCtx<'a> {
    pub batch: usize,
    pub seq: usize,
    pub mode: AttentionMode,
    pub key_valid: Option<&'a [bool]>,
}

/// Tape handles for one layer's parameters.
pub struct LayerVars {
    vars: Vec<Var>,
    moe_experts: usize,
}

impl LayerVars {
    pub fn record(tape: &mut Tape, params: &LayerParams, requires_grad: bool) -> Self {
        let vars = params
            .named_tensors()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone().with_grad(requires_grad)))
            .collect();
        let moe_experts = match &params.ffn {
            FfnParams::Dense(_) => 0,
            FfnParams::Moe { experts, .. } => experts.len(),
        };
        Self { vars, moe_experts }
    }

    /// Gradient in [`LayerParams`] form; parameters that received no
    /// gradient (e.g. an expert with no routed tokens) get zeros.
    pub fn collect_grads(&self, grads: &mut Gradients, like: &LayerParams) -> LayerParams {
        let mut out = like.clone();
        for (slot, v) in out.tensors_mut().into_iter().zip(&self.vars) {
            match grads.take(*v) {
                Some(g) => *slot = g,
                None => slot.data_mut().fill(0.0),
            }
        }
        out
    }

    fn expert(&self, i: usize) -> [Var; 4] {
        let base = 13 + 4 * i;
        [
            self.vars[base],
            self.vars[base + 1],
            self.vars[base + 2],
            self.vars[base + 3],
        ]
    }
}

pub struct EmbedVars {
    pub tokens: Var,
    pub positions: Var,
    pub lnf_gain: Var,
    pub lnf_bias: Var,
}

impl EmbedVars {
    pub fn record(tape: &mut Tape, params: &EmbedParams, requires_grad: bool) -> Self {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone().with_grad(requires_grad));
        Self {
            tokens: leaf(&params.tokens),
            positions: leaf(&params.positions),
            lnf_gain: leaf(&params.lnf_gain),
            lnf_bias: leaf(&params.lnf_bias),
        }
    }

    pub fn collect_grads(&self, grads: &mut Gradients, like: &EmbedParams) -> EmbedParams {
        let mut out = like.zeros_like();
        for (slot, v) in out
            .tensors_mut()
            .into_iter()
            .zip([self.tokens, self.positions, self.lnf_gain, self.lnf_bias])
        {
            if let Some(g) = grads.take(v) {
                *slot = g;
            }
        }
        out
    }
}

fn ffn_forward(tape: &mut Tape, x: Var, w: [Var; 4]) -> Result<Var> {
    let h = tape.matmul(x, w[0])?;
    let h = tape.add_bias(h, w[1])?;
    let h = tape.gelu(h);
    let y = tape.matmul(h, w[2])?;
    tape.add_bias(y, w[3])
}

/// Token embedding plus learned positions: `[batch·seq × d]`.
pub fn embed_forward(tape: &mut Tape, ev: &EmbedVars, tokens: &IdMatrix) -> Result<Var> {
    let ids: Vec<usize> = tokens.ids.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..tokens.rows).flat_map(|_| 0..tokens.cols).collect();
    let tok = tape.embedding(ev.tokens, &ids)?;
    let pos = tape.embedding(ev.positions, &positions)?;
    tape.add(tok, pos)
}

/// Final norm and tied output projection.
pub fn head_forward(tape: &mut Tape, ev: &EmbedVars, x: Var) -> Result<Var> {
    let h = tape.layernorm(x, ev.lnf_gain, ev.lnf_bias, LN_EPS)?;
    let wt = tape.transpose(ev.tokens)?;
    tape.matmul(h, wt)
}

/// One pre-norm transformer block: `x + attn(ln1(x))`, then `h + ffn(ln2(h))`.
pub fn layer_forward(
    tape: &mut Tape,
    lv: &LayerVars,
    x: Var,
    ctx: &ForwardCtx<'_>,
    config: &ModelConfig,
) -> Result<Var> {
    let p = &lv.vars;
    let a = tape.layernorm(x, p[0], p[1], LN_EPS)?;
    let q = tape.matmul(a, p[2])?;
    let q = tape.add_bias(q, p[3])?;
    let k = tape.matmul(a, p[4])?;
    let k = tape.add_bias(k, p[5])?;
    let v = tape.matmul(a, p[6])?;
    let v = tape.add_bias(v, p[7])?;
    let dims = AttentionDims {
        batch: ctx.batch,
        seq: ctx.seq,
        heads: config.n_heads,
        causal: ctx.mode == AttentionMode::Causal,
    };
    let att = tape.attention(q, k, v, dims, ctx.key_valid)?;
    let o = tape.matmul(att, p[8])?;
    let o = tape.add_bias(o, p[9])?;
    let h = tape.add(x, o)?;
    let f = tape.layernorm(h, p[10], p[11], LN_EPS)?;
    let y = match (&config.moe, lv.moe_experts) {
        (None, _) => ffn_forward(tape, f, [p[12], p[13], p[14], p[15]])?,
        (Some(mc), n) if n == mc.n_experts => moe_forward(tape, lv, f, mc)?,
        _ => {
            return Err(Error::Config(
                "layer parameters do not match the model config".into(),
            ))
        }
    };
    tape.add(h, y)
}

fn moe_forward(tape: &mut Tape, lv: &LayerVars, f: Var, mc: &MoeConfig) -> Result<Var> {
    let n = tape.value(f).rows();
    let d = tape.value(f).cols();
    let logits = tape.matmul(f, lv.vars[12])?;
    let routing = moe::dispatch(tape.value(logits), mc)?;
    let weights = tape.masked_softmax(logits, &routing.kept_mask())?;
    let mut out: Option<Var> = None;
    for e in 0..mc.n_experts {
        let rows = routing.tokens_for(e);
        if rows.is_empty() {
            continue;
        }
        let xe = tape.gather_rows(f, &rows)?;
        let ye = ffn_forward(tape, xe, lv.expert(e))?;
        let we = tape.gather_entries(weights, &rows, e)?;
        let ye = tape.mul_rows(ye, we)?;
        let contrib = tape.scatter_add_rows(ye, &rows, n)?;
        out = Some(match out {
            Some(acc) => tape.add(acc, contrib)?,
            None => contrib,
        });
    }
    Ok(match out {
        Some(v) => v,
        None => tape.leaf(Tensor::zeros(&[n, d])),
    })
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = EmbedParams::init(&config, &mut rng);
        let layers = (0..config.n_layers_params)
            .map(|_| LayerParams::init(&config, &mut rng))
            .collect();
        let layout = match &config.moe {
            Some(m) => Some(ExpertLayout::contiguous(m.n_experts, m.n_shards)?),
            None => None,
        };
        Ok(Self {
            config,
            embed,
            layers,
            layout,
        })
    }

    pub fn is_shared(&self) -> bool {
        self.config.is_shared()
    }

    pub fn layer_for(&self, graph_layer: usize) -> &LayerParams {
        &self.layers[self.config.param_index(graph_layer)]
    }

    pub fn check_tokens(&self, tokens: &IdMatrix) -> Result<()> {
        if tokens.cols > self.config.seq_len {
            return Err(Error::Dimension(format!(
                "sequence length {} exceeds {}",
                tokens.cols, self.config.seq_len
            )));
        }
        if let Some(&bad) = tokens
            .ids
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Index(format!(
                "token id {bad} >= vocabulary {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Logits `[batch × seq × vocab]` with causal attention and no padding.
    pub fn forward(&self, tokens: &IdMatrix) -> Result<Tensor> {
        self.forward_with(tokens, AttentionMode::Causal, None)
    }

    pub fn forward_with(
        &self,
        tokens: &IdMatrix,
        mode: AttentionMode,
        key_valid: Option<&[bool]>,
    ) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let ctx = ForwardCtx {
            batch: tokens.rows,
            seq: tokens.cols,
            mode,
            key_valid,
        };
        let mut tape = Tape::new();
        let ev = EmbedVars::record(&mut tape, &self.embed, false);
        let mut x = embed_forward(&mut tape, &ev, tokens)?;
        for i in 0..self.config.n_layers_graph {
            let mut lt = Tape::new();
            let lv = LayerVars::record(&mut lt, self.layer_for(i), false);
            let xin = lt.leaf(tape.value(x).clone());
            let y = layer_forward(&mut lt, &lv, xin, &ctx, &self.config)?;
            x = tape.leaf(lt.into_value(y));
        }
        let logits = head_forward(&mut tape, &ev, x)?;
        let v = self.config.vocab_size;
        tape.into_value(logits)
            .reshape(vec![tokens.rows, tokens.cols, v])
    }

    /// Reassigns experts to `new_n_shards` logical shards. Expert order and
    /// weights are untouched, so outputs are unchanged.
    pub fn redistribute_experts(mut self, new_n_shards: usize) -> Result<Self> {
        let moe = self
            .config
            .moe
            .as_mut()
            .ok_or_else(|| Error::Config("dense model has no experts".into()))?;
        let layout = ExpertLayout::contiguous(moe.n_experts, new_n_shards)?;
        moe.n_shards = new_n_shards;
        self.layout = Some(layout);
        Ok(self)
    }

    pub fn param_bytes(&self) -> u64 {
        self.embed.bytes() + self.layers.iter().map(|l| l.bytes()).sum::<u64>()
    }

    pub fn non_embedding_bytes(&self) -> u64 {
        self.layers.iter().map(|l| l.bytes()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.embed.named_tensors().iter().all(|(_, t)| t.is_finite())
            && self
                .layers
                .iter()
                .all(|l| l.named_tensors().iter().all(|(_, t)| t.is_finite()))
    }
}
