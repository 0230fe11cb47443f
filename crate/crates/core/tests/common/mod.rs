//! Independent float64 reference implementations used as test oracles.
#![allow(dead_code)]

pub mod checks;
pub mod corpus;
pub mod planner;
pub mod scripted;

pub use p2r::data::Batch;
pub use p2r::model::{Model, ModelConfig, LN_EPS};
pub use p2r::moe::MoeConfig;
pub use rand::{Rng, SeedableRng};
pub use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(n: usize, scale: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-scale..scale)).collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Norm-wise relative error `|a - b| / max(|b|, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

/// Central differences of `f` at `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub fn add_bias(a: &[f64], b: &[f64]) -> Vec<f64> {
    let d = b.len();
    a.iter().enumerate().map(|(i, x)| x + b[i % d]).collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn layernorm(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let d = g.len();
    let mut out = vec![0.0; x.len()];
    for (r, row) in x.chunks(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out[r * d + j] = (row[j] - mean) * rs * g[j] + b[j];
        }
    }
    out
}

pub fn softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for v in row.iter_mut() {
            *v = (*v - max).exp() / s;
        }
    }
    out
}

pub fn masked_softmax_rows(x: &[f64], mask: &[bool], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / d {
        let idx: Vec<usize> = (r * d..(r + 1) * d).filter(|&i| mask[i]).collect();
        if idx.is_empty() {
            continue;
        }
        let max = idx.iter().map(|&i| x[i]).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = idx.iter().map(|&i| (x[i] - max).exp()).sum();
        for &i in &idx {
            out[i] = (x[i] - max).exp() / s;
        }
    }
    out
}

/// Multi-head attention over `[batch·seq × d]` projections.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    batch: usize,
    seq: usize,
    heads: usize,
    causal: bool,
    key_valid: Option<&[bool]>,
) -> Vec<f64> {
    let d = q.len() / (batch * seq);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..seq {
                let visible: Vec<usize> = (0..seq)
                    .filter(|&j| (!causal || j <= i) && key_valid.map_or(true, |m| m[b * seq + j]))
                    .collect();
                if visible.is_empty() {
                    continue;
                }
                let scores: Vec<f64> = visible
                    .iter()
                    .map(|&j| {
                        (0..dh)
                            .map(|c| q[(b * seq + i) * d + h * dh + c] * k[(b * seq + j) * d + h * dh + c])
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let p = softmax_rows(&scores, scores.len());
                for (w, &j) in p.iter().zip(&visible) {
                    for c in 0..dh {
                        out[(b * seq + i) * d + h * dh + c] += w * v[(b * seq + j) * d + h * dh + c];
                    }
                }
            }
        }
    }
    out
}

/// Mean masked cross-entropy of `[rows × vocab]` logits.
pub fn cross_entropy(logits: &[f64], vocab: usize, targets: &[usize], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (r, row) in logits.chunks(vocab).enumerate() {
        if !mask[r] {
            continue;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[targets[r]];
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Model parameters flattened in canonical buffer order: embedding
/// buffers first, then each parameterized layer.
pub fn flatten(model: &Model) -> Vec<f64> {
    let mut out = Vec::new();
    for (_, t) in model.embed.named_tensors() {
        out.extend(t.data().iter().map(|&x| x as f64));
    }
    for l in &model.layers {
        for (_, t) in l.named_tensors() {
            out.extend(t.data().iter().map(|&x| x as f64));
        }
    }
    out
}

/// Shapes matching [`flatten`].
pub fn buffer_sizes(model: &Model) -> Vec<usize> {
    let mut out: Vec<usize> = model.embed.named_tensors().iter().map(|(_, t)| t.numel()).collect();
    for l in &model.layers {
        out.extend(l.named_tensors().iter().map(|(_, t)| t.numel()));
    }
    out
}

fn split<'a>(flat: &'a [f64], sizes: &[usize]) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for &s in sizes {
        out.push(&flat[off..off + s]);
        off += s;
    }
    out
}

fn ffn(x: &[f64], w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64], d: usize, ff: usize) -> Vec<f64> {
    let rows = x.len() / d;
    let h: Vec<f64> = add_bias(&matmul(x, w1, rows, d, ff), b1).into_iter().map(gelu).collect();
    add_bias(&matmul(&h, w2, rows, ff, d), b2)
}

/// Top-1 per prototype group with capacity, mirroring the documented rule.
pub fn route(logits: &[f64], moe: &MoeConfig) -> Vec<bool> {
    let e = moe.n_experts;
    let group = e / moe.n_prototypes;
    let tokens = logits.len() / e;
    let cap = (moe.capacity_factor as f64 * tokens as f64 / group as f64).ceil() as usize;
    let mut load = vec![0usize; e];
    let mut kept = vec![false; logits.len()];
    for t in 0..tokens {
        for g in 0..moe.n_prototypes {
            let mut best = g * group;
            for j in g * group + 1..(g + 1) * group {
                if logits[t * e + j] > logits[t * e + best] {
                    best = j;
                }
            }
            if load[best] < cap {
                load[best] += 1;
                kept[t * e + best] = true;
            }
        }
    }
    kept
}

fn layer(
    x: &[f64],
    p: &[&[f64]],
    cfg: &ModelConfig,
    batch: usize,
    seq: usize,
    causal: bool,
    key_valid: Option<&[bool]>,
) -> Vec<f64> {
    let d = cfg.d_model;
    let n = x.len() / d;
    let eps = LN_EPS as f64;
    let a = layernorm(x, p[0], p[1], eps);
    let q = add_bias(&matmul(&a, p[2], n, d, d), p[3]);
    let k = add_bias(&matmul(&a, p[4], n, d, d), p[5]);
    let v = add_bias(&matmul(&a, p[6], n, d, d), p[7]);
    let att = attention(&q, &k, &v, batch, seq, cfg.n_heads, causal, key_valid);
    let o = add_bias(&matmul(&att, p[8], n, d, d), p[9]);
    let h: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
    let f = layernorm(&h, p[10], p[11], eps);
    let y = match &cfg.moe {
        None => ffn(&f, p[12], p[13], p[14], p[15], d, cfg.d_ff),
        Some(moe) => {
            let e = moe.n_experts;
            let logits = matmul(&f, p[12], n, d, e);
            let kept = route(&logits, moe);
            let w = masked_softmax_rows(&logits, &kept, e);
            let mut y = vec![0.0; n * d];
            for ex in 0..e {
                let b = 13 + 4 * ex;
                let out = ffn(&f, p[b], p[b + 1], p[b + 2], p[b + 3], d, cfg.d_ff);
                for t in 0..n {
                    if kept[t * e + ex] {
                        for c in 0..d {
                            y[t * d + c] += w[t * e + ex] * out[t * d + c];
                        }
                    }
                }
            }
            y
        }
    };
    h.iter().zip(&y).map(|(a, b)| a + b).collect()
}

/// Logits `[batch·seq × vocab]` of the model whose flattened parameters are
/// `flat`.
pub fn logits(flat: &[f64], sizes: &[usize], cfg: &ModelConfig, batch: &Batch) -> Vec<f64> {
    let bufs = split(flat, sizes);
    let (tok, pos, lnf_g, lnf_b) = (bufs[0], bufs[1], bufs[2], bufs[3]);
    let per_layer = (bufs.len() - 4) / cfg.n_layers_params;
    let d = cfg.d_model;
    let (b, s) = (batch.inputs.rows, batch.inputs.cols);
    let mut x = vec![0.0; b * s * d];
    for (i, &id) in batch.inputs.ids.iter().enumerate() {
        let t = i % s;
        for c in 0..d {
            x[i * d + c] = tok[id as usize * d + c] + pos[t * d + c];
        }
    }
    let causal = batch.task == p2r::data::Task::Lm;
    let key_valid = (!causal).then_some(batch.valid.as_slice());
    for l in 0..cfg.n_layers_graph {
        let pi = if cfg.n_layers_params == 1 { 0 } else { l };
        let p = &bufs[4 + pi * per_layer..4 + (pi + 1) * per_layer];
        x = layer(&x, p, cfg, b, s, causal, key_valid);
    }
    let h = layernorm(&x, lnf_g, lnf_b, LN_EPS as f64);
    let wt = transpose(tok, cfg.vocab_size, d);
    matmul(&h, &wt, b * s, d, cfg.vocab_size)
}

pub fn loss(flat: &[f64], sizes: &[usize], cfg: &ModelConfig, batch: &Batch) -> f64 {
    let lg = logits(flat, sizes, cfg, batch);
    let targets: Vec<usize> = batch.targets.ids.iter().map(|&t| t as usize).collect();
    cross_entropy(&lg, cfg.vocab_size, &targets, &batch.loss_mask)
}

pub fn tiny_config(layers: usize, moe: bool) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_ff: 12,
        n_layers_graph: layers,
        n_layers_params: layers,
        n_heads: 2,
        vocab_size: 11,
        seq_len: 6,
        moe: moe.then(|| MoeConfig {
            n_experts: 4,
            n_prototypes: 2,
            n_shards: 2,
            capacity_factor: 2.0,
        }),
    }
}

/// Random LM batch over `vocab` ids with no padding.
pub fn random_batch(rows: usize, seq: usize, vocab: usize, r: &mut ChaCha8Rng) -> Batch {
    let ids: Vec<u32> = (0..rows * seq).map(|_| r.gen_range(4..vocab as u32)).collect();
    p2r::data::lm_batch_from_ids(ids, rows, seq, 0)
}
