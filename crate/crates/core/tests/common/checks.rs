//! Oracle comparisons shared by the integration tests and the acceptance
//! runner. Each returns the measured quantity; callers apply thresholds.
#![allow(dead_code)]

use p2r::autodiff::{AttentionDims, Tape, Var};
use p2r::model::Model;
use p2r::optim::ModelGrads;
use p2r::tensor::Tensor;
use p2r::train::{accumulate_grads, GradTracker};

use super::*;

struct Input {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn input(shape: &[usize], r: &mut ChaCha8Rng) -> Input {
    let n = shape.iter().product();
    // Round through f32 so both sides see identical values.
    let data = to_f64(&to_f32(&rand_vec(n, 1.0, r)));
    Input {
        shape: shape.to_vec(),
        data,
    }
}

/// Compares tape gradients of `sum(w ⊙ op(inputs))` for a random `w`
/// against float64 central differences of `reference`. Returns the worst
/// relative error over the inputs.
fn check_op(
    inputs: Vec<Input>,
    seed: u64,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
) -> f64 {
    let mut r = rng(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|i| tape.leaf(Tensor::new(i.shape.clone(), to_f32(&i.data)).unwrap().with_grad(true)))
        .collect();
    let out = build(&mut tape, &vars);
    let out_shape = tape.value(out).shape().to_vec();
    let w = to_f64(&to_f32(&rand_vec(tape.value(out).numel(), 1.0, &mut r)));
    let grads = tape.backward_with(out, Tensor::new(out_shape, to_f32(&w)).unwrap());

    let base: Vec<Vec<f64>> = inputs.iter().map(|i| i.data.clone()).collect();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let got = grads.get(*v).map(|g| to_f64(g.data())).unwrap_or_else(|| vec![0.0; base[k].len()]);
        let fd = central_diff(&base[k], 1e-5, |x| {
            let mut args = base.clone();
            args[k] = x.to_vec();
            reference(&args).iter().zip(&w).map(|(a, b)| a * b).sum()
        });
        worst = worst.max(rel_err(&got, &fd, 1e-6));
    }
    worst
}

/// Finite-difference relative error for every tape primitive.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let mut r = rng(11);
    let mut out = Vec::new();
    let (m, k, n) = (3, 4, 5);

    out.push((
        "matmul",
        check_op(
            vec![input(&[m, k], &mut r), input(&[k, n], &mut r)],
            1,
            |t, v| t.matmul(v[0], v[1]).unwrap(),
            |a| matmul(&a[0], &a[1], m, k, n),
        ),
    ));
    out.push((
        "transpose",
        check_op(
            vec![input(&[m, k], &mut r)],
            2,
            |t, v| t.transpose(v[0]).unwrap(),
            |a| transpose(&a[0], m, k),
        ),
    ));
    out.push((
        "add",
        check_op(
            vec![input(&[m, k], &mut r), input(&[m, k], &mut r)],
            3,
            |t, v| t.add(v[0], v[1]).unwrap(),
            |a| a[0].iter().zip(&a[1]).map(|(x, y)| x + y).collect(),
        ),
    ));
    out.push((
        "add_bias",
        check_op(
            vec![input(&[m, k], &mut r), input(&[k], &mut r)],
            4,
            |t, v| t.add_bias(v[0], v[1]).unwrap(),
            |a| add_bias(&a[0], &a[1]),
        ),
    ));
    out.push((
        "scale",
        check_op(
            vec![input(&[m, k], &mut r)],
            5,
            |t, v| t.scale(v[0], -1.75),
            |a| a[0].iter().map(|x| x * -1.75).collect(),
        ),
    ));
    out.push((
        "gelu",
        check_op(
            vec![input(&[m, k], &mut r)],
            6,
            |t, v| t.gelu(v[0]),
            |a| a[0].iter().map(|&x| gelu(x)).collect(),
        ),
    ));
    out.push((
        "layernorm",
        check_op(
            vec![input(&[m, 6], &mut r), input(&[6], &mut r), input(&[6], &mut r)],
            7,
            |t, v| t.layernorm(v[0], v[1], v[2], 1e-5).unwrap(),
            |a| layernorm(&a[0], &a[1], &a[2], 1e-5),
        ),
    ));
    let ids = [3usize, 0, 4, 3, 1];
    out.push((
        "embedding",
        check_op(
            vec![input(&[5, 3], &mut r)],
            8,
            |t, v| t.embedding(v[0], &ids).unwrap(),
            |a| ids.iter().flat_map(|&i| a[0][i * 3..i * 3 + 3].to_vec()).collect(),
        ),
    ));
    out.push((
        "softmax",
        check_op(
            vec![input(&[m, 5], &mut r)],
            9,
            |t, v| t.softmax(v[0]),
            |a| softmax_rows(&a[0], 5),
        ),
    ));
    let mask: Vec<bool> = (0..15).map(|i| i % 3 != 1 && i != 12).collect();
    out.push((
        "masked_softmax",
        check_op(
            vec![input(&[3, 5], &mut r)],
            10,
            |t, v| t.masked_softmax(v[0], &mask).unwrap(),
            |a| masked_softmax_rows(&a[0], &mask, 5),
        ),
    ));
    for (name, causal, key_valid) in [
        ("attention_causal", true, None),
        ("attention_full_masked", false, Some(vec![true, true, false, true, true, false, true, true])),
    ] {
        let (b, s, h, d) = (2, 4, 2, 6);
        let kv = key_valid.clone();
        out.push((
            name,
            check_op(
                vec![input(&[b * s, d], &mut r), input(&[b * s, d], &mut r), input(&[b * s, d], &mut r)],
                12,
                move |t, v| {
                    let dims = AttentionDims {
                        batch: b,
                        seq: s,
                        heads: h,
                        causal,
                    };
                    t.attention(v[0], v[1], v[2], dims, kv.as_deref()).unwrap()
                },
                |a| attention(&a[0], &a[1], &a[2], b, s, h, causal, key_valid.as_deref()),
            ),
        ));
    }
    let targets = [2usize, 0, 4, 1];
    let ce_mask = [true, false, true, true];
    out.push((
        "cross_entropy",
        check_op(
            vec![input(&[4, 5], &mut r)],
            13,
            |t, v| t.cross_entropy(v[0], &targets, &ce_mask).unwrap(),
            |a| vec![cross_entropy(&a[0], 5, &targets, &ce_mask)],
        ),
    ));
    let rows = [2usize, 0, 2];
    out.push((
        "gather_rows",
        check_op(
            vec![input(&[4, 3], &mut r)],
            14,
            |t, v| t.gather_rows(v[0], &rows).unwrap(),
            |a| rows.iter().flat_map(|&i| a[0][i * 3..i * 3 + 3].to_vec()).collect(),
        ),
    ));
    out.push((
        "scatter_add_rows",
        check_op(
            vec![input(&[3, 2], &mut r)],
            15,
            |t, v| t.scatter_add_rows(v[0], &rows, 4).unwrap(),
            |a| {
                let mut o = vec![0.0; 8];
                for (i, &row) in rows.iter().enumerate() {
                    o[row * 2] += a[0][i * 2];
                    o[row * 2 + 1] += a[0][i * 2 + 1];
                }
                o
            },
        ),
    ));
    out.push((
        "mul_rows",
        check_op(
            vec![input(&[3, 4], &mut r), input(&[3], &mut r)],
            16,
            |t, v| t.mul_rows(v[0], v[1]).unwrap(),
            |a| a[0].iter().enumerate().map(|(i, x)| x * a[1][i / 4]).collect(),
        ),
    ));
    out.push((
        "gather_entries",
        check_op(
            vec![input(&[4, 3], &mut r)],
            17,
            |t, v| t.gather_entries(v[0], &[3, 1, 3], 2).unwrap(),
            |a| [3usize, 1, 3].iter().map(|&i| a[0][i * 3 + 2]).collect(),
        ),
    ));
    out.push((
        "sum",
        check_op(
            vec![input(&[3, 4], &mut r)],
            18,
            |t, v| t.sum(v[0]),
            |a| vec![a[0].iter().sum()],
        ),
    ));
    out
}

/// Replaces every parameter with uniform noise so the checks do not sit at
/// the near-identity initialization.
pub fn randomize(model: &mut Model, scale: f64, seed: u64) {
    let mut r = rng(seed);
    let mut bufs = model.embed.tensors_mut();
    for l in model.layers.iter_mut() {
        bufs.extend(l.tensors_mut());
    }
    for t in bufs {
        for v in t.data_mut() {
            *v = r.gen_range(-scale..scale) as f32;
        }
    }
}

/// Model gradient from the layer-granular backward, flattened like
/// [`flatten`].
pub fn tape_gradient(model: &Model, batch: &Batch) -> (Vec<f64>, GradTracker) {
    let mut grads = ModelGrads::empty(model);
    let mut tracker = GradTracker::default();
    accumulate_grads(model, batch, 1.0, &mut grads, &mut tracker, None).unwrap();
    let mut out = Vec::new();
    for (_, t) in grads.embed.named_tensors() {
        out.extend(to_f64(t.data()));
    }
    for (l, g) in model.layers.iter().zip(&grads.layers) {
        let g = g.clone().unwrap_or_else(|| l.zeros_like());
        for (_, t) in g.named_tensors() {
            out.extend(to_f64(t.data()));
        }
    }
    (out, tracker)
}

/// Whole-model gradient against float64 central differences of the
/// reference forward. Returns the relative error.
pub fn full_model_error(moe: bool, shared: bool, seed: u64) -> f64 {
    let mut cfg = tiny_config(2, moe);
    if shared {
        cfg = cfg.shared();
    }
    let mut model = Model::build(cfg.clone(), seed).unwrap();
    randomize(&mut model, 0.5, seed + 1);
    let mut r = rng(seed + 2);
    let batch = random_batch(2, cfg.seq_len, cfg.vocab_size, &mut r);
    let (got, _) = tape_gradient(&model, &batch);
    let flat = flatten(&model);
    let sizes = buffer_sizes(&model);
    let fd = central_diff(&flat, 1e-6, |p| loss(p, &sizes, &cfg, &batch));
    rel_err(&got, &fd, 1e-6)
}

/// Gradient of a shared L-layer model against the sum of per-layer
/// gradients of an unshared clone whose layers all hold the shared weights.
pub fn shared_gradient_error(layers: usize, moe: bool, seed: u64) -> f64 {
    let cfg = tiny_config(layers, moe).shared();
    let mut shared = Model::build(cfg.clone(), seed).unwrap();
    randomize(&mut shared, 0.5, seed + 1);
    let clone = Model {
        config: cfg.clone().unshared(),
        embed: shared.embed.clone(),
        layers: vec![shared.layers[0].clone(); layers],
        layout: shared.layout.clone(),
    };
    let mut r = rng(seed + 2);
    let batch = random_batch(3, cfg.seq_len, cfg.vocab_size, &mut r);

    let mut g_shared = ModelGrads::empty(&shared);
    accumulate_grads(&shared, &batch, 1.0, &mut g_shared, &mut GradTracker::default(), None).unwrap();
    let mut g_clone = ModelGrads::empty(&clone);
    accumulate_grads(&clone, &batch, 1.0, &mut g_clone, &mut GradTracker::default(), None).unwrap();

    let mut summed = clone.layers[0].zeros_like();
    for g in g_clone.layers.iter().flatten() {
        summed.add_assign(g);
    }
    let got: Vec<f64> = g_shared.layers[0]
        .as_ref()
        .unwrap()
        .named_tensors()
        .iter()
        .flat_map(|(_, t)| to_f64(t.data()))
        .collect();
    let want: Vec<f64> = summed.named_tensors().iter().flat_map(|(_, t)| to_f64(t.data())).collect();
    rel_err(&got, &want, 1e-12)
}

/// Gradient from one tape spanning the whole model, with the shared layer
/// recorded once and reused at every depth.
pub fn single_tape_gradient(model: &Model, batch: &Batch) -> Vec<f64> {
    use p2r::model::{embed_forward, head_forward, layer_forward, AttentionMode, EmbedVars, ForwardCtx, LayerVars};
    let mut tape = Tape::new();
    let ev = EmbedVars::record(&mut tape, &model.embed, true);
    let lvs: Vec<LayerVars> = model.layers.iter().map(|l| LayerVars::record(&mut tape, l, true)).collect();
    let ctx = ForwardCtx {
        batch: batch.inputs.rows,
        seq: batch.inputs.cols,
        mode: AttentionMode::Causal,
        key_valid: None,
    };
    let mut x = embed_forward(&mut tape, &ev, &batch.inputs).unwrap();
    for i in 0..model.config.n_layers_graph {
        let lv = &lvs[model.config.param_index(i)];
        x = layer_forward(&mut tape, lv, x, &ctx, &model.config).unwrap();
    }
    let logits = head_forward(&mut tape, &ev, x).unwrap();
    let targets: Vec<usize> = batch.targets.ids.iter().map(|&t| t as usize).collect();
    let l = tape.cross_entropy(logits, &targets, &batch.loss_mask).unwrap();
    let mut g = tape.backward(l, 1.0);
    let mut out = Vec::new();
    for (_, t) in ev.collect_grads(&mut g, &model.embed).named_tensors() {
        out.extend(to_f64(t.data()));
    }
    for (lv, l) in lvs.iter().zip(&model.layers) {
        for (_, t) in lv.collect_grads(&mut g, l).named_tensors() {
            out.extend(to_f64(t.data()));
        }
    }
    out
}

/// Six small configs, alternating dense and MoE.
pub fn random_configs(seed: u64) -> Vec<ModelConfig> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for i in 0..6 {
        let heads = [1, 2, 4][r.gen_range(0..3)];
        let mut cfg = ModelConfig {
            d_model: heads * r.gen_range(2..5) * 2,
            d_ff: r.gen_range(8..24),
            n_layers_graph: r.gen_range(2..6),
            n_layers_params: 1,
            n_heads: heads,
            vocab_size: r.gen_range(12..40),
            seq_len: r.gen_range(4..10),
            moe: None,
        };
        if i % 2 == 1 {
            let protos = r.gen_range(1..3);
            cfg.moe = Some(MoeConfig {
                n_experts: protos * r.gen_range(2..4),
                n_prototypes: protos,
                n_shards: 1,
                capacity_factor: [0.75, 1.25, 4.0][r.gen_range(0..3)],
            });
        }
        out.push(cfg);
    }
    out
}
