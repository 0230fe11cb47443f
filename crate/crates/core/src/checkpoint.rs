//! Binary checkpoint container.
//!
//! Layout: the magic `P2RCKPT\0`, a little-endian `u32` version, a
//! little-endian `u64` manifest length, the UTF-8 manifest, then the raw
//! buffers as little-endian IEEE-754 `f32`. The manifest is `key=value`
//! lines; each `buffer.<name>=<shape>@<offset>+<bytes>` line locates one
//! buffer relative to the start of the data section.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::controller::{Stage, StageState, TrialRecord};
use crate::data::StreamPos;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::moe::MoeConfig;
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"P2RCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: AdamW,
    pub schedule: CosineSchedule,
    pub stage_step: u64,
    pub state: StageState,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn buffers(model: &Model, opt: &AdamW) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    let mut group = |prefix: &str, embed: &crate::model::EmbedParams, layers: &[crate::model::LayerParams]| {
        for (n, t) in embed.named_tensors() {
            out.push((format!("{prefix}.embed.{n}"), t.clone()));
        }
        for (i, l) in layers.iter().enumerate() {
            for (n, t) in l.named_tensors() {
                out.push((format!("{prefix}.layer.{i}.{n}"), t.clone()));
            }
        }
    };
    group("param", &model.embed, &model.layers);
    group("adam.m", &opt.m.embed, &opt.m.layers);
    group("adam.v", &opt.v.embed, &opt.v.layers);
    out
}

fn write_config(s: &mut String, c: &ModelConfig) {
    let _ = writeln!(s, "model.d_model={}", c.d_model);
    let _ = writeln!(s, "model.d_ff={}", c.d_ff);
    let _ = writeln!(s, "model.n_layers_graph={}", c.n_layers_graph);
    let _ = writeln!(s, "model.n_layers_params={}", c.n_layers_params);
    let _ = writeln!(s, "model.n_heads={}", c.n_heads);
    let _ = writeln!(s, "model.vocab_size={}", c.vocab_size);
    let _ = writeln!(s, "model.seq_len={}", c.seq_len);
    if let Some(m) = &c.moe {
        let _ = writeln!(s, "model.moe.n_experts={}", m.n_experts);
        let _ = writeln!(s, "model.moe.n_prototypes={}", m.n_prototypes);
        let _ = writeln!(s, "model.moe.n_shards={}", m.n_shards);
        let _ = writeln!(s, "model.moe.capacity_factor={}", m.capacity_factor);
    }
}

fn manifest(ck: &Checkpoint, bufs: &[(String, Tensor)]) -> String {
    let mut s = String::new();
    write_config(&mut s, &ck.model.config);
    let a = &ck.optimizer.config;
    let _ = writeln!(s, "adam.beta1={}", a.beta1);
    let _ = writeln!(s, "adam.beta2={}", a.beta2);
    let _ = writeln!(s, "adam.eps={}", a.eps);
    let _ = writeln!(s, "adam.weight_decay={}", a.weight_decay);
    let _ = writeln!(s, "adam.step={}", ck.optimizer.step);
    let sc = &ck.schedule;
    let _ = writeln!(s, "schedule.peak_lr={}", sc.peak_lr);
    let _ = writeln!(s, "schedule.warmup_ratio={}", sc.warmup_ratio);
    let _ = writeln!(s, "schedule.total_steps={}", sc.total_steps);
    let _ = writeln!(s, "schedule.min_lr_ratio={}", sc.min_lr_ratio);
    let _ = writeln!(s, "schedule.stage_step={}", ck.stage_step);
    let st = &ck.state;
    let _ = writeln!(s, "state.stage={}", st.stage);
    let _ = writeln!(s, "state.global_step={}", st.global_step);
    let _ = writeln!(s, "state.samples_consumed={}", st.samples_consumed);
    let _ = writeln!(s, "state.wall_time_s={}", st.wall_time_s);
    let _ = writeln!(s, "state.seed={}", st.seed);
    let _ = writeln!(s, "state.data_epoch={}", st.data_pos.epoch);
    let _ = writeln!(s, "state.data_cursor={}", st.data_pos.cursor);
    let _ = writeln!(s, "state.batches_drawn={}", st.batches_drawn);
    if let Some(e) = st.last_eval_step {
        let _ = writeln!(s, "state.last_eval_step={e}");
    }
    if let Some(e) = st.switch_step {
        let _ = writeln!(s, "state.switch_step={e}");
    }
    for (i, t) in st.trials.iter().enumerate() {
        let _ = writeln!(
            s,
            "state.trial.{i}={},{},{},{}",
            t.step, t.real_slope, t.pseudo_slope, t.fired
        );
    }
    let mut offset = 0u64;
    for (name, t) in bufs {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "buffer.{name}={}@{offset}+{}", shape.join("x"), t.bytes());
        offset += t.bytes();
    }
    s
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let bufs = buffers(&ck.model, &ck.optimizer);
    let m = manifest(ck, &bufs);
    let data_len: u64 = bufs.iter().map(|(_, t)| t.bytes()).sum();
    let mut out = Vec::with_capacity(20 + m.len() + data_len as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
    out.extend_from_slice(m.as_bytes());
    for (_, t) in &bufs {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(ck)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn get(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("manifest is missing {key}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| bad(format!("manifest value {key}={v} is malformed")))
    }

    fn opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.0.contains_key(key) {
            self.parse(key).map(Some)
        } else {
            Ok(None)
        }
    }
}

fn read_config(f: &Fields) -> Result<ModelConfig> {
    let moe = match f.opt::<usize>("model.moe.n_experts")? {
        None => None,
        Some(n_experts) => Some(MoeConfig {
            n_experts,
            n_prototypes: f.parse("model.moe.n_prototypes")?,
            n_shards: f.parse("model.moe.n_shards")?,
            capacity_factor: f.parse("model.moe.capacity_factor")?,
        }),
    };
    Ok(ModelConfig {
        d_model: f.parse("model.d_model")?,
        d_ff: f.parse("model.d_ff")?,
        n_layers_graph: f.parse("model.n_layers_graph")?,
        n_layers_params: f.parse("model.n_layers_params")?,
        n_heads: f.parse("model.n_heads")?,
        vocab_size: f.parse("model.vocab_size")?,
        seq_len: f.parse("model.seq_len")?,
        moe,
    })
}

fn parse_trial(v: &str) -> Result<TrialRecord> {
    let parts: Vec<&str> = v.split(',').collect();
    let err = || bad(format!("malformed trial record {v:?}"));
    if parts.len() != 4 {
        return Err(err());
    }
    Ok(TrialRecord {
        step: parts[0].parse().map_err(|_| err())?,
        real_slope: parts[1].parse().map_err(|_| err())?,
        pseudo_slope: parts[2].parse().map_err(|_| err())?,
        fired: parts[3].parse().map_err(|_| err())?,
    })
}

struct BufferSpec {
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

fn parse_buffer(v: &str) -> Result<BufferSpec> {
    let err = || bad(format!("malformed buffer entry {v:?}"));
    let (shape, rest) = v.split_once('@').ok_or_else(err)?;
    let (offset, bytes) = rest.split_once('+').ok_or_else(err)?;
    let shape = shape
        .split('x')
        .map(|d| d.parse::<usize>().map_err(|_| err()))
        .collect::<Result<Vec<_>>>()?;
    Ok(BufferSpec {
        shape,
        offset: offset.parse().map_err(|_| err())?,
        bytes: bytes.parse().map_err(|_| err())?,
    })
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let mend = 20usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("manifest length exceeds file size"))?;
    let text = std::str::from_utf8(&bytes[20..mend]).map_err(|_| bad("manifest is not UTF-8"))?;
    let data = &bytes[mend..];

    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("manifest line without '=': {line:?}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let f = Fields(map);

    let config = read_config(&f)?;
    let mut model = Model::build(config, 0)?;
    let adam = AdamWConfig {
        beta1: f.parse("adam.beta1")?,
        beta2: f.parse("adam.beta2")?,
        eps: f.parse("adam.eps")?,
        weight_decay: f.parse("adam.weight_decay")?,
    };
    let mut optimizer = AdamW::new(&model, adam);
    optimizer.step = f.parse("adam.step")?;

    let expected: Vec<String> = buffers(&model, &optimizer).into_iter().map(|(n, _)| n).collect();
    let mut loaded: BTreeMap<String, Tensor> = BTreeMap::new();
    for name in &expected {
        let spec = parse_buffer(f.get(&format!("buffer.{name}"))?)?;
        let end = spec
            .offset
            .checked_add(spec.bytes)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| bad(format!("buffer {name} lies outside the data section")))?;
        if spec.bytes % 4 != 0 {
            return Err(bad(format!("buffer {name} has a partial float")));
        }
        let values: Vec<f32> = data[spec.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        loaded.insert(name.clone(), Tensor::new(spec.shape, values)?);
    }
    let extra = f
        .0
        .keys()
        .filter_map(|k| k.strip_prefix("buffer."))
        .find(|n| !loaded.contains_key(*n));
    if let Some(n) = extra {
        return Err(bad(format!("unexpected buffer {n}")));
    }

    let mut fill = |prefix: &str,
                    embed: &mut crate::model::EmbedParams,
                    layers: &mut [crate::model::LayerParams]|
     -> Result<()> {
        let names: Vec<String> = embed.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (slot, n) in embed.tensors_mut().into_iter().zip(names) {
            place(slot, loaded.remove(&format!("{prefix}.embed.{n}")))?;
        }
        for (i, l) in layers.iter_mut().enumerate() {
            let names: Vec<String> = l.named_tensors().into_iter().map(|(n, _)| n).collect();
            for (slot, n) in l.tensors_mut().into_iter().zip(names) {
                place(slot, loaded.remove(&format!("{prefix}.layer.{i}.{n}")))?;
            }
        }
        Ok(())
    };
    fill("param", &mut model.embed, &mut model.layers)?;
    fill("adam.m", &mut optimizer.m.embed, &mut optimizer.m.layers)?;
    fill("adam.v", &mut optimizer.v.embed, &mut optimizer.v.layers)?;

    let mut trials = Vec::new();
    while let Some(v) = f.0.get(&format!("state.trial.{}", trials.len())) {
        trials.push(parse_trial(v)?);
    }
    let state = StageState {
        stage: f.get("state.stage")?.parse::<Stage>().map_err(|_| bad("unknown stage"))?,
        global_step: f.parse("state.global_step")?,
        samples_consumed: f.parse("state.samples_consumed")?,
        wall_time_s: f.parse("state.wall_time_s")?,
        seed: f.parse("state.seed")?,
        data_pos: StreamPos {
            epoch: f.parse("state.data_epoch")?,
            cursor: f.parse("state.data_cursor")?,
        },
        batches_drawn: f.parse("state.batches_drawn")?,
        last_eval_step: f.opt("state.last_eval_step")?,
        trials,
        switch_step: f.opt("state.switch_step")?,
    };
    let expected_stage = if model.is_shared() {
        Stage::Pseudo
    } else {
        Stage::Real
    };
    if state.stage != expected_stage {
        return Err(bad(format!(
            "stage {} does not match a model with {} parameter layers",
            state.stage, model.config.n_layers_params
        )));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        schedule: CosineSchedule {
            peak_lr: f.parse("schedule.peak_lr")?,
            warmup_ratio: f.parse("schedule.warmup_ratio")?,
            total_steps: f.parse("schedule.total_steps")?,
            min_lr_ratio: f.parse("schedule.min_lr_ratio")?,
        },
        stage_step: f.parse("schedule.stage_step")?,
        state,
    })
}

fn place(slot: &mut Tensor, t: Option<Tensor>) -> Result<()> {
    let t = t.ok_or_else(|| bad("buffer listed twice or missing"))?;
    if t.shape() != slot.shape() {
        return Err(Error::Dimension(format!(
            "checkpoint buffer shape {:?} does not match model shape {:?}",
            t.shape(),
            slot.shape()
        )));
    }
    *slot = t;
    Ok(())
}
