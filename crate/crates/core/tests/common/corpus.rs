//! Deterministic synthetic text with Zipfian word frequencies and bigram
//! structure, so that models have something learnable.

use std::fs;
use std::path::Path;

use p2r::config::{RunConfig, RunMode};
use rand::Rng;
use rand_distr::{Distribution, Zipf};

use super::rng;

const SYLLABLES: [&str; 16] = [
    "ka", "to", "ri", "me", "su", "la", "no", "vi", "de", "po", "gu", "sa", "fe", "mi", "ro", "te",
];

pub fn zipf_text(seed: u64, bytes: usize) -> String {
    let mut r = rng(seed);
    let vocab: Vec<String> = (0..1500)
        .map(|_| {
            let n = r.gen_range(1..4);
            (0..n).map(|_| SYLLABLES[r.gen_range(0..SYLLABLES.len())]).collect()
        })
        .collect();
    let successors: Vec<[usize; 3]> = (0..vocab.len())
        .map(|_| [r.gen_range(0..vocab.len()), r.gen_range(0..60), r.gen_range(0..vocab.len())])
        .collect();
    let zipf = Zipf::new(vocab.len() as u64, 1.1).unwrap();
    let mut out = String::with_capacity(bytes + 64);
    let mut prev = 0usize;
    let mut in_sentence = 0;
    while out.len() < bytes {
        let w = if r.gen_bool(0.6) {
            successors[prev][r.gen_range(0..3)]
        } else {
            zipf.sample(&mut r) as usize - 1
        };
        out.push_str(&vocab[w]);
        in_sentence += 1;
        if in_sentence > 4 && r.gen_bool(0.15) {
            out.push_str(".\n");
            in_sentence = 0;
        } else {
            out.push(' ');
        }
        prev = w;
    }
    out
}

/// Writes a corpus file of about `bytes` bytes into `dir`.
pub fn write_corpus(dir: &Path, seed: u64, bytes: usize) -> std::path::PathBuf {
    fs::create_dir_all(dir).unwrap();
    let path = dir.join("corpus.txt");
    fs::write(&path, zipf_text(seed, bytes)).unwrap();
    path
}

/// Small MoE model and short schedule over `corpus`.
pub fn small_config(corpus: &Path, mode: RunMode) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.mode = mode;
    cfg.seed = 7;
    cfg.train_path = Some(corpus.to_path_buf());
    cfg.holdout_fraction = 0.05;
    cfg.eval_batches = 2;
    cfg.eval_batch_size = 4;
    cfg.model.d_model = 16;
    cfg.model.d_ff = 32;
    cfg.model.n_layers_graph = 3;
    cfg.model.n_heads = 2;
    cfg.model.seq_len = 16;
    if let Some(m) = cfg.model.moe.as_mut() {
        m.n_experts = 4;
        m.n_prototypes = 2;
        m.n_shards = 2;
    }
    cfg.micro_batch = 4;
    cfg.accumulation = 2;
    cfg.total_batch = 8;
    cfg.real_micro_batch = 4;
    cfg.real_accumulation = 2;
    cfg.pseudo_lr = 3e-3;
    cfg.real_lr = 1e-3;
    cfg.max_steps = 30;
    cfg.log_interval = 5;
    cfg.eval_interval = 10;
    cfg.checkpoint_interval = 10;
    cfg.switch.eval_interval_steps = 10;
    cfg.switch.trial_budget_steps = 4;
    cfg.switch.slope_window = 2;
    cfg
}
