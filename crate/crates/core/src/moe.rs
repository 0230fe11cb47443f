//! Expert-prototype routing: experts are split into `n_prototypes` groups and
//! every token takes its top-1 expert inside each group, so each token selects
//! exactly `n_prototypes` experts before capacity limits apply. There is no
//! auxiliary load-balancing term.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MoeConfig {
    pub n_experts: usize,
    /// Number of prototype groups (k selected experts per token).
    pub n_prototypes: usize,
    /// Logical devices the experts are partitioned over.
    pub n_shards: usize,
    pub capacity_factor: f32,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 || self.n_prototypes == 0 || self.n_shards == 0 {
            return Err(Error::Config("MoE sizes must be positive".into()));
        }
        if self.n_experts % self.n_prototypes != 0 {
            return Err(Error::Config(format!(
                "{} experts not divisible into {} prototypes",
                self.n_experts, self.n_prototypes
            )));
        }
        if self.n_experts % self.n_shards != 0 {
            return Err(Error::Config(format!(
                "{} experts not divisible over {} shards",
                self.n_experts, self.n_shards
            )));
        }
        if !(self.capacity_factor > 0.0) || !self.capacity_factor.is_finite() {
            return Err(Error::Config("capacity_factor must be positive".into()));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.n_experts / self.n_prototypes
    }

    pub fn prototype_of(&self, expert: usize) -> usize {
        expert / self.group_size()
    }

    /// Per-expert token cap for a batch of `tokens`.
    pub fn capacity(&self, tokens: usize) -> usize {
        (self.capacity_factor as f64 * tokens as f64 / self.group_size() as f64).ceil() as usize
    }
}

/// One token's pick inside one prototype group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub expert: usize,
    pub dropped: bool,
    /// Combine weight; zero when dropped.
    pub weight: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    pub n_experts: usize,
    /// `selections[t]` holds one entry per prototype group, in group order.
    pub selections: Vec<Vec<Selection>>,
    /// Tokens accepted by each expert after capacity limits.
    pub load: Vec<usize>,
    pub capacity: usize,
}

impl Routing {
    pub fn tokens(&self) -> usize {
        self.selections.len()
    }

    /// Row-major `[tokens × n_experts]` mask of kept (selected, not dropped)
    /// assignments.
    pub fn kept_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.tokens() * self.n_experts];
        for (t, sel) in self.selections.iter().enumerate() {
            for s in sel.iter().filter(|s| !s.dropped) {
                m[t * self.n_experts + s.expert] = true;
            }
        }
        m
    }

    /// Tokens routed to `expert` (not dropped), ascending.
    pub fn tokens_for(&self, expert: usize) -> Vec<usize> {
        self.selections
            .iter()
            .enumerate()
            .filter(|(_, sel)| sel.iter().any(|s| s.expert == expert && !s.dropped))
            .map(|(t, _)| t)
            .collect()
    }

    pub fn dropped(&self) -> usize {
        self.selections
            .iter()
            .flatten()
            .filter(|s| s.dropped)
            .count()
    }
}

/// Routes every token to its top-1 expert in each prototype group. Ties go
/// to the lowest expert index. Tokens are admitted in index order until an
/// expert reaches capacity; later tokens are dropped from that expert. Combine
/// weights are the softmax of the kept selections' gate logits.
pub fn dispatch(gating_logits: &Tensor, moe: &MoeConfig) -> Result<Routing> {
    moe.validate()?;
    let e = moe.n_experts;
    if gating_logits.cols() != e {
        return Err(Error::Dimension(format!(
            "gate logits have {} columns for {} experts",
            gating_logits.cols(),
            e
        )));
    }
    let tokens = gating_logits.rows();
    let group = moe.group_size();
    let capacity = moe.capacity(tokens);
    let mut load = vec![0usize; e];
    let mut selections = Vec::with_capacity(tokens);
    for row in gating_logits.data().chunks(e) {
        let mut sel = Vec::with_capacity(moe.n_prototypes);
        for g in 0..moe.n_prototypes {
            let mut best = g * group;
            for j in g * group + 1..(g + 1) * group {
                if row[j] > row[best] {
                    best = j;
                }
            }
            let dropped = load[best] >= capacity;
            if !dropped {
                load[best] += 1;
            }
            sel.push(Selection {
                expert: best,
                dropped,
                weight: 0.0,
            });
        }
        let max = sel
            .iter()
            .filter(|s| !s.dropped)
            .map(|s| row[s.expert])
            .fold(f32::NEG_INFINITY, f32::max);
        if max > f32::NEG_INFINITY {
            let mut sum = 0.0f32;
            for s in sel.iter_mut().filter(|s| !s.dropped) {
                s.weight = (row[s.expert] - max).exp();
                sum += s.weight;
            }
            for s in sel.iter_mut().filter(|s| !s.dropped) {
                s.weight /= sum;
            }
        }
        selections.push(sel);
    }
    Ok(Routing {
        n_experts: e,
        selections,
        load,
        capacity,
    })
}
