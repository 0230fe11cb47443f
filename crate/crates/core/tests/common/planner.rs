//! Exhaustive planner oracle and the calibrated 48-layer cost model.

use p2r::offload::{predict_step_time, ByteProfile, CostModel, MovementCoefficients, Tier};

pub fn coeffs() -> MovementCoefficients {
    MovementCoefficients::default()
}

pub fn cost(bandwidth: f64) -> CostModel {
    CostModel {
        bandwidth,
        forward_s_per_layer: 0.01,
        backward_s_per_layer: 0.02,
        apply_s_per_layer: 0.002,
        latency_s: 1e-4,
    }
}

pub fn placement_from_mask(n: usize, mask: u32) -> Vec<Tier> {
    (0..n)
        .map(|i| if mask >> i & 1 == 1 { Tier::Slow } else { Tier::Fast })
        .collect()
}

/// Exhaustive search over every placement with the same tie rule: lowest
/// predicted time, then the lexicographically smallest offloaded set.
pub fn brute_force(profile: &ByteProfile, budget: u64, cost: &CostModel) -> Option<(Vec<Tier>, f64)> {
    let n = profile.n_layers();
    let largest = (0..n).map(|i| profile.residency(i)).max().unwrap_or(0);
    if budget < largest {
        return None;
    }
    let mut best: Option<(Vec<Tier>, f64, Vec<usize>)> = None;
    for mask in 0..(1u32 << n) {
        let p = placement_from_mask(n, mask);
        let resident: u64 = (0..n).filter(|&i| p[i] == Tier::Fast).map(|i| profile.residency(i)).sum();
        if resident > budget {
            continue;
        }
        let t = predict_step_time(profile, &p, cost, &coeffs()).unwrap();
        let slow: Vec<usize> = (0..n).filter(|&i| p[i] == Tier::Slow).collect();
        let better = match &best {
            None => true,
            Some((_, bt, bs)) => {
                let scale = t.abs().max(bt.abs());
                if (t - bt).abs() > 1e-12 * scale {
                    t < *bt
                } else {
                    slow < *bs
                }
            }
        };
        if better {
            best = Some((p, t, slow));
        }
    }
    best.map(|(p, t, _)| (p, t))
}

/// 48 layers of a 78B model, 89 s per step fully offloaded. Compute is fixed, bandwidth is fitted.
pub fn calibrated(compute_s: f64) -> (ByteProfile, CostModel) {
    let layer_bytes = (78e9 * 4.0 / 48.0) as u64;
    let profile = ByteProfile::uniform(48, layer_bytes);
    let per_layer = compute_s / 48.0;
    let base = CostModel {
        bandwidth: 1.0,
        forward_s_per_layer: per_layer / 3.0,
        backward_s_per_layer: 2.0 * per_layer / 3.0,
        apply_s_per_layer: 0.0,
        latency_s: 0.0,
    };
    let fitted = base
        .fit_bandwidth(&profile, &[Tier::Slow; 48], &coeffs(), 89.0)
        .unwrap();
    (profile, fitted)
}
