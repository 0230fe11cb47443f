mod common;

use common::planner::{brute_force, calibrated, coeffs, cost, placement_from_mask};
use common::rng;
use p2r::error::Error;
use p2r::model::Model;
use p2r::offload::{plan_offload, predict_step_time, simulate_step, ByteProfile, Phase, Tier, TieredStore};
use p2r::optim::{AdamW, AdamWConfig, CosineSchedule};
use p2r::train::{Trainer, VirtualClock};
use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rand::Rng;

#[test]
fn planner_matches_exhaustive_search() {
    let mut r = rng(21);
    for case in 0..300 {
        let n = r.gen_range(1..=12);
        let classes = r.gen_range(1..=3);
        let sizes: Vec<u64> = (0..classes).map(|_| r.gen_range(1..50) * 1000).collect();
        let profile = ByteProfile::from_sizes((0..n).map(|_| sizes[r.gen_range(0..classes)]).collect());
        let budget = r.gen_range(0..=profile.total_residency() + 1000);
        let c = cost([1e5, 1e6, 1e8][case % 3]);
        match (plan_offload(&profile, budget, &c, &coeffs()), brute_force(&profile, budget, &c)) {
            (Ok(plan), Some((placement, t))) => {
                assert_eq!(plan.placement, placement, "case {case}");
                assert!((plan.step_time_s - t).abs() <= 1e-9 * t);
            }
            (Err(Error::Capacity(_)), None) => {}
            (got, want) => panic!("case {case}: planner {got:?}, exhaustive {want:?}"),
        }
    }
}

#[test]
fn uniform_48_layers_half_budget_offloads_first_24() {
    let profile = ByteProfile::uniform(48, 1_000_000);
    let budget = profile.total_residency() / 2;
    let plan = plan_offload(&profile, budget, &cost(1e9), &coeffs()).unwrap();
    assert_eq!(plan.slow_layers(), (0..24).collect::<Vec<_>>());
}

#[test]
fn budget_below_one_layer_is_capacity_error() {
    let profile = ByteProfile::uniform(4, 1000);
    assert!(matches!(
        plan_offload(&profile, 3999, &cost(1e9), &coeffs()),
        Err(Error::Capacity(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plans_fit_the_budget_and_improve_with_it(
        sizes in proptest::collection::vec(1u64..5, 1..16),
        frac in 0.0f64..1.0,
    ) {
        let profile = ByteProfile::from_sizes(sizes.iter().map(|s| s * 4096).collect());
        let total = profile.total_residency();
        let budget = (frac * total as f64) as u64;
        let c = cost(1e7);
        if let Ok(plan) = plan_offload(&profile, budget, &c, &coeffs()) {
            prop_assert!(plan.resident_bytes <= budget);
            let bigger = plan_offload(&profile, budget + total / 8, &c, &coeffs()).unwrap();
            prop_assert!(bigger.step_time_s <= plan.step_time_s);
            prop_assert!(bigger.movement_bytes <= plan.movement_bytes);
            // The chosen placement is accepted by the runtime store.
            let store = TieredStore::new(profile.clone(), plan.placement.clone(), budget, coeffs());
            prop_assert!(store.is_ok());
        }
    }

    #[test]
    fn movement_is_additive_over_layers(
        sizes in proptest::collection::vec(1u64..100, 1..20),
        mask in 0u32..(1 << 20),
    ) {
        let n = sizes.len();
        let profile = ByteProfile::from_sizes(sizes.clone());
        let placement = placement_from_mask(n, mask);
        let report = simulate_step(&profile, &placement, &coeffs()).unwrap();
        let w: u64 = (0..n).filter(|&i| placement[i] == Tier::Slow).map(|i| sizes[i]).sum();
        prop_assert_eq!(report.total(), 4 * w);
        for p in Phase::ALL {
            prop_assert_eq!(report.phase(p), w);
        }
        for i in 0..n {
            let alone = placement_from_mask(n, if placement[i] == Tier::Slow { 1 << i } else { 0 });
            let single = simulate_step(&profile, &alone, &coeffs()).unwrap();
            prop_assert_eq!(report.per_layer[i], single.total());
        }
    }
}

#[test]
fn model_layers_move_four_w_when_fully_offloaded() {
    let cfg = common::tiny_config(4, true);
    let model = Model::build(cfg, 0).unwrap();
    let w = model.non_embedding_bytes();
    let profile = ByteProfile::from_model(&model);
    let full = simulate_step(&profile, &[Tier::Slow; 4], &coeffs()).unwrap();
    assert_eq!(full.total(), 4 * w);
    for p in Phase::ALL {
        assert_eq!(full.phase(p), w);
    }
    assert_eq!(simulate_step(&profile, &[Tier::Fast; 4], &coeffs()).unwrap().total(), 0);
}

#[test]
fn training_step_reports_the_simulated_movement() {
    // The hooks fired by a real forward/backward/apply match the simulator.
    let cfg = common::tiny_config(3, false);
    let model = Model::build(cfg.clone(), 1).unwrap();
    let profile = ByteProfile::from_model(&model);
    let placement = vec![Tier::Slow, Tier::Fast, Tier::Slow];
    let budget = profile.residency(1);
    let store = TieredStore::new(profile.clone(), placement.clone(), budget, coeffs()).unwrap();
    let optimizer = AdamW::new(&model, AdamWConfig::default());
    let mut trainer = Trainer {
        model,
        optimizer,
        schedule: CosineSchedule {
            peak_lr: 1e-3,
            warmup_ratio: 0.0,
            total_steps: 10,
            min_lr_ratio: 0.1,
        },
        store,
        clock: VirtualClock {
            device_flops: 1e9,
            link: cost(1e6),
        },
        micro_batch: 2,
        accumulation: 2,
        stage_step: 0,
    };
    let mut r = rng(2);
    let batches: Vec<_> = (0..2).map(|_| common::random_batch(2, cfg.seq_len, cfg.vocab_size, &mut r)).collect();
    let stats = trainer.step_on(&batches).unwrap();
    let once = simulate_step(&profile, &placement, &coeffs()).unwrap();
    let w = profile.layer_param_bytes[0] + profile.layer_param_bytes[2];
    // Forward and backward loads repeat per micro-batch; offload and
    // write-back happen once per step.
    assert_eq!(stats.movement.phase(Phase::ForwardLoad), 2 * w);
    assert_eq!(stats.movement.phase(Phase::BackwardLoad), 2 * w);
    assert_eq!(stats.movement.phase(Phase::GradOffload), 2 * w);
    assert_eq!(stats.movement.phase(Phase::ApplyWriteback), w);
    assert_eq!(once.total(), 4 * w);
}

#[test]
fn calibrated_cost_model_predicts_half_offload() {
    for compute_s in [0.0, 1.0, 5.0] {
        let (profile, c) = calibrated(compute_s);
        let full = predict_step_time(&profile, &[Tier::Slow; 48], &c, &coeffs()).unwrap();
        assert!((full - 89.0).abs() < 1e-9);
        let half: Vec<Tier> = (0..48).map(|i| if i < 24 { Tier::Slow } else { Tier::Fast }).collect();
        let t = predict_step_time(&profile, &half, &c, &coeffs()).unwrap();
        assert!((t - 45.0).abs() <= 4.5, "compute {compute_s}: predicted {t}");
    }
}
