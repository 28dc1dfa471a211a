use std::collections::BTreeSet;

use crop_core::benchmark::{train_generic, user_split, BenchmarkConfig};
use crop_core::data::{LabeledDataset, SyntheticWorld};
use crop_core::metrics::{evaluate, MetricKind};
use crop_core::nn::ModelParams;
use crop_core::pipeline::{conventional_finetune, crop_personalize, mix, CropConfig};
use crop_core::pruning::{Mask, PruneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    cfg: BenchmarkConfig,
    data: LabeledDataset,
    world: SyntheticWorld,
    generic: ModelParams,
}

fn fixture(seed: u64) -> Fixture {
    let mut cfg = BenchmarkConfig::default().seeded(seed);
    cfg.data.num_generic_users = 8;
    cfg.data.num_personal_users = 2;
    cfg.hidden = vec![32, 32];
    cfg.generic_train.epochs = 30;
    for t in [&mut cfg.conventional, &mut cfg.crop.train_initial, &mut cfg.crop.train_final] {
        t.epochs = 25;
    }
    let (data, world) = cfg.data.generate_with_world().unwrap();
    let generic_users: BTreeSet<String> = world.generic_users.iter().cloned().collect();
    let generic = train_generic(&data.for_users(&generic_users), &cfg.layer_dims(), &cfg.generic_train)
        .unwrap()
        .best;
    Fixture {
        cfg,
        data,
        world,
        generic,
    }
}

#[test]
fn mixing_takes_each_entry_from_exactly_one_source() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..100 {
        let dims = [rng.gen_range(1..6), rng.gen_range(1..8), rng.gen_range(2..5)];
        let pruned = ModelParams::init(&dims, trial).unwrap();
        let generic = ModelParams::init(&dims, 10_000 + trial).unwrap();
        let bits: Vec<bool> = (0..pruned.num_weights()).map(|_| rng.gen_bool(0.5)).collect();
        let mask = Mask::from_flat(&pruned, &bits).unwrap();
        let out = mix(&pruned, &generic, &mask).unwrap();
        for (l, layer) in out.layers().iter().enumerate() {
            for (i, w) in layer.weights.iter().enumerate() {
                let src = if mask.layers()[l][i] { &pruned } else { &generic };
                assert_eq!(w.to_bits(), src.layers()[l].weights[i].to_bits());
            }
            assert_eq!(layer.bias, pruned.layers()[l].bias);
        }
    }
}

#[test]
fn conventional_finetuning_helps_the_available_context() {
    let fx = fixture(1);
    let mut gain = 0.0;
    for user in &fx.world.personal_users {
        let split = user_split(&fx.data, user, "c0", &["c1".to_string()], 0.4, 1).unwrap();
        let tuned = conventional_finetune(&fx.generic, &split.pool, &fx.cfg.conventional).unwrap();
        let test = &split.test["c0"];
        gain += evaluate(&tuned, test, MetricKind::Accuracy).unwrap()
            - evaluate(&fx.generic, test, MetricKind::Accuracy).unwrap();
    }
    assert!(gain > 0.0, "{gain}");
}

#[test]
fn full_tolerance_mixes_in_the_whole_generic_model() {
    let fx = fixture(2);
    let user = &fx.world.personal_users[0];
    let pool = fx.data.for_user(user).for_context("c0");
    let cfg = CropConfig {
        prune: PruneConfig {
            tau: 1.0,
            ..PruneConfig::default()
        },
        ..fx.cfg.crop.clone()
    };
    let res = crop_personalize(&fx.generic, &pool, &cfg).unwrap();
    assert_eq!(res.prune_fraction, 1.0);
    let stages = res.stages.unwrap();
    for (m, g) in stages.mixed.layers().iter().zip(fx.generic.layers()) {
        assert_eq!(m.weights, g.weights);
    }
}

#[test]
fn vanishing_tolerance_degenerates_to_double_finetune() {
    // a one-point grid at p = 0.95 is never within tolerance, so nothing is
    // pruned and the mixed model is the finetuned model itself
    let fx = fixture(3);
    let user = &fx.world.personal_users[0];
    let pool = fx.data.for_user(user).for_context("c0");
    let cfg = CropConfig {
        prune: PruneConfig {
            tau: 1e-9,
            k: 0.95,
            k_step: 0.5,
            ..PruneConfig::default()
        },
        ..fx.cfg.crop.clone()
    };
    let res = crop_personalize(&fx.generic, &pool, &cfg).unwrap();
    assert_eq!(res.prune_fraction, 0.0);
    assert_eq!(res.mask.pruned_count(), 0);
    let stages = res.stages.unwrap();
    assert_eq!(stages.mixed, stages.finetuned);
    assert_eq!(stages.pruned, stages.finetuned);
}

#[test]
fn personalizing_on_generic_data_does_not_hurt_it() {
    // control: a generic-population user in the generic training context
    let fx = fixture(4);
    let user = &fx.world.generic_users[0];
    let split = user_split(&fx.data, user, "c0", &[], 0.4, 4).unwrap();
    let res = crop_personalize(&fx.generic, &split.pool, &fx.cfg.crop).unwrap();
    let test = &split.test["c0"];
    let before = evaluate(&fx.generic, test, MetricKind::Accuracy).unwrap();
    let after = evaluate(&res.final_model, test, MetricKind::Accuracy).unwrap();
    assert!(after >= before - 0.05, "{before} -> {after}");
}

#[test]
fn personalization_reads_only_the_available_context() {
    let fx = fixture(5);
    let (full, log) = fx.data.clone().instrumented();
    let user = fx.world.personal_users[1].clone();
    let pool = full.for_user(&user).for_context("c0");
    log.clear();
    conventional_finetune(&fx.generic, &pool, &fx.cfg.conventional).unwrap();
    crop_personalize(&fx.generic, &pool, &fx.cfg.crop).unwrap();
    let expected: BTreeSet<(String, String)> = [(user, "c0".to_string())].into();
    assert_eq!(log.pairs(), expected);
    assert_eq!(log.contexts(), ["c0".to_string()].into());
}

#[test]
fn pipeline_is_deterministic() {
    let fx = fixture(6);
    let pool = fx.data.for_user(&fx.world.personal_users[0]).for_context("c0");
    let a = crop_personalize(&fx.generic, &pool, &fx.cfg.crop).unwrap();
    let b = crop_personalize(&fx.generic, &pool, &fx.cfg.crop).unwrap();
    assert_eq!(a.final_model, b.final_model);
    assert_eq!(a.mask, b.mask);
    assert_eq!(a.passes.len(), b.passes.len());
}

#[test]
fn iterative_passes_stay_close_to_one_shot() {
    let fx = fixture(7);
    let mut one = 0.0;
    let mut three = 0.0;
    let users = &fx.world.personal_users;
    for user in users {
        let split = user_split(&fx.data, user, "c0", &["c1".to_string()], 0.4, 7).unwrap();
        let single = crop_personalize(&fx.generic, &split.pool, &fx.cfg.crop).unwrap();
        let cfg = CropConfig {
            iterative_passes: 3,
            ..fx.cfg.crop.clone()
        };
        let multi = crop_personalize(&fx.generic, &split.pool, &cfg).unwrap();
        assert_eq!(multi.passes.len(), 3);
        for ctx in ["c0", "c1"] {
            one += evaluate(&single.final_model, &split.test[ctx], MetricKind::Accuracy).unwrap();
            three += evaluate(&multi.final_model, &split.test[ctx], MetricKind::Accuracy).unwrap();
        }
    }
    let diff = 100.0 * (one - three).abs() / (2 * users.len()) as f64;
    assert!(diff < 5.0, "{diff} points apart");
}

#[test]
fn empty_pool_is_a_usage_error() {
    let fx = fixture(8);
    let empty = fx.data.filter(|_| false);
    assert!(matches!(
        crop_personalize(&fx.generic, &empty, &fx.cfg.crop),
        Err(crop_core::CropError::Usage(_))
    ));
}
