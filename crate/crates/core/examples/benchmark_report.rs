//! Runs the synthetic benchmark over a few seeds and prints the per-state
//! accuracies, delta scores and gradient inner products.
//!
//! Overrides: `SEEDS=1,2,3`, plus numeric knobs read from the environment
//! (`ANGLE`, `LR`, `EPOCHS`, `FINAL_EPOCHS`, `ALPHA`, `TAU`, `JITTER`,
//! `NOISE`, `SAMPLES`, `BIAS`) and `STRATEGY`.

use std::env;
use std::time::Instant;

use crop_core::benchmark::{run_benchmark, BenchmarkConfig, STATE_FINETUNED, STATE_MIXED, STATE_PRUNED};
use crop_core::metrics::{STATE_CONVENTIONAL, STATE_CROP, STATE_GENERIC};
use crop_core::pruning::PruneStrategy;

fn knob(name: &str) -> Option<f64> {
    env::var(name).ok().and_then(|v| v.parse().ok())
}

fn main() -> crop_core::Result<()> {
    let mut cfg = BenchmarkConfig::default();
    if let Some(v) = knob("ANGLE") {
        cfg.data.contexts[1].angle = v;
    }
    if let Some(v) = knob("BIAS") {
        cfg.data.contexts[1].bias_scale = v;
    }
    if let Some(v) = knob("JITTER") {
        cfg.data.user_jitter = v;
    }
    if let Some(v) = knob("NOISE") {
        cfg.data.noise_sigma = v;
    }
    if let Some(v) = knob("SAMPLES") {
        cfg.data.samples_per_cell = v as usize;
    }
    if let Some(v) = knob("LR") {
        cfg.conventional.learning_rate = v;
        cfg.crop.train_initial.learning_rate = v;
        cfg.crop.train_final.learning_rate = v;
    }
    if let Some(v) = knob("EPOCHS") {
        cfg.conventional.epochs = v as usize;
        cfg.crop.train_initial.epochs = v as usize;
    }
    if let Some(v) = knob("FINAL_EPOCHS") {
        cfg.crop.train_final.epochs = v as usize;
    }
    if let Some(v) = knob("ALPHA") {
        cfg.crop.train_initial.alpha = v;
        cfg.crop.train_final.alpha = v;
    }
    if let Some(v) = knob("K") {
        cfg.crop.prune.k = v;
        cfg.crop.prune.k_step = v;
    }
    if let Some(v) = knob("TESTFRAC") {
        cfg.test_fraction = v;
    }
    if let Some(v) = knob("BATCH") {
        cfg.conventional.batch_size = v as usize;
        cfg.crop.train_initial.batch_size = v as usize;
        cfg.crop.train_final.batch_size = v as usize;
    }
    if let Some(v) = knob("GEN_EPOCHS") {
        cfg.generic_train.epochs = v as usize;
    }
    if let Some(v) = knob("HIDDEN") {
        cfg.hidden = vec![v as usize, v as usize];
    }
    if let Some(v) = knob("SPREAD") {
        cfg.data.class_spread = v;
    }
    if let Some(v) = knob("CLASSES") {
        cfg.data.num_classes = v as usize;
    }
    if let Some(v) = knob("DIM") {
        cfg.data.num_features = v as usize;
    }
    if let Some(v) = knob("TAU") {
        cfg.crop.prune.tau = v;
    }
    if let Ok(v) = env::var("STRATEGY") {
        cfg.crop.prune.strategy = match v.as_str() {
            "magnitude_top" => PruneStrategy::MagnitudeTop,
            "gradient_low" => PruneStrategy::GradientLow,
            _ => PruneStrategy::MagnitudeLow,
        };
    }
    let seeds: Vec<u64> = env::var("SEEDS")
        .unwrap_or_else(|_| "1,2,3".into())
        .split(',')
        .map(|s| s.trim().parse().expect("seed"))
        .collect();

    let states = [
        STATE_GENERIC,
        STATE_CONVENTIONAL,
        STATE_FINETUNED,
        STATE_PRUNED,
        STATE_MIXED,
        STATE_CROP,
    ];
    let quiet = env::var("QUIET").is_ok();
    let mut sums = [0.0; 14];
    let n = seeds.len() as f64;
    for seed in seeds {
        let start = Instant::now();
        let out = run_benchmark(&cfg, seed)?;
        let row = [
            out.mean(STATE_GENERIC, &out.available),
            out.mean_unseen(STATE_GENERIC),
            out.mean(STATE_CONVENTIONAL, &out.available),
            out.mean_unseen(STATE_CONVENTIONAL),
            out.mean(STATE_FINETUNED, &out.available),
            out.mean_unseen(STATE_FINETUNED),
            out.mean(STATE_MIXED, &out.available),
            out.mean_unseen(STATE_MIXED),
            out.mean(STATE_CROP, &out.available),
            out.mean_unseen(STATE_CROP),
            out.delta_p()? / 100.0,
            out.delta_g()? / 100.0,
            out.mean_gip(STATE_FINETUNED) / 100.0,
            out.mean_gip(STATE_PRUNED) / 100.0,
        ];
        sums.iter_mut().zip(row).for_each(|(s, v)| *s += 100.0 * v / n);
        if quiet {
            continue;
        }
        println!("seed {seed} ({:.1}s)", start.elapsed().as_secs_f64());
        for state in states {
            println!(
                "  {state:<13} Ca {:6.2}  Cu {:6.2}  gip {:10.4}",
                100.0 * out.mean(state, &out.available),
                100.0 * out.mean_unseen(state),
                out.mean_gip(state)
            );
        }
        let fractions: Vec<String> = out.users.iter().map(|u| format!("{:.2}", u.prune_fraction)).collect();
        let mixed = out.users.iter().filter(|u| u.mixed_selected).count();
        println!(
            "  delta_p {:+.2}  delta_g {:+.2}  prune [{}]  mixed picked {mixed}/{}",
            out.delta_p()?,
            out.delta_g()?,
            fractions.join(" "),
            out.users.len()
        );
    }
    println!(
        "MEAN gen {:.1}/{:.1} conv {:.1}/{:.1} fin {:.1}/{:.1} mix {:.1}/{:.1} crop {:.1}/{:.1} dP {:+.2} dG {:+.2} gip fin {:.3} pruned {:.3}",
        sums[0], sums[1], sums[2], sums[3], sums[4], sums[5], sums[6], sums[7], sums[8], sums[9], sums[10], sums[11], sums[12], sums[13]
    );
    Ok(())
}
