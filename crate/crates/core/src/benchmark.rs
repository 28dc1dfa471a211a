//! End-to-end synthetic benchmark: generate users in several contexts,
//! train a generic model, personalize each held-out user on one context
//! with both plain finetuning and the pruning pipeline, and score every
//! model state on every context.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{context_id, split, split_users, ContextTransform, LabeledDataset, StratifyBy, SyntheticSpec};
use crate::diagnostics::gip;
use crate::error::{CropError, Result};
use crate::metrics::{evaluate, EvalReport, MetricKind, STATE_CONVENTIONAL, STATE_CROP, STATE_GENERIC};
use crate::nn::{train_with_validation, ModelParams, Regularizer, TrainConfig, TrainOutcome};
use crate::pipeline::{conventional_finetune, crop_personalize, CropConfig};
use crate::pruning::PruneConfig;

pub const STATE_FINETUNED: &str = "finetuned";
pub const STATE_PRUNED: &str = "pruned";
pub const STATE_MIXED: &str = "mixed";

/// Trains a generic model on `data` with a person-disjoint validation
/// split (`cfg.validation_fraction` of the users).
pub fn train_generic(
    data: &LabeledDataset,
    layer_dims: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CropError::usage("no generic training data"));
    }
    if data.users().len() < 2 {
        return Err(CropError::usage(
            "person-disjoint validation needs at least two generic users",
        ));
    }
    let init = ModelParams::init(layer_dims, cfg.seed)?;
    let parts = split_users(data, &[1.0 - cfg.validation_fraction, cfg.validation_fraction], cfg.seed)?;
    train_with_validation(&init, &parts[0], &parts[1], cfg, None)
}

/// Held-out evaluation data for one personalization user.
#[derive(Debug, Clone)]
pub struct UserSplit {
    pub user: String,
    /// Available-context rows the personalization methods may see.
    pub pool: LabeledDataset,
    /// Context id -> test rows. The available context uses rows disjoint
    /// from `pool`; unseen contexts use every row the user has there.
    pub test: BTreeMap<String, LabeledDataset>,
}

/// Splits one user's rows into a personalization pool and per-context
/// test sets.
pub fn user_split(
    data: &LabeledDataset,
    user: &str,
    available: &str,
    unseen: &[String],
    test_fraction: f64,
    seed: u64,
) -> Result<UserSplit> {
    let mine = data.for_user(user);
    let avail = mine.for_context(available);
    if avail.is_empty() {
        return Err(CropError::usage(format!("user {user} has no rows in context {available}")));
    }
    let mut parts = split(&avail, &[1.0 - test_fraction, test_fraction], StratifyBy::Label, seed)?;
    let avail_test = parts.pop().expect("two parts");
    let pool = parts.pop().expect("two parts");
    let mut test = BTreeMap::new();
    test.insert(available.to_string(), avail_test);
    for ctx in unseen {
        let rows = mine.for_context(ctx);
        if rows.is_empty() {
            return Err(CropError::usage(format!("user {user} has no rows in context {ctx}")));
        }
        test.insert(ctx.clone(), rows);
    }
    Ok(UserSplit {
        user: user.to_string(),
        pool,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub data: SyntheticSpec,
    pub hidden: Vec<usize>,
    pub generic_train: TrainConfig,
    pub conventional: TrainConfig,
    pub crop: CropConfig,
    pub available_context: usize,
    pub test_fraction: f64,
    pub metric: MetricKind,
    /// Compute per-stage gradient inner products (costs one gradient per
    /// stage and context).
    pub diagnostics: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let data = SyntheticSpec {
            num_generic_users: 16,
            num_personal_users: 4,
            num_classes: 4,
            num_features: 8,
            class_spread: 1.5,
            user_jitter: 0.9,
            contexts: vec![
                ContextTransform {
                    angle: 0.0,
                    bias_scale: 0.0,
                },
                ContextTransform {
                    angle: 2.5,
                    bias_scale: 0.5,
                },
            ],
            noise_sigma: 0.6,
            samples_per_cell: 40,
            seed: 0,
        };
        let personal = TrainConfig {
            learning_rate: 0.05,
            epochs: 40,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let penalized = TrainConfig {
            alpha: 0.03,
            regularizer: Regularizer::L1,
            ..personal.clone()
        };
        BenchmarkConfig {
            data,
            hidden: vec![64, 64],
            generic_train: TrainConfig {
                learning_rate: 0.02,
                epochs: 60,
                batch_size: 16,
                ..TrainConfig::default()
            },
            conventional: personal,
            crop: CropConfig {
                train_initial: penalized.clone(),
                prune: PruneConfig::default(),
                train_final: penalized,
                iterative_passes: 1,
                keep_stages: true,
                metric: MetricKind::Accuracy,
            },
            available_context: 0,
            test_fraction: 0.4,
            metric: MetricKind::Accuracy,
            diagnostics: true,
        }
    }
}

impl BenchmarkConfig {
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.data.num_features)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.data.num_classes))
            .collect()
    }

    /// Copy with every seed (data, init, shuffling, splits) derived from `seed`.
    pub fn seeded(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.data.seed = seed;
        cfg.generic_train.seed = seed.wrapping_mul(31).wrapping_add(1);
        cfg.conventional.seed = seed.wrapping_mul(31).wrapping_add(2);
        cfg.crop.train_initial.seed = cfg.conventional.seed;
        cfg.crop.train_final.seed = seed.wrapping_mul(31).wrapping_add(3);
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct UserOutcome {
    pub user: String,
    pub prune_fraction: f64,
    pub mixed_selected: bool,
    /// Stage name -> gradient inner product over {available, unseen...}.
    pub gip: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub seed: u64,
    /// States: generic, conventional, finetuned, pruned, mixed, crop.
    pub report: EvalReport,
    pub users: Vec<UserOutcome>,
    pub available: String,
    pub unseen: Vec<String>,
}

impl BenchmarkOutcome {
    /// Mean over users of the metric for `state` on `context`.
    pub fn mean(&self, state: &str, context: &str) -> f64 {
        let vals: Vec<f64> = self
            .report
            .rows
            .iter()
            .filter(|r| r.state == state && r.context == context)
            .map(|r| r.value)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    /// Mean over users of the metric summed over unseen contexts.
    pub fn mean_unseen(&self, state: &str) -> f64 {
        self.unseen.iter().map(|c| self.mean(state, c)).sum()
    }

    pub fn delta_p(&self) -> Result<f64> {
        Ok(self
            .report
            .delta_for_seed(self.seed, STATE_CROP, STATE_GENERIC)?
            .map_or(f64::NAN, |d| d.mean))
    }

    pub fn delta_g(&self) -> Result<f64> {
        Ok(self
            .report
            .delta_for_seed(self.seed, STATE_CROP, STATE_CONVENTIONAL)?
            .map_or(f64::NAN, |d| d.mean))
    }

    pub fn mean_gip(&self, stage: &str) -> f64 {
        let vals: Vec<f64> = self.users.iter().filter_map(|u| u.gip.get(stage)).copied().collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Runs the benchmark for one seed. Users are processed in parallel; the
/// result does not depend on scheduling.
pub fn run_benchmark(base: &BenchmarkConfig, seed: u64) -> Result<BenchmarkOutcome> {
    let cfg = base.seeded(seed);
    let (data, world) = cfg.data.generate_with_world()?;
    let n_ctx = cfg.data.contexts.len();
    if cfg.available_context >= n_ctx {
        return Err(CropError::usage("available_context out of range"));
    }
    let available = context_id(cfg.available_context);
    let unseen: Vec<String> = (0..n_ctx)
        .filter(|&c| c != cfg.available_context)
        .map(context_id)
        .collect();

    let generic_users: BTreeSet<String> = world.generic_users.iter().cloned().collect();
    let generic = train_generic(&data.for_users(&generic_users), &cfg.layer_dims(), &cfg.generic_train)?.best;

    let outcomes = world
        .personal_users
        .par_iter()
        .map(|user| personalize_user(&cfg, &data, &generic, user, &available, &unseen, seed))
        .collect::<Result<Vec<_>>>()?;

    let mut report = EvalReport::new(cfg.metric);
    let mut users = Vec::new();
    for (rows, outcome) in outcomes {
        for (state, ctx, value) in rows {
            report.push(&outcome.user, seed, &state, &ctx, value);
        }
        users.push(outcome);
    }
    Ok(BenchmarkOutcome {
        seed,
        report,
        users,
        available,
        unseen,
    })
}

type StateRows = Vec<(String, String, f64)>;

fn personalize_user(
    cfg: &BenchmarkConfig,
    data: &LabeledDataset,
    generic: &ModelParams,
    user: &str,
    available: &str,
    unseen: &[String],
    seed: u64,
) -> Result<(StateRows, UserOutcome)> {
    let split = user_split(data, user, available, unseen, cfg.test_fraction, seed ^ 0xa5a5)?;
    let conventional = conventional_finetune(generic, &split.pool, &cfg.conventional)?;
    let crop = crop_personalize(generic, &split.pool, &cfg.crop)?;
    let stages = crop.stages.as_ref().expect("benchmark keeps stages");

    let states: [(&str, &ModelParams); 6] = [
        (STATE_GENERIC, generic),
        (STATE_CONVENTIONAL, &conventional),
        (STATE_FINETUNED, &stages.finetuned),
        (STATE_PRUNED, &stages.pruned),
        (STATE_MIXED, &stages.mixed),
        (STATE_CROP, &crop.final_model),
    ];
    let mut rows = Vec::new();
    for (state, model) in states {
        for (ctx, test) in &split.test {
            rows.push((state.to_string(), ctx.clone(), evaluate(model, test, cfg.metric)?));
        }
    }

    let mut gips = BTreeMap::new();
    if cfg.diagnostics {
        let domains: Vec<&LabeledDataset> = split.test.values().collect();
        for (state, model) in states {
            gips.insert(state.to_string(), gip(model, &domains)?);
        }
    }
    Ok((
        rows,
        UserOutcome {
            user: user.to_string(),
            prune_fraction: crop.prune_fraction,
            mixed_selected: crop.passes.last().is_some_and(|p| p.best_epoch == 0),
            gip: gips,
        },
    ))
}
