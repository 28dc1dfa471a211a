//! The personalization pipeline: penalized finetune, tolerated prune,
//! mix pruned entries back in from the generic model, finetune again.
//! Also the plain-finetuning baseline it is compared against.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{CropError, Result};
use crate::metrics::MetricKind;
use crate::nn::{train, train_with_validation, validation_split, EpochRecord, ModelParams, Regularizer, TrainConfig};
use crate::pruning::{tolerated_prune, Mask, PruneConfig};

pub const MAX_ITERATIVE_PASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    /// Penalized finetune of the generic model. Its seed and validation
    /// fraction also fix the train/validation split used by every step.
    pub train_initial: TrainConfig,
    pub prune: PruneConfig,
    pub train_final: TrainConfig,
    /// 1 = one-shot. More passes repeat prune, mix, finetune on the result.
    pub iterative_passes: usize,
    pub keep_stages: bool,
    /// Metric the prune tolerance is measured in.
    pub metric: MetricKind,
}

impl Default for CropConfig {
    fn default() -> Self {
        let penalized = TrainConfig {
            alpha: 1e-3,
            regularizer: Regularizer::L1,
            ..TrainConfig::default()
        };
        CropConfig {
            train_initial: penalized.clone(),
            prune: PruneConfig::default(),
            train_final: penalized,
            iterative_passes: 1,
            keep_stages: true,
            metric: MetricKind::Accuracy,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        self.train_initial.validate()?;
        self.train_final.validate()?;
        self.prune.validate()?;
        if !(1..=MAX_ITERATIVE_PASSES).contains(&self.iterative_passes) {
            return Err(CropError::usage(format!(
                "iterative_passes must lie in [1, {MAX_ITERATIVE_PASSES}]"
            )));
        }
        Ok(())
    }
}

/// Model snapshots after each step of the last pass.
#[derive(Debug, Clone)]
pub struct Stages {
    pub generic: ModelParams,
    pub finetuned: ModelParams,
    pub pruned: ModelParams,
    pub mixed: ModelParams,
    pub final_model: ModelParams,
}

#[derive(Debug, Clone)]
pub struct PassSummary {
    pub prune_fraction: f64,
    /// Epoch picked by model selection; 0 means the mixed model itself.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct CropResult {
    pub final_model: ModelParams,
    pub stages: Option<Stages>,
    /// Mask of the last pass.
    pub mask: Mask,
    pub prune_fraction: f64,
    pub initial_history: Vec<EpochRecord>,
    pub passes: Vec<PassSummary>,
}

/// Takes pruned weights where `mask` keeps them and generic weights where
/// it does not. Biases come from `pruned`.
pub fn mix(pruned: &ModelParams, generic: &ModelParams, mask: &Mask) -> Result<ModelParams> {
    pruned.ensure_compatible(generic)?;
    mask.ensure_congruent(pruned)?;
    let mut out = pruned.clone();
    for ((layer, g), m) in out
        .layers_mut()
        .iter_mut()
        .zip(generic.layers())
        .zip(mask.layers())
    {
        for ((w, gw), keep) in layer.weights.iter_mut().zip(&g.weights).zip(m) {
            if !keep {
                *w = *gw;
            }
        }
    }
    Ok(out)
}

/// Plain finetuning of the generic model: the given schedule with the
/// penalty switched off, best validation snapshot returned.
pub fn conventional_finetune(
    generic: &ModelParams,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    Ok(train(generic, data, &cfg.unregularized(), None)?.best)
}

/// Runs the full pipeline on one user's available-context data.
pub fn crop_personalize(
    generic: &ModelParams,
    data_available: &LabeledDataset,
    cfg: &CropConfig,
) -> Result<CropResult> {
    cfg.validate()?;
    if data_available.is_empty() {
        return Err(CropError::usage("no available-context data to personalize on"));
    }
    let (train_set, val_set) = validation_split(data_available, &cfg.train_initial)?;

    let initial = train_with_validation(generic, &train_set, &val_set, &cfg.train_initial, None)?;
    let finetuned = initial.best;

    let mut current = finetuned.clone();
    let mut passes = Vec::with_capacity(cfg.iterative_passes);
    let mut last = None;
    for _ in 0..cfg.iterative_passes {
        let pruned = tolerated_prune(&current, &cfg.prune, &val_set, cfg.metric)?;
        let mixed = mix(&pruned.pruned, generic, &pruned.mask)?;
        let freeze = cfg.train_final.partial_finetune.then_some(&pruned.mask);
        let refined = train_with_validation(&mixed, &train_set, &val_set, &cfg.train_final, freeze)?;
        log::debug!(
            "pass {}: pruned {:.3} of weights, best epoch {}",
            passes.len() + 1,
            pruned.fraction,
            refined.best_epoch
        );
        passes.push(PassSummary {
            prune_fraction: pruned.fraction,
            best_epoch: refined.best_epoch,
            history: refined.history,
        });
        current = refined.best;
        last = Some((pruned.pruned, pruned.mask, mixed));
    }
    let (pruned, mask, mixed) = last.expect("at least one pass");

    let stages = cfg.keep_stages.then(|| Stages {
        generic: generic.clone(),
        finetuned,
        pruned,
        mixed,
        final_model: current.clone(),
    });
    Ok(CropResult {
        final_model: current,
        stages,
        prune_fraction: mask.prune_fraction(),
        mask,
        initial_history: initial.history,
        passes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::mask_of;

    #[test]
    fn all_ones_mask_returns_pruned() {
        let p = ModelParams::init(&[3, 5, 2], 1).unwrap();
        let g = ModelParams::init(&[3, 5, 2], 2).unwrap();
        assert_eq!(mix(&p, &g, &Mask::ones_like(&p)).unwrap(), p);
    }

    #[test]
    fn all_zeros_mask_returns_generic_weights() {
        let p = ModelParams::init(&[3, 5, 2], 1).unwrap();
        let g = ModelParams::init(&[3, 5, 2], 2).unwrap();
        let out = mix(&p, &g, &Mask::zeros_like(&p)).unwrap();
        for (o, (gl, pl)) in out.layers().iter().zip(g.layers().iter().zip(p.layers())) {
            assert_eq!(o.weights, gl.weights);
            assert_eq!(o.bias, pl.bias);
        }
    }

    #[test]
    fn mix_rejects_incompatible_models() {
        let p = ModelParams::init(&[3, 5, 2], 1).unwrap();
        let g = ModelParams::init(&[3, 4, 2], 2).unwrap();
        assert!(matches!(
            mix(&p, &g, &Mask::ones_like(&p)),
            Err(CropError::Structural(_))
        ));
    }

    #[test]
    fn mixing_a_dense_generic_restores_density() {
        let p = ModelParams::init(&[3, 5, 2], 1).unwrap();
        let g = ModelParams::init(&[3, 5, 2], 2).unwrap();
        let (pruned, mask) = crate::pruning::prune(&p, 0.5, Default::default(), None).unwrap();
        let mixed = mix(&pruned, &g, &mask).unwrap();
        assert_eq!(mask_of(&mixed), Mask::ones_like(&p));
    }

    #[test]
    fn too_many_passes_is_rejected() {
        let cfg = CropConfig {
            iterative_passes: 11,
            ..CropConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
