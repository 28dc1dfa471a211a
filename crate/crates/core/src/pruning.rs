//! Unstructured pruning: masks, global score ranking and the
//! tolerance-bounded grid search over prune fractions.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{CropError, Result};
use crate::metrics::{evaluate, MetricKind};
use crate::nn::{cross_entropy_gradient, GradientSet, ModelParams};

/// Slack used when turning a fraction into an entry count, so that grid
/// points like `0.05 + 2 * 0.05` do not lose an entry to rounding.
const COUNT_EPS: f64 = 1e-9;

/// Keep/prune flag per weight entry, congruent with a model's weight
/// matrices. `true` means the weight survived.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    layers: Vec<Vec<bool>>,
}

impl Mask {
    pub fn ones_like(model: &ModelParams) -> Self {
        Mask {
            layers: model
                .layers()
                .iter()
                .map(|l| vec![true; l.weights.len()])
                .collect(),
        }
    }

    pub fn zeros_like(model: &ModelParams) -> Self {
        Mask {
            layers: model
                .layers()
                .iter()
                .map(|l| vec![false; l.weights.len()])
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<Vec<bool>>) -> Self {
        Mask { layers }
    }

    /// Builds a mask from a flat `(layer, row, col)`-ordered bit stream.
    pub fn from_flat(model: &ModelParams, bits: &[bool]) -> Result<Self> {
        if bits.len() != model.num_weights() {
            return Err(CropError::structural(format!(
                "mask has {} entries, model has {} weights",
                bits.len(),
                model.num_weights()
            )));
        }
        let mut offset = 0;
        let layers = model
            .layers()
            .iter()
            .map(|l| {
                let chunk = bits[offset..offset + l.weights.len()].to_vec();
                offset += l.weights.len();
                chunk
            })
            .collect();
        Ok(Mask { layers })
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.layers
    }

    pub fn flat(&self) -> impl Iterator<Item = bool> + '_ {
        self.layers.iter().flat_map(|l| l.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pruned_count(&self) -> usize {
        self.flat().filter(|keep| !keep).count()
    }

    /// Zero entries over total weight entries.
    pub fn prune_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.pruned_count() as f64 / self.len() as f64
    }

    /// Pruned entries of this mask form a subset of the pruned entries of `other`.
    pub fn pruned_subset_of(&self, other: &Mask) -> bool {
        self.flat().zip(other.flat()).all(|(a, b)| a || !b)
    }

    pub fn ensure_congruent(&self, model: &ModelParams) -> Result<()> {
        let ok = self.layers.len() == model.layers().len()
            && self
                .layers
                .iter()
                .zip(model.layers())
                .all(|(m, l)| m.len() == l.weights.len());
        if ok {
            Ok(())
        } else {
            Err(CropError::structural(
                "mask is not congruent with the model's weight matrices",
            ))
        }
    }
}

/// Mask that is 0 exactly where the weight entry is exactly 0.
pub fn mask_of(model: &ModelParams) -> Mask {
    Mask {
        layers: model
            .layers()
            .iter()
            .map(|l| l.weights.iter().map(|w| *w != 0.0).collect())
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneStrategy {
    /// Remove the smallest `|w|` first.
    #[default]
    MagnitudeLow,
    /// Remove the largest `|w|` first.
    MagnitudeTop,
    /// Remove the entries with the smallest `|dL/dw|` first.
    GradientLow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Tolerated absolute drop in the metric (fraction units, 0.05 = 5 points).
    pub tau: f64,
    /// First prune fraction tried.
    pub k: f64,
    /// Increment between grid points.
    pub k_step: f64,
    pub strategy: PruneStrategy,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            tau: 0.05,
            k: 0.05,
            k_step: 0.05,
            strategy: PruneStrategy::MagnitudeLow,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.k) || !open_unit(self.k_step) {
            return Err(CropError::usage("k and k_step must lie in (0, 1)"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(CropError::usage("tau must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Prune fractions visited by the search, `k, k + k_step, ...` up to 1.
    pub fn grid(&self) -> Vec<f64> {
        (0..)
            .map(|n| self.k + n as f64 * self.k_step)
            .take_while(|p| *p <= 1.0 + COUNT_EPS)
            .map(|p| p.min(1.0))
            .collect()
    }
}

/// Number of entries removed when pruning `n` weights at fraction `p`.
pub fn prune_count(p: f64, n: usize) -> usize {
    ((p * n as f64 + COUNT_EPS).floor() as usize).min(n)
}

/// Zeroes the `floor(p * N)` lowest-ranked weight entries across all
/// layers. Ties keep `(layer, row, col)` order. Biases are untouched.
pub fn prune(
    model: &ModelParams,
    p: f64,
    strategy: PruneStrategy,
    grads: Option<&GradientSet>,
) -> Result<(ModelParams, Mask)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CropError::usage(format!("prune fraction {p} outside [0, 1]")));
    }
    let scores: Vec<f64> = match strategy {
        PruneStrategy::MagnitudeLow => model.weights().map(f64::abs).collect(),
        PruneStrategy::MagnitudeTop => model.weights().map(|w| -w.abs()).collect(),
        PruneStrategy::GradientLow => {
            let g = grads.ok_or_else(|| {
                CropError::usage("gradient_low pruning needs a gradient set")
            })?;
            let scores: Vec<f64> = g.weight_entries().map(f64::abs).collect();
            if scores.len() != model.num_weights() {
                return Err(CropError::structural(
                    "gradient set is not congruent with the model",
                ));
            }
            scores
        }
    };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut keep = vec![true; scores.len()];
    for &i in order.iter().take(prune_count(p, scores.len())) {
        keep[i] = false;
    }
    let mask = Mask::from_flat(model, &keep)?;
    Ok((apply_mask(model, &mask)?, mask))
}

/// Copy of `model` with masked-out weights set to zero.
pub fn apply_mask(model: &ModelParams, mask: &Mask) -> Result<ModelParams> {
    mask.ensure_congruent(model)?;
    let mut out = model.clone();
    for (layer, m) in out.layers_mut().iter_mut().zip(mask.layers()) {
        for (w, keep) in layer.weights.iter_mut().zip(m) {
            if !keep {
                *w = 0.0;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ToleratedPrune {
    pub pruned: ModelParams,
    pub mask: Mask,
    /// Grid fraction of the returned state; 0 when nothing was tolerated.
    pub fraction: f64,
    /// Metric of the unpruned input on the supplied data.
    pub baseline: f64,
    /// `(fraction, metric)` for every grid point evaluated, in order.
    pub trace: Vec<(f64, f64)>,
}

/// Grid search for the largest prune fraction whose metric stays within
/// `tau` of the unpruned model on `data`.
///
/// Each grid point prunes a fresh copy of `model`. The search stops at the
/// first point with `metric < baseline - tau` (or past fraction 1) and
/// returns the state visited just before it.
pub fn tolerated_prune(
    model: &ModelParams,
    cfg: &PruneConfig,
    data: &LabeledDataset,
    metric: MetricKind,
) -> Result<ToleratedPrune> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CropError::usage("tolerated_prune needs nonempty data"));
    }
    let grads = match cfg.strategy {
        PruneStrategy::GradientLow => {
            let rows: Vec<_> = data.rows().iter().collect();
            Some(cross_entropy_gradient(model, &rows))
        }
        _ => None,
    };
    let baseline = evaluate(model, data, metric)?;
    let floor = baseline - cfg.tau;

    let mut result = ToleratedPrune {
        pruned: model.clone(),
        mask: Mask::ones_like(model),
        fraction: 0.0,
        baseline,
        trace: Vec::new(),
    };
    for p in cfg.grid() {
        let (pruned, mask) = prune(model, p, cfg.strategy, grads.as_ref())?;
        let score = evaluate(&pruned, data, metric)?;
        result.trace.push((p, score));
        if score < floor {
            break;
        }
        result.pruned = pruned;
        result.mask = mask;
        result.fraction = p;
    }
    Ok(result)
}
