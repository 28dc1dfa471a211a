//! Classification metrics, the personalization/generalization scores and
//! the per-(user, context, state, seed) evaluation report.
//!
//! Metric values are fractions in `[0, 1]`. Delta scores are reported in
//! percent points: for each user the context-wise differences are summed,
//! then the sums are averaged over users.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{CropError, Result};
use crate::nn::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    Accuracy,
    BalancedAccuracy,
    /// F1 of class 1 against class 0; two-class tasks only.
    F1Binary,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::BalancedAccuracy => "balanced_accuracy",
            MetricKind::F1Binary => "f1_binary",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            MetricKind::Accuracy => 0,
            MetricKind::BalancedAccuracy => 1,
            MetricKind::F1Binary => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(MetricKind::Accuracy),
            1 => Some(MetricKind::BalancedAccuracy),
            2 => Some(MetricKind::F1Binary),
            _ => None,
        }
    }
}

/// `counts[truth][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn from_pairs(num_classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut counts = vec![vec![0; num_classes]; num_classes];
        for (truth, predicted) in pairs {
            counts[truth][predicted] += 1;
        }
        ConfusionMatrix { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.counts.len()).map(|c| self.counts[c][c]).sum()
    }
}

pub fn confusion_matrix(model: &ModelParams, data: &LabeledDataset) -> Result<ConfusionMatrix> {
    let classes = model.num_classes().max(data.num_classes());
    let mut pairs = Vec::with_capacity(data.len());
    for row in data.rows() {
        pairs.push((row.label, model.predict(&row.features)?));
    }
    Ok(ConfusionMatrix::from_pairs(classes, pairs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    /// Classes skipped by balanced accuracy because no row carries them.
    pub absent_classes: Vec<usize>,
}

pub fn score(cm: &ConfusionMatrix, kind: MetricKind) -> Result<Evaluation> {
    let total = cm.total();
    if total == 0 {
        return Err(CropError::usage("cannot score an empty dataset"));
    }
    let mut absent_classes = Vec::new();
    let value = match kind {
        MetricKind::Accuracy => cm.correct() as f64 / total as f64,
        MetricKind::BalancedAccuracy => {
            let mut recalls = Vec::new();
            for (c, row) in cm.counts.iter().enumerate() {
                let support: usize = row.iter().sum();
                if support == 0 {
                    absent_classes.push(c);
                } else {
                    recalls.push(row[c] as f64 / support as f64);
                }
            }
            recalls.iter().sum::<f64>() / recalls.len() as f64
        }
        MetricKind::F1Binary => {
            if cm.counts.len() != 2 {
                return Err(CropError::usage("f1_binary needs exactly two classes"));
            }
            let tp = cm.counts[1][1] as f64;
            let fp = cm.counts[0][1] as f64;
            let fn_ = cm.counts[1][0] as f64;
            if tp + fp + fn_ == 0.0 {
                // no positives anywhere and none predicted
                1.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        }
    };
    Ok(Evaluation {
        value,
        absent_classes,
    })
}

pub fn evaluate_detailed(
    model: &ModelParams,
    data: &LabeledDataset,
    kind: MetricKind,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(CropError::usage("cannot evaluate on an empty dataset"));
    }
    score(&confusion_matrix(model, data)?, kind)
}

/// Metric value of `model` on `data`. Absent classes under balanced
/// accuracy are skipped with a logged warning.
pub fn evaluate(model: &ModelParams, data: &LabeledDataset, kind: MetricKind) -> Result<f64> {
    let eval = evaluate_detailed(model, data, kind)?;
    if !eval.absent_classes.is_empty() {
        log::warn!(
            "balanced accuracy skipped classes absent from data: {:?}",
            eval.absent_classes
        );
    }
    Ok(eval.value)
}

/// One user's per-context metric values for the model being judged and
/// the reference it is compared against.
#[derive(Debug, Clone, PartialEq)]
pub struct UserComparison {
    pub user: String,
    pub target: BTreeMap<String, f64>,
    pub reference: BTreeMap<String, f64>,
}

impl UserComparison {
    pub fn new(
        user: impl Into<String>,
        target: impl IntoIterator<Item = (String, f64)>,
        reference: impl IntoIterator<Item = (String, f64)>,
    ) -> Self {
        UserComparison {
            user: user.into(),
            target: target.into_iter().collect(),
            reference: reference.into_iter().collect(),
        }
    }

    /// Summed context-wise difference in percent points.
    pub fn summed_gain(&self) -> Result<f64> {
        if self.target.keys().ne(self.reference.keys()) {
            return Err(CropError::usage(format!(
                "user {}: compared models were evaluated on different contexts",
                self.user
            )));
        }
        Ok(self
            .target
            .iter()
            .map(|(ctx, a)| 100.0 * (a - self.reference[ctx]))
            .sum())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaScore {
    pub per_user: Vec<(String, f64)>,
    pub mean: f64,
}

fn delta(table: &[UserComparison]) -> Result<DeltaScore> {
    if table.is_empty() {
        return Err(CropError::usage("delta score needs at least one user"));
    }
    let contexts: BTreeSet<&String> = table[0].target.keys().collect();
    let mut per_user = Vec::with_capacity(table.len());
    for row in table {
        if row.target.keys().collect::<BTreeSet<_>>() != contexts {
            return Err(CropError::usage("users were evaluated on different context sets"));
        }
        per_user.push((row.user.clone(), row.summed_gain()?));
    }
    let mean = per_user.iter().map(|(_, v)| v).sum::<f64>() / per_user.len() as f64;
    Ok(DeltaScore { per_user, mean })
}

/// Personalization score: target = CRoP model, reference = generic model.
pub fn delta_p(crop_vs_generic: &[UserComparison]) -> Result<DeltaScore> {
    delta(crop_vs_generic)
}

/// Generalization score: target = CRoP model, reference = conventionally
/// finetuned model.
pub fn delta_g(crop_vs_conventional: &[UserComparison]) -> Result<DeltaScore> {
    delta(crop_vs_conventional)
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One report cell; serializes as `user,seed,state,context,metric_value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub user: String,
    pub seed: u64,
    pub state: String,
    pub context: String,
    #[serde(rename = "metric_value")]
    pub value: f64,
}

/// Raw metric values per (user, seed, state, context). Every derived
/// score is recomputed from these rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub metric: MetricKind,
    pub rows: Vec<EvalRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub delta_p: Option<(f64, f64)>,
    pub delta_g: Option<(f64, f64)>,
}

pub const STATE_GENERIC: &str = "generic";
pub const STATE_CONVENTIONAL: &str = "conventional";
pub const STATE_CROP: &str = "crop";

impl EvalReport {
    pub fn new(metric: MetricKind) -> Self {
        EvalReport {
            metric,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, user: &str, seed: u64, state: &str, context: &str, value: f64) {
        self.rows.push(EvalRow {
            user: user.to_string(),
            seed,
            state: state.to_string(),
            context: context.to_string(),
            value,
        });
    }

    pub fn users(&self) -> BTreeSet<String> {
        self.rows.iter().map(|r| r.user.clone()).collect()
    }

    pub fn seeds(&self) -> BTreeSet<u64> {
        self.rows.iter().map(|r| r.seed).collect()
    }

    pub fn states(&self) -> BTreeSet<String> {
        self.rows.iter().map(|r| r.state.clone()).collect()
    }

    pub fn values(&self, user: &str, seed: u64, state: &str) -> BTreeMap<String, f64> {
        self.rows
            .iter()
            .filter(|r| r.user == user && r.seed == seed && r.state == state)
            .map(|r| (r.context.clone(), r.value))
            .collect()
    }

    pub fn value(&self, user: &str, seed: u64, state: &str, context: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.user == user && r.seed == seed && r.state == state && r.context == context)
            .map(|r| r.value)
    }

    /// Delta of `target` against `reference` for one seed, over all users
    /// that have both states. `None` when no user has both.
    pub fn delta_for_seed(
        &self,
        seed: u64,
        target: &str,
        reference: &str,
    ) -> Result<Option<DeltaScore>> {
        let table: Vec<UserComparison> = self
            .users()
            .into_iter()
            .filter_map(|u| {
                let t = self.values(&u, seed, target);
                let r = self.values(&u, seed, reference);
                (!t.is_empty() && !r.is_empty()).then_some(UserComparison {
                    user: u,
                    target: t,
                    reference: r,
                })
            })
            .collect();
        if table.is_empty() {
            return Ok(None);
        }
        delta(&table).map(Some)
    }

    /// Per-user rows (mean and std over seeds), then a `mean` row (mean over
    /// users; std over seeds of the user-averaged score) and a `std` row
    /// (spread of the per-user means across users).
    pub fn summary(&self, target: &str) -> Result<Vec<SummaryRow>> {
        let seeds: Vec<u64> = self.seeds().into_iter().collect();
        let mut per_seed_p = Vec::new();
        let mut per_seed_g = Vec::new();
        for &s in &seeds {
            per_seed_p.push(self.delta_for_seed(s, target, STATE_GENERIC)?);
            per_seed_g.push(self.delta_for_seed(s, target, STATE_CONVENTIONAL)?);
        }
        let collect_user = |scores: &[Option<DeltaScore>], user: &str| -> Option<(f64, f64)> {
            let vals: Vec<f64> = scores
                .iter()
                .flatten()
                .filter_map(|d| d.per_user.iter().find(|(u, _)| u == user).map(|(_, v)| *v))
                .collect();
            (!vals.is_empty()).then(|| mean_std(&vals))
        };
        let mut rows: Vec<SummaryRow> = self
            .users()
            .into_iter()
            .map(|u| SummaryRow {
                delta_p: collect_user(&per_seed_p, &u),
                delta_g: collect_user(&per_seed_g, &u),
                label: u,
            })
            .collect();
        let overall = |scores: &[Option<DeltaScore>]| -> Option<(f64, f64)> {
            let means: Vec<f64> = scores.iter().flatten().map(|d| d.mean).collect();
            (!means.is_empty()).then(|| mean_std(&means))
        };
        let spread = |pick: fn(&SummaryRow) -> Option<(f64, f64)>, rows: &[SummaryRow]| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| pick(r).map(|p| p.0)).collect();
            (!vals.is_empty()).then(|| (mean_std(&vals).1, 0.0))
        };
        let std_row = SummaryRow {
            label: "std".into(),
            delta_p: spread(|r| r.delta_p, &rows),
            delta_g: spread(|r| r.delta_g, &rows),
        };
        rows.push(SummaryRow {
            label: "mean".into(),
            delta_p: overall(&per_seed_p),
            delta_g: overall(&per_seed_g),
        });
        rows.push(std_row);
        Ok(rows)
    }
}
