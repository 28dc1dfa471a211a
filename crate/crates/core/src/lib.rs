//! Context-robust static personalization of MLP classifiers.
//!
//! A generic model trained on many users is adapted to one user's data
//! from a single context in four steps: finetune with an l1 penalty,
//! prune the finetuned weights as far as a tolerated accuracy drop allows,
//! refill the pruned entries from the generic model, and finetune the
//! mixed model again. The crate also provides the plain-finetuning
//! baseline, personalization/generalization scores, gradient alignment
//! and Fisher diagnostics, and a synthetic multi-context data generator.

pub mod benchmark;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod metrics;
pub mod model_file;
pub mod nn;
pub mod pipeline;
pub mod pruning;

pub use data::{generate, split, split_users, LabeledDataset, Sample, StratifyBy, SyntheticSpec};
pub use diagnostics::{fim_trace, gip, magnitude_heatmap};
pub use error::{CropError, Result};
pub use metrics::{delta_g, delta_p, evaluate, EvalReport, MetricKind, UserComparison};
pub use model_file::ModelFile;
pub use nn::{backward, loss_with_penalty, train, GradientSet, ModelParams, Regularizer, TrainConfig};
pub use pipeline::{conventional_finetune, crop_personalize, mix, CropConfig, CropResult};
pub use pruning::{mask_of, prune, tolerated_prune, Mask, PruneConfig, PruneStrategy};
