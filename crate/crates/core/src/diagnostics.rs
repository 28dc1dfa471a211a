//! Analysis instruments: cross-domain gradient alignment, weight
//! magnitude maps and the diagonal Fisher trace.

use std::io::Write;

use crate::data::{LabeledDataset, Sample};
use crate::error::{CropError, Result};
use crate::nn::{cross_entropy_gradient, log_likelihood_gradient, softmax, GradientSet, ModelParams};

/// Full-batch cross-entropy gradient (no penalty) on one domain.
pub fn domain_gradient(model: &ModelParams, domain: &LabeledDataset) -> Result<GradientSet> {
    if domain.is_empty() {
        return Err(CropError::usage("gradient of an empty domain"));
    }
    if domain.num_features() != model.input_dim() {
        return Err(CropError::structural("domain width does not match the model"));
    }
    let rows: Vec<&Sample> = domain.rows().iter().collect();
    Ok(cross_entropy_gradient(model, &rows))
}

/// Gradient inner product `||sum_i G_i||^2 - sum_i ||G_i||^2`, i.e. twice
/// the sum of pairwise dot products of the per-domain gradients.
pub fn gip(model: &ModelParams, domains: &[&LabeledDataset]) -> Result<f64> {
    if domains.len() < 2 {
        return Err(CropError::usage("gradient inner product needs at least two domains"));
    }
    let grads = domains
        .iter()
        .map(|d| domain_gradient(model, d))
        .collect::<Result<Vec<_>>>()?;
    let mut total = GradientSet::zeros_like(model);
    let mut separate = 0.0;
    for g in &grads {
        total.add_assign(g);
        separate += g.norm_sq();
    }
    Ok(total.norm_sq() - separate)
}

/// `|w|` of one layer's weight matrix as `outputs` rows of `inputs` values.
pub fn magnitude_heatmap(model: &ModelParams, layer_index: usize) -> Result<Vec<Vec<f64>>> {
    let layer = model.layers().get(layer_index).ok_or_else(|| {
        CropError::usage(format!(
            "layer {layer_index} out of range (model has {})",
            model.layers().len()
        ))
    })?;
    Ok(layer
        .weights
        .chunks_exact(layer.inputs)
        .map(|row| row.iter().map(|w| w.abs()).collect())
        .collect())
}

/// Writes a heat map as a headerless CSV grid.
pub fn write_heatmap_csv(grid: &[Vec<f64>], out: &mut impl Write) -> Result<()> {
    for row in grid {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Trace of the diagonal Fisher information, taking the expectation over
/// the model's own predictive distribution:
/// `mean_x sum_c p(c|x) * ||d log p(c|x) / d theta||^2`.
pub fn fim_trace(model: &ModelParams, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(CropError::usage("fisher trace of an empty dataset"));
    }
    let mut total = 0.0;
    for row in data.rows() {
        let probs = softmax(&model.forward(&row.features)?);
        for (class, p) in probs.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            total += p * log_likelihood_gradient(model, &row.features, class).norm_sq();
        }
    }
    Ok(total / data.len() as f64)
}
