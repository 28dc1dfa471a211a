//! Dense multilayer perceptron: forward pass, exact backpropagation,
//! penalized cross-entropy and a seeded mini-batch SGD loop.
//!
//! Everything runs in `f64`. Weight matrices are stored row-major with
//! shape `out x in`; biases are exempt from both the penalty and pruning.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stratified_split, LabeledDataset, Sample};
use crate::error::{CropError, Result};
use crate::pruning::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer followed by an element-wise activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(
        inputs: usize,
        outputs: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(CropError::structural("layer dimensions must be positive"));
        }
        if weights.len() != inputs * outputs {
            return Err(CropError::structural(format!(
                "weight matrix has {} entries, expected {}x{}",
                weights.len(),
                outputs,
                inputs
            )));
        }
        if bias.len() != outputs {
            return Err(CropError::structural(format!(
                "bias has {} entries, expected {}",
                bias.len(),
                outputs
            )));
        }
        Ok(Layer {
            inputs,
            outputs,
            weights,
            bias,
            activation,
        })
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.inputs + col]
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.bias).map(
            |(row, b)| {
                let dot: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
                dot + b
            },
        ));
    }
}

/// Parameters of an MLP classifier. Hidden layers use ReLU, the output
/// layer is linear and produces logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

impl ModelParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(CropError::structural("model needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(CropError::structural(format!(
                    "layer output {} does not feed next layer input {}",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        let model = ModelParams { layers };
        model.ensure_finite()?;
        Ok(model)
    }

    /// Builds a model from `layer_dims = [input, hidden.., classes]` using
    /// He-uniform weights and zero biases.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(CropError::structural(
                "layer_dims needs an input and an output size",
            ));
        }
        if layer_dims.contains(&0) {
            return Err(CropError::structural("layer dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = layer_dims.len() - 2;
        let layers = layer_dims
            .windows(2)
            .enumerate()
            .map(|(i, dims)| {
                let (inputs, outputs) = (dims[0], dims[1]);
                let bound = (6.0 / inputs as f64).sqrt();
                let weights = (0..inputs * outputs)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                let activation = if i == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Layer::new(inputs, outputs, weights, vec![0.0; outputs], activation)
            })
            .collect::<Result<Vec<_>>>()?;
        ModelParams::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    /// Count of weight-matrix entries (biases excluded).
    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// All weight entries in `(layer, row, col)` order.
    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().copied())
    }

    pub fn ensure_compatible(&self, other: &ModelParams) -> Result<()> {
        if self.layer_dims() != other.layer_dims() {
            return Err(CropError::structural(format!(
                "incompatible models: {:?} vs {:?}",
                self.layer_dims(),
                other.layer_dims()
            )));
        }
        Ok(())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if layer
                .weights
                .iter()
                .chain(&layer.bias)
                .any(|v| !v.is_finite())
            {
                return Err(CropError::Numeric(format!(
                    "non-finite parameter in layer {i}"
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(CropError::structural(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut current = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.affine(&current, &mut next);
            for v in next.iter_mut() {
                *v = layer.activation.apply(*v);
            }
            std::mem::swap(&mut current, &mut next);
        }
        Ok(current)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Sum of the weight penalty (biases excluded), without the coefficient.
    pub fn penalty(&self, regularizer: Regularizer) -> f64 {
        match regularizer {
            Regularizer::None => 0.0,
            Regularizer::L1 => self.weights().map(f64::abs).sum(),
            Regularizer::L2 => self.weights().map(|w| w * w).sum(),
        }
    }

    /// Fraction of weight entries with `|w| < threshold`.
    pub fn small_weight_fraction(&self, threshold: f64) -> f64 {
        let small = self.weights().filter(|w| w.abs() < threshold).count();
        small as f64 / self.num_weights() as f64
    }

    fn apply_update(&mut self, grads: &GradientSet, learning_rate: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, d) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= learning_rate * d;
            }
            for (b, d) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= learning_rate * d;
            }
        }
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|z| z - log_sum).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Partial derivatives of a scalar loss, congruent with a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGradient>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(model: &ModelParams) -> Self {
        GradientSet {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// Every partial derivative, weights then biases per layer.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    /// Weight partials only, in `(layer, row, col)` order.
    pub fn weight_entries(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().copied())
    }

    pub fn dot(&self, other: &GradientSet) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                let w: f64 = a.weights.iter().zip(&b.weights).map(|(x, y)| x * y).sum();
                let c: f64 = a.bias.iter().zip(&b.bias).map(|(x, y)| x * y).sum();
                w + c
            })
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x *= factor);
            l.bias.iter_mut().for_each(|x| *x *= factor);
        }
    }

    fn zero_frozen(&mut self, freeze: &Mask) {
        for (g, m) in self.layers.iter_mut().zip(freeze.layers()) {
            for (d, keep) in g.weights.iter_mut().zip(m) {
                if !keep {
                    *d = 0.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    #[default]
    L1,
    L2,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Coefficient of the weight penalty. Fixed; never learned.
    pub alpha: f64,
    pub regularizer: Regularizer,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// When set and a freeze mask is supplied, masked-out weights get no update.
    pub partial_finetune: bool,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            alpha: 0.0,
            regularizer: Regularizer::None,
            epochs: 50,
            batch_size: 16,
            seed: 0,
            partial_finetune: false,
            validation_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CropError::usage("learning_rate must be positive"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(CropError::usage("alpha must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(CropError::usage("batch_size must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(CropError::usage("validation_fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Same schedule with the penalty switched off.
    pub fn unregularized(&self) -> Self {
        TrainConfig {
            alpha: 0.0,
            regularizer: Regularizer::None,
            ..self.clone()
        }
    }

    fn penalty_coefficient(&self) -> f64 {
        match self.regularizer {
            Regularizer::None => 0.0,
            _ => self.alpha,
        }
    }
}

fn check_batch(model: &ModelParams, rows: &[Sample]) -> Result<()> {
    if rows.is_empty() {
        return Err(CropError::usage("empty batch"));
    }
    let classes = model.num_classes();
    for row in rows {
        if row.features.len() != model.input_dim() {
            return Err(CropError::structural(format!(
                "sample has {} features, model expects {}",
                row.features.len(),
                model.input_dim()
            )));
        }
        if row.label >= classes {
            return Err(CropError::usage(format!(
                "label {} outside [0, {classes})",
                row.label
            )));
        }
    }
    Ok(())
}

/// Mean cross-entropy over `rows` (no penalty).
pub(crate) fn mean_cross_entropy<'a>(
    model: &ModelParams,
    rows: impl ExactSizeIterator<Item = &'a Sample>,
) -> Result<f64> {
    let n = rows.len();
    let mut total = 0.0;
    for row in rows {
        let logp = log_softmax(&model.forward(&row.features)?);
        total -= logp[row.label];
    }
    Ok(total / n as f64)
}

/// Mean softmax cross-entropy over the batch plus `alpha` times the weight
/// penalty selected by `cfg.regularizer`.
pub fn loss_with_penalty(
    model: &ModelParams,
    batch: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<f64> {
    check_batch(model, batch.rows())?;
    let ce = mean_cross_entropy(model, batch.rows().iter())?;
    Ok(ce + cfg.penalty_coefficient() * model.penalty(cfg.regularizer))
}

/// Gradient of [`loss_with_penalty`]. The subgradient of `|w|` at zero is
/// taken as zero. With `cfg.partial_finetune` and a `freeze` mask, weight
/// entries where the mask is 0 receive exactly zero.
pub fn backward(
    model: &ModelParams,
    batch: &LabeledDataset,
    cfg: &TrainConfig,
    freeze: Option<&Mask>,
) -> Result<GradientSet> {
    check_batch(model, batch.rows())?;
    if let Some(mask) = freeze {
        mask.ensure_congruent(model)?;
    }
    let rows: Vec<&Sample> = batch.rows().iter().collect();
    let mut grads = GradientSet::zeros_like(model);
    let mut workspace = Workspace::new(model);
    penalized_gradient(model, &rows, cfg, &mut workspace, &mut grads);
    if cfg.partial_finetune {
        if let Some(mask) = freeze {
            grads.zero_frozen(mask);
        }
    }
    Ok(grads)
}

/// Gradient of the mean cross-entropy alone.
pub fn cross_entropy_gradient(model: &ModelParams, rows: &[&Sample]) -> GradientSet {
    let mut grads = GradientSet::zeros_like(model);
    let mut workspace = Workspace::new(model);
    for row in rows {
        workspace.accumulate_sample(model, &row.features, row.label, &mut grads);
    }
    grads.scale(1.0 / rows.len() as f64);
    grads
}

/// Gradient of `-log softmax(model(x))[class]` for a single input.
pub fn log_likelihood_gradient(model: &ModelParams, x: &[f64], class: usize) -> GradientSet {
    let mut grads = GradientSet::zeros_like(model);
    let mut workspace = Workspace::new(model);
    workspace.accumulate_sample(model, x, class, &mut grads);
    grads
}

fn penalized_gradient(
    model: &ModelParams,
    rows: &[&Sample],
    cfg: &TrainConfig,
    workspace: &mut Workspace,
    grads: &mut GradientSet,
) {
    for g in &mut grads.layers {
        g.weights.iter_mut().for_each(|x| *x = 0.0);
        g.bias.iter_mut().for_each(|x| *x = 0.0);
    }
    for row in rows {
        workspace.accumulate_sample(model, &row.features, row.label, grads);
    }
    grads.scale(1.0 / rows.len() as f64);
    let alpha = cfg.penalty_coefficient();
    if alpha > 0.0 {
        for (g, layer) in grads.layers.iter_mut().zip(model.layers()) {
            for (d, w) in g.weights.iter_mut().zip(&layer.weights) {
                *d += match cfg.regularizer {
                    Regularizer::L1 => {
                        if *w > 0.0 {
                            alpha
                        } else if *w < 0.0 {
                            -alpha
                        } else {
                            0.0
                        }
                    }
                    Regularizer::L2 => 2.0 * alpha * w,
                    Regularizer::None => 0.0,
                };
            }
        }
    }
}

/// Scratch buffers reused across samples during backpropagation.
struct Workspace {
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
    /// Layer inputs; `inputs[0]` is the sample itself.
    inputs: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next_delta: Vec<f64>,
}

impl Workspace {
    fn new(model: &ModelParams) -> Self {
        Workspace {
            pre: model.layers.iter().map(|l| vec![0.0; l.outputs]).collect(),
            inputs: model.layers.iter().map(|l| vec![0.0; l.inputs]).collect(),
            delta: Vec::new(),
            next_delta: Vec::new(),
        }
    }

    /// Adds the cross-entropy gradient of one sample into `grads`.
    fn accumulate_sample(
        &mut self,
        model: &ModelParams,
        x: &[f64],
        label: usize,
        grads: &mut GradientSet,
    ) {
        let n_layers = model.layers.len();
        self.inputs[0].copy_from_slice(x);
        let mut out = Vec::new();
        for (i, layer) in model.layers.iter().enumerate() {
            layer.affine(&self.inputs[i], &mut out);
            self.pre[i].copy_from_slice(&out);
            if i + 1 < n_layers {
                for (dst, z) in self.inputs[i + 1].iter_mut().zip(&out) {
                    *dst = layer.activation.apply(*z);
                }
            }
        }
        let last = &model.layers[n_layers - 1];
        let logits: Vec<f64> = self.pre[n_layers - 1]
            .iter()
            .map(|z| last.activation.apply(*z))
            .collect();
        let probs = softmax(&logits);
        self.delta.clear();
        self.delta.extend(probs.iter().enumerate().map(|(c, p)| {
            let target = if c == label { 1.0 } else { 0.0 };
            (p - target) * last.activation.derivative(self.pre[n_layers - 1][c])
        }));

        for i in (0..n_layers).rev() {
            let layer = &model.layers[i];
            let g = &mut grads.layers[i];
            let input = &self.inputs[i];
            for (r, d) in self.delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.bias[r] += d;
                let row = &mut g.weights[r * layer.inputs..(r + 1) * layer.inputs];
                for (gw, v) in row.iter_mut().zip(input) {
                    *gw += d * v;
                }
            }
            if i == 0 {
                break;
            }
            let below = &model.layers[i - 1];
            self.next_delta.clear();
            self.next_delta.resize(layer.inputs, 0.0);
            for (r, d) in self.delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.weights[r * layer.inputs..(r + 1) * layer.inputs];
                for (nd, w) in self.next_delta.iter_mut().zip(row) {
                    *nd += d * w;
                }
            }
            for (nd, z) in self.next_delta.iter_mut().zip(&self.pre[i - 1]) {
                *nd *= below.activation.derivative(*z);
            }
            std::mem::swap(&mut self.delta, &mut self.next_delta);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the lowest validation loss; epoch 0 (the input) included.
    pub best: ModelParams,
    pub best_epoch: usize,
    /// `epochs + 1` entries, starting with the untouched input at epoch 0.
    pub history: Vec<EpochRecord>,
}

/// Stratified, seeded train/validation split used by [`train`].
pub fn validation_split(
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(LabeledDataset, LabeledDataset)> {
    cfg.validate()?;
    let by_class = data.class_counts();
    if let Some((class, count)) = by_class.iter().find(|(_, &c)| c < 2) {
        return Err(CropError::usage(format!(
            "class {class} has {count} sample(s); need at least 2 to stratify"
        )));
    }
    let mut parts = stratified_split(
        data,
        &[1.0 - cfg.validation_fraction, cfg.validation_fraction],
        cfg.seed,
    )?;
    let val = parts.pop().expect("two parts");
    let train = parts.pop().expect("two parts");
    Ok((train, val))
}

/// Splits `data` by [`validation_split`] and runs [`train_with_validation`].
pub fn train(
    model: &ModelParams,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    freeze: Option<&Mask>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(CropError::usage("cannot train on an empty dataset"));
    }
    let (train_set, val_set) = validation_split(data, cfg)?;
    train_with_validation(model, &train_set, &val_set, cfg, freeze)
}

/// Mini-batch SGD on `train_set` for `cfg.epochs` epochs, keeping the
/// snapshot with the lowest mean validation cross-entropy. Ties go to the
/// earliest epoch.
pub fn train_with_validation(
    model: &ModelParams,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    cfg: &TrainConfig,
    freeze: Option<&Mask>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_batch(model, train_set.rows())?;
    check_batch(model, val_set.rows())?;
    let freeze = match freeze {
        Some(mask) if cfg.partial_finetune => {
            mask.ensure_congruent(model)?;
            Some(mask)
        }
        _ => None,
    };

    let alpha = cfg.penalty_coefficient();
    let objective = |m: &ModelParams| -> Result<f64> {
        Ok(mean_cross_entropy(m, train_set.rows().iter())? + alpha * m.penalty(cfg.regularizer))
    };
    let val_loss = |m: &ModelParams| mean_cross_entropy(m, val_set.rows().iter());

    let mut current = model.clone();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_val = val_loss(&current)?;
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    history.push(EpochRecord {
        epoch: 0,
        train_loss: objective(&current)?,
        val_loss: best_val,
    });

    let rows: Vec<&Sample> = train_set.rows().iter().collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0de_0000_0001);
    let mut workspace = Workspace::new(model);
    let mut grads = GradientSet::zeros_like(model);
    let mut batch: Vec<&Sample> = Vec::with_capacity(cfg.batch_size);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| rows[i]));
            penalized_gradient(&current, &batch, cfg, &mut workspace, &mut grads);
            if let Some(mask) = freeze {
                grads.zero_frozen(mask);
            }
            current.apply_update(&grads, cfg.learning_rate);
        }
        current.ensure_finite()?;
        let v = val_loss(&current)?;
        history.push(EpochRecord {
            epoch,
            train_loss: objective(&current)?,
            val_loss: v,
        });
        if v < best_val {
            best_val = v;
            best_epoch = epoch;
            best = current.clone();
        }
    }

    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
    })
}
