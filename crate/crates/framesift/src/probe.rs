//! Frozen-feature adaptation: feature assembly from token sets, a
//! multinomial linear probe (softmax regression), and a per-patch binary
//! segmentation head.
//!
//! Both heads train by full-batch gradient descent from zero
//! initialization with backtracking step halving on any loss increase, so
//! the loss log is non-increasing and training is deterministic for a
//! given configuration. The objective is mean cross-entropy plus
//! `(l2/2)*||W||^2` (biases unregularized); the problem is convex, so the
//! zero start is immaterial to the optimum.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::embedding::{EmbeddingMatrix, FrameRecord, LayerTokenSet};
use crate::error::{Error, Result};
use crate::format;
use crate::metrics::BinaryMask;

/// How rows of a [`FeatureMatrix`] were assembled from token sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssemblyMode {
    /// One row per image: the final layer's CLS vector.
    ClsLast,
    /// One row per patch: the last four layers' patch tokens concatenated,
    /// deepest last (dim = 4 x layer dim).
    BoostedConcat4,
    /// One row per patch: final-layer patch tokens, grids flattened
    /// row-major.
    PatchGrid,
}

impl AssemblyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AssemblyMode::ClsLast => "cls_last",
            AssemblyMode::BoostedConcat4 => "boosted_concat4",
            AssemblyMode::PatchGrid => "patch_grid",
        }
    }
}

impl std::str::FromStr for AssemblyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls_last" => Ok(AssemblyMode::ClsLast),
            "boosted_concat4" => Ok(AssemblyMode::BoostedConcat4),
            "patch_grid" => Ok(AssemblyMode::PatchGrid),
            other => Err(Error::invalid(format!("unknown assembly mode {other:?}"))),
        }
    }
}

/// Dense feature rows for head training.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    dim: usize,
    values: Vec<f32>,
    pub assembly_mode: AssemblyMode,
}

impl FeatureMatrix {
    pub fn new(n: usize, dim: usize, values: Vec<f32>, mode: AssemblyMode) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dim must be positive"));
        }
        if values.len() != n * dim {
            return Err(Error::invalid(format!(
                "{} values for {n} x {dim}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite feature at row {}, dim {}",
                bad / dim,
                bad % dim
            )));
        }
        Ok(FeatureMatrix {
            n,
            dim,
            values,
            assembly_mode: mode,
        })
    }

    /// Borrows embedding rows as ready-made features.
    pub fn from_embeddings(matrix: &EmbeddingMatrix) -> Result<Self> {
        FeatureMatrix::new(
            matrix.len(),
            matrix.dim(),
            matrix.data().to_vec(),
            AssemblyMode::ClsLast,
        )
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            if r >= self.n {
                return Err(Error::invalid(format!("row {r} out of range")));
            }
            values.extend_from_slice(self.row(r));
        }
        FeatureMatrix::new(rows.len(), self.dim, values, self.assembly_mode)
    }
}

/// Builds a feature matrix from per-image token sets.
pub fn assemble_features(images: &[LayerTokenSet], mode: AssemblyMode) -> Result<FeatureMatrix> {
    if images.is_empty() {
        return Err(Error::invalid("no token sets"));
    }
    let dim = images[0].dim();
    if images.iter().any(|t| t.dim() != dim) {
        return Err(Error::invalid("token sets disagree on dim"));
    }
    match mode {
        AssemblyMode::ClsLast => {
            let mut values = Vec::with_capacity(images.len() * dim);
            for image in images {
                values.extend_from_slice(&image.final_layer().cls);
            }
            FeatureMatrix::new(images.len(), dim, values, mode)
        }
        AssemblyMode::PatchGrid => {
            let rows: usize = images.iter().map(|t| t.grid_h() * t.grid_w()).sum();
            let mut values = Vec::with_capacity(rows * dim);
            for image in images {
                values.extend_from_slice(&image.final_layer().patches);
            }
            FeatureMatrix::new(rows, dim, values, mode)
        }
        AssemblyMode::BoostedConcat4 => {
            for (i, image) in images.iter().enumerate() {
                if image.num_layers() < 4 {
                    return Err(Error::invalid(format!(
                        "image {i} has {} layers; boosted assembly needs 4",
                        image.num_layers()
                    )));
                }
            }
            let rows: usize = images.iter().map(|t| t.grid_h() * t.grid_w()).sum();
            let out_dim = 4 * dim;
            let mut values = Vec::with_capacity(rows * out_dim);
            for image in images {
                let first = image.num_layers() - 4;
                for y in 0..image.grid_h() {
                    for x in 0..image.grid_w() {
                        for layer in first..image.num_layers() {
                            values.extend_from_slice(image.patch(layer, y, x));
                        }
                    }
                }
            }
            FeatureMatrix::new(rows, out_dim, values, mode)
        }
    }
}

/// Optimizer settings shared by both heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub l2: f64,
    pub learning_rate: f64,
    /// Gradient steps attempted.
    pub epochs: usize,
    /// Recorded for reproducibility; full-batch descent from zero draws
    /// no random numbers.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l2: 1e-4,
            learning_rate: 0.5,
            epochs: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::invalid("l2 must be non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        Ok(())
    }
}

/// Multinomial linear classifier over frozen features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub classes: usize,
    pub dim: usize,
    /// `classes x dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub l2: f64,
    /// Accepted full-batch losses, starting with the zero-parameter loss.
    pub training_log: Vec<f64>,
}

impl ProbeModel {
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn final_loss(&self) -> f64 {
        *self.training_log.last().expect("log never empty")
    }
}

/// Mean softmax cross-entropy + (l2/2)||W||^2 and its gradient with
/// respect to `weights` (`classes x dim`, row-major) and `bias`. Exposed
/// so external optimizers and gradient checks can drive the same
/// objective the trainer uses.
pub fn probe_loss_grad(
    weights: &[f64],
    bias: &[f64],
    features: &FeatureMatrix,
    labels: &[usize],
    l2: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let classes = bias.len();
    let dim = features.dim();
    let n = features.len();
    let mut loss = 0f64;
    let mut grad_w = vec![0f64; classes * dim];
    let mut grad_b = vec![0f64; classes];
    let mut logits = vec![0f64; classes];
    for i in 0..n {
        let x = features.row(i);
        for (c, logit) in logits.iter_mut().enumerate() {
            let w = &weights[c * dim..(c + 1) * dim];
            let mut dot = 0f64;
            for (wv, xv) in w.iter().zip(x) {
                dot += wv * f64::from(*xv);
            }
            *logit = dot + bias[c];
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0f64;
        for logit in logits.iter() {
            denom += (logit - max).exp();
        }
        loss += -(logits[labels[i]] - max - denom.ln());
        for c in 0..classes {
            let p = (logits[c] - max).exp() / denom;
            let delta = p - f64::from(u8::from(c == labels[i]));
            grad_b[c] += delta;
            let gw = &mut grad_w[c * dim..(c + 1) * dim];
            for (g, xv) in gw.iter_mut().zip(x) {
                *g += delta * f64::from(*xv);
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    loss *= inv_n;
    for g in grad_b.iter_mut() {
        *g *= inv_n;
    }
    let mut reg = 0f64;
    for (g, w) in grad_w.iter_mut().zip(weights) {
        *g = *g * inv_n + l2 * w;
        reg += w * w;
    }
    loss += 0.5 * l2 * reg;
    (loss, grad_w, grad_b)
}

/// Runs backtracking full-batch descent over (weights, bias) given a loss
/// closure. Returns the accepted-loss log.
fn descend<F>(
    weights: &mut Vec<f64>,
    bias: &mut Vec<f64>,
    config: &TrainConfig,
    mut loss_grad: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &[f64]) -> (f64, Vec<f64>, Vec<f64>),
{
    let (initial, mut grad_w, mut grad_b) = loss_grad(weights, bias);
    let mut log = vec![initial];
    let mut current = initial;
    let mut rate = config.learning_rate;
    for _ in 0..config.epochs {
        let mut accepted = false;
        while rate > 1e-18 {
            let trial_w: Vec<f64> = weights
                .iter()
                .zip(&grad_w)
                .map(|(w, g)| w - rate * g)
                .collect();
            let trial_b: Vec<f64> = bias
                .iter()
                .zip(&grad_b)
                .map(|(b, g)| b - rate * g)
                .collect();
            let (trial_loss, trial_gw, trial_gb) = loss_grad(&trial_w, &trial_b);
            if trial_loss <= current {
                *weights = trial_w;
                *bias = trial_b;
                current = trial_loss;
                grad_w = trial_gw;
                grad_b = trial_gb;
                log.push(current);
                accepted = true;
                break;
            }
            rate *= 0.5;
        }
        if !accepted {
            break; // no admissible step left; converged
        }
        if current > initial * 10.0 {
            return Err(Error::Training(format!(
                "loss diverged from {initial} to {current}; lower the learning rate"
            )));
        }
    }
    Ok(log)
}

/// Trains the softmax probe. Labels must lie in a contiguous `[0, C)`
/// range with `n >= C`.
pub fn train_linear_probe(
    features: &FeatureMatrix,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<ProbeModel> {
    config.validate()?;
    if labels.len() != features.len() {
        return Err(Error::invalid(format!(
            "{} labels for {} rows",
            labels.len(),
            features.len()
        )));
    }
    if features.is_empty() {
        return Err(Error::invalid("no training rows"));
    }
    let classes = labels.iter().max().unwrap() + 1;
    if features.len() < classes {
        return Err(Error::invalid(format!(
            "need at least {classes} rows for {classes} classes, got {}",
            features.len()
        )));
    }

    let dim = features.dim();
    let mut weights = vec![0f64; classes * dim];
    let mut bias = vec![0f64; classes];
    let training_log = descend(&mut weights, &mut bias, config, |w, b| {
        probe_loss_grad(w, b, features, labels, config.l2)
    })?;
    Ok(ProbeModel {
        classes,
        dim,
        weights,
        bias,
        l2: config.l2,
        training_log,
    })
}

/// Row-major `n x classes` probability matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Probabilities {
    pub classes: usize,
    pub values: Vec<f64>,
}

impl Probabilities {
    pub fn len(&self) -> usize {
        self.values.len() / self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.classes..(i + 1) * self.classes]
    }

    /// Argmax with lowest-index tie-break.
    pub fn predicted_class(&self, i: usize) -> usize {
        let row = self.row(i);
        let mut best = 0usize;
        for (c, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = c;
            }
        }
        best
    }
}

/// Softmax of `W x + b` per row; each output row sums to 1.
pub fn predict_proba(model: &ProbeModel, features: &FeatureMatrix) -> Result<Probabilities> {
    if features.dim() != model.dim {
        return Err(Error::invalid(format!(
            "feature dim {} does not match model dim {}",
            features.dim(),
            model.dim
        )));
    }
    let classes = model.classes;
    let dim = model.dim;
    let mut values = vec![0f64; features.len() * classes];
    values
        .par_chunks_mut(classes)
        .enumerate()
        .for_each(|(i, out)| {
            let x = features.row(i);
            for (c, slot) in out.iter_mut().enumerate() {
                let w = &model.weights[c * dim..(c + 1) * dim];
                let mut dot = 0f64;
                for (wv, xv) in w.iter().zip(x) {
                    dot += wv * f64::from(*xv);
                }
                *slot = dot + model.bias[c];
            }
            let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0f64;
            for slot in out.iter_mut() {
                *slot = (*slot - max).exp();
                denom += *slot;
            }
            for slot in out.iter_mut() {
                *slot /= denom;
            }
        });
    Ok(Probabilities { classes, values })
}

/// Binary per-patch head: `dim` weights plus a bias, thresholded on the
/// probability scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SegHead {
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Decision threshold in (0, 1).
    pub threshold: f64,
    /// Set when training degenerated to the label prior (single-class
    /// input).
    pub prior_only: bool,
    pub training_log: Vec<f64>,
}

pub const DEFAULT_SEG_THRESHOLD: f64 = 0.5;
/// Clamp for prior-only logits so parameters stay finite.
const PRIOR_LOGIT_CLAMP: f64 = 50.0;

impl SegHead {
    /// Trainable parameter count (weights + bias).
    pub fn param_count(&self) -> usize {
        self.dim + 1
    }

    pub fn final_loss(&self) -> f64 {
        *self.training_log.last().expect("log never empty")
    }

    pub fn patch_logit(&self, features: &[f32]) -> f64 {
        let mut dot = self.bias;
        for (w, x) in self.weights.iter().zip(features) {
            dot += w * f64::from(*x);
        }
        dot
    }
}

/// Mean logistic loss + (l2/2)||w||^2 and its gradient; the binary
/// counterpart of [`probe_loss_grad`].
pub fn seg_loss_grad(
    weights: &[f64],
    bias: f64,
    features: &FeatureMatrix,
    labels: &[bool],
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let dim = features.dim();
    let n = features.len();
    let mut loss = 0f64;
    let mut grad_w = vec![0f64; dim];
    let mut grad_b = 0f64;
    for i in 0..n {
        let x = features.row(i);
        let mut z = bias;
        for (w, xv) in weights.iter().zip(x) {
            z += w * f64::from(*xv);
        }
        // log(1 + exp(-y z)) with y in {-1, +1}, stable form
        let y = if labels[i] { 1.0 } else { -1.0 };
        let m = -y * z;
        loss += if m > 0.0 {
            m + (-m).exp().ln_1p()
        } else {
            m.exp().ln_1p()
        };
        let sigma = 1.0 / (1.0 + (-z).exp());
        let delta = sigma - f64::from(u8::from(labels[i]));
        grad_b += delta;
        for (g, xv) in grad_w.iter_mut().zip(x) {
            *g += delta * f64::from(*xv);
        }
    }
    let inv_n = 1.0 / n as f64;
    loss *= inv_n;
    grad_b *= inv_n;
    let mut reg = 0f64;
    for (g, w) in grad_w.iter_mut().zip(weights) {
        *g = *g * inv_n + l2 * w;
        reg += w * w;
    }
    loss += 0.5 * l2 * reg;
    (loss, grad_w, grad_b)
}

/// Trains the binary per-patch head (logistic regression, same optimizer
/// contract as the probe). Single-class labels produce a prior-only head
/// and a recorded warning flag instead of an error.
pub fn train_seg_head(
    patch_features: &FeatureMatrix,
    patch_labels: &[bool],
    config: &TrainConfig,
) -> Result<SegHead> {
    config.validate()?;
    if patch_labels.len() != patch_features.len() {
        return Err(Error::invalid(format!(
            "{} labels for {} patch rows",
            patch_labels.len(),
            patch_features.len()
        )));
    }
    if patch_features.is_empty() {
        return Err(Error::invalid("no patch rows"));
    }
    let dim = patch_features.dim();
    let positives = patch_labels.iter().filter(|&&b| b).count();

    if positives == 0 || positives == patch_labels.len() {
        let prior = positives as f64 / patch_labels.len() as f64;
        let bias = if prior <= 0.0 {
            -PRIOR_LOGIT_CLAMP
        } else {
            PRIOR_LOGIT_CLAMP
        };
        let weights = vec![0f64; dim];
        let (loss, _, _) = seg_loss_grad(&weights, bias, patch_features, patch_labels, config.l2);
        return Ok(SegHead {
            dim,
            weights,
            bias,
            threshold: DEFAULT_SEG_THRESHOLD,
            prior_only: true,
            training_log: vec![loss],
        });
    }

    let mut weights = vec![0f64; dim];
    let mut bias_vec = vec![0f64; 1];
    let training_log = descend(&mut weights, &mut bias_vec, config, |w, b| {
        let (loss, gw, gb) = seg_loss_grad(w, b[0], patch_features, patch_labels, config.l2);
        (loss, gw, vec![gb])
    })?;
    Ok(SegHead {
        dim,
        weights,
        bias: bias_vec[0],
        threshold: DEFAULT_SEG_THRESHOLD,
        prior_only: false,
        training_log,
    })
}

/// Bilinear resize of a row-major grid (align-corners convention, so
/// equal input/output dims reproduce the input exactly).
pub fn bilinear_upsample(grid: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    debug_assert_eq!(grid.len(), h * w);
    let mut out = vec![0f64; out_h * out_w];
    let scale_y = if out_h > 1 {
        (h - 1) as f64 / (out_h - 1) as f64
    } else {
        0.0
    };
    let scale_x = if out_w > 1 {
        (w - 1) as f64 / (out_w - 1) as f64
    } else {
        0.0
    };
    for oy in 0..out_h {
        let sy = oy as f64 * scale_y;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ox as f64 * scale_x;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let v00 = grid[y0 * w + x0];
            let v01 = grid[y0 * w + x1];
            let v10 = grid[y1 * w + x0];
            let v11 = grid[y1 * w + x1];
            out[oy * out_w + ox] = v00 * (1.0 - fy) * (1.0 - fx)
                + v01 * (1.0 - fy) * fx
                + v10 * fy * (1.0 - fx)
                + v11 * fy * fx;
        }
    }
    out
}

/// Predicts a binary mask: per-patch logits on the token grid, bilinear
/// interpolation to `out_h x out_w` on the logit scale, then thresholding
/// at the head's probability threshold.
///
/// The head's input features are inferred from its dimension: final-layer
/// patch tokens when `head.dim == tokens.dim()`, the boosted last-four
/// concatenation when `head.dim == 4 * tokens.dim()`.
pub fn predict_mask(
    head: &SegHead,
    tokens: &LayerTokenSet,
    out_h: usize,
    out_w: usize,
) -> Result<BinaryMask> {
    let (grid_h, grid_w) = (tokens.grid_h(), tokens.grid_w());
    if out_h < grid_h || out_w < grid_w {
        return Err(Error::invalid(format!(
            "output {out_h}x{out_w} is smaller than the {grid_h}x{grid_w} patch grid"
        )));
    }

    let boosted = head.dim == 4 * tokens.dim();
    if !boosted && head.dim != tokens.dim() {
        return Err(Error::invalid(format!(
            "head dim {} matches neither token dim {} nor its boosted concat {}",
            head.dim,
            tokens.dim(),
            4 * tokens.dim()
        )));
    }
    if boosted && tokens.num_layers() < 4 {
        return Err(Error::invalid(
            "boosted head needs at least 4 recorded layers",
        ));
    }

    let mut logits = vec![0f64; grid_h * grid_w];
    let mut buffer = Vec::with_capacity(head.dim);
    for y in 0..grid_h {
        for x in 0..grid_w {
            let logit = if boosted {
                buffer.clear();
                let first = tokens.num_layers() - 4;
                for layer in first..tokens.num_layers() {
                    buffer.extend_from_slice(tokens.patch(layer, y, x));
                }
                head.patch_logit(&buffer)
            } else {
                head.patch_logit(tokens.patch(tokens.num_layers() - 1, y, x))
            };
            logits[y * grid_w + x] = logit;
        }
    }

    let upsampled = bilinear_upsample(&logits, grid_h, grid_w, out_h, out_w);
    let logit_threshold = (head.threshold / (1.0 - head.threshold)).ln();
    let data = upsampled.iter().map(|&z| z >= logit_threshold).collect();
    BinaryMask::new(out_h, out_w, data)
}

/// Result of an l2 sweep: the grid values tried and their validation
/// accuracy, best first choice by highest accuracy (ties to the smaller
/// l2).
#[derive(Debug, Clone, PartialEq)]
pub struct L2Sweep {
    pub best_l2: f64,
    pub best_accuracy: f64,
    pub results: Vec<(f64, f64)>,
}

pub const DEFAULT_L2_GRID: [f64; 5] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

/// Trains one probe per l2 value (in parallel) and selects by validation
/// accuracy.
pub fn sweep_l2(
    train_features: &FeatureMatrix,
    train_labels: &[usize],
    val_features: &FeatureMatrix,
    val_labels: &[usize],
    grid: &[f64],
    base: &TrainConfig,
) -> Result<L2Sweep> {
    if grid.is_empty() {
        return Err(Error::invalid("empty l2 grid"));
    }
    let results: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&l2| -> Result<(f64, f64)> {
            let config = TrainConfig { l2, ..*base };
            let model = train_linear_probe(train_features, train_labels, &config)?;
            let proba = predict_proba(&model, val_features)?;
            let correct = (0..val_labels.len())
                .filter(|&i| proba.predicted_class(i) == val_labels[i])
                .count();
            Ok((l2, correct as f64 / val_labels.len() as f64))
        })
        .collect::<Result<_>>()?;
    let (best_l2, best_accuracy) =
        results
            .iter()
            .fold((results[0].0, f64::NEG_INFINITY), |(bl, ba), &(l2, acc)| {
                if acc > ba {
                    (l2, acc)
                } else {
                    (bl, ba)
                }
            });
    Ok(L2Sweep {
        best_l2,
        best_accuracy,
        results,
    })
}

fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta");
    path.with_file_name(name)
}

fn write_weight_matrix(
    rows: usize,
    dim: usize,
    values: impl Iterator<Item = f32>,
    path: &Path,
) -> Result<()> {
    let mut matrix = EmbeddingMatrix::new(dim, "model-weights")?;
    let mut buffer = Vec::with_capacity(dim);
    let mut row = 0u64;
    for value in values {
        buffer.push(value);
        if buffer.len() == dim {
            matrix.push(FrameRecord::new("row", row, 0), &buffer)?;
            buffer.clear();
            row += 1;
        }
    }
    debug_assert_eq!(row as usize, rows);
    format::write_embeddings(&matrix, path)?;
    Ok(())
}

/// Saves a probe: weights and bias as one f32 matrix in EMB1 layout
/// (`classes` rows of `dim + 1`, bias in the last column) plus a text
/// sidecar with hyperparameters.
pub fn save_probe(model: &ProbeModel, config: &TrainConfig, path: &Path) -> Result<()> {
    let values = (0..model.classes).flat_map(|c| {
        model.weights[c * model.dim..(c + 1) * model.dim]
            .iter()
            .map(|&w| w as f32)
            .chain(std::iter::once(model.bias[c] as f32))
            .collect::<Vec<f32>>()
    });
    write_weight_matrix(model.classes, model.dim + 1, values, path)?;
    let meta = format!(
        "kind=linear_probe\nclasses={}\ndim={}\nl2={:?}\nlearning_rate={:?}\nepochs={}\nseed={}\nfinal_loss={:?}\n",
        model.classes,
        model.dim,
        model.l2,
        config.learning_rate,
        config.epochs,
        config.seed,
        model.final_loss()
    );
    let mp = meta_path(path);
    fs::write(&mp, meta).map_err(|e| Error::storage(&mp, e))
}

fn parse_meta(path: &Path) -> Result<std::collections::HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
    Ok(text
        .lines()
        .filter_map(|line| line.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

fn meta_field<T: std::str::FromStr>(
    meta: &std::collections::HashMap<String, String>,
    key: &str,
    path: &Path,
) -> Result<T> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(path, format!("missing or bad field {key}")))
}

/// Loads a probe saved by [`save_probe`]. The training log is restored as
/// its recorded final loss.
pub fn load_probe(path: &Path) -> Result<(ProbeModel, TrainConfig)> {
    let mp = meta_path(path);
    let meta = parse_meta(&mp)?;
    let kind: String = meta_field(&meta, "kind", &mp)?;
    if kind != "linear_probe" {
        return Err(Error::format(
            &mp,
            format!("expected linear_probe, found {kind}"),
        ));
    }
    let classes: usize = meta_field(&meta, "classes", &mp)?;
    let dim: usize = meta_field(&meta, "dim", &mp)?;
    let matrix = format::read_embeddings(path)?;
    if matrix.len() != classes || matrix.dim() != dim + 1 {
        return Err(Error::format(
            path,
            format!(
                "weight matrix is {}x{}, expected {classes}x{}",
                matrix.len(),
                matrix.dim(),
                dim + 1
            ),
        ));
    }
    let mut weights = Vec::with_capacity(classes * dim);
    let mut bias = Vec::with_capacity(classes);
    for c in 0..classes {
        let row = matrix.row(c);
        weights.extend(row[..dim].iter().map(|&v| f64::from(v)));
        bias.push(f64::from(row[dim]));
    }
    let config = TrainConfig {
        l2: meta_field(&meta, "l2", &mp)?,
        learning_rate: meta_field(&meta, "learning_rate", &mp)?,
        epochs: meta_field(&meta, "epochs", &mp)?,
        seed: meta_field(&meta, "seed", &mp)?,
    };
    let final_loss: f64 = meta_field(&meta, "final_loss", &mp)?;
    Ok((
        ProbeModel {
            classes,
            dim,
            weights,
            bias,
            l2: config.l2,
            training_log: vec![final_loss],
        },
        config,
    ))
}

/// Saves a segmentation head in the same EMB1-plus-sidecar layout (one
/// row of `dim + 1`).
pub fn save_seg_head(head: &SegHead, config: &TrainConfig, path: &Path) -> Result<()> {
    let values = head
        .weights
        .iter()
        .map(|&w| w as f32)
        .chain(std::iter::once(head.bias as f32));
    write_weight_matrix(1, head.dim + 1, values, path)?;
    let meta = format!(
        "kind=seg_head\ndim={}\nthreshold={:?}\nprior_only={}\nl2={:?}\nlearning_rate={:?}\nepochs={}\nseed={}\nfinal_loss={:?}\nparams={}\n",
        head.dim,
        head.threshold,
        head.prior_only,
        config.l2,
        config.learning_rate,
        config.epochs,
        config.seed,
        head.final_loss(),
        head.param_count()
    );
    let mp = meta_path(path);
    fs::write(&mp, meta).map_err(|e| Error::storage(&mp, e))
}

/// Loads a head saved by [`save_seg_head`].
pub fn load_seg_head(path: &Path) -> Result<(SegHead, TrainConfig)> {
    let mp = meta_path(path);
    let meta = parse_meta(&mp)?;
    let kind: String = meta_field(&meta, "kind", &mp)?;
    if kind != "seg_head" {
        return Err(Error::format(
            &mp,
            format!("expected seg_head, found {kind}"),
        ));
    }
    let dim: usize = meta_field(&meta, "dim", &mp)?;
    let matrix = format::read_embeddings(path)?;
    if matrix.len() != 1 || matrix.dim() != dim + 1 {
        return Err(Error::format(path, "weight matrix shape mismatch"));
    }
    let row = matrix.row(0);
    let config = TrainConfig {
        l2: meta_field(&meta, "l2", &mp)?,
        learning_rate: meta_field(&meta, "learning_rate", &mp)?,
        epochs: meta_field(&meta, "epochs", &mp)?,
        seed: meta_field(&meta, "seed", &mp)?,
    };
    let final_loss: f64 = meta_field(&meta, "final_loss", &mp)?;
    Ok((
        SegHead {
            dim,
            weights: row[..dim].iter().map(|&v| f64::from(v)).collect(),
            bias: f64::from(row[dim]),
            threshold: meta_field(&meta, "threshold", &mp)?,
            prior_only: meta_field(&meta, "prior_only", &mp)?,
            training_log: vec![final_loss],
        },
        config,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::LayerTokens;
    use crate::rng::chacha;
    use rand::Rng;

    fn token_set(dim: usize, h: usize, w: usize, layers: usize, seed: u64) -> LayerTokenSet {
        let mut rng = chacha(seed);
        let layer_tokens: Vec<LayerTokens> = (0..layers)
            .map(|_| LayerTokens {
                cls: (0..dim).map(|_| rng.random::<f32>()).collect(),
                patches: (0..h * w * dim).map(|_| rng.random::<f32>()).collect(),
            })
            .collect();
        LayerTokenSet::new(dim, h, w, layer_tokens).unwrap()
    }

    #[test]
    fn boosted_dim_is_four_times_layer_dim() {
        let images = vec![token_set(8, 2, 2, 5, 1), token_set(8, 2, 2, 5, 2)];
        let features = assemble_features(&images, AssemblyMode::BoostedConcat4).unwrap();
        assert_eq!(features.dim(), 32);
        assert_eq!(features.len(), 8);
    }

    #[test]
    fn cls_assembly_projects_final_layer_cls() {
        let images = vec![token_set(4, 2, 2, 3, 7), token_set(4, 2, 2, 3, 8)];
        let features = assemble_features(&images, AssemblyMode::ClsLast).unwrap();
        assert_eq!(features.len(), 2);
        assert_eq!(features.row(0), images[0].final_layer().cls.as_slice());
        assert_eq!(features.row(1), images[1].final_layer().cls.as_slice());
    }

    #[test]
    fn patch_grid_rows_follow_row_major_index_oracle() {
        let image = token_set(3, 2, 3, 2, 5);
        let features =
            assemble_features(std::slice::from_ref(&image), AssemblyMode::PatchGrid).unwrap();
        assert_eq!(features.len(), 6);
        // index oracle: row r corresponds to (y, x) = (r / w, r % w)
        for r in 0..6 {
            let (y, x) = (r / 3, r % 3);
            assert_eq!(features.row(r), image.patch(1, y, x));
        }
    }

    #[test]
    fn boosted_layer_order_is_deepest_last() {
        let image = token_set(2, 1, 1, 6, 9);
        let features =
            assemble_features(std::slice::from_ref(&image), AssemblyMode::BoostedConcat4).unwrap();
        let row = features.row(0);
        for (slot, layer) in (2..6).enumerate() {
            assert_eq!(&row[slot * 2..(slot + 1) * 2], image.patch(layer, 0, 0));
        }
    }

    #[test]
    fn boosted_requires_four_layers() {
        let image = token_set(2, 1, 1, 3, 9);
        assert!(assemble_features(&[image], AssemblyMode::BoostedConcat4).is_err());
    }

    #[test]
    fn zero_features_converge_to_log_c() {
        // 3 classes, balanced labels, all-zero features
        let features = FeatureMatrix::new(9, 4, vec![0.0; 36], AssemblyMode::ClsLast).unwrap();
        let labels = vec![0, 1, 2, 0, 1, 2, 0, 1, 2];
        let config = TrainConfig {
            l2: 1e-3,
            epochs: 50,
            ..TrainConfig::default()
        };
        let model = train_linear_probe(&features, &labels, &config).unwrap();
        assert!((model.final_loss() - 3f64.ln()).abs() < 1e-6);
        // zero features mean the weight gradient is exactly l2*W = 0;
        // biases see only float residue of the balanced-label cancellation
        assert!(model.weights.iter().all(|&w| w == 0.0));
        assert!(model.bias.iter().all(|&b| b.abs() < 1e-12));
    }

    fn blob_features(
        n_per: usize,
        centers: &[(f32, f32)],
        spread: f32,
        seed: u64,
    ) -> (FeatureMatrix, Vec<usize>) {
        let mut rng = chacha(seed);
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (class, &(cx, cy)) in centers.iter().enumerate() {
            for _ in 0..n_per {
                values.push(cx + (rng.random::<f32>() - 0.5) * spread);
                values.push(cy + (rng.random::<f32>() - 0.5) * spread);
                labels.push(class);
            }
        }
        (
            FeatureMatrix::new(labels.len(), 2, values, AssemblyMode::ClsLast).unwrap(),
            labels,
        )
    }

    #[test]
    fn separable_blobs_reach_full_training_accuracy() {
        let (features, labels) = blob_features(30, &[(-2.0, 0.0), (2.0, 0.0)], 0.6, 3);
        let config = TrainConfig {
            l2: 0.0,
            learning_rate: 1.0,
            epochs: 500,
            seed: 0,
        };
        let model = train_linear_probe(&features, &labels, &config).unwrap();
        let proba = predict_proba(&model, &features).unwrap();
        let correct = (0..labels.len())
            .filter(|&i| proba.predicted_class(i) == labels[i])
            .count();
        assert_eq!(correct, labels.len());
    }

    /// Central finite differences over every parameter.
    fn finite_difference_check(
        features: &FeatureMatrix,
        labels: &[usize],
        classes: usize,
        l2: f64,
        rng: &mut impl Rng,
    ) -> f64 {
        let dim = features.dim();
        let mut weights: Vec<f64> = (0..classes * dim)
            .map(|_| rng.random::<f64>() - 0.5)
            .collect();
        let mut bias: Vec<f64> = (0..classes).map(|_| rng.random::<f64>() - 0.5).collect();
        let (_, grad_w, grad_b) = probe_loss_grad(&weights, &bias, features, labels, l2);
        let h = 1e-5;
        let mut max_rel = 0f64;
        for p in 0..weights.len() + bias.len() {
            let slot = |w: &mut Vec<f64>, b: &mut Vec<f64>| -> *mut f64 {
                if p < w.len() {
                    &mut w[p]
                } else {
                    &mut b[p - w.len()]
                }
            };
            unsafe {
                let ptr = slot(&mut weights, &mut bias);
                let orig = *ptr;
                *ptr = orig + h;
                let (hi, _, _) = probe_loss_grad(&weights, &bias, features, labels, l2);
                *ptr = orig - h;
                let (lo, _, _) = probe_loss_grad(&weights, &bias, features, labels, l2);
                *ptr = orig;
                let numeric = (hi - lo) / (2.0 * h);
                let analytic = if p < grad_w.len() {
                    grad_w[p]
                } else {
                    grad_b[p - grad_w.len()]
                };
                let rel = (analytic - numeric).abs() / numeric.abs().max(1e-8);
                max_rel = max_rel.max(rel);
            }
        }
        max_rel
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = chacha(41);
        for _ in 0..20 {
            let n = 5;
            let classes = 3;
            let values: Vec<f32> = (0..n * 4)
                .map(|_| rng.random::<f32>() * 2.0 - 1.0)
                .collect();
            let features = FeatureMatrix::new(n, 4, values, AssemblyMode::ClsLast).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let max_rel = finite_difference_check(&features, &labels, classes, 1e-3, &mut rng);
            assert!(max_rel < 1e-4, "max relative error {max_rel}");
        }
    }

    #[test]
    fn training_log_is_non_increasing_and_doubling_epochs_never_hurts() {
        let (features, labels) =
            blob_features(20, &[(0.0, 0.0), (1.0, 1.5), ((-1.5), 0.5)], 1.4, 6);
        let short = TrainConfig {
            epochs: 50,
            ..TrainConfig::default()
        };
        let long = TrainConfig {
            epochs: 100,
            ..TrainConfig::default()
        };
        let a = train_linear_probe(&features, &labels, &short).unwrap();
        let b = train_linear_probe(&features, &labels, &long).unwrap();
        assert!(a.training_log.windows(2).all(|w| w[1] <= w[0]));
        assert!(b.final_loss() <= a.final_loss() + 1e-12);
    }

    #[test]
    fn predict_proba_rows_sum_to_one_and_shift_invariant() {
        let mut rng = chacha(51);
        let features = FeatureMatrix::new(
            8,
            3,
            (0..24).map(|_| rng.random::<f32>()).collect(),
            AssemblyMode::ClsLast,
        )
        .unwrap();
        let mut model = ProbeModel {
            classes: 4,
            dim: 3,
            weights: (0..12).map(|_| rng.random::<f64>() * 3.0 - 1.5).collect(),
            bias: (0..4).map(|_| rng.random::<f64>()).collect(),
            l2: 0.0,
            training_log: vec![0.0],
        };
        let proba = predict_proba(&model, &features).unwrap();
        for i in 0..8 {
            let sum: f64 = proba.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            // independent exponent-normalize oracle
            let x = features.row(i);
            let logits: Vec<f64> = (0..4)
                .map(|c| {
                    model.weights[c * 3..(c + 1) * 3]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * f64::from(*v))
                        .sum::<f64>()
                        + model.bias[c]
                })
                .collect();
            let denom: f64 = logits.iter().map(|z| z.exp()).sum();
            for c in 0..4 {
                assert!((proba.row(i)[c] - logits[c].exp() / denom).abs() < 1e-12);
            }
        }
        // shifting every bias by a constant leaves probabilities unchanged
        let before = predict_proba(&model, &features).unwrap();
        for b in model.bias.iter_mut() {
            *b += 7.25;
        }
        let after = predict_proba(&model, &features).unwrap();
        for (x, y) in before.values.iter().zip(&after.values) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let features = FeatureMatrix::new(2, 3, vec![1.0; 6], AssemblyMode::ClsLast).unwrap();
        let model = ProbeModel {
            classes: 5,
            dim: 3,
            weights: vec![0.0; 15],
            bias: vec![0.0; 5],
            l2: 0.0,
            training_log: vec![0.0],
        };
        let proba = predict_proba(&model, &features).unwrap();
        for i in 0..2 {
            for &p in proba.row(i) {
                assert!((p - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seg_head_param_count_matches_backbone_scale() {
        let features =
            FeatureMatrix::new(4, 768, vec![0.5; 4 * 768], AssemblyMode::PatchGrid).unwrap();
        let labels = vec![true, false, true, false];
        let head = train_seg_head(
            &features,
            &labels,
            &TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(head.param_count(), 769);
    }

    #[test]
    fn separable_patches_reach_full_accuracy() {
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut rng = chacha(61);
        for i in 0..60 {
            let positive = i % 2 == 0;
            let base = if positive { 2.0 } else { -2.0 };
            values.push(base + rng.random::<f32>() * 0.5);
            values.push(rng.random::<f32>());
            labels.push(positive);
        }
        let features = FeatureMatrix::new(60, 2, values, AssemblyMode::PatchGrid).unwrap();
        let config = TrainConfig {
            l2: 0.0,
            learning_rate: 1.0,
            epochs: 400,
            seed: 0,
        };
        let head = train_seg_head(&features, &labels, &config).unwrap();
        for i in 0..60 {
            let z = head.patch_logit(features.row(i));
            assert_eq!(z >= 0.0, labels[i], "patch {i}");
        }
    }

    #[test]
    fn all_background_labels_give_prior_only_head() {
        let features = FeatureMatrix::new(5, 3, vec![0.3; 15], AssemblyMode::PatchGrid).unwrap();
        let head = train_seg_head(&features, &[false; 5], &TrainConfig::default()).unwrap();
        assert!(head.prior_only);
        assert!(head.weights.iter().all(|&w| w == 0.0));
        assert!(head.bias < 0.0);
        let tokens = token_set(3, 2, 2, 1, 3);
        let mask = predict_mask(&head, &tokens, 4, 4).unwrap();
        assert_eq!(mask.count_ones(), 0);
    }

    #[test]
    fn seg_gradient_matches_finite_differences() {
        let mut rng = chacha(71);
        for _ in 0..10 {
            let n = 6;
            let dim = 3;
            let values: Vec<f32> = (0..n * dim).map(|_| rng.random::<f32>() - 0.5).collect();
            let features = FeatureMatrix::new(n, dim, values, AssemblyMode::PatchGrid).unwrap();
            let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            if labels.iter().all(|&b| b) || labels.iter().all(|&b| !b) {
                continue;
            }
            let weights: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
            let bias = rng.random::<f64>() - 0.5;
            let (_, grad_w, grad_b) = seg_loss_grad(&weights, bias, &features, &labels, 1e-3);
            let h = 1e-5;
            for p in 0..=dim {
                let mut w_hi = weights.clone();
                let mut w_lo = weights.clone();
                let mut b_hi = bias;
                let mut b_lo = bias;
                if p < dim {
                    w_hi[p] += h;
                    w_lo[p] -= h;
                } else {
                    b_hi += h;
                    b_lo -= h;
                }
                let (hi, _, _) = seg_loss_grad(&w_hi, b_hi, &features, &labels, 1e-3);
                let (lo, _, _) = seg_loss_grad(&w_lo, b_lo, &features, &labels, 1e-3);
                let numeric = (hi - lo) / (2.0 * h);
                let analytic = if p < dim { grad_w[p] } else { grad_b };
                let rel = (analytic - numeric).abs() / numeric.abs().max(1e-8);
                assert!(rel < 1e-4, "param {p}: rel {rel}");
            }
        }
    }

    #[test]
    fn uniform_positive_logits_fill_the_mask() {
        let dim = 3;
        let head = SegHead {
            dim,
            weights: vec![0.0; dim],
            bias: 2.0,
            threshold: 0.5,
            prior_only: false,
            training_log: vec![0.0],
        };
        let tokens = token_set(dim, 2, 3, 1, 4);
        let mask = predict_mask(&head, &tokens, 6, 9).unwrap();
        assert_eq!(mask.count_ones(), 54);
    }

    #[test]
    fn identity_upsample_matches_patch_decisions() {
        let dim = 4;
        let mut rng = chacha(81);
        let head = SegHead {
            dim,
            weights: (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
            bias: 0.1,
            threshold: 0.5,
            prior_only: false,
            training_log: vec![0.0],
        };
        let tokens = token_set(dim, 3, 5, 1, 5);
        let mask = predict_mask(&head, &tokens, 3, 5).unwrap();
        for y in 0..3 {
            for x in 0..5 {
                let z = head.patch_logit(tokens.patch(0, y, x));
                assert_eq!(mask.data[y * 5 + x], z >= 0.0);
            }
        }
    }

    #[test]
    fn bilinear_two_by_two_closed_form() {
        // a plane stays a plane under bilinear interpolation: grid
        // [[0,3],[6,9]] at scale 1/3 gives value 2y + x at output (y, x)
        let grid = vec![0.0, 3.0, 6.0, 9.0];
        let out = bilinear_upsample(&grid, 2, 2, 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                let expected = 2.0 * y as f64 + x as f64;
                assert!((out[y * 4 + x] - expected).abs() < 1e-12);
            }
        }
        // independent closed-form oracle on a non-planar grid
        let grid = vec![1.0, -2.0, 0.5, 4.0];
        let out = bilinear_upsample(&grid, 2, 2, 5, 3);
        for oy in 0..5 {
            for ox in 0..3 {
                let sy = oy as f64 * 1.0 / 4.0;
                let sx = ox as f64 * 1.0 / 2.0;
                let expected = grid[0] * (1.0 - sy) * (1.0 - sx)
                    + grid[1] * (1.0 - sy) * sx
                    + grid[2] * sy * (1.0 - sx)
                    + grid[3] * sy * sx;
                assert!((out[oy * 3 + ox] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn boosted_zeroing_one_layer_changes_only_its_slice() {
        let dim = 3;
        let image = token_set(dim, 2, 2, 4, 15);
        let base =
            assemble_features(std::slice::from_ref(&image), AssemblyMode::BoostedConcat4).unwrap();
        for zeroed in 0..4 {
            let layers: Vec<LayerTokens> = (0..4)
                .map(|l| {
                    let mut tokens = image.layer(l).clone();
                    if l == zeroed {
                        tokens.patches.iter_mut().for_each(|v| *v = 0.0);
                        tokens.cls.iter_mut().for_each(|v| *v = 0.0);
                    }
                    tokens
                })
                .collect();
            let altered = LayerTokenSet::new(dim, 2, 2, layers).unwrap();
            let features = assemble_features(&[altered], AssemblyMode::BoostedConcat4).unwrap();
            for r in 0..4 {
                for slot in 0..4 {
                    let a = &base.row(r)[slot * dim..(slot + 1) * dim];
                    let b = &features.row(r)[slot * dim..(slot + 1) * dim];
                    if slot == zeroed {
                        assert!(b.iter().all(|&v| v == 0.0));
                    } else {
                        assert_eq!(a, b);
                    }
                }
            }
        }
    }

    #[test]
    fn too_small_output_is_rejected() {
        let head = SegHead {
            dim: 2,
            weights: vec![0.0; 2],
            bias: 0.0,
            threshold: 0.5,
            prior_only: false,
            training_log: vec![0.0],
        };
        let tokens = token_set(2, 3, 3, 1, 2);
        assert!(predict_mask(&head, &tokens, 2, 3).is_err());
    }

    #[test]
    fn sweep_selects_by_validation_accuracy() {
        let (train_f, train_y) = blob_features(40, &[(-1.5, 0.0), (1.5, 0.0)], 1.0, 5);
        let (val_f, val_y) = blob_features(20, &[(-1.5, 0.0), (1.5, 0.0)], 1.0, 6);
        let base = TrainConfig {
            epochs: 120,
            ..TrainConfig::default()
        };
        let sweep = sweep_l2(&train_f, &train_y, &val_f, &val_y, &DEFAULT_L2_GRID, &base).unwrap();
        assert_eq!(sweep.results.len(), 5);
        assert!(sweep.best_accuracy >= 0.9);
        assert!(DEFAULT_L2_GRID.contains(&sweep.best_l2));
    }

    #[test]
    fn probe_and_head_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let (features, labels) = blob_features(15, &[(0.0, 0.0), (3.0, 1.0)], 1.0, 8);
        let config = TrainConfig {
            epochs: 60,
            ..TrainConfig::default()
        };
        let model = train_linear_probe(&features, &labels, &config).unwrap();
        let path = dir.path().join("probe.emb1");
        save_probe(&model, &config, &path).unwrap();
        let (loaded, loaded_config) = load_probe(&path).unwrap();
        assert_eq!(loaded.classes, model.classes);
        assert_eq!(loaded.dim, model.dim);
        assert_eq!(loaded_config, config);
        // f32 round-trip keeps predictions close
        let a = predict_proba(&model, &features).unwrap();
        let b = predict_proba(&loaded, &features).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-5);
        }

        let patch_labels: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        let head = train_seg_head(&features, &patch_labels, &config).unwrap();
        let head_path = dir.path().join("head.emb1");
        save_seg_head(&head, &config, &head_path).unwrap();
        let (loaded_head, _) = load_seg_head(&head_path).unwrap();
        assert_eq!(loaded_head.dim, head.dim);
        assert_eq!(loaded_head.param_count(), head.param_count());
        assert_eq!(loaded_head.prior_only, head.prior_only);
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let features = FeatureMatrix::new(2, 3, vec![0.0; 6], AssemblyMode::ClsLast).unwrap();
        let model = ProbeModel {
            classes: 2,
            dim: 4,
            weights: vec![0.0; 8],
            bias: vec![0.0; 2],
            l2: 0.0,
            training_log: vec![0.0],
        };
        assert!(predict_proba(&model, &features).is_err());
    }

    #[test]
    fn non_finite_features_are_rejected() {
        assert!(FeatureMatrix::new(1, 2, vec![f32::NAN, 0.0], AssemblyMode::ClsLast).is_err());
    }
}
