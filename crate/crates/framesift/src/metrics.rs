//! Evaluation metrics: confusion matrices, macro/micro F1, one-vs-rest
//! macro AUROC, segmentation overlap scores, cross-validation
//! aggregation, and checkpoint selection by downstream metric.
//!
//! Per-class F1 uses P = tp/(tp+fp), R = tp/(tp+fn), F1 = 2PR/(P+R) with
//! 0/0 := 0; classes absent from both truth and predictions are excluded
//! from the macro mean. Micro F1 = tp/(tp + (fp+fn)/2), which equals
//! accuracy for single-label multiclass input. AUROC uses the rank
//! statistic with midrank tie handling (the Mann-Whitney correspondence).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// C x C counts; entry `(t, p)` is the number of items of true class `t`
/// predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        correct as f64 / self.total() as f64
    }
}

/// Exact confusion counts over parallel label/prediction slices.
pub fn confusion(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::invalid(format!(
            "{} labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if classes == 0 {
        return Err(Error::invalid("classes must be positive"));
    }
    let mut counts = vec![0u64; classes * classes];
    for (i, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        if t >= classes {
            return Err(Error::invalid(format!(
                "label {t} out of range [0, {classes}) at index {i}"
            )));
        }
        if p >= classes {
            return Err(Error::invalid(format!(
                "prediction {p} out of range [0, {classes}) at index {i}"
            )));
        }
        counts[t * classes + p] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Scores {
    pub macro_f1: f64,
    pub micro_f1: f64,
    /// `None` for classes with no true or predicted items.
    pub per_class: Vec<Option<f64>>,
}

/// Macro, micro, and per-class F1 from a confusion matrix.
pub fn f1_scores(cm: &ConfusionMatrix) -> Result<F1Scores> {
    if cm.total() == 0 {
        return Err(Error::validation("confusion matrix has no counts"));
    }
    let c = cm.classes();
    let mut per_class = Vec::with_capacity(c);
    let mut present = 0usize;
    let mut macro_sum = 0f64;
    let mut tp_total = 0u64;
    let mut fp_total = 0u64;
    let mut fn_total = 0u64;
    for class in 0..c {
        let tp = cm.get(class, class);
        let fp: u64 = (0..c)
            .filter(|&t| t != class)
            .map(|t| cm.get(t, class))
            .sum();
        let fn_: u64 = (0..c)
            .filter(|&p| p != class)
            .map(|p| cm.get(class, p))
            .sum();
        tp_total += tp;
        fp_total += fp;
        fn_total += fn_;
        if tp + fp + fn_ == 0 {
            per_class.push(None);
            continue;
        }
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(Some(f1));
        present += 1;
        macro_sum += f1;
    }
    let micro_f1 = tp_total as f64 / (tp_total as f64 + 0.5 * (fp_total + fn_total) as f64);
    Ok(F1Scores {
        macro_f1: macro_sum / present as f64,
        micro_f1,
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AurocResult {
    /// Unweighted mean over computable classes.
    pub macro_auroc: f64,
    pub per_class: Vec<Option<f64>>,
    /// Classes skipped because they never occur in `y_true`.
    pub skipped_classes: Vec<usize>,
}

/// Binary AUROC of `scores` for the positive set, by midrank statistic.
fn binary_auroc(scores: &[f64], positive: &[bool]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &item in &order[i..=j] {
            ranks[item] = midrank;
        }
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = n as f64 - n_pos;
    let rank_sum: f64 = (0..n).filter(|&i| positive[i]).map(|i| ranks[i]).sum();
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// One-vs-rest macro AUROC over an `n x classes` row-major score matrix.
pub fn auroc_ovr_macro(y_true: &[usize], scores: &[f64], classes: usize) -> Result<AurocResult> {
    let n = y_true.len();
    if classes == 0 || n == 0 {
        return Err(Error::invalid("empty input"));
    }
    if scores.len() != n * classes {
        return Err(Error::invalid(format!(
            "score matrix has {} values, expected {n} x {classes}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::validation("scores must be finite"));
    }
    if let Some(&bad) = y_true.iter().find(|&&t| t >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range")));
    }

    let mut per_class = vec![None; classes];
    let mut skipped_classes = Vec::new();
    let mut sum = 0f64;
    let mut computed = 0usize;
    for class in 0..classes {
        let positive: Vec<bool> = y_true.iter().map(|&t| t == class).collect();
        let n_pos = positive.iter().filter(|&&p| p).count();
        if n_pos == 0 {
            skipped_classes.push(class);
            continue;
        }
        if n_pos == n {
            // no negatives; undefined for this class
            skipped_classes.push(class);
            continue;
        }
        let column: Vec<f64> = (0..n).map(|i| scores[i * classes + class]).collect();
        let auc = binary_auroc(&column, &positive);
        per_class[class] = Some(auc);
        sum += auc;
        computed += 1;
    }
    if computed == 0 {
        return Err(Error::validation(
            "AUROC undefined: fewer than two classes present",
        ));
    }
    Ok(AurocResult {
        macro_auroc: sum / computed as f64,
        per_class,
        skipped_classes,
    })
}

/// A binary mask with explicit dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::invalid(format!(
                "mask data has {} values for {h}x{w}",
                data.len()
            )));
        }
        Ok(BinaryMask { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: bool) -> Self {
        BinaryMask {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSegScores {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegScores {
    pub m_dice: f64,
    pub m_iou: f64,
    pub m_prec: f64,
    pub m_rec: f64,
    pub per_image: Vec<ImageSegScores>,
}

/// Per-image Dice/IoU/precision/recall and their unweighted means.
///
/// An empty prediction against an empty ground truth scores 1.0 on all
/// four; any other empty case scores 0 (precision with an empty
/// prediction is 0 by convention).
pub fn seg_metrics(pred_masks: &[BinaryMask], gt_masks: &[BinaryMask]) -> Result<SegScores> {
    if pred_masks.len() != gt_masks.len() {
        return Err(Error::invalid(format!(
            "{} predictions vs {} ground-truth masks",
            pred_masks.len(),
            gt_masks.len()
        )));
    }
    if pred_masks.is_empty() {
        return Err(Error::invalid("no mask pairs"));
    }
    let mut per_image = Vec::with_capacity(pred_masks.len());
    for (image, (pred, gt)) in pred_masks.iter().zip(gt_masks).enumerate() {
        if pred.h != gt.h || pred.w != gt.w {
            return Err(Error::invalid(format!(
                "image {image}: mask dimensions {}x{} vs {}x{}",
                pred.h, pred.w, gt.h, gt.w
            )));
        }
        let p = pred.count_ones();
        let g = gt.count_ones();
        let intersection = pred
            .data
            .iter()
            .zip(&gt.data)
            .filter(|(a, b)| **a && **b)
            .count();
        let union = p + g - intersection;
        let scores = if p == 0 && g == 0 {
            ImageSegScores {
                dice: 1.0,
                iou: 1.0,
                precision: 1.0,
                recall: 1.0,
            }
        } else {
            ImageSegScores {
                dice: 2.0 * intersection as f64 / (p + g) as f64,
                iou: intersection as f64 / union as f64,
                precision: if p == 0 {
                    0.0
                } else {
                    intersection as f64 / p as f64
                },
                recall: if g == 0 {
                    0.0
                } else {
                    intersection as f64 / g as f64
                },
            }
        };
        per_image.push(scores);
    }
    let n = per_image.len() as f64;
    Ok(SegScores {
        m_dice: per_image.iter().map(|s| s.dice).sum::<f64>() / n,
        m_iou: per_image.iter().map(|s| s.iou).sum::<f64>() / n,
        m_prec: per_image.iter().map(|s| s.precision).sum::<f64>() / n,
        m_rec: per_image.iter().map(|s| s.recall).sum::<f64>() / n,
        per_image,
    })
}

/// Per-fold metric values with their mean and population standard
/// deviation, plus the protocol that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: String,
    pub split_name: String,
    pub seed: u64,
    pub per_fold: Vec<f64>,
    pub mean: f64,
    pub std_dev: f64,
}

/// Unweighted mean and population sigma over fold values.
pub fn aggregate_cv(
    task: impl Into<String>,
    split_name: impl Into<String>,
    seed: u64,
    per_fold: &[f64],
) -> Result<EvalReport> {
    if per_fold.is_empty() {
        return Err(Error::invalid("need at least one fold"));
    }
    let n = per_fold.len() as f64;
    let mean = per_fold.iter().sum::<f64>() / n;
    let variance = per_fold.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(EvalReport {
        task: task.into(),
        split_name: split_name.into(),
        seed,
        per_fold: per_fold.to_vec(),
        mean,
        std_dev: variance.sqrt(),
    })
}

impl EvalReport {
    /// Structured text rendering.
    pub fn to_text(&self) -> String {
        let folds: Vec<String> = self.per_fold.iter().map(|v| format!("{v:?}")).collect();
        format!(
            "task: {}\nprotocol: {} (seed {})\nfolds: {}\nmean: {:?}\nstd: {:?}\n",
            self.task,
            self.split_name,
            self.seed,
            folds.join(", "),
            self.mean,
            self.std_dev
        )
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::storage(path, e))
    }
}

/// One comma-separated results row in the common table schema:
/// backbone, pre-training data tag, then metric values in order.
pub fn table_row(backbone: &str, data_tag: &str, metrics: &[(&str, f64)]) -> String {
    let mut fields = vec![backbone.to_string(), data_tag.to_string()];
    fields.extend(metrics.iter().map(|(_, v)| format!("{v:.3}")));
    fields.join(",")
}

/// Header row matching [`table_row`].
pub fn table_header(metrics: &[(&str, f64)]) -> String {
    let mut fields = vec!["backbone".to_string(), "pretrain_data".to_string()];
    fields.extend(metrics.iter().map(|(name, _)| name.to_string()));
    fields.join(",")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointEntry {
    pub step: u64,
    pub ssl_loss: f64,
    pub downstream_metric: f64,
}

/// Ordered series of checkpoint evaluations; steps strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSeries {
    entries: Vec<CheckpointEntry>,
}

impl CheckpointSeries {
    pub fn new(entries: Vec<CheckpointEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("checkpoint series is empty"));
        }
        if entries.windows(2).any(|w| w[1].step <= w[0].step) {
            return Err(Error::invalid("steps must be strictly increasing"));
        }
        Ok(CheckpointSeries { entries })
    }

    pub fn entries(&self) -> &[CheckpointEntry] {
        &self.entries
    }

    /// Parses `step,ssl_loss,downstream_metric` lines ("nan" allowed).
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::format(
                    path,
                    format!("line {}: expected step,ssl_loss,metric", lineno + 1),
                ));
            }
            let step = fields[0]
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad step", lineno + 1)))?;
            let ssl_loss: f64 = fields[1]
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad loss", lineno + 1)))?;
            let downstream_metric: f64 = fields[2]
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad metric", lineno + 1)))?;
            entries.push(CheckpointEntry {
                step,
                ssl_loss,
                downstream_metric,
            });
        }
        CheckpointSeries::new(entries)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointChoice {
    /// Step with the best downstream metric (earliest on ties).
    pub best_step: u64,
    pub best_metric: f64,
    /// Step with the lowest SSL loss (earliest on ties); reported so a
    /// divergence between the two is visible.
    pub loss_argmin_step: u64,
    /// Rows dropped for a NaN metric or loss.
    pub skipped_rows: usize,
}

/// Picks the checkpoint by downstream metric and reports the loss argmin
/// alongside. Rows with NaN in a column are skipped for that column.
pub fn select_checkpoint(series: &CheckpointSeries) -> Result<CheckpointChoice> {
    let mut best: Option<(u64, f64)> = None;
    let mut loss_best: Option<(u64, f64)> = None;
    let mut skipped_rows = 0usize;
    for entry in series.entries() {
        let mut skipped = false;
        if entry.downstream_metric.is_nan() {
            skipped = true;
        } else {
            match best {
                Some((_, metric)) if metric >= entry.downstream_metric => {}
                _ => best = Some((entry.step, entry.downstream_metric)),
            }
        }
        if entry.ssl_loss.is_nan() {
            skipped = true;
        } else {
            match loss_best {
                Some((_, loss)) if loss <= entry.ssl_loss => {}
                _ => loss_best = Some((entry.step, entry.ssl_loss)),
            }
        }
        if skipped {
            skipped_rows += 1;
        }
    }
    let (best_step, best_metric) =
        best.ok_or_else(|| Error::validation("every metric entry is NaN"))?;
    let (loss_argmin_step, _) =
        loss_best.ok_or_else(|| Error::validation("every loss entry is NaN"))?;
    Ok(CheckpointChoice {
        best_step,
        best_metric,
        loss_argmin_step,
        skipped_rows,
    })
}

/// Renders a checkpoint choice as a small text report.
pub fn checkpoint_report(choice: &CheckpointChoice) -> String {
    let mut out = String::new();
    out.push_str(&format!("best_step: {}\n", choice.best_step));
    out.push_str(&format!("best_metric: {:?}\n", choice.best_metric));
    out.push_str(&format!("loss_argmin_step: {}\n", choice.loss_argmin_step));
    if choice.skipped_rows > 0 {
        out.push_str(&format!("skipped_rows: {}\n", choice.skipped_rows));
    }
    out
}
