//! Segmentation metrics over binary masks, checkpoint evaluation and
//! the score table.
//!
//! Foreground IoU, background IoU, their mean and Dice all use the
//! convention that an empty class on both sides scores 1: a method that
//! correctly predicts "nothing here" is not penalized for it.

use ndarray::Array2;

use crate::data::DatasetHandle;
use crate::data::{resize_sample, Split};
use crate::error::{FdError, Result};
use crate::tensor::Scalar;
use crate::training::{Checkpoint, TrainConfig};

fn check_pair(pred: &Array2<f32>, gt: &Array2<f32>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(FdError::Shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    for (name, m) in [("prediction", pred), ("ground truth", gt)] {
        if !m.iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(FdError::Validation(format!("{name} mask is not binary")));
        }
    }
    Ok(())
}

fn counts(pred: &Array2<f32>, gt: &Array2<f32>) -> (usize, usize, usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    let mut tn = 0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p == 1.0, g == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fn_, tn)
}

fn safe_ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Dice coefficient `2|P∩G| / (|P|+|G|)`; 1 when both masks are empty.
pub fn dice(pred: &Array2<f32>, gt: &Array2<f32>) -> Result<f64> {
    check_pair(pred, gt)?;
    let (tp, fp, fn_, _) = counts(pred, gt);
    Ok(safe_ratio(2 * tp, 2 * tp + fp + fn_))
}

/// Mean of foreground and background IoU; an empty class on both sides
/// contributes 1.
pub fn miou(pred: &Array2<f32>, gt: &Array2<f32>) -> Result<f64> {
    let s = binary_scores(pred, gt)?;
    Ok(s.miou)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PairScores {
    pub iou_fg: f64,
    pub iou_bg: f64,
    pub miou: f64,
    pub dice: f64,
}

/// All four scores of one prediction/ground-truth pair.
pub fn binary_scores(pred: &Array2<f32>, gt: &Array2<f32>) -> Result<PairScores> {
    check_pair(pred, gt)?;
    let (tp, fp, fn_, tn) = counts(pred, gt);
    let iou_fg = safe_ratio(tp, tp + fp + fn_);
    let iou_bg = safe_ratio(tn, tn + fp + fn_);
    Ok(PairScores {
        iou_fg,
        iou_bg,
        miou: 0.5 * (iou_fg + iou_bg),
        dice: safe_ratio(2 * tp, 2 * tp + fp + fn_),
    })
}

/// Published scores on the cultured-cell benchmark, for context next to
/// a run's own numbers. These are quoted, not reproduced here.
pub const REFERENCE_NOTE: &str = "reference, not reproduced";
pub const REFERENCE_SCORES: [(&str, f64, f64); 8] = [
    ("UNet", 67.1, 74.3),
    ("Deeplab", 58.4, 63.5),
    ("UNet++", 60.2, 68.4),
    ("TransUnet", 56.8, 61.0),
    ("PraNet", 70.6, 77.9),
    ("SwinUnet", 53.7, 59.4),
    ("UCtransNet", 75.7, 82.1),
    ("Ours", 80.8, 86.2),
];

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ImageScores {
    pub id: String,
    pub iou_fg: f64,
    pub iou_bg: f64,
    pub miou: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ReferenceScore {
    pub method: String,
    pub miou_pct: f64,
    pub dice_pct: f64,
    pub note: String,
}

/// Evaluation result: per-image scores in [0,1], their plain means, the
/// evaluated configuration and the quoted reference table.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub threshold: f64,
    pub config: TrainConfig,
    pub per_image: Vec<ImageScores>,
    pub aggregate: PairScores,
    pub reference: Vec<ReferenceScore>,
}

impl MetricsReport {
    /// Two-column score table (percentages), this run first, references
    /// after.
    pub fn render_table(&self) -> String {
        let mut rows: Vec<(String, f64, f64)> = vec![(
            "this run".to_string(),
            100.0 * self.aggregate.miou,
            100.0 * self.aggregate.dice,
        )];
        for r in &self.reference {
            rows.push((
                format!("{} ({})", r.method, r.note),
                r.miou_pct,
                r.dice_pct,
            ));
        }
        let name_w = rows
            .iter()
            .map(|(n, _, _)| n.len())
            .chain(["Method".len()].into_iter())
            .max()
            .unwrap();
        let mut out = String::new();
        out.push_str(&format!(
            "{:<name_w$}  {:>7}  {:>7}\n",
            "Method", "mIoU\u{2191}", "Dice\u{2191}"
        ));
        for (name, m, d) in rows {
            out.push_str(&format!("{name:<name_w$}  {m:>7.1}  {d:>7.1}\n"));
        }
        out
    }
}

fn reference_rows() -> Vec<ReferenceScore> {
    REFERENCE_SCORES
        .iter()
        .map(|&(method, miou_pct, dice_pct)| ReferenceScore {
            method: method.to_string(),
            miou_pct,
            dice_pct,
            note: REFERENCE_NOTE.to_string(),
        })
        .collect()
}

/// Score a checkpoint on a dataset. Samples are resized to the
/// checkpoint's training resolution and thresholded predictions are
/// compared against the equally resized ground truth.
pub fn evaluate<T: Scalar>(
    checkpoint: &Checkpoint<T>,
    dataset: &DatasetHandle,
    threshold: f64,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(FdError::Validation(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let (store, net) = checkpoint.instantiate()?;
    let mut per_image = Vec::with_capacity(dataset.len());
    let mut sums = (0.0, 0.0, 0.0, 0.0);
    for i in 0..dataset.len() {
        let sample = resize_sample(&dataset.get(i)?, checkpoint.config.resize)?;
        let pred = net.predict_mask(&store, &sample.image, threshold)?;
        let s = binary_scores(&pred, &sample.mask)?;
        sums.0 += s.iou_fg;
        sums.1 += s.iou_bg;
        sums.2 += s.miou;
        sums.3 += s.dice;
        per_image.push(ImageScores {
            id: sample.id,
            iou_fg: s.iou_fg,
            iou_bg: s.iou_bg,
            miou: s.miou,
            dice: s.dice,
        });
    }
    let n = per_image.len() as f64;
    Ok(MetricsReport {
        split: dataset.split,
        threshold,
        config: checkpoint.config.clone(),
        per_image,
        aggregate: PairScores {
            iou_fg: sums.0 / n,
            iou_bg: sums.1 / n,
            miou: sums.2 / n,
            dice: sums.3 / n,
        },
        reference: reference_rows(),
    })
}
