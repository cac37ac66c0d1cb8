//! Binary segmentation metrics and seed aggregation.

use std::fmt::Write as _;

use gpmseg_tensor::ops::sigmoid;
use gpmseg_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `1` where `sigmoid(logit) > threshold`, else `0`.
pub fn binarize(logits: &Tensor, threshold: f64) -> Tensor {
    logits.map(|l| if sigmoid(l) > threshold { 1.0 } else { 0.0 })
}

/// `(DSC, IoU)` of two binary masks; two empty masks score `(1, 1)`.
pub fn dice_iou(pred: &Tensor, gt: &Tensor) -> Result<(f64, f64)> {
    dice_iou_slices(pred.data(), gt.data()).map_err(|e| {
        if pred.shape() != gt.shape() {
            invalid(format!("mask shapes differ: {:?} vs {:?}", pred.shape(), gt.shape()))
        } else {
            e
        }
    })
}

pub fn dice_iou_slices(pred: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(invalid(format!("mask sizes differ: {} vs {}", pred.len(), gt.len())));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        if (a != 0.0 && a != 1.0) || (b != 0.0 && b != 1.0) {
            return Err(invalid(format!("masks must be binary, found {a} / {b}")));
        }
        let (a, b) = (a == 1.0, b == 1.0);
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return Ok((1.0, 1.0));
    }
    let dsc = 2.0 * inter as f64 / (p + g) as f64;
    let iou = inter as f64 / (p + g - inter) as f64;
    Ok((dsc, iou))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub dsc: f64,
    pub iou: f64,
}

/// Dataset scores as means over images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub dsc: f64,
    pub iou: f64,
    pub per_image: Vec<ImageScore>,
}

impl SegScores {
    pub fn from_images(per_image: Vec<ImageScore>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(invalid("no images to score"));
        }
        let n = per_image.len() as f64;
        Ok(Self {
            dsc: per_image.iter().map(|s| s.dsc).sum::<f64>() / n,
            iou: per_image.iter().map(|s| s.iou).sum::<f64>() / n,
            per_image,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub per_seed: Vec<SegScores>,
    pub mean_dsc: f64,
    pub mean_iou: f64,
}

pub fn aggregate(per_seed: Vec<SegScores>) -> Result<SeedAggregate> {
    if per_seed.is_empty() {
        return Err(invalid("cannot aggregate zero seeds"));
    }
    let n = per_seed.len() as f64;
    Ok(SeedAggregate {
        mean_dsc: per_seed.iter().map(|s| s.dsc).sum::<f64>() / n,
        mean_iou: per_seed.iter().map(|s| s.iou).sum::<f64>() / n,
        per_seed,
    })
}

/// Key-value report for one dataset and seed.
pub fn kv_report(dataset: &str, method: &str, seed: u64, scores: &SegScores) -> String {
    let mut s = String::new();
    writeln!(s, "# scores are means of per-image values, threshold {DEFAULT_THRESHOLD}").unwrap();
    writeln!(s, "dataset = {dataset}").unwrap();
    writeln!(s, "method = {method}").unwrap();
    writeln!(s, "seed = {seed}").unwrap();
    writeln!(s, "images = {}", scores.per_image.len()).unwrap();
    writeln!(s, "dsc = {:.6}", scores.dsc).unwrap();
    writeln!(s, "iou = {:.6}", scores.iou).unwrap();
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub method: String,
    pub dsc: f64,
    pub iou: f64,
}

pub const SUMMARY_HEADER: &str = "dataset,method,DSC,IoU";

/// Summary table, one row per (dataset, method); scores in percent.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{:.2},{:.2}", r.dataset, r.method, 100.0 * r.dsc, 100.0 * r.iou).unwrap();
    }
    s
}
