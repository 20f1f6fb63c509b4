//! Average precision of Canny edges (APCE) and mean intersection over
//! union (mIoU).

use std::path::Path;

use serde::Serialize;

use crate::edges::{grayscale, CannyResponse};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Canny smoothing used by the APCE sweep.
pub const APCE_SIGMA: f64 = 1.4;

/// High thresholds `0.01, 0.02, …, 0.99`; the low threshold of each is
/// `low_ratio · high`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSweep {
    pub highs: Vec<f64>,
    pub low_ratio: f64,
}

impl Default for ThresholdSweep {
    fn default() -> Self {
        Self { highs: (1..=99).map(|i| i as f64 / 100.0).collect(), low_ratio: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub apce: f64,
    /// Mean precision over the images with a non-empty source edge set at
    /// each threshold; `None` when every image is empty there.
    pub per_threshold_precision: Vec<Option<f64>>,
    /// `(image, threshold)` terms skipped because the source had no edges.
    pub skipped_pairs: usize,
    pub n_i: usize,
    pub n_j: usize,
}

/// APCE over paired source / output images (c×h×w, any channel count;
/// grayscale is the channel mean). Terms whose source edge set is empty
/// are excluded and the average is taken over the remaining terms.
pub fn apce<T: Scalar>(sources: &[Tensor<T>], outputs: &[Tensor<T>], sweep: &ThresholdSweep) -> Result<MetricReport> {
    if sources.len() != outputs.len() {
        return Err(Error::ShapeMismatch { context: "apce image lists", left: vec![sources.len()], right: vec![outputs.len()] });
    }
    let n_j = sweep.highs.len();
    let mut sums = vec![0.0; n_j];
    let mut counts = vec![0usize; n_j];
    for (src, out) in sources.iter().zip(outputs) {
        let (_, h, w) = src.chw();
        let (_, ho, wo) = out.chw();
        if (h, w) != (ho, wo) {
            return Err(Error::ShapeMismatch { context: "apce image pair", left: vec![h, w], right: vec![ho, wo] });
        }
        let rs = CannyResponse::new(&grayscale(src), h, w, APCE_SIGMA);
        let ro = CannyResponse::new(&grayscale(out), h, w, APCE_SIGMA);
        for (j, &mu) in sweep.highs.iter().enumerate() {
            let low = mu * sweep.low_ratio;
            let x = rs.threshold(mu, low);
            let nx = x.count();
            if nx == 0 {
                continue;
            }
            let y = ro.threshold(mu, low);
            let both = x.mask.iter().zip(&y.mask).filter(|(a, b)| **a && **b).count();
            sums[j] += both as f64 / nx as f64;
            counts[j] += 1;
        }
    }
    let included: usize = counts.iter().sum();
    if included == 0 {
        return Err(Error::NoMeasurableEdges);
    }
    let total: f64 = sums.iter().sum();
    Ok(MetricReport {
        apce: total / included as f64,
        per_threshold_precision: sums.iter().zip(&counts).map(|(&s, &c)| (c > 0).then(|| s / c as f64)).collect(),
        skipped_pairs: sources.len() * n_j - included,
        n_i: sources.len(),
        n_j,
    })
}

/// Writes `apce.csv` (threshold, mean precision) and `report.json`.
pub fn write_apce_reports(report: &MetricReport, sweep: &ThresholdSweep, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = String::from("threshold,mean_precision\n");
    for (mu, p) in sweep.highs.iter().zip(&report.per_threshold_precision) {
        match p {
            Some(p) => csv.push_str(&format!("{mu:.2},{p}\n")),
            None => csv.push_str(&format!("{mu:.2},\n")),
        }
    }
    let csv_path = dir.join("apce.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let json = serde_json::json!({
        "apce": report.apce,
        "skipped_pairs": report.skipped_pairs,
        "n_i": report.n_i,
        "n_j": report.n_j,
    });
    let json_path = dir.join("report.json");
    let text = serde_json::to_string_pretty(&json).expect("plain JSON values");
    std::fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IouReport {
    /// IoU per class; `None` for classes absent from the ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes present in the ground truth.
    pub miou: f64,
    /// `confusion[gt][pred]` pixel counts over non-ignored pixels.
    pub confusion: Vec<Vec<u64>>,
}

/// Per-class IoU from the confusion matrix and their mean over classes
/// present in `gt`. Pixels labelled `ignore_label` in `gt` are skipped; a
/// prediction of `ignore_label` on a labelled pixel counts as a miss.
pub fn miou(pred: &[u32], gt: &[u32], n_classes: usize, ignore_label: u32) -> Result<IouReport> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch { context: "miou label grids", left: vec![pred.len()], right: vec![gt.len()] });
    }
    let check = |label: u32, index: usize| {
        if label != ignore_label && label as usize >= n_classes {
            Err(Error::LabelOutOfRange { label, index, n_classes })
        } else {
            Ok(())
        }
    };
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    let mut missed = vec![0u64; n_classes];
    for (i, (&p, &t)) in pred.iter().zip(gt).enumerate() {
        check(p, i)?;
        check(t, i)?;
        if t == ignore_label {
            continue;
        }
        if p == ignore_label {
            missed[t as usize] += 1;
        } else {
            confusion[t as usize][p as usize] += 1;
        }
    }
    let mut per_class = vec![None; n_classes];
    let mut present = Vec::new();
    for c in 0..n_classes {
        let gt_total: u64 = confusion[c].iter().sum::<u64>() + missed[c];
        if gt_total == 0 {
            continue;
        }
        let tp = confusion[c][c];
        let fp: u64 = (0..n_classes).filter(|&r| r != c).map(|r| confusion[r][c]).sum();
        let iou = tp as f64 / (gt_total + fp) as f64;
        per_class[c] = Some(iou);
        present.push(iou);
    }
    if present.is_empty() {
        return Err(Error::EmptyDomain("ground truth has no labelled pixels"));
    }
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport { per_class, miou, confusion })
}
