//! Pixel-level (AuPRC, FPR95) and object-level (IoU, AuIoU, mean F1) OOD metrics.

mod object;
mod pixel;

pub use object::{
    connected_components, default_grid, f1, iou, match_components, object_eval, ComponentCounts,
    ObjectAccumulator, ObjectEval, ThresholdPoint, MATCH_IOU,
};
pub use pixel::{auprc, fpr_at_tpr, pixel_eval, pr_curve, PixelEval};

use serde::{Deserialize, Serialize};

/// One row of the results table, in the column order AuPRC, FPR95, AuIoU, IoU, mean F1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub auprc: f64,
    pub fpr95: f64,
    pub auiou: f64,
    pub iou: f64,
    pub mean_f1: f64,
}

impl MetricRow {
    pub const HEADERS: [&'static str; 5] = ["AuPRC", "FPR95", "AuIoU", "IoU", "mean F1"];

    pub fn from_evals(pixel: &PixelEval, object: &ObjectEval) -> Self {
        MetricRow {
            auprc: pixel.auprc,
            fpr95: pixel.fpr95,
            auiou: object.auiou,
            iou: object.best_iou,
            mean_f1: object.mean_f1,
        }
    }

    pub fn values(&self) -> [f64; 5] {
        [self.auprc, self.fpr95, self.auiou, self.iou, self.mean_f1]
    }

    /// Whether larger is better for each column.
    pub const HIGHER_IS_BETTER: [bool; 5] = [true, false, true, true, true];

    /// Column-wise mean (macro average over datasets).
    pub fn macro_average(rows: &[MetricRow]) -> Option<MetricRow> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let mut acc = [0.0; 5];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Some(MetricRow {
            auprc: acc[0] / n,
            fpr95: acc[1] / n,
            auiou: acc[2] / n,
            iou: acc[3] / n,
            mean_f1: acc[4] / n,
        })
    }
}
