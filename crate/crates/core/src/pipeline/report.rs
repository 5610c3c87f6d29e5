//! Report files: JSON, CSV and SVG renderings of evaluations and loss histories.
//! Every rendering starts with the config hash and is a pure function of its inputs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Evaluation;
use crate::metrics::{pixel_eval, MetricRow, ObjectEval, ThresholdPoint};
use crate::model::LossRecord;
use crate::scoring::ScoreMap;
use crate::synthio::LabeledScene;

/// Per-image metrics. Pixel metrics are absent when an image has only one label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub index: usize,
    pub ood_pixels: usize,
    pub auprc: Option<f64>,
    pub fpr95: Option<f64>,
    pub auiou: f64,
    pub iou: f64,
    pub mean_f1: f64,
}

impl ImageRow {
    pub fn new(index: usize, object: ObjectEval, map: &ScoreMap, scene: &LabeledScene) -> Self {
        let pixel = pixel_eval(&map.ood_score, &scene.ood_mask).ok();
        ImageRow {
            index,
            ood_pixels: scene.ood_pixels(),
            auprc: pixel.as_ref().map(|p| p.auprc),
            fpr95: pixel.as_ref().map(|p| p.fpr95),
            auiou: object.auiou,
            iou: object.best_iou,
            mean_f1: object.mean_f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub dataset: String,
    /// `model` or `gt`.
    pub score_from: String,
    pub checkpoint_step: Option<usize>,
    pub ood_pixels: usize,
    pub total_pixels: usize,
    pub prevalence: f64,
    pub metrics: MetricRow,
    pub images: Vec<ImageRow>,
}

impl EvalReport {
    pub fn new(config_hash: &str, dataset: &str, score_from: &str, checkpoint_step: Option<usize>, ev: &Evaluation) -> Self {
        EvalReport {
            config_hash: config_hash.to_string(),
            dataset: dataset.to_string(),
            score_from: score_from.to_string(),
            checkpoint_step,
            ood_pixels: ev.ood_pixels,
            total_pixels: ev.total_pixels,
            prevalence: ev.prevalence(),
            metrics: ev.row,
            images: ev.images.clone(),
        }
    }
}

pub fn eval_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes") + "\n"
}

fn header(hash: &str) -> String {
    format!("# config_hash={hash}\n")
}

/// One row per named result, columns in table order.
pub fn metrics_csv(hash: &str, rows: &[(String, MetricRow)]) -> String {
    let mut s = header(hash);
    s.push_str("name,");
    s.push_str(&MetricRow::HEADERS.join(","));
    s.push('\n');
    for (name, r) in rows {
        let vals: Vec<String> = r.values().iter().map(f64::to_string).collect();
        let _ = writeln!(s, "{name},{}", vals.join(","));
    }
    s
}

/// The precision-recall curve and the per-threshold object curve.
pub fn curves_csv(hash: &str, ev: &Evaluation) -> (String, String) {
    let mut pr = header(hash);
    pr.push_str("recall,precision\n");
    for (r, p) in &ev.pixel.curve {
        let _ = writeln!(pr, "{r},{p}");
    }
    let mut th = header(hash);
    th.push_str("threshold,iou,f1\n");
    for p in &ev.object.per_threshold {
        let _ = writeln!(th, "{},{},{}", p.t, p.iou, p.f1);
    }
    (pr, th)
}

pub fn losses_csv(hash: &str, history: &[LossRecord]) -> String {
    let mut s = header(hash);
    s.push_str("step,total,seg,L_V,L_VL,prompt,grad_norm\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.step, r.total, r.seg, r.l_v, r.l_vl, r.prompt, r.grad_norm);
    }
    s
}

const W: f64 = 360.0;
const H: f64 = 280.0;
const PAD: f64 = 40.0;

fn plot(hash: &str, title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64)]) -> String {
    let px = |x: f64| PAD + x.clamp(0.0, 1.0) * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - y.clamp(0.0, 1.0) * (H - 2.0 * PAD);
    // long curves are thinned to at most ~1000 vertices, endpoints kept
    let stride = points.len().div_ceil(1000).max(1);
    let mut kept: Vec<(f64, f64)> = points.iter().step_by(stride).copied().collect();
    if let Some(&last) = points.last() {
        if kept.last() != Some(&last) {
            kept.push(last);
        }
    }
    let path: Vec<String> = kept.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
    let mut s = String::new();
    let _ = writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">");
    let _ = writeln!(s, "<!-- config_hash={hash} -->");
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>",
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    for t in [0.0, 0.5, 1.0] {
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"middle\">{t}</text>", px(t), H - PAD + 14.0);
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"end\">{t}</text>", PAD - 4.0, py(t) + 3.0);
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" font-size=\"12\" text-anchor=\"middle\">{title}</text>", W / 2.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{xlabel}</text>", W / 2.0, H - 8.0);
    let _ = writeln!(
        s,
        "<text x=\"12\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\" transform=\"rotate(-90 12 {})\">{ylabel}</text>",
        H / 2.0,
        H / 2.0
    );
    if !path.is_empty() {
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"1.5\" points=\"{}\"/>", path.join(" "));
    }
    s.push_str("</svg>\n");
    s
}

pub fn pr_svg(hash: &str, ev: &Evaluation) -> String {
    let title = format!("precision-recall (AuPRC {:.4})", ev.pixel.auprc);
    plot(hash, &title, "recall", "precision", &ev.pixel.curve)
}

pub fn iou_svg(hash: &str, ev: &Evaluation) -> String {
    let pts: Vec<(f64, f64)> = ev.object.per_threshold.iter().map(|p: &ThresholdPoint| (p.t, p.iou)).collect();
    let title = format!("IoU vs threshold (AuIoU {:.4})", ev.object.auiou);
    plot(hash, &title, "threshold", "IoU", &pts)
}

/// Fixed-width table in percent, with a macro "Average" row when there is more than one result.
pub fn summary_table(rows: &[(String, MetricRow)]) -> String {
    let arrows = MetricRow::HIGHER_IS_BETTER.map(|h| if h { "↑" } else { "↓" });
    let name_w = rows.iter().map(|(n, _)| n.chars().count()).chain(["Average".len(), "result".len()]).max().unwrap_or(8);
    let mut s = format!("{:<name_w$}", "result");
    for (h, a) in MetricRow::HEADERS.iter().zip(arrows) {
        s.push_str(&format!(" {:>9}", format!("{h}{a}")));
    }
    s.push('\n');
    let mut line = |name: &str, r: &MetricRow| {
        s.push_str(&format!("{name:<name_w$}"));
        for v in r.values() {
            s.push_str(&format!(" {:>9.2}", 100.0 * v));
        }
        s.push('\n');
    };
    for (n, r) in rows {
        line(n, r);
    }
    if rows.len() > 1 {
        let metrics: Vec<MetricRow> = rows.iter().map(|(_, r)| *r).collect();
        if let Some(avg) = MetricRow::macro_average(&metrics) {
            line("Average", &avg);
        }
    }
    s
}
