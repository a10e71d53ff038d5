//! Segmentation quality measures: MAE, IoU, F-measure, S-measure, mean
//! E-measure, plus a folder evaluator producing per-dataset reports.
//!
//! Every function takes a prediction in `[0, 1]` and a binary ground truth of
//! the same shape. A prediction identical to a non-degenerate ground truth
//! scores exactly 1 on IoU, F, S and E and exactly 0 on MAE.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use sam3unet_tensor::bilinear_plane;
use serde::{Deserialize, Serialize};

use crate::data::{list_images, load_gray};
use crate::error::{Error, Result};

pub const BETA_SQ: f64 = 0.3;
pub const NUM_THRESHOLDS: usize = 256;

/// Thresholds shared by max-F and the E-measure curve: `(i + 1) / 256`.
pub fn thresholds() -> impl Iterator<Item = f64> {
    (0..NUM_THRESHOLDS).map(|i| (i + 1) as f64 / NUM_THRESHOLDS as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FMode {
    /// Threshold at `min(2 · mean(pred), 1)`.
    #[default]
    Adaptive,
    /// Best F over the shared threshold set.
    Max,
}

impl std::str::FromStr for FMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(FMode::Adaptive),
            "max" => Ok(FMode::Max),
            other => Err(Error::config("metrics.f_mode", format!("`{other}` is not one of adaptive, max"))),
        }
    }
}

fn check(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("prediction {:?} does not match ground truth {:?}", pred.dim(), gt.dim())));
    }
    if pred.is_empty() {
        return Err(Error::Shape("empty map".into()));
    }
    Ok(())
}

fn is_fg(g: f64) -> bool {
    g > 0.5
}

pub fn mae(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> Result<f64> {
    check(pred, gt)?;
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum();
    Ok(sum / pred.len() as f64)
}

pub fn iou(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>, threshold: f64) -> Result<f64> {
    check(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (a, b) = (p >= threshold, is_fg(g));
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Prediction scores split by ground-truth class, each sorted ascending, so
/// counts above any threshold are binary searches.
struct Sorted {
    fg: Vec<f64>,
    bg: Vec<f64>,
}

impl Sorted {
    fn new(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> Self {
        let (mut fg, mut bg) = (Vec::new(), Vec::new());
        for (&p, &g) in pred.iter().zip(gt) {
            if is_fg(g) { fg.push(p) } else { bg.push(p) }
        }
        fg.sort_by(f64::total_cmp);
        bg.sort_by(f64::total_cmp);
        Sorted { fg, bg }
    }

    /// `(tp, fp)` for a `>= t` binarization.
    fn positives(&self, t: f64) -> (usize, usize) {
        let above = |v: &[f64]| v.len() - v.partition_point(|&x| x < t);
        (above(&self.fg), above(&self.bg))
    }
}

fn f_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    (1.0 + BETA_SQ) * precision * recall / (BETA_SQ * precision + recall)
}

pub fn f_measure(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>, mode: FMode) -> Result<f64> {
    check(pred, gt)?;
    let sorted = Sorted::new(pred, gt);
    let n_fg = sorted.fg.len();
    let at = |t: f64| {
        let (tp, fp) = sorted.positives(t);
        f_from_counts(tp, fp, n_fg - tp)
    };
    Ok(match mode {
        FMode::Adaptive => {
            let mean = pred.iter().sum::<f64>() / pred.len() as f64;
            at((2.0 * mean).min(1.0))
        }
        FMode::Max => thresholds().map(at).fold(0.0, f64::max),
    })
}

fn s_object(values: &[f64]) -> f64 {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sigma = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    2.0 * mean / (mean * mean + 1.0 + sigma)
}

fn object_term(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> f64 {
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for (&p, &g) in pred.iter().zip(gt) {
        if is_fg(g) { fg.push(p) } else { bg.push(1.0 - p) }
    }
    let n = (fg.len() + bg.len()) as f64;
    (fg.len() as f64 * s_object(&fg) + bg.len() as f64 * s_object(&bg)) / n
}

fn ssim(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let x = pred.iter().sum::<f64>() / n as f64;
    let g: Vec<f64> = gt.iter().map(|&v| if is_fg(v) { 1.0 } else { 0.0 }).collect();
    let y = g.iter().sum::<f64>() / n as f64;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    if n > 1 {
        for (&p, &q) in pred.iter().zip(&g) {
            sx += (p - x) * (p - x);
            sy += (q - y) * (q - y);
            sxy += (p - x) * (q - y);
        }
        let d = (n - 1) as f64;
        (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    }
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / beta
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Split point of the four regions: the rounded foreground centroid plus one,
/// limited to the map.
fn centroid(gt: ArrayView2<'_, f64>) -> (usize, usize) {
    let (h, w) = gt.dim();
    let (mut sy, mut sx, mut count) = (0.0, 0.0, 0usize);
    for ((i, j), &g) in gt.indexed_iter() {
        if is_fg(g) {
            sy += i as f64;
            sx += j as f64;
            count += 1;
        }
    }
    let (cy, cx) = if count == 0 {
        ((h as f64 / 2.0).round_ties_even(), (w as f64 / 2.0).round_ties_even())
    } else {
        ((sy / count as f64).round_ties_even(), (sx / count as f64).round_ties_even())
    };
    (((cy as usize) + 1).min(h), ((cx as usize) + 1).min(w))
}

fn region_term(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> f64 {
    use ndarray::s;
    let (h, w) = gt.dim();
    let (y, x) = centroid(gt);
    let quads = [(0..y, 0..x), (0..y, x..w), (y..h, 0..x), (y..h, x..w)];
    let mut acc = 0.0;
    for (rows, cols) in quads {
        let area = rows.len() * cols.len();
        if area == 0 {
            continue;
        }
        let p = pred.slice(s![rows.clone(), cols.clone()]);
        let g = gt.slice(s![rows, cols]);
        acc += area as f64 * ssim(p, g);
    }
    acc / (h * w) as f64
}

/// Structure measure with `alpha` weighting the object term.
pub fn s_measure(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>, alpha: f64) -> Result<f64> {
    check(pred, gt)?;
    let n = pred.len() as f64;
    let fg = gt.iter().filter(|&&g| is_fg(g)).count();
    let mean_pred = pred.iter().sum::<f64>() / n;
    Ok(if fg == 0 {
        1.0 - mean_pred
    } else if fg == pred.len() {
        mean_pred
    } else {
        (alpha * object_term(pred, gt) + (1.0 - alpha) * region_term(pred, gt)).max(0.0)
    })
}

fn enhanced(a: f64, b: f64) -> f64 {
    let align = 2.0 * a * b / (a * a + b * b);
    (align + 1.0).powi(2) / 4.0
}

/// Enhanced-alignment score of a binarized prediction from its confusion
/// counts.
fn e_from_counts(tp: usize, fp: usize, n_fg: usize, n: usize) -> f64 {
    let fn_ = n_fg - tp;
    let tn = n - n_fg - fp;
    let nf = n as f64;
    if n_fg == 0 {
        return tn as f64 / nf;
    }
    if n_fg == n {
        return tp as f64 / nf;
    }
    let m_fm = (tp + fp) as f64 / nf;
    let m_gt = n_fg as f64 / nf;
    let (p1, p0) = (1.0 - m_fm, -m_fm);
    let (g1, g0) = (1.0 - m_gt, -m_gt);
    let sum = tp as f64 * enhanced(p1, g1)
        + fp as f64 * enhanced(p1, g0)
        + fn_ as f64 * enhanced(p0, g1)
        + tn as f64 * enhanced(p0, g0);
    sum / nf
}

/// Mean of the enhanced-alignment curve over the shared thresholds.
pub fn e_measure_mean(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> Result<f64> {
    check(pred, gt)?;
    let sorted = Sorted::new(pred, gt);
    let (n_fg, n) = (sorted.fg.len(), pred.len());
    let total: f64 = thresholds()
        .map(|t| {
            let (tp, fp) = sorted.positives(t);
            e_from_counts(tp, fp, n_fg, n)
        })
        .sum();
    Ok(total / NUM_THRESHOLDS as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub f_mode: FMode,
    pub iou_threshold: f64,
    pub s_alpha: f64,
    /// Fail on any prediction/ground-truth file without a partner.
    pub strict: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { f_mode: FMode::Adaptive, iou_threshold: 0.5, s_alpha: 0.5, strict: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub iou: f64,
    pub f_measure: f64,
    pub mae: f64,
    pub s_measure: f64,
    pub e_measure_mean: f64,
}

pub fn score_image(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>, cfg: &MetricsConfig) -> Result<ImageScores> {
    Ok(ImageScores {
        iou: iou(pred, gt, cfg.iou_threshold)?,
        f_measure: f_measure(pred, gt, cfg.f_mode)?,
        mae: mae(pred, gt)?,
        s_measure: s_measure(pred, gt, cfg.s_alpha)?,
        e_measure_mean: e_measure_mean(pred, gt)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScores {
    pub iou: f64,
    pub f_measure: f64,
    pub mae: f64,
    pub s_measure: f64,
    pub e_measure_mean: f64,
    pub count: usize,
}

impl DatasetScores {
    /// Means in the given order.
    pub fn from_images(scores: &[ImageScores]) -> Option<Self> {
        if scores.is_empty() {
            return None;
        }
        let n = scores.len() as f64;
        let mean = |f: fn(&ImageScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
        Some(DatasetScores {
            iou: mean(|s| s.iou),
            f_measure: mean(|s| s.f_measure),
            mae: mean(|s| s.mae),
            s_measure: mean(|s| s.s_measure),
            e_measure_mean: mean(|s| s.e_measure_mean),
            count: scores.len(),
        })
    }

    fn entries(&self) -> [(&'static str, f64); 5] {
        [
            ("iou", self.iou),
            ("f_measure", self.f_measure),
            ("mae", self.mae),
            ("s_measure", self.s_measure),
            ("e_measure_mean", self.e_measure_mean),
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub datasets: BTreeMap<String, DatasetScores>,
    /// Files skipped for lack of a partner.
    pub unmatched: Vec<String>,
}

impl MetricsReport {
    pub fn merge(&mut self, other: MetricsReport) {
        self.datasets.extend(other.datasets);
        self.unmatched.extend(other.unmatched);
    }

    /// One `dataset.metric = value` line per entry.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, scores) in &self.datasets {
            for (metric, value) in scores.entries() {
                out.push_str(&format!("{name}.{metric} = {value:.4}\n"));
            }
            out.push_str(&format!("{name}.count = {}\n", scores.count));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, text_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::write(text_path, self.to_text()).map_err(|e| Error::io(text_path, e))?;
        std::fs::write(json_path, self.to_json() + "\n").map_err(|e| Error::io(json_path, e))
    }
}

/// Loads a prediction, resizes it bilinearly to `size` if needed.
fn load_prediction(path: &Path, size: (usize, usize)) -> Result<Array2<f64>> {
    let pred = load_gray(path)?;
    if pred.dim() == size {
        return Ok(pred);
    }
    let (h, w) = pred.dim();
    let flat: Vec<f64> = pred.iter().copied().collect();
    let out = bilinear_plane(&flat, h, w, size.0, size.1);
    Ok(Array2::from_shape_vec(size, out).expect("resized plane").mapv(|v| v.clamp(0.0, 1.0)))
}

/// Scores every `pred_dir` image against the same-stem mask in `gt_dir`.
pub fn evaluate_folder(dataset: &str, pred_dir: &Path, gt_dir: &Path, cfg: &MetricsConfig) -> Result<MetricsReport> {
    let preds = list_images(pred_dir)?;
    let gts = list_images(gt_dir)?;
    let mut unmatched: Vec<String> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .map(|k| pred_dir.join(&preds[k]).display().to_string())
        .chain(gts.keys().filter(|k| !preds.contains_key(*k)).map(|k| gt_dir.join(&gts[k]).display().to_string()))
        .collect();
    unmatched.sort();
    if cfg.strict && !unmatched.is_empty() {
        return Err(Error::Unmatched(unmatched));
    }
    let pairs: Vec<(&String, &std::path::PathBuf)> = gts.iter().filter(|(k, _)| preds.contains_key(*k)).collect();
    let scores = pairs
        .par_iter()
        .map(|(stem, gt_file)| {
            let gt = load_gray(&gt_dir.join(gt_file))?.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
            let pred = load_prediction(&pred_dir.join(&preds[*stem]), gt.dim())?;
            score_image(pred.view(), gt.view(), cfg)
        })
        .collect::<Result<Vec<ImageScores>>>()?;
    let mut report = MetricsReport { datasets: BTreeMap::new(), unmatched };
    let summary = DatasetScores::from_images(&scores)
        .ok_or_else(|| Error::Validation(format!("no prediction/ground-truth pairs for `{dataset}`")))?;
    report.datasets.insert(dataset.to_string(), summary);
    Ok(report)
}
