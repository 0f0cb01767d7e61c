//! Pixel-level saliency evaluation: ranking metrics, threshold-sweep
//! stability metrics, overlap metrics, the composite score and decision-curve
//! net benefit.

mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use report::{
    compare_methods, evaluate_method, Averaging, write_curve_csv, write_report_csv, CoreMetrics, Curves,
    MetricReport, REPORT_HEADER,
};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{scores} scores vs {truth} labels")]
    LengthMismatch { scores: usize, truth: usize },
    #[error("no pixels to score")]
    Empty,
    #[error("{0} is undefined when only one class is present")]
    SingleClass(&'static str),
    #[error("score {value} at index {index} is outside [0, 1]")]
    BadScore { index: usize, value: f64 },
    #[error("invalid threshold grid: {0}")]
    BadGrid(String),
    #[error("no core has positive pixels")]
    NoPositives,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Saliency scores paired with binary ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPixels {
    scores: Vec<f64>,
    truth: Vec<bool>,
}

impl ScoredPixels {
    pub fn new(scores: Vec<f64>, truth: Vec<bool>) -> Result<Self, MetricError> {
        if scores.len() != truth.len() {
            return Err(MetricError::LengthMismatch {
                scores: scores.len(),
                truth: truth.len(),
            });
        }
        if scores.is_empty() {
            return Err(MetricError::Empty);
        }
        if let Some((index, &value)) = scores
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(MetricError::BadScore { index, value });
        }
        Ok(Self { scores, truth })
    }

    /// Concatenates several cores in order.
    pub fn pooled<'a>(parts: impl IntoIterator<Item = &'a ScoredPixels>) -> Result<Self, MetricError> {
        let (mut s, mut t) = (Vec::new(), Vec::new());
        for p in parts {
            s.extend_from_slice(&p.scores);
            t.extend_from_slice(&p.truth);
        }
        Self::new(s, t)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn truth(&self) -> &[bool] {
        &self.truth
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.truth.iter().filter(|&&t| t).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    /// Applies `f` to every score, without the `[0, 1]` check.
    pub fn map_scores(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            scores: self.scores.iter().map(|&s| f(s)).collect(),
            truth: self.truth.clone(),
        }
    }

    /// Positive and negative counts at or above each distinct score, scanning
    /// scores from high to low. Entries are `(score, cum_tp, cum_fp)`.
    fn cumulative(&self) -> Vec<(f64, u64, u64)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut out: Vec<(f64, u64, u64)> = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        for (k, &i) in idx.iter().enumerate() {
            if self.truth[i] {
                tp += 1;
            } else {
                fp += 1;
            }
            let last = k + 1 == idx.len() || self.scores[idx[k + 1]] != self.scores[i];
            if last {
                out.push((self.scores[i], tp, fp));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn tnr(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// A pixel is predicted positive when its score is at least `t`.
pub fn confusion_at(px: &ScoredPixels, t: f64) -> Confusion {
    let mut c = Confusion::default();
    for (&s, &y) in px.scores.iter().zip(&px.truth) {
        match (s >= t, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// Confusion counts at many thresholds from one sort.
fn confusion_sweep(px: &ScoredPixels, thresholds: &[f64]) -> Vec<Confusion> {
    let mut pos: Vec<f64> = px.scores.iter().zip(&px.truth).filter(|(_, &t)| t).map(|(s, _)| *s).collect();
    let mut neg: Vec<f64> = px.scores.iter().zip(&px.truth).filter(|(_, &t)| !t).map(|(s, _)| *s).collect();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let at_least = |v: &[f64], t: f64| (v.len() - v.partition_point(|&s| s < t)) as u64;
    thresholds
        .iter()
        .map(|&t| {
            let tp = at_least(&pos, t);
            let fp = at_least(&neg, t);
            Confusion {
                tp,
                fp,
                tn: neg.len() as u64 - fp,
                fn_: pos.len() as u64 - tp,
            }
        })
        .collect()
}

fn require_both(px: &ScoredPixels, what: &'static str) -> Result<(u64, u64), MetricError> {
    let (p, n) = (px.positives() as u64, px.negatives() as u64);
    if p == 0 || n == 0 {
        return Err(MetricError::SingleClass(what));
    }
    Ok((p, n))
}

/// ROC points `(fpr, tpr)` from `(0, 0)` through every distinct score.
pub fn roc_curve(px: &ScoredPixels) -> Result<Vec<(f64, f64)>, MetricError> {
    let (p, n) = require_both(px, "ROC")?;
    let mut pts = vec![(0.0, 0.0)];
    pts.extend(
        px.cumulative()
            .into_iter()
            .map(|(_, tp, fp)| (fp as f64 / n as f64, tp as f64 / p as f64)),
    );
    Ok(pts)
}

fn trapezoid(pts: &[(f64, f64)]) -> f64 {
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

pub fn auroc(px: &ScoredPixels) -> Result<f64, MetricError> {
    Ok(trapezoid(&roc_curve(px)?))
}

/// `(#concordant + 0.5 #tied) / (P N)` over all positive/negative pairs.
pub fn auroc_rank_statistic(px: &ScoredPixels) -> Result<f64, MetricError> {
    let (p, n) = require_both(px, "AUROC")?;
    let mut neg: Vec<f64> = px.scores.iter().zip(&px.truth).filter(|(_, &t)| !t).map(|(s, _)| *s).collect();
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for (&s, _) in px.scores.iter().zip(&px.truth).filter(|(_, &t)| t) {
        let below = neg.partition_point(|&x| x < s);
        let tied = neg.partition_point(|&x| x <= s) - below;
        wins += below as f64 + 0.5 * tied as f64;
    }
    Ok(wins / (p as f64 * n as f64))
}

/// Precision-recall points `(recall, precision)` over descending distinct
/// scores, preceded by `(0, 1)`.
pub fn pr_curve(px: &ScoredPixels) -> Result<Vec<(f64, f64)>, MetricError> {
    let p = px.positives() as u64;
    if p == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut pts = vec![(0.0, 1.0)];
    pts.extend(
        px.cumulative()
            .into_iter()
            .map(|(_, tp, fp)| (tp as f64 / p as f64, tp as f64 / (tp + fp) as f64)),
    );
    Ok(pts)
}

/// `sum (R_n - R_{n-1}) P_n` over descending distinct score thresholds.
pub fn average_precision(px: &ScoredPixels) -> Result<f64, MetricError> {
    let pts = pr_curve(px)?;
    Ok(pts.windows(2).map(|w| (w[1].0 - w[0].0) * w[1].1).sum())
}

/// Same sum, recomputing precision and recall from scratch at every
/// distinct score. Quadratic; meant as a cross-check.
pub fn average_precision_exhaustive(px: &ScoredPixels) -> Result<f64, MetricError> {
    if px.positives() == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut ts: Vec<f64> = px.scores.clone();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let mut prev_r = 0.0;
    let mut ap = 0.0;
    for t in ts {
        let c = confusion_at(px, t);
        ap += (c.recall() - prev_r) * c.precision();
        prev_r = c.recall();
    }
    Ok(ap)
}

pub fn auprc(px: &ScoredPixels) -> Result<f64, MetricError> {
    Ok(trapezoid(&pr_curve(px)?))
}

/// Mean per-core AP over cores that contain positives; the others are
/// skipped with a warning.
pub fn map_over_cores(cores: &[ScoredPixels]) -> Result<f64, MetricError> {
    let mut aps = Vec::new();
    for (i, c) in cores.iter().enumerate() {
        match average_precision(c) {
            Ok(ap) => aps.push(ap),
            Err(MetricError::NoPositives) => log::warn!("core {i} has no positive pixels; skipped in mAP"),
            Err(e) => return Err(e),
        }
    }
    if aps.is_empty() {
        return Err(MetricError::NoPositives);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Threshold sweep `start, start + step, ..., stop` plus the operating point
/// used for mIoU and balanced accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
    pub operating: f64,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self {
            start: 0.01,
            stop: 0.99,
            step: 0.01,
            operating: 0.5,
        }
    }
}

impl ThresholdGrid {
    /// 0.1-step grid from 0.1 to 0.9.
    pub fn coarse() -> Self {
        Self {
            start: 0.1,
            stop: 0.9,
            step: 0.1,
            operating: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        if !(self.step > 0.0) || !(self.start < self.stop) {
            return Err(MetricError::BadGrid("need start < stop and step > 0".into()));
        }
        if self.start < 0.0 || !(0.0..=1.0).contains(&self.operating) {
            return Err(MetricError::BadGrid("thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Grid values, snapped to 12 decimals so `0.01 + k * 0.01` prints cleanly.
    pub fn thresholds(&self) -> Vec<f64> {
        (0..self.len())
            .map(|k| ((self.start + k as f64 * self.step) * 1e12).round() / 1e12)
            .collect()
    }

    pub fn span(&self) -> f64 {
        (self.len() - 1) as f64 * self.step
    }
}

pub fn f1_curve(px: &ScoredPixels, grid: &ThresholdGrid) -> Result<Vec<f64>, MetricError> {
    grid.validate()?;
    Ok(confusion_sweep(px, &grid.thresholds())
        .iter()
        .map(|c| {
            let (p, r) = (c.precision(), c.recall());
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .collect())
}

/// `1 - sigma / mu` of the F1 curve (population sigma); 0 when `mu = 0`.
pub fn ths(f1: &[f64]) -> f64 {
    if f1.is_empty() {
        return 0.0;
    }
    // Deviations are taken from the first value so a constant curve has
    // exactly zero spread.
    let n = f1.len() as f64;
    let x0 = f1[0];
    let shift = f1.iter().map(|v| v - x0).sum::<f64>() / n;
    let mu = x0 + shift;
    if mu == 0.0 {
        return 0.0;
    }
    let var = f1.iter().map(|v| (v - x0 - shift).powi(2)).sum::<f64>() / n;
    1.0 - var.sqrt() / mu
}

/// Span between the outermost grid thresholds whose F1 reaches 95% of the
/// peak. Zero for an empty curve or a curve that is zero everywhere.
pub fn thr(f1: &[f64], grid: &ThresholdGrid) -> f64 {
    let peak = f1.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return 0.0;
    }
    let ok: Vec<usize> = (0..f1.len()).filter(|&k| f1[k] >= 0.95 * peak).collect();
    match (ok.first(), ok.last()) {
        (Some(a), Some(b)) => (b - a) as f64 * grid.step,
        _ => 0.0,
    }
}

/// `|A ∩ B| / |A ∪ B|` with predictions binarised at `t`; 1 when both are empty.
pub fn iou(px: &ScoredPixels, t: f64) -> f64 {
    let c = confusion_at(px, t);
    let union = c.tp + c.fp + c.fn_;
    if union == 0 {
        1.0
    } else {
        c.tp as f64 / union as f64
    }
}

pub fn miou(cores: &[ScoredPixels], t: f64) -> Result<f64, MetricError> {
    if cores.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(cores.iter().map(|c| iou(c, t)).sum::<f64>() / cores.len() as f64)
}

/// `(TPR + TNR) / 2` at threshold `t`.
pub fn balanced_accuracy(px: &ScoredPixels, t: f64) -> f64 {
    let c = confusion_at(px, t);
    (c.recall() + c.tnr()) / 2.0
}

pub const CXPS_WEIGHTS: CxpsInputs = CxpsInputs {
    map: 0.20,
    auroc: 0.25,
    miou: 0.20,
    ths: 0.10,
    thr: 0.10,
    ba: 0.15,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CxpsInputs {
    pub map: f64,
    pub auroc: f64,
    pub miou: f64,
    pub ths: f64,
    pub thr: f64,
    pub ba: f64,
}

impl CxpsInputs {
    /// Builds from optional components, failing on the first missing one.
    pub fn from_parts(parts: [(&'static str, Option<f64>); 6]) -> Result<Self, String> {
        let mut v = [0.0; 6];
        for (k, (name, x)) in parts.iter().enumerate() {
            v[k] = x.ok_or_else(|| format!("CXPS component {name} is missing"))?;
        }
        Ok(Self {
            map: v[0],
            auroc: v[1],
            miou: v[2],
            ths: v[3],
            thr: v[4],
            ba: v[5],
        })
    }
}

pub fn cxps(m: &CxpsInputs) -> f64 {
    let w = CXPS_WEIGHTS;
    w.map * m.map + w.auroc * m.auroc + w.miou * m.miou + w.ths * m.ths + w.thr * m.thr + w.ba * m.ba
}

/// Decision curve over the threshold grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetBenefit {
    pub thresholds: Vec<f64>,
    /// `TP/Total - FP/Total * t/(1-t)`.
    pub nb: Vec<f64>,
    /// `TP - FP * t/(1-t)`.
    pub nb_count: Vec<f64>,
    pub audc: f64,
    pub audc_count: f64,
}

pub fn net_benefit_curve(px: &ScoredPixels, grid: &ThresholdGrid) -> Result<NetBenefit, MetricError> {
    grid.validate()?;
    let ts = grid.thresholds();
    if ts.iter().any(|&t| t >= 1.0) {
        return Err(MetricError::BadGrid("net benefit needs every threshold below 1".into()));
    }
    let total = px.len() as f64;
    let (mut nb, mut nb_count) = (Vec::new(), Vec::new());
    for (c, &t) in confusion_sweep(px, &ts).iter().zip(&ts) {
        let odds = t / (1.0 - t);
        let v = c.tp as f64 - c.fp as f64 * odds;
        nb_count.push(v);
        nb.push(v / total);
    }
    let area = |ys: &[f64]| {
        let pts: Vec<(f64, f64)> = ts.iter().copied().zip(ys.iter().copied()).collect();
        trapezoid(&pts)
    };
    Ok(NetBenefit {
        audc: area(&nb),
        audc_count: area(&nb_count),
        thresholds: ts,
        nb,
        nb_count,
    })
}
