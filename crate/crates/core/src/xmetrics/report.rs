use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::*;

pub const REPORT_HEADER: &str = "Method,mAP,AUROC,AUPRC,mIoU,ThS,ThR,BA,CXPS,AUDC";

/// How curve-based metrics combine cores. mAP and mIoU are always per-core means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// All pixels of all cores scored together.
    #[default]
    Pooled,
    /// Unweighted mean of per-core values, over cores where the value is defined.
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreMetrics {
    pub core_id: String,
    pub pixels: usize,
    pub positives: usize,
    pub ap: Option<f64>,
    pub auroc: Option<f64>,
    pub iou: f64,
    pub ba: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub map: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub miou: f64,
    pub ths: f64,
    pub thr: f64,
    pub ba: f64,
    pub cxps: f64,
    /// Count-scaled area under the decision curve.
    pub audc: f64,
    /// Same area with net benefit divided by the pixel count.
    pub audc_normalized: f64,
    pub averaging: Averaging,
    pub per_core: Vec<CoreMetrics>,
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        let v = [
            self.map, self.auroc, self.auprc, self.miou, self.ths, self.thr, self.ba, self.cxps, self.audc,
        ];
        let mut row = self.method.clone();
        for x in v {
            let _ = write!(row, ",{x:.6}");
        }
        row
    }

    pub fn cxps_inputs(&self) -> CxpsInputs {
        CxpsInputs {
            map: self.map,
            auroc: self.auroc,
            miou: self.miou,
            ths: self.ths,
            thr: self.thr,
            ba: self.ba,
        }
    }
}

/// Pooled curves for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub roc: Vec<(f64, f64)>,
    pub pr: Vec<(f64, f64)>,
    pub f1: Vec<(f64, f64)>,
    pub net_benefit: Vec<(f64, f64)>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Scores one method over its cores. Cores are `(core_id, pixels)` pairs and
/// the output keeps their order.
pub fn evaluate_method(
    method: &str,
    cores: &[(String, ScoredPixels)],
    grid: &ThresholdGrid,
    averaging: Averaging,
) -> Result<(MetricReport, Curves), MetricError> {
    grid.validate()?;
    if cores.is_empty() {
        return Err(MetricError::Empty);
    }
    let t = grid.operating;
    let per_core: Vec<CoreMetrics> = cores
        .par_iter()
        .map(|(id, px)| CoreMetrics {
            core_id: id.clone(),
            pixels: px.len(),
            positives: px.positives(),
            ap: average_precision(px).ok(),
            auroc: auroc(px).ok(),
            iou: iou(px, t),
            ba: balanced_accuracy(px, t),
        })
        .collect();
    for c in per_core.iter().filter(|c| c.ap.is_none()) {
        log::warn!("{method}: core {} has no positive pixels; skipped in mAP", c.core_id);
    }
    let map = mean(per_core.iter().filter_map(|c| c.ap)).ok_or(MetricError::NoPositives)?;
    let miou = mean(per_core.iter().map(|c| c.iou)).unwrap_or(0.0);

    let pooled = ScoredPixels::pooled(cores.iter().map(|(_, p)| p))?;
    let f1 = f1_curve(&pooled, grid)?;
    let nb = net_benefit_curve(&pooled, grid)?;
    let curves = Curves {
        roc: roc_curve(&pooled).unwrap_or_default(),
        pr: pr_curve(&pooled)?,
        f1: nb.thresholds.iter().copied().zip(f1.iter().copied()).collect(),
        net_benefit: nb.thresholds.iter().copied().zip(nb.nb.iter().copied()).collect(),
    };

    let (auroc_v, auprc_v, ths_v, thr_v, ba_v, audc, audc_n) = match averaging {
        Averaging::Pooled => (
            auroc(&pooled)?,
            auprc(&pooled)?,
            ths(&f1),
            thr(&f1, grid),
            balanced_accuracy(&pooled, t),
            nb.audc_count,
            nb.audc,
        ),
        Averaging::Macro => {
            let with_pos: Vec<&ScoredPixels> = cores.iter().map(|(_, p)| p).filter(|p| p.positives() > 0).collect();
            let f1s: Vec<Vec<f64>> = with_pos.iter().map(|p| f1_curve(p, grid)).collect::<Result<_, _>>()?;
            let nbs: Vec<NetBenefit> = cores
                .iter()
                .map(|(_, p)| net_benefit_curve(p, grid))
                .collect::<Result<_, _>>()?;
            (
                mean(per_core.iter().filter_map(|c| c.auroc)).ok_or(MetricError::SingleClass("AUROC"))?,
                mean(with_pos.iter().filter_map(|p| auprc(p).ok())).ok_or(MetricError::NoPositives)?,
                mean(f1s.iter().map(|f| ths(f))).unwrap_or(0.0),
                mean(f1s.iter().map(|f| thr(f, grid))).unwrap_or(0.0),
                mean(per_core.iter().map(|c| c.ba)).unwrap_or(0.0),
                mean(nbs.iter().map(|n| n.audc_count)).unwrap_or(0.0),
                mean(nbs.iter().map(|n| n.audc)).unwrap_or(0.0),
            )
        }
    };
    let mut report = MetricReport {
        method: method.to_string(),
        map,
        auroc: auroc_v,
        auprc: auprc_v,
        miou,
        ths: ths_v,
        thr: thr_v,
        ba: ba_v,
        cxps: 0.0,
        audc,
        audc_normalized: audc_n,
        averaging,
        per_core,
    };
    report.cxps = cxps(&report.cxps_inputs());
    Ok((report, curves))
}

/// Sorts by CXPS descending, then AUROC descending, then method name.
pub fn compare_methods(mut reports: Vec<MetricReport>) -> Vec<MetricReport> {
    reports.sort_by(|a, b| {
        b.cxps
            .total_cmp(&a.cxps)
            .then(b.auroc.total_cmp(&a.auroc))
            .then_with(|| a.method.cmp(&b.method))
    });
    reports
}

fn write_text(path: &Path, text: &str) -> Result<(), MetricError> {
    std::fs::write(path, text).map_err(|source| MetricError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes rows in the given order under [`REPORT_HEADER`].
pub fn write_report_csv(reports: &[MetricReport], path: &Path) -> Result<(), MetricError> {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn write_curve_csv(points: &[(f64, f64)], x: &str, y: &str, path: &Path) -> Result<(), MetricError> {
    let mut out = format!("{x},{y}\n");
    for (a, b) in points {
        let _ = writeln!(out, "{a},{b}");
    }
    write_text(path, &out)
}
