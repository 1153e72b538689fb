//! Figures of merit for binary glaucoma detection (positive class =
//! glaucoma): confusion-matrix metrics, ROC/AUC, and fold aggregation.

use std::fmt::Write as _;

use crate::data::Label;
use crate::error::{Error, Result};

/// Threshold used for point metrics; `score ≥ threshold` predicts glaucoma.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }
}

pub fn confusion(labels: &[Label], scores: &[f64], threshold: f64) -> Result<ConfusionMatrix> {
    if labels.len() != scores.len() || labels.is_empty() {
        return Err(Error::Parameter(format!(
            "need equal, nonzero numbers of labels and scores (got {} and {})",
            labels.len(),
            scores.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&l, &s) in labels.iter().zip(scores) {
        match (l, s >= threshold) {
            (Label::Glaucoma, true) => cm.tp += 1,
            (Label::Glaucoma, false) => cm.fn_ += 1,
            (Label::Normal, true) => cm.fp += 1,
            (Label::Normal, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// Metric names in reporting order.
pub const METRIC_NAMES: [&str; 7] = ["SN", "SPC", "PPV", "NPV", "FS", "ACC", "AUC"];

/// The seven figures of merit. `None` marks an undefined value (zero
/// denominator, or AUC without both classes).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub sn: Option<f64>,
    pub spc: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub fs: Option<f64>,
    pub acc: Option<f64>,
    pub auc: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn basic_metrics(cm: &ConfusionMatrix) -> MetricReport {
    let ConfusionMatrix { tp, fn_, fp, tn } = *cm;
    MetricReport {
        sn: ratio(tp, tp + fn_),
        spc: ratio(tn, tn + fp),
        ppv: ratio(tp, tp + fp),
        npv: ratio(tn, tn + fn_),
        fs: ratio(2 * tp, 2 * tp + fp + fn_),
        acc: ratio(tp + tn, cm.total()),
        auc: None,
    }
}

impl MetricReport {
    /// Values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [Option<f64>; 7] {
        [self.sn, self.spc, self.ppv, self.npv, self.fs, self.acc, self.auc]
    }

    /// `metric,value` rows; undefined values are written as `undefined`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (name, v) in METRIC_NAMES.iter().zip(self.values()) {
            let _ = writeln!(s, "{name},{}", fmt_opt(v));
        }
        s
    }

    /// Flat `KEY = value` block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, v) in METRIC_NAMES.iter().zip(self.values()) {
            let _ = writeln!(s, "{name:<4}= {}", fmt_opt(v));
        }
        s
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"))
}

/// `(fpr, tpr, threshold)` points. The first point is `(0, 0)` at threshold
/// `+∞`; each following point lowers the threshold to the next distinct score.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fpr,tpr,threshold\n");
        for p in &self.points {
            let _ = writeln!(s, "{:.6},{:.6},{}", p.fpr, p.tpr, p.threshold);
        }
        s
    }
}

/// ROC curve from a threshold sweep over distinct scores (tied scores move
/// together) and its trapezoidal area, which equals
/// `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`.
pub fn roc_auc(labels: &[Label], scores: &[f64]) -> Result<(RocCurve, f64)> {
    if labels.len() != scores.len() {
        return Err(Error::Parameter(format!("{} labels vs {} scores", labels.len(), scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Parameter("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == Label::Glaucoma).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc(format!("{pos} positive and {neg} negative samples")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    // twice the area, in units of one positive × one negative
    let mut area2 = 0usize;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            match labels[order[i]] {
                Label::Glaucoma => tp += 1,
                Label::Normal => fp += 1,
            }
            i += 1;
        }
        area2 += (fp - fp0) * (tp + tp0);
        points.push(RocPoint { fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64, threshold: s });
    }
    Ok((RocCurve { points }, area2 as f64 / (2 * pos * neg) as f64))
}

/// Confusion metrics at [`DEFAULT_THRESHOLD`] plus AUC when both classes are present.
pub fn full_report(labels: &[Label], scores: &[f64]) -> Result<(MetricReport, Option<RocCurve>)> {
    let mut report = basic_metrics(&confusion(labels, scores, DEFAULT_THRESHOLD)?);
    match roc_auc(labels, scores) {
        Ok((roc, auc)) => {
            report.auc = Some(auc);
            Ok((report, Some(roc)))
        }
        Err(Error::UndefinedAuc(_)) => Ok((report, None)),
        Err(e) => Err(e),
    }
}

/// Mean and sample (n−1) standard deviation of one metric across folds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    /// Number of folds where the metric was defined.
    pub n: usize,
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    /// In [`METRIC_NAMES`] order; `None` when no fold defined the metric.
    pub metrics: [Option<MeanStd>; 7],
    pub folds: usize,
}

pub fn aggregate_folds(reports: &[MetricReport]) -> Result<Aggregate> {
    if reports.len() < 2 {
        return Err(Error::Parameter(format!("aggregation needs at least 2 reports, got {}", reports.len())));
    }
    let metrics = std::array::from_fn(|m| {
        let vals: Vec<f64> = reports.iter().filter_map(|r| r.values()[m]).collect();
        let n = vals.len();
        if n == 0 {
            return None;
        }
        if vals.iter().all(|&v| v == vals[0]) {
            // exact for identical folds, where summation would leave rounding residue
            return Some(MeanStd { mean: vals[0], std: 0.0, n });
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let std =
            if n > 1 { (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Some(MeanStd { mean, std, n })
    });
    Ok(Aggregate { metrics, folds: reports.len() })
}

impl Aggregate {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,mean,std,n\n");
        for (name, m) in METRIC_NAMES.iter().zip(&self.metrics) {
            let _ = match m {
                Some(m) => writeln!(s, "{name},{:.6},{:.6},{}", m.mean, m.std, m.n),
                None => writeln!(s, "{name},undefined,undefined,0"),
            };
        }
        s
    }

    /// Table of `mean ± std` rows with a note for metrics undefined in some folds.
    pub fn to_text(&self) -> String {
        comparison_table(&[("", self)])
    }
}

/// Side-by-side `mean ± std` columns, one per labelled aggregate.
pub fn comparison_table(columns: &[(&str, &Aggregate)]) -> String {
    let mut s = format!("{:<4}", "");
    for (title, _) in columns {
        let _ = write!(s, "  {title:<17}");
    }
    let mut s = s.trim_end().to_string();
    s.push('\n');
    for (m, name) in METRIC_NAMES.iter().enumerate() {
        let _ = write!(s, "{name:<4}");
        for (_, agg) in columns {
            let cell = match &agg.metrics[m] {
                Some(ms) if ms.n < agg.folds => format!("{ms} ({}/{})", ms.n, agg.folds),
                Some(ms) => ms.to_string(),
                None => "undefined".into(),
            };
            let _ = write!(s, "  {cell:<17}");
        }
        s = s.trim_end().to_string();
        s.push('\n');
    }
    s
}
