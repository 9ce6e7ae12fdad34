//! Overlap and contour-distance metrics for binary masks.
//!
//! Ratios whose denominator is zero are reported as `None`, never as 0 or 1.
//! Distances are in millimeters using the in-plane pixel spacing.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A pixel coordinate `(row, col)`.
pub type Point = (usize, usize);

/// Per-case confusion counts and derived metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub lesion_id: String,
    pub slice_index: i32,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub hd_mm: Option<f64>,
    pub assd_mm: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Confusion counts and overlap ratios; distance fields are left undefined.
pub fn pixel_metrics(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<CaseMetrics> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.dim(),
            gt.dim()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(CaseMetrics {
        lesion_id: String::new(),
        slice_index: 0,
        tp,
        fp,
        fn_,
        tn,
        precision: ratio(tp, tp + fp),
        sensitivity: ratio(tp, tp + fn_),
        dice: ratio(2 * tp, 2 * tp + fp + fn_),
        iou: ratio(tp, tp + fp + fn_),
        hd_mm: None,
        assd_mm: None,
    })
}

/// Positive pixels with at least one 4-neighbor that is zero or off-image.
pub fn extract_contour(mask: &Array2<bool>) -> Vec<Point> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            let border = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask[[y - 1, x]]
                || !mask[[y + 1, x]]
                || !mask[[y, x - 1]]
                || !mask[[y, x + 1]];
            if border {
                out.push((y, x));
            }
        }
    }
    out
}

fn distance(a: Point, b: Point, spacing_yx: [f64; 2]) -> f64 {
    let dy = (a.0 as f64 - b.0 as f64) * spacing_yx[0];
    let dx = (a.1 as f64 - b.1 as f64) * spacing_yx[1];
    (dy * dy + dx * dx).sqrt()
}

/// `d(p, Y)` for each `p` in `from`.
fn nearest_distances(from: &[Point], to: &[Point], spacing_yx: [f64; 2]) -> Vec<f64> {
    from.iter()
        .map(|&p| {
            to.iter()
                .map(|&q| distance(p, q, spacing_yx))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn nonempty(x: &[Point], y: &[Point]) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        Err(Error::Undefined(
            "surface distance needs two nonempty contours".into(),
        ))
    } else {
        Ok(())
    }
}

/// Symmetric Hausdorff distance between two point sets.
pub fn hausdorff(x: &[Point], y: &[Point], spacing_yx: [f64; 2]) -> Result<f64> {
    nonempty(x, y)?;
    let a = nearest_distances(x, y, spacing_yx);
    let b = nearest_distances(y, x, spacing_yx);
    Ok(a.into_iter().chain(b).fold(0.0, f64::max))
}

/// Average symmetric surface distance between two point sets.
pub fn assd(x: &[Point], y: &[Point], spacing_yx: [f64; 2]) -> Result<f64> {
    nonempty(x, y)?;
    let a: f64 = nearest_distances(x, y, spacing_yx).iter().sum();
    let b: f64 = nearest_distances(y, x, spacing_yx).iter().sum();
    Ok((a + b) / (x.len() + y.len()) as f64)
}

/// All metrics for one slice.
pub fn case_metrics(
    pred: &Array2<bool>,
    gt: &Array2<bool>,
    spacing_yx: [f64; 2],
    lesion_id: &str,
    slice_index: i32,
) -> Result<CaseMetrics> {
    let mut m = pixel_metrics(pred, gt)?;
    m.lesion_id = lesion_id.to_string();
    m.slice_index = slice_index;
    let (cp, cg) = (extract_contour(pred), extract_contour(gt));
    m.hd_mm = hausdorff(&cp, &cg, spacing_yx).ok();
    m.assd_mm = assd(&cp, &cg, spacing_yx).ok();
    Ok(m)
}

/// How per-case values are averaged into a summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean over slices within each lesion, then mean over lesions.
    #[default]
    PerLesion,
    /// Mean over all slices.
    PerSlice,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub hd_mm: Option<f64>,
    pub assd_mm: Option<f64>,
}

/// Number of cases left out of each mean because the metric was undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExcludedCounts {
    pub precision: usize,
    pub sensitivity: usize,
    pub dice: usize,
    pub iou: usize,
    pub hd_mm: usize,
    pub assd_mm: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aggregation: Aggregation,
    pub summary: MetricSummary,
    pub excluded: ExcludedCounts,
    pub cases: Vec<CaseMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn summarize(cases: &[&CaseMetrics], get: impl Fn(&CaseMetrics) -> Option<f64>, agg: Aggregation) -> Option<f64> {
    match agg {
        Aggregation::PerSlice => mean(cases.iter().filter_map(|c| get(c))),
        Aggregation::PerLesion => {
            let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for c in cases {
                if let Some(v) = get(c) {
                    groups.entry(c.lesion_id.as_str()).or_default().push(v);
                }
            }
            mean(groups.values().filter_map(|v| mean(v.iter().copied())))
        }
    }
}

/// Unweighted means of every defined metric.
pub fn aggregate_report(cases: Vec<CaseMetrics>, aggregation: Aggregation) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::Config("cannot aggregate an empty set of cases".into()));
    }
    let refs: Vec<&CaseMetrics> = cases.iter().collect();
    let missing = |get: fn(&CaseMetrics) -> Option<f64>| refs.iter().filter(|c| get(c).is_none()).count();
    let summary = MetricSummary {
        precision: summarize(&refs, |c| c.precision, aggregation),
        sensitivity: summarize(&refs, |c| c.sensitivity, aggregation),
        dice: summarize(&refs, |c| c.dice, aggregation),
        iou: summarize(&refs, |c| c.iou, aggregation),
        hd_mm: summarize(&refs, |c| c.hd_mm, aggregation),
        assd_mm: summarize(&refs, |c| c.assd_mm, aggregation),
    };
    let excluded = ExcludedCounts {
        precision: missing(|c| c.precision),
        sensitivity: missing(|c| c.sensitivity),
        dice: missing(|c| c.dice),
        iou: missing(|c| c.iou),
        hd_mm: missing(|c| c.hd_mm),
        assd_mm: missing(|c| c.assd_mm),
    };
    Ok(MetricsReport {
        aggregation,
        summary,
        excluded,
        cases,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl MetricsReport {
    /// One row per case followed by a `summary` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "lesion_id,slice_index,tp,fp,fn,tn,precision,sensitivity,dice,iou,hd_mm,assd_mm\n",
        );
        for c in &self.cases {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                c.lesion_id,
                c.slice_index,
                c.tp,
                c.fp,
                c.fn_,
                c.tn,
                cell(c.precision),
                cell(c.sensitivity),
                cell(c.dice),
                cell(c.iou),
                cell(c.hd_mm),
                cell(c.assd_mm)
            );
        }
        let s = &self.summary;
        let _ = writeln!(
            out,
            "summary,,,,,,{},{},{},{},{},{}",
            cell(s.precision),
            cell(s.sensitivity),
            cell(s.dice),
            cell(s.iou),
            cell(s.hd_mm),
            cell(s.assd_mm)
        );
        out
    }
}

/// Mean and sample standard deviation per metric across reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledSummary {
    pub mean: MetricSummary,
    pub stdev: MetricSummary,
}

pub fn pool_reports(reports: &[MetricsReport]) -> PooledSummary {
    let stats = |get: fn(&MetricSummary) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(|r| get(&r.summary)).collect();
        let m = mean(v.iter().copied());
        let sd = m.map(|m| {
            if v.len() < 2 {
                0.0
            } else {
                (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
            }
        });
        (m, sd)
    };
    let (pm, ps) = stats(|s| s.precision);
    let (sm, ss) = stats(|s| s.sensitivity);
    let (dm, ds) = stats(|s| s.dice);
    let (im, is) = stats(|s| s.iou);
    let (hm, hs) = stats(|s| s.hd_mm);
    let (am, as_) = stats(|s| s.assd_mm);
    PooledSummary {
        mean: MetricSummary { precision: pm, sensitivity: sm, dice: dm, iou: im, hd_mm: hm, assd_mm: am },
        stdev: MetricSummary { precision: ps, sensitivity: ss, dice: ds, iou: is, hd_mm: hs, assd_mm: as_ },
    }
}

/// A comparison table with one row per named report.
pub fn comparison_table(rows: &[(String, MetricSummary)]) -> String {
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
    let mut out = String::from("| Run | Pre | Sen | Dice | IoU | HD(mm) | ASSD(mm) |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "| {name} | {} | {} | {} | {} | {} | {} |",
            fmt(s.precision),
            fmt(s.sensitivity),
            fmt(s.dice),
            fmt(s.iou),
            fmt(s.hd_mm),
            fmt(s.assd_mm)
        );
    }
    out
}
