//! Controlled fairness testing: metrics on the matched part and on sampled
//! subsets compared with the whole test set, and fairness curves over the
//! share of unmatched rows added back to the matched part.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{ensure_len, Error, Result};
use crate::fairmatch::default_predict;
use crate::learners::ProbabilisticClassifier;
use crate::metrics::{format_value, Metric, MetricReport};
use crate::psm::{self, MatchConfig, MatchResult, PropensityScores};
use crate::rng::{self, Stream};
use crate::sampling::Strategy;

pub const DEFAULT_CURVE_SEEDS: usize = 20;

/// `0, 0.1, …, 1`.
pub fn default_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    let ok = grid.len() >= 2
        && grid[0] == 0.0
        && grid[grid.len() - 1] == 1.0
        && grid.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::Config("curve grid must increase strictly from 0 to 1".into()))
    }
}

/// Number of unmatched rows used at fraction `f`: `ceil(f · n)`.
pub fn unmatched_count(f: f64, n: usize) -> usize {
    ((f * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessCurve {
    pub metric: Metric,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    /// `per_seed[s][f]`; `None` where the metric is undefined.
    pub per_seed: Vec<Vec<Option<f64>>>,
    pub mean: Vec<Option<f64>>,
    /// Population standard deviation across seeds.
    pub std: Vec<Option<f64>>,
    /// Trapezoidal area under the mean curve over its defined points.
    pub f_auc: Option<f64>,
}

impl FairnessCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,mean,std");
        for s in &self.seeds {
            let _ = write!(out, ",seed_{s}");
        }
        out.push('\n');
        let cell = |v: Option<f64>| v.map(format_value).unwrap_or_default();
        for (f, &fraction) in self.fractions.iter().enumerate() {
            let _ = write!(out, "{},{},{}", format_value(fraction), cell(self.mean[f]), cell(self.std[f]));
            for row in &self.per_seed {
                let _ = write!(out, ",{}", cell(row[f]));
            }
            out.push('\n');
        }
        out
    }

    /// Line plot of the mean with a shaded ±1 std band.
    pub fn to_svg(&self, title: &str) -> String {
        let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 20.0, 40.0, 50.0);
        let points: Vec<(f64, f64, f64)> = self
            .fractions
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .filter_map(|((&f, m), s)| m.map(|m| (f, m, s.unwrap_or(0.0))))
            .collect();
        let y_max = points.iter().map(|p| p.1 + p.2).fold(1.0f64, f64::max) * 1.1;
        let x = |f: f64| left + f * (w - left - right);
        let y = |v: f64| h - bottom - (v.max(0.0) / y_max) * (h - top - bottom);
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"##
        );
        let _ = writeln!(svg, r##"<rect width="{w}" height="{h}" fill="white"/>"##);
        let _ = writeln!(svg, r##"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"##, w / 2.0, escape(title));
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{0}" stroke="black"/>"##,
            h - bottom,
            w - right
        );
        for i in 0..=5 {
            let f = i as f64 / 5.0;
            let _ = writeln!(svg, r##"<text x="{:.1}" y="{:.1}" text-anchor="middle">{f:.1}</text>"##, x(f), h - bottom + 18.0);
            let v = y_max * f;
            let _ = writeln!(svg, r##"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"##, left - 6.0, y(v) + 4.0);
        }
        let _ = writeln!(
            svg,
            r##"<text x="{:.1}" y="{:.1}" text-anchor="middle">fraction of unmatched rows</text>"##,
            (left + w - right) / 2.0,
            h - 12.0
        );
        let _ = writeln!(
            svg,
            r##"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"##,
            h / 2.0,
            h / 2.0,
            self.metric.name()
        );
        if !points.is_empty() {
            let upper = points.iter().map(|p| format!("{:.2},{:.2}", x(p.0), y(p.1 + p.2)));
            let lower = points.iter().rev().map(|p| format!("{:.2},{:.2}", x(p.0), y(p.1 - p.2)));
            let band: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(svg, r##"<polygon points="{}" fill="#bbbbbb" fill-opacity="0.6"/>"##, band.join(" "));
            let line: Vec<String> = points.iter().map(|p| format!("{:.2},{:.2}", x(p.0), y(p.1))).collect();
            let _ = writeln!(svg, r##"<polyline points="{}" fill="none" stroke="#1f4e9c" stroke-width="2"/>"##, line.join(" "));
        }
        if let Some(auc) = self.f_auc {
            let _ = writeln!(svg, r##"<text x="{:.1}" y="{:.1}" text-anchor="end">f-AUC {auc:.3}</text>"##, w - right - 4.0, top + 14.0);
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Trapezoidal area over the defined `(x, y)` points.
pub fn trapezoid(xs: &[f64], ys: &[Option<f64>]) -> Option<f64> {
    let points: Vec<(f64, f64)> = xs.iter().zip(ys).filter_map(|(&x, y)| y.map(|y| (x, y))).collect();
    if points.len() < 2 {
        return None;
    }
    Some(points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum())
}

/// Fairness curve of the model's default predictions on `test`.
pub fn fairness_curve(
    model: &dyn ProbabilisticClassifier,
    test: &Dataset,
    matching: &MatchResult,
    metric: Metric,
    grid: &[f64],
    seeds: &[u64],
) -> Result<FairnessCurve> {
    let predictions = default_predict(&model.predict_proba(&test.features)?);
    fairness_curve_for_predictions(&predictions, test, matching, metric, grid, seeds)
}

/// For each seed, one permutation of the unmatched rows; the evaluation
/// set at fraction `f` is the matched rows plus the first
/// `ceil(f · |unmatched|)` of that permutation, so sets grow with `f`.
pub fn fairness_curve_for_predictions(
    predictions: &[u8],
    test: &Dataset,
    matching: &MatchResult,
    metric: Metric,
    grid: &[f64],
    seeds: &[u64],
) -> Result<FairnessCurve> {
    validate_grid(grid)?;
    ensure_len(test.len(), predictions.len())?;
    if seeds.is_empty() {
        return Err(Error::Config("fairness curve needs at least one seed".into()));
    }
    let matched = test.positions_of(&matching.matched_ids)?;
    let unmatched = test.positions_of(&matching.unmatched_ids)?;
    if matched.len() + unmatched.len() != test.len() {
        return Err(Error::Input("matching does not cover the test set".into()));
    }
    let per_seed: Vec<Vec<Option<f64>>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut order = unmatched.clone();
            rng::shuffle(&mut rng::rng_for(seed, Stream::Curve), &mut order);
            grid.iter()
                .map(|&f| {
                    let mut rows = matched.clone();
                    rows.extend_from_slice(&order[..unmatched_count(f, order.len())]);
                    metric_on(predictions, test, &rows, metric)
                })
                .collect()
        })
        .collect();
    let mut mean = Vec::with_capacity(grid.len());
    let mut std = Vec::with_capacity(grid.len());
    for f in 0..grid.len() {
        let values: Vec<f64> = per_seed.iter().filter_map(|row| row[f]).collect();
        let (m, s) = mean_std(&values);
        mean.push(m);
        std.push(s);
    }
    if mean.iter().any(Option::is_none) {
        log::warn!("{} is undefined at some curve points; f-AUC uses the defined ones", metric.name());
    }
    let f_auc = trapezoid(grid, &mean);
    Ok(FairnessCurve {
        metric,
        fractions: grid.to_vec(),
        seeds: seeds.to_vec(),
        per_seed,
        mean,
        std,
        f_auc,
    })
}

fn metric_on(predictions: &[u8], test: &Dataset, rows: &[usize], metric: Metric) -> Option<f64> {
    let y: Vec<u8> = rows.iter().map(|&i| test.labels[i]).collect();
    let p: Vec<u8> = rows.iter().map(|&i| predictions[i]).collect();
    let pa: Vec<u8> = rows.iter().map(|&i| test.pa[i]).collect();
    MetricReport::evaluate(&y, &p, &pa).ok().and_then(|r| r.get(metric))
}

/// Mean and population standard deviation; `None` for no values.
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Original,
    PsmMatched,
    ClassSampled,
    PaSampled,
    WaeSampled,
}

impl Subset {
    pub const ALL: [Subset; 5] = [
        Subset::Original,
        Subset::PsmMatched,
        Subset::ClassSampled,
        Subset::PaSampled,
        Subset::WaeSampled,
    ];
    pub const COMPARED: [Subset; 4] = [Subset::PsmMatched, Subset::ClassSampled, Subset::PaSampled, Subset::WaeSampled];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Original => "original",
            Subset::PsmMatched => "psm_matched",
            Subset::ClassSampled => "class_sampled",
            Subset::PaSampled => "pa_sampled",
            Subset::WaeSampled => "wae_sampled",
        }
    }

    fn strategy(self) -> Option<Strategy> {
        match self {
            Subset::ClassSampled => Some(Strategy::ClassBased),
            Subset::PaSampled => Some(Strategy::PaBased),
            Subset::WaeSampled => Some(Strategy::Wae),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Better,
    Worse,
    Unchanged,
}

impl Verdict {
    /// Higher performance and lower fairness scores are better.
    pub fn of(metric: Metric, original: f64, subset: f64) -> Self {
        let improved = if metric.smaller_is_better() {
            subset < original
        } else {
            subset > original
        };
        if subset == original {
            Verdict::Unchanged
        } else if improved {
            Verdict::Better
        } else {
            Verdict::Worse
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Verdict::Better => "better",
            Verdict::Worse => "worse",
            Verdict::Unchanged => "unchanged",
        }
    }
}

/// `(subset − original) / original`, undefined when the original is 0.
pub fn relative_delta(original: Option<f64>, subset: Option<f64>) -> Option<f64> {
    match (original, subset) {
        (Some(o), Some(s)) if o != 0.0 => Some((s - o) / o),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetEntry {
    pub subset: Subset,
    pub size: usize,
    /// Share of the test set.
    pub ratio: f64,
    pub report: Option<MetricReport>,
    /// Why no report could be computed, if so.
    pub failure: Option<String>,
    /// Relative deltas against the original, in `Metric::ALL` order.
    pub deltas: Vec<Option<f64>>,
    pub verdicts: Vec<Option<Verdict>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub entries: Vec<SubsetEntry>,
    pub matching: MatchResult,
}

impl SubgroupReport {
    pub fn entry(&self, subset: Subset) -> &SubsetEntry {
        self.entries
            .iter()
            .find(|e| e.subset == subset)
            .expect("every subset has an entry")
    }

    pub fn report(&self, subset: Subset) -> Option<&MetricReport> {
        self.entry(subset).report.as_ref()
    }

    pub fn delta(&self, subset: Subset, metric: Metric) -> Option<f64> {
        let idx = Metric::ALL.iter().position(|m| *m == metric)?;
        self.entry(subset).deltas[idx]
    }

    /// One row per subset with size, ratio and the eight metrics.
    pub fn metrics_csv(&self) -> String {
        let mut out = format!("subset,size,ratio,{}\n", MetricReport::csv_header().join(","));
        for e in &self.entries {
            let cells = e.report.map(|r| r.csv_cells()).unwrap_or_else(|| vec![String::new(); 8]);
            let _ = writeln!(out, "{},{},{},{}", e.subset.name(), e.size, format_value(e.ratio), cells.join(","));
        }
        out
    }

    /// One row per compared subset and metric with the delta and verdict.
    pub fn deltas_csv(&self) -> String {
        let mut out = String::from("subset,metric,original,value,delta,verdict\n");
        let original = self.report(Subset::Original);
        for e in self.entries.iter().filter(|e| e.subset != Subset::Original) {
            for (i, m) in Metric::ALL.iter().enumerate() {
                let cell = |v: Option<f64>| v.map(format_value).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    e.subset.name(),
                    m.name(),
                    cell(original.and_then(|r| r.get(*m))),
                    cell(e.report.and_then(|r| r.get(*m))),
                    cell(e.deltas[i]),
                    e.verdicts[i].map(Verdict::name).unwrap_or_default()
                );
            }
        }
        out
    }
}

/// Matches the test set, draws the three balanced samples and reports
/// every subset against the full test set. Subsets whose metrics cannot
/// be computed are recorded with a failure message.
pub fn subgroup_report(
    model: &dyn ProbabilisticClassifier,
    test: &Dataset,
    propensity: Option<&PropensityScores>,
    match_cfg: &MatchConfig,
    sample_seed: u64,
) -> Result<SubgroupReport> {
    let scores = psm::propensity_scores(model, test)?;
    let predictions = default_predict(&scores.scores);
    let propensity = propensity.unwrap_or(&scores);
    let matching = psm::match_test_set(propensity, &test.pa, Some(&test.features), match_cfg)?;
    subgroup_report_for_predictions(&predictions, test, matching, sample_seed)
}

pub fn subgroup_report_for_predictions(
    predictions: &[u8],
    test: &Dataset,
    matching: MatchResult,
    sample_seed: u64,
) -> Result<SubgroupReport> {
    ensure_len(test.len(), predictions.len())?;
    let original = MetricReport::evaluate(&test.labels, predictions, &test.pa)?;
    let mut entries = Vec::with_capacity(Subset::ALL.len());
    for subset in Subset::ALL {
        let ids: Result<Vec<u64>> = match subset {
            Subset::Original => Ok(test.row_ids.clone()),
            Subset::PsmMatched => Ok(matching.matched_ids.clone()),
            other => other
                .strategy()
                .expect("sampled subset")
                .apply(test, sample_seed)
                .map(|s| s.selected_ids),
        };
        let (size, outcome) = match ids {
            Ok(ids) => {
                let rows = test.positions_of(&ids)?;
                let y: Vec<u8> = rows.iter().map(|&i| test.labels[i]).collect();
                let p: Vec<u8> = rows.iter().map(|&i| predictions[i]).collect();
                let pa: Vec<u8> = rows.iter().map(|&i| test.pa[i]).collect();
                (ids.len(), MetricReport::evaluate(&y, &p, &pa))
            }
            Err(e) => (0, Err(e)),
        };
        let (report, failure) = match outcome {
            Ok(r) => (Some(r), None),
            Err(e) => {
                log::warn!("{} subset: {e}", subset.name());
                (None, Some(e.to_string()))
            }
        };
        let deltas = Metric::ALL
            .iter()
            .map(|m| relative_delta(original.get(*m), report.and_then(|r| r.get(*m))))
            .collect();
        let verdicts = Metric::ALL
            .iter()
            .map(|m| match (original.get(*m), report.and_then(|r| r.get(*m))) {
                (Some(o), Some(s)) => Some(Verdict::of(*m, o, s)),
                _ => None,
            })
            .collect();
        entries.push(SubsetEntry {
            subset,
            size,
            ratio: size as f64 / test.len() as f64,
            report,
            failure,
            deltas,
            verdicts,
        });
    }
    Ok(SubgroupReport { entries, matching })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummaryRow {
    pub subset: Subset,
    pub metric: Metric,
    pub mean: Option<f64>,
    /// Population standard deviation.
    pub std: Option<f64>,
    /// Reports in which the delta was defined.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub rows: Vec<DeltaSummaryRow>,
}

impl DeltaSummary {
    pub fn get(&self, subset: Subset, metric: Metric) -> Option<&DeltaSummaryRow> {
        self.rows.iter().find(|r| r.subset == subset && r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset,metric,mean,std,n\n");
        let cell = |v: Option<f64>| v.map(format_value).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.subset.name(), r.metric.name(), cell(r.mean), cell(r.std), r.n);
        }
        out
    }
}

/// Mean and standard deviation of each relative delta across reports.
pub fn aggregate_deltas(reports: &[SubgroupReport]) -> Result<DeltaSummary> {
    if reports.is_empty() {
        return Err(Error::Input("aggregating deltas needs at least one report".into()));
    }
    let mut rows = Vec::new();
    for subset in Subset::COMPARED {
        for metric in Metric::ALL {
            let values: Vec<f64> = reports.iter().filter_map(|r| r.delta(subset, metric)).collect();
            let (mean, std) = mean_std(&values);
            rows.push(DeltaSummaryRow {
                subset,
                metric,
                mean,
                std,
                n: values.len(),
            });
        }
    }
    Ok(DeltaSummary { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::DatasetSchema;
    use crate::matrix::Matrix;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn dataset(labels: Vec<u8>, pa: Vec<u8>) -> Dataset {
        let n = labels.len();
        let schema = DatasetSchema::new("t", vec![], "pa", "1".into(), "y", "1".into());
        Dataset::new(Matrix::zeros(n, 1), labels, pa, Arc::new(schema)).unwrap()
    }

    #[test]
    fn trapezoid_examples() {
        let grid = default_grid();
        let constant: Vec<Option<f64>> = vec![Some(7.0); grid.len()];
        assert!((trapezoid(&grid, &constant).unwrap() - 7.0).abs() < 1e-12);
        let linear: Vec<Option<f64>> = grid.iter().map(|&f| Some(f)).collect();
        assert!((trapezoid(&grid, &linear).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(trapezoid(&[0.0, 1.0], &[Some(1.0), None]), None);
    }

    #[test]
    fn unmatched_counts() {
        assert_eq!(unmatched_count(0.0, 7), 0);
        assert_eq!(unmatched_count(0.3, 10), 3);
        assert_eq!(unmatched_count(0.31, 10), 4);
        assert_eq!(unmatched_count(1.0, 7), 7);
    }

    #[test]
    fn grid_validation() {
        assert!(validate_grid(&[0.0, 0.5, 1.0]).is_ok());
        assert!(validate_grid(&[0.1, 1.0]).is_err());
        assert!(validate_grid(&[0.0, 0.6, 0.5, 1.0]).is_err());
    }

    fn curve_fixture() -> (Dataset, Vec<u8>, MatchResult) {
        let labels = vec![1, 0, 1, 0, 1, 1, 0, 0, 1, 0, 1, 0];
        let pa = vec![1, 0, 1, 0, 1, 1, 1, 0, 0, 0, 1, 0];
        let preds = vec![1, 0, 1, 0, 1, 1, 1, 0, 0, 0, 1, 1];
        let ds = dataset(labels, pa);
        let matching = MatchResult {
            pairs: vec![(0, 1), (2, 3)],
            matched_ids: vec![0, 1, 2, 3],
            unmatched_ids: (4..12).collect(),
        };
        (ds, preds, matching)
    }

    #[test]
    fn curve_endpoints() {
        let (ds, preds, matching) = curve_fixture();
        let seeds: Vec<u64> = (0..5).collect();
        let curve = fairness_curve_for_predictions(&preds, &ds, &matching, Metric::Spd, &default_grid(), &seeds).unwrap();
        let matched_only = metric_on(&preds, &ds, &[0, 1, 2, 3], Metric::Spd);
        let full = MetricReport::evaluate(&ds.labels, &preds, &ds.pa).unwrap().spd;
        assert_eq!(curve.mean[0], matched_only);
        assert_eq!(curve.std[0], Some(0.0));
        assert!((curve.mean[10].unwrap() - full.unwrap()).abs() < 1e-12);
        assert_eq!(curve.per_seed.len(), 5);
        let csv = curve.to_csv();
        assert!(csv.starts_with("fraction,mean,std,seed_0,seed_1"));
        assert_eq!(csv.lines().count(), 12);
        assert!(curve.to_svg("spd").contains("<polyline"));
    }

    #[test]
    fn subgroup_perfect_predictor_is_fair_on_balanced_data() {
        let labels = vec![1, 0, 1, 0, 1, 0, 1, 0];
        let pa = vec![1, 1, 0, 0, 1, 1, 0, 0];
        let ds = dataset(labels.clone(), pa);
        let matching = MatchResult {
            pairs: vec![(0, 2), (1, 3)],
            matched_ids: vec![0, 1, 2, 3],
            unmatched_ids: vec![4, 5, 6, 7],
        };
        let report = subgroup_report_for_predictions(&labels, &ds, matching, 3).unwrap();
        assert_eq!(report.entry(Subset::Original).ratio, 1.0);
        assert_eq!(report.entry(Subset::PsmMatched).ratio, 0.5);
        for subset in Subset::ALL {
            let r = report.report(subset).unwrap();
            for m in [Metric::Aod, Metric::Eod, Metric::Spd, Metric::Di] {
                assert_eq!(r.get(m), Some(0.0), "{subset:?} {m:?}");
            }
        }
        assert_eq!(report.metrics_csv().lines().count(), 6);
        assert_eq!(report.deltas_csv().lines().count(), 1 + 4 * 8);
    }

    #[test]
    fn degenerate_subset_is_flagged() {
        // every matched row is privileged, so the matched subset fails
        let ds = dataset(vec![1, 0, 1, 0], vec![1, 1, 0, 0]);
        let matching = MatchResult {
            pairs: vec![],
            matched_ids: vec![0, 1],
            unmatched_ids: vec![2, 3],
        };
        let report = subgroup_report_for_predictions(&[1, 0, 1, 0], &ds, matching, 0).unwrap();
        let e = report.entry(Subset::PsmMatched);
        assert!(e.report.is_none() && e.failure.is_some());
        assert!(e.deltas.iter().all(Option::is_none));
    }

    #[test]
    fn deltas_and_verdicts() {
        assert_eq!(relative_delta(Some(10.0), Some(0.0)), Some(-1.0));
        assert_eq!(relative_delta(Some(0.0), Some(3.0)), None);
        assert_eq!(Verdict::of(Metric::Spd, 10.0, 0.0), Verdict::Better);
        assert_eq!(Verdict::of(Metric::Accuracy, 80.0, 70.0), Verdict::Worse);
        assert_eq!(Verdict::of(Metric::Accuracy, 80.0, 80.0), Verdict::Unchanged);
    }

    #[test]
    fn aggregation() {
        let (ds, preds, matching) = curve_fixture();
        let report = subgroup_report_for_predictions(&preds, &ds, matching, 1).unwrap();
        let single = aggregate_deltas(std::slice::from_ref(&report)).unwrap();
        assert!(single.rows.iter().all(|r| r.std.map_or(true, |s| s == 0.0)));
        let double = aggregate_deltas(&[report.clone(), report.clone()]).unwrap();
        for (a, b) in single.rows.iter().zip(&double.rows) {
            assert_eq!(a.mean, b.mean);
        }
        assert!(aggregate_deltas(&[]).is_err());
        assert_eq!(single.to_csv().lines().count(), 1 + 4 * 8);
    }

    proptest! {
        #[test]
        fn nested_sets_and_full_endpoint(
            rows in prop::collection::vec((0u8..2, 0u8..2, 0u8..2, any::<bool>()), 4..40),
            seed in 0u64..1000,
        ) {
            let labels: Vec<u8> = rows.iter().map(|r| r.0).collect();
            let pa: Vec<u8> = rows.iter().map(|r| r.1).collect();
            let preds: Vec<u8> = rows.iter().map(|r| r.2).collect();
            let ds = dataset(labels, pa);
            let matched: Vec<u64> = (0..rows.len() as u64).filter(|&i| rows[i as usize].3).collect();
            let unmatched: Vec<u64> = (0..rows.len() as u64).filter(|&i| !rows[i as usize].3).collect();
            let matching = MatchResult { pairs: vec![], matched_ids: matched, unmatched_ids: unmatched.clone() };
            let curve = fairness_curve_for_predictions(&preds, &ds, &matching, Metric::Aod, &default_grid(), &[seed]).unwrap();
            let full = MetricReport::evaluate(&ds.labels, &preds, &ds.pa).ok().and_then(|r| r.aod);
            prop_assert_eq!(curve.per_seed[0][10].map(|v| (v * 1e9).round()), full.map(|v| (v * 1e9).round()));
            // the permutation prefixes are nested by construction
            let mut order: Vec<u64> = unmatched.clone();
            rng::shuffle(&mut rng::rng_for(seed, Stream::Curve), &mut order);
            let grid = default_grid();
            for w in grid.windows(2) {
                prop_assert!(unmatched_count(w[0], order.len()) <= unmatched_count(w[1], order.len()));
            }
        }

        #[test]
        fn trapezoid_monotone(base in prop::collection::vec(0.0f64..50.0, 11), bump in prop::collection::vec(0.0f64..5.0, 11)) {
            let grid = default_grid();
            let lo: Vec<Option<f64>> = base.iter().map(|&v| Some(v)).collect();
            let hi: Vec<Option<f64>> = base.iter().zip(&bump).map(|(v, b)| Some(v + b)).collect();
            prop_assert!(trapezoid(&grid, &lo).unwrap() <= trapezoid(&grid, &hi).unwrap() + 1e-12);
            let max = base.iter().cloned().fold(0.0, f64::max);
            let auc = trapezoid(&grid, &lo).unwrap();
            prop_assert!(auc >= -1e-12 && auc <= max + 1e-12);
        }
    }
}
