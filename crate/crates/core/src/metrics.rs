//! Confusion-matrix performance metrics, group fairness metrics and
//! Generational Distance.
//!
//! All reported scores use a 0–100 scale. Fairness metrics are reported as
//! absolute deviations from parity: `|AOD|`, `|EOD|`, `|SPD|` and
//! `|1 - DI|`, each times 100. Undefined values (zero denominators) are
//! `None` and serialize as `null`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn add(&mut self, truth: u8, prediction: u8) {
        match (truth, prediction) {
            (1, 1) => self.tp += 1,
            (0, 1) => self.fp += 1,
            (0, 0) => self.tn += 1,
            _ => self.fn_ += 1,
        }
    }

    pub fn tpr(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> Option<f64> {
        ratio(self.fp, self.fp + self.tn)
    }

    /// Share of rows predicted favorable.
    pub fn favorable_rate(&self) -> Option<f64> {
        ratio(self.tp + self.fp, self.total())
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn check_binary(values: &[u8], what: &str) -> Result<()> {
    if values.iter().any(|&v| v > 1) {
        return Err(Error::Input(format!("{what} must be 0/1")));
    }
    Ok(())
}

/// Confusion matrix with the favorable label (1) as the positive class.
pub fn confusion(y_true: &[u8], y_pred: &[u8]) -> Result<ConfusionMatrix> {
    ensure_len(y_true.len(), y_pred.len())?;
    if y_true.is_empty() {
        return Err(Error::Input("confusion matrix needs at least one row".into()));
    }
    check_binary(y_true, "labels")?;
    check_binary(y_pred, "predictions")?;
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        cm.add(t, p);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMetrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn performance_metrics(cm: &ConfusionMatrix) -> PerformanceMetrics {
    let accuracy = ratio(cm.tp + cm.tn, cm.total()).map(|v| v * 100.0);
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    PerformanceMetrics {
        accuracy,
        precision: precision.map(|v| v * 100.0),
        recall: recall.map(|v| v * 100.0),
        f1: f1.map(|v| v * 100.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub tpr_p: Option<f64>,
    pub fpr_p: Option<f64>,
    pub tpr_u: Option<f64>,
    pub fpr_u: Option<f64>,
    pub fav_rate_p: Option<f64>,
    pub fav_rate_u: Option<f64>,
}

/// Group fairness scores: signed raw quantities and the reported
/// absolute, percent-scaled values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupFairness {
    pub aod: Option<f64>,
    pub eod: Option<f64>,
    pub spd: Option<f64>,
    pub di_dev: Option<f64>,
    /// `((FPR_U - FPR_P) + (TPR_U - TPR_P)) / 2`
    pub aod_signed: Option<f64>,
    /// `TPR_U - TPR_P`
    pub eod_signed: Option<f64>,
    /// `P(Ŷ=1 | PA=0) - P(Ŷ=1 | PA=1)`
    pub spd_signed: Option<f64>,
    /// `P(Ŷ=1 | PA=0) / P(Ŷ=1 | PA=1)`
    pub di_ratio: Option<f64>,
    pub rates: GroupRates,
}

pub fn group_fairness(y_true: &[u8], y_pred: &[u8], pa: &[u8]) -> Result<GroupFairness> {
    ensure_len(y_true.len(), y_pred.len())?;
    ensure_len(y_true.len(), pa.len())?;
    check_binary(y_true, "labels")?;
    check_binary(y_pred, "predictions")?;
    check_binary(pa, "protected attribute")?;
    let mut privileged = ConfusionMatrix::default();
    let mut unprivileged = ConfusionMatrix::default();
    for ((&t, &p), &g) in y_true.iter().zip(y_pred).zip(pa) {
        if g == 1 {
            privileged.add(t, p);
        } else {
            unprivileged.add(t, p);
        }
    }
    if privileged.total() == 0 || unprivileged.total() == 0 {
        return Err(Error::DegenerateGroup(
            "both protected groups must be present".into(),
        ));
    }
    let rates = GroupRates {
        tpr_p: privileged.tpr(),
        fpr_p: privileged.fpr(),
        tpr_u: unprivileged.tpr(),
        fpr_u: unprivileged.fpr(),
        fav_rate_p: privileged.favorable_rate(),
        fav_rate_u: unprivileged.favorable_rate(),
    };
    let eod_signed = rates.tpr_u.zip(rates.tpr_p).map(|(u, p)| u - p);
    let fpr_gap = rates.fpr_u.zip(rates.fpr_p).map(|(u, p)| u - p);
    let aod_signed = eod_signed.zip(fpr_gap).map(|(t, f)| (f + t) / 2.0);
    let spd_signed = rates.fav_rate_u.zip(rates.fav_rate_p).map(|(u, p)| u - p);
    let di_ratio = rates
        .fav_rate_u
        .zip(rates.fav_rate_p)
        .and_then(|(u, p)| (p > 0.0).then(|| u / p));
    let report = |v: Option<f64>| v.map(|x| x.abs() * 100.0);
    Ok(GroupFairness {
        aod: report(aod_signed),
        eod: report(eod_signed),
        spd: report(spd_signed),
        di_dev: report(di_ratio.map(|r| 1.0 - r)),
        aod_signed,
        eod_signed,
        spd_signed,
        di_ratio,
        rates,
    })
}

/// The eight reported metrics, in report column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Precision,
    Recall,
    F1,
    Aod,
    Eod,
    Spd,
    Di,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::Accuracy,
        Metric::Precision,
        Metric::Recall,
        Metric::F1,
        Metric::Aod,
        Metric::Eod,
        Metric::Spd,
        Metric::Di,
    ];
    pub const PERFORMANCE: [Metric; 4] =
        [Metric::Accuracy, Metric::Precision, Metric::Recall, Metric::F1];
    pub const FAIRNESS: [Metric; 4] = [Metric::Aod, Metric::Eod, Metric::Spd, Metric::Di];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
            Metric::Aod => "aod",
            Metric::Eod => "eod",
            Metric::Spd => "spd",
            Metric::Di => "di",
        }
    }

    pub fn is_fairness(self) -> bool {
        matches!(self, Metric::Aod | Metric::Eod | Metric::Spd | Metric::Di)
    }

    pub fn smaller_is_better(self) -> bool {
        self.is_fairness()
    }

    /// Ideal value on the reporting scale.
    pub fn optimal(self) -> f64 {
        if self.is_fairness() {
            0.0
        } else {
            100.0
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == lower || (lower == "acc" && *m == Metric::Accuracy))
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

/// One evaluation: four performance and four fairness scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub aod: Option<f64>,
    pub eod: Option<f64>,
    pub spd: Option<f64>,
    pub di: Option<f64>,
}

impl MetricReport {
    pub fn evaluate(y_true: &[u8], y_pred: &[u8], pa: &[u8]) -> Result<Self> {
        let perf = performance_metrics(&confusion(y_true, y_pred)?);
        let fair = group_fairness(y_true, y_pred, pa)?;
        Ok(Self {
            accuracy: perf.accuracy,
            precision: perf.precision,
            recall: perf.recall,
            f1: perf.f1,
            aod: fair.aod,
            eod: fair.eod,
            spd: fair.spd,
            di: fair.di_dev,
        })
    }

    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Accuracy => self.accuracy,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::F1 => self.f1,
            Metric::Aod => self.aod,
            Metric::Eod => self.eod,
            Metric::Spd => self.spd,
            Metric::Di => self.di,
        }
    }

    pub fn undefined(&self) -> Vec<Metric> {
        Metric::ALL.into_iter().filter(|m| self.get(*m).is_none()).collect()
    }

    /// Defined values among `metrics` paired with their optima.
    pub fn metric_vector(&self, metrics: &[Metric]) -> MetricVector {
        let (values, optimal) = metrics
            .iter()
            .filter_map(|m| self.get(*m).map(|v| (v, m.optimal())))
            .unzip();
        MetricVector { values, optimal }
    }

    /// GD over all eight metrics, skipping undefined ones.
    pub fn gd(&self) -> Option<f64> {
        generational_distance(&self.metric_vector(&Metric::ALL)).ok()
    }

    pub fn performance_gd(&self) -> Option<f64> {
        generational_distance(&self.metric_vector(&Metric::PERFORMANCE)).ok()
    }

    pub fn fairness_gd(&self) -> Option<f64> {
        generational_distance(&self.metric_vector(&Metric::FAIRNESS)).ok()
    }

    pub fn csv_header() -> [&'static str; 8] {
        Metric::ALL.map(Metric::name)
    }

    /// CSV cells in the fixed column order; undefined cells are empty.
    pub fn csv_cells(&self) -> Vec<String> {
        Metric::ALL
            .iter()
            .map(|m| self.get(*m).map(format_value).unwrap_or_default())
            .collect()
    }

    /// Values rounded half away from zero to integers, as in printed tables.
    pub fn rounded(&self) -> MetricReport {
        let r = |v: Option<f64>| v.map(f64::round);
        MetricReport {
            accuracy: r(self.accuracy),
            precision: r(self.precision),
            recall: r(self.recall),
            f1: r(self.f1),
            aod: r(self.aod),
            eod: r(self.eod),
            spd: r(self.spd),
            di: r(self.di),
        }
    }
}

/// Fixed-precision rendering used in every emitted table.
pub fn format_value(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub values: Vec<f64>,
    pub optimal: Vec<f64>,
}

/// `GD = (1/N) Σ sqrt((M_i - M_i*)^2)`.
pub fn generational_distance(mv: &MetricVector) -> Result<f64> {
    ensure_len(mv.values.len(), mv.optimal.len())?;
    if mv.values.is_empty() {
        return Err(Error::Input("generational distance needs at least one metric".into()));
    }
    let total: f64 = mv
        .values
        .iter()
        .zip(&mv.optimal)
        .map(|(m, o)| ((m - o) * (m - o)).sqrt())
        .sum();
    Ok(total / mv.values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn confusion_examples() {
        assert_eq!(confusion(&[1, 0], &[1, 0]).unwrap(), ConfusionMatrix::new(1, 0, 1, 0));
        assert_eq!(confusion(&[1, 0], &[0, 1]).unwrap(), ConfusionMatrix::new(0, 1, 0, 1));
        assert_eq!(
            confusion(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap(),
            ConfusionMatrix::new(1, 1, 1, 1)
        );
        assert!(matches!(confusion(&[1], &[1, 0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn performance_examples() {
        let all = |m: PerformanceMetrics| [m.accuracy, m.precision, m.recall, m.f1].map(Option::unwrap);
        assert_eq!(all(performance_metrics(&ConfusionMatrix::new(2, 0, 2, 0))), [100.0; 4]);
        assert_eq!(all(performance_metrics(&ConfusionMatrix::new(1, 1, 1, 1))), [50.0; 4]);
        // accuracy 8/10, precision 3/4, recall 3/4, f1 = 2*.75*.75/1.5
        let m = all(performance_metrics(&ConfusionMatrix::new(3, 1, 5, 1)));
        for (got, want) in m.iter().zip([80.0, 75.0, 75.0, 75.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn undefined_performance_markers() {
        let m = performance_metrics(&ConfusionMatrix::new(0, 0, 3, 0));
        assert_eq!(m.accuracy, Some(100.0));
        assert_eq!((m.precision, m.recall, m.f1), (None, None, None));
    }

    #[test]
    fn identical_group_behavior_is_fair() {
        let y = [1, 0, 1, 0];
        let p = [1, 0, 1, 0];
        let g = group_fairness(&y, &p, &[1, 1, 0, 0]).unwrap();
        assert_eq!([g.aod, g.eod, g.spd, g.di_dev], [Some(0.0); 4]);
    }

    #[test]
    fn favorable_rate_gap() {
        // privileged 5/10 favorable, unprivileged 4/10
        let pa: Vec<u8> = [1; 10].into_iter().chain([0; 10]).collect();
        let pred: Vec<u8> = (0..20).map(|i| u8::from(if i < 10 { i < 5 } else { i < 14 })).collect();
        let g = group_fairness(&pred, &pred, &pa).unwrap();
        assert_abs_diff_eq!(g.spd.unwrap(), 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g.di_dev.unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn eight_row_equal_opportunity_instance() {
        // privileged: 2 positives (one caught), 2 negatives (none flagged)
        // unprivileged: 2 positives (both caught), 2 negatives (none flagged)
        let pa = [1, 1, 1, 1, 0, 0, 0, 0];
        let y = [1, 1, 0, 0, 1, 1, 0, 0];
        let p = [1, 0, 0, 0, 1, 1, 0, 0];
        let g = group_fairness(&y, &p, &pa).unwrap();
        assert_eq!(g.rates.tpr_u, Some(1.0));
        assert_eq!(g.rates.tpr_p, Some(0.5));
        assert_abs_diff_eq!(g.eod.unwrap(), 50.0);
        assert_abs_diff_eq!(g.aod.unwrap(), 25.0);
    }

    #[test]
    fn missing_group_is_an_error() {
        assert!(matches!(
            group_fairness(&[1, 0], &[1, 0], &[1, 1]),
            Err(Error::DegenerateGroup(_))
        ));
    }

    #[test]
    fn di_undefined_without_privileged_favorables() {
        let g = group_fairness(&[1, 0, 1, 0], &[0, 0, 1, 0], &[1, 1, 0, 0]).unwrap();
        assert_eq!(g.di_dev, None);
        assert_eq!(g.spd, Some(50.0));
    }

    #[test]
    fn gd_examples() {
        let mv = |v: &[f64], o: &[f64]| MetricVector { values: v.to_vec(), optimal: o.to_vec() };
        assert_eq!(generational_distance(&mv(&[90.0, 3.0], &[90.0, 3.0])).unwrap(), 0.0);
        assert_eq!(generational_distance(&mv(&[90.0], &[100.0])).unwrap(), 10.0);
        assert_eq!(generational_distance(&mv(&[80.0, 20.0], &[100.0, 0.0])).unwrap(), 20.0);
        assert!(generational_distance(&mv(&[1.0], &[1.0, 2.0])).is_err());
    }

    #[test]
    fn gd_skips_undefined_metrics() {
        let report = MetricReport {
            accuracy: Some(90.0),
            precision: None,
            recall: Some(80.0),
            f1: None,
            aod: Some(10.0),
            eod: None,
            spd: Some(0.0),
            di: None,
        };
        // (10 + 20 + 10 + 0) / 4
        assert_abs_diff_eq!(report.gd().unwrap(), 10.0);
        assert_eq!(report.undefined().len(), 4);
    }

    #[test]
    fn report_json_is_flat() {
        let report = MetricReport::evaluate(&[1, 0, 1, 0], &[1, 0, 0, 0], &[0, 0, 1, 1]).unwrap();
        let json = serde_json::to_value(report).unwrap();
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 8);
        assert!(json["di"].is_null());
        assert_eq!(MetricReport::csv_header().join(","), "accuracy,precision,recall,f1,aod,eod,spd,di");
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let mut report = MetricReport::evaluate(&[1, 0], &[1, 0], &[1, 0]).unwrap();
        report.aod = Some(2.5);
        report.eod = Some(3.49);
        let r = report.rounded();
        assert_eq!((r.aod, r.eod), (Some(3.0), Some(3.0)));
    }

    proptest! {
        #[test]
        fn swapping_groups_keeps_absolute_differences(
            rows in prop::collection::vec((0u8..2, 0u8..2, 0u8..2), 2..60)
        ) {
            let y: Vec<u8> = rows.iter().map(|r| r.0).collect();
            let p: Vec<u8> = rows.iter().map(|r| r.1).collect();
            let pa: Vec<u8> = rows.iter().map(|r| r.2).collect();
            let swapped: Vec<u8> = pa.iter().map(|g| 1 - g).collect();
            if let (Ok(a), Ok(b)) = (group_fairness(&y, &p, &pa), group_fairness(&y, &p, &swapped)) {
                let close = |x: Option<f64>, z: Option<f64>| match (x, z) {
                    (Some(x), Some(z)) => (x - z).abs() < 1e-9,
                    (x, z) => x.is_none() == z.is_none(),
                };
                prop_assert!(close(a.aod, b.aod));
                prop_assert!(close(a.eod, b.eod));
                prop_assert!(close(a.spd, b.spd));
                // DI is a ratio: swapping the groups inverts it
                if let (Some(r), Some(s)) = (a.di_ratio, b.di_ratio) {
                    prop_assert!((r * s - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn confusion_marginals(rows in prop::collection::vec((0u8..2, 0u8..2), 1..80)) {
            let y: Vec<u8> = rows.iter().map(|r| r.0).collect();
            let p: Vec<u8> = rows.iter().map(|r| r.1).collect();
            let cm = confusion(&y, &p).unwrap();
            prop_assert_eq!(cm.total() as usize, y.len());
            prop_assert_eq!((cm.tp + cm.fn_) as usize, y.iter().filter(|&&v| v == 1).count());
        }

        #[test]
        fn gd_is_nonnegative_and_permutation_invariant(
            pairs in prop::collection::vec((0f64..100.0, prop::bool::ANY), 1..10)
        ) {
            let values: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let optimal: Vec<f64> = pairs.iter().map(|p| if p.1 { 100.0 } else { 0.0 }).collect();
            let gd = generational_distance(&MetricVector { values: values.clone(), optimal: optimal.clone() }).unwrap();
            prop_assert!(gd >= 0.0);
            let rev = MetricVector {
                values: values.iter().rev().copied().collect(),
                optimal: optimal.iter().rev().copied().collect(),
            };
            prop_assert!((generational_distance(&rev).unwrap() - gd).abs() < 1e-9);
            let same = MetricVector { values: values.clone(), optimal: values };
            prop_assert_eq!(generational_distance(&same).unwrap(), 0.0);
        }
    }
}
