//! End-to-end experiments: datasets × methods × seeded repeats, method
//! ranking and report emission.
//!
//! For every dataset and seed the data is split once and one model is
//! fitted; every method is then evaluated on that same split. Cells run in
//! parallel and results come back in configuration order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{self, Dataset, SchemaFile, SplitPair, DEFAULT_TRAIN_FRACTION};
use crate::error::{Error, Result};
use crate::fairmatch::{self, ThresholdPair, DEFAULT_GRID_STEP};
use crate::fairtest::{self, FairnessCurve, Subset, SubsetEntry};
use crate::learners::{fit_logistic, LearnerKind, LogisticConfig, Model, ProbabilisticClassifier};
use crate::metrics::{format_value, Metric, MetricReport};
use crate::psm::{self, MatchConfig, MatchResult, PropensityScores};
use crate::stats::{self, RankTable};

pub const DEFAULT_REPEATS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Schema id, the file stem under `<data_dir>/schemas`.
    pub schema: String,
    pub protected: String,
}

impl DatasetSpec {
    pub fn new(schema: impl Into<String>, protected: impl Into<String>) -> Self {
        Self {
            schema: schema.into(),
            protected: protected.into(),
        }
    }

    /// `schema:protected`, as used in records and file names.
    pub fn key(&self) -> String {
        format!("{}:{}", self.schema, self.protected)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MethodSpec {
    Baseline,
    Fairmatch,
    /// Scores computed elsewhere: a CSV with `row_id,score` columns and
    /// optional `dataset` and `seed` columns to restrict rows.
    External { name: String, path: PathBuf },
}

impl MethodSpec {
    pub fn name(&self) -> String {
        match self {
            MethodSpec::Baseline => "baseline".into(),
            MethodSpec::Fairmatch => "fairmatch".into(),
            MethodSpec::External { name, .. } => name.clone(),
        }
    }
}

/// What the propensity model predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PropensityTarget {
    /// The classifier's own favorable-label probability.
    #[default]
    Label,
    /// A separate logistic model of the protected attribute, fitted on the
    /// features without the attribute.
    ProtectedAttribute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub datasets: Vec<DatasetSpec>,
    pub data_dir: PathBuf,
    pub learner: LearnerKind,
    pub methods: Vec<MethodSpec>,
    pub repeats: usize,
    pub train_fraction: f64,
    pub base_seed: u64,
    /// Explicit seeds; `base_seed + i` for `i < repeats` when absent.
    pub seeds: Option<Vec<u64>>,
    pub match_cfg: MatchConfig,
    pub grid_step: f64,
    pub propensity: PropensityTarget,
    /// Subgroup reports of the unmitigated model per seed.
    pub audit: bool,
    /// Metrics with a fairness curve per dataset (on the first seed).
    pub curve_metrics: Vec<Metric>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            data_dir: PathBuf::from("data"),
            learner: LearnerKind::Logistic,
            methods: vec![MethodSpec::Baseline, MethodSpec::Fairmatch],
            repeats: DEFAULT_REPEATS,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            base_seed: 0,
            seeds: None,
            match_cfg: MatchConfig::default(),
            grid_step: DEFAULT_GRID_STEP,
            propensity: PropensityTarget::Label,
            audit: true,
            curve_metrics: Metric::FAIRNESS.to_vec(),
        }
    }
}

impl ExperimentConfig {
    pub fn seed_list(&self) -> Vec<u64> {
        match &self.seeds {
            Some(seeds) => seeds.clone(),
            None => (0..self.repeats as u64).map(|i| self.base_seed.wrapping_add(i)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::Config("no datasets configured".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods configured".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be positive".into()));
        }
        if let Some(seeds) = &self.seeds {
            if seeds.len() != self.repeats {
                return Err(Error::Config(format!(
                    "{} seeds listed for {} repeats",
                    seeds.len(),
                    self.repeats
                )));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        self.match_cfg.validate()?;
        fairmatch::grid_intervals(self.grid_step)?;
        let mut names: Vec<String> = self.methods.iter().map(MethodSpec::name).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("method names must be unique".into()));
        }
        for spec in &self.datasets {
            load_schema(&self.data_dir, &spec.schema)?.protected_attribute(&spec.protected)?;
        }
        Ok(())
    }

    /// SHA-256 of the configuration with the data directory left out.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.data_dir = PathBuf::new();
        let text = serde_json::to_string(&canonical).expect("config serializes");
        dataio::hex(&Sha256::digest(text.as_bytes()))
    }
}

pub fn schema_path(data_dir: &Path, schema: &str) -> PathBuf {
    data_dir.join("schemas").join(format!("{schema}.json"))
}

pub fn load_schema(data_dir: &Path, schema: &str) -> Result<SchemaFile> {
    let path = schema_path(data_dir, schema);
    if !path.exists() {
        return Err(Error::Config(format!("unknown dataset `{schema}` (no {})", path.display())));
    }
    SchemaFile::from_path(path)
}

/// Loads and min-max scales one dataset, with the data file's hash.
pub fn load_prepared(data_dir: &Path, spec: &DatasetSpec) -> Result<(Dataset, DataProvenance)> {
    let file = load_schema(data_dir, &spec.schema)?;
    let schema = file.resolve(&spec.protected, true)?;
    let name = file
        .data_file
        .clone()
        .unwrap_or_else(|| format!("{}.csv", spec.schema));
    let path = data_dir.join(&name);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let sha256 = dataio::hex(&Sha256::digest(&bytes));
    let (data, report) = dataio::prepare(&path, &schema)?;
    let provenance = DataProvenance {
        dataset: spec.key(),
        file: name,
        sha256,
        rows_read: report.rows_read,
        rows_dropped: report.rows_dropped,
    };
    Ok((data, provenance))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataProvenance {
    pub dataset: String,
    pub file: String,
    pub sha256: String,
    pub rows_read: usize,
    pub rows_dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub scaling: String,
    pub data: Vec<DataProvenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub dataset: String,
    pub method: String,
    pub seed: u64,
    pub split_fingerprint: Option<String>,
    pub report: Option<MetricReport>,
    pub gd: Option<f64>,
    pub matched_ratio: Option<f64>,
    pub thresholds: Option<ThresholdPair>,
    pub error: Option<String>,
}

impl ExperimentRecord {
    fn failure(dataset: &str, method: &str, seed: u64, fingerprint: Option<String>, error: &Error) -> Self {
        Self {
            dataset: dataset.into(),
            method: method.into(),
            seed,
            split_fingerprint: fingerprint,
            report: None,
            gd: None,
            matched_ratio: None,
            thresholds: None,
            error: Some(error.to_string()),
        }
    }

    pub fn is_failure(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub dataset: String,
    pub seed: u64,
    pub entries: Vec<SubsetEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub dataset: String,
    pub seed: u64,
    pub curve: FairnessCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub config: ExperimentConfig,
    pub provenance: Provenance,
    pub records: Vec<ExperimentRecord>,
    pub audits: Vec<AuditRecord>,
    pub curves: Vec<CurveRecord>,
}

impl ExperimentResults {
    pub fn has_failures(&self) -> bool {
        self.records.iter().any(ExperimentRecord::is_failure)
    }

    pub fn dataset_keys(&self) -> Vec<String> {
        self.config.datasets.iter().map(DatasetSpec::key).collect()
    }

    pub fn records_for<'a>(&'a self, dataset: &'a str, method: &'a str) -> impl Iterator<Item = &'a ExperimentRecord> + 'a {
        self.records
            .iter()
            .filter(move |r| r.dataset == dataset && r.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// External scores keyed by row id.
#[derive(Debug, Clone, Default)]
pub struct ExternalScores {
    rows: Vec<(Option<String>, Option<u64>, u64, f64)>,
}

impl ExternalScores {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let (Some(id_col), Some(score_col)) = (find("row_id"), find("score")) else {
            return Err(Error::Input("external predictions need `row_id` and `score` columns".into()));
        };
        let (dataset_col, seed_col) = (find("dataset"), find("seed"));
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let field = |i: usize| record.get(i).unwrap_or("").trim();
            let parse_err = |what: &str, v: &str| Error::Input(format!("bad {what} `{v}` in external predictions"));
            let id: u64 = field(id_col).parse().map_err(|_| parse_err("row_id", field(id_col)))?;
            let score: f64 = field(score_col).parse().map_err(|_| parse_err("score", field(score_col)))?;
            if !(0.0..=1.0).contains(&score) {
                return Err(parse_err("score", field(score_col)));
            }
            let dataset = dataset_col.map(|c| field(c).to_string());
            let seed = match seed_col {
                Some(c) => Some(field(c).parse().map_err(|_| parse_err("seed", field(c)))?),
                None => None,
            };
            rows.push((dataset, seed, id, score));
        }
        Ok(Self { rows })
    }

    /// Scores for the test rows of one cell, in test order.
    pub fn scores_for(&self, dataset: &str, seed: u64, test: &Dataset) -> Result<Vec<f64>> {
        let mut by_id = std::collections::HashMap::new();
        for (d, s, id, score) in &self.rows {
            if d.as_deref().map_or(true, |d| d == dataset) && s.map_or(true, |s| s == seed) {
                by_id.insert(*id, *score);
            }
        }
        test.row_ids
            .iter()
            .map(|id| {
                by_id
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Input(format!("no external score for row {id} (seed {seed})")))
            })
            .collect()
    }
}

struct PreparedDataset {
    spec: DatasetSpec,
    data: Result<Arc<Dataset>, String>,
}

struct CellOutput {
    records: Vec<ExperimentRecord>,
    audit: Option<AuditRecord>,
    curves: Vec<CurveRecord>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    cfg.validate()?;
    let seeds = cfg.seed_list();
    let mut externals = Vec::new();
    for method in &cfg.methods {
        externals.push(match method {
            MethodSpec::External { path, .. } => Some(ExternalScores::from_path(path).map_err(|e| e.to_string())),
            _ => None,
        });
    }
    let mut provenance_data = Vec::new();
    let prepared: Vec<PreparedDataset> = cfg
        .datasets
        .iter()
        .map(|spec| {
            let data = match load_prepared(&cfg.data_dir, spec) {
                Ok((data, provenance)) => {
                    provenance_data.push(provenance);
                    Ok(Arc::new(data))
                }
                Err(e) => {
                    log::error!("{}: {e}", spec.key());
                    Err(e.to_string())
                }
            };
            PreparedDataset {
                spec: spec.clone(),
                data,
            }
        })
        .collect();

    let cells: Vec<(usize, usize)> = (0..prepared.len())
        .flat_map(|d| (0..seeds.len()).map(move |s| (d, s)))
        .collect();
    let outputs: Vec<CellOutput> = cells
        .par_iter()
        .map(|&(d, s)| run_cell(cfg, &prepared[d], seeds[s], s == 0, &externals))
        .collect();

    let mut records = Vec::new();
    let mut audits = Vec::new();
    let mut curves = Vec::new();
    for out in outputs {
        records.extend(out.records);
        audits.extend(out.audit);
        curves.extend(out.curves);
    }
    Ok(ExperimentResults {
        config: cfg.clone(),
        provenance: Provenance {
            version: crate::VERSION.to_string(),
            config_hash: cfg.hash(),
            seeds,
            scaling: "min-max fitted once per dataset on all rows".into(),
            data: provenance_data,
        },
        records,
        audits,
        curves,
    })
}

/// Propensity scores for `test` under the configured target.
pub fn propensity_for(
    target: PropensityTarget,
    model: &dyn ProbabilisticClassifier,
    split: &SplitPair,
) -> Result<PropensityScores> {
    match target {
        PropensityTarget::Label => psm::propensity_scores(model, &split.test),
        PropensityTarget::ProtectedAttribute => {
            let pa_model = fit_logistic(&split.train.features_without_pa(), &split.train.pa, LogisticConfig::default())?;
            let scores = pa_model.predict_proba(&split.test.features_without_pa())?;
            PropensityScores::new(split.test.row_ids.clone(), scores, "logistic model of the protected attribute")
        }
    }
}

fn run_cell(
    cfg: &ExperimentConfig,
    prepared: &PreparedDataset,
    seed: u64,
    first_seed: bool,
    externals: &[Option<std::result::Result<ExternalScores, String>>],
) -> CellOutput {
    let key = prepared.spec.key();
    let method_names: Vec<String> = cfg.methods.iter().map(MethodSpec::name).collect();
    let fail_all = |fingerprint: Option<String>, e: &Error| CellOutput {
        records: method_names
            .iter()
            .map(|m| ExperimentRecord::failure(&key, m, seed, fingerprint.clone(), e))
            .collect(),
        audit: None,
        curves: Vec::new(),
    };
    let data = match &prepared.data {
        Ok(d) => d,
        Err(msg) => return fail_all(None, &Error::Input(msg.clone())),
    };
    let split = match dataio::split(data, cfg.train_fraction, seed) {
        Ok(s) => s,
        Err(e) => return fail_all(None, &e),
    };
    let fingerprint = split.fingerprint();
    let prep = || -> Result<(Model, Vec<f64>, PropensityScores, MatchResult)> {
        let model = Model::fit(cfg.learner, &split.train.features, &split.train.labels)?;
        let scores = model.predict_proba(&split.test.features)?;
        let propensity = propensity_for(cfg.propensity, &model, &split)?;
        let matching = psm::match_test_set(&propensity, &split.test.pa, Some(&split.test.features), &cfg.match_cfg)?;
        Ok((model, scores, propensity, matching))
    };
    let (model, scores, propensity, matching) = match prep() {
        Ok(v) => v,
        Err(e) => return fail_all(Some(fingerprint), &e),
    };
    let test = &split.test;
    let matched_ratio = psm::matched_ratio(&matching, test.len()).ok();
    let baseline_predictions = fairmatch::default_predict(&scores);

    let mut records = Vec::with_capacity(cfg.methods.len());
    for (method, external) in cfg.methods.iter().zip(externals) {
        let outcome = (|| -> Result<(Vec<u8>, Option<ThresholdPair>)> {
            match method {
                MethodSpec::Baseline => Ok((baseline_predictions.clone(), None)),
                MethodSpec::Fairmatch => {
                    let cert = fairmatch::fit_fairmatch(&model, test, Some(&propensity), &cfg.match_cfg, cfg.grid_step)?;
                    let ps = PropensityScores::new(test.row_ids.clone(), scores.clone(), model.describe())?;
                    let predictions = fairmatch::calibrated_predict(&ps, &test.pa, &cert.matching, &cert.thresholds)?;
                    Ok((predictions, Some(cert.thresholds)))
                }
                MethodSpec::External { .. } => {
                    let ext = external
                        .as_ref()
                        .expect("external method has scores")
                        .as_ref()
                        .map_err(|msg| Error::Input(msg.clone()))?;
                    Ok((fairmatch::default_predict(&ext.scores_for(&key, seed, test)?), None))
                }
            }
        })()
        .and_then(|(predictions, thresholds)| {
            let report = MetricReport::evaluate(&test.labels, &predictions, &test.pa)?;
            Ok((report, thresholds))
        });
        records.push(match outcome {
            Ok((report, thresholds)) => ExperimentRecord {
                dataset: key.clone(),
                method: method.name(),
                seed,
                split_fingerprint: Some(fingerprint.clone()),
                report: Some(report),
                gd: report.gd(),
                matched_ratio,
                thresholds,
                error: None,
            },
            Err(e) => {
                log::warn!("{key} {} seed {seed}: {e}", method.name());
                ExperimentRecord::failure(&key, &method.name(), seed, Some(fingerprint.clone()), &e)
            }
        });
    }

    let audit = if cfg.audit {
        match fairtest::subgroup_report_for_predictions(&baseline_predictions, test, matching.clone(), seed) {
            Ok(report) => Some(AuditRecord {
                dataset: key.clone(),
                seed,
                entries: report.entries,
            }),
            Err(e) => {
                log::warn!("{key} seed {seed}: subgroup report failed: {e}");
                None
            }
        }
    } else {
        None
    };

    let mut curves = Vec::new();
    if first_seed {
        let curve_seeds = cfg.seed_list();
        for &metric in &cfg.curve_metrics {
            match fairtest::fairness_curve_for_predictions(
                &baseline_predictions,
                test,
                &matching,
                metric,
                &fairtest::default_grid(),
                &curve_seeds,
            ) {
                Ok(curve) => curves.push(CurveRecord {
                    dataset: key.clone(),
                    seed,
                    curve,
                }),
                Err(e) => log::warn!("{key}: {} curve failed: {e}", metric.name()),
            }
        }
    }
    CellOutput { records, audit, curves }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRanking {
    pub dataset: String,
    pub metric: Metric,
    pub table: RankTable,
}

/// Scott-Knott ranking of the methods on one metric, per dataset.
pub fn rank_methods(results: &ExperimentResults, metric: Metric) -> Result<Vec<DatasetRanking>> {
    let mut out = Vec::new();
    for dataset in results.dataset_keys() {
        let mut groups = Vec::new();
        for method in results.config.methods.iter().map(MethodSpec::name) {
            let values: Vec<f64> = results
                .records_for(&dataset, &method)
                .filter_map(|r| r.report.and_then(|rep| rep.get(metric)))
                .collect();
            if values.len() < 2 {
                log::warn!("{dataset} {method}: {} values of {}, not ranked", values.len(), metric.name());
                continue;
            }
            groups.push((method, values));
        }
        if groups.is_empty() {
            return Err(Error::Input(format!(
                "{dataset}: no method has two defined {} values",
                metric.name()
            )));
        }
        out.push(DatasetRanking {
            dataset,
            metric,
            table: stats::scott_knott(&groups, metric.smaller_is_better())?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

pub fn file_stem(dataset: &str) -> String {
    dataset
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map(format_value).unwrap_or_default()
}

fn write_file(dir: &Path, name: &str, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Per-seed records of one dataset.
pub fn records_csv(results: &ExperimentResults, dataset: &str) -> String {
    let mut out = format!(
        "method,seed,split_fingerprint,{},gd,matched_ratio,theta_priv,theta_unpriv,p_value,error\n",
        MetricReport::csv_header().join(",")
    );
    for r in results.records.iter().filter(|r| r.dataset == dataset) {
        let cells = r.report.map(|rep| rep.csv_cells()).unwrap_or_else(|| vec![String::new(); 8]);
        let t = r.thresholds;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.seed,
            r.split_fingerprint.as_deref().unwrap_or(""),
            cells.join(","),
            cell(r.gd),
            cell(r.matched_ratio),
            cell(t.map(|t| t.theta_priv)),
            cell(t.map(|t| t.theta_unpriv)),
            cell(t.map(|t| t.p_value)),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        );
    }
    out
}

/// Subset metrics averaged over seeds, one row per subset.
pub fn subgroup_csv(results: &ExperimentResults, dataset: &str) -> String {
    let mut out = format!("subset,ratio,{}\n", MetricReport::csv_header().join(","));
    let audits: Vec<&AuditRecord> = results.audits.iter().filter(|a| a.dataset == dataset).collect();
    for subset in Subset::ALL {
        let entries: Vec<&SubsetEntry> = audits
            .iter()
            .flat_map(|a| a.entries.iter().filter(|e| e.subset == subset))
            .collect();
        let ratios: Vec<f64> = entries.iter().map(|e| e.ratio).collect();
        let mut row = vec![subset.name().to_string(), cell(fairtest::mean_std(&ratios).0)];
        for metric in Metric::ALL {
            let values: Vec<f64> = entries.iter().filter_map(|e| e.report.and_then(|r| r.get(metric))).collect();
            row.push(cell(fairtest::mean_std(&values).0));
        }
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// Mean and standard deviation of relative deltas across seeds.
pub fn deltas_csv(results: &ExperimentResults, dataset: &str) -> Result<String> {
    let reports: Vec<fairtest::SubgroupReport> = results
        .audits
        .iter()
        .filter(|a| a.dataset == dataset)
        .map(|a| fairtest::SubgroupReport {
            entries: a.entries.clone(),
            matching: MatchResult::empty(&[]),
        })
        .collect();
    Ok(fairtest::aggregate_deltas(&reports)?.to_csv())
}

/// Method comparison: mean, std and Scott-Knott rank per metric.
pub fn methods_csv(results: &ExperimentResults, dataset: &str) -> Result<String> {
    let mut out = String::from("metric,method,mean,std,rank\n");
    for metric in Metric::ALL {
        let ranking = rank_methods(results, metric).ok();
        let table = ranking
            .as_ref()
            .and_then(|r| r.iter().find(|d| d.dataset == dataset))
            .map(|d| &d.table);
        for method in results.config.methods.iter().map(MethodSpec::name) {
            let values: Vec<f64> = results
                .records_for(dataset, &method)
                .filter_map(|r| r.report.and_then(|rep| rep.get(metric)))
                .collect();
            let (mean, std) = fairtest::mean_std(&values);
            let rank = table.and_then(|t| t.rank_of(&method)).map(|r| r.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", metric.name(), method, cell(mean), cell(std), rank);
        }
    }
    Ok(out)
}

/// Writes the requested report formats into `out_dir` and returns the
/// paths written.
pub fn emit_reports(results: &ExperimentResults, formats: &[ReportFormat], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if formats.is_empty() {
        return Ok(written);
    }
    if results.records.is_empty() {
        return Err(Error::Input("no results to report".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for format in formats {
        match format {
            ReportFormat::Json => write_file(out_dir, "results.json", &results.to_json()?, &mut written)?,
            ReportFormat::Csv => {
                for dataset in results.dataset_keys() {
                    let stem = file_stem(&dataset);
                    write_file(out_dir, &format!("{stem}_records.csv"), &records_csv(results, &dataset), &mut written)?;
                    write_file(out_dir, &format!("{stem}_methods.csv"), &methods_csv(results, &dataset)?, &mut written)?;
                    if results.audits.iter().any(|a| a.dataset == dataset) {
                        write_file(out_dir, &format!("{stem}_subgroup.csv"), &subgroup_csv(results, &dataset), &mut written)?;
                        write_file(out_dir, &format!("{stem}_deltas.csv"), &deltas_csv(results, &dataset)?, &mut written)?;
                    }
                    for c in results.curves.iter().filter(|c| c.dataset == dataset) {
                        let name = format!("{stem}_curve_{}.csv", c.curve.metric.name());
                        write_file(out_dir, &name, &c.curve.to_csv(), &mut written)?;
                    }
                }
            }
            ReportFormat::Svg => {
                for c in &results.curves {
                    let name = format!("{}_curve_{}.svg", file_stem(&c.dataset), c.curve.metric.name());
                    let title = format!("{} {}", c.dataset, c.curve.metric.name());
                    write_file(out_dir, &name, &c.curve.to_svg(&title), &mut written)?;
                }
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(dataset: &str, method: &str, seed: u64, accuracy: f64) -> ExperimentRecord {
        let report = MetricReport {
            accuracy: Some(accuracy),
            precision: None,
            recall: None,
            f1: None,
            aod: None,
            eod: None,
            spd: Some(100.0 - accuracy),
            di: None,
        };
        ExperimentRecord {
            dataset: dataset.into(),
            method: method.into(),
            seed,
            split_fingerprint: Some("f".into()),
            report: Some(report),
            gd: report.gd(),
            matched_ratio: None,
            thresholds: None,
            error: None,
        }
    }

    fn results(records: Vec<ExperimentRecord>, methods: Vec<MethodSpec>) -> ExperimentResults {
        let config = ExperimentConfig {
            datasets: vec![DatasetSpec::new("toy", "sex")],
            methods,
            ..Default::default()
        };
        ExperimentResults {
            provenance: Provenance {
                version: crate::VERSION.into(),
                config_hash: config.hash(),
                seeds: vec![0, 1, 2],
                scaling: String::new(),
                data: vec![],
            },
            config,
            records,
            audits: vec![],
            curves: vec![],
        }
    }

    #[test]
    fn seeds_default_to_offsets_of_base() {
        let cfg = ExperimentConfig {
            base_seed: 40,
            repeats: 3,
            ..Default::default()
        };
        assert_eq!(cfg.seed_list(), [40, 41, 42]);
        let listed = ExperimentConfig {
            seeds: Some(vec![7, 9]),
            repeats: 3,
            datasets: vec![DatasetSpec::new("x", "y")],
            ..Default::default()
        };
        assert!(matches!(listed.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_data_dir() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            data_dir: "/elsewhere".into(),
            ..Default::default()
        };
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig {
            grid_step: 0.05,
            ..Default::default()
        };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn ranking_examples() {
        let methods = vec![MethodSpec::Baseline, MethodSpec::Fairmatch];
        let same: Vec<ExperimentRecord> = (0..3)
            .flat_map(|s| [record("toy:sex", "baseline", s, 80.0 + s as f64), record("toy:sex", "fairmatch", s, 80.0 + s as f64)])
            .collect();
        let r = rank_methods(&results(same, methods.clone()), Metric::Accuracy).unwrap();
        assert_eq!(r[0].table.rank_of("baseline"), r[0].table.rank_of("fairmatch"));

        let apart: Vec<ExperimentRecord> = (0..3)
            .flat_map(|s| [record("toy:sex", "baseline", s, 60.0 + s as f64), record("toy:sex", "fairmatch", s, 90.0 + s as f64)])
            .collect();
        let res = results(apart, methods);
        let acc = rank_methods(&res, Metric::Accuracy).unwrap();
        assert_eq!(acc[0].table.rank_of("fairmatch"), Some(1));
        assert_eq!(acc[0].table.rank_of("baseline"), Some(2));
        // spd = 100 - accuracy, and smaller is better
        let spd = rank_methods(&res, Metric::Spd).unwrap();
        assert_eq!(spd[0].table.rank_of("fairmatch"), Some(1));

        let single: Vec<ExperimentRecord> = (0..3).map(|s| record("toy:sex", "baseline", s, 70.0)).collect();
        let r = rank_methods(&results(single, vec![MethodSpec::Baseline]), Metric::Accuracy).unwrap();
        assert_eq!(r[0].table.rank_of("baseline"), Some(1));
    }

    #[test]
    fn reports_round_trip_and_empty_formats() {
        let recs: Vec<ExperimentRecord> = (0..3).map(|s| record("toy:sex", "baseline", s, 70.0)).collect();
        let res = results(recs, vec![MethodSpec::Baseline]);
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_reports(&res, &[], dir.path()).unwrap().is_empty());
        let files = emit_reports(&res, &[ReportFormat::Json, ReportFormat::Csv], dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let text = std::fs::read_to_string(dir.path().join("results.json")).unwrap();
        assert_eq!(ExperimentResults::from_json(&text).unwrap(), res);
        let csv = std::fs::read_to_string(dir.path().join("toy_sex_records.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn external_scores() {
        let ext = ExternalScores::from_csv("row_id,score,seed\n1,0.9,0\n2,0.1,0\n1,0.2,1\n").unwrap();
        let schema = crate::dataio::DatasetSchema::new("t", vec![], "pa", "1".into(), "y", "1".into());
        let mut ds = Dataset::new(crate::matrix::Matrix::zeros(2, 1), vec![1, 0], vec![1, 0], Arc::new(schema)).unwrap();
        ds.row_ids = vec![2, 1];
        assert_eq!(ext.scores_for("t", 0, &ds).unwrap(), [0.1, 0.9]);
        assert!(ext.scores_for("t", 1, &ds).is_err());
        assert!(ExternalScores::from_csv("id,score\n1,0.5\n").is_err());
        assert!(ExternalScores::from_csv("row_id,score\n1,1.5\n").is_err());
    }
}
