//! Loading, encoding, scaling and splitting of tabular fairness datasets.
//!
//! A dataset on disk is an RFC-4180 CSV with a header row (optionally
//! gzip-compressed, detected by a `.gz` extension). Its interpretation is
//! given by a [`SchemaFile`]: which columns are features, how categorical
//! columns are one-hot encoded, and which raw values count as privileged
//! and favorable. A schema file may list several protected attributes; a
//! concrete [`DatasetSchema`] is obtained with [`SchemaFile::resolve`].

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;
use std::sync::Arc;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Stream};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;
pub const MIN_SPLIT_ROWS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub name: String,
    pub kind: ColumnKind,
    /// Fixed one-hot vocabulary. When absent the sorted set of observed
    /// values is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

impl FeatureColumn {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numeric,
            categories: None,
        }
    }

    pub fn categorical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical,
            categories: None,
        }
    }
}

/// A literal cell value in a schema file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawValue {
    Number(f64),
    Text(String),
}

impl RawValue {
    fn matches(&self, cell: &str) -> bool {
        match self {
            RawValue::Text(text) => cell == text,
            RawValue::Number(n) => cell.parse::<f64>().map_or(false, |v| v == *n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    OneOf(Vec<RawValue>),
    Lt(f64),
    Le(f64),
    Gt(f64),
    Ge(f64),
}

/// Rule mapping a raw cell to the binary value 1 (privileged / favorable).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ValueRule {
    Condition(Condition),
    Exact(RawValue),
}

impl ValueRule {
    pub fn matches(&self, cell: &str) -> bool {
        let number = || cell.parse::<f64>().ok();
        match self {
            ValueRule::Exact(value) => value.matches(cell),
            ValueRule::Condition(Condition::OneOf(values)) => {
                values.iter().any(|v| v.matches(cell))
            }
            ValueRule::Condition(Condition::Lt(t)) => number().map_or(false, |v| v < *t),
            ValueRule::Condition(Condition::Le(t)) => number().map_or(false, |v| v <= *t),
            ValueRule::Condition(Condition::Gt(t)) => number().map_or(false, |v| v > *t),
            ValueRule::Condition(Condition::Ge(t)) => number().map_or(false, |v| v >= *t),
        }
    }
}

impl From<&str> for ValueRule {
    fn from(value: &str) -> Self {
        ValueRule::Exact(RawValue::Text(value.to_string()))
    }
}

impl From<f64> for ValueRule {
    fn from(value: f64) -> Self {
        ValueRule::Exact(RawValue::Number(value))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectedAttributeSpec {
    /// Name used on the command line, e.g. `sex`.
    pub name: String,
    /// CSV column the attribute is read from.
    pub column: String,
    pub privileged_value: ValueRule,
}

fn default_missing_markers() -> Vec<String> {
    ["", "?", "NA", "NaN"].iter().map(|s| s.to_string()).collect()
}

/// On-disk schema document, possibly listing several protected attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaFile {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_file: Option<String>,
    /// Empty means "every column other than the label and the protected
    /// attribute, read as numeric".
    #[serde(default)]
    pub feature_columns: Vec<FeatureColumn>,
    pub protected_attributes: Vec<ProtectedAttributeSpec>,
    pub label_column: String,
    pub favorable_value: ValueRule,
    #[serde(default = "default_missing_markers")]
    pub missing_markers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl SchemaFile {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn protected_attribute(&self, name: &str) -> Result<&ProtectedAttributeSpec> {
        self.protected_attributes
            .iter()
            .find(|pa| pa.name == name || pa.column == name)
            .ok_or_else(|| {
                let known: Vec<&str> =
                    self.protected_attributes.iter().map(|p| p.name.as_str()).collect();
                Error::Schema(format!(
                    "dataset `{}` has no protected attribute `{name}` (known: {})",
                    self.name,
                    known.join(", ")
                ))
            })
    }

    /// Concrete schema for one protected attribute. The attribute's column
    /// is removed from the feature list; when `include_protected` is set the
    /// binarized attribute is appended as the last feature instead.
    pub fn resolve(&self, protected: &str, include_protected: bool) -> Result<DatasetSchema> {
        let pa = self.protected_attribute(protected)?;
        let feature_columns = self
            .feature_columns
            .iter()
            .filter(|c| c.name != pa.column && c.name != self.label_column)
            .cloned()
            .collect();
        Ok(DatasetSchema {
            name: format!("{}:{}", self.name, pa.name),
            feature_columns,
            protected_attribute: pa.column.clone(),
            privileged_value: pa.privileged_value.clone(),
            label_column: self.label_column.clone(),
            favorable_value: self.favorable_value.clone(),
            include_protected,
            missing_markers: self.missing_markers.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub name: String,
    pub feature_columns: Vec<FeatureColumn>,
    pub protected_attribute: String,
    pub privileged_value: ValueRule,
    pub label_column: String,
    pub favorable_value: ValueRule,
    /// Append the binarized protected attribute as a model input.
    pub include_protected: bool,
    pub missing_markers: Vec<String>,
}

impl DatasetSchema {
    pub fn new(
        name: impl Into<String>,
        feature_columns: Vec<FeatureColumn>,
        protected_attribute: impl Into<String>,
        privileged_value: ValueRule,
        label_column: impl Into<String>,
        favorable_value: ValueRule,
    ) -> Self {
        Self {
            name: name.into(),
            feature_columns,
            protected_attribute: protected_attribute.into(),
            privileged_value,
            label_column: label_column.into(),
            favorable_value,
            include_protected: true,
            missing_markers: default_missing_markers(),
        }
    }

    fn validate(&self) -> Result<()> {
        for column in &self.feature_columns {
            if column.name == self.protected_attribute || column.name == self.label_column {
                return Err(Error::Schema(format!(
                    "column `{}` cannot be both a feature and the protected attribute or label",
                    column.name
                )));
            }
        }
        if self.protected_attribute == self.label_column {
            return Err(Error::Schema(
                "protected attribute and label must be different columns".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ScalingParams {
    pub fn fit(features: &Matrix) -> Self {
        let mut min = vec![f64::INFINITY; features.cols()];
        let mut max = vec![f64::NEG_INFINITY; features.cols()];
        for row in features.iter_rows() {
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Self { min, max }
    }

    /// Maps each column to `[0, 1]`. Constant columns become all zeros;
    /// values outside the fitted range (possible when the parameters were
    /// fitted on another subset) are clamped.
    pub fn apply(&self, features: &Matrix) -> Matrix {
        let mut out = features.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                let range = self.max[j] - self.min[j];
                *v = if range > 0.0 {
                    ((*v - self.min[j]) / range).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            }
        }
        out
    }
}

/// Encoded dataset. `labels[i] == 1` is the favorable outcome and
/// `pa[i] == 1` the privileged group.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<u8>,
    pub pa: Vec<u8>,
    pub row_ids: Vec<u64>,
    pub feature_names: Vec<String>,
    /// Column of `features` holding the binarized protected attribute.
    pub pa_feature: Option<usize>,
    pub scaling: Option<ScalingParams>,
    pub schema: Arc<DatasetSchema>,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<u8>,
        pa: Vec<u8>,
        schema: Arc<DatasetSchema>,
    ) -> Result<Self> {
        let n = features.rows();
        crate::error::ensure_len(n, labels.len())?;
        crate::error::ensure_len(n, pa.len())?;
        if labels.iter().chain(&pa).any(|&v| v > 1) {
            return Err(Error::Input("labels and protected attribute must be 0/1".into()));
        }
        let feature_names = (0..features.cols()).map(|j| format!("x{j}")).collect();
        Ok(Self {
            features,
            labels,
            pa,
            row_ids: (0..n as u64).collect(),
            feature_names,
            pa_feature: None,
            scaling: None,
            schema,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn group_counts(&self) -> (usize, usize) {
        let privileged = self.pa.iter().filter(|&&p| p == 1).count();
        (privileged, self.len() - privileged)
    }

    /// Subset by positions, preserving row ids.
    pub fn select(&self, positions: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(positions),
            labels: positions.iter().map(|&i| self.labels[i]).collect(),
            pa: positions.iter().map(|&i| self.pa[i]).collect(),
            row_ids: positions.iter().map(|&i| self.row_ids[i]).collect(),
            feature_names: self.feature_names.clone(),
            pa_feature: self.pa_feature,
            scaling: self.scaling.clone(),
            schema: Arc::clone(&self.schema),
        }
    }

    /// Positions of the given row ids in this dataset, in the order given.
    pub fn positions_of(&self, ids: &[u64]) -> Result<Vec<usize>> {
        let index: std::collections::HashMap<u64, usize> =
            self.row_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Input(format!("row id {id} not in dataset")))
            })
            .collect()
    }

    /// Features without the protected-attribute column, for fitting a
    /// propensity model that predicts the attribute itself.
    pub fn features_without_pa(&self) -> Matrix {
        match self.pa_feature {
            None => self.features.clone(),
            Some(skip) => {
                let rows: Vec<Vec<f64>> = self
                    .features
                    .iter_rows()
                    .map(|r| {
                        r.iter()
                            .enumerate()
                            .filter(|(j, _)| *j != skip)
                            .map(|(_, v)| *v)
                            .collect()
                    })
                    .collect();
                Matrix::from_rows(&rows)
                    .unwrap_or_else(|_| Matrix::zeros(self.len(), self.width().saturating_sub(1)))
            }
        }
    }

    fn check_binary_groups(&self) -> Result<()> {
        let positives = self.labels.iter().filter(|&&y| y == 1).count();
        if positives == 0 || positives == self.len() {
            return Err(Error::DegenerateDataset(format!(
                "label `{}` has a single value after encoding",
                self.schema.label_column
            )));
        }
        let (privileged, unprivileged) = self.group_counts();
        if privileged == 0 || unprivileged == 0 {
            return Err(Error::DegenerateDataset(format!(
                "protected attribute `{}` has a single value after encoding",
                self.schema.protected_attribute
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_dropped: usize,
}

fn open_csv(path: &Path) -> Result<csv::Reader<Box<dyn Read>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader: Box<dyn Read> = if path.extension().map_or(false, |e| e == "gz") {
        Box::new(GzDecoder::new(BufReader::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(reader))
}

/// Reads and encodes a CSV file. Features are one-hot encoded but not
/// scaled; see [`minmax_scale`]. Rows with a missing value in any used
/// column are dropped and counted in the report.
pub fn load_dataset(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<(Dataset, LoadReport)> {
    let path = path.as_ref();
    let mut reader = open_csv(path)?;
    let headers = reader.headers()?.clone();
    let records = reader
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    encode_records(&headers, &records, schema)
}

/// Same as [`load_dataset`] for CSV text already in memory.
pub fn load_dataset_from_str(text: &str, schema: &DatasetSchema) -> Result<(Dataset, LoadReport)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let records = reader
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    encode_records(&headers, &records, schema)
}

fn encode_records(
    headers: &csv::StringRecord,
    records: &[csv::StringRecord],
    schema: &DatasetSchema,
) -> Result<(Dataset, LoadReport)> {
    schema.validate()?;
    let column_index = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let label_col = column_index(&schema.label_column)?;
    let pa_col = column_index(&schema.protected_attribute)?;

    let mut feature_columns = schema.feature_columns.clone();
    if feature_columns.is_empty() {
        feature_columns = headers
            .iter()
            .map(str::trim)
            .filter(|h| *h != schema.label_column && *h != schema.protected_attribute)
            .map(FeatureColumn::numeric)
            .collect();
    }
    let feature_cols: Vec<usize> = feature_columns
        .iter()
        .map(|c| column_index(&c.name))
        .collect::<Result<_>>()?;

    let missing: HashSet<&str> = schema.missing_markers.iter().map(String::as_str).collect();
    let used: Vec<usize> = feature_cols
        .iter()
        .copied()
        .chain([label_col, pa_col])
        .collect();
    let kept: Vec<(usize, &csv::StringRecord)> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| {
            used.iter()
                .all(|&c| r.get(c).map_or(false, |v| !missing.contains(v.trim())))
        })
        .collect();
    let report = LoadReport {
        rows_read: records.len(),
        rows_dropped: records.len() - kept.len(),
    };
    if report.rows_dropped > 0 {
        log::info!(
            "{}: dropped {} of {} rows with missing values",
            schema.name,
            report.rows_dropped,
            report.rows_read
        );
    }

    // one-hot vocabularies
    let mut vocabularies: Vec<Option<Vec<String>>> = Vec::with_capacity(feature_columns.len());
    for (column, &c) in feature_columns.iter().zip(&feature_cols) {
        vocabularies.push(match column.kind {
            ColumnKind::Numeric => None,
            ColumnKind::Categorical => Some(match &column.categories {
                Some(fixed) => fixed.clone(),
                None => kept
                    .iter()
                    .map(|(_, r)| r[c].trim().to_string())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect(),
            }),
        });
    }

    let mut feature_names = Vec::new();
    for (column, vocabulary) in feature_columns.iter().zip(&vocabularies) {
        match vocabulary {
            None => feature_names.push(column.name.clone()),
            Some(values) => {
                feature_names.extend(values.iter().map(|v| format!("{}={v}", column.name)))
            }
        }
    }
    let pa_feature = schema.include_protected.then(|| {
        feature_names.push(format!("protected:{}", schema.protected_attribute));
        feature_names.len() - 1
    });

    let width = feature_names.len();
    let mut data = Vec::with_capacity(kept.len() * width);
    let mut labels = Vec::with_capacity(kept.len());
    let mut pa = Vec::with_capacity(kept.len());
    let mut row_ids = Vec::with_capacity(kept.len());
    for (row_id, record) in &kept {
        for ((column, vocabulary), &c) in feature_columns.iter().zip(&vocabularies).zip(&feature_cols) {
            let cell = record[c].trim();
            match vocabulary {
                None => {
                    let value: f64 = cell.parse().map_err(|_| {
                        Error::Input(format!(
                            "row {row_id}: column `{}` value `{cell}` is not numeric",
                            column.name
                        ))
                    })?;
                    if !value.is_finite() {
                        return Err(Error::Input(format!(
                            "row {row_id}: column `{}` is not finite",
                            column.name
                        )));
                    }
                    data.push(value);
                }
                Some(values) => {
                    let hit = values.iter().position(|v| v == cell).ok_or_else(|| {
                        Error::Schema(format!(
                            "row {row_id}: column `{}` has unknown category `{cell}`",
                            column.name
                        ))
                    })?;
                    data.extend((0..values.len()).map(|k| if k == hit { 1.0 } else { 0.0 }));
                }
            }
        }
        let privileged = u8::from(schema.privileged_value.matches(record[pa_col].trim()));
        if schema.include_protected {
            data.push(f64::from(privileged));
        }
        pa.push(privileged);
        labels.push(u8::from(schema.favorable_value.matches(record[label_col].trim())));
        row_ids.push(*row_id as u64);
    }

    let dataset = Dataset {
        features: Matrix::from_vec(kept.len(), width, data)?,
        labels,
        pa,
        row_ids,
        feature_names,
        pa_feature,
        scaling: None,
        schema: Arc::new(schema.clone()),
    };
    dataset.check_binary_groups()?;
    Ok((dataset, report))
}

/// Min-max scales every feature column to `[0, 1]`, fitting on `raw`.
pub fn minmax_scale(raw: &Dataset) -> Dataset {
    let params = ScalingParams::fit(&raw.features);
    let mut scaled = raw.clone();
    scaled.features = params.apply(&raw.features);
    scaled.scaling = Some(params);
    scaled
}

/// Loads and scales in one step (scaling fitted on the full dataset).
pub fn prepare(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<(Dataset, LoadReport)> {
    let (raw, report) = load_dataset(path, schema)?;
    Ok((minmax_scale(&raw), report))
}

#[derive(Debug, Clone)]
pub struct SplitPair {
    pub train: Dataset,
    pub test: Dataset,
    pub seed: u64,
    pub train_fraction: f64,
}

impl SplitPair {
    /// SHA-256 over the ordered train and test row ids.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for id in &self.train.row_ids {
            hasher.update(id.to_le_bytes());
        }
        hasher.update(b"|");
        for id in &self.test.row_ids {
            hasher.update(id.to_le_bytes());
        }
        hex(&hasher.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Train size for `n` rows: `floor(train_fraction * n)`. The small epsilon
/// absorbs representation error such as `0.7 * 10 = 6.9999…`.
pub fn train_size(n: usize, train_fraction: f64) -> usize {
    ((train_fraction * n as f64) + 1e-9).floor() as usize
}

/// Seeded shuffle followed by a prefix split.
pub fn split(data: &Dataset, train_fraction: f64, seed: u64) -> Result<SplitPair> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if data.len() < MIN_SPLIT_ROWS {
        return Err(Error::TooFewRows {
            needed: MIN_SPLIT_ROWS,
            got: data.len(),
        });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng::shuffle(&mut rng::rng_for(seed, Stream::Split), &mut order);
    let cut = train_size(data.len(), train_fraction);
    let pair = SplitPair {
        train: data.select(&order[..cut]),
        test: data.select(&order[cut..]),
        seed,
        train_fraction,
    };
    for (part, name) in [(&pair.train, "train"), (&pair.test, "test")] {
        let (privileged, unprivileged) = part.group_counts();
        if privileged == 0 || unprivileged == 0 {
            return Err(Error::DegenerateSplit(format!(
                "{name} set of seed {seed} lacks a protected group"
            )));
        }
    }
    Ok(pair)
}

/// Split of unscaled data with scaling fitted on the training part only.
pub fn split_strict(raw: &Dataset, train_fraction: f64, seed: u64) -> Result<SplitPair> {
    let mut pair = split(raw, train_fraction, seed)?;
    let params = ScalingParams::fit(&pair.train.features);
    pair.train.features = params.apply(&pair.train.features);
    pair.test.features = params.apply(&pair.test.features);
    pair.train.scaling = Some(params.clone());
    pair.test.scaling = Some(params);
    Ok(pair)
}
