//! Dataset ingestion, encoding, scaling, splitting and mask application.
//!
//! A [`Dataset`] is the fully observed matrix `Z` (rows are observations,
//! one column is the response). A [`PartialDataset`] is the same matrix
//! after a [`MaskMatrix`] has hidden some entries; hidden cells are stored
//! as `NaN` and never appear in a complete `Dataset`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INTERCEPT_NAME: &str = "intercept";

/// Kind of a column after encoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureKind {
    Continuous,
    Binary,
    /// Only appears in a [`DatasetSchema`]; encoded datasets hold the
    /// indicator columns as `Binary`.
    Categorical { levels: Vec<String> },
    Intercept,
}

/// Column layout shared by complete and partial datasets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub column_names: Vec<String>,
    pub response_index: usize,
    pub feature_kinds: Vec<FeatureKind>,
    pub intercept_index: Option<usize>,
}

impl ColumnSchema {
    pub fn n_cols(&self) -> usize {
        self.column_names.len()
    }

    pub fn intercept_added(&self) -> bool {
        self.intercept_index.is_some()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.column_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Schema(format!("unknown column `{name}`")))
    }

    /// Column indices of the regression design, i.e. every column except the
    /// response, in storage order.
    pub fn feature_columns(&self) -> Vec<usize> {
        (0..self.n_cols())
            .filter(|&j| j != self.response_index)
            .collect()
    }

    /// Position of data column `col` inside the design vector.
    pub fn design_position(&self, col: usize) -> Result<usize> {
        if col == self.response_index || col >= self.n_cols() {
            return Err(Error::InvalidArgument(format!(
                "column {col} is not a feature column"
            )));
        }
        Ok(if col > self.response_index { col - 1 } else { col })
    }

    /// Columns excluded from standardization by default: response,
    /// intercept and binary indicators.
    pub fn default_scaling_exclusions(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        out.insert(self.response_index);
        for (j, kind) in self.feature_kinds.iter().enumerate() {
            if matches!(kind, FeatureKind::Binary | FeatureKind::Intercept) {
                out.insert(j);
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let d = self.n_cols();
        if self.feature_kinds.len() != d {
            return Err(Error::Schema(format!(
                "{} column names but {} kinds",
                d,
                self.feature_kinds.len()
            )));
        }
        if self.response_index >= d {
            return Err(Error::Schema(format!(
                "response index {} out of range for {d} columns",
                self.response_index
            )));
        }
        if let Some(ic) = self.intercept_index {
            if ic >= d || ic == self.response_index {
                return Err(Error::Schema("invalid intercept index".into()));
            }
        }
        Ok(())
    }
}

/// Fully observed data matrix `Z` with its column schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: DMatrix<f64>,
    schema: ColumnSchema,
}

impl Dataset {
    pub fn new(values: DMatrix<f64>, schema: ColumnSchema) -> Result<Self> {
        schema.validate()?;
        if values.ncols() != schema.n_cols() {
            return Err(Error::Dimension(format!(
                "matrix has {} columns, schema has {}",
                values.ncols(),
                schema.n_cols()
            )));
        }
        if let Some((i, j)) = first_non_finite(&values) {
            return Err(Error::NonFinite(format!(
                "dataset cell ({i}, `{}`)",
                schema.column_names[j]
            )));
        }
        if let Some(ic) = schema.intercept_index {
            if values.column(ic).iter().any(|&v| v != 1.0) {
                return Err(Error::Schema("intercept column is not all ones".into()));
            }
        }
        Ok(Self { values, schema })
    }

    /// Build a dataset from numeric columns. A column named `intercept` is
    /// tagged as the intercept; every other column is continuous.
    pub fn from_columns(names: &[&str], values: DMatrix<f64>, response: &str) -> Result<Self> {
        let column_names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        let response_index = column_names
            .iter()
            .position(|c| c == response)
            .ok_or_else(|| Error::Schema(format!("unknown response `{response}`")))?;
        let intercept_index = column_names
            .iter()
            .position(|c| c == INTERCEPT_NAME)
            .filter(|&j| j != response_index);
        let feature_kinds = (0..column_names.len())
            .map(|j| {
                if Some(j) == intercept_index {
                    FeatureKind::Intercept
                } else {
                    FeatureKind::Continuous
                }
            })
            .collect();
        Self::new(
            values,
            ColumnSchema {
                column_names,
                response_index,
                feature_kinds,
                intercept_index,
            },
        )
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn schema(&self) -> &ColumnSchema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn response_index(&self) -> usize {
        self.schema.response_index
    }

    pub fn column_names(&self) -> &[String] {
        &self.schema.column_names
    }

    pub fn response(&self) -> Vec<f64> {
        self.values.column(self.schema.response_index).iter().copied().collect()
    }

    /// The regression design `X` (all columns except the response).
    pub fn design(&self) -> DMatrix<f64> {
        self.values.select_columns(&self.schema.feature_columns())
    }

    /// Returns a copy with an all-ones intercept column in front. A no-op if
    /// one is already present.
    pub fn with_intercept(&self) -> Dataset {
        if self.schema.intercept_added() {
            return self.clone();
        }
        let n = self.n_rows();
        let values = self.values.clone().insert_column(0, 1.0);
        debug_assert_eq!(values.nrows(), n);
        let mut column_names = vec![INTERCEPT_NAME.to_string()];
        column_names.extend(self.schema.column_names.iter().cloned());
        let mut feature_kinds = vec![FeatureKind::Intercept];
        feature_kinds.extend(self.schema.feature_kinds.iter().cloned());
        Dataset {
            values,
            schema: ColumnSchema {
                column_names,
                response_index: self.schema.response_index + 1,
                feature_kinds,
                intercept_index: Some(0),
            },
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            values: self.values.select_rows(rows),
            schema: self.schema.clone(),
        }
    }

    /// Same schema, replaced values. Used by remediation, which only ever
    /// fills NA cells.
    pub(crate) fn with_values(&self, values: DMatrix<f64>) -> Result<Dataset> {
        Dataset::new(values, self.schema.clone())
    }
}

fn first_non_finite(m: &DMatrix<f64>) -> Option<(usize, usize)> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Some((i, j));
            }
        }
    }
    None
}

/// Partially observed matrix `Z̄`. NA cells are stored as `NaN`.
#[derive(Debug, Clone)]
pub struct PartialDataset {
    values: DMatrix<f64>,
    schema: ColumnSchema,
}

impl PartialDataset {
    pub fn new(values: DMatrix<f64>, schema: ColumnSchema) -> Result<Self> {
        schema.validate()?;
        if values.ncols() != schema.n_cols() {
            return Err(Error::Dimension(format!(
                "matrix has {} columns, schema has {}",
                values.ncols(),
                schema.n_cols()
            )));
        }
        let r = schema.response_index;
        if let Some(i) = (0..values.nrows()).find(|&i| values[(i, r)].is_nan()) {
            return Err(Error::Schema(format!(
                "NA in response column `{}` at row {i}",
                schema.column_names[r]
            )));
        }
        if values.iter().any(|v| v.is_infinite()) {
            return Err(Error::NonFinite("partial dataset".into()));
        }
        Ok(Self { values, schema })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn schema(&self) -> &ColumnSchema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_na(&self, i: usize, j: usize) -> bool {
        self.values[(i, j)].is_nan()
    }

    pub fn na_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }

    /// Fraction of NA cells per column.
    pub fn missing_rates(&self) -> Vec<f64> {
        let n = self.n_rows().max(1) as f64;
        (0..self.n_cols())
            .map(|j| self.values.column(j).iter().filter(|v| v.is_nan()).count() as f64 / n)
            .collect()
    }

    /// Rows with no NA cell.
    pub fn complete_rows(&self) -> Vec<usize> {
        (0..self.n_rows())
            .filter(|&i| self.values.row(i).iter().all(|v| !v.is_nan()))
            .collect()
    }

    /// Interpret as a complete dataset; fails if any cell is NA.
    pub fn to_complete(&self) -> Result<Dataset> {
        Dataset::new(self.values.clone(), self.schema.clone())
    }
}

impl From<&Dataset> for PartialDataset {
    fn from(d: &Dataset) -> Self {
        PartialDataset {
            values: d.values.clone(),
            schema: d.schema.clone(),
        }
    }
}

/// Binary observation mask `R`; 1 = observed, 0 = hidden.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    bits: DMatrix<u8>,
}

impl MaskMatrix {
    pub fn new(bits: DMatrix<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    pub fn all_observed(n: usize, d: usize) -> Self {
        Self {
            bits: DMatrix::from_element(n, d, 1),
        }
    }

    pub fn bits(&self) -> &DMatrix<u8> {
        &self.bits
    }

    pub fn shape(&self) -> (usize, usize) {
        self.bits.shape()
    }

    pub fn zero_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 0).count()
    }

    /// Checks that every zero lies inside `masked_set` and that the response
    /// column is fully observed.
    pub fn check_support(&self, masked_set: &[usize], response_index: usize) -> Result<()> {
        for j in 0..self.bits.ncols() {
            if masked_set.contains(&j) && j != response_index {
                continue;
            }
            if let Some(i) = (0..self.bits.nrows()).find(|&i| self.bits[(i, j)] == 0) {
                return Err(Error::InvalidArgument(format!(
                    "mask hides cell ({i}, {j}) outside the masked set"
                )));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path, column_names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(column_names)?;
        for i in 0..self.bits.nrows() {
            w.write_record(self.bits.row(i).iter().map(|b| b.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let d = r.headers()?.len();
        let mut data = Vec::new();
        let mut n = 0;
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            for (j, cell) in rec.iter().enumerate() {
                let b = match cell.trim() {
                    "0" => 0u8,
                    "1" => 1u8,
                    other => {
                        return Err(Error::Parse {
                            row,
                            column: j.to_string(),
                            message: format!("mask cell `{other}` is not 0/1"),
                        })
                    }
                };
                data.push(b);
            }
            n += 1;
        }
        Ok(Self {
            bits: DMatrix::from_row_slice(n, d, &data),
        })
    }
}

/// Column-kind declaration for CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub columns: Vec<ColumnSpec>,
    pub response: String,
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default = "default_true")]
    pub add_intercept: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

impl DatasetSchema {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(toml::from_str(&text)?)
    }
}

/// Reads a CSV with a header row, one-hot encodes categorical columns
/// (reference level dropped, indicators appended at the end) and optionally
/// prepends an intercept.
pub fn load_csv(path: &Path, schema: &DatasetSchema) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::Empty(format!("{} has no header", path.display())));
    }
    let declared: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
    if header.iter().map(String::as_str).ne(declared.iter().copied()) {
        return Err(Error::Schema(format!(
            "header {:?} does not match schema columns {:?}",
            header, declared
        )));
    }
    if !declared.contains(&schema.response.as_str()) {
        return Err(Error::Schema(format!("response `{}` not in schema", schema.response)));
    }

    let mut numeric_names = Vec::new();
    let mut numeric_kinds = Vec::new();
    let mut indicator_names = Vec::new();
    for spec in &schema.columns {
        match &spec.kind {
            FeatureKind::Categorical { levels } => {
                if levels.is_empty() {
                    return Err(Error::Schema(format!(
                        "categorical column `{}` declares no levels",
                        spec.name
                    )));
                }
                if spec.name == schema.response {
                    return Err(Error::Schema("categorical response is not supported".into()));
                }
                for level in &levels[1..] {
                    indicator_names.push(format!("{}_{}", spec.name, level));
                }
            }
            FeatureKind::Intercept => {
                return Err(Error::Schema(format!(
                    "column `{}`: intercept kind is added automatically",
                    spec.name
                )))
            }
            kind => {
                numeric_names.push(spec.name.clone());
                numeric_kinds.push(kind.clone());
            }
        }
    }

    let width = numeric_names.len() + indicator_names.len();
    let mut cells: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != schema.columns.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", schema.columns.len(), rec.len()),
            });
        }
        let mut numeric = Vec::with_capacity(width);
        let mut indicators = Vec::new();
        for (spec, raw) in schema.columns.iter().zip(rec.iter()) {
            let cell = raw.trim();
            let parse_err = |message: String| Error::Parse {
                row,
                column: spec.name.clone(),
                message,
            };
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan") {
                return Err(parse_err("missing value; input data must be complete".into()));
            }
            match &spec.kind {
                FeatureKind::Categorical { levels } => {
                    let pos = levels
                        .iter()
                        .position(|l| l == cell)
                        .ok_or_else(|| parse_err(format!("unknown categorical level `{cell}`")))?;
                    indicators.extend((1..levels.len()).map(|k| if k == pos { 1.0 } else { 0.0 }));
                }
                kind => {
                    let v: f64 = cell
                        .parse()
                        .map_err(|_| parse_err(format!("`{cell}` is not a number")))?;
                    if !v.is_finite() {
                        return Err(parse_err(format!("`{cell}` is not finite")));
                    }
                    if *kind == FeatureKind::Binary && v != 0.0 && v != 1.0 {
                        return Err(parse_err(format!("binary column holds `{cell}`")));
                    }
                    numeric.push(v);
                }
            }
        }
        cells.extend(numeric);
        cells.extend(indicators);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty(format!("{} has no data rows", path.display())));
    }

    let mut column_names = numeric_names;
    let mut feature_kinds = numeric_kinds;
    feature_kinds.extend(std::iter::repeat_n(FeatureKind::Binary, indicator_names.len()));
    column_names.extend(indicator_names);
    let response_index = column_names
        .iter()
        .position(|c| *c == schema.response)
        .expect("response checked above");
    let ds = Dataset::new(
        DMatrix::from_row_slice(n, width, &cells),
        ColumnSchema {
            column_names,
            response_index,
            feature_kinds,
            intercept_index: None,
        },
    )?;
    Ok(if schema.add_intercept {
        ds.with_intercept()
    } else {
        ds
    })
}

/// Random row partition into (train, audit). The train part has
/// `round(train_fraction * N)` rows; both parts keep the original row order.
pub fn split(d: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} outside (0, 1]"
        )));
    }
    let n = d.n_rows();
    if n < 2 {
        return Err(Error::InvalidArgument("split needs at least 2 rows".into()));
    }
    let n_train = (train_fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = idx[..n_train].to_vec();
    let mut audit = idx[n_train..].to_vec();
    train.sort_unstable();
    audit.sort_unstable();
    Ok((d.select_rows(&train), d.select_rows(&audit)))
}

/// Per-column standardization parameters. Excluded columns carry mean 0 and
/// scale 1 so that applying them is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub means: Vec<f64>,
    pub std_devs: Vec<f64>,
    pub excluded_columns: BTreeSet<usize>,
}

impl ScalerParams {
    /// Fits population (1/N) mean and standard deviation on every column not
    /// in `exclude`.
    pub fn fit(d: &Dataset, exclude: &BTreeSet<usize>) -> Result<Self> {
        let schema = d.schema();
        if !exclude.contains(&schema.response_index) {
            return Err(Error::InvalidArgument(
                "scaling exclusions must contain the response column".into(),
            ));
        }
        if let Some(ic) = schema.intercept_index {
            if !exclude.contains(&ic) {
                return Err(Error::InvalidArgument(
                    "scaling exclusions must contain the intercept column".into(),
                ));
            }
        }
        let n = d.n_rows() as f64;
        let mut means = vec![0.0; d.n_cols()];
        let mut std_devs = vec![1.0; d.n_cols()];
        for j in 0..d.n_cols() {
            if exclude.contains(&j) {
                continue;
            }
            let col = d.values().column(j);
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            if !(sd > 1e-12 * (1.0 + mean.abs())) {
                return Err(Error::ZeroVariance(schema.column_names[j].clone()));
            }
            means[j] = mean;
            std_devs[j] = sd;
        }
        Ok(Self {
            means,
            std_devs,
            excluded_columns: exclude.clone(),
        })
    }

    fn check_width(&self, d: usize) -> Result<()> {
        if self.means.len() != d {
            return Err(Error::Dimension(format!(
                "scaler fitted on {} columns, data has {d}",
                self.means.len()
            )));
        }
        Ok(())
    }

    pub fn transform_matrix(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_width(m.ncols())?;
        let mut out = m.clone();
        for j in 0..m.ncols() {
            if self.excluded_columns.contains(&j) {
                continue;
            }
            let (mu, sd) = (self.means[j], self.std_devs[j]);
            out.column_mut(j).apply(|v| *v = (*v - mu) / sd);
        }
        Ok(out)
    }

    pub fn inverse_matrix(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_width(m.ncols())?;
        let mut out = m.clone();
        for j in 0..m.ncols() {
            if self.excluded_columns.contains(&j) {
                continue;
            }
            let (mu, sd) = (self.means[j], self.std_devs[j]);
            out.column_mut(j).apply(|v| *v = *v * sd + mu);
        }
        Ok(out)
    }

    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        d.with_values(self.transform_matrix(d.values())?)
    }
}

/// Standardizes every column outside `exclude` to mean 0 and population
/// standard deviation 1.
pub fn standardize(d: &Dataset, exclude: &BTreeSet<usize>) -> Result<(Dataset, ScalerParams)> {
    let params = ScalerParams::fit(d, exclude)?;
    Ok((params.apply(d)?, params))
}

/// Hides every cell whose mask bit is 0.
pub fn apply_mask(d: &Dataset, m: &MaskMatrix) -> Result<PartialDataset> {
    if m.shape() != d.values().shape() {
        return Err(Error::Dimension(format!(
            "mask shape {:?} vs data shape {:?}",
            m.shape(),
            d.values().shape()
        )));
    }
    let mut values = d.values().clone();
    for (v, &b) in values.iter_mut().zip(m.bits().iter()) {
        if b == 0 {
            *v = f64::NAN;
        }
    }
    PartialDataset::new(values, d.schema().clone())
}

fn schema_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".schema.json");
    PathBuf::from(s)
}

/// Writes the partial dataset as CSV (empty cell = NA) plus a
/// `<path>.schema.json` sidecar holding the column schema.
pub fn serialize_partial(p: &PartialDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&p.schema().column_names)?;
    for i in 0..p.n_rows() {
        w.write_record(p.values().row(i).iter().map(|v| {
            if v.is_nan() {
                String::new()
            } else {
                // shortest representation that parses back to the same bits
                format!("{v:?}")
            }
        }))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let sidecar = schema_sidecar(path);
    let json = serde_json::to_string_pretty(p.schema())?;
    fs::write(&sidecar, json).map_err(|e| Error::io(sidecar, e))?;
    Ok(())
}

pub fn deserialize_partial(path: &Path) -> Result<PartialDataset> {
    let sidecar = schema_sidecar(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let schema: ColumnSchema = serde_json::from_str(&text)?;
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != schema.column_names {
        return Err(Error::Schema(format!(
            "header {:?} does not match sidecar schema",
            header
        )));
    }
    let d = header.len();
    let mut cells = Vec::new();
    let mut n = 0;
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        for (j, cell) in rec.iter().enumerate() {
            let v = if cell.trim().is_empty() {
                f64::NAN
            } else {
                cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                    row,
                    column: header[j].clone(),
                    message: format!("`{cell}` is not a number"),
                })?
            };
            cells.push(v);
        }
        n += 1;
    }
    PartialDataset::new(DMatrix::from_row_slice(n, d, &cells), schema)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn numeric_schema(names: &[&str], response: &str) -> DatasetSchema {
        DatasetSchema {
            columns: names
                .iter()
                .map(|n| ColumnSpec {
                    name: n.to_string(),
                    kind: FeatureKind::Continuous,
                })
                .collect(),
            response: response.into(),
            target: None,
            add_intercept: false,
        }
    }

    #[test]
    fn categorical_column_expands_to_indicators() {
        let f = write_tmp("a,c,y\n1.0,red,0\n2.0,green,1\n3.0,blue,1\n");
        let schema = DatasetSchema {
            columns: vec![
                ColumnSpec {
                    name: "a".into(),
                    kind: FeatureKind::Continuous,
                },
                ColumnSpec {
                    name: "c".into(),
                    kind: FeatureKind::Categorical {
                        levels: vec!["red".into(), "green".into(), "blue".into()],
                    },
                },
                ColumnSpec {
                    name: "y".into(),
                    kind: FeatureKind::Binary,
                },
            ],
            response: "y".into(),
            target: None,
            add_intercept: false,
        };
        let ds = load_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.column_names(), &["a", "y", "c_green", "c_blue"]);
        assert_eq!(ds.response_index(), 1);
        let expected = DMatrix::from_row_slice(
            3,
            4,
            &[1.0, 0.0, 0.0, 0.0, 2.0, 1.0, 1.0, 0.0, 3.0, 1.0, 0.0, 1.0],
        );
        assert_eq!(ds.values(), &expected);
        assert_eq!(ds.schema().feature_kinds[2], FeatureKind::Binary);
    }

    #[test]
    fn numeric_csv_is_parsed_verbatim() {
        let f = write_tmp("x1,x2,y\n1.5,-2,3\n0.25,4e1,5\n");
        let ds = load_csv(f.path(), &numeric_schema(&["x1", "x2", "y"], "y")).unwrap();
        assert_eq!(
            ds.values(),
            &DMatrix::from_row_slice(2, 3, &[1.5, -2.0, 3.0, 0.25, 40.0, 5.0])
        );
    }

    #[test]
    fn na_token_is_rejected() {
        let f = write_tmp("x,y\n1,2\nNA,3\n");
        let err = load_csv(f.path(), &numeric_schema(&["x", "y"], "y")).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 1);
                assert_eq!(column, "x");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_level_and_bad_number_and_empty_file() {
        let f = write_tmp("c,y\npurple,1\n");
        let schema = DatasetSchema {
            columns: vec![
                ColumnSpec {
                    name: "c".into(),
                    kind: FeatureKind::Categorical {
                        levels: vec!["red".into(), "blue".into()],
                    },
                },
                ColumnSpec {
                    name: "y".into(),
                    kind: FeatureKind::Continuous,
                },
            ],
            response: "y".into(),
            target: None,
            add_intercept: false,
        };
        assert!(matches!(load_csv(f.path(), &schema), Err(Error::Parse { .. })));

        let f = write_tmp("x,y\nabc,1\n");
        assert!(matches!(
            load_csv(f.path(), &numeric_schema(&["x", "y"], "y")),
            Err(Error::Parse { .. })
        ));

        let f = write_tmp("");
        assert!(load_csv(f.path(), &numeric_schema(&["x", "y"], "y")).is_err());
        let f = write_tmp("x,y\n");
        assert!(matches!(
            load_csv(f.path(), &numeric_schema(&["x", "y"], "y")),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn intercept_is_prepended() {
        let f = write_tmp("x,y\n1,2\n3,4\n");
        let mut schema = numeric_schema(&["x", "y"], "y");
        schema.add_intercept = true;
        let ds = load_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.column_names(), &["intercept", "x", "y"]);
        assert_eq!(ds.response_index(), 2);
        assert_eq!(ds.schema().intercept_index, Some(0));
        assert!(ds.values().column(0).iter().all(|&v| v == 1.0));
    }

    fn ramp(n: usize, d: usize) -> Dataset {
        let m = DMatrix::from_fn(n, d, |i, j| (i * d + j) as f64 * 0.5 + (j as f64).sin());
        let names: Vec<String> = (0..d).map(|j| format!("c{j}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        Dataset::from_columns(&refs, m, "c0").unwrap()
    }

    #[test]
    fn split_is_deterministic_and_sized() {
        let ds = ramp(10, 3);
        let (a, b) = split(&ds, 0.8, 7).unwrap();
        assert_eq!((a.n_rows(), b.n_rows()), (8, 2));
        let (a2, b2) = split(&ds, 0.8, 7).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);

        let (all, none) = split(&ds, 1.0, 3).unwrap();
        assert_eq!(all.n_rows(), 10);
        assert_eq!(none.n_rows(), 0);

        assert!(split(&ds, 0.0, 1).is_err());
        assert!(split(&ds, 1.5, 1).is_err());
    }

    #[test]
    fn split_of_housing_sized_table() {
        let ds = ramp(20640, 2);
        let (train, audit) = split(&ds, 0.8, 0).unwrap();
        assert_eq!(train.n_rows(), 16512);
        assert_eq!(audit.n_rows(), 4128);
    }

    #[test]
    fn standardize_uses_population_sd() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 10.0, 2.0, 20.0, 3.0, 30.0]);
        let ds = Dataset::from_columns(&["x", "y"], m, "y").unwrap();
        let (scaled, params) = standardize(&ds, &BTreeSet::from([1])).unwrap();
        let s = 1.224744871391589;
        let col: Vec<f64> = scaled.values().column(0).iter().copied().collect();
        for (got, want) in col.iter().zip([-s, 0.0, s]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(scaled.values().column(1), ds.values().column(1));
        let back = params.inverse_matrix(scaled.values()).unwrap();
        assert!((back - ds.values()).amax() < 1e-12);

        // fixed parameters applied to already-scaled data leave it unchanged
        let (_, p2) = standardize(&scaled, &BTreeSet::from([1])).unwrap();
        let again = p2.apply(&scaled).unwrap();
        assert!((again.values() - scaled.values()).amax() < 1e-10);
    }

    #[test]
    fn standardize_rejects_constant_column_and_missing_response_exclusion() {
        let m = DMatrix::from_row_slice(3, 2, &[5.0, 1.0, 5.0, 2.0, 5.0, 3.0]);
        let ds = Dataset::from_columns(&["k", "y"], m, "y").unwrap();
        match standardize(&ds, &BTreeSet::from([1])) {
            Err(Error::ZeroVariance(name)) => assert_eq!(name, "k"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(standardize(&ds, &BTreeSet::new()).is_err());
    }

    #[test]
    fn mask_application() {
        let ds = ramp(4, 3);
        let p = apply_mask(&ds, &MaskMatrix::all_observed(4, 3)).unwrap();
        assert_eq!(p.values(), ds.values());

        let mut bits = DMatrix::from_element(4, 3, 1u8);
        bits[(0, 2)] = 0;
        let p = apply_mask(&ds, &MaskMatrix::new(bits).unwrap()).unwrap();
        assert_eq!(p.na_count(), 1);
        assert!(p.is_na(0, 2));

        assert!(apply_mask(&ds, &MaskMatrix::all_observed(3, 3)).is_err());
        // response is column 0 here
        let mut bits = DMatrix::from_element(4, 3, 1u8);
        bits[(1, 0)] = 0;
        assert!(apply_mask(&ds, &MaskMatrix::new(bits).unwrap()).is_err());
    }

    #[test]
    fn partial_round_trip() {
        let ds = ramp(5, 3);
        let mut bits = DMatrix::from_element(5, 3, 1u8);
        bits[(1, 1)] = 0;
        bits[(4, 2)] = 0;
        let p = apply_mask(&ds, &MaskMatrix::new(bits).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        serialize_partial(&p, &path).unwrap();
        let q = deserialize_partial(&path).unwrap();
        assert_eq!(q.schema(), p.schema());
        for (a, b) in p.values().iter().zip(q.values().iter()) {
            assert!(a.is_nan() && b.is_nan() || a.to_bits() == b.to_bits());
        }

        let full = PartialDataset::from(&ds);
        serialize_partial(&full, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.lines().skip(1).any(|l| l.split(',').any(str::is_empty)));
    }

    #[test]
    fn response_na_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let ds = ramp(3, 2);
        serialize_partial(&PartialDataset::from(&ds), &path).unwrap();
        // blank out the response (column 0) of the second data row
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let rest = lines[2].split_once(',').unwrap().1.to_string();
        lines[2] = format!(",{rest}");
        std::fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(deserialize_partial(&path), Err(Error::Schema(_))));
    }

    #[test]
    fn mask_csv_round_trip_and_support() {
        let mut bits = DMatrix::from_element(3, 3, 1u8);
        bits[(2, 1)] = 0;
        let m = MaskMatrix::new(bits).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        m.write_csv(&path, &["a".into(), "b".into(), "c".into()]).unwrap();
        assert_eq!(MaskMatrix::read_csv(&path).unwrap(), m);
        assert!(m.check_support(&[1], 2).is_ok());
        assert!(m.check_support(&[0], 2).is_err());
    }
}
