//! Dataset ingestion, train-only preprocessing and stratified folds.

mod fetch;
mod folds;
mod preprocess;
pub mod synthetic;

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use fetch::write_atomic;
pub use fetch::{default_cache_dir, fetch_dataset, CACHE_ENV};
pub use folds::{make_folds, make_folds_over, FoldPlan};
pub use preprocess::{apply_preprocessor, fit_preprocessor, Features, PreprocessorState, Split, MIN_STD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Target,
}

/// One entry of the sidecar schema file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    /// Category labels for categorical and target columns. When absent the
    /// sorted distinct labels found in the file are used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

impl ColumnSchema {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numeric,
            categories: None,
        }
    }

    pub fn categorical(name: impl Into<String>, categories: Option<Vec<String>>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical,
            categories,
        }
    }

    pub fn target(name: impl Into<String>, classes: Option<Vec<String>>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Target,
            categories: classes,
        }
    }
}

pub fn validate_schema(schema: &[ColumnSchema]) -> Result<()> {
    let targets = schema.iter().filter(|c| c.kind == ColumnKind::Target).count();
    if targets != 1 {
        return Err(Error::Schema(format!(
            "expected exactly one target column, found {targets}"
        )));
    }
    if schema.len() < 2 {
        return Err(Error::Schema("no feature columns".into()));
    }
    let mut names = BTreeSet::new();
    for col in schema {
        if !names.insert(col.name.as_str()) {
            return Err(Error::Schema(format!("duplicate column {}", col.name)));
        }
        if let Some(cats) = &col.categories {
            if col.kind == ColumnKind::Numeric {
                return Err(Error::Schema(format!(
                    "numeric column {} lists categories",
                    col.name
                )));
            }
            let unique: BTreeSet<_> = cats.iter().collect();
            if unique.len() != cats.len() {
                return Err(Error::Schema(format!(
                    "duplicate category labels in {}",
                    col.name
                )));
            }
        }
    }
    Ok(())
}

pub fn read_schema(path: &Path) -> Result<Vec<ColumnSchema>> {
    let schema: Vec<ColumnSchema> = serde_json::from_slice(&std::fs::read(path)?)?;
    validate_schema(&schema)?;
    Ok(schema)
}

/// Column-typed tabular data.
///
/// Numeric missing values are `NaN`. Categorical cells hold `1 + position`
/// in the column's category list, with `0` reserved for missing.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub n_rows: usize,
    pub numeric_names: Vec<String>,
    pub categorical_names: Vec<String>,
    /// Row-major `n_rows × n_num`.
    pub numeric: Vec<f64>,
    /// Row-major `n_rows × n_cat`.
    pub categorical: Vec<usize>,
    pub category_labels: Vec<Vec<String>>,
    pub labels: Vec<usize>,
    pub class_labels: Vec<String>,
}

impl Dataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        numeric_names: Vec<String>,
        numeric: Vec<f64>,
        categorical_names: Vec<String>,
        categorical: Vec<usize>,
        category_labels: Vec<Vec<String>>,
        labels: Vec<usize>,
        class_labels: Vec<String>,
    ) -> Result<Self> {
        let n_rows = labels.len();
        let ds = Self {
            name: name.into(),
            n_rows,
            numeric_names,
            categorical_names,
            numeric,
            categorical,
            category_labels,
            labels,
            class_labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.numeric.len() != self.n_rows * self.n_num() {
            return Err(Error::shape("numeric matrix does not match row count"));
        }
        if self.categorical.len() != self.n_rows * self.n_cat() {
            return Err(Error::shape("categorical matrix does not match row count"));
        }
        if self.category_labels.len() != self.n_cat() {
            return Err(Error::Schema("category label lists do not match columns".into()));
        }
        if self.n_num() + self.n_cat() == 0 {
            return Err(Error::Schema("no feature columns".into()));
        }
        if self.n_classes() < 2 {
            return Err(Error::Schema("need at least two classes".into()));
        }
        for (i, &c) in self.categorical.iter().enumerate() {
            let card = self.category_labels[i % self.n_cat()].len();
            if c > card {
                return Err(Error::Bounds { index: c, len: card + 1 });
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.n_classes()) {
            return Err(Error::Bounds {
                index: bad,
                len: self.n_classes(),
            });
        }
        Ok(())
    }

    pub fn n_num(&self) -> usize {
        self.numeric_names.len()
    }

    pub fn n_cat(&self) -> usize {
        self.categorical_names.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn numeric_value(&self, row: usize, col: usize) -> f64 {
        self.numeric[row * self.n_num() + col]
    }

    pub fn categorical_value(&self, row: usize, col: usize) -> usize {
        self.categorical[row * self.n_cat() + col]
    }

    pub fn labels_of(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.labels[r]).collect()
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "?" | "NA" | "NaN" | "nan")
}

/// Parses a headed CSV according to `schema`. The dataset is named after
/// the file stem.
pub fn load_csv(path: &Path, schema: &[ColumnSchema]) -> Result<Dataset> {
    validate_schema(schema)?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let position: HashMap<&str, usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_str(), i))
        .collect();
    if header.len() != schema.len() || schema.iter().any(|c| !position.contains_key(c.name.as_str())) {
        return Err(Error::Schema(format!(
            "header {:?} does not match schema columns {:?}",
            header,
            schema.iter().map(|c| &c.name).collect::<Vec<_>>()
        )));
    }

    let mut rows: Vec<(u64, Vec<String>)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        rows.push((line, record.iter().map(|s| s.trim().to_string()).collect()));
    }

    let mut numeric_names = Vec::new();
    let mut categorical_names = Vec::new();
    let mut category_labels = Vec::new();
    let mut num_cols = Vec::new();
    let mut cat_cols = Vec::new();
    let mut target = None;
    for col in schema {
        let idx = position[col.name.as_str()];
        match col.kind {
            ColumnKind::Numeric => {
                numeric_names.push(col.name.clone());
                num_cols.push(idx);
            }
            ColumnKind::Categorical => {
                categorical_names.push(col.name.clone());
                cat_cols.push(idx);
                category_labels.push(resolve_categories(col, idx, &rows, true));
            }
            ColumnKind::Target => {
                target = Some((idx, resolve_categories(col, idx, &rows, false)));
            }
        }
    }
    let (target_idx, class_labels) = target.expect("validated schema has a target");

    let n = rows.len();
    let mut numeric = Vec::with_capacity(n * num_cols.len());
    let mut categorical = Vec::with_capacity(n * cat_cols.len());
    let mut labels = Vec::with_capacity(n);
    let cat_lookup: Vec<HashMap<&str, usize>> = category_labels
        .iter()
        .map(|cats| cats.iter().enumerate().map(|(i, c)| (c.as_str(), i + 1)).collect())
        .collect();
    let class_lookup: HashMap<&str, usize> = class_labels
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    for (line, fields) in &rows {
        for &c in &num_cols {
            let cell = &fields[c];
            let v = if is_missing(cell) {
                f64::NAN
            } else {
                cell.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: *line,
                    message: format!("column {}: {cell:?} is not a number", header[c]),
                })?
            };
            numeric.push(v);
        }
        for (j, &c) in cat_cols.iter().enumerate() {
            let cell = &fields[c];
            let v = if is_missing(cell) {
                0
            } else {
                *cat_lookup[j].get(cell.as_str()).ok_or_else(|| {
                    Error::Schema(format!(
                        "line {line}: unknown category {cell:?} in column {}",
                        header[c]
                    ))
                })?
            };
            categorical.push(v);
        }
        let cell = &fields[target_idx];
        let y = *class_lookup.get(cell.as_str()).ok_or_else(|| {
            Error::Schema(format!("line {line}: unknown target label {cell:?}"))
        })?;
        labels.push(y);
    }

    let name = path
        .file_stem()
        .map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(
        name,
        numeric_names,
        numeric,
        categorical_names,
        categorical,
        category_labels,
        labels,
        class_labels,
    )
}

fn resolve_categories(
    col: &ColumnSchema,
    idx: usize,
    rows: &[(u64, Vec<String>)],
    skip_missing: bool,
) -> Vec<String> {
    if let Some(cats) = &col.categories {
        return cats.clone();
    }
    rows.iter()
        .map(|(_, f)| f[idx].as_str())
        .filter(|c| !(skip_missing && is_missing(c)))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(str::to_string)
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}
