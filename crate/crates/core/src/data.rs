//! Data ingestion, preprocessing, splitting, and synthetic generation.
//!
//! Raw CSV tables are cleaned (constant/duplicate columns dropped, rows with
//! missing cells dropped), continuous columns z-scored, categorical columns
//! one-hot encoded, and labels mapped to `0..C`. Per-feature valid bounds are
//! recorded so downstream attack and defense modules can clip perturbations
//! to the observed feature box.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SageError};
use crate::mat::Mat;
use crate::seed;

/// One raw column: either fully numeric or categorical strings.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnValues {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

#[derive(Debug, Clone)]
pub struct RawColumn {
    pub name: String,
    pub values: ColumnValues,
}

/// Parsed CSV table before preprocessing.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub columns: Vec<RawColumn>,
    pub labels: Vec<String>,
    pub label_column: String,
    /// Rows discarded because of missing cells.
    pub dropped_rows: usize,
}

impl RawTable {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_feature_columns(&self) -> usize {
        self.columns.len()
    }
}

/// Origin of an encoded feature column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureOrigin {
    Continuous,
    /// One-hot column belonging to the categorical group with this id.
    OneHot { group: usize },
}

/// Preprocessed feature matrix with labels and per-feature valid bounds.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Mat,
    pub y: Vec<usize>,
    pub feature_lo: Vec<f64>,
    pub feature_hi: Vec<f64>,
    pub class_count: usize,
    pub feature_meta: Vec<FeatureOrigin>,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.x.rows()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    /// Rebuild bounds from the current rows. Used after any row selection so
    /// the box invariant holds by construction.
    fn recompute_bounds(&mut self) {
        let d = self.n_features();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for row in self.x.iter_rows() {
            for (j, &v) in row.iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        self.feature_lo = lo;
        self.feature_hi = hi;
    }

    /// Subset of rows, bounds recomputed.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut out = Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            feature_lo: Vec::new(),
            feature_hi: Vec::new(),
            class_count: self.class_count,
            feature_meta: self.feature_meta.clone(),
            feature_names: self.feature_names.clone(),
            class_names: self.class_names.clone(),
        };
        out.recompute_bounds();
        out
    }
}

/// Deterministic stratified split parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") || t == "?"
}

/// Load a CSV file with a header row. Rows containing missing cells are
/// dropped (counted in `dropped_rows`). A column whose first retained value
/// parses as a number is treated as numeric; later unparseable cells in such
/// a column are an error naming the row and column.
pub fn load_csv(path: &Path, label_column: &str) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| SageError::LabelColumnMissing(label_column.to_string()))?;

    let mut kept: Vec<(usize, csv::StringRecord)> = Vec::new();
    let mut dropped = 0usize;
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        if record.iter().any(is_missing) {
            dropped += 1;
        } else {
            kept.push((row_no + 1, record));
        }
    }
    if kept.is_empty() {
        return Err(SageError::EmptyInput(format!(
            "no usable rows in {}",
            path.display()
        )));
    }

    let labels: Vec<String> = kept
        .iter()
        .map(|(_, r)| r[label_idx].trim().to_string())
        .collect();
    let mut distinct = labels.clone();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(SageError::InvalidArgument(
            "label column has fewer than 2 classes".into(),
        ));
    }

    let mut columns = Vec::new();
    for (col, name) in headers.iter().enumerate() {
        if col == label_idx {
            continue;
        }
        let first = kept[0].1[col].trim();
        let values = if first.parse::<f64>().is_ok() {
            let mut vals = Vec::with_capacity(kept.len());
            for (row_no, record) in &kept {
                let cell = record[col].trim();
                let v: f64 = cell.parse().map_err(|_| SageError::BadNumericCell {
                    row: *row_no,
                    column: name.clone(),
                    value: cell.to_string(),
                })?;
                vals.push(v);
            }
            ColumnValues::Numeric(vals)
        } else {
            ColumnValues::Categorical(kept.iter().map(|(_, r)| r[col].trim().to_string()).collect())
        };
        columns.push(RawColumn {
            name: name.clone(),
            values,
        });
    }

    Ok(RawTable {
        columns,
        labels,
        label_column: label_column.to_string(),
        dropped_rows: dropped,
    })
}

fn column_is_constant(col: &RawColumn) -> bool {
    match &col.values {
        ColumnValues::Numeric(v) => v.windows(2).all(|w| w[0] == w[1]),
        ColumnValues::Categorical(v) => v.windows(2).all(|w| w[0] == w[1]),
    }
}

/// Map raw label strings to contiguous class ids. Integer-valued labels sort
/// numerically, anything else lexically.
fn class_map(labels: &[String]) -> (Vec<String>, Vec<usize>) {
    let mut distinct: Vec<String> = labels.to_vec();
    distinct.sort();
    distinct.dedup();
    if distinct.iter().all(|s| s.parse::<i64>().is_ok()) {
        distinct.sort_by_key(|s| s.parse::<i64>().unwrap());
    }
    let index: BTreeMap<&String, usize> = distinct
        .iter()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect();
    let y = labels.iter().map(|s| index[s]).collect();
    (distinct, y)
}

/// Preprocess with standardization statistics from all rows.
pub fn preprocess(raw: &RawTable) -> Result<Dataset> {
    let all: Vec<usize> = (0..raw.n_rows()).collect();
    preprocess_with_stats(raw, &all)
}

/// Preprocess with standardization statistics restricted to `stats_rows`
/// (the config switch for train-only statistics).
pub fn preprocess_with_stats(raw: &RawTable, stats_rows: &[usize]) -> Result<Dataset> {
    let n = raw.n_rows();
    if n == 0 {
        return Err(SageError::EmptyInput("raw table has no rows".into()));
    }

    // Drop duplicate columns (keep first occurrence), then constant columns.
    let mut keep: Vec<&RawColumn> = Vec::new();
    for col in &raw.columns {
        if keep.iter().any(|k| k.values == col.values) {
            continue;
        }
        keep.push(col);
    }
    let keep: Vec<&RawColumn> = keep
        .into_iter()
        .filter(|c| !column_is_constant(c))
        .collect();
    if keep.is_empty() {
        return Err(SageError::InvalidArgument(
            "all feature columns are constant".into(),
        ));
    }

    let (class_names, y) = class_map(&raw.labels);
    if class_names.len() < 2 {
        return Err(SageError::InvalidArgument(
            "fewer than 2 classes after preprocessing".into(),
        ));
    }

    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut meta = Vec::new();
    let mut names = Vec::new();
    let mut group = 0usize;
    for col in keep {
        match &col.values {
            ColumnValues::Numeric(vals) => {
                let stats: Vec<f64> = stats_rows.iter().map(|&i| vals[i]).collect();
                let mean = stats.iter().sum::<f64>() / stats.len() as f64;
                let var =
                    stats.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / stats.len() as f64;
                let sd = var.sqrt();
                let sd = if sd > 0.0 { sd } else { 1.0 };
                features.push(vals.iter().map(|v| (v - mean) / sd).collect());
                meta.push(FeatureOrigin::Continuous);
                names.push(col.name.clone());
            }
            ColumnValues::Categorical(vals) => {
                let mut levels: Vec<&String> = vals.iter().collect();
                levels.sort();
                levels.dedup();
                for level in levels {
                    features.push(
                        vals.iter()
                            .map(|v| if v == level { 1.0 } else { 0.0 })
                            .collect(),
                    );
                    meta.push(FeatureOrigin::OneHot { group });
                    names.push(format!("{}={}", col.name, level));
                }
                group += 1;
            }
        }
    }

    let d = features.len();
    let mut x = Mat::zeros(n, d);
    for (j, colvals) in features.iter().enumerate() {
        for (i, &v) in colvals.iter().enumerate() {
            x.set(i, j, v);
        }
    }

    let mut ds = Dataset {
        x,
        y,
        feature_lo: Vec::new(),
        feature_hi: Vec::new(),
        class_count: class_names.len(),
        feature_meta: meta,
        feature_names: names,
        class_names,
    };
    ds.recompute_bounds();
    Ok(ds)
}

/// Deterministic stratified index split. Each class keeps at least one
/// sample on each side.
pub fn stratified_split_indices(
    y: &[usize],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(SageError::InvalidArgument(format!(
            "train_fraction {train_fraction} outside (0,1)"
        )));
    }
    let n_classes = y.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = seed::rng(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..n_classes {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(SageError::ClassTooSmall {
                class,
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        let want = (train_fraction * idx.len() as f64).round() as usize;
        let take = want.clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..take]);
        test.extend_from_slice(&idx[take..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Stratified train/test split of a preprocessed dataset.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let (train_idx, test_idx) = stratified_split_indices(&ds.y, spec.train_fraction, spec.seed)?;
    Ok((ds.select(&train_idx), ds.select(&test_idx)))
}

/// Generate Gaussian class clusters with distinct means, per-class counts
/// proportional to `imbalance`, and 5% label noise (a random permutation of
/// labels within a 5% subset, so class counts are preserved exactly).
pub fn synth_generate(
    n: usize,
    d: usize,
    class_count: usize,
    imbalance: &[f64],
    seed: u64,
) -> Result<Dataset> {
    if class_count < 2 || d == 0 {
        return Err(SageError::InvalidArgument(
            "need at least 2 classes and 1 feature".into(),
        ));
    }
    if n < class_count * 10 {
        return Err(SageError::InvalidArgument(format!(
            "n={n} too small for {class_count} classes (need >= {})",
            class_count * 10
        )));
    }
    if imbalance.len() != class_count {
        return Err(SageError::InvalidArgument(
            "imbalance length must equal class count".into(),
        ));
    }
    if imbalance.iter().any(|&w| w <= 0.0) {
        return Err(SageError::InvalidArgument(
            "imbalance entries must be positive".into(),
        ));
    }
    let total: f64 = imbalance.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(SageError::InvalidArgument(
            "imbalance must sum to 1".into(),
        ));
    }

    // Largest-remainder apportionment of n over classes.
    let mut counts: Vec<usize> = imbalance
        .iter()
        .map(|&w| (w * n as f64).floor() as usize)
        .collect();
    let mut rest: Vec<(usize, f64)> = imbalance
        .iter()
        .enumerate()
        .map(|(c, &w)| (c, w * n as f64 - (w * n as f64).floor()))
        .collect();
    rest.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut leftover = n - counts.iter().sum::<usize>();
    for (c, _) in rest {
        if leftover == 0 {
            break;
        }
        counts[c] += 1;
        leftover -= 1;
    }

    let separation = 4.0;
    let mut rng = seed::rng(seed);
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(n);
    for (class, &count) in counts.iter().enumerate() {
        let axis = class % d;
        let scale = 1.0 + (class / d) as f64;
        for _ in 0..count {
            let mut row: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            row[axis] += separation * scale;
            rows.push((row, class));
        }
    }
    rows.shuffle(&mut rng);

    // Permutation label noise over a 5% subset.
    let noisy = ((0.05 * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let subset = &order[..noisy];
    let mut permuted: Vec<usize> = subset.to_vec();
    permuted.shuffle(&mut rng);
    let moved: Vec<usize> = subset.iter().map(|&i| rows[i].1).collect();
    for (k, &dst) in permuted.iter().enumerate() {
        rows[dst].1 = moved[k];
    }

    let y: Vec<usize> = rows.iter().map(|(_, c)| *c).collect();
    let flat: Vec<Vec<f64>> = rows.into_iter().map(|(r, _)| r).collect();
    let mut ds = Dataset {
        x: Mat::from_rows(&flat),
        y,
        feature_lo: Vec::new(),
        feature_hi: Vec::new(),
        class_count,
        feature_meta: vec![FeatureOrigin::Continuous; d],
        feature_names: (0..d).map(|j| format!("f{j}")).collect(),
        class_names: (0..class_count).map(|c| c.to_string()).collect(),
    };
    ds.recompute_bounds();
    Ok(ds)
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetSchema {
    version: u32,
    feature_names: Vec<String>,
    feature_meta: Vec<FeatureOrigin>,
    feature_lo: Vec<f64>,
    feature_hi: Vec<f64>,
    class_count: usize,
    class_names: Vec<String>,
}

/// Persist a dataset as a schema file (JSON text) plus a CSV of values.
pub fn save_dataset(ds: &Dataset, schema_path: &Path, csv_path: &Path) -> Result<()> {
    let schema = DatasetSchema {
        version: 1,
        feature_names: ds.feature_names.clone(),
        feature_meta: ds.feature_meta.clone(),
        feature_lo: ds.feature_lo.clone(),
        feature_hi: ds.feature_hi.clone(),
        class_count: ds.class_count,
        class_names: ds.class_names.clone(),
    };
    std::fs::write(schema_path, serde_json::to_string_pretty(&schema)?)?;

    let mut writer = csv::Writer::from_path(csv_path)?;
    let mut header: Vec<String> = ds.feature_names.clone();
    header.push("label".into());
    writer.write_record(&header)?;
    for (i, row) in ds.x.iter_rows().enumerate() {
        let mut record: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        record.push(ds.y[i].to_string());
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_dataset(schema_path: &Path, csv_path: &Path) -> Result<Dataset> {
    let schema: DatasetSchema = serde_json::from_str(&std::fs::read_to_string(schema_path)?)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(csv_path)?;
    let d = schema.feature_names.len();
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for record in reader.records() {
        let record = record?;
        let mut row = Vec::with_capacity(d);
        for j in 0..d {
            row.push(record[j].parse::<f64>().map_err(|_| {
                SageError::ModelFormat(format!("bad value '{}' in dataset csv", &record[j]))
            })?);
        }
        y.push(record[d].parse::<usize>().map_err(|_| {
            SageError::ModelFormat(format!("bad label '{}' in dataset csv", &record[d]))
        })?);
        rows.push(row);
    }
    Ok(Dataset {
        x: Mat::from_rows(&rows),
        y,
        feature_lo: schema.feature_lo,
        feature_hi: schema.feature_hi,
        class_count: schema.class_count,
        feature_meta: schema.feature_meta,
        feature_names: schema.feature_names,
        class_names: schema.class_names,
    })
}
