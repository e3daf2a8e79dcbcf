//! CSV ingestion, the preprocessing pipeline and synthetic scenarios.
//!
//! Preprocessing is split into [`Pipeline::fit`] (statistics from a set of
//! fit rows) and [`Pipeline::apply`] (replay on any table with the same
//! columns), so models can carry the exact transform used in training.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::distrib::{TaskKind, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::lossmodel::Example;

const MISSING: [&str; 4] = ["", "NA", "?", "NaN"];
/// Columns whose VIF exceeds this are removed, worst first.
pub const VIF_LIMIT: f64 = 10.0;
/// Reported VIF for (numerically) perfectly collinear columns.
pub const VIF_CAP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnValues {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawColumn {
    pub name: String,
    pub values: ColumnValues,
}

/// Mapping of the two raw class labels onto −1 and +1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub negative: String,
    pub positive: String,
}

impl LabelMap {
    fn map(&self, raw: &str) -> Result<f64> {
        if raw == self.negative {
            Ok(-1.0)
        } else if raw == self.positive {
            Ok(1.0)
        } else {
            Err(Error::Input(format!("label '{raw}' is neither '{}' nor '{}'", self.negative, self.positive)))
        }
    }
}

/// A table after cleaning but before any fitted transform.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub task: TaskKind,
    pub columns: Vec<RawColumn>,
    pub label_name: String,
    /// Raw label text per row; empty when the table carries no labels.
    pub label_raw: Vec<String>,
    pub label_map: Option<LabelMap>,
    pub dropped_missing: usize,
    pub dropped_duplicates: usize,
}

impl RawDataset {
    pub fn n_rows(&self) -> usize {
        match self.columns.first().map(|c| &c.values) {
            Some(ColumnValues::Numeric(v)) => v.len(),
            Some(ColumnValues::Categorical(v)) => v.len(),
            None => self.label_raw.len(),
        }
    }

    pub fn has_labels(&self) -> bool {
        !self.label_raw.is_empty()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    /// Numeric labels under this table's own mapping.
    pub fn labels(&self) -> Result<Vec<f64>> {
        labels_with(self.task, self.label_map.as_ref(), &self.label_raw)
    }

    /// Builds a purely numeric table; classification labels must be ±1.
    pub fn from_numeric(task: TaskKind, names: Vec<String>, rows: &[Vec<f64>], labels: &[f64]) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Contract(format!("{} rows but {} labels", rows.len(), labels.len())));
        }
        if let Some(r) = rows.iter().position(|r| r.len() != names.len()) {
            return Err(Error::Contract(format!("row {r} has {} values for {} columns", rows[r].len(), names.len())));
        }
        let columns = names
            .into_iter()
            .enumerate()
            .map(|(j, name)| RawColumn { name, values: ColumnValues::Numeric(rows.iter().map(|r| r[j]).collect()) })
            .collect();
        let label_map =
            (task == TaskKind::Classification).then(|| LabelMap { negative: "-1".into(), positive: "1".into() });
        let label_raw = labels
            .iter()
            .map(|&y| match task {
                TaskKind::Classification if y == 1.0 => "1".to_owned(),
                TaskKind::Classification if y == -1.0 => "-1".to_owned(),
                _ => format_float(y),
            })
            .collect();
        let raw = Self {
            task,
            columns,
            label_name: "y".into(),
            label_raw,
            label_map,
            dropped_missing: 0,
            dropped_duplicates: 0,
        };
        raw.labels()?;
        Ok(raw)
    }

    /// Writes the table as CSV, label last.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.column_names();
        if self.has_labels() {
            header.push(self.label_name.clone());
        }
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut rec: Vec<String> = self
                .columns
                .iter()
                .map(|c| match &c.values {
                    ColumnValues::Numeric(v) => format_float(v[i]),
                    ColumnValues::Categorical(v) => v[i].clone(),
                })
                .collect();
            if self.has_labels() {
                rec.push(self.label_raw[i].clone());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest round-trip decimal form.
pub fn format_float(x: f64) -> String {
    format!("{x:?}")
}

fn labels_with(task: TaskKind, map: Option<&LabelMap>, raw: &[String]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Ok(vec![]);
    }
    match task {
        TaskKind::Classification => {
            let map = map.ok_or_else(|| Error::Input("classification table without a label mapping".into()))?;
            raw.iter().map(|s| map.map(s)).collect()
        }
        TaskKind::Regression => raw
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::Input(format!("row {}: regression label '{s}' is not a finite number", i + 1))
                })
            })
            .collect(),
    }
}

fn is_missing(cell: &str) -> bool {
    MISSING.contains(&cell)
}

/// Parsing options for [`read_csv`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub deduplicate: bool,
    /// When false, a missing label column yields an unlabeled table.
    pub require_label: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { deduplicate: true, require_label: true }
    }
}

/// Reads a labeled CSV with header, dropping rows with missing cells and
/// exact duplicate rows.
pub fn load_csv(path: &Path, label_column: &str, task: TaskKind) -> Result<RawDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    read_csv(file, label_column, task, LoadOptions::default())
}

pub fn read_csv<R: Read>(input: R, label_column: &str, task: TaskKind, opts: LoadOptions) -> Result<RawDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Input(format!("cannot read CSV header: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.is_empty() {
        return Err(Error::Input("CSV header is empty".into()));
    }
    let label_idx = header.iter().position(|h| h == label_column);
    if label_idx.is_none() && opts.require_label {
        return Err(Error::Input(format!("label column '{label_column}' not found; columns are {header:?}")));
    }
    let mut records: Vec<Vec<String>> = Vec::new();
    let mut seen = HashSet::new();
    let (mut dropped_missing, mut dropped_duplicates) = (0, 0);
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Input(format!("CSV row {}: {e}", i + 2)))?;
        if rec.len() != header.len() {
            return Err(Error::Input(format!("CSV row {}: {} cells for {} columns", i + 2, rec.len(), header.len())));
        }
        let row: Vec<String> = rec.iter().map(str::to_owned).collect();
        if row.iter().any(|c| is_missing(c)) {
            dropped_missing += 1;
            continue;
        }
        if opts.deduplicate && !seen.insert(row.clone()) {
            dropped_duplicates += 1;
            continue;
        }
        records.push(row);
    }
    if dropped_missing + dropped_duplicates > 0 {
        log::info!("dropped {dropped_missing} rows with missing cells and {dropped_duplicates} duplicate rows");
    }
    let mut columns = Vec::new();
    for (j, name) in header.iter().enumerate() {
        if Some(j) == label_idx {
            continue;
        }
        let parsed: Option<Vec<f64>> =
            records.iter().map(|r| r[j].parse::<f64>().ok().filter(|v| v.is_finite())).collect();
        let values = match parsed {
            Some(v) => ColumnValues::Numeric(v),
            None => ColumnValues::Categorical(records.iter().map(|r| r[j].clone()).collect()),
        };
        columns.push(RawColumn { name: name.clone(), values });
    }
    if columns.is_empty() {
        return Err(Error::Input("no feature columns".into()));
    }
    let label_raw: Vec<String> = match label_idx {
        Some(l) => records.iter().map(|r| r[l].clone()).collect(),
        None => Vec::new(),
    };
    let label_map = if task == TaskKind::Classification && !label_raw.is_empty() {
        Some(infer_label_map(&label_raw)?)
    } else {
        None
    };
    let raw = RawDataset {
        task,
        columns,
        label_name: label_column.to_owned(),
        label_raw,
        label_map,
        dropped_missing,
        dropped_duplicates,
    };
    raw.labels()?;
    Ok(raw)
}

/// Sorted distinct values (numerically when all parse) map to −1 and +1.
fn infer_label_map(raw: &[String]) -> Result<LabelMap> {
    let distinct: BTreeSet<&str> = raw.iter().map(String::as_str).collect();
    let mut values: Vec<&str> = distinct.into_iter().collect();
    if values.len() != 2 {
        return Err(Error::Input(format!("classification needs exactly two label values, found {values:?}")));
    }
    if let (Ok(a), Ok(b)) = (values[0].parse::<f64>(), values[1].parse::<f64>()) {
        if a > b {
            values.swap(0, 1);
        }
    }
    Ok(LabelMap { negative: values[0].to_owned(), positive: values[1].to_owned() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputColumn {
    pub name: String,
    pub kind: ColumnKind,
    /// Sorted categories seen in the fit rows (categorical only).
    pub categories: Vec<String>,
    /// Tukey fence, when outlier removal was fitted.
    pub fence: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedColumn {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    /// Tukey-fence row removal; regression only.
    pub remove_outliers: bool,
    pub vif_limit: f64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self { remove_outliers: true, vif_limit: VIF_LIMIT }
    }
}

/// Fitted preprocessing: one-hot encoding, outlier fences, VIF selection,
/// standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub task: TaskKind,
    pub label_name: String,
    pub label_map: Option<LabelMap>,
    pub inputs: Vec<InputColumn>,
    /// Column names after one-hot expansion.
    pub expanded: Vec<String>,
    /// Indices into `expanded` of the retained features, in order.
    pub kept: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub label_fence: Option<(f64, f64)>,
    pub dropped: Vec<DroppedColumn>,
}

/// Preprocessed data ready for training or scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema_version: u32,
    pub task: TaskKind,
    pub column_names: Vec<String>,
    pub features: Vec<Vec<f64>>,
    /// Empty for unlabeled tables.
    pub labels: Vec<f64>,
    /// Row index in the source table for each retained row.
    pub row_ids: Vec<usize>,
    pub pipeline: Pipeline,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.column_names.len()
    }

    pub fn examples(&self) -> Vec<Example> {
        self.features.iter().zip(&self.labels).map(|(x, &y)| Example::new(x.clone(), y)).collect()
    }

    /// Rows whose source index is in `rows`, in this dataset's order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let wanted: HashSet<usize> = rows.iter().copied().collect();
        let mut out = Dataset { features: vec![], labels: vec![], row_ids: vec![], ..self.clone() };
        for (i, &id) in self.row_ids.iter().enumerate() {
            if wanted.contains(&id) {
                out.features.push(self.features[i].clone());
                if !self.labels.is_empty() {
                    out.labels.push(self.labels[i]);
                }
                out.row_ids.push(id);
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Type-7 quantile of sorted data.
fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

fn tukey_fence(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    let (q1, q3) = (quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.75));
    let iqr = q3 - q1;
    (q1 - 1.5 * iqr, q3 + 1.5 * iqr)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Variance inflation factors of the columns of `x` (rows × columns),
/// each regressed with intercept on the others.
pub fn vif(x: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = x.len();
    let p = x.first().map_or(0, Vec::len);
    if p < 2 {
        return Ok(vec![1.0; p]);
    }
    if m < 2 {
        return Err(Error::Input("VIF needs at least two rows".into()));
    }
    // Standardize for conditioning; VIF is invariant to affine column maps.
    let mut z = DMatrix::<f64>::zeros(m, p);
    for j in 0..p {
        let col: Vec<f64> = x.iter().map(|r| r[j]).collect();
        let (mu, sd) = mean_std(&col);
        if sd == 0.0 {
            return Err(Error::Input(format!("VIF of a zero-variance column {j}")));
        }
        for i in 0..m {
            z[(i, j)] = (col[i] - mu) / sd;
        }
    }
    let mut out = Vec::with_capacity(p);
    for j in 0..p {
        let mut design = DMatrix::<f64>::zeros(m, p);
        for i in 0..m {
            design[(i, 0)] = 1.0;
            for (c, k) in (1..).zip((0..p).filter(|&k| k != j)) {
                design[(i, c)] = z[(i, k)];
            }
        }
        let target = DVector::from_iterator(m, (0..m).map(|i| z[(i, j)]));
        let coef =
            design.clone().svd(true, true).solve(&target, 1e-12).map_err(|e| Error::numerical("vif", e.to_string()))?;
        let resid = &target - &design * coef;
        let sse = resid.norm_squared();
        // Standardized target: total sum of squares is m.
        let unexplained = sse / m as f64;
        out.push(if unexplained <= 1.0 / VIF_CAP { VIF_CAP } else { (1.0 / unexplained).min(VIF_CAP) });
    }
    Ok(out)
}

impl Pipeline {
    /// Fits all statistics on `fit_rows` of `raw`.
    pub fn fit(raw: &RawDataset, fit_rows: &[usize], opts: &PreprocessOptions) -> Result<Self> {
        if fit_rows.is_empty() {
            return Err(Error::Contract("preprocessing needs at least one fit row".into()));
        }
        let m = raw.n_rows();
        if let Some(&r) = fit_rows.iter().find(|&&r| r >= m) {
            return Err(Error::Contract(format!("fit row {r} out of range for {m} rows")));
        }
        if !raw.has_labels() {
            return Err(Error::Input("fitting preprocessing requires labels".into()));
        }
        let labels = raw.labels()?;
        let regression = raw.task == TaskKind::Regression;
        let mut inputs: Vec<InputColumn> = raw
            .columns
            .iter()
            .map(|c| match &c.values {
                ColumnValues::Numeric(_) => {
                    InputColumn { name: c.name.clone(), kind: ColumnKind::Numeric, categories: vec![], fence: None }
                }
                ColumnValues::Categorical(v) => {
                    let cats: BTreeSet<&String> = fit_rows.iter().map(|&r| &v[r]).collect();
                    InputColumn {
                        name: c.name.clone(),
                        kind: ColumnKind::Categorical,
                        categories: cats.into_iter().cloned().collect(),
                        fence: None,
                    }
                }
            })
            .collect();

        let mut rows: Vec<usize> = fit_rows.to_vec();
        let mut label_fence = None;
        if regression && opts.remove_outliers {
            for (input, col) in inputs.iter_mut().zip(&raw.columns) {
                if let ColumnValues::Numeric(v) = &col.values {
                    input.fence = Some(tukey_fence(fit_rows.iter().map(|&r| v[r])));
                }
            }
            let lf = tukey_fence(fit_rows.iter().map(|&r| labels[r]));
            label_fence = Some(lf);
            let before = rows.len();
            rows.retain(|&r| within(lf, labels[r]) && row_within(&inputs, raw, r));
            if rows.len() < before {
                log::info!("outlier fences removed {} of {before} fit rows", before - rows.len());
            }
            if rows.is_empty() {
                return Err(Error::Input("every fit row lies outside the outlier fences".into()));
            }
        }

        let mut pipeline = Pipeline {
            task: raw.task,
            label_name: raw.label_name.clone(),
            label_map: raw.label_map.clone(),
            expanded: expanded_names(&inputs),
            inputs,
            kept: vec![],
            mean: vec![],
            std: vec![],
            label_fence,
            dropped: vec![],
        };
        let matrix: Vec<Vec<f64>> = rows.iter().map(|&r| pipeline.expand_row(raw, r)).collect::<Result<_>>()?;

        let mut kept = Vec::new();
        for j in 0..pipeline.expanded.len() {
            let col: Vec<f64> = matrix.iter().map(|r| r[j]).collect();
            let (_, sd) = mean_std(&col);
            if sd > 0.0 {
                kept.push(j);
            } else {
                log::warn!("dropping zero-variance column '{}'", pipeline.expanded[j]);
                pipeline
                    .dropped
                    .push(DroppedColumn { name: pipeline.expanded[j].clone(), reason: "zero variance".into() });
            }
        }
        while kept.len() >= 2 {
            let sub: Vec<Vec<f64>> = matrix.iter().map(|r| kept.iter().map(|&j| r[j]).collect()).collect();
            let v = vif(&sub)?;
            // Worst column; ties go to the later column.
            let (worst, &worst_vif) =
                v.iter().enumerate().fold((0, &v[0]), |acc, (i, x)| if *x >= *acc.1 { (i, x) } else { acc });
            if worst_vif <= opts.vif_limit {
                break;
            }
            let j = kept.remove(worst);
            log::info!("dropping '{}' with VIF {worst_vif:.3e}", pipeline.expanded[j]);
            pipeline
                .dropped
                .push(DroppedColumn { name: pipeline.expanded[j].clone(), reason: format!("VIF {worst_vif:.6e}") });
        }
        if kept.is_empty() {
            return Err(Error::Input("preprocessing removed every feature column".into()));
        }
        for &j in &kept {
            let col: Vec<f64> = matrix.iter().map(|r| r[j]).collect();
            let (mu, sd) = mean_std(&col);
            pipeline.mean.push(mu);
            pipeline.std.push(sd);
        }
        pipeline.kept = kept;
        Ok(pipeline)
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.kept.iter().map(|&j| self.expanded[j].clone()).collect()
    }

    fn expand_row(&self, raw: &RawDataset, r: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.expanded.len());
        for (input, col) in self.inputs.iter().zip(&raw.columns) {
            match (&col.values, input.kind) {
                (ColumnValues::Numeric(v), ColumnKind::Numeric) => out.push(v[r]),
                (ColumnValues::Categorical(v), ColumnKind::Categorical) => {
                    out.extend(input.categories.iter().map(|c| if *c == v[r] { 1.0 } else { 0.0 }))
                }
                // A categorical column whose values happen to parse as numbers.
                (ColumnValues::Numeric(v), ColumnKind::Categorical) => {
                    let s = format_float(v[r]);
                    out.extend(input.categories.iter().map(|c| {
                        if c.parse::<f64>().ok() == Some(v[r]) || *c == s {
                            1.0
                        } else {
                            0.0
                        }
                    }))
                }
                (ColumnValues::Categorical(v), ColumnKind::Numeric) => {
                    return Err(Error::Input(format!("column '{}' value '{}' is not numeric", input.name, v[r])));
                }
            }
        }
        Ok(out)
    }

    /// Replays the transform on `raw`. With `drop_outliers`, rows outside
    /// the fitted fences are removed; otherwise every row is kept.
    pub fn apply(&self, raw: &RawDataset, drop_outliers: bool) -> Result<Dataset> {
        let names = raw.column_names();
        let wanted: Vec<String> = self.inputs.iter().map(|c| c.name.clone()).collect();
        if names != wanted {
            let missing: Vec<&String> = wanted.iter().filter(|n| !names.contains(n)).collect();
            let extra: Vec<&String> = names.iter().filter(|n| !wanted.contains(n)).collect();
            return Err(Error::Input(format!(
                "column mismatch: expected {wanted:?}; missing {missing:?}, unexpected {extra:?}"
            )));
        }
        if raw.task != self.task {
            return Err(Error::Input(format!(
                "table task {:?} does not match pipeline task {:?}",
                raw.task, self.task
            )));
        }
        let labels =
            if raw.has_labels() { labels_with(self.task, self.label_map.as_ref(), &raw.label_raw)? } else { vec![] };
        for (input, col) in self.inputs.iter().zip(&raw.columns) {
            if let (ColumnKind::Categorical, ColumnValues::Categorical(v)) = (input.kind, &col.values) {
                if let Some(u) = v.iter().find(|s| !input.categories.contains(s)) {
                    log::warn!("column '{}' has unseen category '{u}'; it encodes as all zeros", input.name);
                }
            }
        }
        let mut out = Dataset {
            schema_version: SCHEMA_VERSION,
            task: self.task,
            column_names: self.feature_names(),
            features: vec![],
            labels: vec![],
            row_ids: vec![],
            pipeline: self.clone(),
        };
        for r in 0..raw.n_rows() {
            if drop_outliers {
                let label_ok = self.label_fence.is_none_or(|f| labels.is_empty() || within(f, labels[r]));
                if !label_ok || !row_within(&self.inputs, raw, r) {
                    continue;
                }
            }
            let e = self.expand_row(raw, r)?;
            out.features.push(
                self.kept.iter().zip(self.mean.iter().zip(&self.std)).map(|(&j, (mu, sd))| (e[j] - mu) / sd).collect(),
            );
            if !labels.is_empty() {
                out.labels.push(labels[r]);
            }
            out.row_ids.push(r);
        }
        Ok(out)
    }

    /// Maps a point given in raw numeric input coordinates into feature
    /// space. Requires an all-numeric input schema.
    pub fn transform_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.inputs.iter().any(|c| c.kind != ColumnKind::Numeric) {
            return Err(Error::Input("points can only be mapped through all-numeric pipelines".into()));
        }
        if x.len() != self.inputs.len() {
            return Err(Error::Input(format!(
                "point has {} coordinates for {} input columns",
                x.len(),
                self.inputs.len()
            )));
        }
        Ok(self.kept.iter().zip(self.mean.iter().zip(&self.std)).map(|(&j, (mu, sd))| (x[j] - mu) / sd).collect())
    }
}

fn within((lo, hi): (f64, f64), v: f64) -> bool {
    v >= lo && v <= hi
}

fn row_within(inputs: &[InputColumn], raw: &RawDataset, r: usize) -> bool {
    inputs.iter().zip(&raw.columns).all(|(input, col)| match (&col.values, input.fence) {
        (ColumnValues::Numeric(v), Some(f)) => within(f, v[r]),
        _ => true,
    })
}

fn expanded_names(inputs: &[InputColumn]) -> Vec<String> {
    let mut names = Vec::new();
    for c in inputs {
        match c.kind {
            ColumnKind::Numeric => names.push(c.name.clone()),
            ColumnKind::Categorical => names.extend(c.categories.iter().map(|v| format!("{}={v}", c.name))),
        }
    }
    names
}

/// Fits the pipeline on `fit_rows` and applies it to every row of `raw`,
/// removing fenced outliers everywhere.
pub fn preprocess(raw: &RawDataset, fit_rows: &[usize], opts: &PreprocessOptions) -> Result<Dataset> {
    Pipeline::fit(raw, fit_rows, opts)?.apply(raw, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    ClfCase1,
    ClfCase2,
    RegCase1,
    RegCase2,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::ClfCase1, Scenario::ClfCase2, Scenario::RegCase1, Scenario::RegCase2];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::ClfCase1 => "clf_case1",
            Scenario::ClfCase2 => "clf_case2",
            Scenario::RegCase1 => "reg_case1",
            Scenario::RegCase2 => "reg_case2",
        }
    }

    pub fn task(self) -> TaskKind {
        match self {
            Scenario::ClfCase1 | Scenario::ClfCase2 => TaskKind::Classification,
            Scenario::RegCase1 | Scenario::RegCase2 => TaskKind::Regression,
        }
    }

    pub fn default_size(self) -> usize {
        match self {
            Scenario::ClfCase1 => 1062,
            Scenario::ClfCase2 => 1277,
            Scenario::RegCase1 => 1058,
            Scenario::RegCase2 => 1411,
        }
    }

    /// Label-flip probability for background points (classification) or
    /// Gaussian label noise standard deviation (regression).
    pub fn default_noise(self) -> f64 {
        match self {
            Scenario::ClfCase1 => 0.15,
            Scenario::ClfCase2 => 0.02,
            Scenario::RegCase1 | Scenario::RegCase2 => 0.1,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| {
            Error::Input(format!("unknown scenario '{s}'; expected one of clf_case1, clf_case2, reg_case1, reg_case2"))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub scenario: Scenario,
    pub size: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        Self { scenario, size: scenario.default_size(), noise: scenario.default_noise(), seed }
    }
}

/// Generator parameters behind a synthetic table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub schema_version: u32,
    pub spec: SyntheticSpec,
    pub centers: Vec<Vec<f64>>,
    pub radii: Vec<f64>,
    /// Per locality `[w.., b]` of the rule `w·x + b` (a separating
    /// direction for classification, the regression line otherwise).
    pub local_rules: Vec<Vec<f64>>,
    pub background_rule: Vec<f64>,
}

impl GroundTruth {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

struct Layout2d {
    centers: Vec<Vec<f64>>,
    radii: Vec<f64>,
    rules: Vec<Vec<f64>>,
    background: Vec<f64>,
    inside_share: f64,
    half_box: f64,
}

fn clf_layout(scenario: Scenario) -> Layout2d {
    match scenario {
        Scenario::ClfCase1 => Layout2d {
            centers: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            radii: vec![0.9, 0.9],
            // Local boundaries pass through each center, tilted away from the
            // horizontal background boundary and oriented against it, so the
            // local labels disagree with the background on most of each disc.
            rules: vec![vec![1.0, -1.0, 1.0], vec![-1.0, -1.0, 1.0]],
            background: vec![0.0, 1.0, 0.0],
            inside_share: 0.5,
            half_box: 3.0,
        },
        _ => Layout2d {
            centers: vec![vec![-1.5, -1.0], vec![1.5, -1.0], vec![0.0, 1.5]],
            radii: vec![0.9, 0.9, 0.9],
            rules: vec![vec![1.0, 0.0, 1.5], vec![-1.0, 0.0, 1.5], vec![1.0, 1.0, -1.5]],
            background: vec![0.0, 1.0, 0.0],
            inside_share: 0.6,
            half_box: 3.0,
        },
    }
}

fn affine(rule: &[f64], x: &[f64]) -> f64 {
    rule[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + rule[x.len()]
}

fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Synthetic table and its generator parameters.
pub fn generate(spec: &SyntheticSpec) -> Result<(RawDataset, GroundTruth)> {
    if spec.size == 0 {
        return Err(Error::Contract("synthetic size must be positive".into()));
    }
    if !(spec.noise >= 0.0) || !spec.noise.is_finite() {
        return Err(Error::Contract(format!("noise must be nonnegative, got {}", spec.noise)));
    }
    if spec.scenario.task() == TaskKind::Classification && spec.noise > 1.0 {
        return Err(Error::Contract("label-flip probability must be at most 1".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    match spec.scenario.task() {
        TaskKind::Classification => Ok(generate_clf(spec, &mut rng)),
        TaskKind::Regression => Ok(generate_reg(spec, &mut rng)),
    }
}

fn generate_clf(spec: &SyntheticSpec, rng: &mut ChaCha20Rng) -> (RawDataset, GroundTruth) {
    let g = clf_layout(spec.scenario);
    let n_loc = g.centers.len();
    let mut rows = Vec::with_capacity(spec.size);
    let mut labels = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        let x: Vec<f64>;
        let clean;
        let inside = rng.random::<f64>() < g.inside_share;
        if inside {
            let i = rng.random_range(0..n_loc);
            let r = g.radii[i] * rng.random::<f64>().sqrt();
            let t = std::f64::consts::TAU * rng.random::<f64>();
            x = vec![g.centers[i][0] + r * t.cos(), g.centers[i][1] + r * t.sin()];
            clean = sign(affine(&g.rules[i], &x));
        } else {
            x = loop {
                let p = vec![rng.random_range(-g.half_box..g.half_box), rng.random_range(-g.half_box..g.half_box)];
                if (0..n_loc).all(|i| dist(&p, &g.centers[i]) > g.radii[i]) {
                    break p;
                }
            };
            clean = sign(affine(&g.background, &x));
        }
        // Disc interiors stay clean; only the background is contaminated.
        let flip = rng.random::<f64>() < spec.noise;
        let y = if flip && !inside { -clean } else { clean };
        rows.push(x);
        labels.push(y);
    }
    let raw = RawDataset::from_numeric(TaskKind::Classification, vec!["x1".into(), "x2".into()], &rows, &labels)
        .expect("generator output is well formed");
    let truth = GroundTruth {
        schema_version: SCHEMA_VERSION,
        spec: *spec,
        centers: g.centers,
        radii: g.radii,
        local_rules: g.rules,
        background_rule: g.background,
    };
    (raw, truth)
}

fn generate_reg(spec: &SyntheticSpec, rng: &mut ChaCha20Rng) -> (RawDataset, GroundTruth) {
    let (centers, radii, rules, inside_share): (Vec<f64>, Vec<f64>, Vec<Vec<f64>>, f64) = match spec.scenario {
        Scenario::RegCase1 => (vec![1.0], vec![0.75], vec![vec![-3.0, 5.5]], 0.3),
        _ => (vec![-1.5, 1.5], vec![0.6, 0.6], vec![vec![-3.0, -6.0], vec![4.0, -5.0]], 0.4),
    };
    let background = vec![1.5, 1.0];
    let half = 3.0;
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid");
    let mut rows = Vec::with_capacity(spec.size);
    let mut labels = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        let (x, rule) = if rng.random::<f64>() < inside_share {
            let i = rng.random_range(0..centers.len());
            (centers[i] + radii[i] * (2.0 * rng.random::<f64>() - 1.0), &rules[i])
        } else {
            let x = loop {
                let p = rng.random_range(-half..half);
                if centers.iter().zip(&radii).all(|(c, r)| (p - c).abs() > *r) {
                    break p;
                }
            };
            (x, &background)
        };
        let eps = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
        rows.push(vec![x]);
        labels.push(rule[0] * x + rule[1] + eps);
    }
    let raw = RawDataset::from_numeric(TaskKind::Regression, vec!["x1".into()], &rows, &labels)
        .expect("generator output is well formed");
    let truth = GroundTruth {
        schema_version: SCHEMA_VERSION,
        spec: *spec,
        centers: centers.iter().map(|c| vec![*c]).collect(),
        radii,
        local_rules: rules,
        background_rule: background,
    };
    (raw, truth)
}
