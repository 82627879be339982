//! Datasets, loaders and per-feature presorting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::ClassLabel;

/// Dense, column-major feature matrix plus class labels.
///
/// Labels are normalized to contiguous classes `1..=K`; `label_values[c - 1]`
/// is the label as written in the source file for class `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    num_examples: usize,
    num_features: usize,
    columns: Vec<f64>,
    labels: Vec<ClassLabel>,
    label_values: Vec<i64>,
}

impl Dataset {
    /// Build from rows of features and raw integer labels.
    pub fn from_rows(rows: &[Vec<f64>], raw_labels: &[i64]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::InvalidInput(format!(
                "row {} has {} features, expected {d}",
                i + 1,
                rows[i].len()
            )));
        }
        let mut columns = vec![0.0; rows.len() * d];
        for (i, row) in rows.iter().enumerate() {
            for (f, &v) in row.iter().enumerate() {
                columns[f * rows.len() + i] = v;
            }
        }
        Self::from_columns(rows.len(), d, columns, raw_labels)
    }

    /// Build from a column-major `N x D` buffer and raw integer labels.
    pub fn from_columns(
        num_examples: usize,
        num_features: usize,
        columns: Vec<f64>,
        raw_labels: &[i64],
    ) -> Result<Self> {
        let label_values: Vec<i64> = raw_labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Self::with_label_values(num_examples, num_features, columns, raw_labels, label_values)
    }

    fn with_label_values(
        num_examples: usize,
        num_features: usize,
        columns: Vec<f64>,
        raw_labels: &[i64],
        label_values: Vec<i64>,
    ) -> Result<Self> {
        if num_examples == 0 {
            return Err(Error::InvalidInput("dataset has no examples".into()));
        }
        if raw_labels.len() != num_examples {
            return Err(Error::InvalidInput(format!(
                "{} labels for {num_examples} examples",
                raw_labels.len()
            )));
        }
        if columns.len() != num_examples * num_features {
            return Err(Error::InvalidInput("feature buffer has the wrong size".into()));
        }
        if let Some(v) = columns.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite feature value {v}")));
        }
        let index: BTreeMap<i64, usize> = label_values.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let labels = raw_labels
            .iter()
            .map(|v| {
                index
                    .get(v)
                    .map(|&c| ClassLabel::from_index(c))
                    .ok_or_else(|| Error::InvalidInput(format!("label {v} is not a known class")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            num_examples,
            num_features,
            columns,
            labels,
            label_values,
        })
    }

    /// Re-index labels against another dataset's class mapping (typically the
    /// training set's), and pad missing trailing features with zeros.
    pub fn aligned_to(&self, label_values: &[i64], num_features: usize) -> Result<Self> {
        if self.num_features > num_features {
            return Err(Error::InvalidInput(format!(
                "data has {} features, model expects {num_features}",
                self.num_features
            )));
        }
        let mut columns = self.columns.clone();
        columns.resize(self.num_examples * num_features, 0.0);
        let raw = self.raw_labels();
        Self::with_label_values(self.num_examples, num_features, columns, &raw, label_values.to_vec())
    }

    /// Pad missing trailing features with zeros, keeping this dataset's labels.
    pub fn padded_to(&self, num_features: usize) -> Result<Self> {
        self.aligned_to(&self.label_values, num_features)
    }

    pub fn num_examples(&self) -> usize {
        self.num_examples
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.label_values.len()
    }

    #[inline]
    pub fn column(&self, f: usize) -> &[f64] {
        &self.columns[f * self.num_examples..(f + 1) * self.num_examples]
    }

    #[inline]
    pub fn value(&self, i: usize, f: usize) -> f64 {
        self.columns[f * self.num_examples + i]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.num_features).map(|f| self.value(i, f)).collect()
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.labels
    }

    #[inline]
    pub fn label(&self, i: usize) -> ClassLabel {
        self.labels[i]
    }

    pub fn label_values(&self) -> &[i64] {
        &self.label_values
    }

    pub fn raw_labels(&self) -> Vec<i64> {
        self.labels.iter().map(|y| self.label_values[y.index()]).collect()
    }

    /// A note for the user when source labels were not already `1..=K`.
    pub fn label_report(&self) -> Option<String> {
        let contiguous = self.label_values.iter().enumerate().all(|(i, &v)| v == i as i64 + 1);
        if contiguous {
            return None;
        }
        let pairs: Vec<String> = self
            .label_values
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{v}->{}", i + 1))
            .collect();
        Some(format!(
            "labels remapped to classes 1..={}: {}",
            self.num_classes(),
            pairs.join(" ")
        ))
    }

    /// Subset of examples, keeping this dataset's class mapping.
    pub fn subset(&self, examples: &[usize]) -> Result<Self> {
        let n = examples.len();
        let mut columns = Vec::with_capacity(n * self.num_features);
        for f in 0..self.num_features {
            let col = self.column(f);
            columns.extend(examples.iter().map(|&i| col[i]));
        }
        let raw: Vec<i64> = examples
            .iter()
            .map(|&i| self.label_values[self.labels[i].index()])
            .collect();
        Self::with_label_values(n, self.num_features, columns, &raw, self.label_values.clone())
    }

    /// Seeded random split into `(train, holdout)` with `fraction` of the examples held out.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0 < fraction && fraction < 1.0) {
            return Err(Error::Config(format!("holdout fraction {fraction} not in (0, 1)")));
        }
        let mut order: Vec<usize> = (0..self.num_examples).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let held = ((self.num_examples as f64) * fraction).round() as usize;
        if held == 0 || held == self.num_examples {
            return Err(Error::InvalidInput("holdout split leaves an empty side".into()));
        }
        let (test, train) = order.split_at(held);
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }
}

/// On-disk dataset formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Libsvm,
    Csv,
}

impl DataFormat {
    /// Guess from the first non-blank line: `index:value` tokens mean libsvm.
    pub fn sniff(text: &str) -> Self {
        let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        if first.split_whitespace().skip(1).any(|t| t.contains(':')) {
            DataFormat::Libsvm
        } else {
            DataFormat::Csv
        }
    }
}

/// Load a dataset, detecting the format from its content when `format` is `None`.
/// `label_column` only applies to CSV (default: last column).
pub fn load(path: impl AsRef<Path>, format: Option<DataFormat>, label_column: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    match format.unwrap_or_else(|| DataFormat::sniff(&text)) {
        DataFormat::Libsvm => parse_libsvm(&text, path),
        DataFormat::Csv => parse_csv(&text, path, label_column),
    }
}

pub fn load_libsvm(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    parse_libsvm(&fs::read_to_string(path)?, path)
}

pub fn load_csv(path: impl AsRef<Path>, label_column: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    parse_csv(&fs::read_to_string(path)?, path, label_column)
}

fn parse_label(token: &str) -> Option<i64> {
    token.parse::<i64>().ok().or_else(|| {
        let v: f64 = token.parse().ok()?;
        (v.is_finite() && v.fract() == 0.0 && v.abs() < 9.0e15).then_some(v as i64)
    })
}

/// Parse libsvm text: `label idx:val idx:val ...` with 1-based indices.
pub fn parse_libsvm(text: &str, path: &Path) -> Result<Dataset> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut labels = Vec::new();
    let mut entries: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut max_index = 0usize;
    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line");
        let label =
            parse_label(label_tok).ok_or_else(|| err(lineno, format!("label '{label_tok}' is not an integer")))?;
        if label <= 0 {
            return Err(err(lineno, format!("label {label} is not a positive integer")));
        }
        let mut seen = HashSet::new();
        let mut row = Vec::new();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| err(lineno, format!("expected index:value, got '{tok}'")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| err(lineno, format!("bad feature index '{idx}'")))?;
            if idx == 0 {
                return Err(err(lineno, "feature indices are 1-based".into()));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| err(lineno, format!("bad feature value '{val}'")))?;
            if !val.is_finite() {
                return Err(err(lineno, format!("non-finite feature value '{val}'")));
            }
            if !seen.insert(idx) {
                return Err(err(lineno, format!("duplicate feature index {idx}")));
            }
            max_index = max_index.max(idx);
            row.push((idx - 1, val));
        }
        labels.push(label);
        entries.push(row);
    }
    if labels.is_empty() {
        return Err(err(0, "no examples".into()));
    }
    let n = labels.len();
    let mut columns = vec![0.0; n * max_index];
    for (i, row) in entries.iter().enumerate() {
        for &(f, v) in row {
            columns[f * n + i] = v;
        }
    }
    Dataset::from_columns(n, max_index, columns, &labels)
}

/// Parse comma-separated numeric text with an optional header row.
pub fn parse_csv(text: &str, path: &Path, label_column: Option<usize>) -> Result<Dataset> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<(usize, Vec<String>)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        rows.push((line, rec.iter().map(str::to_owned).collect()));
    }
    // header: first row with any non-numeric cell
    if let Some((_, first)) = rows.first() {
        if first.iter().any(|c| c.parse::<f64>().is_err()) {
            rows.remove(0);
        }
    }
    let Some((_, first)) = rows.first() else {
        return Err(err(0, "no examples".into()));
    };
    let width = first.len();
    if width < 2 {
        return Err(err(
            rows[0].0,
            "need at least one feature column and a label column".into(),
        ));
    }
    let label_col = label_column.unwrap_or(width - 1);
    if label_col >= width {
        return Err(err(
            rows[0].0,
            format!("label column {label_col} out of range for {width} columns"),
        ));
    }
    let n = rows.len();
    let d = width - 1;
    let mut columns = vec![0.0; n * d];
    let mut labels = Vec::with_capacity(n);
    for (i, (line, cells)) in rows.iter().enumerate() {
        if cells.len() != width {
            return Err(err(*line, format!("expected {width} columns, found {}", cells.len())));
        }
        let mut f = 0;
        for (c, cell) in cells.iter().enumerate() {
            if c == label_col {
                let label = parse_label(cell).ok_or_else(|| err(*line, format!("label '{cell}' is not an integer")))?;
                labels.push(label);
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| err(*line, format!("column {}: '{cell}' is not a number", c + 1)))?;
            if !v.is_finite() {
                return Err(err(*line, format!("column {}: non-finite value", c + 1)));
            }
            columns[f * n + i] = v;
            f += 1;
        }
    }
    Dataset::from_columns(n, d, columns, &labels)
}

/// Per-feature orderings of the examples by ascending value.
#[derive(Clone, Debug, PartialEq)]
pub struct SortedIndex {
    num_examples: usize,
    order: Vec<u32>,
    run_starts: Vec<Vec<u32>>,
}

impl SortedIndex {
    /// Examples of feature `f` in ascending value order; ties keep example order.
    #[inline]
    pub fn order(&self, f: usize) -> &[u32] {
        &self.order[f * self.num_examples..(f + 1) * self.num_examples]
    }

    /// Positions in [`SortedIndex::order`] where a new run of equal values begins.
    pub fn run_starts(&self, f: usize) -> &[u32] {
        &self.run_starts[f]
    }

    pub fn num_features(&self) -> usize {
        self.run_starts.len()
    }

    pub fn num_examples(&self) -> usize {
        self.num_examples
    }
}

/// Stable ascending sort of every feature column.
pub fn presort(dataset: &Dataset) -> SortedIndex {
    use rayon::prelude::*;
    let n = dataset.num_examples();
    let per_feature: Vec<(Vec<u32>, Vec<u32>)> = (0..dataset.num_features())
        .into_par_iter()
        .map(|f| {
            let col = dataset.column(f);
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]));
            let mut runs = vec![0u32];
            for p in 1..n {
                if col[idx[p] as usize] != col[idx[p - 1] as usize] {
                    runs.push(p as u32);
                }
            }
            (idx, runs)
        })
        .collect();
    let mut order = Vec::with_capacity(n * per_feature.len());
    let mut run_starts = Vec::with_capacity(per_feature.len());
    for (idx, runs) in per_feature {
        order.extend(idx);
        run_starts.push(runs);
    }
    SortedIndex {
        num_examples: n,
        order,
        run_starts,
    }
}

/// Quantile cut points restricting where splits may fall.
///
/// A split on feature `f` is only allowed at a cut value `c`; examples with
/// `x <= c` go left. Cut values are feature values from the training data, so
/// models stay in raw feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct Binning {
    max_bins: usize,
    num_examples: usize,
    cuts: Vec<Vec<f64>>,
    codes: Vec<u16>,
}

impl Binning {
    pub fn quantile(dataset: &Dataset, index: &SortedIndex, max_bins: usize) -> Result<Self> {
        if !(2..=256).contains(&max_bins) {
            return Err(Error::Config(format!("bins must be in 2..=256, got {max_bins}")));
        }
        let n = dataset.num_examples();
        let mut cuts = Vec::with_capacity(dataset.num_features());
        let mut codes = vec![0u16; n * dataset.num_features()];
        for f in 0..dataset.num_features() {
            let col = dataset.column(f);
            let order = index.order(f);
            let mut fc: Vec<f64> = Vec::new();
            for b in 1..max_bins {
                let rank = (b * n) / max_bins;
                if rank == 0 {
                    continue;
                }
                let v = col[order[rank - 1] as usize];
                if fc.last().is_none_or(|&last| v > last) {
                    fc.push(v);
                }
            }
            // the top cut would put everything left
            let max = col[order[n - 1] as usize];
            if fc.last() == Some(&max) {
                fc.pop();
            }
            for i in 0..n {
                codes[f * n + i] = fc.partition_point(|&c| c < col[i]) as u16;
            }
            cuts.push(fc);
        }
        Ok(Self {
            max_bins,
            num_examples: n,
            cuts,
            codes,
        })
    }

    pub fn max_bins(&self) -> usize {
        self.max_bins
    }

    pub fn cuts(&self, f: usize) -> &[f64] {
        &self.cuts[f]
    }

    #[inline]
    pub fn code(&self, i: usize, f: usize) -> u16 {
        self.codes[f * self.num_examples + i]
    }
}
