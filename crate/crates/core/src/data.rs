//! LIBSVM-format sparse datasets: parsing, writing, stratified splitting and
//! `[-1, 1]` feature scaling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparse feature vector with 1-based, strictly increasing indices.
///
/// Zero entries are never stored; a missing index means the value 0.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseVector {
    entries: Vec<(u32, f64)>,
    dim: usize,
}

impl SparseVector {
    pub fn new(entries: Vec<(u32, f64)>, dim: usize) -> Result<Self> {
        let mut prev = 0u32;
        for &(idx, _) in &entries {
            if idx == 0 || idx <= prev {
                return Err(Error::InvalidParameter(format!(
                    "sparse indices must be positive and strictly increasing (saw {idx} after {prev})"
                )));
            }
            if idx as usize > dim {
                return Err(Error::InvalidParameter(format!(
                    "index {idx} exceeds dimension {dim}"
                )));
            }
            prev = idx;
        }
        let entries = entries.into_iter().filter(|&(_, v)| v != 0.0).collect();
        Ok(Self { entries, dim })
    }

    /// Builds a vector from dense values; position `p` becomes index `p + 1`.
    pub fn from_dense(values: &[f64]) -> Self {
        let entries = values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i as u32 + 1, v))
            .collect();
        Self {
            entries,
            dim: values.len(),
        }
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Value at 1-based index `idx` (0 when absent).
    pub fn get(&self, idx: u32) -> f64 {
        match self.entries.binary_search_by_key(&idx, |&(i, _)| i) {
            Ok(pos) => self.entries[pos].1,
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i as usize - 1] = v;
        }
        out
    }

    pub fn norm_sq(&self) -> f64 {
        self.entries.iter().map(|&(_, v)| v * v).sum()
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (a, b) = (&self.entries, &other.entries);
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    /// Dot product against a dense vector indexed from 0.
    pub fn dot_dense(&self, dense: &[f64]) -> f64 {
        self.entries
            .iter()
            .filter(|&&(i, _)| (i as usize) <= dense.len())
            .map(|&(i, v)| v * dense[i as usize - 1])
            .sum()
    }

    /// Squared Euclidean distance computed by merging, without cancellation.
    pub fn squared_distance(&self, other: &SparseVector) -> f64 {
        let (a, b) = (&self.entries, &other.entries);
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < a.len() || j < b.len() {
            let d = if j >= b.len() || (i < a.len() && a[i].0 < b[j].0) {
                i += 1;
                a[i - 1].1
            } else if i >= a.len() || b[j].0 < a[i].0 {
                j += 1;
                b[j - 1].1
            } else {
                i += 1;
                j += 1;
                a[i - 1].1 - b[j - 1].1
            };
            acc += d * d;
        }
        acc
    }
}

/// Maps internal class indices `1..=c` back to the labels found in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    /// Internal classes are assigned in increasing numeric order of the
    /// original labels.
    pub fn from_labels(labels: &[f64]) -> Self {
        let mut uniq: Vec<f64> = labels.to_vec();
        uniq.sort_by(|a, b| a.partial_cmp(b).expect("labels are finite"));
        uniq.dedup();
        Self {
            names: uniq.iter().map(|v| format!("{v}")).collect(),
        }
    }

    pub fn identity(class_count: usize) -> Self {
        Self {
            names: (1..=class_count).map(|k| k.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Original label text of internal class `class` (1-based).
    pub fn name(&self, class: usize) -> &str {
        &self.names[class - 1]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Internal class index of an original label.
    pub fn class_of(&self, label: f64) -> Option<usize> {
        let key = format!("{label}");
        self.names.iter().position(|n| *n == key).map(|p| p + 1)
    }
}

/// Labeled sparse instances over classes `1..=class_count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseDataset {
    instances: Vec<SparseVector>,
    labels: Vec<usize>,
    class_count: usize,
    feature_dim: usize,
    label_map: LabelMap,
}

impl SparseDataset {
    pub fn new(
        instances: Vec<SparseVector>,
        labels: Vec<usize>,
        label_map: LabelMap,
    ) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if instances.len() != labels.len() {
            return Err(Error::InvalidParameter(format!(
                "{} instances but {} labels",
                instances.len(),
                labels.len()
            )));
        }
        let class_count = label_map.len();
        if let Some(bad) = labels.iter().find(|&&y| y == 0 || y > class_count) {
            return Err(Error::InvalidParameter(format!(
                "label {bad} outside 1..={class_count}"
            )));
        }
        let feature_dim = instances.iter().map(|x| x.dim()).max().unwrap_or(0);
        let instances = instances
            .into_iter()
            .map(|mut x| {
                x.dim = feature_dim;
                x
            })
            .collect();
        Ok(Self {
            instances,
            labels,
            class_count,
            feature_dim,
            label_map,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[SparseVector] {
        &self.instances
    }

    pub fn instance(&self, i: usize) -> &SparseVector {
        &self.instances[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn label_map(&self) -> &LabelMap {
        &self.label_map
    }

    /// Instance count per class; entry `k - 1` belongs to class `k`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y - 1] += 1;
        }
        counts
    }

    /// Indices of instances whose label is in `classes`, in dataset order.
    pub fn indices_of_classes(&self, classes: &[usize]) -> Vec<usize> {
        let mut member = vec![false; self.class_count + 1];
        for &k in classes {
            member[k] = true;
        }
        (0..self.len()).filter(|&i| member[self.labels[i]]).collect()
    }

    /// Copies the listed rows; class indices and the label map are kept.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            instances: rows.iter().map(|&i| self.instances[i].clone()).collect(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            feature_dim: self.feature_dim,
            label_map: self.label_map.clone(),
        })
    }

    /// Fails unless every class `1..=c` has at least one instance.
    pub fn require_all_classes(&self) -> Result<()> {
        match self.class_counts().iter().position(|&n| n == 0) {
            Some(k) => Err(Error::Stratification(format!(
                "class {} (label {}) has no training instance",
                k + 1,
                self.label_map.name(k + 1)
            ))),
            None => Ok(()),
        }
    }

    pub fn with_feature_dim(mut self, dim: usize) -> Self {
        self.feature_dim = dim.max(self.feature_dim);
        for x in &mut self.instances {
            x.dim = self.feature_dim;
        }
        self
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParseOptions<'a> {
    /// Feature dimension override; must be at least the largest index seen.
    pub dim: Option<usize>,
    /// Reuse an existing label map (e.g. the training map for a test file).
    pub label_map: Option<&'a LabelMap>,
}

pub fn parse_libsvm(text: &str) -> Result<SparseDataset> {
    parse_libsvm_with(text, &ParseOptions::default())
}

pub fn parse_libsvm_with(text: &str, opts: &ParseOptions<'_>) -> Result<SparseDataset> {
    let mut raw_labels = Vec::new();
    let mut rows = Vec::new();
    let mut max_index = 0usize;

    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().expect("nonempty line has a token");
        let label: f64 = label_tok
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("malformed label `{label_tok}`"),
            })?;

        let mut entries = Vec::new();
        let mut prev = 0u32;
        for tok in tokens {
            let (idx, val) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("malformed token `{tok}`"),
            })?;
            let idx: u32 = idx.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("malformed index in `{tok}`"),
            })?;
            let val: f64 = val
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: format!("malformed value in `{tok}`"),
                })?;
            if idx == 0 || idx <= prev {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("index {idx} is not strictly increasing (previous {prev})"),
                });
            }
            prev = idx;
            max_index = max_index.max(idx as usize);
            if val != 0.0 {
                entries.push((idx, val));
            }
        }
        raw_labels.push(label);
        rows.push(entries);
    }

    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let dim = match opts.dim {
        Some(d) if d < max_index => {
            return Err(Error::InvalidParameter(format!(
                "dimension override {d} is smaller than the largest index {max_index}"
            )))
        }
        Some(d) => d,
        None => max_index,
    };

    let label_map = match opts.label_map {
        Some(m) => m.clone(),
        None => LabelMap::from_labels(&raw_labels),
    };
    let labels = raw_labels
        .iter()
        .map(|&l| {
            label_map
                .class_of(l)
                .ok_or_else(|| Error::UnknownLabel(format!("{l}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let instances = rows
        .into_iter()
        .map(|entries| SparseVector { entries, dim })
        .collect();
    SparseDataset::new(instances, labels, label_map)
}

pub fn read_libsvm(path: impl AsRef<Path>, opts: &ParseOptions<'_>) -> Result<SparseDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_libsvm_with(&text, opts)
}

/// Serializes with original labels; values use the shortest round-trip form.
pub fn to_libsvm_string(d: &SparseDataset) -> String {
    let mut out = String::new();
    for (x, &y) in d.instances.iter().zip(&d.labels) {
        out.push_str(d.label_map.name(y));
        for &(i, v) in x.entries() {
            let _ = write!(out, " {i}:{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_libsvm(d: &SparseDataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_libsvm_string(d))?;
    Ok(())
}

fn rows_by_class(d: &SparseDataset) -> BTreeMap<usize, Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in d.labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    by_class
}

/// Stratified random split: `round(n * fraction)` training rows shared among
/// classes in proportion to their sizes (largest remainder first).
pub fn split_train_test(
    d: &SparseDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(SparseDataset, SparseDataset)> {
    let (train, test) = split_indices(d, train_fraction, seed)?;
    if test.is_empty() {
        return Err(Error::Stratification(
            "split leaves the test side empty".into(),
        ));
    }
    Ok((d.subset(&train)?, d.subset(&test)?))
}

/// Index form of [`split_train_test`]; both lists are sorted.
pub fn split_indices(
    d: &SparseDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<(usize, Vec<usize>)> = rows_by_class(d).into_iter().collect();
    // Largest-remainder allocation keeps the total at round(n * fraction).
    let exact: Vec<f64> = groups
        .iter()
        .map(|(_, rows)| rows.len() as f64 * train_fraction)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let target = (d.len() as f64 * train_fraction).round() as usize;
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(quota.iter().sum());
    for &k in &order {
        if missing == 0 {
            break;
        }
        if quota[k] < groups[k].1.len() {
            quota[k] += 1;
            missing -= 1;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ((class, mut rows), n_train) in groups.into_iter().zip(quota) {
        rows.shuffle(&mut rng);
        if n_train == 0 {
            return Err(Error::Stratification(format!(
                "class {} (label {}) with {} instance(s) gets no training instance at fraction {}",
                class,
                d.label_map.name(class),
                rows.len(),
                train_fraction
            )));
        }
        train.extend_from_slice(&rows[..n_train]);
        test.extend_from_slice(&rows[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Stratified assignment of rows to `k` folds. Each returned list holds the
/// held-out rows of one fold, sorted.
pub fn stratified_folds(d: &SparseDataset, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 folds, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    for (offset, (class, mut rows)) in rows_by_class(d).into_iter().enumerate() {
        if rows.len() < 2 {
            return Err(Error::Stratification(format!(
                "class {} (label {}) has {} instance(s); some fold would train without it",
                class,
                d.label_map.name(class),
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        for (pos, row) in rows.into_iter().enumerate() {
            folds[(offset + pos) % k].push(row);
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    if folds.iter().any(|f| f.is_empty()) {
        return Err(Error::Stratification(format!(
            "{} instances cannot fill {k} folds",
            d.len()
        )));
    }
    Ok(folds)
}

/// Per-feature affine map to `[-1, 1]` fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ScalingRecord {
    /// Implicit zeros count towards min and max.
    pub fn fit(train: &SparseDataset) -> Self {
        let dim = train.feature_dim();
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        let mut nnz = vec![0usize; dim];
        for x in train.instances() {
            for &(i, v) in x.entries() {
                let p = i as usize - 1;
                min[p] = min[p].min(v);
                max[p] = max[p].max(v);
                nnz[p] += 1;
            }
        }
        for p in 0..dim {
            if nnz[p] < train.len() {
                min[p] = min[p].min(0.0);
                max[p] = max[p].max(0.0);
            }
        }
        Self { min, max }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Scales one value of 0-based feature `p`. Constant features map to 0;
    /// values outside the training range extrapolate.
    pub fn scale_value(&self, p: usize, v: f64) -> f64 {
        let (lo, hi) = (self.min[p], self.max[p]);
        if hi > lo {
            -1.0 + 2.0 * (v - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    /// Features beyond the fitted dimension are dropped.
    pub fn apply(&self, x: &SparseVector) -> SparseVector {
        let dense: Vec<f64> = (0..self.dim())
            .map(|p| self.scale_value(p, x.get(p as u32 + 1)))
            .collect();
        SparseVector::from_dense(&dense)
    }

    pub fn apply_dataset(&self, d: &SparseDataset) -> SparseDataset {
        SparseDataset {
            instances: d.instances.iter().map(|x| self.apply(x)).collect(),
            labels: d.labels.clone(),
            class_count: d.class_count,
            feature_dim: self.dim(),
            label_map: d.label_map.clone(),
        }
    }
}

pub fn scale_features(
    train: &SparseDataset,
    test: &SparseDataset,
) -> (SparseDataset, SparseDataset, ScalingRecord) {
    let record = ScalingRecord::fit(train);
    (
        record.apply_dataset(train),
        record.apply_dataset(test),
        record,
    )
}
