//! Sparse labeled datasets in the `<label> <idx>:<val> ...` text convention.
//!
//! ```text
//! # comment lines and blank lines are ignored
//! sports 1:0.5 7:-1.25
//! 2 3:1 4:0.75   # trailing comments too
//! ```
//!
//! Label tokens are arbitrary strings, densified to `0..K` in order of first
//! appearance. Feature indices are 1-based unless `zero_based` is set.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense class index <-> original label token.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut map = Self::new();
        for n in names {
            let n = n.into();
            if map.index.contains_key(&n) {
                return Err(Error::InvalidArg(format!("duplicate label {n:?}")));
            }
            map.intern(&n);
        }
        Ok(map)
    }

    /// Labels `"0"`, `"1"`, ... for synthetic data.
    pub fn numbered(num_classes: usize) -> Self {
        Self::from_names((0..num_classes).map(|k| k.to_string())).unwrap()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, class: usize) -> Option<&str> {
        self.names.get(class).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn intern(&mut self, name: &str) -> usize {
        if let Some(&k) = self.index.get(name) {
            return k;
        }
        let k = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), k);
        k
    }

    /// One `original<TAB>dense` pair per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, n) in self.names.iter().enumerate() {
            writeln!(s, "{n}\t{k}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut names = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: &str| Error::Parse {
                line: i + 1,
                message: message.to_string(),
            };
            let (name, dense) = line.rsplit_once('\t').ok_or_else(|| parse_err("expected original<TAB>dense"))?;
            let dense: usize = dense.parse().map_err(|_| parse_err("bad dense index"))?;
            if dense != names.len() {
                return Err(parse_err("dense indices must be listed in order from 0"));
            }
            names.push(name.to_string());
        }
        Self::from_names(names)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Borrowed view of one sparse row.
#[derive(Debug, Clone, Copy)]
pub struct SparseRow<'a> {
    pub indices: &'a [u32],
    pub values: &'a [f64],
}

impl<'a> SparseRow<'a> {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + 'a {
        self.indices
            .iter()
            .zip(self.values)
            .map(|(&i, &v)| (i as usize, v))
    }

    /// Value of feature `f`, zero when absent.
    pub fn get(&self, f: usize) -> f64 {
        match self.indices.binary_search(&(f as u32)) {
            Ok(p) => self.values[p],
            Err(_) => 0.0,
        }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

/// Row-sparse (CSR) feature matrix with dense class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDataset {
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
    labels: Vec<usize>,
    num_features: usize,
    label_map: LabelMap,
}

impl SparseDataset {
    /// Builds a dataset from `(feature, value)` rows, checking that indices are
    /// strictly increasing and below `num_features`, values are finite, and
    /// labels index into `label_map`.
    pub fn from_rows(
        rows: Vec<Vec<(usize, f64)>>,
        labels: Vec<usize>,
        num_features: usize,
        label_map: LabelMap,
    ) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                what: "rows vs labels",
                expected: labels.len(),
                found: rows.len(),
            });
        }
        if num_features > u32::MAX as usize {
            return Err(Error::InvalidArg("too many features".into()));
        }
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        indptr.push(0);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (i, row) in rows.into_iter().enumerate() {
            let mut prev: Option<usize> = None;
            for (f, v) in row {
                if f >= num_features {
                    return Err(Error::IndexOutOfRange {
                        index: f,
                        bound: num_features,
                    });
                }
                if prev.is_some_and(|p| f <= p) {
                    return Err(Error::InvalidArg(format!(
                        "row {i}: feature indices must be strictly increasing"
                    )));
                }
                if !v.is_finite() {
                    return Err(Error::NonFiniteInput("feature value"));
                }
                prev = Some(f);
                indices.push(f as u32);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        for &y in &labels {
            if y >= label_map.len() {
                return Err(Error::IndexOutOfRange {
                    index: y,
                    bound: label_map.len(),
                });
            }
        }
        Ok(Self {
            indptr,
            indices,
            values,
            labels,
            num_features,
            label_map,
        })
    }

    /// Dense rows, storing every entry (zeros included).
    pub fn from_dense(rows: &[Vec<f64>], labels: Vec<usize>, label_map: LabelMap) -> Result<Self> {
        let num_features = rows.first().map_or(0, Vec::len);
        let sparse = rows
            .iter()
            .map(|r| r.iter().copied().enumerate().collect())
            .collect();
        Self::from_rows(sparse, labels, num_features, label_map)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn num_features(&self) -> usize {
        self.num_features
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.label_map.len()
    }

    #[inline]
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label_map(&self) -> &LabelMap {
        &self.label_map
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> SparseRow<'_> {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        SparseRow {
            indices: &self.indices[a..b],
            values: &self.values[a..b],
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Copies the selected rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> SparseDataset {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        indptr.push(0);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        let mut labels = Vec::with_capacity(rows.len());
        for &i in rows {
            let r = self.row(i);
            indices.extend_from_slice(r.indices);
            values.extend_from_slice(r.values);
            indptr.push(indices.len());
            labels.push(self.labels[i]);
        }
        SparseDataset {
            indptr,
            indices,
            values,
            labels,
            num_features: self.num_features,
            label_map: self.label_map.clone(),
        }
    }

    /// Same rows with labels replaced; used for permutation baselines.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<SparseDataset> {
        if labels.len() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "labels",
                expected: self.len(),
                found: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_classes()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                bound: self.num_classes(),
            });
        }
        Ok(SparseDataset {
            labels,
            ..self.clone()
        })
    }

    /// Serializes in the text format, features written 1-based unless
    /// `zero_based`.
    pub fn to_text(&self, zero_based: bool) -> String {
        let shift = usize::from(!zero_based);
        let mut s = String::new();
        for i in 0..self.len() {
            s.push_str(self.label_map.name(self.labels[i]).unwrap());
            for (f, v) in self.row(i).iter() {
                write!(s, " {}:{}", f + shift, v).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path, zero_based: bool) -> Result<()> {
        fs::write(path, self.to_text(zero_based))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions<'a> {
    /// Feature indices in the file start at 0 instead of 1.
    pub zero_based: bool,
    /// Lower bound on the feature count (e.g. the training width).
    pub min_features: usize,
    /// Resolve labels against an existing mapping instead of building one;
    /// unknown labels are rejected.
    pub label_map: Option<&'a LabelMap>,
}

pub fn load_sparse_text(path: &Path) -> Result<SparseDataset> {
    load_sparse_text_with(path, &LoadOptions::default())
}

pub fn load_sparse_text_with(path: &Path, options: &LoadOptions<'_>) -> Result<SparseDataset> {
    parse_sparse_text(&fs::read_to_string(path)?, options)
}

pub fn parse_sparse_text(text: &str, options: &LoadOptions<'_>) -> Result<SparseDataset> {
    let shift = usize::from(!options.zero_based);
    let mut label_map = options.label_map.cloned().unwrap_or_default();
    let fixed_labels = options.label_map.is_some();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut max_feature: Option<usize> = None;

    for (line_idx, raw) in text.lines().enumerate() {
        let line_no = line_idx + 1;
        let err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let content = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let mut tokens = content.split_whitespace();
        let Some(label) = tokens.next() else {
            continue;
        };
        if label.contains(':') {
            return Err(err(format!("missing label before {label:?}")));
        }
        let class = if fixed_labels {
            label_map
                .get(label)
                .ok_or_else(|| err(format!("unknown label {label:?}")))?
        } else {
            label_map.intern(label)
        };

        let mut row: Vec<(usize, f64)> = Vec::new();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| err(format!("expected <index>:<value>, found {tok:?}")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| err(format!("bad feature index {idx:?}")))?;
            let val: f64 = val
                .parse()
                .map_err(|_| err(format!("bad feature value {val:?}")))?;
            if !val.is_finite() {
                return Err(err(format!("non-finite feature value {val}")));
            }
            let f = idx
                .checked_sub(shift)
                .ok_or_else(|| err(format!("feature index {idx} below 1")))?;
            if f >= u32::MAX as usize {
                return Err(err(format!("feature index {idx} too large")));
            }
            if let Some(&(prev, _)) = row.last() {
                if f <= prev {
                    return Err(err(format!(
                        "feature indices must be strictly increasing ({} then {idx})",
                        prev + shift
                    )));
                }
            }
            row.push((f, val));
        }
        if let Some(&(last, _)) = row.last() {
            max_feature = Some(max_feature.map_or(last, |m| m.max(last)));
        }
        rows.push(row);
        labels.push(class);
    }

    if rows.is_empty() {
        return Err(Error::EmptyFile);
    }
    let num_features = max_feature.map_or(0, |m| m + 1).max(options.min_features);
    SparseDataset::from_rows(rows, labels, num_features, label_map)
}

/// Per-class shuffled split into (train, validation).
///
/// Each class with `n` instances contributes `round(n * valid_fraction)`
/// instances to validation, clamped to `1..=n-1`, so every class appears on
/// both sides. Rows keep their original relative order.
pub fn stratified_split(
    data: &SparseDataset,
    valid_fraction: f64,
    seed: u64,
) -> Result<(SparseDataset, SparseDataset)> {
    if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
        return Err(Error::InvalidArg(format!(
            "validation fraction must be in (0, 1), got {valid_fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for (i, &y) in data.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < 2 {
            return Err(Error::TooFewInstances {
                class,
                count: members.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for mut members in by_class {
        let n = members.len();
        let n_valid = ((n as f64 * valid_fraction).round() as usize).clamp(1, n - 1);
        members.shuffle(&mut rng);
        valid.extend_from_slice(&members[..n_valid]);
        train.extend_from_slice(&members[n_valid..]);
    }
    train.sort_unstable();
    valid.sort_unstable();
    Ok((data.subset(&train), data.subset(&valid)))
}
