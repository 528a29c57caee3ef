//! Shared domain types.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `n_rows x dim` row-major matrix of finite feature values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    n_rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n_rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("feature dimension must be positive".into()));
        }
        if data.len() != n_rows * dim {
            return Err(Error::LengthMismatch { left: data.len(), right: n_rows * dim });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { n_rows, dim, data })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(0, dim, Vec::new())
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).ok_or(Error::EmptyInput)?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::dims(dim, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.n_rows == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Gathers the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { n_rows: idx.len(), dim: self.dim, data }
    }

    /// Stacks matrices vertically. All parts must share `dim`.
    pub fn vstack(parts: &[&FeatureMatrix]) -> Result<Self> {
        let dim = parts.first().ok_or(Error::EmptyInput)?.dim;
        let mut data = Vec::new();
        let mut n_rows = 0;
        for p in parts {
            if p.dim != dim {
                return Err(Error::dims(dim, p.dim));
            }
            data.extend_from_slice(&p.data);
            n_rows += p.n_rows;
        }
        Ok(Self { n_rows, dim, data })
    }

    /// Per-column mean. Errors on an empty matrix.
    pub fn column_means(&self) -> Result<Vec<f64>> {
        if self.n_rows == 0 {
            return Err(Error::EmptyInput);
        }
        let mut mean = vec![0.0; self.dim];
        for r in self.rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        let n = self.n_rows as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Ok(mean)
    }
}

/// 0-based domain index. Reports add one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DomainId(pub usize);

impl DomainId {
    pub fn index(self) -> usize {
        self.0
    }

    /// 1-based number used in human-facing output.
    pub fn display_number(self) -> usize {
        self.0 + 1
    }
}

/// Which backbone level a feature set was taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LevelId {
    /// An arbitrary block index, for layer-fusion ablations.
    Layer(u32),
    Mid,
    Last,
}

impl LevelId {
    /// Stable integer tag used when deriving random sub-streams.
    pub fn tag(self) -> u64 {
        match self {
            LevelId::Mid => 1 << 32,
            LevelId::Last => 2 << 32,
            LevelId::Layer(n) => n as u64,
        }
    }
}

impl fmt::Display for LevelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LevelId::Mid => f.write_str("mid"),
            LevelId::Last => f.write_str("last"),
            LevelId::Layer(n) => write!(f, "layer{n}"),
        }
    }
}

impl FromStr for LevelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mid" => Ok(LevelId::Mid),
            "last" => Ok(LevelId::Last),
            _ => s
                .strip_prefix("layer")
                .and_then(|n| n.parse().ok())
                .map(LevelId::Layer)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown level '{s}'"))),
        }
    }
}

impl Serialize for LevelId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LevelId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Multi-level features with one domain label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    levels: BTreeMap<LevelId, FeatureMatrix>,
    labels: Vec<DomainId>,
}

impl LabeledBatch {
    /// Every level must have one row per label. `n_domains` bounds the labels.
    pub fn new(levels: BTreeMap<LevelId, FeatureMatrix>, labels: Vec<DomainId>, n_domains: usize) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::IncompleteStore("batch has no levels".into()));
        }
        for m in levels.values() {
            if m.n_rows() != labels.len() {
                return Err(Error::LengthMismatch { left: m.n_rows(), right: labels.len() });
            }
        }
        if let Some(bad) = labels.iter().find(|l| l.0 >= n_domains) {
            return Err(Error::BadLabel { label: bad.0, n_domains });
        }
        Ok(Self { levels, labels })
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[DomainId] {
        &self.labels
    }

    pub fn levels(&self) -> &BTreeMap<LevelId, FeatureMatrix> {
        &self.levels
    }

    pub fn level(&self, id: LevelId) -> Result<&FeatureMatrix> {
        self.levels.get(&id).ok_or_else(|| Error::IncompleteStore(format!("batch is missing level {id}")))
    }

    pub fn dim(&self) -> usize {
        self.levels.values().next().map_or(0, FeatureMatrix::dim)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            levels: self.levels.iter().map(|(k, m)| (*k, m.select_rows(idx))).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Concatenates batches that share the same level set.
    pub fn concat(parts: &[&LabeledBatch]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyInput)?;
        let mut levels = BTreeMap::new();
        for id in first.levels.keys() {
            let mats = parts.iter().map(|p| p.level(*id)).collect::<Result<Vec<_>>>()?;
            levels.insert(*id, FeatureMatrix::vstack(&mats)?);
        }
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        Ok(Self { levels, labels })
    }
}

/// A probability vector summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub const SUM_TOL: f64 = 1e-9;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::BadWeights("empty probability vector".into()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::BadWeights(format!("entry {v} outside [0, 1]")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::BadWeights(format!("entries sum to {sum}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
