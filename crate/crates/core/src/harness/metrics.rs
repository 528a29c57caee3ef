//! Selection accuracy, confusion, accuracy proxy and forgetting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::DomainId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    /// Fraction of correctly routed samples.
    pub accuracy: f64,
    /// `confusion[i][j]`: percentage of true-domain-`i` samples routed to `j`.
    pub confusion: Vec<Vec<f64>>,
    pub counts: Vec<Vec<u64>>,
}

impl SelectionMetrics {
    /// Per-domain accuracy (diagonal over row totals); `None` for empty rows.
    pub fn domain_accuracy(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect()
    }
}

pub fn compute_selection_metrics(
    truth: &[DomainId],
    predicted: &[DomainId],
    n_domains: usize,
) -> Result<SelectionMetrics> {
    if truth.len() != predicted.len() {
        return Err(Error::LengthMismatch { left: truth.len(), right: predicted.len() });
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut counts = vec![vec![0u64; n_domains]; n_domains];
    let mut correct = 0usize;
    for (t, p) in truth.iter().zip(predicted) {
        for l in [t, p] {
            if l.0 >= n_domains {
                return Err(Error::BadLabel { label: l.0, n_domains });
            }
        }
        counts[t.0][p.0] += 1;
        correct += usize::from(t == p);
    }
    let confusion = counts
        .iter()
        .map(|row| {
            let n: u64 = row.iter().sum();
            row.iter().map(|c| if n == 0 { 0.0 } else { 100.0 * *c as f64 / n as f64 }).collect()
        })
        .collect();
    Ok(SelectionMetrics { accuracy: correct as f64 / truth.len() as f64, confusion, counts })
}

/// `a[i][j]`: downstream accuracy when the true domain is `i` and the
/// parameter set of domain `j` is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertMatrix {
    a: Vec<Vec<f64>>,
}

impl ExpertMatrix {
    pub fn new(a: Vec<Vec<f64>>) -> Result<Self> {
        let t = a.len();
        if t == 0 {
            return Err(Error::EmptyInput);
        }
        for (i, row) in a.iter().enumerate() {
            if row.len() != t {
                return Err(Error::dims(t, row.len()));
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidConfig(format!("expert row {i} has entries outside [0, 1]")));
            }
            if row.iter().any(|v| *v > row[i]) {
                return Err(Error::InvalidConfig(format!("expert row {i}: off-diagonal entry exceeds the diagonal")));
            }
        }
        Ok(Self { a })
    }

    pub fn uniform(t: usize, diag: f64, off: f64) -> Result<Self> {
        Self::new((0..t).map(|i| (0..t).map(|j| if i == j { diag } else { off }).collect()).collect())
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.a
    }

    /// Leading `t x t` block, for sessions that have seen `t` domains.
    pub fn leading(&self, t: usize) -> Result<Self> {
        if t == 0 || t > self.a.len() {
            return Err(Error::dims(self.a.len(), t));
        }
        Ok(Self { a: self.a[..t].iter().map(|r| r[..t].to_vec()).collect() })
    }
}

fn check_counts(counts: &[Vec<u64>], expert: &ExpertMatrix) -> Result<f64> {
    if counts.len() != expert.len() {
        return Err(Error::dims(expert.len(), counts.len()));
    }
    if let Some(r) = counts.iter().find(|r| r.len() != expert.len()) {
        return Err(Error::dims(expert.len(), r.len()));
    }
    let total: u64 = counts.iter().flatten().sum();
    if total == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(total as f64)
}

/// `sum_ij P(true = i, selected = j) a[i][j]`.
pub fn compute_accuracy_proxy(counts: &[Vec<u64>], expert: &ExpertMatrix) -> Result<f64> {
    let total = check_counts(counts, expert)?;
    let mut acc = 0.0;
    for (row, a) in counts.iter().zip(expert.rows()) {
        for (c, v) in row.iter().zip(a) {
            acc += *c as f64 * v;
        }
    }
    Ok(acc / total)
}

/// `sum_i P(true = i) a[i][i]`: the proxy for a selector that is always right.
pub fn oracle_accuracy(counts: &[Vec<u64>], expert: &ExpertMatrix) -> Result<f64> {
    let total = check_counts(counts, expert)?;
    let mut acc = 0.0;
    for (i, row) in counts.iter().enumerate() {
        acc += row.iter().sum::<u64>() as f64 * expert.rows()[i][i];
    }
    Ok(acc / total)
}

/// `history[s][tau]` is the accuracy on domain `tau` after session `s`
/// (0-based, so row `s` covers domains `0..=s`). Returns the mean change
/// from just-learned to final accuracy over the earlier domains; negative
/// values mean forgetting.
pub fn compute_forgetting(history: &[Vec<f64>]) -> Result<f64> {
    let t = history.len();
    if t < 2 {
        return Err(Error::NotEnoughSessions(t));
    }
    for (s, row) in history.iter().enumerate() {
        if row.len() <= s.min(t - 1) {
            return Err(Error::LengthMismatch { left: row.len(), right: s + 1 });
        }
    }
    let last = &history[t - 1];
    let sum: f64 = (0..t - 1).map(|tau| last[tau] - history[tau][tau]).sum();
    Ok(sum / (t - 1) as f64)
}
