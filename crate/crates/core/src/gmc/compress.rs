use std::fmt;

use serde::{Deserialize, Serialize};

use super::{fit_gmm, CovKind, Covariance, EmConfig, GmmModel};
use crate::error::{Error, Result};
use crate::math::{sign_normalize, symmetric_eigen};
use crate::types::FeatureMatrix;

/// Number of stored real parameters.
pub trait ParamCount {
    fn param_count(&self) -> usize;
}

impl ParamCount for GmmModel {
    fn param_count(&self) -> usize {
        let (k, d) = (self.k(), self.dim());
        let cov = match self.cov_kind() {
            CovKind::Diagonal => k * d,
            CovKind::Full => k * d * (d + 1) / 2,
        };
        (k - 1) + k * d + cov
    }
}

/// Per-dimension mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanStdModel {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MeanStdModel {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::dims(mean.len(), std.len()));
        }
        if mean.is_empty() {
            return Err(Error::EmptyInput);
        }
        if std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidConfig("mean/std entries must be finite, std >= 0".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

impl ParamCount for MeanStdModel {
    fn param_count(&self) -> usize {
        2 * self.dim()
    }
}

/// Top principal axes of a feature set with the data variance along each.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    pub components: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl PcaModel {
    pub fn new(mean: Vec<f64>, components: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || components.is_empty() {
            return Err(Error::BadComponentCount { n: components.len(), max: d });
        }
        if components.len() != variances.len() {
            return Err(Error::LengthMismatch { left: components.len(), right: variances.len() });
        }
        if let Some(c) = components.iter().find(|c| c.len() != d) {
            return Err(Error::dims(d, c.len()));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("PCA variances must be finite and >= 0".into()));
        }
        Ok(Self { mean, components, variances })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }
}

impl ParamCount for PcaModel {
    fn param_count(&self) -> usize {
        let (d, n) = (self.dim(), self.n_components());
        d + n * d + n
    }
}

pub fn fit_meanstd(x: &FeatureMatrix) -> Result<MeanStdModel> {
    let mean = x.column_means()?;
    let mut var = vec![0.0; x.dim()];
    for r in x.rows() {
        for ((v, a), m) in var.iter_mut().zip(r).zip(&mean) {
            *v += (a - m) * (a - m);
        }
    }
    let n = x.n_rows() as f64;
    let std = var.iter().map(|v| (v / n).sqrt()).collect();
    MeanStdModel::new(mean, std)
}

/// Principal axes of the centered data, population covariance (divide by n).
/// Axes are sign-normalized so their first nonzero coordinate is positive.
pub fn fit_pca(x: &FeatureMatrix, n_components: usize) -> Result<PcaModel> {
    let max = x.n_rows().min(x.dim());
    if n_components == 0 || n_components > max {
        return Err(Error::BadComponentCount { n: n_components, max });
    }
    let d = x.dim();
    let mean = x.column_means()?;
    let mut cov = vec![0.0; d * d];
    let mut diff = vec![0.0; d];
    for r in x.rows() {
        diff.iter_mut().zip(r.iter().zip(&mean)).for_each(|(df, (a, m))| *df = a - m);
        for a in 0..d {
            for b in 0..=a {
                cov[a * d + b] += diff[a] * diff[b];
            }
        }
    }
    let n = x.n_rows() as f64;
    for a in 0..d {
        for b in 0..=a {
            cov[a * d + b] /= n;
            cov[b * d + a] = cov[a * d + b];
        }
    }
    let (vals, mut vecs) = symmetric_eigen(&cov, d);
    vecs.truncate(n_components);
    for v in vecs.iter_mut() {
        sign_normalize(v, 1e-12);
    }
    let variances = vals.into_iter().take(n_components).map(|v| v.max(0.0)).collect();
    PcaModel::new(mean, vecs, variances)
}

/// Which summary to keep for a domain's features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CompressorKind {
    Gmm { k: usize, cov: CovKind },
    MeanStd,
    Pca { n: usize },
}

impl Default for CompressorKind {
    fn default() -> Self {
        CompressorKind::Gmm { k: 2, cov: CovKind::Diagonal }
    }
}

impl fmt::Display for CompressorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompressorKind::Gmm { k, cov } => write!(f, "GMC(K={k},{})", cov.as_str()),
            CompressorKind::MeanStd => f.write_str("Mean&std"),
            CompressorKind::Pca { n } => write!(f, "PCA(N={n})"),
        }
    }
}

/// A stored per-domain, per-level summary.
#[derive(Clone, Debug, PartialEq)]
pub enum CompressedModel {
    Gmm(GmmModel),
    MeanStd(MeanStdModel),
    Pca(PcaModel),
}

impl CompressedModel {
    pub fn dim(&self) -> usize {
        match self {
            CompressedModel::Gmm(m) => m.dim(),
            CompressedModel::MeanStd(m) => m.dim(),
            CompressedModel::Pca(m) => m.dim(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            CompressedModel::Gmm(_) => "gmm",
            CompressedModel::MeanStd(_) => "meanstd",
            CompressedModel::Pca(_) => "pca",
        }
    }
}

impl ParamCount for CompressedModel {
    fn param_count(&self) -> usize {
        match self {
            CompressedModel::Gmm(m) => m.param_count(),
            CompressedModel::MeanStd(m) => m.param_count(),
            CompressedModel::Pca(m) => m.param_count(),
        }
    }
}

pub fn fit_compressor(x: &FeatureMatrix, kind: CompressorKind, em: &EmConfig) -> Result<CompressedModel> {
    Ok(match kind {
        CompressorKind::Gmm { k, cov } => {
            let cfg = EmConfig { cov_kind: cov, ..em.clone() };
            CompressedModel::Gmm(fit_gmm(x, k, &cfg)?.model)
        }
        CompressorKind::MeanStd => CompressedModel::MeanStd(fit_meanstd(x)?),
        CompressorKind::Pca { n } => CompressedModel::Pca(fit_pca(x, n)?),
    })
}

impl Covariance {
    /// Axis-aligned covariance in either representation.
    pub fn from_variances(kind: CovKind, var: &[f64]) -> Covariance {
        match kind {
            CovKind::Diagonal => Covariance::Diagonal(var.to_vec()),
            CovKind::Full => {
                let d = var.len();
                let mut m = vec![0.0; d * d];
                for i in 0..d {
                    m[i * d + i] = var[i];
                }
                Covariance::Full(m)
            }
        }
    }
}
