//! Gaussian mixture compression of per-domain feature sets.
//!
//! A domain's features at one level are summarized by a mixture
//! `p(x) = sum_k w_k N(x | mu_k, Sigma_k)` fitted with EM ([`fit_gmm`]). The
//! number of components can be chosen by BIC ([`select_k`]). The cheaper
//! mean/std and PCA summaries live in [`compress`].

mod compress;
mod em;

pub use compress::{
    fit_compressor, fit_meanstd, fit_pca, CompressedModel, CompressorKind, MeanStdModel, ParamCount, PcaModel,
};
pub use em::{bic, bic_from_parts, e_step, fit_gmm, select_k, EmConfig, EmInit, GmmFit};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{cholesky_lower, forward_substitute, log_sum_exp_unchecked};
use crate::types::ProbVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovKind {
    Diagonal,
    Full,
}

impl CovKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CovKind::Diagonal => "diag",
            CovKind::Full => "full",
        }
    }
}

impl std::str::FromStr for CovKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diag" | "diagonal" => Ok(CovKind::Diagonal),
            "full" => Ok(CovKind::Full),
            _ => Err(Error::InvalidConfig(format!("unknown covariance kind '{s}'"))),
        }
    }
}

/// Covariance of one component: `d` variances, or a row-major `d x d` matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    Diagonal(Vec<f64>),
    Full(Vec<f64>),
}

impl Covariance {
    pub fn kind(&self) -> CovKind {
        match self {
            Covariance::Diagonal(_) => CovKind::Diagonal,
            Covariance::Full(_) => CovKind::Full,
        }
    }

    fn dim(&self) -> usize {
        match self {
            Covariance::Diagonal(v) => v.len(),
            Covariance::Full(m) => (m.len() as f64).sqrt().round() as usize,
        }
    }
}

/// Pre-factorized component: log normalizer plus whitening data.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Factor {
    log_norm: f64,
    kind: FactorKind,
}

#[derive(Clone, Debug, PartialEq)]
enum FactorKind {
    Diag { inv_var: Vec<f64>, std: Vec<f64> },
    Full { chol: Vec<f64> },
}

impl Factor {
    pub(crate) fn new(cov: &Covariance) -> Result<Self> {
        let d = cov.dim();
        let half_log_2pi = 0.5 * d as f64 * (2.0 * PI).ln();
        match cov {
            Covariance::Diagonal(var) => {
                if var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(Error::SingularCovariance);
                }
                let log_det: f64 = var.iter().map(|v| v.ln()).sum();
                Ok(Self {
                    log_norm: -half_log_2pi - 0.5 * log_det,
                    kind: FactorKind::Diag {
                        inv_var: var.iter().map(|v| 1.0 / v).collect(),
                        std: var.iter().map(|v| v.sqrt()).collect(),
                    },
                })
            }
            Covariance::Full(m) => {
                if m.len() != d * d || m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::SingularCovariance);
                }
                let chol = cholesky_lower(m, d)?;
                let half_log_det: f64 = (0..d).map(|i| chol[i * d + i].ln()).sum();
                Ok(Self { log_norm: -half_log_2pi - half_log_det, kind: FactorKind::Full { chol } })
            }
        }
    }

    pub(crate) fn logpdf(&self, x: &[f64], mean: &[f64]) -> f64 {
        match &self.kind {
            FactorKind::Diag { inv_var, .. } => {
                let q: f64 = x.iter().zip(mean).zip(inv_var).map(|((a, m), iv)| (a - m) * (a - m) * iv).sum();
                self.log_norm - 0.5 * q
            }
            FactorKind::Full { chol } => {
                let d = mean.len();
                let mut r: Vec<f64> = x.iter().zip(mean).map(|(a, m)| a - m).collect();
                forward_substitute(chol, d, &mut r);
                self.log_norm - 0.5 * r.iter().map(|v| v * v).sum::<f64>()
            }
        }
    }

    /// Writes `mean + A z` where `A A^T = Sigma`.
    pub(crate) fn transform(&self, mean: &[f64], z: &[f64], out: &mut [f64]) {
        match &self.kind {
            FactorKind::Diag { std, .. } => {
                for i in 0..mean.len() {
                    out[i] = mean[i] + std[i] * z[i];
                }
            }
            FactorKind::Full { chol } => {
                let d = mean.len();
                for i in 0..d {
                    let row = &chol[i * d..i * d + i + 1];
                    out[i] = mean[i] + row.iter().zip(z).map(|(l, zz)| l * zz).sum::<f64>();
                }
            }
        }
    }
}

/// `ln N(x | mean, cov)`.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], cov: &Covariance) -> Result<f64> {
    if x.len() != mean.len() {
        return Err(Error::dims(mean.len(), x.len()));
    }
    if cov.dim() != mean.len() {
        return Err(Error::dims(mean.len(), cov.dim()));
    }
    Ok(Factor::new(cov)?.logpdf(x, mean))
}

/// A fitted mixture `{w_k, mu_k, Sigma_k}`.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Covariance>,
    factors: Vec<Factor>,
    log_weights: Vec<f64>,
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Covariance>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::BadComponentCount { n: 0, max: usize::MAX });
        }
        if means.len() != k || covariances.len() != k {
            return Err(Error::LengthMismatch { left: k, right: means.len().min(covariances.len()) });
        }
        if weights.iter().any(|w| !(*w > 0.0 && *w <= 1.0)) {
            return Err(Error::BadWeights("mixture weights must lie in (0, 1]".into()));
        }
        // validates the sum
        ProbVector::new(weights.clone())?;
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidConfig("mixture dimension must be positive".into()));
        }
        let kind = covariances[0].kind();
        for (m, c) in means.iter().zip(&covariances) {
            if m.len() != dim {
                return Err(Error::dims(dim, m.len()));
            }
            if c.dim() != dim {
                return Err(Error::dims(dim, c.dim()));
            }
            if c.kind() != kind {
                return Err(Error::InvalidConfig("mixed covariance kinds".into()));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(0));
            }
        }
        let factors = covariances.iter().map(Factor::new).collect::<Result<Vec<_>>>()?;
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self { dim, weights, means, covariances, factors, log_weights })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cov_kind(&self) -> CovKind {
        self.covariances[0].kind()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Covariance] {
        &self.covariances
    }

    pub(crate) fn factors(&self) -> &[Factor] {
        &self.factors
    }

    /// `sum_k w_k mu_k`.
    pub fn mixture_mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (w, m) in self.weights.iter().zip(&self.means) {
            out.iter_mut().zip(m).for_each(|(o, v)| *o += w * v);
        }
        out
    }

    /// Fills `out[k] = ln w_k + ln N(x | mu_k, Sigma_k)`.
    pub(crate) fn joint_log_densities(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.log_weights[k] + self.factors[k].logpdf(x, &self.means[k]);
        }
    }
}

/// `ln sum_k w_k N(x | mu_k, Sigma_k)`.
pub fn mixture_logpdf(x: &[f64], model: &GmmModel) -> Result<f64> {
    if x.len() != model.dim {
        return Err(Error::dims(model.dim, x.len()));
    }
    let mut buf = vec![0.0; model.k()];
    model.joint_log_densities(x, &mut buf);
    Ok(log_sum_exp_unchecked(&buf))
}
