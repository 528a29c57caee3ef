//! Small numeric kernels shared by the density, training and PCA code.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// `ln(sum(exp(v)))` with max-shift. Exactly `-inf` when every entry is `-inf`.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(log_sum_exp_unchecked(v))
}

pub(crate) fn log_sum_exp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if v.len() == 1 {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax, written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lower Cholesky factor of a row-major symmetric `d x d` matrix, row-major.
pub(crate) fn cholesky_lower(cov: &[f64], d: usize) -> Result<Vec<f64>> {
    let m = DMatrix::from_row_slice(d, d, cov);
    let chol = m.cholesky().ok_or(Error::SingularCovariance)?;
    let l = chol.l();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            out[i * d + j] = l[(i, j)];
        }
    }
    Ok(out)
}

/// Solves `L y = b` in place for row-major lower-triangular `L`.
pub(crate) fn forward_substitute(l: &[f64], d: usize, b: &mut [f64]) {
    for i in 0..d {
        let row = &l[i * d..i * d + i];
        let s: f64 = row.iter().zip(&b[..i]).map(|(a, y)| a * y).sum();
        b[i] = (b[i] - s) / l[i * d + i];
    }
}

/// Eigen-decomposition of a symmetric row-major matrix, sorted by descending
/// eigenvalue (stable on ties). Returns `(values, vectors)` with `vectors[k]`
/// the unit eigenvector of `values[k]`.
pub(crate) fn symmetric_eigen(mat: &[f64], d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let m = DMatrix::from_row_slice(d, d, mat);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = order.iter().map(|&k| eig.eigenvectors.column(k).iter().copied().collect()).collect();
    (values, vectors)
}

/// Flips `v` so its first coordinate with magnitude above `eps` is positive.
pub(crate) fn sign_normalize(v: &mut [f64], eps: f64) {
    if let Some(first) = v.iter().find(|x| x.abs() > eps) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}
