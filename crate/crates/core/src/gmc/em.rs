use std::ops::RangeInclusive;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CovKind, Covariance, GmmModel, ParamCount};
use crate::cluster::{kmeans_pp_seeds, nearest};
use crate::error::{Error, Result};
use crate::math::{log_sum_exp_unchecked, symmetric_eigen};
use crate::rng::{RngStream, StreamRng};
use crate::types::FeatureMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmInit {
    KMeansPlusPlus,
    RandomPoints,
}

/// EM settings. `rel_tol` is the relative log-likelihood improvement below
/// which iteration stops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub var_floor: f64,
    pub n_restarts: usize,
    pub init: EmInit,
    pub cov_kind: CovKind,
    #[serde(skip)]
    pub seed: RngStream,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            rel_tol: 1e-6,
            var_floor: 1e-6,
            n_restarts: 3,
            init: EmInit::KMeansPlusPlus,
            cov_kind: CovKind::Diagonal,
            seed: RngStream::new(0, 0),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidConfig("rel_tol must be > 0".into()));
        }
        if !(self.var_floor > 0.0) {
            return Err(Error::InvalidConfig("var_floor must be > 0".into()));
        }
        if self.n_restarts == 0 {
            return Err(Error::InvalidConfig("n_restarts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: RngStream) -> Self {
        self.seed = seed;
        self
    }
}

/// Result of [`fit_gmm`].
#[derive(Clone, Debug)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Total log-likelihood per E-step of the winning restart. A component
    /// rescue re-initializes the run, so the trace restarts after one.
    pub ll_trace: Vec<f64>,
    pub converged: bool,
    /// Number of component rescues in the winning restart.
    pub rescues: usize,
    /// Final log-likelihood of every restart, in restart order.
    pub restart_ll: Vec<f64>,
}

impl GmmFit {
    pub fn final_ll(&self) -> f64 {
        self.ll_trace.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

/// Responsibilities (`n x k`, row-major) and total log-likelihood under `model`.
pub fn e_step(x: &FeatureMatrix, model: &GmmModel) -> Result<(Vec<f64>, f64)> {
    if x.dim() != model.dim() {
        return Err(Error::dims(model.dim(), x.dim()));
    }
    let mut resp = vec![0.0; x.n_rows() * model.k()];
    let mut point_ll = vec![0.0; x.n_rows()];
    let ll = e_step_into(x, model, &mut resp, &mut point_ll);
    Ok((resp, ll))
}

fn e_step_into(x: &FeatureMatrix, model: &GmmModel, resp: &mut [f64], point_ll: &mut [f64]) -> f64 {
    let k = model.k();
    let mut total = 0.0;
    for (i, (row, r)) in x.rows().zip(resp.chunks_exact_mut(k)).enumerate() {
        model.joint_log_densities(row, r);
        let lse = log_sum_exp_unchecked(r);
        r.iter_mut().for_each(|v| *v = (*v - lse).exp());
        point_ll[i] = lse;
        total += lse;
    }
    total
}

struct MStep<'a> {
    x: &'a FeatureMatrix,
    k: usize,
    kind: CovKind,
    var_floor: f64,
    global_var: Vec<f64>,
}

impl MStep<'_> {
    /// Weighted MLE update. `score` ranks points by how poorly the current
    /// model explains them (lower is worse); it picks rescue locations.
    fn run(&self, resp: &[f64], score: &[f64]) -> Result<(GmmModel, usize)> {
        let (n, d, k) = (self.x.n_rows(), self.x.dim(), self.k);
        let mut nk = vec![0.0; k];
        let mut means = vec![vec![0.0; d]; k];
        for (row, r) in self.x.rows().zip(resp.chunks_exact(k)) {
            for j in 0..k {
                nk[j] += r[j];
                means[j].iter_mut().zip(row).for_each(|(m, v)| *m += r[j] * v);
            }
        }
        let mut covs = Vec::with_capacity(k);
        let mut rescued = 0;
        let mut used = Vec::new();
        let dead = 1e-8 * n as f64;
        for j in 0..k {
            if nk[j] < dead {
                let idx = self.worst_point(score, &used);
                used.push(idx);
                means[j] = self.x.row(idx).to_vec();
                nk[j] = 1.0;
                covs.push(self.global_cov());
                rescued += 1;
                continue;
            }
            means[j].iter_mut().for_each(|m| *m /= nk[j]);
            covs.push(self.covariance(resp, j, &means[j], nk[j])?);
        }
        let total: f64 = nk.iter().sum();
        let weights: Vec<f64> = nk.iter().map(|w| w / total).collect();
        Ok((GmmModel::new(weights, means, covs)?, rescued))
    }

    fn covariance(&self, resp: &[f64], j: usize, mean: &[f64], nk: f64) -> Result<Covariance> {
        let (d, k) = (self.x.dim(), self.k);
        match self.kind {
            CovKind::Diagonal => {
                let mut var = vec![0.0; d];
                for (row, r) in self.x.rows().zip(resp.chunks_exact(k)) {
                    let w = r[j];
                    for ((v, a), m) in var.iter_mut().zip(row).zip(mean) {
                        *v += w * (a - m) * (a - m);
                    }
                }
                Ok(Covariance::Diagonal(var.iter().map(|v| (v / nk).max(self.var_floor)).collect()))
            }
            CovKind::Full => {
                let mut s = vec![0.0; d * d];
                let mut diff = vec![0.0; d];
                for (row, r) in self.x.rows().zip(resp.chunks_exact(k)) {
                    let w = r[j];
                    diff.iter_mut().zip(row.iter().zip(mean)).for_each(|(df, (a, m))| *df = a - m);
                    for a in 0..d {
                        let wa = w * diff[a];
                        for b in 0..=a {
                            s[a * d + b] += wa * diff[b];
                        }
                    }
                }
                for a in 0..d {
                    for b in 0..=a {
                        s[a * d + b] /= nk;
                        s[b * d + a] = s[a * d + b];
                    }
                }
                Ok(Covariance::Full(self.floor_full(s)))
            }
        }
    }

    /// Clamps eigenvalues below `var_floor`. This is the maximizer of the EM
    /// objective over covariances whose spectrum is bounded by the floor, so
    /// likelihood ascent is preserved.
    fn floor_full(&self, s: Vec<f64>) -> Vec<f64> {
        let d = self.x.dim();
        let (vals, vecs) = symmetric_eigen(&s, d);
        if vals.iter().all(|v| *v >= self.var_floor) {
            return s;
        }
        let mut out = vec![0.0; d * d];
        for (lam, v) in vals.iter().zip(&vecs) {
            let lam = lam.max(self.var_floor);
            for a in 0..d {
                for b in 0..d {
                    out[a * d + b] += lam * v[a] * v[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                let m = 0.5 * (out[a * d + b] + out[b * d + a]);
                out[a * d + b] = m;
                out[b * d + a] = m;
            }
        }
        out
    }

    fn global_cov(&self) -> Covariance {
        let d = self.x.dim();
        match self.kind {
            CovKind::Diagonal => Covariance::Diagonal(self.global_var.clone()),
            CovKind::Full => {
                let mut m = vec![0.0; d * d];
                for i in 0..d {
                    m[i * d + i] = self.global_var[i];
                }
                Covariance::Full(m)
            }
        }
    }

    fn worst_point(&self, score: &[f64], used: &[usize]) -> usize {
        let mut best = None;
        for (i, s) in score.iter().enumerate() {
            if used.contains(&i) {
                continue;
            }
            match best {
                Some((_, bs)) if *s >= bs => {}
                _ => best = Some((i, *s)),
            }
        }
        best.map_or(0, |(i, _)| i)
    }
}

fn global_variance(x: &FeatureMatrix, floor: f64) -> Vec<f64> {
    let mean = x.column_means().unwrap_or_else(|_| vec![0.0; x.dim()]);
    let n = x.n_rows().max(1) as f64;
    let mut var = vec![0.0; x.dim()];
    for r in x.rows() {
        for ((v, a), m) in var.iter_mut().zip(r).zip(&mean) {
            *v += (a - m) * (a - m);
        }
    }
    var.iter().map(|v| (v / n).max(floor)).collect()
}

struct RunResult {
    model: GmmModel,
    trace: Vec<f64>,
    converged: bool,
    rescues: usize,
}

fn run_once(x: &FeatureMatrix, k: usize, cfg: &EmConfig, rng: &mut StreamRng) -> Result<RunResult> {
    let n = x.n_rows();
    let seeds = match cfg.init {
        EmInit::KMeansPlusPlus => kmeans_pp_seeds(x, k, rng)?,
        EmInit::RandomPoints => {
            let mut p = rng.permutation(n);
            p.truncate(k);
            p
        }
    };
    let centers: Vec<Vec<f64>> = seeds.iter().map(|&i| x.row(i).to_vec()).collect();
    let mstep =
        MStep { x, k, kind: cfg.cov_kind, var_floor: cfg.var_floor, global_var: global_variance(x, cfg.var_floor) };

    // hard assignment to the seeds gives the starting parameters
    let mut resp = vec![0.0; n * k];
    let mut score = vec![0.0; n];
    for (i, row) in x.rows().enumerate() {
        let (j, d2) = nearest(&centers, row);
        resp[i * k + j] = 1.0;
        score[i] = -d2;
    }
    let (mut model, _) = mstep.run(&resp, &score)?;

    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut rescues = 0;
    for it in 0..cfg.max_iter {
        let ll = e_step_into(x, &model, &mut resp, &mut score);
        if let Some(&prev) = trace.last() {
            let gain = (ll - prev) / prev.abs().max(f64::MIN_POSITIVE);
            trace.push(ll);
            if gain < cfg.rel_tol {
                converged = true;
                break;
            }
        } else {
            trace.push(ll);
        }
        if it + 1 == cfg.max_iter {
            break;
        }
        let (next, rescued) = mstep.run(&resp, &score)?;
        if rescued > 0 {
            rescues += rescued;
            trace.clear();
        }
        model = next;
    }
    Ok(RunResult { model, trace, converged, rescues })
}

/// Fits a `k`-component mixture by EM and keeps the best of
/// `cfg.n_restarts` runs by final log-likelihood (earliest run on ties).
/// Restart `r` draws from `cfg.seed.substream(r)`.
pub fn fit_gmm(x: &FeatureMatrix, k: usize, cfg: &EmConfig) -> Result<GmmFit> {
    cfg.validate()?;
    if k == 0 {
        return Err(Error::BadComponentCount { n: 0, max: x.n_rows() });
    }
    if x.n_rows() < k {
        return Err(Error::InsufficientSamples { needed: k, got: x.n_rows() });
    }
    let runs: Vec<RunResult> = (0..cfg.n_restarts)
        .into_par_iter()
        .map(|r| run_once(x, k, cfg, &mut cfg.seed.substream(r as u64).generator()))
        .collect::<Result<_>>()?;
    let restart_ll: Vec<f64> = runs.iter().map(|r| r.trace.last().copied().unwrap_or(f64::NEG_INFINITY)).collect();
    let mut best = 0;
    for (i, ll) in restart_ll.iter().enumerate() {
        if *ll > restart_ll[best] {
            best = i;
        }
    }
    let win = runs.into_iter().nth(best).expect("n_restarts >= 1");
    Ok(GmmFit { model: win.model, ll_trace: win.trace, converged: win.converged, rescues: win.rescues, restart_ll })
}

/// `p ln(n) - 2 ll`.
pub fn bic_from_parts(params: usize, n: usize, ll: f64) -> f64 {
    params as f64 * (n as f64).ln() - 2.0 * ll
}

/// Bayesian information criterion of `model` on `x`; lower is better.
pub fn bic(model: &GmmModel, x: &FeatureMatrix) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (_, ll) = e_step(x, model)?;
    Ok(bic_from_parts(model.param_count(), x.n_rows(), ll))
}

/// Fits every `k` in `range` and returns the BIC minimizer (smallest `k` on
/// ties) together with the full `(k, bic)` table.
pub fn select_k(x: &FeatureMatrix, range: RangeInclusive<usize>, cfg: &EmConfig) -> Result<(usize, Vec<(usize, f64)>)> {
    if range.is_empty() {
        return Err(Error::InvalidConfig("empty k range".into()));
    }
    if *range.end() > x.n_rows() {
        return Err(Error::InsufficientSamples { needed: *range.end(), got: x.n_rows() });
    }
    let mut scores = Vec::new();
    for k in range {
        let fit = fit_gmm(x, k, cfg)?;
        scores.push((k, bic(&fit.model, x)?));
    }
    let mut best = scores[0];
    for s in &scores[1..] {
        if s.1 < best.1 {
            best = *s;
        }
    }
    Ok((best.0, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmc::Covariance;

    fn cfg(seed: u64) -> EmConfig {
        EmConfig { seed: RngStream::new(seed, 0), ..EmConfig::default() }
    }

    fn two_blobs(seed: u64) -> FeatureMatrix {
        let mut rng = RngStream::new(seed, 99).generator();
        let rows: Vec<[f64; 1]> = (0..200).map(|i| [if i < 100 { -5.0 } else { 5.0 } + rng.normal()]).collect();
        FeatureMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn k1_on_two_points() {
        let x = FeatureMatrix::from_rows(&[[-1.0], [1.0]]).unwrap();
        let fit = fit_gmm(&x, 1, &cfg(0)).unwrap();
        assert_eq!(fit.model.weights(), &[1.0]);
        assert!(fit.model.means()[0][0].abs() < 1e-15);
        assert_eq!(fit.model.covariances()[0], Covariance::Diagonal(vec![1.0]));
        assert!(fit.converged);
        assert_eq!(fit.ll_trace.len(), 2);
        assert_eq!(fit.ll_trace[0], fit.ll_trace[1]);
    }

    #[test]
    fn recovers_two_blobs() {
        let x = two_blobs(11);
        let fit = fit_gmm(&x, 2, &cfg(3)).unwrap();
        let mut comps: Vec<(f64, f64)> =
            fit.model.means().iter().zip(fit.model.weights()).map(|(m, w)| (m[0], *w)).collect();
        comps.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!((comps[0].0 + 5.0).abs() < 0.5, "{comps:?}");
        assert!((comps[1].0 - 5.0).abs() < 0.5, "{comps:?}");
        assert!((comps[0].1 - 0.5).abs() < 0.1 && (comps[1].1 - 0.5).abs() < 0.1);
    }

    #[test]
    fn too_few_rows() {
        let x = FeatureMatrix::from_rows(&[[0.0]]).unwrap();
        assert!(matches!(fit_gmm(&x, 2, &cfg(0)), Err(Error::InsufficientSamples { needed: 2, got: 1 })));
    }

    #[test]
    fn identical_rows_full_cov_floors() {
        let x = FeatureMatrix::from_rows(&[[1.0, 2.0]; 10]).unwrap();
        let c = EmConfig { cov_kind: CovKind::Full, ..cfg(1) };
        let fit = fit_gmm(&x, 1, &c).unwrap();
        match &fit.model.covariances()[0] {
            Covariance::Full(m) => {
                assert!((m[0] - 1e-6).abs() < 1e-18 && (m[3] - 1e-6).abs() < 1e-18);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn responsibilities_sum_to_one() {
        let x = two_blobs(5);
        let fit = fit_gmm(&x, 3, &cfg(2)).unwrap();
        let (resp, ll) = e_step(&x, &fit.model).unwrap();
        for r in resp.chunks_exact(3) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((ll - fit.final_ll()).abs() < 1e-9 * ll.abs());
    }

    #[test]
    fn random_points_init_works() {
        let x = two_blobs(8);
        let c = EmConfig { init: EmInit::RandomPoints, ..cfg(4) };
        let fit = fit_gmm(&x, 2, &c).unwrap();
        for w in fit.ll_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8);
        }
    }

    #[test]
    fn bic_arithmetic() {
        let v = bic_from_parts(2, 100, -150.0);
        assert!((v - (2.0 * 100f64.ln() + 300.0)).abs() < 1e-12);
        assert!((v - 309.210_340_371_976_2).abs() < 1e-9);
        assert!(bic_from_parts(3, 100, -150.0) > v);
    }

    #[test]
    fn bic_empty_rejected() {
        let x = two_blobs(1);
        let fit = fit_gmm(&x, 1, &cfg(0)).unwrap();
        assert!(matches!(bic(&fit.model, &FeatureMatrix::empty(1).unwrap()), Err(Error::EmptyInput)));
    }

    #[test]
    fn singleton_range() {
        let x = two_blobs(2);
        let (k, scores) = select_k(&x, 3..=3, &cfg(0)).unwrap();
        assert_eq!(k, 3);
        assert_eq!(scores.len(), 1);
    }

    #[test]
    fn tight_cluster_selects_one() {
        let mut rng = RngStream::new(77, 1).generator();
        let rows: Vec<[f64; 2]> = (0..300).map(|_| [rng.normal() * 0.1, rng.normal() * 0.1]).collect();
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        let (k, scores) = select_k(&x, 1..=5, &cfg(0)).unwrap();
        assert_eq!(k, 1, "{scores:?}");
    }

    #[test]
    fn bad_config_rejected() {
        let x = two_blobs(2);
        let c = EmConfig { n_restarts: 0, ..cfg(0) };
        assert!(matches!(fit_gmm(&x, 1, &c), Err(Error::InvalidConfig(_))));
    }
}
