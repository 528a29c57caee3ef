//! Training-free baseline selectors and the common selector interface.
//!
//! Baselines read Last-level features only and compare squared Euclidean
//! distances.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans, nearest};
use crate::error::{Error, Result};
use crate::math::sq_dist;
use crate::mdfn::MdfnParams;
use crate::rng::RngStream;
use crate::types::{DomainId, FeatureMatrix, LevelId};

pub const DEFAULT_CENTERS_PER_DOMAIN: usize = 5;

/// Anything that routes feature rows to a domain.
pub trait DomainSelector {
    fn n_domains(&self) -> usize;

    /// Predicted domain for every row of the supplied levels.
    fn select(&self, levels: &BTreeMap<LevelId, FeatureMatrix>) -> Result<Vec<DomainId>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmcModel {
    pub centroids: Vec<Vec<f64>>,
}

impl NmcModel {
    pub fn new(centroids: Vec<Vec<f64>>) -> Result<Self> {
        check_centers(&centroids)?;
        Ok(Self { centroids })
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }

    pub fn param_count(&self) -> usize {
        self.centroids.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmeansKnnModel {
    pub centers: Vec<Vec<Vec<f64>>>,
    pub m: usize,
}

impl KmeansKnnModel {
    pub fn new(centers: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let m = centers.first().map_or(0, Vec::len);
        if m == 0 {
            return Err(Error::EmptyInput);
        }
        if let Some(bad) = centers.iter().find(|c| c.len() != m) {
            return Err(Error::LengthMismatch { left: bad.len(), right: m });
        }
        let flat: Vec<Vec<f64>> = centers.iter().flatten().cloned().collect();
        check_centers(&flat)?;
        Ok(Self { centers, m })
    }

    pub fn dim(&self) -> usize {
        self.centers[0][0].len()
    }

    pub fn param_count(&self) -> usize {
        self.centers.iter().flatten().map(Vec::len).sum()
    }
}

fn check_centers(c: &[Vec<f64>]) -> Result<()> {
    let d = c.first().ok_or(Error::EmptyInput)?.len();
    if d == 0 {
        return Err(Error::EmptyInput);
    }
    for v in c {
        if v.len() != d {
            return Err(Error::dims(d, v.len()));
        }
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
    }
    Ok(())
}

fn check_domains(per_domain: &[&FeatureMatrix]) -> Result<usize> {
    let first = per_domain.first().ok_or(Error::EmptyInput)?;
    for m in per_domain {
        if m.n_rows() == 0 {
            return Err(Error::EmptyInput);
        }
        if m.dim() != first.dim() {
            return Err(Error::dims(first.dim(), m.dim()));
        }
    }
    Ok(first.dim())
}

/// One centroid per domain: the mean of its features.
pub fn nmc_fit(per_domain: &[&FeatureMatrix]) -> Result<NmcModel> {
    check_domains(per_domain)?;
    let centroids = per_domain.iter().map(|m| m.column_means()).collect::<Result<_>>()?;
    NmcModel::new(centroids)
}

pub fn nmc_predict(model: &NmcModel, x: &[f64]) -> Result<DomainId> {
    if x.len() != model.dim() {
        return Err(Error::dims(model.dim(), x.len()));
    }
    Ok(DomainId(nearest(&model.centroids, x).0))
}

/// `m` k-means centers per domain, each domain on its own substream.
pub fn kmeans_fit(per_domain: &[&FeatureMatrix], m: usize, seed: RngStream) -> Result<KmeansKnnModel> {
    check_domains(per_domain)?;
    if m == 0 {
        return Err(Error::InvalidConfig("centers per domain must be >= 1".into()));
    }
    let centers = per_domain
        .iter()
        .enumerate()
        .map(|(tau, x)| domain_centers(x, m, seed.substream(tau as u64)))
        .collect::<Result<_>>()?;
    KmeansKnnModel::new(centers)
}

/// Centers for a single domain; [`kmeans_fit`] uses `seed.substream(tau)`.
pub fn domain_centers(x: &FeatureMatrix, m: usize, seed: RngStream) -> Result<Vec<Vec<f64>>> {
    if m == 0 {
        return Err(Error::InvalidConfig("centers per domain must be >= 1".into()));
    }
    if x.n_rows() < m {
        return Err(Error::InsufficientSamples { needed: m, got: x.n_rows() });
    }
    kmeans(x, m, &mut seed.generator())
}

/// 1-NN over all stored centers; ties go to the lower domain, then the lower
/// center index.
pub fn knn_predict(model: &KmeansKnnModel, x: &[f64]) -> Result<DomainId> {
    if x.len() != model.dim() {
        return Err(Error::dims(model.dim(), x.len()));
    }
    let mut best = (0, f64::INFINITY);
    for (tau, cs) in model.centers.iter().enumerate() {
        for c in cs {
            let d = sq_dist(c, x);
            if d < best.1 {
                best = (tau, d);
            }
        }
    }
    Ok(DomainId(best.0))
}

fn last_level(levels: &BTreeMap<LevelId, FeatureMatrix>) -> Result<&FeatureMatrix> {
    levels.get(&LevelId::Last).ok_or_else(|| Error::IncompleteStore("missing level last".into()))
}

impl DomainSelector for NmcModel {
    fn n_domains(&self) -> usize {
        self.centroids.len()
    }

    fn select(&self, levels: &BTreeMap<LevelId, FeatureMatrix>) -> Result<Vec<DomainId>> {
        last_level(levels)?.rows().map(|r| nmc_predict(self, r)).collect()
    }
}

impl DomainSelector for KmeansKnnModel {
    fn n_domains(&self) -> usize {
        self.centers.len()
    }

    fn select(&self, levels: &BTreeMap<LevelId, FeatureMatrix>) -> Result<Vec<DomainId>> {
        last_level(levels)?.rows().map(|r| knn_predict(self, r)).collect()
    }
}

impl DomainSelector for MdfnParams {
    fn n_domains(&self) -> usize {
        self.head.n_domains
    }

    fn select(&self, levels: &BTreeMap<LevelId, FeatureMatrix>) -> Result<Vec<DomainId>> {
        self.predict_batch(levels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn nmc_basic() {
        let a = mat(&[&[0.0, 0.0], &[2.0, 2.0]]);
        let m = nmc_fit(&[&a]).unwrap();
        assert_eq!(m.centroids, vec![vec![1.0, 1.0]]);
        let b = mat(&[&[5.0, 5.0]]);
        let m = nmc_fit(&[&a, &b]).unwrap();
        assert_eq!(m.centroids[1], vec![5.0, 5.0]);
        assert!(matches!(nmc_fit(&[&a, &FeatureMatrix::empty(2).unwrap()]), Err(Error::EmptyInput)));
    }

    #[test]
    fn nmc_mean_matches_two_pass() {
        let mut rng = RngStream::new(3, 0).generator();
        let data: Vec<f64> = (0..300).map(|_| 1e3 + rng.normal()).collect();
        let x = FeatureMatrix::new(100, 3, data).unwrap();
        let m = nmc_fit(&[&x]).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = x.rows().map(|r| r[j]).collect();
            let rough = col.iter().sum::<f64>() / 100.0;
            let two_pass = rough + col.iter().map(|v| v - rough).sum::<f64>() / 100.0;
            assert!((m.centroids[0][j] - two_pass).abs() < 1e-12);
        }
    }

    #[test]
    fn nmc_prediction_rules() {
        let m = NmcModel::new(vec![vec![0.0], vec![10.0]]).unwrap();
        assert_eq!(nmc_predict(&m, &[2.0]).unwrap(), DomainId(0));
        assert_eq!(nmc_predict(&m, &[5.0]).unwrap(), DomainId(0));
        assert_eq!(nmc_predict(&m, &[7.0]).unwrap(), DomainId(1));
        assert!(matches!(nmc_predict(&m, &[1.0, 2.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn nmc_matches_brute_force() {
        let mut rng = RngStream::new(9, 0).generator();
        let cents: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.normal() * 3.0, rng.normal() * 3.0]).collect();
        let m = NmcModel::new(cents.clone()).unwrap();
        for _ in 0..500 {
            let x = [rng.normal() * 4.0, rng.normal() * 4.0];
            let d: Vec<f64> = cents.iter().map(|c| ((c[0] - x[0]).powi(2) + (c[1] - x[1]).powi(2)).sqrt()).collect();
            let want = (0..6).fold(0, |b, i| if d[i] < d[b] { i } else { b });
            assert_eq!(nmc_predict(&m, &x).unwrap(), DomainId(want));
        }
    }

    #[test]
    fn kmeans_single_center_is_mean() {
        let mut rng = RngStream::new(1, 0).generator();
        let x = FeatureMatrix::new(50, 2, (0..100).map(|_| rng.normal()).collect()).unwrap();
        let y = FeatureMatrix::new(40, 2, (0..80).map(|_| 2.0 + rng.normal()).collect()).unwrap();
        let km = kmeans_fit(&[&x, &y], 1, RngStream::new(0, 0)).unwrap();
        let nmc = nmc_fit(&[&x, &y]).unwrap();
        assert_eq!(km.centers[0][0], nmc.centroids[0]);
        assert_eq!(km.centers[1][0], nmc.centroids[1]);
    }

    #[test]
    fn kmeans_recovers_blobs() {
        let mut rng = RngStream::new(2, 0).generator();
        let mut rows = Vec::new();
        for i in 0..400 {
            let c = if i % 2 == 0 { -5.0 } else { 5.0 };
            rows.push(vec![c + rng.normal(), c + rng.normal()]);
        }
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        let m = kmeans_fit(&[&x], 2, RngStream::new(7, 0)).unwrap();
        for target in [-5.0, 5.0] {
            let hit = m.centers[0].iter().any(|c| (c[0] - target).abs() < 0.5 && (c[1] - target).abs() < 0.5);
            assert!(hit, "{:?}", m.centers);
        }
        let again = kmeans_fit(&[&x], 2, RngStream::new(7, 0)).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn kmeans_needs_samples() {
        let x = mat(&[&[0.0], &[1.0]]);
        assert!(matches!(
            kmeans_fit(&[&x], 3, RngStream::new(0, 0)),
            Err(Error::InsufficientSamples { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn knn_rules() {
        let one = KmeansKnnModel::new(vec![vec![vec![0.0], vec![3.0]]]).unwrap();
        assert_eq!(knn_predict(&one, &[100.0]).unwrap(), DomainId(0));
        let two = KmeansKnnModel::new(vec![vec![vec![-1.0], vec![9.0]], vec![vec![1.0], vec![-9.0]]]).unwrap();
        assert_eq!(knn_predict(&two, &[0.0]).unwrap(), DomainId(0));
        assert_eq!(knn_predict(&two, &[0.5]).unwrap(), DomainId(1));
        assert!(knn_predict(&two, &[0.0, 0.0]).is_err());
        assert!(KmeansKnnModel::new(vec![vec![vec![0.0]], vec![]]).is_err());
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = RngStream::new(4, 0).generator();
        let centers: Vec<Vec<Vec<f64>>> =
            (0..4).map(|_| (0..3).map(|_| vec![rng.normal(), rng.normal()]).collect()).collect();
        let m = KmeansKnnModel::new(centers.clone()).unwrap();
        for _ in 0..500 {
            let x = [rng.normal() * 2.0, rng.normal() * 2.0];
            let mut all = Vec::new();
            for (tau, cs) in centers.iter().enumerate() {
                for c in cs {
                    all.push((((c[0] - x[0]).powi(2) + (c[1] - x[1]).powi(2)).sqrt(), tau));
                }
            }
            let want = all.iter().fold(all[0], |b, v| if v.0 < b.0 { *v } else { b }).1;
            assert_eq!(knn_predict(&m, &x).unwrap(), DomainId(want));
        }
    }

    #[test]
    fn selector_trait_uses_last_level() {
        let m = NmcModel::new(vec![vec![0.0], vec![10.0]]).unwrap();
        let levels: BTreeMap<_, _> =
            [(LevelId::Mid, mat(&[&[10.0], &[0.0]])), (LevelId::Last, mat(&[&[1.0], &[9.0]]))].into();
        assert_eq!(m.select(&levels).unwrap(), vec![DomainId(0), DomainId(1)]);
        let only_mid: BTreeMap<_, _> = [(LevelId::Mid, mat(&[&[1.0]]))].into();
        assert!(matches!(m.select(&only_mid), Err(Error::IncompleteStore(_))));
    }

    proptest! {
        #[test]
        fn single_center_knn_equals_nmc(
            seed in 0u64..1000,
            xs in prop::collection::vec(-20.0f64..20.0, 6),
        ) {
            let mut rng = RngStream::new(seed, 0).generator();
            let doms: Vec<FeatureMatrix> = (0..3)
                .map(|k| FeatureMatrix::new(10, 2, (0..20).map(|_| k as f64 + rng.normal()).collect()).unwrap())
                .collect();
            let refs: Vec<&FeatureMatrix> = doms.iter().collect();
            let nmc = nmc_fit(&refs).unwrap();
            let km = kmeans_fit(&refs, 1, RngStream::new(seed, 1)).unwrap();
            for p in xs.chunks(2) {
                prop_assert_eq!(nmc_predict(&nmc, p).unwrap(), knn_predict(&km, p).unwrap());
            }
        }

        #[test]
        fn knn_invariant_to_center_order(seed in 0u64..1000, x in -5.0f64..5.0, y in -5.0f64..5.0) {
            let mut rng = RngStream::new(seed, 0).generator();
            let centers: Vec<Vec<Vec<f64>>> = (0..3)
                .map(|_| (0..4).map(|_| vec![rng.normal(), rng.normal()]).collect())
                .collect();
            let a = KmeansKnnModel::new(centers.clone()).unwrap();
            let mut permuted = centers;
            for cs in permuted.iter_mut() {
                rng.shuffle(cs);
            }
            let b = KmeansKnnModel::new(permuted).unwrap();
            prop_assert_eq!(knn_predict(&a, &[x, y]).unwrap(), knn_predict(&b, &[x, y]).unwrap());
        }
    }
}
