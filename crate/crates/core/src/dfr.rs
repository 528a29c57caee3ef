//! Pseudo-feature resampling and balanced batch assembly.
//!
//! Stored summaries of earlier domains are turned back into feature sets by
//! sampling: a component index is drawn from the mixture weights, then a
//! point from that component. Each earlier domain contributes as many rows
//! as the current domain has, so every label is equally represented.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gmc::{CompressedModel, GmmModel, MeanStdModel, ParamCount, PcaModel};
use crate::rng::{tags, RngStream, StreamRng};
use crate::types::{DomainId, FeatureMatrix, LabeledBatch, LevelId, ProbVector};

/// Pseudo-features regenerated for one earlier domain at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoFeatureSet {
    pub domain: DomainId,
    pub level: LevelId,
    pub features: FeatureMatrix,
}

/// `n` categorical draws by inverse CDF.
pub fn sample_components(weights: &[f64], n: usize, rng: &mut StreamRng) -> Result<Vec<usize>> {
    ProbVector::new(weights.to_vec())?;
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cdf.push(acc);
    }
    let last_live = weights.iter().rposition(|w| *w > 0.0).unwrap_or(0);
    Ok((0..n)
        .map(|_| {
            let u = rng.uniform() * acc;
            cdf.iter().zip(weights).position(|(c, w)| u < *c && *w > 0.0).unwrap_or(last_live)
        })
        .collect())
}

pub fn sample_gmm(model: &GmmModel, n: usize, rng: &mut StreamRng) -> Result<FeatureMatrix> {
    let d = model.dim();
    let comps = sample_components(model.weights(), n, rng)?;
    let mut data = vec![0.0; n * d];
    let mut z = vec![0.0; d];
    for (out, &k) in data.chunks_exact_mut(d).zip(&comps) {
        z.iter_mut().for_each(|v| *v = rng.normal());
        model.factors()[k].transform(&model.means()[k], &z, out);
    }
    FeatureMatrix::new(n, d, data)
}

pub fn sample_meanstd(model: &MeanStdModel, n: usize, rng: &mut StreamRng) -> Result<FeatureMatrix> {
    let d = model.dim();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for (m, s) in model.mean.iter().zip(&model.std) {
            data.push(m + s * rng.normal());
        }
    }
    FeatureMatrix::new(n, d, data)
}

/// `mean + sum_j sqrt(var_j) z_j axis_j`.
pub fn sample_pca(model: &PcaModel, n: usize, rng: &mut StreamRng) -> Result<FeatureMatrix> {
    let d = model.dim();
    let scales: Vec<f64> = model.variances.iter().map(|v| v.sqrt()).collect();
    let mut data = Vec::with_capacity(n * d);
    let mut row = vec![0.0; d];
    for _ in 0..n {
        row.copy_from_slice(&model.mean);
        for (axis, s) in model.components.iter().zip(&scales) {
            let c = s * rng.normal();
            row.iter_mut().zip(axis).for_each(|(r, a)| *r += c * a);
        }
        data.extend_from_slice(&row);
    }
    FeatureMatrix::new(n, d, data)
}

impl CompressedModel {
    pub fn sample(&self, n: usize, rng: &mut StreamRng) -> Result<FeatureMatrix> {
        match self {
            CompressedModel::Gmm(m) => sample_gmm(m, n, rng),
            CompressedModel::MeanStd(m) => sample_meanstd(m, n, rng),
            CompressedModel::Pca(m) => sample_pca(m, n, rng),
        }
    }
}

/// What is kept about one domain once its raw features are gone.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainRecord {
    pub models: BTreeMap<LevelId, CompressedModel>,
    pub n_train: usize,
}

impl DomainRecord {
    pub fn param_count(&self) -> usize {
        self.models.values().map(ParamCount::param_count).sum()
    }
}

/// Compressed summaries for domains `0..len()`, in arrival order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DomainStore {
    records: Vec<DomainRecord>,
}

impl DomainStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<DomainRecord>) -> Self {
        Self { records }
    }

    pub fn push(&mut self, record: DomainRecord) -> DomainId {
        self.records.push(record);
        DomainId(self.records.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[DomainRecord] {
        &self.records
    }

    pub fn get(&self, domain: DomainId) -> Option<&DomainRecord> {
        self.records.get(domain.0)
    }

    pub fn param_count(&self) -> usize {
        self.records.iter().map(DomainRecord::param_count).sum()
    }

    /// Regenerates `n` pseudo-features for `domain` at `level`. The draw uses
    /// the sub-stream `rng.path([domain, level])`.
    pub fn resample(&self, domain: DomainId, level: LevelId, n: usize, rng: RngStream) -> Result<PseudoFeatureSet> {
        let rec =
            self.get(domain).ok_or_else(|| Error::IncompleteStore(format!("no record for domain {}", domain.0)))?;
        let model = rec
            .models
            .get(&level)
            .ok_or_else(|| Error::IncompleteStore(format!("domain {} has no level {level}", domain.0)))?;
        let mut g = rng.path(&[domain.0 as u64, level.tag()]).generator();
        Ok(PseudoFeatureSet { domain, level, features: model.sample(n, &mut g)? })
    }
}

/// Balanced training batch for session `t = store.len() + 1`: `n_current`
/// pseudo-rows per stored domain and per level, followed by the current
/// domain's real rows, then shuffled with one permutation shared by all
/// levels.
pub fn build_balanced_batch(
    store: &DomainStore,
    current: &BTreeMap<LevelId, FeatureMatrix>,
    n_current: usize,
    rng: RngStream,
) -> Result<LabeledBatch> {
    build_batch_with(store, current, n_current, n_current, rng)
}

/// As [`build_balanced_batch`] but with an explicit pseudo-row count per
/// earlier domain.
pub fn build_batch_with(
    store: &DomainStore,
    current: &BTreeMap<LevelId, FeatureMatrix>,
    n_current: usize,
    n_pseudo: usize,
    rng: RngStream,
) -> Result<LabeledBatch> {
    if current.is_empty() {
        return Err(Error::IncompleteStore("current domain has no levels".into()));
    }
    for m in current.values() {
        if m.n_rows() != n_current {
            return Err(Error::LengthMismatch { left: m.n_rows(), right: n_current });
        }
    }
    let t = store.len() + 1;
    let sample_rng = rng.substream(tags::DFR);
    let mut levels = BTreeMap::new();
    for (&level, cur) in current {
        let mut parts = Vec::with_capacity(t);
        for tau in 0..store.len() {
            let set = store.resample(DomainId(tau), level, n_pseudo, sample_rng)?;
            if set.features.dim() != cur.dim() {
                return Err(Error::dims(cur.dim(), set.features.dim()));
            }
            parts.push(set.features);
        }
        let mut refs: Vec<&FeatureMatrix> = parts.iter().collect();
        refs.push(cur);
        levels.insert(level, FeatureMatrix::vstack(&refs)?);
    }
    let mut labels = Vec::with_capacity(store.len() * n_pseudo + n_current);
    for tau in 0..store.len() {
        labels.extend(std::iter::repeat_n(DomainId(tau), n_pseudo));
    }
    labels.extend(std::iter::repeat_n(DomainId(t - 1), n_current));

    let perm = rng.substream(tags::SHUFFLE).generator().permutation(labels.len());
    LabeledBatch::new(levels, labels, t).map(|b| b.select_rows(&perm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmc::{fit_meanstd, Covariance};

    fn rng(seed: u64) -> StreamRng {
        RngStream::new(seed, 0).generator()
    }

    #[test]
    fn single_weight_always_zero() {
        assert_eq!(sample_components(&[1.0], 5, &mut rng(0)).unwrap(), vec![0; 5]);
    }

    #[test]
    fn bad_weights() {
        assert!(matches!(sample_components(&[0.5, 0.4], 3, &mut rng(0)), Err(Error::BadWeights(_))));
    }

    #[test]
    fn zero_weight_never_drawn() {
        let c = sample_components(&[0.0, 1.0, 0.0], 1000, &mut rng(3)).unwrap();
        assert!(c.iter().all(|&k| k == 1));
    }

    #[test]
    fn even_split_concentrates() {
        let n = 100_000;
        let c = sample_components(&[0.5, 0.5], n, &mut rng(12)).unwrap();
        let ones = c.iter().filter(|&&k| k == 1).count();
        // binomial sd is ~158; 1% of 5e4 is 500
        assert!((ones as f64 - 50_000.0).abs() < 500.0, "{ones}");
    }

    fn two_d_model() -> GmmModel {
        GmmModel::new(
            vec![0.3, 0.7],
            vec![vec![-2.0, 1.0], vec![3.0, 0.5]],
            vec![Covariance::Full(vec![1.0, 0.3, 0.3, 0.5]), Covariance::Full(vec![0.4, 0.0, 0.0, 2.0])],
        )
        .unwrap()
    }

    #[test]
    fn gmm_sampling_empty_and_deterministic() {
        let m = two_d_model();
        let e = sample_gmm(&m, 0, &mut rng(1)).unwrap();
        assert_eq!((e.n_rows(), e.dim()), (0, 2));
        let a = sample_gmm(&m, 50, &mut rng(9)).unwrap();
        let b = sample_gmm(&m, 50, &mut rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gmm_sample_mean_matches_mixture_mean() {
        let m = two_d_model();
        let x = sample_gmm(&m, 100_000, &mut rng(21)).unwrap();
        let got = x.column_means().unwrap();
        // mixture mean from parameters: 0.3*(-2,1) + 0.7*(3,0.5)
        let want = [0.3 * -2.0 + 0.7 * 3.0, 0.3 * 1.0 + 0.7 * 0.5];
        for j in 0..2 {
            assert!((got[j] - want[j]).abs() < 0.05, "{got:?}");
        }
    }

    #[test]
    fn meanstd_degenerate_and_moments() {
        let m = MeanStdModel::new(vec![1.5, -2.0], vec![0.0, 0.0]).unwrap();
        let x = sample_meanstd(&m, 10, &mut rng(0)).unwrap();
        assert!(x.rows().all(|r| r == [1.5, -2.0]));
        assert_eq!(sample_meanstd(&m, 0, &mut rng(0)).unwrap().n_rows(), 0);

        let m = MeanStdModel::new(vec![1.0, 4.0], vec![2.0, 0.5]).unwrap();
        let x = sample_meanstd(&m, 100_000, &mut rng(5)).unwrap();
        let fit = fit_meanstd(&x).unwrap();
        for j in 0..2 {
            assert!((fit.mean[j] - m.mean[j]).abs() < 0.05);
            assert!((fit.std[j] - m.std[j]).abs() < 0.05);
        }
    }

    #[test]
    fn pca_zero_variance_and_covariance() {
        let s = 0.5f64.sqrt();
        let m = PcaModel::new(vec![1.0, 2.0], vec![vec![s, s]], vec![0.0]).unwrap();
        let x = sample_pca(&m, 20, &mut rng(0)).unwrap();
        assert!(x.rows().all(|r| r == [1.0, 2.0]));

        let m = PcaModel::new(vec![0.0, 0.0], vec![vec![s, s], vec![s, -s]], vec![4.0, 1.0]).unwrap();
        let n = 100_000;
        let x = sample_pca(&m, n, &mut rng(8)).unwrap();
        let mean = x.column_means().unwrap();
        for a in 0..2 {
            for b in 0..2 {
                let want: f64 = m.components.iter().zip(&m.variances).map(|(v, l)| l * v[a] * v[b]).sum();
                let got = x.rows().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / n as f64;
                assert!((got - want).abs() < 0.05, "({a},{b}) {got} vs {want}");
            }
        }
        let a = sample_pca(&m, 10, &mut rng(3)).unwrap();
        assert_eq!(a, sample_pca(&m, 10, &mut rng(3)).unwrap());
    }

    fn level_map(n: usize, d: usize, fill: f64) -> BTreeMap<LevelId, FeatureMatrix> {
        [LevelId::Mid, LevelId::Last]
            .into_iter()
            .map(|l| (l, FeatureMatrix::new(n, d, vec![fill; n * d]).unwrap()))
            .collect()
    }

    fn record(d: usize) -> DomainRecord {
        let m = MeanStdModel::new(vec![0.0; d], vec![1.0; d]).unwrap();
        DomainRecord {
            models: [LevelId::Mid, LevelId::Last]
                .into_iter()
                .map(|l| (l, CompressedModel::MeanStd(m.clone())))
                .collect(),
            n_train: 10,
        }
    }

    #[test]
    fn first_session_is_current_only() {
        let cur = level_map(7, 3, 2.0);
        let b = build_balanced_batch(&DomainStore::new(), &cur, 7, RngStream::new(0, 0)).unwrap();
        assert_eq!(b.n_rows(), 7);
        assert!(b.labels().iter().all(|l| *l == DomainId(0)));
        assert_eq!(b.level(LevelId::Mid).unwrap(), &cur[&LevelId::Mid]);
    }

    #[test]
    fn three_domains_counting() {
        let store = DomainStore::from_records(vec![record(4), record(4)]);
        let b = build_balanced_batch(&store, &level_map(100, 4, 9.0), 100, RngStream::new(1, 0)).unwrap();
        assert_eq!(b.n_rows(), 300);
        for tau in 0..3 {
            assert_eq!(b.labels().iter().filter(|l| l.0 == tau).count(), 100);
        }
        // current rows keep their real values through the shuffle
        let mid = b.level(LevelId::Mid).unwrap();
        for (i, l) in b.labels().iter().enumerate() {
            if l.0 == 2 {
                assert!(mid.row(i).iter().all(|v| *v == 9.0));
            }
        }
    }

    #[test]
    fn missing_level_is_incomplete() {
        let mut rec = record(4);
        rec.models.remove(&LevelId::Mid);
        let store = DomainStore::from_records(vec![rec]);
        assert!(matches!(
            build_balanced_batch(&store, &level_map(5, 4, 0.0), 5, RngStream::new(0, 0)),
            Err(Error::IncompleteStore(_))
        ));
    }

    #[test]
    fn batch_is_deterministic() {
        let store = DomainStore::from_records(vec![record(2)]);
        let cur = level_map(20, 2, 1.0);
        let a = build_balanced_batch(&store, &cur, 20, RngStream::new(4, 4)).unwrap();
        let b = build_balanced_batch(&store, &cur, 20, RngStream::new(4, 4)).unwrap();
        assert_eq!(a, b);
    }
}
