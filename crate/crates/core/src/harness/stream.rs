//! Synthetic two-level feature streams and their FEAT directory layout.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_feat, write_feat, FeatFile};
use crate::rng::{tags, RngStream, StreamRng};
use crate::types::{DomainId, FeatureMatrix, LabeledBatch, LevelId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub n_domains: usize,
    pub dim: usize,
    pub classes_per_domain: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Pairwise distance between domain means, per level.
    pub domain_separation: f64,
    /// Norm of the per-class offsets, shared by all domains.
    pub class_offset_scale: f64,
    pub within_noise: f64,
    /// Correlation between the Mid and Last noise of a sample.
    pub level_correlation: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            n_domains: 4,
            dim: 32,
            classes_per_domain: 5,
            n_train: 500,
            n_test: 200,
            domain_separation: 3.0,
            class_offset_scale: 2.0,
            within_noise: 1.0,
            level_correlation: 0.5,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.n_domains == 0 || self.dim == 0 || self.classes_per_domain == 0 || self.n_train == 0 || self.n_test == 0
        {
            return bad("stream counts must be >= 1");
        }
        if self.n_domains > self.dim {
            return bad("n_domains must not exceed dim");
        }
        if !(self.domain_separation >= 0.0) || !(self.class_offset_scale >= 0.0) || !(self.within_noise >= 0.0) {
            return bad("separation, class offset and noise must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.level_correlation) {
            return bad("level_correlation must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Train and test features of one domain. Labels are the domain index.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSplit {
    pub train: LabeledBatch,
    pub test: LabeledBatch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStream {
    pub domains: Vec<DomainSplit>,
}

impl FeatureStream {
    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn dim(&self) -> usize {
        self.domains.first().map_or(0, |d| d.train.dim())
    }
}

/// `k` orthonormal vectors by Gram-Schmidt on Gaussian draws.
fn orthonormal(k: usize, d: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

fn unit(d: usize, rng: &mut StreamRng) -> Vec<f64> {
    orthonormal(1, d, rng).pop().expect("one vector")
}

struct LevelLayout {
    means: Vec<Vec<f64>>,
    class_offsets: Vec<Vec<f64>>,
}

fn layout(cfg: &StreamConfig, level: LevelId, root: RngStream) -> LevelLayout {
    let mut rng = root.path(&[level.tag(), 0]).generator();
    let scale = cfg.domain_separation / std::f64::consts::SQRT_2;
    let means = orthonormal(cfg.n_domains, cfg.dim, &mut rng)
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * scale).collect())
        .collect();
    let mut rng = root.path(&[level.tag(), 1]).generator();
    let class_offsets = (0..cfg.classes_per_domain)
        .map(|_| unit(cfg.dim, &mut rng).into_iter().map(|x| x * cfg.class_offset_scale).collect())
        .collect();
    LevelLayout { means, class_offsets }
}

fn draw_split(
    cfg: &StreamConfig,
    mid: &LevelLayout,
    last: &LevelLayout,
    tau: usize,
    n: usize,
    rng: RngStream,
) -> Result<LabeledBatch> {
    let d = cfg.dim;
    let mut g = rng.generator();
    let rho = cfg.level_correlation;
    let (a, b) = (rho, (1.0 - rho * rho).sqrt());
    let s = cfg.within_noise;
    let mut xm = Vec::with_capacity(n * d);
    let mut xl = Vec::with_capacity(n * d);
    for _ in 0..n {
        let c = g.below(cfg.classes_per_domain);
        for j in 0..d {
            let shared = g.normal();
            let fresh = g.normal();
            let vm = mid.means[tau][j] + mid.class_offsets[c][j] + s * shared;
            let vl = last.means[tau][j] + last.class_offsets[c][j] + s * (a * shared + b * fresh);
            // stored at the precision the FEAT format carries
            xm.push(vm as f32 as f64);
            xl.push(vl as f32 as f64);
        }
    }
    let levels =
        BTreeMap::from([(LevelId::Mid, FeatureMatrix::new(n, d, xm)?), (LevelId::Last, FeatureMatrix::new(n, d, xl)?)]);
    LabeledBatch::new(levels, vec![DomainId(tau); n], cfg.n_domains)
}

/// Domain `tau` draws Mid features around `m_mid[tau] + o_mid[c]` and Last
/// features around `m_last[tau] + o_last[c]`, for a uniformly drawn class
/// `c`. Domain means are mutually `domain_separation` apart on each level;
/// class offsets are shared across domains. Last-level noise mixes the Mid
/// noise with fresh noise so their correlation is `level_correlation`.
pub fn generate_stream(cfg: &StreamConfig) -> Result<FeatureStream> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed, 0).substream(tags::STREAM_GEN);
    let mid = layout(cfg, LevelId::Mid, root);
    let last = layout(cfg, LevelId::Last, root);
    let domains = (0..cfg.n_domains)
        .map(|tau| {
            Ok(DomainSplit {
                train: draw_split(cfg, &mid, &last, tau, cfg.n_train, root.path(&[2, tau as u64, 0]))?,
                test: draw_split(cfg, &mid, &last, tau, cfg.n_test, root.path(&[2, tau as u64, 1]))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(FeatureStream { domains })
}

fn feat_name(domain: usize, split: &str, level: LevelId) -> String {
    format!("domain{:02}_{split}_{level}.feat", domain + 1)
}

/// Writes one FEAT file per (domain, split, level). Returns the paths.
pub fn write_stream(stream: &FeatureStream, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (tau, split) in stream.domains.iter().enumerate() {
        for (name, batch) in [("train", &split.train), ("test", &split.test)] {
            for (level, m) in batch.levels() {
                let p = dir.join(feat_name(tau, name, *level));
                write_feat(&p, &FeatFile::new(m.clone()))?;
                paths.push(p);
            }
        }
    }
    Ok(paths)
}

fn parse_name(name: &str) -> Option<(usize, bool, LevelId)> {
    let rest = name.strip_prefix("domain")?.strip_suffix(".feat")?;
    let mut parts = rest.splitn(3, '_');
    let num: usize = parts.next()?.parse().ok()?;
    let train = match parts.next()? {
        "train" => true,
        "test" => false,
        _ => return None,
    };
    let level = parts.next()?.parse().ok()?;
    (num >= 1).then_some((num - 1, train, level))
}

/// Reads a directory written by [`write_stream`] (or by an external feature
/// exporter using the same naming). Every domain `1..=T` needs train and test
/// files for at least the Mid and Last levels.
pub fn ingest_features(dir: &Path) -> Result<FeatureStream> {
    let mut found: BTreeMap<(usize, bool), BTreeMap<LevelId, FeatureMatrix>> = BTreeMap::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let name = e.file_name();
        let Some((tau, train, level)) = name.to_str().and_then(parse_name) else {
            continue;
        };
        let f = read_feat(&e.path())?;
        found.entry((tau, train)).or_default().insert(level, f.features);
    }
    let t = found.keys().map(|(tau, _)| tau + 1).max().ok_or(Error::EmptyInput)?;
    let mut dims: BTreeMap<LevelId, usize> = BTreeMap::new();
    let mut domains = Vec::with_capacity(t);
    for tau in 0..t {
        let mut split = |train: bool| -> Result<LabeledBatch> {
            let which = if train { "train" } else { "test" };
            let levels = found
                .remove(&(tau, train))
                .ok_or_else(|| Error::IncompleteStore(format!("domain {} has no {which} files", tau + 1)))?;
            for need in [LevelId::Mid, LevelId::Last] {
                if !levels.contains_key(&need) {
                    return Err(Error::IncompleteStore(format!("missing {}", feat_name(tau, which, need))));
                }
            }
            let n = levels[&LevelId::Last].n_rows();
            for (level, m) in &levels {
                let d = *dims.entry(*level).or_insert(m.dim());
                if d != m.dim() {
                    return Err(Error::dims(d, m.dim()));
                }
                if m.n_rows() != n {
                    return Err(Error::LengthMismatch { left: m.n_rows(), right: n });
                }
            }
            LabeledBatch::new(levels, vec![DomainId(tau); n], t)
        };
        domains.push(DomainSplit { train: split(true)?, test: split(false)? });
    }
    Ok(FeatureStream { domains })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::sq_dist;

    fn small() -> StreamConfig {
        StreamConfig { n_domains: 3, dim: 6, n_train: 40, n_test: 10, ..StreamConfig::default() }
    }

    #[test]
    fn shapes_and_determinism() {
        let s = generate_stream(&small()).unwrap();
        assert_eq!(s.n_domains(), 3);
        assert_eq!(s.dim(), 6);
        for (tau, d) in s.domains.iter().enumerate() {
            assert_eq!(d.train.n_rows(), 40);
            assert_eq!(d.test.n_rows(), 10);
            assert!(d.train.labels().iter().all(|l| l.0 == tau));
            assert!(d.train.level(LevelId::Mid).is_ok());
        }
        assert_eq!(s, generate_stream(&small()).unwrap());
        let other = generate_stream(&StreamConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(s, other);
    }

    #[test]
    fn means_are_equidistant() {
        let cfg = StreamConfig { domain_separation: 4.0, ..small() };
        let root = RngStream::new(cfg.seed, 0).substream(tags::STREAM_GEN);
        let l = layout(&cfg, LevelId::Last, root);
        for i in 0..3 {
            for j in i + 1..3 {
                assert!((sq_dist(&l.means[i], &l.means[j]).sqrt() - 4.0).abs() < 1e-12);
            }
        }
        for o in &l.class_offsets {
            assert!((o.iter().map(|x| x * x).sum::<f64>().sqrt() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn level_noise_correlation() {
        let cfg = StreamConfig {
            n_domains: 1,
            dim: 1,
            classes_per_domain: 1,
            n_train: 100_000,
            class_offset_scale: 0.0,
            domain_separation: 0.0,
            level_correlation: 0.3,
            ..StreamConfig::default()
        };
        let s = generate_stream(&cfg).unwrap();
        let m = s.domains[0].train.level(LevelId::Mid).unwrap().as_slice();
        let l = s.domains[0].train.level(LevelId::Last).unwrap().as_slice();
        let n = m.len() as f64;
        let corr = m.iter().zip(l).map(|(a, b)| a * b).sum::<f64>() / n;
        assert!((corr - 0.3).abs() < 0.01, "{corr}");
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_stream(&StreamConfig { n_domains: 7, ..small() }).is_err());
        assert!(generate_stream(&StreamConfig { level_correlation: 1.5, ..small() }).is_err());
        assert!(generate_stream(&StreamConfig { n_test: 0, ..small() }).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let s = generate_stream(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = write_stream(&s, dir.path()).unwrap();
        assert_eq!(paths.len(), 3 * 2 * 2);
        assert!(dir.path().join("domain02_test_mid.feat").exists());
        assert_eq!(ingest_features(dir.path()).unwrap(), s);
    }

    #[test]
    fn ingest_missing_level() {
        let s = generate_stream(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_stream(&s, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("domain03_train_mid.feat")).unwrap();
        assert!(matches!(ingest_features(dir.path()), Err(Error::IncompleteStore(_))));
    }

    #[test]
    fn ingest_truncated_file() {
        let s = generate_stream(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_stream(&s, dir.path()).unwrap();
        let p = dir.path().join("domain01_train_last.feat");
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..100]).unwrap();
        assert!(matches!(ingest_features(dir.path()), Err(Error::Format { offset: 100, .. })));
    }

    #[test]
    fn ingest_dim_mismatch() {
        let s = generate_stream(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_stream(&s, dir.path()).unwrap();
        let wrong = FeatureMatrix::new(10, 5, vec![0.0; 50]).unwrap();
        write_feat(&dir.path().join("domain02_test_mid.feat"), &FeatFile::new(wrong)).unwrap();
        assert!(matches!(ingest_features(dir.path()), Err(Error::DimMismatch { .. })));
    }
}
