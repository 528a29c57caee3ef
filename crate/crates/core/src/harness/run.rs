//! The incremental protocol and selector comparison.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{
    compute_accuracy_proxy, compute_forgetting, compute_selection_metrics, oracle_accuracy, ExpertMatrix,
};
use super::stream::FeatureStream;
use crate::dfr::{build_balanced_batch, DomainRecord, DomainStore};
use crate::error::{Error, Result};
use crate::gmc::{fit_compressor, CompressorKind, CovKind, EmConfig};
use crate::io::{ModelStore, Provenance};
use crate::mdfn::{init_params, train, train_from, widen_head, MdfnParams, TrainConfig};
use crate::rng::{tags, RngStream};
use crate::selectors::{domain_centers, DomainSelector, KmeansKnnModel, NmcModel};
use crate::types::{DomainId, LabeledBatch, LevelId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "selector", rename_all = "snake_case")]
pub enum SelectorKind {
    /// Compressed-feature rehearsal plus a trained fusion network. With
    /// `balance` off the network is fine-tuned on the current domain only.
    Soyo {
        compressor: CompressorKind,
        balance: bool,
    },
    Nmc,
    KmeansKnn {
        m: usize,
    },
}

impl SelectorKind {
    pub fn name(&self) -> String {
        match self {
            SelectorKind::Soyo { compressor, balance } => {
                let c = match compressor {
                    CompressorKind::Gmm { .. } => "GMC",
                    CompressorKind::MeanStd => "Mean&std",
                    CompressorKind::Pca { .. } => "PCA",
                };
                let suffix = if *balance { "" } else { " (no DFR)" };
                format!("SOYO+{c}{suffix}")
            }
            SelectorKind::Nmc => "NMC".into(),
            SelectorKind::KmeansKnn { .. } => "KMeans+KNN".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip)]
    pub em: EmConfig,
    #[serde(skip)]
    pub train: TrainConfig,
    pub gmm_components: usize,
    pub gmm_cov: CovKind,
    pub pca_components: usize,
    pub kmeans_centers: usize,
    pub expert_diag: f64,
    pub expert_off: f64,
    pub backbone_params: f64,
    /// Continue from the previous session's network instead of retraining.
    pub warm_start: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            em: EmConfig::default(),
            train: TrainConfig::default(),
            gmm_components: 2,
            gmm_cov: CovKind::Diagonal,
            pca_components: 10,
            kmeans_centers: crate::selectors::DEFAULT_CENTERS_PER_DOMAIN,
            expert_diag: 0.9,
            expert_off: 0.5,
            backbone_params: 86e6,
            warm_start: false,
        }
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        self.em.validate()?;
        self.train.validate()?;
        if self.gmm_components == 0 || self.pca_components == 0 || self.kmeans_centers == 0 {
            return Err(Error::InvalidConfig("component and center counts must be >= 1".into()));
        }
        if !(self.backbone_params > 0.0) {
            return Err(Error::InvalidConfig("backbone_params must be > 0".into()));
        }
        ExpertMatrix::uniform(1, self.expert_diag, self.expert_off).map(|_| ())
    }

    pub fn gmc(&self) -> CompressorKind {
        CompressorKind::Gmm { k: self.gmm_components, cov: self.gmm_cov }
    }

    /// The comparison line-up: three rehearsal compressors and two baselines.
    pub fn lineup(&self) -> Vec<SelectorKind> {
        vec![
            SelectorKind::Soyo { compressor: self.gmc(), balance: true },
            SelectorKind::Soyo { compressor: CompressorKind::MeanStd, balance: true },
            SelectorKind::Soyo { compressor: CompressorKind::Pca { n: self.pca_components }, balance: true },
            SelectorKind::Nmc,
            SelectorKind::KmeansKnn { m: self.kmeans_centers },
        ]
    }

    fn root(&self) -> RngStream {
        RngStream::new(self.seed, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub selector: String,
    /// 1-based session number; domains `1..=session` are evaluated.
    pub session: usize,
    pub selection_accuracy: f64,
    /// Pooled accuracy on test samples of domains before this session.
    pub prior_accuracy: Option<f64>,
    pub domain_accuracy: Vec<f64>,
    pub confusion: Vec<Vec<f64>>,
    pub counts: Vec<Vec<u64>>,
    pub accuracy_proxy: f64,
    pub oracle_accuracy: f64,
    pub forgetting: Option<f64>,
    pub memory_params: usize,
    pub extra_params: usize,
    pub memory_ratio: f64,
    pub extra_ratio: f64,
    pub final_train_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub reports: Vec<SessionReport>,
    /// Everything the selector retains after the last session.
    pub store: ModelStore,
}

enum State {
    Soyo { store: DomainStore, net: Option<MdfnParams> },
    Nmc(Vec<Vec<f64>>),
    Kmeans(Vec<Vec<Vec<f64>>>),
}

/// Runs sessions `1..=T` in order. Only compressed summaries of earlier
/// domains are carried from one session to the next.
pub fn run_incremental(stream: &FeatureStream, kind: SelectorKind, cfg: &HarnessConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let t_max = stream.n_domains();
    if t_max == 0 {
        return Err(Error::EmptyInput);
    }
    let expert = ExpertMatrix::uniform(t_max, cfg.expert_diag, cfg.expert_off)?;
    let root = cfg.root();
    let mut state = match kind {
        SelectorKind::Soyo { .. } => State::Soyo { store: DomainStore::new(), net: None },
        SelectorKind::Nmc => State::Nmc(Vec::new()),
        SelectorKind::KmeansKnn { .. } => State::Kmeans(Vec::new()),
    };
    let mut reports = Vec::with_capacity(t_max);
    let mut history: Vec<Vec<f64>> = Vec::with_capacity(t_max);

    for tau in 0..t_max {
        let t = tau + 1;
        let cur = &stream.domains[tau].train;
        let mut final_loss = None;
        match (&mut state, kind) {
            (State::Soyo { store, net }, SelectorKind::Soyo { compressor, balance }) => {
                let tcfg = TrainConfig { seed: root.path(&[tags::TRAIN, t as u64]), ..cfg.train.clone() };
                let init_seed = tcfg.seed.substream(tags::INIT);
                *net = Some(if t == 1 {
                    init_params(cur.dim(), 1, &tcfg, init_seed)
                } else {
                    let (params, curve) = if balance {
                        let batch =
                            build_balanced_batch(store, cur.levels(), cur.n_rows(), root.path(&[tags::DFR, t as u64]))?;
                        match net.as_ref().filter(|_| cfg.warm_start) {
                            Some(prev) => train_from(&batch, widen_head(prev, t, init_seed), &tcfg)?,
                            None => train(&batch, t, &tcfg)?,
                        }
                    } else {
                        let batch = LabeledBatch::new(cur.levels().clone(), vec![DomainId(tau); cur.n_rows()], t)?;
                        let prev = net.as_ref().expect("network exists after session 1");
                        train_from(&batch, widen_head(prev, t, init_seed), &tcfg)?
                    };
                    final_loss = curve.last().copied();
                    params
                });
                let mut models = std::collections::BTreeMap::new();
                for (level, x) in cur.levels() {
                    let em = cfg.em.clone().with_seed(root.path(&[tags::EM, t as u64, level.tag()]));
                    models.insert(*level, fit_compressor(x, compressor, &em)?);
                }
                store.push(DomainRecord { models, n_train: cur.n_rows() });
            }
            (State::Nmc(c), _) => c.push(cur.level(LevelId::Last)?.column_means()?),
            (State::Kmeans(c), SelectorKind::KmeansKnn { m }) => {
                c.push(domain_centers(cur.level(LevelId::Last)?, m, root.path(&[tags::KMEANS, tau as u64]))?);
            }
            _ => unreachable!("state matches selector kind"),
        }

        let selector: Box<dyn DomainSelector + '_> = match &state {
            State::Soyo { net, .. } => Box::new(net.clone().expect("trained above")),
            State::Nmc(c) => Box::new(NmcModel::new(c.clone())?),
            State::Kmeans(c) => Box::new(KmeansKnnModel::new(c.clone())?),
        };
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        for split in &stream.domains[..t] {
            truth.extend_from_slice(split.test.labels());
            pred.extend(selector.select(split.test.levels())?);
        }
        let m = compute_selection_metrics(&truth, &pred, t)?;
        let domain_accuracy: Vec<f64> = m.domain_accuracy().into_iter().map(|a| a.unwrap_or(0.0)).collect();
        history.push(domain_accuracy.clone());
        let prior_accuracy = (t > 1).then(|| {
            let (hit, n) = truth
                .iter()
                .zip(&pred)
                .filter(|(y, _)| y.0 < tau)
                .fold((0usize, 0usize), |(h, n), (y, p)| (h + usize::from(y == p), n + 1));
            hit as f64 / n as f64
        });
        let sub = expert.leading(t)?;
        let (memory_params, extra_params) = match &state {
            State::Soyo { store, net } => (store.param_count(), net.as_ref().map_or(0, MdfnParams::param_count)),
            State::Nmc(c) => (c.iter().map(Vec::len).sum(), 0),
            State::Kmeans(c) => (c.iter().flatten().map(Vec::len).sum(), 0),
        };
        reports.push(SessionReport {
            selector: kind.name(),
            session: t,
            selection_accuracy: m.accuracy,
            prior_accuracy,
            domain_accuracy,
            accuracy_proxy: compute_accuracy_proxy(&m.counts, &sub)?,
            oracle_accuracy: oracle_accuracy(&m.counts, &sub)?,
            forgetting: if t >= 2 { Some(compute_forgetting(&history)?) } else { None },
            confusion: m.confusion,
            counts: m.counts,
            memory_params,
            extra_params,
            memory_ratio: memory_params as f64 / cfg.backbone_params,
            extra_ratio: extra_params as f64 / cfg.backbone_params,
            final_train_loss: final_loss,
        });
    }

    let mut store =
        ModelStore { provenance: Provenance { seed: cfg.seed, config_hash: String::new() }, ..ModelStore::default() };
    match state {
        State::Soyo { store: s, net } => {
            store.domains = s;
            store.mdfn = net;
        }
        State::Nmc(c) => store.nmc = Some(NmcModel::new(c)?),
        State::Kmeans(c) => store.kmeans = Some(KmeansKnnModel::new(c)?),
    }
    Ok(RunOutcome { reports, store })
}

/// Final-session summary of one selector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub selector: String,
    pub selection_accuracy: f64,
    pub prior_accuracy: Option<f64>,
    pub accuracy_proxy: f64,
    pub oracle_accuracy: f64,
    pub forgetting: Option<f64>,
    pub memory_params: usize,
    pub extra_params: usize,
    pub memory_ratio: f64,
    pub extra_ratio: f64,
}

impl From<&SessionReport> for ComparisonRow {
    fn from(r: &SessionReport) -> Self {
        Self {
            selector: r.selector.clone(),
            selection_accuracy: r.selection_accuracy,
            prior_accuracy: r.prior_accuracy,
            accuracy_proxy: r.accuracy_proxy,
            oracle_accuracy: r.oracle_accuracy,
            forgetting: r.forgetting,
            memory_params: r.memory_params,
            extra_params: r.extra_params,
            memory_ratio: r.memory_ratio,
            extra_ratio: r.extra_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub sessions: Vec<Vec<SessionReport>>,
}

/// Runs `kinds` on the same stream and seeds, in parallel.
pub fn compare_kinds(stream: &FeatureStream, kinds: &[SelectorKind], cfg: &HarnessConfig) -> Result<ComparisonReport> {
    let sessions: Vec<Vec<SessionReport>> =
        kinds.par_iter().map(|k| run_incremental(stream, *k, cfg).map(|o| o.reports)).collect::<Result<_>>()?;
    let rows = sessions.iter().map(|s| s.last().expect("at least one session").into()).collect();
    Ok(ComparisonReport { rows, sessions })
}

/// The standard line-up from [`HarnessConfig::lineup`].
pub fn compare_selectors(stream: &FeatureStream, cfg: &HarnessConfig) -> Result<ComparisonReport> {
    compare_kinds(stream, &cfg.lineup(), cfg)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const SESSION_CSV_HEADER: &str =
    "selector,session,s_t,prior_s_t,a_t,oracle_a_t,f_t,memory_params,extra_params,memory_ratio,extra_ratio,train_loss";

/// One line per session, columns as in [`SESSION_CSV_HEADER`].
pub fn sessions_to_csv(reports: &[SessionReport]) -> String {
    let mut out = String::from(SESSION_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.selector,
            r.session,
            r.selection_accuracy,
            opt(r.prior_accuracy),
            r.accuracy_proxy,
            r.oracle_accuracy,
            opt(r.forgetting),
            r.memory_params,
            r.extra_params,
            r.memory_ratio,
            r.extra_ratio,
            opt(r.final_train_loss)
        );
    }
    out
}

pub const COMPARISON_CSV_HEADER: &str =
    "selector,s_t,prior_s_t,a_t,oracle_a_t,f_t,memory_params,extra_params,memory_ratio,extra_ratio";

pub fn comparison_to_csv(report: &ComparisonReport) -> String {
    let mut out = String::from(COMPARISON_CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.selector,
            r.selection_accuracy,
            opt(r.prior_accuracy),
            r.accuracy_proxy,
            r.oracle_accuracy,
            opt(r.forgetting),
            r.memory_params,
            r.extra_params,
            r.memory_ratio,
            r.extra_ratio
        );
    }
    out
}

/// Row-normalized confusion of one session: `true_domain,pred_1..pred_t`.
pub fn confusion_to_csv(report: &SessionReport) -> String {
    let t = report.confusion.len();
    let mut out = String::from("true_domain");
    for j in 1..=t {
        let _ = write!(out, ",pred_{j}");
    }
    out.push('\n');
    for (i, row) in report.confusion.iter().enumerate() {
        let _ = write!(out, "{}", i + 1);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::stream::{generate_stream, StreamConfig};
    use crate::mdfn::TrainConfig;

    fn quick() -> HarnessConfig {
        HarnessConfig {
            train: TrainConfig { epochs: 5, ..TrainConfig::default() },
            em: EmConfig { n_restarts: 1, ..EmConfig::default() },
            pca_components: 2,
            ..HarnessConfig::default()
        }
    }

    fn stream(t: usize, sep: f64) -> FeatureStream {
        generate_stream(&StreamConfig {
            n_domains: t,
            dim: 6,
            n_train: 60,
            n_test: 30,
            domain_separation: sep,
            ..StreamConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn single_domain_is_perfect() {
        let s = stream(1, 3.0);
        for k in quick().lineup() {
            let out = run_incremental(&s, k, &quick()).unwrap();
            assert_eq!(out.reports.len(), 1);
            assert_eq!(out.reports[0].selection_accuracy, 1.0);
            assert!(out.reports[0].forgetting.is_none());
        }
    }

    #[test]
    fn reports_are_consistent_and_reproducible() {
        let s = stream(3, 3.0);
        let cfg = quick();
        let a = compare_selectors(&s, &cfg).unwrap();
        let b = compare_selectors(&s, &cfg).unwrap();
        assert_eq!(a, b);
        for run in &a.sessions {
            assert_eq!(run.len(), 3);
            for r in run {
                for row in &r.confusion {
                    assert!((row.iter().sum::<f64>() - 100.0).abs() < 0.1);
                }
                let total: u64 = r.counts.iter().flatten().sum();
                let diag: f64 =
                    (0..r.session).map(|i| r.counts[i].iter().sum::<u64>() as f64 * r.confusion[i][i] / 100.0).sum();
                assert!((diag / total as f64 - r.selection_accuracy).abs() < 1e-9);
                assert!(r.accuracy_proxy <= r.oracle_accuracy + 1e-15);
            }
        }
    }

    #[test]
    fn memory_accounting() {
        let s = stream(3, 3.0);
        let out = run_incremental(&s, quick().lineup()[0], &quick()).unwrap();
        let r = out.reports.last().unwrap();
        // 3 domains x 2 levels x ((K-1) + 2Kd) with K=2, d=6
        assert_eq!(r.memory_params, 3 * 2 * (1 + 2 * 2 * 6));
        assert_eq!(r.memory_ratio, r.memory_params as f64 / 86e6);
        assert_eq!(out.store.memory_params(), r.memory_params);
        assert_eq!(out.store.selector_params(), r.extra_params);
    }

    #[test]
    fn store_keeps_only_summaries() {
        let s = stream(2, 3.0);
        let out = run_incremental(&s, quick().lineup()[0], &quick()).unwrap();
        assert_eq!(out.store.domains.len(), 2);
        let text = out.store.to_text();
        let raw = s.domains[0].train.level(LevelId::Last).unwrap().row(0)[0];
        assert!(!text.contains(&format!("{raw:.16e}")));
    }

    #[test]
    fn csv_shapes() {
        let s = stream(2, 3.0);
        let out = run_incremental(&s, SelectorKind::Nmc, &quick()).unwrap();
        let csv = sessions_to_csv(&out.reports);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1].split(',').count(), lines[0].split(',').count());
        let conf = confusion_to_csv(&out.reports[1]);
        assert!(conf.starts_with("true_domain,pred_1,pred_2\n"));
    }
}
