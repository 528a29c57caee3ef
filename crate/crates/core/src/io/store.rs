//! Versioned text persistence for everything a trained selector keeps.
//!
//! ```text
//! soyo-store 1
//! provenance seed=42 config_hash=3f1c...
//! domain 1 n_train=500
//! model level=mid kind=gmm k=2 dim=4 cov=diag
//! weights 4.0000000000000000e-1 6.0000000000000000e-1
//! mean ...
//! cov ...
//! end
//! mdfn dim=4 domains=2 hidden=16 activation=relu aux=mid refine=1
//! aux.mid.w1 ...
//! end
//! nmc domains=2 dim=4
//! centroid ...
//! end
//! kmeans domains=2 m=5 dim=4
//! center 0 ...
//! end
//! ```
//!
//! Every float is written with 17 significant digits, so loading reproduces
//! the saved values bit for bit. Blank lines are ignored.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::dfr::{DomainRecord, DomainStore};
use crate::error::{Error, Result};
use crate::gmc::{CompressedModel, CovKind, Covariance, GmmModel, MeanStdModel, ParamCount, PcaModel};
use crate::mdfn::{Activation, FusionSpec, MdfnParams};
use crate::selectors::{KmeansKnnModel, NmcModel};
use crate::types::LevelId;

pub const STORE_VERSION: u32 = 1;
const HEADER: &str = "soyo-store";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelStore {
    pub provenance: Provenance,
    pub domains: DomainStore,
    pub mdfn: Option<MdfnParams>,
    pub nmc: Option<NmcModel>,
    pub kmeans: Option<KmeansKnnModel>,
}

fn push_floats(out: &mut String, key: &str, vals: &[f64]) {
    out.push_str(key);
    for v in vals {
        let _ = write!(out, " {v:.16e}");
    }
    out.push('\n');
}

impl ModelStore {
    /// Compressed-memory parameter count (all domain records).
    pub fn memory_params(&self) -> usize {
        self.domains.param_count()
    }

    /// Parameters of the routing components (network or centroids).
    pub fn selector_params(&self) -> usize {
        self.mdfn.as_ref().map_or(0, MdfnParams::param_count)
            + self.nmc.as_ref().map_or(0, NmcModel::param_count)
            + self.kmeans.as_ref().map_or(0, KmeansKnnModel::param_count)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER} {STORE_VERSION}");
        let p = &self.provenance;
        let hash = if p.config_hash.is_empty() { "-" } else { &p.config_hash };
        let _ = writeln!(out, "provenance seed={} config_hash={hash}", p.seed);
        for (i, rec) in self.domains.records().iter().enumerate() {
            let _ = writeln!(out, "domain {} n_train={}", i + 1, rec.n_train);
            for (level, model) in &rec.models {
                write_model(&mut out, *level, model);
            }
        }
        if let Some(m) = &self.mdfn {
            let fusion = m.fusion();
            let aux: Vec<String> = fusion.aux_levels.iter().map(ToString::to_string).collect();
            let hidden = m.aux.first().map(|(_, a)| a.hidden).or(m.refine.as_ref().map(|r| r.hidden)).unwrap_or(0);
            let _ = writeln!(
                out,
                "mdfn dim={} domains={} hidden={hidden} activation={} aux={} refine={}",
                m.dim,
                m.n_domains(),
                m.activation.as_str(),
                if aux.is_empty() { "-".to_string() } else { aux.join(",") },
                u8::from(fusion.refine_last)
            );
            for t in m.tensors() {
                push_floats(&mut out, &t.name, t.data);
            }
            out.push_str("end\n");
        }
        if let Some(m) = &self.nmc {
            let _ = writeln!(out, "nmc domains={} dim={}", m.centroids.len(), m.dim());
            for c in &m.centroids {
                push_floats(&mut out, "centroid", c);
            }
            out.push_str("end\n");
        }
        if let Some(m) = &self.kmeans {
            let _ = writeln!(out, "kmeans domains={} m={} dim={}", m.centers.len(), m.m, m.dim());
            for (tau, cs) in m.centers.iter().enumerate() {
                for c in cs {
                    push_floats(&mut out, &format!("center {tau}"), c);
                }
            }
            out.push_str("end\n");
        }
        out
    }

    pub fn from_text(src: &str) -> Result<Self> {
        Parser::new(src).parse()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::format(e.valid_up_to() as u64, "invalid UTF-8"))?;
        Self::from_text(text)
    }
}

fn write_model(out: &mut String, level: LevelId, model: &CompressedModel) {
    match model {
        CompressedModel::Gmm(g) => {
            let _ =
                writeln!(out, "model level={level} kind=gmm k={} dim={} cov={}", g.k(), g.dim(), g.cov_kind().as_str());
            push_floats(out, "weights", g.weights());
            for (mu, cov) in g.means().iter().zip(g.covariances()) {
                push_floats(out, "mean", mu);
                let c = match cov {
                    Covariance::Diagonal(v) | Covariance::Full(v) => v,
                };
                push_floats(out, "cov", c);
            }
        }
        CompressedModel::MeanStd(m) => {
            let _ = writeln!(out, "model level={level} kind=meanstd dim={}", m.dim());
            push_floats(out, "mean", &m.mean);
            push_floats(out, "std", &m.std);
        }
        CompressedModel::Pca(m) => {
            let _ = writeln!(out, "model level={level} kind=pca n={} dim={}", m.n_components(), m.dim());
            push_floats(out, "mean", &m.mean);
            for c in &m.components {
                push_floats(out, "component", c);
            }
            push_floats(out, "variances", &m.variances);
        }
    }
    out.push_str("end\n");
}

struct Line<'a> {
    offset: u64,
    toks: Vec<&'a str>,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    peeked: Option<Line<'a>>,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0, peeked: None }
    }

    fn next_line(&mut self) -> Option<Line<'a>> {
        if let Some(l) = self.peeked.take() {
            return Some(l);
        }
        while self.pos < self.src.len() {
            let start = self.pos;
            let rest = &self.src[start..];
            let end = rest.find('\n').map_or(self.src.len(), |i| start + i);
            self.pos = if end < self.src.len() { end + 1 } else { end };
            let toks: Vec<&str> = self.src[start..end].split_ascii_whitespace().collect();
            if !toks.is_empty() {
                return Some(Line { offset: start as u64, toks });
            }
        }
        None
    }

    fn peek(&mut self) -> Option<&Line<'a>> {
        if self.peeked.is_none() {
            self.peeked = self.next_line();
        }
        self.peeked.as_ref()
    }

    fn tok_offset(&self, tok: &str) -> u64 {
        (tok.as_ptr() as usize - self.src.as_ptr() as usize) as u64
    }

    fn expect_line(&mut self, what: &str) -> Result<Line<'a>> {
        let at = self.src.len() as u64;
        self.next_line().ok_or_else(|| Error::format(at, format!("unexpected end of input, expected {what}")))
    }

    fn expect_key(&mut self, key: &str) -> Result<Line<'a>> {
        let line = self.expect_line(key)?;
        if line.toks[0] != key {
            return Err(Error::format(line.offset, format!("expected '{key}', found '{}'", line.toks[0])));
        }
        Ok(line)
    }

    fn kv(&self, line: &Line<'a>, key: &str) -> Result<&'a str> {
        line.toks[1..]
            .iter()
            .find_map(|t| t.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| Error::format(line.offset, format!("missing field '{key}'")))
    }

    fn kv_num<T: FromStr>(&self, line: &Line<'a>, key: &str) -> Result<T> {
        let v = self.kv(line, key)?;
        v.parse().map_err(|_| Error::format(self.tok_offset(v), format!("invalid value for '{key}'")))
    }

    fn floats(&self, line: &Line<'a>, skip: usize, expected: usize) -> Result<Vec<f64>> {
        let toks = &line.toks[skip..];
        if toks.len() != expected {
            return Err(Error::format(line.offset, format!("expected {expected} values, found {}", toks.len())));
        }
        toks.iter()
            .map(|t| {
                let v: f64 =
                    t.parse().map_err(|_| Error::format(self.tok_offset(t), format!("invalid number '{t}'")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::format(self.tok_offset(t), "non-finite value"))
                }
            })
            .collect()
    }

    fn float_line(&mut self, key: &str, expected: usize) -> Result<Vec<f64>> {
        let line = self.expect_key(key)?;
        self.floats(&line, 1, expected)
    }

    fn end(&mut self) -> Result<()> {
        self.expect_key("end").map(|_| ())
    }

    fn parse(mut self) -> Result<ModelStore> {
        let head = self.expect_line("header")?;
        if head.toks.len() != 2 || head.toks[0] != HEADER {
            return Err(Error::format(head.offset, "not a model store"));
        }
        if head.toks[1] != STORE_VERSION.to_string() {
            return Err(Error::format(self.tok_offset(head.toks[1]), "unsupported version"));
        }
        let prov = self.expect_key("provenance")?;
        let hash = self.kv(&prov, "config_hash")?;
        let mut store = ModelStore {
            provenance: Provenance {
                seed: self.kv_num(&prov, "seed")?,
                config_hash: if hash == "-" { String::new() } else { hash.to_string() },
            },
            ..ModelStore::default()
        };
        let mut records = Vec::new();
        while let Some(line) = self.next_line() {
            let at = line.offset;
            match line.toks[0] {
                "domain" if store.mdfn.is_none() && store.nmc.is_none() && store.kmeans.is_none() => {
                    let idx: usize = line
                        .toks
                        .get(1)
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::format(at, "missing domain number"))?;
                    if idx != records.len() + 1 {
                        return Err(Error::format(at, format!("expected domain {}", records.len() + 1)));
                    }
                    let mut rec = DomainRecord { models: Default::default(), n_train: self.kv_num(&line, "n_train")? };
                    while self.peek().is_some_and(|l| l.toks[0] == "model") {
                        let model_line = self.next_line().expect("peeked");
                        let level: LevelId = self
                            .kv(&model_line, "level")?
                            .parse()
                            .map_err(|_| Error::format(model_line.offset, "invalid level"))?;
                        let model = self.model(&model_line)?;
                        if rec.models.insert(level, model).is_some() {
                            return Err(Error::format(model_line.offset, "duplicate level"));
                        }
                    }
                    records.push(rec);
                }
                "mdfn" if store.mdfn.is_none() => store.mdfn = Some(self.mdfn(&line)?),
                "nmc" if store.nmc.is_none() => store.nmc = Some(self.nmc(&line)?),
                "kmeans" if store.kmeans.is_none() => store.kmeans = Some(self.kmeans(&line)?),
                other => return Err(Error::format(at, format!("unexpected '{other}'"))),
            }
        }
        store.domains = DomainStore::from_records(records);
        Ok(store)
    }

    fn model(&mut self, line: &Line<'a>) -> Result<CompressedModel> {
        let at = line.offset;
        let dim: usize = self.kv_num(line, "dim")?;
        if dim == 0 {
            return Err(Error::format(at, "dim must be at least 1"));
        }
        let invalid = |e: Error| Error::format(at, format!("invalid model: {e}"));
        let model = match self.kv(line, "kind")? {
            "gmm" => {
                let k: usize = self.kv_num(line, "k")?;
                let cov: CovKind =
                    self.kv(line, "cov")?.parse().map_err(|_| Error::format(at, "invalid covariance kind"))?;
                let weights = self.float_line("weights", k)?;
                let mut means = Vec::with_capacity(k);
                let mut covs = Vec::with_capacity(k);
                for _ in 0..k {
                    means.push(self.float_line("mean", dim)?);
                    covs.push(match cov {
                        CovKind::Diagonal => Covariance::Diagonal(self.float_line("cov", dim)?),
                        CovKind::Full => Covariance::Full(self.float_line("cov", dim * dim)?),
                    });
                }
                CompressedModel::Gmm(GmmModel::new(weights, means, covs).map_err(invalid)?)
            }
            "meanstd" => {
                let mean = self.float_line("mean", dim)?;
                let std = self.float_line("std", dim)?;
                CompressedModel::MeanStd(MeanStdModel::new(mean, std).map_err(invalid)?)
            }
            "pca" => {
                let n: usize = self.kv_num(line, "n")?;
                let mean = self.float_line("mean", dim)?;
                let comps = (0..n).map(|_| self.float_line("component", dim)).collect::<Result<_>>()?;
                let vars = self.float_line("variances", n)?;
                CompressedModel::Pca(PcaModel::new(mean, comps, vars).map_err(invalid)?)
            }
            other => return Err(Error::format(at, format!("unknown model kind '{other}'"))),
        };
        self.end()?;
        Ok(model)
    }

    fn mdfn(&mut self, line: &Line<'a>) -> Result<MdfnParams> {
        let at = line.offset;
        let dim: usize = self.kv_num(line, "dim")?;
        let domains: usize = self.kv_num(line, "domains")?;
        let hidden: usize = self.kv_num(line, "hidden")?;
        let activation: Activation =
            self.kv(line, "activation")?.parse().map_err(|_| Error::format(at, "invalid activation"))?;
        let aux = self.kv(line, "aux")?;
        let aux_levels = if aux == "-" {
            Vec::new()
        } else {
            aux.split(',')
                .map(|s| s.parse().map_err(|_| Error::format(at, format!("invalid level '{s}'"))))
                .collect::<Result<_>>()?
        };
        let refine_last = match self.kv(line, "refine")? {
            "1" => true,
            "0" => false,
            _ => return Err(Error::format(at, "refine must be 0 or 1")),
        };
        if dim == 0 || domains == 0 {
            return Err(Error::format(at, "dim and domains must be at least 1"));
        }
        let fusion = FusionSpec { aux_levels, refine_last };
        let mut params = MdfnParams::zeros(dim, domains, hidden, &fusion, activation);
        let shapes: Vec<(String, usize)> = params.tensors().iter().map(|t| (t.name.clone(), t.data.len())).collect();
        for ((name, len), slot) in shapes.into_iter().zip(params.tensors_mut()) {
            slot.data.copy_from_slice(&self.float_line(&name, len)?);
        }
        self.end()?;
        params.validate().map_err(|e| Error::format(at, format!("invalid network: {e}")))?;
        Ok(params)
    }

    fn nmc(&mut self, line: &Line<'a>) -> Result<NmcModel> {
        let domains: usize = self.kv_num(line, "domains")?;
        let dim: usize = self.kv_num(line, "dim")?;
        let c = (0..domains).map(|_| self.float_line("centroid", dim)).collect::<Result<_>>()?;
        self.end()?;
        NmcModel::new(c).map_err(|e| Error::format(line.offset, format!("invalid nmc block: {e}")))
    }

    fn kmeans(&mut self, line: &Line<'a>) -> Result<KmeansKnnModel> {
        let domains: usize = self.kv_num(line, "domains")?;
        let m: usize = self.kv_num(line, "m")?;
        let dim: usize = self.kv_num(line, "dim")?;
        let mut centers = vec![Vec::with_capacity(m); domains];
        for tau in 0..domains {
            for _ in 0..m {
                let l = self.expect_key("center")?;
                if l.toks.get(1) != Some(&tau.to_string().as_str()) {
                    return Err(Error::format(l.offset, format!("expected center for domain {tau}")));
                }
                centers[tau].push(self.floats(&l, 2, dim)?);
            }
        }
        self.end()?;
        KmeansKnnModel::new(centers).map_err(|e| Error::format(line.offset, format!("invalid kmeans block: {e}")))
    }
}

impl ParamCount for ModelStore {
    fn param_count(&self) -> usize {
        self.memory_params() + self.selector_params()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecordSummary {
    /// 1-based.
    pub domain: usize,
    pub level: LevelId,
    pub kind: &'static str,
    pub detail: String,
    pub params: usize,
}

/// Parameter accounting for a store, relative to a backbone size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StoreSummary {
    pub records: Vec<RecordSummary>,
    pub compressor_params: usize,
    pub selector_params: usize,
    /// Everything stored beyond the backbone: compressors plus selector.
    pub extra_params: usize,
    pub backbone_params: f64,
    pub extra_ratio: f64,
}

impl ModelStore {
    pub fn summary(&self, backbone_params: f64) -> StoreSummary {
        let mut records = Vec::new();
        for (i, rec) in self.domains.records().iter().enumerate() {
            for (level, m) in &rec.models {
                let detail = match m {
                    CompressedModel::Gmm(g) => format!("K={} d={} cov={}", g.k(), g.dim(), g.cov_kind().as_str()),
                    CompressedModel::MeanStd(s) => format!("d={}", s.dim()),
                    CompressedModel::Pca(p) => format!("N={} d={}", p.n_components(), p.dim()),
                };
                records.push(RecordSummary {
                    domain: i + 1,
                    level: *level,
                    kind: m.kind_name(),
                    detail,
                    params: m.param_count(),
                });
            }
        }
        let compressor_params = self.memory_params();
        let selector_params = self.selector_params();
        let extra = compressor_params + selector_params;
        StoreSummary {
            records,
            compressor_params,
            selector_params,
            extra_params: extra,
            backbone_params,
            extra_ratio: extra as f64 / backbone_params,
        }
    }
}

impl std::fmt::Display for StoreSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<8}{:<8}{:<10}{:<24}{:>10}", "domain", "level", "kind", "shape", "params")?;
        for r in &self.records {
            writeln!(f, "{:<8}{:<8}{:<10}{:<24}{:>10}", r.domain, r.level.to_string(), r.kind, r.detail, r.params)?;
        }
        writeln!(f, "compressor params: {}", self.compressor_params)?;
        writeln!(f, "selector params: {}", self.selector_params)?;
        writeln!(f, "extra params: {}", self.extra_params)?;
        write!(f, "extra / backbone ({}): {:.6}%", self.backbone_params, 100.0 * self.extra_ratio)
    }
}
