//! Multi-level domain feature fusion network.
//!
//! The fused feature is `x_last + sum_a g_a(x_a) + g_r(x_last)`, where each
//! `g` is a one-hidden-layer MLP, `x_a` are auxiliary (shallower) levels and
//! `g_r` refines the last level. A linear head maps the fused feature to one
//! logit per known domain. Only these parameters are trained; the input
//! features are constants.
//!
//! The standard configuration has one auxiliary level ([`LevelId::Mid`]) and
//! the refinement MLP enabled. Dropping both reduces the network to a linear
//! head on the last-level features.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_sum_exp_unchecked, softmax_into};
use crate::rng::{tags, RngStream, StreamRng};
use crate::types::{argmax, DomainId, FeatureMatrix, LabeledBatch, LevelId, ProbVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative given the pre-activation and the activation value.
    fn grad(self, pre: f64, act: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - act * act,
            Activation::Identity => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            _ => Err(Error::InvalidConfig(format!("unknown activation '{s}'"))),
        }
    }
}

/// `d_in -> hidden -> d_out` perceptron. Weights are row-major
/// (`w1` is `hidden x d_in`, `w2` is `d_out x hidden`).
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            d_in,
            hidden,
            d_out,
            w1: vec![0.0; hidden * d_in],
            b1: vec![0.0; hidden],
            w2: vec![0.0; d_out * hidden],
            b2: vec![0.0; d_out],
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn check(&self) -> Result<()> {
        let ok = self.w1.len() == self.hidden * self.d_in
            && self.b1.len() == self.hidden
            && self.w2.len() == self.d_out * self.hidden
            && self.b2.len() == self.d_out;
        if !ok {
            return Err(Error::InvalidConfig("MLP parameter shapes are inconsistent".into()));
        }
        Ok(())
    }

    /// Adds `g(x)` to `out`, recording hidden pre-activations and activations.
    fn forward_into(&self, act: Activation, x: &[f64], pre: &mut [f64], hid: &mut [f64], out: &mut [f64]) {
        for h in 0..self.hidden {
            let row = &self.w1[h * self.d_in..(h + 1) * self.d_in];
            let p = self.b1[h] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            pre[h] = p;
            hid[h] = act.apply(p);
        }
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            *out_v += self.b2[o] + row.iter().zip(hid.iter()).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients given `d(loss)/d(output)`.
    #[allow(clippy::too_many_arguments)]
    fn backward_into(
        &self,
        act: Activation,
        x: &[f64],
        pre: &[f64],
        hid: &[f64],
        d_out: &[f64],
        d_hid: &mut [f64],
        grad: &mut MlpParams,
    ) {
        d_hid.iter_mut().for_each(|v| *v = 0.0);
        for (o, g) in d_out.iter().enumerate() {
            grad.b2[o] += g;
            let gw = &mut grad.w2[o * self.hidden..(o + 1) * self.hidden];
            let w = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            for h in 0..self.hidden {
                gw[h] += g * hid[h];
                d_hid[h] += w[h] * g;
            }
        }
        for h in 0..self.hidden {
            let dp = d_hid[h] * act.grad(pre[h], hid[h]);
            if dp == 0.0 {
                continue;
            }
            grad.b1[h] += dp;
            let gw = &mut grad.w1[h * self.d_in..(h + 1) * self.d_in];
            gw.iter_mut().zip(x).for_each(|(g, v)| *g += dp * v);
        }
    }
}

/// Linear domain head: `n_domains x dim` weights plus biases.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub n_domains: usize,
    pub dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(n_domains: usize, dim: usize) -> Self {
        Self { n_domains, dim, w: vec![0.0; n_domains * dim], b: vec![0.0; n_domains] }
    }
}

/// Which levels feed the fusion.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSpec {
    pub aux_levels: Vec<LevelId>,
    pub refine_last: bool,
}

impl Default for FusionSpec {
    fn default() -> Self {
        Self { aux_levels: vec![LevelId::Mid], refine_last: true }
    }
}

impl FusionSpec {
    /// Linear head on last-level features only.
    pub fn last_only() -> Self {
        Self { aux_levels: Vec::new(), refine_last: false }
    }

    pub fn levels(&self) -> Vec<LevelId> {
        let mut v = self.aux_levels.clone();
        v.push(LevelId::Last);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdfnParams {
    pub dim: usize,
    pub activation: Activation,
    pub aux: Vec<(LevelId, MlpParams)>,
    pub refine: Option<MlpParams>,
    pub head: HeadParams,
}

/// Borrowed view of one parameter tensor.
pub struct ParamTensor<'a> {
    pub name: String,
    pub data: &'a [f64],
    pub is_bias: bool,
}

pub struct ParamTensorMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
    pub is_bias: bool,
}

impl MdfnParams {
    pub fn zeros(dim: usize, n_domains: usize, hidden: usize, fusion: &FusionSpec, activation: Activation) -> Self {
        Self {
            dim,
            activation,
            aux: fusion.aux_levels.iter().map(|l| (*l, MlpParams::zeros(dim, hidden, dim))).collect(),
            refine: fusion.refine_last.then(|| MlpParams::zeros(dim, hidden, dim)),
            head: HeadParams::zeros(n_domains, dim),
        }
    }

    pub fn n_domains(&self) -> usize {
        self.head.n_domains
    }

    pub fn fusion(&self) -> FusionSpec {
        FusionSpec { aux_levels: self.aux.iter().map(|(l, _)| *l).collect(), refine_last: self.refine.is_some() }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn validate(&self) -> Result<()> {
        for (_, m) in &self.aux {
            m.check()?;
            if m.d_in != self.dim || m.d_out != self.dim {
                return Err(Error::dims(self.dim, m.d_in));
            }
        }
        if let Some(m) = &self.refine {
            m.check()?;
            if m.d_in != self.dim || m.d_out != self.dim {
                return Err(Error::dims(self.dim, m.d_in));
            }
        }
        let h = &self.head;
        if h.n_domains == 0 || h.dim != self.dim || h.w.len() != h.n_domains * h.dim || h.b.len() != h.n_domains {
            return Err(Error::InvalidConfig("head parameter shapes are inconsistent".into()));
        }
        if self.tensors().iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(0));
        }
        Ok(())
    }

    /// All tensors in a fixed order: auxiliary MLPs, refinement MLP, head.
    pub fn tensors(&self) -> Vec<ParamTensor<'_>> {
        let mut out = Vec::new();
        for (l, m) in &self.aux {
            push_mlp(&mut out, format!("aux.{l}"), m);
        }
        if let Some(m) = &self.refine {
            push_mlp(&mut out, "refine".into(), m);
        }
        out.push(ParamTensor { name: "head.w".into(), data: &self.head.w, is_bias: false });
        out.push(ParamTensor { name: "head.b".into(), data: &self.head.b, is_bias: true });
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<ParamTensorMut<'_>> {
        let mut out = Vec::new();
        for (l, m) in self.aux.iter_mut() {
            let p = format!("aux.{l}");
            out.push(ParamTensorMut { name: format!("{p}.w1"), data: &mut m.w1, is_bias: false });
            out.push(ParamTensorMut { name: format!("{p}.b1"), data: &mut m.b1, is_bias: true });
            out.push(ParamTensorMut { name: format!("{p}.w2"), data: &mut m.w2, is_bias: false });
            out.push(ParamTensorMut { name: format!("{p}.b2"), data: &mut m.b2, is_bias: true });
        }
        if let Some(m) = self.refine.as_mut() {
            out.push(ParamTensorMut { name: "refine.w1".into(), data: &mut m.w1, is_bias: false });
            out.push(ParamTensorMut { name: "refine.b1".into(), data: &mut m.b1, is_bias: true });
            out.push(ParamTensorMut { name: "refine.w2".into(), data: &mut m.w2, is_bias: false });
            out.push(ParamTensorMut { name: "refine.b2".into(), data: &mut m.b2, is_bias: true });
        }
        out.push(ParamTensorMut { name: "head.w".into(), data: &mut self.head.w, is_bias: false });
        out.push(ParamTensorMut { name: "head.b".into(), data: &mut self.head.b, is_bias: true });
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn scratch(&self) -> Scratch {
        let hidden = self.aux.first().map(|(_, m)| m.hidden).or(self.refine.as_ref().map(|m| m.hidden)).unwrap_or(0);
        let n_mlp = self.aux.len() + usize::from(self.refine.is_some());
        Scratch {
            pre: vec![vec![0.0; hidden]; n_mlp],
            hid: vec![vec![0.0; hidden]; n_mlp],
            d_hid: vec![0.0; hidden],
            fused: vec![0.0; self.dim],
            d_fused: vec![0.0; self.dim],
            logits: vec![0.0; self.head.n_domains],
            probs: vec![0.0; self.head.n_domains],
        }
    }

    /// Resolves the level matrices this network reads, in fusion order.
    fn inputs<'a>(&self, levels: &'a BTreeMap<LevelId, FeatureMatrix>) -> Result<Inputs<'a>> {
        let get = |l: LevelId| {
            levels.get(&l).ok_or_else(|| Error::IncompleteStore(format!("missing level {l}"))).and_then(|m| {
                if m.dim() == self.dim {
                    Ok(m)
                } else {
                    Err(Error::dims(self.dim, m.dim()))
                }
            })
        };
        Ok(Inputs { aux: self.aux.iter().map(|(l, _)| get(*l)).collect::<Result<_>>()?, last: get(LevelId::Last)? })
    }

    /// Runs fusion and head for one sample, leaving results in `s`.
    fn forward_sample(&self, aux: &[&[f64]], last: &[f64], s: &mut Scratch) {
        s.fused.copy_from_slice(last);
        for (i, ((_, m), x)) in self.aux.iter().zip(aux).enumerate() {
            m.forward_into(self.activation, x, &mut s.pre[i], &mut s.hid[i], &mut s.fused);
        }
        if let Some(m) = &self.refine {
            let i = self.aux.len();
            m.forward_into(self.activation, last, &mut s.pre[i], &mut s.hid[i], &mut s.fused);
        }
        let h = &self.head;
        for k in 0..h.n_domains {
            let row = &h.w[k * h.dim..(k + 1) * h.dim];
            s.logits[k] = h.b[k] + row.iter().zip(&s.fused).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Fused feature for explicitly supplied auxiliary inputs.
    pub fn fuse(&self, aux: &[&[f64]], last: &[f64]) -> Result<Vec<f64>> {
        self.check_sample(aux, last)?;
        let mut s = self.scratch();
        self.forward_sample(aux, last, &mut s);
        Ok(s.fused)
    }

    fn check_sample(&self, aux: &[&[f64]], last: &[f64]) -> Result<()> {
        if aux.len() != self.aux.len() {
            return Err(Error::LengthMismatch { left: aux.len(), right: self.aux.len() });
        }
        for x in aux.iter().chain(std::iter::once(&last)) {
            if x.len() != self.dim {
                return Err(Error::dims(self.dim, x.len()));
            }
        }
        Ok(())
    }

    /// Predicted domain and probabilities for one sample.
    pub fn predict_sample(&self, aux: &[&[f64]], last: &[f64]) -> Result<(DomainId, ProbVector)> {
        self.check_sample(aux, last)?;
        let mut s = self.scratch();
        self.forward_sample(aux, last, &mut s);
        softmax_into(&s.logits, &mut s.probs);
        Ok((DomainId(argmax(&s.logits)), ProbVector::new(s.probs)?))
    }

    pub fn predict_batch(&self, levels: &BTreeMap<LevelId, FeatureMatrix>) -> Result<Vec<DomainId>> {
        let inp = self.inputs(levels)?;
        let mut s = self.scratch();
        let mut aux: Vec<&[f64]> = Vec::with_capacity(inp.aux.len());
        (0..inp.last.n_rows())
            .map(|i| {
                aux.clear();
                aux.extend(inp.aux.iter().map(|m| m.row(i)));
                self.forward_sample(&aux, inp.last.row(i), &mut s);
                Ok(DomainId(argmax(&s.logits)))
            })
            .collect()
    }

    /// Fused features for every row, for export and plotting.
    pub fn fuse_batch(&self, levels: &BTreeMap<LevelId, FeatureMatrix>) -> Result<FeatureMatrix> {
        let inp = self.inputs(levels)?;
        let mut s = self.scratch();
        let mut data = Vec::with_capacity(inp.last.n_rows() * self.dim);
        for i in 0..inp.last.n_rows() {
            let aux: Vec<&[f64]> = inp.aux.iter().map(|m| m.row(i)).collect();
            self.forward_sample(&aux, inp.last.row(i), &mut s);
            data.extend_from_slice(&s.fused);
        }
        FeatureMatrix::new(inp.last.n_rows(), self.dim, data)
    }
}

fn push_mlp<'a>(out: &mut Vec<ParamTensor<'a>>, prefix: String, m: &'a MlpParams) {
    out.push(ParamTensor { name: format!("{prefix}.w1"), data: &m.w1, is_bias: false });
    out.push(ParamTensor { name: format!("{prefix}.b1"), data: &m.b1, is_bias: true });
    out.push(ParamTensor { name: format!("{prefix}.w2"), data: &m.w2, is_bias: false });
    out.push(ParamTensor { name: format!("{prefix}.b2"), data: &m.b2, is_bias: true });
}

struct Inputs<'a> {
    aux: Vec<&'a FeatureMatrix>,
    last: &'a FeatureMatrix,
}

struct Scratch {
    pre: Vec<Vec<f64>>,
    hid: Vec<Vec<f64>>,
    d_hid: Vec<f64>,
    fused: Vec<f64>,
    d_fused: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

/// Two-level fusion `x_last + g1(x_mid) + g2(x_last)`. Networks without an
/// auxiliary MLP ignore `x_mid` apart from the dimension check.
pub fn forward_fuse(x_mid: &[f64], x_last: &[f64], params: &MdfnParams) -> Result<Vec<f64>> {
    if x_mid.len() != x_last.len() {
        return Err(Error::dims(x_last.len(), x_mid.len()));
    }
    match params.aux.len() {
        0 => params.fuse(&[], x_last),
        1 => params.fuse(&[x_mid], x_last),
        n => Err(Error::LengthMismatch { left: 1, right: n }),
    }
}

/// `w x + b`.
pub fn forward_logits(x_fused: &[f64], head: &HeadParams) -> Result<Vec<f64>> {
    if x_fused.len() != head.dim {
        return Err(Error::dims(head.dim, x_fused.len()));
    }
    Ok((0..head.n_domains)
        .map(|k| {
            head.b[k] + head.w[k * head.dim..(k + 1) * head.dim].iter().zip(x_fused).map(|(w, v)| w * v).sum::<f64>()
        })
        .collect())
}

/// `-ln softmax(logits)[label]`, via log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: DomainId) -> Result<f64> {
    if label.0 >= logits.len() {
        return Err(Error::BadLabel { label: label.0, n_domains: logits.len() });
    }
    Ok(log_sum_exp_unchecked(logits) - logits[label.0])
}

/// Two-level prediction; see [`forward_fuse`].
pub fn predict(x_mid: &[f64], x_last: &[f64], params: &MdfnParams) -> Result<(DomainId, ProbVector)> {
    if x_mid.len() != x_last.len() {
        return Err(Error::dims(x_last.len(), x_mid.len()));
    }
    match params.aux.len() {
        0 => params.predict_sample(&[], x_last),
        1 => params.predict_sample(&[x_mid], x_last),
        n => Err(Error::LengthMismatch { left: 1, right: n }),
    }
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(batch: &LabeledBatch, params: &MdfnParams) -> Result<(f64, MdfnParams)> {
    let rows: Vec<usize> = (0..batch.n_rows()).collect();
    loss_and_grad_rows(batch, params, &rows)
}

/// As [`loss_and_grad`] restricted to `rows` (duplicates allowed).
pub fn loss_and_grad_rows(batch: &LabeledBatch, params: &MdfnParams, rows: &[usize]) -> Result<(f64, MdfnParams)> {
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    let inp = params.inputs(batch.levels())?;
    let t = params.n_domains();
    if let Some(bad) = batch.labels().iter().find(|l| l.0 >= t) {
        return Err(Error::BadLabel { label: bad.0, n_domains: t });
    }
    let mut grad = params.zeros_like();
    let mut s = params.scratch();
    let scale = 1.0 / rows.len() as f64;
    let mut total = 0.0;
    let mut aux: Vec<&[f64]> = Vec::with_capacity(inp.aux.len());
    for &i in rows {
        aux.clear();
        aux.extend(inp.aux.iter().map(|m| m.row(i)));
        let last = inp.last.row(i);
        let label = batch.labels()[i].0;
        params.forward_sample(&aux, last, &mut s);
        total += log_sum_exp_unchecked(&s.logits) - s.logits[label];

        softmax_into(&s.logits, &mut s.probs);
        s.probs[label] -= 1.0;
        s.probs.iter_mut().for_each(|p| *p *= scale);

        let h = &params.head;
        s.d_fused.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..t {
            let g = s.probs[k];
            grad.head.b[k] += g;
            let gw = &mut grad.head.w[k * h.dim..(k + 1) * h.dim];
            let w = &h.w[k * h.dim..(k + 1) * h.dim];
            for j in 0..h.dim {
                gw[j] += g * s.fused[j];
                s.d_fused[j] += w[j] * g;
            }
        }
        for (a, ((_, m), x)) in params.aux.iter().zip(&aux).enumerate() {
            m.backward_into(params.activation, x, &s.pre[a], &s.hid[a], &s.d_fused, &mut s.d_hid, &mut grad.aux[a].1);
        }
        if let (Some(m), Some(g)) = (&params.refine, grad.refine.as_mut()) {
            let a = params.aux.len();
            m.backward_into(params.activation, last, &s.pre[a], &s.hid[a], &s.d_fused, &mut s.d_hid, g);
        }
    }
    Ok((total * scale, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub fusion: FusionSpec,
    #[serde(skip)]
    pub seed: RngStream,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            weight_decay: 2e-4,
            epochs: 100,
            batch_size: 64,
            hidden: 16,
            activation: Activation::Relu,
            fusion: FusionSpec::default(),
            seed: RngStream::new(0, 0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0 and weight_decay >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig("epochs, batch_size and hidden must be >= 1".into()));
        }
        Ok(())
    }
}

/// `w <- w - lr (grad + wd w)`; biases skip the decay term.
pub fn sgd_step(params: &mut MdfnParams, grads: &MdfnParams, cfg: &TrainConfig) {
    let (lr, wd) = (cfg.learning_rate, cfg.weight_decay);
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        debug_assert_eq!(p.name, g.name);
        let decay = if p.is_bias { 0.0 } else { wd };
        for (w, gv) in p.data.iter_mut().zip(g.data) {
            *w -= lr * (gv + decay * *w);
        }
    }
}

fn uniform_fill(v: &mut [f64], bound: f64, rng: &mut StreamRng) {
    v.iter_mut().for_each(|w| *w = rng.uniform_range(-bound, bound));
}

/// Fresh parameters: first-layer MLP weights and head weights uniform in
/// `+-1/sqrt(fan_in)`; second-layer weights and every bias zero, so the
/// fusion starts as the identity on `x_last`.
pub fn init_params(dim: usize, n_domains: usize, cfg: &TrainConfig, seed: RngStream) -> MdfnParams {
    let mut p = MdfnParams::zeros(dim, n_domains, cfg.hidden, &cfg.fusion, cfg.activation);
    let mut rng = seed.generator();
    let bound = 1.0 / (dim as f64).sqrt();
    for (_, m) in p.aux.iter_mut() {
        uniform_fill(&mut m.w1, bound, &mut rng);
    }
    if let Some(m) = p.refine.as_mut() {
        uniform_fill(&mut m.w1, bound, &mut rng);
    }
    uniform_fill(&mut p.head.w, bound, &mut rng);
    p
}

/// Extends a trained network to `n_domains` outputs, keeping existing rows;
/// new head rows are initialized as in [`init_params`].
pub fn widen_head(prev: &MdfnParams, n_domains: usize, seed: RngStream) -> MdfnParams {
    let mut p = prev.clone();
    let old = prev.head.n_domains.min(n_domains);
    let mut head = HeadParams::zeros(n_domains, prev.dim);
    head.w[..old * prev.dim].copy_from_slice(&prev.head.w[..old * prev.dim]);
    head.b[..old].copy_from_slice(&prev.head.b[..old]);
    let mut rng = seed.generator();
    uniform_fill(&mut head.w[old * prev.dim..], 1.0 / (prev.dim as f64).sqrt(), &mut rng);
    p.head = head;
    p
}

/// Minibatch SGD from freshly initialized parameters.
pub fn train(batch: &LabeledBatch, n_domains: usize, cfg: &TrainConfig) -> Result<(MdfnParams, Vec<f64>)> {
    let init = init_params(batch.dim(), n_domains, cfg, cfg.seed.substream(tags::INIT));
    train_from(batch, init, cfg)
}

/// Minibatch SGD starting at `params`. Returns the final parameters and the
/// mean training loss of each epoch (averaged over that epoch's minibatches,
/// measured before each update).
pub fn train_from(batch: &LabeledBatch, mut params: MdfnParams, cfg: &TrainConfig) -> Result<(MdfnParams, Vec<f64>)> {
    cfg.validate()?;
    if batch.n_rows() == 0 {
        return Err(Error::EmptyInput);
    }
    params.validate()?;
    let mut rng = cfg.seed.substream(tags::TRAIN).generator();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let order = rng.permutation(batch.n_rows());
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, grad) = loss_and_grad_rows(batch, &params, chunk)?;
            epoch_loss += loss * chunk.len() as f64;
            sgd_step(&mut params, &grad, cfg);
        }
        curve.push(epoch_loss / batch.n_rows() as f64);
    }
    Ok((params, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_params(dim: usize, t: usize, hidden: usize, act: Activation, seed: u64) -> MdfnParams {
        let mut p = MdfnParams::zeros(dim, t, hidden, &FusionSpec::default(), act);
        let mut rng = RngStream::new(seed, 0).generator();
        for tns in p.tensors_mut() {
            tns.data.iter_mut().for_each(|v| *v = rng.uniform_range(-0.5, 0.5));
        }
        p
    }

    fn rand_batch(n: usize, dim: usize, t: usize, seed: u64) -> LabeledBatch {
        let mut rng = RngStream::new(seed, 1).generator();
        let mut mk = || FeatureMatrix::new(n, dim, (0..n * dim).map(|_| rng.normal()).collect()).unwrap();
        let levels: BTreeMap<_, _> = [(LevelId::Mid, mk()), (LevelId::Last, mk())].into();
        let labels = (0..n).map(|i| DomainId(i % t)).collect();
        LabeledBatch::new(levels, labels, t).unwrap()
    }

    #[test]
    fn zero_residuals_are_identity() {
        let p = MdfnParams::zeros(3, 2, 4, &FusionSpec::default(), Activation::Relu);
        let out = forward_fuse(&[9.0, -9.0, 1.0], &[1.0, 2.0, 3.0], &p).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn hand_evaluated_fusion() {
        let mut p = MdfnParams::zeros(2, 2, 2, &FusionSpec::default(), Activation::Relu);
        let g1 = &mut p.aux[0].1;
        g1.w1 = vec![1.0, 2.0, -1.0, 0.5];
        g1.b1 = vec![0.5, 0.0];
        g1.w2 = vec![1.0, 0.0, 2.0, -1.0];
        g1.b2 = vec![0.1, 0.2];
        let g2 = p.refine.as_mut().unwrap();
        g2.w1 = vec![0.5, 0.5, -2.0, 1.0];
        g2.b1 = vec![0.0, -0.25];
        g2.w2 = vec![-1.0, 1.0, 0.0, 3.0];
        g2.b2 = vec![0.0, -0.5];
        let x_mid = [1.0, -1.0];
        let x_last = [2.0, 1.0];
        // g1: pre = (1-2+0.5, -1-0.5) = (-0.5, -1.5) -> relu (0, 0); out = b2 = (0.1, 0.2)
        // g2: pre = (1+0.5, -4+1-0.25) = (1.5, -3.25) -> (1.5, 0); out = (-1.5, 0) + (0, -0.5)
        // fused = (2, 1) + (0.1, 0.2) + (-1.5, -0.5) = (0.6, 0.7)
        let out = forward_fuse(&x_mid, &x_last, &p).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-12 && (out[1] - 0.7).abs() < 1e-12, "{out:?}");
    }

    #[test]
    fn fuse_dim_mismatch() {
        let p = MdfnParams::zeros(2, 2, 2, &FusionSpec::default(), Activation::Relu);
        assert!(matches!(forward_fuse(&[0.0; 3], &[0.0; 2], &p), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn logits_cases() {
        let h = HeadParams::zeros(3, 2);
        let l = forward_logits(&[1.0, 2.0], &h).unwrap();
        assert_eq!(l, vec![0.0; 3]);
        let mut id = HeadParams::zeros(2, 2);
        id.w = vec![1.0, 0.0, 0.0, 1.0];
        id.b = vec![0.5, -0.5];
        assert_eq!(forward_logits(&[0.0, 1.0], &id).unwrap(), vec![0.5, 0.5]);
        let mut r = HeadParams::zeros(2, 3);
        r.w = vec![0.1, -0.2, 0.3, 1.0, 0.0, -1.0];
        r.b = vec![0.0, 0.25];
        // row 0: 0.1*2 - 0.2*1 + 0.3*(-1) = -0.3; row 1: 2 + 1 + 0.25 = 3.25
        let l = forward_logits(&[2.0, 1.0, -1.0], &r).unwrap();
        assert!((l[0] + 0.3).abs() < 1e-12 && (l[1] - 3.25).abs() < 1e-12);
        assert!(forward_logits(&[1.0], &r).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        assert!(cross_entropy(&[30.0, 0.0], DomainId(0)).unwrap() <= 1e-12);
        assert!((cross_entropy(&[0.0; 4], DomainId(2)).unwrap() - 4f64.ln()).abs() < 1e-15);
        let v = cross_entropy(&[1.0, 0.0], DomainId(0)).unwrap();
        assert!((v - 0.313_261_687_518_222_8).abs() < 1e-12);
        assert!(matches!(cross_entropy(&[0.0, 0.0], DomainId(2)), Err(Error::BadLabel { .. })));
    }

    #[test]
    fn zero_network_uniform_loss() {
        let p = MdfnParams::zeros(4, 2, 3, &FusionSpec::default(), Activation::Relu);
        let b = rand_batch(6, 4, 2, 0);
        let (loss, g) = loss_and_grad(&b, &p).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        // labels alternate 0,1: mean of (0.5 - onehot) is zero for both classes
        assert!(g.head.b.iter().all(|v| v.abs() < 1e-15));
        let skewed = b.select_rows(&[0, 2, 4, 1]);
        let (_, g) = loss_and_grad(&skewed, &p).unwrap();
        assert!((g.head.b[0] - (0.5 - 0.75)).abs() < 1e-15);
        assert!((g.head.b[1] - (0.5 - 0.25)).abs() < 1e-15);
    }

    #[test]
    fn duplicated_rows_same_mean() {
        let p = rand_params(5, 3, 4, Activation::Relu, 2);
        let b = rand_batch(9, 5, 3, 3);
        let dup: Vec<usize> = (0..9).chain(0..9).collect();
        let (l1, g1) = loss_and_grad(&b, &p).unwrap();
        let (l2, g2) = loss_and_grad_rows(&b, &p, &dup).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, c) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.data.iter().zip(c.data) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    /// Relative error per tensor: ||a - n|| / max(||a||, ||n||).
    fn max_rel_error(p: &MdfnParams, b: &LabeledBatch) -> f64 {
        let (_, analytic) = loss_and_grad(b, p).unwrap();
        let eps = 1e-5;
        let mut worst = 0.0f64;
        let names: Vec<String> = p.tensors().iter().map(|t| t.name.clone()).collect();
        for (ti, name) in names.iter().enumerate() {
            let len = p.tensors()[ti].data.len();
            let mut num = vec![0.0; len];
            for j in 0..len {
                let mut plus = p.clone();
                plus.tensors_mut()[ti].data[j] += eps;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].data[j] -= eps;
                let lp = loss_and_grad(b, &plus).unwrap().0;
                let lm = loss_and_grad(b, &minus).unwrap().0;
                num[j] = (lp - lm) / (2.0 * eps);
            }
            let a = analytic.tensors()[ti].data.to_vec();
            let diff: f64 = a.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(num.iter().map(|x| x * x).sum::<f64>().sqrt());
            let rel = if scale == 0.0 { 0.0 } else { diff / scale };
            assert!(rel < 1e-4, "{name}: {rel}");
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, act) in [(1, Activation::Relu), (2, Activation::Tanh)] {
            let p = rand_params(8, 3, 5, act, seed);
            let b = rand_batch(12, 8, 3, seed + 10);
            assert!(max_rel_error(&p, &b) < 1e-4);
        }
    }

    #[test]
    fn sgd_examples() {
        let cfg = TrainConfig { learning_rate: 0.01, weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = rand_params(3, 2, 2, Activation::Relu, 4);
        let before = p.clone();
        sgd_step(&mut p, &before.zeros_like(), &cfg);
        assert_eq!(p, before);

        let cfg = TrainConfig { learning_rate: 0.01, weight_decay: 0.1, ..TrainConfig::default() };
        let mut p = MdfnParams::zeros(1, 1, 1, &FusionSpec::last_only(), Activation::Relu);
        p.head.w[0] = 1.0;
        p.head.b[0] = 1.0;
        let g = p.zeros_like();
        sgd_step(&mut p, &g, &cfg);
        assert!((p.head.w[0] - 0.999).abs() < 1e-15);
        assert_eq!(p.head.b[0], 1.0);
    }

    #[test]
    fn sgd_matches_scalar_reference() {
        let cfg = TrainConfig { learning_rate: 0.05, weight_decay: 0.01, ..TrainConfig::default() };
        let p = rand_params(3, 2, 2, Activation::Relu, 6);
        let g = rand_params(3, 2, 2, Activation::Relu, 7);
        let mut out = p.clone();
        sgd_step(&mut out, &g, &cfg);
        for ((a, b), c) in p.tensors().iter().zip(g.tensors()).zip(out.tensors()) {
            for j in 0..a.data.len() {
                let wd = if a.is_bias { 0.0 } else { 0.01 };
                let want = a.data[j] - 0.05 * (b.data[j] + wd * a.data[j]);
                assert!((c.data[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predict_cases() {
        let p = MdfnParams::zeros(2, 3, 2, &FusionSpec::default(), Activation::Relu);
        let (d, probs) = predict(&[1.0, 1.0], &[0.5, -0.5], &p).unwrap();
        assert_eq!(d, DomainId(0));
        for v in probs.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let mut p = MdfnParams::zeros(1, 2, 1, &FusionSpec::default(), Activation::Relu);
        p.head.b = vec![0.0, 5.0];
        let (d, probs) = predict(&[0.0], &[0.0], &p).unwrap();
        assert_eq!(d, DomainId(1));
        assert!((probs.values()[0] - 0.006_692_850_924_284_856).abs() < 1e-12);
        assert!((probs.values()[1] - 0.993_307_149_075_715_1).abs() < 1e-12);

        let mut shifted = p.clone();
        shifted.head.b.iter_mut().for_each(|b| *b += 123.0);
        let (d2, probs2) = predict(&[0.0], &[0.0], &shifted).unwrap();
        assert_eq!(d2, d);
        for (a, b) in probs.values().iter().zip(probs2.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(predict(&[0.0, 1.0], &[0.0], &p).is_err());
    }

    #[test]
    fn init_is_identity_fusion() {
        let cfg = TrainConfig::default();
        let p = init_params(4, 3, &cfg, RngStream::new(1, 1));
        let x = [0.3, -0.7, 1.1, 2.0];
        assert_eq!(forward_fuse(&[5.0; 4], &x, &p).unwrap(), x.to_vec());
        assert!(p.head.w.iter().any(|w| *w != 0.0));
    }

    #[test]
    fn separable_domains_train_to_perfect() {
        let n = 200;
        let d = 8;
        let mut rng = RngStream::new(31, 0).generator();
        let mut mk = |sign: f64| -> Vec<f64> { (0..n * d).map(|_| sign * 3.0 + rng.normal()).collect() };
        let mut mid = mk(-1.0);
        mid.extend(mk(1.0));
        let mut last = mk(-1.0);
        last.extend(mk(1.0));
        let levels: BTreeMap<_, _> = [
            (LevelId::Mid, FeatureMatrix::new(2 * n, d, mid).unwrap()),
            (LevelId::Last, FeatureMatrix::new(2 * n, d, last).unwrap()),
        ]
        .into();
        let labels = (0..2 * n).map(|i| DomainId(i / n)).collect();
        let batch = LabeledBatch::new(levels, labels, 2).unwrap();
        let cfg = TrainConfig { seed: RngStream::new(5, 0), ..TrainConfig::default() };
        let (p, curve) = train(&batch, 2, &cfg).unwrap();
        assert_eq!(curve.len(), 100);
        assert!(curve.last().unwrap() < &curve[0]);
        let pred = p.predict_batch(batch.levels()).unwrap();
        assert_eq!(pred, batch.labels());

        let (p2, _) = train(&batch, 2, &cfg).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn single_domain_training() {
        let b = rand_batch(20, 3, 1, 4);
        let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
        let (p, curve) = train(&b, 1, &cfg).unwrap();
        assert!(curve.iter().all(|l| *l < 1e-12));
        assert!(p.predict_batch(b.levels()).unwrap().iter().all(|d| d.0 == 0));
    }

    #[test]
    fn widen_keeps_old_rows() {
        let p = rand_params(3, 2, 2, Activation::Relu, 8);
        let w = widen_head(&p, 3, RngStream::new(0, 0));
        assert_eq!(&w.head.w[..6], &p.head.w[..]);
        assert_eq!(&w.head.b[..2], &p.head.b[..]);
        assert_eq!(w.head.n_domains, 3);
        assert!(w.validate().is_ok());
    }

    #[test]
    fn last_only_network() {
        let p = MdfnParams::zeros(2, 2, 4, &FusionSpec::last_only(), Activation::Relu);
        assert_eq!(p.param_count(), 2 * 2 + 2);
        let b = rand_batch(4, 2, 2, 1);
        assert!(loss_and_grad(&b, &p).is_ok());
    }

    #[test]
    fn missing_level_errors() {
        let p = MdfnParams::zeros(2, 2, 2, &FusionSpec::default(), Activation::Relu);
        let m = FeatureMatrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        let b = LabeledBatch::new([(LevelId::Last, m)].into(), vec![DomainId(0)], 2).unwrap();
        assert!(matches!(loss_and_grad(&b, &p), Err(Error::IncompleteStore(_))));
    }
}
