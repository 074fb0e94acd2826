//! Geometric training objectives over vMF embeddings.
//!
//! * base bounding `L_B`: negative log-likelihood of an instance's base proxy,
//! * open-space dispersion `L_dis`: pushes the most base-divergent unlabeled
//!   instances toward their nearest open proxy,
//! * open-space structuring `L_str`: pulls together unlabeled instances whose
//!   top-k proxy overlaps agree.
//!
//! Gradients are taken with respect to the ambient mean direction and the
//! scalar concentration; discrete selections are treated as constants.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::proxy::ProxySet;
use crate::vmf::{self, dot, UnitVector, VmfParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Base,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBatch {
    pub params: Vec<VmfParams>,
    pub features_index: Vec<usize>,
    pub labels: Option<Vec<usize>>,
    pub domain: Domain,
}

impl InstanceBatch {
    pub fn new(
        params: Vec<VmfParams>,
        features_index: Vec<usize>,
        labels: Option<Vec<usize>>,
        domain: Domain,
    ) -> Result<Self> {
        let batch = Self {
            params,
            features_index,
            labels,
            domain,
        };
        batch.validate()?;
        Ok(batch)
    }

    /// A batch whose `features_index` is simply `0..params.len()`.
    pub fn base(params: Vec<VmfParams>, labels: Vec<usize>) -> Result<Self> {
        let idx = (0..params.len()).collect();
        Self::new(params, idx, Some(labels), Domain::Base)
    }

    pub fn unlabeled(params: Vec<VmfParams>) -> Result<Self> {
        let idx = (0..params.len()).collect();
        Self::new(params, idx, None, Domain::Unlabeled)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.params.first().map(VmfParams::dim)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.dim() {
            for p in &self.params {
                check_dim(d, p.dim())?;
            }
        }
        if self.features_index.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} feature indices for {} instances",
                self.features_index.len(),
                self.params.len()
            )));
        }
        match (&self.labels, self.domain) {
            (Some(l), Domain::Base) if l.len() == self.params.len() => Ok(()),
            (Some(l), Domain::Base) => Err(Error::Contract(format!(
                "{} labels for {} base instances",
                l.len(),
                self.params.len()
            ))),
            (None, Domain::Base) => Err(Error::Contract("base batch without labels".into())),
            (Some(_), Domain::Unlabeled) => Err(Error::Contract("unlabeled batch carries labels".into())),
            (None, Domain::Unlabeled) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_base: f64,
    pub w_dis: f64,
    pub w_str: f64,
    /// Fraction of the ranked unlabeled batch that receives the dispersion loss.
    pub dispersion_fraction: f64,
    pub consensus_k: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_base: 1.0,
            w_dis: 1.0,
            w_str: 1.0,
            dispersion_fraction: 0.25,
            consensus_k: 3,
        }
    }
}

impl LossWeights {
    pub fn base_only() -> Self {
        Self {
            w_dis: 0.0,
            w_str: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_base", self.w_base), ("w_dis", self.w_dis), ("w_str", self.w_str)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        let rho = self.dispersion_fraction;
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::config(format!("dispersion_fraction must lie in (0, 1], got {rho}")));
        }
        if self.consensus_k == 0 {
            return Err(Error::config("consensus_k must be positive"));
        }
        Ok(())
    }
}

/// Unordered instance pairs `(a, b)` with `a < b`, sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConsensusGraph {
    pub pairs: Vec<(usize, usize)>,
}

/// Gradient of a loss with respect to one instance's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    /// Ambient gradient; project onto the tangent space before updating `mu`.
    pub mu: Vec<f64>,
    pub kappa: f64,
}

impl ParamGrad {
    pub fn zeros(d: usize) -> Self {
        Self {
            mu: vec![0.0; d],
            kappa: 0.0,
        }
    }

    fn add_scaled(&mut self, other: &ParamGrad, scale: f64) {
        for (a, b) in self.mu.iter_mut().zip(&other.mu) {
            *a += scale * b;
        }
        self.kappa += scale * other.kappa;
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log q(base_proxy | params)`.
pub fn loss_base(params: &VmfParams, base_proxy: &UnitVector) -> Result<f64> {
    Ok(-vmf::log_density(params, base_proxy)?)
}

/// `dL/dkappa = A_d(kappa) - mu^T v`, ambient `dL/dmu = -kappa v`.
pub fn grad_loss_base(params: &VmfParams, base_proxy: &UnitVector) -> Result<ParamGrad> {
    let cos = params.mu.dot(base_proxy)?;
    let a = vmf::mean_resultant(params.dim(), params.kappa)?;
    Ok(ParamGrad {
        mu: base_proxy.as_slice().iter().map(|v| -params.kappa * v).collect(),
        kappa: a - cos,
    })
}

fn check_proxies(proxies: &DMatrix<f64>, d: usize) -> Result<()> {
    check_dim(d, proxies.ncols())
}

fn cosines(params: &VmfParams, proxies: &DMatrix<f64>) -> Vec<f64> {
    let mu = params.mu.as_slice();
    (0..proxies.nrows())
        .map(|i| proxies.row(i).iter().zip(mu).map(|(a, b)| a * b).sum())
        .collect()
}

/// Log overlaps `log C_d(kappa) + kappa mu^T v_i` of one instance with every proxy row.
pub fn proxy_overlaps(params: &VmfParams, proxies: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_proxies(proxies, params.dim())?;
    let log_c = vmf::log_norm_const(params.dim(), params.kappa)?;
    Ok(cosines(params, proxies).into_iter().map(|c| log_c + params.kappa * c).collect())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Indices of the unlabeled batch sorted by ascending best base-proxy log overlap,
/// most divergent first; ties keep batch order.
pub fn rank_open_candidates(batch: &InstanceBatch, base_proxies: &DMatrix<f64>) -> Result<Vec<usize>> {
    if batch.domain != Domain::Unlabeled {
        return Err(Error::Contract("ranking expects an unlabeled batch".into()));
    }
    if base_proxies.nrows() == 0 {
        return Err(Error::config("ranking needs at least one base proxy"));
    }
    let scores = batch
        .params
        .iter()
        .map(|p| Ok(proxy_overlaps(p, base_proxies)?.into_iter().fold(f64::NEG_INFINITY, f64::max)))
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    Ok(order)
}

/// `-log softmax` of the open-proxy logit against the base-proxy logit.
pub fn loss_dispersion(params: &VmfParams, open_proxy: &UnitVector, base_proxy: &UnitVector) -> Result<f64> {
    let r = params.kappa * params.mu.dot(open_proxy)?;
    let b = params.kappa * params.mu.dot(base_proxy)?;
    Ok(softplus(b - r))
}

pub fn grad_loss_dispersion(params: &VmfParams, open_proxy: &UnitVector, base_proxy: &UnitVector) -> Result<ParamGrad> {
    let cr = params.mu.dot(open_proxy)?;
    let cb = params.mu.dot(base_proxy)?;
    let s = sigmoid(params.kappa * (cb - cr));
    Ok(ParamGrad {
        mu: base_proxy
            .as_slice()
            .iter()
            .zip(open_proxy.as_slice())
            .map(|(vb, vr)| s * params.kappa * (vb - vr))
            .collect(),
        kappa: s * (cb - cr),
    })
}

fn top_k_set(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Pairs of instances whose top-`k` proxy overlap index sets coincide.
pub fn consensus_pairs(batch: &InstanceBatch, proxies: &DMatrix<f64>, k: usize) -> Result<ConsensusGraph> {
    if k == 0 || k > proxies.nrows() {
        return Err(Error::config(format!(
            "consensus k = {k} outside 1..={}",
            proxies.nrows()
        )));
    }
    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (i, p) in batch.params.iter().enumerate() {
        let overlaps = proxy_overlaps(p, proxies)?;
        groups.entry(top_k_set(&overlaps, k)).or_default().push(i);
    }
    let mut pairs = Vec::new();
    for members in groups.values() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    Ok(ConsensusGraph { pairs })
}

/// `-1 / (KL(p || q) + 1)`.
pub fn loss_structuring(p: &VmfParams, q: &VmfParams) -> Result<f64> {
    let kl = vmf::kl_divergence(p, q)?.max(0.0);
    Ok(-1.0 / (kl + 1.0))
}

/// Gradients of [`loss_structuring`] with respect to `p` and `q`.
pub fn grad_loss_structuring(p: &VmfParams, q: &VmfParams) -> Result<(ParamGrad, ParamGrad)> {
    check_dim(p.dim(), q.dim())?;
    let d = p.dim();
    let kl = vmf::kl_divergence(p, q)?;
    let outer = 1.0 / ((kl.max(0.0) + 1.0) * (kl.max(0.0) + 1.0));
    let c = p.mu.dot(&q.mu)?;
    let ap = vmf::mean_resultant(d, p.kappa)?;
    let aq = vmf::mean_resultant(d, q.kappa)?;
    let dap = vmf::mean_resultant_derivative(d, p.kappa)?;
    // dKL/dkp: -A(kp) from log C plus A(kp) from the linear term cancel
    let dk_p = dap * (p.kappa - q.kappa * c);
    let dk_q = aq - ap * c;
    let scale = -ap * q.kappa * outer;
    let gp = ParamGrad {
        mu: q.mu.as_slice().iter().map(|v| scale * v).collect(),
        kappa: outer * dk_p,
    };
    let gq = ParamGrad {
        mu: p.mu.as_slice().iter().map(|v| scale * v).collect(),
        kappa: outer * dk_q,
    };
    Ok((gp, gq))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveValue {
    pub total: f64,
    pub base: f64,
    pub dispersion: f64,
    pub structuring: f64,
    pub base_count: usize,
    pub dispersion_count: usize,
    pub pair_count: usize,
    /// Set when a term had no contributing instances and was counted as 0.
    pub base_empty: bool,
    pub dispersion_empty: bool,
    pub structuring_empty: bool,
}

/// Objective value plus per-instance gradients of the weighted total.
#[derive(Debug, Clone)]
pub struct ObjectiveGradients {
    pub value: ObjectiveValue,
    pub base: Vec<ParamGrad>,
    pub unlabeled: Vec<ParamGrad>,
}

/// Discrete choices made on the unlabeled batch, held fixed while differentiating.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Selection {
    /// `(instance, open proxy, base proxy)`, proxies as rows of the full set.
    pub dispersion: Vec<(usize, usize, usize)>,
    pub consensus: ConsensusGraph,
}

/// Ranks the unlabeled batch, picks dispersion candidates with their nearest
/// open and base proxies, and builds the consensus graph.
pub fn select_terms(unlabeled_batch: &InstanceBatch, proxies: &ProxySet, weights: &LossWeights) -> Result<Selection> {
    weights.validate()?;
    if weights.consensus_k > proxies.count() {
        return Err(Error::config(format!(
            "consensus_k {} exceeds the {} proxies",
            weights.consensus_k,
            proxies.count()
        )));
    }
    let m = unlabeled_batch.len();
    let mut selection = Selection::default();
    let base_rows = proxies.base_proxies();
    let open_rows = proxies.open_proxies();
    if m > 0 && base_rows.nrows() > 0 && open_rows.nrows() > 0 {
        let order = rank_open_candidates(unlabeled_batch, &base_rows)?;
        let take = ((weights.dispersion_fraction * m as f64).ceil() as usize).clamp(1, m);
        for &i in &order[..take] {
            let p = &unlabeled_batch.params[i];
            let r = proxies.open_indices[argmax(&cosines(p, &open_rows))];
            let b = proxies.base_indices[argmax(&cosines(p, &base_rows))];
            selection.dispersion.push((i, r, b));
        }
    }
    if m > 1 {
        selection.consensus = consensus_pairs(unlabeled_batch, &proxies.vectors, weights.consensus_k)?;
    }
    Ok(selection)
}

pub fn total_objective(
    base_batch: &InstanceBatch,
    unlabeled_batch: &InstanceBatch,
    proxies: &ProxySet,
    weights: &LossWeights,
) -> Result<ObjectiveValue> {
    let selection = select_terms(unlabeled_batch, proxies, weights)?;
    Ok(evaluate(base_batch, unlabeled_batch, proxies, weights, &selection, false)?.value)
}

pub fn objective_gradients(
    base_batch: &InstanceBatch,
    unlabeled_batch: &InstanceBatch,
    proxies: &ProxySet,
    weights: &LossWeights,
) -> Result<ObjectiveGradients> {
    let selection = select_terms(unlabeled_batch, proxies, weights)?;
    evaluate(base_batch, unlabeled_batch, proxies, weights, &selection, true)
}

/// Objective (and optionally gradients) under a fixed selection.
pub fn evaluate_with_selection(
    base_batch: &InstanceBatch,
    unlabeled_batch: &InstanceBatch,
    proxies: &ProxySet,
    weights: &LossWeights,
    selection: &Selection,
    with_grad: bool,
) -> Result<ObjectiveGradients> {
    evaluate(base_batch, unlabeled_batch, proxies, weights, selection, with_grad)
}

fn evaluate(
    base_batch: &InstanceBatch,
    unlabeled_batch: &InstanceBatch,
    proxies: &ProxySet,
    weights: &LossWeights,
    selection: &Selection,
    with_grad: bool,
) -> Result<ObjectiveGradients> {
    weights.validate()?;
    base_batch.validate()?;
    unlabeled_batch.validate()?;
    if base_batch.domain != Domain::Base {
        return Err(Error::Contract("first batch must be from the base domain".into()));
    }
    if unlabeled_batch.domain != Domain::Unlabeled {
        return Err(Error::Contract("second batch must be from the unlabeled domain".into()));
    }
    let d = proxies.dim();
    for b in [base_batch, unlabeled_batch] {
        if let Some(bd) = b.dim() {
            check_dim(d, bd)?;
        }
    }
    let m = unlabeled_batch.len();
    let in_batch = |i: usize| {
        if i < m {
            Ok(())
        } else {
            Err(Error::Contract(format!("selection refers to instance {i} of a batch of {m}")))
        }
    };
    let proxy = |i: usize| {
        if i < proxies.count() {
            UnitVector::new(proxies.proxy(i))
        } else {
            Err(Error::Contract(format!("selection refers to proxy {i} of {}", proxies.count())))
        }
    };
    let mut g_base = vec![ParamGrad::zeros(d); if with_grad { base_batch.len() } else { 0 }];
    let mut g_unl = vec![ParamGrad::zeros(d); if with_grad { m } else { 0 }];

    // base bounding
    let labels = base_batch.labels.as_ref().expect("validated base batch");
    let mut base_sum = 0.0;
    let base_n = base_batch.len();
    for (i, (p, &c)) in base_batch.params.iter().zip(labels).enumerate() {
        let &pi = proxies.base_indices.get(c).ok_or_else(|| {
            Error::Data(format!(
                "label {c} outside the base class roster of {} classes",
                proxies.base_indices.len()
            ))
        })?;
        let v = proxy(pi)?;
        base_sum += loss_base(p, &v)?;
        if with_grad && weights.w_base > 0.0 {
            g_base[i].add_scaled(&grad_loss_base(p, &v)?, weights.w_base / base_n as f64);
        }
    }
    let base = if base_n > 0 { base_sum / base_n as f64 } else { 0.0 };

    // open-space dispersion
    let dis_n = selection.dispersion.len();
    let mut dis_sum = 0.0;
    for &(i, r, b) in &selection.dispersion {
        in_batch(i)?;
        let p = &unlabeled_batch.params[i];
        let (vr, vb) = (proxy(r)?, proxy(b)?);
        dis_sum += loss_dispersion(p, &vr, &vb)?;
        if with_grad && weights.w_dis > 0.0 {
            g_unl[i].add_scaled(&grad_loss_dispersion(p, &vr, &vb)?, weights.w_dis / dis_n as f64);
        }
    }
    let dispersion = if dis_n > 0 { dis_sum / dis_n as f64 } else { 0.0 };

    // open-space structuring, symmetrized over each pair
    let pair_n = selection.consensus.pairs.len();
    let mut str_sum = 0.0;
    for &(a, b) in &selection.consensus.pairs {
        in_batch(a)?;
        in_batch(b)?;
        let (p, q) = (&unlabeled_batch.params[a], &unlabeled_batch.params[b]);
        str_sum += 0.5 * (loss_structuring(p, q)? + loss_structuring(q, p)?);
        if with_grad && weights.w_str > 0.0 {
            let scale = 0.5 * weights.w_str / pair_n as f64;
            let (gp, gq) = grad_loss_structuring(p, q)?;
            g_unl[a].add_scaled(&gp, scale);
            g_unl[b].add_scaled(&gq, scale);
            let (gq, gp) = grad_loss_structuring(q, p)?;
            g_unl[a].add_scaled(&gp, scale);
            g_unl[b].add_scaled(&gq, scale);
        }
    }
    let structuring = if pair_n > 0 { str_sum / pair_n as f64 } else { 0.0 };

    let total = weights.w_base * base + weights.w_dis * dispersion + weights.w_str * structuring;
    Ok(ObjectiveGradients {
        value: ObjectiveValue {
            total,
            base,
            dispersion,
            structuring,
            base_count: base_n,
            dispersion_count: dis_n,
            pair_count: pair_n,
            base_empty: base_n == 0,
            dispersion_empty: dis_n == 0,
            structuring_empty: pair_n == 0,
        },
        base: g_base,
        unlabeled: g_unl,
    })
}

/// Inner product helper shared with the encoder.
pub(crate) fn tangent_project(mu: &[f64], grad: &[f64]) -> Vec<f64> {
    let radial = dot(mu, grad);
    grad.iter().zip(mu).map(|(g, m)| g - radial * m).collect()
}
