//! Training objectives: classification cross-entropy (single-layer and
//! depth-weighted), the exponential code-quantization penalty, the
//! relation-graph contrastive term with its GCN encoder, reconstruction
//! error, and the weighted totals for both model kinds.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::{self, Array};
use crate::error::{Error, Result};
use crate::param::{uniform_fan_in, Bound, Params};
use crate::stvh::weight;
use crate::tape::Var;

/// Mixing coefficients for the loss totals. `lambda1`/`lambda2` weight the
/// single-code total, `mu1`/`mu2`/`mu3` the multi-focus one, and
/// `layer_weights` scales the per-depth classification terms (shallow
/// layers count less).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub action_weight: f64,
    pub layer_weights: Vec<f64>,
}

/// Depth weights rising linearly from 0.25 to 1.0.
pub fn layer_weight_ramp(upsilon: usize) -> Vec<f64> {
    if upsilon <= 1 {
        return vec![1.0; upsilon];
    }
    (0..upsilon).map(|i| 0.25 + 0.75 * i as f64 / (upsilon - 1) as f64).collect()
}

impl LossWeights {
    pub fn defaults(upsilon: usize) -> LossWeights {
        LossWeights {
            lambda1: 0.1,
            lambda2: 0.5,
            mu1: 0.1,
            mu2: 0.5,
            mu3: 0.01,
            action_weight: 0.5,
            layer_weights: layer_weight_ramp(upsilon),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scalars =
            [self.lambda1, self.lambda2, self.mu1, self.mu2, self.mu3, self.action_weight];
        if scalars.iter().chain(&self.layer_weights).any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.layer_weights.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("layer weights must not decrease with depth".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy of `logits` [B, C] against integer labels. Softmax is
/// applied internally via a shifted log-sum-exp, so callers pass raw logits.
pub fn ce_activity(logits: &Var, labels: &[usize]) -> Result<Var> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::op("ce_activity", "logits must be [batch, classes]"));
    }
    let (batch, classes) = (shape[0], shape[1]);
    if labels.len() != batch {
        return Err(Error::op(
            "ce_activity",
            format!("{} labels for a batch of {batch}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::op(
            "ce_activity",
            format!("label {bad} out of range for {classes} classes"),
        ));
    }
    // Shifting by the detached row max changes neither the value nor the
    // gradient of lse - picked, and keeps every exponent <= 0.
    let row_max = logits.tape().constant(array::max_axis_keep(&logits.value(), 1)?);
    let shifted = logits.sub(&row_max)?;
    let lse = shifted.exp().sum_axis(1, false)?.log();
    let mask = logits.tape().constant(Array::from_fn(&[batch, classes], |flat| {
        if flat % classes == labels[flat / classes] {
            1.0
        } else {
            0.0
        }
    }));
    let picked = shifted.mul(&mask)?.sum_axis(1, false)?;
    Ok(lse.sub(&picked)?.mean_all())
}

/// Depth-weighted sum of per-layer cross-entropies, shallow to deep.
pub fn ce_activity_layered(per_layer: &[Var], labels: &[usize], w: &[f64]) -> Result<Var> {
    if per_layer.is_empty() {
        return Err(Error::op("ce_activity_layered", "no layers"));
    }
    if per_layer.len() != w.len() {
        return Err(Error::op(
            "ce_activity_layered",
            format!("{} layers but {} weights", per_layer.len(), w.len()),
        ));
    }
    let mut total = ce_activity(&per_layer[0], labels)?.mul_scalar(w[0]);
    for (logits, &weight) in per_layer.iter().zip(w).skip(1) {
        total = total.add(&ce_activity(logits, labels)?.mul_scalar(weight))?;
    }
    Ok(total)
}

/// Exponential quantization penalty over a batch of real codes `h` [B, K]
/// and their sign codes `b`: sum over all ordered pairs, diagonal included,
/// of exp(|h_i.h_j - b_i.b_j| / K). Each term is >= 1, so the loss is
/// bounded below by B^2, attained exactly when h is already binary. `b` is
/// a plain array, so gradient flows to `h` alone.
pub fn quantization_loss(h: &Var, b: &Array) -> Result<Var> {
    let shape = h.shape();
    if shape.len() != 2 {
        return Err(Error::op("quantization_loss", "codes must be [batch, bits]"));
    }
    if b.shape() != shape {
        return Err(Error::op(
            "quantization_loss",
            format!("h is {:?} but b is {:?}", shape, b.shape()),
        ));
    }
    let k = shape[1] as f64;
    let gram_h = h.matmul(&h.transpose(0, 1)?)?;
    let gram_b = h.tape().constant(array::matmul(b, &array::transpose(b, 0, 1)?)?);
    Ok(gram_h.sub(&gram_b)?.abs().mul_scalar(1.0 / k).exp().sum_all())
}

/// Time-mean of the spatial graph, row-normalized so each node's incident
/// weights sum to one. The graph builder guarantees a unit diagonal, so
/// self-loops are already present. Row sums are floored at 1e-8 in
/// magnitude (sign kept) to survive adversarial cancellation.
pub fn relation_adjacency(g_s: &Array) -> Result<Array> {
    let shape = g_s.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::op("relation_adjacency", "expected [frames, n, n]"));
    }
    let n = shape[1];
    let mean = array::mean_axis(g_s, 0, false)?;
    let mut rows = mean.data().to_vec();
    for r in 0..n {
        let row = &mut rows[r * n..(r + 1) * n];
        let mut sum: f64 = row.iter().sum();
        if sum.abs() < 1e-8 {
            sum = 1e-8f64.copysign(sum);
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Array::from_vec(vec![n, n], rows)
}

/// Two-layer graph convolution over per-object action predictions. Encodes
/// the action-label distribution of the scene, propagated along the spatial
/// relation graph, into a K-dim vector comparable with the hash code.
pub struct RelationGcn {
    pub params: Params,
}

impl RelationGcn {
    pub fn new(actions: usize, k: usize, seed: u64) -> RelationGcn {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        params.push("gcn.l1.w", uniform_fan_in(&mut rng, &[actions, k], actions));
        params.push("gcn.l1.b", Array::zeros(&[k]));
        params.push("gcn.l2.w", uniform_fan_in(&mut rng, &[k, k], k));
        params.push("gcn.l2.b", Array::zeros(&[k]));
        params.push("gcn.out.w", uniform_fan_in(&mut rng, &[k, k], k));
        params.push("gcn.out.b", Array::zeros(&[k]));
        RelationGcn { params }
    }

    pub fn encode(&self, bound: &Bound, action_logits: &Var, g_s: &Array) -> Result<Var> {
        relation_encode(bound, action_logits, g_s)
    }
}

/// action_logits [N, C_act], g_s [T, N, N] -> a [K], using the GCN weights
/// registered by [`RelationGcn::new`] on `bound`.
pub fn relation_encode(bound: &Bound, action_logits: &Var, g_s: &Array) -> Result<Var> {
    let w1 = weight(bound, "gcn.l1.w");
    let (actions, k) = (w1.shape()[0], w1.shape()[1]);
    let shape = action_logits.shape();
    if shape.len() != 2 || shape[1] != actions {
        return Err(Error::op(
            "relation_encode",
            format!("expected [n, {actions}] action logits, got {shape:?}"),
        ));
    }
    if g_s.shape().get(1) != Some(&shape[0]) {
        return Err(Error::op("relation_encode", "graph and logits disagree on object count"));
    }
    let adj = action_logits.tape().constant(relation_adjacency(g_s)?);
    let nodes = action_logits.softmax(1)?;
    let h1 = adj
        .matmul(&nodes)?
        .affine(w1, weight(bound, "gcn.l1.b"))?
        .relu();
    let h2 = adj
        .matmul(&h1)?
        .affine(weight(bound, "gcn.l2.w"), weight(bound, "gcn.l2.b"))?
        .relu();
    h2.mean_axis(0, false)?
        .reshape(&[1, k])?
        .affine(weight(bound, "gcn.out.w"), weight(bound, "gcn.out.b"))?
        .reshape(&[k])
}

/// Contrastive alignment of relation encodings `a` with real codes `h`,
/// both [B, K]: sum over i of log of (sum over j of sim(a_i,h_j) +
/// sim(a_j,h_i)) divided by sim(a_i,h_i), where sim is the exponential of
/// the cosine. The j-sum includes j = i, so each ratio is at least 2 and
/// the loss at least B.log(2).
pub fn contrastive_loss(a: &Var, h: &Var) -> Result<Var> {
    let shape = a.shape();
    if shape != h.shape() || shape.len() != 2 {
        return Err(Error::op("contrastive_loss", "inputs must share a [batch, dim] shape"));
    }
    if shape[0] < 2 {
        return Err(Error::op("contrastive_loss", "need at least two samples"));
    }
    let sims = normalize_rows(a)?.matmul(&normalize_rows(h)?.transpose(0, 1)?)?.exp();
    let row = sims.sum_axis(1, false)?;
    let col = sims.sum_axis(0, false)?;
    let eye = a.tape().constant(Array::eye(shape[0]));
    let diag = sims.mul(&eye)?.sum_axis(1, false)?;
    Ok(row.add(&col)?.div(&diag)?.log().sum_all())
}

pub(crate) const COSINE_EPS: f64 = 1e-6;

fn normalize_rows(x: &Var) -> Result<Var> {
    // The stabilizer sits inside the root so the gradient stays finite on
    // an exactly-zero row (a dead-ReLU relation encoding produces one) and
    // bounded on near-zero rows; a spike there would tear through the
    // optimizer state of everything upstream.
    let norms = x.mul(x)?.sum_axis(1, true)?.add_scalar(COSINE_EPS).sqrt();
    x.div(&norms)
}

/// Mean squared error between a reconstruction and its target.
pub fn recon_loss(reconstructed: &Var, target: &Var) -> Result<Var> {
    if reconstructed.shape() != target.shape() {
        return Err(Error::op("recon_loss", "shape mismatch"));
    }
    let diff = reconstructed.sub(target)?;
    Ok(diff.mul(&diff)?.mean_all())
}

pub struct StvhLossTerms {
    pub activity: Var,
    pub action: Var,
    pub quantization: Var,
    pub contrastive: Var,
}

/// activity + action_weight*action + lambda1*quantization +
/// lambda2*contrastive.
pub fn total_stvh(terms: &StvhLossTerms, w: &LossWeights) -> Result<Var> {
    terms
        .activity
        .add(&terms.action.mul_scalar(w.action_weight))?
        .add(&terms.quantization.mul_scalar(w.lambda1))?
        .add(&terms.contrastive.mul_scalar(w.lambda2))
}

pub struct MstvhLossTerms {
    /// Depth-weighted activity term (already layered).
    pub activity: Var,
    pub action: Var,
    pub quantization: Var,
    pub contrastive: Var,
    pub reconstruction: Var,
}

/// activity + action_weight*action + mu1*quantization + mu2*contrastive +
/// mu3*reconstruction.
pub fn total_mstvh(terms: &MstvhLossTerms, w: &LossWeights) -> Result<Var> {
    terms
        .activity
        .add(&terms.action.mul_scalar(w.action_weight))?
        .add(&terms.quantization.mul_scalar(w.mu1))?
        .add(&terms.contrastive.mul_scalar(w.mu2))?
        .add(&terms.reconstruction.mul_scalar(w.mu3))
}
