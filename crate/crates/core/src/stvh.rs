//! Single-code hashing model.
//!
//! The network stacks Υ fusion layers over the object features. Each layer
//! normalizes, mixes per object across frames (weighted by the temporal
//! graph), mixes per frame across objects (weighted by the spatial graph),
//! and finishes with a feed-forward block; every stage carries a residual.
//! A hash head pools the stack output into one K-dim real code h, binarized
//! as b = sign(h), with activity logits read from h and per-object action
//! logits from the time-pooled temporal path.
//!
//! The attention primitives here ([`at_v`], [`at_p`], [`sgat`]) are shared
//! with the multi-focus model.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::io::{self, CheckpointManifest};
use crate::param::{uniform_fan_in, uniform_fan_in_scaled, Bound, Params};
use crate::sign;
use crate::synth::vectorize;
use crate::tape::{Tape, Var};

pub const LN_EPS: f64 = 1e-5;

/// Content attention: softmax((f W2)(f W3)ᵀ / √d) over the trailing axis.
/// f is [..., L, d]; the result is row-stochastic [..., L, L].
pub fn at_v(f: &Var, w2: &Var, w3: &Var) -> Result<Var> {
    let d = *f.shape().last().ok_or_else(|| Error::op("at_v", "scalar input"))?;
    let q = f.matmul(w2)?;
    let k = f.matmul(w3)?;
    let rank = k.shape().len();
    let scores = q.matmul(&k.transpose(rank - 2, rank - 1)?)?.mul_scalar(1.0 / (d as f64).sqrt());
    scores.softmax(scores.shape().len() - 1)
}

/// Position attention: softmax(G W_pos) over the trailing axis. G is
/// [..., L, L], W_pos [L, L].
pub fn at_p(g: &Var, w_pos: &Var) -> Result<Var> {
    let prod = g.matmul(w_pos)?;
    prod.softmax(prod.shape().len() - 1)
}

/// Graph-weighted attention block: (AT_v(f) · AT_p(G)) applied to the value
/// projection f W1. Returns the mixed features and the combined attention.
pub fn sgat_with_attention(
    f: &Var,
    g: &Var,
    w1: &Var,
    w2: &Var,
    w3: &Var,
    w_pos: &Var,
) -> Result<(Var, Var)> {
    let attention = at_v(f, w2, w3)?.matmul(&at_p(g, w_pos)?)?;
    let mixed = attention.matmul(&f.matmul(w1)?)?;
    Ok((mixed, attention))
}

pub fn sgat(f: &Var, g: &Var, w1: &Var, w2: &Var, w3: &Var, w_pos: &Var) -> Result<Var> {
    Ok(sgat_with_attention(f, g, w1, w2, w3, w_pos)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelDims {
    pub t: usize,
    pub d_v: usize,
    pub d: usize,
    pub k: usize,
    pub activities: usize,
    pub actions: usize,
    pub upsilon: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let all = [self.t, self.d_v, self.d, self.k, self.activities, self.actions, self.upsilon];
        if all.iter().any(|&v| v == 0) {
            return Err(Error::Config("model dims must all be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn to_map(self) -> std::collections::BTreeMap<String, usize> {
        [
            ("t", self.t),
            ("d_v", self.d_v),
            ("d", self.d),
            ("k", self.k),
            ("activities", self.activities),
            ("actions", self.actions),
            ("upsilon", self.upsilon),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub(crate) fn from_manifest(manifest: &CheckpointManifest) -> Result<ModelDims> {
        Ok(ModelDims {
            t: manifest.dim("t")?,
            d_v: manifest.dim("d_v")?,
            d: manifest.dim("d")?,
            k: manifest.dim("k")?,
            activities: manifest.dim("activities")?,
            actions: manifest.dim("actions")?,
            upsilon: manifest.dim("upsilon")?,
        })
    }
}

/// One forward pass worth of outputs. Everything except `b` stays on the
/// tape so losses can be composed on top; `b` is detached by construction.
pub struct StvhOutput {
    pub h: Var,
    pub b: Array,
    pub activity_logits: Var,
    pub action_logits: Var,
    pub f_t: Var,
    pub f_s: Var,
    /// Combined temporal/spatial attention per layer, detached, for dumps.
    pub attention: Vec<(Array, Array)>,
}

pub fn sign_bits(h: &Array) -> Array {
    h.map(sign)
}

/// Write-in scale for matrices that feed the hash projection and the FFN
/// residual write, keeping pre-tanh values inside the linear range early on.
pub(crate) const BRANCH_SCALE: f64 = 0.1;
/// Gain on the frame-position weight so the trajectory graphs shape the
/// attention profile from the first step instead of starting near uniform.
pub(crate) const WPOS_GAIN: f64 = 4.0;
/// Starting identity multiple for the object-position attention.
pub(crate) const ALPHA_INIT: f64 = 3.0;

/// Registers the per-layer fusion weights shared by both model kinds.
/// The spatial position weight is a single scalar (an identity multiple):
/// a full N×N matrix would break object-permutation invariance, and at
/// softmax time only the product G·W matters.
pub(crate) fn push_fusion_layer(
    params: &mut Params,
    prefix: &str,
    t: usize,
    d: usize,
    rng: &mut impl Rng,
) {
    params.push(format!("{prefix}.ln.gain"), Array::ones(&[d]));
    params.push(format!("{prefix}.ln.bias"), Array::zeros(&[d]));
    for block in ["t", "s"] {
        for w in ["w1", "w2", "w3"] {
            params.push(
                format!("{prefix}.{block}.{w}"),
                uniform_fan_in(rng, &[d, d], d),
            );
        }
    }
    params.push(
        format!("{prefix}.t.wpos"),
        uniform_fan_in_scaled(rng, &[t, t], t, WPOS_GAIN),
    );
    params.push(format!("{prefix}.s.alpha"), Array::from_fn(&[1], |_| ALPHA_INIT));
    params.push(format!("{prefix}.ffn.w1"), uniform_fan_in(rng, &[d, 2 * d], d));
    params.push(format!("{prefix}.ffn.b1"), Array::zeros(&[2 * d]));
    params.push(
        format!("{prefix}.ffn.w2"),
        uniform_fan_in_scaled(rng, &[2 * d, d], 2 * d, BRANCH_SCALE),
    );
    params.push(format!("{prefix}.ffn.b2"), Array::zeros(&[d]));
}

pub struct Stvh {
    pub dims: ModelDims,
    pub params: Params,
}

impl Stvh {
    pub fn new(dims: ModelDims, seed: u64) -> Result<Stvh> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let (d, k) = (dims.d, dims.k);
        params.push("vec.w", uniform_fan_in(&mut rng, &[dims.d_v * 25, d], dims.d_v * 25));
        params.push("vec.b", Array::zeros(&[d]));
        for layer in 0..dims.upsilon {
            push_fusion_layer(&mut params, &format!("pvf{layer}"), dims.t, d, &mut rng);
        }
        params.push("head.hash.w", uniform_fan_in_scaled(&mut rng, &[d, k], d, BRANCH_SCALE));
        params.push("head.hash.b", Array::zeros(&[k]));
        params.push("head.acty.w", uniform_fan_in(&mut rng, &[k, dims.activities], k));
        params.push("head.acty.b", Array::zeros(&[dims.activities]));
        params.push("head.action.w", uniform_fan_in(&mut rng, &[d, dims.actions], d));
        params.push("head.action.b", Array::zeros(&[dims.actions]));
        Ok(Stvh { dims, params })
    }

    pub fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            model: "stvh".into(),
            dims: self.dims.to_map(),
            params: self.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect(),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        io::write_checkpoint(path, &self.manifest(), &self.params.flatten_values())
    }

    pub fn load(path: &std::path::Path) -> Result<Stvh> {
        let (manifest, payload) = io::read_checkpoint(path)?;
        if manifest.model != "stvh" {
            return Err(Error::Format(format!(
                "checkpoint holds a {:?} model, expected stvh",
                manifest.model
            )));
        }
        let mut model = Stvh::new(ModelDims::from_manifest(&manifest)?, 0)?;
        let expected: Vec<(String, Vec<usize>)> =
            model.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
        if expected != manifest.params {
            return Err(Error::Format("checkpoint parameter layout mismatch".into()));
        }
        model.params.unflatten_values(&payload)?;
        Ok(model)
    }

    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        f_v: &Var,
        g_t: &Array,
        g_s: &Array,
    ) -> Result<StvhOutput> {
        let (stack, f_t, attention) =
            fusion_stack(bound, "pvf", f_v, g_t, g_s, self.dims.upsilon, tape)?;
        let f_t = f_t.ok_or_else(|| Error::Config("stvh needs at least one layer".into()))?;
        let f_s = stack;

        // Per-object action logits from the time-pooled temporal path.
        let per_object = f_t.mean_axis(1, false)?;
        let action_logits = per_object.affine(weight(bound, "head.action.w"), weight(bound, "head.action.b"))?;

        // One code per clip: hash-project every (object, frame) feature,
        // average the lot, and squash.
        let projected = f_s.affine(weight(bound, "head.hash.w"), weight(bound, "head.hash.b"))?;
        let shape = projected.shape();
        let pooled =
            projected.reshape(&[shape[0] * shape[1], shape[2]])?.mean_axis(0, false)?;
        let h = pooled.tanh();
        let b = sign_bits(&h.value());
        let activity_logits = h
            .reshape(&[1, self.dims.k])?
            .affine(weight(bound, "head.acty.w"), weight(bound, "head.acty.b"))?;

        Ok(StvhOutput {
            h,
            b,
            activity_logits: activity_logits.reshape(&[self.dims.activities])?,
            action_logits,
            f_t,
            f_s,
            attention,
        })
    }

    /// Forward from pooled RoI blocks [N, T, d_v, 5, 5]: runs the learnable
    /// vectorizer first.
    pub fn forward_roi(
        &self,
        tape: &Tape,
        bound: &Bound,
        f_roi: &Array,
        g_t: &Array,
        g_s: &Array,
    ) -> Result<StvhOutput> {
        let f_v = self.vectorize_roi(tape, bound, f_roi)?;
        self.forward(tape, bound, &f_v, g_t, g_s)
    }

    pub fn vectorize_roi(&self, tape: &Tape, bound: &Bound, f_roi: &Array) -> Result<Var> {
        vectorize(&tape.constant(f_roi.clone()), weight(bound, "vec.w"), weight(bound, "vec.b"))
    }
}

/// Resolves a model weight on a bound parameter set. Binding the wrong
/// parameter registry is a programming error, hence the panic.
pub(crate) fn weight<'a>(bound: &'a Bound, name: &str) -> &'a Var {
    bound.var_by_name(name).unwrap_or_else(|| panic!("parameter {name:?} not bound"))
}

/// Runs `depth` fusion layers named `{prefix}{layer}`. Returns the stack
/// output, the temporal-path output of the last layer, and per-layer
/// detached attention matrices. Zero depth is the identity.
pub(crate) fn fusion_stack(
    bound: &Bound,
    prefix: &str,
    f_v: &Var,
    g_t: &Array,
    g_s: &Array,
    depth: usize,
    tape: &Tape,
) -> Result<(Var, Option<Var>, Vec<(Array, Array)>)> {
    let g_t = tape.constant(g_t.clone());
    let g_s = tape.constant(g_s.clone());
    let mut f = f_v.clone();
    let mut last_temporal = None;
    let mut attention = Vec::with_capacity(depth);
    for layer in 0..depth {
        let (next, temporal, attn) =
            fusion_layer(bound, &format!("{prefix}{layer}"), &f, &g_t, &g_s)?;
        f = next;
        last_temporal = Some(temporal);
        attention.push(attn);
    }
    Ok((f, last_temporal, attention))
}

/// One fusion layer. Returns (layer output, temporal-path output, combined
/// temporal/spatial attention values).
pub(crate) fn fusion_layer(
    bound: &Bound,
    prefix: &str,
    f: &Var,
    g_t: &Var,
    g_s: &Var,
) -> Result<(Var, Var, (Array, Array))> {
    let id = |suffix: &str| weight(bound, &format!("{prefix}.{suffix}"));
    let rank = f.shape().len();
    let normed = f.layer_norm(id("ln.gain"), id("ln.bias"), rank - 1, LN_EPS)?;

    let (mixed_t, attn_t) =
        sgat_with_attention(&normed, g_t, id("t.w1"), id("t.w2"), id("t.w3"), id("t.wpos"))?;
    let temporal = normed.add(&mixed_t)?;

    // Spatial block works on [T, N, d]; the scalar position weight is
    // materialized as an identity multiple so the at_p contract applies.
    let n = f.shape()[0];
    let flipped = temporal.transpose(0, 1)?;
    let w_pos_s = temporal.tape().constant(Array::eye(n)).mul(id("s.alpha"))?;
    let (mixed_s, attn_s) =
        sgat_with_attention(&flipped, g_s, id("s.w1"), id("s.w2"), id("s.w3"), &w_pos_s)?;
    let spatial = flipped.add(&mixed_s)?.transpose(0, 1)?;

    let ffn = spatial
        .affine(id("ffn.w1"), id("ffn.b1"))?
        .relu()
        .affine(id("ffn.w2"), id("ffn.b2"))?;
    let out = spatial.add(&ffn)?;
    Ok((out, temporal, (attn_t.value(), attn_s.value())))
}
