//! Multi-focus hashing model.
//!
//! Same fusion machinery as the single-code model, but every layer of the
//! stack emits its own code: shallow layers stay close to the visual input,
//! deep layers accumulate more motion context, so the per-layer codes trade
//! appearance fidelity for activity fidelity as depth grows. A small decoder
//! reconstructs the pooled RoI blocks from the first layer's features to
//! keep the shallow path visually grounded.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::io::{self, CheckpointManifest};
use crate::param::{uniform_fan_in, uniform_fan_in_scaled, Bound, Params};
use crate::stvh::{
    fusion_layer, push_fusion_layer, sgat, sign_bits, weight, ModelDims, BRANCH_SCALE,
};
use crate::synth::vectorize;
use crate::tape::{Tape, Var};

/// Frame-axis attention block: mixes each object's features across frames,
/// weighted by the temporal graph. Identical in form to [`sgat`].
pub fn o_mfat(
    f: &Var,
    g_t: &Var,
    w_o: &Var,
    w2: &Var,
    w3: &Var,
    w_pos: &Var,
) -> Result<Var> {
    sgat(f, g_t, w_o, w2, w3, w_pos)
}

/// Object-axis attention block: flips to [T, N, d], mixes objects within
/// each frame under the spatial graph, and flips back.
pub fn g_mfat(
    f: &Var,
    g_s: &Var,
    w_g: &Var,
    w2: &Var,
    w3: &Var,
    w_pos: &Var,
) -> Result<Var> {
    let flipped = f.transpose(0, 1)?;
    sgat(&flipped, g_s, w_g, w2, w3, w_pos)?.transpose(0, 1)
}

pub struct MultiFocusOutput {
    /// Per-layer real codes, shallow to deep, each [K].
    pub h: Vec<Var>,
    /// Per-layer sign codes.
    pub b: Vec<Array>,
    /// Per-layer activity logits, each [A].
    pub activity_logits: Vec<Var>,
    pub action_logits: Var,
    /// Reconstruction of the pooled RoI blocks, [N, T, d_v, 5, 5].
    pub recon: Var,
    /// Combined temporal/spatial attention per layer, detached.
    pub attention: Vec<(Array, Array)>,
}

pub struct Mstvh {
    pub dims: ModelDims,
    pub params: Params,
}

impl Mstvh {
    pub fn new(dims: ModelDims, seed: u64) -> Result<Mstvh> {
        dims.validate()?;
        if dims.upsilon < 2 {
            return Err(Error::Config("multi-focus model needs at least two layers".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let (d, k) = (dims.d, dims.k);
        params.push("vec.w", uniform_fan_in(&mut rng, &[dims.d_v * 25, d], dims.d_v * 25));
        params.push("vec.b", Array::zeros(&[d]));
        for layer in 0..dims.upsilon {
            push_fusion_layer(&mut params, &format!("msf{layer}"), dims.t, d, &mut rng);
        }
        for layer in 0..dims.upsilon {
            params.push(
                format!("head{layer}.hash.w"),
                uniform_fan_in_scaled(&mut rng, &[d, k], d, BRANCH_SCALE),
            );
            params.push(format!("head{layer}.hash.b"), Array::zeros(&[k]));
            params.push(
                format!("head{layer}.acty.w"),
                uniform_fan_in(&mut rng, &[k, dims.activities], k),
            );
            params.push(format!("head{layer}.acty.b"), Array::zeros(&[dims.activities]));
        }
        params.push("head.action.w", uniform_fan_in(&mut rng, &[d, dims.actions], d));
        params.push("head.action.b", Array::zeros(&[dims.actions]));
        params.push("decoder.w", uniform_fan_in(&mut rng, &[d, dims.d_v * 25], d));
        params.push("decoder.b", Array::zeros(&[dims.d_v * 25]));
        Ok(Mstvh { dims, params })
    }

    pub fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            model: "mstvh".into(),
            dims: self.dims.to_map(),
            params: self.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect(),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        io::write_checkpoint(path, &self.manifest(), &self.params.flatten_values())
    }

    pub fn load(path: &std::path::Path) -> Result<Mstvh> {
        let (manifest, payload) = io::read_checkpoint(path)?;
        if manifest.model != "mstvh" {
            return Err(Error::Format(format!(
                "checkpoint holds a {:?} model, expected mstvh",
                manifest.model
            )));
        }
        let mut model = Mstvh::new(ModelDims::from_manifest(&manifest)?, 0)?;
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
    ) -> Result<MultiFocusOutput> {
        let upsilon = self.dims.upsilon;
        let g_t = tape.constant(g_t.clone());
        let g_s = tape.constant(g_s.clone());

        let mut f = f_v.clone();
        let mut layer_outputs = Vec::with_capacity(upsilon);
        let mut attention = Vec::with_capacity(upsilon);
        for layer in 0..upsilon {
            let (next, _, attn) = fusion_layer(bound, &format!("msf{layer}"), &f, &g_t, &g_s)?;
            f = next;
            layer_outputs.push(f.clone());
            attention.push(attn);
        }

        let mut h = Vec::with_capacity(upsilon);
        let mut b = Vec::with_capacity(upsilon);
        let mut activity_logits = Vec::with_capacity(upsilon);
        for (layer, out) in layer_outputs.iter().enumerate() {
            let shape = out.shape();
            let pooled = out.reshape(&[shape[0] * shape[1], shape[2]])?.mean_axis(0, false)?;
            let pre = pooled.reshape(&[1, self.dims.d])?.affine(
                weight(bound, &format!("head{layer}.hash.w")),
                weight(bound, &format!("head{layer}.hash.b")),
            )?;
            let h_layer = pre.reshape(&[self.dims.k])?.tanh();
            b.push(sign_bits(&h_layer.value()));
            let logits = h_layer.reshape(&[1, self.dims.k])?.affine(
                weight(bound, &format!("head{layer}.acty.w")),
                weight(bound, &format!("head{layer}.acty.b")),
            )?;
            activity_logits.push(logits.reshape(&[self.dims.activities])?);
            h.push(h_layer);
        }

        let action_logits = layer_outputs[upsilon - 1]
            .mean_axis(1, false)?
            .affine(weight(bound, "head.action.w"), weight(bound, "head.action.b"))?;

        let first = &layer_outputs[0];
        let shape = first.shape();
        let recon = first
            .affine(weight(bound, "decoder.w"), weight(bound, "decoder.b"))?
            .reshape(&[shape[0], shape[1], self.dims.d_v, 5, 5])?;

        Ok(MultiFocusOutput { h, b, activity_logits, action_logits, recon, attention })
    }

    /// Forward from pooled RoI blocks [N, T, d_v, 5, 5].
    pub fn forward_roi(
        &self,
        tape: &Tape,
        bound: &Bound,
        f_roi: &Array,
        g_t: &Array,
        g_s: &Array,
    ) -> Result<MultiFocusOutput> {
        let f_v = self.vectorize_roi(tape, bound, f_roi)?;
        self.forward(tape, bound, &f_v, g_t, g_s)
    }

    pub fn vectorize_roi(&self, tape: &Tape, bound: &Bound, f_roi: &Array) -> Result<Var> {
        vectorize(&tape.constant(f_roi.clone()), weight(bound, "vec.w"), weight(bound, "vec.b"))
    }
}
