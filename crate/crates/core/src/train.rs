//! Run configuration, dataset materialization, the optimization loop for
//! both model kinds, and code export.
//!
//! A run is deterministic given its seed: the validation split, every
//! epoch's batch order, and all parameter initializations derive from it,
//! so two runs with one config produce byte-identical checkpoints, codes,
//! and metric logs.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::array::Array;
use crate::error::{Error, Result};
use crate::graph::build_graphs;
use crate::io::{self, CodeSet, LabelMap, SampleLabels};
use crate::losses::{
    ce_activity, ce_activity_layered, contrastive_loss, quantization_loss, recon_loss,
    relation_encode, total_mstvh, total_stvh, LossWeights, MstvhLossTerms, RelationGcn,
    StvhLossTerms,
};
use crate::mstvh::{Mstvh, MultiFocusOutput};
use crate::param::{Bound, Params};
use crate::retrieval::{map_at_k, CodeRecord, Index};
use crate::stvh::{ModelDims, Stvh, StvhOutput};
use crate::synth::{extract_roi_features, generate_scene, sample_seed, GeneratorConfig};
use crate::tape::{concat, stack, Tape, Var};

const SPLIT_SALT: u64 = 0x5EED_0001;
const EPOCH_SALT: u64 = 0x5EED_0002;
const GCN_SALT: u64 = 0x5EED_0003;

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_LOG: &str = "metrics.jsonl";

// ---- configuration ----

/// Model and generator dimensions, mirrored verbatim in config files.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct DimsConfig {
    pub n: usize,
    pub t: usize,
    pub d_v: usize,
    pub d: usize,
    pub k: usize,
    pub upsilon: usize,
    pub activities: usize,
    pub actions: usize,
    pub appearances: usize,
}

impl DimsConfig {
    pub fn desk_default() -> DimsConfig {
        DimsConfig {
            n: 4,
            t: 8,
            d_v: 32,
            d: 64,
            k: 64,
            upsilon: 4,
            activities: 4,
            actions: 3,
            appearances: 4,
        }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            t: self.t,
            d_v: self.d_v,
            d: self.d,
            k: self.k,
            activities: self.activities,
            actions: self.actions,
            upsilon: self.upsilon,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OptimizerConfig {
    pub kind: String,
    /// 1-based epoch to learning rate; each rate holds until the next key.
    pub lr_schedule: BTreeMap<u32, f64>,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl OptimizerConfig {
    /// Step decay at epochs 11 and 21, factors 0.5 and 0.2 of the initial
    /// rate.
    pub fn desk_default() -> OptimizerConfig {
        OptimizerConfig {
            kind: "adam".into(),
            lr_schedule: BTreeMap::from([(1, 1e-3), (11, 5e-4), (21, 2e-4)]),
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != "adam" {
            return Err(Error::Config(format!("unsupported optimizer kind {:?}", self.kind)));
        }
        if self.lr_schedule.keys().next() != Some(&1) {
            return Err(Error::Config("lr_schedule must start at epoch 1".into()));
        }
        for (&epoch, &rate) in &self.lr_schedule {
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(Error::Config(format!("bad learning rate {rate} at epoch {epoch}")));
            }
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(Error::Config(format!("betas out of range: {:?}", self.betas)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    pub fn lr_for(&self, epoch: usize) -> f64 {
        let epoch = u32::try_from(epoch).unwrap_or(u32::MAX);
        *self
            .lr_schedule
            .range(..=epoch)
            .next_back()
            .expect("validated schedule starts at epoch 1")
            .1
    }
}

fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::desk_default()
}

fn default_map_dim() -> usize {
    16
}

fn default_scene_dim() -> f64 {
    128.0
}

/// Settings for generating training data in place of a dataset directory.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct GeneratorOptions {
    pub samples: usize,
    #[serde(default = "default_map_dim")]
    pub map_width: usize,
    #[serde(default = "default_map_dim")]
    pub map_height: usize,
    #[serde(default = "default_scene_dim")]
    pub scene_width: f64,
    #[serde(default = "default_scene_dim")]
    pub scene_height: f64,
}

impl GeneratorOptions {
    pub fn desk_default() -> GeneratorOptions {
        GeneratorOptions {
            samples: 512,
            map_width: 16,
            map_height: 16,
            scene_width: 128.0,
            scene_height: 128.0,
        }
    }
}

/// One training run, as read from a JSON config file. Exactly one of
/// `dataset` (a directory produced by `generate` or an external tool) and
/// `generator` (in-memory synthesis) must be set.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub model: String,
    pub dims: DimsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_weights: Option<LossWeights>,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorOptions>,
}

impl RunConfig {
    pub fn desk_default(model: &str, seed: u64) -> RunConfig {
        RunConfig {
            model: model.into(),
            dims: DimsConfig::desk_default(),
            loss_weights: None,
            optimizer: OptimizerConfig::desk_default(),
            epochs: 60,
            batch_size: 8,
            seed,
            dataset: None,
            generator: Some(GeneratorOptions::desk_default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model != "stvh" && self.model != "mstvh" {
            return Err(Error::Config(format!("unknown model kind {:?}", self.model)));
        }
        self.dims.model_dims().validate()?;
        if self.dims.n < 2 {
            return Err(Error::Config("need at least two objects per clip".into()));
        }
        if self.dims.appearances == 0 {
            return Err(Error::Config("need at least one appearance class".into()));
        }
        if self.model == "mstvh" && self.dims.upsilon < 2 {
            return Err(Error::Config("multi-focus model needs at least two layers".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 (the contrastive term needs pairs)".into(),
            ));
        }
        self.optimizer.validate()?;
        if let Some(w) = &self.loss_weights {
            w.validate()?;
            if self.model == "mstvh" && w.layer_weights.len() != self.dims.upsilon {
                return Err(Error::Config(format!(
                    "need {} layer weights, got {}",
                    self.dims.upsilon,
                    w.layer_weights.len()
                )));
            }
        }
        match (&self.dataset, &self.generator) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(Error::Config("set exactly one of dataset and generator".into())),
        }
    }

    pub fn effective_weights(&self) -> LossWeights {
        self.loss_weights.clone().unwrap_or_else(|| LossWeights::defaults(self.dims.upsilon))
    }

    /// The full generator settings for this config; errors when the config
    /// points at a dataset directory instead.
    pub fn generator_config(&self) -> Result<(GeneratorConfig, usize)> {
        let opts = self
            .generator
            .ok_or_else(|| Error::Config("config has no generator block".into()))?;
        Ok((
            GeneratorConfig {
                n: self.dims.n,
                t: self.dims.t,
                d_v: self.dims.d_v,
                map_width: opts.map_width,
                map_height: opts.map_height,
                scene_width: opts.scene_width,
                scene_height: opts.scene_height,
                activities: self.dims.activities,
                appearances: self.dims.appearances,
                actions: self.dims.actions,
                seed: self.seed,
            },
            opts.samples,
        ))
    }
}

pub fn read_run_config(path: &Path) -> Result<RunConfig> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// Worker count for parallel stages: available cores, capped by the
/// GAH_THREADS environment variable when it parses to a positive integer.
pub fn worker_threads() -> usize {
    let default = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    thread_cap(std::env::var("GAH_THREADS").ok().as_deref(), default)
}

fn thread_cap(var: Option<&str>, default: usize) -> usize {
    match var.and_then(|s| s.trim().parse::<usize>().ok()) {
        Some(n) if n >= 1 => default.min(n),
        _ => default,
    }
}

// ---- datasets in memory ----

/// Per-sample features as the model consumes them: pooled RoI blocks
/// [N, T, d_v, 5, 5] that still pass through the learnable vectorizer, or
/// externally produced vectors [N, T, d] that skip it.
#[derive(Clone, Debug)]
pub enum FeatureBlock {
    Roi(Array),
    Vectorized(Array),
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    pub features: FeatureBlock,
    pub g_t: Array,
    pub g_s: Array,
    pub activity: usize,
    pub appearance: usize,
    pub actions: Vec<usize>,
    pub video_id: Option<String>,
}

pub struct Dataset {
    pub samples: Vec<TrainSample>,
    pub n: usize,
    pub t: usize,
    pub d_v: usize,
    /// Set when features are pre-vectorized; must equal the model's d.
    pub feature_dim: Option<usize>,
    pub activities: usize,
    pub appearances: usize,
    pub actions: usize,
    pub precomputed: bool,
}

/// Generates `count` samples directly into memory, with RoI features and
/// relation graphs precomputed.
pub fn synth_dataset(dims: &DimsConfig, opts: &GeneratorOptions, seed: u64) -> Result<Dataset> {
    let config = GeneratorConfig {
        n: dims.n,
        t: dims.t,
        d_v: dims.d_v,
        map_width: opts.map_width,
        map_height: opts.map_height,
        scene_width: opts.scene_width,
        scene_height: opts.scene_height,
        activities: dims.activities,
        appearances: dims.appearances,
        actions: dims.actions,
        seed,
    };
    config.validate()?;
    if opts.samples == 0 {
        return Err(Error::Config("generator needs at least one sample".into()));
    }
    let mut samples = Vec::with_capacity(opts.samples);
    for index in 0..opts.samples {
        let scene = generate_scene(&config, sample_seed(seed, index as u64))?;
        let roi =
            extract_roi_features(&scene.feature_maps, &scene.traj, opts.map_width, opts.map_height)?;
        let graphs = build_graphs(&scene.traj)?;
        samples.push(TrainSample {
            id: io::sample_id(index),
            features: FeatureBlock::Roi(roi),
            g_t: graphs.g_t,
            g_s: graphs.g_s,
            activity: scene.activity_label,
            appearance: scene.appearance_label,
            actions: scene.action_labels,
            video_id: None,
        });
    }
    Ok(Dataset {
        samples,
        n: dims.n,
        t: dims.t,
        d_v: dims.d_v,
        feature_dim: None,
        activities: dims.activities,
        appearances: dims.appearances,
        actions: dims.actions,
        precomputed: false,
    })
}

/// Loads a dataset directory written by `generate` or an external producer:
/// RoI pooling and graph construction happen here, once.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = io::read_manifest(&dir.join("manifest.json"))?;
    let labels = io::read_labels(&dir.join("labels.json"))?;
    if labels.len() != manifest.samples {
        return Err(Error::Format(format!(
            "manifest declares {} samples, labels file holds {}",
            manifest.samples,
            labels.len()
        )));
    }
    let mut samples = Vec::with_capacity(labels.len());
    let mut feature_dim = None;
    for (id, label) in &labels {
        if label.activity >= manifest.activities
            || label.appearance >= manifest.appearances
            || label.actions.iter().any(|&a| a >= manifest.actions)
        {
            return Err(Error::Format(format!("sample {id}: label out of declared range")));
        }
        let traj = io::read_trajectories(
            &dir.join(format!("{id}.traj")),
            manifest.scene_width,
            manifest.scene_height,
        )?;
        if traj.objects() != manifest.n || traj.frames() != manifest.t {
            return Err(Error::Format(format!("sample {id}: trajectory dims disagree with manifest")));
        }
        let features = if manifest.precomputed {
            let f = io::read_array(&dir.join(format!("{id}.feat")))?;
            if f.rank() != 3 || f.shape()[0] != manifest.n || f.shape()[1] != manifest.t {
                return Err(Error::Format(format!(
                    "sample {id}: feature tensor {:?} does not match [N, T, d]",
                    f.shape()
                )));
            }
            match feature_dim {
                None => feature_dim = Some(f.shape()[2]),
                Some(d) if d == f.shape()[2] => {}
                Some(d) => {
                    return Err(Error::Format(format!(
                        "sample {id}: feature dim {} differs from {d}",
                        f.shape()[2]
                    )))
                }
            }
            FeatureBlock::Vectorized(f)
        } else {
            let maps = io::read_array(&dir.join(format!("{id}.fmap")))?;
            FeatureBlock::Roi(extract_roi_features(
                &maps,
                &traj,
                manifest.map_width,
                manifest.map_height,
            )?)
        };
        let graphs = build_graphs(&traj)?;
        samples.push(TrainSample {
            id: id.clone(),
            features,
            g_t: graphs.g_t,
            g_s: graphs.g_s,
            activity: label.activity,
            appearance: label.appearance,
            actions: label.actions.clone(),
            video_id: label.video_id.clone(),
        });
    }
    Ok(Dataset {
        samples,
        n: manifest.n,
        t: manifest.t,
        d_v: manifest.d_v,
        feature_dim,
        activities: manifest.activities,
        appearances: manifest.appearances,
        actions: manifest.actions,
        precomputed: manifest.precomputed,
    })
}

fn check_compat(config: &RunConfig, ds: &Dataset) -> Result<()> {
    let d = &config.dims;
    if ds.n != d.n || ds.t != d.t || ds.d_v != d.d_v {
        return Err(Error::Config(format!(
            "dataset dims (N={}, T={}, d_v={}) disagree with config (N={}, T={}, d_v={})",
            ds.n, ds.t, ds.d_v, d.n, d.t, d.d_v
        )));
    }
    if ds.activities != d.activities || ds.actions != d.actions || ds.appearances != d.appearances
    {
        return Err(Error::Config(
            "dataset label spaces disagree with configured class counts".into(),
        ));
    }
    if let Some(fd) = ds.feature_dim {
        if fd != d.d {
            return Err(Error::Config(format!(
                "precomputed features have dim {fd}, model expects {}",
                d.d
            )));
        }
    }
    Ok(())
}

// ---- the two model kinds under one roof ----

pub enum Model {
    Stvh(Stvh),
    Mstvh(Mstvh),
}

impl Model {
    pub fn new(kind: &str, dims: ModelDims, seed: u64) -> Result<Model> {
        match kind {
            "stvh" => Ok(Model::Stvh(Stvh::new(dims, seed)?)),
            "mstvh" => Ok(Model::Mstvh(Mstvh::new(dims, seed)?)),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }

    pub fn load(path: &Path) -> Result<Model> {
        let (manifest, _) = io::read_checkpoint(path)?;
        match manifest.model.as_str() {
            "stvh" => Ok(Model::Stvh(Stvh::load(path)?)),
            "mstvh" => Ok(Model::Mstvh(Mstvh::load(path)?)),
            other => Err(Error::Format(format!("checkpoint holds unknown model kind {other:?}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Model::Stvh(m) => m.save(path),
            Model::Mstvh(m) => m.save(path),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::Stvh(_) => "stvh",
            Model::Mstvh(_) => "mstvh",
        }
    }

    pub fn dims(&self) -> ModelDims {
        match self {
            Model::Stvh(m) => m.dims,
            Model::Mstvh(m) => m.dims,
        }
    }

    pub fn params(&self) -> &Params {
        match self {
            Model::Stvh(m) => &m.params,
            Model::Mstvh(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut Params {
        match self {
            Model::Stvh(m) => &mut m.params,
            Model::Mstvh(m) => &mut m.params,
        }
    }

    /// Code layers the model emits per sample: 1 or Υ.
    pub fn code_layers(&self) -> usize {
        match self {
            Model::Stvh(_) => 1,
            Model::Mstvh(m) => m.dims.upsilon,
        }
    }

    /// Per-layer (temporal, spatial) attention matrices for one sample.
    pub fn attention(&self, sample: &TrainSample) -> Result<Vec<(Array, Array)>> {
        let tape = Tape::new();
        match self {
            Model::Stvh(m) => {
                let bound = m.params.bind(&tape);
                Ok(stvh_forward(m, &tape, &bound, sample)?.attention)
            }
            Model::Mstvh(m) => {
                let bound = m.params.bind(&tape);
                Ok(mstvh_forward(m, &tape, &bound, sample)?.attention)
            }
        }
    }
}

fn stvh_forward(
    model: &Stvh,
    tape: &Tape,
    bound: &Bound,
    sample: &TrainSample,
) -> Result<StvhOutput> {
    match &sample.features {
        FeatureBlock::Roi(roi) => model.forward_roi(tape, bound, roi, &sample.g_t, &sample.g_s),
        FeatureBlock::Vectorized(f) => {
            model.forward(tape, bound, &tape.constant(f.clone()), &sample.g_t, &sample.g_s)
        }
    }
}

fn mstvh_forward(
    model: &Mstvh,
    tape: &Tape,
    bound: &Bound,
    sample: &TrainSample,
) -> Result<MultiFocusOutput> {
    match &sample.features {
        FeatureBlock::Roi(roi) => model.forward_roi(tape, bound, roi, &sample.g_t, &sample.g_s),
        FeatureBlock::Vectorized(f) => {
            model.forward(tape, bound, &tape.constant(f.clone()), &sample.g_t, &sample.g_s)
        }
    }
}

// ---- batch losses ----

/// One batch's loss: the differentiable total plus detached component
/// values for the metrics log.
pub struct BatchLoss {
    pub total: Var,
    pub activity: f64,
    pub action: f64,
    pub quantization: f64,
    pub contrastive: f64,
    pub reconstruction: Option<f64>,
    pub correct: usize,
}

fn count_correct(logits: &Array, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(row, &label)| {
            let r = &logits.data()[row * classes..(row + 1) * classes];
            let mut best = 0;
            for c in 1..classes {
                if r[c] > r[best] {
                    best = c;
                }
            }
            best == label
        })
        .count()
}

fn flat_action_labels(batch: &[&TrainSample]) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    for s in batch {
        if s.actions.is_empty() {
            return Err(Error::Config(format!(
                "sample {}: no per-object action labels; the action loss needs them",
                s.id
            )));
        }
        labels.extend_from_slice(&s.actions);
    }
    Ok(labels)
}

/// Full training loss of one batch for the interleaved model: activity and
/// action cross-entropies, the batch quantization bound, and the
/// relation-contrastive term. `gcn_bound` must be bound to the same tape.
pub fn stvh_batch_loss(
    model: &Stvh,
    tape: &Tape,
    model_bound: &Bound,
    gcn_bound: &Bound,
    batch: &[&TrainSample],
    weights: &LossWeights,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::op("batch_loss", "empty batch"));
    }
    let mut hs = Vec::with_capacity(batch.len());
    let mut b_rows = Vec::with_capacity(batch.len() * model.dims.k);
    let mut acty = Vec::with_capacity(batch.len());
    let mut actions = Vec::with_capacity(batch.len());
    let mut relation = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for s in batch {
        let out = stvh_forward(model, tape, model_bound, s)?;
        relation.push(relation_encode(gcn_bound, &out.action_logits, &s.g_s)?);
        b_rows.extend_from_slice(out.b.data());
        hs.push(out.h);
        acty.push(out.activity_logits);
        actions.push(out.action_logits);
        labels.push(s.activity);
    }
    let h = stack(&hs)?;
    let b = Array::from_vec(vec![batch.len(), model.dims.k], b_rows)?;
    let acty_logits = stack(&acty)?;
    let action_logits = concat(0, &actions)?;
    let action_labels = flat_action_labels(batch)?;
    let a = stack(&relation)?;

    let terms = StvhLossTerms {
        activity: ce_activity(&acty_logits, &labels)?,
        action: ce_activity(&action_logits, &action_labels)?,
        quantization: quantization_loss(&h, &b)?,
        contrastive: contrastive_loss(&a, &h)?,
    };
    let total = total_stvh(&terms, weights)?;
    Ok(BatchLoss {
        total,
        activity: terms.activity.value().item(),
        action: terms.action.value().item(),
        quantization: terms.quantization.value().item(),
        contrastive: terms.contrastive.value().item(),
        reconstruction: None,
        correct: count_correct(&acty_logits.value(), &labels),
    })
}

/// Full training loss of one batch for the multi-focus model: depth-ramped
/// activity supervision over every layer, the quantization bound summed
/// across layers, the relation-contrastive term on the deepest code, and
/// reconstruction of the RoI blocks from the shallowest layer.
pub fn mstvh_batch_loss(
    model: &Mstvh,
    tape: &Tape,
    model_bound: &Bound,
    gcn_bound: &Bound,
    batch: &[&TrainSample],
    weights: &LossWeights,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::op("batch_loss", "empty batch"));
    }
    let upsilon = model.dims.upsilon;
    let mut layer_hs: Vec<Vec<Var>> = vec![Vec::with_capacity(batch.len()); upsilon];
    let mut layer_bs: Vec<Vec<f64>> = vec![Vec::with_capacity(batch.len() * model.dims.k); upsilon];
    let mut layer_acty: Vec<Vec<Var>> = vec![Vec::with_capacity(batch.len()); upsilon];
    let mut actions = Vec::with_capacity(batch.len());
    let mut relation = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    let mut recons = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for s in batch {
        let out = mstvh_forward(model, tape, model_bound, s)?;
        relation.push(relation_encode(gcn_bound, &out.action_logits, &s.g_s)?);
        for tau in 0..upsilon {
            layer_bs[tau].extend_from_slice(out.b[tau].data());
            layer_acty[tau].push(out.activity_logits[tau].clone());
        }
        for (tau, h_layer) in out.h.into_iter().enumerate() {
            layer_hs[tau].push(h_layer);
        }
        if let FeatureBlock::Roi(roi) = &s.features {
            targets.push(tape.constant(roi.clone()));
            recons.push(out.recon);
        }
        actions.push(out.action_logits);
        labels.push(s.activity);
    }

    let acty_stacks: Vec<Var> =
        layer_acty.iter().map(|l| stack(l)).collect::<Result<_>>()?;
    let activity = ce_activity_layered(&acty_stacks, &labels, &weights.layer_weights)?;

    let action_logits = concat(0, &actions)?;
    let action_labels = flat_action_labels(batch)?;
    let action = ce_activity(&action_logits, &action_labels)?;

    let mut quantization: Option<Var> = None;
    for tau in 0..upsilon {
        let h_tau = stack(&layer_hs[tau])?;
        let b_tau = Array::from_vec(vec![batch.len(), model.dims.k], layer_bs[tau].clone())?;
        let q = quantization_loss(&h_tau, &b_tau)?;
        quantization = Some(match quantization {
            None => q,
            Some(acc) => acc.add(&q)?,
        });
    }
    let quantization = quantization.expect("at least two layers");

    let deepest_h = stack(&layer_hs[upsilon - 1])?;
    let contrastive = contrastive_loss(&stack(&relation)?, &deepest_h)?;

    let reconstruction = if recons.len() == batch.len() {
        recon_loss(&stack(&recons)?, &stack(&targets)?)?
    } else {
        tape.constant(Array::scalar(0.0))
    };

    let terms = MstvhLossTerms {
        activity,
        action,
        quantization,
        contrastive,
        reconstruction,
    };
    let total = total_mstvh(&terms, weights)?;
    Ok(BatchLoss {
        total,
        activity: terms.activity.value().item(),
        action: terms.action.value().item(),
        quantization: terms.quantization.value().item(),
        contrastive: terms.contrastive.value().item(),
        reconstruction: Some(terms.reconstruction.value().item()),
        correct: count_correct(&acty_stacks[upsilon - 1].value(), &labels),
    })
}

// ---- training loop ----

/// One line of the metrics log; loss components are means over the epoch's
/// training samples.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub activity: f64,
    pub action: f64,
    pub quantization: f64,
    pub contrastive: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<f64>,
    pub train_accuracy: f64,
    pub val_map: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub epochs: usize,
    pub final_val_map: f64,
    pub best_val_map: f64,
    pub best_epoch: usize,
}

/// Deterministic 10% validation split (at least one sample), both sides
/// sorted ascending.
pub fn validation_split(samples: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, SPLIT_SALT));
    shuffle(&mut order, &mut rng);
    let val = (samples / 10).max(1).min(samples);
    let mut val_idx = order[..val].to_vec();
    let mut train_idx = order[val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    (train_idx, val_idx)
}

fn shuffle(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for j in (1..indices.len()).rev() {
        indices.swap(j, rng.gen_range(0..=j));
    }
}

/// Contiguous batch boundaries; a trailing single-sample batch is merged
/// into its predecessor so the contrastive term always sees a pair.
fn batch_ranges(total: usize, batch: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < total {
        out.push((start, (start + batch).min(total)));
        start = (start + batch).min(total);
    }
    if out.len() >= 2 && out[out.len() - 1].1 - out[out.len() - 1].0 == 1 {
        let (_, end) = out.pop().expect("checked length");
        out.last_mut().expect("checked length").1 = end;
    }
    out
}

/// Packs every code layer of one sample, shallow to deep.
pub fn encode_sample(model: &Model, sample: &TrainSample) -> Result<Vec<Vec<u8>>> {
    let tape = Tape::new();
    match model {
        Model::Stvh(m) => {
            let bound = m.params.bind(&tape);
            let out = stvh_forward(m, &tape, &bound, sample)?;
            Ok(vec![io::pack_code(out.b.data())])
        }
        Model::Mstvh(m) => {
            let bound = m.params.bind(&tape);
            let out = mstvh_forward(m, &tape, &bound, sample)?;
            Ok(out.b.iter().map(|b| io::pack_code(b.data())).collect())
        }
    }
}

/// Predicted activity class of one sample: argmax over the deepest layer's
/// activity logits, first index winning ties.
pub fn predict_activity(model: &Model, sample: &TrainSample) -> Result<usize> {
    let tape = Tape::new();
    let logits = match model {
        Model::Stvh(m) => {
            let bound = m.params.bind(&tape);
            stvh_forward(m, &tape, &bound, sample)?.activity_logits.value()
        }
        Model::Mstvh(m) => {
            let bound = m.params.bind(&tape);
            let out = mstvh_forward(m, &tape, &bound, sample)?;
            out.activity_logits.last().expect("at least one layer").value()
        }
    };
    let data = logits.data();
    let mut best = 0;
    for c in 1..data.len() {
        if data[c] > data[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Validation retrieval quality: leave-one-out activity mAP@10 inside the
/// validation split. When the split is a single sample, the training
/// portion serves as the database instead. Returns 0 when no query has any
/// relevant record to find.
fn validation_map(
    model: &Model,
    ds: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
) -> Result<f64> {
    let k_bits = model.dims().k;
    let deepest = |i: usize| -> Result<Vec<u8>> {
        Ok(encode_sample(model, &ds.samples[i])?.pop().expect("at least one layer"))
    };
    let record = |id: u64, code: Vec<u8>, activity: usize| CodeRecord {
        id,
        code,
        labels: BTreeMap::from([("activity".to_string(), activity as i64)]),
    };

    if val_idx.len() >= 2 {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in val_idx {
            *counts.entry(ds.samples[i].activity).or_insert(0) += 1;
        }
        if counts.values().all(|&c| c < 2) {
            return Ok(0.0);
        }
        let mut index = Index::new(k_bits)?;
        let mut queries = Vec::with_capacity(val_idx.len());
        for (pos, &i) in val_idx.iter().enumerate() {
            let code = deepest(i)?;
            let activity = ds.samples[i].activity;
            index.insert(record(pos as u64, code.clone(), activity))?;
            queries.push(record(pos as u64, code, activity));
        }
        let k = val_idx.len().saturating_sub(1).min(10).max(1);
        Ok(map_at_k(&queries, &index, "activity", k, true)?.value)
    } else {
        let train_classes: std::collections::BTreeSet<usize> =
            train_idx.iter().map(|&i| ds.samples[i].activity).collect();
        if !val_idx.iter().any(|&i| train_classes.contains(&ds.samples[i].activity)) {
            return Ok(0.0);
        }
        let mut index = Index::new(k_bits)?;
        for (pos, &i) in train_idx.iter().enumerate() {
            index.insert(record(pos as u64, deepest(i)?, ds.samples[i].activity))?;
        }
        let queries: Vec<CodeRecord> = val_idx
            .iter()
            .enumerate()
            .map(|(pos, &i)| Ok(record(1_000_000 + pos as u64, deepest(i)?, ds.samples[i].activity)))
            .collect::<Result<_>>()?;
        let k = train_idx.len().min(10).max(1);
        Ok(map_at_k(&queries, &index, "activity", k, false)?.value)
    }
}

fn materialize_dataset(config: &RunConfig) -> Result<Dataset> {
    let ds = match (&config.dataset, &config.generator) {
        (Some(dir), None) => load_dataset(dir)?,
        (None, Some(opts)) => synth_dataset(&config.dims, opts, config.seed)?,
        _ => return Err(Error::Config("set exactly one of dataset and generator".into())),
    };
    check_compat(config, &ds)?;
    Ok(ds)
}

/// Runs the configured training job, writing `final.ckpt` (updated every
/// epoch, so a numeric abort always leaves the last good state on disk),
/// `best.ckpt` (highest validation mAP), and `metrics.jsonl` into
/// `out_dir`.
pub fn train(config: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let weights = config.effective_weights();
    weights.validate()?;
    if config.model == "mstvh" && weights.layer_weights.len() != config.dims.upsilon {
        return Err(Error::Config(format!(
            "need {} layer weights, got {}",
            config.dims.upsilon,
            weights.layer_weights.len()
        )));
    }

    let ds = materialize_dataset(config)?;
    if config.model == "mstvh" && ds.precomputed && weights.mu3 > 0.0 {
        return Err(Error::Config(
            "reconstruction needs RoI feature blocks; set mu3 to 0 for precomputed features"
                .into(),
        ));
    }
    for s in &ds.samples {
        if s.actions.len() != ds.n {
            return Err(Error::Config(format!(
                "sample {}: expected {} action labels, found {}",
                s.id,
                ds.n,
                s.actions.len()
            )));
        }
    }

    let (train_idx, val_idx) = validation_split(ds.samples.len(), config.seed);
    if train_idx.len() < 2 {
        return Err(Error::Config(format!(
            "{} samples leave only {} for training after the validation split",
            ds.samples.len(),
            train_idx.len()
        )));
    }

    let mut model = Model::new(&config.model, config.dims.model_dims(), config.seed)?;
    let mut gcn = RelationGcn::new(
        config.dims.actions,
        config.dims.k,
        sample_seed(config.seed, GCN_SALT),
    );
    let (b1, b2) = config.optimizer.betas;
    let mut model_adam = Adam::with_settings(model.params(), b1, b2, config.optimizer.eps)?;
    let mut gcn_adam = Adam::with_settings(&gcn.params, b1, b2, config.optimizer.eps)?;

    std::fs::create_dir_all(out_dir)?;
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let metrics_path = out_dir.join(METRICS_LOG);
    std::fs::File::create(&metrics_path)?;
    model.save(&final_path)?;

    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut final_val = 0.0;
    for epoch in 1..=config.epochs {
        let lr = config.optimizer.lr_for(epoch);
        let mut order = train_idx.clone();
        let mut rng =
            ChaCha8Rng::seed_from_u64(sample_seed(config.seed ^ EPOCH_SALT, epoch as u64));
        shuffle(&mut order, &mut rng);

        let mut sums = [0.0f64; 6];
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (start, end) in batch_ranges(order.len(), config.batch_size) {
            let batch: Vec<&TrainSample> = order[start..end].iter().map(|&i| &ds.samples[i]).collect();
            let tape = Tape::new();
            let model_bound = model.params().bind(&tape);
            let gcn_bound = gcn.params.bind(&tape);
            let loss = match &model {
                Model::Stvh(m) => {
                    stvh_batch_loss(m, &tape, &model_bound, &gcn_bound, &batch, &weights)?
                }
                Model::Mstvh(m) => {
                    mstvh_batch_loss(m, &tape, &model_bound, &gcn_bound, &batch, &weights)?
                }
            };
            let total_value = loss.total.value().item();
            if !total_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "epoch {epoch}: training loss is {total_value}; last good checkpoint kept at {}",
                    final_path.display()
                )));
            }
            let grads = loss.total.backward()?;
            model.params_mut().absorb_grads(&model_bound, &grads);
            gcn.params.absorb_grads(&gcn_bound, &grads);
            model_adam.step(model.params_mut(), lr)?;
            gcn_adam.step(&mut gcn.params, lr)?;

            let w = batch.len() as f64;
            sums[0] += total_value * w;
            sums[1] += loss.activity * w;
            sums[2] += loss.action * w;
            sums[3] += loss.quantization * w;
            sums[4] += loss.contrastive * w;
            sums[5] += loss.reconstruction.unwrap_or(0.0) * w;
            correct += loss.correct;
            seen += batch.len();
        }

        let val_map = validation_map(&model, &ds, &train_idx, &val_idx)?;
        final_val = val_map;
        let denom = seen as f64;
        let metrics = EpochMetrics {
            epoch,
            lr,
            loss: sums[0] / denom,
            activity: sums[1] / denom,
            action: sums[2] / denom,
            quantization: sums[3] / denom,
            contrastive: sums[4] / denom,
            reconstruction: match &model {
                Model::Stvh(_) => None,
                Model::Mstvh(_) => Some(sums[5] / denom),
            },
            train_accuracy: correct as f64 / denom,
            val_map,
        };
        let mut log = std::fs::OpenOptions::new().append(true).open(&metrics_path)?;
        writeln!(log, "{}", serde_json::to_string(&metrics)?)?;

        model.save(&final_path)?;
        if val_map > best_val {
            best_val = val_map;
            best_epoch = epoch;
            model.save(&best_path)?;
        }
    }

    Ok(TrainOutcome {
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        metrics: metrics_path,
        epochs: config.epochs,
        final_val_map: final_val,
        best_val_map: best_val,
        best_epoch,
    })
}

// ---- code export ----

/// Encodes every sample of `dataset`, in id order, into one code set plus
/// a labels sidecar keyed the same way. The sidecar's video ids default to
/// the sample ids when the dataset declares none.
pub fn encode_dataset(
    model: &Model,
    dataset: &Dataset,
    threads: usize,
) -> Result<(CodeSet, LabelMap)> {
    let dims = model.dims();
    if dataset.t != dims.t {
        return Err(Error::Config(format!(
            "dataset has T={}, checkpoint expects T={}",
            dataset.t, dims.t
        )));
    }
    if let Some(fd) = dataset.feature_dim {
        if fd != dims.d {
            return Err(Error::Config(format!(
                "precomputed features have dim {fd}, checkpoint expects {}",
                dims.d
            )));
        }
    } else if dataset.d_v != dims.d_v {
        return Err(Error::Config(format!(
            "dataset has d_v={}, checkpoint expects d_v={}",
            dataset.d_v, dims.d_v
        )));
    }
    let count = dataset.samples.len();
    if count == 0 {
        return Err(Error::Config("nothing to encode".into()));
    }
    let threads = threads.clamp(1, count);
    let results: Vec<Result<Vec<(usize, Vec<Vec<u8>>)>>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for worker in 0..threads {
            let model = &model;
            let dataset = &dataset;
            handles.push(scope.spawn(move || {
                let mut done = Vec::new();
                let mut index = worker;
                while index < count {
                    done.push((index, encode_sample(model, &dataset.samples[index])?));
                    index += threads;
                }
                Ok(done)
            }));
        }
        handles.into_iter().map(|j| j.join().expect("encode worker panicked")).collect()
    });

    let mut per_sample: Vec<Option<Vec<Vec<u8>>>> = vec![None; count];
    for chunk in results {
        for (index, layers) in chunk? {
            per_sample[index] = Some(layers);
        }
    }
    let mut codes = CodeSet::new(dims.k, model.code_layers());
    let mut labels = LabelMap::new();
    for (sample, layers) in dataset.samples.iter().zip(per_sample) {
        codes.push(&layers.expect("every index visited"))?;
        labels.insert(
            sample.id.clone(),
            SampleLabels {
                activity: sample.activity,
                appearance: sample.appearance,
                actions: sample.actions.clone(),
                video_id: sample.video_id.clone().or_else(|| Some(sample.id.clone())),
            },
        );
    }
    Ok((codes, labels))
}

/// Turns one layer of a code set plus its sidecar into retrieval records,
/// ids numbered by sidecar key order. Video-id strings map to integers by
/// sorted order within this file.
pub fn code_records(codes: &CodeSet, labels: &LabelMap, layer: usize) -> Result<Vec<CodeRecord>> {
    if labels.len() != codes.samples() {
        return Err(Error::Format(format!(
            "code set holds {} samples, sidecar {}",
            codes.samples(),
            labels.len()
        )));
    }
    if layer >= codes.upsilon() {
        return Err(Error::op(
            "code_records",
            format!("layer {layer} out of range for {} layers", codes.upsilon()),
        ));
    }
    let mut video_ids: Vec<&str> =
        labels.values().filter_map(|l| l.video_id.as_deref()).collect();
    video_ids.sort_unstable();
    video_ids.dedup();
    let video_index: BTreeMap<&str, i64> =
        video_ids.iter().enumerate().map(|(i, &v)| (v, i as i64)).collect();

    let mut records = Vec::with_capacity(labels.len());
    for (pos, label) in labels.values().enumerate() {
        let mut map = BTreeMap::new();
        map.insert("activity".to_string(), label.activity as i64);
        map.insert("appearance".to_string(), label.appearance as i64);
        if let Some(v) = &label.video_id {
            map.insert("video-id".to_string(), video_index[v.as_str()]);
        }
        records.push(CodeRecord {
            id: pos as u64,
            code: codes.code(pos, layer).to_vec(),
            labels: map,
        });
    }
    Ok(records)
}

/// Builds a retrieval index over one layer of a code set.
pub fn build_index(codes: &CodeSet, labels: &LabelMap, layer: usize) -> Result<Index> {
    let mut index = Index::new(codes.k())?;
    for record in code_records(codes, labels, layer)? {
        index.insert(record)?;
    }
    Ok(index)
}
