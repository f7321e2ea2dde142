//! Synthetic scene generation and object feature extraction.
//!
//! Real video frontends (detector, tracker, CNN backbone) are out of scope;
//! this module fabricates what they would produce. Each sample is a set of
//! box trajectories drawn from a motion template (the activity label), plus
//! per-frame feature maps whose content inside each box encodes the sample's
//! appearance palette and the object's action vector. A scene-wide frame
//! code (shared by the whole dataset, like slow illumination drift) marks
//! each frame the same way in every sample, so it carries no label
//! information on its own. Appearance is therefore readable from features
//! alone; activity needs the trajectories, whose attention over frames and
//! objects decides which feature content survives pooling.
//!
//! Feature extraction mirrors a detection pipeline: RoIAlign pools each box
//! to a fixed grid, and a learnable linear projection turns the pooled block
//! into a d-dimensional object feature.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::graph::{BBox, BoxTrajectorySet};
use crate::io;
use crate::tape::Var;

/// Knobs for the scene generator. `activities` selects how many of the
/// built-in motion templates are in play; appearance palettes and action
/// vectors are derived from `seed` so every sample of a dataset shares them.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GeneratorConfig {
    pub n: usize,
    pub t: usize,
    pub d_v: usize,
    pub map_width: usize,
    pub map_height: usize,
    pub scene_width: f64,
    pub scene_height: f64,
    pub activities: usize,
    pub appearances: usize,
    pub actions: usize,
    pub seed: u64,
}

pub const TEMPLATE_NAMES: [&str; 5] = ["converge", "disperse", "queue", "cross", "follow"];

const MARGIN: f64 = 16.0;
const CENTER_JITTER: f64 = 1.5;
const PALETTE_NORM: f64 = 3.0;
const ACTION_NORM: f64 = 1.5;
const OBJECT_JITTER: f64 = 0.8;
const CELL_NOISE: f64 = 0.3;
const FRAME_CODE_AMP: (f64, f64) = (1.2, 2.4);

impl GeneratorConfig {
    pub fn desk_default(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n: 4,
            t: 8,
            d_v: 32,
            map_width: 16,
            map_height: 16,
            scene_width: 128.0,
            scene_height: 128.0,
            activities: 4,
            appearances: 4,
            actions: 3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.activities < 2 || self.n < 2 || self.t < 2 {
            return Err(Error::Config(format!(
                "generator needs A >= 2, N >= 2, T >= 2 (got A={}, N={}, T={})",
                self.activities, self.n, self.t
            )));
        }
        if self.activities > TEMPLATE_NAMES.len() {
            return Err(Error::Config(format!(
                "only {} motion templates available, config asks for {}",
                TEMPLATE_NAMES.len(),
                self.activities
            )));
        }
        if self.appearances < 2 || self.actions < 1 {
            return Err(Error::Config("need P >= 2 appearance palettes and C_act >= 1".into()));
        }
        if self.d_v == 0 || self.map_width < 4 || self.map_height < 4 {
            return Err(Error::Config("feature map dims too small".into()));
        }
        if !(self.scene_width > 4.0 * MARGIN && self.scene_height > 4.0 * MARGIN) {
            return Err(Error::Config("scene too small for the motion templates".into()));
        }
        Ok(())
    }
}

/// One generated clip: trajectories, labels, and the fabricated per-frame
/// feature maps, shape [T, d_v, W', H'].
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub traj: BoxTrajectorySet,
    pub activity_label: usize,
    pub action_labels: Vec<usize>,
    pub appearance_label: usize,
    pub feature_maps: Array,
    pub rng_seed: u64,
}

/// Stable per-sample seed derivation (splitmix-style), so samples are
/// independent of generation order and worker count.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Class-conditioning vectors shared by every sample of a dataset: one
/// palette row per appearance label (norm 3.0) and one row per action label
/// (norm 1.5). Rows are centered before scaling so no class direction is
/// shared by the whole dataset. Keyed off the config seed, not the
/// per-sample seed.
pub fn class_vectors(config: &GeneratorConfig) -> (Array, Array) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xC1A5_5E5F_0000_0001);
    let d_v = config.d_v;
    let mut draw = |rows: usize, norm: f64| {
        let mut data: Vec<f64> = (0..rows * d_v).map(|_| normal(&mut rng)).collect();
        if rows >= 2 {
            for c in 0..d_v {
                let mean = (0..rows).map(|r| data[r * d_v + c]).sum::<f64>() / rows as f64;
                (0..rows).for_each(|r| data[r * d_v + c] -= mean);
            }
        }
        for r in 0..rows {
            let row = &mut data[r * d_v..(r + 1) * d_v];
            let len = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
            row.iter_mut().for_each(|x| *x *= norm / len);
        }
        Array::from_vec(vec![rows, d_v], data).expect("class vector shape")
    };
    (draw(config.appearances, PALETTE_NORM), draw(config.actions, ACTION_NORM))
}

/// Scene-wide additive offset per (frame, channel), one smooth cosine per
/// channel. Shared by every sample of a dataset (keyed off the config seed)
/// and independent of all labels, so features alone stay activity-blind;
/// only trajectory-driven attention over frames can turn it into signal.
/// Each channel is centered to zero mean over frames and rescaled to a fixed
/// RMS, so uniform frame pooling reads nothing and every unit of amplitude
/// goes to attention-visible contrast.
pub fn frame_codes(config: &GeneratorConfig) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xC1A5_5E5F_0000_0002);
    let t = config.t;
    let mut data = vec![0.0; t * config.d_v];
    for c in 0..config.d_v {
        let amp = rng.gen_range(FRAME_CODE_AMP.0..FRAME_CODE_AMP.1);
        let omega = TAU / t as f64 * rng.gen_range(0.5..2.0);
        let phase = rng.gen_range(0.0..TAU);
        let mut col: Vec<f64> =
            (0..t).map(|frame| (omega * frame as f64 + phase).cos()).collect();
        let mean = col.iter().sum::<f64>() / t as f64;
        col.iter_mut().for_each(|v| *v -= mean);
        let rms = (col.iter().map(|v| v * v).sum::<f64>() / t as f64).sqrt().max(1e-8);
        for (frame, v) in col.iter().enumerate() {
            data[frame * config.d_v + c] = amp * v / rms;
        }
    }
    Array::from_vec(vec![t, config.d_v], data).expect("frame code shape")
}

struct PathSpec {
    /// Ideal center per (object, frame), row-major, before jitter and clamp.
    centers: Vec<[f64; 2]>,
}

fn unit(theta: f64) -> [f64; 2] {
    [theta.cos(), theta.sin()]
}

fn template_paths(
    template: usize,
    n: usize,
    t: usize,
    cx: f64,
    cy: f64,
    rng: &mut ChaCha8Rng,
) -> PathSpec {
    let mut centers = vec![[0.0; 2]; n * t];
    let frac = |frame: usize| frame as f64 / (t - 1) as f64;
    match template {
        0 => {
            // converge: ring start, shared meeting point, decelerating.
            let meet = [cx + rng.gen_range(-10.0..10.0), cy + rng.gen_range(-10.0..10.0)];
            for j in 0..n {
                let ang = TAU * (j as f64 + rng.gen_range(-0.25..0.25)) / n as f64;
                let r = rng.gen_range(36.0..48.0);
                let start = [cx + r * ang.cos(), cy + r * ang.sin()];
                let off_ang = rng.gen_range(0.0..TAU);
                let off_r = rng.gen_range(4.0..8.0);
                let end = [meet[0] + off_r * off_ang.cos(), meet[1] + off_r * off_ang.sin()];
                for frame in 0..t {
                    let s = frac(frame);
                    let p = 1.0 - (1.0 - s).powf(1.5);
                    centers[j * t + frame] = [
                        start[0] + (end[0] - start[0]) * p,
                        start[1] + (end[1] - start[1]) * p,
                    ];
                }
            }
        }
        1 => {
            // disperse: tight cluster flying apart, accelerating.
            let hub = [cx + rng.gen_range(-8.0..8.0), cy + rng.gen_range(-8.0..8.0)];
            for j in 0..n {
                let off_ang = rng.gen_range(0.0..TAU);
                let off_r = rng.gen_range(3.0..7.0);
                let start = [hub[0] + off_r * off_ang.cos(), hub[1] + off_r * off_ang.sin()];
                let ang = TAU * (j as f64 + rng.gen_range(-0.25..0.25)) / n as f64;
                let r = rng.gen_range(36.0..48.0);
                let end = [cx + r * ang.cos(), cy + r * ang.sin()];
                for frame in 0..t {
                    let p = frac(frame).powf(1.5);
                    centers[j * t + frame] = [
                        start[0] + (end[0] - start[0]) * p,
                        start[1] + (end[1] - start[1]) * p,
                    ];
                }
            }
        }
        2 => {
            // queue: scattered starts settling onto an evenly spaced line.
            let theta = rng.gen_range(0.0..TAU);
            let u = unit(theta);
            let anchor = [cx + rng.gen_range(-12.0..12.0), cy + rng.gen_range(-12.0..12.0)];
            for j in 0..n {
                let slot = (j as f64 - (n - 1) as f64 / 2.0) * 18.0;
                let end = [anchor[0] + slot * u[0], anchor[1] + slot * u[1]];
                let start = [
                    rng.gen_range(1.5 * MARGIN..cx * 2.0 - 1.5 * MARGIN),
                    rng.gen_range(1.5 * MARGIN..cy * 2.0 - 1.5 * MARGIN),
                ];
                for frame in 0..t {
                    let s = frac(frame);
                    let p = s * s * (3.0 - 2.0 * s);
                    centers[j * t + frame] = [
                        start[0] + (end[0] - start[0]) * p,
                        start[1] + (end[1] - start[1]) * p,
                    ];
                }
            }
        }
        3 => {
            // cross: everyone traverses the scene through the middle.
            for j in 0..n {
                let ang = TAU * (j as f64 + rng.gen_range(-0.15..0.15)) / n as f64;
                let r = rng.gen_range(38.0..48.0);
                let start = [cx + r * ang.cos(), cy + r * ang.sin()];
                let end = [
                    cx - r * ang.cos() + rng.gen_range(-4.0..4.0),
                    cy - r * ang.sin() + rng.gen_range(-4.0..4.0),
                ];
                for frame in 0..t {
                    let p = frac(frame);
                    centers[j * t + frame] = [
                        start[0] + (end[0] - start[0]) * p,
                        start[1] + (end[1] - start[1]) * p,
                    ];
                }
            }
        }
        _ => {
            // follow: a leader walks a straight path, the rest trail it at
            // fixed arc gaps with a small lateral offset.
            let theta = rng.gen_range(0.0..TAU);
            let u = unit(theta);
            let perp = [-u[1], u[0]];
            let length = 50.0;
            let gap = 9.0;
            let shift = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
            let arc_mid = (length - gap * (n - 1) as f64) / 2.0;
            for j in 0..n {
                let lat = if j == 0 { 0.0 } else { normal(rng) * 2.0 };
                for frame in 0..t {
                    let arc = frac(frame) * length - gap * j as f64;
                    centers[j * t + frame] = [
                        cx + shift[0] + (arc - arc_mid) * u[0] + lat * perp[0],
                        cy + shift[1] + (arc - arc_mid) * u[1] + lat * perp[1],
                    ];
                }
            }
        }
    }
    PathSpec { centers }
}

fn scene_with_template(
    config: &GeneratorConfig,
    seed: u64,
    force_template: Option<usize>,
) -> Result<SceneSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, t, d_v) = (config.n, config.t, config.d_v);
    let (w, h) = (config.map_width, config.map_height);

    let activity_label = match force_template {
        Some(a) => a,
        None => rng.gen_range(0..config.activities),
    };
    let appearance_label = rng.gen_range(0..config.appearances);
    let action_labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..config.actions)).collect();
    let sizes: Vec<[f64; 2]> =
        (0..n).map(|_| [rng.gen_range(9.0..15.0), rng.gen_range(9.0..15.0)]).collect();

    let paths = template_paths(
        activity_label,
        n,
        t,
        config.scene_width / 2.0,
        config.scene_height / 2.0,
        &mut rng,
    );
    let mut boxes = Vec::with_capacity(n * t);
    for j in 0..n {
        for frame in 0..t {
            let ideal = paths.centers[j * t + frame];
            let cx = (ideal[0] + normal(&mut rng) * CENTER_JITTER)
                .clamp(MARGIN, config.scene_width - MARGIN);
            let cy = (ideal[1] + normal(&mut rng) * CENTER_JITTER)
                .clamp(MARGIN, config.scene_height - MARGIN);
            boxes.push(BBox::new(
                cx - sizes[j][0] / 2.0,
                cy - sizes[j][1] / 2.0,
                cx + sizes[j][0] / 2.0,
                cy + sizes[j][1] / 2.0,
            ));
        }
    }
    let traj =
        BoxTrajectorySet::new(n, t, config.scene_width, config.scene_height, boxes)?;

    // Background: a few slowly drifting low-frequency waves per channel.
    struct Mode {
        amp: f64,
        kx: f64,
        ky: f64,
        phase: f64,
        drift: f64,
    }
    let modes: Vec<Vec<Mode>> = (0..d_v)
        .map(|_| {
            let count = rng.gen_range(2..=3);
            (0..count)
                .map(|_| Mode {
                    amp: rng.gen_range(0.5..1.1),
                    kx: TAU / w as f64 * rng.gen_range(0.5..2.0),
                    ky: TAU / h as f64 * rng.gen_range(0.5..2.0),
                    phase: rng.gen_range(0.0..TAU),
                    drift: rng.gen_range(-0.3..0.3),
                })
                .collect()
        })
        .collect();

    // Per (frame, object, channel) offset, constant across the box. This is
    // what gives objects distinguishable features for attention to weigh.
    let jitter: Vec<f64> =
        (0..t * n * d_v).map(|_| normal(&mut rng) * OBJECT_JITTER).collect();

    let (palette, action_vecs) = class_vectors(config);
    let frame_code = frame_codes(config);
    let sx = w as f64 / config.scene_width;
    let sy = h as f64 / config.scene_height;
    let chw = d_v * w * h;
    let mut maps = vec![0.0; t * chw];
    let mut owner = vec![usize::MAX; w * h];
    for frame in 0..t {
        // Later objects claim contested cells; contributions never stack, so
        // crowded frames keep the same per-cell magnitude as sparse ones.
        owner.iter_mut().for_each(|o| *o = usize::MAX);
        for j in 0..n {
            let b = traj.get(j, frame);
            let (mx1, my1, mx2, my2) = (b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy);
            let ix0 = mx1.floor().max(0.0) as usize;
            let iy0 = my1.floor().max(0.0) as usize;
            for ix in ix0..(mx2.ceil() as usize).min(w) {
                for iy in iy0..(my2.ceil() as usize).min(h) {
                    let (x, y) = (ix as f64 + 0.5, iy as f64 + 0.5);
                    if x > mx1 && x < mx2 && y > my1 && y < my2 {
                        owner[ix * h + iy] = j;
                    }
                }
            }
        }
        for c in 0..d_v {
            let base = frame * chw + c * w * h;
            let code = frame_code.at(&[frame, c]);
            for ix in 0..w {
                let x = ix as f64 + 0.5;
                for iy in 0..h {
                    let y = iy as f64 + 0.5;
                    let mut v: f64 = code
                        + modes[c]
                            .iter()
                            .map(|m| {
                                m.amp
                                    * (m.kx * x + m.ky * y + m.phase + m.drift * frame as f64)
                                        .cos()
                            })
                            .sum::<f64>();
                    let o = owner[ix * h + iy];
                    if o != usize::MAX {
                        v += palette.at(&[appearance_label, c])
                            + action_vecs.at(&[action_labels[o], c])
                            + jitter[(frame * n + o) * d_v + c];
                    }
                    v += normal(&mut rng) * CELL_NOISE;
                    maps[base + ix * h + iy] = v;
                }
            }
        }
    }

    Ok(SceneSample {
        traj,
        activity_label,
        action_labels,
        appearance_label,
        feature_maps: Array::from_vec(vec![t, d_v, w, h], maps)?,
        rng_seed: seed,
    })
}

pub fn generate_scene(config: &GeneratorConfig, seed: u64) -> Result<SceneSample> {
    scene_with_template(config, seed, None)
}

fn bilinear(map: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let fx = x.clamp(0.5, w as f64 - 0.5) - 0.5;
    let fy = y.clamp(0.5, h as f64 - 0.5) - 0.5;
    let x0 = (fx.floor() as usize).min(w - 1);
    let y0 = (fy.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = fx - x0 as f64;
    let ay = fy - y0 as f64;
    let v00 = map[x0 * h + y0];
    let v10 = map[x1 * h + y0];
    let v01 = map[x0 * h + y1];
    let v11 = map[x1 * h + y1];
    (1.0 - ax) * ((1.0 - ay) * v00 + ay * v01) + ax * ((1.0 - ay) * v10 + ay * v11)
}

/// Pools one box region of a [C, W, H] map to [C, out.0, out.1]. The box is
/// in map coordinates (callers apply the scene-to-map scale first). Each
/// output cell averages a 2x2 sub-grid of exact bilinear samples; nothing is
/// snapped to the pixel grid.
pub fn roi_align(map: &Array, bbox: &BBox, out: (usize, usize)) -> Result<Array> {
    if map.rank() != 3 {
        return Err(Error::op("roi_align", format!("map must be [C, W, H], got {:?}", map.shape())));
    }
    let (c_dim, w, h) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let (ow, oh) = out;
    let bin_w = bbox.width() / ow as f64;
    let bin_h = bbox.height() / oh as f64;
    let data = map.data();
    let mut result = vec![0.0; c_dim * ow * oh];
    for c in 0..c_dim {
        let plane = &data[c * w * h..(c + 1) * w * h];
        for bx in 0..ow {
            for by in 0..oh {
                let mut acc = 0.0;
                for sx in 0..2 {
                    for sy in 0..2 {
                        let x = bbox.x1 + (bx as f64 + 0.25 + 0.5 * sx as f64) * bin_w;
                        let y = bbox.y1 + (by as f64 + 0.25 + 0.5 * sy as f64) * bin_h;
                        acc += bilinear(plane, w, h, x, y);
                    }
                }
                result[(c * ow + bx) * oh + by] = acc / 4.0;
            }
        }
    }
    Array::from_vec(vec![c_dim, ow, oh], result)
}

/// RoI-pools every object at every frame: feature maps [T, d_v, W', H'] plus
/// trajectories give a [N, T, d_v, 5, 5] block.
pub fn extract_roi_features(
    maps: &Array,
    traj: &BoxTrajectorySet,
    map_width: usize,
    map_height: usize,
) -> Result<Array> {
    if maps.rank() != 4 || maps.shape()[0] != traj.frames() {
        return Err(Error::op(
            "extract_roi_features",
            format!("maps {:?} do not cover {} frames", maps.shape(), traj.frames()),
        ));
    }
    let (n, t, d_v) = (traj.objects(), traj.frames(), maps.shape()[1]);
    let (w, h) = (maps.shape()[2], maps.shape()[3]);
    if (w, h) != (map_width, map_height) {
        return Err(Error::op("extract_roi_features", "map dims disagree with manifest"));
    }
    let sx = map_width as f64 / traj.scene_width();
    let sy = map_height as f64 / traj.scene_height();
    let chw = d_v * w * h;
    let mut out = Vec::with_capacity(n * t * d_v * 25);
    for j in 0..n {
        for frame in 0..t {
            let plane =
                Array::from_vec(vec![d_v, w, h], maps.data()[frame * chw..(frame + 1) * chw].to_vec())?;
            let b = traj.get(j, frame);
            let scaled = BBox::new(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy);
            let pooled = roi_align(&plane, &scaled, (5, 5))?;
            out.extend_from_slice(pooled.data());
        }
    }
    Array::from_vec(vec![n, t, d_v, 5, 5], out)
}

/// Flattens pooled blocks and applies the learnable projection: [N, T,
/// d_v*5*5] times weight [d_v*25, d] plus bias [d]. Gradients flow into the
/// projection parameters; the pooled input is treated as data.
pub fn vectorize(roi: &Var, weight: &Var, bias: &Var) -> Result<Var> {
    let shape = roi.shape();
    if shape.len() != 5 {
        return Err(Error::op("vectorize", format!("expected [N,T,C,5,5] input, got {shape:?}")));
    }
    let flat_dim = shape[2] * shape[3] * shape[4];
    if weight.shape()[0] != flat_dim {
        return Err(Error::ShapeMismatch {
            op: "vectorize",
            lhs: vec![shape[0], shape[1], flat_dim],
            rhs: weight.shape(),
        });
    }
    roi.reshape(&[shape[0], shape[1], flat_dim])?.affine(weight, bias)
}

/// Generates `count` samples and writes the dataset directory: manifest,
/// labels sidecar, and per-sample `.traj`/`.fmap` blobs. `threads` > 1
/// splits generation across workers; per-sample seeds keep the output
/// byte-identical regardless of the split.
pub fn write_dataset(
    dir: &Path,
    config: &GeneratorConfig,
    count: usize,
    threads: usize,
) -> Result<()> {
    config.validate()?;
    if count == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    std::fs::create_dir_all(dir)?;
    let threads = threads.clamp(1, count);
    let mut labels = vec![None; count];
    let results: Vec<Result<Vec<(usize, io::SampleLabels)>>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for worker in 0..threads {
            handles.push(scope.spawn(move || {
                let mut done = Vec::new();
                let mut index = worker;
                while index < count {
                    let seed = sample_seed(config.seed, index as u64);
                    let sample = generate_scene(config, seed)?;
                    let id = io::sample_id(index);
                    io::write_trajectories(&dir.join(format!("{id}.traj")), &sample.traj)?;
                    io::write_array(&dir.join(format!("{id}.fmap")), &sample.feature_maps)?;
                    done.push((
                        index,
                        io::SampleLabels {
                            activity: sample.activity_label,
                            appearance: sample.appearance_label,
                            actions: sample.action_labels.clone(),
                            video_id: None,
                        },
                    ));
                    index += threads;
                }
                Ok(done)
            }));
        }
        handles.into_iter().map(|j| j.join().expect("generator worker panicked")).collect()
    });
    for chunk in results {
        for (index, l) in chunk? {
            labels[index] = Some(l);
        }
    }
    let label_map: io::LabelMap =
        labels.into_iter().enumerate().map(|(i, l)| (io::sample_id(i), l.unwrap())).collect();
    io::write_labels(&dir.join("labels.json"), &label_map)?;
    io::write_manifest(
        &dir.join("manifest.json"),
        &io::DatasetManifest {
            samples: count,
            n: config.n,
            t: config.t,
            d_v: config.d_v,
            map_width: config.map_width,
            map_height: config.map_height,
            scene_width: config.scene_width,
            scene_height: config.scene_height,
            activities: config.activities,
            appearances: config.appearances,
            actions: config.actions,
            precomputed: false,
            generator: serde_json::to_value(config)?,
        },
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{uniform_fan_in, Params};
    use crate::tape::Tape;
    use rand::rngs::StdRng;

    fn small_config(seed: u64) -> GeneratorConfig {
        GeneratorConfig { d_v: 8, ..GeneratorConfig::desk_default(seed) }
    }

    fn mean_pairwise_center_distance(traj: &BoxTrajectorySet, frame: usize) -> f64 {
        let n = traj.objects();
        let center = |j: usize| {
            let b = traj.get(j, frame);
            ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0)
        };
        let mut acc = 0.0;
        let mut pairs = 0;
        for i in 0..n {
            for j in 0..i {
                let (xi, yi) = center(i);
                let (xj, yj) = center(j);
                acc += ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt();
                pairs += 1;
            }
        }
        acc / pairs as f64
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let config = small_config(9);
        let a = generate_scene(&config, 1234).unwrap();
        let b = generate_scene(&config, 1234).unwrap();
        assert_eq!(a.activity_label, b.activity_label);
        assert_eq!(a.appearance_label, b.appearance_label);
        assert_eq!(a.action_labels, b.action_labels);
        assert_eq!(a.traj.boxes(), b.traj.boxes());
        let (da, db) = (a.feature_maps.data(), b.feature_maps.data());
        assert!(da.iter().zip(db).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = generate_scene(&config, 1235).unwrap();
        assert!(a.feature_maps != c.feature_maps);
    }

    #[test]
    fn labels_stay_in_range() {
        let config = small_config(3);
        for seed in 0..60 {
            let s = generate_scene(&config, sample_seed(7, seed)).unwrap();
            assert!(s.activity_label < config.activities);
            assert!(s.appearance_label < config.appearances);
            assert_eq!(s.action_labels.len(), config.n);
            assert!(s.action_labels.iter().all(|&a| a < config.actions));
            assert!(s.feature_maps.all_finite());
        }
    }

    #[test]
    fn converge_contracts_and_disperse_expands() {
        let config = small_config(5);
        for seed in 0..20 {
            let conv = scene_with_template(&config, 100 + seed, Some(0)).unwrap();
            let d0 = mean_pairwise_center_distance(&conv.traj, 0);
            let d1 = mean_pairwise_center_distance(&conv.traj, config.t - 1);
            assert!(d1 < d0, "seed {seed}: {d0} -> {d1}");
            let disp = scene_with_template(&config, 100 + seed, Some(1)).unwrap();
            let e0 = mean_pairwise_center_distance(&disp.traj, 0);
            let e1 = mean_pairwise_center_distance(&disp.traj, config.t - 1);
            assert!(e1 > e0, "seed {seed}: {e0} -> {e1}");
        }
    }

    #[test]
    fn queue_settles_onto_a_line() {
        let config = small_config(6);
        for seed in 0..20 {
            let s = scene_with_template(&config, 500 + seed, Some(2)).unwrap();
            let last = config.t - 1;
            let pts: Vec<(f64, f64)> = (0..config.n)
                .map(|j| {
                    let b = s.traj.get(j, last);
                    ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0)
                })
                .collect();
            // Root-mean-square perpendicular distance to the best-fit line,
            // from the smaller eigenvalue of the 2x2 scatter matrix.
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
            for p in &pts {
                sxx += (p.0 - mx) * (p.0 - mx);
                sxy += (p.0 - mx) * (p.1 - my);
                syy += (p.1 - my) * (p.1 - my);
            }
            let tr = sxx + syy;
            let det = sxx * syy - sxy * sxy;
            let lam_min = (tr - (tr * tr - 4.0 * det).max(0.0).sqrt()) / 2.0;
            let residual = (lam_min / n).max(0.0).sqrt();
            assert!(residual < 4.0, "seed {seed}: residual {residual}");
        }
    }

    #[test]
    fn follow_keeps_formation() {
        let config = small_config(8);
        for seed in 0..10 {
            let s = scene_with_template(&config, 900 + seed, Some(4)).unwrap();
            let d0 = mean_pairwise_center_distance(&s.traj, 0);
            for frame in 1..config.t {
                let d = mean_pairwise_center_distance(&s.traj, frame);
                assert!((d - d0).abs() < 0.4 * d0, "seed {seed} frame {frame}: {d0} vs {d}");
            }
        }
    }

    #[test]
    fn cross_passes_through_the_middle() {
        let config = small_config(4);
        let s = scene_with_template(&config, 42, Some(3)).unwrap();
        let mid = config.t / 2;
        let d_mid = mean_pairwise_center_distance(&s.traj, mid);
        let d_start = mean_pairwise_center_distance(&s.traj, 0);
        assert!(d_mid < 0.5 * d_start);
    }

    #[test]
    fn config_validation() {
        let good = small_config(1);
        assert!(good.validate().is_ok());
        assert!(GeneratorConfig { activities: 1, ..good.clone() }.validate().is_err());
        assert!(GeneratorConfig { n: 1, ..good.clone() }.validate().is_err());
        assert!(GeneratorConfig { t: 1, ..good.clone() }.validate().is_err());
        assert!(GeneratorConfig { activities: 9, ..good.clone() }.validate().is_err());
        assert!(GeneratorConfig { appearances: 1, ..good }.validate().is_err());
    }

    #[test]
    fn roi_constant_map() {
        let map = Array::full(&[3, 8, 8], 2.5);
        let out = roi_align(&map, &BBox::new(1.2, 2.3, 6.7, 7.1), (5, 5)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn roi_grid_aligned_box_reproduces_block_means() {
        // Box spanning 10x10 whole cells: each of the 5x5 output bins covers
        // a 2x2 cell block, and the four samples per bin land exactly on the
        // centers of those cells, so the output is the plain block mean.
        let (w, h) = (16, 16);
        let map = Array::from_fn(&[1, w, h], |i| i as f64);
        let out = roi_align(&map, &BBox::new(2.0, 3.0, 12.0, 13.0), (5, 5)).unwrap();
        for bx in 0..5 {
            for by in 0..5 {
                let (x0, y0) = (2 + 2 * bx, 3 + 2 * by);
                let want = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(dx, dy)| ((x0 + dx) * h + y0 + dy) as f64)
                    .sum::<f64>()
                    / 4.0;
                let got = out.at(&[0, bx, by]);
                assert!((got - want).abs() < 1e-12, "bin ({bx},{by}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn roi_linear_ramp_is_exact() {
        // Cell value = x-coordinate of its center; bilinear interpolation of
        // a linear field is the field itself, so each bin returns its own
        // center x.
        let (w, h) = (12, 10);
        let map = Array::from_fn(&[2, w, h], |i| ((i / h) % w) as f64 + 0.5);
        let bbox = BBox::new(1.7, 2.1, 9.9, 8.3);
        let out = roi_align(&map, &bbox, (5, 5)).unwrap();
        let bin_w = bbox.width() / 5.0;
        for c in 0..2 {
            for bx in 0..5 {
                let want = bbox.x1 + (bx as f64 + 0.5) * bin_w;
                for by in 0..5 {
                    assert!((out.at(&[c, bx, by]) - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn roi_is_linear_in_the_map() {
        let mut rng = StdRng::seed_from_u64(21);
        use rand::Rng as _;
        for _ in 0..20 {
            let mk = |rng: &mut StdRng| {
                Array::from_fn(&[2, 9, 9], |_| rng.gen_range(-2.0..2.0))
            };
            let (a, b) = (mk(&mut rng), mk(&mut rng));
            let x1 = rng.gen_range(0.3..3.0);
            let y1 = rng.gen_range(0.3..3.0);
            let bbox = BBox::new(x1, y1, x1 + rng.gen_range(1.0..5.0), y1 + rng.gen_range(1.0..5.0));
            let (alpha, beta) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let mixed =
                crate::array::add(&a.map(|v| v * alpha), &b.map(|v| v * beta)).unwrap();
            let lhs = roi_align(&mixed, &bbox, (5, 5)).unwrap();
            let ra = roi_align(&a, &bbox, (5, 5)).unwrap();
            let rb = roi_align(&b, &bbox, (5, 5)).unwrap();
            let rhs =
                crate::array::add(&ra.map(|v| v * alpha), &rb.map(|v| v * beta)).unwrap();
            assert!(crate::array::max_abs_diff(&lhs, &rhs) < 1e-10);
        }
    }

    #[test]
    fn vectorize_matches_flatten_matmul_oracle() {
        let mut rng = StdRng::seed_from_u64(33);
        use rand::Rng as _;
        let (n, t, c, d) = (2, 3, 4, 6);
        let roi = Array::from_fn(&[n, t, c, 5, 5], |_| rng.gen_range(-1.0..1.0));
        let w = Array::from_fn(&[c * 25, d], |_| rng.gen_range(-0.5..0.5));
        let b = Array::from_fn(&[d], |_| rng.gen_range(-0.5..0.5));

        let tape = Tape::new();
        let rv = tape.constant(roi.clone());
        let wv = tape.var(w.clone());
        let bv = tape.var(b.clone());
        let out = vectorize(&rv, &wv, &bv).unwrap();
        assert_eq!(out.shape(), vec![n, t, d]);

        let flat = roi.reshape(&[n * t, c * 25]).unwrap();
        let want = crate::array::add(&crate::array::matmul(&flat, &w).unwrap(), &b).unwrap();
        assert!(
            crate::array::max_abs_diff(&out.value().reshape(&[n * t, d]).unwrap(), &want) < 1e-12
        );

        // Zero input: bias everywhere. Identity projection: passthrough.
        let zv = tape.constant(Array::zeros(&[n, t, c, 5, 5]));
        let zout = vectorize(&zv, &wv, &bv).unwrap().value();
        for i in 0..n * t {
            assert_eq!(&zout.data()[i * d..(i + 1) * d], b.data());
        }
        let idv = tape.var(Array::eye(c * 25));
        let zb = tape.var(Array::zeros(&[c * 25]));
        let pass = vectorize(&rv, &idv, &zb).unwrap();
        assert!(crate::array::max_abs_diff(&pass.value(), &roi.reshape(&[n, t, c * 25]).unwrap()) < 1e-15);
    }

    #[test]
    fn dataset_roundtrip_is_thread_count_invariant() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let config = GeneratorConfig { d_v: 4, t: 4, ..small_config(77) };
        write_dataset(dir1.path(), &config, 6, 1).unwrap();
        write_dataset(dir2.path(), &config, 6, 3).unwrap();
        for i in 0..6 {
            let id = io::sample_id(i);
            for ext in ["traj", "fmap"] {
                let a = std::fs::read(dir1.path().join(format!("{id}.{ext}"))).unwrap();
                let b = std::fs::read(dir2.path().join(format!("{id}.{ext}"))).unwrap();
                assert_eq!(a, b, "{id}.{ext}");
            }
        }
        let manifest = io::read_manifest(&dir1.path().join("manifest.json")).unwrap();
        assert_eq!(manifest.samples, 6);
        assert!(!manifest.precomputed);
        let labels = io::read_labels(&dir1.path().join("labels.json")).unwrap();
        assert_eq!(labels.len(), 6);
        // Files regenerate bitwise from the recorded config.
        let again = generate_scene(&config, sample_seed(config.seed, 2)).unwrap();
        let stored = io::read_array(&dir1.path().join("000002.fmap")).unwrap();
        assert_eq!(stored, again.feature_maps);
    }

    /// Trains a multinomial logistic probe with plain gradient descent and
    /// returns held-out accuracy.
    fn probe_accuracy(
        features: &[Vec<f64>],
        labels: &[usize],
        classes: usize,
        train: usize,
    ) -> f64 {
        let dim = features[0].len();
        // Standardize on training statistics.
        let mut mean = vec![0.0; dim];
        let mut var = vec![0.0; dim];
        for f in &features[..train] {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= train as f64);
        for f in &features[..train] {
            for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s = (*s / train as f64).sqrt().max(1e-8));
        let standardized = |rows: &[Vec<f64>]| {
            Array::from_vec(
                vec![rows.len(), dim],
                rows.iter()
                    .flat_map(|f| f.iter().zip(&mean).zip(&var).map(|((v, m), s)| (v - m) / s))
                    .collect(),
            )
            .unwrap()
        };
        let x_train = standardized(&features[..train]);
        let x_test = standardized(&features[train..]);
        let mut mask = Array::zeros(&[train, classes]);
        for (i, &l) in labels[..train].iter().enumerate() {
            mask.data_mut()[i * classes + l] = 1.0;
        }

        let mut rng = StdRng::seed_from_u64(4242);
        let mut params = Params::new();
        let w_id = params.push("probe.w", uniform_fan_in(&mut rng, &[dim, classes], dim));
        let b_id = params.push("probe.b", Array::zeros(&[classes]));
        for _ in 0..400 {
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let x = tape.constant(x_train.clone());
            let logits = x.affine(bound.var(w_id), bound.var(b_id)).unwrap();
            let logp = logits.softmax(1).unwrap().log();
            let picked = logp.mul(&tape.constant(mask.clone())).unwrap();
            let loss = picked.sum_all().mul_scalar(-1.0 / train as f64);
            let grads = loss.backward().unwrap();
            params.absorb_grads(&bound, &grads);
            for p in params.iter_mut() {
                let g = p.grad.take().unwrap();
                let stepped: Vec<f64> =
                    p.value.data().iter().zip(g.data()).map(|(v, g)| v - 0.5 * g).collect();
                p.value = Array::from_vec(p.value.shape().to_vec(), stepped).unwrap();
            }
        }
        let w = &params.get(w_id).value;
        let b = &params.get(b_id).value;
        let logits =
            crate::array::add(&crate::array::matmul(&x_test, w).unwrap(), b).unwrap();
        let mut correct = 0;
        for (i, &want) in labels[train..].iter().enumerate() {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if argmax == want {
                correct += 1;
            }
        }
        correct as f64 / (features.len() - train) as f64
    }

    #[test]
    fn probes_recover_appearance_but_not_activity() {
        // Sanity bars for the generator itself: mean-pooled RoI features
        // must carry the appearance palette nearly perfectly and the motion
        // class at best weakly.
        let config = GeneratorConfig::desk_default(2024);
        let total = 240;
        let train = 192;
        let mut features = Vec::with_capacity(total);
        let mut appearance = Vec::with_capacity(total);
        let mut activity = Vec::with_capacity(total);
        for i in 0..total {
            let s = generate_scene(&config, sample_seed(config.seed, i as u64)).unwrap();
            let roi = extract_roi_features(
                &s.feature_maps,
                &s.traj,
                config.map_width,
                config.map_height,
            )
            .unwrap();
            // Mean over objects, frames, and the 5x5 grid, per channel.
            let mut pooled = vec![0.0; config.d_v];
            let data = roi.data();
            let cells = roi.len() / config.d_v;
            for (idx, v) in data.iter().enumerate() {
                pooled[(idx / 25) % config.d_v] += v / cells as f64;
            }
            features.push(pooled);
            appearance.push(s.appearance_label);
            activity.push(s.activity_label);
        }
        let acc_app = probe_accuracy(&features, &appearance, config.appearances, train);
        assert!(acc_app >= 0.95, "appearance probe accuracy {acc_app}");
        let acc_act = probe_accuracy(&features, &activity, config.activities, train);
        let bar = 1.0 / config.activities as f64 + 0.25;
        assert!(acc_act < bar, "activity probe accuracy {acc_act} (bar {bar})");
    }
}
