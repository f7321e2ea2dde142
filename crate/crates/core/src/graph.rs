//! Relation graphs over box trajectories.
//!
//! A scene is N objects tracked over T frames, each as an axis-aligned box.
//! Two graphs summarize the motion: a temporal graph per object holding
//! inter-frame IoU for preceding frames only, and a spatial graph per frame
//! holding variance-normalized distances between objects. Both are plain
//! values; the learnable weighting of graph entries happens later, inside
//! the attention modules.

use crate::array::Array;
use crate::error::{Error, Result};

/// Axis-aligned box in scene units, corners (x1, y1) to (x2, y2).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Strictly positive area with finite coordinates.
    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn coord(&self, c: usize) -> f64 {
        match c {
            0 => self.x1,
            1 => self.y1,
            2 => self.x2,
            _ => self.y2,
        }
    }
}

/// Intersection-over-union of two boxes; 0 when disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    inter / union
}

/// N objects tracked across T frames inside a fixed scene.
#[derive(Clone, Debug)]
pub struct BoxTrajectorySet {
    n: usize,
    t: usize,
    scene_width: f64,
    scene_height: f64,
    /// Row-major [object][frame].
    boxes: Vec<BBox>,
}

impl BoxTrajectorySet {
    /// Validates counts, box validity, and scene containment.
    pub fn new(
        n: usize,
        t: usize,
        scene_width: f64,
        scene_height: f64,
        boxes: Vec<BBox>,
    ) -> Result<BoxTrajectorySet> {
        if n < 1 || t < 2 {
            return Err(Error::op(
                "trajectory",
                format!("need N >= 1 and T >= 2, got N={n}, T={t}"),
            ));
        }
        if boxes.len() != n * t {
            return Err(Error::op(
                "trajectory",
                format!("expected {} boxes for N={n}, T={t}, got {}", n * t, boxes.len()),
            ));
        }
        if !(scene_width > 0.0 && scene_height > 0.0) {
            return Err(Error::op("trajectory", "scene dimensions must be positive"));
        }
        for (i, b) in boxes.iter().enumerate() {
            if !b.is_valid() {
                return Err(Error::op(
                    "trajectory",
                    format!("box {} (object {}, frame {}) has no area: {:?}", i, i / t, i % t, b),
                ));
            }
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > scene_width || b.y2 > scene_height {
                return Err(Error::op(
                    "trajectory",
                    format!(
                        "box {} (object {}, frame {}) leaves the {}x{} scene: {:?}",
                        i,
                        i / t,
                        i % t,
                        scene_width,
                        scene_height,
                        b
                    ),
                ));
            }
        }
        Ok(BoxTrajectorySet { n, t, scene_width, scene_height, boxes })
    }

    pub fn objects(&self) -> usize {
        self.n
    }

    pub fn frames(&self) -> usize {
        self.t
    }

    pub fn scene_width(&self) -> f64 {
        self.scene_width
    }

    pub fn scene_height(&self) -> f64 {
        self.scene_height
    }

    pub fn get(&self, object: usize, frame: usize) -> &BBox {
        &self.boxes[object * self.t + frame]
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }
}

/// Both relation graphs for one trajectory set.
#[derive(Clone, Debug)]
pub struct RelationGraphs {
    /// N x T x T, nonzero only for t2 <= t1.
    pub g_t: Array,
    /// T x N x N, symmetric with unit diagonal.
    pub g_s: Array,
}

/// Per-object inter-frame IoU graph. Entry [j][t1][t2] is the IoU of object
/// j's boxes at t1 and t2 when t2 < t1, exactly 1 on the diagonal, and 0 for
/// the future-looking triangle.
pub fn build_temporal_graph(traj: &BoxTrajectorySet) -> Array {
    let (n, t) = (traj.objects(), traj.frames());
    let mut data = vec![0.0; n * t * t];
    for j in 0..n {
        for t1 in 0..t {
            let row = &mut data[(j * t + t1) * t..(j * t + t1 + 1) * t];
            row[t1] = 1.0;
            for t2 in 0..t1 {
                row[t2] = iou(traj.get(j, t1), traj.get(j, t2));
            }
        }
    }
    Array::from_vec(vec![n, t, t], data).expect("temporal graph shape")
}

/// Per-frame normalized-distance graph. For each frame the four box
/// coordinates are standardized by their population std over the N objects
/// (floored at 1e-8), and the entry is 1 minus the root-mean-square of the
/// standardized coordinate differences. Values can go negative for objects
/// far apart; nothing clamps them.
pub fn build_spatial_graph(traj: &BoxTrajectorySet) -> Result<Array> {
    let (n, t) = (traj.objects(), traj.frames());
    if n < 2 {
        return Err(Error::op("spatial_graph", "needs at least two objects"));
    }
    let mut data = vec![0.0; t * n * n];
    let mut std = [0.0f64; 4];
    for frame in 0..t {
        for (c, s) in std.iter_mut().enumerate() {
            let mean =
                (0..n).map(|j| traj.get(j, frame).coord(c)).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|j| {
                    let d = traj.get(j, frame).coord(c) - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            *s = var.sqrt().max(1e-8);
        }
        for i in 0..n {
            data[(frame * n + i) * n + i] = 1.0;
            for j in 0..i {
                let mut acc = 0.0;
                for (c, s) in std.iter().enumerate() {
                    let d = (traj.get(i, frame).coord(c) - traj.get(j, frame).coord(c)) / s;
                    acc += d * d;
                }
                let v = 1.0 - (acc / 4.0).sqrt();
                data[(frame * n + i) * n + j] = v;
                data[(frame * n + j) * n + i] = v;
            }
        }
    }
    Array::from_vec(vec![t, n, n], data).map_err(|e| e)
}

/// Builds both graphs.
pub fn build_graphs(traj: &BoxTrajectorySet) -> Result<RelationGraphs> {
    Ok(RelationGraphs { g_t: build_temporal_graph(traj), g_s: build_spatial_graph(traj)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn square(x: f64, y: f64, side: f64) -> BBox {
        BBox::new(x, y, x + side, y + side)
    }

    fn random_traj(rng: &mut StdRng, n: usize, t: usize) -> BoxTrajectorySet {
        let scene = 100.0;
        let boxes: Vec<BBox> = (0..n * t)
            .map(|_| {
                let w = rng.gen_range(2.0..12.0);
                let h = rng.gen_range(2.0..12.0);
                let x = rng.gen_range(0.0..scene - w);
                let y = rng.gen_range(0.0..scene - h);
                BBox::new(x, y, x + w, y + h)
            })
            .collect();
        BoxTrajectorySet::new(n, t, scene, scene, boxes).unwrap()
    }

    #[test]
    fn iou_identical_is_one() {
        let b = BBox::new(0.0, 0.0, 3.0, 2.0);
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        assert_eq!(iou(&BBox::new(0.0, 0.0, 1.0, 1.0), &BBox::new(2.0, 2.0, 3.0, 3.0)), 0.0);
    }

    #[test]
    fn iou_unit_overlap_case() {
        // Intersection 1, union 4 + 4 - 1 = 7.
        let v = iou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn iou_symmetric_bounded_and_tight() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..500 {
            let a = square(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), rng.gen_range(0.5..4.0));
            let b = square(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), rng.gen_range(0.5..4.0));
            let v = iou(&a, &b);
            assert!((0.0..=1.0).contains(&v));
            assert_eq!(v.to_bits(), iou(&b, &a).to_bits());
            if v == 1.0 {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn temporal_stationary_object() {
        let boxes = vec![square(5.0, 5.0, 4.0); 4];
        let traj = BoxTrajectorySet::new(1, 4, 50.0, 50.0, boxes).unwrap();
        let g = build_temporal_graph(&traj);
        for t1 in 0..4 {
            for t2 in 0..4 {
                let want = if t2 <= t1 { 1.0 } else { 0.0 };
                assert_eq!(g.at(&[0, t1, t2]), want, "({t1},{t2})");
            }
        }
    }

    #[test]
    fn temporal_teleporting_object() {
        // Far-apart positions every frame: all past IoUs are zero.
        let boxes = vec![square(0.0, 0.0, 2.0), square(20.0, 20.0, 2.0), square(40.0, 0.0, 2.0)];
        let traj = BoxTrajectorySet::new(1, 3, 50.0, 50.0, boxes).unwrap();
        let g = build_temporal_graph(&traj);
        for t1 in 0..3 {
            for t2 in 0..3 {
                let want = if t1 == t2 { 1.0 } else { 0.0 };
                assert_eq!(g.at(&[0, t1, t2]), want);
            }
        }
    }

    #[test]
    fn temporal_linear_motion_one_third() {
        // A 2x2 box sliding 1 unit per frame overlaps its previous frame in
        // a 1x2 strip: IoU = 2 / (4 + 4 - 2) = 1/3. Two frames apart it is
        // disjoint.
        let boxes: Vec<BBox> = (0..5).map(|t| square(t as f64, 0.0, 2.0)).collect();
        let traj = BoxTrajectorySet::new(1, 5, 50.0, 50.0, boxes).unwrap();
        let g = build_temporal_graph(&traj);
        for t1 in 1..5 {
            assert!((g.at(&[0, t1, t1 - 1]) - 1.0 / 3.0).abs() < 1e-15);
        }
        for t1 in 2..5 {
            assert_eq!(g.at(&[0, t1, t1 - 2]), 0.0);
        }
    }

    #[test]
    fn spatial_three_objects_match_direct_formula() {
        let b = [
            BBox::new(1.0, 2.0, 4.0, 6.0),
            BBox::new(10.0, 3.0, 13.0, 9.0),
            BBox::new(5.0, 20.0, 11.0, 24.0),
        ];
        let mut boxes = Vec::new();
        for obj in &b {
            boxes.push(*obj);
            boxes.push(*obj);
        }
        let traj = BoxTrajectorySet::new(3, 2, 40.0, 40.0, boxes).unwrap();
        let g = build_spatial_graph(&traj).unwrap();

        // Direct evaluation, written independently of the builder.
        let coords = |bb: &BBox| [bb.x1, bb.y1, bb.x2, bb.y2];
        let mut std = [0.0f64; 4];
        for c in 0..4 {
            let vals: Vec<f64> = b.iter().map(|bb| coords(bb)[c]).collect();
            let mean = vals.iter().sum::<f64>() / 3.0;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
            std[c] = var.sqrt().max(1e-8);
        }
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for c in 0..4 {
                    let d = (coords(&b[i])[c] - coords(&b[j])[c]) / std[c];
                    acc += d * d / 4.0;
                }
                let want = 1.0 - acc.sqrt();
                assert!((g.at(&[0, i, j]) - want).abs() < 1e-12, "({i},{j})");
                assert!((g.at(&[1, i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spatial_diagonal_and_symmetry() {
        let mut rng = StdRng::seed_from_u64(5);
        let traj = random_traj(&mut rng, 5, 4);
        let g = build_spatial_graph(&traj).unwrap();
        for t in 0..4 {
            for i in 0..5 {
                assert_eq!(g.at(&[t, i, i]), 1.0);
                for j in 0..5 {
                    assert_eq!(g.at(&[t, i, j]).to_bits(), g.at(&[t, j, i]).to_bits());
                    assert!(g.at(&[t, i, j]) <= 1.0);
                }
            }
        }
    }

    #[test]
    fn spatial_goes_negative_when_spread_out() {
        // One pair far beyond a standard deviation produces an entry < 0.
        let boxes = vec![
            square(0.0, 0.0, 2.0),
            square(0.0, 0.0, 2.0),
            square(1.0, 1.0, 2.0),
            square(1.0, 1.0, 2.0),
            square(90.0, 90.0, 2.0),
            square(90.0, 90.0, 2.0),
        ];
        let traj = BoxTrajectorySet::new(3, 2, 100.0, 100.0, boxes).unwrap();
        let g = build_spatial_graph(&traj).unwrap();
        let mut any_negative = false;
        for i in 0..3 {
            for j in 0..3 {
                if g.at(&[0, i, j]) < 0.0 {
                    any_negative = true;
                }
            }
        }
        assert!(any_negative);
    }

    #[test]
    fn degenerate_frame_uses_std_floor() {
        // All boxes identical in a frame: std floors at 1e-8 and the whole
        // frame slab becomes 1 instead of erroring.
        let boxes = vec![
            square(5.0, 5.0, 2.0),
            square(9.0, 5.0, 2.0),
            square(5.0, 5.0, 2.0),
            square(9.0, 9.0, 2.0),
        ];
        let traj = BoxTrajectorySet::new(2, 2, 50.0, 50.0, boxes).unwrap();
        let g = build_spatial_graph(&traj).unwrap();
        assert_eq!(g.at(&[0, 0, 1]), 1.0);
        assert!(g.at(&[1, 0, 1]) < 1.0);
    }

    #[test]
    fn graphs_are_scale_covariant() {
        let mut rng = StdRng::seed_from_u64(77);
        let traj = random_traj(&mut rng, 4, 5);
        let s = 3.7;
        let scaled = BoxTrajectorySet::new(
            4,
            5,
            traj.scene_width() * s,
            traj.scene_height() * s,
            traj.boxes()
                .iter()
                .map(|b| BBox::new(b.x1 * s, b.y1 * s, b.x2 * s, b.y2 * s))
                .collect(),
        )
        .unwrap();
        let a = build_graphs(&traj).unwrap();
        let b = build_graphs(&scaled).unwrap();
        assert!(crate::array::max_abs_diff(&a.g_t, &b.g_t) < 1e-12);
        assert!(crate::array::max_abs_diff(&a.g_s, &b.g_s) < 1e-12);
    }

    #[test]
    fn temporal_graph_depends_on_cross_frame_offsets() {
        // Translating every frame by the same offset preserves g_t; a
        // frame-varying offset moves the boxes relative to their own past
        // and must change it. The base drifts slowly so consecutive frames
        // actually overlap.
        let boxes: Vec<BBox> = (0..3)
            .flat_map(|j| (0..4).map(move |t| square(10.0 * j as f64 + t as f64, 20.0, 4.0)))
            .collect();
        let base = BoxTrajectorySet::new(3, 4, 100.0, 100.0, boxes).unwrap();
        let shift_all = |dx: f64, per_frame: bool| {
            let boxes: Vec<BBox> = base
                .boxes()
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let frame = i % 4;
                    let d = if per_frame { dx * frame as f64 } else { dx };
                    BBox::new(b.x1 + d, b.y1, b.x2 + d, b.y2)
                })
                .collect();
            BoxTrajectorySet::new(3, 4, 160.0, 100.0, boxes).unwrap()
        };
        let uniform = build_temporal_graph(&shift_all(7.0, false));
        let varying = build_temporal_graph(&shift_all(2.0, true));
        let original = build_temporal_graph(&base);
        assert!(crate::array::max_abs_diff(&original, &uniform) < 1e-12);
        assert!(crate::array::max_abs_diff(&original, &varying) > 1e-3);
    }

    #[test]
    fn trajectory_validation_errors() {
        assert!(BoxTrajectorySet::new(1, 1, 10.0, 10.0, vec![square(0.0, 0.0, 1.0)]).is_err());
        assert!(BoxTrajectorySet::new(
            1,
            2,
            10.0,
            10.0,
            vec![square(0.0, 0.0, 1.0), BBox::new(3.0, 3.0, 2.0, 4.0)]
        )
        .is_err());
        assert!(BoxTrajectorySet::new(
            1,
            2,
            10.0,
            10.0,
            vec![square(0.0, 0.0, 1.0), square(9.5, 0.0, 1.0)]
        )
        .is_err());
    }
}
