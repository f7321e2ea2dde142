//! Acceptance suite: nine checkable criteria covering gradient integrity,
//! graph and retrieval oracles, the two desk-scale training experiments,
//! filter fidelity, the quantization bound, Hamming structure, and
//! pipeline determinism. Each test prints one `criterion N PASS/FAIL`
//! line (visible with `--nocapture`). The two training fixtures are
//! shared: criteria 4 and 8 reuse one trained interleaved model, criteria
//! 5 and 6 one trained multi-focus model.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use gah_core::array::Array;
use gah_core::filter::{compression_ratio, fit_filter_with_report};
use gah_core::gradcheck::grad_check;
use gah_core::graph::{build_graphs, build_spatial_graph, build_temporal_graph, BBox, BoxTrajectorySet};
use gah_core::io::{self, CodeSet, LabelMap};
use gah_core::losses::{quantization_loss, LossWeights, RelationGcn};
use gah_core::mstvh::Mstvh;
use gah_core::retrieval::{map_at_k, mean_hamming_by_class, query_topk, CodeRecord, Index};
use gah_core::stvh::Stvh;
use gah_core::train::{
    self, build_index, code_records, encode_dataset, mstvh_batch_loss, predict_activity,
    stvh_batch_loss, synth_dataset, Dataset, DimsConfig, GeneratorOptions, Model, RunConfig,
    TrainSample,
};
use gah_core::Tape;

fn report(criterion: usize, pass: bool, detail: &str) {
    println!("criterion {criterion} {}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion}: {detail}");
}

// ---- shared trained fixtures ----

const DESK_SEED: u64 = 42;
const TEST_SET_SEED: u64 = 4242;
const TEST_SET_SIZE: usize = 128;

struct TrainedFixture {
    test_ds: Dataset,
    model: Model,
    train_secs: f64,
    train_codes: CodeSet,
    train_labels: LabelMap,
    test_codes: CodeSet,
    test_labels: LabelMap,
}

fn build_fixture(kind: &str) -> TrainedFixture {
    let config = RunConfig::desk_default(kind, DESK_SEED);
    let dir = tempfile::tempdir().expect("tempdir").keep();
    let started = Instant::now();
    let outcome = train::train(&config, &dir).expect("training run");
    let train_secs = started.elapsed().as_secs_f64();
    let model = Model::load(&outcome.final_checkpoint).expect("final checkpoint");

    let opts = config.generator.expect("desk config generates");
    let train_ds = synth_dataset(&config.dims, &opts, DESK_SEED).expect("train set");
    let test_opts = GeneratorOptions { samples: TEST_SET_SIZE, ..opts };
    let test_ds = synth_dataset(&config.dims, &test_opts, TEST_SET_SEED).expect("test set");

    let threads = train::worker_threads();
    let (train_codes, train_labels) =
        encode_dataset(&model, &train_ds, threads).expect("train codes");
    let (test_codes, test_labels) = encode_dataset(&model, &test_ds, threads).expect("test codes");
    drop(train_ds);
    TrainedFixture {
        test_ds,
        model,
        train_secs,
        train_codes,
        train_labels,
        test_codes,
        test_labels,
    }
}

fn stvh_fixture() -> &'static TrainedFixture {
    static RUN: OnceLock<TrainedFixture> = OnceLock::new();
    RUN.get_or_init(|| build_fixture("stvh"))
}

fn mstvh_fixture() -> &'static TrainedFixture {
    static RUN: OnceLock<TrainedFixture> = OnceLock::new();
    RUN.get_or_init(|| build_fixture("mstvh"))
}

/// mAP@10, test codes as queries against the training codes, on one layer.
fn layer_map(fx: &TrainedFixture, layer: usize, label_space: &str) -> f64 {
    map_on(&fx.test_codes, &fx.test_labels, &fx.train_codes, &fx.train_labels, layer, label_space)
}

fn map_on(
    query_codes: &CodeSet,
    query_labels: &LabelMap,
    db_codes: &CodeSet,
    db_labels: &LabelMap,
    layer: usize,
    label_space: &str,
) -> f64 {
    let index = build_index(db_codes, db_labels, layer).expect("index");
    let queries = code_records(query_codes, query_labels, layer).expect("query records");
    map_at_k(&queries, &index, label_space, 10, false).expect("map").value
}

// ---- criterion 1: gradient integrity ----

#[test]
fn criterion_1_gradient_integrity() {
    let started = Instant::now();
    let dims = DimsConfig {
        n: 3,
        t: 4,
        d_v: 4,
        d: 8,
        k: 8,
        upsilon: 2,
        activities: 2,
        actions: 2,
        appearances: 2,
    };
    let opts = GeneratorOptions {
        samples: 2,
        map_width: 8,
        map_height: 8,
        scene_width: 128.0,
        scene_height: 128.0,
    };
    let ds = synth_dataset(&dims, &opts, 77).expect("tiny dataset");
    let batch: Vec<&TrainSample> = ds.samples.iter().collect();
    let weights = LossWeights::defaults(dims.upsilon);
    let gcn = RelationGcn::new(dims.actions, dims.k, 6);
    let mut worst: f64 = 0.0;
    let mut entries = 0usize;

    {
        let model = Stvh::new(dims.model_dims(), 5).expect("stvh");
        let mut probe = model.params.clone();
        let rep = grad_check(&mut probe, 1e-5, |tape, bound| {
            let gcn_bound = gcn.params.bind(tape);
            Ok(stvh_batch_loss(&model, tape, bound, &gcn_bound, &batch, &weights)?.total)
        })
        .expect("stvh model grads");
        worst = worst.max(rep.max_rel_err);
        entries += rep.entries;

        let mut probe = gcn.params.clone();
        let rep = grad_check(&mut probe, 1e-5, |tape, gcn_bound| {
            let bound = model.params.bind(tape);
            Ok(stvh_batch_loss(&model, tape, &bound, gcn_bound, &batch, &weights)?.total)
        })
        .expect("stvh relation grads");
        worst = worst.max(rep.max_rel_err);
        entries += rep.entries;
    }
    {
        let model = Mstvh::new(dims.model_dims(), 15).expect("mstvh");
        let mut probe = model.params.clone();
        let rep = grad_check(&mut probe, 1e-5, |tape, bound| {
            let gcn_bound = gcn.params.bind(tape);
            Ok(mstvh_batch_loss(&model, tape, bound, &gcn_bound, &batch, &weights)?.total)
        })
        .expect("mstvh model grads");
        worst = worst.max(rep.max_rel_err);
        entries += rep.entries;

        let mut probe = gcn.params.clone();
        let rep = grad_check(&mut probe, 1e-5, |tape, gcn_bound| {
            let bound = model.params.bind(tape);
            Ok(mstvh_batch_loss(&model, tape, &bound, gcn_bound, &batch, &weights)?.total)
        })
        .expect("mstvh relation grads");
        worst = worst.max(rep.max_rel_err);
        entries += rep.entries;
    }

    let secs = started.elapsed().as_secs_f64();
    report(
        1,
        worst < 1e-4 && secs < 60.0,
        &format!("max rel err {worst:.3e} over {entries} entries in {secs:.1}s (limits 1e-4, 60s)"),
    );
}

// ---- criterion 2: graph oracles ----

fn random_trajectory(rng: &mut StdRng) -> BoxTrajectorySet {
    let n = rng.gen_range(2..6);
    let t = rng.gen_range(2..9);
    let (sw, sh) = (rng.gen_range(50.0..200.0), rng.gen_range(50.0..200.0));
    let boxes: Vec<BBox> = (0..n * t)
        .map(|_| {
            let w = rng.gen_range(1.0..sw / 3.0);
            let h = rng.gen_range(1.0..sh / 3.0);
            let x = rng.gen_range(0.0..sw - w);
            let y = rng.gen_range(0.0..sh - h);
            BBox::new(x, y, x + w, y + h)
        })
        .collect();
    BoxTrajectorySet::new(n, t, sw, sh, boxes).expect("valid trajectory")
}

fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let area = |r: &BBox| (r.x2 - r.x1) * (r.y2 - r.y1);
    inter / (area(a) + area(b) - inter)
}

#[test]
fn criterion_2_graph_oracles() {
    let mut rng = StdRng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let traj = random_trajectory(&mut rng);
        let (n, t) = (traj.objects(), traj.frames());
        let graphs = build_graphs(&traj).expect("graphs");
        assert_eq!(graphs.g_t, build_temporal_graph(&traj));
        assert_eq!(graphs.g_s, build_spatial_graph(&traj).expect("spatial"));
        assert_eq!(graphs.g_t.shape(), &[n, t, t]);
        assert_eq!(graphs.g_s.shape(), &[t, n, n]);

        for j in 0..n {
            for t1 in 0..t {
                for t2 in 0..t {
                    let got = graphs.g_t.at(&[j, t1, t2]);
                    let want = if t2 > t1 {
                        0.0
                    } else if t2 == t1 {
                        1.0
                    } else {
                        oracle_iou(traj.get(j, t1), traj.get(j, t2))
                    };
                    worst = worst.max((got - want).abs());
                    assert!((0.0..=1.0).contains(&got), "IoU out of range: {got}");
                }
            }
        }

        let coord = |b: &BBox, c: usize| [b.x1, b.y1, b.x2, b.y2][c];
        for frame in 0..t {
            let mut sigma = [0.0f64; 4];
            for (c, s) in sigma.iter_mut().enumerate() {
                let mean = (0..n).map(|j| coord(traj.get(j, frame), c)).sum::<f64>() / n as f64;
                let var = (0..n)
                    .map(|j| (coord(traj.get(j, frame), c) - mean).powi(2))
                    .sum::<f64>()
                    / n as f64;
                *s = var.sqrt().max(1e-8);
            }
            for i in 0..n {
                for j in 0..n {
                    let got = graphs.g_s.at(&[frame, i, j]);
                    assert_eq!(got, graphs.g_s.at(&[frame, j, i]), "asymmetric spatial graph");
                    let want = if i == j {
                        1.0
                    } else {
                        let acc: f64 = (0..4)
                            .map(|c| {
                                ((coord(traj.get(i, frame), c) - coord(traj.get(j, frame), c))
                                    / sigma[c])
                                    .powi(2)
                            })
                            .sum();
                        1.0 - (acc / 4.0).sqrt()
                    };
                    worst = worst.max((got - want).abs());
                }
            }
        }
    }
    report(2, worst < 1e-12, &format!("200 trajectories, worst deviation {worst:.3e} (limit 1e-12)"));
}

// ---- criterion 3: retrieval oracles ----

fn oracle_hamming(a: &[u8], b: &[u8]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

fn random_code(rng: &mut StdRng, k: usize) -> Vec<u8> {
    let mut code = vec![0u8; k.div_ceil(8)];
    for (bit, byte) in (0..k).map(|j| (j, j / 8)) {
        if rng.gen_bool(0.5) {
            code[byte] |= 1 << (bit % 8);
        }
    }
    code
}

#[test]
fn criterion_3_retrieval_oracles() {
    let mut rng = StdRng::seed_from_u64(1337);
    let ks = [16usize, 32, 64, 128];
    for instance in 0..1000 {
        let k_bits = ks[instance % ks.len()];
        let m = rng.gen_range(2usize..40);
        let mut index = Index::new(k_bits).expect("index");
        let mut records = Vec::with_capacity(m);
        for id in 0..m {
            let record = CodeRecord {
                id: id as u64,
                code: random_code(&mut rng, k_bits),
                labels: BTreeMap::from([(
                    "activity".to_string(),
                    rng.gen_range(0..3) as i64,
                )]),
            };
            index.insert(record.clone()).expect("insert");
            records.push(record);
        }
        let query = random_code(&mut rng, k_bits);
        let topk = rng.gen_range(1..=m + 3);

        // Brute-force ranking: distance, then id.
        let mut oracle: Vec<(u32, u64)> = records
            .iter()
            .map(|r| (oracle_hamming(&query, &r.code), r.id))
            .collect();
        oracle.sort_unstable();
        oracle.truncate(topk);
        let got = query_topk(&index, &query, topk).expect("topk");
        let got_pairs: Vec<(u32, u64)> = got.hits.iter().map(|h| (h.distance, h.id)).collect();
        assert_eq!(got_pairs, oracle, "instance {instance} (K={k_bits}, M={m})");

        // Brute-force mAP on the same index, queries drawn from the records.
        let exclude = rng.gen_bool(0.5);
        let queries: Vec<CodeRecord> = records.iter().step_by(3).cloned().collect();
        let at = rng.gen_range(1..=m + 2);
        let mut ap_sum = 0.0;
        let mut ap_count = 0usize;
        for q in &queries {
            let mut ranking: Vec<(u32, u64, bool)> = records
                .iter()
                .filter(|r| !(exclude && r.id == q.id))
                .map(|r| {
                    (
                        oracle_hamming(&q.code, &r.code),
                        r.id,
                        r.labels["activity"] == q.labels["activity"],
                    )
                })
                .collect();
            ranking.sort_unstable();
            let relevant = ranking.iter().filter(|&&(_, _, rel)| rel).count();
            if relevant == 0 {
                continue;
            }
            let mut seen = 0usize;
            let mut ap = 0.0;
            for (rank, &(_, _, rel)) in ranking.iter().take(at).enumerate() {
                if rel {
                    seen += 1;
                    ap += seen as f64 / (rank + 1) as f64;
                }
            }
            ap_sum += ap / relevant.min(at) as f64;
            ap_count += 1;
        }
        if ap_count == 0 {
            assert!(map_at_k(&queries, &index, "activity", at, exclude).is_err());
        } else {
            let got = map_at_k(&queries, &index, "activity", at, exclude).expect("map");
            let want = ap_sum / ap_count as f64;
            assert_eq!(got.value, want, "instance {instance} mAP (K={k_bits}, M={m})");
            assert_eq!(got.per_query.len(), ap_count);
        }
    }

    // Hand-checked case: ranked relevance (1, 0, 1, 0, 0) at k = 5 gives
    // AP = (1/1 + 2/3) / 2 = 5/6.
    let k_bits = 16;
    let base = random_code(&mut rng, k_bits);
    let mut index = Index::new(k_bits).expect("index");
    let relevance = [true, false, true, false, false];
    let mut query_labels = BTreeMap::new();
    query_labels.insert("activity".to_string(), 1i64);
    for (id, &rel) in relevance.iter().enumerate() {
        let mut code = base.clone();
        // id prefix bits flipped: distances 0, 1, 2, 3, 4 in rank order.
        for bit in 0..id {
            code[bit / 8] ^= 1 << (bit % 8);
        }
        index
            .insert(CodeRecord {
                id: id as u64,
                code,
                labels: BTreeMap::from([("activity".to_string(), if rel { 1i64 } else { 0 })]),
            })
            .expect("insert");
    }
    let query = CodeRecord { id: 99, code: base, labels: query_labels };
    let got = map_at_k(&[query], &index, "activity", 5, false).expect("hand case").value;
    let pass = (got - 5.0 / 6.0).abs() < 1e-15;
    report(
        3,
        pass,
        &format!("1000 oracle instances exact; hand case AP = {got:.12} vs 5/6"),
    );
}

// ---- criterion 4: desk-scale experiment ----

#[test]
fn criterion_4_desk_experiment() {
    let fx = stvh_fixture();
    let correct = fx
        .test_ds
        .samples
        .iter()
        .filter(|s| predict_activity(&fx.model, s).expect("forward") == s.activity)
        .count();
    let accuracy = correct as f64 / fx.test_ds.samples.len() as f64;
    let map = layer_map(fx, 0, "activity");
    let pass = accuracy >= 0.90 && map >= 0.85 && fx.train_secs < 1200.0;
    report(
        4,
        pass,
        &format!(
            "test accuracy {accuracy:.3} (floor 0.90), activity mAP@10 {map:.3} (floor 0.85), trained in {:.0}s (limit 1200s)",
            fx.train_secs
        ),
    );
}

// ---- criterion 5: multi-focus ordering ----

#[test]
fn criterion_5_multi_focus_ordering() {
    let fx = mstvh_fixture();
    let deep = fx.train_codes.upsilon() - 1;
    let shallow_appearance = layer_map(fx, 0, "appearance");
    let deep_appearance = layer_map(fx, deep, "appearance");
    let shallow_activity = layer_map(fx, 0, "activity");
    let deep_activity = layer_map(fx, deep, "activity");
    let pass = shallow_appearance >= deep_appearance + 0.05
        && deep_activity >= shallow_activity + 0.05;
    report(
        5,
        pass,
        &format!(
            "appearance mAP@10 layer1 {shallow_appearance:.3} vs layer{} {deep_appearance:.3}; activity mAP@10 layer{} {deep_activity:.3} vs layer1 {shallow_activity:.3} (gaps >= 0.05)",
            deep + 1,
            deep + 1
        ),
    );
}

// ---- criterion 6: filter fidelity and storage ----

fn derive_set(codes: &CodeSet, filter: &gah_core::filter::FilterMatrix) -> CodeSet {
    let deep = codes.upsilon() - 1;
    let mut derived = CodeSet::new(codes.k(), codes.upsilon());
    for sample in 0..codes.samples() {
        let deepest = io::unpack_code(codes.code(sample, deep), codes.k());
        let chain = filter.derive_chain(&deepest, codes.upsilon()).expect("chain");
        let packed: Vec<Vec<u8>> = chain.iter().map(|bits| io::pack_code(bits)).collect();
        derived.push(&packed).expect("push");
    }
    derived
}

#[test]
fn criterion_6_filter_fidelity() {
    let fx = mstvh_fixture();
    let (filter, fit) = fit_filter_with_report(&fx.train_codes).expect("filter fit");
    assert!(!fit.underdetermined, "desk-scale fit must be determined");

    let derived_db = derive_set(&fx.train_codes, &filter);
    let derived_queries = derive_set(&fx.test_codes, &filter);
    let mut worst_gap: f64 = 0.0;
    let mut detail = String::new();
    for layer in 0..fx.train_codes.upsilon() {
        for space in ["activity", "appearance"] {
            let original = layer_map(fx, layer, space);
            let derived = map_on(
                &derived_queries,
                &fx.test_labels,
                &derived_db,
                &fx.train_labels,
                layer,
                space,
            );
            worst_gap = worst_gap.max((original - derived).abs());
            detail.push_str(&format!(
                "{space} layer{} {original:.3}->{derived:.3} ",
                layer + 1
            ));
        }
    }

    // Stored payload: the deepest layer per sample plus the filter matrix.
    let m = fx.train_codes.samples();
    let k = fx.train_codes.k();
    let mut stored = CodeSet::new(k, 1);
    for sample in 0..m {
        stored
            .push(&[fx.train_codes.code(sample, fx.train_codes.upsilon() - 1).to_vec()])
            .expect("push");
    }
    let code_bits = stored.payload_bytes() * 8;
    let filter_entries = filter.matrix().len();
    let cr = compression_ratio(1000, 128, 4).expect("ratio");
    let pass = worst_gap <= 0.05
        && code_bits == m * k
        && filter_entries == k * k
        && (cr - 0.282).abs() < 1e-10;
    report(
        6,
        pass,
        &format!(
            "derived-code mAP gaps {detail}(worst {worst_gap:.3}, limit 0.05); stored {code_bits} code bits for M*K = {}, {filter_entries} filter entries for K*K = {}; CR(1000,128,4) = {cr:.5}",
            m * k,
            k * k
        ),
    );
}

// ---- criterion 7: quantization bound ----

#[test]
fn criterion_7_quantization_bound() {
    let mut rng = StdRng::seed_from_u64(7);
    let tape = Tape::new();
    let mut worst_slack: f64 = f64::INFINITY;
    for _ in 0..100 {
        let b_rows = rng.gen_range(2usize..10);
        let k = [8usize, 16, 64][rng.gen_range(0..3)];
        let h = Array::from_fn(&[b_rows, k], |_| (rng.gen_range(-2.0..2.0f64)).tanh());
        let b = Array::from_fn(&[b_rows, k], |i| if h.data()[i] >= 0.0 { 1.0 } else { -1.0 });
        let loss = quantization_loss(&tape.constant(h), &b).expect("loss").value().item();
        let floor = (b_rows * b_rows) as f64;
        assert!(loss > floor, "bound violated: {loss} vs {floor}");
        worst_slack = worst_slack.min(loss - floor);

        // Exactly binary h sits on the bound.
        let h_exact = b.clone();
        let at_bound =
            quantization_loss(&tape.constant(h_exact), &b).expect("loss").value().item();
        assert!(
            (at_bound - floor).abs() < 1e-9 * floor,
            "equality case off the floor: {at_bound} vs {floor}"
        );
    }

    // Monotone decrease along h = alpha * b.
    let b = Array::from_fn(&[6, 32], |_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
    let mut previous = f64::INFINITY;
    let mut monotone = true;
    for step in 1..=10 {
        let alpha = step as f64 / 10.0;
        let h = Array::from_fn(&[6, 32], |i| alpha * b.data()[i]);
        let value = quantization_loss(&tape.constant(h), &b).expect("loss").value().item();
        if value >= previous {
            monotone = false;
        }
        previous = value;
    }
    let ends_at_floor = (previous - 36.0).abs() < 1e-9 * 36.0;
    report(
        7,
        monotone && ends_at_floor,
        &format!(
            "100 batches above the B*B floor (tightest slack {worst_slack:.3e}); alpha sweep strictly decreasing to {previous:.6} = 36"
        ),
    );
}

// ---- criterion 8: Hamming structure ----

#[test]
fn criterion_8_hamming_structure() {
    let fx = stvh_fixture();
    let index = build_index(&fx.test_codes, &fx.test_labels, 0).expect("index");
    let distances = mean_hamming_by_class(&index, "activity").expect("class distances");
    let counts: BTreeMap<i64, f64> = fx
        .test_labels
        .values()
        .fold(BTreeMap::new(), |mut acc, l| {
            *acc.entry(l.activity as i64).or_insert(0.0) += 1.0;
            acc
        });
    let classes = &distances.classes;
    let mut detail = String::new();
    let mut pass = true;
    for (i, class) in classes.iter().enumerate() {
        let within = distances.matrix.at(&[i, i]);
        let mut cross_sum = 0.0;
        let mut cross_weight = 0.0;
        for (j, other) in classes.iter().enumerate() {
            if i != j {
                cross_sum += counts[other] * distances.matrix.at(&[i, j]);
                cross_weight += counts[other];
            }
        }
        let cross = cross_sum / cross_weight;
        pass &= within < cross;
        detail.push_str(&format!("class {class}: {within:.2} < {cross:.2}; "));
    }
    report(8, pass, &format!("within vs cross mean Hamming, {detail}all strict"));
}

// ---- criterion 9: pipeline determinism ----

fn pipeline(root: &std::path::Path, seed: u64) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let dims = DimsConfig {
        n: 3,
        t: 4,
        d_v: 8,
        d: 16,
        k: 16,
        upsilon: 2,
        activities: 2,
        actions: 2,
        appearances: 2,
    };
    let config = RunConfig {
        model: "mstvh".into(),
        dims,
        loss_weights: None,
        optimizer: gah_core::train::OptimizerConfig::desk_default(),
        epochs: 3,
        batch_size: 4,
        seed,
        dataset: Some(root.join("data")),
        generator: None,
    };
    let gen_opts = GeneratorOptions {
        samples: 24,
        map_width: 8,
        map_height: 8,
        scene_width: 128.0,
        scene_height: 128.0,
    };
    let gen_config = RunConfig { generator: Some(gen_opts), dataset: None, ..config.clone() };
    gen_config.validate().expect("config");
    let (gc, count) = gen_config.generator_config().expect("generator");
    gah_core::synth::write_dataset(&root.join("data"), &gc, count, 2).expect("generate");

    let outcome = train::train(&config, &root.join("run")).expect("train");
    let model = Model::load(&outcome.final_checkpoint).expect("load");
    let ds = train::load_dataset(&root.join("data")).expect("dataset");
    let (codes, labels) = encode_dataset(&model, &ds, 2).expect("encode");
    io::write_codes(&root.join("codes.gahc"), &codes).expect("write codes");

    let index = build_index(&codes, &labels, codes.upsilon() - 1).expect("index");
    let queries = code_records(&codes, &labels, codes.upsilon() - 1).expect("records");
    let score = map_at_k(&queries, &index, "activity", 5, true).expect("map");
    let eval = io::EvalReport {
        metric: "map".into(),
        label_space: "activity".into(),
        k: 5,
        value: score.value,
        per_query: score.per_query.iter().map(|&(_, ap)| ap).collect(),
    };
    io::write_report(&root.join("eval.json"), &eval).expect("write report");

    (
        std::fs::read(root.join("codes.gahc")).expect("codes bytes"),
        std::fs::read(root.join("eval.json")).expect("eval bytes"),
        std::fs::read(root.join("run").join("metrics.jsonl")).expect("metrics bytes"),
    )
}

#[test]
fn criterion_9_pipeline_determinism() {
    let dir_a = tempfile::tempdir().expect("tempdir");
    let dir_b = tempfile::tempdir().expect("tempdir");
    let (codes_a, eval_a, metrics_a) = pipeline(dir_a.path(), 99);
    let (codes_b, eval_b, metrics_b) = pipeline(dir_b.path(), 99);
    let pass = codes_a == codes_b && eval_a == eval_b && metrics_a == metrics_b;
    report(
        9,
        pass,
        &format!(
            "generate/train/encode/eval twice with one seed: codes {} bytes, eval {} bytes, metrics {} bytes, all identical",
            codes_a.len(),
            eval_a.len(),
            metrics_a.len()
        ),
    );
}
