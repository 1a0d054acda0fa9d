use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::graph::{BoundingBox, Node, SpatialGraph};

fn graph(points: &[[f64; 2]], edges: &[(usize, usize)]) -> SpatialGraph {
    let mut g = SpatialGraph::new(2, false);
    for p in points {
        g.nodes.push(Node::point(p.to_vec(), 0.2, 1));
    }
    for &(a, b) in edges {
        g.add_edge(a, b, 1);
    }
    g
}

fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize) -> SpatialGraph {
    let n = rng.gen_range(2..=max_nodes);
    let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen(), rng.gen()]).collect();
    let mut edges = vec![(0, 1)];
    for a in 0..n {
        for b in a + 1..n {
            if (a, b) != (0, 1) && rng.gen_bool(0.3) {
                edges.push((a, b));
            }
        }
    }
    graph(&pts, &edges)
}

/// Minimum over all permutations, for tiny clouds.
fn brute_ot(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    fn rec(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if i == a.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..b.len() {
            if !used[j] {
                used[j] = true;
                let c: f64 = a[i].iter().zip(&b[j]).map(|(p, q)| (p - q) * (p - q)).sum();
                rec(a, b, i + 1, used, acc + c, best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(a, b, 0, &mut vec![false; b.len()], 0.0, &mut best);
    best / a.len() as f64
}

#[test]
fn smd_identity_and_translation() {
    let g = graph(&[[0.2, 0.5], [0.8, 0.5]], &[(0, 1)]);
    assert_eq!(street_mover_distance(&g, &g, 100).unwrap(), 0.0);
    for t in [0.01, 0.1, 0.3] {
        let h = graph(&[[0.2, 0.5 + t], [0.8, 0.5 + t]], &[(0, 1)]);
        let d = street_mover_distance(&h, &g, 100).unwrap();
        assert_abs_diff_eq!(d, t * t, epsilon = 1e-12);
    }
}

#[test]
fn smd_sampling_is_uniform_by_arc_length() {
    let g = graph(&[[0.0, 0.0], [0.3, 0.0], [0.3, 0.1]], &[(0, 1), (1, 2)]);
    let pts = sample_edge_points(&g, 4);
    // total length 0.4, samples at 0.05, 0.15, 0.25, 0.35
    let want = [[0.05, 0.0], [0.15, 0.0], [0.25, 0.0], [0.3, 0.05]];
    for (p, w) in pts.iter().zip(want) {
        assert_abs_diff_eq!(p[0], w[0], epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], w[1], epsilon = 1e-12);
    }
}

#[test]
fn smd_empty_graphs() {
    let empty = SpatialGraph::new(2, false);
    assert_eq!(street_mover_distance(&empty, &empty, 100).unwrap(), 0.0);
    let g = graph(&[[0.5, 0.2], [0.5, 0.8]], &[(0, 1)]);
    let d = street_mover_distance(&empty, &g, 100).unwrap();
    // mean squared distance of a uniform segment to its midpoint: len²/12
    assert_abs_diff_eq!(d, 0.36 / 12.0, epsilon = 1e-4);
    assert_eq!(d, street_mover_distance(&g, &empty, 100).unwrap());
    // nodes without edges count as empty
    let lone = graph(&[[0.1, 0.1]], &[]);
    assert_eq!(street_mover_distance(&lone, &empty, 100).unwrap(), 0.0);
}

#[test]
fn smd_dimension_mismatch() {
    let a = SpatialGraph::new(2, false);
    let b = SpatialGraph::new(3, false);
    assert!(matches!(
        street_mover_distance(&a, &b, 10),
        Err(Error::DimensionMismatch(2, 3))
    ));
    assert!(point_cloud_ot(&[vec![0.0]], &[]).is_err());
}

#[test]
fn smd_matches_permutation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let a = random_graph(&mut rng, 5);
        let b = random_graph(&mut rng, 5);
        let n = rng.gen_range(1..=7);
        let d = street_mover_distance(&a, &b, n).unwrap();
        let want = brute_ot(&sample_edge_points(&a, n), &sample_edge_points(&b, n));
        assert_abs_diff_eq!(d, want, epsilon = 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smd_symmetric_and_zero_on_self(seed in any::<u64>(), n in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_graph(&mut rng, 6);
        let b = random_graph(&mut rng, 6);
        let ab = street_mover_distance(&a, &b, n).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, street_mover_distance(&b, &a, n).unwrap());
        prop_assert_eq!(street_mover_distance(&a, &a, n).unwrap(), 0.0);
    }

    #[test]
    fn topo_in_unit_range(seed in any::<u64>(), tol in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_graph(&mut rng, 6);
        let b = random_graph(&mut rng, 6);
        let s = topo_score(&a, &b, tol);
        for v in [s.precision, s.recall, s.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(s.f1 <= s.precision.max(s.recall) + 1e-15);
        prop_assert!(s.f1 >= s.precision.min(s.recall) - 1e-15);
    }
}

#[test]
fn topo_examples() {
    let g = graph(&[[0.1, 0.1], [0.5, 0.5], [0.9, 0.1]], &[(0, 1), (1, 2)]);
    let s = topo_score(&g, &g, DEFAULT_NODE_TOL);
    assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));

    let missing = graph(&[[0.1, 0.1], [0.5, 0.5], [0.9, 0.1]], &[(0, 1)]);
    let s = topo_score(&missing, &g, DEFAULT_NODE_TOL);
    assert_eq!(s.precision, 1.0);
    assert_eq!(s.recall, 0.5);
    assert_abs_diff_eq!(s.f1, 2.0 / 3.0, epsilon = 1e-15);

    let moved = graph(&[[0.2, 0.1], [0.6, 0.5], [0.9, 0.2]], &[(0, 1), (1, 2)]);
    let s = topo_score(&moved, &g, DEFAULT_NODE_TOL);
    assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
}

#[test]
fn topo_ignores_node_order_and_direction_when_undirected() {
    let g = graph(&[[0.1, 0.1], [0.5, 0.5], [0.9, 0.1]], &[(0, 1), (1, 2)]);
    let p = graph(&[[0.9, 0.11], [0.1, 0.09], [0.51, 0.5]], &[(2, 0), (1, 2)]);
    let s = topo_score(&p, &g, DEFAULT_NODE_TOL);
    assert_eq!((s.precision, s.recall), (1.0, 1.0));
}

#[test]
fn topo_directed_requires_direction() {
    let mut g = SpatialGraph::new(2, true);
    g.nodes.push(Node::point(vec![0.2, 0.2], 0.2, 1));
    g.nodes.push(Node::point(vec![0.8, 0.8], 0.2, 1));
    let mut p = g.clone();
    g.add_edge(0, 1, 1);
    p.add_edge(1, 0, 1);
    assert_eq!(topo_score(&p, &g, 0.05).f1, 0.0);
}

fn inst(lo: [f64; 2], hi: [f64; 2], cls: usize, score: f64) -> DetectionInstance {
    DetectionInstance {
        bbox: BoundingBox::new(lo.to_vec(), hi.to_vec()).unwrap(),
        cls,
        score,
    }
}

fn unit(x: f64, cls: usize, score: f64) -> DetectionInstance {
    inst([x, 0.0], [x + 0.1, 0.1], cls, score)
}

#[test]
fn detection_perfect_and_empty() {
    let gts = vec![
        vec![unit(0.0, 1, 1.0), unit(0.3, 2, 1.0)],
        vec![unit(0.5, 1, 1.0)],
    ];
    let r = detection_map_mar(&gts, &gts, &default_iou_thresholds(), 100);
    assert_eq!((r.map, r.mar), (1.0, 1.0));
    let r = detection_map_mar(&gts, &gts, &[0.5], 100);
    assert_eq!((r.map, r.mar), (1.0, 1.0));
    assert_eq!(ap50(&gts, &gts), 1.0);
    let none = vec![vec![], vec![]];
    let r = detection_map_mar(&none, &gts, &default_iou_thresholds(), 100);
    assert_eq!((r.map, r.mar), (0.0, 0.0));
}

#[test]
fn detection_duplicate_with_lower_score_is_harmless() {
    let gts = vec![vec![unit(0.0, 1, 1.0)]];
    let preds = vec![vec![unit(0.0, 1, 0.9), unit(0.6, 1, 0.4)]];
    for thr in default_iou_thresholds() {
        let r = detection_map_mar(&preds, &gts, &[thr], 100);
        assert_eq!(r.map, 1.0);
    }
}

#[test]
fn detection_hand_pr_curves() {
    let gts = vec![vec![
        unit(0.0, 1, 1.0),
        unit(0.2, 1, 1.0),
        unit(0.4, 1, 1.0),
        unit(0.6, 1, 1.0),
    ]];
    let half = vec![vec![unit(0.0, 1, 0.9), unit(0.4, 1, 0.8)]];
    assert_eq!(ap50(&half, &gts), 0.5);

    // FP, TP, TP over 2 gts: precision envelope 2/3 across recall 0..1
    let gts = vec![vec![unit(0.0, 1, 1.0), unit(0.2, 1, 1.0)]];
    let preds = vec![vec![
        unit(0.8, 1, 0.9),
        unit(0.0, 1, 0.8),
        unit(0.2, 1, 0.7),
    ]];
    assert_abs_diff_eq!(ap50(&preds, &gts), 2.0 / 3.0, epsilon = 1e-15);

    let wrong = vec![vec![unit(0.0, 2, 0.9), unit(0.2, 2, 0.9)]];
    assert_eq!(ap50(&wrong, &gts), 0.0);
}

#[test]
fn detection_iou_threshold_sweep() {
    // pred overlapping the gt with IoU exactly 0.6
    let gts = vec![vec![inst([0.0, 0.0], [0.4, 0.1], 1, 1.0)]];
    let preds = vec![vec![inst([0.1, 0.0], [0.4, 0.1], 1, 1.0)]];
    // IoU = 0.3/0.4 = 0.75: hits at 0.5..0.75
    let r = detection_map_mar(&preds, &gts, &default_iou_thresholds(), 100);
    let hits = default_iou_thresholds()
        .iter()
        .filter(|t| **t <= 0.75)
        .count();
    assert_abs_diff_eq!(r.map, hits as f64 / 10.0, epsilon = 1e-15);
    assert_abs_diff_eq!(r.mar, hits as f64 / 10.0, epsilon = 1e-15);
}

#[test]
fn detection_max_detections_cap() {
    let gts = vec![vec![
        unit(0.0, 1, 1.0),
        unit(0.2, 1, 1.0),
        unit(0.4, 1, 1.0),
    ]];
    let r = detection_map_mar(&gts, &gts, &[0.5], 2);
    assert_abs_diff_eq!(r.mar, 2.0 / 3.0, epsilon = 1e-15);
}

fn trip(
    s: DetectionInstance,
    o: DetectionInstance,
    pair: (usize, usize),
    p: usize,
    ps: f64,
) -> Triplet {
    Triplet::new(s, o, pair, p, ps)
}

#[test]
fn sgdet_single_hit() {
    let (a, b) = (unit(0.0, 1, 1.0), unit(0.5, 2, 1.0));
    let gt = vec![vec![trip(a.clone(), b.clone(), (0, 1), 1, 1.0)]];
    let pred = vec![vec![trip(a, b, (0, 1), 1, 0.9)]];
    for mode in [RecallMode::Graph, RecallMode::NoGraph, RecallMode::Mean] {
        assert_eq!(sgdet_recall(&pred, &gt, 20, mode), 1.0);
    }
    assert_eq!(sgdet_recall(&[], &gt, 20, RecallMode::Graph), 0.0);
}

#[test]
fn sgdet_triplet_score_is_product() {
    let t = trip(unit(0.0, 1, 0.5), unit(0.5, 1, 0.4), (0, 1), 1, 0.25);
    assert_eq!(t.score, 0.05);
}

#[test]
fn sgdet_mean_recall_per_class() {
    let (a, b, c) = (unit(0.0, 1, 1.0), unit(0.3, 1, 1.0), unit(0.6, 1, 1.0));
    let gt = vec![vec![
        trip(a.clone(), b.clone(), (0, 1), 1, 1.0),
        trip(b.clone(), c.clone(), (1, 2), 1, 1.0),
        trip(a.clone(), c.clone(), (0, 2), 2, 1.0),
    ]];
    let pred = vec![vec![
        trip(a.clone(), b.clone(), (0, 1), 1, 0.9),
        trip(b, c.clone(), (1, 2), 1, 0.8),
        trip(a, c, (0, 2), 1, 0.7),
    ]];
    assert_abs_diff_eq!(
        sgdet_recall(&pred, &gt, 20, RecallMode::Graph),
        2.0 / 3.0,
        epsilon = 1e-15
    );
    assert_eq!(sgdet_recall(&pred, &gt, 20, RecallMode::Mean), 0.5);
}

#[test]
fn sgdet_no_graph_keeps_all_predicates() {
    let (a, b) = (unit(0.0, 1, 1.0), unit(0.5, 1, 1.0));
    let gt = vec![vec![trip(a.clone(), b.clone(), (0, 1), 2, 1.0)]];
    let pred = vec![vec![
        trip(a.clone(), b.clone(), (0, 1), 1, 0.9),
        trip(a, b, (0, 1), 2, 0.8),
    ]];
    assert_eq!(sgdet_recall(&pred, &gt, 1, RecallMode::Graph), 0.0);
    assert_eq!(sgdet_recall(&pred, &gt, 1, RecallMode::NoGraph), 1.0);
}

fn random_triplets(
    rng: &mut ChaCha8Rng,
    n_pred_cls: usize,
) -> (Vec<Vec<Triplet>>, Vec<Vec<Triplet>>) {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..rng.gen_range(1..4) {
        let n = rng.gen_range(2..8);
        let objs: Vec<DetectionInstance> = (0..n)
            .map(|i| {
                unit(
                    i as f64 * 0.12,
                    rng.gen_range(1..3),
                    rng.gen_range(0.1..1.0),
                )
            })
            .collect();
        let mut g = Vec::new();
        let mut p = Vec::new();
        for s in 0..n {
            for o in 0..n {
                if s == o {
                    continue;
                }
                if rng.gen_bool(0.3) {
                    g.push(trip(
                        objs[s].clone(),
                        objs[o].clone(),
                        (s, o),
                        rng.gen_range(1..=n_pred_cls),
                        1.0,
                    ));
                }
                for r in 1..=n_pred_cls {
                    if rng.gen_bool(0.7) {
                        p.push(trip(objs[s].clone(), objs[o].clone(), (s, o), r, rng.gen()));
                    }
                }
            }
        }
        preds.push(p);
        gts.push(g);
    }
    (preds, gts)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sgdet_recall_properties(seed in any::<u64>(), n_cls in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (preds, gts) = random_triplets(&mut rng, n_cls);
        let mut prev = 0.0;
        for k in [1, 5, 20, 50, 100] {
            let r = sgdet_recall(&preds, &gts, k, RecallMode::Graph);
            prop_assert!(r >= prev);
            prop_assert!(sgdet_recall(&preds, &gts, k, RecallMode::NoGraph) >= r);
            if n_cls == 1 {
                prop_assert_eq!(sgdet_recall(&preds, &gts, k, RecallMode::Mean), r);
            }
            prev = r;
        }
    }
}

#[test]
fn frequency_bias_hand_oracle() {
    let mut g = SpatialGraph::new(2, true);
    for (x, c) in [(0.1, 1), (0.5, 2), (0.9, 1)] {
        g.nodes.push(Node::point(vec![x, 0.5], 0.2, c));
    }
    g.add_edge(0, 1, 1);
    g.add_edge(1, 2, 2);
    g.add_edge(2, 1, 1);
    let fb = build_frequency_bias(&[g], 3, 3);
    // smoothed counts per label, then log-softmax over them
    let expect = |s: usize, o: usize, c: [f64; 3]| {
        let z: f64 = c.iter().map(|v| v.exp()).sum();
        for (a, v) in fb.row(s, o).iter().zip(c) {
            assert_abs_diff_eq!(*a, v - z.ln(), epsilon = 1e-14);
        }
    };
    expect(1, 2, [1.0, 3.0, 1.0]);
    expect(2, 1, [2.0, 1.0, 2.0]);
    expect(1, 1, [3.0, 1.0, 1.0]);
    expect(0, 0, [1.0; 3]);
    expect(2, 2, [1.0; 3]);
    expect(7, 1, [1.0; 3]);
}

#[test]
fn frequency_bias_rows_are_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let graphs: Vec<SpatialGraph> = (0..5).map(|_| random_graph(&mut rng, 6)).collect();
    let fb = build_frequency_bias(&graphs, 2, 2);
    for row in fb.table.chunks(2) {
        assert_abs_diff_eq!(crate::autograd::log_sum_exp(row), 0.0, epsilon = 1e-14);
    }
}

#[test]
fn frequency_bias_argmax_behaviour() {
    let uniform = build_frequency_bias(&[], 2, 4);
    let logits = [0.3, -1.0, 2.0, 0.1];
    let out = apply_frequency_bias(&logits, 1, 1, &uniform);
    let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    assert_eq!(argmax(&out), argmax(&logits));
    for (o, l) in out.iter().zip(logits) {
        assert_abs_diff_eq!(*o - l, -(4f64).ln(), epsilon = 1e-15);
    }

    let mut g = SpatialGraph::new(2, true);
    for _ in 0..2 {
        g.nodes.push(Node::point(vec![0.5, 0.5], 0.2, 1));
    }
    g.add_edge(0, 1, 2);
    g.add_edge(1, 0, 2);
    let fb = build_frequency_bias(&vec![g; 50], 2, 3);
    assert_eq!(argmax(&apply_frequency_bias(&[0.0; 3], 1, 1, &fb)), 2);
}

#[test]
fn report_omits_absent_fields() {
    let r = MetricsReport {
        smd: Some(0.0),
        ..Default::default()
    };
    assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"smd":0.0}"#);
}
