use rand::seq::SliceRandom;
use rand::Rng;

use super::geometry::{segment_point_distance, segments_cross};
use super::GenConfig;
use crate::error::{Error, Result};
use crate::graph::{Node, SpatialGraph};

const MARGIN: f64 = 0.05;

/// Random connected planar graph with straight, non-crossing edges.
///
/// Points are drawn with a minimum separation, candidate edges are added
/// shortest-first whenever they cross nothing already accepted, and then a
/// random spanning tree plus a random subset of the remaining candidates is
/// kept. All nodes have class 1 and all edges relation 1.
pub fn generate_planar_graph<R: Rng>(cfg: &GenConfig, rng: &mut R) -> Result<SpatialGraph> {
    for _ in 0..cfg.max_attempts.max(1) {
        if let Some(g) = try_generate(cfg, rng) {
            return Ok(g);
        }
    }
    Err(Error::Generation {
        seed: cfg.seed,
        attempts: cfg.max_attempts,
    })
}

fn try_generate<R: Rng>(cfg: &GenConfig, rng: &mut R) -> Option<SpatialGraph> {
    let (lo, hi) = cfg.node_count_range;
    let n = rng.gen_range(lo..=hi);
    let points = sample_points(n, cfg.min_node_separation, rng)?;

    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((dist(&points[i], &points[j]), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let min_cos = cfg.min_edge_angle_deg.to_radians().cos();
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    'pair: for &(_, i, j) in &pairs {
        for (k, p) in points.iter().enumerate() {
            if k != i
                && k != j
                && segment_point_distance(p, &points[i], &points[j]) < cfg.min_edge_node_clearance
            {
                continue 'pair;
            }
        }
        for &(a, b) in &candidates {
            let shared = a == i || a == j || b == i || b == j;
            if !shared && segments_cross(&points[i], &points[j], &points[a], &points[b]) {
                continue 'pair;
            }
        }
        if angles_ok(&points, &candidates, i, j, min_cos) {
            candidates.push((i, j));
        }
    }

    // Spanning tree in random order (Kruskal with shuffled weights).
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.shuffle(rng);
    let mut parent: Vec<usize> = (0..n).collect();
    let mut in_tree = vec![false; candidates.len()];
    let mut components = n;
    for &c in &order {
        let (a, b) = candidates[c];
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            in_tree[c] = true;
            components -= 1;
        }
    }
    if components != 1 {
        return None;
    }

    let mut chosen: Vec<(usize, usize)> = Vec::new();
    for (c, &(a, b)) in candidates.iter().enumerate() {
        if in_tree[c] || rng.gen_bool(cfg.extra_edge_probability) {
            chosen.push((a, b));
        }
    }

    let mut g = SpatialGraph::new(2, false);
    for p in points {
        g.nodes.push(Node::point(p.to_vec(), cfg.node_box_width, 1));
    }
    for (a, b) in chosen {
        g.add_edge(a, b, 1);
    }
    Some(g)
}

fn sample_points<R: Rng>(n: usize, min_sep: f64, rng: &mut R) -> Option<Vec<[f64; 2]>> {
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(n);
    let mut tries = 0;
    while pts.len() < n {
        tries += 1;
        if tries > 2000 {
            return None;
        }
        let p = [
            rng.gen_range(MARGIN..=1.0 - MARGIN),
            rng.gen_range(MARGIN..=1.0 - MARGIN),
        ];
        if pts.iter().all(|q| dist(&p, q) >= min_sep) {
            pts.push(p);
        }
    }
    Some(pts)
}

/// Rejects an edge meeting an already accepted edge at a node under the
/// minimum angle.
fn angles_ok(
    points: &[[f64; 2]],
    accepted: &[(usize, usize)],
    a: usize,
    b: usize,
    min_cos: f64,
) -> bool {
    for &(c, d) in accepted {
        for (shared, other) in [(a, b), (b, a)] {
            let far = if c == shared {
                d
            } else if d == shared {
                c
            } else {
                continue;
            };
            let u = sub(&points[other], &points[shared]);
            let v = sub(&points[far], &points[shared]);
            if (u[0] * v[0] + u[1] * v[1]) / (norm(&u) * norm(&v)) > min_cos {
                return false;
            }
        }
    }
    true
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn sub(a: &[f64; 2], b: &[f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: &[f64; 2]) -> f64 {
    (a[0] * a[0] + a[1] * a[1]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate_graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_nodes_one_edge() {
        let cfg = GenConfig {
            node_count_range: (2, 2),
            ..GenConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = generate_planar_graph(&cfg, &mut rng).unwrap();
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.edges.len(), 1);
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = GenConfig::default();
        let a = generate_planar_graph(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = generate_planar_graph(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn impossible_config_reports_seed() {
        let cfg = GenConfig {
            seed: 77,
            node_count_range: (40, 40),
            min_node_separation: 0.5,
            max_attempts: 3,
            ..GenConfig::default()
        };
        let err = generate_planar_graph(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(
            err,
            Error::Generation {
                seed: 77,
                attempts: 3
            }
        ));
    }

    #[test]
    fn thousand_graphs_are_planar_connected_and_valid() {
        let cfg = GenConfig {
            node_count_range: (2, 9),
            ..GenConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut crossings = 0;
        for _ in 0..1000 {
            let g = generate_planar_graph(&cfg, &mut rng).unwrap();
            assert!(validate_graph(&g).is_valid());
            assert!(g.is_connected());
            for n in &g.nodes {
                assert!(n.center.iter().all(|c| (0.05..=0.95).contains(c)));
                assert_eq!(n.cls, 1);
            }
            // brute-force check over all edge pairs that share no endpoint
            for (i, e) in g.edges.iter().enumerate() {
                for f in &g.edges[i + 1..] {
                    if e.src == f.src || e.src == f.dst || e.dst == f.src || e.dst == f.dst {
                        continue;
                    }
                    let (a, b) = (&g.nodes[e.src].center, &g.nodes[e.dst].center);
                    let (c, d) = (&g.nodes[f.src].center, &g.nodes[f.dst].center);
                    if brute_force_intersect(a, b, c, d) {
                        crossings += 1;
                    }
                }
            }
        }
        assert_eq!(crossings, 0);
    }

    /// Independent check: solve the 2x2 system for the two segment parameters.
    fn brute_force_intersect(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> bool {
        let r = [b[0] - a[0], b[1] - a[1]];
        let s = [d[0] - c[0], d[1] - c[1]];
        let den = r[0] * s[1] - r[1] * s[0];
        if den.abs() < 1e-15 {
            return false;
        }
        let qp = [c[0] - a[0], c[1] - a[1]];
        let t = (qp[0] * s[1] - qp[1] * s[0]) / den;
        let u = (qp[0] * r[1] - qp[1] * r[0]) / den;
        (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u)
    }
}
