use serde::{Deserialize, Serialize};

use super::prune::prune_degree2;
use super::{GenConfig, Image, Sample};
use crate::graph::{Node, SpatialGraph};

/// Pixel offset and side length of one square patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchWindow {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

impl PatchWindow {
    /// All windows of a square image, row by row.
    pub fn grid(image_size: usize, patch_size: usize, stride: usize) -> Vec<PatchWindow> {
        assert!(stride > 0 && stride <= patch_size && patch_size <= image_size);
        let per_axis = (image_size - patch_size) / stride + 1;
        let mut out = Vec::with_capacity(per_axis * per_axis);
        for j in 0..per_axis {
            for i in 0..per_axis {
                out.push(PatchWindow {
                    x0: i * stride,
                    y0: j * stride,
                    size: patch_size,
                });
            }
        }
        out
    }

    /// Window bounds in the normalized frame of an image of side `image_size`.
    pub fn bounds(&self, image_size: usize) -> ([f64; 2], [f64; 2]) {
        let n = image_size as f64;
        let lo = [self.x0 as f64 / n, self.y0 as f64 / n];
        let hi = [
            (self.x0 + self.size) as f64 / n,
            (self.y0 + self.size) as f64 / n,
        ];
        (lo, hi)
    }
}

/// Liang–Barsky clip of segment `a`–`b` to the closed box; returns the
/// parameter interval kept, or `None` when nothing of positive length remains.
pub(crate) fn clip_segment(a: &[f64], b: &[f64], lo: [f64; 2], hi: [f64; 2]) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for k in 0..2 {
        let d = b[k] - a[k];
        for (p, q) in [(-d, a[k] - lo[k]), (d, hi[k] - a[k])] {
            if p == 0.0 {
                if q < 0.0 {
                    return None;
                }
            } else {
                let r = q / p;
                if p < 0.0 {
                    t0 = t0.max(r);
                } else {
                    t1 = t1.min(r);
                }
            }
        }
    }
    (t1 > t0).then_some((t0, t1))
}

/// Crops the image and graph into overlapping square patches.
///
/// Edges leaving a window are cut at the border and a new node is placed at
/// the crossing point. Coordinates are renormalized to the patch, the result
/// is pruned again with `cfg.prune_angle_deg` and patches without edges are
/// dropped.
pub fn extract_patches(
    img: &Image,
    g: &SpatialGraph,
    patch_size: usize,
    stride: usize,
    cfg: &GenConfig,
) -> Vec<(PatchWindow, Sample)> {
    let n = img.dims[0];
    let mut out = Vec::new();
    for w in PatchWindow::grid(n, patch_size, stride) {
        let graph = crop_graph(g, &w, n, cfg.node_box_width);
        let graph = prune_degree2(&graph, cfg.prune_angle_deg);
        if graph.edges.is_empty() {
            continue;
        }
        let image = img.crop2(w.x0, w.y0, w.size, w.size);
        out.push((w, Sample { image, graph }));
    }
    out
}

fn crop_graph(
    g: &SpatialGraph,
    w: &PatchWindow,
    image_size: usize,
    box_width: f64,
) -> SpatialGraph {
    let (lo, hi) = w.bounds(image_size);
    let span = [hi[0] - lo[0], hi[1] - lo[1]];
    let to_patch = |p: &[f64]| -> Vec<f64> {
        (0..2)
            .map(|k| ((p[k] - lo[k]) / span[k]).clamp(0.0, 1.0))
            .collect()
    };
    let inside = |p: &[f64]| (0..2).all(|k| p[k] >= lo[k] && p[k] <= hi[k]);

    let mut out = SpatialGraph::new(2, g.directed);
    let mut remap = vec![None; g.nodes.len()];
    for (i, node) in g.nodes.iter().enumerate() {
        if inside(&node.center) {
            remap[i] = Some(out.nodes.len());
            out.nodes
                .push(Node::point(to_patch(&node.center), box_width, node.cls));
        }
    }
    for e in &g.edges {
        let (a, b) = (&g.nodes[e.src].center, &g.nodes[e.dst].center);
        let Some((t0, t1)) = clip_segment(a, b, lo, hi) else {
            continue;
        };
        let mut end = |t: f64, original: usize| -> usize {
            match remap[original] {
                Some(k) if (t == 0.0 || t == 1.0) => k,
                _ => {
                    let p: Vec<f64> = (0..2).map(|k| a[k] + t * (b[k] - a[k])).collect();
                    out.nodes.push(Node::point(to_patch(&p), box_width, 1));
                    out.nodes.len() - 1
                }
            }
        };
        let s = end(t0, e.src);
        let d = end(t1, e.dst);
        out.add_edge(s, d, e.rln);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate_graph;
    use crate::synth::{generate_planar_graph, rasterize, segment_point_distance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_node(a: [f64; 2], b: [f64; 2]) -> SpatialGraph {
        let mut g = SpatialGraph::new(2, false);
        g.nodes.push(Node::point(a.to_vec(), 0.2, 1));
        g.nodes.push(Node::point(b.to_vec(), 0.2, 1));
        g.add_edge(0, 1, 1);
        g
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(PatchWindow::grid(128, 64, 32).len(), 9);
        assert_eq!(PatchWindow::grid(64, 64, 64).len(), 1);
        assert_eq!(PatchWindow::grid(100, 30, 20).len(), 16);
    }

    #[test]
    fn whole_image_patch_is_identity() {
        let cfg = GenConfig::default();
        let g = generate_planar_graph(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let g = prune_degree2(&g, cfg.prune_angle_deg);
        let img = rasterize(&g, &cfg);
        let p = extract_patches(&img, &g, cfg.image_size, cfg.image_size, &cfg);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].1.graph, g);
        assert_eq!(p[0].1.image, img);
    }

    #[test]
    fn border_crossing_inserts_node_at_intersection() {
        // Analytic intersection of the segment with the line x = 0.5:
        // t = (0.5 - 0.2) / (0.9 - 0.2), y = 0.3 + t * (0.7 - 0.3).
        let g = two_node([0.2, 0.3], [0.9, 0.7]);
        let w = PatchWindow {
            x0: 0,
            y0: 0,
            size: 32,
        };
        let cropped = crop_graph(&g, &w, 64, 0.2);
        assert_eq!(cropped.nodes.len(), 2);
        assert_eq!(cropped.edges.len(), 1);
        let t = 0.3 / 0.7;
        let y = 0.3 + t * 0.4;
        let boundary = &cropped.nodes[1].center;
        assert!((boundary[0] - 1.0).abs() < 1e-12);
        assert!((boundary[1] - y * 2.0).abs() < 1e-12);
        assert_eq!(cropped.nodes[0].center, vec![0.4, 0.6]);
    }

    #[test]
    fn segment_through_window_gets_two_boundary_nodes() {
        let g = two_node([0.1, 0.6], [0.9, 0.6]);
        let w = PatchWindow {
            x0: 16,
            y0: 16,
            size: 32,
        };
        let cropped = crop_graph(&g, &w, 64, 0.2);
        assert_eq!(cropped.nodes.len(), 2);
        assert!((cropped.nodes[0].center[0]).abs() < 1e-12);
        assert!((cropped.nodes[1].center[0] - 1.0).abs() < 1e-12);
        assert!((cropped.nodes[0].center[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn empty_patches_are_dropped() {
        let g = two_node([0.1, 0.1], [0.2, 0.2]);
        let cfg = GenConfig {
            image_size: 128,
            ..GenConfig::default()
        };
        let img = rasterize(&g, &cfg);
        let p = extract_patches(&img, &g, 64, 32, &cfg);
        assert_eq!(p.len(), 1);
        assert_eq!(
            p[0].0,
            PatchWindow {
                x0: 0,
                y0: 0,
                size: 64
            }
        );
    }

    #[test]
    fn local_topology_preserved_by_dense_sampling() {
        let cfg = GenConfig {
            image_size: 128,
            node_count_range: (4, 9),
            ..GenConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let eps = 0.02;
        for _ in 0..20 {
            let g = prune_degree2(
                &generate_planar_graph(&cfg, &mut rng).unwrap(),
                cfg.prune_angle_deg,
            );
            let img = rasterize(&g, &cfg);
            for (w, s) in extract_patches(&img, &g, 64, 32, &cfg) {
                assert!(validate_graph(&s.graph).is_valid());
                let (lo, hi) = w.bounds(cfg.image_size);
                let interior = |p: &[f64]| (0..2).all(|k| p[k] > lo[k] + eps && p[k] < hi[k] - eps);
                let to_patch = |p: &[f64]| -> Vec<f64> {
                    (0..2).map(|k| (p[k] - lo[k]) / (hi[k] - lo[k])).collect()
                };
                let on = |h: &SpatialGraph, q: &[f64]| {
                    h.segments()
                        .iter()
                        .any(|(a, b)| segment_point_distance(q, a, b) < 1e-9)
                };
                for (a, b) in g.segments() {
                    for t in 0..=400 {
                        let t = t as f64 / 400.0;
                        let q = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                        if interior(&q) {
                            assert!(on(&s.graph, &to_patch(&q)));
                        }
                    }
                }
                let from_patch = |p: &[f64]| -> Vec<f64> {
                    (0..2).map(|k| lo[k] + p[k] * (hi[k] - lo[k])).collect()
                };
                for (a, b) in s.graph.segments() {
                    for t in 0..=200 {
                        let t = t as f64 / 200.0;
                        let q = from_patch(&[a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
                        if interior(&q) {
                            assert!(on(&g, &q));
                        }
                    }
                }
            }
        }
    }
}
