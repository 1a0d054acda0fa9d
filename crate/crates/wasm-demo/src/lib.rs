//! Browser bindings: generate a planar graph, prune it and render it, then
//! compare a perturbed copy with SMD and TOPO-s.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use rgl::graph::SpatialGraph;
use rgl::metrics::{street_mover_distance, topo_score};
use rgl::synth::{generate_planar_graph, prune_degree2, rasterize, GenConfig};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// A generated graph before pruning plus the settings that made it.
#[wasm_bindgen]
pub struct Scene {
    cfg: GenConfig,
    raw: SpatialGraph,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, min_nodes: usize, max_nodes: usize) -> Result<Scene, JsError> {
        let cfg = GenConfig {
            seed,
            node_count_range: (min_nodes, max_nodes),
            ..GenConfig::default()
        };
        cfg.validate().map_err(js_err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = generate_planar_graph(&cfg, &mut rng).map_err(js_err)?;
        Ok(Scene { cfg, raw })
    }

    #[wasm_bindgen(getter)]
    pub fn image_size(&self) -> usize {
        self.cfg.image_size
    }

    /// Graph JSON after merging degree-2 nodes straighter than `angle_deg`.
    pub fn pruned(&self, angle_deg: f64) -> Result<String, JsError> {
        prune_degree2(&self.raw, angle_deg)
            .to_json()
            .map_err(js_err)
    }

    /// Grayscale bytes (row-major, x fastest) of the pruned graph.
    pub fn render(&self, angle_deg: f64, noise: f64, thickness: f64) -> Result<Vec<u8>, JsError> {
        let cfg = GenConfig {
            noise_level: noise,
            line_thickness: thickness,
            ..self.cfg.clone()
        };
        cfg.validate().map_err(js_err)?;
        let img = rasterize(&prune_degree2(&self.raw, angle_deg), &cfg);
        Ok(img.data.iter().map(|v| (v * 255.0).round() as u8).collect())
    }
}

/// Moves every node by uniform noise of amplitude `sigma`, clamped to the
/// unit square, and drops each edge with probability `drop`.
#[wasm_bindgen]
pub fn perturb(graph_json: &str, sigma: f64, drop: f64, seed: u64) -> Result<String, JsError> {
    let mut g = SpatialGraph::from_json(graph_json).map_err(js_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for n in &mut g.nodes {
        for c in &mut n.center {
            *c = (*c + sigma * rng.gen_range(-1.0..=1.0)).clamp(0.0, 1.0);
        }
    }
    let keep = drop.clamp(0.0, 1.0);
    g.edges.retain(|_| !rng.gen_bool(keep));
    g.to_json().map_err(js_err)
}

/// `[smd, precision, recall, f1]` of `pred` against `gt`.
#[wasm_bindgen]
pub fn compare(
    pred_json: &str,
    gt_json: &str,
    n_points: usize,
    node_tol: f64,
) -> Result<Vec<f64>, JsError> {
    let pred = SpatialGraph::from_json(pred_json).map_err(js_err)?;
    let gt = SpatialGraph::from_json(gt_json).map_err(js_err)?;
    let smd = street_mover_distance(&pred, &gt, n_points).map_err(js_err)?;
    let t = topo_score(&pred, &gt, node_tol);
    Ok(vec![smd, t.precision, t.recall, t.f1])
}
