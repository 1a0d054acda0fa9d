use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Tape};
use crate::error::{Error, Result};
use crate::graph::{
    node_virtual_box, validate_graph, virtual_box_center, BoundingBox, Node, SpatialGraph,
};
use crate::metrics::{apply_frequency_bias, FrequencyBias};
use crate::model::Model;
use crate::synth::Image;

use super::config::TaskConfig;

/// A predicted graph with the scores the metrics need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedGraph {
    pub graph: SpatialGraph,
    /// Class probability of every kept node.
    pub node_scores: Vec<f64>,
    /// Probability of the emitted label of every edge.
    pub edge_scores: Vec<f64>,
    /// Relation probabilities per scored node pair (undirected: `i < j`).
    pub relation_probs: BTreeMap<(usize, usize), Vec<f64>>,
    /// Object token behind every node.
    pub tokens: Vec<usize>,
}

impl PredictedGraph {
    /// Ground truth presented as a perfect prediction.
    pub fn oracle(g: &SpatialGraph, num_relations: usize) -> Self {
        let mut relation_probs = BTreeMap::new();
        for e in &g.edges {
            let mut p = vec![0.0; num_relations.max(e.rln + 1)];
            p[e.rln] = 1.0;
            relation_probs.insert((e.src, e.dst), p);
        }
        Self {
            graph: g.clone(),
            node_scores: vec![1.0; g.nodes.len()],
            edge_scores: vec![1.0; g.edges.len()],
            relation_probs,
            tokens: (0..g.nodes.len()).collect(),
        }
    }

    /// Number of node pairs closer than `tol`, a hint at duplicate tokens.
    pub fn near_duplicates(&self, tol: f64) -> usize {
        let n = &self.graph.nodes;
        let mut count = 0;
        for i in 0..n.len() {
            for j in i + 1..n.len() {
                let d: f64 = n[i]
                    .center
                    .iter()
                    .zip(&n[j].center)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d.sqrt() < tol {
                    count += 1;
                }
            }
        }
        count
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs the model on one image and assembles a graph.
///
/// Nodes are tokens whose most likely class is not background with
/// probability at least `node_threshold`. Every ordered pair of kept nodes is
/// scored by the relation head; undirected tasks average the two orders.
/// An edge is kept when its most likely label is not background with
/// probability at least `rln_threshold`.
pub fn predict(
    model: &Model,
    image: &Image,
    task: &TaskConfig,
    bias: Option<&FrequencyBias>,
) -> Result<PredictedGraph> {
    let dim = model.cfg.dim;
    let mut t = Tape::new(&model.params);
    let out = model.forward(&mut t, image)?;
    let logits = t.value(out.cls_logits).clone();
    let boxes = t.value(out.boxes).clone();

    let mut graph = SpatialGraph::new(dim, task.directed);
    let mut node_scores = Vec::new();
    let mut tokens = Vec::new();
    for i in 0..logits.rows() {
        let mut p = logits.row(i).to_vec();
        softmax_in_place(&mut p);
        let c = argmax(&p);
        if c == 0 || p[c] < task.node_threshold {
            continue;
        }
        let row = boxes.row(i);
        let raw = BoundingBox::from_center_size(&row[..dim], &row[dim..]).clipped();
        let center: Vec<f64> = virtual_box_center(&raw, task.node_box_width)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        let bbox = if raw.is_valid() {
            raw
        } else {
            node_virtual_box(&center, 0.5 * task.node_box_width)
        };
        graph.nodes.push(Node {
            center,
            bbox,
            cls: c,
        });
        node_scores.push(p[c]);
        tokens.push(i);
    }

    let k = tokens.len();
    let mut pairs = Vec::new();
    for a in 0..k {
        for b in 0..k {
            if a != b {
                pairs.push((tokens[a], tokens[b]));
            }
        }
    }
    let mut edge_scores = Vec::new();
    let mut relation_probs = BTreeMap::new();
    if !pairs.is_empty() {
        let r = model.relation_head(&mut t, &out, &pairs)?;
        let rv = t.value(r);
        let mut ordered: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        let mut idx = 0;
        for a in 0..k {
            for b in 0..k {
                if a != b {
                    ordered.insert((a, b), rv.row(idx).to_vec());
                    idx += 1;
                }
            }
        }
        for a in 0..k {
            for b in 0..k {
                if a == b || (!task.directed && b < a) {
                    continue;
                }
                let mut l = ordered[&(a, b)].clone();
                if !task.directed {
                    for (x, y) in l.iter_mut().zip(&ordered[&(b, a)]) {
                        *x = 0.5 * (*x + y);
                    }
                }
                if let Some(fb) = bias {
                    l = apply_frequency_bias(&l, graph.nodes[a].cls, graph.nodes[b].cls, fb);
                }
                softmax_in_place(&mut l);
                let c = argmax(&l);
                if c != 0 && l[c] >= task.rln_threshold {
                    graph.add_edge(a, b, c);
                    edge_scores.push(l[c]);
                }
                relation_probs.insert((a, b), l);
            }
        }
    }

    let report = validate_graph(&graph);
    if !report.is_valid() {
        return Err(Error::InvalidGraph(format!("{:?}", report.violations)));
    }
    Ok(PredictedGraph {
        graph,
        node_scores,
        edge_scores,
        relation_probs,
        tokens,
    })
}
