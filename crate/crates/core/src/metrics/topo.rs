use serde::{Deserialize, Serialize};

use crate::graph::SpatialGraph;
use crate::matching::hungarian;
use crate::tensor::Tensor;

pub const DEFAULT_NODE_TOL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopoScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// `partner[i]` of every node of `a` in `b`, from a minimum-distance
/// assignment with pairs farther than `tol` dropped.
fn node_partners(
    a: &SpatialGraph,
    b: &SpatialGraph,
    tol: f64,
) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
    let (na, nb) = (a.nodes.len(), b.nodes.len());
    let mut pa = vec![None; na];
    let mut pb = vec![None; nb];
    if na == 0 || nb == 0 {
        return (pa, pb);
    }
    let d = |i: usize, j: usize| -> f64 {
        a.nodes[i]
            .center
            .iter()
            .zip(&b.nodes[j].center)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt()
    };
    let pairs: Vec<(usize, usize)> = if na <= nb {
        let c = Tensor::matrix(na, nb, (0..na * nb).map(|k| d(k / nb, k % nb)).collect());
        let assign = hungarian(&c).unwrap_or_default();
        assign.into_iter().enumerate().collect()
    } else {
        let c = Tensor::matrix(nb, na, (0..na * nb).map(|k| d(k % na, k / na)).collect());
        let assign = hungarian(&c).unwrap_or_default();
        assign
            .into_iter()
            .enumerate()
            .map(|(j, i)| (i, j))
            .collect()
    };
    for (i, j) in pairs {
        if d(i, j) <= tol {
            pa[i] = Some(j);
            pb[j] = Some(i);
        }
    }
    (pa, pb)
}

fn edge_fraction(from: &SpatialGraph, to: &SpatialGraph, partner: &[Option<usize>]) -> f64 {
    if from.edges.is_empty() {
        return 1.0;
    }
    let hit = from
        .edges
        .iter()
        .filter(|e| match (partner[e.src], partner[e.dst]) {
            (Some(a), Some(b)) => to.has_edge(a, b),
            _ => false,
        })
        .count();
    hit as f64 / from.edges.len() as f64
}

/// Simplified topology score ("TOPO-s").
///
/// Nodes are matched one-to-one by center distance within `node_tol`. A gt
/// edge counts as recalled when both endpoints are matched and their
/// partners are connected in `pred`; precision mirrors this for pred edges.
/// A graph with no edges scores 1 on its own side.
pub fn topo_score(pred: &SpatialGraph, gt: &SpatialGraph, node_tol: f64) -> TopoScore {
    let (pp, pg) = node_partners(pred, gt, node_tol);
    let precision = edge_fraction(pred, gt, &pp);
    let recall = edge_fraction(gt, pred, &pg);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    TopoScore {
        precision,
        recall,
        f1,
    }
}
