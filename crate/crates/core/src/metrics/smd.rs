use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::matching::hungarian;
use crate::tensor::Tensor;

pub const DEFAULT_SMD_POINTS: usize = 100;

/// `n` points spread uniformly by arc length over the edges of `g`.
///
/// Point `i` sits at arc length `(i + 0.5) / n` of the total. A graph with
/// no edge length yields `n` copies of the image center.
pub fn sample_edge_points(g: &SpatialGraph, n: usize) -> Vec<Vec<f64>> {
    let segs = g.segments();
    let lens: Vec<f64> = segs.iter().map(|(a, b)| dist2(a, b).sqrt()).collect();
    let total: f64 = lens.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return vec![vec![0.5; g.dim]; n];
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    let mut start = 0.0;
    for i in 0..n {
        let s = (i as f64 + 0.5) / n as f64 * total;
        while seg + 1 < segs.len() && start + lens[seg] < s {
            start += lens[seg];
            seg += 1;
        }
        let (a, b) = segs[seg];
        let t = if lens[seg] > 0.0 {
            ((s - start) / lens[seg]).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(a.iter().zip(b).map(|(p, q)| p + t * (q - p)).collect());
    }
    out
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn cmp_clouds(a: &[Vec<f64>], b: &[Vec<f64>]) -> Ordering {
    for (p, q) in a.iter().zip(b) {
        for (x, y) in p.iter().zip(q) {
            match x.total_cmp(y) {
                Ordering::Equal => {}
                o => return o,
            }
        }
    }
    Ordering::Equal
}

/// Mean squared-Euclidean cost of the optimal one-to-one transport between
/// two equal-size point clouds.
pub fn point_cloud_ot(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "point clouds differ in size ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n == 0 {
        return Ok(0.0);
    }
    // canonical argument order makes the result exactly symmetric
    let (a, b) = if cmp_clouds(a, b) == Ordering::Greater {
        (b, a)
    } else {
        (a, b)
    };
    let mut cost = Tensor::zeros(&[n, n]);
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            cost.data[i * n + j] = dist2(p, q);
        }
    }
    let assign = hungarian(&cost)?;
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost.at(i, j)).sum();
    Ok(total / n as f64)
}

/// Street mover distance between the edge sets of two graphs.
pub fn street_mover_distance(
    pred: &SpatialGraph,
    gt: &SpatialGraph,
    n_points: usize,
) -> Result<f64> {
    if pred.dim != gt.dim {
        return Err(Error::DimensionMismatch(pred.dim, gt.dim));
    }
    let no_edges = |g: &SpatialGraph| g.edges.is_empty();
    if no_edges(pred) && no_edges(gt) {
        return Ok(0.0);
    }
    point_cloud_ot(
        &sample_edge_points(pred, n_points),
        &sample_edge_points(gt, n_points),
    )
}
