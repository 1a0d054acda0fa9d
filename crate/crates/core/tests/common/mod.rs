//! Reference implementations used as oracles by the integration tests.
//! None of them call into the library's own solvers.

#![allow(dead_code)]

use rgl::graph::SpatialGraph;

/// Minimum total cost over every injective row-to-column map, by plain
/// enumeration. `cost` is row-major `rows x cols` with `rows <= cols`.
pub fn brute_force_assignment(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn rec(
        cost: &[f64],
        cols: usize,
        row: usize,
        rows: usize,
        used: &mut [bool],
        acc: f64,
        best: &mut f64,
    ) {
        if row == rows {
            *best = best.min(acc);
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                rec(
                    cost,
                    cols,
                    row + 1,
                    rows,
                    used,
                    acc + cost[row * cols + c],
                    best,
                );
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, cols, 0, rows, &mut vec![false; cols], 0.0, &mut best);
    best
}

struct Arc {
    to: usize,
    cap: i32,
    cost: f64,
}

/// Optimal value of the assignment linear program (each row sends one unit,
/// each column takes at most one), solved as a min-cost flow with successive
/// Bellman-Ford shortest paths. The constraint matrix is totally unimodular,
/// so the flow optimum is the LP optimum.
pub fn min_cost_flow_assignment(cost: &[f64], rows: usize, cols: usize) -> f64 {
    let (src, sink) = (0, rows + cols + 1);
    let v = rows + cols + 2;
    let mut arcs: Vec<Arc> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); v];
    let mut add = |arcs: &mut Vec<Arc>, a: usize, b: usize, c: f64| {
        adj[a].push(arcs.len());
        arcs.push(Arc {
            to: b,
            cap: 1,
            cost: c,
        });
        adj[b].push(arcs.len());
        arcs.push(Arc {
            to: a,
            cap: 0,
            cost: -c,
        });
    };
    for r in 0..rows {
        add(&mut arcs, src, 1 + r, 0.0);
        for c in 0..cols {
            add(&mut arcs, 1 + r, 1 + rows + c, cost[r * cols + c]);
        }
    }
    for c in 0..cols {
        add(&mut arcs, 1 + rows + c, sink, 0.0);
    }
    let mut total = 0.0;
    for _ in 0..rows {
        let mut dist = vec![f64::INFINITY; v];
        let mut via = vec![usize::MAX; v];
        dist[src] = 0.0;
        for _ in 0..v - 1 {
            let mut changed = false;
            for a in 0..v {
                if dist[a] == f64::INFINITY {
                    continue;
                }
                for &k in &adj[a] {
                    let arc = &arcs[k];
                    if arc.cap > 0 && dist[a] + arc.cost < dist[arc.to] - 1e-15 {
                        dist[arc.to] = dist[a] + arc.cost;
                        via[arc.to] = k;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        assert!(dist[sink].is_finite(), "no augmenting path");
        let mut node = sink;
        while node != src {
            let k = via[node];
            arcs[k].cap -= 1;
            arcs[k ^ 1].cap += 1;
            total += arcs[k].cost;
            node = arcs[k ^ 1].to;
        }
    }
    total
}

/// `n` points at arc lengths `(i + 0.5) / n` of the total edge length,
/// walking edges in storage order.
pub fn arc_length_points(g: &SpatialGraph, n: usize) -> Vec<Vec<f64>> {
    let segs: Vec<(&[f64], &[f64])> = g
        .edges
        .iter()
        .map(|e| {
            (
                g.nodes[e.src].center.as_slice(),
                g.nodes[e.dst].center.as_slice(),
            )
        })
        .collect();
    let len = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let total: f64 = segs.iter().map(|(a, b)| len(a, b)).sum();
    assert!(total > 0.0);
    (0..n)
        .map(|i| {
            let mut s = (i as f64 + 0.5) / n as f64 * total;
            let mut k = 0;
            while k + 1 < segs.len() && s > len(segs[k].0, segs[k].1) {
                s -= len(segs[k].0, segs[k].1);
                k += 1;
            }
            let (a, b) = segs[k];
            let t = (s / len(a, b)).clamp(0.0, 1.0);
            a.iter().zip(b).map(|(p, q)| p + t * (q - p)).collect()
        })
        .collect()
}

/// Mean squared distance of the optimal matching between two equal clouds.
pub fn ot_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = a[i].iter().zip(&b[j]).map(|(p, q)| (p - q).powi(2)).sum();
        }
    }
    min_cost_flow_assignment(&cost, n, n) / n as f64
}

/// Multilinear interpolation of a channels-last grid at normalized `x`, with
/// cell centers at `(i + 0.5) / dims` and zeros outside the grid.
pub fn multilinear(feat: &[f64], channels: usize, dims: &[usize], x: &[f64]) -> Vec<f64> {
    let d = dims.len();
    let u: Vec<f64> = (0..d).map(|a| x[a] * dims[a] as f64 - 0.5).collect();
    let mut out = vec![0.0; channels];
    for corner in 0..1usize << d {
        let mut w = 1.0;
        let mut flat = 0usize;
        let mut stride = 1usize;
        let mut inside = true;
        for a in 0..d {
            let i = u[a].floor() + (corner >> a & 1) as f64;
            w *= 1.0 - (u[a] - i).abs();
            if i < 0.0 || i >= dims[a] as f64 {
                inside = false;
            } else {
                flat += i as usize * stride;
            }
            stride *= dims[a];
        }
        if inside {
            for c in 0..channels {
                out[c] += w * feat[flat * channels + c];
            }
        }
    }
    out
}
