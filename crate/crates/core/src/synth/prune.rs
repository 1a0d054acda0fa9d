use crate::graph::{Node, SpatialGraph};

/// Undirected angle in degrees between segments `b`–`a` and `b`–`c`;
/// 180° means the three points are collinear with `b` in the middle.
pub fn node_angle_deg(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let u: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let v: Vec<f64> = c.iter().zip(b).map(|(x, y)| x - y).collect();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    let cos = u.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() / (nu * nv);
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Removes degree-2 nodes whose two segments meet at `keep_angle_below_deg`
/// or more, joining their neighbours directly, until nothing changes.
///
/// A node is kept when its neighbours are already adjacent (merging would
/// duplicate an edge). Surviving node positions are untouched.
pub fn prune_degree2(g: &SpatialGraph, keep_angle_below_deg: f64) -> SpatialGraph {
    let mut nodes: Vec<Option<Node>> = g.nodes.iter().cloned().map(Some).collect();
    let mut edges: Vec<Option<(usize, usize, usize)>> = g
        .edges
        .iter()
        .map(|e| Some((e.src, e.dst, e.rln)))
        .collect();

    loop {
        let mut incident: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
        for (k, e) in edges.iter().enumerate() {
            if let Some((s, d, _)) = e {
                incident[*s].push(k);
                incident[*d].push(k);
            }
        }
        let mut changed = false;
        for b in 0..nodes.len() {
            if nodes[b].is_none() || incident[b].len() != 2 {
                continue;
            }
            let (e1, e2) = (incident[b][0], incident[b][1]);
            let (s1, d1, rln) = edges[e1].unwrap();
            let (s2, d2, _) = edges[e2].unwrap();
            let a = if s1 == b { d1 } else { s1 };
            let c = if s2 == b { d2 } else { s2 };
            if a == c {
                continue;
            }
            let adjacent = edges
                .iter()
                .flatten()
                .any(|&(s, d, _)| (s == a && d == c) || (s == c && d == a));
            if adjacent {
                continue;
            }
            let angle = node_angle_deg(
                &nodes[a].as_ref().unwrap().center,
                &nodes[b].as_ref().unwrap().center,
                &nodes[c].as_ref().unwrap().center,
            );
            if angle >= keep_angle_below_deg {
                edges[e1] = None;
                edges[e2] = None;
                let (src, dst) = if g.directed {
                    if d1 == b {
                        (a, c)
                    } else {
                        (c, a)
                    }
                } else {
                    (a.min(c), a.max(c))
                };
                edges.push(Some((src, dst, rln)));
                nodes[b] = None;
                changed = true;
                break;
            }
        }
        if !changed {
            break;
        }
    }

    let mut remap = vec![usize::MAX; nodes.len()];
    let mut out = SpatialGraph::new(g.dim, g.directed);
    for (i, n) in nodes.into_iter().enumerate() {
        if let Some(n) = n {
            remap[i] = out.nodes.len();
            out.nodes.push(n);
        }
    }
    for (s, d, r) in edges.into_iter().flatten() {
        out.add_edge(remap[s], remap[d], r);
    }
    out
}
