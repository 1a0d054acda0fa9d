use serde::{Deserialize, Serialize};

use crate::autograd::log_sum_exp;
use crate::graph::SpatialGraph;

/// Log-prior over relation labels for every (subject class, object class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBias {
    pub num_classes: usize,
    pub num_relations: usize,
    /// `[C, C, L]`, row-major.
    pub table: Vec<f64>,
}

impl FrequencyBias {
    /// Bias row for a class pair; pairs outside the table get a uniform row.
    pub fn row(&self, subj_cls: usize, obj_cls: usize) -> Vec<f64> {
        let c = self.num_classes;
        if subj_cls >= c || obj_cls >= c {
            return vec![-(self.num_relations as f64).ln(); self.num_relations];
        }
        let at = (subj_cls * c + obj_cls) * self.num_relations;
        self.table[at..at + self.num_relations].to_vec()
    }
}

/// Counts relation labels per ordered class pair over the training graphs,
/// adds 1 to every cell and takes a log-softmax over labels.
///
/// Ordered node pairs without an edge count towards label 0. Undirected
/// edges count in both orders.
pub fn build_frequency_bias(
    graphs: &[SpatialGraph],
    num_classes: usize,
    num_relations: usize,
) -> FrequencyBias {
    let (c, l) = (num_classes, num_relations);
    let mut counts = vec![1.0; c * c * l];
    let mut bump = |s: usize, o: usize, r: usize| {
        if s < c && o < c && r < l {
            counts[(s * c + o) * l + r] += 1.0;
        }
    };
    for g in graphs {
        let n = g.nodes.len();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let rel = g.edges.iter().find(|e| {
                    (e.src == i && e.dst == j) || (!g.directed && e.src == j && e.dst == i)
                });
                bump(g.nodes[i].cls, g.nodes[j].cls, rel.map_or(0, |e| e.rln));
            }
        }
    }
    for row in counts.chunks_mut(l.max(1)) {
        let lse = log_sum_exp(row);
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    FrequencyBias {
        num_classes: c,
        num_relations: l,
        table: counts,
    }
}

/// Adds the bias row of `(subj_cls, obj_cls)` to relation logits.
pub fn apply_frequency_bias(
    logits: &[f64],
    subj_cls: usize,
    obj_cls: usize,
    bias: &FrequencyBias,
) -> Vec<f64> {
    logits
        .iter()
        .zip(bias.row(subj_cls, obj_cls))
        .map(|(a, b)| a + b)
        .collect()
}
