use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::detection::DetectionInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallMode {
    Graph,
    NoGraph,
    Mean,
}

/// A subject-predicate-object prediction. `pair` identifies the two
/// instances within their image so predicates of one pair can be grouped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub subj: DetectionInstance,
    pub obj: DetectionInstance,
    pub pair: (usize, usize),
    pub predicate: usize,
    pub score: f64,
}

impl Triplet {
    /// Score is the product of subject, object and predicate scores.
    pub fn new(
        subj: DetectionInstance,
        obj: DetectionInstance,
        pair: (usize, usize),
        predicate: usize,
        predicate_score: f64,
    ) -> Self {
        let score = subj.score * obj.score * predicate_score;
        Self {
            subj,
            obj,
            pair,
            predicate,
            score,
        }
    }
}

fn same_instance(p: &DetectionInstance, g: &DetectionInstance) -> bool {
    p.cls == g.cls && p.bbox.iou(&g.bbox) >= 0.5
}

fn hits(p: &Triplet, g: &Triplet) -> bool {
    p.predicate == g.predicate && same_instance(&p.subj, &g.subj) && same_instance(&p.obj, &g.obj)
}

/// Top-`k` candidates of one image.
///
/// Pairs are ranked by their best predicate score. Graph mode keeps that
/// single predicate per pair; no-graph mode keeps every predicate of the
/// top-`k` pairs, so its candidates always contain the graph-mode ones.
fn top_k(preds: &[Triplet], k: usize, all_predicates: bool) -> Vec<&Triplet> {
    let mut best: BTreeMap<(usize, usize), &Triplet> = BTreeMap::new();
    let mut order: Vec<(usize, usize)> = Vec::new();
    for p in preds {
        match best.get(&p.pair) {
            None => {
                order.push(p.pair);
                best.insert(p.pair, p);
            }
            Some(b) if p.score > b.score => {
                best.insert(p.pair, p);
            }
            _ => {}
        }
    }
    let mut ranked: Vec<&Triplet> = order.iter().map(|k| best[k]).collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    ranked.truncate(k);
    if !all_predicates {
        return ranked;
    }
    let pairs: BTreeSet<(usize, usize)> = ranked.iter().map(|t| t.pair).collect();
    preds.iter().filter(|p| pairs.contains(&p.pair)).collect()
}

/// Per-image hit flags of the ground-truth triplets.
fn image_hits(preds: &[Triplet], gts: &[Triplet], k: usize, all_predicates: bool) -> Vec<bool> {
    let cand = top_k(preds, k, all_predicates);
    gts.iter()
        .map(|g| cand.iter().any(|p| hits(p, g)))
        .collect()
}

/// Mean over images containing at least one selected gt of the fraction hit.
fn averaged(flags: &[Vec<bool>], gts: &[Vec<Triplet>], keep: impl Fn(&Triplet) -> bool) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (f, g) in flags.iter().zip(gts) {
        let sel: Vec<bool> = f
            .iter()
            .zip(g)
            .filter(|(_, t)| keep(t))
            .map(|(h, _)| *h)
            .collect();
        if sel.is_empty() {
            continue;
        }
        sum += sel.iter().filter(|h| **h).count() as f64 / sel.len() as f64;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// SGDet recall@`k` averaged over images with ground truth.
///
/// A gt triplet is hit by a candidate with the same predicate whose subject
/// and object match in class with IoU ≥ 0.5. Mean mode averages the
/// graph-constrained recall of every predicate class present in `gts`.
pub fn sgdet_recall(
    preds: &[Vec<Triplet>],
    gts: &[Vec<Triplet>],
    k: usize,
    mode: RecallMode,
) -> f64 {
    let empty = Vec::new();
    let flags: Vec<Vec<bool>> = gts
        .iter()
        .enumerate()
        .map(|(i, g)| {
            image_hits(
                preds.get(i).unwrap_or(&empty),
                g,
                k,
                mode == RecallMode::NoGraph,
            )
        })
        .collect();
    match mode {
        RecallMode::Graph | RecallMode::NoGraph => averaged(&flags, gts, |_| true),
        RecallMode::Mean => {
            let classes: BTreeSet<usize> = gts.iter().flatten().map(|t| t.predicate).collect();
            if classes.is_empty() {
                return 0.0;
            }
            let total: f64 = classes
                .iter()
                .map(|&c| averaged(&flags, gts, |t| t.predicate == c))
                .sum();
            total / classes.len() as f64
        }
    }
}
