use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::graph::{edge_to_box, BoundingBox, SpatialGraph};

pub const DEFAULT_MAX_DETECTIONS: usize = 100;

/// `0.5, 0.55, ..., 0.95`.
pub fn default_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionInstance {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub cls: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapMar {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mAR")]
    pub mar: f64,
}

/// One instance per node; `scores` defaults to 1.
pub fn node_instances(g: &SpatialGraph, scores: Option<&[f64]>) -> Vec<DetectionInstance> {
    g.nodes
        .iter()
        .enumerate()
        .map(|(i, n)| DetectionInstance {
            bbox: n.bbox.clone(),
            cls: n.cls,
            score: scores.map_or(1.0, |s| s[i]),
        })
        .collect()
}

/// One instance per edge via its edge box. With `class_agnostic` every edge
/// gets class 1, otherwise its relation label.
pub fn edge_instances(
    g: &SpatialGraph,
    scores: Option<&[f64]>,
    min_width: f64,
    class_agnostic: bool,
) -> Vec<DetectionInstance> {
    g.edges
        .iter()
        .enumerate()
        .map(|(i, e)| DetectionInstance {
            bbox: edge_to_box(g, e, min_width),
            cls: if class_agnostic { 1 } else { e.rln },
            score: scores.map_or(1.0, |s| s[i]),
        })
        .collect()
}

/// Area under the precision envelope over all recall points.
fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        prec.push(hits as f64 / (k + 1) as f64);
        rec.push(hits as f64 / n_gt as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut last = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        if *r > last {
            ap += (r - last) * p;
            last = *r;
        }
    }
    ap
}

/// Greedy score-ordered matching of one class at one IoU threshold.
/// Returns the true-positive flag of every ranked prediction.
fn match_class(
    ranked: &[(usize, &DetectionInstance)],
    gts: &[Vec<DetectionInstance>],
    cls: usize,
    thr: f64,
) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .iter()
        .map(|(img, p)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[*img].iter().enumerate() {
                if g.cls != cls || used[*img][j] {
                    continue;
                }
                let iou = p.bbox.iou(&g.bbox);
                if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[*img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// The `max_dets` best predictions of every image, ranked by score across
/// images. Ties keep image order, then per-image rank.
fn rank(
    preds: &[Vec<DetectionInstance>],
    n_images: usize,
    max_dets: usize,
) -> Vec<(usize, &DetectionInstance)> {
    let mut kept = Vec::new();
    for (img, p) in preds.iter().enumerate().take(n_images) {
        let mut order: Vec<&DetectionInstance> = p.iter().collect();
        order.sort_by(|a, b| b.score.total_cmp(&a.score));
        kept.extend(order.into_iter().take(max_dets).map(|d| (img, d)));
    }
    kept.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    kept
}

/// Per-threshold, per-class AP and recall, averaged over both.
///
/// Each image keeps its `max_dets` highest-scoring predictions. Classes
/// absent from the ground truth are skipped; with no ground truth at all
/// both numbers are 0.
pub fn detection_map_mar(
    preds: &[Vec<DetectionInstance>],
    gts: &[Vec<DetectionInstance>],
    iou_thresholds: &[f64],
    max_dets: usize,
) -> MapMar {
    let classes: BTreeSet<usize> = gts.iter().flatten().map(|g| g.cls).collect();
    if classes.is_empty() || iou_thresholds.is_empty() {
        return MapMar { map: 0.0, mar: 0.0 };
    }
    let kept = rank(preds, gts.len(), max_dets);

    let (mut ap_sum, mut ar_sum, mut count) = (0.0, 0.0, 0usize);
    for &thr in iou_thresholds {
        for &cls in &classes {
            let n_gt = gts.iter().flatten().filter(|g| g.cls == cls).count();
            let ranked: Vec<(usize, &DetectionInstance)> =
                kept.iter().copied().filter(|(_, d)| d.cls == cls).collect();
            let tp = match_class(&ranked, gts, cls, thr);
            ap_sum += interpolated_ap(&tp, n_gt);
            ar_sum += tp.iter().filter(|t| **t).count() as f64 / n_gt as f64;
            count += 1;
        }
    }
    MapMar {
        map: ap_sum / count as f64,
        mar: ar_sum / count as f64,
    }
}

/// AP at IoU 0.5.
pub fn ap50(preds: &[Vec<DetectionInstance>], gts: &[Vec<DetectionInstance>]) -> f64 {
    detection_map_mar(preds, gts, &[0.5], DEFAULT_MAX_DETECTIONS).map
}

/// `(recall, precision)` after every ranked prediction at one IoU threshold,
/// all classes pooled.
pub fn precision_recall_curve(
    preds: &[Vec<DetectionInstance>],
    gts: &[Vec<DetectionInstance>],
    iou_threshold: f64,
    max_dets: usize,
) -> Vec<(f64, f64)> {
    let n_gt = gts.iter().map(Vec::len).sum::<usize>();
    if n_gt == 0 {
        return Vec::new();
    }
    let classes: BTreeSet<usize> = gts.iter().flatten().map(|g| g.cls).collect();
    let ranked = rank(preds, gts.len(), max_dets);
    let mut flags = vec![false; ranked.len()];
    for &cls in &classes {
        let idx: Vec<usize> = (0..ranked.len())
            .filter(|&k| ranked[k].1.cls == cls)
            .collect();
        let sub: Vec<(usize, &DetectionInstance)> = idx.iter().map(|&k| ranked[k]).collect();
        for (k, tp) in idx
            .into_iter()
            .zip(match_class(&sub, gts, cls, iou_threshold))
        {
            flags[k] = tp;
        }
    }
    let mut hits = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            hits += t as usize;
            (hits as f64 / n_gt as f64, hits as f64 / (k + 1) as f64)
        })
        .collect()
}
