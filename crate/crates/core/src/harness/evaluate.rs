use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::metrics::{
    ap50, default_iou_thresholds, detection_map_mar, edge_instances, node_instances,
    precision_recall_curve, sgdet_recall, street_mover_distance, topo_score, DetectionInstance,
    FrequencyBias, MetricsReport, RecallMode, TopoScore, Triplet,
};
use crate::model::Model;
use crate::synth::Sample;

use super::config::RunConfig;
use super::plot::{draw_graph, pr_curve_png, Canvas, GREEN, RED, WHITE};
use super::predict::{predict, PredictedGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub metrics: MetricsReport,
    pub wall_clock_s: f64,
    pub fps: f64,
    /// Predicted node pairs closer than the TOPO tolerance.
    pub near_duplicate_nodes: usize,
}

/// All predictions of a split with their wall-clock time.
pub struct SplitPredictions {
    pub preds: Vec<PredictedGraph>,
    pub wall_clock_s: f64,
}

pub fn predict_split(
    model: &Model,
    samples: &[Sample],
    cfg: &RunConfig,
    bias: Option<&FrequencyBias>,
) -> Result<SplitPredictions> {
    let start = Instant::now();
    let preds = samples
        .iter()
        .map(|s| predict(model, &s.image, &cfg.task, bias))
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitPredictions {
        preds,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

fn triplets(
    g: &SpatialGraph,
    nodes: &[DetectionInstance],
    probs: &BTreeMap<(usize, usize), Vec<f64>>,
) -> Vec<Triplet> {
    let mut out = Vec::new();
    for (&(a, b), p) in probs {
        let mut orient = vec![(a, b)];
        if !g.directed {
            orient.push((b, a));
        }
        for (s, o) in orient {
            for (r, &score) in p.iter().enumerate().skip(1) {
                out.push(Triplet::new(
                    nodes[s].clone(),
                    nodes[o].clone(),
                    (s, o),
                    r,
                    score,
                ));
            }
        }
    }
    out
}

fn gt_triplets(g: &SpatialGraph) -> Vec<Triplet> {
    let nodes = node_instances(g, None);
    g.edges
        .iter()
        .map(|e| {
            Triplet::new(
                nodes[e.src].clone(),
                nodes[e.dst].clone(),
                (e.src, e.dst),
                e.rln,
                1.0,
            )
        })
        .collect()
}

/// Metrics of predictions against ground truth, image by image in order.
pub fn compute_metrics(
    preds: &[PredictedGraph],
    gts: &[SpatialGraph],
    cfg: &RunConfig,
) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} images",
            preds.len(),
            gts.len()
        )));
    }
    let n = gts.len().max(1) as f64;
    let semantic = cfg.task.spatio_semantic;
    let node_pred: Vec<_> = preds
        .iter()
        .map(|p| node_instances(&p.graph, Some(&p.node_scores)))
        .collect();
    let node_gt: Vec<_> = gts.iter().map(|g| node_instances(g, None)).collect();
    let thr = default_iou_thresholds();
    let max_dets = cfg.eval.max_detections;

    let mut report = MetricsReport::default();
    if semantic {
        let pt: Vec<_> = preds
            .iter()
            .zip(&node_pred)
            .map(|(p, nodes)| triplets(&p.graph, nodes, &p.relation_probs))
            .collect();
        let gt: Vec<_> = gts.iter().map(gt_triplets).collect();
        let mut s = BTreeMap::new();
        for k in [20, 50, 100] {
            s.insert(
                format!("R@{k}"),
                sgdet_recall(&pt, &gt, k, RecallMode::Graph),
            );
            s.insert(
                format!("mR@{k}"),
                sgdet_recall(&pt, &gt, k, RecallMode::Mean),
            );
            s.insert(
                format!("ngR@{k}"),
                sgdet_recall(&pt, &gt, k, RecallMode::NoGraph),
            );
        }
        report.sgdet = Some(s);
        report.ap50 = Some(ap50(&node_pred, &node_gt));
    } else {
        let mut smd = 0.0;
        let mut topo = TopoScore {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
        for (p, g) in preds.iter().zip(gts) {
            smd += street_mover_distance(&p.graph, g, cfg.eval.smd_points)?;
            let t = topo_score(&p.graph, g, cfg.eval.node_tol);
            topo.precision += t.precision;
            topo.recall += t.recall;
            topo.f1 += t.f1;
        }
        report.smd = Some(smd / n);
        report.topo = Some(TopoScore {
            precision: topo.precision / n,
            recall: topo.recall / n,
            f1: topo.f1 / n,
        });
    }
    report.node = Some(detection_map_mar(&node_pred, &node_gt, &thr, max_dets));
    let w = cfg.task.min_edge_width;
    let edge_pred: Vec<_> = preds
        .iter()
        .map(|p| edge_instances(&p.graph, Some(&p.edge_scores), w, !semantic))
        .collect();
    let edge_gt: Vec<_> = gts
        .iter()
        .map(|g| edge_instances(g, None, w, !semantic))
        .collect();
    report.edge = Some(detection_map_mar(&edge_pred, &edge_gt, &thr, max_dets));
    Ok(report)
}

/// Predicts every sample with `model` and scores the result.
pub fn evaluate_model(
    model: &Model,
    samples: &[Sample],
    cfg: &RunConfig,
    bias: Option<&FrequencyBias>,
) -> Result<EvalReport> {
    let sp = predict_split(model, samples, cfg, bias)?;
    score_predictions(&sp, samples, cfg)
}

/// Scores ground truth against itself through the same pipeline.
pub fn evaluate_oracle(samples: &[Sample], cfg: &RunConfig) -> Result<EvalReport> {
    let start = Instant::now();
    let preds: Vec<_> = samples
        .iter()
        .map(|s| PredictedGraph::oracle(&s.graph, cfg.model.num_relations))
        .collect();
    let sp = SplitPredictions {
        preds,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    score_predictions(&sp, samples, cfg)
}

pub fn score_predictions(
    sp: &SplitPredictions,
    samples: &[Sample],
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let gts: Vec<SpatialGraph> = samples.iter().map(|s| s.graph.clone()).collect();
    let metrics = compute_metrics(&sp.preds, &gts, cfg)?;
    let images = samples.len();
    let fps = if sp.wall_clock_s > 0.0 {
        images as f64 / sp.wall_clock_s
    } else {
        f64::INFINITY
    };
    Ok(EvalReport {
        images,
        metrics,
        wall_clock_s: sp.wall_clock_s,
        fps,
        near_duplicate_nodes: sp
            .preds
            .iter()
            .map(|p| p.near_duplicates(cfg.eval.node_tol))
            .sum(),
    })
}

/// Writes `report.json`, `pr_curve_nodes.png` and overlay images into
/// `out_dir`.
pub fn write_artifacts(
    out_dir: &Path,
    report: &EvalReport,
    preds: &[PredictedGraph],
    samples: &[Sample],
    cfg: &RunConfig,
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rp = out_dir.join("report.json");
    fs::write(&rp, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&rp, e))?;

    let node_pred: Vec<_> = preds
        .iter()
        .map(|p| node_instances(&p.graph, Some(&p.node_scores)))
        .collect();
    let node_gt: Vec<_> = samples
        .iter()
        .map(|s| node_instances(&s.graph, None))
        .collect();
    let curve = precision_recall_curve(&node_pred, &node_gt, 0.5, cfg.eval.max_detections);
    pr_curve_png(&out_dir.join("pr_curve_nodes.png"), &curve, 320)?;

    for (i, (p, s)) in preds
        .iter()
        .zip(samples)
        .take(cfg.eval.overlays)
        .enumerate()
    {
        if s.image.dims.len() != 2 {
            continue;
        }
        let mut c = Canvas::from_image(&s.image, 4);
        draw_graph(&mut c, &s.graph, GREEN, GREEN);
        draw_graph(&mut c, &p.graph, RED, WHITE);
        c.save(&out_dir.join(format!("overlay_{i:03}.png")))?;
    }
    Ok(())
}
