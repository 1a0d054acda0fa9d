//! Evaluation metrics for spatial graphs and scene graphs.

mod detection;
mod freq;
mod sgdet;
mod smd;
mod topo;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use detection::{
    ap50, default_iou_thresholds, detection_map_mar, edge_instances, node_instances,
    precision_recall_curve, DetectionInstance, MapMar, DEFAULT_MAX_DETECTIONS,
};
pub use freq::{apply_frequency_bias, build_frequency_bias, FrequencyBias};
pub use sgdet::{sgdet_recall, RecallMode, Triplet};
pub use smd::{point_cloud_ot, sample_edge_points, street_mover_distance, DEFAULT_SMD_POINTS};
pub use topo::{topo_score, TopoScore, DEFAULT_NODE_TOL};

/// Metric report of one split; fields not applicable to a task are omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topo: Option<TopoScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node: Option<MapMar>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge: Option<MapMar>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sgdet: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap50: Option<f64>,
}

#[cfg(test)]
mod tests;
