use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DEFAULT_EDGE_MIN_WIDTH, DEFAULT_NODE_BOX_WIDTH};
use crate::matching::{LossCoefficients, MatchCoefficients};
use crate::metrics::{DEFAULT_MAX_DETECTIONS, DEFAULT_NODE_TOL, DEFAULT_SMD_POINTS};
use crate::model::ModelConfig;
use crate::synth::GenConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// The learning rate is multiplied by `lr_gamma` at each of these epochs.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_gamma: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            lr_drop_epochs: vec![40],
            lr_gamma: 0.1,
            grad_clip: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset directory written by `generate` and read by `train`/`evaluate`.
    pub root: PathBuf,
    pub generate: GenConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            generate: GenConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub directed: bool,
    /// Scene-graph task: class-wise edges, SGDet recalls, recall@50 selection.
    pub spatio_semantic: bool,
    pub use_frequency_bias: bool,
    /// Δx, full width of the virtual node boxes.
    pub node_box_width: f64,
    pub min_edge_width: f64,
    pub node_threshold: f64,
    pub rln_threshold: f64,
    /// Background relation pairs sampled per valid one.
    pub background_ratio: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            directed: false,
            spatio_semantic: false,
            use_frequency_bias: false,
            node_box_width: DEFAULT_NODE_BOX_WIDTH,
            min_edge_width: DEFAULT_EDGE_MIN_WIDTH,
            node_threshold: 0.5,
            rln_threshold: 0.5,
            background_ratio: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub smd_points: usize,
    pub node_tol: f64,
    pub max_detections: usize,
    /// Validation every this many epochs during training; 0 disables.
    pub every_epochs: usize,
    /// Qualitative overlays written by `evaluate`.
    pub overlays: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            smd_points: DEFAULT_SMD_POINTS,
            node_tol: DEFAULT_NODE_TOL,
            max_detections: DEFAULT_MAX_DETECTIONS,
            every_epochs: 1,
            overlays: 4,
        }
    }
}

/// Everything a run needs; mirrors the JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(rename = "match")]
    pub matching: MatchCoefficients,
    pub loss: LossCoefficients,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Mirror each training image (and its graph) along every axis with
    /// probability 1/2.
    pub flip_augment: bool,
    pub data: DataConfig,
    pub task: TaskConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            matching: MatchCoefficients::default(),
            loss: LossCoefficients::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 4,
            epochs: 50,
            flip_augment: true,
            data: DataConfig::default(),
            task: TaskConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                o.lr
            )));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if o.weight_decay < 0.0 || o.eps <= 0.0 || o.grad_clip < 0.0 {
            return Err(Error::Config(
                "weight_decay, eps and grad_clip must be non-negative".into(),
            ));
        }
        for t in [self.task.node_threshold, self.task.rln_threshold] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
            }
        }
        if self.task.node_box_width <= 0.0 || self.task.min_edge_width < 0.0 {
            return Err(Error::Config("box widths must be positive".into()));
        }
        self.model.validate()?;
        self.matching.validate()?;
        self.loss.validate()
    }

    /// Fails when a dataset was generated for different images or graphs
    /// than the model expects.
    pub fn check_dataset(&self, gen: &GenConfig) -> Result<()> {
        if gen.image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "dataset image_size {} differs from model image_size {}",
                gen.image_size, self.model.image_size
            )));
        }
        if self.model.dim != 2 || self.model.in_channels != 1 {
            return Err(Error::Config(
                "synthetic datasets are single-channel 2D images".into(),
            ));
        }
        Ok(())
    }
}
