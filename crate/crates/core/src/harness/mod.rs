//! Training, prediction and evaluation driven by a JSON run config.

mod config;
mod evaluate;
mod optim;
mod plot;
mod predict;
mod train;

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::FrequencyBias;
use crate::model::{load_checkpoint, Model};

pub use config::{DataConfig, EvalConfig, OptimizerConfig, RunConfig, TaskConfig};
pub use evaluate::{
    compute_metrics, evaluate_model, evaluate_oracle, predict_split, score_predictions,
    write_artifacts, EvalReport, SplitPredictions,
};
pub use optim::{clip_grad_norm, AdamW};
pub use plot::{draw_graph, pr_curve_png, Canvas};
pub use predict::{predict, PredictedGraph};
pub use train::{sample_gradients, train, train_on, StepLog, TrainOutcome, ValLog};

/// Loads a checkpoint written by training together with its frequency bias.
///
/// Fails when the checkpoint's model differs from `cfg.model` in anything
/// but the init seed.
pub fn load_trained(path: &Path, cfg: &RunConfig) -> Result<(Model, Option<FrequencyBias>)> {
    let (model, meta) = load_checkpoint(path)?;
    let mut want = cfg.model.clone();
    want.init_seed = model.cfg.init_seed;
    if model.cfg != want {
        return Err(Error::Checkpoint(format!(
            "{}: model config differs from the run config",
            path.display()
        )));
    }
    let bias = match meta.get("frequency_bias") {
        Some(v) if !v.is_null() => Some(serde_json::from_value(v.clone())?),
        _ => None,
    };
    Ok((model, bias))
}
