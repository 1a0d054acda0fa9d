use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::matching::{hungarian_match, match_cost, sample_relations, total_loss, LossBreakdown};
use crate::metrics::{build_frequency_bias, FrequencyBias, MetricsReport};
use crate::model::{save_checkpoint, Model};
use crate::params::ParamId;
use crate::synth::{load_split, Manifest, Sample, Split};
use crate::tensor::Tensor;

use super::config::RunConfig;
use super::evaluate::evaluate_model;
use super::optim::{clip_grad_norm, AdamW};

/// One optimizer step as written to the JSON-lines log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValLog {
    pub epoch: usize,
    pub metrics: MetricsReport,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine<'a> {
    Step(&'a StepLog),
    Val(&'a ValLog),
}

pub struct TrainOutcome {
    pub model: Model,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub log: PathBuf,
    pub steps: Vec<StepLog>,
    pub val: Vec<ValLog>,
    pub frequency_bias: Option<FrequencyBias>,
}

/// Loss and parameter gradients of one training image.
pub fn sample_gradients(
    model: &Model,
    sample: &Sample,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<(LossBreakdown, Vec<(ParamId, Tensor)>)> {
    let mut t = Tape::new(&model.params);
    let out = model.forward(&mut t, &sample.image)?;
    let cost = match_cost(
        t.value(out.cls_logits),
        t.value(out.boxes),
        &sample.graph,
        &cfg.matching,
    )?;
    let assignment = hungarian_match(&cost)?;
    let samples = sample_relations(&sample.graph, &assignment, rng, cfg.task.background_ratio);
    let rel = if samples.pairs.is_empty() {
        None
    } else {
        Some(model.relation_head(&mut t, &out, &samples.token_pairs())?)
    };
    let loss = total_loss(
        &mut t,
        &out,
        rel,
        &sample.graph,
        &assignment,
        &samples,
        &cfg.loss,
        step,
    )?;
    let grads = t.backward(loss.total);
    let list = grads.params().map(|(id, g)| (id, g.clone())).collect();
    Ok((loss.breakdown, list))
}

fn check_samples(cfg: &RunConfig, samples: &[Sample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let g = &s.graph;
        if g.dim != cfg.model.dim {
            return Err(Error::Config(format!(
                "sample {i}: graph is {}D, model is {}D",
                g.dim, cfg.model.dim
            )));
        }
        if g.directed != cfg.task.directed {
            return Err(Error::Config(format!(
                "sample {i}: graph directed={} but task directed={}",
                g.directed, cfg.task.directed
            )));
        }
        if g.nodes.len() > cfg.model.num_obj_tokens {
            return Err(Error::Config(format!(
                "sample {i}: {} nodes exceed {} object tokens",
                g.nodes.len(),
                cfg.model.num_obj_tokens
            )));
        }
        if let Some(n) = g.nodes.iter().find(|n| n.cls > cfg.model.num_classes) {
            return Err(Error::Config(format!(
                "sample {i}: node class {} out of range",
                n.cls
            )));
        }
        if let Some(e) = g.edges.iter().find(|e| e.rln >= cfg.model.num_relations) {
            return Err(Error::Config(format!(
                "sample {i}: relation {} out of range",
                e.rln
            )));
        }
    }
    Ok(())
}

/// Lower is better for SMD, higher for recall@50.
fn selection_score(cfg: &RunConfig, m: &MetricsReport) -> Option<f64> {
    if cfg.task.spatio_semantic {
        m.sgdet.as_ref().and_then(|s| s.get("R@50")).copied()
    } else {
        m.smd.map(|v| -v)
    }
}

/// Trains from the manifest under `cfg.data.root`.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mp = cfg.data.manifest();
    let manifest = Manifest::load(&mp)?;
    cfg.check_dataset(&manifest.config)?;
    let train = load_split(&mp, Split::Train)?;
    let val = load_split(&mp, Split::Val)?;
    if train.is_empty() {
        return Err(Error::Config(format!(
            "{}: empty training split",
            mp.display()
        )));
    }
    train_on(cfg, &train, &val, out_dir)
}

/// Trains on in-memory samples, writing `train_log.jsonl`, `best.ckpt` and
/// `final.ckpt` into `out_dir`.
pub fn train_on(
    cfg: &RunConfig,
    train: &[Sample],
    val: &[Sample],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_samples(cfg, train)?;
    check_samples(cfg, val)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut model_cfg = cfg.model.clone();
    model_cfg.init_seed = cfg.seed;
    let mut model = Model::new(model_cfg)?;
    let mut opt = AdamW::new(cfg.optimizer.clone(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bias = cfg.task.use_frequency_bias.then(|| {
        let graphs: Vec<_> = train.iter().map(|s| s.graph.clone()).collect();
        build_frequency_bias(&graphs, cfg.model.num_classes + 1, cfg.model.num_relations)
    });

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut emit = |line: LogLine| -> Result<()> {
        serde_json::to_writer(&mut log, &line)?;
        log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))
    };

    let meta = |epoch: usize, step: usize| {
        serde_json::json!({
            "run_config": cfg,
            "epoch": epoch,
            "step": step,
            "frequency_bias": bias,
        })
    };
    let best_path = out_dir.join("best.ckpt");
    let mut best: Option<f64> = None;
    let mut steps = Vec::new();
    let mut vals = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = opt.lr_at(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Tensor> = model
                .params
                .ids()
                .map(|id| Tensor::zeros(&model.params.get(id).shape))
                .collect();
            let mut sum = LossBreakdown {
                reg: 0.0,
                giou: 0.0,
                cls: 0.0,
                rln: 0.0,
                total: 0.0,
            };
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let flipped;
                let sample = if cfg.flip_augment {
                    let axes: Vec<bool> = (0..cfg.model.dim).map(|_| rng.gen_bool(0.5)).collect();
                    flipped = train[i].flipped(&axes);
                    &flipped
                } else {
                    &train[i]
                };
                let (b, g) = sample_gradients(&model, sample, cfg, &mut rng, step)?;
                for (id, gt) in g {
                    for (a, v) in grads[id.0].data.iter_mut().zip(&gt.data) {
                        *a += w * v;
                    }
                }
                sum.reg += w * b.reg;
                sum.giou += w * b.giou;
                sum.cls += w * b.cls;
                sum.rln += w * b.rln;
                sum.total += w * b.total;
            }
            let grad_norm = clip_grad_norm(&mut grads, cfg.optimizer.grad_clip);
            opt.step(&mut model.params, &grads, lr);
            let entry = StepLog {
                step,
                epoch,
                lr,
                loss: sum,
                grad_norm,
            };
            emit(LogLine::Step(&entry))?;
            steps.push(entry);
            step += 1;
        }

        let due = cfg.eval.every_epochs > 0
            && ((epoch + 1) % cfg.eval.every_epochs == 0 || epoch + 1 == cfg.epochs);
        if due && !val.is_empty() {
            let report = evaluate_model(&model, val, cfg, bias.as_ref())?;
            let v = ValLog {
                epoch,
                metrics: report.metrics,
            };
            emit(LogLine::Val(&v))?;
            if let Some(s) = selection_score(cfg, &v.metrics) {
                if best.is_none_or(|b| s > b) {
                    best = Some(s);
                    save_checkpoint(&best_path, &model, meta(epoch, step))?;
                }
            }
            vals.push(v);
        }
    }
    let final_path = out_dir.join("final.ckpt");
    save_checkpoint(&final_path, &model, meta(cfg.epochs, step))?;
    Ok(TrainOutcome {
        model,
        final_checkpoint: final_path,
        best_checkpoint: best.map(|_| best_path),
        log: log_path,
        steps,
        val: vals,
        frequency_bias: bias,
    })
}
