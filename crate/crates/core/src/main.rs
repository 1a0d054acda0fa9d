use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use rgl::harness::{
    evaluate_oracle, load_trained, predict, predict_split, score_predictions, train,
    write_artifacts, PredictedGraph, RunConfig,
};
use rgl::synth::{generate_dataset, load_png, load_split, Manifest, Split};

/// Image-to-graph generation: synthetic data, training, evaluation and
/// prediction.
#[derive(Parser, Debug)]
#[command(name = "rgl", version)]
struct Cli {
    /// Run configuration (JSON). Missing fields take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Overrides the config seed; falls back to the RGL_SEED variable.
    #[arg(long, global = true, env = "RGL_SEED")]
    seed: Option<u64>,

    /// Output location: dataset dir (generate), run dir (train), report dir
    /// (evaluate) or graph JSON file (predict).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (PNG images, graph JSON, manifest).
    Generate,
    /// Train a model on the dataset under `data.root`.
    Train,
    /// Evaluate a checkpoint on one split and write a report with plots.
    Evaluate {
        /// Checkpoint to evaluate (not needed with --oracle).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Split to evaluate: train, val or test.
        #[arg(long, default_value = "test")]
        split: Split,
        /// Score the ground truth against itself.
        #[arg(long)]
        oracle: bool,
    },
    /// Predict the graph of one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Grayscale PNG input.
        #[arg(long)]
        image: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let Some(path) = &cli.config else {
        bail!("--config <FILE> is required");
    };
    let mut cfg =
        RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.data.generate.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli, cfg: RunConfig) -> Result<()> {
    match cli.command {
        Command::Generate => {
            let out = cli.out.unwrap_or_else(|| cfg.data.root.clone());
            let m = generate_dataset(&cfg.data.generate, &out)?;
            println!(
                "wrote {} images to {} (train {}, val {}, test {})",
                m.entries.len(),
                out.display(),
                m.count(Split::Train),
                m.count(Split::Val),
                m.count(Split::Test)
            );
        }
        Command::Train => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("runs/train"));
            let o = train(&cfg, &out)?;
            let last = o.steps.last().map(|s| s.loss.total).unwrap_or(f64::NAN);
            println!("{} steps, final loss {last:.6}", o.steps.len());
            println!("final checkpoint {}", o.final_checkpoint.display());
            if let Some(b) = o.best_checkpoint {
                println!("best checkpoint {}", b.display());
            }
        }
        Command::Evaluate {
            checkpoint,
            split,
            oracle,
        } => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("runs/eval"));
            let mp = cfg.data.manifest();
            cfg.check_dataset(&Manifest::load(&mp)?.config)?;
            let samples = load_split(&mp, split)?;
            let (report, preds) = if oracle {
                let r = evaluate_oracle(&samples, &cfg)?;
                let p = samples
                    .iter()
                    .map(|s| PredictedGraph::oracle(&s.graph, cfg.model.num_relations))
                    .collect();
                (r, p)
            } else {
                let Some(ck) = checkpoint else {
                    bail!("evaluate needs --checkpoint unless --oracle is given");
                };
                let (model, bias) = load_trained(&ck, &cfg)?;
                let sp = predict_split(&model, &samples, &cfg, bias.as_ref())?;
                (score_predictions(&sp, &samples, &cfg)?, sp.preds)
            };
            write_artifacts(&out, &report, &preds, &samples, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Predict { checkpoint, image } => {
            let (model, bias) = load_trained(&checkpoint, &cfg)?;
            let img = load_png(&image)?;
            let g = predict(&model, &img, &cfg.task, bias.as_ref())?;
            let text = g.graph.to_json()?;
            match cli.out {
                Some(p) => {
                    fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?
                }
                None => println!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match run(cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
