//! The `nabla` command: train, evaluate, predict, inspect, synth.
//!
//! Every subcommand exits 0 on success; failures print a single
//! `error: ...` line to stderr and exit nonzero.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use nabla_train::checkpoint::{Checkpoint, OptimSnapshot};
use nabla_train::config::{describe_spec, RunConfig};
use nabla_train::error::Result;
use nabla_train::synth;
use nabla_train::trainer;

#[derive(Parser)]
#[command(name = "nabla", version, about = "Multi-decoder segmentation and recurrent-inception classification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a JSON run config.
    Train {
        /// JSON file mirroring the RunConfig fields.
        #[arg(long)]
        config: PathBuf,
        /// key=value settings layered over the file, repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint against a dataset directory.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding images/ plus masks/ or labels.csv.
        #[arg(long)]
        data: PathBuf,
        /// Sigmoid cut for binarizing segmentation outputs.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Write the CSV report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one image and render mask plus contour overlay.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Ground-truth mask to overlay in green.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Print the spec, recipe, parameter count, and per-layer shapes.
    Inspect {
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic dataset (lesions, or gratings with --classes).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        /// Square edge length in pixels.
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Emit a labeled classification set with this many classes.
        #[arg(long)]
        classes: Option<usize>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn layer_lines(tensors: impl Iterator<Item = (String, [usize; 4], bool)>) -> String {
    let mut s = String::from("layers:\n");
    for (name, shape, trainable) in tensors {
        let kind = if trainable { "trainable" } else { "fixed" };
        s.push_str(&format!("  {name} {shape:?} {kind}\n"));
    }
    s
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train { config, overrides } => {
            let mut cfg = RunConfig::from_file(&config)?;
            for kv in &overrides {
                cfg.apply_override(kv)?;
            }
            let outcome = trainer::train(&cfg)?;
            if let Some(report) = &outcome.transfer {
                println!("transfer: loaded {} skipped {}", report.loaded.len(), report.skipped.len());
            }
            if let Some(row) = outcome.log.rows.last() {
                println!(
                    "epoch {}: train_loss {} train_accuracy {} val_accuracy {}",
                    row.epoch, row.train_loss, row.train_accuracy, row.val_accuracy
                );
            }
            println!("final checkpoint: {}", outcome.final_checkpoint.display());
            println!("best checkpoint: {}", outcome.best_checkpoint.display());
            println!("log: {}", outcome.log_path.display());
            Ok(())
        }
        Cmd::Evaluate { checkpoint, data, threshold, out } => {
            let outcome = trainer::evaluate(&checkpoint, &data, threshold)?;
            let csv = outcome.to_csv();
            match out {
                Some(path) => {
                    std::fs::write(&path, csv).map_err(|e| nabla_train::Error::io(&path, e))?;
                    println!("report: {}", path.display());
                }
                None => print!("{csv}"),
            }
            Ok(())
        }
        Cmd::Predict { checkpoint, image, gt, out, threshold } => {
            let outcome = trainer::predict(&checkpoint, &image, gt.as_deref(), &out, threshold)?;
            println!("mask: {}", outcome.mask_path.display());
            println!("overlay: {}", outcome.overlay_path.display());
            Ok(())
        }
        Cmd::Inspect { checkpoint, config } => {
            if let Some(path) = checkpoint {
                let ckpt = Checkpoint::load(&path)?;
                print!("{}", describe_spec(&ckpt.spec));
                println!("epoch: {}", ckpt.epoch);
                match &ckpt.optimizer {
                    Some(OptimSnapshot::Adam { step, .. }) => println!("optimizer state: adam step {step}"),
                    Some(OptimSnapshot::Sgd { .. }) => println!("optimizer state: sgd momentum buffers"),
                    None => println!("optimizer state: none"),
                }
                let trainable: usize =
                    ckpt.tensors.iter().filter(|t| t.trainable).map(|t| t.values.len()).sum();
                println!("trainable parameters: {trainable}");
                print!(
                    "{}",
                    layer_lines(ckpt.tensors.iter().map(|t| (t.name.clone(), t.shape.0, t.trainable)))
                );
            } else if let Some(path) = config {
                let cfg = RunConfig::from_file(&path)?;
                print!("{}", cfg.describe());
                let model: nabla_core::model::Model<f32> =
                    nabla_core::model::Model::build(&cfg.model_spec(), cfg.seed)?;
                print!(
                    "{}",
                    layer_lines(
                        model
                            .params
                            .iter()
                            .map(|(_, e)| (e.name.clone(), e.value.shape().0, e.trainable))
                    )
                );
            }
            Ok(())
        }
        Cmd::Synth { out, n, size, seed, classes } => {
            match classes {
                Some(k) => {
                    let records = synth::synth_classes(n, size, size, k, seed)?;
                    synth::write_cls_dataset(&out, &records)?;
                    println!("wrote {n} labeled images ({k} classes) under {}", out.display());
                }
                None => {
                    let records: Vec<_> =
                        synth::synth_lesions(n, size, size, seed)?.into_iter().map(|(r, _)| r).collect();
                    synth::write_seg_dataset(&out, &records)?;
                    println!("wrote {n} image/mask pairs under {}", out.display());
                }
            }
            Ok(())
        }
    }
}
