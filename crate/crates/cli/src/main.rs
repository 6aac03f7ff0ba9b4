use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nucleo::autodiff::OpKind;
use nucleo::config::RunConfig;
use nucleo::data::{discover_ids, make_synth, split_dataset};
use nucleo::pipeline::commands::{
    cmd_eval, cmd_export_rle, cmd_gradcheck, cmd_infer, eval_summary, gradcheck_table, PredictionSource, Subset,
};
use nucleo::pipeline::{train, TrainedModel};
use nucleo::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "nucleo", version, about = "Desk-scale Mask R-CNN for nucleus segmentation")]
struct Cli {
    /// Run configuration (flat `key = value` file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `dataset_root` from the config.
    #[arg(long, global = true)]
    dataset_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic nucleus dataset in the DSB layout.
    MakeSynth {
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print or write the train/val/test split.
    Split {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train with the three-stage schedule.
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect nuclei in images and write overlays, detections and RLE.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// PNG files or sample directories.
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Score a checkpoint or a submission file against ground truth.
    Eval {
        #[arg(long, conflicts_with = "rle", required_unless_present = "rle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        rle: Option<PathBuf>,
        /// train, val, test or all.
        #[arg(long, default_value = "test")]
        subset: Subset,
        /// Per-image CSV report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a DSB submission file for a subset.
    ExportRle {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        subset: Subset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        /// Deliberately break one op's backward pass (harness self-test).
        #[arg(long)]
        corrupt: Option<String>,
    },
}

/// Usage errors exit with 1, everything else maps through [`Error::exit_code`].
fn load_config(cli: &Cli, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, checkpoint) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(c)) => TrainedModel::<f32>::load(c)?.config,
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = &cli.dataset_root {
        cfg.dataset_root = r.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::MakeSynth { n, out } => {
            let ids = make_synth(*n, out, cli.seed.unwrap_or(0))?;
            println!("wrote {} samples to {}", ids.len(), out.display());
        }
        Command::Split { out } => {
            let cfg = load_config(cli, None)?;
            let ids = discover_ids(&cfg.dataset_root)?;
            let s = split_dataset(&ids, cfg.seed, cfg.test_count, cfg.val_fraction)?;
            println!(
                "{} samples: train {}, val {}, test {}",
                ids.len(),
                s.train_ids.len(),
                s.val_ids.len(),
                s.test_ids.len()
            );
            if let Some(out) = out {
                std::fs::write(out, s.to_csv())?;
            }
        }
        Command::Train { out } => {
            let cfg = load_config(cli, None)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("config.txt"), cfg.to_text())?;
            let o = train(&cfg, out)?;
            let last = o.log.steps.last().map_or(f64::NAN, |s| s.loss.total);
            println!(
                "trained {} steps, final loss {last:.4}; checkpoint {}",
                o.log.steps.len(),
                o.final_checkpoint.display()
            );
        }
        Command::Infer { checkpoint, out, images } => {
            let s = cmd_infer(checkpoint, images, out)?;
            println!(
                "{} images, {} detections written to {}",
                s.processed.len(),
                s.detections,
                out.display()
            );
            if !s.failed.is_empty() {
                for (p, why) in &s.failed {
                    eprintln!("error: {}: {why}", p.display());
                }
                return Ok(ExitCode::from(2));
            }
        }
        Command::Eval { checkpoint, rle, subset, out } => {
            let cfg = load_config(cli, checkpoint.as_deref())?;
            let source = match (checkpoint, rle) {
                (Some(c), _) => PredictionSource::Checkpoint(c.clone()),
                (None, Some(r)) => PredictionSource::Submission(r.clone()),
                (None, None) => unreachable!("clap requires one source"),
            };
            let report = cmd_eval(&source, &cfg, *subset, out.as_deref())?;
            print!("{}", eval_summary(&report));
        }
        Command::ExportRle { checkpoint, subset, out } => {
            let cfg = load_config(cli, Some(checkpoint))?;
            let n = cmd_export_rle(checkpoint, &cfg, *subset, out)?;
            println!("{n} instances written to {}", out.display());
        }
        Command::Gradcheck { corrupt } => {
            let kind = match corrupt {
                Some(name) => Some(
                    OpKind::from_name(name).ok_or_else(|| Error::InvalidArgument(format!("unknown op {name:?}")))?,
                ),
                None => None,
            };
            let rows = cmd_gradcheck(cli.seed.unwrap_or(0), kind)?;
            print!("{}", gradcheck_table(&rows));
            let failed = rows.iter().filter(|r| !r.pass).count();
            println!("{} ops, {failed} failed", rows.len());
            if failed > 0 {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = std::env::var("NUCLEO_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("NUCLEO_THREADS ignored: {e}");
        }
    }
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
