use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use avau_core::audio::{read_wav, FeatureExtractor};
use avau_core::harness::train::predict_clip;
use avau_core::harness::*;
use avau_core::temporal::AU_COUNT;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "avau", version, about = "Audio-visual facial action unit detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with planted per-AU cues.
    Synth {
        #[arg(long, default_value_t = 24)]
        clips: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one fold (1-based) and save its best checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `fold<K>.ckpt` next to the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-validate over every fold.
    Cv {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Per-AU F1 of a checkpoint on every clip of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Log-Mel statistics of a WAV file.
    Features {
        #[arg(long)]
        wav: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("config {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn per_au_line(per_au: &[f64; AU_COUNT]) -> String {
    per_au
        .iter()
        .enumerate()
        .map(|(j, f)| format!("au{}={:.1}", j + 1, 100.0 * f))
        .collect::<Vec<_>>()
        .join(" ")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { clips, seed, out } => {
            let recs = generate_synthetic(clips, seed, &out, &SynthConfig::default())?;
            println!(
                "wrote {} clips and {}",
                recs.len(),
                out.join("manifest.jsonl").display()
            );
        }
        Command::Train {
            manifest,
            fold,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            if fold == 0 || fold > cfg.folds {
                bail!("--fold must be in 1..={}", cfg.folds);
            }
            let data = load_dataset(&manifest, cfg.model.encoder.resolution)?;
            let plan = split_folds(&data.ids(), cfg.folds, cfg.seed)?;
            let (model, report) = train_fold(&data, &plan, fold - 1, &cfg)?;
            let out = out.unwrap_or_else(|| manifest.with_file_name(format!("fold{fold}.ckpt")));
            save_checkpoint(&out, &model)?;
            println!(
                "fold-{fold}: macro F1 {:.2}% at epoch {}/{} in {:.1} s",
                100.0 * report.macro_f1,
                report.best_epoch,
                report.epochs,
                report.wall_time.as_secs_f64()
            );
            println!("{}", per_au_line(&report.per_au_f1));
            println!("checkpoint {}", out.display());
        }
        Command::Cv { manifest, config } => {
            let cfg = load_config(config.as_deref())?;
            let data = load_dataset(&manifest, cfg.model.encoder.resolution)?;
            let summary = cross_validate(&data, &cfg)?;
            print!("{}", summary.table());
            print!("{}", summary.per_au_table());
            if summary.best().is_none() {
                bail!("every fold failed");
            }
        }
        Command::Eval { checkpoint, manifest } => {
            let model = load_checkpoint(&checkpoint)?;
            let data = load_dataset(&manifest, model.config.encoder.resolution)?;
            let clips: Vec<&Clip> = data.clips.iter().collect();
            for clip in &clips {
                let (p, t) = predict_clip(&model, clip)?;
                let frames = p.frames;
                println!(
                    "{}: {frames} frames, macro F1 {:.2}%",
                    clip.id,
                    100.0 * macro_f1(&f1_per_au(&p, &t)?)
                );
            }
            let per_au = evaluate(&model, &clips)?;
            println!("all: macro F1 {:.2}%", 100.0 * macro_f1(&per_au));
            println!("{}", per_au_line(&per_au));
        }
        Command::Features { wav } => {
            let signal = read_wav(&wav)?;
            let mel = FeatureExtractor::default().extract(&signal)?;
            let x = mel.data();
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let (lo, hi) = x
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            println!("samples {} at {} Hz", signal.samples().len(), signal.sample_rate());
            println!("log-mel {} frames × {} channels", mel.frames(), mel.mels());
            println!("min {lo:.4} max {hi:.4} mean {mean:.4} std {std:.4}");
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
