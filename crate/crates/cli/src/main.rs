//! `srl` — generate synthetic videos, train, evaluate and export masks.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 when a command fails.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use srl::metrics::{write_metrics_csv, MetricsRow};
use srl::synthdata::{generate_dataset, write_dataset, GeneratorConfig};
use srl::train::{
    evaluate, export_masks, model_from_checkpoint, read_videos, Checkpoint, TrainConfig, Trainer,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser, Debug)]
#[command(name = "srl", version, about = "Slot-attention video object discovery on synthetic videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic moving-shape dataset.
    GenData(GenArgs),
    /// Train a model and write a checkpoint plus a per-step loss CSV.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write a metrics CSV.
    Eval(EvalArgs),
    /// Write per-frame predicted slot masks as PGM images.
    ExportMasks(EvalArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` config file. For `eval` and `export-masks` it is layered
    /// over the checkpoint's stored config and must agree on the slot count.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset file to write.
    #[arg(long, default_value = "data.bin")]
    out: PathBuf,
    /// Number of videos.
    #[arg(long, default_value_t = 64)]
    videos: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to write (overrides the `checkpoint` key).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset to train on (overrides the `dataset` key).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Continue from a checkpoint; its stored config wins over `--config`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Save and exit once this many steps are done; `--resume` continues the
    /// same schedule.
    #[arg(long, value_name = "STEP")]
    stop_at: Option<usize>,
    /// Print a progress line every this many steps (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to score; defaults to the `dataset` key, which starts out as
    /// the one the checkpoint was trained on.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Metrics CSV for `eval`, output directory for `export-masks`.
    #[arg(long)]
    out: PathBuf,
}

fn split_override(s: &str) -> Result<(&str, &str)> {
    s.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {s:?}"))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))
}

/// Layers the `--config` file and `--set` overrides on top of `base`.
fn layered_config(base: TrainConfig, common: &Common) -> Result<TrainConfig> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        cfg.apply_text(&read_text(path)?)
            .with_context(|| format!("config {}", path.display()))?;
    }
    for o in &common.overrides {
        let (k, v) = split_override(o)?;
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn gen_data(args: GenArgs) -> Result<()> {
    let mut cfg = GeneratorConfig::default();
    if let Some(path) = &args.common.config {
        cfg.apply_text(&read_text(path)?)
            .with_context(|| format!("config {}", path.display()))?;
    }
    for o in &args.common.overrides {
        let (k, v) = split_override(o)?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let videos = generate_dataset(&cfg, args.videos)?;
    write_dataset(&videos, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!("wrote {} videos to {}", videos.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let stored = TrainConfig::from_text(ck.text("state/config")?)?;
            let dataset = args.dataset.clone().unwrap_or(stored.dataset);
            Trainer::resume(&ck, &read_videos(&dataset)?)?
        }
        None => {
            let mut cfg = layered_config(TrainConfig::default(), &args.common)?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            if let Some(d) = &args.dataset {
                cfg.dataset = d.clone();
            }
            let videos = read_videos(&cfg.dataset)?;
            Trainer::new(cfg, &videos)?
        }
    };
    if let Some(out) = &args.out {
        trainer.config.checkpoint = out.clone();
    }
    let start = Instant::now();
    let stop = args.stop_at.unwrap_or(usize::MAX);
    while !trainer.is_done() && trainer.step < stop {
        let r = trainer.step()?;
        if args.log_every > 0 && (r.step + 1) % args.log_every == 0 {
            eprintln!(
                "step {:>6}  eta {:.3}  total {:.5}  recon {:.5}  [{:.1}s]",
                r.step + 1,
                r.eta,
                r.loss.total,
                r.loss.recon,
                start.elapsed().as_secs_f64()
            );
        }
    }
    trainer.save(&trainer.config.checkpoint)?;
    trainer.write_loss_log(&trainer.config.loss_log)?;
    eprintln!(
        "saved {} and {}",
        trainer.config.checkpoint.display(),
        trainer.config.loss_log.display()
    );
    Ok(())
}

fn predict(args: &EvalArgs) -> Result<(Vec<MetricsRow>, Vec<srl::metrics::LabelField>)> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let stored = TrainConfig::from_text(ck.text("state/config")?)?;
    let requested = layered_config(stored, &args.common)?;
    let dataset = args.dataset.clone().unwrap_or_else(|| requested.dataset.clone());
    let videos = read_videos(&dataset)?;
    let Some(first) = videos.first() else {
        bail!("dataset {} contains no videos", dataset.display());
    };
    let (_, model, params) = model_from_checkpoint(&ck, Some(&requested), first.h, first.w)?;
    Ok(evaluate(&model, &params, &videos)?)
}

fn eval(args: EvalArgs) -> Result<()> {
    let (rows, _) = predict(&args)?;
    let file = std::fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_metrics_csv(&rows, std::io::BufWriter::new(file))
        .with_context(|| format!("writing {}", args.out.display()))?;
    let n = rows.len() as f64;
    let mean = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    eprintln!(
        "{} videos  fg_ari_video {:.4}  fg_ari_image {:.4}  mbo_video {:.4}  mbo_image {:.4}",
        rows.len(),
        mean(|r| r.fg_ari_video),
        mean(|r| r.fg_ari_image),
        mean(|r| r.mbo_video),
        mean(|r| r.mbo_image)
    );
    Ok(())
}

fn export(args: EvalArgs) -> Result<()> {
    let (_, preds) = predict(&args)?;
    let written = export_masks(&args.out, &preds)?;
    eprintln!("wrote {} mask images to {}", written.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ExportMasks(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// The error chain joined with `: `, skipping causes whose text the message
/// already contains (library errors often embed their source).
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let s = cause.to_string();
        if !msg.contains(&s) {
            msg.push_str(": ");
            msg.push_str(&s);
        }
    }
    msg
}
