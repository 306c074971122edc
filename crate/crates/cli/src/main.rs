//! `dnln`: train, evaluate and run the video super-resolution model.
//!
//! Exit status is 0 on success, 1 when inputs fail validation (bad
//! configuration, shapes, gradient checks, divergence) and 2 on file errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dnln::checkpoint::Checkpoint;
use dnln::eval::{self, DegradeMode, EvalProtocol, Upscaler};
use dnln::gradcheck;
use dnln::pipeline::io::list_clips;
use dnln::pipeline::window_clip;
use dnln::train::{synth_dataset, Loss, Schedule, SynthSpec, TrainOptions, Trainer};
use dnln::{Error, FrameSequence, ModelConfig, Preset};

#[derive(Parser)]
#[command(name = "dnln", version, about = "Deformable non-local video super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch or resume from a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint (or bicubic) on a dataset of ground-truth clips.
    Eval(EvalArgs),
    /// Upscale a directory of low-resolution frames.
    Infer(InferArgs),
    /// Finite-difference gradient checks of the differentiable operators.
    Gradcheck(GradcheckArgs),
    /// Write cubic-downscaled copies of a clip or dataset.
    Degrade(DegradeArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "desk")]
    preset: Preset,
    /// Dataset root with one directory of PNG frames per clip.
    #[arg(long, conflicts_with = "synthetic", required_unless_present_any = ["synthetic", "resume"])]
    data: Option<PathBuf>,
    /// Train on generated translated-texture clips instead.
    #[arg(long)]
    synthetic: bool,
    /// Number of synthetic clips.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value = "l1")]
    loss: Loss,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint directory to continue from; its configuration wins.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// First epoch at which the learning rate halves.
    #[arg(long, default_value_t = 70)]
    lr_drop: usize,
    /// Further halvings every this many epochs.
    #[arg(long, default_value_t = 20)]
    lr_every: usize,
    /// Low-resolution crop side; whole frames when absent.
    #[arg(long)]
    patch: Option<usize>,
    /// Stop after this many optimiser steps in total.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    no_augment: bool,
    /// Model field overrides, `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset root, or a single clip directory.
    data: PathBuf,
    #[arg(long, required_unless_present = "bicubic")]
    checkpoint: Option<PathBuf>,
    /// Score plain bicubic upscaling instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    bicubic: bool,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    #[arg(long, default_value = "on")]
    degrade: DegradeMode,
    #[arg(long, default_value_t = 0)]
    crop_border: usize,
    #[arg(long, default_value_t = 2)]
    exclude_frames: usize,
    /// Also write the per-frame report here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Directory of low-resolution frames.
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, required_unless_present = "bicubic")]
    checkpoint: Option<PathBuf>,
    #[arg(long, conflicts_with = "checkpoint")]
    bicubic: bool,
    #[arg(long, default_value_t = 4)]
    scale: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Suite name, or `all`.
    #[arg(default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DegradeArgs {
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    scale: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage mistakes count as validation failures, not clap's 2
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::Infer(a) => infer(a),
        Command::Gradcheck(a) => grad_check(a),
        Command::Degrade(a) => degrade(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

fn upscaler(checkpoint: Option<&Path>, scale: usize) -> dnln::Result<Upscaler> {
    match checkpoint {
        Some(dir) => Upscaler::from_checkpoint(Checkpoint::load(dir)?),
        None => Ok(Upscaler::Bicubic { scale }),
    }
}

fn load_dataset(root: &Path, config: &ModelConfig) -> dnln::Result<Vec<FrameSequence>> {
    let mut clips = list_clips(root)?;
    if clips.is_empty() {
        clips.push(root.to_path_buf());
    }
    let mut out = Vec::new();
    for dir in clips {
        let (lr, hr) = eval::load_clip(&dir, DegradeMode::On, config.scale)?;
        out.extend(window_clip(&lr, Some(&hr), config.radius, config.scale)?);
    }
    Ok(out)
}

fn train(a: TrainArgs) -> dnln::Result<()> {
    let opts = TrainOptions {
        epochs: a.epochs,
        batch: a.batch,
        loss: a.loss,
        seed: a.seed,
        schedule: Schedule { base_lr: a.lr, drop_start: a.lr_drop, half_every: a.lr_every },
        patch: a.patch,
        augment: !a.no_augment,
        max_steps: a.steps,
        checkpoint_every: a.checkpoint_every,
        out_dir: Some(a.out.clone()),
    };
    let mut trainer = match &a.resume {
        Some(dir) => Trainer::from_checkpoint(Checkpoint::load(dir)?, opts)?,
        None => {
            let mut config = ModelConfig::from_preset(a.preset);
            for kv in &a.overrides {
                let (k, v) = kv.split_once('=').ok_or_else(|| Error::Invalid {
                    op: "train",
                    detail: format!("expected key=value, got `{kv}`"),
                })?;
                config.set(k.trim(), v.trim())?;
            }
            config.validate()?;
            Trainer::new(config, opts)?
        }
    };
    let config = trainer.model.config.clone();
    let data = match &a.data {
        Some(root) => load_dataset(root, &config)?,
        None => {
            let mut spec = SynthSpec::new(a.samples, a.seed);
            spec.radius = config.radius;
            spec.scale = config.scale;
            synth_dataset(&spec)?.into_iter().map(|s| s.seq).collect()
        }
    };
    let start = trainer.step;
    trainer.run(&data)?;
    if let Some(last) = trainer.trace.last() {
        println!(
            "trained steps {}..{} on {} samples; final loss {:.6}; checkpoint {}",
            start,
            trainer.step,
            data.len(),
            last.loss,
            a.out.join("checkpoint").display()
        );
    } else {
        println!("nothing to do: already at step {}", trainer.step);
    }
    Ok(())
}

fn evaluate(a: EvalArgs) -> dnln::Result<()> {
    let up = upscaler(a.checkpoint.as_deref(), a.scale)?;
    let proto = EvalProtocol { exclude_boundary_frames: a.exclude_frames, border_crop: a.crop_border };
    let report = eval::eval_dataset(&up, &a.data, a.degrade, &proto)?;
    print!("{}", report.to_table());
    if let Some(path) = &a.csv {
        std::fs::write(path, report.to_csv()).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    }
    Ok(())
}

fn infer(a: InferArgs) -> dnln::Result<()> {
    let up = upscaler(a.checkpoint.as_deref(), a.scale)?;
    let n = eval::infer(&up, &a.input, &a.out)?;
    println!("wrote {n} frames to {}", a.out.display());
    Ok(())
}

fn grad_check(a: GradcheckArgs) -> dnln::Result<()> {
    let results = gradcheck::run_suite(&a.suite, a.seed)?;
    let mut failed = 0;
    for r in &results {
        let mark = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<4} {:<32} max rel err {:.2e} (tol {:.0e}, {} coords)", mark, r.name, r.max_rel_err, r.tolerance, r.checked);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(Error::Invalid { op: "gradcheck", detail: format!("{failed} of {} checks failed", results.len()) });
    }
    println!("{} checks passed", results.len());
    Ok(())
}

fn degrade(a: DegradeArgs) -> dnln::Result<()> {
    let n = eval::degrade_dir(&a.input, &a.out, a.scale)?;
    println!("wrote {n} frames to {}", a.out.display());
    Ok(())
}
