use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mstr_cli::commands::{self, CHECKPOINT, MANIFEST};
use mstr_cli::config::{Overrides, RunConfig, Toggle};
use mstr_cli::exit_code;
use mstr_core::model::DecoderVariant;
use mstr_core::synth::Preset;
use mstr_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mstr", version, about = "Multi-scale interaction detector on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds scene generation, parameter initialization and batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Decoder variant, e.g. merge_output or naive_deformable.
    #[arg(long)]
    variant: Option<DecoderVariant>,
    /// Ablation switches to turn off: any of ms, da, de, ec.
    #[arg(long, value_delimiter = ',')]
    disable: Vec<Toggle>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene manifest and optional images.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: Option<usize>,
        /// mixed, h>o, h<o, distant or multiscale-stress.
        #[arg(long)]
        preset: Option<Preset>,
        /// Also write one PPM per scene.
        #[arg(long)]
        images: bool,
    },
    /// Train on a manifest; writes checkpoints and loss logs.
    Train {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/manifest.jsonl.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a checkpoint on a manifest; writes detections and AP tables.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Defaults to <out>/checkpoint.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference checks of every operation and module.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Add a case with a deliberately broken backward pass.
        #[arg(long)]
        control: bool,
    },
    /// Attention overlays of the top-scoring query of one scene.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scene: usize,
        /// Output pixels per input pixel.
        #[arg(long, default_value_t = 4)]
        scale: usize,
    },
}

fn load(common: &Common, extra: Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.apply(&Overrides {
        variant: common.variant,
        disable: common.disable.clone(),
        ..extra
    });
    cfg.validate()?;
    Ok(cfg)
}

fn or_default(p: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| out.join(name))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            common,
            scenes,
            preset,
            images,
        } => {
            let cfg = load(
                &common,
                Overrides {
                    scenes,
                    preset,
                    ..Overrides::default()
                },
            )?;
            let summary = commands::generate(&cfg, common.seed, &common.out, images)?;
            print!("{}", summary.table());
        }
        Command::Train {
            common,
            manifest,
            steps,
            lr,
        } => {
            let cfg = load(
                &common,
                Overrides {
                    steps,
                    lr,
                    ..Overrides::default()
                },
            )?;
            let manifest = or_default(&manifest, &common.out, MANIFEST);
            let report = commands::train_cmd(&cfg, common.seed, &common.out, &manifest, |l| {
                if l.step % 100 == 0 {
                    eprintln!(
                        "step {:5}  loss {:.4}  loc {:.4}  cls {:.4}  act {:.4}",
                        l.step, l.total, l.loc, l.cls, l.act
                    );
                }
            })?;
            println!("trained {} steps", report.steps_run);
            if let Some(p) = report.curve.last() {
                println!("train-set mAP {:.4} at step {}", p.map, p.step);
            }
            if let Some(s) = report.reached_target_at {
                println!("target reached at step {s}");
            }
        }
        Command::Eval {
            common,
            manifest,
            checkpoint,
        } => {
            let cfg = load(&common, Overrides::default())?;
            let manifest = or_default(&manifest, &common.out, MANIFEST);
            let checkpoint = or_default(&checkpoint, &common.out, CHECKPOINT);
            let report = commands::eval_cmd(&cfg, common.seed, &common.out, &manifest, &checkpoint)?;
            print!("{}", mstr_core::evaluation::class_csv(&report));
        }
        Command::Gradcheck { common, control } => {
            let cfg = load(&common, Overrides::default())?;
            let report = commands::gradcheck_cmd(&cfg, common.seed, &common.out, control)?;
            print!("{}", mstr_core::gradsuite::report_csv(&report.results));
            let failed: Vec<&str> = report.failures().iter().map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
        Command::Visualize {
            common,
            manifest,
            checkpoint,
            scene,
            scale,
        } => {
            let cfg = load(&common, Overrides::default())?;
            let manifest = or_default(&manifest, &common.out, MANIFEST);
            let checkpoint = or_default(&checkpoint, &common.out, CHECKPOINT);
            let s = commands::visualize_cmd(&cfg, common.seed, &common.out, &manifest, &checkpoint, scene, scale)?;
            println!("query {} (score {:.4})", s.query, s.score);
            for f in &s.files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
