use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pocca_core::cli::{
    cmd_ablate, cmd_gradcheck, cmd_pretrain, cmd_probe, cmd_sample, exit_code, format_summary, AblateArgs,
    GradcheckArgs, Outcome, PretrainArgs, ProbeArgs, RunConfig, SampleArgs,
};
use pocca_core::Result;

/// Self-supervised point-cloud pretraining, probing and diagnostics.
///
/// Config fields can be overridden with `--set key=value` or directly as
/// `--section.field=value`.
#[derive(Parser, Debug)]
#[command(name = "pocca", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON run config; the built-in desk config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `train.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain and write metrics, a checkpoint and an encoder export.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a full checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Accept a checkpoint written under a different config.
        #[arg(long)]
        allow_config_mismatch: bool,
        /// Stop after this many steps.
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Linear and few-shot probes of a frozen encoder.
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Probe a freshly initialized encoder.
        #[arg(long)]
        random_init: bool,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run the ablation matrix of the config.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Finite-difference check of every op and the full model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report here as well.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write the patches of one cloud as separate files plus a manifest.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Text or PCB1 cloud.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Rewrite `--a.b=v` and `--field=v` for top-level config fields into
/// `--set a.b=v`.
fn expand_overrides(args: impl Iterator<Item = String>) -> Vec<String> {
    let top = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut out = Vec::new();
    for a in args {
        match a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            Some((key, _)) if key.contains('.') || top.get(key).is_some() => {
                out.push("--set".to_string());
                out.push(a[2..].to_string());
            }
            _ => out.push(a),
        }
    }
    out
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Pretrain {
            cfg,
            resume,
            allow_config_mismatch,
            max_steps,
            workers,
        } => {
            let s = cmd_pretrain(&PretrainArgs {
                config: cfg.config,
                overrides: cfg.overrides,
                resume,
                allow_config_mismatch,
                max_steps,
                workers,
            })?;
            println!(
                "pretrain: {} steps (now at {}), final loss {}, output {}",
                s.steps_run,
                s.final_step,
                s.final_loss.map_or("n/a".into(), |l| format!("{l:.6}")),
                s.output_dir.display()
            );
        }
        Command::Probe {
            cfg,
            checkpoint,
            random_init,
            output_dir,
        } => {
            let s = cmd_probe(&ProbeArgs {
                checkpoint,
                config: cfg.config,
                overrides: cfg.overrides,
                random_init,
                output_dir,
            })?;
            println!("probe: linear accuracy {:.4}", s.accuracy);
            for (way, shot, mean, std) in s.few_shot {
                println!("probe: {way}-way {shot}-shot {mean:.4} ± {std:.4}");
            }
            println!("probe: results in {}", s.output_dir.display());
        }
        Command::Ablate { cfg, workers } => {
            let rows = cmd_ablate(&AblateArgs {
                config: cfg.config,
                overrides: cfg.overrides,
                workers,
            })?;
            print!("{}", format_summary(&rows));
        }
        Command::Gradcheck {
            seed,
            output,
            inject_fault,
        } => {
            return Ok(cmd_gradcheck(&GradcheckArgs {
                seed,
                inject_fault,
                output,
            })?
            .0)
        }
        Command::Sample {
            cfg,
            input,
            output_dir,
            seed,
        } => {
            let entries = cmd_sample(&SampleArgs {
                input,
                config: cfg.config,
                overrides: cfg.overrides,
                output_dir,
                seed,
            })?;
            println!("sample: wrote {} patches", entries.len());
        }
    }
    Ok(Outcome::Success)
}

fn main() -> ExitCode {
    let cli = Cli::parse_from(expand_overrides(std::env::args()));
    let result = run(cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&result) as u8)
}
