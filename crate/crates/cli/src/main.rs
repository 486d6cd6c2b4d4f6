//! `widenet`: train, evaluate, analyze and verify WideNet models.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 numerical abort,
//! 3 verification failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use widenet_core::analysis::NormSite;
use widenet_core::error::Error;
use widenet_core::run::{self, Analysis, RunConfig, TrainOptions};
use widenet_core::verify::{Fault, VerifyOptions};

#[derive(Parser, Debug)]
#[command(name = "widenet", version, about = "Mixture-of-experts transformer with depth-shared weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model (or a group sweep) and write metrics and checkpoints.
    Train {
        /// Starting configuration: widenet-toy, vit-toy, widenet-toy-sharedln,
        /// widenet-toy-nosharing, group-sweep or squad1-style.
        #[arg(long)]
        preset: Option<String>,
        /// TOML file layered over the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` overrides, applied last. Keys are dotted
        /// (`train.lr`) or bare field names owned by one section (`share_ln`).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory (same as `--set paths.out_dir=...`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps and leave a resumable checkpoint.
        #[arg(long, value_name = "STEP")]
        until: Option<usize>,
        /// Print the merged configuration and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Evaluate a checkpoint on its eval split.
    Eval {
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Data overrides, e.g. `eval_size=256`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Post-hoc diagnostics.
    Analyze {
        #[command(subcommand)]
        which: AnalyzeCommand,
        /// Where report files go (default: next to the input).
        #[arg(long, global = true)]
        out: Option<PathBuf>,
    },
    /// Run the built-in verification battery.
    Verify {
        /// Seed for the sampled instances; outcomes must not depend on it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Inject a known bug; the battery must catch it.
        #[arg(long, value_enum)]
        fault: Option<FaultArg>,
    },
}

#[derive(Subcommand, Debug)]
enum AnalyzeCommand {
    /// Layer-norm divergence across blocks.
    LnDivergence {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SiteArg::Moe)]
        site: SiteArg,
    },
    /// Expert shares, drop rates and tokens per expert over a metrics stream.
    Utilization {
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Tokens each expert sees: inputs · tokens · K / E.
    TokensEstimate {
        #[arg(long)]
        inputs: usize,
        /// Tokens (patches) per input.
        #[arg(long)]
        tokens: usize,
        #[arg(long)]
        top_k: usize,
        #[arg(long)]
        experts: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SiteArg {
    Attention,
    Moe,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    RenormalizeGates,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NumericalAbort { .. } => 2,
        _ => 1,
    }
}

fn run_train(
    preset: Option<String>,
    config: Option<PathBuf>,
    mut set: Vec<String>,
    out: Option<PathBuf>,
    opts: TrainOptions,
    print_config: bool,
) -> Result<String, Error> {
    let base = match preset {
        Some(p) => run::preset(&p)?,
        None => RunConfig::default(),
    };
    let file = match &config {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .map_err(|e| Error::Config {
                    field: "config".into(),
                    message: format!("cannot read {}: {e}", p.display()),
                })?,
        ),
        None => None,
    };
    if let Some(o) = out {
        set.push(format!("paths.out_dir={:?}", o.display().to_string()));
    }
    let cfg = base.layered(file.as_deref(), &set)?;
    if print_config {
        return cfg.to_toml();
    }
    Ok(run::train(&cfg, &opts)?.render())
}

fn dispatch(cmd: Command) -> Result<(String, u8), Error> {
    match cmd {
        Command::Train {
            preset,
            config,
            set,
            out,
            resume,
            until,
            print_config,
        } => run_train(preset, config, set, out, TrainOptions { resume, until }, print_config).map(|s| (s, 0)),
        Command::Eval {
            checkpoint,
            set,
            batch_size,
        } => Ok((run::eval(&checkpoint, &set, batch_size)?.render(), 0)),
        Command::Analyze { which, out } => {
            let which = match which {
                AnalyzeCommand::LnDivergence { checkpoint, site } => Analysis::LnDivergence {
                    checkpoint,
                    site: match site {
                        SiteArg::Attention => NormSite::Attention,
                        SiteArg::Moe => NormSite::Moe,
                    },
                },
                AnalyzeCommand::Utilization { metrics } => Analysis::Utilization { metrics },
                AnalyzeCommand::TokensEstimate {
                    inputs,
                    tokens,
                    top_k,
                    experts,
                } => Analysis::TokensEstimate {
                    inputs,
                    tokens,
                    top_k,
                    experts,
                },
            };
            Ok((run::analyze(&which, out.as_deref())?, 0))
        }
        Command::Verify { seed, fault } => {
            let report = run::verify(&VerifyOptions {
                seed,
                fault: fault.map(|FaultArg::RenormalizeGates| Fault::RenormalizeGates),
            });
            let code = if report.all_passed() { 0 } else { 3 };
            Ok((report.render(), code))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok((text, code)) => {
            print!("{text}");
            ExitCode::from(code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
