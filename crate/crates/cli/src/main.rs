//! Batch command-line front end.
//!
//! Exit codes: 0 ok, 1 config error, 2 missing artifact, 3 numerical abort,
//! 4 self-check failure.

mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use decoseg_core::config::RunSettings;
use decoseg_core::Error;

#[derive(Parser, Debug)]
#[command(name = "decoseg", version, about = "Decomposed-feature few-shot segmentation on synthetic cross-domain episodes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,

    /// Plain-text key=value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Training/episode seed (overrides the config key).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Evaluation shot count: 1 or 5.
    #[arg(long, global = true)]
    shots: Option<usize>,

    /// Comma-separated target domain ids (1..=3).
    #[arg(long, global = true)]
    domains: Option<String>,

    /// Output root; run artifacts land in <out>/<run_name>.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Repeatable key=value override, applied after the config file.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write per-domain scene directories with manifests.
    ExportData,
    /// Train the baseline (backbone + head) on source episodes.
    Pretrain,
    /// Train the decomposition/fusion model on a frozen pretrained backbone.
    Train,
    /// Support-only fine-tuning on target domains.
    Finetune,
    /// Per-domain mIoU tables for 1-shot and 5-shot conditioning.
    Eval,
    /// Module / feature-stream / loss ablation tables over a seed set.
    Ablate {
        /// Pretrain per seed instead of requiring pretrain_ckpt.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Numerical invariant suite; exit 4 on any failure.
    Check {
        #[arg(long, hide = true)]
        corrupt_grl: bool,
    },
}

fn settings_from(cli: &Cli) -> Result<RunSettings, Error> {
    let mut s = RunSettings::default();
    if let Some(path) = &cli.config {
        s.apply_file(path)?;
    }
    for ov in &cli.overrides {
        s.apply_override(ov)?;
    }
    if let Some(seed) = cli.seed {
        s.train.seed = seed;
    }
    if let Some(shots) = cli.shots {
        s.shots = shots;
    }
    if let Some(domains) = &cli.domains {
        s.apply("domains", domains, 0)?;
    }
    if let Some(out) = &cli.out {
        s.out_dir = out.display().to_string();
    }
    s.validate()?;
    Ok(s)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Io(_) => 1,
        Error::MissingArtifact(_) | Error::Checkpoint(_) => 2,
        Error::NonFinite { .. } => 3,
        Error::CheckFailed(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let settings = match settings_from(&cli) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code_for(&e));
        }
    };
    let result = match &cli.cmd {
        Cmd::ExportData => commands::export_data(&settings),
        Cmd::Pretrain => commands::pretrain(&settings),
        Cmd::Train => commands::train(&settings),
        Cmd::Finetune => commands::finetune(&settings),
        Cmd::Eval => commands::eval(&settings),
        Cmd::Ablate { from_scratch } => commands::ablate(&settings, *from_scratch),
        Cmd::Check { corrupt_grl } => commands::check(*corrupt_grl),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
