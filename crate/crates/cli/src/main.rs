use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

mod commands;
mod config;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "masksurf", version, about = "Masked surfel prediction on point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file with `[section]` tables of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", short = 's', value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; receives run.json and the command's artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset as XYZN files.
    GenData(Common),
    /// Masked surfel pre-training.
    Pretrain(Common),
    /// Supervised classification from a checkpoint (or from scratch).
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Repeated n-way m-shot episodes.
    Fewshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train a fresh decoder on a frozen encoder and report held-out reconstruction.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient rule and of a tiny model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = masksurf::training::GRADCHECK_EPS)]
        eps: f64,
        #[arg(long, default_value_t = masksurf::training::GRADCHECK_TOL)]
        tol: f64,
    },
    /// Pre-train and evaluate one configuration per sweep value.
    Ablate(Common),
    /// Write PLY files of inputs and reconstructions with per-point normal error.
    ExportVis {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print learnable-parameter counts.
    ParamCount(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Fewshot { .. } => "fewshot",
            Command::Probe { .. } => "probe",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Ablate(_) => "ablate",
            Command::ExportVis { .. } => "export-vis",
            Command::ParamCount(_) => "param-count",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::Pretrain(c) | Command::Ablate(c) | Command::ParamCount(c) => c,
            Command::Finetune { common, .. }
            | Command::Fewshot { common, .. }
            | Command::Probe { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::ExportVis { common, .. } => common,
        }
    }
}

fn required_out<'a>(out: &'a Option<PathBuf>, command: &str) -> Result<&'a Path> {
    out.as_deref()
        .with_context(|| format!("{command} needs --out <dir>"))
}

fn dispatch(command: &Command, cfg: &RunConfig) -> Result<Value> {
    let out = &command.common().out;
    let name = command.name();
    match command {
        Command::GenData(_) => commands::gen_data(cfg, required_out(out, name)?),
        Command::Pretrain(_) => commands::pretrain(cfg, required_out(out, name)?),
        Command::Finetune { checkpoint, .. } => commands::finetune(cfg, checkpoint.as_deref(), required_out(out, name)?),
        Command::Fewshot { checkpoint, .. } => commands::fewshot(cfg, checkpoint.as_deref(), required_out(out, name)?),
        Command::Probe { checkpoint, .. } => commands::probe(cfg, checkpoint.as_deref(), required_out(out, name)?),
        Command::Gradcheck { eps, tol, .. } => commands::gradcheck(*eps, *tol),
        Command::Ablate(_) => commands::ablate(cfg, required_out(out, name)?),
        Command::ExportVis { checkpoint, .. } => commands::export_vis(cfg, checkpoint, required_out(out, name)?),
        Command::ParamCount(_) => commands::count_params(cfg),
    }
}

fn write_record(dir: &Path, record: &Value) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("run.json");
    let text = serde_json::to_string_pretty(record)? + "\n";
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = cli.command.common().clone();
    let loaded = RunConfig::load(common.config.as_deref(), &common.overrides);
    let outcome = loaded.as_ref().map_err(|e| anyhow::anyhow!("{e:#}")).and_then(|cfg| dispatch(&cli.command, cfg));

    let mut record = json!({
        "command": cli.command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config_file": common.config.as_ref().map(|p| p.display().to_string()),
        "overrides": common.overrides,
    });
    if let Ok(cfg) = &loaded {
        record["seed"] = json!(cfg.train.seed);
        record["config"] = json!(cfg.resolved());
    }
    let failed = outcome.is_err();
    match outcome {
        Ok(result) => {
            record["status"] = json!("ok");
            record["result"] = result;
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            record["status"] = json!("error");
            record["error"] = json!(format!("{e:#}"));
        }
    }
    if let Some(dir) = &common.out {
        if let Err(e) = write_record(dir, &record) {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
