use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::config::{describe_keys, RunConfig};
use super::run::{self, Prepared};
use crate::error::{Error, Result};
use crate::finetune::Ablation;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "fewshot",
    version,
    about = "Episodic few-shot finetuning with distribution calibration and selected sampling",
    after_long_help = long_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn long_help() -> String {
    format!(
        "Settings are resolved in order: built-in defaults, then --config, then\n\
         each --set, then --seed (and --flags / --shots where offered).\n\
         Every invocation writes to a fresh <OUT>/run-NNNN directory; earlier\n\
         runs are never overwritten. Identical settings give byte-identical\n\
         episodes.jsonl and summary.json files.\n\n\
         Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.\n\n\
         Config keys (`key = value`, one per line, `#` comments):\n{}",
        describe_keys()
    )
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` config file; keys it leaves out keep their defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Global seed for data, pretraining, episodes and finetuning.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (required); a new run-NNNN is created inside it.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the backbone on base classes and save the checkpoint.
    Pretrain(Common),
    /// Finetune a single row over every episode.
    Run {
        #[command(flatten)]
        common: Common,
        /// Row to run: none, or B/FN/S/SS joined by `+` (default: config `flags`).
        #[arg(long)]
        flags: Option<String>,
    },
    /// Run the five ablation rows on one paired episode stream.
    Ablate(Common),
    /// Compare baseline, plain finetuning and the full method per shot count.
    Shots {
        #[command(flatten)]
        common: Common,
        /// Comma-separated shot counts (default: config `shot_list`).
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
    },
    /// Recompute aggregates from persisted episode records and verify them.
    Replay {
        /// A run directory, shot cell or row directory.
        dir: PathBuf,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(|e| match e {
            Error::ConfigParse { line, message } => {
                Error::Config(format!("{}:{line}: {message}", path.display()))
            }
            other => other,
        })?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::ConfigParse { .. } | Error::EpisodeRequest(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn fmt_row(out: &mut dyn Write, row: &run::RowOutput) -> std::io::Result<()> {
    let s = &row.summary;
    let ci = s.ci95.map(|c| format!(" ± {c:.4}")).unwrap_or_default();
    writeln!(
        out,
        "{:<10} accuracy {:.4}{ci}  ({}/{} episodes)",
        s.row, s.mean_accuracy, s.episodes_completed, s.episodes_requested
    )
}

fn fmt_comparison(out: &mut dyn Write, c: &run::Comparison) -> std::io::Result<()> {
    match &c.difference {
        Some(d) => writeln!(out, "{} -> {}: {:+.4} ± {:.4}", c.from, c.to, d.mean, d.ci95),
        None => writeln!(out, "{} -> {}: too few paired episodes", c.from, c.to),
    }
}

fn start(common: &Common, cfg: &RunConfig, out: &mut dyn Write) -> Result<(Prepared, PathBuf)> {
    let prepared = run::prepare(cfg)?;
    let dir = run::create_run_dir(&common.out)?;
    run::write_run_header(&dir, &prepared)?;
    if let Some(p) = &prepared.pretrain {
        let _ = writeln!(out, "pretrained backbone: base accuracy {:.4}", p.train_accuracy);
    }
    Ok((prepared, dir))
}

fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    let io = |e: std::io::Error| Error::io("<stdout>", e);
    match command {
        Command::Pretrain(common) => {
            let mut cfg = resolve(&common)?;
            cfg.backbone.checkpoint = None;
            let (_, dir) = start(&common, &cfg, out)?;
            writeln!(out, "checkpoint {}", dir.join("backbone.ckpt").display()).map_err(io)?;
        }
        Command::Run { common, flags } => {
            let mut cfg = resolve(&common)?;
            if let Some(f) = flags {
                cfg.finetune.flags = Ablation::parse(&f)?;
            }
            let (prepared, dir) = start(&common, &cfg, out)?;
            let rows = run::run_rows(&prepared, &[cfg.finetune.flags], cfg.shots)?;
            run::write_row(&dir, &rows[0])?;
            fmt_row(out, &rows[0]).map_err(io)?;
            writeln!(out, "wrote {}", dir.display()).map_err(io)?;
        }
        Command::Ablate(common) => {
            let cfg = resolve(&common)?;
            let (prepared, dir) = start(&common, &cfg, out)?;
            let report = run::run_ablation_suite(&prepared)?;
            run::write_ablation(&dir, &report)?;
            for row in &report.rows {
                fmt_row(out, row).map_err(io)?;
            }
            for c in &report.comparisons {
                fmt_comparison(out, c).map_err(io)?;
            }
            writeln!(out, "wrote {}", dir.display()).map_err(io)?;
        }
        Command::Shots { common, shots } => {
            let mut cfg = resolve(&common)?;
            if let Some(s) = shots {
                cfg.shot_list = s;
            }
            if cfg.shot_list.is_empty() {
                return Err(Error::Config("shot list is empty".into()));
            }
            let (prepared, dir) = start(&common, &cfg, out)?;
            let cells = run::run_shot_sweep(&prepared, &cfg.shot_list)?;
            run::write_shot_sweep(&dir, &cells)?;
            for cell in &cells {
                writeln!(out, "{}-shot", cell.shots).map_err(io)?;
                for row in &cell.rows {
                    fmt_row(out, row).map_err(io)?;
                }
                fmt_comparison(out, &cell.gain_over_baseline).map_err(io)?;
                fmt_comparison(out, &cell.gain_over_backbone).map_err(io)?;
            }
            writeln!(out, "wrote {}", dir.display()).map_err(io)?;
        }
        Command::Replay { dir } => {
            if !dir.is_dir() {
                return Err(Error::Config(format!("{} is not a directory", dir.display())));
            }
            for row in run::replay(&dir)? {
                writeln!(out, "verified {}", display_rel(&row, &dir)).map_err(io)?;
            }
        }
    }
    Ok(())
}

fn display_rel(path: &Path, base: &Path) -> String {
    match path.strip_prefix(base) {
        Ok(p) if !p.as_os_str().is_empty() => p.display().to_string(),
        _ => path.display().to_string(),
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
