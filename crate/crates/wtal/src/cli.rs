//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use wtal_core::data::{Split, Strategy};
use wtal_core::eval::summary_line;

use crate::checkpoint::Checkpoint;
use crate::config::{config_hash, load_config, load_synth_spec};
use crate::error::{write, Result, WtalError};
use crate::manifest::load_dataset;
use crate::pipeline::{evaluate_checkpoint, gen_data, infer_checkpoint, train_run};
use crate::report::{comparison_table, history_jsonl, save_json, ReportFile};

#[derive(Debug, Parser)]
#[command(name = "wtal", version, about = "Weakly-supervised temporal action localization by dual-branch distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (manifest plus feature files).
    GenData {
        /// TOML generator spec; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Override a spec field, e.g. `--set num_videos=32`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the classification branch alone on video-level labels.
    Warmup(TrainArgs),
    /// Train with the configured strategy (default: alternating).
    Train {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Write proposals for every video of a split.
    Infer(EvalArgs),
    /// Proposals plus mAP and frame-level mIoU against ground truth.
    Eval(EvalArgs),
    /// Comparison table over evaluation reports.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// TOML run config; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest file or the directory holding `manifest.json`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Override a config field, e.g. `--set cycles=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Phase history (JSON lines); defaults next to the checkpoint.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Accept a checkpoint trained on different data.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum StrategyArg {
    WarmupOnly,
    OnlyB,
    OnlyF,
    Alternating,
    FuseAvg,
    FuseWeight,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::WarmupOnly => Strategy::WarmupOnly,
            StrategyArg::OnlyB => Strategy::OnlyB,
            StrategyArg::OnlyF => Strategy::OnlyF,
            StrategyArg::Alternating => Strategy::Alternating,
            StrategyArg::FuseAvg => Strategy::FuseAvg,
            StrategyArg::FuseWeight => Strategy::FuseWeight,
        }
    }
}

fn train_command(args: &TrainArgs, strategy: Option<Strategy>) -> Result<()> {
    let mut overrides = args.overrides.clone();
    if let Some(s) = strategy {
        overrides.push(format!("strategy=\"{}\"", s.name()));
    }
    let cfg = load_config(args.config.as_deref(), &overrides)?;
    let data = load_dataset(&args.data)?;
    let (ck, models) = train_run(&data, &cfg)?;
    ck.save(&args.out)?;
    let history = args.history.clone().unwrap_or_else(|| args.out.with_extension("history.jsonl"));
    write(&history, history_jsonl(&models.history, &config_hash(&cfg)).as_bytes())?;
    println!("{} checkpoint {} (config {})", cfg.strategy.name(), args.out.display(), &ck.meta.config_hash[..12]);
    for r in &models.history {
        println!("  {}", wtal_core::distill::phase_label(r));
    }
    Ok(())
}

fn run_name(path: &Path, r: &ReportFile) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    if stem.is_empty() || stem == "report" {
        r.strategy.name().to_string()
    } else {
        stem.to_string()
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { spec, overrides, out } => {
            let spec = load_synth_spec(spec.as_deref(), overrides)?;
            let manifest = gen_data(&spec, out)?;
            println!("wrote {} ({} videos)", manifest.display(), spec.num_videos);
        }
        Command::Warmup(args) => train_command(args, Some(Strategy::WarmupOnly))?,
        Command::Train { args, strategy } => train_command(args, strategy.map(Strategy::from))?,
        Command::Infer(a) => {
            let ck = Checkpoint::load(&a.ckpt)?;
            let data = load_dataset(&a.data)?;
            let out = infer_checkpoint(&ck, &data, a.split.into(), a.force)?;
            save_json(&a.out, &out)?;
            println!("wrote proposals for {} videos to {}", out.videos.len(), a.out.display());
        }
        Command::Eval(a) => {
            let ck = Checkpoint::load(&a.ckpt)?;
            let data = load_dataset(&a.data)?;
            let report = evaluate_checkpoint(&ck, &data, a.split.into(), a.force)?;
            save_json(&a.out, &report)?;
            let summary = wtal_core::eval::EvalReport {
                per_iou: Vec::new(),
                avg_01_05: report.avg_01_05,
                avg_03_07: report.avg_03_07,
                fore_miou: report.fore_miou,
                back_miou: report.back_miou,
                videos: Vec::new(),
            };
            println!("{}: {}", report.strategy.name(), summary_line(&summary));
        }
        Command::Report { runs, out } => {
            let reports = runs
                .iter()
                .map(|p| ReportFile::load(p).map(|r| (run_name(p, &r), r)))
                .collect::<Result<Vec<_>>>()?;
            let table = comparison_table(&reports);
            print!("{table}");
            if let Some(path) = out {
                write(path, table.as_bytes())?;
            }
        }
    }
    Ok(())
}

/// Parse arguments, run, and return the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

impl From<clap::Error> for WtalError {
    fn from(e: clap::Error) -> Self {
        WtalError::Usage(e.to_string())
    }
}
