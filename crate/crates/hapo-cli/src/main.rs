//! Command-line front end. Every subcommand emits line-delimited JSON to
//! stdout (or `--out FILE`); failures print a single machine-readable error
//! line to stderr and exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use hapo::advantage::KernelSpec;
use hapo::config::{AblationGrid, ExperimentConfig};
use hapo::error::{HapoError, HapoResult};
use hapo::eval::{self, ablation_matrix, compare_estimators, evaluate, EvalReport};
use hapo::grid::{EnvParams, GridLayout};
use hapo::policy::{load_checkpoint, PolicyParams};
use hapo::records::{
    jsonl_string, layout_from_record, layout_to_record, trajectories_from_spill, read_jsonl,
    LayoutRecord, SpillRecord,
};
use hapo::rng::{derive_seed, salt};
use hapo::trainer::training_loop;

#[derive(Parser)]
#[command(name = "hapo", version, about = "Critic-free multi-turn RL on grid navigation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and emit its metrics timeline.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run seed; overrides the `seed` key in the config file.
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint destination; overrides `checkpoint_path` in the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write the held-out layouts as JSON files into this directory.
        #[arg(long)]
        dump_holdout: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a directory of layout JSON files.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layouts: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the strategy × seed ablation matrix described by a grid file.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare baseline kernels on spilled rollout buffers (one .jsonl per buffer).
    Estimators {
        #[arg(long)]
        buffers: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        gamma: f64,
        /// Bandwidth of the Gaussian temporal kernel entry.
        #[arg(long, default_value_t = 30.0)]
        bandwidth: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": err.to_string(), "kind": error_kind(&err) })
            );
            ExitCode::FAILURE
        }
    }
}

fn error_kind(err: &HapoError) -> &'static str {
    match err {
        HapoError::Config(_) => "config",
        HapoError::Domain(_) => "domain",
        HapoError::Data(_) => "data",
        HapoError::Estimation(_) => "estimation",
        HapoError::Collection { .. } => "collection",
        HapoError::Numeric { .. } => "numeric",
        HapoError::Parse(_) => "parse",
        HapoError::Io(_) => "io",
    }
}

fn emit(text: String, out: Option<&Path>) -> HapoResult<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> HapoResult<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            checkpoint,
            dump_holdout,
        } => train(&config, seed, out.as_deref(), checkpoint, dump_holdout.as_deref()),
        Command::Eval {
            checkpoint,
            layouts,
            out,
        } => eval_checkpoint(&checkpoint, &layouts, out.as_deref()),
        Command::Ablate { grid, out } => ablate(&grid, out.as_deref()),
        Command::Estimators {
            buffers,
            gamma,
            bandwidth,
            out,
        } => estimators(&buffers, gamma, bandwidth, out.as_deref()),
    }
}

fn train(
    config_path: &Path,
    seed: u64,
    out: Option<&Path>,
    checkpoint: Option<PathBuf>,
    dump_holdout: Option<&Path>,
) -> HapoResult<()> {
    let experiment = ExperimentConfig::load(config_path)?;
    let setup = experiment.setup(seed)?;
    let assets = eval::build_assets(&setup, seed)?;
    if let Some(dir) = dump_holdout {
        std::fs::create_dir_all(dir)?;
        for (i, layout) in assets.holdout.iter().enumerate() {
            let record = layout_to_record(layout);
            let path = dir.join(format!("layout_{i:04}.json"));
            std::fs::write(path, serde_json::to_string_pretty(&record).unwrap())?;
        }
    }
    let mut cfg = setup.base.clone();
    if checkpoint.is_some() {
        cfg.checkpoint_path = checkpoint;
    }
    let init = PolicyParams::init(
        setup.encoder.feature_dim(),
        setup.hidden_width,
        derive_seed(seed, 0, salt::INIT),
    );
    let run = training_loop(&assets, init, &cfg)?;
    emit(jsonl_string(&run.timeline)?, out)
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum EvalLine {
    Overall {
        episodes: usize,
        successes: usize,
        sr: f64,
        spl: f64,
        mean_steps: f64,
        policy_checksum: u64,
    },
    Bucket {
        label: String,
        episodes: usize,
        successes: usize,
        sr: f64,
        spl: f64,
    },
}

fn report_lines(report: &EvalReport) -> Vec<EvalLine> {
    let mut lines = vec![EvalLine::Overall {
        episodes: report.episodes,
        successes: report.successes,
        sr: report.sr,
        spl: report.mean_spl,
        mean_steps: report.mean_steps,
        policy_checksum: report.policy_checksum,
    }];
    for bucket in &report.buckets {
        lines.push(EvalLine::Bucket {
            label: bucket.label.clone(),
            episodes: bucket.episodes,
            successes: bucket.successes,
            sr: bucket.sr,
            spl: bucket.mean_spl,
        });
    }
    lines
}

fn eval_checkpoint(checkpoint: &Path, layouts_dir: &Path, out: Option<&Path>) -> HapoResult<()> {
    let (params, encoder) = load_checkpoint(checkpoint)?;
    let layouts = load_layout_dir(layouts_dir)?;
    let env = EnvParams {
        t_max: encoder.t_max,
        window: encoder.window,
        ..EnvParams::default()
    };
    let report = evaluate(&params, &layouts, &encoder, env, &[9, 25])?;
    emit(jsonl_string(&report_lines(&report))?, out)
}

fn load_layout_dir(dir: &Path) -> HapoResult<Vec<GridLayout>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            (path.extension().and_then(|e| e.to_str()) == Some("json")).then_some(path)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(HapoError::Data(format!(
            "no .json layout files in {}",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|path| {
            let text = std::fs::read_to_string(path)?;
            let record: LayoutRecord = serde_json::from_str(&text)
                .map_err(|e| HapoError::Parse(format!("{}: {e}", path.display())))?;
            layout_from_record(&record)
        })
        .collect()
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum AblationLine {
    Cell {
        strategy: &'static str,
        seed: u64,
        sr: f64,
        spl: f64,
    },
    Median {
        strategy: &'static str,
        median_sr: f64,
    },
}

fn ablate(grid_path: &Path, out: Option<&Path>) -> HapoResult<()> {
    let (grid, experiment) = AblationGrid::load(grid_path)?;
    let strategies = grid.strategy_kinds()?;
    let setup = experiment.setup(experiment.seed)?;
    let cells = ablation_matrix(&setup, &strategies, &grid.seeds)?;
    let mut lines: Vec<AblationLine> = cells
        .iter()
        .map(|cell| AblationLine::Cell {
            strategy: cell.strategy,
            seed: cell.seed,
            sr: cell.final_sr,
            spl: cell.final_spl,
        })
        .collect();
    for kind in &strategies {
        if let Some(median_sr) = eval::strategy_median_sr(&cells, kind.label()) {
            lines.push(AblationLine::Median {
                strategy: kind.label(),
                median_sr,
            });
        }
    }
    emit(jsonl_string(&lines)?, out)
}

#[derive(Serialize)]
struct EstimatorLine {
    kernel: String,
    median_error: f64,
    per_buffer: Vec<f64>,
}

fn estimators(dir: &Path, gamma: f64, bandwidth: f64, out: Option<&Path>) -> HapoResult<()> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            (path.extension().and_then(|e| e.to_str()) == Some("jsonl")).then_some(path)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(HapoError::Data(format!(
            "no .jsonl buffer files in {}",
            dir.display()
        )));
    }
    let buffers = paths
        .iter()
        .map(|path| {
            let records: Vec<SpillRecord> = read_jsonl(path)?;
            trajectories_from_spill(&records)
        })
        .collect::<HapoResult<Vec<_>>>()?;
    let specs = [
        KernelSpec::GaussianTemporal { bandwidth },
        KernelSpec::ConstantAllSteps,
        KernelSpec::ConstantFinalOutcome,
    ];
    let comparisons = compare_estimators(&buffers, gamma, &specs)?;
    let lines: Vec<EstimatorLine> = comparisons
        .into_iter()
        .map(|c| EstimatorLine {
            kernel: c.label,
            median_error: c.median_error,
            per_buffer: c.per_buffer,
        })
        .collect();
    emit(jsonl_string(&lines)?, out)
}
