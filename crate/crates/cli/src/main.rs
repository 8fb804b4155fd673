//! `dgk`: data generation, training, evaluation, rollout, closed-loop
//! simulation, scaling grids, law fitting and plotting.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration. Failures print a JSON object on stderr.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dgk_core::exec::ExecMode;
use dgk_core::model::DecoderVariant;
use dgk_core::simulator::{MapTemplate, ScriptKind};
use serde_json::json;

use config::{ConfigError, FileConfig};

#[derive(Parser, Debug)]
#[command(name = "dgk", version, about = "Autoregressive behavior model toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalArgs {
    /// TOML config file (flat keys, `schema_version = 1`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides `DGK_SEED` and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    exec: Option<ExecArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExecArg {
    Sequential,
    Parallel,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Autoregressive,
    OneShot,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TemplateArg {
    StraightRoad,
    Intersection,
    TwoLaneWithParking,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScriptArg {
    LaneFollow,
    LaneChange,
    DoublePark,
    Jaywalk,
    Oncoming,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Compute planning metrics for a checkpoint or a predictions file.
    Eval(EvalArgs),
    /// Sample trajectories for one scene.
    Rollout(RolloutArgs),
    /// Drive the double-park world with a checkpoint.
    ClosedLoop(ClosedLoopArgs),
    /// Run a model-size by data-size scaling grid.
    Scale(ScaleArgs),
    /// Fit log y = a log x + b to two CSV columns.
    FitLaw(FitLawArgs),
    /// Render SVG figures.
    #[command(subcommand)]
    Plot(PlotCommand),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub split: Option<f64>,
    #[arg(long, value_enum)]
    template: Vec<TemplateArg>,
    #[arg(long, value_enum)]
    script: Vec<ScriptArg>,
    #[arg(long)]
    pub nearby_density: Option<f64>,
    #[arg(long)]
    pub history: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Also write JSON-lines copies of the splits.
    #[arg(long)]
    pub jsonl: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this global step (the checkpoint can be resumed).
    #[arg(long)]
    pub stop_at: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Scenes file (`.dgk`).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// JSON array of trajectory sets keyed by scene id, used instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub predictions: Option<PathBuf>,
    /// Baseline `report.json` for the normalized table.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    pub name: String,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub modes: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub miss_threshold: Option<f64>,
    /// Score offroad and collision over all samples instead of the modes.
    #[arg(long)]
    pub all_samples: bool,
}

#[derive(Args, Debug)]
pub struct RolloutArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub modes: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ClosedLoopArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ticks: Option<usize>,
    #[arg(long)]
    pub replan_period: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub modes: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ScaleArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub d_models: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub data_sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub lrs: Option<Vec<f64>>,
    #[arg(long)]
    pub val_scenes: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// EMA factor applied to training curves before taking the min-bound envelope; 0 disables.
    #[arg(long, default_value_t = 0.99)]
    pub smoothing: f64,
}

#[derive(Args, Debug)]
pub struct FitLawArgs {
    /// CSV with a header row.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub x: String,
    #[arg(long)]
    pub y: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum PlotCommand {
    /// Log-log scatter of two CSV columns, one series per group value.
    Loglog(LoglogArgs),
    /// Overhead view of a scene with optional predicted modes.
    Scene(ScenePlotArgs),
}

#[derive(Args, Debug)]
pub struct LoglogArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub x: String,
    #[arg(long)]
    pub y: String,
    #[arg(long)]
    pub group: Option<String>,
    /// Overlay an OLS power-law fit over all points.
    #[arg(long)]
    pub fit: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ScenePlotArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// `trajectories.json` from `rollout`.
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    #[arg(long, default_value_t = 60.0)]
    pub extent: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failure with its exit code.
#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Run { kind: &'static str, message: String },
}

impl CliError {
    pub fn run(kind: &'static str, e: impl std::fmt::Display) -> Self {
        CliError::Run { kind, message: e.to_string() }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

fn flag_overrides(global: &GlobalArgs, cmd: &Command) -> FileConfig {
    let mut f = FileConfig { seed: global.seed, ..FileConfig::default() };
    f.exec = global.exec.map(|e| match e {
        ExecArg::Sequential => ExecMode::Sequential,
        ExecArg::Parallel => ExecMode::Parallel,
    });
    match cmd {
        Command::GenData(a) => {
            f.scenes = a.scenes;
            f.split = a.split;
            f.nearby_density = a.nearby_density;
            f.history = a.history;
            f.horizon = a.horizon;
            if !a.template.is_empty() {
                f.templates = Some(
                    a.template
                        .iter()
                        .map(|t| match t {
                            TemplateArg::StraightRoad => MapTemplate::StraightRoad,
                            TemplateArg::Intersection => MapTemplate::Intersection,
                            TemplateArg::TwoLaneWithParking => MapTemplate::TwoLaneWithParking,
                        })
                        .collect(),
                );
            }
            if !a.script.is_empty() {
                f.scripts = Some(
                    a.script
                        .iter()
                        .map(|s| match s {
                            ScriptArg::LaneFollow => ScriptKind::LaneFollow,
                            ScriptArg::LaneChange => ScriptKind::LaneChange,
                            ScriptArg::DoublePark => ScriptKind::DoublePark,
                            ScriptArg::Jaywalk => ScriptKind::Jaywalk,
                            ScriptArg::Oncoming => ScriptKind::Oncoming,
                        })
                        .collect(),
                );
            }
        }
        Command::Train(a) => {
            f.preset = a.preset.clone();
            f.d_model = a.d_model;
            f.layers = a.layers;
            f.heads = a.heads;
            f.variant = a.variant.map(|v| match v {
                VariantArg::Autoregressive => DecoderVariant::Autoregressive,
                VariantArg::OneShot => DecoderVariant::OneShot,
            });
            f.batch_size = a.batch_size;
            f.max_lr = a.lr;
            if a.lr.is_some() {
                f.min_lr = a.lr.map(|l| l / 10.0);
            }
            f.epochs = a.epochs;
            f.total_steps = a.steps;
            f.eval_every = a.eval_every;
        }
        Command::Eval(a) => {
            f.samples = a.samples;
            f.modes = a.modes;
            f.temperature = a.temperature;
            f.miss_threshold = a.miss_threshold;
            f.all_samples = a.all_samples.then_some(true);
        }
        Command::Rollout(a) => {
            f.samples = a.samples;
            f.modes = a.modes;
            f.temperature = a.temperature;
        }
        Command::ClosedLoop(a) => {
            f.ticks = a.ticks;
            f.replan_period = a.replan_period;
            f.samples = a.samples;
            f.modes = a.modes;
            f.temperature = a.temperature;
        }
        Command::Scale(a) => {
            f.grid_d_models = a.d_models.clone();
            f.grid_data_sizes = a.data_sizes.clone();
            f.grid_lrs = a.lrs.clone();
            f.val_scenes = a.val_scenes;
            f.horizon = a.horizon;
            f.batch_size = a.batch_size;
            f.epochs = a.epochs;
        }
        Command::FitLaw(_) | Command::Plot(_) => {}
    }
    f
}

fn load_config(global: &GlobalArgs, cmd: &Command) -> Result<config::Resolved, ConfigError> {
    let mut file = match &global.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    if let Ok(v) = std::env::var(config::SEED_ENV) {
        let seed = v.trim().parse().map_err(|_| ConfigError::new(config::SEED_ENV, format!("not an unsigned integer: {v:?}")))?;
        file.seed = Some(seed);
    }
    file.merge(&flag_overrides(global, cmd));
    config::resolve(&file)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli.global, &cli.command)?;
    match &cli.command {
        Command::GenData(a) => commands::gen_data(&cfg, a),
        Command::Train(a) => commands::train(&cfg, a),
        Command::Eval(a) => commands::eval(&cfg, a),
        Command::Rollout(a) => commands::rollout(&cfg, a),
        Command::ClosedLoop(a) => commands::closed_loop(&cfg, a),
        Command::Scale(a) => commands::scale(&cfg, a),
        Command::FitLaw(a) => commands::fit_law(&cfg, a),
        Command::Plot(PlotCommand::Loglog(a)) => commands::plot_loglog(&cfg, a),
        Command::Plot(PlotCommand::Scene(a)) => commands::plot_scene(&cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(e)) => {
            eprintln!("{}", json!({ "error": "invalid_config", "field": e.field, "message": e.message }));
            ExitCode::from(3)
        }
        Err(CliError::Run { kind, message }) => {
            eprintln!("{}", json!({ "error": kind, "message": message }));
            ExitCode::from(1)
        }
    }
}
