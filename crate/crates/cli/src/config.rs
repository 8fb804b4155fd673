//! Run configuration: a flat TOML key set with an explicit schema version.
//!
//! Precedence, lowest to highest: built-in defaults, the config file,
//! `DGK_SEED` (seed only), command-line flags.

use std::path::Path;

use dgk_core::codec::{ActionVocabulary, ResidualPrefix};
use dgk_core::evaluation::{EvalConfig, DEFAULT_MISS_THRESHOLD};
use dgk_core::exec::ExecMode;
use dgk_core::inference::{ClosedLoopConfig, PlanConfig};
use dgk_core::model::{DecoderVariant, ModelConfig};
use dgk_core::scaling::DEFAULT_FLOP_CONSTANT;
use dgk_core::simulator::{MapTemplate, ScriptKind, WorldConfig};
use dgk_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "DGK_SEED";

/// Invalid configuration, reported with the offending key.
#[derive(Debug)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: &str, message: impl Into<String>) -> Self {
        Self { field: field.to_string(), message: message.into() }
    }
}

/// Keys accepted in a config file. Every key is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub schema_version: Option<u32>,
    pub seed: Option<u64>,
    pub exec: Option<ExecMode>,
    // data
    pub scenes: Option<usize>,
    pub split: Option<f64>,
    pub history: Option<usize>,
    pub horizon: Option<usize>,
    pub tick: Option<f64>,
    pub templates: Option<Vec<MapTemplate>>,
    pub scripts: Option<Vec<ScriptKind>>,
    pub nearby_density: Option<f64>,
    pub max_nearby: Option<usize>,
    pub occlusion: Option<f64>,
    pub max_accel: Option<f64>,
    // model
    pub preset: Option<String>,
    pub d_model: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub dropout: Option<f64>,
    pub variant: Option<DecoderVariant>,
    pub queries: Option<usize>,
    pub bins: Option<usize>,
    // training
    pub batch_size: Option<usize>,
    pub max_lr: Option<f64>,
    pub min_lr: Option<f64>,
    pub epochs: Option<usize>,
    pub total_steps: Option<usize>,
    pub weight_decay: Option<f64>,
    pub grad_clip: Option<f64>,
    pub eval_every: Option<usize>,
    pub target_prefix: Option<ResidualPrefix>,
    // inference and evaluation
    pub samples: Option<usize>,
    pub modes: Option<usize>,
    pub temperature: Option<f64>,
    pub miss_threshold: Option<f64>,
    pub all_samples: Option<bool>,
    pub replan_period: Option<usize>,
    pub ticks: Option<usize>,
    // scaling grid
    pub grid_d_models: Option<Vec<usize>>,
    pub grid_data_sizes: Option<Vec<usize>>,
    pub grid_lrs: Option<Vec<f64>>,
    pub val_scenes: Option<usize>,
    pub flop_constant: Option<f64>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("<file>", format!("{}: {e}", path.display())))?;
        let cfg: FileConfig = toml::from_str(&text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field"))
                .map(str::to_string)
                .unwrap_or_else(|| key_at(&text, e.span()).unwrap_or_else(|| "<file>".into()));
            ConfigError { field, message: msg }
        })?;
        match cfg.schema_version {
            Some(SCHEMA_VERSION) => Ok(cfg),
            Some(v) => Err(ConfigError::new("schema_version", format!("unsupported schema version {v}, expected {SCHEMA_VERSION}"))),
            None => Err(ConfigError::new("schema_version", "missing schema_version")),
        }
    }

    /// Values set in `other` win.
    pub fn merge(&mut self, other: &FileConfig) {
        overlay!(self, other;
            schema_version, seed, exec, scenes, split, history, horizon, tick, templates, scripts,
            nearby_density, max_nearby, occlusion, max_accel, preset, d_model, layers, heads, mlp_ratio,
            dropout, variant, queries, bins, batch_size, max_lr, min_lr, epochs, total_steps, weight_decay,
            grad_clip, eval_every, target_prefix, samples, modes, temperature, miss_threshold, all_samples,
            replan_period, ticks, grid_d_models, grid_data_sizes, grid_lrs, val_scenes, flop_constant);
    }
}

/// Name of the key on the line containing `span`, for parse errors.
fn key_at(text: &str, span: Option<std::ops::Range<usize>>) -> Option<String> {
    let start = span?.start.min(text.len());
    let line_start = text[..start].rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next()?;
    let key = line.split('=').next()?.trim();
    (!key.is_empty()).then(|| key.to_string())
}

/// Fully resolved settings; serialized into every run manifest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Resolved {
    pub seed: u64,
    pub exec: ExecMode,
    pub scenes: usize,
    pub split: f64,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub bins: usize,
    pub train: TrainConfig,
    pub plan: PlanConfig,
    pub eval: EvalConfig,
    pub closed_loop: ClosedLoopConfig,
    pub grid_d_models: Vec<usize>,
    pub grid_data_sizes: Vec<usize>,
    pub grid_lrs: Vec<f64>,
    pub val_scenes: usize,
    pub flop_constant: f64,
}

impl Resolved {
    pub fn vocab(&self) -> ActionVocabulary {
        ActionVocabulary::from_accel(self.bins, self.world.max_accel, self.world.tick_duration).expect("validated")
    }
}

fn positive(field: &str, v: usize) -> Result<usize, ConfigError> {
    if v == 0 {
        Err(ConfigError::new(field, "must be >= 1"))
    } else {
        Ok(v)
    }
}

fn positive_f(field: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(ConfigError::new(field, "must be positive and finite"))
    }
}

pub fn resolve(c: &FileConfig) -> Result<Resolved, ConfigError> {
    let seed = c.seed.unwrap_or(0);
    let exec = c.exec.unwrap_or_default();
    let split = c.split.unwrap_or(0.9);
    if !(0.0..=1.0).contains(&split) {
        return Err(ConfigError::new("split", "must be in [0, 1]"));
    }
    let defaults = WorldConfig::default();
    let world = WorldConfig {
        templates: c.templates.clone().unwrap_or(defaults.templates),
        scripts: c.scripts.clone().unwrap_or(defaults.scripts),
        nearby_density: c.nearby_density.unwrap_or(defaults.nearby_density),
        max_nearby: c.max_nearby.unwrap_or(defaults.max_nearby),
        history: c.history.unwrap_or(defaults.history),
        horizon: positive("horizon", c.horizon.unwrap_or(defaults.horizon))?,
        tick_duration: positive_f("tick", c.tick.unwrap_or(defaults.tick_duration))?,
        max_accel: positive_f("max_accel", c.max_accel.unwrap_or(defaults.max_accel))?,
        occlusion: c.occlusion.unwrap_or(defaults.occlusion),
        seed,
    };
    world.validate().map_err(|e| {
        let msg = e.to_string();
        let field = ["templates", "scripts", "nearby_density", "history", "tick", "occlusion"]
            .into_iter()
            .find(|f| msg.contains(f.trim_end_matches('s')))
            .unwrap_or("world");
        ConfigError::new(field, msg)
    })?;
    let bins = c.bins.unwrap_or(13);
    ActionVocabulary::from_accel(bins, world.max_accel, world.tick_duration).map_err(|e| ConfigError::new("bins", e.to_string()))?;
    let vocab_size = bins * bins;

    let mut model = match &c.preset {
        Some(p) => {
            ModelConfig::preset(p, vocab_size, world.horizon).ok_or_else(|| ConfigError::new("preset", format!("unknown preset {p:?}")))?
        }
        None => ModelConfig::symmetric(32, 2, 4, vocab_size, world.horizon),
    };
    for (d, e) in [(&mut model.encoder.d_model, c.d_model), (&mut model.decoder.d_model, c.d_model)] {
        if let Some(v) = e {
            *d = v;
        }
    }
    if let Some(v) = c.layers {
        model.encoder.num_layers = v;
        model.decoder.num_layers = v;
    }
    if let Some(v) = c.heads {
        model.encoder.num_heads = v;
        model.decoder.num_heads = v;
    }
    if let Some(v) = c.mlp_ratio {
        model.encoder.mlp_ratio = v;
        model.decoder.mlp_ratio = v;
    }
    if let Some(v) = c.dropout {
        model.encoder.dropout = v;
        model.decoder.dropout = v;
    }
    if let Some(v) = c.queries {
        model.decoder.one_shot_num_queries = v;
    }
    model.variant = c.variant.unwrap_or(DecoderVariant::Autoregressive);
    model.validate().map_err(|e| {
        let msg = e.to_string();
        let field = if msg.contains("heads") {
            "heads"
        } else if msg.contains("d_model") {
            "d_model"
        } else if msg.contains("dropout") {
            "dropout"
        } else if msg.contains("queries") {
            "queries"
        } else {
            "model"
        };
        ConfigError::new(field, msg)
    })?;

    let mut train = TrainConfig { seed, exec, ..TrainConfig::default() };
    if let Some(lr) = c.max_lr {
        train = train.with_lr(lr);
    }
    train.min_lr = c.min_lr.unwrap_or(train.min_lr);
    train.batch_size = positive("batch_size", c.batch_size.unwrap_or(train.batch_size))?;
    train.epochs = positive("epochs", c.epochs.unwrap_or(train.epochs))?;
    train.total_steps = c.total_steps.or(train.total_steps);
    train.weight_decay = c.weight_decay.unwrap_or(train.weight_decay);
    train.grad_clip = c.grad_clip.or(train.grad_clip);
    train.eval_every = c.eval_every.unwrap_or(train.eval_every);
    train.target_prefix = c.target_prefix.unwrap_or(train.target_prefix);
    train.validate().map_err(|e| {
        let msg = e.to_string();
        let field = ["max_lr", "min_lr", "weight_decay", "grad_clip", "batch_size", "epochs"]
            .into_iter()
            .find(|f| msg.contains(f))
            .unwrap_or(if msg.contains("learning rate") { "max_lr" } else { "train" });
        ConfigError::new(field, msg)
    })?;
    if train.total_steps == Some(0) {
        return Err(ConfigError::new("total_steps", "must be >= 1"));
    }

    let plan = PlanConfig {
        samples: c.samples.unwrap_or(64),
        modes: c.modes.unwrap_or(6),
        temperature: c.temperature.unwrap_or(1.0),
        horizon: None,
        seed,
        exec,
        ..PlanConfig::default()
    };
    plan.validate().map_err(|e| {
        let msg = e.to_string();
        let field = if msg.contains("temperature") {
            "temperature"
        } else if msg.contains("modes") {
            "modes"
        } else {
            "samples"
        };
        ConfigError::new(field, msg)
    })?;
    let eval = EvalConfig {
        plan: plan.clone(),
        miss_threshold: positive_f("miss_threshold", c.miss_threshold.unwrap_or(DEFAULT_MISS_THRESHOLD))?,
        t_eval: None,
        all_samples: c.all_samples.unwrap_or(false),
        exec,
    };
    let closed_loop = ClosedLoopConfig {
        replan_period: positive("replan_period", c.replan_period.unwrap_or(10))?,
        ticks: positive("ticks", c.ticks.unwrap_or(200))?,
        plan: plan.clone(),
    };
    let grid_d_models = c.grid_d_models.clone().unwrap_or_else(|| vec![16, 32, 48]);
    if grid_d_models.is_empty() || grid_d_models.iter().any(|&d| d == 0 || d % 2 != 0 || d % model.encoder.num_heads != 0) {
        return Err(ConfigError::new("grid_d_models", "entries must be even, positive and divisible by heads"));
    }
    let grid_data_sizes = c.grid_data_sizes.clone().unwrap_or_else(|| vec![1000, 4000, 16000, 64000]);
    if grid_data_sizes.is_empty() || grid_data_sizes.contains(&0) {
        return Err(ConfigError::new("grid_data_sizes", "entries must be positive"));
    }
    let grid_lrs = c.grid_lrs.clone().unwrap_or_else(|| vec![3e-3]);
    if grid_lrs.is_empty() || grid_lrs.iter().any(|&l| !(l > 0.0)) {
        return Err(ConfigError::new("grid_lrs", "entries must be positive"));
    }
    Ok(Resolved {
        seed,
        exec,
        scenes: positive("scenes", c.scenes.unwrap_or(1000))?,
        split,
        world,
        model,
        bins,
        train,
        plan,
        eval,
        closed_loop,
        grid_d_models,
        grid_data_sizes,
        grid_lrs,
        val_scenes: positive("val_scenes", c.val_scenes.unwrap_or(256))?,
        flop_constant: positive_f("flop_constant", c.flop_constant.unwrap_or(DEFAULT_FLOP_CONSTANT))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let r = resolve(&FileConfig::default()).unwrap();
        assert_eq!(r.model.decoder.vocab_size, 169);
        assert_eq!(r.plan.modes, 6);
        assert_eq!(r.train.min_lr, r.train.max_lr / 10.0);
    }

    #[test]
    fn later_values_win() {
        let mut a = FileConfig { seed: Some(1), scenes: Some(5), ..FileConfig::default() };
        a.merge(&FileConfig { seed: Some(2), ..FileConfig::default() });
        assert_eq!((a.seed, a.scenes), (Some(2), Some(5)));
    }

    #[test]
    fn errors_name_the_field() {
        let e = resolve(&FileConfig { batch_size: Some(0), ..FileConfig::default() }).unwrap_err();
        assert_eq!(e.field, "batch_size");
        let e = resolve(&FileConfig { heads: Some(3), ..FileConfig::default() }).unwrap_err();
        assert_eq!(e.field, "heads");
        let e = resolve(&FileConfig { temperature: Some(-1.0), ..FileConfig::default() }).unwrap_err();
        assert_eq!(e.field, "temperature");
    }

    #[test]
    fn file_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "schema_version = 1\nbogus = 3\n").unwrap();
        assert_eq!(FileConfig::load(&p).unwrap_err().field, "bogus");
        std::fs::write(&p, "schema_version = 1\nbatch_size = \"x\"\n").unwrap();
        assert_eq!(FileConfig::load(&p).unwrap_err().field, "batch_size");
        std::fs::write(&p, "seed = 1\n").unwrap();
        assert_eq!(FileConfig::load(&p).unwrap_err().field, "schema_version");
    }
}
