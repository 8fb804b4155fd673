//! Subcommand implementations. Each writes its artifacts and a run manifest
//! into `--out`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dgk_core::checkpoint::Checkpoint;
use dgk_core::codec::ActionVocabulary;
use dgk_core::dataset::{read_dataset, IndexedDataset, SceneSource};
use dgk_core::evaluation::{evaluate_model, normalize_metrics, normalized_csv, report, MetricReport, ScenePrediction};
use dgk_core::inference::{plan, run_closed_loop, PlanConfig, TrajectorySet};
use dgk_core::model::{Model, ModelConfig};
use dgk_core::plot::{loglog_svg, overhead_svg, Series};
use dgk_core::scaling::{
    fit_power_law, iso_flop_groups, min_bound, run_grid, write_records_csv, GridModel, GridSpec, PowerLawFit, ScalingRecord,
};
use dgk_core::scene::Scene;
use dgk_core::seed::{derive_seed, tags};
use dgk_core::simulator::{generate_dataset, write_dataset_dir, DatasetManifest, World, WorldConfig, MANIFEST_FILE, TRAIN_FILE, VAL_FILE};
use dgk_core::training::{prepare_all, train as run_training, write_curve_csv, Trainer};
use serde::Serialize;
use serde_json::json;

use crate::config::{ConfigError, Resolved};
use crate::{
    manifest, CliError, ClosedLoopArgs, EvalArgs, FitLawArgs, GenDataArgs, LoglogArgs, RolloutArgs, ScaleArgs, ScenePlotArgs, TrainArgs,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.dgkc";

fn io(e: impl std::fmt::Display) -> CliError {
    CliError::run("io", e)
}

fn create_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::run("io", format!("{}: {e}", out.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(io)?;
    fs::write(path, text + "\n").map_err(|e| CliError::run("io", format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::run("io", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::run("input", format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::run("checkpoint", e))
}

fn plan_seed(cfg: &PlanConfig, scene: &Scene) -> PlanConfig {
    PlanConfig { seed: derive_seed(cfg.seed, tags::SAMPLE, scene.scene_id), ..cfg.clone() }
}

pub fn gen_data(cfg: &Resolved, a: &GenDataArgs) -> Result<(), CliError> {
    let ds = generate_dataset(&cfg.world, cfg.scenes, cfg.split, cfg.seed, cfg.exec).map_err(|e| CliError::run("generate", e))?;
    write_dataset_dir(&a.out, &ds, a.jsonl).map_err(|e| CliError::run("io", e))?;
    let mut outputs = vec![TRAIN_FILE, VAL_FILE, MANIFEST_FILE];
    if a.jsonl {
        outputs.extend(["train.jsonl", "val.jsonl"]);
    }
    manifest::write(&a.out, "gen-data", cfg, json!({ "jsonl": a.jsonl }), &[], &outputs)?;
    eprintln!("wrote {} train and {} val scenes to {}", ds.manifest.train_count, ds.manifest.val_count, a.out.display());
    Ok(())
}

/// Vocabulary and model shape for a dataset directory: the dataset's
/// acceleration bound, tick and horizon take precedence over the config.
fn dataset_vocab(cfg: &Resolved, dir: &Path) -> Result<(ActionVocabulary, ModelConfig), CliError> {
    let m: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let vocab = ActionVocabulary::from_accel(cfg.bins, m.world.max_accel, m.world.tick_duration)
        .map_err(|e| CliError::Config(ConfigError::new("bins", e.to_string())))?;
    let mut model = cfg.model.clone();
    model.decoder.horizon = m.world.horizon;
    Ok((vocab, model))
}

pub fn train(cfg: &Resolved, a: &TrainArgs) -> Result<(), CliError> {
    create_out(&a.out)?;
    let source = IndexedDataset::open(&a.data.join(TRAIN_FILE)).map_err(|e| CliError::run("data", e))?;
    let val_scenes = read_dataset(&a.data.join(VAL_FILE)).map_err(|e| CliError::run("data", e))?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = load_model(p)?;
            let state = ck.train.ok_or_else(|| CliError::run("checkpoint", "checkpoint has no optimizer state to resume from"))?;
            if state.train_len != source.len() {
                return Err(CliError::run(
                    "data",
                    format!("checkpoint was trained on {} scenes, dataset has {}", state.train_len, source.len()),
                ));
            }
            Trainer::resume(ck.model, state).map_err(|e| CliError::run("train", e))?
        }
        None => {
            let (vocab, model_cfg) = dataset_vocab(cfg, &a.data)?;
            let model = Model::new(model_cfg, vocab, derive_seed(cfg.seed, tags::INIT, 0)).map_err(|e| CliError::run("model", e))?;
            Trainer::new(model, cfg.train.clone(), source.len()).map_err(|e| CliError::run("train", e))?
        }
    };
    let horizon = trainer.model.config.decoder.horizon;
    let val = prepare_all(&val_scenes, &trainer.model.vocab, trainer.cfg.target_prefix, horizon, trainer.cfg.exec)
        .map_err(|e| CliError::run("data", e))?;
    let total = trainer.total_steps();
    let outcome = run_training(&mut trainer, &source, &val, a.stop_at, |row| {
        if row.step % 50 == 0 || row.val_loss.is_some() {
            eprintln!(
                "step {}/{total} lr {:.2e} loss {:.4}{}",
                row.step + 1,
                row.lr,
                row.train_loss,
                row.val_loss.map(|v| format!(" val {v:.4}")).unwrap_or_default()
            );
        }
    })
    .map_err(|e| CliError::run("train", e))?;
    let curve = File::create(a.out.join("curve.csv")).map_err(io)?;
    write_curve_csv(BufWriter::new(curve), &outcome.curve).map_err(io)?;
    let state = trainer.state();
    let ck = Checkpoint { model: trainer.model, train: Some(state) };
    ck.save(&a.out.join(CHECKPOINT_FILE)).map_err(|e| CliError::run("checkpoint", e))?;
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.resume.clone());
    manifest::write(
        &a.out,
        "train",
        cfg,
        json!({ "stop_at": a.stop_at, "resumed": a.resume.is_some(), "model": ck.model.config, "train": ck.train.as_ref().map(|s| &s.config),
                "num_params": ck.model.num_params(), "final_step": ck.train.as_ref().map(|s| s.step), "init_val_loss": outcome.init_val_loss,
                "final_val_loss": outcome.final_val_loss }),
        &inputs,
        &[CHECKPOINT_FILE, "curve.csv"],
    )
}

fn read_scenes(path: &Path, limit: Option<usize>) -> Result<Vec<Scene>, CliError> {
    let mut scenes = read_dataset(path).map_err(|e| CliError::run("data", e))?;
    if let Some(n) = limit {
        scenes.truncate(n);
    }
    if scenes.is_empty() {
        return Err(CliError::run("data", format!("{} holds no scenes", path.display())));
    }
    Ok(scenes)
}

pub fn eval(cfg: &Resolved, a: &EvalArgs) -> Result<(), CliError> {
    create_out(&a.out)?;
    let scenes = read_scenes(&a.data, a.limit)?;
    let mut inputs = vec![a.data.clone()];
    let rep = if let Some(p) = &a.predictions {
        inputs.push(p.clone());
        let sets: Vec<TrajectorySet> = read_json(p)?;
        let by_id: BTreeMap<u64, &TrajectorySet> = sets.iter().map(|s| (s.scene_id, s)).collect();
        let preds = scenes
            .iter()
            .map(|scene| {
                let set = by_id
                    .get(&scene.scene_id)
                    .ok_or_else(|| CliError::run("input", format!("no predictions for scene {}", scene.scene_id)))?;
                let scored = if cfg.eval.all_samples && !set.samples.is_empty() { set.samples.clone() } else { set.modes.clone() };
                Ok(ScenePrediction { scene, modes: set.modes.clone(), scored })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        report(&preds, cfg.eval.miss_threshold, cfg.eval.t_eval)
    } else {
        let ck_path = a.checkpoint.as_ref().expect("clap requires checkpoint or predictions");
        inputs.push(ck_path.clone());
        let ck = load_model(ck_path)?;
        evaluate_model(&ck.model, &scenes, &cfg.eval)
    }
    .map_err(|e| CliError::run("eval", e))?;
    write_json(&a.out.join("report.json"), &rep)?;
    let mut outputs = vec!["report.json"];
    if let Some(b) = &a.baseline {
        inputs.push(b.clone());
        let base: MetricReport = read_json(b)?;
        let rows = [normalize_metrics("baseline", &base, &base), normalize_metrics(&a.name, &rep, &base)]
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::run("eval", e))?;
        fs::write(a.out.join("normalized.csv"), normalized_csv(&rows)).map_err(io)?;
        outputs.push("normalized.csv");
    }
    println!("{}", serde_json::to_string(&rep).map_err(io)?);
    manifest::write(&a.out, "eval", cfg, json!({ "name": a.name, "limit": a.limit }), &inputs, &outputs)
}

pub fn rollout(cfg: &Resolved, a: &RolloutArgs) -> Result<(), CliError> {
    create_out(&a.out)?;
    let ck = load_model(&a.checkpoint)?;
    let source = IndexedDataset::open(&a.data).map_err(|e| CliError::run("data", e))?;
    let scene = source.scene(a.index).map_err(|e| CliError::run("data", e))?;
    let set = plan(&ck.model, &scene, &plan_seed(&cfg.plan, &scene)).map_err(|e| CliError::run("inference", e))?;
    write_json(&a.out.join("trajectories.json"), &set)?;
    fs::write(a.out.join("overhead.svg"), overhead_svg(&scene, &set.modes, &set.mode_probs, 60.0)).map_err(io)?;
    manifest::write(
        &a.out,
        "rollout",
        cfg,
        json!({ "index": a.index, "scene_id": scene.scene_id }),
        &[a.checkpoint.clone(), a.data.clone()],
        &["trajectories.json", "overhead.svg"],
    )
}

pub fn closed_loop(cfg: &Resolved, a: &ClosedLoopArgs) -> Result<(), CliError> {
    create_out(&a.out)?;
    let ck = load_model(&a.checkpoint)?;
    let world_cfg = WorldConfig {
        history: cfg.world.history,
        horizon: ck.model.config.decoder.horizon,
        tick_duration: cfg.world.tick_duration,
        ..WorldConfig::double_park()
    };
    let mut world = World::double_park(world_cfg, cfg.seed, cfg.closed_loop.ticks);
    let start = world.observe().ok_or_else(|| CliError::run("world", "world has no ego agent"))?;
    let rep = run_closed_loop(&mut world, &ck.model, &cfg.closed_loop).map_err(|e| CliError::run("inference", e))?;
    write_json(&a.out.join("report.json"), &rep)?;
    let mut view = start;
    view.future_gt = None;
    fs::write(a.out.join("closed_loop.svg"), overhead_svg(&view, std::slice::from_ref(&rep.executed), &[1.0], 40.0)).map_err(io)?;
    println!(
        "{}",
        json!({ "ticks": rep.ticks, "replans": rep.logs.len(), "faults": rep.faults, "offroad_ticks": rep.offroad_ticks, "collision_ticks": rep.collision_ticks })
    );
    manifest::write(&a.out, "closed-loop", cfg, json!({}), std::slice::from_ref(&a.checkpoint), &["report.json", "closed_loop.svg"])
}

/// Log-spaced bin edges covering `[lo, hi]`.
fn log_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    let mut edges: Vec<f64> = (0..=bins).map(|i| (a + (b - a) * i as f64 / bins as f64).exp()).collect();
    edges[0] = lo;
    edges[bins] = hi * (1.0 + 1e-9);
    edges
}

pub fn scale(cfg: &Resolved, a: &ScaleArgs) -> Result<(), CliError> {
    if !(0.0..1.0).contains(&a.smoothing) {
        return Err(CliError::Config(ConfigError::new("smoothing", "must be in [0, 1)")));
    }
    create_out(&a.out)?;
    let vocab = cfg.vocab();
    let (layers, heads, horizon) = (cfg.model.decoder.num_layers, cfg.model.decoder.num_heads, cfg.world.horizon);
    let spec = GridSpec {
        models: cfg
            .grid_d_models
            .iter()
            .map(|&d| GridModel {
                label: format!("d{d}"),
                config: ModelConfig::symmetric(d, layers, heads, vocab.size(), horizon),
                learning_rates: cfg.grid_lrs.clone(),
            })
            .collect(),
        data_sizes: cfg.grid_data_sizes.clone(),
        train: cfg.train.clone(),
        world: cfg.world.clone(),
        val_scenes: cfg.val_scenes,
        init_seed: derive_seed(cfg.seed, tags::INIT, 0),
        flop_constant: cfg.flop_constant,
    };
    let mut runs = BufWriter::new(File::create(a.out.join("runs.jsonl")).map_err(io)?);
    let mut curves = Vec::new();
    let mut run_err = None;
    let records = run_grid(&spec, &vocab, |r| {
        eprintln!(
            "{} D={} lr={} val={:?}{}",
            r.label,
            r.unique_samples,
            r.max_lr,
            r.val_loss,
            r.error.as_deref().map(|e| format!(" error: {e}")).unwrap_or_default()
        );
        if let Err(e) = serde_json::to_writer(&mut runs, r).map_err(io).and_then(|_| writeln!(runs).map_err(io)) {
            run_err.get_or_insert(e);
        }
        if !r.curve.is_empty() {
            curves.push(r.curve.clone());
        }
    })
    .map_err(|e| CliError::run("scale", e))?;
    if let Some(e) = run_err {
        return Err(e);
    }
    runs.flush().map_err(io)?;
    write_records_csv(BufWriter::new(File::create(a.out.join("records.csv")).map_err(io)?), &records)
        .map_err(|e| CliError::run("io", e))?;

    let ok: Vec<&ScalingRecord> = records.iter().filter(|r| !r.diverged).collect();
    let mut fits: BTreeMap<String, Option<PowerLawFit>> = BTreeMap::new();
    let mut series = Vec::new();
    for m in &spec.models {
        let pts: Vec<(f64, f64)> = ok.iter().filter(|r| r.label == m.label).map(|r| (r.unique_samples as f64, r.val_loss)).collect();
        fits.insert(m.label.clone(), fit_power_law(&pts).ok());
        series.push(Series { label: m.label.clone(), points: pts });
    }
    write_json(&a.out.join("fit.json"), &fits)?;
    let smoothing = (a.smoothing > 0.0).then_some(a.smoothing);
    write_json(&a.out.join("envelope.json"), &min_bound(&curves, smoothing))?;
    let flops: Vec<f64> = ok.iter().map(|r| r.flops).collect();
    let iso = if flops.is_empty() {
        None
    } else {
        let (lo, hi) = flops.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &f| (l.min(f), h.max(f)));
        Some(iso_flop_groups(&records, &log_edges(lo, hi, if hi > lo { 4 } else { 1 })).map_err(|e| CliError::run("scale", e))?)
    };
    write_json(&a.out.join("iso_flop.json"), &iso)?;
    let largest = spec.models.last().and_then(|m| fits.get(&m.label).copied().flatten());
    fs::write(
        a.out.join("data_scaling.svg"),
        loglog_svg("Validation loss vs unique scenes", "unique scenes", "val loss", &series, largest.as_ref()),
    )
    .map_err(io)?;
    manifest::write(
        &a.out,
        "scale",
        cfg,
        json!({}),
        &[],
        &["records.csv", "runs.jsonl", "fit.json", "envelope.json", "iso_flop.json", "data_scaling.svg"],
    )
}

/// Reads numeric columns `x` and `y` (and an optional grouping column).
fn read_columns(path: &Path, x: &str, y: &str, group: Option<&str>) -> Result<Vec<(String, f64, f64)>, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::run("input", format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| CliError::run("input", e))?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| CliError::run("input", format!("column {name:?} not in {}", path.display())))
    };
    let (xi, yi) = (col(x)?, col(y)?);
    let gi = group.map(col).transpose()?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::run("input", e))?;
        let num = |i: usize| {
            rec.get(i)
                .unwrap_or("")
                .trim()
                .parse::<f64>()
                .map_err(|_| CliError::run("input", format!("row {}: column {} is not a number", line + 2, &headers[i])))
        };
        out.push((gi.map(|g| rec.get(g).unwrap_or("").to_string()).unwrap_or_default(), num(xi)?, num(yi)?));
    }
    Ok(out)
}

pub fn fit_law(cfg: &Resolved, a: &FitLawArgs) -> Result<(), CliError> {
    create_out(&a.out)?;
    let rows = read_columns(&a.input, &a.x, &a.y, None)?;
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.1, r.2)).collect();
    let fit = fit_power_law(&pts).map_err(|e| CliError::run("fit", e))?;
    let out =
        json!({ "x": a.x, "y": a.y, "points": pts.len(), "slope": fit.slope, "intercept": fit.intercept, "r_squared": fit.r_squared });
    println!("{out}");
    write_json(&a.out.join("fit.json"), &out)?;
    let svg = loglog_svg(&format!("{} vs {}", a.y, a.x), &a.x, &a.y, &[Series { label: a.y.clone(), points: pts }], Some(&fit));
    fs::write(a.out.join("fit.svg"), svg).map_err(io)?;
    manifest::write(&a.out, "fit-law", cfg, json!({ "x": a.x, "y": a.y }), std::slice::from_ref(&a.input), &["fit.json", "fit.svg"])
}

pub fn plot_loglog(cfg: &Resolved, a: &LoglogArgs) -> Result<(), CliError> {
    let rows = read_columns(&a.input, &a.x, &a.y, a.group.as_deref())?;
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (g, x, y) in &rows {
        groups.entry(g.clone()).or_default().push((*x, *y));
    }
    let series: Vec<Series> =
        groups.into_iter().map(|(label, points)| Series { label: if label.is_empty() { a.y.clone() } else { label }, points }).collect();
    let fit = if a.fit {
        Some(fit_power_law(&rows.iter().map(|r| (r.1, r.2)).collect::<Vec<_>>()).map_err(|e| CliError::run("fit", e))?)
    } else {
        None
    };
    write_svg(
        cfg,
        "plot loglog",
        &a.out,
        &loglog_svg(&format!("{} vs {}", a.y, a.x), &a.x, &a.y, &series, fit.as_ref()),
        std::slice::from_ref(&a.input),
    )
}

pub fn plot_scene(cfg: &Resolved, a: &ScenePlotArgs) -> Result<(), CliError> {
    let source = IndexedDataset::open(&a.data).map_err(|e| CliError::run("data", e))?;
    let scene = source.scene(a.index).map_err(|e| CliError::run("data", e))?;
    let mut inputs = vec![a.data.clone()];
    let (modes, probs) = match &a.trajectories {
        Some(p) => {
            inputs.push(p.clone());
            let set: TrajectorySet = read_json(p)?;
            (set.modes, set.mode_probs)
        }
        None => (Vec::new(), Vec::new()),
    };
    write_svg(cfg, "plot scene", &a.out, &overhead_svg(&scene, &modes, &probs, a.extent), &inputs)
}

/// `out` names the SVG file; the manifest goes next to it.
fn write_svg(cfg: &Resolved, sub: &str, out: &Path, svg: &str, inputs: &[PathBuf]) -> Result<(), CliError> {
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_out(dir)?;
    fs::write(out, svg).map_err(io)?;
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    manifest::write(dir, sub, cfg, json!({ "out": out.display().to_string() }), inputs, &[&name])
}
