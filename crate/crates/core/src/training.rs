//! Teacher-forced training: cross-entropy over action tokens, AdamW with a
//! cosine learning-rate schedule, global-norm clipping, deterministic data
//! order, checkpoint resume and finite-difference gradient checks.
//!
//! Batches are split into fixed-size chunks whose gradients are summed in
//! index order, so sequential and parallel execution produce identical bits.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{actions_to_positions, positions_to_actions, ActionVocabulary, CodecError, ResidualPrefix};
use crate::dataset::{DataError, SceneSource};
use crate::exec::{map_range, ExecMode};
use crate::geometry::Vec2;
use crate::model::{DecoderVariant, Model, ModelConfig, ModelError};
use crate::nn::{log_softmax_row, Grads, Mat, ParamStore, Tape, Var};
use crate::scene::{normalize_scene, vectorize, Scene, SceneError, VectorSet, POSITION_SCALE};
use crate::seed::{derive_rng, tags};

/// Examples per gradient chunk; fixed so the reduction order never depends
/// on the worker count.
const CHUNK: usize = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("learning-rate step {step} outside [0, {total}]")]
    Schedule { step: usize, total: usize },
    #[error("training diverged at step {step} (loss {loss}); config: {config}")]
    Diverged { step: usize, loss: f64, config: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("scene {scene_id}: {reason}")]
    Example { scene_id: u64, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_lr: f64,
    pub min_lr: f64,
    /// Defaults to one pass over `epochs` epochs.
    pub total_steps: Option<usize>,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to projection matrices only.
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Validation interval in steps; 0 evaluates only before and after training.
    pub eval_every: usize,
    pub target_prefix: ResidualPrefix,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_lr: 1e-3,
            min_lr: 1e-4,
            total_steps: None,
            epochs: 1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            seed: 0,
            eval_every: 0,
            target_prefix: ResidualPrefix::Reconstructed,
            exec: ExecMode::default(),
        }
    }
}

impl TrainConfig {
    /// `min_lr` follows as a tenth of `max_lr`.
    pub fn with_lr(mut self, max_lr: f64) -> Self {
        self.max_lr = max_lr;
        self.min_lr = max_lr / 10.0;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.max_lr > 0.0 && self.min_lr >= 0.0 && self.max_lr >= self.min_lr) {
            return bad("learning rates must satisfy max_lr >= min_lr >= 0 and max_lr > 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("adam betas must be in [0, 1)");
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay nonnegative");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

/// Cosine decay from `max_lr` at step 0 to `min_lr` at `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig, total_steps: usize) -> Result<f64, TrainError> {
    if step > total_steps {
        return Err(TrainError::Schedule { step, total: total_steps });
    }
    if total_steps == 0 {
        return Ok(cfg.max_lr);
    }
    let progress = step as f64 / total_steps as f64;
    Ok(cfg.max_lr - 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 - (PI * progress).cos()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CeLoss {
    pub mean: f64,
    pub per_step: Vec<f64>,
}

/// Mean over rows of `-log softmax(row)[target]`.
pub fn ce_loss(logits: &Mat, targets: &[usize]) -> CeLoss {
    assert_eq!(logits.nrows(), targets.len(), "one target per logits row");
    let per_step: Vec<f64> = logits.rows().into_iter().zip(targets).map(|(row, &t)| -log_softmax_row(row)[t]).collect();
    let mean = per_step.iter().sum::<f64>() / per_step.len() as f64;
    CeLoss { mean, per_step }
}

/// A scene prepared for the decoder: agent-frame vectors, decoder inputs
/// `s_0..s_{T-1}`, action targets and the agent-frame future.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub scene_id: u64,
    pub vectors: VectorSet,
    pub seeds: (Vec2, Vec2),
    pub inputs: Vec<Vec2>,
    pub targets: Vec<usize>,
    pub future: Vec<Vec2>,
    /// Steps whose residual was clamped to the grid edge.
    pub saturated: usize,
}

pub fn prepare_example(scene: &Scene, vocab: &ActionVocabulary, prefix: ResidualPrefix, horizon: usize) -> Result<Example, TrainError> {
    scene.validate()?;
    let norm = normalize_scene(scene)?;
    let future = norm.future_gt.clone().ok_or(TrainError::Example { scene_id: scene.scene_id, reason: "missing future".into() })?;
    if future.len() != horizon {
        return Err(TrainError::Example {
            scene_id: scene.scene_id,
            reason: format!("future has {} ticks, decoder horizon is {horizon}", future.len()),
        });
    }
    let (s_m1, s_0) = norm.seed_positions();
    let mut path = Vec::with_capacity(horizon + 2);
    path.push(s_m1);
    path.push(s_0);
    path.extend_from_slice(&future);
    let tokens = positions_to_actions(&path, vocab, prefix)?;
    let fed: Vec<Vec2> = match prefix {
        ResidualPrefix::Reconstructed => actions_to_positions(&tokens.tokens, s_m1, s_0, vocab)?,
        ResidualPrefix::GroundTruth => future.clone(),
    };
    let mut inputs = Vec::with_capacity(horizon);
    inputs.push(s_0);
    inputs.extend_from_slice(&fed[..horizon - 1]);
    Ok(Example {
        scene_id: scene.scene_id,
        vectors: vectorize(&norm),
        seeds: (s_m1, s_0),
        inputs,
        targets: tokens.tokens,
        future,
        saturated: tokens.saturated.len(),
    })
}

pub fn prepare_all(
    scenes: &[Scene],
    vocab: &ActionVocabulary,
    prefix: ResidualPrefix,
    horizon: usize,
    exec: ExecMode,
) -> Result<Vec<Example>, TrainError> {
    map_range(exec, scenes.len(), |i| prepare_example(&scenes[i], vocab, prefix, horizon)).into_iter().collect()
}

/// Records the training loss of one example on `tape`.
fn record_loss(model: &Model, tape: &mut Tape, ex: &Example, mut rng: Option<&mut ChaCha8Rng>) -> Result<Var, TrainError> {
    let ctx = model.encode_tape(tape, &ex.vectors, rng.as_deref_mut())?;
    let valid = ex.vectors.validity();
    match model.variant() {
        DecoderVariant::Autoregressive => {
            let logits = model.decode_teacher_tape(tape, ctx, &valid, &ex.inputs, rng)?;
            Ok(tape.cross_entropy(logits, &ex.targets))
        }
        DecoderVariant::OneShot => {
            let (traj, score) = model.one_shot_tape(tape, ctx, &valid, rng)?;
            let target: Vec<f64> = ex.future.iter().flat_map(|p| [p.x / POSITION_SCALE, p.y / POSITION_SCALE]).collect();
            let best = winner(tape.value(traj), &target);
            let reg = tape.row_squared_error(traj, best, &target);
            let scores = tape.transpose(score);
            let cls = tape.cross_entropy(scores, &[best]);
            Ok(tape.add(reg, cls))
        }
    }
}

/// Row closest to `target` in squared error; ties resolve to the lowest index.
fn winner(rows: &Mat, target: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, row) in rows.rows().into_iter().enumerate() {
        let e: f64 = row.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
        if e < best.1 {
            best = (k, e);
        }
    }
    best.0
}

/// Loss and parameter gradients for one example.
pub fn example_gradients(model: &Model, ex: &Example, rng: Option<&mut ChaCha8Rng>) -> Result<(f64, Grads), TrainError> {
    let mut tape = Tape::new(&model.params);
    let loss = record_loss(model, &mut tape, ex, rng)?;
    Ok((tape.scalar(loss), tape.backward(loss)))
}

/// Evaluation loss for one example (no dropout, no gradients).
pub fn example_loss(model: &Model, ex: &Example) -> Result<f64, TrainError> {
    let mut tape = Tape::new(&model.params);
    let loss = record_loss(model, &mut tape, ex, None)?;
    Ok(tape.scalar(loss))
}

/// Mean evaluation loss over `examples`.
pub fn evaluate(model: &Model, examples: &[Example], exec: ExecMode) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::Config("empty evaluation set".into()));
    }
    let chunks = examples.len().div_ceil(CHUNK);
    let sums: Vec<Result<f64, TrainError>> = map_range(exec, chunks, |c| {
        let mut s = 0.0;
        for ex in &examples[c * CHUNK..((c + 1) * CHUNK).min(examples.len())] {
            s += example_loss(model, ex)?;
        }
        Ok(s)
    });
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / examples.len() as f64)
}

/// AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Grads,
    pub v: Grads,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self { m: Grads::zeros(params), v: Grads::zeros(params) }
    }
}

fn adamw_update(params: &mut ParamStore, grads: &Grads, opt: &mut AdamState, cfg: &TrainConfig, lr: f64, t: usize) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (i, entry) in params.entries_mut().iter_mut().enumerate() {
        let decay = if entry.decay { cfg.weight_decay } else { 0.0 };
        let g = &grads.0[i];
        let m = &mut opt.m.0[i];
        let v = &mut opt.v.0[i];
        ndarray::Zip::from(&mut entry.value).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
            *p -= lr * (update + decay * *p);
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_perplexity: Option<f64>,
}

pub const CURVE_HEADER: &str = "step,lr,train_loss,val_loss,val_perplexity";

pub fn write_curve_csv(mut w: impl Write, rows: &[CurveRow]) -> std::io::Result<()> {
    writeln!(w, "{CURVE_HEADER}")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.step, r.lr, r.train_loss, opt(r.val_loss), opt(r.val_perplexity))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Optimizer state that a checkpoint needs for exact resumption. All
/// stochastic streams (shuffles, dropout) are derived from `(seed, step)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: usize,
    pub total_steps: usize,
    pub train_len: usize,
    pub adam: AdamState,
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    opt: AdamState,
    step: usize,
    total_steps: usize,
    train_len: usize,
    epoch_order: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, train_len: usize) -> Result<Self, TrainError> {
        cfg.validate()?;
        if train_len == 0 {
            return Err(TrainError::Config("training set is empty".into()));
        }
        let available = train_len * cfg.epochs;
        let total_steps = match cfg.total_steps {
            Some(t) => {
                if t > 0 && (t - 1) * cfg.batch_size >= available {
                    return Err(TrainError::Config(format!(
                        "total_steps {t} at batch {} needs more than {} epochs of {train_len} scenes",
                        cfg.batch_size, cfg.epochs
                    )));
                }
                t
            }
            None => available.div_ceil(cfg.batch_size),
        };
        let opt = AdamState::new(&model.params);
        Ok(Self { model, cfg, opt, step: 0, total_steps, train_len, epoch_order: None })
    }

    pub fn resume(model: Model, state: TrainState) -> Result<Self, TrainError> {
        let mut t = Self::new(model, state.config, state.train_len)?;
        if t.total_steps != state.total_steps || state.step > state.total_steps {
            return Err(TrainError::Config("checkpoint step counters are inconsistent".into()));
        }
        if state.adam.m.0.len() != t.model.params.len() {
            return Err(TrainError::Config("optimizer state does not match model".into()));
        }
        t.step = state.step;
        t.opt = state.adam;
        Ok(t)
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            config: self.cfg.clone(),
            step: self.step,
            total_steps: self.total_steps,
            train_len: self.train_len,
            adam: self.opt.clone(),
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    /// Dataset indices consumed by `step`: consecutive slices of per-epoch
    /// permutations.
    pub fn batch_indices(&mut self, step: usize) -> Vec<usize> {
        let limit = self.train_len * self.cfg.epochs;
        let start = step * self.cfg.batch_size;
        let end = (start + self.cfg.batch_size).min(limit);
        (start..end)
            .map(|p| {
                let epoch = p / self.train_len;
                if self.epoch_order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut order: Vec<usize> = (0..self.train_len).collect();
                    order.shuffle(&mut derive_rng(self.cfg.seed, tags::EPOCH_SHUFFLE, epoch as u64));
                    self.epoch_order = Some((epoch, order));
                }
                self.epoch_order.as_ref().expect("just set").1[p % self.train_len]
            })
            .collect()
    }

    fn config_dump(&self) -> String {
        serde_json::json!({ "model": self.model.config, "train": self.cfg }).to_string()
    }

    /// One optimizer step on the next batch.
    pub fn train_step(&mut self, source: &dyn SceneSource) -> Result<StepLog, TrainError> {
        if self.is_done() {
            return Err(TrainError::Config(format!("training already finished at step {}", self.step)));
        }
        let step = self.step;
        let idx = self.batch_indices(step);
        let model = &self.model;
        let cfg = &self.cfg;
        let horizon = model.config.decoder.horizon;
        let dropout = model.config.encoder.dropout > 0.0 || model.config.decoder.dropout > 0.0;
        let chunks = idx.len().div_ceil(CHUNK);
        let partial: Vec<Result<(f64, Grads), TrainError>> = map_range(cfg.exec, chunks, |c| {
            let mut sum = Grads::zeros(&model.params);
            let mut loss = 0.0;
            for (k, &i) in idx.iter().enumerate().skip(c * CHUNK).take(CHUNK) {
                let scene = source.scene(i)?;
                let ex = prepare_example(&scene, &model.vocab, cfg.target_prefix, horizon)?;
                let mut rng = dropout.then(|| derive_rng(cfg.seed, tags::DROPOUT, (step * cfg.batch_size + k) as u64));
                let (l, g) = example_gradients(model, &ex, rng.as_mut())?;
                loss += l;
                sum.add_assign(&g);
            }
            Ok((loss, sum))
        });
        let mut grads = Grads::zeros(&model.params);
        let mut loss = 0.0;
        for p in partial {
            let (l, g) = p?;
            loss += l;
            grads.add_assign(&g);
        }
        let n = idx.len() as f64;
        loss /= n;
        grads.scale(1.0 / n);
        if !loss.is_finite() || !grads.is_finite() {
            return Err(TrainError::Diverged { step, loss, config: self.config_dump() });
        }
        let grad_norm = grads.global_norm();
        if let Some(clip) = self.cfg.grad_clip {
            if grad_norm > clip {
                grads.scale(clip / grad_norm);
            }
        }
        let lr = lr_schedule(step, &self.cfg, self.total_steps)?;
        adamw_update(&mut self.model.params, &grads, &mut self.opt, &self.cfg, lr, step + 1);
        self.step += 1;
        Ok(StepLog { step, lr, loss, grad_norm })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub curve: Vec<CurveRow>,
    pub init_val_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
}

/// Runs `trainer` until `stop_at` (or the end of training). Validation runs
/// on the fixed `val` set every `eval_every` steps and at the final step.
pub fn train(
    trainer: &mut Trainer,
    source: &dyn SceneSource,
    val: &[Example],
    stop_at: Option<usize>,
    mut on_row: impl FnMut(&CurveRow),
) -> Result<TrainOutcome, TrainError> {
    let end = stop_at.unwrap_or(trainer.total_steps).min(trainer.total_steps);
    let exec = trainer.cfg.exec;
    let init_val_loss =
        if !val.is_empty() && trainer.step == 0 && trainer.cfg.eval_every > 0 { Some(evaluate(&trainer.model, val, exec)?) } else { None };
    let mut curve = Vec::new();
    let mut final_val_loss = None;
    while trainer.step < end {
        let log = trainer.train_step(source)?;
        let done = trainer.step == trainer.total_steps;
        let due = trainer.cfg.eval_every > 0 && trainer.step.is_multiple_of(trainer.cfg.eval_every);
        let val_loss = if !val.is_empty() && (done || due) { Some(evaluate(&trainer.model, val, exec)?) } else { None };
        if done {
            final_val_loss = val_loss;
        }
        let row = CurveRow { step: log.step, lr: log.lr, train_loss: log.loss, val_loss, val_perplexity: val_loss.map(f64::exp) };
        on_row(&row);
        curve.push(row);
    }
    Ok(TrainOutcome { curve, init_val_loss, final_val_loss })
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn failures(&self) -> Vec<&BlockReport> {
        self.blocks.iter().filter(|b| !b.passed).collect()
    }

    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }
}

/// Denominator floor for relative errors: entries whose analytic and
/// numeric values are both below it are compared on an absolute scale,
/// since central differences of an O(1) loss carry ~1e-10 rounding noise.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Central finite differences of `eval` against `analytic`, per parameter block.
pub fn check_gradients(
    store: &mut ParamStore,
    analytic: &Grads,
    mut eval: impl FnMut(&ParamStore) -> f64,
    h: f64,
    tolerance: f64,
) -> GradCheckReport {
    let mut blocks = Vec::with_capacity(store.len());
    for p in 0..store.len() {
        let n = store.entries()[p].value.len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let orig = store.entries()[p].value.as_slice().expect("standard layout")[i];
            store.entries_mut()[p].value.as_slice_mut().expect("standard layout")[i] = orig + h;
            let plus = eval(store);
            store.entries_mut()[p].value.as_slice_mut().expect("standard layout")[i] = orig - h;
            let minus = eval(store);
            store.entries_mut()[p].value.as_slice_mut().expect("standard layout")[i] = orig;
            let num = (plus - minus) / (2.0 * h);
            let ana = analytic.0[p].as_slice().expect("standard layout")[i];
            let err = (num - ana).abs() / num.abs().max(ana.abs()).max(GRAD_CHECK_FLOOR);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        blocks.push(BlockReport { name: store.entries()[p].name.clone(), max_rel_err: worst, checked: n, passed: worst <= tolerance });
    }
    let max_rel_err = blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max);
    GradCheckReport { blocks, max_rel_err, tolerance, step: h }
}

/// Checks every parameter of `model` on the training loss of `ex`.
pub fn grad_check(model: &Model, ex: &Example, h: f64, tolerance: f64) -> Result<GradCheckReport, TrainError> {
    let (_, analytic) = example_gradients(model, ex, None)?;
    let mut probe = model.clone();
    let mut store = std::mem::take(&mut probe.params);
    let mut failure = None;
    let report = check_gradients(
        &mut store,
        &analytic,
        |p| {
            probe.params = p.clone();
            match example_loss(&probe, ex) {
                Ok(l) => l,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        h,
        tolerance,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// A small model config used for gradient checks (under 10k parameters).
pub fn grad_check_config(vocab_size: usize, horizon: usize) -> ModelConfig {
    ModelConfig::symmetric(8, 2, 2, vocab_size, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::count_params;
    use crate::nn::truncated_normal;
    use crate::scene::tests::random_scene;
    use rand::{Rng, SeedableRng};

    #[test]
    fn uniform_logits_give_log_vocab() {
        let l = ce_loss(&Mat::zeros((7, 169)), &[0, 5, 168, 3, 3, 2, 100]);
        assert!((l.mean - 169f64.ln()).abs() < 1e-12);
        assert!((l.mean - 5.1299).abs() < 1e-4);
        assert_eq!(l.per_step.len(), 7);
    }

    #[test]
    fn confident_logits_approach_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut m = Mat::zeros((2, 4));
            m[[0, 1]] = margin;
            m[[1, 3]] = margin;
            let l = ce_loss(&m, &[1, 3]).mean;
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn ce_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = truncated_normal(&mut rng, 6, 9, 3.0);
        let targets: Vec<usize> = (0..6).map(|_| rng.random_range(0..9)).collect();
        let mut naive = 0.0;
        for r in 0..6 {
            let z: f64 = (0..9).map(|c| m[[r, c]].exp()).sum();
            naive += -(m[[r, targets[r]]].exp() / z).ln();
        }
        naive /= 6.0;
        assert!((ce_loss(&m, &targets).mean - naive).abs() < 1e-10);
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig::default().with_lr(0.0050);
        assert_eq!(lr_schedule(0, &cfg, 1000).unwrap(), 0.0050);
        assert!((lr_schedule(1000, &cfg, 1000).unwrap() - cfg.min_lr).abs() < 1e-18);
        assert!((lr_schedule(500, &cfg, 1000).unwrap() - (cfg.max_lr + cfg.min_lr) / 2.0).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 0..=1000 {
            let lr = lr_schedule(s, &cfg, 1000).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
        assert!(matches!(lr_schedule(1001, &cfg, 1000), Err(TrainError::Schedule { .. })));
    }

    #[test]
    fn linear_head_gradient_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let w = store.add("w", truncated_normal(&mut rng, 3, 4, 1.0), true);
        let b = store.add("b", truncated_normal(&mut rng, 1, 4, 1.0), false);
        let x = truncated_normal(&mut rng, 2, 3, 1.0);
        let target = [0.3, -0.2, 0.9, 0.1];
        let loss = |s: &ParamStore| {
            let mut t = Tape::new(s);
            let xv = t.input(x.clone());
            let y = t.linear(xv, w, Some(b));
            let l = t.row_squared_error(y, 1, &target);
            (t.scalar(l), t.backward(l))
        };
        let (_, analytic) = loss(&store);
        let report = check_gradients(&mut store, &analytic, |s| loss(s).0, 1e-5, 1e-8);
        assert!(report.passed(), "{report:?}");
    }

    fn tiny_example(seed: u64, horizon: usize) -> (Model, Example) {
        let cfg = grad_check_config(169, horizon);
        assert!(count_params(&cfg) <= 10_000);
        let model = Model::new(cfg, ActionVocabulary::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scene = random_scene(&mut rng, 3, 1, 1);
        scene.future_gt = Some((1..=horizon).map(|k| Vec2::new(k as f64 * 0.9, 0.01 * (k * k) as f64)).collect());
        let ex = prepare_example(&scene, &model.vocab, ResidualPrefix::Reconstructed, horizon).unwrap();
        (model, ex)
    }

    #[test]
    fn degenerate_scene_gradients_are_finite() {
        let (model, mut ex) = tiny_example(1, 4);
        ex.vectors.vectors.fill(0.0);
        let last = ex.vectors.len() - 1;
        ex.vectors.vectors[[last, crate::scene::FEATURE_DIM - 1]] = 1.0;
        ex.inputs.iter_mut().for_each(|p| *p = Vec2::ZERO);
        let (l, g) = example_gradients(&model, &ex, None).unwrap();
        assert!(l.is_finite() && g.is_finite());
    }

    #[test]
    fn one_shot_loss_has_gradients() {
        let cfg = grad_check_config(169, 4).with_variant(DecoderVariant::OneShot);
        let mut model = Model::new(cfg, ActionVocabulary::default(), 2).unwrap();
        model.scramble(3, 0.3);
        let (_, ex) = tiny_example(2, 4);
        let report = grad_check(&model, &ex, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "{:?}", report.failures());
    }

    #[test]
    fn batch_order_covers_each_example_once_per_epoch() {
        let model = Model::new(grad_check_config(169, 4), ActionVocabulary::default(), 0).unwrap();
        let cfg = TrainConfig { batch_size: 7, ..TrainConfig::default() };
        let mut t = Trainer::new(model, cfg, 50).unwrap();
        assert_eq!(t.total_steps(), 8);
        let mut seen: Vec<usize> = (0..8).flat_map(|s| t.batch_indices(s)).collect();
        assert_eq!(seen.len(), 50);
        seen.sort();
        assert_eq!(seen, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn too_many_steps_for_epochs_is_rejected() {
        let model = Model::new(grad_check_config(169, 4), ActionVocabulary::default(), 0).unwrap();
        let cfg = TrainConfig { batch_size: 8, total_steps: Some(5), ..TrainConfig::default() };
        assert!(Trainer::new(model, cfg, 32).is_err());
    }
}
