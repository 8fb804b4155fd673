//! Sampling, mode extraction and closed-loop replanning.
//!
//! Rollouts run in the target agent's frame. Each sample draws from its own
//! stream `derive_rng(seed, SAMPLE, i)` and samples are advanced in fixed
//! chunks of [`ROLLOUT_CHUNK`], so outputs are bitwise identical in
//! sequential and parallel modes.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CodecError;
use crate::exec::{try_map_range, ExecMode};
use crate::geometry::{Frame, Vec2};
use crate::model::{DecoderVariant, Model, ModelError};
use crate::scene::{normalize_scene, vectorize, Scene, SceneError};
use crate::seed::{derive_rng, tags};
use crate::simulator::{World, WorldEvent};

/// Rollouts advanced together in one batched decoder call.
pub const ROLLOUT_CHUNK: usize = 8;
pub const DEFAULT_SAMPLES: usize = 64;
pub const DEFAULT_MODES: usize = 6;
pub const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("invalid inference config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("closed loop: {0}")]
    World(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    pub samples: usize,
    pub modes: usize,
    pub temperature: f64,
    /// Rollout steps; `None` uses the decoder horizon.
    pub horizon: Option<usize>,
    pub seed: u64,
    pub kmeans_iters: usize,
    pub exec: ExecMode,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            modes: DEFAULT_MODES,
            temperature: 1.0,
            horizon: None,
            seed: 0,
            kmeans_iters: KMEANS_MAX_ITERS,
            exec: ExecMode::default(),
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.samples == 0 || self.modes == 0 {
            return Err(InferenceError::Config("samples and modes must be >= 1".into()));
        }
        if self.modes > self.samples {
            return Err(InferenceError::Config(format!("modes ({}) exceed samples ({})", self.modes, self.samples)));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(InferenceError::Config("temperature must be finite and >= 0".into()));
        }
        if self.kmeans_iters == 0 {
            return Err(InferenceError::Config("kmeans_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub scene_id: u64,
    pub samples: Vec<Vec<Vec2>>,
    /// Sorted by decreasing probability.
    pub modes: Vec<Vec<Vec2>>,
    pub mode_probs: Vec<f64>,
    pub temperature: f64,
    pub seed: u64,
}

impl TrajectorySet {
    pub fn top_mode(&self) -> &[Vec2] {
        &self.modes[0]
    }
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Softmax of `logits / temperature` (max-shifted).
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| ((l - m) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Draws one token from `softmax(logits / temperature)` by inverting the
/// CDF; temperature 0 is argmax.
pub fn sample_from_logits<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    if temperature == 0.0 {
        return argmax(logits);
    }
    let p = softmax(logits, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` above the final partial sum.
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(0)
}

/// Rollouts in the target agent frame together with the frame mapping them
/// back to the scene's coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollouts {
    pub frame: Frame,
    pub samples: Vec<Vec<Vec2>>,
}

impl Rollouts {
    pub fn to_scene_frame(&self) -> Vec<Vec<Vec2>> {
        self.samples.iter().map(|t| t.iter().map(|&p| self.frame.to_parent(p)).collect()).collect()
    }
}

/// `samples` autoregressive rollouts of `horizon` steps.
pub fn sample_rollout(
    model: &Model,
    scene: &Scene,
    samples: usize,
    horizon: usize,
    temperature: f64,
    seed: u64,
    exec: ExecMode,
) -> Result<Rollouts, InferenceError> {
    if samples == 0 {
        return Err(InferenceError::Config("samples must be >= 1".into()));
    }
    if !(temperature >= 0.0) {
        return Err(InferenceError::Config("temperature must be >= 0".into()));
    }
    if horizon == 0 || horizon > model.config.decoder.horizon {
        return Err(InferenceError::Config(format!("horizon must be in 1..={}", model.config.decoder.horizon)));
    }
    scene.validate()?;
    let norm = normalize_scene(scene)?;
    let anchor = scene.target_history.iter().rev().find(|s| s.valid).ok_or(SceneError::EmptyTargetHistory)?;
    let frame = Frame::new(anchor.position, anchor.heading);
    let emb = model.encode(&vectorize(&norm))?;
    let cross = model.cross_cache(&emb)?;
    let (s_m1, s_0) = norm.seed_positions();
    let vocab = &model.vocab;
    let chunks = samples.div_ceil(ROLLOUT_CHUNK);
    let per_chunk = try_map_range(exec, chunks, |c| -> Result<Vec<Vec<Vec2>>, InferenceError> {
        let ids: Vec<usize> = (c * ROLLOUT_CHUNK..((c + 1) * ROLLOUT_CHUNK).min(samples)).collect();
        let mut rngs: Vec<_> = ids.iter().map(|&i| derive_rng(seed, tags::SAMPLE, i as u64)).collect();
        let mut states: Vec<_> = ids.iter().map(|_| model.new_decode_state()).collect();
        let mut paths: Vec<Vec<Vec2>> = ids.iter().map(|_| vec![s_m1, s_0]).collect();
        for _ in 0..horizon {
            let prefixes: Vec<&[Vec2]> = paths.iter().map(|p| &p[1..]).collect();
            let logits = model.forward_step_batch(&cross, &mut states, &prefixes)?;
            for (b, path) in paths.iter_mut().enumerate() {
                let row = logits.row(b);
                let tok = sample_from_logits(row.as_slice().expect("standard layout"), temperature, &mut rngs[b]);
                let n = path.len();
                let next = path[n - 1] * 2.0 - path[n - 2] + vocab.action(tok);
                path.push(next);
            }
        }
        Ok(paths.into_iter().map(|p| p[2..].to_vec()).collect())
    })?;
    Ok(Rollouts { frame, samples: per_chunk.into_iter().flatten().collect() })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn flatten(t: &[Vec2]) -> Vec<f64> {
    t.iter().flat_map(|p| [p.x, p.y]).collect()
}

fn unflatten(v: &[f64]) -> Vec<Vec2> {
    v.chunks(2).map(|c| Vec2::new(c[0], c[1])).collect()
}

/// Nearest centroid, ties to the lowest index.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// K-Means over flattened trajectories with k-means++ seeding.
///
/// Modes are cluster centroids sorted by decreasing member fraction (ties
/// by the lowest member index). When fewer than `k` distinct trajectories
/// exist, the distinct clusters come first and the remaining slots repeat
/// the top mode with probability 0, so callers always get `k` modes.
pub fn kmeans_modes(samples: &[Vec<Vec2>], k: usize, seed: u64, max_iters: usize) -> Result<(Vec<Vec<Vec2>>, Vec<f64>), InferenceError> {
    if k == 0 || samples.len() < k {
        return Err(InferenceError::Config(format!("need samples ({}) >= k ({k}) >= 1", samples.len())));
    }
    let t = samples[0].len();
    if samples.iter().any(|s| s.len() != t) {
        return Err(InferenceError::Config("samples have different lengths".into()));
    }
    let points: Vec<Vec<f64>> = samples.iter().map(|s| flatten(s)).collect();
    let mut rng = derive_rng(seed, tags::KMEANS, 0);
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("positive total");
        for (i, &d) in d2.iter().enumerate() {
            acc += d;
            if d > 0.0 && u < acc {
                pick = i;
                break;
            }
        }
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.last().expect("just pushed")));
        }
    }
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..max_iters {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for (c, (s, &n)) in centroids.iter_mut().zip(sums.into_iter().zip(&counts)) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    let n = points.len() as f64;
    let mut clusters: Vec<(usize, usize, usize)> = (0..centroids.len())
        .filter_map(|c| {
            let members = assign.iter().filter(|&&a| a == c).count();
            let first = assign.iter().position(|&a| a == c)?;
            Some((c, members, first))
        })
        .collect();
    clusters.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    let mut modes: Vec<Vec<Vec2>> = clusters.iter().map(|&(c, _, _)| unflatten(&centroids[c])).collect();
    let mut probs: Vec<f64> = clusters.iter().map(|&(_, m, _)| m as f64 / n).collect();
    while modes.len() < k {
        modes.push(modes[0].clone());
        probs.push(0.0);
    }
    Ok((modes, probs))
}

/// Samples, clusters and returns `cfg.modes` trajectories in the scene's
/// coordinates. The one-shot variant returns its query trajectories with
/// softmax scores instead.
pub fn plan(model: &Model, scene: &Scene, cfg: &PlanConfig) -> Result<TrajectorySet, InferenceError> {
    cfg.validate()?;
    let horizon = cfg.horizon.unwrap_or(model.config.decoder.horizon);
    match model.variant() {
        DecoderVariant::Autoregressive => {
            let r = sample_rollout(model, scene, cfg.samples, horizon, cfg.temperature, cfg.seed, cfg.exec)?;
            let (modes, probs) = kmeans_modes(&r.samples, cfg.modes, cfg.seed, cfg.kmeans_iters)?;
            let to_scene = |t: &Vec<Vec2>| t.iter().map(|&p| r.frame.to_parent(p)).collect::<Vec<_>>();
            Ok(TrajectorySet {
                scene_id: scene.scene_id,
                samples: r.samples.iter().map(to_scene).collect(),
                modes: modes.iter().map(to_scene).collect(),
                mode_probs: probs,
                temperature: cfg.temperature,
                seed: cfg.seed,
            })
        }
        DecoderVariant::OneShot => {
            scene.validate()?;
            let norm = normalize_scene(scene)?;
            let anchor = scene.target_history.iter().rev().find(|s| s.valid).ok_or(SceneError::EmptyTargetHistory)?;
            let frame = Frame::new(anchor.position, anchor.heading);
            let out = model.one_shot_forward(&model.encode(&vectorize(&norm))?)?;
            let probs = softmax(&out.logits, 1.0);
            let mut order: Vec<usize> = (0..probs.len()).collect();
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            let trajs: Vec<Vec<Vec2>> =
                order.iter().map(|&i| out.trajectories[i][..horizon].iter().map(|&p| frame.to_parent(p)).collect()).collect();
            Ok(TrajectorySet {
                scene_id: scene.scene_id,
                samples: trajs.clone(),
                modes: trajs,
                mode_probs: order.iter().map(|&i| probs[i]).collect(),
                temperature: 0.0,
                seed: cfg.seed,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClosedLoopConfig {
    pub replan_period: usize,
    pub ticks: usize,
    pub plan: PlanConfig,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        Self { replan_period: 10, ticks: 200, plan: PlanConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplanLog {
    pub tick: usize,
    /// `None` when planning failed and the previous trajectory was held.
    pub plan: Option<TrajectorySet>,
    pub error: Option<String>,
}

/// Trajectory being executed: positions and how many were consumed.
#[derive(Clone, Debug, Default)]
pub struct Executing {
    pub trajectory: Vec<Vec2>,
    pub cursor: usize,
}

/// Plans once at the world's current tick and executes the top mode for
/// `replan_period` ticks (or until `remaining` runs out). On planner
/// failure the previous trajectory keeps being followed and the tick is
/// flagged in the log.
pub fn closed_loop_step(
    world: &mut World,
    model: &Model,
    cfg: &ClosedLoopConfig,
    executing: &mut Executing,
    remaining: usize,
) -> Result<ReplanLog, InferenceError> {
    let tick = world.tick;
    let plan_cfg = PlanConfig { seed: crate::seed::derive_seed(cfg.plan.seed, tags::SAMPLE, tick as u64), ..cfg.plan.clone() };
    let observation = world.observe().ok_or_else(|| InferenceError::World("world has no ego agent".into()))?;
    let log = match plan(model, &observation, &plan_cfg) {
        Ok(set) => {
            *executing = Executing { trajectory: set.top_mode().to_vec(), cursor: 0 };
            ReplanLog { tick, plan: Some(set), error: None }
        }
        Err(e) => ReplanLog { tick, plan: None, error: Some(e.to_string()) },
    };
    for _ in 0..cfg.replan_period.min(remaining) {
        let next = executing.trajectory.get(executing.cursor).copied();
        executing.cursor += 1;
        world.step(next);
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopReport {
    pub ticks: usize,
    pub logs: Vec<ReplanLog>,
    /// Ego positions executed after the start tick.
    pub executed: Vec<Vec2>,
    pub events: Vec<WorldEvent>,
    pub offroad_ticks: usize,
    pub collision_ticks: usize,
    /// Planner failures plus non-finite executed positions.
    pub faults: usize,
}

pub fn run_closed_loop(world: &mut World, model: &Model, cfg: &ClosedLoopConfig) -> Result<ClosedLoopReport, InferenceError> {
    if cfg.replan_period == 0 {
        return Err(InferenceError::Config("replan_period must be >= 1".into()));
    }
    cfg.plan.validate()?;
    let start = world.ego.as_ref().ok_or_else(|| InferenceError::World("world has no ego agent".into()))?.positions.len();
    let mut executing = Executing::default();
    let mut logs = Vec::new();
    let mut done = 0;
    while done < cfg.ticks {
        let remaining = cfg.ticks - done;
        logs.push(closed_loop_step(world, model, cfg, &mut executing, remaining)?);
        done += cfg.replan_period.min(remaining);
    }
    let executed = world.ego.as_ref().expect("checked above").positions[start..].to_vec();
    let mut offroad: Vec<usize> = Vec::new();
    let mut collide: Vec<usize> = Vec::new();
    for e in &world.events {
        match *e {
            WorldEvent::Offroad { tick } => offroad.push(tick),
            WorldEvent::Collision { tick, .. } => collide.push(tick),
        }
    }
    collide.dedup();
    let faults = logs.iter().filter(|l| l.plan.is_none()).count() + executed.iter().filter(|p| !p.is_finite()).count();
    Ok(ClosedLoopReport {
        ticks: done,
        logs,
        executed,
        events: world.events.clone(),
        offroad_ticks: offroad.len(),
        collision_ticks: collide.len(),
        faults,
    })
}
