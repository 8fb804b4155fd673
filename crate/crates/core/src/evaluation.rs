//! Planning metrics and normalized reporting.
//!
//! Rates are fractions of indicator variables. Offroad treats polygon
//! boundaries as inside. Collision boxes of the evaluated trajectory take
//! their heading from the direction of motion.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{try_map_range, ExecMode};
use crate::geometry::{OrientedBox, Polygon, Vec2};
use crate::inference::{plan, InferenceError, PlanConfig};
use crate::model::Model;
use crate::scene::{AgentTrack, Scene};

pub const DEFAULT_MISS_THRESHOLD: f64 = 2.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no drivable area to test against")]
    EmptyMap,
    #[error("baseline metric {0} is zero")]
    ZeroBaseline(&'static str),
    #[error("scene {0} has no ground-truth future")]
    MissingFuture(u64),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

fn check_shapes(modes: &[Vec<Vec2>], gt: &[Vec2]) -> Result<(), EvalError> {
    if modes.is_empty() || gt.is_empty() {
        return Err(EvalError::Shape("need at least one mode and one tick".into()));
    }
    if let Some(m) = modes.iter().find(|m| m.len() != gt.len()) {
        return Err(EvalError::Shape(format!("mode has {} ticks, ground truth has {}", m.len(), gt.len())));
    }
    Ok(())
}

pub fn ade(traj: &[Vec2], gt: &[Vec2]) -> f64 {
    traj.iter().zip(gt).map(|(a, b)| a.dist(*b)).sum::<f64>() / gt.len() as f64
}

/// Minimum over modes of the mean displacement.
pub fn min_ade(modes: &[Vec<Vec2>], gt: &[Vec2]) -> Result<f64, EvalError> {
    check_shapes(modes, gt)?;
    Ok(modes.iter().map(|m| ade(m, gt)).fold(f64::INFINITY, f64::min))
}

/// Minimum over modes of the displacement at tick `t_eval` (1-based).
pub fn min_fde(modes: &[Vec<Vec2>], gt: &[Vec2], t_eval: usize) -> Result<f64, EvalError> {
    check_shapes(modes, gt)?;
    if t_eval == 0 || t_eval > gt.len() {
        return Err(EvalError::Shape(format!("t_eval {t_eval} outside 1..={}", gt.len())));
    }
    Ok(modes.iter().map(|m| m[t_eval - 1].dist(gt[t_eval - 1])).fold(f64::INFINITY, f64::min))
}

/// Fraction of cases whose min FDE at the last tick exceeds `threshold`.
pub fn miss_rate(cases: &[(Vec<Vec<Vec2>>, Vec<Vec2>)], threshold: f64) -> Result<f64, EvalError> {
    if cases.is_empty() {
        return Ok(0.0);
    }
    let mut misses = 0;
    for (modes, gt) in cases {
        if min_fde(modes, gt, gt.len())? > threshold {
            misses += 1;
        }
    }
    Ok(misses as f64 / cases.len() as f64)
}

pub fn is_offroad(traj: &[Vec2], drivable: &[Polygon]) -> bool {
    traj.iter().any(|&p| !drivable.iter().any(|poly| poly.contains(p)))
}

/// Fraction of trajectories with at least one point outside the drivable union.
pub fn offroad_rate(trajs: &[Vec<Vec2>], drivable: &[Polygon]) -> Result<f64, EvalError> {
    if drivable.is_empty() {
        return Err(EvalError::EmptyMap);
    }
    if trajs.is_empty() {
        return Ok(0.0);
    }
    Ok(trajs.iter().filter(|t| is_offroad(t, drivable)).count() as f64 / trajs.len() as f64)
}

/// Heading per tick from the direction of motion, held while stationary.
pub fn motion_headings(traj: &[Vec2], start: Vec2, initial: f64) -> Vec<f64> {
    let mut prev = start;
    let mut h = initial;
    traj.iter()
        .map(|&p| {
            if p.dist(prev) > 1e-6 {
                h = (p - prev).angle();
            }
            prev = p;
            h
        })
        .collect()
}

/// Whether a box of `footprint` moving along `traj` overlaps any agent at a
/// common tick. Agent states are aligned with `traj` tick by tick.
pub fn collides(traj: &[Vec2], headings: &[f64], footprint: (f64, f64), others: &[AgentTrack]) -> bool {
    traj.iter().zip(headings).enumerate().any(|(t, (&p, &h))| {
        let ego = OrientedBox { center: p, heading: h, length: footprint.0, width: footprint.1 };
        others.iter().any(|a| {
            a.states.get(t).is_some_and(|s| {
                s.valid && ego.overlaps(&OrientedBox { center: s.position, heading: s.heading, length: a.length, width: a.width })
            })
        })
    })
}

/// Fraction of trajectories overlapping another agent at some tick.
pub fn collision_rate(trajs: &[Vec<Vec2>], start: Vec2, initial_heading: f64, footprint: (f64, f64), others: &[AgentTrack]) -> f64 {
    if trajs.is_empty() {
        return 0.0;
    }
    let hits = trajs.iter().filter(|t| collides(t, &motion_headings(t, start, initial_heading), footprint, others)).count();
    hits as f64 / trajs.len() as f64
}

pub fn perplexity(loss: f64) -> f64 {
    loss.exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub offroad_rate: f64,
    pub collision_rate: f64,
    pub horizon: usize,
    /// Tick at which min FDE is measured.
    pub t_eval: usize,
    pub miss_threshold: f64,
    pub num_scenes: usize,
    pub num_trajectories: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub plan: PlanConfig,
    pub miss_threshold: f64,
    /// `None` evaluates FDE at the horizon.
    pub t_eval: Option<usize>,
    /// Score offroad and collision over every sample rather than the modes.
    pub all_samples: bool,
    pub exec: ExecMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            plan: PlanConfig::default(),
            miss_threshold: DEFAULT_MISS_THRESHOLD,
            t_eval: None,
            all_samples: false,
            exec: ExecMode::default(),
        }
    }
}

/// Per-scene predictions paired with what the metrics need.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePrediction<'a> {
    pub scene: &'a Scene,
    pub modes: Vec<Vec<Vec2>>,
    /// Trajectories scored for offroad and collision.
    pub scored: Vec<Vec<Vec2>>,
}

/// Aggregates metrics over scenes (means of per-scene values and pooled rates).
pub fn report(preds: &[ScenePrediction<'_>], miss_threshold: f64, t_eval: Option<usize>) -> Result<MetricReport, EvalError> {
    let first = preds.first().ok_or_else(|| EvalError::Shape("no scenes".into()))?;
    let horizon = first.scene.future_gt.as_ref().ok_or(EvalError::MissingFuture(first.scene.scene_id))?.len();
    let t = t_eval.unwrap_or(horizon);
    let (mut ade_sum, mut fde_sum, mut misses, mut off, mut coll, mut scored) = (0.0, 0.0, 0, 0.0, 0.0, 0);
    for p in preds {
        let gt = p.scene.future_gt.as_ref().ok_or(EvalError::MissingFuture(p.scene.scene_id))?;
        ade_sum += min_ade(&p.modes, gt)?;
        let fde = min_fde(&p.modes, gt, t)?;
        fde_sum += fde;
        if min_fde(&p.modes, gt, gt.len())? > miss_threshold {
            misses += 1;
        }
        let n = p.scored.len() as f64;
        off += offroad_rate(&p.scored, &p.scene.drivable_area)? * n;
        let cur = p.scene.current();
        coll += collision_rate(&p.scored, cur.position, cur.heading, p.scene.target_kind.footprint(), &p.scene.nearby_future) * n;
        scored += p.scored.len();
    }
    let n = preds.len() as f64;
    Ok(MetricReport {
        min_ade: ade_sum / n,
        min_fde: fde_sum / n,
        miss_rate: misses as f64 / n,
        offroad_rate: if scored == 0 { 0.0 } else { off / scored as f64 },
        collision_rate: if scored == 0 { 0.0 } else { coll / scored as f64 },
        horizon,
        t_eval: t,
        miss_threshold,
        num_scenes: preds.len(),
        num_trajectories: scored,
    })
}

/// Plans every scene with `model` and reports metrics.
pub fn evaluate_model(model: &Model, scenes: &[Scene], cfg: &EvalConfig) -> Result<MetricReport, EvalError> {
    // Parallelism lives across scenes; each plan runs its rollouts sequentially.
    let plan_cfg = PlanConfig { exec: ExecMode::Sequential, ..cfg.plan.clone() };
    let preds = try_map_range(cfg.exec, scenes.len(), |i| -> Result<ScenePrediction<'_>, EvalError> {
        let cfg_i =
            PlanConfig { seed: crate::seed::derive_seed(plan_cfg.seed, crate::seed::tags::SAMPLE, scenes[i].scene_id), ..plan_cfg.clone() };
        let set = plan(model, &scenes[i], &cfg_i)?;
        let scored = if cfg.all_samples { set.samples.clone() } else { set.modes.clone() };
        Ok(ScenePrediction { scene: &scenes[i], modes: set.modes, scored })
    })?;
    report(&preds, cfg.miss_threshold, cfg.t_eval)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRow {
    pub name: String,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub offroad_rate: f64,
    pub collision_rate: f64,
}

fn metric_values(r: &MetricReport) -> [(&'static str, f64); 5] {
    [
        ("min_ade", r.min_ade),
        ("min_fde", r.min_fde),
        ("miss_rate", r.miss_rate),
        ("offroad_rate", r.offroad_rate),
        ("collision_rate", r.collision_rate),
    ]
}

/// Elementwise ratio `report / baseline`.
pub fn normalize_metrics(name: &str, report: &MetricReport, baseline: &MetricReport) -> Result<NormalizedRow, EvalError> {
    let r = metric_values(report);
    let b = metric_values(baseline);
    let mut out = [0.0; 5];
    for i in 0..5 {
        if b[i].1 == 0.0 {
            return Err(EvalError::ZeroBaseline(b[i].0));
        }
        out[i] = r[i].1 / b[i].1;
    }
    Ok(NormalizedRow {
        name: name.to_string(),
        min_ade: out[0],
        min_fde: out[1],
        miss_rate: out[2],
        offroad_rate: out[3],
        collision_rate: out[4],
    })
}

pub const NORMALIZED_HEADER: &str = "name,min_ade,min_fde,miss_rate,offroad_rate,collision_rate";

/// Rows as CSV with three decimals.
pub fn normalized_csv(rows: &[NormalizedRow]) -> String {
    let mut s = format!("{NORMALIZED_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{:.3},{:.3},{:.3},{:.3},{:.3}", r.name, r.min_ade, r.min_fde, r.miss_rate, r.offroad_rate, r.collision_rate)
            .expect("string write");
    }
    s
}
