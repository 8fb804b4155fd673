//! Scene types, agent-centric normalization and vectorization.
//!
//! A [`Scene`] holds the target agent's history, nearby agent tracks, map
//! polylines and (when known) the target's future. [`normalize_scene`] moves
//! everything into the target's current frame and [`vectorize`] flattens the
//! result into one feature row per polyline segment / track transition.
//!
//! # Vector layout
//!
//! Every row of a [`VectorSet`] has [`FEATURE_DIM`] columns:
//!
//! | cols   | content                                                      |
//! |--------|--------------------------------------------------------------|
//! | 0..2   | start point / [`POSITION_SCALE`]                             |
//! | 2..4   | end point / [`POSITION_SCALE`]                               |
//! | 4..6   | velocity of the end state / [`VELOCITY_SCALE`] (agents only) |
//! | 6..8   | acceleration of the end state, m/s² (agents only)            |
//! | 8..10  | cos, sin of the end-state heading (agents only)              |
//! | 10     | end-state time relative to the current tick, seconds         |
//! | 11..15 | entity one-hot: target, vehicle, pedestrian, cyclist         |
//! | 15..19 | map one-hot: lane center, lane boundary, road edge, crosswalk|
//! | 19     | validity                                                     |
//!
//! Each track of `H` ticks yields `H - 1` transition rows (tick `k-1 -> k`)
//! followed by one current-state row whose start and end coincide. A
//! polyline with `p` points yields `p - 1` segment rows. Rows are ordered by
//! entity class (target, nearby agents by id, polylines by id) and then by
//! index, so
//!
//! `n = H * (1 + #nearby) + Σ (points - 1)`.
//!
//! Invalid ticks produce an all-zero row (validity 0) instead of being dropped.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, Frame, Polygon, Vec2};

pub const FEATURE_DIM: usize = 20;
pub const POSITION_SCALE: f64 = 10.0;
pub const VELOCITY_SCALE: f64 = 10.0;

pub const DEFAULT_HISTORY: usize = 11;
pub const DEFAULT_HORIZON: usize = 60;
pub const DEFAULT_TICK: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("empty target history")]
    EmptyTargetHistory,
    #[error("inconsistent scene: {0}")]
    Inconsistent(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Vec2,
    /// Radians in (-pi, pi].
    pub heading: f64,
    pub velocity: Vec2,
    pub acceleration: Vec2,
    pub valid: bool,
}

impl AgentState {
    pub fn invalid() -> Self {
        Self::default()
    }

    fn transformed(&self, f: impl Fn(Vec2) -> Vec2, d: impl Fn(Vec2) -> Vec2, h: impl Fn(f64) -> f64) -> Self {
        if !self.valid {
            return Self::invalid();
        }
        Self {
            position: f(self.position),
            heading: h(self.heading),
            velocity: d(self.velocity),
            acceleration: d(self.acceleration),
            valid: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentKind {
    pub fn code(self) -> u8 {
        match self {
            AgentKind::Vehicle => 0,
            AgentKind::Pedestrian => 1,
            AgentKind::Cyclist => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(AgentKind::Vehicle),
            1 => Some(AgentKind::Pedestrian),
            2 => Some(AgentKind::Cyclist),
            _ => None,
        }
    }

    /// Default footprint (length, width) in meters.
    pub fn footprint(self) -> (f64, f64) {
        match self {
            AgentKind::Vehicle => (4.8, 2.0),
            AgentKind::Pedestrian => (0.8, 0.8),
            AgentKind::Cyclist => (1.8, 0.6),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: u32,
    pub kind: AgentKind,
    pub length: f64,
    pub width: f64,
    pub states: Vec<AgentState>,
}

impl AgentTrack {
    pub fn new(id: u32, kind: AgentKind, states: Vec<AgentState>) -> Self {
        let (length, width) = kind.footprint();
        Self { id, kind, length, width, states }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSemantic {
    LaneCenter,
    LaneBoundary,
    RoadEdge,
    Crosswalk,
}

impl MapSemantic {
    pub fn code(self) -> u8 {
        match self {
            MapSemantic::LaneCenter => 0,
            MapSemantic::LaneBoundary => 1,
            MapSemantic::RoadEdge => 2,
            MapSemantic::Crosswalk => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(MapSemantic::LaneCenter),
            1 => Some(MapSemantic::LaneBoundary),
            2 => Some(MapSemantic::RoadEdge),
            3 => Some(MapSemantic::Crosswalk),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub id: u32,
    pub semantic: MapSemantic,
    pub points: Vec<Vec2>,
}

impl Polyline {
    /// At least two points, consecutive points distinct.
    pub fn is_well_formed(&self) -> bool {
        self.points.len() >= 2 && self.points.windows(2).all(|w| w[0] != w[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub tick_duration: f64,
    /// Maps this scene's coordinates into world coordinates.
    pub frame: Frame,
    pub target_kind: AgentKind,
    /// `H` ticks, oldest first; the last entry is the current state.
    pub target_history: Vec<AgentState>,
    pub nearby: Vec<AgentTrack>,
    pub map: Vec<Polyline>,
    pub drivable_area: Vec<Polygon>,
    /// Target positions for ticks `1..=T`, absent at pure inference.
    pub future_gt: Option<Vec<Vec2>>,
    /// Future states of nearby agents (same ids), used by collision metrics.
    pub nearby_future: Vec<AgentTrack>,
}

impl Scene {
    pub fn history_len(&self) -> usize {
        self.target_history.len()
    }

    pub fn horizon(&self) -> Option<usize> {
        self.future_gt.as_ref().map(|f| f.len())
    }

    pub fn current(&self) -> &AgentState {
        self.target_history.last().expect("non-empty history")
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let h = self.target_history.len();
        if h == 0 {
            return Err(SceneError::EmptyTargetHistory);
        }
        if let Some(a) = self.nearby.iter().find(|a| a.states.len() != h) {
            return Err(SceneError::Inconsistent(format!("nearby agent {} has {} ticks, target has {h}", a.id, a.states.len())));
        }
        if let Some(p) = self.map.iter().find(|p| !p.is_well_formed()) {
            return Err(SceneError::Inconsistent(format!("polyline {} is degenerate", p.id)));
        }
        Ok(())
    }

    /// The two seed positions `(s_{-1}, s_0)` that anchor Verlet decoding.
    /// When the previous tick is missing, a constant-velocity back-step is used.
    pub fn seed_positions(&self) -> (Vec2, Vec2) {
        let cur = *self.current();
        let prev = self.target_history.len().checked_sub(2).map(|i| self.target_history[i]).filter(|s| s.valid);
        match prev {
            Some(p) => (p.position, cur.position),
            None => (cur.position - cur.velocity * self.tick_duration, cur.position),
        }
    }

    /// Applies a rigid map `p -> frame.to_local(p)` to every geometric field.
    fn map_coordinates(&self, frame: &Frame) -> Scene {
        let f = |p: Vec2| frame.to_local(p);
        let d = |v: Vec2| frame.dir_to_local(v);
        let h = |a: f64| frame.heading_to_local(a);
        let track = |t: &AgentTrack| AgentTrack { states: t.states.iter().map(|s| s.transformed(f, d, h)).collect(), ..t.clone() };
        Scene {
            scene_id: self.scene_id,
            tick_duration: self.tick_duration,
            frame: self.frame.compose(frame),
            target_kind: self.target_kind,
            target_history: self.target_history.iter().map(|s| s.transformed(f, d, h)).collect(),
            nearby: self.nearby.iter().map(track).collect(),
            map: self.map.iter().map(|p| Polyline { points: p.points.iter().map(|&q| f(q)).collect(), ..p.clone() }).collect(),
            drivable_area: self.drivable_area.iter().map(|p| Polygon::new(p.points.iter().map(|&q| f(q)).collect())).collect(),
            future_gt: self.future_gt.as_ref().map(|v| v.iter().map(|&q| f(q)).collect()),
            nearby_future: self.nearby_future.iter().map(track).collect(),
        }
    }

    /// Applies an arbitrary rigid motion (used to build pose-perturbed copies).
    pub fn rigidly_moved(&self, motion: &Frame) -> Scene {
        let inverse = Frame::new((-motion.origin).rotate(-motion.heading), -motion.heading);
        let mut moved = self.map_coordinates(&inverse);
        moved.frame = self.frame;
        moved
    }
}

/// Moves the scene into the target agent's current frame. The returned
/// scene's `frame` maps its coordinates back to the input's parent frame.
pub fn normalize_scene(scene: &Scene) -> Result<Scene, SceneError> {
    let anchor = scene.target_history.iter().rev().find(|s| s.valid).ok_or(SceneError::EmptyTargetHistory)?;
    let frame = Frame::new(anchor.position, anchor.heading);
    Ok(scene.map_coordinates(&frame))
}

/// Maps agent-frame positions back through `frame` (inverse of normalization).
pub fn denormalize_trajectory(traj: &[Vec2], frame: &Frame) -> Vec<Vec2> {
    traj.iter().map(|&p| frame.to_parent(p)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorSet {
    pub vectors: Array2<f64>,
    /// Source entity of each row: 0 = target, then nearby agents, then polylines.
    pub group_ids: Vec<usize>,
    pub num_groups: usize,
}

impl VectorSet {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validity(&self) -> Vec<bool> {
        self.vectors.column(FEATURE_DIM - 1).iter().map(|&v| v > 0.5).collect()
    }
}

/// Closed-form row count for a scene shape.
pub fn vector_count(history: usize, num_nearby: usize, polyline_points: &[usize]) -> usize {
    history * (1 + num_nearby) + polyline_points.iter().map(|p| p.saturating_sub(1)).sum::<usize>()
}

const COL_TIME: usize = 10;
const COL_ENTITY: usize = 11;
const COL_MAP: usize = 15;
const COL_VALID: usize = 19;

fn entity_column(kind: Option<AgentKind>) -> usize {
    COL_ENTITY
        + match kind {
            None => 0,
            Some(AgentKind::Vehicle) => 1,
            Some(AgentKind::Pedestrian) => 2,
            Some(AgentKind::Cyclist) => 3,
        }
}

fn push_track(rows: &mut Vec<[f64; FEATURE_DIM]>, states: &[AgentState], kind: Option<AgentKind>, dt: f64) {
    let h = states.len();
    let state_row = |start: Vec2, s: &AgentState, k: usize| {
        let mut r = [0.0; FEATURE_DIM];
        r[0] = start.x / POSITION_SCALE;
        r[1] = start.y / POSITION_SCALE;
        r[2] = s.position.x / POSITION_SCALE;
        r[3] = s.position.y / POSITION_SCALE;
        r[4] = s.velocity.x / VELOCITY_SCALE;
        r[5] = s.velocity.y / VELOCITY_SCALE;
        r[6] = s.acceleration.x;
        r[7] = s.acceleration.y;
        r[8] = s.heading.cos();
        r[9] = s.heading.sin();
        r[COL_TIME] = (k as f64 - (h as f64 - 1.0)) * dt;
        r[entity_column(kind)] = 1.0;
        r[COL_VALID] = 1.0;
        r
    };
    for k in 1..h {
        let (a, b) = (&states[k - 1], &states[k]);
        rows.push(if a.valid && b.valid { state_row(a.position, b, k) } else { [0.0; FEATURE_DIM] });
    }
    if let Some(cur) = states.last() {
        rows.push(if cur.valid { state_row(cur.position, cur, h - 1) } else { [0.0; FEATURE_DIM] });
    }
}

/// Flattens a (normalized) scene into per-segment feature rows.
pub fn vectorize(scene: &Scene) -> VectorSet {
    let dt = scene.tick_duration;
    let mut rows: Vec<[f64; FEATURE_DIM]> = Vec::new();
    let mut group_ids = Vec::new();

    push_track(&mut rows, &scene.target_history, None, dt);
    group_ids.resize(rows.len(), 0);
    let mut group = 1;

    let mut nearby: Vec<&AgentTrack> = scene.nearby.iter().collect();
    nearby.sort_by_key(|a| a.id);
    for agent in nearby {
        push_track(&mut rows, &agent.states, Some(agent.kind), dt);
        group_ids.resize(rows.len(), group);
        group += 1;
    }

    let mut polylines: Vec<&Polyline> = scene.map.iter().collect();
    polylines.sort_by_key(|p| p.id);
    for poly in polylines {
        for seg in poly.points.windows(2) {
            let mut r = [0.0; FEATURE_DIM];
            r[0] = seg[0].x / POSITION_SCALE;
            r[1] = seg[0].y / POSITION_SCALE;
            r[2] = seg[1].x / POSITION_SCALE;
            r[3] = seg[1].y / POSITION_SCALE;
            r[COL_MAP + poly.semantic.code() as usize] = 1.0;
            r[COL_VALID] = 1.0;
            rows.push(r);
        }
        group_ids.resize(rows.len(), group);
        group += 1;
    }

    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    VectorSet { vectors: Array2::from_shape_vec((n, FEATURE_DIM), flat).expect("row-major shape"), group_ids, num_groups: group }
}

/// Angle-aware state derived from consecutive positions; used by generators.
pub fn state_from_positions(prev: Vec2, cur: Vec2, next: Vec2, dt: f64, fallback_heading: f64) -> AgentState {
    let velocity = (next - prev) * (0.5 / dt);
    let acceleration = (next - cur * 2.0 + prev) * (1.0 / (dt * dt));
    let heading = if velocity.norm() > 0.2 { velocity.angle() } else { wrap_angle(fallback_heading) };
    AgentState { position: cur, heading, velocity, acceleration, valid: true }
}
