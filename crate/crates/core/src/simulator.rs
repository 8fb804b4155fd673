//! Synthetic driving world.
//!
//! Map templates are built from analytic lanes (lines and circular arcs).
//! Agents follow scripts: a path, a lateral-offset plan (quintic blends) and
//! a speed controller with look-ahead braking toward speed zones. Scripts
//! are simulated tick by tick, so ground-truth motion is smooth and its
//! acceleration stays near the configured bound.
//!
//! A [`World`] holds precomputed scripted tracks and, for closed-loop use,
//! an externally driven ego track. Dataset scenes are windows of a world
//! observed around a scripted target agent, then moved by a random rigid
//! pose.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path as FsPath;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{write_dataset, write_jsonl, DataError, SceneSource};
use crate::exec::{map_range, ExecMode};
use crate::geometry::{wrap_angle, Frame, OrientedBox, Polygon, Vec2};
use crate::scene::{AgentKind, AgentState, AgentTrack, MapSemantic, Polyline, Scene};
use crate::seed::{derive_rng, tags};

/// Attempts per scene before placement is declared infeasible.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 50;
/// Warm-up ticks before the first observed tick, for backward differences.
const WARMUP: usize = 2;
/// Agents beyond this distance from the target are not observed.
const PERCEPTION_RADIUS: f64 = 50.0;
/// Map pieces are kept when within this distance of a point ahead of the target.
const MAP_RADIUS: f64 = 35.0;
const MAP_LOOKAHEAD: f64 = 10.0;
const LANE_WIDTH: f64 = 3.5;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("scene {index}: no feasible placement after {attempts} attempts")]
    Infeasible { index: u64, attempts: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapTemplate {
    StraightRoad,
    Intersection,
    TwoLaneWithParking,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptKind {
    LaneFollow,
    LaneChange,
    DoublePark,
    Jaywalk,
    Oncoming,
}

impl ScriptKind {
    fn fits(self, template: MapTemplate) -> bool {
        use MapTemplate::*;
        use ScriptKind::*;
        matches!(
            (self, template),
            (LaneFollow, _)
                | (LaneChange, StraightRoad)
                | (Jaywalk, StraightRoad)
                | (Oncoming, StraightRoad)
                | (DoublePark, TwoLaneWithParking)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub templates: Vec<MapTemplate>,
    /// Scripts the target agent may follow.
    pub scripts: Vec<ScriptKind>,
    /// Expected number of nearby agents per scene.
    pub nearby_density: f64,
    pub max_nearby: usize,
    pub history: usize,
    pub horizon: usize,
    pub tick_duration: f64,
    /// Acceleration bound (m/s²) the scripts are designed to respect.
    pub max_accel: f64,
    /// Probability that a nearby agent tick is unobserved.
    pub occlusion: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            templates: vec![MapTemplate::StraightRoad, MapTemplate::Intersection, MapTemplate::TwoLaneWithParking],
            scripts: vec![
                ScriptKind::LaneFollow,
                ScriptKind::LaneChange,
                ScriptKind::DoublePark,
                ScriptKind::Jaywalk,
                ScriptKind::Oncoming,
            ],
            nearby_density: 2.0,
            max_nearby: 4,
            history: crate::scene::DEFAULT_HISTORY,
            horizon: crate::scene::DEFAULT_HORIZON,
            tick_duration: crate::scene::DEFAULT_TICK,
            max_accel: 3.0,
            occlusion: 0.02,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// The double-park family on the parking template.
    pub fn double_park() -> Self {
        Self { templates: vec![MapTemplate::TwoLaneWithParking], scripts: vec![ScriptKind::DoublePark], ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.templates.is_empty() || self.scripts.is_empty() {
            return bad("templates and scripts must be nonempty".into());
        }
        if !self.templates.iter().any(|t| self.scripts.iter().any(|s| s.fits(*t))) {
            return bad("no script fits any configured template".into());
        }
        if !(self.nearby_density >= 0.0) || self.nearby_density > self.max_nearby as f64 {
            return bad(format!("nearby_density must be in [0, max_nearby = {}]", self.max_nearby));
        }
        if self.history < 2 || self.horizon == 0 {
            return bad("history must be >= 2 and horizon >= 1".into());
        }
        if !(self.tick_duration > 0.0 && self.max_accel > 0.0) {
            return bad("tick_duration and max_accel must be positive".into());
        }
        if !(0.0..1.0).contains(&self.occlusion) {
            return bad("occlusion must be in [0, 1)".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Paths
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
enum Segment {
    Line {
        start: Vec2,
        heading: f64,
        length: f64,
    },
    /// Signed `turn`: positive is counter-clockwise.
    Arc {
        start: Vec2,
        heading: f64,
        radius: f64,
        turn: f64,
    },
}

impl Segment {
    fn length(&self) -> f64 {
        match *self {
            Segment::Line { length, .. } => length,
            Segment::Arc { radius, turn, .. } => radius * turn.abs(),
        }
    }

    fn at(&self, s: f64) -> (Vec2, f64) {
        match *self {
            Segment::Line { start, heading, .. } => (start + Vec2::from_angle(heading) * s, heading),
            Segment::Arc { start, heading, radius, turn } => {
                let sign = turn.signum();
                let center = start + Vec2::from_angle(heading + sign * FRAC_PI_2) * radius;
                let swept = sign * s / radius;
                let p = center + (start - center).rotate(swept);
                (p, wrap_angle(heading + swept))
            }
        }
    }
}

/// Arc-length parameterized chain of segments, extended straight beyond
/// both ends.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    segments: Vec<Segment>,
}

impl Path {
    fn line(start: Vec2, end: Vec2) -> Self {
        let d = end - start;
        Self { segments: vec![Segment::Line { start, heading: d.angle(), length: d.norm() }] }
    }

    fn end_state(&self) -> (Vec2, f64) {
        let last = self.segments.last().expect("nonempty path");
        last.at(last.length())
    }

    fn then_arc(mut self, radius: f64, turn: f64) -> Self {
        let (start, heading) = self.end_state();
        self.segments.push(Segment::Arc { start, heading, radius, turn });
        self
    }

    fn then_line(mut self, length: f64) -> Self {
        let (start, heading) = self.end_state();
        self.segments.push(Segment::Line { start, heading, length });
        self
    }

    fn rotated(&self, theta: f64) -> Self {
        let seg = |s: &Segment| match *s {
            Segment::Line { start, heading, length } => {
                Segment::Line { start: start.rotate(theta), heading: wrap_angle(heading + theta), length }
            }
            Segment::Arc { start, heading, radius, turn } => {
                Segment::Arc { start: start.rotate(theta), heading: wrap_angle(heading + theta), radius, turn }
            }
        };
        Self { segments: self.segments.iter().map(seg).collect() }
    }

    pub fn length(&self) -> f64 {
        self.segments.iter().map(Segment::length).sum()
    }

    /// Point and tangent heading at arc length `s`.
    pub fn at(&self, s: f64) -> (Vec2, f64) {
        if s < 0.0 {
            let (p, h) = self.segments[0].at(0.0);
            return (p + Vec2::from_angle(h) * s, h);
        }
        let mut rest = s;
        for seg in &self.segments {
            let l = seg.length();
            if rest <= l {
                return seg.at(rest);
            }
            rest -= l;
        }
        let (p, h) = self.end_state();
        (p + Vec2::from_angle(h) * rest, h)
    }

    /// Arc-length ranges of the curved segments.
    fn arc_ranges(&self) -> Vec<(f64, f64)> {
        let mut s = 0.0;
        let mut out = Vec::new();
        for seg in &self.segments {
            let l = seg.length();
            if matches!(seg, Segment::Arc { .. }) {
                out.push((s, s + l));
            }
            s += l;
        }
        out
    }

    /// Samples points every `step` meters (endpoints included).
    fn sample(&self, from: f64, to: f64, step: f64) -> Vec<Vec2> {
        let n = ((to - from) / step).ceil().max(1.0) as usize;
        (0..=n).map(|i| self.at(from + (to - from) * i as f64 / n as f64).0).collect()
    }
}

// ---------------------------------------------------------------------------
// Scripts
// ---------------------------------------------------------------------------

fn quintic(u: f64) -> (f64, f64) {
    let u = u.clamp(0.0, 1.0);
    let v = u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
    let dv = 30.0 * u * u * (1.0 - u) * (1.0 - u);
    (v, dv)
}

/// Smooth lateral offset changes, keyed by arc length or by time.
#[derive(Clone, Debug, PartialEq)]
struct LateralPlan {
    base: f64,
    by_distance: bool,
    /// (start, duration, delta)
    blends: Vec<(f64, f64, f64)>,
}

impl LateralPlan {
    fn none(base: f64) -> Self {
        Self { base, by_distance: true, blends: Vec::new() }
    }

    /// Offset and its derivative with respect to the key.
    fn eval(&self, key: f64) -> (f64, f64) {
        let mut d = self.base;
        let mut dd = 0.0;
        for &(start, len, delta) in &self.blends {
            let (v, dv) = quintic((key - start) / len);
            d += delta * v;
            dd += delta * dv / len;
        }
        (d, dd)
    }
}

/// Speed cap over `[start, end)` of the path, optionally lifted at `until`.
#[derive(Clone, Debug, PartialEq)]
struct SpeedZone {
    start: f64,
    end: f64,
    v_max: f64,
    until: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct SpeedPlan {
    v0: f64,
    cruise: f64,
    accel: f64,
    brake: f64,
    /// Time before which the agent waits at rest.
    depart: f64,
    zones: Vec<SpeedZone>,
}

impl SpeedPlan {
    fn constant(v: f64) -> Self {
        Self { v0: v, cruise: v, accel: 1.2, brake: 1.5, depart: 0.0, zones: Vec::new() }
    }

    fn desired(&self, s: f64, t: f64) -> f64 {
        if t < self.depart {
            return 0.0;
        }
        let mut v = self.cruise;
        for z in &self.zones {
            if z.until.is_some_and(|u| t >= u) {
                continue;
            }
            if s >= z.start && s < z.end {
                v = v.min(z.v_max);
            } else if s < z.start {
                let gap = (z.start - s - 0.5).max(0.0);
                v = v.min((z.v_max * z.v_max + 2.0 * self.brake * gap).sqrt());
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Script {
    kind: AgentKind,
    path: Path,
    s0: f64,
    lateral: LateralPlan,
    speed: SpeedPlan,
}

/// Simulated motion of one scripted agent.
#[derive(Clone, Debug, PartialEq)]
pub struct ScriptedAgent {
    pub id: u32,
    pub kind: AgentKind,
    pub length: f64,
    pub width: f64,
    pub positions: Vec<Vec2>,
    pub headings: Vec<f64>,
    /// Arc length along the script path per tick (diagnostics and tests).
    pub progress: Vec<f64>,
    /// Lateral offset from the path per tick.
    pub offsets: Vec<f64>,
}

impl ScriptedAgent {
    fn box_at(&self, tick: usize) -> OrientedBox {
        OrientedBox { center: self.positions[tick], heading: self.headings[tick], length: self.length, width: self.width }
    }
}

/// Longitudinal response time of the speed controller.
const SPEED_TAU: f64 = 0.6;

fn simulate(id: u32, script: &Script, ticks: usize, dt: f64) -> ScriptedAgent {
    let (length, width) = script.kind.footprint();
    let mut positions = Vec::with_capacity(ticks);
    let mut headings = Vec::with_capacity(ticks);
    let mut progress = Vec::with_capacity(ticks);
    let mut offsets = Vec::with_capacity(ticks);
    let sp = &script.speed;
    let (mut s, mut v) = (script.s0, sp.v0);
    let mut prev_heading = script.path.at(s).1;
    for k in 0..ticks {
        let t = k as f64 * dt;
        let (p, tangent) = script.path.at(s);
        let key = if script.lateral.by_distance { s } else { t };
        let (d, dd) = script.lateral.eval(key);
        let slope = if script.lateral.by_distance { dd } else { dd / v.max(0.5) };
        let normal = Vec2::from_angle(tangent + FRAC_PI_2);
        positions.push(p + normal * d);
        let heading = if v > 0.05 || dd != 0.0 { wrap_angle(tangent + slope.atan()) } else { prev_heading };
        headings.push(heading);
        prev_heading = heading;
        progress.push(s);
        offsets.push(d);
        let a = ((sp.desired(s, t) - v) / SPEED_TAU).clamp(-2.0 * sp.brake, sp.accel);
        let v_next = (v + a * dt).max(0.0);
        s += 0.5 * (v + v_next) * dt;
        v = v_next;
    }
    ScriptedAgent { id, kind: script.kind, length, width, positions, headings, progress, offsets }
}

// ---------------------------------------------------------------------------
// Map layouts
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct MapLayout {
    pub template: MapTemplate,
    /// Map pieces, ids unique within the layout.
    pub polylines: Vec<Polyline>,
    pub drivable: Vec<Polygon>,
    lanes: Vec<Path>,
}

struct LayoutBuilder {
    polylines: Vec<Polyline>,
}

impl LayoutBuilder {
    /// Cuts `path[from..to]` into pieces of at most `piece` meters sampled every `step`.
    fn add(&mut self, semantic: MapSemantic, path: &Path, from: f64, to: f64, piece: f64, step: f64) {
        let n = ((to - from) / piece).ceil().max(1.0) as usize;
        for i in 0..n {
            let a = from + (to - from) * i as f64 / n as f64;
            let b = from + (to - from) * (i + 1) as f64 / n as f64;
            let id = self.polylines.len() as u32;
            self.polylines.push(Polyline { id, semantic, points: path.sample(a, b, step) });
        }
    }

    fn straight(&mut self, semantic: MapSemantic, a: Vec2, b: Vec2) {
        let p = Path::line(a, b);
        let l = p.length();
        self.add(semantic, &p, 0.0, l, 20.0, 10.0);
    }
}

const ROAD_X: (f64, f64) = (-200.0, 600.0);
const ARM: f64 = 150.0;
const BOX: f64 = 10.0;
const LEFT_RADIUS: f64 = 10.0;
const RIGHT_RADIUS: f64 = 6.0;

impl MapLayout {
    pub fn new(template: MapTemplate) -> Self {
        let mut b = LayoutBuilder { polylines: Vec::new() };
        let (x0, x1) = ROAD_X;
        let v = Vec2::new;
        match template {
            MapTemplate::StraightRoad => {
                let lanes = vec![
                    Path::line(v(x0, 0.0), v(x1, 0.0)),
                    Path::line(v(x0, LANE_WIDTH), v(x1, LANE_WIDTH)),
                    Path::line(v(x1, 2.0 * LANE_WIDTH), v(x0, 2.0 * LANE_WIDTH)),
                ];
                for y in [0.0, LANE_WIDTH, 2.0 * LANE_WIDTH] {
                    b.straight(MapSemantic::LaneCenter, v(x0, y), v(x1, y));
                }
                b.straight(MapSemantic::LaneBoundary, v(x0, 1.5 * LANE_WIDTH), v(x1, 1.5 * LANE_WIDTH));
                b.straight(MapSemantic::RoadEdge, v(x0, -0.5 * LANE_WIDTH), v(x1, -0.5 * LANE_WIDTH));
                b.straight(MapSemantic::RoadEdge, v(x0, 2.5 * LANE_WIDTH), v(x1, 2.5 * LANE_WIDTH));
                for x in [100.0, 300.0] {
                    b.straight(MapSemantic::Crosswalk, v(x, -0.5 * LANE_WIDTH), v(x, 2.5 * LANE_WIDTH));
                }
                Self { template, polylines: b.polylines, drivable: vec![Polygon::rect(x0, -0.5 * LANE_WIDTH, x1, 2.5 * LANE_WIDTH)], lanes }
            }
            MapTemplate::TwoLaneWithParking => {
                let lanes = vec![
                    Path::line(v(x0, 0.0), v(x1, 0.0)),
                    Path::line(v(x1, LANE_WIDTH), v(x0, LANE_WIDTH)),
                    Path::line(v(x0, -3.0), v(x1, -3.0)),
                ];
                b.straight(MapSemantic::LaneCenter, v(x0, 0.0), v(x1, 0.0));
                b.straight(MapSemantic::LaneCenter, v(x0, LANE_WIDTH), v(x1, LANE_WIDTH));
                b.straight(MapSemantic::LaneBoundary, v(x0, 0.5 * LANE_WIDTH), v(x1, 0.5 * LANE_WIDTH));
                b.straight(MapSemantic::LaneBoundary, v(x0, -0.5 * LANE_WIDTH), v(x1, -0.5 * LANE_WIDTH));
                b.straight(MapSemantic::RoadEdge, v(x0, -4.25), v(x1, -4.25));
                b.straight(MapSemantic::RoadEdge, v(x0, 1.5 * LANE_WIDTH), v(x1, 1.5 * LANE_WIDTH));
                Self { template, polylines: b.polylines, drivable: vec![Polygon::rect(x0, -4.25, x1, 1.5 * LANE_WIDTH)], lanes }
            }
            MapTemplate::Intersection => {
                let h = 0.5 * LANE_WIDTH;
                let mut lanes = Vec::new();
                for k in 0..4 {
                    let rot = k as f64 * FRAC_PI_2;
                    let approach = Path::line(v(-ARM, -h), v(ARM, -h)).rotated(rot);
                    b.straight(MapSemantic::LaneCenter, v(-ARM, -h).rotate(rot), v(ARM, -h).rotate(rot));
                    let left =
                        Path::line(v(-ARM, -h), v(h - LEFT_RADIUS, -h)).then_arc(LEFT_RADIUS, FRAC_PI_2).then_line(ARM - LEFT_RADIUS + h);
                    let right = Path::line(v(-ARM, -h), v(-h - RIGHT_RADIUS, -h))
                        .then_arc(RIGHT_RADIUS, -FRAC_PI_2)
                        .then_line(ARM - RIGHT_RADIUS - h);
                    for path in [left.rotated(rot), right.rotated(rot)] {
                        let (a, z) = path.arc_ranges()[0];
                        b.add(MapSemantic::LaneCenter, &path, a, z, 20.0, 3.0);
                        lanes.push(path);
                    }
                    lanes.push(approach);
                    for side in [-LANE_WIDTH, LANE_WIDTH] {
                        b.straight(MapSemantic::RoadEdge, v(-ARM, side).rotate(rot), v(-BOX, side).rotate(rot));
                    }
                    b.straight(MapSemantic::Crosswalk, v(-BOX - 2.0, -LANE_WIDTH).rotate(rot), v(-BOX - 2.0, LANE_WIDTH).rotate(rot));
                }
                Self {
                    template,
                    polylines: b.polylines,
                    drivable: vec![
                        Polygon::rect(-ARM, -LANE_WIDTH, ARM, LANE_WIDTH),
                        Polygon::rect(-LANE_WIDTH, -ARM, LANE_WIDTH, ARM),
                        Polygon::rect(-BOX, -BOX, BOX, BOX),
                    ],
                    lanes,
                }
            }
        }
    }

    pub fn on_road(&self, p: Vec2) -> bool {
        self.drivable.iter().any(|poly| poly.contains(p))
    }

    /// Map pieces near `anchor`, keeping their layout ids.
    fn pieces_near(&self, anchor: Vec2) -> Vec<Polyline> {
        self.polylines.iter().filter(|p| p.points.iter().any(|q| q.dist(anchor) <= MAP_RADIUS)).cloned().collect()
    }

    /// Intersection lanes are stored as (left, right, straight) per approach.
    fn intersection_route(&self, approach: usize, route: usize) -> &Path {
        &self.lanes[approach * 3 + route]
    }
}

// ---------------------------------------------------------------------------
// Worlds
// ---------------------------------------------------------------------------

/// Externally driven agent (closed-loop ego).
#[derive(Clone, Debug, PartialEq)]
pub struct EgoTrack {
    pub id: u32,
    pub kind: AgentKind,
    pub length: f64,
    pub width: f64,
    pub positions: Vec<Vec2>,
    pub headings: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WorldEvent {
    Offroad { tick: usize },
    Collision { tick: usize, agent: u32 },
}

#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub layout: MapLayout,
    pub agents: Vec<ScriptedAgent>,
    pub ego: Option<EgoTrack>,
    pub tick: usize,
    pub events: Vec<WorldEvent>,
}

fn observed_state(positions: &[Vec2], headings: &[f64], k: usize, dt: f64) -> AgentState {
    let cur = positions[k];
    let prev = positions[k.saturating_sub(1)];
    let prev2 = positions[k.saturating_sub(2)];
    AgentState {
        position: cur,
        heading: headings[k],
        velocity: (cur - prev) * (1.0 / dt),
        acceleration: (cur - prev * 2.0 + prev2) * (1.0 / (dt * dt)),
        valid: true,
    }
}

impl World {
    pub fn new(config: WorldConfig, template: MapTemplate) -> Self {
        Self { config, layout: MapLayout::new(template), agents: Vec::new(), ego: None, tick: WARMUP, events: Vec::new() }
    }

    /// Scripted agents keep their last simulated pose after their script ends.
    fn agent_pose(&self, a: &ScriptedAgent, tick: usize) -> (Vec2, f64) {
        let k = tick.min(a.positions.len() - 1);
        (a.positions[k], a.headings[k])
    }

    /// Builds an observation around a target track ending at `tick`.
    #[allow(clippy::too_many_arguments)]
    fn observe_track(
        &self,
        scene_id: u64,
        kind: AgentKind,
        target_id: u32,
        positions: &[Vec2],
        headings: &[f64],
        tick: usize,
        with_future: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Scene {
        let cfg = &self.config;
        let dt = cfg.tick_duration;
        let h = cfg.history;
        let first = tick + 1 - h;
        let target_history: Vec<AgentState> = (first..=tick).map(|k| observed_state(positions, headings, k, dt)).collect();
        let cur = positions[tick];
        let mut near: Vec<(f64, &ScriptedAgent)> = self
            .agents
            .iter()
            .filter(|a| a.id != target_id)
            .map(|a| (self.agent_pose(a, tick).0.dist(cur), a))
            .filter(|(d, _)| *d <= PERCEPTION_RADIUS)
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
        near.truncate(cfg.max_nearby);
        let mut rng = rng;
        let track = |a: &ScriptedAgent, ks: std::ops::RangeInclusive<usize>, rng: &mut Option<&mut ChaCha8Rng>, occlude: bool| {
            let n = a.positions.len();
            let pos: Vec<Vec2> = (0..n.max(tick + cfg.horizon + 1)).map(|k| a.positions[k.min(n - 1)]).collect();
            let hd: Vec<f64> = (0..pos.len()).map(|k| a.headings[k.min(n - 1)]).collect();
            let states = ks
                .map(|k| {
                    let hidden = occlude && rng.as_mut().is_some_and(|r| r.random_bool(cfg.occlusion));
                    if hidden {
                        AgentState::invalid()
                    } else {
                        observed_state(&pos, &hd, k, dt)
                    }
                })
                .collect();
            AgentTrack { id: a.id, kind: a.kind, length: a.length, width: a.width, states }
        };
        let nearby: Vec<AgentTrack> = near.iter().map(|(_, a)| track(a, first..=tick, &mut rng, true)).collect();
        let (future_gt, nearby_future) = if with_future {
            (
                Some(positions[tick + 1..=tick + cfg.horizon].to_vec()),
                near.iter().map(|(_, a)| track(a, tick + 1..=tick + cfg.horizon, &mut None, false)).collect(),
            )
        } else {
            (None, Vec::new())
        };
        let anchor = cur + Vec2::from_angle(headings[tick]) * MAP_LOOKAHEAD;
        Scene {
            scene_id,
            tick_duration: dt,
            frame: Frame::IDENTITY,
            target_kind: kind,
            target_history,
            nearby,
            map: self.layout.pieces_near(anchor),
            drivable_area: self.layout.drivable.clone(),
            future_gt,
            nearby_future,
        }
    }

    /// Observation of the ego at the current tick (no future).
    pub fn observe(&self) -> Option<Scene> {
        let ego = self.ego.as_ref()?;
        Some(self.observe_track(self.tick as u64, ego.kind, ego.id, &ego.positions, &ego.headings, self.tick, false, None))
    }

    /// Advances one tick. The ego moves to `ego_next` (or keeps its last
    /// velocity when `None`); scripted agents follow their scripts.
    pub fn step(&mut self, ego_next: Option<Vec2>) {
        self.tick += 1;
        let tick = self.tick;
        if let Some(ego) = self.ego.as_mut() {
            let last = *ego.positions.last().expect("ego history");
            let prev = ego.positions[ego.positions.len().saturating_sub(2)];
            let next = ego_next.unwrap_or(last + (last - prev));
            let heading = if next.dist(last) > 0.02 { (next - last).angle() } else { *ego.headings.last().expect("ego history") };
            ego.positions.push(next);
            ego.headings.push(heading);
            let ego_box = OrientedBox { center: next, heading, length: ego.length, width: ego.width };
            if !self.layout.on_road(next) {
                self.events.push(WorldEvent::Offroad { tick });
            }
            for a in &self.agents {
                let (p, h) = {
                    let k = tick.min(a.positions.len() - 1);
                    (a.positions[k], a.headings[k])
                };
                if ego_box.overlaps(&OrientedBox { center: p, heading: h, length: a.length, width: a.width }) {
                    self.events.push(WorldEvent::Collision { tick, agent: a.id });
                }
            }
        }
    }

    /// Closed-loop double-park world: the ego approaches a vehicle stopped in
    /// its lane, with parked cars alongside and traffic in the other lane.
    /// Scripted agents are simulated for `ticks` steps after the history.
    pub fn double_park(config: WorldConfig, seed: u64, ticks: usize) -> Self {
        let mut rng = derive_rng(seed, tags::WORLD, 0);
        let mut world = World::new(config, MapTemplate::TwoLaneWithParking);
        let dt = world.config.tick_duration;
        let total = WARMUP + world.config.history + ticks + world.config.horizon + 1;
        let v0 = rng.random_range(6.0..7.5);
        let ego_script = Script {
            kind: AgentKind::Vehicle,
            path: world.layout.lanes[0].clone(),
            s0: 150.0,
            lateral: LateralPlan::none(0.0),
            speed: SpeedPlan::constant(v0),
        };
        let warm = simulate(0, &ego_script, WARMUP + world.config.history, dt);
        let ego_x = warm.positions.last().expect("history").x;
        let blocker_x = ego_x + rng.random_range(35.0..55.0);
        world.agents.push(parked(1, Vec2::new(blocker_x, -0.2), total));
        let mut id = 2;
        for k in 0..rng.random_range(2..5) {
            let x = ego_x + 15.0 + 20.0 * k as f64 + rng.random_range(0.0..8.0);
            world.agents.push(parked(id, Vec2::new(x, -3.0), total));
            id += 1;
        }
        // Oncoming traffic that has already passed the ego.
        let onc = Script {
            kind: AgentKind::Vehicle,
            path: world.layout.lanes[1].clone(),
            s0: ROAD_X.1 - (ego_x - 15.0),
            lateral: LateralPlan::none(0.0),
            speed: SpeedPlan::constant(9.0),
        };
        world.agents.push(simulate(id, &onc, total, dt));
        world.ego = Some(EgoTrack {
            id: 0,
            kind: AgentKind::Vehicle,
            length: warm.length,
            width: warm.width,
            positions: warm.positions,
            headings: warm.headings,
        });
        world.tick = WARMUP + world.config.history - 1;
        world
    }
}

fn parked(id: u32, at: Vec2, ticks: usize) -> ScriptedAgent {
    let (length, width) = AgentKind::Vehicle.footprint();
    ScriptedAgent {
        id,
        kind: AgentKind::Vehicle,
        length,
        width,
        positions: vec![at; ticks],
        headings: vec![0.0; ticks],
        progress: vec![0.0; ticks],
        offsets: vec![0.0; ticks],
    }
}

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

struct Placement {
    script: ScriptKind,
    target: Script,
    others: Vec<Script>,
    /// Stationary agents (position, heading).
    parked: Vec<(Vec2, f64)>,
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, xs: &[T]) -> T {
    xs[rng.random_range(0..xs.len())]
}

/// Distance along the target path covered during the history window.
fn history_span(cfg: &WorldConfig, v: f64) -> f64 {
    v * (WARMUP + cfg.history) as f64 * cfg.tick_duration
}

fn vehicle_speed(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(4.0..12.0)
}

fn place(cfg: &WorldConfig, layout: &MapLayout, script: ScriptKind, rng: &mut ChaCha8Rng) -> Placement {
    let template = layout.template;
    let t_now = (WARMUP + cfg.history - 1) as f64 * cfg.tick_duration;
    let mut others = Vec::new();
    let mut parked_agents = Vec::new();
    let nearby_count = {
        let p = if cfg.max_nearby == 0 { 0.0 } else { cfg.nearby_density / cfg.max_nearby as f64 };
        (0..cfg.max_nearby).filter(|_| rng.random_bool(p.clamp(0.0, 1.0))).count()
    };
    let target = match (template, script) {
        (MapTemplate::StraightRoad, ScriptKind::LaneFollow | ScriptKind::LaneChange) => {
            let lane = if script == ScriptKind::LaneChange { rng.random_range(0..2) } else { rng.random_range(0..3) };
            let v0 = vehicle_speed(rng);
            let cruise = (v0 + rng.random_range(-3.0..3.0)).clamp(3.0, 13.0);
            let mut speed = SpeedPlan { cruise, ..SpeedPlan::constant(v0) };
            if rng.random_bool(0.15) {
                speed.v0 = 0.0;
                speed.depart = rng.random_range(0.0..t_now + 2.0);
            }
            let mut lateral = LateralPlan::none(0.0);
            if script == ScriptKind::LaneChange {
                let delta = if lane == 0 { LANE_WIDTH } else { -LANE_WIDTH };
                lateral = LateralPlan {
                    base: 0.0,
                    by_distance: false,
                    blends: vec![(rng.random_range(t_now - 2.0..t_now + 3.0), rng.random_range(3.5..5.0), delta)],
                };
                speed.v0 = speed.v0.max(5.0);
                speed.cruise = speed.cruise.max(5.0);
                speed.depart = 0.0;
            }
            Script { kind: AgentKind::Vehicle, path: layout.lanes[lane].clone(), s0: rng.random_range(150.0..350.0), lateral, speed }
        }
        (MapTemplate::StraightRoad, ScriptKind::Jaywalk) => {
            let lane = rng.random_range(0..2);
            let v0 = rng.random_range(5.0..10.0);
            let s0 = rng.random_range(150.0..300.0);
            let x_cross = s0 + history_span(cfg, v0) + rng.random_range(15.0..45.0);
            let walk = rng.random_range(1.0..1.6);
            let start_t = rng.random_range(0.0..t_now + 2.0);
            let lane_y = lane as f64 * LANE_WIDTH;
            // Time for the walker to clear the lane by a margin.
            let clear_t = start_t + 1.0 + (lane_y + 2.5 + 3.5) / walk;
            let ped_path = Path::line(Vec2::new(ROAD_X.0 + x_cross, -3.5), Vec2::new(ROAD_X.0 + x_cross, 12.0));
            let ped = Script {
                kind: AgentKind::Pedestrian,
                path: ped_path,
                s0: 0.0,
                lateral: LateralPlan::none(0.0),
                speed: SpeedPlan { depart: start_t, accel: 0.8, ..SpeedPlan::constant(walk) },
            };
            let ped = Script { speed: SpeedPlan { v0: 0.0, ..ped.speed }, ..ped };
            let car = Script {
                kind: AgentKind::Vehicle,
                path: layout.lanes[lane].clone(),
                s0,
                lateral: LateralPlan::none(0.0),
                speed: SpeedPlan {
                    zones: vec![SpeedZone { start: x_cross - 8.0, end: f64::INFINITY, v_max: 0.0, until: Some(clear_t) }],
                    ..SpeedPlan::constant(v0)
                },
            };
            if rng.random_bool(0.3) {
                others.push(car);
                ped
            } else {
                others.push(ped);
                car
            }
        }
        (MapTemplate::StraightRoad, ScriptKind::Oncoming) => {
            let v: f64 = rng.random_range(3.0..6.0);
            Script {
                kind: AgentKind::Cyclist,
                path: layout.lanes[2].clone(),
                s0: rng.random_range(250.0..450.0),
                lateral: LateralPlan::none(-1.0),
                speed: SpeedPlan { cruise: (v + rng.random_range(-1.0..1.0)).max(2.5), ..SpeedPlan::constant(v) },
            }
        }
        (MapTemplate::TwoLaneWithParking, ScriptKind::DoublePark) => {
            let v0 = rng.random_range(5.5..7.5);
            let s0 = rng.random_range(150.0..300.0);
            let now = s0 + history_span(cfg, v0);
            let blocker = now + rng.random_range(-45.0..90.0);
            parked_agents.push((Vec2::new(ROAD_X.0 + blocker, -0.2), 0.0));
            let out_len = rng.random_range(24.0..30.0);
            let back_len = rng.random_range(24.0..30.0);
            let lateral = LateralPlan {
                base: 0.0,
                by_distance: true,
                blends: vec![(blocker - 10.0 - out_len, out_len, LANE_WIDTH), (blocker + 8.0, back_len, -LANE_WIDTH)],
            };
            let zone = SpeedZone { start: blocker - 12.0 - out_len, end: blocker + 10.0 + back_len, v_max: 6.5, until: None };
            Script {
                kind: AgentKind::Vehicle,
                path: layout.lanes[0].clone(),
                s0,
                lateral,
                speed: SpeedPlan { cruise: rng.random_range(6.0..8.0), zones: vec![zone], ..SpeedPlan::constant(v0) },
            }
        }
        (MapTemplate::TwoLaneWithParking, _) => {
            let v0 = vehicle_speed(rng).min(10.0);
            let lane = rng.random_range(0..2);
            Script {
                kind: AgentKind::Vehicle,
                path: layout.lanes[lane].clone(),
                s0: rng.random_range(150.0..350.0),
                lateral: LateralPlan::none(0.0),
                speed: SpeedPlan { cruise: (v0 + rng.random_range(-2.0..2.0)).clamp(3.0, 10.0), ..SpeedPlan::constant(v0) },
            }
        }
        (MapTemplate::Intersection, _) => {
            let approach = rng.random_range(0..4);
            let route = rng.random_range(0..3);
            let path = layout.intersection_route(approach, route).clone();
            let v0 = rng.random_range(5.0..11.0);
            let mut zones = Vec::new();
            if let Some(&(a, z)) = path.arc_ranges().first() {
                let v_turn = if route == 0 { 4.5 } else { 3.5 };
                zones.push(SpeedZone { start: a, end: z, v_max: v_turn, until: None });
            }
            let stop_line = ARM - BOX - 3.0;
            let mut depart = 0.0;
            let mut v_start = v0;
            if rng.random_bool(0.25) {
                zones.push(SpeedZone { start: stop_line, end: f64::INFINITY, v_max: 0.0, until: Some(rng.random_range(0.5..t_now + 5.0)) });
            } else if rng.random_bool(0.1) {
                v_start = 0.0;
                depart = rng.random_range(0.0..t_now + 2.0);
            }
            let s0 = stop_line - rng.random_range(5.0..70.0);
            Script {
                kind: AgentKind::Vehicle,
                path,
                s0,
                lateral: LateralPlan::none(0.0),
                speed: SpeedPlan {
                    v0: v_start,
                    cruise: (v0 + rng.random_range(-2.0..2.0)).clamp(4.0, 11.0),
                    depart,
                    zones,
                    ..SpeedPlan::constant(v0)
                },
            }
        }
        (MapTemplate::StraightRoad, ScriptKind::DoublePark) => unreachable!("filtered by ScriptKind::fits"),
    };

    let target_now = target.s0 + history_span(cfg, target.speed.v0);
    for _ in 0..nearby_count {
        match template {
            MapTemplate::StraightRoad => match rng.random_range(0..4) {
                0 | 1 => {
                    let lane = rng.random_range(0..3);
                    let v = vehicle_speed(rng);
                    let offset = rng.random_range(-50.0..60.0);
                    let s = if lane == 2 { (ROAD_X.1 - ROAD_X.0) - target_now - offset } else { target_now + offset };
                    others.push(Script {
                        kind: AgentKind::Vehicle,
                        path: layout.lanes[lane].clone(),
                        s0: s,
                        lateral: LateralPlan::none(0.0),
                        speed: SpeedPlan::constant(v),
                    });
                }
                2 => {
                    let y = if rng.random_bool(0.5) { -3.5 } else { 2.0 * LANE_WIDTH + 3.5 };
                    let x = ROAD_X.0 + target_now + rng.random_range(-30.0..40.0);
                    let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let path = Path::line(Vec2::new(x, y), Vec2::new(x + dir * 100.0, y));
                    others.push(Script {
                        kind: AgentKind::Pedestrian,
                        path,
                        s0: 0.0,
                        lateral: LateralPlan::none(0.0),
                        speed: SpeedPlan::constant(rng.random_range(0.8..1.6)),
                    });
                }
                _ => {
                    let s = (ROAD_X.1 - ROAD_X.0) - target_now - rng.random_range(-20.0..80.0);
                    others.push(Script {
                        kind: AgentKind::Cyclist,
                        path: layout.lanes[2].clone(),
                        s0: s,
                        lateral: LateralPlan::none(-1.0),
                        speed: SpeedPlan::constant(rng.random_range(3.0..6.0)),
                    });
                }
            },
            MapTemplate::TwoLaneWithParking => {
                if rng.random_bool(0.6) {
                    let x = ROAD_X.0 + target_now + rng.random_range(-30.0..60.0);
                    parked_agents.push((Vec2::new(x, -3.0), 0.0));
                } else {
                    // Oncoming traffic that is already behind the target.
                    let s = (ROAD_X.1 - ROAD_X.0) - target_now + rng.random_range(5.0..40.0);
                    others.push(Script {
                        kind: AgentKind::Vehicle,
                        path: layout.lanes[1].clone(),
                        s0: s,
                        lateral: LateralPlan::none(0.0),
                        speed: SpeedPlan::constant(rng.random_range(6.0..10.0)),
                    });
                }
            }
            MapTemplate::Intersection => {
                let approach = rng.random_range(0..4);
                let route = rng.random_range(0..3);
                let path = layout.intersection_route(approach, route).clone();
                let v = rng.random_range(4.0..9.0);
                let mut zones = Vec::new();
                if let Some(&(a, z)) = path.arc_ranges().first() {
                    zones.push(SpeedZone { start: a, end: z, v_max: 3.5, until: None });
                }
                let s0 = ARM - BOX - rng.random_range(0.0..80.0);
                others.push(Script {
                    kind: AgentKind::Vehicle,
                    path,
                    s0,
                    lateral: LateralPlan::none(0.0),
                    speed: SpeedPlan { zones, ..SpeedPlan::constant(v) },
                });
            }
        }
    }
    Placement { script, target, others, parked: parked_agents }
}

/// Scripted world and target for one dataset scene.
fn scene_world(cfg: &WorldConfig, index: u64) -> Result<(World, ScriptKind), SimError> {
    let mut rng = derive_rng(cfg.seed, tags::SCENE, index);
    let ticks = WARMUP + cfg.history + cfg.horizon;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let template = pick(&mut rng, &cfg.templates);
        let fitting: Vec<ScriptKind> = cfg.scripts.iter().copied().filter(|s| s.fits(template)).collect();
        if fitting.is_empty() {
            continue;
        }
        let script = pick(&mut rng, &fitting);
        let layout = MapLayout::new(template);
        let p = place(cfg, &layout, script, &mut rng);
        let dt = cfg.tick_duration;
        let mut agents = vec![simulate(0, &p.target, ticks, dt)];
        let mut id = 1;
        for s in &p.others {
            agents.push(simulate(id, s, ticks, dt));
            id += 1;
        }
        for &(at, heading) in &p.parked {
            let mut a = parked(id, at, ticks);
            a.headings.fill(heading);
            agents.push(a);
            id += 1;
        }
        let target = &agents[0];
        let clash = agents[1..].iter().any(|a| (0..ticks).any(|k| target.box_at(k).overlaps(&a.box_at(k))));
        if clash {
            continue;
        }
        let mut world = World::new(cfg.clone(), template);
        world.agents = agents;
        world.tick = WARMUP + cfg.history - 1;
        return Ok((world, p.script));
    }
    Err(SimError::Infeasible { index, attempts: MAX_PLACEMENT_ATTEMPTS })
}

/// Deterministic scene `index` of the generator stream for `cfg`.
pub fn generate_scene(cfg: &WorldConfig, index: u64) -> Result<Scene, SimError> {
    let (world, _) = scene_world(cfg, index)?;
    let target = &world.agents[0];
    let mut rng = derive_rng(cfg.seed, tags::SCENE ^ 0xff, index);
    let scene = world.observe_track(index, target.kind, target.id, &target.positions, &target.headings, world.tick, true, Some(&mut rng));
    let pose = Frame::new(Vec2::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)), rng.random_range(-PI..PI));
    Ok(scene.rigidly_moved(&pose))
}

/// Lazily generated scenes `offset..offset + len`.
#[derive(Clone, Debug)]
pub struct GeneratedSource {
    pub config: WorldConfig,
    pub offset: u64,
    pub len: usize,
}

impl SceneSource for GeneratedSource {
    fn len(&self) -> usize {
        self.len
    }

    fn scene(&self, index: usize) -> Result<Scene, DataError> {
        if index >= self.len {
            return Err(DataError::OutOfRange { index, len: self.len });
        }
        generate_scene(&self.config, self.offset + index as u64).map_err(|e| DataError::Other(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub num_scenes: usize,
    pub split_ratio: f64,
    pub train_count: usize,
    pub val_count: usize,
    pub world: WorldConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub manifest: DatasetManifest,
}

/// Generates `n` scenes and splits them by a seeded shuffle of scene ids.
pub fn generate_dataset(cfg: &WorldConfig, n: usize, split_ratio: f64, seed: u64, exec: ExecMode) -> Result<Dataset, SimError> {
    cfg.validate()?;
    if n == 0 {
        return Err(SimError::Config("n_scenes must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(SimError::Config("split ratio must be in [0, 1]".into()));
    }
    let cfg = WorldConfig { seed, ..cfg.clone() };
    let scenes: Vec<Scene> = map_range(exec, n, |i| generate_scene(&cfg, i as u64)).into_iter().collect::<Result<_, _>>()?;
    let mut ids: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(&mut ids[..], &mut derive_rng(seed, tags::SPLIT, 0));
    let train_count = (n as f64 * split_ratio).round() as usize;
    let mut is_train = vec![false; n];
    ids[..train_count].iter().for_each(|&i| is_train[i] = true);
    let (mut train, mut val) = (Vec::with_capacity(train_count), Vec::with_capacity(n - train_count));
    for (i, s) in scenes.into_iter().enumerate() {
        if is_train[i] {
            train.push(s);
        } else {
            val.push(s);
        }
    }
    Ok(Dataset {
        manifest: DatasetManifest { seed, num_scenes: n, split_ratio, train_count, val_count: n - train_count, world: cfg },
        train,
        val,
    })
}

pub const TRAIN_FILE: &str = "train.dgk";
pub const VAL_FILE: &str = "val.dgk";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `train.dgk`, `val.dgk`, `manifest.json` and optional JSON-lines dumps.
pub fn write_dataset_dir(dir: &FsPath, ds: &Dataset, jsonl: bool) -> Result<(), SimError> {
    std::fs::create_dir_all(dir).map_err(DataError::from)?;
    write_dataset(&dir.join(TRAIN_FILE), &ds.train)?;
    write_dataset(&dir.join(VAL_FILE), &ds.val)?;
    let json = serde_json::to_string_pretty(&ds.manifest).map_err(|e| SimError::Manifest(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), json).map_err(DataError::from)?;
    if jsonl {
        write_jsonl(&dir.join("train.jsonl"), &ds.train)?;
        write_jsonl(&dir.join("val.jsonl"), &ds.val)?;
    }
    Ok(())
}

/// Fraction of future ticks whose Verlet residual stays within the
/// acceleration bound.
pub fn residual_compliance(scenes: &[Scene], max_accel: f64) -> f64 {
    let mut ok = 0usize;
    let mut total = 0usize;
    for s in scenes {
        let (a, b) = s.seed_positions();
        let Some(f) = &s.future_gt else { continue };
        let dt2 = s.tick_duration * s.tick_duration;
        let mut path = vec![a, b];
        path.extend_from_slice(f);
        for w in path.windows(3) {
            let r = w[2] - w[1] * 2.0 + w[0];
            total += 1;
            if r.norm() <= max_accel * dt2 + 1e-12 {
                ok += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        ok as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arc_path_geometry() {
        let p = Path::line(Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0)).then_arc(5.0, FRAC_PI_2);
        let (end, h) = p.at(10.0 + 5.0 * FRAC_PI_2);
        assert!(end.dist(Vec2::new(15.0, 5.0)) < 1e-12);
        assert!((h - FRAC_PI_2).abs() < 1e-12);
        let (beyond, _) = p.at(p.length() + 2.0);
        assert!(beyond.dist(Vec2::new(15.0, 7.0)) < 1e-12);
        let right = Path::line(Vec2::ZERO, Vec2::new(1.0, 0.0)).then_arc(2.0, -FRAC_PI_2);
        assert!(right.end_state().0.dist(Vec2::new(3.0, -2.0)) < 1e-12);
    }

    #[test]
    fn intersection_turns_end_on_exit_lanes() {
        let layout = MapLayout::new(MapTemplate::Intersection);
        let h = 0.5 * LANE_WIDTH;
        let (left_end, _) = layout.intersection_route(0, 0).end_state();
        assert!((left_end.x - h).abs() < 1e-9 && left_end.y > 100.0);
        let (right_end, _) = layout.intersection_route(0, 1).end_state();
        assert!((right_end.x + h).abs() < 1e-9 && right_end.y < -100.0);
        for route in 0..3 {
            let path = layout.intersection_route(0, route);
            let mut s = 0.0;
            while s < path.length() {
                assert!(layout.on_road(path.at(s).0), "route {route} leaves the road at s={s}");
                s += 0.5;
            }
        }
    }

    #[test]
    fn lane_follow_stays_on_center() {
        let layout = MapLayout::new(MapTemplate::StraightRoad);
        let script = Script {
            kind: AgentKind::Vehicle,
            path: layout.lanes[1].clone(),
            s0: 10.0,
            lateral: LateralPlan::none(0.0),
            speed: SpeedPlan { cruise: 12.0, ..SpeedPlan::constant(6.0) },
        };
        let a = simulate(1, &script, 300, 0.1);
        assert!(a.positions.iter().all(|p| (p.y - LANE_WIDTH).abs() < 0.1));
        assert!(a.positions.windows(2).all(|w| w[1].x >= w[0].x));
    }

    #[test]
    fn empty_world_steps() {
        let mut w = World::new(WorldConfig::default(), MapTemplate::StraightRoad);
        let t = w.tick;
        w.step(None);
        assert_eq!(w.tick, t + 1);
        assert!(w.events.is_empty());
        assert!(w.observe().is_none());
    }

    #[test]
    fn generation_is_deterministic_and_complete() {
        let cfg = WorldConfig { seed: 5, ..WorldConfig::default() };
        for i in 0..40 {
            let a = generate_scene(&cfg, i).unwrap();
            assert_eq!(a, generate_scene(&cfg, i).unwrap());
            assert_eq!(a.history_len(), cfg.history);
            assert_eq!(a.horizon(), Some(cfg.horizon));
            assert!(a.target_history.iter().all(|s| s.valid));
            a.validate().unwrap();
            assert!(a.nearby.len() <= cfg.max_nearby);
            assert_eq!(a.nearby.len(), a.nearby_future.len());
        }
    }

    #[test]
    fn split_and_residuals() {
        let cfg = WorldConfig::default();
        let ds = generate_dataset(&cfg, 1000, 0.9, 11, ExecMode::default()).unwrap();
        assert_eq!((ds.train.len(), ds.val.len()), (900, 100));
        let train: std::collections::HashSet<u64> = ds.train.iter().map(|s| s.scene_id).collect();
        assert!(ds.val.iter().all(|s| !train.contains(&s.scene_id)));
        let compliance = residual_compliance(&ds.train, cfg.max_accel);
        assert!(compliance >= 0.99, "compliance {compliance}");
    }

    #[test]
    fn quintic_blend_endpoints() {
        assert_eq!(quintic(0.0), (0.0, 0.0));
        assert_eq!(quintic(1.0), (1.0, 0.0));
        assert!((quintic(0.5).0 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn double_park_world_has_blocker_ahead() {
        let w = World::double_park(WorldConfig::double_park(), 3, 200);
        let ego = w.ego.as_ref().unwrap();
        assert_eq!(ego.positions.len(), WARMUP + w.config.history);
        let x = ego.positions.last().unwrap().x;
        assert!(w.agents.iter().any(|a| (a.positions[0].y + 0.2).abs() < 1e-12 && a.positions[0].x > x));
        let scene = w.observe().unwrap();
        assert_eq!(scene.history_len(), w.config.history);
        assert!(!scene.nearby.is_empty());
    }
}
