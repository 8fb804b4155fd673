//! Discrete Verlet action vocabulary.
//!
//! An action is the second difference of positions,
//! `a_t = s_{t+1} - 2 s_t + s_{t-1}`, so decoding is
//! `s_{t+1} = s_t + (s_t - s_{t-1}) + a_t` and the zero action continues at
//! constant velocity. The vocabulary is a square grid of such residuals.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec2;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("bins_per_axis must be odd and >= 1, got {0}")]
    EvenBins(usize),
    #[error("grid half-width must be positive and finite, got {0}")]
    BadHalfWidth(f64),
    #[error("expected {expected} positions, got {got}")]
    Length { expected: usize, got: usize },
    #[error("token {token} outside vocabulary of {size}")]
    BadToken { token: usize, size: usize },
}

/// Square grid of Verlet residuals, row-major over `(iy, ix)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionVocabulary {
    bins_per_axis: usize,
    /// Largest residual per axis, in meters per tick².
    half_width: f64,
}

impl Default for ActionVocabulary {
    /// 13 x 13 grid covering ±3 m/s² at a 0.1 s tick.
    fn default() -> Self {
        Self::from_accel(13, 3.0, crate::scene::DEFAULT_TICK).expect("valid default")
    }
}

impl ActionVocabulary {
    pub fn new(bins_per_axis: usize, half_width: f64) -> Result<Self, CodecError> {
        if bins_per_axis == 0 || bins_per_axis.is_multiple_of(2) {
            return Err(CodecError::EvenBins(bins_per_axis));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(CodecError::BadHalfWidth(half_width));
        }
        Ok(Self { bins_per_axis, half_width })
    }

    /// Grid sized so that its half-width equals `max_accel` (m/s²) at `tick` seconds.
    pub fn from_accel(bins_per_axis: usize, max_accel: f64, tick: f64) -> Result<Self, CodecError> {
        Self::new(bins_per_axis, max_accel * tick * tick)
    }

    pub fn bins_per_axis(&self) -> usize {
        self.bins_per_axis
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn size(&self) -> usize {
        self.bins_per_axis * self.bins_per_axis
    }

    /// Spacing between adjacent grid values on one axis.
    pub fn cell(&self) -> f64 {
        if self.bins_per_axis == 1 {
            2.0 * self.half_width
        } else {
            2.0 * self.half_width / (self.bins_per_axis - 1) as f64
        }
    }

    /// Largest snapping error for an in-range residual.
    pub fn half_cell_diagonal(&self) -> f64 {
        0.5 * self.cell() * std::f64::consts::SQRT_2
    }

    fn axis_value(&self, i: usize) -> f64 {
        let c = (self.bins_per_axis / 2) as f64;
        (i as f64 - c) * self.cell()
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.bins_per_axis + ix
    }

    pub fn coords(&self, token: usize) -> (usize, usize) {
        (token % self.bins_per_axis, token / self.bins_per_axis)
    }

    pub fn zero_action(&self) -> usize {
        let c = self.bins_per_axis / 2;
        self.index(c, c)
    }

    pub fn action(&self, token: usize) -> Vec2 {
        let (ix, iy) = self.coords(token);
        Vec2::new(self.axis_value(ix), self.axis_value(iy))
    }

    pub fn grid(&self) -> Vec<Vec2> {
        (0..self.size()).map(|t| self.action(t)).collect()
    }

    fn snap_axis(&self, v: f64) -> (usize, bool) {
        let c = (self.bins_per_axis / 2) as f64;
        let max = (self.bins_per_axis - 1) as f64;
        let raw = v / self.cell() + c;
        // Ties at exact half-cells go to the lower index.
        let idx = (raw - 0.5).ceil();
        let saturated = raw < -0.5 || raw > max + 0.5;
        (idx.clamp(0.0, max) as usize, saturated)
    }

    /// Nearest grid action (Euclidean; ties to the lowest index), plus whether
    /// the residual lay outside the grid and was clamped.
    pub fn snap(&self, residual: Vec2) -> (usize, bool) {
        // On a separable grid the Euclidean nearest point is the per-axis nearest point.
        let (ix, sx) = self.snap_axis(residual.x);
        let (iy, sy) = self.snap_axis(residual.y);
        (self.index(ix, iy), sx || sy)
    }
}

/// Which prefix the residual at step `t` is measured against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualPrefix {
    /// Against the positions reconstructed from the tokens chosen so far.
    /// Snapping errors do not accumulate.
    #[default]
    Reconstructed,
    /// Against the raw positions. Per-step targets are independent, but the
    /// decoded trajectory drifts quadratically.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    /// Steps whose residual fell outside the grid and was clamped.
    pub saturated: Vec<usize>,
}

/// Quantizes `positions = [s_{-1}, s_0, s_1, ..., s_T]` into `T` action tokens.
pub fn positions_to_actions(positions: &[Vec2], vocab: &ActionVocabulary, prefix: ResidualPrefix) -> Result<TokenSequence, CodecError> {
    if positions.len() < 2 {
        return Err(CodecError::Length { expected: 2, got: positions.len() });
    }
    let steps = positions.len() - 2;
    let mut tokens = Vec::with_capacity(steps);
    let mut saturated = Vec::new();
    let (mut prev, mut cur) = (positions[0], positions[1]);
    for t in 0..steps {
        let next = positions[t + 2];
        let residual = next - cur * 2.0 + prev;
        let (tok, sat) = vocab.snap(residual);
        if sat {
            saturated.push(t);
        }
        tokens.push(tok);
        match prefix {
            ResidualPrefix::Reconstructed => {
                let rebuilt = cur * 2.0 - prev + vocab.action(tok);
                prev = cur;
                cur = rebuilt;
            }
            ResidualPrefix::GroundTruth => {
                prev = cur;
                cur = next;
            }
        }
    }
    Ok(TokenSequence { tokens, saturated })
}

/// Integrates tokens from the seeds `(s_{-1}, s_0)`, returning `s_1..s_T`.
pub fn actions_to_positions(tokens: &[usize], s_minus1: Vec2, s_0: Vec2, vocab: &ActionVocabulary) -> Result<Vec<Vec2>, CodecError> {
    let mut out = Vec::with_capacity(tokens.len());
    let (mut prev, mut cur) = (s_minus1, s_0);
    for &tok in tokens {
        if tok >= vocab.size() {
            return Err(CodecError::BadToken { token: tok, size: vocab.size() });
        }
        let next = cur + (cur - prev) + vocab.action(tok);
        out.push(next);
        prev = cur;
        cur = next;
    }
    Ok(out)
}

/// Worst-case displacement at step `t` (1-based) for a fully in-grid trajectory.
pub fn quantization_bound(vocab: &ActionVocabulary, prefix: ResidualPrefix, t: usize) -> f64 {
    let e = vocab.half_cell_diagonal();
    match prefix {
        ResidualPrefix::Reconstructed => e,
        // e_t = Σ_{k<=t} (t - k + 1) δ_k
        ResidualPrefix::GroundTruth => e * (t * (t + 1)) as f64 / 2.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_invariants() {
        let v = ActionVocabulary::default();
        assert_eq!(v.size(), 169);
        let g = v.grid();
        assert_eq!(g[v.zero_action()], Vec2::ZERO);
        for t in 0..v.size() {
            let (ix, iy) = v.coords(t);
            assert_eq!(v.index(ix, iy), t);
            // symmetry: mirrored index holds the negated action
            let m = v.index(v.bins_per_axis() - 1 - ix, v.bins_per_axis() - 1 - iy);
            assert!((g[m] + g[t]).norm() < 1e-15);
        }
        assert!((g[v.size() - 1].x - v.half_width()).abs() < 1e-15);
        assert!((v.half_width() - 0.03).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_vocab() {
        assert_eq!(ActionVocabulary::new(4, 1.0), Err(CodecError::EvenBins(4)));
        assert_eq!(ActionVocabulary::new(3, 0.0), Err(CodecError::BadHalfWidth(0.0)));
    }

    #[test]
    fn constant_velocity_is_zero_action() {
        let v = ActionVocabulary::default();
        let pos: Vec<Vec2> = (-1..=20).map(|k| Vec2::new(0.8 * k as f64, -0.3 * k as f64)).collect();
        let toks = positions_to_actions(&pos, &v, ResidualPrefix::Reconstructed).unwrap();
        assert!(toks.tokens.iter().all(|&t| t == v.zero_action()));
        let still = vec![Vec2::new(4.0, 2.0); 12];
        let toks = positions_to_actions(&still, &v, ResidualPrefix::GroundTruth).unwrap();
        assert!(toks.tokens.iter().all(|&t| t == v.zero_action()));
        assert!(toks.saturated.is_empty());
    }

    #[test]
    fn zero_tokens_extrapolate_linearly() {
        let v = ActionVocabulary::default();
        let out = actions_to_positions(&[v.zero_action(); 3], Vec2::ZERO, Vec2::new(1.0, 0.0), &v).unwrap();
        assert_eq!(out, vec![Vec2::new(2.0, 0.0), Vec2::new(3.0, 0.0), Vec2::new(4.0, 0.0)]);
    }

    #[test]
    fn single_kick_from_rest() {
        // 3 bins with cell 0.1: actions -0.1, 0, 0.1 per axis.
        let v = ActionVocabulary::new(3, 0.1).unwrap();
        let kick = v.index(2, 1);
        assert_eq!(v.action(kick), Vec2::new(0.1, 0.0));
        let out = actions_to_positions(&[kick, v.zero_action()], Vec2::ZERO, Vec2::ZERO, &v).unwrap();
        assert!(out[0].dist(Vec2::new(0.1, 0.0)) < 1e-15);
        assert!(out[1].dist(Vec2::new(0.2, 0.0)) < 1e-15);
    }

    #[test]
    fn saturation_clamps_and_flags() {
        let v = ActionVocabulary::new(3, 0.1).unwrap();
        let pos = vec![Vec2::ZERO, Vec2::ZERO, Vec2::new(5.0, -5.0)];
        let toks = positions_to_actions(&pos, &v, ResidualPrefix::Reconstructed).unwrap();
        assert_eq!(toks.tokens, vec![v.index(2, 0)]);
        assert_eq!(toks.saturated, vec![0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let v = ActionVocabulary::new(3, 0.1).unwrap();
        // exactly halfway between 0 and 0.1 on x, and between -0.1 and 0 on y
        let (tok, _) = v.snap(Vec2::new(0.05, -0.05));
        assert_eq!(v.coords(tok), (1, 0));
    }

    #[test]
    fn bad_token_rejected() {
        let v = ActionVocabulary::new(3, 0.1).unwrap();
        assert_eq!(actions_to_positions(&[9], Vec2::ZERO, Vec2::ZERO, &v), Err(CodecError::BadToken { token: 9, size: 9 }));
    }

    proptest::proptest! {
        #[test]
        fn decode_then_encode_is_identity(
            tokens in proptest::collection::vec(0usize..169, 1..80),
            sx in -5.0f64..5.0, sy in -5.0f64..5.0, vx in -2.0f64..2.0, vy in -2.0f64..2.0,
        ) {
            let v = ActionVocabulary::default();
            let s_m1 = Vec2::new(sx, sy);
            let s0 = s_m1 + Vec2::new(vx, vy);
            let pos = actions_to_positions(&tokens, s_m1, s0, &v).unwrap();
            let mut all = vec![s_m1, s0];
            all.extend(pos);
            for prefix in [ResidualPrefix::Reconstructed, ResidualPrefix::GroundTruth] {
                let back = positions_to_actions(&all, &v, prefix).unwrap();
                proptest::prop_assert_eq!(&back.tokens, &tokens);
            }
        }
    }
}
