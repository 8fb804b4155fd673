//! Trajectory decoders.
//!
//! The autoregressive decoder embeds positions (`linear → LayerNorm → ReLU`,
//! plus a learned step table), runs causal self-attention and
//! cross-attention to the scene embedding in every block, and emits logits
//! over the action vocabulary. Row `t` of the teacher-forced output
//! conditions on `s_0..=s_t` and predicts the action producing `s_{t+1}`.
//!
//! [`Model::forward_step`] and [`Model::forward_step_batch`] are the cached
//! incremental path used at inference; they share numeric kernels with the
//! taped path.

use ndarray::{s, Axis};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{check_finite, maybe_dropout, SceneEmbedding};
use crate::geometry::Vec2;
use crate::model::{AttnP, DecLayerP, DecoderVariant, HeadP, LinearP, Model, ModelError, NormP};
use crate::nn::{gelu, layer_norm, linear, masked_softmax_rows, AttnMask, Mat, Tape, Var};
use crate::scene::POSITION_SCALE;

/// One-shot decoder output in agent-frame meters.
#[derive(Clone, Debug, PartialEq)]
pub struct OneShotOutput {
    /// `K` trajectories of `T` positions each.
    pub trajectories: Vec<Vec<Vec2>>,
    pub logits: Vec<f64>,
}

/// Cross-attention keys and values for one scene, per decoder layer.
#[derive(Clone, Debug)]
pub struct CrossCache {
    pub(crate) kv: Vec<(Mat, Mat)>,
    pub(crate) valid: Vec<bool>,
}

/// Self-attention cache of one rollout.
#[derive(Clone, Debug, Default)]
pub struct DecodeState {
    keys: Vec<Mat>,
    values: Vec<Mat>,
    positions: Vec<Vec2>,
}

impl DecodeState {
    pub fn new(num_layers: usize, d: usize) -> Self {
        Self { keys: vec![Mat::zeros((0, d)); num_layers], values: vec![Mat::zeros((0, d)); num_layers], positions: Vec::new() }
    }

    /// Number of steps already consumed.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec2] {
        &self.positions
    }
}

fn position_matrix(positions: &[Vec2]) -> Mat {
    Mat::from_shape_fn((positions.len(), 2), |(i, c)| {
        let p = positions[i];
        (if c == 0 { p.x } else { p.y }) / POSITION_SCALE
    })
}

/// Multi-head attention of each row of `q` against `k`, `v`.
fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize, allowed: impl Fn(usize, usize) -> bool) -> Mat {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Mat::zeros((q.nrows(), d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t());
        sc.mapv_inplace(|x| x * scale);
        masked_softmax_rows(&mut sc, &allowed);
        out.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
    }
    out
}

impl Model {
    fn params_of(&self, p: &LinearP) -> (&Mat, &Mat) {
        (self.params.get(p.w), self.params.get(p.b))
    }

    fn lin(&self, x: &Mat, p: &LinearP) -> Mat {
        let (w, b) = self.params_of(p);
        linear(x, w, Some(b))
    }

    fn norm(&self, x: &Mat, p: &NormP) -> Mat {
        layer_norm(x, self.params.get(p.g), self.params.get(p.b)).0
    }

    fn ff(&self, x: &Mat, layer: &DecLayerP) -> Mat {
        let h = self.norm(x, &layer.ln_ff);
        let h = self.lin(&h, &layer.ff.up).mapv(gelu);
        self.lin(&h, &layer.ff.down)
    }

    fn require(&self, variant: DecoderVariant) -> Result<(), ModelError> {
        if self.config.variant == variant {
            Ok(())
        } else {
            Err(ModelError::WrongVariant(match variant {
                DecoderVariant::Autoregressive => "autoregressive",
                DecoderVariant::OneShot => "one-shot",
            }))
        }
    }

    fn check_embedding(&self, emb: &SceneEmbedding) -> Result<(), ModelError> {
        if emb.tokens.ncols() != self.config.encoder.d_model || emb.valid.len() != emb.tokens.nrows() {
            return Err(ModelError::Shape(format!(
                "scene embedding {:?} with {} validity flags, encoder width {}",
                emb.tokens.dim(),
                emb.valid.len(),
                self.config.encoder.d_model
            )));
        }
        Ok(())
    }

    fn check_len(&self, len: usize) -> Result<(), ModelError> {
        if len == 0 || len > self.config.decoder.horizon {
            return Err(ModelError::Shape(format!("{len} decoder steps, horizon {}", self.config.decoder.horizon)));
        }
        Ok(())
    }

    fn ar_head(&self) -> (&LinearP, &NormP, crate::nn::ParamId, &LinearP) {
        match &self.dec.head {
            HeadP::Autoregressive { embed, embed_norm, pos_table, logits } => (embed, embed_norm, *pos_table, logits),
            HeadP::OneShot { .. } => unreachable!("checked by require()"),
        }
    }

    fn embed_positions_tape(&self, tape: &mut Tape, positions: &[Vec2]) -> Var {
        let (embed, norm, table, _) = self.ar_head();
        let x = tape.input(position_matrix(positions));
        let h = tape.linear(x, embed.w, Some(embed.b));
        let h = tape.layer_norm(h, norm.g, norm.b);
        let h = tape.relu(h);
        let table = tape.param(table);
        let pe = tape.row_slice(table, 0, positions.len());
        tape.add(h, pe)
    }

    /// Decoder input embedding for steps `0..positions.len()`.
    pub fn embed_positions(&self, positions: &[Vec2]) -> Result<Mat, ModelError> {
        self.require(DecoderVariant::Autoregressive)?;
        self.check_len(positions.len())?;
        let mut tape = Tape::new(&self.params);
        let v = self.embed_positions_tape(&mut tape, positions);
        Ok(tape.value(v).clone())
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder_layer_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        ctx: Var,
        layer: &DecLayerP,
        self_mask: &AttnMask,
        cross_mask: &AttnMask,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Var {
        let cfg = &self.config.decoder;
        let attn = |tape: &mut Tape, q_in: Var, kv_in: Var, p: &AttnP, mask: &AttnMask| {
            let q = tape.linear(q_in, p.q.w, Some(p.q.b));
            let k = tape.linear(kv_in, p.k.w, Some(p.k.b));
            let v = tape.linear(kv_in, p.v.w, Some(p.v.b));
            let a = tape.attention(q, k, v, cfg.num_heads, mask);
            tape.linear(a, p.o.w, Some(p.o.b))
        };
        let h = tape.layer_norm(x, layer.ln_self.g, layer.ln_self.b);
        let a = attn(tape, h, h, &layer.self_attn, self_mask);
        let a = maybe_dropout(tape, a, cfg.dropout, rng);
        let x = tape.add(x, a);
        let h = tape.layer_norm(x, layer.ln_cross.g, layer.ln_cross.b);
        let a = attn(tape, h, ctx, &layer.cross, cross_mask);
        let a = maybe_dropout(tape, a, cfg.dropout, rng);
        let x = tape.add(x, a);
        let h = tape.layer_norm(x, layer.ln_ff.g, layer.ln_ff.b);
        let h = tape.linear(h, layer.ff.up.w, Some(layer.ff.up.b));
        let h = tape.gelu(h);
        let h = tape.linear(h, layer.ff.down.w, Some(layer.ff.down.b));
        let h = maybe_dropout(tape, h, cfg.dropout, rng);
        tape.add(x, h)
    }

    /// Records the teacher-forced decoder on `tape`; returns `[len × |A|]` logits.
    pub(crate) fn decode_teacher_tape(
        &self,
        tape: &mut Tape,
        ctx: Var,
        ctx_valid: &[bool],
        inputs: &[Vec2],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        self.require(DecoderVariant::Autoregressive)?;
        self.check_len(inputs.len())?;
        let self_mask = AttnMask { key_valid: None, causal: true };
        let cross_mask = AttnMask { key_valid: Some(ctx_valid.to_vec()), causal: false };
        let mut x = self.embed_positions_tape(tape, inputs);
        check_finite(tape, x, "decoder embedding", 0)?;
        for (l, layer) in self.dec.layers.iter().enumerate() {
            x = self.decoder_layer_tape(tape, x, ctx, layer, &self_mask, &cross_mask, &mut rng);
            check_finite(tape, x, "decoder", l)?;
        }
        let h = tape.layer_norm(x, self.dec.final_norm.g, self.dec.final_norm.b);
        let (_, _, _, logits) = self.ar_head();
        let out = tape.linear(h, logits.w, Some(logits.b));
        check_finite(tape, out, "decoder", self.dec.layers.len())?;
        Ok(out)
    }

    /// Logits for every step given the full input prefix `s_0..s_{len-1}`.
    pub fn forward_teacher_forced(&self, emb: &SceneEmbedding, inputs: &[Vec2]) -> Result<Mat, ModelError> {
        self.check_embedding(emb)?;
        let mut tape = Tape::new(&self.params);
        let ctx = tape.input(emb.tokens.clone());
        let v = self.decode_teacher_tape(&mut tape, ctx, &emb.valid, inputs, None)?;
        Ok(tape.value(v).clone())
    }

    /// Precomputes cross-attention keys and values for incremental decoding.
    pub fn cross_cache(&self, emb: &SceneEmbedding) -> Result<CrossCache, ModelError> {
        self.check_embedding(emb)?;
        let kv =
            self.dec.layers.iter().map(|layer| (self.lin(&emb.tokens, &layer.cross.k), self.lin(&emb.tokens, &layer.cross.v))).collect();
        Ok(CrossCache { kv, valid: emb.valid.clone() })
    }

    pub fn new_decode_state(&self) -> DecodeState {
        DecodeState::new(self.dec.layers.len(), self.config.decoder.d_model)
    }

    /// Advances one rollout: `prefix` is `s_0..=s_t` and `state` must hold
    /// exactly the `t` earlier steps. Returns the logits row for step `t`.
    pub fn forward_step(&self, cross: &CrossCache, state: &mut DecodeState, prefix: &[Vec2]) -> Result<Vec<f64>, ModelError> {
        let out = self.forward_step_batch(cross, std::slice::from_mut(state), &[prefix])?;
        Ok(out.row(0).to_vec())
    }

    /// Advances `B` rollouts of the same scene together; row `b` of the
    /// result is the logits of rollout `b`.
    pub fn forward_step_batch(&self, cross: &CrossCache, states: &mut [DecodeState], prefixes: &[&[Vec2]]) -> Result<Mat, ModelError> {
        self.require(DecoderVariant::Autoregressive)?;
        if states.len() != prefixes.len() || states.is_empty() {
            return Err(ModelError::Shape(format!("{} states for {} prefixes", states.len(), prefixes.len())));
        }
        if cross.kv.len() != self.dec.layers.len() {
            return Err(ModelError::CacheMismatch("cross cache built for a different model".into()));
        }
        for (b, (st, pre)) in states.iter().zip(prefixes).enumerate() {
            if pre.len() != st.len() + 1 || pre[..st.len()] != st.positions[..] {
                return Err(ModelError::CacheMismatch(format!(
                    "rollout {b}: cache holds {} steps, prefix has {} positions",
                    st.len(),
                    pre.len()
                )));
            }
            if st.keys.len() != self.dec.layers.len() {
                return Err(ModelError::CacheMismatch(format!("rollout {b}: cache has wrong depth")));
            }
            self.check_len(pre.len())?;
        }
        let heads = self.config.decoder.num_heads;
        let (embed, norm, table, logits) = self.ar_head();
        let newest: Vec<Vec2> = prefixes.iter().map(|p| *p.last().expect("non-empty")).collect();
        let mut x = self.norm(&self.lin(&position_matrix(&newest), embed), norm).mapv(|v| v.max(0.0));
        let table = self.params.get(table);
        for (b, st) in states.iter().enumerate() {
            let mut row = x.row_mut(b);
            row += &table.row(st.len());
        }
        for (l, layer) in self.dec.layers.iter().enumerate() {
            let h = self.norm(&x, &layer.ln_self);
            let q = self.lin(&h, &layer.self_attn.q);
            let k = self.lin(&h, &layer.self_attn.k);
            let v = self.lin(&h, &layer.self_attn.v);
            let mut att = Mat::zeros(x.raw_dim());
            for (b, st) in states.iter_mut().enumerate() {
                st.keys[l].push_row(k.row(b)).expect("row width");
                st.values[l].push_row(v.row(b)).expect("row width");
                let qb = q.slice(s![b..b + 1, ..]).to_owned();
                att.row_mut(b).assign(&attend(&qb, &st.keys[l], &st.values[l], heads, |_, _| true).row(0));
            }
            x += &self.lin(&att, &layer.self_attn.o);

            let h = self.norm(&x, &layer.ln_cross);
            let q = self.lin(&h, &layer.cross.q);
            let (ck, cv) = &cross.kv[l];
            let att = attend(&q, ck, cv, heads, |_, j| cross.valid[j]);
            x += &self.lin(&att, &layer.cross.o);

            x += &self.ff(&x, layer);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite { module: "decoder", layer: l });
            }
        }
        for (st, p) in states.iter_mut().zip(&newest) {
            st.positions.push(*p);
        }
        let h = self.norm(&x, &self.dec.final_norm);
        let out = self.lin(&h, logits);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { module: "decoder", layer: self.dec.layers.len() });
        }
        Ok(out)
    }

    /// Records the one-shot decoder; returns (`[K × 2T]` trajectories in
    /// scaled units, `[K × 1]` mode scores).
    pub(crate) fn one_shot_tape(
        &self,
        tape: &mut Tape,
        ctx: Var,
        ctx_valid: &[bool],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var), ModelError> {
        self.require(DecoderVariant::OneShot)?;
        let HeadP::OneShot { queries, traj, score } = &self.dec.head else { unreachable!() };
        let self_mask = AttnMask::default();
        let cross_mask = AttnMask { key_valid: Some(ctx_valid.to_vec()), causal: false };
        let mut x = tape.param(*queries);
        for (l, layer) in self.dec.layers.iter().enumerate() {
            x = self.decoder_layer_tape(tape, x, ctx, layer, &self_mask, &cross_mask, &mut rng);
            check_finite(tape, x, "decoder", l)?;
        }
        let h = tape.layer_norm(x, self.dec.final_norm.g, self.dec.final_norm.b);
        let t = tape.linear(h, traj.w, Some(traj.b));
        let sc = tape.linear(h, score.w, Some(score.b));
        Ok((t, sc))
    }

    /// All `K` trajectories at once plus per-mode logits.
    pub fn one_shot_forward(&self, emb: &SceneEmbedding) -> Result<OneShotOutput, ModelError> {
        self.check_embedding(emb)?;
        let mut tape = Tape::new(&self.params);
        let ctx = tape.input(emb.tokens.clone());
        let (t, sc) = self.one_shot_tape(&mut tape, ctx, &emb.valid, None)?;
        Ok(OneShotOutput { trajectories: decode_one_shot_rows(tape.value(t)), logits: tape.value(sc).column(0).to_vec() })
    }
}

/// Rows of `[K × 2T]` scaled outputs to `K` trajectories in meters.
pub(crate) fn decode_one_shot_rows(m: &Mat) -> Vec<Vec<Vec2>> {
    m.axis_iter(Axis(0))
        .map(|row| {
            row.as_slice().expect("standard layout").chunks(2).map(|c| Vec2::new(c[0] * POSITION_SCALE, c[1] * POSITION_SCALE)).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ActionVocabulary;
    use crate::model::ModelConfig;
    use crate::scene::{normalize_scene, tests::random_scene, vectorize};
    use rand::{Rng, SeedableRng};

    fn setup(seed: u64, horizon: usize) -> (Model, SceneEmbedding) {
        let cfg = ModelConfig::symmetric(16, 2, 4, 169, horizon);
        let m = Model::new(cfg, ActionVocabulary::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let scene = random_scene(&mut rng, 4, 2, 2);
        let emb = m.encode(&vectorize(&normalize_scene(&scene).unwrap())).unwrap();
        (m, emb)
    }

    fn random_path(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec2> {
        let mut p = Vec2::ZERO;
        (0..n)
            .map(|i| {
                if i > 0 {
                    p += Vec2::new(rng.random_range(0.0..1.5), rng.random_range(-0.2..0.2));
                }
                p
            })
            .collect()
    }

    #[test]
    fn embedding_shape_and_step_table() {
        let (m, _) = setup(1, 10);
        let e = m.embed_positions(&[Vec2::new(1.0, 2.0), Vec2::new(1.0, 2.0)]).unwrap();
        assert_eq!(e.dim(), (2, 16));
        let table = m.params.get(m.params.find("dec.pos_table").unwrap());
        for c in 0..16 {
            let diff = e[[1, c]] - e[[0, c]];
            assert!((diff - (table[[1, c]] - table[[0, c]])).abs() < 1e-15);
        }
    }

    #[test]
    fn causal_rows_ignore_future() {
        let (m, emb) = setup(2, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = random_path(&mut rng, 12);
        let base = m.forward_teacher_forced(&emb, &inputs).unwrap();
        for k in 1..12 {
            let mut pert = inputs.clone();
            pert[k] += Vec2::new(3.0, -2.0);
            let out = m.forward_teacher_forced(&emb, &pert).unwrap();
            for r in 0..k {
                for c in 0..169 {
                    assert!((out[[r, c]] - base[[r, c]]).abs() <= 1e-9);
                }
            }
            assert!((0..169).any(|c| (out[[k, c]] - base[[k, c]]).abs() > 1e-9));
        }
    }

    #[test]
    fn cached_steps_match_teacher_forcing() {
        let (m, emb) = setup(3, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = random_path(&mut rng, 20);
        let tf = m.forward_teacher_forced(&emb, &inputs).unwrap();
        let cross = m.cross_cache(&emb).unwrap();
        let mut st = m.new_decode_state();
        for t in 0..20 {
            let row = m.forward_step(&cross, &mut st, &inputs[..=t]).unwrap();
            for c in 0..169 {
                let (a, b) = (row[c], tf[[t, c]]);
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "step {t}");
            }
        }
    }

    #[test]
    fn cache_mismatch_is_rejected() {
        let (m, emb) = setup(4, 8);
        let cross = m.cross_cache(&emb).unwrap();
        let mut st = m.new_decode_state();
        let p = [Vec2::ZERO, Vec2::new(1.0, 0.0), Vec2::new(2.0, 0.0)];
        m.forward_step(&cross, &mut st, &p[..1]).unwrap();
        assert!(matches!(m.forward_step(&cross, &mut st, &p[..3]), Err(ModelError::CacheMismatch(_))));
        let other = [Vec2::new(5.0, 0.0), Vec2::new(1.0, 0.0)];
        assert!(matches!(m.forward_step(&cross, &mut st, &other), Err(ModelError::CacheMismatch(_))));
        m.forward_step(&cross, &mut st, &p[..2]).unwrap();
    }

    #[test]
    fn batch_rows_match_single_calls() {
        let (m, emb) = setup(5, 6);
        let cross = m.cross_cache(&emb).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let paths: Vec<Vec<Vec2>> = (0..4).map(|_| random_path(&mut rng, 6)).collect();
        let mut batch: Vec<DecodeState> = (0..4).map(|_| m.new_decode_state()).collect();
        let mut singles: Vec<DecodeState> = (0..4).map(|_| m.new_decode_state()).collect();
        for t in 0..6 {
            let prefixes: Vec<&[Vec2]> = paths.iter().map(|p| &p[..=t]).collect();
            let out = m.forward_step_batch(&cross, &mut batch, &prefixes).unwrap();
            for b in 0..4 {
                let row = m.forward_step(&cross, &mut singles[b], prefixes[b]).unwrap();
                for c in 0..169 {
                    assert!((out[[b, c]] - row[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn one_shot_shapes_and_equivariance() {
        let mut cfg = ModelConfig::symmetric(16, 2, 4, 169, 10).with_variant(DecoderVariant::OneShot);
        cfg.decoder.one_shot_num_queries = 4;
        let mut m = Model::new(cfg, ActionVocabulary::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scene = random_scene(&mut rng, 4, 2, 2);
        let emb = m.encode(&vectorize(&normalize_scene(&scene).unwrap())).unwrap();
        let base = m.one_shot_forward(&emb).unwrap();
        assert_eq!(base.trajectories.len(), 4);
        assert!(base.trajectories.iter().all(|t| t.len() == 10));
        assert_eq!(base.logits.len(), 4);
        let q = m.params.find("dec.queries").unwrap();
        let perm = [2, 0, 3, 1];
        let permuted = m.params.get(q).select(Axis(0), &perm);
        *m.params.get_mut(q) = permuted;
        let out = m.one_shot_forward(&emb).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert!((out.logits[i] - base.logits[src]).abs() < 1e-12);
            for t in 0..10 {
                assert!(out.trajectories[i][t].dist(base.trajectories[src][t]) < 1e-12);
            }
        }
        assert!(matches!(m.forward_teacher_forced(&emb, &[Vec2::ZERO]), Err(ModelError::WrongVariant(_))));
    }
}
