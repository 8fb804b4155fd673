//! Scene encoder: point-net style per-vector embedding followed by masked
//! self-attention blocks. Rows carry no positional encoding, so the encoder
//! is permutation equivariant over vectors.

use rand_chacha::ChaCha8Rng;

use crate::model::{dropout_mask, EncLayerP, Model, ModelError};
use crate::nn::{AttnMask, Mat, Tape, Var};
use crate::scene::{VectorSet, FEATURE_DIM};

/// Encoder output `c`: one `d`-wide token per input vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneEmbedding {
    pub tokens: Mat,
    pub valid: Vec<bool>,
}

impl SceneEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn check_finite(tape: &Tape, v: Var, module: &'static str, layer: usize) -> Result<(), ModelError> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite { module, layer })
    }
}

/// Applies dropout when training with a nonzero rate.
pub(crate) fn maybe_dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(r) if p > 0.0 => {
            let (rows, cols) = tape.value(x).dim();
            let mask = dropout_mask(r, rows, cols, p);
            tape.mul_const(x, mask)
        }
        _ => x,
    }
}

impl Model {
    fn check_vectors(&self, vs: &VectorSet) -> Result<(), ModelError> {
        if vs.vectors.ncols() != FEATURE_DIM {
            return Err(ModelError::Config(format!("vector width {} does not match feature width {FEATURE_DIM}", vs.vectors.ncols())));
        }
        if vs.is_empty() || vs.group_ids.len() != vs.len() {
            return Err(ModelError::Shape(format!("{} vectors with {} group ids", vs.len(), vs.group_ids.len())));
        }
        Ok(())
    }

    /// Records the per-vector embedding on `tape`: a shared MLP, then each
    /// row is concatenated with the max-pool of its group.
    pub(crate) fn embed_vectors_tape(&self, tape: &mut Tape, vs: &VectorSet) -> Result<Var, ModelError> {
        self.check_vectors(vs)?;
        let valid = vs.validity();
        let p = &self.enc;
        let x = tape.input(vs.vectors.clone());
        let h = tape.linear(x, p.pn_in.w, Some(p.pn_in.b));
        let h = tape.layer_norm(h, p.pn_norm.g, p.pn_norm.b);
        let h = tape.relu(h);
        let h = tape.linear(h, p.pn_out.w, Some(p.pn_out.b));
        let pooled = tape.segment_max(h, &vs.group_ids, vs.num_groups, &valid);
        let pooled = tape.gather_rows(pooled, &vs.group_ids);
        let out = tape.concat_cols(h, pooled);
        check_finite(tape, out, "encoder embedding", 0)?;
        Ok(out)
    }

    pub fn embed_vectors(&self, vs: &VectorSet) -> Result<Mat, ModelError> {
        let mut tape = Tape::new(&self.params);
        let v = self.embed_vectors_tape(&mut tape, vs)?;
        Ok(tape.value(v).clone())
    }

    fn encoder_layer(&self, tape: &mut Tape, x: Var, layer: &EncLayerP, mask: &AttnMask, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
        let cfg = &self.config.encoder;
        let h = tape.layer_norm(x, layer.ln_attn.g, layer.ln_attn.b);
        let q = tape.linear(h, layer.attn.q.w, Some(layer.attn.q.b));
        let k = tape.linear(h, layer.attn.k.w, Some(layer.attn.k.b));
        let v = tape.linear(h, layer.attn.v.w, Some(layer.attn.v.b));
        let a = tape.attention(q, k, v, cfg.num_heads, mask);
        let a = tape.linear(a, layer.attn.o.w, Some(layer.attn.o.b));
        let a = maybe_dropout(tape, a, cfg.dropout, rng);
        let x = tape.add(x, a);
        let h = tape.layer_norm(x, layer.ln_ff.g, layer.ln_ff.b);
        let h = tape.linear(h, layer.ff.up.w, Some(layer.ff.up.b));
        let h = tape.gelu(h);
        let h = tape.linear(h, layer.ff.down.w, Some(layer.ff.down.b));
        let h = maybe_dropout(tape, h, cfg.dropout, rng);
        tape.add(x, h)
    }

    /// Records the full encoder on `tape`; returns the `[n × d]` tokens.
    pub(crate) fn encode_tape(&self, tape: &mut Tape, vs: &VectorSet, mut rng: Option<&mut ChaCha8Rng>) -> Result<Var, ModelError> {
        let mut x = self.embed_vectors_tape(tape, vs)?;
        let mask = AttnMask { key_valid: Some(vs.validity()), causal: false };
        for (l, layer) in self.enc.layers.iter().enumerate() {
            x = self.encoder_layer(tape, x, layer, &mask, &mut rng);
            check_finite(tape, x, "encoder", l)?;
        }
        let out = tape.layer_norm(x, self.enc.final_norm.g, self.enc.final_norm.b);
        check_finite(tape, out, "encoder", self.enc.layers.len())?;
        Ok(out)
    }

    pub fn encode(&self, vs: &VectorSet) -> Result<SceneEmbedding, ModelError> {
        let mut tape = Tape::new(&self.params);
        let v = self.encode_tape(&mut tape, vs, None)?;
        Ok(SceneEmbedding { tokens: tape.value(v).clone(), valid: vs.validity() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ActionVocabulary;
    use crate::model::ModelConfig;
    use crate::nn::{gelu, LN_EPS};
    use crate::scene::{normalize_scene, tests::random_scene, vectorize};
    use ndarray::{s, Array2};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    fn model(d: usize, layers: usize, heads: usize, seed: u64) -> Model {
        Model::new(ModelConfig::symmetric(d, layers, heads, 169, 60), ActionVocabulary::default(), seed).unwrap()
    }

    fn scene_vectors(seed: u64) -> VectorSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(&mut rng, 5, 3, 2);
        vectorize(&normalize_scene(&scene).unwrap())
    }

    fn permuted(vs: &VectorSet, perm: &[usize]) -> VectorSet {
        VectorSet {
            vectors: vs.vectors.select(ndarray::Axis(0), perm),
            group_ids: perm.iter().map(|&i| vs.group_ids[i]).collect(),
            num_groups: vs.num_groups,
        }
    }

    #[test]
    fn single_vector_shape() {
        let m = model(16, 1, 2, 0);
        let mut v = Array2::zeros((1, FEATURE_DIM));
        v[[0, FEATURE_DIM - 1]] = 1.0;
        let vs = VectorSet { vectors: v, group_ids: vec![0], num_groups: 1 };
        assert_eq!(m.embed_vectors(&vs).unwrap().dim(), (1, 16));
        assert_eq!(m.encode(&vs).unwrap().tokens.dim(), (1, 16));
    }

    #[test]
    fn wrong_width_is_a_config_error() {
        let m = model(16, 1, 2, 0);
        let vs = VectorSet { vectors: Array2::zeros((2, 5)), group_ids: vec![0, 0], num_groups: 1 };
        assert!(matches!(m.embed_vectors(&vs), Err(ModelError::Config(_))));
    }

    #[test]
    fn duplicate_vector_leaves_pool_unchanged() {
        let m = model(16, 1, 2, 3);
        let vs = scene_vectors(1);
        let base = m.embed_vectors(&vs).unwrap();
        let mut rows: Vec<usize> = (0..vs.len()).collect();
        rows.push(2);
        let dup = permuted(&vs, &rows);
        let out = m.embed_vectors(&dup).unwrap();
        let half = 8;
        for r in 0..vs.len() {
            for c in half..16 {
                assert_eq!(out[[r, c]], base[[r, c]]);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let m = model(16, 2, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..5 {
            let vs = scene_vectors(100 + seed);
            let base = m.encode(&vs).unwrap();
            let mut perm: Vec<usize> = (0..vs.len()).collect();
            perm.shuffle(&mut rng);
            let out = m.encode(&permuted(&vs, &perm)).unwrap();
            for (i, &src) in perm.iter().enumerate() {
                for c in 0..16 {
                    assert!((out.tokens[[i, c]] - base.tokens[[src, c]]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn masked_rows_do_not_leak() {
        let m = model(16, 2, 2, 9);
        let mut vs = scene_vectors(7);
        let masked = 3;
        vs.vectors.row_mut(masked).fill(0.0);
        let base = m.encode(&vs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c in 0..FEATURE_DIM - 1 {
            vs.vectors[[masked, c]] = rng.random_range(-3.0..3.0);
        }
        let noisy = m.encode(&vs).unwrap();
        for r in (0..vs.len()).filter(|&r| r != masked && base.valid[r]) {
            for c in 0..16 {
                assert!((noisy.tokens[[r, c]] - base.tokens[[r, c]]).abs() < 1e-9);
            }
        }
    }

    fn scalar_layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        x.iter().enumerate().map(|(i, v)| (v - mean) / (var + LN_EPS).sqrt() * g[i] + b[i]).collect()
    }

    fn scalar_linear(x: &[f64], w: &Mat, b: &Mat) -> Vec<f64> {
        (0..w.ncols()).map(|j| b[[0, j]] + (0..w.nrows()).map(|i| x[i] * w[[i, j]]).sum::<f64>()).collect()
    }

    /// One encoder block with one head on two tokens, written out with loops.
    #[test]
    fn two_token_block_matches_scalar_reference() {
        let mut cfg = ModelConfig::symmetric(4, 1, 1, 169, 60);
        cfg.decoder.num_layers = 0;
        let mut m = Model::new(cfg, ActionVocabulary::default(), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for e in m.params.entries_mut() {
            e.value.mapv_inplace(|_| rng.random_range(-0.6..0.6));
        }
        let mut v = Array2::zeros((2, FEATURE_DIM));
        for r in 0..2 {
            for c in 0..FEATURE_DIM - 1 {
                v[[r, c]] = rng.random_range(-1.0..1.0);
            }
            v[[r, FEATURE_DIM - 1]] = 1.0;
        }
        let vs = VectorSet { vectors: v, group_ids: vec![0, 1], num_groups: 2 };
        let x0 = m.embed_vectors(&vs).unwrap();
        let p = |name: &str| m.params.get(m.params.find(name).unwrap()).clone();
        let rows: Vec<Vec<f64>> = (0..2).map(|r| x0.row(r).to_vec()).collect();
        let h: Vec<Vec<f64>> = rows
            .iter()
            .map(|x| scalar_layer_norm(x, p("enc.0.ln_attn.g").as_slice().unwrap(), p("enc.0.ln_attn.b").as_slice().unwrap()))
            .collect();
        let q: Vec<Vec<f64>> = h.iter().map(|x| scalar_linear(x, &p("enc.0.attn.q.w"), &p("enc.0.attn.q.b"))).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|x| scalar_linear(x, &p("enc.0.attn.k.w"), &p("enc.0.attn.k.b"))).collect();
        let vv: Vec<Vec<f64>> = h.iter().map(|x| scalar_linear(x, &p("enc.0.attn.v.w"), &p("enc.0.attn.v.b"))).collect();
        let mut out = Vec::new();
        for i in 0..2 {
            let s: Vec<f64> = (0..2).map(|j| (0..4).map(|c| q[i][c] * k[j][c]).sum::<f64>() / 2.0).collect();
            let z = s[0].exp() + s[1].exp();
            let w = [s[0].exp() / z, s[1].exp() / z];
            let att: Vec<f64> = (0..4).map(|c| w[0] * vv[0][c] + w[1] * vv[1][c]).collect();
            let o = scalar_linear(&att, &p("enc.0.attn.o.w"), &p("enc.0.attn.o.b"));
            let x1: Vec<f64> = (0..4).map(|c| rows[i][c] + o[c]).collect();
            let h2 = scalar_layer_norm(&x1, p("enc.0.ln_ff.g").as_slice().unwrap(), p("enc.0.ln_ff.b").as_slice().unwrap());
            let up: Vec<f64> = scalar_linear(&h2, &p("enc.0.ff.up.w"), &p("enc.0.ff.up.b")).into_iter().map(gelu).collect();
            let down = scalar_linear(&up, &p("enc.0.ff.down.w"), &p("enc.0.ff.down.b"));
            let x2: Vec<f64> = (0..4).map(|c| x1[c] + down[c]).collect();
            out.push(scalar_layer_norm(&x2, p("enc.final_norm.g").as_slice().unwrap(), p("enc.final_norm.b").as_slice().unwrap()));
        }
        let got = m.encode(&vs).unwrap().tokens;
        for i in 0..2 {
            for c in 0..4 {
                assert!((got[[i, c]] - out[i][c]).abs() < 1e-12, "row {i} col {c}");
            }
        }
        assert_eq!(got.slice(s![.., ..]).dim(), (2, 4));
    }
}
