//! Model configuration, parameter layout and the [`Model`] container.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::ActionVocabulary;
use crate::nn::{truncated_normal, Mat, ParamId, ParamStore};
use crate::scene::FEATURE_DIM;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("non-finite activation in {module} layer {layer}")]
    NonFinite { module: &'static str, layer: usize },
    #[error("decode cache does not match prefix: {0}")]
    CacheMismatch(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("operation requires the {0} decoder variant")]
    WrongVariant(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub horizon: usize,
    pub one_shot_num_queries: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    Autoregressive,
    OneShot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub variant: DecoderVariant,
}

impl ModelConfig {
    /// Encoder and decoder share width, depth and head count.
    pub fn symmetric(d_model: usize, layers: usize, heads: usize, vocab_size: usize, horizon: usize) -> Self {
        Self {
            encoder: EncoderConfig { d_model, num_layers: layers, num_heads: heads, mlp_ratio: 4, dropout: 0.0 },
            decoder: DecoderConfig {
                d_model,
                num_layers: layers,
                num_heads: heads,
                mlp_ratio: 4,
                dropout: 0.0,
                vocab_size,
                horizon,
                one_shot_num_queries: 6,
            },
            variant: DecoderVariant::Autoregressive,
        }
    }

    /// Named desk-scale presets: `tiny` (gradient checks), `0.1m`, `0.4m`, `1.6m`.
    pub fn preset(name: &str, vocab_size: usize, horizon: usize) -> Option<Self> {
        let (d, layers, heads) = match name {
            "tiny" => (8, 2, 2),
            "small" => (32, 2, 4),
            "0.1m" => (40, 2, 4),
            "0.4m" => (80, 2, 4),
            "1.6m" => (160, 2, 4),
            _ => return None,
        };
        Some(Self::symmetric(d, layers, heads, vocab_size, horizon))
    }

    pub fn with_variant(mut self, variant: DecoderVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let e = &self.encoder;
        let d = &self.decoder;
        let pos = |name: &str, v: usize| {
            if v == 0 {
                Err(ModelError::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        pos("encoder.d_model", e.d_model)?;
        pos("encoder.num_heads", e.num_heads)?;
        pos("encoder.mlp_ratio", e.mlp_ratio)?;
        pos("decoder.d_model", d.d_model)?;
        pos("decoder.num_heads", d.num_heads)?;
        pos("decoder.mlp_ratio", d.mlp_ratio)?;
        pos("decoder.vocab_size", d.vocab_size)?;
        pos("decoder.horizon", d.horizon)?;
        if !e.d_model.is_multiple_of(e.num_heads) {
            return Err(ModelError::Config("encoder.d_model must be divisible by encoder.num_heads".into()));
        }
        if !e.d_model.is_multiple_of(2) {
            return Err(ModelError::Config("encoder.d_model must be even".into()));
        }
        if !d.d_model.is_multiple_of(d.num_heads) {
            return Err(ModelError::Config("decoder.d_model must be divisible by decoder.num_heads".into()));
        }
        if self.variant == DecoderVariant::OneShot && d.one_shot_num_queries == 0 {
            return Err(ModelError::Config("decoder.one_shot_num_queries must be >= 1".into()));
        }
        for (name, p) in [("encoder.dropout", e.dropout), ("decoder.dropout", d.dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(ModelError::Config(format!("{name} must be in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Closed-form parameter count.
///
/// With encoder width `e`, point-net width `p = e/2`, decoder width `d`,
/// feed-forward ratios `r_e`, `r_d`, feature width `F`, vocabulary `A` and
/// horizon `T`:
///
/// * point-net: `F·p + p + 2p + p·p + p`
/// * encoder layer: `4e² + 4e + 2·r_e·e² + r_e·e + e + 4e` (attention, FF, two norms)
/// * encoder final norm: `2e`
/// * decoder layer: self-attention `4d² + 4d`, cross-attention
///   `2d² + 2e·d + 4d`, FF `2·r_d·d² + r_d·d + d`, three norms `6d`
/// * autoregressive head: embed `2d + d + 2d`, positional table `T·d`,
///   final norm `2d`, logits `d·A + A`
/// * one-shot head: queries `K·d`, final norm `2d`, trajectory `2T·d + 2T`,
///   score `d + 1`
pub fn count_params(cfg: &ModelConfig) -> usize {
    let e = cfg.encoder.d_model;
    let p = e / 2;
    let re = cfg.encoder.mlp_ratio;
    let d = cfg.decoder.d_model;
    let rd = cfg.decoder.mlp_ratio;
    let f = FEATURE_DIM;
    let a = cfg.decoder.vocab_size;
    let t = cfg.decoder.horizon;

    let pointnet = f * p + p + 2 * p + p * p + p;
    let enc_layer = 4 * e * e + 4 * e + 2 * re * e * e + re * e + e + 4 * e;
    let encoder = pointnet + cfg.encoder.num_layers * enc_layer + 2 * e;

    let dec_layer = (4 * d * d + 4 * d) + (2 * d * d + 2 * e * d + 4 * d) + (2 * rd * d * d + rd * d + d) + 6 * d;
    let layers = cfg.decoder.num_layers * dec_layer;
    let head = match cfg.variant {
        DecoderVariant::Autoregressive => (2 * d + d + 2 * d) + t * d + 2 * d + (d * a + a),
        DecoderVariant::OneShot => cfg.decoder.one_shot_num_queries * d + 2 * d + (2 * t * d + 2 * t) + (d + 1),
    };
    encoder + layers + head
}

/// Encoder and decoder shares of [`count_params`].
pub fn count_params_split(cfg: &ModelConfig) -> (usize, usize) {
    let e = cfg.encoder.d_model;
    let p = e / 2;
    let pointnet = FEATURE_DIM * p + p + 2 * p + p * p + p;
    let re = cfg.encoder.mlp_ratio;
    let enc = pointnet + cfg.encoder.num_layers * (4 * e * e + 4 * e + 2 * re * e * e + re * e + e + 4 * e) + 2 * e;
    let total = count_params(cfg);
    (enc, total - enc)
}

#[derive(Clone, Debug)]
pub(crate) struct LinearP {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct NormP {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct AttnP {
    pub q: LinearP,
    pub k: LinearP,
    pub v: LinearP,
    pub o: LinearP,
}

#[derive(Clone, Debug)]
pub(crate) struct FfP {
    pub up: LinearP,
    pub down: LinearP,
}

#[derive(Clone, Debug)]
pub(crate) struct EncLayerP {
    pub ln_attn: NormP,
    pub attn: AttnP,
    pub ln_ff: NormP,
    pub ff: FfP,
}

#[derive(Clone, Debug)]
pub(crate) struct DecLayerP {
    pub ln_self: NormP,
    pub self_attn: AttnP,
    pub ln_cross: NormP,
    pub cross: AttnP,
    pub ln_ff: NormP,
    pub ff: FfP,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderP {
    pub pn_in: LinearP,
    pub pn_norm: NormP,
    pub pn_out: LinearP,
    pub layers: Vec<EncLayerP>,
    pub final_norm: NormP,
}

#[derive(Clone, Debug)]
pub(crate) enum HeadP {
    Autoregressive { embed: LinearP, embed_norm: NormP, pos_table: ParamId, logits: LinearP },
    OneShot { queries: ParamId, traj: LinearP, score: LinearP },
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderP {
    pub layers: Vec<DecLayerP>,
    pub final_norm: NormP,
    pub head: HeadP,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let m = truncated_normal(&mut self.rng, rows, cols, INIT_STD);
        self.store.add(name, m, true)
    }

    fn table(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let m = truncated_normal(&mut self.rng, rows, cols, INIT_STD);
        self.store.add(name, m, false)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearP {
        let w = self.matrix(format!("{name}.w"), fan_in, fan_out);
        let b = self.store.add(format!("{name}.b"), Mat::zeros((1, fan_out)), false);
        LinearP { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormP {
        let g = self.store.add(format!("{name}.g"), Mat::ones((1, d)), false);
        let b = self.store.add(format!("{name}.b"), Mat::zeros((1, d)), false);
        NormP { g, b }
    }

    fn attn(&mut self, name: &str, q_in: usize, kv_in: usize, d: usize) -> AttnP {
        AttnP {
            q: self.linear(&format!("{name}.q"), q_in, d),
            k: self.linear(&format!("{name}.k"), kv_in, d),
            v: self.linear(&format!("{name}.v"), kv_in, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ff(&mut self, name: &str, d: usize, ratio: usize) -> FfP {
        FfP { up: self.linear(&format!("{name}.up"), d, ratio * d), down: self.linear(&format!("{name}.down"), ratio * d, d) }
    }
}

fn build_layout(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> (EncoderP, DecoderP) {
    let mut b = Builder { store, rng: ChaCha8Rng::seed_from_u64(seed) };
    let e = cfg.encoder.d_model;
    let p = e / 2;
    let encoder = EncoderP {
        pn_in: b.linear("enc.pn.in", FEATURE_DIM, p),
        pn_norm: b.norm("enc.pn.norm", p),
        pn_out: b.linear("enc.pn.out", p, p),
        layers: (0..cfg.encoder.num_layers)
            .map(|l| EncLayerP {
                ln_attn: b.norm(&format!("enc.{l}.ln_attn"), e),
                attn: b.attn(&format!("enc.{l}.attn"), e, e, e),
                ln_ff: b.norm(&format!("enc.{l}.ln_ff"), e),
                ff: b.ff(&format!("enc.{l}.ff"), e, cfg.encoder.mlp_ratio),
            })
            .collect(),
        final_norm: b.norm("enc.final_norm", e),
    };
    let d = cfg.decoder.d_model;
    let t = cfg.decoder.horizon;
    let head_pre = match cfg.variant {
        DecoderVariant::Autoregressive => {
            let embed = b.linear("dec.embed", 2, d);
            let embed_norm = b.norm("dec.embed_norm", d);
            let pos_table = b.table("dec.pos_table".into(), t, d);
            Some((embed, embed_norm, pos_table))
        }
        DecoderVariant::OneShot => None,
    };
    let queries = match cfg.variant {
        DecoderVariant::OneShot => Some(b.table("dec.queries".into(), cfg.decoder.one_shot_num_queries, d)),
        DecoderVariant::Autoregressive => None,
    };
    let layers = (0..cfg.decoder.num_layers)
        .map(|l| DecLayerP {
            ln_self: b.norm(&format!("dec.{l}.ln_self"), d),
            self_attn: b.attn(&format!("dec.{l}.self"), d, d, d),
            ln_cross: b.norm(&format!("dec.{l}.ln_cross"), d),
            cross: b.attn(&format!("dec.{l}.cross"), d, e, d),
            ln_ff: b.norm(&format!("dec.{l}.ln_ff"), d),
            ff: b.ff(&format!("dec.{l}.ff"), d, cfg.decoder.mlp_ratio),
        })
        .collect();
    let final_norm = b.norm("dec.final_norm", d);
    let head = match (head_pre, queries) {
        (Some((embed, embed_norm, pos_table)), _) => {
            HeadP::Autoregressive { embed, embed_norm, pos_table, logits: b.linear("dec.logits", d, cfg.decoder.vocab_size) }
        }
        (None, Some(queries)) => HeadP::OneShot { queries, traj: b.linear("dec.traj", d, 2 * t), score: b.linear("dec.score", d, 1) },
        (None, None) => unreachable!("variant determines the head"),
    };
    (encoder, DecoderP { layers, final_norm, head })
}

/// Encoder, decoder, vocabulary and weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: ActionVocabulary,
    pub params: ParamStore,
    pub(crate) enc: EncoderP,
    pub(crate) dec: DecoderP,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: ActionVocabulary, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if config.decoder.vocab_size != vocab.size() {
            return Err(ModelError::Config(format!(
                "decoder.vocab_size {} does not match vocabulary size {}",
                config.decoder.vocab_size,
                vocab.size()
            )));
        }
        let mut params = ParamStore::new();
        let (enc, dec) = build_layout(&config, &mut params, seed);
        Ok(Self { config, vocab, params, enc, dec })
    }

    /// Rebuilds a model around saved weights, checking names and shapes.
    pub fn from_params(config: ModelConfig, vocab: ActionVocabulary, saved: Vec<(String, Mat)>) -> Result<Self, ModelError> {
        let mut model = Self::new(config, vocab, 0)?;
        if saved.len() != model.params.len() {
            return Err(ModelError::Shape(format!("expected {} tensors, found {}", model.params.len(), saved.len())));
        }
        for (entry, (name, value)) in model.params.entries_mut().iter_mut().zip(saved) {
            if entry.name != name || entry.value.dim() != value.dim() {
                return Err(ModelError::Shape(format!(
                    "tensor {name} {:?} does not match expected {} {:?}",
                    value.dim(),
                    entry.name,
                    entry.value.dim()
                )));
            }
            entry.value = value;
        }
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn variant(&self) -> DecoderVariant {
        self.config.variant
    }

    /// Replaces every weight with `N(0, std)` noise (gains with `1 + noise`).
    /// Gradient checks use this to move away from the near-zero gradients
    /// of the default initialization.
    pub fn scramble(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in self.params.entries_mut() {
            let (r, c) = e.value.dim();
            let noise = truncated_normal(&mut rng, r, c, std);
            e.value = if e.name.ends_with(".g") { noise + 1.0 } else { noise };
        }
    }
}

/// Draws a dropout keep-mask scaled by `1 / (1 - p)`.
pub(crate) fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Mat {
    let keep = 1.0 / (1.0 - p);
    Mat::from_shape_simple_fn((rows, cols), || if rng.random::<f64>() < p { 0.0 } else { keep })
}
