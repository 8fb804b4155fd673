//! Parameter and FLOP accounting, experiment grids and power-law analysis.
//!
//! Training compute is `C = k · N · tokens` with `k = 6` by default. One
//! token is one decoder step; the encoder pass of an example is amortized
//! over its `T` steps by counting encoder parameters in `N`, so an example
//! contributes `k · N · T` FLOPs.

use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::ActionVocabulary;
use crate::model::{Model, ModelConfig};
use crate::simulator::{GeneratedSource, WorldConfig};
use crate::training::{prepare_all, train, TrainConfig, TrainError, Trainer};

pub use crate::model::count_params;

pub const DEFAULT_FLOP_CONSTANT: f64 = 6.0;
/// Validation scenes are drawn far from the training index range.
pub const VAL_OFFSET: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum ScalingError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("x values have no variance")]
    DegenerateX,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub fn estimate_flops(params: usize, tokens: u64, constant: f64) -> f64 {
    constant * params as f64 * tokens as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub label: String,
    pub model_params: usize,
    pub unique_samples: usize,
    pub flops: f64,
    pub max_lr: f64,
    pub final_train_loss: f64,
    pub val_loss: f64,
    pub val_perplexity: f64,
    pub wall_time: f64,
    /// Every candidate learning rate diverged; losses are NaN.
    pub diverged: bool,
}

pub const RECORD_HEADER: &str =
    "label,model_params,unique_samples,flops,max_lr,final_train_loss,val_loss,val_perplexity,wall_time,diverged";

pub fn write_records_csv(w: impl Write, records: &[ScalingRecord]) -> Result<(), ScalingError> {
    let mut out = csv::Writer::from_writer(w);
    if records.is_empty() {
        out.write_record(RECORD_HEADER.split(','))?;
    }
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records_csv(r: impl Read) -> Result<Vec<ScalingRecord>, ScalingError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != RECORD_HEADER {
        return Err(ScalingError::Input(format!("unexpected records header: {}", header.join(","))));
    }
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridModel {
    pub label: String,
    pub config: ModelConfig,
    pub learning_rates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub models: Vec<GridModel>,
    pub data_sizes: Vec<usize>,
    pub train: TrainConfig,
    pub world: WorldConfig,
    pub val_scenes: usize,
    pub init_seed: u64,
    pub flop_constant: f64,
}

/// Result of one (model, data, learning rate) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub label: String,
    pub unique_samples: usize,
    pub max_lr: f64,
    pub val_loss: Option<f64>,
    pub error: Option<String>,
    /// `(cumulative FLOPs, train loss)` per step.
    pub curve: Vec<(f64, f64)>,
}

/// Trains every cell of the grid at every candidate learning rate and keeps
/// the best learning rate per cell. All cells share one validation set.
/// Cells where every learning rate diverged are returned with `diverged`.
pub fn run_grid(spec: &GridSpec, vocab: &ActionVocabulary, mut on_run: impl FnMut(&GridRun)) -> Result<Vec<ScalingRecord>, ScalingError> {
    if spec.models.is_empty() || spec.data_sizes.is_empty() {
        return Err(ScalingError::Input("grid needs at least one model and one data size".into()));
    }
    if spec.models.iter().any(|m| m.learning_rates.is_empty()) {
        return Err(ScalingError::Input("every model needs at least one learning rate".into()));
    }
    if spec.val_scenes == 0 {
        return Err(ScalingError::Input("val_scenes must be >= 1".into()));
    }
    let val_source = GeneratedSource { config: spec.world.clone(), offset: VAL_OFFSET, len: spec.val_scenes };
    let val_scenes: Vec<_> = (0..spec.val_scenes)
        .map(|i| crate::dataset::SceneSource::scene(&val_source, i))
        .collect::<Result<_, _>>()
        .map_err(TrainError::from)?;
    let mut records = Vec::new();
    for m in &spec.models {
        let horizon = m.config.decoder.horizon;
        let val = prepare_all(&val_scenes, vocab, spec.train.target_prefix, horizon, spec.train.exec)?;
        let n = count_params(&m.config);
        for &d in &spec.data_sizes {
            let source = GeneratedSource { config: spec.world.clone(), offset: 0, len: d };
            let mut best: Option<ScalingRecord> = None;
            for &lr in &m.learning_rates {
                let cfg = TrainConfig { eval_every: 0, ..spec.train.clone() }.with_lr(lr);
                let start = Instant::now();
                let model = Model::new(m.config.clone(), vocab.clone(), spec.init_seed).map_err(TrainError::from)?;
                let mut trainer = Trainer::new(model, cfg, d)?;
                let outcome = train(&mut trainer, &source, &val, None, |_| {});
                let per_step = estimate_flops(n, (trainer.cfg.batch_size * horizon) as u64, spec.flop_constant);
                let run = match &outcome {
                    Ok(o) => GridRun {
                        label: m.label.clone(),
                        unique_samples: d,
                        max_lr: lr,
                        val_loss: o.final_val_loss,
                        error: None,
                        curve: o.curve.iter().map(|r| (per_step * (r.step + 1) as f64, r.train_loss)).collect(),
                    },
                    Err(e) => GridRun {
                        label: m.label.clone(),
                        unique_samples: d,
                        max_lr: lr,
                        val_loss: None,
                        error: Some(e.to_string()),
                        curve: Vec::new(),
                    },
                };
                on_run(&run);
                let o = match outcome {
                    Ok(o) => o,
                    Err(TrainError::Diverged { .. }) => continue,
                    Err(e) => return Err(e.into()),
                };
                let Some(val_loss) = o.final_val_loss.filter(|l| l.is_finite()) else { continue };
                let tokens = (trainer.total_steps() * trainer.cfg.batch_size * horizon) as u64;
                let rec = ScalingRecord {
                    label: m.label.clone(),
                    model_params: n,
                    unique_samples: d,
                    flops: estimate_flops(n, tokens, spec.flop_constant),
                    max_lr: lr,
                    final_train_loss: o.curve.last().map_or(f64::NAN, |r| r.train_loss),
                    val_loss,
                    val_perplexity: val_loss.exp(),
                    wall_time: start.elapsed().as_secs_f64(),
                    diverged: false,
                };
                if best.as_ref().is_none_or(|b| rec.val_loss < b.val_loss) {
                    best = Some(rec);
                }
            }
            records.push(best.unwrap_or_else(|| ScalingRecord {
                label: m.label.clone(),
                model_params: n,
                unique_samples: d,
                flops: f64::NAN,
                max_lr: f64::NAN,
                final_train_loss: f64::NAN,
                val_loss: f64::NAN,
                val_perplexity: f64::NAN,
                wall_time: 0.0,
                diverged: true,
            }));
        }
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

impl PowerLawFit {
    pub fn predict(&self, x: f64) -> f64 {
        (self.intercept + self.slope * x.ln()).exp()
    }
}

/// Ordinary least squares of `ln y` on `ln x`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit, ScalingError> {
    if points.len() < 2 {
        return Err(ScalingError::Input("need at least two points".into()));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0) || !x.is_finite() || !y.is_finite()) {
        return Err(ScalingError::Input("points must be positive and finite".into()));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx <= f64::EPSILON * lx.iter().map(|x| x * x).sum::<f64>().max(1.0) {
        return Err(ScalingError::DegenerateX);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { (1.0 - sse / syy).clamp(0.0, 1.0) };
    Ok(PowerLawFit { slope, intercept, r_squared })
}

/// Exponential moving average `s_t = a s_{t-1} + (1 - a) x_t`, `s_0 = x_0`.
pub fn ema(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        let s = out.last().map_or(v, |&p: &f64| alpha * p + (1.0 - alpha) * v);
        out.push(s);
    }
    out
}

/// Running minimum of loss over all curves as a function of FLOPs.
/// Each curve is a `(flops, loss)` series; `smoothing` applies [`ema`] to
/// each curve's losses first.
pub fn min_bound(curves: &[Vec<(f64, f64)>], smoothing: Option<f64>) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for c in curves {
        let losses: Vec<f64> = c.iter().map(|p| p.1).collect();
        let smooth = smoothing.map_or(losses.clone(), |a| ema(&losses, a));
        pts.extend(c.iter().zip(smooth).map(|(p, l)| (p.0, l)));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = f64::INFINITY;
    pts.into_iter()
        .map(|(c, l)| {
            best = best.min(l);
            (c, best)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsoFlopGroup {
    pub lo: f64,
    pub hi: f64,
    /// `(params, val_loss)` sorted by params.
    pub points: Vec<(usize, f64)>,
    pub best: (usize, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsoFlopAnalysis {
    pub groups: Vec<IsoFlopGroup>,
    /// Bins without records.
    pub empty_bins: Vec<(f64, f64)>,
}

/// Bins records by compute into `[edges[i], edges[i+1])` and reports the
/// lowest-loss model size per bin. Diverged records are ignored.
pub fn iso_flop_groups(records: &[ScalingRecord], edges: &[f64]) -> Result<IsoFlopAnalysis, ScalingError> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(ScalingError::Input("bin edges must be strictly increasing with at least two entries".into()));
    }
    let mut groups = Vec::new();
    let mut empty_bins = Vec::new();
    for w in edges.windows(2) {
        let mut points: Vec<(usize, f64)> =
            records.iter().filter(|r| !r.diverged && r.flops >= w[0] && r.flops < w[1]).map(|r| (r.model_params, r.val_loss)).collect();
        if points.is_empty() {
            empty_bins.push((w[0], w[1]));
            continue;
        }
        points.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let best = *points.iter().min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))).expect("nonempty");
        groups.push(IsoFlopGroup { lo: w[0], hi: w[1], points, best });
    }
    Ok(IsoFlopAnalysis { groups, empty_bins })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(n: usize, flops: f64, loss: f64) -> ScalingRecord {
        ScalingRecord {
            label: format!("n{n}"),
            model_params: n,
            unique_samples: 10,
            flops,
            max_lr: 1e-3,
            final_train_loss: loss,
            val_loss: loss,
            val_perplexity: loss.exp(),
            wall_time: 0.0,
            diverged: false,
        }
    }

    #[test]
    fn flops_formula() {
        assert_eq!(estimate_flops(123, 0, 6.0), 0.0);
        assert_eq!(estimate_flops(1_000_000, 1_000_000, 6.0), 6e12);
        assert_eq!(estimate_flops(10, 30, 6.0), estimate_flops(10, 10, 6.0) * 3.0);
    }

    #[test]
    fn fit_recovers_generators() {
        for (slope, intercept) in [(-0.102, 2.663), (-0.28, 7.22)] {
            let pts: Vec<(f64, f64)> = [1e3, 1e4, 1e5, 1e6, 1e7].iter().map(|&x: &f64| (x, (intercept + slope * x.ln()).exp())).collect();
            let fit = fit_power_law(&pts).unwrap();
            assert!((fit.slope - slope).abs() < 1e-9 && (fit.intercept - intercept).abs() < 1e-9);
            assert!((fit.r_squared - 1.0).abs() < 1e-12);
        }
        assert_eq!(fit_power_law(&[(1.0, 2.0), (3.0, 1.0)]).unwrap().r_squared, 1.0);
        assert!(matches!(fit_power_law(&[(2.0, 1.0), (2.0, 3.0)]), Err(ScalingError::DegenerateX)));
        assert!(fit_power_law(&[(1.0, 1.0)]).is_err());
    }

    #[test]
    fn envelope_switches_at_crossing() {
        let a = vec![(1.0, 5.0), (2.0, 3.0), (3.0, 2.5), (4.0, 2.4)];
        let b = vec![(1.5, 6.0), (2.5, 2.8), (3.5, 2.0), (4.5, 1.5)];
        let env = min_bound(&[a.clone(), b], None);
        let ys: Vec<f64> = env.iter().map(|p| p.1).collect();
        assert_eq!(ys, vec![5.0, 5.0, 3.0, 2.8, 2.5, 2.0, 2.0, 1.5]);
        assert!(env.windows(2).all(|w| w[1].1 <= w[0].1));
        assert_eq!(min_bound(std::slice::from_ref(&a), None).iter().map(|p| p.1).collect::<Vec<_>>(), vec![5.0, 3.0, 2.5, 2.4]);
        assert_eq!(ema(&[1.0, 3.0], 0.5), vec![1.0, 2.0]);
    }

    #[test]
    fn iso_flop_interior_argmin() {
        let recs = vec![record(100, 10.0, 3.0), record(200, 11.0, 2.5), record(400, 12.0, 2.7), record(50, 150.0, 2.0)];
        let a = iso_flop_groups(&recs, &[1.0, 100.0, 1000.0, 1e4]).unwrap();
        assert_eq!(a.groups.len(), 2);
        assert_eq!(a.groups[0].best, (200, 2.5));
        assert_eq!(a.groups[1].best, (50, 2.0));
        assert_eq!(a.empty_bins, vec![(1000.0, 1e4)]);
        let total: usize = a.groups.iter().map(|g| g.points.len()).sum();
        assert_eq!(total, recs.len());
    }

    #[test]
    fn records_csv_round_trip() {
        let recs = vec![record(1000, 6e9, 3.25), ScalingRecord { diverged: true, val_loss: f64::NAN, ..record(5, 1.0, 1.0) }];
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &recs).unwrap();
        let back = read_records_csv(&buf[..]).unwrap();
        assert_eq!(back[0], recs[0]);
        assert!(back[1].diverged && back[1].val_loss.is_nan());
    }
}
