//! Autoregressive behavior model over discrete Verlet actions, with the
//! data, training, inference, evaluation and scaling tooling around it.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod evaluation;
pub mod exec;
pub mod geometry;
pub mod inference;
pub mod model;
pub mod nn;
pub mod plot;
pub mod scaling;
pub mod scene;
pub mod seed;
pub mod simulator;
pub mod training;
