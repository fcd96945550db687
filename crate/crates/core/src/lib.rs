//! Flow-level anomaly detection over raw packet bytes.
//!
//! The pipeline captures the first `n` packets of each unidirectional flow,
//! anonymizes and normalizes their leading `l` IP-layer bytes, embeds them
//! with a residual 1-D CNN that is contrastively pretrained on benign
//! traffic and fine-tuned with a Deep SAD objective, and flags flows whose
//! distance to the benign center exceeds a calibrated threshold.

pub mod app;
pub mod detect;
pub mod eval;
pub mod flow;
pub mod model;
pub mod nn;
pub mod packet;
pub mod prep;
pub mod synth;
pub mod train;
