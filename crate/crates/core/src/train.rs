//! Contrastive pretraining on benign traffic, Deep SAD fine-tuning, and the
//! k-fold experiment harness.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{calibrate, DetectError, OpPoint, ThresholdSet};
use crate::eval::{self, EvalError};
use crate::model::{ArchConfig, ModelError, ModelState};
use crate::nn::{
    self, AdamConfig, AdamState, Mode, NnError, Scalar, Schedule, SgdState, Tensor, TensorMap,
};
use crate::packet::{PROTO_ICMP, PROTO_TCP, PROTO_UDP};
use crate::prep::{Label, SampleConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training samples")]
    EmptyDataset,
    #[error("unknown transform {0:?}")]
    UnknownKind(String),
    #[error("contrastive batch needs at least 2 positive pairs, got {0}")]
    DegenerateBatch(usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("invalid training configuration: {0}")]
    ConfigInvalid(String),
    #[error("{phase} loss became non-finite at epoch {epoch}")]
    NonFinite { phase: &'static str, epoch: usize },
    #[error("{rows} rows but {labels} labels")]
    LabelMismatch { rows: usize, labels: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Detect(#[from] DetectError),
}

/// Positive-view augmentations. Outputs stay in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentKind {
    /// Zero one contiguous span covering at most `fraction` of the values.
    ZeroMask { fraction: f64 },
    /// Additive Gaussian noise, clamped.
    Jitter { sigma: f64 },
    /// Zero each value independently with probability `p`.
    Dropout { p: f64 },
}

impl AugmentKind {
    pub const ZERO_MASK: AugmentKind = AugmentKind::ZeroMask { fraction: 0.1 };
    pub const JITTER: AugmentKind = AugmentKind::Jitter { sigma: 0.01 };
    pub const DROPOUT: AugmentKind = AugmentKind::Dropout { p: 0.05 };

    fn name_and_value(self) -> (&'static str, f64) {
        match self {
            AugmentKind::ZeroMask { fraction } => ("zero_mask", fraction),
            AugmentKind::Jitter { sigma } => ("jitter", sigma),
            AugmentKind::Dropout { p } => ("dropout", p),
        }
    }

    fn validate(self) -> Result<(), TrainError> {
        let (name, v) = self.name_and_value();
        let ok = match self {
            AugmentKind::Jitter { .. } => v >= 0.0 && v.is_finite(),
            _ => (0.0..=1.0).contains(&v),
        };
        if ok {
            Ok(())
        } else {
            Err(TrainError::ConfigInvalid(format!(
                "{name} parameter {v} out of range"
            )))
        }
    }
}

/// `zero_mask`, `jitter`, `dropout`, optionally `name=value`.
impl FromStr for AugmentKind {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, value) = match s.split_once('=') {
            Some((n, v)) => (
                n,
                Some(
                    v.parse::<f64>()
                        .map_err(|_| TrainError::UnknownKind(s.to_string()))?,
                ),
            ),
            None => (s, None),
        };
        let kind = match name {
            "zero_mask" => AugmentKind::ZeroMask {
                fraction: value.unwrap_or(0.1),
            },
            "jitter" => AugmentKind::Jitter {
                sigma: value.unwrap_or(0.01),
            },
            "dropout" => AugmentKind::Dropout {
                p: value.unwrap_or(0.05),
            },
            _ => return Err(TrainError::UnknownKind(s.to_string())),
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (name, v) = self.name_and_value();
        let default = [
            AugmentKind::ZERO_MASK,
            AugmentKind::JITTER,
            AugmentKind::DROPOUT,
        ]
        .contains(self);
        if default {
            f.write_str(name)
        } else {
            write!(f, "{name}={v}")
        }
    }
}

impl Serialize for AugmentKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AugmentKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn augment(sample: &[f32], rng: &mut ChaCha8Rng, kind: AugmentKind) -> Vec<f32> {
    let mut out = sample.to_vec();
    match kind {
        AugmentKind::ZeroMask { fraction } => {
            let max_span = (fraction * out.len() as f64).ceil() as usize;
            if max_span > 0 && !out.is_empty() {
                let span = rng.random_range(1..=max_span.min(out.len()));
                let start = rng.random_range(0..=out.len() - span);
                out[start..start + span].fill(0.0);
            }
        }
        AugmentKind::Jitter { sigma } => {
            if sigma > 0.0 {
                let noise = Normal::new(0.0, sigma).expect("validated sigma");
                for v in &mut out {
                    *v = (f64::from(*v) + noise.sample(rng)).clamp(0.0, 1.0) as f32;
                }
            }
        }
        AugmentKind::Dropout { p } => {
            for v in &mut out {
                if rng.random_bool(p) {
                    *v = 0.0;
                }
            }
        }
    }
    out
}

fn augment_all(sample: &[f32], rng: &mut ChaCha8Rng, kinds: &[AugmentKind]) -> Vec<f32> {
    kinds
        .iter()
        .fold(sample.to_vec(), |acc, &k| augment(&acc, rng, k))
}

pub const SHIFT_IDENTITY: u8 = 0;
pub const SHIFT_REVERSE_PACKETS: u8 = 1;
pub const SHIFT_ROTATE_SEGMENTS: u8 = 2;
pub const SHIFT_SHUFFLE_PAYLOAD: u8 = 3;

const PAYLOAD_PERMUTATION_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

fn byte_at(seg: &[f32], i: usize) -> u8 {
    seg.get(i)
        .map_or(0, |&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Offset of the transport payload inside one `l`-value packet segment.
fn payload_start(seg: &[f32]) -> usize {
    let ihl = usize::from(byte_at(seg, 0) & 0x0f) * 4;
    let ihl = if ihl < 20 { 20 } else { ihl };
    let transport = match byte_at(seg, 9) {
        PROTO_TCP => (usize::from(byte_at(seg, ihl + 12) >> 4) * 4).max(20),
        PROTO_UDP | PROTO_ICMP => 8,
        _ => 0,
    };
    (ihl + transport).min(seg.len())
}

/// Negative views: 1 reverses packet order, 2 rotates every packet segment
/// by `l/2`, 3 applies a fixed permutation to each segment's payload bytes.
/// 0 is the identity.
pub fn shift_transform(sample: &[f32], k: u8, cfg: SampleConfig) -> Result<Vec<f32>, TrainError> {
    let l = cfg.l;
    if sample.len() != cfg.input_len() {
        return Err(TrainError::ConfigInvalid(format!(
            "sample has {} values, window is {}",
            sample.len(),
            cfg.input_len()
        )));
    }
    let out = match k {
        SHIFT_IDENTITY => sample.to_vec(),
        SHIFT_REVERSE_PACKETS => sample.chunks_exact(l).rev().flatten().copied().collect(),
        SHIFT_ROTATE_SEGMENTS => {
            let mut out = sample.to_vec();
            for seg in out.chunks_exact_mut(l) {
                seg.rotate_right(l / 2);
            }
            out
        }
        SHIFT_SHUFFLE_PAYLOAD => {
            let mut out = sample.to_vec();
            for seg in out.chunks_exact_mut(l) {
                let start = payload_start(seg);
                let region = &mut seg[start..];
                let mut perm: Vec<usize> = (0..region.len()).collect();
                let mut rng =
                    ChaCha8Rng::seed_from_u64(PAYLOAD_PERMUTATION_SEED ^ region.len() as u64);
                perm.shuffle(&mut rng);
                let src = region.to_vec();
                for (dst, &from) in region.iter_mut().zip(&perm) {
                    *dst = src[from];
                }
            }
            out
        }
        other => return Err(TrainError::UnknownKind(format!("shift {other}"))),
    };
    Ok(out)
}

/// NT-Xent over rows of `z` (`[R, D]`). Row `i` is an anchor iff
/// `pair[i]` is set; rows without a pair only appear in denominators.
/// Returns the mean anchor loss and its gradient with respect to `z`.
pub fn info_nce_loss<T: Scalar>(
    z: &Tensor<T>,
    pair: &[Option<usize>],
    tau: f64,
) -> Result<(f64, Tensor<T>), TrainError> {
    let dims = z.dims();
    if dims.len() != 2 || dims[0] != pair.len() {
        return Err(NnError::ShapeMismatch {
            context: "info_nce_loss".into(),
            expected: format!("[{}, D]", pair.len()),
            got: dims.to_vec(),
        }
        .into());
    }
    if !(tau > 0.0) {
        return Err(TrainError::ConfigInvalid(format!(
            "temperature {tau} must be positive"
        )));
    }
    let (rows, d) = (dims[0], dims[1]);
    let anchors: Vec<usize> = (0..rows).filter(|&i| pair[i].is_some()).collect();
    let distinct_pairs = anchors
        .iter()
        .filter(|&&i| {
            let j = pair[i].expect("anchor");
            j < rows && j != i && (pair[j] != Some(i) || i < j)
        })
        .count();
    if distinct_pairs < 2 || pair.iter().flatten().any(|&j| j >= rows) {
        return Err(TrainError::DegenerateBatch(distinct_pairs));
    }

    let norms: Vec<f64> = z
        .data()
        .chunks_exact(d)
        .map(|r| {
            r.iter()
                .map(|v| v.f64() * v.f64())
                .sum::<f64>()
                .sqrt()
                .max(1e-12)
        })
        .collect();
    let u: Vec<f64> = z
        .data()
        .chunks_exact(d)
        .zip(&norms)
        .flat_map(|(r, &n)| r.iter().map(move |v| v.f64() / n))
        .collect();
    let row = |i: usize| &u[i * d..(i + 1) * d];
    let mut sim = vec![0.0; rows * rows];
    for i in 0..rows {
        for k in i..rows {
            let s = row(i).iter().zip(row(k)).map(|(a, b)| a * b).sum::<f64>() / tau;
            sim[i * rows + k] = s;
            sim[k * rows + i] = s;
        }
    }

    // coef[i][k] = dL/dsim[i][k]
    let mut coef = vec![0.0; rows * rows];
    let a = anchors.len() as f64;
    let mut loss = 0.0;
    for &i in &anchors {
        let p = pair[i].expect("anchor");
        let srow = &sim[i * rows..(i + 1) * rows];
        let m = (0..rows)
            .filter(|&k| k != i)
            .map(|k| srow[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..rows)
            .filter(|&k| k != i)
            .map(|k| (srow[k] - m).exp())
            .sum();
        loss += -(srow[p] - m) + denom.ln();
        for k in (0..rows).filter(|&k| k != i) {
            coef[i * rows + k] += (srow[k] - m).exp() / denom / a;
        }
        coef[i * rows + p] -= 1.0 / a;
    }
    loss /= a;

    // sim[i][k] = u_i·u_k/τ; push coefficients onto both unit vectors
    let mut du = vec![0.0; rows * d];
    for i in 0..rows {
        for k in 0..rows {
            let c = coef[i * rows + k] / tau;
            if c == 0.0 {
                continue;
            }
            for t in 0..d {
                du[i * d + t] += c * u[k * d + t];
                du[k * d + t] += c * u[i * d + t];
            }
        }
    }
    // through the normalization: dz = (du − u(u·du)) / ‖z‖
    let mut grad = Vec::with_capacity(rows * d);
    for i in 0..rows {
        let ui = row(i);
        let dui = &du[i * d..(i + 1) * d];
        let proj: f64 = ui.iter().zip(dui).map(|(a, b)| a * b).sum();
        grad.extend(
            ui.iter()
                .zip(dui)
                .map(|(&uv, &g)| T::of((g - uv * proj) / norms[i])),
        );
    }
    Ok((loss, Tensor::new(dims.to_vec(), grad)?))
}

/// Mean over the batch of `‖e−c‖²` (benign) and `η / (‖e−c‖² + ε)` (anomalous),
/// with its gradient.
pub fn deep_sad_loss<T: Scalar>(
    emb: &Tensor<T>,
    labels: &[Label],
    c: &[f32],
    eta: f64,
    eps: f64,
) -> Result<(f64, Tensor<T>), TrainError> {
    let d = c.len();
    if emb.dims() != [labels.len(), d] {
        return Err(NnError::ShapeMismatch {
            context: "deep_sad_loss".into(),
            expected: format!("[{}, {d}]", labels.len()),
            got: emb.dims().to_vec(),
        }
        .into());
    }
    let b = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(emb.len());
    for (e, label) in emb.data().chunks_exact(d).zip(labels) {
        let diff: Vec<f64> = e
            .iter()
            .zip(c)
            .map(|(v, &cv)| v.f64() - f64::from(cv))
            .collect();
        let dist: f64 = diff.iter().map(|x| x * x).sum();
        let scale = match label {
            Label::Benign => {
                loss += dist;
                2.0
            }
            Label::Anomalous => {
                let q = dist + eps;
                loss += eta / q;
                -2.0 * eta / (q * q)
            }
        };
        grad.extend(diff.iter().map(|x| T::of(scale * x / b)));
    }
    Ok((loss / b, Tensor::new(emb.dims().to_vec(), grad)?))
}

/// Component magnitudes below this are pushed out to it.
pub const CENTER_MIN_ABS: f32 = 0.1;

/// Mean eval-mode embedding with near-zero components set to ±0.1.
pub fn init_center(model: &ModelState, benign: &[Vec<f32>]) -> Result<Vec<f32>, TrainError> {
    if benign.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let emb = model.embed(benign)?;
    Ok(center_from_embeddings(&emb))
}

pub fn center_from_embeddings(emb: &[Vec<f32>]) -> Vec<f32> {
    let d = emb[0].len();
    let mut sum = vec![0.0f64; d];
    for e in emb {
        for (s, &v) in sum.iter_mut().zip(e) {
            *s += f64::from(v);
        }
    }
    sum.iter()
        .map(|s| {
            let m = (s / emb.len() as f64) as f32;
            if m.abs() >= CENTER_MIN_ABS {
                m
            } else if m < 0.0 {
                -CENTER_MIN_ABS
            } else {
                CENTER_MIN_ABS
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub eta0: f64,
    pub eta_min: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub shift_set: Vec<u8>,
    pub augment_set: Vec<AugmentKind>,
    pub seed: u64,
    /// Caps the batches drawn per epoch; `None` sweeps the whole set.
    #[serde(default)]
    pub batches_per_epoch: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_size: 128,
            temperature: 0.5,
            eta0: 0.1,
            eta_min: 0.0,
            warmup_epochs: 100,
            momentum: 0.9,
            shift_set: vec![
                SHIFT_REVERSE_PACKETS,
                SHIFT_ROTATE_SEGMENTS,
                SHIFT_SHUFFLE_PAYLOAD,
            ],
            augment_set: vec![
                AugmentKind::ZERO_MASK,
                AugmentKind::JITTER,
                AugmentKind::DROPOUT,
            ],
            seed: 0,
            batches_per_epoch: None,
        }
    }
}

impl PretrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule::WarmupCosine {
            eta0: self.eta0,
            eta_min: self.eta_min,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::ConfigInvalid(
                "pretrain batch_size must be at least 2".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(TrainError::ConfigInvalid(
                "temperature must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::ConfigInvalid(
                "momentum must be in [0, 1)".into(),
            ));
        }
        if let Some(&bad) = self.shift_set.iter().find(|&&k| k > SHIFT_SHUFFLE_PAYLOAD) {
            return Err(TrainError::UnknownKind(format!("shift {bad}")));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(TrainError::ConfigInvalid(
                "batches_per_epoch must be positive".into(),
            ));
        }
        self.augment_set.iter().try_for_each(|a| a.validate())?;
        self.schedule().validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the anomalous term.
    pub eta: f64,
    pub eps: f64,
    pub lr_search: f64,
    pub lr_finetune: f64,
    /// Defaults to half the epochs.
    #[serde(default)]
    pub switch_epoch: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub batches_per_epoch: Option<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 64,
            eta: 1.0,
            eps: 1e-6,
            lr_search: 1e-3,
            lr_finetune: 1e-4,
            switch_epoch: None,
            seed: 0,
            batches_per_epoch: None,
        }
    }
}

impl FinetuneConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule::TwoPhase {
            lr_search: self.lr_search,
            lr_finetune: self.lr_finetune,
            switch_epoch: self.switch_epoch.unwrap_or(self.epochs / 2),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(TrainError::ConfigInvalid(
                "finetune needs epochs >= 1 and batch_size >= 2".into(),
            ));
        }
        if !(self.eta > 0.0 && self.eps > 0.0) {
            return Err(TrainError::ConfigInvalid(
                "eta and eps must be positive".into(),
            ));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(TrainError::ConfigInvalid(
                "batches_per_epoch must be positive".into(),
            ));
        }
        self.schedule().validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_auc: Option<f64>,
}

/// Shuffled batches of at least 2 indices; a trailing singleton is dropped.
fn epoch_batches(
    n: usize,
    batch: usize,
    cap: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out: Vec<Vec<usize>> = idx
        .chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect();
    if let Some(cap) = cap {
        out.truncate(cap);
    }
    out
}

fn finite(loss: f64, phase: &'static str, epoch: usize) -> Result<f64, TrainError> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(TrainError::NonFinite { phase, epoch })
    }
}

/// Contrastive pretraining of encoder and projection head on benign rows.
pub fn pretrain(
    model: &mut ModelState,
    benign: &[Vec<f32>],
    cfg: &PretrainConfig,
) -> Result<Vec<EpochLog>, TrainError> {
    cfg.validate()?;
    if benign.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if benign.len() < 2 {
        return Err(TrainError::TooFewSamples {
            needed: 2,
            got: benign.len(),
        });
    }
    let schedule = cfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = SgdState::default();
    let sample_cfg = model.sample_cfg;
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch)?;
        let batches = epoch_batches(
            benign.len(),
            cfg.batch_size,
            cfg.batches_per_epoch,
            &mut rng,
        );
        let mut total = 0.0;
        for batch in &batches {
            let b = batch.len();
            let mut rows: Vec<Vec<f32>> = Vec::with_capacity(b * (2 + cfg.shift_set.len()));
            for _view in 0..2 {
                for &i in batch {
                    rows.push(augment_all(&benign[i], &mut rng, &cfg.augment_set));
                }
            }
            for &k in &cfg.shift_set {
                for &i in batch {
                    rows.push(shift_transform(&benign[i], k, sample_cfg)?);
                }
            }
            let pairs: Vec<Option<usize>> = (0..rows.len())
                .map(|r| match r {
                    r if r < b => Some(r + b),
                    r if r < 2 * b => Some(r - b),
                    _ => None,
                })
                .collect();

            let x = model.batch_tensor(&rows)?;
            let (emb, enc_tape) = nn::forward(
                &model.encoder,
                &model.params,
                &mut model.buffers,
                &x,
                Mode::Train,
            )?;
            let (proj, head_tape) = nn::forward(
                &model.head,
                &model.params,
                &mut model.buffers,
                &emb,
                Mode::Train,
            )?;
            let (loss, g) = info_nce_loss(&proj, &pairs, cfg.temperature)?;
            total += finite(loss, "pretrain", epoch)?;
            let head_grads = nn::backward(&model.head, &model.params, &head_tape, &g)?;
            let enc_grads =
                nn::backward(&model.encoder, &model.params, &enc_tape, &head_grads.input)?;
            let mut grads = enc_grads.params;
            grads.extend(head_grads.params);
            nn::sgd_step(&mut model.params, &grads, &mut sgd, lr, cfg.momentum);
        }
        let loss = total / batches.len().max(1) as f64;
        log::debug!("pretrain epoch {epoch}: loss {loss:.6} lr {lr:.3e}");
        logs.push(EpochLog {
            phase: Phase::Pretrain,
            epoch,
            loss,
            lr,
            val_auc: None,
        });
    }
    Ok(logs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub logs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_auc: Option<f64>,
}

/// Validation rows and labels used for best-epoch selection.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub rows: &'a [Vec<f32>],
    pub labels: &'a [Label],
}

fn both_classes(labels: &[Label]) -> bool {
    labels.iter().any(|l| l.is_anomalous()) && labels.iter().any(|l| !l.is_anomalous())
}

/// Deep SAD fine-tuning of the encoder. Sets the model's center and keeps
/// the parameters of the epoch with the highest validation AUC (earliest on
/// ties), or of the last epoch when validation has a single class.
pub fn finetune(
    model: &mut ModelState,
    rows: &[Vec<f32>],
    labels: &[Label],
    val: Option<Validation<'_>>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome, TrainError> {
    cfg.validate()?;
    if rows.len() != labels.len() {
        return Err(TrainError::LabelMismatch {
            rows: rows.len(),
            labels: labels.len(),
        });
    }
    if let Some(v) = &val {
        if v.rows.len() != v.labels.len() {
            return Err(TrainError::LabelMismatch {
                rows: v.rows.len(),
                labels: v.labels.len(),
            });
        }
    }
    let benign: Vec<Vec<f32>> = rows
        .iter()
        .zip(labels)
        .filter(|(_, l)| !l.is_anomalous())
        .map(|(r, _)| r.clone())
        .collect();
    if benign.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if rows.len() < 2 {
        return Err(TrainError::TooFewSamples {
            needed: 2,
            got: rows.len(),
        });
    }
    let center = init_center(model, &benign)?;
    model.set_center(center.clone())?;

    let schedule = cfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::default();
    let adam_cfg = AdamConfig::default();
    let validate = val.filter(|v| both_classes(v.labels));
    let mut best: Option<(f64, usize, TensorMap<f32>, TensorMap<f32>)> = None;
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch)?;
        let batches = epoch_batches(rows.len(), cfg.batch_size, cfg.batches_per_epoch, &mut rng);
        let mut total = 0.0;
        for batch in &batches {
            let batch_rows: Vec<&Vec<f32>> = batch.iter().map(|&i| &rows[i]).collect();
            let batch_labels: Vec<Label> = batch.iter().map(|&i| labels[i]).collect();
            let x = model.batch_tensor(&batch_rows)?;
            let (emb, tape) = nn::forward(
                &model.encoder,
                &model.params,
                &mut model.buffers,
                &x,
                Mode::Train,
            )?;
            let (loss, g) = deep_sad_loss(&emb, &batch_labels, &center, cfg.eta, cfg.eps)?;
            total += finite(loss, "finetune", epoch)?;
            let grads = nn::backward(&model.encoder, &model.params, &tape, &g)?;
            nn::adam_step(&mut model.params, &grads.params, &mut adam, lr, adam_cfg);
        }
        let loss = total / batches.len().max(1) as f64;

        let val_auc = match &validate {
            Some(v) => {
                let scores: Vec<f64> = model.score_batch(v.rows)?.iter().map(|s| s.0).collect();
                let auc = eval::auc(&scores, v.labels)?;
                if best.as_ref().is_none_or(|(b, ..)| auc > *b) {
                    best = Some((auc, epoch, model.params.clone(), model.buffers.clone()));
                }
                Some(auc)
            }
            None => None,
        };
        log::debug!("finetune epoch {epoch}: loss {loss:.6} lr {lr:.1e} val_auc {val_auc:?}");
        logs.push(EpochLog {
            phase: Phase::Finetune,
            epoch,
            loss,
            lr,
            val_auc,
        });
    }

    let (best_epoch, best_auc) = match best {
        Some((auc, epoch, params, buffers)) => {
            model.params = params;
            model.buffers = buffers;
            (epoch, Some(auc))
        }
        None => (cfg.epochs - 1, None),
    };
    Ok(FinetuneOutcome {
        logs,
        best_epoch,
        best_auc,
    })
}

/// Seeded partition of `0..n` into `k` folds whose sizes differ by at most one.
pub fn kfold_partition(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, TrainError> {
    if k < 2 {
        return Err(TrainError::ConfigInvalid("k must be at least 2".into()));
    }
    if n < k {
        return Err(TrainError::TooFewSamples { needed: k, got: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        folds.push(idx[at..at + size].to_vec());
        at += size;
    }
    Ok(folds)
}

/// Seeded 50/50 split of anomaly indices into (fine-tuning, evaluation).
pub fn split_anomalies(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_a5a5));
    let eval = idx.split_off(n / 2);
    (idx, eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KfoldConfig {
    pub k: usize,
    pub seed: u64,
    pub arch: ArchConfig,
    pub sample_cfg: SampleConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    /// Validation AUC at the kept epoch.
    pub auc: f64,
    pub best_epoch: usize,
    pub f1: BTreeMap<OpPoint, f64>,
    pub thresholds: ThresholdSet,
    pub pretrain_loss: Vec<f64>,
    pub finetune_loss: Vec<f64>,
}

fn pick(rows: &[Vec<f32>], idx: &[usize]) -> Vec<Vec<f32>> {
    idx.iter().map(|&i| rows[i].clone()).collect()
}

/// Calibration scores of the fine-tuned model on benign training rows.
pub fn calibrate_on(model: &ModelState, benign: &[Vec<f32>]) -> Result<ThresholdSet, TrainError> {
    let scores: Vec<f64> = model.score_batch(benign)?.iter().map(|s| s.0).collect();
    Ok(calibrate(&scores)?)
}

/// Train and evaluate one fold; `on_epoch` sees every epoch log as it lands.
fn run_fold(
    fold: usize,
    train_benign: &[Vec<f32>],
    tune_anomalies: &[Vec<f32>],
    val: Validation<'_>,
    cfg: &KfoldConfig,
    on_epoch: &mut dyn FnMut(usize, &EpochLog),
) -> Result<FoldReport, TrainError> {
    let fold_seed = cfg.seed.wrapping_add(1_000_003 * fold as u64);
    let mut model = ModelState::build_rescnn(cfg.sample_cfg, cfg.arch.clone(), fold_seed)?;
    let pre = PretrainConfig {
        seed: cfg.pretrain.seed ^ fold_seed,
        ..cfg.pretrain.clone()
    };
    let pre_logs = pretrain(&mut model, train_benign, &pre)?;
    pre_logs.iter().for_each(|l| on_epoch(fold, l));

    let mut rows = train_benign.to_vec();
    let mut labels = vec![Label::Benign; rows.len()];
    rows.extend_from_slice(tune_anomalies);
    labels.resize(rows.len(), Label::Anomalous);
    let ft = FinetuneConfig {
        seed: cfg.finetune.seed ^ fold_seed,
        ..cfg.finetune.clone()
    };
    let outcome = finetune(&mut model, &rows, &labels, Some(val), &ft)?;
    outcome.logs.iter().for_each(|l| on_epoch(fold, l));

    let thresholds = calibrate_on(&model, train_benign)?;
    let scores: Vec<f64> = model.score_batch(val.rows)?.iter().map(|s| s.0).collect();
    let auc = eval::auc(&scores, val.labels)?;
    let f1 = OpPoint::ALL
        .iter()
        .map(|&op| Ok((op, eval::prf(&scores, val.labels, thresholds.get(op))?.f1)))
        .collect::<Result<_, EvalError>>()?;
    Ok(FoldReport {
        fold,
        auc,
        best_epoch: outcome.best_epoch,
        f1,
        thresholds,
        pretrain_loss: pre_logs.iter().map(|l| l.loss).collect(),
        finetune_loss: outcome.logs.iter().map(|l| l.loss).collect(),
    })
}

/// k-fold experiment: each fold pretrains and fine-tunes a fresh model on
/// the other k−1 benign folds (plus the fine-tuning half of the anomalies)
/// and is evaluated on its held-out benign fold plus the evaluation half.
pub fn kfold(
    benign: &[Vec<f32>],
    anomalies: &[Vec<f32>],
    cfg: &KfoldConfig,
    on_epoch: &mut dyn FnMut(usize, &EpochLog),
) -> Result<Vec<FoldReport>, TrainError> {
    let folds = kfold_partition(benign.len(), cfg.k, cfg.seed)?;
    if anomalies.len() < 2 {
        return Err(TrainError::TooFewSamples {
            needed: 2,
            got: anomalies.len(),
        });
    }
    let (tune_idx, eval_idx) = split_anomalies(anomalies.len(), cfg.seed);
    let tune = pick(anomalies, &tune_idx);
    let eval_anom = pick(anomalies, &eval_idx);
    let mut reports = Vec::with_capacity(cfg.k);
    for (f, held) in folds.iter().enumerate() {
        let train_idx: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        let train_benign = pick(benign, &train_idx);
        let mut val_rows = pick(benign, held);
        let mut val_labels = vec![Label::Benign; val_rows.len()];
        val_rows.extend(eval_anom.iter().cloned());
        val_labels.resize(val_rows.len(), Label::Anomalous);
        let val = Validation {
            rows: &val_rows,
            labels: &val_labels,
        };
        let report = run_fold(f, &train_benign, &tune, val, cfg, on_epoch)?;
        log::info!(
            "fold {f}: auc {:.6} (best epoch {})",
            report.auc,
            report.best_epoch
        );
        reports.push(report);
    }
    Ok(reports)
}

/// Mean ± std table over folds.
pub fn fold_summary(reports: &[FoldReport]) -> eval::Report {
    let mut r = eval::Report::default();
    r.push("auc", reports.iter().map(|f| f.auc).collect());
    for op in OpPoint::ALL {
        r.push(
            format!("f1@{op}"),
            reports.iter().map(|f| f.f1[&op]).collect(),
        );
    }
    r
}
