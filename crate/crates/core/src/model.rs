//! The residual 1-D CNN encoder, its contrastive projection head, and
//! distance-to-center anomaly scoring.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, GraphSpec, LayerSpec, NnError, Shortcut, Tensor, TensorMap};
use crate::prep::SampleConfig;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid model configuration: {0}")]
    ConfigInvalid(String),
    #[error("model has no Deep SAD center; fine-tune it first")]
    CenterMissing,
    #[error("empty batch")]
    EmptyBatch,
}

/// Encoder/head dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub block_channels: Vec<usize>,
    pub embedding_dim: usize,
    pub projection_hidden: usize,
    pub projection_dim: usize,
}

impl ArchConfig {
    pub fn standard() -> Self {
        Self {
            stem_channels: 32,
            stem_kernel: 7,
            block_channels: vec![32, 64, 128],
            embedding_dim: 128,
            projection_hidden: 128,
            projection_dim: 64,
        }
    }

    pub fn tiny() -> Self {
        Self {
            stem_channels: 8,
            stem_kernel: 7,
            block_channels: vec![8, 16, 32],
            embedding_dim: 32,
            projection_hidden: 32,
            projection_dim: 16,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.stem_channels,
            self.embedding_dim,
            self.projection_hidden,
            self.projection_dim,
        ];
        if dims.contains(&0) || self.block_channels.contains(&0) {
            return Err(ModelError::ConfigInvalid(
                "all widths must be positive".into(),
            ));
        }
        if self.block_channels.is_empty() {
            return Err(ModelError::ConfigInvalid(
                "need at least one residual block".into(),
            ));
        }
        if self.stem_kernel % 2 == 0 {
            return Err(ModelError::ConfigInvalid("stem kernel must be odd".into()));
        }
        Ok(())
    }
}

impl FromStr for ArchConfig {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" | "default" => Ok(Self::standard()),
            "tiny" => Ok(Self::tiny()),
            other => Err(ModelError::ConfigInvalid(format!(
                "unknown architecture {other:?} (expected standard or tiny)"
            ))),
        }
    }
}

/// Encoder graph over `[batch, 1, n·l]` inputs.
pub fn encoder_graph(arch: &ArchConfig) -> GraphSpec {
    let mut layers = vec![
        LayerSpec::conv_no_bias(
            "enc.stem.conv",
            1,
            arch.stem_channels,
            arch.stem_kernel,
            arch.stem_kernel / 2,
        ),
        LayerSpec::batch_norm("enc.stem.bn", arch.stem_channels),
        LayerSpec::Relu,
    ];
    let mut in_ch = arch.stem_channels;
    for (i, &out_ch) in arch.block_channels.iter().enumerate() {
        let p = format!("enc.block{i}");
        let shortcut = if in_ch == out_ch {
            Shortcut::Identity
        } else {
            Shortcut::Conv1x1 {
                name: format!("{p}.short"),
                in_ch,
                out_ch,
            }
        };
        layers.push(LayerSpec::Residual {
            name: p.clone(),
            body: vec![
                LayerSpec::conv_no_bias(&format!("{p}.conv1"), in_ch, out_ch, 5, 2),
                LayerSpec::batch_norm(&format!("{p}.bn1"), out_ch),
                LayerSpec::Relu,
                LayerSpec::conv_no_bias(&format!("{p}.conv2"), out_ch, out_ch, 3, 1),
                LayerSpec::batch_norm(&format!("{p}.bn2"), out_ch),
            ],
            shortcut,
        });
        layers.push(LayerSpec::Relu);
        in_ch = out_ch;
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::dense("enc.fc", in_ch, arch.embedding_dim));
    GraphSpec::new(layers)
}

/// Projection head used only by contrastive pretraining.
pub fn head_graph(arch: &ArchConfig) -> GraphSpec {
    GraphSpec::new(vec![
        LayerSpec::dense("head.fc1", arch.embedding_dim, arch.projection_hidden),
        LayerSpec::Relu,
        LayerSpec::dense("head.fc2", arch.projection_hidden, arch.projection_dim),
    ])
}

/// Non-negative anomaly score: squared distance to the center.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct AnomalyScore(pub f64);

impl fmt::Display for AnomalyScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub arch: ArchConfig,
    pub sample_cfg: SampleConfig,
    pub encoder: GraphSpec,
    pub head: GraphSpec,
    /// Encoder (`enc.*`) and head (`head.*`) parameters.
    pub params: TensorMap<f32>,
    /// Batch-norm running statistics.
    pub buffers: TensorMap<f32>,
    pub center: Option<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
struct SpecHeader {
    arch: ArchConfig,
    sample_cfg: SampleConfig,
    encoder: GraphSpec,
    head: GraphSpec,
}

const EMBED_CHUNK: usize = 64;

/// Squared Euclidean distance, accumulated in `f64`.
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

impl ModelState {
    /// He-uniform initialization from `seed`.
    pub fn build_rescnn(
        sample_cfg: SampleConfig,
        arch: ArchConfig,
        seed: u64,
    ) -> Result<Self, ModelError> {
        sample_cfg
            .validate()
            .map_err(|e| ModelError::ConfigInvalid(e.to_string()))?;
        arch.validate()?;
        let encoder = encoder_graph(&arch);
        let head = head_graph(&arch);
        encoder.validate(&[1, sample_cfg.input_len()])?;
        head.validate(&[arch.embedding_dim])?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut params, mut buffers) = nn::init_params::<f32>(&encoder, &mut rng);
        let (hp, hb) = nn::init_params::<f32>(&head, &mut rng);
        params.extend(hp);
        buffers.extend(hb);
        Ok(Self {
            arch,
            sample_cfg,
            encoder,
            head,
            params,
            buffers,
            center: None,
        })
    }

    pub fn input_len(&self) -> usize {
        self.sample_cfg.input_len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim
    }

    /// Stack rows into a `[B, 1, n·l]` tensor.
    pub fn batch_tensor<R: AsRef<[f32]>>(&self, rows: &[R]) -> Result<Tensor<f32>, ModelError> {
        if rows.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let len = self.input_len();
        let mut data = Vec::with_capacity(rows.len() * len);
        for r in rows {
            let r = r.as_ref();
            if r.len() != len {
                return Err(NnError::ShapeMismatch {
                    context: "sample vector".into(),
                    expected: format!("{len} values"),
                    got: vec![r.len()],
                }
                .into());
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor::new(vec![rows.len(), 1, len], data)?)
    }

    /// Eval-mode encoder output, one row per sample.
    pub fn embed<R: AsRef<[f32]> + Sync>(&self, rows: &[R]) -> Result<Vec<Vec<f32>>, ModelError> {
        if rows.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let dim = self.embedding_dim();
        let chunks: Vec<Vec<Vec<f32>>> = rows
            .par_chunks(EMBED_CHUNK)
            .map(|chunk| {
                let x = self.batch_tensor(chunk)?;
                let out = nn::infer(&self.encoder, &self.params, &self.buffers, &x)?;
                Ok(out.data().chunks_exact(dim).map(<[f32]>::to_vec).collect())
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    pub fn center(&self) -> Result<&[f32], ModelError> {
        self.center.as_deref().ok_or(ModelError::CenterMissing)
    }

    pub fn set_center(&mut self, c: Vec<f32>) -> Result<(), ModelError> {
        if c.len() != self.embedding_dim() {
            return Err(ModelError::ConfigInvalid(format!(
                "center has {} dims, embedding has {}",
                c.len(),
                self.embedding_dim()
            )));
        }
        if c.iter().all(|&v| v == 0.0) || c.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::ConfigInvalid(
                "center must be finite and nonzero".into(),
            ));
        }
        self.center = Some(c);
        Ok(())
    }

    pub fn score(&self, row: &[f32]) -> Result<AnomalyScore, ModelError> {
        Ok(self.score_batch(&[row])?[0])
    }

    pub fn score_batch<R: AsRef<[f32]> + Sync>(
        &self,
        rows: &[R],
    ) -> Result<Vec<AnomalyScore>, ModelError> {
        let c = self.center()?;
        Ok(self
            .embed(rows)?
            .iter()
            .map(|e| AnomalyScore(squared_distance(e, c)))
            .collect())
    }

    /// Encoder-only parameters.
    pub fn encoder_params(&self) -> TensorMap<f32> {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with("enc."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn to_checkpoint(&self, optimizer: Option<nn::OptimizerState>) -> nn::Checkpoint {
        let header = SpecHeader {
            arch: self.arch.clone(),
            sample_cfg: self.sample_cfg,
            encoder: self.encoder.clone(),
            head: self.head.clone(),
        };
        let mut tensors = self.params.clone();
        tensors.extend(self.buffers.iter().map(|(k, v)| (k.clone(), v.clone())));
        nn::Checkpoint {
            spec_json: serde_json::to_string(&header).expect("spec header serializes"),
            tensors,
            optimizer,
            center: self.center.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: nn::Checkpoint) -> Result<Self, ModelError> {
        let header: SpecHeader = serde_json::from_str(&ckpt.spec_json)
            .map_err(|e| ModelError::ConfigInvalid(format!("checkpoint spec: {e}")))?;
        let mut tensors = ckpt.tensors;
        let mut take = |specs: Vec<nn::ParamSpec>| -> Result<TensorMap<f32>, ModelError> {
            specs
                .into_iter()
                .map(|s| {
                    let t = tensors
                        .remove(&s.name)
                        .ok_or_else(|| NnError::MissingTensor(s.name.clone()))?;
                    if t.dims() != s.dims.as_slice() {
                        return Err(ModelError::ConfigInvalid(format!(
                            "{}: dims {:?}",
                            s.name,
                            t.dims()
                        )));
                    }
                    Ok((s.name, t))
                })
                .collect()
        };
        let mut params = take(header.encoder.param_specs())?;
        params.extend(take(header.head.param_specs())?);
        let mut buffers = take(header.encoder.buffer_specs())?;
        buffers.extend(take(header.head.buffer_specs())?);
        if let Some(extra) = tensors.keys().next() {
            return Err(ModelError::ConfigInvalid(format!(
                "unexpected tensor {extra}"
            )));
        }
        let mut model = Self {
            arch: header.arch,
            sample_cfg: header.sample_cfg,
            encoder: header.encoder,
            head: header.head,
            params,
            buffers,
            center: None,
        };
        if let Some(c) = ckpt.center {
            model.set_center(c)?;
        }
        Ok(model)
    }

    pub fn save<W: Write>(&self, w: W) -> Result<(), ModelError> {
        Ok(nn::write_checkpoint(w, &self.to_checkpoint(None))?)
    }

    pub fn load<R: Read>(r: R) -> Result<Self, ModelError> {
        Self::from_checkpoint(nn::read_checkpoint(r)?)
    }
}
