use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor, TensorMap};
use super::NnError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shortcut {
    Identity,
    /// 1×1 convolution (with bias) projecting the block input.
    Conv1x1 {
        name: String,
        in_ch: usize,
        out_ch: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv1d {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        /// Off for convolutions feeding batch norm, which cancels any bias.
        bias: bool,
    },
    BatchNorm1d {
        name: String,
        ch: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    /// `body(x) + shortcut(x)`.
    Residual {
        name: String,
        body: Vec<LayerSpec>,
        shortcut: Shortcut,
    },
    GlobalAvgPool,
    Dense {
        name: String,
        inp: usize,
        out: usize,
    },
}

impl LayerSpec {
    pub fn conv(name: &str, in_ch: usize, out_ch: usize, kernel: usize, pad: usize) -> Self {
        LayerSpec::Conv1d {
            name: name.to_string(),
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            pad,
            bias: true,
        }
    }

    /// Bias-free convolution, for use directly before batch norm.
    pub fn conv_no_bias(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        pad: usize,
    ) -> Self {
        LayerSpec::Conv1d {
            name: name.to_string(),
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            pad,
            bias: false,
        }
    }

    pub fn batch_norm(name: &str, ch: usize) -> Self {
        LayerSpec::BatchNorm1d {
            name: name.to_string(),
            ch,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn dense(name: &str, inp: usize, out: usize) -> Self {
        LayerSpec::Dense {
            name: name.to_string(),
            inp,
            out,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamInit {
    /// Uniform on `±sqrt(6 / fan_in)`.
    HeUniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: ParamInit,
}

/// Activation shape with the batch axis stripped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Seq { ch: usize, len: usize },
    Flat { features: usize },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GraphSpec {
    pub layers: Vec<LayerSpec>,
}

fn conv_params(
    out: &mut Vec<ParamSpec>,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    bias: bool,
) {
    out.push(ParamSpec {
        name: format!("{name}.weight"),
        dims: vec![out_ch, in_ch, kernel],
        init: ParamInit::HeUniform {
            fan_in: in_ch * kernel,
        },
    });
    if bias {
        out.push(ParamSpec {
            name: format!("{name}.bias"),
            dims: vec![out_ch],
            init: ParamInit::Zeros,
        });
    }
}

fn collect_params(layers: &[LayerSpec], params: &mut Vec<ParamSpec>, buffers: &mut Vec<ParamSpec>) {
    for layer in layers {
        match layer {
            LayerSpec::Conv1d {
                name,
                in_ch,
                out_ch,
                kernel,
                bias,
                ..
            } => conv_params(params, name, *in_ch, *out_ch, *kernel, *bias),
            LayerSpec::BatchNorm1d { name, ch, .. } => {
                for (suffix, init) in [("gamma", ParamInit::Ones), ("beta", ParamInit::Zeros)] {
                    params.push(ParamSpec {
                        name: format!("{name}.{suffix}"),
                        dims: vec![*ch],
                        init,
                    });
                }
                for (suffix, init) in [
                    ("running_mean", ParamInit::Zeros),
                    ("running_var", ParamInit::Ones),
                ] {
                    buffers.push(ParamSpec {
                        name: format!("{name}.{suffix}"),
                        dims: vec![*ch],
                        init,
                    });
                }
            }
            LayerSpec::Residual { body, shortcut, .. } => {
                collect_params(body, params, buffers);
                if let Shortcut::Conv1x1 {
                    name,
                    in_ch,
                    out_ch,
                } = shortcut
                {
                    conv_params(params, name, *in_ch, *out_ch, 1, true);
                }
            }
            LayerSpec::Dense { name, inp, out } => {
                params.push(ParamSpec {
                    name: format!("{name}.weight"),
                    dims: vec![*out, *inp],
                    init: ParamInit::HeUniform { fan_in: *inp },
                });
                params.push(ParamSpec {
                    name: format!("{name}.bias"),
                    dims: vec![*out],
                    init: ParamInit::Zeros,
                });
            }
            LayerSpec::Relu | LayerSpec::GlobalAvgPool => {}
        }
    }
}

fn shape_error(context: &str, expected: String, got: Shape) -> NnError {
    let got = match got {
        Shape::Seq { ch, len } => vec![ch, len],
        Shape::Flat { features } => vec![features],
    };
    NnError::ShapeMismatch {
        context: context.to_string(),
        expected,
        got,
    }
}

fn infer_shape(layers: &[LayerSpec], mut shape: Shape) -> Result<Shape, NnError> {
    for layer in layers {
        shape = match (layer, shape) {
            (
                LayerSpec::Conv1d {
                    name,
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    pad,
                    ..
                },
                Shape::Seq { ch, len },
            ) => {
                if ch != *in_ch {
                    return Err(shape_error(name, format!("{in_ch} channels"), shape));
                }
                if *stride == 0 || *kernel == 0 || len + 2 * pad < *kernel {
                    return Err(NnError::InvalidGraph(format!(
                        "{name}: kernel/stride/pad do not fit length {len}"
                    )));
                }
                Shape::Seq {
                    ch: *out_ch,
                    len: (len + 2 * pad - kernel) / stride + 1,
                }
            }
            (LayerSpec::BatchNorm1d { name, ch, .. }, s) => {
                let have = match s {
                    Shape::Seq { ch, .. } => ch,
                    Shape::Flat { features } => features,
                };
                if have != *ch {
                    return Err(shape_error(name, format!("{ch} channels"), s));
                }
                s
            }
            (LayerSpec::Relu, s) => s,
            (
                LayerSpec::Residual {
                    name,
                    body,
                    shortcut,
                },
                s,
            ) => {
                let body_out = infer_shape(body, s)?;
                let short_out = match shortcut {
                    Shortcut::Identity => s,
                    Shortcut::Conv1x1 {
                        name,
                        in_ch,
                        out_ch,
                    } => infer_shape(&[LayerSpec::conv(name, *in_ch, *out_ch, 1, 0)], s)?,
                };
                if body_out != short_out {
                    return Err(NnError::InvalidGraph(format!(
                        "{name}: body output {body_out:?} does not match shortcut output {short_out:?}"
                    )));
                }
                body_out
            }
            (LayerSpec::GlobalAvgPool, Shape::Seq { ch, .. }) => Shape::Flat { features: ch },
            (LayerSpec::Dense { name, inp, out }, Shape::Flat { features }) => {
                if features != *inp {
                    return Err(shape_error(name, format!("{inp} features"), shape));
                }
                Shape::Flat { features: *out }
            }
            (LayerSpec::Conv1d { name, .. }, s) | (LayerSpec::Dense { name, .. }, s) => {
                return Err(shape_error(name, "a compatible rank".into(), s));
            }
            (LayerSpec::GlobalAvgPool, s) => {
                return Err(shape_error("global_avg_pool", "[ch, len]".into(), s))
            }
        };
    }
    Ok(shape)
}

impl GraphSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        Self { layers }
    }

    /// Trainable parameters in declaration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (mut p, mut b) = (Vec::new(), Vec::new());
        collect_params(&self.layers, &mut p, &mut b);
        p
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffer_specs(&self) -> Vec<ParamSpec> {
        let (mut p, mut b) = (Vec::new(), Vec::new());
        collect_params(&self.layers, &mut p, &mut b);
        b
    }

    /// Per-sample output dims for per-sample input dims (`[ch, len]` or `[features]`).
    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        let shape = match *input {
            [ch, len] => Shape::Seq { ch, len },
            [features] => Shape::Flat { features },
            _ => {
                return Err(NnError::ShapeMismatch {
                    context: "graph input".into(),
                    expected: "[ch, len] or [features]".into(),
                    got: input.to_vec(),
                })
            }
        };
        Ok(match infer_shape(&self.layers, shape)? {
            Shape::Seq { ch, len } => vec![ch, len],
            Shape::Flat { features } => vec![features],
        })
    }

    /// Checks unique names and shape composition for the given input.
    pub fn validate(&self, input: &[usize]) -> Result<(), NnError> {
        let mut seen = BTreeSet::new();
        for p in self.param_specs().iter().chain(self.buffer_specs().iter()) {
            if !seen.insert(p.name.clone()) {
                return Err(NnError::InvalidGraph(format!(
                    "duplicate tensor name {}",
                    p.name
                )));
            }
        }
        self.output_dims(input).map(|_| ())
    }
}

/// Initialize parameters and buffers; draws happen in declaration order.
pub fn init_params<T: Scalar>(
    graph: &GraphSpec,
    rng: &mut ChaCha8Rng,
) -> (TensorMap<T>, TensorMap<T>) {
    let make = |spec: &ParamSpec, rng: &mut ChaCha8Rng| {
        let count: usize = spec.dims.iter().product();
        let data = match spec.init {
            ParamInit::Zeros => vec![T::zero(); count],
            ParamInit::Ones => vec![T::one(); count],
            ParamInit::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..count)
                    .map(|_| T::of(rng.random_range(-bound..bound)))
                    .collect()
            }
        };
        (
            spec.name.clone(),
            Tensor::new(spec.dims.clone(), data).expect("spec dims"),
        )
    };
    let params = graph.param_specs().iter().map(|s| make(s, rng)).collect();
    let buffers = graph.buffer_specs().iter().map(|s| make(s, rng)).collect();
    (params, buffers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block() -> GraphSpec {
        GraphSpec::new(vec![
            LayerSpec::conv("stem", 1, 4, 3, 1),
            LayerSpec::Residual {
                name: "b1".into(),
                body: vec![
                    LayerSpec::conv("b1.c1", 4, 8, 3, 1),
                    LayerSpec::batch_norm("b1.bn1", 8),
                ],
                shortcut: Shortcut::Conv1x1 {
                    name: "b1.short".into(),
                    in_ch: 4,
                    out_ch: 8,
                },
            },
            LayerSpec::GlobalAvgPool,
            LayerSpec::dense("fc", 8, 2),
        ])
    }

    #[test]
    fn shapes_compose() {
        assert_eq!(block().output_dims(&[1, 10]).unwrap(), vec![2]);
        assert!(block().validate(&[2, 10]).is_err());
    }

    #[test]
    fn names_are_unique() {
        let mut g = block();
        g.layers.push(LayerSpec::dense("fc", 2, 2));
        assert!(matches!(
            g.validate(&[1, 10]),
            Err(NnError::InvalidGraph(_))
        ));
    }

    #[test]
    fn declares_params_and_buffers() {
        let g = block();
        let names: Vec<_> = g.param_specs().into_iter().map(|p| p.name).collect();
        assert!(names.contains(&"b1.short.weight".to_string()));
        assert_eq!(g.buffer_specs().len(), 2);
    }

    #[test]
    fn mismatched_residual_rejected() {
        let g = GraphSpec::new(vec![LayerSpec::Residual {
            name: "r".into(),
            body: vec![LayerSpec::conv("c", 1, 2, 1, 0)],
            shortcut: Shortcut::Identity,
        }]);
        assert!(g.validate(&[1, 5]).is_err());
    }
}
