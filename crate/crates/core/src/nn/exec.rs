use super::graph::{GraphSpec, LayerSpec, Shortcut};
use super::kernels;
use super::tensor::{Scalar, Tensor, TensorMap};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics updated; tape recorded.
    Train,
    /// Running statistics; nothing recorded.
    Eval,
}

enum Node<T> {
    Conv {
        input: Tensor<T>,
    },
    BatchNorm(kernels::BnCache<T>),
    Relu {
        mask: Vec<bool>,
    },
    Residual {
        body: Vec<Node<T>>,
        shortcut: Option<Box<Node<T>>>,
    },
    Pool {
        len: usize,
    },
    Dense {
        input: Tensor<T>,
    },
}

/// Activations recorded by a training-mode forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    input_dims: Vec<usize>,
}

impl<T: Scalar> Tape<T> {
    fn empty(input_dims: Vec<usize>) -> Self {
        Self {
            nodes: Vec::new(),
            input_dims,
        }
    }

    pub fn is_recorded(&self) -> bool {
        !self.nodes.is_empty()
    }

    /// On/off pattern of every ReLU, in execution order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        fn walk<T: Scalar>(nodes: &[Node<T>], out: &mut Vec<bool>) {
            for node in nodes {
                match node {
                    Node::Relu { mask } => out.extend_from_slice(mask),
                    Node::Residual { body, shortcut } => {
                        walk(body, out);
                        if let Some(s) = shortcut {
                            walk(std::slice::from_ref(s.as_ref()), out);
                        }
                    }
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.nodes, &mut out);
        out
    }
}

pub struct Gradients<T> {
    pub params: TensorMap<T>,
    pub input: Tensor<T>,
}

enum Stats<'a, T> {
    Train(&'a mut TensorMap<T>),
    Eval(&'a TensorMap<T>),
}

fn get<'a, T>(map: &'a TensorMap<T>, name: &str) -> Result<&'a Tensor<T>, NnError> {
    map.get(name)
        .ok_or_else(|| NnError::MissingTensor(name.to_string()))
}

fn expect_rank<T: Scalar>(
    x: &Tensor<T>,
    rank: usize,
    axis1: usize,
    context: &str,
) -> Result<(), NnError> {
    if x.dims().len() != rank || x.dims()[1] != axis1 {
        let expected = if rank == 3 {
            format!("[batch, {axis1}, len]")
        } else {
            format!("[batch, {axis1}]")
        };
        return Err(NnError::ShapeMismatch {
            context: context.to_string(),
            expected,
            got: x.dims().to_vec(),
        });
    }
    Ok(())
}

fn conv_forward<T: Scalar>(
    name: &str,
    params: &TensorMap<T>,
    in_ch: usize,
    stride: usize,
    pad: usize,
    bias: bool,
    x: &Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    expect_rank(x, 3, in_ch, name)?;
    let w = get(params, &format!("{name}.weight"))?;
    let b = if bias {
        Some(get(params, &format!("{name}.bias"))?)
    } else {
        None
    };
    if x.dims()[2] + 2 * pad < w.dims()[2] {
        return Err(NnError::ShapeMismatch {
            context: name.to_string(),
            expected: format!("length >= {}", w.dims()[2] - 2 * pad),
            got: x.dims().to_vec(),
        });
    }
    Ok(kernels::conv1d_forward(x, w, b, stride, pad))
}

fn run<T: Scalar>(
    layers: &[LayerSpec],
    params: &TensorMap<T>,
    stats: &mut Stats<'_, T>,
    mut x: Tensor<T>,
    mut tape: Option<&mut Vec<Node<T>>>,
) -> Result<Tensor<T>, NnError> {
    for layer in layers {
        x = match layer {
            LayerSpec::Conv1d {
                name,
                in_ch,
                stride,
                pad,
                bias,
                ..
            } => {
                let y = conv_forward(name, params, *in_ch, *stride, *pad, *bias, &x)?;
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Node::Conv { input: x });
                }
                y
            }
            LayerSpec::BatchNorm1d {
                name,
                ch,
                eps,
                momentum,
            } => {
                if !(x.dims().len() == 2 || x.dims().len() == 3) || x.dims()[1] != *ch {
                    return Err(NnError::ShapeMismatch {
                        context: name.clone(),
                        expected: format!("[batch, {ch}, ...]"),
                        got: x.dims().to_vec(),
                    });
                }
                let gamma = get(params, &format!("{name}.gamma"))?;
                let beta = get(params, &format!("{name}.beta"))?;
                let mean_key = format!("{name}.running_mean");
                let var_key = format!("{name}.running_var");
                match stats {
                    Stats::Train(buffers) => {
                        let mut rm = buffers
                            .remove(&mean_key)
                            .ok_or_else(|| NnError::MissingTensor(mean_key.clone()))?;
                        let mut rv = buffers
                            .remove(&var_key)
                            .ok_or_else(|| NnError::MissingTensor(var_key.clone()))?;
                        let (y, cache) = kernels::batch_norm_train(
                            &x, gamma, beta, &mut rm, &mut rv, *eps, *momentum,
                        );
                        buffers.insert(mean_key, rm);
                        buffers.insert(var_key, rv);
                        if let Some(t) = tape.as_deref_mut() {
                            t.push(Node::BatchNorm(cache));
                        }
                        y
                    }
                    Stats::Eval(buffers) => {
                        let rm = get(buffers, &mean_key)?;
                        let rv = get(buffers, &var_key)?;
                        kernels::batch_norm_eval(&x, gamma, beta, rm, rv, *eps)
                    }
                }
            }
            LayerSpec::Relu => {
                let y = kernels::relu_forward(x);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Node::Relu {
                        mask: kernels::relu_mask(&y),
                    });
                }
                y
            }
            LayerSpec::Residual { body, shortcut, .. } => {
                let mut body_nodes = Vec::new();
                let mut short_nodes = Vec::new();
                let recording = tape.is_some();
                let branch = run(
                    body,
                    params,
                    stats,
                    x.clone(),
                    recording.then_some(&mut body_nodes),
                )?;
                let short = match shortcut {
                    Shortcut::Identity => x,
                    Shortcut::Conv1x1 {
                        name,
                        in_ch,
                        out_ch,
                    } => {
                        let conv = LayerSpec::conv(name, *in_ch, *out_ch, 1, 0);
                        run(
                            std::slice::from_ref(&conv),
                            params,
                            stats,
                            x,
                            recording.then_some(&mut short_nodes),
                        )?
                    }
                };
                if branch.dims() != short.dims() {
                    return Err(NnError::ShapeMismatch {
                        context: "residual add".into(),
                        expected: format!("{:?}", branch.dims()),
                        got: short.dims().to_vec(),
                    });
                }
                let mut y = branch;
                y.data_mut()
                    .iter_mut()
                    .zip(short.data())
                    .for_each(|(a, &b)| *a += b);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Node::Residual {
                        body: body_nodes,
                        shortcut: short_nodes.pop().map(Box::new),
                    });
                }
                y
            }
            LayerSpec::GlobalAvgPool => {
                if x.dims().len() != 3 {
                    return Err(NnError::ShapeMismatch {
                        context: "global_avg_pool".into(),
                        expected: "[batch, ch, len]".into(),
                        got: x.dims().to_vec(),
                    });
                }
                let y = kernels::gap_forward(&x);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Node::Pool { len: x.dims()[2] });
                }
                y
            }
            LayerSpec::Dense { name, inp, .. } => {
                expect_rank(&x, 2, *inp, name)?;
                let w = get(params, &format!("{name}.weight"))?;
                let b = get(params, &format!("{name}.bias"))?;
                let y = kernels::dense_forward(&x, w, b);
                if let Some(t) = tape.as_deref_mut() {
                    t.push(Node::Dense { input: x });
                }
                y
            }
        };
    }
    Ok(x)
}

/// Run `graph` on a batch. Train mode uses batch statistics, updates
/// `buffers` and records a tape; Eval mode leaves `buffers` untouched and
/// returns an empty tape.
pub fn forward<T: Scalar>(
    graph: &GraphSpec,
    params: &TensorMap<T>,
    buffers: &mut TensorMap<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Tape<T>), NnError> {
    match mode {
        Mode::Eval => Ok((
            infer(graph, params, buffers, input)?,
            Tape::empty(input.dims().to_vec()),
        )),
        Mode::Train => {
            let mut nodes = Vec::new();
            let out = run(
                &graph.layers,
                params,
                &mut Stats::Train(buffers),
                input.clone(),
                Some(&mut nodes),
            )?;
            Ok((
                out,
                Tape {
                    nodes,
                    input_dims: input.dims().to_vec(),
                },
            ))
        }
    }
}

/// Eval-mode forward over shared, read-only state.
pub fn infer<T: Scalar>(
    graph: &GraphSpec,
    params: &TensorMap<T>,
    buffers: &TensorMap<T>,
    input: &Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    run(
        &graph.layers,
        params,
        &mut Stats::Eval(buffers),
        input.clone(),
        None,
    )
}

fn accumulate<T: Scalar>(grads: &mut TensorMap<T>, name: String, g: Tensor<T>) {
    match grads.get_mut(&name) {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a += b),
        None => {
            grads.insert(name, g);
        }
    }
}

fn back<T: Scalar>(
    layers: &[LayerSpec],
    nodes: &[Node<T>],
    params: &TensorMap<T>,
    grads: &mut TensorMap<T>,
    mut g: Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    debug_assert_eq!(layers.len(), nodes.len());
    for (layer, node) in layers.iter().zip(nodes).rev() {
        g = match (layer, node) {
            (
                LayerSpec::Conv1d {
                    name,
                    stride,
                    pad,
                    bias,
                    ..
                },
                Node::Conv { input },
            ) => {
                let w = get(params, &format!("{name}.weight"))?;
                let (dx, dw, db) = kernels::conv1d_backward(input, w, &g, *stride, *pad);
                accumulate(grads, format!("{name}.weight"), dw);
                if *bias {
                    accumulate(grads, format!("{name}.bias"), db);
                }
                dx
            }
            (LayerSpec::BatchNorm1d { name, .. }, Node::BatchNorm(cache)) => {
                let gamma = get(params, &format!("{name}.gamma"))?;
                let (dx, dgamma, dbeta) = kernels::batch_norm_backward(&g, cache, gamma);
                accumulate(grads, format!("{name}.gamma"), dgamma);
                accumulate(grads, format!("{name}.beta"), dbeta);
                dx
            }
            (LayerSpec::Relu, Node::Relu { mask }) => kernels::relu_backward(mask, g),
            (
                LayerSpec::Residual { body, shortcut, .. },
                Node::Residual {
                    body: body_nodes,
                    shortcut: short_node,
                },
            ) => {
                let mut dx = back(body, body_nodes, params, grads, g.clone())?;
                let dshort = match (shortcut, short_node) {
                    (Shortcut::Identity, None) => g,
                    (
                        Shortcut::Conv1x1 {
                            name,
                            in_ch,
                            out_ch,
                        },
                        Some(node),
                    ) => {
                        let conv = LayerSpec::conv(name, *in_ch, *out_ch, 1, 0);
                        back(
                            std::slice::from_ref(&conv),
                            std::slice::from_ref(node.as_ref()),
                            params,
                            grads,
                            g,
                        )?
                    }
                    _ => {
                        return Err(NnError::InvalidGraph(
                            "tape does not match residual shortcut".into(),
                        ))
                    }
                };
                dx.data_mut()
                    .iter_mut()
                    .zip(dshort.data())
                    .for_each(|(a, &b)| *a += b);
                dx
            }
            (LayerSpec::GlobalAvgPool, Node::Pool { len }) => kernels::gap_backward(&g, *len),
            (LayerSpec::Dense { name, .. }, Node::Dense { input }) => {
                let w = get(params, &format!("{name}.weight"))?;
                let (dx, dw, db) = kernels::dense_backward(input, w, &g);
                accumulate(grads, format!("{name}.weight"), dw);
                accumulate(grads, format!("{name}.bias"), db);
                dx
            }
            _ => return Err(NnError::InvalidGraph("tape does not match graph".into())),
        };
    }
    Ok(g)
}

/// Reverse-mode gradients for every parameter of `graph` and for the input.
pub fn backward<T: Scalar>(
    graph: &GraphSpec,
    params: &TensorMap<T>,
    tape: &Tape<T>,
    upstream: &Tensor<T>,
) -> Result<Gradients<T>, NnError> {
    if tape.nodes.len() != graph.layers.len() {
        return Err(NnError::InvalidGraph(
            "backward needs the tape of a training-mode forward over this graph".into(),
        ));
    }
    let mut grads = TensorMap::new();
    let input = back(
        &graph.layers,
        &tape.nodes,
        params,
        &mut grads,
        upstream.clone(),
    )?;
    for spec in graph.param_specs() {
        grads
            .entry(spec.name)
            .or_insert_with(|| Tensor::zeros(&spec.dims));
    }
    let input = input.reshape(tape.input_dims.clone())?;
    Ok(Gradients {
        params: grads,
        input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_graph_is_identity() {
        let g = GraphSpec::default();
        let x = Tensor::new(vec![1, 3], vec![1.0f64, -2.0, 3.0]).unwrap();
        let mut buffers = TensorMap::new();
        let (y, tape) = forward(&g, &TensorMap::new(), &mut buffers, &x, Mode::Train).unwrap();
        assert_eq!(y, x);
        // loss = sum(x^2) -> upstream 2y
        let up = Tensor::new(vec![1, 3], y.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        let grads = backward(&g, &TensorMap::new(), &tape, &up).unwrap();
        assert_eq!(grads.input.data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn dense_forward_example() {
        let g = GraphSpec::new(vec![LayerSpec::dense("fc", 2, 1)]);
        let mut params = TensorMap::new();
        params.insert(
            "fc.weight".into(),
            Tensor::new(vec![1, 2], vec![1.0f32, 1.0]).unwrap(),
        );
        params.insert("fc.bias".into(), Tensor::zeros(&[1]));
        let x = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let (y, _) = forward(&g, &params, &mut TensorMap::new(), &x, Mode::Eval).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn identity_kernel_graph() {
        let g = GraphSpec::new(vec![LayerSpec::conv("c", 1, 1, 3, 1)]);
        let mut params = TensorMap::new();
        params.insert(
            "c.weight".into(),
            Tensor::new(vec![1, 1, 3], vec![0.0f32, 1.0, 0.0]).unwrap(),
        );
        params.insert("c.bias".into(), Tensor::zeros(&[1]));
        let x = Tensor::new(vec![2, 1, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(infer(&g, &params, &TensorMap::new(), &x).unwrap(), x);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let g = GraphSpec::new(vec![
            LayerSpec::conv("c", 1, 2, 3, 1),
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::dense("fc", 2, 3),
        ]);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let (params, mut buffers) = super::super::init_params::<f64>(&g, &mut rng);
        let x = Tensor::filled(&[2, 1, 6], 0.5);
        let (_, tape) = forward(&g, &params, &mut buffers, &x, Mode::Train).unwrap();
        let grads = backward(&g, &params, &tape, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(grads
            .params
            .values()
            .all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert_eq!(grads.params.len(), 4);
    }

    #[test]
    fn wrong_input_shape_is_reported() {
        let g = GraphSpec::new(vec![LayerSpec::dense("fc", 2, 1)]);
        let mut params = TensorMap::new();
        params.insert("fc.weight".into(), Tensor::<f32>::zeros(&[1, 2]));
        params.insert("fc.bias".into(), Tensor::zeros(&[1]));
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            infer(&g, &params, &TensorMap::new(), &x),
            Err(NnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn eval_mode_records_nothing_and_keeps_stats() {
        let g = GraphSpec::new(vec![LayerSpec::batch_norm("bn", 2)]);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let (params, mut buffers) = super::super::init_params::<f32>(&g, &mut rng);
        let before = buffers.clone();
        let x = Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let (_, tape) = forward(&g, &params, &mut buffers, &x, Mode::Eval).unwrap();
        assert!(!tape.is_recorded());
        assert_eq!(buffers, before);
        forward(&g, &params, &mut buffers, &x, Mode::Train).unwrap();
        assert_ne!(buffers, before);
    }
}
