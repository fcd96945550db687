//! Finite-difference fixtures shared by the gradient and acceptance suites.
#![allow(dead_code)]

use ldpi::model::{encoder_graph, head_graph, ArchConfig};
use ldpi::nn::{
    grad_check, init_params, GradCheckReport, GraphSpec, LayerSpec, Shortcut, Tensor, TensorMap,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `sum(w·y) + ½·sum(y²)` with fixed random `w`. A plain sum would have
/// zero gradient through batch norm.
pub fn projection_loss(len: usize, seed: u64) -> impl Fn(&Tensor<f64>) -> (f64, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    move |y: &Tensor<f64>| {
        assert_eq!(y.len(), w.len());
        let loss = y
            .data()
            .iter()
            .zip(&w)
            .map(|(&v, &wi)| wi * v + 0.5 * v * v)
            .sum();
        let grad = y.data().iter().zip(&w).map(|(&v, &wi)| wi + v).collect();
        (loss, Tensor::new(y.dims().to_vec(), grad).unwrap())
    }
}

pub fn random_input(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    // keep values away from zero so a lone ReLU never sits on its kink
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

pub struct Case {
    pub graph: GraphSpec,
    pub params: TensorMap<f64>,
    pub buffers: TensorMap<f64>,
    pub input: Tensor<f64>,
    pub out_len: usize,
}

pub fn case(layers: Vec<LayerSpec>, input_dims: &[usize], seed: u64) -> Case {
    let graph = GraphSpec::new(layers);
    graph.validate(&input_dims[1..]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut params, buffers) = init_params::<f64>(&graph, &mut rng);
    // nonzero biases and non-unit affine terms exercise every path
    for (name, t) in params.iter_mut() {
        if !name.ends_with(".weight") {
            for v in t.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }
    let out: usize = graph
        .output_dims(&input_dims[1..])
        .unwrap()
        .iter()
        .product();
    Case {
        graph,
        params,
        buffers,
        input: random_input(input_dims, seed ^ 0x5eed),
        out_len: out * input_dims[0],
    }
}

pub fn check(c: &Case, eps: f64) -> GradCheckReport {
    let loss = projection_loss(c.out_len, 17);
    grad_check(&c.graph, &c.params, &c.buffers, &c.input, &loss, eps).unwrap()
}

pub fn residual(shortcut: Shortcut, in_ch: usize, out_ch: usize) -> Vec<LayerSpec> {
    vec![LayerSpec::Residual {
        name: "r".into(),
        body: vec![
            LayerSpec::conv_no_bias("r.conv1", in_ch, out_ch, 5, 2),
            LayerSpec::batch_norm("r.bn1", out_ch),
            LayerSpec::Relu,
            LayerSpec::conv_no_bias("r.conv2", out_ch, out_ch, 3, 1),
            LayerSpec::batch_norm("r.bn2", out_ch),
        ],
        shortcut,
    }]
}

pub fn tiny_network() -> Vec<LayerSpec> {
    let arch = ArchConfig::tiny();
    let mut layers = encoder_graph(&arch).layers;
    layers.extend(head_graph(&arch).layers);
    layers
}
