//! Central finite-difference verification of [`backward`](super::backward).

use super::exec::{backward, forward, Gradients, Mode, Tape};
use super::graph::GraphSpec;
use super::tensor::{Tensor, TensorMap};
use super::NnError;

/// Maps a graph output to `(loss, dloss/doutput)`.
pub type LossFn<'a> = dyn Fn(&Tensor<f64>) -> (f64, Tensor<f64>) + 'a;

/// Gradients below this magnitude are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate (`input[i]` for the input).
    pub worst: String,
    /// Analytic and numeric derivative at `worst`.
    pub worst_pair: (f64, f64),
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU; finite differences
    /// are invalid across the kink so they are not compared.
    pub skipped_kinks: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn eval_loss(
    graph: &GraphSpec,
    params: &TensorMap<f64>,
    buffers: &TensorMap<f64>,
    input: &Tensor<f64>,
    loss_fn: &LossFn,
) -> Result<(f64, Tape<f64>), NnError> {
    let mut scratch = buffers.clone();
    let (out, tape) = forward(graph, params, &mut scratch, input, Mode::Train)?;
    Ok((loss_fn(&out).0, tape))
}

/// Training-mode gradients of `loss_fn ∘ graph`.
pub fn analytic_gradients(
    graph: &GraphSpec,
    params: &TensorMap<f64>,
    buffers: &TensorMap<f64>,
    input: &Tensor<f64>,
    loss_fn: &LossFn,
) -> Result<Gradients<f64>, NnError> {
    let mut scratch = buffers.clone();
    let (out, tape) = forward(graph, params, &mut scratch, input, Mode::Train)?;
    let (_, upstream) = loss_fn(&out);
    backward(graph, params, &tape, &upstream)
}

/// Compare `grad_check`-style against externally supplied gradients.
pub fn check_against(
    graph: &GraphSpec,
    params: &TensorMap<f64>,
    buffers: &TensorMap<f64>,
    input: &Tensor<f64>,
    loss_fn: &LossFn,
    eps: f64,
    analytic: &Gradients<f64>,
) -> Result<GradCheckReport, NnError> {
    let (_, base_tape) = eval_loss(graph, params, buffers, input, loss_fn)?;
    let base_pattern = base_tape.relu_pattern();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        worst_pair: (0.0, 0.0),
        checked: 0,
        skipped_kinks: 0,
    };

    let probe = |report: &mut GradCheckReport,
                 label: String,
                 analytic: f64,
                 eval: &mut dyn FnMut(f64) -> Result<(f64, Tape<f64>), NnError>|
     -> Result<(), NnError> {
        let (plus, tp) = eval(eps)?;
        let (minus, tm) = eval(-eps)?;
        if tp.relu_pattern() != base_pattern || tm.relu_pattern() != base_pattern {
            report.skipped_kinks += 1;
            return Ok(());
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = rel_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = label;
            report.worst_pair = (analytic, numeric);
        }
        Ok(())
    };

    let mut work = params.clone();
    for (name, tensor) in params {
        let grad = analytic
            .params
            .get(name)
            .ok_or_else(|| NnError::MissingTensor(name.clone()))?;
        for i in 0..tensor.len() {
            let base = tensor.data()[i];
            let mut eval = |delta: f64| {
                work.get_mut(name).expect("cloned map").data_mut()[i] = base + delta;
                let r = eval_loss(graph, &work, buffers, input, loss_fn);
                work.get_mut(name).expect("cloned map").data_mut()[i] = base;
                r
            };
            probe(
                &mut report,
                format!("{name}[{i}]"),
                grad.data()[i],
                &mut eval,
            )?;
        }
    }

    let mut x = input.clone();
    for i in 0..input.len() {
        let base = input.data()[i];
        let mut eval = |delta: f64| {
            x.data_mut()[i] = base + delta;
            let r = eval_loss(graph, params, buffers, &x, loss_fn);
            x.data_mut()[i] = base;
            r
        };
        probe(
            &mut report,
            format!("input[{i}]"),
            analytic.input.data()[i],
            &mut eval,
        )?;
    }
    Ok(report)
}

/// Largest relative disagreement between [`backward`] and
/// `(L(θ+eps) − L(θ−eps)) / (2·eps)` over every parameter scalar and every
/// input scalar. Runs in `f64`.
pub fn grad_check(
    graph: &GraphSpec,
    params: &TensorMap<f64>,
    buffers: &TensorMap<f64>,
    input: &Tensor<f64>,
    loss_fn: &LossFn,
    eps: f64,
) -> Result<GradCheckReport, NnError> {
    let analytic = analytic_gradients(graph, params, buffers, input, loss_fn)?;
    check_against(graph, params, buffers, input, loss_fn, eps, &analytic)
}
