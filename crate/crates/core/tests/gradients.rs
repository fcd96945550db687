mod support;

use ldpi::nn::{
    analytic_gradients, backward, cast_map, check_against, forward, LayerSpec, Mode, Shortcut,
    TensorMap,
};
use support::{case, check, projection_loss, residual, tiny_network, Case};

fn assert_layer(c: Case, bound: f64) {
    let r = check(&c, 1e-5);
    assert!(r.checked > 0);
    assert!(r.skipped_kinks * 20 <= r.checked, "{r:?}");
    assert!(r.max_rel_error < bound, "{r:?}");
}

#[test]
fn conv1d_matches_finite_differences() {
    assert_layer(
        case(vec![LayerSpec::conv("c", 2, 3, 3, 1)], &[2, 2, 7], 1),
        1e-6,
    );
    assert_layer(
        case(
            vec![LayerSpec::Conv1d {
                name: "s".into(),
                in_ch: 2,
                out_ch: 2,
                kernel: 4,
                stride: 2,
                pad: 1,
                bias: true,
            }],
            &[2, 2, 9],
            2,
        ),
        1e-6,
    );
}

#[test]
fn batch_norm_matches_finite_differences() {
    assert_layer(
        case(vec![LayerSpec::batch_norm("bn", 3)], &[4, 3, 5], 3),
        1e-6,
    );
}

#[test]
fn relu_matches_finite_differences() {
    assert_layer(case(vec![LayerSpec::Relu], &[3, 2, 5], 4), 1e-6);
}

#[test]
fn global_avg_pool_matches_finite_differences() {
    assert_layer(case(vec![LayerSpec::GlobalAvgPool], &[3, 4, 6], 5), 1e-6);
}

#[test]
fn dense_matches_finite_differences() {
    let c = case(vec![LayerSpec::dense("d", 5, 4)], &[3, 5], 6);
    let r = check(&c, 1e-5);
    assert_eq!(r.checked, 5 * 4 + 4 + 15);
    assert!(r.max_rel_error < 1e-7, "{r:?}");
}

#[test]
fn residual_identity_matches_finite_differences() {
    assert_layer(
        case(residual(Shortcut::Identity, 3, 3), &[3, 3, 8], 7),
        1e-6,
    );
}

#[test]
fn residual_projection_matches_finite_differences() {
    let s = Shortcut::Conv1x1 {
        name: "r.short".into(),
        in_ch: 2,
        out_ch: 4,
    };
    assert_layer(case(residual(s, 2, 4), &[3, 2, 8], 8), 1e-6);
}

#[test]
fn composed_tiny_network_matches_finite_differences() {
    // batch 8 keeps batch-norm curvature low enough for eps = 1e-4; smaller
    // eps is dominated by rounding in the loss
    let c = case(tiny_network(), &[8, 1, 24], 9);
    let r = check(&c, 1e-4);
    assert!(r.skipped_kinks * 20 <= r.checked, "{r:?}");
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn corrupted_gradient_is_detected() {
    let c = case(residual(Shortcut::Identity, 2, 2), &[3, 2, 6], 10);
    let loss = projection_loss(c.out_len, 17);
    let mut grads = analytic_gradients(&c.graph, &c.params, &c.buffers, &c.input, &loss).unwrap();
    let w = grads.params.get_mut("r.conv1.weight").unwrap();
    w.data_mut()[3] = w.data()[3] * 1.5 + 0.1;
    let r = check_against(
        &c.graph, &c.params, &c.buffers, &c.input, &loss, 1e-5, &grads,
    )
    .unwrap();
    assert!(r.max_rel_error > 1e-2, "{r:?}");
    assert_eq!(r.worst, "r.conv1.weight[3]");
}

/// Single-precision backward against double-precision finite differences.
#[test]
fn single_precision_gradients_within_tolerance() {
    for c in [
        case(vec![LayerSpec::dense("d", 6, 3)], &[4, 6], 11),
        case(
            vec![LayerSpec::conv("c", 2, 3, 3, 1), LayerSpec::Relu],
            &[2, 2, 7],
            12,
        ),
    ] {
        let p32: TensorMap<f32> = cast_map(&c.params);
        let x32 = c.input.cast::<f32>();
        let mut b32: TensorMap<f32> = cast_map(&c.buffers);
        let (y, tape) = forward(&c.graph, &p32, &mut b32, &x32, Mode::Train).unwrap();
        let loss = projection_loss(c.out_len, 17);
        let (_, up) = loss(&y.cast::<f64>());
        let g32 = backward(&c.graph, &p32, &tape, &up.cast::<f32>()).unwrap();
        let grads = ldpi::nn::Gradients {
            params: cast_map(&g32.params),
            input: g32.input.cast::<f64>(),
        };
        // evaluate the oracle at exactly the single-precision point
        let p64: TensorMap<f64> = cast_map(&p32);
        let x64 = x32.cast::<f64>();
        let r = check_against(&c.graph, &p64, &c.buffers, &x64, &loss, 1e-5, &grads).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
