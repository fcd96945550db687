use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor, TensorMap};

/// Momentum buffers, PyTorch convention: `v ← μ·v + g; θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SgdState<T> {
    pub velocity: TensorMap<T>,
}

pub fn sgd_step<T: Scalar>(
    params: &mut TensorMap<T>,
    grads: &TensorMap<T>,
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
) {
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for (name, g) in grads {
        let Some(p) = params.get_mut(name) else {
            continue;
        };
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.dims()));
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = mu * *vv + gv;
            *pv -= lr * *vv;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: TensorMap<T>,
    pub v: TensorMap<T>,
}

/// Adam with bias correction.
pub fn adam_step<T: Scalar>(
    params: &mut TensorMap<T>,
    grads: &TensorMap<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: AdamConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one, eps) = (T::one(), T::of(cfg.eps));
    let step_size = T::of(lr / c1);
    let c2_sqrt = T::of(c2.sqrt());
    for (name, g) in grads {
        let Some(p) = params.get_mut(name) else {
            continue;
        };
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.dims()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.dims()));
        for (((pv, mv), vv), &gv) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            *pv -= step_size * *mv / (vv.sqrt() / c2_sqrt + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f32) -> TensorMap<f32> {
        let mut m = TensorMap::new();
        m.insert("w".into(), Tensor::new(vec![1], vec![v]).unwrap());
        m
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = single(0.0);
        sgd_step(&mut p, &single(1.0), &mut SgdState::default(), 0.1, 0.0);
        assert!((p["w"].data()[0] + 0.1).abs() < 1e-7);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = single(0.0);
        let mut st = SgdState::default();
        sgd_step(&mut p, &single(1.0), &mut st, 0.1, 0.9);
        sgd_step(&mut p, &single(1.0), &mut st, 0.1, 0.9);
        // second velocity = 0.9 + 1
        assert!((p["w"].data()[0] + 0.1 + 0.19).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        for g in [1e-3f32, 0.5, -7.0, 250.0] {
            let mut p = single(1.0);
            adam_step(
                &mut p,
                &single(g),
                &mut AdamState::default(),
                0.01,
                AdamConfig::default(),
            );
            let moved = (p["w"].data()[0] - 1.0).abs() as f64;
            // closed form: lr * |g| / (|g| + eps)
            let expect = 0.01 * g.abs() as f64 / (g.abs() as f64 + 1e-8);
            assert!((moved - expect).abs() < 1e-6, "g={g}: {moved} vs {expect}");
        }
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut p = single(0.3);
            let mut st = AdamState::default();
            for i in 0..10 {
                adam_step(
                    &mut p,
                    &single(i as f32 - 4.5),
                    &mut st,
                    1e-3,
                    AdamConfig::default(),
                );
            }
            p
        };
        assert_eq!(run(), run());
    }
}
