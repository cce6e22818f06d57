//! Adam and the warm-up learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            config,
        }
    }
}

/// One bias-corrected Adam update. Increments `state.step` by one.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.m.len()],
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let mut m = state.m[i].to_vec();
        let mut v = state.v[i].to_vec();
        let mut w = p.to_vec();
        for j in 0..w.len() {
            let gj = g.data()[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            w[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
        let shape = p.shape().to_vec();
        state.m[i] = Tensor::from_parts(shape.clone(), m);
        state.v[i] = Tensor::from_parts(shape.clone(), v);
        *p = Tensor::from_parts(shape, w);
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.map(|x| x * s);
        }
    }
    norm
}

/// Linear warm-up to `peak_lr`, then inverse-square-root decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub peak_lr: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            warmup_steps: 400,
            peak_lr: 5e-4,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.warmup_steps.max(1) as f64;
        let s = step as f64;
        if s <= w {
            self.peak_lr * s / w
        } else {
            self.peak_lr * (w / s).sqrt()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_t(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    /// Scalar Adam recurrence written out independently of `adam_step`.
    fn reference_adam(mut x: f64, gs: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in gs.iter().enumerate() {
            let t = (t + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powf(t))) / ((v / (1.0 - b2.powf(t))).sqrt() + eps);
        }
        x
    }

    fn cfg() -> AdamConfig {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut params = vec![scalar_t(1.5)];
        let mut state = AdamState::new(&params, cfg());
        adam_step(&mut params, &[scalar_t(0.0)], &mut state, 0.1).unwrap();
        assert_eq!(params[0].data()[0], 1.5);
        assert_eq!(state.m[0].data()[0], 0.0);
        assert_eq!(state.step, 1);

        state.m[0] = scalar_t(0.3);
        state.v[0] = scalar_t(0.2);
        for _ in 0..5 {
            let (m0, v0) = (state.m[0].data()[0], state.v[0].data()[0]);
            adam_step(&mut params, &[scalar_t(0.0)], &mut state, 0.0).unwrap();
            assert!(state.m[0].data()[0] < m0 && state.v[0].data()[0] < v0);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = vec![scalar_t(0.0)];
        let mut state = AdamState::new(&params, cfg());
        adam_step(&mut params, &[scalar_t(1.0)], &mut state, 0.1).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = 0.1 / (1 + 1e-8)
        assert!((params[0].data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn two_steps_match_closed_form_recurrence() {
        let mut params = vec![scalar_t(0.7)];
        let mut state = AdamState::new(&params, cfg());
        for _ in 0..2 {
            adam_step(&mut params, &[scalar_t(0.25)], &mut state, 0.05).unwrap();
        }
        let expected = reference_adam(0.7, &[0.25, 0.25], 0.05, 0.9, 0.999, 1e-8);
        assert!((params[0].data()[0] - expected).abs() < 1e-15);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn zero_lr_is_identity() {
        let p = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let mut params = vec![p.clone()];
        let mut state = AdamState::new(&params, AdamConfig::default());
        let g = Tensor::new(vec![3], vec![0.5, 0.1, -9.0]).unwrap();
        adam_step(&mut params, &[g], &mut state, 0.0).unwrap();
        assert_eq!(params[0], p);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = vec![scalar_t(0.0)];
        let mut state = AdamState::new(&params, cfg());
        let g = Tensor::zeros(&[2]);
        assert!(adam_step(&mut params, &[g], &mut state, 0.1).is_err());
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            warmup_steps: 100,
            peak_lr: 3e-4,
        };
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(100), 3e-4);
        assert!((s.lr_at(400) - 1.5e-4).abs() < 1e-18);
        let mut prev = 0.0;
        for t in 0..=100 {
            assert!(s.lr_at(t) >= prev);
            prev = s.lr_at(t);
        }
        let d = LrSchedule::default();
        assert!((1e-4..=5e-4).contains(&d.lr_at(d.warmup_steps)));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    }
}
