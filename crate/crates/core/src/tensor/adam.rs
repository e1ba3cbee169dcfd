use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled: applied as `p *= 1 - lr * weight_decay` after the moment step.
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 4e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        AdamState {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update over every tensor that holds a gradient.
/// Tensors without a gradient are left untouched. Gradients are cleared.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Length {
            what: "adam state",
            expected: state.m.len(),
            got: params.len(),
        });
    }
    for (p, m) in params.iter().zip(&state.m) {
        if p.len() != m.len() {
            return Err(Error::Length {
                what: "adam moment",
                expected: m.len(),
                got: p.len(),
            });
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - c.lr * c.weight_decay;
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let Some(g) = p.grad.take() else {
            continue;
        };
        for i in 0..p.data.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p.data[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            if c.weight_decay != 0.0 {
                p.data[i] *= decay;
            }
        }
    }
    Ok(())
}

/// `target ← momentum·target + (1 − momentum)·source`, elementwise.
pub fn ema_blend(target: &mut [Tensor], source: &[Tensor], momentum: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Invalid(format!("momentum {momentum} outside [0, 1]")));
    }
    if target.len() != source.len() {
        return Err(Error::Length {
            what: "ema tensors",
            expected: target.len(),
            got: source.len(),
        });
    }
    for (t, s) in target.iter().zip(source) {
        if t.shape != s.shape {
            return Err(Error::shape("ema_blend", &t.shape, &s.shape));
        }
    }
    for (t, s) in target.iter_mut().zip(source) {
        for (a, &b) in t.data.iter_mut().zip(&s.data) {
            *a = momentum * *a + (1.0 - momentum) * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Tensor {
        Tensor::param(vec![1], vec![v])
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![Tensor::param(vec![3], vec![1.0, -2.0, 0.5])];
        let before = p[0].data.clone();
        let mut st = AdamState::new(
            AdamConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &p,
        );
        p[0].grad = Some(vec![0.0; 3]);
        adam_step(&mut p, &mut st).unwrap();
        assert_eq!(p[0].data, before);
        assert!(p[0].grad.is_none());
    }

    #[test]
    fn first_step_matches_closed_form() {
        // After one step the bias-corrected moments equal g and g², so the
        // update is lr·g/(|g| + eps).
        let cfg = AdamConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        for g in [0.3f32, -1.7, 5e-3] {
            let mut p = vec![scalar(1.0)];
            let mut st = AdamState::new(cfg, &p);
            p[0].grad = Some(vec![g]);
            adam_step(&mut p, &mut st).unwrap();
            let m = (1.0 - 0.9) * g / (1.0 - 0.9f64 as f32);
            let v = (1.0 - 0.999) * g * g / (1.0 - 0.999f32);
            let expect = 1.0 - 0.01 * m / (v.sqrt() + 1e-8);
            assert!((p[0].data[0] - expect).abs() < 1e-7);
            assert!((p[0].data[0] - (1.0 - 0.01 * g.signum())).abs() < 1e-5);
        }
    }

    #[test]
    fn decoupled_decay_applied_after_update() {
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut p = vec![scalar(2.0)];
        let mut st = AdamState::new(cfg, &p);
        p[0].grad = Some(vec![0.0]);
        adam_step(&mut p, &mut st).unwrap();
        assert!((p[0].data[0] - 2.0 * 0.95).abs() < 1e-6);
    }

    #[test]
    fn scalar_descent_converges() {
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![scalar(0.0)];
        let mut st = AdamState::new(cfg, &p);
        for _ in 0..100 {
            let x = p[0].data[0];
            p[0].grad = Some(vec![2.0 * (x - 2.0)]);
            adam_step(&mut p, &mut st).unwrap();
        }
        assert!((p[0].data[0] - 2.0).abs() < 0.05, "{}", p[0].data[0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![scalar(0.0)];
        let mut st = AdamState::new(AdamConfig::default(), &[Tensor::param(vec![2], vec![0.0; 2])]);
        assert!(adam_step(&mut p, &mut st).is_err());
    }

    #[test]
    fn ema_endpoints() {
        let src = vec![scalar(4.0)];
        let mut t = vec![scalar(2.0)];
        ema_blend(&mut t, &src, 1.0).unwrap();
        assert_eq!(t[0].data, vec![2.0]);
        ema_blend(&mut t, &src, 0.5).unwrap();
        assert_eq!(t[0].data, vec![3.0]);
        ema_blend(&mut t, &src, 0.0).unwrap();
        assert_eq!(t[0].data, vec![4.0]);
        let bad = vec![Tensor::param(vec![2], vec![0.0; 2])];
        assert!(ema_blend(&mut t, &bad, 0.5).is_err());
    }
}
