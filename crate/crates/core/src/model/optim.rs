use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs at which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Rescales the whole gradient when its global L2 norm exceeds this.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.025,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.0004,
            epochs: 140,
            decay_epochs: vec![110, 120],
            decay_factor: 0.1,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite()
            && self.decay_factor > 0.0
            && self.decay_factor.is_finite()
            && self.clip_norm.is_none_or(|c| c > 0.0 && c.is_finite());
        if !ok {
            return Err(Error::Argument(format!("invalid optimizer settings: {self:?}")));
        }
        Ok(())
    }

    /// Step-decayed learning rate for `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.decay_factor.powi(drops as i32)
    }
}

/// Learning rate under the default schedule.
pub fn lr_schedule(epoch: usize) -> f64 {
    OptimConfig::default().lr_at(epoch)
}

/// Factor that brings the global gradient norm down to `max_norm`, or 1.
pub fn clip_factor(grads: &[Tensor], max_norm: Option<f64>) -> f64 {
    let Some(max_norm) = max_norm else { return 1.0 };
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

/// In-place SGD with (Nesterov) momentum and decoupled weight decay:
/// `v ← μv + g`, `p ← p·(1 − lr·wd) − lr·(g + μv)` (or `lr·v` without Nesterov).
/// The gradient is clipped first when `clip_norm` is set.
pub fn sgd_update(
    params: &mut [Tensor],
    velocity: &mut [Tensor],
    grads: &[Tensor],
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    if params.len() != velocity.len() || params.len() != grads.len() {
        return Err(Error::dim(
            "sgd_update",
            &[params.len(), velocity.len()],
            &[grads.len()],
        ));
    }
    let mu = cfg.momentum;
    let shrink = 1.0 - lr * cfg.weight_decay;
    let clip = clip_factor(grads, cfg.clip_norm);
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::dim("sgd_update", p.shape(), g.shape()));
        }
        for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            let gi = gi * clip;
            *vi = mu * *vi + gi;
            let step = if cfg.nesterov { gi + mu * *vi } else { *vi };
            *pi = *pi * shrink - lr * step;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule() {
        assert_eq!(lr_schedule(0), 0.025);
        assert_eq!(lr_schedule(109), 0.025);
        assert!((lr_schedule(110) - 0.0025).abs() < 1e-15);
        assert!((lr_schedule(119) - 0.0025).abs() < 1e-15);
        assert!((lr_schedule(125) - 0.00025).abs() < 1e-15);
        assert!((lr_schedule(139) - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn nesterov_on_a_quadratic_matches_hand_recursion() {
        // f(p) = 0.5·a·p², g = a·p
        let (a, lr, mu) = (3.0, 0.1, 0.9);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            clip_norm: None,
            ..OptimConfig::default()
        };
        let mut p = [Tensor::scalar(1.0)];
        let mut v = [Tensor::scalar(0.0)];
        // step 1: g=3, v=3, p = 1 − 0.1·(3 + 2.7) = 0.43
        // step 2: g=1.29, v=2.7+1.29=3.99, p = 0.43 − 0.1·(1.29 + 3.591) = −0.0581
        let expected = [0.43, -0.0581];
        for want in expected {
            let g = [Tensor::scalar(a * p[0].data()[0])];
            sgd_update(&mut p, &mut v, &g, lr, &cfg).unwrap();
            assert!((p[0].data()[0] - want).abs() < 1e-12, "{} vs {want}", p[0].data()[0]);
        }
        assert!((v[0].data()[0] - 3.99).abs() < 1e-12);
        assert_eq!(mu, cfg.momentum);
    }

    #[test]
    fn decay_shrinks_unused_parameter_geometrically() {
        let cfg = OptimConfig::default();
        let mut p = [Tensor::scalar(2.0)];
        let mut v = [Tensor::scalar(0.0)];
        let g = [Tensor::scalar(0.0)];
        for step in 1..=3 {
            sgd_update(&mut p, &mut v, &g, 0.025, &cfg).unwrap();
            let want = 2.0 * (1.0 - 0.025 * 0.0004f64).powi(step);
            assert!((p[0].data()[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_rate_is_a_no_op_on_parameters() {
        let cfg = OptimConfig::default();
        let mut p = [Tensor::scalar(2.0)];
        let mut v = [Tensor::scalar(0.0)];
        sgd_update(&mut p, &mut v, &[Tensor::scalar(5.0)], 0.0, &cfg).unwrap();
        assert_eq!(p[0].data()[0], 2.0);
    }

    #[test]
    fn clipping_rescales_only_large_gradients() {
        let small = [Tensor::new(vec![2], vec![0.3, 0.4]).unwrap()];
        assert_eq!(clip_factor(&small, Some(1.0)), 1.0);
        let large = [
            Tensor::new(vec![1], vec![3.0]).unwrap(),
            Tensor::new(vec![1], vec![4.0]).unwrap(),
        ];
        assert!((clip_factor(&large, Some(1.0)) - 0.2).abs() < 1e-15);
        assert_eq!(clip_factor(&large, None), 1.0);

        let cfg = OptimConfig {
            weight_decay: 0.0,
            momentum: 0.0,
            clip_norm: Some(1.0),
            ..OptimConfig::default()
        };
        let mut p = [Tensor::scalar(0.0), Tensor::scalar(0.0)];
        let mut v = [Tensor::scalar(0.0), Tensor::scalar(0.0)];
        let g = [Tensor::scalar(3.0), Tensor::scalar(4.0)];
        sgd_update(&mut p, &mut v, &g, 1.0, &cfg).unwrap();
        assert!((p[0].data()[0] + 0.6).abs() < 1e-15 && (p[1].data()[0] + 0.8).abs() < 1e-15);
    }
}
