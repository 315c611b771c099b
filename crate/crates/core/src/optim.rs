//! Adam and Nesterov-momentum SGD with layer-masked updates, plus learning
//! rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamStore, SparseGrad};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    NesterovSgd { momentum: f64, weight_decay: f64 },
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn nesterov_sgd() -> Self {
        OptimizerConfig::NesterovSgd {
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
            OptimizerConfig::NesterovSgd {
                momentum,
                weight_decay,
            } => (0.0..1.0).contains(&momentum) && weight_decay >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer hyperparameters {self:?}"
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    HalveEvery { base_lr: f64, period: usize },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Constant { lr } if lr > 0.0 && lr.is_finite() => Ok(()),
            LrSchedule::HalveEvery { base_lr, period }
                if base_lr > 0.0 && base_lr.is_finite() && period > 0 =>
            {
                Ok(())
            }
            _ => Err(Error::Config(format!(
                "invalid learning-rate schedule {self:?}"
            ))),
        }
    }
}

/// Learning rate for a 0-based epoch.
pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> f64 {
    match *schedule {
        LrSchedule::Constant { lr } => lr,
        LrSchedule::HalveEvery { base_lr, period } => {
            let halvings = (epoch / period).min(i32::MAX as usize) as i32;
            base_lr * 0.5f64.powi(halvings)
        }
    }
}

/// Optimizer buffers for all `p` parameters.
///
/// Only the layers present in a step's gradient are touched. Adam keeps one
/// step counter per layer so a frozen layer's bias correction does not drift.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    config: OptimizerConfig,
    /// Adam first moment, or the SGD momentum buffer.
    m: Vec<T>,
    /// Adam second moment; empty for SGD.
    v: Vec<T>,
    steps: Vec<u64>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig, params: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let p = params.len();
        let v = match config {
            OptimizerConfig::Adam { .. } => vec![T::zero(); p],
            OptimizerConfig::NesterovSgd { .. } => Vec::new(),
        };
        Ok(Self {
            config,
            m: vec![T::zero(); p],
            v,
            steps: vec![0; params.num_layers()],
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Number of updates applied to a (1-based) layer so far.
    pub fn layer_steps(&self, layer: usize) -> Option<u64> {
        layer
            .checked_sub(1)
            .and_then(|i| self.steps.get(i))
            .copied()
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grad: &SparseGrad<T>,
        lr: f64,
    ) -> Result<()> {
        if grad.p != params.len() || self.m.len() != params.len() {
            return Err(Error::dim("optimizer step", &[grad.p], &[params.len()]));
        }
        for g in &grad.layers {
            let seg = params.segment(g.layer)?;
            if g.offset != seg.offset || g.values.len() != seg.len {
                return Err(Error::dim(
                    "optimizer step (layer segment)",
                    &[g.offset, g.values.len()],
                    &[seg.offset, seg.len],
                ));
            }
        }
        let theta = params.theta_mut();
        for g in &grad.layers {
            let range = g.offset..g.offset + g.values.len();
            let t = &mut self.steps[g.layer - 1];
            *t += 1;
            match self.config {
                OptimizerConfig::Adam { beta1, beta2, eps } => adam_update(
                    &mut theta[range.clone()],
                    &mut self.m[range.clone()],
                    &mut self.v[range],
                    &g.values,
                    lr,
                    (beta1, beta2, eps),
                    *t,
                ),
                OptimizerConfig::NesterovSgd {
                    momentum,
                    weight_decay,
                } => nesterov_update(
                    &mut theta[range.clone()],
                    &mut self.m[range],
                    &g.values,
                    lr,
                    momentum,
                    weight_decay,
                ),
            }
        }
        Ok(())
    }
}

fn adam_update<T: Scalar>(
    theta: &mut [T],
    m: &mut [T],
    v: &mut [T],
    g: &[T],
    lr: f64,
    (beta1, beta2, eps): (f64, f64, f64),
    t: u64,
) {
    let t = t.min(i32::MAX as u64) as i32;
    let c1 = T::from_f64_lossy(1.0 - beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - beta2.powi(t));
    let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
    let (lr, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(eps));
    let one = T::one();
    for i in 0..theta.len() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

fn nesterov_update<T: Scalar>(
    theta: &mut [T],
    buf: &mut [T],
    g: &[T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (lr, mu, wd) = (
        T::from_f64_lossy(lr),
        T::from_f64_lossy(momentum),
        T::from_f64_lossy(weight_decay),
    );
    for i in 0..theta.len() {
        let gi = g[i] + wd * theta[i];
        buf[i] = mu * buf[i] + gi;
        theta[i] = theta[i] - lr * (gi + mu * buf[i]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerGrad, Network};

    fn scalar_net() -> Network {
        Network::relu_net(1, 1, 1, 1).unwrap()
    }

    fn grad_for(params: &ParamStore<f64>, layer: usize, values: Vec<f64>) -> SparseGrad<f64> {
        let seg = params.segment(layer).unwrap();
        SparseGrad {
            p: params.len(),
            layers: vec![LayerGrad {
                layer,
                offset: seg.offset,
                values,
            }],
        }
    }

    #[test]
    fn schedule_values() {
        let s = LrSchedule::HalveEvery {
            base_lr: 0.01,
            period: 30,
        };
        assert_eq!(lr_at(&s, 0), 0.01);
        assert_eq!(lr_at(&s, 29), 0.01);
        assert_eq!(lr_at(&s, 30), 0.005);
        assert_eq!(lr_at(&s, 59), 0.005);
        assert_eq!(lr_at(&s, 60), 0.0025);
        let c = LrSchedule::Constant { lr: 0.1 };
        assert_eq!(lr_at(&c, 0), 0.1);
        assert_eq!(lr_at(&c, 1000), 0.1);
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        assert!(LrSchedule::HalveEvery {
            base_lr: 0.1,
            period: 0
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig::Adam {
            beta1: 1.0,
            beta2: 0.999,
            eps: 1e-8
        }
        .validate()
        .is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let net = scalar_net();
        let mut params = ParamStore::<f64>::zeros(&net);
        let mut opt = OptimizerState::new(OptimizerConfig::adam(), &params).unwrap();
        let g = grad_for(&params, 2, vec![0.0, 1.0]);
        opt.step(&mut params, &g, 0.1).unwrap();
        let top = params.layer(2).unwrap();
        assert_eq!(top[0], 0.0);
        assert!((top[1] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let net = scalar_net();
        let mut params = ParamStore::new(&net, vec![0.5, -0.25, 1.5, 2.0]).unwrap();
        let before = params.snapshot();
        let mut opt = OptimizerState::new(OptimizerConfig::adam(), &params).unwrap();
        let g = grad_for(&params, 1, vec![0.0, 0.0]);
        opt.step(&mut params, &g, 0.1).unwrap();
        assert_eq!(params.theta(), before.as_slice());
    }

    #[test]
    fn nesterov_closed_form_step() {
        let net = scalar_net();
        let mut params = ParamStore::new(&net, vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let cfg = OptimizerConfig::NesterovSgd {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut opt = OptimizerState::new(cfg, &params).unwrap();
        let g = grad_for(&params, 2, vec![0.0, 1.0]);
        opt.step(&mut params, &g, 0.1).unwrap();
        assert!((params.theta()[3] - 0.81).abs() < 1e-12);
    }

    #[test]
    fn plain_sgd_without_momentum_or_decay() {
        let net = scalar_net();
        let mut params = ParamStore::new(&net, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cfg = OptimizerConfig::NesterovSgd {
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut opt = OptimizerState::new(cfg, &params).unwrap();
        let g = grad_for(&params, 1, vec![0.5, -1.0]);
        opt.step(&mut params, &g, 0.2).unwrap();
        assert_eq!(params.theta(), &[0.9, 2.2, 3.0, 4.0]);
    }

    #[test]
    fn weight_decay_shifts_gradient() {
        let net = scalar_net();
        let theta = vec![0.0, 0.0, 0.0, 3.0];
        let cfg = |wd| OptimizerConfig::NesterovSgd {
            momentum: 0.0,
            weight_decay: wd,
        };
        let mut a = ParamStore::new(&net, theta.clone()).unwrap();
        let mut b = ParamStore::new(&net, theta).unwrap();
        let mut oa = OptimizerState::new(cfg(0.0005), &a).unwrap();
        let mut ob = OptimizerState::new(cfg(0.0), &b).unwrap();
        let ga = grad_for(&a, 2, vec![0.0, 1.0]);
        let gb = grad_for(&b, 2, vec![0.0, 1.0 + 0.0005 * 3.0]);
        oa.step(&mut a, &ga, 1.0).unwrap();
        ob.step(&mut b, &gb, 1.0).unwrap();
        assert_eq!(a.theta(), b.theta());
    }

    #[test]
    fn frozen_layer_step_counter_does_not_advance() {
        let net = scalar_net();
        let mut params = ParamStore::<f64>::zeros(&net);
        let mut opt = OptimizerState::new(OptimizerConfig::adam(), &params).unwrap();
        let g = grad_for(&params, 2, vec![1.0, 1.0]);
        opt.step(&mut params, &g, 0.1).unwrap();
        opt.step(&mut params, &g, 0.1).unwrap();
        assert_eq!(opt.layer_steps(1), Some(0));
        assert_eq!(opt.layer_steps(2), Some(2));
    }

    #[test]
    fn mismatched_gradient_rejected() {
        let net = scalar_net();
        let mut params = ParamStore::<f64>::zeros(&net);
        let mut opt = OptimizerState::new(OptimizerConfig::adam(), &params).unwrap();
        let bad = SparseGrad {
            p: params.len(),
            layers: vec![LayerGrad {
                layer: 2,
                offset: 0,
                values: vec![1.0],
            }],
        };
        assert!(matches!(
            opt.step(&mut params, &bad, 0.1),
            Err(Error::Dimension { .. })
        ));
        let short = SparseGrad::<f64> {
            p: 3,
            layers: vec![],
        };
        assert!(opt.step(&mut params, &short, 0.1).is_err());
    }
}
