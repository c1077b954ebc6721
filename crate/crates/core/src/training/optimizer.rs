//! Adaptive-moment optimizer with decoupled weight decay and a
//! warmup-cosine learning-rate schedule.
//!
//! Expert parameters take `expert_weight_decay`; norm affines, biases, and
//! embeddings (anything tagged no-decay) are excluded from decay entirely.

use serde::{Deserialize, Serialize};

use crate::backbone::{ParamEntry, ParamGroup};
use crate::error::{Error, Result};
use crate::tensor::Element;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub expert_weight_decay: f64,
}

impl OptimizerConfig {
    pub fn new(lr: f64, weight_decay: f64, expert_weight_decay: f64) -> Self {
        OptimizerConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            expert_weight_decay,
        }
    }
}

/// Cosine schedule with linear warmup; decays to zero at `total_steps`.
pub fn lr_at(cfg_lr: f64, step: usize, warmup: usize, total_steps: usize) -> f64 {
    if warmup > 0 && step < warmup {
        return cfg_lr * (step + 1) as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return cfg_lr;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    cfg_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Moment state; slot order follows the parameter store.
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl AdamW {
    pub fn new<E: Element>(cfg: OptimizerConfig, params: &[ParamEntry<E>]) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        AdamW { cfg, m, v, step: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One decoupled-decay update using each parameter's accumulated
    /// gradient (missing gradients are treated as zero). `lr` is the
    /// scheduled rate for this step.
    pub fn step<E: Element>(&mut self, params: &mut [ParamEntry<E>], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (pi, p) in params.iter_mut().enumerate() {
            if let Some(grad) = p.tensor.grad() {
                if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
                    return Err(Error::Diverged {
                        step: self.step,
                        detail: format!(
                            "non-finite gradient in {} (element {bad})",
                            p.name
                        ),
                    });
                }
            }
            let decay = if p.meta.no_decay {
                0.0
            } else if matches!(p.meta.group, ParamGroup::MoeExpert { .. }) {
                self.cfg.expert_weight_decay
            } else {
                self.cfg.weight_decay
            };
            let grad: Option<Vec<f64>> = p
                .tensor
                .grad()
                .map(|g| g.iter().map(|x| x.to_f64()).collect());
            let data = p.tensor.data_mut();
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let mut x = data[i].to_f64();
                x -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                x -= lr * decay * x;
                data[i] = E::from_f64(x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ParamMeta;
    use crate::tensor::Tensor;

    fn entry(name: &str, data: Vec<f64>, group: ParamGroup, no_decay: bool) -> ParamEntry<f64> {
        ParamEntry {
            name: name.into(),
            tensor: Tensor::new(vec![data.len()], data).unwrap(),
            meta: ParamMeta { group, no_decay },
        }
    }

    #[test]
    fn zero_grads_zero_decay_leave_params_unchanged() {
        let mut params = vec![entry("w", vec![1.0, -2.0, 3.0], ParamGroup::Head, false)];
        let mut opt = AdamW::new(OptimizerConfig::new(0.1, 0.0, 0.0), &params);
        opt.step(&mut params, 0.1).unwrap();
        assert_eq!(params[0].tensor.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn zero_grads_with_decay_shrink_by_closed_form() {
        let (lr, wd) = (0.05, 0.2);
        let mut params = vec![entry("w", vec![2.0], ParamGroup::Head, false)];
        let mut opt = AdamW::new(OptimizerConfig::new(lr, wd, 0.0), &params);
        opt.step(&mut params, lr).unwrap();
        opt.step(&mut params, lr).unwrap();
        let expect = 2.0 * (1.0 - lr * wd) * (1.0 - lr * wd);
        assert!((params[0].tensor.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        let lr = 0.01;
        let mut params = vec![entry("w", vec![1.0, 1.0], ParamGroup::Head, false)];
        params[0].tensor.accumulate_grad(&[0.5, -0.25]);
        let mut opt = AdamW::new(OptimizerConfig::new(lr, 0.0, 0.0), &params);
        opt.step(&mut params, lr).unwrap();
        let d = params[0].tensor.data();
        assert!((d[0] - (1.0 - lr)).abs() < 1e-6, "{d:?}");
        assert!((d[1] - (1.0 + lr)).abs() < 1e-6, "{d:?}");
    }

    #[test]
    fn expert_params_use_expert_decay_and_no_decay_is_respected() {
        let (lr, wd, ewd) = (0.1, 0.1, 0.4);
        let mut params = vec![
            entry("blocks.0.mlp.w", vec![1.0], ParamGroup::Block(0), false),
            entry(
                "blocks.0.experts.1.w",
                vec![1.0],
                ParamGroup::MoeExpert { block: 0, expert: 1 },
                false,
            ),
            entry("blocks.0.norm.g", vec![1.0], ParamGroup::Block(0), true),
        ];
        let mut opt = AdamW::new(OptimizerConfig::new(lr, wd, ewd), &params);
        opt.step(&mut params, lr).unwrap();
        assert!((params[0].tensor.data()[0] - (1.0 - lr * wd)).abs() < 1e-12);
        assert!((params[1].tensor.data()[0] - (1.0 - lr * ewd)).abs() < 1e-12);
        assert_eq!(params[2].tensor.data()[0], 1.0);
    }

    #[test]
    fn three_step_trajectory_matches_reference_recurrence() {
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let g = 0.7;
        let mut params = vec![entry("w", vec![0.3], ParamGroup::Head, false)];
        let mut opt = AdamW::new(
            OptimizerConfig {
                lr,
                beta1: b1,
                beta2: b2,
                eps,
                weight_decay: 0.0,
                expert_weight_decay: 0.0,
            },
            &params,
        );
        // independent recurrence
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.3f64);
        for t in 1..=3 {
            params[0].tensor.zero_grad();
            params[0].tensor.accumulate_grad(&[g]);
            opt.step(&mut params, lr).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            assert!(
                (params[0].tensor.data()[0] - x).abs() < 1e-9,
                "step {t}: {} vs {x}",
                params[0].tensor.data()[0]
            );
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut params = vec![entry("w", vec![1.0], ParamGroup::Head, false)];
        params[0].tensor.accumulate_grad(&[f64::NAN]);
        let mut opt = AdamW::new(OptimizerConfig::new(0.1, 0.0, 0.0), &params);
        assert!(matches!(
            opt.step(&mut params, 0.1),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn warmup_cosine_schedule_shape() {
        let (lr, warmup, total) = (1.0, 10, 110);
        assert!((lr_at(lr, 0, warmup, total) - 0.1).abs() < 1e-12);
        assert!((lr_at(lr, 9, warmup, total) - 1.0).abs() < 1e-12);
        assert!((lr_at(lr, 10, warmup, total) - 1.0).abs() < 1e-12);
        // midpoint of the cosine leg
        assert!((lr_at(lr, 60, warmup, total) - 0.5).abs() < 1e-12);
        assert!(lr_at(lr, 109, warmup, total) < 0.01);
        // monotone decreasing after warmup
        let mut prev = f64::INFINITY;
        for s in warmup..total {
            let v = lr_at(lr, s, warmup, total);
            assert!(v <= prev);
            prev = v;
        }
    }
}
