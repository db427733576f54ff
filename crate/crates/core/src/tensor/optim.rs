use serde::{Deserialize, Serialize};

use super::{ParamSet, Real};
use crate::error::{contract, ensure, Result};

/// Linear ramp from zero to `base_lr` over `warmup_steps`, then constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
}

impl WarmupSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.base_lr;
        }
        self.base_lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1.2e-4, weight_decay: 1e-4, warmup_steps: 10_000, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn schedule(&self) -> WarmupSchedule {
        WarmupSchedule { base_lr: self.lr, warmup_steps: self.warmup_steps }
    }
}

/// Adam with decoupled weight decay, bound to one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    config: AdamConfig,
    set_id: u64,
    step: u64,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Real> Adam<S> {
    pub fn new(config: AdamConfig, params: &ParamSet<S>) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![S::zero(); t.len()]).collect();
        Self { config, set_id: params.id(), step: 0, first: zeros(), second: zeros() }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate the next call to [`Adam::step`] will use.
    pub fn current_lr(&self) -> f64 {
        self.config.schedule().lr_at(self.step + 1)
    }

    pub fn moments(&self) -> (&[Vec<S>], &[Vec<S>]) {
        (&self.first, &self.second)
    }

    /// Updates every trainable tensor of `params` from its gradient. Frozen
    /// tensors are skipped; gradients are left in place.
    pub fn step(&mut self, params: &mut ParamSet<S>) -> Result<()> {
        ensure!(params.id() == self.set_id, "optimizer stepped on a parameter set it was not built for");
        ensure!(params.len() == self.first.len(), "parameter set changed size after optimizer creation");
        for (i, t) in params.tensors().iter().enumerate() {
            ensure!(t.len() == self.first[i].len(), "moment buffer {i} does not match its parameter");
            if t.requires_grad() && t.grad().is_none() {
                return Err(contract!("trainable parameter {i} has no gradient"));
            }
        }
        let c = self.config;
        let lr = c.schedule().lr_at(self.step + 1);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (one_b1, one_b2) = (S::of(1.0 - c.beta1), S::of(1.0 - c.beta2));
        let step_size = S::of(lr / bc1);
        let bc2_sqrt = S::of(bc2.sqrt());
        let eps = S::of(c.eps);
        let decay = S::of(lr * c.weight_decay);
        for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
            if !tensor.requires_grad() {
                continue;
            }
            let grad = tensor.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                *p -= decay * *p;
                *p -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Euclidean norm of all gradients in the set (zero for missing buffers).
pub fn grad_norm<S: Real>(params: &ParamSet<S>) -> f64 {
    params
        .tensors()
        .iter()
        .filter_map(|t| t.grad())
        .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<S: Real>(params: &mut ParamSet<S>, max_norm: f64) -> f64 {
    let total = grad_norm(params);
    if total > max_norm && total > 0.0 {
        let factor = S::of(max_norm / total);
        for t in params.tensors_mut() {
            let Some(g) = t.grad().map(<[S]>::to_vec) else { continue };
            let scaled: Vec<S> = g.iter().map(|&v| v * factor - v).collect();
            t.accumulate_grad(&scaled).expect("same length");
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(values: &[f64]) -> ParamSet<f64> {
        let mut set = ParamSet::new();
        set.push("w", Tensor::new(&[values.len()], values.to_vec()).unwrap());
        set
    }

    #[test]
    fn warmup_is_linear_then_constant() {
        let s = AdamConfig::default().schedule();
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(5_000) - 0.6e-4).abs() < 1e-18);
        assert_eq!(s.lr_at(10_000), 1.2e-4);
        assert_eq!(s.lr_at(50_000), 1.2e-4);
        let none = WarmupSchedule { base_lr: 0.1, warmup_steps: 0 };
        assert_eq!(none.lr_at(0), 0.1);
    }

    #[test]
    fn first_step_uses_the_first_warmup_rate() {
        let mut set = one_param(&[1.0, -2.0]);
        let cfg = AdamConfig { lr: 0.5, warmup_steps: 5, weight_decay: 0.0, ..Default::default() };
        let mut opt = Adam::new(cfg, &set);
        assert_eq!(opt.current_lr(), 0.1);
        set.tensors_mut()[0].accumulate_grad(&[1.0, 1.0]).unwrap();
        opt.step(&mut set).unwrap();
        // The first bias-corrected Adam step moves each weight by lr * sign(g).
        let moved: Vec<f64> = set.tensors()[0].data().to_vec();
        assert!((moved[0] - 0.9).abs() < 1e-6 && (moved[1] + 2.1).abs() < 1e-6);
        assert_eq!(opt.step_count(), 1);
        assert_eq!(set.tensors()[0].grad().unwrap(), &[1.0, 1.0], "grads are left for the caller");
    }

    #[test]
    fn missing_grad_is_a_contract_error() {
        let mut set = one_param(&[1.0]);
        let mut opt = Adam::new(AdamConfig::default(), &set);
        assert!(opt.step(&mut set).is_err());
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut set = one_param(&[3.0, -4.0]);
        let cfg = AdamConfig { lr: 0.05, warmup_steps: 0, weight_decay: 0.0, ..Default::default() };
        let mut opt = Adam::new(cfg, &set);
        for _ in 0..500 {
            set.zero_grad();
            let w = set.tensors()[0].data().to_vec();
            let g: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
            set.tensors_mut()[0].accumulate_grad(&g).unwrap();
            opt.step(&mut set).unwrap();
        }
        assert!(set.tensors()[0].data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut set = one_param(&[0.0, 0.0]);
        set.tensors_mut()[0].accumulate_grad(&[3.0, 4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut set, 1.0), 5.0);
        assert!((grad_norm(&set) - 1.0).abs() < 1e-12);
    }
}
