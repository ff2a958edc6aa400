//! AdamW with decoupled weight decay and the 1cycle learning-rate policy.

use serde::{Deserialize, Serialize};

use super::array::Tensor;
use super::params::ParamStore;
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state: first/second moments per parameter and a shared step count.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    moments: Vec<Option<Moments>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, moments: Vec::new(), step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Parameters with a `None` gradient are
    /// left untouched. Rejects the whole step if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        ensure!(grads.len() == params.len(), Dimension, "{} gradients for {} parameters", grads.len(), params.len());
        for (id, g) in params.ids().zip(grads) {
            if let Some(g) = g {
                ensure!(
                    g.shape() == params.get(id).shape(),
                    Dimension,
                    "gradient shape {:?} for parameter {} of shape {:?}",
                    g.shape(),
                    params.name(id),
                    params.get(id).shape()
                );
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
                }
            }
        }
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in params.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let p = params.get_mut(id).data_mut();
            let st = self.moments[id.0].get_or_insert_with(|| Moments { m: vec![0.0; p.len()], v: vec![0.0; p.len()] });
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                *pi -= lr * weight_decay * *pi;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl LrSchedule {
    pub fn one_cycle(max_lr: f64, total_steps: usize) -> Self {
        Self { max_lr, total_steps, warmup_fraction: 0.3, div_factor: 25.0, final_div_factor: 1e4 }
    }

    /// Step at which the rate peaks.
    pub fn peak_step(&self) -> usize {
        let last = self.total_steps.saturating_sub(1);
        ((self.warmup_fraction * last as f64).round() as usize).min(last)
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        onecycle_lr(step, self)
    }
}

fn cos_anneal(start: f64, end: f64, pct: f64) -> f64 {
    end + (start - end) / 2.0 * ((std::f64::consts::PI * pct).cos() + 1.0)
}

/// Cosine warm-up from `max_lr/div_factor` to `max_lr`, then cosine decay to
/// `max_lr/final_div_factor` at the last step.
pub fn onecycle_lr(step: usize, schedule: &LrSchedule) -> Result<f64> {
    ensure!(
        step < schedule.total_steps,
        Usage,
        "step {step} outside schedule of {} steps",
        schedule.total_steps
    );
    let peak = schedule.peak_step();
    let last = schedule.total_steps - 1;
    let start = schedule.max_lr / schedule.div_factor;
    let end = schedule.max_lr / schedule.final_div_factor;
    Ok(if step <= peak {
        if peak == 0 {
            schedule.max_lr
        } else {
            cos_anneal(start, schedule.max_lr, step as f64 / peak as f64)
        }
    } else {
        cos_anneal(schedule.max_lr, end, (step - peak) as f64 / (last - peak) as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64) -> (ParamStore, super::super::params::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(&[p]));
        (store, id)
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let (mut store, id) = single(0.37);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..3 {
            opt.step(&mut store, &[Some(Tensor::vector(&[0.0]))], 0.1).unwrap();
        }
        assert_eq!(store.get(id).data(), &[0.37]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut store, id) = single(1.0);
        let cfg = AdamWConfig { lr: 0.1, beta1: 0.0, beta2: 0.0, eps: 1e-8, weight_decay: 0.0 };
        let mut opt = AdamW::new(cfg);
        opt.step(&mut store, &[Some(Tensor::vector(&[1.0]))], 0.1).unwrap();
        assert!((store.get(id).data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_is_decoupled() {
        let (mut store, id) = single(1.0);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.1, ..Default::default() });
        opt.step(&mut store, &[Some(Tensor::vector(&[0.0]))], 0.1).unwrap();
        assert!((store.get(id).data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let (mut store, id) = single(1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut store, &[Some(Tensor::vector(&[f64::NAN]))], 0.1);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(store.get(id).data(), &[1.0]);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn one_cycle_endpoints() {
        let s = LrSchedule::one_cycle(0.01, 101);
        assert_eq!(s.lr(s.peak_step()).unwrap(), 0.01);
        assert!((s.lr(0).unwrap() - 0.01 / 25.0).abs() < 1e-15);
        let end = s.lr(100).unwrap();
        assert!((end - 0.01 / 1e4).abs() / (0.01 / 1e4) < 0.01);
        assert!(matches!(s.lr(101), Err(Error::Usage(_))));
    }

    #[test]
    fn one_cycle_positive_with_unique_max() {
        for total in [1usize, 2, 3, 10, 57, 400] {
            let s = LrSchedule::one_cycle(0.003, total);
            let lrs: Vec<f64> = (0..total).map(|i| s.lr(i).unwrap()).collect();
            assert!(lrs.iter().all(|&x| x > 0.0));
            let hits = lrs.iter().filter(|&&x| x == s.max_lr).count();
            assert_eq!(hits, 1, "total={total}: {lrs:?}");
        }
    }
}
