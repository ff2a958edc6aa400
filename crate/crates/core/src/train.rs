//! Shared optimization loop pieces: batching, AdamW under the 1cycle policy.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{AdamW, AdamWConfig, LrSchedule, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OneCycleConfig {
    pub warmup_fraction: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl Default for OneCycleConfig {
    fn default() -> Self {
        Self { warmup_fraction: 0.3, div_factor: 25.0, final_div_factor: 1e4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `optimizer.lr` is the peak learning rate.
    pub optimizer: AdamWConfig,
    pub schedule: OneCycleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 400, batch_size: 64, optimizer: AdamWConfig::default(), schedule: OneCycleConfig::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, Config, "epochs must be at least 1");
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1");
        ensure!(self.optimizer.lr > 0.0, Config, "learning rate must be positive");
        ensure!(
            (0.0..=1.0).contains(&self.schedule.warmup_fraction) && self.schedule.div_factor > 0.0 && self.schedule.final_div_factor > 0.0,
            Config,
            "invalid 1cycle settings"
        );
        Ok(())
    }
}

/// Shuffled index batches of `n` items. A trailing batch smaller than
/// `min_size` is folded into the one before it.
pub fn batches<R: Rng + ?Sized>(n: usize, batch_size: usize, min_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min_size) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

/// Number of batches per epoch produced by [`batches`].
pub fn batches_per_epoch(n: usize, batch_size: usize, min_size: usize) -> usize {
    let full = n.div_ceil(batch_size.max(1));
    let tail = n % batch_size.max(1);
    if full > 1 && tail != 0 && tail < min_size {
        full - 1
    } else {
        full
    }
}

/// AdamW driven by a 1cycle schedule spanning a fixed number of steps.
pub struct Optimizer {
    adam: AdamW,
    schedule: LrSchedule,
    step: usize,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, total_steps: usize) -> Self {
        let schedule = LrSchedule {
            max_lr: cfg.optimizer.lr,
            total_steps: total_steps.max(1),
            warmup_fraction: cfg.schedule.warmup_fraction,
            div_factor: cfg.schedule.div_factor,
            final_div_factor: cfg.schedule.final_div_factor,
        };
        Self { adam: AdamW::new(cfg.optimizer), schedule, step: 0 }
    }

    pub fn current_lr(&self) -> f64 {
        let step = self.step.min(self.schedule.total_steps - 1);
        self.schedule.lr(step).expect("step clamped into range")
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        let lr = self.current_lr();
        self.adam.step(params, grads, lr)?;
        self.step += 1;
        Ok(())
    }
}

pub(crate) fn check_finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("{what} became {value}")))
    }
}
