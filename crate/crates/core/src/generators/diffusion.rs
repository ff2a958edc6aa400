//! Denoising diffusion with a small one-dimensional U-Net.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nets::{common_shape, to_series, DBlock, UBlock, LEAK};
use super::GeneratorConfig;
use crate::data::{batch_tensor, TimeSeries};
use crate::error::{ensure, Result};
use crate::models::positional_encoding;
use crate::tensor::functional::mse;
use crate::tensor::{AdamW, AdamWConfig, Conv1d, Graph, Linear, ParamStore, Tensor, Var};
use crate::train::{batches, check_finite};

/// Linear noise schedule `β_1 … β_T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { steps: 100, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, Config, "diffusion needs at least one step");
        ensure!(
            self.beta_start > 0.0 && self.beta_end < 1.0 && self.beta_start <= self.beta_end,
            Config,
            "noise schedule must satisfy 0 < beta_start <= beta_end < 1"
        );
        Ok(())
    }

    pub fn betas(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![self.beta_start];
        }
        let span = self.beta_end - self.beta_start;
        (0..self.steps).map(|i| self.beta_start + span * i as f64 / (self.steps - 1) as f64).collect()
    }

    /// `ᾱ_t = Π_{s ≤ t} (1 − β_s)`, indexed from `t = 0`.
    pub fn alpha_bars(&self) -> Vec<f64> {
        self.betas()
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect()
    }
}

/// `√ᾱ · x₀ + √(1 − ᾱ) · ε` with one `ᾱ` per series.
pub fn noised(x0: &Tensor, alpha_bar: &[f64], eps: &Tensor) -> Result<Tensor> {
    ensure!(x0.shape() == eps.shape(), Dimension, "noise shape {:?} for data {:?}", eps.shape(), x0.shape());
    ensure!(alpha_bar.len() == x0.shape()[0], Dimension, "{} noise levels for {} series", alpha_bar.len(), x0.shape()[0]);
    let per = x0.len() / alpha_bar.len().max(1);
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (&x, &e))| {
            let a = alpha_bar[i / per];
            a.sqrt() * x + (1.0 - a).sqrt() * e
        })
        .collect();
    Tensor::new(x0.shape(), data)
}

/// MSE between the true noise and `predict(x_t, t)` for random steps and noise.
pub fn denoising_loss<R, F>(g: &mut Graph, x0: &Tensor, schedule: &NoiseSchedule, predict: F, rng: &mut R) -> Result<Var>
where
    R: Rng + ?Sized,
    F: FnOnce(&mut Graph, Var, &[usize]) -> Result<Var>,
{
    let bars = schedule.alpha_bars();
    let b = x0.shape()[0];
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(0..schedule.steps)).collect();
    let eps = Tensor::randn(x0.shape(), rng);
    let ab: Vec<f64> = t.iter().map(|&i| bars[i]).collect();
    let xt = g.input(noised(x0, &ab, &eps)?);
    let pred = predict(g, xt, &t)?;
    let target = g.input(eps);
    mse(&mut g.tape, pred, target)
}

/// Encoder–decoder over time with one skip connection and a step embedding.
#[derive(Clone, Debug)]
pub struct UNet1d {
    pub inc: Conv1d,
    pub temb: Linear,
    pub down: DBlock,
    pub mid: Conv1d,
    pub up: UBlock,
    pub out: Conv1d,
    pub width: usize,
    pub len: usize,
}

impl UNet1d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, (channels, len): (usize, usize), width: usize, rng: &mut R) -> Self {
        Self {
            inc: Conv1d::same(store, "unet.in", channels, width, 3, rng),
            temb: Linear::new(store, "unet.temb", width, width, rng),
            down: DBlock::new(store, "unet.down", width, 2 * width, rng),
            mid: Conv1d::same(store, "unet.mid", 2 * width, 2 * width, 3, rng),
            up: UBlock::new(store, "unet.up", 2 * width, width, rng),
            out: Conv1d::same(store, "unet.out", 2 * width, channels, 3, rng),
            width,
            len,
        }
    }

    /// Predicted noise for `x_t` (`[b, c, len]`) at steps `t`.
    pub fn forward(&self, g: &mut Graph, xt: Var, t: &[usize]) -> Result<Var> {
        let table = positional_encoding(t.iter().max().map_or(1, |m| m + 1), self.width)?;
        let rows: Vec<usize> = t.to_vec();
        let emb = g.input(table.select_leading(&rows));
        let emb = self.temb.forward(g, emb)?;
        let emb = g.tape.reshape(emb, &[t.len(), self.width, 1])?;
        let h = self.inc.forward(g, xt)?;
        let h = g.tape.add(h, emb)?;
        let h1 = g.tape.leaky_relu(h, LEAK);
        let h2 = self.down.forward(g, h1)?;
        let m = self.mid.forward(g, h2)?;
        let m = g.tape.leaky_relu(m, LEAK);
        let u = self.up.forward(g, m)?;
        let u = g.tape.slice(u, 2, 0, self.len)?;
        let cat = g.tape.concat(&[u, h1], 1)?;
        self.out.forward(g, cat)
    }
}

#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub store: ParamStore,
    pub net: UNet1d,
    pub schedule: NoiseSchedule,
    pub shape: (usize, usize),
}

impl DiffusionModel {
    pub fn new<R: Rng + ?Sized>(shape: (usize, usize), width: usize, schedule: NoiseSchedule, rng: &mut R) -> Result<Self> {
        schedule.validate()?;
        ensure!(width.is_multiple_of(2), Config, "diffusion width must be even for the step embedding");
        let mut store = ParamStore::new();
        let net = UNet1d::new(&mut store, shape, width, rng);
        Ok(Self { store, net, schedule, shape })
    }

    pub fn train<R: Rng + ?Sized>(series: &[TimeSeries], cfg: &GeneratorConfig, rng: &mut R) -> Result<(Self, Vec<f64>)> {
        let shape = common_shape(series)?;
        let mut model = Self::new(shape, cfg.width, cfg.diffusion, rng)?;
        let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..AdamWConfig::default() });
        let mut history = Vec::new();
        for epoch in 0..cfg.resolved_epochs() {
            let plan = batches(series.len(), cfg.batch_size, 1, rng);
            let mut total = 0.0;
            for idx in &plan {
                let x = batch_tensor(idx.iter().map(|&i| &series[i]))?;
                let (value, grads) = {
                    let mut g = Graph::new(&model.store);
                    let net = &model.net;
                    let loss = denoising_loss(&mut g, &x, &model.schedule, |g, xt, t| net.forward(g, xt, t), rng)?;
                    g.backward(loss)?;
                    (g.tape.value(loss).item(), g.param_grads())
                };
                total += check_finite(value, &format!("diffusion loss at epoch {epoch}"))?;
                opt.step(&mut model.store, &grads, cfg.lr)?;
            }
            history.push(total / plan.len() as f64);
        }
        Ok((model, history))
    }

    /// Ancestral sampling from pure noise over every step of the schedule.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<TimeSeries>> {
        let betas = self.schedule.betas();
        let bars = self.schedule.alpha_bars();
        let (c, l) = self.shape;
        let mut x = Tensor::randn(&[n, c, l], rng);
        for step in (0..self.schedule.steps).rev() {
            let eps = {
                let mut g = Graph::inference(&self.store);
                let xv = g.input(x.clone());
                let e = self.net.forward(&mut g, xv, &vec![step; n])?;
                g.tape.value(e).clone()
            };
            let (beta, bar) = (betas[step], bars[step]);
            let coef = beta / (1.0 - bar).sqrt();
            let scale = 1.0 / (1.0 - beta).sqrt();
            let noise = if step > 0 { Some(Tensor::randn(&[n, c, l], rng)) } else { None };
            let sigma = beta.sqrt();
            let data = x
                .data()
                .iter()
                .zip(eps.data())
                .enumerate()
                .map(|(i, (&xi, &ei))| scale * (xi - coef * ei) + noise.as_ref().map_or(0.0, |z| sigma * z.data()[i]))
                .collect();
            x = Tensor::new(&[n, c, l], data)?;
        }
        to_series(&x)
    }
}
