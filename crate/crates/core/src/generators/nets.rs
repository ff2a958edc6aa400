//! Convolutional encoder, decoder and critic shared by the GAN and the β-VAE.

use rand::Rng;

use super::GeneratorConfig;
use crate::data::{batch_tensor, TimeSeries};
use crate::error::{ensure, Result};
use crate::tensor::functional::mse;
use crate::tensor::{AdamW, AdamWConfig, Conv1d, Graph, Linear, ParamStore, Tape, Tensor, Var};
use crate::train::{batches, check_finite};

pub(crate) const LEAK: f64 = 0.2;

/// Stride-2 convolution followed by a leaky ReLU; halves the length (rounding up).
#[derive(Clone, Debug)]
pub struct DBlock {
    pub conv: Conv1d,
}

impl DBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self { conv: Conv1d::new(store, name, c_in, c_out, 3, 2, 1, rng) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        Ok(g.tape.leaky_relu(y, LEAK))
    }
}

/// Nearest-neighbour upsampling by 2, a same-padded convolution, then a leaky ReLU.
#[derive(Clone, Debug)]
pub struct UBlock {
    pub conv: Conv1d,
}

impl UBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self { conv: Conv1d::same(store, name, c_in, c_out, 3, rng) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let x = g.tape.upsample2(x, 2)?;
        let y = self.conv.forward(g, x)?;
        Ok(g.tape.leaky_relu(y, LEAK))
    }
}

/// Length after two halving blocks.
pub(crate) fn quarter(len: usize) -> usize {
    len.div_ceil(2).div_ceil(2)
}

/// Two downsampling blocks, a flatten, then one linear head per output.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    pub d1: DBlock,
    pub d2: DBlock,
    pub heads: Vec<Linear>,
}

impl ConvEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        (channels, len): (usize, usize),
        width: usize,
        outputs: &[usize],
        rng: &mut R,
    ) -> Self {
        let d1 = DBlock::new(store, &format!("{name}.down1"), channels, width, rng);
        let d2 = DBlock::new(store, &format!("{name}.down2"), width, 2 * width, rng);
        let flat = 2 * width * quarter(len);
        let heads = outputs
            .iter()
            .enumerate()
            .map(|(i, &o)| Linear::new(store, &format!("{name}.head{i}"), flat, o, rng))
            .collect();
        Self { d1, d2, heads }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let h = self.d1.forward(g, x)?;
        let h = self.d2.forward(g, h)?;
        let s = g.tape.shape(h).to_vec();
        let flat = g.tape.reshape(h, &[s[0], s[1] * s[2]])?;
        self.heads.iter().map(|head| head.forward(g, flat)).collect()
    }
}

/// Latent vector to a `[b, channels, len]` series.
#[derive(Clone, Debug)]
pub struct ConvDecoder {
    pub fc: Linear,
    pub u1: UBlock,
    pub u2: UBlock,
    pub out: Conv1d,
    pub width: usize,
    pub len: usize,
}

impl ConvDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        (channels, len): (usize, usize),
        width: usize,
        latent: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc: Linear::new(store, &format!("{name}.fc"), latent, 2 * width * quarter(len), rng),
            u1: UBlock::new(store, &format!("{name}.up1"), 2 * width, width, rng),
            u2: UBlock::new(store, &format!("{name}.up2"), width, width, rng),
            out: Conv1d::same(store, &format!("{name}.out"), width, channels, 3, rng),
            width,
            len,
        }
    }

    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let b = g.tape.shape(z)[0];
        let h = self.fc.forward(g, z)?;
        let h = g.tape.leaky_relu(h, LEAK);
        let h = g.tape.reshape(h, &[b, 2 * self.width, quarter(self.len)])?;
        let h = self.u1.forward(g, h)?;
        let h = self.u2.forward(g, h)?;
        let y = self.out.forward(g, h)?;
        g.tape.slice(y, 2, 0, self.len)
    }
}

/// `mean(D(fake)) − mean(D(real))`.
pub fn critic_loss(tape: &mut Tape, d_fake: Var, d_real: Var) -> Result<Var> {
    let f = tape.mean(d_fake);
    let r = tape.mean(d_real);
    tape.sub(f, r)
}

/// `mean ½(μ² + σ² − 1 − log σ²)` over every latent coordinate.
pub fn kl_divergence(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = tape.square(mu);
    let var = tape.exp(logvar);
    let s = tape.add(mu2, var)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.add_scalar(s, -1.0);
    let m = tape.mean(s);
    Ok(tape.scale(m, 0.5))
}

/// Reconstruction MSE plus `β` times the KL term.
pub fn vae_objective(tape: &mut Tape, x: Var, recon: Var, mu: Var, logvar: Var, beta: f64) -> Result<Var> {
    ensure!(beta >= 0.0, Usage, "beta must be non-negative, got {beta}");
    let rec = mse(tape, recon, x)?;
    if beta == 0.0 {
        return Ok(rec);
    }
    let kl = kl_divergence(tape, mu, logvar)?;
    let kl = tape.scale(kl, beta);
    tape.add(rec, kl)
}

/// Gradients restricted to parameters whose name starts with one of `prefixes`.
pub(crate) fn restrict(store: &ParamStore, grads: Vec<Option<Tensor>>, prefixes: &[&str]) -> Vec<Option<Tensor>> {
    store
        .ids()
        .zip(grads)
        .map(|(id, g)| g.filter(|_| prefixes.iter().any(|p| store.name(id).starts_with(p))))
        .collect()
}

pub(crate) fn latent_noise<R: Rng + ?Sized>(n: usize, latent: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[n, latent], rng)
}

pub(crate) fn to_series(t: &Tensor) -> Result<Vec<TimeSeries>> {
    let (c, l) = (t.shape()[1], t.shape()[2]);
    t.data()
        .chunks(c * l)
        .map(|chunk| {
            ensure!(chunk.iter().all(|v| v.is_finite()), NonFinite, "generator produced non-finite values");
            Ok(TimeSeries::from_raw(c, chunk.to_vec()))
        })
        .collect()
}

pub(crate) fn common_shape(series: &[TimeSeries]) -> Result<(usize, usize)> {
    ensure!(!series.is_empty(), Input, "cannot fit a generator to an empty set");
    let shape = (series[0].channels(), series[0].len());
    ensure!(
        series.iter().all(|s| (s.channels(), s.len()) == shape),
        Input,
        "generator training series must share one shape; resample first"
    );
    Ok(shape)
}

#[derive(Clone, Debug)]
pub struct GanModel {
    pub store: ParamStore,
    pub encoder: ConvEncoder,
    pub generator: ConvDecoder,
    pub critic: ConvEncoder,
    pub shape: (usize, usize),
    pub latent: usize,
}

/// Mean losses per epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GanHistory {
    pub reconstruction: Vec<f64>,
    pub critic: Vec<f64>,
    pub generator: Vec<f64>,
}

impl GanModel {
    pub fn new<R: Rng + ?Sized>(shape: (usize, usize), width: usize, latent: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let encoder = ConvEncoder::new(&mut store, "encoder", shape, width, &[latent], rng);
        let generator = ConvDecoder::new(&mut store, "generator", shape, width, latent, rng);
        let critic = ConvEncoder::new(&mut store, "critic", shape, width, &[1], rng);
        Self { store, encoder, generator, critic, shape, latent }
    }

    pub fn train<R: Rng + ?Sized>(
        series: &[TimeSeries],
        cfg: &GeneratorConfig,
        rng: &mut R,
    ) -> Result<(Self, GanHistory)> {
        let shape = common_shape(series)?;
        let mut model = Self::new(shape, cfg.width, cfg.latent, rng);
        let adam = AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..AdamWConfig::default() };
        let (mut opt_ae, mut opt_d, mut opt_g) = (AdamW::new(adam), AdamW::new(adam), AdamW::new(adam));
        let mut history = GanHistory::default();
        for epoch in 0..cfg.resolved_epochs() {
            let plan = batches(series.len(), cfg.batch_size, 1, rng);
            let mut sums = [0.0; 3];
            for idx in &plan {
                let x = batch_tensor(idx.iter().map(|&i| &series[i]))?;
                let b = idx.len();
                let steps = [
                    model.reconstruction_step(&x, &mut opt_ae, cfg.lr)?,
                    model.critic_step(&x, &mut opt_d, cfg, rng)?,
                    model.generator_step(b, &mut opt_g, cfg.lr, rng)?,
                ];
                for (s, v) in sums.iter_mut().zip(steps) {
                    *s += check_finite(v, &format!("GAN loss at epoch {epoch}"))?;
                }
            }
            let n = plan.len() as f64;
            history.reconstruction.push(sums[0] / n);
            history.critic.push(sums[1] / n);
            history.generator.push(sums[2] / n);
        }
        Ok((model, history))
    }

    fn reconstruction_step(&mut self, x: &Tensor, opt: &mut AdamW, lr: f64) -> Result<f64> {
        let (value, grads) = {
            let mut g = Graph::new(&self.store);
            let xv = g.input(x.clone());
            let z = self.encoder.forward(&mut g, xv)?[0];
            let y = self.generator.forward(&mut g, z)?;
            let loss = mse(&mut g.tape, xv, y)?;
            g.backward(loss)?;
            (g.tape.value(loss).item(), g.param_grads())
        };
        let grads = restrict(&self.store, grads, &["encoder.", "generator."]);
        opt.step(&mut self.store, &grads, lr)?;
        Ok(value)
    }

    fn critic_step<R: Rng + ?Sized>(&mut self, x: &Tensor, opt: &mut AdamW, cfg: &GeneratorConfig, rng: &mut R) -> Result<f64> {
        let b = x.shape()[0];
        let (value, grads) = {
            let mut g = Graph::new(&self.store);
            let zv = g.input(latent_noise(b, self.latent, rng));
            let fake = self.generator.forward(&mut g, zv)?;
            let xv = g.input(x.clone());
            let d_fake = self.critic.forward(&mut g, fake)?[0];
            let d_real = self.critic.forward(&mut g, xv)?[0];
            let loss = critic_loss(&mut g.tape, d_fake, d_real)?;
            g.backward(loss)?;
            (g.tape.value(loss).item(), g.param_grads())
        };
        let grads = restrict(&self.store, grads, &["critic."]);
        opt.step(&mut self.store, &grads, cfg.lr)?;
        let clip = cfg.critic_clip;
        let ids: Vec<_> = self.store.ids().filter(|&id| self.store.name(id).starts_with("critic.")).collect();
        for id in ids {
            self.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = v.clamp(-clip, clip));
        }
        Ok(value)
    }

    fn generator_step<R: Rng + ?Sized>(&mut self, b: usize, opt: &mut AdamW, lr: f64, rng: &mut R) -> Result<f64> {
        let (value, grads) = {
            let mut g = Graph::new(&self.store);
            let zv = g.input(latent_noise(b, self.latent, rng));
            let fake = self.generator.forward(&mut g, zv)?;
            let d = self.critic.forward(&mut g, fake)?[0];
            let m = g.tape.mean(d);
            let loss = g.tape.neg(m);
            g.backward(loss)?;
            (g.tape.value(loss).item(), g.param_grads())
        };
        let grads = restrict(&self.store, grads, &["generator."]);
        opt.step(&mut self.store, &grads, lr)?;
        Ok(value)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<TimeSeries>> {
        let mut g = Graph::inference(&self.store);
        let z = g.input(latent_noise(n, self.latent, rng));
        let y = self.generator.forward(&mut g, z)?;
        to_series(g.tape.value(y))
    }
}

#[derive(Clone, Debug)]
pub struct VaeModel {
    pub store: ParamStore,
    /// Heads: mean, then log-variance.
    pub encoder: ConvEncoder,
    pub decoder: ConvDecoder,
    pub shape: (usize, usize),
    pub latent: usize,
    pub beta: f64,
}

impl VaeModel {
    pub fn new<R: Rng + ?Sized>(shape: (usize, usize), width: usize, latent: usize, beta: f64, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let encoder = ConvEncoder::new(&mut store, "encoder", shape, width, &[latent, latent], rng);
        let decoder = ConvDecoder::new(&mut store, "decoder", shape, width, latent, rng);
        Self { store, encoder, decoder, shape, latent, beta }
    }

    /// Objective on one batch with reparameterized latents.
    pub fn loss<R: Rng + ?Sized>(&self, g: &mut Graph, x: &Tensor, rng: &mut R) -> Result<Var> {
        let xv = g.input(x.clone());
        let heads = self.encoder.forward(g, xv)?;
        let (mu, logvar) = (heads[0], heads[1]);
        let eps = g.input(latent_noise(x.shape()[0], self.latent, rng));
        let half = g.tape.scale(logvar, 0.5);
        let sigma = g.tape.exp(half);
        let noise = g.tape.mul(sigma, eps)?;
        let z = g.tape.add(mu, noise)?;
        let recon = self.decoder.forward(g, z)?;
        vae_objective(&mut g.tape, xv, recon, mu, logvar, self.beta)
    }

    pub fn train<R: Rng + ?Sized>(series: &[TimeSeries], cfg: &GeneratorConfig, rng: &mut R) -> Result<(Self, Vec<f64>)> {
        ensure!(cfg.beta >= 0.0, Usage, "beta must be non-negative, got {}", cfg.beta);
        let shape = common_shape(series)?;
        let mut model = Self::new(shape, cfg.width, cfg.latent, cfg.beta, rng);
        let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..AdamWConfig::default() });
        let mut history = Vec::new();
        for epoch in 0..cfg.resolved_epochs() {
            let plan = batches(series.len(), cfg.batch_size, 1, rng);
            let mut total = 0.0;
            for idx in &plan {
                let x = batch_tensor(idx.iter().map(|&i| &series[i]))?;
                let (value, grads) = {
                    let mut g = Graph::new(&model.store);
                    let loss = model.loss(&mut g, &x, rng)?;
                    g.backward(loss)?;
                    (g.tape.value(loss).item(), g.param_grads())
                };
                total += check_finite(value, &format!("VAE loss at epoch {epoch}"))?;
                opt.step(&mut model.store, &grads, cfg.lr)?;
            }
            history.push(total / plan.len() as f64);
        }
        Ok((model, history))
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<TimeSeries>> {
        let mut g = Graph::inference(&self.store);
        let z = g.input(latent_noise(n, self.latent, rng));
        let y = self.decoder.forward(&mut g, z)?;
        to_series(g.tape.value(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item()
    }

    #[test]
    fn kl_closed_forms() {
        let zero = eval(|t| {
            let mu = t.constant(Tensor::zeros(&[2, 3]));
            let lv = t.constant(Tensor::zeros(&[2, 3]));
            kl_divergence(t, mu, lv)
        });
        assert_eq!(zero, 0.0);
        let half = eval(|t| {
            let mu = t.constant(Tensor::ones(&[2, 3]));
            let lv = t.constant(Tensor::zeros(&[2, 3]));
            kl_divergence(t, mu, lv)
        });
        assert!((half - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_beta_is_pure_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, r, mu, lv) =
            (Tensor::randn(&[3, 1, 8], &mut rng), Tensor::randn(&[3, 1, 8], &mut rng), Tensor::randn(&[3, 4], &mut rng), Tensor::randn(&[3, 4], &mut rng));
        let mut t = Tape::new();
        let (xv, rv, mv, lvv) = (t.constant(x), t.constant(r), t.constant(mu), t.constant(lv));
        let full = vae_objective(&mut t, xv, rv, mv, lvv, 0.0).unwrap();
        let rec = mse(&mut t, rv, xv).unwrap();
        assert!((t.value(full).item() - t.value(rec).item()).abs() < 1e-12);
        assert!(matches!(vae_objective(&mut t, xv, rv, mv, lvv, -1.0), Err(Error::Usage(_))));
    }

    #[test]
    fn critic_loss_is_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (Tensor::randn(&[5, 1], &mut rng), Tensor::randn(&[5, 1], &mut rng));
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a), t.constant(b));
        let ab = critic_loss(&mut t, av, bv).unwrap();
        let ba = critic_loss(&mut t, bv, av).unwrap();
        assert_eq!(t.value(ab).item(), -t.value(ba).item());
    }

    fn toy_set(rng: &mut ChaCha8Rng) -> Vec<TimeSeries> {
        (0..16)
            .map(|i| {
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let v = (0..12).map(|t| (t as f64 * 0.6 + phase).sin() * (1.0 + i as f64 / 16.0)).collect();
                TimeSeries::univariate(v).unwrap()
            })
            .collect()
    }

    #[test]
    fn gan_reconstruction_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = toy_set(&mut rng);
        let cfg = GeneratorConfig { epochs: Some(200), batch_size: 16, width: 4, latent: 16, ..GeneratorConfig::default() };
        let (gan, history) = GanModel::train(&data, &cfg, &mut rng).unwrap();
        let r = &history.reconstruction;
        assert!(r[r.len() - 1] < 0.5 * r[0], "{} -> {}", r[0], r[r.len() - 1]);
        let samples = gan.sample(7, &mut rng).unwrap();
        assert_eq!(samples.len(), 7);
        assert!(samples.iter().all(|s| s.channels() == 1 && s.len() == 12));
        let clip = cfg.critic_clip;
        for (name, t) in gan.store.iter() {
            if name.starts_with("critic.") {
                assert!(t.data().iter().all(|v| v.abs() <= clip));
            }
        }
    }

    #[test]
    fn vae_trains_and_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = toy_set(&mut rng);
        let cfg = GeneratorConfig { epochs: Some(60), batch_size: 8, width: 4, latent: 8, ..GeneratorConfig::default() };
        let (vae, history) = VaeModel::train(&data, &cfg, &mut rng).unwrap();
        assert!(history.last().unwrap() < &history[0]);
        let s = vae.sample(3, &mut rng).unwrap();
        assert!(s.iter().all(|s| s.len() == 12 && s.is_finite()));
        let bad = GeneratorConfig { beta: -0.5, ..cfg };
        assert!(matches!(VaeModel::train(&data, &bad, &mut rng), Err(Error::Usage(_))));
    }
}
