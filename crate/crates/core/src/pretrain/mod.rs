//! Self-supervised pretraining objectives and the loop that drives them.

mod losses;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

pub use losses::{mixingup_loss, nt_xent, tfc_loss, ts2vec_loss, Denominator, TfcView, TfcWeights};

use crate::augment::{augment, frequency_augment, sample_crop_plan, AugmentKind, AugmentParams};
use crate::data::{batch_tensor, TimeSeries};
use crate::error::{ensure, Error, Result};
use crate::models::{frequency_view, Model, Output};
use crate::tensor::{Graph, Var};
use crate::train::{batches, batches_per_epoch, check_finite, Optimizer, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PtmKind {
    #[serde(rename = "TimeCLR")]
    TimeClr,
    #[serde(rename = "TS2Vec")]
    Ts2Vec,
    #[serde(rename = "MixingUp")]
    MixingUp,
    #[serde(rename = "TF-C")]
    Tfc,
}

impl PtmKind {
    pub const ALL: [PtmKind; 4] = [PtmKind::TimeClr, PtmKind::Ts2Vec, PtmKind::MixingUp, PtmKind::Tfc];

    pub fn name(self) -> &'static str {
        match self {
            PtmKind::TimeClr => "TimeCLR",
            PtmKind::Ts2Vec => "TS2Vec",
            PtmKind::MixingUp => "MixingUp",
            PtmKind::Tfc => "TF-C",
        }
    }

    /// TS2Vec contrasts per-step representations from a strided encoder.
    pub fn per_step(self) -> bool {
        self == PtmKind::Ts2Vec
    }

    /// TF-C pairs a time-domain and a frequency-domain model.
    pub fn branches(self) -> usize {
        if self == PtmKind::Tfc {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for PtmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PtmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        PtmKind::ALL
            .into_iter()
            .find(|k| k.name().replace('-', "").to_ascii_lowercase() == key)
            .ok_or_else(|| Error::Usage(format!("unknown pretraining method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastConfig {
    pub temperature: f64,
    pub denominator: Denominator,
    /// Weight of the instance term against the temporal term.
    pub ts2vec_alpha: f64,
    /// Cap on hierarchy levels; `None` pools until one step remains.
    pub ts2vec_depth: Option<usize>,
    pub mixup_alpha: f64,
    pub tfc_weights: TfcWeights,
    /// Kinds a TimeCLR view may draw from.
    pub bank: Vec<AugmentKind>,
    pub augment: AugmentParams,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            denominator: Denominator::default(),
            ts2vec_alpha: 0.5,
            ts2vec_depth: None,
            mixup_alpha: 0.2,
            tfc_weights: TfcWeights::default(),
            bank: AugmentKind::ALL.to_vec(),
            augment: AugmentParams::default(),
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.temperature > 0.0, Config, "temperature must be positive");
        ensure!(self.mixup_alpha > 0.0, Config, "mixup alpha must be positive");
        ensure!((0.0..=1.0).contains(&self.ts2vec_alpha), Config, "ts2vec alpha must lie in [0, 1]");
        ensure!(self.ts2vec_depth != Some(0), Config, "ts2vec depth must be at least 1");
        ensure!(!self.bank.is_empty(), Config, "augmentation bank is empty");
        self.augment.validate()
    }
}

/// Mixed series `x_k = λ x_i + (1 − λ) x_j` with their sources.
#[derive(Clone, Debug, PartialEq)]
pub struct MixBatch {
    pub xi: Vec<TimeSeries>,
    pub xj: Vec<TimeSeries>,
    pub xk: Vec<TimeSeries>,
    pub lambda: Vec<f64>,
}

/// Mixes `x_i` and `x_j` with the given weights.
pub fn mix_series(xi: &TimeSeries, xj: &TimeSeries, lambda: f64) -> Result<TimeSeries> {
    ensure!(
        xi.channels() == xj.channels() && xi.len() == xj.len(),
        Dimension,
        "cannot mix series of different shapes"
    );
    let values = xi.values().iter().zip(xj.values()).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
    TimeSeries::new(xi.channels(), values)
}

/// Pairs every series with a different one and mixes them with `λ ~ Beta(α, α)`.
pub fn mixup_batch<R: Rng + ?Sized>(batch: &[TimeSeries], alpha: f64, rng: &mut R) -> Result<MixBatch> {
    ensure!(alpha > 0.0, Usage, "mixup alpha must be positive, got {alpha}");
    ensure!(batch.len() >= 2, Usage, "mixup needs at least 2 series");
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Usage(e.to_string()))?;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.shuffle(rng);
    let n = batch.len();
    let mut out = MixBatch { xi: Vec::new(), xj: Vec::new(), xk: Vec::new(), lambda: Vec::new() };
    for t in 0..n {
        let (i, j) = (order[t], order[(t + 1) % n]);
        let lambda: f64 = beta.sample(rng);
        out.xk.push(mix_series(&batch[i], &batch[j], lambda)?);
        out.xi.push(batch[i].clone());
        out.xj.push(batch[j].clone());
        out.lambda.push(lambda);
    }
    Ok(out)
}

/// Two views per series, each from one kind drawn uniformly from `bank`.
pub fn timeclr_views<R: Rng + ?Sized>(
    batch: &[TimeSeries],
    bank: &[AugmentKind],
    p: &AugmentParams,
    rng: &mut R,
) -> Result<(Vec<TimeSeries>, Vec<TimeSeries>)> {
    ensure!(!bank.is_empty(), Usage, "augmentation bank is empty");
    let mut v0 = Vec::with_capacity(batch.len());
    let mut v1 = Vec::with_capacity(batch.len());
    for x in batch {
        let k0 = bank[rng.random_range(0..bank.len())];
        v0.push(augment(k0, x, p, rng));
        let k1 = bank[rng.random_range(0..bank.len())];
        v1.push(augment(k1, x, p, rng));
    }
    Ok((v0, v1))
}

pub fn timeclr_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &Model,
    batch: &[TimeSeries],
    cfg: &ContrastConfig,
    rng: &mut R,
) -> Result<Var> {
    ensure!(batch.len() >= 2, Usage, "TimeCLR needs a batch of at least 2");
    let (v0, v1) = timeclr_views(batch, &cfg.bank, &cfg.augment, rng)?;
    let x0 = g.input(batch_tensor(&v0)?);
    let x1 = g.input(batch_tensor(&v1)?);
    let h0 = model.embed_project(g, x0, 0)?;
    let h1 = model.embed_project(g, x1, 0)?;
    nt_xent(&mut g.tape, h0, h1, cfg.temperature, cfg.denominator)
}

pub fn ts2vec_step_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &Model,
    batch: &[TimeSeries],
    cfg: &ContrastConfig,
    rng: &mut R,
) -> Result<Var> {
    ensure!(!batch.is_empty(), Usage, "empty batch");
    let stride = model.spec().backbone.stride();
    let l = batch[0].len();
    let plan = sample_crop_plan(l, stride, rng)?;
    let mut c0 = Vec::with_capacity(batch.len());
    let mut c1 = Vec::with_capacity(batch.len());
    for x in batch {
        ensure!(x.len() == l, Dimension, "TS2Vec batch mixes lengths {l} and {}", x.len());
        let w = plan.windows.shifted(plan.sample_shift(stride, rng));
        c0.push(x.slice(w.a.0, w.a.1 - w.a.0));
        c1.push(x.slice(w.b.0, w.b.1 - w.b.0));
    }
    let w = plan.windows;
    let (off0, off1) = w.overlap_offsets();
    let steps = w.overlap_len().div_ceil(stride);
    let x0 = g.input(batch_tensor(&c0)?);
    let x1 = g.input(batch_tensor(&c1)?);
    let h0 = model.encode(g, x0, 0, Output::PerStep)?;
    let h1 = model.encode(g, x1, 0, Output::PerStep)?;
    let z0 = model.project(g, h0, 0)?;
    let z1 = model.project(g, h1, 0)?;
    let z0 = g.tape.slice(z0, 1, off0 / stride, steps)?;
    let z1 = g.tape.slice(z1, 1, off1 / stride, steps)?;
    ts2vec_loss(&mut g.tape, z0, z1, cfg.ts2vec_alpha, cfg.ts2vec_depth)
}

pub fn mixingup_step_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &Model,
    batch: &[TimeSeries],
    cfg: &ContrastConfig,
    rng: &mut R,
) -> Result<Var> {
    let mix = mixup_batch(batch, cfg.mixup_alpha, rng)?;
    let xi = g.input(batch_tensor(&mix.xi)?);
    let xj = g.input(batch_tensor(&mix.xj)?);
    let xk = g.input(batch_tensor(&mix.xk)?);
    let zi = model.embed_project(g, xi, 0)?;
    let zj = model.embed_project(g, xj, 0)?;
    let zk = model.embed_project(g, xk, 0)?;
    mixingup_loss(&mut g.tape, zi, zj, zk, &mix.lambda, cfg.temperature)
}

fn tfc_view(g: &mut Graph, model: &Model, xt: &[TimeSeries], xf: crate::tensor::Tensor) -> Result<TfcView> {
    let xt = g.input(batch_tensor(xt)?);
    let xf = g.input(xf);
    let h_time = model.encode(g, xt, 0, Output::Pooled)?;
    let z_time = model.project(g, h_time, 0)?;
    let h_freq = model.encode(g, xf, 1, Output::Pooled)?;
    let z_freq = model.project(g, h_freq, 1)?;
    Ok(TfcView { h_time, z_time, h_freq, z_freq })
}

pub fn tfc_step_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &Model,
    batch: &[TimeSeries],
    cfg: &ContrastConfig,
    rng: &mut R,
) -> Result<Var> {
    ensure!(model.branches().len() == 2, Config, "TF-C needs a model with time and frequency branches");
    ensure!(batch.len() >= 2, Usage, "TF-C needs a batch of at least 2");
    let jittered: Vec<TimeSeries> = batch.iter().map(|x| augment(AugmentKind::Jitter, x, &cfg.augment, rng)).collect();
    let x = batch_tensor(batch)?;
    let xf = frequency_view(&x, |s| s)?;
    let xf_aug = frequency_view(&x, |s| frequency_augment(&s, &cfg.augment, rng))?;
    let orig = tfc_view(g, model, batch, xf)?;
    let aug = tfc_view(g, model, &jittered, xf_aug)?;
    tfc_loss(&mut g.tape, &orig, &aug, &cfg.tfc_weights, cfg.temperature, cfg.denominator)
}

/// Loss of `kind` on one batch, drawing all randomness from `rng`.
pub fn pretrain_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &Model,
    kind: PtmKind,
    batch: &[TimeSeries],
    cfg: &ContrastConfig,
    rng: &mut R,
) -> Result<Var> {
    match kind {
        PtmKind::TimeClr => timeclr_loss(g, model, batch, cfg, rng),
        PtmKind::Ts2Vec => ts2vec_step_loss(g, model, batch, cfg, rng),
        PtmKind::MixingUp => mixingup_step_loss(g, model, batch, cfg, rng),
        PtmKind::Tfc => tfc_step_loss(g, model, batch, cfg, rng),
    }
}

/// Pretrains `model` in place; returns the mean loss of every epoch.
pub fn pretrain<R: Rng + ?Sized>(
    model: &mut Model,
    kind: PtmKind,
    series: &[TimeSeries],
    cfg: &ContrastConfig,
    train: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    train.validate()?;
    ensure!(series.len() >= 2, Input, "pretraining needs at least 2 series, got {}", series.len());
    ensure!(
        model.branches().len() == kind.branches(),
        Config,
        "{kind} needs {} branch(es), model has {}",
        kind.branches(),
        model.branches().len()
    );
    let per_epoch = batches_per_epoch(series.len(), train.batch_size, 2);
    let mut opt = Optimizer::new(train, per_epoch * train.epochs);
    let mut losses = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let mut total = 0.0;
        let plan = batches(series.len(), train.batch_size, 2, rng);
        for idx in &plan {
            let batch: Vec<TimeSeries> = idx.iter().map(|&i| series[i].clone()).collect();
            let (value, grads) = {
                let mut g = Graph::new(model.store());
                let loss = pretrain_loss(&mut g, model, kind, &batch, cfg, rng)?;
                g.backward(loss)?;
                (g.tape.value(loss).item(), g.param_grads())
            };
            check_finite(value, &format!("{kind} loss at epoch {epoch}"))?;
            opt.step(model.store_mut(), &grads)?;
            total += value;
        }
        losses.push(total / plan.len() as f64);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BackboneKind, BackboneSpec, ModelSpec};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(kind: PtmKind, rng: &mut ChaCha8Rng) -> Model {
        let mut bb = BackboneSpec::new(BackboneKind::Resnet, 1, kind.per_step());
        if let BackboneSpec::Resnet(r) = &mut bb {
            r.widths = [4, 6, 6];
        }
        let mut spec = ModelSpec::single(bb);
        spec.head.hidden = 8;
        spec.head.proj_dim = 5;
        if kind.branches() == 2 {
            spec.branches = 2;
        }
        Model::new(spec, rng).unwrap()
    }

    fn random_batch(n: usize, l: usize, rng: &mut ChaCha8Rng) -> Vec<TimeSeries> {
        (0..n).map(|_| TimeSeries::univariate(Tensor::randn(&[l], rng).into_data()).unwrap()).collect()
    }

    #[test]
    fn names_round_trip() {
        for k in PtmKind::ALL {
            assert_eq!(k.name().parse::<PtmKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!("tfc".parse::<PtmKind>().is_ok());
        assert!(matches!("simclr".parse::<PtmKind>(), Err(Error::Usage(_))));
    }

    #[test]
    fn mixing_examples() {
        let a = TimeSeries::univariate(vec![0.0, 0.0]).unwrap();
        let b = TimeSeries::univariate(vec![2.0, 2.0]).unwrap();
        assert_eq!(mix_series(&a, &b, 0.5).unwrap().values(), &[1.0, 1.0]);
        assert_eq!(mix_series(&b, &a, 1.0).unwrap(), b);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = random_batch(5, 8, &mut rng);
        let mix = mixup_batch(&batch, 0.2, &mut rng).unwrap();
        for k in 0..5 {
            assert_ne!(mix.xi[k], mix.xj[k]);
            assert!((0.0..=1.0).contains(&mix.lambda[k]));
            assert_eq!(mix.xk[k], mix_series(&mix.xi[k], &mix.xj[k], mix.lambda[k]).unwrap());
        }
        assert!(matches!(mixup_batch(&batch, 0.0, &mut rng), Err(Error::Usage(_))));
    }

    #[test]
    fn timeclr_identity_views_reduce_to_tied_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = tiny_model(PtmKind::TimeClr, &mut rng);
        let batch = random_batch(4, 16, &mut rng);
        let cfg = ContrastConfig {
            augment: AugmentParams::identity(),
            bank: AugmentKind::ALL.into_iter().filter(|k| *k != AugmentKind::Negation).collect(),
            ..ContrastConfig::default()
        };
        let mut g = Graph::inference(model.store());
        let loss = timeclr_loss(&mut g, &model, &batch, &cfg, &mut rng).unwrap();
        let got = g.tape.value(loss).item();
        let x = g.input(batch_tensor(&batch).unwrap());
        let h = model.embed_project(&mut g, x, 0).unwrap();
        let tied = nt_xent(&mut g.tape, h, h, cfg.temperature, cfg.denominator).unwrap();
        assert!((got - g.tape.value(tied).item()).abs() < 1e-12);
    }

    #[test]
    fn timeclr_reaches_every_backbone_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = tiny_model(PtmKind::TimeClr, &mut rng);
        let batch = random_batch(4, 16, &mut rng);
        let mut g = Graph::new(model.store());
        let loss = timeclr_loss(&mut g, &model, &batch, &ContrastConfig::default(), &mut rng).unwrap();
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        for id in model.store().ids() {
            let grad = grads[id.0].as_ref().unwrap_or_else(|| panic!("{} unreached", model.store().name(id)));
            assert!(grad.data().iter().any(|v| *v != 0.0), "{} has zero gradient", model.store().name(id));
        }
    }

    #[test]
    fn every_objective_decreases_after_one_small_step() {
        for kind in PtmKind::ALL {
            for seed in 0..5 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut model = tiny_model(kind, &mut rng);
                let batch = random_batch(4, 16, &mut rng);
                let cfg = ContrastConfig::default();
                let draw = rng.clone();
                let eval = |model: &Model, grads: bool| {
                    let mut g = if grads { Graph::new(model.store()) } else { Graph::inference(model.store()) };
                    let loss = pretrain_loss(&mut g, model, kind, &batch, &cfg, &mut draw.clone()).unwrap();
                    let v = g.tape.value(loss).item();
                    if grads {
                        g.backward(loss).unwrap();
                    }
                    (v, g.param_grads())
                };
                let (before, grads) = eval(&model, true);
                assert!(before.is_finite());
                assert!(grads.iter().flatten().all(Tensor::is_finite));
                let mut adam = crate::tensor::AdamW::new(crate::tensor::AdamWConfig::default());
                adam.step(model.store_mut(), &grads, 1e-4).unwrap();
                let (after, _) = eval(&model, false);
                assert!(after < before, "{kind} seed {seed}: {before} -> {after}");
            }
        }
    }

    #[test]
    fn short_pretraining_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in PtmKind::ALL {
            let mut model = tiny_model(kind, &mut rng);
            let series = random_batch(6, 16, &mut rng);
            let train = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() };
            let losses = pretrain(&mut model, kind, &series, &ContrastConfig::default(), &train, &mut rng).unwrap();
            assert_eq!(losses.len(), 2);
            assert!(losses.iter().all(|v| v.is_finite()));
        }
    }
}
