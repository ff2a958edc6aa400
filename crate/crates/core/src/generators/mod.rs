//! Synthetic pretraining data: three parameter-free or closed-form generators
//! and three trained generative models.

mod diffusion;
mod nets;
mod simple;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use diffusion::{denoising_loss, noised, DiffusionModel, NoiseSchedule, UNet1d};
pub use nets::{critic_loss, kl_divergence, vae_objective, ConvDecoder, ConvEncoder, DBlock, GanHistory, GanModel, UBlock, VaeModel};
pub use simple::{random_walk, render_sinusoids, sinusoidal, MgModel, Sinusoid, SinusoidRanges};

use crate::data::TimeSeries;
use crate::error::{ensure, Error, Result};
use crate::models::Checkpoint;
use crate::tensor::{ParamStore, Tensor};

/// Generation threshold for univariate archives.
pub const UCR_THRESHOLD: usize = 1494;
/// Generation threshold for multivariate archives.
pub const UEA_THRESHOLD: usize = 3398;

/// Number of series to generate: the threshold when the pretraining set is
/// smaller, otherwise as many as the pretraining set holds.
pub fn n_gen_policy(pretrain_size: usize, threshold: usize) -> usize {
    pretrain_size.max(threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GeneratorKind {
    #[serde(rename = "RW")]
    RandomWalk,
    #[serde(rename = "SW")]
    Sinusoidal,
    #[serde(rename = "MG")]
    Gaussian,
    #[serde(rename = "GAN")]
    Gan,
    #[serde(rename = "BVAE")]
    BetaVae,
    #[serde(rename = "Diff")]
    Diffusion,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 6] = [
        GeneratorKind::RandomWalk,
        GeneratorKind::Sinusoidal,
        GeneratorKind::Gaussian,
        GeneratorKind::Gan,
        GeneratorKind::BetaVae,
        GeneratorKind::Diffusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::RandomWalk => "RW",
            GeneratorKind::Sinusoidal => "SW",
            GeneratorKind::Gaussian => "MG",
            GeneratorKind::Gan => "GAN",
            GeneratorKind::BetaVae => "BVAE",
            GeneratorKind::Diffusion => "Diff",
        }
    }

    /// Whether the generator is fitted to the pretraining set.
    pub fn is_fitted(self) -> bool {
        !matches!(self, GeneratorKind::RandomWalk | GeneratorKind::Sinusoidal)
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.to_lowercase().replace('β', "beta").chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        Ok(match key.as_str() {
            "rw" | "randomwalk" => GeneratorKind::RandomWalk,
            "sw" | "sinusoidal" | "sine" => GeneratorKind::Sinusoidal,
            "mg" | "gaussian" => GeneratorKind::Gaussian,
            "gan" => GeneratorKind::Gan,
            "bvae" | "betavae" | "vae" => GeneratorKind::BetaVae,
            "diff" | "diffusion" => GeneratorKind::Diffusion,
            _ => return Err(Error::Usage(format!("unknown generator {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub latent: usize,
    /// Base channel count of the convolutional networks.
    pub width: usize,
    /// Training epochs; `None` defers to the caller's pretraining budget.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub critic_clip: f64,
    pub diffusion: NoiseSchedule,
    pub sinusoid: SinusoidRanges,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent: 128,
            width: 16,
            epochs: None,
            batch_size: 64,
            lr: 1e-3,
            beta: 1.0,
            critic_clip: 0.01,
            diffusion: NoiseSchedule::default(),
            sinusoid: SinusoidRanges::default(),
        }
    }
}

/// Epoch count used when neither the config nor the caller sets one.
pub const DEFAULT_GENERATOR_EPOCHS: usize = 400;

impl GeneratorConfig {
    pub fn resolved_epochs(&self) -> usize {
        self.epochs.unwrap_or(DEFAULT_GENERATOR_EPOCHS)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.latent >= 1 && self.width >= 1, Config, "generator latent and width must be positive");
        ensure!(self.batch_size >= 1, Config, "generator batch_size must be positive");
        ensure!(self.lr > 0.0, Config, "generator learning rate must be positive");
        ensure!(self.epochs != Some(0), Config, "generator epochs must be at least 1");
        ensure!(self.beta >= 0.0, Usage, "beta must be non-negative, got {}", self.beta);
        ensure!(self.critic_clip > 0.0, Config, "critic clip must be positive");
        self.diffusion.validate()
    }
}

/// A ready-to-sample generator for series of one `(channels, length)` shape.
#[derive(Clone, Debug)]
pub enum GeneratorModel {
    RandomWalk { shape: (usize, usize) },
    Sinusoidal { shape: (usize, usize), ranges: SinusoidRanges },
    Gaussian(MgModel),
    Gan(GanModel),
    BetaVae(VaeModel),
    Diffusion(DiffusionModel),
}

impl GeneratorModel {
    /// Fits `kind` to `series`, which must share one shape.
    pub fn fit<R: Rng + ?Sized>(kind: GeneratorKind, series: &[TimeSeries], cfg: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let shape = nets::common_shape(series)?;
        Ok(match kind {
            GeneratorKind::RandomWalk => GeneratorModel::RandomWalk { shape },
            GeneratorKind::Sinusoidal => GeneratorModel::Sinusoidal { shape, ranges: cfg.sinusoid },
            GeneratorKind::Gaussian => GeneratorModel::Gaussian(MgModel::fit(series)?),
            GeneratorKind::Gan => GeneratorModel::Gan(GanModel::train(series, cfg, rng)?.0),
            GeneratorKind::BetaVae => GeneratorModel::BetaVae(VaeModel::train(series, cfg, rng)?.0),
            GeneratorKind::Diffusion => GeneratorModel::Diffusion(DiffusionModel::train(series, cfg, rng)?.0),
        })
    }

    pub fn kind(&self) -> GeneratorKind {
        match self {
            GeneratorModel::RandomWalk { .. } => GeneratorKind::RandomWalk,
            GeneratorModel::Sinusoidal { .. } => GeneratorKind::Sinusoidal,
            GeneratorModel::Gaussian(_) => GeneratorKind::Gaussian,
            GeneratorModel::Gan(_) => GeneratorKind::Gan,
            GeneratorModel::BetaVae(_) => GeneratorKind::BetaVae,
            GeneratorModel::Diffusion(_) => GeneratorKind::Diffusion,
        }
    }

    /// `(channels, length)` of generated series.
    pub fn shape(&self) -> (usize, usize) {
        match self {
            GeneratorModel::RandomWalk { shape } | GeneratorModel::Sinusoidal { shape, .. } => *shape,
            GeneratorModel::Gaussian(m) => (m.channels, m.len),
            GeneratorModel::Gan(m) => m.shape,
            GeneratorModel::BetaVae(m) => m.shape,
            GeneratorModel::Diffusion(m) => m.shape,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<TimeSeries>> {
        let (c, l) = self.shape();
        match self {
            GeneratorModel::RandomWalk { .. } => Ok(random_walk(n, l, c, rng)),
            GeneratorModel::Sinusoidal { ranges, .. } => Ok(sinusoidal(n, l, c, ranges, rng)),
            GeneratorModel::Gaussian(m) => Ok(m.sample(n, rng)),
            GeneratorModel::Gan(m) => m.sample(n, rng),
            GeneratorModel::BetaVae(m) => m.sample(n, rng),
            GeneratorModel::Diffusion(m) => m.sample(n, rng),
        }
    }

    pub fn checkpoint(&self, cfg: &GeneratorConfig) -> Checkpoint {
        let (c, l) = self.shape();
        let meta = json!({ "generator": self.kind(), "shape": [c, l], "config": cfg });
        let params = match self {
            GeneratorModel::RandomWalk { .. } | GeneratorModel::Sinusoidal { .. } => ParamStore::new(),
            GeneratorModel::Gaussian(m) => {
                let mut store = ParamStore::new();
                let bins = m.mean[0].len();
                let flat = |rows: &Vec<Vec<num_complex::Complex64>>, f: fn(&num_complex::Complex64) -> f64| {
                    Tensor::new(&[c, bins], rows.iter().flatten().map(f).collect()).expect("rectangular")
                };
                store.add("mean.re", flat(&m.mean, |z| z.re));
                store.add("mean.im", flat(&m.mean, |z| z.im));
                store.add("var.re", flat(&m.var, |z| z.re));
                store.add("var.im", flat(&m.var, |z| z.im));
                store
            }
            GeneratorModel::Gan(m) => m.store.clone(),
            GeneratorModel::BetaVae(m) => m.store.clone(),
            GeneratorModel::Diffusion(m) => m.store.clone(),
        };
        Checkpoint { meta, params }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let serde = |e: serde_json::Error| Error::Serde(e.to_string());
        let kind: GeneratorKind = serde_json::from_value(ck.meta["generator"].clone()).map_err(serde)?;
        let cfg: GeneratorConfig = serde_json::from_value(ck.meta["config"].clone()).map_err(serde)?;
        let shape: (usize, usize) = serde_json::from_value(ck.meta["shape"].clone()).map_err(serde)?;
        let rng = &mut ChaCha8Rng::seed_from_u64(0);
        Ok(match kind {
            GeneratorKind::RandomWalk => GeneratorModel::RandomWalk { shape },
            GeneratorKind::Sinusoidal => GeneratorModel::Sinusoidal { shape, ranges: cfg.sinusoid },
            GeneratorKind::Gaussian => {
                let get = |name: &str| {
                    ck.params
                        .find(name)
                        .map(|id| ck.params.get(id).clone())
                        .ok_or_else(|| Error::Input(format!("MG checkpoint lacks {name}")))
                };
                let (mr, mi, vr, vi) = (get("mean.re")?, get("mean.im")?, get("var.re")?, get("var.im")?);
                let bins = mr.shape()[1];
                let rows = |re: &Tensor, im: &Tensor| {
                    re.data()
                        .chunks(bins)
                        .zip(im.data().chunks(bins))
                        .map(|(r, i)| r.iter().zip(i).map(|(&a, &b)| num_complex::Complex64::new(a, b)).collect())
                        .collect()
                };
                GeneratorModel::Gaussian(MgModel { channels: shape.0, len: shape.1, mean: rows(&mr, &mi), var: rows(&vr, &vi) })
            }
            GeneratorKind::Gan => {
                let mut m = GanModel::new(shape, cfg.width, cfg.latent, rng);
                m.store.load_from(&ck.params)?;
                GeneratorModel::Gan(m)
            }
            GeneratorKind::BetaVae => {
                let mut m = VaeModel::new(shape, cfg.width, cfg.latent, cfg.beta, rng);
                m.store.load_from(&ck.params)?;
                GeneratorModel::BetaVae(m)
            }
            GeneratorKind::Diffusion => {
                let mut m = DiffusionModel::new(shape, cfg.width, cfg.diffusion, rng)?;
                m.store.load_from(&ck.params)?;
                GeneratorModel::Diffusion(m)
            }
        })
    }

    pub fn save(&self, cfg: &GeneratorConfig, path: &Path) -> Result<()> {
        self.checkpoint(cfg).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
