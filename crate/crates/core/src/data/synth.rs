use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledSeries, TimeSeries};
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Sine, square and sawtooth shapes.
    ThreeClassWaves,
    /// Slow against fast sinusoids.
    TwoClassFreq,
    /// Noisy copies of three fixed random-walk prototypes.
    GaussianBlobsWalk,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::ThreeClassWaves => "three-class-waves",
            SynthKind::TwoClassFreq => "two-class-freq",
            SynthKind::GaussianBlobsWalk => "gaussian-blobs-walk",
        }
    }

    pub fn classes(self) -> usize {
        match self {
            SynthKind::TwoClassFreq => 2,
            _ => 3,
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SynthKind::ThreeClassWaves, SynthKind::TwoClassFreq, SynthKind::GaussianBlobsWalk]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown synthetic dataset {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n: usize,
    pub length: usize,
    pub noise: f64,
}

/// Shape of class `class` of `ThreeClassWaves` at phase `u ∈ [0, 1)` of a cycle.
pub fn wave_template(class: usize, u: f64) -> f64 {
    let u = u.rem_euclid(1.0);
    match class {
        0 => (2.0 * PI * u).sin(),
        1 => {
            if u < 0.5 {
                1.0
            } else {
                -1.0
            }
        }
        _ => 2.0 * u - 1.0,
    }
}

pub const WAVE_CYCLES: f64 = 3.0;

/// Balanced labeled dataset; sample `i` has label `i mod classes`.
pub fn synth_dataset<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<Dataset> {
    ensure!(spec.n >= 1 && spec.length >= 2, Usage, "synthetic dataset needs n ≥ 1 and length ≥ 2");
    ensure!(spec.noise >= 0.0, Usage, "noise must be non-negative");
    let k = spec.kind.classes();
    let l = spec.length;
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Usage(e.to_string()))?;
    let prototypes: Vec<Vec<f64>> = if spec.kind == SynthKind::GaussianBlobsWalk {
        let mut proto_rng = ChaCha8Rng::seed_from_u64(0x5eed_b10b);
        (0..k)
            .map(|_| {
                let mut acc = 0.0;
                (0..l)
                    .map(|_| {
                        acc += Normal::new(0.0, 1.0).unwrap().sample(&mut proto_rng);
                        acc
                    })
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut samples = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let class = i % k;
        let values: Vec<f64> = match spec.kind {
            SynthKind::ThreeClassWaves => {
                let amp = rng.random_range(0.5..1.5);
                let offset = rng.random_range(-0.5..0.5);
                (0..l)
                    .map(|t| amp * wave_template(class, WAVE_CYCLES * t as f64 / l as f64) + offset)
                    .collect()
            }
            SynthKind::TwoClassFreq => {
                let cycles = if class == 0 { 2.0 } else { 6.0 };
                let phase = rng.random_range(0.0..2.0 * PI);
                let amp = rng.random_range(0.5..1.5);
                (0..l).map(|t| amp * (2.0 * PI * cycles * t as f64 / l as f64 + phase).sin()).collect()
            }
            SynthKind::GaussianBlobsWalk => prototypes[class].clone(),
        };
        let values = values.into_iter().map(|v| v + noise.sample(rng)).collect();
        samples.push(LabeledSeries { series: TimeSeries::univariate(values)?, label: class as i64 });
    }
    Ok(Dataset::new(spec.kind.name(), samples))
}
