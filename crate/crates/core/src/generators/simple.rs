use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeries;
use crate::error::{ensure, Result};
use crate::fft::{irfft, rfft, HalfSpectrum};

/// Walks starting at 0 with i.i.d. standard normal increments, channels independent.
pub fn random_walk<R: Rng + ?Sized>(n: usize, len: usize, channels: usize, rng: &mut R) -> Vec<TimeSeries> {
    (0..n)
        .map(|_| {
            let mut values = Vec::with_capacity(len * channels);
            for _ in 0..channels {
                let mut x = 0.0;
                values.push(x);
                for _ in 1..len {
                    x += rng.sample::<f64, _>(StandardNormal);
                    values.push(x);
                }
            }
            TimeSeries::from_raw(channels, values)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinusoidRanges {
    pub amplitude: (f64, f64),
    /// Lower bound in cycles per series; the upper bound is `len / 4`.
    pub min_cycles: f64,
    pub offset: (f64, f64),
}

impl Default for SinusoidRanges {
    fn default() -> Self {
        Self { amplitude: (0.5, 2.0), min_cycles: 1.0, offset: (-1.0, 1.0) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub cycles: f64,
    pub phase: f64,
    pub offset: f64,
}

impl Sinusoid {
    pub fn sample<R: Rng + ?Sized>(ranges: &SinusoidRanges, len: usize, rng: &mut R) -> Self {
        let hi = (len as f64 / 4.0).max(ranges.min_cycles);
        let draw = |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        Self {
            amplitude: draw(rng, ranges.amplitude),
            cycles: draw(rng, (ranges.min_cycles, hi)),
            phase: rng.random_range(0.0..2.0 * PI),
            offset: draw(rng, ranges.offset),
        }
    }

    pub fn at(&self, t: usize, len: usize) -> f64 {
        self.amplitude * (2.0 * PI * self.cycles * t as f64 / len as f64 + self.phase).sin() + self.offset
    }
}

/// Sum of two sinusoids per channel.
pub fn render_sinusoids(parts: &[[Sinusoid; 2]], len: usize) -> TimeSeries {
    let values = parts.iter().flat_map(|[a, b]| (0..len).map(move |t| a.at(t, len) + b.at(t, len))).collect();
    TimeSeries::from_raw(parts.len(), values)
}

pub fn sinusoidal<R: Rng + ?Sized>(
    n: usize,
    len: usize,
    channels: usize,
    ranges: &SinusoidRanges,
    rng: &mut R,
) -> Vec<TimeSeries> {
    (0..n)
        .map(|_| {
            let parts: Vec<[Sinusoid; 2]> = (0..channels)
                .map(|_| [Sinusoid::sample(ranges, len, rng), Sinusoid::sample(ranges, len, rng)])
                .collect();
            render_sinusoids(&parts, len)
        })
        .collect()
}

/// Independent Gaussians over the real and imaginary part of every frequency bin.
#[derive(Clone, Debug, PartialEq)]
pub struct MgModel {
    pub channels: usize,
    pub len: usize,
    /// `[channel][bin]` means of the real and imaginary parts.
    pub mean: Vec<Vec<Complex64>>,
    /// `[channel][bin]` sample variances of the real and imaginary parts.
    pub var: Vec<Vec<Complex64>>,
}

impl MgModel {
    pub fn fit(series: &[TimeSeries]) -> Result<Self> {
        ensure!(series.len() >= 2, Input, "fitting MG needs at least 2 series, got {}", series.len());
        let (channels, len) = (series[0].channels(), series[0].len());
        ensure!(
            series.iter().all(|s| s.channels() == channels && s.len() == len),
            Input,
            "MG needs series of a common shape; resample first"
        );
        let n = series.len() as f64;
        let bins = len / 2 + 1;
        let mut mean = vec![vec![Complex64::new(0.0, 0.0); bins]; channels];
        let mut var = mean.clone();
        for c in 0..channels {
            let spectra: Vec<HalfSpectrum> = series.iter().map(|s| rfft(s.channel(c))).collect();
            for k in 0..bins {
                let m = spectra.iter().map(|s| s.bins[k]).sum::<Complex64>() / n;
                let (vr, vi) = spectra.iter().fold((0.0, 0.0), |(vr, vi), s| {
                    let d = s.bins[k] - m;
                    (vr + d.re * d.re, vi + d.im * d.im)
                });
                mean[c][k] = m;
                var[c][k] = Complex64::new(vr / (n - 1.0), vi / (n - 1.0));
            }
        }
        Ok(Self { channels, len, mean, var })
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<TimeSeries> {
        (0..n)
            .map(|_| {
                let mut values = Vec::with_capacity(self.channels * self.len);
                for c in 0..self.channels {
                    let bins = self.mean[c]
                        .iter()
                        .zip(&self.var[c])
                        .map(|(m, v)| {
                            let zr: f64 = rng.sample(StandardNormal);
                            let zi: f64 = rng.sample(StandardNormal);
                            Complex64::new(m.re + v.re.sqrt() * zr, m.im + v.im.sqrt() * zi)
                        })
                        .collect();
                    values.extend(irfft(&HalfSpectrum { bins, n: self.len }));
                }
                TimeSeries::from_raw(self.channels, values)
            })
            .collect()
    }
}
