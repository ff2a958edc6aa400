//! Time-series containers, file formats, the four-way split, normalization,
//! and built-in synthetic datasets.

mod io;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

pub use io::{
    load_dataset, load_dataset_dir, read_jsonl, read_tsv, write_dataset_dir, write_jsonl, write_tsv, DatasetMeta,
    Format,
};
pub use split::{split, split_sizes, Example, SplitBundle, SplitIndices, TestSplit, SPLIT_RATIOS};
pub use synth::{synth_dataset, SynthKind, SynthSpec};

/// A `channels × length` series, stored channel-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    channels: usize,
    len: usize,
    values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(channels: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(channels >= 1, Input, "a series needs at least one channel");
        ensure!(
            !values.is_empty() && values.len().is_multiple_of(channels),
            Input,
            "{} values cannot form {channels} non-empty channels",
            values.len()
        );
        ensure!(values.iter().all(|v| v.is_finite()), Input, "series contains non-finite values");
        Ok(Self { channels, len: values.len() / channels, values })
    }

    pub fn univariate(values: Vec<f64>) -> Result<Self> {
        Self::new(1, values)
    }

    pub fn from_channels(channels: &[Vec<f64>]) -> Result<Self> {
        ensure!(!channels.is_empty(), Input, "a series needs at least one channel");
        let len = channels[0].len();
        ensure!(
            channels.iter().all(|c| c.len() == len),
            Input,
            "channels have unequal lengths"
        );
        Self::new(channels.len(), channels.concat())
    }

    /// Builds a series without the finiteness check; for generator output that is checked separately.
    pub(crate) fn from_raw(channels: usize, values: Vec<f64>) -> Self {
        debug_assert!(channels > 0 && values.len().is_multiple_of(channels));
        Self { channels, len: values.len() / channels, values }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.len..(c + 1) * self.len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.values[c * self.len..(c + 1) * self.len]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Linear interpolation of every channel onto `new_len` evenly spaced points.
    pub fn resample(&self, new_len: usize) -> TimeSeries {
        assert!(new_len >= 1);
        if new_len == self.len {
            return self.clone();
        }
        let mut out = Vec::with_capacity(self.channels * new_len);
        for c in 0..self.channels {
            out.extend(resample_linear(self.channel(c), new_len));
        }
        TimeSeries::from_raw(self.channels, out)
    }

    /// Contiguous sub-series `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> TimeSeries {
        assert!(start + len <= self.len && len > 0);
        let mut out = Vec::with_capacity(self.channels * len);
        for c in 0..self.channels {
            out.extend_from_slice(&self.channel(c)[start..start + len]);
        }
        TimeSeries::from_raw(self.channels, out)
    }
}

pub(crate) fn resample_linear(x: &[f64], new_len: usize) -> Vec<f64> {
    let n = x.len();
    if n == 1 || new_len == 1 {
        return vec![x[0]; new_len];
    }
    (0..new_len)
        .map(|i| {
            let pos = i as f64 * (n - 1) as f64 / (new_len - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            x[lo] * (1.0 - frac) + x[hi] * frac
        })
        .collect()
}

/// A series with its class label as it appears in the source file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSeries {
    pub series: TimeSeries,
    pub label: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<LabeledSeries>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<LabeledSeries>) -> Self {
        Self { name: name.into(), samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.samples.first().map_or(0, |s| s.series.channels())
    }

    /// Sorted distinct labels; a label's position is its class index.
    pub fn classes(&self) -> Vec<i64> {
        let mut labels: Vec<i64> = self.samples.iter().map(|s| s.label).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    pub fn median_len(&self) -> usize {
        median_len(self.samples.iter().map(|s| &s.series))
    }
}

pub(crate) fn median_len<'a>(series: impl Iterator<Item = &'a TimeSeries>) -> usize {
    let mut lens: Vec<usize> = series.map(TimeSeries::len).collect();
    if lens.is_empty() {
        return 0;
    }
    lens.sort_unstable();
    lens[lens.len() / 2]
}

/// Linearly resamples every series to `len`.
pub fn resample_all(series: &[TimeSeries], len: usize) -> Vec<TimeSeries> {
    series.iter().map(|s| s.resample(len)).collect()
}

/// Stacks series of identical shape into a `[n, channels, length]` tensor.
pub fn batch_tensor<'a>(series: impl IntoIterator<Item = &'a TimeSeries>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    let mut n = 0;
    for s in series {
        match shape {
            None => shape = Some((s.channels(), s.len())),
            Some(sh) => ensure!(
                sh == (s.channels(), s.len()),
                Dimension,
                "batch mixes series of shape {:?} and {:?}",
                sh,
                (s.channels(), s.len())
            ),
        }
        data.extend_from_slice(s.values());
        n += 1;
    }
    let (c, l) = shape.ok_or_else(|| crate::Error::Usage("empty batch".into()))?;
    Tensor::new(&[n, c, l], data)
}

/// Per-series normalization policy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Off,
    #[default]
    PerSeries,
}

/// Z-normalizes each channel in place; constant channels become zeros.
pub fn znormalize(series: &mut TimeSeries, mode: NormMode) {
    if mode == NormMode::Off {
        return;
    }
    for c in 0..series.channels() {
        let ch = series.channel_mut(c);
        let n = ch.len() as f64;
        let mean = ch.iter().sum::<f64>() / n;
        let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std <= 1e-12 * mean.abs().max(1.0) {
            ch.iter_mut().for_each(|v| *v = 0.0);
        } else {
            ch.iter_mut().for_each(|v| *v = (*v - mean) / std);
        }
    }
}

pub fn znormalize_all<'a>(series: impl IntoIterator<Item = &'a mut TimeSeries>, mode: NormMode) {
    for s in series {
        znormalize(s, mode);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_std(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (m, (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
    }

    #[test]
    fn znorm_examples() {
        let mut s = TimeSeries::univariate(vec![1.0, 2.0, 3.0]).unwrap();
        znormalize(&mut s, NormMode::PerSeries);
        let (m, sd) = mean_std(s.values());
        assert!(m.abs() < 1e-15 && (sd - 1.0).abs() < 1e-12);

        let mut c = TimeSeries::univariate(vec![4.0; 5]).unwrap();
        znormalize(&mut c, NormMode::PerSeries);
        assert_eq!(c.values(), &[0.0; 5]);

        let mut off = TimeSeries::univariate(vec![1.0, 5.0]).unwrap();
        znormalize(&mut off, NormMode::Off);
        assert_eq!(off.values(), &[1.0, 5.0]);
    }

    #[test]
    fn znorm_idempotent() {
        let mut s = TimeSeries::from_channels(&[vec![0.3, -1.2, 4.5, 2.2], vec![9.0, 9.5, 7.0, 1.0]]).unwrap();
        znormalize(&mut s, NormMode::PerSeries);
        let once = s.clone();
        znormalize(&mut s, NormMode::PerSeries);
        for (a, b) in once.values().iter().zip(s.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_endpoints_and_midpoints() {
        let s = TimeSeries::univariate(vec![0.0, 2.0, 4.0]).unwrap();
        assert_eq!(s.resample(5).values(), &[0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.resample(3), s);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(TimeSeries::univariate(vec![1.0, f64::NAN]).is_err());
        assert!(TimeSeries::from_channels(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
