//! Augmentation bank, overlapping crops, and frequency-domain perturbation.
//!
//! Additive augmentations (slope, spike, step) and jitter are scaled by the
//! per-channel standard deviation, or by 1 for constant channels.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeries;
use crate::error::{ensure, Error, Result};
use crate::fft::HalfSpectrum;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Jitter,
    Scaling,
    Negation,
    Smoothing,
    MagnitudeWarp,
    TimeWarp,
    CircularShift,
    AddSlope,
    AddSpike,
    AddStep,
    Mask,
    Crop,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 12] = [
        AugmentKind::Jitter,
        AugmentKind::Scaling,
        AugmentKind::Negation,
        AugmentKind::Smoothing,
        AugmentKind::MagnitudeWarp,
        AugmentKind::TimeWarp,
        AugmentKind::CircularShift,
        AugmentKind::AddSlope,
        AugmentKind::AddSpike,
        AugmentKind::AddStep,
        AugmentKind::Mask,
        AugmentKind::Crop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::Jitter => "jitter",
            AugmentKind::Scaling => "scaling",
            AugmentKind::Negation => "negation",
            AugmentKind::Smoothing => "smoothing",
            AugmentKind::MagnitudeWarp => "magnitude_warp",
            AugmentKind::TimeWarp => "time_warp",
            AugmentKind::CircularShift => "circular_shift",
            AugmentKind::AddSlope => "add_slope",
            AugmentKind::AddSpike => "add_spike",
            AugmentKind::AddStep => "add_step",
            AugmentKind::Mask => "mask",
            AugmentKind::Crop => "crop",
        }
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown augmentation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    /// Jitter noise as a multiple of the channel std.
    pub jitter_sigma: f64,
    pub scale_range: (f64, f64),
    /// Odd moving-average width.
    pub smooth_window: usize,
    pub warp_knots: usize,
    pub warp_sigma: f64,
    /// Largest circular shift as a fraction of the length.
    pub shift_fraction: f64,
    /// Largest end-to-end rise of the added trend, in channel stds.
    pub slope_max: f64,
    pub spike_magnitude: f64,
    pub step_height: f64,
    pub mask_fraction: f64,
    pub crop_fraction: (f64, f64),
    /// Fraction of frequency bins zeroed by [`frequency_augment`].
    pub freq_remove_fraction: f64,
    /// Fraction of frequency bins receiving an added component.
    pub freq_add_fraction: f64,
    /// Added component magnitude relative to the largest bin.
    pub freq_add_scale: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.03,
            scale_range: (0.7, 1.4),
            smooth_window: 5,
            warp_knots: 4,
            warp_sigma: 0.2,
            shift_fraction: 1.0,
            slope_max: 1.0,
            spike_magnitude: 3.0,
            step_height: 1.0,
            mask_fraction: 0.1,
            crop_fraction: (0.5, 0.9),
            freq_remove_fraction: 0.1,
            freq_add_fraction: 0.1,
            freq_add_scale: 0.1,
        }
    }
}

impl AugmentParams {
    /// Settings under which every kind except negation returns its input.
    pub fn identity() -> Self {
        Self {
            jitter_sigma: 0.0,
            scale_range: (1.0, 1.0),
            smooth_window: 1,
            warp_knots: 4,
            warp_sigma: 0.0,
            shift_fraction: 0.0,
            slope_max: 0.0,
            spike_magnitude: 0.0,
            step_height: 0.0,
            mask_fraction: 0.0,
            crop_fraction: (1.0, 1.0),
            freq_remove_fraction: 0.0,
            freq_add_fraction: 0.0,
            freq_add_scale: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        ensure!(self.jitter_sigma >= 0.0 && self.warp_sigma >= 0.0, Config, "noise scales must be non-negative");
        ensure!(self.scale_range.0 <= self.scale_range.1, Config, "scale_range must be ordered");
        ensure!(self.smooth_window % 2 == 1, Config, "smooth_window must be odd");
        ensure!(self.warp_knots >= 1, Config, "warp_knots must be at least 1");
        ensure!(
            frac(self.shift_fraction) && frac(self.mask_fraction) && frac(self.freq_remove_fraction) && frac(self.freq_add_fraction),
            Config,
            "fractions must lie in [0, 1]"
        );
        ensure!(
            self.crop_fraction.0 > 0.0 && self.crop_fraction.0 <= self.crop_fraction.1 && self.crop_fraction.1 <= 1.0,
            Config,
            "crop_fraction must satisfy 0 < lo ≤ hi ≤ 1"
        );
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn channel_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let s = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    if s > 1e-12 {
        s
    } else {
        1.0
    }
}

/// Uniform draw over the whole bank.
pub fn sample_one_augmentation<R: Rng + ?Sized>(rng: &mut R) -> AugmentKind {
    AugmentKind::ALL[rng.random_range(0..AugmentKind::ALL.len())]
}

/// Applies one augmentation; the output always has the input's shape.
pub fn augment<R: Rng + ?Sized>(kind: AugmentKind, x: &TimeSeries, p: &AugmentParams, rng: &mut R) -> TimeSeries {
    let l = x.len();
    let mut out = x.clone();
    match kind {
        AugmentKind::Jitter => {
            if p.jitter_sigma > 0.0 {
                for c in 0..x.channels() {
                    let sd = p.jitter_sigma * channel_std(x.channel(c));
                    for v in out.channel_mut(c) {
                        *v += sd * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
        }
        AugmentKind::Scaling => {
            let s = uniform(rng, p.scale_range.0, p.scale_range.1);
            out.values_mut().iter_mut().for_each(|v| *v *= s);
        }
        AugmentKind::Negation => out.values_mut().iter_mut().for_each(|v| *v = -*v),
        AugmentKind::Smoothing => {
            let h = p.smooth_window / 2;
            if h > 0 {
                for c in 0..x.channels() {
                    let src = x.channel(c);
                    let dst = out.channel_mut(c);
                    for (t, d) in dst.iter_mut().enumerate() {
                        let (lo, hi) = (t.saturating_sub(h), (t + h).min(l - 1));
                        *d = src[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
                    }
                }
            }
        }
        AugmentKind::MagnitudeWarp => {
            if p.warp_sigma > 0.0 {
                let noise = Normal::new(1.0, p.warp_sigma).expect("checked sigma");
                for c in 0..x.channels() {
                    let knots: Vec<f64> = (0..p.warp_knots + 2).map(|_| noise.sample(rng)).collect();
                    let curve = knot_curve(&knots, l);
                    out.channel_mut(c).iter_mut().zip(curve).for_each(|(v, m)| *v *= m);
                }
            }
        }
        AugmentKind::TimeWarp => {
            if p.warp_sigma > 0.0 && l > 1 {
                let noise = Normal::new(1.0, p.warp_sigma).expect("checked sigma");
                let speeds: Vec<f64> = (0..p.warp_knots + 1).map(|_| noise.sample(rng).max(0.1)).collect();
                let warp = monotone_time_warp(&speeds, l);
                for c in 0..x.channels() {
                    let src = x.channel(c);
                    for (d, &pos) in out.channel_mut(c).iter_mut().zip(&warp) {
                        *d = interp(src, pos);
                    }
                }
            }
        }
        AugmentKind::CircularShift => {
            let max = (p.shift_fraction * l as f64).round() as usize;
            let s = rng.random_range(0..=max);
            out = circular_shift(x, s);
        }
        AugmentKind::AddSlope => {
            let a = uniform(rng, -p.slope_max, p.slope_max);
            for c in 0..x.channels() {
                let sd = channel_std(x.channel(c));
                let denom = (l.max(2) - 1) as f64;
                out.channel_mut(c).iter_mut().enumerate().for_each(|(t, v)| *v += a * sd * t as f64 / denom);
            }
        }
        AugmentKind::AddSpike => {
            let t = rng.random_range(0..l);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            for c in 0..x.channels() {
                let sd = channel_std(x.channel(c));
                out.channel_mut(c)[t] += sign * p.spike_magnitude * sd;
            }
        }
        AugmentKind::AddStep => {
            let t0 = rng.random_range(0..l);
            let h = uniform(rng, -p.step_height, p.step_height);
            for c in 0..x.channels() {
                let sd = channel_std(x.channel(c));
                out.channel_mut(c)[t0..].iter_mut().for_each(|v| *v += h * sd);
            }
        }
        AugmentKind::Mask => {
            let w = (p.mask_fraction * l as f64).round() as usize;
            if w > 0 {
                let start = rng.random_range(0..=l - w);
                for c in 0..x.channels() {
                    out.channel_mut(c)[start..start + w].fill(0.0);
                }
            }
        }
        AugmentKind::Crop => {
            let frac = uniform(rng, p.crop_fraction.0, p.crop_fraction.1);
            let w = ((frac * l as f64).round() as usize).clamp(2.min(l), l);
            if w < l {
                let start = rng.random_range(0..=l - w);
                out = x.slice(start, w).resample(l);
            }
        }
    }
    out
}

pub fn circular_shift(x: &TimeSeries, shift: usize) -> TimeSeries {
    let mut out = x.clone();
    let l = x.len();
    for c in 0..x.channels() {
        out.channel_mut(c).rotate_right(shift % l);
    }
    out
}

fn interp(x: &[f64], pos: f64) -> f64 {
    let pos = pos.clamp(0.0, (x.len() - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(x.len() - 1);
    let f = pos - lo as f64;
    x[lo] * (1.0 - f) + x[hi] * f
}

/// Catmull-Rom curve through evenly spaced knot values, evaluated at `l` points.
fn knot_curve(knots: &[f64], l: usize) -> Vec<f64> {
    let k = knots.len();
    let at = |i: isize| knots[i.clamp(0, k as isize - 1) as usize];
    (0..l)
        .map(|t| {
            let u = if l > 1 { t as f64 * (k - 1) as f64 / (l - 1) as f64 } else { 0.0 };
            let i = (u.floor() as isize).min(k as isize - 2);
            let s = u - i as f64;
            let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
            0.5 * (2.0 * p1
                + (-p0 + p2) * s
                + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * s * s
                + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * s * s * s)
        })
        .collect()
}

/// Monotone map of `[0, l-1]` onto itself from positive per-segment speeds,
/// interpolated with Fritsch-Carlson cubic Hermite splines.
fn monotone_time_warp(speeds: &[f64], l: usize) -> Vec<f64> {
    let segs = speeds.len();
    let mut ys = vec![0.0];
    for s in speeds {
        ys.push(ys.last().unwrap() + s);
    }
    let total = *ys.last().unwrap();
    let end = (l - 1) as f64;
    ys.iter_mut().for_each(|y| *y *= end / total);
    let xs: Vec<f64> = (0..=segs).map(|i| end * i as f64 / segs as f64).collect();
    let h = xs[1] - xs[0];
    let delta: Vec<f64> = ys.windows(2).map(|w| (w[1] - w[0]) / h).collect();
    let mut m = vec![0.0; segs + 1];
    m[0] = delta[0];
    m[segs] = delta[segs - 1];
    for i in 1..segs {
        m[i] = if delta[i - 1] * delta[i] > 0.0 { 2.0 / (1.0 / delta[i - 1] + 1.0 / delta[i]) } else { 0.0 };
    }
    (0..l)
        .map(|t| {
            let x = t as f64;
            let i = ((x / h).floor() as usize).min(segs - 1);
            let s = (x - xs[i]) / h;
            let (h00, h10) = (2.0 * s.powi(3) - 3.0 * s * s + 1.0, s.powi(3) - 2.0 * s * s + s);
            let (h01, h11) = (-2.0 * s.powi(3) + 3.0 * s * s, s.powi(3) - s * s);
            (h00 * ys[i] + h10 * h * m[i] + h01 * ys[i + 1] + h11 * h * m[i + 1]).clamp(0.0, end)
        })
        .collect()
}

/// Two overlapping windows `[a0, a1)` and `[b0, b1)` with `a0 ≤ b0 < a1 ≤ b1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindows {
    pub a: (usize, usize),
    pub b: (usize, usize),
}

impl CropWindows {
    pub fn new(a: (usize, usize), b: (usize, usize)) -> Result<Self> {
        ensure!(a.0 < a.1 && b.0 < b.1, Usage, "crop windows must be non-empty");
        let w = Self { a, b };
        ensure!(w.overlap().0 < w.overlap().1, Usage, "crops {a:?} and {b:?} do not overlap");
        Ok(w)
    }

    pub fn overlap(&self) -> (usize, usize) {
        (self.a.0.max(self.b.0), self.a.1.min(self.b.1))
    }

    pub fn overlap_len(&self) -> usize {
        let (s, e) = self.overlap();
        e.saturating_sub(s)
    }

    /// Start of the overlap within crop `a` and within crop `b`.
    pub fn overlap_offsets(&self) -> (usize, usize) {
        let s = self.overlap().0;
        (s - self.a.0, s - self.b.0)
    }

    pub fn shifted(&self, by: isize) -> Self {
        let f = |v: usize| (v as isize + by) as usize;
        Self { a: (f(self.a.0), f(self.a.1)), b: (f(self.b.0), f(self.b.1)) }
    }
}

/// Crop windows sampled once per batch; every sample shifts them by its own offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropPlan {
    pub windows: CropWindows,
    /// Inclusive range of admissible per-sample shifts.
    pub shift_range: (isize, isize),
}

/// Minimum overlap length drawn by [`sample_crop_plan`].
pub const MIN_CROP_OVERLAP: usize = 8;

/// Draws overlapping windows on a length-`l` axis.
///
/// When `align` > 1, window starts differ by a multiple of `align` so strided
/// encoders see the overlap on a common grid.
pub fn sample_crop_plan<R: Rng + ?Sized>(l: usize, align: usize, rng: &mut R) -> Result<CropPlan> {
    ensure!(l >= 8, Input, "series of length {l} is too short to crop (need ≥ 8)");
    let align = align.max(1);
    let crop_l = rng.random_range(MIN_CROP_OVERLAP..=l);
    let left = rng.random_range(0..=l - crop_l);
    let right = left + crop_l;
    let eleft = left - align * rng.random_range(0..=left / align);
    let eright = rng.random_range(right..=l);
    let windows = CropWindows { a: (eleft, right), b: (left, eright) };
    let shift_range = (-(eleft as isize), (l - eright) as isize);
    Ok(CropPlan { windows, shift_range })
}

impl CropPlan {
    /// Per-sample shift keeping the parity of the window starts when `align` is even.
    pub fn sample_shift<R: Rng + ?Sized>(&self, align: usize, rng: &mut R) -> isize {
        let align = align.max(1) as isize;
        let (lo, hi) = self.shift_range;
        let lo_k = (lo as f64 / align as f64).ceil() as isize;
        let hi_k = (hi as f64 / align as f64).floor() as isize;
        align * (lo_k + rng.random_range(0..=(hi_k - lo_k) as usize) as isize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropPair {
    pub x0: TimeSeries,
    pub x1: TimeSeries,
    pub windows: CropWindows,
}

/// Exact slices of `x` over the two windows.
pub fn crop_pair_at(x: &TimeSeries, windows: CropWindows) -> Result<CropPair> {
    ensure!(windows.a.1 <= x.len() && windows.b.1 <= x.len(), Usage, "crop windows exceed series length {}", x.len());
    Ok(CropPair {
        x0: x.slice(windows.a.0, windows.a.1 - windows.a.0),
        x1: x.slice(windows.b.0, windows.b.1 - windows.b.0),
        windows,
    })
}

/// Two random overlapping contiguous crops of `x`.
pub fn crop_pair<R: Rng + ?Sized>(x: &TimeSeries, rng: &mut R) -> Result<CropPair> {
    let plan = sample_crop_plan(x.len(), 1, rng)?;
    let shift = plan.sample_shift(1, rng);
    crop_pair_at(x, plan.windows.shifted(shift))
}

/// Zeroes a random subset of bins and adds random components to another subset.
///
/// Self-conjugate bins only ever receive real additions, so the result stays the
/// half-spectrum of a real signal.
pub fn frequency_augment<R: Rng + ?Sized>(spectrum: &HalfSpectrum, p: &AugmentParams, rng: &mut R) -> HalfSpectrum {
    let mut out = spectrum.clone();
    let max_mag = spectrum.bins.iter().map(|c| c.norm()).fold(0.0, f64::max);
    for k in 0..out.len() {
        if rng.random::<f64>() < p.freq_remove_fraction {
            out.bins[k] = Complex64::new(0.0, 0.0);
        }
        if rng.random::<f64>() < p.freq_add_fraction {
            let mag = rng.random::<f64>() * p.freq_add_scale * max_mag;
            let add = if out.is_self_conjugate(k) {
                Complex64::new(if rng.random::<bool>() { mag } else { -mag }, 0.0)
            } else {
                Complex64::from_polar(mag, rng.random_range(0.0..std::f64::consts::TAU))
            };
            out.bins[k] += add;
        }
    }
    out
}

/// Removes bin `k`.
pub fn remove_frequency(spectrum: &HalfSpectrum, k: usize) -> HalfSpectrum {
    let mut out = spectrum.clone();
    out.bins[k] = Complex64::new(0.0, 0.0);
    out
}
