//! Real-signal FFT helpers over `rustfft`.

use std::cell::RefCell;

use num_complex::Complex64;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Non-negative-frequency half of the spectrum of a real signal of length `n`.
///
/// Holds `n / 2 + 1` bins. Bin 0, and bin `n / 2` for even `n`, are real.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfSpectrum {
    pub bins: Vec<Complex64>,
    pub n: usize,
}

impl HalfSpectrum {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    /// Whether bin `k` must stay real for the signal to be real.
    pub fn is_self_conjugate(&self, k: usize) -> bool {
        k == 0 || (self.n.is_multiple_of(2) && k == self.n / 2)
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.norm()).collect()
    }

    /// Full length-`n` spectrum by conjugate symmetry.
    pub fn full(&self) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.n];
        for (k, &c) in self.bins.iter().enumerate() {
            out[k] = c;
            if k != 0 && k < self.n - k {
                out[self.n - k] = c.conj();
            }
        }
        out
    }
}

fn transform(buf: &mut [Complex64], inverse: bool) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let fft = if inverse { p.plan_fft_inverse(buf.len()) } else { p.plan_fft_forward(buf.len()) };
        fft.process(buf);
    });
}

pub fn rfft(x: &[f64]) -> HalfSpectrum {
    let n = x.len();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(&mut buf, false);
    buf.truncate(n / 2 + 1);
    HalfSpectrum { bins: buf, n }
}

/// Complex inverse of the full spectrum, scaled by `1/n`.
pub fn ifft_full(spectrum: &[Complex64]) -> Vec<Complex64> {
    let mut buf = spectrum.to_vec();
    transform(&mut buf, true);
    let n = buf.len() as f64;
    buf.iter_mut().for_each(|c| *c /= n);
    buf
}

/// Real inverse; imaginary parts of self-conjugate bins are ignored.
pub fn irfft(spec: &HalfSpectrum) -> Vec<f64> {
    let mut half = spec.clone();
    for k in 0..half.len() {
        if half.is_self_conjugate(k) {
            half.bins[k].im = 0.0;
        }
    }
    ifft_full(&half.full()).into_iter().map(|c| c.re).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(t, &v)| Complex64::from_polar(v, -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn matches_naive_dft() {
        for n in [1, 2, 5, 8, 13] {
            let x: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 5) as f64 - 1.3).collect();
            let fast = rfft(&x);
            let slow = naive_dft(&x);
            assert_eq!(fast.len(), n / 2 + 1);
            for (a, b) in fast.bins.iter().zip(&slow) {
                assert!((a - b).norm() < 1e-10);
            }
            for (a, b) in fast.full().iter().zip(&slow) {
                assert!((a - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn round_trip() {
        for n in [3, 8, 64, 65] {
            let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin() + 0.1 * i as f64).collect();
            let back = irfft(&rfft(&x));
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_has_only_dc() {
        let s = rfft(&[2.5; 16]);
        assert!((s.bins[0].re - 40.0).abs() < 1e-12);
        assert!(s.bins[1..].iter().all(|c| c.norm() < 1e-12));
    }
}
