//! Magnitude spectrogram features for audio, and resynthesis that reuses the
//! mixture phase through Wiener-type masks.
//!
//! Frames are centered with reflection padding of `n_fft / 2` samples on
//! each side and weighted by a periodic Hann window. Synthesis is
//! overlap-add with window-square normalization, exact for any hop at which
//! the squared window overlap-adds to a constant.

use std::f64::consts::PI;

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub window: Window,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            n_fft: 512,
            hop: 128,
            window: Window::Hann,
            sample_rate: 16_000,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn window_values(&self) -> Vec<f64> {
        match self.window {
            Window::Hann => (0..self.n_fft)
                .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / self.n_fft as f64).cos())
                .collect(),
        }
    }

    /// Checks the power-of-two size, the hop range and that the squared
    /// window overlap-adds to a constant at this hop.
    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 || !self.n_fft.is_power_of_two() {
            return Err(Error::InvalidParam(format!(
                "n_fft must be a power of two >= 2, got {}",
                self.n_fft
            )));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::InvalidParam(format!(
                "hop must lie in [1, n_fft], got {}",
                self.hop
            )));
        }
        let w = self.window_values();
        let sums: Vec<f64> = (0..self.hop)
            .map(|k| w.iter().skip(k).step_by(self.hop).map(|x| x * x).sum())
            .collect();
        let lo = sums.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(lo > 0.0) || (hi - lo) > 1e-9 * hi {
            return Err(Error::InvalidParam(format!(
                "window/hop pair ({}, {}) is not constant-overlap-add",
                self.n_fft, self.hop
            )));
        }
        Ok(())
    }
}

/// One-sided spectrogram, `bins x frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub magnitude: Array2<f64>,
    /// Radians in `(-pi, pi]`.
    pub phase: Array2<f64>,
    pub config: StftConfig,
    /// Length of the analysed signal in samples.
    pub length: usize,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.magnitude.ncols()
    }

    pub fn complex(&self) -> Array2<Complex<f64>> {
        let mut out = Array2::zeros(self.magnitude.dim());
        ndarray::Zip::from(&mut out)
            .and(&self.magnitude)
            .and(&self.phase)
            .for_each(|o, &m, &p| *o = Complex::from_polar(m, p));
        out
    }

    /// Builds a spectrogram from complex bins.
    pub fn from_complex(spec: &Array2<Complex<f64>>, config: StftConfig, length: usize) -> Self {
        Spectrogram {
            magnitude: spec.mapv(|c| c.norm()),
            phase: spec.mapv(wrapped_arg),
            config,
            length,
        }
    }
}

fn wrapped_arg(c: Complex<f64>) -> f64 {
    let a = c.arg();
    if a <= -PI {
        PI
    } else {
        a
    }
}

fn frame_count(len: usize, hop: usize) -> usize {
    1 + len / hop
}

fn reflect_pad(signal: &[f64], pad: usize) -> Vec<f64> {
    let n = signal.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|k| signal[k]));
    out.extend_from_slice(signal);
    out.extend((1..=pad).map(|k| signal[n - 1 - k]));
    out
}

/// Short-time Fourier transform of a real signal.
pub fn stft(signal: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let n = cfg.n_fft;
    if signal.len() < n {
        return Err(Error::InvalidParam(format!(
            "signal of {} samples is shorter than n_fft = {n}",
            signal.len()
        )));
    }
    let padded = reflect_pad(signal, n / 2);
    let frames = frame_count(signal.len(), cfg.hop);
    let window = cfg.window_values();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let bins = cfg.bins();
    let mut spec = Array2::<Complex<f64>>::zeros((bins, frames));
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..frames {
        let start = t * cfg.hop;
        for (k, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(padded[start + k] * window[k], 0.0);
        }
        fft.process(&mut buf);
        for (b, x) in buf.iter().take(bins).enumerate() {
            spec[[b, t]] = *x;
        }
    }
    Ok(Spectrogram::from_complex(&spec, *cfg, signal.len()))
}

/// Inverse of [`stft`] from complex bins.
pub fn istft_complex(spec: &Array2<Complex<f64>>, cfg: &StftConfig, length: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.n_fft;
    let bins = cfg.bins();
    if spec.nrows() != bins {
        return Err(shape_err("istft", spec.dim(), (bins, spec.ncols())));
    }
    let frames = spec.ncols();
    let window = cfg.window_values();
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let total = (frames - 1) * cfg.hop + n;
    let mut acc = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for (t, col) in spec.axis_iter(Axis(1)).enumerate() {
        for b in 0..bins {
            buf[b] = col[b];
        }
        // Hermitian completion; DC and Nyquist bins must be real
        buf[0].im = 0.0;
        buf[n / 2].im = 0.0;
        for b in 1..n / 2 {
            buf[n - b] = col[b].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for k in 0..n {
            acc[start + k] += buf[k].re / n as f64 * window[k];
            norm[start + k] += window[k] * window[k];
        }
    }
    let pad = n / 2;
    Ok((0..length)
        .map(|k| {
            let idx = pad + k;
            if idx < total && norm[idx] > 1e-12 {
                acc[idx] / norm[idx]
            } else {
                0.0
            }
        })
        .collect())
}

/// Overlap-add resynthesis of a spectrogram.
pub fn istft(spec: &Spectrogram) -> Result<Vec<f64>> {
    istft_complex(&spec.complex(), &spec.config, spec.length)
}

/// Complex source spectra `mask_i * mix`, with
/// `mask_i = mag_i / sum_j mag_j`; bins where the sum is `<= eps` are split
/// equally. The returned spectra sum to the mix spectrum.
pub fn masked_spectra(
    mix: &Spectrogram,
    source_mags: &[Array2<f64>],
    eps: f64,
) -> Result<Vec<Array2<Complex<f64>>>> {
    if source_mags.is_empty() {
        return Err(Error::InvalidParam("masking needs at least one source".into()));
    }
    for m in source_mags {
        if m.dim() != mix.magnitude.dim() {
            return Err(shape_err("apply_mask", m.dim(), mix.magnitude.dim()));
        }
    }
    let s = source_mags.len();
    let mix_c = mix.complex();
    let mut out = vec![Array2::<Complex<f64>>::zeros(mix_c.dim()); s];
    for ((r, c), &x) in mix_c.indexed_iter() {
        let total: f64 = source_mags.iter().map(|m| m[[r, c]]).sum();
        for (o, m) in out.iter_mut().zip(source_mags) {
            let mask = if total > eps {
                m[[r, c]] / total
            } else {
                1.0 / s as f64
            };
            o[[r, c]] = x * mask;
        }
    }
    Ok(out)
}

/// Time-domain source estimates from magnitude estimates and the mixture
/// phase.
pub fn apply_mask(mix: &Spectrogram, source_mags: &[Array2<f64>], eps: f64) -> Result<Vec<Vec<f64>>> {
    masked_spectra(mix, source_mags, eps)?
        .iter()
        .map(|spec| istft_complex(spec, &mix.config, mix.length))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::model::seeded_rng(seed, 0);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn config_validation() {
        assert!(StftConfig::default().validate().is_ok());
        let half = StftConfig { hop: 256, ..StftConfig::default() };
        assert!(half.validate().is_err());
        let odd = StftConfig { n_fft: 500, ..StftConfig::default() };
        assert!(odd.validate().is_err());
        let eighth = StftConfig { hop: 64, ..StftConfig::default() };
        assert!(eighth.validate().is_ok());
    }

    #[test]
    fn zero_signal_zero_magnitude() {
        let spec = stft(&vec![0.0; 2048], &StftConfig::default()).unwrap();
        assert!(spec.magnitude.iter().all(|&m| m == 0.0));
        assert_eq!(spec.magnitude.nrows(), 257);
        assert!(istft(&spec).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn short_signal_rejected() {
        assert!(stft(&[0.0; 100], &StftConfig::default()).is_err());
    }

    #[test]
    fn bin_frequency_sinusoid_concentrates() {
        let cfg = StftConfig::default();
        let k = 20;
        let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
        let x: Vec<f64> = (0..8000)
            .map(|t| (2.0 * PI * f * t as f64 / cfg.sample_rate as f64).sin())
            .collect();
        let spec = stft(&x, &cfg).unwrap();
        for t in 4..spec.frames() - 4 {
            let col = spec.magnitude.column(t);
            let total: f64 = col.iter().map(|m| m * m).sum();
            let near: f64 = (k - 1..=k + 1).map(|b| col[b] * col[b]).sum();
            // the periodic Hann spreads a bin-centred tone over bins k-1..k+1;
            // bin k alone carries 2/3 of the energy
            assert!(near >= 0.99 * total);
            assert!(col[k] * col[k] >= 0.66 * total);
        }
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = StftConfig::default();
        let x = noise(4096, 3);
        let spec = stft(&x, &cfg).unwrap();
        let padded = reflect_pad(&x, cfg.n_fft / 2);
        let w = cfg.window_values();
        let n = cfg.n_fft;
        for t in [0, 5, 17, spec.frames() - 1] {
            let e_time: f64 = (0..n).map(|k| (padded[t * cfg.hop + k] * w[k]).powi(2)).sum();
            let col = spec.magnitude.column(t);
            let mut e_freq = col[0] * col[0] + col[n / 2] * col[n / 2];
            e_freq += 2.0 * (1..n / 2).map(|b| col[b] * col[b]).sum::<f64>();
            e_freq /= n as f64;
            assert!((e_time - e_freq).abs() <= 1e-9 * e_time);
        }
    }

    #[test]
    fn round_trip_one_second() {
        let cfg = StftConfig::default();
        let x = noise(16_000, 9);
        let y = istft(&stft(&x, &cfg).unwrap()).unwrap();
        assert_eq!(y.len(), x.len());
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn synthesis_is_linear() {
        let cfg = StftConfig::default();
        let s1 = stft(&noise(3000, 1), &cfg).unwrap();
        let s2 = stft(&noise(3000, 2), &cfg).unwrap();
        let a = 0.7;
        let combined = (s1.complex() + s2.complex()).mapv(|c| c * a);
        let y = istft_complex(&combined, &cfg, 3000).unwrap();
        let y1 = istft(&s1).unwrap();
        let y2 = istft(&s2).unwrap();
        for k in 0..3000 {
            assert!((y[k] - a * (y1[k] + y2[k])).abs() < 1e-9);
        }
    }

    #[test]
    fn single_mask_returns_mix() {
        let cfg = StftConfig::default();
        let x = noise(2048, 4);
        let spec = stft(&x, &cfg).unwrap();
        let out = apply_mask(&spec, &[spec.magnitude.mapv(|m| 0.3 * m)], 1e-12).unwrap();
        let direct = istft(&spec).unwrap();
        assert_eq!(out[0], direct);
    }

    #[test]
    fn equal_masks_halve_the_mix() {
        let cfg = StftConfig::default();
        let x = noise(2048, 5);
        let spec = stft(&x, &cfg).unwrap();
        let m = spec.magnitude.clone();
        let out = apply_mask(&spec, &[m.clone(), m], 1e-12).unwrap();
        for k in 0..x.len() {
            assert!((out[0][k] - x[k] / 2.0).abs() < 1e-9);
            assert!((out[1][k] - x[k] / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn disjoint_masks_do_not_leak() {
        let cfg = StftConfig::default();
        let spec = stft(&noise(4096, 6), &cfg).unwrap();
        let low = Array2::from_shape_fn(spec.magnitude.dim(), |(b, _)| if b < 100 { 1.0 } else { 0.0 });
        let high = low.mapv(|v| 1.0 - v);
        let parts = masked_spectra(&spec, &[low, high], 1e-12).unwrap();
        let total: f64 = spec.magnitude.iter().map(|m| m * m).sum();
        let leak_low: f64 = parts[0].slice(ndarray::s![100.., ..]).iter().map(|c| c.norm_sqr()).sum();
        let leak_high: f64 = parts[1].slice(ndarray::s![..100, ..]).iter().map(|c| c.norm_sqr()).sum();
        assert!(leak_low < 1e-12 * total && leak_high < 1e-12 * total);
        let sum = &parts[0] + &parts[1];
        for (a, b) in sum.iter().zip(spec.complex().iter()) {
            assert!((a - b).norm() <= 1e-12 * b.norm().max(1e-300));
        }
    }

    #[test]
    fn phase_range() {
        let spec = stft(&noise(2048, 8), &StftConfig::default()).unwrap();
        assert!(spec.phase.iter().all(|&p| p > -PI && p <= PI));
        assert!(spec.magnitude.iter().all(|&m| m >= 0.0));
    }
}
