//! Separation quality metrics and their aggregation.
//!
//! A perfect estimate yields `f64::INFINITY` from [`psnr`] and [`si_sdr`];
//! summaries replace it by a finite cap (see [`cap_score`]) so that medians
//! and means stay finite.

use ndarray::{ArrayView, ArrayView1, Dimension};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::seeded_rng;

/// Cap applied to the perfect-score sentinel in summaries, in dB.
pub const DEFAULT_SCORE_CAP_DB: f64 = 100.0;

/// `10 log10(peak^2 / MSE)`; `+inf` when the estimate is exact.
pub fn psnr<D: Dimension>(
    estimate: ArrayView<f64, D>,
    reference: ArrayView<f64, D>,
    peak: f64,
) -> Result<f64> {
    if estimate.shape() != reference.shape() {
        return Err(Error::Shape {
            op: "psnr",
            left: format!("{:?}", estimate.shape()),
            right: format!("{:?}", reference.shape()),
        });
    }
    if !(peak > 0.0) {
        return Err(Error::InvalidParam(format!("peak must be > 0, got {peak}")));
    }
    if estimate.is_empty() {
        return Err(Error::Empty("psnr of empty arrays".into()));
    }
    let mse = estimate
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / estimate.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Scale-invariant signal-to-distortion ratio in dB.
///
/// The reference is rescaled by the least-squares gain
/// `<estimate, reference> / ||reference||^2` before comparison.
pub fn si_sdr(estimate: ArrayView1<f64>, reference: ArrayView1<f64>) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape {
            op: "si_sdr",
            left: estimate.len().to_string(),
            right: reference.len().to_string(),
        });
    }
    let ref_energy: f64 = reference.iter().map(|x| x * x).sum();
    if ref_energy == 0.0 {
        return Err(Error::InvalidParam("si_sdr reference is all zeros".into()));
    }
    let dot: f64 = estimate.iter().zip(reference.iter()).map(|(a, b)| a * b).sum();
    let alpha = dot / ref_energy;
    let mut target = 0.0;
    let mut noise = 0.0;
    for (e, r) in estimate.iter().zip(reference.iter()) {
        let t = alpha * r;
        target += t * t;
        noise += (t - e) * (t - e);
    }
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (target / noise).log10())
}

/// Replaces the `+inf` sentinel by `cap`.
pub fn cap_score(x: f64, cap: f64) -> f64 {
    if x == f64::INFINITY {
        cap
    } else {
        x
    }
}

/// `sum_i w_i s_i` over simplex weights.
pub fn weighted_score(per_source: &[f64], weights: &[f64]) -> Result<f64> {
    if per_source.len() != weights.len() {
        return Err(Error::InvalidParam(format!(
            "{} scores but {} weights",
            per_source.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParam("metric weights must lie on the simplex".into()));
    }
    Ok(per_source
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(s, w)| s * w)
        .sum())
}

/// Weights that score only the signal of interest.
pub fn denoising_weights(sources: usize, signal: usize) -> Vec<f64> {
    (0..sources).map(|i| if i == signal { 1.0 } else { 0.0 }).collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Bootstrap standard error of the median from `resamples` seeded
/// resamples with replacement.
pub fn bootstrap_median_se(values: &[f64], resamples: usize, seed: u64) -> Option<f64> {
    if values.is_empty() || resamples < 2 {
        return None;
    }
    let mut rng = seeded_rng(seed, 0);
    let mut buf = vec![0.0; values.len()];
    let meds: Vec<f64> = (0..resamples)
        .map(|_| {
            for slot in buf.iter_mut() {
                *slot = values[rng.gen_range(0..values.len())];
            }
            median(&buf).expect("non-empty")
        })
        .collect();
    let mean = meds.iter().sum::<f64>() / resamples as f64;
    let var = meds.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (resamples - 1) as f64;
    Some(var.sqrt())
}
