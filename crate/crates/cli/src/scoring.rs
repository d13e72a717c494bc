//! Per-sample scoring shared by `separate`, `eval` and `tune`.

use anmf_core::metrics::{cap_score, median, psnr, si_sdr, weighted_score, DEFAULT_SCORE_CAP_DB};
use anyhow::{bail, Result};
use ndarray::Array2;

use crate::config::MetricName;

/// Scores of every sample (column): `scores[k][i]` for source `i`.
/// PSNR estimates are clipped to `[0, peak]` first.
pub fn score_columns(
    estimates: &[Array2<f64>],
    references: &[Array2<f64>],
    metric: MetricName,
    peak: f64,
) -> Result<Vec<Vec<f64>>> {
    if estimates.len() != references.len() {
        bail!("{} estimates but {} references", estimates.len(), references.len());
    }
    for (e, r) in estimates.iter().zip(references) {
        if e.dim() != r.dim() {
            bail!("estimate shape {:?} does not match reference shape {:?}", e.dim(), r.dim());
        }
    }
    let n = references.first().map_or(0, |r| r.ncols());
    (0..n)
        .map(|k| {
            estimates
                .iter()
                .zip(references)
                .map(|(e, r)| {
                    let (e, r) = (e.column(k), r.column(k));
                    Ok(match metric {
                        MetricName::Psnr => psnr(e.mapv(|x| x.clamp(0.0, peak)).view(), r, peak)?,
                        MetricName::Sisdr => si_sdr(e, r)?,
                    })
                })
                .collect()
        })
        .collect()
}

pub fn weighted(scores: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    scores
        .iter()
        .map(|s| Ok(weighted_score(s, weights)?))
        .collect()
}

/// Median of capped scores.
pub fn capped_median(values: &[f64]) -> Option<f64> {
    let capped: Vec<f64> = values.iter().map(|&x| cap_score(x, DEFAULT_SCORE_CAP_DB)).collect();
    median(&capped)
}
