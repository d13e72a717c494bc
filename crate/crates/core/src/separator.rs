//! Test-time separation: fit the concatenated bases to each mixed column,
//! split the latents per source and reallocate the mix with a Wiener-type
//! filter so the estimates add up to the observation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{shape_err, Error, Result};
use crate::features::{apply_mask, istft_complex, stft, Spectrogram, StftConfig};
use crate::model::{solve_latents, Basis, DataKind, DataMatrix, SparsityParams};
use crate::trainer::concat_bases;

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationResult {
    /// Per-source latents, `d_i x N`.
    pub latents: Vec<Array2<f64>>,
    /// Per-source reconstructions `W_i h_i`, `m x N`.
    pub raw: Vec<Array2<f64>>,
    /// Wiener-filtered estimates, `m x N`; they sum to the mix.
    pub filtered: Vec<Array2<f64>>,
    /// `||v - sum_i W_i h_i||_2` per column.
    pub residual: Vec<f64>,
    /// Largest inner iteration count used by any column.
    pub iterations: usize,
}

/// Separates every column of `v` over the given bases.
///
/// Each column is solved independently from an all-ones start by iterating
/// the latent update until the relative change drops below `tol` or
/// `max_iter` steps are taken.
pub fn separate(
    v: &DataMatrix,
    bases: &[Basis],
    p: &SparsityParams,
    max_iter: usize,
    tol: f64,
) -> Result<SeparationResult> {
    if bases.is_empty() {
        return Err(Error::InvalidParam("separation needs at least one basis".into()));
    }
    for b in bases {
        if b.dim() != v.nrows() {
            return Err(shape_err("separate", b.entries.dim(), v.entries.dim()));
        }
    }
    let w = concat_bases(bases);
    let (h, iterations) = solve_latents(w.view(), v.entries.view(), p, max_iter, tol);

    let mut latents = Vec::with_capacity(bases.len());
    let mut raw = Vec::with_capacity(bases.len());
    let mut start = 0;
    for b in bases {
        let block = h.slice(ndarray::s![start..start + b.rank(), ..]).to_owned();
        raw.push(b.entries.dot(&block));
        latents.push(block);
        start += b.rank();
    }
    let filtered = wiener_filter_matrix(v.entries.view(), &raw, p.eps);
    let recon = w.dot(&h);
    let residual = v
        .entries
        .axis_iter(Axis(1))
        .zip(recon.axis_iter(Axis(1)))
        .map(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(SeparationResult {
        latents,
        raw,
        filtered,
        residual,
        iterations,
    })
}

fn wiener_entry(v: f64, raws: &[f64], eps: f64, out: &mut [f64]) {
    let total: f64 = raws.iter().sum();
    if total > eps {
        for (o, r) in out.iter_mut().zip(raws) {
            *o = v * r / total;
        }
    } else {
        let share = v / raws.len() as f64;
        out.iter_mut().for_each(|o| *o = share);
    }
}

/// `u_i = v * r_i / sum_j r_j` entrywise; where the sum is `<= eps` the mix
/// is split equally between sources.
pub fn wiener_filter(v: ArrayView1<f64>, raw: &[Array1<f64>], eps: f64) -> Result<Vec<Array1<f64>>> {
    if raw.is_empty() {
        return Err(Error::InvalidParam("wiener filter needs at least one source".into()));
    }
    for r in raw {
        if r.len() != v.len() {
            return Err(shape_err("wiener_filter", (v.len(), 1), (r.len(), 1)));
        }
    }
    let s = raw.len();
    let mut out = vec![Array1::zeros(v.len()); s];
    let mut rs = vec![0.0; s];
    let mut us = vec![0.0; s];
    for k in 0..v.len() {
        for (slot, r) in rs.iter_mut().zip(raw) {
            *slot = r[k];
        }
        wiener_entry(v[k], &rs, eps, &mut us);
        for (o, &u) in out.iter_mut().zip(&us) {
            o[k] = u;
        }
    }
    Ok(out)
}

pub(crate) fn wiener_filter_matrix(
    v: ArrayView2<f64>,
    raw: &[Array2<f64>],
    eps: f64,
) -> Vec<Array2<f64>> {
    let s = raw.len();
    let mut out = vec![Array2::zeros(v.dim()); s];
    let mut rs = vec![0.0; s];
    let mut us = vec![0.0; s];
    for ((r, c), &x) in v.indexed_iter() {
        for (slot, m) in rs.iter_mut().zip(raw) {
            *slot = m[[r, c]];
        }
        wiener_entry(x, &rs, eps, &mut us);
        for (o, &u) in out.iter_mut().zip(&us) {
            o[[r, c]] = u;
        }
    }
    out
}

/// Projection-only denoising: each column of `v` is replaced by its
/// non-negative projection onto the cone of `basis`.
pub fn project_denoise(
    v: &DataMatrix,
    basis: &Basis,
    p: &SparsityParams,
    max_iter: usize,
    tol: f64,
) -> Result<DataMatrix> {
    if basis.dim() != v.nrows() {
        return Err(shape_err("project_denoise", basis.entries.dim(), v.entries.dim()));
    }
    let (h, _) = solve_latents(basis.entries.view(), v.entries.view(), p, max_iter, tol);
    Ok(DataMatrix {
        entries: basis.entries.dot(&h),
        kind: DataKind::Source,
    })
}

/// Magnitude spectrogram of a signal as a data matrix.
pub fn magnitude_matrix(spec: &Spectrogram) -> DataMatrix {
    DataMatrix {
        entries: spec.magnitude.clone(),
        kind: DataKind::Mix,
    }
}

/// Separates a time-domain mixture: magnitude separation over `bases`,
/// then masking of the mixture spectrum and resynthesis. The returned
/// signals sum to the mixture up to STFT round-off.
pub fn separate_signal(
    mix: &[f64],
    bases: &[Basis],
    cfg: &StftConfig,
    p: &SparsityParams,
    max_iter: usize,
    tol: f64,
) -> Result<Vec<Vec<f64>>> {
    let spec = stft(mix, cfg)?;
    let res = separate(&magnitude_matrix(&spec), bases, p, max_iter, tol)?;
    apply_mask(&spec, &res.raw, p.eps)
}

/// Projection denoising of a time-domain signal: the magnitude spectrogram
/// is projected onto the cone of `basis` and resynthesized with the
/// mixture phase.
pub fn project_signal(
    mix: &[f64],
    basis: &Basis,
    cfg: &StftConfig,
    p: &SparsityParams,
    max_iter: usize,
    tol: f64,
) -> Result<Vec<f64>> {
    let spec = stft(mix, cfg)?;
    let proj = project_denoise(&magnitude_matrix(&spec), basis, p, max_iter, tol)?;
    let denoised = Spectrogram {
        magnitude: proj.entries,
        ..spec
    };
    istft_complex(&denoised.complex(), cfg, denoised.length)
}
