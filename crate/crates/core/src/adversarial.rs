//! Assembly of the adversarial dataset for each source: samples of the other
//! sources plus naively inverted mixes, scaled so that a plain column mean
//! over the assembled matrix estimates the mixture expectation.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{seeded_rng, DataKind, DataMatrix};

/// Distribution of the mixing weights `a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum WeightModel {
    Deterministic { values: Vec<f64> },
    Dirichlet { concentration: Vec<f64>, mc_samples: usize },
}

impl WeightModel {
    /// Equal deterministic weights `1/S`.
    pub fn equal(sources: usize) -> Self {
        WeightModel::Deterministic {
            values: vec![1.0 / sources as f64; sources],
        }
    }

    pub fn num_sources(&self) -> usize {
        match self {
            WeightModel::Deterministic { values } => values.len(),
            WeightModel::Dirichlet { concentration, .. } => concentration.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            WeightModel::Deterministic { values } => check_simplex(values),
            WeightModel::Dirichlet {
                concentration,
                mc_samples,
            } => {
                if concentration.is_empty() || concentration.iter().any(|&c| !(c > 0.0)) {
                    return Err(Error::InvalidParam(
                        "dirichlet concentration entries must be > 0".into(),
                    ));
                }
                if *mc_samples == 0 {
                    return Err(Error::InvalidParam("mc_samples must be >= 1".into()));
                }
                Ok(())
            }
        }
    }

    /// One draw of the weight vector.
    pub fn sample(&self, rng: &mut impl rand::Rng) -> Result<Vec<f64>> {
        match self {
            WeightModel::Deterministic { values } => Ok(values.clone()),
            WeightModel::Dirichlet { concentration, .. } => {
                if concentration.len() == 1 {
                    return Ok(vec![1.0]);
                }
                let dist = Dirichlet::new(concentration)
                    .map_err(|e| Error::InvalidParam(format!("dirichlet: {e}")))?;
                Ok(dist.sample(rng))
            }
        }
    }
}

fn check_simplex(a: &[f64]) -> Result<()> {
    if a.is_empty() || a.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::InvalidParam("weights must be non-negative".into()));
    }
    let sum: f64 = a.iter().sum();
    if sum == 0.0 {
        return Err(Error::InvalidParam("weights are all zero".into()));
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParam(format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Gain `a_i / sum_j a_j^2` of the pseudo-inverse of the mixing operator.
fn inversion_gain(a: &[f64], i: usize) -> f64 {
    let sq: f64 = a.iter().map(|x| x * x).sum();
    a[i] / sq
}

/// Applies the pseudo-inverse of `u -> sum_i a_i u_i` to a mix `v`,
/// returning one rescaled copy of `v` per source.
pub fn naive_invert(v: ArrayView1<f64>, a: &[f64]) -> Result<Vec<Array1<f64>>> {
    check_simplex(a)?;
    Ok((0..a.len())
        .map(|i| {
            let g = inversion_gain(a, i);
            v.mapv(|x| g * x)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaEstimate {
    pub mean: f64,
    /// Standard error of the Monte-Carlo mean; zero in deterministic mode.
    pub std_error: f64,
    pub samples: usize,
}

/// Second moment of the inversion gain of source `i`, with its Monte-Carlo
/// standard error.
pub fn beta_estimate(wm: &WeightModel, i: usize, seed: u64) -> Result<BetaEstimate> {
    wm.validate()?;
    if i >= wm.num_sources() {
        return Err(Error::InvalidParam(format!(
            "source index {i} out of range for {} sources",
            wm.num_sources()
        )));
    }
    match wm {
        WeightModel::Deterministic { values } => {
            let g = inversion_gain(values, i);
            Ok(BetaEstimate {
                mean: g * g,
                std_error: 0.0,
                samples: 1,
            })
        }
        WeightModel::Dirichlet { mc_samples, .. } => {
            let mut rng = seeded_rng(seed, 0);
            // Welford accumulation
            let mut mean = 0.0;
            let mut m2 = 0.0;
            for k in 0..*mc_samples {
                let a = wm.sample(&mut rng)?;
                let g = inversion_gain(&a, i);
                let x = g * g;
                let delta = x - mean;
                mean += delta / (k + 1) as f64;
                m2 += delta * (x - mean);
            }
            let n = *mc_samples as f64;
            let var = if *mc_samples > 1 { m2 / (n - 1.0) } else { 0.0 };
            Ok(BetaEstimate {
                mean,
                std_error: (var / n).sqrt(),
                samples: *mc_samples,
            })
        }
    }
}

/// `E[(a_i / sum_j a_j^2)^2]` under the weight model.
pub fn compute_beta(wm: &WeightModel, i: usize, seed: u64) -> Result<f64> {
    beta_estimate(wm, i, seed).map(|b| b.mean)
}

/// Mixture weights of the adversarial distribution. Row `i` holds
/// `omega_ij` for `j != i` (the diagonal is ignored) and `residual[i]` is
/// the weight left for naively inverted mixes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaWeights {
    pub omega: Array2<f64>,
    pub residual: Vec<f64>,
}

impl OmegaWeights {
    /// Builds weights from an explicit matrix, deriving the residuals.
    pub fn from_matrix(omega: Array2<f64>) -> Result<Self> {
        let s = omega.nrows();
        if omega.ncols() != s {
            return Err(shape_err("OmegaWeights", omega.dim(), (s, s)));
        }
        let mut residual = Vec::with_capacity(s);
        for i in 0..s {
            let mut sum = 0.0;
            for j in (0..s).filter(|&j| j != i) {
                let w = omega[[i, j]];
                if !(w >= 0.0) {
                    return Err(Error::InvalidParam(format!("omega[{i},{j}] = {w} < 0")));
                }
                sum += w;
            }
            let r = 1.0 - sum;
            if r < -1e-12 {
                return Err(Error::InvalidParam(format!(
                    "omega row {i} sums to {sum} > 1"
                )));
            }
            residual.push(r.max(0.0));
        }
        Ok(OmegaWeights { omega, residual })
    }

    pub fn num_sources(&self) -> usize {
        self.residual.len()
    }
}

/// Ratio weights `omega_ij = N_j / N_hat_i`, `residual_i = N_V / N_hat_i`.
pub fn default_omega(counts: &[usize], n_mix: usize) -> Result<OmegaWeights> {
    let s = counts.len();
    let mut omega = Array2::zeros((s, s));
    let mut residual = Vec::with_capacity(s);
    for i in 0..s {
        let n_hat = adversarial_count(counts, n_mix, i);
        if n_hat == 0 {
            return Err(Error::Empty(format!("no adversarial data for source {i}")));
        }
        let n_hat = n_hat as f64;
        for j in (0..s).filter(|&j| j != i) {
            omega[[i, j]] = counts[j] as f64 / n_hat;
        }
        residual.push(n_mix as f64 / n_hat);
    }
    Ok(OmegaWeights { omega, residual })
}

/// `N_hat_i = N_V + sum_{k != i} N_k`.
pub fn adversarial_count(counts: &[usize], n_mix: usize, i: usize) -> usize {
    n_mix
        + counts
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .map(|(_, &n)| n)
            .sum::<usize>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Source(usize),
    Mix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub origin: Origin,
    pub columns: Range<usize>,
    pub alpha: f64,
}

/// Scaled concatenation of adversarial samples for one source.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialSet {
    pub matrix: DataMatrix,
    pub segments: Vec<Segment>,
}

impl AdversarialSet {
    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }
}

// Ratios within a few ulp of one come from the default weights; pinning them
// keeps the default assembly an exact concatenation.
fn snap_unit(r: f64) -> f64 {
    if (r - 1.0).abs() <= 4.0 * f64::EPSILON {
        1.0
    } else {
        r
    }
}

/// Builds `[alpha_j U_j for j != i, alpha_V V]` with
/// `alpha_j = sqrt(omega_ij N_hat_i / N_j)` and
/// `alpha_V = sqrt(residual_i N_hat_i beta_i / N_V)`.
pub fn assemble_adversarial(
    i: usize,
    sources: &[DataMatrix],
    mixes: &DataMatrix,
    om: &OmegaWeights,
    beta_i: f64,
) -> Result<AdversarialSet> {
    let s = sources.len();
    if om.num_sources() != s {
        return Err(Error::InvalidParam(format!(
            "omega has {} sources, data has {s}",
            om.num_sources()
        )));
    }
    if i >= s {
        return Err(Error::InvalidParam(format!("source index {i} out of range")));
    }
    if !(beta_i >= 0.0) {
        return Err(Error::InvalidParam(format!("beta must be >= 0, got {beta_i}")));
    }
    let m = mixes.nrows();
    for u in sources {
        if u.nrows() != m && u.ncols() > 0 {
            return Err(shape_err("assemble_adversarial", u.entries.dim(), mixes.entries.dim()));
        }
    }
    let counts: Vec<usize> = sources.iter().map(|u| u.ncols()).collect();
    let n_mix = mixes.ncols();
    let n_hat = adversarial_count(&counts, n_mix, i);
    if n_hat == 0 {
        return Err(Error::Empty(format!("no adversarial data for source {i}")));
    }
    let n_hat_f = n_hat as f64;

    let mut blocks: Vec<(Origin, f64, &Array2<f64>)> = Vec::new();
    for j in (0..s).filter(|&j| j != i) {
        let w = om.omega[[i, j]];
        if counts[j] == 0 {
            if w > 0.0 {
                return Err(Error::InvalidParam(format!(
                    "omega[{i},{j}] = {w} > 0 but source {j} has no data"
                )));
            }
            continue;
        }
        let alpha = snap_unit(w * n_hat_f / counts[j] as f64).sqrt();
        blocks.push((Origin::Source(j), alpha, &sources[j].entries));
    }
    if n_mix > 0 {
        let ratio = snap_unit(om.residual[i] * n_hat_f / n_mix as f64);
        blocks.push((Origin::Mix, (ratio * beta_i).sqrt(), &mixes.entries));
    } else if om.residual[i] > 1e-12 {
        return Err(Error::InvalidParam(format!(
            "residual weight {} > 0 for source {i} but there are no mixes",
            om.residual[i]
        )));
    }

    let total: usize = blocks.iter().map(|b| b.2.ncols()).sum();
    let mut matrix = Array2::zeros((m, total));
    let mut segments = Vec::with_capacity(blocks.len());
    let mut start = 0;
    for (origin, alpha, data) in blocks {
        let end = start + data.ncols();
        let mut dst = matrix.slice_mut(s![.., start..end]);
        if alpha == 1.0 {
            dst.assign(data);
        } else {
            dst.zip_mut_with(data, |d, &x| *d = alpha * x);
        }
        segments.push(Segment {
            origin,
            columns: start..end,
            alpha,
        });
        start = end;
    }
    Ok(AdversarialSet {
        matrix: DataMatrix {
            entries: matrix,
            kind: DataKind::Adversarial,
        },
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn invert_degenerate_weight() {
        let v = array![1.0, 2.0];
        let out = naive_invert(v.view(), &[1.0, 0.0]).unwrap();
        assert_eq!(out[0], v);
        assert_eq!(out[1], array![0.0, 0.0]);
    }

    #[test]
    fn invert_equal_weights() {
        let v = array![1.0, 2.0, 3.0];
        let out = naive_invert(v.view(), &[0.5, 0.5]).unwrap();
        assert_eq!(out[0], v);
        assert_eq!(out[1], v);
    }

    #[test]
    fn invert_unequal_weights() {
        let v = array![1.0];
        let out = naive_invert(v.view(), &[0.6, 0.4]).unwrap();
        assert!((out[0][0] - 0.6 / 0.52).abs() < 1e-15);
        assert!((out[1][0] - 0.4 / 0.52).abs() < 1e-15);
        assert!((out[0][0] - 1.153_846_153_846).abs() < 1e-12);
        assert!((out[1][0] - 0.769_230_769_230).abs() < 1e-12);
    }

    #[test]
    fn invert_rejects_zero_weights() {
        assert!(naive_invert(array![1.0].view(), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn beta_deterministic() {
        let wm = WeightModel::Deterministic {
            values: vec![0.5, 0.5],
        };
        assert_eq!(compute_beta(&wm, 0, 0).unwrap(), 1.0);
        assert_eq!(compute_beta(&wm, 1, 0).unwrap(), 1.0);
        let wm = WeightModel::Deterministic {
            values: vec![1.0, 0.0],
        };
        assert_eq!(compute_beta(&wm, 0, 0).unwrap(), 1.0);
        assert_eq!(compute_beta(&wm, 1, 0).unwrap(), 0.0);
    }

    #[test]
    fn beta_dirichlet_reproducible() {
        let wm = WeightModel::Dirichlet {
            concentration: vec![1.0, 1.0],
            mc_samples: 1000,
        };
        let a = beta_estimate(&wm, 0, 5).unwrap();
        assert_eq!(a, beta_estimate(&wm, 0, 5).unwrap());
        assert!(a.mean > 0.0 && a.std_error > 0.0);
    }

    #[test]
    fn omega_without_mixes() {
        let om = default_omega(&[500, 500], 0).unwrap();
        assert_eq!(om.omega[[0, 1]], 1.0);
        assert_eq!(om.omega[[1, 0]], 1.0);
        assert_eq!(om.residual, vec![0.0, 0.0]);
    }

    #[test]
    fn omega_ratio_arithmetic() {
        let om = default_omega(&[100, 300], 100).unwrap();
        assert_eq!(om.omega[[0, 1]], 0.75);
        assert_eq!(om.residual[0], 0.25);
        assert_eq!(om.omega[[1, 0]], 0.5);
        assert_eq!(om.residual[1], 0.5);
    }

    #[test]
    fn omega_requires_adversarial_data() {
        assert!(matches!(default_omega(&[10, 0], 0), Err(Error::Empty(_))));
    }

    fn src(n: usize, base: f64) -> DataMatrix {
        DataMatrix::new(
            Array2::from_shape_fn((3, n), |(r, c)| base + (r * 7 + c) as f64 * 0.1),
            DataKind::Source,
        )
        .unwrap()
    }

    #[test]
    fn default_assembly_is_concatenation() {
        let sources = vec![src(2, 0.0), src(3, 1.0), src(4, 2.0)];
        let mixes = DataMatrix::new(Array2::from_elem((3, 5), 0.3), DataKind::Mix).unwrap();
        let om = default_omega(&[2, 3, 4], 5).unwrap();
        let set = assemble_adversarial(1, &sources, &mixes, &om, 2.25).unwrap();
        assert_eq!(set.ncols(), 2 + 4 + 5);
        assert_eq!(set.segments.len(), 3);
        assert_eq!(set.segments[0].alpha, 1.0);
        assert_eq!(set.segments[1].alpha, 1.0);
        assert_eq!(set.segments[2].alpha, 1.5);
        assert_eq!(set.matrix.entries.slice(s![.., 0..2]), sources[0].entries);
        assert_eq!(set.matrix.entries.slice(s![.., 2..6]), sources[2].entries);
        assert_eq!(set.matrix.entries.slice(s![.., 6..11]), mixes.entries.mapv(|x| 1.5 * x));
    }

    #[test]
    fn two_sources_no_mix() {
        let sources = vec![src(3, 0.0), src(4, 1.0)];
        let mixes = DataMatrix::new(Array2::zeros((3, 0)), DataKind::Mix).unwrap();
        let om = OmegaWeights::from_matrix(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let set = assemble_adversarial(0, &sources, &mixes, &om, 1.0).unwrap();
        assert_eq!(set.segments.len(), 1);
        assert_eq!(set.segments[0].alpha, 1.0);
        assert_eq!(set.matrix.entries, sources[1].entries);
    }

    #[test]
    fn weight_on_missing_source_is_error() {
        let sources = vec![src(3, 0.0), src(0, 1.0)];
        let mixes = DataMatrix::new(Array2::from_elem((3, 2), 0.5), DataKind::Mix).unwrap();
        let om = OmegaWeights::from_matrix(array![[0.0, 0.5], [0.5, 0.0]]).unwrap();
        assert!(assemble_adversarial(0, &sources, &mixes, &om, 1.0).is_err());
    }

    #[test]
    fn custom_weights_scale_segments() {
        let sources = vec![src(2, 0.0), src(4, 1.0)];
        let mixes = DataMatrix::new(Array2::from_elem((3, 2), 0.5), DataKind::Mix).unwrap();
        // N_hat_0 = 6; alpha_1 = sqrt(0.5 * 6 / 4), alpha_V = sqrt(0.5 * 6 * 1 / 2)
        let om = OmegaWeights::from_matrix(array![[0.0, 0.5], [0.5, 0.0]]).unwrap();
        let set = assemble_adversarial(0, &sources, &mixes, &om, 1.0).unwrap();
        assert!((set.segments[0].alpha - 0.75f64.sqrt()).abs() < 1e-15);
        assert!((set.segments[1].alpha - 1.5f64.sqrt()).abs() < 1e-15);
    }
}
