//! Synthetic mixtures and desk-scale synthetic sources.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adversarial::WeightModel;
use crate::error::{Error, Result};
use crate::model::{seeded_rng, DataKind, DataMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub mix: DataMatrix,
    /// Weighted sources, one per input source; they sum to the mix.
    pub ground_truth: Vec<DataMatrix>,
    /// Per-column weights, `columns x sources`.
    pub weights: Array2<f64>,
}

/// Scales `noise` so that `10 log10(|signal|^2 / |noise|^2) = snr_db` and
/// returns the gain. A silent noise vector gets gain 0.
pub fn snr_gain(signal: &[f64], noise: &[f64], snr_db: f64) -> f64 {
    let ps: f64 = signal.iter().map(|x| x * x).sum();
    let pn: f64 = noise.iter().map(|x| x * x).sum();
    if pn == 0.0 {
        return 0.0;
    }
    (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Additive mix of a signal and noise at the given input SNR. Returns the
/// mix and the scaled noise.
pub fn mix_at_snr(signal: &[f64], noise: &[f64], snr_db: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if signal.len() != noise.len() {
        return Err(Error::InvalidParam(format!(
            "signal has {} samples, noise {}",
            signal.len(),
            noise.len()
        )));
    }
    let g = snr_gain(signal, noise, snr_db);
    let scaled: Vec<f64> = noise.iter().map(|x| g * x).collect();
    let mix = signal.iter().zip(&scaled).map(|(s, n)| s + n).collect();
    Ok((mix, scaled))
}

/// Mixes paired columns of the sources.
///
/// Without `snr_db`, column `k` is `sum_i a_i u_i` with `a` drawn from `wm`.
/// With `snr_db` (two sources: signal then noise) the noise column is scaled
/// to the requested SNR and added to the unscaled signal.
pub fn mix_synthetic(
    sources: &[DataMatrix],
    wm: &WeightModel,
    snr_db: Option<f64>,
    seed: u64,
) -> Result<Mixture> {
    let first = sources
        .first()
        .ok_or_else(|| Error::Empty("no sources to mix".into()))?;
    let (m, n) = first.entries.dim();
    for s in sources {
        if s.entries.dim() != (m, n) {
            return Err(Error::InvalidParam(format!(
                "sources must share shape {m}x{n}, found {:?}",
                s.entries.dim()
            )));
        }
    }
    let count = sources.len();
    let mut weights = Array2::zeros((n, count));
    match snr_db {
        Some(snr) => {
            if count != 2 {
                return Err(Error::InvalidParam(format!(
                    "snr mixing needs exactly 2 sources, got {count}"
                )));
            }
            for k in 0..n {
                let s = sources[0].entries.column(k).to_vec();
                let z = sources[1].entries.column(k).to_vec();
                weights[[k, 0]] = 1.0;
                weights[[k, 1]] = snr_gain(&s, &z, snr);
            }
        }
        None => {
            wm.validate()?;
            if wm.num_sources() != count {
                return Err(Error::InvalidParam(format!(
                    "weight model has {} sources, data has {count}",
                    wm.num_sources()
                )));
            }
            let mut rng = seeded_rng(seed, 0);
            for k in 0..n {
                let a = wm.sample(&mut rng)?;
                for (i, x) in a.iter().enumerate() {
                    weights[[k, i]] = *x;
                }
            }
        }
    }
    let ground_truth: Vec<DataMatrix> = sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut e = s.entries.clone();
            for (k, mut col) in e.columns_mut().into_iter().enumerate() {
                col *= weights[[k, i]];
            }
            DataMatrix { entries: e, kind: DataKind::Source }
        })
        .collect();
    let mut v = Array2::zeros((m, n));
    for g in &ground_truth {
        v += &g.entries;
    }
    Ok(Mixture {
        mix: DataMatrix { entries: v, kind: DataKind::Mix },
        ground_truth,
        weights,
    })
}

/// Sparse non-negative combinations of dictionary atoms.
///
/// Every column mixes `active` atoms drawn without replacement, with
/// Gamma(2, 1) coefficients.
pub fn sample_from_dictionary(dict: &Array2<f64>, n: usize, active: usize, seed: u64) -> Result<DataMatrix> {
    let atoms = dict.ncols();
    if active == 0 || active > atoms {
        return Err(Error::InvalidParam(format!(
            "active atoms must be in 1..={atoms}, got {active}"
        )));
    }
    let mut rng = seeded_rng(seed, 0);
    let gamma = Gamma::new(2.0, 1.0).expect("valid gamma");
    let mut out = Array2::zeros((dict.nrows(), n));
    for mut col in out.columns_mut() {
        for j in rand::seq::index::sample(&mut rng, atoms, active) {
            let c: f64 = gamma.sample(&mut rng);
            col.scaled_add(c, &dict.column(j));
        }
    }
    DataMatrix::new(out, DataKind::Source)
}

/// Random non-negative dictionary with unit-norm columns of sparse bumps.
pub fn random_dictionary(m: usize, atoms: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeded_rng(seed, 0);
    let mut d = Array2::from_shape_fn((m, atoms), |_| {
        let x: f64 = rng.gen();
        if x < 0.7 {
            0.0
        } else {
            x
        }
    });
    for mut col in d.columns_mut() {
        if col.iter().all(|&x| x == 0.0) {
            col[rng.gen_range(0..m)] = 1.0;
        }
        let norm = col.dot(&col).sqrt();
        col /= norm;
    }
    d
}

/// A family of Gaussian bumps on `m` features; ranges are fractions of `m`
/// for the centre and width, absolute for the amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpFamily {
    pub center: (f64, f64),
    pub width: (f64, f64),
    pub amplitude: (f64, f64),
}

impl BumpFamily {
    /// Narrow bumps in the left part of the feature axis.
    pub const NARROW_LEFT: BumpFamily = BumpFamily {
        center: (0.15, 0.6),
        width: (0.02, 0.04),
        amplitude: (0.3, 1.0),
    };
    /// Wide bumps in the right part; overlaps [`Self::NARROW_LEFT`] on
    /// `[0.4, 0.6]`.
    pub const WIDE_RIGHT: BumpFamily = BumpFamily {
        center: (0.4, 0.85),
        width: (0.05, 0.1),
        amplitude: (0.3, 1.0),
    };
}

/// `n` columns, each a sum of `per_column` bumps drawn from `family`.
pub fn sample_bumps(m: usize, family: &BumpFamily, n: usize, per_column: usize, seed: u64) -> Result<DataMatrix> {
    let ranges = [family.center, family.width, family.amplitude];
    if ranges.iter().any(|&(lo, hi)| !(lo < hi && lo >= 0.0)) || !(family.width.0 > 0.0) {
        return Err(Error::InvalidParam(format!("invalid bump family {family:?}")));
    }
    let mut rng = seeded_rng(seed, 0);
    let mf = m as f64;
    let mut out = Array2::zeros((m, n));
    for mut col in out.columns_mut() {
        for _ in 0..per_column {
            let c = rng.gen_range(family.center.0..family.center.1) * mf;
            let w = rng.gen_range(family.width.0..family.width.1) * mf;
            let a = rng.gen_range(family.amplitude.0..family.amplitude.1);
            for (r, x) in col.iter_mut().enumerate() {
                let z = (r as f64 - c) / w;
                *x += a * (-0.5 * z * z).exp();
            }
        }
    }
    DataMatrix::new(out, DataKind::Source)
}

/// Harmonic tone with slowly varying amplitude, peak around 0.5.
pub fn harmonic_tone(len: usize, sample_rate: u32, f0: f64, harmonics: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed, 0);
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen::<f64>() * std::f64::consts::TAU).collect();
    let sr = sample_rate as f64;
    let norm: f64 = (1..=harmonics).map(|h| 1.0 / h as f64).sum();
    (0..len)
        .map(|t| {
            let time = t as f64 / sr;
            let env = 0.75 + 0.25 * (std::f64::consts::TAU * 2.0 * time).sin();
            let s: f64 = (1..=harmonics)
                .map(|h| (std::f64::consts::TAU * f0 * h as f64 * time + phases[h - 1]).sin() / h as f64)
                .sum();
            0.5 * env * s / norm
        })
        .collect()
}

/// Gaussian white noise with standard deviation `std`.
pub fn white_noise(len: usize, std: f64, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed, 0);
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            std * z
        })
        .collect()
}

/// Energy of a vector.
pub fn energy(x: &Array1<f64>) -> f64 {
    x.dot(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dm(a: Array2<f64>) -> DataMatrix {
        DataMatrix::new(a, DataKind::Source).unwrap()
    }

    #[test]
    fn deterministic_weights_mix() {
        let u1 = dm(array![[1.0], [0.0]]);
        let u2 = dm(array![[0.0], [1.0]]);
        let wm = WeightModel::Deterministic { values: vec![0.5, 0.5] };
        let out = mix_synthetic(&[u1, u2], &wm, None, 0).unwrap();
        assert_eq!(out.mix.entries, array![[0.5], [0.5]]);
        assert_eq!(out.ground_truth[0].entries, array![[0.5], [0.0]]);
        assert_eq!(out.weights, array![[0.5, 0.5]]);
    }

    #[test]
    fn snr_mixing_hits_target_energy() {
        let s = dm(array![[1.0, 0.3], [2.0, 0.1], [0.5, 0.9]]);
        let z = dm(array![[0.2, 4.0], [0.7, 0.0], [0.1, 1.0]]);
        let wm = WeightModel::equal(2);
        for snr in [0.0, 6.0, -3.5] {
            let out = mix_synthetic(&[s.clone(), z.clone()], &wm, Some(snr), 1).unwrap();
            for k in 0..2 {
                let es = energy(&out.ground_truth[0].entries.column(k).to_owned());
                let en = energy(&out.ground_truth[1].entries.column(k).to_owned());
                let target = es / 10f64.powf(snr / 10.0);
                assert!((en - target).abs() <= 1e-12 * target, "snr {snr}: {en} vs {target}");
            }
        }
    }

    #[test]
    fn mismatched_columns_rejected() {
        let u1 = dm(Array2::ones((2, 3)));
        let u2 = dm(Array2::ones((2, 4)));
        assert!(mix_synthetic(&[u1, u2], &WeightModel::equal(2), None, 0).is_err());
    }

    #[test]
    fn dirichlet_mix_is_seeded() {
        let u1 = dm(Array2::ones((2, 5)));
        let u2 = dm(Array2::ones((2, 5)));
        let wm = WeightModel::Dirichlet { concentration: vec![1.0, 1.0], mc_samples: 10 };
        let a = mix_synthetic(&[u1.clone(), u2.clone()], &wm, None, 7).unwrap();
        let b = mix_synthetic(&[u1, u2], &wm, None, 7).unwrap();
        assert_eq!(a, b);
        for row in a.weights.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn signal_helpers() {
        let (mix, noise) = mix_at_snr(&[1.0, -1.0], &[2.0, 2.0], 0.0).unwrap();
        assert!((noise.iter().map(|x| x * x).sum::<f64>() - 2.0).abs() < 1e-12);
        assert_eq!(mix.len(), 2);
        let d = random_dictionary(10, 4, 3);
        for c in d.columns() {
            assert!((c.dot(&c) - 1.0).abs() < 1e-12);
        }
        let x = sample_from_dictionary(&d, 6, 2, 0).unwrap();
        assert_eq!(x.entries.dim(), (10, 6));
        let b = sample_bumps(64, &BumpFamily::NARROW_LEFT, 5, 1, 0).unwrap();
        for c in b.entries.columns() {
            let peak = c.iter().cloned().fold(0.0, f64::max);
            assert!((0.3..1.0).contains(&peak));
            assert!(c.iter().skip(48).all(|&x| x < 1e-3));
        }
        assert_eq!(harmonic_tone(100, 8000, 440.0, 3, 0).len(), 100);
        assert_eq!(white_noise(50, 0.1, 0), white_noise(50, 0.1, 0));
    }
}
