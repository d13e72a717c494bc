//! Core NMF types and the building blocks shared by training and separation:
//! the latent multiplicative update, cone projection, initialization and
//! column normalization.
//!
//! Every matrix here is non-negative. Denominators of multiplicative updates
//! carry a hard floor `eps` on top of the sparsity weight so that a zero
//! sparsity weight is usable.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Denominator floor used when no explicit value is configured.
pub const DEFAULT_EPS: f64 = 1e-12;

/// Default iteration cap of the inner non-negative least-squares solver.
pub const DEFAULT_MAX_ITER: usize = 500;

/// Default stopping threshold on the relative change of the latent vector.
pub const DEFAULT_TOL: f64 = 1e-8;

/// Non-negative `m x d` dictionary for one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub entries: Array2<f64>,
    pub source_id: usize,
}

/// Non-negative `d x N` activations paired with a data matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latents {
    pub entries: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Source,
    Mix,
    Adversarial,
    Supervised,
}

/// Non-negative `m x N` matrix of column signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMatrix {
    pub entries: Array2<f64>,
    pub kind: DataKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityParams {
    pub mu_w: f64,
    pub mu_h: f64,
    pub eps: f64,
}

impl Default for SparsityParams {
    fn default() -> Self {
        SparsityParams {
            mu_w: 1e-10,
            mu_h: 1e-10,
            eps: DEFAULT_EPS,
        }
    }
}

impl SparsityParams {
    pub fn new(mu_w: f64, mu_h: f64, eps: f64) -> Result<Self> {
        let p = SparsityParams { mu_w, mu_h, eps };
        p.validate()?;
        Ok(p)
    }

    /// No sparsity, default floor.
    pub fn unregularized() -> Self {
        SparsityParams {
            mu_w: 0.0,
            mu_h: 0.0,
            eps: DEFAULT_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu_w >= 0.0 && self.mu_h >= 0.0) {
            return Err(Error::InvalidParam(format!(
                "sparsity weights must be >= 0 (mu_w = {}, mu_h = {})",
                self.mu_w, self.mu_h
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidParam(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

fn first_negative(a: &Array2<f64>) -> Option<(usize, usize, f64)> {
    a.indexed_iter()
        .find(|(_, &v)| !(v >= 0.0))
        .map(|((r, c), &v)| (r, c, v))
}

impl Basis {
    pub fn new(entries: Array2<f64>, source_id: usize) -> Result<Self> {
        if let Some((row, col, value)) = first_negative(&entries) {
            return Err(Error::Negative { row, col, value });
        }
        Ok(Basis { entries, source_id })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn rank(&self) -> usize {
        self.entries.ncols()
    }
}

impl Latents {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if let Some((row, col, value)) = first_negative(&entries) {
            return Err(Error::Negative { row, col, value });
        }
        Ok(Latents { entries })
    }

    /// All-ones start, strictly positive as multiplicative updates require.
    pub fn ones(d: usize, n: usize) -> Self {
        Latents {
            entries: Array2::ones((d, n)),
        }
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }
}

impl DataMatrix {
    /// Rejects negative or non-finite entries.
    pub fn new(entries: Array2<f64>, kind: DataKind) -> Result<Self> {
        if let Some((row, col, value)) = first_negative(&entries) {
            return Err(Error::Negative { row, col, value });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("data contains non-finite entries".into()));
        }
        Ok(DataMatrix { entries, kind })
    }

    /// Clamps negative entries to zero instead of rejecting them.
    pub fn clamped(mut entries: Array2<f64>, kind: DataKind) -> Result<Self> {
        entries.mapv_inplace(|v| if v < 0.0 { 0.0 } else { v });
        Self::new(entries, kind)
    }

    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }
}

/// `H * (W^T U / n) / ((W^T W) H / n + mu_h + eps)` on raw views.
pub(crate) fn latent_step(
    h: ArrayView2<f64>,
    w: ArrayView2<f64>,
    u: ArrayView2<f64>,
    mu_h: f64,
    eps: f64,
    n_scale: f64,
) -> Array2<f64> {
    let gram = w.t().dot(&w);
    let numer = w.t().dot(&u) / n_scale;
    let denom = gram.dot(&h) / n_scale;
    let mut out = h.to_owned();
    ndarray::Zip::from(&mut out)
        .and(&numer)
        .and(&denom)
        .for_each(|o, &num, &den| *o = *o * num / (den + mu_h + eps));
    out
}

pub(crate) fn check_latent_shapes(
    op: &'static str,
    h: (usize, usize),
    w: (usize, usize),
    u: (usize, usize),
) -> Result<()> {
    if w.0 != u.0 {
        return Err(shape_err(op, w, u));
    }
    if h.0 != w.1 || h.1 != u.1 {
        return Err(shape_err(op, h, (w.1, u.1)));
    }
    Ok(())
}

/// One multiplicative step on the latents of `U ~ W H`.
///
/// `n_scale` is the `1/N` normalization of the data term; it cancels in the
/// ratio except against `mu_h`, so the effective sparsity strength depends
/// on it. Pass `1.0` for the unscaled update.
pub fn update_latents(
    h: &Latents,
    w: &Basis,
    u: &DataMatrix,
    p: &SparsityParams,
    n_scale: f64,
) -> Result<Latents> {
    check_latent_shapes("update_latents", h.entries.dim(), w.entries.dim(), u.entries.dim())?;
    if !(n_scale > 0.0) {
        return Err(Error::InvalidParam(format!("n_scale must be > 0, got {n_scale}")));
    }
    Ok(Latents {
        entries: latent_step(
            h.entries.view(),
            w.entries.view(),
            u.entries.view(),
            p.mu_h,
            p.eps,
            n_scale,
        ),
    })
}

/// Iterates the latent update from an all-ones start, independently per
/// column, until the relative change of the column drops below `tol` or
/// `max_iter` steps are taken. Returns the latents and the largest step
/// count used by any column.
pub(crate) fn solve_latents(
    w: ArrayView2<f64>,
    u: ArrayView2<f64>,
    p: &SparsityParams,
    max_iter: usize,
    tol: f64,
) -> (Array2<f64>, usize) {
    let gram = w.t().dot(&w);
    let numer = w.t().dot(&u);
    let d = w.ncols();
    let cols: Vec<(Array1<f64>, usize)> = numer
        .axis_iter(Axis(1))
        .into_par_iter()
        .map(|num| solve_column(&gram, num, p, max_iter, tol))
        .collect();
    let mut h = Array2::zeros((d, u.ncols()));
    let mut iters = 0;
    for (j, (col, it)) in cols.into_iter().enumerate() {
        h.column_mut(j).assign(&col);
        iters = iters.max(it);
    }
    (h, iters)
}

fn solve_column(
    gram: &Array2<f64>,
    num: ArrayView1<f64>,
    p: &SparsityParams,
    max_iter: usize,
    tol: f64,
) -> (Array1<f64>, usize) {
    let mut h = Array1::<f64>::ones(num.len());
    let mut iters = 0;
    while iters < max_iter {
        let denom = gram.dot(&h);
        let mut change = 0.0;
        let mut scale = 0.0;
        for k in 0..h.len() {
            let next = h[k] * num[k] / (denom[k] + p.mu_h + p.eps);
            change += (next - h[k]) * (next - h[k]);
            scale += h[k] * h[k];
            h[k] = next;
        }
        iters += 1;
        if change.sqrt() < tol * scale.sqrt().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    (h, iters)
}

#[cfg(test)]
fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
fn frob_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeProjection {
    pub h: Array1<f64>,
    pub distance: f64,
    pub iterations: usize,
}

/// Distance from `u` to the conic hull of the columns of `w`, together with
/// the (approximately) minimizing non-negative coefficients.
pub fn cone_distance(
    w: &Basis,
    u: ArrayView1<f64>,
    p: &SparsityParams,
    max_iter: usize,
    tol: f64,
) -> Result<ConeProjection> {
    if u.len() != w.dim() {
        return Err(shape_err("cone_distance", w.entries.dim(), (u.len(), 1)));
    }
    let u2 = u.to_owned().insert_axis(Axis(1));
    let (h, iterations) = solve_latents(w.entries.view(), u2.view(), p, max_iter, tol);
    let recon = w.entries.dot(&h);
    let distance = u2
        .iter()
        .zip(recon.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(ConeProjection {
        h: h.column(0).to_owned(),
        distance,
        iterations,
    })
}

/// Seeded generator used for every random draw in the crate.
///
/// `stream` separates independent consumers (sources, trials) that share a
/// master seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Column indices picked by exemplar initialization: `d` distinct indices
/// when `n >= d`, otherwise `d` draws with replacement.
pub fn exemplar_indices(n: usize, d: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n >= d {
        index::sample(rng, n, d).into_vec()
    } else {
        (0..d).map(|_| rng.gen_range(0..n)).collect()
    }
}

/// Basis made of randomly chosen data columns.
///
/// Sampling uses `ChaCha8Rng::seed_from_u64(seed)` (stream 0).
pub fn init_exemplar(u: &DataMatrix, d: usize, seed: u64) -> Result<Basis> {
    if u.ncols() == 0 || u.nrows() == 0 {
        return Err(Error::Empty("exemplar initialization needs at least one column".into()));
    }
    if d == 0 {
        return Err(Error::InvalidParam("latent dimension d must be >= 1".into()));
    }
    let mut rng = seeded_rng(seed, 0);
    let idx = exemplar_indices(u.ncols(), d, &mut rng);
    Ok(Basis {
        entries: u.entries.select(Axis(1), &idx),
        source_id: 0,
    })
}

/// Uniform `(0, 1]` entries with unit-norm columns.
pub fn init_random(m: usize, d: usize, seed: u64) -> Result<Basis> {
    if m == 0 || d == 0 {
        return Err(Error::InvalidParam(format!(
            "random initialization needs m, d >= 1 (got {m}, {d})"
        )));
    }
    let mut rng = seeded_rng(seed, 0);
    let mut entries = Array2::from_shape_simple_fn((m, d), || 1.0 - rng.gen::<f64>());
    for mut col in entries.columns_mut() {
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        col.mapv_inplace(|v| v / norm);
    }
    Ok(Basis {
        entries,
        source_id: 0,
    })
}

/// In-place column normalization of `w`, with the inverse scaling moved into
/// the rows of every partner so that `W H` is preserved.
///
/// Columns whose norm is already 1 (within 2 ulp) are left untouched, which
/// makes the operation exactly idempotent. Columns with norm `<= eps` are
/// left as they are and their partner rows are not scaled.
pub(crate) fn normalize_in_place(
    mut w: ArrayViewMut2<f64>,
    partners: &mut [ArrayViewMut2<f64>],
    eps: f64,
) {
    for j in 0..w.ncols() {
        let mut col = w.column_mut(j);
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= eps || (norm - 1.0).abs() <= 2.0 * f64::EPSILON {
            continue;
        }
        col.mapv_inplace(|v| v / norm);
        for h in partners.iter_mut() {
            h.row_mut(j).mapv_inplace(|v| v * norm);
        }
    }
}

/// Normalizes the columns of `w` to unit Euclidean norm and rescales the
/// matching rows of each partner.
pub fn normalize_columns(
    w: &Basis,
    partners: &[Latents],
    eps: f64,
) -> Result<(Basis, Vec<Latents>)> {
    for h in partners {
        if h.entries.nrows() != w.rank() {
            return Err(shape_err("normalize_columns", w.entries.dim(), h.entries.dim()));
        }
    }
    let mut w_out = w.clone();
    let mut parts: Vec<Latents> = partners.to_vec();
    {
        let mut views: Vec<_> = parts.iter_mut().map(|h| h.entries.view_mut()).collect();
        normalize_in_place(w_out.entries.view_mut(), &mut views, eps);
    }
    Ok((w_out, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rel_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
        frob_diff(a, b) <= tol * frob(b).max(1e-300)
    }

    #[test]
    fn identity_basis_reaches_data_in_one_step() {
        let w = Basis::new(Array2::eye(2), 0).unwrap();
        let u = DataMatrix::new(array![[1.0], [2.0]], DataKind::Source).unwrap();
        let h = Latents::ones(2, 1);
        let out = update_latents(&h, &w, &u, &SparsityParams::unregularized(), 1.0).unwrap();
        assert!((out.entries[[0, 0]] - 1.0).abs() < 1e-10);
        assert!((out.entries[[1, 0]] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn exact_factorization_is_fixed_point() {
        let w = Basis::new(array![[1.0, 0.5], [0.2, 2.0], [0.3, 0.0]], 0).unwrap();
        let h = Latents::new(array![[1.0, 0.0, 2.0], [0.5, 3.0, 0.1]]).unwrap();
        let u = DataMatrix::new(w.entries.dot(&h.entries), DataKind::Source).unwrap();
        let out = update_latents(&h, &w, &u, &SparsityParams::unregularized(), 1.0).unwrap();
        assert!(rel_close(&out.entries, &h.entries, 1e-12));
        // zero entries are absorbing
        assert_eq!(out.entries[[0, 1]], 0.0);
    }

    #[test]
    fn one_dimensional_problem_matches_grid_oracle() {
        let w = Basis::new(array![[1.0], [1.0]], 0).unwrap();
        let u = DataMatrix::new(array![[1.0], [0.0]], DataKind::Source).unwrap();
        let p = SparsityParams::unregularized();
        let mut h = Latents::ones(1, 1);
        for _ in 0..10_000 {
            let next = update_latents(&h, &w, &u, &p, 1.0).unwrap();
            let change = (next.entries[[0, 0]] - h.entries[[0, 0]]).abs();
            h = next;
            if change < 1e-10 {
                break;
            }
        }
        // brute-force scalar grid on [0, 2] at 1e-6 spacing
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=2_000_000u32 {
            let x = k as f64 * 1e-6;
            let r = (1.0 - x).powi(2) + x * x;
            if r < best.0 {
                best = (r, x);
            }
        }
        assert!((h.entries[[0, 0]] - best.1).abs() < 1e-6);
        assert!((h.entries[[0, 0]] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn update_latents_rejects_mismatched_shapes() {
        let w = Basis::new(Array2::ones((3, 2)), 0).unwrap();
        let u = DataMatrix::new(Array2::ones((4, 5)), DataKind::Source).unwrap();
        let h = Latents::ones(2, 5);
        let err = update_latents(&h, &w, &u, &SparsityParams::default(), 1.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3x2") && msg.contains("4x5"), "{msg}");
    }

    #[test]
    fn cone_distance_in_span_is_zero() {
        let w = Basis::new(array![[1.0, 0.0], [1.0, 1.0], [0.0, 2.0]], 0).unwrap();
        let u = w.entries.dot(&array![0.7, 1.3]);
        let proj = cone_distance(&w, u.view(), &SparsityParams::unregularized(), 5000, 1e-14).unwrap();
        assert!(proj.distance < 1e-6, "{}", proj.distance);
    }

    #[test]
    fn cone_distance_orthogonal_direction() {
        let w = Basis::new(array![[1.0], [0.0]], 0).unwrap();
        let u = array![0.0, 1.0];
        let proj = cone_distance(&w, u.view(), &SparsityParams::unregularized(), 500, 1e-8).unwrap();
        assert_eq!(proj.h[0], 0.0);
        assert!((proj.distance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exemplar_with_n_equal_d_is_permutation() {
        let u = DataMatrix::new(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], DataKind::Source).unwrap();
        let w = init_exemplar(&u, 3, 9).unwrap();
        let mut firsts: Vec<f64> = w.entries.row(0).to_vec();
        firsts.sort_by(f64::total_cmp);
        assert_eq!(firsts, vec![1.0, 2.0, 3.0]);
        for col in w.entries.columns() {
            assert!(u.entries.columns().into_iter().any(|c| c == col));
        }
        assert_eq!(w, init_exemplar(&u, 3, 9).unwrap());
    }

    #[test]
    fn exemplar_replays_documented_sampler() {
        let u = DataMatrix::new(
            Array2::from_shape_fn((2, 100), |(r, c)| (c * 2 + r) as f64),
            DataKind::Source,
        )
        .unwrap();
        let w = init_exemplar(&u, 3, 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let idx = rand::seq::index::sample(&mut rng, 100, 3).into_vec();
        for (k, &c) in idx.iter().enumerate() {
            assert_eq!(w.entries.column(k), u.entries.column(c));
        }
    }

    #[test]
    fn exemplar_oversamples_small_data() {
        let u = DataMatrix::new(array![[1.0, 2.0]], DataKind::Source).unwrap();
        let w = init_exemplar(&u, 5, 1).unwrap();
        assert_eq!(w.rank(), 5);
        assert!(w.entries.iter().all(|&v| v == 1.0 || v == 2.0));
    }

    #[test]
    fn exemplar_rejects_empty() {
        let u = DataMatrix::new(Array2::zeros((3, 0)), DataKind::Source).unwrap();
        assert!(matches!(init_exemplar(&u, 2, 0), Err(Error::Empty(_))));
    }

    #[test]
    fn random_init_properties() {
        let w = init_random(7, 4, 3).unwrap();
        assert!(w.entries.iter().all(|&v| v > 0.0));
        for col in w.entries.columns() {
            let n = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-12);
        }
        assert_eq!(w, init_random(7, 4, 3).unwrap());
        assert_ne!(w, init_random(7, 4, 4).unwrap());
    }

    #[test]
    fn normalization_is_idempotent_bitwise() {
        let w = init_random(5, 3, 11).unwrap();
        let h = Latents::new(Array2::from_elem((3, 4), 0.25)).unwrap();
        let (w2, hs) = normalize_columns(&w, std::slice::from_ref(&h), DEFAULT_EPS).unwrap();
        let (w3, hs3) = normalize_columns(&w2, &hs, DEFAULT_EPS).unwrap();
        assert_eq!(w2, w3);
        assert_eq!(hs, hs3);
    }

    #[test]
    fn normalization_preserves_product() {
        let mut w = init_random(6, 3, 5).unwrap();
        let mut h = Latents::new(Array2::from_shape_fn((3, 8), |(r, c)| 0.1 + (r * 8 + c) as f64 * 0.05)).unwrap();
        let before = w.entries.dot(&h.entries);
        w.entries.column_mut(1).mapv_inplace(|v| v * 5.0);
        h.entries.row_mut(1).mapv_inplace(|v| v / 5.0);
        let (w2, hs) = normalize_columns(&w, &[h], DEFAULT_EPS).unwrap();
        let after = w2.entries.dot(&hs[0].entries);
        assert!(rel_close(&after, &before, 1e-12));
    }

    #[test]
    fn zero_column_left_alone() {
        let w = Basis::new(array![[0.0, 3.0], [0.0, 4.0]], 0).unwrap();
        let h = Latents::new(array![[2.0, 2.0], [1.0, 1.0]]).unwrap();
        let (w2, hs) = normalize_columns(&w, &[h], DEFAULT_EPS).unwrap();
        assert_eq!(w2.entries.column(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(hs[0].entries.row(0).to_vec(), vec![2.0, 2.0]);
        assert_eq!(hs[0].entries.row(1).to_vec(), vec![5.0, 5.0]);
        assert!((w2.entries[[0, 1]] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn data_matrix_policies() {
        assert!(DataMatrix::new(array![[1.0, -0.5]], DataKind::Source).is_err());
        let d = DataMatrix::clamped(array![[1.0, -0.5]], DataKind::Source).unwrap();
        assert_eq!(d.entries[[0, 1]], 0.0);
        assert!(SparsityParams::new(-1.0, 0.0, 1e-12).is_err());
        assert!(SparsityParams::new(0.0, 0.0, 0.0).is_err());
    }
}
