//! Basis training for every NMF variant through one stochastic
//! multiplicative update (SMU) loop.
//!
//! The variant is selected by the two weights of [`TrainSpec`]:
//!
//! | variant  | `tau_a` | `tau_s`  |
//! |----------|---------|----------|
//! | NMF      | 0       | 0        |
//! | ANMF     | > 0     | 0        |
//! | DNMF     | 0       | 1        |
//! | D+ANMF   | >= 0    | in (0,1) |
//!
//! Exemplar NMF is NMF with exemplar initialization and zero epochs.
//!
//! Each epoch shuffles every term (columns jointly with their latents),
//! refreshes the supervised latents against the concatenated bases, then per
//! source refreshes the weak and adversarial latents and sweeps the batches
//! updating the basis. Bases are normalized before the latent updates and
//! again at the end of the epoch.

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversarial::{
    assemble_adversarial, compute_beta, default_omega, AdversarialSet, OmegaWeights, WeightModel,
};
use crate::error::{shape_err, Error, Result};
use crate::model::{
    init_exemplar, init_random, latent_step, normalize_in_place, seeded_rng, Basis, DataKind,
    DataMatrix, Latents, SparsityParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    Exemplar,
    Random,
}

/// Term whose columns are swept exactly once per epoch; the other terms are
/// resampled to the same number of batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SampleAnchor {
    #[default]
    TrueData,
    Adversarial,
    Supervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nmf,
    Anmf,
    Dnmf,
    Danmf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    /// Latent dimension per source.
    pub d: Vec<usize>,
    pub tau_a: f64,
    pub tau_s: f64,
    /// Per-source weight of the supervised term; empty means all ones.
    pub gamma: Vec<f64>,
    pub sparsity: SparsityParams,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init: InitMode,
    /// `None` selects the ratio weights `N_j / N_hat_i`.
    pub omega: Option<OmegaWeights>,
    /// `None` selects equal deterministic weights.
    pub weight_model: Option<WeightModel>,
    pub sample_anchor: SampleAnchor,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            d: vec![16, 16],
            tau_a: 0.0,
            tau_s: 0.0,
            gamma: Vec::new(),
            sparsity: SparsityParams::default(),
            epochs: 200,
            batch_size: 100,
            seed: 0,
            init: InitMode::Exemplar,
            omega: None,
            weight_model: None,
            sample_anchor: SampleAnchor::TrueData,
        }
    }
}

impl TrainSpec {
    pub fn num_sources(&self) -> usize {
        self.d.len()
    }

    pub fn method(&self) -> Method {
        if self.tau_s == 0.0 {
            if self.tau_a == 0.0 {
                Method::Nmf
            } else {
                Method::Anmf
            }
        } else if self.tau_s == 1.0 && self.tau_a == 0.0 {
            Method::Dnmf
        } else {
            Method::Danmf
        }
    }

    pub fn gamma_of(&self, i: usize) -> f64 {
        self.gamma.get(i).copied().unwrap_or(1.0)
    }

    pub fn weights(&self) -> WeightModel {
        self.weight_model
            .clone()
            .unwrap_or_else(|| WeightModel::equal(self.num_sources()))
    }

    fn uses_weak(&self) -> bool {
        self.tau_s < 1.0
    }

    fn uses_adversarial(&self) -> bool {
        self.tau_s < 1.0 && self.tau_a > 0.0
    }

    fn uses_supervised(&self) -> bool {
        self.tau_s > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.d.is_empty() || self.d.contains(&0) {
            return Err(Error::InvalidParam("every latent dimension must be >= 1".into()));
        }
        if !(self.tau_a >= 0.0 && self.tau_a.is_finite()) {
            return Err(Error::InvalidParam(format!("tau_a must be >= 0, got {}", self.tau_a)));
        }
        if !(0.0..=1.0).contains(&self.tau_s) {
            return Err(Error::InvalidParam(format!("tau_s must be in [0, 1], got {}", self.tau_s)));
        }
        if !self.gamma.is_empty()
            && (self.gamma.len() != self.d.len() || self.gamma.iter().any(|&g| !(g > 0.0)))
        {
            return Err(Error::InvalidParam(
                "gamma must hold one positive weight per source".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be >= 1".into()));
        }
        self.sparsity.validate()?;
        if let Some(wm) = &self.weight_model {
            wm.validate()?;
        }
        Ok(())
    }
}

/// Mixes paired with their ground-truth components.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedData {
    pub sources: Vec<DataMatrix>,
    pub mix: DataMatrix,
}

/// Everything the SMU loop consumes: weak per-source data, adversarial sets,
/// and optional strong supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub sources: Vec<DataMatrix>,
    pub adversarial: Vec<AdversarialSet>,
    pub supervised: Option<SupervisedData>,
}

impl TrainingData {
    /// Weak data only.
    pub fn weak(sources: Vec<DataMatrix>) -> Self {
        TrainingData {
            sources,
            adversarial: Vec::new(),
            supervised: None,
        }
    }

    /// Builds the adversarial sets from the sources and (optionally) mixes
    /// when `spec.tau_a > 0`, using the spec's omega and weight model.
    pub fn assemble(
        sources: Vec<DataMatrix>,
        mixes: Option<DataMatrix>,
        supervised: Option<SupervisedData>,
        spec: &TrainSpec,
    ) -> Result<Self> {
        let mut adversarial = Vec::new();
        if spec.tau_a > 0.0 {
            let m = sources
                .iter()
                .find(|u| u.ncols() > 0)
                .map(|u| u.nrows())
                .ok_or_else(|| Error::Empty("adversarial term needs source data".into()))?;
            let mixes = mixes.unwrap_or(DataMatrix {
                entries: Array2::zeros((m, 0)),
                kind: DataKind::Mix,
            });
            let counts: Vec<usize> = sources.iter().map(|u| u.ncols()).collect();
            let omega = match &spec.omega {
                Some(om) => om.clone(),
                None => default_omega(&counts, mixes.ncols())?,
            };
            let wm = spec.weights();
            for i in 0..sources.len() {
                let beta = compute_beta(&wm, i, spec.seed)?;
                adversarial.push(assemble_adversarial(i, &sources, &mixes, &omega, beta)?);
            }
        }
        Ok(TrainingData {
            sources,
            adversarial,
            supervised,
        })
    }
}

/// Positive and negative parts of the gradient of one term with respect to a
/// basis.
#[derive(Debug, Clone, PartialEq)]
pub struct GradParts {
    pub plus: Array2<f64>,
    pub minus: Array2<f64>,
}

fn data_gram_parts(
    w: ArrayView2<f64>,
    u: ArrayView2<f64>,
    h: ArrayView2<f64>,
    n: f64,
) -> (Array2<f64>, Array2<f64>) {
    let model = w.dot(&h.dot(&h.t())) / n;
    let data = u.dot(&h.t()) / n;
    (model, data)
}

fn check_parts_shapes(
    op: &'static str,
    w: (usize, usize),
    u: (usize, usize),
    h: (usize, usize),
) -> Result<()> {
    if w.0 != u.0 {
        return Err(shape_err(op, w, u));
    }
    if h.0 != w.1 || h.1 != u.1 {
        return Err(shape_err(op, h, (w.1, u.1)));
    }
    Ok(())
}

/// `plus = W (H H^T) / n`, `minus = U H^T / n`.
pub fn grad_parts_std(w: &Basis, u: &DataMatrix, h: &Latents, n: usize) -> Result<GradParts> {
    check_parts_shapes("grad_parts_std", w.entries.dim(), u.entries.dim(), h.entries.dim())?;
    if n == 0 {
        return Err(Error::InvalidParam("grad_parts_std: n must be > 0".into()));
    }
    let (plus, minus) = data_gram_parts(
        w.entries.view(),
        u.entries.view(),
        h.entries.view(),
        n as f64,
    );
    Ok(GradParts { plus, minus })
}

/// Adversarial parts. The roles are swapped relative to the standard term:
/// the data product goes to `plus` (denominator) and the Gram product to
/// `minus` (numerator).
pub fn grad_parts_adv(
    w: &Basis,
    uhat: &AdversarialSet,
    hhat: &Latents,
    tau_a: f64,
    nhat: usize,
) -> Result<GradParts> {
    check_parts_shapes(
        "grad_parts_adv",
        w.entries.dim(),
        uhat.matrix.entries.dim(),
        hhat.entries.dim(),
    )?;
    if !(tau_a >= 0.0) {
        return Err(Error::InvalidParam(format!("tau_a must be >= 0, got {tau_a}")));
    }
    if nhat == 0 {
        return Err(Error::InvalidParam("grad_parts_adv: nhat must be > 0".into()));
    }
    Ok(adv_parts(
        w.entries.view(),
        uhat.matrix.entries.view(),
        hhat.entries.view(),
        tau_a,
        nhat as f64,
    ))
}

fn adv_parts(
    w: ArrayView2<f64>,
    u: ArrayView2<f64>,
    h: ArrayView2<f64>,
    tau_a: f64,
    n: f64,
) -> GradParts {
    let (model, data) = data_gram_parts(w, u, h, n);
    GradParts {
        plus: data * tau_a,
        minus: model * tau_a,
    }
}

/// `plus = W_i (H~_i H~_i^T) / N_sup`, `minus = U~_i H~_i^T / N_sup`.
pub fn grad_parts_sup(
    w_i: &Basis,
    usup_i: &DataMatrix,
    hsup_i: &Latents,
    n_sup: usize,
) -> Result<GradParts> {
    check_parts_shapes(
        "grad_parts_sup",
        w_i.entries.dim(),
        usup_i.entries.dim(),
        hsup_i.entries.dim(),
    )?;
    if n_sup == 0 {
        return Err(Error::InvalidParam("grad_parts_sup: n_sup must be > 0".into()));
    }
    let (plus, minus) = data_gram_parts(
        w_i.entries.view(),
        usup_i.entries.view(),
        hsup_i.entries.view(),
        n_sup as f64,
    );
    Ok(GradParts { plus, minus })
}

fn basis_step(
    mut w: ArrayViewMut2<f64>,
    std: Option<&GradParts>,
    adv: Option<&GradParts>,
    sup: Option<&GradParts>,
    tau_s: f64,
    mu_w: f64,
    eps: f64,
) {
    let weak = std.is_some() || adv.is_some();
    for ((r, c), x) in w.indexed_iter_mut() {
        let mut num = 0.0;
        let mut den = 0.0;
        if weak {
            let mut wn = 0.0;
            let mut wd = 0.0;
            if let Some(p) = std {
                wn = p.minus[[r, c]];
                wd = p.plus[[r, c]];
            }
            if let Some(p) = adv {
                wn += p.minus[[r, c]];
                wd += p.plus[[r, c]];
            }
            num = (1.0 - tau_s) * wn;
            den = (1.0 - tau_s) * wd;
        }
        if let Some(p) = sup {
            num += tau_s * p.minus[[r, c]];
            den += tau_s * p.plus[[r, c]];
        }
        *x = *x * num / (den + mu_w + eps);
    }
}

/// Combined multiplicative basis update over the available gradient parts;
/// missing parts count as zero.
pub fn update_basis(
    w: &Basis,
    parts_std: Option<&GradParts>,
    parts_adv: Option<&GradParts>,
    parts_sup: Option<&GradParts>,
    tau_s: f64,
    mu_w: f64,
    eps: f64,
) -> Result<Basis> {
    for p in [parts_std, parts_adv, parts_sup].into_iter().flatten() {
        if p.plus.dim() != w.entries.dim() || p.minus.dim() != w.entries.dim() {
            return Err(shape_err("update_basis", w.entries.dim(), p.plus.dim()));
        }
    }
    let mut out = w.clone();
    basis_step(
        out.entries.view_mut(),
        parts_std,
        parts_adv,
        parts_sup,
        tau_s,
        mu_w,
        eps,
    );
    Ok(out)
}

/// Number of gradient-part evaluations per term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartCounts {
    pub std: usize,
    pub adv: usize,
    pub sup: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub per_source: Vec<f64>,
    /// Gamma-weighted sum of the per-source values.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub bases: Vec<Basis>,
    /// `H_i`, one per source (empty columns when the weak term is unused).
    pub latents_true: Vec<Latents>,
    /// `H^_i`, one per source (empty when the adversarial term is unused).
    pub latents_adv: Vec<Latents>,
    /// `H~`, rows stacked in source order.
    pub latents_sup: Latents,
    pub epoch: usize,
    /// Shuffle generators: one per source, then one for the supervised term.
    pub rng_state: Vec<ChaCha8Rng>,
    /// Objective after initialization followed by one entry per epoch.
    pub history: Vec<Objective>,
    pub part_counts: PartCounts,
}

impl TrainState {
    /// Row offsets of each source's block in the supervised latents.
    pub fn sup_offsets(&self) -> Vec<usize> {
        offsets(&self.bases.iter().map(|b| b.rank()).collect::<Vec<_>>())
    }

    pub fn sup_block(&self, i: usize) -> ArrayView2<'_, f64> {
        let off = self.sup_offsets();
        self.latents_sup.entries.slice(s![off[i]..off[i + 1], ..])
    }
}

fn offsets(d: &[usize]) -> Vec<usize> {
    let mut off = vec![0];
    for &k in d {
        off.push(off.last().unwrap() + k);
    }
    off
}

/// Seed of source `i`'s basis initialization, derived from the master seed.
pub fn source_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn shuffle_rng(seed: u64, i: usize) -> ChaCha8Rng {
    seeded_rng(seed, i as u64 + 1)
}

fn sup_rng(seed: u64) -> ChaCha8Rng {
    seeded_rng(seed, u64::MAX)
}

fn initial_basis(
    candidates: &[&DataMatrix],
    m: usize,
    d: usize,
    spec: &TrainSpec,
    i: usize,
) -> Result<Basis> {
    let seed = source_seed(spec.seed, i);
    let mut b = match spec.init {
        InitMode::Exemplar => match candidates.iter().find(|u| u.ncols() > 0) {
            Some(u) => init_exemplar(u, d, seed)?,
            None => init_random(m, d, seed)?,
        },
        InitMode::Random => init_random(m, d, seed)?,
    };
    b.source_id = i;
    Ok(b)
}

/// Batch layout of one term: the anchor term is cut into contiguous chunks
/// of `batch_size`; other terms are cut into `nb` chunks of
/// `ceil(n / nb)` positions that wrap around, reusing columns when the term
/// is smaller than the batch count.
#[derive(Debug, Clone, Copy)]
struct TermBatches {
    n: usize,
    chunk: usize,
    anchor: bool,
}

impl TermBatches {
    fn positions(&self, b: usize) -> Vec<usize> {
        if self.anchor {
            let start = b * self.chunk;
            (start..(start + self.chunk).min(self.n)).collect()
        } else {
            (0..self.chunk).map(|j| (b * self.chunk + j) % self.n).collect()
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BatchPlan {
    batches: usize,
    weak: Option<TermBatches>,
    adv: Option<TermBatches>,
    sup: Option<TermBatches>,
}

fn plan_batches(n_weak: Option<usize>, n_adv: Option<usize>, n_sup: Option<usize>, spec: &TrainSpec) -> BatchPlan {
    let order = match spec.sample_anchor {
        SampleAnchor::TrueData => [n_weak, n_adv, n_sup],
        SampleAnchor::Adversarial => [n_adv, n_weak, n_sup],
        SampleAnchor::Supervised => [n_sup, n_weak, n_adv],
    };
    let anchor_n = order.iter().flatten().next().copied().unwrap_or(0);
    let batches = anchor_n.div_ceil(spec.batch_size).max(1);
    let mut anchor_taken = false;
    let mut term = |n: Option<usize>| {
        n.map(|n| {
            let anchor = !anchor_taken;
            if anchor {
                anchor_taken = true;
                TermBatches { n, chunk: spec.batch_size.min(n), anchor }
            } else {
                TermBatches { n, chunk: n.div_ceil(batches), anchor }
            }
        })
    };
    // anchor must be claimed first
    let (weak, adv, sup) = match spec.sample_anchor {
        SampleAnchor::TrueData => {
            let w = term(n_weak);
            let a = term(n_adv);
            (w, a, term(n_sup))
        }
        SampleAnchor::Adversarial => {
            let a = term(n_adv);
            let w = term(n_weak);
            (w, a, term(n_sup))
        }
        SampleAnchor::Supervised => {
            let sp = term(n_sup);
            let w = term(n_weak);
            (w, term(n_adv), sp)
        }
    };
    BatchPlan { batches, weak, adv, sup }
}

fn gather(a: ArrayView2<f64>, perm: &[usize], pos: &[usize]) -> Array2<f64> {
    let idx: Vec<usize> = pos.iter().map(|&p| perm[p]).collect();
    a.select(Axis(1), &idx)
}

fn permutation(n: usize, shuffle: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    if shuffle {
        perm.shuffle(rng);
    }
    perm
}

struct SourceState {
    w: Array2<f64>,
    h: Array2<f64>,
    h_adv: Array2<f64>,
    rng: ChaCha8Rng,
    counts: PartCounts,
}

struct SourceData<'a> {
    u: Option<ArrayView2<'a, f64>>,
    u_adv: Option<ArrayView2<'a, f64>>,
    u_sup: Option<ArrayView2<'a, f64>>,
    plan: BatchPlan,
}

/// Stochastic multiplicative update trainer.
///
/// [`train_smu`] runs it to completion; the type is public so callers can
/// drive single epochs.
pub struct Trainer<'a> {
    data: &'a TrainingData,
    spec: TrainSpec,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a TrainingData, spec: &TrainSpec) -> Result<Self> {
        spec.validate()?;
        let s = spec.num_sources();
        let m = validate_data(data, spec)?;
        let sp = spec.sparsity;

        let mut bases = Vec::with_capacity(s);
        for i in 0..s {
            let mut cands: Vec<&DataMatrix> = Vec::new();
            if spec.uses_weak() {
                cands.push(&data.sources[i]);
            }
            if let Some(sup) = &data.supervised {
                cands.push(&sup.sources[i]);
            }
            let mut b = initial_basis(&cands, m, spec.d[i], spec, i)?;
            normalize_in_place(b.entries.view_mut(), &mut [], sp.eps);
            bases.push(b);
        }

        let mut latents_true = Vec::with_capacity(s);
        let mut latents_adv = Vec::with_capacity(s);
        for (i, b) in bases.iter().enumerate() {
            let w = b.entries.view();
            let h = match spec.uses_weak() {
                true => {
                    let u = data.sources[i].entries.view();
                    let ones = Array2::ones((spec.d[i], u.ncols()));
                    latent_step(ones.view(), w, u, sp.mu_h, sp.eps, u.ncols() as f64)
                }
                false => Array2::zeros((spec.d[i], 0)),
            };
            let h_adv = match spec.uses_adversarial() {
                true => {
                    let u = data.adversarial[i].matrix.entries.view();
                    let ones = Array2::ones((spec.d[i], u.ncols()));
                    latent_step(ones.view(), w, u, sp.mu_h, sp.eps, u.ncols() as f64)
                }
                false => Array2::zeros((spec.d[i], 0)),
            };
            latents_true.push(Latents { entries: h });
            latents_adv.push(Latents { entries: h_adv });
        }
        let total_d: usize = spec.d.iter().sum();
        let latents_sup = match (spec.uses_supervised(), &data.supervised) {
            (true, Some(sup)) => {
                let wcat = concat_bases(&bases);
                let v = sup.mix.entries.view();
                let ones = Array2::ones((total_d, v.ncols()));
                latent_step(ones.view(), wcat.view(), v, sp.mu_h, sp.eps, v.ncols() as f64)
            }
            _ => Array2::zeros((total_d, 0)),
        };

        let mut rng_state: Vec<ChaCha8Rng> = (0..s).map(|i| shuffle_rng(spec.seed, i)).collect();
        rng_state.push(sup_rng(spec.seed));

        let mut state = TrainState {
            bases,
            latents_true,
            latents_adv,
            latents_sup: Latents { entries: latents_sup },
            epoch: 0,
            rng_state,
            history: Vec::new(),
            part_counts: PartCounts::default(),
        };
        let obj = objective(&state, data, spec)?;
        state.history.push(obj);
        Ok(Trainer {
            data,
            spec: spec.clone(),
            state,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn run(mut self) -> Result<TrainState> {
        for _ in 0..self.spec.epochs {
            self.epoch()?;
        }
        Ok(self.state)
    }

    /// One pass of the SMU loop.
    pub fn epoch(&mut self) -> Result<()> {
        let spec = &self.spec;
        let data = self.data;
        let sp = spec.sparsity;
        let s = spec.num_sources();
        let st = &mut self.state;

        let plans: Vec<BatchPlan> = (0..s)
            .map(|i| {
                plan_batches(
                    spec.uses_weak().then(|| data.sources[i].ncols()),
                    spec.uses_adversarial().then(|| data.adversarial[i].ncols()),
                    spec.uses_supervised().then(|| sup_count(data)),
                    spec,
                )
            })
            .collect();

        let mut sources: Vec<SourceState> = (0..s)
            .map(|i| SourceState {
                w: std::mem::take(&mut st.bases[i].entries),
                h: std::mem::take(&mut st.latents_true[i].entries),
                h_adv: std::mem::take(&mut st.latents_adv[i].entries),
                rng: st.rng_state[i].clone(),
                counts: PartCounts::default(),
            })
            .collect();
        let views: Vec<SourceData> = (0..s)
            .map(|i| SourceData {
                u: spec.uses_weak().then(|| data.sources[i].entries.view()),
                u_adv: spec
                    .uses_adversarial()
                    .then(|| data.adversarial[i].matrix.entries.view()),
                u_sup: data
                    .supervised
                    .as_ref()
                    .filter(|_| spec.uses_supervised())
                    .map(|sup| sup.sources[i].entries.view()),
                plan: plans[i],
            })
            .collect();

        if spec.uses_supervised() {
            let sup = data.supervised.as_ref().expect("validated");
            let off = offsets(&spec.d);
            let any_multi = plans.iter().any(|p| p.batches > 1);
            let sup_perm = permutation(sup_count(data), any_multi, &mut st.rng_state[s]);
            let hs = &mut st.latents_sup.entries;
            for (i, src) in sources.iter_mut().enumerate() {
                let block = hs.slice_mut(s![off[i]..off[i + 1], ..]);
                normalize_in_place(
                    src.w.view_mut(),
                    &mut [src.h.view_mut(), src.h_adv.view_mut(), block],
                    sp.eps,
                );
            }
            let wcat = concat_views(sources.iter().map(|x| x.w.view()));
            let v = sup.mix.entries.view();
            *hs = latent_step(hs.view(), wcat.view(), v, sp.mu_h, sp.eps, v.ncols() as f64);
            for (i, src) in sources.iter_mut().enumerate() {
                let block = hs.slice_mut(s![off[i]..off[i + 1], ..]);
                let perm: Vec<usize> = if plans[i].batches > 1 {
                    sup_perm.clone()
                } else {
                    (0..sup_count(data)).collect()
                };
                source_epoch(src, &views[i], Some((block, &perm)), spec, spec.gamma_of(i));
            }
        } else if s > 1 && rayon::current_num_threads() > 1 {
            sources
                .par_iter_mut()
                .zip(views.par_iter())
                .for_each(|(src, view)| source_epoch(src, view, None, spec, 1.0));
        } else {
            for (src, view) in sources.iter_mut().zip(views.iter()) {
                source_epoch(src, view, None, spec, 1.0);
            }
        }

        let off = offsets(&spec.d);
        for (i, src) in sources.into_iter().enumerate() {
            let mut w = src.w;
            let mut h = src.h;
            let mut h_adv = src.h_adv;
            {
                let block = st
                    .latents_sup
                    .entries
                    .slice_mut(s![off[i]..off[i + 1], ..]);
                normalize_in_place(
                    w.view_mut(),
                    &mut [h.view_mut(), h_adv.view_mut(), block],
                    sp.eps,
                );
            }
            st.bases[i].entries = w;
            st.latents_true[i].entries = h;
            st.latents_adv[i].entries = h_adv;
            st.rng_state[i] = src.rng;
            st.part_counts.std += src.counts.std;
            st.part_counts.adv += src.counts.adv;
            st.part_counts.sup += src.counts.sup;
        }
        st.epoch += 1;
        let obj = objective(st, data, spec)?;
        st.history.push(obj);
        Ok(())
    }
}

fn source_epoch(
    src: &mut SourceState,
    view: &SourceData,
    sup: Option<(ArrayViewMut2<f64>, &[usize])>,
    spec: &TrainSpec,
    gamma: f64,
) {
    let sp = spec.sparsity;
    let plan = view.plan;
    let multi = plan.batches > 1;
    let perm_weak = view.u.map(|u| permutation(u.ncols(), multi, &mut src.rng));
    let perm_adv = view.u_adv.map(|u| permutation(u.ncols(), multi, &mut src.rng));

    let (mut sup_block, sup_perm) = match sup {
        Some((b, p)) => (Some(b), Some(p)),
        None => (None, None),
    };
    {
        let mut partners = vec![src.h.view_mut(), src.h_adv.view_mut()];
        if let Some(b) = sup_block.as_mut() {
            partners.push(b.view_mut());
        }
        normalize_in_place(src.w.view_mut(), &mut partners, sp.eps);
    }
    if let Some(u) = view.u {
        src.h = latent_step(src.h.view(), src.w.view(), u, sp.mu_h, sp.eps, u.ncols() as f64);
    }
    if let Some(u) = view.u_adv {
        src.h_adv = latent_step(src.h_adv.view(), src.w.view(), u, sp.mu_h, sp.eps, u.ncols() as f64);
    }

    for b in 0..plan.batches {
        let std = match (view.u, plan.weak, &perm_weak) {
            (Some(u), Some(tb), Some(perm)) => {
                let pos = tb.positions(b);
                let ub = gather(u, perm, &pos);
                let hb = gather(src.h.view(), perm, &pos);
                src.counts.std += 1;
                let (plus, minus) =
                    data_gram_parts(src.w.view(), ub.view(), hb.view(), pos.len() as f64);
                Some(GradParts { plus, minus })
            }
            _ => None,
        };
        let adv = match (view.u_adv, plan.adv, &perm_adv) {
            (Some(u), Some(tb), Some(perm)) => {
                let pos = tb.positions(b);
                let ub = gather(u, perm, &pos);
                let hb = gather(src.h_adv.view(), perm, &pos);
                src.counts.adv += 1;
                Some(adv_parts(src.w.view(), ub.view(), hb.view(), spec.tau_a, pos.len() as f64))
            }
            _ => None,
        };
        let supp = match (view.u_sup, plan.sup, sup_perm, sup_block.as_ref()) {
            (Some(u), Some(tb), Some(perm), Some(block)) => {
                let pos = tb.positions(b);
                let ub = gather(u, perm, &pos);
                let hb = gather(block.view(), perm, &pos);
                src.counts.sup += 1;
                let (plus, minus) =
                    data_gram_parts(src.w.view(), ub.view(), hb.view(), pos.len() as f64);
                Some(if gamma == 1.0 {
                    GradParts { plus, minus }
                } else {
                    GradParts {
                        plus: plus * gamma,
                        minus: minus * gamma,
                    }
                })
            }
            _ => None,
        };
        basis_step(
            src.w.view_mut(),
            std.as_ref(),
            adv.as_ref(),
            supp.as_ref(),
            spec.tau_s,
            sp.mu_w,
            sp.eps,
        );
    }
}

fn sup_count(data: &TrainingData) -> usize {
    data.supervised.as_ref().map(|s| s.mix.ncols()).unwrap_or(0)
}

pub(crate) fn concat_bases(bases: &[Basis]) -> Array2<f64> {
    concat_views(bases.iter().map(|b| b.entries.view()))
}

fn concat_views<'b>(views: impl Iterator<Item = ArrayView2<'b, f64>>) -> Array2<f64> {
    let views: Vec<_> = views.collect();
    ndarray::concatenate(Axis(1), &views).expect("bases share row count")
}

fn validate_data(data: &TrainingData, spec: &TrainSpec) -> Result<usize> {
    let s = spec.num_sources();
    let mut m: Option<usize> = None;
    let mut check_rows = |what: &str, u: &DataMatrix| -> Result<()> {
        match m {
            None => {
                m = Some(u.nrows());
                Ok(())
            }
            Some(m0) if m0 == u.nrows() => Ok(()),
            Some(m0) => Err(Error::Shape {
                op: "train_smu",
                left: format!("{what} with {} rows", u.nrows()),
                right: format!("{m0} rows"),
            }),
        }
    };
    if spec.uses_weak() {
        if data.sources.len() != s {
            return Err(Error::InvalidParam(format!(
                "spec has {s} sources but {} source datasets were given",
                data.sources.len()
            )));
        }
        for (i, u) in data.sources.iter().enumerate() {
            if u.ncols() == 0 {
                return Err(Error::Empty(format!("true data of source {i} is empty")));
            }
            check_rows("source data", u)?;
        }
    }
    if spec.uses_adversarial() {
        if data.adversarial.len() != s {
            return Err(Error::Empty(format!(
                "adversarial term needs {s} adversarial sets, got {}",
                data.adversarial.len()
            )));
        }
        for (i, a) in data.adversarial.iter().enumerate() {
            if a.ncols() == 0 {
                return Err(Error::Empty(format!("adversarial data of source {i} is empty")));
            }
            check_rows("adversarial data", &a.matrix)?;
        }
    }
    if spec.uses_supervised() {
        let sup = data
            .supervised
            .as_ref()
            .ok_or_else(|| Error::Empty("supervised term needs supervised data".into()))?;
        if sup.sources.len() != s {
            return Err(Error::Empty(format!(
                "supervised term needs {s} ground-truth sets, got {}",
                sup.sources.len()
            )));
        }
        if sup.mix.ncols() == 0 {
            return Err(Error::Empty("supervised mixes are empty".into()));
        }
        check_rows("supervised mix", &sup.mix)?;
        for u in &sup.sources {
            check_rows("supervised source", u)?;
            if u.ncols() != sup.mix.ncols() {
                return Err(shape_err("train_smu", u.entries.dim(), sup.mix.entries.dim()));
            }
        }
    }
    m.ok_or_else(|| Error::Empty("no training data".into()))
}

/// Runs `spec.epochs` SMU epochs from the seeded initialization.
pub fn train_smu(data: &TrainingData, spec: &TrainSpec) -> Result<TrainState> {
    Trainer::new(data, spec)?.run()
}

fn sq_residual(u: ArrayView2<f64>, w: ArrayView2<f64>, h: ArrayView2<f64>) -> f64 {
    let r = w.dot(&h);
    u.iter().zip(r.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Per-source value of the combined weak, adversarial and supervised
/// objective evaluated at the current latents, and its gamma-weighted sum.
pub fn objective(state: &TrainState, data: &TrainingData, spec: &TrainSpec) -> Result<Objective> {
    let s = spec.num_sources();
    if state.bases.len() != s {
        return Err(Error::InvalidParam("state and spec disagree on source count".into()));
    }
    let off = state.sup_offsets();
    let mut per_source = Vec::with_capacity(s);
    for i in 0..s {
        let w = state.bases[i].entries.view();
        let mut f = 0.0;
        if spec.uses_weak() {
            let u = &data.sources[i];
            let h = &state.latents_true[i];
            check_parts_shapes("objective", w.dim(), u.entries.dim(), h.entries.dim())?;
            f += (1.0 - spec.tau_s) * sq_residual(u.entries.view(), w, h.entries.view())
                / u.ncols() as f64;
        }
        if spec.uses_adversarial() {
            let u = &data.adversarial[i].matrix;
            let h = &state.latents_adv[i];
            check_parts_shapes("objective", w.dim(), u.entries.dim(), h.entries.dim())?;
            f -= (1.0 - spec.tau_s)
                * spec.tau_a
                * sq_residual(u.entries.view(), w, h.entries.view())
                / u.ncols() as f64;
        }
        if spec.uses_supervised() {
            let sup = data
                .supervised
                .as_ref()
                .ok_or_else(|| Error::Empty("supervised data".into()))?;
            let u = &sup.sources[i];
            let h = state
                .latents_sup
                .entries
                .slice(s![off[i]..off[i + 1], ..]);
            check_parts_shapes("objective", w.dim(), u.entries.dim(), h.dim())?;
            f += spec.tau_s * sq_residual(u.entries.view(), w, h) / u.ncols() as f64;
        }
        f += spec.sparsity.mu_w * w.iter().sum::<f64>();
        per_source.push(f);
    }
    let total = per_source
        .iter()
        .enumerate()
        .map(|(i, f)| spec.gamma_of(i) * f)
        .sum();
    Ok(Objective { per_source, total })
}

/// Result of semi-supervised fitting of the unknown source's basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiState {
    /// The fitted basis of the unknown (last) source.
    pub basis: Basis,
    /// Latents of every source on the mixes, pretrained sources first.
    pub latents: Vec<Latents>,
    /// `||V - sum_i W_i H_i||_F^2 / N_V + mu_w |W_S|_1` after initialization
    /// and after each epoch.
    pub history: Vec<f64>,
}

/// Fits the basis of the last source from mixes, keeping the pretrained
/// bases of the other sources frozen. The last entry of `spec.d` is the
/// latent dimension of the new basis.
pub fn train_semisupervised(v: &DataMatrix, pretrained: &[Basis], spec: &TrainSpec) -> Result<Basis> {
    train_semisupervised_state(v, pretrained, spec).map(|s| s.basis)
}

pub fn train_semisupervised_state(
    v: &DataMatrix,
    pretrained: &[Basis],
    spec: &TrainSpec,
) -> Result<SemiState> {
    spec.validate()?;
    if v.ncols() == 0 {
        return Err(Error::Empty("semi-supervised fitting needs mixes".into()));
    }
    let m = v.nrows();
    for b in pretrained {
        if b.dim() != m {
            return Err(shape_err("train_semisupervised", b.entries.dim(), v.entries.dim()));
        }
    }
    let k = pretrained.len();
    let d_new = *spec.d.last().expect("validated");
    let sp = spec.sparsity;
    let n = v.ncols() as f64;
    let vv = v.entries.view();

    let mut w_new = initial_basis(&[v], m, d_new, spec, k)?;
    normalize_in_place(w_new.entries.view_mut(), &mut [], sp.eps);
    let mut ws: Vec<Array2<f64>> = pretrained.iter().map(|b| b.entries.clone()).collect();
    ws.push(w_new.entries);
    let mut hs: Vec<Array2<f64>> = ws
        .iter()
        .map(|w| Array2::ones((w.ncols(), v.ncols())))
        .collect();
    hs = semi_latent_step(&ws, &hs, vv, sp, n);

    let mut history = vec![semi_objective(&ws, &hs, vv, sp.mu_w)];
    for _ in 0..spec.epochs {
        {
            let (w_last, h_last) = (&mut ws[k], &mut hs[k]);
            normalize_in_place(w_last.view_mut(), &mut [h_last.view_mut()], sp.eps);
        }
        hs = semi_latent_step(&ws, &hs, vv, sp, n);
        let numer = vv.dot(&hs[k].t()) / n;
        let mut denom: Option<Array2<f64>> = None;
        for (w, h) in ws.iter().zip(hs.iter()) {
            let term = w.dot(&h.dot(&hs[k].t()));
            denom = Some(match denom {
                None => term,
                Some(acc) => acc + term,
            });
        }
        let denom = denom.expect("at least one source") / n;
        ndarray::Zip::from(&mut ws[k])
            .and(&numer)
            .and(&denom)
            .for_each(|x, &num, &den| *x = *x * num / (den + sp.mu_w + sp.eps));
        {
            let (w_last, h_last) = (&mut ws[k], &mut hs[k]);
            normalize_in_place(w_last.view_mut(), &mut [h_last.view_mut()], sp.eps);
        }
        history.push(semi_objective(&ws, &hs, vv, sp.mu_w));
    }
    let basis = Basis {
        entries: ws.pop().expect("new basis"),
        source_id: k,
    };
    Ok(SemiState {
        basis,
        latents: hs.into_iter().map(|entries| Latents { entries }).collect(),
        history,
    })
}

// Jacobi step on all latents against the shared model sum_j W_j H_j, with the
// model product expanded through the cross Grams W_i^T W_j.
fn semi_latent_step(
    ws: &[Array2<f64>],
    hs: &[Array2<f64>],
    v: ArrayView2<f64>,
    sp: SparsityParams,
    n: f64,
) -> Vec<Array2<f64>> {
    ws.iter()
        .zip(hs.iter())
        .map(|(wi, hi)| {
            let numer = wi.t().dot(&v) / n;
            let mut denom: Option<Array2<f64>> = None;
            for (wj, hj) in ws.iter().zip(hs.iter()) {
                let term = wi.t().dot(wj).dot(hj);
                denom = Some(match denom {
                    None => term,
                    Some(acc) => acc + term,
                });
            }
            let denom = denom.expect("at least one source") / n;
            let mut out = hi.clone();
            ndarray::Zip::from(&mut out)
                .and(&numer)
                .and(&denom)
                .for_each(|o, &num, &den| *o = *o * num / (den + sp.mu_h + sp.eps));
            out
        })
        .collect()
}

fn semi_objective(ws: &[Array2<f64>], hs: &[Array2<f64>], v: ArrayView2<f64>, mu_w: f64) -> f64 {
    let mut model = Array2::<f64>::zeros(v.dim());
    for (w, h) in ws.iter().zip(hs.iter()) {
        model += &w.dot(h);
    }
    let r: f64 = v.iter().zip(model.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    r / v.ncols() as f64 + mu_w * ws.last().map(|w| w.sum()).unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dm(a: Array2<f64>) -> DataMatrix {
        DataMatrix::new(a, DataKind::Source).unwrap()
    }

    #[test]
    fn zero_latents_give_zero_parts() {
        let w = Basis::new(Array2::ones((3, 2)), 0).unwrap();
        let u = dm(Array2::ones((3, 4)));
        let h = Latents::new(Array2::zeros((2, 4))).unwrap();
        let p = grad_parts_std(&w, &u, &h, 4).unwrap();
        assert!(p.plus.iter().all(|&x| x == 0.0));
        assert!(p.minus.iter().all(|&x| x == 0.0));
        assert!(grad_parts_std(&w, &u, &h, 0).is_err());
        assert!(grad_parts_sup(&w, &u, &h, 0).is_err());
    }

    #[test]
    fn exact_factorization_is_basis_fixed_point() {
        let w = Basis::new(array![[0.6, 0.0], [0.8, 0.6], [0.0, 0.8]], 0).unwrap();
        let h = Latents::new(array![[1.0, 0.2, 0.5, 2.0], [0.3, 1.0, 0.0, 0.7]]).unwrap();
        let u = dm(w.entries.dot(&h.entries));
        let p = grad_parts_std(&w, &u, &h, 4).unwrap();
        // floor far below the denominators so it cannot perturb the fixed point
        let out = update_basis(&w, Some(&p), None, None, 0.0, 0.0, 1e-18).unwrap();
        for (a, b) in out.entries.iter().zip(w.entries.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn adversarial_parts_vanish_without_weight() {
        let w = Basis::new(Array2::ones((3, 2)), 0).unwrap();
        let sources = vec![dm(Array2::ones((3, 2))), dm(Array2::from_elem((3, 3), 0.5))];
        let mixes = DataMatrix::new(Array2::zeros((3, 0)), DataKind::Mix).unwrap();
        let om = default_omega(&[2, 3], 0).unwrap();
        let set = assemble_adversarial(0, &sources, &mixes, &om, 1.0).unwrap();
        let h = Latents::ones(2, 3);
        let p = grad_parts_adv(&w, &set, &h, 0.0, 3).unwrap();
        assert!(p.plus.iter().chain(p.minus.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn method_taxonomy() {
        let mut spec = TrainSpec::default();
        assert_eq!(spec.method(), Method::Nmf);
        spec.tau_a = 0.1;
        assert_eq!(spec.method(), Method::Anmf);
        spec.tau_s = 0.5;
        assert_eq!(spec.method(), Method::Danmf);
        spec.tau_a = 0.0;
        spec.tau_s = 1.0;
        assert_eq!(spec.method(), Method::Dnmf);
    }

    #[test]
    fn batch_plan_wraps_small_terms() {
        let spec = TrainSpec {
            batch_size: 4,
            ..TrainSpec::default()
        };
        let plan = plan_batches(Some(10), Some(3), None, &spec);
        assert_eq!(plan.batches, 3);
        let weak = plan.weak.unwrap();
        assert_eq!(weak.positions(0), vec![0, 1, 2, 3]);
        assert_eq!(weak.positions(2), vec![8, 9]);
        let adv = plan.adv.unwrap();
        assert_eq!(adv.positions(0), vec![0]);
        assert_eq!(adv.positions(2), vec![2]);
        let plan = plan_batches(Some(10), Some(25), None, &spec);
        let adv = plan.adv.unwrap();
        assert_eq!(adv.chunk, 9);
        assert_eq!(adv.positions(2), (18..27).map(|p| p % 25).collect::<Vec<_>>());
    }

    #[test]
    fn batch_larger_than_data_is_single_batch() {
        let spec = TrainSpec {
            batch_size: 1000,
            ..TrainSpec::default()
        };
        let plan = plan_batches(Some(10), Some(30), Some(7), &spec);
        assert_eq!(plan.batches, 1);
        assert_eq!(plan.weak.unwrap().positions(0), (0..10).collect::<Vec<_>>());
        assert_eq!(plan.adv.unwrap().positions(0), (0..30).collect::<Vec<_>>());
        assert_eq!(plan.sup.unwrap().positions(0), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn missing_terms_are_reported() {
        let spec = TrainSpec {
            d: vec![2, 2],
            tau_a: 0.5,
            epochs: 1,
            ..TrainSpec::default()
        };
        let data = TrainingData::weak(vec![dm(Array2::ones((3, 4))), dm(Array2::ones((3, 4)))]);
        let err = train_smu(&data, &spec).unwrap_err();
        assert!(err.to_string().contains("adversarial"), "{err}");

        let spec = TrainSpec {
            d: vec![2, 2],
            tau_s: 0.5,
            ..TrainSpec::default()
        };
        let err = train_smu(&data, &spec).unwrap_err();
        assert!(err.to_string().contains("supervised"), "{err}");

        let data = TrainingData::weak(vec![dm(Array2::ones((3, 4))), dm(Array2::zeros((3, 0)))]);
        let err = train_smu(&data, &TrainSpec { d: vec![2, 2], ..TrainSpec::default() }).unwrap_err();
        assert!(err.to_string().contains("source 1"), "{err}");
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let u0 = dm(Array2::from_shape_fn((4, 6), |(r, c)| 0.1 + ((r + 2 * c) % 5) as f64));
        let u1 = dm(Array2::from_shape_fn((4, 5), |(r, c)| 0.2 + ((3 * r + c) % 4) as f64));
        let data = TrainingData::weak(vec![u0.clone(), u1]);
        let spec = TrainSpec {
            d: vec![2, 3],
            epochs: 0,
            seed: 3,
            ..TrainSpec::default()
        };
        let st = train_smu(&data, &spec).unwrap();
        assert_eq!(st.epoch, 0);
        assert_eq!(st.history.len(), 1);
        let mut w0 = init_exemplar(&u0, 2, source_seed(3, 0)).unwrap();
        normalize_in_place(w0.entries.view_mut(), &mut [], 1e-12);
        assert_eq!(st.bases[0].entries, w0.entries);
    }
}
