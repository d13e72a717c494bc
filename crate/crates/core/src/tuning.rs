//! Randomized hyperparameter search with optional cross-validation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::seeded_rng;
use crate::trainer::TrainSpec;

pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    LogUniform { lo: f64, hi: f64 },
    Uniform { lo: f64, hi: f64 },
    Choice { values: Vec<f64> },
}

impl Sampler {
    pub fn validate(&self) -> Result<()> {
        match self {
            Sampler::LogUniform { lo, hi } => {
                if !(*lo > 0.0 && lo < hi) {
                    return Err(Error::InvalidParam(format!(
                        "log-uniform needs 0 < lo < hi (got {lo}, {hi})"
                    )));
                }
            }
            Sampler::Uniform { lo, hi } => {
                if !(lo < hi) {
                    return Err(Error::InvalidParam(format!("uniform needs lo < hi (got {lo}, {hi})")));
                }
            }
            Sampler::Choice { values } => {
                if values.is_empty() {
                    return Err(Error::InvalidParam("choice list is empty".into()));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            Sampler::LogUniform { lo, hi } => {
                let (a, b) = (lo.ln(), hi.ln());
                rng.gen_range(a..b).exp()
            }
            Sampler::Uniform { lo, hi } => rng.gen_range(*lo..*hi),
            Sampler::Choice { values } => *values.choose(rng).expect("validated non-empty"),
        }
    }
}

/// Tunable [`TrainSpec`] fields. Integer fields are rounded to the nearest
/// integer (at least 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    /// Latent dimension, applied to every source.
    D,
    TauA,
    TauS,
    MuW,
    MuH,
    Epochs,
    BatchSize,
}

impl Param {
    fn apply(self, spec: &mut TrainSpec, x: f64) {
        let count = || (x.round() as i64).max(1) as usize;
        match self {
            Param::D => spec.d.iter_mut().for_each(|d| *d = count()),
            Param::TauA => spec.tau_a = x,
            Param::TauS => spec.tau_s = x,
            Param::MuW => spec.sparsity.mu_w = x,
            Param::MuH => spec.sparsity.mu_h = x,
            Param::Epochs => spec.epochs = count(),
            Param::BatchSize => spec.batch_size = count(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SearchSpace {
    pub params: BTreeMap<Param, Sampler>,
}

impl SearchSpace {
    pub fn with(mut self, p: Param, s: Sampler) -> Self {
        self.params.insert(p, s);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.params.values().try_for_each(Sampler::validate)
    }

    /// Draws one spec; parameters are sampled in [`Param`] order.
    pub fn sample(&self, base: &TrainSpec, rng: &mut impl Rng) -> TrainSpec {
        let mut spec = base.clone();
        for (p, s) in &self.params {
            p.apply(&mut spec, s.sample(rng));
        }
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Seeded k-fold split of `0..n`; fold sizes differ by at most one.
pub fn cv_split(n: usize, folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 || folds > n {
        return Err(Error::InvalidParam(format!(
            "folds must lie in [2, {n}], got {folds}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seeded_rng(seed, 0));
    let base = n / folds;
    let extra = n % folds;
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for k in 0..folds {
        let len = base + usize::from(k < extra);
        let validation = perm[start..start + len].to_vec();
        let train = perm[..start]
            .iter()
            .chain(&perm[start + len..])
            .copied()
            .collect();
        out.push(Fold { train, validation });
        start += len;
    }
    Ok(out)
}

/// Scores a trial spec; higher is better.
pub trait TrialObjective: Sync {
    /// Number of strong-supervision samples available for cross-validation.
    fn supervised_count(&self) -> usize;

    /// With `fold = None` the objective fits on all data and scores on the
    /// full supervised set; otherwise it holds out `fold.validation`.
    fn evaluate(&self, spec: &TrainSpec, fold: Option<&Fold>) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub spec: TrainSpec,
    pub fold_scores: Vec<f64>,
    pub mean_score: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub trials: Vec<Trial>,
    pub best: usize,
}

impl TuneResult {
    pub fn best_trial(&self) -> &Trial {
        &self.trials[self.best]
    }
}

/// Samples `trials` specs from `space` around `base` and scores them.
///
/// Specs that consume strong supervision (`tau_s > 0`) are scored by
/// `folds`-fold cross-validation over the supervised samples; the others are
/// scored once on all data. A failing trial scores `-inf` and the search
/// continues. Trial `t` draws its parameters from stream `t` of `seed`, so
/// the result does not depend on how trials are scheduled.
pub fn random_search<O: TrialObjective>(
    space: &SearchSpace,
    base: &TrainSpec,
    trials: usize,
    objective: &O,
    folds: usize,
    seed: u64,
) -> Result<TuneResult> {
    if trials == 0 {
        return Err(Error::InvalidParam("trials must be >= 1".into()));
    }
    space.validate()?;
    let specs: Vec<TrainSpec> = (0..trials)
        .map(|t| space.sample(base, &mut seeded_rng(seed, t as u64)))
        .collect();
    let needs_cv = specs.iter().any(|s| s.tau_s > 0.0);
    let split = if needs_cv {
        Some(cv_split(objective.supervised_count(), folds, seed)?)
    } else {
        None
    };

    let results: Vec<Trial> = specs
        .into_par_iter()
        .map(|spec| {
            let runs: Vec<Option<&Fold>> = match (&split, spec.tau_s > 0.0) {
                (Some(f), true) => f.iter().map(Some).collect(),
                _ => vec![None],
            };
            let mut fold_scores = Vec::with_capacity(runs.len());
            let mut error = None;
            for fold in runs {
                match objective.evaluate(&spec, fold) {
                    Ok(x) if !x.is_nan() => fold_scores.push(x),
                    Ok(_) => {
                        error.get_or_insert_with(|| "objective returned NaN".to_string());
                        fold_scores.push(f64::NEG_INFINITY);
                    }
                    Err(e) => {
                        error.get_or_insert_with(|| e.to_string());
                        fold_scores.push(f64::NEG_INFINITY);
                    }
                }
            }
            let mean_score = fold_scores.iter().sum::<f64>() / fold_scores.len() as f64;
            Trial {
                spec,
                fold_scores,
                mean_score,
                error,
            }
        })
        .collect();

    let mut best = 0;
    for (t, trial) in results.iter().enumerate() {
        if trial.mean_score > results[best].mean_score {
            best = t;
        }
    }
    Ok(TuneResult {
        trials: results,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_folds_of_four() {
        let f = cv_split(4, 2, 7).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].validation.len(), 2);
        let mut all: Vec<usize> = f.iter().flat_map(|x| x.validation.clone()).collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(f, cv_split(4, 2, 7).unwrap());
    }

    #[test]
    fn fold_bounds() {
        assert!(cv_split(5, 1, 0).is_err());
        assert!(cv_split(5, 6, 0).is_err());
        assert!(cv_split(5, 5, 0).is_ok());
    }

    proptest! {
        #[test]
        fn folds_partition_indices(n in 2usize..200, k in 2usize..20, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let folds = cv_split(n, k, seed).unwrap();
            let mut seen = vec![0u32; n];
            let sizes: Vec<usize> = folds.iter().map(|f| f.validation.len()).collect();
            for f in &folds {
                prop_assert_eq!(f.train.len() + f.validation.len(), n);
                for &i in &f.validation {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn samplers_stay_in_range() {
        let mut rng = seeded_rng(1, 0);
        let lu = Sampler::LogUniform { lo: 1e-3, hi: 1.0 };
        let u = Sampler::Uniform { lo: -1.0, hi: 2.0 };
        let c = Sampler::Choice { values: vec![4.0, 8.0] };
        for _ in 0..1000 {
            let x = lu.sample(&mut rng);
            assert!((1e-3..1.0).contains(&x));
            let y = u.sample(&mut rng);
            assert!((-1.0..2.0).contains(&y));
            let z = c.sample(&mut rng);
            assert!(z == 4.0 || z == 8.0);
        }
        assert!(Sampler::Uniform { lo: 1.0, hi: 1.0 }.validate().is_err());
        assert!(Sampler::LogUniform { lo: 0.0, hi: 1.0 }.validate().is_err());
        assert!(Sampler::Choice { values: vec![] }.validate().is_err());
    }

    struct Quadratic;

    impl TrialObjective for Quadratic {
        fn supervised_count(&self) -> usize {
            10
        }

        fn evaluate(&self, spec: &TrainSpec, fold: Option<&Fold>) -> Result<f64> {
            if spec.tau_a > 0.9 {
                return Err(Error::InvalidParam("diverged".into()));
            }
            let shift = fold.map(|f| f.validation[0] as f64 * 1e-3).unwrap_or(0.0);
            Ok(-(spec.tau_a - 0.3).powi(2) + shift)
        }
    }

    #[test]
    fn single_trial_is_best() {
        let space = SearchSpace::default().with(Param::TauA, Sampler::Uniform { lo: 0.0, hi: 1.0 });
        let r = random_search(&space, &TrainSpec::default(), 1, &Quadratic, 5, 0).unwrap();
        assert_eq!(r.best, 0);
        assert_eq!(r.trials[0].fold_scores.len(), 1);
    }

    #[test]
    fn failures_score_negative_infinity() {
        let space = SearchSpace::default().with(Param::TauA, Sampler::Choice { values: vec![0.95, 0.2] });
        let r = random_search(&space, &TrainSpec::default(), 8, &Quadratic, 5, 3).unwrap();
        assert!(r.trials.iter().any(|t| t.mean_score == f64::NEG_INFINITY && t.error.is_some()));
        assert!(r.best_trial().mean_score.is_finite());
        assert_eq!(r, random_search(&space, &TrainSpec::default(), 8, &Quadratic, 5, 3).unwrap());
    }

    #[test]
    fn supervised_trials_use_every_fold() {
        let space = SearchSpace::default()
            .with(Param::TauA, Sampler::Uniform { lo: 0.0, hi: 0.5 })
            .with(Param::TauS, Sampler::Uniform { lo: 0.1, hi: 0.9 });
        let r = random_search(&space, &TrainSpec::default(), 4, &Quadratic, 5, 11).unwrap();
        for t in &r.trials {
            assert_eq!(t.fold_scores.len(), 5);
            let mean = t.fold_scores.iter().sum::<f64>() / 5.0;
            assert!((t.mean_score - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn integer_params_are_rounded() {
        let mut spec = TrainSpec::default();
        Param::D.apply(&mut spec, 7.6);
        Param::BatchSize.apply(&mut spec, 0.2);
        assert_eq!(spec.d, vec![8, 8]);
        assert_eq!(spec.batch_size, 1);
    }
}
