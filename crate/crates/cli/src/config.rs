//! Experiment configuration files.

use std::path::{Path, PathBuf};

use anmf_core::trainer::{InitMode, TrainSpec};
use anmf_core::tuning::{SearchSpace, DEFAULT_FOLDS};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Nmf,
    Enmf,
    Anmf,
    Dnmf,
    Danmf,
    Semi,
}

impl MethodName {
    pub fn label(self) -> &'static str {
        match self {
            MethodName::Nmf => "nmf",
            MethodName::Enmf => "enmf",
            MethodName::Anmf => "anmf",
            MethodName::Dnmf => "dnmf",
            MethodName::Danmf => "danmf",
            MethodName::Semi => "semi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    #[default]
    Psnr,
    Sisdr,
}

impl MetricName {
    pub fn label(self) -> &'static str {
        match self {
            MetricName::Psnr => "psnr",
            MetricName::Sisdr => "sisdr",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisedPaths {
    pub sources: Vec<PathBuf>,
    pub mix: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestPaths {
    pub mix: PathBuf,
    pub references: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Weak per-source training data, one file per source.
    pub sources: Vec<PathBuf>,
    /// Unlabelled training mixes.
    pub mixes: Option<PathBuf>,
    pub supervised: Option<SupervisedPaths>,
    /// Bundle with the known sources' bases (`semi`).
    pub pretrained: Option<PathBuf>,
    /// Held-out mixes and references used for scoring.
    pub test: Option<TestPaths>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparationSettings {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SeparationSettings {
    fn default() -> Self {
        SeparationSettings {
            max_iter: anmf_core::model::DEFAULT_MAX_ITER,
            tol: anmf_core::model::DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningBlock {
    pub space: SearchSpace,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
}

fn default_trials() -> usize {
    15
}

fn default_folds() -> usize {
    DEFAULT_FOLDS
}

fn default_peak() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: MethodName,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub metric: MetricName,
    /// Per-source metric weights; empty means equal weights.
    #[serde(default)]
    pub metric_weights: Vec<f64>,
    #[serde(default = "default_peak")]
    pub peak: f64,
    #[serde(default)]
    pub clamp_negatives: bool,
    #[serde(default)]
    pub separation: SeparationSettings,
    #[serde(default)]
    pub tuning: Option<TuningBlock>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative data paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        d.sources.iter_mut().for_each(fix);
        d.mixes.iter_mut().for_each(fix);
        d.pretrained.iter_mut().for_each(fix);
        if let Some(s) = d.supervised.as_mut() {
            s.sources.iter_mut().for_each(fix);
            fix(&mut s.mix);
        }
        if let Some(t) = d.test.as_mut() {
            t.references.iter_mut().for_each(fix);
            fix(&mut t.mix);
        }
    }

    /// The training spec with method-implied settings applied, checked
    /// against the method.
    pub fn effective_spec(&self) -> Result<TrainSpec> {
        let mut spec = self.train.clone();
        let (ta, ts) = (spec.tau_a, spec.tau_s);
        match self.method {
            MethodName::Nmf | MethodName::Semi => {
                if ta != 0.0 || ts != 0.0 {
                    bail!("method {} needs tau_a = tau_s = 0 (got {ta}, {ts})", self.method.label());
                }
            }
            MethodName::Enmf => {
                if ta != 0.0 || ts != 0.0 {
                    bail!("method enmf needs tau_a = tau_s = 0 (got {ta}, {ts})");
                }
                spec.epochs = 0;
                spec.init = InitMode::Exemplar;
            }
            MethodName::Anmf => {
                if ta <= 0.0 || ts != 0.0 {
                    bail!("method anmf needs tau_a > 0 and tau_s = 0 (got {ta}, {ts})");
                }
            }
            MethodName::Dnmf => {
                if ta != 0.0 || ts != 1.0 {
                    bail!("method dnmf needs tau_a = 0 and tau_s = 1 (got {ta}, {ts})");
                }
            }
            MethodName::Danmf => {}
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn weights(&self, sources: usize) -> Vec<f64> {
        if self.metric_weights.is_empty() {
            vec![1.0 / sources as f64; sources]
        } else {
            self.metric_weights.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(json: &str) -> ExperimentConfig {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse(r#"{"method": "nmf", "data": {"sources": ["a.anmf", "b.anmf"]}}"#);
        assert_eq!(c.metric, MetricName::Psnr);
        assert_eq!(c.peak, 1.0);
        assert_eq!(c.effective_spec().unwrap().epochs, 200);
    }

    #[test]
    fn method_consistency() {
        assert!(parse(r#"{"method": "nmf", "train": {"tau_a": 0.1}}"#).effective_spec().is_err());
        assert!(parse(r#"{"method": "anmf", "train": {"tau_a": 0.1}}"#).effective_spec().is_ok());
        assert!(parse(r#"{"method": "anmf"}"#).effective_spec().is_err());
        assert!(parse(r#"{"method": "dnmf", "train": {"tau_s": 0.5}}"#).effective_spec().is_err());
        assert!(parse(r#"{"method": "danmf", "train": {"tau_a": 0.3, "tau_s": 0.5}}"#).effective_spec().is_ok());
        let e = parse(r#"{"method": "enmf", "train": {"epochs": 40}}"#).effective_spec().unwrap();
        assert_eq!(e.epochs, 0);
    }

    #[test]
    fn tuning_block_parses() {
        let c = parse(
            r#"{"method": "anmf", "train": {"tau_a": 0.1},
                "tuning": {"space": {"tau_a": {"kind": "log_uniform", "lo": 0.01, "hi": 1.0},
                                     "d": {"kind": "choice", "values": [8, 16]}}}}"#,
        );
        let t = c.tuning.unwrap();
        assert_eq!(t.trials, 15);
        assert_eq!(t.folds, 5);
        assert_eq!(t.space.params.len(), 2);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"method": "nmf", "bogus": 1}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"method": "xnmf"}"#).is_err());
    }
}
