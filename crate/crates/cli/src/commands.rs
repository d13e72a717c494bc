use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anmf_core::adversarial::WeightModel;
use anmf_core::features::{istft_complex, stft, Spectrogram, StftConfig};
use anmf_core::io::{write_wav, ModelBundle};
use anmf_core::metrics::{bootstrap_median_se, cap_score, si_sdr, DEFAULT_SCORE_CAP_DB};
use anmf_core::mixing::{harmonic_tone, mix_at_snr, mix_synthetic, sample_bumps, white_noise, BumpFamily};
use anmf_core::model::{Basis, DataKind, DataMatrix};
use anmf_core::separator::{project_signal, separate, separate_signal};
use anmf_core::trainer::{train_semisupervised_state, train_smu, SupervisedData, TrainSpec, TrainingData};
use anmf_core::tuning::{random_search, Fold, TrialObjective};
use anyhow::{anyhow, bail, Context, Result};
use ndarray::{Array1, Array2, Axis};
use serde_json::json;

use crate::config::{ExperimentConfig, MethodName, MetricName};
use crate::data::{is_wav, load_data, load_samples, load_signal, save_matrix, MetricsCsv};
use crate::scoring::{capped_median, score_columns, weighted};
use crate::{Cli, Command, DenoiseMode, GlobalOpts, MetricArg, MetricOpts, MixArgs, StftOpts, SyntheticKind};

pub fn run(cli: Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.global.threads {
        if n == 0 {
            bail!("--threads must be >= 1");
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build()?;
    pool.install(|| dispatch(&cli.global, cli.command))
}

fn dispatch(g: &GlobalOpts, cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { out } => train(g, &out),
        Command::Separate { model, mix, out, references, metric } => {
            separate_cmd(g, &model, &mix, &out, &references, &metric)
        }
        Command::Denoise { model, input, out, signal, mode, reference, stft } => {
            denoise(&model, &input, &out, signal, mode, reference.as_deref(), &stft)
        }
        Command::Tune { out } => tune(g, &out),
        Command::Eval { estimates, references, out, resamples, metric } => {
            eval(g, &estimates, &references, out.as_deref(), resamples, &metric)
        }
        Command::Mix(args) => mix(g, &args),
        Command::Features { input, out, inverse, phase, length, stft } => {
            features(&input, &out, inverse, phase.as_deref(), length, &stft)
        }
    }
}

fn require_config(g: &GlobalOpts) -> Result<ExperimentConfig> {
    let path = g.config.as_ref().ok_or_else(|| anyhow!("this command needs --config PATH"))?;
    ExperimentConfig::load(path)
}

fn optional_config(g: &GlobalOpts) -> Result<Option<ExperimentConfig>> {
    g.config.as_deref().map(ExperimentConfig::load).transpose()
}

fn stft_config(o: &StftOpts, sample_rate: u32) -> Result<StftConfig> {
    let cfg = StftConfig { n_fft: o.n_fft, hop: o.hop, sample_rate, ..Default::default() };
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// training

/// Training inputs loaded from the config.
struct Inputs {
    sources: Vec<DataMatrix>,
    mixes: Option<DataMatrix>,
    supervised: Option<SupervisedData>,
    pretrained: Vec<Basis>,
}

fn load_inputs(cfg: &ExperimentConfig, clamp: bool) -> Result<Inputs> {
    let clamp = clamp || cfg.clamp_negatives;
    let d = &cfg.data;
    let sources = d
        .sources
        .iter()
        .map(|p| load_data(p, DataKind::Source, clamp))
        .collect::<Result<Vec<_>>>()?;
    let mixes = d.mixes.as_deref().map(|p| load_data(p, DataKind::Mix, clamp)).transpose()?;
    let supervised = match &d.supervised {
        Some(s) => Some(SupervisedData {
            sources: s
                .sources
                .iter()
                .map(|p| load_data(p, DataKind::Supervised, clamp))
                .collect::<Result<Vec<_>>>()?,
            mix: load_data(&s.mix, DataKind::Mix, clamp)?,
        }),
        None => None,
    };
    let pretrained = match &d.pretrained {
        Some(p) => ModelBundle::load(p).with_context(|| format!("loading {}", p.display()))?.bases,
        None => Vec::new(),
    };
    Ok(Inputs { sources, mixes, supervised, pretrained })
}

struct Fit {
    bases: Vec<Basis>,
    history: Vec<f64>,
}

fn fit(method: MethodName, spec: &TrainSpec, inputs: &Inputs, supervised: Option<SupervisedData>) -> Result<Fit> {
    if method == MethodName::Semi {
        if inputs.pretrained.is_empty() {
            bail!("method semi needs data.pretrained (a bundle with the known sources)");
        }
        let v = inputs.mixes.as_ref().ok_or_else(|| anyhow!("method semi needs data.mixes"))?;
        let st = train_semisupervised_state(v, &inputs.pretrained, spec)?;
        let mut bases = inputs.pretrained.clone();
        let mut b = st.basis;
        b.source_id = bases.len();
        bases.push(b);
        return Ok(Fit { bases, history: st.history });
    }
    let sources = if spec.tau_s < 1.0 { inputs.sources.clone() } else { Vec::new() };
    let data = TrainingData::assemble(sources, inputs.mixes.clone(), supervised, spec)?;
    let st = train_smu(&data, spec)?;
    Ok(Fit { bases: st.bases, history: st.history.iter().map(|o| o.total).collect() })
}

fn spec_for(cfg: &ExperimentConfig, g: &GlobalOpts) -> Result<TrainSpec> {
    let mut spec = cfg.effective_spec()?;
    if let Some(seed) = g.seed {
        spec.seed = seed;
    }
    if cfg.method == MethodName::Semi {
        // the known sources' dimensions come from the bundle; d holds the new one
        spec.d.truncate(1);
    }
    Ok(spec)
}

fn train(g: &GlobalOpts, out: &Path) -> Result<()> {
    let cfg = require_config(g)?;
    let spec = spec_for(&cfg, g)?;
    let inputs = load_inputs(&cfg, g.clamp_negatives)?;
    let f = fit(cfg.method, &spec, &inputs, inputs.supervised.clone())?;
    let bundle = ModelBundle::new(cfg.method.label(), spec, f.bases, f.history);
    bundle.save(out)?;
    print_json(&json!({
        "bundle": out,
        "method": bundle.method,
        "sources": bundle.bases.len(),
        "objective_history": bundle.history,
    }))
}

// ---------------------------------------------------------------------------
// separation

fn metric_settings(opts: &MetricOpts, cfg: Option<&ExperimentConfig>, sources: usize) -> (MetricName, Vec<f64>, f64) {
    let metric = match opts.metric {
        Some(MetricArg::Psnr) => MetricName::Psnr,
        Some(MetricArg::Sisdr) => MetricName::Sisdr,
        None => cfg.map_or(MetricName::Psnr, |c| c.metric),
    };
    let weights = if !opts.weights.is_empty() {
        opts.weights.clone()
    } else {
        cfg.map_or_else(|| vec![1.0 / sources as f64; sources], |c| c.weights(sources))
    };
    let peak = opts.peak.or(cfg.map(|c| c.peak)).unwrap_or(1.0);
    (metric, weights, peak)
}

fn separate_cmd(
    g: &GlobalOpts,
    model: &Path,
    mix: &Path,
    out: &Path,
    references: &[PathBuf],
    opts: &MetricOpts,
) -> Result<()> {
    let cfg = optional_config(g)?;
    let bundle = ModelBundle::load(model).with_context(|| format!("loading {}", model.display()))?;
    let clamp = g.clamp_negatives || cfg.as_ref().is_some_and(|c| c.clamp_negatives);
    let v = load_data(mix, DataKind::Mix, clamp)?;
    let sep = cfg.as_ref().map(|c| c.separation).unwrap_or_default();
    let res = separate(&v, &bundle.bases, &bundle.spec.sparsity, sep.max_iter, sep.tol)?;

    fs::create_dir_all(out)?;
    for (i, est) in res.filtered.iter().enumerate() {
        save_matrix(&out.join(format!("source_{i}.anmf")), est)?;
    }
    let mut summary = json!({
        "sources": res.filtered.len(),
        "columns": v.ncols(),
        "max_inner_iterations": res.iterations,
    });

    let refs: Vec<PathBuf> = if !references.is_empty() {
        references.to_vec()
    } else {
        cfg.as_ref()
            .and_then(|c| c.data.test.as_ref())
            .map(|t| t.references.clone())
            .unwrap_or_default()
    };
    if !refs.is_empty() {
        let s = res.filtered.len();
        let (metric, weights, peak) = metric_settings(opts, cfg.as_ref(), s);
        let reference: Vec<Array2<f64>> = refs.iter().map(|p| load_samples(p)).collect::<Result<_>>()?;
        let scores = score_columns(&res.filtered, &reference, metric, peak)?;
        let combined = weighted(&scores, &weights)?;
        let mut csv = MetricsCsv::new(fs::File::create(out.join("metrics.csv"))?)?;
        for (k, x) in combined.iter().enumerate() {
            csv.row(&k.to_string(), "weighted", metric.label(), *x)?;
        }
        csv.finish()?;
        summary["metric"] = json!(metric.label());
        summary["median"] = json!(capped_median(&combined));
    }
    print_json(&summary)
}

fn denoise(
    model: &Path,
    input: &Path,
    out: &Path,
    signal: usize,
    mode: DenoiseMode,
    reference: Option<&Path>,
    opts: &StftOpts,
) -> Result<()> {
    let bundle = ModelBundle::load(model).with_context(|| format!("loading {}", model.display()))?;
    if signal >= bundle.bases.len() {
        bail!("--signal {signal} but the bundle has {} bases", bundle.bases.len());
    }
    let (x, sr) = load_signal(input)?;
    let cfg = stft_config(opts, sr)?;
    let p = &bundle.spec.sparsity;
    let (max_iter, tol) = (anmf_core::model::DEFAULT_MAX_ITER, anmf_core::model::DEFAULT_TOL);
    let y = match mode {
        DenoiseMode::Projection => project_signal(&x, &bundle.bases[signal], &cfg, p, max_iter, tol)?,
        DenoiseMode::Separation => separate_signal(&x, &bundle.bases, &cfg, p, max_iter, tol)?.swap_remove(signal),
    };
    write_wav(out, &y, sr)?;
    let mut summary = json!({ "output": out, "samples": y.len(), "sample_rate": sr });
    if let Some(r) = reference {
        let (clean, _) = load_signal(r)?;
        if clean.len() != x.len() {
            bail!("reference has {} samples, input {}", clean.len(), x.len());
        }
        let c = Array1::from(clean);
        summary["si_sdr_input"] = json!(si_sdr(Array1::from(x).view(), c.view())?);
        summary["si_sdr_output"] = json!(si_sdr(Array1::from(y).view(), c.view())?);
    }
    print_json(&summary)
}

// ---------------------------------------------------------------------------
// tuning

struct CliObjective {
    cfg: ExperimentConfig,
    inputs: Inputs,
    test: Option<(DataMatrix, Vec<Array2<f64>>)>,
}

impl CliObjective {
    fn score(&self, bases: &[Basis], spec: &TrainSpec, v: &DataMatrix, refs: &[Array2<f64>]) -> anmf_core::Result<f64> {
        let sep = self.cfg.separation;
        let res = separate(v, bases, &spec.sparsity, sep.max_iter, sep.tol)?;
        let s = res.filtered.len();
        let scores = score_columns(&res.filtered, refs, self.cfg.metric, self.cfg.peak).map_err(core_err)?;
        let combined = weighted(&scores, &self.cfg.weights(s)).map_err(core_err)?;
        Ok(capped_median(&combined).unwrap_or(f64::NEG_INFINITY))
    }
}

fn core_err(e: anyhow::Error) -> anmf_core::Error {
    anmf_core::Error::InvalidParam(format!("{e:#}"))
}

fn select_columns(m: &DataMatrix, idx: &[usize]) -> DataMatrix {
    DataMatrix { entries: m.entries.select(Axis(1), idx), kind: m.kind }
}

impl TrialObjective for CliObjective {
    fn supervised_count(&self) -> usize {
        self.inputs.supervised.as_ref().map_or(0, |s| s.mix.ncols())
    }

    fn evaluate(&self, spec: &TrainSpec, fold: Option<&Fold>) -> anmf_core::Result<f64> {
        match fold {
            Some(f) => {
                let sup = self.inputs.supervised.as_ref().expect("folds imply supervised data");
                let part = |idx: &[usize]| SupervisedData {
                    sources: sup.sources.iter().map(|u| select_columns(u, idx)).collect(),
                    mix: select_columns(&sup.mix, idx),
                };
                let held = part(&f.validation);
                let fitted = fit(self.cfg.method, spec, &self.inputs, Some(part(&f.train))).map_err(core_err)?;
                let refs: Vec<Array2<f64>> = held.sources.iter().map(|u| u.entries.clone()).collect();
                self.score(&fitted.bases, spec, &held.mix, &refs)
            }
            None => {
                let (v, refs) = self.test.as_ref().ok_or_else(|| {
                    anmf_core::Error::InvalidParam("tuning without supervised folds needs data.test".into())
                })?;
                let fitted = fit(self.cfg.method, spec, &self.inputs, self.inputs.supervised.clone()).map_err(core_err)?;
                self.score(&fitted.bases, spec, v, refs)
            }
        }
    }
}

fn tune(g: &GlobalOpts, out: &Path) -> Result<()> {
    let cfg = require_config(g)?;
    let block = cfg.tuning.clone().ok_or_else(|| anyhow!("config has no tuning block"))?;
    let base = spec_for(&cfg, g)?;
    let clamp = g.clamp_negatives || cfg.clamp_negatives;
    let inputs = load_inputs(&cfg, g.clamp_negatives)?;
    let test = match &cfg.data.test {
        Some(t) => Some((
            load_data(&t.mix, DataKind::Mix, clamp)?,
            t.references.iter().map(|p| load_samples(p)).collect::<Result<Vec<_>>>()?,
        )),
        None => None,
    };
    let objective = CliObjective { cfg, inputs, test };
    let result = random_search(&block.space, &base, block.trials, &objective, block.folds, base.seed)?;

    fs::create_dir_all(out)?;
    fs::write(out.join("tune_result.json"), serde_json::to_string_pretty(&result)?)?;
    let best = &result.best_trial().spec;
    let fitted = fit(objective.cfg.method, best, &objective.inputs, objective.inputs.supervised.clone())?;
    let bundle = ModelBundle::new(objective.cfg.method.label(), best.clone(), fitted.bases, fitted.history);
    bundle.save(out.join("best"))?;
    print_json(&json!({
        "trials": result.trials.len(),
        "best": result.best,
        "best_score": result.best_trial().mean_score,
    }))
}

// ---------------------------------------------------------------------------
// evaluation

fn eval(
    g: &GlobalOpts,
    estimates: &[PathBuf],
    references: &[PathBuf],
    out: Option<&Path>,
    resamples: usize,
    opts: &MetricOpts,
) -> Result<()> {
    let cfg = optional_config(g)?;
    if estimates.len() != references.len() {
        bail!("{} estimate files but {} reference files", estimates.len(), references.len());
    }
    let s = estimates.len();
    let (metric, weights, peak) = metric_settings(opts, cfg.as_ref(), s);
    let est: Vec<Array2<f64>> = estimates.iter().map(|p| load_samples(p)).collect::<Result<_>>()?;
    let refs: Vec<Array2<f64>> = references.iter().map(|p| load_samples(p)).collect::<Result<_>>()?;
    let scores = score_columns(&est, &refs, metric, peak)?;
    let combined = weighted(&scores, &weights)?;

    let sink: Box<dyn std::io::Write> = match out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut csv = MetricsCsv::new(sink)?;
    let label = metric.label();
    for (k, row) in scores.iter().enumerate() {
        for (i, x) in row.iter().enumerate() {
            csv.row(&k.to_string(), &i.to_string(), label, *x)?;
        }
        csv.row(&k.to_string(), "weighted", label, combined[k])?;
    }
    let seed = g.seed.unwrap_or(0);
    let mut summarize = |source: &str, values: Vec<f64>| -> Result<()> {
        let capped: Vec<f64> = values.iter().map(|&x| cap_score(x, DEFAULT_SCORE_CAP_DB)).collect();
        if let Some(m) = capped_median(&capped) {
            csv.row("median", source, label, m)?;
        }
        if let Some(se) = bootstrap_median_se(&capped, resamples, seed) {
            csv.row("median_se", source, label, se)?;
        }
        Ok(())
    };
    for i in 0..s {
        summarize(&i.to_string(), scores.iter().map(|r| r[i]).collect())?;
    }
    summarize("weighted", combined)?;
    csv.finish()
}

// ---------------------------------------------------------------------------
// mixing and features

fn weight_model(args: &MixArgs, sources: usize) -> Result<WeightModel> {
    let wm = if !args.weights.is_empty() {
        WeightModel::Deterministic { values: args.weights.clone() }
    } else if !args.dirichlet.is_empty() {
        WeightModel::Dirichlet { concentration: args.dirichlet.clone(), mc_samples: 1000 }
    } else {
        WeightModel::equal(sources)
    };
    wm.validate()?;
    Ok(wm)
}

fn mix(g: &GlobalOpts, args: &MixArgs) -> Result<()> {
    let seed = g.seed.unwrap_or(0);
    fs::create_dir_all(&args.out)?;
    let out = &args.out;

    let audio = args.synthetic == Some(SyntheticKind::ToneNoise)
        || (args.synthetic.is_none() && args.sources.iter().any(|p| is_wav(p)));
    if audio {
        let snr = args.snr_db.ok_or_else(|| anyhow!("audio mixing needs --snr-db"))?;
        let (signal, noise, sr) = match args.synthetic {
            Some(_) => {
                let sr = 16_000;
                let s = harmonic_tone(args.samples, sr, 220.0, 6, seed);
                let z = white_noise(args.samples, 0.1, seed.wrapping_add(1));
                write_wav(out.join("source_0.wav"), &s, sr)?;
                write_wav(out.join("source_1.wav"), &z, sr)?;
                (s, z, sr)
            }
            None => {
                if args.sources.len() != 2 {
                    bail!("audio mixing needs exactly two sources (signal, noise)");
                }
                let (s, sr) = load_signal(&args.sources[0])?;
                let (z, sr2) = load_signal(&args.sources[1])?;
                if sr != sr2 {
                    bail!("sample rates differ: {sr} vs {sr2}");
                }
                (s, z, sr)
            }
        };
        let (mixed, scaled) = mix_at_snr(&signal, &noise, snr)?;
        write_wav(out.join("mix.wav"), &mixed, sr)?;
        write_wav(out.join("truth_0.wav"), &signal, sr)?;
        write_wav(out.join("truth_1.wav"), &scaled, sr)?;
        return print_json(&json!({ "mix": out.join("mix.wav"), "samples": mixed.len(), "snr_db": snr }));
    }

    let sources: Vec<DataMatrix> = match args.synthetic {
        Some(SyntheticKind::Bumps) => {
            let s = [BumpFamily::NARROW_LEFT, BumpFamily::WIDE_RIGHT]
                .iter()
                .enumerate()
                .map(|(i, fam)| sample_bumps(args.features, fam, args.columns, 1, seed.wrapping_add(i as u64)))
                .collect::<anmf_core::Result<Vec<_>>>()?;
            for (i, u) in s.iter().enumerate() {
                save_matrix(&out.join(format!("source_{i}.anmf")), &u.entries)?;
            }
            s
        }
        _ => {
            if args.sources.is_empty() {
                bail!("mix needs --sources or --synthetic");
            }
            args.sources
                .iter()
                .map(|p| load_data(p, DataKind::Source, g.clamp_negatives))
                .collect::<Result<_>>()?
        }
    };
    let wm = weight_model(args, sources.len())?;
    let m = mix_synthetic(&sources, &wm, args.snr_db, seed)?;
    save_matrix(&out.join("mix.anmf"), &m.mix.entries)?;
    for (i, t) in m.ground_truth.iter().enumerate() {
        save_matrix(&out.join(format!("truth_{i}.anmf")), &t.entries)?;
    }
    let weights: Vec<Vec<f64>> = m.weights.rows().into_iter().map(|r| r.to_vec()).collect();
    fs::write(out.join("weights.json"), serde_json::to_string(&weights)?)?;
    print_json(&json!({
        "mix": out.join("mix.anmf"),
        "sources": sources.len(),
        "columns": m.mix.ncols(),
    }))
}

fn features(
    input: &Path,
    out: &Path,
    inverse: bool,
    phase: Option<&Path>,
    length: Option<usize>,
    opts: &StftOpts,
) -> Result<()> {
    if !inverse {
        let (x, sr) = load_signal(input)?;
        let cfg = stft_config(opts, sr)?;
        let spec = stft(&x, &cfg)?;
        save_matrix(out, &spec.magnitude)?;
        if let Some(p) = phase {
            save_matrix(p, &spec.phase)?;
        }
        return print_json(&json!({
            "bins": spec.magnitude.nrows(),
            "frames": spec.magnitude.ncols(),
            "samples": x.len(),
            "sample_rate": sr,
        }));
    }
    let phase = phase.ok_or_else(|| anyhow!("--inverse needs --phase"))?;
    let cfg = stft_config(opts, opts.sample_rate)?;
    let magnitude = anmf_core::io::read_matrix(input)?;
    let phase = anmf_core::io::read_matrix(phase)?;
    if magnitude.dim() != phase.dim() {
        bail!("magnitude {:?} and phase {:?} differ in shape", magnitude.dim(), phase.dim());
    }
    if magnitude.nrows() != cfg.bins() {
        bail!("{} rows but n_fft {} has {} bins", magnitude.nrows(), cfg.n_fft, cfg.bins());
    }
    let len = length.unwrap_or(magnitude.ncols().saturating_sub(1) * cfg.hop);
    let spec = Spectrogram { magnitude, phase, config: cfg, length: len };
    let y = istft_complex(&spec.complex(), &cfg, len)?;
    write_wav(out, &y, cfg.sample_rate)?;
    print_json(&json!({ "samples": y.len(), "sample_rate": cfg.sample_rate }))
}
