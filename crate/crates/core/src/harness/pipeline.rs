//! One function per CLI subcommand. Each takes a parsed config and an
//! optional output directory; with `None` nothing is written.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExperimentKind, Method, Resolved, Sampler, Source};
use super::record::RunRecord;
use crate::closed_form::{self, MomentSource, Provenance};
use crate::cmnist::{self, CMnistSeeds, CMnistSpec};
use crate::data::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::rng;
use crate::sensitivity::{self, Prop1Report, SensitivityProfile};
use crate::synth::SynthSpec;
use crate::tensorio::{self, CorpusManifest, Dtype};
use crate::train::{self, EvalSplit, ObjectiveTerms, TrainOutcome};

/// Default MNIST location when neither the config nor `MNIST_DIR` names one.
pub const DEFAULT_MNIST_DIR: &str = "data/mnist";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Write the frozen config into `dir` and return its hash.
fn freeze(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<String> {
    let text = cfg.to_toml()?;
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), &text)?;
    }
    Ok(tensorio::sha256_hex(text.as_bytes()))
}

/// Named datasets of an experiment: `train` plus the evaluation splits.
pub struct Splits {
    pub train: LabeledDataset,
    /// Evaluation splits in reporting order.
    pub evals: Vec<(String, LabeledDataset)>,
}

impl Splits {
    pub fn eval_splits(&self) -> Vec<EvalSplit<'_>> {
        self.evals.iter().map(|(name, data)| EvalSplit { name, data }).collect()
    }

    pub fn get(&self, name: &str) -> Option<&LabeledDataset> {
        if name == "train" {
            return Some(&self.train);
        }
        self.evals.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }
}

/// Prefix I/O errors with the path that was being read.
fn at_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

pub fn mnist_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.cmnist
        .mnist_dir
        .clone()
        .or_else(|| std::env::var_os("MNIST_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_MNIST_DIR))
}

pub fn cmnist_spec(cfg: &ExperimentConfig) -> CMnistSpec {
    let c = &cfg.cmnist;
    let mut spec = CMnistSpec::random(CMnistSeeds::from_seed(cfg.seed), c.test_pool.unwrap_or_default());
    spec.threshold = c.threshold.unwrap_or(spec.threshold);
    spec.noise_std = c.noise_std.unwrap_or(spec.noise_std);
    spec.split = c.split.unwrap_or(spec.split);
    spec
}

/// Generate a corpus from raw MNIST. The extra `mnist` split is the plain
/// test digits replicated to three channels.
pub fn build_corpus(cfg: &ExperimentConfig) -> Result<(cmnist::CMnistCorpus, LabeledDataset)> {
    let dir = mnist_dir(cfg);
    let (train_raw, test_raw) = at_path(&dir, cmnist::load_mnist_dir(&dir))?;
    let train_raw = train_raw.take(cfg.cmnist.train_images.unwrap_or(usize::MAX));
    let test_raw = test_raw.take(cfg.cmnist.test_images.unwrap_or(usize::MAX));
    let spec = cmnist_spec(cfg);
    spec.validate()?;
    let corpus = cmnist::generate_corpus(&train_raw, &test_raw, &spec)?;
    let ood = cmnist::mnist_as_ood(&test_raw)?;
    Ok((corpus, ood))
}

pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    if cfg.kind.is_image() {
        let mut named = match &cfg.cmnist.corpus {
            Some(dir) => at_path(dir, tensorio::load_corpus(dir))?.1,
            None => {
                let (corpus, ood) = build_corpus(cfg)?;
                BTreeMap::from([
                    ("train".to_string(), corpus.train),
                    ("val".to_string(), corpus.val),
                    ("test".to_string(), corpus.test),
                    ("mnist".to_string(), ood),
                ])
            }
        };
        let train = named.remove("train").ok_or_else(|| invalid("load_splits", "corpus has no train split"))?;
        let mut evals = Vec::new();
        for name in ["val", "test", "mnist"] {
            if let Some(d) = named.remove(name) {
                evals.push((name.to_string(), d));
            }
        }
        evals.extend(named);
        Ok(Splits { train, evals })
    } else if cfg.kind.is_synthetic() {
        let r = cfg.resolve_synth_sizes();
        let spec = cfg.synth_spec()?;
        let train = spec.sample(r.0, cfg.data_seed())?;
        let test = spec.sample(r.1, rng::derive(cfg.data_seed(), "test"))?;
        Ok(Splits {
            train,
            evals: vec![("test".to_string(), test)],
        })
    } else {
        Err(Error::Config(format!("{:?} experiments have no datasets", cfg.kind)))
    }
}

impl ExperimentConfig {
    fn resolve_synth_sizes(&self) -> (usize, usize) {
        (self.synth.n.unwrap_or(15000), self.synth.n_test.unwrap_or(5000))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub spec: SynthSpec,
    pub data_seed: u64,
    pub splits: BTreeMap<String, usize>,
    pub sha256: BTreeMap<String, String>,
}

/// Sample the train and test sets of a synthetic config and write them as
/// f64 tensors with a manifest.
pub fn gen_synth(cfg: &ExperimentConfig, out: &Path) -> Result<SynthManifest> {
    if !cfg.kind.is_synthetic() {
        return Err(Error::Config("gen-synth needs kind synth_a, synth_b or closed_form".into()));
    }
    freeze(cfg, Some(out))?;
    let splits = load_splits(cfg)?;
    let mut manifest = SynthManifest {
        spec: cfg.synth_spec()?,
        data_seed: cfg.data_seed(),
        splits: BTreeMap::new(),
        sha256: BTreeMap::new(),
    };
    let all = std::iter::once(("train", &splits.train)).chain(splits.evals.iter().map(|(n, d)| (n.as_str(), d)));
    for (name, data) in all {
        let x = format!("{name}_x.bin");
        let y = format!("{name}_y.bin");
        manifest.sha256.insert(x.clone(), tensorio::write_tensor(&out.join(&x), &data.x, Dtype::F64)?);
        let labels = crate::tensor::Tensor::from_vec(data.y.clone());
        manifest.sha256.insert(y.clone(), tensorio::write_tensor(&out.join(&y), &labels, Dtype::F64)?);
        manifest.splits.insert(name.to_string(), data.len());
    }
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutput {
    pub provenance: Provenance,
    pub beta: f64,
    pub lambda: f64,
    pub residual_inf: f64,
    pub p: Vec<f64>,
    pub theta: Vec<f64>,
}

/// Closed-form minimizer of the regularized squared error for the linear model.
pub fn solve(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<SolveOutput> {
    if !cfg.kind.is_synthetic() {
        return Err(Error::Config("solve needs kind synth_a, synth_b or closed_form".into()));
    }
    freeze(cfg, out)?;
    let spec = cfg.synth_spec()?;
    let (beta, lambda) = (cfg.beta(), cfg.lambda());
    let source = cfg.solve.source.unwrap_or(Source::Analytic);
    let data = match source {
        Source::Empirical | Source::EmpiricalAnalyticPenalty => Some(spec.sample(cfg.resolve_synth_sizes().0, cfg.data_seed())?),
        _ => None,
    };
    let moments = match (source, &data) {
        (Source::Analytic, _) => MomentSource::Analytic,
        (Source::AnalyticSigned, _) => MomentSource::AnalyticSigned,
        (Source::Empirical, Some(d)) => MomentSource::Empirical(d),
        (Source::EmpiricalAnalyticPenalty, Some(d)) => MomentSource::EmpiricalAnalyticPenalty(d),
        _ => unreachable!("empirical sources always sample"),
    };
    let system = closed_form::build_system(&spec, beta, lambda, moments)?;
    let theta = system.solve()?;
    let result = SolveOutput {
        provenance: system.provenance,
        beta,
        lambda,
        residual_inf: system.residual_inf(&theta)?,
        p: spec.p().to_vec(),
        theta,
    };
    if let Some(dir) = out {
        write_json(&dir.join("theta.json"), &result)?;
    }
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub record: RunRecord,
    pub resolved: Resolved,
    pub outcome: TrainOutcome,
}

impl TrainRun {
    /// Final model, or the early-stopped one when a split was designated.
    pub fn selected_model(&self) -> Model {
        match self.resolved.train.early_stop_split.as_deref().and_then(|s| self.outcome.selected(s)) {
            Some(ckpt) => self.outcome.model_at(ckpt),
            None => self.outcome.model.clone(),
        }
    }

    pub fn trace(&self) -> &[ObjectiveTerms] {
        &self.outcome.trace
    }
}

#[derive(Serialize)]
struct Timing {
    wall_clock_secs: f64,
    iterations: usize,
}

/// Train one configuration on its datasets.
pub fn train_on(cfg: &ExperimentConfig, splits: &Splits, out: Option<&Path>) -> Result<TrainRun> {
    let resolved = cfg.resolve()?;
    let hash = freeze(cfg, out)?;
    let start = Instant::now();
    let outcome = train::train(
        &resolved.model,
        &resolved.objective,
        &resolved.baseline,
        &splits.train,
        &resolved.train,
        &splits.eval_splits(),
    )?;
    let early = resolved.train.early_stop_split.as_deref();
    let mut record = RunRecord::new(cfg.method.name(), hash, outcome.history.clone(), early)?;
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    record.check_consistency()?;
    let run = TrainRun {
        record,
        resolved,
        outcome,
    };
    if let Some(dir) = out {
        write_run(cfg, &run, dir)?;
    }
    Ok(run)
}

fn write_run(cfg: &ExperimentConfig, run: &TrainRun, dir: &Path) -> Result<()> {
    fs::write(dir.join("metrics.csv"), run.record.metrics_csv())?;
    write_json(&dir.join("summary.json"), &run.record)?;
    write_json(&dir.join("resolved.json"), &run.resolved)?;
    write_json(
        &dir.join("timing.json"),
        &Timing {
            wall_clock_secs: run.record.wall_clock_secs,
            iterations: run.outcome.trace.len(),
        },
    )?;
    let meta = serde_json::to_value(&run.resolved)?;
    let last = run.outcome.history.last();
    tensorio::save_checkpoint(
        &dir.join("checkpoint"),
        &run.outcome.model,
        cfg.seed,
        last.map_or(0, |r| r.epoch),
        last.map_or(0, |r| r.iteration),
        meta.clone(),
    )?;
    if let Some(split) = run.resolved.train.early_stop_split.as_deref() {
        if let Some(ckpt) = run.outcome.selected(split) {
            let model = run.outcome.model_at(ckpt);
            tensorio::save_checkpoint(&dir.join("checkpoint_selected"), &model, cfg.seed, ckpt.epoch, ckpt.iteration, meta)?;
        }
    }
    Ok(())
}

pub fn run_train(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<TrainRun> {
    let splits = load_splits(cfg)?;
    train_on(cfg, &splits, out)
}

#[derive(Debug, Clone)]
pub struct SensitivityOutput {
    pub profile: SensitivityProfile,
    /// Absent for closed-form profiles.
    pub run: Option<TrainRun>,
}

/// Sensitivity profile of a trained scalar model, or `|θ*|` for `closed_form`.
pub fn run_sensitivity(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<SensitivityOutput> {
    let result = if cfg.kind == ExperimentKind::ClosedForm {
        let solved = solve(cfg, out)?;
        let s = sensitivity::sensitivity_linear(&solved.theta);
        SensitivityOutput {
            profile: SensitivityProfile::new(solved.beta, solved.p, s)?,
            run: None,
        }
    } else if cfg.kind.is_synthetic() {
        let splits = load_splits(cfg)?;
        let run = train_on(cfg, &splits, out)?;
        let s = sensitivity::sensitivity_model(&run.outcome.model, &splits.train)?;
        let p = cfg.synth_spec()?.p().to_vec();
        SensitivityOutput {
            profile: SensitivityProfile::new(cfg.beta(), p, s)?,
            run: Some(run),
        }
    } else {
        return Err(Error::Config("sensitivity needs a synthetic or closed_form experiment".into()));
    };
    if let Some(dir) = out {
        fs::write(dir.join("profile.json"), result.profile.to_json()? + "\n")?;
        fs::write(dir.join("profile.csv"), result.profile.to_csv())?;
    }
    Ok(result)
}

/// Generate a C-MNIST corpus, including the plain `mnist` split, into `out`.
pub fn gen_cmnist(cfg: &ExperimentConfig, out: &Path) -> Result<CorpusManifest> {
    freeze(cfg, Some(out))?;
    let (corpus, ood) = build_corpus(cfg)?;
    tensorio::save_corpus(out, &corpus, &[("mnist", &ood)])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub epoch: usize,
    pub iteration: usize,
    pub splits: BTreeMap<String, SplitScore>,
}

/// Evaluate `eval.checkpoint` on every split of the configured data.
pub fn run_eval(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<EvalReport> {
    let ckpt = cfg.eval.checkpoint.as_ref().ok_or_else(|| Error::Config("eval needs eval.checkpoint".into()))?;
    freeze(cfg, out)?;
    let (manifest, model) = at_path(ckpt, tensorio::load_checkpoint(ckpt))?;
    let loss = cfg.resolve()?.objective.loss;
    let splits = load_splits(cfg)?;
    let mut report = EvalReport {
        epoch: manifest.epoch,
        iteration: manifest.iteration,
        splits: BTreeMap::new(),
    };
    let all = std::iter::once(("train", &splits.train)).chain(splits.evals.iter().map(|(n, d)| (n.as_str(), d)));
    for (name, data) in all {
        let (l, acc) = train::evaluate(&model, data, loss)?;
        report.splits.insert(name.to_string(), SplitScore { loss: l, accuracy: acc });
    }
    if let Some(dir) = out {
        write_json(&dir.join("eval.json"), &report)?;
    }
    Ok(report)
}

/// Variance against half the mean squared pair difference for the configured sampler.
pub fn run_prop1(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Prop1Report> {
    let sampler = cfg.prop1.sampler.clone().unwrap_or(Sampler::Gaussian { mean: 0.0, std: 1.0 });
    let n = cfg.prop1.n.unwrap_or(1_000_000);
    freeze(cfg, out)?;
    let report = match sampler {
        Sampler::Gaussian { mean, std } => {
            if !(std >= 0.0) {
                return Err(Error::Config(format!("sampler std {std} must be >= 0")));
            }
            sensitivity::prop1_check(|r| {
                let z: f64 = StandardNormal.sample(r);
                mean + std * z
            }, n, cfg.seed)?
        }
        Sampler::Constant { value } => sensitivity::prop1_check(|_| value, n, cfg.seed)?,
        Sampler::Logits { checkpoint, split, column } => {
            let (_, model) = at_path(&checkpoint, tensorio::load_checkpoint(&checkpoint))?;
            let splits = load_splits(cfg)?;
            let data = splits.get(&split).ok_or_else(|| Error::Config(format!("no split `{split}`")))?;
            let mut xs = sensitivity::output_column(&model, data, column)?;
            xs.truncate(xs.len().min(n) & !1);
            sensitivity::prop1_from_samples(&xs, cfg.seed)?
        }
    };
    if let Some(dir) = out {
        write_json(&dir.join("prop1.json"), &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config_id: String,
    pub method: String,
    pub best_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rank_split: String,
    /// Descending by best accuracy; failed runs last.
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config_id,method,best_accuracy,status\n");
        for r in &self.rows {
            let (acc, status) = match r.best_accuracy {
                Some(a) => (format!("{a:.6}"), "ok"),
                None => (String::new(), "failed"),
            };
            s.push_str(&format!("{},{},{acc},{status}\n", r.config_id, r.method));
        }
        s
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v}").replace('.', "p")
}

/// Expand `[sweep]` into named configs: every `beta × lr` correlation run,
/// then every extra method at every `lr`. An empty grid yields the base config.
pub fn expand_grid(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let s = &base.sweep;
    let lrs: Vec<Option<f64>> = if s.lr.is_empty() { vec![None] } else { s.lr.iter().copied().map(Some).collect() };
    let with_lr = |mut c: ExperimentConfig, lr: Option<f64>, id: String| {
        if lr.is_some() {
            c.train.lr = lr;
        }
        let id = match lr {
            Some(lr) => format!("{id}_lr{}", fmt_num(lr)),
            None => id,
        };
        (id, c)
    };
    let mut out = Vec::new();
    for &beta in &s.beta {
        for &lr in &lrs {
            let mut c = base.clone();
            c.method = Method::Correlation;
            c.objective.beta = Some(beta);
            out.push(with_lr(c, lr, format!("correlation_b{}", fmt_num(beta))));
        }
    }
    for &m in &s.methods {
        for &lr in &lrs {
            let mut c = base.clone();
            c.method = m;
            out.push(with_lr(c, lr, m.name().to_string()));
        }
    }
    if out.is_empty() {
        out.push((base.method.name().to_string(), base.clone()));
    }
    out
}

/// Run named configs on up to `jobs` worker threads. Each run writes to
/// `out/<config_id>` and the table to `out/sweep.csv`.
pub fn sweep(configs: &[(String, ExperimentConfig)], rank_split: &str, jobs: usize, out: Option<&Path>) -> Result<SweepTable> {
    if configs.is_empty() {
        return Err(Error::Config("sweep needs at least one config".into()));
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; configs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, configs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((id, cfg)) = configs.get(i) else { break };
                let dir = out.map(|o| o.join(id));
                let row = match run_train(cfg, dir.as_deref()) {
                    Ok(run) => match run.record.best_accuracy(rank_split) {
                        Some(a) => SweepRow {
                            config_id: id.clone(),
                            method: cfg.method.name().into(),
                            best_accuracy: Some(a),
                            error: None,
                        },
                        None => SweepRow {
                            config_id: id.clone(),
                            method: cfg.method.name().into(),
                            best_accuracy: None,
                            error: Some(format!("split `{rank_split}` was never evaluated")),
                        },
                    },
                    Err(e) => SweepRow {
                        config_id: id.clone(),
                        method: cfg.method.name().into(),
                        best_accuracy: None,
                        error: Some(e.to_string()),
                    },
                };
                results.lock().expect("sweep results lock")[i] = Some(row);
            });
        }
    });
    let mut rows: Vec<SweepRow> = results.into_inner().expect("sweep results lock").into_iter().flatten().collect();
    rows.sort_by(|a, b| {
        let key = |r: &SweepRow| r.best_accuracy.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a)).then_with(|| a.config_id.cmp(&b.config_id))
    });
    let table = SweepTable {
        rank_split: rank_split.to_string(),
        rows,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("sweep.csv"), table.to_csv())?;
    }
    Ok(table)
}
