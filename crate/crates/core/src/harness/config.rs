//! Experiment configuration: a TOML tree with a strict schema.
//!
//! Every section is optional. Unset fields resolve to per-experiment
//! defaults in [`ExperimentConfig::resolve`].

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::cmnist::TestPool;
use crate::error::{Error, Result};
use crate::model::{ActivationPoint, ModelKind, ModelSpec};
use crate::optim::AdamConfig;
use crate::regularizers::BaselineRegSpec;
use crate::rng;
use crate::synth::{self, SynthSpec, SynthSpecA, SynthSpecB};
use crate::train::{Attach, LossKind, RegularizedObjectiveConfig, Schedule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SynthA,
    SynthB,
    CmnistShift,
    OodEval,
    Prop1,
    ClosedForm,
}

impl ExperimentKind {
    pub fn is_synthetic(self) -> bool {
        matches!(self, ExperimentKind::SynthA | ExperimentKind::SynthB | ExperimentKind::ClosedForm)
    }

    pub fn is_image(self) -> bool {
        matches!(self, ExperimentKind::CmnistShift | ExperimentKind::OodEval)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Correlation,
    Vanilla,
    Clp,
    GaussianNoise,
    Pgd,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Correlation => "correlation",
            Method::Vanilla => "vanilla",
            Method::Clp => "clp",
            Method::GaussianNoise => "gaussian_noise",
            Method::Pgd => "pgd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    A,
    B,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    /// Defaults to A, or B for `synth_b`.
    pub family: Option<Family>,
    pub d: Option<usize>,
    pub n: Option<usize>,
    /// Size of the held-out sample evaluated as `test`.
    pub n_test: Option<usize>,
    pub sigma2: Option<f64>,
    pub k: Option<f64>,
    /// Explicit `p`; drawn `U[0, 1]` from `p_seed` when absent.
    pub p: Option<Vec<f64>>,
    pub p_seed: Option<u64>,
    pub data_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    pub beta: Option<f64>,
    pub lambda: Option<f64>,
    pub loss: Option<LossKind>,
    pub attach: Option<Attach>,
    pub hidden_point: Option<ActivationPoint>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub b1: Option<f64>,
    pub b2: Option<f64>,
    pub eps: Option<f64>,
    pub schedule: Option<Schedule>,
    pub eval_every: Option<usize>,
    pub eval_train: Option<bool>,
    pub early_stop_split: Option<String>,
    pub keep_checkpoints: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CMnistSection {
    /// Directory with the four MNIST IDX files.
    pub mnist_dir: Option<PathBuf>,
    /// A corpus written by `gen-cmnist`; generated in memory when absent.
    pub corpus: Option<PathBuf>,
    /// Use only the first `train_images` training digits.
    pub train_images: Option<usize>,
    pub test_images: Option<usize>,
    pub test_pool: Option<TestPool>,
    pub threshold: Option<u8>,
    pub noise_std: Option<f64>,
    pub split: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Analytic,
    AnalyticSigned,
    Empirical,
    EmpiricalAnalyticPenalty,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSection {
    pub source: Option<Source>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sampler {
    Gaussian { mean: f64, std: f64 },
    Constant { value: f64 },
    /// Column of a checkpoint's outputs over a corpus split.
    Logits { checkpoint: PathBuf, split: String, column: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prop1Section {
    pub sampler: Option<Sampler>,
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Correlation coefficients to try.
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub lr: Vec<f64>,
    /// Additional methods run once per learning rate with the base settings.
    #[serde(default)]
    pub methods: Vec<Method>,
    /// Split whose best accuracy ranks the table; defaults to `test`.
    pub rank_split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub synth: SynthSection,
    pub model: Option<ModelKind>,
    #[serde(default)]
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub baseline: BaselineRegSpec,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub cmnist: CMnistSection,
    #[serde(default)]
    pub solve: SolveSection,
    #[serde(default)]
    pub prop1: Prop1Section,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parse a config and apply `key=value` overrides (dotted keys; values in
/// TOML syntax, bare words taken as strings).
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
    for item in overrides {
        apply_override(&mut table, item)?;
    }
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))
}

/// As [`parse_config`], inserting `kind = default_kind` when neither the
/// text nor the overrides set one.
pub fn parse_config_or(text: &str, overrides: &[String], default_kind: ExperimentKind) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
    for item in overrides {
        apply_override(&mut table, item)?;
    }
    if !table.contains_key("kind") {
        let kind = toml::Value::try_from(default_kind).map_err(|e| config_err(e.to_string()))?;
        table.insert("kind".into(), kind);
    }
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))
}

pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item.split_once('=').ok_or_else(|| config_err(format!("override `{item}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = raw.parse::<toml::Value>().unwrap_or_else(|_| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| config_err(format!("empty key in `{item}`")))?;
    let mut cur = table;
    for part in parts {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| config_err(format!("`{part}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Baseline used when a baseline method has no `[baseline]` section.
/// PGD radii are in units of 1/255.
pub fn default_baseline(method: Method) -> BaselineRegSpec {
    match method {
        Method::Clp => BaselineRegSpec::Clp { coef: 1.0 },
        Method::GaussianNoise => BaselineRegSpec::GaussianNoise { std: 0.1 },
        Method::Pgd => BaselineRegSpec::Pgd {
            epsilon: 8.0,
            step_size: 2.0,
            num_steps: 3,
        },
        Method::Correlation | Method::Vanilla => BaselineRegSpec::None,
    }
}

/// Fully resolved settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub synth: Option<SynthSpec>,
    pub n: usize,
    pub n_test: usize,
    pub data_seed: u64,
    pub model: ModelSpec,
    pub objective: RegularizedObjectiveConfig,
    pub baseline: BaselineRegSpec,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        parse_config(text, &[])
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    pub fn family(&self) -> Family {
        self.synth.family.unwrap_or(match self.kind {
            ExperimentKind::SynthB => Family::B,
            _ => Family::A,
        })
    }

    /// The generating spec of a synthetic experiment.
    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let s = &self.synth;
        let d = s.d.unwrap_or(500);
        let p = match &s.p {
            Some(p) => p.clone(),
            None => synth::uniform_p(d, s.p_seed.unwrap_or_else(|| rng::derive(self.seed, "p"))),
        };
        Ok(match self.family() {
            Family::A => SynthSpec::A(SynthSpecA::new(p, s.sigma2.unwrap_or(1e-4))?),
            Family::B => SynthSpec::B(SynthSpecB::new(p, s.sigma2.unwrap_or(1e-3), s.k.unwrap_or(10.0))?),
        })
    }

    pub fn data_seed(&self) -> u64 {
        self.synth.data_seed.unwrap_or_else(|| rng::derive(self.seed, "data"))
    }

    /// Correlation coefficient; zero for every method but `correlation`.
    pub fn beta(&self) -> f64 {
        match self.method {
            Method::Correlation => self.objective.beta.unwrap_or(1.0),
            _ => 0.0,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.objective.lambda.unwrap_or(if self.kind.is_image() { 1e-4 } else { 1e-5 })
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let image = self.kind.is_image();
        if !image && !self.kind.is_synthetic() {
            return Err(config_err(format!("{:?} experiments do not train a model", self.kind)));
        }
        let synth = if image { None } else { Some(self.synth_spec()?) };
        let kind = self.model.clone().unwrap_or(if image { ModelKind::small_conv() } else { ModelKind::mlp() });
        let o = &self.objective;
        let (input_shape, outputs, classes) = match &synth {
            Some(s) => (vec![s.d()], 1, 2),
            None => (vec![3, crate::cmnist::SIDE, crate::cmnist::SIDE], crate::cmnist::NUM_CLASSES, crate::cmnist::NUM_CLASSES),
        };
        let model = ModelSpec {
            kind: kind.clone(),
            input_shape,
            outputs,
            hidden_point: o.hidden_point.unwrap_or_default(),
        };
        let default_attach = if kind == ModelKind::Linear { Attach::Output } else { Attach::FirstHidden };
        let objective = RegularizedObjectiveConfig {
            beta: self.beta(),
            lambda: self.lambda(),
            loss: o.loss.unwrap_or(if image { LossKind::CrossEntropy } else { LossKind::SquaredError }),
            attach: o.attach.unwrap_or(default_attach),
            num_classes: classes,
        };
        let baseline = match (self.method, self.baseline) {
            (Method::Correlation | Method::Vanilla, _) => BaselineRegSpec::None,
            (m, BaselineRegSpec::None) => default_baseline(m),
            (Method::Clp, b @ BaselineRegSpec::Clp { .. })
            | (Method::GaussianNoise, b @ BaselineRegSpec::GaussianNoise { .. })
            | (Method::Pgd, b @ BaselineRegSpec::Pgd { .. }) => b,
            (m, b) => return Err(config_err(format!("method {} needs a matching [baseline] section, found {b:?}", m.name()))),
        };
        let t = &self.train;
        let (iterations, epochs) = match (t.iterations, t.epochs) {
            (Some(_), Some(_)) => return Err(config_err("set only one of train.iterations and train.epochs")),
            (None, None) if image => (None, Some(10)),
            (None, None) => (Some(1000), None),
            other => other,
        };
        let defaults = AdamConfig::default();
        let ood = self.kind == ExperimentKind::OodEval;
        let train = TrainConfig {
            iterations,
            epochs,
            batch_size: t.batch_size.unwrap_or(128),
            adam: AdamConfig {
                lr: t.lr.unwrap_or(defaults.lr),
                b1: t.b1.unwrap_or(defaults.b1),
                b2: t.b2.unwrap_or(defaults.b2),
                eps: t.eps.unwrap_or(defaults.eps),
            },
            schedule: t.schedule.unwrap_or_default(),
            seed: self.seed,
            eval_every: t.eval_every.or(if image { None } else { Some(100) }),
            eval_train: t.eval_train.unwrap_or(!image),
            early_stop_split: t.early_stop_split.clone().or_else(|| ood.then(|| "test".to_string())),
            keep_checkpoints: t.keep_checkpoints.unwrap_or(ood),
        };
        objective.validate(&model)?;
        baseline.validate()?;
        train.validate(&objective)?;
        Ok(Resolved {
            n: self.synth.n.unwrap_or(15000),
            n_test: self.synth.n_test.unwrap_or(5000),
            data_seed: self.data_seed(),
            synth,
            model,
            objective,
            baseline,
            train,
        })
    }
}
