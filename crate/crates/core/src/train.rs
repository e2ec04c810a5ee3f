//! Adam training of the regularized objective
//! `loss + β·penalty + λ‖θ‖² (+ clp coef·clp)`.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;

use crate::autodiff::{Tape, Var};
use crate::data::{class_index, LabeledDataset};
use crate::error::{invalid, Error, Result};
use crate::model::{Model, ModelSpec};
use crate::optim::{AdamConfig, AdamState};
use crate::regularizers::{self, BaselineRegSpec, PgdSpec};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SquaredError,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attach {
    Output,
    FirstHidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizedObjectiveConfig {
    pub beta: f64,
    pub lambda: f64,
    pub loss: LossKind,
    pub attach: Attach,
    pub num_classes: usize,
}

impl RegularizedObjectiveConfig {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if !(self.beta >= 0.0) || !(self.lambda >= 0.0) {
            return Err(invalid("objective", format!("beta {} and lambda {} must be >= 0", self.beta, self.lambda)));
        }
        if self.num_classes == 0 {
            return Err(invalid("objective", "num_classes must be positive"));
        }
        if self.attach == Attach::Output && (self.loss != LossKind::SquaredError || spec.outputs != 1) {
            return Err(invalid("objective", "attach = output needs squared_error on a scalar output"));
        }
        if self.loss == LossKind::CrossEntropy && spec.outputs < 2 {
            return Err(invalid("objective", "cross_entropy needs at least two outputs"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// `lr·(1 + cos(π t / T)) / 2` over the `T` steps of the run.
    Cosine,
}

impl Schedule {
    pub fn lr(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Exactly one of `iterations` and `epochs` is set.
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    /// Zero means full batch.
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub seed: u64,
    /// Evaluation cadence in iterations; epoch runs evaluate every epoch.
    #[serde(default)]
    pub eval_every: Option<usize>,
    /// Also evaluate on the training set.
    #[serde(default = "yes")]
    pub eval_train: bool,
    #[serde(default)]
    pub early_stop_split: Option<String>,
    #[serde(default)]
    pub keep_checkpoints: bool,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: Some(1000),
            epochs: None,
            batch_size: 128,
            adam: AdamConfig::default(),
            schedule: Schedule::Constant,
            seed: 0,
            eval_every: None,
            eval_train: true,
            early_stop_split: None,
            keep_checkpoints: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, objective: &RegularizedObjectiveConfig) -> Result<()> {
        match (self.iterations, self.epochs) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(invalid("train_config", "set exactly one of iterations and epochs")),
        }
        if objective.beta > 0.0 && self.batch_size == 1 {
            return Err(invalid("train_config", "batch_size must be >= 2 when beta > 0"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(invalid("train_config", format!("lr {} must be > 0", self.adam.lr)));
        }
        if self.eval_every == Some(0) {
            return Err(invalid("train_config", "eval_every must be positive"));
        }
        Ok(())
    }
}

/// A named dataset evaluated at every checkpoint.
#[derive(Debug, Clone, Copy)]
pub struct EvalSplit<'a> {
    pub name: &'a str,
    pub data: &'a LabeledDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub iteration: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

/// Terms of the objective at one optimizer step, before the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub total: f64,
    pub loss: f64,
    pub penalty: f64,
    pub clp: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub iteration: usize,
    pub params: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<MetricRow>,
    pub trace: Vec<ObjectiveTerms>,
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainOutcome {
    /// Checkpoint chosen on `split`; needs `keep_checkpoints`.
    pub fn selected(&self, split: &str) -> Option<&Checkpoint> {
        let epoch = early_stop_select(&self.history, split)?;
        self.checkpoints.iter().find(|c| c.epoch == epoch)
    }

    pub fn model_at(&self, ckpt: &Checkpoint) -> Model {
        Model {
            spec: self.model.spec.clone(),
            params: ckpt.params.clone(),
        }
    }
}

/// Epoch with the highest accuracy on `split`; ties go to the earliest.
pub fn early_stop_select(history: &[MetricRow], split: &str) -> Option<usize> {
    let mut best: Option<&MetricRow> = None;
    for row in history.iter().filter(|r| r.split == split) {
        if best.is_none_or(|b| row.accuracy > b.accuracy || (row.accuracy == b.accuracy && row.epoch < b.epoch)) {
            best = Some(row);
        }
    }
    best.map(|r| r.epoch)
}

fn class_labels(y: &[f64]) -> Result<Vec<usize>> {
    y.iter().map(|&v| class_index(v)).collect()
}

/// Task loss of `(B, outputs)` predictions. Squared error on several outputs
/// compares against one-hot targets and sums over outputs.
pub fn task_loss(tape: &mut Tape, output: Var, y: &[f64], loss: LossKind) -> Result<Var> {
    let k = tape.value(output).shape().get(1).copied().unwrap_or(1);
    match loss {
        LossKind::CrossEntropy => tape.softmax_cross_entropy(output, &class_labels(y)?),
        LossKind::SquaredError if k == 1 => tape.squared_error(output, y),
        LossKind::SquaredError => {
            let mut target = vec![0.0; y.len() * k];
            for (i, c) in class_labels(y)?.into_iter().enumerate() {
                if c >= k {
                    return Err(invalid("task_loss", format!("label {c} out of range for {k} outputs")));
                }
                target[i * k + c] = 1.0;
            }
            let se = tape.squared_error(output, &target)?;
            Ok(tape.scale(se, k as f64))
        }
    }
}

fn correct(pred: &[f64], y: &[f64], k: usize) -> Result<usize> {
    let mut hits = 0;
    for (i, &label) in y.iter().enumerate() {
        let row = &pred[i * k..(i + 1) * k];
        let ok = if k == 1 {
            (row[0] > 0.0) == (label > 0.0)
        } else {
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
                .0;
            arg == class_index(label)?
        };
        hits += usize::from(ok);
    }
    Ok(hits)
}

const EVAL_CHUNK: usize = 1000;

/// Mean task loss and accuracy of `model` on `data`.
pub fn evaluate(model: &Model, data: &LabeledDataset, loss: LossKind) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(invalid("evaluate", "empty dataset"));
    }
    let (mut total, mut hits) = (0.0, 0);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let part = data.subset(chunk);
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let x = tape.constant(part.x);
        let f = model.forward(&mut tape, x, &params)?;
        let l = task_loss(&mut tape, f.output, &part.y, loss)?;
        total += tape.value(l).item() * chunk.len() as f64;
        let out = tape.value(f.output);
        hits += correct(out.data(), &part.y, out.shape()[1])?;
    }
    Ok((total / data.len() as f64, hits as f64 / data.len() as f64))
}

struct Terms {
    total: Var,
    values: ObjectiveTerms,
}

fn objective_on_batch(
    tape: &mut Tape,
    model: &Model,
    params: &[Var],
    x: Tensor,
    y: &[f64],
    objective: &RegularizedObjectiveConfig,
    baseline: &BaselineRegSpec,
    aux: &mut rng::Rng,
) -> Result<Terms> {
    let xv = tape.constant(x);
    let f = model.forward(tape, xv, params)?;
    let loss = task_loss(tape, f.output, y, objective.loss)?;
    let mut total = loss;
    let mut values = ObjectiveTerms {
        total: 0.0,
        loss: tape.value(loss).item(),
        penalty: 0.0,
        clp: 0.0,
        l2: 0.0,
    };
    if objective.beta > 0.0 {
        let (h, rows) = match objective.attach {
            Attach::Output => (f.output, 1),
            Attach::FirstHidden => (
                f.hidden.ok_or_else(|| invalid("train", "attach = first_hidden needs a model with a hidden layer"))?,
                f.rows_per_sample,
            ),
        };
        let labels = regularizers::site_labels(&class_labels(y)?, rows);
        let pen = regularizers::correlation_penalty(tape, h, &labels, objective.num_classes)?;
        values.penalty = tape.value(pen).item();
        let scaled = tape.scale(pen, objective.beta);
        total = tape.add(total, scaled)?;
    }
    if let BaselineRegSpec::Clp { coef } = *baseline {
        if coef > 0.0 && y.len() >= 2 {
            let clp = regularizers::clp_penalty(tape, f.output, aux)?;
            values.clp = tape.value(clp).item();
            let scaled = tape.scale(clp, coef);
            total = tape.add(total, scaled)?;
        }
    }
    if objective.lambda > 0.0 {
        for &p in params {
            let ss = tape.sum_squares(p);
            values.l2 += tape.value(ss).item();
            let scaled = tape.scale(ss, objective.lambda);
            total = tape.add(total, scaled)?;
        }
    }
    values.total = tape.value(total).item();
    Ok(Terms { total, values })
}

/// Train a freshly initialized model. Deterministic for a fixed `cfg.seed`.
pub fn train(
    spec: &ModelSpec,
    objective: &RegularizedObjectiveConfig,
    baseline: &BaselineRegSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    evals: &[EvalSplit<'_>],
) -> Result<TrainOutcome> {
    let model = Model::init(spec.clone(), cfg.seed)?;
    train_from(model, objective, baseline, data, cfg, evals)
}

/// As [`train`], starting from the given parameters.
pub fn train_from(
    mut model: Model,
    objective: &RegularizedObjectiveConfig,
    baseline: &BaselineRegSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    evals: &[EvalSplit<'_>],
) -> Result<TrainOutcome> {
    objective.validate(&model.spec)?;
    baseline.validate()?;
    cfg.validate(objective)?;
    if data.is_empty() {
        return Err(invalid("train", "empty training set"));
    }
    if data.sample_shape() != model.spec.input_shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "train",
            lhs: data.sample_shape().to_vec(),
            rhs: model.spec.input_shape.clone(),
        });
    }
    let n = data.len();
    let bs = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
    let full_batch = bs == n;
    let per_epoch = n.div_ceil(bs);
    let total_steps = cfg.iterations.unwrap_or_else(|| cfg.epochs.unwrap_or(0) * per_epoch);
    let cadence = match (cfg.epochs, cfg.eval_every) {
        (Some(_), _) => per_epoch,
        (None, Some(k)) => k,
        (None, None) => total_steps.max(1),
    };

    let mut order_rng = rng::stream(rng::derive(cfg.seed, "batches"), 0);
    let mut aux_rng = rng::stream(rng::derive(cfg.seed, "baseline"), 0);
    let mut adam = AdamState::new(cfg.adam, &model.params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut out = TrainOutcome {
        model: model.clone(),
        history: Vec::new(),
        trace: Vec::with_capacity(total_steps),
        checkpoints: Vec::new(),
    };

    for step in 0..total_steps {
        let pos = step % per_epoch;
        if pos == 0 && !full_batch {
            order.shuffle(&mut order_rng);
        }
        let batch = if full_batch {
            None
        } else {
            Some(data.subset(&order[pos * bs..((pos + 1) * bs).min(n)]))
        };
        let (bx, by) = match &batch {
            Some(b) => (&b.x, b.y.as_slice()),
            None => (&data.x, data.y.as_slice()),
        };
        let x = match *baseline {
            BaselineRegSpec::GaussianNoise { std } => regularizers::gaussian_augment(bx, std, &mut aux_rng)?,
            BaselineRegSpec::Pgd {
                epsilon,
                step_size,
                num_steps,
            } => {
                let spec = PgdSpec {
                    epsilon,
                    step_size,
                    num_steps,
                };
                regularizers::pgd_attack(&model, bx, by, objective.loss, &spec, &mut aux_rng)?
            }
            _ => bx.clone(),
        };

        let mut tape = Tape::new();
        let params = model.bind(&mut tape, true);
        let terms = objective_on_batch(&mut tape, &model, &params, x, by, objective, baseline, &mut aux_rng)?;
        if !terms.values.total.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: terms.values.total,
            });
        }
        out.trace.push(terms.values);
        let mut grads = tape.backward(terms.total)?;
        grads.write_into(&params, &mut model.params);
        let lr = cfg.schedule.lr(cfg.adam.lr, step, total_steps);
        adam.step_with_lr(&mut model.params, 0.0, lr)?;

        let done = step + 1;
        if done % cadence == 0 || done == total_steps {
            let epoch = done.div_ceil(per_epoch);
            let index = if cfg.epochs.is_some() { epoch } else { done };
            record(&mut out.history, &model, objective.loss, data, cfg.eval_train, evals, index, done)?;
            if cfg.keep_checkpoints {
                out.checkpoints.push(Checkpoint {
                    epoch: index,
                    iteration: done,
                    params: model.params.clone(),
                });
            }
        }
    }
    out.model = model;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn record(
    history: &mut Vec<MetricRow>,
    model: &Model,
    loss: LossKind,
    train: &LabeledDataset,
    eval_train: bool,
    evals: &[EvalSplit<'_>],
    epoch: usize,
    iteration: usize,
) -> Result<()> {
    let train_split = EvalSplit { name: "train", data: train };
    let splits = eval_train.then_some(train_split).into_iter().chain(evals.iter().copied());
    for split in splits {
        let (l, acc) = evaluate(model, split.data, loss)?;
        history.push(MetricRow {
            epoch,
            iteration,
            split: split.name.to_string(),
            loss: l,
            accuracy: acc,
        });
    }
    Ok(())
}

/// History as CSV with header `epoch,iteration,split,loss,accuracy`.
pub fn history_csv(history: &[MetricRow]) -> String {
    let mut s = String::from("epoch,iteration,split,loss,accuracy\n");
    for r in history {
        s.push_str(&format!("{},{},{},{:.17e},{:.17e}\n", r.epoch, r.iteration, r.split, r.loss, r.accuracy));
    }
    s
}
