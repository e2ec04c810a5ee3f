//! The class-conditional variance penalty and the baseline regularizers.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{task_loss, LossKind};

/// `(1/K) Σ_k mean_{i: y_i = k} ‖h_i − μ̂_k‖²` over classes with at least two
/// rows in the batch. `μ̂_k` is the batch class mean and stays on the tape.
pub fn correlation_penalty(tape: &mut Tape, h: Var, labels: &[usize], num_classes: usize) -> Result<Var> {
    let shape = tape.value(h).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "correlation_penalty",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    if num_classes == 0 {
        return Err(invalid("correlation_penalty", "num_classes must be positive"));
    }
    let mut groups = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        groups
            .get_mut(l)
            .ok_or_else(|| invalid("correlation_penalty", format!("label {l} out of range for {num_classes} classes")))?
            .push(i);
    }
    let mut total: Option<Var> = None;
    for idx in groups.iter().filter(|g| g.len() >= 2) {
        let rows = tape.index_rows(h, idx)?;
        let mu = tape.mean_axis(rows, 0)?;
        let neg_mu = tape.scale(mu, -1.0);
        let centered = tape.add_row(rows, neg_mu)?;
        let ss = tape.sum_squares(centered);
        let term = tape.scale(ss, 1.0 / idx.len() as f64);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(t) => tape.scale(t, 1.0 / num_classes as f64),
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

fn check_4d(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 {
        return Err(invalid(op, format!("expected a 4-D tensor, got shape {shape:?}")));
    }
    Ok(())
}

/// `(B, C, H, W) → (B·H·W, C)`: one row per spatial site.
pub fn conv_reshape(tape: &mut Tape, h: Var) -> Result<Var> {
    let s = tape.value(h).shape().to_vec();
    check_4d("conv_reshape", &s)?;
    let p = tape.permute(h, &[0, 2, 3, 1])?;
    tape.reshape(p, &[s[0] * s[2] * s[3], s[1]])
}

/// Value-level [`conv_reshape`].
pub fn conv_reshape_tensor(h: &Tensor) -> Result<Tensor> {
    let s = h.shape().to_vec();
    check_4d("conv_reshape", &s)?;
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let src = h.data();
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..hw {
                out[(bi * hw + p) * c + ci] = src[(bi * c + ci) * hw + p];
            }
        }
    }
    Tensor::new(vec![b * hw, c], out)
}

/// Inverse of [`conv_reshape_tensor`] for a target `(B, C, H, W)` shape.
pub fn conv_unreshape_tensor(rows: &Tensor, shape: &[usize]) -> Result<Tensor> {
    check_4d("conv_unreshape", shape)?;
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    if rows.shape() != [b * hw, c] {
        return Err(Error::ShapeMismatch {
            op: "conv_unreshape",
            lhs: rows.shape().to_vec(),
            rhs: vec![b * hw, c],
        });
    }
    let src = rows.data();
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..hw {
                out[(bi * c + ci) * hw + p] = src[(bi * hw + p) * c + ci];
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Each sample's label repeated once per row it contributes.
pub fn site_labels(labels: &[usize], rows_per_sample: usize) -> Vec<usize> {
    labels.iter().flat_map(|&l| std::iter::repeat_n(l, rows_per_sample)).collect()
}

/// Mean over a random disjoint pairing of `‖logit(a) − logit(b)‖²`.
pub fn clp_penalty(tape: &mut Tape, logits: Var, rng: &mut Rng) -> Result<Var> {
    let s = tape.value(logits).shape().to_vec();
    if s.len() != 2 || s[0] < 2 {
        return Err(invalid("clp_penalty", format!("need a (B, K) batch with B >= 2, got {s:?}")));
    }
    let mut idx: Vec<usize> = (0..s[0]).collect();
    idx.shuffle(rng);
    let pairs = s[0] / 2;
    let a: Vec<usize> = (0..pairs).map(|i| idx[2 * i]).collect();
    let b: Vec<usize> = (0..pairs).map(|i| idx[2 * i + 1]).collect();
    let la = tape.index_rows(logits, &a)?;
    let lb = tape.index_rows(logits, &b)?;
    let diff = tape.sub(la, lb)?;
    let ss = tape.sum_squares(diff);
    Ok(tape.scale(ss, 1.0 / pairs as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdSpec {
    /// Ball radius in units of 1/255.
    pub epsilon: f64,
    /// Step size in units of 1/255.
    pub step_size: f64,
    pub num_steps: usize,
}

impl PgdSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon >= 0.0 && self.step_size >= 0.0 && (self.epsilon == 0.0 || (self.step_size > 0.0 && self.step_size <= self.epsilon));
        if !ok {
            return Err(invalid(
                "pgd",
                format!("need 0 < step_size <= epsilon, got step_size {} epsilon {}", self.step_size, self.epsilon),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaselineRegSpec {
    #[default]
    None,
    Clp {
        coef: f64,
    },
    GaussianNoise {
        std: f64,
    },
    Pgd {
        epsilon: f64,
        step_size: f64,
        num_steps: usize,
    },
}

impl BaselineRegSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BaselineRegSpec::None => Ok(()),
            BaselineRegSpec::Clp { coef } if coef >= 0.0 => Ok(()),
            BaselineRegSpec::GaussianNoise { std } if std >= 0.0 => Ok(()),
            BaselineRegSpec::Pgd {
                epsilon,
                step_size,
                num_steps,
            } => PgdSpec {
                epsilon,
                step_size,
                num_steps,
            }
            .validate(),
            other => Err(invalid("baseline", format!("negative coefficient in {other:?}"))),
        }
    }
}

/// ℓ∞ PGD from a uniform random start; the result stays in the ball and in `[0, 1]`.
pub fn pgd_attack(model: &Model, x: &Tensor, y: &[f64], loss: LossKind, spec: &PgdSpec, rng: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    let eps = spec.epsilon / 255.0;
    let step = spec.step_size / 255.0;
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let clean = x.data();
    let mut adv: Vec<f64> = clean.iter().map(|&v| (v + rng.random_range(-eps..=eps)).clamp(0.0, 1.0)).collect();
    for _ in 0..spec.num_steps {
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let xv = tape.leaf(&Tensor::new(x.shape().to_vec(), adv.clone())?.with_grad());
        let f = model.forward(&mut tape, xv, &params)?;
        let l = task_loss(&mut tape, f.output, y, loss)?;
        let mut grads = tape.backward(l)?;
        let g = grads.take(xv).ok_or(Error::MissingGradient(0))?;
        for ((a, &c), gi) in adv.iter_mut().zip(clean).zip(&g) {
            let sign = if *gi > 0.0 {
                1.0
            } else if *gi < 0.0 {
                -1.0
            } else {
                0.0
            };
            *a = (*a + step * sign).clamp(c - eps, c + eps).clamp(0.0, 1.0);
        }
    }
    Tensor::new(x.shape().to_vec(), adv)
}

/// `clamp(x + N(0, std²), 0, 1)` elementwise.
pub fn gaussian_augment(x: &Tensor, std: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(std >= 0.0) {
        return Err(invalid("gaussian_augment", format!("std {std} must be >= 0")));
    }
    if std == 0.0 {
        return Ok(x.clone());
    }
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            (v + std * z).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}
