//! Output-input sensitivity profiles and the variance/pairwise-difference
//! identity check.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// `|θ_i|`: the input gradient of a linear model is `θ` everywhere.
pub fn sensitivity_linear(theta: &[f64]) -> Vec<f64> {
    theta.iter().map(|t| t.abs()).collect()
}

const CHUNK: usize = 1000;

/// Mean over `data` of `|∂f/∂x_i|` for a scalar-output model, one entry per
/// flattened input coordinate.
pub fn sensitivity_model(model: &Model, data: &LabeledDataset) -> Result<Vec<f64>> {
    if model.spec.outputs != 1 {
        return Err(invalid("sensitivity_model", format!("needs a scalar output, model has {}", model.spec.outputs)));
    }
    if data.is_empty() {
        return Err(invalid("sensitivity_model", "empty dataset"));
    }
    let d = data.sample_numel();
    let mut total = vec![0.0; d];
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(CHUNK) {
        let x = data.x.select_rows(chunk).with_grad();
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let xv = tape.leaf(&x);
        let f = model.forward(&mut tape, xv, &params)?;
        // Samples are independent, so d(sum f)/dx holds each sample's gradient.
        let root = tape.sum(f.output);
        let mut grads = tape.backward(root)?;
        let g = grads.take(xv).ok_or(Error::MissingGradient(0))?;
        let mut part = vec![0.0; d];
        for row in g.chunks_exact(d) {
            part.iter_mut().zip(row).for_each(|(s, v)| *s += v.abs());
        }
        total.iter_mut().zip(&part).for_each(|(t, p)| *t += p);
    }
    let n = data.len() as f64;
    Ok(total.into_iter().map(|t| t / n).collect())
}

/// `s / max(s)`. Returns the input unchanged and `false` when no entry is positive.
pub fn normalize_profile(s: &[f64]) -> (Vec<f64>, bool) {
    let max = s.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        (s.iter().map(|v| v / max).collect(), true)
    } else {
        (s.to_vec(), false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub beta: f64,
    pub p: Vec<f64>,
    pub s_raw: Vec<f64>,
    pub s_norm: Vec<f64>,
    pub normalized: bool,
}

impl SensitivityProfile {
    pub fn new(beta: f64, p: Vec<f64>, s_raw: Vec<f64>) -> Result<Self> {
        if p.len() != s_raw.len() {
            return Err(Error::ShapeMismatch {
                op: "sensitivity_profile",
                lhs: vec![p.len()],
                rhs: vec![s_raw.len()],
            });
        }
        let (s_norm, normalized) = normalize_profile(&s_raw);
        Ok(Self {
            beta,
            p,
            s_raw,
            s_norm,
            normalized,
        })
    }

    /// Mean normalized sensitivity over coordinates whose `p` satisfies `keep`.
    /// `None` when no coordinate qualifies.
    pub fn mean_where(&self, keep: impl Fn(f64) -> bool) -> Option<f64> {
        let picked: Vec<f64> = self.p.iter().zip(&self.s_norm).filter(|(p, _)| keep(**p)).map(|(_, s)| *s).collect();
        (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Export<'a> {
            beta: f64,
            p: &'a [f64],
            s_raw: &'a [f64],
            s_norm: &'a [f64],
        }
        Ok(serde_json::to_string_pretty(&Export {
            beta: self.beta,
            p: &self.p,
            s_raw: &self.s_raw,
            s_norm: &self.s_norm,
        })?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,p,s_raw,s_norm\n");
        for (i, ((p, r), n)) in self.p.iter().zip(&self.s_raw).zip(&self.s_norm).enumerate() {
            s.push_str(&format!("{i},{p:.17e},{r:.17e},{n:.17e}\n"));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prop1Verdict {
    Agree,
    Disagree,
    /// The samples fail the normality screen, so no verdict is given.
    AssumptionUnmet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub n: usize,
    pub variance: f64,
    pub pairwise: f64,
    pub gap: f64,
    pub std_error: f64,
    /// Jarque-Bera statistic of the samples.
    pub jarque_bera: f64,
    pub verdict: Prop1Verdict,
}

impl Prop1Report {
    /// `|gap|` in units of its standard error; zero when both are zero.
    pub fn z(&self) -> f64 {
        if self.gap == 0.0 {
            0.0
        } else {
            self.gap.abs() / self.std_error
        }
    }
}

/// Agreement threshold in standard errors.
pub const PROP1_Z: f64 = 4.0;
/// Chi-square(2) upper 1% point; larger Jarque-Bera values reject normality.
pub const JB_CRITICAL: f64 = 9.21;

/// Draw `n` values from `sampler` on the stream for `seed` and compare the
/// sample variance with half the mean squared difference of disjoint pairs.
pub fn prop1_check(mut sampler: impl FnMut(&mut Rng) -> f64, n: usize, seed: u64) -> Result<Prop1Report> {
    if n < 2 || n % 2 != 0 {
        return Err(invalid("prop1_check", format!("n = {n} must be even and >= 2")));
    }
    let mut r = rng::stream(seed, 0);
    let xs: Vec<f64> = (0..n).map(|_| sampler(&mut r)).collect();
    prop1_pairs(&xs)
}

/// As [`prop1_check`] on fixed samples, paired after a seeded shuffle.
pub fn prop1_from_samples(samples: &[f64], seed: u64) -> Result<Prop1Report> {
    if samples.len() < 2 || samples.len() % 2 != 0 {
        return Err(invalid("prop1_check", format!("n = {} must be even and >= 2", samples.len())));
    }
    let mut xs = samples.to_vec();
    xs.shuffle(&mut rng::stream(seed, 1));
    prop1_pairs(&xs)
}

fn prop1_pairs(xs: &[f64]) -> Result<Prop1Report> {
    let n = xs.len();
    let nf = n as f64;
    let mean = xs.iter().sum::<f64>() / nf;
    let variance = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (nf - 1.0);
    let half = n / 2;
    // Per-pair contributions: w estimates the variance, u the half squared difference.
    let mut diffs = Vec::with_capacity(half);
    let mut pair_sum = 0.0;
    for pair in xs.chunks_exact(2) {
        let (a, b) = (pair[0], pair[1]);
        let u = 0.5 * (a - b) * (a - b);
        let w = 0.5 * ((a - mean).powi(2) + (b - mean).powi(2)) * nf / (nf - 1.0);
        pair_sum += u;
        diffs.push(w - u);
    }
    let pairwise = pair_sum / half as f64;
    let gap = variance - pairwise;
    let dm = diffs.iter().sum::<f64>() / half as f64;
    let dvar = diffs.iter().map(|v| (v - dm) * (v - dm)).sum::<f64>() / (half.max(2) - 1) as f64;
    let std_error = (dvar / half as f64).sqrt();

    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    let jarque_bera = if m2 > 0.0 {
        let skew = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / nf / m2.powf(1.5);
        let kurt = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / nf / (m2 * m2);
        nf / 6.0 * (skew * skew + 0.25 * (kurt - 3.0).powi(2))
    } else {
        0.0
    };
    let mut report = Prop1Report {
        n,
        variance,
        pairwise,
        gap,
        std_error,
        jarque_bera,
        verdict: Prop1Verdict::Agree,
    };
    report.verdict = if jarque_bera > JB_CRITICAL {
        Prop1Verdict::AssumptionUnmet
    } else if report.z() <= PROP1_Z {
        Prop1Verdict::Agree
    } else {
        Prop1Verdict::Disagree
    };
    Ok(report)
}

/// Column `j` of a model's `(B, K)` outputs on `data`.
pub fn output_column(model: &Model, data: &LabeledDataset, j: usize) -> Result<Vec<f64>> {
    if j >= model.spec.outputs {
        return Err(invalid("output_column", format!("column {j} out of range for {} outputs", model.spec.outputs)));
    }
    let mut out = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(CHUNK) {
        let pred: Tensor = model.predict(&data.x.select_rows(chunk))?;
        let k = pred.shape()[1];
        out.extend(pred.data().chunks_exact(k).map(|r| r[j]));
    }
    Ok(out)
}
