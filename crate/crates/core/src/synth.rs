//! Synthetic datasets A and B and their first/second moments.
//!
//! Dataset A: `y ~ U{-1, 1}`, `x_i ~ N(y, σ²)` with probability `p_i` and
//! `N(-y, σ²)` otherwise. Dataset B: `x_i ~ N(y, σ²)` with probability `p_i`
//! and `N(y, kσ²)` otherwise. Coordinates are independent given `y`.
//!
//! Second moments are uncentered: `Σ = E[x xᵀ]`.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpecA {
    pub p: Vec<f64>,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpecB {
    pub p: Vec<f64>,
    pub sigma2: f64,
    pub k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SynthSpec {
    A(SynthSpecA),
    B(SynthSpecB),
}

fn check_p(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidSpec("p must be non-empty".into()));
    }
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidSpec(format!("p_i = {bad} outside [0, 1]")));
    }
    Ok(())
}

impl SynthSpecA {
    pub fn new(p: Vec<f64>, sigma2: f64) -> Result<Self> {
        let s = Self { p, sigma2 };
        s.validate()?;
        Ok(s)
    }

    pub fn d(&self) -> usize {
        self.p.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_p(&self.p)?;
        if !(self.sigma2 > 0.0) {
            return Err(Error::InvalidSpec(format!("sigma2 = {} must be > 0", self.sigma2)));
        }
        Ok(())
    }

    /// Within-class variance of each coordinate: `σ² + 4 p (1 − p)`.
    pub fn class_variance(&self) -> Vec<f64> {
        self.p.iter().map(|p| self.sigma2 + 4.0 * p * (1.0 - p)).collect()
    }
}

impl SynthSpecB {
    pub fn new(p: Vec<f64>, sigma2: f64, k: f64) -> Result<Self> {
        let s = Self { p, sigma2, k };
        s.validate()?;
        Ok(s)
    }

    pub fn d(&self) -> usize {
        self.p.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_p(&self.p)?;
        if !(self.sigma2 > 0.0) {
            return Err(Error::InvalidSpec(format!("sigma2 = {} must be > 0", self.sigma2)));
        }
        if !(self.k > 0.0) {
            return Err(Error::InvalidSpec(format!("k = {} must be > 0", self.k)));
        }
        Ok(())
    }

    /// Within-class variance of each coordinate: `σ² (p + k (1 − p))`.
    pub fn class_variance(&self) -> Vec<f64> {
        self.p.iter().map(|p| self.sigma2 * (p + self.k * (1.0 - p))).collect()
    }
}

impl SynthSpec {
    pub fn d(&self) -> usize {
        match self {
            SynthSpec::A(s) => s.d(),
            SynthSpec::B(s) => s.d(),
        }
    }

    pub fn p(&self) -> &[f64] {
        match self {
            SynthSpec::A(s) => &s.p,
            SynthSpec::B(s) => &s.p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SynthSpec::A(s) => s.validate(),
            SynthSpec::B(s) => s.validate(),
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<LabeledDataset> {
        match self {
            SynthSpec::A(s) => sample_a(s, n, seed),
            SynthSpec::B(s) => sample_b(s, n, seed),
        }
    }

    pub fn class_variance(&self) -> Vec<f64> {
        match self {
            SynthSpec::A(s) => s.class_variance(),
            SynthSpec::B(s) => s.class_variance(),
        }
    }
}

/// Draw `p_i ~ U[0, 1]` once; callers keep the vector fixed afterwards.
pub fn uniform_p(d: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(rng::derive(seed, "p"), 0);
    (0..d).map(|_| r.random::<f64>()).collect()
}

fn labels(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, 0);
    (0..n).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// Fill column `i` of an `n × d` matrix from stream `i + 1`.
fn fill_columns(n: usize, d: usize, seed: u64, mut draw: impl FnMut(usize, usize, &mut rng::Rng) -> f64) -> Vec<f64> {
    let mut x = vec![0.0; n * d];
    for i in 0..d {
        let mut r = rng::stream(seed, i as u64 + 1);
        for j in 0..n {
            x[j * d + i] = draw(i, j, &mut r);
        }
    }
    x
}

pub fn sample_a(spec: &SynthSpecA, n: usize, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(invalid("sample_a", "n must be > 0"));
    }
    let y = labels(n, seed);
    let d = spec.d();
    let sd = spec.sigma2.sqrt();
    let x = fill_columns(n, d, seed, |i, j, r| {
        let keep = r.random::<f64>() < spec.p[i];
        let z: f64 = StandardNormal.sample(r);
        let mean = if keep { y[j] } else { -y[j] };
        mean + sd * z
    });
    LabeledDataset::new(Tensor::new(vec![n, d], x)?, y)
}

pub fn sample_b(spec: &SynthSpecB, n: usize, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(invalid("sample_b", "n must be > 0"));
    }
    let y = labels(n, seed);
    let d = spec.d();
    let sd_lo = spec.sigma2.sqrt();
    let sd_hi = (spec.k * spec.sigma2).sqrt();
    let x = fill_columns(n, d, seed, |i, j, r| {
        let low = r.random::<f64>() < spec.p[i];
        let z: f64 = StandardNormal.sample(r);
        y[j] + if low { sd_lo } else { sd_hi } * z
    });
    LabeledDataset::new(Tensor::new(vec![n, d], x)?, y)
}

/// `E[x y]` and `Σ = E[x xᵀ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean_xy: Vec<f64>,
    pub sigma: Matrix,
}

pub fn analytic_moments(spec: &SynthSpec) -> Moments {
    let d = spec.d();
    let mut sigma = Matrix::zeros(d, d);
    match spec {
        SynthSpec::A(s) => {
            let u: Vec<f64> = s.p.iter().map(|p| 1.0 - 2.0 * p).collect();
            for i in 0..d {
                for j in 0..d {
                    sigma[(i, j)] = if i == j { 1.0 + s.sigma2 } else { u[i] * u[j] };
                }
            }
            Moments {
                mean_xy: s.p.iter().map(|p| 2.0 * p - 1.0).collect(),
                sigma,
            }
        }
        SynthSpec::B(s) => {
            let var = s.class_variance();
            for i in 0..d {
                for j in 0..d {
                    sigma[(i, j)] = if i == j { 1.0 + var[i] } else { 1.0 };
                }
            }
            Moments {
                mean_xy: vec![1.0; d],
                sigma,
            }
        }
    }
}

/// Monte-Carlo estimates `(1/n) Σ x y` and `(1/n) Σ x xᵀ` over a flat dataset.
pub fn empirical_moments(data: &LabeledDataset) -> Result<Moments> {
    let n = data.len();
    if n < 2 {
        return Err(invalid("empirical_moments", format!("need at least 2 samples, got {n}")));
    }
    let d = data.x.numel() / n;
    let x = data.x.data();
    let mut mean_xy = vec![0.0; d];
    for (row, y) in x.chunks(d).zip(&data.y) {
        mean_xy.iter_mut().zip(row).for_each(|(m, v)| *m += v * y);
    }
    mean_xy.iter_mut().for_each(|m| *m /= n as f64);
    let sigma = gram(x, n, d, 1.0 / n as f64);
    Ok(Moments {
        mean_xy,
        sigma: Matrix::from_vec(d, d, sigma)?,
    })
}

/// `c · Xᵀ X` for a row-major `n × d` block.
pub(crate) fn gram(x: &[f64], n: usize, d: usize, c: f64) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    if n == 0 || d == 0 {
        return out;
    }
    // SAFETY: x is n×d row-major (read as its transpose d×n), out is d×d.
    unsafe {
        matrixmultiply::dgemm(d, n, d, c, x.as_ptr(), 1, d as isize, x.as_ptr(), d as isize, 1, 0.0, out.as_mut_ptr(), d as isize, 1);
    }
    out
}

/// Average over classes of the within-class scatter:
/// `(1/K) Σ_k (1/n_k) Σ_{j∈k} (x_j − μ_k)(x_j − μ_k)ᵀ`, over classes with at
/// least two samples. This is the Hessian/2 of the correlation penalty for a
/// linear scalar model.
pub fn within_class_scatter(data: &LabeledDataset, num_classes: usize) -> Result<Matrix> {
    let n = data.len();
    if n == 0 {
        return Err(invalid("within_class_scatter", "empty dataset"));
    }
    let d = data.x.numel() / n;
    let classes = data.class_indices()?;
    let mut total = vec![0.0; d * d];
    for k in 0..num_classes {
        let idx: Vec<usize> = (0..n).filter(|&j| classes[j] == k).collect();
        if idx.len() < 2 {
            continue;
        }
        let rows = data.x.select_rows(&idx);
        let mut centered = rows.into_data();
        let mut mu = vec![0.0; d];
        for r in centered.chunks(d) {
            mu.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mu.iter_mut().for_each(|m| *m /= idx.len() as f64);
        for r in centered.chunks_mut(d) {
            r.iter_mut().zip(&mu).for_each(|(v, m)| *v -= m);
        }
        let g = gram(&centered, idx.len(), d, 1.0 / idx.len() as f64);
        total.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
    }
    total.iter_mut().for_each(|t| *t /= num_classes as f64);
    Matrix::from_vec(d, d, total)
}
