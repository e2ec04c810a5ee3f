//! Oracles shared by the integration and acceptance tests.

#![allow(dead_code)]

use corrreg::linalg::Matrix;
use corrreg::{rng, Tape, Tensor, Var};
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;

/// Uniform entries in `[-1, -0.1] ∪ [0.1, 1]`, away from ReLU kinks.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 7);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.random_range(0.1..1.0);
            if r.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 8);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn value_of(inputs: &[Tensor], f: &impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let root = f(&mut tape, &vars);
    tape.value(root).item()
}

/// Largest relative error between reverse-mode gradients and central
/// differences over every entry of every input. The denominator is floored
/// at 1e-6 so exact zeros compare absolutely.
pub fn max_fd_error(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let tracked: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = tracked.iter().map(|t| tape.leaf(t)).collect();
    let root = f(&mut tape, &vars);
    let mut grads = tape.backward(root).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.take(*v).unwrap();
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (value_of(&plus, &f) - value_of(&minus, &f)) / (2.0 * FD_STEP);
            let scale = analytic[j].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[j] - numeric).abs() / scale);
        }
    }
    worst
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan_inverse(m: &Matrix) -> Vec<Vec<f64>> {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = m.row(i).to_vec();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, pivot);
        let p = a[col][col];
        assert!(p.abs() > 1e-300, "singular matrix");
        a[col].iter_mut().for_each(|v| *v /= p);
        for r in 0..n {
            if r != col {
                let factor = a[r][col];
                if factor != 0.0 {
                    let pivot_row = a[col].clone();
                    a[r].iter_mut().zip(&pivot_row).for_each(|(v, pv)| *v -= factor * pv);
                }
            }
        }
    }
    a.into_iter().map(|row| row[n..].to_vec()).collect()
}

pub fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Standard score of a sample mean against `expected`, using the sample
/// standard deviation. Zero spread with an exact match scores zero.
pub fn z_score(values: &[f64], expected: f64) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let gap = (mean - expected).abs();
    if gap == 0.0 {
        0.0
    } else {
        gap / se
    }
}

/// `(statistic, |z|)` for every per-coordinate conditional mean, second
/// moment, label correlation and pairwise cross moment of `spec` on `n` draws.
pub fn moment_z_scores(spec: &corrreg::SynthSpec, n: usize, seed: u64) -> Vec<(String, f64)> {
    use corrreg::SynthSpec;
    let data = spec.sample(n, seed).unwrap();
    let d = spec.d();
    let x = data.x.data();
    let col = |i: usize| -> Vec<f64> { x.chunks_exact(d).map(|r| r[i]).collect() };
    let cols: Vec<Vec<f64>> = (0..d).map(col).collect();
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..n).partition(|&r| data.y[r] > 0.0);
    let mut out = Vec::new();
    for i in 0..d {
        let p = spec.p()[i];
        let (cond_mean, second) = match spec {
            SynthSpec::A(s) => (2.0 * p - 1.0, 1.0 + s.sigma2),
            SynthSpec::B(s) => (1.0, 1.0 + s.sigma2 * (p + s.k * (1.0 - p))),
        };
        let c = &cols[i];
        let pick = |rows: &[usize]| -> Vec<f64> { rows.iter().map(|&r| c[r]).collect() };
        out.push((format!("E[x{i}|y=1]"), z_score(&pick(&pos), cond_mean)));
        out.push((format!("E[x{i}|y=-1]"), z_score(&pick(&neg), -cond_mean)));
        out.push((format!("E[x{i}^2]"), z_score(&c.iter().map(|v| v * v).collect::<Vec<_>>(), second)));
        let xy: Vec<f64> = c.iter().zip(&data.y).map(|(v, y)| v * y).collect();
        out.push((format!("E[x{i}y]"), z_score(&xy, cond_mean)));
        for j in i + 1..d {
            let cross = match spec {
                SynthSpec::A(_) => (1.0 - 2.0 * p) * (1.0 - 2.0 * spec.p()[j]),
                SynthSpec::B(_) => 1.0,
            };
            let prod: Vec<f64> = c.iter().zip(&cols[j]).map(|(a, b)| a * b).collect();
            out.push((format!("E[x{i}x{j}]"), z_score(&prod, cross)));
        }
    }
    out
}

/// Random byte images: mostly dark, with bright strokes and pixels sitting on
/// either side of the default threshold. Labels cycle through the classes.
pub fn fixture_mnist(n: usize, seed: u64) -> corrreg::cmnist::RawMnist {
    let mut r = rng::stream(seed, 11);
    let mut images = Vec::with_capacity(n * corrreg::cmnist::PIXELS);
    for _ in 0..n {
        for _ in 0..corrreg::cmnist::PIXELS {
            let v: u8 = match r.random_range(0..10) {
                0 | 1 => r.random_range(150..=255),
                2 => 150,
                3 => 149,
                _ => r.random_range(0..40),
            };
            images.push(v);
        }
    }
    let labels = (0..n).map(|i| ((i * 7 + seed as usize) % 10) as u8).collect();
    corrreg::cmnist::RawMnist::new(images, labels).unwrap()
}

/// Write fixture train and test IDX files in the standard MNIST layout.
pub fn write_fixture_mnist(dir: &std::path::Path, n_train: usize, n_test: usize) {
    use corrreg::cmnist::write_idx;
    std::fs::create_dir_all(dir).unwrap();
    write_idx(&fixture_mnist(n_train, 1), &dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte")).unwrap();
    write_idx(&fixture_mnist(n_test, 2), &dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte")).unwrap();
}

/// The downloaded MNIST directory, if present: `MNIST_DIR` or `<workspace>/data/mnist`.
pub fn real_mnist_dir() -> Option<std::path::PathBuf> {
    let dir = std::env::var_os("MNIST_DIR")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}
