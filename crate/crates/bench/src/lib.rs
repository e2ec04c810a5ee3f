//! Seeded inputs shared by the kernel benchmarks.

use corrreg::linalg::Matrix;
use corrreg::rng;
use corrreg::Tensor;
use rand::Rng as _;

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 0);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// `AᵀA + n·I` for a random `n × n` matrix `A`.
pub fn spd(n: usize, seed: u64) -> Matrix {
    let a = uniform(&[n, n], seed);
    let d = a.data();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = (0..n).map(|k| d[k * n + i] * d[k * n + j]).sum::<f64>() + if i == j { n as f64 } else { 0.0 };
        }
    }
    Matrix::from_vec(n, n, m).expect("square")
}
