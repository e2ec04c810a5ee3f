mod common;

use common::{gauss_jordan_inverse, mat_vec, uniform};
use corrreg::closed_form::{build_system, build_system_a, build_system_b, MomentSource};
use corrreg::linalg::{self, Matrix};
use corrreg::synth::{uniform_p, SynthSpec};
use corrreg::{LabeledDataset, SynthSpecA, SynthSpecB};

/// Sufficient statistics of the finite-sample objective, accumulated here
/// rather than through the library's moment code.
struct Stats {
    d: usize,
    xx: Vec<f64>,
    xy: Vec<f64>,
    /// Within-class scatter averaged over the two classes.
    within: Vec<f64>,
}

fn stats(data: &LabeledDataset) -> Stats {
    let d = data.sample_numel();
    let n = data.len() as f64;
    let mut xx = vec![0.0; d * d];
    let mut xy = vec![0.0; d];
    let mut sum = [vec![0.0; d], vec![0.0; d]];
    let mut sq = [vec![0.0; d * d], vec![0.0; d * d]];
    let mut count = [0.0f64; 2];
    for (row, &y) in data.x.data().chunks_exact(d).zip(&data.y) {
        let c = usize::from(y > 0.0);
        count[c] += 1.0;
        for i in 0..d {
            xy[i] += row[i] * y / n;
            sum[c][i] += row[i];
            for j in 0..d {
                xx[i * d + j] += row[i] * row[j] / n;
                sq[c][i * d + j] += row[i] * row[j];
            }
        }
    }
    let mut within = vec![0.0; d * d];
    for c in 0..2 {
        for i in 0..d {
            for j in 0..d {
                let m = sum[c][i] * sum[c][j] / count[c];
                within[i * d + j] += 0.5 * (sq[c][i * d + j] - m) / count[c];
            }
        }
    }
    Stats { d, xx, xy, within }
}

/// Plain gradient descent on `θᵀ(XX + βW + λI)θ − 2θᵀxy`.
fn gradient_descent(s: &Stats, beta: f64, lambda: f64) -> Vec<f64> {
    let d = s.d;
    let mut theta = vec![0.0; d];
    for _ in 0..20000 {
        let grad: Vec<f64> = (0..d)
            .map(|i| {
                let mt: f64 = (0..d).map(|j| (s.xx[i * d + j] + beta * s.within[i * d + j]) * theta[j]).sum();
                2.0 * (mt + lambda * theta[i] - s.xy[i])
            })
            .collect();
        theta.iter_mut().zip(&grad).for_each(|(t, g)| *t -= 0.05 * g);
    }
    theta
}

#[test]
fn theorem_one_matches_population_gradient_descent() {
    let spec = SynthSpecA::new(vec![0.9, 0.6, 0.5], 0.01).unwrap();
    let data = SynthSpec::A(spec.clone()).sample(1_000_000, 11).unwrap();
    let gd = gradient_descent(&stats(&data), 1.0, 0.001);
    let theta = build_system_a(&spec, 1.0, 0.001, MomentSource::Analytic).unwrap().solve().unwrap();
    let gap = linalg::relative_l2(&gd, &theta);
    assert!(gap <= 1e-2, "gap {gap:.3e}: gd {gd:?} closed form {theta:?}");
}

#[test]
fn theorem_two_matches_population_gradient_descent() {
    let spec = SynthSpecB::new(vec![0.0, 0.5, 1.0], 0.001, 10.0).unwrap();
    let data = SynthSpec::B(spec.clone()).sample(1_000_000, 12).unwrap();
    let gd = gradient_descent(&stats(&data), 10.0, 0.001);
    let theta = build_system_b(&spec, 10.0, 0.001, MomentSource::Analytic).unwrap().solve().unwrap();
    let gap = linalg::relative_l2(&gd, &theta);
    assert!(gap <= 1e-2, "gap {gap:.3e}: gd {gd:?} closed form {theta:?}");
}

#[test]
fn empirical_system_is_the_finite_sample_minimizer() {
    let spec = SynthSpec::A(SynthSpecA::new(uniform_p(4, 3), 0.01).unwrap());
    let data = spec.sample(5000, 4).unwrap();
    let gd = gradient_descent(&stats(&data), 2.0, 1e-3);
    let theta = build_system(&spec, 2.0, 1e-3, MomentSource::Empirical(&data)).unwrap().solve().unwrap();
    assert!(linalg::relative_l2(&gd, &theta) < 1e-8);
}

#[test]
fn solve_matches_gauss_jordan_inverse() {
    let spec = SynthSpec::A(SynthSpecA::new(vec![0.1, 0.3, 0.7, 0.85, 0.45], 1e-3).unwrap());
    let system = build_system(&spec, 0.0, 0.0, MomentSource::AnalyticSigned).unwrap();
    let theta = system.solve().unwrap();
    let direct = mat_vec(&gauss_jordan_inverse(&system.m), &system.rhs);
    for (a, b) in theta.iter().zip(&direct) {
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }
}

#[test]
fn random_spd_residual_bound() {
    for seed in 0..5 {
        let a = uniform(&[20, 20], -1.0, 1.0, seed);
        let d = a.data();
        let mut m = Matrix::zeros(20, 20);
        for i in 0..20 {
            for j in 0..20 {
                m[(i, j)] = (0..20).map(|k| d[k * 20 + i] * d[k * 20 + j]).sum::<f64>() + if i == j { 0.1 } else { 0.0 };
            }
        }
        let b = uniform(&[20], -1.0, 1.0, seed + 100).into_data();
        let x = linalg::solve_spd(&m, &b).unwrap();
        let r: Vec<f64> = m.matvec(&x).unwrap().iter().zip(&b).map(|(u, v)| u - v).collect();
        let rel = linalg::l2_norm(&r) / linalg::l2_norm(&b);
        assert!(rel <= 1e-8, "seed {seed}: relative residual {rel:.3e}");
    }
}

#[test]
fn system_is_symmetric_and_factorizes() {
    for beta in [0.0, 1.0, 100.0] {
        let spec = SynthSpec::B(SynthSpecB::new(uniform_p(30, 5), 1e-3, 10.0).unwrap());
        let s = build_system(&spec, beta, 1e-5, MomentSource::Analytic).unwrap();
        assert!(s.m.max_asymmetry() <= 1e-12);
        linalg::Cholesky::factor(&s.m).unwrap();
    }
}

#[test]
fn empirical_solution_approaches_analytic() {
    let spec = SynthSpec::A(SynthSpecA::new(uniform_p(20, 6), 1e-4).unwrap());
    let analytic = build_system(&spec, 1.0, 1e-5, MomentSource::AnalyticSigned).unwrap().solve().unwrap();
    for n in [20_000, 80_000] {
        let data = spec.sample(n, 7).unwrap();
        let emp = build_system(&spec, 1.0, 1e-5, MomentSource::Empirical(&data)).unwrap().solve().unwrap();
        let worst = emp.iter().zip(&analytic).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 10.0 / (n as f64).sqrt(), "n={n}: entrywise gap {worst:.3e}");
    }
}

/// Large β shrinks the weights of coordinates whose `p` is near one half,
/// relative to nearly deterministic coordinates.
#[test]
fn large_beta_suppresses_mid_p_weights() {
    let p = uniform_p(500, 1);
    let spec = SynthSpec::A(SynthSpecA::new(p.clone(), 1e-4).unwrap());
    let ratio = |beta: f64| {
        let theta = build_system(&spec, beta, 1e-5, MomentSource::Analytic).unwrap().solve().unwrap();
        let mean = |keep: &dyn Fn(f64) -> bool| {
            let v: Vec<f64> = p.iter().zip(&theta).filter(|(p, _)| keep(**p)).map(|(_, t)| t.abs()).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        mean(&|p| (p - 0.5).abs() < 0.1) / mean(&|p| !(0.05..=0.95).contains(&p))
    };
    let (r0, r1, r100) = (ratio(0.0), ratio(1.0), ratio(100.0));
    assert!(r100 < 0.1, "ratio at beta=100: {r100}");
    assert!(r0 > r1 && r1 > r100, "ratios not decreasing: {r0} {r1} {r100}");
}
