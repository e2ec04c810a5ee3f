mod common;

use common::moment_z_scores;
use corrreg::synth::{analytic_moments, empirical_moments, uniform_p, SynthSpec};
use corrreg::{SynthSpecA, SynthSpecB};

fn worst(scores: &[(String, f64)]) -> (String, f64) {
    scores.iter().cloned().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap()
}

#[test]
fn dataset_a_moments_within_four_standard_errors() {
    let spec = SynthSpec::A(SynthSpecA::new(uniform_p(8, 21), 1e-2).unwrap());
    let (name, z) = worst(&moment_z_scores(&spec, 100_000, 22));
    assert!(z <= 4.0, "{name}: z = {z:.2}");
}

#[test]
fn dataset_b_moments_within_four_standard_errors() {
    let spec = SynthSpec::B(SynthSpecB::new(uniform_p(8, 23), 1e-3, 10.0).unwrap());
    let (name, z) = worst(&moment_z_scores(&spec, 100_000, 24));
    assert!(z <= 4.0, "{name}: z = {z:.2}");
}

#[test]
fn unit_k_collapses_to_single_variance() {
    let sigma2 = 0.05;
    let spec = SynthSpec::B(SynthSpecB::new(uniform_p(4, 25), sigma2, 1.0).unwrap());
    let data = spec.sample(100_000, 26).unwrap();
    for i in 0..4 {
        let v: Vec<f64> = data.x.data().chunks_exact(4).zip(&data.y).map(|(r, y)| r[i] - y).collect();
        let var = v.iter().map(|e| e * e).sum::<f64>() / v.len() as f64;
        // Sample variance of a Gaussian has relative standard error sqrt(2/n).
        assert!((var / sigma2 - 1.0).abs() < 4.0 * (2.0f64 / 100_000.0).sqrt(), "coordinate {i}: {var}");
    }
}

#[test]
fn empirical_moments_converge_entrywise() {
    let n = 200_000;
    for spec in [
        SynthSpec::A(SynthSpecA::new(uniform_p(6, 27), 1e-4).unwrap()),
        SynthSpec::B(SynthSpecB::new(uniform_p(6, 28), 1e-3, 10.0).unwrap()),
    ] {
        let emp = empirical_moments(&spec.sample(n, 29).unwrap()).unwrap();
        let ana = analytic_moments(&spec);
        let bound = 5.0 / (n as f64).sqrt();
        let sigma_gap = emp.sigma.data().iter().zip(ana.sigma.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let xy_gap = emp.mean_xy.iter().zip(&ana.mean_xy).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(sigma_gap <= bound && xy_gap <= bound, "gaps {sigma_gap:.3e} {xy_gap:.3e} > {bound:.3e}");
    }
}

/// Within a class, centered coordinates are uncorrelated.
#[test]
fn coordinates_conditionally_independent() {
    let n = 100_000;
    let spec = SynthSpec::A(SynthSpecA::new(vec![0.3, 0.5, 0.8], 0.04).unwrap());
    let data = spec.sample(n, 30).unwrap();
    let rows: Vec<&[f64]> = data.x.data().chunks_exact(3).zip(&data.y).filter(|(_, y)| **y > 0.0).map(|(r, _)| r).collect();
    let m = rows.len() as f64;
    let mean: Vec<f64> = (0..3).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / m).collect();
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let cov = rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / m;
        let vi = rows.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / m;
        let vj = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / m;
        let corr = cov / (vi * vj).sqrt();
        assert!(corr.abs() <= 4.0 / m.sqrt(), "corr({i},{j}) = {corr}");
    }
}
