//! Exact minimizers of the regularized squared-error objective for a linear
//! scalar model `f(x) = θᵀx`:
//!
//! ```text
//! J(θ) = E[(θᵀx − y)²] + β·(1/K) Σ_k Var(θᵀx | y = k) + λ‖θ‖²
//! ```
//!
//! Setting the gradient to zero gives `M θ = E[x y]` with
//! `M = Σ + λI + β·C`, where `C` is the class-averaged within-class
//! covariance of `x`. For the synthetic families `C` is diagonal:
//! `σ²I + 4·diag(p ⊙ (1 − p))` for A and `σ²·diag(p + k(1 − p))` for B.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{invalid, Result};
use crate::linalg::{self, Matrix};
use crate::synth::{self, SynthSpec, SynthSpecA, SynthSpecB};

/// Where `Σ`, the right-hand side and the penalty covariance come from.
#[derive(Debug, Clone, Copy)]
pub enum MomentSource<'a> {
    /// Closed-form moments; for dataset A the right-hand side is `|2p − 1|`.
    Analytic,
    /// Closed-form moments with the signed right-hand side `E[x y] = 2p − 1`.
    AnalyticSigned,
    /// Sample `Σ`, sample `E[x y]` and sample within-class covariance. This
    /// is the exact minimizer of the finite-sample training objective.
    Empirical(&'a LabeledDataset),
    /// Sample `Σ` and `E[x y]` with the population penalty diagonal.
    EmpiricalAnalyticPenalty(&'a LabeledDataset),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Analytic,
    AnalyticSigned,
    Empirical,
    EmpiricalAnalyticPenalty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizedNormalSystem {
    pub m: Matrix,
    pub rhs: Vec<f64>,
    pub family: Family,
    pub provenance: Provenance,
}

fn check_coefs(beta: f64, lambda: f64) -> Result<()> {
    if !(beta >= 0.0) || !(lambda >= 0.0) {
        return Err(invalid("build_system", format!("beta = {beta} and lambda = {lambda} must be >= 0")));
    }
    Ok(())
}

fn assemble(
    spec: &SynthSpec,
    family: Family,
    beta: f64,
    lambda: f64,
    source: MomentSource<'_>,
) -> Result<RegularizedNormalSystem> {
    spec.validate()?;
    check_coefs(beta, lambda)?;
    let d = spec.d();
    let penalty_diag: Vec<f64> = spec.class_variance().iter().map(|v| beta * v).collect();
    let (mut m, rhs, provenance) = match source {
        MomentSource::Analytic | MomentSource::AnalyticSigned => {
            let mom = synth::analytic_moments(spec);
            let mut m = mom.sigma;
            m.add_diag(&penalty_diag);
            let signed = matches!(source, MomentSource::AnalyticSigned);
            let rhs = if signed { mom.mean_xy } else { mom.mean_xy.iter().map(|v| v.abs()).collect() };
            let prov = if signed { Provenance::AnalyticSigned } else { Provenance::Analytic };
            (m, rhs, prov)
        }
        MomentSource::Empirical(data) | MomentSource::EmpiricalAnalyticPenalty(data) => {
            if data.sample_numel() != d {
                return Err(invalid("build_system", format!("dataset has {} features, spec has {d}", data.sample_numel())));
            }
            let mom = synth::empirical_moments(data)?;
            let mut m = mom.sigma;
            let prov = if let MomentSource::Empirical(_) = source {
                let scatter = synth::within_class_scatter(data, 2)?;
                m.add_scaled(&scatter, beta)?;
                Provenance::Empirical
            } else {
                m.add_diag(&penalty_diag);
                Provenance::EmpiricalAnalyticPenalty
            };
            (m, mom.mean_xy, prov)
        }
    };
    m.add_diag(&vec![lambda; d]);
    Ok(RegularizedNormalSystem {
        m,
        rhs,
        family,
        provenance,
    })
}

pub fn build_system_a(spec: &SynthSpecA, beta: f64, lambda: f64, source: MomentSource<'_>) -> Result<RegularizedNormalSystem> {
    assemble(&SynthSpec::A(spec.clone()), Family::A, beta, lambda, source)
}

/// For dataset B `E[x y] = 1`, so the analytic sources coincide.
pub fn build_system_b(spec: &SynthSpecB, beta: f64, lambda: f64, source: MomentSource<'_>) -> Result<RegularizedNormalSystem> {
    assemble(&SynthSpec::B(spec.clone()), Family::B, beta, lambda, source)
}

pub fn build_system(spec: &SynthSpec, beta: f64, lambda: f64, source: MomentSource<'_>) -> Result<RegularizedNormalSystem> {
    match spec {
        SynthSpec::A(s) => build_system_a(s, beta, lambda, source),
        SynthSpec::B(s) => build_system_b(s, beta, lambda, source),
    }
}

impl RegularizedNormalSystem {
    /// `θ* = M⁻¹ rhs` by Cholesky with one refinement step.
    pub fn solve(&self) -> Result<Vec<f64>> {
        linalg::solve_spd(&self.m, &self.rhs)
    }

    pub fn residual_inf(&self, theta: &[f64]) -> Result<f64> {
        let mt = self.m.matvec(theta)?;
        Ok(linalg::inf_norm(&mt.iter().zip(&self.rhs).map(|(a, b)| a - b).collect::<Vec<_>>()))
    }

    /// Value of `θᵀMθ − 2θᵀrhs`, the objective up to a constant.
    pub fn objective(&self, theta: &[f64]) -> Result<f64> {
        let mt = self.m.matvec(theta)?;
        let quad: f64 = theta.iter().zip(&mt).map(|(a, b)| a * b).sum();
        let lin: f64 = theta.iter().zip(&self.rhs).map(|(a, b)| a * b).sum();
        Ok(quad - 2.0 * lin)
    }
}

pub fn solve(system: &RegularizedNormalSystem) -> Result<Vec<f64>> {
    system.solve()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn scalar_a() {
        let spec = SynthSpecA { p: vec![1.0], sigma2: 1e-300 };
        let sys = build_system_a(&spec, 0.0, 0.1, MomentSource::Analytic).unwrap();
        assert!((sys.m[(0, 0)] - 1.1).abs() < 1e-15);
        assert_eq!(sys.rhs, vec![1.0]);
        let th = sys.solve().unwrap();
        assert!((th[0] - 1.0 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn half_p_gives_zero() {
        let spec = SynthSpecA::new(vec![0.5; 4], 0.01).unwrap();
        let th = build_system_a(&spec, 1.0, 0.01, MomentSource::Analytic).unwrap().solve().unwrap();
        assert_eq!(th, vec![0.0; 4]);
    }

    #[test]
    fn scalar_b() {
        let spec = SynthSpecB::new(vec![1.0], 0.001, 10.0).unwrap();
        let sys = build_system_b(&spec, 5.0, 0.0, MomentSource::Analytic).unwrap();
        assert!((sys.m[(0, 0)] - 1.006).abs() < 1e-12);
        let th = sys.solve().unwrap();
        assert!((th[0] - 0.994_035_785_288_270_4).abs() < 1e-9);
    }

    #[test]
    fn b_with_unit_k_has_scalar_penalty() {
        let p = vec![0.0, 0.3, 1.0];
        let spec = SynthSpecB::new(p, 0.02, 1.0).unwrap();
        let with = build_system_b(&spec, 3.0, 0.0, MomentSource::Analytic).unwrap();
        let without = build_system_b(&spec, 0.0, 0.0, MomentSource::Analytic).unwrap();
        for i in 0..3 {
            assert!((with.m[(i, i)] - without.m[(i, i)] - 3.0 * 0.02).abs() < 1e-15);
        }
    }

    #[test]
    fn singular_sigma_without_ridge_is_reported() {
        // p = 1 in two coordinates makes their columns of Σ nearly parallel;
        // with p exactly 0.5 and sigma tiny the diagonal is still PD, so use a
        // rank-deficient empirical Σ instead.
        let x = crate::tensor::Tensor::new(vec![2, 2], vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let ds = LabeledDataset::new(x, vec![1.0, -1.0]).unwrap();
        let spec = SynthSpecA::new(vec![1.0, 1.0], 0.01).unwrap();
        let sys = build_system_a(&spec, 0.0, 0.0, MomentSource::Empirical(&ds)).unwrap();
        assert!(matches!(sys.solve(), Err(Error::NotPositiveDefinite { minor: 2, .. })));
    }

    #[test]
    fn signed_and_absolute_differ_only_in_sign_pattern() {
        let spec = SynthSpecA::new(vec![0.9, 0.2], 0.1).unwrap();
        let abs = build_system_a(&spec, 1.0, 0.1, MomentSource::Analytic).unwrap();
        let sgn = build_system_a(&spec, 1.0, 0.1, MomentSource::AnalyticSigned).unwrap();
        assert_eq!(abs.m, sgn.m);
        assert_eq!(abs.rhs.iter().map(|v| v.abs()).collect::<Vec<_>>(), sgn.rhs.iter().map(|v| v.abs()).collect::<Vec<_>>());
        assert!(sgn.rhs[1] < 0.0);
    }

    #[test]
    fn negative_coefficients_rejected() {
        let spec = SynthSpecA::new(vec![0.9], 0.1).unwrap();
        assert!(build_system_a(&spec, -1.0, 0.0, MomentSource::Analytic).is_err());
    }
}
