mod common;

use common::uniform;
use corrreg::model::{ActivationPoint, Model, ModelKind, ModelSpec};
use corrreg::sensitivity::{prop1_check, prop1_from_samples, sensitivity_linear, sensitivity_model, Prop1Verdict};
use corrreg::{LabeledDataset, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian_data(n: usize, d: usize, seed: u64) -> LabeledDataset {
    let mut r = corrreg::rng::stream(seed, 0);
    let x: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect();
    LabeledDataset::new(Tensor::new(vec![n, d], x).unwrap(), vec![1.0; n]).unwrap()
}

fn mlp(d: usize, width: usize, layers: usize) -> ModelSpec {
    ModelSpec {
        kind: ModelKind::Mlp {
            hidden_layers: layers,
            width,
        },
        input_shape: vec![d],
        outputs: 1,
        hidden_point: ActivationPoint::Post,
    }
}

/// `f(x) = relu(x)` has derivative `1{x > 0}`, so the mean is `P(x > 0) = 1/2`.
#[test]
fn single_relu_on_standard_normal() {
    let n = 200_000;
    let model = Model {
        spec: mlp(1, 1, 1),
        params: vec![Tensor::new(vec![1, 1], vec![1.0]).unwrap(), Tensor::new(vec![1, 1], vec![1.0]).unwrap()],
    };
    let s = sensitivity_model(&model, &gaussian_data(n, 1, 1)).unwrap();
    let se = 0.5 / (n as f64).sqrt();
    assert!((s[0] - 0.5).abs() < 4.0 * se, "mean |f'| = {}", s[0]);
}

#[test]
fn linear_model_sensitivity_is_abs_theta() {
    let d = 12;
    let theta = uniform(&[d, 1], -2.0, 2.0, 3);
    let model = Model {
        spec: ModelSpec {
            kind: ModelKind::Linear,
            input_shape: vec![d],
            outputs: 1,
            hidden_point: ActivationPoint::Post,
        },
        params: vec![theta.clone()],
    };
    let s = sensitivity_model(&model, &gaussian_data(2500, d, 4)).unwrap();
    for (got, want) in s.iter().zip(sensitivity_linear(theta.data())) {
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn mlp_sensitivity_matches_finite_differences() {
    let (d, n, h) = (6, 40, 1e-6);
    let model = Model::init(mlp(d, 16, 2), 5).unwrap();
    let data = gaussian_data(n, d, 6);
    let s = sensitivity_model(&model, &data).unwrap();
    let f = |x: &Tensor| model.predict(x).unwrap().into_data();
    let mut fd = vec![0.0; d];
    for i in 0..d {
        let (mut up, mut down) = (data.x.data().to_vec(), data.x.data().to_vec());
        for r in 0..n {
            up[r * d + i] += h;
            down[r * d + i] -= h;
        }
        let fu = f(&Tensor::new(vec![n, d], up).unwrap());
        let fdn = f(&Tensor::new(vec![n, d], down).unwrap());
        fd[i] = fu.iter().zip(&fdn).map(|(a, b)| ((a - b) / (2.0 * h)).abs()).sum::<f64>() / n as f64;
    }
    for (i, (a, b)) in s.iter().zip(&fd).enumerate() {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3), "coordinate {i}: {a} vs {b}");
    }
}

#[test]
fn sensitivity_rejects_vector_outputs() {
    let mut spec = mlp(3, 4, 1);
    spec.outputs = 2;
    let model = Model::init(spec, 0).unwrap();
    assert!(sensitivity_model(&model, &gaussian_data(4, 3, 0)).is_err());
}

#[test]
fn prop1_agrees_for_gaussians() {
    for seed in 0..3 {
        let report = prop1_check(|r| 3.0 + 2.0 * Distribution::<f64>::sample(&StandardNormal, r), 200_000, seed).unwrap();
        assert_eq!(report.verdict, Prop1Verdict::Agree, "{report:?}");
        assert!((report.variance / 4.0 - 1.0).abs() < 0.02);
    }
}

#[test]
fn prop1_flags_non_normal_samples() {
    let report = prop1_check(|r| r.random::<f64>(), 100_000, 1).unwrap();
    assert_eq!(report.verdict, Prop1Verdict::AssumptionUnmet);
    let constant = prop1_from_samples(&[2.5; 10], 0).unwrap();
    assert_eq!((constant.variance, constant.pairwise, constant.gap), (0.0, 0.0, 0.0));
    assert!(prop1_check(|_| 0.0, 7, 0).is_err());
}
