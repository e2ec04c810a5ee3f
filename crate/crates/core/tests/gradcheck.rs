mod common;

use common::{away_from_zero, max_fd_error};
use corrreg::model::{ActivationPoint, Model, ModelKind, ModelSpec};
use corrreg::regularizers::{clp_penalty, conv_reshape, correlation_penalty, site_labels};
use corrreg::{rng, Tape, Tensor};

const TOL: f64 = 1e-4;

fn assert_fd(name: &str, err: f64) {
    assert!(err < TOL, "{name}: max relative error {err:.3e}");
}

#[test]
fn elementwise_and_reductions() {
    let a = away_from_zero(&[3, 4], 1);
    let b = away_from_zero(&[3, 4], 2);
    let row = away_from_zero(&[4], 3);
    assert_fd("add/mul/sub", max_fd_error(&[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let m = t.mul(s, v[1]).unwrap();
        let d = t.sub(m, v[0]).unwrap();
        t.sum(d)
    }));
    assert_fd("add_row/scale/relu", max_fd_error(&[a.clone(), row], |t, v| {
        let s = t.add_row(v[0], v[1]).unwrap();
        let s = t.scale(s, -1.7);
        let r = t.relu(s);
        let r2 = t.mul(r, r).unwrap();
        t.mean(r2)
    }));
    assert_fd("sum_axis/mean_axis", max_fd_error(&[a.clone()], |t, v| {
        let sq = t.mul(v[0], v[0]).unwrap();
        let c = t.sum_axis(sq, 0).unwrap();
        let r = t.mean_axis(sq, 1).unwrap();
        let c2 = t.sum_squares(c);
        let r2 = t.sum_squares(r);
        let s = t.add(c2, r2).unwrap();
        t.scale(s, 0.5)
    }));
    assert_fd("index_rows/transpose", max_fd_error(&[a], |t, v| {
        let g = t.index_rows(v[0], &[2, 0, 2]).unwrap();
        let tr = t.transpose(g).unwrap();
        let sq = t.mul(tr, tr).unwrap();
        t.sum(sq)
    }));
}

#[test]
fn matmul_both_operands() {
    for (m, k, n) in [(3, 4, 2), (5, 3, 1), (1, 6, 4)] {
        let a = away_from_zero(&[m, k], 10 + m as u64);
        let b = away_from_zero(&[k, n], 20 + n as u64);
        assert_fd("matmul", max_fd_error(&[a, b], |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            let y2 = t.mul(y, y).unwrap();
            t.sum(y2)
        }));
    }
}

#[test]
fn cross_entropy_over_100_seeds() {
    for seed in 0..100 {
        let logits = away_from_zero(&[4, 5], seed);
        let labels: Vec<usize> = (0..4).map(|i| (i + seed as usize) % 5).collect();
        assert_fd("softmax_cross_entropy", max_fd_error(&[logits], |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap()));
    }
}

#[test]
fn squared_error_loss() {
    let pred = away_from_zero(&[6, 1], 5);
    let target = [1.0, -1.0, 1.0, 1.0, -1.0, -1.0];
    assert_fd("squared_error", max_fd_error(&[pred], |t, v| t.squared_error(v[0], &target).unwrap()));
}

#[test]
fn conv_pool_reshape_permute() {
    let x = away_from_zero(&[2, 2, 4, 4], 30);
    let k = away_from_zero(&[3, 2, 3, 3], 31);
    for padding in [0, 1] {
        assert_fd("conv2d", max_fd_error(&[x.clone(), k.clone()], |t, v| {
            let y = t.conv2d(v[0], v[1], padding).unwrap();
            let y2 = t.mul(y, y).unwrap();
            t.sum(y2)
        }));
    }
    assert_fd("avg_pool2/permute/reshape", max_fd_error(&[x], |t, v| {
        let p = t.avg_pool2(v[0]).unwrap();
        let q = t.permute(p, &[0, 2, 3, 1]).unwrap();
        let r = t.reshape(q, &[8, 2]).unwrap();
        let w = t.index_rows(r, &[7, 1]).unwrap();
        let w2 = t.mul(w, w).unwrap();
        t.sum(w2)
    }));
}

/// Input gradient of `sum(conv(x, k))` expanded by hand: each input pixel
/// collects the kernel taps that touch it.
#[test]
fn conv_input_gradient_matches_hand_expansion() {
    let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap().with_grad();
    let k = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut tape = Tape::new();
    let (xv, kv) = (tape.leaf(&x), tape.leaf(&k));
    let y = tape.conv2d(xv, kv, 0).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap().take(xv).unwrap();

    let kd = k.data();
    let mut brute = [0.0; 9];
    for p in 0..2 {
        for q in 0..2 {
            for a in 0..2 {
                for b in 0..2 {
                    brute[(p + a) * 3 + (q + b)] += kd[a * 2 + b];
                }
            }
        }
    }
    assert_eq!(g, brute.to_vec());
    assert_eq!(g, vec![1.0, 3.0, 2.0, 4.0, 10.0, 6.0, 3.0, 7.0, 4.0]);
}

#[test]
fn correlation_and_clp_penalties() {
    let h = away_from_zero(&[8, 3], 40);
    let labels = [0, 1, 2, 0, 1, 1, 2, 0];
    assert_fd("correlation_penalty", max_fd_error(&[h.clone()], |t, v| correlation_penalty(t, v[0], &labels, 3).unwrap()));
    assert_fd("clp_penalty", max_fd_error(&[h], |t, v| {
        let mut r = rng::stream(9, 0);
        clp_penalty(t, v[0], &mut r).unwrap()
    }));
    let maps = away_from_zero(&[2, 3, 2, 2], 41);
    let site = site_labels(&[1, 0], 4);
    assert_fd("conv_reshape penalty", max_fd_error(&[maps], |t, v| {
        let rows = conv_reshape(t, v[0]).unwrap();
        correlation_penalty(t, rows, &site, 2).unwrap()
    }));
}

fn model_check(spec: ModelSpec, x: Tensor, labels: Vec<usize>, seed: u64) {
    let model = Model::init(spec.clone(), seed).unwrap();
    let mut inputs = vec![x];
    inputs.extend(model.params.iter().cloned());
    let k = spec.outputs;
    let err = max_fd_error(&inputs, |t, v| {
        let m = Model {
            spec: spec.clone(),
            params: Vec::new(),
        };
        let f = m.forward(t, v[0], &v[1..]).unwrap();
        let task = if k == 1 {
            let y: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
            t.squared_error(f.output, &y).unwrap()
        } else {
            t.softmax_cross_entropy(f.output, &labels).unwrap()
        };
        let site = site_labels(&labels, f.rows_per_sample);
        let pen = correlation_penalty(t, f.hidden.unwrap(), &site, k.max(2)).unwrap();
        let pen = t.scale(pen, 0.3);
        t.add(task, pen).unwrap()
    });
    assert_fd("model", err);
}

#[test]
fn mlp_objective_end_to_end() {
    for point in [ActivationPoint::Post, ActivationPoint::Pre] {
        let spec = ModelSpec {
            kind: ModelKind::Mlp {
                hidden_layers: 2,
                width: 5,
            },
            input_shape: vec![4],
            outputs: 1,
            hidden_point: point,
        };
        model_check(spec, away_from_zero(&[6, 4], 50), vec![0, 1, 1, 0, 1, 0], 51);
    }
}

#[test]
fn conv_objective_end_to_end() {
    let spec = ModelSpec {
        kind: ModelKind::SmallConv { channels: vec![2, 3] },
        input_shape: vec![2, 4, 4],
        outputs: 3,
        hidden_point: ActivationPoint::Post,
    };
    model_check(spec, away_from_zero(&[3, 2, 4, 4], 60), vec![0, 2, 0], 61);
}
