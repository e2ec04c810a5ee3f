use proptest::collection::vec;
use proptest::prelude::*;

use corrreg::regularizers::{conv_reshape, conv_reshape_tensor, conv_unreshape_tensor, correlation_penalty};
use corrreg::sensitivity::normalize_profile;
use corrreg::tensorio::{decode, encode, Dtype};
use corrreg::train::{early_stop_select, MetricRow};
use corrreg::{Tape, Tensor};

fn shape4() -> impl Strategy<Value = Vec<usize>> {
    (1usize..4, 1usize..4, 1usize..4, 1usize..4).prop_map(|(b, c, h, w)| vec![b, c, h, w])
}

fn tensor4() -> impl Strategy<Value = Tensor> {
    shape4().prop_flat_map(|s| {
        let n: usize = s.iter().product();
        vec(-1e3f64..1e3, n).prop_map(move |d| Tensor::new(s.clone(), d).unwrap())
    })
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

proptest! {
    #[test]
    fn conv_reshape_is_a_permutation(t in tensor4()) {
        let s = t.shape().to_vec();
        let rows = conv_reshape_tensor(&t).unwrap();
        prop_assert_eq!(rows.shape(), &[s[0] * s[2] * s[3], s[1]][..]);
        prop_assert_eq!(sorted(rows.data()), sorted(t.data()));
        prop_assert_eq!(conv_unreshape_tensor(&rows, &s).unwrap(), t.clone());

        let mut tape = Tape::new();
        let v = tape.leaf(&t);
        let r = conv_reshape(&mut tape, v).unwrap();
        prop_assert_eq!(tape.value(r).data(), rows.data());
    }

    #[test]
    fn penalty_invariant_to_row_order(
        rows in vec((vec(-10.0f64..10.0, 3), 0usize..3), 2..30),
        seed in any::<u64>(),
    ) {
        let (h, labels): (Vec<Vec<f64>>, Vec<usize>) = rows.iter().cloned().unzip();
        let mut order: Vec<usize> = (0..h.len()).collect();
        let mut r = corrreg::rng::stream(seed, 0);
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut r);
        let ph: Vec<Vec<f64>> = order.iter().map(|&i| h[i].clone()).collect();
        let pl: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let value = |h: &[Vec<f64>], l: &[usize]| {
            let mut tape = Tape::new();
            let v = tape.leaf(&Tensor::from_rows(h).unwrap());
            let p = correlation_penalty(&mut tape, v, l, 3).unwrap();
            tape.value(p).item()
        };
        let (a, b) = (value(&h, &labels), value(&ph, &pl));
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn normalize_keeps_argmax_and_ratios(s in vec(0.0f64..1e6, 1..40)) {
        let (n, ok) = normalize_profile(&s);
        let max = s.iter().cloned().fold(0.0, f64::max);
        prop_assert_eq!(ok, max > 0.0);
        if ok {
            let arg = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))).unwrap().0;
            prop_assert_eq!(arg(&n), arg(&s));
            prop_assert_eq!(n.iter().cloned().fold(0.0, f64::max), 1.0);
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if s[j] > 0.0 {
                        let (x, y) = (n[i] / n[j], s[i] / s[j]);
                        prop_assert!((x - y).abs() <= 4.0 * f64::EPSILON * y.max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn tensor_files_round_trip(dims in vec(0usize..5, 0..4), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let mut r = corrreg::rng::stream(seed, 0);
        let data: Vec<f64> = (0..n).map(|_| rand::Rng::random::<f64>(&mut r) - 0.5).collect();
        let t = Tensor::new(dims, data).unwrap();
        prop_assert_eq!(decode(&encode(&t, Dtype::F64)).unwrap().0, t);
    }

    #[test]
    fn reshape_round_trips(t in tensor4()) {
        let s = t.shape().to_vec();
        let flat = t.reshape(&[t.numel()]).unwrap();
        prop_assert_eq!(flat.reshape(&s).unwrap(), t.clone());
        prop_assert!(t.reshape(&[t.numel() + 1]).is_err());
    }

    #[test]
    fn early_stop_picks_first_maximum(acc in vec(0u8..5, 1..20)) {
        let rows: Vec<MetricRow> = acc.iter().enumerate().map(|(e, &a)| MetricRow {
            epoch: e + 1,
            iteration: (e + 1) * 10,
            split: "test".into(),
            loss: 0.0,
            accuracy: f64::from(a) / 4.0,
        }).collect();
        let best = *acc.iter().max().unwrap();
        let first = acc.iter().position(|&a| a == best).unwrap() + 1;
        prop_assert_eq!(early_stop_select(&rows, "test"), Some(first));
    }
}

#[test]
fn early_stop_examples() {
    let row = |epoch, accuracy| MetricRow {
        epoch,
        iteration: epoch,
        split: "val".into(),
        loss: 0.0,
        accuracy,
    };
    let monotone: Vec<MetricRow> = (1..=5).map(|e| row(e, e as f64 / 10.0)).collect();
    assert_eq!(early_stop_select(&monotone, "val"), Some(5));
    let tie: Vec<MetricRow> = (1..=8).map(|e| row(e, if e == 3 || e == 7 { 0.9 } else { 0.5 })).collect();
    assert_eq!(early_stop_select(&tie, "val"), Some(3));
    assert_eq!(early_stop_select(&tie, "test"), None);
}
