//! Numerics checked against 256-bit binary floats.

use dashu_float::FBig;
use mmspec::numerics::{cross_entropy, smooth_l1, softmax, Matrix, ProbVector};
use proptest::prelude::*;

const PREC: usize = 256;

fn big(x: f64) -> FBig {
    FBig::try_from(x).unwrap().with_precision(PREC).value()
}

fn small(x: &FBig) -> f64 {
    x.to_f64().value()
}

fn big_softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let t = big(tau);
    let e: Vec<FBig> = z.iter().map(|v| (big(*v) / t.clone()).exp()).collect();
    let s = e.iter().fold(big(0.0), |a, b| a + b.clone());
    e.iter().map(|v| small(&(v.clone() / s.clone()))).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_matches_reference(
        z in proptest::collection::vec(-30.0f64..30.0, 1..12),
        tau in 0.1f64..5.0,
    ) {
        let got = softmax(&z, tau).unwrap();
        let want = big_softmax(&z, tau);
        for (g, w) in got.probs().iter().zip(&want) {
            if *w > 1e-200 {
                prop_assert!(rel_err(*g, *w) < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn softmax_invariants(z in proptest::collection::vec(-50.0f64..50.0, 2..10), shift in -100.0f64..100.0) {
        let p = softmax(&z, 1.0).unwrap();
        prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let q = softmax(&shifted, 1.0).unwrap();
        prop_assert!(p.total_variation(&q) < 1e-12);
        let cold = softmax(&z, 1e-4).unwrap();
        let hot = softmax(&z, 0.0).unwrap();
        let gap = {
            let mut s = z.clone();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            s[0] - s[1]
        };
        if gap > 0.1 {
            prop_assert!(cold.total_variation(&hot) < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_matches_reference(
        a in proptest::collection::vec(0.01f64..1.0, 5),
        b in proptest::collection::vec(0.0f64..1.0, 5),
    ) {
        prop_assume!(b.iter().sum::<f64>() > 0.1);
        let p = ProbVector::from_weights(a).unwrap();
        let t = ProbVector::from_weights(b).unwrap();
        let got = cross_entropy(&p, &t).unwrap();
        let want = p
            .probs()
            .iter()
            .zip(t.probs())
            .fold(big(0.0), |acc, (pi, ti)| acc - big(*ti) * big(*pi).ln());
        prop_assert!(rel_err(got, small(&want)) < 1e-12);
    }

    #[test]
    fn smooth_l1_matches_reference(
        x in proptest::collection::vec(-4.0f64..4.0, 6),
        y in proptest::collection::vec(-4.0f64..4.0, 6),
    ) {
        let got = smooth_l1(&Matrix::new(2, 3, x.clone()).unwrap(), &Matrix::new(2, 3, y.clone()).unwrap()).unwrap();
        let mut acc = big(0.0);
        for (a, b) in x.iter().zip(&y) {
            let d = big(*a) - big(*b);
            let ad = if small(&d) < 0.0 { -d.clone() } else { d.clone() };
            acc += if small(&ad) < 1.0 { big(0.5) * d.clone() * d } else { ad - big(0.5) };
        }
        let want = small(&(acc / big(6.0)));
        prop_assert!((got - want).abs() < 1e-14 * want.abs().max(1.0));
    }
}

#[test]
fn cross_entropy_clamps_zero_predictions() {
    let p = ProbVector::new(vec![1.0, 0.0]).unwrap();
    let t = ProbVector::new(vec![0.5, 0.5]).unwrap();
    let ce = cross_entropy(&p, &t).unwrap();
    assert!(ce.is_finite());
    assert!((ce - 0.5 * -(1e-12f64.ln())).abs() < 1e-9);
}

#[test]
fn extreme_logits_stay_finite() {
    let p = softmax(&[1e300, -1e300, 0.0], 1.0).unwrap();
    assert_eq!(p.probs(), &[1.0, 0.0, 0.0]);
    assert!(softmax(&[f64::NAN, 0.0], 1.0).is_err());
    assert!(softmax(&[0.0, 1.0], -1.0).is_err());
}
