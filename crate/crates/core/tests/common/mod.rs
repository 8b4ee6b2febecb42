#![allow(dead_code)]

use proptest::prelude::*;
use scaledvr::{Dataset, LossKind, SparseRow};

/// Dense dataset with labels in the loss's domain; both classes present
/// whenever `n ≥ 2`.
pub fn dataset_from(x: &[Vec<f64>], signs: &[bool], kind: LossKind) -> Dataset {
    let d = x.first().map_or(0, Vec::len);
    let [neg, pos] = kind.label_domain();
    let n = x.len();
    let labels = signs
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let s = match i {
                0 if n >= 2 => true,
                1 if n >= 2 => false,
                _ => s,
            };
            if s {
                pos
            } else {
                neg
            }
        })
        .collect();
    let rows = x.iter().map(|r| SparseRow::from_dense(r)).collect();
    Dataset::new(rows, labels, d).unwrap()
}

/// Small random instance: `n ≤ max_n`, `d ≤ max_d`, features in [-2, 2].
pub fn instance(
    max_n: usize,
    max_d: usize,
) -> impl Strategy<Value = (LossKind, Vec<Vec<f64>>, Vec<bool>)> {
    (1..=max_n, 1..=max_d).prop_flat_map(|(n, d)| {
        (
            prop_oneof![Just(LossKind::Logistic), Just(LossKind::Nllsq)],
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

pub fn vector(d: usize, range: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-range..range, d)
}

/// The four-sample, three-feature instance used by the reference oracles.
pub fn tiny(kind: LossKind) -> Dataset {
    let x = vec![
        vec![1.0, -0.5, 0.25],
        vec![-0.3, 0.8, 1.1],
        vec![0.6, 0.2, -0.9],
        vec![-1.2, -0.4, 0.5],
    ];
    dataset_from(&x, &[true, false, true, false], kind)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
