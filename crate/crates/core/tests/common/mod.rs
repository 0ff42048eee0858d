//! Shared fixtures and naive reference implementations for integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use uufind::{TestPoint, TestSet};

/// Random labeled set; features on a coarse grid so exact ties and
/// duplicate points occur.
pub fn random_testset(rng: &mut ChaCha8Rng, n: usize, p: usize) -> TestSet {
    let points = (0..n)
        .map(|i| {
            let features = (0..p).map(|_| f64::from(rng.random_range(0..4u8)) * 0.5).collect();
            let c = [0.55, 0.7, 0.8, 0.9, 0.95][rng.random_range(0..5)];
            let predicted = if rng.random::<bool>() { "pos" } else { "neg" };
            let truth = if rng.random::<f64>() < 0.4 {
                if predicted == "pos" { "neg" } else { "pos" }
            } else {
                predicted
            };
            TestPoint::new(format!("p{i:02}"), features, c, predicted).with_true_label(truth)
        })
        .collect();
    TestSet::new(points).unwrap()
}

pub fn naive_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s.sqrt()
}

pub fn naive_diameter(ts: &TestSet) -> f64 {
    let mut best: f64 = 0.0;
    for a in ts.points() {
        for b in ts.points() {
            best = best.max(naive_distance(a.features(), b.features()));
        }
    }
    best
}

/// W for discoveries `uus` (indices), from scratch.
pub fn naive_w(ts: &TestSet, uus: &[usize], d_cap: f64) -> f64 {
    let mut reward = 0.0;
    for &q in uus {
        let c = ts.point(q).confidence().min(1.0 - 1e-6);
        reward += (1.0 / (1.0 - c)).ln();
    }
    let mut penalty = 0.0;
    for x in ts.points() {
        let mut m = d_cap;
        for &q in uus {
            m = m.min(naive_distance(x.features(), ts.point(q).features()));
        }
        penalty += m;
    }
    reward - penalty / ts.len() as f64
}

/// U for discoveries `uus`, from scratch.
pub fn naive_u(ts: &TestSet, uus: &[usize]) -> f64 {
    let mut total = 0.0;
    for x in ts.points() {
        let mut best: f64 = 0.0;
        for &q in uus {
            best = best.max((-naive_distance(x.features(), ts.point(q).features())).exp());
        }
        total += x.confidence() * best;
    }
    total
}
