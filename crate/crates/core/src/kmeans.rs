//! Seeded Lloyd's k-means with k-means++ initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    #[serde(skip)]
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Index of the centroid nearest to `x`; lower index wins ties.
    pub fn nearest(&self, x: &[f64]) -> usize {
        nearest(&self.centroids, x)
    }
}

pub fn kmeans(data: &[Vec<f64>], k: usize, max_iter: usize, seed: u64) -> Result<KMeans> {
    let n = data.len();
    if k == 0 || k > n {
        return Err(Error::Dimension(format!(
            "cannot form {k} clusters from {n} points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(data, k, &mut rng);
    let mut assignments: Vec<usize> = data.iter().map(|x| nearest(&centroids, x)).collect();

    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let dim = data[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &a) in data.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..k {
            // Empty clusters keep their previous centroid.
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = data.iter().map(|x| nearest(&centroids, x)).collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }

    Ok(KMeans {
        centroids,
        assignments,
        iterations,
    })
}

fn plus_plus_init(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![data[rng.random_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = data.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // All remaining mass sits on existing centroids.
            rng.random_range(0..data.len())
        };
        centroids.push(data[pick].clone());
        for (x, d) in data.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(x, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(x, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
