//! Labeled synthetic test sets with known calibration.
//!
//! Each point belongs to a [`Region`]: a Gaussian blob in feature space with
//! its own confidence range and misclassification rule. Predicted classes are
//! `pos`/`neg` with equal probability, and the true label disagrees with the
//! prediction with the region's error probability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{TestPoint, TestSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Accuracy {
    /// Correct with probability equal to the stated confidence.
    Calibrated,
    /// Correct with a fixed probability.
    Fixed(f64),
    /// Wrong with probability `factor · (1 − c)`, capped at 1.
    Overconfident { factor: f64 },
}

impl Accuracy {
    fn error_rate(self, c: f64) -> f64 {
        match self {
            Accuracy::Calibrated => 1.0 - c,
            Accuracy::Fixed(a) => 1.0 - a,
            Accuracy::Overconfident { factor } => (factor * (1.0 - c)).min(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    /// Relative share of points.
    pub weight: f64,
    pub center: Vec<f64>,
    /// Standard deviation of each feature around the center.
    pub spread: f64,
    /// Confidences are uniform on this interval.
    pub confidence: (f64, f64),
    pub accuracy: Accuracy,
}

/// Draws `n` points from the weighted regions. Region sizes are fixed
/// (largest remainder), so only positions, confidences and labels are random.
pub fn mixture(n: usize, regions: &[Region], seed: u64) -> Result<TestSet> {
    if regions.is_empty() || n == 0 {
        return Err(Error::Empty("synthetic set needs at least one region and one point".into()));
    }
    let dim = regions[0].center.len();
    if regions.iter().any(|r| r.center.len() != dim) {
        return Err(Error::Dimension("region centers differ in dimension".into()));
    }
    for r in regions {
        let (lo, hi) = r.confidence;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Domain(format!("confidence range [{lo}, {hi}] outside [0, 1]")));
        }
        if !(r.weight >= 0.0 && r.spread >= 0.0) {
            return Err(Error::Domain("region weight and spread must be non-negative".into()));
        }
    }
    let total: f64 = regions.iter().map(|r| r.weight).sum();
    if total <= 0.0 {
        return Err(Error::Domain("region weights sum to zero".into()));
    }

    let exact: Vec<f64> = regions.iter().map(|r| r.weight / total * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..regions.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let short = n - sizes.iter().sum::<usize>();
    for &r in order.iter().take(short) {
        sizes[r] += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for (region, &size) in regions.iter().zip(&sizes) {
        for _ in 0..size {
            let features: Vec<f64> = region
                .center
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + region.spread * z
                })
                .collect();
            let (lo, hi) = region.confidence;
            let c = lo + (hi - lo) * rng.random::<f64>();
            let predicted = if rng.random::<bool>() { "pos" } else { "neg" };
            let wrong = rng.random::<f64>() < region.accuracy.error_rate(c);
            let truth = match (predicted, wrong) {
                ("pos", false) | ("neg", true) => "pos",
                _ => "neg",
            };
            points.push((features, c, predicted, truth));
        }
    }

    // Shuffle so ids carry no information about regions.
    for i in (1..points.len()).rev() {
        let j = rng.random_range(0..=i);
        points.swap(i, j);
    }
    let width = n.to_string().len();
    TestSet::new(
        points
            .into_iter()
            .enumerate()
            .map(|(i, (f, c, p, t))| {
                TestPoint::new(format!("x{i:0width$}"), f, c, p).with_true_label(t)
            })
            .collect(),
    )
}

/// Every point misclassified independently with probability `1 − c`.
pub fn calibrated_null(n: usize, seed: u64) -> Result<TestSet> {
    mixture(
        n,
        &[Region {
            weight: 1.0,
            center: vec![0.0, 0.0],
            spread: 1.0,
            confidence: (0.5, 1.0),
            accuracy: Accuracy::Calibrated,
        }],
        seed,
    )
}

/// A calibrated low-confidence background (c in [0.65, 0.75]) plus a tight,
/// distant blob at c ≈ 0.9 whose true accuracy is only 0.5.
pub fn planted_high_confidence(n: usize, seed: u64) -> Result<TestSet> {
    mixture(
        n,
        &[
            Region {
                weight: 0.8,
                center: vec![0.0, 0.0],
                spread: 1.0,
                confidence: (0.65, 0.75),
                accuracy: Accuracy::Calibrated,
            },
            Region {
                weight: 0.2,
                center: vec![4.0, 4.0],
                spread: 0.3,
                confidence: (0.88, 0.92),
                accuracy: Accuracy::Fixed(0.5),
            },
        ],
        seed,
    )
}

/// Overconfidence just above τ = 0.65: points in c ∈ [0.65, 0.72] err at
/// 1.6 times the stated rate; the higher-confidence remainder is calibrated.
pub fn planted_low_confidence(n: usize, seed: u64) -> Result<TestSet> {
    mixture(
        n,
        &[
            Region {
                weight: 0.7,
                center: vec![0.0, 0.0],
                spread: 1.0,
                confidence: (0.65, 0.72),
                accuracy: Accuracy::Overconfident { factor: 1.6 },
            },
            Region {
                weight: 0.3,
                center: vec![0.0, 0.0],
                spread: 1.0,
                confidence: (0.72, 0.95),
                accuracy: Accuracy::Calibrated,
            },
        ],
        seed,
    )
}

/// Errors concentrated among low-confidence points spread over the whole
/// feature space; high-confidence points are nearly always right.
pub fn low_confidence_errors(n: usize, seed: u64) -> Result<TestSet> {
    mixture(
        n,
        &[
            Region {
                weight: 0.4,
                center: vec![0.0, 0.0],
                spread: 1.5,
                confidence: (0.65, 0.70),
                accuracy: Accuracy::Fixed(0.35),
            },
            Region {
                weight: 0.6,
                center: vec![0.0, 0.0],
                spread: 1.5,
                confidence: (0.8, 1.0),
                accuracy: Accuracy::Fixed(0.98),
            },
        ],
        seed,
    )
}
