//! Estimators of φ(x) = P(y_x ≠ M(x) | Q), the chance a point is
//! misclassified given the labels gathered so far.
//!
//! Three estimators are available:
//! - the prior `1 − c_x`,
//! - a logistic regression on `[c_x, x_1..x_p]` (no free intercept by
//!   default) fitted by ridge-damped IRLS, and
//! - Laplace-smoothed unknown-unknown rates within k-means clusters of
//!   `[x_1..x_p, c_x]`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dataset::{TestPoint, TestSet};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeans};
use crate::utility::SearchState;

pub const DEFAULT_RIDGE: f64 = 1e-4;
pub const KMEANS_ITERATIONS: usize = 50;

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhiModel {
    Prior,
    Logistic(LogisticModel),
    ClusterRates(ClusterRates),
}

impl PhiModel {
    pub fn kind(&self) -> &'static str {
        match self {
            PhiModel::Prior => "prior",
            PhiModel::Logistic(_) => "logistic",
            PhiModel::ClusterRates(_) => "cluster_rates",
        }
    }
}

/// Prior misclassification probability `1 − c`.
pub fn prior_phi(c: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::Domain(format!("confidence {c} outside [0, 1]")));
    }
    Ok(1.0 - c)
}

pub fn predict_phi(model: &PhiModel, point: &TestPoint) -> Result<f64> {
    match model {
        PhiModel::Prior => prior_phi(point.confidence()),
        PhiModel::Logistic(m) => m.predict(point),
        PhiModel::ClusterRates(r) => r.predict(point),
    }
}

#[inline]
pub(crate) fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticOptions {
    pub ridge: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Adds a free intercept column to the design.
    pub intercept: bool,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            ridge: DEFAULT_RIDGE,
            tol: 1e-8,
            max_iter: 100,
            intercept: false,
        }
    }
}

/// Result of a ridge-damped IRLS fit on an arbitrary design matrix.
#[derive(Debug, Clone)]
pub struct IrlsFit {
    pub beta: DVector<f64>,
    pub standard_errors: DVector<f64>,
    /// Penalized log-likelihood after each accepted iteration, starting at β = 0.
    pub log_likelihood_path: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// The fitted linear predictor classifies every training row correctly.
    pub separable: bool,
}

/// `Σ [y·η − log(1 + e^η)] − (ridge/2)·‖β‖²`.
pub fn penalized_log_likelihood(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, ridge: f64) -> f64 {
    let eta = x * beta;
    let ll: f64 = eta
        .iter()
        .zip(y)
        .map(|(&e, &yi)| yi * e - softplus(e))
        .sum();
    ll - 0.5 * ridge * beta.norm_squared()
}

/// Maximizes the ridge-penalized logistic log-likelihood by Newton/IRLS steps
/// with step halving, so the objective never decreases.
pub fn fit_logistic_design(x: &DMatrix<f64>, y: &[f64], opts: &LogisticOptions) -> Result<IrlsFit> {
    let (n, p) = x.shape();
    if n != y.len() {
        return Err(Error::Dimension(format!("{n} design rows for {} outcomes", y.len())));
    }
    if n == 0 || p == 0 {
        return Err(Error::FitUnavailable("empty design".into()));
    }
    let yv = DVector::from_column_slice(y);
    let mut beta = DVector::zeros(p);
    let mut current = penalized_log_likelihood(x, y, &beta, opts.ridge);
    let mut path = vec![current];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iter {
        iterations += 1;
        let eta = x * &beta;
        let prob = eta.map(logistic);
        let weights = prob.map(|q| q * (1.0 - q));
        let gradient = x.transpose() * (&yv - &prob) - opts.ridge * &beta;
        let hessian = weighted_gram(x, &weights, opts.ridge);
        let Some(step) = hessian.cholesky().map(|c| c.solve(&gradient)) else {
            return Err(Error::FitUnavailable("information matrix is not positive definite".into()));
        };

        let mut t = 1.0;
        let mut candidate = &beta + t * &step;
        let mut value = penalized_log_likelihood(x, y, &candidate, opts.ridge);
        while value < current && t > 1e-10 {
            t *= 0.5;
            candidate = &beta + t * &step;
            value = penalized_log_likelihood(x, y, &candidate, opts.ridge);
        }
        let moved = (t * &step).amax();
        if value >= current {
            beta = candidate;
            current = value;
            path.push(current);
        }
        if moved < opts.tol || value < current {
            converged = moved < opts.tol;
            break;
        }
    }

    let eta = x * &beta;
    let weights = eta.map(|e| {
        let q = logistic(e);
        q * (1.0 - q)
    });
    let info = weighted_gram(x, &weights, opts.ridge);
    let standard_errors = match info.clone().try_inverse() {
        Some(inv) => inv.diagonal().map(|v| v.max(0.0).sqrt()),
        None => DVector::from_element(p, f64::INFINITY),
    };
    let separable = eta
        .iter()
        .zip(y)
        .all(|(&e, &yi)| if yi > 0.5 { e > 0.0 } else { e < 0.0 });

    Ok(IrlsFit {
        beta,
        standard_errors,
        log_likelihood_path: path,
        iterations,
        converged,
        separable,
    })
}

fn weighted_gram(x: &DMatrix<f64>, weights: &DVector<f64>, ridge: f64) -> DMatrix<f64> {
    let p = x.ncols();
    let mut h = DMatrix::from_diagonal_element(p, p, ridge);
    for (row, &w) in x.row_iter().zip(weights.iter()) {
        for a in 0..p {
            let ra = row[a] * w;
            for b in 0..=a {
                h[(a, b)] += ra * row[b];
            }
        }
    }
    h.fill_upper_triangle_with_lower_triangle();
    h
}

/// Logistic φ̂ model: `logistic(c·β₀ + Σ x_j·β_j [+ intercept])`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogisticModel {
    /// `[β_confidence, β_1, ..., β_p]`.
    pub coefficients: Vec<f64>,
    pub intercept: Option<f64>,
    /// Aligned with `coefficients`, followed by the intercept's when present.
    pub standard_errors: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub separable: bool,
}

impl LogisticModel {
    pub fn linear_predictor(&self, point: &TestPoint) -> Result<f64> {
        let features = point.features();
        if features.len() + 1 != self.coefficients.len() {
            return Err(Error::Dimension(format!(
                "model expects {} features, point `{}` has {}",
                self.coefficients.len() - 1,
                point.id(),
                features.len()
            )));
        }
        let mut z = point.confidence() * self.coefficients[0];
        for (x, b) in features.iter().zip(&self.coefficients[1..]) {
            z += x * b;
        }
        Ok(z + self.intercept.unwrap_or(0.0))
    }

    pub fn predict(&self, point: &TestPoint) -> Result<f64> {
        Ok(logistic(self.linear_predictor(point)?))
    }
}

fn design_row(point: &TestPoint, intercept: bool) -> impl Iterator<Item = f64> + '_ {
    std::iter::once(point.confidence())
        .chain(point.features().iter().copied())
        .chain(intercept.then_some(1.0))
}

/// Fits the logistic φ̂ model on the queried points, with the
/// unknown-unknown indicator as response.
///
/// Fails with [`Error::FitUnavailable`] until the query set holds at least
/// one unknown unknown and one other answer.
pub fn fit_logistic(ts: &TestSet, state: &SearchState, opts: &LogisticOptions) -> Result<LogisticModel> {
    state.check(ts)?;
    let uu = state.uus().len();
    if uu == 0 || uu == state.len() {
        return Err(Error::FitUnavailable(
            "need at least one unknown unknown and one other answer".into(),
        ));
    }
    let cols = ts.dim() + 1 + usize::from(opts.intercept);
    let rows = state.len();
    let x = DMatrix::from_row_iterator(
        rows,
        cols,
        state
            .queried()
            .iter()
            .flat_map(|&i| design_row(ts.point(i), opts.intercept)),
    );
    let y: Vec<f64> = state
        .queried()
        .iter()
        .zip(state.labels())
        .map(|(&i, label)| if ts.is_unknown_unknown(i, label) { 1.0 } else { 0.0 })
        .collect();

    let fit = fit_logistic_design(&x, &y, opts)?;
    if fit.separable {
        log::debug!("logistic φ̂ fit on separable query set; ridge-damped solution used");
    }
    let mut coefficients: Vec<f64> = fit.beta.iter().copied().collect();
    let intercept = opts.intercept.then(|| coefficients.pop().unwrap_or(0.0));
    Ok(LogisticModel {
        coefficients,
        intercept,
        standard_errors: fit.standard_errors.iter().copied().collect(),
        iterations: fit.iterations,
        converged: fit.converged,
        separable: fit.separable,
    })
}

/// Per-cluster query and discovery counts over a fixed k-means partition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterRates {
    #[serde(flatten)]
    clustering: KMeans,
    #[serde(skip)]
    assignments: BTreeMap<String, usize>,
    queried: Vec<usize>,
    uus: Vec<usize>,
}

impl ClusterRates {
    /// Clusters `[features, confidence]` of every point; no observations yet.
    pub fn new(ts: &TestSet, k: usize, seed: u64) -> Result<Self> {
        let data: Vec<Vec<f64>> = ts.points().iter().map(cluster_coordinates).collect();
        let clustering = kmeans(&data, k, KMEANS_ITERATIONS, seed)?;
        let assignments = ts
            .points()
            .iter()
            .zip(&clustering.assignments)
            .map(|(p, &c)| (p.id().to_string(), c))
            .collect();
        Ok(Self {
            queried: vec![0; k],
            uus: vec![0; k],
            clustering,
            assignments,
        })
    }

    pub fn k(&self) -> usize {
        self.queried.len()
    }

    /// Cluster of the point at row `idx` of the clustered test set.
    pub fn cluster_of(&self, idx: usize) -> usize {
        self.clustering.assignments[idx]
    }

    pub fn observe(&mut self, cluster: usize, is_uu: bool) {
        self.queried[cluster] += 1;
        if is_uu {
            self.uus[cluster] += 1;
        }
    }

    pub fn queried_count(&self, cluster: usize) -> usize {
        self.queried[cluster]
    }

    pub fn uu_count(&self, cluster: usize) -> usize {
        self.uus[cluster]
    }

    /// Laplace-smoothed rate, or the prior `1 − c` for an unqueried cluster.
    pub fn rate(&self, cluster: usize, confidence: f64) -> f64 {
        let q = self.queried[cluster];
        if q == 0 {
            1.0 - confidence
        } else {
            (self.uus[cluster] + 1) as f64 / (q + 2) as f64
        }
    }

    pub fn predict(&self, point: &TestPoint) -> Result<f64> {
        let dim = self.clustering.centroids[0].len();
        if point.features().len() + 1 != dim {
            return Err(Error::Dimension(format!(
                "clusters span {} features, point `{}` has {}",
                dim - 1,
                point.id(),
                point.features().len()
            )));
        }
        let cluster = match self.assignments.get(point.id()) {
            Some(&c) => c,
            None => self.clustering.nearest(&cluster_coordinates(point)),
        };
        Ok(self.rate(cluster, point.confidence()))
    }
}

fn cluster_coordinates(p: &TestPoint) -> Vec<f64> {
    let mut v = p.features().to_vec();
    v.push(p.confidence());
    v
}

/// Clusters the test set and tallies the state's answers per cluster.
pub fn fit_cluster_rates(ts: &TestSet, state: &SearchState, k: usize, seed: u64) -> Result<PhiModel> {
    state.check(ts)?;
    let mut rates = ClusterRates::new(ts, k, seed)?;
    for (&i, label) in state.queried().iter().zip(state.labels()) {
        rates.observe(rates.cluster_of(i), ts.is_unknown_unknown(i, label));
    }
    Ok(PhiModel::ClusterRates(rates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prior_values() {
        assert_relative_eq!(prior_phi(0.65).unwrap(), 0.35, epsilon = 1e-15);
        assert_eq!(prior_phi(1.0).unwrap(), 0.0);
        assert_eq!(prior_phi(0.0).unwrap(), 1.0);
        assert!(prior_phi(1.5).is_err());
    }

    #[test]
    fn logistic_prediction_examples() {
        let p = TestPoint::new("a", vec![0.0, 0.0], 0.0, "x");
        let zero = LogisticModel {
            coefficients: vec![0.0; 3],
            intercept: None,
            standard_errors: vec![],
            iterations: 0,
            converged: true,
            separable: false,
        };
        assert_eq!(zero.predict(&TestPoint::new("b", vec![3.0, -1.0], 0.7, "x")).unwrap(), 0.5);
        let m = LogisticModel {
            coefficients: vec![1.0, 0.0, 0.0],
            ..zero.clone()
        };
        assert_eq!(m.predict(&p).unwrap(), 0.5);
        let wrong_dim = TestPoint::new("c", vec![1.0], 0.5, "x");
        assert!(matches!(m.predict(&wrong_dim), Err(Error::Dimension(_))));
    }

    #[test]
    fn logistic_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let coefficients: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let features: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let c: f64 = rng.random_range(0.0..1.0);
            let model = LogisticModel {
                coefficients: coefficients.clone(),
                intercept: None,
                standard_errors: vec![],
                iterations: 0,
                converged: true,
                separable: false,
            };
            let z = c * coefficients[0]
                + features[0] * coefficients[1]
                + features[1] * coefficients[2]
                + features[2] * coefficients[3];
            let naive = z.exp() / (1.0 + z.exp());
            let p = TestPoint::new("p", features, c, "x");
            assert!((model.predict(&p).unwrap() - naive).abs() <= 1e-12);
        }
    }

    fn blob_set() -> TestSet {
        let mut points = Vec::new();
        for i in 0..8 {
            points.push(TestPoint::new(format!("a{i}"), vec![i as f64 * 0.01, 0.0], 0.8, "pos"));
            points.push(TestPoint::new(format!("b{i}"), vec![50.0 + i as f64 * 0.01, 50.0], 0.8, "pos"));
        }
        TestSet::new(points).unwrap()
    }

    #[test]
    fn single_cluster_smoothing() {
        let ts = blob_set();
        let mut state = SearchState::new(&ts);
        let model = fit_cluster_rates(&ts, &state, 1, 0).unwrap();
        assert_relative_eq!(predict_phi(&model, ts.point(0)).unwrap(), 0.2, epsilon = 1e-15);

        for (i, label) in [(0, "neg"), (1, "neg"), (2, "pos"), (3, "pos")] {
            state.record(&ts, i, label).unwrap();
        }
        let model = fit_cluster_rates(&ts, &state, 1, 0).unwrap();
        for p in ts.points() {
            assert_relative_eq!(predict_phi(&model, p).unwrap(), 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn two_blob_rates() {
        let ts = blob_set();
        let mut state = SearchState::new(&ts);
        // Rows alternate a0, b0, a1, b1, ...
        for i in 0..4 {
            state.record(&ts, 2 * i, "neg").unwrap();
            state.record(&ts, 2 * i + 1, "pos").unwrap();
        }
        let model = fit_cluster_rates(&ts, &state, 2, 3).unwrap();
        assert_relative_eq!(predict_phi(&model, ts.point(10)).unwrap(), 5.0 / 6.0, epsilon = 1e-15);
        assert_relative_eq!(predict_phi(&model, ts.point(11)).unwrap(), 1.0 / 6.0, epsilon = 1e-15);
        // A point outside the clustered set is routed to its nearest centroid.
        let outside = TestPoint::new("new", vec![49.0, 50.0], 0.8, "pos");
        assert_relative_eq!(predict_phi(&model, &outside).unwrap(), 1.0 / 6.0, epsilon = 1e-15);
        assert!(fit_cluster_rates(&ts, &state, 17, 3).is_err());
    }

    #[test]
    fn fit_requires_both_outcomes() {
        let ts = blob_set();
        let mut state = SearchState::new(&ts);
        state.record(&ts, 0, "neg").unwrap();
        assert!(matches!(
            fit_logistic(&ts, &state, &LogisticOptions::default()),
            Err(Error::FitUnavailable(_))
        ));
        state.record(&ts, 1, "pos").unwrap();
        let m = fit_logistic(&ts, &state, &LogisticOptions::default()).unwrap();
        assert!(m.separable);
        assert!(m.coefficients.iter().all(|b| b.is_finite()));
        assert_eq!(m.coefficients.len(), 3);
    }

    #[test]
    fn intercept_variant_adds_a_term() {
        let ts = blob_set();
        let mut state = SearchState::new(&ts);
        for i in 0..6 {
            state.record(&ts, i, if i % 3 == 0 { "neg" } else { "pos" }).unwrap();
        }
        let opts = LogisticOptions {
            intercept: true,
            ..LogisticOptions::default()
        };
        let m = fit_logistic(&ts, &state, &opts).unwrap();
        assert!(m.intercept.is_some());
        assert_eq!(m.standard_errors.len(), 4);
        let p = m.predict(ts.point(7)).unwrap();
        assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn log_likelihood_never_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 60;
        let x = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-2.0..2.0));
        let y: Vec<f64> = (0..n).map(|i| if x[(i, 0)] + rng.random_range(-1.0..1.0) > 0.0 { 1.0 } else { 0.0 }).collect();
        let fit = fit_logistic_design(&x, &y, &LogisticOptions::default()).unwrap();
        assert!(fit.converged);
        for w in fit.log_likelihood_path.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }
}
