//! Test sets of black-box predictions and the distance primitives every
//! utility computation is built on.
//!
//! A [`TestSet`] is immutable once constructed. Oracle labels, when present,
//! are kept private to this module and only leave it through
//! [`TestSet::ground_truth`], which is what simulated oracles and offline
//! evaluation consume. Search and estimator code never calls it.

mod io;

pub use io::{load_testset, write_testset, Format};

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One unlabeled prediction of the audited classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TestPoint {
    id: String,
    features: Vec<f64>,
    confidence: f64,
    predicted_class: String,
    true_label: Option<String>,
    display_uri: Option<String>,
}

impl TestPoint {
    pub fn new(
        id: impl Into<String>,
        features: Vec<f64>,
        confidence: f64,
        predicted_class: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            features,
            confidence,
            predicted_class: predicted_class.into(),
            true_label: None,
            display_uri: None,
        }
    }

    /// Attaches the hidden label a simulated oracle will answer with.
    pub fn with_true_label(mut self, label: impl Into<String>) -> Self {
        self.true_label = Some(label.into());
        self
    }

    pub fn with_display_uri(mut self, uri: impl Into<String>) -> Self {
        self.display_uri = Some(uri.into());
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn predicted_class(&self) -> &str {
        &self.predicted_class
    }

    pub fn display_uri(&self) -> Option<&str> {
        self.display_uri.as_deref()
    }

    pub fn has_true_label(&self) -> bool {
        self.true_label.is_some()
    }
}

/// Hidden labels of a test set, indexed like its points.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    ids: Vec<String>,
    labels: Vec<Option<String>>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, idx: usize) -> Option<&str> {
        self.labels.get(idx).and_then(|l| l.as_deref())
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.ids[idx]
    }

    /// Ids of points without a label, in row order.
    pub fn missing(&self) -> Vec<&str> {
        self.ids
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| l.is_none())
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Validated, immutable collection of test points sharing one feature space.
#[derive(Debug, Clone)]
pub struct TestSet {
    points: Vec<TestPoint>,
    dim: usize,
    critical_class: Option<String>,
    index: HashMap<String, usize>,
    id_rank: Vec<usize>,
}

impl PartialEq for TestSet {
    fn eq(&self, other: &Self) -> bool {
        self.points == other.points && self.critical_class == other.critical_class
    }
}

impl TestSet {
    pub fn new(points: Vec<TestPoint>) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::Empty("a test set needs at least one point".into()))?;
        let dim = first.features.len();

        let mut index = HashMap::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            if p.features.len() != dim {
                return Err(Error::Dimension(format!(
                    "row `{}` has {} features, expected {dim}",
                    p.id,
                    p.features.len()
                )));
            }
            if !(0.0..=1.0).contains(&p.confidence) {
                return Err(Error::Validation {
                    row: p.id.clone(),
                    message: format!("confidence {} outside [0, 1]", p.confidence),
                });
            }
            if p.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation {
                    row: p.id.clone(),
                    message: "non-finite feature value".into(),
                });
            }
            if index.insert(p.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(p.id.clone()));
            }
        }

        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| points[a].id.cmp(&points[b].id));
        let mut id_rank = vec![0; points.len()];
        for (rank, &i) in order.iter().enumerate() {
            id_rank[i] = rank;
        }

        Ok(Self {
            points,
            dim,
            critical_class: None,
            index,
            id_rank,
        })
    }

    /// Restricts unknown unknowns to misclassifications predicted as `class`.
    pub fn with_critical_class(mut self, class: impl Into<String>) -> Self {
        let class = class.into();
        if !self.points.iter().any(|p| p.predicted_class == class) {
            log::warn!("critical class `{class}` is never predicted in this test set");
        }
        self.critical_class = Some(class);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Feature dimension p.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[TestPoint] {
        &self.points
    }

    pub fn point(&self, idx: usize) -> &TestPoint {
        &self.points[idx]
    }

    pub fn critical_class(&self) -> Option<&str> {
        self.critical_class.as_deref()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Position of point `idx` when all ids are sorted ascending.
    /// Used for lowest-id tie-breaking.
    pub fn id_rank(&self, idx: usize) -> usize {
        self.id_rank[idx]
    }

    /// Point indices ordered by ascending id.
    pub fn indices_by_id(&self) -> Vec<usize> {
        let mut order = vec![0; self.len()];
        for (i, &r) in self.id_rank.iter().enumerate() {
            order[r] = i;
        }
        order
    }

    /// Whether an oracle answer `label` for point `idx` makes it an unknown unknown.
    pub fn is_unknown_unknown(&self, idx: usize, label: &str) -> bool {
        let predicted = &self.points[idx].predicted_class;
        label != predicted
            && self
                .critical_class
                .as_deref()
                .is_none_or(|critical| predicted == critical)
    }

    /// Whether point `idx` can become an unknown unknown at all.
    pub fn in_critical_class(&self, idx: usize) -> bool {
        self.critical_class
            .as_deref()
            .is_none_or(|critical| self.points[idx].predicted_class == critical)
    }

    /// Every class name observed among predictions, plus the critical class.
    pub fn predicted_classes(&self) -> BTreeSet<String> {
        let mut classes: BTreeSet<String> = self
            .points
            .iter()
            .map(|p| p.predicted_class.clone())
            .collect();
        if let Some(c) = &self.critical_class {
            classes.insert(c.clone());
        }
        classes
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            ids: self.points.iter().map(|p| p.id.clone()).collect(),
            labels: self.points.iter().map(|p| p.true_label.clone()).collect(),
        }
    }

    /// Replaces the feature vectors, keeping every other field.
    pub fn with_features(&self, features: Vec<Vec<f64>>) -> Result<Self> {
        if features.len() != self.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows for {} points",
                features.len(),
                self.len()
            )));
        }
        let points = self
            .points
            .iter()
            .zip(features)
            .map(|(p, f)| TestPoint {
                features: f,
                ..p.clone()
            })
            .collect();
        let mut ts = Self::new(points)?;
        ts.critical_class = self.critical_class.clone();
        Ok(ts)
    }

    /// Largest pairwise Euclidean distance; zero for a single point.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                best = best.max(euclid(&self.points[i].features, &self.points[j].features));
            }
        }
        best
    }
}

/// Uniform sample of `n` points without replacement. The chosen points keep
/// their original relative order.
pub fn sample_testset(ts: &TestSet, n: usize, seed: u64) -> Result<TestSet> {
    if n == 0 || n > ts.len() {
        return Err(Error::SampleSize {
            requested: n,
            available: ts.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, ts.len(), n).into_vec();
    chosen.sort_unstable();
    let points = chosen.into_iter().map(|i| ts.points[i].clone()).collect();
    let mut out = TestSet::new(points)?;
    out.critical_class = ts.critical_class.clone();
    Ok(out)
}

/// Euclidean distance between two feature vectors of equal length.
pub fn euclidean_distance(x: &[f64], q: &[f64]) -> Result<f64> {
    if x.len() != q.len() {
        return Err(Error::Dimension(format!(
            "cannot compare vectors of length {} and {}",
            x.len(),
            q.len()
        )));
    }
    Ok(euclid(x, q))
}

#[inline]
pub(crate) fn euclid(x: &[f64], q: &[f64]) -> f64 {
    x.iter()
        .zip(q)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Dense symmetric matrix of pairwise distances for one test set.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(ts: &TestSet) -> Self {
        let n = ts.len();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = euclid(ts.points[i].features(), ts.points[j].features());
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        Self { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn diameter(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

/// Serializable mirror of a [`TestPoint`] used by the JSONL format and the
/// service's upload endpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PointRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub confidence: f64,
    pub predicted_class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display_uri: Option<String>,
}

impl From<PointRecord> for TestPoint {
    fn from(r: PointRecord) -> Self {
        TestPoint {
            id: r.id,
            features: r.features,
            confidence: r.confidence,
            predicted_class: r.predicted_class,
            true_label: r.true_label,
            display_uri: r.display_uri,
        }
    }
}

impl From<&TestPoint> for PointRecord {
    fn from(p: &TestPoint) -> Self {
        PointRecord {
            id: p.id.clone(),
            features: p.features.clone(),
            confidence: p.confidence,
            predicted_class: p.predicted_class.clone(),
            true_label: p.true_label.clone(),
            display_uri: p.display_uri.clone(),
        }
    }
}
