//! Derived feature space via truncated SVD.
//!
//! The top-k singular triplets are extracted by power iteration on the
//! smaller Gram matrix, deflating each converged direction by projecting it
//! out of subsequent iterates. Scores are the left singular vectors scaled by
//! their singular values, i.e. the rank-k coordinates of every row.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct SvdOptions {
    /// Subtract column means before factoring.
    pub center: bool,
    /// Seed for the starting vectors.
    pub seed: u64,
    /// Relative eigen-residual at which a direction counts as converged.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvdOptions {
    fn default() -> Self {
        Self {
            center: false,
            seed: 0,
            tol: 1e-12,
            max_iter: 20_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SvdFeatures {
    /// n×k matrix of row scores (U_k Σ_k).
    pub scores: DMatrix<f64>,
    /// Descending singular values.
    pub singular_values: Vec<f64>,
    /// m×k right singular vectors.
    pub right_vectors: DMatrix<f64>,
    /// Column means removed before factoring, when centering was requested.
    pub column_means: Option<DVector<f64>>,
}

impl SvdFeatures {
    /// Rank-k approximation of the (possibly centered) input.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut approx = &self.scores * self.right_vectors.transpose();
        if let Some(means) = &self.column_means {
            for mut row in approx.row_iter_mut() {
                row += means.transpose();
            }
        }
        approx
    }

    /// Scores as one feature vector per row, ready for [`crate::TestSet::with_features`].
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.scores
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }
}

/// The test set's features as an n×p matrix.
pub fn feature_matrix(ts: &crate::TestSet) -> DMatrix<f64> {
    DMatrix::from_fn(ts.len(), ts.dim(), |i, j| ts.point(i).features()[j])
}

pub fn derive_features(raw: &DMatrix<f64>, k: usize, opts: SvdOptions) -> Result<SvdFeatures> {
    let (n, m) = raw.shape();
    if k == 0 || k > n.min(m) {
        return Err(Error::Dimension(format!(
            "target dimension {k} outside 1..={} for a {n}x{m} matrix",
            n.min(m)
        )));
    }
    if let Some(pos) = raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation {
            row: (pos % n).to_string(),
            message: "non-finite entry in feature matrix".into(),
        });
    }

    let mut a = raw.clone();
    let column_means = opts.center.then(|| {
        let means = DVector::from_iterator(m, a.column_iter().map(|c| c.mean()));
        for (j, mut col) in a.column_iter_mut().enumerate() {
            col.add_scalar_mut(-means[j]);
        }
        means
    });

    let (scores, singular_values, right_vectors) = if m <= n {
        let gram = a.transpose() * &a;
        let (vecs, _) = top_eigenvectors(&gram, k, &opts);
        let scores = &a * &vecs;
        let sv = scores.column_iter().map(|c| c.norm()).collect();
        (scores, sv, vecs)
    } else {
        let gram = &a * a.transpose();
        let (u, vals) = top_eigenvectors(&gram, k, &opts);
        let sv: Vec<f64> = vals.iter().map(|l| l.max(0.0).sqrt()).collect();
        let mut scores = u.clone();
        let mut right = a.transpose() * &u;
        for j in 0..k {
            scores.column_mut(j).scale_mut(sv[j]);
            if sv[j] > 0.0 {
                right.column_mut(j).scale_mut(1.0 / sv[j]);
            } else {
                right.column_mut(j).fill(0.0);
            }
        }
        (scores, sv, right)
    };

    Ok(SvdFeatures {
        scores,
        singular_values,
        right_vectors,
        column_means,
    })
}

/// Top-`k` eigenpairs of a symmetric positive semi-definite matrix.
fn top_eigenvectors(gram: &DMatrix<f64>, k: usize, opts: &SvdOptions) -> (DMatrix<f64>, Vec<f64>) {
    let dim = gram.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut values = Vec::with_capacity(k);
    let scale = gram.diagonal().iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);

    for _ in 0..k {
        let mut v = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
        orthogonalize(&mut v, &basis);
        normalize_or_complete(&mut v, &basis);

        let mut lambda = 0.0;
        for _ in 0..opts.max_iter {
            let mut w = gram * &v;
            orthogonalize(&mut w, &basis);
            lambda = v.dot(&w);
            let residual = (&w - lambda * &v).norm();
            let norm = w.norm();
            if norm <= scale * 1e-14 {
                // Remaining spectrum is numerically zero; any orthonormal
                // completion is a valid singular direction.
                lambda = 0.0;
                break;
            }
            let next = w / norm;
            v = next;
            if residual <= opts.tol * scale {
                break;
            }
        }
        orient(&mut v);
        basis.push(v);
        values.push(lambda);
    }

    (DMatrix::from_columns(&basis), values)
}

fn orthogonalize(v: &mut DVector<f64>, basis: &[DVector<f64>]) {
    // Two passes of classical Gram-Schmidt keep the basis orthogonal to
    // working precision.
    for _ in 0..2 {
        for b in basis {
            let proj = b.dot(v);
            v.axpy(-proj, b, 1.0);
        }
    }
}

fn normalize_or_complete(v: &mut DVector<f64>, basis: &[DVector<f64>]) {
    let norm = v.norm();
    if norm > 1e-12 {
        *v /= norm;
        return;
    }
    for i in 0..v.len() {
        let mut e = DVector::zeros(v.len());
        e[i] = 1.0;
        orthogonalize(&mut e, basis);
        let norm = e.norm();
        if norm > 1e-6 {
            *v = e / norm;
            return;
        }
    }
}

/// Flips `v` so its largest-magnitude entry is positive.
fn orient(v: &mut DVector<f64>) {
    let pivot = v.iamax();
    if v[pivot] < 0.0 {
        v.neg_mut();
    }
}
