//! Overconfidence profiles: the rate of correct classification as a smooth
//! function of stated confidence.
//!
//! The default smoother is a cubic smoothing spline fitted with the Reinsch
//! algorithm, its penalty chosen by generalized cross-validation. The trace
//! of the hat matrix comes from the band of the inverse of the Reinsch
//! matrix (Hutchinson and de Hoog), so each GCV evaluation is O(n). Tied
//! confidences are merged into one weighted knot.

use serde::{Deserialize, Serialize};

use crate::dataset::TestSet;
use crate::error::{Error, Result};

pub const MIN_PROFILE_POINTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Smoother {
    /// Cubic smoothing spline. `smoothing` fixes the roughness penalty;
    /// `None` selects it by generalized cross-validation.
    Spline { smoothing: Option<f64> },
    /// Mean accuracy in equal-count bins, linearly interpolated.
    Binned { bins: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    pub smoother: Smoother,
    pub grid_points: usize,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            smoother: Smoother::Spline { smoothing: None },
            grid_points: 101,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverconfidenceProfile {
    pub grid: Vec<f64>,
    pub estimated_accuracy: Vec<f64>,
    /// `grid − estimated_accuracy`.
    pub overconfidence: Vec<f64>,
    /// Points whose confidence is closest to each grid value.
    pub support: Vec<usize>,
    /// Penalty used by the spline, if one was fitted.
    pub smoothing: Option<f64>,
    /// Equivalent degrees of freedom of the spline fit.
    pub effective_df: Option<f64>,
}

/// Smooths the correct-classification indicator of a fully labeled test set
/// against confidence.
pub fn overconfidence_profile(
    labeled: &TestSet,
    opts: &ProfileOptions,
) -> Result<OverconfidenceProfile> {
    if labeled.len() < MIN_PROFILE_POINTS {
        return Err(Error::InsufficientData(format!(
            "an overconfidence profile needs at least {MIN_PROFILE_POINTS} points, got {}",
            labeled.len()
        )));
    }
    if opts.grid_points < 2 {
        return Err(Error::Config("profile grid needs at least 2 points".into()));
    }
    let truth = labeled.ground_truth();
    let mut xy = Vec::with_capacity(labeled.len());
    for (i, p) in labeled.points().iter().enumerate() {
        let label = truth.label(i).ok_or_else(|| Error::Validation {
            row: p.id().to_string(),
            message: "missing true label".into(),
        })?;
        xy.push((p.confidence(), f64::from(u8::from(label == p.predicted_class()))));
    }
    xy.sort_by(|a, b| a.0.total_cmp(&b.0));

    let lo = xy[0].0;
    let hi = xy[xy.len() - 1].0;
    let g = opts.grid_points;
    let grid: Vec<f64> = if hi > lo {
        (0..g)
            .map(|k| (lo + (hi - lo) * k as f64 / (g - 1) as f64).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![lo]
    };

    let (fitted, smoothing, effective_df) = match opts.smoother {
        Smoother::Spline { smoothing } => {
            if let Some(a) = smoothing {
                if !(a.is_finite() && a > 0.0) {
                    return Err(Error::Config(format!("smoothing penalty {a} must be positive")));
                }
            }
            let spline = SmoothingSpline::fit(&xy, smoothing)?;
            let values = grid.iter().map(|&x| spline.eval(x)).collect();
            (values, Some(spline.alpha), Some(spline.effective_df))
        }
        Smoother::Binned { bins } => {
            if bins == 0 {
                return Err(Error::Config("bin count must be at least 1".into()));
            }
            (binned_means(&xy, bins, &grid), None, None)
        }
    };

    let estimated_accuracy: Vec<f64> = fitted.into_iter().map(|v: f64| v.clamp(0.0, 1.0)).collect();
    let overconfidence = grid
        .iter()
        .zip(&estimated_accuracy)
        .map(|(c, a)| c - a)
        .collect();

    let mut support = vec![0usize; grid.len()];
    if grid.len() > 1 {
        let step = (hi - lo) / (grid.len() - 1) as f64;
        for &(x, _) in &xy {
            let k = ((x - lo) / step).round() as usize;
            support[k.min(grid.len() - 1)] += 1;
        }
    } else {
        support[0] = xy.len();
    }

    Ok(OverconfidenceProfile {
        grid,
        estimated_accuracy,
        overconfidence,
        support,
        smoothing,
        effective_df,
    })
}

/// Equal-count bins over sorted `xy`, each summarized by its mean x and
/// mean y, then interpolated linearly (constant beyond the end bins).
fn binned_means(xy: &[(f64, f64)], bins: usize, grid: &[f64]) -> Vec<f64> {
    let n = xy.len();
    let bins = bins.min(n);
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(bins);
    for b in 0..bins {
        let chunk = &xy[b * n / bins..(b + 1) * n / bins];
        let k = chunk.len() as f64;
        let mx = chunk.iter().map(|p| p.0).sum::<f64>() / k;
        let my = chunk.iter().map(|p| p.1).sum::<f64>() / k;
        match centers.last_mut() {
            // Bins sharing one confidence value collapse into a single center.
            Some(last) if last.0 == mx => last.1 = 0.5 * (last.1 + my),
            _ => centers.push((mx, my)),
        }
    }
    grid.iter().map(|&x| interpolate(&centers, x)).collect()
}

fn interpolate(points: &[(f64, f64)], x: f64) -> f64 {
    let first = points[0];
    let last = points[points.len() - 1];
    if x <= first.0 {
        return first.1;
    }
    if x >= last.0 {
        return last.1;
    }
    let k = points.partition_point(|p| p.0 <= x);
    let (x0, y0) = points[k - 1];
    let (x1, y1) = points[k];
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Natural cubic smoothing spline through weighted, strictly increasing knots.
#[derive(Debug, Clone)]
pub(crate) struct SmoothingSpline {
    x: Vec<f64>,
    /// Fitted values at the knots.
    g: Vec<f64>,
    /// Second derivatives at the knots; zero at both ends.
    gamma: Vec<f64>,
    pub alpha: f64,
    pub effective_df: f64,
}

/// Knots with their weights, means and the within-knot sum of squares.
struct Knots {
    x: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    within_ss: f64,
    total_weight: f64,
}

impl Knots {
    fn from_sorted(xy: &[(f64, f64)]) -> Self {
        let mut x: Vec<f64> = Vec::new();
        let mut sums: Vec<(f64, f64, f64)> = Vec::new();
        for &(xi, yi) in xy {
            match x.last() {
                Some(&last) if last == xi => {
                    let s = sums.last_mut().expect("parallel to x");
                    s.0 += 1.0;
                    s.1 += yi;
                    s.2 += yi * yi;
                }
                _ => {
                    x.push(xi);
                    sums.push((1.0, yi, yi * yi));
                }
            }
        }
        let mut within_ss = 0.0;
        let mut y = Vec::with_capacity(x.len());
        let mut w = Vec::with_capacity(x.len());
        for (wi, sy, syy) in sums {
            let mean = sy / wi;
            within_ss += (syy - wi * mean * mean).max(0.0);
            y.push(mean);
            w.push(wi);
        }
        Self {
            x,
            y,
            w,
            within_ss,
            total_weight: xy.len() as f64,
        }
    }
}

/// Banded pieces of the Reinsch formulation for one knot set.
struct Reinsch {
    /// Column j of Q has entries at rows j, j+1, j+2.
    q: Vec<[f64; 3]>,
    /// Diagonal and first off-diagonal of R.
    r_diag: Vec<f64>,
    r_off: Vec<f64>,
    /// Qᵀ W⁻¹ Q as diagonal, first and second off-diagonals.
    k0: Vec<f64>,
    k1: Vec<f64>,
    k2: Vec<f64>,
    /// Qᵀ y.
    qty: Vec<f64>,
}

struct Solution {
    g: Vec<f64>,
    gamma: Vec<f64>,
    trace: f64,
}

impl Reinsch {
    fn new(k: &Knots) -> Self {
        let m = k.x.len();
        let h: Vec<f64> = k.x.windows(2).map(|p| p[1] - p[0]).collect();
        let mm = m - 2;
        let q: Vec<[f64; 3]> = (0..mm)
            .map(|j| [1.0 / h[j], -1.0 / h[j] - 1.0 / h[j + 1], 1.0 / h[j + 1]])
            .collect();
        let r_diag = (0..mm).map(|j| (h[j] + h[j + 1]) / 3.0).collect();
        let r_off = (0..mm.saturating_sub(1)).map(|j| h[j + 1] / 6.0).collect();
        let inv_w: Vec<f64> = k.w.iter().map(|w| 1.0 / w).collect();
        let k0 = (0..mm)
            .map(|j| {
                q[j][0] * q[j][0] * inv_w[j]
                    + q[j][1] * q[j][1] * inv_w[j + 1]
                    + q[j][2] * q[j][2] * inv_w[j + 2]
            })
            .collect();
        let k1 = (0..mm.saturating_sub(1))
            .map(|j| q[j][1] * q[j + 1][0] * inv_w[j + 1] + q[j][2] * q[j + 1][1] * inv_w[j + 2])
            .collect();
        let k2 = (0..mm.saturating_sub(2))
            .map(|j| q[j][2] * q[j + 2][0] * inv_w[j + 2])
            .collect();
        let qty = (0..mm)
            .map(|j| q[j][0] * k.y[j] + q[j][1] * k.y[j + 1] + q[j][2] * k.y[j + 2])
            .collect();
        Self { q, r_diag, r_off, k0, k1, k2, qty }
    }

    fn solve(&self, k: &Knots, alpha: f64) -> Solution {
        let mm = self.q.len();
        let m = mm + 2;
        // B = R + α QᵀW⁻¹Q, pentadiagonal; factor as L D Lᵀ.
        let a: Vec<f64> = (0..mm).map(|j| self.r_diag[j] + alpha * self.k0[j]).collect();
        let b: Vec<f64> = (0..mm.saturating_sub(1))
            .map(|j| self.r_off[j] + alpha * self.k1[j])
            .collect();
        let c: Vec<f64> = (0..mm.saturating_sub(2)).map(|j| alpha * self.k2[j]).collect();

        let mut d = vec![0.0; mm];
        let mut l1 = vec![0.0; mm]; // L[i+1][i]
        let mut l2 = vec![0.0; mm]; // L[i+2][i]
        for i in 0..mm {
            let mut di = a[i];
            if i >= 1 {
                di -= l1[i - 1] * l1[i - 1] * d[i - 1];
            }
            if i >= 2 {
                di -= l2[i - 2] * l2[i - 2] * d[i - 2];
            }
            d[i] = di;
            if i + 1 < mm {
                let mut v = b[i];
                if i >= 1 {
                    v -= l2[i - 1] * l1[i - 1] * d[i - 1];
                }
                l1[i] = v / di;
            }
            if i + 2 < mm {
                l2[i] = c[i] / di;
            }
        }

        // Forward, diagonal and backward substitution for γ.
        let mut z = self.qty.clone();
        for i in 0..mm {
            if i >= 1 {
                z[i] -= l1[i - 1] * z[i - 1];
            }
            if i >= 2 {
                z[i] -= l2[i - 2] * z[i - 2];
            }
        }
        for i in 0..mm {
            z[i] /= d[i];
        }
        for i in (0..mm).rev() {
            if i + 1 < mm {
                z[i] -= l1[i] * z[i + 1];
            }
            if i + 2 < mm {
                z[i] -= l2[i] * z[i + 2];
            }
        }
        let gamma_inner = z;

        // g = y − α W⁻¹ Q γ.
        let mut qg = vec![0.0; m];
        for (j, col) in self.q.iter().enumerate() {
            qg[j] += col[0] * gamma_inner[j];
            qg[j + 1] += col[1] * gamma_inner[j];
            qg[j + 2] += col[2] * gamma_inner[j];
        }
        let g: Vec<f64> = (0..m).map(|i| k.y[i] - alpha * qg[i] / k.w[i]).collect();

        // Band of Σ = B⁻¹: s0[i] = Σ_ii, s1[i] = Σ_{i,i+1}, s2[i] = Σ_{i,i+2}.
        let mut s0 = vec![0.0; mm];
        let mut s1 = vec![0.0; mm];
        let mut s2 = vec![0.0; mm];
        for i in (0..mm).rev() {
            let s11 = if i + 1 < mm { s0[i + 1] } else { 0.0 };
            let s12 = if i + 1 < mm { s1[i + 1] } else { 0.0 };
            let s22 = if i + 2 < mm { s0[i + 2] } else { 0.0 };
            let (a1, a2) = (
                if i + 1 < mm { l1[i] } else { 0.0 },
                if i + 2 < mm { l2[i] } else { 0.0 },
            );
            s2[i] = -a1 * s12 - a2 * s22;
            s1[i] = -a1 * s11 - a2 * s12;
            s0[i] = 1.0 / d[i] - a1 * s1[i] - a2 * s2[i];
        }
        let sigma = |j: usize, k: usize| -> f64 {
            let (lo, hi) = if j <= k { (j, k) } else { (k, j) };
            match hi - lo {
                0 => s0[lo],
                1 => s1[lo],
                2 => s2[lo],
                _ => 0.0,
            }
        };

        // tr(A) = m − α Σ_i (Q Σ Qᵀ)_ii / w_i.
        let mut reduction = 0.0;
        for i in 0..m {
            let mut entries: [(usize, f64); 3] = [(0, 0.0); 3];
            let mut len = 0;
            for off in 0..3 {
                if i >= off && i - off < mm {
                    let j = i - off;
                    entries[len] = (j, self.q[j][off]);
                    len += 1;
                }
            }
            let mut diag = 0.0;
            for &(j, qj) in &entries[..len] {
                for &(kk, qk) in &entries[..len] {
                    diag += qj * qk * sigma(j, kk);
                }
            }
            reduction += diag / k.w[i];
        }
        let trace = m as f64 - alpha * reduction;

        let mut gamma = Vec::with_capacity(m);
        gamma.push(0.0);
        gamma.extend(gamma_inner);
        gamma.push(0.0);
        Solution { g, gamma, trace }
    }
}

impl SmoothingSpline {
    /// Fits sorted `(x, y)` pairs; `alpha = None` selects the penalty by GCV.
    pub(crate) fn fit(xy: &[(f64, f64)], alpha: Option<f64>) -> Result<Self> {
        let knots = Knots::from_sorted(xy);
        let m = knots.x.len();
        if m < 3 {
            // Too few distinct x for curvature; the limit is a weighted line.
            return Ok(Self::weighted_line(&knots, alpha.unwrap_or(f64::INFINITY)));
        }
        let reinsch = Reinsch::new(&knots);
        let range = knots.x[m - 1] - knots.x[0];
        let scale = range.powi(3);

        let alpha = match alpha {
            Some(a) => a,
            None => {
                let score = |t: f64| -> f64 {
                    let a = scale * 10f64.powf(t);
                    let s = reinsch.solve(&knots, a);
                    gcv(&knots, &s)
                };
                let (mut best_t, mut best) = (f64::NAN, f64::INFINITY);
                let mut t = -12.0;
                while t <= 6.0 + 1e-9 {
                    let v = score(t);
                    if v < best {
                        best = v;
                        best_t = t;
                    }
                    t += 0.25;
                }
                let t = golden_section(score, best_t - 0.25, best_t + 0.25, 1e-4);
                let t = if score(t) <= best { t } else { best_t };
                scale * 10f64.powf(t)
            }
        };
        let sol = reinsch.solve(&knots, alpha);
        Ok(Self {
            x: knots.x,
            g: sol.g,
            gamma: sol.gamma,
            alpha,
            effective_df: sol.trace,
        })
    }

    fn weighted_line(k: &Knots, alpha: f64) -> Self {
        let sw: f64 = k.w.iter().sum();
        let mx = k.x.iter().zip(&k.w).map(|(x, w)| x * w).sum::<f64>() / sw;
        let my = k.y.iter().zip(&k.w).map(|(y, w)| y * w).sum::<f64>() / sw;
        let sxx: f64 = k.x.iter().zip(&k.w).map(|(x, w)| w * (x - mx) * (x - mx)).sum();
        let sxy: f64 = k
            .x
            .iter()
            .zip(&k.y)
            .zip(&k.w)
            .map(|((x, y), w)| w * (x - mx) * (y - my))
            .sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        let g = k.x.iter().map(|x| my + slope * (x - mx)).collect();
        Self {
            gamma: vec![0.0; k.x.len()],
            x: k.x.clone(),
            g,
            alpha,
            effective_df: k.x.len().min(2) as f64,
        }
    }

    pub(crate) fn eval(&self, x: f64) -> f64 {
        let m = self.x.len();
        if m == 1 {
            return self.g[0];
        }
        // Linear beyond the ends (natural spline).
        if x <= self.x[0] || x >= self.x[m - 1] {
            let (i, j) = if x <= self.x[0] { (0, 1) } else { (m - 2, m - 1) };
            let h = self.x[j] - self.x[i];
            let slope = (self.g[j] - self.g[i]) / h
                - h / 6.0 * if i == 0 { self.gamma[1] } else { -self.gamma[m - 2] };
            let (x0, g0) = if i == 0 { (self.x[0], self.g[0]) } else { (self.x[m - 1], self.g[m - 1]) };
            return g0 + slope * (x - x0);
        }
        let i = self.x.partition_point(|&k| k <= x) - 1;
        let (xl, xr) = (self.x[i], self.x[i + 1]);
        let h = xr - xl;
        let (a, b) = (x - xl, xr - x);
        (a * self.g[i + 1] + b * self.g[i]) / h
            - a * b / 6.0 * ((1.0 + a / h) * self.gamma[i + 1] + (1.0 + b / h) * self.gamma[i])
    }

    #[cfg(test)]
    pub(crate) fn fitted(&self) -> &[f64] {
        &self.g
    }
}

fn gcv(k: &Knots, s: &Solution) -> f64 {
    let rss: f64 = k
        .y
        .iter()
        .zip(&s.g)
        .zip(&k.w)
        .map(|((y, g), w)| w * (y - g) * (y - g))
        .sum::<f64>()
        + k.within_ss;
    let n = k.total_weight;
    let denom = 1.0 - s.trace / n;
    if denom <= 0.0 {
        return f64::INFINITY;
    }
    (rss / n) / (denom * denom)
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}
