//! Facility-locations utility, its expected greedy gain, and the
//! coverage-based baseline utility.
//!
//! With discovered unknown unknowns `S` the facility-locations utility is
//!
//! ```text
//! W(Q) = Σ_{q∈S} r(c_q) − (1/n) Σ_x min_{q∈S} d(x, q),     r(c) = ln(1 / (1 − c))
//! ```
//!
//! and the minimum over an empty `S` is the distance cap `d_cap` (the test
//! set diameter), so `W = −d_cap` before the first discovery.
//!
//! The expected utility of querying `q′` is `φ·W_with + (1 − φ)·W_without`.
//! `W_without` does not depend on the candidate, so the argmax can be taken
//! over `φ·(W_with − W_without)` instead, which is what [`fl_gain`] returns in
//! O(n) per candidate.

use crate::dataset::{euclid, DistanceMatrix, TestSet};
use crate::error::{Error, Result};

/// Largest confidence fed to [`reward`]; keeps the reward finite.
pub const MAX_REWARD_CONFIDENCE: f64 = 1.0 - 1e-6;

/// Scores closer than this are treated as tied; the lower id wins.
pub const TIE_TOLERANCE: f64 = 1e-10;

/// Source of pairwise distances between points of one test set.
pub trait Distances {
    fn distance(&self, i: usize, j: usize) -> f64;

    fn similarity(&self, i: usize, j: usize) -> f64 {
        (-self.distance(i, j)).exp()
    }
}

impl Distances for TestSet {
    #[inline]
    fn distance(&self, i: usize, j: usize) -> f64 {
        euclid(self.point(i).features(), self.point(j).features())
    }
}

impl Distances for DistanceMatrix {
    #[inline]
    fn distance(&self, i: usize, j: usize) -> f64 {
        self.get(i, j)
    }
}

/// Reward for discovering an unknown unknown with confidence `c`.
pub fn reward(c: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::Domain(format!("confidence {c} outside [0, 1]")));
    }
    Ok(reward_unchecked(c))
}

#[inline]
pub(crate) fn reward_unchecked(c: f64) -> f64 {
    -(-c.min(MAX_REWARD_CONFIDENCE)).ln_1p()
}

/// Distance-based similarity `exp(−d(x, q))`.
pub fn similarity(x: &[f64], q: &[f64]) -> Result<f64> {
    Ok((-crate::dataset::euclidean_distance(x, q)?).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UtilityValue {
    pub total: f64,
    pub reward_term: f64,
    pub penalty_term: f64,
}

/// Query bookkeeping: the queried set, oracle labels, discovered unknown
/// unknowns, and each point's distance to its nearest discovery.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    queried: Vec<usize>,
    labels: Vec<String>,
    is_queried: Vec<bool>,
    uus: Vec<usize>,
    nearest_uu_dist: Vec<f64>,
    d_cap: f64,
}

impl SearchState {
    /// Empty state whose distance cap is the test set diameter.
    pub fn new(ts: &TestSet) -> Self {
        Self::with_d_cap(ts.len(), ts.diameter())
    }

    pub fn with_d_cap(n: usize, d_cap: f64) -> Self {
        Self {
            queried: Vec::new(),
            labels: Vec::new(),
            is_queried: vec![false; n],
            uus: Vec::new(),
            nearest_uu_dist: vec![d_cap; n],
            d_cap,
        }
    }

    /// Records the oracle's answer for point `idx` and returns whether it is
    /// an unknown unknown.
    pub fn record(&mut self, ts: &TestSet, idx: usize, label: &str) -> Result<bool> {
        self.record_with(ts, ts, idx, label)
    }

    pub fn record_with<D: Distances + ?Sized>(
        &mut self,
        ts: &TestSet,
        dists: &D,
        idx: usize,
        label: &str,
    ) -> Result<bool> {
        self.check(ts)?;
        if idx >= ts.len() {
            return Err(Error::Consistency(format!("point index {idx} out of range")));
        }
        if self.is_queried[idx] {
            return Err(Error::AlreadyQueried(ts.point(idx).id().to_string()));
        }
        self.is_queried[idx] = true;
        self.queried.push(idx);
        self.labels.push(label.to_string());

        let is_uu = ts.is_unknown_unknown(idx, label);
        if is_uu {
            self.uus.push(idx);
            for (x, m) in self.nearest_uu_dist.iter_mut().enumerate() {
                let d = dists.distance(x, idx);
                if d < *m {
                    *m = d;
                }
            }
        }
        Ok(is_uu)
    }

    pub fn len(&self) -> usize {
        self.queried.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queried.is_empty()
    }

    /// Queried point indices in query order.
    pub fn queried(&self) -> &[usize] {
        &self.queried
    }

    /// Oracle labels aligned with [`Self::queried`].
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn is_queried(&self, idx: usize) -> bool {
        self.is_queried[idx]
    }

    /// Discovered unknown unknowns in discovery order.
    pub fn uus(&self) -> &[usize] {
        &self.uus
    }

    pub fn nearest_uu_dist(&self) -> &[f64] {
        &self.nearest_uu_dist
    }

    pub fn d_cap(&self) -> f64 {
        self.d_cap
    }

    /// Nearest-discovery distances recomputed from scratch in O(n·|S|).
    pub fn recompute_nearest(&self, ts: &TestSet) -> Vec<f64> {
        (0..ts.len())
            .map(|x| {
                self.uus
                    .iter()
                    .map(|&q| ts.distance(x, q))
                    .fold(self.d_cap, f64::min)
            })
            .collect()
    }

    pub(crate) fn check(&self, ts: &TestSet) -> Result<()> {
        if self.is_queried.len() != ts.len() {
            return Err(Error::Consistency(format!(
                "state tracks {} points but the test set has {}",
                self.is_queried.len(),
                ts.len()
            )));
        }
        Ok(())
    }

    fn check_candidate(&self, ts: &TestSet, candidate: usize, phi: f64) -> Result<()> {
        self.check(ts)?;
        if candidate >= ts.len() {
            return Err(Error::Consistency(format!(
                "candidate index {candidate} out of range"
            )));
        }
        if self.is_queried[candidate] {
            return Err(Error::AlreadyQueried(ts.point(candidate).id().to_string()));
        }
        if !(0.0..=1.0).contains(&phi) {
            return Err(Error::Domain(format!("probability {phi} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Current facility-locations utility `W(Q)`.
pub fn facility_utility(ts: &TestSet, state: &SearchState) -> Result<UtilityValue> {
    state.check(ts)?;
    let reward_term: f64 = state
        .uus
        .iter()
        .map(|&q| reward_unchecked(ts.point(q).confidence()))
        .sum();
    let penalty_term = if state.uus.is_empty() {
        state.d_cap
    } else {
        state.nearest_uu_dist.iter().sum::<f64>() / ts.len() as f64
    };
    Ok(UtilityValue {
        total: reward_term - penalty_term,
        reward_term,
        penalty_term,
    })
}

/// Utility if `candidate` were added to the discoveries.
pub fn facility_utility_with(
    ts: &TestSet,
    state: &SearchState,
    candidate: usize,
) -> Result<UtilityValue> {
    state.check(ts)?;
    let reward_term: f64 = state
        .uus
        .iter()
        .chain(std::iter::once(&candidate))
        .map(|&q| reward_unchecked(ts.point(q).confidence()))
        .sum();
    let penalty_term = state
        .nearest_uu_dist
        .iter()
        .enumerate()
        .map(|(x, &m)| m.min(ts.distance(x, candidate)))
        .sum::<f64>()
        / ts.len() as f64;
    Ok(UtilityValue {
        total: reward_term - penalty_term,
        reward_term,
        penalty_term,
    })
}

/// Expected utility after querying `candidate`, misclassified with probability `phi`.
pub fn expected_fl_utility(
    ts: &TestSet,
    state: &SearchState,
    candidate: usize,
    phi: f64,
) -> Result<f64> {
    state.check_candidate(ts, candidate, phi)?;
    let with = facility_utility_with(ts, state, candidate)?.total;
    let without = facility_utility(ts, state)?.total;
    Ok(phi * with + (1.0 - phi) * without)
}

/// Expected increase in facility-locations utility from querying `candidate`.
pub fn fl_gain(ts: &TestSet, state: &SearchState, candidate: usize, phi: f64) -> Result<f64> {
    state.check_candidate(ts, candidate, phi)?;
    Ok(fl_gain_unchecked(ts, ts, state, candidate, phi))
}

pub fn fl_gain_with<D: Distances + ?Sized>(
    ts: &TestSet,
    dists: &D,
    state: &SearchState,
    candidate: usize,
    phi: f64,
) -> Result<f64> {
    state.check_candidate(ts, candidate, phi)?;
    Ok(fl_gain_unchecked(ts, dists, state, candidate, phi))
}

#[inline]
pub(crate) fn fl_gain_unchecked<D: Distances + ?Sized>(
    ts: &TestSet,
    dists: &D,
    state: &SearchState,
    candidate: usize,
    phi: f64,
) -> f64 {
    let coverage: f64 = state
        .nearest_uu_dist
        .iter()
        .enumerate()
        .map(|(x, &m)| (m - dists.distance(x, candidate)).max(0.0))
        .sum();
    let delta = reward_unchecked(ts.point(candidate).confidence()) + coverage / ts.len() as f64;
    phi * delta
}

/// Coverage-based utility `U(Q) = Σ_x c_x · max_{q∈S} sim(x, q)`.
pub fn coverage_utility(ts: &TestSet, state: &SearchState) -> Result<f64> {
    state.check(ts)?;
    if state.uus.is_empty() {
        return Ok(0.0);
    }
    Ok(best_similarities(state)
        .iter()
        .zip(ts.points())
        .map(|(s, p)| p.confidence() * s)
        .sum())
}

/// Each point's similarity to its nearest discovery, zero when none exist.
pub fn best_similarities(state: &SearchState) -> Vec<f64> {
    if state.uus.is_empty() {
        vec![0.0; state.nearest_uu_dist.len()]
    } else {
        state.nearest_uu_dist.iter().map(|m| (-m).exp()).collect()
    }
}

/// Expected coverage utility after querying `candidate`.
pub fn expected_coverage_utility(
    ts: &TestSet,
    state: &SearchState,
    candidate: usize,
    phi: f64,
) -> Result<f64> {
    state.check_candidate(ts, candidate, phi)?;
    let best = best_similarities(state);
    let with: f64 = ts
        .points()
        .iter()
        .enumerate()
        .map(|(x, p)| p.confidence() * best[x].max(ts.similarity(x, candidate)))
        .sum();
    let without = coverage_utility(ts, state)?;
    Ok(phi * with + (1.0 - phi) * without)
}

/// Expected increase in coverage utility from querying `candidate`.
pub fn expected_coverage_gain(
    ts: &TestSet,
    state: &SearchState,
    candidate: usize,
    phi: f64,
) -> Result<f64> {
    state.check_candidate(ts, candidate, phi)?;
    let best = best_similarities(state);
    Ok(coverage_gain_unchecked(ts, ts, &best, candidate, phi))
}

#[inline]
pub(crate) fn coverage_gain_unchecked<D: Distances + ?Sized>(
    ts: &TestSet,
    dists: &D,
    best: &[f64],
    candidate: usize,
    phi: f64,
) -> f64 {
    let gain: f64 = ts
        .points()
        .iter()
        .enumerate()
        .map(|(x, p)| p.confidence() * (dists.similarity(x, candidate) - best[x]).max(0.0))
        .sum();
    phi * gain
}

/// Picks the highest-scoring point, breaking ties (within [`TIE_TOLERANCE`])
/// toward the lowest id.
pub fn select_best(ts: &TestSet, scored: impl IntoIterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = scored.into_iter().collect();
    scored.sort_by_key(|&(i, _)| ts.id_rank(i));
    scan_best(scored)
}

/// Same as [`select_best`] for candidates already in ascending id order.
pub(crate) fn scan_best(ordered: impl IntoIterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, score) in ordered {
        match best {
            Some((_, b)) if score <= b + TIE_TOLERANCE => {}
            _ => best = Some((i, score)),
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TestPoint;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn collinear() -> TestSet {
        TestSet::new(vec![
            TestPoint::new("a", vec![0.0], 0.9, "pos"),
            TestPoint::new("b", vec![1.0], 0.5, "pos"),
            TestPoint::new("c", vec![2.0], 0.8, "pos"),
        ])
        .unwrap()
    }

    #[test]
    fn reward_values() {
        assert_relative_eq!(reward(0.5).unwrap(), LN_2, epsilon = 1e-15);
        assert_relative_eq!(reward(0.9).unwrap(), 10f64.ln(), epsilon = 1e-12);
        assert_eq!(reward(0.0).unwrap(), 0.0);
        assert!(reward(1.0).unwrap().is_finite());
        assert_relative_eq!(reward(1.0).unwrap(), 1e6f64.ln(), epsilon = 1e-6);
        assert!(matches!(reward(1.2), Err(Error::Domain(_))));
        assert!(matches!(reward(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn empty_state_utility_is_minus_cap() {
        let ts = collinear();
        let state = SearchState::with_d_cap(3, 2.5);
        let w = facility_utility(&ts, &state).unwrap();
        assert_eq!(w.total, -2.5);
        assert_eq!(w.reward_term, 0.0);
        assert_eq!(coverage_utility(&ts, &state).unwrap(), 0.0);
    }

    #[test]
    fn coincident_discovery_has_no_penalty() {
        let ts = TestSet::new(vec![
            TestPoint::new("a", vec![1.0, 1.0], 0.5, "pos"),
            TestPoint::new("b", vec![1.0, 1.0], 0.5, "pos"),
        ])
        .unwrap();
        let mut state = SearchState::new(&ts);
        assert!(state.record(&ts, 0, "neg").unwrap());
        let w = facility_utility(&ts, &state).unwrap();
        assert_relative_eq!(w.total, LN_2, epsilon = 1e-15);
        assert_eq!(w.penalty_term, 0.0);
    }

    #[test]
    fn collinear_single_discovery() {
        let ts = collinear();
        let mut state = SearchState::new(&ts);
        assert_eq!(state.d_cap(), 2.0);
        state.record(&ts, 0, "neg").unwrap();
        let w = facility_utility(&ts, &state).unwrap();
        assert_relative_eq!(w.total, 10f64.ln() - 1.0, epsilon = 1e-12);
    }

    #[test]
    fn expected_utility_branches() {
        let ts = collinear();
        let mut state = SearchState::new(&ts);
        state.record(&ts, 0, "neg").unwrap();
        let without = facility_utility(&ts, &state).unwrap().total;

        assert_eq!(expected_fl_utility(&ts, &state, 2, 0.0).unwrap(), without);
        let with = facility_utility_with(&ts, &state, 2).unwrap().total;
        assert_eq!(expected_fl_utility(&ts, &state, 2, 1.0).unwrap(), with);

        let expected = 0.5 * (10f64.ln() + 5f64.ln() - 1.0 / 3.0) + 0.5 * (10f64.ln() - 1.0);
        assert_relative_eq!(
            expected_fl_utility(&ts, &state, 2, 0.5).unwrap(),
            expected,
            epsilon = 1e-12
        );
        assert!(matches!(
            expected_fl_utility(&ts, &state, 0, 0.5),
            Err(Error::AlreadyQueried(id)) if id == "a"
        ));
    }

    #[test]
    fn gain_edge_cases() {
        let ts = TestSet::new(vec![
            TestPoint::new("a", vec![0.0], 0.9, "pos"),
            TestPoint::new("b", vec![0.0], 0.7, "pos"),
            TestPoint::new("c", vec![3.0], 0.8, "pos"),
        ])
        .unwrap();
        let mut state = SearchState::new(&ts);
        assert_eq!(fl_gain(&ts, &state, 1, 0.0).unwrap(), 0.0);
        state.record(&ts, 0, "neg").unwrap();
        // b sits on top of the existing discovery: only the reward counts.
        let g = fl_gain(&ts, &state, 1, 0.4).unwrap();
        assert_relative_eq!(g, 0.4 * reward(0.7).unwrap(), epsilon = 1e-15);
    }

    #[test]
    fn coverage_examples() {
        let single = TestSet::new(vec![TestPoint::new("a", vec![0.3], 0.9, "pos")]).unwrap();
        let mut state = SearchState::new(&single);
        state.record(&single, 0, "neg").unwrap();
        assert_relative_eq!(coverage_utility(&single, &state).unwrap(), 0.9, epsilon = 1e-15);

        let ts = TestSet::new(vec![
            TestPoint::new("a", vec![1.0], 0.9, "pos"),
            TestPoint::new("b", vec![1.0], 0.7, "pos"),
        ])
        .unwrap();
        let state = SearchState::new(&ts);
        assert_eq!(expected_coverage_gain(&ts, &state, 0, 0.0).unwrap(), 0.0);
        assert_relative_eq!(
            expected_coverage_gain(&ts, &state, 0, 1.0).unwrap(),
            1.6,
            epsilon = 1e-15
        );
    }

    #[test]
    fn coverage_matches_double_loop() {
        let ts = collinear();
        let mut state = SearchState::new(&ts);
        state.record(&ts, 1, "neg").unwrap();
        let mut naive = 0.0;
        for x in ts.points() {
            let mut best = f64::NEG_INFINITY;
            for &q in state.uus() {
                let d = euclidean(x.features(), ts.point(q).features());
                best = best.max((-d).exp());
            }
            naive += x.confidence() * best;
        }
        assert_relative_eq!(coverage_utility(&ts, &state).unwrap(), naive, epsilon = 1e-12);
    }

    fn euclidean(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..a.len() {
            s += (a[k] - b[k]).powi(2);
        }
        s.sqrt()
    }

    #[test]
    fn similarity_values() {
        assert_eq!(similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_relative_eq!(similarity(&[0.0], &[LN_2]).unwrap(), 0.5, epsilon = 1e-15);
        assert!(similarity(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn correct_answer_leaves_utility_unchanged() {
        let ts = collinear();
        let mut state = SearchState::new(&ts);
        state.record(&ts, 0, "neg").unwrap();
        let before = facility_utility(&ts, &state).unwrap();
        assert!(!state.record(&ts, 1, "pos").unwrap());
        assert_eq!(facility_utility(&ts, &state).unwrap(), before);
    }

    #[test]
    fn inconsistent_state_rejected() {
        let ts = collinear();
        let state = SearchState::with_d_cap(5, 1.0);
        assert!(matches!(
            facility_utility(&ts, &state),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn select_best_prefers_lowest_id_on_ties() {
        let ts = TestSet::new(vec![
            TestPoint::new("z", vec![0.0], 0.9, "pos"),
            TestPoint::new("m", vec![1.0], 0.9, "pos"),
            TestPoint::new("a", vec![2.0], 0.9, "pos"),
        ])
        .unwrap();
        assert_eq!(select_best(&ts, [(0, 1.0), (1, 1.0), (2, 0.5)]), Some((1, 1.0)));
        assert_eq!(select_best(&ts, [(0, 1.0), (2, 1.0)]), Some((2, 1.0)));
        assert_eq!(select_best(&ts, [(0, 1.0 + 1e-12), (2, 1.0)]), Some((2, 1.0)));
        assert_eq!(select_best(&ts, [(0, 1.1), (2, 1.0)]), Some((0, 1.1)));
        assert_eq!(select_best(&ts, []), None);
    }

    proptest! {
        #[test]
        fn reward_increasing_and_convex(a in 0.0f64..0.99, b in 0.0f64..0.99) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(hi - lo > 1e-9);
            let (rl, rh) = (reward(lo).unwrap(), reward(hi).unwrap());
            prop_assert!(rh > rl);
            let mid = reward(0.5 * (lo + hi)).unwrap();
            prop_assert!(mid <= 0.5 * (rl + rh) + 1e-12);
        }
    }
}
