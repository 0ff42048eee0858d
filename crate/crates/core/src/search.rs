//! Query strategies run against an oracle under a budget.
//!
//! [`Search`] is a step-wise driver: [`Search::pending`] computes the next
//! query and [`Search::submit`] applies the oracle's answer. Offline runs
//! ([`run_search`]) and the interactive session service use the same driver,
//! so an interactive session and an offline run fed the same answers produce
//! the same trace.
//!
//! Strategies:
//! - `fl`: greedy facility-locations search. Every unqueried point is a
//!   candidate; the next query maximizes the expected utility gain under the
//!   logistic φ̂ (prior `1 − c` until both outcomes have been seen).
//! - `mu`: most-uncertain search, ascending confidence from τ upward.
//! - `cov`: greedy coverage-utility search with cluster-rate φ̂ over points
//!   with confidence ≥ τ.
//! - `bandit`: UCB1 over k-means clusters, uniform draws within the chosen
//!   cluster.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DistanceMatrix, TestSet};
use crate::error::{Error, Result};
use crate::oracle::Oracle;
use crate::phi::{fit_logistic, ClusterRates, LogisticModel, LogisticOptions, PhiModel};
use crate::utility::{
    best_similarities, coverage_gain_unchecked, facility_utility, fl_gain_unchecked, scan_best,
    Distances, SearchState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "fl")]
    FacilityLocations,
    #[serde(rename = "mu")]
    MostUncertain,
    #[serde(rename = "cov")]
    Coverage,
    #[serde(rename = "bandit")]
    Bandit,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::FacilityLocations,
        Strategy::MostUncertain,
        Strategy::Coverage,
        Strategy::Bandit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FacilityLocations => "fl",
            Strategy::MostUncertain => "mu",
            Strategy::Coverage => "cov",
            Strategy::Bandit => "bandit",
        }
    }

    /// φ̂ estimator used when the configuration does not override it.
    pub fn default_estimator(self) -> Estimator {
        match self {
            Strategy::FacilityLocations => Estimator::Logistic,
            Strategy::MostUncertain => Estimator::Prior,
            Strategy::Coverage | Strategy::Bandit => Estimator::Cluster,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fl" | "facility" => Ok(Strategy::FacilityLocations),
            "mu" | "most-uncertain" => Ok(Strategy::MostUncertain),
            "cov" | "coverage" => Ok(Strategy::Coverage),
            "bandit" => Ok(Strategy::Bandit),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Prior,
    Logistic,
    Cluster,
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "prior" => Ok(Estimator::Prior),
            "logistic" => Ok(Estimator::Logistic),
            "cluster" => Ok(Estimator::Cluster),
            other => Err(Error::Config(format!("unknown estimator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub budget: usize,
    /// Confidence floor for the baselines' candidates.
    pub tau: f64,
    /// k for cluster-rate φ̂ and bandit arms.
    pub clusters: usize,
    /// Weight on the UCB1 exploration bonus.
    pub exploration: f64,
    /// Overrides the strategy's own φ̂ estimator.
    pub estimator: Option<Estimator>,
    /// Restricts facility-locations candidates to confidence ≥ τ.
    pub restrict_candidates: bool,
    /// Lets most-uncertain search continue below τ once the points above it run out.
    pub allow_below_tau: bool,
    /// Adds a free intercept to the logistic φ̂ model.
    pub intercept: bool,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            budget: 100,
            tau: 0.65,
            clusters: 10,
            exploration: 1.0,
            estimator: None,
            restrict_candidates: false,
            allow_below_tau: false,
            intercept: false,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if self.budget > n {
            return Err(Error::Config(format!(
                "budget {} exceeds the {n} available points",
                self.budget
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.clusters == 0 {
            return Err(Error::Config("clusters must be at least 1".into()));
        }
        if !(self.exploration.is_finite() && self.exploration >= 0.0) {
            return Err(Error::Config("exploration weight must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One answered query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub b: usize,
    pub id: String,
    pub c: f64,
    pub phi: f64,
    pub label: String,
    pub is_uu: bool,
    /// Facility-locations utility after this step.
    #[serde(rename = "W")]
    pub w: f64,
    /// The strategy's selection score for this point.
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTrace {
    pub strategy: Strategy,
    pub config: SearchConfig,
    pub seed: u64,
    /// Distance cap used for the empty-discovery utility.
    pub d_cap: f64,
    pub steps: Vec<StepRecord>,
    /// Ran out of eligible candidates before the budget.
    pub early_stop: bool,
    /// Oracle failure that ended the run, if any.
    pub aborted: Option<String>,
}

impl QueryTrace {
    pub fn uu_count(&self) -> usize {
        self.steps.iter().filter(|s| s.is_uu).count()
    }

    /// One JSON object per step.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for step in &self.steps {
            serde_json::to_writer(&mut out, step)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn read_steps_jsonl<R: BufRead>(reader: R) -> Result<Vec<StepRecord>> {
    let mut steps = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            steps.push(serde_json::from_str(&line)?);
        }
    }
    Ok(steps)
}

/// The query a search is waiting on.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pending {
    /// Row of the point in the searched test set.
    #[serde(skip)]
    pub idx: usize,
    pub id: String,
    /// 1-based step index.
    pub b: usize,
    pub confidence: f64,
    pub phi: f64,
    pub gain: f64,
    #[serde(skip)]
    arm: Option<usize>,
}

/// Pairwise distances plus, for coverage search, cached similarities.
struct Geometry {
    dm: DistanceMatrix,
    sim: Option<Vec<f64>>,
}

impl Distances for Geometry {
    #[inline]
    fn distance(&self, i: usize, j: usize) -> f64 {
        // Symmetric; row-major in j keeps scans over i contiguous.
        self.dm.row(j)[i]
    }

    #[inline]
    fn similarity(&self, i: usize, j: usize) -> f64 {
        match &self.sim {
            Some(s) => s[j * self.dm.len() + i],
            None => (-self.distance(i, j)).exp(),
        }
    }
}

#[derive(Debug, Clone)]
struct Arms {
    remaining: Vec<Vec<usize>>,
    pulls: Vec<usize>,
    rewards: Vec<usize>,
}

/// Step-wise search run.
pub struct Search {
    ts: Arc<TestSet>,
    strategy: Strategy,
    cfg: SearchConfig,
    estimator: Estimator,
    geometry: Geometry,
    state: SearchState,
    by_id: Vec<usize>,
    eligible: Vec<bool>,
    logistic: Option<LogisticModel>,
    clusters: Option<ClusterRates>,
    queue: Vec<usize>,
    queue_pos: usize,
    arms: Option<Arms>,
    rng: ChaCha8Rng,
    pending: Option<Pending>,
    utility: f64,
    trace: QueryTrace,
    finished: bool,
}

impl Search {
    pub fn new(ts: Arc<TestSet>, strategy: Strategy, cfg: SearchConfig) -> Result<Self> {
        cfg.validate(ts.len())?;
        let estimator = cfg.estimator.unwrap_or(strategy.default_estimator());

        let floor = match strategy {
            Strategy::FacilityLocations if !cfg.restrict_candidates => None,
            _ => Some(cfg.tau),
        };
        let eligible: Vec<bool> = (0..ts.len())
            .map(|i| {
                ts.in_critical_class(i)
                    && (floor.is_none_or(|t| ts.point(i).confidence() >= t)
                        || (strategy == Strategy::MostUncertain && cfg.allow_below_tau))
            })
            .collect();
        let candidates = eligible.iter().filter(|&&e| e).count();
        if strategy == Strategy::FacilityLocations && candidates < cfg.budget {
            return Err(Error::Config(format!(
                "budget {} exceeds the {candidates} candidate points",
                cfg.budget
            )));
        }

        let dm = DistanceMatrix::new(&ts);
        let d_cap = dm.diameter();
        let sim = (strategy == Strategy::Coverage).then(|| dm_similarities(&dm));
        let geometry = Geometry { dm, sim };

        let needs_clusters = estimator == Estimator::Cluster || strategy == Strategy::Bandit;
        let clusters = if needs_clusters {
            if cfg.clusters > ts.len() {
                return Err(Error::Config(format!(
                    "{} clusters requested for {} points",
                    cfg.clusters,
                    ts.len()
                )));
            }
            Some(ClusterRates::new(&ts, cfg.clusters, cfg.seed)?)
        } else {
            None
        };

        let by_id = ts.indices_by_id();

        let queue = if strategy == Strategy::MostUncertain {
            most_uncertain_order(&ts, &eligible, cfg.tau)
        } else {
            Vec::new()
        };

        let arms = if strategy == Strategy::Bandit {
            let rates = clusters.as_ref().expect("bandit search clusters the test set");
            let mut remaining = vec![Vec::new(); cfg.clusters];
            for &i in &by_id {
                if eligible[i] {
                    remaining[rates.cluster_of(i)].push(i);
                }
            }
            Some(Arms {
                remaining,
                pulls: vec![0; cfg.clusters],
                rewards: vec![0; cfg.clusters],
            })
        } else {
            None
        };

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);

        let state = SearchState::with_d_cap(ts.len(), d_cap);
        let utility = facility_utility(&ts, &state)?.total;
        let trace = QueryTrace {
            strategy,
            config: cfg.clone(),
            seed: cfg.seed,
            d_cap,
            steps: Vec::new(),
            early_stop: false,
            aborted: None,
        };

        Ok(Self {
            ts,
            strategy,
            cfg,
            estimator,
            geometry,
            state,
            by_id,
            eligible,
            logistic: None,
            clusters,
            queue,
            queue_pos: 0,
            arms,
            rng,
            pending: None,
            utility,
            trace,
            finished: false,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    pub fn test_set(&self) -> &Arc<TestSet> {
        &self.ts
    }

    pub fn state(&self) -> &SearchState {
        &self.state
    }

    pub fn trace(&self) -> &QueryTrace {
        &self.trace
    }

    pub fn into_trace(self) -> QueryTrace {
        self.trace
    }

    /// Current facility-locations utility.
    pub fn utility(&self) -> f64 {
        self.utility
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Snapshot of the φ̂ model currently driving selection.
    pub fn phi_model(&self) -> PhiModel {
        match self.estimator {
            Estimator::Prior => PhiModel::Prior,
            Estimator::Logistic => match &self.logistic {
                Some(m) => PhiModel::Logistic(m.clone()),
                None => PhiModel::Prior,
            },
            Estimator::Cluster => match &self.clusters {
                Some(c) => PhiModel::ClusterRates(c.clone()),
                None => PhiModel::Prior,
            },
        }
    }

    /// The next query, selecting it first if needed. `None` once the run is over.
    pub fn pending(&mut self) -> Option<&Pending> {
        if self.finished {
            return None;
        }
        if self.pending.is_none() {
            match self.select() {
                Some(p) => self.pending = Some(p),
                None => {
                    self.trace.early_stop = true;
                    self.finished = true;
                }
            }
        }
        self.pending.as_ref()
    }

    /// Applies the oracle's answer for the pending query.
    pub fn submit(&mut self, id: &str, label: &str) -> Result<&StepRecord> {
        let pending = match &self.pending {
            Some(p) if p.id == id => self.pending.take().expect("checked above"),
            other => {
                return Err(Error::NotPending {
                    expected: other.as_ref().map(|p| p.id.clone()),
                    got: id.to_string(),
                })
            }
        };
        let idx = pending.idx;
        let is_uu = self
            .state
            .record_with(&self.ts, &self.geometry, idx, label)?;
        if is_uu {
            self.utility = facility_utility(&self.ts, &self.state)?.total;
        }

        if let Some(clusters) = &mut self.clusters {
            clusters.observe(clusters.cluster_of(idx), is_uu);
        }
        if let (Some(arms), Some(arm)) = (&mut self.arms, pending.arm) {
            arms.pulls[arm] += 1;
            arms.rewards[arm] += usize::from(is_uu);
            arms.remaining[arm].retain(|&i| i != idx);
        }
        if self.estimator == Estimator::Logistic {
            self.refit_logistic();
        }

        self.trace.steps.push(StepRecord {
            b: pending.b,
            id: pending.id,
            c: pending.confidence,
            phi: pending.phi,
            label: label.to_string(),
            is_uu,
            w: self.utility,
            gain: pending.gain,
        });
        if self.state.len() >= self.cfg.budget {
            self.finished = true;
        }
        Ok(self.trace.steps.last().expect("just pushed"))
    }

    /// Ends the run after an oracle failure.
    pub fn abort(&mut self, reason: impl Into<String>) {
        self.trace.aborted = Some(reason.into());
        self.pending = None;
        self.finished = true;
    }

    fn refit_logistic(&mut self) {
        let opts = LogisticOptions {
            intercept: self.cfg.intercept,
            ..LogisticOptions::default()
        };
        self.logistic = match fit_logistic(&self.ts, &self.state, &opts) {
            Ok(m) => Some(m),
            Err(Error::FitUnavailable(_)) => None,
            Err(e) => {
                log::warn!("logistic φ̂ refit failed, keeping previous model: {e}");
                self.logistic.take()
            }
        };
    }

    fn phi(&self, idx: usize) -> f64 {
        let point = self.ts.point(idx);
        let prior = 1.0 - point.confidence();
        match self.estimator {
            Estimator::Prior => prior,
            Estimator::Logistic => self
                .logistic
                .as_ref()
                .and_then(|m| m.predict(point).ok())
                .unwrap_or(prior),
            Estimator::Cluster => self
                .clusters
                .as_ref()
                .map(|c| c.rate(c.cluster_of(idx), point.confidence()))
                .unwrap_or(prior),
        }
    }

    fn candidates(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_id
            .iter()
            .copied()
            .filter(|&i| self.eligible[i] && !self.state.is_queried(i))
    }

    fn make_pending(&self, idx: usize, gain: f64, arm: Option<usize>) -> Pending {
        let point = self.ts.point(idx);
        Pending {
            idx,
            id: point.id().to_string(),
            b: self.state.len() + 1,
            confidence: point.confidence(),
            phi: self.phi(idx),
            gain,
            arm,
        }
    }

    fn select(&mut self) -> Option<Pending> {
        match self.strategy {
            Strategy::FacilityLocations => {
                let scored = self.candidates().map(|i| {
                    let g = fl_gain_unchecked(&self.ts, &self.geometry, &self.state, i, self.phi(i));
                    (i, g)
                });
                let (idx, gain) = scan_best(scored)?;
                Some(self.make_pending(idx, gain, None))
            }
            Strategy::Coverage => {
                let best = best_similarities(&self.state);
                let scored = self.candidates().map(|i| {
                    let g = coverage_gain_unchecked(&self.ts, &self.geometry, &best, i, self.phi(i));
                    (i, g)
                });
                let (idx, gain) = scan_best(scored)?;
                Some(self.make_pending(idx, gain, None))
            }
            Strategy::MostUncertain => {
                while self.queue_pos < self.queue.len()
                    && self.state.is_queried(self.queue[self.queue_pos])
                {
                    self.queue_pos += 1;
                }
                let idx = *self.queue.get(self.queue_pos)?;
                Some(self.make_pending(idx, 1.0 - self.ts.point(idx).confidence(), None))
            }
            Strategy::Bandit => {
                let (arm, score) = self.choose_arm()?;
                let members = &self.arms.as_ref().expect("bandit arms").remaining[arm];
                let idx = members[self.rng.random_range(0..members.len())];
                Some(self.make_pending(idx, score, Some(arm)))
            }
        }
    }

    /// UCB1 over clusters that still hold eligible points. Unpulled arms go
    /// first, lowest index first, and score 0.
    fn choose_arm(&self) -> Option<(usize, f64)> {
        let arms = self.arms.as_ref()?;
        let active = (0..arms.pulls.len()).filter(|&a| !arms.remaining[a].is_empty());
        if let Some(a) = active.clone().find(|&a| arms.pulls[a] == 0) {
            return Some((a, 0.0));
        }
        let total: usize = arms.pulls.iter().sum();
        let log_total = (total as f64).ln();
        let mut best: Option<(usize, f64)> = None;
        for a in active {
            let n = arms.pulls[a] as f64;
            let score = arms.rewards[a] as f64 / n
                + self.cfg.exploration * (2.0 * log_total / n).sqrt();
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((a, score));
            }
        }
        best
    }
}

fn dm_similarities(dm: &DistanceMatrix) -> Vec<f64> {
    (0..dm.len())
        .flat_map(|j| dm.row(j).iter().map(|d| (-d).exp()))
        .collect()
}

/// Points at or above τ by ascending confidence, then (when allowed) the
/// rest by descending confidence; ties by id.
fn most_uncertain_order(ts: &TestSet, eligible: &[bool], tau: f64) -> Vec<usize> {
    let key = |i: &usize| (ts.point(*i).confidence(), ts.id_rank(*i));
    let (mut above, mut below): (Vec<usize>, Vec<usize>) = (0..ts.len())
        .filter(|&i| eligible[i])
        .partition(|&i| ts.point(i).confidence() >= tau);
    above.sort_by(|a, b| key(a).partial_cmp(&key(b)).expect("finite confidences"));
    below.sort_by(|a, b| {
        let (ca, ra) = key(a);
        let (cb, rb) = key(b);
        cb.total_cmp(&ca).then(ra.cmp(&rb))
    });
    above.extend(below);
    above
}

/// Runs `strategy` to completion against `oracle`.
///
/// Configuration problems are errors. Oracle failures end the run early and
/// are reported through [`QueryTrace::aborted`].
pub fn run_search(
    ts: Arc<TestSet>,
    oracle: &mut dyn Oracle,
    strategy: Strategy,
    cfg: SearchConfig,
) -> Result<QueryTrace> {
    let mut search = Search::new(ts, strategy, cfg)?;
    while let Some(p) = search.pending() {
        let id = p.id.clone();
        match oracle.label(&id) {
            Ok(label) => {
                search.submit(&id, &label)?;
            }
            Err(e) => search.abort(e.to_string()),
        }
    }
    Ok(search.into_trace())
}

pub fn greedy_fl_search(ts: Arc<TestSet>, oracle: &mut dyn Oracle, cfg: SearchConfig) -> Result<QueryTrace> {
    run_search(ts, oracle, Strategy::FacilityLocations, cfg)
}

pub fn most_uncertain_search(ts: Arc<TestSet>, oracle: &mut dyn Oracle, cfg: SearchConfig) -> Result<QueryTrace> {
    run_search(ts, oracle, Strategy::MostUncertain, cfg)
}

pub fn coverage_greedy_search(ts: Arc<TestSet>, oracle: &mut dyn Oracle, cfg: SearchConfig) -> Result<QueryTrace> {
    run_search(ts, oracle, Strategy::Coverage, cfg)
}

pub fn bandit_search(ts: Arc<TestSet>, oracle: &mut dyn Oracle, cfg: SearchConfig) -> Result<QueryTrace> {
    run_search(ts, oracle, Strategy::Bandit, cfg)
}
