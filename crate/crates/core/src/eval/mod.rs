//! Metrics over query traces and the Monte Carlo comparison protocol.
//!
//! The standardized discovery ratio (SDR) of a trace is the number of
//! discovered unknown unknowns divided by the number the queried points'
//! confidences predict, `|S| / Σ_{x∈Q} (1 − c_x)`. A calibrated classifier
//! gives SDR ≈ 1 whatever the search does; SDR > 1 is evidence of
//! overconfidence among the queried points.
//!
//! Quantiles use linear interpolation between order statistics (the
//! `h = (n − 1)p` rule).

mod profile;

pub use profile::{overconfidence_profile, OverconfidenceProfile, ProfileOptions, Smoother};

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_testset, TestSet};
use crate::error::{Error, Result};
use crate::oracle::SimulatedOracle;
use crate::search::{run_search, QueryTrace, SearchConfig, StepRecord, Strategy};
use crate::utility::{coverage_utility, facility_utility, SearchState};

/// Standardized discovery ratio of the given steps.
pub fn sdr(steps: &[StepRecord]) -> Result<f64> {
    if steps.is_empty() {
        return Err(Error::Empty("trace has no steps".into()));
    }
    let found = steps.iter().filter(|s| s.is_uu).count() as f64;
    let expected: f64 = steps.iter().map(|s| 1.0 - s.c).sum();
    if expected <= 0.0 {
        return Err(Error::UndefinedSdr);
    }
    Ok(found / expected)
}

/// Running SDR after each step; `None` where it is undefined.
pub fn running_sdr(steps: &[StepRecord]) -> Vec<Option<f64>> {
    let mut found = 0usize;
    let mut expected = 0.0;
    steps
        .iter()
        .map(|s| {
            found += usize::from(s.is_uu);
            expected += 1.0 - s.c;
            (expected > 0.0).then(|| found as f64 / expected)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    Facility,
    Coverage,
}

/// Utility after each step of `trace`, replayed on `ts`.
///
/// Facility-locations values are reported as gains over the empty-discovery
/// utility, `W(Q) + d_cap`, so every curve starts at 0.
pub fn utility_trajectory(ts: &TestSet, trace: &QueryTrace, which: Which) -> Result<Vec<f64>> {
    let mut state = SearchState::with_d_cap(ts.len(), trace.d_cap);
    let mut out = Vec::with_capacity(trace.steps.len());
    for step in &trace.steps {
        let idx = ts
            .index_of(&step.id)
            .ok_or_else(|| Error::UnknownId(step.id.clone()))?;
        state.record(ts, idx, &step.label)?;
        out.push(match which {
            Which::Facility => facility_utility(ts, &state)?.total + trace.d_cap,
            Which::Coverage => coverage_utility(ts, &state)?,
        });
    }
    Ok(out)
}

/// Linear-interpolation quantile of already sorted values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Linear-interpolation quantile; `None` for an empty sample.
pub fn quantile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(quantile_sorted(&sorted, p))
}

/// Median with a 90% band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub median: f64,
    pub q05: f64,
    pub q95: f64,
}

impl Band {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Band {
            median: quantile_sorted(&sorted, 0.5),
            q05: quantile_sorted(&sorted, 0.05),
            q95: quantile_sorted(&sorted, 0.95),
        })
    }
}

/// Band of per-trace SDRs. Traces whose SDR is undefined are skipped.
pub fn sdr_summary(traces: &[QueryTrace]) -> Result<Band> {
    if traces.is_empty() {
        return Err(Error::Empty("no traces to summarize".into()));
    }
    let values: Vec<f64> = traces.iter().filter_map(|t| sdr(&t.steps).ok()).collect();
    Band::of(&values).ok_or(Error::UndefinedSdr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `W(Q) + d_cap`.
    FacilityGain,
    CoverageUtility,
    UuCount,
    /// Running SDR; replications where it is undefined are left out.
    Sdr,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::FacilityGain,
        Metric::CoverageUtility,
        Metric::UuCount,
        Metric::Sdr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::FacilityGain => "facility_gain",
            Metric::CoverageUtility => "coverage_utility",
            Metric::UuCount => "uu_count",
            Metric::Sdr => "sdr",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepBand {
    pub step: usize,
    pub median: f64,
    pub q05: f64,
    pub q95: f64,
    /// Replications contributing a value at this step.
    pub reps: usize,
}

/// Per-step median and 90% band of one metric for one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub strategy: Strategy,
    pub metric: Metric,
    pub reps: usize,
    pub steps: Vec<StepBand>,
}

impl McSummary {
    pub fn medians(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.median).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub strategies: Vec<Strategy>,
    /// Sample size per replication.
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    /// Budget, τ and strategy parameters shared by every run. Its seed is
    /// replaced by the replication seed.
    pub search: SearchConfig,
    /// Keep every trace in the report.
    #[serde(default)]
    pub keep_traces: bool,
}

/// A run that failed or ended early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attrition {
    pub rep: usize,
    pub strategy: Strategy,
    pub steps: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySdr {
    pub strategy: Strategy,
    /// `None` when no replication had a defined SDR.
    pub band: Option<Band>,
    /// Replications with a defined SDR.
    pub defined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub config: McConfig,
    pub summaries: Vec<McSummary>,
    pub final_sdr: Vec<StrategySdr>,
    pub attrition: Vec<Attrition>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub traces: Vec<Vec<QueryTrace>>,
}

impl McReport {
    pub fn summary(&self, strategy: Strategy, metric: Metric) -> Option<&McSummary> {
        self.summaries
            .iter()
            .find(|s| s.strategy == strategy && s.metric == metric)
    }

    pub fn sdr_band(&self, strategy: Strategy) -> Option<Band> {
        self.final_sdr
            .iter()
            .find(|s| s.strategy == strategy)
            .and_then(|s| s.band)
    }

    /// Tidy CSV: `step,strategy,metric,median,q05,q95,reps`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "strategy", "metric", "median", "q05", "q95", "reps"])?;
        for s in &self.summaries {
            for b in &s.steps {
                w.write_record([
                    b.step.to_string(),
                    s.strategy.name().to_string(),
                    s.metric.name().to_string(),
                    b.median.to_string(),
                    b.q05.to_string(),
                    b.q95.to_string(),
                    b.reps.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Whitespace-separated columns for one metric: the step, then median,
    /// q05 and q95 for each strategy in configuration order.
    pub fn write_gnuplot<W: Write>(&self, metric: Metric, mut out: W) -> Result<()> {
        let cols: Vec<&McSummary> = self
            .config
            .strategies
            .iter()
            .filter_map(|&s| self.summary(s, metric))
            .collect();
        write!(out, "# step")?;
        for s in &cols {
            let n = s.strategy.name();
            write!(out, " {n}_median {n}_q05 {n}_q95")?;
        }
        writeln!(out)?;
        let steps = cols.iter().map(|s| s.steps.len()).max().unwrap_or(0);
        for b in 0..steps {
            write!(out, "{}", b + 1)?;
            for s in &cols {
                match s.steps.get(b) {
                    Some(v) => write!(out, " {} {} {}", v.median, v.q05, v.q95)?,
                    None => write!(out, " NaN NaN NaN")?,
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Per-step metric values of one run, padded to the budget by carrying the
/// last value forward.
struct RunSeries {
    values: [Vec<Option<f64>>; 4],
    final_sdr: Option<f64>,
}

fn run_series(ts: &TestSet, trace: &QueryTrace, budget: usize) -> Result<RunSeries> {
    let facility = utility_trajectory(ts, trace, Which::Facility)?;
    let coverage = utility_trajectory(ts, trace, Which::Coverage)?;
    let mut uus = 0usize;
    let counts: Vec<f64> = trace
        .steps
        .iter()
        .map(|s| {
            uus += usize::from(s.is_uu);
            uus as f64
        })
        .collect();
    let running = running_sdr(&trace.steps);

    let pad = |v: Vec<Option<f64>>, start: Option<f64>| -> Vec<Option<f64>> {
        let last = v.last().copied().unwrap_or(start);
        let mut v = v;
        v.resize(budget, last);
        v
    };
    let some = |v: Vec<f64>| v.into_iter().map(Some).collect::<Vec<_>>();
    Ok(RunSeries {
        values: [
            pad(some(facility), Some(0.0)),
            pad(some(coverage), Some(0.0)),
            pad(some(counts), Some(0.0)),
            pad(running, None),
        ],
        final_sdr: sdr(&trace.steps).ok(),
    })
}

struct RepOutcome {
    series: Vec<Option<RunSeries>>,
    attrition: Vec<Attrition>,
    traces: Vec<QueryTrace>,
}

fn replicate(ts_full: &TestSet, cfg: &McConfig, rep: usize) -> RepOutcome {
    let seed = cfg.seed.wrapping_add(rep as u64);
    let mut attrition = Vec::new();
    let mut series = Vec::with_capacity(cfg.strategies.len());
    let mut traces = Vec::new();

    let sample = match sample_testset(ts_full, cfg.n, seed) {
        Ok(s) => Arc::new(s),
        Err(e) => {
            for &strategy in &cfg.strategies {
                attrition.push(Attrition { rep, strategy, steps: 0, reason: e.to_string() });
                series.push(None);
            }
            return RepOutcome { series, attrition, traces };
        }
    };

    for &strategy in &cfg.strategies {
        let search_cfg = SearchConfig { seed, ..cfg.search.clone() };
        let outcome = SimulatedOracle::new(&sample).and_then(|mut oracle| {
            run_search(Arc::clone(&sample), &mut oracle, strategy, search_cfg)
        });
        match outcome {
            Ok(trace) => {
                if let Some(reason) = &trace.aborted {
                    attrition.push(Attrition {
                        rep,
                        strategy,
                        steps: trace.steps.len(),
                        reason: reason.clone(),
                    });
                } else if trace.early_stop {
                    attrition.push(Attrition {
                        rep,
                        strategy,
                        steps: trace.steps.len(),
                        reason: "ran out of eligible candidates".into(),
                    });
                }
                match run_series(&sample, &trace, cfg.search.budget) {
                    Ok(s) => series.push(Some(s)),
                    Err(e) => {
                        attrition.push(Attrition {
                            rep,
                            strategy,
                            steps: trace.steps.len(),
                            reason: e.to_string(),
                        });
                        series.push(None);
                    }
                }
                if cfg.keep_traces {
                    traces.push(trace);
                }
            }
            Err(e) => {
                attrition.push(Attrition { rep, strategy, steps: 0, reason: e.to_string() });
                series.push(None);
            }
        }
    }
    RepOutcome { series, attrition, traces }
}

/// Runs every strategy on `reps` paired samples of `ts_full`.
///
/// Replication `r` draws its sample with seed `seed + r` and runs each
/// strategy on it with its own simulated oracle; the oracles answer from the
/// same labels, so strategies see identical answers for the same point. Runs
/// that fail or stop early are listed as attrition instead of failing the
/// experiment.
pub fn monte_carlo(ts_full: &TestSet, cfg: &McConfig) -> Result<McReport> {
    if cfg.reps == 0 {
        return Err(Error::Config("replication count must be at least 1".into()));
    }
    if cfg.strategies.is_empty() {
        return Err(Error::Config("no strategies to compare".into()));
    }
    if cfg.n == 0 || cfg.n > ts_full.len() {
        return Err(Error::SampleSize { requested: cfg.n, available: ts_full.len() });
    }
    SimulatedOracle::new(ts_full)?;
    cfg.search.validate(cfg.n)?;

    let outcomes: Vec<RepOutcome> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| replicate(ts_full, cfg, rep))
        .collect();

    let budget = cfg.search.budget;
    let mut summaries = Vec::new();
    let mut final_sdr = Vec::new();
    for (si, &strategy) in cfg.strategies.iter().enumerate() {
        let runs: Vec<&RunSeries> = outcomes.iter().filter_map(|o| o.series[si].as_ref()).collect();
        for (mi, &metric) in Metric::ALL.iter().enumerate() {
            let steps = (0..budget)
                .map(|b| {
                    let vals: Vec<f64> = runs.iter().filter_map(|r| r.values[mi][b]).collect();
                    match Band::of(&vals) {
                        Some(band) => StepBand {
                            step: b + 1,
                            median: band.median,
                            q05: band.q05,
                            q95: band.q95,
                            reps: vals.len(),
                        },
                        None => StepBand {
                            step: b + 1,
                            median: f64::NAN,
                            q05: f64::NAN,
                            q95: f64::NAN,
                            reps: 0,
                        },
                    }
                })
                .collect();
            summaries.push(McSummary { strategy, metric, reps: runs.len(), steps });
        }
        let sdrs: Vec<f64> = runs.iter().filter_map(|r| r.final_sdr).collect();
        final_sdr.push(StrategySdr {
            strategy,
            band: Band::of(&sdrs),
            defined: sdrs.len(),
        });
    }

    let mut attrition = Vec::new();
    let mut traces = Vec::new();
    for o in outcomes {
        attrition.extend(o.attrition);
        if cfg.keep_traces {
            traces.push(o.traces);
        }
    }
    Ok(McReport {
        config: cfg.clone(),
        summaries,
        final_sdr,
        attrition,
        traces,
    })
}
