//! Argument parsing and the non-service subcommands.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use uufind::eval::{self, Band, McConfig, Metric, ProfileOptions, Smoother, Which};
use uufind::features::{derive_features, SvdOptions};
use uufind::search::{read_steps_jsonl, Estimator};
use uufind::{
    load_testset, run_search, Format, QueryTrace, SearchConfig, SimulatedOracle, StepRecord, Strategy, TestSet,
};

use crate::service::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "uufind", version, about = "Search a classifier's test set for confident mistakes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one strategy against the dataset's own labels and write the trace as JSONL.
    Search(SearchArgs),
    /// Compare strategies over repeated subsamples and write per-step bands.
    Mc(McArgs),
    /// Estimate accuracy as a function of confidence.
    Profile(ProfileArgs),
    /// Start the labeling session service.
    Serve(ServeArgs),
    /// Summarize trace files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Test set (.csv or .jsonl).
    pub data: PathBuf,
    /// Only misclassifications predicted as this class count as discoveries.
    #[arg(long)]
    pub critical_class: Option<String>,
    /// Replace the features by their top-k SVD scores.
    #[arg(long, value_name = "K")]
    pub svd: Option<usize>,
    /// Center feature columns before the SVD.
    #[arg(long, requires = "svd")]
    pub center: bool,
}

#[derive(Debug, Args)]
pub struct SearchOpts {
    #[arg(long, default_value_t = 100)]
    pub budget: usize,
    #[arg(long, default_value_t = 0.65)]
    pub tau: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// φ̂ estimator overriding the strategy's default.
    #[arg(long, value_parser = parse_estimator)]
    pub estimator: Option<Estimator>,
    /// k for cluster rates and bandit arms.
    #[arg(long, default_value_t = 10)]
    pub clusters: usize,
    /// Only points with confidence ≥ τ are facility-locations candidates.
    #[arg(long)]
    pub restrict_candidates: bool,
    /// Most-uncertain search continues below τ when the points above it run out.
    #[arg(long)]
    pub allow_below_tau: bool,
    /// UCB1 exploration weight.
    #[arg(long, default_value_t = 1.0)]
    pub exploration: f64,
}

impl SearchOpts {
    fn config(&self) -> SearchConfig {
        SearchConfig {
            budget: self.budget,
            tau: self.tau,
            clusters: self.clusters,
            exploration: self.exploration,
            estimator: self.estimator,
            restrict_candidates: self.restrict_candidates,
            allow_below_tau: self.allow_below_tau,
            seed: self.seed,
            ..SearchConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_parser = parse_strategy, default_value = "fl")]
    pub strategy: Strategy,
    #[command(flatten)]
    pub opts: SearchOpts,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum McFormat {
    Csv,
    Json,
    Gnuplot,
}

#[derive(Debug, Args)]
pub struct McArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated strategies.
    #[arg(long, value_parser = parse_strategy, value_delimiter = ',', default_value = "fl,mu,cov,bandit")]
    pub strategies: Vec<Strategy>,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    /// Sample size per replication.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[command(flatten)]
    pub opts: SearchOpts,
    #[arg(long, value_enum, default_value_t = McFormat::Csv)]
    pub format: McFormat,
    /// Metric for gnuplot output.
    #[arg(long, value_parser = parse_metric, default_value = "facility_gain")]
    pub metric: Metric,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Fixed spline roughness penalty; chosen by generalized cross-validation when absent.
    #[arg(long, conflicts_with = "binned", value_parser = parse_positive)]
    pub bandwidth: Option<f64>,
    /// Use equal-count bin means instead of a spline.
    #[arg(long, value_name = "BINS")]
    pub binned: Option<usize>,
    #[arg(long, default_value_t = 101)]
    pub grid: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Datasets as NAME=PATH, or PATH to name it after the file stem.
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<String>,
    /// Directory for session event logs; existing logs are replayed.
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    #[arg(long, env = "UUFIND_PORT", default_value_t = 8080)]
    pub port: u16,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Trace files written by `search`.
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
    /// Test set the traces ran on; adds utility trajectories.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub critical_class: Option<String>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    pub format: ReportFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: uufind::Error| e.to_string())
}

fn parse_estimator(s: &str) -> Result<Estimator, String> {
    s.parse().map_err(|e: uufind::Error| e.to_string())
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e: uufind::Error| e.to_string())
}

fn parse_positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("`{s}` is not a positive number")),
    }
}

pub fn load(path: &Path) -> anyhow::Result<TestSet> {
    let format = Format::from_path(path)
        .ok_or_else(|| anyhow!("{}: expected a .csv or .jsonl file", path.display()))?;
    load_testset(path, format).with_context(|| format!("loading {}", path.display()))
}

impl DataArgs {
    fn load(&self) -> anyhow::Result<TestSet> {
        let mut ts = load(&self.data)?;
        if let Some(k) = self.svd {
            let raw = uufind::features::feature_matrix(&ts);
            let opts = SvdOptions { center: self.center, ..SvdOptions::default() };
            let derived = derive_features(&raw, k, opts)?;
            ts = ts.with_features(derived.rows())?;
        }
        if let Some(class) = &self.critical_class {
            ts = ts.with_critical_class(class.clone());
        }
        Ok(ts)
    }
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Search(args) => search(args),
        Command::Mc(args) => mc(args),
        Command::Profile(args) => profile(args),
        Command::Serve(args) => serve(args),
        Command::Report(args) => report(args),
    }
}

fn search(args: SearchArgs) -> anyhow::Result<()> {
    let ts = Arc::new(args.data.load()?);
    let mut oracle = SimulatedOracle::new(&ts)?;
    let trace = run_search(Arc::clone(&ts), &mut oracle, args.strategy, args.opts.config())?;
    if let Some(reason) = &trace.aborted {
        log::warn!("search aborted after {} steps: {reason}", trace.steps.len());
    } else if trace.early_stop {
        log::warn!("search ran out of candidates after {} steps", trace.steps.len());
    }
    let mut out = output(args.out.as_deref())?;
    trace.write_jsonl(&mut out)?;
    out.flush()?;
    Ok(())
}

fn mc(args: McArgs) -> anyhow::Result<()> {
    let ts = args.data.load()?;
    let cfg = McConfig {
        strategies: args.strategies,
        n: args.n,
        reps: args.reps,
        seed: args.opts.seed,
        search: args.opts.config(),
        keep_traces: false,
    };
    let report = eval::monte_carlo(&ts, &cfg)?;
    for a in &report.attrition {
        log::warn!("rep {} {}: stopped after {} steps: {}", a.rep, a.strategy, a.steps, a.reason);
    }
    let mut out = output(args.out.as_deref())?;
    match args.format {
        McFormat::Csv => report.write_csv(&mut out)?,
        McFormat::Json => {
            serde_json::to_writer_pretty(&mut out, &report)?;
            writeln!(out)?;
        }
        McFormat::Gnuplot => report.write_gnuplot(args.metric, &mut out)?,
    }
    out.flush()?;
    Ok(())
}

fn profile(args: ProfileArgs) -> anyhow::Result<()> {
    let ts = args.data.load()?;
    let smoother = match args.binned {
        Some(bins) => Smoother::Binned { bins },
        None => Smoother::Spline { smoothing: args.bandwidth },
    };
    let opts = ProfileOptions { smoother, grid_points: args.grid };
    let profile = eval::overconfidence_profile(&ts, &opts)?;
    let mut out = output(args.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &profile)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let mut datasets = BTreeMap::new();
    for entry in &args.datasets {
        let (name, path) = match entry.split_once('=') {
            Some((name, path)) => (name.to_string(), PathBuf::from(path)),
            None => {
                let path = PathBuf::from(entry);
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| anyhow!("cannot name dataset {entry}"))?
                    .to_string();
                (stem, path)
            }
        };
        let ts = load(&path)?;
        log::info!("dataset {name}: {} points, {} features", ts.len(), ts.dim());
        if datasets.insert(name.clone(), Arc::new(ts)).is_some() {
            bail!("dataset name `{name}` given twice");
        }
    }
    let state = Arc::new(AppState::new(datasets, args.log_dir)?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(service::serve(state, (args.host, args.port).into()))
}

#[derive(Debug, Serialize)]
struct TraceReport {
    trace: String,
    steps: usize,
    uu_count: usize,
    sdr: Option<f64>,
    running_sdr: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    facility_gain: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    coverage_utility: Option<Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct Report {
    traces: Vec<TraceReport>,
    /// Band of per-trace SDRs over traces where it is defined.
    sdr: Option<Band>,
}

fn report(args: ReportArgs) -> anyhow::Result<()> {
    let ts = match &args.data {
        Some(path) => {
            let mut ts = load(path)?;
            if let Some(class) = &args.critical_class {
                ts = ts.with_critical_class(class.clone());
            }
            Some(ts)
        }
        None => None,
    };
    let d_cap = ts.as_ref().map(TestSet::diameter);

    let mut traces = Vec::new();
    let mut all_steps: Vec<(String, Vec<StepRecord>)> = Vec::new();
    for path in &args.traces {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let steps = read_steps_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
        let name = path.display().to_string();
        let (facility_gain, coverage_utility) = match (&ts, d_cap) {
            (Some(ts), Some(d_cap)) => {
                let trace = QueryTrace {
                    strategy: Strategy::FacilityLocations,
                    config: SearchConfig::default(),
                    seed: 0,
                    d_cap,
                    steps: steps.clone(),
                    early_stop: false,
                    aborted: None,
                };
                let f = eval::utility_trajectory(ts, &trace, Which::Facility)
                    .with_context(|| format!("replaying {name}"))?;
                let c = eval::utility_trajectory(ts, &trace, Which::Coverage)?;
                (Some(f), Some(c))
            }
            _ => (None, None),
        };
        traces.push(TraceReport {
            trace: name.clone(),
            steps: steps.len(),
            uu_count: steps.iter().filter(|s| s.is_uu).count(),
            sdr: eval::sdr(&steps).ok(),
            running_sdr: eval::running_sdr(&steps),
            facility_gain,
            coverage_utility,
        });
        all_steps.push((name, steps));
    }
    let sdrs: Vec<f64> = traces.iter().filter_map(|t| t.sdr).collect();
    let report = Report { sdr: Band::of(&sdrs), traces };

    let mut out = output(args.out.as_deref())?;
    match args.format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, &report)?;
            writeln!(out)?;
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            let mut header = vec!["trace", "b", "id", "c", "phi", "label", "is_uu", "W", "gain", "running_sdr"];
            if ts.is_some() {
                header.extend(["facility_gain", "coverage_utility"]);
            }
            w.write_record(&header)?;
            for ((name, steps), tr) in all_steps.iter().zip(&report.traces) {
                for (i, s) in steps.iter().enumerate() {
                    let mut row = vec![
                        name.clone(),
                        s.b.to_string(),
                        s.id.clone(),
                        s.c.to_string(),
                        s.phi.to_string(),
                        s.label.clone(),
                        s.is_uu.to_string(),
                        s.w.to_string(),
                        s.gain.to_string(),
                        tr.running_sdr[i].map(|v| v.to_string()).unwrap_or_default(),
                    ];
                    if let (Some(f), Some(c)) = (&tr.facility_gain, &tr.coverage_utility) {
                        row.push(f[i].to_string());
                        row.push(c[i].to_string());
                    }
                    w.write_record(&row)?;
                }
            }
            w.flush()?;
        }
    }
    out.flush()?;
    Ok(())
}
