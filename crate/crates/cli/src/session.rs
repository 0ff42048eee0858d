//! Interactive search sessions driven by a human oracle.
//!
//! A session wraps a step-wise [`Search`] and persists every transition as
//! one JSON line (`created`, `queried`, `labeled`, `aborted`). Replaying the
//! log through the same search code rebuilds the identical state.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use uufind::search::Pending;
use uufind::{PhiModel, Search, SearchConfig, StepRecord, Strategy, TestSet};

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("{0}")]
    NotFound(String),

    #[error("{0}")]
    Conflict(String),

    #[error("{message}")]
    BadRequest {
        message: String,
        fields: BTreeMap<String, String>,
    },

    #[error("session log {path}: {message}")]
    Log { path: PathBuf, message: String },

    #[error(transparent)]
    Core(#[from] uufind::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SessionError {
    pub fn bad_request(message: impl Into<String>) -> Self {
        SessionError::BadRequest {
            message: message.into(),
            fields: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    AwaitingLabel,
    Complete,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        dataset: String,
        strategy: Strategy,
        config: SearchConfig,
        #[serde(default)]
        classes: Vec<String>,
    },
    Queried {
        b: usize,
        point_id: String,
    },
    Labeled {
        b: usize,
        point_id: String,
        label: String,
    },
    Aborted {
        reason: String,
    },
}

/// What the labeler sees for a point.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Display {
    Uri { uri: String },
    /// Derived coordinates only; a human cannot judge these.
    Features { features: Vec<f64>, human_judgeable: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub queried: usize,
    pub uu_count: usize,
    pub sdr: Option<f64>,
    #[serde(rename = "W")]
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryView {
    pub session_id: String,
    pub point_id: String,
    pub b: usize,
    pub budget: usize,
    pub confidence: f64,
    pub predicted_class: String,
    pub phi: f64,
    pub gain: f64,
    pub display: Display,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelOutcome {
    pub session_id: String,
    pub point_id: String,
    pub b: usize,
    pub is_uu: bool,
    #[serde(rename = "W")]
    pub w: f64,
    pub uu_count: usize,
    pub sdr: Option<f64>,
    pub status: Status,
    pub next_available: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub dataset: String,
    pub strategy: Strategy,
    pub status: Status,
    pub queried: usize,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UuView {
    pub b: usize,
    pub point_id: String,
    pub confidence: f64,
    pub predicted_class: String,
    pub label: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub session_id: String,
    pub dataset: String,
    pub strategy: Strategy,
    pub status: Status,
    pub budget: usize,
    pub config: SearchConfig,
    pub steps: Vec<StepRecord>,
    pub sdr: Option<f64>,
    pub sdr_defined: bool,
    pub uu_count: usize,
    pub uus: Vec<UuView>,
    /// W after each labeled step.
    pub utility_trajectory: Vec<f64>,
    pub phi_model: PhiModel,
    pub early_stop: bool,
    pub aborted: Option<String>,
}

struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    fn append(&mut self, event: &Event) -> Result<(), SessionError> {
        let mut line = serde_json::to_vec(event).map_err(uufind::Error::from)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        Ok(())
    }
}

pub struct Session {
    id: String,
    dataset: String,
    classes: BTreeSet<String>,
    extra_classes: Vec<String>,
    search: Search,
    pending: Option<Pending>,
    status: Status,
    log: Option<EventLog>,
}

impl Session {
    /// Starts a session and selects its first query. With `log_dir`, the
    /// session is persisted to `<log_dir>/<id>.jsonl`.
    pub fn create(
        id: String,
        dataset: String,
        ts: Arc<TestSet>,
        strategy: Strategy,
        config: SearchConfig,
        classes: Vec<String>,
        log_dir: Option<&Path>,
    ) -> Result<Self, SessionError> {
        let mut session = Self::start(id, dataset, ts, strategy, config, classes)?;
        if let Some(dir) = log_dir {
            let path = dir.join(format!("{}.jsonl", session.id));
            let file = OpenOptions::new().create_new(true).append(true).open(&path)?;
            session.log = Some(EventLog { path, file });
            session.write(&Event::Created {
                session_id: session.id.clone(),
                dataset: session.dataset.clone(),
                strategy,
                config: session.search.config().clone(),
                classes: session.extra_classes.clone(),
            })?;
            session.log_pending()?;
        }
        Ok(session)
    }

    fn start(
        id: String,
        dataset: String,
        ts: Arc<TestSet>,
        strategy: Strategy,
        config: SearchConfig,
        extra_classes: Vec<String>,
    ) -> Result<Self, SessionError> {
        let mut classes = ts.predicted_classes();
        classes.extend(extra_classes.iter().cloned());
        let search = Search::new(ts, strategy, config)?;
        let mut session = Session {
            id,
            dataset,
            classes,
            extra_classes,
            search,
            pending: None,
            status: Status::AwaitingLabel,
            log: None,
        };
        session.advance();
        Ok(session)
    }

    /// Rebuilds a session from its event log and reopens the log for appends.
    pub fn replay(
        path: &Path,
        datasets: &BTreeMap<String, Arc<TestSet>>,
    ) -> Result<Self, SessionError> {
        let log_err = |message: String| SessionError::Log {
            path: path.to_path_buf(),
            message,
        };
        let reader = BufReader::new(File::open(path)?);
        let mut session: Option<Session> = None;
        let mut pending_logged = false;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let event: Event = serde_json::from_str(&line)
                .map_err(|e| log_err(format!("line {}: {e}", lineno + 1)))?;
            match (&mut session, event) {
                (None, Event::Created { session_id, dataset, strategy, config, classes }) => {
                    let ts = datasets
                        .get(&dataset)
                        .ok_or_else(|| log_err(format!("dataset `{dataset}` is not registered")))?;
                    session = Some(Self::start(
                        session_id,
                        dataset,
                        Arc::clone(ts),
                        strategy,
                        config,
                        classes,
                    )?);
                }
                (None, _) => return Err(log_err("log does not start with a created event".into())),
                (Some(_), Event::Created { .. }) => {
                    return Err(log_err(format!("line {}: second created event", lineno + 1)))
                }
                (Some(s), Event::Queried { b, point_id }) => {
                    match &s.pending {
                        Some(p) if p.id == point_id && p.b == b => pending_logged = true,
                        other => {
                            return Err(log_err(format!(
                                "line {}: logged query {point_id} at step {b} but replay selected {:?}",
                                lineno + 1,
                                other.as_ref().map(|p| (&p.id, p.b))
                            )))
                        }
                    }
                }
                (Some(s), Event::Labeled { b, point_id, label }) => {
                    if s.pending.as_ref().map(|p| p.b) != Some(b) {
                        return Err(log_err(format!("line {}: label for step {b} out of order", lineno + 1)));
                    }
                    s.apply_label(&point_id, &label)
                        .map_err(|e| log_err(format!("line {}: {e}", lineno + 1)))?;
                    pending_logged = false;
                }
                (Some(s), Event::Aborted { reason }) => {
                    s.apply_abort(reason);
                }
            }
        }
        let mut session = session.ok_or_else(|| log_err("empty log".into()))?;
        let file = OpenOptions::new().append(true).open(path)?;
        session.log = Some(EventLog {
            path: path.to_path_buf(),
            file,
        });
        if !pending_logged {
            session.log_pending()?;
        }
        Ok(session)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log.as_ref().map(|l| l.path.as_path())
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.search.trace().steps
    }

    pub fn trace(&self) -> &uufind::QueryTrace {
        self.search.trace()
    }

    pub fn info(&self) -> SessionInfo {
        SessionInfo {
            session_id: self.id.clone(),
            dataset: self.dataset.clone(),
            strategy: self.search.strategy(),
            status: self.status,
            queried: self.steps().len(),
            budget: self.search.config().budget,
        }
    }

    pub fn metrics(&self) -> Metrics {
        let steps = self.steps();
        Metrics {
            queried: steps.len(),
            uu_count: self.search.trace().uu_count(),
            sdr: uufind::eval::sdr(steps).ok(),
            w: self.search.utility(),
        }
    }

    /// The pending query, or a conflict once the session is over.
    pub fn next(&self) -> Result<QueryView, SessionError> {
        let pending = self.pending.as_ref().ok_or_else(|| {
            SessionError::Conflict(format!("session {} is {}", self.id, self.status_name()))
        })?;
        let ts = self.search.test_set();
        let point = ts.point(pending.idx);
        let display = match point.display_uri() {
            Some(uri) => Display::Uri { uri: uri.to_string() },
            None => Display::Features {
                features: point.features().to_vec(),
                human_judgeable: false,
            },
        };
        Ok(QueryView {
            session_id: self.id.clone(),
            point_id: pending.id.clone(),
            b: pending.b,
            budget: self.search.config().budget,
            confidence: pending.confidence,
            predicted_class: point.predicted_class().to_string(),
            phi: pending.phi,
            gain: pending.gain,
            display,
            metrics: self.metrics(),
        })
    }

    /// Records the human's answer for the pending query.
    pub fn label(&mut self, point_id: &str, label: &str) -> Result<LabelOutcome, SessionError> {
        let b = match &self.pending {
            None => {
                return Err(SessionError::Conflict(format!(
                    "session {} is {}",
                    self.id,
                    self.status_name()
                )))
            }
            Some(p) if p.id != point_id => {
                return Err(SessionError::Conflict(format!(
                    "point {point_id} is not the pending query (pending: {})",
                    p.id
                )))
            }
            Some(p) => p.b,
        };
        if !self.classes.contains(label) {
            let known: Vec<&str> = self.classes.iter().map(String::as_str).collect();
            return Err(SessionError::BadRequest {
                message: format!("unknown class `{label}`"),
                fields: BTreeMap::from([("label".to_string(), format!("must be one of {known:?}"))]),
            });
        }
        self.write(&Event::Labeled {
            b,
            point_id: point_id.to_string(),
            label: label.to_string(),
        })?;
        let outcome = self.apply_label(point_id, label)?;
        self.log_pending()?;
        Ok(outcome)
    }

    pub fn abort(&mut self, reason: String) -> Result<(), SessionError> {
        if self.status != Status::AwaitingLabel {
            return Err(SessionError::Conflict(format!(
                "session {} is {}",
                self.id,
                self.status_name()
            )));
        }
        self.write(&Event::Aborted { reason: reason.clone() })?;
        self.apply_abort(reason);
        Ok(())
    }

    pub fn summary(&self) -> Summary {
        let trace = self.search.trace();
        let ts = self.search.test_set();
        let sdr = uufind::eval::sdr(&trace.steps).ok();
        let uus = trace
            .steps
            .iter()
            .filter(|s| s.is_uu)
            .map(|s| UuView {
                b: s.b,
                point_id: s.id.clone(),
                confidence: s.c,
                predicted_class: ts
                    .index_of(&s.id)
                    .map(|i| ts.point(i).predicted_class().to_string())
                    .unwrap_or_default(),
                label: s.label.clone(),
            })
            .collect();
        Summary {
            session_id: self.id.clone(),
            dataset: self.dataset.clone(),
            strategy: self.search.strategy(),
            status: self.status,
            budget: self.search.config().budget,
            config: self.search.config().clone(),
            steps: trace.steps.clone(),
            sdr,
            sdr_defined: sdr.is_some(),
            uu_count: trace.uu_count(),
            uus,
            utility_trajectory: trace.steps.iter().map(|s| s.w).collect(),
            phi_model: self.search.phi_model(),
            early_stop: trace.early_stop,
            aborted: trace.aborted.clone(),
        }
    }

    fn apply_label(&mut self, point_id: &str, label: &str) -> Result<LabelOutcome, SessionError> {
        let step = self.search.submit(point_id, label)?;
        let (b, is_uu, w) = (step.b, step.is_uu, step.w);
        self.advance();
        let metrics = self.metrics();
        Ok(LabelOutcome {
            session_id: self.id.clone(),
            point_id: point_id.to_string(),
            b,
            is_uu,
            w,
            uu_count: metrics.uu_count,
            sdr: metrics.sdr,
            status: self.status,
            next_available: self.pending.is_some(),
        })
    }

    fn apply_abort(&mut self, reason: String) {
        self.search.abort(reason);
        self.pending = None;
        self.status = Status::Aborted;
    }

    fn advance(&mut self) {
        self.pending = self.search.pending().cloned();
        if self.pending.is_none() && self.status == Status::AwaitingLabel {
            self.status = Status::Complete;
        }
    }

    fn log_pending(&mut self) -> Result<(), SessionError> {
        if let Some(p) = &self.pending {
            let event = Event::Queried {
                b: p.b,
                point_id: p.id.clone(),
            };
            self.write(&event)?;
        }
        Ok(())
    }

    fn write(&mut self, event: &Event) -> Result<(), SessionError> {
        match &mut self.log {
            Some(log) => log.append(event),
            None => Ok(()),
        }
    }

    fn status_name(&self) -> &'static str {
        match self.status {
            Status::AwaitingLabel => "awaiting a label",
            Status::Complete => "complete",
            Status::Aborted => "aborted",
        }
    }
}
