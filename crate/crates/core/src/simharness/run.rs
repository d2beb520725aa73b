use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{secs_to_ns, HostStream, Scenario, ScenarioError};
use crate::lineproto::serialize_batch;
use crate::router::{JobSignal, Router};

/// Where a scenario's lines and signals go.
pub trait Sink: Sync {
    fn write(&self, db: &str, body: &str) -> Result<(), SinkError>;
    fn signal(&self, signal: &JobSignal) -> Result<(), SinkError>;
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SinkError {
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("endpoint rejected request: {0}")]
    Rejected(String),
}

/// Talks to a router over its HTTP interface.
pub struct HttpSink {
    client: reqwest::blocking::Client,
    url: String,
}

impl HttpSink {
    pub fn new(url: &str) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .expect("http client");
        HttpSink {
            client,
            url: url.trim_end_matches('/').to_owned(),
        }
    }

    fn check(resp: reqwest::Result<reqwest::blocking::Response>) -> Result<(), SinkError> {
        let resp = resp.map_err(|e| SinkError::Unreachable(e.to_string()))?;
        let status = resp.status();
        if status.is_success() {
            return Ok(());
        }
        let body = resp.text().unwrap_or_default();
        if status.is_server_error() {
            Err(SinkError::Unreachable(format!("status {status}: {body}")))
        } else {
            Err(SinkError::Rejected(format!("status {status}: {body}")))
        }
    }
}

impl Sink for HttpSink {
    fn write(&self, db: &str, body: &str) -> Result<(), SinkError> {
        Self::check(
            self.client
                .post(format!("{}/write", self.url))
                .query(&[("db", db)])
                .body(body.to_owned())
                .send(),
        )
    }

    fn signal(&self, signal: &JobSignal) -> Result<(), SinkError> {
        let body = serde_json::to_string(signal).expect("signal json");
        Self::check(
            self.client
                .post(format!("{}/job", self.url))
                .header("content-type", "application/json")
                .body(body)
                .send(),
        )
    }
}

/// Calls an in-process router directly.
pub struct RouterSink(pub Arc<Router>);

impl Sink for RouterSink {
    fn write(&self, db: &str, body: &str) -> Result<(), SinkError> {
        self.0
            .handle_write(db, body, crate::now_ns())
            .map(|_| ())
            .map_err(|e| SinkError::Rejected(e.to_string()))
    }

    fn signal(&self, signal: &JobSignal) -> Result<(), SinkError> {
        self.0
            .handle_job_signal(signal.clone(), crate::now_ns())
            .map(|_| ())
            .map_err(|e| SinkError::Rejected(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Wall-clock speedup; `None` replays without sleeping.
    pub time_scale: Option<f64>,
    /// Timestamp of scenario offset zero, in ns.
    pub epoch_ns: i64,
    /// Replaces the scenario seed.
    pub seed: Option<u64>,
}

impl RunOptions {
    pub fn virtual_time(epoch_ns: i64) -> Self {
        RunOptions {
            time_scale: None,
            epoch_ns,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignalRecord {
    pub job_id: String,
    pub action: &'static str,
    pub offset_secs: f64,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub epoch_ns: i64,
    pub ticks: usize,
    pub lines_per_host: BTreeMap<String, u64>,
    pub lines_sent: u64,
    pub batches_sent: u64,
    pub signals: Vec<SignalRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    /// Delivery failed; `report` covers what was sent before.
    #[error("{error}")]
    Aborted {
        error: SinkError,
        report: Box<ScenarioReport>,
    },
}

struct Scheduled {
    offset_ns: i64,
    signal: JobSignal,
    record: SignalRecord,
}

fn schedule(scenario: &Scenario, epoch_ns: i64) -> Vec<Scheduled> {
    let mut out = Vec::with_capacity(scenario.jobs.len() * 2);
    for job in &scenario.jobs {
        for (action, secs) in [("start", job.start_secs), ("end", job.end_secs)] {
            let offset_ns = secs_to_ns(secs);
            let timestamp = epoch_ns + offset_ns;
            let signal = if action == "start" {
                JobSignal::start(&job.id, &job.user, job.hosts.iter().cloned())
            } else {
                JobSignal::end(&job.id)
            }
            .at(timestamp);
            out.push(Scheduled {
                offset_ns,
                signal,
                record: SignalRecord {
                    job_id: job.id.clone(),
                    action,
                    offset_secs: secs,
                    timestamp,
                },
            });
        }
    }
    // Ends before starts at equal offsets so a host can switch jobs.
    out.sort_by(|a, b| {
        (a.offset_ns, a.record.action != "end", &a.record.job_id).cmp(&(
            b.offset_ns,
            b.record.action != "end",
            &b.record.job_id,
        ))
    });
    out
}

/// Replays `scenario` into `sink`.
///
/// At each tick the due job signals go out first, in order; then every host
/// sends its batch for that tick concurrently. Signals after the last tick
/// are sent at the end.
pub fn run_scenario(
    scenario: &Scenario,
    sink: &dyn Sink,
    options: &RunOptions,
) -> Result<ScenarioReport, SimError> {
    scenario.validate()?;
    let mut scenario = scenario.clone();
    if let Some(seed) = options.seed {
        scenario.seed = seed;
    }
    if let Some(scale) = options.time_scale {
        if scale.is_nan() || scale <= 0.0 {
            return Err(ScenarioError::Invalid("time scale must be positive".into()).into());
        }
    }
    let mut report = ScenarioReport {
        scenario: scenario.name.clone(),
        epoch_ns: options.epoch_ns,
        lines_per_host: scenario.hosts.iter().map(|h| (h.clone(), 0)).collect(),
        ..ScenarioReport::default()
    };
    let mut streams: Vec<(String, HostStream)> = scenario
        .hosts
        .iter()
        .map(|h| (h.clone(), scenario.stream(h, options.epoch_ns)))
        .collect();
    let signals = schedule(&scenario, options.epoch_ns);
    let mut pending = signals.iter().peekable();
    let started = Instant::now();
    let abort = |error: SinkError, report: &ScenarioReport| SimError::Aborted {
        error,
        report: Box::new(report.clone()),
    };

    for offset in scenario.ticks() {
        if let Some(scale) = options.time_scale {
            let due = started + Duration::from_secs_f64(offset as f64 / 1e9 / scale);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        while let Some(s) = pending.next_if(|s| s.offset_ns <= offset) {
            sink.signal(&s.signal).map_err(|e| abort(e, &report))?;
            report.signals.push(s.record.clone());
        }
        let results: Vec<(String, Result<usize, SinkError>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = streams
                .iter_mut()
                .map(|(host, stream)| {
                    let db = scenario.db.as_str();
                    let host = host.clone();
                    scope.spawn(move || {
                        let Some(tick) = stream.next() else {
                            return (host, Ok(0));
                        };
                        let body =
                            serialize_batch(&tick.metrics).expect("generated metrics serialize");
                        let n = tick.metrics.len();
                        (host, sink.write(db, &body).map(|()| n))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("emitter thread"))
                .collect()
        });
        report.ticks += 1;
        let mut failure = None;
        for (host, result) in results {
            match result {
                Ok(n) => {
                    *report.lines_per_host.entry(host).or_default() += n as u64;
                    report.lines_sent += n as u64;
                    report.batches_sent += 1;
                }
                Err(e) => failure = failure.or(Some(e)),
            }
        }
        if let Some(e) = failure {
            return Err(abort(e, &report));
        }
    }
    for s in pending {
        sink.signal(&s.signal).map_err(|e| abort(e, &report))?;
        report.signals.push(s.record.clone());
    }
    Ok(report)
}
