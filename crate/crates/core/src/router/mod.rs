//! Metrics router: the write pipeline behind the HTTP surface.
//!
//! A write is parsed, stamped with the receipt time where the wire carried no
//! timestamp, enriched with the tags of jobs active on the origin host, stored
//! in the requested database, duplicated into per-user databases and published
//! on the bus. Job signals update the tag store and are stored as `job_event`
//! annotation rows.

mod bus;
mod config;
pub mod http;
mod retry;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::Notify;

use crate::jobtags::{
    DiagnosticsSnapshot, EnrichError, JobError, JobRecord, TagStore, JOBID_TAG, USER_TAG,
};
use crate::lineproto::{self, LineError, Metric};
use crate::tsstore::{
    self, BoxFuture, ForwardError, ForwardTarget, HttpForwarder, Store, StoreConfig, StoreError,
};

pub use bus::{
    metrics_topic, serve_tcp, Bus, BusClient, BusMessage, Subscription, TOPIC_JOB_END,
    TOPIC_JOB_START,
};
pub use config::{BackendConfig, ConfigError, RouteConfig, ENV_BACKEND_URL, ENV_LISTEN};
pub use retry::{FlushReport, PendingBatch, RetryBuffer, RetryStats};

#[derive(Debug, thiserror::Error)]
pub enum RouterError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, thiserror::Error)]
pub enum WriteError {
    #[error("invalid database name {0:?}")]
    InvalidDatabase(String),
    #[error("all {} lines rejected", .0.len())]
    AllLinesRejected(Vec<(usize, LineError)>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WriteOutcome {
    pub accepted: usize,
    pub rejected: Vec<(usize, LineError)>,
    /// Rows produced by enrichment and handed to the global database.
    pub rows: usize,
    /// Rows copied into per-user databases.
    pub duplicated: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalAction {
    Start,
    End,
}

/// Job signal document accepted on `POST /job`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSignal {
    pub action: SignalAction,
    pub jobid: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hosts: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
}

impl JobSignal {
    pub fn start<I, S>(jobid: &str, user: &str, hosts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        JobSignal {
            action: SignalAction::Start,
            jobid: jobid.into(),
            user: Some(user.into()),
            hosts: Some(hosts.into_iter().map(Into::into).collect()),
            tags: None,
            timestamp: None,
        }
    }

    pub fn end(jobid: &str) -> Self {
        JobSignal {
            action: SignalAction::End,
            jobid: jobid.into(),
            user: None,
            hosts: None,
            tags: None,
            timestamp: None,
        }
    }

    pub fn at(mut self, timestamp: i64) -> Self {
        self.timestamp = Some(timestamp);
        self
    }

    fn document(record: &JobRecord, action: SignalAction) -> Self {
        JobSignal {
            action,
            jobid: record.job_id.clone(),
            user: Some(record.user.clone()),
            hosts: Some(record.hosts.iter().cloned().collect()),
            tags: (!record.extra_tags.is_empty()).then(|| record.extra_tags.clone()),
            timestamp: Some(match action {
                SignalAction::Start => record.start_time,
                SignalAction::End => record.end_time.unwrap_or(record.start_time),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SignalError {
    #[error("invalid signal: {0}")]
    Invalid(String),
    #[error(transparent)]
    Job(#[from] JobError),
}

/// Receives job lifecycle notifications. Implementations must return quickly;
/// they run on the signal path.
pub trait JobHook: Send + Sync {
    fn on_job_start(&self, job: &JobRecord);
    fn on_job_end(&self, job: &JobRecord);
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct HealthReport {
    pub lines_received: u64,
    pub lines_rejected: u64,
    pub lines_dropped: u64,
    pub active_jobs: usize,
    pub rows_written: u64,
    pub rows_duplicated: u64,
    pub rows_job_tagged: u64,
    pub signals_received: u64,
    pub signals_rejected: u64,
    pub bus_published: u64,
    pub bus_dropped: u64,
    pub storage_errors: u64,
    pub diagnostics: DiagnosticsSnapshot,
    pub retry: RetryStats,
}

#[derive(Default)]
struct Counters {
    lines_received: AtomicU64,
    lines_rejected: AtomicU64,
    rows_written: AtomicU64,
    rows_duplicated: AtomicU64,
    rows_job_tagged: AtomicU64,
    signals_received: AtomicU64,
    signals_rejected: AtomicU64,
    storage_errors: AtomicU64,
}

fn bump(c: &AtomicU64, n: usize) {
    c.fetch_add(n as u64, Ordering::Relaxed);
}

/// Writes into the embedded store; used when draining the retry buffer.
struct EmbeddedTarget(Arc<Store>);

impl ForwardTarget for EmbeddedTarget {
    fn forward<'a>(
        &'a self,
        db: &'a str,
        batch: &'a str,
    ) -> BoxFuture<'a, Result<(), ForwardError>> {
        Box::pin(async move {
            let parsed = lineproto::parse_batch(batch);
            if let Some((idx, e)) = parsed.errors.first() {
                return Err(ForwardError::RemoteRejected {
                    status: 400,
                    body: format!("line {idx}: {e}"),
                });
            }
            self.0
                .write_points(db, &parsed.metrics)
                .map(|_| ())
                .map_err(store_to_forward)
        })
    }
}

fn store_to_forward(e: StoreError) -> ForwardError {
    match e {
        StoreError::StorageFull(_) | StoreError::Io(_) => ForwardError::Unreachable(e.to_string()),
        other => ForwardError::RemoteRejected {
            status: 400,
            body: other.to_string(),
        },
    }
}

struct Backend {
    store: Option<Arc<Store>>,
    target: Arc<dyn ForwardTarget>,
    buffer: RetryBuffer,
    notify: Notify,
    retry_interval: Duration,
}

pub struct Router {
    config: RouteConfig,
    tags: TagStore,
    backend: Backend,
    bus: Option<Arc<Bus>>,
    counters: Counters,
    hooks: RwLock<Vec<Arc<dyn JobHook>>>,
}

impl Router {
    /// Builds the router and its backend from the configuration.
    pub fn new(config: RouteConfig) -> Result<Self, RouterError> {
        config.validate()?;
        match config.backend.clone() {
            BackendConfig::Embedded { dir, sync } => {
                let store = Store::open(StoreConfig {
                    dir,
                    sync,
                    ..Default::default()
                })?;
                Ok(Self::with_store(config, Arc::new(store)))
            }
            BackendConfig::Forward { url, .. } => Ok(Self::with_forward_target(
                config,
                Arc::new(HttpForwarder::new(url)),
            )),
        }
    }

    /// Embedded backend over a caller-provided store, shared with analysis
    /// and dashboard generation.
    pub fn with_store(config: RouteConfig, store: Arc<Store>) -> Self {
        let target = Arc::new(EmbeddedTarget(Arc::clone(&store)));
        Self::build(config, Some(store), target, 1024, 1000)
    }

    pub fn with_forward_target(config: RouteConfig, target: Arc<dyn ForwardTarget>) -> Self {
        let (capacity, interval) = match &config.backend {
            BackendConfig::Forward {
                buffer_capacity,
                retry_interval_ms,
                ..
            } => (*buffer_capacity, *retry_interval_ms),
            BackendConfig::Embedded { .. } => (1024, 1000),
        };
        Self::build(config, None, target, capacity, interval)
    }

    fn build(
        config: RouteConfig,
        store: Option<Arc<Store>>,
        target: Arc<dyn ForwardTarget>,
        capacity: usize,
        retry_interval_ms: u64,
    ) -> Self {
        let bus = config.bus_enabled.then(|| Arc::new(Bus::new()));
        Router {
            config,
            tags: TagStore::new(),
            backend: Backend {
                store,
                target,
                buffer: RetryBuffer::new(capacity),
                notify: Notify::new(),
                retry_interval: Duration::from_millis(retry_interval_ms.max(1)),
            },
            bus,
            counters: Counters::default(),
            hooks: RwLock::new(Vec::new()),
        }
    }

    pub fn config(&self) -> &RouteConfig {
        &self.config
    }

    pub fn tag_store(&self) -> &TagStore {
        &self.tags
    }

    /// The embedded store, if that is the backend.
    pub fn store(&self) -> Option<&Arc<Store>> {
        self.backend.store.as_ref()
    }

    pub fn bus(&self) -> Option<&Arc<Bus>> {
        self.bus.as_ref()
    }

    pub fn retry_buffer(&self) -> &RetryBuffer {
        &self.backend.buffer
    }

    pub fn add_hook(&self, hook: Arc<dyn JobHook>) {
        self.hooks.write().expect("hooks poisoned").push(hook);
    }

    /// Subscribes to the bus; `None` when the bus is disabled.
    pub fn subscribe(&self, prefix: &str) -> Option<Subscription> {
        self.bus
            .as_ref()
            .map(|b| b.subscribe(prefix, self.config.bus_queue_capacity))
    }

    pub fn handle_write(
        &self,
        db: &str,
        body: &str,
        receipt_time: i64,
    ) -> Result<WriteOutcome, WriteError> {
        if tsstore::validate_db_name(db).is_err() {
            return Err(WriteError::InvalidDatabase(db.to_owned()));
        }
        let batch = lineproto::parse_batch(body);
        bump(&self.counters.lines_received, batch.lines);
        bump(&self.counters.lines_rejected, batch.errors.len());
        if batch.metrics.is_empty() && !batch.errors.is_empty() {
            return Err(WriteError::AllLinesRejected(batch.errors));
        }
        let accepted = batch.metrics.len();

        let mut rows = Vec::with_capacity(accepted);
        for mut metric in batch.metrics {
            metric.timestamp.get_or_insert(receipt_time);
            if self.config.trust_job_tags && metric.tags.contains_key(JOBID_TAG) {
                rows.push(metric);
                continue;
            }
            match self.tags.enrich(metric) {
                Ok(copies) => rows.extend(copies),
                Err(EnrichError::MissingHostname(untagged)) => rows.push(untagged),
            }
        }
        let tagged = rows
            .iter()
            .filter(|m| m.tags.contains_key(JOBID_TAG))
            .count();
        bump(&self.counters.rows_job_tagged, tagged);

        let produced = rows.len();
        let duplicated = self.write_rows(db, rows);
        Ok(WriteOutcome {
            accepted,
            rejected: batch.errors,
            rows: produced,
            duplicated,
        })
    }

    /// Stores `rows` in `db` and the per-user databases, then publishes them.
    /// Returns the number of duplicated rows.
    fn write_rows(&self, db: &str, rows: Vec<Metric>) -> usize {
        let mut duplicated = 0;
        if self.config.per_user_duplication {
            let mut per_user: BTreeMap<&str, Vec<Metric>> = BTreeMap::new();
            for m in &rows {
                if let Some(user) = m.tags.get(USER_TAG) {
                    per_user.entry(user).or_default().push(m.clone());
                }
            }
            for (user, copies) in per_user {
                duplicated += copies.len();
                self.store_rows(&self.config.user_db(user), copies);
            }
            bump(&self.counters.rows_duplicated, duplicated);
        }
        bump(&self.counters.rows_written, rows.len());
        let payload = match &self.bus {
            Some(bus) if bus.subscriber_count() > 0 => lineproto::serialize_batch(&rows).ok(),
            _ => None,
        };
        self.store_rows(db, rows);
        if let (Some(bus), Some(payload)) = (&self.bus, payload) {
            bus.publish(BusMessage::new(metrics_topic(db), payload));
        }
        duplicated
    }

    fn store_rows(&self, db: &str, rows: Vec<Metric>) {
        if rows.is_empty() {
            return;
        }
        let backend = &self.backend;
        if let Some(store) = backend.store.as_ref().filter(|_| backend.buffer.is_empty()) {
            match store.write_points(db, &rows) {
                Ok(_) => return,
                Err(e) => {
                    bump(&self.counters.storage_errors, 1);
                    if !matches!(store_to_forward(e), ForwardError::Unreachable(_)) {
                        tracing::error!(db, "embedded store refused rows");
                        return;
                    }
                }
            }
        }
        match lineproto::serialize_batch(&rows) {
            Ok(body) => {
                backend.buffer.push(PendingBatch {
                    db: db.to_owned(),
                    body,
                    lines: rows.len(),
                });
                backend.notify.notify_one();
            }
            Err(e) => {
                bump(&self.counters.storage_errors, 1);
                tracing::error!(db, error = %e, "unserializable rows");
            }
        }
    }

    pub fn handle_job_signal(
        &self,
        signal: JobSignal,
        receipt_time: i64,
    ) -> Result<JobRecord, SignalError> {
        bump(&self.counters.signals_received, 1);
        let result = self.apply_signal(signal, receipt_time);
        if result.is_err() {
            bump(&self.counters.signals_rejected, 1);
        }
        result
    }

    fn apply_signal(&self, signal: JobSignal, receipt_time: i64) -> Result<JobRecord, SignalError> {
        let timestamp = signal.timestamp.unwrap_or(receipt_time);
        let (record, annotation) = match signal.action {
            SignalAction::Start => {
                let user = signal
                    .user
                    .filter(|u| !u.is_empty())
                    .ok_or_else(|| SignalError::Invalid("start signal without user".into()))?;
                let hosts: BTreeSet<String> = signal
                    .hosts
                    .ok_or_else(|| SignalError::Invalid("start signal without hosts".into()))?
                    .into_iter()
                    .collect();
                if self.config.per_user_duplication
                    && tsstore::validate_db_name(&self.config.user_db(&user)).is_err()
                {
                    return Err(SignalError::Invalid(format!(
                        "user {user:?} does not map to a valid database name"
                    )));
                }
                let record = JobRecord {
                    job_id: signal.jobid,
                    user,
                    hosts,
                    start_time: timestamp,
                    end_time: None,
                    extra_tags: signal.tags.unwrap_or_default(),
                };
                let annotation = self.tags.job_start_with(record.clone(), |r| {
                    self.publish_meta(TOPIC_JOB_START, r, SignalAction::Start)
                })?;
                (record, annotation)
            }
            SignalAction::End => self.tags.job_end_with(&signal.jobid, timestamp, |r| {
                self.publish_meta(TOPIC_JOB_END, r, SignalAction::End)
            })?,
        };

        self.write_rows(&self.config.global_db, vec![annotation]);

        let hooks = self.hooks.read().expect("hooks poisoned").clone();
        for hook in hooks {
            match signal.action {
                SignalAction::Start => hook.on_job_start(&record),
                SignalAction::End => hook.on_job_end(&record),
            }
        }
        Ok(record)
    }

    fn publish_meta(&self, topic: &str, record: &JobRecord, action: SignalAction) {
        if let Some(bus) = &self.bus {
            let doc =
                serde_json::to_string(&JobSignal::document(record, action)).expect("signal json");
            bus.publish(BusMessage::new(topic, doc));
        }
    }

    /// Drains the retry buffer once.
    pub async fn flush_pending(&self) -> FlushReport {
        self.backend
            .buffer
            .flush_with_retry(self.backend.target.as_ref())
            .await
    }

    /// Background task draining the retry buffer whenever rows are queued and
    /// on every retry interval.
    pub fn spawn_flusher(self: &Arc<Self>) -> tokio::task::JoinHandle<()> {
        let router = Arc::clone(self);
        tokio::spawn(async move {
            loop {
                tokio::select! {
                    _ = router.backend.notify.notified() => {}
                    _ = tokio::time::sleep(router.backend.retry_interval) => {}
                }
                if !router.backend.buffer.is_empty() {
                    let report = router.flush_pending().await;
                    if let Some(e) = report.stalled {
                        tracing::debug!(error = %e, "backend unavailable, keeping batches");
                    }
                }
            }
        })
    }

    pub fn health(&self) -> HealthReport {
        let c = &self.counters;
        let load = |a: &AtomicU64| a.load(Ordering::Relaxed);
        let retry = self.backend.buffer.stats();
        HealthReport {
            lines_received: load(&c.lines_received),
            lines_rejected: load(&c.lines_rejected),
            lines_dropped: retry.dropped_lines + retry.rejected_lines,
            active_jobs: self.tags.active_count(),
            rows_written: load(&c.rows_written),
            rows_duplicated: load(&c.rows_duplicated),
            rows_job_tagged: load(&c.rows_job_tagged),
            signals_received: load(&c.signals_received),
            signals_rejected: load(&c.signals_rejected),
            bus_published: self.bus.as_ref().map_or(0, |b| b.published()),
            bus_dropped: self.bus.as_ref().map_or(0, |b| b.dropped()),
            storage_errors: load(&c.storage_errors),
            diagnostics: self.tags.diagnostics(),
            retry,
        }
    }
}
