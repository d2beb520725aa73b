//! Application-side annotation client.
//!
//! A [`Client`] buffers values and events as line protocol with a set of
//! default tags and ships them to a router in batches: when the buffer
//! reaches `flush_threshold` lines, every `flush_interval`, on explicit
//! [`Client::flush`] and once more when the client is dropped. Appends never
//! wait for the network; a background thread does the automatic flushes.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::jobtags::HOSTNAME_TAG;
use crate::lineproto::{self, FieldValue, LineError, Metric};

pub mod cli;

pub const VALUE_FIELD: &str = "value";
pub const EVENT_FIELD: &str = "text";

pub const ENV_URL: &str = "USERMETRIC_URL";
pub const ENV_DB: &str = "USERMETRIC_DB";
pub const ENV_TAGS: &str = "USERMETRIC_TAGS";

pub const DEFAULT_URL: &str = "http://127.0.0.1:8086";
pub const DEFAULT_DB: &str = "lms";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClientError {
    #[error("invalid client config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    InvalidMetric(#[from] LineError),
    #[error("endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("endpoint rejected batch with status {status}: {body}")]
    Rejected { status: u16, body: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    /// Router base URL; lines go to `{url}/write?db={db}`.
    pub url: String,
    pub db: String,
    pub default_tags: BTreeMap<String, String>,
    pub flush_threshold: usize,
    pub flush_interval: Duration,
    /// Buffer cap; beyond it the oldest line is dropped.
    pub buffer_capacity: usize,
    /// Request timeout, which also bounds the final flush on drop.
    pub send_timeout: Duration,
}

impl ClientConfig {
    pub fn new(url: impl Into<String>, db: impl Into<String>) -> Self {
        ClientConfig {
            url: url.into(),
            db: db.into(),
            default_tags: BTreeMap::from([(HOSTNAME_TAG.to_owned(), local_hostname())]),
            flush_threshold: 100,
            flush_interval: Duration::from_secs(5),
            buffer_capacity: 10_000,
            send_timeout: Duration::from_secs(5),
        }
    }

    /// Defaults overridden by `USERMETRIC_URL`, `USERMETRIC_DB` and
    /// `USERMETRIC_TAGS` (`k=v,k=v`).
    pub fn from_env() -> Result<Self, ClientError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let mut config = ClientConfig::new(
            var(ENV_URL).unwrap_or_else(|| DEFAULT_URL.to_owned()),
            var(ENV_DB).unwrap_or_else(|| DEFAULT_DB.to_owned()),
        );
        if let Some(tags) = var(ENV_TAGS) {
            config.default_tags.extend(parse_tag_list(&tags)?);
        }
        Ok(config)
    }

    pub fn tag(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.default_tags.insert(key.into(), value.into());
        self
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        let bad = |s: &str| Err(ClientError::InvalidConfig(s.to_owned()));
        if self.flush_threshold == 0 {
            return bad("flush_threshold must be at least 1");
        }
        if self.buffer_capacity < self.flush_threshold {
            return bad("buffer_capacity must not be below flush_threshold");
        }
        if self.flush_interval.is_zero() {
            return bad("flush_interval must be positive");
        }
        if self
            .default_tags
            .get(HOSTNAME_TAG)
            .is_none_or(|h| h.is_empty())
        {
            return bad("default tags must include hostname");
        }
        if self.db.is_empty() {
            return bad("empty database name");
        }
        Ok(())
    }
}

/// `k=v` pairs separated by commas.
pub fn parse_tag_list(text: &str) -> Result<BTreeMap<String, String>, ClientError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(parse_tag)
        .collect()
}

pub fn parse_tag(pair: &str) -> Result<(String, String), ClientError> {
    match pair.trim().split_once('=') {
        Some((k, v)) if !k.is_empty() && !v.is_empty() => Ok((k.to_owned(), v.to_owned())),
        _ => Err(ClientError::InvalidConfig(format!(
            "tag {pair:?} is not k=v"
        ))),
    }
}

/// Kernel hostname, falling back to `$HOSTNAME` and then `localhost`.
pub fn local_hostname() -> String {
    std::fs::read_to_string("/proc/sys/kernel/hostname")
        .ok()
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty())
        .or_else(|| std::env::var("HOSTNAME").ok().filter(|s| !s.is_empty()))
        .unwrap_or_else(|| "localhost".to_owned())
}

/// Delivery of one batch body to a database.
pub trait Transport: Send + Sync {
    fn send(&self, db: &str, body: &str) -> Result<(), ClientError>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
}

impl HttpTransport {
    pub fn new(url: &str, timeout: Duration) -> Result<Self, ClientError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError::InvalidConfig(e.to_string()))?;
        Ok(HttpTransport {
            client,
            url: format!("{}/write", url.trim_end_matches('/')),
        })
    }
}

impl Transport for HttpTransport {
    fn send(&self, db: &str, body: &str) -> Result<(), ClientError> {
        let resp = self
            .client
            .post(&self.url)
            .query(&[("db", db)])
            .body(body.to_owned())
            .send()
            .map_err(|e| ClientError::EndpointUnreachable(e.to_string()))?;
        let status = resp.status();
        if status.is_success() {
            return Ok(());
        }
        let body = resp.text().unwrap_or_default();
        if status.is_server_error() {
            Err(ClientError::EndpointUnreachable(format!(
                "status {status}: {body}"
            )))
        } else {
            Err(ClientError::Rejected {
                status: status.as_u16(),
                body,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClientStats {
    pub buffered: usize,
    pub sent_lines: u64,
    pub sent_batches: u64,
    /// Lines lost to the buffer cap.
    pub dropped: u64,
    /// Lines discarded because the endpoint rejected their batch.
    pub rejected: u64,
    pub failed_flushes: u64,
}

struct State {
    /// `(sequence, line)` in append order.
    lines: VecDeque<(u64, String)>,
    next_seq: u64,
    closed: bool,
}

struct Inner {
    config: ClientConfig,
    transport: Box<dyn Transport>,
    state: Mutex<State>,
    wake: Condvar,
    flush_lock: Mutex<()>,
    sent_lines: AtomicU64,
    sent_batches: AtomicU64,
    dropped: AtomicU64,
    rejected: AtomicU64,
    failed_flushes: AtomicU64,
}

pub struct Client {
    inner: Arc<Inner>,
    worker: Option<JoinHandle<()>>,
}

impl Client {
    /// Client speaking HTTP to `config.url`.
    pub fn new(config: ClientConfig) -> Result<Self, ClientError> {
        let transport = HttpTransport::new(&config.url, config.send_timeout)?;
        Self::with_transport(config, Box::new(transport))
    }

    pub fn with_transport(
        config: ClientConfig,
        transport: Box<dyn Transport>,
    ) -> Result<Self, ClientError> {
        config.validate()?;
        let inner = Arc::new(Inner {
            config,
            transport,
            state: Mutex::new(State {
                lines: VecDeque::new(),
                next_seq: 0,
                closed: false,
            }),
            wake: Condvar::new(),
            flush_lock: Mutex::new(()),
            sent_lines: AtomicU64::new(0),
            sent_batches: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
            failed_flushes: AtomicU64::new(0),
        });
        let worker = {
            let inner = Arc::clone(&inner);
            std::thread::Builder::new()
                .name("usermetric-flush".into())
                .spawn(move || inner.run_flusher())
                .map_err(|e| ClientError::InvalidConfig(e.to_string()))?
        };
        Ok(Client {
            inner,
            worker: Some(worker),
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.inner.config
    }

    /// Buffers `name value=<value>`.
    pub fn add_value(
        &self,
        name: &str,
        value: f64,
        tags: &BTreeMap<String, String>,
        timestamp: Option<i64>,
    ) -> Result<(), ClientError> {
        self.add(name, VALUE_FIELD, FieldValue::Float(value), tags, timestamp)
    }

    /// Buffers `name text="<text>"`.
    pub fn add_event(
        &self,
        name: &str,
        text: &str,
        tags: &BTreeMap<String, String>,
        timestamp: Option<i64>,
    ) -> Result<(), ClientError> {
        self.add(
            name,
            EVENT_FIELD,
            FieldValue::String(text.to_owned()),
            tags,
            timestamp,
        )
    }

    fn add(
        &self,
        name: &str,
        field: &str,
        value: FieldValue,
        tags: &BTreeMap<String, String>,
        timestamp: Option<i64>,
    ) -> Result<(), ClientError> {
        let line = build_line(
            &self.inner.config.default_tags,
            name,
            field,
            value,
            tags,
            timestamp,
        )?;
        self.inner.push(line);
        Ok(())
    }

    /// Sends everything buffered as one write. Unsent lines stay buffered
    /// when the endpoint is unreachable.
    pub fn flush(&self) -> Result<usize, ClientError> {
        self.inner.flush()
    }

    pub fn buffered(&self) -> Vec<String> {
        let state = self.inner.state.lock().expect("client state");
        state.lines.iter().map(|(_, l)| l.clone()).collect()
    }

    pub fn stats(&self) -> ClientStats {
        let i = &self.inner;
        ClientStats {
            buffered: i.state.lock().expect("client state").lines.len(),
            sent_lines: i.sent_lines.load(Ordering::Relaxed),
            sent_batches: i.sent_batches.load(Ordering::Relaxed),
            dropped: i.dropped.load(Ordering::Relaxed),
            rejected: i.rejected.load(Ordering::Relaxed),
            failed_flushes: i.failed_flushes.load(Ordering::Relaxed),
        }
    }

    /// Stops the flusher and makes the final flush attempt.
    pub fn close(mut self) -> Result<usize, ClientError> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<usize, ClientError> {
        let Some(worker) = self.worker.take() else {
            return Ok(0);
        };
        self.inner.state.lock().expect("client state").closed = true;
        self.inner.wake.notify_all();
        let _ = worker.join();
        self.inner.flush()
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        if let Err(e) = self.shutdown() {
            tracing::warn!(error = %e, "final usermetric flush failed");
        }
    }
}

/// Defaults overlaid by caller tags; the default hostname always wins.
pub fn build_line(
    defaults: &BTreeMap<String, String>,
    name: &str,
    field: &str,
    value: FieldValue,
    tags: &BTreeMap<String, String>,
    timestamp: Option<i64>,
) -> Result<String, ClientError> {
    let mut metric = Metric::new(name).field(field, value);
    metric.tags = defaults.clone();
    for (k, v) in tags {
        if k != HOSTNAME_TAG || !defaults.contains_key(HOSTNAME_TAG) {
            metric.tags.insert(k.clone(), v.clone());
        }
    }
    metric.timestamp = timestamp;
    Ok(lineproto::serialize(&metric)?)
}

impl Inner {
    fn push(&self, line: String) {
        let mut state = self.state.lock().expect("client state");
        let seq = state.next_seq;
        state.next_seq += 1;
        state.lines.push_back((seq, line));
        if state.lines.len() > self.config.buffer_capacity {
            state.lines.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        if state.lines.len() >= self.config.flush_threshold {
            self.wake.notify_one();
        }
    }

    fn flush(&self) -> Result<usize, ClientError> {
        let _serial = self.flush_lock.lock().expect("flush lock");
        let (last_seq, body, count) = {
            let state = self.state.lock().expect("client state");
            let Some(&(last_seq, _)) = state.lines.back() else {
                return Ok(0);
            };
            let mut body = String::new();
            for (_, line) in &state.lines {
                body.push_str(line);
                body.push('\n');
            }
            (last_seq, body, state.lines.len())
        };
        let result = self.transport.send(&self.config.db, &body);
        let discard = match &result {
            Ok(()) => {
                self.sent_lines.fetch_add(count as u64, Ordering::Relaxed);
                self.sent_batches.fetch_add(1, Ordering::Relaxed);
                true
            }
            Err(ClientError::Rejected { .. }) => {
                self.rejected.fetch_add(count as u64, Ordering::Relaxed);
                self.failed_flushes.fetch_add(1, Ordering::Relaxed);
                true
            }
            Err(_) => {
                self.failed_flushes.fetch_add(1, Ordering::Relaxed);
                false
            }
        };
        if discard {
            let mut state = self.state.lock().expect("client state");
            while state.lines.front().is_some_and(|(seq, _)| *seq <= last_seq) {
                state.lines.pop_front();
            }
        }
        result.map(|()| count)
    }

    fn run_flusher(&self) {
        let interval = self.config.flush_interval;
        let mut deadline = Instant::now() + interval;
        // After a failed flush the threshold trigger waits for the next tick.
        let mut backoff = false;
        loop {
            {
                let mut state = self.state.lock().expect("client state");
                loop {
                    if state.closed {
                        return;
                    }
                    let now = Instant::now();
                    if now >= deadline
                        || (!backoff && state.lines.len() >= self.config.flush_threshold)
                    {
                        break;
                    }
                    state = self
                        .wake
                        .wait_timeout(state, deadline - now)
                        .expect("client state")
                        .0;
                }
            }
            backoff = self.flush().is_err();
            deadline = Instant::now() + interval;
        }
    }
}
