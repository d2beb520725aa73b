//! Hostname-keyed tag store fed by job start/end signals.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::lineproto::{FieldValue, Metric};

pub const HOSTNAME_TAG: &str = "hostname";
pub const JOBID_TAG: &str = "jobid";
pub const USER_TAG: &str = "user";
pub const RESERVED_TAGS: [&str; 3] = [HOSTNAME_TAG, JOBID_TAG, USER_TAG];

/// Measurement used for job start/end annotations.
pub const JOB_EVENT_MEASUREMENT: &str = "job_event";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum JobError {
    #[error("job {0} is already active")]
    DuplicateJob(String),
    #[error("job {0} is not active")]
    UnknownJob(String),
    #[error("invalid job record: {0}")]
    InvalidJob(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub user: String,
    pub hosts: BTreeSet<String>,
    pub start_time: i64,
    #[serde(default)]
    pub end_time: Option<i64>,
    #[serde(default)]
    pub extra_tags: BTreeMap<String, String>,
}

impl JobRecord {
    pub fn new<I, S>(
        job_id: impl Into<String>,
        user: impl Into<String>,
        hosts: I,
        start_time: i64,
    ) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        JobRecord {
            job_id: job_id.into(),
            user: user.into(),
            hosts: hosts.into_iter().map(Into::into).collect(),
            start_time,
            end_time: None,
            extra_tags: BTreeMap::new(),
        }
    }

    pub fn is_running(&self) -> bool {
        self.end_time.is_none()
    }

    pub fn validate(&self) -> Result<(), JobError> {
        let bad = |s: String| Err(JobError::InvalidJob(s));
        if self.job_id.is_empty() {
            return bad("empty job id".into());
        }
        if self.user.is_empty() {
            return bad("empty user".into());
        }
        if self.hosts.is_empty() {
            return bad(format!("job {} has no hosts", self.job_id));
        }
        if self.hosts.iter().any(String::is_empty) {
            return bad("empty hostname".into());
        }
        if let Some(key) = self
            .extra_tags
            .keys()
            .find(|k| RESERVED_TAGS.contains(&k.as_str()))
        {
            return bad(format!("extra tag {key:?} is reserved"));
        }
        if let Some(end) = self.end_time {
            if end < self.start_time {
                return bad("end_time precedes start_time".into());
            }
        }
        Ok(())
    }

    /// The tags merged into every metric enriched on behalf of this job.
    pub fn tags(&self) -> impl Iterator<Item = (&str, &str)> {
        self.extra_tags
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_str()))
            .chain([
                (JOBID_TAG, self.job_id.as_str()),
                (USER_TAG, self.user.as_str()),
            ])
    }

    /// Annotation row written when the job starts or ends.
    pub fn annotation(&self, phase: JobPhase) -> Metric {
        let (verb, ts) = match phase {
            JobPhase::Start => ("start", self.start_time),
            JobPhase::End => ("end", self.end_time.unwrap_or(self.start_time)),
        };
        let hosts = self.hosts.iter().cloned().collect::<Vec<_>>().join(",");
        Metric::new(JOB_EVENT_MEASUREMENT)
            .tag(JOBID_TAG, self.job_id.clone())
            .tag(USER_TAG, self.user.clone())
            .field(
                "text",
                FieldValue::String(format!("job {} {verb}", self.job_id)),
            )
            .field("phase", verb)
            .field("hosts", hosts)
            .at(ts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobPhase {
    Start,
    End,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnrichError {
    /// Carries the metric back so the caller can store it untagged.
    #[error("metric lacks the mandatory hostname tag")]
    MissingHostname(Metric),
}

#[derive(Debug, Default)]
pub struct Diagnostics {
    pub missing_hostname: AtomicU64,
    pub reserved_tags_dropped: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DiagnosticsSnapshot {
    pub missing_hostname: u64,
    pub reserved_tags_dropped: u64,
}

#[derive(Default)]
struct Tables {
    by_host: HashMap<String, Vec<Arc<JobRecord>>>,
    active: HashMap<String, Arc<JobRecord>>,
    finished: HashMap<String, Arc<JobRecord>>,
}

/// Tag store: start/end are serialized through a write lock, enrichment reads
/// under a shared lock so it never sees a half-applied signal.
#[derive(Default)]
pub struct TagStore {
    tables: RwLock<Tables>,
    diagnostics: Diagnostics,
}

impl TagStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn job_start(&self, record: JobRecord) -> Result<Metric, JobError> {
        self.job_start_with(record, |_| {})
    }

    /// Like [`job_start`](Self::job_start), running `publish` while the write
    /// lock is still held, so nothing enriched with the new job can be emitted
    /// before it.
    pub fn job_start_with(
        &self,
        mut record: JobRecord,
        publish: impl FnOnce(&JobRecord),
    ) -> Result<Metric, JobError> {
        record.end_time = None;
        record.validate()?;
        let mut t = self.tables.write().expect("tag store poisoned");
        if t.active.contains_key(&record.job_id) {
            return Err(JobError::DuplicateJob(record.job_id));
        }
        let record = Arc::new(record);
        for host in &record.hosts {
            t.by_host
                .entry(host.clone())
                .or_default()
                .push(Arc::clone(&record));
        }
        t.active.insert(record.job_id.clone(), Arc::clone(&record));
        t.finished.remove(&record.job_id);
        publish(&record);
        Ok(record.annotation(JobPhase::Start))
    }

    pub fn job_end(&self, job_id: &str, end_time: i64) -> Result<(JobRecord, Metric), JobError> {
        self.job_end_with(job_id, end_time, |_| {})
    }

    pub fn job_end_with(
        &self,
        job_id: &str,
        end_time: i64,
        publish: impl FnOnce(&JobRecord),
    ) -> Result<(JobRecord, Metric), JobError> {
        let mut t = self.tables.write().expect("tag store poisoned");
        let Some(active) = t.active.remove(job_id) else {
            return Err(JobError::UnknownJob(job_id.to_owned()));
        };
        for host in &active.hosts {
            if let Some(jobs) = t.by_host.get_mut(host) {
                jobs.retain(|j| j.job_id != job_id);
                if jobs.is_empty() {
                    t.by_host.remove(host);
                }
            }
        }
        let mut ended = (*active).clone();
        ended.end_time = Some(end_time.max(ended.start_time));
        t.finished
            .insert(ended.job_id.clone(), Arc::new(ended.clone()));
        publish(&ended);
        let annotation = ended.annotation(JobPhase::End);
        Ok((ended, annotation))
    }

    /// One copy per active job on the metric's host, or the metric itself when
    /// no job is active there. Collector-supplied `jobid`/`user` tags are
    /// always dropped.
    pub fn enrich(&self, mut metric: Metric) -> Result<Vec<Metric>, EnrichError> {
        let before = metric.tags.len();
        metric.tags.remove(JOBID_TAG);
        metric.tags.remove(USER_TAG);
        let dropped = (before - metric.tags.len()) as u64;
        if dropped > 0 {
            self.diagnostics
                .reserved_tags_dropped
                .fetch_add(dropped, Ordering::Relaxed);
        }
        let Some(host) = metric.tags.get(HOSTNAME_TAG) else {
            self.diagnostics
                .missing_hostname
                .fetch_add(1, Ordering::Relaxed);
            return Err(EnrichError::MissingHostname(metric));
        };

        let t = self.tables.read().expect("tag store poisoned");
        let jobs = match t.by_host.get(host) {
            Some(jobs) if !jobs.is_empty() => jobs,
            _ => return Ok(vec![metric]),
        };
        let mut out = Vec::with_capacity(jobs.len());
        for job in &jobs[..jobs.len() - 1] {
            out.push(apply_job_tags(metric.clone(), job));
        }
        let last = &jobs[jobs.len() - 1];
        out.push(apply_job_tags(metric, last));
        Ok(out)
    }

    pub fn active_jobs(&self, hostname: &str) -> Vec<JobRecord> {
        let t = self.tables.read().expect("tag store poisoned");
        t.by_host
            .get(hostname)
            .map(|jobs| jobs.iter().map(|j| (**j).clone()).collect())
            .unwrap_or_default()
    }

    /// Every active job, ordered by id.
    pub fn all_active(&self) -> Vec<JobRecord> {
        let t = self.tables.read().expect("tag store poisoned");
        let mut jobs: Vec<_> = t.active.values().map(|j| (**j).clone()).collect();
        jobs.sort_by(|a, b| a.job_id.cmp(&b.job_id));
        jobs
    }

    pub fn active_count(&self) -> usize {
        self.tables.read().expect("tag store poisoned").active.len()
    }

    /// Active or finished job by id.
    pub fn job(&self, job_id: &str) -> Option<JobRecord> {
        let t = self.tables.read().expect("tag store poisoned");
        t.active
            .get(job_id)
            .or_else(|| t.finished.get(job_id))
            .map(|j| (**j).clone())
    }

    pub fn diagnostics(&self) -> DiagnosticsSnapshot {
        DiagnosticsSnapshot {
            missing_hostname: self.diagnostics.missing_hostname.load(Ordering::Relaxed),
            reserved_tags_dropped: self
                .diagnostics
                .reserved_tags_dropped
                .load(Ordering::Relaxed),
        }
    }

    /// Verifies that the host table and the job map agree. Used by tests.
    pub fn check_consistency(&self) -> Result<(), String> {
        let t = self.tables.read().expect("tag store poisoned");
        for (host, jobs) in &t.by_host {
            for job in jobs {
                if !job.hosts.contains(host) {
                    return Err(format!("{} listed on foreign host {host}", job.job_id));
                }
                if !t.active.contains_key(&job.job_id) {
                    return Err(format!("{} on {host} is not active", job.job_id));
                }
            }
        }
        for job in t.active.values() {
            for host in &job.hosts {
                let listed = t.by_host.get(host).is_some_and(|jobs| {
                    jobs.iter().filter(|j| j.job_id == job.job_id).count() == 1
                });
                if !listed {
                    return Err(format!("{} missing from host {host}", job.job_id));
                }
            }
        }
        Ok(())
    }
}

fn apply_job_tags(mut metric: Metric, job: &JobRecord) -> Metric {
    for (k, v) in job.tags() {
        if k != HOSTNAME_TAG {
            metric.tags.insert(k.to_owned(), v.to_owned());
        }
    }
    metric
}

#[cfg(test)]
mod tests {
    use super::*;

    fn j42() -> JobRecord {
        JobRecord::new("j42", "alice", ["h1", "h2", "h3", "h4"], 100)
    }

    fn sample(host: &str) -> Metric {
        Metric::new("cpu_load")
            .tag("hostname", host)
            .field("value", 0.5)
            .at(7)
    }

    #[test]
    fn start_maps_all_hosts() {
        let store = TagStore::new();
        let ann = store.job_start(j42()).unwrap();
        for h in ["h1", "h2", "h3", "h4"] {
            let jobs = store.active_jobs(h);
            assert_eq!(jobs.len(), 1);
            assert_eq!(jobs[0].job_id, "j42");
        }
        assert_eq!(ann.measurement, JOB_EVENT_MEASUREMENT);
        assert_eq!(ann.tags["jobid"], "j42");
        assert_eq!(ann.timestamp, Some(100));
        store.check_consistency().unwrap();
    }

    #[test]
    fn start_rejects_empty_hosts_and_duplicates() {
        let store = TagStore::new();
        let empty = JobRecord::new("j1", "bob", Vec::<String>::new(), 0);
        assert!(matches!(
            store.job_start(empty),
            Err(JobError::InvalidJob(_))
        ));
        store.job_start(j42()).unwrap();
        assert_eq!(
            store.job_start(j42()),
            Err(JobError::DuplicateJob("j42".into()))
        );
    }

    #[test]
    fn reserved_extra_tags_rejected() {
        let mut r = j42();
        r.extra_tags.insert("hostname".into(), "x".into());
        assert!(matches!(
            TagStore::new().job_start(r),
            Err(JobError::InvalidJob(_))
        ));
    }

    #[test]
    fn shared_host_lists_both_jobs() {
        let store = TagStore::new();
        store
            .job_start(JobRecord::new("a", "alice", ["h1"], 0))
            .unwrap();
        store
            .job_start(JobRecord::new("b", "bob", ["h1", "h2"], 0))
            .unwrap();
        let ids: Vec<_> = store
            .active_jobs("h1")
            .into_iter()
            .map(|j| j.job_id)
            .collect();
        assert_eq!(ids, ["a", "b"]);
        let out = store.enrich(sample("h1")).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].tags["user"], "alice");
        assert_eq!(out[1].tags["user"], "bob");

        store.job_end("a", 10).unwrap();
        let out = store.enrich(sample("h1")).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].tags["jobid"], "b");
        store.check_consistency().unwrap();
    }

    #[test]
    fn end_removes_and_retains_record() {
        let store = TagStore::new();
        store.job_start(j42()).unwrap();
        let (rec, ann) = store.job_end("j42", 500).unwrap();
        assert_eq!(rec.end_time, Some(500));
        assert_eq!(ann.fields["phase"], FieldValue::String("end".into()));
        for h in ["h1", "h2", "h3", "h4"] {
            assert!(store.active_jobs(h).is_empty());
        }
        assert_eq!(store.job("j42").unwrap().end_time, Some(500));
        assert_eq!(
            store.job_end("j42", 600),
            Err(JobError::UnknownJob("j42".into()))
        );
        store.check_consistency().unwrap();
    }

    #[test]
    fn enrich_adds_job_tags() {
        let store = TagStore::new();
        store.job_start(j42()).unwrap();
        let out = store.enrich(sample("h1")).unwrap();
        assert_eq!(out.len(), 1);
        let m = &out[0];
        assert_eq!(m.tags["jobid"], "j42");
        assert_eq!(m.tags["user"], "alice");
        assert_eq!(m.tags["hostname"], "h1");
        assert_eq!(m.fields, sample("h1").fields);
        assert_eq!(m.timestamp, Some(7));
    }

    #[test]
    fn enrich_unmanaged_host_unchanged() {
        let store = TagStore::new();
        store.job_start(j42()).unwrap();
        assert_eq!(store.enrich(sample("h9")).unwrap(), vec![sample("h9")]);
    }

    #[test]
    fn spoofed_tags_dropped_and_job_tags_win() {
        let store = TagStore::new();
        let mut r = j42();
        r.extra_tags.insert("cluster".into(), "emmy".into());
        store.job_start(r).unwrap();
        let m = sample("h2")
            .tag("jobid", "fake")
            .tag("user", "mallory")
            .tag("cluster", "x");
        let out = store.enrich(m).unwrap();
        assert_eq!(out[0].tags["jobid"], "j42");
        assert_eq!(out[0].tags["user"], "alice");
        assert_eq!(out[0].tags["cluster"], "emmy");
        assert_eq!(store.diagnostics().reserved_tags_dropped, 2);

        let spoof_unmanaged = sample("h9").tag("jobid", "fake");
        let out = store.enrich(spoof_unmanaged).unwrap();
        assert!(!out[0].tags.contains_key("jobid"));
    }

    #[test]
    fn missing_hostname_counted() {
        let store = TagStore::new();
        let m = Metric::new("x").field("v", 1.0);
        match store.enrich(m.clone()) {
            Err(EnrichError::MissingHostname(back)) => assert_eq!(back, m),
            other => panic!("{other:?}"),
        }
        assert_eq!(store.diagnostics().missing_hostname, 1);
    }
}
