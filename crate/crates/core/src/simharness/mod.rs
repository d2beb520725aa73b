//! Synthetic cluster for end-to-end runs.
//!
//! A [`Scenario`] names hosts, the node behavior of each host, jobs with
//! start/end offsets and anomalies that scale or override one metric on some
//! hosts for a while. [`gen_host_stream`] turns one host into a deterministic
//! metric stream and [`run_scenario`] replays everything against a router.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::SchemaMetric;
use crate::jobtags::HOSTNAME_TAG;
use crate::lineproto::Metric;

mod run;

pub use run::{
    run_scenario, HttpSink, RouterSink, RunOptions, ScenarioReport, SignalRecord, SimError, Sink,
};

pub const NS_PER_SEC: i64 = 1_000_000_000;

/// Baseline value per schema metric plus a relative uniform jitter bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub baseline: BTreeMap<SchemaMetric, f64>,
    /// Samples lie in `baseline * (1 ± jitter)`, clamped at zero.
    pub jitter: f64,
}

impl Profile {
    pub const NAMES: [&'static str; 3] = ["healthy", "idle", "memory-bound"];

    pub fn builtin(name: &str) -> Option<Profile> {
        use SchemaMetric::*;
        let values: [f64; 7] = match name {
            "healthy" => [20.0, 1.5, 8000.0, 16e9, 15000.0, 50.0, 5.0],
            "idle" => [0.05, 0.05, 1.0, 2e9, 100.0, 0.1, 0.01],
            "memory-bound" => [20.0, 0.4, 1500.0, 32e9, 38000.0, 20.0, 2.0],
            _ => return None,
        };
        let metrics = [CpuLoad, Ipc, FlopsDp, MemAllocated, MemBw, NetIo, FileIo];
        Some(Profile {
            baseline: metrics.into_iter().zip(values).collect(),
            jitter: 0.05,
        })
    }

    /// Inclusive bounds of generated samples for `metric` without anomalies.
    pub fn bounds(&self, metric: SchemaMetric) -> Option<(f64, f64)> {
        let b = *self.baseline.get(&metric)?;
        let d = (b * self.jitter).abs();
        Some(((b - d).max(0.0), (b + d).max(0.0)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub id: String,
    pub user: String,
    pub hosts: Vec<String>,
    pub start_secs: f64,
    pub end_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anomaly {
    pub hosts: Vec<String>,
    pub metric: SchemaMetric,
    /// Active on `from_secs <= offset < to_secs`.
    pub from_secs: f64,
    pub to_secs: f64,
    #[serde(default)]
    pub scale: Option<f64>,
    #[serde(default)]
    pub value: Option<f64>,
}

impl Anomaly {
    fn apply(&self, v: f64) -> f64 {
        match (self.value, self.scale) {
            (Some(value), _) => value,
            (None, Some(scale)) => v * scale,
            (None, None) => v,
        }
    }

    fn active(&self, host: &str, offset_ns: i64) -> bool {
        offset_ns >= secs_to_ns(self.from_secs)
            && offset_ns < secs_to_ns(self.to_secs)
            && self.hosts.iter().any(|h| h == host)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_db")]
    pub db: String,
    pub hosts: Vec<String>,
    pub cadence_secs: f64,
    pub duration_secs: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_profile")]
    pub default_profile: String,
    /// Host to profile name; hosts not listed use `default_profile`.
    #[serde(default)]
    pub profiles: BTreeMap<String, String>,
    /// Overrides the builtin profiles' jitter.
    #[serde(default)]
    pub jitter: Option<f64>,
    #[serde(default, rename = "job")]
    pub jobs: Vec<JobSpec>,
    #[serde(default, rename = "anomaly")]
    pub anomalies: Vec<Anomaly>,
}

fn default_db() -> String {
    "lms".to_owned()
}

fn default_profile() -> String {
    "healthy".to_owned()
}

pub fn secs_to_ns(secs: f64) -> i64 {
    (secs * NS_PER_SEC as f64).round() as i64
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("scenario file: {0}")]
    Parse(String),
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario =
            toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |s: String| Err(ScenarioError::Invalid(s));
        if self.hosts.is_empty() {
            return bad("no hosts".into());
        }
        let hosts: BTreeSet<&str> = self.hosts.iter().map(String::as_str).collect();
        if hosts.len() != self.hosts.len() {
            return bad("duplicate host".into());
        }
        if [self.cadence_secs, self.duration_secs]
            .iter()
            .any(|v| v.is_nan() || *v <= 0.0)
        {
            return bad("cadence and duration must be positive".into());
        }
        if let Some(j) = self.jitter {
            if !(0.0..1.0).contains(&j) {
                return bad("jitter must lie in [0, 1)".into());
            }
        }
        for (host, profile) in self
            .profiles
            .iter()
            .chain([(&String::new(), &self.default_profile)])
        {
            if !host.is_empty() && !hosts.contains(host.as_str()) {
                return bad(format!("profile for unknown host {host}"));
            }
            if Profile::builtin(profile).is_none() {
                return bad(format!("unknown profile {profile:?}"));
            }
        }
        let mut ids = BTreeSet::new();
        for job in &self.jobs {
            if !ids.insert(&job.id) {
                return bad(format!("duplicate job {}", job.id));
            }
            if job.hosts.is_empty() || job.hosts.iter().any(|h| !hosts.contains(h.as_str())) {
                return bad(format!(
                    "job {} hosts must be a non-empty subset of the scenario hosts",
                    job.id
                ));
            }
            if !(0.0 <= job.start_secs
                && job.start_secs < job.end_secs
                && job.end_secs <= self.duration_secs)
            {
                return bad(format!(
                    "job {} must satisfy 0 <= start < end <= duration",
                    job.id
                ));
            }
        }
        for (i, a) in self.anomalies.iter().enumerate() {
            if a.hosts.iter().any(|h| !hosts.contains(h.as_str())) {
                return bad(format!("anomaly {i} names an unknown host"));
            }
            if !(0.0 <= a.from_secs && a.from_secs < a.to_secs && a.to_secs <= self.duration_secs) {
                return bad(format!("anomaly {i} must lie within the scenario duration"));
            }
            if a.scale.is_some() == a.value.is_some() {
                return bad(format!("anomaly {i} needs exactly one of scale and value"));
            }
        }
        Ok(())
    }

    pub fn cadence(&self) -> Duration {
        Duration::from_secs_f64(self.cadence_secs)
    }

    pub fn profile_name(&self, host: &str) -> &str {
        self.profiles.get(host).unwrap_or(&self.default_profile)
    }

    pub fn profile(&self, host: &str) -> Profile {
        let mut p = Profile::builtin(self.profile_name(host)).expect("validated profile");
        if let Some(j) = self.jitter {
            p.jitter = j;
        }
        p
    }

    /// Sample offsets `k * cadence < duration`, in ns.
    pub fn ticks(&self) -> Vec<i64> {
        let cadence = secs_to_ns(self.cadence_secs);
        let duration = secs_to_ns(self.duration_secs);
        (0..)
            .map(|k| k * cadence)
            .take_while(|&t| t < duration)
            .collect()
    }

    pub fn stream(&self, host: &str, epoch_ns: i64) -> HostStream {
        gen_host_stream(
            host,
            self.cadence(),
            Duration::from_secs_f64(self.duration_secs),
            &self.profile(host),
            self.seed,
            self.anomalies
                .iter()
                .filter(|a| a.hosts.iter().any(|h| h == host))
                .cloned()
                .collect(),
            epoch_ns,
        )
    }
}

/// One host's samples at one offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Tick {
    pub offset_ns: i64,
    pub metrics: Vec<Metric>,
}

/// Deterministic per-host stream; see [`gen_host_stream`].
pub struct HostStream {
    host: String,
    profile: Profile,
    anomalies: Vec<Anomaly>,
    rng: ChaCha8Rng,
    cadence_ns: i64,
    duration_ns: i64,
    epoch_ns: i64,
    next: i64,
}

fn host_stream_id(host: &str) -> u64 {
    // FNV-1a keeps per-host streams independent of host order.
    host.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Samples of every profile metric at offsets `0, cadence, ...` below
/// `duration`, stamped `epoch_ns + offset`.
pub fn gen_host_stream(
    host: &str,
    cadence: Duration,
    duration: Duration,
    profile: &Profile,
    seed: u64,
    anomalies: Vec<Anomaly>,
    epoch_ns: i64,
) -> HostStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(host_stream_id(host));
    HostStream {
        host: host.to_owned(),
        profile: profile.clone(),
        anomalies,
        rng,
        cadence_ns: i64::try_from(cadence.as_nanos()).unwrap_or(i64::MAX).max(1),
        duration_ns: i64::try_from(duration.as_nanos()).unwrap_or(i64::MAX),
        epoch_ns,
        next: 0,
    }
}

impl Iterator for HostStream {
    type Item = Tick;

    fn next(&mut self) -> Option<Tick> {
        if self.next >= self.duration_ns {
            return None;
        }
        let offset = self.next;
        self.next += self.cadence_ns;
        let mut metrics = Vec::with_capacity(self.profile.baseline.len());
        for (&metric, &base) in &self.profile.baseline {
            let j = self.profile.jitter;
            let u: f64 = if j > 0.0 {
                self.rng.random_range(-j..=j)
            } else {
                0.0
            };
            let mut v = (base * (1.0 + u)).max(0.0);
            for a in self.anomalies.iter().filter(|a| a.metric == metric) {
                if a.active(&self.host, offset) {
                    v = a.apply(v).max(0.0);
                }
            }
            metrics.push(
                Metric::new(metric.name())
                    .tag(HOSTNAME_TAG, self.host.as_str())
                    .field("value", v)
                    .at(self.epoch_ns + offset),
            );
        }
        Some(Tick {
            offset_ns: offset,
            metrics,
        })
    }
}
