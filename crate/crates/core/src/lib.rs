//! Job-aware cluster performance monitoring.
//!
//! Measurements travel as line protocol from host agents to the [`router`],
//! which tags them with the jobs running on their origin host ([`jobtags`]),
//! stores them ([`tsstore`]) and republishes them on a topic bus. [`analysis`]
//! flags pathological jobs and classifies performance patterns, [`dashgen`]
//! turns templates into per-job dashboards, [`usermetric`] lets applications
//! annotate their own runs and [`simharness`] drives a synthetic cluster.

pub mod analysis;
pub mod dashgen;
pub mod jobtags;
pub mod lineproto;
pub mod router;
pub mod simharness;
pub mod tsstore;
pub mod usermetric;

/// Current wall-clock time in nanoseconds since the Unix epoch.
pub fn now_ns() -> i64 {
    let d = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .unwrap_or_default();
    i64::try_from(d.as_nanos()).unwrap_or(i64::MAX)
}
