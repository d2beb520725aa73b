use std::collections::{BTreeMap, BTreeSet};

use super::rules::numeric_samples;
use super::tree::stat_name;
use super::{job_filter, job_window, AnalysisError, SchemaMetric};
use crate::jobtags::{JobRecord, HOSTNAME_TAG};
use crate::tsstore::Store;

/// `mean`, `max` and cross-node `imbalance` of one metric from per-node samples.
///
/// The mean and maximum pool every sample of every node. The imbalance is the
/// largest node mean over the smallest; nodes without samples are ignored, a
/// zero smallest mean gives infinity (or 1 when every node is zero).
pub fn metric_stats(per_node: &BTreeMap<String, Vec<f64>>) -> Option<[(&'static str, f64); 3]> {
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut max = f64::NEG_INFINITY;
    let mut node_means = Vec::new();
    for values in per_node.values().filter(|v| !v.is_empty()) {
        let node_sum: f64 = values.iter().sum();
        sum += node_sum;
        count += values.len();
        max = values.iter().copied().fold(max, f64::max);
        node_means.push(node_sum / values.len() as f64);
    }
    if count == 0 {
        return None;
    }
    let hi = node_means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = node_means.iter().copied().fold(f64::INFINITY, f64::min);
    let imbalance = if lo > 0.0 {
        hi / lo
    } else if hi == 0.0 {
        1.0
    } else {
        f64::INFINITY
    };
    Some([
        ("mean", sum / count as f64),
        ("max", max),
        ("imbalance", imbalance),
    ])
}

/// Per-job statistics for `metrics`, read from `db` over the job window.
pub fn compute_job_stats(
    job: &JobRecord,
    store: &Store,
    db: &str,
    metrics: &BTreeSet<SchemaMetric>,
    now: i64,
) -> Result<BTreeMap<String, f64>, AnalysisError> {
    let (t0, t1) = job_window(job, now);
    let mut out = BTreeMap::new();
    for &metric in metrics {
        let mut per_node: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for host in &job.hosts {
            let mut filter = job_filter(job);
            filter.insert(HOSTNAME_TAG.to_owned(), host.clone());
            let series = if store.has_database(db) {
                store.query_range(db, metric.name(), &filter, t0, t1)?
            } else {
                Vec::new()
            };
            let values = per_node.entry(host.clone()).or_default();
            for s in &series {
                values.extend(numeric_samples(s, "value")?.into_iter().map(|(_, v)| v));
            }
        }
        let stats = metric_stats(&per_node).ok_or(AnalysisError::NoData(metric))?;
        for (kind, value) in stats {
            out.insert(stat_name(metric, kind), value);
        }
    }
    Ok(out)
}
