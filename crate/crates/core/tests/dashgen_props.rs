mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use lms::dashgen::{
    build_admin_overview, generate, residual_placeholders, AgentConfig, JobSummary, Scope,
    TemplateSet,
};
use lms::jobtags::JobRecord;
use lms::lineproto::Metric;
use lms::router::RouteConfig;
use lms::tsstore::Store;
use proptest::prelude::*;
use serde_json::Value;

const METRICS: [&str; 11] = [
    "cpu_load",
    "ipc",
    "flops_dp",
    "mem_bw",
    "mem_allocated",
    "net_io",
    "file_io",
    "pressure",
    "iter_time_100",
    "temperature",
    "energy",
];

fn config(dir: &std::path::Path) -> AgentConfig {
    let mut config = AgentConfig::new(dir, &RouteConfig::default());
    config.clock = Arc::new(|| 50 * common::MIN);
    config
}

/// Writes, for every host, one sample of each metric in its set.
fn populate(store: &Store, job: &str, metrics: &BTreeMap<String, BTreeSet<usize>>) {
    for (host, ms) in metrics {
        let rows: Vec<Metric> = ms
            .iter()
            .map(|&i| {
                Metric::new(METRICS[i])
                    .tag("hostname", host.clone())
                    .tag("jobid", job)
                    .tag("user", "alice")
                    .field("value", 1.0)
                    .at(common::MIN)
            })
            .collect();
        store.write_points("lms", &rows).unwrap();
    }
}

fn data_panels(doc: &Value) -> Vec<&Value> {
    doc["panels"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|p| p.get("targets").is_some())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn panel_count_placeholders_and_idempotence(
        metrics in proptest::collection::btree_map("h[0-9]{1,2}", proptest::collection::btree_set(0usize..METRICS.len(), 0..8), 1..6),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::in_memory();
        populate(&store, "j1", &metrics);
        let job = JobRecord::new("j1", "alice", metrics.keys().cloned(), 0);
        let config = config(dir.path());
        let first = generate(&config, &store, &job).unwrap();
        let bytes = std::fs::read(&first.path).unwrap();

        // Brute-force selection: a template applies if one host has every metric it needs.
        let templates = TemplateSet::builtin();
        let present: Vec<BTreeSet<&str>> = metrics.values().map(|s| s.iter().map(|&i| METRICS[i]).collect()).collect();
        let applies = |needs: &BTreeSet<String>| present.iter().any(|p| needs.iter().all(|n| p.contains(n.as_str())));
        let host_templates = templates.panels.iter().filter(|t| t.scope == Scope::Host && applies(&t.requires)).count();
        let job_templates = templates.panels.iter().filter(|t| t.scope == Scope::Job && applies(&t.requires)).count();

        let doc: Value = serde_json::from_slice(&bytes).unwrap();
        prop_assert_eq!(data_panels(&doc).len(), host_templates * metrics.len() + job_templates);
        prop_assert_eq!(first.dashboard.summary.host_panels, host_templates * metrics.len());
        prop_assert_eq!(first.dashboard.summary.job_panels, job_templates);
        prop_assert_eq!(residual_placeholders(&doc), 0);
        prop_assert!(!String::from_utf8_lossy(&bytes).contains("{{"));
        let panels = doc["panels"].as_array().unwrap();
        prop_assert!(panels[0].get("lmsEvaluation").is_some());
        let ids: BTreeSet<u64> = panels.iter().map(|p| p["id"].as_u64().unwrap()).collect();
        prop_assert_eq!(ids.len(), panels.len());

        let second = generate(&config, &store, &job).unwrap();
        prop_assert_eq!(std::fs::read(&second.path).unwrap(), bytes);
    }
}

#[test]
fn empty_metric_set_gives_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::in_memory();
    let job = JobRecord::new("j-empty", "alice", ["h1", "h2"], 0);
    let generated = generate(&config(dir.path()), &store, &job).unwrap();
    let panels = generated.dashboard.document["panels"]
        .as_array()
        .unwrap()
        .clone();
    assert_eq!(panels.len(), 1);
    assert_eq!(panels[0]["type"], "text");
    assert_eq!(generated.dashboard.document["time"]["to"], "now");
}

#[test]
fn finished_job_has_closed_time_range_and_app_panels() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::in_memory();
    let metrics = BTreeMap::from([
        ("h1".to_owned(), BTreeSet::from([0, 7])),
        ("h2".to_owned(), BTreeSet::from([0])),
    ]);
    populate(&store, "j2", &metrics);
    let mut job = JobRecord::new("j2", "alice", ["h1", "h2"], 0);
    job.end_time = Some(30 * common::MIN);
    let generated = generate(&config(dir.path()), &store, &job).unwrap();
    let doc = &generated.dashboard.document;
    assert_eq!(
        doc["time"]["to"],
        (30 * common::MIN / 1_000_000).to_string()
    );
    let titles: Vec<&str> = data_panels(doc)
        .iter()
        .map(|p| p["title"].as_str().unwrap())
        .collect();
    assert_eq!(titles.iter().filter(|t| t.contains("CPU load")).count(), 2);
    assert!(titles.contains(&"Pressure"), "{titles:?}");
}

#[test]
fn overview_orders_failing_first_and_drops_ended_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::in_memory();
    let config = config(dir.path());
    let mut summaries = Vec::new();
    for (id, cpu) in [("j-a", 8.0), ("j-b", 0.0), ("j-c", 8.0)] {
        let rows: Vec<Metric> = (0..40)
            .map(|k| {
                Metric::new("cpu_load")
                    .tag("hostname", "h1")
                    .tag("jobid", id)
                    .field("value", cpu)
                    .at(k * common::MIN)
            })
            .collect();
        store.write_points("lms", &rows).unwrap();
        let job = JobRecord::new(id, "alice", ["h1"], 0);
        let g = generate(&config, &store, &job).unwrap();
        summaries.push(JobSummary::new(&job, &g.evaluation, &g.dashboard));
    }
    let overview = build_admin_overview(&summaries);
    let order: Vec<&str> = overview["lmsOverview"]["jobs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|j| j["job_id"].as_str().unwrap())
        .collect();
    assert_eq!(order[0], "j-b");
    assert_eq!(order.len(), 3);
    summaries.retain(|s| s.job_id != "j-b");
    let overview = build_admin_overview(&summaries);
    assert_eq!(overview["lmsOverview"]["jobs"].as_array().unwrap().len(), 2);
    assert_eq!(
        build_admin_overview(&[])["lmsOverview"]["jobs"]
            .as_array()
            .unwrap()
            .len(),
        0
    );
}
