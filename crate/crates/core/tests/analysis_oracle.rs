mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{brute_force_findings, findings_summary, run_series, same_findings, series_of, MIN};
use lms::analysis::{
    compute_job_stats, eval_threshold_timeout, evaluate_job, metric_stats, AnalysisConfig,
    Comparator, SchemaMetric, ThresholdTimeoutRule,
};
use lms::jobtags::JobRecord;
use lms::lineproto::Metric;
use lms::tsstore::Store;
use proptest::prelude::*;

fn rule(timeout_min: i64, tolerance: Option<i64>) -> ThresholdTimeoutRule {
    let mut r = ThresholdTimeoutRule::new(
        "flops_break",
        SchemaMetric::FlopsDp,
        Comparator::Below,
        100.0,
        timeout_min * MIN,
    );
    r.gap_tolerance_ns = tolerance.map(|t| t.min(timeout_min * MIN - 1));
    r
}

fn rule_strategy() -> impl Strategy<Value = ThresholdTimeoutRule> {
    (
        prop_oneof![Just(5i64), Just(10), Just(20)],
        proptest::option::of(0i64..15 * MIN),
    )
        .prop_map(|(t, tol)| rule(t, tol))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn detection_matches_interval_enumeration(rule in rule_strategy(), samples in run_series(12)) {
        let got = eval_threshold_timeout(&rule, &series_of("flops_dp", "h1", &samples)).unwrap();
        let expected = brute_force_findings(&rule, &samples);
        prop_assert!(same_findings(&findings_summary(&got), &expected), "{:?} vs {:?}", findings_summary(&got), expected);
        for f in &got {
            prop_assert!(f.t_end - f.t_start >= rule.timeout_ns);
            prop_assert_eq!(f.hostname.as_deref(), Some("h1"));
            prop_assert_eq!(f.job_id.as_deref(), Some("j1"));
        }
    }

    /// Appending compliant samples keeps every finding, for a fixed gap tolerance.
    #[test]
    fn compliant_extension_keeps_findings(
        timeout in prop_oneof![Just(5i64), Just(10)],
        tol in 0i64..4 * MIN,
        samples in run_series(10),
        extra in proptest::collection::vec((1i64..30 * MIN, 100.0f64..1e4), 1..20),
    ) {
        let rule = rule(timeout, Some(tol));
        let before = findings_summary(&eval_threshold_timeout(&rule, &series_of("flops_dp", "h1", &samples)).unwrap());
        let mut extended = samples.clone();
        let mut t = samples.last().map_or(0, |s| s.0);
        for (gap, v) in extra {
            t += gap;
            extended.push((t, v));
        }
        let after = findings_summary(&eval_threshold_timeout(&rule, &series_of("flops_dp", "h1", &extended)).unwrap());
        prop_assert!(same_findings(&before, &after));
    }

    #[test]
    fn stats_match_naive_recomputation(nodes in proptest::collection::btree_map("h[0-9]", proptest::collection::vec(0.0f64..1e6, 1..50), 1..6)) {
        let stats = metric_stats(&nodes).unwrap();
        let all: Vec<f64> = nodes.values().flatten().copied().collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let max = all.iter().copied().fold(f64::MIN, f64::max);
        let node_means: Vec<f64> = nodes.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
        let hi = node_means.iter().copied().fold(f64::MIN, f64::max);
        let lo = node_means.iter().copied().fold(f64::MAX, f64::min);
        let rel = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(f64::MIN_POSITIVE);
        prop_assert_eq!(stats[0].0, "mean");
        prop_assert!(rel(stats[0].1, mean), "{} vs {}", stats[0].1, mean);
        prop_assert_eq!(stats[1].1, max);
        if lo > 0.0 {
            prop_assert!(rel(stats[2].1, hi / lo), "{} vs {}", stats[2].1, hi / lo);
        }
    }

    #[test]
    fn classification_is_pure_and_path_local(
        values in proptest::collection::vec(0.0f64..1e5, 15),
        scale in 0.01f64..100.0,
    ) {
        let config = AnalysisConfig::builtin();
        let tree = config.tree.as_ref().unwrap();
        let names: Vec<String> = tree.statistics().into_iter().collect();
        let mut stats: BTreeMap<String, f64> = names.iter().cloned().zip(values.iter().copied()).collect();
        stats.insert("net_io.mean".into(), values[14]);
        let (label, path) = tree.trace(&stats).unwrap();
        prop_assert_eq!(tree.classify(&stats).unwrap(), label.clone());
        prop_assert!(tree.leaves().contains(&label));
        let on_path: BTreeSet<&str> = path.iter().map(|d| d.statistic.as_str()).collect();
        for name in stats.keys().cloned().collect::<Vec<_>>() {
            if !on_path.contains(name.as_str()) {
                let mut scaled = stats.clone();
                *scaled.get_mut(&name).unwrap() *= scale;
                prop_assert_eq!(tree.classify(&scaled).unwrap(), label.clone());
            }
        }
    }
}

#[test]
fn large_series_match_enumeration() {
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(20));
    runner
        .run(&(rule_strategy(), run_series(60)), |(rule, samples)| {
            let got =
                eval_threshold_timeout(&rule, &series_of("flops_dp", "h1", &samples)).unwrap();
            prop_assert!(same_findings(
                &findings_summary(&got),
                &brute_force_findings(&rule, &samples)
            ));
            Ok(())
        })
        .unwrap();
    // One all-violating 1000-point series.
    let samples: Vec<(i64, f64)> = (0..1000).map(|k| (k * MIN, (k % 97) as f64)).collect();
    let rule = rule(10, None);
    let got = eval_threshold_timeout(&rule, &series_of("flops_dp", "h1", &samples)).unwrap();
    assert_eq!(findings_summary(&got).len(), 1);
    assert!(same_findings(
        &findings_summary(&got),
        &brute_force_findings(&rule, &samples)
    ));
}

#[test]
fn split_by_one_compliant_sample() {
    let rule = rule(10, None);
    let mut samples: Vec<(i64, f64)> = (0..25).map(|k| (k * MIN, 1.0)).collect();
    samples[12].1 = 500.0;
    let got = eval_threshold_timeout(&rule, &series_of("flops_dp", "h1", &samples)).unwrap();
    assert_eq!(got.len(), 2);
    samples[8].1 = 500.0;
    samples[12].1 = 1.0;
    let got = eval_threshold_timeout(&rule, &series_of("flops_dp", "h1", &samples)).unwrap();
    assert_eq!(got.len(), 1);
}

fn write_host(store: &Store, host: &str, samples: &[(i64, f64)]) {
    let rows: Vec<Metric> = samples
        .iter()
        .map(|&(t, v)| {
            Metric::new("flops_dp")
                .tag("hostname", host)
                .tag("jobid", "j1")
                .tag("user", "u")
                .field("value", v)
                .at(t)
        })
        .collect();
    store.write_points("lms", &rows).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn findings_are_node_local(a in run_series(8), b1 in run_series(8), b2 in run_series(8)) {
        let job = JobRecord::new("j1", "u", ["hA", "hB"], 0);
        let rules = [rule(10, None)];
        let end = 1_000_000 * MIN;
        let column_a = |b: &[(i64, f64)]| {
            let store = Store::in_memory();
            write_host(&store, "hA", &a);
            write_host(&store, "hB", b);
            let table = evaluate_job(&job, &rules, None, &store, "lms", end).unwrap();
            prop_assert_eq!(table.hosts.len(), 2);
            prop_assert_eq!(table.rows.len(), 1);
            Ok(table.rows[0].cells[0].clone())
        };
        prop_assert_eq!(column_a(&b1)?, column_a(&b2)?);
    }

    #[test]
    fn job_stats_from_store_match_naive(nodes in proptest::collection::btree_map("h[0-3]", proptest::collection::vec(0.1f64..1e4, 1..30), 1..4)) {
        let store = Store::in_memory();
        for (h, values) in &nodes {
            let samples: Vec<(i64, f64)> = values.iter().enumerate().map(|(k, v)| (k as i64 * MIN, *v)).collect();
            let rows: Vec<Metric> = samples.iter().map(|&(t, v)| Metric::new("cpu_load").tag("hostname", h.clone()).tag("jobid", "j1").field("value", v).at(t)).collect();
            store.write_points("lms", &rows).unwrap();
        }
        let job = JobRecord::new("j1", "u", nodes.keys().cloned(), 0);
        let stats = compute_job_stats(&job, &store, "lms", &BTreeSet::from([SchemaMetric::CpuLoad]), 100 * MIN).unwrap();
        let all: Vec<f64> = nodes.values().flatten().copied().collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        prop_assert!((stats["cpu_load.mean"] - mean).abs() <= 1e-12 * mean);
        let means: Vec<f64> = nodes.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
        let ratio = means.iter().copied().fold(f64::MIN, f64::max) / means.iter().copied().fold(f64::MAX, f64::min);
        prop_assert!((stats["cpu_load.imbalance"] - ratio).abs() <= 1e-12 * ratio);
    }
}

#[test]
fn imbalance_of_one_doubled_node() {
    let nodes: BTreeMap<String, Vec<f64>> = BTreeMap::from([
        ("h1".into(), vec![10.0; 5]),
        ("h2".into(), vec![10.0; 5]),
        ("h3".into(), vec![20.0; 5]),
    ]);
    assert_eq!(metric_stats(&nodes).unwrap()[2], ("imbalance", 2.0));
}
