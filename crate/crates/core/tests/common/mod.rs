#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use lms::analysis::{Finding, ThresholdTimeoutRule};
use lms::lineproto::{FieldValue, Metric};
use lms::router::{RouteConfig, Router};
use lms::simharness::Scenario;
use lms::tsstore::{Point, Series, SeriesKey, Store};
use proptest::prelude::*;

pub const MIN: i64 = 60_000_000_000;

/// Fixed scenario epoch: 2026-01-01T00:00:00Z.
pub const EPOCH: i64 = 1_767_225_600_000_000_000;

pub fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(format!("{name}.toml"));
    Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn router(config: RouteConfig) -> (Arc<Router>, Arc<Store>) {
    let store = Arc::new(Store::in_memory());
    (
        Arc::new(Router::with_store(config, Arc::clone(&store))),
        store,
    )
}

pub fn filter(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Text that may contain every character the line protocol escapes.
pub fn text() -> impl Strategy<Value = String> {
    proptest::string::string_regex(r#"[a-zA-Z0-9_ ,="\\#.\-\t\rµé]{1,12}"#).unwrap()
}

pub fn measurement() -> impl Strategy<Value = String> {
    text().prop_filter("no leading #", |s| !s.starts_with('#'))
}

pub fn field_value() -> impl Strategy<Value = FieldValue> {
    prop_oneof![
        any::<f64>()
            .prop_filter("finite", |f| f.is_finite())
            .prop_map(FieldValue::Float),
        (-1e6f64..1e6).prop_map(FieldValue::Float),
        any::<i64>().prop_map(FieldValue::Integer),
        any::<bool>().prop_map(FieldValue::Boolean),
        proptest::string::string_regex(r#"[a-zA-Z0-9 ,="\\#]{0,12}"#)
            .unwrap()
            .prop_map(FieldValue::String),
    ]
}

pub fn metric() -> impl Strategy<Value = Metric> {
    (
        measurement(),
        proptest::collection::btree_map(text(), text(), 0..4),
        proptest::collection::btree_map(text(), field_value(), 1..4),
        proptest::option::of(any::<i64>()),
    )
        .prop_map(|(measurement, tags, fields, timestamp)| Metric {
            measurement,
            tags,
            fields,
            timestamp,
        })
}

/// Sample series built from runs of violating / compliant samples against a
/// `below 100` threshold, with mostly regular one-minute spacing.
pub fn run_series(max_runs: usize) -> impl Strategy<Value = Vec<(i64, f64)>> {
    proptest::collection::vec(
        (
            1usize..40,
            any::<bool>(),
            proptest::collection::vec((0u8..20, 0.0f64..100.0), 40),
        ),
        0..max_runs,
    )
    .prop_map(|runs| {
        let mut t = 0i64;
        let mut out = Vec::new();
        for (len, violating, noise) in runs {
            for &(gap, v) in noise.iter().take(len) {
                t += match gap {
                    0 => 1_000_000_000,
                    1 => 2 * MIN,
                    2 => 5 * MIN,
                    3 => 13 * MIN,
                    _ => MIN,
                };
                out.push((t, if violating { v } else { 100.0 + v }));
            }
        }
        out
    })
}

pub fn series_of(measurement: &str, host: &str, samples: &[(i64, f64)]) -> Series {
    Series {
        key: SeriesKey {
            database: "lms".into(),
            measurement: measurement.into(),
            tags: filter(&[("hostname", host), ("jobid", "j1")]),
        },
        points: samples
            .iter()
            .map(|&(timestamp, v)| Point {
                timestamp,
                field: "value".into(),
                value: FieldValue::Float(v),
            })
            .collect(),
    }
}

/// Three times the median gap (mean of the two middle gaps for even counts,
/// rounded down), capped below the timeout.
pub fn oracle_tolerance(rule: &ThresholdTimeoutRule, samples: &[(i64, f64)]) -> i64 {
    if let Some(g) = rule.gap_tolerance_ns {
        return g;
    }
    let mut gaps: Vec<i64> = samples.windows(2).map(|w| w[1].0 - w[0].0).collect();
    gaps.sort();
    let median = match gaps.len() {
        0 => 0,
        n if n % 2 == 1 => gaps[n / 2],
        n => ((gaps[n / 2 - 1] as i128 + gaps[n / 2] as i128) / 2) as i64,
    };
    (3 * median).min(rule.timeout_ns - 1)
}

/// Every maximal violating interval longer than the timeout, found by
/// enumerating all `(i, j)` sample pairs. Yields `(t_start, t_end, samples, mean)`.
pub fn brute_force_findings(
    rule: &ThresholdTimeoutRule,
    samples: &[(i64, f64)],
) -> Vec<(i64, i64, usize, f64)> {
    let tol = oracle_tolerance(rule, samples);
    let bad = |k: usize| rule.comparator.holds(samples[k].1, rule.threshold);
    let linked = |a: usize, b: usize| samples[b].0 - samples[a].0 <= tol;
    let n = samples.len();
    let mut out = Vec::new();
    for i in 0..n {
        // [i, j] qualifies iff [i, j-1] does and sample j joins it.
        let mut valid = true;
        for j in i..n {
            valid = valid && bad(j) && (j == i || linked(j - 1, j));
            if !valid {
                break;
            }
            let left_closed = i == 0 || !bad(i - 1) || !linked(i - 1, i);
            let right_closed = j + 1 == n || !bad(j + 1) || !linked(j, j + 1);
            if left_closed && right_closed && samples[j].0 - samples[i].0 > rule.timeout_ns {
                let values: Vec<f64> = samples[i..=j].iter().map(|s| s.1).collect();
                out.push((
                    samples[i].0,
                    samples[j].0,
                    values.len(),
                    values.iter().sum::<f64>() / values.len() as f64,
                ));
            }
        }
    }
    out
}

pub fn findings_summary(findings: &[Finding]) -> Vec<(i64, i64, usize, f64)> {
    findings
        .iter()
        .map(|f| (f.t_start, f.t_end, f.evidence.samples, f.evidence.mean))
        .collect()
}

pub fn same_findings(a: &[(i64, i64, usize, f64)], b: &[(i64, i64, usize, f64)]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.0 == y.0 && x.1 == y.1 && x.2 == y.2 && (x.3 - y.3).abs() <= 1e-9 * x.3.abs().max(1.0)
        })
}
