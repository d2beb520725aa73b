//! Threshold + timeout detection over one node's series.

use serde::{Deserialize, Serialize};

use super::{AnalysisError, SchemaMetric};
use crate::jobtags::{HOSTNAME_TAG, JOBID_TAG};
use crate::lineproto::FieldValue;
use crate::tsstore::Series;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparator {
    Below,
    Above,
}

impl Comparator {
    /// NaN never satisfies either comparator.
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::Below => value < threshold,
            Comparator::Above => value > threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warn,
    Fail,
}

/// Flags a node whose metric stays on the wrong side of `threshold` for
/// longer than `timeout_ns`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTimeoutRule {
    pub id: String,
    pub metric: SchemaMetric,
    pub comparator: Comparator,
    pub threshold: f64,
    pub timeout_ns: i64,
    /// Largest sample gap that keeps a violating interval contiguous. `None`
    /// uses three times the series' median sampling interval.
    pub gap_tolerance_ns: Option<i64>,
    pub critical: bool,
    pub field: String,
}

impl ThresholdTimeoutRule {
    pub fn new(
        id: &str,
        metric: SchemaMetric,
        comparator: Comparator,
        threshold: f64,
        timeout_ns: i64,
    ) -> Self {
        ThresholdTimeoutRule {
            id: id.to_owned(),
            metric,
            comparator,
            threshold,
            timeout_ns,
            gap_tolerance_ns: None,
            critical: true,
            field: "value".to_owned(),
        }
    }

    pub fn severity(&self) -> Severity {
        if self.critical {
            Severity::Fail
        } else {
            Severity::Warn
        }
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |s: String| Err(AnalysisError::InvalidRule(self.id.clone(), s));
        if self.id.is_empty() {
            return bad("empty rule id".into());
        }
        if self.timeout_ns <= 0 {
            return bad("timeout must be positive".into());
        }
        if !self.threshold.is_finite() {
            return bad("threshold must be finite".into());
        }
        if let Some(gap) = self.gap_tolerance_ns {
            if gap < 0 || gap >= self.timeout_ns {
                return bad("gap tolerance must lie in [0, timeout)".into());
            }
        }
        Ok(())
    }

    /// Gap tolerance applied to `timestamps` (sorted).
    pub fn effective_gap_tolerance(&self, timestamps: &[i64]) -> i64 {
        self.gap_tolerance_ns.unwrap_or_else(|| {
            let default = 3 * median_interval(timestamps).unwrap_or(0);
            default.min(self.timeout_ns - 1)
        })
    }
}

pub fn median_interval(timestamps: &[i64]) -> Option<i64> {
    let mut gaps: Vec<i64> = timestamps.windows(2).map(|w| w[1] - w[0]).collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_unstable();
    let mid = gaps.len() / 2;
    Some(if gaps.len() % 2 == 1 {
        gaps[mid]
    } else {
        gaps[mid - 1] + (gaps[mid] - gaps[mid - 1]) / 2
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    /// Mean of the violating samples.
    pub mean: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub rule_id: String,
    pub job_id: Option<String>,
    pub hostname: Option<String>,
    pub t_start: i64,
    pub t_end: i64,
    pub severity: Severity,
    pub evidence: Evidence,
}

/// Numeric `(timestamp, value)` samples of `field`, sorted by time.
pub fn numeric_samples(series: &Series, field: &str) -> Result<Vec<(i64, f64)>, AnalysisError> {
    let mut out = Vec::with_capacity(series.points.len());
    for (ts, value) in series.field_values(field) {
        match value {
            FieldValue::Float(v) => out.push((ts, *v)),
            FieldValue::Integer(v) => out.push((ts, *v as f64)),
            other => {
                return Err(AnalysisError::TypeMismatch(format!(
                    "{} field {field:?} of {}",
                    other.kind(),
                    series.key.measurement
                )))
            }
        }
    }
    out.sort_by_key(|(ts, _)| *ts);
    Ok(out)
}

/// One finding per maximal run of violating samples (consecutive gaps within
/// the tolerance) whose span `t_last - t_first` exceeds the timeout.
pub fn eval_threshold_timeout(
    rule: &ThresholdTimeoutRule,
    series: &Series,
) -> Result<Vec<Finding>, AnalysisError> {
    let samples = numeric_samples(series, &rule.field)?;
    let timestamps: Vec<i64> = samples.iter().map(|(t, _)| *t).collect();
    let tolerance = rule.effective_gap_tolerance(&timestamps);

    let mut findings = Vec::new();
    let mut run: Option<Run> = None;
    for &(ts, value) in &samples {
        if rule.comparator.holds(value, rule.threshold) {
            match &mut run {
                Some(r) if ts - r.last <= tolerance => r.extend(ts, value),
                _ => {
                    if let Some(done) = run.take() {
                        findings.extend(done.finish(rule, series));
                    }
                    run = Some(Run::start(ts, value));
                }
            }
        } else if let Some(done) = run.take() {
            findings.extend(done.finish(rule, series));
        }
    }
    if let Some(done) = run {
        findings.extend(done.finish(rule, series));
    }
    Ok(findings)
}

struct Run {
    first: i64,
    last: i64,
    sum: f64,
    count: usize,
}

impl Run {
    fn start(ts: i64, value: f64) -> Self {
        Run {
            first: ts,
            last: ts,
            sum: value,
            count: 1,
        }
    }

    fn extend(&mut self, ts: i64, value: f64) {
        self.last = ts;
        self.sum += value;
        self.count += 1;
    }

    fn finish(self, rule: &ThresholdTimeoutRule, series: &Series) -> Option<Finding> {
        (self.last - self.first > rule.timeout_ns).then(|| Finding {
            rule_id: rule.id.clone(),
            job_id: series.key.tags.get(JOBID_TAG).cloned(),
            hostname: series.key.tags.get(HOSTNAME_TAG).cloned(),
            t_start: self.first,
            t_end: self.last,
            severity: rule.severity(),
            evidence: Evidence {
                mean: self.sum / self.count as f64,
                samples: self.count,
            },
        })
    }
}
