//! Rule evaluation over job time series.
//!
//! [`rules`] detects long threshold violations on one node, [`evaluate`]
//! builds the per-node job table and [`tree`] classifies a job from the
//! statistics in [`stats`]. Thresholds and the tree are configuration; the
//! shipped defaults live in `config/analysis.toml`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;

pub mod evaluate;
pub mod rules;
pub mod schema;
pub mod stats;
pub mod tree;

pub use evaluate::{evaluate_job, Cell, CellStatus, EvaluationRow, EvaluationTable, PatternRow};
pub use rules::{
    eval_threshold_timeout, Comparator, Evidence, Finding, Severity, ThresholdTimeoutRule,
};
pub use schema::{SchemaMetric, UnknownMetric};
pub use stats::{compute_job_stats, metric_stats};
pub use tree::{DecisionTree, TreeNode};

use crate::jobtags::{JobRecord, JOBID_TAG};
use crate::tsstore::StoreError;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("rule {0}: {1}")]
    InvalidRule(String, String),
    #[error("invalid decision tree: {0}")]
    InvalidTree(String),
    #[error("missing statistic {0}")]
    MissingStatistic(String),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("no samples for {0}")]
    NoData(SchemaMetric),
    #[error(transparent)]
    UnknownMetric(#[from] UnknownMetric),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("config: {0}")]
    Config(String),
}

const BUILTIN_CONFIG: &str = include_str!("../../config/analysis.toml");
const NS_PER_SEC: f64 = 1e9;

/// Rules plus an optional pattern tree, as loaded from a TOML file.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub rules: Vec<ThresholdTimeoutRule>,
    pub tree: Option<DecisionTree>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    rule: Vec<RawRule>,
    tree: Option<TreeNode>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    id: String,
    metric: String,
    comparator: Comparator,
    threshold: f64,
    unit: Option<String>,
    timeout_secs: f64,
    gap_tolerance_secs: Option<f64>,
    #[serde(default = "yes")]
    critical: bool,
    #[serde(default = "value_field")]
    field: String,
}

fn yes() -> bool {
    true
}

fn value_field() -> String {
    "value".to_owned()
}

fn secs_to_ns(secs: f64) -> i64 {
    (secs * NS_PER_SEC).round() as i64
}

impl AnalysisConfig {
    pub fn from_toml(text: &str) -> Result<Self, AnalysisError> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| AnalysisError::Config(e.to_string()))?;
        let mut rules = Vec::with_capacity(raw.rule.len());
        let mut ids = BTreeSet::new();
        for r in raw.rule {
            let metric: SchemaMetric = r.metric.parse()?;
            if let Some(unit) = &r.unit {
                if unit != metric.unit() {
                    return Err(AnalysisError::InvalidRule(
                        r.id,
                        format!(
                            "unit {unit:?} does not match {} ({})",
                            metric,
                            metric.unit()
                        ),
                    ));
                }
            }
            if !ids.insert(r.id.clone()) {
                return Err(AnalysisError::InvalidRule(r.id, "duplicate rule id".into()));
            }
            let rule = ThresholdTimeoutRule {
                id: r.id,
                metric,
                comparator: r.comparator,
                threshold: r.threshold,
                timeout_ns: secs_to_ns(r.timeout_secs),
                gap_tolerance_ns: r.gap_tolerance_secs.map(secs_to_ns),
                critical: r.critical,
                field: r.field,
            };
            rule.validate()?;
            rules.push(rule);
        }
        let tree = raw.tree.map(DecisionTree::new).transpose()?;
        Ok(AnalysisConfig { rules, tree })
    }

    pub fn load(path: &Path) -> Result<Self, AnalysisError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AnalysisError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The shipped defaults. Thresholds are site-specific placeholders.
    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN_CONFIG).expect("builtin analysis config")
    }

    /// Same config with every duration divided by `factor`, for compressed-time runs.
    pub fn time_scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for rule in &mut out.rules {
            rule.timeout_ns = ((rule.timeout_ns as f64) / factor).round().max(1.0) as i64;
            rule.gap_tolerance_ns = rule
                .gap_tolerance_ns
                .map(|g| (((g as f64) / factor).round() as i64).min(rule.timeout_ns - 1));
        }
        out
    }

    pub fn rule(&self, id: &str) -> Option<&ThresholdTimeoutRule> {
        self.rules.iter().find(|r| r.id == id)
    }

    pub fn evaluate(
        &self,
        job: &JobRecord,
        store: &crate::tsstore::Store,
        db: &str,
        now: i64,
    ) -> Result<EvaluationTable, AnalysisError> {
        evaluate_job(job, &self.rules, self.tree.as_ref(), store, db, now)
    }
}

/// `[start, end or now]` as a half-open store range.
pub(crate) fn job_window(job: &JobRecord, now: i64) -> (i64, i64) {
    let end = job.end_time.unwrap_or(now).max(job.start_time);
    (job.start_time, end.saturating_add(1))
}

pub(crate) fn job_filter(job: &JobRecord) -> BTreeMap<String, String> {
    BTreeMap::from([(JOBID_TAG.to_owned(), job.job_id.clone())])
}
