//! Per-node evaluation table: one row per rule, one column per job host.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::rules::{
    eval_threshold_timeout, numeric_samples, Finding, Severity, ThresholdTimeoutRule,
};
use super::stats::compute_job_stats;
use super::tree::DecisionTree;
use super::{job_filter, job_window, AnalysisError};
use crate::jobtags::{JobRecord, HOSTNAME_TAG};
use crate::tsstore::Store;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Pass,
    NoData,
    Warn,
    Fail,
}

impl CellStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CellStatus::Pass => "pass",
            CellStatus::NoData => "nodata",
            CellStatus::Warn => "warn",
            CellStatus::Fail => "fail",
        }
    }
}

impl fmt::Display for CellStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub status: CellStatus,
    /// Mean over the evaluation window, `None` without samples.
    pub value: Option<f64>,
    pub findings: Vec<Finding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub check: String,
    pub metric: String,
    pub unit: String,
    /// Same order as [`EvaluationTable::hosts`].
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRow {
    pub label: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationTable {
    pub job_id: String,
    pub user: String,
    pub hosts: Vec<String>,
    pub t_start: i64,
    /// Exclusive window end; for running jobs the evaluation time.
    pub t_end: i64,
    pub running: bool,
    pub rows: Vec<EvaluationRow>,
    pub pattern: Option<PatternRow>,
}

impl EvaluationTable {
    /// Worst status over all cells; `Pass` for an empty table.
    pub fn worst_status(&self) -> CellStatus {
        self.rows
            .iter()
            .flat_map(|r| r.cells.iter().map(|c| c.status))
            .max()
            .unwrap_or(CellStatus::Pass)
    }

    /// Statuses of one host's column.
    pub fn column(&self, host: &str) -> Option<Vec<CellStatus>> {
        let idx = self.hosts.iter().position(|h| h == host)?;
        Some(self.rows.iter().map(|r| r.cells[idx].status).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("evaluation json")
    }

    /// Rows as label/cell text, used by the aligned renderer and dashboards.
    pub fn text_grid(&self) -> Vec<Vec<String>> {
        let mut grid = Vec::with_capacity(self.rows.len() + 2);
        let mut header = vec!["check".to_owned()];
        header.extend(self.hosts.iter().cloned());
        grid.push(header);
        for row in &self.rows {
            let mut line = vec![format!("{} [{}]", row.check, row.unit)];
            for cell in &row.cells {
                line.push(match cell.value {
                    Some(v) => format!("{} {}", cell.status, format_value(v)),
                    None => cell.status.to_string(),
                });
            }
            grid.push(line);
        }
        if let Some(p) = &self.pattern {
            let mut line = vec!["pattern".to_owned()];
            let text = match (&p.label, &p.error) {
                (Some(l), _) => l.clone(),
                (None, Some(e)) => format!("n/a ({e})"),
                (None, None) => "n/a".to_owned(),
            };
            line.extend(self.hosts.iter().map(|_| text.clone()));
            grid.push(line);
        }
        grid
    }
}

fn format_value(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(0.01..1e6).contains(&a) {
        format!("{v:.3e}")
    } else {
        format!("{v:.2}")
    }
}

impl fmt::Display for EvaluationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "job {} ({}) {}",
            self.job_id,
            self.user,
            if self.running { "running" } else { "finished" }
        )?;
        let grid = self.text_grid();
        let cols = grid.first().map_or(0, Vec::len);
        let widths: Vec<usize> = (0..cols)
            .map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        for row in &grid {
            let mut line = String::new();
            for (c, cell) in row.iter().enumerate() {
                if c > 0 {
                    line.push_str("  ");
                }
                line.push_str(&format!("{cell:<width$}", width = widths[c]));
            }
            writeln!(f, "{}", line.trim_end())?;
        }
        Ok(())
    }
}

/// Evaluates every rule on every job host over `[start, end or now]`.
///
/// The pattern row is present when a tree is given; missing statistics show
/// up as an error on that row rather than failing the evaluation.
pub fn evaluate_job(
    job: &JobRecord,
    rules: &[ThresholdTimeoutRule],
    tree: Option<&DecisionTree>,
    store: &Store,
    db: &str,
    now: i64,
) -> Result<EvaluationTable, AnalysisError> {
    let (t0, t1) = job_window(job, now);
    let hosts: Vec<String> = job.hosts.iter().cloned().collect();
    let db_known = store.has_database(db);
    let mut rows = Vec::with_capacity(rules.len());
    for rule in rules {
        let mut cells = Vec::with_capacity(hosts.len());
        for host in &hosts {
            let mut filter = job_filter(job);
            filter.insert(HOSTNAME_TAG.to_owned(), host.clone());
            let series = if db_known {
                store.query_range(db, rule.metric.name(), &filter, t0, t1)?
            } else {
                Vec::new()
            };
            let mut values = Vec::new();
            let mut findings = Vec::new();
            for s in &series {
                values.extend(numeric_samples(s, &rule.field)?.into_iter().map(|(_, v)| v));
                findings.extend(eval_threshold_timeout(rule, s)?);
            }
            let status = if values.is_empty() {
                CellStatus::NoData
            } else if findings.iter().any(|f| f.severity == Severity::Fail) {
                CellStatus::Fail
            } else if !findings.is_empty() {
                CellStatus::Warn
            } else {
                CellStatus::Pass
            };
            let value =
                (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
            cells.push(Cell {
                status,
                value,
                findings,
            });
        }
        rows.push(EvaluationRow {
            check: rule.id.clone(),
            metric: rule.metric.name().to_owned(),
            unit: rule.metric.unit().to_owned(),
            cells,
        });
    }

    let pattern = tree.map(|tree| {
        match compute_job_stats(job, store, db, &tree.required_metrics(), now)
            .and_then(|s| tree.classify(&s))
        {
            Ok(label) => PatternRow {
                label: Some(label),
                error: None,
            },
            Err(e) => PatternRow {
                label: None,
                error: Some(e.to_string()),
            },
        }
    });

    Ok(EvaluationTable {
        job_id: job.job_id.clone(),
        user: job.user.clone(),
        hosts,
        t_start: t0,
        t_end: t1,
        running: job.is_running(),
        rows,
        pattern,
    })
}
