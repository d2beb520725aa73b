//! Per-job dashboards from templates, plus the admin overview of running jobs.
//!
//! Documents are Grafana dashboard JSON. Keys are emitted sorted and panel
//! ids are assigned in generation order, so equal inputs give byte-identical
//! output.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::analysis::{CellStatus, EvaluationTable};
use crate::jobtags::{JobRecord, HOSTNAME_TAG, JOBID_TAG, JOB_EVENT_MEASUREMENT};
use crate::tsstore::{Store, StoreError};
use crate::usermetric::EVENT_FIELD;

pub mod agent;
pub mod template;

pub use agent::{dashboard_file, generate, AgentConfig, DashboardAgent, Generated};
pub use template::{PanelTemplate, Scope, TemplateSet};

/// Placeholder names a template may use as `{{NAME}}`.
pub const PLACEHOLDERS: [&str; 8] = [
    "JOB_ID", "USER", "DB", "HOSTS", "HOST", "T_START", "T_END", "METRIC",
];

const GRID_WIDTH: u64 = 24;
const PANEL_WIDTH: u64 = 6;
const PANEL_HEIGHT: u64 = 7;
const THUMBNAILS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum DashError {
    #[error("template {0}: {1}")]
    MalformedTemplate(String, String),
    #[error("template {template}: unresolved placeholder {{{{{name}}}}}")]
    UnresolvedPlaceholder { template: String, name: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("io: {0}")]
    Io(String),
}

/// Placeholder values for one substitution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vars(BTreeMap<&'static str, String>);

impl Vars {
    pub fn for_job(job: &JobRecord, db: &str) -> Self {
        let mut vars = Vars::default();
        vars.set("JOB_ID", job.job_id.clone());
        vars.set("USER", job.user.clone());
        vars.set("DB", db.to_owned());
        vars.set(
            "HOSTS",
            job.hosts.iter().cloned().collect::<Vec<_>>().join(","),
        );
        vars.set("T_START", ns_to_ms(job.start_time).to_string());
        vars.set(
            "T_END",
            job.end_time
                .map_or_else(|| "now".to_owned(), |t| ns_to_ms(t).to_string()),
        );
        vars
    }

    /// Panics on names outside [`PLACEHOLDERS`].
    pub fn set(&mut self, name: &'static str, value: String) {
        assert!(PLACEHOLDERS.contains(&name), "unknown placeholder {name}");
        self.0.insert(name, value);
    }

    pub fn with(&self, name: &'static str, value: &str) -> Self {
        let mut out = self.clone();
        out.set(name, value.to_owned());
        out
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }
}

pub fn ns_to_ms(ns: i64) -> i64 {
    ns.div_euclid(1_000_000)
}

/// Replaces every `{{NAME}}` in `text`.
pub fn substitute_str(text: &str, vars: &Vars, template: &str) -> Result<String, DashError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        let unresolved = |name: &str| DashError::UnresolvedPlaceholder {
            template: template.to_owned(),
            name: name.to_owned(),
        };
        let close = after.find("}}").ok_or_else(|| unresolved(after))?;
        let name = &after[..close];
        out.push_str(vars.get(name).ok_or_else(|| unresolved(name))?);
        rest = &after[close + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Substitutes placeholders in every string and key of `value`.
pub fn substitute(value: &Value, vars: &Vars, template: &str) -> Result<Value, DashError> {
    Ok(match value {
        Value::String(s) => Value::String(substitute_str(s, vars, template)?),
        Value::Array(items) => Value::Array(
            items
                .iter()
                .map(|v| substitute(v, vars, template))
                .collect::<Result<_, _>>()?,
        ),
        Value::Object(map) => {
            let mut out = Map::new();
            for (k, v) in map {
                out.insert(
                    substitute_str(k, vars, template)?,
                    substitute(v, vars, template)?,
                );
            }
            Value::Object(out)
        }
        other => other.clone(),
    })
}

/// Counts `{{` occurrences in the serialized document.
pub fn residual_placeholders(doc: &Value) -> usize {
    serde_json::to_string(doc)
        .expect("json")
        .matches("{{")
        .count()
}

/// Measurements a job emitted, per host, and its event series.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricInventory {
    pub per_host: BTreeMap<String, BTreeSet<String>>,
    /// Job-tagged measurements carrying a string `text` field.
    pub events: BTreeSet<String>,
}

impl MetricInventory {
    pub fn all(&self) -> BTreeSet<String> {
        self.per_host.values().flatten().cloned().collect()
    }
}

/// Probes `db` for the measurements tagged with the job.
pub fn probe_metrics(
    store: &Store,
    db: &str,
    job: &JobRecord,
) -> Result<MetricInventory, DashError> {
    let mut inventory = MetricInventory::default();
    if !store.has_database(db) {
        return Ok(inventory);
    }
    for host in &job.hosts {
        let filter = BTreeMap::from([
            (JOBID_TAG.to_owned(), job.job_id.clone()),
            (HOSTNAME_TAG.to_owned(), host.clone()),
        ]);
        inventory
            .per_host
            .insert(host.clone(), store.measurements(db, &filter)?);
    }
    let job_filter = BTreeMap::from([(JOBID_TAG.to_owned(), job.job_id.clone())]);
    for measurement in store.measurements(db, &job_filter)? {
        if measurement == JOB_EVENT_MEASUREMENT {
            continue;
        }
        let series = store.query_range(db, &measurement, &job_filter, i64::MIN, i64::MAX)?;
        let is_event = series
            .iter()
            .flat_map(|s| s.field_values(EVENT_FIELD))
            .any(|(_, v)| v.as_str().is_some());
        if is_event {
            inventory.events.insert(measurement);
        }
    }
    Ok(inventory)
}

/// Templates whose required metrics are all present on at least one host.
pub fn select_templates<'a>(
    hosts: &BTreeSet<String>,
    available: &BTreeMap<String, BTreeSet<String>>,
    templates: &'a TemplateSet,
) -> Vec<&'a PanelTemplate> {
    templates
        .panels
        .iter()
        .filter(|t| {
            hosts
                .iter()
                .filter_map(|h| available.get(h))
                .any(|metrics| t.requires.is_subset(metrics))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DashboardSummary {
    pub rows: usize,
    pub host_panels: usize,
    pub job_panels: usize,
    pub annotations: usize,
    /// `(template, error)` for templates left out of the document.
    pub skipped: Vec<(String, String)>,
    /// Panels offered as thumbnails in the overview.
    pub thumbnails: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dashboard {
    pub uid: String,
    pub document: Value,
    pub summary: DashboardSummary,
}

impl Dashboard {
    pub fn to_json(&self) -> String {
        to_json(&self.document)
    }
}

pub fn to_json(doc: &Value) -> String {
    let mut text = serde_json::to_string_pretty(doc).expect("dashboard json");
    text.push('\n');
    text
}

pub fn dashboard_uid(job_id: &str) -> String {
    format!("lms-job-{job_id}")
}

struct Layout {
    next_id: u64,
    y: u64,
    x: u64,
    row_height: u64,
}

impl Layout {
    fn place(&mut self, panel: &mut Value, w: u64, h: u64) -> u64 {
        if self.x + w > GRID_WIDTH {
            self.newline();
        }
        let id = self.next_id;
        self.next_id += 1;
        panel["id"] = json!(id);
        panel["gridPos"] = json!({ "x": self.x, "y": self.y, "w": w, "h": h });
        self.x += w;
        self.row_height = self.row_height.max(h);
        id
    }

    fn newline(&mut self) {
        if self.x > 0 {
            self.y += self.row_height;
        }
        self.x = 0;
        self.row_height = 0;
    }
}

/// Full dashboard for `job`: evaluation header, then one row per selected
/// template holding its host or job panels, with event annotations.
///
/// A template with an unresolvable placeholder is skipped and listed in the
/// summary. Errors in the skeleton abort generation.
pub fn expand_dashboard(
    job: &JobRecord,
    db: &str,
    selected: &[&PanelTemplate],
    templates: &TemplateSet,
    evaluation: &EvaluationTable,
    events: &BTreeSet<String>,
) -> Result<Dashboard, DashError> {
    let vars = Vars::for_job(job, db);
    let mut doc = substitute(&templates.skeleton, &vars, "dashboard")?;
    let mut summary = DashboardSummary::default();
    let mut layout = Layout {
        next_id: 1,
        y: 0,
        x: 0,
        row_height: 0,
    };

    let mut panels = Vec::new();
    let mut header = header_panel(evaluation);
    let header_height = 3 + evaluation.rows.len() as u64 + u64::from(evaluation.pattern.is_some());
    layout.place(&mut header, GRID_WIDTH, header_height);
    panels.push(header);

    for template in selected {
        let vars = vars.with("METRIC", template.metric_name());
        let built = (|| -> Result<(Value, Vec<Value>), DashError> {
            let row_template = templates.rows.get(&template.row).ok_or_else(|| {
                DashError::MalformedTemplate(
                    template.name.clone(),
                    format!("unknown row template {:?}", template.row),
                )
            })?;
            let row = substitute(row_template, &vars, &template.row)?;
            let body = match template.scope {
                Scope::Host => job
                    .hosts
                    .iter()
                    .map(|h| substitute(&template.panel, &vars.with("HOST", h), &template.name))
                    .collect::<Result<Vec<_>, _>>()?,
                Scope::Job => vec![substitute(&template.panel, &vars, &template.name)?],
            };
            Ok((row, body))
        })();
        let (mut row, body) = match built {
            Ok(parts) => parts,
            Err(e) => {
                tracing::warn!(template = %template.name, error = %e, "skipping template");
                summary.skipped.push((template.name.clone(), e.to_string()));
                continue;
            }
        };
        layout.newline();
        layout.place(&mut row, GRID_WIDTH, 1);
        layout.newline();
        panels.push(row);
        summary.rows += 1;
        let width = match template.scope {
            Scope::Host => PANEL_WIDTH,
            Scope::Job => GRID_WIDTH,
        };
        for mut panel in body {
            let id = layout.place(&mut panel, width, PANEL_HEIGHT);
            if summary.thumbnails.len() < THUMBNAILS {
                summary.thumbnails.push(id);
            }
            match template.scope {
                Scope::Host => summary.host_panels += 1,
                Scope::Job => summary.job_panels += 1,
            }
            panels.push(panel);
        }
    }

    let annotations: Vec<Value> = std::iter::once(JOB_EVENT_MEASUREMENT)
        .chain(events.iter().map(String::as_str))
        .map(|m| annotation(m, db, &job.job_id))
        .collect();
    summary.annotations = annotations.len();

    let uid = dashboard_uid(&job.job_id);
    doc["uid"] = json!(uid);
    doc["panels"] = Value::Array(panels);
    doc["annotations"] = json!({ "list": annotations });
    doc["time"] = json!({ "from": vars.get("T_START"), "to": vars.get("T_END") });
    Ok(Dashboard {
        uid,
        document: doc,
        summary,
    })
}

fn annotation(measurement: &str, db: &str, job_id: &str) -> Value {
    json!({
        "name": measurement,
        "enable": true,
        "iconColor": if measurement == JOB_EVENT_MEASUREMENT { "red" } else { "dark-purple" },
        "datasource": { "type": "influxdb", "uid": "${datasource}" },
        "query": format!(
            "SELECT \"{EVENT_FIELD}\" FROM \"{db}\".\"autogen\".\"{measurement}\" WHERE \"{JOBID_TAG}\" = '{job_id}' AND $timeFilter"
        ),
        "textColumn": EVENT_FIELD,
        "tagsColumn": HOSTNAME_TAG,
    })
}

fn header_panel(evaluation: &EvaluationTable) -> Value {
    let grid = evaluation.text_grid();
    let mut md = String::new();
    for (i, row) in grid.iter().enumerate() {
        md.push_str("| ");
        md.push_str(
            &row.iter()
                .map(|c| c.replace('|', "\\|"))
                .collect::<Vec<_>>()
                .join(" | "),
        );
        md.push_str(" |\n");
        if i == 0 {
            md.push_str(&"|---".repeat(row.len()));
            md.push_str("|\n");
        }
    }
    json!({
        "type": "text",
        "title": format!("Job evaluation: {}", evaluation.worst_status()),
        "options": { "mode": "markdown", "content": md },
        "lmsEvaluation": serde_json::to_value(evaluation).expect("evaluation json"),
    })
}

/// One running job in the admin overview.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobSummary {
    pub job_id: String,
    pub user: String,
    pub nodes: usize,
    pub status: CellStatus,
    pub dashboard_uid: String,
    pub thumbnails: Vec<u64>,
}

impl JobSummary {
    pub fn new(job: &JobRecord, evaluation: &EvaluationTable, dashboard: &Dashboard) -> Self {
        JobSummary {
            job_id: job.job_id.clone(),
            user: job.user.clone(),
            nodes: job.hosts.len(),
            status: evaluation.worst_status(),
            dashboard_uid: dashboard.uid.clone(),
            thumbnails: dashboard.summary.thumbnails.clone(),
        }
    }
}

pub const OVERVIEW_UID: &str = "lms-overview";

/// Overview document listing `jobs` worst status first (fail, warn, nodata,
/// pass), then by job id.
pub fn build_admin_overview(jobs: &[JobSummary]) -> Value {
    let mut jobs: Vec<&JobSummary> = jobs.iter().collect();
    jobs.sort_by(|a, b| {
        b.status
            .cmp(&a.status)
            .then_with(|| a.job_id.cmp(&b.job_id))
    });

    let mut md = String::from("| job | user | nodes | status |\n|---|---|---|---|\n");
    let mut panels = Vec::new();
    let mut entries = Vec::new();
    let mut layout = Layout {
        next_id: 1,
        y: 0,
        x: 0,
        row_height: 0,
    };
    for job in &jobs {
        let url = format!("/d/{}", job.dashboard_uid);
        md.push_str(&format!(
            "| [{}]({url}) | {} | {} | {} |\n",
            job.job_id, job.user, job.nodes, job.status
        ));
        let thumbnails: Vec<Value> = job
            .thumbnails
            .iter()
            .map(|id| json!({ "panel_id": id, "url": format!("/d-solo/{}?panelId={id}", job.dashboard_uid) }))
            .collect();
        entries.push(json!({
            "job_id": job.job_id,
            "user": job.user,
            "nodes": job.nodes,
            "status": job.status,
            "dashboard_uid": job.dashboard_uid,
            "url": url,
            "thumbnails": thumbnails,
        }));
    }
    let mut table = json!({
        "type": "text",
        "title": format!("Running jobs ({})", jobs.len()),
        "options": { "mode": "markdown", "content": md },
    });
    layout.place(&mut table, GRID_WIDTH, 3 + jobs.len() as u64);
    panels.push(table);
    for job in &jobs {
        layout.newline();
        for id in &job.thumbnails {
            let mut panel = json!({
                "type": "text",
                "title": format!("{} panel {id}", job.job_id),
                "options": {
                    "mode": "html",
                    "content": format!(
                        "<iframe src=\"/d-solo/{}?panelId={id}\" width=\"100%\" height=\"100%\" frameborder=\"0\"></iframe>",
                        job.dashboard_uid
                    ),
                },
            });
            layout.place(&mut panel, PANEL_WIDTH, PANEL_HEIGHT - 2);
            panels.push(panel);
        }
    }
    json!({
        "uid": OVERVIEW_UID,
        "title": "Running jobs",
        "tags": ["lms", "overview"],
        "schemaVersion": 39,
        "refresh": "1m",
        "time": { "from": "now-6h", "to": "now" },
        "panels": panels,
        "lmsOverview": { "jobs": entries },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::PatternRow;

    fn job() -> JobRecord {
        JobRecord::new("j7", "alice", ["h1", "h2", "h3", "h4"], 1_000_000_000)
    }

    fn inventory(metrics: &[&str]) -> BTreeMap<String, BTreeSet<String>> {
        job()
            .hosts
            .iter()
            .map(|h| (h.clone(), metrics.iter().map(|m| m.to_string()).collect()))
            .collect()
    }

    fn evaluation() -> EvaluationTable {
        EvaluationTable {
            job_id: "j7".into(),
            user: "alice".into(),
            hosts: job().hosts.into_iter().collect(),
            t_start: 0,
            t_end: 1,
            running: true,
            rows: Vec::new(),
            pattern: Some(PatternRow {
                label: Some("no finding".into()),
                error: None,
            }),
        }
    }

    #[test]
    fn substitution() {
        let vars = Vars::for_job(&job(), "lms").with("HOST", "h2");
        assert_eq!(
            substitute_str("{{HOST}}/{{JOB_ID}}", &vars, "t").unwrap(),
            "h2/j7"
        );
        assert_eq!(vars.get("T_START"), Some("1000"));
        assert_eq!(vars.get("T_END"), Some("now"));
        let err = substitute_str("{{NOPE}}", &vars, "t").unwrap_err();
        assert!(matches!(err, DashError::UnresolvedPlaceholder { name, .. } if name == "NOPE"));
        assert!(substitute_str("{{HOST", &vars, "t").is_err());
    }

    #[test]
    fn selection_by_metrics() {
        let set = TemplateSet::builtin();
        let names = |m: &[&str]| -> Vec<String> {
            select_templates(&job().hosts, &inventory(m), &set)
                .iter()
                .map(|t| t.name.clone())
                .collect()
        };
        assert!(names(&[]).is_empty());
        assert_eq!(names(&["cpu_load", "mem_bw"]), ["cpu_load", "mem_bw"]);
        assert!(names(&["cpu_load", "pressure"]).contains(&"app_pressure".to_owned()));
        let mut only_h3 = inventory(&[]);
        only_h3.get_mut("h3").unwrap().insert("pressure".into());
        assert_eq!(select_templates(&job().hosts, &only_h3, &set).len(), 1);
    }

    #[test]
    fn panel_counts_and_no_residue() {
        let set = TemplateSet::builtin();
        let inv = inventory(&["cpu_load", "mem_bw", "net_io"]);
        let selected = select_templates(&job().hosts, &inv, &set);
        let d = expand_dashboard(
            &job(),
            "lms",
            &selected,
            &set,
            &evaluation(),
            &BTreeSet::new(),
        )
        .unwrap();
        assert_eq!(d.summary.host_panels, 8);
        assert_eq!(d.summary.job_panels, 1);
        assert_eq!(d.summary.rows, 3);
        assert_eq!(residual_placeholders(&d.document), 0);
        assert_eq!(d.document["time"]["to"], "now");
        assert_eq!(d.document["panels"].as_array().unwrap().len(), 1 + 3 + 9);
        let again = expand_dashboard(
            &job(),
            "lms",
            &selected,
            &set,
            &evaluation(),
            &BTreeSet::new(),
        )
        .unwrap();
        assert_eq!(d.to_json(), again.to_json());
    }

    #[test]
    fn finished_job_has_closed_range() {
        let mut j = job();
        j.end_time = Some(5_000_000_000);
        let set = TemplateSet::builtin();
        let d = expand_dashboard(&j, "lms", &[], &set, &evaluation(), &BTreeSet::new()).unwrap();
        assert_eq!(d.document["time"]["to"], "5000");
        assert_eq!(d.document["panels"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn bad_placeholder_skips_only_that_template() {
        let mut set = TemplateSet::builtin();
        set.panels[0].panel["title"] = json!("{{GPU}}");
        let bad = set.panels[0].name.clone();
        let all: Vec<&PanelTemplate> = set.panels.iter().collect();
        let d =
            expand_dashboard(&job(), "lms", &all, &set, &evaluation(), &BTreeSet::new()).unwrap();
        assert_eq!(d.summary.skipped.len(), 1);
        assert_eq!(d.summary.skipped[0].0, bad);
        assert_eq!(d.summary.rows, set.panels.len() - 1);
        assert_eq!(residual_placeholders(&d.document), 0);
    }

    #[test]
    fn event_annotations() {
        let set = TemplateSet::builtin();
        let events = BTreeSet::from(["job_phase".to_owned()]);
        let d = expand_dashboard(&job(), "u_alice", &[], &set, &evaluation(), &events).unwrap();
        let list = d.document["annotations"]["list"].as_array().unwrap();
        assert_eq!(list.len(), 2);
        assert!(list[1]["query"]
            .as_str()
            .unwrap()
            .contains("\"u_alice\".\"autogen\".\"job_phase\""));
    }

    #[test]
    fn overview_orders_failing_first() {
        let entry = |id: &str, status| JobSummary {
            job_id: id.into(),
            user: "u".into(),
            nodes: 1,
            status,
            dashboard_uid: dashboard_uid(id),
            thumbnails: vec![2],
        };
        let doc = build_admin_overview(&[
            entry("a", CellStatus::Pass),
            entry("b", CellStatus::Fail),
            entry("c", CellStatus::Warn),
        ]);
        let ids: Vec<_> = doc["lmsOverview"]["jobs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|j| j["job_id"].as_str().unwrap().to_owned())
            .collect();
        assert_eq!(ids, ["b", "c", "a"]);
        let empty = build_admin_overview(&[]);
        assert!(empty["lmsOverview"]["jobs"].as_array().unwrap().is_empty());
    }
}
