//! Dashboard, row and panel templates.
//!
//! A template directory holds `dashboard.json` (the skeleton), `rows/<name>.json`
//! and `panels/<name>.json`. Panel files wrap the panel document:
//!
//! ```json
//! { "name": "mem_bw", "scope": "host", "requires": ["mem_bw"], "row": "metric",
//!   "panel": { "title": "{{HOST}} memory bandwidth", ... } }
//! ```
//!
//! `metric` defaults to the first required metric and fills `{{METRIC}}`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::DashError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// One panel per job host.
    Host,
    /// One panel for the whole job.
    Job,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelTemplate {
    pub name: String,
    pub scope: Scope,
    #[serde(default)]
    pub requires: BTreeSet<String>,
    #[serde(default)]
    pub metric: Option<String>,
    #[serde(default = "default_row")]
    pub row: String,
    pub panel: Value,
}

fn default_row() -> String {
    "metric".to_owned()
}

impl PanelTemplate {
    /// Measurement substituted for `{{METRIC}}`.
    pub fn metric_name(&self) -> &str {
        self.metric
            .as_deref()
            .or_else(|| self.requires.iter().next().map(String::as_str))
            .unwrap_or(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub skeleton: Value,
    pub rows: BTreeMap<String, Value>,
    /// Sorted by name; generation follows this order.
    pub panels: Vec<PanelTemplate>,
}

const BUILTIN_SKELETON: &str = include_str!("../../templates/dashboard.json");
const BUILTIN_ROWS: [(&str, &str); 2] = [
    (
        "application",
        include_str!("../../templates/rows/application.json"),
    ),
    ("metric", include_str!("../../templates/rows/metric.json")),
];
const BUILTIN_PANELS: [&str; 11] = [
    include_str!("../../templates/panels/app_energy.json"),
    include_str!("../../templates/panels/app_iter_time.json"),
    include_str!("../../templates/panels/app_pressure.json"),
    include_str!("../../templates/panels/app_temperature.json"),
    include_str!("../../templates/panels/cpu_load.json"),
    include_str!("../../templates/panels/file_io.json"),
    include_str!("../../templates/panels/flops_dp.json"),
    include_str!("../../templates/panels/ipc.json"),
    include_str!("../../templates/panels/mem_allocated.json"),
    include_str!("../../templates/panels/mem_bw.json"),
    include_str!("../../templates/panels/net_io.json"),
];

fn parse(what: &str, text: &str) -> Result<Value, DashError> {
    serde_json::from_str(text)
        .map_err(|e| DashError::MalformedTemplate(what.to_owned(), e.to_string()))
}

fn parse_panel(what: &str, text: &str) -> Result<PanelTemplate, DashError> {
    serde_json::from_str(text)
        .map_err(|e| DashError::MalformedTemplate(what.to_owned(), e.to_string()))
}

impl TemplateSet {
    pub fn new(
        skeleton: Value,
        rows: BTreeMap<String, Value>,
        mut panels: Vec<PanelTemplate>,
    ) -> Result<Self, DashError> {
        if !skeleton.is_object() {
            return Err(DashError::MalformedTemplate(
                "dashboard".into(),
                "skeleton must be an object".into(),
            ));
        }
        panels.sort_by(|a, b| a.name.cmp(&b.name));
        for pair in panels.windows(2) {
            if pair[0].name == pair[1].name {
                return Err(DashError::MalformedTemplate(
                    pair[0].name.clone(),
                    "duplicate panel name".into(),
                ));
            }
        }
        for p in &panels {
            if !rows.contains_key(&p.row) {
                return Err(DashError::MalformedTemplate(
                    p.name.clone(),
                    format!("unknown row template {:?}", p.row),
                ));
            }
            if !p.panel.is_object() {
                return Err(DashError::MalformedTemplate(
                    p.name.clone(),
                    "panel must be an object".into(),
                ));
            }
        }
        Ok(TemplateSet {
            skeleton,
            rows,
            panels,
        })
    }

    /// The set shipped in `templates/`.
    pub fn builtin() -> Self {
        let skeleton = parse("dashboard", BUILTIN_SKELETON).expect("builtin skeleton");
        let rows = BUILTIN_ROWS
            .iter()
            .map(|(name, text)| (name.to_string(), parse(name, text).expect("builtin row")))
            .collect();
        let panels = BUILTIN_PANELS
            .iter()
            .map(|text| parse_panel("builtin panel", text).expect("builtin panel"))
            .collect();
        Self::new(skeleton, rows, panels).expect("builtin templates")
    }

    pub fn load_dir(dir: &Path) -> Result<Self, DashError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|e| DashError::Io(format!("{}: {e}", p.display())))
        };
        let skeleton = parse("dashboard", &read(&dir.join("dashboard.json"))?)?;
        let mut rows = BTreeMap::new();
        for path in json_files(&dir.join("rows"))? {
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_owned();
            rows.insert(name.clone(), parse(&name, &read(&path)?)?);
        }
        let mut panels = Vec::new();
        for path in json_files(&dir.join("panels"))? {
            panels.push(parse_panel(&path.display().to_string(), &read(&path)?)?);
        }
        Self::new(skeleton, rows, panels)
    }

    pub fn panel(&self, name: &str) -> Option<&PanelTemplate> {
        self.panels.iter().find(|p| p.name == name)
    }
}

fn json_files(dir: &Path) -> Result<Vec<std::path::PathBuf>, DashError> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| DashError::Io(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<_> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    Ok(out)
}
