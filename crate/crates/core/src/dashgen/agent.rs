//! Background generator writing dashboards into a provisioning directory.
//!
//! Dashboards are regenerated on job start, on every refresh tick while the
//! job runs and once more on job end. The overview lists the running jobs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::{
    build_admin_overview, expand_dashboard, probe_metrics, select_templates, to_json, DashError,
    Dashboard, JobSummary, TemplateSet,
};
use crate::analysis::{AnalysisConfig, EvaluationTable};
use crate::jobtags::JobRecord;
use crate::router::{JobHook, RouteConfig};
use crate::tsstore::Store;

pub const OVERVIEW_FILE: &str = "overview.json";

pub type Clock = Arc<dyn Fn() -> i64 + Send + Sync>;

#[derive(Clone)]
pub struct AgentConfig {
    pub output_dir: PathBuf,
    pub refresh_interval: Duration,
    pub templates: TemplateSet,
    pub analysis: AnalysisConfig,
    pub global_db: String,
    /// Per-user database pattern when duplication is on.
    pub user_db_pattern: Option<String>,
    /// Evaluation time for running jobs, in ns.
    pub clock: Clock,
}

impl AgentConfig {
    pub fn new(output_dir: impl Into<PathBuf>, route: &RouteConfig) -> Self {
        AgentConfig {
            output_dir: output_dir.into(),
            refresh_interval: Duration::from_secs(60),
            templates: TemplateSet::builtin(),
            analysis: AnalysisConfig::builtin(),
            global_db: route.global_db.clone(),
            user_db_pattern: route
                .per_user_duplication
                .then(|| route.user_db_pattern.clone()),
            clock: Arc::new(crate::now_ns),
        }
    }

    /// Database the job's dashboard reads.
    pub fn job_db(&self, job: &JobRecord) -> String {
        match &self.user_db_pattern {
            Some(pattern) => pattern.replace("{user}", &job.user),
            None => self.global_db.clone(),
        }
    }
}

/// File name for a job's dashboard, with unsafe characters replaced.
pub fn dashboard_file(job_id: &str) -> String {
    let safe: String = job_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("job_{safe}.json")
}

/// Output of one generation.
#[derive(Debug, Clone)]
pub struct Generated {
    pub evaluation: EvaluationTable,
    pub dashboard: Dashboard,
    pub path: PathBuf,
}

/// Evaluates `job`, expands its dashboard and writes it below `config.output_dir`.
pub fn generate(
    config: &AgentConfig,
    store: &Store,
    job: &JobRecord,
) -> Result<Generated, DashError> {
    let db = config.job_db(job);
    let now = (config.clock)();
    let evaluation = config
        .analysis
        .evaluate(job, store, &db, now)
        .map_err(|e| DashError::Io(format!("evaluation of {}: {e}", job.job_id)))?;
    let inventory = probe_metrics(store, &db, job)?;
    let selected = select_templates(&job.hosts, &inventory.per_host, &config.templates);
    let dashboard = expand_dashboard(
        job,
        &db,
        &selected,
        &config.templates,
        &evaluation,
        &inventory.events,
    )?;
    let path = config.output_dir.join(dashboard_file(&job.job_id));
    write_atomic(&path, &dashboard.to_json())?;
    Ok(Generated {
        evaluation,
        dashboard,
        path,
    })
}

fn write_atomic(path: &Path, text: &str) -> Result<(), DashError> {
    let io = |e: std::io::Error| DashError::Io(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

enum Event {
    Start(JobRecord),
    End(JobRecord),
    Sync(Sender<()>),
    Stop,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AgentStats {
    pub generated: u64,
    pub failures: u64,
}

pub struct DashboardAgent {
    tx: Mutex<Sender<Event>>,
    worker: Mutex<Option<JoinHandle<()>>>,
    stats: Arc<Mutex<AgentStats>>,
}

impl DashboardAgent {
    pub fn spawn(config: AgentConfig, store: Arc<Store>) -> Arc<Self> {
        let (tx, rx) = mpsc::channel();
        let stats = Arc::new(Mutex::new(AgentStats::default()));
        let worker = {
            let stats = Arc::clone(&stats);
            std::thread::Builder::new()
                .name("dashgen".into())
                .spawn(move || {
                    let mut worker = Worker {
                        config,
                        store,
                        active: BTreeMap::new(),
                        stats,
                    };
                    loop {
                        match rx.recv_timeout(worker.config.refresh_interval) {
                            Ok(Event::Start(job)) => {
                                let summary = worker.refresh(&job);
                                worker.active.insert(job.job_id.clone(), (job, summary));
                                worker.write_overview();
                            }
                            Ok(Event::End(job)) => {
                                worker.refresh(&job);
                                worker.active.remove(&job.job_id);
                                worker.write_overview();
                            }
                            Ok(Event::Sync(done)) => {
                                let _ = done.send(());
                            }
                            Ok(Event::Stop) | Err(RecvTimeoutError::Disconnected) => break,
                            Err(RecvTimeoutError::Timeout) => worker.tick(),
                        }
                    }
                })
                .expect("dashgen thread")
        };
        Arc::new(DashboardAgent {
            tx: Mutex::new(tx),
            worker: Mutex::new(Some(worker)),
            stats,
        })
    }

    fn send(&self, event: Event) {
        let _ = self.tx.lock().expect("agent channel").send(event);
    }

    /// Blocks until every event sent so far has been processed.
    pub fn sync(&self) {
        let (tx, rx) = mpsc::channel();
        self.send(Event::Sync(tx));
        let _ = rx.recv();
    }

    pub fn stats(&self) -> AgentStats {
        self.stats.lock().expect("agent stats").clone()
    }

    pub fn shutdown(&self) {
        self.send(Event::Stop);
        if let Some(worker) = self.worker.lock().expect("agent worker").take() {
            let _ = worker.join();
        }
    }
}

impl Drop for DashboardAgent {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl JobHook for DashboardAgent {
    fn on_job_start(&self, job: &JobRecord) {
        self.send(Event::Start(job.clone()));
    }

    fn on_job_end(&self, job: &JobRecord) {
        self.send(Event::End(job.clone()));
    }
}

struct Worker {
    config: AgentConfig,
    store: Arc<Store>,
    active: BTreeMap<String, (JobRecord, Option<JobSummary>)>,
    stats: Arc<Mutex<AgentStats>>,
}

impl Worker {
    fn refresh(&mut self, job: &JobRecord) -> Option<JobSummary> {
        let result = generate(&self.config, &self.store, job);
        let mut stats = self.stats.lock().expect("agent stats");
        match result {
            Ok(g) => {
                stats.generated += 1;
                Some(JobSummary::new(job, &g.evaluation, &g.dashboard))
            }
            Err(e) => {
                stats.failures += 1;
                tracing::warn!(job = %job.job_id, error = %e, "dashboard generation failed");
                None
            }
        }
    }

    fn tick(&mut self) {
        let jobs: Vec<JobRecord> = self.active.values().map(|(j, _)| j.clone()).collect();
        for job in jobs {
            let summary = self.refresh(&job);
            self.active.insert(job.job_id.clone(), (job, summary));
        }
        self.write_overview();
    }

    fn write_overview(&self) {
        let summaries: Vec<JobSummary> = self
            .active
            .values()
            .filter_map(|(_, s)| s.clone())
            .collect();
        let doc = build_admin_overview(&summaries);
        if let Err(e) = write_atomic(&self.config.output_dir.join(OVERVIEW_FILE), &to_json(&doc)) {
            tracing::warn!(error = %e, "overview write failed");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lineproto::Metric;

    #[test]
    fn lifecycle_writes_and_drops_overview_entry() {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(Store::in_memory());
        let job = JobRecord::new("j/1", "alice", ["h1"], 0);
        store
            .write_points(
                "lms",
                &[Metric::new("cpu_load")
                    .tag("hostname", "h1")
                    .tag("jobid", "j/1")
                    .field("value", 4.0)
                    .at(10)],
            )
            .unwrap();
        let mut config = AgentConfig::new(dir.path(), &RouteConfig::default());
        config.clock = Arc::new(|| 100);
        let agent = DashboardAgent::spawn(config, Arc::clone(&store));
        agent.on_job_start(&job);
        agent.sync();
        let file = dir.path().join("job_j_1.json");
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&file).unwrap()).unwrap();
        assert_eq!(doc["time"]["to"], "now");
        let overview = std::fs::read_to_string(dir.path().join(OVERVIEW_FILE)).unwrap();
        assert!(overview.contains("\"j/1\""));

        let mut ended = job.clone();
        ended.end_time = Some(50);
        agent.on_job_end(&ended);
        agent.sync();
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&file).unwrap()).unwrap();
        assert_eq!(doc["time"]["to"], "0");
        let overview: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(OVERVIEW_FILE)).unwrap())
                .unwrap();
        assert!(overview["lmsOverview"]["jobs"]
            .as_array()
            .unwrap()
            .is_empty());
        assert_eq!(agent.stats().generated, 2);
    }

    #[test]
    fn per_user_db_when_duplicating() {
        let route = RouteConfig {
            per_user_duplication: true,
            ..RouteConfig::default()
        };
        let config = AgentConfig::new("/tmp", &route);
        assert_eq!(
            config.job_db(&JobRecord::new("j", "bob", ["h"], 0)),
            "u_bob"
        );
        assert_eq!(
            AgentConfig::new("/tmp", &RouteConfig::default()).job_db(&JobRecord::new(
                "j",
                "bob",
                ["h"],
                0
            )),
            "lms"
        );
    }
}
