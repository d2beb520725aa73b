//! Embedded time-series store.
//!
//! Every database keeps an in-memory index of series (measurement + sorted tag
//! set) and, when the store has a directory, an append-only segment file of
//! canonical line-protocol records. Opening an existing directory replays the
//! segments listed in its manifest.

mod aggregate;
mod forward;
mod segment;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::Serialize;

use crate::lineproto::{FieldValue, Metric};

pub use aggregate::{aggregate_window, AggregateFn};
pub use forward::{BoxFuture, ForwardError, ForwardTarget, HttpForwarder};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown database {0:?}")]
    UnknownDatabase(String),
    #[error("invalid database name {0:?}")]
    InvalidDatabaseName(String),
    #[error("invalid point: {0}")]
    InvalidPoint(String),
    #[error("invalid time range [{0}, {1})")]
    InvalidRange(i64, i64),
    #[error("storage full: {0}")]
    StorageFull(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt segment {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct SeriesKey {
    pub database: String,
    pub measurement: String,
    pub tags: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Point {
    pub timestamp: i64,
    pub field: String,
    pub value: FieldValue,
}

/// Time-ordered points of one series. Within equal timestamps points are
/// ordered by field name.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Series {
    pub key: SeriesKey,
    pub points: Vec<Point>,
}

impl Series {
    pub fn new(key: SeriesKey) -> Self {
        Series {
            key,
            points: Vec::new(),
        }
    }

    /// Points of a single field, as `(timestamp, value)`.
    pub fn field_values<'a>(
        &'a self,
        field: &'a str,
    ) -> impl Iterator<Item = (i64, &'a FieldValue)> + 'a {
        self.points
            .iter()
            .filter(move |p| p.field == field)
            .map(|p| (p.timestamp, &p.value))
    }

    pub fn hostname(&self) -> Option<&str> {
        self.key.tags.get("hostname").map(String::as_str)
    }
}

#[derive(Debug, Clone, Default)]
pub struct StoreConfig {
    /// Directory for segments and manifest; `None` keeps everything in memory.
    pub dir: Option<PathBuf>,
    /// fsync after every acknowledged batch.
    pub sync: bool,
    /// Maximum appended rows per database, `None` for unbounded.
    pub max_rows_per_db: Option<u64>,
    /// Points older than `newest - retention` are pruned by
    /// [`Store::enforce_retention`].
    pub retention_ns: Option<i64>,
}

type SeriesId = (String, BTreeMap<String, String>);
type PointMap = BTreeMap<(i64, String), FieldValue>;

#[derive(Default)]
struct DbState {
    series: BTreeMap<SeriesId, PointMap>,
    rows: u64,
}

struct Database {
    state: RwLock<DbState>,
    segment: Mutex<Option<segment::SegmentWriter>>,
}

pub struct Store {
    config: StoreConfig,
    dbs: RwLock<BTreeMap<String, Arc<Database>>>,
    manifest: Mutex<()>,
}

impl Store {
    pub fn in_memory() -> Self {
        Store {
            config: StoreConfig::default(),
            dbs: RwLock::new(BTreeMap::new()),
            manifest: Mutex::new(()),
        }
    }

    /// Opens (or creates) a store; persisted databases are replayed into memory.
    pub fn open(config: StoreConfig) -> Result<Self, StoreError> {
        let mut dbs = BTreeMap::new();
        if let Some(dir) = &config.dir {
            std::fs::create_dir_all(dir)?;
            for name in segment::read_manifest(dir)? {
                let mut state = DbState::default();
                let path = segment::segment_path(dir, &name);
                for metric in segment::replay(&path)? {
                    insert_metric(&mut state, metric);
                }
                let writer = segment::SegmentWriter::open(&path, config.sync)?;
                dbs.insert(
                    name,
                    Arc::new(Database {
                        state: RwLock::new(state),
                        segment: Mutex::new(Some(writer)),
                    }),
                );
            }
        }
        Ok(Store {
            config,
            dbs: RwLock::new(dbs),
            manifest: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.config.dir.as_deref()
    }

    fn database(&self, db: &str) -> Result<Arc<Database>, StoreError> {
        self.dbs
            .read()
            .expect("store poisoned")
            .get(db)
            .cloned()
            .ok_or_else(|| StoreError::UnknownDatabase(db.to_owned()))
    }

    fn database_or_create(&self, db: &str) -> Result<Arc<Database>, StoreError> {
        if let Ok(d) = self.database(db) {
            return Ok(d);
        }
        validate_db_name(db)?;
        let _guard = self.manifest.lock().expect("manifest poisoned");
        let mut dbs = self.dbs.write().expect("store poisoned");
        if let Some(d) = dbs.get(db) {
            return Ok(Arc::clone(d));
        }
        let writer = match &self.config.dir {
            Some(dir) => {
                let w = segment::SegmentWriter::open(
                    &segment::segment_path(dir, db),
                    self.config.sync,
                )?;
                segment::append_manifest(dir, db)?;
                Some(w)
            }
            None => None,
        };
        let d = Arc::new(Database {
            state: RwLock::new(DbState::default()),
            segment: Mutex::new(writer),
        });
        dbs.insert(db.to_owned(), Arc::clone(&d));
        Ok(d)
    }

    /// Writes stamped metrics, creating the database on first use. Returns the
    /// number of metrics (rows) written.
    pub fn write_points(&self, db: &str, metrics: &[Metric]) -> Result<usize, StoreError> {
        for m in metrics {
            if m.timestamp.is_none() {
                return Err(StoreError::InvalidPoint(format!(
                    "unstamped metric {:?}",
                    m.measurement
                )));
            }
            m.validate()
                .map_err(|e| StoreError::InvalidPoint(e.to_string()))?;
        }
        let database = self.database_or_create(db)?;
        // Segment lock first: one writer per database, and the index update
        // happens only after the records are on disk.
        let mut segment = database.segment.lock().expect("segment poisoned");
        if let Some(cap) = self.config.max_rows_per_db {
            let rows = database.state.read().expect("db poisoned").rows;
            if rows + metrics.len() as u64 > cap {
                return Err(StoreError::StorageFull(format!(
                    "database {db} holds {rows} of {cap} rows"
                )));
            }
        }
        if let Some(w) = segment.as_mut() {
            w.append(metrics)?;
        }
        let mut state = database.state.write().expect("db poisoned");
        for m in metrics {
            insert_metric(&mut state, m.clone());
        }
        Ok(metrics.len())
    }

    /// Series of `measurement` whose tags include every pair in `tag_filter`,
    /// restricted to `t0 <= t < t1`. Series without points in range are omitted.
    pub fn query_range(
        &self,
        db: &str,
        measurement: &str,
        tag_filter: &BTreeMap<String, String>,
        t0: i64,
        t1: i64,
    ) -> Result<Vec<Series>, StoreError> {
        if t0 > t1 {
            return Err(StoreError::InvalidRange(t0, t1));
        }
        let database = self.database(db)?;
        let state = database.state.read().expect("db poisoned");
        let start = (measurement.to_owned(), BTreeMap::new());
        let mut out = Vec::new();
        for ((m, tags), points) in state.series.range(start..) {
            if m != measurement {
                break;
            }
            if !tags_match(tags, tag_filter) {
                continue;
            }
            let in_range: Vec<Point> = points
                .range((t0, String::new())..(t1, String::new()))
                .map(|((ts, field), v)| Point {
                    timestamp: *ts,
                    field: field.clone(),
                    value: v.clone(),
                })
                .collect();
            if in_range.is_empty() {
                continue;
            }
            out.push(Series {
                key: SeriesKey {
                    database: db.to_owned(),
                    measurement: m.clone(),
                    tags: tags.clone(),
                },
                points: in_range,
            });
        }
        Ok(out)
    }

    pub fn databases(&self) -> Vec<String> {
        self.dbs
            .read()
            .expect("store poisoned")
            .keys()
            .cloned()
            .collect()
    }

    pub fn has_database(&self, db: &str) -> bool {
        self.dbs.read().expect("store poisoned").contains_key(db)
    }

    /// Measurements with at least one series matching `tag_filter`.
    pub fn measurements(
        &self,
        db: &str,
        tag_filter: &BTreeMap<String, String>,
    ) -> Result<BTreeSet<String>, StoreError> {
        let database = self.database(db)?;
        let state = database.state.read().expect("db poisoned");
        Ok(state
            .series
            .iter()
            .filter(|((_, tags), pts)| !pts.is_empty() && tags_match(tags, tag_filter))
            .map(|((m, _), _)| m.clone())
            .collect())
    }

    /// Stored rows matching `tag_filter`, regrouped into metrics (one per
    /// series and timestamp), in series-then-time order.
    pub fn rows(
        &self,
        db: &str,
        tag_filter: &BTreeMap<String, String>,
    ) -> Result<Vec<Metric>, StoreError> {
        let database = self.database(db)?;
        let state = database.state.read().expect("db poisoned");
        let mut out = Vec::new();
        for ((m, tags), points) in &state.series {
            if !tags_match(tags, tag_filter) {
                continue;
            }
            let mut current: Option<Metric> = None;
            for ((ts, field), value) in points {
                match &mut current {
                    Some(row) if row.timestamp == Some(*ts) => {
                        row.fields.insert(field.clone(), value.clone());
                    }
                    _ => {
                        out.extend(current.take());
                        let mut row = Metric::new(m.clone()).at(*ts);
                        row.tags = tags.clone();
                        row.fields.insert(field.clone(), value.clone());
                        current = Some(row);
                    }
                }
            }
            out.extend(current);
        }
        Ok(out)
    }

    /// Number of distinct (series, timestamp) rows matching `tag_filter`.
    pub fn count_rows(
        &self,
        db: &str,
        tag_filter: &BTreeMap<String, String>,
    ) -> Result<usize, StoreError> {
        let database = self.database(db)?;
        let state = database.state.read().expect("db poisoned");
        Ok(state
            .series
            .iter()
            .filter(|((_, tags), _)| tags_match(tags, tag_filter))
            .map(|(_, points)| {
                let mut n = 0;
                let mut last = None;
                for (ts, _) in points.keys() {
                    if last != Some(*ts) {
                        n += 1;
                        last = Some(*ts);
                    }
                }
                n
            })
            .sum())
    }

    /// Rows appended since the database was created, overwrites included.
    pub fn appended_rows(&self, db: &str) -> Result<u64, StoreError> {
        Ok(self.database(db)?.state.read().expect("db poisoned").rows)
    }

    /// Drops points older than `newest_ts - retention` in every database.
    /// The segment files are left untouched.
    pub fn enforce_retention(&self, newest_ts: i64) -> usize {
        let Some(retention) = self.config.retention_ns else {
            return 0;
        };
        let cutoff = newest_ts.saturating_sub(retention);
        let mut removed = 0;
        for database in self.dbs.read().expect("store poisoned").values() {
            let mut state = database.state.write().expect("db poisoned");
            for points in state.series.values_mut() {
                let keep = points.split_off(&(cutoff, String::new()));
                removed += points.len();
                *points = keep;
            }
            state.series.retain(|_, p| !p.is_empty());
        }
        removed
    }
}

fn insert_metric(state: &mut DbState, metric: Metric) {
    let ts = metric.timestamp.expect("stamped metric");
    let points = state
        .series
        .entry((metric.measurement, metric.tags))
        .or_default();
    for (field, value) in metric.fields {
        points.insert((ts, field), value);
    }
    state.rows += 1;
}

fn tags_match(tags: &BTreeMap<String, String>, filter: &BTreeMap<String, String>) -> bool {
    filter.iter().all(|(k, v)| tags.get(k) == Some(v))
}

pub fn validate_db_name(db: &str) -> Result<(), StoreError> {
    let ok = !db.is_empty()
        && db.len() <= 128
        && !db.starts_with('.')
        && db
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidDatabaseName(db.to_owned()))
    }
}

/// Convenience for building tag filters from string pairs.
pub fn tag_filter<const N: usize>(pairs: [(&str, &str); N]) -> BTreeMap<String, String> {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect()
}
