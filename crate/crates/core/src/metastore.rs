//! The regular database: entities, events, condensed statistics, alert
//! history and stored documents (rules, dashboards).
//!
//! Backed by a single JSON-lines key-value log. Every write appends a `put`
//! or `del` entry; the log is rewritten (tmp file + rename) once dead
//! entries outnumber live rows.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::MetricSample;
use crate::selector::Selector;
use crate::tsdb::RollupPoint;

pub const DEFAULT_MAX_ROWS: usize = 10_000_000;

const ENTITIES: &str = "entities";
const EVENTS: &str = "events";
const SUMMARIES: &str = "summaries";
const ALERT_HISTORY: &str = "alert_history";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetastoreError {
    #[error("entity id must not be empty")]
    EmptyId,
    #[error("row limit of {0} reached")]
    StorageFull(usize),
    #[error("inconsistent summary stats: {0}")]
    InconsistentStats(String),
    #[error("invalid range [{start}, {end})")]
    InvalidRange { start: i64, end: i64 },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("metastore i/o: {0}")]
    Io(String),
    #[error("encoding: {0}")]
    Encoding(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetastoreSettings {
    /// Log file; in memory only when unset.
    pub path: Option<String>,
    pub max_rows: usize,
}

impl Default for MetastoreSettings {
    fn default() -> Self {
        MetastoreSettings {
            path: None,
            max_rows: DEFAULT_MAX_ROWS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub entity_id: String,
    pub kind: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    #[serde(default)]
    pub created_at: i64,
    #[serde(default)]
    pub updated_at: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub count: u64,
    pub sum: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub stddev: f64,
    pub sum_sq: f64,
}

impl SummaryStats {
    pub fn from_rollup(r: &RollupPoint) -> Self {
        SummaryStats {
            count: r.count,
            sum: r.sum,
            min: r.min,
            max: r.max,
            mean: r.mean(),
            stddev: r.variance().max(0.0).sqrt(),
            sum_sq: r.sum_sq,
        }
    }

    pub fn validate(&self) -> Result<(), MetastoreError> {
        let bad = |msg: String| Err(MetastoreError::InconsistentStats(msg));
        if self.count == 0 {
            return bad("count is zero".into());
        }
        let n = self.count as f64;
        let scale = self.sum.abs().max(self.min.abs()).max(self.max.abs()).max(1.0);
        if (self.mean - self.sum / n).abs() > 1e-9 * scale {
            return bad(format!("mean {} != sum/count {}", self.mean, self.sum / n));
        }
        if self.min > self.mean + 1e-9 * scale || self.mean > self.max + 1e-9 * scale {
            return bad(format!("mean {} outside [{}, {}]", self.mean, self.min, self.max));
        }
        let variance = self.sum_sq / n - self.mean * self.mean;
        let tol = 1e-9 * (self.sum_sq / n).abs().max(1.0);
        if variance < -tol {
            return bad(format!("negative variance {variance}"));
        }
        if !(self.stddev >= 0.0) || (self.stddev * self.stddev - variance.max(0.0)).abs() > tol {
            return bad(format!("stddev {} does not match variance {variance}", self.stddev));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: i64,
    pub end: i64,
}

impl Window {
    pub fn new(start: i64, end: i64) -> Result<Self, MetastoreError> {
        if start >= end {
            return Err(MetastoreError::InvalidRange { start, end });
        }
        Ok(Window { start, end })
    }

    pub fn overlaps(&self, other: &Window) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub summary_id: String,
    /// Serialized selector, usually the exact series key.
    pub selector: String,
    pub window: Window,
    pub stats: SummaryStats,
    pub produced_at: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub name: String,
    pub labels: BTreeMap<String, String>,
    pub value: f64,
    pub unit: String,
    pub timestamp: i64,
}

impl EventRecord {
    pub fn from_sample(sample: &MetricSample) -> Self {
        EventRecord {
            name: sample.name().to_string(),
            labels: sample.key.label_map(),
            value: sample.value,
            unit: sample.unit.canonical.symbol().to_string(),
            timestamp: sample.timestamp,
        }
    }

    fn matches(&self, selector: &Selector) -> bool {
        selector.matches_parts(&self.name, |k| self.labels.get(k).map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertHistoryEntry {
    pub fingerprint: String,
    pub rule_id: String,
    pub from: String,
    pub to: String,
    pub value: f64,
    pub labels: BTreeMap<String, String>,
    pub timestamp: i64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum LogEntry {
    Put { table: String, key: String, value: Value },
    Del { table: String, key: String },
}

type Tables = HashMap<String, BTreeMap<String, Value>>;

#[derive(Debug)]
struct LogFile {
    path: PathBuf,
    writer: BufWriter<File>,
    entries: usize,
}

#[derive(Debug)]
pub struct Metastore {
    tables: RwLock<Tables>,
    log: Mutex<Option<LogFile>>,
    max_rows: usize,
    event_seq: AtomicU64,
}

fn io_err(e: impl std::fmt::Display) -> MetastoreError {
    MetastoreError::Io(e.to_string())
}

fn enc_err(e: impl std::fmt::Display) -> MetastoreError {
    MetastoreError::Encoding(e.to_string())
}

/// Ends a torn trailing line so the next append starts on a fresh line.
pub(crate) fn terminate_torn_line(path: &Path, writer: &mut BufWriter<File>) -> std::io::Result<()> {
    use std::io::{Read, Seek, SeekFrom};
    let mut f = File::open(path)?;
    if f.metadata()?.len() == 0 {
        return Ok(());
    }
    f.seek(SeekFrom::End(-1))?;
    let mut last = [0u8; 1];
    f.read_exact(&mut last)?;
    if last[0] != b'\n' {
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

fn entity_key(kind: &str, id: &str) -> String {
    format!("{kind}/{id}")
}

impl Metastore {
    pub fn in_memory(max_rows: usize) -> Self {
        Metastore {
            tables: RwLock::new(HashMap::new()),
            log: Mutex::new(None),
            max_rows,
            event_seq: AtomicU64::new(0),
        }
    }

    pub fn from_settings(settings: &MetastoreSettings) -> Result<Self, MetastoreError> {
        match &settings.path {
            Some(p) => Self::open(Path::new(p), settings.max_rows),
            None => Ok(Self::in_memory(settings.max_rows)),
        }
    }

    /// Opens the log at `path`, replaying it. A torn final line is ignored.
    pub fn open(path: &Path, max_rows: usize) -> Result<Self, MetastoreError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut tables: Tables = HashMap::new();
        let mut entries = 0;
        match fs::read_to_string(path) {
            Ok(text) => {
                for line in text.lines().filter(|l| !l.trim().is_empty()) {
                    entries += 1;
                    match serde_json::from_str::<LogEntry>(line) {
                        Ok(LogEntry::Put { table, key, value }) => {
                            tables.entry(table).or_default().insert(key, value);
                        }
                        Ok(LogEntry::Del { table, key }) => {
                            if let Some(t) = tables.get_mut(&table) {
                                t.remove(&key);
                            }
                        }
                        Err(e) => tracing::warn!(error = %e, "ignoring unreadable metastore entry"),
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(io_err(e)),
        }
        let seq = [EVENTS, ALERT_HISTORY]
            .iter()
            .filter_map(|t| tables.get(*t))
            .flat_map(|t| t.keys())
            .filter_map(|k| k.rsplit_once('-')?.1.parse::<u64>().ok())
            .max()
            .map_or(0, |m| m + 1);
        let mut writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map(BufWriter::new)
            .map_err(io_err)?;
        terminate_torn_line(path, &mut writer).map_err(io_err)?;
        Ok(Metastore {
            tables: RwLock::new(tables),
            log: Mutex::new(Some(LogFile {
                path: path.to_path_buf(),
                writer,
                entries,
            })),
            max_rows,
            event_seq: AtomicU64::new(seq),
        })
    }

    fn row_count(tables: &Tables) -> usize {
        tables.values().map(BTreeMap::len).sum()
    }

    fn apply(&self, entries: Vec<LogEntry>) -> Result<(), MetastoreError> {
        let mut log = self.log.lock();
        let mut tables = self.tables.write();
        let inserts = entries
            .iter()
            .filter(|e| match e {
                LogEntry::Put { table, key, .. } => !tables.get(table).is_some_and(|t| t.contains_key(key)),
                LogEntry::Del { .. } => false,
            })
            .count();
        if inserts > 0 && Self::row_count(&tables) + inserts > self.max_rows {
            return Err(MetastoreError::StorageFull(self.max_rows));
        }
        if let Some(file) = log.as_mut() {
            for e in &entries {
                let line = serde_json::to_string(e).map_err(enc_err)?;
                writeln!(file.writer, "{line}").map_err(io_err)?;
            }
            file.writer.flush().map_err(io_err)?;
            file.entries += entries.len();
        }
        for e in entries {
            match e {
                LogEntry::Put { table, key, value } => {
                    tables.entry(table).or_default().insert(key, value);
                }
                LogEntry::Del { table, key } => {
                    if let Some(t) = tables.get_mut(&table) {
                        t.remove(&key);
                    }
                }
            }
        }
        if let Some(file) = log.as_mut() {
            let live = Self::row_count(&tables);
            if file.entries > 1024 && file.entries > 2 * live {
                Self::compact(file, &tables)?;
            }
        }
        Ok(())
    }

    fn compact(file: &mut LogFile, tables: &Tables) -> Result<(), MetastoreError> {
        let tmp = file.path.with_extension("compact");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(io_err)?);
            let mut names: Vec<&String> = tables.keys().collect();
            names.sort();
            for name in names {
                for (key, value) in &tables[name] {
                    let entry = LogEntry::Put {
                        table: name.clone(),
                        key: key.clone(),
                        value: value.clone(),
                    };
                    writeln!(w, "{}", serde_json::to_string(&entry).map_err(enc_err)?).map_err(io_err)?;
                }
            }
            w.flush().map_err(io_err)?;
            w.get_ref().sync_all().map_err(io_err)?;
        }
        fs::rename(&tmp, &file.path).map_err(io_err)?;
        file.writer = OpenOptions::new()
            .append(true)
            .open(&file.path)
            .map(BufWriter::new)
            .map_err(io_err)?;
        file.entries = Self::row_count(tables);
        Ok(())
    }

    /// Flushes and fsyncs the log.
    pub fn sync(&self) -> Result<(), MetastoreError> {
        if let Some(file) = self.log.lock().as_mut() {
            file.writer.flush().map_err(io_err)?;
            file.writer.get_ref().sync_data().map_err(io_err)?;
        }
        Ok(())
    }

    pub fn put<T: Serialize>(&self, table: &str, key: &str, value: &T) -> Result<(), MetastoreError> {
        let value = serde_json::to_value(value).map_err(enc_err)?;
        self.apply(vec![LogEntry::Put {
            table: table.to_string(),
            key: key.to_string(),
            value,
        }])
    }

    /// Returns whether a row was removed.
    pub fn delete(&self, table: &str, key: &str) -> Result<bool, MetastoreError> {
        if !self.tables.read().get(table).is_some_and(|t| t.contains_key(key)) {
            return Ok(false);
        }
        self.apply(vec![LogEntry::Del {
            table: table.to_string(),
            key: key.to_string(),
        }])?;
        Ok(true)
    }

    pub fn get<T: DeserializeOwned>(&self, table: &str, key: &str) -> Result<Option<T>, MetastoreError> {
        let tables = self.tables.read();
        match tables.get(table).and_then(|t| t.get(key)) {
            Some(v) => serde_json::from_value(v.clone()).map(Some).map_err(enc_err),
            None => Ok(None),
        }
    }

    /// All rows of `table` that decode as `T`, in key order. Rows that fail
    /// to decode are skipped with a warning.
    pub fn list<T: DeserializeOwned>(&self, table: &str) -> Vec<(String, T)> {
        let tables = self.tables.read();
        let Some(t) = tables.get(table) else { return Vec::new() };
        t.iter()
            .filter_map(|(k, v)| match serde_json::from_value(v.clone()) {
                Ok(x) => Some((k.clone(), x)),
                Err(e) => {
                    tracing::warn!(table, key = %k, error = %e, "skipping unreadable row");
                    None
                }
            })
            .collect()
    }

    pub fn upsert_entity(&self, mut record: EntityRecord, now: i64) -> Result<EntityRecord, MetastoreError> {
        if record.entity_id.is_empty() {
            return Err(MetastoreError::EmptyId);
        }
        let key = entity_key(&record.kind, &record.entity_id);
        let existing: Option<EntityRecord> = self.get(ENTITIES, &key)?;
        record.created_at = existing.map_or(now, |e| e.created_at);
        record.updated_at = now.max(record.created_at);
        self.put(ENTITIES, &key, &record)?;
        Ok(record)
    }

    pub fn get_entity(&self, kind: &str, id: &str) -> Result<Option<EntityRecord>, MetastoreError> {
        self.get(ENTITIES, &entity_key(kind, id))
    }

    pub fn delete_entity(&self, kind: &str, id: &str) -> Result<bool, MetastoreError> {
        self.delete(ENTITIES, &entity_key(kind, id))
    }

    pub fn list_entities(&self, kind: Option<&str>) -> Vec<EntityRecord> {
        self.list::<EntityRecord>(ENTITIES)
            .into_iter()
            .map(|(_, e)| e)
            .filter(|e| kind.is_none_or(|k| e.kind == k))
            .collect()
    }

    pub fn store_summary(&self, summary: &SummaryRecord) -> Result<(), MetastoreError> {
        summary.stats.validate()?;
        Window::new(summary.window.start, summary.window.end)?;
        self.put(SUMMARIES, &summary.summary_id, summary)
    }

    /// Summaries whose selector matches `selector` (exact text) and whose
    /// window overlaps `window`. Corrupt rows are dropped on read.
    pub fn query_summaries(&self, selector: Option<&str>, window: Window) -> Vec<SummaryRecord> {
        let mut out: Vec<SummaryRecord> = self
            .list::<SummaryRecord>(SUMMARIES)
            .into_iter()
            .map(|(_, s)| s)
            .filter(|s| match s.stats.validate() {
                Ok(()) => true,
                Err(e) => {
                    tracing::warn!(summary = %s.summary_id, error = %e, "dropping corrupt summary");
                    false
                }
            })
            .filter(|s| selector.is_none_or(|sel| s.selector == sel) && s.window.overlaps(&window))
            .collect();
        out.sort_by(|a, b| (a.window.start, &a.summary_id).cmp(&(b.window.start, &b.summary_id)));
        out
    }

    pub fn record_event(&self, event: &EventRecord) -> Result<(), MetastoreError> {
        self.record_events(std::slice::from_ref(event))
    }

    pub fn record_events(&self, events: &[EventRecord]) -> Result<(), MetastoreError> {
        let mut entries = Vec::with_capacity(events.len());
        for e in events {
            let seq = self.event_seq.fetch_add(1, Ordering::Relaxed);
            entries.push(LogEntry::Put {
                table: EVENTS.to_string(),
                key: format!("{:020}-{seq:012}", e.timestamp.max(0)),
                value: serde_json::to_value(e).map_err(enc_err)?,
            });
        }
        self.apply(entries)
    }

    /// Events in `[start, end)` matching `selector`, time-sorted.
    pub fn query_events(&self, selector: &Selector, start: i64, end: i64) -> Result<Vec<EventRecord>, MetastoreError> {
        if start >= end {
            return Err(MetastoreError::InvalidRange { start, end });
        }
        let lo = format!("{:020}", start.max(0));
        let hi = format!("{:020}", end.max(0));
        let tables = self.tables.read();
        let Some(t) = tables.get(EVENTS) else { return Ok(Vec::new()) };
        Ok(t.range(lo..hi)
            .filter_map(|(_, v)| serde_json::from_value::<EventRecord>(v.clone()).ok())
            .filter(|e| e.timestamp >= start && e.timestamp < end && e.matches(selector))
            .collect())
    }

    pub fn record_alert_transition(&self, entry: &AlertHistoryEntry) -> Result<(), MetastoreError> {
        let seq = self.event_seq.fetch_add(1, Ordering::Relaxed);
        self.put(ALERT_HISTORY, &format!("{:020}-{seq:012}", entry.timestamp.max(0)), entry)
    }

    pub fn alert_history(&self) -> Vec<AlertHistoryEntry> {
        self.list(ALERT_HISTORY).into_iter().map(|(_, e)| e).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selector::Matcher;

    fn stats(values: &[f64]) -> SummaryStats {
        let mut r = RollupPoint::from_value(0, 60_000, values[0]);
        for v in &values[1..] {
            r.push(*v);
        }
        SummaryStats::from_rollup(&r)
    }

    fn event(name: &str, plot: &str, ts: i64) -> EventRecord {
        EventRecord {
            name: name.into(),
            labels: BTreeMap::from([("plot".to_string(), plot.to_string())]),
            value: 1.0,
            unit: String::new(),
            timestamp: ts,
        }
    }

    #[test]
    fn entity_upsert() {
        let m = Metastore::in_memory(100);
        let rec = EntityRecord {
            entity_id: "n1".into(),
            kind: "host".into(),
            attributes: BTreeMap::from([("rack".to_string(), "a".to_string())]),
            created_at: 0,
            updated_at: 0,
        };
        let first = m.upsert_entity(rec.clone(), 10).unwrap();
        assert_eq!((first.created_at, first.updated_at), (10, 10));
        let mut changed = rec.clone();
        changed.attributes = BTreeMap::from([("rack".to_string(), "b".to_string())]);
        let second = m.upsert_entity(changed.clone(), 20).unwrap();
        assert_eq!((second.created_at, second.updated_at), (10, 20));
        assert_eq!(m.get_entity("host", "n1").unwrap().unwrap().attributes, changed.attributes);
        m.upsert_entity(changed.clone(), 20).unwrap();
        assert_eq!(m.list_entities(Some("host")).len(), 1);

        let mut empty = rec;
        empty.entity_id.clear();
        assert_eq!(m.upsert_entity(empty, 1), Err(MetastoreError::EmptyId));
    }

    #[test]
    fn summaries() {
        let m = Metastore::in_memory(100);
        let s = SummaryRecord {
            summary_id: "a".into(),
            selector: "lat{}".into(),
            window: Window { start: 0, end: 60_000 },
            stats: stats(&[1.0, 5.0]),
            produced_at: 1,
        };
        m.store_summary(&s).unwrap();
        let overlapping = SummaryRecord {
            summary_id: "b".into(),
            window: Window { start: 30_000, end: 90_000 },
            ..s.clone()
        };
        m.store_summary(&overlapping).unwrap();
        assert_eq!(m.query_summaries(Some("lat{}"), Window { start: 0, end: 100_000 }).len(), 2);
        assert_eq!(m.query_summaries(Some("lat{}"), Window { start: 60_000, end: 100_000 }).len(), 1);

        let mut bad = s.clone();
        bad.stats.sum_sq = 0.0; // variance 0 - 9 < 0
        assert!(matches!(m.store_summary(&bad), Err(MetastoreError::InconsistentStats(_))));
        let mut bad_mean = s;
        bad_mean.stats.mean = 4.0;
        assert!(matches!(m.store_summary(&bad_mean), Err(MetastoreError::InconsistentStats(_))));
    }

    #[test]
    fn events_filter_and_sort() {
        let m = Metastore::in_memory(100);
        let sel = Selector::metric("harvest_logged").with(Matcher::eq("plot", "p1"));
        assert!(m.query_events(&sel, 0, 100).unwrap().is_empty());
        m.record_event(&event("harvest_logged", "p1", 30)).unwrap();
        m.record_event(&event("harvest_logged", "p2", 20)).unwrap();
        m.record_event(&event("harvest_logged", "p1", 10)).unwrap();
        let got = m.query_events(&sel, 0, 100).unwrap();
        assert_eq!(got.iter().map(|e| e.timestamp).collect::<Vec<_>>(), vec![10, 30]);
        assert!(m.query_events(&sel, 40, 100).unwrap().is_empty());
        assert!(matches!(m.query_events(&sel, 5, 5), Err(MetastoreError::InvalidRange { .. })));
    }

    #[test]
    fn persistence_and_compaction() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.jsonl");
        {
            let m = Metastore::open(&path, 100_000).unwrap();
            for i in 0..3000 {
                m.put("docs", "same", &i).unwrap();
            }
            m.put("docs", "gone", &1).unwrap();
            assert!(m.delete("docs", "gone").unwrap());
            m.record_event(&event("e", "p", 5)).unwrap();
        }
        let lines = fs::read_to_string(&path).unwrap().lines().count();
        assert!(lines < 3000, "log was not compacted: {lines} lines");
        let m = Metastore::open(&path, 100_000).unwrap();
        assert_eq!(m.get::<i32>("docs", "same").unwrap(), Some(2999));
        assert_eq!(m.get::<i32>("docs", "gone").unwrap(), None);
        m.record_event(&event("e", "p", 5)).unwrap();
        assert_eq!(m.query_events(&Selector::metric("e"), 0, 10).unwrap().len(), 2);
    }

    #[test]
    fn row_limit() {
        let m = Metastore::in_memory(2);
        m.put("t", "a", &1).unwrap();
        m.put("t", "b", &1).unwrap();
        m.put("t", "a", &2).unwrap();
        assert_eq!(m.put("t", "c", &1), Err(MetastoreError::StorageFull(2)));
    }
}
