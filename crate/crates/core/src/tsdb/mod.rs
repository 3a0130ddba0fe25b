//! Time-series store for high-frequency metrics.
//!
//! Raw points live in an in-memory head per series, mirrored to append-only
//! segment files. Distillation folds raw points into 1-minute and 1-hour
//! rollups; retention then clears raw points, but only below the series'
//! distill watermark. Queries stitch the three tiers together: raw above the
//! raw clear line, 1 m rollups between the 1 m and raw clear lines, 1 h
//! rollups below that.

mod query;
mod rollup;
pub mod segment;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use query::{quantile, Aggregation, SeriesResult};
pub use rollup::{downsample, reaggregate, RollupPoint};
pub use segment::Tier;

use crate::clock::{align_down, DAY_MS, HOUR_MS, MINUTE_MS};
use crate::hash::fnv1a64;
use crate::model::{MetricSample, SeriesKey};
use crate::selector::Selector;
use query::Bucket;
use segment::{encode_record, MetaFrame, SegmentDir, ShardWriters, BLOCK_MS};

const SHARDS: usize = 16;
pub const DEFAULT_MAX_SERIES: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TsdbError {
    #[error("timestamp {timestamp} is older than retention cutoff {cutoff}")]
    RetentionViolation { timestamp: i64, cutoff: i64 },
    #[error("series limit of {0} reached")]
    StorageFull(usize),
    #[error("invalid range [{start}, {end})")]
    InvalidRange { start: i64, end: i64 },
    #[error("step {0} ms is below the 1000 ms minimum for aggregated queries")]
    InvalidStep(i64),
    #[error("quantile requires raw points but the range is only covered by rollups")]
    QuantileNeedsRaw,
    #[error("empty input")]
    EmptyInput,
    #[error("quantile {0} outside (0, 1]")]
    InvalidQuantile(f64),
    #[error("unknown aggregation `{0}`")]
    InvalidAggregation(String),
    #[error("window [{start}, {end}) not aligned to {resolution} ms")]
    UnalignedWindow { start: i64, end: i64, resolution: i64 },
    #[error("invalid retention policy: {0}")]
    InvalidPolicy(String),
    #[error("storage i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionPolicy {
    pub raw_ms: i64,
    pub rollup_1m_ms: i64,
    pub rollup_1h_ms: i64,
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        RetentionPolicy {
            raw_ms: 24 * HOUR_MS,
            rollup_1m_ms: 7 * DAY_MS,
            rollup_1h_ms: 90 * DAY_MS,
        }
    }
}

impl RetentionPolicy {
    pub fn validate(&self) -> Result<(), TsdbError> {
        if self.raw_ms > 0 && self.raw_ms < self.rollup_1m_ms && self.rollup_1m_ms < self.rollup_1h_ms {
            Ok(())
        } else {
            Err(TsdbError::InvalidPolicy(format!(
                "need 0 < raw ({}) < 1m ({}) < 1h ({})",
                self.raw_ms, self.rollup_1m_ms, self.rollup_1h_ms
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsdbSettings {
    pub data_dir: Option<String>,
    pub raw_retention_hours: f64,
    pub rollup_1m_retention_days: f64,
    pub rollup_1h_retention_days: f64,
    pub max_series: usize,
}

impl Default for TsdbSettings {
    fn default() -> Self {
        TsdbSettings {
            data_dir: None,
            raw_retention_hours: 24.0,
            rollup_1m_retention_days: 7.0,
            rollup_1h_retention_days: 90.0,
            max_series: DEFAULT_MAX_SERIES,
        }
    }
}

impl TsdbSettings {
    pub fn retention(&self) -> RetentionPolicy {
        RetentionPolicy {
            raw_ms: (self.raw_retention_hours * HOUR_MS as f64) as i64,
            rollup_1m_ms: (self.rollup_1m_retention_days * DAY_MS as f64) as i64,
            rollup_1h_ms: (self.rollup_1h_retention_days * DAY_MS as f64) as i64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendOutcome {
    Stored,
    /// Same (series, timestamp) already stored; the first write is kept.
    Duplicate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub raw_deleted: usize,
    pub rollups_deleted: usize,
    /// Series holding expired raw points that are not yet distilled.
    pub blocked: Vec<SeriesKey>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutcome {
    pub from: i64,
    pub until: i64,
    pub rollups: Vec<RollupPoint>,
}

impl DistillOutcome {
    /// Merge of all rollups produced, if any raw point was distilled.
    pub fn total(&self) -> Option<RollupPoint> {
        let mut iter = self.rollups.iter();
        let mut total = *iter.next()?;
        for r in iter {
            total.merge(r);
        }
        total.window_start = self.from;
        total.window_len = self.until - self.from;
        Some(total)
    }
}

/// Per-series tier boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SeriesWatermarks {
    pub distilled_until: i64,
    pub raw_cleared_before: i64,
    pub minute_cleared_before: i64,
    pub hour_cleared_before: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct TsdbStats {
    pub series: usize,
    pub raw_points: usize,
    pub minute_rollups: usize,
    pub hour_rollups: usize,
}

#[derive(Debug)]
struct Series {
    key: SeriesKey,
    raw: BTreeMap<i64, f64>,
    minute: BTreeMap<i64, RollupPoint>,
    hour: BTreeMap<i64, RollupPoint>,
    marks: SeriesWatermarks,
}

impl Series {
    fn new(key: SeriesKey) -> Self {
        Series {
            key,
            raw: BTreeMap::new(),
            minute: BTreeMap::new(),
            hour: BTreeMap::new(),
            marks: SeriesWatermarks::default(),
        }
    }

    fn merge_rollup(&mut self, r: &RollupPoint) {
        merge_into(&mut self.minute, r.window_start, MINUTE_MS, r);
        merge_into(&mut self.hour, align_down(r.window_start, HOUR_MS), HOUR_MS, r);
    }
}

fn merge_into(tier: &mut BTreeMap<i64, RollupPoint>, start: i64, len: i64, r: &RollupPoint) {
    tier.entry(start)
        .and_modify(|p| p.merge(r))
        .or_insert_with(|| RollupPoint {
            window_start: start,
            window_len: len,
            ..*r
        });
}

/// Removes every entry below `before`, returning how many were removed.
fn drop_below<V>(map: &mut BTreeMap<i64, V>, before: i64) -> usize {
    let keep = map.split_off(&before);
    let removed = map.len();
    *map = keep;
    removed
}

#[derive(Debug, Default)]
struct Shard {
    ids: HashMap<SeriesKey, u64>,
    series: HashMap<u64, Series>,
    writers: ShardWriters,
    /// Which series have records in which on-disk block.
    blocks: BTreeMap<i64, HashSet<u64>>,
}

fn shard_of(key: &SeriesKey) -> usize {
    (fnv1a64(key.to_string().as_bytes()) % SHARDS as u64) as usize
}

pub struct Tsdb {
    policy: RetentionPolicy,
    max_series: usize,
    shards: Vec<RwLock<Shard>>,
    series_count: AtomicUsize,
    next_id: AtomicU64,
    dir: Option<PathBuf>,
    disk: Option<Mutex<SegmentDir>>,
}

impl std::fmt::Debug for Tsdb {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tsdb")
            .field("policy", &self.policy)
            .field("dir", &self.dir)
            .field("series", &self.series_count.load(Ordering::Relaxed))
            .finish()
    }
}

impl Tsdb {
    /// Volatile store with no backing files.
    pub fn in_memory(policy: RetentionPolicy, max_series: usize) -> Result<Self, TsdbError> {
        policy.validate()?;
        Ok(Tsdb {
            policy,
            max_series,
            shards: (0..SHARDS).map(|_| RwLock::new(Shard::default())).collect(),
            series_count: AtomicUsize::new(0),
            next_id: AtomicU64::new(1),
            dir: None,
            disk: None,
        })
    }

    /// Opens (or creates) a store in `dir`, replaying any existing files.
    pub fn open(dir: &Path, policy: RetentionPolicy, max_series: usize) -> Result<Self, TsdbError> {
        let mut db = Self::in_memory(policy, max_series)?;
        let disk = SegmentDir::open(dir)?;
        db.replay(dir)?;
        db.dir = Some(dir.to_path_buf());
        db.disk = Some(Mutex::new(disk));
        Ok(db)
    }

    pub fn from_settings(settings: &TsdbSettings) -> Result<Self, TsdbError> {
        match &settings.data_dir {
            Some(dir) => Self::open(Path::new(dir), settings.retention(), settings.max_series),
            None => Self::in_memory(settings.retention(), settings.max_series),
        }
    }

    pub fn policy(&self) -> RetentionPolicy {
        self.policy
    }

    fn replay(&mut self, dir: &Path) -> Result<(), TsdbError> {
        let mut shard_by_id = HashMap::new();
        let mut max_id = 0;
        for (id, text) in SegmentDir::read_dict(dir)? {
            let key: SeriesKey = match text.parse() {
                Ok(k) => k,
                Err(e) => {
                    tracing::warn!(id, error = %e, "skipping unreadable series entry");
                    continue;
                }
            };
            let idx = shard_of(&key);
            let shard = self.shards[idx].get_mut();
            shard.ids.insert(key.clone(), id);
            shard.series.insert(id, Series::new(key));
            shard_by_id.insert(id, idx);
            max_id = max_id.max(id);
        }
        self.next_id.store(max_id + 1, Ordering::Relaxed);
        self.series_count.store(shard_by_id.len(), Ordering::Relaxed);

        for frame in SegmentDir::read_frames(dir)? {
            let id = match &frame {
                MetaFrame::Distill { id, .. } | MetaFrame::Late { id, .. } | MetaFrame::Clear { id, .. } => *id,
            };
            let Some(&idx) = shard_by_id.get(&id) else { continue };
            let series = self.shards[idx].get_mut().series.get_mut(&id).expect("indexed series");
            match frame {
                MetaFrame::Distill { until, rollups, .. } => {
                    for r in &rollups {
                        series.merge_rollup(r);
                    }
                    series.marks.distilled_until = series.marks.distilled_until.max(until);
                }
                MetaFrame::Late { ts, value, .. } => {
                    series.merge_rollup(&RollupPoint::from_value(align_down(ts, MINUTE_MS), MINUTE_MS, value));
                }
                MetaFrame::Clear { tier, before, .. } => match tier {
                    Tier::Raw => series.marks.raw_cleared_before = series.marks.raw_cleared_before.max(before),
                    Tier::Minute => {
                        drop_below(&mut series.minute, before);
                        series.marks.minute_cleared_before = series.marks.minute_cleared_before.max(before);
                    }
                    Tier::Hour => {
                        drop_below(&mut series.hour, before);
                        series.marks.hour_cleared_before = series.marks.hour_cleared_before.max(before);
                    }
                },
            }
        }

        for (_, block, path) in SegmentDir::list_segments(dir)? {
            let bytes = std::fs::read(&path).map_err(|e| segment::io_err(&path, e))?;
            for (id, ts, value) in segment::decode_records(&bytes) {
                let Some(&idx) = shard_by_id.get(&id) else { continue };
                let shard = self.shards[idx].get_mut();
                let series = shard.series.get_mut(&id).expect("indexed series");
                if ts < series.marks.raw_cleared_before {
                    continue;
                }
                series.raw.entry(ts).or_insert(value);
                shard.blocks.entry(block).or_default().insert(id);
            }
        }
        Ok(())
    }

    fn create_series(&self, shard: &mut Shard, key: &SeriesKey) -> Result<u64, TsdbError> {
        if self.series_count.fetch_add(1, Ordering::AcqRel) >= self.max_series {
            self.series_count.fetch_sub(1, Ordering::AcqRel);
            return Err(TsdbError::StorageFull(self.max_series));
        }
        let id = self.next_id.fetch_add(1, Ordering::AcqRel);
        if let Some(disk) = &self.disk {
            if let Err(e) = disk.lock().write_series(id, &key.to_string()) {
                self.series_count.fetch_sub(1, Ordering::AcqRel);
                return Err(e);
            }
        }
        shard.ids.insert(key.clone(), id);
        shard.series.insert(id, Series::new(key.clone()));
        Ok(id)
    }

    pub fn append(&self, sample: &MetricSample, now: i64) -> Result<AppendOutcome, TsdbError> {
        self.append_point(&sample.key, sample.timestamp, sample.value, now)
    }

    pub fn append_point(&self, key: &SeriesKey, ts: i64, value: f64, now: i64) -> Result<AppendOutcome, TsdbError> {
        let cutoff = now - self.policy.raw_ms;
        if ts < cutoff {
            return Err(TsdbError::RetentionViolation { timestamp: ts, cutoff });
        }
        let idx = shard_of(key);
        let mut guard = self.shards[idx].write();
        let id = match guard.ids.get(key) {
            Some(id) => *id,
            None => self.create_series(&mut guard, key)?,
        };
        let Shard {
            series,
            writers,
            blocks,
            ..
        } = &mut *guard;
        let series = series.get_mut(&id).expect("indexed series");
        if ts < series.marks.raw_cleared_before {
            return Err(TsdbError::RetentionViolation {
                timestamp: ts,
                cutoff: series.marks.raw_cleared_before,
            });
        }
        if series.raw.contains_key(&ts) {
            return Ok(AppendOutcome::Duplicate);
        }
        if let Some(dir) = &self.dir {
            let block = align_down(ts, BLOCK_MS);
            writers.append(dir, idx, block, &encode_record(id, ts, value))?;
            blocks.entry(block).or_default().insert(id);
        }
        series.raw.insert(ts, value);
        if ts < series.marks.distilled_until {
            series.merge_rollup(&RollupPoint::from_value(align_down(ts, MINUTE_MS), MINUTE_MS, value));
            if let Some(disk) = &self.disk {
                writers.flush()?;
                disk.lock().write_frame(&MetaFrame::Late { id, ts, value })?;
            }
        }
        Ok(AppendOutcome::Stored)
    }

    /// Flushes buffered segment writes to the operating system.
    pub fn flush(&self) -> Result<(), TsdbError> {
        for shard in &self.shards {
            shard.write().writers.flush()?;
        }
        Ok(())
    }

    pub fn series_keys(&self, selector: Option<&Selector>) -> Vec<SeriesKey> {
        let mut keys: Vec<SeriesKey> = self
            .shards
            .iter()
            .flat_map(|s| {
                s.read()
                    .ids
                    .keys()
                    .filter(|k| selector.is_none_or(|sel| sel.matches(k)))
                    .cloned()
                    .collect::<Vec<_>>()
            })
            .collect();
        keys.sort();
        keys
    }

    fn with_series<T>(&self, key: &SeriesKey, f: impl FnOnce(&Series) -> T) -> Option<T> {
        let shard = self.shards[shard_of(key)].read();
        let id = shard.ids.get(key)?;
        shard.series.get(id).map(f)
    }

    /// Raw points of one series within `[start, end)`, time-sorted.
    pub fn raw_points(&self, key: &SeriesKey, start: i64, end: i64) -> Vec<(i64, f64)> {
        if start >= end {
            return Vec::new();
        }
        self.with_series(key, |s| s.raw.range(start..end).map(|(t, v)| (*t, *v)).collect())
            .unwrap_or_default()
    }

    pub fn rollups(&self, key: &SeriesKey, tier: Tier) -> Vec<RollupPoint> {
        self.with_series(key, |s| match tier {
            Tier::Minute => s.minute.values().copied().collect(),
            Tier::Hour => s.hour.values().copied().collect(),
            Tier::Raw => s
                .raw
                .iter()
                .map(|(t, v)| RollupPoint::from_value(*t, 0, *v))
                .collect(),
        })
        .unwrap_or_default()
    }

    pub fn watermarks(&self, key: &SeriesKey) -> Option<SeriesWatermarks> {
        self.with_series(key, |s| s.marks)
    }

    pub fn stats(&self) -> TsdbStats {
        let mut stats = TsdbStats::default();
        for shard in &self.shards {
            let shard = shard.read();
            stats.series += shard.series.len();
            for s in shard.series.values() {
                stats.raw_points += s.raw.len();
                stats.minute_rollups += s.minute.len();
                stats.hour_rollups += s.hour.len();
            }
        }
        stats
    }

    /// Range query with per-bucket aggregation. Buckets are
    /// `floor((t - start) / step)`; empty buckets and empty series are omitted.
    pub fn query_range(
        &self,
        selector: &Selector,
        start: i64,
        end: i64,
        step: i64,
        agg: Aggregation,
    ) -> Result<Vec<SeriesResult>, TsdbError> {
        if start >= end {
            return Err(TsdbError::InvalidRange { start, end });
        }
        if agg != Aggregation::Raw && step < 1000 {
            return Err(TsdbError::InvalidStep(step));
        }
        let mut out = Vec::new();
        for shard in &self.shards {
            let shard = shard.read();
            for (key, id) in &shard.ids {
                if !selector.matches(key) {
                    continue;
                }
                let series = &shard.series[id];
                let points = if agg == Aggregation::Raw {
                    let from = start.max(series.marks.raw_cleared_before);
                    if from >= end {
                        Vec::new()
                    } else {
                        series.raw.range(from..end).map(|(t, v)| (*t, *v)).collect()
                    }
                } else {
                    aggregate_series(series, start, end, step, agg)?
                };
                if !points.is_empty() {
                    out.push(SeriesResult {
                        key: key.clone(),
                        points,
                    });
                }
            }
        }
        out.sort_by(|a, b| a.key.cmp(&b.key));
        Ok(out)
    }

    /// Series with raw points in `[distilled_until, horizon)`.
    pub fn series_pending_distill(&self, horizon: i64) -> Vec<SeriesKey> {
        let mut keys: Vec<SeriesKey> = Vec::new();
        for shard in &self.shards {
            let shard = shard.read();
            for s in shard.series.values() {
                let from = s.marks.distilled_until;
                if from < horizon && s.raw.range(from..horizon).next().is_some() {
                    keys.push(s.key.clone());
                }
            }
        }
        keys.sort();
        keys
    }

    /// Folds raw points of `key` in `[watermark, until)` into 1 m (and 1 h)
    /// rollups and advances the watermark to `until`. The frame recording
    /// this is synced before the watermark moves in memory.
    pub fn distill_series(&self, key: &SeriesKey, until: i64) -> Result<Option<DistillOutcome>, TsdbError> {
        if until.rem_euclid(MINUTE_MS) != 0 {
            return Err(TsdbError::UnalignedWindow {
                start: until,
                end: until,
                resolution: MINUTE_MS,
            });
        }
        let mut guard = self.shards[shard_of(key)].write();
        let Some(&id) = guard.ids.get(key) else { return Ok(None) };
        let Shard { series, writers, .. } = &mut *guard;
        let series = series.get_mut(&id).expect("indexed series");
        let from = series.marks.distilled_until;
        if until <= from {
            return Ok(None);
        }
        let points: Vec<(i64, f64)> = series.raw.range(from..until).map(|(t, v)| (*t, *v)).collect();
        let rollups = downsample(&points, MINUTE_MS, align_down(from, MINUTE_MS), until)?;
        if let Some(disk) = &self.disk {
            writers.flush()?;
            disk.lock().write_frame(&MetaFrame::Distill {
                id,
                until,
                rollups: rollups.clone(),
            })?;
        }
        for r in &rollups {
            series.merge_rollup(r);
        }
        series.marks.distilled_until = until;
        Ok(Some(DistillOutcome { from, until, rollups }))
    }

    /// Deletes expired data tier by tier. Raw points are only ever removed
    /// below the distill watermark; expired-but-undistilled series are
    /// reported in [`RetentionReport::blocked`].
    pub fn enforce_retention(&self, now: i64) -> Result<RetentionReport, TsdbError> {
        let raw_cut = now - self.policy.raw_ms;
        let raw_target = align_down(raw_cut, MINUTE_MS);
        let minute_target = align_down(now - self.policy.rollup_1m_ms, HOUR_MS);
        let hour_target = align_down(now - self.policy.rollup_1h_ms, HOUR_MS);
        let mut report = RetentionReport::default();

        for (idx, shard) in self.shards.iter().enumerate() {
            let mut guard = shard.write();
            let Shard {
                series,
                writers,
                blocks,
                ..
            } = &mut *guard;
            for (&id, s) in series.iter_mut() {
                let mut frames = Vec::new();
                let raw_before = raw_target.min(s.marks.distilled_until);
                if raw_before > s.marks.raw_cleared_before {
                    let n = drop_below(&mut s.raw, raw_before);
                    s.marks.raw_cleared_before = raw_before;
                    if n > 0 {
                        report.raw_deleted += n;
                        frames.push(MetaFrame::Clear {
                            id,
                            tier: Tier::Raw,
                            before: raw_before,
                        });
                    }
                }
                if s.raw.range(..raw_cut).next().is_some() {
                    report.blocked.push(s.key.clone());
                }

                let minute_before = minute_target.min(align_down(s.marks.raw_cleared_before, HOUR_MS));
                if minute_before > s.marks.minute_cleared_before {
                    let n = drop_below(&mut s.minute, minute_before);
                    s.marks.minute_cleared_before = minute_before;
                    if n > 0 {
                        report.rollups_deleted += n;
                        frames.push(MetaFrame::Clear {
                            id,
                            tier: Tier::Minute,
                            before: minute_before,
                        });
                    }
                }
                if hour_target > s.marks.hour_cleared_before {
                    let n = drop_below(&mut s.hour, hour_target);
                    s.marks.hour_cleared_before = hour_target;
                    if n > 0 {
                        report.rollups_deleted += n;
                        frames.push(MetaFrame::Clear {
                            id,
                            tier: Tier::Hour,
                            before: hour_target,
                        });
                    }
                }
                if let Some(disk) = &self.disk {
                    let mut disk = disk.lock();
                    for f in &frames {
                        disk.write_frame(f)?;
                    }
                }
            }

            if let Some(dir) = &self.dir {
                let expired: Vec<i64> = blocks
                    .iter()
                    .filter(|(block, ids)| {
                        ids.iter().all(|id| {
                            series
                                .get(id)
                                .is_none_or(|s| **block + BLOCK_MS <= s.marks.raw_cleared_before)
                        })
                    })
                    .map(|(b, _)| *b)
                    .collect();
                for block in expired {
                    writers.remove(dir, idx, block)?;
                    blocks.remove(&block);
                }
            }
        }
        report.blocked.sort();
        if !report.blocked.is_empty() {
            tracing::warn!(series = report.blocked.len(), "tsdb_retention_blocked: expired raw data not yet distilled");
        }
        Ok(report)
    }
}

impl Drop for Tsdb {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

fn aggregate_series(series: &Series, start: i64, end: i64, step: i64, agg: Aggregation) -> Result<Vec<(i64, f64)>, TsdbError> {
    let keep_values = matches!(agg, Aggregation::Quantile(_));
    let mut buckets: BTreeMap<i64, Bucket> = BTreeMap::new();
    let bucket_of = |t: i64| (t - start).div_euclid(step);
    let marks = &series.marks;

    let raw_from = start.max(marks.raw_cleared_before);
    if raw_from < end {
        for (t, v) in series.raw.range(raw_from..end) {
            buckets.entry(bucket_of(*t)).or_default().add_raw(*v, keep_values);
        }
    }
    let minute_from = start.max(marks.minute_cleared_before);
    let minute_to = end.min(marks.raw_cleared_before);
    if minute_from < minute_to {
        for (t, r) in series.minute.range(minute_from..minute_to) {
            buckets.entry(bucket_of(*t)).or_default().add_rollup(r);
        }
    }
    let hour_to = end.min(marks.minute_cleared_before);
    if start < hour_to {
        for (t, r) in series.hour.range(start..hour_to) {
            buckets.entry(bucket_of(*t)).or_default().add_rollup(r);
        }
    }

    let mut out = Vec::with_capacity(buckets.len());
    for (idx, bucket) in buckets {
        if let Some(v) = bucket.finish(agg)? {
            out.push((start + idx * step, v));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::canonicalize_series_key;

    const NOW: i64 = 1_700_000_000_000;

    fn db() -> Tsdb {
        Tsdb::in_memory(RetentionPolicy::default(), DEFAULT_MAX_SERIES).unwrap()
    }

    fn key(name: &str) -> SeriesKey {
        canonicalize_series_key(name, [("host", "n1")]).unwrap()
    }

    #[test]
    fn duplicate_append_keeps_first() {
        let db = db();
        let k = key("lat");
        assert_eq!(db.append_point(&k, NOW, 1.0, NOW).unwrap(), AppendOutcome::Stored);
        assert_eq!(db.append_point(&k, NOW, 2.0, NOW).unwrap(), AppendOutcome::Duplicate);
        assert_eq!(db.raw_points(&k, 0, i64::MAX), vec![(NOW, 1.0)]);
    }

    #[test]
    fn retention_violation() {
        let db = db();
        let err = db.append_point(&key("lat"), NOW - 25 * HOUR_MS, 1.0, NOW).unwrap_err();
        assert!(matches!(err, TsdbError::RetentionViolation { .. }));
    }

    #[test]
    fn out_of_order_is_sorted() {
        let db = db();
        let k = key("lat");
        db.append_point(&k, NOW + 10, 2.0, NOW).unwrap();
        db.append_point(&k, NOW, 1.0, NOW).unwrap();
        let res = db.query_range(&Selector::metric("lat"), NOW, NOW + 100, 1, Aggregation::Raw).unwrap();
        assert_eq!(res[0].points, vec![(NOW, 1.0), (NOW + 10, 2.0)]);
    }

    #[test]
    fn masking_window_mean_and_p99() {
        let db = db();
        let k = key("request_latency");
        for i in 0..1000i64 {
            let v = if (600..650).contains(&i) { 3000.0 } else { 100.0 };
            db.append_point(&k, NOW + i * 60, v, NOW).unwrap();
        }
        let sel = Selector::metric("request_latency");
        let mean = db.query_range(&sel, NOW, NOW + MINUTE_MS, MINUTE_MS, Aggregation::Mean).unwrap();
        // (950 * 100 + 50 * 3000) / 1000
        assert!((mean[0].points[0].1 - 245.0).abs() < 1e-9);
        let p99 = db.query_range(&sel, NOW, NOW + MINUTE_MS, MINUTE_MS, Aggregation::Quantile(0.99)).unwrap();
        assert_eq!(p99[0].points, vec![(NOW, 3000.0)]);
    }

    #[test]
    fn empty_match_and_invalid_ranges() {
        let db = db();
        assert!(db.query_range(&Selector::metric("nope"), 0, 10_000, 1000, Aggregation::Mean).unwrap().is_empty());
        assert!(matches!(
            db.query_range(&Selector::metric("x"), 10, 10, 1000, Aggregation::Mean),
            Err(TsdbError::InvalidRange { .. })
        ));
        assert!(matches!(
            db.query_range(&Selector::metric("x"), 0, 10, 999, Aggregation::Mean),
            Err(TsdbError::InvalidStep(999))
        ));
    }

    #[test]
    fn buckets_omit_empty() {
        let db = db();
        let k = key("g");
        db.append_point(&k, NOW + 500, 1.0, NOW).unwrap();
        db.append_point(&k, NOW + 2_500, 3.0, NOW).unwrap();
        db.append_point(&k, NOW + 2_700, 5.0, NOW).unwrap();
        let res = db.query_range(&Selector::metric("g"), NOW, NOW + 4_000, 1_000, Aggregation::Sum).unwrap();
        assert_eq!(res[0].points, vec![(NOW, 1.0), (NOW + 2_000, 8.0)]);
        let count = db.query_range(&Selector::metric("g"), NOW, NOW + 4_000, 4_000, Aggregation::Count).unwrap();
        assert_eq!(count[0].points, vec![(NOW, 3.0)]);
    }

    #[test]
    fn retention_never_clears_undistilled() {
        let db = db();
        let k = key("g");
        let base = align_down(NOW, HOUR_MS);
        for i in 0..100 {
            db.append_point(&k, base + i * 1000, 1.0, base).unwrap();
        }
        let later = base + 25 * HOUR_MS;
        assert_eq!(db.enforce_retention(base).unwrap(), RetentionReport::default());
        let blocked = db.enforce_retention(later).unwrap();
        assert_eq!((blocked.raw_deleted, blocked.rollups_deleted), (0, 0));
        assert_eq!(blocked.blocked, vec![k.clone()]);

        let horizon = align_down(later - HOUR_MS, MINUTE_MS);
        let outcome = db.distill_series(&k, horizon).unwrap().unwrap();
        assert_eq!(outcome.total().unwrap().count, 100);
        let report = db.enforce_retention(later).unwrap();
        assert_eq!((report.raw_deleted, report.rollups_deleted), (100, 0));
        assert!(report.blocked.is_empty());
        assert_eq!(db.enforce_retention(later).unwrap(), RetentionReport::default());

        // distilled data still answers aggregate queries from rollups
        let sel = Selector::metric("g");
        let sum = db.query_range(&sel, base, base + HOUR_MS, HOUR_MS, Aggregation::Sum).unwrap();
        assert_eq!(sum[0].points, vec![(base, 100.0)]);
        assert!(matches!(
            db.query_range(&sel, base, base + HOUR_MS, HOUR_MS, Aggregation::Quantile(0.5)),
            Err(TsdbError::QuantileNeedsRaw)
        ));
    }

    #[test]
    fn late_point_below_watermark_merges_into_rollups() {
        let db = db();
        let k = key("g");
        let base = align_down(NOW, HOUR_MS);
        db.append_point(&k, base + 1_000, 2.0, base).unwrap();
        db.distill_series(&k, base + 10 * MINUTE_MS).unwrap();
        db.append_point(&k, base + 2_000, 3.0, base).unwrap();
        let m = db.rollups(&k, Tier::Minute);
        assert_eq!((m[0].count, m[0].sum), (2, 5.0));
        assert_eq!(db.rollups(&k, Tier::Hour)[0].count, 2);
    }

    #[test]
    fn series_limit() {
        let db = Tsdb::in_memory(RetentionPolicy::default(), 2).unwrap();
        db.append_point(&key("a"), NOW, 1.0, NOW).unwrap();
        db.append_point(&key("b"), NOW, 1.0, NOW).unwrap();
        assert!(matches!(db.append_point(&key("c"), NOW, 1.0, NOW), Err(TsdbError::StorageFull(2))));
        db.append_point(&key("a"), NOW + 1, 1.0, NOW).unwrap();
    }

    #[test]
    fn policy_validation() {
        let bad = RetentionPolicy {
            raw_ms: DAY_MS,
            rollup_1m_ms: DAY_MS,
            rollup_1h_ms: 2 * DAY_MS,
        };
        assert!(Tsdb::in_memory(bad, 10).is_err());
    }

    #[test]
    fn reopen_replays_segments_and_frames() {
        let dir = tempfile::tempdir().unwrap();
        let k = key("g");
        let base = align_down(NOW, BLOCK_MS);
        {
            let db = Tsdb::open(dir.path(), RetentionPolicy::default(), 100).unwrap();
            for i in 0..10 {
                db.append_point(&k, base + i * 1000, i as f64, base).unwrap();
            }
            db.append_point(&k, base + 5 * HOUR_MS, 7.0, base).unwrap();
            db.distill_series(&k, base + 2 * HOUR_MS).unwrap();
            db.enforce_retention(base + 26 * HOUR_MS).unwrap();
        }
        let db = Tsdb::open(dir.path(), RetentionPolicy::default(), 100).unwrap();
        assert_eq!(db.raw_points(&k, 0, i64::MAX), vec![(base + 5 * HOUR_MS, 7.0)]);
        let m = db.rollups(&k, Tier::Minute);
        assert_eq!((m[0].count, m[0].sum), (10, 45.0));
        assert_eq!(db.watermarks(&k).unwrap().distilled_until, base + 2 * HOUR_MS);
        // first block file was deleted once every series in it was cleared
        let names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.starts_with("seg-"))
            .collect();
        assert_eq!(names.len(), 1);
        // new series keep unique ids after replay
        db.append_point(&key("h"), base + 5 * HOUR_MS, 1.0, base + 5 * HOUR_MS).unwrap();
        drop(db);
        let db = Tsdb::open(dir.path(), RetentionPolicy::default(), 100).unwrap();
        assert_eq!(db.raw_points(&key("h"), 0, i64::MAX).len(), 1);
        assert_eq!(db.raw_points(&k, 0, i64::MAX).len(), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn points() -> impl Strategy<Value = Vec<(i64, i64)>> {
            prop::collection::vec((0i64..3 * HOUR_MS, -1_000i64..1_000), 1..400)
        }

        proptest! {
            #[test]
            fn distill_conserves_totals(pts in points()) {
                let db = db();
                let k = key("g");
                let base = align_down(NOW, HOUR_MS);
                let mut raw: BTreeMap<i64, f64> = BTreeMap::new();
                for (t, v) in &pts {
                    db.append_point(&k, base + t, *v as f64, base).unwrap();
                    raw.entry(base + t).or_insert(*v as f64);
                }
                db.distill_series(&k, base + 3 * HOUR_MS).unwrap();
                let minute = db.rollups(&k, Tier::Minute);
                let count: u64 = minute.iter().map(|r| r.count).sum();
                let sum: f64 = minute.iter().map(|r| r.sum).sum();
                prop_assert_eq!(count as usize, raw.len());
                prop_assert_eq!(sum, raw.values().sum::<f64>());
                let min = minute.iter().map(|r| r.min).fold(f64::INFINITY, f64::min);
                let max = minute.iter().map(|r| r.max).fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(min, raw.values().copied().fold(f64::INFINITY, f64::min));
                prop_assert_eq!(max, raw.values().copied().fold(f64::NEG_INFINITY, f64::max));

                let raw_pts: Vec<(i64, f64)> = raw.iter().map(|(t, v)| (*t, *v)).collect();
                let hour_from_raw = downsample(&raw_pts, HOUR_MS, base, base + 3 * HOUR_MS).unwrap();
                prop_assert_eq!(db.rollups(&k, Tier::Hour), hour_from_raw);
            }

            #[test]
            fn appended_points_come_back(pts in points()) {
                let db = db();
                let k = key("g");
                let mut first: BTreeMap<i64, f64> = BTreeMap::new();
                for (t, v) in &pts {
                    db.append_point(&k, NOW + t, *v as f64, NOW).unwrap();
                    first.entry(NOW + t).or_insert(*v as f64);
                }
                let res = db.query_range(&Selector::metric("g"), NOW, NOW + 3 * HOUR_MS, 1, Aggregation::Raw).unwrap();
                let expected: Vec<(i64, f64)> = first.into_iter().collect();
                prop_assert_eq!(&res[0].points, &expected);
            }
        }
    }
}
