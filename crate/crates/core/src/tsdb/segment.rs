//! On-disk layout.
//!
//! ```text
//! <dir>/series.dict              one `<id>\t<series key>` line per series
//! <dir>/meta.log                 JSON lines: distill, late-merge and clear frames
//! <dir>/seg-<shard>-<block>.bin  24-byte little-endian records per raw point:
//!                                series id (u64) | timestamp ms (i64) | value (f64)
//! ```
//!
//! Blocks are 2 h wide and named by their aligned start. A torn trailing
//! record or frame (crash mid-write) is ignored on replay.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::rollup::RollupPoint;
use super::TsdbError;
use crate::clock::HOUR_MS;

pub const RECORD_LEN: usize = 24;
pub const BLOCK_MS: i64 = 2 * HOUR_MS;

pub fn encode_record(series_id: u64, timestamp: i64, value: f64) -> [u8; RECORD_LEN] {
    let mut buf = [0u8; RECORD_LEN];
    buf[0..8].copy_from_slice(&series_id.to_le_bytes());
    buf[8..16].copy_from_slice(&timestamp.to_le_bytes());
    buf[16..24].copy_from_slice(&value.to_le_bytes());
    buf
}

/// Decodes whole records, silently ignoring a partial trailing record.
pub fn decode_records(bytes: &[u8]) -> impl Iterator<Item = (u64, i64, f64)> + '_ {
    bytes.chunks_exact(RECORD_LEN).map(|r| {
        let id = u64::from_le_bytes(r[0..8].try_into().unwrap());
        let ts = i64::from_le_bytes(r[8..16].try_into().unwrap());
        let v = f64::from_le_bytes(r[16..24].try_into().unwrap());
        (id, ts, v)
    })
}

pub fn segment_file_name(shard: usize, block: i64) -> String {
    format!("seg-{shard:03}-{block}.bin")
}

pub fn parse_segment_file_name(name: &str) -> Option<(usize, i64)> {
    let rest = name.strip_prefix("seg-")?.strip_suffix(".bin")?;
    let (shard, block) = rest.split_once('-')?;
    Some((shard.parse().ok()?, block.parse().ok()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Raw,
    Minute,
    Hour,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "frame", rename_all = "snake_case")]
pub enum MetaFrame {
    /// Raw points of `id` below `until` were folded into `rollups` (1 m).
    Distill { id: u64, until: i64, rollups: Vec<RollupPoint> },
    /// A point appended below the distill watermark, merged into the rollups.
    Late { id: u64, ts: i64, value: f64 },
    /// Everything of `tier` below `before` was deleted.
    Clear { id: u64, tier: Tier, before: i64 },
}

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> TsdbError {
    TsdbError::Io(format!("{}: {e}", path.display()))
}

fn open_append(path: &Path) -> Result<BufWriter<File>, TsdbError> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map(BufWriter::new)
        .map_err(|e| io_err(path, e))
}

/// Line-oriented logs get a newline after a torn tail; segment files get
/// the partial record cut off so later records stay aligned.
fn open_log(path: &Path) -> Result<BufWriter<File>, TsdbError> {
    let mut w = open_append(path)?;
    crate::metastore::terminate_torn_line(path, &mut w).map_err(|e| io_err(path, e))?;
    Ok(w)
}

fn open_segment(path: &Path) -> Result<BufWriter<File>, TsdbError> {
    if let Ok(meta) = fs::metadata(path) {
        let whole = meta.len() - meta.len() % RECORD_LEN as u64;
        if whole != meta.len() {
            let f = OpenOptions::new().write(true).open(path).map_err(|e| io_err(path, e))?;
            f.set_len(whole).map_err(|e| io_err(path, e))?;
        }
    }
    open_append(path)
}

/// Append-only writers for one directory.
#[derive(Debug)]
pub struct SegmentDir {
    dir: PathBuf,
    dict: BufWriter<File>,
    meta: BufWriter<File>,
}

impl SegmentDir {
    pub fn open(dir: &Path) -> Result<Self, TsdbError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(SegmentDir {
            dir: dir.to_path_buf(),
            dict: open_log(&dir.join("series.dict"))?,
            meta: open_log(&dir.join("meta.log"))?,
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn write_series(&mut self, id: u64, key: &str) -> Result<(), TsdbError> {
        writeln!(self.dict, "{id}\t{key}").map_err(|e| io_err(&self.dir, e))?;
        self.dict.flush().map_err(|e| io_err(&self.dir, e))
    }

    /// Appends a frame and syncs it; frames are rare and must survive a crash
    /// before the step they record is acted upon.
    pub fn write_frame(&mut self, frame: &MetaFrame) -> Result<(), TsdbError> {
        let line = serde_json::to_string(frame).map_err(|e| TsdbError::Io(e.to_string()))?;
        writeln!(self.meta, "{line}").map_err(|e| io_err(&self.dir, e))?;
        self.meta.flush().map_err(|e| io_err(&self.dir, e))?;
        self.meta.get_ref().sync_data().map_err(|e| io_err(&self.dir, e))
    }

    pub fn read_dict(dir: &Path) -> Result<Vec<(u64, String)>, TsdbError> {
        let path = dir.join("series.dict");
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&path, e)),
        };
        Ok(text
            .lines()
            .filter_map(|l| {
                let (id, key) = l.split_once('\t')?;
                Some((id.parse().ok()?, key.to_string()))
            })
            .collect())
    }

    pub fn read_frames(dir: &Path) -> Result<Vec<MetaFrame>, TsdbError> {
        let path = dir.join("meta.log");
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&path, e)),
        };
        let mut frames = Vec::new();
        for line in text.lines() {
            match serde_json::from_str(line) {
                Ok(f) => frames.push(f),
                Err(e) => tracing::warn!(error = %e, "ignoring torn meta frame"),
            }
        }
        Ok(frames)
    }

    /// Segment files present on disk, sorted by (shard, block).
    pub fn list_segments(dir: &Path) -> Result<Vec<(usize, i64, PathBuf)>, TsdbError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
            let entry = entry.map_err(|e| io_err(dir, e))?;
            if let Some((shard, block)) = entry.file_name().to_str().and_then(parse_segment_file_name) {
                out.push((shard, block, entry.path()));
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Open segment writers of one shard, keyed by block start.
#[derive(Debug, Default)]
pub struct ShardWriters {
    writers: HashMap<i64, BufWriter<File>>,
}

impl ShardWriters {
    pub fn append(&mut self, dir: &Path, shard: usize, block: i64, record: &[u8; RECORD_LEN]) -> Result<(), TsdbError> {
        let w = match self.writers.entry(block) {
            std::collections::hash_map::Entry::Occupied(o) => o.into_mut(),
            std::collections::hash_map::Entry::Vacant(v) => {
                v.insert(open_segment(&dir.join(segment_file_name(shard, block)))?)
            }
        };
        w.write_all(record).map_err(|e| io_err(dir, e))
    }

    pub fn flush(&mut self) -> Result<(), TsdbError> {
        for w in self.writers.values_mut() {
            w.flush().map_err(|e| TsdbError::Io(e.to_string()))?;
        }
        Ok(())
    }

    /// Closes and deletes the file for `block`.
    pub fn remove(&mut self, dir: &Path, shard: usize, block: i64) -> Result<(), TsdbError> {
        self.writers.remove(&block);
        let path = dir.join(segment_file_name(shard, block));
        match fs::remove_file(&path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(io_err(&path, e)),
        }
    }
}
