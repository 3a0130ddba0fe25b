use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sysinfo::{Pid, ProcessRefreshKind, ProcessesToUpdate, System};

use super::CollectorError;

/// One reading of host and process resources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSnapshot {
    /// Sum of per-core utilisation, in `[0, cores]`.
    pub cpu_utilization: f64,
    pub cores: u32,
    pub memory_used: f64,
    pub memory_total: f64,
    /// Cumulative CPU seconds of the observed process.
    pub process_cpu_seconds: f64,
    pub timestamp: i64,
}

impl ResourceSnapshot {
    pub fn validate(&self) -> Result<(), CollectorError> {
        let bad = |why: &str| Err(CollectorError::InvalidSnapshot(why.to_string()));
        if self.cores == 0 {
            return bad("zero cores");
        }
        if !(self.cpu_utilization >= 0.0 && self.cpu_utilization <= self.cores as f64 + 1e-9) {
            return bad("cpu utilization outside [0, cores]");
        }
        if !(self.memory_used >= 0.0 && self.memory_used <= self.memory_total) {
            return bad("memory_used exceeds memory_total");
        }
        if !self.process_cpu_seconds.is_finite() || self.process_cpu_seconds < 0.0 {
            return bad("negative process cpu seconds");
        }
        if self.timestamp <= 0 {
            return bad("non-positive timestamp");
        }
        Ok(())
    }

    /// Host utilisation normalised to `[0, 1]`.
    pub fn normalized_utilization(&self) -> f64 {
        self.cpu_utilization / self.cores as f64
    }
}

/// Source of resource snapshots; abstracts the operating system.
pub trait SnapshotProvider: Send {
    fn snapshot(&mut self) -> Result<ResourceSnapshot, CollectorError>;
}

/// Replays recorded snapshots in order, failing once exhausted.
#[derive(Debug, Default)]
pub struct ReplayProvider {
    queue: VecDeque<Result<ResourceSnapshot, String>>,
}

impl ReplayProvider {
    pub fn new(snapshots: impl IntoIterator<Item = ResourceSnapshot>) -> Self {
        ReplayProvider {
            queue: snapshots.into_iter().map(Ok).collect(),
        }
    }

    /// Queues an injected provider failure.
    pub fn push_failure(&mut self, reason: impl Into<String>) {
        self.queue.push_back(Err(reason.into()));
    }

    pub fn push(&mut self, snapshot: ResourceSnapshot) {
        self.queue.push_back(Ok(snapshot));
    }

    /// Loads a JSON-lines file, one [`ResourceSnapshot`] per line.
    pub fn from_file(path: &Path) -> Result<Self, CollectorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CollectorError::SourceUnavailable(format!("{}: {e}", path.display())))?;
        let mut snapshots = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let snap: ResourceSnapshot = serde_json::from_str(line).map_err(|e| {
                CollectorError::SourceUnavailable(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            snapshots.push(snap);
        }
        Ok(Self::new(snapshots))
    }

    pub fn remaining(&self) -> usize {
        self.queue.len()
    }
}

impl SnapshotProvider for ReplayProvider {
    fn snapshot(&mut self) -> Result<ResourceSnapshot, CollectorError> {
        match self.queue.pop_front() {
            Some(Ok(s)) => Ok(s),
            Some(Err(reason)) => Err(CollectorError::SourceUnavailable(reason)),
            None => Err(CollectorError::SourceUnavailable("replay exhausted".into())),
        }
    }
}

/// Live provider backed by the operating system.
pub struct SystemProvider {
    system: System,
    pid: Pid,
}

impl SystemProvider {
    /// Observes process `pid`, or the current process when `None`.
    pub fn new(pid: Option<u32>) -> Result<Self, CollectorError> {
        let pid = match pid {
            Some(p) => Pid::from_u32(p),
            None => sysinfo::get_current_pid().map_err(|e| CollectorError::SourceUnavailable(e.to_string()))?,
        };
        let mut system = System::new();
        system.refresh_cpu_usage();
        Ok(SystemProvider { system, pid })
    }
}

impl SnapshotProvider for SystemProvider {
    fn snapshot(&mut self) -> Result<ResourceSnapshot, CollectorError> {
        self.system.refresh_cpu_usage();
        self.system.refresh_memory();
        self.system.refresh_processes_specifics(
            ProcessesToUpdate::Some(&[self.pid]),
            true,
            ProcessRefreshKind::nothing().with_cpu(),
        );
        let cores = self.system.cpus().len().max(1) as u32;
        let per_core: f64 = self.system.cpus().iter().map(|c| c.cpu_usage() as f64 / 100.0).sum();
        let process = self
            .system
            .process(self.pid)
            .ok_or_else(|| CollectorError::SourceUnavailable(format!("process {} not found", self.pid)))?;
        let total = self.system.total_memory() as f64;
        let snapshot = ResourceSnapshot {
            cpu_utilization: per_core.clamp(0.0, cores as f64),
            cores,
            memory_used: (self.system.used_memory() as f64).min(total),
            memory_total: total,
            process_cpu_seconds: process.accumulated_cpu_time() as f64 / 1000.0,
            timestamp: crate::clock::now_ms(),
        };
        snapshot.validate()?;
        Ok(snapshot)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(cpu: f64) -> ResourceSnapshot {
        ResourceSnapshot {
            cpu_utilization: cpu,
            cores: 4,
            memory_used: 1e9,
            memory_total: 4e9,
            process_cpu_seconds: 1.0,
            timestamp: 1000,
        }
    }

    #[test]
    fn replay_yields_in_order_then_fails() {
        let mut p = ReplayProvider::new([snap(0.1), snap(0.2)]);
        p.push_failure("disk gone");
        assert_eq!(p.snapshot().unwrap().cpu_utilization, 0.1);
        assert_eq!(p.snapshot().unwrap().cpu_utilization, 0.2);
        assert!(matches!(p.snapshot(), Err(CollectorError::SourceUnavailable(_))));
        assert!(matches!(p.snapshot(), Err(CollectorError::SourceUnavailable(_))));
    }

    #[test]
    fn replay_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snaps.jsonl");
        let lines: Vec<String> = [snap(0.5), snap(1.5)].iter().map(|s| serde_json::to_string(s).unwrap()).collect();
        std::fs::write(&path, lines.join("\n")).unwrap();
        let mut p = ReplayProvider::from_file(&path).unwrap();
        assert_eq!(p.remaining(), 2);
        assert_eq!(p.snapshot().unwrap(), snap(0.5));
    }

    #[test]
    fn snapshot_validation() {
        assert!(snap(0.5).validate().is_ok());
        assert!(snap(4.5).validate().is_err());
        let mut s = snap(0.5);
        s.memory_used = 5e9;
        assert!(s.validate().is_err());
        assert_eq!(snap(2.0).normalized_utilization(), 0.5);
    }

    #[test]
    fn system_provider_reads_something() {
        let mut p = SystemProvider::new(None).unwrap();
        let s = p.snapshot().unwrap();
        assert!(s.cores >= 1);
        assert!(s.memory_total > 0.0);
    }
}
