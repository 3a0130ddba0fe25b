//! Restart-on-crash supervision of component processes.

use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;
use std::process::{Child, Command};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use thiserror::Error;

pub const MAX_RESTARTS: usize = 5;
pub const RESTART_WINDOW: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum SupervisorError {
    #[error("cannot start `{name}`: {source}")]
    Spawn {
        name: String,
        #[source]
        source: std::io::Error,
    },
    #[error("`{name}` crashed more than {max} times within {window:?}; giving up")]
    GaveUp { name: String, max: usize, window: Duration },
}

/// Sliding-window restart limit.
#[derive(Debug)]
pub struct RestartBudget {
    max: usize,
    window: Duration,
    recent: VecDeque<Instant>,
}

impl RestartBudget {
    pub fn new(max: usize, window: Duration) -> Self {
        RestartBudget {
            max,
            window,
            recent: VecDeque::new(),
        }
    }

    /// Records a restart at `now` if the window still has room.
    pub fn try_restart(&mut self, now: Instant) -> bool {
        while self.recent.front().is_some_and(|&t| now.duration_since(t) >= self.window) {
            self.recent.pop_front();
        }
        if self.recent.len() >= self.max {
            return false;
        }
        self.recent.push_back(now);
        true
    }
}

#[derive(Debug, Clone)]
pub struct ChildSpec {
    pub name: String,
    pub program: PathBuf,
    pub args: Vec<String>,
    /// Passed through the environment so secrets stay off the command line.
    pub env: BTreeMap<String, String>,
}

impl ChildSpec {
    fn spawn(&self) -> Result<Child, SupervisorError> {
        Command::new(&self.program)
            .args(&self.args)
            .envs(&self.env)
            .spawn()
            .map_err(|source| SupervisorError::Spawn {
                name: self.name.clone(),
                source,
            })
    }
}

struct Running {
    spec: ChildSpec,
    child: Child,
    budget: RestartBudget,
}

#[cfg(unix)]
fn terminate(child: &mut Child) {
    // SAFETY: kill(2) with a pid we spawned and still own.
    unsafe {
        libc::kill(child.id() as libc::pid_t, libc::SIGTERM);
    }
}

#[cfg(not(unix))]
fn terminate(child: &mut Child) {
    let _ = child.kill();
}

/// Stops children in reverse start order, escalating to a hard kill after
/// `grace`.
fn stop_all(running: &mut [Running], grace: Duration) {
    for r in running.iter_mut().rev() {
        if matches!(r.child.try_wait(), Ok(None)) {
            terminate(&mut r.child);
        }
    }
    let deadline = Instant::now() + grace;
    for r in running.iter_mut().rev() {
        loop {
            match r.child.try_wait() {
                Ok(Some(_)) | Err(_) => break,
                Ok(None) if Instant::now() >= deadline => {
                    let _ = r.child.kill();
                    let _ = r.child.wait();
                    break;
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(20)),
            }
        }
    }
}

/// Starts `specs` in order and restarts any that exit, within the restart
/// budget. Returns once `stop` is set (after stopping the children) or when
/// a child exhausts its budget.
pub fn supervise(specs: Vec<ChildSpec>, stop: &AtomicBool, poll: Duration, budget: (usize, Duration)) -> Result<(), SupervisorError> {
    let mut running: Vec<Running> = Vec::new();
    for spec in specs {
        match spec.spawn() {
            Ok(child) => {
                tracing::info!(name = %spec.name, pid = child.id(), "started");
                running.push(Running {
                    spec,
                    child,
                    budget: RestartBudget::new(budget.0, budget.1),
                });
                // give the process a moment to bind before dependents start
                std::thread::sleep(poll);
            }
            Err(e) => {
                stop_all(&mut running, Duration::from_secs(5));
                return Err(e);
            }
        }
    }
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(poll);
        for i in 0..running.len() {
            let r = &mut running[i];
            let status = match r.child.try_wait() {
                Ok(Some(s)) => s.to_string(),
                Ok(None) => continue,
                Err(e) => e.to_string(),
            };
            if stop.load(Ordering::SeqCst) {
                break;
            }
            tracing::warn!(name = %r.spec.name, %status, "component exited");
            if !r.budget.try_restart(Instant::now()) {
                let err = SupervisorError::GaveUp {
                    name: r.spec.name.clone(),
                    max: budget.0,
                    window: budget.1,
                };
                stop_all(&mut running, Duration::from_secs(5));
                return Err(err);
            }
            match r.spec.spawn() {
                Ok(child) => {
                    tracing::info!(name = %r.spec.name, pid = child.id(), "restarted");
                    r.child = child;
                }
                Err(e) => {
                    stop_all(&mut running, Duration::from_secs(5));
                    return Err(e);
                }
            }
        }
    }
    stop_all(&mut running, Duration::from_secs(5));
    Ok(())
}
