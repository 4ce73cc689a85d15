//! Apache-prefork style application servers under a processor-sharing fluid
//! model.
//!
//! Every in-service job progresses at `min(1, n_cpu / busy)` core-seconds per
//! second. Completions are computed analytically between events, so the
//! simulation is exact up to floating point.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;

pub const DEFAULT_MAX_WORKERS: usize = 32;
pub const DEFAULT_BACKLOG: usize = 128;

/// Remaining work below this is treated as finished.
const WORK_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerSpec {
    pub dip: u32,
    pub n_cpu: u32,
    pub max_workers: usize,
    pub backlog: usize,
}

impl ServerSpec {
    pub fn new(dip: u32, n_cpu: u32) -> Self {
        assert!(n_cpu >= 1, "a server needs at least one cpu");
        ServerSpec { dip, n_cpu, max_workers: DEFAULT_MAX_WORKERS, backlog: DEFAULT_BACKLOG }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid server group `{group}`: {reason}")]
pub struct GroupParseError {
    pub group: String,
    pub reason: String,
}

/// Parses a compact server group string such as `"36x2,24x4"` (36 two-CPU
/// servers followed by 24 four-CPU servers). DIPs are numbered from 0 in
/// order of appearance.
pub fn parse_server_groups(spec: &str) -> Result<Vec<ServerSpec>, GroupParseError> {
    let mut out = Vec::new();
    for group in spec.split(',').map(str::trim).filter(|g| !g.is_empty()) {
        let err = |reason: &str| GroupParseError { group: group.to_string(), reason: reason.to_string() };
        let (count, cpus) = group.split_once(['x', 'X']).ok_or_else(|| err("expected <count>x<cpus>"))?;
        let count: u32 = count.trim().parse().map_err(|_| err("bad server count"))?;
        let cpus: u32 = cpus.trim().parse().map_err(|_| err("bad cpu count"))?;
        if count == 0 || cpus == 0 {
            return Err(err("count and cpus must be positive"));
        }
        for _ in 0..count {
            out.push(ServerSpec::new(out.len() as u32, cpus));
        }
    }
    if out.is_empty() {
        return Err(GroupParseError { group: spec.to_string(), reason: "no servers".into() });
    }
    Ok(out)
}

pub fn format_server_groups(servers: &[ServerSpec]) -> String {
    let mut groups: Vec<(u32, u32)> = Vec::new();
    for s in servers {
        match groups.last_mut() {
            Some((n, c)) if *c == s.n_cpu => *n += 1,
            _ => groups.push((1, s.n_cpu)),
        }
    }
    groups.iter().map(|(n, c)| format!("{n}x{c}")).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Job {
    pub flow_id: u64,
    pub remaining: f64,
    pub submitted: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubmitOutcome {
    Admitted,
    Queued,
    /// Backlog full; the connection is reset.
    RstOverflow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompletionEvent {
    pub dip: u32,
    pub flow_id: u64,
    /// Time the response leaves the server.
    pub time: f64,
    pub submitted: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub dip: u32,
    pub time: f64,
    pub n_cpu: u32,
    pub cpu_usage: f64,
    pub busy_threads: u32,
}

/// Time integrals accumulated while the server clock advances.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Integrals {
    pub busy_seconds: f64,
    pub cpu_seconds: f64,
    pub occupancy_seconds: f64,
    pub work_done: f64,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    spec: ServerSpec,
    busy: Vec<Job>,
    queue: VecDeque<Job>,
    clock: f64,
    integrals: Integrals,
    resets: u64,
}

impl ServerState {
    pub fn new(spec: ServerSpec) -> Self {
        ServerState {
            busy: Vec::with_capacity(spec.max_workers),
            queue: VecDeque::with_capacity(spec.backlog),
            clock: 0.0,
            integrals: Integrals::default(),
            resets: 0,
            spec,
        }
    }

    pub fn spec(&self) -> &ServerSpec {
        &self.spec
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn busy_threads(&self) -> usize {
        self.busy.len()
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn busy_jobs(&self) -> &[Job] {
        &self.busy
    }

    pub fn integrals(&self) -> Integrals {
        self.integrals
    }

    pub fn resets(&self) -> u64 {
        self.resets
    }

    /// Per-job service rate in core-seconds per second.
    fn rate(&self) -> f64 {
        if self.busy.is_empty() {
            0.0
        } else {
            (self.spec.n_cpu as f64 / self.busy.len() as f64).min(1.0)
        }
    }

    /// Offers a job to the server at `now`. The caller must have advanced the
    /// server to `now` first so in-flight work is accounted correctly.
    pub fn submit(&mut self, job_id: u64, work: f64, now: f64) -> SubmitOutcome {
        debug_assert!(now + 1e-12 >= self.clock, "submit at {now} before clock {}", self.clock);
        debug_assert!(work > 0.0);
        let job = Job { flow_id: job_id, remaining: work, submitted: now };
        if self.busy.len() < self.spec.max_workers {
            self.busy.push(job);
            SubmitOutcome::Admitted
        } else if self.queue.len() < self.spec.backlog {
            self.queue.push_back(job);
            SubmitOutcome::Queued
        } else {
            self.resets += 1;
            SubmitOutcome::RstOverflow
        }
    }

    /// Earliest time a busy job will finish, if any.
    pub fn next_completion_time(&self) -> Option<f64> {
        let min = self.busy.iter().map(|j| j.remaining).min_by(f64::total_cmp)?;
        Some(self.clock + min / self.rate())
    }

    /// Runs the fluid model forward to `until`, returning completions in time
    /// order.
    pub fn advance(&mut self, until: f64) -> Vec<CompletionEvent> {
        let mut done = Vec::new();
        self.advance_into(until, &mut done);
        done
    }

    pub fn advance_into(&mut self, until: f64, done: &mut Vec<CompletionEvent>) {
        debug_assert!(until + 1e-12 >= self.clock, "advance to {until} before clock {}", self.clock);
        while self.clock < until {
            if self.busy.is_empty() {
                self.clock = until;
                break;
            }
            let rate = self.rate();
            let (argmin, min_rem) =
                self.busy.iter().map(|j| j.remaining).enumerate().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
            let to_next = min_rem / rate;
            let finishing = self.clock + to_next <= until;
            let dt = if finishing { to_next } else { until - self.clock };
            self.accumulate(dt, rate);
            let progress = dt * rate;
            for job in &mut self.busy {
                job.remaining -= progress;
            }
            self.clock = if finishing { self.clock + to_next } else { until };
            if finishing {
                self.busy[argmin].remaining = 0.0;
                let now = self.clock;
                let dip = self.spec.dip;
                let mut i = 0;
                while i < self.busy.len() {
                    if self.busy[i].remaining <= WORK_EPSILON {
                        let job = self.busy.remove(i);
                        done.push(CompletionEvent { dip, flow_id: job.flow_id, time: now, submitted: job.submitted });
                    } else {
                        i += 1;
                    }
                }
                while self.busy.len() < self.spec.max_workers {
                    match self.queue.pop_front() {
                        Some(job) => self.busy.push(job),
                        None => break,
                    }
                }
            }
        }
    }

    fn accumulate(&mut self, dt: f64, rate: f64) {
        let busy = self.busy.len() as f64;
        let n_cpu = self.spec.n_cpu as f64;
        self.integrals.busy_seconds += busy * dt;
        self.integrals.cpu_seconds += busy.min(n_cpu) / n_cpu * dt;
        self.integrals.occupancy_seconds += (busy + self.queue.len() as f64) * dt;
        self.integrals.work_done += busy * rate * dt;
    }

    pub fn ground_truth(&self, now: f64) -> GroundTruth {
        debug_assert!((now - self.clock).abs() < 1e-9, "ground truth at {now}, clock {}", self.clock);
        let busy = self.busy.len() as u32;
        GroundTruth {
            dip: self.spec.dip,
            time: now,
            n_cpu: self.spec.n_cpu,
            cpu_usage: busy.min(self.spec.n_cpu) as f64 / self.spec.n_cpu as f64,
            busy_threads: busy,
        }
    }
}

impl fmt::Display for SubmitOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubmitOutcome::Admitted => "admitted",
            SubmitOutcome::Queued => "queued",
            SubmitOutcome::RstOverflow => "rst-overflow",
        })
    }
}
