//! FIFO job dispatch under a hard concurrency cap with a bounded backlog.
//!
//! The legacy behavior this replaces processed requests strictly
//! sequentially and started losing them around twenty simultaneous
//! submissions. Here overload is an explicit, audited rejection: the
//! backlog is bounded, overflow receipts are marked Rejected, and nothing
//! is ever dropped silently. Every enqueued receipt ends in exactly one of
//! succeeded, failed, or rejected.

use std::collections::VecDeque;
use std::sync::Mutex;

use thiserror::Error;

pub const DEFAULT_MAX_CONCURRENT: usize = 20;
pub const DEFAULT_BACKLOG_BOUND: usize = 200;

#[derive(Debug, Clone, Copy)]
pub struct SchedulerConfig {
    pub max_concurrent: usize,
    pub backlog_bound: usize,
}

impl Default for SchedulerConfig {
    fn default() -> SchedulerConfig {
        SchedulerConfig {
            max_concurrent: DEFAULT_MAX_CONCURRENT,
            backlog_bound: DEFAULT_BACKLOG_BOUND,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobState {
    Pending,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobOutcome {
    Success,
    Failure,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("unknown job: {0}")]
    UnknownJob(String),
    #[error("job not running: {0}")]
    NotRunning(String),
}

/// Per-batch enqueue outcome: which receipts were accepted and which were
/// rejected for overflow. Rejections are the caller's to audit and mark.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct EnqueueOutcome {
    pub accepted: Vec<String>,
    pub rejected: Vec<String>,
}

struct SchedulerState {
    pending: VecDeque<String>,
    running: Vec<String>,
    done: Vec<(String, JobOutcome)>,
}

pub struct Scheduler {
    config: SchedulerConfig,
    state: Mutex<SchedulerState>,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig) -> Scheduler {
        assert!(config.max_concurrent >= 1 && config.backlog_bound >= 1);
        Scheduler {
            config,
            state: Mutex::new(SchedulerState {
                pending: VecDeque::new(),
                running: Vec::new(),
                done: Vec::new(),
            }),
        }
    }

    pub fn config(&self) -> SchedulerConfig {
        self.config
    }

    /// Append a collated batch FIFO, up to the backlog bound. Overflow is
    /// returned in `rejected`, never discarded.
    pub fn enqueue_batch(&self, batch: Vec<String>) -> EnqueueOutcome {
        let mut state = self.state.lock().unwrap();
        let mut outcome = EnqueueOutcome::default();
        for receipt_id in batch {
            if state.pending.len() < self.config.backlog_bound {
                state.pending.push_back(receipt_id.clone());
                outcome.accepted.push(receipt_id);
            } else {
                outcome.rejected.push(receipt_id);
            }
        }
        outcome
    }

    /// Move jobs Pending -> Running until the concurrency cap is reached,
    /// preserving FIFO order. Returns the receipts that just started.
    pub fn next_dispatch(&self) -> Vec<String> {
        let mut state = self.state.lock().unwrap();
        let mut started = Vec::new();
        while state.running.len() < self.config.max_concurrent {
            match state.pending.pop_front() {
                Some(id) => {
                    state.running.push(id.clone());
                    started.push(id);
                }
                None => break,
            }
        }
        started
    }

    /// Record a running job's outcome and free its slot.
    pub fn complete_job(&self, receipt_id: &str, outcome: JobOutcome) -> Result<(), SchedulerError> {
        let mut state = self.state.lock().unwrap();
        match state.running.iter().position(|id| id == receipt_id) {
            Some(idx) => {
                state.running.remove(idx);
                state.done.push((receipt_id.to_string(), outcome));
                Ok(())
            }
            None => {
                if state.pending.contains(&receipt_id.to_string())
                    || state.done.iter().any(|(id, _)| id == receipt_id)
                {
                    Err(SchedulerError::NotRunning(receipt_id.to_string()))
                } else {
                    Err(SchedulerError::UnknownJob(receipt_id.to_string()))
                }
            }
        }
    }

    pub fn running_count(&self) -> usize {
        self.state.lock().unwrap().running.len()
    }

    pub fn pending_count(&self) -> usize {
        self.state.lock().unwrap().pending.len()
    }

    pub fn completed(&self) -> Vec<(String, JobOutcome)> {
        self.state.lock().unwrap().done.clone()
    }
}
