//! The shared edge server: a FIFO request queue drained by dynamic batching,
//! non-preemptive batch execution, and server-model swaps applied at batch
//! boundaries.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DeviceId, ServerModelProfile, ALLOWED_BATCHES};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Request {
    pub device: DeviceId,
    /// Index into the device's trace.
    pub sample_index: usize,
    pub enqueue_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchJob {
    pub items: Vec<Request>,
    pub batch_size: u32,
    /// Catalog index of the model that processes this batch.
    pub model: usize,
    pub start_ms: f64,
    pub finish_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchRecord {
    pub time_ms: f64,
    pub from: String,
    pub to: String,
}

/// Largest allowed batch not exceeding the queue or the model's cap.
pub fn select_batch(queue_len: usize, model: &ServerModelProfile) -> Option<u32> {
    let cap = (queue_len as u64).min(model.max_batch as u64);
    ALLOWED_BATCHES.iter().copied().filter(|&b| b as u64 <= cap).max()
}

#[derive(Debug, Clone, PartialEq)]
enum Activity {
    Idle,
    Batch(BatchJob),
    Swapping { target: usize, until_ms: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SwapOutcome {
    /// Swapped now; `ready_at` is when the server can dispatch again.
    Applied { ready_at: f64 },
    /// Will apply when the running batch completes.
    Pending,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerSettings {
    pub swap_delay_ms: f64,
    pub cooldown_ms: f64,
    pub history_len: usize,
}

#[derive(Debug)]
pub struct ServerState {
    catalog: Vec<ServerModelProfile>,
    deployed: usize,
    queue: VecDeque<Request>,
    activity: Activity,
    pending_swap: Option<usize>,
    last_switch_ms: Option<f64>,
    recent_batches: VecDeque<u32>,
    settings: ServerSettings,
    switches: Vec<SwitchRecord>,
    served: u64,
}

impl ServerState {
    pub fn new(catalog: Vec<ServerModelProfile>, deployed: &str, settings: ServerSettings) -> Result<Self> {
        let deployed = catalog
            .iter()
            .position(|m| m.model_id == deployed)
            .ok_or_else(|| Error::Config(format!("deployed model {deployed} is not in the catalog")))?;
        Ok(Self {
            catalog,
            deployed,
            queue: VecDeque::new(),
            activity: Activity::Idle,
            pending_swap: None,
            last_switch_ms: None,
            recent_batches: VecDeque::new(),
            settings,
            switches: Vec::new(),
            served: 0,
        })
    }

    pub fn catalog(&self) -> &[ServerModelProfile] {
        &self.catalog
    }

    pub fn deployed(&self) -> &ServerModelProfile {
        &self.catalog[self.deployed]
    }

    pub fn deployed_index(&self) -> usize {
        self.deployed
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_busy(&self) -> bool {
        !matches!(self.activity, Activity::Idle)
    }

    pub fn recent_batches(&self) -> impl ExactSizeIterator<Item = u32> + Clone + '_ {
        self.recent_batches.iter().copied()
    }

    pub fn switches(&self) -> &[SwitchRecord] {
        &self.switches
    }

    pub fn served(&self) -> u64 {
        self.served
    }

    pub fn enqueue(&mut self, req: Request) {
        self.queue.push_back(req);
    }

    /// Starts a batch if idle and work is queued; returns its finish time.
    pub fn dispatch(&mut self, now: f64) -> Option<f64> {
        if self.is_busy() {
            return None;
        }
        let model = &self.catalog[self.deployed];
        let b = select_batch(self.queue.len(), model)?;
        let items: Vec<Request> = self.queue.drain(..b as usize).collect();
        let finish_ms = now + model.batch_latency_ms(b);
        self.activity = Activity::Batch(BatchJob {
            items,
            batch_size: b,
            model: self.deployed,
            start_ms: now,
            finish_ms,
        });
        Some(finish_ms)
    }

    /// Finishes the running batch and applies any pending swap. The caller
    /// fans out results, then calls [`dispatch`](Self::dispatch) unless the
    /// returned swap keeps the server busy.
    pub fn complete_batch(&mut self, now: f64) -> Result<(BatchJob, Option<SwapOutcome>)> {
        let job = match std::mem::replace(&mut self.activity, Activity::Idle) {
            Activity::Batch(job) => job,
            other => {
                self.activity = other;
                return Err(Error::simulation("batch completion with no batch running"));
            }
        };
        if (job.finish_ms - now).abs() > 1e-9 {
            return Err(Error::simulation(format!(
                "batch due at {} completed at {now}",
                job.finish_ms
            )));
        }
        self.recent_batches.push_back(job.batch_size);
        while self.recent_batches.len() > self.settings.history_len {
            self.recent_batches.pop_front();
        }
        self.served += job.items.len() as u64;
        let swap = self.pending_swap.take().map(|target| self.apply_swap(now, target));
        Ok((job, swap))
    }

    fn apply_swap(&mut self, now: f64, target: usize) -> SwapOutcome {
        self.switches.push(SwitchRecord {
            time_ms: now,
            from: self.catalog[self.deployed].model_id.clone(),
            to: self.catalog[target].model_id.clone(),
        });
        log::debug!(
            "t={now:.1}ms swap {} -> {}",
            self.catalog[self.deployed].model_id,
            self.catalog[target].model_id
        );
        if self.settings.swap_delay_ms > 0.0 {
            let until_ms = now + self.settings.swap_delay_ms;
            self.activity = Activity::Swapping { target, until_ms };
            SwapOutcome::Applied { ready_at: until_ms }
        } else {
            self.deployed = target;
            SwapOutcome::Applied { ready_at: now }
        }
    }

    /// Ends a delayed swap; the new model serves from here on.
    pub fn finish_swap(&mut self, now: f64) -> Result<()> {
        match self.activity {
            Activity::Swapping { target, until_ms } if (until_ms - now).abs() <= 1e-9 => {
                self.deployed = target;
                self.activity = Activity::Idle;
                Ok(())
            }
            _ => Err(Error::simulation("swap completion with no swap in progress")),
        }
    }

    pub fn request_swap(&mut self, now: f64, target: &str) -> Result<SwapOutcome> {
        let idx = self
            .catalog
            .iter()
            .position(|m| m.model_id == target)
            .ok_or_else(|| Error::Config(format!("swap target {target} is not in the catalog")))?;
        if idx == self.deployed || self.pending_swap.is_some() {
            return Ok(SwapOutcome::Ignored);
        }
        if let Some(last) = self.last_switch_ms {
            if now - last < self.settings.cooldown_ms {
                log::info!("t={now:.1}ms swap to {target} ignored: cooldown");
                return Ok(SwapOutcome::Ignored);
            }
        }
        self.last_switch_ms = Some(now);
        match self.activity {
            Activity::Idle => Ok(self.apply_swap(now, idx)),
            Activity::Batch(_) => {
                self.pending_swap = Some(idx);
                Ok(SwapOutcome::Pending)
            }
            Activity::Swapping { .. } => Ok(SwapOutcome::Ignored),
        }
    }
}
