//! One IoT device: back-to-back local inference over its trace, the
//! thresholded forwarding decision, and windowed SLO accounting.
//!
//! The device is a plain state machine. Every handler returns what should
//! happen next and the simulation turns that into events, so the device can
//! be driven directly in tests.

use std::collections::{HashMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DeviceId, DeviceProfile};
use crate::rng::SimRng;
use crate::traces::TraceRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Keep,
    Forward,
}

/// Keep the light result iff its confidence reaches the threshold.
pub fn decide(bvsb: f64, threshold: f64) -> Decision {
    if bvsb >= threshold {
        Decision::Keep
    } else {
        Decision::Forward
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Local,
    Server,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub device: DeviceId,
    pub sample_id: u64,
    pub origin: Origin,
    pub finish_ms: f64,
    /// From the start of on-device inference to the final result.
    pub latency_ms: f64,
    pub slo_met: bool,
    pub correct: bool,
}

/// What the device does once a sample's local inference finishes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Next {
    /// Next sample's inference completes at this time.
    Infer { complete_at: f64 },
    /// Stop generating for this long.
    GoOffline { duration_ms: f64 },
    Done,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceStep {
    pub outcome: Option<SampleOutcome>,
    /// Trace index of a sample to send to the server.
    pub forward: Option<usize>,
    pub next: Next,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickResult {
    /// Satisfaction rate of the closed window, percent.
    pub sr_update: Option<f64>,
    pub reschedule: bool,
}

#[derive(Debug)]
pub struct DeviceState {
    pub profile: DeviceProfile,
    pub threshold: f64,
    /// Trace index of the next sample to start.
    pub cursor: usize,
    pub window_hits: u32,
    pub window_total: u32,
    pub online: bool,
    pub done_generating: bool,
    outstanding: HashMap<usize, (u64, f64)>,
    offline_schedule: VecDeque<(usize, f64)>,
    tick_epoch: u64,
    in_flight: Option<(f64, f64)>,
    jitter: Option<(SimRng, f64)>,
}

impl DeviceState {
    pub fn new(profile: DeviceProfile, threshold: f64) -> Self {
        Self {
            profile,
            threshold: threshold.clamp(0.0, 1.0),
            cursor: 0,
            window_hits: 0,
            window_total: 0,
            online: true,
            done_generating: false,
            outstanding: HashMap::new(),
            offline_schedule: VecDeque::new(),
            tick_epoch: 0,
            in_flight: None,
            jitter: None,
        }
    }

    /// Multiplicative uniform noise of ±`pct` percent on each inference.
    pub fn with_jitter(mut self, rng: SimRng, pct: f64) -> Self {
        if pct > 0.0 {
            self.jitter = Some((rng, pct / 100.0));
        }
        self
    }

    /// Installs `(offline_at_sample_index, duration_ms)` pairs.
    pub fn apply_offline_schedule(&mut self, mut schedule: Vec<(usize, f64)>) {
        schedule.retain(|&(idx, _)| idx < self.profile.n_samples);
        schedule.sort_by_key(|&(idx, _)| idx);
        self.offline_schedule = schedule.into();
    }

    pub fn id(&self) -> DeviceId {
        self.profile.device_id
    }

    pub fn tick_epoch(&self) -> u64 {
        self.tick_epoch
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding.len()
    }

    pub fn outstanding_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.outstanding.values().map(|&(id, _)| id).collect();
        ids.sort_unstable();
        ids
    }

    /// No more samples to generate and nothing awaited from the server.
    pub fn retired(&self) -> bool {
        self.done_generating && self.outstanding.is_empty()
    }

    pub fn set_threshold(&mut self, c: f64) {
        self.threshold = c.clamp(0.0, 1.0);
    }

    fn inference_latency(&mut self) -> f64 {
        let base = self.profile.t_inf_ms;
        match self.jitter.as_mut() {
            Some((rng, j)) => base * (1.0 + rng.random_range(-*j..=*j)),
            None => base,
        }
    }

    fn begin_sample(&mut self, now: f64) -> Next {
        if self.cursor >= self.profile.n_samples {
            self.done_generating = true;
            return Next::Done;
        }
        if let Some(&(idx, duration_ms)) = self.offline_schedule.front() {
            if idx == self.cursor {
                self.offline_schedule.pop_front();
                return Next::GoOffline { duration_ms };
            }
        }
        let latency = self.inference_latency();
        self.in_flight = Some((now, latency));
        Next::Infer {
            complete_at: now + latency,
        }
    }

    /// Starts generation; returns how the first sample proceeds.
    pub fn start(&mut self, now: f64) -> Next {
        self.begin_sample(now)
    }

    /// Stop generating early (forced end of run). The sample in flight still completes.
    pub fn halt(&mut self) {
        self.profile.n_samples = self.cursor + usize::from(self.in_flight.is_some());
        self.offline_schedule.clear();
    }

    fn count_in_window(&mut self, slo_met: bool) {
        self.window_total += 1;
        if slo_met {
            self.window_hits += 1;
        }
    }

    pub fn on_inference_complete(&mut self, now: f64, sample: &TraceRecord) -> Result<InferenceStep> {
        let (start, latency) = self.in_flight.take().ok_or_else(|| {
            Error::simulation(format!("{}: inference completed with nothing in flight", self.id()))
        })?;
        let index = self.cursor;
        self.cursor += 1;
        let (outcome, forward) = match decide(sample.bvsb, self.threshold) {
            Decision::Keep => {
                let slo_met = latency <= self.profile.slo_ms;
                self.count_in_window(slo_met);
                let outcome = SampleOutcome {
                    device: self.id(),
                    sample_id: sample.sample_id,
                    origin: Origin::Local,
                    finish_ms: now,
                    latency_ms: latency,
                    slo_met,
                    correct: sample.light_correct,
                };
                (Some(outcome), None)
            }
            Decision::Forward => {
                self.outstanding.insert(index, (sample.sample_id, start));
                (None, Some(index))
            }
        };
        let next = if self.online {
            self.begin_sample(now)
        } else {
            Next::Done
        };
        Ok(InferenceStep {
            outcome,
            forward,
            next,
        })
    }

    pub fn go_offline(&mut self) {
        self.online = false;
        self.tick_epoch += 1;
    }

    /// Resumes generation; returns the next step and the epoch for the new tick chain.
    pub fn come_online(&mut self, now: f64) -> (Next, u64) {
        self.online = true;
        self.tick_epoch += 1;
        (self.begin_sample(now), self.tick_epoch)
    }

    pub fn on_window_tick(&mut self, epoch: u64) -> TickResult {
        if epoch != self.tick_epoch || !self.online {
            return TickResult {
                sr_update: None,
                reschedule: false,
            };
        }
        let sr_update = (self.window_total > 0)
            .then(|| 100.0 * self.window_hits as f64 / self.window_total as f64);
        self.window_hits = 0;
        self.window_total = 0;
        TickResult {
            sr_update,
            reschedule: !self.retired(),
        }
    }

    pub fn on_result(&mut self, now: f64, index: usize, heavy_correct: bool) -> Result<SampleOutcome> {
        let (sample_id, start) = self.outstanding.remove(&index).ok_or_else(|| {
            Error::simulation(format!(
                "{}: result for sample index {index} which is not outstanding",
                self.id()
            ))
        })?;
        let latency = now - start;
        let slo_met = latency <= self.profile.slo_ms;
        self.count_in_window(slo_met);
        Ok(SampleOutcome {
            device: self.id(),
            sample_id,
            origin: Origin::Server,
            finish_ms: now,
            latency_ms: latency,
            slo_met,
            correct: heavy_correct,
        })
    }
}
