//! Wiring of devices, server and scheduler onto the event kernel.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::device::{DeviceState, Next, SampleOutcome};
use crate::engine::{DispatchRecord, EventLabel, EventQueue, Flow, Scheduled};
use crate::error::{Error, Result};
use crate::metrics::{Collector, DeviceMeta, ReportHeader, RunReport, TimelineRow};
use crate::model::{DeviceId, DeviceProfile, ServerModelProfile, TierId, TraceSource};
use crate::rng::{child_rng, child_seed};
use crate::scenario::{device_offline_schedule, ScenarioConfig};
use crate::scheduler::{InitialThreshold, PolicyKind, Scheduler, SwitchLimits, ThresholdState, UpdateRecord};
use crate::server::{Request, ServerSettings, ServerState, SwapOutcome};
use crate::traces::{
    calibrate_static_threshold, calibrate_switch_limits, calibration_curve, generate_trace, load_trace,
    CalibrationCurve, Trace, TraceGenSpec,
};

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    InferenceComplete { device: usize },
    RequestArrival { device: usize, index: usize },
    BatchComplete,
    ResultDelivery { device: usize, index: usize, correct: bool },
    WindowTick { device: usize, epoch: u64 },
    SrReport { device: usize, sr: f64 },
    ThresholdDelivery { device: usize, threshold: f64 },
    SwitchCheck,
    SwapComplete,
    DeviceOffline { device: usize, duration_ms: f64 },
    DeviceOnline { device: usize },
    RunEnd,
}

impl EventLabel for Event {
    fn kind(&self) -> &'static str {
        match self {
            Event::InferenceComplete { .. } => "InferenceComplete",
            Event::RequestArrival { .. } => "RequestArrival",
            Event::BatchComplete => "BatchComplete",
            Event::ResultDelivery { .. } => "ResultDelivery",
            Event::WindowTick { .. } => "WindowTick",
            Event::SrReport { .. } => "SrReport",
            Event::ThresholdDelivery { .. } => "ThresholdDelivery",
            Event::SwitchCheck => "SwitchCheck",
            Event::SwapComplete => "SwapComplete",
            Event::DeviceOffline { .. } => "DeviceOffline",
            Event::DeviceOnline { .. } => "DeviceOnline",
            Event::RunEnd => "RunEnd",
        }
    }

    fn actor(&self) -> String {
        match self {
            Event::InferenceComplete { device }
            | Event::ResultDelivery { device, .. }
            | Event::WindowTick { device, .. }
            | Event::ThresholdDelivery { device, .. }
            | Event::DeviceOffline { device, .. }
            | Event::DeviceOnline { device } => DeviceId(*device).to_string(),
            Event::RequestArrival { .. } | Event::BatchComplete | Event::SwapComplete => "server".into(),
            Event::SrReport { .. } | Event::SwitchCheck => "scheduler".into(),
            Event::RunEnd => "engine".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierCalibration {
    pub tier: TierId,
    pub t_inf_ms: f64,
    pub curve: CalibrationCurve,
    /// Static threshold per server model.
    pub static_threshold: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tiers: Vec<TierCalibration>,
    pub limits: Option<SwitchLimits>,
}

impl Calibration {
    pub fn static_threshold(&self, tier: &TierId, model: &str) -> Option<f64> {
        self.tiers
            .iter()
            .find(|t| &t.tier == tier)
            .and_then(|t| t.static_threshold.get(model).copied())
    }
}

fn heavy_accuracies(catalog: &[ServerModelProfile]) -> BTreeMap<String, f64> {
    catalog.iter().map(|m| (m.model_id.clone(), m.accuracy)).collect()
}

fn gen_spec(cfg: &ScenarioConfig, catalog: &[ServerModelProfile], light_accuracy: f64, seed: u64) -> TraceGenSpec {
    let mut spec = TraceGenSpec::new(light_accuracy, heavy_accuracies(catalog), seed);
    spec.bvsb_correct_shape = cfg.traces.bvsb_correct_shape;
    spec.bvsb_incorrect_shape = cfg.traces.bvsb_incorrect_shape;
    spec.heavy_given_light_wrong = cfg.traces.heavy_given_light_wrong.clone();
    spec
}

fn model_ids(catalog: &[ServerModelProfile]) -> Vec<String> {
    catalog.iter().map(|m| m.model_id.clone()).collect()
}

/// Per-tier calibration curves, Static thresholds and switch limits. Synthetic
/// tiers use a dedicated trace from the `("calibration", tier)` stream; file
/// tiers calibrate on the whole file.
pub fn calibrate(cfg: &ScenarioConfig) -> Result<Calibration> {
    let catalog = cfg.server.resolved_catalog()?;
    let models = model_ids(&catalog);
    let mut tiers = Vec::with_capacity(cfg.devices.len());
    for (k, t) in cfg.devices.iter().enumerate() {
        let (_, t_inf_ms, light_accuracy) = t.light_profile()?;
        let trace = match t.trace_source() {
            TraceSource::Synthetic => {
                let spec = gen_spec(cfg, &catalog, light_accuracy, child_seed(cfg.seed, "calibration", k as u64));
                generate_trace(&spec, cfg.traces.calibration_samples)?
            }
            TraceSource::File { path } => load_trace(&path, &models)?,
        };
        let curve = calibration_curve(&trace, &models, cfg.traces.grid_step)?;
        let static_threshold = models
            .iter()
            .map(|m| Ok((m.clone(), calibrate_static_threshold(&curve, m)?)))
            .collect::<Result<_>>()?;
        tiers.push(TierCalibration {
            tier: t.tier.clone(),
            t_inf_ms,
            curve,
            static_threshold,
        });
    }
    let limits = if cfg.policy.switch_enabled {
        let curves: Vec<_> = tiers
            .iter()
            .map(|t| (t.tier.clone(), t.t_inf_ms, t.curve.clone()))
            .collect();
        Some(calibrate_switch_limits(&curves, cfg.traces.q_low, cfg.traces.q_high)?)
    } else {
        None
    };
    Ok(Calibration { tiers, limits })
}

/// The trace each device replays. Synthetic devices draw from the
/// `("trace", device)` stream; file devices take a random subset of the file.
pub fn device_traces(cfg: &ScenarioConfig, profiles: &[DeviceProfile]) -> Result<Vec<Trace>> {
    let catalog = cfg.server.resolved_catalog()?;
    let models = model_ids(&catalog);
    let mut files: BTreeMap<PathBuf, Trace> = BTreeMap::new();
    let mut out = Vec::with_capacity(profiles.len());
    for p in profiles {
        let i = p.device_id.index() as u64;
        let trace = match &p.trace_source {
            TraceSource::Synthetic => {
                let spec = gen_spec(cfg, &catalog, p.light_accuracy, child_seed(cfg.seed, "trace", i));
                generate_trace(&spec, p.n_samples)?
            }
            TraceSource::File { path } => {
                if !files.contains_key(path) {
                    files.insert(path.clone(), load_trace(path, &models)?);
                }
                let full = &files[path];
                if full.len() < p.n_samples {
                    return Err(Error::validation(format!(
                        "{}: trace file {} has {} records but the device needs {}",
                        p.device_id,
                        path.display(),
                        full.len(),
                        p.n_samples
                    )));
                }
                let mut rng = child_rng(cfg.seed, "trace-subset", i);
                let mut picks = sample_indices(&mut rng, full.len(), p.n_samples).into_vec();
                picks.sort_unstable();
                Trace {
                    models: full.models.clone(),
                    records: picks.into_iter().map(|k| full.records[k].clone()).collect(),
                }
            }
        };
        out.push(trace);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimOptions {
    pub event_log: bool,
    /// Keep every sample's outcome in [`RunOutput::outcomes`].
    pub outcomes: bool,
}

#[derive(Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub timeline: Vec<TimelineRow>,
    pub updates: Vec<UpdateRecord>,
    pub event_log: Option<Vec<DispatchRecord>>,
    /// In completion order; present when requested.
    pub outcomes: Option<Vec<SampleOutcome>>,
    pub calibration: Calibration,
}

pub struct Simulation {
    label: String,
    seed: u64,
    digest: String,
    kind: PolicyKind,
    window_ms: f64,
    uplink_ms: f64,
    downlink_ms: f64,
    max_time_ms: Option<f64>,
    devices: Vec<DeviceState>,
    /// Start offset of each device, ms.
    starts: Vec<f64>,
    traces: Vec<Trace>,
    /// `heavy_cols[device][catalog index]` is the trace column of that model.
    heavy_cols: Vec<Vec<usize>>,
    server: ServerState,
    scheduler: Scheduler,
    metrics: Collector,
    queue: EventQueue<Event>,
    outcomes: Option<Vec<SampleOutcome>>,
    calibration: Calibration,
    initial_model: String,
}

impl Simulation {
    pub fn new(cfg: &ScenarioConfig, opts: SimOptions) -> Result<Self> {
        cfg.validate()?;
        let catalog = cfg.server.resolved_catalog()?;
        let calibration = calibrate(cfg)?;
        let profiles = cfg.device_profiles()?;
        let traces = device_traces(cfg, &profiles)?;
        Self::assemble(cfg, opts, catalog, calibration, profiles, traces)
    }

    /// Builds a simulation over caller-supplied per-device traces.
    pub fn with_traces(cfg: &ScenarioConfig, opts: SimOptions, traces: Vec<Trace>) -> Result<Self> {
        cfg.validate()?;
        let catalog = cfg.server.resolved_catalog()?;
        let calibration = calibrate(cfg)?;
        let profiles = cfg.device_profiles()?;
        if traces.len() != profiles.len() {
            return Err(Error::validation(format!(
                "{} traces supplied for {} devices",
                traces.len(),
                profiles.len()
            )));
        }
        Self::assemble(cfg, opts, catalog, calibration, profiles, traces)
    }

    fn assemble(
        cfg: &ScenarioConfig,
        opts: SimOptions,
        catalog: Vec<ServerModelProfile>,
        calibration: Calibration,
        profiles: Vec<DeviceProfile>,
        traces: Vec<Trace>,
    ) -> Result<Self> {
        let deployed = cfg.server.deployed.clone();
        let mut heavy_cols = Vec::with_capacity(traces.len());
        for (p, t) in profiles.iter().zip(&traces) {
            if t.len() < p.n_samples {
                return Err(Error::validation(format!(
                    "{}: trace has {} records, needs {}",
                    p.device_id,
                    t.len(),
                    p.n_samples
                )));
            }
            let cols = catalog
                .iter()
                .map(|m| {
                    t.model_index(&m.model_id).ok_or_else(|| {
                        Error::validation(format!("{}: trace lacks model {}", p.device_id, m.model_id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            heavy_cols.push(cols);
        }

        let window_ms = cfg.slo.window_ms();
        let mut devices = Vec::with_capacity(profiles.len());
        let mut states = Vec::with_capacity(profiles.len());
        let mut metas = Vec::with_capacity(profiles.len());
        let mut starts = Vec::with_capacity(profiles.len());
        let mut offset_in_tier: BTreeMap<TierId, usize> = BTreeMap::new();
        for p in &profiles {
            let template = cfg
                .devices
                .iter()
                .find(|t| t.tier == p.tier)
                .expect("profiles come from templates");
            let c0 = match cfg.policy.initial_threshold {
                InitialThreshold::Fixed(c) => c,
                InitialThreshold::CalibratedStatic => calibration
                    .static_threshold(&p.tier, &deployed)
                    .ok_or_else(|| Error::Calibration(format!("no static threshold for tier {}", p.tier)))?,
            };
            let i = p.device_id.index();
            let mut dev = DeviceState::new(p.clone(), c0)
                .with_jitter(child_rng(cfg.seed, "jitter", i as u64), template.jitter_pct);
            if let Some(spec) = &cfg.intermittent {
                dev.apply_offline_schedule(device_offline_schedule(spec, p.n_samples, cfg.seed, i));
            }
            let j = offset_in_tier.entry(p.tier.clone()).or_insert(0);
            starts.push(p.t_inf_ms * *j as f64 / template.count as f64);
            *j += 1;
            states.push(ThresholdState::new(p.device_id, p.tier.clone(), p.sr_target, c0));
            metas.push(DeviceMeta {
                device: p.device_id,
                tier: p.tier.clone(),
                n_samples: p.n_samples,
                slo_ms: p.slo_ms,
                sr_target: p.sr_target,
            });
            devices.push(dev);
        }
        let initial_mean = if states.is_empty() {
            0.0
        } else {
            states.iter().map(|s| s.threshold).sum::<f64>() / states.len() as f64
        };

        let server = ServerState::new(
            catalog,
            &deployed,
            ServerSettings {
                swap_delay_ms: cfg.server.swap_delay_ms,
                cooldown_ms: cfg.cooldown_ms(),
                history_len: cfg.server.history_len,
            },
        )?;
        let scheduler = Scheduler::new(cfg.policy.clone(), states, calibration.limits.clone(), window_ms);
        let queue = if opts.event_log {
            EventQueue::new().with_log()
        } else {
            EventQueue::new()
        };
        Ok(Self {
            label: cfg.label(),
            seed: cfg.seed,
            digest: cfg.digest()?,
            kind: cfg.policy.kind,
            window_ms,
            uplink_ms: cfg.network.uplink_ms,
            downlink_ms: cfg.network.downlink_ms,
            max_time_ms: cfg.max_time_s.map(|s| s * 1000.0),
            devices,
            starts,
            traces,
            heavy_cols,
            server,
            scheduler,
            metrics: Collector::new(metas, cfg.metrics.running_window_s * 1000.0, initial_mean),
            queue,
            outcomes: opts.outcomes.then(Vec::new),
            calibration,
            initial_model: deployed,
        })
    }

    pub fn calibration(&self) -> &Calibration {
        &self.calibration
    }

    pub fn run(mut self) -> Result<RunOutput> {
        let mut queue = std::mem::take(&mut self.queue);
        if self.devices.is_empty() {
            return self.finish(queue);
        }
        for d in 0..self.devices.len() {
            let start = self.starts[d];
            let next = self.devices[d].start(start);
            self.follow(&mut queue, d, next, start)?;
            queue.schedule(start + self.window_ms, Event::WindowTick { device: d, epoch: 0 })?;
        }
        queue.schedule(self.window_ms / 2.0, Event::SwitchCheck)?;
        if let Some(t) = self.max_time_ms {
            queue.schedule(t, Event::RunEnd)?;
        }
        queue.run(None, |q, ev| self.handle(q, ev))?;
        self.finish(queue)
    }

    fn finish(mut self, mut queue: EventQueue<Event>) -> Result<RunOutput> {
        let outstanding: Vec<(DeviceId, Vec<u64>)> =
            self.devices.iter().map(|d| (d.id(), d.outstanding_ids())).collect();
        let thresholds: Vec<f64> = self.devices.iter().map(|d| d.threshold).collect();
        let header = ReportHeader {
            scenario: self.label.clone(),
            policy: self.kind.label().to_string(),
            seed: self.seed,
            config_digest: self.digest.clone(),
            initial_model: self.initial_model.clone(),
            final_model: self.server.deployed().model_id.clone(),
            switches: self.server.switches().to_vec(),
            events_dispatched: queue.dispatched(),
            events_pending: queue.pending(),
        };
        let report = self.metrics.finalize(header, &outstanding, &thresholds)?;
        Ok(RunOutput {
            report,
            timeline: self.metrics.into_timeline(),
            updates: self.scheduler.take_updates(),
            event_log: queue.take_log(),
            outcomes: self.outcomes,
            calibration: self.calibration,
        })
    }

    fn follow(&mut self, q: &mut EventQueue<Event>, device: usize, next: Next, now: f64) -> Result<()> {
        match next {
            Next::Infer { complete_at } => {
                q.schedule(complete_at, Event::InferenceComplete { device })?;
            }
            Next::GoOffline { duration_ms } => {
                q.schedule(now, Event::DeviceOffline { device, duration_ms })?;
            }
            Next::Done => {}
        }
        Ok(())
    }

    fn try_dispatch(&mut self, q: &mut EventQueue<Event>, now: f64) -> Result<()> {
        if let Some(finish) = self.server.dispatch(now) {
            q.schedule(finish, Event::BatchComplete)?;
        }
        Ok(())
    }

    fn after_swap(&mut self, q: &mut EventQueue<Event>, swap: Option<SwapOutcome>, now: f64) -> Result<()> {
        if let Some(SwapOutcome::Applied { ready_at }) = swap {
            if ready_at > now {
                q.schedule(ready_at, Event::SwapComplete)?;
            }
        }
        self.try_dispatch(q, now)
    }

    fn record(&mut self, outcome: SampleOutcome) -> Result<()> {
        self.metrics.record_outcome(&outcome)?;
        if let Some(all) = &mut self.outcomes {
            all.push(outcome);
        }
        Ok(())
    }

    fn all_retired(&self) -> bool {
        self.devices.iter().all(DeviceState::retired)
    }

    fn handle(&mut self, q: &mut EventQueue<Event>, ev: Scheduled<Event>) -> Result<Flow> {
        let now = ev.time_ms;
        match ev.event {
            Event::InferenceComplete { device } => {
                let dev = &mut self.devices[device];
                let record = self.traces[device].records.get(dev.cursor).ok_or_else(|| {
                    Error::simulation(format!("{}: trace exhausted at {}", dev.id(), dev.cursor))
                })?;
                let step = dev.on_inference_complete(now, record)?;
                if let Some(outcome) = step.outcome {
                    self.record(outcome)?;
                }
                if let Some(index) = step.forward {
                    q.schedule(now + self.uplink_ms, Event::RequestArrival { device, index })?;
                }
                self.follow(q, device, step.next, now)?;
            }
            Event::RequestArrival { device, index } => {
                self.server.enqueue(Request {
                    device: DeviceId(device),
                    sample_index: index,
                    enqueue_ms: now,
                });
                self.try_dispatch(q, now)?;
            }
            Event::BatchComplete => {
                let (job, swap) = self.server.complete_batch(now)?;
                self.metrics.record_batch(job.batch_size);
                for item in &job.items {
                    let d = item.device.index();
                    let col = self.heavy_cols[d][job.model];
                    let correct = self.traces[d].records[item.sample_index].heavy_correct[col];
                    q.schedule(
                        now + self.downlink_ms,
                        Event::ResultDelivery {
                            device: d,
                            index: item.sample_index,
                            correct,
                        },
                    )?;
                }
                self.after_swap(q, swap, now)?;
            }
            Event::ResultDelivery { device, index, correct } => {
                let outcome = self.devices[device].on_result(now, index, correct)?;
                self.record(outcome)?;
            }
            Event::WindowTick { device, epoch } => {
                let tick = self.devices[device].on_window_tick(epoch);
                if let Some(sr) = tick.sr_update {
                    q.schedule(now + self.uplink_ms, Event::SrReport { device, sr })?;
                }
                if tick.reschedule {
                    q.schedule(now + self.window_ms, Event::WindowTick { device, epoch })?;
                }
            }
            Event::SrReport { device, sr } => {
                if let Some(threshold) = self.scheduler.handle_sr_update(DeviceId(device), sr, now)? {
                    q.schedule(now + self.downlink_ms, Event::ThresholdDelivery { device, threshold })?;
                }
            }
            Event::ThresholdDelivery { device, threshold } => {
                self.devices[device].set_threshold(threshold);
            }
            Event::SwitchCheck => {
                self.scheduler.mark_inactive(now);
                if self.kind == PolicyKind::MultiTascStep {
                    let deliveries = self
                        .scheduler
                        .step_update(self.server.recent_batches(), self.server.deployed());
                    for (d, threshold) in deliveries {
                        q.schedule(
                            now + self.downlink_ms,
                            Event::ThresholdDelivery {
                                device: d.index(),
                                threshold,
                            },
                        )?;
                    }
                }
                let target = self
                    .scheduler
                    .periodic_switch_check(self.server.catalog(), self.server.deployed())
                    .map(|m| m.model_id.clone());
                if let Some(target) = target {
                    let outcome = self.server.request_swap(now, &target)?;
                    self.after_swap(q, Some(outcome), now)?;
                }
                self.metrics.sample_timeline(
                    now,
                    self.scheduler.active_count(),
                    self.scheduler.mean_active_threshold(),
                    self.server.queue_len(),
                    &self.server.deployed().model_id,
                );
                if !self.all_retired() {
                    q.schedule(now + self.window_ms, Event::SwitchCheck)?;
                }
            }
            Event::SwapComplete => {
                self.server.finish_swap(now)?;
                self.try_dispatch(q, now)?;
            }
            Event::DeviceOffline { device, duration_ms } => {
                self.devices[device].go_offline();
                q.schedule(now + duration_ms, Event::DeviceOnline { device })?;
            }
            Event::DeviceOnline { device } => {
                let (next, epoch) = self.devices[device].come_online(now);
                self.follow(q, device, next, now)?;
                q.schedule(now + self.window_ms, Event::WindowTick { device, epoch })?;
            }
            Event::RunEnd => {
                for d in &mut self.devices {
                    d.halt();
                }
            }
        }
        Ok(Flow::Continue)
    }
}

/// Builds and runs one scenario in memory.
pub fn simulate(cfg: &ScenarioConfig, opts: SimOptions) -> Result<RunOutput> {
    Simulation::new(cfg, opts)?.run()
}
