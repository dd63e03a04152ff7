//! Outcome collection, run reports and sweep aggregation.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::device::{Origin, SampleOutcome};
use crate::error::{Error, Result};
use crate::model::{DeviceId, TierId};
use crate::scheduler::UpdateRecord;
use crate::server::SwitchRecord;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const TIMESERIES_HEADER: [&str; 8] = [
    "time_ms",
    "active_devices",
    "mean_threshold",
    "running_sr",
    "running_accuracy",
    "queue_len",
    "deployed_model",
    "batch_size",
];

pub const SWEEP_HEADER: [&str; 6] = ["devices", "seed_count", "metric", "mean", "min", "max"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub time_ms: f64,
    pub active_devices: usize,
    pub mean_threshold: f64,
    /// Percent of outcomes in the trailing window meeting their SLO.
    pub running_sr: Option<f64>,
    /// Fraction of outcomes in the trailing window that were correct.
    pub running_accuracy: Option<f64>,
    pub queue_len: usize,
    pub deployed_model: String,
    /// Mean size of the batches completed since the previous row, 0 if none.
    pub batch_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub device: DeviceId,
    pub tier: TierId,
    pub n_samples: usize,
    pub local_samples: u64,
    pub server_samples: u64,
    /// `None` when the device produced no outcomes.
    pub accuracy: Option<f64>,
    pub slo_satisfaction: Option<f64>,
    pub mean_latency_ms: Option<f64>,
    pub slo_ms: f64,
    pub sr_target: f64,
    pub final_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub devices: usize,
    pub samples: u64,
    pub server_samples: u64,
    pub accuracy: f64,
    pub slo_satisfaction: f64,
    pub forward_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub scenario: String,
    pub policy: String,
    pub seed: u64,
    pub device_count: usize,
    pub config_digest: String,
    pub overall: Aggregate,
    pub per_tier: BTreeMap<TierId, Aggregate>,
    pub per_device: Vec<DeviceReport>,
    /// All outcomes over the makespan, samples/s.
    pub system_throughput: f64,
    /// Server-resolved outcomes over the makespan, samples/s.
    pub server_throughput: f64,
    pub makespan_ms: f64,
    pub mean_batch_size: f64,
    pub batches: u64,
    pub initial_model: String,
    pub final_model: String,
    pub switches: Vec<SwitchRecord>,
    pub events_dispatched: u64,
    pub events_pending: usize,
}

impl RunReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Simulation(format!("report serialization failed: {e}")))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line() as u64,
            message: e.to_string(),
        })
    }

    /// Named scalar metrics used by sweep tables.
    pub fn scalar_metrics(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("system_throughput".to_string(), self.system_throughput),
            ("server_throughput".into(), self.server_throughput),
            ("accuracy".into(), self.overall.accuracy),
            ("slo_satisfaction".into(), self.overall.slo_satisfaction),
            ("forward_fraction".into(), self.overall.forward_fraction),
            ("makespan_ms".into(), self.makespan_ms),
            ("mean_batch_size".into(), self.mean_batch_size),
            ("switches".into(), self.switches.len() as f64),
        ];
        for (tier, agg) in &self.per_tier {
            out.push((format!("tier_{tier}_accuracy"), agg.accuracy));
            out.push((format!("tier_{tier}_slo_satisfaction"), agg.slo_satisfaction));
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
struct Tally {
    local: u64,
    server: u64,
    correct: u64,
    slo_met: u64,
    latency_sum: f64,
}

impl Tally {
    fn total(&self) -> u64 {
        self.local + self.server
    }

    fn add(&mut self, o: &SampleOutcome) {
        match o.origin {
            Origin::Local => self.local += 1,
            Origin::Server => self.server += 1,
        }
        self.correct += o.correct as u64;
        self.slo_met += o.slo_met as u64;
        self.latency_sum += o.latency_ms;
    }

    fn merge(&mut self, other: &Tally) {
        self.local += other.local;
        self.server += other.server;
        self.correct += other.correct;
        self.slo_met += other.slo_met;
        self.latency_sum += other.latency_sum;
    }
}

/// Static facts about a device needed for reporting.
#[derive(Debug, Clone)]
pub struct DeviceMeta {
    pub device: DeviceId,
    pub tier: TierId,
    pub n_samples: usize,
    pub slo_ms: f64,
    pub sr_target: f64,
}

/// Per-run collector. One per simulation instance.
#[derive(Debug)]
pub struct Collector {
    meta: Vec<DeviceMeta>,
    tallies: Vec<Tally>,
    window_ms: f64,
    running: VecDeque<(f64, bool, bool)>,
    running_hits: u64,
    running_correct: u64,
    last_running: (Option<f64>, Option<f64>),
    last_finish_ms: f64,
    batches: u64,
    batch_items: u64,
    batches_since_row: (u64, u64),
    last_threshold: f64,
    timeline: Vec<TimelineRow>,
}

impl Collector {
    pub fn new(meta: Vec<DeviceMeta>, running_window_ms: f64, initial_mean_threshold: f64) -> Self {
        let n = meta.len();
        Self {
            meta,
            tallies: vec![Tally::default(); n],
            window_ms: running_window_ms,
            running: VecDeque::new(),
            running_hits: 0,
            running_correct: 0,
            last_running: (None, None),
            last_finish_ms: 0.0,
            batches: 0,
            batch_items: 0,
            batches_since_row: (0, 0),
            last_threshold: initial_mean_threshold,
            timeline: Vec::new(),
        }
    }

    pub fn record_outcome(&mut self, outcome: &SampleOutcome) -> Result<()> {
        let tally = self
            .tallies
            .get_mut(outcome.device.index())
            .ok_or_else(|| Error::simulation(format!("outcome for unknown {}", outcome.device)))?;
        tally.add(outcome);
        self.last_finish_ms = self.last_finish_ms.max(outcome.finish_ms);
        self.running.push_back((outcome.finish_ms, outcome.slo_met, outcome.correct));
        self.running_hits += outcome.slo_met as u64;
        self.running_correct += outcome.correct as u64;
        Ok(())
    }

    pub fn record_batch(&mut self, size: u32) {
        self.batches += 1;
        self.batch_items += size as u64;
        self.batches_since_row.0 += 1;
        self.batches_since_row.1 += size as u64;
    }

    fn evict(&mut self, now: f64) {
        while let Some(&(t, hit, ok)) = self.running.front() {
            if t >= now - self.window_ms {
                break;
            }
            self.running.pop_front();
            self.running_hits -= hit as u64;
            self.running_correct -= ok as u64;
        }
    }

    /// Running SR (percent) and accuracy (fraction) over the trailing window;
    /// an empty window repeats the previous values.
    pub fn running(&mut self, now: f64) -> (Option<f64>, Option<f64>) {
        self.evict(now);
        let n = self.running.len();
        if n > 0 {
            self.last_running = (
                Some(100.0 * self.running_hits as f64 / n as f64),
                Some(self.running_correct as f64 / n as f64),
            );
        }
        self.last_running
    }

    pub fn sample_timeline(
        &mut self,
        now: f64,
        active_devices: usize,
        mean_threshold: Option<f64>,
        queue_len: usize,
        deployed_model: &str,
    ) {
        if let Some(c) = mean_threshold {
            self.last_threshold = c;
        }
        let (running_sr, running_accuracy) = self.running(now);
        let (nb, items) = std::mem::take(&mut self.batches_since_row);
        self.timeline.push(TimelineRow {
            time_ms: now,
            active_devices,
            mean_threshold: self.last_threshold,
            running_sr,
            running_accuracy,
            queue_len,
            deployed_model: deployed_model.to_string(),
            batch_size: if nb > 0 { items as f64 / nb as f64 } else { 0.0 },
        });
    }

    pub fn timeline(&self) -> &[TimelineRow] {
        &self.timeline
    }

    pub fn into_timeline(self) -> Vec<TimelineRow> {
        self.timeline
    }

    pub fn makespan_ms(&self) -> f64 {
        self.last_finish_ms
    }

    fn aggregate(tally: &Tally, devices: usize) -> Aggregate {
        let n = tally.total();
        let ratio = |x: u64| if n > 0 { x as f64 / n as f64 } else { 0.0 };
        Aggregate {
            devices,
            samples: n,
            server_samples: tally.server,
            accuracy: ratio(tally.correct),
            slo_satisfaction: 100.0 * ratio(tally.slo_met),
            forward_fraction: ratio(tally.server),
        }
    }

    /// Builds the report. `outstanding` lists `(device, sample_ids)` still
    /// awaiting a server result; any entry there is an error.
    pub fn finalize(
        &self,
        header: ReportHeader,
        outstanding: &[(DeviceId, Vec<u64>)],
        final_thresholds: &[f64],
    ) -> Result<RunReport> {
        let stuck: Vec<String> = outstanding
            .iter()
            .filter(|(_, ids)| !ids.is_empty())
            .map(|(d, ids)| format!("{d}: {ids:?}"))
            .collect();
        if !stuck.is_empty() {
            return Err(Error::simulation(format!(
                "results still outstanding at finalize: {}",
                stuck.join("; ")
            )));
        }

        let mut overall = Tally::default();
        let mut counted = 0;
        let mut tiers: BTreeMap<TierId, (Tally, usize)> = BTreeMap::new();
        let mut per_device = Vec::with_capacity(self.meta.len());
        for ((meta, tally), &c) in self.meta.iter().zip(&self.tallies).zip(final_thresholds) {
            let n = tally.total();
            let ratio = |x: f64| (n > 0).then(|| x / n as f64);
            if n == 0 {
                log::warn!("{} produced no outcomes; excluded from averages", meta.device);
            } else {
                overall.merge(tally);
                counted += 1;
                let e = tiers.entry(meta.tier.clone()).or_default();
                e.0.merge(tally);
                e.1 += 1;
            }
            per_device.push(DeviceReport {
                device: meta.device,
                tier: meta.tier.clone(),
                n_samples: meta.n_samples,
                local_samples: tally.local,
                server_samples: tally.server,
                accuracy: ratio(tally.correct as f64),
                slo_satisfaction: ratio(100.0 * tally.slo_met as f64),
                mean_latency_ms: ratio(tally.latency_sum),
                slo_ms: meta.slo_ms,
                sr_target: meta.sr_target,
                final_threshold: c,
            });
        }
        let secs = self.last_finish_ms / 1000.0;
        let per_sec = |x: u64| if secs > 0.0 { x as f64 / secs } else { 0.0 };
        Ok(RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            scenario: header.scenario,
            policy: header.policy,
            seed: header.seed,
            device_count: self.meta.len(),
            config_digest: header.config_digest,
            overall: Self::aggregate(&overall, counted),
            per_tier: tiers
                .into_iter()
                .map(|(t, (tally, n))| (t, Self::aggregate(&tally, n)))
                .collect(),
            per_device,
            system_throughput: per_sec(overall.total()),
            server_throughput: per_sec(overall.server),
            makespan_ms: self.last_finish_ms,
            mean_batch_size: if self.batches > 0 {
                self.batch_items as f64 / self.batches as f64
            } else {
                0.0
            },
            batches: self.batches,
            initial_model: header.initial_model,
            final_model: header.final_model,
            switches: header.switches,
            events_dispatched: header.events_dispatched,
            events_pending: header.events_pending,
        })
    }
}

/// Run-level facts supplied by the simulation at finalize.
#[derive(Debug, Clone, Default)]
pub struct ReportHeader {
    pub scenario: String,
    pub policy: String,
    pub seed: u64,
    pub config_digest: String,
    pub initial_model: String,
    pub final_model: String,
    pub switches: Vec<SwitchRecord>,
    pub events_dispatched: u64,
    pub events_pending: usize,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Writer that leaves the header row to the caller, so empty tables still get one.
fn headerless(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))
}

pub fn write_timeline(path: &Path, rows: &[TimelineRow]) -> Result<()> {
    let mut w = headerless(path)?;
    w.write_record(TIMESERIES_HEADER).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_timeline(path: &Path) -> Result<Vec<TimelineRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    rdr.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i as u64 + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_updates(path: &Path, rows: &[UpdateRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["time_ms", "device", "sr_update", "threshold", "m", "n"])
        .map_err(|e| csv_err(path, e))?;
    for u in rows {
        w.write_record([
            u.time_ms.to_string(),
            u.device.to_string(),
            u.sr_update.to_string(),
            u.threshold.to_string(),
            u.multiplier.to_string(),
            u.active_devices.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub devices: usize,
    pub seed_count: usize,
    pub metric: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Aggregates finalized reports, grouped by device count. Metric order
    /// follows the first report of each group.
    pub fn from_reports<'a>(reports: impl IntoIterator<Item = &'a RunReport>) -> Self {
        let mut groups: BTreeMap<usize, Vec<Vec<(String, f64)>>> = BTreeMap::new();
        for r in reports {
            groups.entry(r.device_count).or_default().push(r.scalar_metrics());
        }
        let mut rows = Vec::new();
        for (devices, runs) in groups {
            let names: Vec<String> = runs[0].iter().map(|(n, _)| n.clone()).collect();
            for name in names {
                let vals: Vec<f64> = runs
                    .iter()
                    .filter_map(|m| m.iter().find(|(n, _)| *n == name).map(|&(_, v)| v))
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                rows.push(SweepRow {
                    devices,
                    seed_count: vals.len(),
                    metric: name,
                    // rounding can push the mean a hair outside [min, max]
                    mean: mean.clamp(min, max),
                    min,
                    max,
                });
            }
        }
        Self { rows }
    }

    pub fn get(&self, devices: usize, metric: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.devices == devices && r.metric == metric)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = headerless(path)?;
        w.write_record(SWEEP_HEADER).map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let rows = rdr
            .deserialize()
            .enumerate()
            .map(|(i, row)| {
                row.map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    line: i as u64 + 2,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<SweepRow>>>()?;
        Ok(Self { rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(i: usize, tier: TierId) -> DeviceMeta {
        DeviceMeta {
            device: DeviceId(i),
            tier,
            n_samples: 100,
            slo_ms: 100.0,
            sr_target: 95.0,
        }
    }

    fn outcome(dev: usize, t: f64, origin: Origin, slo_met: bool, correct: bool) -> SampleOutcome {
        SampleOutcome {
            device: DeviceId(dev),
            sample_id: 0,
            origin,
            finish_ms: t,
            latency_ms: if slo_met { 31.0 } else { 150.0 },
            slo_met,
            correct,
        }
    }

    #[test]
    fn ratios_and_exclusion() {
        let mut c = Collector::new(vec![meta(0, TierId::Low), meta(1, TierId::Low)], 10_000.0, 0.3);
        for k in 0..100 {
            c.record_outcome(&outcome(0, 31.0 * (k + 1) as f64, Origin::Local, k >= 5, k % 2 == 0))
                .unwrap();
        }
        let r = c.finalize(ReportHeader::default(), &[], &[0.3, 0.3]).unwrap();
        assert_eq!(r.per_device[0].slo_satisfaction, Some(95.0));
        assert_eq!(r.per_device[1].accuracy, None);
        assert_eq!(r.overall.devices, 1);
        assert_eq!(r.overall.accuracy, 0.5);
        assert_eq!(r.makespan_ms, 3100.0);
        assert!((r.system_throughput - 100.0 / 3.1).abs() < 1e-9);
    }

    #[test]
    fn outstanding_is_an_error() {
        let c = Collector::new(vec![meta(0, TierId::Low)], 10_000.0, 0.3);
        let err = c
            .finalize(ReportHeader::default(), &[(DeviceId(0), vec![7, 9])], &[0.3])
            .unwrap_err();
        assert!(err.to_string().contains("[7, 9]"));
    }

    #[test]
    fn tiers_partition_devices() {
        let mut c = Collector::new(
            vec![meta(0, TierId::Low), meta(1, TierId::Mid), meta(2, TierId::Mid)],
            10_000.0,
            0.3,
        );
        for d in 0..3 {
            c.record_outcome(&outcome(d, 10.0, Origin::Server, true, d != 1)).unwrap();
        }
        let r = c.finalize(ReportHeader::default(), &[], &[0.3; 3]).unwrap();
        let total: usize = r.per_tier.values().map(|a| a.devices).sum();
        assert_eq!(total, 3);
        assert_eq!(r.per_tier[&TierId::Mid].accuracy, 0.5);
        assert_eq!(r.overall.forward_fraction, 1.0);
    }

    #[test]
    fn running_window_slides_and_carries() {
        let mut c = Collector::new(vec![meta(0, TierId::Low)], 1000.0, 0.3);
        assert_eq!(c.running(0.0), (None, None));
        c.record_outcome(&outcome(0, 100.0, Origin::Local, false, true)).unwrap();
        c.record_outcome(&outcome(0, 900.0, Origin::Local, true, true)).unwrap();
        assert_eq!(c.running(1000.0), (Some(50.0), Some(1.0)));
        assert_eq!(c.running(1500.0), (Some(100.0), Some(1.0)));
        // empty window keeps the last value
        assert_eq!(c.running(5000.0), (Some(100.0), Some(1.0)));
    }

    #[test]
    fn timeline_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ts.csv");
        let mut c = Collector::new(vec![meta(0, TierId::Low)], 1000.0, 0.3);
        c.sample_timeline(750.0, 1, None, 0, "InceptionV3");
        c.record_outcome(&outcome(0, 800.0, Origin::Local, true, false)).unwrap();
        c.record_batch(4);
        c.record_batch(8);
        c.sample_timeline(2250.0, 1, Some(0.4), 3, "InceptionV3");
        write_timeline(&path, c.timeline()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&TIMESERIES_HEADER.join(",")));
        let back = read_timeline(&path).unwrap();
        assert_eq!(back, c.timeline());
        assert_eq!(back[0].mean_threshold, 0.3);
        assert_eq!(back[1].batch_size, 6.0);
    }

    #[test]
    fn sweep_aggregation() {
        let mk = |n: usize, thr: f64| RunReport {
            schema_version: 1,
            scenario: "s".into(),
            policy: "static".into(),
            seed: 0,
            device_count: n,
            config_digest: String::new(),
            overall: Aggregate {
                devices: n,
                samples: 1,
                server_samples: 0,
                accuracy: 0.7,
                slo_satisfaction: 100.0,
                forward_fraction: 0.0,
            },
            per_tier: BTreeMap::new(),
            per_device: vec![],
            system_throughput: thr,
            server_throughput: 0.0,
            makespan_ms: 1.0,
            mean_batch_size: 0.0,
            batches: 0,
            initial_model: String::new(),
            final_model: String::new(),
            switches: vec![],
            events_dispatched: 0,
            events_pending: 0,
        };
        let reports = [mk(2, 10.0), mk(2, 20.0), mk(2, 30.0), mk(4, 5.0)];
        let s = SweepReport::from_reports(&reports);
        let row = s.get(2, "system_throughput").unwrap();
        assert_eq!((row.seed_count, row.mean, row.min, row.max), (3, 20.0, 10.0, 30.0));
        assert_eq!(s.get(4, "system_throughput").unwrap().seed_count, 1);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        s.write_csv(&path).unwrap();
        assert_eq!(SweepReport::read_csv(&path).unwrap(), s);
    }
}
