//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};

use cascade_sim::model::{ServerModelProfile, TierId};
use cascade_sim::scenario::ScenarioConfig;
use cascade_sim::scheduler::{InitialThreshold, PolicyConfig, PolicyKind};
use cascade_sim::traces::{generate_trace, Trace, TraceGenSpec};

pub const SLOW: &str = "Slow";

/// A server slow enough that a single low-end device builds a queue, so the
/// oracle exercises batching and not only the idle path.
pub fn slow_server() -> ServerModelProfile {
    ServerModelProfile::new(SLOW, 0.80, &[(1, 70.0), (64, 300.0)], 64)
}

/// Batch latency of [`slow_server`], written out independently.
pub fn slow_latency(b: usize) -> f64 {
    70.0 + (b as f64 - 1.0) * (230.0 / 63.0)
}

pub fn oracle_config(threshold: f64, n_samples: usize) -> ScenarioConfig {
    let mut policy = PolicyConfig::new(PolicyKind::Static);
    policy.initial_threshold = InitialThreshold::Fixed(threshold);
    let mut cfg = ScenarioConfig::homogeneous("oracle", TierId::Low, 1, 100.0, SLOW, policy);
    cfg.server.models = vec![slow_server()];
    cfg.devices[0].n_samples = n_samples;
    cfg.seed = 7;
    cfg
}

pub fn oracle_trace(n: usize, seed: u64) -> Trace {
    let heavy: BTreeMap<String, f64> = [(SLOW.to_string(), 0.80)].into();
    generate_trace(&TraceGenSpec::new(0.7185, heavy, seed), n).unwrap()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSample {
    pub index: usize,
    pub server: bool,
    pub finish_ms: f64,
    pub latency_ms: f64,
    pub correct: bool,
}

#[derive(Debug, Clone)]
pub struct OracleRun {
    /// Indexed by trace position.
    pub samples: Vec<OracleSample>,
    pub batches: u64,
    pub batch_items: u64,
}

impl OracleRun {
    pub fn local(&self) -> u64 {
        self.samples.iter().filter(|s| !s.server).count() as u64
    }

    pub fn server(&self) -> u64 {
        self.samples.iter().filter(|s| s.server).count() as u64
    }

    pub fn correct(&self) -> u64 {
        self.samples.iter().filter(|s| s.correct).count() as u64
    }

    pub fn slo_met(&self, slo_ms: f64) -> u64 {
        self.samples.iter().filter(|s| s.latency_ms <= slo_ms).count() as u64
    }

    pub fn makespan_ms(&self) -> f64 {
        self.samples.iter().map(|s| s.finish_ms).fold(0.0, f64::max)
    }
}

/// Step-through of one device feeding one FIFO server with zero network
/// delay. Inference `k` runs over `[k t, (k+1) t]`. The server, whenever it
/// is free and has work, takes the largest power of two not exceeding the
/// queue (capped at `max_batch`).
pub fn single_device_oracle(
    trace: &Trace,
    n: usize,
    t_inf: f64,
    threshold: f64,
    latency: impl Fn(usize) -> f64,
    max_batch: usize,
) -> OracleRun {
    let mut samples: Vec<Option<OracleSample>> = vec![None; n];
    let mut arrivals = Vec::new();
    for (k, r) in trace.records.iter().take(n).enumerate() {
        let done = (k + 1) as f64 * t_inf;
        if r.bvsb >= threshold {
            samples[k] = Some(OracleSample {
                index: k,
                server: false,
                finish_ms: done,
                latency_ms: t_inf,
                correct: r.light_correct,
            });
        } else {
            arrivals.push((k, done));
        }
    }

    let mut free_at = 0.0;
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut next = 0;
    let (mut batches, mut items) = (0, 0);
    // false once the server has sat idle until `free_at`
    let mut busy = true;
    loop {
        while next < arrivals.len() && arrivals[next].1 <= free_at {
            assert!(
                !busy || (arrivals[next].1 - free_at).abs() > 1e-6,
                "fixture has an arrival coinciding with a batch completion"
            );
            queue.push_back(arrivals[next].0);
            next += 1;
        }
        if queue.is_empty() {
            if next == arrivals.len() {
                break;
            }
            free_at = arrivals[next].1;
            busy = false;
            continue;
        }
        let cap = queue.len().min(max_batch);
        let b = (0..=6).map(|p| 1usize << p).filter(|&b| b <= cap).max().unwrap();
        let finish = free_at + latency(b);
        for k in queue.drain(..b) {
            samples[k] = Some(OracleSample {
                index: k,
                server: true,
                finish_ms: finish,
                latency_ms: finish - k as f64 * t_inf,
                correct: trace.records[k].heavy_correct[0],
            });
        }
        batches += 1;
        items += b as u64;
        free_at = finish;
        busy = true;
    }
    OracleRun {
        samples: samples.into_iter().map(Option::unwrap).collect(),
        batches,
        batch_items: items,
    }
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs.iter().copied()), mean(ys.iter().copied()));
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Ordinary least squares `(intercept, slope)`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let (mx, my) = (mean(xs.iter().copied()), mean(ys.iter().copied()));
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}
