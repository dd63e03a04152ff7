//! Domain types shared across the simulator and the closed-form congestion
//! analytics: how fast devices push work at the server versus how fast the
//! server can drain it.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Batch sizes the server may dispatch.
pub const ALLOWED_BATCHES: [u32; 7] = [1, 2, 4, 8, 16, 32, 64];

pub fn is_allowed_batch(b: u32) -> bool {
    ALLOWED_BATCHES.contains(&b)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum TierId {
    Low,
    Mid,
    High,
    Custom(String),
}

impl TierId {
    pub fn as_str(&self) -> &str {
        match self {
            TierId::Low => "low",
            TierId::Mid => "mid",
            TierId::High => "high",
            TierId::Custom(s) => s,
        }
    }
}

impl From<String> for TierId {
    fn from(s: String) -> Self {
        match s.as_str() {
            "low" => TierId::Low,
            "mid" => TierId::Mid,
            "high" => TierId::High,
            _ => TierId::Custom(s),
        }
    }
}

impl From<&str> for TierId {
    fn from(s: &str) -> Self {
        TierId::from(s.to_string())
    }
}

impl From<TierId> for String {
    fn from(t: TierId) -> Self {
        t.as_str().to_string()
    }
}

impl fmt::Display for TierId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub usize);

impl DeviceId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dev{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceSource {
    Synthetic,
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub device_id: DeviceId,
    pub tier: TierId,
    pub light_model: String,
    pub light_accuracy: f64,
    pub t_inf_ms: f64,
    pub slo_ms: f64,
    /// Percentage points.
    pub sr_target: f64,
    pub n_samples: usize,
    pub trace_source: TraceSource,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_inf_ms > 0.0 && self.t_inf_ms.is_finite()) {
            return Err(Error::validation(format!(
                "{}: t_inf_ms must be > 0, got {}",
                self.device_id, self.t_inf_ms
            )));
        }
        if !(self.slo_ms > 0.0 && self.slo_ms.is_finite()) {
            return Err(Error::validation(format!(
                "{}: slo_ms must be > 0, got {}",
                self.device_id, self.slo_ms
            )));
        }
        if !(0.0..=100.0).contains(&self.sr_target) {
            return Err(Error::validation(format!(
                "{}: sr_target must lie in [0, 100], got {}",
                self.device_id, self.sr_target
            )));
        }
        Ok(())
    }
}

/// A device-side (light) model as measured on its host device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightModelProfile {
    pub model_id: String,
    pub tier: TierId,
    pub t_inf_ms: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerModelProfile {
    pub model_id: String,
    pub accuracy: f64,
    /// `(batch_size, batch_latency_ms)`, strictly increasing in batch size.
    pub latency_anchors: Vec<(u32, f64)>,
    pub max_batch: u32,
    /// Per-sample slope used when only one anchor is given. Defaults to 5% of
    /// the anchor latency.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marginal_cost_ms: Option<f64>,
}

impl ServerModelProfile {
    pub fn new(model_id: &str, accuracy: f64, anchors: &[(u32, f64)], max_batch: u32) -> Self {
        Self {
            model_id: model_id.to_string(),
            accuracy,
            latency_anchors: anchors.to_vec(),
            max_batch,
            marginal_cost_ms: None,
        }
    }

    /// Latency of one batch of size `b`, piecewise linear through the anchors.
    pub fn batch_latency_ms(&self, b: u32) -> f64 {
        let anchors = &self.latency_anchors;
        let b = b as f64;
        if anchors.len() == 1 {
            let (b0, l0) = (anchors[0].0 as f64, anchors[0].1);
            let slope = self.marginal_cost_ms.unwrap_or(0.05 * l0);
            return l0 + slope * (b - b0);
        }
        let seg = anchors
            .windows(2)
            .position(|w| b <= w[1].0 as f64)
            .unwrap_or(anchors.len() - 2);
        let (b0, l0) = (anchors[seg].0 as f64, anchors[seg].1);
        let (b1, l1) = (anchors[seg + 1].0 as f64, anchors[seg + 1].1);
        l0 + (l1 - l0) / (b1 - b0) * (b - b0)
    }

    /// Batch-1 latency, used to order a catalog by speed.
    pub fn unit_latency_ms(&self) -> f64 {
        self.batch_latency_ms(1)
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.model_id;
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(Error::validation(format!("{id}: accuracy must lie in [0, 1]")));
        }
        if self.latency_anchors.is_empty() {
            return Err(Error::validation(format!("{id}: at least one latency anchor is required")));
        }
        if !is_allowed_batch(self.max_batch) {
            return Err(Error::validation(format!(
                "{id}: max_batch {} is not in the allowed batch set {:?}",
                self.max_batch, ALLOWED_BATCHES
            )));
        }
        for &(b, l) in &self.latency_anchors {
            if !is_allowed_batch(b) {
                return Err(Error::validation(format!("{id}: anchor batch {b} not in allowed set")));
            }
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::validation(format!("{id}: anchor latency must be > 0")));
            }
        }
        for w in self.latency_anchors.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::validation(format!(
                    "{id}: anchors must be strictly increasing in batch size"
                )));
            }
            if w[1].1 < w[0].1 {
                return Err(Error::validation(format!(
                    "{id}: batch latency must be non-decreasing in batch size"
                )));
            }
        }
        if let Some(m) = self.marginal_cost_ms {
            if !(m >= 0.0 && m.is_finite()) {
                return Err(Error::validation(format!("{id}: marginal_cost_ms must be >= 0")));
            }
        }
        let mut prev_tp = 0.0;
        for b in ALLOWED_BATCHES.iter().copied().filter(|&b| b <= self.max_batch) {
            let lat = self.batch_latency_ms(b);
            if lat <= 0.0 {
                return Err(Error::validation(format!(
                    "{id}: extrapolated latency at batch {b} is not positive"
                )));
            }
            let tp = b as f64 / lat;
            if tp + 1e-12 < prev_tp {
                return Err(Error::validation(format!(
                    "{id}: throughput decreases at batch {b}; lower max_batch"
                )));
            }
            prev_tp = tp;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloPolicy {
    /// Length of the satisfaction-rate reporting window, seconds.
    pub window_s: f64,
    /// Default target satisfaction rate, percentage points.
    pub sr_target_default: f64,
}

impl Default for SloPolicy {
    fn default() -> Self {
        Self {
            window_s: 1.5,
            sr_target_default: 95.0,
        }
    }
}

impl SloPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > 0.0 && self.window_s.is_finite()) {
            return Err(Error::validation("slo.window_s must be > 0"));
        }
        if !(0.0..=100.0).contains(&self.sr_target_default) {
            return Err(Error::validation("slo.sr_target_default must lie in [0, 100]"));
        }
        Ok(())
    }

    pub fn window_ms(&self) -> f64 {
        self.window_s * 1000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CongestionState {
    Underutilized,
    Equilibrium,
    Overloaded,
}

pub(crate) fn ms_to_s(ms: f64) -> f64 {
    ms / 1000.0
}

/// Aggregate forwarding rate at the server, requests/second, from
/// `(forward_probability, t_inf_ms)` per device.
pub fn arrival_rate(devices: &[(f64, f64)]) -> Result<f64> {
    let mut total = 0.0;
    for (i, &(p, t_inf)) in devices.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::validation(format!(
                "device {i}: forwarding probability {p} outside [0, 1]"
            )));
        }
        if !(t_inf > 0.0) {
            return Err(Error::validation(format!(
                "device {i}: inference latency {t_inf} ms must be > 0"
            )));
        }
        total += p / ms_to_s(t_inf);
    }
    Ok(total)
}

/// Samples/second the deployed model sustains at a fixed batch size.
pub fn server_throughput(model: &ServerModelProfile, batch: u32) -> Result<f64> {
    if !is_allowed_batch(batch) {
        return Err(Error::validation(format!("batch {batch} not in allowed set")));
    }
    if batch > model.max_batch {
        return Err(Error::validation(format!(
            "batch {batch} exceeds max_batch {} of {}",
            model.max_batch, model.model_id
        )));
    }
    Ok(batch as f64 / ms_to_s(model.batch_latency_ms(batch)))
}

pub fn classify_congestion(ar: f64, t_server: f64, tol: f64) -> Result<CongestionState> {
    if !(t_server > 0.0) {
        return Err(Error::validation("server throughput must be > 0"));
    }
    if ar < 0.0 || tol < 0.0 {
        return Err(Error::validation("arrival rate and tolerance must be >= 0"));
    }
    Ok(if ar > t_server * (1.0 + tol) {
        CongestionState::Overloaded
    } else if ar < t_server * (1.0 - tol) {
        CongestionState::Underutilized
    } else {
        CongestionState::Equilibrium
    })
}

/// Built-in model profiles. Device latencies are CPU averages at batch 1;
/// server anchors beyond batch 1 are back-computed from saturation throughputs.
pub mod defaults {
    use super::*;

    pub const MOBILENET_V2: &str = "MobileNetV2";
    pub const EFFICIENTNET_LITE0: &str = "EfficientNetLite0";
    pub const EFFICIENTNET_B0: &str = "EfficientNetB0";
    pub const MOBILEVIT_XS: &str = "MobileViT-x-small";
    pub const INCEPTION_V3: &str = "InceptionV3";
    pub const EFFICIENTNET_B3: &str = "EfficientNetB3";
    pub const DEIT_BASE: &str = "DeiT-Base-Distilled";

    pub fn light_models() -> Vec<LightModelProfile> {
        let lm = |id: &str, tier: TierId, t: f64, acc: f64| LightModelProfile {
            model_id: id.to_string(),
            tier,
            t_inf_ms: t,
            accuracy: acc,
        };
        vec![
            lm(MOBILENET_V2, TierId::Low, 31.0, 0.7185),
            lm(EFFICIENTNET_LITE0, TierId::Mid, 43.0, 0.7502),
            lm(EFFICIENTNET_B0, TierId::High, 33.0, 0.7704),
            lm(MOBILEVIT_XS, TierId::Custom("transformer".into()), 57.0, 0.7464),
        ]
    }

    pub fn server_models() -> Vec<ServerModelProfile> {
        vec![
            ServerModelProfile::new(INCEPTION_V3, 0.7829, &[(1, 15.0), (64, 64.0)], 64),
            ServerModelProfile::new(EFFICIENTNET_B3, 0.8149, &[(1, 25.0), (16, 53.3)], 16),
            ServerModelProfile::new(DEIT_BASE, 0.8341, &[(1, 14.0)], 64),
        ]
    }

    pub fn light_model(id: &str) -> Option<LightModelProfile> {
        light_models().into_iter().find(|m| m.model_id == id)
    }

    pub fn server_model(id: &str) -> Option<ServerModelProfile> {
        server_models().into_iter().find(|m| m.model_id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn arrival_rate_examples() {
        assert_relative_eq!(arrival_rate(&[(0.3, 31.0)]).unwrap(), 0.3 / 0.031, epsilon = 1e-12);
        assert_relative_eq!(arrival_rate(&[(0.3, 31.0)]).unwrap(), 9.677, epsilon = 1e-3);
        assert_eq!(arrival_rate(&[(0.0, 31.0)]).unwrap(), 0.0);
        let ten = vec![(0.3, 31.0); 10];
        assert_relative_eq!(arrival_rate(&ten).unwrap(), 96.77, epsilon = 1e-2);
    }

    #[test]
    fn arrival_rate_names_offending_device() {
        let err = arrival_rate(&[(0.3, 31.0), (1.2, 31.0)]).unwrap_err().to_string();
        assert!(err.contains("device 1"), "{err}");
        let err = arrival_rate(&[(0.3, 0.0)]).unwrap_err().to_string();
        assert!(err.contains("device 0"), "{err}");
    }

    #[test]
    fn default_server_throughputs() {
        let inc = defaults::server_model(defaults::INCEPTION_V3).unwrap();
        let eff = defaults::server_model(defaults::EFFICIENTNET_B3).unwrap();
        assert_relative_eq!(server_throughput(&inc, 1).unwrap(), 66.666_666, epsilon = 1e-4);
        assert_relative_eq!(server_throughput(&inc, 64).unwrap(), 1000.0, epsilon = 1e-9);
        assert_relative_eq!(server_throughput(&eff, 16).unwrap(), 300.0, max_relative = 0.002);
        assert!(server_throughput(&eff, 32).is_err());
        assert!(server_throughput(&inc, 3).is_err());
    }

    #[test]
    fn interpolation_and_extrapolation() {
        let inc = defaults::server_model(defaults::INCEPTION_V3).unwrap();
        // Between anchors: 15 + 49/63 * 7
        assert_relative_eq!(inc.batch_latency_ms(8), 15.0 + 49.0 / 63.0 * 7.0, epsilon = 1e-12);
        let mut two = ServerModelProfile::new("x", 0.5, &[(1, 10.0), (4, 13.0)], 16);
        two.validate().unwrap();
        // Beyond the last anchor the last segment's slope (1 ms/sample) continues.
        assert_relative_eq!(two.batch_latency_ms(16), 25.0, epsilon = 1e-12);
        two.max_batch = 64;
        two.validate().unwrap();
        let deit = defaults::server_model(defaults::DEIT_BASE).unwrap();
        assert_relative_eq!(deit.batch_latency_ms(1), 14.0);
        assert_relative_eq!(deit.batch_latency_ms(3), 14.0 * (1.0 + 0.05 * 2.0), epsilon = 1e-12);
    }

    #[test]
    fn defaults_validate() {
        for m in defaults::server_models() {
            m.validate().unwrap();
        }
        assert_eq!(defaults::server_model(defaults::EFFICIENTNET_B3).unwrap().max_batch, 16);
    }

    #[test]
    fn profile_validation_rejects_bad_anchors() {
        let bad = ServerModelProfile::new("x", 0.5, &[(4, 10.0), (2, 12.0)], 64);
        assert!(bad.validate().is_err());
        let dec = ServerModelProfile::new("x", 0.5, &[(1, 10.0), (2, 9.0)], 64);
        assert!(dec.validate().is_err());
        let not_allowed = ServerModelProfile::new("x", 0.5, &[(1, 10.0)], 48);
        assert!(not_allowed.validate().is_err());
        // Latency grows faster than batch size: throughput falls past batch 2.
        let superlinear = ServerModelProfile::new("x", 0.5, &[(1, 10.0), (2, 12.0), (4, 40.0)], 64);
        assert!(superlinear.validate().is_err());
    }

    #[test]
    fn congestion_states() {
        use CongestionState::*;
        assert_eq!(classify_congestion(50.0, 100.0, 0.01).unwrap(), Underutilized);
        assert_eq!(classify_congestion(100.0, 100.0, 0.01).unwrap(), Equilibrium);
        assert_eq!(classify_congestion(200.0, 100.0, 0.01).unwrap(), Overloaded);
        assert_eq!(classify_congestion(101.0, 100.0, 0.01).unwrap(), Equilibrium);
        assert_eq!(classify_congestion(99.0, 100.0, 0.01).unwrap(), Equilibrium);
        assert!(classify_congestion(1.0, 0.0, 0.01).is_err());
    }

    #[test]
    fn tier_labels_round_trip() {
        for t in ["low", "mid", "high", "transformer"] {
            assert_eq!(String::from(TierId::from(t)), t);
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn arrival_rate_is_additive(
                a in prop::collection::vec((0.0f64..=1.0, 1.0f64..200.0), 0..20),
                b in prop::collection::vec((0.0f64..=1.0, 1.0f64..200.0), 0..20),
            ) {
                let joint: Vec<_> = a.iter().chain(b.iter()).copied().collect();
                let lhs = arrival_rate(&joint).unwrap();
                let rhs = arrival_rate(&a).unwrap() + arrival_rate(&b).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
            }

            #[test]
            fn throughput_non_decreasing_for_valid_profiles(
                l1 in 1.0f64..100.0,
                extra in prop::collection::vec(0.0f64..1.0, 6),
                max_idx in 0usize..7,
            ) {
                // Build anchors whose per-sample cost never exceeds the batch-1 cost.
                let mut anchors = vec![(1u32, l1)];
                let mut last = l1;
                for (i, f) in extra.iter().enumerate() {
                    let b = ALLOWED_BATCHES[i + 1];
                    let prev_b = ALLOWED_BATCHES[i];
                    // latency grows by at most the previous per-sample latency times added samples
                    let lat = last + f * last / prev_b as f64 * (b - prev_b) as f64;
                    anchors.push((b, lat));
                    last = lat;
                }
                let p = ServerModelProfile::new("p", 0.5, &anchors, ALLOWED_BATCHES[max_idx]);
                prop_assert!(p.validate().is_ok());
                let mut prev = 0.0;
                for b in ALLOWED_BATCHES.iter().copied().filter(|&b| b <= p.max_batch) {
                    let tp = server_throughput(&p, b).unwrap();
                    prop_assert!(tp + 1e-9 >= prev);
                    prev = tp;
                }
            }

            #[test]
            fn congestion_boundaries_are_equilibrium(t in 1.0f64..1e4, tol in 0.0f64..0.5) {
                let hi = t * (1.0 + tol);
                let lo = t * (1.0 - tol);
                prop_assert_eq!(classify_congestion(hi, t, tol).unwrap(), CongestionState::Equilibrium);
                prop_assert_eq!(classify_congestion(lo, t, tol).unwrap(), CongestionState::Equilibrium);
            }
        }
    }
}
