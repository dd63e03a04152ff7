//! Server-resident threshold policies.
//!
//! * `MultiTascPP`: every satisfaction-rate report moves the reporting
//!   device's threshold proportionally to its SLO error, then scales it by a
//!   compounding multiplier while the device stays above target. Optionally
//!   swaps the server model when the threshold population says so.
//! * `MultiTascStep`: fixed-step adjustment of every threshold driven by the
//!   server's recent batch sizes.
//! * `Static`: thresholds never move.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DeviceId, ServerModelProfile, TierId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "static")]
    Static,
    #[serde(rename = "multitasc")]
    MultiTascStep,
    #[serde(rename = "multitascpp")]
    MultiTascPP,
}

impl PolicyKind {
    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::Static => "static",
            PolicyKind::MultiTascStep => "multitasc",
            PolicyKind::MultiTascPP => "multitascpp",
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(PolicyKind::Static),
            "multitasc" => Ok(PolicyKind::MultiTascStep),
            "multitascpp" => Ok(PolicyKind::MultiTascPP),
            other => Err(Error::validation(format!(
                "unknown policy {other:?}; expected static, multitasc or multitascpp"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialThreshold {
    /// The Static baseline's calibrated value for the device's tier and the
    /// initially deployed model.
    CalibratedStatic,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    #[serde(default = "default_a")]
    pub a: f64,
    #[serde(default)]
    pub switch_enabled: bool,
    #[serde(default = "default_step")]
    pub step: f64,
    /// Target batch size for the step baseline; defaults to half the
    /// deployed model's max batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimal_batch: Option<f64>,
    #[serde(default = "default_initial")]
    pub initial_threshold: InitialThreshold,
}

fn default_a() -> f64 {
    0.005
}

fn default_step() -> f64 {
    0.05
}

fn default_initial() -> InitialThreshold {
    InitialThreshold::CalibratedStatic
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            a: default_a(),
            switch_enabled: false,
            step: default_step(),
            optimal_batch: None,
            initial_threshold: default_initial(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::validation("policy.a must be > 0"));
        }
        if self.kind == PolicyKind::MultiTascStep && !(self.step > 0.0) {
            return Err(Error::validation("policy.step must be > 0 for the step baseline"));
        }
        if let InitialThreshold::Fixed(c) = self.initial_threshold {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::validation("fixed initial threshold must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdState {
    pub device_id: DeviceId,
    pub threshold: f64,
    pub multiplier: f64,
    pub tier: TierId,
    pub sr_target: f64,
    pub last_update_ms: f64,
    pub active: bool,
}

impl ThresholdState {
    pub fn new(device_id: DeviceId, tier: TierId, sr_target: f64, threshold: f64) -> Self {
        Self {
            device_id,
            threshold: threshold.clamp(0.0, 1.0),
            multiplier: 1.0,
            tier,
            sr_target,
            last_update_ms: 0.0,
            active: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchLimits {
    pub c_lower: f64,
    pub c_upper: BTreeMap<TierId, f64>,
}

/// Proportional correction of a threshold by the SLO error. Unclamped.
pub fn continuous_update(sr_target: f64, sr_update: f64, a: f64, threshold: f64) -> f64 {
    threshold - a * (sr_target - sr_update)
}

/// Multiplier stage applied after [`continuous_update`]. Returns
/// `(threshold_final, next_multiplier)`, or `None` when no device is active.
pub fn apply_multiplier(
    sr_target: f64,
    sr_update: f64,
    thresh_updated: f64,
    m: f64,
    n: usize,
) -> Option<(f64, f64)> {
    if n == 0 {
        return None;
    }
    let (thresh, m_next) = if sr_target < sr_update {
        (m * thresh_updated, m * (1.0 + 0.1 / n as f64))
    } else {
        (thresh_updated, 1.0)
    };
    Some((thresh.clamp(0.0, 1.0), m_next))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SwitchDirection {
    Faster = -1,
    Stay = 0,
    Heavier = 1,
}

/// Model-switch rule over the `(tier, threshold)` pairs of active devices.
pub fn switch_decision<'a, I>(active: I, limits: &SwitchLimits) -> SwitchDirection
where
    I: IntoIterator<Item = (&'a TierId, f64)>,
{
    // tier -> (all below c_lower, all above c_upper)
    let mut tiers: BTreeMap<&TierId, (bool, bool)> = BTreeMap::new();
    for (tier, c) in active {
        let upper = limits.c_upper.get(tier).copied();
        let e = tiers.entry(tier).or_insert((true, true));
        e.0 &= c < limits.c_lower;
        e.1 &= upper.is_some_and(|u| c > u);
    }
    if tiers.is_empty() {
        SwitchDirection::Stay
    } else if tiers.values().any(|&(below, _)| below) {
        SwitchDirection::Faster
    } else if tiers.values().all(|&(_, above)| above) {
        SwitchDirection::Heavier
    } else {
        SwitchDirection::Stay
    }
}

/// Catalog model one step from `deployed` in `direction`: the next faster
/// model at batch 1, or the next more accurate one.
pub fn switch_target<'a>(
    catalog: &'a [ServerModelProfile],
    deployed: &ServerModelProfile,
    direction: SwitchDirection,
) -> Option<&'a ServerModelProfile> {
    match direction {
        SwitchDirection::Stay => None,
        SwitchDirection::Faster => catalog
            .iter()
            .filter(|m| m.unit_latency_ms() < deployed.unit_latency_ms())
            .max_by(|a, b| a.unit_latency_ms().total_cmp(&b.unit_latency_ms())),
        SwitchDirection::Heavier => catalog
            .iter()
            .filter(|m| m.accuracy > deployed.accuracy)
            .min_by(|a, b| a.accuracy.total_cmp(&b.accuracy)),
    }
}

/// New threshold for everyone under the step baseline, or `None` to hold.
pub fn multitasc_step_update(
    recent_batches: impl ExactSizeIterator<Item = u32>,
    optimal_batch: f64,
    step: f64,
    threshold: f64,
) -> Option<f64> {
    let n = recent_batches.len();
    if n == 0 {
        return None;
    }
    let mean = recent_batches.map(f64::from).sum::<f64>() / n as f64;
    let next = if mean > optimal_batch {
        threshold - step
    } else if mean < optimal_batch {
        threshold + step
    } else {
        threshold
    };
    Some(next.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub time_ms: f64,
    pub device: DeviceId,
    pub sr_update: f64,
    pub threshold: f64,
    pub multiplier: f64,
    pub active_devices: usize,
}

#[derive(Debug)]
pub struct Scheduler {
    config: PolicyConfig,
    states: Vec<ThresholdState>,
    limits: Option<SwitchLimits>,
    window_ms: f64,
    updates: Vec<UpdateRecord>,
}

impl Scheduler {
    pub fn new(
        config: PolicyConfig,
        states: Vec<ThresholdState>,
        limits: Option<SwitchLimits>,
        window_ms: f64,
    ) -> Self {
        Self {
            config,
            states,
            limits,
            window_ms,
            updates: Vec::new(),
        }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn states(&self) -> &[ThresholdState] {
        &self.states
    }

    pub fn limits(&self) -> Option<&SwitchLimits> {
        self.limits.as_ref()
    }

    pub fn updates(&self) -> &[UpdateRecord] {
        &self.updates
    }

    pub fn take_updates(&mut self) -> Vec<UpdateRecord> {
        std::mem::take(&mut self.updates)
    }

    pub fn active_count(&self) -> usize {
        self.states.iter().filter(|s| s.active).count()
    }

    /// Mean threshold over active devices.
    pub fn mean_active_threshold(&self) -> Option<f64> {
        let mut active = self.states.iter().filter(|s| s.active).map(|s| s.threshold);
        let first = active.next()?;
        // offsets from the first value keep identical thresholds bit-exact
        let (sum, n) = active.fold((0.0, 1usize), |(s, n), c| (s + (c - first), n + 1));
        Some(first + sum / n as f64)
    }

    fn state_mut(&mut self, device: DeviceId) -> Result<&mut ThresholdState> {
        self.states
            .get_mut(device.index())
            .filter(|s| s.device_id == device)
            .ok_or_else(|| Error::Config(format!("{device} is not registered with the scheduler")))
    }

    /// Processes one satisfaction-rate report. Returns the threshold to send
    /// back to the device, if any.
    pub fn handle_sr_update(&mut self, device: DeviceId, sr_update: f64, now: f64) -> Result<Option<f64>> {
        let st = self.state_mut(device)?;
        st.active = true;
        st.last_update_ms = now;
        if self.config.kind != PolicyKind::MultiTascPP {
            return Ok(None);
        }
        let n = self.active_count();
        let a = self.config.a;
        let st = self.state_mut(device)?;
        let updated = continuous_update(st.sr_target, sr_update, a, st.threshold);
        let Some((threshold, m)) = apply_multiplier(st.sr_target, sr_update, updated, st.multiplier, n) else {
            return Ok(None);
        };
        st.threshold = threshold;
        st.multiplier = m;
        self.updates.push(UpdateRecord {
            time_ms: now,
            device,
            sr_update,
            threshold,
            multiplier: m,
            active_devices: n,
        });
        Ok(Some(threshold))
    }

    /// Devices silent for more than two windows stop counting as active.
    pub fn mark_inactive(&mut self, now: f64) {
        let horizon = 2.0 * self.window_ms + 1e-9;
        for st in &mut self.states {
            if st.active && now - st.last_update_ms > horizon {
                st.active = false;
            }
        }
    }

    pub fn switch_decision(&self) -> SwitchDirection {
        let Some(limits) = &self.limits else {
            return SwitchDirection::Stay;
        };
        switch_decision(
            self.states.iter().filter(|s| s.active).map(|s| (&s.tier, s.threshold)),
            limits,
        )
    }

    /// Model the server should move to, if switching is enabled and warranted.
    pub fn periodic_switch_check<'a>(
        &self,
        catalog: &'a [ServerModelProfile],
        deployed: &ServerModelProfile,
    ) -> Option<&'a ServerModelProfile> {
        if !self.config.switch_enabled || self.active_count() == 0 {
            return None;
        }
        switch_target(catalog, deployed, self.switch_decision())
    }

    /// Step-baseline broadcast. Returns the per-device thresholds to deliver.
    pub fn step_update(
        &mut self,
        recent_batches: impl ExactSizeIterator<Item = u32> + Clone,
        deployed: &ServerModelProfile,
    ) -> Vec<(DeviceId, f64)> {
        if self.config.kind != PolicyKind::MultiTascStep {
            return Vec::new();
        }
        let optimal = self
            .config
            .optimal_batch
            .unwrap_or(deployed.max_batch as f64 / 2.0);
        let step = self.config.step;
        let mut out = Vec::new();
        for st in &mut self.states {
            if let Some(c) = multitasc_step_update(recent_batches.clone(), optimal, step, st.threshold) {
                if c != st.threshold {
                    st.threshold = c;
                    out.push((st.device_id, c));
                }
            }
        }
        out
    }
}
