//! Scenario configuration: a TOML document describing devices, the server
//! catalog, the policy and the run environment.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{defaults, DeviceId, DeviceProfile, ServerModelProfile, SloPolicy, TierId, TraceSource};
use crate::rng::child_rng;
use crate::scheduler::PolicyConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub devices: Vec<DeviceTemplate>,
    pub server: ServerConfig,
    pub policy: PolicyConfig,
    #[serde(default)]
    pub slo: SloPolicy,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intermittent: Option<IntermittentSpec>,
    #[serde(default)]
    pub traces: TraceConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    /// Forces generation to stop at this virtual time; results still drain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceTemplate {
    pub tier: TierId,
    #[serde(default = "default_count")]
    pub count: usize,
    /// Defaults to the built-in light model of the tier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub light_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_inf_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub light_accuracy: Option<f64>,
    pub slo_ms: f64,
    /// Defaults to `slo.sr_target_default`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sr_target: Option<f64>,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceSource>,
    #[serde(default)]
    pub jitter_pct: f64,
}

fn default_count() -> usize {
    1
}

fn default_samples() -> usize {
    5000
}

impl DeviceTemplate {
    pub fn new(tier: TierId, count: usize, slo_ms: f64) -> Self {
        Self {
            tier,
            count,
            light_model: None,
            t_inf_ms: None,
            light_accuracy: None,
            slo_ms,
            sr_target: None,
            n_samples: default_samples(),
            trace: None,
            jitter_pct: 0.0,
        }
    }

    /// `(model_id, t_inf_ms, accuracy)` after applying built-in defaults.
    pub fn light_profile(&self) -> Result<(String, f64, f64)> {
        let builtin = match &self.light_model {
            Some(id) => defaults::light_model(id),
            None => defaults::light_models().into_iter().find(|m| m.tier == self.tier),
        };
        let model_id = self
            .light_model
            .clone()
            .or_else(|| builtin.as_ref().map(|m| m.model_id.clone()))
            .unwrap_or_else(|| format!("{}-light", self.tier));
        let t_inf = self.t_inf_ms.or(builtin.as_ref().map(|m| m.t_inf_ms));
        let acc = self.light_accuracy.or(builtin.as_ref().map(|m| m.accuracy));
        match (t_inf, acc) {
            (Some(t), Some(a)) => Ok((model_id, t, a)),
            _ => Err(Error::validation(format!(
                "tier {}: light model {model_id} has no built-in profile; set t_inf_ms and light_accuracy",
                self.tier
            ))),
        }
    }

    pub fn trace_source(&self) -> TraceSource {
        self.trace.clone().unwrap_or(TraceSource::Synthetic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub deployed: String,
    /// Model ids available for switching; defaults to just `deployed`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub catalog: Vec<String>,
    /// Profiles overriding or extending the built-in ones.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<ServerModelProfile>,
    #[serde(default)]
    pub swap_delay_ms: f64,
    /// Defaults to ten SLO windows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cooldown_s: Option<f64>,
    #[serde(default = "default_history")]
    pub history_len: usize,
}

fn default_history() -> usize {
    32
}

impl ServerConfig {
    pub fn new(deployed: &str) -> Self {
        Self {
            deployed: deployed.to_string(),
            catalog: Vec::new(),
            models: Vec::new(),
            swap_delay_ms: 0.0,
            cooldown_s: None,
            history_len: default_history(),
        }
    }

    pub fn resolved_catalog(&self) -> Result<Vec<ServerModelProfile>> {
        let mut names: Vec<String> = if self.catalog.is_empty() {
            vec![self.deployed.clone()]
        } else {
            self.catalog.clone()
        };
        for m in &self.models {
            if !names.contains(&m.model_id) {
                names.push(m.model_id.clone());
            }
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(names.len());
        for name in names {
            if !seen.insert(name.clone()) {
                return Err(Error::validation(format!("server model {name} listed twice")));
            }
            let profile = self
                .models
                .iter()
                .find(|m| m.model_id == name)
                .cloned()
                .or_else(|| defaults::server_model(&name))
                .ok_or_else(|| Error::validation(format!("unknown server model {name}")))?;
            profile.validate()?;
            out.push(profile);
        }
        if !out.iter().any(|m| m.model_id == self.deployed) {
            return Err(Error::validation(format!(
                "deployed model {} is not in the catalog",
                self.deployed
            )));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default)]
    pub uplink_ms: f64,
    #[serde(default)]
    pub downlink_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    #[serde(default = "default_correct_shape")]
    pub bvsb_correct_shape: (f64, f64),
    #[serde(default = "default_incorrect_shape")]
    pub bvsb_incorrect_shape: (f64, f64),
    /// Per server model; missing entries use the nested default.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub heavy_given_light_wrong: BTreeMap<String, f64>,
    #[serde(default = "default_calibration_samples")]
    pub calibration_samples: usize,
    #[serde(default = "default_grid_step")]
    pub grid_step: f64,
    #[serde(default = "default_q_low")]
    pub q_low: f64,
    #[serde(default = "default_q_high")]
    pub q_high: f64,
}

fn default_correct_shape() -> (f64, f64) {
    (8.0, 2.0)
}

fn default_incorrect_shape() -> (f64, f64) {
    (2.0, 5.0)
}

fn default_calibration_samples() -> usize {
    10_000
}

fn default_grid_step() -> f64 {
    0.001
}

fn default_q_low() -> f64 {
    0.05
}

fn default_q_high() -> f64 {
    0.60
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            bvsb_correct_shape: default_correct_shape(),
            bvsb_incorrect_shape: default_incorrect_shape(),
            heavy_given_light_wrong: BTreeMap::new(),
            calibration_samples: default_calibration_samples(),
            grid_step: default_grid_step(),
            q_low: default_q_low(),
            q_high: default_q_high(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default = "default_running_window")]
    pub running_window_s: f64,
}

fn default_running_window() -> f64 {
    10.0
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            running_window_s: default_running_window(),
        }
    }
}

/// How long an offline device stays away.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OfflineDuration {
    /// `scale / Y` with `Y ~ Normal(shape, 1)` truncated to `Y > 0`, the
    /// scale chosen as `median_s * shape` so the median lands on `median_s`.
    Alpha { shape: f64, median_s: f64 },
    Exponential { mean_s: f64 },
}

impl Default for OfflineDuration {
    fn default() -> Self {
        OfflineDuration::Alpha {
            shape: 60.0,
            median_s: 60.0,
        }
    }
}

impl OfflineDuration {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            OfflineDuration::Alpha { shape, median_s } => shape > 0.0 && median_s > 0.0,
            OfflineDuration::Exponential { mean_s } => mean_s > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::validation("offline duration parameters must be positive"))
        }
    }

    /// One duration in milliseconds.
    pub fn sample_ms<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            OfflineDuration::Alpha { shape, median_s } => {
                let normal = Normal::new(shape, 1.0).expect("unit std");
                let y = loop {
                    let y: f64 = normal.sample(rng);
                    if y > 0.0 {
                        break y;
                    }
                };
                median_s * shape / y * 1000.0
            }
            OfflineDuration::Exponential { mean_s } => {
                Exp::new(1.0 / mean_s).expect("positive rate").sample(rng) * 1000.0
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntermittentSpec {
    #[serde(default = "default_offline_probability")]
    pub offline_probability: f64,
    /// Offline point mean and std, as fractions of the device's sample count.
    #[serde(default = "default_point_mean")]
    pub point_mean_frac: f64,
    #[serde(default = "default_point_std")]
    pub point_std_frac: f64,
    #[serde(default)]
    pub duration: OfflineDuration,
}

fn default_offline_probability() -> f64 {
    0.5
}

fn default_point_mean() -> f64 {
    0.5
}

fn default_point_std() -> f64 {
    0.2
}

impl Default for IntermittentSpec {
    fn default() -> Self {
        Self {
            offline_probability: default_offline_probability(),
            point_mean_frac: default_point_mean(),
            point_std_frac: default_point_std(),
            duration: OfflineDuration::default(),
        }
    }
}

impl IntermittentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.offline_probability) {
            return Err(Error::validation("offline_probability must lie in [0, 1]"));
        }
        if !(self.point_std_frac >= 0.0 && self.point_mean_frac.is_finite()) {
            return Err(Error::validation("offline point parameters are invalid"));
        }
        self.duration.validate()
    }
}

/// Offline schedule of one device: at most one `(sample_index, duration_ms)`.
/// Draws come from the `("intermittent", device)` child stream of `seed`.
pub fn device_offline_schedule(spec: &IntermittentSpec, n: usize, seed: u64, device: usize) -> Vec<(usize, f64)> {
    let mut rng = child_rng(seed, "intermittent", device as u64);
    let goes = rand::Rng::random::<f64>(&mut rng) < spec.offline_probability;
    if !goes || n == 0 {
        return Vec::new();
    }
    let n_f = n as f64;
    let point = Normal::new(spec.point_mean_frac * n_f, spec.point_std_frac * n_f)
        .expect("validated std")
        .sample(&mut rng);
    let index = point.round().clamp(0.0, n_f) as usize;
    vec![(index, spec.duration.sample_ms(&mut rng))]
}

pub fn gen_intermittent_schedule(
    spec: &IntermittentSpec,
    devices: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<(usize, f64)>>> {
    if n == 0 {
        return Err(Error::validation("intermittent schedule needs N > 0"));
    }
    spec.validate()?;
    Ok((0..devices).map(|d| device_offline_schedule(spec, n, seed, d)).collect())
}

/// Largest-remainder split of `total` in proportion to `weights`; ties go to
/// the earlier entry.
pub fn apportion(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|&w| w * total / sum).collect();
    let mut rest: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| (w * total % sum, i))
        .collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = total - out.iter().sum::<usize>();
    for &(_, i) in rest.iter().take(missing) {
        out[i] += 1;
    }
    out
}

impl ScenarioConfig {
    /// A one-tier scenario with built-in defaults.
    pub fn homogeneous(name: &str, tier: TierId, count: usize, slo_ms: f64, server: &str, policy: PolicyConfig) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            name: name.to_string(),
            seed: 0,
            devices: vec![DeviceTemplate::new(tier, count, slo_ms)],
            server: ServerConfig::new(server),
            policy,
            slo: SloPolicy::default(),
            network: NetworkConfig::default(),
            intermittent: None,
            traces: TraceConfig::default(),
            metrics: MetricsConfig::default(),
            max_time_s: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() as u64 + 1)
                .unwrap_or(0);
            Error::Parse {
                path: "<config>".into(),
                line,
                message: e.message().to_string(),
            }
        })
    }

    /// Reads and validates a config. Relative trace paths resolve against
    /// the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                message,
            },
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for t in &mut cfg.devices {
            if let Some(TraceSource::File { path: p }) = &mut t.trace {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml_string()?.as_bytes())))
    }

    pub fn device_count(&self) -> usize {
        self.devices.iter().map(|t| t.count).sum()
    }

    /// Copy with the templates rescaled to `n` devices in total.
    pub fn with_device_count(&self, n: usize) -> Self {
        let mut cfg = self.clone();
        let counts = apportion(&self.devices.iter().map(|t| t.count).collect::<Vec<_>>(), n);
        for (t, c) in cfg.devices.iter_mut().zip(counts) {
            t.count = c;
        }
        cfg
    }

    pub fn with_slo_ms(&self, slo_ms: f64) -> Self {
        let mut cfg = self.clone();
        for t in &mut cfg.devices {
            t.slo_ms = slo_ms;
        }
        cfg
    }

    /// `{name}_{policy}_slo{ms}`, with `slomixed` when templates differ.
    pub fn label(&self) -> String {
        let slos: BTreeSet<String> = self.devices.iter().map(|t| format!("{}", t.slo_ms)).collect();
        let slo = if slos.len() == 1 {
            slos.into_iter().next().unwrap_or_default()
        } else {
            "mixed".into()
        };
        format!("{}_{}_slo{}", self.name, self.policy.kind.label(), slo)
    }

    pub fn cooldown_ms(&self) -> f64 {
        self.server
            .cooldown_s
            .map(|s| s * 1000.0)
            .unwrap_or(10.0 * self.slo.window_ms())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::validation(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.devices.is_empty() {
            return Err(Error::validation("at least one device template is required"));
        }
        let mut tiers = BTreeSet::new();
        for t in &self.devices {
            if !tiers.insert(&t.tier) {
                return Err(Error::validation(format!("tier {} appears in more than one template", t.tier)));
            }
            if !(0.0..=100.0).contains(&t.jitter_pct) {
                return Err(Error::validation(format!("tier {}: jitter_pct must lie in [0, 100]", t.tier)));
            }
            if let TraceSource::File { path } = t.trace_source() {
                if !path.is_file() {
                    return Err(Error::validation(format!(
                        "tier {}: trace file {} does not exist",
                        t.tier,
                        path.display()
                    )));
                }
            }
        }
        for p in self.device_profiles()? {
            p.validate()?;
        }
        self.server.resolved_catalog()?;
        if self.server.history_len == 0 {
            return Err(Error::validation("server.history_len must be > 0"));
        }
        if !(self.server.swap_delay_ms >= 0.0) || self.server.cooldown_s.is_some_and(|c| !(c >= 0.0)) {
            return Err(Error::validation("server swap delay and cooldown must be >= 0"));
        }
        self.policy.validate()?;
        self.slo.validate()?;
        if !(self.network.uplink_ms >= 0.0 && self.network.downlink_ms >= 0.0) {
            return Err(Error::validation("network delays must be >= 0"));
        }
        if let Some(spec) = &self.intermittent {
            spec.validate()?;
        }
        let tc = &self.traces;
        if tc.calibration_samples == 0 {
            return Err(Error::validation("traces.calibration_samples must be > 0"));
        }
        if !(tc.grid_step > 0.0 && tc.grid_step <= 1.0) {
            return Err(Error::validation("traces.grid_step must lie in (0, 1]"));
        }
        if !(0.0 < tc.q_low && tc.q_low < tc.q_high && tc.q_high < 1.0) {
            return Err(Error::validation("traces need 0 < q_low < q_high < 1"));
        }
        if !(self.metrics.running_window_s > 0.0) {
            return Err(Error::validation("metrics.running_window_s must be > 0"));
        }
        if self.max_time_s.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::validation("max_time_s must be > 0"));
        }
        Ok(())
    }

    /// Concrete devices, numbered template by template.
    pub fn device_profiles(&self) -> Result<Vec<DeviceProfile>> {
        let mut out = Vec::with_capacity(self.device_count());
        for t in &self.devices {
            let (light_model, t_inf_ms, light_accuracy) = t.light_profile()?;
            for _ in 0..t.count {
                out.push(DeviceProfile {
                    device_id: DeviceId(out.len()),
                    tier: t.tier.clone(),
                    light_model: light_model.clone(),
                    light_accuracy,
                    t_inf_ms,
                    slo_ms: t.slo_ms,
                    sr_target: t.sr_target.unwrap_or(self.slo.sr_target_default),
                    n_samples: t.n_samples,
                    trace_source: t.trace_source(),
                });
            }
        }
        Ok(out)
    }
}
