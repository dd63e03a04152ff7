use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use cascade_sim::model::TraceSource;
use cascade_sim::rng::child_seed;
use cascade_sim::scenario::{device_offline_schedule, IntermittentSpec, ScenarioConfig};
use cascade_sim::scheduler::PolicyKind;
use cascade_sim::sim::{calibrate, SimOptions};
use cascade_sim::traces::{generate_trace, write_trace, TraceGenSpec};
use cascade_sim::{run_scenario, run_sweep, Error};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cascade", version, about = "Multi-device cascade inference simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Root seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<PolicyKind>,
    /// Latency objective applied to every device, ms.
    #[arg(long)]
    slo_ms: Option<f64>,
    /// Output root directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario.
    Run {
        #[command(flatten)]
        common: Common,
        /// Total device count, split across templates by their counts.
        #[arg(long)]
        devices: Option<usize>,
        /// Also write a per-dispatch event log.
        #[arg(long)]
        event_log: bool,
        /// Also write every sample's outcome.
        #[arg(long)]
        outcomes: bool,
    },
    /// Simulate every (device count, seed) pair and aggregate.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        devices: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        event_log: bool,
        #[arg(long)]
        outcomes: bool,
    },
    /// Write one synthetic trace file per device tier.
    GenTraces {
        #[command(flatten)]
        common: Common,
        /// Records per file; defaults to each template's n_samples.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Write calibration curves, Static thresholds and switch limits.
    Calibrate {
        #[command(flatten)]
        common: Common,
    },
    /// Write the offline schedule each device would follow.
    ScheduleIntermittent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        devices: Option<usize>,
    },
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load(common: &Common, devices: Option<usize>) -> anyhow::Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(kind) = common.policy {
        cfg.policy.kind = kind;
    }
    if let Some(slo) = common.slo_ms {
        cfg = cfg.with_slo_ms(slo);
    }
    if let Some(n) = devices {
        cfg = cfg.with_device_count(n);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn execute(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Run {
            common,
            devices,
            event_log,
            outcomes,
        } => {
            let cfg = load(&common, devices)?;
            let out = run_scenario(&cfg, Some(&common.out), SimOptions { event_log, outcomes })?;
            let r = &out.report;
            println!(
                "{}: {} devices, throughput {:.2} samples/s, accuracy {:.4}, SLO satisfaction {:.2}%, makespan {:.0} ms",
                r.scenario,
                r.device_count,
                r.system_throughput,
                r.overall.accuracy,
                r.overall.slo_satisfaction,
                r.makespan_ms
            );
        }
        Command::Sweep {
            common,
            devices,
            seeds,
            event_log,
            outcomes,
        } => {
            let cfg = load(&common, None)?;
            let opts = SimOptions { event_log, outcomes };
            let (sweep, _) = run_sweep(&cfg, &devices, &seeds, Some(&common.out), opts)?;
            println!("devices,metric,mean,min,max");
            for row in sweep.rows.iter().filter(|r| {
                matches!(r.metric.as_str(), "system_throughput" | "accuracy" | "slo_satisfaction")
            }) {
                println!("{},{},{:.4},{:.4},{:.4}", row.devices, row.metric, row.mean, row.min, row.max);
            }
        }
        Command::GenTraces { common, samples } => {
            let cfg = load(&common, None)?;
            let catalog = cfg.server.resolved_catalog()?;
            let heavy: std::collections::BTreeMap<String, f64> = catalog.iter().map(|m| (m.model_id.clone(), m.accuracy)).collect();
            create_dir(&common.out)?;
            for (k, t) in cfg.devices.iter().enumerate() {
                if let TraceSource::File { .. } = t.trace_source() {
                    log::warn!("tier {} reads a trace file; generating a synthetic one anyway", t.tier);
                }
                let (_, _, light_accuracy) = t.light_profile()?;
                let mut spec = TraceGenSpec::new(light_accuracy, heavy.clone(), child_seed(cfg.seed, "trace-file", k as u64));
                spec.bvsb_correct_shape = cfg.traces.bvsb_correct_shape;
                spec.bvsb_incorrect_shape = cfg.traces.bvsb_incorrect_shape;
                spec.heavy_given_light_wrong = cfg.traces.heavy_given_light_wrong.clone();
                let trace = generate_trace(&spec, samples.unwrap_or(t.n_samples))?;
                let path = common.out.join(format!("trace_{}.csv", t.tier));
                write_trace(&path, &trace)?;
                println!("{}: {} records", path.display(), trace.len());
            }
        }
        Command::Calibrate { common } => {
            let mut cfg = load(&common, None)?;
            // limits are reported even when switching is off
            cfg.policy.switch_enabled = true;
            let cal = calibrate(&cfg)?;
            create_dir(&common.out)?;
            for t in &cal.tiers {
                let path = common.out.join(format!("calibration_{}.csv", t.tier));
                t.curve.write_csv(&path)?;
                for (model, c) in &t.static_threshold {
                    println!("tier {} / {model}: static threshold {c}", t.tier);
                }
            }
            if let Some(l) = &cal.limits {
                println!("c_lower {}", l.c_lower);
                for (tier, c) in &l.c_upper {
                    println!("c_upper[{tier}] {c}");
                }
            }
            let summary = serde_json::json!({
                "static_thresholds": cal.tiers.iter().map(|t| (t.tier.to_string(), &t.static_threshold)).collect::<std::collections::BTreeMap<_, _>>(),
                "limits": cal.limits,
            });
            let path = common.out.join("calibration.json");
            std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
        }
        Command::ScheduleIntermittent { common, devices } => {
            let cfg = load(&common, devices)?;
            let spec = cfg.intermittent.unwrap_or_else(IntermittentSpec::default);
            create_dir(&common.out)?;
            let path = common.out.join("intermittent.csv");
            let mut text = String::from("device,n_samples,offline_at,duration_ms\n");
            for p in cfg.device_profiles()? {
                for (idx, dur) in device_offline_schedule(&spec, p.n_samples, cfg.seed, p.device_id.index()) {
                    text.push_str(&format!("{},{},{idx},{dur}\n", p.device_id.index(), p.n_samples));
                }
            }
            std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            print!("{text}");
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.downcast_ref::<Error>().map_or(2, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
