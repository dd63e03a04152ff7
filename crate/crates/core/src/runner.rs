//! Running scenarios and sweeps, and laying out their output files.
//!
//! Layout: `<out>/<scenario>/<count>devices/seed<k>/` holds `report.json`,
//! `timeseries.csv`, `updates.csv` and, when requested, `events.log` and
//! `outcomes.csv`.
//! Sweeps add `<out>/<scenario>/sweep.csv`.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::device::{Origin, SampleOutcome};
use crate::error::{Error, Result};
use crate::metrics::{write_timeline, write_updates, RunReport, SweepReport};
use crate::scenario::ScenarioConfig;
use crate::sim::{simulate, RunOutput, SimOptions};

pub fn cell_dir(out: &Path, cfg: &ScenarioConfig) -> PathBuf {
    out.join(cfg.label())
        .join(format!("{}devices", cfg.device_count()))
        .join(format!("seed{}", cfg.seed))
}

pub fn write_outputs(dir: &Path, output: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    output.report.write_json(&dir.join("report.json"))?;
    write_timeline(&dir.join("timeseries.csv"), &output.timeline)?;
    write_updates(&dir.join("updates.csv"), &output.updates)?;
    if let Some(log) = &output.event_log {
        let path = dir.join("events.log");
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "time_ms,seq,kind,actor").map_err(|e| Error::io(&path, e))?;
        for rec in log {
            writeln!(w, "{rec}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(outcomes) = &output.outcomes {
        write_outcomes(&dir.join("outcomes.csv"), outcomes)?;
    }
    Ok(())
}

pub const OUTCOMES_HEADER: &str = "device,sample_id,origin,finish_ms,latency_ms,slo_met,correct";

pub fn write_outcomes(path: &Path, outcomes: &[SampleOutcome]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{OUTCOMES_HEADER}").map_err(io)?;
    for o in outcomes {
        let origin = match o.origin {
            Origin::Local => "local",
            Origin::Server => "server",
        };
        writeln!(
            w,
            "{},{},{origin},{},{},{},{}",
            o.device.index(),
            o.sample_id,
            o.finish_ms,
            o.latency_ms,
            o.slo_met,
            o.correct
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Simulates one scenario to drain and, given `out`, writes its files.
pub fn run_scenario(cfg: &ScenarioConfig, out: Option<&Path>, opts: SimOptions) -> Result<RunOutput> {
    let output = simulate(cfg, opts)?;
    if let Some(out) = out {
        write_outputs(&cell_dir(out, cfg), &output)?;
    }
    Ok(output)
}

/// One run per `(count, seed)`, in parallel. Reports come back ordered by
/// count, then seed, as given.
pub fn run_sweep(
    cfg: &ScenarioConfig,
    device_counts: &[usize],
    seeds: &[u64],
    out: Option<&Path>,
    opts: SimOptions,
) -> Result<(SweepReport, Vec<RunReport>)> {
    if device_counts.is_empty() {
        return Err(Error::validation("sweep needs at least one device count"));
    }
    if seeds.is_empty() {
        return Err(Error::validation("sweep needs at least one seed"));
    }
    if device_counts.contains(&0) {
        return Err(Error::validation("device counts must be positive"));
    }
    let cells: Vec<ScenarioConfig> = device_counts
        .iter()
        .flat_map(|&n| {
            seeds.iter().map(move |&s| {
                let mut c = cfg.with_device_count(n);
                c.seed = s;
                c
            })
        })
        .collect();
    for c in &cells {
        c.validate()?;
    }
    let reports = cells
        .par_iter()
        .map(|c| run_scenario(c, out, opts).map(|o| o.report))
        .collect::<Result<Vec<_>>>()?;
    let sweep = SweepReport::from_reports(&reports);
    if let Some(out) = out {
        let dir = out.join(cfg.label());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        sweep.write_csv(&dir.join("sweep.csv"))?;
    }
    Ok((sweep, reports))
}
