//! Per-sample confidence/correctness traces and the offline calibrations run
//! over them.
//!
//! A trace stands in for running the light model and every server model over
//! a dataset: each record carries the light model's BvSB confidence, whether
//! the light prediction was right, and whether each server model would be
//! right on the same sample. Traces are either synthesized from marginal
//! accuracies or loaded from CSV.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TierId;
use crate::rng::SimRng;
use crate::scheduler::SwitchLimits;
use rand::SeedableRng;

const PROB_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub sample_id: u64,
    pub bvsb: f64,
    pub light_correct: bool,
    /// Indexed like [`Trace::models`].
    pub heavy_correct: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub models: Vec<String>,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn model_index(&self, model_id: &str) -> Option<usize> {
        self.models.iter().position(|m| m == model_id)
    }

    pub fn light_accuracy(&self) -> f64 {
        let hits = self.records.iter().filter(|r| r.light_correct).count();
        hits as f64 / self.records.len() as f64
    }

    pub fn heavy_accuracy(&self, model_id: &str) -> Option<f64> {
        let idx = self.model_index(model_id)?;
        let hits = self.records.iter().filter(|r| r.heavy_correct[idx]).count();
        Some(hits as f64 / self.records.len() as f64)
    }
}

/// BvSB confidence: gap between the two largest softmax probabilities.
pub fn compute_bvsb(softmax: &[f64]) -> Result<f64> {
    if softmax.len() < 2 {
        return Err(Error::validation("softmax vector needs at least two classes"));
    }
    if softmax.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::validation("softmax entries must lie in [0, 1]"));
    }
    let sum: f64 = softmax.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::validation(format!("softmax sums to {sum}, expected 1")));
    }
    let (mut p1, mut p2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in softmax {
        if p > p1 {
            p2 = p1;
            p1 = p;
        } else if p > p2 {
            p2 = p;
        }
    }
    Ok((p1 - p2).clamp(0.0, 1.0))
}

/// Conditional P(heavy right | light wrong) under the nested-correctness
/// assumption: the heavy model is right wherever the light model is.
pub fn nested_heavy_given_light_wrong(light_accuracy: f64, heavy_accuracy: f64) -> f64 {
    if light_accuracy >= 1.0 {
        return heavy_accuracy.clamp(0.0, 1.0);
    }
    ((heavy_accuracy - light_accuracy) / (1.0 - light_accuracy)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceGenSpec {
    pub light_accuracy: f64,
    pub heavy_accuracy: BTreeMap<String, f64>,
    /// Beta shape of BvSB for samples the light model gets right.
    pub bvsb_correct_shape: (f64, f64),
    pub bvsb_incorrect_shape: (f64, f64),
    /// Entries missing here fall back to [`nested_heavy_given_light_wrong`].
    #[serde(default)]
    pub heavy_given_light_wrong: BTreeMap<String, f64>,
    pub seed: u64,
}

impl TraceGenSpec {
    pub fn new(light_accuracy: f64, heavy_accuracy: BTreeMap<String, f64>, seed: u64) -> Self {
        Self {
            light_accuracy,
            heavy_accuracy,
            bvsb_correct_shape: (8.0, 2.0),
            bvsb_incorrect_shape: (2.0, 5.0),
            heavy_given_light_wrong: BTreeMap::new(),
            seed,
        }
    }

    fn given_wrong(&self, model: &str, heavy: f64) -> f64 {
        self.heavy_given_light_wrong
            .get(model)
            .copied()
            .unwrap_or_else(|| nested_heavy_given_light_wrong(self.light_accuracy, heavy))
    }

    /// `(P(heavy right | light right), P(heavy right | light wrong))` per model,
    /// in `heavy_accuracy` key order.
    pub fn conditionals(&self) -> Result<Vec<(String, f64, f64)>> {
        let la = self.light_accuracy;
        if !(0.0..=1.0).contains(&la) {
            return Err(Error::validation(format!("light_accuracy {la} outside [0, 1]")));
        }
        for (name, (a, b)) in [
            ("bvsb_correct_shape", self.bvsb_correct_shape),
            ("bvsb_incorrect_shape", self.bvsb_incorrect_shape),
        ] {
            if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                return Err(Error::validation(format!("{name} parameters must be positive")));
            }
        }
        if let Some(extra) = self
            .heavy_given_light_wrong
            .keys()
            .find(|k| !self.heavy_accuracy.contains_key(*k))
        {
            return Err(Error::validation(format!(
                "heavy_given_light_wrong names unknown model {extra}"
            )));
        }
        let mut out = Vec::with_capacity(self.heavy_accuracy.len());
        for (model, &ha) in &self.heavy_accuracy {
            if !(0.0..=1.0).contains(&ha) {
                return Err(Error::validation(format!("{model}: heavy accuracy {ha} outside [0, 1]")));
            }
            let gw = self.given_wrong(model, ha);
            if !(0.0..=1.0).contains(&gw) {
                return Err(Error::validation(format!(
                    "{model}: P(heavy right | light wrong) = {gw} outside [0, 1]"
                )));
            }
            let gc = if la > 0.0 {
                (ha - (1.0 - la) * gw) / la
            } else if (ha - gw).abs() <= PROB_EPS {
                0.0
            } else {
                return Err(Error::validation(format!(
                    "{model}: with light accuracy 0 the heavy accuracy must equal P(heavy right | light wrong)"
                )));
            };
            if !(-PROB_EPS..=1.0 + PROB_EPS).contains(&gc) {
                return Err(Error::validation(format!(
                    "{model}: implied P(heavy right | light right) = {gc:.6} outside [0, 1]; \
                     adjust heavy_given_light_wrong"
                )));
            }
            out.push((model.clone(), gc.clamp(0.0, 1.0), gw));
        }
        Ok(out)
    }
}

pub fn generate_trace(spec: &TraceGenSpec, n: usize) -> Result<Trace> {
    let conds = spec.conditionals()?;
    let beta = |(a, b): (f64, f64)| Beta::new(a, b).map_err(|e| Error::validation(e.to_string()));
    let correct = beta(spec.bvsb_correct_shape)?;
    let incorrect = beta(spec.bvsb_incorrect_shape)?;
    let mut rng = SimRng::seed_from_u64(spec.seed);

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let light_correct = rng.random::<f64>() < spec.light_accuracy;
        let bvsb: f64 = if light_correct {
            correct.sample(&mut rng)
        } else {
            incorrect.sample(&mut rng)
        };
        let heavy_correct = conds
            .iter()
            .map(|&(_, gc, gw)| rng.random::<f64>() < if light_correct { gc } else { gw })
            .collect();
        records.push(TraceRecord {
            sample_id: i as u64,
            bvsb: bvsb.clamp(0.0, 1.0),
            light_correct,
            heavy_correct,
        });
    }
    Ok(Trace {
        models: conds.into_iter().map(|(m, _, _)| m).collect(),
        records,
    })
}

pub fn write_trace(path: &Path, trace: &Trace) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header = vec!["sample_id".to_string(), "bvsb".into(), "light_correct".into()];
    header.extend(trace.models.iter().map(|m| format!("heavy_{m}")));
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for r in &trace.records {
        let mut row = vec![r.sample_id.to_string(), r.bvsb.to_string(), bit(r.light_correct).into()];
        row.extend(r.heavy_correct.iter().map(|&h| bit(h).to_string()));
        w.write_record(&row).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn bit(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Loads a trace, keeping only the columns for `models` (in that order).
pub fn load_trace(path: &Path, models: &[String]) -> Result<Trace> {
    let display = path.display().to_string();
    let parse_err = |line: u64, message: String| Error::Parse {
        path: display.clone(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
            _ => parse_err(1, e.to_string()),
        })?;
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("sample_id").ok_or_else(|| parse_err(1, "missing column sample_id".into()))?;
    let bvsb_col = col("bvsb").ok_or_else(|| parse_err(1, "missing column bvsb".into()))?;
    let light_col =
        col("light_correct").ok_or_else(|| parse_err(1, "missing column light_correct".into()))?;
    let mut heavy_cols = Vec::with_capacity(models.len());
    for m in models {
        let c = col(&format!("heavy_{m}"))
            .ok_or_else(|| parse_err(1, format!("missing column heavy_{m} for model {m}")))?;
        heavy_cols.push(c);
    }

    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, format!("malformed row: {e}"))
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |c: usize| row.get(c).unwrap_or("");
        let sample_id: u64 = field(id_col)
            .parse()
            .map_err(|_| parse_err(line, format!("bad sample_id {:?}", field(id_col))))?;
        let bvsb: f64 = field(bvsb_col)
            .parse()
            .map_err(|_| parse_err(line, format!("bad bvsb {:?}", field(bvsb_col))))?;
        if !(0.0..=1.0).contains(&bvsb) {
            return Err(parse_err(line, format!("bvsb {bvsb} outside [0, 1]")));
        }
        let parse_bit = |c: usize, name: &str| match field(c) {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(parse_err(line, format!("{name} must be 0 or 1, got {other:?}"))),
        };
        let light_correct = parse_bit(light_col, "light_correct")?;
        let heavy_correct = heavy_cols
            .iter()
            .zip(models)
            .map(|(&c, m)| parse_bit(c, &format!("heavy_{m}")))
            .collect::<Result<Vec<_>>>()?;
        records.push(TraceRecord {
            sample_id,
            bvsb,
            light_correct,
            heavy_correct,
        });
    }
    Ok(Trace {
        models: models.to_vec(),
        records,
    })
}

/// Ascending threshold grid over [0, 1] that always ends exactly at 1.
pub fn threshold_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::validation(format!("grid step {step} must lie in (0, 1]")));
    }
    let k = (1.0 / step).round();
    if (k * step - 1.0).abs() < 1e-9 {
        let k = k as u64;
        return Ok((0..=k).map(|i| i as f64 / k as f64).collect());
    }
    let mut grid: Vec<f64> = (0..).map(|i| i as f64 * step).take_while(|&c| c < 1.0).collect();
    grid.push(1.0);
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub thresholds: Vec<f64>,
    pub forward_fraction: Vec<f64>,
    pub models: Vec<String>,
    /// `expected_accuracy[model][threshold]`.
    pub expected_accuracy: Vec<Vec<f64>>,
}

impl CalibrationCurve {
    pub fn accuracy_for(&self, model: &str) -> Option<&[f64]> {
        let i = self.models.iter().position(|m| m == model)?;
        Some(&self.expected_accuracy[i])
    }

    /// Smallest grid threshold forwarding at least `q`, else the largest.
    pub fn threshold_for_fraction(&self, q: f64) -> f64 {
        self.forward_fraction
            .iter()
            .position(|&f| f >= q)
            .map(|i| self.thresholds[i])
            .unwrap_or(*self.thresholds.last().expect("non-empty grid"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header = vec!["threshold".to_string(), "forward_fraction".into()];
        header.extend(self.models.iter().map(|m| format!("accuracy_{m}")));
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for (i, (c, f)) in self.thresholds.iter().zip(&self.forward_fraction).enumerate() {
            let mut row = vec![c.to_string(), f.to_string()];
            row.extend(self.expected_accuracy.iter().map(|acc| acc[i].to_string()));
            w.write_record(&row).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Forwarding fraction and cascade accuracy at every grid threshold.
pub fn calibration_curve(trace: &Trace, models: &[String], grid_step: f64) -> Result<CalibrationCurve> {
    if trace.is_empty() {
        return Err(Error::validation("calibration needs a non-empty trace"));
    }
    let thresholds = threshold_grid(grid_step)?;
    let cols = models
        .iter()
        .map(|m| {
            trace
                .model_index(m)
                .ok_or_else(|| Error::validation(format!("trace has no column for model {m}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<&TraceRecord> = trace.records.iter().collect();
    order.sort_by(|a, b| a.bvsb.total_cmp(&b.bvsb));
    let n = order.len();
    let light_hits = order.iter().filter(|r| r.light_correct).count() as i64;

    // Integer counts keep the endpoints exactly equal to the empirical accuracies.
    let mut forwarded = 0usize;
    let mut delta = vec![0i64; cols.len()];
    let mut forward_fraction = Vec::with_capacity(thresholds.len());
    let mut expected_accuracy = vec![Vec::with_capacity(thresholds.len()); cols.len()];
    for &c in &thresholds {
        while forwarded < n && order[forwarded].bvsb < c {
            let r = order[forwarded];
            for (d, &col) in delta.iter_mut().zip(&cols) {
                *d += r.heavy_correct[col] as i64 - r.light_correct as i64;
            }
            forwarded += 1;
        }
        forward_fraction.push(forwarded as f64 / n as f64);
        for (acc, d) in expected_accuracy.iter_mut().zip(&delta) {
            acc.push((light_hits + d) as f64 / n as f64);
        }
    }
    Ok(CalibrationCurve {
        thresholds,
        forward_fraction,
        models: models.to_vec(),
        expected_accuracy,
    })
}

/// Target share of samples the Static baseline forwards.
pub const STATIC_FORWARD_SHARE: f64 = 0.30;
/// Largest tolerated accuracy loss against the best cascade, as a fraction.
pub const STATIC_MAX_ACCURACY_LOSS: f64 = 0.01;

/// Threshold forwarding ~30% of samples, raised if that costs more than 1 pp
/// of accuracy against the best threshold on the grid.
pub fn calibrate_static_threshold(curve: &CalibrationCurve, model: &str) -> Result<f64> {
    let acc = curve
        .accuracy_for(model)
        .ok_or_else(|| Error::validation(format!("calibration curve has no model {model}")))?;
    let c30 = curve.threshold_for_fraction(STATIC_FORWARD_SHARE);
    let i30 = curve.thresholds.iter().position(|&c| c == c30).expect("c30 is on the grid");
    let best = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if best - acc[i30] > STATIC_MAX_ACCURACY_LOSS {
        let floor = best - STATIC_MAX_ACCURACY_LOSS;
        let i = acc.iter().position(|&a| a >= floor).expect("the maximum itself qualifies");
        Ok(curve.thresholds[i])
    } else {
        Ok(c30)
    }
}

/// Switch limits from per-tier curves: `c_lower` on the fastest tier's curve
/// at forwarding share `q_low`, `c_upper` per tier at `q_high`.
pub fn calibrate_switch_limits(
    curves: &[(TierId, f64, CalibrationCurve)],
    q_low: f64,
    q_high: f64,
) -> Result<SwitchLimits> {
    if !(0.0 < q_low && q_low < q_high && q_high < 1.0) {
        return Err(Error::validation(format!(
            "switch quantiles need 0 < q_low < q_high < 1, got q_low={q_low}, q_high={q_high}"
        )));
    }
    let (_, _, fastest) = curves
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::validation("switch calibration needs at least one tier"))?;
    let c_lower = fastest.threshold_for_fraction(q_low);
    let mut c_upper = BTreeMap::new();
    for (tier, _, curve) in curves {
        let cu = curve.threshold_for_fraction(q_high);
        if c_lower > cu {
            return Err(Error::Calibration(format!(
                "c_lower {c_lower} exceeds c_upper {cu} of tier {tier}; widen q_low/q_high"
            )));
        }
        c_upper.insert(tier.clone(), cu);
    }
    Ok(SwitchLimits { c_lower, c_upper })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rec(id: u64, bvsb: f64, light: bool, heavy: bool) -> TraceRecord {
        TraceRecord {
            sample_id: id,
            bvsb,
            light_correct: light,
            heavy_correct: vec![heavy],
        }
    }

    fn one_model_trace(records: Vec<TraceRecord>) -> Trace {
        Trace {
            models: vec!["H".into()],
            records,
        }
    }

    /// `n` records with bvsb at the midpoints of n equal bins.
    fn uniform_trace(n: usize, light: impl Fn(usize) -> bool, heavy: impl Fn(usize) -> bool) -> Trace {
        one_model_trace(
            (0..n)
                .map(|i| rec(i as u64, (i as f64 + 0.5) / n as f64, light(i), heavy(i)))
                .collect(),
        )
    }

    fn h() -> Vec<String> {
        vec!["H".into()]
    }

    #[test]
    fn bvsb_examples() {
        assert_relative_eq!(compute_bvsb(&[0.7, 0.2, 0.1]).unwrap(), 0.5, epsilon = 1e-12);
        assert_eq!(compute_bvsb(&[1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(compute_bvsb(&[0.25; 4]).unwrap(), 0.0);
        assert!(compute_bvsb(&[1.0]).is_err());
        assert!(compute_bvsb(&[0.5, 0.2]).is_err());
    }

    #[test]
    fn empty_and_deterministic_generation() {
        let spec = TraceGenSpec::new(0.7185, [("InceptionV3".to_string(), 0.7829)].into(), 11);
        assert!(generate_trace(&spec, 0).unwrap().is_empty());
        let a = generate_trace(&spec, 500).unwrap();
        let b = generate_trace(&spec, 500).unwrap();
        assert_eq!(a, b);
        let other = generate_trace(&TraceGenSpec { seed: 12, ..spec }, 500).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn inconsistent_conditionals_rejected() {
        let mut spec = TraceGenSpec::new(0.5, [("H".to_string(), 0.9)].into(), 1);
        // P(heavy | light right) would be (0.9 - 0.5*0.1)/0.5 = 1.7
        spec.heavy_given_light_wrong.insert("H".into(), 0.1);
        assert!(matches!(generate_trace(&spec, 10), Err(Error::Validation(_))));
        spec.heavy_given_light_wrong.insert("H".into(), 1.5);
        assert!(generate_trace(&spec, 10).is_err());
        spec.heavy_given_light_wrong.clear();
        spec.heavy_given_light_wrong.insert("Other".into(), 0.5);
        assert!(generate_trace(&spec, 10).is_err());
    }

    #[test]
    fn nested_default_keeps_heavy_right_when_light_is() {
        let spec = TraceGenSpec::new(0.7185, [("InceptionV3".to_string(), 0.7829)].into(), 3);
        let conds = spec.conditionals().unwrap();
        assert_relative_eq!(conds[0].1, 1.0, epsilon = 1e-9);
        assert_relative_eq!(conds[0].2, (0.7829 - 0.7185) / (1.0 - 0.7185), epsilon = 1e-12);
    }

    #[test]
    fn curve_direct_count() {
        let t = one_model_trace(vec![
            rec(0, 0.1, false, true),
            rec(1, 0.4, true, true),
            rec(2, 0.6, true, false),
            rec(3, 0.9, true, true),
        ]);
        let curve = calibration_curve(&t, &h(), 0.1).unwrap();
        let i = curve.thresholds.iter().position(|&c| c == 0.5).unwrap();
        assert_eq!(curve.forward_fraction[i], 0.5);
        // forwarded {0.1, 0.4}: heavy right on both, kept {0.6, 0.9}: light right on both
        assert_eq!(curve.accuracy_for("H").unwrap()[i], 1.0);
        assert_eq!(curve.forward_fraction[0], 0.0);
        assert_eq!(curve.accuracy_for("H").unwrap()[0], t.light_accuracy());
        assert_eq!(*curve.accuracy_for("H").unwrap().last().unwrap(), t.heavy_accuracy("H").unwrap());
    }

    #[test]
    fn curve_requires_records() {
        assert!(calibration_curve(&Trace::default(), &h(), 0.01).is_err());
        let t = uniform_trace(4, |_| true, |_| true);
        assert!(calibration_curve(&t, &h(), 0.0).is_err());
        assert!(calibration_curve(&t, &["missing".to_string()], 0.1).is_err());
    }

    #[test]
    fn static_threshold_uniform_is_thirty_percent() {
        // Flat accuracy: light and heavy agree everywhere.
        let t = uniform_trace(1000, |i| i % 4 != 0, |i| i % 4 != 0);
        let curve = calibration_curve(&t, &h(), 0.001).unwrap();
        let c = calibrate_static_threshold(&curve, "H").unwrap();
        // bvsb_k = (k + 0.5)/1000, 300 of them lie below 0.3 + 1e-3/2 → first grid hit is 0.3.
        assert_relative_eq!(c, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn static_threshold_single_record() {
        let t = one_model_trace(vec![rec(0, 0.9, true, true)]);
        let curve = calibration_curve(&t, &h(), 0.001).unwrap();
        assert_relative_eq!(calibrate_static_threshold(&curve, "H").unwrap(), 0.901, epsilon = 1e-12);
    }

    /// Brute-force oracle: scan every grid threshold and re-evaluate the trace.
    fn brute_static(trace: &Trace, step: f64) -> f64 {
        let grid = threshold_grid(step).unwrap();
        let n = trace.len() as f64;
        let eval = |c: f64| {
            let fwd = trace.records.iter().filter(|r| r.bvsb < c).count() as f64 / n;
            let acc = trace
                .records
                .iter()
                .filter(|r| if r.bvsb < c { r.heavy_correct[0] } else { r.light_correct })
                .count() as f64
                / n;
            (fwd, acc)
        };
        let table: Vec<_> = grid.iter().map(|&c| (c, eval(c))).collect();
        let best = table.iter().map(|t| t.1 .1).fold(f64::MIN, f64::max);
        let (c30, (_, a30)) = *table.iter().find(|t| t.1 .0 >= 0.3).unwrap_or(table.last().unwrap());
        if best - a30 > 0.01 {
            table.iter().find(|t| t.1 .1 >= best - 0.01).unwrap().0
        } else {
            c30
        }
    }

    #[test]
    fn static_threshold_raised_by_one_pp_rule() {
        // Light is wrong on every sample with bvsb < 0.5; heavy is always right.
        // At c30 the cascade trails the maximum (1.0) by ~20 pp.
        let t = uniform_trace(1000, |i| i >= 500, |_| true);
        let curve = calibration_curve(&t, &h(), 0.001).unwrap();
        let c = calibrate_static_threshold(&curve, "H").unwrap();
        let c30 = curve.threshold_for_fraction(0.3);
        assert!(c > c30);
        assert_eq!(c, brute_static(&t, 0.001));
        let acc = curve.accuracy_for("H").unwrap();
        let i = curve.thresholds.iter().position(|&x| x == c).unwrap();
        assert!(acc[i] >= 1.0 - 0.01);
        assert!(acc[i - 1] < 1.0 - 0.01);
    }

    #[test]
    fn static_threshold_matches_brute_force_on_generated_traces() {
        for seed in 0..4 {
            let spec = TraceGenSpec::new(0.7185, [("H".to_string(), 0.7829)].into(), seed);
            let mut spec2 = spec.clone();
            spec2.heavy_given_light_wrong.insert("H".into(), 0.55);
            for s in [spec, spec2] {
                let t = generate_trace(&s, 3000).unwrap();
                let curve = calibration_curve(&t, &h(), 0.001).unwrap();
                assert_eq!(calibrate_static_threshold(&curve, "H").unwrap(), brute_static(&t, 0.001));
            }
        }
    }

    #[test]
    fn switch_limits_uniform() {
        let t = uniform_trace(1000, |_| true, |_| true);
        let curve = calibration_curve(&t, &h(), 0.001).unwrap();
        let curves = vec![
            (TierId::Low, 31.0, curve.clone()),
            (TierId::Mid, 43.0, curve.clone()),
        ];
        let lim = calibrate_switch_limits(&curves, 0.05, 0.60).unwrap();
        assert_relative_eq!(lim.c_lower, 0.05, epsilon = 1e-12);
        assert_relative_eq!(lim.c_upper[&TierId::Low], 0.6, epsilon = 1e-12);
        assert_relative_eq!(lim.c_upper[&TierId::Mid], 0.6, epsilon = 1e-12);
        assert!(calibrate_switch_limits(&curves, 0.6, 0.05).is_err());
    }

    #[test]
    fn switch_limits_per_tier_quantiles() {
        // Tier b's confidences are shifted up by 0.2 (capped) relative to tier a.
        let a = uniform_trace(1000, |_| true, |_| true);
        let mut b = a.clone();
        for r in &mut b.records {
            r.bvsb = (r.bvsb * 0.8 + 0.2).min(1.0);
        }
        let ca = calibration_curve(&a, &h(), 0.001).unwrap();
        let cb = calibration_curve(&b, &h(), 0.001).unwrap();
        let lim = calibrate_switch_limits(
            &[(TierId::Low, 31.0, ca), (TierId::High, 33.0, cb)],
            0.05,
            0.6,
        )
        .unwrap();
        // Brute-force quantile: smallest grid c with count(bvsb < c) >= q*n.
        let brute = |t: &Trace, q: f64| {
            threshold_grid(0.001)
                .unwrap()
                .into_iter()
                .find(|&c| t.records.iter().filter(|r| r.bvsb < c).count() as f64 >= q * t.len() as f64)
                .unwrap()
        };
        assert_eq!(lim.c_upper[&TierId::Low], brute(&a, 0.6));
        assert_eq!(lim.c_upper[&TierId::High], brute(&b, 0.6));
        assert_ne!(lim.c_upper[&TierId::Low], lim.c_upper[&TierId::High]);
        assert_eq!(lim.c_lower, brute(&a, 0.05));
    }

    #[test]
    fn crossing_limits_are_a_calibration_error() {
        // Fastest tier is confident; the slow tier is not at all.
        let fast = one_model_trace((0..100).map(|i| rec(i, 0.9 + i as f64 * 1e-4, true, true)).collect());
        let slow = one_model_trace((0..100).map(|i| rec(i, 0.01 + i as f64 * 1e-4, true, true)).collect());
        let curves = vec![
            (TierId::Low, 31.0, calibration_curve(&fast, &h(), 0.001).unwrap()),
            (TierId::Mid, 43.0, calibration_curve(&slow, &h(), 0.001).unwrap()),
        ];
        assert!(matches!(
            calibrate_switch_limits(&curves, 0.05, 0.6),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn load_trace_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "sample_id,bvsb,light_correct,heavy_H\n0,0.5,1,0\n1,0.25,0,1\n2,0.9,1,1\n").unwrap();
        let t = load_trace(&p, &h()).unwrap();
        assert_eq!(t.records.iter().map(|r| r.sample_id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(t.records[1], rec(1, 0.25, false, true));

        let err = load_trace(&p, &["G".to_string()]).unwrap_err().to_string();
        assert!(err.contains("heavy_G") && err.contains("model G"), "{err}");

        std::fs::write(&p, "sample_id,bvsb,light_correct,heavy_H\n0,0.5,1,0\n1,1.2,0,1\n").unwrap();
        let err = load_trace(&p, &h()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");

        std::fs::write(&p, "sample_id,bvsb,light_correct,heavy_H\n0,0.5,1\n").unwrap();
        assert!(matches!(load_trace(&p, &h()).unwrap_err(), Error::Parse { line: 2, .. }));

        std::fs::write(&p, "sample_id,bvsb,light_correct,heavy_H\n0,abc,1,0\n").unwrap();
        assert!(matches!(load_trace(&p, &h()).unwrap_err(), Error::Parse { line: 2, .. }));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bvsb_permutation_invariant(raw in prop::collection::vec(0.01f64..1.0, 2..12), rot in 0usize..12) {
                let s: f64 = raw.iter().sum();
                let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
                let mut q = p.clone();
                q.rotate_left(rot % p.len());
                q.reverse();
                prop_assert_eq!(compute_bvsb(&p).unwrap(), compute_bvsb(&q).unwrap());
            }

            #[test]
            fn forward_fraction_is_empirical_cdf(bv in prop::collection::vec(0.0f64..=1.0, 1..200)) {
                let t = one_model_trace(bv.iter().enumerate().map(|(i, &b)| rec(i as u64, b, i % 2 == 0, true)).collect());
                let curve = calibration_curve(&t, &h(), 0.01).unwrap();
                let mut prev = 0.0;
                for (c, f) in curve.thresholds.iter().zip(&curve.forward_fraction) {
                    prop_assert!(*f >= prev);
                    prev = *f;
                    let cdf = bv.iter().filter(|&&b| b < *c).count() as f64 / bv.len() as f64;
                    prop_assert_eq!(*f, cdf);
                }
            }

            #[test]
            fn static_threshold_on_grid_and_rule_holds(bv in prop::collection::vec((0.0f64..=1.0, any::<bool>(), any::<bool>()), 1..150)) {
                let t = one_model_trace(bv.iter().enumerate().map(|(i, &(b, l, hh))| rec(i as u64, b, l, hh)).collect());
                let curve = calibration_curve(&t, &h(), 0.01).unwrap();
                let c = calibrate_static_threshold(&curve, "H").unwrap();
                prop_assert!(curve.thresholds.contains(&c));
                prop_assert_eq!(c, brute_static(&t, 0.01));
            }

            #[test]
            fn write_load_round_trip(seed in any::<u64>(), n in 0usize..60) {
                let spec = TraceGenSpec::new(0.75, [("A".to_string(), 0.8), ("B".to_string(), 0.82)].into(), seed);
                let t = generate_trace(&spec, n).unwrap();
                let dir = tempfile::tempdir().unwrap();
                let p = dir.path().join("rt.csv");
                write_trace(&p, &t).unwrap();
                let back = load_trace(&p, &t.models).unwrap();
                prop_assert_eq!(back, t);
            }
        }
    }
}
