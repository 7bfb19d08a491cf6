//! NRMSE and the error series used to compare forecasters: per-variable,
//! per-horizon-step, a single-instant snapshot and a per-bus trace.
//!
//! NRMSE normalises each variable's RMSE by the range (max − min) of its
//! ground truth over the evaluated set and averages over variables.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::Vector;
use crate::measurement::{fmt_real, StateSeries};
use crate::training::make_examples;

/// Anything that maps an input window to a multi-step forecast in the
/// original (unscaled) state coordinates.
pub trait Predictor {
    fn seq_len(&self) -> usize;
    fn predict(&self, window: &[Vector], horizon: usize) -> Result<Vec<Vector>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangePolicy {
    /// Zero range in any variable is an error.
    Strict,
    /// Zero-range variables are normalised by 1 (plain RMSE).
    FallbackToRmse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NrmseBreakdown {
    pub overall: f64,
    pub per_variable: Vec<f64>,
}

pub fn nrmse_with(truth: &[Vector], pred: &[Vector], policy: RangePolicy) -> Result<NrmseBreakdown> {
    check_dim("nrmse samples", truth.len(), pred.len())?;
    let first = truth.first().ok_or(Error::EmptySequence("nrmse"))?;
    let dim = first.dim();
    for (t, p) in truth.iter().zip(pred) {
        check_dim("nrmse truth dim", dim, t.dim())?;
        check_dim("nrmse prediction dim", dim, p.dim())?;
    }
    let count = truth.len() as f64;
    let per_variable = (0..dim)
        .map(|i| {
            let (mut lo, mut hi, mut sq) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
            for (t, p) in truth.iter().zip(pred) {
                lo = lo.min(t[i]);
                hi = hi.max(t[i]);
                sq += (t[i] - p[i]) * (t[i] - p[i]);
            }
            let rmse = (sq / count).sqrt();
            let range = hi - lo;
            if range > 0.0 {
                Ok(rmse / range)
            } else {
                match policy {
                    RangePolicy::Strict => Err(Error::DegenerateRange { variable: i }),
                    RangePolicy::FallbackToRmse => Ok(rmse),
                }
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let overall = per_variable.iter().sum::<f64>() / dim as f64;
    Ok(NrmseBreakdown {
        overall,
        per_variable,
    })
}

pub fn nrmse(truth: &[Vector], pred: &[Vector]) -> Result<f64> {
    Ok(nrmse_with(truth, pred, RangePolicy::Strict)?.overall)
}

/// Forecasts for every sliding window of `segment`: `(truth, pred)` indexed
/// `[example][step]`.
fn collect_forecasts(
    model: &dyn Predictor,
    segment: &StateSeries,
    horizon: usize,
) -> Result<(Vec<Vec<Vector>>, Vec<Vec<Vector>>)> {
    let examples = make_examples(segment.states(), model.seq_len(), horizon)?;
    let mut truth = Vec::with_capacity(examples.len());
    let mut pred = Vec::with_capacity(examples.len());
    for ex in examples {
        pred.push(model.predict(&ex.window, horizon)?);
        truth.push(ex.target);
    }
    Ok((truth, pred))
}

/// NRMSE over every (window, step) forecast in the segment.
pub fn evaluate_nrmse(model: &dyn Predictor, segment: &StateSeries, horizon: usize) -> Result<NrmseBreakdown> {
    let (truth, pred) = collect_forecasts(model, segment, horizon)?;
    let truth: Vec<Vector> = truth.into_iter().flatten().collect();
    let pred: Vec<Vector> = pred.into_iter().flatten().collect();
    nrmse_with(&truth, &pred, RangePolicy::FallbackToRmse)
}

/// Entry `k` is the NRMSE of the `k+1`-step-ahead forecasts over all windows.
pub fn horizon_error_profile(model: &dyn Predictor, segment: &StateSeries, horizon: usize) -> Result<Vec<f64>> {
    let (truth, pred) = collect_forecasts(model, segment, horizon)?;
    (0..horizon)
        .map(|k| {
            let t: Vec<Vector> = truth.iter().map(|s| s[k].clone()).collect();
            let p: Vec<Vector> = pred.iter().map(|s| s[k].clone()).collect();
            Ok(nrmse_with(&t, &p, RangePolicy::FallbackToRmse)?.overall)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t_future: usize,
    pub truth: Vec<f64>,
    pub forecast: Vec<f64>,
    pub abs_error: Vec<f64>,
}

impl Snapshot {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "variable,truth,forecast,abs_error")?;
        for i in 0..self.truth.len() {
            writeln!(
                w,
                "{},{},{},{}",
                i + 1,
                fmt_real(self.truth[i]),
                fmt_real(self.forecast[i]),
                fmt_real(self.abs_error[i])
            )?;
        }
        Ok(())
    }
}

/// One-step-ahead forecast of the state at index `t_future` of `segment`,
/// made from the `seq_len` states preceding it.
pub fn snapshot_error(model: &dyn Predictor, segment: &StateSeries, t_future: usize) -> Result<Snapshot> {
    let l = model.seq_len();
    if t_future < l || t_future >= segment.len() {
        return Err(Error::IndexOutOfRange {
            index: t_future,
            limit: segment.len(),
        });
    }
    let states = segment.states();
    let forecast = model.predict(&states[t_future - l..t_future], 1)?.remove(0);
    let truth = &states[t_future];
    let abs_error = truth
        .iter()
        .zip(forecast.iter())
        .map(|(a, b)| (a - b).abs())
        .collect();
    Ok(Snapshot {
        t_future,
        truth: truth.as_slice().to_vec(),
        forecast: forecast.into_vec(),
        abs_error,
    })
}

/// Voltage magnitude and angle of one bus over the forecast steps issued
/// from a single origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusTrace {
    pub bus: usize,
    pub origin: usize,
    pub truth_magnitude: Vec<f64>,
    pub forecast_magnitude: Vec<f64>,
    pub truth_angle: Vec<f64>,
    pub forecast_angle: Vec<f64>,
}

impl BusTrace {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "step,truth_magnitude,forecast_magnitude,truth_angle,forecast_angle"
        )?;
        for k in 0..self.truth_magnitude.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                k + 1,
                fmt_real(self.truth_magnitude[k]),
                fmt_real(self.forecast_magnitude[k]),
                fmt_real(self.truth_angle[k]),
                fmt_real(self.forecast_angle[k])
            )?;
        }
        Ok(())
    }
}

/// Forecasts `steps` states from the window ending just before `origin` and
/// reports bus `bus` (1-based) against the truth.
pub fn bus_trace(
    model: &dyn Predictor,
    segment: &StateSeries,
    bus: usize,
    origin: usize,
    steps: usize,
) -> Result<BusTrace> {
    let k = segment.bus_count();
    if bus == 0 || bus > k {
        return Err(Error::IndexOutOfRange { index: bus, limit: k });
    }
    let l = model.seq_len();
    if origin < l || origin + steps > segment.len() || steps == 0 {
        return Err(Error::IndexOutOfRange {
            index: origin + steps,
            limit: segment.len(),
        });
    }
    let states = segment.states();
    let pred = model.predict(&states[origin - l..origin], steps)?;
    let polar = |v: &Vector| {
        let (re, im) = (v[bus - 1], v[k + bus - 1]);
        (re.hypot(im), im.atan2(re))
    };
    let mut trace = BusTrace {
        bus,
        origin,
        truth_magnitude: vec![],
        forecast_magnitude: vec![],
        truth_angle: vec![],
        forecast_angle: vec![],
    };
    for (i, p) in pred.iter().enumerate() {
        let (tm, ta) = polar(&states[origin + i]);
        let (fm, fa) = polar(p);
        trace.truth_magnitude.push(tm);
        trace.truth_angle.push(ta);
        trace.forecast_magnitude.push(fm);
        trace.forecast_angle.push(fa);
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub overall_nrmse: f64,
    pub per_variable_nrmse: Vec<f64>,
    pub per_horizon_nrmse: Vec<f64>,
    pub snapshot: Option<Snapshot>,
    pub bus_trace: Option<BusTrace>,
}

/// Where to take the single-step snapshot and the per-bus trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSpec {
    pub snapshot_t: Option<usize>,
    /// `(bus, origin, steps)`
    pub trace: Option<(usize, usize, usize)>,
}

/// Overall, per-variable and per-horizon NRMSE on `segment`, plus the
/// optional snapshot and bus trace.
pub fn evaluate(model: &dyn Predictor, segment: &StateSeries, horizon: usize, probes: ProbeSpec) -> Result<EvalResult> {
    let breakdown = evaluate_nrmse(model, segment, horizon)?;
    Ok(EvalResult {
        overall_nrmse: breakdown.overall,
        per_variable_nrmse: breakdown.per_variable,
        per_horizon_nrmse: horizon_error_profile(model, segment, horizon)?,
        snapshot: probes.snapshot_t.map(|t| snapshot_error(model, segment, t)).transpose()?,
        bus_trace: probes
            .trace
            .map(|(bus, origin, steps)| bus_trace(model, segment, bus, origin, steps))
            .transpose()?,
    })
}

pub fn write_profile_csv<W: Write>(profile: &[f64], mut w: W) -> Result<()> {
    writeln!(w, "step,nrmse")?;
    for (k, v) in profile.iter().enumerate() {
        writeln!(w, "{},{}", k + 1, fmt_real(*v))?;
    }
    Ok(())
}

pub fn read_profile_csv(text: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("step,nrmse") {
        return Err(Error::Parse {
            line: 1,
            message: "expected header `step,nrmse`".into(),
        });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Parse {
                    line: i + 2,
                    message: format!("malformed row `{l}`"),
                })
        })
        .collect()
}
