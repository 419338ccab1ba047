use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{error_metrics, metrics, MetricReport};
use crate::data::{NormalizationSpec, Pollutant, WindowBatch, Windows};
use crate::model::AqNet;
use crate::nn::{Scalar, Tensor};
use crate::{Error, Result};

/// Anything that maps a window batch to PM2.5 forecasts at its visible
/// stations.
pub trait Forecaster {
    fn label(&self) -> String;

    /// `[B × H × N]` normalized PM2.5 at the batch's visible stations.
    fn forecast(&self, batch: &WindowBatch) -> Result<Tensor<f64>>;
}

impl<T: Scalar> Forecaster for AqNet<T> {
    fn label(&self) -> String {
        if self.config.use_attention {
            "AQ-Net".into()
        } else {
            "LSTM".into()
        }
    }

    fn forecast(&self, batch: &WindowBatch) -> Result<Tensor<f64>> {
        self.predict_visible(batch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// 24 h of history, hourly errors over the first 6, 12 and 24 hours.
    Short,
    /// Two weeks of history, daily-mean errors over the first 2, 4 and 7
    /// days.
    Long,
}

impl Protocol {
    pub fn t_in(self) -> usize {
        match self {
            Protocol::Short => 24,
            Protocol::Long => 336,
        }
    }

    pub fn horizon(self) -> usize {
        match self {
            Protocol::Short => 24,
            Protocol::Long => 168,
        }
    }

    /// Cell labels and the number of leading steps (hours or days) each
    /// pools.
    pub fn cells(self) -> [(&'static str, usize); 3] {
        match self {
            Protocol::Short => [("6h", 6), ("12h", 12), ("24h", 24)],
            Protocol::Long => [("2d", 2), ("4d", 4), ("7d", 7)],
        }
    }

    pub fn reports_r2(self) -> bool {
        self == Protocol::Short
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Short => "short",
            Protocol::Long => "long",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(Protocol::Short),
            "long" => Ok(Protocol::Long),
            _ => Err(Error::invalid(format!("unknown protocol {s:?} (short|long)"))),
        }
    }
}

/// Forecast and truth for one station in one window, in µg/m³.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub truth: Vec<f64>,
    pub pred: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Runs `f` over every window and returns one trace per (window, visible
/// station), window-major.
pub fn collect_traces(
    f: &dyn Forecaster,
    windows: &Windows,
    norm: &NormalizationSpec,
    batch_size: usize,
) -> Result<Vec<Trace>> {
    let mut out = Vec::with_capacity(windows.len() * windows.n_visible());
    for batch in windows.iter_batches(batch_size) {
        let batch = batch?;
        let pred = f.forecast(&batch)?;
        let (b, h, n) = (batch.batch, batch.horizon, batch.n_inputs);
        if pred.shape() != [b, h, n] {
            return Err(Error::shape(format!(
                "forecaster returned {:?}, expected {:?}",
                pred.shape(),
                [b, h, n]
            )));
        }
        let p = pred.data();
        for bi in 0..b {
            for ni in 0..n {
                let mut t = Trace {
                    truth: Vec::with_capacity(h),
                    pred: Vec::with_capacity(h),
                    valid: Vec::with_capacity(h),
                };
                for hh in 0..h {
                    t.truth.push(norm.invert(Pollutant::Pm25, batch.target(bi, hh, ni)));
                    t.pred.push(norm.invert(Pollutant::Pm25, p[(bi * h + hh) * n + ni]));
                    t.valid.push(batch.target_valid(bi, hh, ni));
                }
                out.push(t);
            }
        }
    }
    Ok(out)
}

/// Means over the valid hours of each consecutive 24-hour block. Days
/// without a valid hour are marked invalid.
pub fn daily_means(trace: &Trace) -> Trace {
    let days = trace.truth.len() / 24;
    let mut out = Trace {
        truth: Vec::with_capacity(days),
        pred: Vec::with_capacity(days),
        valid: Vec::with_capacity(days),
    };
    for d in 0..days {
        let (mut y, mut p, mut n) = (0.0, 0.0, 0usize);
        for h in d * 24..(d + 1) * 24 {
            if trace.valid[h] {
                y += trace.truth[h];
                p += trace.pred[h];
                n += 1;
            }
        }
        let ok = n > 0;
        out.truth.push(if ok { y / n as f64 } else { 0.0 });
        out.pred.push(if ok { p / n as f64 } else { 0.0 });
        out.valid.push(ok);
    }
    out
}

/// Pools the valid entries of the first `steps` positions of every trace.
pub fn pool(traces: &[Trace], steps: usize) -> (Vec<f64>, Vec<f64>) {
    let (mut y, mut p) = (Vec::new(), Vec::new());
    for t in traces {
        for s in 0..steps.min(t.truth.len()) {
            if t.valid[s] {
                y.push(t.truth[s]);
                p.push(t.pred[s]);
            }
        }
    }
    (y, p)
}

/// Applies `protocol`'s cells to already collected hourly traces.
pub fn protocol_reports(protocol: Protocol, traces: &[Trace], label: &str) -> Result<Vec<MetricReport>> {
    let daily: Vec<Trace>;
    let series = match protocol {
        Protocol::Short => traces,
        Protocol::Long => {
            daily = traces.iter().map(daily_means).collect();
            &daily
        }
    };
    protocol
        .cells()
        .iter()
        .map(|&(name, steps)| {
            let (y, p) = pool(series, steps);
            let r = if protocol.reports_r2() {
                metrics(&y, &p)?
            } else {
                error_metrics(&y, &p)?
            };
            Ok(r.labeled(label, name))
        })
        .collect()
}

fn run_protocol(
    protocol: Protocol,
    f: &dyn Forecaster,
    windows: &Windows,
    norm: &NormalizationSpec,
) -> Result<Vec<MetricReport>> {
    if windows.t_in() != protocol.t_in() || windows.horizon() < protocol.horizon() {
        return Err(Error::invalid(format!(
            "{protocol} protocol needs t_in={} and horizon>={}, windows have t_in={} horizon={}",
            protocol.t_in(),
            protocol.horizon(),
            windows.t_in(),
            windows.horizon()
        )));
    }
    if windows.is_empty() {
        return Err(Error::InsufficientData(format!(
            "test split holds no complete {}+{} hour window",
            protocol.t_in(),
            protocol.horizon()
        )));
    }
    let traces = collect_traces(f, windows, norm, 32)?;
    protocol_reports(protocol, &traces, &f.label())
}

/// 6 h, 12 h and 24 h reports (R², MAE, RMSE) over hourly errors.
pub fn eval_short_term(
    f: &dyn Forecaster,
    windows: &Windows,
    norm: &NormalizationSpec,
) -> Result<Vec<MetricReport>> {
    run_protocol(Protocol::Short, f, windows, norm)
}

/// 2-, 4- and 7-day reports (MAE, RMSE) over daily means.
pub fn eval_long_term(
    f: &dyn Forecaster,
    windows: &Windows,
    norm: &NormalizationSpec,
) -> Result<Vec<MetricReport>> {
    run_protocol(Protocol::Long, f, windows, norm)
}

pub fn eval_protocol(
    protocol: Protocol,
    f: &dyn Forecaster,
    windows: &Windows,
    norm: &NormalizationSpec,
) -> Result<Vec<MetricReport>> {
    run_protocol(protocol, f, windows, norm)
}

/// One report over every valid (window, station, step) sample.
pub fn evaluate_pooled(
    f: &dyn Forecaster,
    windows: &Windows,
    norm: &NormalizationSpec,
    batch_size: usize,
) -> Result<MetricReport> {
    let traces = collect_traces(f, windows, norm, batch_size)?;
    let (y, p) = pool(&traces, windows.horizon());
    Ok(metrics(&y, &p)?.labeled(&f.label(), "all"))
}
