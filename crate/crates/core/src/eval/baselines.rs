use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::metrics::MetricReport;
use super::protocol::{eval_protocol, Forecaster, Protocol};
use crate::data::{Pollutant, WindowBatch, Windows};
use crate::model::AqNetConfig;
use crate::nn::Tensor;
use crate::train::{train, TrainConfig, TrainData};
use crate::{Error, Result};

/// Ridge added to the normal equations.
pub const RIDGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    LinearRegression,
    LstmPlain,
    Persistence,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [
        BaselineKind::LinearRegression,
        BaselineKind::LstmPlain,
        BaselineKind::Persistence,
    ];
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::LinearRegression => "linear_regression",
            BaselineKind::LstmPlain => "lstm_plain",
            BaselineKind::Persistence => "persistence",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown baseline {s:?}")))
    }
}

/// Repeats the last observed (gap-filled) PM2.5 value.
#[derive(Clone, Copy, Debug, Default)]
pub struct Persistence;

impl Forecaster for Persistence {
    fn label(&self) -> String {
        "Persistence".into()
    }

    fn forecast(&self, batch: &WindowBatch) -> Result<Tensor<f64>> {
        let (b, h, n) = (batch.batch, batch.horizon, batch.n_inputs);
        let mut out = Vec::with_capacity(b * h * n);
        for bi in 0..b {
            for _ in 0..h {
                for ni in 0..n {
                    out.push(batch.input(bi, Pollutant::Pm25.index(), batch.t_in - 1, ni));
                }
            }
        }
        Tensor::new(vec![b, h, n], out)
    }
}

/// Per-station least squares from the flattened pollutant window (plus an
/// intercept) to the horizon.
#[derive(Clone, Debug)]
pub struct LinearRegression {
    pub t_in: usize,
    pub horizon: usize,
    /// `[(6·t_in + 1) × H]`, intercept row last
    pub weights: DMatrix<f64>,
    /// Estimated 2-norm condition number of the regularized Gram matrix.
    pub condition_number: f64,
    pub samples: usize,
}

fn features(batch: &WindowBatch, bi: usize, ni: usize, out: &mut [f64]) {
    let t_in = batch.t_in;
    for c in 0..WindowBatch::CHANNELS {
        for t in 0..t_in {
            out[c * t_in + t] = batch.input(bi, c, t, ni);
        }
    }
    out[WindowBatch::CHANNELS * t_in] = 1.0;
}

impl LinearRegression {
    /// Fits on every (window, station) sample whose horizon is fully
    /// observed.
    pub fn fit(windows: &Windows) -> Result<Self> {
        let (t_in, h) = (windows.t_in(), windows.horizon());
        let d = WindowBatch::CHANNELS * t_in + 1;
        let mut gram = DMatrix::<f64>::zeros(d, d);
        let mut cross = DMatrix::<f64>::zeros(d, h);
        let mut samples = 0;
        for batch in windows.iter_batches(64) {
            let batch = batch?;
            let mut rows = Vec::new();
            let mut ys = Vec::new();
            let mut x = vec![0.0; d];
            for bi in 0..batch.batch {
                for ni in 0..batch.n_inputs {
                    if !(0..h).all(|hh| batch.target_valid(bi, hh, ni)) {
                        continue;
                    }
                    features(&batch, bi, ni, &mut x);
                    rows.extend_from_slice(&x);
                    ys.extend((0..h).map(|hh| batch.target(bi, hh, ni)));
                }
            }
            let m = ys.len() / h;
            if m == 0 {
                continue;
            }
            samples += m;
            let xm = DMatrix::from_row_slice(m, d, &rows);
            let ym = DMatrix::from_row_slice(m, h, &ys);
            gram.gemm_tr(1.0, &xm, &xm, 1.0);
            cross.gemm_tr(1.0, &xm, &ym, 1.0);
        }
        if samples == 0 {
            return Err(Error::InsufficientData(
                "no fully observed training sample for linear regression".into(),
            ));
        }
        for i in 0..d {
            gram[(i, i)] += RIDGE;
        }
        let chol = gram
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("regularized normal equations are not positive definite"))?;
        let weights = chol.solve(&cross);
        let condition_number = condition_estimate(&gram, &chol);
        if condition_number > 1e12 {
            log::warn!("linear regression design is ill-conditioned (cond ≈ {condition_number:.3e})");
        }
        Ok(Self {
            t_in,
            horizon: h,
            weights,
            condition_number,
            samples,
        })
    }
}

/// Largest eigenvalue by power iteration over smallest by inverse
/// iteration with the Cholesky factor.
fn condition_estimate(a: &DMatrix<f64>, chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let d = a.nrows();
    let start = DVector::from_fn(d, |i, _| 1.0 + 0.1 * (i % 7) as f64);
    let rayleigh = |mut v: DVector<f64>, apply: &dyn Fn(&DVector<f64>) -> DVector<f64>| {
        v /= v.norm();
        let mut lambda = 0.0;
        for _ in 0..300 {
            let w = apply(&v);
            let next = v.dot(&w);
            let norm = w.norm();
            if norm == 0.0 {
                return 0.0;
            }
            v = w / norm;
            if (next - lambda).abs() <= 1e-10 * next.abs() {
                return next;
            }
            lambda = next;
        }
        lambda
    };
    let max = rayleigh(start.clone(), &|v| a * v);
    let inv_max = rayleigh(start, &|v| chol.solve(v));
    max * inv_max
}

impl Forecaster for LinearRegression {
    fn label(&self) -> String {
        "Linear Regression".into()
    }

    fn forecast(&self, batch: &WindowBatch) -> Result<Tensor<f64>> {
        if batch.t_in != self.t_in || batch.horizon != self.horizon {
            return Err(Error::shape(format!(
                "regression fit for t_in={} horizon={}, batch has {} / {}",
                self.t_in, self.horizon, batch.t_in, batch.horizon
            )));
        }
        let (b, h, n) = (batch.batch, batch.horizon, batch.n_inputs);
        let d = self.weights.nrows();
        let mut out = vec![0.0; b * h * n];
        let mut x = vec![0.0; d];
        for bi in 0..b {
            for ni in 0..n {
                features(batch, bi, ni, &mut x);
                for hh in 0..h {
                    let col = self.weights.column(hh);
                    out[(bi * h + hh) * n + ni] = x.iter().zip(col.iter()).map(|(a, w)| a * w).sum();
                }
            }
        }
        Tensor::new(vec![b, h, n], out)
    }
}

/// Settings for baselines that must be fit first.
#[derive(Clone, Debug)]
pub struct BaselineSettings {
    /// Keep every n-th training window for the regression fit.
    pub regression_stride: usize,
    /// Network and schedule for `lstm_plain`; attention and the hidden
    /// term are switched off regardless of these values.
    pub lstm_model: AqNetConfig,
    pub lstm_train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct BaselineResult {
    pub reports: Vec<MetricReport>,
    /// Linear regression only.
    pub condition_number: Option<f64>,
}

/// Fits `kind` on the training windows and evaluates it on the test
/// windows under `protocol`.
pub fn run_baseline(
    kind: BaselineKind,
    data: &TrainData,
    protocol: Protocol,
    settings: &BaselineSettings,
) -> Result<BaselineResult> {
    match kind {
        BaselineKind::Persistence => Ok(BaselineResult {
            reports: eval_protocol(protocol, &Persistence, &data.test, &data.norm)?,
            condition_number: None,
        }),
        BaselineKind::LinearRegression => {
            let lr = LinearRegression::fit(&data.train.thin(settings.regression_stride))?;
            Ok(BaselineResult {
                reports: eval_protocol(protocol, &lr, &data.test, &data.norm)?,
                condition_number: Some(lr.condition_number),
            })
        }
        BaselineKind::LstmPlain => {
            let mut mc = settings.lstm_model.clone();
            mc.use_attention = false;
            mc.t_in = data.train.t_in();
            mc.horizon = data.train.horizon();
            let mut tc = settings.lstm_train.clone();
            tc.hidden_fraction = 0.0;
            let out = train(&mc, &tc, data, None)?;
            let model = out.best.map_or(out.last.model, |b| b.model);
            Ok(BaselineResult {
                reports: eval_protocol(protocol, &model, &data.test, &data.norm)?,
                condition_number: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_estimate_on_known_spectrum() {
        let d = 40;
        let a = DMatrix::from_diagonal(&DVector::from_fn(d, |i, _| 0.5 + i as f64));
        let chol = a.clone().cholesky().unwrap();
        let est = condition_estimate(&a, &chol);
        assert!((est - (d as f64 - 0.5) / 0.5).abs() < 1e-3 * est, "{est}");

        let mut b = DMatrix::<f64>::identity(5, 5);
        b[(0, 1)] = 0.999;
        b[(1, 0)] = 0.999;
        let chol = b.clone().cholesky().unwrap();
        let eig = nalgebra::SymmetricEigen::new(b.clone());
        let exact = eig.eigenvalues.max() / eig.eigenvalues.min();
        assert!((condition_estimate(&b, &chol) - exact).abs() < 1e-3 * exact);
    }
}
