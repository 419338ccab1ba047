use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Error summary of one model at one horizon, in µg/m³.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub horizon: String,
    pub mae: f64,
    pub rmse: f64,
    /// Absent for protocols that report only absolute errors.
    pub r2: Option<f64>,
    pub n: usize,
}

impl MetricReport {
    pub fn labeled(mut self, model: &str, horizon: &str) -> Self {
        self.model = model.to_string();
        self.horizon = horizon.to_string();
        self
    }
}

fn check(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::shape(format!(
            "{} targets vs {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    if y.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "metrics need at least 2 samples, got {}",
            y.len()
        )));
    }
    if y.iter().chain(y_hat).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in metric inputs"));
    }
    Ok(())
}

fn error_sums(y: &[f64], y_hat: &[f64]) -> (f64, f64) {
    let (mut abs, mut sq) = (0.0, 0.0);
    for (&a, &b) in y.iter().zip(y_hat) {
        let e = a - b;
        abs += e.abs();
        sq += e * e;
    }
    (abs, sq)
}

fn report(n: usize, abs: f64, sq: f64, r2: Option<f64>) -> MetricReport {
    MetricReport {
        model: String::new(),
        horizon: String::new(),
        mae: abs / n as f64,
        rmse: (sq / n as f64).sqrt(),
        r2,
        n,
    }
}

/// MAE and RMSE only.
pub fn error_metrics(y: &[f64], y_hat: &[f64]) -> Result<MetricReport> {
    check(y, y_hat)?;
    let (abs, sq) = error_sums(y, y_hat);
    Ok(report(y.len(), abs, sq, None))
}

/// MAE, RMSE and `R² = 1 − SS_res / SS_tot`. Constant targets make R²
/// undefined and are rejected.
pub fn metrics(y: &[f64], y_hat: &[f64]) -> Result<MetricReport> {
    check(y, y_hat)?;
    let (abs, ss_res) = error_sums(y, y_hat);
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(report(y.len(), abs, ss_res, Some(1.0 - ss_res / ss_tot)))
}
