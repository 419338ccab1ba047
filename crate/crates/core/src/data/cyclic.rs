use std::f64::consts::TAU;

use chrono::{DateTime, Datelike, Timelike, Utc};

use crate::{Error, Result};

/// Point on the unit circle encoding a periodic index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CyclicFeature {
    pub sin: f64,
    pub cos: f64,
}

/// `(sin(2πt/cycle), cos(2πt/cycle))`. `t` is reduced modulo `cycle` first
/// so the encoding is exactly periodic.
pub fn cyclic_encode(t: i64, cycle: u32) -> Result<CyclicFeature> {
    if cycle == 0 {
        return Err(Error::invalid("cycle must be at least 1"));
    }
    let phase = t.rem_euclid(cycle as i64) as f64 / cycle as f64;
    let (sin, cos) = (TAU * phase).sin_cos();
    Ok(CyclicFeature { sin, cos })
}

/// Cycles used for the time channels: hour of day, day of week, month.
pub const TIME_CYCLES: [u32; 3] = [24, 7, 12];

/// Number of time channels (a sin/cos pair per cycle).
pub const TIME_FEATURES: usize = 2 * TIME_CYCLES.len();

/// Time channels for one timestamp, ordered
/// `[hour_sin, hour_cos, dow_sin, dow_cos, month_sin, month_cos]`.
/// Day of week counts from Monday = 0, month from January = 0.
pub fn time_features(ts: DateTime<Utc>) -> [f64; TIME_FEATURES] {
    let idx = [
        ts.hour() as i64,
        ts.weekday().num_days_from_monday() as i64,
        ts.month0() as i64,
    ];
    let mut out = [0.0; TIME_FEATURES];
    for (k, (&t, &cycle)) in idx.iter().zip(&TIME_CYCLES).enumerate() {
        let f = cyclic_encode(t, cycle).expect("nonzero cycle");
        out[2 * k] = f.sin;
        out[2 * k + 1] = f.cos;
    }
    out
}
