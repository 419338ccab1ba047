//! Station records: ingestion, filtering, normalization, time features,
//! windowing and synthetic generation.

mod cyclic;
mod load;
mod normalize;
mod synth;
mod window;

use std::collections::HashSet;
use std::ops::Range;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use cyclic::{cyclic_encode, time_features, CyclicFeature, TIME_CYCLES, TIME_FEATURES};
pub use load::{load_stations, write_stations, CSV_HEADER};
pub use normalize::{fit_normalization, NormalizationSpec};
pub use synth::{synth_dataset, synth_dataset_at, SynthConfig};
pub use window::{chronological_split, make_windows, SplitRanges, WindowBatch, Windows};

/// Pollutant channels, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pollutant {
    Pm25,
    Pm10,
    Co,
    No2,
    So2,
    O3,
}

impl Pollutant {
    pub const ALL: [Pollutant; 6] = [
        Pollutant::Pm25,
        Pollutant::Pm10,
        Pollutant::Co,
        Pollutant::No2,
        Pollutant::So2,
        Pollutant::O3,
    ];
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }

    /// CSV column name.
    pub fn column(self) -> &'static str {
        match self {
            Pollutant::Pm25 => "pm25",
            Pollutant::Pm10 => "pm10",
            Pollutant::Co => "co",
            Pollutant::No2 => "no2",
            Pollutant::So2 => "so2",
            Pollutant::O3 => "o3",
        }
    }
}

impl std::fmt::Display for Pollutant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pollutant::Pm25 => "PM2.5",
            Pollutant::Pm10 => "PM10",
            Pollutant::Co => "CO",
            Pollutant::No2 => "NO2",
            Pollutant::So2 => "SO2",
            Pollutant::O3 => "O3",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationMeta {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
}

impl StationMeta {
    pub fn new(station_id: impl Into<String>, lat: f64, lon: f64) -> Result<Self> {
        let meta = Self {
            station_id: station_id.into(),
            lat,
            lon,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lat.is_finite() && (-90.0..=90.0).contains(&self.lat)) {
            return Err(Error::invalid(format!(
                "station {}: latitude {} out of range",
                self.station_id, self.lat
            )));
        }
        if !(self.lon.is_finite() && (-180.0..=180.0).contains(&self.lon)) {
            return Err(Error::invalid(format!(
                "station {}: longitude {} out of range",
                self.station_id, self.lon
            )));
        }
        Ok(())
    }

    pub fn coords(&self) -> [f64; 2] {
        [self.lat, self.lon]
    }
}

/// Hourly record of one station. Values are stored `[pollutant × hour]`;
/// invalid entries hold 0.0 and have `valid = false`.
#[derive(Clone, Debug, PartialEq)]
pub struct StationSeries {
    pub meta: StationMeta,
    pub start: DateTime<Utc>,
    hours: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl StationSeries {
    /// All-missing series of `hours` hours starting at `start`.
    pub fn empty(meta: StationMeta, start: DateTime<Utc>, hours: usize) -> Self {
        Self {
            meta,
            start,
            hours,
            values: vec![0.0; Pollutant::COUNT * hours],
            valid: vec![false; Pollutant::COUNT * hours],
        }
    }

    pub fn hours(&self) -> usize {
        self.hours
    }

    pub fn id(&self) -> &str {
        &self.meta.station_id
    }

    pub fn timestamp(&self, hour: usize) -> DateTime<Utc> {
        self.start + Duration::hours(hour as i64)
    }

    /// Stores a reading. Negative or non-finite readings are recorded as
    /// missing.
    pub fn set(&mut self, p: Pollutant, hour: usize, value: Option<f64>) {
        let i = p.index() * self.hours + hour;
        match value {
            Some(v) if v.is_finite() && v >= 0.0 => {
                self.values[i] = v;
                self.valid[i] = true;
            }
            _ => {
                self.values[i] = 0.0;
                self.valid[i] = false;
            }
        }
    }

    pub fn get(&self, p: Pollutant, hour: usize) -> Option<f64> {
        let i = p.index() * self.hours + hour;
        self.valid[i].then(|| self.values[i])
    }

    pub fn channel(&self, p: Pollutant) -> &[f64] {
        &self.values[p.index() * self.hours..(p.index() + 1) * self.hours]
    }

    pub fn channel_valid(&self, p: Pollutant) -> &[bool] {
        &self.valid[p.index() * self.hours..(p.index() + 1) * self.hours]
    }

    /// Fraction of hours at which every pollutant is valid.
    pub fn valid_fraction(&self) -> f64 {
        if self.hours == 0 {
            return 0.0;
        }
        let complete = (0..self.hours)
            .filter(|&t| {
                Pollutant::ALL
                    .iter()
                    .all(|&p| self.valid[p.index() * self.hours + t])
            })
            .count();
        complete as f64 / self.hours as f64
    }

    /// The same station restricted to `range` (in hours from `start`).
    pub fn slice(&self, range: Range<usize>) -> Self {
        let mut out = Self::empty(
            self.meta.clone(),
            self.timestamp(range.start),
            range.len(),
        );
        for p in Pollutant::ALL {
            for (j, t) in range.clone().enumerate() {
                out.set(p, j, self.get(p, t));
            }
        }
        out
    }

    /// Re-bases the series onto `[start, start + hours)`, padding with
    /// missing values.
    fn realign(&self, start: DateTime<Utc>, hours: usize) -> Self {
        let offset = (self.start - start).num_hours() as usize;
        let mut out = Self::empty(self.meta.clone(), start, hours);
        for p in Pollutant::ALL {
            for t in 0..self.hours {
                out.set(p, offset + t, self.get(p, t));
            }
        }
        out
    }
}

/// Extends every series to the union of their time spans so that all share
/// one time axis.
pub fn align_stations(series: &[StationSeries]) -> Result<Vec<StationSeries>> {
    let start = series
        .iter()
        .map(|s| s.start)
        .min()
        .ok_or_else(|| Error::invalid("no stations"))?;
    let end = series
        .iter()
        .map(|s| s.start + Duration::hours(s.hours() as i64))
        .max()
        .expect("non-empty");
    let hours = (end - start).num_hours() as usize;
    let mut seen = HashSet::new();
    for s in series {
        if !seen.insert(s.id()) {
            return Err(Error::invalid(format!("duplicate station id {}", s.id())));
        }
    }
    Ok(series.iter().map(|s| s.realign(start, hours)).collect())
}

/// Keeps stations whose fraction of fully observed hours is at least
/// `min_valid_fraction`, preserving order.
pub fn filter_complete(
    series: &[StationSeries],
    min_valid_fraction: f64,
) -> Result<Vec<StationSeries>> {
    if !(min_valid_fraction > 0.0 && min_valid_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "min_valid_fraction must lie in (0, 1], got {min_valid_fraction}"
        )));
    }
    let kept: Vec<StationSeries> = series
        .iter()
        .filter(|s| s.valid_fraction() >= min_valid_fraction)
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::NoStationsSurvive);
    }
    Ok(kept)
}
