use serde::{Deserialize, Serialize};

use super::{Pollutant, StationSeries};
use crate::{Error, Result};

/// Per-pollutant min/max scaling to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub min: [f64; Pollutant::COUNT],
    pub max: [f64; Pollutant::COUNT],
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<()> {
        for p in Pollutant::ALL {
            let (lo, hi) = (self.min[p.index()], self.max[p.index()]);
            if !(lo.is_finite() && hi.is_finite()) {
                return Err(Error::invalid(format!("{p}: non-finite normalization bounds")));
            }
            if hi <= lo {
                return Err(Error::DegenerateChannel(p.column()));
            }
        }
        Ok(())
    }

    pub fn range(&self, p: Pollutant) -> f64 {
        self.max[p.index()] - self.min[p.index()]
    }

    pub fn apply(&self, p: Pollutant, x: f64) -> f64 {
        (x - self.min[p.index()]) / self.range(p)
    }

    pub fn invert(&self, p: Pollutant, x: f64) -> f64 {
        x * self.range(p) + self.min[p.index()]
    }
}

/// Min/max over valid entries of every station.
pub fn fit_normalization(series: &[StationSeries]) -> Result<NormalizationSpec> {
    let mut min = [f64::INFINITY; Pollutant::COUNT];
    let mut max = [f64::NEG_INFINITY; Pollutant::COUNT];
    for s in series {
        for p in Pollutant::ALL {
            for (&v, &ok) in s.channel(p).iter().zip(s.channel_valid(p)) {
                if ok {
                    min[p.index()] = min[p.index()].min(v);
                    max[p.index()] = max[p.index()].max(v);
                }
            }
        }
    }
    for p in Pollutant::ALL {
        if !min[p.index()].is_finite() {
            return Err(Error::EmptyChannel(p.column()));
        }
        if max[p.index()] <= min[p.index()] {
            return Err(Error::DegenerateChannel(p.column()));
        }
    }
    Ok(NormalizationSpec { min, max })
}
