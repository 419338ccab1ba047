use std::f64::consts::TAU;

use chrono::{Datelike, Duration, TimeZone, Timelike, Utc};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Pollutant, StationMeta, StationSeries};
use crate::{Error, Result};

/// Generator settings. Amplitudes are relative to the local level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_stations: usize,
    pub hours: usize,
    pub seed: u64,
    /// Relative amplitude of the 24 h sinusoid.
    pub diurnal_amp: f64,
    /// Relative weekday/weekend level contrast.
    pub weekly_amp: f64,
    pub n_plumes: usize,
    /// Std of the multiplicative, spatially correlated noise.
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_stations: 20,
            hours: 4320,
            seed: 42,
            diurnal_amp: 0.5,
            weekly_amp: 0.9,
            n_plumes: 3,
            noise_std: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_stations < 4 {
            return Err(Error::invalid(format!(
                "n_stations must be at least 4, got {}",
                self.n_stations
            )));
        }
        if self.hours < 720 {
            return Err(Error::invalid(format!(
                "hours must be at least 720, got {}",
                self.hours
            )));
        }
        for (name, v) in [
            ("diurnal_amp", self.diurnal_amp),
            ("weekly_amp", self.weekly_amp),
            ("noise_std", self.noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        if self.diurnal_amp >= 1.0 || self.weekly_amp >= 1.0 {
            return Err(Error::invalid("diurnal_amp and weekly_amp must be below 1"));
        }
        Ok(())
    }
}

const LAT_RANGE: (f64, f64) = (39.0, 41.0);
const LON_RANGE: (f64, f64) = (115.5, 118.0);
const KM_PER_DEG_LAT: f64 = 110.57;
/// Correlation length of the station noise field.
const NOISE_LENGTH_KM: f64 = 40.0;
/// Lag-one autocorrelation of the hourly noise.
const NOISE_AR: f64 = 0.9;
/// Share of the noise that is independent per station.
const NUGGET: f64 = 0.1;

fn to_km(lat: f64, lon: f64) -> [f64; 2] {
    let mid = 0.5 * (LAT_RANGE.0 + LAT_RANGE.1);
    [
        (lon - LON_RANGE.0) * KM_PER_DEG_LAT * mid.to_radians().cos(),
        (lat - LAT_RANGE.0) * KM_PER_DEG_LAT,
    ]
}

struct Plume {
    pos: [f64; 2],
    vel: [f64; 2],
    width: f64,
    amp: f64,
    period: f64,
    phase: f64,
}

/// Stations at random positions in the bounding box.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<StationSeries>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coords: Vec<[f64; 2]> = (0..cfg.n_stations)
        .map(|_| {
            [
                rng.random_range(LAT_RANGE.0..LAT_RANGE.1),
                rng.random_range(LON_RANGE.0..LON_RANGE.1),
            ]
        })
        .collect();
    synth_at(cfg, &coords, &mut rng)
}

/// Stations at the given `[lat, lon]` positions.
pub fn synth_dataset_at(cfg: &SynthConfig, coords: &[[f64; 2]]) -> Result<Vec<StationSeries>> {
    let mut checked = cfg.clone();
    checked.n_stations = coords.len();
    checked.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    synth_at(&checked, coords, &mut rng)
}

fn synth_at(cfg: &SynthConfig, coords: &[[f64; 2]], rng: &mut ChaCha8Rng) -> Result<Vec<StationSeries>> {
    let n = coords.len();
    let km: Vec<[f64; 2]> = coords.iter().map(|c| to_km(c[0], c[1])).collect();
    let extent = to_km(LAT_RANGE.1, LON_RANGE.1);

    let mut plumes: Vec<Plume> = (0..cfg.n_plumes)
        .map(|_| {
            let speed = rng.random_range(2.0..6.0);
            let dir = rng.random_range(0.0..TAU);
            Plume {
                pos: [rng.random_range(0.0..extent[0]), rng.random_range(0.0..extent[1])],
                vel: [speed * dir.cos(), speed * dir.sin()],
                width: rng.random_range(40.0..70.0),
                amp: rng.random_range(30.0..60.0),
                period: rng.random_range(60.0..150.0),
                phase: rng.random_range(0.0..TAU),
            }
        })
        .collect();

    let chol = noise_factor(&km)?;
    let mut noise = vec![0.0; n];
    let innov = (1.0 - NOISE_AR * NOISE_AR).sqrt();
    let diurnal_peak = 20.0;

    let start = Utc.with_ymd_and_hms(2015, 1, 1, 0, 0, 0).unwrap();
    let mut out: Vec<StationSeries> = coords
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let meta = StationMeta::new(format!("S{i:03}"), c[0], c[1])?;
            Ok(StationSeries::empty(meta, start, cfg.hours))
        })
        .collect::<Result<_>>()?;

    for t in 0..cfg.hours {
        let ts = start + Duration::hours(t as i64);
        let hour = ts.hour() as f64;
        let weekend = ts.weekday().num_days_from_monday() >= 5;
        let weekly = 1.0 + cfg.weekly_amp * if weekend { -5.0 / 7.0 } else { 2.0 / 7.0 };
        let diurnal = 1.0 + cfg.diurnal_amp * (TAU * (hour - diurnal_peak + 6.0) / 24.0).sin();

        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..n {
            let mut corr = 0.0;
            for j in 0..=i {
                corr += chol[(i, j)] * z[j];
            }
            noise[i] = if t == 0 { corr } else { NOISE_AR * noise[i] + innov * corr };
        }

        for (i, s) in out.iter_mut().enumerate() {
            let [x, y] = km[i];
            let mut level = 35.0 + 25.0 * (x / extent[0]) + 10.0 * (y / extent[1]);
            for p in &plumes {
                let d2 = (x - p.pos[0]).powi(2) + (y - p.pos[1]).powi(2);
                let pulse = 0.5 + 0.5 * (TAU * t as f64 / p.period + p.phase).sin();
                level += p.amp * pulse * (-d2 / (2.0 * p.width * p.width)).exp();
            }
            let nugget: f64 = rng.sample(StandardNormal);
            let rel = cfg.noise_std * ((1.0 - NUGGET) * noise[i] + NUGGET * nugget);
            let pm25 = (level * weekly * diurnal * (1.0 + rel)).max(1.0);
            s.set(Pollutant::Pm25, t, Some(pm25));

            let mut others = |p: Pollutant, slope: f64, icpt: f64, sd: f64| {
                let e: f64 = rng.sample(StandardNormal);
                s.set(p, t, Some((slope * pm25 + icpt + sd * e).max(0.01)));
            };
            others(Pollutant::Pm10, 1.4, 15.0, 5.0);
            others(Pollutant::Co, 0.012, 0.4, 0.08);
            others(Pollutant::No2, 0.35, 18.0, 4.0);
            others(Pollutant::So2, 0.1, 5.0, 2.0);
            others(Pollutant::O3, -0.3, 95.0, 8.0);
        }

        for p in &mut plumes {
            for a in 0..2 {
                p.pos[a] += p.vel[a];
                if p.pos[a] < 0.0 || p.pos[a] > extent[a] {
                    p.vel[a] = -p.vel[a];
                    p.pos[a] = p.pos[a].clamp(0.0, extent[a]);
                }
            }
        }
    }
    Ok(out)
}

/// Lower Cholesky factor of the squared-exponential station covariance.
fn noise_factor(km: &[[f64; 2]]) -> Result<DMatrix<f64>> {
    let n = km.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        let d2 = (km[i][0] - km[j][0]).powi(2) + (km[i][1] - km[j][1]).powi(2);
        (-d2 / (2.0 * NOISE_LENGTH_KM * NOISE_LENGTH_KM)).exp() + if i == j { 1e-6 } else { 0.0 }
    });
    k.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::invalid("station noise covariance is not positive definite"))
}
