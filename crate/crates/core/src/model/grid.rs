use std::io::{BufRead, Write};
use std::str::FromStr;

use chrono::{DateTime, Duration, Utc};

use super::net::AqNet;
use crate::data::{NormalizationSpec, Pollutant, WindowBatch};
use crate::nn::Scalar;
use crate::{Error, Result};

/// Inclusive latitude/longitude box in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub lat0: f64,
    pub lon0: f64,
    pub lat1: f64,
    pub lon1: f64,
}

impl BoundingBox {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lat0, self.lon0, self.lat1, self.lon1];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("bbox has non-finite bounds"));
        }
        if self.lat1 < self.lat0 || self.lon1 < self.lon0 {
            return Err(Error::invalid(format!("bbox {self:?} is empty")));
        }
        if self.lat0 < -90.0 || self.lat1 > 90.0 || self.lon0 < -180.0 || self.lon1 > 180.0 {
            return Err(Error::invalid(format!("bbox {self:?} exceeds valid coordinates")));
        }
        Ok(())
    }

    pub fn contains(&self, c: [f64; 2]) -> bool {
        (self.lat0..=self.lat1).contains(&c[0]) && (self.lon0..=self.lon1).contains(&c[1])
    }
}

impl FromStr for BoundingBox {
    type Err = Error;

    /// Parses `lat0,lon0,lat1,lon1`.
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid(format!("bbox `{s}` is not lat0,lon0,lat1,lon1")))?;
        if v.len() != 4 {
            return Err(Error::invalid(format!("bbox `{s}` needs four numbers")));
        }
        let b = BoundingBox {
            lat0: v[0],
            lon0: v[1],
            lat1: v[2],
            lon1: v[3],
        };
        b.validate()?;
        Ok(b)
    }
}

/// Evenly spaced points from `lo` to at most `hi` (inclusive).
pub fn grid_axis(lo: f64, hi: f64, resolution: f64) -> Vec<f64> {
    let n = ((hi - lo) / resolution + 1e-9).floor() as usize + 1;
    (0..n).map(|i| lo + i as f64 * resolution).collect()
}

/// PM2.5 raster in µg/m³, rows by latitude (ascending), columns by
/// longitude (ascending).
#[derive(Clone, Debug, PartialEq)]
pub struct ReanalysisGrid {
    pub lat_axis: Vec<f64>,
    pub lon_axis: Vec<f64>,
    /// `[n_lat × n_lon]`
    pub values: Vec<f64>,
    /// First and last target hour covered.
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub k: usize,
    pub checkpoint_id: String,
    /// Nodes whose raw value was negative and was clamped to zero.
    pub clamped: usize,
}

impl ReanalysisGrid {
    pub fn value(&self, i_lat: usize, i_lon: usize) -> f64 {
        self.values[i_lat * self.lon_axis.len() + i_lon]
    }

    pub fn nodes(&self) -> Vec<[f64; 2]> {
        self.lat_axis
            .iter()
            .flat_map(|&la| self.lon_axis.iter().map(move |&lo| [la, lo]))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "lat,lon,pm25")?;
        for (node, v) in self.nodes().iter().zip(&self.values) {
            writeln!(w, "{},{},{}", node[0], node[1], v)?;
        }
        Ok(())
    }

    /// Header-bearing text grid; [`ReanalysisGrid::read_text`] restores it
    /// exactly.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
        writeln!(w, "# pm2.5 reanalysis grid, ug/m3, rows = latitude ascending")?;
        writeln!(w, "start: {}", self.start.to_rfc3339())?;
        writeln!(w, "end: {}", self.end.to_rfc3339())?;
        writeln!(w, "k: {}", self.k)?;
        writeln!(w, "checkpoint: {}", self.checkpoint_id)?;
        writeln!(w, "clamped: {}", self.clamped)?;
        writeln!(w, "lat_axis: {}", join(&self.lat_axis))?;
        writeln!(w, "lon_axis: {}", join(&self.lon_axis))?;
        writeln!(w, "values:")?;
        for row in self.values.chunks(self.lon_axis.len().max(1)) {
            writeln!(w, "{}", join(row))?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let bad = |m: &str| Error::invalid(format!("grid text: {m}"));
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            loop {
                let l = lines.next().ok_or_else(|| bad("unexpected end"))??;
                if !l.starts_with('#') {
                    return Ok(l);
                }
            }
        };
        let mut field = |key: &str| -> Result<String> {
            let l = next()?;
            l.strip_prefix(&format!("{key}:"))
                .map(|v| v.trim().to_string())
                .ok_or_else(|| bad(&format!("expected `{key}:`")))
        };
        let nums = |s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|x| x.parse::<f64>().map_err(|_| bad(&format!("bad number `{x}`"))))
                .collect()
        };
        let ts = |s: &str| -> Result<DateTime<Utc>> {
            DateTime::parse_from_rfc3339(s)
                .map(|t| t.with_timezone(&Utc))
                .map_err(|_| bad("bad timestamp"))
        };
        let start = ts(&field("start")?)?;
        let end = ts(&field("end")?)?;
        let k = field("k")?.parse().map_err(|_| bad("bad k"))?;
        let checkpoint_id = field("checkpoint")?;
        let clamped = field("clamped")?.parse().map_err(|_| bad("bad clamp count"))?;
        let lat_axis = nums(&field("lat_axis")?)?;
        let lon_axis = nums(&field("lon_axis")?)?;
        field("values")?;
        let mut values = Vec::with_capacity(lat_axis.len() * lon_axis.len());
        for _ in 0..lat_axis.len() {
            let row = nums(&next()?)?;
            if row.len() != lon_axis.len() {
                return Err(bad("row length differs from lon_axis"));
            }
            values.extend(row);
        }
        Ok(Self {
            lat_axis,
            lon_axis,
            values,
            start,
            end,
            k,
            checkpoint_id,
            clamped,
        })
    }

    /// Binary PPM heatmap, north up, `scale` pixels per node. Colors run
    /// blue → cyan → yellow → red between `range` (default: data min/max).
    pub fn write_ppm<W: Write>(&self, mut w: W, scale: usize, range: Option<(f64, f64)>) -> Result<()> {
        let scale = scale.max(1);
        let (nl, no) = (self.lat_axis.len(), self.lon_axis.len());
        let (lo, hi) = range.unwrap_or_else(|| {
            self.values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
        });
        write!(w, "P6\n{} {}\n255\n", no * scale, nl * scale)?;
        let mut row_px = Vec::with_capacity(no * scale * 3);
        for i in (0..nl).rev() {
            row_px.clear();
            for j in 0..no {
                let v = self.value(i, j);
                let x = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
                let c = colormap(x);
                for _ in 0..scale {
                    row_px.extend_from_slice(&c);
                }
            }
            for _ in 0..scale {
                w.write_all(&row_px)?;
            }
        }
        Ok(())
    }
}

/// Grid values from a `lat,lon,pm25` file as `(lat_axis, lon_axis, values)`.
pub fn read_grid_csv<R: BufRead>(r: R) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let bad = |m: String| Error::invalid(format!("grid csv: {m}"));
    let mut lats: Vec<f64> = Vec::new();
    let mut lons: Vec<f64> = Vec::new();
    let mut values = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != "lat,lon,pm25" {
                return Err(bad("missing header".into()));
            }
            continue;
        }
        let parts: Vec<f64> = line
            .split(',')
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(format!("line {}: bad number", i + 1)))?;
        if parts.len() != 3 {
            return Err(bad(format!("line {}: expected 3 fields", i + 1)));
        }
        if lats.last() != Some(&parts[0]) {
            lats.push(parts[0]);
        }
        if lats.len() == 1 {
            lons.push(parts[1]);
        }
        values.push(parts[2]);
    }
    if values.len() != lats.len() * lons.len() {
        return Err(bad("rows do not form a full grid".into()));
    }
    Ok((lats, lons, values))
}

/// Piecewise-linear blue (0) → cyan (1/3) → yellow (2/3) → red (1).
pub fn colormap(x: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 4] = [
        [0.0, 0.0, 255.0],
        [0.0, 255.0, 255.0],
        [255.0, 255.0, 0.0],
        [255.0, 0.0, 0.0],
    ];
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
    let pos = x * 3.0;
    let i = (pos.floor() as usize).min(2);
    let f = pos - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (STOPS[i][c] + f * (STOPS[i + 1][c] - STOPS[i][c])).round() as u8;
    }
    out
}

/// Interpolates one window's predictions onto a regular grid. Node values
/// are the mean over the horizon, denormalized, with negatives clamped to
/// zero.
pub fn reanalyze_grid<T: Scalar>(
    model: &AqNet<T>,
    norm: &NormalizationSpec,
    batch: &WindowBatch,
    bbox: BoundingBox,
    resolution: f64,
    k: usize,
    checkpoint_id: &str,
) -> Result<ReanalysisGrid> {
    bbox.validate()?;
    if !(resolution.is_finite() && resolution > 0.0) {
        return Err(Error::invalid("resolution must be positive"));
    }
    if batch.batch != 1 {
        return Err(Error::invalid("grid reanalysis takes a single window"));
    }
    if !batch.station_coords.iter().any(|&c| bbox.contains(c)) {
        return Err(Error::invalid("bbox contains no station"));
    }
    let lat_axis = grid_axis(bbox.lat0, bbox.lat1, resolution);
    let lon_axis = grid_axis(bbox.lon0, bbox.lon1, resolution);
    let nodes: Vec<[f64; 2]> = lat_axis
        .iter()
        .flat_map(|&la| lon_axis.iter().map(move |&lo| [la, lo]))
        .collect();
    let y = model.predict_at(batch, &nodes, k)?;
    let h = batch.horizon;
    let q = nodes.len();
    let mut clamped = 0;
    let values = (0..q)
        .map(|i| {
            let mean = (0..h).map(|hh| y.data()[hh * q + i]).sum::<f64>() / h as f64;
            let v = norm.invert(Pollutant::Pm25, mean);
            if v < 0.0 {
                clamped += 1;
                0.0
            } else {
                v
            }
        })
        .collect();
    let start = batch.target_start[0];
    Ok(ReanalysisGrid {
        lat_axis,
        lon_axis,
        values,
        start,
        end: start + Duration::hours(h as i64 - 1),
        k,
        checkpoint_id: checkpoint_id.to_string(),
        clamped,
    })
}

/// One row of the per-station prediction export.
#[derive(Clone, Debug, PartialEq)]
pub struct StationPrediction {
    pub station_id: String,
    pub timestamp: DateTime<Utc>,
    pub pm25_pred: f64,
    pub pm25_obs: Option<f64>,
}

pub fn write_station_predictions<W: Write>(rows: &[StationPrediction], mut w: W) -> Result<()> {
    writeln!(w, "station_id,timestamp,pm25_pred,pm25_obs")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.station_id,
            r.timestamp.format("%Y-%m-%dT%H:%M:%SZ"),
            r.pm25_pred,
            r.pm25_obs.map(|v| v.to_string()).unwrap_or_default()
        )?;
    }
    Ok(())
}
