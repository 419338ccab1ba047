use std::io::Write;

use serde::{Deserialize, Serialize};

use super::metrics::{error_metrics, MetricReport};
use crate::data::{NormalizationSpec, Pollutant, Windows};
use crate::model::AqNet;
use crate::nn::Scalar;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationError {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub mae: f64,
    pub rmse: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenErrors {
    /// One entry per hidden station with enough test truth, in dataset
    /// order.
    pub stations: Vec<StationError>,
    /// Hidden stations dropped for lack of test truth.
    pub skipped: usize,
    /// All hidden samples pooled.
    pub hidden: Option<MetricReport>,
    /// The visible stations of the same windows, pooled.
    pub visible: Option<MetricReport>,
}

/// Withholds `hidden_ids` from the inputs of `windows` and scores the
/// interpolated PM2.5 at each of them over every horizon step, in µg/m³.
pub fn hidden_station_errors<T: Scalar>(
    model: &AqNet<T>,
    windows: &Windows,
    norm: &NormalizationSpec,
    hidden_ids: &[String],
) -> Result<HiddenErrors> {
    if hidden_ids.is_empty() {
        return Ok(HiddenErrors {
            stations: Vec::new(),
            skipped: 0,
            hidden: None,
            visible: None,
        });
    }
    let w = windows.with_hidden(hidden_ids)?;
    let n_vis = w.n_visible();
    let m = w.n_hidden();
    let mut per: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); m];
    let (mut vy, mut vp) = (Vec::new(), Vec::new());
    let inv = |v: f64| norm.invert(Pollutant::Pm25, v);
    for batch in w.iter_batches(32) {
        let batch = batch?;
        let pred = model.predict(&batch)?;
        let h = batch.horizon;
        for bi in 0..batch.batch {
            for hh in 0..h {
                for j in 0..m {
                    if batch.target_valid(bi, hh, n_vis + j) {
                        per[j].0.push(inv(batch.target(bi, hh, n_vis + j)));
                        per[j].1.push(inv(pred.hidden.data()[(bi * h + hh) * m + j]));
                    }
                }
                for n in 0..n_vis {
                    if batch.target_valid(bi, hh, n) {
                        vy.push(inv(batch.target(bi, hh, n)));
                        vp.push(inv(pred.visible.data()[(bi * h + hh) * n_vis + n]));
                    }
                }
            }
        }
    }
    let ids = w.hidden_ids();
    let coords: Vec<[f64; 2]> = ids
        .iter()
        .map(|id| {
            let i = w.station_ids().iter().position(|s| s == id).expect("hidden id is a station");
            w.station_coords()[i]
        })
        .collect();
    let mut stations = Vec::new();
    let mut skipped = 0;
    let (mut hy, mut hp) = (Vec::new(), Vec::new());
    for ((id, c), (y, p)) in ids.iter().zip(&coords).zip(&per) {
        if y.len() < 2 {
            skipped += 1;
            continue;
        }
        let r = error_metrics(y, p)?;
        stations.push(StationError {
            station_id: id.clone(),
            lat: c[0],
            lon: c[1],
            mae: r.mae,
            rmse: r.rmse,
            n: r.n,
        });
        hy.extend_from_slice(y);
        hp.extend_from_slice(p);
    }
    if skipped > 0 {
        log::warn!("{skipped} hidden station(s) have no test truth and were skipped");
    }
    let pooled = |y: &[f64], p: &[f64], label: &str| {
        (y.len() >= 2)
            .then(|| error_metrics(y, p).map(|r| r.labeled(label, "all")))
            .transpose()
    };
    Ok(HiddenErrors {
        stations,
        skipped,
        hidden: pooled(&hy, &hp, "hidden")?,
        visible: pooled(&vy, &vp, "visible")?,
    })
}

/// `station_id,lat,lon,mae,rmse`
pub fn write_station_errors<W: Write>(errors: &[StationError], mut w: W) -> Result<()> {
    writeln!(w, "station_id,lat,lon,mae,rmse")?;
    for e in errors {
        writeln!(w, "{},{},{},{},{}", e.station_id, e.lat, e.lon, e.mae, e.rmse)?;
    }
    Ok(())
}
