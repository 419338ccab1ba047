use std::ops::Range;
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};

use super::{time_features, NormalizationSpec, Pollutant, StationSeries, TIME_FEATURES};
use crate::{Error, Result};

/// Windows whose target block has more than this fraction of invalid PM2.5
/// entries are dropped.
pub const MAX_INVALID_TARGET_FRACTION: f64 = 0.2;

/// One minibatch.
///
/// Layouts (row-major):
/// - `inputs`: `[B × C × T_in × N]`, normalized, gap-filled, clamped to `[0, 1]`
/// - `time_features`: `[B × 6 × T_in]`
/// - `targets`, `target_mask`: `[B × H × N_target]`, normalized PM2.5
///
/// Target stations list the visible stations first (same order as the
/// inputs), followed by hidden ones.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub batch: usize,
    pub t_in: usize,
    pub horizon: usize,
    pub n_inputs: usize,
    pub n_targets: usize,
    pub inputs: Vec<f64>,
    pub time_features: Vec<f64>,
    pub targets: Vec<f64>,
    pub target_mask: Vec<bool>,
    pub station_coords: Vec<[f64; 2]>,
    pub target_coords: Vec<[f64; 2]>,
    pub station_ids: Vec<String>,
    pub target_ids: Vec<String>,
    /// Timestamp of the first target hour of each window.
    pub target_start: Vec<DateTime<Utc>>,
}

impl WindowBatch {
    pub const CHANNELS: usize = Pollutant::COUNT;

    pub fn input(&self, b: usize, c: usize, t: usize, n: usize) -> f64 {
        self.inputs[((b * Self::CHANNELS + c) * self.t_in + t) * self.n_inputs + n]
    }

    pub fn time_feature(&self, b: usize, k: usize, t: usize) -> f64 {
        self.time_features[(b * TIME_FEATURES + k) * self.t_in + t]
    }

    fn target_index(&self, b: usize, h: usize, j: usize) -> usize {
        (b * self.horizon + h) * self.n_targets + j
    }

    pub fn target(&self, b: usize, h: usize, j: usize) -> f64 {
        self.targets[self.target_index(b, h, j)]
    }

    pub fn target_valid(&self, b: usize, h: usize, j: usize) -> bool {
        self.target_mask[self.target_index(b, h, j)]
    }

    pub fn n_hidden(&self) -> usize {
        self.n_targets - self.n_inputs
    }
}

/// Normalized station data shared by every view.
#[derive(Debug)]
struct Prepared {
    start: DateTime<Utc>,
    hours: usize,
    ids: Vec<String>,
    coords: Vec<[f64; 2]>,
    /// `[station][pollutant × hour]`, normalized, unclamped
    values: Vec<Vec<f64>>,
    valid: Vec<Vec<bool>>,
    time: Vec<[f64; TIME_FEATURES]>,
    norm: NormalizationSpec,
}

impl Prepared {
    fn value(&self, s: usize, p: usize, t: usize) -> Option<f64> {
        let i = p * self.hours + t;
        self.valid[s][i].then(|| self.values[s][i])
    }
}

/// Window index over a station set with a fixed hidden/visible partition.
#[derive(Clone, Debug)]
pub struct Windows {
    data: Arc<Prepared>,
    t_in: usize,
    horizon: usize,
    starts: Vec<usize>,
    visible: Vec<usize>,
    hidden: Vec<usize>,
}

/// Hour ranges of the chronological 70/15/15 split. Each range bounds the
/// target hours of the windows it owns; inputs may reach back before it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn chronological_split(hours: usize) -> Result<SplitRanges> {
    let a = hours * 70 / 100;
    let b = hours * 85 / 100;
    if a == 0 || b == a || b == hours {
        return Err(Error::InsufficientData(format!(
            "{hours} hours cannot be split 70/15/15"
        )));
    }
    Ok(SplitRanges {
        train: 0..a,
        val: a..b,
        test: b..hours,
    })
}

/// Builds every window starting at multiples of `stride`.
///
/// Missing inputs are filled with the last valid value inside the window
/// (leading gaps take the first valid value). A window is skipped when any
/// station has a pollutant with no valid input in it, or when more than 20%
/// of its PM2.5 targets are missing. Stations in `hidden_ids` contribute
/// targets and coordinates only.
pub fn make_windows(
    series: &[StationSeries],
    spec: &NormalizationSpec,
    t_in: usize,
    horizon: usize,
    stride: usize,
    hidden_ids: &[String],
) -> Result<Windows> {
    spec.validate()?;
    if series.is_empty() {
        return Err(Error::invalid("no stations"));
    }
    if t_in == 0 || horizon == 0 || stride == 0 {
        return Err(Error::invalid("t_in, horizon and stride must be at least 1"));
    }
    let start = series[0].start;
    let hours = series[0].hours();
    if series.iter().any(|s| s.start != start || s.hours() != hours) {
        return Err(Error::invalid("stations do not share one time axis"));
    }
    if t_in + horizon > hours {
        return Err(Error::InsufficientData(format!(
            "t_in {t_in} + horizon {horizon} exceeds series length {hours}"
        )));
    }

    let mut values = Vec::with_capacity(series.len());
    let mut valid = Vec::with_capacity(series.len());
    for s in series {
        let mut v = Vec::with_capacity(Pollutant::COUNT * hours);
        let mut m = Vec::with_capacity(Pollutant::COUNT * hours);
        for p in Pollutant::ALL {
            v.extend(s.channel(p).iter().map(|&x| spec.apply(p, x)));
            m.extend_from_slice(s.channel_valid(p));
        }
        values.push(v);
        valid.push(m);
    }
    let data = Prepared {
        start,
        hours,
        ids: series.iter().map(|s| s.id().to_string()).collect(),
        coords: series.iter().map(|s| s.meta.coords()).collect(),
        values,
        valid,
        time: (0..hours)
            .map(|t| time_features(start + Duration::hours(t as i64)))
            .collect(),
        norm: spec.clone(),
    };

    let starts = (0..=hours - t_in - horizon)
        .step_by(stride)
        .filter(|&s| window_usable(&data, s, t_in, horizon))
        .collect();
    let base = Windows {
        data: Arc::new(data),
        t_in,
        horizon,
        starts,
        visible: (0..series.len()).collect(),
        hidden: Vec::new(),
    };
    base.with_hidden(hidden_ids)
}

fn window_usable(d: &Prepared, s: usize, t_in: usize, horizon: usize) -> bool {
    let n = d.ids.len();
    for st in 0..n {
        for p in 0..Pollutant::COUNT {
            let base = p * d.hours;
            if !d.valid[st][base + s..base + s + t_in].iter().any(|&v| v) {
                return false;
            }
        }
    }
    let first = s + t_in;
    let missing = (0..n)
        .map(|st| {
            d.valid[st][first..first + horizon]
                .iter()
                .filter(|&&v| !v)
                .count()
        })
        .sum::<usize>();
    missing as f64 <= MAX_INVALID_TARGET_FRACTION * (n * horizon) as f64
}

impl Windows {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn t_in(&self) -> usize {
        self.t_in
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_visible(&self) -> usize {
        self.visible.len()
    }

    pub fn n_hidden(&self) -> usize {
        self.hidden.len()
    }

    pub fn n_stations(&self) -> usize {
        self.data.ids.len()
    }

    pub fn normalization(&self) -> &NormalizationSpec {
        &self.data.norm
    }

    /// Ids of all stations, in dataset order.
    pub fn station_ids(&self) -> &[String] {
        &self.data.ids
    }

    pub fn station_coords(&self) -> &[[f64; 2]] {
        &self.data.coords
    }

    pub fn visible_ids(&self) -> Vec<String> {
        self.visible.iter().map(|&i| self.data.ids[i].clone()).collect()
    }

    pub fn hidden_ids(&self) -> Vec<String> {
        self.hidden.iter().map(|&i| self.data.ids[i].clone()).collect()
    }

    /// Hour offset (from the dataset start) of window `i`'s first input.
    pub fn start_hour(&self, i: usize) -> usize {
        self.starts[i]
    }

    pub fn target_start(&self, i: usize) -> DateTime<Utc> {
        self.data.start + Duration::hours((self.starts[i] + self.t_in) as i64)
    }

    /// Same windows with a different hidden set.
    pub fn with_hidden(&self, hidden_ids: &[String]) -> Result<Windows> {
        let mut hidden = Vec::with_capacity(hidden_ids.len());
        for id in hidden_ids {
            let i = self
                .data
                .ids
                .iter()
                .position(|s| s == id)
                .ok_or_else(|| Error::invalid(format!("unknown hidden station {id}")))?;
            if !hidden.contains(&i) {
                hidden.push(i);
            }
        }
        hidden.sort_unstable();
        let visible: Vec<usize> = (0..self.data.ids.len())
            .filter(|i| !hidden.contains(i))
            .collect();
        if visible.is_empty() {
            return Err(Error::invalid("at least one station must stay visible"));
        }
        Ok(Windows {
            data: Arc::clone(&self.data),
            t_in: self.t_in,
            horizon: self.horizon,
            starts: self.starts.clone(),
            visible,
            hidden,
        })
    }

    /// Keeps windows whose whole target block lies inside `hours`.
    pub fn restrict_targets(&self, hours: Range<usize>) -> Windows {
        let mut out = self.clone();
        out.starts.retain(|&s| {
            let first = s + self.t_in;
            first >= hours.start && first + self.horizon <= hours.end
        });
        out
    }

    /// Keeps every `step`-th window.
    pub fn thin(&self, step: usize) -> Windows {
        let mut out = self.clone();
        out.starts = self.starts.iter().copied().step_by(step.max(1)).collect();
        out
    }

    pub fn batch(&self, indices: &[usize]) -> Result<WindowBatch> {
        let d = &*self.data;
        let (t_in, h) = (self.t_in, self.horizon);
        let n_in = self.visible.len();
        let targets_order: Vec<usize> = self.visible.iter().chain(&self.hidden).copied().collect();
        let n_t = targets_order.len();
        let b = indices.len();
        let c = Pollutant::COUNT;

        let mut inputs = vec![0.0; b * c * t_in * n_in];
        let mut time = vec![0.0; b * TIME_FEATURES * t_in];
        let mut targets = vec![0.0; b * h * n_t];
        let mut mask = vec![false; b * h * n_t];
        let mut target_start = Vec::with_capacity(b);

        for (bi, &wi) in indices.iter().enumerate() {
            let s = *self.starts.get(wi).ok_or_else(|| {
                Error::invalid(format!("window {wi} out of range ({} windows)", self.len()))
            })?;
            for (ni, &st) in self.visible.iter().enumerate() {
                for p in 0..c {
                    let mut last = (0..t_in)
                        .find_map(|t| d.value(st, p, s + t))
                        .expect("usable window has a valid input per channel");
                    for t in 0..t_in {
                        if let Some(v) = d.value(st, p, s + t) {
                            last = v;
                        }
                        inputs[((bi * c + p) * t_in + t) * n_in + ni] = last.clamp(0.0, 1.0);
                    }
                }
            }
            for t in 0..t_in {
                for (k, &f) in d.time[s + t].iter().enumerate() {
                    time[(bi * TIME_FEATURES + k) * t_in + t] = f;
                }
            }
            let first = s + t_in;
            for hh in 0..h {
                for (j, &st) in targets_order.iter().enumerate() {
                    if let Some(v) = d.value(st, Pollutant::Pm25.index(), first + hh) {
                        let i = (bi * h + hh) * n_t + j;
                        targets[i] = v;
                        mask[i] = true;
                    }
                }
            }
            target_start.push(d.start + Duration::hours(first as i64));
        }

        Ok(WindowBatch {
            batch: b,
            t_in,
            horizon: h,
            n_inputs: n_in,
            n_targets: n_t,
            inputs,
            time_features: time,
            targets,
            target_mask: mask,
            station_coords: self.visible.iter().map(|&i| d.coords[i]).collect(),
            target_coords: targets_order.iter().map(|&i| d.coords[i]).collect(),
            station_ids: self.visible.iter().map(|&i| d.ids[i].clone()).collect(),
            target_ids: targets_order.iter().map(|&i| d.ids[i].clone()).collect(),
            target_start,
        })
    }

    /// Consecutive batches of at most `size` windows in index order.
    pub fn iter_batches(&self, size: usize) -> impl Iterator<Item = Result<WindowBatch>> + '_ {
        let size = size.max(1);
        let idx: Vec<usize> = (0..self.len()).collect();
        let chunks: Vec<Vec<usize>> = idx.chunks(size).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.batch(&c))
    }
}
