use chrono::{TimeZone, Utc};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{
    make_windows, NormalizationSpec, synth_dataset, Pollutant, StationMeta, StationSeries, SynthConfig,
    WindowBatch,
};
use crate::model::{AqNet, AqNetConfig};
use crate::nn::Tensor;
use crate::train::{TrainConfig, TrainData};
use crate::{Error, Result};

/// Returns the true targets.
struct Oracle;

impl Forecaster for Oracle {
    fn label(&self) -> String {
        "Oracle".into()
    }

    fn forecast(&self, batch: &WindowBatch) -> Result<Tensor<f64>> {
        let (b, h, n) = (batch.batch, batch.horizon, batch.n_inputs);
        let mut out = Vec::with_capacity(b * h * n);
        for bi in 0..b {
            for hh in 0..h {
                for ni in 0..n {
                    out.push(batch.target(bi, hh, ni));
                }
            }
        }
        Tensor::new(vec![b, h, n], out)
    }
}

fn synth(n: usize, hours: usize) -> Vec<StationSeries> {
    synth_dataset(&SynthConfig {
        n_stations: n,
        hours,
        seed: 9,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn short_data() -> TrainData {
    TrainData::prepare(&synth(5, 720), 24, 24, 6, 6).unwrap()
}

/// Two-pass reference: means first, then sums of squares.
fn two_pass(y: &[f64], p: &[f64]) -> (f64, f64, f64) {
    let n = y.len() as f64;
    let mae = y.iter().zip(p).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let mse = y.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    (mae, mse.sqrt(), 1.0 - mse / var)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

#[test]
fn metrics_agree_with_two_pass_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.random_range(2..300);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..300.0)).collect();
        let p: Vec<f64> = y.iter().map(|v| v + rng.random_range(-40.0..40.0)).collect();
        let r = metrics(&y, &p).unwrap();
        let (mae, rmse, r2) = two_pass(&y, &p);
        assert!(rel(r.mae, mae) < 1e-9 && rel(r.rmse, rmse) < 1e-9);
        assert!(rel(r.r2.unwrap(), r2) < 1e-9 || (r.r2.unwrap() - r2).abs() < 1e-12);
        assert!(r.rmse >= r.mae && r.r2.unwrap() <= 1.0);
    }
}

#[test]
fn hand_computed_example() {
    let r = metrics(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap();
    assert!((r.mae - 2.0 / 3.0).abs() < 1e-15);
    assert!((r.rmse - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(r.r2, Some(0.0));
}

#[test]
fn oracle_is_perfect_short_term() {
    let d = short_data();
    let reps = eval_short_term(&Oracle, &d.test, &d.norm).unwrap();
    let labels: Vec<&str> = reps.iter().map(|r| r.horizon.as_str()).collect();
    assert_eq!(labels, ["6h", "12h", "24h"]);
    for r in &reps {
        assert_eq!(r.r2, Some(1.0));
        assert_eq!((r.mae, r.rmse), (0.0, 0.0));
        assert_eq!(r.model, "Oracle");
    }
    assert_eq!(reps[1].n, 2 * reps[0].n);
}

#[test]
fn persistence_is_finite_and_imperfect() {
    let d = short_data();
    let reps = eval_short_term(&Persistence, &d.test, &d.norm).unwrap();
    let oracle = eval_short_term(&Oracle, &d.test, &d.norm).unwrap();
    for (p, o) in reps.iter().zip(&oracle) {
        assert!(p.mae.is_finite() && p.rmse.is_finite());
        assert!(p.r2.unwrap() < 1.0);
        assert!(p.rmse >= p.mae);
        // model-agnostic sampling
        assert_eq!((p.n, &p.horizon), (o.n, &o.horizon));
    }
}

fn constant_series(n: usize, hours: usize, value: f64) -> Vec<StationSeries> {
    let start = Utc.with_ymd_and_hms(2016, 3, 1, 0, 0, 0).unwrap();
    (0..n)
        .map(|i| {
            let meta = StationMeta::new(format!("c{i}"), 39.5 + 0.2 * i as f64, 116.0).unwrap();
            let mut s = StationSeries::empty(meta, start, hours);
            for t in 0..hours {
                for p in Pollutant::ALL {
                    // a gentle ramp keeps the normalization range non-degenerate
                    let v = if p == Pollutant::Pm25 { value } else { 1.0 + t as f64 };
                    s.set(p, t, Some(v));
                }
            }
            s
        })
        .collect()
}

#[test]
fn persistence_on_constant_series_is_exact() {
    let s = constant_series(3, 400, 42.0);
    let norm = NormalizationSpec {
        min: [0.0; 6],
        max: [500.0; 6],
    };
    let w = make_windows(&s, &norm, 24, 24, 5, &[]).unwrap();
    let traces = collect_traces(&Persistence, &w, &norm, 16).unwrap();
    let (y, p) = pool(&traces, 24);
    let r = error_metrics(&y, &p).unwrap();
    assert!(r.mae < 1e-12, "{r:?}");
}

#[test]
fn daily_means_match_hand_aggregation() {
    let mut t = Trace {
        truth: (0..48).map(|h| h as f64).collect(),
        pred: (0..48).map(|h| 2.0 * h as f64).collect(),
        valid: vec![true; 48],
    };
    t.valid[0] = false;
    t.valid[47] = false;
    let d = daily_means(&t);
    // day 1: hours 1..=23 -> mean 12; day 2: hours 24..=46 -> mean 35
    assert_eq!(d.truth, vec![12.0, 35.0]);
    assert_eq!(d.pred, vec![24.0, 70.0]);
    assert_eq!(d.valid, vec![true, true]);

    let c = Trace {
        truth: vec![7.5; 72],
        pred: vec![3.25; 72],
        valid: vec![true; 72],
    };
    let dc = daily_means(&c);
    assert_eq!((dc.truth, dc.pred), (vec![7.5; 3], vec![3.25; 3]));

    let none = Trace {
        truth: vec![1.0; 24],
        pred: vec![1.0; 24],
        valid: vec![false; 24],
    };
    assert_eq!(daily_means(&none).valid, vec![false]);
}

#[test]
fn long_term_protocol_aggregates_days() {
    let s = synth(4, 1440);
    let d = TrainData::prepare(&s, 336, 168, 24, 24).unwrap();
    let test = d.test.thin(12);
    let reps = eval_long_term(&Oracle, &test, &d.norm).unwrap();
    let labels: Vec<&str> = reps.iter().map(|r| r.horizon.as_str()).collect();
    assert_eq!(labels, ["2d", "4d", "7d"]);
    assert!(reps.iter().all(|r| r.mae == 0.0 && r.rmse == 0.0 && r.r2.is_none()));

    // equals metrics of hand-aggregated daily series
    let traces = collect_traces(&Persistence, &test, &d.norm, 8).unwrap();
    let reps = protocol_reports(Protocol::Long, &traces, "p").unwrap();
    let (mut y, mut p) = (Vec::new(), Vec::new());
    for t in &traces {
        for day in 0..4 {
            let hours: Vec<usize> = (day * 24..day * 24 + 24).filter(|&h| t.valid[h]).collect();
            if hours.is_empty() {
                continue;
            }
            let n = hours.len() as f64;
            y.push(hours.iter().map(|&h| t.truth[h]).sum::<f64>() / n);
            p.push(hours.iter().map(|&h| t.pred[h]).sum::<f64>() / n);
        }
    }
    let direct = error_metrics(&y, &p).unwrap();
    assert!(rel(reps[1].mae, direct.mae) < 1e-12 && rel(reps[1].rmse, direct.rmse) < 1e-12);
    assert_eq!(reps[1].n, direct.n);
}

#[test]
fn protocol_preconditions() {
    let d = short_data();
    assert!(eval_long_term(&Oracle, &d.test, &d.norm).unwrap_err().is_validation());
    let empty = d.test.restrict_targets(0..0);
    assert!(matches!(
        eval_short_term(&Oracle, &empty, &d.norm),
        Err(Error::InsufficientData(_))
    ));
}

/// Each station's PM2.5 is a sinusoid, so every future hour is an exact
/// linear function of the two most recent ones.
fn oscillators(n: usize, hours: usize) -> Vec<StationSeries> {
    let start = Utc.with_ymd_and_hms(2016, 1, 1, 0, 0, 0).unwrap();
    (0..n)
        .map(|i| {
            let meta = StationMeta::new(format!("o{i}"), 39.0 + 0.3 * i as f64, 116.5).unwrap();
            let mut s = StationSeries::empty(meta, start, hours);
            let (amp, phase, omega) = (20.0 + 5.0 * i as f64, 0.7 * i as f64, 2.0 * std::f64::consts::PI / 17.0);
            for t in 0..hours {
                let v = 60.0 + amp * (omega * t as f64 + phase).sin();
                for p in Pollutant::ALL {
                    s.set(p, t, Some(v * (1.0 + p.index() as f64 * 0.1)));
                }
            }
            s
        })
        .collect()
}

#[test]
fn regression_recovers_linear_dynamics() {
    let s = oscillators(4, 720);
    let d = TrainData::prepare(&s, 24, 24, 1, 1).unwrap();
    let lr = LinearRegression::fit(&d.train).unwrap();
    assert!(lr.condition_number.is_finite() && lr.condition_number >= 1.0);
    let reps = eval_short_term(&lr, &d.test, &d.norm).unwrap();
    for r in reps {
        assert!(r.r2.unwrap() > 0.99, "{r:?}");
    }
}

#[test]
fn baselines_share_the_report_schema() {
    let d = short_data();
    let mut mc = AqNetConfig::new(24, 24);
    mc.hidden_dim = 4;
    mc.n_heads = 1;
    mc.k_neighbors = 1;
    let settings = BaselineSettings {
        regression_stride: 2,
        lstm_model: mc,
        lstm_train: TrainConfig {
            max_iterations: 3,
            checkpoint_every: 3,
            batch_size: 2,
            eval_stride: 6,
            train_stride: 6,
            ..TrainConfig::default()
        },
    };
    let mut shapes = Vec::new();
    for kind in BaselineKind::ALL {
        let r = run_baseline(kind, &d, Protocol::Short, &settings).unwrap();
        assert_eq!(r.condition_number.is_some(), kind == BaselineKind::LinearRegression);
        shapes.push(r.reports.iter().map(|x| (x.horizon.clone(), x.n)).collect::<Vec<_>>());
        assert_eq!(kind.to_string().parse::<BaselineKind>().unwrap(), kind);
    }
    assert!(shapes.windows(2).all(|w| w[0] == w[1]));
}

fn small_model(n_heads: usize, k: usize) -> AqNet<f64> {
    let mut c = AqNetConfig::new(24, 24);
    c.hidden_dim = 8;
    c.n_heads = n_heads;
    c.k_neighbors = k;
    AqNet::init(c, 4).unwrap()
}

#[test]
fn single_visible_station_copies_under_k1() {
    let d = short_data();
    let ids: Vec<String> = d.test.station_ids().to_vec();
    let model = small_model(2, 1);
    let hidden: Vec<String> = ids[1..].to_vec();
    let he = hidden_station_errors(&model, &d.test, &d.norm, &hidden).unwrap();
    assert_eq!(he.stations.len(), hidden.len());
    assert_eq!(he.skipped, 0);

    // oracle: the visible station's own forecast, scored against each
    // hidden station's truth
    let w = d.test.with_hidden(&hidden).unwrap();
    let mut per = vec![(Vec::new(), Vec::new()); hidden.len()];
    for batch in w.iter_batches(32) {
        let batch = batch.unwrap();
        let vis = model.predict_visible(&batch).unwrap();
        for bi in 0..batch.batch {
            for hh in 0..batch.horizon {
                let copy = vis.data()[bi * batch.horizon + hh];
                for j in 0..hidden.len() {
                    if batch.target_valid(bi, hh, 1 + j) {
                        per[j].0.push(d.norm.invert(Pollutant::Pm25, batch.target(bi, hh, 1 + j)));
                        per[j].1.push(d.norm.invert(Pollutant::Pm25, copy));
                    }
                }
            }
        }
    }
    for (e, (y, p)) in he.stations.iter().zip(&per) {
        let r = error_metrics(y, p).unwrap();
        assert!(rel(e.rmse, r.rmse) < 1e-9 && rel(e.mae, r.mae) < 1e-9, "{e:?} vs {r:?}");
    }
}

#[test]
fn colocated_hidden_station_is_among_the_best() {
    let mut coords: Vec<[f64; 2]> = vec![
        [39.2, 115.8],
        [39.9, 116.4],
        [40.6, 117.6],
        [39.4, 117.5],
        [40.7, 115.9],
        [40.0, 116.9],
    ];
    // station 6 sits next to station 1
    coords.push([39.9001, 116.4001]);
    let s = crate::data::synth_dataset_at(
        &SynthConfig {
            n_stations: coords.len(),
            hours: 720,
            seed: 4,
            ..SynthConfig::default()
        },
        &coords,
    )
    .unwrap();
    let d = TrainData::prepare(&s, 24, 24, 2, 6).unwrap();
    let mut mc = AqNetConfig::new(24, 24);
    mc.hidden_dim = 8;
    mc.n_heads = 2;
    mc.k_neighbors = 3;
    let tc = TrainConfig {
        batch_size: 4,
        max_iterations: 400,
        checkpoint_every: 400,
        lr: 3e-3,
        hidden_fraction: 0.2,
        ..TrainConfig::default()
    };
    let model = crate::train::train(&mc, &tc, &d, None).unwrap().last.model;
    let hidden: Vec<String> = [0, 4, 6].iter().map(|&i| s[i].id().to_string()).collect();
    let he = hidden_station_errors(&model, &d.test, &d.norm, &hidden).unwrap();
    let best = he.stations.iter().min_by(|a, b| a.rmse.total_cmp(&b.rmse)).unwrap();
    assert_eq!(best.station_id, s[6].id());
    assert!(he.hidden.is_some() && he.visible.is_some());

    let mut buf = Vec::new();
    write_station_errors(&he.stations, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next(), Some("station_id,lat,lon,mae,rmse"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn no_hidden_stations_no_rows() {
    let d = short_data();
    let he = hidden_station_errors(&small_model(2, 2), &d.test, &d.norm, &[]).unwrap();
    assert!(he.stations.is_empty() && he.skipped == 0);
}

#[test]
fn attention_report_rows_are_stochastic() {
    let d = short_data();
    let model = small_model(2, 2);
    let r = attention_report(&model, &d.test.thin(10), 0).unwrap();
    assert_eq!((r.mean.len(), r.t, r.coords.len(), r.clusters.len()), (2, 24, 2, 2));
    for m in &r.mean {
        for q in 0..24 {
            let s: f64 = m[q * 24..(q + 1) * 24].iter().sum();
            assert!((s - 1.0).abs() < 1e-4);
        }
    }
    assert!(r.samples > 0);
    let mut maps = Vec::new();
    r.write_maps_csv(&mut maps).unwrap();
    assert_eq!(String::from_utf8(maps).unwrap().lines().count(), 1 + 2 * 24 * 24);
}

#[test]
fn tied_heads_have_no_spread() {
    let d = short_data();
    let mut model = small_model(2, 2);
    // give head 1 the query/key/value columns of head 0
    let mha = model.mha.as_mut().unwrap();
    let dm = mha.d_model;
    let dk = dm / 2;
    for w in [&mut mha.w_q, &mut mha.w_k, &mut mha.w_v] {
        let data = w.data_mut();
        for row in 0..dm {
            for c in 0..dk {
                data[row * dm + dk + c] = data[row * dm + c];
            }
        }
    }
    let r = attention_report(&model, &d.test.thin(10), 0).unwrap();
    assert!(r.coords.iter().all(|c| c[0].abs() < 1e-9 && c[1].abs() < 1e-9), "{:?}", r.coords);
    assert_eq!(r.clusters, vec![0, 0]);
}

#[test]
fn attention_needs_two_heads_and_attention() {
    let d = short_data();
    assert!(attention_report(&small_model(1, 2), &d.test.thin(10), 0).is_err());
    let mut c = small_model(2, 2).config;
    c.use_attention = false;
    let m = AqNet::<f64>::init(c, 0).unwrap();
    assert!(attention_report(&m, &d.test.thin(10), 0).is_err());
}

#[test]
fn protocol_parsing() {
    assert_eq!("short".parse::<Protocol>().unwrap(), Protocol::Short);
    assert_eq!("long".parse::<Protocol>().unwrap(), Protocol::Long);
    assert!("weekly".parse::<Protocol>().is_err());
    assert_eq!(Protocol::Long.to_string(), "long");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn reports_obey_jensen(v in proptest::collection::vec((0.0f64..500.0, 0.0f64..500.0), 3..80)) {
        let (y, p): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        if let Ok(r) = metrics(&y, &p) {
            prop_assert!(r.rmse + 1e-12 >= r.mae);
            prop_assert!(r.r2.unwrap() <= 1.0);
        }
    }
}
