use super::*;
use crate::data::{synth_dataset, SynthConfig};
use crate::model::KnnWeightMode;
use crate::nn::NamedParams;

fn series(n: usize) -> Vec<StationSeries> {
    synth_dataset(&SynthConfig {
        n_stations: n,
        hours: 720,
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn model_cfg() -> AqNetConfig {
    let mut c = AqNetConfig::new(8, 4);
    c.hidden_dim = 8;
    c.n_heads = 2;
    c.k_neighbors = 3;
    c
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        max_iterations: 20,
        seed: 5,
        checkpoint_every: 10,
        train_stride: 12,
        eval_stride: 24,
        ..TrainConfig::default()
    }
}

fn data(n: usize) -> TrainData {
    let c = train_cfg();
    TrainData::prepare(&series(n), 8, 4, c.train_stride, c.eval_stride).unwrap()
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let mut d = data(6);
    d.train = d.train.thin(10_000);
    assert_eq!(d.train.len(), 1);
    let tc = TrainConfig {
        lr: 0.0,
        weight_decay: 0.0,
        batch_size: 1,
        hidden_fraction: 0.0,
        checkpoint_every: 1,
        max_iterations: 5,
        ..train_cfg()
    };
    let out = train(&model_cfg(), &tc, &d, None).unwrap();
    let init = AqNet::<f32>::init(model_cfg(), tc.seed).unwrap();
    assert_eq!(out.last.model, init);
    let losses: Vec<f64> = out.log.records.iter().map(|r| r.train_loss).collect();
    assert_eq!(losses.len(), 5);
    assert!(losses.iter().all(|&l| l == losses[0]), "{losses:?}");
}

#[test]
fn overfits_one_batch() {
    let mut d = data(4);
    d.train = d.train.thin(10_000);
    let tc = TrainConfig {
        lr: 3e-3,
        weight_decay: 0.0,
        batch_size: 1,
        hidden_fraction: 0.0,
        max_iterations: 2000,
        checkpoint_every: 2000,
        ..train_cfg()
    };
    let out = train(&model_cfg(), &tc, &d, None).unwrap();
    let batch = d.train.batch(&[0]).unwrap();
    let mut g = Graph::<f32>::new();
    let l = out.last.model.loss(&mut g, &batch).unwrap();
    let mse = g.value(l).data()[0];
    assert!(mse < 1e-3, "final mse {mse}");
}

#[test]
fn same_seed_same_log() {
    let d = data(6);
    let a = train(&model_cfg(), &train_cfg(), &d, None).unwrap();
    let b = train(&model_cfg(), &train_cfg(), &d, None).unwrap();
    assert!(a.log.same_trajectory(&b.log));
    assert_eq!(a.last, b.last);
    let mut other = train_cfg();
    other.seed += 1;
    let c = train(&model_cfg(), &other, &d, None).unwrap();
    assert!(!a.log.same_trajectory(&c.log));
}

#[test]
fn split_run_equals_straight_run() {
    let d = data(6);
    let mut mc = model_cfg();
    mc.knn_weight_mode = KnnWeightMode::LearnedFeature;
    let full = train(&mc, &train_cfg(), &d, None).unwrap();
    let half_cfg = TrainConfig {
        max_iterations: 10,
        ..train_cfg()
    };
    let half = train(&mc, &half_cfg, &d, None).unwrap();
    let rest = resume(half.last.clone(), &train_cfg(), &d, None).unwrap();
    assert_eq!(rest.last, full.last);
    assert_eq!(
        rest.log.records.last().unwrap().train_loss,
        full.log.records.last().unwrap().train_loss
    );
    // nothing left to do
    let again = resume(rest.last.clone(), &train_cfg(), &d, None).unwrap();
    assert_eq!(again.last, rest.last);
    assert!(again.log.records.is_empty());
}

#[test]
fn resume_rejects_changed_hyperparameters() {
    let d = data(6);
    let out = train(&model_cfg(), &train_cfg(), &d, None).unwrap();
    let mut tc = train_cfg();
    tc.lr = 2e-3;
    tc.max_iterations = 40;
    assert!(resume(out.last.clone(), &tc, &d, None).unwrap_err().is_validation());
    let mut tc = train_cfg();
    tc.batch_size = 8;
    assert!(resume(out.last, &tc, &d, None).is_err());
}

#[test]
fn checkpoint_files_and_metrics_round_trip() {
    let d = data(6);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&model_cfg(), &train_cfg(), &d, Some(dir.path())).unwrap();
    let loaded = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!(loaded, out.last);
    assert_eq!(validate(&loaded.model, &d).unwrap(), validate(&out.last.model, &d).unwrap());
    let best = Checkpoint::load(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(Some(best), out.best);
    let text = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let log = TrainLog::read_csv(&text).unwrap();
    assert!(log.same_trajectory(&out.log));
    let its: Vec<u64> = log.records.iter().map(|r| r.iteration).collect();
    assert_eq!(its, vec![10, 20]);
}

#[test]
fn empty_validation_is_an_error() {
    let mut d = data(6);
    d.val = d.val.restrict_targets(0..0);
    assert!(matches!(
        train(&model_cfg(), &train_cfg(), &d, None),
        Err(Error::InsufficientData(_))
    ));
}

#[test]
fn divergence_reports_iteration() {
    let d = data(6);
    let tc = TrainConfig {
        lr: 1e30,
        ..train_cfg()
    };
    match train(&model_cfg(), &tc, &d, None) {
        Err(Error::NonFiniteLoss(it)) => assert!(it >= 1 && it < 20),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn k_larger_than_visible_set_is_rejected() {
    let d = data(4);
    let mut mc = model_cfg();
    mc.k_neighbors = 4;
    let tc = TrainConfig {
        hidden_fraction: 0.25,
        ..train_cfg()
    };
    assert!(train(&mc, &tc, &d, None).unwrap_err().is_validation());
}

#[test]
fn epoch_plan_is_a_pure_function() {
    let ids: Vec<String> = (0..20).map(|i| format!("S{i:03}")).collect();
    let a = epoch_plan(3, 7, 50, &ids, 0.1);
    let b = epoch_plan(3, 7, 50, &ids, 0.1);
    assert_eq!((a.order.clone(), a.hidden.clone()), (b.order, b.hidden));
    assert_eq!(a.hidden.len(), 2);
    let mut sorted = a.order.clone();
    sorted.sort();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    let c = epoch_plan(3, 8, 50, &ids, 0.1);
    assert_ne!(a.order, c.order);
    assert_eq!(hidden_count(20, 0.0), 0);
    assert_eq!(hidden_count(3, 0.9), 2);
}

#[test]
fn hidden_inputs_never_reach_hidden_outputs() {
    let s = series(6);
    let d = TrainData::prepare(&s, 8, 4, 12, 24).unwrap();
    let model = AqNet::<f32>::init(model_cfg(), 1).unwrap();
    let hidden = vec![s[2].id().to_string()];

    let mut zeroed = s.clone();
    for p in crate::data::Pollutant::ALL {
        for t in 0..zeroed[2].hours() {
            zeroed[2].set(p, t, Some(0.0));
        }
    }
    let dz = TrainData::with_normalization(&zeroed, d.norm.clone(), 8, 4, 12, 24).unwrap();
    let idx: Vec<usize> = (0..d.train.len().min(5)).collect();
    let a = model.predict(&d.train.with_hidden(&hidden).unwrap().batch(&idx).unwrap()).unwrap();
    let b = model.predict(&dz.train.with_hidden(&hidden).unwrap().batch(&idx).unwrap()).unwrap();
    assert_eq!(a.hidden, b.hidden);
    assert_eq!(a.visible, b.visible);
}

#[test]
fn loss_trends_down() {
    let s = synth_dataset(&SynthConfig {
        n_stations: 8,
        hours: 1440,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let d = TrainData::prepare(&s, 24, 6, 1, 24).unwrap();
    let mut mc = AqNetConfig::new(24, 6);
    mc.hidden_dim = 16;
    mc.n_heads = 2;
    mc.k_neighbors = 4;
    let tc = TrainConfig {
        batch_size: 8,
        max_iterations: 1000,
        checkpoint_every: 500,
        seed: 2,
        ..TrainConfig::default()
    };
    let out = train(&mc, &tc, &d, None).unwrap();
    let r = &out.log.records;
    assert!(r[1].train_loss < r[0].train_loss, "{r:?}");
}

#[test]
fn log_csv_round_trip() {
    let log = TrainLog {
        records: vec![
            TrainRecord {
                iteration: 10,
                train_loss: 0.1 + 0.2,
                val_mae: 3.25,
                val_rmse: 4.0,
                val_r2: 0.5,
                wall_time: 1.5,
            },
            TrainRecord {
                iteration: 20,
                train_loss: 1e-7,
                val_mae: 2.0,
                val_rmse: 2.5,
                val_r2: f64::NAN,
                wall_time: 3.0,
            },
        ],
    };
    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    let back = TrainLog::read_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
    assert_eq!(back.records[0], log.records[0]);
    assert!(back.records[1].val_r2.is_nan());
    assert!(TrainLog::read_csv("bad header\n").is_err());
}

#[test]
fn named_parameters_cover_learned_tau() {
    let mut mc = model_cfg();
    mc.knn_weight_mode = KnnWeightMode::LearnedFeature;
    let m = AqNet::<f32>::init(mc, 0).unwrap();
    assert!(m.named().iter().any(|(n, _)| *n == "knn.log_tau"));
}
