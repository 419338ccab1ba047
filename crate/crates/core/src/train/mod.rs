//! End-to-end training with per-epoch hidden-station resampling,
//! checkpointing and exact resume.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainProgress};
use crate::data::{chronological_split, fit_normalization, make_windows, NormalizationSpec, SplitRanges, StationSeries, Windows};
use crate::eval::{evaluate_pooled, MetricReport};
use crate::model::{AqNet, AqNetConfig};
use crate::nn::{AdamW, AdamWConfig, Graph};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_iterations: u64,
    pub seed: u64,
    /// Fraction of stations withheld from the inputs each epoch.
    pub hidden_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Validation, logging and checkpoint interval in iterations.
    pub checkpoint_every: u64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    /// Hours between consecutive training windows.
    pub train_stride: usize,
    /// Hours between consecutive validation windows.
    pub eval_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            max_iterations: 1000,
            seed: 0,
            hidden_fraction: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 100,
            grad_clip: 5.0,
            train_stride: 1,
            eval_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.hidden_fraction) {
            return Err(Error::invalid("hidden_fraction must lie in [0, 1)"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid("lr must be finite and >= 0"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be finite and >= 0"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::invalid("eps and grad_clip must be positive"));
        }
        if self.checkpoint_every == 0 || self.train_stride == 0 || self.eval_stride == 0 {
            return Err(Error::invalid(
                "checkpoint_every, train_stride and eval_stride must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Everything except the run length and logging interval must agree for
    /// a run to be continued.
    fn resumable_from(&self, old: &TrainConfig) -> Result<()> {
        let mut a = self.clone();
        a.max_iterations = old.max_iterations;
        a.checkpoint_every = old.checkpoint_every;
        if &a != old {
            return Err(Error::invalid(format!(
                "training configuration differs from the checkpoint's: {old:?}"
            )));
        }
        Ok(())
    }
}

/// Normalized windows for the chronological train/validation/test split.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub norm: NormalizationSpec,
    pub split: SplitRanges,
    pub train: Windows,
    pub val: Windows,
    pub test: Windows,
}

impl TrainData {
    /// Normalization is fit on the training span only.
    pub fn prepare(
        series: &[StationSeries],
        t_in: usize,
        horizon: usize,
        train_stride: usize,
        eval_stride: usize,
    ) -> Result<Self> {
        let hours = series
            .first()
            .map(StationSeries::hours)
            .ok_or_else(|| Error::invalid("no stations"))?;
        let split = chronological_split(hours)?;
        let train_part: Vec<StationSeries> =
            series.iter().map(|s| s.slice(split.train.clone())).collect();
        let norm = fit_normalization(&train_part)?;
        Self::with_normalization(series, norm, t_in, horizon, train_stride, eval_stride)
    }

    /// Same as [`TrainData::prepare`] with a fixed normalization, e.g. one
    /// restored from a checkpoint.
    pub fn with_normalization(
        series: &[StationSeries],
        norm: NormalizationSpec,
        t_in: usize,
        horizon: usize,
        train_stride: usize,
        eval_stride: usize,
    ) -> Result<Self> {
        let hours = series
            .first()
            .map(StationSeries::hours)
            .ok_or_else(|| Error::invalid("no stations"))?;
        let split = chronological_split(hours)?;
        let all = make_windows(series, &norm, t_in, horizon, 1, &[])?;
        let train = all.restrict_targets(split.train.clone()).thin(train_stride);
        let val = all.restrict_targets(split.val.clone()).thin(eval_stride);
        let test = all.restrict_targets(split.test.clone());
        Ok(Self {
            norm,
            split,
            train,
            val,
            test,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: u64,
    /// Mean training loss since the previous record.
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_r2: f64,
    /// Seconds since the start of this process's run. Not reproducible, so
    /// excluded from [`TrainLog::same_trajectory`].
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "iteration,train_loss,val_mae,val_rmse,val_r2,wall_time";

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{:.3}",
                r.iteration, r.train_loss, r.val_mae, r.val_rmse, r.val_r2, r.wall_time
            )?;
        }
        Ok(())
    }

    pub fn read_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return Err(Error::invalid("train log: unexpected header"));
        }
        let mut records = Vec::new();
        for (i, l) in lines.enumerate() {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::invalid(format!("train log line {}: malformed", i + 2));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            records.push(TrainRecord {
                iteration: f[0].parse().map_err(|_| bad())?,
                train_loss: num(f[1])?,
                val_mae: num(f[2])?,
                val_rmse: num(f[3])?,
                val_r2: num(f[4])?,
                wall_time: num(f[5])?,
            });
        }
        Ok(Self { records })
    }

    /// Equal in everything but wall time.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.iteration == b.iteration
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.val_mae.to_bits() == b.val_mae.to_bits()
                    && a.val_rmse.to_bits() == b.val_rmse.to_bits()
                    && a.val_r2.to_bits() == b.val_r2.to_bits()
            })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Lowest validation RMSE seen in this run, if any record was made.
    pub best: Option<Checkpoint>,
    pub log: TrainLog,
}

/// Window order and hidden stations for one epoch, derived from the seed
/// and epoch alone so that a resumed run replays the same schedule.
pub struct EpochPlan {
    pub order: Vec<usize>,
    pub hidden: Vec<String>,
}

pub fn epoch_plan(seed: u64, epoch: u64, n_windows: usize, stations: &[String], hidden_fraction: f64) -> EpochPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch + 1);
    let mut order: Vec<usize> = (0..n_windows).collect();
    order.shuffle(&mut rng);
    let n_hidden = hidden_count(stations.len(), hidden_fraction);
    let mut hidden: Vec<String> = sample(&mut rng, stations.len(), n_hidden)
        .into_iter()
        .map(|i| stations[i].clone())
        .collect();
    hidden.sort();
    EpochPlan { order, hidden }
}

/// A fixed hidden set for evaluation, drawn from a stream no training
/// epoch uses.
pub fn evaluation_hidden(stations: &[String], fraction: f64, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let n = hidden_count(stations.len(), fraction);
    let mut hidden: Vec<String> = sample(&mut rng, stations.len(), n)
        .into_iter()
        .map(|i| stations[i].clone())
        .collect();
    hidden.sort();
    hidden
}

pub fn hidden_count(n_stations: usize, fraction: f64) -> usize {
    ((n_stations as f64 * fraction).round() as usize).min(n_stations.saturating_sub(1))
}

/// Trains from a fresh initialization seeded by `train_cfg.seed`. When
/// `out` is given, `last.ckpt`, `best.ckpt` and `train_log.csv` are written
/// there at every record.
pub fn train(
    model_cfg: &AqNetConfig,
    train_cfg: &TrainConfig,
    data: &TrainData,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    let model = AqNet::<f32>::init(model_cfg.clone(), train_cfg.seed)?;
    let ckpt = Checkpoint {
        model,
        norm: data.norm.clone(),
        optimizer: AdamW::new(train_cfg.optimizer()),
        progress: TrainProgress::default(),
        train_config: Some(train_cfg.clone()),
    };
    run(ckpt, train_cfg, data, out)
}

/// Continues a run from `ckpt` up to `train_cfg.max_iterations`.
pub fn resume(
    ckpt: Checkpoint,
    train_cfg: &TrainConfig,
    data: &TrainData,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    ckpt.model.validate()?;
    match &ckpt.train_config {
        Some(old) => train_cfg.resumable_from(old)?,
        None => return Err(Error::invalid("checkpoint carries no training configuration")),
    }
    if ckpt.norm != data.norm {
        return Err(Error::invalid("dataset normalization differs from the checkpoint's"));
    }
    if ckpt.optimizer.config != train_cfg.optimizer() {
        return Err(Error::invalid("optimizer settings differ from the checkpoint's"));
    }
    let mut ckpt = ckpt;
    ckpt.train_config = Some(train_cfg.clone());
    run(ckpt, train_cfg, data, out)
}

fn run(
    mut ckpt: Checkpoint,
    cfg: &TrainConfig,
    data: &TrainData,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let mc = &ckpt.model.config;
    if data.train.t_in() != mc.t_in || data.train.horizon() != mc.horizon {
        return Err(Error::invalid(format!(
            "windows have t_in={} horizon={}, model expects t_in={} horizon={}",
            data.train.t_in(),
            data.train.horizon(),
            mc.t_in,
            mc.horizon
        )));
    }
    if data.train.is_empty() {
        return Err(Error::InsufficientData("training split has no windows".into()));
    }
    if data.val.is_empty() {
        return Err(Error::InsufficientData("validation split has no windows".into()));
    }
    let stations = data.train.station_ids().to_vec();
    let n_visible = stations.len() - hidden_count(stations.len(), cfg.hidden_fraction);
    if cfg.hidden_fraction > 0.0 && n_visible < mc.k_neighbors {
        return Err(Error::invalid(format!(
            "k_neighbors {} exceeds the {n_visible} stations left visible",
            mc.k_neighbors
        )));
    }

    let n_train = data.train.len();
    let bs = cfg.batch_size.min(n_train);
    let per_epoch = (n_train / bs) as u64;
    let start = Instant::now();
    let mut log = TrainLog::default();
    let mut best: Option<Checkpoint> = None;
    let mut plan: Option<(u64, EpochPlan, Windows)> = None;
    let mut best_rmse = ckpt.progress.best_val_rmse;

    while ckpt.progress.iteration < cfg.max_iterations {
        let it = ckpt.progress.iteration;
        let epoch = it / per_epoch;
        if plan.as_ref().is_none_or(|(e, _, _)| *e != epoch) {
            let p = epoch_plan(cfg.seed, epoch, n_train, &stations, cfg.hidden_fraction);
            let w = data.train.with_hidden(&p.hidden)?;
            plan = Some((epoch, p, w));
        }
        let (_, p, windows) = plan.as_ref().expect("plan set above");
        let pos = (it % per_epoch) as usize * bs;
        let batch = windows.batch(&p.order[pos..pos + bs])?;

        let mut g = Graph::<f32>::new();
        let loss = ckpt.model.loss(&mut g, &batch)?;
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss(it));
        }
        let mut grads = g.backward(loss)?;
        grads.clip_global_norm(cfg.grad_clip);
        ckpt.optimizer.step(&mut ckpt.model, &grads)?;

        ckpt.progress.iteration += 1;
        ckpt.progress.loss_sum += lv as f64;
        ckpt.progress.loss_count += 1;

        let done = ckpt.progress.iteration;
        if done % cfg.checkpoint_every == 0 || done == cfg.max_iterations {
            let val = validate(&ckpt.model, data)?;
            let rec = TrainRecord {
                iteration: done,
                train_loss: ckpt.progress.loss_sum / ckpt.progress.loss_count as f64,
                val_mae: val.mae,
                val_rmse: val.rmse,
                val_r2: val.r2.unwrap_or(f64::NAN),
                wall_time: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "iter {done}: loss {:.5} val rmse {:.3} r2 {:.4}",
                rec.train_loss,
                rec.val_rmse,
                rec.val_r2
            );
            ckpt.progress.loss_sum = 0.0;
            ckpt.progress.loss_count = 0;
            let improved = best_rmse.is_none_or(|b| val.rmse < b);
            if improved {
                best_rmse = Some(val.rmse);
                ckpt.progress.best_val_rmse = Some(val.rmse);
                ckpt.progress.best_iteration = Some(done);
            }
            log.records.push(rec);
            if improved {
                best = Some(ckpt.clone());
            }
            if let Some(dir) = out {
                ckpt.save(&dir.join("last.ckpt"))?;
                if improved {
                    ckpt.save(&dir.join("best.ckpt"))?;
                }
                append_log(&dir.join("train_log.csv"), log.records.last().expect("pushed"))?;
            }
        }
    }
    Ok(TrainOutcome {
        last: ckpt,
        best,
        log,
    })
}

fn append_log(path: &Path, rec: &TrainRecord) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut one = Vec::new();
    TrainLog {
        records: vec![rec.clone()],
    }
    .write_csv(&mut one)?;
    let text = String::from_utf8(one).expect("ascii");
    if fresh {
        f.write_all(text.as_bytes())?;
    } else {
        f.write_all(text.split_once('\n').expect("header line").1.as_bytes())?;
    }
    Ok(())
}

/// Validation metrics in µg/m³, pooled over every horizon step and
/// station.
pub fn validate(model: &AqNet<f32>, data: &TrainData) -> Result<MetricReport> {
    evaluate_pooled(model, &data.val, &data.norm, 64)
}

#[cfg(test)]
mod tests;
