//! Subcommands of the `aqnet` binary, callable as plain functions.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use aqnet::checkpoint::Checkpoint;
use aqnet::data::{filter_complete, load_stations, synth_dataset, write_stations, Pollutant, StationSeries, SynthConfig};
use aqnet::eval::{
    attention_report, eval_protocol, format_table, hidden_station_errors, run_baseline, write_reports_csv,
    write_station_errors, BaselineKind, BaselineSettings, MetricReport, Protocol,
};
use aqnet::model::{reanalyze_grid, write_station_predictions, AqNetConfig, BoundingBox, StationPrediction};
use aqnet::train::{evaluation_hidden, resume, train, TrainConfig, TrainData};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub mod manifest;

pub use manifest::RunManifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, configuration or input data. Nothing was written.
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<aqnet::Error> for CliError {
    fn from(e: aqnet::Error) -> Self {
        if e.is_validation() || matches!(e, aqnet::Error::Checkpoint(_)) {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "aqnet", version, about = "PM2.5 reanalysis with an LSTM-attention encoder and kNN interpolation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic station dataset.
    Synth(SynthArgs),
    /// Train a model, or continue from a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint under the short- or long-term protocol.
    Eval(EvalArgs),
    /// Interpolate a window's predictions onto a lat/lon grid.
    Reanalyze(ReanalyzeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue this checkpoint's run instead of starting fresh.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "short")]
    pub protocol: Protocol,
    /// Also fit and score linear regression, a plain LSTM and persistence.
    #[arg(long)]
    pub baselines: bool,
    /// Training configuration for the fitted baselines; defaults to the one
    /// stored in the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for the hidden-station draw.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ReanalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `lat0,lon0,lat1,lon1`
    #[arg(long)]
    pub bbox: BoundingBox,
    /// Grid spacing in degrees.
    #[arg(long)]
    pub resolution: f64,
    #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
    pub k: Vec<usize>,
    /// First target hour of the window to map (RFC 3339); defaults to the
    /// latest complete window.
    #[arg(long)]
    pub at: Option<String>,
    /// Stations with a smaller share of fully observed hours are dropped.
    #[arg(long, default_value_t = 0.6)]
    pub min_valid_fraction: f64,
    /// Accepted for interface symmetry; reanalysis is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Data-loading options shared by training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Stations with a smaller share of fully observed hours are dropped.
    pub min_valid_fraction: f64,
}

/// Contents of a training configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: AqNetConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        let f = self.data.min_valid_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(invalid(format!("data.min_valid_fraction must lie in (0, 1], got {f}")));
        }
        Ok(())
    }
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<(T, String)> {
    let text = fs::read_to_string(path)
        .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
    let cfg = toml::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))?;
    Ok((cfg, sha256_hex(text.as_bytes())))
}

pub fn load_run_config(path: &Path) -> CliResult<(RunConfig, String)> {
    let (cfg, hash): (RunConfig, String) = read_config(path)?;
    cfg.validate()?;
    Ok((cfg, hash))
}

pub fn load_synth_config(path: &Path) -> CliResult<(SynthConfig, String)> {
    let (cfg, hash): (SynthConfig, String) = read_config(path)?;
    cfg.validate()?;
    Ok((cfg, hash))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Refuses output paths that exist as files; creates the directory.
fn check_out_dir(out: &Path) -> CliResult<()> {
    if out.exists() && !out.is_dir() {
        return Err(invalid(format!("{} exists and is not a directory", out.display())));
    }
    Ok(())
}

fn create_out_dir(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<String> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(path.display().to_string())
}

fn load_data(path: &Path, min_valid_fraction: f64) -> CliResult<Vec<StationSeries>> {
    if !path.exists() {
        return Err(invalid(format!("data path {} does not exist", path.display())));
    }
    let all = load_stations(path)?;
    Ok(filter_complete(&all, min_valid_fraction)?)
}

pub const STATIONS_FILE: &str = "stations.csv";

pub fn cmd_synth(args: &SynthArgs) -> CliResult<RunManifest> {
    let started = Instant::now();
    let (mut cfg, hash) = load_synth_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    check_out_dir(&args.out)?;
    let series = synth_dataset(&cfg)?;
    let mut bytes = Vec::new();
    write_stations(&series, &mut bytes)?;

    create_out_dir(&args.out)?;
    let csv = write_file(&args.out.join(STATIONS_FILE), &bytes)?;
    let m = RunManifest::new("synth", hash, Some(cfg.seed))
        .inputs([args.config.display().to_string()])
        .outputs([csv])
        .finish(started);
    m.write(&args.out)?;
    Ok(m)
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<RunManifest> {
    let started = Instant::now();
    let (mut cfg, hash) = load_run_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    check_out_dir(&args.out)?;
    let previous = args.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(p) = &previous {
        if p.model.config != cfg.model {
            return Err(invalid("checkpoint model configuration differs from [model]"));
        }
    }
    let series = load_data(&args.data, cfg.data.min_valid_fraction)?;
    let (t_in, h) = (cfg.model.t_in, cfg.model.horizon);
    let (ts, es) = (cfg.train.train_stride, cfg.train.eval_stride);
    let data = match &previous {
        Some(p) => TrainData::with_normalization(&series, p.norm.clone(), t_in, h, ts, es)?,
        None => TrainData::prepare(&series, t_in, h, ts, es)?,
    };
    if data.val.is_empty() {
        return Err(invalid("validation split has no complete window"));
    }

    create_out_dir(&args.out)?;
    if previous.is_none() {
        // a fresh run starts a fresh log
        let _ = fs::remove_file(args.out.join("train_log.csv"));
    }
    let outcome = match previous {
        Some(p) => resume(p, &cfg.train, &data, Some(&args.out))?,
        None => train(&cfg.model, &cfg.train, &data, Some(&args.out))?,
    };
    let cfg_copy = write_file(&args.out.join("config.toml"), &fs::read(&args.config)?)?;
    let mut outputs = vec![cfg_copy];
    for f in ["last.ckpt", "best.ckpt", "train_log.csv"] {
        let p = args.out.join(f);
        if p.exists() {
            outputs.push(p.display().to_string());
        }
    }
    let mut inputs = vec![args.config.display().to_string(), args.data.display().to_string()];
    if let Some(c) = &args.checkpoint {
        inputs.push(c.display().to_string());
    }
    let last = outcome.log.records.last();
    let m = RunManifest::new("train", hash, Some(cfg.train.seed))
        .inputs(inputs)
        .outputs(outputs)
        .note("iterations", outcome.last.progress.iteration.to_string())
        .note("checkpoint_id", outcome.last.id()?)
        .note("final_val_rmse", last.map_or(String::new(), |r| r.val_rmse.to_string()))
        .finish(started);
    m.write(&args.out)?;
    Ok(m)
}

/// Everything `cmd_eval` computes.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub reports: Vec<MetricReport>,
    pub table: String,
    pub manifest: RunManifest,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalOutcome> {
    let started = Instant::now();
    check_out_dir(&args.out)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (run_cfg, hash) = match &args.config {
        Some(p) => {
            let (c, h) = load_run_config(p)?;
            (Some(c), h)
        }
        None => (None, String::new()),
    };
    let train_cfg = match (&run_cfg, &ckpt.train_config) {
        (Some(c), _) => c.train.clone(),
        (None, Some(t)) => t.clone(),
        (None, None) if args.baselines => {
            return Err(invalid("--baselines needs --config: the checkpoint stores no training settings"))
        }
        (None, None) => TrainConfig::default(),
    };
    // without a config file, hash the effective settings instead
    let hash = if hash.is_empty() {
        let json = serde_json::to_string(&(&train_cfg, args.protocol.to_string(), args.baselines))
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        sha256_hex(json.as_bytes())
    } else {
        hash
    };
    let mc = &ckpt.model.config;
    let p = args.protocol;
    if mc.t_in != p.t_in() || mc.horizon < p.horizon() {
        return Err(invalid(format!(
            "{p} protocol needs t_in={} and horizon>={}, checkpoint has t_in={} horizon={}",
            p.t_in(),
            p.horizon(),
            mc.t_in,
            mc.horizon
        )));
    }
    let min_valid = run_cfg.as_ref().map_or(0.6, |c| c.data.min_valid_fraction);
    let series = load_data(&args.data, min_valid)?;
    let data = TrainData::with_normalization(
        &series,
        ckpt.norm.clone(),
        mc.t_in,
        mc.horizon,
        train_cfg.train_stride,
        train_cfg.eval_stride,
    )?;
    if data.test.is_empty() {
        return Err(invalid("test split holds no complete window for this protocol"));
    }

    let mut reports = eval_protocol(p, &ckpt.model, &data.test, &data.norm)?;
    let mut notes = Vec::new();
    if args.baselines {
        let settings = BaselineSettings {
            regression_stride: train_cfg.train_stride,
            lstm_model: mc.clone(),
            lstm_train: train_cfg.clone(),
        };
        for kind in BaselineKind::ALL {
            let r = run_baseline(kind, &data, p, &settings)?;
            if let Some(c) = r.condition_number {
                notes.push(("lr_condition_number".to_string(), format!("{c:e}")));
            }
            reports.extend(r.reports);
        }
    }
    let table = format_table(p, &reports);

    let seed = args.seed.unwrap_or(train_cfg.seed);
    let hidden = evaluation_hidden(data.test.station_ids(), train_cfg.hidden_fraction, seed);
    let hidden_errors = if hidden.len() < data.test.n_stations() && !hidden.is_empty() {
        Some(hidden_station_errors(&ckpt.model, &data.test, &data.norm, &hidden)?)
    } else {
        None
    };
    let attention = (mc.use_attention && mc.n_heads >= 2 && mc.t_in >= 3)
        .then(|| attention_report(&ckpt.model, &data.test, seed))
        .transpose()?;

    create_out_dir(&args.out)?;
    let mut outputs = Vec::new();
    let mut csv = Vec::new();
    write_reports_csv(&reports, &mut csv)?;
    outputs.push(write_file(&args.out.join(format!("report_{p}.csv")), &csv)?);
    outputs.push(write_file(&args.out.join(format!("report_{p}.txt")), table.as_bytes())?);
    if let Some(he) = &hidden_errors {
        let mut buf = Vec::new();
        write_station_errors(&he.stations, &mut buf)?;
        outputs.push(write_file(&args.out.join("hidden_station_errors.csv"), &buf)?);
        if let (Some(h), Some(v)) = (&he.hidden, &he.visible) {
            notes.push(("hidden_rmse".into(), h.rmse.to_string()));
            notes.push(("visible_rmse".into(), v.rmse.to_string()));
        }
    }
    if let Some(a) = &attention {
        let mut maps = Vec::new();
        a.write_maps_csv(&mut maps)?;
        outputs.push(write_file(&args.out.join("attention_maps.csv"), &maps)?);
        let mut heads = Vec::new();
        a.write_heads_csv(&mut heads)?;
        outputs.push(write_file(&args.out.join("attention_heads.csv"), &heads)?);
    }
    let mut inputs = vec![args.checkpoint.display().to_string(), args.data.display().to_string()];
    if let Some(c) = &args.config {
        inputs.push(c.display().to_string());
    }
    let mut m = RunManifest::new("eval", hash, Some(seed))
        .inputs(inputs)
        .outputs(outputs)
        .note("protocol", p.to_string())
        .note("checkpoint_id", ckpt.id()?);
    for (k, v) in notes {
        m = m.note(&k, v);
    }
    let m = m.finish(started);
    m.write(&args.out)?;
    Ok(EvalOutcome {
        reports,
        table,
        manifest: m,
    })
}

pub fn cmd_reanalyze(args: &ReanalyzeArgs) -> CliResult<RunManifest> {
    let started = Instant::now();
    check_out_dir(&args.out)?;
    args.bbox.validate()?;
    if !(args.resolution.is_finite() && args.resolution > 0.0) {
        return Err(invalid("--resolution must be a positive number of degrees"));
    }
    if args.k.is_empty() || args.k.contains(&0) {
        return Err(invalid("--k needs one or more positive neighbor counts"));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let series = load_data(&args.data, args.min_valid_fraction)?;
    let mc = &ckpt.model.config;
    let windows = aqnet::data::make_windows(&series, &ckpt.norm, mc.t_in, mc.horizon, 1, &[])?;
    if windows.is_empty() {
        return Err(invalid("data holds no complete window for this model"));
    }
    let index = match &args.at {
        None => windows.len() - 1,
        Some(at) => {
            let ts = chrono::DateTime::parse_from_rfc3339(at)
                .map_err(|e| invalid(format!("--at {at:?}: {e}")))?
                .with_timezone(&chrono::Utc);
            (0..windows.len())
                .find(|&i| windows.target_start(i) == ts)
                .ok_or_else(|| invalid(format!("no complete window has its first target hour at {at}")))?
        }
    };
    if let Some(&k) = args.k.iter().find(|&&k| k > windows.n_visible()) {
        return Err(invalid(format!("k={k} exceeds the {} stations", windows.n_visible())));
    }
    let batch = windows.batch(&[index])?;
    let id = ckpt.id()?;
    let mut grids = Vec::new();
    for &k in &args.k {
        grids.push(reanalyze_grid(&ckpt.model, &ckpt.norm, &batch, args.bbox, args.resolution, k, &id)?);
    }
    let pred = ckpt.model.predict_visible(&batch)?;
    let (h, n) = (batch.horizon, batch.n_inputs);
    let mut rows = Vec::with_capacity(h * n);
    for ni in 0..n {
        for hh in 0..h {
            rows.push(StationPrediction {
                station_id: batch.station_ids[ni].clone(),
                timestamp: batch.target_start[0] + chrono::Duration::hours(hh as i64),
                pm25_pred: ckpt.norm.invert(Pollutant::Pm25, pred.data()[hh * n + ni]),
                pm25_obs: batch
                    .target_valid(0, hh, ni)
                    .then(|| ckpt.norm.invert(Pollutant::Pm25, batch.target(0, hh, ni))),
            });
        }
    }

    create_out_dir(&args.out)?;
    let mut outputs = Vec::new();
    // one colour scale across k so the rasters compare directly
    let lo = grids.iter().flat_map(|g| g.values.iter().copied()).fold(f64::INFINITY, f64::min);
    let hi = grids.iter().flat_map(|g| g.values.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
    for g in &grids {
        let stem = format!("grid_k{}", g.k);
        let mut csv = Vec::new();
        g.write_csv(&mut csv)?;
        outputs.push(write_file(&args.out.join(format!("{stem}.csv")), &csv)?);
        let mut txt = Vec::new();
        g.write_text(&mut txt)?;
        outputs.push(write_file(&args.out.join(format!("{stem}.grid")), &txt)?);
        let mut ppm = Vec::new();
        g.write_ppm(&mut ppm, 8, Some((lo, hi)))?;
        outputs.push(write_file(&args.out.join(format!("{stem}.ppm")), &ppm)?);
    }
    let mut sp = Vec::new();
    write_station_predictions(&rows, &mut sp)?;
    outputs.push(write_file(&args.out.join("station_predictions.csv"), &sp)?);

    let hash = sha256_hex(format!("{:?}|{:?}|{}|{:?}|{:?}", args.bbox, args.k, args.resolution, args.at, id).as_bytes());
    let m = RunManifest::new("reanalyze", hash, args.seed)
        .inputs([args.checkpoint.display().to_string(), args.data.display().to_string()])
        .outputs(outputs)
        .note("window_start", batch.target_start[0].to_rfc3339())
        .note("clamped_nodes", grids.iter().map(|g| g.clamped).sum::<usize>().to_string())
        .finish(started);
    m.write(&args.out)?;
    Ok(m)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| ()),
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Eval(a) => cmd_eval(a).map(|o| print!("{}", o.table)),
        Command::Reanalyze(a) => cmd_reanalyze(a).map(|_| ()),
    }
}
