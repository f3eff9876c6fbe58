//! The two penalty experiments: weight Lipschitz constant vs generalization
//! gap over training (`fig1`), and gap as a function of the penalty factor
//! (`fig2`).

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{load_mnist_dir, synth_dataset, Dataset, Split, SynthSpec};
use super::train::{format_lambda, train_observed, EpochEvent, TrainConfig};
use crate::error::{Error, Result};
use crate::resnet::{Activation, PenaltyKind, ResNetModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::invalid(format!("unknown profile `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Mnist { dir: PathBuf },
    Synthetic(SynthSpec),
}

impl DataSource {
    /// The offline stand-in for MNIST used when no data directory is given.
    pub fn synthetic_default() -> Self {
        DataSource::Synthetic(SynthSpec::default())
    }

    /// Train and test splits with at most `train_size` / `test_size` samples.
    pub fn load(&self, train_size: usize, test_size: usize) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Mnist { dir } => {
                let (train, test) = load_mnist_dir(dir)?;
                Ok((train.take(train_size), test.take(test_size)))
            }
            DataSource::Synthetic(spec) => Ok((
                synth_dataset(spec, train_size, Split::Train)?,
                synth_dataset(spec, test_size, Split::Test)?,
            )),
        }
    }
}

/// Model and optimizer sizes shared by both experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentScale {
    pub d: usize,
    #[serde(rename = "L")]
    pub depth: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub bandwidth: f64,
    pub activation: Activation,
}

impl ExperimentScale {
    pub fn desk() -> Self {
        Self {
            d: 16,
            depth: 100,
            train_size: 10_000,
            test_size: 2_000,
            epochs: 10,
            batch_size: 128,
            learning_rate: 0.02,
            bandwidth: 0.1,
            activation: Activation::Relu,
        }
    }

    pub fn paper(epochs: usize) -> Self {
        Self {
            d: 30,
            depth: 1000,
            train_size: 60_000,
            test_size: 10_000,
            epochs,
            ..Self::desk()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("empty epoch range".into()));
        }
        if self.d == 0 || self.depth == 0 || self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config("d, L and dataset sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn model(&self, p: usize, q: usize, seed: u64) -> Result<ResNetModel> {
        ResNetModel::with_projections(p, self.d, q, self.depth, self.bandwidth, self.activation, seed)
    }

    pub fn train_config(&self, lambda: f64, kind: PenaltyKind, train_projections: bool, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lambda,
            penalty_kind: kind,
            train_projections,
            seed,
            ..TrainConfig::default()
        }
    }
}

/// Where experiment outputs go. Without a directory nothing is written.
#[derive(Debug, Clone, Default)]
pub struct OutputOptions {
    pub dir: Option<PathBuf>,
    pub checkpoints: bool,
}

/// Mixes an experiment seed with a job tag and index.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base ^ tag.rotate_left(32) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const INIT_TAG: u64 = 1;
const SHUFFLE_TAG: u64 = 2;

/// Sample Pearson correlation; `None` with fewer than two points or a
/// constant coordinate.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b) = (x[i] - mx, y[i] - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn csv_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
}

/// Append-only CSV flushed after every row; removed once the final table
/// has been written.
struct PartialCsv {
    path: PathBuf,
    writer: Mutex<csv::Writer<File>>,
}

impl PartialCsv {
    fn create(path: PathBuf) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(Self {
            writer: Mutex::new(csv::Writer::from_path(&path).map_err(|e| Error::invalid(format!("csv: {e}")))?),
            path,
        })
    }

    fn push<R: Serialize>(&self, row: &R) -> Result<()> {
        let mut w = self.writer.lock().expect("csv writer lock");
        w.serialize(row).map_err(|e| Error::invalid(format!("csv: {e}")))?;
        w.flush()?;
        Ok(())
    }

    fn finish(self) -> Result<()> {
        drop(self.writer);
        fs::remove_file(&self.path)?;
        Ok(())
    }
}

/// Appends `epoch-XXX.odrn` and a `progress.jsonl` line under `dir`.
pub fn write_checkpoint(dir: &Path, event: &EpochEvent<'_>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let epoch = event.metrics.epoch;
    atomic_write(
        &dir.join(format!("epoch-{epoch:03}.odrn")),
        &event.model.core.to_bytes(),
    )?;
    let mut line = serde_json::to_string(event.metrics).expect("metrics serialize");
    line.push('\n');
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("progress.jsonl"))?;
    f.write_all(line.as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Config {
    pub profile: Profile,
    pub scale: ExperimentScale,
    pub runs: usize,
    /// Projection settings to run (`true`: `A` and `B` are trained).
    pub settings: Vec<bool>,
    pub seed: u64,
    pub source: DataSource,
}

impl Fig1Config {
    pub fn new(profile: Profile, source: DataSource) -> Self {
        let (scale, runs) = match profile {
            Profile::Desk => (ExperimentScale::desk(), 3),
            Profile::Paper => (ExperimentScale::paper(30), 10),
        };
        Self {
            profile,
            scale,
            runs,
            settings: vec![true, false],
            seed: 0,
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Row {
    pub run: usize,
    pub epoch: usize,
    pub weight_lipschitz: f64,
    pub gap: f64,
    pub projections_trained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Result {
    pub rows: Vec<Fig1Row>,
    /// Over all rows.
    pub correlation: Option<f64>,
    /// `(projections_trained, correlation)` per setting.
    pub by_setting: Vec<(bool, Option<f64>)>,
}

impl Fig1Result {
    pub fn csv(&self) -> Result<Vec<u8>> {
        csv_bytes(&self.rows)
    }
}

fn correlation_of(rows: &[&Fig1Row]) -> Option<f64> {
    let x: Vec<f64> = rows.iter().map(|r| r.weight_lipschitz).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.gap).collect();
    pearson(&x, &y)
}

pub fn run_fig1(
    cfg: &Fig1Config,
    train: &Dataset,
    test: &Dataset,
    out: &OutputOptions,
) -> Result<Fig1Result> {
    cfg.scale.validate()?;
    if cfg.runs == 0 || cfg.settings.is_empty() {
        return Err(Error::Config("fig1 needs at least one run and one setting".into()));
    }
    let partial = match &out.dir {
        Some(dir) => Some(PartialCsv::create(dir.join("fig1.csv.partial"))?),
        None => None,
    };
    let jobs: Vec<(usize, bool)> = cfg
        .settings
        .iter()
        .flat_map(|&s| (0..cfg.runs).map(move |r| (r, s)))
        .collect();
    let results: Vec<Result<Vec<Fig1Row>>> = jobs
        .par_iter()
        .map(|&(run, trained)| {
            let model = cfg.scale.model(
                train.dim(),
                train.classes(),
                derive_seed(cfg.seed, INIT_TAG, run as u64),
            )?;
            let tc = cfg.scale.train_config(
                0.0,
                PenaltyKind::FrobL2,
                trained,
                derive_seed(cfg.seed, SHUFFLE_TAG, run as u64),
            );
            let ckpt = out.dir.as_ref().filter(|_| out.checkpoints).map(|d| {
                d.join("checkpoints")
                    .join(format!("fig1-run{run}-{}", if trained { "trained" } else { "frozen" }))
            });
            let mut rows = Vec::with_capacity(cfg.scale.epochs);
            train_observed(&model, train, test, &tc, |ev| {
                let row = Fig1Row {
                    run,
                    epoch: ev.metrics.epoch,
                    weight_lipschitz: ev.metrics.weight_lipschitz,
                    gap: ev.metrics.gap,
                    projections_trained: trained,
                };
                if let Some(p) = &partial {
                    p.push(&row)?;
                }
                if let Some(dir) = &ckpt {
                    write_checkpoint(dir, ev)?;
                }
                rows.push(row);
                Ok(())
            })?;
            Ok(rows)
        })
        .collect();

    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    let all: Vec<&Fig1Row> = rows.iter().collect();
    let by_setting = cfg
        .settings
        .iter()
        .map(|&s| {
            let subset: Vec<&Fig1Row> = rows.iter().filter(|r| r.projections_trained == s).collect();
            (s, correlation_of(&subset))
        })
        .collect();
    let result = Fig1Result {
        correlation: correlation_of(&all),
        by_setting,
        rows,
    };
    if let Some(dir) = &out.dir {
        atomic_write(&dir.join("fig1.csv"), &result.csv()?)?;
        if let Some(p) = partial {
            p.finish()?;
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig2Config {
    pub profile: Profile,
    pub scale: ExperimentScale,
    pub repeats: usize,
    pub lambdas: Vec<f64>,
    pub penalty_kind: PenaltyKind,
    pub seed: u64,
    pub source: DataSource,
}

impl Fig2Config {
    pub fn default_lambdas() -> Vec<f64> {
        vec![0.0, 0.01, 0.1, 1.0, f64::INFINITY]
    }

    pub fn new(profile: Profile, source: DataSource) -> Self {
        let (scale, repeats) = match profile {
            Profile::Desk => (ExperimentScale::desk(), 5),
            Profile::Paper => (ExperimentScale::paper(50), 20),
        };
        Self {
            profile,
            scale,
            repeats,
            lambdas: Self::default_lambdas(),
            penalty_kind: PenaltyKind::FrobL2,
            seed: 0,
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig2Row {
    #[serde(with = "super::train::lambda_serde")]
    pub lambda: f64,
    pub repeat: usize,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig2Summary {
    #[serde(with = "super::train::lambda_serde")]
    pub lambda: f64,
    pub mean_gap: f64,
    pub std_gap: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig2Result {
    pub rows: Vec<Fig2Row>,
    pub summary: Vec<Fig2Summary>,
}

impl Fig2Result {
    pub fn mean_gap(&self, lambda: f64) -> Option<f64> {
        self.summary.iter().find(|s| s.lambda == lambda).map(|s| s.mean_gap)
    }

    /// Lowest mean gap among positive finite factors.
    pub fn best_finite(&self) -> Option<&Fig2Summary> {
        self.summary
            .iter()
            .filter(|s| s.lambda > 0.0 && s.lambda.is_finite())
            .min_by(|a, b| a.mean_gap.total_cmp(&b.mean_gap))
    }

    pub fn csv(&self) -> Result<Vec<u8>> {
        csv_bytes(&self.rows)
    }

    pub fn summary_csv(&self) -> Result<Vec<u8>> {
        csv_bytes(&self.summary)
    }
}

pub fn run_fig2(
    cfg: &Fig2Config,
    train: &Dataset,
    test: &Dataset,
    out: &OutputOptions,
) -> Result<Fig2Result> {
    cfg.scale.validate()?;
    if cfg.repeats == 0 || cfg.lambdas.is_empty() {
        return Err(Error::Config("fig2 needs at least one repeat and one lambda".into()));
    }
    if let Some(bad) = cfg.lambdas.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::Config(format!("lambda must be nonnegative, got {bad}")));
    }
    let partial = match &out.dir {
        Some(dir) => Some(PartialCsv::create(dir.join("fig2.csv.partial"))?),
        None => None,
    };
    let jobs: Vec<(usize, f64)> = cfg
        .lambdas
        .iter()
        .flat_map(|&l| (0..cfg.repeats).map(move |r| (r, l)))
        .collect();
    let results: Vec<Result<Fig2Row>> = jobs
        .par_iter()
        .map(|&(repeat, lambda)| {
            let model = cfg.scale.model(
                train.dim(),
                train.classes(),
                derive_seed(cfg.seed, INIT_TAG, repeat as u64),
            )?;
            let tc = cfg.scale.train_config(
                lambda,
                cfg.penalty_kind,
                false,
                derive_seed(cfg.seed, SHUFFLE_TAG, repeat as u64),
            );
            let ckpt = out.dir.as_ref().filter(|_| out.checkpoints).map(|d| {
                d.join("checkpoints")
                    .join(format!("fig2-lambda{}-rep{repeat}", format_lambda(lambda)))
            });
            let (_, record) = train_observed(&model, train, test, &tc, |ev| match &ckpt {
                Some(dir) => write_checkpoint(dir, ev),
                None => Ok(()),
            })?;
            let row = Fig2Row {
                lambda,
                repeat,
                gap: record.last().gap,
            };
            if let Some(p) = &partial {
                p.push(&row)?;
            }
            Ok(row)
        })
        .collect();

    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let summary = cfg
        .lambdas
        .iter()
        .map(|&lambda| {
            let gaps: Vec<f64> = rows.iter().filter(|r| r.lambda == lambda).map(|r| r.gap).collect();
            let n = gaps.len() as f64;
            let mean = gaps.iter().sum::<f64>() / n;
            let var = if gaps.len() > 1 {
                gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            Fig2Summary {
                lambda,
                mean_gap: mean,
                std_gap: var.sqrt(),
                count: gaps.len(),
            }
        })
        .collect();
    let result = Fig2Result { rows, summary };
    if let Some(dir) = &out.dir {
        atomic_write(&dir.join("fig2.csv"), &result.csv()?)?;
        atomic_write(&dir.join("fig2_summary.csv"), &result.summary_csv()?)?;
        if let Some(p) = partial {
            p.finish()?;
        }
    }
    Ok(result)
}
