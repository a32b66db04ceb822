//! Runs, sweeps, reports and the Rademacher command.
//!
//! A run directory holds `config.resolved.json`, `metrics.jsonl` (one
//! [`MetricsRecord`] per line, appended as epochs finish), `rnd_labels.json`
//! and `checkpoint.bin`. A sweep directory holds one run directory per grid
//! point plus `summary.csv`.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{Axis, AxisValue, DatasetConfig, RunConfig};
use crate::data::{assign_rnd_labels, gen_blobs, load_idx_dataset, Dataset, RndLabelFile, Split};
use crate::error::{Error, Result};
use crate::heads::{MultiHeadModel, Variant};
use crate::rademacher::{bound_eval, rademacher_sampled, NetworkErm};
use crate::tensor::Tensor;
use crate::training::{evaluate, MetricsRecord, RngStreams, Trainer};

pub const CONFIG_FILE: &str = "config.resolved.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RND_LABELS_FILE: &str = "rnd_labels.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RADEMACHER_FILE: &str = "rademacher.json";

/// Accuracy level whose first crossing epoch is reported.
pub const CROSSING_LEVEL: f64 = 0.9;

/// Train and test splits for a config.
pub fn load_data(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    match &config.dataset {
        DatasetConfig::Blobs(spec) => gen_blobs(spec),
        DatasetConfig::Idx(src) => {
            let train = load_idx_dataset(&src.train_images, &src.train_labels, src.classes, Split::Train)?;
            let test = match (&src.test_images, &src.test_labels) {
                (Some(i), Some(l)) => load_idx_dataset(i, l, src.classes, Split::Test)?,
                (None, None) => {
                    let mut shape = vec![0];
                    shape.extend(train.shape.dims());
                    Dataset::new(Tensor::zeros(&shape), vec![], src.classes, train.shape, Split::Test)?
                }
                _ => return Err(Error::config("dataset", "give both test_images and test_labels, or neither")),
            };
            if test.shape != train.shape {
                return Err(Error::Validation(format!("train samples are {:?} but test samples are {:?}", train.shape, test.shape)));
            }
            Ok((train, test))
        }
    }
}

/// An in-memory run: resolved config, trainer and data.
pub struct Experiment {
    pub config: RunConfig,
    pub trainer: Trainer,
    pub train: Dataset,
    pub test: Dataset,
}

impl Experiment {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let (train, test) = load_data(&config)?;
        let spec = config.model_spec(train.shape)?;
        let heads = config.head_config(&spec)?;
        let mut streams = RngStreams::new(config.stream_seeds());
        let model = MultiHeadModel::build(&spec, heads, &mut streams.init_base, &mut streams.init_heads)?;
        let train = if heads.variant.has_rnd_heads() {
            let s = assign_rnd_labels(train.len(), heads.rnd_labels, &mut streams.rnd_labels)?;
            train.with_rnd_labels(s)?
        } else {
            train
        };
        let trainer = Trainer::new(model, config.train_settings(), streams, train.len())?;
        Ok(Self { config, trainer, train, test })
    }

    pub fn epochs_remaining(&self) -> usize {
        self.config.training.epochs.saturating_sub(self.trainer.epoch())
    }

    pub fn epoch(&mut self) -> Result<MetricsRecord> {
        self.trainer.train_epoch(&self.train, Some(&self.test))
    }

    /// Trains for every remaining epoch.
    pub fn train_all(&mut self) -> Result<Vec<MetricsRecord>> {
        (0..self.epochs_remaining()).map(|_| self.epoch()).collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.trainer)
    }
}

/// Outcome of a completed run.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub dir: PathBuf,
    pub records: Vec<MetricsRecord>,
}

impl RunReport {
    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }
}

/// Trains a config into `dir` (defaults to the config's `output_dir`).
///
/// Metrics are appended and the checkpoint rewritten after every epoch, so a
/// divergence leaves the partial log and a last-good checkpoint behind.
pub fn run(config: &RunConfig, dir: Option<&Path>) -> Result<RunReport> {
    let mut exp = Experiment::new(config)?;
    let dir = dir.map_or_else(|| exp.config.output_dir.clone(), Path::to_path_buf);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), exp.config.to_json()?)?;
    if let Some(labels) = &exp.train.rnd_labels {
        RndLabelFile { n: exp.config.heads.rnd_labels, labels: labels.clone() }.save(&dir.join(RND_LABELS_FILE))?;
    }
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let save_ckpt = |exp: &Experiment| -> Result<()> {
        let tmp = dir.join("checkpoint.bin.tmp");
        exp.checkpoint().save(&tmp)?;
        fs::rename(&tmp, &ckpt_path)?;
        Ok(())
    };
    save_ckpt(&exp)?;
    let mut metrics = File::create(dir.join(METRICS_FILE))?;
    let mut records = Vec::new();
    for _ in 0..exp.epochs_remaining() {
        let rec = match exp.epoch() {
            Ok(r) => r,
            Err(Error::Diverged { epoch, .. }) => return Err(Error::Diverged { epoch, last_good: Some(ckpt_path) }),
            Err(Error::NonFiniteGradient { .. }) => {
                return Err(Error::Diverged { epoch: exp.trainer.epoch() + 1, last_good: Some(ckpt_path) })
            }
            Err(e) => return Err(e),
        };
        writeln!(metrics, "{}", serde_json::to_string(&rec)?)?;
        metrics.flush()?;
        save_ckpt(&exp)?;
        records.push(rec);
    }
    Ok(RunReport { dir, records })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// First epoch at which `f` reaches `level`.
pub fn crossing_epoch(records: &[MetricsRecord], level: f64, f: impl Fn(&MetricsRecord) -> Option<f64>) -> Option<usize> {
    records.iter().find(|r| f(r).is_some_and(|v| v >= level)).map(|r| r.epoch)
}

/// One sweep axis with its values.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepAxis {
    pub axis: Axis,
    pub values: Vec<AxisValue>,
}

/// One `summary.csv` row.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub run: String,
    pub point: Vec<(Axis, AxisValue)>,
    pub status: String,
    pub final_record: Option<MetricsRecord>,
    pub class_cross_epoch: Option<usize>,
    pub rnd_cross_epoch: Option<usize>,
}

/// Runs the Cartesian grid of up to two axes, in parallel, and writes `summary.csv`.
///
/// Failed member runs are recorded with their error and do not stop the sweep.
pub fn sweep(base: &RunConfig, axes: &[SweepAxis], out: &Path) -> Result<Vec<SweepRow>> {
    if axes.is_empty() || axes.len() > 2 {
        return Err(Error::config("--axis", "a sweep takes one or two axes"));
    }
    if axes.len() == 2 && axes[0].axis == axes[1].axis {
        return Err(Error::config("--axis", "the two axes must differ"));
    }
    if axes.iter().any(|a| a.values.is_empty()) {
        return Err(Error::config("--values", "value list is empty"));
    }
    let mut points: Vec<Vec<(Axis, AxisValue)>> = vec![vec![]];
    for a in axes {
        points = points
            .into_iter()
            .flat_map(|p| a.values.iter().map(move |&v| [p.clone(), vec![(a.axis, v)]].concat()))
            .collect();
    }
    let planned: Vec<(String, RunConfig)> = points
        .iter()
        .map(|point| {
            let mut c = base.clone();
            for &(axis, value) in point {
                c = c.with_axis(axis, value)?;
            }
            let label = point.iter().map(|(a, v)| format!("{}={v}", a.name())).collect::<Vec<_>>().join("_");
            c.output_dir = out.join(&label);
            Ok((label, c))
        })
        .collect::<Result<_>>()?;
    fs::create_dir_all(out)?;
    let rows: Vec<SweepRow> = planned
        .par_iter()
        .zip(points.par_iter())
        .map(|((label, c), point)| {
            let (status, records) = match run(c, None) {
                Ok(r) => ("ok".to_string(), r.records),
                Err(e) => {
                    let partial = read_metrics(&c.output_dir.join(METRICS_FILE)).unwrap_or_default();
                    (format!("failed: {e}"), partial)
                }
            };
            SweepRow {
                run: label.clone(),
                point: point.clone(),
                status,
                final_record: records.last().cloned(),
                class_cross_epoch: crossing_epoch(&records, CROSSING_LEVEL, |r| Some(r.train_class_acc)),
                rnd_cross_epoch: crossing_epoch(&records, CROSSING_LEVEL, |r| r.rnd_label_acc),
            }
        })
        .collect();
    write_summary(&out.join(SUMMARY_FILE), axes, &rows)?;
    Ok(rows)
}

const SUMMARY_COLUMNS: [&str; 11] = [
    "status",
    "epochs",
    "train_class_acc",
    "test_class_acc",
    "rnd_label_acc",
    "class_loss",
    "rnd_loss",
    "reg_loss",
    "lr",
    "class_cross_epoch",
    "rnd_cross_epoch",
];

fn write_summary(path: &Path, axes: &[SweepAxis], rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["run".to_string()];
    header.extend(axes.iter().map(|a| a.axis.name().to_string()));
    header.extend(SUMMARY_COLUMNS.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in rows {
        let mut rec = vec![row.run.clone()];
        rec.extend(row.point.iter().map(|(_, v)| v.to_string()));
        let f = row.final_record.as_ref();
        rec.push(row.status.clone());
        rec.push(f.map(|r| r.epoch.to_string()).unwrap_or_else(|| "0".into()));
        rec.push(opt(f.map(|r| r.train_class_acc)));
        rec.push(opt(f.and_then(|r| r.test_class_acc)));
        rec.push(opt(f.and_then(|r| r.rnd_label_acc)));
        rec.push(opt(f.and_then(|r| r.class_loss)));
        rec.push(opt(f.and_then(|r| r.rnd_loss)));
        rec.push(opt(f.and_then(|r| r.reg_loss)));
        rec.push(opt(f.map(|r| r.lr)));
        rec.push(row.class_cross_epoch.map(|e| e.to_string()).unwrap_or_default());
        rec.push(row.rnd_cross_epoch.map(|e| e.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Human-readable summary of a run directory or a sweep directory.
pub fn report(dir: &Path) -> Result<String> {
    let mut out = String::new();
    let summary = dir.join(SUMMARY_FILE);
    if summary.exists() {
        let mut r = csv::Reader::from_path(&summary)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let rows: Vec<Vec<String>> = r.records().map(|rec| rec.map(|x| x.iter().map(short).collect())).collect::<std::result::Result<_, _>>()?;
        let widths: Vec<usize> = (0..header.len())
            .map(|i| rows.iter().map(|row| row.get(i).map_or(0, |c| c.chars().count())).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &[String]| {
            cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
        };
        writeln!(out, "sweep {} ({} runs)", dir.display(), rows.len()).ok();
        writeln!(out, "{}", line(&header)).ok();
        for row in &rows {
            writeln!(out, "{}", line(row)).ok();
        }
        return Ok(out);
    }
    let metrics = dir.join(METRICS_FILE);
    if !metrics.exists() {
        return Err(Error::Usage(format!("{} holds neither {SUMMARY_FILE} nor {METRICS_FILE}", dir.display())));
    }
    let records = read_metrics(&metrics)?;
    let name = fs::read_to_string(dir.join(CONFIG_FILE))
        .ok()
        .and_then(|t| RunConfig::from_json(&t).ok())
        .map(|c| c.name)
        .filter(|n| !n.is_empty())
        .unwrap_or_else(|| dir.display().to_string());
    writeln!(out, "run {name}: {} epochs", records.len()).ok();
    if let Some(last) = records.last() {
        let fmt = |label: &str, v: Option<f64>| v.map(|x| format!("  {label:<16}{x:.4}\n")).unwrap_or_default();
        out.push_str(&fmt("train_class_acc", Some(last.train_class_acc)));
        out.push_str(&fmt("test_class_acc", last.test_class_acc));
        out.push_str(&fmt("rnd_label_acc", last.rnd_label_acc));
        out.push_str(&fmt("class_loss", last.class_loss));
        out.push_str(&fmt("rnd_loss", last.rnd_loss));
        out.push_str(&fmt("reg_loss", last.reg_loss));
        out.push_str(&fmt("lr", Some(last.lr)));
        writeln!(out, "  {:<16}{}", "clamp_count", records.iter().map(|r| r.clamp_count).sum::<usize>()).ok();
        let cross = |e: Option<usize>| e.map_or_else(|| "never".to_string(), |e| e.to_string());
        writeln!(out, "  class acc ≥ {CROSSING_LEVEL} at epoch {}", cross(crossing_epoch(&records, CROSSING_LEVEL, |r| Some(r.train_class_acc)))).ok();
        if last.rnd_label_acc.is_some() {
            writeln!(out, "  rnd acc ≥ {CROSSING_LEVEL} at epoch {}", cross(crossing_epoch(&records, CROSSING_LEVEL, |r| r.rnd_label_acc))).ok();
        }
    }
    Ok(out)
}

fn short(cell: &str) -> String {
    match cell.parse::<f64>() {
        Ok(v) if cell.contains('.') && cell.len() > 8 => format!("{v:.4}"),
        _ => cell.to_string(),
    }
}

/// Result of the `rademacher` command.
#[derive(Clone, Debug, Serialize)]
pub struct RademacherReport {
    /// Always `"empirical estimate"`: the supremum is approximated by SGD fits.
    pub kind: &'static str,
    pub m: usize,
    pub trials: usize,
    pub estimate: f64,
    pub std_error: f64,
    pub train_error: f64,
    pub test_error: f64,
    pub delta_conf: f64,
    pub bound: f64,
    pub bound_holds: bool,
}

/// Trains the config's network (as a plain classifier) on its binary task,
/// estimates the class's Rademacher value by fitting random signs, and
/// evaluates the generalization bound against the observed test error.
pub fn rademacher_run(config: &RunConfig) -> Result<RademacherReport> {
    if config.dataset.classes() != 2 {
        return Err(Error::config("dataset.classes", "the Rademacher bound applies to binary tasks; set classes to 2"));
    }
    let mut base = config.clone();
    base.heads.variant = Variant::Baseline;
    let mut exp = Experiment::new(&base)?;
    exp.train_all()?;
    let mode = exp.config.evaluation.metric_mode;
    let train_error = 1.0 - evaluate(&exp.trainer.model, &exp.train, mode)?.class_acc;
    let test_error = 1.0 - evaluate(&exp.trainer.model, &exp.test, mode)?.class_acc;

    let full_spec = exp.config.model_spec(exp.train.shape)?;
    let mut settings = exp.config.train_settings();
    settings.epochs = config.rademacher.epochs.unwrap_or(settings.epochs);
    let seeds = exp.config.stream_seeds();
    let mut erm = NetworkErm::new(full_spec, &exp.train, settings, seeds.init_base ^ seeds.rnd_labels)?;
    let mut sigma_rng = RngStreams::new(seeds).rnd_labels;
    let est = rademacher_sampled(&mut erm, config.rademacher.trials, &mut sigma_rng)?;
    let m = exp.train.len();
    let bound = bound_eval(train_error, est.mean, m, config.rademacher.delta_conf)?;
    Ok(RademacherReport {
        kind: "empirical estimate",
        m,
        trials: est.trials,
        estimate: est.mean,
        std_error: est.std_error,
        train_error,
        test_error,
        delta_conf: config.rademacher.delta_conf,
        bound,
        bound_holds: bound >= test_error,
    })
}
