//! Run configuration: one JSON document fully determines a run.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::BlobSpec;
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, MetricMode, Variant};
use crate::network::{InputShape, LayerSpec, ModelSpec};
use crate::training::{StreamSeeds, TrainSettings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub heads: HeadsConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    pub dataset: DatasetConfig,
    /// Master seed from which per-stream seeds are derived unless `seeds` is given.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<StreamSeeds>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub rademacher: RademacherConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Architecture: a preset (sized from the dataset) or an explicit layer list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    ToyMlp {
        #[serde(default = "default_mlp_hidden")]
        hidden: [usize; 2],
    },
    ToyCnn {
        #[serde(default = "default_cnn_channels")]
        channels: [usize; 2],
        #[serde(default = "default_cnn_hidden")]
        hidden: usize,
    },
    Custom {
        layers: Vec<LayerSpec>,
    },
}

fn default_mlp_hidden() -> [usize; 2] {
    [64, 64]
}

fn default_cnn_channels() -> [usize; 2] {
    [8, 16]
}

fn default_cnn_hidden() -> usize {
    64
}

/// A number of trailing layers, or the whole network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CopyDepth {
    Layers(usize),
    Full(FullDepth),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FullDepth {
    Full,
}

impl CopyDepth {
    pub const FULL: CopyDepth = CopyDepth::Full(FullDepth::Full);

    pub fn resolve(self, depth: usize) -> usize {
        match self {
            CopyDepth::Layers(d) => d,
            CopyDepth::Full(_) => depth,
        }
    }
}

impl fmt::Display for CopyDepth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CopyDepth::Layers(d) => write!(f, "{d}"),
            CopyDepth::Full(_) => f.write_str("full"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadsConfig {
    #[serde(default)]
    pub variant: Variant,
    #[serde(default = "default_rnd_labels")]
    pub rnd_labels: usize,
    #[serde(default = "default_copy_depth")]
    pub copy_depth: CopyDepth,
    #[serde(default = "one")]
    pub head_width_factor: f64,
}

fn default_rnd_labels() -> usize {
    10
}

fn default_copy_depth() -> CopyDepth {
    CopyDepth::Layers(1)
}

fn one() -> f64 {
    1.0
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self { variant: Variant::default(), rnd_labels: 10, copy_depth: CopyDepth::Layers(1), head_width_factor: 1.0 }
    }
}

/// Optimization and regularization. The schedule is cosine, stepped once per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub label_smoothing: f64,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub augment_flip: bool,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_lr() -> f64 {
    0.1
}

fn default_batch() -> usize {
    16
}

fn default_epochs() -> usize {
    200
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            label_smoothing: 0.0,
            dropout: 0.0,
            momentum: 0.9,
            lr: 0.1,
            weight_decay: 0.0,
            batch_size: 16,
            epochs: 200,
            augment_flip: false,
        }
    }
}

impl TrainingConfig {
    /// The large-budget setup: η = 0.5, batch 256, 200 epochs, μ = 0.9.
    pub fn paper_setup() -> Self {
        Self { lr: 0.5, batch_size: 256, ..Self::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default)]
    pub metric_mode: MetricMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Blobs(BlobSpec),
    Idx(IdxSource),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub classes: usize,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

impl DatasetConfig {
    pub fn classes(&self) -> usize {
        match self {
            DatasetConfig::Blobs(b) => b.classes,
            DatasetConfig::Idx(i) => i.classes,
        }
    }
}

/// Settings for the `rademacher` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RademacherConfig {
    /// Number of sign vectors σ drawn.
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Confidence parameter of the generalization bound.
    #[serde(default = "default_delta_conf")]
    pub delta_conf: f64,
    /// Epochs of the ERM fit per σ; defaults to `training.epochs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
}

fn default_trials() -> usize {
    20
}

fn default_delta_conf() -> f64 {
    0.05
}

impl Default for RademacherConfig {
    fn default() -> Self {
        Self { trials: 20, delta_conf: 0.05, epochs: None }
    }
}

impl RunConfig {
    /// Parses JSON; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "dataset" {
                if let Some(inner) = dataset_field_error(text) {
                    return inner;
                }
            }
            Error::config(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fills derived fields so the document alone reproduces the run.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.seeds = Some(self.stream_seeds());
        c
    }

    pub fn stream_seeds(&self) -> StreamSeeds {
        self.seeds.unwrap_or_else(|| StreamSeeds::from_master(self.seed))
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        if !(t.lambda >= 0.0) || !t.lambda.is_finite() {
            return Err(Error::config("training.lambda", format!("λ = {} must be finite and ≥ 0", t.lambda)));
        }
        if !(0.0..1.0).contains(&t.label_smoothing) {
            return Err(Error::config("training.label_smoothing", format!("δ = {} must be in [0, 1)", t.label_smoothing)));
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return Err(Error::config("training.dropout", format!("p = {} must be in [0, 1)", t.dropout)));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::config("training.momentum", format!("μ = {} must be in [0, 1)", t.momentum)));
        }
        if !(t.lr > 0.0) || !t.lr.is_finite() {
            return Err(Error::config("training.lr", format!("η = {} must be finite and > 0", t.lr)));
        }
        if !(t.weight_decay >= 0.0) || !t.weight_decay.is_finite() {
            return Err(Error::config("training.weight_decay", format!("wd = {} must be finite and ≥ 0", t.weight_decay)));
        }
        if t.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        if self.heads.variant.has_rnd_heads() && self.heads.rnd_labels < 2 {
            return Err(Error::config("heads.rnd_labels", format!("n = {} must be ≥ 2", self.heads.rnd_labels)));
        }
        if !(self.heads.head_width_factor >= 1.0) || !self.heads.head_width_factor.is_finite() {
            return Err(Error::config("heads.head_width_factor", "must be finite and ≥ 1"));
        }
        let r = &self.rademacher;
        if r.trials == 0 {
            return Err(Error::config("rademacher.trials", "must be at least 1"));
        }
        if !(r.delta_conf > 0.0 && r.delta_conf < 1.0) {
            return Err(Error::config("rademacher.delta_conf", format!("δ = {} must be in (0, 1)", r.delta_conf)));
        }
        if let DatasetConfig::Blobs(b) = &self.dataset {
            b.validate()?;
        }
        if let ModelConfig::Custom { layers } = &self.model {
            if layers.is_empty() {
                return Err(Error::config("model.layers", "layer list is empty"));
            }
        }
        if self.dataset.classes() < 2 {
            return Err(Error::config("dataset.classes", "need at least 2 classes"));
        }
        Ok(())
    }

    /// Builds the base network for a given input shape.
    pub fn model_spec(&self, input: InputShape) -> Result<ModelSpec> {
        let classes = self.dataset.classes();
        let p = self.training.dropout;
        let spec = match &self.model {
            ModelConfig::ToyMlp { hidden } => ModelSpec::toy_mlp(input, *hidden, classes, p),
            ModelConfig::ToyCnn { channels, hidden } => ModelSpec::toy_cnn(input, *channels, *hidden, classes, p)?,
            ModelConfig::Custom { layers } => ModelSpec::new(input, layers.clone()),
        };
        spec.validate()?;
        if spec.output_dim()? != classes {
            return Err(Error::config("model.layers", format!("network outputs {} values for {classes} classes", spec.output_dim()?)));
        }
        Ok(spec)
    }

    pub fn head_config(&self, spec: &ModelSpec) -> Result<HeadConfig> {
        let depth = spec.depth();
        let d = self.heads.copy_depth.resolve(depth);
        if d == 0 || d > depth {
            return Err(Error::config("heads.copy_depth", format!("copy depth {d} outside 1..={depth}")));
        }
        Ok(HeadConfig {
            variant: self.heads.variant,
            copy_depth: d,
            rnd_labels: self.heads.rnd_labels,
            head_width_factor: self.heads.head_width_factor,
        })
    }

    /// Trainer settings. λ and δ have no effect for the single-output variant.
    pub fn train_settings(&self) -> TrainSettings {
        let t = &self.training;
        let single = self.heads.variant == Variant::SingleOutput;
        TrainSettings {
            lambda: if single { 0.0 } else { t.lambda },
            label_smoothing: if single { 0.0 } else { t.label_smoothing },
            momentum: t.momentum,
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            augment_flip: t.augment_flip,
            metric_mode: self.evaluation.metric_mode,
        }
    }

    /// Resolves a relative dataset path against the directory holding the config file.
    pub fn rebase_paths(&mut self, base: &Path) {
        if let DatasetConfig::Idx(src) = &mut self.dataset {
            for p in [&mut src.train_images, &mut src.train_labels].into_iter().chain(src.test_images.as_mut()).chain(src.test_labels.as_mut()) {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}

/// Tagged enums buffer their content, hiding field paths; re-parse the dataset body directly.
fn dataset_field_error(text: &str) -> Option<Error> {
    let root: serde_json::Value = serde_json::from_str(text).ok()?;
    let mut body = root.get("dataset")?.as_object()?.clone();
    let kind = body.remove("kind")?;
    let body = serde_json::Value::Object(body);
    let err = match kind.as_str()? {
        "blobs" => serde_path_to_error::deserialize::<_, BlobSpec>(body).err()?,
        "idx" => serde_path_to_error::deserialize::<_, IdxSource>(body).err()?,
        _ => return None,
    };
    Some(Error::config(format!("dataset.{}", err.path()), err.into_inner().to_string()))
}

/// A sweepable hyperparameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    Lambda,
    Delta,
    Dropout,
    WeightDecay,
    CopyDepth,
    Lr,
    Seed,
}

impl Axis {
    pub const ALL: [Axis; 7] = [Axis::Lambda, Axis::Delta, Axis::Dropout, Axis::WeightDecay, Axis::CopyDepth, Axis::Lr, Axis::Seed];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Lambda => "lambda",
            Axis::Delta => "delta",
            Axis::Dropout => "dropout",
            Axis::WeightDecay => "weight_decay",
            Axis::CopyDepth => "copy_depth",
            Axis::Lr => "lr",
            Axis::Seed => "seed",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let alias = match name {
            "λ" | "lambda" => Some(Axis::Lambda),
            "δ" | "delta" | "label_smoothing" => Some(Axis::Delta),
            "p" | "dropout" => Some(Axis::Dropout),
            "wd" | "weight_decay" => Some(Axis::WeightDecay),
            "d" | "copy_depth" => Some(Axis::CopyDepth),
            "η" | "eta" | "lr" => Some(Axis::Lr),
            "seed" => Some(Axis::Seed),
            _ => None,
        };
        alias.ok_or_else(|| {
            let names: Vec<_> = Axis::ALL.iter().map(|a| a.name()).collect();
            Error::config("--axis", format!("unknown axis `{name}`; expected one of {}", names.join(", ")))
        })
    }

    /// Parses one value for this axis; `copy_depth` also accepts `full`.
    pub fn parse_value(self, raw: &str) -> Result<AxisValue> {
        let raw = raw.trim();
        let bad = |why: &str| Error::config("--values", format!("`{raw}` is not a valid {} value: {why}", self.name()));
        match self {
            Axis::CopyDepth if raw == "full" => Ok(AxisValue::Depth(CopyDepth::FULL)),
            Axis::CopyDepth => raw.parse().map(|d| AxisValue::Depth(CopyDepth::Layers(d))).map_err(|_| bad("expected an integer or `full`")),
            Axis::Seed => raw.parse().map(AxisValue::Seed).map_err(|_| bad("expected an unsigned integer")),
            _ => raw.parse().map(AxisValue::Number).map_err(|_| bad("expected a number")),
        }
    }

    pub fn parse_values(self, list: &str) -> Result<Vec<AxisValue>> {
        let values: Vec<AxisValue> =
            list.split(',').filter(|s| !s.trim().is_empty()).map(|s| self.parse_value(s)).collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(Error::config("--values", "value list is empty"));
        }
        Ok(values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AxisValue {
    Number(f64),
    Depth(CopyDepth),
    Seed(u64),
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Number(v) => write!(f, "{v}"),
            AxisValue::Depth(d) => write!(f, "{d}"),
            AxisValue::Seed(s) => write!(f, "{s}"),
        }
    }
}

impl RunConfig {
    /// A copy with one hyperparameter replaced; the result is re-validated.
    pub fn with_axis(&self, axis: Axis, value: AxisValue) -> Result<Self> {
        let mut c = self.clone();
        let t = &mut c.training;
        match (axis, value) {
            (Axis::Lambda, AxisValue::Number(v)) => t.lambda = v,
            (Axis::Delta, AxisValue::Number(v)) => t.label_smoothing = v,
            (Axis::Dropout, AxisValue::Number(v)) => t.dropout = v,
            (Axis::WeightDecay, AxisValue::Number(v)) => t.weight_decay = v,
            (Axis::Lr, AxisValue::Number(v)) => t.lr = v,
            (Axis::CopyDepth, AxisValue::Depth(d)) => c.heads.copy_depth = d,
            (Axis::Seed, AxisValue::Seed(s)) => {
                c.seed = s;
                c.seeds = None;
            }
            (axis, value) => return Err(Error::config("--values", format!("{value} is not a value for axis {}", axis.name()))),
        }
        c.validate()?;
        Ok(c)
    }
}
