//! Run configuration: a single JSON document whose fields mirror
//! [`RunConfig`], with `key=value` overrides layered on top. Optional
//! fields resolve to per-task defaults (segmentation: Adam at 3e-4 for
//! 250 epochs, batch 8, BCE; classification: SGD 0.01 with momentum
//! 0.9 for 150 epochs, CCE, rate divided by 10 every 50 epochs).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nabla_core::model::{Family, ModelSpec, Variant};
use nabla_core::optim::lr_schedule;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Segment,
    Classify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Everything a run needs; only `task` is mandatory. `None` means
/// "use the task default".
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,

    // Model shape.
    #[serde(default)]
    pub variant: Option<Variant>,
    #[serde(default)]
    pub n_decoders: Option<usize>,
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
    #[serde(default)]
    pub t: Option<usize>,
    #[serde(default)]
    pub input_size: Option<usize>,
    #[serde(default)]
    pub in_channels: Option<usize>,
    #[serde(default)]
    pub classes: Option<usize>,

    // Optimization.
    #[serde(default)]
    pub optimizer: Option<OptimizerKind>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub momentum: Option<f64>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,

    // Data: either on-disk folders or the synthetic generator.
    #[serde(default)]
    pub images: Option<PathBuf>,
    #[serde(default)]
    pub masks: Option<PathBuf>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub synth_n: Option<usize>,
    #[serde(default)]
    pub augment: Option<bool>,
    #[serde(default)]
    pub val_fraction: Option<f64>,

    // Artifacts.
    #[serde(default)]
    pub transfer_from: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    /// Sigmoid cut for binarizing segmentation predictions.
    #[serde(default)]
    pub threshold: Option<f64>,
}

fn default_seed() -> u64 {
    42
}

/// Where the records come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    SegFolders { images: PathBuf, masks: PathBuf },
    ClsFolders { images: PathBuf, labels: PathBuf },
    Synth { n: usize },
}

impl RunConfig {
    pub fn minimal(task: TaskKind) -> Self {
        RunConfig {
            task,
            variant: None,
            n_decoders: None,
            widths: None,
            t: None,
            input_size: None,
            in_channels: None,
            classes: None,
            optimizer: None,
            lr: None,
            momentum: None,
            epochs: None,
            batch_size: None,
            seed: default_seed(),
            images: None,
            masks: None,
            labels: None,
            synth_n: None,
            augment: None,
            val_fraction: None,
            transfer_from: None,
            out_dir: None,
            checkpoint_every: None,
            threshold: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies one `key=value` override; keys mirror the JSON fields.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override '{kv}' is not key=value")))?;
        let bad = |what: &str| Error::config(format!("override {key}={value}: expected {what}"));
        match key {
            "task" => {
                self.task = match value {
                    "segment" => TaskKind::Segment,
                    "classify" => TaskKind::Classify,
                    _ => return Err(bad("segment|classify")),
                }
            }
            "variant" => {
                self.variant = Some(match value {
                    "A" | "a" => Variant::A,
                    "B" | "b" => Variant::B,
                    "AB" | "ab" => Variant::AB,
                    _ => return Err(bad("A|B|AB")),
                })
            }
            "n_decoders" => self.n_decoders = Some(value.parse().map_err(|_| bad("integer"))?),
            "widths" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    value.split(',').map(str::parse).collect();
                self.widths = Some(parsed.map_err(|_| bad("comma-separated integers"))?)
            }
            "t" => self.t = Some(value.parse().map_err(|_| bad("integer"))?),
            "input_size" => self.input_size = Some(value.parse().map_err(|_| bad("integer"))?),
            "in_channels" => self.in_channels = Some(value.parse().map_err(|_| bad("integer"))?),
            "classes" => self.classes = Some(value.parse().map_err(|_| bad("integer"))?),
            "optimizer" => {
                self.optimizer = Some(match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(bad("adam|sgd")),
                })
            }
            "lr" => self.lr = Some(value.parse().map_err(|_| bad("number"))?),
            "momentum" => self.momentum = Some(value.parse().map_err(|_| bad("number"))?),
            "epochs" => self.epochs = Some(value.parse().map_err(|_| bad("integer"))?),
            "batch_size" => self.batch_size = Some(value.parse().map_err(|_| bad("integer"))?),
            "seed" => self.seed = value.parse().map_err(|_| bad("integer"))?,
            "images" => self.images = Some(PathBuf::from(value)),
            "masks" => self.masks = Some(PathBuf::from(value)),
            "labels" => self.labels = Some(PathBuf::from(value)),
            "synth_n" => self.synth_n = Some(value.parse().map_err(|_| bad("integer"))?),
            "augment" => self.augment = Some(value.parse().map_err(|_| bad("true|false"))?),
            "val_fraction" => self.val_fraction = Some(value.parse().map_err(|_| bad("number"))?),
            "transfer_from" => self.transfer_from = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "checkpoint_every" => self.checkpoint_every = Some(value.parse().map_err(|_| bad("integer"))?),
            "threshold" => self.threshold = Some(value.parse().map_err(|_| bad("number"))?),
            _ => return Err(Error::config(format!("unknown override key '{key}'"))),
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut spec = match self.task {
            TaskKind::Segment => ModelSpec::nabla(
                self.variant.unwrap_or(Variant::AB),
                self.n_decoders.unwrap_or(2),
            ),
            TaskKind::Classify => ModelSpec::irrcnn(),
        };
        if let Some(w) = &self.widths {
            spec.widths = Some(w.clone());
        }
        if let Some(t) = self.t {
            spec.t = t;
        }
        if let Some(s) = self.input_size {
            spec.input_size = s;
        }
        if self.in_channels.is_some() {
            spec.in_channels = self.in_channels;
        }
        if let Some(c) = self.classes {
            spec.classes = c;
        }
        spec
    }

    pub fn optimizer(&self) -> OptimizerKind {
        self.optimizer.unwrap_or(match self.task {
            TaskKind::Segment => OptimizerKind::Adam,
            TaskKind::Classify => OptimizerKind::Sgd,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(match self.task {
            TaskKind::Segment => 3e-4,
            TaskKind::Classify => 0.01,
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum.unwrap_or(0.9)
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.task {
            TaskKind::Segment => 250,
            TaskKind::Classify => 150,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(8)
    }

    pub fn augment(&self) -> bool {
        self.augment.unwrap_or(true)
    }

    pub fn val_fraction(&self) -> f64 {
        self.val_fraction.unwrap_or(0.1)
    }

    pub fn checkpoint_every(&self) -> usize {
        self.checkpoint_every.unwrap_or(10)
    }

    pub fn threshold(&self) -> f64 {
        self.threshold.unwrap_or(0.5)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("nabla-run"))
    }

    pub fn loss_name(&self) -> &'static str {
        match self.task {
            TaskKind::Segment => "bce",
            TaskKind::Classify => "cce",
        }
    }

    /// Classification follows the step schedule; segmentation holds the
    /// rate constant.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.task {
            TaskKind::Segment => self.lr(),
            TaskKind::Classify => lr_schedule(self.lr(), epoch),
        }
    }

    pub fn data_source(&self) -> Result<DataSource> {
        if let Some(images) = &self.images {
            return match self.task {
                TaskKind::Segment => {
                    let masks = self
                        .masks
                        .clone()
                        .ok_or_else(|| Error::config("segmentation folders need both images and masks"))?;
                    Ok(DataSource::SegFolders { images: images.clone(), masks })
                }
                TaskKind::Classify => {
                    let labels = self
                        .labels
                        .clone()
                        .ok_or_else(|| Error::config("classification folders need images and a labels csv"))?;
                    Ok(DataSource::ClsFolders { images: images.clone(), labels })
                }
            };
        }
        if let Some(n) = self.synth_n {
            return Ok(DataSource::Synth { n });
        }
        Err(Error::config("no dataset: set images (+masks/labels) or synth_n"))
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec().validate()?;
        if self.epochs() == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size() == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr().is_finite() && self.lr() > 0.0) {
            return Err(Error::config(format!("lr {} must be positive and finite", self.lr())));
        }
        if !(0.0..1.0).contains(&self.momentum()) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", self.momentum())));
        }
        if !(0.0..1.0).contains(&self.val_fraction()) {
            return Err(Error::config(format!("val_fraction {} outside [0, 1)", self.val_fraction())));
        }
        if !(self.threshold() > 0.0 && self.threshold() < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.threshold())));
        }
        if self.synth_n == Some(0) {
            return Err(Error::config("synth_n must be at least 1"));
        }
        Ok(())
    }

    /// The human-readable summary `inspect` prints: model shape,
    /// training recipe, and trainable parameter count.
    pub fn describe(&self) -> String {
        let spec = self.model_spec();
        let mut s = String::new();
        let task = match self.task {
            TaskKind::Segment => "segment",
            TaskKind::Classify => "classify",
        };
        writeln!(s, "task: {task}").unwrap();
        s.push_str(&describe_spec(&spec));
        let optim = match self.optimizer() {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        };
        writeln!(s, "optimizer: {optim}").unwrap();
        writeln!(s, "lr: {} ({})", self.lr(), self.schedule_text()).unwrap();
        if self.optimizer() == OptimizerKind::Sgd {
            writeln!(s, "momentum: {}", self.momentum()).unwrap();
        }
        writeln!(s, "epochs: {}", self.epochs()).unwrap();
        writeln!(s, "batch_size: {}", self.batch_size()).unwrap();
        writeln!(s, "loss: {}", self.loss_name()).unwrap();
        writeln!(s, "seed: {}", self.seed).unwrap();
        writeln!(s, "augment: {}", self.augment()).unwrap();
        let count = nabla_core::model::count_params(&spec).map(|c| c.to_string());
        match count {
            Ok(c) => writeln!(s, "trainable parameters: {c}").unwrap(),
            Err(e) => writeln!(s, "trainable parameters: invalid spec ({e})").unwrap(),
        }
        s
    }

    fn schedule_text(&self) -> String {
        match self.task {
            TaskKind::Segment => "constant".to_string(),
            TaskKind::Classify => {
                let steps: Vec<String> =
                    (1..).map(|k| k * 50).take_while(|&e| e < self.epochs()).map(|e| e.to_string()).collect();
                if steps.is_empty() {
                    "constant".to_string()
                } else {
                    format!("/10 at epochs {}", steps.join(", "))
                }
            }
        }
    }
}

/// Model-shape lines shared by config and checkpoint inspection.
pub fn describe_spec(spec: &ModelSpec) -> String {
    let mut s = String::new();
    match spec.family {
        Family::Nabla => {
            let variant = match spec.variant {
                Variant::A => "A",
                Variant::B => "B",
                Variant::AB => "AB",
            };
            writeln!(
                s,
                "model: nabla variant={variant} decoders={} t={} input={} channels={}",
                spec.n_decoders,
                spec.t,
                spec.input_size,
                spec.in_channels.unwrap_or(1)
            )
            .unwrap();
            let widths = spec
                .widths
                .clone()
                .unwrap_or_else(|| nabla_core::model::NABLA_DEFAULT_WIDTHS.to_vec());
            writeln!(s, "widths: {}", widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")).unwrap();
        }
        Family::Irrcnn => {
            writeln!(
                s,
                "model: irrcnn t={} input={} channels={} classes={}",
                spec.t,
                spec.input_size,
                spec.in_channels.unwrap_or(3),
                spec.classes
            )
            .unwrap();
            let widths = spec
                .widths
                .clone()
                .unwrap_or_else(|| nabla_core::model::IRRCNN_DEFAULT_WIDTHS.to_vec());
            writeln!(s, "widths: {}", widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")).unwrap();
        }
    }
    s
}
