//! Training configuration in flat `key = value` form.
//!
//! Every [`MTransConfig`] key is accepted alongside the training keys
//! below; anything else is an error.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `lr` | `1e-4` | SGD learning rate |
//! | `batch` | `4` | samples per step |
//! | `steps` | `200` | SGD steps |
//! | `train_size` | `8` | training samples (indices `0..train_size`) |
//! | `eval_size` | `8` | held-out samples (the next `eval_size` indices) |
//! | `seed` | `0` | root of every random stream |
//! | `aux_mode` | `paired` | `paired`, `noise` or `self` |
//! | `mask_kind` | `random` | `random` or `equispaced` |
//! | `accel` | `4` | acceleration R; `1` disables undersampling |
//! | `center_fraction` | `auto` | fully sampled center fraction |
//! | `ellipses_min`, `ellipses_max` | `4`, `8` | phantom ellipse count range |
//! | `dtype` | `f64` | `f32` or `f64` |
//!
//! `fusion_variant` is accepted as a synonym of `variant`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{AuxMode, DatasetSpec, PhantomSpec};
use crate::error::{Error, Result};
use crate::io::kv::{read_kv, Entry};
use crate::kspace::{default_center_fraction, make_mask, MaskKind};
use crate::model::config::parse_num;
use crate::model::{MTransConfig, Task};
use crate::scalar::DType;

/// Keys that fix the dataset; cells of one ablation must agree on them.
pub const DATA_KEYS: &[&str] = &[
    "height",
    "width",
    "task",
    "scale",
    "train_size",
    "eval_size",
    "seed",
    "mask_kind",
    "accel",
    "center_fraction",
    "ellipses_min",
    "ellipses_max",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: MTransConfig,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
    pub aux_mode: AuxMode,
    pub mask_kind: MaskKind,
    pub acceleration: u32,
    /// `None` picks the standard fraction for the acceleration.
    pub center_fraction: Option<f64>,
    pub ellipses_min: usize,
    pub ellipses_max: usize,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: MTransConfig::toy(),
            lr: 1e-4,
            batch: 4,
            steps: 200,
            train_size: 8,
            eval_size: 8,
            seed: 0,
            aux_mode: AuxMode::Paired,
            mask_kind: MaskKind::Random,
            acceleration: 4,
            center_fraction: None,
            ellipses_min: 4,
            ellipses_max: 8,
            dtype: DType::F64,
        }
    }
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let doc = read_kv(path)?;
        if !doc.sections.is_empty() {
            return Err(Error::format(path, "training configs take no [sections]; use an ablation matrix"));
        }
        Self::from_entries(&doc.base, path)
    }

    /// Defaults overridden by `entries`, then validated.
    pub fn from_entries(entries: &[Entry], origin: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply(entries, origin)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies overrides without validating.
    pub fn apply(&mut self, entries: &[Entry], origin: &Path) -> Result<()> {
        for e in entries {
            self.set(&e.key, &e.value)
                .map_err(|err| Error::format(origin, format!("line {}: {err}", e.line)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = if key == "fusion_variant" { "variant" } else { key };
        if self.model.set_kv(key, value)? {
            return Ok(());
        }
        match key {
            "lr" => self.lr = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "train_size" => self.train_size = parse_num(key, value)?,
            "eval_size" => self.eval_size = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "aux_mode" => self.aux_mode = value.parse()?,
            "mask_kind" => self.mask_kind = value.parse()?,
            "accel" => self.acceleration = parse_num(key, value)?,
            "center_fraction" => {
                self.center_fraction = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "ellipses_min" => self.ellipses_min = parse_num(key, value)?,
            "ellipses_max" => self.ellipses_max = parse_num(key, value)?,
            "dtype" => {
                self.dtype = match value {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    other => return Err(Error::config(format!("dtype must be f32 or f64, got {other:?}"))),
                }
            }
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its text value, model keys first.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = self.model.to_kv();
        out.extend([
            ("lr", self.lr.to_string()),
            ("batch", self.batch.to_string()),
            ("steps", self.steps.to_string()),
            ("train_size", self.train_size.to_string()),
            ("eval_size", self.eval_size.to_string()),
            ("seed", self.seed.to_string()),
            ("aux_mode", self.aux_mode.to_string()),
            ("mask_kind", self.mask_kind.to_string()),
            ("accel", self.acceleration.to_string()),
            (
                "center_fraction",
                self.center_fraction.map_or_else(|| "auto".to_string(), |c| c.to_string()),
            ),
            ("ellipses_min", self.ellipses_min.to_string()),
            ("ellipses_max", self.ellipses_max.to_string()),
            ("dtype", self.dtype.to_string()),
        ]);
        out
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Parseable text form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn value_of(&self, key: &str) -> Option<String> {
        self.to_pairs().into_iter().find(|(k, _)| *k == key).map(|(_, v)| v)
    }

    pub fn center_fraction(&self) -> f64 {
        self.center_fraction
            .or_else(|| default_center_fraction(self.acceleration))
            .unwrap_or(0.08)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.train_size == 0 || self.eval_size == 0 {
            return Err(Error::config("train_size and eval_size must be at least 1"));
        }
        if self.batch == 0 || self.batch > self.train_size {
            return Err(Error::config(format!(
                "batch must lie in 1..={}, got {}",
                self.train_size, self.batch
            )));
        }
        if self.ellipses_min > self.ellipses_max {
            return Err(Error::config("ellipses_min exceeds ellipses_max"));
        }
        if self.model.task == Task::Reconstruction && self.acceleration > 1 {
            make_mask(self.mask_kind, self.acceleration, self.center_fraction(), self.model.width, 0)?;
        }
        if self.acceleration == 0 {
            return Err(Error::config("accel must be at least 1"));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            phantom: PhantomSpec {
                height: self.model.height,
                width: self.model.width,
                ellipses_min: self.ellipses_min,
                ellipses_max: self.ellipses_max,
                seed: self.seed,
            },
            task: self.model.task,
            scale: self.model.scale,
            mask_kind: self.mask_kind,
            acceleration: self.acceleration,
            center_fraction: self.center_fraction(),
            aux_mode: self.aux_mode,
        }
    }
}
