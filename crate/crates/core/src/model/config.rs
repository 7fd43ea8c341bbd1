//! Architecture hyperparameters and the token geometry they imply.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Reconstruction,
    SuperResolution,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recon" | "reconstruction" => Ok(Task::Reconstruction),
            "sr" | "super_resolution" => Ok(Task::SuperResolution),
            other => Err(Error::config(format!("unknown task {other:?} (expected recon|sr)"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Reconstruction => "recon",
            Task::SuperResolution => "sr",
        })
    }
}

/// Fusion strategy. `MTrans` is the dual-branch multi-scale model; the
/// others are its ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Target tokens use patch side P/2, auxiliary tokens side P.
    MTrans,
    /// Both modalities stacked as a 2-channel input to one self-attention branch.
    EarlyFusion,
    /// Both branches use patch side P.
    SingleScaleLarge,
    /// Both branches use patch side P/2.
    SingleScaleSmall,
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mtrans" => Ok(FusionVariant::MTrans),
            "early_fusion" => Ok(FusionVariant::EarlyFusion),
            "single_scale_large" => Ok(FusionVariant::SingleScaleLarge),
            "single_scale_small" => Ok(FusionVariant::SingleScaleSmall),
            other => Err(Error::config(format!(
                "unknown variant {other:?} (expected mtrans|early_fusion|single_scale_large|single_scale_small)"
            ))),
        }
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionVariant::MTrans => "mtrans",
            FusionVariant::EarlyFusion => "early_fusion",
            FusionVariant::SingleScaleLarge => "single_scale_large",
            FusionVariant::SingleScaleSmall => "single_scale_small",
        })
    }
}

/// How the per-image L1 term is reduced over pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// `‖x' − x‖₁ / (H·W)`
    Mean,
    /// `‖x' − x‖₁`
    Sum,
}

impl FromStr for LossReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(LossReduction::Mean),
            "sum" => Ok(LossReduction::Sum),
            other => Err(Error::config(format!("unknown loss reduction {other:?} (expected mean|sum)"))),
        }
    }
}

impl fmt::Display for LossReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossReduction::Mean => "mean",
            LossReduction::Sum => "sum",
        })
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MTransConfig {
    /// Full-resolution target size.
    pub height: usize,
    pub width: usize,
    /// Head feature channels C.
    pub channels: usize,
    /// Auxiliary patch side P; the target branch uses P/2.
    pub patch: usize,
    /// Number of cascaded cross transformer encoders.
    pub encoders: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub task: Task,
    /// Super-resolution factor s (1 for reconstruction).
    pub scale: usize,
    pub alpha: f64,
    pub eps_ln: f64,
    pub variant: FusionVariant,
    pub loss_reduction: LossReduction,
}

impl Default for MTransConfig {
    fn default() -> Self {
        MTransConfig {
            height: 32,
            width: 32,
            channels: 16,
            patch: 8,
            encoders: 4,
            heads: 4,
            ffn_mult: 2,
            task: Task::Reconstruction,
            scale: 1,
            alpha: 0.9,
            eps_ln: 1e-5,
            variant: FusionVariant::MTrans,
            loss_reduction: LossReduction::Sum,
        }
    }
}

/// Token layout of one branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchGeom {
    /// Head input (and feature map) size.
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub patch: usize,
    /// Tile grid `(rows, cols)`; tokens = rows·cols.
    pub grid: (usize, usize),
    /// Token dimension `patch²·C`.
    pub dim: usize,
    /// Channels of the last tail convolution.
    pub out_channels: usize,
    /// Pixel-shuffle factor after the tail (1 = none).
    pub shuffle: usize,
}

impl BranchGeom {
    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub target: BranchGeom,
    /// Absent for early fusion.
    pub aux: Option<BranchGeom>,
}

impl MTransConfig {
    /// Small configuration used by the gradient and training checks.
    pub fn toy() -> Self {
        MTransConfig {
            channels: 4,
            patch: 8,
            encoders: 2,
            heads: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<Geometry> {
        let bad = |m: String| Err(Error::config(m));
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return bad("height, width, channels, heads and ffn_mult must be positive".into());
        }
        if self.patch < 2 || self.patch % 2 != 0 {
            return bad(format!("patch side must be even and ≥ 2, got {}", self.patch));
        }
        match self.task {
            Task::Reconstruction if self.scale != 1 => {
                return bad(format!("reconstruction requires scale 1, got {}", self.scale))
            }
            Task::SuperResolution if self.scale < 2 || !self.scale.is_power_of_two() => {
                return bad(format!("super-resolution scale must be a power of two ≥ 2, got {}", self.scale))
            }
            _ => {}
        }
        if self.height % self.scale != 0 || self.width % self.scale != 0 {
            return bad(format!("scale {} does not divide {}×{}", self.scale, self.height, self.width));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.eps_ln > 0.0) {
            return bad(format!("layer-norm eps must be positive, got {}", self.eps_ln));
        }

        let (h, w, s, c) = (self.height, self.width, self.scale, self.channels);
        let branch = |height: usize, width: usize, in_channels: usize, patch: usize, out_channels: usize, shuffle: usize| -> Result<BranchGeom> {
            if height % patch != 0 || width % patch != 0 {
                return Err(Error::config(format!(
                    "patch side {patch} does not divide feature map {height}×{width}"
                )));
            }
            let dim = patch * patch * c;
            if dim % self.heads != 0 {
                return Err(Error::config(format!(
                    "token dim {dim} is not divisible by {} heads",
                    self.heads
                )));
            }
            Ok(BranchGeom {
                height,
                width,
                in_channels,
                patch,
                grid: (height / patch, width / patch),
                dim,
                out_channels,
                shuffle,
            })
        };

        let (small, large) = (self.patch / 2, self.patch);
        let target = |patch| branch(h / s, w / s, 1, patch, s * s, s);
        let aux = |patch| branch(h, w, 1, patch, 1, 1);
        Ok(match self.variant {
            FusionVariant::MTrans => Geometry {
                target: target(small)?,
                aux: Some(aux(large)?),
            },
            FusionVariant::SingleScaleLarge => Geometry {
                target: target(large)?,
                aux: Some(aux(large)?),
            },
            FusionVariant::SingleScaleSmall => Geometry {
                target: target(small)?,
                aux: Some(aux(small)?),
            },
            FusionVariant::EarlyFusion => Geometry {
                target: branch(h, w, 2, small, 2, 1)?,
                aux: None,
            },
        })
    }

    /// Flat `key = value` form, in a fixed order.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("channels", self.channels.to_string()),
            ("patch", self.patch.to_string()),
            ("encoders", self.encoders.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_mult", self.ffn_mult.to_string()),
            ("task", self.task.to_string()),
            ("scale", self.scale.to_string()),
            ("alpha", self.alpha.to_string()),
            ("eps_ln", self.eps_ln.to_string()),
            ("variant", self.variant.to_string()),
            ("loss_reduction", self.loss_reduction.to_string()),
        ]
    }

    /// Sets one field from its text form. Returns `Ok(false)` for keys this
    /// struct does not own.
    pub fn set_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "height" => self.height = parse_num(key, value)?,
            "width" => self.width = parse_num(key, value)?,
            "channels" => self.channels = parse_num(key, value)?,
            "patch" => self.patch = parse_num(key, value)?,
            "encoders" => self.encoders = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "ffn_mult" => self.ffn_mult = parse_num(key, value)?,
            "task" => self.task = value.parse()?,
            "scale" => self.scale = parse_num(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "eps_ln" => self.eps_ln = parse_num(key, value)?,
            "variant" => self.variant = value.parse()?,
            "loss_reduction" => self.loss_reduction = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Expected size of the target-branch input image.
    pub fn target_input_dims(&self) -> (usize, usize) {
        (self.height / self.scale, self.width / self.scale)
    }
}

pub(crate) fn parse_num<N: FromStr>(key: &str, value: &str) -> Result<N> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}
