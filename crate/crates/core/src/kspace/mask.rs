//! Cartesian column undersampling masks.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, uniform};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Random,
    Equispaced,
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(MaskKind::Random),
            "equispaced" => Ok(MaskKind::Equispaced),
            other => Err(Error::config(format!("unknown mask kind {other:?}"))),
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::Random => "random",
            MaskKind::Equispaced => "equispaced",
        })
    }
}

/// Fully sampled center fraction used for each standard acceleration.
pub fn default_center_fraction(acceleration: u32) -> Option<f64> {
    match acceleration {
        4 => Some(0.08),
        6 => Some(0.06),
        8 => Some(0.04),
        _ => None,
    }
}

/// Column mask replicated over every row of k-space.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    pub columns: Vec<bool>,
    pub kind: MaskKind,
    pub acceleration: u32,
    pub center_fraction: f64,
    pub seed: u64,
}

impl SamplingMask {
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn count(&self) -> usize {
        self.columns.iter().filter(|&&c| c).count()
    }

    /// All-true mask (no undersampling).
    pub fn full(width: usize) -> Self {
        SamplingMask {
            columns: vec![true; width],
            kind: MaskKind::Equispaced,
            acceleration: 1,
            center_fraction: 1.0,
            seed: 0,
        }
    }

    pub fn from_columns(columns: Vec<bool>) -> Self {
        let w = columns.len().max(1);
        let n = columns.iter().filter(|&&c| c).count().max(1);
        SamplingMask {
            columns,
            kind: MaskKind::Random,
            acceleration: (w / n) as u32,
            center_fraction: 0.0,
            seed: 0,
        }
    }

    /// Rank-1 tensor of 0/1 values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.columns.len()], |i| {
            if self.columns[i] {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Inverse of [`SamplingMask::to_tensor`]; any nonzero entry counts as sampled.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        if t.rank() != 1 {
            return Err(Error::invalid(format!(
                "mask must be a vector, got shape {:?}",
                t.shape()
            )));
        }
        Ok(Self::from_columns(t.data().iter().map(|&v| v != T::zero()).collect()))
    }
}

/// Indices of the `⌈center_fraction·W⌉` central columns.
pub fn center_columns(width: usize, center_fraction: f64) -> Range<usize> {
    let n = ((center_fraction * width as f64).ceil() as usize).min(width);
    let start = width / 2 - n / 2;
    start..start + n
}

/// Builds a mask with `⌊W/R⌋` sampled columns: the center block plus the
/// remaining budget spread over the other columns, uniformly at random or at
/// even spacing with a seeded phase offset.
pub fn make_mask(
    kind: MaskKind,
    acceleration: u32,
    center_fraction: f64,
    width: usize,
    seed: u64,
) -> Result<SamplingMask> {
    if acceleration < 2 {
        return Err(Error::config(format!("acceleration must be ≥ 2, got {acceleration}")));
    }
    if !(center_fraction > 0.0 && center_fraction < 1.0) {
        return Err(Error::config(format!(
            "center fraction must lie in (0, 1), got {center_fraction}"
        )));
    }
    if center_fraction * (width as f64) < 1.0 {
        return Err(Error::config(format!(
            "center fraction {center_fraction} keeps no column of width {width}"
        )));
    }
    let center = center_columns(width, center_fraction);
    let budget = width / acceleration as usize;
    if 1.0 / acceleration as f64 <= center_fraction || budget <= center.len() {
        return Err(Error::config(format!(
            "sampling budget {budget} (1/{acceleration} of {width}) leaves nothing beyond the {}-column center block",
            center.len()
        )));
    }

    let mut columns = vec![false; width];
    for c in center.clone() {
        columns[c] = true;
    }
    let candidates: Vec<usize> = (0..width).filter(|c| !center.contains(c)).collect();
    let extra = budget - center.len();
    let mut rng = rng_from_seed(seed);
    match kind {
        MaskKind::Random => {
            for i in sample(&mut rng, candidates.len(), extra) {
                columns[candidates[i]] = true;
            }
        }
        MaskKind::Equispaced => {
            let spacing = candidates.len() as f64 / extra as f64;
            let offset = uniform(&mut rng, 0.0, spacing);
            for i in 0..extra {
                let pos = ((offset + i as f64 * spacing).floor() as usize).min(candidates.len() - 1);
                columns[candidates[pos]] = true;
            }
        }
    }

    Ok(SamplingMask {
        columns,
        kind,
        acceleration,
        center_fraction,
        seed,
    })
}
