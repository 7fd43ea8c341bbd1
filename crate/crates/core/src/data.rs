//! Synthetic paired-modality phantoms and degraded training samples.
//!
//! Both modalities are rendered from one set of ellipses. Modality A sums
//! the ellipse intensities; modality B inverts that contrast inside the body
//! outline and adds a smooth modality-specific bias:
//!
//! ```text
//! A = clamp(Σ intensities, 0, 1)
//! B = clamp(1 − 0.7·A + 0.3·bias, 0, 1)   inside the body ellipse, 0 outside
//! ```
//!
//! Each image is then divided by its maximum. B plays the target modality
//! and A the fully sampled auxiliary one.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::mtt::read_tensor;
use crate::kspace::{
    degrade_lr, fft2, make_mask, normalize, undersample, zero_fill, ComplexGrid, MaskKind, SamplingMask,
};
use crate::model::Task;
use crate::rng::{derive_seed, rng_from_seed, uniform, SeededRng, Stream};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    /// Center in normalized coordinates, `[-1, 1]` across the image.
    pub cx: f64,
    pub cy: f64,
    /// Semi-axes in normalized units.
    pub a: f64,
    pub b: f64,
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of the ellipse count; the first ellipse is the body outline.
    pub ellipses_min: usize,
    pub ellipses_max: usize,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(height: usize, width: usize, seed: u64) -> Self {
        PhantomSpec {
            height,
            width,
            ellipses_min: 4,
            ellipses_max: 8,
            seed,
        }
    }
}

fn draw_ellipses(rng: &mut SeededRng, count: usize) -> Vec<Ellipse> {
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return out;
    }
    out.push(Ellipse {
        cx: uniform(rng, -0.05, 0.05),
        cy: uniform(rng, -0.05, 0.05),
        a: uniform(rng, 0.7, 0.88),
        b: uniform(rng, 0.78, 0.92),
        angle: uniform(rng, -0.3, 0.3),
        intensity: uniform(rng, 0.3, 0.45),
    });
    for _ in 1..count {
        out.push(Ellipse {
            cx: uniform(rng, -0.45, 0.45),
            cy: uniform(rng, -0.45, 0.45),
            a: uniform(rng, 0.08, 0.3),
            b: uniform(rng, 0.08, 0.3),
            angle: uniform(rng, 0.0, std::f64::consts::PI),
            intensity: if rng.random::<bool>() {
                uniform(rng, 0.2, 0.5)
            } else {
                uniform(rng, -0.25, -0.1)
            },
        });
    }
    out
}

fn normalized_or_zero(img: Image<f64>) -> Image<f64> {
    match normalize(&img) {
        Ok((n, _)) => n,
        Err(_) => img,
    }
}

/// Modality pair `(A, B)` for sample `index`, both in `[0, 1]`.
pub fn make_synthetic_pair(spec: &PhantomSpec, index: u64) -> (Image<f64>, Image<f64>) {
    let mut rng = rng_from_seed(derive_seed(spec.seed, Stream::Data, index));
    let lo = spec.ellipses_min.min(spec.ellipses_max);
    let count = rng.random_range(lo..=spec.ellipses_max.max(lo));
    let ellipses = draw_ellipses(&mut rng, count);

    // Low-frequency bias field in [0, 1], unique to modality B.
    let fx = uniform(&mut rng, 0.5, 2.0);
    let fy = uniform(&mut rng, 0.5, 2.0);
    let (px, py) = (uniform(&mut rng, 0.0, 6.3), uniform(&mut rng, 0.0, 6.3));

    let (h, w) = (spec.height, spec.width);
    let coord = |i: usize, n: usize| 2.0 * (i as f64 + 0.5) / n as f64 - 1.0;
    let mut a = Image::zeros(h, w);
    let mut b = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (coord(x, w), coord(y, h));
            let field: f64 = ellipses
                .iter()
                .filter(|e| e.contains(u, v))
                .map(|e| e.intensity)
                .sum();
            let av = field.clamp(0.0, 1.0);
            a.data_mut()[y * w + x] = av;
            if ellipses.first().is_some_and(|body| body.contains(u, v)) {
                let bias = 0.5 + 0.5 * (fx * u + px).sin() * (fy * v + py).cos();
                b.data_mut()[y * w + x] = (1.0 - 0.7 * av + 0.3 * bias).clamp(0.0, 1.0);
            }
        }
    }
    (normalized_or_zero(a), normalized_or_zero(b))
}

/// Forward-difference gradient magnitude.
pub fn gradient_magnitude(img: &Image<f64>) -> Image<f64> {
    let (h, w) = img.dims();
    Image::from_fn(h, w, |y, x| {
        let gx = if x + 1 < w { img.get(y, x + 1) - img.get(y, x) } else { 0.0 };
        let gy = if y + 1 < h { img.get(y + 1, x) - img.get(y, x) } else { 0.0 };
        (gx * gx + gy * gy).sqrt()
    })
}

/// Pearson correlation of two equally sized images (0 when either is flat).
pub fn correlation(a: &Image<f64>, b: &Image<f64>) -> f64 {
    let n = a.data().len() as f64;
    let ma = a.data().iter().sum::<f64>() / n;
    let mb = b.data().iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Mean gradient-magnitude correlation between the modalities over
/// samples `0..n`; a check that both share their structure.
pub fn structure_correlation(spec: &PhantomSpec, n: u64) -> f64 {
    let total: f64 = (0..n)
        .map(|i| {
            let (a, b) = make_synthetic_pair(spec, i);
            correlation(&gradient_magnitude(&a), &gradient_magnitude(&b))
        })
        .sum();
    total / n.max(1) as f64
}

/// What the auxiliary branch receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxMode {
    /// The fully sampled modality A.
    Paired,
    /// Seeded uniform noise in `[0, 1]`.
    Noise,
    /// The degraded target input, upsampled to full size.
    #[serde(rename = "self")]
    SelfInput,
}

impl FromStr for AuxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(AuxMode::Paired),
            "noise" => Ok(AuxMode::Noise),
            "self" => Ok(AuxMode::SelfInput),
            other => Err(Error::config(format!("unknown aux mode {other:?} (expected paired|noise|self)"))),
        }
    }
}

impl fmt::Display for AuxMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuxMode::Paired => "paired",
            AuxMode::Noise => "noise",
            AuxMode::SelfInput => "self",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub phantom: PhantomSpec,
    pub task: Task,
    /// SR factor (ignored for reconstruction).
    pub scale: usize,
    pub mask_kind: MaskKind,
    /// 1 means a full mask (no undersampling).
    pub acceleration: u32,
    pub center_fraction: f64,
    pub aux_mode: AuxMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradedSample<T> {
    pub index: u64,
    /// `(H/s)×(W/s)`, normalized to max 1.
    pub target_input: Image<T>,
    pub target_gt: Image<T>,
    pub aux_input: Image<T>,
    /// Reconstruction target of the auxiliary branch (its own input).
    pub aux_gt: Image<T>,
    pub mask: Option<SamplingMask>,
}

impl DatasetSpec {
    pub fn sample_mask(&self, index: u64) -> Result<SamplingMask> {
        if self.acceleration <= 1 {
            return Ok(SamplingMask::full(self.phantom.width));
        }
        make_mask(
            self.mask_kind,
            self.acceleration,
            self.center_fraction,
            self.phantom.width,
            derive_seed(self.phantom.seed, Stream::Mask, index),
        )
    }

    pub fn sample<T: Scalar>(&self, index: u64) -> Result<DegradedSample<T>> {
        let (a, b) = make_synthetic_pair(&self.phantom, index);
        let (h, w) = a.dims();
        let k = fft2(&ComplexGrid::from_real(&b))?;
        let (degraded, mask) = match self.task {
            Task::Reconstruction => {
                let mask = self.sample_mask(index)?;
                (zero_fill(&undersample(&k, &mask)?)?, Some(mask))
            }
            Task::SuperResolution => (degrade_lr(&k, self.scale)?, None),
        };
        let target_input = normalized_or_zero(degraded);
        let aux = match self.aux_mode {
            AuxMode::Paired => a,
            AuxMode::Noise => {
                let mut rng = rng_from_seed(derive_seed(self.phantom.seed, Stream::Noise, index));
                Image::from_fn(h, w, |_, _| rng.random::<f64>())
            }
            AuxMode::SelfInput => target_input.upsample_nearest(w / target_input.width()),
        };
        Ok(DegradedSample {
            index,
            target_input: target_input.cast(),
            target_gt: b.cast(),
            aux_input: aux.cast(),
            aux_gt: aux.cast(),
            mask,
        })
    }
}

/// Samples for the given indices.
pub fn build_dataset<T: Scalar>(spec: &DatasetSpec, indices: impl IntoIterator<Item = u64>) -> Result<Vec<DegradedSample<T>>> {
    let samples: Vec<_> = indices.into_iter().map(|i| spec.sample(i)).collect::<Result<_>>()?;
    if samples.is_empty() {
        return Err(Error::invalid("dataset must hold at least one sample"));
    }
    Ok(samples)
}

/// Loads a stack of real images from an `.mtt` tensor of shape `[N×H×W]`
/// (or a single `[H×W]` image), for users with their own data.
pub fn load_volume<T: Scalar>(path: &Path) -> Result<Vec<Image<T>>> {
    let t = read_tensor::<T>(path)?;
    match *t.shape() {
        [h, w] => Ok(vec![Image::new(h, w, t.into_data())?]),
        [n, h, w] => {
            let data = t.into_data();
            (0..n)
                .map(|i| Image::new(h, w, data[i * h * w..(i + 1) * h * w].to_vec()))
                .collect()
        }
        ref other => Err(Error::format(
            path,
            format!("expected an [N×H×W] or [H×W] volume, got shape {other:?}"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(aux_mode: AuxMode) -> DatasetSpec {
        DatasetSpec {
            phantom: PhantomSpec::new(32, 32, 11),
            task: Task::Reconstruction,
            scale: 1,
            mask_kind: MaskKind::Random,
            acceleration: 4,
            center_fraction: 0.08,
            aux_mode,
        }
    }

    #[test]
    fn pairs_are_deterministic_and_normalized() {
        let p = PhantomSpec::new(32, 32, 5);
        let (a1, b1) = make_synthetic_pair(&p, 3);
        let (a2, b2) = make_synthetic_pair(&p, 3);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_ne!(make_synthetic_pair(&p, 4).0, a1);
        for img in [&a1, &b1] {
            assert!(img.min() >= 0.0);
            assert_eq!(img.max(), 1.0);
        }
    }

    #[test]
    fn zero_ellipses_give_constant_background() {
        let p = PhantomSpec {
            ellipses_min: 0,
            ellipses_max: 0,
            ..PhantomSpec::new(16, 16, 1)
        };
        let (a, b) = make_synthetic_pair(&p, 0);
        assert!(a.data().iter().all(|&v| v == a.data()[0]));
        assert!(b.data().iter().all(|&v| v == b.data()[0]));
    }

    #[test]
    fn modalities_share_structure() {
        let p = PhantomSpec::new(32, 32, 2);
        assert!(structure_correlation(&p, 20) > 0.5);
    }

    #[test]
    fn full_mask_reconstruction_input_is_ground_truth() {
        let s = DatasetSpec {
            acceleration: 1,
            ..spec(AuxMode::Paired)
        };
        let d: Vec<DegradedSample<f64>> = build_dataset(&s, 0..3).unwrap();
        for x in &d {
            assert!(x.target_input.max_abs_diff(&x.target_gt) < 1e-10);
        }
    }

    #[test]
    fn sr_shapes_and_self_aux() {
        let s = DatasetSpec {
            task: Task::SuperResolution,
            scale: 2,
            aux_mode: AuxMode::SelfInput,
            ..spec(AuxMode::Paired)
        };
        let x: DegradedSample<f32> = s.sample(0).unwrap();
        assert_eq!(x.target_input.dims(), (16, 16));
        assert_eq!(x.aux_input, x.target_input.upsample_nearest(2));
        assert!(x.mask.is_none());
    }

    #[test]
    fn aux_modes_differ_only_in_aux() {
        let paired: DegradedSample<f64> = spec(AuxMode::Paired).sample(1).unwrap();
        let noise: DegradedSample<f64> = spec(AuxMode::Noise).sample(1).unwrap();
        assert_eq!(paired.target_input, noise.target_input);
        assert_eq!(paired.target_gt, noise.target_gt);
        assert_ne!(paired.aux_input, noise.aux_input);
        assert!(noise.aux_input.data().iter().all(|v| (0.0..1.0).contains(v)));
        let again: DegradedSample<f64> = spec(AuxMode::Noise).sample(1).unwrap();
        assert_eq!(again, noise);
    }

    #[test]
    fn dataset_size_and_errors() {
        let d: Vec<DegradedSample<f64>> = build_dataset(&spec(AuxMode::Paired), 0..8).unwrap();
        assert_eq!(d.len(), 8);
        assert!(build_dataset::<f64>(&spec(AuxMode::Paired), 0..0).is_err());
    }

    #[test]
    fn volume_loader_reads_stacks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mtt");
        let t = crate::tensor::Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        crate::io::mtt::write_tensor(&path, &t).unwrap();
        let v: Vec<Image<f64>> = load_volume(&path).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v[1].get(0, 0), 12.0);
    }
}
