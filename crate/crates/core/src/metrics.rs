//! Image quality metrics (PSNR, SSIM, NMSE) and the paired t-test.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

fn check_dims<T: Scalar>(op: &'static str, x: &Image<T>, r: &Image<T>) -> Result<()> {
    if x.dims() != r.dims() {
        let (a, b) = (x.dims(), r.dims());
        return Err(Error::shape(op, &[a.0, a.1], &[b.0, b.1]));
    }
    Ok(())
}

fn mse<T: Scalar>(x: &Image<T>, r: &Image<T>) -> f64 {
    let n = x.data().len().max(1) as f64;
    x.data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        / n
}

/// `10·log10(peak² / MSE)` in dB; `+∞` when the images are identical.
pub fn psnr<T: Scalar>(x: &Image<T>, reference: &Image<T>, peak: f64) -> Result<f64> {
    check_dims("psnr", x, reference)?;
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("psnr peak must be positive, got {peak}")));
    }
    let m = mse(x, reference);
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// `‖x − ref‖² / ‖ref‖²`.
pub fn nmse<T: Scalar>(x: &Image<T>, reference: &Image<T>) -> Result<f64> {
    check_dims("nmse", x, reference)?;
    let den: f64 = reference.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum();
    if den == 0.0 {
        return Err(Error::invalid("nmse reference image is all zero"));
    }
    let num: f64 = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
        .sum();
    Ok(num / den)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of a row-major image.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|t| taps[t] * img[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|t| taps[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained Gaussian windows (11×11, σ = 1.5).
pub fn ssim<T: Scalar>(x: &Image<T>, reference: &Image<T>, peak: f64) -> Result<f64> {
    ssim_with(x, reference, SSIM_WINDOW, SSIM_SIGMA, peak)
}

pub fn ssim_with<T: Scalar>(
    x: &Image<T>,
    reference: &Image<T>,
    window: usize,
    sigma: f64,
    peak: f64,
) -> Result<f64> {
    check_dims("ssim", x, reference)?;
    let (h, w) = x.dims();
    if h < window || w < window || window == 0 {
        return Err(Error::invalid(format!(
            "ssim needs images of at least {window}×{window}, got {h}×{w}"
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("ssim peak must be positive, got {peak}")));
    }
    let a: Vec<f64> = x.data().iter().map(|v| v.to_f64_lossy()).collect();
    let b: Vec<f64> = reference.data().iter().map(|v| v.to_f64_lossy()).collect();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p * q).collect();
    let taps = gaussian_taps(window, sigma);
    let (mu_a, mu_b) = (filter_valid(&a, h, w, &taps), filter_valid(&b, h, w, &taps));
    let (e_aa, e_bb, e_ab) = (
        filter_valid(&aa, h, w, &taps),
        filter_valid(&bb, h, w, &taps),
        filter_valid(&ab, h, w, &taps),
    );
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean, population standard deviation and raw per-sample values.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Stat {
    /// Aggregates finite values; infinite entries are kept in `values` but
    /// excluded from `mean` and `std`.
    pub fn from_values(values: Vec<f64>) -> Self {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.len() < values.len() {
            log::warn!(
                "{} non-finite metric value(s) excluded from the mean",
                values.len() - finite.len()
            );
        }
        let n = finite.len();
        let (mean, std) = if n == 0 {
            (f64::NAN, 0.0)
        } else {
            let mean = finite.iter().sum::<f64>() / n as f64;
            let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            (mean, var.sqrt())
        };
        Stat { mean, std, values }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricSummary {
    pub psnr: Stat,
    pub ssim: Stat,
    pub nmse: Stat,
}

/// Per-sample metrics of `outputs` against `references`, each with its own peak
/// (the reference maximum).
pub fn summarize<T: Scalar>(outputs: &[Image<T>], references: &[Image<T>]) -> Result<MetricSummary> {
    if outputs.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} outputs for {} references",
            outputs.len(),
            references.len()
        )));
    }
    let mut p = Vec::with_capacity(outputs.len());
    let mut s = Vec::with_capacity(outputs.len());
    let mut n = Vec::with_capacity(outputs.len());
    for (x, r) in outputs.iter().zip(references) {
        let peak = r.max().to_f64_lossy();
        p.push(psnr(x, r, peak)?);
        s.push(ssim(x, r, peak)?);
        n.push(nmse(x, r)?);
    }
    Ok(MetricSummary {
        psnr: Stat::from_values(p),
        ssim: Stat::from_values(s),
        nmse: Stat::from_values(n),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub df: f64,
    pub mean_diff: f64,
    /// Set when every difference is identical (zero sample variance).
    pub degenerate: bool,
}

/// Paired Student's t-test on `a − b`.
///
/// With zero-variance differences the statistic is undefined; the result is
/// flagged `degenerate` with `t = 0, p = 1` for all-zero differences and
/// `t = ±∞, p = 0` otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "paired t-test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = (n - 1) as f64;
    if var == 0.0 {
        let (t, p) = if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        };
        return Ok(TTest {
            t,
            p,
            df,
            mean_diff: mean,
            degenerate: true,
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest {
        t,
        p,
        df,
        mean_diff: mean,
        degenerate: false,
    })
}
