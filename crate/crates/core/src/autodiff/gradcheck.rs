//! Central finite-difference gradient checking.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::rng_from_seed;
use crate::scalar::DType;
use crate::tensor::Tensor;

/// One evaluation of the objective under test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub value: f64,
    /// See [`crate::autodiff::Tape::kink_signature`]; use 0 for smooth objectives.
    pub kink_signature: u64,
}

impl Probe {
    pub fn smooth(value: f64) -> Self {
        Probe {
            value,
            kink_signature: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates checked per parameter (all of them when the tensor is smaller).
    pub coords_per_param: usize,
    pub seed: u64,
    /// Multiple of the difference quotient's rounding noise,
    /// `|f|·ε_mach / eps`, used as the smallest denominator of the relative
    /// error. Gradients below it are compared on an absolute scale.
    pub noise_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            coords_per_param: 64,
            seed: 0,
            noise_floor: 1e5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose difference stencil crossed a non-smooth point.
    pub excluded: usize,
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    /// Analytic and numeric values at `worst_index`.
    pub worst_pair: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub eps: f64,
    pub precision: DType,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

/// `|a − n| / max(|a|, |n|, floor, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor).max(1e-12)
}

/// Compares `analytic` gradients against `(f(p+eps) − f(p−eps)) / 2eps`.
///
/// Coordinates are visited in a seeded random order until
/// `coords_per_param` of them have been checked. A coordinate is skipped
/// when either side of its stencil lands on a different smooth piece than
/// the base point (its kink signature changes).
pub fn grad_check<F>(
    f: F,
    params: &ParamStore<f64>,
    analytic: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<Probe>,
{
    if analytic.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let base = f(params)?;
    let floor = opts.noise_floor * base.value.abs() * f64::EPSILON / opts.eps;
    let mut work = params.clone();
    let mut rng = rng_from_seed(opts.seed);
    let mut report = Vec::with_capacity(params.len());

    for (pi, grad) in analytic.iter().enumerate() {
        let id = ParamId(pi);
        if grad.shape() != params.get(id).shape() {
            return Err(Error::shape("grad_check", grad.shape(), params.get(id).shape()));
        }
        let mut order: Vec<usize> = (0..grad.len()).collect();
        order.shuffle(&mut rng);

        let mut check = ParamCheck {
            name: params.name(id).to_string(),
            checked: 0,
            excluded: 0,
            max_rel_err: 0.0,
            worst_index: None,
            worst_pair: None,
        };
        for &c in &order {
            if check.checked >= opts.coords_per_param {
                break;
            }
            let orig = work.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = orig + opts.eps;
            let plus = f(&work)?;
            work.get_mut(id).data_mut()[c] = orig - opts.eps;
            let minus = f(&work)?;
            work.get_mut(id).data_mut()[c] = orig;

            if plus.kink_signature != base.kink_signature
                || minus.kink_signature != base.kink_signature
            {
                check.excluded += 1;
                continue;
            }
            let numeric = (plus.value - minus.value) / (2.0 * opts.eps);
            let err = relative_error(grad.data()[c], numeric, floor);
            if err > check.max_rel_err || check.worst_index.is_none() {
                check.max_rel_err = check.max_rel_err.max(err);
                check.worst_index = Some(c);
                check.worst_pair = Some((grad.data()[c], numeric));
            }
            check.checked += 1;
        }
        report.push(check);
    }

    Ok(GradCheckReport {
        params: report,
        eps: opts.eps,
        precision: DType::F64,
    })
}
