//! Box-Cox power transform with a negative-data shift and grid MLE for λ.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// `|λ|` at or below this uses the logarithmic branch.
pub const LAMBDA_ZERO_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxCoxError {
    #[error("Box-Cox input must be positive, got {0}")]
    NonPositive(f64),
    #[error("shifted input {x} - x_min + shift is not positive")]
    OutsideDomain { x: f64 },
    #[error("need at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("constant input")]
    ConstantInput,
    #[error("non-finite input")]
    NonFinite,
    #[error("invalid shift {0}: must be positive")]
    BadShift(f64),
    #[error("invalid lambda grid [{lo}, {hi}] step {step}")]
    BadGrid { lo: f64, hi: f64, step: f64 },
}

/// Fitted shifted transform `BC((x - x_min + shift), λ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCoxFit {
    pub lambda: f64,
    pub x_min: f64,
    pub shift: f64,
}

impl BoxCoxFit {
    pub fn new(lambda: f64, x_min: f64, shift: f64) -> Result<Self, BoxCoxError> {
        if !(shift > 0.0) || !shift.is_finite() {
            return Err(BoxCoxError::BadShift(shift));
        }
        Ok(Self {
            lambda,
            x_min,
            shift,
        })
    }

    fn shifted(&self, x: f64) -> f64 {
        x - self.x_min + self.shift
    }
}

/// Candidate λ values `lo, lo + step, ..., hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        Self {
            lo: -2.0,
            hi: 2.0,
            step: 0.05,
        }
    }
}

impl LambdaGrid {
    pub fn validate(&self) -> Result<(), BoxCoxError> {
        let ok = self.lo.is_finite()
            && self.hi.is_finite()
            && self.step.is_finite()
            && self.step > 0.0
            && self.hi >= self.lo;
        if ok {
            Ok(())
        } else {
            Err(BoxCoxError::BadGrid {
                lo: self.lo,
                hi: self.hi,
                step: self.step,
            })
        }
    }

    pub fn values(&self) -> Vec<f64> {
        let count = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1;
        (0..count)
            .map(|k| {
                let l = self.lo + k as f64 * self.step;
                // land exactly on zero when the grid crosses it
                if l.abs() < 1e-12 {
                    0.0
                } else {
                    l
                }
            })
            .collect()
    }
}

fn power(y: f64, lambda: f64) -> f64 {
    if lambda.abs() <= LAMBDA_ZERO_EPS {
        y.ln()
    } else {
        (lambda * y.ln()).exp_m1() / lambda
    }
}

/// `(x^λ - 1) / λ`, or `ln x` for `λ ≈ 0`.
pub fn bc_transform(x: f64, lambda: f64) -> Result<f64, BoxCoxError> {
    if !(x > 0.0) {
        return Err(BoxCoxError::NonPositive(x));
    }
    Ok(power(x, lambda))
}

/// The shifted transform applied to `x - x_min + shift`.
pub fn bc_transform_shifted(x: f64, fit: &BoxCoxFit) -> Result<f64, BoxCoxError> {
    let y = fit.shifted(x);
    if !(y > 0.0) {
        return Err(BoxCoxError::OutsideDomain { x });
    }
    Ok(power(y, fit.lambda))
}

/// `d/dx` of [`bc_transform_shifted`] for a fixed fit.
pub fn bc_shifted_slope(x: f64, fit: &BoxCoxFit) -> f64 {
    fit.shifted(x).powf(fit.lambda - 1.0)
}

/// Shift used for fitting: `1e-4 * max(1, |x_min|) + 1e-6`.
pub fn default_shift(x_min: f64) -> f64 {
    1e-4 * x_min.abs().max(1.0) + 1e-6
}

/// Box-Cox profile log-likelihood
/// `-(m/2) ln var(BC(y)) + (λ - 1) Σ ln y` with `y = x - x_min + shift`.
pub fn profile_log_likelihood(data: &[f64], lambda: f64, x_min: f64, shift: f64) -> f64 {
    let m = data.len() as f64;
    let ys: Vec<f64> = data.iter().map(|x| x - x_min + shift).collect();
    let transformed: Vec<f64> = ys.iter().map(|&y| power(y, lambda)).collect();
    let mean = transformed.iter().sum::<f64>() / m;
    let var = transformed.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / m;
    let log_jacobian: f64 = ys.iter().map(|y| y.ln()).sum();
    -0.5 * m * var.ln() + (lambda - 1.0) * log_jacobian
}

fn check_data(data: &[f64]) -> Result<(f64, f64), BoxCoxError> {
    if data.len() < 2 {
        return Err(BoxCoxError::TooFewValues(data.len()));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(BoxCoxError::NonFinite);
    }
    let min = data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Err(BoxCoxError::ConstantInput);
    }
    Ok((min, max))
}

/// Maximum-likelihood λ over the default grid `[-2, 2]` step `0.05`.
pub fn estimate_lambda(data: &[f64]) -> Result<BoxCoxFit, BoxCoxError> {
    estimate_lambda_on_grid(data, &LambdaGrid::default())
}

/// Grid MLE for λ. Ties go to the λ closest to 1.
pub fn estimate_lambda_on_grid(data: &[f64], grid: &LambdaGrid) -> Result<BoxCoxFit, BoxCoxError> {
    grid.validate()?;
    let (x_min, _) = check_data(data)?;
    let shift = default_shift(x_min);

    let mut candidates = grid.values();
    candidates.sort_by(|a, b| (a - 1.0).abs().total_cmp(&(b - 1.0).abs()));
    let mut best = (f64::NEG_INFINITY, 1.0);
    for lambda in candidates {
        let ll = profile_log_likelihood(data, lambda, x_min, shift);
        if ll > best.0 {
            best = (ll, lambda);
        }
    }
    BoxCoxFit::new(best.1, x_min, shift)
}

/// Output of [`training_transform`]: transformed values with `x_min` added back,
/// and the elementwise slope `d out / d in` under the (frozen) fit.
#[derive(Clone, Debug)]
pub struct TrainingTransform {
    pub fit: BoxCoxFit,
    pub values: Vec<f64>,
    pub slopes: Vec<f64>,
}

/// Fits λ on `values`, transforms each element and adds `x_min` to the result.
pub fn training_transform(
    values: &[f64],
    grid: &LambdaGrid,
) -> Result<TrainingTransform, BoxCoxError> {
    let fit = estimate_lambda_on_grid(values, grid)?;
    let out = values
        .iter()
        .map(|&x| bc_transform_shifted(x, &fit).map(|t| t + fit.x_min))
        .collect::<Result<Vec<_>, _>>()?;
    let slopes = values.iter().map(|&x| bc_shifted_slope(x, &fit)).collect();
    Ok(TrainingTransform {
        fit,
        values: out,
        slopes,
    })
}

pub fn bc_training_transform(values: &[f64]) -> Result<Vec<f64>, BoxCoxError> {
    Ok(training_transform(values, &LambdaGrid::default())?.values)
}
