//! Loss-landscape measurements: Hessian-vector products and diagonals by
//! central differences of exact gradients, robust condition numbers,
//! directional smoothness along optimizer steps, gradient-noise statistics
//! and the affine smoothness-vs-gradient-norm fit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};
use crate::linalg::{dot, norm2};
use crate::model::{grad_batch, GradientSet, ModelParams};
use crate::rng::LabRng;
use crate::stats;
use crate::tasks::{TaskBatch, TaskSource};

/// Minimum number of records [`fit_generalized_smoothness`] accepts.
pub const MIN_FIT_RECORDS: usize = 10;

/// Default finite-difference step: `1e-4 · max(1, ‖θ‖)`.
pub fn fd_step(params: &ModelParams) -> f64 {
    1e-4 * params.norm().max(1.0)
}

fn check_h(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        invalid(format!("finite-difference step must be positive, got {h}"))
    }
}

/// Gradients at `θ ± h·u` for a unit direction `u`.
fn gradient_pair(params: &ModelParams, batch: &TaskBatch, unit: &[f64], h: f64) -> Result<(GradientSet, GradientSet)> {
    let plus = grad_batch(&params.offset(unit, h), batch)?;
    let minus = grad_batch(&params.offset(unit, -h), batch)?;
    Ok((plus, minus))
}

fn unit_direction(v: &[f64], len: usize) -> Result<(Vec<f64>, f64)> {
    if v.len() != len {
        return invalid(format!("direction has {} entries, params have {len}", v.len()));
    }
    let norm = norm2(v);
    if !(norm > 0.0) || !norm.is_finite() {
        return invalid("direction must be nonzero and finite");
    }
    Ok((v.iter().map(|x| x / norm).collect(), norm))
}

/// `∇²f(θ)·v` as `(∇f(θ + h v̂) − ∇f(θ − h v̂)) / (2h) · ‖v‖`.
pub fn hvp(params: &ModelParams, batch: &TaskBatch, v: &[f64], h: f64) -> Result<GradientSet> {
    check_h(h)?;
    let (unit, norm) = unit_direction(v, params.len())?;
    let (plus, minus) = gradient_pair(params, batch, &unit, h)?;
    let scale = norm / (2.0 * h);
    let values = plus
        .as_slice()
        .iter()
        .zip(minus.as_slice())
        .map(|(a, b)| (a - b) * scale)
        .collect();
    GradientSet::from_vec(*params.layout(), values)
}

/// Central-difference estimate of every diagonal Hessian entry, two
/// gradient evaluations per coordinate.
pub fn hessian_diagonal(params: &ModelParams, batch: &TaskBatch, h: f64) -> Result<Vec<f64>> {
    check_h(h)?;
    (0..params.len())
        .into_par_iter()
        .map(|i| {
            let mut plus = params.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[i] -= h;
            let gp = grad_batch(&plus, batch)?.as_slice()[i];
            let gm = grad_batch(&minus, batch)?.as_slice()[i];
            Ok((gp - gm) / (2.0 * h))
        })
        .collect()
}

/// Outcome of `max / median` over a Hessian diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ConditionNumber {
    Value { value: f64 },
    /// The median diagonal entry is not positive.
    NotComputable { max: f64, median: f64 },
}

impl ConditionNumber {
    pub fn value(&self) -> Option<f64> {
        match *self {
            ConditionNumber::Value { value } => Some(value),
            ConditionNumber::NotComputable { .. } => None,
        }
    }
}

pub fn robust_condition_number(diag: &[f64]) -> Result<ConditionNumber> {
    if diag.is_empty() {
        return invalid("robust condition number of an empty diagonal");
    }
    let max = diag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let median = stats::median(diag)?;
    Ok(if median > 0.0 {
        ConditionNumber::Value { value: max / median }
    } else {
        ConditionNumber::NotComputable { max, median }
    })
}

/// One directional-smoothness probe along a step `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionalProbe {
    /// `sᵀ ∇²f s / ‖s‖²`.
    pub smoothness: f64,
    /// Norm of the midpoint of the two probe gradients, a second-order
    /// accurate estimate of `‖∇f(θ)‖` on the probe batch.
    pub grad_norm: f64,
}

pub fn directional_probe(params: &ModelParams, batch: &TaskBatch, step: &[f64], h: f64) -> Result<DirectionalProbe> {
    check_h(h)?;
    let (unit, _) = unit_direction(step, params.len())?;
    let (plus, minus) = gradient_pair(params, batch, &unit, h)?;
    let diff: Vec<f64> = plus.as_slice().iter().zip(minus.as_slice()).map(|(a, b)| a - b).collect();
    let mid: Vec<f64> = plus.as_slice().iter().zip(minus.as_slice()).map(|(a, b)| 0.5 * (a + b)).collect();
    let smoothness = dot(&unit, &diff) / (2.0 * h);
    if !smoothness.is_finite() {
        return Err(Error::NonFinite("directional smoothness".into()));
    }
    Ok(DirectionalProbe {
        smoothness,
        grad_norm: norm2(&mid),
    })
}

pub fn directional_smoothness(params: &ModelParams, batch: &TaskBatch, step: &[f64], h: f64) -> Result<f64> {
    directional_probe(params, batch, step, h).map(|p| p.smoothness)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub iteration: usize,
    pub hessian_diag: Vec<f64>,
    pub robust_condition_number: ConditionNumber,
}

impl CurvatureReport {
    pub fn measure(params: &ModelParams, batch: &TaskBatch, iteration: usize) -> Result<Self> {
        let hessian_diag = hessian_diagonal(params, batch, fd_step(params))?;
        let robust_condition_number = robust_condition_number(&hessian_diag)?;
        Ok(Self {
            iteration,
            hessian_diag,
            robust_condition_number,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub sample_count: usize,
    pub batch_size: usize,
    pub noise_norms: Vec<f64>,
    pub gaussian: GaussianFit,
    /// `(gaussian_quantile, empirical_quantile)`, ascending.
    pub qq_pairs: Vec<(f64, f64)>,
    /// NaN when every norm is identical.
    pub excess_kurtosis: f64,
    /// Least-squares slope through the top tenth of the q-q pairs.
    pub top_decile_slope: Option<f64>,
    /// The fitted Gaussian has zero spread, so the q-q pairs compare
    /// against a point mass at the mean.
    pub point_mass: bool,
}

impl NoiseReport {
    pub fn from_norms(noise_norms: Vec<f64>, batch_size: usize) -> Result<Self> {
        let k = noise_norms.len();
        if k < 2 {
            return invalid("noise report needs at least two samples");
        }
        let gaussian = GaussianFit {
            mean: stats::mean(&noise_norms),
            std: stats::std_dev(&noise_norms),
        };
        let point_mass = !(gaussian.std > 0.0);
        let reference = (!point_mass).then(|| Normal::new(gaussian.mean, gaussian.std).expect("positive std"));
        let empirical = stats::sorted(&noise_norms);
        let qq_pairs: Vec<(f64, f64)> = empirical
            .iter()
            .enumerate()
            .map(|(i, &e)| {
                let g = match &reference {
                    Some(n) => n.inverse_cdf((i as f64 + 0.5) / k as f64),
                    None => gaussian.mean,
                };
                (g, e)
            })
            .collect();
        let top = (k / 10).max(2);
        let tail = &qq_pairs[k - top..];
        let top_decile_slope = if point_mass {
            None
        } else {
            let (x, y): (Vec<f64>, Vec<f64>) = tail.iter().copied().unzip();
            Some(stats::fit_line(&x, &y)?.slope)
        };
        Ok(Self {
            sample_count: k,
            batch_size,
            excess_kurtosis: stats::excess_kurtosis(&noise_norms),
            noise_norms,
            gaussian,
            qq_pairs,
            top_decile_slope,
            point_mass,
        })
    }
}

/// Draws `k` minibatch gradients of size `b`, subtracts their mean and
/// reports the distribution of the residual norms.
pub fn sample_gradient_noise<S: TaskSource + ?Sized>(
    params: &ModelParams,
    source: &S,
    k: usize,
    b: usize,
    rng: &mut LabRng,
) -> Result<NoiseReport> {
    if k < 2 || b == 0 {
        return invalid(format!("noise sampling needs K >= 2 and B >= 1, got K = {k}, B = {b}"));
    }
    let mut grads = Vec::with_capacity(k);
    for _ in 0..k {
        let batch = source.sample(b, rng)?;
        grads.push(grad_batch(params, &batch)?.into_vec());
    }
    let residuals = noise_residuals(&grads);
    let norms = residuals.iter().map(|r| norm2(r)).collect();
    NoiseReport::from_norms(norms, b)
}

/// `g_i − ḡ` for every sample. The mean is accumulated as an offset from
/// the first sample, so identical samples give exactly zero residuals.
pub fn noise_residuals(grads: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let first = &grads[0];
    let mut shift = vec![0.0; first.len()];
    for g in grads {
        for ((s, x), f) in shift.iter_mut().zip(g).zip(first) {
            *s += x - f;
        }
    }
    let k = grads.len() as f64;
    let mean: Vec<f64> = first.iter().zip(&shift).map(|(f, s)| f + s / k).collect();
    grads
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessRecord {
    pub iteration: usize,
    pub grad_norm: f64,
    pub directional_smoothness: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessTrace {
    pub records: Vec<SmoothnessRecord>,
}

/// `smoothness ≈ L0 + L1·‖∇f‖`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedSmoothness {
    pub l0: f64,
    pub l1: f64,
    /// `None` when every recorded smoothness is identical.
    pub r_squared: Option<f64>,
    /// Pearson correlation between gradient norm and smoothness.
    pub correlation: Option<f64>,
}

pub fn fit_generalized_smoothness(trace: &SmoothnessTrace) -> Result<GeneralizedSmoothness> {
    let got = trace.records.len();
    if got < MIN_FIT_RECORDS {
        return Err(Error::InsufficientData {
            needed: MIN_FIT_RECORDS,
            got,
        });
    }
    let x: Vec<f64> = trace.records.iter().map(|r| r.grad_norm).collect();
    let y: Vec<f64> = trace.records.iter().map(|r| r.directional_smoothness).collect();
    let fit = stats::fit_line(&x, &y)?;
    let correlation = fit.r_squared.map(|r2| r2.max(0.0).sqrt().copysign(fit.slope));
    Ok(GeneralizedSmoothness {
        l0: fit.intercept,
        l1: fit.slope,
        r_squared: fit.r_squared,
        correlation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_number_examples() {
        assert_eq!(robust_condition_number(&[4.0, 1.0, 2.0]).unwrap().value(), Some(2.0));
        assert_eq!(robust_condition_number(&[1.0; 4]).unwrap().value(), Some(1.0));
        assert!(matches!(
            robust_condition_number(&[3.0, -1.0, -2.0]).unwrap(),
            ConditionNumber::NotComputable { .. }
        ));
        // even length: median is the midpoint of 3 and -1
        assert_eq!(robust_condition_number(&[3.0, -1.0]).unwrap().value(), Some(3.0));
        assert!(robust_condition_number(&[]).is_err());
    }

    #[test]
    fn generalized_fit_examples() {
        let line = SmoothnessTrace {
            records: (0..12)
                .map(|i| SmoothnessRecord {
                    iteration: i * 10,
                    grad_norm: i as f64 * 0.5,
                    directional_smoothness: 2.0 + 3.0 * (i as f64 * 0.5),
                })
                .collect(),
        };
        let fit = fit_generalized_smoothness(&line).unwrap();
        assert!((fit.l0 - 2.0).abs() < 1e-10 && (fit.l1 - 3.0).abs() < 1e-10);
        assert!((fit.r_squared.unwrap() - 1.0).abs() < 1e-10);

        let mut flat = line.clone();
        flat.records.iter_mut().for_each(|r| r.directional_smoothness = 4.0);
        let fit = fit_generalized_smoothness(&flat).unwrap();
        assert_eq!((fit.l0, fit.l1, fit.r_squared), (4.0, 0.0, None));

        flat.records.truncate(9);
        assert!(matches!(
            fit_generalized_smoothness(&flat),
            Err(Error::InsufficientData { needed: 10, got: 9 })
        ));
    }

    #[test]
    fn point_mass_noise() {
        let report = NoiseReport::from_norms(vec![0.0; 5], 8).unwrap();
        assert!(report.point_mass);
        assert!(report.qq_pairs.iter().all(|&(g, e)| g == 0.0 && e == 0.0));
        assert!(report.top_decile_slope.is_none());
        assert!(NoiseReport::from_norms(vec![1.0], 8).is_err());
    }
}
