//! Closed-form diagonal-Gaussian arithmetic.
//!
//! All posteriors `q(z|·)` and the prior `p(z)` are diagonal Gaussians stored
//! as (mean, log-variance). Fusion of several posteriors with the prior is a
//! product of experts: precisions add, means combine precision-weighted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-variances are clamped to this range on construction so that
/// precision-space fusion cannot overflow.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// A diagonal Gaussian over a `dim()`-dimensional latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    /// Build a Gaussian, clamping log-variances to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::invalid("DiagGaussian dimension must be >= 1"));
        }
        if mean.len() != log_var.len() {
            return Err(Error::invalid(format!(
                "mean length {} != log_var length {}",
                mean.len(),
                log_var.len()
            )));
        }
        if mean.iter().chain(log_var.iter()).any(|x| !x.is_finite()) {
            return Err(Error::invalid("DiagGaussian fields must be finite"));
        }
        let log_var = log_var
            .into_iter()
            .map(|lv| lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            .collect();
        Ok(Self { mean, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| lv.exp()).collect()
    }
}

/// `N(0, I)` in `dim` dimensions.
pub fn standard_prior(dim: usize) -> Result<DiagGaussian> {
    if dim < 1 {
        return Err(Error::invalid("prior dimension must be >= 1"));
    }
    DiagGaussian::new(vec![0.0; dim], vec![0.0; dim])
}

/// `KL(q || N(0, I))`, summed over dimensions.
pub fn kl_to_standard(q: &DiagGaussian) -> f64 {
    q.mean
        .iter()
        .zip(&q.log_var)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// `mean + exp(log_var / 2) * noise`.
pub fn reparam_sample(q: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != q.dim() {
        return Err(Error::invalid(format!(
            "noise length {} != dimension {}",
            noise.len(),
            q.dim()
        )));
    }
    Ok(q.mean
        .iter()
        .zip(&q.log_var)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Product-of-experts fusion of `experts` with `prior`.
///
/// Per dimension, precisions add: `lambda = lambda_prior + sum_v lambda_v`,
/// the fused variance is `1 / lambda` and the fused mean is the
/// precision-weighted mean. An empty expert list returns the prior.
pub fn poe_fuse(experts: &[DiagGaussian], prior: &DiagGaussian) -> Result<DiagGaussian> {
    let dim = prior.dim();
    for (i, e) in experts.iter().enumerate() {
        if e.dim() != dim {
            return Err(Error::invalid(format!(
                "expert {i} has dimension {} but prior has {dim}",
                e.dim()
            )));
        }
    }
    let mut mean = vec![0.0; dim];
    let mut log_var = vec![0.0; dim];
    for d in 0..dim {
        let prior_precision = (-prior.log_var[d]).exp();
        let mut precision = prior_precision;
        let mut weighted_mean = prior_precision * prior.mean[d];
        for e in experts {
            let p = (-e.log_var[d]).exp();
            precision += p;
            weighted_mean += p * e.mean[d];
        }
        mean[d] = weighted_mean / precision;
        log_var[d] = -precision.ln();
    }
    DiagGaussian::new(mean, log_var)
}

/// Exact log-density of `x` under `q`.
pub fn log_density(q: &DiagGaussian, x: &[f64]) -> Result<f64> {
    if x.len() != q.dim() {
        return Err(Error::invalid(format!(
            "point length {} != dimension {}",
            x.len(),
            q.dim()
        )));
    }
    const LN_2PI: f64 = 1.8378770664093453; // ln(2 * pi)
    Ok(q.mean
        .iter()
        .zip(&q.log_var)
        .zip(x)
        .map(|((&m, &lv), &xi)| {
            let diff = xi - m;
            -0.5 * (LN_2PI + lv + diff * diff * (-lv).exp())
        })
        .sum())
}
