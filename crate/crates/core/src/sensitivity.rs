//! Bias of the cumulative-effect estimand when the posttreatment confounder
//! `V` is left out of the site-level regression.
//!
//! Dropping `α1k` from `θ1k = γ1 + γ2 β1k + γ3 β2k + θV α1k + εk` moves its
//! contribution onto the projection of `α1k` on `{1, β1k, β2k}`. With
//! `Σ = [[Var β1, Cov(β1,β2)], [Cov(β1,β2), Var β2]]` and
//! `c = (Cov(β1,α1), Cov(β2,α1))`, the slope shifts are `θV Σ⁻¹ c`:
//!
//! ```text
//! γ2′ − γ2 = θV (Var β2 · Cov(β1,α1) − Cov(β1,β2) · Cov(β2,α1)) / det Σ
//! γ3′ − γ3 = θV (Var β1 · Cov(β2,α1) − Cov(β1,β2) · Cov(β1,α1)) / det Σ
//! γ1′ − γ1 = (γ2 − γ2′) β1 + (γ3 − γ3′) β2 + θV α1
//! ```
//!
//! and the implied effect `γ1′ + γ2′ + γ3′` misses the target by
//! `(γ2′ − γ2)(1 − β1) + (γ3′ − γ3)(1 − β2)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regression::{fit_ols, Matrix};
use crate::stage1::Stage1Result;
use crate::stage2::MIN_SITES;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityInputs {
    pub theta_v: f64,
    pub cov_b1_a1: f64,
    pub cov_b2_a1: f64,
    pub cov_b1_b2: f64,
    pub var_b1: f64,
    pub var_b2: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Mean of `α1k`; only the intercept shift needs it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha1: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmittedVBias {
    /// `γ1′ − γ1`; absent when `alpha1` was not supplied.
    pub d_gamma1: Option<f64>,
    /// `γ2′ − γ2`.
    pub d_gamma2: f64,
    /// `γ3′ − γ3`.
    pub d_gamma3: f64,
    /// `(γ1′ + γ2′ + γ3′) − δ_ATE`.
    pub total_bias: f64,
}

impl SensitivityInputs {
    pub fn determinant(&self) -> f64 {
        self.var_b1 * self.var_b2 - self.cov_b1_b2 * self.cov_b1_b2
    }
}

pub fn omitted_v_bias(inputs: &SensitivityInputs) -> Result<OmittedVBias> {
    let det = inputs.determinant();
    if !(det > 0.0 && det.is_finite()) || inputs.var_b1 <= 0.0 || inputs.var_b2 <= 0.0 {
        return Err(Error::SingularMomentMatrix(det));
    }
    let t = inputs.theta_v;
    let d_gamma2 = t * (inputs.var_b2 * inputs.cov_b1_a1 - inputs.cov_b1_b2 * inputs.cov_b2_a1) / det;
    let d_gamma3 = t * (inputs.var_b1 * inputs.cov_b2_a1 - inputs.cov_b1_b2 * inputs.cov_b1_a1) / det;
    let d_gamma1 = inputs
        .alpha1
        .map(|a| -d_gamma2 * inputs.beta1 - d_gamma3 * inputs.beta2 + t * a);
    // `+ 0.0` turns a signed zero into +0 so zero conditions print as 0.
    Ok(OmittedVBias {
        d_gamma1: d_gamma1.map(|g| g + 0.0),
        d_gamma2: d_gamma2 + 0.0,
        d_gamma3: d_gamma3 + 0.0,
        total_bias: d_gamma2 * (1.0 - inputs.beta1) + d_gamma3 * (1.0 - inputs.beta2) + 0.0,
    })
}

/// Moments of site-level `(α1k, β1k, β2k)` triples, with divisor `n`.
pub fn moments_from_sites(theta_v: f64, sites: &[[f64; 3]]) -> SensitivityInputs {
    let n = sites.len() as f64;
    let mean = |j: usize| sites.iter().map(|s| s[j]).sum::<f64>() / n;
    let (ma, m1, m2) = (mean(0), mean(1), mean(2));
    let cov =
        |f: &dyn Fn(&[f64; 3]) -> f64, g: &dyn Fn(&[f64; 3]) -> f64| sites.iter().map(|s| f(s) * g(s)).sum::<f64>() / n;
    let a = |s: &[f64; 3]| s[0] - ma;
    let b1 = |s: &[f64; 3]| s[1] - m1;
    let b2 = |s: &[f64; 3]| s[2] - m2;
    SensitivityInputs {
        theta_v,
        cov_b1_a1: cov(&b1, &a),
        cov_b2_a1: cov(&b2, &a),
        cov_b1_b2: cov(&b1, &b2),
        var_b1: cov(&b1, &b1),
        var_b2: cov(&b2, &b2),
        beta1: m1,
        beta2: m2,
        alpha1: Some(ma),
    }
}

/// Moments of the true site parameters of a simulated study.
pub fn population_moments(truths: &[crate::simgen::SiteTruth]) -> SensitivityInputs {
    let sites: Vec<[f64; 3]> = truths.iter().map(|t| [t.alpha1, t.beta1, t.beta2]).collect();
    let theta_v = truths.first().map_or(crate::simgen::THETA_V, |t| t.theta_v);
    moments_from_sites(theta_v, &sites)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmittedVFit {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    /// Order: γ1′, γ2′, γ3′.
    pub coef_covariance: Matrix,
    pub k_used: usize,
}

impl OmittedVFit {
    /// `γ1′ + γ2′ + γ3′`, the effect implied when `V` is ignored.
    pub fn implied_ate(&self) -> f64 {
        self.gamma1 + self.gamma2 + self.gamma3
    }
}

/// OLS of `θ̂1k` on `{1, β̂1k, β̂2k}`.
pub fn stage2_omitting_v(stage1: &Stage1Result) -> Result<OmittedVFit> {
    let k = stage1.sites.len();
    if k < MIN_SITES {
        return Err(Error::TooFewSites(k));
    }
    let b1: Vec<f64> = stage1.sites.iter().map(|s| s.beta1_hat).collect();
    let b2: Vec<f64> = stage1.sites.iter().map(|s| s.beta2_hat).collect();
    let theta: Vec<f64> = stage1.sites.iter().map(|s| s.theta1_hat).collect();
    let fit = fit_ols(&Matrix::from_columns(&[vec![1.0; k], b1, b2])?, &theta)?;
    if !fit.full_rank {
        return Err(Error::CollinearDesign { rank: fit.rank });
    }
    Ok(OmittedVFit {
        gamma1: fit.coefficients[0],
        gamma2: fit.coefficients[1],
        gamma3: fit.coefficients[2],
        coef_covariance: fit.coef_covariance,
        k_used: k,
    })
}
