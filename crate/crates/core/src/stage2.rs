//! Stage 2: site-level regression of `θ̂1k` on `{1, β̂1k, β̂2k, α̂1k}`, the
//! cumulative-ATE estimate and its improper (fixed `ᾱ1`) variance.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::MultisiteDataset;
use crate::error::{Error, Result};
use crate::regression::{fit_ols, Matrix};
use crate::stage1::{stage1, Stage1Result};

pub const MIN_SITES: usize = 5;
pub const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Fit {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub theta_v: f64,
    /// Order: γ1, γ2, γ3, θV.
    pub coef_covariance: Matrix,
    pub alpha1_bar: f64,
    pub beta1_bar: f64,
    pub beta2_bar: f64,
    pub k_used: usize,
    pub site_ids: Vec<String>,
    pub residuals: Vec<f64>,
}

impl Stage2Fit {
    pub fn coefficients(&self) -> [f64; 4] {
        [self.gamma1, self.gamma2, self.gamma3, self.theta_v]
    }

    /// One row per site: the regressors, response and residual.
    pub fn write_site_csv<W: Write>(&self, stage1: &Stage1Result, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "site_id",
            "theta1_hat",
            "beta1_hat",
            "beta2_hat",
            "alpha1_hat",
            "residual",
        ])?;
        for (s, r) in stage1.sites.iter().zip(&self.residuals) {
            w.write_record([
                s.site_id.clone(),
                s.theta1_hat.to_string(),
                s.beta1_hat.to_string(),
                s.beta2_hat.to_string(),
                s.alpha1_hat.to_string(),
                r.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteResult {
    pub point: f64,
    pub improper_variance: f64,
    pub improper_ci95: Interval,
    pub bca_ci95: Option<Interval>,
    pub effect_size: Option<f64>,
}

pub fn stage2(stage1: &Stage1Result) -> Result<Stage2Fit> {
    let k = stage1.sites.len();
    if k < MIN_SITES {
        return Err(Error::TooFewSites(k));
    }
    let col = |f: fn(&crate::stage1::SiteEffects) -> f64| stage1.sites.iter().map(f).collect::<Vec<f64>>();
    let b1 = col(|s| s.beta1_hat);
    let b2 = col(|s| s.beta2_hat);
    let a1 = col(|s| s.alpha1_hat);
    let theta = col(|s| s.theta1_hat);
    let design = Matrix::from_columns(&[vec![1.0; k], b1.clone(), b2.clone(), a1])?;
    let fit = fit_ols(&design, &theta)?;
    if !fit.full_rank {
        return Err(Error::CollinearDesign { rank: fit.rank });
    }
    let c = &fit.coefficients;
    Ok(Stage2Fit {
        gamma1: c[0],
        gamma2: c[1],
        gamma3: c[2],
        theta_v: c[3],
        coef_covariance: fit.coef_covariance,
        alpha1_bar: stage1.alpha1_bar,
        beta1_bar: b1.iter().sum::<f64>() / k as f64,
        beta2_bar: b2.iter().sum::<f64>() / k as f64,
        k_used: k,
        site_ids: stage1.sites.iter().map(|s| s.site_id.clone()).collect(),
        residuals: fit.residuals,
    })
}

fn contrast(alpha1_bar: f64) -> [f64; 4] {
    [1.0, 1.0, 1.0, alpha1_bar]
}

/// `c'Σc` with `c = (1, 1, 1, ᾱ1)`, treating `ᾱ1` as fixed.
pub fn improper_variance(fit: &Stage2Fit) -> f64 {
    fit.coef_covariance.quadratic_form(&contrast(fit.alpha1_bar)).max(0.0)
}

pub fn ate_point(gamma: [f64; 4], alpha1_bar: f64) -> f64 {
    gamma[0] + gamma[1] + gamma[2] + gamma[3] * alpha1_bar
}

pub fn cumulative_ate(fit: &Stage2Fit) -> AteResult {
    let point = ate_point(fit.coefficients(), fit.alpha1_bar);
    let improper_variance = improper_variance(fit);
    let half = Z_975 * improper_variance.sqrt();
    AteResult {
        point,
        improper_variance,
        improper_ci95: Interval {
            lower: point - half,
            upper: point + half,
        },
        bca_ci95: None,
        effect_size: None,
    }
}

/// ITT minus cumulative ATE: `γ2(β1 − 1) + γ3(β2 − 1)`.
pub fn itt_minus_ate(gamma2: f64, gamma3: f64, beta1: f64, beta2: f64) -> f64 {
    gamma2 * (beta1 - 1.0) + gamma3 * (beta2 - 1.0)
}

/// Pooled within-site standard deviation of `Y` in the control arm.
pub fn pooled_control_sd(dataset: &MultisiteDataset) -> Option<f64> {
    let (mut ss, mut df) = (0.0, 0usize);
    for site in dataset.sites() {
        let ys: Vec<f64> = site
            .y()
            .iter()
            .zip(site.z())
            .filter(|(_, &z)| !z)
            .map(|(y, _)| *y)
            .collect();
        if ys.len() < 2 {
            continue;
        }
        let m = ys.iter().sum::<f64>() / ys.len() as f64;
        ss += ys.iter().map(|y| (y - m).powi(2)).sum::<f64>();
        df += ys.len() - 1;
    }
    (df > 0 && ss > 0.0).then(|| (ss / df as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub stage1: Stage1Result,
    pub fit: Stage2Fit,
    pub ate: AteResult,
}

/// Both stages plus the effect size, without bootstrap.
pub fn estimate(dataset: &MultisiteDataset, adjusted: bool) -> Result<Estimate> {
    let s1 = stage1(dataset, adjusted)?;
    let fit = stage2(&s1)?;
    let mut ate = cumulative_ate(&fit);
    ate.effect_size = pooled_control_sd(dataset).map(|sd| ate.point / sd);
    Ok(Estimate { stage1: s1, fit, ate })
}

/// Point estimate only; the form consumed by the bootstrap.
pub fn ate_estimator(adjusted: bool) -> impl Fn(&MultisiteDataset) -> Result<f64> + Sync + Send + Copy {
    move |ds| {
        let fit = stage2(&stage1(ds, adjusted)?)?;
        Ok(ate_point(fit.coefficients(), fit.alpha1_bar))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage1::SiteEffects;
    use proptest::prelude::*;

    fn effects(id: &str, a1: f64, b1: f64, b2: f64, t1: f64) -> SiteEffects {
        SiteEffects {
            site_id: id.into(),
            alpha0_hat: 0.0,
            alpha1_hat: a1,
            beta0_hat: b2 - b1,
            beta1_hat: b1,
            beta2_hat: b2,
            theta0_hat: 0.0,
            theta1_hat: t1,
            alpha1_se: 0.0,
            beta1_se: 0.0,
            theta1_se: 0.0,
            n_control: 2,
            n_treated: 2,
            adjusted: false,
            out_of_unit_range: false,
        }
    }

    fn stage1_of(sites: Vec<SiteEffects>) -> Stage1Result {
        let alpha1_bar = sites.iter().map(|s| s.alpha1_hat).sum::<f64>() / sites.len() as f64;
        Stage1Result {
            sites,
            alpha1_bar,
            excluded_sites: vec![],
            adjusted: false,
        }
    }

    fn fit_with(cov: Matrix, gamma: [f64; 4], alpha1_bar: f64) -> Stage2Fit {
        Stage2Fit {
            gamma1: gamma[0],
            gamma2: gamma[1],
            gamma3: gamma[2],
            theta_v: gamma[3],
            coef_covariance: cov,
            alpha1_bar,
            beta1_bar: 0.0,
            beta2_bar: 0.0,
            k_used: 5,
            site_ids: vec![],
            residuals: vec![],
        }
    }

    #[test]
    fn noiseless_six_sites_recover_coefficients() {
        let rows = [
            (3.0, 0.2, 0.6),
            (5.0, 0.5, 0.7),
            (8.0, 0.1, 0.9),
            (1.0, 0.7, 0.75),
            (6.0, 0.3, 0.5),
            (4.0, 0.6, 0.95),
        ];
        let sites = rows
            .iter()
            .enumerate()
            .map(|(i, &(a1, b1, b2))| effects(&format!("s{i}"), a1, b1, b2, 10.0 + 15.0 * b1 - 5.0 * b2 + 0.2 * a1))
            .collect();
        let fit = stage2(&stage1_of(sites)).unwrap();
        for (got, want) in fit.coefficients().iter().zip([10.0, 15.0, -5.0, 0.2]) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        assert!(fit.residuals.iter().all(|r| r.abs() < 1e-9));
    }

    #[test]
    fn full_compliance_is_collinear() {
        let sites = (0..6)
            .map(|i| effects(&format!("s{i}"), i as f64, 1.0, 1.0, 2.0 * i as f64 + 1.0))
            .collect();
        assert!(matches!(stage2(&stage1_of(sites)), Err(Error::CollinearDesign { .. })));
    }

    #[test]
    fn too_few_sites() {
        let sites = (0..4)
            .map(|i| effects(&format!("s{i}"), i as f64, 0.1 * i as f64, 0.5, 1.0))
            .collect();
        assert!(matches!(stage2(&stage1_of(sites)), Err(Error::TooFewSites(4))));
    }

    #[test]
    fn point_examples() {
        assert!((ate_point([10.0, 15.0, -5.0, 0.2], 5.0) - 21.0).abs() < 1e-12);
        assert_eq!(ate_point([1.0, 1.0, 1.0, 1.0], 0.0), 3.0);
        assert_eq!(
            ate_point([1.0, 2.0, 3.0, 0.0], 123.0),
            ate_point([1.0, 2.0, 3.0, 0.0], -7.0)
        );
    }

    #[test]
    fn improper_variance_examples() {
        let id = Matrix::identity(4);
        assert_eq!(improper_variance(&fit_with(id.clone(), [0.0; 4], 0.0)), 3.0);
        assert_eq!(improper_variance(&fit_with(id, [0.0; 4], 2.0)), 7.0);

        let s = Matrix::from_row_major(
            4,
            4,
            &[
                2.0, 0.3, -0.1, 0.05, //
                0.3, 1.5, 0.2, -0.02, //
                -0.1, 0.2, 1.1, 0.01, //
                0.05, -0.02, 0.01, 0.04,
            ],
        )
        .unwrap();
        // Hand expansion with a = 5: the 3×3 block sum, plus 2a times the sum of
        // the last column's first three entries, plus a² times the corner.
        let block = 2.0 + 1.5 + 1.1 + 2.0 * (0.3 - 0.1 + 0.2);
        let cross = 2.0 * 5.0 * (0.05 - 0.02 + 0.01);
        let corner = 25.0 * 0.04;
        let got = improper_variance(&fit_with(s, [0.0; 4], 5.0));
        assert!((got - (block + cross + corner)).abs() < 1e-12);
    }

    #[test]
    fn ci_is_symmetric_about_point() {
        let r = cumulative_ate(&fit_with(Matrix::identity(4), [10.0, 15.0, -5.0, 0.2], 5.0));
        let half = Z_975 * (3.0f64 + 25.0).sqrt();
        assert!((r.improper_ci95.lower - (21.0 - half)).abs() < 1e-12);
        assert!((r.improper_ci95.upper - (21.0 + half)).abs() < 1e-12);
        assert!(r.improper_ci95.contains(r.point));
    }

    #[test]
    fn itt_gap_examples() {
        assert_eq!(itt_minus_ate(15.0, -5.0, 1.0, 1.0), 0.0);
        assert!((itt_minus_ate(15.0, -5.0, 0.9, 0.95) + 1.25).abs() < 1e-12);
        assert_eq!(itt_minus_ate(0.0, 0.0, 0.3, 0.8), 0.0);
    }

    proptest! {
        #[test]
        fn site_permutation_leaves_fit_unchanged(
            raw in prop::collection::vec((0.0f64..10.0, 0.0f64..1.0, 0.0f64..1.0, -20.0f64..40.0), 7..15),
            shift in 1usize..7,
        ) {
            let sites: Vec<SiteEffects> = raw.iter().enumerate()
                .map(|(i, &(a, b1, b2, t))| effects(&format!("s{i}"), a, b1, b2, t)).collect();
            let mut rotated = sites.clone();
            rotated.rotate_left(shift % sites.len());
            let (Ok(f), Ok(g)) = (stage2(&stage1_of(sites)), stage2(&stage1_of(rotated))) else {
                return Ok(());
            };
            let (vf, vg) = (improper_variance(&f), improper_variance(&g));
            prop_assert!((vf - vg).abs() <= 1e-8 * (1.0 + vf.abs()));
            let scale = 1.0 + f.residuals.iter().map(|r| r.abs()).fold(0.0, f64::max);
            prop_assert!(f.residuals.iter().sum::<f64>().abs() <= 1e-8 * scale * f.residuals.len() as f64);
            let cov = &f.coef_covariance;
            for i in 0..4 {
                prop_assert!(cov[(i, i)] >= 0.0);
                for j in 0..4 {
                    prop_assert!((cov[(i, j)] - cov[(j, i)]).abs() <= 1e-10 * (1.0 + cov[(i, j)].abs()));
                }
            }
        }
    }
}
