//! Stage 1: per-site reduced-form ITT effects of `Z` on `V`, `D` and `Y`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{MultisiteDataset, SiteData};
use crate::error::{Error, Result};
use crate::regression::{fit_ols_multi, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteEffects {
    pub site_id: String,
    pub alpha0_hat: f64,
    pub alpha1_hat: f64,
    pub beta0_hat: f64,
    pub beta1_hat: f64,
    pub beta2_hat: f64,
    pub theta0_hat: f64,
    pub theta1_hat: f64,
    pub alpha1_se: f64,
    pub beta1_se: f64,
    pub theta1_se: f64,
    pub n_control: usize,
    pub n_treated: usize,
    pub adjusted: bool,
    /// Set when an adjusted fit puts `beta0_hat` or `beta2_hat` outside [0, 1].
    pub out_of_unit_range: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedSite {
    pub site_id: String,
    pub reason: String,
}

/// Spread of the per-site compliance effects. Reported, never acted upon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplianceDiagnostic {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub negative: usize,
    /// Sites with `|beta1_hat| < WEAK_COMPLIANCE_EFFECT`.
    pub weak: usize,
}

pub const WEAK_COMPLIANCE_EFFECT: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Result {
    pub sites: Vec<SiteEffects>,
    pub alpha1_bar: f64,
    pub excluded_sites: Vec<ExcludedSite>,
    pub adjusted: bool,
}

impl Stage1Result {
    fn from_parts(sites: Vec<SiteEffects>, excluded_sites: Vec<ExcludedSite>, adjusted: bool) -> Result<Self> {
        if sites.is_empty() {
            let why = excluded_sites
                .iter()
                .map(|e| format!("{}: {}", e.site_id, e.reason))
                .collect::<Vec<_>>()
                .join("; ");
            return Err(Error::NoEligibleSites(if why.is_empty() {
                "dataset is empty".into()
            } else {
                why
            }));
        }
        let alpha1_bar = sites.iter().map(|s| s.alpha1_hat).sum::<f64>() / sites.len() as f64;
        Ok(Self {
            sites,
            alpha1_bar,
            excluded_sites,
            adjusted,
        })
    }

    pub fn compliance_diagnostic(&self) -> ComplianceDiagnostic {
        let b: Vec<f64> = self.sites.iter().map(|s| s.beta1_hat).collect();
        ComplianceDiagnostic {
            min: b.iter().copied().fold(f64::INFINITY, f64::min),
            max: b.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: b.iter().sum::<f64>() / b.len() as f64,
            negative: b.iter().filter(|&&x| x < 0.0).count(),
            weak: b.iter().filter(|&&x| x.abs() < WEAK_COMPLIANCE_EFFECT).count(),
        }
    }

    /// One row per included site.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for s in &self.sites {
            w.serialize(s)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn require_v(dataset: &MultisiteDataset) -> Result<()> {
    if dataset.has_v() {
        Ok(())
    } else {
        Err(Error::MissingIntermediateOutcome)
    }
}

fn arm_moments(values: &[f64], z: &[bool]) -> [(f64, f64); 2] {
    // (mean, sum of squared deviations) for z = 0 and z = 1.
    let mut out = [(0.0, 0.0); 2];
    for (arm, slot) in out.iter_mut().enumerate() {
        let sel = || {
            values
                .iter()
                .zip(z)
                .filter(move |(_, &t)| usize::from(t) == arm)
                .map(|(v, _)| *v)
        };
        let n = sel().count() as f64;
        let mean = sel().sum::<f64>() / n;
        let ss = sel().map(|v| (v - mean).powi(2)).sum::<f64>();
        *slot = (mean, ss);
    }
    out
}

/// Closed-form OLS on `{1, Z}`: the intercept is the control mean, the slope
/// the difference in arm means. Returns both arm means and the slope's SE.
fn two_group(values: &[f64], z: &[bool], n0: usize, n1: usize) -> (f64, f64, f64) {
    let [(m0, ss0), (m1, ss1)] = arm_moments(values, z);
    let df = (n0 + n1).saturating_sub(2);
    let s2 = if df > 0 { (ss0 + ss1) / df as f64 } else { 0.0 };
    let se = (s2 * (1.0 / n0 as f64 + 1.0 / n1 as f64)).sqrt();
    (m0, m1, se)
}

fn site_unadjusted(site: &SiteData) -> SiteEffects {
    let (n0, n1) = (site.n_control(), site.n_treated());
    let z = site.z();
    let v = site.v().expect("checked by caller");
    let d: Vec<f64> = site.d().iter().map(|&b| f64::from(u8::from(b))).collect();
    let (a0, a1, a1_se) = two_group(v, z, n0, n1);
    let (b0, b2, b1_se) = two_group(&d, z, n0, n1);
    let (t0, t1, t1_se) = two_group(site.y(), z, n0, n1);
    SiteEffects {
        site_id: site.id().to_string(),
        alpha0_hat: a0,
        alpha1_hat: a1 - a0,
        beta0_hat: b0,
        beta1_hat: b2 - b0,
        beta2_hat: b2,
        theta0_hat: t0,
        theta1_hat: t1 - t0,
        alpha1_se: a1_se,
        beta1_se: b1_se,
        theta1_se: t1_se,
        n_control: n0,
        n_treated: n1,
        adjusted: false,
        out_of_unit_range: false,
    }
}

pub fn stage1_unadjusted(dataset: &MultisiteDataset) -> Result<Stage1Result> {
    require_v(dataset)?;
    let mut sites = Vec::with_capacity(dataset.site_count());
    let mut excluded = Vec::new();
    for site in dataset.sites() {
        match arm_shortfall(site, MultisiteDataset::MIN_ARM_SIZE) {
            Some(reason) => excluded.push(ExcludedSite {
                site_id: site.id().to_string(),
                reason,
            }),
            None => sites.push(site_unadjusted(site)),
        }
    }
    Stage1Result::from_parts(sites, excluded, false)
}

fn arm_shortfall(site: &SiteData, required: usize) -> Option<String> {
    let (n0, n1) = (site.n_control(), site.n_treated());
    (n0 < required || n1 < required)
        .then(|| format!("arm sizes ({n0} control, {n1} treated) below the required {required} per arm"))
}

/// Design `{1, Z, X − X̄, (X − X̄)·Z}` with X̄ the site mean over both arms.
pub fn adjusted_design(site: &SiteData) -> Matrix {
    let n = site.len();
    let p = site.p();
    let means = site.covariate_means();
    let mut columns = Vec::with_capacity(2 + 2 * p);
    columns.push(vec![1.0; n]);
    columns.push(site.z().iter().map(|&t| f64::from(u8::from(t))).collect());
    let centered: Vec<Vec<f64>> = (0..p)
        .map(|j| (0..n).map(|i| site.x_row(i)[j] - means[j]).collect())
        .collect();
    for c in &centered {
        columns.push(c.clone());
    }
    for c in &centered {
        columns.push(c.iter().zip(site.z()).map(|(x, &t)| if t { *x } else { 0.0 }).collect());
    }
    Matrix::from_columns(&columns).expect("columns share the site length")
}

fn site_adjusted(site: &SiteData) -> Result<SiteEffects> {
    let v = site.v().expect("checked by caller");
    let d: Vec<f64> = site.d().iter().map(|&b| f64::from(u8::from(b))).collect();
    let fits = fit_ols_multi(&adjusted_design(site), &[v, &d, site.y()])?;
    let (fv, fd, fy) = (&fits[0], &fits[1], &fits[2]);
    let b0 = fd.coefficients[0];
    let b1 = fd.coefficients[1];
    let b2 = b0 + b1;
    let outside = |b: f64| !(-1e-12..=1.0 + 1e-12).contains(&b);
    Ok(SiteEffects {
        site_id: site.id().to_string(),
        alpha0_hat: fv.coefficients[0],
        alpha1_hat: fv.coefficients[1],
        beta0_hat: b0,
        beta1_hat: b1,
        beta2_hat: b2,
        theta0_hat: fy.coefficients[0],
        theta1_hat: fy.coefficients[1],
        alpha1_se: fv.std_error(1),
        beta1_se: fd.std_error(1),
        theta1_se: fy.std_error(1),
        n_control: site.n_control(),
        n_treated: site.n_treated(),
        adjusted: true,
        out_of_unit_range: outside(b0) || outside(b2),
    })
}

pub fn stage1_adjusted(dataset: &MultisiteDataset) -> Result<Stage1Result> {
    require_v(dataset)?;
    let required = 2 + 2 * dataset.p();
    let mut sites = Vec::with_capacity(dataset.site_count());
    let mut excluded = Vec::new();
    for site in dataset.sites() {
        if let Some(reason) = arm_shortfall(site, required) {
            excluded.push(ExcludedSite {
                site_id: site.id().to_string(),
                reason,
            });
            continue;
        }
        sites.push(site_adjusted(site)?);
    }
    Stage1Result::from_parts(sites, excluded, true)
}

pub fn stage1(dataset: &MultisiteDataset, adjusted: bool) -> Result<Stage1Result> {
    if adjusted {
        stage1_adjusted(dataset)
    } else {
        stage1_unadjusted(dataset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regression::fit_ols;
    use proptest::prelude::*;

    fn site(id: &str, z: &[u8], d: &[u8], v: &[f64], y: &[f64], x: &[f64], p: usize) -> SiteData {
        SiteData::new(
            id,
            z.iter().map(|&a| a == 1).collect(),
            d.iter().map(|&a| a == 1).collect(),
            Some(v.to_vec()),
            y.to_vec(),
            x.to_vec(),
            p,
        )
        .unwrap()
    }

    #[test]
    fn arm_mean_difference_on_v() {
        let s = site(
            "a",
            &[0, 0, 1, 1],
            &[0, 0, 1, 1],
            &[1.0, 3.0, 4.0, 6.0],
            &[0.0; 4],
            &[],
            0,
        );
        let r = stage1_unadjusted(&MultisiteDataset::from_sites(vec![s]).unwrap()).unwrap();
        assert_eq!(r.sites[0].alpha1_hat, 3.0);
        assert_eq!(r.sites[0].alpha0_hat, 2.0);
        assert_eq!(r.alpha1_bar, 3.0);
    }

    #[test]
    fn arm_proportions_on_d() {
        let s = site(
            "a",
            &[0, 0, 0, 0, 1, 1, 1, 1],
            &[0, 0, 1, 1, 1, 1, 1, 0],
            &[0.0; 8],
            &[0.0; 8],
            &[],
            0,
        );
        let e = &stage1_unadjusted(&MultisiteDataset::from_sites(vec![s]).unwrap())
            .unwrap()
            .sites[0];
        assert_eq!((e.beta0_hat, e.beta1_hat, e.beta2_hat), (0.5, 0.25, 0.75));
    }

    #[test]
    fn full_compliance_site() {
        let s = site("a", &[0, 0, 1, 1, 1], &[0, 0, 1, 1, 1], &[0.0; 5], &[0.0; 5], &[], 0);
        let e = &stage1_unadjusted(&MultisiteDataset::from_sites(vec![s]).unwrap())
            .unwrap()
            .sites[0];
        assert_eq!((e.beta0_hat, e.beta1_hat, e.beta2_hat), (0.0, 1.0, 1.0));
    }

    #[test]
    fn missing_v_is_rejected() {
        let s = SiteData::new(
            "a",
            vec![false, false, true, true],
            vec![false; 4],
            None,
            vec![0.0; 4],
            vec![],
            0,
        )
        .unwrap();
        let ds = MultisiteDataset::from_sites(vec![s]).unwrap();
        assert!(matches!(stage1_unadjusted(&ds), Err(Error::MissingIntermediateOutcome)));
    }

    #[test]
    fn adjusted_excludes_small_sites() {
        // p = 1 needs four per arm.
        let small = site(
            "small",
            &[0, 0, 0, 1, 1, 1],
            &[0; 6],
            &[1.0; 6],
            &[1.0; 6],
            &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
            1,
        );
        let ds = MultisiteDataset::from_sites(vec![small.clone()]).unwrap();
        match stage1_adjusted(&ds) {
            Err(Error::NoEligibleSites(msg)) => assert!(msg.contains("small")),
            other => panic!("{other:?}"),
        }
        let big = site(
            "big",
            &[0, 0, 0, 0, 1, 1, 1, 1],
            &[0, 1, 0, 0, 1, 1, 0, 1],
            &[1.0, 2.0, 3.0, 5.0, 4.0, 6.0, 7.0, 9.0],
            &[1.0; 8],
            &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0],
            1,
        );
        let r = stage1_adjusted(&MultisiteDataset::from_sites(vec![small, big]).unwrap()).unwrap();
        assert_eq!(r.sites.len(), 1);
        assert_eq!(r.excluded_sites[0].site_id, "small");
    }

    #[test]
    fn constant_covariate_reduces_to_unadjusted() {
        let s = site(
            "a",
            &[0, 0, 0, 0, 1, 1, 1, 1],
            &[0, 1, 0, 0, 1, 1, 0, 1],
            &[1.0, 2.0, 3.0, 5.0, 4.0, 6.0, 7.0, 9.0],
            &[3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0],
            &[2.0; 8],
            1,
        );
        let ds = MultisiteDataset::from_sites(vec![s]).unwrap();
        let a = &stage1_adjusted(&ds).unwrap().sites[0];
        let u = &stage1_unadjusted(&ds).unwrap().sites[0];
        for (x, y) in [
            (a.alpha1_hat, u.alpha1_hat),
            (a.beta0_hat, u.beta0_hat),
            (a.beta1_hat, u.beta1_hat),
            (a.theta1_hat, u.theta1_hat),
            (a.alpha1_se, u.alpha1_se),
        ] {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn noiseless_adjusted_model_is_recovered() {
        // V = a0 + a1 Z + ax Xc + axz Xc Z, two covariates.
        let z = [0u8, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
        let x: Vec<f64> = (0..12)
            .flat_map(|i| [((i * 7) % 5) as f64, ((i * 3) % 4) as f64 * 0.5])
            .collect();
        let mean = |j: usize| (0..12).map(|i| x[2 * i + j]).sum::<f64>() / 12.0;
        let (m0, m1) = (mean(0), mean(1));
        let v: Vec<f64> = (0..12)
            .map(|i| {
                let (c0, c1) = (x[2 * i] - m0, x[2 * i + 1] - m1);
                let t = f64::from(z[i]);
                2.0 + 3.5 * t + 1.5 * c0 - 0.7 * c1 + 0.25 * c0 * t + 2.0 * c1 * t
            })
            .collect();
        let s = site("a", &z, &z, &v, &v, &x, 2);
        let e = &stage1_adjusted(&MultisiteDataset::from_sites(vec![s]).unwrap())
            .unwrap()
            .sites[0];
        assert!((e.alpha1_hat - 3.5).abs() < 1e-8);
        assert!((e.alpha0_hat - 2.0).abs() < 1e-8);
        assert!((e.theta1_hat - 3.5).abs() < 1e-8);
    }

    #[test]
    fn closed_form_matches_general_ols() {
        let s = site(
            "a",
            &[0, 1, 0, 1, 1, 0, 0],
            &[0, 1, 1, 1, 0, 0, 0],
            &[1.5, 2.0, 3.0, 5.5, 4.0, 6.0, 7.0],
            &[3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0],
            &[],
            0,
        );
        let design =
            Matrix::from_columns(&[vec![1.0; 7], s.z().iter().map(|&t| f64::from(u8::from(t))).collect()]).unwrap();
        let fit = fit_ols(&design, s.y()).unwrap();
        let e = site_unadjusted(&s);
        assert!((fit.coefficients[1] - e.theta1_hat).abs() < 1e-12);
        assert!((fit.std_error(1) - e.theta1_se).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn permutation_invariance(
            ys in prop::collection::vec(-50.0f64..50.0, 12),
            vs in prop::collection::vec(-50.0f64..50.0, 12),
            xs in prop::collection::vec(0.0f64..3.0, 12),
            ds in prop::collection::vec(any::<bool>(), 12),
            shift in 1usize..12,
        ) {
            let z: Vec<bool> = (0..12).map(|i| i % 2 == 0).collect();
            let build = |order: &[usize]| {
                SiteData::new(
                    "a",
                    order.iter().map(|&i| z[i]).collect(),
                    order.iter().map(|&i| ds[i]).collect(),
                    Some(order.iter().map(|&i| vs[i]).collect()),
                    order.iter().map(|&i| ys[i]).collect(),
                    order.iter().map(|&i| xs[i]).collect(),
                    1,
                ).unwrap()
            };
            let id: Vec<usize> = (0..12).collect();
            let rot: Vec<usize> = (0..12).map(|i| (i + shift) % 12).collect();
            for adjusted in [false, true] {
                let a = stage1(&MultisiteDataset::from_sites(vec![build(&id)]).unwrap(), adjusted).unwrap();
                let b = stage1(&MultisiteDataset::from_sites(vec![build(&rot)]).unwrap(), adjusted).unwrap();
                let (a, b) = (&a.sites[0], &b.sites[0]);
                for (p, q) in [(a.alpha1_hat, b.alpha1_hat), (a.beta1_hat, b.beta1_hat), (a.theta1_hat, b.theta1_hat)] {
                    prop_assert!((p - q).abs() <= 1e-9 * (1.0 + p.abs()));
                }
            }
        }

        #[test]
        fn unadjusted_slopes_are_mean_differences(
            ys in prop::collection::vec(-1e3f64..1e3, 4..30),
        ) {
            let n = ys.len();
            let z: Vec<bool> = (0..n).map(|i| i % 2 == 1).collect();
            let s = SiteData::new("a", z.clone(), z.clone(), Some(ys.clone()), ys.clone(), vec![], 0).unwrap();
            let e = site_unadjusted(&s);
            let mean = |arm: bool| {
                let v: Vec<f64> = ys.iter().zip(&z).filter(|(_, &t)| t == arm).map(|(y, _)| *y).collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            let diff = mean(true) - mean(false);
            prop_assert!((e.theta1_hat - diff).abs() <= 1e-10 * (1.0 + diff.abs()));
            prop_assert!((e.beta2_hat - e.beta0_hat - e.beta1_hat).abs() <= 1e-10);
            prop_assert!((0.0..=1.0).contains(&e.beta0_hat) && (0.0..=1.0).contains(&e.beta2_hat));
        }
    }
}
