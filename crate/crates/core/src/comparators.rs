//! Comparison estimators of the cumulative effect, each a per-site contrast of
//! the `(z=1, d=1)` cell against the `(z=0, d=0)` cell averaged over sites.

use serde::{Deserialize, Serialize};

use crate::data::{MultisiteDataset, SiteData};
use crate::error::{Error, Result};
use crate::regression::{fit_logistic, fit_ols, logistic, LogisticFit, Matrix};
use crate::stage1::ExcludedSite;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparatorKind {
    Naive,
    NaiveAdj,
    Iptw,
}

impl ComparatorKind {
    pub fn name(self) -> &'static str {
        match self {
            ComparatorKind::Naive => "naive",
            ComparatorKind::NaiveAdj => "naive_adj",
            ComparatorKind::Iptw => "iptw",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteContribution {
    pub site_id: String,
    pub ate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IptwDiagnostics {
    pub weights: usize,
    pub clamped_low: usize,
    pub clamped_high: usize,
    /// Arm fits redone with the separation ridge.
    pub ridge_refits: usize,
    /// Arms where `D` was constant, so every weight is one.
    pub constant_arms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparatorResult {
    pub estimator: ComparatorKind,
    pub point: f64,
    pub per_site: Vec<SiteContribution>,
    pub sites_skipped: Vec<ExcludedSite>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iptw: Option<IptwDiagnostics>,
}

fn aggregate(
    estimator: ComparatorKind,
    per_site: Vec<SiteContribution>,
    sites_skipped: Vec<ExcludedSite>,
    iptw: Option<IptwDiagnostics>,
) -> Result<ComparatorResult> {
    if per_site.is_empty() {
        let why = sites_skipped
            .iter()
            .map(|e| format!("{}: {}", e.site_id, e.reason))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::NoEligibleSites(format!("{}: {why}", estimator.name())));
    }
    let point = per_site.iter().map(|s| s.ate).sum::<f64>() / per_site.len() as f64;
    Ok(ComparatorResult {
        estimator,
        point,
        per_site,
        sites_skipped,
        iptw,
    })
}

/// Row indices of the `(1,1)` and `(0,0)` cells, or the reason one is empty.
fn cells(site: &SiteData) -> std::result::Result<(Vec<usize>, Vec<usize>), String> {
    let (mut c11, mut c00) = (Vec::new(), Vec::new());
    for i in 0..site.len() {
        match (site.z()[i], site.d()[i]) {
            (true, true) => c11.push(i),
            (false, false) => c00.push(i),
            _ => {}
        }
    }
    match (c11.is_empty(), c00.is_empty()) {
        (true, _) => Err("no record with z=1, d=1".into()),
        (_, true) => Err("no record with z=0, d=0".into()),
        _ => Ok((c11, c00)),
    }
}

fn mean_at(values: &[f64], rows: &[usize]) -> f64 {
    rows.iter().map(|&i| values[i]).sum::<f64>() / rows.len() as f64
}

fn per_site<F>(dataset: &MultisiteDataset, mut f: F) -> (Vec<SiteContribution>, Vec<ExcludedSite>)
where
    F: FnMut(&SiteData) -> std::result::Result<f64, String>,
{
    let (mut ok, mut skipped) = (Vec::new(), Vec::new());
    for site in dataset.sites() {
        match f(site) {
            Ok(ate) => ok.push(SiteContribution {
                site_id: site.id().to_string(),
                ate,
            }),
            Err(reason) => skipped.push(ExcludedSite {
                site_id: site.id().to_string(),
                reason,
            }),
        }
    }
    (ok, skipped)
}

/// Cell-mean contrast `mean(Y | 1,1) − mean(Y | 0,0)` per site.
pub fn naive(dataset: &MultisiteDataset) -> Result<ComparatorResult> {
    let (ok, skipped) = per_site(dataset, |site| {
        let (c11, c00) = cells(site)?;
        Ok(mean_at(site.y(), &c11) - mean_at(site.y(), &c00))
    });
    aggregate(ComparatorKind::Naive, ok, skipped, None)
}

/// Indicator coefficient of OLS of `Y` on `{1, 1{(1,1) cell}, X}` over the two
/// cells, per site.
pub fn naive_adjusted(dataset: &MultisiteDataset) -> Result<ComparatorResult> {
    let p = dataset.p();
    let (ok, skipped) = per_site(dataset, |site| {
        let (c11, c00) = cells(site)?;
        let rows: Vec<usize> = c11.iter().chain(&c00).copied().collect();
        let mut columns = vec![
            vec![1.0; rows.len()],
            rows.iter().map(|&i| f64::from(u8::from(site.z()[i]))).collect(),
        ];
        for j in 0..p {
            columns.push(rows.iter().map(|&i| site.x_row(i)[j]).collect());
        }
        let y: Vec<f64> = rows.iter().map(|&i| site.y()[i]).collect();
        let design = Matrix::from_columns(&columns).map_err(|e| e.to_string())?;
        let fit = fit_ols(&design, &y).map_err(|e| e.to_string())?;
        if fit.aliased[1] {
            return Err("cell indicator is collinear with the covariates".into());
        }
        Ok(fit.coefficients[1])
    });
    aggregate(ComparatorKind::NaiveAdj, ok, skipped, None)
}

/// How the weighted cell contrast is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNormalization {
    /// `Σ w y / n_cell`: the sample analogue of `E[wY | Z=z, D=d, k]`.
    CellMean,
    /// `Σ w y / Σ w`.
    Hajek,
}

/// Form of the conditional model `Pr(D=d | Z=z, X, V, k)` within a site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityModel {
    /// Separate logistic regressions of `D` on `{1, X, V}` in each arm.
    PerArm,
    /// One logistic regression of `D` on `{1, Z, X, V}` over the site.
    Pooled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IptwOptions {
    pub model: PropensityModel,
    pub normalization: WeightNormalization,
    pub ridge: f64,
    /// Ridge for the refit when separation is detected; `None` keeps the
    /// unpenalized fit.
    pub separation_ridge: Option<f64>,
    pub clamp_low: f64,
    pub clamp_high: f64,
}

impl Default for IptwOptions {
    fn default() -> Self {
        Self {
            model: PropensityModel::PerArm,
            normalization: WeightNormalization::CellMean,
            ridge: 0.0,
            separation_ridge: Some(1e-4),
            clamp_low: 0.1,
            clamp_high: 10.0,
        }
    }
}

fn fit_propensity(design: &Matrix, d: &[bool], opts: &IptwOptions, diag: &mut IptwDiagnostics) -> Result<LogisticFit> {
    let mut fit = fit_logistic(design, d, opts.ridge)?;
    if let (true, Some(r)) = (fit.separation_detected || !fit.converged, opts.separation_ridge) {
        fit = fit_logistic(design, d, r)?;
        diag.ridge_refits += 1;
    }
    Ok(fit)
}

/// Design over `rows`: intercept, optionally `Z`, then `X` and `V`.
fn propensity_design(site: &SiteData, rows: &[usize], with_z: bool) -> Result<Matrix> {
    let v = site.v().ok_or(Error::MissingIntermediateOutcome)?;
    let mut columns = vec![vec![1.0; rows.len()]];
    if with_z {
        columns.push(rows.iter().map(|&i| f64::from(u8::from(site.z()[i]))).collect());
    }
    for j in 0..site.p() {
        columns.push(rows.iter().map(|&i| site.x_row(i)[j]).collect());
    }
    columns.push(rows.iter().map(|&i| v[i]).collect());
    Matrix::from_columns(&columns)
}

/// Unclamped weights `Pr(D=d | Z=z, k) / Pr(D=d | Z=z, X, V, k)` for every
/// row of the site.
fn site_weights(site: &SiteData, opts: &IptwOptions, diag: &mut IptwDiagnostics) -> Result<Vec<f64>> {
    let n = site.len();
    let mut share1 = [0.0; 2];
    for arm in [false, true] {
        let rows = (0..n).filter(|&i| site.z()[i] == arm);
        let (ones, total) = rows.fold((0usize, 0usize), |(o, t), i| (o + usize::from(site.d()[i]), t + 1));
        share1[usize::from(arm)] = ones as f64 / total as f64;
    }
    // Linear predictor per row; `None` marks rows whose propensity model is
    // trivially the arm share (constant `D`).
    let mut eta: Vec<Option<f64>> = vec![None; n];
    match opts.model {
        PropensityModel::PerArm => {
            for arm in [false, true] {
                let s = share1[usize::from(arm)];
                if s == 0.0 || s == 1.0 {
                    diag.constant_arms += 1;
                    continue;
                }
                let rows: Vec<usize> = (0..n).filter(|&i| site.z()[i] == arm).collect();
                let d: Vec<bool> = rows.iter().map(|&i| site.d()[i]).collect();
                let design = propensity_design(site, &rows, false)?;
                let fit = fit_propensity(&design, &d, opts, diag)?;
                for (r, &i) in rows.iter().enumerate() {
                    eta[i] = Some(fit.linear_predictor(&design.row(r)));
                }
            }
        }
        PropensityModel::Pooled => {
            let rows: Vec<usize> = (0..n).collect();
            let d = site.d();
            if d.iter().all(|&b| b) || d.iter().all(|&b| !b) {
                diag.constant_arms += 2;
            } else {
                let design = propensity_design(site, &rows, true)?;
                let fit = fit_propensity(&design, d, opts, diag)?;
                for i in 0..n {
                    eta[i] = Some(fit.linear_predictor(&design.row(i)));
                }
            }
        }
    }
    (0..n)
        .map(|i| {
            let (z, d) = (site.z()[i], site.d()[i]);
            let s = share1[usize::from(z)];
            let num = if d { s } else { 1.0 - s };
            let Some(eta) = eta[i] else { return Ok(1.0) };
            // Probability of the observed d, computed without cancellation.
            let den = if d { logistic(eta) } else { logistic(-eta) };
            if !(den > 0.0 && den.is_finite()) {
                return Err(Error::PropensityDegenerate {
                    site_id: site.id().to_string(),
                    z,
                });
            }
            Ok(num / den)
        })
        .collect()
}

fn weighted_mean(pairs: &[(usize, f64)], y: &[f64], normalization: WeightNormalization) -> f64 {
    let (sw, swy) = pairs
        .iter()
        .fold((0.0, 0.0), |(sw, swy), &(i, w)| (sw + w, swy + w * y[i]));
    match normalization {
        WeightNormalization::CellMean => swy / pairs.len() as f64,
        WeightNormalization::Hajek => swy / sw,
    }
}

/// Inverse-probability-of-treatment weighting for `D` within each arm,
/// adjusting for `X` and `V`.
pub fn iptw(dataset: &MultisiteDataset, opts: &IptwOptions) -> Result<ComparatorResult> {
    if !dataset.has_v() {
        return Err(Error::MissingIntermediateOutcome);
    }
    let mut diag = IptwDiagnostics::default();
    let mut ok = Vec::new();
    let mut skipped = Vec::new();
    for site in dataset.sites() {
        if let Err(reason) = cells(site) {
            skipped.push(ExcludedSite {
                site_id: site.id().to_string(),
                reason,
            });
            continue;
        }
        let weights = site_weights(site, opts, &mut diag)?;
        let mut cell = |arm: bool| -> Vec<(usize, f64)> {
            let mut w: Vec<(usize, f64)> = (0..site.len())
                .filter(|&i| site.z()[i] == arm && site.d()[i] == arm)
                .map(|i| (i, weights[i]))
                .collect();
            for (_, x) in w.iter_mut() {
                diag.weights += 1;
                if *x < opts.clamp_low {
                    diag.clamped_low += 1;
                    *x = opts.clamp_low;
                } else if *x > opts.clamp_high {
                    diag.clamped_high += 1;
                    *x = opts.clamp_high;
                }
            }
            w
        };
        let w11 = cell(true);
        let w00 = cell(false);
        ok.push(SiteContribution {
            site_id: site.id().to_string(),
            ate: weighted_mean(&w11, site.y(), opts.normalization) - weighted_mean(&w00, site.y(), opts.normalization),
        });
    }
    aggregate(ComparatorKind::Iptw, ok, skipped, Some(diag))
}

pub fn run(kind: ComparatorKind, dataset: &MultisiteDataset) -> Result<ComparatorResult> {
    match kind {
        ComparatorKind::Naive => naive(dataset),
        ComparatorKind::NaiveAdj => naive_adjusted(dataset),
        ComparatorKind::Iptw => iptw(dataset, &IptwOptions::default()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site(id: &str, z: &[u8], d: &[u8], v: &[f64], y: &[f64], x: &[f64]) -> SiteData {
        let p = if z.is_empty() { 0 } else { x.len() / z.len() };
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
    fn naive_cell_contrast() {
        let s = site(
            "a",
            &[0, 0, 0, 1, 1, 1],
            &[0, 0, 1, 1, 1, 0],
            &[0.0; 6],
            &[1.0, 3.0, 50.0, 5.0, 7.0, -9.0],
            &[],
        );
        let r = naive(&MultisiteDataset::from_sites(vec![s]).unwrap()).unwrap();
        assert_eq!(r.point, 4.0);
    }

    #[test]
    fn empty_cell_site_is_skipped() {
        let good = site(
            "good",
            &[0, 0, 1, 1],
            &[0, 0, 1, 1],
            &[0.0; 4],
            &[1.0, 1.0, 3.0, 3.0],
            &[],
        );
        let bad = site("bad", &[0, 0, 1, 1], &[0, 0, 0, 0], &[0.0; 4], &[0.0; 4], &[]);
        let ds = MultisiteDataset::from_sites(vec![good, bad.clone()]).unwrap();
        let r = naive(&ds).unwrap();
        assert_eq!(r.point, 2.0);
        assert_eq!(r.sites_skipped.len(), 1);
        assert_eq!(r.sites_skipped[0].site_id, "bad");
        let only_bad = MultisiteDataset::from_sites(vec![bad]).unwrap();
        assert!(matches!(naive(&only_bad), Err(Error::NoEligibleSites(_))));
    }

    #[test]
    fn constant_covariate_adjusted_equals_naive() {
        let s = site(
            "a",
            &[0, 0, 0, 0, 1, 1, 1, 1],
            &[0, 0, 0, 1, 1, 1, 1, 0],
            &[0.0; 8],
            &[1.0, 2.5, 3.0, 8.0, 5.0, 7.5, 6.0, 1.0],
            &[4.0; 8],
        );
        let ds = MultisiteDataset::from_sites(vec![s]).unwrap();
        let a = naive_adjusted(&ds).unwrap().point;
        let b = naive(&ds).unwrap().point;
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn pure_confounding_is_removed() {
        let x = [0.0, 1.0, 2.0, 5.0, 3.0, 4.0, 6.0, 2.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 + 3.0 * v).collect();
        let s = site(
            "a",
            &[0, 0, 0, 0, 1, 1, 1, 1],
            &[0, 0, 0, 1, 1, 1, 1, 0],
            &[0.0; 8],
            &y,
            &x,
        );
        let r = naive_adjusted(&MultisiteDataset::from_sites(vec![s]).unwrap()).unwrap();
        assert!(r.point.abs() < 1e-10);
    }

    #[test]
    fn balanced_propensity_gives_unit_weights() {
        // Within each arm, d splits evenly in every (x, v) pattern, so the
        // fitted propensity equals the arm share and every weight is one.
        let z = [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1];
        let d = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let x = [
            0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0,
        ];
        let v = [
            1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0,
        ];
        let y: Vec<f64> = (0..16).map(|i| (i * i % 7) as f64).collect();
        let ds = MultisiteDataset::from_sites(vec![site("a", &z, &d, &v, &y, &x)]).unwrap();
        let a = iptw(&ds, &IptwOptions::default()).unwrap();
        let b = naive(&ds).unwrap();
        assert!((a.point - b.point).abs() < 1e-8);
        let diag = a.iptw.unwrap();
        assert_eq!(diag.clamped_low + diag.clamped_high, 0);
        assert_eq!(diag.weights, 8);
    }

    #[test]
    fn weight_is_share_over_propensity() {
        // Arm share of d=1 is 0.8; a fitted 0.5 gives weight 1.6.
        let share: f64 = 0.8;
        let fitted: f64 = 0.5;
        assert!((share / fitted - 1.6).abs() < 1e-15);
        assert!((share / logistic(0.0) - 1.6).abs() < 1e-15);
    }

    #[test]
    fn separation_triggers_ridge_refit() {
        // In the treated arm V perfectly separates d.
        let z = [0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
        let d = [0, 1, 0, 0, 0, 0, 0, 1, 1, 1];
        let v = [1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 7.0, 8.0, 9.0];
        let y = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let x = [0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let ds = MultisiteDataset::from_sites(vec![site("a", &z, &d, &v, &y, &x)]).unwrap();
        let r = iptw(&ds, &IptwOptions::default()).unwrap();
        let diag = r.iptw.unwrap();
        assert!(diag.ridge_refits >= 1);
        assert!(r.point.is_finite());
    }
}
