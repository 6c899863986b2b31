//! Multilevel bootstrap and BCa intervals.
//!
//! Sites are drawn with replacement; inside each drawn site individuals are
//! drawn with replacement separately within each Phase-I arm, so every
//! replicate site keeps its source's arm sizes. The acceleration constant
//! comes from a delete-one-site jackknife.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{MultisiteDataset, SiteData};
use crate::error::{Error, Result};
use crate::seeding::{derive_seed, hash_str, stream_rng};
use crate::stage2::Interval;

pub const DEFAULT_REPLICATES: usize = 500;
pub const MIN_REPLICATES: usize = 100;
/// Largest tolerated share of failed replicates.
pub const MAX_FAILED_SHARE: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: DEFAULT_REPLICATES,
            seed: 0,
        }
    }
}

impl BootstrapConfig {
    pub fn new(replicates: usize, seed: u64) -> Self {
        Self { replicates, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates < MIN_REPLICATES {
            return Err(Error::InvalidConfig(format!(
                "bootstrap needs at least {MIN_REPLICATES} replicates, got {}",
                self.replicates
            )));
        }
        Ok(())
    }

    /// Generator of replicate `index`; independent of every other replicate.
    pub fn replicate_rng(&self, index: usize) -> ChaCha8Rng {
        stream_rng(derive_seed(self.seed, &[hash_str("bootstrap")]), index as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcaInterval {
    pub lower: f64,
    pub upper: f64,
    /// Estimate on the original sample.
    pub estimate: f64,
    pub z0: f64,
    pub acceleration: f64,
    /// Adjusted percentile levels of the two endpoints.
    pub alpha_lower: f64,
    pub alpha_upper: f64,
    /// Successful replicate values in replicate-index order.
    pub boot_estimates: Vec<f64>,
    pub b_requested: usize,
    pub b_effective: usize,
    pub failed: usize,
    /// The below-estimate share was clamped to `[1/(B+1), B/(B+1)]`.
    pub z0_clamped: bool,
    pub jackknife_failed: usize,
}

impl BcaInterval {
    pub fn interval(&self) -> Interval {
        Interval {
            lower: self.lower,
            upper: self.upper,
        }
    }
}

fn resample_arm(rng: &mut ChaCha8Rng, members: &[usize], out: &mut Vec<usize>) {
    out.extend((0..members.len()).map(|_| members[rng.random_range(0..members.len())]));
}

fn resample_site(site: &SiteData, id: String, rng: &mut ChaCha8Rng) -> Result<SiteData> {
    let (mut control, mut treated) = (Vec::new(), Vec::new());
    for (i, &z) in site.z().iter().enumerate() {
        if z {
            treated.push(i)
        } else {
            control.push(i)
        }
    }
    let mut rows = Vec::with_capacity(site.len());
    resample_arm(rng, &control, &mut rows);
    resample_arm(rng, &treated, &mut rows);
    let out = site.select(&rows, id);
    if out.n_control() != site.n_control() || out.n_treated() != site.n_treated() {
        return Err(Error::DegenerateResample(out.id().to_string()));
    }
    Ok(out)
}

/// One multilevel bootstrap sample. Drawn sites are named
/// `<source id>#<draw position>` so duplicates stay distinct.
pub fn multilevel_resample(dataset: &MultisiteDataset, rng: &mut ChaCha8Rng) -> Result<MultisiteDataset> {
    let sites = dataset.sites();
    if sites.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let picks: Vec<usize> = (0..sites.len()).map(|_| rng.random_range(0..sites.len())).collect();
    let drawn = picks
        .iter()
        .enumerate()
        .map(|(j, &k)| resample_site(&sites[k], format!("{}#{}", sites[k].id(), j + 1), rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultisiteDataset::from_validated_sites(
        drawn,
        dataset.p(),
        dataset.has_v(),
    ))
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// Zero-based order statistic used for a percentile level `alpha` among `b`
/// sorted values: the `ceil(alpha·b)`-th smallest. The small slack absorbs
/// rounding in `Φ(Φ⁻¹(alpha))` so that BCa with `z0 = a = 0` hits exactly the
/// same order statistics as the plain percentile interval.
pub fn order_statistic_index(alpha: f64, b: usize) -> usize {
    let k = (alpha * b as f64 - 1e-9).ceil();
    if k.is_nan() || k < 1.0 {
        0
    } else {
        (k as usize - 1).min(b - 1)
    }
}

/// Plain percentile interval at levels 2.5% and 97.5%.
pub fn percentile_interval(boot: &[f64]) -> Interval {
    let mut sorted = boot.to_vec();
    sorted.sort_by(f64::total_cmp);
    let b = sorted.len();
    Interval {
        lower: sorted[order_statistic_index(0.025, b)],
        upper: sorted[order_statistic_index(0.975, b)],
    }
}

/// Bias-correction constant and whether the below-estimate share was clamped.
pub fn bias_correction(boot: &[f64], estimate: f64) -> (f64, bool) {
    let b = boot.len() as f64;
    let less = boot.iter().filter(|&&x| x < estimate).count() as f64;
    let equal = boot.iter().filter(|&&x| x == estimate).count() as f64;
    let share = (less + 0.5 * equal) / b;
    let (lo, hi) = (1.0 / (b + 1.0), b / (b + 1.0));
    let clamped = share < lo || share > hi;
    (std_normal().inverse_cdf(share.clamp(lo, hi)), clamped)
}

/// Jackknife acceleration `Σ(θ̄−θi)³ / (6 (Σ(θ̄−θi)²)^{3/2})`; zero when all
/// leave-one-out values coincide.
pub fn acceleration(jackknife: &[f64]) -> f64 {
    if jackknife.len() < 2 {
        return 0.0;
    }
    let mean = jackknife.iter().sum::<f64>() / jackknife.len() as f64;
    let (s2, s3) = jackknife.iter().fold((0.0, 0.0), |(s2, s3), &t| {
        let d = mean - t;
        (s2 + d * d, s3 + d * d * d)
    });
    let denom = 6.0 * s2.powf(1.5);
    if denom > 0.0 && denom.is_finite() {
        s3 / denom
    } else {
        0.0
    }
}

/// Adjusted percentile level for nominal normal quantile `z`.
pub fn adjusted_level(z0: f64, a: f64, z: f64) -> f64 {
    let w = z0 + z;
    let denom = 1.0 - a * w;
    if denom <= 0.0 {
        // Acceleration pushed the level past the support; take the extreme.
        return if w > 0.0 { 1.0 } else { 0.0 };
    }
    std_normal().cdf(z0 + w / denom)
}

/// BCa interval from precomputed replicate, jackknife and original values.
pub fn bca_from_replicates(boot: &[f64], estimate: f64, jackknife: &[f64]) -> (Interval, f64, f64, f64, f64, bool) {
    let (z0, clamped) = bias_correction(boot, estimate);
    let a = acceleration(jackknife);
    let n = std_normal();
    let alpha_lower = adjusted_level(z0, a, n.inverse_cdf(0.025));
    let alpha_upper = adjusted_level(z0, a, n.inverse_cdf(0.975));
    let mut sorted = boot.to_vec();
    sorted.sort_by(f64::total_cmp);
    let b = sorted.len();
    let interval = Interval {
        lower: sorted[order_statistic_index(alpha_lower, b)],
        upper: sorted[order_statistic_index(alpha_upper, b)],
    };
    (interval, z0, a, alpha_lower, alpha_upper, clamped)
}

#[cfg(feature = "parallel")]
fn map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).map(f).collect()
}

/// BCa 95% interval for `estimator` under multilevel resampling. Replicates
/// on which the estimator fails are dropped and counted.
pub fn bca_interval<F>(dataset: &MultisiteDataset, estimator: F, config: &BootstrapConfig) -> Result<BcaInterval>
where
    F: Fn(&MultisiteDataset) -> Result<f64> + Sync + Send,
{
    config.validate()?;
    let estimate = estimator(dataset).map_err(|e| Error::EstimatorFailedOnOriginal(Box::new(e)))?;

    let replicates: Vec<Option<f64>> = map_indexed(config.replicates, |b| {
        let mut rng = config.replicate_rng(b);
        multilevel_resample(dataset, &mut rng)
            .and_then(|ds| estimator(&ds))
            .ok()
            .filter(|v| v.is_finite())
    });
    let boot: Vec<f64> = replicates.iter().flatten().copied().collect();
    let failed = config.replicates - boot.len();
    if failed as f64 > MAX_FAILED_SHARE * config.replicates as f64 {
        return Err(Error::TooManyFailedReplicates {
            failed,
            requested: config.replicates,
        });
    }

    let jack: Vec<Option<f64>> = map_indexed(dataset.site_count(), |k| {
        dataset
            .without_site(k)
            .and_then(|ds| estimator(&ds))
            .ok()
            .filter(|v| v.is_finite())
    });
    let jackknife: Vec<f64> = jack.iter().flatten().copied().collect();

    let (ci, z0, a, alpha_lower, alpha_upper, z0_clamped) = bca_from_replicates(&boot, estimate, &jackknife);
    Ok(BcaInterval {
        lower: ci.lower,
        upper: ci.upper,
        estimate,
        z0,
        acceleration: a,
        alpha_lower,
        alpha_upper,
        b_requested: config.replicates,
        b_effective: boot.len(),
        failed,
        z0_clamped,
        jackknife_failed: jack.len() - jackknife.len(),
        boot_estimates: boot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(k: usize) -> MultisiteDataset {
        let sites = (0..k)
            .map(|s| {
                let n = 6 + s;
                let z: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
                let y: Vec<f64> = (0..n).map(|i| (i * (s + 1)) as f64 * 0.5).collect();
                SiteData::new(format!("k{s}"), z.clone(), z, Some(y.clone()), y, vec![], 0).unwrap()
            })
            .collect();
        MultisiteDataset::from_sites(sites).unwrap()
    }

    #[test]
    fn arm_sizes_are_preserved_and_ids_fresh() {
        let ds = toy(4);
        let mut rng = stream_rng(1, 0);
        for _ in 0..20 {
            let r = multilevel_resample(&ds, &mut rng).unwrap();
            assert_eq!(r.site_count(), 4);
            let mut ids: Vec<&str> = r.sites().iter().map(SiteData::id).collect();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), 4);
            for s in r.sites() {
                let src_id = s.id().split('#').next().unwrap();
                let src = ds.sites().iter().find(|t| t.id() == src_id).unwrap();
                assert_eq!((s.n_control(), s.n_treated()), (src.n_control(), src.n_treated()));
                // Each row keeps its own arm's values.
                for i in 0..s.len() {
                    assert_eq!(s.z()[i], s.d()[i]);
                }
            }
        }
    }

    #[test]
    fn single_site_is_always_drawn() {
        let ds = toy(1);
        let mut rng = stream_rng(5, 0);
        let r = multilevel_resample(&ds, &mut rng).unwrap();
        assert_eq!(r.sites()[0].id(), "k0#1");
    }

    #[test]
    fn resampling_is_seed_deterministic() {
        let ds = toy(5);
        let cfg = BootstrapConfig::new(100, 77);
        let a = multilevel_resample(&ds, &mut cfg.replicate_rng(3)).unwrap();
        let b = multilevel_resample(&ds, &mut cfg.replicate_rng(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_statistic_gives_degenerate_interval() {
        let r = bca_interval(&toy(5), |_| Ok(4.25), &BootstrapConfig::new(150, 3)).unwrap();
        assert_eq!((r.lower, r.upper), (4.25, 4.25));
        assert_eq!(r.z0, 0.0);
        assert_eq!(r.acceleration, 0.0);
    }

    #[test]
    fn original_failure_is_reported() {
        let err = bca_interval(&toy(5), |_| Err(Error::TooFewSites(0)), &BootstrapConfig::new(100, 0)).unwrap_err();
        assert!(matches!(err, Error::EstimatorFailedOnOriginal(_)));
    }

    #[test]
    fn too_many_failures() {
        let ds = toy(5);
        // Fails whenever the first drawn site is a duplicate-prone `k0`.
        let est = |d: &MultisiteDataset| {
            if d.sites()[0].id().starts_with("k0#") {
                Err(Error::TooFewSites(0))
            } else {
                Ok(1.0)
            }
        };
        match bca_interval(&ds, est, &BootstrapConfig::new(200, 9)) {
            Err(Error::TooManyFailedReplicates { failed, requested }) => {
                assert_eq!(requested, 200);
                assert!(failed > 20);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn small_failure_share_is_tolerated() {
        let ds = toy(5);
        let cfg = BootstrapConfig::new(200, 11);
        let est = |d: &MultisiteDataset| {
            // Only about 1 in 125 replicates draws `k4` as its first three sites.
            if d.sites()[..3].iter().all(|s| s.id().starts_with("k4#")) {
                Err(Error::TooFewSites(0))
            } else {
                Ok(d.sites().iter().map(|s| s.y()[0] + s.y()[1]).sum::<f64>())
            }
        };
        let r = bca_interval(&ds, est, &cfg).unwrap();
        assert_eq!(r.b_effective + r.failed, 200);
        assert_eq!(r.boot_estimates.len(), r.b_effective);
    }

    #[test]
    fn z0_clamp_is_flagged() {
        let boot: Vec<f64> = (0..200).map(f64::from).collect();
        let (z0, clamped) = bias_correction(&boot, 1e6);
        assert!(clamped);
        assert!((z0 - std_normal().inverse_cdf(200.0 / 201.0)).abs() < 1e-12);
        let (z0, clamped) = bias_correction(&boot, 99.5);
        assert!(!clamped);
        assert!(z0.abs() < 1e-12);
    }

    #[test]
    fn acceleration_of_symmetric_jackknife_is_zero() {
        assert_eq!(acceleration(&[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(acceleration(&[2.0, 2.0, 2.0]), 0.0);
        // Oracle: deviations θ̄−θi = (2/3)(1, 1, −2) for values (0, 0, 2).
        let d = [2.0 / 3.0, 2.0 / 3.0, -4.0 / 3.0];
        let s2: f64 = d.iter().map(|x| x * x).sum();
        let s3: f64 = d.iter().map(|x| x * x * x).sum();
        assert!((acceleration(&[0.0, 0.0, 2.0]) - s3 / (6.0 * s2.powf(1.5))).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn bca_reduces_to_percentile(
            values in prop::collection::vec(-100.0f64..100.0, 100..600),
        ) {
            // An estimate at the exact median split gives z0 = 0; a symmetric
            // jackknife gives a = 0.
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let b = sorted.len();
            let estimate = if b % 2 == 0 {
                let (lo, hi) = (sorted[b / 2 - 1], sorted[b / 2]);
                prop_assume!(lo < hi);
                0.5 * (lo + hi)
            } else {
                sorted[b / 2]
            };
            prop_assume!(sorted.iter().filter(|&&x| x == estimate).count() <= 1);
            let (ci, z0, a, ..) = bca_from_replicates(&values, estimate, &[1.0, 2.0, 3.0]);
            prop_assert!(z0.abs() < 1e-12);
            prop_assert_eq!(a, 0.0);
            prop_assert_eq!(ci, percentile_interval(&values));
        }

        #[test]
        fn endpoints_are_ordered_order_statistics(
            values in prop::collection::vec(-100.0f64..100.0, 100..300),
            estimate in -50.0f64..50.0,
            jack in prop::collection::vec(-5.0f64..5.0, 3..20),
        ) {
            let (ci, ..) = bca_from_replicates(&values, estimate, &jack);
            prop_assert!(ci.lower <= ci.upper);
            prop_assert!(values.contains(&ci.lower) && values.contains(&ci.upper));
        }
    }
}
