//! Simulation data-generating process for multisite two-phase trials.
//!
//! Per site `k`:
//!
//! 1. `P_k^Z ~ U(0.25, 0.35)`; `round(P_k^Z · n_k)` individuals (at least two
//!    per arm) are randomly assigned `z = 1`.
//! 2. Binary `U` with site probability `U(0.25, 0.45)` and individual jitter
//!    `±0.02`.
//! 3. Binary `X` with site probability `U(0.3, 0.5)` and the same jitter.
//! 4. `V(0) = 35 + t0 + 10(X − X̄) + 20(U − Ū)`, `V(1) = V(0) + 5 + t1`,
//!    `t0 ~ N(0, 8²)`, `t1 ~ N(0, 6²)`.
//! 5. `D(0) = 1{−(X−X̄) − (U−Ū) − 0.1 V(0) + s0 − ε0 ≥ 0}`,
//!    `D(1) = 1{(X−X̄) + (U−Ū) + 0.05 V(1) + s1 − ε1 ≥ 0}`, `s ~ N(0,1)`,
//!    `ε ~ Logistic(0,1)`.
//! 6. Four potential outcomes `Y(z,d)` with site terms `g0 ~ N(0,9)`,
//!    `gz, gd ~ N(0,4)`, `gzd ~ N(0,1)`; observed `Y` adds `N(0, 36)` noise.
//!
//! The true cumulative effect is `10 + 15 − 5 + 0.2·5 = 21` in every variant.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{MultisiteDataset, SiteData};
use crate::error::{Error, Result};
use crate::seeding::stream_rng;

/// Target of every variant of the generating process.
pub const TRUE_ATE: f64 = 21.0;
pub const THETA_V: f64 = 0.2;
pub const GAMMA1: f64 = 10.0;
pub const GAMMA2: f64 = 15.0;
pub const GAMMA3: f64 = -5.0;
pub const ALPHA1: f64 = 5.0;

/// Stream numbers at or above this are reserved for shared antithetic draws.
const ANTITHETIC_STREAM_BASE: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    /// Outcome effects vary with the individual covariates, so the individual
    /// effects covary with compliance within sites.
    #[serde(alias = "a2")]
    Assumption2Violated,
    /// The Phase-I direct effect depends on the site ITT on `V`, so the two
    /// covary across sites.
    #[serde(alias = "a3")]
    Assumption3Violated,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::Base,
        Variant::Assumption2Violated,
        Variant::Assumption3Violated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Assumption2Violated => "assumption2_violated",
            Variant::Assumption3Violated => "assumption3_violated",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "assumption2_violated" | "a2" => Ok(Variant::Assumption2Violated),
            "assumption3_violated" | "a3" => Ok(Variant::Assumption3Violated),
            other => Err(Error::InvalidConfig(format!(
                "unknown variant `{other}`; expected one of: base, assumption2_violated (a2), assumption3_violated (a3)"
            ))),
        }
    }
}

/// Noise scales and switches of the generating process. The defaults are the
/// standard design; the other settings exist for exactness checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpKnobs {
    pub sd_t0: f64,
    pub sd_t1: f64,
    pub sd_s0: f64,
    pub sd_s1: f64,
    pub sd_g0: f64,
    pub sd_gz: f64,
    pub sd_gd: f64,
    pub sd_gzd: f64,
    /// Standard deviation of the observed-outcome noise.
    pub sd_outcome: f64,
    /// When false the Logistic(0,1) thresholds in the `D` models are zero.
    pub logistic_noise: bool,
    /// Zeroes every centered `X`/`U` term (covariates still drawn and reported).
    pub hold_covariates_at_site_mean: bool,
    /// Pairs sites (0,1), (2,3), ... and gives the second of each pair the
    /// negated site-level normal draws of the first.
    pub antithetic_sites: bool,
}

impl Default for DgpKnobs {
    fn default() -> Self {
        Self {
            sd_t0: 8.0,
            sd_t1: 6.0,
            sd_s0: 1.0,
            sd_s1: 1.0,
            sd_g0: 3.0,
            sd_gz: 2.0,
            sd_gd: 2.0,
            sd_gzd: 1.0,
            sd_outcome: 6.0,
            logistic_noise: true,
            hold_covariates_at_site_mean: false,
            antithetic_sites: false,
        }
    }
}

impl DgpKnobs {
    /// Every variance zero, covariates held at their site means.
    pub fn noiseless() -> Self {
        Self {
            sd_t0: 0.0,
            sd_t1: 0.0,
            sd_s0: 0.0,
            sd_s1: 0.0,
            sd_g0: 0.0,
            sd_gz: 0.0,
            sd_gd: 0.0,
            sd_gzd: 0.0,
            sd_outcome: 0.0,
            logistic_noise: false,
            hold_covariates_at_site_mean: true,
            antithetic_sites: false,
        }
    }

    pub fn is_default(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub k: usize,
    pub n_k: usize,
    pub variant: Variant,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "DgpKnobs::is_default")]
    pub knobs: DgpKnobs,
    #[serde(default)]
    pub retain_potential_outcomes: bool,
}

impl ScenarioConfig {
    pub fn new(k: usize, n_k: usize, variant: Variant, seed: u64) -> Self {
        Self {
            k,
            n_k,
            variant,
            seed,
            knobs: DgpKnobs::default(),
            retain_potential_outcomes: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 5 {
            return Err(Error::InvalidConfig(format!("K must be at least 5, got {}", self.k)));
        }
        if self.n_k < 10 {
            return Err(Error::InvalidConfig(format!(
                "n_k must be at least 10, got {}",
                self.n_k
            )));
        }
        Ok(())
    }
}

/// Site-level draws and the site parameters they imply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteTruth {
    pub site_id: String,
    pub p_z: f64,
    pub p_u: f64,
    pub p_x: f64,
    pub n_treated: usize,
    pub t0: f64,
    pub t1: f64,
    pub s0: f64,
    pub s1: f64,
    pub g0: f64,
    pub gz: f64,
    pub gd: f64,
    pub gzd: f64,
    /// Site ITT of Z on V.
    pub alpha1: f64,
    /// Mean of `Pr(D(0) = 1)` over the site's individuals.
    pub beta0: f64,
    pub beta1: f64,
    /// Mean of `Pr(D(1) = 1)` over the site's individuals.
    pub beta2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub theta_v: f64,
    /// Site mean of `Y(1,1) − Y(0,0)` over the generated individuals.
    pub ate_k: f64,
}

impl SiteTruth {
    /// Site ITT of Z on Y implied by the site parameters.
    pub fn theta1(&self) -> f64 {
        self.theta_v * self.alpha1 + self.gamma1 + self.gamma2 * self.beta1 + self.gamma3 * self.beta2
    }
}

/// One individual's latent values alongside the observed ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomeRecord {
    pub site_index: usize,
    pub z: bool,
    pub u: bool,
    pub x: bool,
    pub v0: f64,
    pub v1: f64,
    pub d0: bool,
    pub d1: bool,
    pub y00: f64,
    pub y01: f64,
    pub y10: f64,
    pub y11: f64,
    pub outcome_noise: f64,
    pub v: f64,
    pub d: bool,
    pub y: f64,
}

impl PotentialOutcomeRecord {
    pub fn y_at(&self, z: bool, d: bool) -> f64 {
        match (z, d) {
            (false, false) => self.y00,
            (false, true) => self.y01,
            (true, false) => self.y10,
            (true, true) => self.y11,
        }
    }

    /// Observed values follow from the latent ones by consistency.
    pub fn is_consistent(&self) -> bool {
        let v = if self.z { self.v1 } else { self.v0 };
        let d = if self.z { self.d1 } else { self.d0 };
        v == self.v && d == self.d && self.y_at(self.z, self.d) + self.outcome_noise == self.y
    }
}

pub struct SimulatedSite {
    pub data: SiteData,
    pub truth: SiteTruth,
    pub potential: Option<Vec<PotentialOutcomeRecord>>,
}

pub struct SimulatedData {
    pub dataset: MultisiteDataset,
    pub truth: Vec<SiteTruth>,
    pub potential: Option<Vec<PotentialOutcomeRecord>>,
}

/// True cumulative ATE of a variant. The violation variants only add
/// site-centered terms (mean zero) or a mean-zero site draw, so it is 21
/// throughout.
pub fn true_ate(_variant: Variant) -> f64 {
    TRUE_ATE
}

pub fn simulate_dataset(config: &ScenarioConfig) -> Result<SimulatedData> {
    config.validate()?;
    let mut sites = Vec::with_capacity(config.k);
    let mut truth = Vec::with_capacity(config.k);
    let mut potential = config.retain_potential_outcomes.then(Vec::new);
    for k in 0..config.k {
        let s = simulate_site(config, k);
        if let (Some(all), Some(mut these)) = (potential.as_mut(), s.potential) {
            all.append(&mut these);
        }
        sites.push(s.data);
        truth.push(s.truth);
    }
    Ok(SimulatedData {
        dataset: MultisiteDataset::from_sites(sites)?,
        truth,
        potential,
    })
}

/// Uniform on the open interval (0, 1).
fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.random::<u64>() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Logistic(0,1) by inverse CDF.
fn standard_logistic(rng: &mut ChaCha8Rng) -> f64 {
    let q = open_unit(rng);
    (q / (1.0 - q)).ln()
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates site `k` (0-based) of a scenario. Only the site's own random
/// stream is used, so any site can be regenerated alone. Does not enforce the
/// scenario-level `K ≥ 5` rule.
pub fn simulate_site(config: &ScenarioConfig, k: usize) -> SimulatedSite {
    let knobs = &config.knobs;
    let n = config.n_k;
    let mut rng = stream_rng(config.seed, k as u64);

    let p_z: f64 = rng.random_range(0.25..0.35);
    let p_u: f64 = rng.random_range(0.25..0.45);
    let p_x: f64 = rng.random_range(0.3..0.5);

    let mut normals = [0.0f64; 8];
    if knobs.antithetic_sites {
        let mut shared = stream_rng(config.seed, ANTITHETIC_STREAM_BASE + (k / 2) as u64);
        let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
        normals.iter_mut().for_each(|a| *a = sign * std_normal(&mut shared));
    } else {
        normals.iter_mut().for_each(|a| *a = std_normal(&mut rng));
    }
    let t0 = knobs.sd_t0 * normals[0];
    let t1 = knobs.sd_t1 * normals[1];
    let s0 = knobs.sd_s0 * normals[2];
    let s1 = knobs.sd_s1 * normals[3];
    let g0 = knobs.sd_g0 * normals[4];
    let gz = knobs.sd_gz * normals[5];
    let gd = knobs.sd_gd * normals[6];
    let gzd = knobs.sd_gzd * normals[7];
    let gz_effective = match config.variant {
        Variant::Assumption3Violated => t1 / 3.0,
        _ => gz,
    };

    let n_treated = ((p_z * n as f64).round() as usize).clamp(
        MultisiteDataset::MIN_ARM_SIZE,
        n.saturating_sub(MultisiteDataset::MIN_ARM_SIZE),
    );
    let mut z = vec![false; n];
    for i in sample(&mut rng, n, n_treated) {
        z[i] = true;
    }

    let jitter = |rng: &mut ChaCha8Rng, centre: f64| -> bool {
        let p: f64 = rng.random_range(centre - 0.02..centre + 0.02);
        rng.random::<f64>() < p.clamp(0.01, 0.99)
    };
    let mut u = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    for _ in 0..n {
        u.push(jitter(&mut rng, p_u));
        x.push(jitter(&mut rng, p_x));
    }
    let mean = |v: &[bool]| v.iter().filter(|&&b| b).count() as f64 / n as f64;
    let (u_bar, x_bar) = (mean(&u), mean(&x));

    let site_id = format!("s{}", k + 1);
    let mut obs_v = Vec::with_capacity(n);
    let mut obs_d = Vec::with_capacity(n);
    let mut obs_y = Vec::with_capacity(n);
    let mut potential = config.retain_potential_outcomes.then(|| Vec::with_capacity(n));
    let (mut sum_p0, mut sum_p1, mut sum_ate) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (xc, uc) = if knobs.hold_covariates_at_site_mean {
            (0.0, 0.0)
        } else {
            (f64::from(u8::from(x[i])) - x_bar, f64::from(u8::from(u[i])) - u_bar)
        };
        let v0 = 35.0 + t0 + 10.0 * xc + 20.0 * uc;
        let v1 = 40.0 + t0 + t1 + 10.0 * xc + 20.0 * uc;

        let eta0 = -xc - uc - 0.1 * v0 + s0;
        let eta1 = xc + uc + 0.05 * v1 + s1;
        let (e0, e1) = if knobs.logistic_noise {
            (standard_logistic(&mut rng), standard_logistic(&mut rng))
        } else {
            (0.0, 0.0)
        };
        let d0 = eta0 - e0 >= 0.0;
        let d1 = eta1 - e1 >= 0.0;
        if knobs.logistic_noise {
            sum_p0 += crate::regression::logistic(eta0);
            sum_p1 += crate::regression::logistic(eta1);
        } else {
            sum_p0 += f64::from(u8::from(eta0 >= 0.0));
            sum_p1 += f64::from(u8::from(eta1 >= 0.0));
        }

        let common = g0 + 20.0 * xc + 40.0 * uc;
        let y00 = 80.0 + common + 0.2 * v0;
        let mut y01 = 95.0 + common + gd + 0.2 * v0;
        let mut y10 = 90.0 + common + gz_effective + 0.2 * v1;
        let mut y11 = 100.0 + common + gz_effective + gd + gzd + 0.2 * v1;
        if config.variant == Variant::Assumption2Violated {
            y01 += 5.0 * xc;
            y10 += 5.0 * uc;
            y11 += 5.0 * xc + 10.0 * uc;
        }
        let noise = knobs.sd_outcome * std_normal(&mut rng);

        let (v, d) = if z[i] { (v1, d1) } else { (v0, d0) };
        let y_latent = match (z[i], d) {
            (false, false) => y00,
            (false, true) => y01,
            (true, false) => y10,
            (true, true) => y11,
        };
        let y = y_latent + noise;
        sum_ate += y11 - y00;
        obs_v.push(v);
        obs_d.push(d);
        obs_y.push(y);
        if let Some(p) = potential.as_mut() {
            p.push(PotentialOutcomeRecord {
                site_index: k,
                z: z[i],
                u: u[i],
                x: x[i],
                v0,
                v1,
                d0,
                d1,
                y00,
                y01,
                y10,
                y11,
                outcome_noise: noise,
                v,
                d,
                y,
            });
        }
    }

    let covariates: Vec<f64> = x.iter().map(|&b| f64::from(u8::from(b))).collect();
    let data = SiteData::new(site_id.clone(), z, obs_d, Some(obs_v), obs_y, covariates, 1)
        .expect("generated columns are consistent and finite");
    let nf = n as f64;
    let beta0 = sum_p0 / nf;
    let beta2 = sum_p1 / nf;
    let truth = SiteTruth {
        site_id,
        p_z,
        p_u,
        p_x,
        n_treated,
        t0,
        t1,
        s0,
        s1,
        g0,
        gz,
        gd,
        gzd,
        alpha1: ALPHA1 + t1,
        beta0,
        beta1: beta2 - beta0,
        beta2,
        gamma1: GAMMA1 + gz_effective,
        gamma2: GAMMA2 + gd,
        gamma3: GAMMA3 + gzd,
        theta_v: THETA_V,
        ate_k: sum_ate / nf,
    };
    SimulatedSite { data, truth, potential }
}

/// Site compliance rates in the large-site limit: `Pr(D(0)=1)` and
/// `Pr(D(1)=1)` averaged over the four `(X, U)` cells, with centering at the
/// site probabilities.
pub fn limiting_compliance(p_x: f64, p_u: f64, t0: f64, t1: f64, s0: f64, s1: f64) -> (f64, f64) {
    let (mut b0, mut b2) = (0.0, 0.0);
    for (x, px) in [(0.0, 1.0 - p_x), (1.0, p_x)] {
        for (u, pu) in [(0.0, 1.0 - p_u), (1.0, p_u)] {
            let (xc, uc) = (x - p_x, u - p_u);
            let v0 = 35.0 + t0 + 10.0 * xc + 20.0 * uc;
            let v1 = 40.0 + t0 + t1 + 10.0 * xc + 20.0 * uc;
            let w = px * pu;
            b0 += w * crate::regression::logistic(-xc - uc - 0.1 * v0 + s0);
            b2 += w * crate::regression::logistic(xc + uc + 0.05 * v1 + s1);
        }
    }
    (b0, b2)
}

/// Large-site-limit `(α1k, β1k, β2k)` for `draws` independent sites of the
/// standard design.
pub fn limiting_site_parameters(draws: usize, seed: u64) -> Vec<[f64; 3]> {
    let knobs = DgpKnobs::default();
    (0..draws)
        .map(|k| {
            let mut rng = stream_rng(seed, k as u64);
            let p_u: f64 = rng.random_range(0.25..0.45);
            let p_x: f64 = rng.random_range(0.3..0.5);
            let t0 = knobs.sd_t0 * std_normal(&mut rng);
            let t1 = knobs.sd_t1 * std_normal(&mut rng);
            let s0 = knobs.sd_s0 * std_normal(&mut rng);
            let s1 = knobs.sd_s1 * std_normal(&mut rng);
            let (b0, b2) = limiting_compliance(p_x, p_u, t0, t1, s0, s1);
            [ALPHA1 + t1, b2 - b0, b2]
        })
        .collect()
}
