//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes plain numbers or a JSON string and returns a JSON
//! string, so the page needs no generated TypeScript types. The `*_json`
//! functions hold the logic and run natively under `cargo test`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use ms2tiv::harness::{run_study, CoverageMode, EstimatorKind, ScenarioSpec, StudyConfig};
use ms2tiv::sensitivity::{omitted_v_bias, SensitivityInputs};
use ms2tiv::simgen::{simulate_dataset, true_ate, ScenarioConfig, Variant};
use ms2tiv::stage2::estimate;

/// Browser-side caps; one simulation or study must finish in a few seconds.
pub const MAX_SITES: usize = 400;
pub const MAX_SITE_SIZE: usize = 2000;
pub const MAX_REPLICATIONS: usize = 500;
pub const MAX_GRID_POINTS: usize = 401;

#[derive(Serialize)]
struct SitePoint {
    id: String,
    alpha1: f64,
    beta1: f64,
    beta2: f64,
    theta1: f64,
}

#[derive(Serialize)]
struct EstimateView {
    point: f64,
    ci_lower: f64,
    ci_upper: f64,
    gamma: [f64; 4],
    effect_size: Option<f64>,
}

#[derive(Serialize)]
struct DemoEstimate {
    variant: Variant,
    k: usize,
    n_k: usize,
    seed: u32,
    true_ate: f64,
    unadjusted: EstimateView,
    adjusted: EstimateView,
    naive: Option<f64>,
    iptw: Option<f64>,
    excluded_sites: usize,
    /// Adjusted stage-1 effects, for the scatter plot.
    sites: Vec<SitePoint>,
}

#[derive(Serialize)]
struct CurvePoint {
    theta_v: f64,
    d_gamma2: f64,
    d_gamma3: f64,
    total_bias: f64,
}

#[derive(Serialize)]
struct McRow {
    estimator: EstimatorKind,
    successes: usize,
    mean: f64,
    bias: f64,
    empirical_variance: f64,
    mse: f64,
    coverage_improper: Option<f64>,
}

#[derive(Serialize)]
struct McResult {
    k: usize,
    n_k: usize,
    variant: Variant,
    replications: usize,
    true_ate: f64,
    rows: Vec<McRow>,
}

fn check_size(k: usize, n_k: usize) -> Result<(), String> {
    if k > MAX_SITES || n_k > MAX_SITE_SIZE {
        return Err(format!(
            "the demo is capped at {MAX_SITES} sites of at most {MAX_SITE_SIZE}; use the CLI for larger designs"
        ));
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

fn view(e: &ms2tiv::Estimate) -> EstimateView {
    EstimateView {
        point: e.ate.point,
        ci_lower: e.ate.improper_ci95.lower,
        ci_upper: e.ate.improper_ci95.upper,
        gamma: e.fit.coefficients(),
        effect_size: e.ate.effect_size,
    }
}

/// Simulates one trial and estimates the cumulative effect with and without
/// covariate adjustment, plus the naive and IPTW comparators.
pub fn simulate_and_estimate_json(k: usize, n_k: usize, variant: &str, seed: u32) -> Result<String, String> {
    check_size(k, n_k)?;
    let variant: Variant = variant.parse().map_err(|e: ms2tiv::Error| e.to_string())?;
    let sim = simulate_dataset(&ScenarioConfig::new(k, n_k, variant, u64::from(seed))).map_err(|e| e.to_string())?;
    let ds = &sim.dataset;
    let unadjusted = estimate(ds, false).map_err(|e| e.to_string())?;
    let adjusted = estimate(ds, true).map_err(|e| e.to_string())?;
    let sites = adjusted
        .stage1
        .sites
        .iter()
        .map(|s| SitePoint {
            id: s.site_id.clone(),
            alpha1: s.alpha1_hat,
            beta1: s.beta1_hat,
            beta2: s.beta2_hat,
            theta1: s.theta1_hat,
        })
        .collect();
    to_json(&DemoEstimate {
        variant,
        k,
        n_k,
        seed,
        true_ate: true_ate(variant),
        unadjusted: view(&unadjusted),
        adjusted: view(&adjusted),
        naive: EstimatorKind::Naive.estimate(ds).ok(),
        iptw: EstimatorKind::Iptw.estimate(ds).ok(),
        excluded_sites: adjusted.stage1.excluded_sites.len(),
        sites,
    })
}

/// Omitted-`V` bias over an evenly spaced `θV` grid. `inputs` is a JSON
/// object with the sensitivity moments; its own `theta_v` is ignored.
pub fn sensitivity_curve_json(inputs: &str, theta_min: f64, theta_max: f64, points: usize) -> Result<String, String> {
    let base: SensitivityInputs = serde_json::from_str(inputs).map_err(|e| format!("invalid inputs: {e}"))?;
    if !(2..=MAX_GRID_POINTS).contains(&points) {
        return Err(format!("points must be between 2 and {MAX_GRID_POINTS}"));
    }
    if !(theta_min.is_finite() && theta_max.is_finite() && theta_min < theta_max) {
        return Err("the θV range must be finite with min < max".into());
    }
    let step = (theta_max - theta_min) / (points - 1) as f64;
    let curve = (0..points)
        .map(|i| {
            let theta_v = theta_min + step * i as f64;
            let b = omitted_v_bias(&SensitivityInputs { theta_v, ..base }).map_err(|e| e.to_string())?;
            Ok(CurvePoint {
                theta_v,
                d_gamma2: b.d_gamma2,
                d_gamma3: b.d_gamma3,
                total_bias: b.total_bias,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    to_json(&curve)
}

/// A small Monte Carlo study of one design cell: bias, variance, MSE and
/// improper-interval coverage for the naive and two-stage estimators.
pub fn monte_carlo_json(k: usize, n_k: usize, variant: &str, replications: usize, seed: u32) -> Result<String, String> {
    check_size(k, n_k)?;
    if replications > MAX_REPLICATIONS {
        return Err(format!("the demo is capped at {MAX_REPLICATIONS} replications"));
    }
    let variant: Variant = variant.parse().map_err(|e: ms2tiv::Error| e.to_string())?;
    let config = StudyConfig {
        scenarios: vec![ScenarioSpec::new(k, n_k, variant)],
        replications,
        estimators: vec![EstimatorKind::Naive, EstimatorKind::Ms2tiv, EstimatorKind::Ms2tivAdj],
        coverage: CoverageMode::Improper,
        bootstrap_b: 0,
        master_seed: u64::from(seed),
        workers: Some(1),
        knobs: Default::default(),
    };
    let summary = run_study(&config).map_err(|e| e.to_string())?;
    let rows = summary
        .cells
        .iter()
        .map(|c| McRow {
            estimator: c.estimator,
            successes: c.successes,
            mean: c.mean,
            bias: c.bias,
            empirical_variance: c.empirical_variance,
            mse: c.mse,
            coverage_improper: c.coverage_improper,
        })
        .collect();
    to_json(&McResult {
        k,
        n_k,
        variant,
        replications,
        true_ate: true_ate(variant),
        rows,
    })
}

#[wasm_bindgen(js_name = simulateAndEstimate)]
pub fn simulate_and_estimate(k: usize, n_k: usize, variant: &str, seed: u32) -> Result<String, JsError> {
    simulate_and_estimate_json(k, n_k, variant, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = sensitivityCurve)]
pub fn sensitivity_curve(inputs: &str, theta_min: f64, theta_max: f64, points: usize) -> Result<String, JsError> {
    sensitivity_curve_json(inputs, theta_min, theta_max, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = monteCarlo)]
pub fn monte_carlo(k: usize, n_k: usize, variant: &str, replications: usize, seed: u32) -> Result<String, JsError> {
    monte_carlo_json(k, n_k, variant, replications, seed).map_err(|e| JsError::new(&e))
}
