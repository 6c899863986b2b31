//! Declarative config files. Every field is optional; command-line flags
//! override file values, which override presets and built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ms2tiv::data::ColumnMapping;
use ms2tiv::harness::{CoverageMode, EstimatorKind, ScenarioSpec};
use ms2tiv::simgen::{DgpKnobs, Variant};

use crate::artifacts::{Failure, Source};

pub const WORKERS_ENV: &str = "MS2TIV_WORKERS";

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text =
        fs::read_to_string(path).map_err(|e| Failure::input(format!("cannot read config {}: {e}", path.display())))?;
    // toml errors carry the line, column and an excerpt.
    toml::from_str(&text).map_err(|e| Failure::input(format!("invalid config {}:\n{e}", path.display())))
}

/// Cartesian scenario grid.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub k: Vec<usize>,
    pub n_k: Vec<usize>,
    #[serde(default = "base_only")]
    pub variants: Vec<Variant>,
}

fn base_only() -> Vec<Variant> {
    vec![Variant::Base]
}

impl Grid {
    pub fn scenarios(&self) -> Vec<ScenarioSpec> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &k in &self.k {
                for &n in &self.n_k {
                    out.push(ScenarioSpec::new(k, n, variant));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateFile {
    pub preset: Option<String>,
    pub scenarios: Option<Vec<ScenarioSpec>>,
    pub grid: Option<Grid>,
    pub replications: Option<usize>,
    pub estimators: Option<Vec<EstimatorKind>>,
    pub coverage: Option<CoverageMode>,
    pub bootstrap_b: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub knobs: Option<DgpKnobs>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeFile {
    pub data: Option<PathBuf>,
    pub columns: Option<ColumnMapping>,
    pub adjusted: Option<bool>,
    pub bca: Option<bool>,
    pub bootstrap_b: Option<usize>,
    pub seed: Option<u64>,
    pub comparators: Option<Vec<String>>,
    pub effect_size: Option<bool>,
    pub workers: Option<usize>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityFile {
    pub theta_v: Option<f64>,
    pub cov_b1_a1: Option<f64>,
    pub cov_b2_a1: Option<f64>,
    pub cov_b1_b2: Option<f64>,
    pub var_b1: Option<f64>,
    pub var_b2: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub alpha1: Option<f64>,
    pub theta_v_grid: Option<Vec<f64>>,
    pub output: Option<PathBuf>,
}

/// Flag, then file, then the environment variable; `None` means all cores.
pub fn resolve_workers(flag: Option<usize>, file: Option<usize>) -> Result<(Option<usize>, Source), Failure> {
    if let Some(w) = flag {
        return Ok((Some(w), Source::Flag));
    }
    if let Some(w) = file {
        return Ok((Some(w), Source::ConfigFile));
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) if !v.trim().is_empty() => {
            let w: usize = v
                .trim()
                .parse()
                .map_err(|_| Failure::input(format!("{WORKERS_ENV} must be a positive integer, got `{v}`")))?;
            if w == 0 {
                return Err(Failure::input(format!("{WORKERS_ENV} must be at least 1")));
            }
            Ok((Some(w), Source::Environment))
        }
        _ => Ok((None, Source::Default)),
    }
}

/// Seed for runs where neither flag nor file supplied one; recorded in the
/// manifest so the run can be repeated.
pub fn generated_seed() -> u64 {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_nanos() as u64);
    ms2tiv::seeding::mix64(nanos ^ u64::from(std::process::id()).rotate_left(32))
}

/// Parses `K:N` or `K:N:variant`.
pub fn parse_scenario(s: &str) -> Result<ScenarioSpec, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || format!("scenario `{s}` must look like K:N or K:N:variant");
    if !(2..=3).contains(&parts.len()) {
        return Err(bad());
    }
    let k = parts[0].trim().parse().map_err(|_| bad())?;
    let n = parts[1].trim().parse().map_err(|_| bad())?;
    let variant = match parts.get(2) {
        Some(v) => v.trim().parse::<Variant>().map_err(|e| e.to_string())?,
        None => Variant::Base,
    };
    Ok(ScenarioSpec::new(k, n, variant))
}
