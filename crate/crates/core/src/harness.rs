//! Monte Carlo study runner: bias, empirical variance, MSE and interval
//! coverage of each estimator over replicated simulated trials.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::bootstrap::{bca_interval, BootstrapConfig, DEFAULT_REPLICATES};
use crate::comparators::{self, ComparatorKind};
use crate::data::MultisiteDataset;
use crate::error::{Error, Result};
use crate::seeding::{derive_seed, hash_str};
use crate::simgen::{simulate_dataset, true_ate, DgpKnobs, ScenarioConfig, Variant};
use crate::stage2::{ate_estimator, cumulative_ate, stage2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Naive,
    NaiveAdj,
    Iptw,
    Ms2tiv,
    Ms2tivAdj,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Naive,
        EstimatorKind::NaiveAdj,
        EstimatorKind::Iptw,
        EstimatorKind::Ms2tiv,
        EstimatorKind::Ms2tivAdj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Naive => "naive",
            EstimatorKind::NaiveAdj => "naive_adj",
            EstimatorKind::Iptw => "iptw",
            EstimatorKind::Ms2tiv => "ms2tiv",
            EstimatorKind::Ms2tivAdj => "ms2tiv_adj",
        }
    }

    /// Point estimate on one dataset.
    pub fn estimate(self, dataset: &MultisiteDataset) -> Result<f64> {
        match self {
            EstimatorKind::Naive => comparators::run(ComparatorKind::Naive, dataset).map(|r| r.point),
            EstimatorKind::NaiveAdj => comparators::run(ComparatorKind::NaiveAdj, dataset).map(|r| r.point),
            EstimatorKind::Iptw => comparators::run(ComparatorKind::Iptw, dataset).map(|r| r.point),
            EstimatorKind::Ms2tiv => ate_estimator(false)(dataset),
            EstimatorKind::Ms2tivAdj => ate_estimator(true)(dataset),
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "unknown estimator `{s}`; expected one of: naive, naive_adj, iptw, ms2tiv, ms2tiv_adj"
            ))
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageMode {
    #[default]
    None,
    Improper,
    Bca,
    Both,
}

impl CoverageMode {
    pub fn improper(self) -> bool {
        matches!(self, CoverageMode::Improper | CoverageMode::Both)
    }

    pub fn bca(self) -> bool {
        matches!(self, CoverageMode::Bca | CoverageMode::Both)
    }
}

impl std::str::FromStr for CoverageMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CoverageMode::None),
            "improper" => Ok(CoverageMode::Improper),
            "bca" => Ok(CoverageMode::Bca),
            "both" => Ok(CoverageMode::Both),
            other => Err(Error::InvalidConfig(format!(
                "unknown coverage mode `{other}`; expected one of: none, improper, bca, both"
            ))),
        }
    }
}

/// The estimator whose intervals are evaluated for coverage.
pub const COVERAGE_ESTIMATOR: EstimatorKind = EstimatorKind::Ms2tivAdj;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub k: usize,
    pub n_k: usize,
    pub variant: Variant,
}

impl ScenarioSpec {
    pub fn new(k: usize, n_k: usize, variant: Variant) -> Self {
        Self { k, n_k, variant }
    }

    /// Stable name; replication seeds are derived from it.
    pub fn id(&self) -> String {
        format!("{}/K{}/n{}", self.variant.name(), self.k, self.n_k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub scenarios: Vec<ScenarioSpec>,
    pub replications: usize,
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub coverage: CoverageMode,
    #[serde(default = "default_bootstrap_b")]
    pub bootstrap_b: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Threads; `None` uses every available core. Results never depend on it.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "DgpKnobs::is_default")]
    pub knobs: DgpKnobs,
}

fn default_bootstrap_b() -> usize {
    DEFAULT_REPLICATES
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications < 2 {
            return Err(Error::InvalidConfig("replications must be at least 2".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidConfig("estimator set is empty".into()));
        }
        if self.scenarios.is_empty() {
            return Err(Error::InvalidConfig("scenario grid is empty".into()));
        }
        if self.coverage != CoverageMode::None && !self.estimators.contains(&COVERAGE_ESTIMATOR) {
            return Err(Error::InvalidConfig(format!(
                "coverage is evaluated for {COVERAGE_ESTIMATOR}; add it to the estimator set"
            )));
        }
        if self.coverage.bca() {
            BootstrapConfig::new(self.bootstrap_b, 0).validate()?;
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        for s in &self.scenarios {
            self.scenario_config(s, 0).validate()?;
        }
        Ok(())
    }

    pub fn replication_seed(&self, scenario: &ScenarioSpec, replication: usize) -> u64 {
        derive_seed(self.master_seed, &[hash_str(&scenario.id()), replication as u64])
    }

    pub fn scenario_config(&self, scenario: &ScenarioSpec, replication: usize) -> ScenarioConfig {
        let mut c = ScenarioConfig::new(
            scenario.k,
            scenario.n_k,
            scenario.variant,
            self.replication_seed(scenario, replication),
        );
        c.knobs = self.knobs.clone();
        c
    }
}

/// Named study configurations matching the published tables.
pub fn preset(name: &str) -> Option<StudyConfig> {
    let grid = |variant: Variant| -> Vec<ScenarioSpec> {
        [25, 100]
            .into_iter()
            .flat_map(|k| {
                [30, 100, 1000, 5000]
                    .into_iter()
                    .map(move |n| ScenarioSpec::new(k, n, variant))
            })
            .collect()
    };
    let estimation = |scenarios: Vec<ScenarioSpec>, reps: usize| StudyConfig {
        scenarios,
        replications: reps,
        estimators: EstimatorKind::ALL.to_vec(),
        coverage: CoverageMode::None,
        bootstrap_b: DEFAULT_REPLICATES,
        master_seed: 20_240_601,
        workers: None,
        knobs: DgpKnobs::default(),
    };
    let coverage = |scenarios: Vec<ScenarioSpec>, reps: usize, b: usize, mode: CoverageMode| StudyConfig {
        scenarios,
        replications: reps,
        estimators: vec![EstimatorKind::Ms2tivAdj],
        coverage: mode,
        bootstrap_b: b,
        master_seed: 20_240_602,
        workers: None,
        knobs: DgpKnobs::default(),
    };
    let base = Variant::Base;
    Some(match name {
        "table2" => estimation(grid(base), 500),
        "table2-quick" => estimation(
            vec![ScenarioSpec::new(25, 30, base), ScenarioSpec::new(25, 100, base)],
            100,
        ),
        "tableS1" => estimation(grid(Variant::Assumption2Violated), 500),
        "tableS2" => estimation(grid(Variant::Assumption3Violated), 500),
        "table3" => coverage(
            [
                (76, 60),
                (25, 30),
                (25, 100),
                (25, 1000),
                (100, 30),
                (100, 100),
                (100, 1000),
            ]
            .into_iter()
            .map(|(k, n)| ScenarioSpec::new(k, n, base))
            .collect(),
            500,
            DEFAULT_REPLICATES,
            CoverageMode::Both,
        ),
        "table3-improper" => coverage(
            [
                (76, 60),
                (25, 30),
                (25, 100),
                (25, 1000),
                (100, 30),
                (100, 100),
                (100, 1000),
            ]
            .into_iter()
            .map(|(k, n)| ScenarioSpec::new(k, n, base))
            .collect(),
            500,
            DEFAULT_REPLICATES,
            CoverageMode::Improper,
        ),
        "table3-row1" => coverage(
            vec![ScenarioSpec::new(76, 60, base)],
            500,
            DEFAULT_REPLICATES,
            CoverageMode::Both,
        ),
        "table3-bca-quick" => coverage(vec![ScenarioSpec::new(25, 100, base)], 200, 399, CoverageMode::Both),
        _ => return None,
    })
}

pub const PRESETS: [&str; 8] = [
    "table2",
    "table2-quick",
    "tableS1",
    "tableS2",
    "table3",
    "table3-improper",
    "table3-row1",
    "table3-bca-quick",
];

/// Outcome of one replication of one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub scenario: usize,
    pub replication: usize,
    pub seed: u64,
    /// Aligned with `StudyConfig::estimators`; `None` marks a failure.
    pub estimates: Vec<Option<f64>>,
    pub covered_improper: Option<bool>,
    pub covered_bca: Option<bool>,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub variant: Variant,
    pub k: usize,
    pub n_k: usize,
    pub estimator: EstimatorKind,
    pub true_ate: f64,
    pub replications: usize,
    pub successes: usize,
    pub mean: f64,
    pub bias: f64,
    /// Sample variance over successful replications, divisor `n − 1`.
    pub empirical_variance: f64,
    /// `bias² + empirical_variance`.
    pub mse: f64,
    pub coverage_improper: Option<f64>,
    pub coverage_bca: Option<f64>,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub cells: Vec<CellSummary>,
    /// Failure messages, first few per scenario and estimator.
    pub failure_examples: Vec<String>,
}

impl SimulationSummary {
    pub fn cell(&self, scenario: &ScenarioSpec, estimator: EstimatorKind) -> Option<&CellSummary> {
        self.cells.iter().find(|c| {
            c.variant == scenario.variant && c.k == scenario.k && c.n_k == scenario.n_k && c.estimator == estimator
        })
    }

    pub fn total_failures(&self) -> usize {
        self.cells.iter().map(|c| c.failures).sum()
    }
}

/// Runs one replication. Never fails: estimator errors become records.
pub fn run_replication(config: &StudyConfig, scenario_index: usize, replication: usize) -> ReplicationRecord {
    let scenario = &config.scenarios[scenario_index];
    let sc = config.scenario_config(scenario, replication);
    let mut record = ReplicationRecord {
        scenario: scenario_index,
        replication,
        seed: sc.seed,
        estimates: vec![None; config.estimators.len()],
        covered_improper: None,
        covered_bca: None,
        failures: Vec::new(),
    };
    let sim = match simulate_dataset(&sc) {
        Ok(s) => s,
        Err(e) => {
            record.failures.push(format!("simulation: {e}"));
            return record;
        }
    };
    let ds = &sim.dataset;
    let truth = true_ate(scenario.variant);
    for (slot, kind) in record.estimates.iter_mut().zip(&config.estimators) {
        if *kind == COVERAGE_ESTIMATOR && config.coverage.improper() {
            // Same point estimate, plus the improper interval.
            match crate::stage1::stage1_adjusted(ds).and_then(|s1| stage2(&s1)) {
                Ok(fit) => {
                    let r = cumulative_ate(&fit);
                    *slot = Some(r.point);
                    record.covered_improper = Some(r.improper_ci95.contains(truth));
                }
                Err(e) => record.failures.push(format!("{kind}: {e}")),
            }
            continue;
        }
        match kind.estimate(ds) {
            Ok(v) => *slot = Some(v),
            Err(e) => record.failures.push(format!("{kind}: {e}")),
        }
    }
    if config.coverage.bca() {
        let boot = BootstrapConfig::new(config.bootstrap_b, derive_seed(sc.seed, &[hash_str("bca")]));
        match bca_interval(ds, ate_estimator(true), &boot) {
            Ok(ci) => record.covered_bca = Some(ci.interval().contains(truth)),
            Err(e) => record.failures.push(format!("bca: {e}")),
        }
    }
    record
}

/// Runs `f` inside a pool of `workers` threads; parallel sections of the
/// library called from `f` use that pool.
#[cfg(feature = "parallel")]
pub fn with_thread_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(not(feature = "parallel"))]
pub fn with_thread_pool<T: Send>(_workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    Ok(f())
}

#[cfg(feature = "parallel")]
fn run_jobs<T: Send>(workers: Option<usize>, jobs: usize, f: impl Fn(usize) -> T + Sync + Send) -> Result<Vec<T>> {
    use rayon::prelude::*;
    let run = || (0..jobs).into_par_iter().map(&f).collect();
    match workers {
        Some(w) => with_thread_pool(w, run),
        None => Ok(run()),
    }
}

#[cfg(not(feature = "parallel"))]
fn run_jobs<T: Send>(_workers: Option<usize>, jobs: usize, f: impl Fn(usize) -> T + Sync + Send) -> Result<Vec<T>> {
    Ok((0..jobs).map(f).collect())
}

/// Every replication of every scenario, in (scenario, replication) order.
/// `progress` is called after each replication with (done, total).
pub fn run_replications(
    config: &StudyConfig,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<Vec<ReplicationRecord>> {
    config.validate()?;
    let reps = config.replications;
    let total = config.scenarios.len() * reps;
    let done = AtomicUsize::new(0);
    run_jobs(config.workers, total, |j| {
        let r = run_replication(config, j / reps, j % reps);
        progress(done.fetch_add(1, Ordering::Relaxed) + 1, total);
        r
    })
}

pub fn run_study(config: &StudyConfig) -> Result<SimulationSummary> {
    run_study_with_progress(config, &|_, _| {})
}

pub fn run_study_with_progress(
    config: &StudyConfig,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<SimulationSummary> {
    let records = run_replications(config, progress)?;
    Ok(summarize(config, &records))
}

fn rate(flags: impl Iterator<Item = Option<bool>>) -> Option<f64> {
    let (hit, n) = flags
        .flatten()
        .fold((0usize, 0usize), |(h, n), c| (h + usize::from(c), n + 1));
    (n > 0).then(|| hit as f64 / n as f64)
}

/// Aggregates records (in index order, so the result is bit-reproducible).
pub fn summarize(config: &StudyConfig, records: &[ReplicationRecord]) -> SimulationSummary {
    let mut cells = Vec::new();
    let mut failure_examples = Vec::new();
    for (si, scenario) in config.scenarios.iter().enumerate() {
        let recs: Vec<&ReplicationRecord> = records.iter().filter(|r| r.scenario == si).collect();
        let truth = true_ate(scenario.variant);
        for (ei, &estimator) in config.estimators.iter().enumerate() {
            let values: Vec<f64> = recs.iter().filter_map(|r| r.estimates[ei]).collect();
            let n = values.len();
            let mean = if n > 0 {
                values.iter().sum::<f64>() / n as f64
            } else {
                f64::NAN
            };
            let var = if n > 1 {
                values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            } else {
                f64::NAN
            };
            let bias = mean - truth;
            let is_cov = estimator == COVERAGE_ESTIMATOR;
            cells.push(CellSummary {
                variant: scenario.variant,
                k: scenario.k,
                n_k: scenario.n_k,
                estimator,
                true_ate: truth,
                replications: recs.len(),
                successes: n,
                mean,
                bias,
                empirical_variance: var,
                mse: bias * bias + var,
                coverage_improper: if is_cov {
                    rate(recs.iter().map(|r| r.covered_improper))
                } else {
                    None
                },
                coverage_bca: if is_cov {
                    rate(recs.iter().map(|r| r.covered_bca))
                } else {
                    None
                },
                failures: recs.len() - n,
            });
            let prefix = format!("{estimator}:");
            failure_examples.extend(
                recs.iter()
                    .flat_map(|r| {
                        r.failures
                            .iter()
                            .filter(|f| f.starts_with(&prefix))
                            .map(move |f| (r, f))
                    })
                    .take(3)
                    .map(|(r, f)| format!("{} rep {}: {f}", scenario.id(), r.replication)),
            );
        }
        failure_examples.extend(
            recs.iter()
                .flat_map(|r| {
                    r.failures
                        .iter()
                        .filter(|f| f.starts_with("bca:") || f.starts_with("simulation:"))
                        .map(move |f| (r, f))
                })
                .take(3)
                .map(|(r, f)| format!("{} rep {}: {f}", scenario.id(), r.replication)),
        );
    }
    SimulationSummary {
        cells,
        failure_examples,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Markdown,
    Csv,
    Json,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" | "md" => Ok(TableFormat::Markdown),
            "csv" => Ok(TableFormat::Csv),
            "json" => Ok(TableFormat::Json),
            other => Err(Error::InvalidConfig(format!(
                "unknown table format `{other}`; expected markdown, csv or json"
            ))),
        }
    }
}

pub const TABLE_COLUMNS: [&str; 10] = [
    "variant",
    "k",
    "n_k",
    "estimator",
    "bias",
    "emp_var",
    "mse",
    "coverage_improper",
    "coverage_bca",
    "failures",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn summarize_to_table(summary: &SimulationSummary, format: TableFormat) -> String {
    match format {
        TableFormat::Json => serde_json::to_string_pretty(summary).expect("summary is serializable"),
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(TABLE_COLUMNS).expect("in-memory write");
            for c in &summary.cells {
                w.write_record([
                    c.variant.name().to_string(),
                    c.k.to_string(),
                    c.n_k.to_string(),
                    c.estimator.name().to_string(),
                    c.bias.to_string(),
                    c.empirical_variance.to_string(),
                    c.mse.to_string(),
                    fmt_opt(c.coverage_improper),
                    fmt_opt(c.coverage_bca),
                    c.failures.to_string(),
                ])
                .expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
        }
        TableFormat::Markdown => {
            let mut out = String::new();
            let _ = writeln!(out, "| {} |", TABLE_COLUMNS.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(TABLE_COLUMNS.len()));
            let pct = |v: Option<f64>| v.map(|x| format!("{:.1}%", 100.0 * x)).unwrap_or_default();
            for c in &summary.cells {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {:.3} | {:.3} | {:.3} | {} | {} | {} |",
                    c.variant.name(),
                    c.k,
                    c.n_k,
                    c.estimator.name(),
                    c.bias,
                    c.empirical_variance,
                    c.mse,
                    pct(c.coverage_improper),
                    pct(c.coverage_bca),
                    c.failures
                );
            }
            out
        }
    }
}
