//! `ms2tiv` command-line tool.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 partial
//! computational failure (artifacts are still written).

mod artifacts;
mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::Serialize;

use ms2tiv::bootstrap::{bca_interval, BcaInterval, BootstrapConfig, DEFAULT_REPLICATES};
use ms2tiv::comparators::{self, ComparatorKind, ComparatorResult};
use ms2tiv::data::{self, ColumnMapping, MultisiteDataset};
use ms2tiv::harness::{
    self, preset, run_study_with_progress, summarize_to_table, CoverageMode, EstimatorKind, ScenarioSpec, StudyConfig,
    TableFormat, PRESETS,
};
use ms2tiv::sensitivity::{omitted_v_bias, OmittedVBias, SensitivityInputs};
use ms2tiv::simgen::{simulate_dataset, ScenarioConfig};
use ms2tiv::stage1::ComplianceDiagnostic;
use ms2tiv::stage2::{ate_estimator, estimate, AteResult, Stage2Fit};

use artifacts::{Failure, Manifest, OutputDir, Source};
use config::{load, parse_scenario, resolve_workers, AnalyzeFile, SensitivityFile, SimulateFile};

#[derive(Parser, Debug)]
#[command(
    name = "ms2tiv",
    version,
    about = "Cumulative ATE of two-phase treatments in multisite trials with Phase-II noncompliance"
)]
struct Cli {
    /// More detail on stderr (repeatable).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    /// No human summary on stdout.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a Monte Carlo study, or write one simulated dataset with --dataset.
    Simulate(SimulateArgs),
    /// Estimate the cumulative ATE from a CSV file.
    Analyze(AnalyzeArgs),
    /// Bias of the estimand when V is omitted from the site-level regression.
    Sensitivity(SensitivityArgs),
    /// Summarize a dataset, or print a preset study configuration.
    Describe(DescribeArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// TOML study configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named study (table2, table2-quick, tableS1, tableS2, table3, table3-improper, table3-row1, table3-bca-quick).
    #[arg(long)]
    preset: Option<String>,
    /// Scenario as K:N or K:N:variant (repeatable; replaces the file's grid).
    #[arg(long = "scenario", value_parser = parse_scenario)]
    scenarios: Vec<ScenarioSpec>,
    #[arg(long)]
    replications: Option<usize>,
    /// Comma-separated subset of naive, naive_adj, iptw, ms2tiv, ms2tiv_adj.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<EstimatorKind>>,
    /// none, improper, bca or both.
    #[arg(long)]
    coverage: Option<CoverageMode>,
    /// Bootstrap replicates per BCa interval.
    #[arg(long)]
    bootstrap_b: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Threads (default: $MS2TIV_WORKERS, else every core). Results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Table format on stdout; all three are written to the output directory.
    #[arg(long, default_value = "markdown")]
    format: TableFormat,
    /// Write a single simulated dataset (first scenario, --seed) instead of a study.
    #[arg(long)]
    dataset: bool,
}

#[derive(Args, Debug, Default)]
struct ColumnArgs {
    #[arg(long)]
    site_col: Option<String>,
    #[arg(long)]
    z_col: Option<String>,
    #[arg(long)]
    d_col: Option<String>,
    /// Intermediate outcome column; pass `none` when the file has none.
    #[arg(long)]
    v_col: Option<String>,
    #[arg(long)]
    y_col: Option<String>,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
}

impl ColumnArgs {
    fn resolve(&self, base: Option<ColumnMapping>) -> ColumnMapping {
        let mut m = base.unwrap_or_default();
        if let Some(s) = &self.site_col {
            m.site = s.clone();
        }
        if let Some(s) = &self.z_col {
            m.z = s.clone();
        }
        if let Some(s) = &self.d_col {
            m.d = s.clone();
        }
        if let Some(s) = &self.v_col {
            m.v = (s != "none").then(|| s.clone());
        }
        if let Some(s) = &self.y_col {
            m.y = s.clone();
        }
        if let Some(c) = &self.covariates {
            m.covariates = c.iter().filter(|s| !s.is_empty()).cloned().collect();
        }
        m
    }
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// TOML analysis configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV, one row per individual.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    columns: ColumnArgs,
    /// Stage 1 without covariates even when covariates are mapped.
    #[arg(long)]
    unadjusted: bool,
    /// Add a multilevel-bootstrap BCa interval.
    #[arg(long)]
    bca: bool,
    #[arg(long)]
    bootstrap_b: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated comparators to run: naive, naive_adj, iptw.
    #[arg(long, value_delimiter = ',')]
    comparators: Option<Vec<String>>,
    /// Report the point estimate in pooled within-site control-arm SD units.
    #[arg(long)]
    effect_size: bool,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SensitivityArgs {
    /// TOML file with any of the inputs below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    theta_v: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    cov_b1_a1: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    cov_b2_a1: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    cov_b1_b2: Option<f64>,
    #[arg(long)]
    var_b1: Option<f64>,
    #[arg(long)]
    var_b2: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    beta1: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    beta2: Option<f64>,
    /// Mean of α1k; enables the intercept shift.
    #[arg(long, allow_hyphen_values = true)]
    alpha1: Option<f64>,
    /// Comma-separated θV values; emits one CSV row per value.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta_v_grid: Option<Vec<f64>>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DescribeArgs {
    #[arg(long, conflicts_with = "preset")]
    data: Option<PathBuf>,
    #[command(flatten)]
    columns: ColumnArgs,
    /// Print the resolved configuration of a preset as TOML.
    #[arg(long)]
    preset: Option<String>,
    /// JSON instead of text.
    #[arg(long)]
    json: bool,
}

struct Ui {
    verbose: u8,
    quiet: bool,
}

impl Ui {
    fn out(&self, text: &str) {
        if !self.quiet {
            let mut o = std::io::stdout().lock();
            let _ = o.write_all(text.as_bytes());
            if !text.ends_with('\n') {
                let _ = o.write_all(b"\n");
            }
        }
    }

    fn info(&self, text: &str) {
        if self.verbose > 0 {
            eprintln!("{text}");
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { artifacts::EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let ui = Ui {
        verbose: cli.verbose,
        quiet: cli.quiet,
    };
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a, &ui),
        Command::Analyze(a) => cmd_analyze(a, &ui),
        Command::Sensitivity(a) => cmd_sensitivity(a, &ui),
        Command::Describe(a) => cmd_describe(a, &ui),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn unknown_preset(name: &str) -> Failure {
    Failure::input(format!("unknown preset `{name}`; available: {}", PRESETS.join(", ")))
}

/// Study configuration with the sources of seed and workers.
struct ResolvedStudy {
    config: StudyConfig,
    seed_source: Source,
    workers_source: Source,
    out: PathBuf,
}

fn resolve_study(a: &SimulateArgs) -> Result<ResolvedStudy, Failure> {
    let file: SimulateFile = match &a.config {
        Some(p) => load(p)?,
        None => SimulateFile::default(),
    };
    let preset_name = a.preset.as_ref().or(file.preset.as_ref());
    let base = match preset_name {
        Some(name) => Some(preset(name).ok_or_else(|| unknown_preset(name))?),
        None => None,
    };
    let scenarios = if !a.scenarios.is_empty() {
        a.scenarios.clone()
    } else if let Some(s) = file.scenarios.clone() {
        s
    } else if let Some(g) = &file.grid {
        g.scenarios()
    } else if let Some(b) = &base {
        b.scenarios.clone()
    } else {
        return Err(Failure::input(
            "no scenarios: give --preset, --scenario K:N[:variant], or `scenarios`/`grid` in the config file",
        ));
    };
    let (master_seed, seed_source) = match (a.seed, file.seed, &base) {
        (Some(s), _, _) => (s, Source::Flag),
        (None, Some(s), _) => (s, Source::ConfigFile),
        (None, None, Some(b)) => (b.master_seed, Source::Preset),
        (None, None, None) => (config::generated_seed(), Source::Generated),
    };
    let (workers, workers_source) = resolve_workers(a.workers, file.workers)?;
    let config = StudyConfig {
        scenarios,
        replications: a
            .replications
            .or(file.replications)
            .or(base.as_ref().map(|b| b.replications))
            .unwrap_or(500),
        estimators: a
            .estimators
            .clone()
            .or(file.estimators)
            .or(base.as_ref().map(|b| b.estimators.clone()))
            .unwrap_or_else(|| EstimatorKind::ALL.to_vec()),
        coverage: a
            .coverage
            .or(file.coverage)
            .or(base.as_ref().map(|b| b.coverage))
            .unwrap_or_default(),
        bootstrap_b: a
            .bootstrap_b
            .or(file.bootstrap_b)
            .or(base.as_ref().map(|b| b.bootstrap_b))
            .unwrap_or(DEFAULT_REPLICATES),
        master_seed,
        workers,
        knobs: file.knobs.or(base.map(|b| b.knobs)).unwrap_or_default(),
    };
    let out = a
        .out
        .clone()
        .or(file.output)
        .unwrap_or_else(|| PathBuf::from("ms2tiv-out"));
    Ok(ResolvedStudy {
        config,
        seed_source,
        workers_source,
        out,
    })
}

fn cmd_simulate(a: SimulateArgs, ui: &Ui) -> Result<(), Failure> {
    let r = resolve_study(&a)?;
    if a.dataset {
        return simulate_one_dataset(&r, ui);
    }
    r.config.validate()?;
    let mut out = OutputDir::create(&r.out)?;
    let total = r.config.scenarios.len() * r.config.replications;
    ui.info(&format!(
        "running {} scenario(s) x {} replications, seed {}",
        r.config.scenarios.len(),
        r.config.replications,
        r.config.master_seed
    ));
    let step = (total / 20).max(1);
    let progress = |done: usize, total: usize| {
        if ui.verbose > 0 && (done.is_multiple_of(step) || done == total) {
            eprintln!("  {done}/{total} replications");
        }
    };
    let summary = run_study_with_progress(&r.config, &progress)?;

    out.write_json("config.resolved.json", &r.config)?;
    for (name, format) in [
        ("summary.csv", TableFormat::Csv),
        ("summary.md", TableFormat::Markdown),
        ("summary.json", TableFormat::Json),
    ] {
        out.write(name, summarize_to_table(&summary, format).as_bytes())?;
    }
    let manifest = out.finish(Manifest {
        tool: "ms2tiv",
        version: env!("CARGO_PKG_VERSION"),
        command: "simulate",
        seed: Some(r.config.master_seed),
        seed_source: Some(r.seed_source),
        workers: r.config.workers,
        workers_source: r.workers_source,
        config: &r.config,
        outputs: Vec::new(),
    })?;
    ui.out(&summarize_to_table(&summary, a.format));
    ui.info(&format!("manifest: {}", manifest.display()));

    let failures = summary.total_failures();
    if failures > 0 {
        for f in &summary.failure_examples {
            eprintln!("  {f}");
        }
        return Err(Failure::partial(format!(
            "{failures} estimator run(s) failed across replications; see the failures column"
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct DatasetConfig<'a> {
    scenario: &'a ScenarioConfig,
}

fn simulate_one_dataset(r: &ResolvedStudy, ui: &Ui) -> Result<(), Failure> {
    let spec = r.config.scenarios[0];
    let mut sc = ScenarioConfig::new(spec.k, spec.n_k, spec.variant, r.config.master_seed);
    sc.knobs = r.config.knobs.clone();
    let sim = simulate_dataset(&sc)?;
    let mut out = OutputDir::create(&r.out)?;
    let mut csv = Vec::new();
    data::write_csv(&sim.dataset, &mut csv, &ColumnMapping::with_covariates(sim.dataset.p()))?;
    out.write("data.csv", &csv)?;
    out.write_json("truth.json", &sim.truth)?;
    out.finish(Manifest {
        tool: "ms2tiv",
        version: env!("CARGO_PKG_VERSION"),
        command: "simulate --dataset",
        seed: Some(sc.seed),
        seed_source: Some(r.seed_source),
        workers: None,
        workers_source: Source::Default,
        config: DatasetConfig { scenario: &sc },
        outputs: Vec::new(),
    })?;
    ui.out(&format!(
        "wrote {} individuals in {} sites ({}) to {}",
        sim.dataset.len(),
        sim.dataset.site_count(),
        spec.id(),
        r.out.join("data.csv").display()
    ));
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeConfig {
    data: PathBuf,
    columns: ColumnMapping,
    adjusted: bool,
    bca: bool,
    bootstrap_b: usize,
    seed: Option<u64>,
    comparators: Vec<ComparatorKind>,
    effect_size: bool,
}

#[derive(Serialize)]
struct AteReport<'a> {
    #[serde(flatten)]
    ate: &'a AteResult,
    adjusted: bool,
    k_used: usize,
    excluded_sites: usize,
    compliance: ComplianceDiagnostic,
    #[serde(skip_serializing_if = "Option::is_none")]
    bca: Option<BcaSummary>,
}

#[derive(Serialize)]
struct BcaSummary {
    z0: f64,
    acceleration: f64,
    alpha_lower: f64,
    alpha_upper: f64,
    b_requested: usize,
    b_effective: usize,
    failed: usize,
    z0_clamped: bool,
    jackknife_failed: usize,
}

impl From<&BcaInterval> for BcaSummary {
    fn from(b: &BcaInterval) -> Self {
        Self {
            z0: b.z0,
            acceleration: b.acceleration,
            alpha_lower: b.alpha_lower,
            alpha_upper: b.alpha_upper,
            b_requested: b.b_requested,
            b_effective: b.b_effective,
            failed: b.failed,
            z0_clamped: b.z0_clamped,
            jackknife_failed: b.jackknife_failed,
        }
    }
}

fn parse_comparator(name: &str) -> Result<ComparatorKind, Failure> {
    match name.trim() {
        "naive" => Ok(ComparatorKind::Naive),
        "naive_adj" => Ok(ComparatorKind::NaiveAdj),
        "iptw" => Ok(ComparatorKind::Iptw),
        other => Err(Failure::input(format!(
            "unknown comparator `{other}`; expected naive, naive_adj or iptw"
        ))),
    }
}

fn load_dataset(path: &Path, mapping: &ColumnMapping) -> Result<MultisiteDataset, Failure> {
    data::load_csv(path, mapping).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn cmd_analyze(a: AnalyzeArgs, ui: &Ui) -> Result<(), Failure> {
    let file: AnalyzeFile = match &a.config {
        Some(p) => load(p)?,
        None => AnalyzeFile::default(),
    };
    let data_path = a
        .data
        .clone()
        .or(file.data.clone())
        .ok_or_else(|| Failure::input("missing input: pass --data FILE or set `data` in the config file"))?;
    let columns = a.columns.resolve(file.columns.clone());
    let comparators = a
        .comparators
        .clone()
        .or(file.comparators.clone())
        .unwrap_or_default()
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_comparator(s))
        .collect::<Result<Vec<_>, _>>()?;
    let bca = a.bca || file.bca.unwrap_or(false);
    let (seed, seed_source) = match (a.seed, file.seed) {
        (Some(s), _) => (Some(s), Some(Source::Flag)),
        (None, Some(s)) => (Some(s), Some(Source::ConfigFile)),
        (None, None) if bca => (Some(config::generated_seed()), Some(Source::Generated)),
        _ => (None, None),
    };
    let (workers, workers_source) = resolve_workers(a.workers, file.workers)?;
    let resolved = AnalyzeConfig {
        data: data_path.clone(),
        adjusted: !a.unadjusted && file.adjusted.unwrap_or(true) && !columns.covariates.is_empty(),
        columns,
        bca,
        bootstrap_b: a.bootstrap_b.or(file.bootstrap_b).unwrap_or(DEFAULT_REPLICATES),
        seed,
        comparators,
        effect_size: a.effect_size || file.effect_size.unwrap_or(false),
    };
    let out_dir = a
        .out
        .clone()
        .or(file.output.clone())
        .unwrap_or_else(|| PathBuf::from("ms2tiv-out"));

    let ds = load_dataset(&data_path, &resolved.columns)?;
    ui.info(&format!("loaded {} individuals in {} sites", ds.len(), ds.site_count()));
    let est = estimate(&ds, resolved.adjusted)
        .map_err(|e| Failure::input(format!("estimation failed on {}: {e}", data_path.display())))?;
    let mut ate = est.ate.clone();
    if !resolved.effect_size {
        ate.effect_size = None;
    }

    let mut partial = Vec::new();
    let mut bca_summary = None;
    if resolved.bca {
        let boot = BootstrapConfig::new(resolved.bootstrap_b, seed.unwrap_or_default());
        let run = || bca_interval(&ds, ate_estimator(resolved.adjusted), &boot);
        match with_workers(workers, run)? {
            Ok(ci) => {
                ate.bca_ci95 = Some(ci.interval());
                bca_summary = Some(BcaSummary::from(&ci));
            }
            Err(e) => partial.push(format!("BCa interval: {e}")),
        }
    }
    let mut comparator_results: Vec<ComparatorResult> = Vec::new();
    for &kind in &resolved.comparators {
        match comparators::run(kind, &ds) {
            Ok(r) => comparator_results.push(r),
            Err(e) => partial.push(format!("{}: {e}", kind.name())),
        }
    }

    let mut out = OutputDir::create(&out_dir)?;
    out.write_json(
        "ate.json",
        &AteReport {
            ate: &ate,
            adjusted: resolved.adjusted,
            k_used: est.fit.k_used,
            excluded_sites: est.stage1.excluded_sites.len(),
            compliance: est.stage1.compliance_diagnostic(),
            bca: bca_summary,
        },
    )?;
    let mut buf = Vec::new();
    est.stage1.write_csv(&mut buf)?;
    out.write("stage1.csv", &buf)?;
    out.write_json("stage2.json", &est.fit as &Stage2Fit)?;
    let mut buf = Vec::new();
    est.fit.write_site_csv(&est.stage1, &mut buf)?;
    out.write("stage2_sites.csv", &buf)?;
    if !est.stage1.excluded_sites.is_empty() {
        out.write_json("excluded_sites.json", &est.stage1.excluded_sites)?;
    }
    if !resolved.comparators.is_empty() {
        out.write_json("comparators.json", &comparator_results)?;
    }
    out.finish(Manifest {
        tool: "ms2tiv",
        version: env!("CARGO_PKG_VERSION"),
        command: "analyze",
        seed,
        seed_source,
        workers,
        workers_source,
        config: &resolved,
        outputs: Vec::new(),
    })?;

    let mut text = format!(
        "cumulative ATE {:.4} ({} stage 1, {} sites used, {} excluded)\n  improper 95% CI [{:.4}, {:.4}]\n",
        ate.point,
        if resolved.adjusted {
            "covariate-adjusted"
        } else {
            "unadjusted"
        },
        est.fit.k_used,
        est.stage1.excluded_sites.len(),
        ate.improper_ci95.lower,
        ate.improper_ci95.upper
    );
    if let Some(ci) = ate.bca_ci95 {
        text += &format!("  BCa 95% CI      [{:.4}, {:.4}]\n", ci.lower, ci.upper);
    }
    if let Some(es) = ate.effect_size {
        text += &format!("  effect size {es:.4}\n");
    }
    for r in &comparator_results {
        text += &format!("  {} {:.4}\n", r.estimator.name(), r.point);
    }
    let diag = est.stage1.compliance_diagnostic();
    if diag.weak > 0 || diag.negative > 0 {
        text += &format!(
            "  note: {} site(s) with |beta1| < {} and {} with negative beta1\n",
            diag.weak,
            ms2tiv::stage1::WEAK_COMPLIANCE_EFFECT,
            diag.negative
        );
    }
    text += &format!("  artifacts in {}", out_dir.display());
    ui.out(&text);
    if partial.is_empty() {
        Ok(())
    } else {
        Err(Failure::partial(partial.join("; ")))
    }
}

/// Runs `f` on a pool of `workers` threads, or on every core.
fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Failure> {
    match workers {
        None => Ok(f()),
        Some(w) => harness::with_thread_pool(w, f).map_err(Failure::from),
    }
}

#[derive(Serialize)]
struct SensitivityReport {
    inputs: SensitivityInputs,
    bias: OmittedVBias,
}

fn cmd_sensitivity(a: SensitivityArgs, ui: &Ui) -> Result<(), Failure> {
    let file: SensitivityFile = match &a.config {
        Some(p) => load(p)?,
        None => SensitivityFile::default(),
    };
    let grid = a.theta_v_grid.clone().or(file.theta_v_grid.clone());
    let fields: [(&str, Option<f64>); 8] = [
        ("--theta-v", a.theta_v.or(file.theta_v)),
        ("--cov-b1-a1", a.cov_b1_a1.or(file.cov_b1_a1)),
        ("--cov-b2-a1", a.cov_b2_a1.or(file.cov_b2_a1)),
        ("--cov-b1-b2", a.cov_b1_b2.or(file.cov_b1_b2)),
        ("--var-b1", a.var_b1.or(file.var_b1)),
        ("--var-b2", a.var_b2.or(file.var_b2)),
        ("--beta1", a.beta1.or(file.beta1)),
        ("--beta2", a.beta2.or(file.beta2)),
    ];
    let missing: Vec<&str> = fields
        .iter()
        .enumerate()
        .filter(|(i, (_, v))| v.is_none() && !(*i == 0 && grid.is_some()))
        .map(|(_, (name, _))| *name)
        .collect();
    if !missing.is_empty() {
        return Err(Failure::input(format!(
            "missing required value(s): {}\n\nUsage: ms2tiv sensitivity --theta-v <θV> --cov-b1-a1 <C> --cov-b2-a1 <C> --cov-b1-b2 <C> --var-b1 <V> --var-b2 <V> --beta1 <B> --beta2 <B> [--alpha1 <A>] [--theta-v-grid <LIST>]\n(values may also come from --config FILE)",
            missing.join(", ")
        )));
    }
    let v = |i: usize| fields[i].1.unwrap_or(0.0);
    let inputs = SensitivityInputs {
        theta_v: v(0),
        cov_b1_a1: v(1),
        cov_b2_a1: v(2),
        cov_b1_b2: v(3),
        var_b1: v(4),
        var_b2: v(5),
        beta1: v(6),
        beta2: v(7),
        alpha1: a.alpha1.or(file.alpha1),
    };
    let out_dir = a.out.clone().or(file.output.clone());
    let mut out = out_dir.as_deref().map(OutputDir::create).transpose()?;

    let text = match &grid {
        None => {
            let report = SensitivityReport {
                inputs,
                bias: omitted_v_bias(&inputs)?,
            };
            let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::input(e.to_string()))? + "\n";
            if let Some(o) = out.as_mut() {
                o.write("sensitivity.json", json.as_bytes())?;
            }
            json
        }
        Some(values) => {
            let mut csv = String::from("theta_v,d_gamma1,d_gamma2,d_gamma3,total_bias\n");
            for &t in values {
                let b = omitted_v_bias(&SensitivityInputs { theta_v: t, ..inputs })?;
                let g1 = b.d_gamma1.map(|x| x.to_string()).unwrap_or_default();
                csv += &format!("{t},{g1},{},{},{}\n", b.d_gamma2, b.d_gamma3, b.total_bias);
            }
            if let Some(o) = out.as_mut() {
                o.write("sensitivity_grid.csv", csv.as_bytes())?;
            }
            csv
        }
    };
    if let Some(o) = out {
        #[derive(Serialize)]
        struct Resolved<'a> {
            inputs: SensitivityInputs,
            theta_v_grid: &'a Option<Vec<f64>>,
        }
        o.finish(Manifest {
            tool: "ms2tiv",
            version: env!("CARGO_PKG_VERSION"),
            command: "sensitivity",
            seed: None,
            seed_source: None,
            workers: None,
            workers_source: Source::Default,
            config: Resolved {
                inputs,
                theta_v_grid: &grid,
            },
            outputs: Vec::new(),
        })?;
    }
    ui.out(&text);
    Ok(())
}

fn cmd_describe(a: DescribeArgs, ui: &Ui) -> Result<(), Failure> {
    if let Some(name) = &a.preset {
        let p = preset(name).ok_or_else(|| unknown_preset(name))?;
        let text = if a.json {
            serde_json::to_string_pretty(&p).map_err(|e| Failure::input(e.to_string()))?
        } else {
            toml::to_string_pretty(&p).map_err(|e| Failure::input(e.to_string()))?
        };
        ui.out(&text);
        return Ok(());
    }
    let Some(path) = &a.data else {
        return Err(Failure::input(format!(
            "nothing to describe: pass --data FILE or --preset NAME (presets: {})",
            PRESETS.join(", ")
        )));
    };
    let ds = load_dataset(path, &a.columns.resolve(None))?;
    let report = data::describe(&ds);
    if a.json {
        ui.out(&serde_json::to_string_pretty(&report).map_err(|e| Failure::input(e.to_string()))?);
        return Ok(());
    }
    let mut text = format!(
        "{} sites, {} individuals ({} control, {} treated), {} covariate(s), V {}\n\
         noncompliance: control arm {:.1}% took up, treated arm {:.1}% declined\n\
         treated fraction per site: {:.3} to {:.3}\n",
        report.k,
        report.n_total,
        report.n_control,
        report.n_treated,
        ds.p(),
        if ds.has_v() { "present" } else { "absent" },
        100.0 * report.noncompliance_control,
        100.0 * report.noncompliance_treated,
        report.min_treated_fraction,
        report.max_treated_fraction,
    );
    if ds.has_v() {
        if let Ok(s1) = ms2tiv::stage1::stage1_unadjusted(&ds) {
            let d = s1.compliance_diagnostic();
            text += &format!(
                "site ITT on D: min {:.3}, mean {:.3}, max {:.3}; {} negative, {} weak\n",
                d.min, d.mean, d.max, d.negative, d.weak
            );
        }
    }
    ui.out(&text);
    Ok(())
}
