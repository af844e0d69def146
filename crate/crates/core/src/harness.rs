//! Experiment orchestration behind the command-line tool: config files,
//! multi-seed runs, aggregation and CSV/JSON output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checks::{self, CheckResult, Kernels};
use crate::cv::CvSet;
use crate::engine::{self, IterationRecord, Projection, ProbeConfig, RunConfig, RunOutcome, SensitivityConfig, SensitivityRow};
use crate::error::Error;
use crate::model::{self, Dataset};
use crate::par::Execution;
use crate::stats::mean_stderr;
use crate::synthetic;

/// Prefix for datasets generated in memory instead of read from disk.
pub const BUILTIN_PREFIX: &str = "builtin:";
pub const BUILTIN_DATASETS: [&str; 2] = ["blobs2d", "australian_like"];

/// A flat key/value experiment description. Missing keys take defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// CSV path (relative paths resolve against the config file's directory)
    /// or `builtin:blobs2d` / `builtin:australian_like`.
    pub dataset: String,
    pub lr: Vec<f64>,
    pub iterations: usize,
    pub batch: usize,
    pub momentum: f64,
    pub gamma: f64,
    pub v0: f64,
    /// Subset names (`none`, `S4`..`S7`, single ids) or comma-separated id lists.
    pub cvs: Vec<String>,
    /// Seed of the first run; run `k` uses `seed + k`.
    pub seed: u64,
    pub seeds: usize,
    pub local_reparam: bool,
    pub elbo_samples: usize,
    pub projection: Projection,
    pub timing: bool,
    pub out: PathBuf,
    pub v0_grid: Vec<f64>,
    pub m_grid: Vec<usize>,
    pub lags: Vec<usize>,
    pub probe_reps: usize,
    pub probe_outer: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let run = RunConfig::default();
        ExperimentConfig {
            dataset: format!("{BUILTIN_PREFIX}blobs2d"),
            lr: vec![run.lr],
            iterations: run.iterations,
            batch: run.batch,
            momentum: run.momentum,
            gamma: run.gamma,
            v0: run.v0,
            cvs: vec!["none".into()],
            seed: 0,
            seeds: 50,
            local_reparam: run.local_reparam,
            elbo_samples: run.elbo_samples,
            projection: run.projection,
            timing: run.timing,
            out: PathBuf::from("results"),
            v0_grid: vec![0.0, 1e-5, 1e-3, 1e-1, 10.0],
            m_grid: vec![10, 100],
            lags: vec![0, 10],
            probe_reps: 100,
            probe_outer: 100,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, Failure> {
        serde_json::from_str(text).map_err(|e| Failure::config(format!("cannot parse config: {e}")))
    }

    pub fn to_json(&self) -> Result<String, Failure> {
        serde_json::to_string_pretty(self).map_err(|e| Failure::config(e.to_string()))
    }

    /// Reads a config file and resolves a relative dataset path against
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)
            .map_err(|f| Failure::config(format!("{}: {}", path.display(), f.message)))?;
        if !cfg.dataset.starts_with(BUILTIN_PREFIX) && Path::new(&cfg.dataset).is_relative() {
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.dataset = base.join(&cfg.dataset).to_string_lossy().into_owned();
        }
        Ok(cfg)
    }

    pub fn cv_sets(&self) -> Result<Vec<CvSet>, Failure> {
        if self.cvs.is_empty() {
            return Err(Failure::config("at least one control-variate set is required"));
        }
        self.cvs
            .iter()
            .map(|s| CvSet::parse(s).map_err(Failure::from))
            .collect()
    }

    pub fn run_config(&self, lr: f64, cvs: CvSet, seed: u64) -> RunConfig {
        RunConfig {
            lr,
            iterations: self.iterations,
            batch: self.batch,
            momentum: self.momentum,
            gamma: self.gamma,
            v0: self.v0,
            cvs,
            seed,
            local_reparam: self.local_reparam,
            elbo_samples: self.elbo_samples,
            projection: self.projection,
            timing: self.timing,
            // seeds are the parallel axis; each run stays on one thread
            execution: Execution::Sequential,
        }
    }

    fn validate(&self) -> Result<(), Failure> {
        if self.seeds == 0 {
            return Err(Failure::config("seeds must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(Failure::config("iterations must be at least 1"));
        }
        let probe = self.run_config(1.0, CvSet::empty(), 0);
        for &lr in &self.lr {
            RunConfig { lr, ..probe.clone() }.validate()?;
        }
        Ok(())
    }
}

/// A failed command with its process exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub const CONFIG: i32 = 1;
    pub const DATASET: i32 = 2;
    pub const NUMERICAL: i32 = 3;
    pub const CHECKS: i32 = 4;

    pub fn config(message: impl Into<String>) -> Self {
        Failure { code: Self::CONFIG, message: message.into() }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Parse { .. } | Error::Label { .. } | Error::EmptyDataset(_) => Failure::DATASET,
            Error::Linalg(_) | Error::SingularMoments { .. } | Error::NonFinite(_) => Failure::NUMERICAL,
            _ => Failure::CONFIG,
        };
        Failure { code, message: e.to_string() }
    }
}

pub fn load_dataset(spec: &str) -> Result<Dataset, Failure> {
    match spec.strip_prefix(BUILTIN_PREFIX) {
        Some("blobs2d") => Ok(checks::blobs()),
        Some("australian_like") => Ok(synthetic::australian_like(0)),
        Some(other) => Err(Failure {
            code: Failure::DATASET,
            message: format!(
                "unknown built-in dataset {other:?}; available: {}",
                BUILTIN_DATASETS.join(", ")
            ),
        }),
        None => model::load_dataset(spec).map_err(|e| Failure { code: Failure::DATASET, message: e.to_string() }),
    }
}

/// Independent runs for seeds `seed, seed+1, …`, in seed order.
pub fn run_seeds(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    lr: f64,
    cvs: &CvSet,
    exec: Execution,
) -> Result<Vec<RunOutcome>, Failure> {
    let outcomes = exec.map(cfg.seeds, |k| {
        engine::run_inference(ds, &cfg.run_config(lr, cvs.clone(), cfg.seed + k as u64))
    });
    outcomes.into_iter().map(|o| o.map_err(Failure::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub iter: usize,
    pub elbo_mean: f64,
    pub elbo_stderr: f64,
    /// Runs that reached this iteration.
    pub runs: usize,
}

/// Per-iteration mean and standard error of the ELBO across runs. Row 0 is
/// the initial ELBO; runs that stopped early drop out of later rows.
pub fn summarize(outcomes: &[RunOutcome]) -> Vec<SummaryRow> {
    let len = outcomes.iter().map(|o| o.records.len()).max().unwrap_or(0);
    (0..=len)
        .map(|i| {
            let values: Vec<f64> = outcomes
                .iter()
                .filter_map(|o| if i == 0 { Some(o.initial_elbo) } else { o.records.get(i - 1).map(|r| r.elbo) })
                .collect();
            let (elbo_mean, elbo_stderr) = mean_stderr(&values);
            SummaryRow { iter: i, elbo_mean, elbo_stderr, runs: values.len() }
        })
        .collect()
}

pub fn trace_csv(records: &[IterationRecord]) -> String {
    let mut s = String::from("iter,elbo,grad_sq_norm,weight_norm,ms\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{}", r.iter, r.elbo, r.grad_sq_norm, r.weight_norm, r.ms);
    }
    s
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("iter,elbo_mean,elbo_stderr,runs\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.iter, r.elbo_mean, r.elbo_stderr, r.runs);
    }
    s
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure::config(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, contents).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub outcomes: Vec<RunOutcome>,
    pub summary: Vec<SummaryRow>,
    pub files: Vec<PathBuf>,
}

impl FitReport {
    /// `seed k: message` for every run stopped by a numerical failure.
    pub fn aborts(&self, first_seed: u64) -> Vec<String> {
        self.outcomes
            .iter()
            .enumerate()
            .filter_map(|(k, o)| o.abort.as_ref().map(|a| format!("seed {}: {a}", first_seed + k as u64)))
            .collect()
    }
}

/// Runs every seed for one learning rate and one CV set, then writes one
/// trace per run plus `summary.csv` and `summary.json`. Files are written
/// even when some runs abort; the caller decides the exit status.
pub fn cmd_fit(cfg: &ExperimentConfig, exec: Execution) -> Result<FitReport, Failure> {
    cfg.validate()?;
    let [lr] = cfg.lr[..] else {
        return Err(Failure::config(format!("fit takes exactly one learning rate, got {}", cfg.lr.len())));
    };
    let sets = cfg.cv_sets()?;
    let [set] = &sets[..] else {
        return Err(Failure::config(format!("fit takes exactly one control-variate set, got {}", sets.len())));
    };
    let ds = load_dataset(&cfg.dataset)?;
    let outcomes = run_seeds(&ds, cfg, lr, set, exec)?;
    let summary = summarize(&outcomes);
    let mut files = Vec::new();
    for (k, o) in outcomes.iter().enumerate() {
        let path = cfg.out.join(format!("trace_seed{}.csv", cfg.seed + k as u64));
        write_atomic(&path, &trace_csv(&o.records))?;
        files.push(path);
    }
    let path = cfg.out.join("summary.csv");
    write_atomic(&path, &summary_csv(&summary))?;
    files.push(path);
    let path = cfg.out.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Failure::config(e.to_string()))?;
    write_atomic(&path, &(json + "\n"))?;
    files.push(path);
    Ok(FitReport { outcomes, summary, files })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lr: f64,
    pub subset: String,
    /// Mean over runs that finished all iterations; NaN if none did.
    pub final_elbo_mean: f64,
    pub final_elbo_stderr: f64,
    /// Runs that diverged or aborted.
    pub diverged_fraction: f64,
}

pub fn sweep_row(lr: f64, subset: &str, outcomes: &[RunOutcome]) -> SweepRow {
    let finals: Vec<f64> = outcomes.iter().filter(|o| o.abort.is_none()).map(RunOutcome::final_elbo).collect();
    let (mean, stderr) = mean_stderr(&finals);
    let diverged = outcomes.iter().filter(|o| o.diverged).count();
    SweepRow {
        lr,
        subset: subset.to_string(),
        final_elbo_mean: mean,
        final_elbo_stderr: stderr,
        diverged_fraction: diverged as f64 / outcomes.len().max(1) as f64,
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("lr,subset,final_elbo_mean,final_elbo_stderr,diverged_fraction\n");
    for r in rows {
        // quote subset names that contain commas
        let subset = if r.subset.contains(',') { format!("\"{}\"", r.subset) } else { r.subset.clone() };
        let _ = writeln!(s, "{},{},{},{},{}", r.lr, subset, r.final_elbo_mean, r.final_elbo_stderr, r.diverged_fraction);
    }
    s
}

/// Learning rates in first-seen order without repeats, and the repeats.
pub fn dedup_lrs(lrs: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut seen = BTreeMap::new();
    let mut unique = Vec::new();
    let mut dups = Vec::new();
    for &lr in lrs {
        if seen.insert(lr.to_bits(), ()).is_some() {
            dups.push(lr);
        } else {
            unique.push(lr);
        }
    }
    (unique, dups)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub duplicate_lrs: Vec<f64>,
    pub file: PathBuf,
}

/// Cross product of learning rates and CV sets. Aborted runs count as
/// diverged rather than failing the command.
pub fn cmd_sweep(cfg: &ExperimentConfig, exec: Execution) -> Result<SweepReport, Failure> {
    cfg.validate()?;
    let (lrs, duplicate_lrs) = dedup_lrs(&cfg.lr);
    if lrs.is_empty() {
        return Err(Failure::config("sweep needs a nonempty learning-rate list"));
    }
    let sets = cfg.cv_sets()?;
    let ds = load_dataset(&cfg.dataset)?;
    let mut rows = Vec::new();
    for &lr in &lrs {
        for set in &sets {
            let outcomes = run_seeds(&ds, cfg, lr, set, exec)?;
            rows.push(sweep_row(lr, set.name(), &outcomes));
        }
    }
    let file = cfg.out.join("sweep.csv");
    write_atomic(&file, &sweep_csv(&rows))?;
    Ok(SweepReport { rows, duplicate_lrs, file })
}

pub fn sensitivity_csv(rows: &[SensitivityRow]) -> String {
    let mut s = String::from("v0,M,lag,grad_sq_norm_mean,stderr\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.v0, r.m, r.lag, r.grad_sq_norm_mean, r.stderr);
    }
    s
}

pub fn sensitivity_config(cfg: &ExperimentConfig, exec: Execution) -> Result<SensitivityConfig, Failure> {
    let sets = cfg.cv_sets()?;
    let [set] = &sets[..] else {
        return Err(Failure::config(format!(
            "sensitivity takes exactly one control-variate set, got {}",
            sets.len()
        )));
    };
    if set.is_empty() {
        return Err(Failure::config("sensitivity needs at least one control variate"));
    }
    if cfg.v0_grid.is_empty() || cfg.m_grid.is_empty() || cfg.lags.is_empty() {
        return Err(Failure::config("v0_grid, m_grid and lags must all be nonempty"));
    }
    Ok(SensitivityConfig {
        probe: ProbeConfig {
            cvs: set.clone(),
            v0: cfg.v0,
            m: cfg.m_grid[0],
            n_outer: cfg.probe_outer,
            reps: cfg.probe_reps,
            batch: cfg.batch,
            seed: cfg.seed,
            local_reparam: cfg.local_reparam,
            execution: exec,
        },
        v0_grid: cfg.v0_grid.clone(),
        m_grid: cfg.m_grid.clone(),
        lags: cfg.lags.clone(),
        momentum: cfg.momentum,
    })
}

pub fn cmd_sensitivity(cfg: &ExperimentConfig, exec: Execution) -> Result<(Vec<SensitivityRow>, PathBuf), Failure> {
    let scfg = sensitivity_config(cfg, exec)?;
    let ds = load_dataset(&cfg.dataset)?;
    let rows = engine::sensitivity_sweep(&ds, &scfg)?;
    let file = cfg.out.join("sensitivity.csv");
    write_atomic(&file, &sensitivity_csv(&rows))?;
    Ok((rows, file))
}

/// Runs the property suite. The error names the first failing property.
pub fn cmd_checks(kernels: &Kernels, exec: Execution) -> (Vec<CheckResult>, Result<(), Failure>) {
    let results = checks::run_checks(kernels, exec);
    let status = match results.iter().find(|r| !r.passed) {
        Some(r) => Err(Failure {
            code: Failure::CHECKS,
            message: format!("property {} failed: {}", r.name, r.detail),
        }),
        None => Ok(()),
    };
    (results, status)
}

pub fn checks_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for r in results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "{status}  {:width$}  {}", r.name, r.detail);
    }
    let passed = results.iter().filter(|r| r.passed).count();
    let _ = writeln!(s, "{passed}/{} properties passed", results.len());
    s
}
