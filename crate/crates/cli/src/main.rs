use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cvvi::checks::Kernels;
use cvvi::harness::{self, ExperimentConfig, Failure};
use cvvi::par::Execution;
use cvvi::synthetic;

/// Black-box variational inference for Bayesian logistic regression with
/// combined control variates.
#[derive(Parser)]
#[command(name = "cvvi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed for one learning rate and one CV set; write traces and a summary.
    Fit(Overrides),
    /// Run every (learning rate, CV set) pair and write sweep.csv.
    Sweep(Overrides),
    /// Probe gradient variance over v0 and M grids and write sensitivity.csv.
    Sensitivity(Overrides),
    /// Run the named property suite.
    Checks {
        /// Run everything on the calling thread.
        #[arg(long)]
        sequential: bool,
    },
    /// Write a bundled synthetic dataset as CSV.
    GenData {
        /// blobs2d or australian_like
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Default)]
struct Overrides {
    /// Flat JSON config; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV path or builtin:blobs2d / builtin:australian_like.
    #[arg(long)]
    dataset: Option<String>,
    /// Learning rate; repeat for a list.
    #[arg(long)]
    lr: Vec<f64>,
    /// CV set (none, S4..S7, c1..c7, score, or a comma list); repeat for several.
    #[arg(long)]
    cvs: Vec<String>,
    /// Number of seeds, starting at --seed.
    #[arg(long)]
    seeds: Option<usize>,
    /// First seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Prior scale for the weight regularizer (0 gives the plain optimal weights).
    #[arg(long)]
    v0: Option<f64>,
    /// Decay of the exponential moment averages.
    #[arg(long)]
    gamma: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the local reparameterization for the data term.
    #[arg(long)]
    local_reparam: bool,
    /// Sensitivity: comma-separated v0 values.
    #[arg(long, value_delimiter = ',')]
    v0_grid: Option<Vec<f64>>,
    /// Sensitivity: comma-separated sample counts M.
    #[arg(long, value_delimiter = ',')]
    m_grid: Option<Vec<usize>>,
    /// Sensitivity: comma-separated weight staleness in iterations.
    #[arg(long, value_delimiter = ',')]
    lags: Option<Vec<usize>>,
    /// Run everything on the calling thread.
    #[arg(long)]
    sequential: bool,
}

impl Overrides {
    fn resolve(&self) -> Result<(ExperimentConfig, Execution), Failure> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(d) = &self.dataset {
            cfg.dataset = d.clone();
        }
        if !self.lr.is_empty() {
            cfg.lr = self.lr.clone();
        }
        if !self.cvs.is_empty() {
            cfg.cvs = self.cvs.clone();
        }
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                }
            )*};
        }
        take!(seeds, seed, iterations, v0, gamma, out, v0_grid, m_grid, lags);
        cfg.local_reparam |= self.local_reparam;
        Ok((cfg, execution(self.sequential)))
    }
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn fit(o: &Overrides) -> Result<(), Failure> {
    let (cfg, exec) = o.resolve()?;
    let report = harness::cmd_fit(&cfg, exec)?;
    let last = report.summary.last().expect("summary has the initial row");
    println!(
        "{} runs, final mean ELBO {} ± {} ({} runs reached iteration {})",
        report.outcomes.len(),
        last.elbo_mean,
        last.elbo_stderr,
        last.runs,
        last.iter
    );
    println!("wrote {} files to {}", report.files.len(), cfg.out.display());
    let aborts = report.aborts(cfg.seed);
    if aborts.is_empty() {
        Ok(())
    } else {
        for a in &aborts {
            eprintln!("{a}");
        }
        Err(Failure {
            code: Failure::NUMERICAL,
            message: format!("{} of {} runs aborted", aborts.len(), report.outcomes.len()),
        })
    }
}

fn sweep(o: &Overrides) -> Result<(), Failure> {
    let (cfg, exec) = o.resolve()?;
    let (_, dups) = harness::dedup_lrs(&cfg.lr);
    for lr in dups {
        eprintln!("warning: learning rate {lr} listed more than once; running it once");
    }
    let report = harness::cmd_sweep(&cfg, exec)?;
    print!("{}", harness::sweep_csv(&report.rows));
    println!("wrote {}", report.file.display());
    Ok(())
}

fn sensitivity(o: &Overrides) -> Result<(), Failure> {
    let (mut cfg, exec) = o.resolve()?;
    if o.cvs.is_empty() && cfg.cvs == ExperimentConfig::default().cvs {
        cfg.cvs = vec!["S7".into()];
    }
    let (rows, file) = harness::cmd_sensitivity(&cfg, exec)?;
    print!("{}", harness::sensitivity_csv(&rows));
    println!("wrote {}", file.display());
    Ok(())
}

fn checks(sequential: bool) -> Result<(), Failure> {
    let (results, status) = harness::cmd_checks(&Kernels::default(), execution(sequential));
    print!("{}", harness::checks_table(&results));
    status
}

fn gen_data(name: &str, out: &Path) -> Result<(), Failure> {
    let raw = match name {
        "blobs2d" => synthetic::raw_gaussian_blobs(cvvi::checks::BLOBS_ROWS, cvvi::checks::BLOBS_SEED),
        "australian_like" => synthetic::raw_australian_like(0),
        other => {
            return Err(Failure::config(format!(
                "unknown dataset {other:?}; available: {}",
                harness::BUILTIN_DATASETS.join(", ")
            )))
        }
    };
    harness::write_atomic(out, &raw.to_csv())?;
    println!("wrote {} rows to {}", raw.rows.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { Failure::CONFIG as u8 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Fit(o) => fit(o),
        Command::Sweep(o) => sweep(o),
        Command::Sensitivity(o) => sensitivity(o),
        Command::Checks { sequential } => checks(*sequential),
        Command::GenData { name, out } => gen_data(name, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
