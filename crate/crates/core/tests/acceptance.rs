//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test -p cvvi-core --test acceptance`; pass criterion
//! numbers as arguments to run a subset. The process fails if any criterion
//! fails, except those listed in [`KNOWN_RED`], which still print FAIL.

use std::collections::BTreeMap;
use std::fs;
use std::time::Instant;

use cvvi::checks::{self, CheckResult, Kernels};
use cvvi::cv::CvSet;
use cvvi::engine::{self, ProbeConfig, RunOutcome, SensitivityConfig};
use cvvi::harness::{self, ExperimentConfig};
use cvvi::par::Execution;
use cvvi::rng::{stream, Purpose};
use cvvi::stats::{bootstrap_mean_interval, mean_stderr};
use cvvi::synthetic;

/// Criteria that fail under the prescribed optimizer and are reported as
/// such without failing the run.
const KNOWN_RED: &[(usize, &str)] = &[(
    5,
    "at lr 0.4 the undamped momentum update collapses the covariance; every RP2-based set aborts on a singular square root",
)];

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn exec() -> Execution {
    Execution::Parallel
}

fn find<'a>(results: &'a [CheckResult], name: &str) -> &'a CheckResult {
    results
        .iter()
        .find(|r| r.name == name)
        .unwrap_or_else(|| panic!("no property named {name}"))
}

fn all_named(results: &[CheckResult], names: &[&str]) -> Verdict {
    let failed: Vec<String> = names
        .iter()
        .map(|n| find(results, n))
        .filter(|r| !r.passed)
        .map(|r| format!("{}: {}", r.name, r.detail))
        .collect();
    if failed.is_empty() {
        verdict(true, format!("{} properties pass", names.len()))
    } else {
        verdict(false, failed.join("; "))
    }
}

fn criterion_1(results: &[CheckResult], secs: f64) -> Verdict {
    let zero_mean: Vec<&CheckResult> = results.iter().filter(|r| r.name.starts_with("cv.zero_mean.")).collect();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let ok = zero_mean.len() == 16 && failed.is_empty() && secs < 120.0 && results.len() >= 20;
    verdict(
        ok,
        format!(
            "{} properties ({} zero-mean), {} failing {:?}, {secs:.1}s",
            results.len(),
            zero_mean.len(),
            failed.len(),
            failed
        ),
    )
}

fn criterion_2(results: &[CheckResult]) -> Verdict {
    all_named(
        results,
        &[
            "model.loglik_gradient_fd",
            "model.loglik_hessian_fd",
            "varfam.score_grad_fd",
            "varfam.cf_prior_term_grad_fd",
            "varfam.cf_variational_term_grad_fd",
            "estimators.rp1_chain_rule_fd",
            "estimators.rp2_chain_rule_fd",
            "linalg.frechet_finite_difference",
            "cv.subsampling_correction_grad_fd",
            "cv.quadratic_model_cv_fd",
        ],
    )
}

fn criterion_3(results: &[CheckResult]) -> Verdict {
    all_named(
        results,
        &[
            "combiner.optimal_beats_random_weights",
            "combiner.optimal_matches_least_squares",
            "combiner.scalar_example",
            "combiner.general_rule_reduction",
        ],
    )
}

fn criterion_4() -> Verdict {
    let started = Instant::now();
    let ds = synthetic::australian_like(0);
    let path = engine::warmup_path(
        &ds,
        engine::PROBE_WARMUP_ITERS,
        engine::PROBE_WARMUP_LR,
        0.9,
        engine::PROBE_WARMUP_SAMPLES,
        engine::PROBE_WARMUP_SAMPLES,
        0,
        exec(),
    )
    .expect("warm-up runs");
    let w = &path[engine::PROBE_WARMUP_ITERS];
    let base = ProbeConfig { m: 100, execution: exec(), ..Default::default() };
    let none = engine::variance_probe(&ds, w, w, &base).expect("probe without CVs");
    let s7 = engine::variance_probe(&ds, w, w, &ProbeConfig { cvs: CvSet::parse("S7").unwrap(), ..base })
        .expect("probe with S7");
    let diffs: Vec<f64> = none.values.iter().zip(&s7.values).map(|(a, b)| a - b).collect();
    let (lo, hi) = bootstrap_mean_interval(&diffs, 0.99, 10_000, &mut stream(0, Purpose::Checks, 4));
    let secs = started.elapsed().as_secs_f64();
    verdict(
        lo > 0.0 && secs < 300.0,
        format!(
            "E|g|^2 none {:.4} vs S7 {:.4} at M_eff = 100; 99% interval of the paired gap [{lo:.4}, {hi:.4}], {secs:.1}s",
            none.mean, s7.mean
        ),
    )
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    mean: f64,
    se: f64,
    converged: bool,
}

fn cell(outcomes: &[RunOutcome]) -> Cell {
    let finals: Vec<f64> = outcomes.iter().filter(|o| o.abort.is_none()).map(RunOutcome::final_elbo).collect();
    let (mean, se) = mean_stderr(&finals);
    Cell { mean, se, converged: finals.len() == outcomes.len() }
}

fn strictly_below(a: Cell, b: Cell) -> bool {
    a.converged && b.converged && a.mean + 2.0 * a.se < b.mean - 2.0 * b.se
}

fn not_above(a: Cell, b: Cell) -> bool {
    a.converged && b.converged && a.mean - 2.0 * a.se <= b.mean + 2.0 * b.se
}

fn criterion_5() -> Verdict {
    let started = Instant::now();
    let ds = synthetic::australian_like(0);
    let cfg = ExperimentConfig { lr: vec![0.4], seeds: 20, ..Default::default() };
    let mut cells = BTreeMap::new();
    for name in ["none", "S4", "S5", "S6", "S7", "c5", "c7"] {
        let set = CvSet::parse(name).unwrap();
        let outcomes = harness::run_seeds(&ds, &cfg, 0.4, &set, exec()).expect("runs start");
        let aborted = outcomes.iter().filter(|o| o.abort.is_some()).count();
        let c = cell(&outcomes);
        println!(
            "    lr 0.4 {name:>4}: mean final ELBO {:.2} ± {:.2} over {} completed runs, {aborted} aborted",
            c.mean,
            c.se,
            outcomes.len() - aborted
        );
        cells.insert(name, c);
    }
    let c = |n: &str| cells[n];
    let checks = [
        ("none < S4", strictly_below(c("none"), c("S4"))),
        ("S4 < S5", strictly_below(c("S4"), c("S5"))),
        ("S5 <= S6", not_above(c("S5"), c("S6"))),
        ("S6 < S7", strictly_below(c("S6"), c("S7"))),
        ("c5 < c7", strictly_below(c("c5"), c("c7"))),
        ("c7 < S7", strictly_below(c("c7"), c("S7"))),
    ];
    let failing: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let unconverged: Vec<&str> = cells.iter().filter(|(_, c)| !c.converged).map(|(n, _)| *n).collect();
    let secs = started.elapsed().as_secs_f64();
    verdict(
        failing.is_empty() && secs < 1800.0,
        format!("australian-like, 20 seeds; failing {failing:?}; sets with aborted runs {unconverged:?}; {secs:.0}s"),
    )
}

fn criterion_6() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        lr: vec![0.05, 0.1, 0.2, 0.4],
        cvs: vec!["none".into(), "S7".into()],
        seeds: 20,
        out: dir.path().to_path_buf(),
        ..Default::default()
    };
    let report = harness::cmd_sweep(&cfg, exec()).expect("sweep runs");
    let curve = |subset: &str| -> Vec<(f64, f64)> {
        report
            .rows
            .iter()
            .filter(|r| r.subset == subset)
            .map(|r| (r.lr, if r.final_elbo_mean.is_nan() { f64::NEG_INFINITY } else { r.final_elbo_mean }))
            .collect()
    };
    let (base, s7) = (curve("none"), curve("S7"));
    let best = |c: &[(f64, f64)]| c.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
    let dominates = base.iter().zip(&s7).all(|(b, s)| s.1 > b.1);
    let (bb, bs) = (best(&base), best(&s7));
    let fmt = |c: &[(f64, f64)]| c.iter().map(|(lr, v)| format!("{lr}:{v:.2}")).collect::<Vec<_>>().join(" ");
    verdict(
        bs >= bb && dominates,
        format!("best lr none {bb}, S7 {bs}; S7 dominates: {dominates}; none [{}] S7 [{}]", fmt(&base), fmt(&s7)),
    )
}

fn paired(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    mean_stderr(&d)
}

fn criterion_7() -> Verdict {
    let ds = checks::blobs();
    let v0_grid = vec![0.0, 1e-5, 1e-3, 1e-1, 10.0];
    let m_grid = vec![10, 30, 100, 300];
    let cfg = SensitivityConfig {
        probe: ProbeConfig { cvs: CvSet::parse("S7").unwrap(), reps: 100, n_outer: 100, execution: exec(), ..Default::default() },
        v0_grid: v0_grid.clone(),
        m_grid: m_grid.clone(),
        lags: vec![0, 10],
        momentum: 0.9,
    };
    let cells = engine::sensitivity_cells(&ds, &cfg).expect("sensitivity sweep runs");
    let values = |lag: usize, v0: f64, m: usize| -> &Vec<f64> {
        &cells.iter().find(|(r, _)| r.lag == lag && r.v0 == v0 && r.m == m).unwrap().1
    };
    // more moment samples never hurt beyond paired noise
    let mut increases = Vec::new();
    for &v0 in &v0_grid {
        for pair in m_grid.windows(2) {
            let (d, se) = paired(values(0, v0, pair[1]), values(0, v0, pair[0]));
            if d > 2.0 * se {
                increases.push(format!("v0 {v0}: M {}→{} +{d:.4}", pair[0], pair[1]));
            }
        }
    }
    let avg = |lag| {
        let v: Vec<f64> = cells.iter().filter(|(r, _)| r.lag == lag).map(|(r, _)| r.grad_sq_norm_mean).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (lag0, lag10) = (avg(0), avg(10));
    let small = m_grid[0];
    let best_gain = v0_grid[1..]
        .iter()
        .map(|&v0| {
            let (d, se) = paired(values(0, 0.0, small), values(0, v0, small));
            (v0, d, se)
        })
        .max_by(|a, b| (a.1 / a.2).total_cmp(&(b.1 / b.2)))
        .unwrap();
    let regularization_helps = best_gain.1 > 2.0 * best_gain.2;
    verdict(
        increases.is_empty() && lag10 >= lag0 && regularization_helps,
        format!(
            "increases in M {increases:?}; mean lag0 {lag0:.4}, lag10 {lag10:.4}; at M={small} v0={} beats v0=0 by {:.4} (SE {:.4})",
            best_gain.0, best_gain.1, best_gain.2
        ),
    )
}

fn criterion_8() -> Verdict {
    let run = |cfg: &ExperimentConfig, which: &str, exec: Execution| -> Vec<(String, Vec<u8>)> {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { out: dir.path().to_path_buf(), ..cfg.clone() };
        match which {
            "fit" => drop(harness::cmd_fit(&cfg, exec).expect("fit")),
            "sweep" => drop(harness::cmd_sweep(&cfg, exec).expect("sweep")),
            _ => drop(harness::cmd_sensitivity(&cfg, exec).expect("sensitivity")),
        }
        let mut files: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect();
        files.sort();
        files
    };
    let fit = ExperimentConfig { cvs: vec!["S7".into()], seeds: 4, iterations: 60, ..Default::default() };
    let sweep = ExperimentConfig {
        lr: vec![0.1, 0.4],
        cvs: vec!["none".into(), "S5".into(), "c5,c7".into()],
        seeds: 3,
        iterations: 40,
        ..Default::default()
    };
    let sens = ExperimentConfig {
        cvs: vec!["S7".into()],
        v0_grid: vec![0.0, 1e-3, 10.0],
        m_grid: vec![10, 50],
        lags: vec![0, 10],
        probe_reps: 20,
        ..Default::default()
    };
    let mut mismatches = Vec::new();
    let mut files = 0;
    for (cfg, which) in [(&fit, "fit"), (&sweep, "sweep"), (&sens, "sensitivity")] {
        let a = run(cfg, which, Execution::Parallel);
        let b = run(cfg, which, Execution::Parallel);
        let c = run(cfg, which, Execution::Sequential);
        files += a.len();
        if a != b || a != c {
            mismatches.push(which);
        }
    }
    verdict(mismatches.is_empty(), format!("{files} files compared across repeats and execution modes; mismatches {mismatches:?}"))
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wants = |n: usize| selected.is_empty() || selected.contains(&n);

    let needs_checks = (1..=3).any(wants);
    let (checks, check_secs) = if needs_checks {
        let t = Instant::now();
        let r = checks::run_checks(&Kernels::default(), exec());
        (r, t.elapsed().as_secs_f64())
    } else {
        (Vec::new(), 0.0)
    };

    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Verdict>)> = vec![
        (1, "property suite", Box::new(|| criterion_1(&checks, check_secs))),
        (2, "gradient certification", Box::new(|| criterion_2(&checks))),
        (3, "combiner oracles", Box::new(|| criterion_3(&checks))),
        (4, "variance reduction at fixed w", Box::new(criterion_4)),
        (5, "final-ELBO ordering at lr 0.4", Box::new(criterion_5)),
        (6, "learning-rate sweep trend", Box::new(criterion_6)),
        (7, "sensitivity trends", Box::new(criterion_7)),
        (8, "determinism", Box::new(criterion_8)),
    ];

    let mut unexpected = Vec::new();
    for (n, name, run) in criteria {
        if !wants(n) {
            continue;
        }
        let v = run();
        let known = KNOWN_RED.iter().find(|(k, _)| *k == n);
        let status = if v.passed { "PASS" } else { "FAIL" };
        println!("criterion {n} ({name}): {status}  {}", v.detail);
        match (v.passed, known) {
            (false, Some((_, why))) => println!("    known red: {why}"),
            (false, None) => unexpected.push(n),
            (true, Some(_)) => println!("    listed as known red but passed"),
            (true, None) => {}
        }
    }
    if !unexpected.is_empty() {
        eprintln!("failing criteria: {unexpected:?}");
        std::process::exit(1);
    }
}
