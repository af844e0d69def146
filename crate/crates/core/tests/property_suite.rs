use cvvi::checks::{self, Kernels};
use cvvi::harness;
use cvvi::par::Execution;

#[test]
fn suite_is_green_and_covers_every_cv_on_both_instances() {
    let results = checks::run_checks(&Kernels::default(), Execution::Parallel);
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    assert!(results.len() >= 20);
    for id in ["c1", "c2", "c3", "c4", "c5", "c6", "c7", "score"] {
        for data in ["blobs2d", "random_d5"] {
            let name = format!("cv.zero_mean.{id}.{data}");
            assert!(results.iter().any(|r| r.name == name), "missing {name}");
        }
    }
}

#[test]
fn flipped_prior_sign_is_caught_by_name() {
    let (results, status) = harness::cmd_checks(&Kernels::with_flipped_prior_sign(), Execution::Parallel);
    let failure = status.unwrap_err();
    assert_eq!(failure.code, 4);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    assert!(failed.contains(&"varfam.cf_prior_term_grad_fd"), "{failed:?}");
    assert!(failure.message.contains(failed[0]));
    // properties that do not involve the prior kernel are unaffected
    assert!(!failed.iter().any(|n| n.starts_with("linalg.") || n.starts_with("combiner.")));
}

#[test]
fn suite_is_deterministic_across_execution_modes() {
    let strip = |rs: Vec<checks::CheckResult>| -> Vec<(String, bool, String)> {
        // drop the trailing timing from the detail
        rs.into_iter()
            .map(|r| (r.name, r.passed, r.detail.rsplit_once(" (").map(|(d, _)| d.to_string()).unwrap_or(r.detail)))
            .collect()
    };
    let a = strip(checks::run_checks(&Kernels::default(), Execution::Sequential));
    let b = strip(checks::run_checks(&Kernels::default(), Execution::Parallel));
    assert_eq!(a, b);
}
