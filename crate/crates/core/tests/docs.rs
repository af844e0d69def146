//! Lints for docs/derivations.md: the formula map stays in sync with the code
//! and with the property suite.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

const OPERATIONS: [&str; 12] = [
    "model::loglik",
    "varfam::log_q",
    "varfam::score_grad",
    "varfam::elbo_estimate",
    "estimators::rp1_term_grad",
    "estimators::rp2_term_grad",
    "estimators::sf_term_grad",
    "cv::evaluate_cv_set",
    "combiner::optimal_weights",
    "combiner::bayes_weights",
    "combiner::bayes_weights_general",
    "combiner::combine",
];

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn derivations() -> String {
    fs::read_to_string(root().join("docs/derivations.md")).unwrap()
}

/// (operation, certifying property names) for each row of the formula map.
fn map_rows(doc: &str) -> Vec<(String, Vec<String>)> {
    let start = doc.find("## Formula map").expect("formula map heading");
    doc[start..]
        .lines()
        .skip_while(|l| !l.starts_with('|'))
        .take_while(|l| l.starts_with('|'))
        .skip(2)
        .map(|line| {
            // formula cells may hold `|` inside code spans, so split on the padded separator
            let cells: Vec<&str> = line.trim_matches('|').split(" | ").map(str::trim).collect();
            assert_eq!(cells.len(), 4, "malformed row: {line}");
            let ticks = |s: &str| s.split('`').skip(1).step_by(2).map(String::from).collect::<Vec<_>>();
            let op = ticks(cells[2]);
            assert_eq!(op.len(), 1, "one operation per row: {line}");
            (op[0].clone(), ticks(cells[3]))
        })
        .collect()
}

#[test]
fn every_operation_appears_exactly_once() {
    let rows = map_rows(&derivations());
    for op in OPERATIONS {
        let n = rows.iter().filter(|(o, _)| o == op).count();
        assert_eq!(n, 1, "{op} appears {n} times");
    }
    assert_eq!(rows.len(), OPERATIONS.len(), "unexpected rows: {rows:?}");
}

#[test]
fn mapped_operations_exist() {
    for (op, _) in map_rows(&derivations()) {
        let (module, name) = op.split_once("::").unwrap();
        let src = fs::read_to_string(root().join(format!("crates/core/src/{module}.rs"))).unwrap();
        assert!(src.contains(&format!("pub fn {name}(")) || src.contains(&format!("pub fn {name}<")), "{op} not found");
    }
}

#[test]
fn certifying_properties_exist() {
    let names: HashSet<String> = cvvi::checks::check_names().into_iter().collect();
    for (op, props) in map_rows(&derivations()) {
        assert!(!props.is_empty(), "{op} has no certifying property");
        for p in props {
            let ok = match p.strip_suffix('*') {
                Some(prefix) => names.iter().any(|n| n.starts_with(prefix)),
                None => names.contains(&p),
            };
            assert!(ok, "{op}: unknown property {p}");
        }
    }
}

#[test]
fn prose_avoids_banned_terms() {
    let mut files = vec![root().join("docs/derivations.md")];
    let readme = root().join("README.md");
    if readme.exists() {
        files.push(readme);
    }
    for f in files {
        let text = fs::read_to_string(&f).unwrap();
        let lower = text.to_lowercase();
        for bad in ["\u{2014}", "§", "eq.", "the paper", "the spec"] {
            assert!(!lower.contains(bad), "{} contains {bad:?}", f.display());
        }
    }
}
