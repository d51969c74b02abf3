use std::path::{Path, PathBuf};

use tiertest::scenario::run_scenario;

fn bundled() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
}

#[test]
fn bundled_scenarios_pass() {
    let paths = bundled();
    assert!(paths.len() >= 7);
    let mut failed = Vec::new();
    for path in paths {
        let outcome = run_scenario(&path, None, None).unwrap();
        assert!(!outcome.assertions.is_empty(), "{} asserts nothing", path.display());
        for a in outcome.assertions.iter().filter(|a| !a.passed()) {
            failed.push(format!("{} step {}: {:?}", path.display(), a.step, a.failures));
        }
    }
    assert!(failed.is_empty(), "{failed:#?}");
}
