#![allow(dead_code)]

use std::path::PathBuf;

use lemb_core::harness::{BenchConfig, Scenario};

pub fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn load_scenario(name: &str) -> Scenario {
    let path = scenarios_dir().join(name);
    Scenario::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn load_bench(name: &str) -> BenchConfig {
    let path = scenarios_dir().join("bench").join(name);
    BenchConfig::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Every chaos scenario committed under `scenarios/`, sorted by file name.
pub fn scenario_matrix() -> Vec<(String, Scenario)> {
    let mut names: Vec<String> = std::fs::read_dir(scenarios_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names.into_iter().map(|n| (n.clone(), load_scenario(&n))).collect()
}
