#![allow(dead_code)]

use std::path::PathBuf;

use collab_core::experiment::ExperimentConfig;
use collab_core::persona::PersonaSpec;
use collab_core::simulation::SimulationScript;

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn read_golden(name: &str) -> String {
    std::fs::read_to_string(golden_dir().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn golden_script() -> SimulationScript {
    serde_json::from_str(&read_golden("script.json")).unwrap()
}

pub fn golden_config() -> ExperimentConfig {
    serde_json::from_str(&read_golden("config.json")).unwrap()
}

pub fn persona(name: &str) -> PersonaSpec {
    serde_json::from_str(&read_golden(name)).unwrap()
}

/// Rewrites checked-in goldens when `UPDATE_GOLDEN` is set.
pub fn updating() -> bool {
    std::env::var_os("UPDATE_GOLDEN").is_some()
}
