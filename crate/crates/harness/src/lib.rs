//! Scenario runner, stress driver and benchmarks for `cjm-core`.

pub mod backend;
pub mod bench;
pub mod runner;
pub mod scenario;
pub mod stress;

pub use backend::{AuditView, Backend, CjmBackend, OracleBackend};
pub use bench::{run_bench, BenchConfig, BenchReport, BenchRow, Impl};
pub use runner::{run_scenario, RunOptions, ScenarioReport};
pub use scenario::{ParseError, Scenario};
pub use stress::{run_stress, Mix, StressConfig, StressReport};

use std::path::Path;

/// Reads and parses a scenario file, named after its file stem.
pub fn load_scenario(path: &Path) -> anyhow::Result<Scenario> {
    let src = std::fs::read_to_string(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario");
    Scenario::parse(name, &src).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}
