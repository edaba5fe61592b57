//! Training loss against simulated wall-clock for each method, written as
//! one CSV per method into a directory (default `curves/`).
//!
//!     cargo run --release --example loss_curves [out_dir]

use std::path::PathBuf;

use fedlora_bench::fed_methods::{RankMap, StrategyKind};
use fedlora_bench::harness::{emit_curves, write_file, Scenario, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "curves".into()));
    for method in [
        StrategyKind::FedAvgLora,
        StrategyKind::FedProxLora { mu: 0.01 },
        StrategyKind::HeteroLora { ranks: RankMap::default() },
        StrategyKind::split_default(),
    ] {
        let cfg = ScenarioConfig { method, ..ScenarioConfig::default() };
        let (trace, _) = Scenario::build(&cfg)?.run()?;
        let path = dir.join(format!("{}.csv", method.label().to_lowercase()));
        write_file(&path, &emit_curves(&trace))?;
        println!("{}", path.display());
    }
    Ok(())
}
