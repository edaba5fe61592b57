//! HeteroLoRA on two device mixes: ranks follow the device class, so a pool
//! dominated by weaker phones trains smaller adapters, uploads less and waits
//! longer for stragglers.
//!
//!     cargo run --release --example device_mix

use fedlora_bench::fed_methods::{RankMap, StrategyKind};
use fedlora_bench::harness::{evaluate_c, Scenario, ScenarioConfig};
use fedlora_bench::perturbations::{MixLabel, PerturbationSpec};
use fedlora_bench::protocols::DeltaMode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let nominal = ScenarioConfig {
        method: StrategyKind::HeteroLora { ranks: RankMap::default() },
        ..ScenarioConfig::default()
    };
    let counts = [5, 5, 10, 40, 40];
    let mixed = ScenarioConfig {
        perturbation: PerturbationSpec::HeterogeneityMix { counts },
        ..nominal.clone()
    };
    let (a, _) = Scenario::build(&nominal)?.run()?;
    let (b, _) = Scenario::build(&mixed)?.run()?;
    let label = MixLabel(counts).to_string();
    print!("{}", evaluate_c(&[a], &[b], DeltaMode::Percent, &label)?.to_text());
    Ok(())
}
