//! Bandwidth that cycles through full, half and quarter capacity every third
//! of an hour. Volumes stay put; only time and radio energy move. Links are
//! slowed so the run spans several phases.
//!
//!     cargo run --release --example bandwidth_fluctuation

use fedlora_bench::harness::{evaluate_c, Scenario, ScenarioConfig};
use fedlora_bench::perturbations::{bandwidth_multiplier, PerturbationSpec};
use fedlora_bench::protocols::DeltaMode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut nominal = ScenarioConfig::default();
    for d in [
        &mut nominal.devices.jetson,
        &mut nominal.devices.iqoo,
        &mut nominal.devices.p50,
        &mut nominal.devices.mate20,
        &mut nominal.devices.nova9,
    ] {
        d.bandwidth_mbps = Some(0.003);
    }
    let perturbed = ScenarioConfig {
        perturbation: PerturbationSpec::BandwidthFluctuation,
        ..nominal.clone()
    };
    let (a, _) = Scenario::build(&nominal)?.run()?;
    let (b, _) = Scenario::build(&perturbed)?.run()?;
    for (i, r) in b.records.iter().enumerate().step_by(5) {
        let start = if i == 0 { 0.0 } else { b.records[i - 1].cumulative.wall_clock_hours };
        println!("round {:>2} starts at {start:.3} h, multiplier {}", r.round, bandwidth_multiplier(start));
    }
    print!("{}", evaluate_c(&[a], &[b], DeltaMode::Absolute, "fluctuation")?.to_text());
    Ok(())
}
