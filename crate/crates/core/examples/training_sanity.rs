//! FedAvg on the default synthetic task over ten seeds: pretrained accuracy
//! against the best accuracy reached within the configured rounds.
//!
//!     cargo run --release --example training_sanity [scenario.toml]

use fedlora_bench::harness::{Scenario, ScenarioConfig};
use fedlora_bench::lora_model::pretrained_quality;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = match std::env::args().nth(1) {
        Some(path) => ScenarioConfig::load(path.as_ref())?,
        None => ScenarioConfig::default(),
    };
    let mut passing = 0;
    for seed in 1..=10 {
        let cfg = ScenarioConfig { seed, ..base.clone() };
        let scenario = Scenario::build(&cfg)?;
        let pre = pretrained_quality(&scenario.base, &scenario.task)?.accuracy;
        let (trace, _) = scenario.run()?;
        let evals: Vec<f64> = trace.records.iter().filter_map(|r| r.eval).map(|e| e.test_accuracy).collect();
        let best = evals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let last = evals.last().copied().unwrap_or(f64::NAN);
        let gain = 100.0 * (best - pre);
        if gain >= 10.0 {
            passing += 1;
        }
        println!("seed {seed:>2}: pretrained {:.2}% best {:.2}% final {:.2}% gain {gain:+.2}", 100.0 * pre, 100.0 * best, 100.0 * last);
    }
    println!("{passing}/10 seeds gain at least 10 points");
    Ok(())
}
