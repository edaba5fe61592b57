//! Smallest end-to-end use: build the default scenario, run FedAvg with LoRA
//! and print cost and accuracy every ten rounds.
//!
//!     cargo run --release --example quickstart

use fedlora_bench::harness::{Scenario, ScenarioConfig};
use fedlora_bench::lora_model::pretrained_quality;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ScenarioConfig::default();
    let scenario = Scenario::build(&cfg)?;
    let pre = pretrained_quality(&scenario.base, &scenario.task)?;
    println!(
        "{} clients, {} train / {} test samples, pretrained accuracy {:.1}%",
        scenario.pool.len(),
        scenario.task.train_size(),
        scenario.task.test.len(),
        100.0 * pre.accuracy
    );
    let (trace, _) = scenario.run()?;
    println!("round  accuracy  wall-clock (h)  comm (MB)  energy (kJ)");
    for r in trace.records.iter().filter(|r| r.round % 10 == 0) {
        let acc = r.eval.map_or(f64::NAN, |e| e.test_accuracy);
        let c = &r.cumulative;
        println!(
            "{:>5}  {:>7.1}%  {:>14.4}  {:>9.2}  {:>11.3}",
            r.round,
            100.0 * acc,
            c.wall_clock_hours,
            c.comm_mb,
            c.energy_kj
        );
    }
    Ok(())
}
