//! Client dropout against the nominal run over five seeds: final accuracy,
//! wall-clock and energy for each, then a Protocol C table for seed 1.
//!
//!     cargo run --release --example dropout_robustness [ratio]

use fedlora_bench::harness::{evaluate_c, Scenario, ScenarioConfig, Trace};
use fedlora_bench::perturbations::PerturbationSpec;
use fedlora_bench::protocols::DeltaMode;

fn final_numbers(t: &Trace) -> (f64, f64, f64) {
    let last = t.records.last().expect("completed run");
    let acc = t.records.iter().rev().find_map(|r| r.eval).expect("evaluated").test_accuracy;
    (acc, last.cumulative.wall_clock_hours, last.cumulative.energy_kj)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ratio: f64 = std::env::args().nth(1).map_or(Ok(0.3), |s| s.parse())?;
    let mut acc_drop = 0.0;
    let mut first = None;
    for seed in 1..=5 {
        let nominal_cfg = ScenarioConfig { seed, ..ScenarioConfig::default() };
        let dropped_cfg = ScenarioConfig {
            perturbation: PerturbationSpec::Dropout { ratio },
            ..nominal_cfg.clone()
        };
        let (nominal, _) = Scenario::build(&nominal_cfg)?.run()?;
        let (dropped, _) = Scenario::build(&dropped_cfg)?.run()?;
        let (a0, h0, e0) = final_numbers(&nominal);
        let (a1, h1, e1) = final_numbers(&dropped);
        acc_drop += 100.0 * (a0 - a1) / 5.0;
        println!(
            "seed {seed}: accuracy {:.2}% -> {:.2}%  wall-clock {h0:.4} h -> {h1:.4} h  energy {e0:.2} kJ -> {e1:.2} kJ",
            100.0 * a0,
            100.0 * a1
        );
        first.get_or_insert((nominal, dropped));
    }
    println!("mean accuracy drop: {acc_drop:.2} points");
    let (nominal, dropped) = first.expect("five seeds ran");
    let report = evaluate_c(&[nominal], &[dropped], DeltaMode::Absolute, &format!("dropout {ratio}"))?;
    print!("{}", report.to_text());
    Ok(())
}
