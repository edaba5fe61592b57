//! All four methods on one scenario, compared under a fixed budget, at fixed
//! accuracy targets, and overall.
//!
//!     cargo run --release --example protocol_comparison

use fedlora_bench::fed_methods::{RankMap, StrategyKind};
use fedlora_bench::harness::{evaluate_a, evaluate_b, reference_quality, resolve_targets, Scenario, ScenarioConfig};
use fedlora_bench::protocols::{overall_ranking, overall_text, Budget};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = ScenarioConfig::default();
    let methods = [
        StrategyKind::FedAvgLora,
        StrategyKind::FedProxLora { mu: 0.01 },
        StrategyKind::HeteroLora { ranks: RankMap::default() },
        StrategyKind::split_default(),
    ];
    let mut traces = Vec::new();
    for method in methods {
        let cfg = ScenarioConfig { method, ..base.clone() };
        traces.push(Scenario::build(&cfg)?.run()?.0);
    }

    let budget = Budget {
        comm_mb: Some(4.0),
        energy_kj: Some(0.8),
        ..Budget::default()
    };
    let a = evaluate_a(&traces, &budget)?;
    println!("{}", a.to_text());

    let refs = reference_quality(&base)?;
    println!(
        "pretrained {:.2}%, centroid {:.2}%, local-only {:.2}%\n",
        100.0 * refs.pretrained.accuracy,
        100.0 * refs.centroid.accuracy,
        100.0 * refs.local_only.accuracy
    );
    let targets = resolve_targets(&base.targets, refs.pretrained.accuracy, refs.centroid.accuracy)?;
    let b = evaluate_b(&traces, &targets)?;
    for report in &b {
        println!("{}", report.to_text());
    }

    let mut all = vec![a];
    all.extend(b);
    print!("{}", overall_text(&overall_ranking(&all)));
    Ok(())
}
