//! Per-method memory footprints against device capacities. A large runtime
//! overhead pushes every full-model method past the 6 GiB phone class
//! while SplitLoRA, hosting only the first layer, still fits everywhere.
//!
//!     cargo run --release --example memory_feasibility

use fedlora_bench::edge_sim::DeviceClass;
use fedlora_bench::fed_methods::{RankMap, StrategyKind};
use fedlora_bench::harness::{evaluate_a, Scenario, ScenarioConfig};
use fedlora_bench::protocols::Budget;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut base = ScenarioConfig {
        rounds: 10,
        ..ScenarioConfig::default()
    };
    base.memory.overhead_mb = 6143.96;
    let methods = [
        StrategyKind::FedAvgLora,
        StrategyKind::FedProxLora { mu: 0.01 },
        StrategyKind::HeteroLora { ranks: RankMap::default() },
        StrategyKind::split_default(),
    ];
    let mut traces = Vec::new();
    for method in methods {
        let cfg = ScenarioConfig { method, ..base.clone() };
        let scenario = Scenario::build(&cfg)?;
        let ctx = scenario.context();
        let feas = ctx.feasibility();
        print!("{:<10}", method.label());
        for class in DeviceClass::ALL {
            let id = scenario.pool.clients().iter().find(|c| c.device == class).map(|c| c.client_id);
            if let Some(id) = id {
                print!("  {}:{:.3} MiB", class.code(), ctx.footprint(id));
            }
        }
        println!("  -> {} clients out of memory", feas.out_of_memory.len());
        traces.push(scenario.run()?.0);
    }
    println!();
    print!("{}", evaluate_a(&traces, &Budget::default())?.to_text());
    Ok(())
}
