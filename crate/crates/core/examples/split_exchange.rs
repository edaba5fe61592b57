//! Where SplitLoRA's traffic goes: per-round activation, gradient and
//! adapter-sync bytes against the FedAvg adapter payload, for two sync
//! periods.
//!
//!     cargo run --release --example split_exchange

use fedlora_bench::fed_methods::StrategyKind;
use fedlora_bench::harness::{Scenario, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = ScenarioConfig {
        rounds: 10,
        ..ScenarioConfig::default()
    };
    let (fedavg, _) = Scenario::build(&base)?.run()?;
    let per_client = fedavg.records[0].clients[0].down_bytes + fedavg.records[0].clients[0].up_bytes;
    println!("FedAvg: {per_client} bytes per client per round\n");

    for period in [1, 5] {
        let cfg = ScenarioConfig {
            method: StrategyKind::SplitLora {
                sync_period_rounds: period,
                split_layer_index: 1,
                server_adapters_trainable: true,
            },
            ..base.clone()
        };
        let (trace, _) = Scenario::build(&cfg)?.run()?;
        println!("SplitLoRA, sync every {period} round(s)");
        println!("round  activations  gradients  adapter sync");
        for r in &trace.records {
            let x = r.exchange.expect("split rounds log the exchange");
            println!(
                "{:>5}  {:>11}  {:>9}  {:>12}",
                r.round, x.activation_bytes, x.gradient_bytes, x.adapter_sync_bytes
            );
        }
        let last = trace.records.last().expect("rounds ran");
        println!(
            "total {:.2} MB vs FedAvg {:.2} MB\n",
            last.cumulative.comm_mb,
            fedavg.records.last().expect("rounds ran").cumulative.comm_mb
        );
    }
    Ok(())
}
