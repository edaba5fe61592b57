//! Reference points of the default task (frozen base, centralized training,
//! isolated per-client training) and the accuracy targets derived from them.
//!
//!     cargo run --release --example reference_targets

use fedlora_bench::harness::{reference_quality, ScenarioConfig};
use fedlora_bench::protocols::{derive_targets, DEFAULT_TARGET_FRACTIONS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ScenarioConfig::default();
    let q = reference_quality(&cfg)?;
    for (name, r) in [("pretrained", q.pretrained), ("centroid", q.centroid), ("local only", q.local_only)] {
        println!("{name:<11} accuracy {:>6.2}%  loss {:.4}", 100.0 * r.accuracy, r.loss);
    }
    let targets = derive_targets(q.pretrained.accuracy, q.centroid.accuracy, &DEFAULT_TARGET_FRACTIONS)?;
    println!("targets at {DEFAULT_TARGET_FRACTIONS:?} of the gap: {targets:?} (%)");
    Ok(())
}
