//! Acceptance criteria. Each test writes one `criterion N: PASS|FAIL` line to
//! stderr (uncaptured, so it shows in plain `cargo test` output) and then
//! asserts.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fedlora_bench::edge_sim::{CumulativeCosts, RoundRecord, MB};
use fedlora_bench::fed_methods::{
    aggregate_fedavg, split_round, ClientBatches, RankMap, RunOutcome, SplitServer, StrategyKind,
};
use fedlora_bench::harness::{resolve_targets, Scenario, ScenarioConfig, TargetConfig, Trace};
use fedlora_bench::lora_model::{
    batch_schedule, loss_and_grads, pretrained_quality, prox_penalty, Activation, AdapterOptimizer, AdapterSet,
    BaseModel, Dataset, Prox, TrainingConfig,
};
use fedlora_bench::numerics::{AdamWConfig, Matrix};
use fedlora_bench::perturbations::PerturbationSpec;
use fedlora_bench::protocols::{
    dense_rank, derive_targets, eval_protocol_a, eval_protocol_c, Budget, DeltaMode, Direction, MethodTrace, Metric,
    DEFAULT_TARGET_FRACTIONS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, name: &str, ok: bool, detail: &str) {
    let line = format!("criterion {n:>2}: {} {name} ({detail})\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn secs(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}

// ---------------------------------------------------------------------------
// 1. Published rank columns replayed through dense ranking.

struct Column {
    basis: String,
    methods: Vec<String>,
    values: Vec<Option<f64>>,
    deltas: Vec<Option<f64>>,
    published: Vec<Option<usize>>,
}

fn load_rank_fixture() -> BTreeMap<(String, String, String), Column> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/published_ranks.csv");
    let text = std::fs::read_to_string(path).unwrap();
    let opt = |s: &str| if s == "-" || s.is_empty() { None } else { Some(s.parse::<f64>().unwrap()) };
    let mut cols: BTreeMap<(String, String, String), Column> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 8, "{line}");
        let col = cols.entry((f[0].into(), f[1].into(), f[2].into())).or_insert_with(|| Column {
            basis: f[3].into(),
            methods: vec![],
            values: vec![],
            deltas: vec![],
            published: vec![],
        });
        col.methods.push(f[4].into());
        col.values.push(opt(f[5]));
        col.deltas.push(opt(f[6]));
        col.published.push(if f[7] == "-" { None } else { Some(f[7].parse().unwrap()) });
    }
    cols
}

/// Columns whose replay disagrees with the published ranks.
fn replay_mismatches() -> (usize, Vec<String>) {
    let cols = load_rank_fixture();
    let mut bad = Vec::new();
    for ((table, group, metric), c) in &cols {
        let live: Vec<usize> = (0..c.methods.len()).filter(|&i| c.values[i].is_some()).collect();
        for i in 0..c.methods.len() {
            if c.values[i].is_none() {
                assert_eq!(c.published[i], None, "{table} {group} {metric}: infeasible cell carries a rank");
            }
        }
        let (vals, dir): (Vec<f64>, _) = match c.basis.as_str() {
            "higher" => (live.iter().map(|&i| c.values[i].unwrap()).collect(), Direction::HigherBetter),
            "lower" => (live.iter().map(|&i| c.values[i].unwrap()).collect(), Direction::LowerBetter),
            "abs_delta" => (live.iter().map(|&i| c.deltas[i].unwrap().abs()).collect(), Direction::LowerBetter),
            other => panic!("unknown basis {other}"),
        };
        let got = dense_rank(&vals, dir);
        let published: Vec<usize> = live.iter().map(|&i| c.published[i].unwrap()).collect();
        if got != published {
            bad.push(format!("{table}/{group}/{metric}: published {published:?}, dense {got:?}"));
        }
    }
    (cols.len(), bad)
}

/// Three published columns cannot be reproduced by any tie rule applied to
/// the printed values: a loss column whose ranks contradict its own numbers,
/// and two wall-clock columns where rounding created ties that the published
/// ranks break in opposite directions.
const KNOWN_INCONSISTENT: [&str; 3] = [
    "protocol_a/qwen2.5-0.5b/selected/BoolQ/loss",
    "protocol_c/gemma3-270m/fluctuation/HellaSwag/wall_clock",
    "protocol_c/qwen2.5-0.5b/fluctuation-selected/HellaSwag/wall_clock",
];

#[test]
fn criterion_01_rank_fixture_replay() {
    let t = Instant::now();
    let (total, bad) = replay_mismatches();
    let elapsed = t.elapsed();
    let keys: Vec<&str> = bad.iter().map(|b| b.split(':').next().unwrap()).collect();
    verdict(
        1,
        "rank-fixture replay",
        bad.is_empty() && elapsed < Duration::from_secs(1),
        &format!(
            "{}/{} columns reproduced in {}; irreproducible: {}",
            total - bad.len(),
            total,
            secs(elapsed),
            if bad.is_empty() { "none".into() } else { bad.join("; ") }
        ),
    );
    // Anything beyond the documented columns is a regression.
    assert_eq!(keys, KNOWN_INCONSISTENT, "{bad:#?}");
    assert!(elapsed < Duration::from_secs(1));
}

/// The unconditional form of criterion 1. Fails on the three columns above.
#[test]
#[ignore = "three published rank columns contradict their own printed values"]
fn criterion_01_strict_every_column() {
    let (_, bad) = replay_mismatches();
    assert!(bad.is_empty(), "{bad:#?}");
}

// ---------------------------------------------------------------------------
// 2. Target derivation from pretrained/centroid accuracies.

#[test]
fn criterion_02_target_derivation() {
    let f = &DEFAULT_TARGET_FRACTIONS;
    let boolq = derive_targets(0.6321, 0.8024, f).unwrap();
    let siqa = derive_targets(0.5599, 0.6807, f).unwrap();
    // Published targets that the 50/70/90 floor rule does not produce.
    let qnli = derive_targets(0.5817, 0.8576, f).unwrap();
    let arce = derive_targets(0.7105, 0.7947, f).unwrap();
    let qnli_override = resolve_targets(
        &TargetConfig {
            fractions: f.to_vec(),
            percent: Some(vec![62, 63, 64]),
        },
        0.5817,
        0.8576,
    )
    .unwrap();
    let arce_override = resolve_targets(
        &TargetConfig {
            fractions: f.to_vec(),
            percent: Some(vec![75, 76, 77]),
        },
        0.7105,
        0.7947,
    )
    .unwrap();
    let labels = |v: &[fedlora_bench::protocols::TargetSpec]| v.iter().map(|s| s.label.clone()).collect::<Vec<_>>();
    let ok = boolq == [71, 75, 78]
        && siqa == [62, 64, 66]
        && qnli != [62, 63, 64]
        && arce[..2] == [75, 76]
        && arce[2] != 77
        && labels(&qnli_override) == ["62%", "63%", "64%"]
        && labels(&arce_override) == ["75%", "76%", "77%"];
    verdict(
        2,
        "target derivation",
        ok,
        &format!("BoolQ {boolq:?}, SocialIQA {siqa:?}; QNLI derives {qnli:?} and ARC-E {arce:?}, both via override"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 3. Protocol C on a hand-encoded nominal/perturbed pair.

fn final_record(hours: f64, mb: f64, kj: f64, mem: f64, acc: f64) -> RoundRecord {
    RoundRecord {
        round: 1,
        selected: vec![],
        clients: vec![],
        wall_clock_seconds: hours * 3600.0,
        exchange: None,
        aggregated: true,
        cumulative: CumulativeCosts {
            wall_clock_hours: hours,
            comm_bytes: (mb * MB) as u64,
            comm_mb: mb,
            energy_kj: kj,
            avg_peak_memory_mb: mem,
            participants: 10,
        },
        eval: Some(fedlora_bench::edge_sim::EvalSnapshot {
            test_loss: 1.0,
            test_accuracy: acc,
            train_loss: 1.0,
        }),
    }
}

#[test]
fn criterion_03_protocol_c_fixture() {
    // Nominal wall-clock values carry the sub-display precision that the
    // printed deltas {0.02, 0.02, 0.00} hide.
    let rows = [
        ("FedAvg+LoRA", 1.056, 1.08),
        ("FedProx+LoRA", 1.132, 1.15),
        ("HeteroLoRA", 5.51, 5.51),
        ("SplitLoRA", 7.62, 12.08),
    ];
    let mk = |h: f64, m: &str| MethodTrace {
        method: m.into(),
        feasible: true,
        records: vec![final_record(h, 12006.68, 38.61, 3557.55, 0.3368)],
    };
    let nominal: Vec<_> = rows.iter().map(|(m, n, _)| mk(*n, m)).collect();
    let perturbed: Vec<_> = rows.iter().map(|(m, _, p)| mk(*p, m)).collect();
    let report = eval_protocol_c(&nominal, &perturbed, DeltaMode::Absolute, "qwen2.5-0.5b", "fluctuation").unwrap();
    let split = report.cell("SplitLoRA", Metric::WallClock).unwrap();
    let ranks: Vec<usize> = rows
        .iter()
        .map(|(m, _, _)| report.cell(m, Metric::WallClock).unwrap().rank.unwrap())
        .collect();
    let shown = format!("{:+.2}", split.delta.unwrap());
    let ok = split.value == Some(12.08) && shown == "+4.46" && split.rank == Some(4) && ranks == [3, 2, 1, 4];
    verdict(
        3,
        "protocol C fixture",
        ok,
        &format!("SplitLoRA wall-clock {:?} delta {shown} rank {:?}; column ranks {ranks:?}", split.value, split.rank),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 4. Gradients against central finite differences.

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

fn random_instance(r: &mut ChaCha8Rng) -> (BaseModel, AdapterSet, Dataset) {
    let depth = r.random_range(2..4);
    let mut widths = vec![r.random_range(2..6)];
    for _ in 0..depth {
        widths.push(r.random_range(2..6));
    }
    let classes = *widths.last().unwrap();
    let act = if r.random_bool(0.5) { Activation::Tanh } else { Activation::Relu };
    let base = BaseModel::random(&widths, act, 1.0, r).unwrap();
    let rank = r.random_range(1..4);
    let mut adapters = AdapterSet::init(&base.layer_dims(), rank, Some(r.random_range(0.5..4.0)), 0.5, r).unwrap();
    for l in adapters.layers_mut() {
        l.b = Matrix::from_fn(l.b.rows(), l.b.cols(), |_, _| r.random_range(-0.5..0.5));
    }
    let n = r.random_range(1..6);
    let x = Matrix::from_fn(n, widths[0], |_, _| r.random_range(-1.5..1.5));
    let y = (0..n).map(|_| r.random_range(0..classes)).collect();
    (base, adapters, Dataset::new(x, y).unwrap())
}

fn objective(base: &BaseModel, a: &AdapterSet, d: &Dataset, prox: Option<&Prox<'_>>) -> f64 {
    let (loss, _) = loss_and_grads(base, a, d, None).unwrap();
    loss + prox.map_or(0.0, |p| prox_penalty(a, p).unwrap())
}

/// Worst relative error over every adapter entry; entries sitting on a relu
/// kink are skipped since the derivative is undefined there.
fn fd_worst(base: &BaseModel, adapters: &AdapterSet, data: &Dataset, grads: &[fedlora_bench::lora_model::AdapterGrad], prox: Option<&Prox<'_>>, layers: std::ops::Range<usize>) -> f64 {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for li in layers {
        for which in 0..2 {
            let len = if which == 0 { adapters.layers()[li].a.len() } else { adapters.layers()[li].b.len() };
            for k in 0..len {
                let eval = |step: f64| {
                    let mut a = adapters.clone();
                    let m = if which == 0 { &mut a.layers_mut()[li].a } else { &mut a.layers_mut()[li].b };
                    m.data_mut()[k] += step;
                    objective(base, &a, data, prox)
                };
                // Five-point stencil: truncation error O(h^4).
                let numeric = (eval(-2.0 * h) - 8.0 * eval(-h) + 8.0 * eval(h) - eval(2.0 * h)) / (12.0 * h);
                let analytic = if which == 0 { grads[li].a.data()[k] } else { grads[li].b.data()[k] };
                let e = rel_err(analytic, numeric);
                if e > 1e-4 && base.activation() == Activation::Relu {
                    // Confirm a kink by comparing one-sided differences.
                    let right = (eval(1e-7) - eval(0.0)) / 1e-7;
                    let left = (eval(0.0) - eval(-1e-7)) / 1e-7;
                    if rel_err(right, left) > 1e-3 {
                        continue;
                    }
                }
                worst = worst.max(e);
            }
        }
    }
    worst
}

#[test]
fn criterion_04_gradient_finite_differences() {
    let t = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let (mut plain, mut prox_worst, mut split_worst) = (0.0f64, 0.0f64, 0.0f64);
    let instances = 120;
    for _ in 0..instances {
        let (base, adapters, data) = random_instance(&mut r);
        let (_, g) = loss_and_grads(&base, &adapters, &data, None).unwrap();
        plain = plain.max(fd_worst(&base, &adapters, &data, &g, None, 0..adapters.len()));

        let mut anchor = adapters.clone();
        for l in anchor.layers_mut() {
            l.a = l.a.map(|v| v + r.random_range(-0.3..0.3));
        }
        let prox = Prox {
            mu: r.random_range(0.01..1.0),
            anchor: &anchor,
        };
        let (_, gp) = loss_and_grads(&base, &adapters, &data, Some(&prox)).unwrap();
        prox_worst = prox_worst.max(fd_worst(&base, &adapters, &data, &gp, Some(&prox), 0..adapters.len()));

        // Client-side gradient assembled from the split exchange.
        let split = r.random_range(1..base.num_layers());
        let client_grads = split_client_gradient(&base, &adapters, &data, split);
        split_worst = split_worst.max(fd_worst(&base, &adapters, &data, &client_grads, None, 0..split));
    }
    let elapsed = t.elapsed();
    let ok = plain <= 1e-4 && prox_worst <= 1e-4 && split_worst <= 1e-4 && elapsed < Duration::from_secs(30);
    verdict(
        4,
        "gradient correctness",
        ok,
        &format!(
            "{instances} instances, worst rel err lora {plain:.1e} prox {prox_worst:.1e} split-client {split_worst:.1e}, {}",
            secs(elapsed)
        ),
    );
    assert!(ok);
}

/// Client-layer gradients recovered from the split exchange: the gradient
/// the server returns is backpropagated through the client layers.
fn split_client_gradient(
    base: &BaseModel,
    adapters: &AdapterSet,
    data: &Dataset,
    split: usize,
) -> Vec<fedlora_bench::lora_model::AdapterGrad> {
    use fedlora_bench::lora_model::{backward_stack, forward_stack};
    use fedlora_bench::numerics::softmax_cross_entropy;
    let (cl, sl) = base.layers().split_at(split);
    let (ca, sa) = adapters.split_at(split);
    let act = base.activation();
    let (hidden, cc) = forward_stack(cl, ca.layers(), act, true, &data.features).unwrap();
    let (logits, sc) = forward_stack(sl, sa.layers(), act, false, &hidden).unwrap();
    let (_, gl) = softmax_cross_entropy(&logits, &data.labels).unwrap();
    let (_, gh) = backward_stack(sl, sa.layers(), act, &sc, &gl).unwrap();
    let (mut g, _) = backward_stack(cl, ca.layers(), act, &cc, &gh).unwrap();
    g.extend(sa.layers().iter().map(|l| fedlora_bench::lora_model::AdapterGrad {
        a: Matrix::zeros(l.a.rows(), l.a.cols()),
        b: Matrix::zeros(l.b.rows(), l.b.cols()),
    }));
    g
}

// ---------------------------------------------------------------------------
// 5. Degenerate methods reproduce FedAvg byte for byte.

fn small_scenario(seed: u64, rounds: usize) -> ScenarioConfig {
    let mut c = ScenarioConfig {
        seed,
        rounds,
        ..ScenarioConfig::default()
    };
    c.task.num_clients = 20;
    c.task.samples_per_client = 32;
    c.task.test_samples = 200;
    c.pool.counts = [4; 5];
    c.clients_per_round = 5;
    c
}

fn round_lines(cfg: &ScenarioConfig) -> Vec<String> {
    let (trace, _) = Scenario::build(cfg).unwrap().run().unwrap();
    trace.to_jsonl().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn criterion_05_method_degeneracies() {
    let t = Instant::now();
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, cfg) in [("default", ScenarioConfig { rounds: 20, ..ScenarioConfig::default() }), ("small", small_scenario(7, 20))] {
        let fedavg = round_lines(&cfg);
        let prox = round_lines(&ScenarioConfig {
            method: StrategyKind::FedProxLora { mu: 0.0 },
            ..cfg.clone()
        });
        let hetero = round_lines(&ScenarioConfig {
            method: StrategyKind::HeteroLora {
                ranks: RankMap::uniform(cfg.model.rank),
            },
            ..cfg.clone()
        });
        ok &= fedavg.len() == 20 && prox == fedavg && hetero == fedavg;
        detail.push(format!("{name}: prox={} hetero={}", prox == fedavg, hetero == fedavg));
    }
    let elapsed = t.elapsed();
    ok &= elapsed < Duration::from_secs(60);
    verdict(
        5,
        "method degeneracies",
        ok,
        &format!("{}; round records byte-identical, {}", detail.join(", "), secs(elapsed)),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 6. Split training equals monolithic training.

fn split_fixture(seed: u64, clients: usize) -> (BaseModel, AdapterSet, Vec<Dataset>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let base = BaseModel::random(&[6, 8, 8, 3], Activation::Tanh, 1.0, &mut r).unwrap();
    let adapters = AdapterSet::init(&base.layer_dims(), 2, None, 0.2, &mut r).unwrap();
    let data = (0..clients)
        .map(|_| {
            let x = Matrix::from_fn(16, 6, |_, _| r.random_range(-1.0..1.0));
            let y = (0..16).map(|_| r.random_range(0..3)).collect();
            Dataset::new(x, y).unwrap()
        })
        .collect();
    (base, adapters, data)
}

fn training_for_split() -> TrainingConfig {
    TrainingConfig {
        optimizer: AdamWConfig {
            learning_rate: 1e-2,
            ..AdamWConfig::default()
        },
        batch_size: 4,
        local_epochs: 1,
    }
}

#[test]
fn criterion_06_split_monolithic_equivalence() {
    let training = training_for_split();
    let split = 1;
    let rounds = 5;
    let mut bit_identical = true;
    for seed in 0..5 {
        let (base, init, data) = split_fixture(seed, 1);
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let schedules: Vec<Vec<Vec<usize>>> = (0..rounds).map(|_| batch_schedule(16, 4, 1, &mut r)).collect();

        let mut server = SplitServer::new(&init, split, &training, true);
        let mut client = init.split_at(split).0;
        let mut split_traj = Vec::new();
        for schedule in &schedules {
            let out = split_round(
                &base,
                &[(0, client.clone())],
                &mut server,
                &[ClientBatches {
                    client_id: 0,
                    data: &data[0],
                    schedule,
                }],
                &training,
            )
            .unwrap();
            client = aggregate_fedavg(&out.updates).unwrap();
            split_traj.push(client.clone());
        }

        // Monolithic: full-model gradient every batch; the client half gets a
        // fresh optimizer each round as in any local round, the server half
        // keeps its optimizer.
        let mut full = init.clone();
        let mut server_opt = AdapterOptimizer::new(&init.split_at(split).1, training.optimizer);
        let mut mono_traj = Vec::new();
        for schedule in &schedules {
            let mut client_opt = AdapterOptimizer::new(&full.split_at(split).0, training.optimizer);
            for idx in schedule {
                let (_, g) = loss_and_grads(&base, &full, &data[0].subset(idx), None).unwrap();
                let (mut c, mut s) = full.split_at(split);
                client_opt.apply(&mut c, &g[..split]).unwrap();
                server_opt.apply(&mut s, &g[split..]).unwrap();
                full = AdapterSet::concat(&c, &s);
            }
            mono_traj.push(full.split_at(split).0);
        }
        bit_identical &= split_traj == mono_traj;
    }

    // Several clients: each client's gradient against the full-model
    // gradient at the server state it actually trained against.
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let (base, init, data) = split_fixture(seed, 4);
        let (client, mut server_state) = init.split_at(split);
        let mut server_opt = AdapterOptimizer::new(&server_state, training.optimizer);
        for d in &data {
            let full = AdapterSet::concat(&client, &server_state);
            let (_, mono) = loss_and_grads(&base, &full, d, None).unwrap();
            let via_split = split_client_gradient(&base, &full, d, split);
            for (m, s) in mono[..split].iter().zip(&via_split[..split]) {
                for (x, y) in m.a.data().iter().zip(s.a.data()).chain(m.b.data().iter().zip(s.b.data())) {
                    worst = worst.max((x - y).abs() / x.abs().max(1e-300));
                }
            }
            server_opt.apply(&mut server_state, &mono[split..]).unwrap();
        }
    }
    let ok = bit_identical && worst <= 1e-10;
    verdict(
        6,
        "split-monolithic equivalence",
        ok,
        &format!("single-client trajectory bit-identical: {bit_identical}; multi-client worst rel diff {worst:.1e}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 7. Accounting identities.

fn lora_elements(cfg: &ScenarioConfig, rank: usize) -> u64 {
    let widths = cfg.model.widths();
    widths
        .windows(2)
        .map(|w| (rank.min(w[0]).min(w[1]) * (w[0] + w[1])) as u64)
        .sum()
}

fn check_identities(cfg: &ScenarioConfig, trace: &Trace, pool: &fedlora_bench::edge_sim::ClientPool) -> Result<(), String> {
    let mut bytes = 0u64;
    let mut energy = 0.0;
    let mut seconds = 0.0;
    let payload = 8 * lora_elements(cfg, cfg.model.rank);
    for r in &trace.records {
        let mut straggler: f64 = 0.0;
        for c in &r.clients {
            let p = pool.profile_of(c.client_id);
            bytes += c.down_bytes + c.up_bytes;
            energy += (p.active_power_watts * c.train_seconds + p.comm_power_watts * c.comm_seconds) / 1000.0;
            straggler = straggler.max(c.train_seconds + c.comm_seconds);
            if matches!(cfg.method, StrategyKind::FedAvgLora | StrategyKind::FedProxLora { .. }) {
                let up = if c.dropped { 0 } else { payload };
                if c.down_bytes != payload || c.up_bytes != up {
                    return Err(format!("round {} client {}: payload {}/{}", r.round, c.client_id, c.down_bytes, c.up_bytes));
                }
            }
        }
        if r.wall_clock_seconds != straggler + cfg.server_aggregation_seconds {
            return Err(format!("round {} wall-clock {} != {}", r.round, r.wall_clock_seconds, straggler + cfg.server_aggregation_seconds));
        }
        seconds += r.wall_clock_seconds;
        let cum = &r.cumulative;
        if cum.comm_bytes != bytes {
            return Err(format!("round {}: comm {} != {}", r.round, cum.comm_bytes, bytes));
        }
        if (cum.energy_kj - energy).abs() > 1e-9 * energy.abs() {
            return Err(format!("round {}: energy {} != {}", r.round, cum.energy_kj, energy));
        }
        if (cum.wall_clock_hours - seconds / 3600.0).abs() > 1e-12 * seconds {
            return Err(format!("round {}: hours {} vs {}", r.round, cum.wall_clock_hours, seconds / 3600.0));
        }
    }
    Ok(())
}

#[test]
fn criterion_07_accounting_identities() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let methods = [
        StrategyKind::FedAvgLora,
        StrategyKind::FedProxLora { mu: 0.01 },
        StrategyKind::HeteroLora { ranks: RankMap::default() },
        StrategyKind::split_default(),
    ];
    let mut failures = Vec::new();
    let mut fluctuation_ok = true;
    let scenarios = 8;
    for i in 0..scenarios {
        let mut cfg = small_scenario(r.random(), 50);
        cfg.method = methods[i % methods.len()];
        cfg.clients_per_round = r.random_range(1..=20);
        cfg.server_aggregation_seconds = r.random_range(0.0..3.0);
        cfg.perturbation = match r.random_range(0..3) {
            0 => PerturbationSpec::None,
            1 => PerturbationSpec::Dropout {
                ratio: r.random_range(0.0..0.6),
            },
            _ => PerturbationSpec::BandwidthFluctuation,
        };
        // Slow links so a run spans several bandwidth phases.
        for d in [&mut cfg.devices.jetson, &mut cfg.devices.iqoo, &mut cfg.devices.p50, &mut cfg.devices.mate20, &mut cfg.devices.nova9] {
            d.bandwidth_mbps = Some(0.005);
        }
        let scenario = Scenario::build(&cfg).unwrap();
        let (trace, _) = scenario.run().unwrap();
        if let Err(e) = check_identities(&cfg, &trace, &scenario.pool) {
            failures.push(format!("scenario {i}: {e}"));
        }

        let steady = Scenario::build(&ScenarioConfig {
            perturbation: PerturbationSpec::None,
            ..cfg.clone()
        })
        .unwrap()
        .run()
        .unwrap()
        .0;
        let fluct = Scenario::build(&ScenarioConfig {
            perturbation: PerturbationSpec::BandwidthFluctuation,
            ..cfg.clone()
        })
        .unwrap()
        .run()
        .unwrap()
        .0;
        let same_bytes = steady
            .records
            .iter()
            .zip(&fluct.records)
            .all(|(a, b)| a.cumulative.comm_bytes == b.cumulative.comm_bytes);
        let slower = fluct.records.last().unwrap().cumulative.wall_clock_hours
            > steady.records.last().unwrap().cumulative.wall_clock_hours;
        fluctuation_ok &= same_bytes && slower;
    }
    let ok = failures.is_empty() && fluctuation_ok;
    verdict(
        7,
        "accounting identities",
        ok,
        &format!(
            "{scenarios} randomized 50-round scenarios; identity failures: {}; fluctuation keeps bytes and adds time: {fluctuation_ok}",
            if failures.is_empty() { "none".into() } else { failures.join("; ") }
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 8. Out-of-memory feasibility.

#[test]
fn criterion_08_oom_feasibility() {
    let mut cfg = small_scenario(8, 5);
    let methods = [
        StrategyKind::FedAvgLora,
        StrategyKind::FedProxLora { mu: 0.01 },
        StrategyKind::HeteroLora { ranks: RankMap::default() },
        StrategyKind::split_default(),
    ];
    // A large runtime overhead stands in for a 1B-parameter backbone.
    cfg.memory.overhead_mb = 7000.0;
    let footprints = |kind: StrategyKind| -> Vec<f64> {
        let c = ScenarioConfig { method: kind, ..cfg.clone() };
        let s = Scenario::build(&c).unwrap();
        let ctx = s.context();
        (0..c.task.num_clients).map(|id| ctx.footprint(id)).collect()
    };
    let split_fp = footprints(StrategyKind::split_default()).into_iter().fold(0.0, f64::max);
    let full_min = methods[..3]
        .iter()
        .flat_map(|&k| footprints(k))
        .fold(f64::INFINITY, f64::min);
    assert!(split_fp < full_min, "split {split_fp} vs full {full_min}");
    let cap = (split_fp + full_min) / 2.0;
    // Only the 16 GiB class can host the full model.
    for d in [&mut cfg.devices.jetson, &mut cfg.devices.p50, &mut cfg.devices.mate20, &mut cfg.devices.nova9] {
        d.memory_capacity_mb = Some(cap);
    }

    let mut traces = Vec::new();
    let mut feasible = Vec::new();
    for &kind in &methods {
        let c = ScenarioConfig { method: kind, ..cfg.clone() };
        let s = Scenario::build(&c).unwrap();
        let outcome = fedlora_bench::fed_methods::run_method(&s.context(), &mut |_| Ok(())).unwrap();
        feasible.push(matches!(outcome, RunOutcome::Completed(_)));
        traces.push(s.run().unwrap().0.to_method_trace());
    }
    let report = eval_protocol_a(&traces, &Budget::default(), "toy-mlp").unwrap();
    let text = report.to_text();
    let csv = report.to_csv();
    let dashes = |m: &str| {
        let row = report.row(m).unwrap();
        !row.feasible && row.cells.iter().all(|c| c.value.is_none() && c.rank.is_none())
    };
    let infeasible_rendered = ["FedAvg", "FedProx", "HeteroLoRA"].iter().all(|m| dashes(m))
        && text.lines().filter(|l| l.contains(" - ")).count() >= 3
        && csv.lines().filter(|l| l.contains(",-")).count() >= 3;
    let split_row = report.row("SplitLoRA").unwrap();
    let ok = feasible == [false, false, false, true]
        && infeasible_rendered
        && split_row.cells.iter().all(|c| c.value.is_some() && c.rank == Some(1));
    verdict(
        8,
        "OOM feasibility",
        ok,
        &format!("feasible per method {feasible:?}; capacity {cap:.3} MiB between split {split_fp:.3} and full {full_min:.3}"),
    );
    assert!(ok, "{text}");
}

// ---------------------------------------------------------------------------
// 9. Dropout direction.

fn finals(t: &Trace) -> (f64, f64, f64) {
    let last = t.records.last().unwrap();
    let acc = t.records.iter().rev().find_map(|r| r.eval).unwrap().test_accuracy;
    (acc, last.cumulative.wall_clock_hours, last.cumulative.energy_kj)
}

#[test]
fn criterion_09_dropout_direction() {
    let mut drop = 0.0;
    let mut costs_up = true;
    for seed in 1..=5 {
        let nominal = ScenarioConfig { seed, ..ScenarioConfig::default() };
        let dropped = ScenarioConfig {
            perturbation: PerturbationSpec::Dropout { ratio: 0.3 },
            ..nominal.clone()
        };
        let (a0, h0, e0) = finals(&Scenario::build(&nominal).unwrap().run().unwrap().0);
        let (a1, h1, e1) = finals(&Scenario::build(&dropped).unwrap().run().unwrap().0);
        drop += 100.0 * (a0 - a1) / 5.0;
        costs_up &= h1 > h0 && e1 > e0;
    }
    let ok = drop < 2.0 && costs_up;
    verdict(
        9,
        "dropout direction",
        ok,
        &format!("mean accuracy drop {drop:.2} points over 5 seeds; wall-clock and energy increase: {costs_up}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 10. End-to-end determinism through the command line.

const METHODS: [&str; 4] = ["fed_avg_lora", "fed_prox_lora", "hetero_lora", "split_lora"];

fn fedbench(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_fedbench")).args(args).env_remove("FEDBENCH_SEED").output().unwrap();
    assert!(out.status.success(), "fedbench {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Runs every method nominally and under dropout, evaluates all three
/// protocols and the overall ranking. Returns every produced file.
fn pipeline(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let mut nominal = Vec::new();
    let mut perturbed = Vec::new();
    for m in METHODS {
        for (suffix, extra) in [("nominal", ""), ("dropout", "\n[perturbation]\nkind = \"dropout\"\nratio = 0.3\n")] {
            let cfg = p(&format!("{m}_{suffix}.toml"));
            std::fs::write(&cfg, format!("name = \"{suffix}\"\n\n[method]\nkind = \"{m}\"\n{extra}")).unwrap();
            let trace = p(&format!("{m}_{suffix}.jsonl"));
            fedbench(&["run", "--config", &cfg, "--out", &trace]);
            if suffix == "nominal" { &mut nominal } else { &mut perturbed }.push(trace);
        }
    }
    let args = |head: &[&str], flag: &str, files: &[String]| {
        let mut v: Vec<String> = head.iter().map(|s| s.to_string()).collect();
        v.push(flag.into());
        v.extend(files.iter().cloned());
        v
    };
    let run = |v: Vec<String>| fedbench(&v.iter().map(String::as_str).collect::<Vec<_>>());
    run(args(&["eval-a", "--out", &p("a"), "--comm-mb", "5", "--wall-clock-hours", "0.02"], "--traces", &nominal));
    run(args(&["eval-b", "--out", &p("b"), "--targets", "60,65,70"], "--traces", &nominal));
    let mut c = args(&["eval-c", "--out", &p("c"), "--label", "dropout 0.3"], "--nominal", &nominal);
    c.push("--perturbed".into());
    c.extend(perturbed.iter().cloned());
    run(c);
    run(vec!["report".into(), "--out".into(), p("overall"), "--inputs".into(), p("a.csv"), p("b.csv"), p("c.csv")]);
    run(vec!["curves".into(), "--trace".into(), nominal[0].clone(), "--out".into(), p("curve.csv")]);
    let mut files = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        files.insert(e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap());
    }
    files
}

#[test]
fn criterion_10_end_to_end_determinism() {
    let t = Instant::now();
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let a = pipeline(first.path());
    let single = t.elapsed();
    let b = pipeline(second.path());
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let ok = a.len() == b.len() && differing.is_empty() && single < Duration::from_secs(300);
    verdict(
        10,
        "end-to-end determinism",
        ok,
        &format!("{} files byte-identical across two executions, differing {differing:?}; one pipeline took {}", a.len(), secs(single)),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 11. Training sanity.

#[test]
fn criterion_11_training_sanity() {
    let mut gains = Vec::new();
    for seed in 1..=10 {
        let cfg = ScenarioConfig { seed, ..ScenarioConfig::default() };
        let s = Scenario::build(&cfg).unwrap();
        let pre = pretrained_quality(&s.base, &s.task).unwrap().accuracy;
        let (trace, _) = s.run().unwrap();
        let best = trace.records.iter().filter_map(|r| r.eval).map(|e| e.test_accuracy).fold(f64::NEG_INFINITY, f64::max);
        gains.push(100.0 * (best - pre));
    }
    let passing = gains.iter().filter(|&&g| g >= 10.0).count();
    let ok = passing >= 9;
    verdict(
        11,
        "training sanity",
        ok,
        &format!("{passing}/10 seeds gain >= 10 points; smallest gain {:.1}", gains.iter().copied().fold(f64::INFINITY, f64::min)),
    );
    assert!(ok);
}
