//! Scenario configuration, deterministic run execution, trace files, report
//! rendering and loss curves.

mod config;
mod trace;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{DeviceOverride, DeviceOverrides, PoolConfig, ScenarioConfig, TargetConfig, SEED_ENV};
pub use trace::{config_hash, partial_path, InfeasibleMarker, Trace, TraceHeader, TraceLine, TraceWriter, SCHEMA_VERSION};

use crate::edge_sim::{ClientPool, EdgeError};
use crate::fed_methods::{run_method, MethodError, RunOutcome, RunOutput, ScenarioContext};
use crate::lora_model::{
    centroid_run, generate_task, local_only_run, pretrained_base, pretrained_quality, BaseModel, EvalResult, LoraError,
    SyntheticTask,
};
use crate::protocols::{
    derive_targets, eval_protocol_a, eval_protocol_b, eval_protocol_c, overall_csv, overall_ranking, overall_text, Budget,
    DeltaMode, OverallEntry, ProtocolError, ProtocolReport, TargetSpec,
};
use crate::seeds::SeedTree;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration at `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("trace schema version {found} is not supported (expected {expected})")]
    Schema { found: u64, expected: u32 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("method {0} is infeasible on this device pool")]
    Infeasible(String),
    #[error(transparent)]
    Method(#[from] MethodError),
    #[error(transparent)]
    Model(#[from] LoraError),
    #[error(transparent)]
    Edge(#[from] EdgeError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Validation { .. } => exit_code::VALIDATION,
            HarnessError::Infeasible(_) => exit_code::INFEASIBLE,
            HarnessError::Io { .. } => exit_code::IO,
            HarnessError::Schema { .. } => exit_code::SCHEMA,
            _ => exit_code::OTHER,
        }
    }
}

pub mod exit_code {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const VALIDATION: i32 = 2;
    pub const INFEASIBLE: i32 = 3;
    pub const IO: i32 = 4;
    pub const SCHEMA: i32 = 5;
}

/// Everything derived from a config before the round loop starts.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub seeds: SeedTree,
    pub task: SyntheticTask,
    pub base: BaseModel,
    pub pool: ClientPool,
}

impl Scenario {
    pub fn build(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let seeds = SeedTree::new(config.seed);
        let task = generate_task(&seeds, &config.task, &config.model)?;
        let base = pretrained_base(&seeds, &task.teacher, config.model.pretrain_noise);
        let pool = ClientPool::from_counts(config.pool_counts(), config.device_table()?)?;
        Ok(Self {
            config: config.clone(),
            seeds,
            task,
            base,
            pool,
        })
    }

    pub fn context(&self) -> ScenarioContext<'_> {
        let c = &self.config;
        ScenarioContext {
            kind: c.method,
            base: &self.base,
            task: &self.task,
            pool: &self.pool,
            model: &c.model,
            training: &c.training,
            seeds: self.seeds,
            rounds: c.rounds,
            clients_per_round: c.clients_per_round,
            eval_every: c.eval_every,
            perturbation: c.perturbation,
            memory: c.memory,
            server_aggregation_seconds: c.server_aggregation_seconds,
            upload_timeout_seconds: c.upload_timeout_seconds,
            upload_retries: c.upload_retries,
            early_stop: c.early_stop,
            keep_history: false,
        }
    }

    /// Runs in memory, returning the trace that [`run_scenario`] would write.
    pub fn run(&self) -> Result<(Trace, Option<RunOutput>)> {
        let header = TraceHeader::new(&self.config);
        match run_method(&self.context(), &mut |_| Ok(()))? {
            RunOutcome::Infeasible(f) => Ok((
                Trace {
                    header,
                    records: Vec::new(),
                    infeasible: Some(InfeasibleMarker {
                        out_of_memory: f.out_of_memory,
                    }),
                },
                None,
            )),
            RunOutcome::Completed(out) => Ok((
                Trace {
                    header,
                    records: out.records.clone(),
                    infeasible: None,
                },
                Some(out),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub path: PathBuf,
    pub feasible: bool,
    pub rounds: usize,
}

/// Builds the scenario, checks feasibility, runs the round loop and streams
/// the trace to `out`. An infeasible method yields a header plus an
/// infeasibility marker.
pub fn run_scenario(config: &ScenarioConfig, out: &Path) -> Result<RunSummary> {
    let scenario = Scenario::build(config)?;
    let header = TraceHeader::new(config);
    let mut writer = TraceWriter::create(out, &header)?;
    let mut io_error = None;
    let outcome = run_method(&scenario.context(), &mut |record| {
        writer.write(&TraceLine::Round(Box::new(record.clone()))).map_err(|e| {
            let msg = e.to_string();
            io_error = Some(e);
            msg
        })
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    let (feasible, rounds) = match outcome? {
        RunOutcome::Infeasible(f) => {
            writer.write(&TraceLine::Infeasible(InfeasibleMarker {
                out_of_memory: f.out_of_memory,
            }))?;
            (false, 0)
        }
        RunOutcome::Completed(o) => (true, o.records.len()),
    };
    let path = writer.finish()?;
    Ok(RunSummary { path, feasible, rounds })
}

/// Quality of the non-federated reference points for a scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceQuality {
    pub pretrained: EvalResult,
    pub centroid: EvalResult,
    pub local_only: EvalResult,
}

pub fn reference_quality(config: &ScenarioConfig) -> Result<ReferenceQuality> {
    let s = Scenario::build(config)?;
    Ok(ReferenceQuality {
        pretrained: pretrained_quality(&s.base, &s.task)?,
        centroid: centroid_run(&s.base, &s.task, &config.model, &config.training, config.rounds, &s.seeds)?,
        local_only: local_only_run(&s.base, &s.task, &config.model, &config.training, config.rounds, &s.seeds)?,
    })
}

/// Explicit targets when configured, otherwise derived from the pretrained
/// and centroid accuracies.
pub fn resolve_targets(targets: &TargetConfig, pretrained: f64, centroid: f64) -> Result<Vec<TargetSpec>> {
    let percents = match &targets.percent {
        Some(p) => p.clone(),
        None => derive_targets(pretrained, centroid.max(pretrained), &targets.fractions)?,
    };
    Ok(percents.into_iter().map(TargetSpec::percent).collect())
}

fn model_label(traces: &[Trace]) -> String {
    traces.first().map_or_else(String::new, |t| t.header.model.clone())
}

pub fn evaluate_a(traces: &[Trace], budget: &Budget) -> Result<ProtocolReport> {
    let methods: Vec<_> = traces.iter().map(Trace::to_method_trace).collect();
    Ok(eval_protocol_a(&methods, budget, &model_label(traces))?)
}

pub fn evaluate_b(traces: &[Trace], targets: &[TargetSpec]) -> Result<Vec<ProtocolReport>> {
    let methods: Vec<_> = traces.iter().map(Trace::to_method_trace).collect();
    Ok(eval_protocol_b(&methods, targets, &model_label(traces))?)
}

pub fn evaluate_c(nominal: &[Trace], perturbed: &[Trace], mode: DeltaMode, label: &str) -> Result<ProtocolReport> {
    let n: Vec<_> = nominal.iter().map(Trace::to_method_trace).collect();
    let p: Vec<_> = perturbed.iter().map(Trace::to_method_trace).collect();
    Ok(eval_protocol_c(&n, &p, mode, &model_label(nominal), label)?)
}

/// Concatenated CSV and aligned text for a set of reports.
pub fn render_reports(reports: &[ProtocolReport]) -> (String, String) {
    let csv = reports.iter().map(ProtocolReport::to_csv).collect::<Vec<_>>().join("");
    let text = reports.iter().map(ProtocolReport::to_text).collect::<Vec<_>>().join("\n");
    (csv, text)
}

/// Writes `<prefix>.csv` and `<prefix>.txt`.
pub fn write_reports(reports: &[ProtocolReport], prefix: &Path) -> Result<(PathBuf, PathBuf)> {
    let (csv, text) = render_reports(reports);
    let csv_path = prefix.with_extension("csv");
    let txt_path = prefix.with_extension("txt");
    write_file(&csv_path, &csv)?;
    write_file(&txt_path, &text)?;
    Ok((csv_path, txt_path))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}

/// Overall ranking over report CSV files.
pub fn report_overall(report_files: &[PathBuf]) -> Result<Vec<OverallEntry>> {
    let mut reports = Vec::new();
    for p in report_files {
        let text = std::fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?;
        reports.extend(ProtocolReport::parse_csv(&text)?);
    }
    Ok(overall_ranking(&reports))
}

pub fn render_overall(entries: &[OverallEntry]) -> (String, String) {
    (overall_csv(entries), overall_text(entries))
}

/// `(cumulative wall-clock hours, training loss)` at every evaluated round.
pub fn emit_curves(trace: &Trace) -> String {
    let mut s = String::from("wall_clock_hours,train_loss\n");
    for r in &trace.records {
        if let Some(e) = r.eval {
            let _ = writeln!(s, "{},{}", r.cumulative.wall_clock_hours, e.train_loss);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturbations::PerturbationSpec;

    fn tiny() -> ScenarioConfig {
        let mut c = ScenarioConfig {
            rounds: 3,
            ..ScenarioConfig::default()
        };
        c.task.num_clients = 10;
        c.task.samples_per_client = 16;
        c.task.test_samples = 50;
        c.pool.counts = [2; 5];
        c.clients_per_round = 4;
        c
    }

    #[test]
    fn trace_round_trips() {
        let (trace, _) = Scenario::build(&tiny()).unwrap().run().unwrap();
        assert_eq!(trace.records.len(), 3);
        let text = trace.to_jsonl();
        assert_eq!(Trace::parse(&text).unwrap(), trace);
        assert_eq!(Trace::parse(&text).unwrap().to_jsonl(), text);
    }

    #[test]
    fn schema_mismatch_is_reported() {
        let (trace, _) = Scenario::build(&tiny()).unwrap().run().unwrap();
        let text = trace.to_jsonl().replacen("\"schema_version\":1", "\"schema_version\":9", 1);
        let e = Trace::parse(&text).unwrap_err();
        assert!(matches!(e, HarnessError::Schema { found: 9, .. }));
        assert_eq!(e.exit_code(), exit_code::SCHEMA);
    }

    #[test]
    fn run_writes_complete_file_only_on_success() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let s = run_scenario(&tiny(), &path).unwrap();
        assert!(s.feasible);
        assert!(path.exists());
        assert!(!partial_path(&path).exists());
        let (mem, _) = Scenario::build(&tiny()).unwrap().run().unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), mem.to_jsonl());
    }

    #[test]
    fn infeasible_trace_has_marker_only() {
        let mut c = tiny();
        c.memory.overhead_mb = 1e9;
        let (trace, out) = Scenario::build(&c).unwrap().run().unwrap();
        assert!(out.is_none());
        assert!(trace.records.is_empty());
        assert_eq!(trace.infeasible.unwrap().out_of_memory.len(), 10);
    }

    #[test]
    fn curves_project_snapshots() {
        let mut c = tiny();
        c.eval_every = 2;
        let (trace, _) = Scenario::build(&c).unwrap().run().unwrap();
        let curve = emit_curves(&trace);
        let rows: Vec<&str> = curve.lines().skip(1).collect();
        assert_eq!(rows.len(), 2);
        let empty = Trace {
            records: vec![],
            ..trace.clone()
        };
        assert_eq!(emit_curves(&empty), "wall_clock_hours,train_loss\n");
        let r = &trace.records[1];
        assert_eq!(
            rows[0],
            format!("{},{}", r.cumulative.wall_clock_hours, r.eval.unwrap().train_loss)
        );
    }

    #[test]
    fn explicit_targets_override_derivation() {
        let t = TargetConfig {
            fractions: vec![0.5],
            percent: Some(vec![62, 63, 64]),
        };
        let specs = resolve_targets(&t, 0.5817, 0.8576).unwrap();
        assert_eq!(specs.iter().map(|s| s.label.as_str()).collect::<Vec<_>>(), ["62%", "63%", "64%"]);
        let derived = resolve_targets(&TargetConfig::default(), 0.6321, 0.8024).unwrap();
        assert_eq!(derived[0], TargetSpec::percent(71));
    }

    #[test]
    fn dropout_zero_matches_nominal() {
        let nominal = Scenario::build(&tiny()).unwrap().run().unwrap().0;
        let mut c = tiny();
        c.perturbation = PerturbationSpec::Dropout { ratio: 0.0 };
        let zero = Scenario::build(&c).unwrap().run().unwrap().0;
        assert_eq!(nominal.records, zero.records);
    }

    #[test]
    fn upload_retries_recover_dropped_clients() {
        let mut c = tiny();
        c.rounds = 6;
        c.perturbation = PerturbationSpec::Dropout { ratio: 0.5 };
        let plain = Scenario::build(&c).unwrap().run().unwrap().0;
        c.upload_retries = 3;
        let retried = Scenario::build(&c).unwrap().run().unwrap().0;
        let lost = |t: &Trace| t.records.iter().flat_map(|r| &r.clients).filter(|x| x.dropped).count();
        assert!(lost(&retried) < lost(&plain));
        assert!(retried.records.last().unwrap().cumulative.comm_bytes > plain.records.last().unwrap().cumulative.comm_bytes);
        for r in &retried.records {
            for x in &r.clients {
                assert!(x.failed_uploads <= 4);
                assert_eq!(x.dropped, x.failed_uploads == 4);
            }
        }
        // Selection and the first drop draw are unaffected by retries.
        for (a, b) in plain.records.iter().zip(&retried.records) {
            assert_eq!(a.selected, b.selected);
            let first: Vec<bool> = a.clients.iter().map(|x| x.dropped).collect();
            let any_fail: Vec<bool> = b.clients.iter().map(|x| x.failed_uploads > 0).collect();
            assert_eq!(first, any_fail);
        }
    }
}
