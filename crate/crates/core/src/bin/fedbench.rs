use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fedlora_bench::harness::{
    evaluate_a, evaluate_b, evaluate_c, emit_curves, exit_code, reference_quality, render_overall, render_reports,
    report_overall, resolve_targets, run_scenario, write_file, HarnessError, Result, ScenarioConfig, TargetConfig,
    Trace,
};
use fedlora_bench::protocols::{Budget, DeltaMode, ProtocolReport, DEFAULT_TARGET_FRACTIONS};

#[derive(Parser)]
#[command(name = "fedbench", version, about = "Federated LoRA benchmark on simulated edge devices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its JSONL trace.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fixed-budget comparison: best accuracy reachable within the caps.
    EvalA {
        #[arg(long, num_args = 1.., required = true)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        comm_mb: Option<f64>,
        #[arg(long)]
        wall_clock_hours: Option<f64>,
        #[arg(long)]
        energy_kj: Option<f64>,
        #[arg(long)]
        memory_mb: Option<f64>,
        #[command(flatten)]
        output: Output,
    },
    /// Fixed-target comparison: cost to first reach each accuracy.
    EvalB {
        #[arg(long, num_args = 1.., required = true)]
        traces: Vec<PathBuf>,
        /// Whole-percent accuracy targets, comma separated.
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<u32>>,
        #[command(flatten)]
        anchors: Anchors,
        #[command(flatten)]
        output: Output,
    },
    /// Robustness: change under perturbation relative to nominal traces.
    EvalC {
        #[arg(long, num_args = 1.., required = true)]
        nominal: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        perturbed: Vec<PathBuf>,
        #[arg(long, default_value = "perturbed")]
        label: String,
        #[arg(long, value_enum, default_value = "absolute")]
        delta: DeltaArg,
        #[command(flatten)]
        output: Output,
    },
    /// Accuracy targets between the pretrained and centroid reference points.
    DeriveTargets {
        #[command(flatten)]
        anchors: Anchors,
    },
    /// Overall method ranking from report CSV files.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Training-loss curve against cumulative wall-clock hours.
    Curves {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DeltaArg {
    Absolute,
    Percent,
}

#[derive(clap::Args)]
struct Output {
    /// Writes `<prefix>.csv` and `<prefix>.txt`; prints to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(clap::Args)]
struct Anchors {
    /// Scenario whose pretrained and centroid accuracies anchor the targets.
    #[arg(long, conflicts_with_all = ["pretrained", "centroid"])]
    config: Option<PathBuf>,
    #[arg(long, requires = "centroid")]
    pretrained: Option<f64>,
    #[arg(long, requires = "pretrained")]
    centroid: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
}

impl Anchors {
    fn target_config(&self) -> TargetConfig {
        TargetConfig {
            fractions: self.fractions.clone().unwrap_or_else(|| DEFAULT_TARGET_FRACTIONS.to_vec()),
            percent: None,
        }
    }

    fn accuracies(&self) -> Result<(f64, f64)> {
        match (&self.config, self.pretrained, self.centroid) {
            (Some(path), _, _) => {
                let cfg = ScenarioConfig::load(path)?;
                let q = reference_quality(&cfg)?;
                Ok((q.pretrained.accuracy, q.centroid.accuracy))
            }
            (None, Some(p), Some(c)) => Ok((p, c)),
            _ => Err(HarnessError::Validation {
                field: "targets".into(),
                message: "pass --targets, --config, or both --pretrained and --centroid".into(),
            }),
        }
    }
}

fn read_traces(paths: &[PathBuf]) -> Result<Vec<Trace>> {
    paths.iter().map(|p| Trace::read(p)).collect()
}

fn emit(reports: &[ProtocolReport], output: &Output) -> Result<()> {
    let (csv, text) = render_reports(reports);
    emit_rendered(&csv, &text, output)
}

fn emit_rendered(csv: &str, text: &str, output: &Output) -> Result<()> {
    match &output.out {
        Some(prefix) => {
            write_file(&prefix.with_extension("csv"), csv)?;
            write_file(&prefix.with_extension("txt"), text)
        }
        None => {
            print!("{}", if matches!(output.format, Format::Csv) { csv } else { text });
            Ok(())
        }
    }
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Run { config, out } => {
            let cfg = ScenarioConfig::load(&config)?;
            let summary = run_scenario(&cfg, &out)?;
            if summary.feasible {
                eprintln!("wrote {} rounds to {}", summary.rounds, summary.path.display());
                Ok(exit_code::OK)
            } else {
                eprintln!("{}: infeasible on this pool, marker written", summary.path.display());
                Ok(exit_code::INFEASIBLE)
            }
        }
        Command::EvalA {
            traces,
            comm_mb,
            wall_clock_hours,
            energy_kj,
            memory_mb,
            output,
        } => {
            let budget = Budget {
                comm_mb,
                wall_clock_hours,
                energy_kj,
                memory_mb,
            };
            budget.validate()?;
            let report = evaluate_a(&read_traces(&traces)?, &budget)?;
            emit(&[report], &output)?;
            Ok(exit_code::OK)
        }
        Command::EvalB {
            traces,
            targets,
            anchors,
            output,
        } => {
            let specs = match targets {
                Some(t) => resolve_targets(
                    &TargetConfig {
                        fractions: vec![],
                        percent: Some(t),
                    },
                    0.0,
                    0.0,
                )?,
                None => {
                    let (p, c) = anchors.accuracies()?;
                    resolve_targets(&anchors.target_config(), p, c)?
                }
            };
            let reports = evaluate_b(&read_traces(&traces)?, &specs)?;
            emit(&reports, &output)?;
            Ok(exit_code::OK)
        }
        Command::EvalC {
            nominal,
            perturbed,
            label,
            delta,
            output,
        } => {
            let mode = match delta {
                DeltaArg::Absolute => DeltaMode::Absolute,
                DeltaArg::Percent => DeltaMode::Percent,
            };
            let report = evaluate_c(&read_traces(&nominal)?, &read_traces(&perturbed)?, mode, &label)?;
            emit(&[report], &output)?;
            Ok(exit_code::OK)
        }
        Command::DeriveTargets { anchors } => {
            let (p, c) = anchors.accuracies()?;
            let specs = resolve_targets(&anchors.target_config(), p, c)?;
            let labels: Vec<_> = specs.iter().map(|s| s.label.clone()).collect();
            println!("pretrained={p} centroid={c} targets={}", labels.join(","));
            Ok(exit_code::OK)
        }
        Command::Report { inputs, output } => {
            let entries = report_overall(&inputs)?;
            let (csv, text) = render_overall(&entries);
            emit_rendered(&csv, &text, &output)?;
            Ok(exit_code::OK)
        }
        Command::Curves { trace, out } => {
            let curve = emit_curves(&Trace::read(&trace)?);
            match out {
                Some(path) => write_file(Path::new(&path), &curve)?,
                None => print!("{curve}"),
            }
            Ok(exit_code::OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
