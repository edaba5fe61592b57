use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ScenarioConfig;
use super::{HarnessError, Result};
use crate::edge_sim::RoundRecord;
use crate::protocols::MethodTrace;

pub const SCHEMA_VERSION: u32 = 1;

/// SHA-256 of the config's canonical JSON form.
pub fn config_hash(cfg: &ScenarioConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema_version: u32,
    pub scenario: String,
    pub method: String,
    pub model: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: ScenarioConfig,
}

impl TraceHeader {
    pub fn new(cfg: &ScenarioConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scenario: cfg.name.clone(),
            method: cfg.method.label().to_string(),
            model: cfg.model_label.clone(),
            seed: cfg.seed,
            config_hash: config_hash(cfg),
            config: cfg.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibleMarker {
    /// Clients whose footprint exceeds device memory.
    pub out_of_memory: Vec<usize>,
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceLine {
    Header(Box<TraceHeader>),
    Round(Box<RoundRecord>),
    Infeasible(InfeasibleMarker),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<RoundRecord>,
    pub infeasible: Option<InfeasibleMarker>,
}

impl Trace {
    pub fn to_method_trace(&self) -> MethodTrace {
        MethodTrace {
            method: self.header.method.clone(),
            feasible: self.infeasible.is_none(),
            records: self.records.clone(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![TraceLine::Header(Box::new(self.header.clone()))];
        lines.extend(self.records.iter().map(|r| TraceLine::Round(Box::new(r.clone()))));
        if let Some(m) = &self.infeasible {
            lines.push(TraceLine::Infeasible(m.clone()));
        }
        lines
            .iter()
            .map(|l| serde_json::to_string(l).expect("trace line serializes") + "\n")
            .collect()
    }

    pub fn parse(text: &str) -> Result<Trace> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| HarnessError::Parse("empty trace".into()))?;
        let header = parse_header(first)?;
        let mut records: Vec<RoundRecord> = Vec::new();
        let mut infeasible = None;
        for (no, line) in lines {
            let parsed: TraceLine = serde_json::from_str(line)
                .map_err(|e| HarnessError::Parse(format!("trace line {}: {e}", no + 1)))?;
            match parsed {
                TraceLine::Round(r) => {
                    if records.last().is_some_and(|p| p.round >= r.round) {
                        return Err(HarnessError::Parse(format!(
                            "trace line {}: round {} does not follow round {}",
                            no + 1,
                            r.round,
                            records.last().map_or(0, |p| p.round)
                        )));
                    }
                    records.push(*r);
                }
                TraceLine::Infeasible(m) => infeasible = Some(m),
                TraceLine::Header(_) => return Err(HarnessError::Parse(format!("trace line {}: second header", no + 1))),
            }
        }
        Ok(Trace {
            header,
            records,
            infeasible,
        })
    }

    pub fn read(path: &Path) -> Result<Trace> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Trace::parse(&text)
    }
}

/// Checks the schema version before trusting the rest of the header.
fn parse_header(line: &str) -> Result<TraceHeader> {
    let raw: serde_json::Value =
        serde_json::from_str(line).map_err(|e| HarnessError::Parse(format!("trace header: {e}")))?;
    if raw.get("type").and_then(|t| t.as_str()) != Some("header") {
        return Err(HarnessError::Parse("first trace line is not a header".into()));
    }
    let found = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0);
    if found != u64::from(SCHEMA_VERSION) {
        return Err(HarnessError::Schema {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    match serde_json::from_value::<TraceLine>(raw) {
        Ok(TraceLine::Header(h)) => Ok(*h),
        Ok(_) => unreachable!("type checked above"),
        Err(e) => Err(HarnessError::Parse(format!("trace header: {e}"))),
    }
}

/// Streams trace lines into `<path>.partial` and renames on success, so an
/// interrupted run never leaves a file that looks complete.
pub struct TraceWriter {
    final_path: PathBuf,
    partial_path: PathBuf,
    out: BufWriter<File>,
}

impl TraceWriter {
    pub fn create(path: &Path, header: &TraceHeader) -> Result<Self> {
        let partial_path = partial_path(path);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let file = File::create(&partial_path).map_err(|e| HarnessError::io(&partial_path, e))?;
        let mut w = Self {
            final_path: path.to_path_buf(),
            partial_path,
            out: BufWriter::new(file),
        };
        w.write(&TraceLine::Header(Box::new(header.clone())))?;
        Ok(w)
    }

    pub fn write(&mut self, line: &TraceLine) -> Result<()> {
        let json = serde_json::to_string(line).expect("trace line serializes");
        writeln!(self.out, "{json}").map_err(|e| HarnessError::io(&self.partial_path, e))
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.out.flush().map_err(|e| HarnessError::io(&self.partial_path, e))?;
        std::fs::rename(&self.partial_path, &self.final_path).map_err(|e| HarnessError::io(&self.final_path, e))?;
        Ok(self.final_path)
    }
}

pub fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}
