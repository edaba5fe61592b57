//! Benchmark evaluators over recorded traces: Quality-under-Budget (A),
//! Cost-to-Target (B) and Robustness (C), dense ranking, and the cross-protocol
//! overall ranking.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edge_sim::RoundRecord;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("method {0} has an empty trace")]
    NoData(String),
    #[error("method {0} appears in only one of the two runs")]
    Pairing(String),
    #[error("invalid target: {0}")]
    Target(String),
    #[error("invalid budget: {0}")]
    Budget(String),
    #[error("malformed report: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

/// Rank = 1 + number of distinct values strictly better. Ties share a rank
/// and the next distinct value gets the next integer.
pub fn dense_rank(values: &[f64], direction: Direction) -> Vec<usize> {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(|a, b| match direction {
        Direction::HigherBetter => b.total_cmp(a),
        Direction::LowerBetter => a.total_cmp(b),
    });
    distinct.dedup();
    values
        .iter()
        .map(|v| 1 + distinct.iter().take_while(|d| *d != v).count())
        .collect()
}

/// Dense ranks over the present values; missing values get no rank.
pub fn dense_rank_optional(values: &[Option<f64>], direction: Direction) -> Vec<Option<usize>> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    let ranks = dense_rank(&present, direction);
    let mut it = ranks.into_iter();
    values.iter().map(|v| v.and_then(|_| it.next())).collect()
}

/// Whole-percent targets at each fraction of the way from the pretrained to
/// the centroid accuracy (both given as fractions in `[0, 1]`).
pub fn derive_targets(pretrained: f64, centroid: f64, fractions: &[f64]) -> Result<Vec<u32>> {
    if !(0.0..=1.0).contains(&pretrained) || !(0.0..=1.0).contains(&centroid) || pretrained > centroid {
        return Err(ProtocolError::Target(format!(
            "need 0 <= pretrained ({pretrained}) <= centroid ({centroid}) <= 1"
        )));
    }
    fractions
        .iter()
        .map(|&f| {
            if !(0.0..=1.0).contains(&f) {
                return Err(ProtocolError::Target(format!("fraction {f} outside [0, 1]")));
            }
            // The epsilon absorbs representation error in inputs like 0.6321.
            Ok((100.0 * (pretrained + f * (centroid - pretrained)) + 1e-9).floor() as u32)
        })
        .collect()
}

pub const DEFAULT_TARGET_FRACTIONS: [f64; 3] = [0.5, 0.7, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    pub comm_mb: Option<f64>,
    pub wall_clock_hours: Option<f64>,
    pub energy_kj: Option<f64>,
    pub memory_mb: Option<f64>,
}

impl Budget {
    /// Caps may be zero (nothing fits) but not negative or NaN.
    pub fn validate(&self) -> Result<()> {
        for (name, cap) in [
            ("comm_mb", self.comm_mb),
            ("wall_clock_hours", self.wall_clock_hours),
            ("energy_kj", self.energy_kj),
            ("memory_mb", self.memory_mb),
        ] {
            if let Some(c) = cap {
                if !(c >= 0.0) {
                    return Err(ProtocolError::Budget(format!("{name} = {c}")));
                }
            }
        }
        Ok(())
    }

    fn admits(&self, r: &RoundRecord, memory_high_water: f64) -> bool {
        let within = |cap: Option<f64>, v: f64| cap.is_none_or(|c| v <= c);
        within(self.comm_mb, r.cumulative.comm_mb)
            && within(self.wall_clock_hours, r.cumulative.wall_clock_hours)
            && within(self.energy_kj, r.cumulative.energy_kj)
            && within(self.memory_mb, memory_high_water)
    }

    pub fn describe(&self) -> String {
        let parts: Vec<String> = [
            ("comm_mb", self.comm_mb),
            ("wall_clock_hours", self.wall_clock_hours),
            ("energy_kj", self.energy_kj),
            ("memory_mb", self.memory_mb),
        ]
        .iter()
        .filter_map(|(n, c)| c.map(|c| format!("{n}<={c}")))
        .collect();
        if parts.is_empty() {
            "unbounded".into()
        } else {
            parts.join(" ")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Loss,
    WallClock,
    Comm,
    Energy,
    Memory,
}

impl Metric {
    pub fn direction(self) -> Direction {
        match self {
            Metric::Accuracy => Direction::HigherBetter,
            _ => Direction::LowerBetter,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Loss => "loss",
            Metric::WallClock => "wall_clock_h",
            Metric::Comm => "comm_mb",
            Metric::Energy => "energy_kj",
            Metric::Memory => "memory_mb",
        }
    }

    pub fn from_key(key: &str) -> Option<Metric> {
        [
            Metric::Accuracy,
            Metric::Loss,
            Metric::WallClock,
            Metric::Comm,
            Metric::Energy,
            Metric::Memory,
        ]
        .into_iter()
        .find(|m| m.key() == key)
    }

    fn of(self, r: &RoundRecord) -> Option<f64> {
        match self {
            Metric::Accuracy => r.eval.map(|e| e.test_accuracy),
            Metric::Loss => r.eval.map(|e| e.test_loss),
            Metric::WallClock => Some(r.cumulative.wall_clock_hours),
            Metric::Comm => Some(r.cumulative.comm_mb),
            Metric::Energy => Some(r.cumulative.energy_kj),
            Metric::Memory => Some(r.cumulative.avg_peak_memory_mb),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    A,
    B,
    C,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::A => "A",
            Protocol::B => "B",
            Protocol::C => "C",
        })
    }
}

/// One method's recorded run.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodTrace {
    pub method: String,
    pub feasible: bool,
    pub records: Vec<RoundRecord>,
}

impl MethodTrace {
    pub fn infeasible(method: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            feasible: false,
            records: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Cell {
    pub value: Option<f64>,
    pub delta: Option<f64>,
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub feasible: bool,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub model: String,
    /// Budget description, target label or perturbation label.
    pub group: String,
    pub metrics: Vec<Metric>,
    pub rows: Vec<ReportRow>,
}

impl ProtocolReport {
    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn cell(&self, method: &str, metric: Metric) -> Option<&Cell> {
        let i = self.metrics.iter().position(|&m| m == metric)?;
        self.row(method).map(|r| &r.cells[i])
    }

    fn has_deltas(&self) -> bool {
        self.protocol == Protocol::C
    }

    /// Fills every cell's rank from its value (or |delta| for robustness).
    fn assign_ranks(&mut self) {
        for (i, &metric) in self.metrics.iter().enumerate() {
            let (keys, dir): (Vec<Option<f64>>, Direction) = if self.protocol == Protocol::C {
                (
                    self.rows.iter().map(|r| r.cells[i].delta.map(f64::abs)).collect(),
                    Direction::LowerBetter,
                )
            } else {
                (self.rows.iter().map(|r| r.cells[i].value).collect(), metric.direction())
            };
            for (row, rank) in self.rows.iter_mut().zip(dense_rank_optional(&keys, dir)) {
                row.cells[i].rank = rank;
            }
        }
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["protocol", "model", "group", "method", "feasible"].map(String::from).to_vec();
        for m in &self.metrics {
            h.push(m.key().to_string());
            if self.has_deltas() {
                h.push(format!("{}_delta", m.key()));
            }
            h.push(format!("{}_rank", m.key()));
        }
        h
    }

    fn cells_text(&self, row: &ReportRow, exact: bool) -> Vec<String> {
        let num = |v: Option<f64>, signed: bool| match v {
            None => "-".to_string(),
            Some(x) if exact => format!("{x}"),
            Some(x) if signed => format!("{x:+.2}"),
            Some(x) => format!("{x:.2}"),
        };
        let mut out = vec![
            self.protocol.to_string(),
            self.model.clone(),
            self.group.clone(),
            row.method.clone(),
            row.feasible.to_string(),
        ];
        for c in &row.cells {
            out.push(num(c.value, false));
            if self.has_deltas() {
                out.push(num(c.delta, true));
            }
            out.push(c.rank.map_or("-".to_string(), |r| r.to_string()));
        }
        out
    }

    /// Comma-separated, full float precision, `-` for unranked cells.
    pub fn to_csv(&self) -> String {
        let mut s = self.header().join(",");
        s.push('\n');
        for row in &self.rows {
            s.push_str(&self.cells_text(row, true).join(","));
            s.push('\n');
        }
        s
    }

    /// Aligned columns, two decimals.
    pub fn to_text(&self) -> String {
        let mut table = vec![self.header()];
        table.extend(self.rows.iter().map(|r| self.cells_text(r, false)));
        align(&table)
    }

    /// Parses the output of [`ProtocolReport::to_csv`]; one report per
    /// distinct `(protocol, model, group)` in file order.
    pub fn parse_csv(text: &str) -> Result<Vec<ProtocolReport>> {
        let mut reports: Vec<ProtocolReport> = Vec::new();
        let mut layout: Option<(Vec<Metric>, bool)> = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f[0] == "protocol" {
                let metrics: Vec<Metric> = f.iter().skip(5).filter_map(|c| Metric::from_key(c)).collect();
                let deltas = f.iter().any(|c| c.ends_with("_delta"));
                if f.len() != 5 + metrics.len() * if deltas { 3 } else { 2 } {
                    return Err(ProtocolError::Malformed(format!("unexpected columns in {line:?}")));
                }
                layout = Some((metrics, deltas));
                continue;
            }
            let (metrics, deltas) = layout
                .as_ref()
                .ok_or_else(|| ProtocolError::Malformed("row before header".into()))?;
            if f.len() != 5 + metrics.len() * if *deltas { 3 } else { 2 } {
                return Err(ProtocolError::Malformed(format!("bad row {line:?}")));
            }
            let protocol = match f[0] {
                "A" => Protocol::A,
                "B" => Protocol::B,
                "C" => Protocol::C,
                other => return Err(ProtocolError::Malformed(format!("unknown protocol {other:?}"))),
            };
            let number = |s: &str| -> Result<Option<f64>> {
                if s == "-" {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| ProtocolError::Malformed(format!("bad number {s:?}")))
                }
            };
            let mut fields = f[5..].iter();
            let mut cells = Vec::with_capacity(metrics.len());
            for _ in metrics {
                let value = number(fields.next().expect("width checked"))?;
                let delta = if *deltas {
                    number(fields.next().expect("width checked"))?
                } else {
                    None
                };
                let rank = match *fields.next().expect("width checked") {
                    "-" => None,
                    s => Some(s.parse().map_err(|_| ProtocolError::Malformed(format!("bad rank {s:?}")))?),
                };
                cells.push(Cell { value, delta, rank });
            }
            let row = ReportRow {
                method: f[3].to_string(),
                feasible: f[4] == "true",
                cells,
            };
            match reports
                .iter_mut()
                .find(|r| r.protocol == protocol && r.model == f[1] && r.group == f[2])
            {
                Some(r) => r.rows.push(row),
                None => reports.push(ProtocolReport {
                    protocol,
                    model: f[1].to_string(),
                    group: f[2].to_string(),
                    metrics: metrics.clone(),
                    rows: vec![row],
                }),
            }
        }
        Ok(reports)
    }
}

fn align(table: &[Vec<String>]) -> String {
    let cols = table.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| table.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for row in table {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, cell)| format!("{cell:<w$}", w = widths[i]))
            .collect();
        let _ = writeln!(s, "{}", line.join("  ").trim_end());
    }
    s
}

/// Best accuracy and, separately, best loss among evaluated rounds that stay
/// within every cap. Memory is checked against the highest footprint seen so
/// far.
pub fn eval_protocol_a(traces: &[MethodTrace], budget: &Budget, model: &str) -> Result<ProtocolReport> {
    budget.validate()?;
    let metrics = vec![Metric::Accuracy, Metric::Loss];
    let mut rows = Vec::with_capacity(traces.len());
    for t in traces {
        let mut cells = vec![Cell::default(); 2];
        if t.feasible {
            if t.records.is_empty() {
                return Err(ProtocolError::NoData(t.method.clone()));
            }
            let mut high_water = 0.0f64;
            let mut best_acc: Option<f64> = None;
            let mut best_loss: Option<f64> = None;
            for r in &t.records {
                high_water = r.clients.iter().map(|c| c.peak_memory_mb).fold(high_water, f64::max);
                let Some(e) = r.eval else { continue };
                if !budget.admits(r, high_water) {
                    continue;
                }
                best_acc = Some(best_acc.map_or(e.test_accuracy, |b| b.max(e.test_accuracy)));
                best_loss = Some(best_loss.map_or(e.test_loss, |b| b.min(e.test_loss)));
            }
            cells[0].value = best_acc;
            cells[1].value = best_loss;
        }
        rows.push(ReportRow {
            method: t.method.clone(),
            feasible: t.feasible,
            cells,
        });
    }
    let mut report = ProtocolReport {
        protocol: Protocol::A,
        model: model.to_string(),
        group: budget.describe(),
        metrics,
        rows,
    };
    report.assign_ranks();
    Ok(report)
}

/// Target accuracy with a display label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    /// Fraction in `[0, 1]`.
    pub accuracy: f64,
    pub label: String,
}

impl TargetSpec {
    pub fn percent(p: u32) -> Self {
        Self {
            accuracy: p as f64 / 100.0,
            label: format!("{p}%"),
        }
    }
}

/// Cumulative costs at the first evaluated round reaching each target.
pub fn eval_protocol_b(traces: &[MethodTrace], targets: &[TargetSpec], model: &str) -> Result<Vec<ProtocolReport>> {
    let metrics = vec![Metric::WallClock, Metric::Comm, Metric::Energy, Metric::Memory];
    targets
        .iter()
        .map(|target| {
            if !(0.0..=1.0).contains(&target.accuracy) {
                return Err(ProtocolError::Target(format!("accuracy {} outside [0, 1]", target.accuracy)));
            }
            let rows = traces
                .iter()
                .map(|t| {
                    let hit = t
                        .feasible
                        .then(|| {
                            t.records
                                .iter()
                                .find(|r| r.eval.is_some_and(|e| e.test_accuracy >= target.accuracy))
                        })
                        .flatten();
                    ReportRow {
                        method: t.method.clone(),
                        feasible: t.feasible,
                        cells: metrics
                            .iter()
                            .map(|m| Cell {
                                value: hit.and_then(|r| m.of(r)),
                                ..Cell::default()
                            })
                            .collect(),
                    }
                })
                .collect();
            let mut report = ProtocolReport {
                protocol: Protocol::B,
                model: model.to_string(),
                group: target.label.clone(),
                metrics: metrics.clone(),
                rows,
            };
            report.assign_ranks();
            Ok(report)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    #[default]
    Absolute,
    /// `100 · (perturbed − nominal) / nominal`.
    Percent,
}

fn final_values(t: &MethodTrace) -> Result<Vec<Option<f64>>> {
    let last = t.records.last().ok_or_else(|| ProtocolError::NoData(t.method.clone()))?;
    let acc = t.records.iter().rev().find_map(|r| r.eval).map(|e| e.test_accuracy);
    Ok(vec![
        acc,
        Some(last.cumulative.wall_clock_hours),
        Some(last.cumulative.comm_mb),
        Some(last.cumulative.energy_kj),
        Some(last.cumulative.avg_peak_memory_mb),
    ])
}

/// Final values under perturbation and their change from the nominal run,
/// ranked by the size of the change.
pub fn eval_protocol_c(
    nominal: &[MethodTrace],
    perturbed: &[MethodTrace],
    mode: DeltaMode,
    model: &str,
    label: &str,
) -> Result<ProtocolReport> {
    for p in perturbed {
        if !nominal.iter().any(|n| n.method == p.method) {
            return Err(ProtocolError::Pairing(p.method.clone()));
        }
    }
    let metrics = vec![Metric::Accuracy, Metric::WallClock, Metric::Comm, Metric::Energy, Metric::Memory];
    let mut rows = Vec::with_capacity(nominal.len());
    for n in nominal {
        let p = perturbed
            .iter()
            .find(|p| p.method == n.method)
            .ok_or_else(|| ProtocolError::Pairing(n.method.clone()))?;
        let feasible = n.feasible && p.feasible;
        let mut cells = vec![Cell::default(); metrics.len()];
        if feasible {
            let (nv, pv) = (final_values(n)?, final_values(p)?);
            for ((cell, a), b) in cells.iter_mut().zip(nv).zip(pv) {
                cell.value = b;
                cell.delta = match (a, b, mode) {
                    (Some(a), Some(b), DeltaMode::Absolute) => Some(b - a),
                    (Some(a), Some(b), DeltaMode::Percent) if a != 0.0 => Some(100.0 * (b - a) / a),
                    (Some(a), Some(b), DeltaMode::Percent) if a == b => Some(0.0),
                    _ => None,
                };
            }
        }
        rows.push(ReportRow {
            method: n.method.clone(),
            feasible,
            cells,
        });
    }
    let mut report = ProtocolReport {
        protocol: Protocol::C,
        model: model.to_string(),
        group: label.to_string(),
        metrics,
        rows,
    };
    report.assign_ranks();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallEntry {
    pub method: String,
    pub protocol: Protocol,
    pub model: String,
    pub average_rank: f64,
    /// `4 − average_rank`; larger is better.
    pub radar: f64,
}

/// Per (method, protocol, model): the mean over reports of each report's mean
/// rank for that method. Methods with no ranks on an axis get no entry there.
pub fn overall_ranking(reports: &[ProtocolReport]) -> Vec<OverallEntry> {
    let mut acc: BTreeMap<(String, Protocol, String), Vec<f64>> = BTreeMap::new();
    for r in reports {
        for row in &r.rows {
            let ranks: Vec<f64> = row.cells.iter().filter_map(|c| c.rank).map(|k| k as f64).collect();
            if ranks.is_empty() {
                continue;
            }
            let mean = ranks.iter().sum::<f64>() / ranks.len() as f64;
            acc.entry((row.method.clone(), r.protocol, r.model.clone())).or_default().push(mean);
        }
    }
    acc.into_iter()
        .map(|((method, protocol, model), means)| {
            let average_rank = means.iter().sum::<f64>() / means.len() as f64;
            OverallEntry {
                method,
                protocol,
                model,
                average_rank,
                radar: 4.0 - average_rank,
            }
        })
        .collect()
}

pub fn overall_csv(entries: &[OverallEntry]) -> String {
    let mut s = String::from("method,protocol,model,average_rank,radar\n");
    for e in entries {
        let _ = writeln!(s, "{},{},{},{},{}", e.method, e.protocol, e.model, e.average_rank, e.radar);
    }
    s
}

pub fn overall_text(entries: &[OverallEntry]) -> String {
    let mut table = vec![["method", "protocol", "model", "average_rank", "radar"].map(String::from).to_vec()];
    for e in entries {
        table.push(vec![
            e.method.clone(),
            e.protocol.to_string(),
            e.model.clone(),
            format!("{:.2}", e.average_rank),
            format!("{:.2}", e.radar),
        ]);
    }
    align(&table)
}
