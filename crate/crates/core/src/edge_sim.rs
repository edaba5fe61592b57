//! Simulated edge system: device profiles, the client pool, per-round
//! selection, and the online cost ledger (simulated wall-clock, bytes on the
//! wire, energy, peak memory).

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lora_model::EvalResult;

#[derive(Debug, Error, PartialEq)]
pub enum EdgeError {
    #[error("cannot select {count} clients from a pool of {pool}")]
    SelectionTooLarge { count: usize, pool: usize },
    #[error("invalid device profile {device}: {reason}")]
    Profile { device: String, reason: String },
    #[error("invalid pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, EdgeError>;

pub const MB: f64 = 1e6;
pub const MIB: f64 = 1024.0 * 1024.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceClass {
    Jetson,
    Iqoo,
    P50,
    Mate20,
    Nova9,
}

impl DeviceClass {
    /// Fastest to slowest.
    pub const ALL: [DeviceClass; 5] = [
        DeviceClass::Jetson,
        DeviceClass::Iqoo,
        DeviceClass::P50,
        DeviceClass::Mate20,
        DeviceClass::Nova9,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// One-letter code used in mix labels such as `70J+20I+10P`.
    pub fn code(self) -> char {
        ['J', 'I', 'P', 'M', 'N'][self.index()]
    }

    pub fn name(self) -> &'static str {
        ["Jetson", "iQOO", "P50", "Mate20", "Nova9"][self.index()]
    }
}

impl fmt::Display for DeviceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub steps_per_second: f64,
    pub memory_capacity_mb: f64,
    pub active_power_watts: f64,
    pub comm_power_watts: f64,
    pub bandwidth_mbps: f64,
}

impl DeviceProfile {
    pub fn default_for(class: DeviceClass) -> Self {
        let i = class.index();
        Self {
            steps_per_second: [50.0, 40.0, 25.0, 15.0, 10.0][i],
            memory_capacity_mb: [8192.0, 16384.0, 8192.0, 6144.0, 8192.0][i],
            active_power_watts: [15.0, 8.0, 6.0, 5.0, 5.0][i],
            comm_power_watts: [3.0, 2.0, 2.0, 2.0, 2.0][i],
            bandwidth_mbps: 100.0,
        }
    }

    pub fn validate(&self, class: DeviceClass) -> Result<()> {
        let fields = [
            ("steps_per_second", self.steps_per_second),
            ("memory_capacity_mb", self.memory_capacity_mb),
            ("active_power_watts", self.active_power_watts),
            ("comm_power_watts", self.comm_power_watts),
            ("bandwidth_mbps", self.bandwidth_mbps),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EdgeError::Profile {
                    device: class.name().into(),
                    reason: format!("{name} must be positive and finite, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// One profile per device class, indexed by [`DeviceClass::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceTable {
    profiles: [DeviceProfile; 5],
}

impl Default for DeviceTable {
    fn default() -> Self {
        Self {
            profiles: DeviceClass::ALL.map(DeviceProfile::default_for),
        }
    }
}

impl DeviceTable {
    pub fn new(profiles: [DeviceProfile; 5]) -> Result<Self> {
        for (p, c) in profiles.iter().zip(DeviceClass::ALL) {
            p.validate(c)?;
        }
        Ok(Self { profiles })
    }

    pub fn get(&self, class: DeviceClass) -> &DeviceProfile {
        &self.profiles[class.index()]
    }

    pub fn set(&mut self, class: DeviceClass, profile: DeviceProfile) -> Result<()> {
        profile.validate(class)?;
        self.profiles[class.index()] = profile;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client_id: usize,
    pub device: DeviceClass,
}

/// The client population. Client `i` trains on shard `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientPool {
    clients: Vec<ClientRecord>,
    devices: DeviceTable,
}

impl ClientPool {
    /// Ids `0..N` assigned in device-class blocks, fastest class first.
    pub fn from_counts(counts: [usize; 5], devices: DeviceTable) -> Result<Self> {
        let clients: Vec<ClientRecord> = DeviceClass::ALL
            .iter()
            .zip(counts)
            .flat_map(|(&device, n)| std::iter::repeat_n(device, n))
            .enumerate()
            .map(|(client_id, device)| ClientRecord { client_id, device })
            .collect();
        if clients.is_empty() {
            return Err(EdgeError::Pool("pool has no clients".into()));
        }
        Ok(Self { clients, devices })
    }

    /// 100 clients, 20 of each class.
    pub fn reference() -> Self {
        Self::from_counts([20; 5], DeviceTable::default()).expect("non-empty")
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn clients(&self) -> &[ClientRecord] {
        &self.clients
    }

    pub fn devices(&self) -> &DeviceTable {
        &self.devices
    }

    pub fn device_of(&self, client_id: usize) -> DeviceClass {
        self.clients[client_id].device
    }

    pub fn profile_of(&self, client_id: usize) -> &DeviceProfile {
        self.devices.get(self.device_of(client_id))
    }

    pub fn counts(&self) -> [usize; 5] {
        let mut c = [0; 5];
        for r in &self.clients {
            c[r.device.index()] += 1;
        }
        c
    }

    /// Device classes with at least one client.
    pub fn classes_present(&self) -> Vec<DeviceClass> {
        let counts = self.counts();
        DeviceClass::ALL.into_iter().filter(|c| counts[c.index()] > 0).collect()
    }
}

/// Uniform sample of `count` distinct ids from `0..pool_size`, sorted.
pub fn select_clients(pool_size: usize, count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if count > pool_size {
        return Err(EdgeError::SelectionTooLarge { count, pool: pool_size });
    }
    let mut ids = rand::seq::index::sample(rng, pool_size, count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Synchronous round: the slowest client plus fixed server time.
pub fn round_wall_clock(durations: &[f64], server_aggregation_seconds: f64) -> f64 {
    durations.iter().copied().fold(0.0, f64::max) + server_aggregation_seconds
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientCosts {
    pub train_seconds: f64,
    pub comm_seconds: f64,
    pub energy_kj: f64,
    pub peak_memory_mb: f64,
}

impl ClientCosts {
    pub fn total_seconds(&self) -> f64 {
        self.train_seconds + self.comm_seconds
    }
}

/// Seconds to move `bytes` over the device link at the given multiplier.
pub fn transfer_seconds(profile: &DeviceProfile, bytes: u64, bandwidth_multiplier: f64) -> f64 {
    bytes as f64 * 8.0 / (profile.bandwidth_mbps * bandwidth_multiplier * 1e6)
}

pub fn client_costs(
    profile: &DeviceProfile,
    down_bytes: u64,
    up_bytes: u64,
    train_steps: f64,
    bandwidth_multiplier: f64,
    peak_memory_mb: f64,
) -> ClientCosts {
    let comm_seconds = transfer_seconds(profile, down_bytes + up_bytes, bandwidth_multiplier);
    costs_from_times(profile, train_steps / profile.steps_per_second, comm_seconds, peak_memory_mb)
}

/// Linear power model: active power while training, radio power while
/// communicating.
pub fn costs_from_times(profile: &DeviceProfile, train_seconds: f64, comm_seconds: f64, peak_memory_mb: f64) -> ClientCosts {
    ClientCosts {
        train_seconds,
        comm_seconds,
        energy_kj: (profile.active_power_watts * train_seconds + profile.comm_power_watts * comm_seconds) / 1000.0,
        peak_memory_mb,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryModel {
    /// Fixed runtime overhead added to every footprint.
    pub overhead_mb: f64,
}

impl Default for MemoryModel {
    fn default() -> Self {
        Self { overhead_mb: 64.0 }
    }
}

/// Bytes held by a client hosting the first `hosted_layers` layers:
/// frozen weights and biases, adapter factors with their gradients and two
/// optimizer moments, and one activation buffer per hosted layer output plus
/// the input batch.
pub fn footprint_bytes(layer_dims: &[(usize, usize)], ranks: &[usize], batch: usize, hosted_layers: usize) -> u64 {
    let hosted = hosted_layers.min(layer_dims.len());
    let mut elements = 0usize;
    if hosted > 0 {
        elements += batch * layer_dims[0].0;
    }
    for (&(fan_in, fan_out), &r) in layer_dims.iter().zip(ranks).take(hosted) {
        let frozen = fan_in * fan_out + fan_out;
        let trainable = r * fan_in + fan_out * r;
        elements += frozen + 4 * trainable + batch * fan_out;
    }
    elements as u64 * 8
}

pub fn memory_footprint(
    model: &MemoryModel,
    layer_dims: &[(usize, usize)],
    ranks: &[usize],
    batch: usize,
    hosted_layers: usize,
) -> f64 {
    footprint_bytes(layer_dims, ranks, batch, hosted_layers) as f64 / MIB + model.overhead_mb
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub feasible: bool,
    /// Clients whose footprint exceeds their device memory.
    pub out_of_memory: Vec<usize>,
}

/// A method is infeasible when any client it must run on would exceed its
/// device memory. A footprint equal to capacity still fits.
pub fn check_feasibility(footprints: &[(usize, f64)], pool: &ClientPool) -> Feasibility {
    let out_of_memory: Vec<usize> = footprints
        .iter()
        .filter(|&&(id, mb)| mb > pool.profile_of(id).memory_capacity_mb)
        .map(|&(id, _)| id)
        .collect();
    Feasibility {
        feasible: out_of_memory.is_empty(),
        out_of_memory,
    }
}

/// One client's share of a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundCost {
    pub client_id: usize,
    pub device: DeviceClass,
    pub rank: usize,
    pub train_seconds: f64,
    pub comm_seconds: f64,
    pub down_bytes: u64,
    pub up_bytes: u64,
    pub energy_kj: f64,
    pub peak_memory_mb: f64,
    /// The update never reached the server.
    pub dropped: bool,
    /// Upload attempts that timed out.
    #[serde(default)]
    pub failed_uploads: u32,
}

impl ClientRoundCost {
    pub fn duration_seconds(&self) -> f64 {
        self.train_seconds + self.comm_seconds
    }
}

/// Byte breakdown for split training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ExchangeBreakdown {
    pub activation_bytes: u64,
    pub gradient_bytes: u64,
    pub adapter_sync_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub test_loss: f64,
    pub test_accuracy: f64,
    /// Mean local batch loss of the clients that trained this round.
    pub train_loss: f64,
}

impl EvalSnapshot {
    pub fn new(eval: EvalResult, train_loss: f64) -> Self {
        Self {
            test_loss: eval.loss,
            test_accuracy: eval.accuracy,
            train_loss,
        }
    }
}

/// Running totals after a round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CumulativeCosts {
    pub wall_clock_hours: f64,
    pub comm_bytes: u64,
    pub comm_mb: f64,
    pub energy_kj: f64,
    /// Mean over every client that has participated so far of its highest
    /// footprint.
    pub avg_peak_memory_mb: f64,
    pub participants: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    pub clients: Vec<ClientRoundCost>,
    pub wall_clock_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exchange: Option<ExchangeBreakdown>,
    /// False when every selected client dropped.
    pub aggregated: bool,
    pub cumulative: CumulativeCosts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSnapshot>,
}

impl RoundRecord {
    pub fn round_bytes(&self) -> u64 {
        self.clients.iter().map(|c| c.down_bytes + c.up_bytes).sum()
    }

    pub fn round_energy_kj(&self) -> f64 {
        self.clients.iter().map(|c| c.energy_kj).sum()
    }
}

/// Accumulates round costs. Updated once per round, in client-id order.
#[derive(Debug, Clone, Default)]
pub struct CostLedger {
    wall_clock_seconds: f64,
    comm_bytes: u64,
    energy_kj: f64,
    peaks: BTreeMap<usize, f64>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Simulated time so far, in hours.
    pub fn elapsed_hours(&self) -> f64 {
        self.wall_clock_seconds / 3600.0
    }

    pub fn record_round(&mut self, clients: &[ClientRoundCost], wall_clock_seconds: f64) -> CumulativeCosts {
        self.wall_clock_seconds += wall_clock_seconds;
        for c in clients {
            self.comm_bytes += c.down_bytes + c.up_bytes;
            self.energy_kj += c.energy_kj;
            let peak = self.peaks.entry(c.client_id).or_insert(0.0);
            *peak = peak.max(c.peak_memory_mb);
        }
        self.snapshot()
    }

    pub fn snapshot(&self) -> CumulativeCosts {
        let n = self.peaks.len();
        CumulativeCosts {
            wall_clock_hours: self.elapsed_hours(),
            comm_bytes: self.comm_bytes,
            comm_mb: self.comm_bytes as f64 / MB,
            energy_kj: self.energy_kj,
            avg_peak_memory_mb: if n == 0 {
                0.0
            } else {
                self.peaks.values().sum::<f64>() / n as f64
            },
            participants: n,
        }
    }
}
