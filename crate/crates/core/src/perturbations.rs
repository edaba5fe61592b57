//! System perturbations applied on top of a nominal run: a cyclic bandwidth
//! schedule, Bernoulli client dropout, and alternative device compositions.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edge_sim::{ClientPool, DeviceClass, DeviceTable};

#[derive(Debug, Error, PartialEq)]
pub enum PerturbationError {
    #[error("dropout ratio must lie in [0, 1), got {0}")]
    DropoutRatio(f64),
    #[error("device mix has {got} clients, expected {expected}")]
    MixSize { expected: usize, got: usize },
    #[error("invalid mix label {0:?}")]
    MixLabel(String),
}

pub type Result<T> = std::result::Result<T, PerturbationError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationSpec {
    #[default]
    None,
    BandwidthFluctuation,
    Dropout {
        ratio: f64,
    },
    HeterogeneityMix {
        /// Clients per device class, fastest first.
        counts: [usize; 5],
    },
}

impl PerturbationSpec {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        match *self {
            PerturbationSpec::Dropout { ratio } if !(0.0..1.0).contains(&ratio) => {
                Err(PerturbationError::DropoutRatio(ratio))
            }
            PerturbationSpec::HeterogeneityMix { counts } => {
                let got: usize = counts.iter().sum();
                if got == pool_size {
                    Ok(())
                } else {
                    Err(PerturbationError::MixSize {
                        expected: pool_size,
                        got,
                    })
                }
            }
            _ => Ok(()),
        }
    }

    /// Bandwidth multiplier at a point in simulated time.
    pub fn bandwidth_at(&self, sim_time_hours: f64) -> f64 {
        match self {
            PerturbationSpec::BandwidthFluctuation => bandwidth_multiplier(sim_time_hours),
            _ => 1.0,
        }
    }

    pub fn dropout_ratio(&self) -> f64 {
        match *self {
            PerturbationSpec::Dropout { ratio } => ratio,
            _ => 0.0,
        }
    }
}

/// Full, half and quarter bandwidth for a third of an hour each, repeating
/// every hour. Intervals are closed on the left.
pub fn bandwidth_multiplier(sim_time_hours: f64) -> f64 {
    let phase = sim_time_hours.rem_euclid(1.0);
    if phase * 3.0 < 1.0 {
        1.0
    } else if phase * 3.0 < 2.0 {
        0.5
    } else {
        0.25
    }
}

/// One independent Bernoulli draw per selected client, in the given order.
/// A ratio of zero consumes no randomness.
pub fn apply_dropout(selected: &[usize], ratio: f64, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(PerturbationError::DropoutRatio(ratio));
    }
    if ratio == 0.0 {
        return Ok(vec![false; selected.len()]);
    }
    Ok(selected.iter().map(|_| rng.random::<f64>() < ratio).collect())
}

/// Pool with the given per-class counts. Client ids are assigned in class
/// blocks, so client `i` keeps shard `i` whatever the mix.
pub fn build_mix(counts: [usize; 5], pool_size: usize, devices: DeviceTable) -> Result<ClientPool> {
    let got: usize = counts.iter().sum();
    if got != pool_size {
        return Err(PerturbationError::MixSize {
            expected: pool_size,
            got,
        });
    }
    ClientPool::from_counts(counts, devices).map_err(|_| PerturbationError::MixSize {
        expected: pool_size,
        got,
    })
}

/// Mix label in the `70J+20I+10P` form.
pub struct MixLabel(pub [usize; 5]);

impl fmt::Display for MixLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = DeviceClass::ALL
            .iter()
            .zip(self.0)
            .filter(|&(_, n)| n > 0)
            .map(|(c, n)| format!("{n}{}", c.code()))
            .collect();
        f.write_str(&parts.join("+"))
    }
}

/// Parses labels such as `100J` or `10I+10P+30M+50N`.
pub fn parse_mix(label: &str) -> Result<[usize; 5]> {
    let bad = || PerturbationError::MixLabel(label.to_string());
    let mut counts = [0usize; 5];
    for part in label.split('+').map(str::trim) {
        let code = part.chars().last().ok_or_else(bad)?;
        let class = DeviceClass::ALL
            .into_iter()
            .find(|c| c.code() == code.to_ascii_uppercase())
            .ok_or_else(bad)?;
        let n: usize = part[..part.len() - code.len_utf8()].parse().map_err(|_| bad())?;
        counts[class.index()] += n;
    }
    Ok(counts)
}
