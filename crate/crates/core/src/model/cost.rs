use super::{ChannelMatrix, ModelError, ScenarioConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Absolute slack (in seconds) allowed when checking the per-link
/// computation/communication precedence constraint.
pub const PRECEDENCE_TOLERANCE: f64 = 1e-9;

/// A finalized assignment of forwarding targets and computing speeds.
///
/// `parents[i]` is the node device `i` uploads to (another device or the
/// server at index `device_count`); `speeds[i]` is its computing speed in
/// FLOP/s, inside the configured bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub parents: Vec<usize>,
    pub speeds: Vec<f64>,
}

impl Schedule {
    pub fn new(parents: Vec<usize>, speeds: Vec<f64>) -> Self {
        Self { parents, speeds }
    }

    pub fn device_count(&self) -> usize {
        self.parents.len()
    }

    pub fn server(&self) -> usize {
        self.parents.len()
    }

    /// One-hot assignment row for device `i` over the `K + 1` nodes.
    pub fn assignment_row(&self, i: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.parents.len() + 1];
        row[self.parents[i]] = 1.0;
        row
    }

    /// Short content hash, used to identify schedules in traces.
    pub fn hash_hex(&self) -> String {
        let mut hasher = Sha256::new();
        for &p in &self.parents {
            hasher.update(p.to_le_bytes());
        }
        for &f in &self.speeds {
            hasher.update(f.to_le_bytes());
        }
        hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-device cost breakdown for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceCost {
    pub comp_time: f64,
    pub comm_time: f64,
    pub comp_energy: f64,
    pub comm_energy: f64,
}

impl DeviceCost {
    pub fn total_time(&self) -> f64 {
        self.comp_time + self.comm_time
    }
}

/// Total cost of one round.
///
/// `latency_total` is the largest computation + communication time over all
/// devices; `latency_server_connected` restricts the maximum to devices that
/// upload straight to the server. For precedence-feasible schedules the two
/// coincide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundCost {
    pub energy_total: f64,
    pub latency_total: f64,
    pub latency_server_connected: f64,
    pub objective: f64,
    pub per_device: Vec<DeviceCost>,
}

impl RoundCost {
    pub fn csv_header() -> &'static str {
        "energy_total_j,latency_total_s,latency_server_connected_s,objective"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:e},{:e},{:e},{:e}",
            self.energy_total, self.latency_total, self.latency_server_connected, self.objective
        )
    }
}

/// Computation time and energy of one local gradient pass:
/// `time = D * N / f`, `energy = kappa * D * N * f^2`.
pub fn comp_cost(
    samples: u64,
    flops_per_sample: f64,
    cpu_coeff: f64,
    speed: f64,
    f_min: f64,
    f_max: f64,
) -> Result<(f64, f64), ModelError> {
    let slack = 1e-9 * f_max;
    if speed < f_min - slack || speed > f_max + slack {
        return Err(ModelError::SpeedOutOfBounds {
            device: usize::MAX,
            speed,
            f_min,
            f_max,
        });
    }
    let work = samples as f64 * flops_per_sample;
    Ok((work / speed, cpu_coeff * work * speed * speed))
}

/// Transmission time and energy for one upload over the assigned link:
/// `time = B / (I . r)`, `energy = P * time`.
pub fn comm_cost(
    assignment_row: &[f64],
    rates_row: &[f64],
    payload_bits: f64,
    tx_power: f64,
) -> Result<(f64, f64), ModelError> {
    debug_assert_eq!(assignment_row.len(), rates_row.len());
    let rate: f64 = assignment_row.iter().zip(rates_row).map(|(a, r)| a * r).sum();
    if rate <= 0.0 {
        return Err(ModelError::InfeasibleLink(usize::MAX));
    }
    let time = payload_bits / rate;
    Ok((time, tx_power * time))
}

fn device_costs(
    schedule: &Schedule,
    channels: &ChannelMatrix,
    config: &ScenarioConfig,
) -> Result<Vec<DeviceCost>, ModelError> {
    let k = config.device_count;
    if schedule.device_count() != k || channels.device_count != k {
        return Err(ModelError::ShapeMismatch {
            expected: k,
            got: schedule.device_count(),
        });
    }
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let (comp_time, comp_energy) = comp_cost(
            config.sample_counts[i],
            config.flops_per_sample,
            config.cpu_coeff[i],
            schedule.speeds[i],
            config.f_min,
            config.f_max,
        )
        .map_err(|e| match e {
            ModelError::SpeedOutOfBounds { speed, f_min, f_max, .. } => ModelError::SpeedOutOfBounds {
                device: i,
                speed,
                f_min,
                f_max,
            },
            other => other,
        })?;
        let rate = channels.rate(i, schedule.parents[i]);
        if rate <= 0.0 {
            return Err(ModelError::InfeasibleLink(i));
        }
        let comm_time = config.payload_bits / rate;
        out.push(DeviceCost {
            comp_time,
            comm_time,
            comp_energy,
            comm_energy: config.tx_power * comm_time,
        });
    }
    Ok(out)
}

/// Evaluates the full round cost of a finalized schedule: total energy, the
/// straggler-determined latency, and the weighted objective
/// `energy + mu * latency`.
pub fn round_cost(
    schedule: &Schedule,
    channels: &ChannelMatrix,
    config: &ScenarioConfig,
) -> Result<RoundCost, ModelError> {
    let per_device = device_costs(schedule, channels, config)?;
    let energy_total: f64 = per_device.iter().map(|d| d.comp_energy + d.comm_energy).sum();
    let latency_total = per_device
        .iter()
        .map(DeviceCost::total_time)
        .fold(f64::NEG_INFINITY, f64::max);
    let latency_server_connected = per_device
        .iter()
        .enumerate()
        .filter(|(i, _)| schedule.parents[*i] == schedule.server())
        .map(|(_, d)| d.total_time())
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(RoundCost {
        energy_total,
        latency_total,
        latency_server_connected,
        objective: energy_total + config.mu * latency_total,
        per_device,
    })
}

/// Reports every device pair `(i, j)` where device `i` uploads to device `j`
/// but finishes its computation + upload later than `j` finishes computing
/// (beyond [`PRECEDENCE_TOLERANCE`]). An empty list means the schedule is
/// precedence-feasible.
pub fn check_precedence(
    schedule: &Schedule,
    channels: &ChannelMatrix,
    config: &ScenarioConfig,
) -> Result<Vec<(usize, usize)>, ModelError> {
    let per_device = device_costs(schedule, channels, config)?;
    let mut violations = Vec::new();
    for i in 0..config.device_count {
        let j = schedule.parents[i];
        if j < config.device_count && per_device[i].total_time() > per_device[j].comp_time + PRECEDENCE_TOLERANCE {
            violations.push((i, j));
        }
    }
    Ok(violations)
}
