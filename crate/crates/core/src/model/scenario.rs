use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;

/// All physical and learning constants of one deployment.
///
/// Node indexing is zero-based: devices are `0..device_count` and the edge
/// server sits at index `device_count` (the last entry of `positions`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Number of edge devices K.
    pub device_count: usize,
    /// 2-D coordinates in meters for the K devices followed by the server.
    pub positions: Vec<[f64; 2]>,
    /// Training samples held by each device.
    pub sample_counts: Vec<u64>,
    /// Floating-point operations needed per training sample.
    pub flops_per_sample: f64,
    /// Per-device CPU energy coefficient in J*s^2/FLOP^3.
    pub cpu_coeff: Vec<f64>,
    /// Per-device allocated bandwidth in Hz.
    pub bandwidth: Vec<f64>,
    /// Transmit power in W (common to all devices).
    pub tx_power: f64,
    /// Channel noise power in W.
    pub noise: f64,
    /// Pathloss constant as a linear gain.
    pub pathloss_const: f64,
    /// Pathloss exponent.
    pub pathloss_exp: f64,
    /// Pathloss reference distance in m.
    pub ref_dist: f64,
    /// Size of one gradient upload in bits.
    pub payload_bits: f64,
    /// Lower bound on the computing speed in FLOP/s.
    pub f_min: f64,
    /// Upper bound on the computing speed in FLOP/s.
    pub f_max: f64,
    /// Weight converting latency into the energy objective (J/s).
    pub mu: f64,
    /// Penalty parameter driving relaxed assignments toward binary values.
    pub beta: f64,
    /// Seed used to draw device positions.
    pub rng_seed: u64,
    /// Radius of the cell in which devices are placed, in m.
    pub cell_radius: f64,
    /// When true, link gains use the squared fading magnitude |h|^2 instead
    /// of the amplitude |h|. Defaults to the amplitude form.
    pub fading_power: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::generate(5, 0)
    }
}

/// A violated configuration invariant, tagged with the offending field.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl ScenarioConfig {
    /// Default deployment: `k` devices uniform in a 200 m disk, server at the
    /// center, and the standard constants (180 kHz bands, 100 mW transmit
    /// power, -30 dB pathloss at 1 m with exponent 3.2, 1 nW noise, 10 kb
    /// uploads, 31380 FLOP/sample over 600 samples per device, speeds in
    /// [0.1, 1] GFLOP/s, mu = 0.5, beta = 1e-4).
    pub fn generate(k: usize, seed: u64) -> Self {
        let mut cfg = Self {
            device_count: k,
            positions: Vec::new(),
            sample_counts: vec![600; k],
            flops_per_sample: 31_380.0,
            cpu_coeff: vec![1e-28; k],
            bandwidth: vec![180e3; k],
            tx_power: 0.1,
            noise: 1e-9,
            pathloss_const: 1e-3,
            pathloss_exp: 3.2,
            ref_dist: 1.0,
            payload_bits: 10_000.0,
            f_min: 1e8,
            f_max: 1e9,
            mu: 0.5,
            beta: 1e-4,
            rng_seed: seed,
            cell_radius: 200.0,
            fading_power: false,
        };
        cfg.regenerate_positions();
        cfg
    }

    /// Redraws device positions from `rng_seed`: uniform in the disk of
    /// radius `cell_radius`, server at the origin.
    pub fn regenerate_positions(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed ^ 0x706f_7369_7469_6f6e);
        let mut positions = Vec::with_capacity(self.device_count + 1);
        for _ in 0..self.device_count {
            loop {
                let r = self.cell_radius * rng.random::<f64>().sqrt();
                let theta = 2.0 * std::f64::consts::PI * rng.random::<f64>();
                let p = [r * theta.cos(), r * theta.sin()];
                // reject draws that collapse onto an existing node
                let clear = positions
                    .iter()
                    .chain(std::iter::once(&[0.0, 0.0]))
                    .all(|q: &[f64; 2]| {
                        let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                        d > 1e-3
                    });
                if clear {
                    positions.push(p);
                    break;
                }
            }
        }
        positions.push([0.0, 0.0]);
        self.positions = positions;
    }

    /// Euclidean distance between nodes `i` and `j`.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let a = self.positions[i];
        let b = self.positions[j];
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    /// Index of the edge server (one past the last device).
    pub fn server(&self) -> usize {
        self.device_count
    }

    /// Midpoint of the speed range, used by the fixed-speed baseline.
    pub fn mid_speed(&self) -> f64 {
        0.5 * (self.f_min + self.f_max)
    }

    /// Checks every invariant, collecting one error per violated field.
    pub fn validate(&self) -> Result<(), Vec<ConfigError>> {
        let mut errors = Vec::new();
        let k = self.device_count;
        if k < 1 {
            errors.push(ConfigError::new("device_count", "must be at least 1"));
        }
        if self.positions.len() != k + 1 {
            errors.push(ConfigError::new(
                "positions",
                format!("expected {} entries (devices plus server), got {}", k + 1, self.positions.len()),
            ));
        }
        for (field, len) in [
            ("sample_counts", self.sample_counts.len()),
            ("cpu_coeff", self.cpu_coeff.len()),
            ("bandwidth", self.bandwidth.len()),
        ] {
            if len != k {
                errors.push(ConfigError::new(field, format!("expected {k} entries, got {len}")));
            }
        }
        if self.sample_counts.iter().any(|&d| d == 0) {
            errors.push(ConfigError::new("sample_counts", "all devices need at least one sample"));
        }
        for (field, ok) in [
            ("flops_per_sample", self.flops_per_sample > 0.0),
            ("tx_power", self.tx_power > 0.0),
            ("noise", self.noise > 0.0),
            ("pathloss_const", self.pathloss_const > 0.0),
            ("pathloss_exp", self.pathloss_exp > 0.0),
            ("ref_dist", self.ref_dist > 0.0),
            ("payload_bits", self.payload_bits > 0.0),
            ("f_min", self.f_min > 0.0),
            ("cell_radius", self.cell_radius > 0.0),
            ("beta", self.beta > 0.0),
            ("mu", self.mu >= 0.0),
        ] {
            if !ok {
                errors.push(ConfigError::new(field, "must be positive"));
            }
        }
        if self.cpu_coeff.iter().any(|&c| c <= 0.0) {
            errors.push(ConfigError::new("cpu_coeff", "must be positive"));
        }
        if self.bandwidth.iter().any(|&w| w <= 0.0) {
            errors.push(ConfigError::new("bandwidth", "must be positive"));
        }
        if !(self.f_min < self.f_max) {
            errors.push(ConfigError::new("f_min", "f_min must be strictly below f_max"));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    /// Parses a flat `key = value` config file. Unset keys keep their
    /// defaults; `device_count` resizes the per-device vectors and redraws
    /// positions unless the file pins them explicitly.
    pub fn from_config_str(text: &str) -> Result<Self, Vec<ConfigError>> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut errors = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((key, value)) => pairs.push((key.trim().to_string(), value.trim().to_string())),
                None => errors.push(ConfigError::new(
                    "syntax",
                    format!("line {}: expected `key = value`, got `{line}`", lineno + 1),
                )),
            }
        }

        let get = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());

        let mut cfg = ScenarioConfig::default();
        if let Some(v) = get("device_count") {
            match v.parse::<usize>() {
                Ok(k) if k >= 1 => cfg = ScenarioConfig::generate(k, cfg.rng_seed),
                _ => errors.push(ConfigError::new("device_count", format!("not a positive integer: `{v}`"))),
            }
        }
        if let Some(v) = get("rng_seed") {
            match v.parse::<u64>() {
                Ok(s) => {
                    cfg.rng_seed = s;
                    cfg.regenerate_positions();
                }
                Err(_) => errors.push(ConfigError::new("rng_seed", format!("not an integer: `{v}`"))),
            }
        }

        let parse_f64 = |key: &str, dest: &mut f64, errors: &mut Vec<ConfigError>| {
            if let Some(v) = get(key) {
                match v.parse::<f64>() {
                    Ok(x) => *dest = x,
                    Err(_) => errors.push(ConfigError::new(key, format!("not a number: `{v}`"))),
                }
            }
        };
        let mut flops = cfg.flops_per_sample;
        let mut tx_power = cfg.tx_power;
        let mut noise = cfg.noise;
        let mut g0 = cfg.pathloss_const;
        let mut alpha = cfg.pathloss_exp;
        let mut d0 = cfg.ref_dist;
        let mut payload = cfg.payload_bits;
        let mut f_min = cfg.f_min;
        let mut f_max = cfg.f_max;
        let mut mu = cfg.mu;
        let mut beta = cfg.beta;
        let mut radius = cfg.cell_radius;
        parse_f64("flops_per_sample", &mut flops, &mut errors);
        parse_f64("tx_power", &mut tx_power, &mut errors);
        parse_f64("noise", &mut noise, &mut errors);
        parse_f64("pathloss_const", &mut g0, &mut errors);
        parse_f64("pathloss_exp", &mut alpha, &mut errors);
        parse_f64("ref_dist", &mut d0, &mut errors);
        parse_f64("payload_bits", &mut payload, &mut errors);
        parse_f64("f_min", &mut f_min, &mut errors);
        parse_f64("f_max", &mut f_max, &mut errors);
        parse_f64("mu", &mut mu, &mut errors);
        parse_f64("beta", &mut beta, &mut errors);
        parse_f64("cell_radius", &mut radius, &mut errors);
        cfg.flops_per_sample = flops;
        cfg.tx_power = tx_power;
        cfg.noise = noise;
        cfg.pathloss_const = g0;
        cfg.pathloss_exp = alpha;
        cfg.ref_dist = d0;
        cfg.payload_bits = payload;
        cfg.f_min = f_min;
        cfg.f_max = f_max;
        cfg.mu = mu;
        cfg.beta = beta;
        if (cfg.cell_radius - radius).abs() > 0.0 {
            cfg.cell_radius = radius;
            cfg.regenerate_positions();
        }

        if let Some(v) = get("fading_power") {
            match v.parse::<bool>() {
                Ok(b) => cfg.fading_power = b,
                Err(_) => errors.push(ConfigError::new("fading_power", format!("not a bool: `{v}`"))),
            }
        }

        let k = cfg.device_count;
        let parse_u64_list = |key: &str, v: &str, errors: &mut Vec<ConfigError>| -> Option<Vec<u64>> {
            let parts: Result<Vec<u64>, _> = v.split(',').map(|p| p.trim().parse::<u64>()).collect();
            match parts {
                Ok(list) if list.len() == 1 => Some(vec![list[0]; k]),
                Ok(list) if list.len() == k => Some(list),
                Ok(list) => {
                    errors.push(ConfigError::new(key, format!("expected 1 or {k} entries, got {}", list.len())));
                    None
                }
                Err(_) => {
                    errors.push(ConfigError::new(key, format!("not an integer list: `{v}`")));
                    None
                }
            }
        };
        let parse_f64_list = |key: &str, v: &str, errors: &mut Vec<ConfigError>| -> Option<Vec<f64>> {
            let parts: Result<Vec<f64>, _> = v.split(',').map(|p| p.trim().parse::<f64>()).collect();
            match parts {
                Ok(list) if list.len() == 1 => Some(vec![list[0]; k]),
                Ok(list) if list.len() == k => Some(list),
                Ok(list) => {
                    errors.push(ConfigError::new(key, format!("expected 1 or {k} entries, got {}", list.len())));
                    None
                }
                Err(_) => {
                    errors.push(ConfigError::new(key, format!("not a number list: `{v}`")));
                    None
                }
            }
        };
        if let Some(v) = get("sample_counts") {
            if let Some(list) = parse_u64_list("sample_counts", v, &mut errors) {
                cfg.sample_counts = list;
            }
        }
        if let Some(v) = get("cpu_coeff") {
            if let Some(list) = parse_f64_list("cpu_coeff", v, &mut errors) {
                cfg.cpu_coeff = list;
            }
        }
        if let Some(v) = get("bandwidth") {
            if let Some(list) = parse_f64_list("bandwidth", v, &mut errors) {
                cfg.bandwidth = list;
            }
        }
        if let Some(v) = get("positions") {
            let mut list = Vec::new();
            let mut ok = true;
            for part in v.split(';') {
                let coords: Vec<&str> = part.split(',').map(|c| c.trim()).collect();
                if coords.len() != 2 {
                    ok = false;
                    break;
                }
                match (coords[0].parse::<f64>(), coords[1].parse::<f64>()) {
                    (Ok(x), Ok(y)) => list.push([x, y]),
                    _ => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok && list.len() == k + 1 {
                cfg.positions = list;
            } else {
                errors.push(ConfigError::new(
                    "positions",
                    format!("expected {} `x,y` pairs separated by `;`", k + 1),
                ));
            }
        }

        let known = [
            "device_count", "rng_seed", "flops_per_sample", "tx_power", "noise",
            "pathloss_const", "pathloss_exp", "ref_dist", "payload_bits", "f_min",
            "f_max", "mu", "beta", "cell_radius", "fading_power", "sample_counts",
            "cpu_coeff", "bandwidth", "positions",
        ];
        for (key, _) in &pairs {
            if !known.contains(&key.as_str()) {
                errors.push(ConfigError::new(key, "unknown key"));
            }
        }

        if let Err(mut more) = cfg.validate() {
            errors.append(&mut more);
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(errors)
        }
    }

    /// Canonical `key = value` dump; stable field order, full float precision.
    pub fn canonical_dump(&self) -> String {
        let mut out = String::new();
        let join_f64 = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(out, "device_count = {}", self.device_count);
        let _ = writeln!(
            out,
            "positions = {}",
            self.positions
                .iter()
                .map(|p| format!("{:e},{:e}", p[0], p[1]))
                .collect::<Vec<_>>()
                .join(";")
        );
        let _ = writeln!(
            out,
            "sample_counts = {}",
            self.sample_counts.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(out, "flops_per_sample = {:e}", self.flops_per_sample);
        let _ = writeln!(out, "cpu_coeff = {}", join_f64(&self.cpu_coeff));
        let _ = writeln!(out, "bandwidth = {}", join_f64(&self.bandwidth));
        let _ = writeln!(out, "tx_power = {:e}", self.tx_power);
        let _ = writeln!(out, "noise = {:e}", self.noise);
        let _ = writeln!(out, "pathloss_const = {:e}", self.pathloss_const);
        let _ = writeln!(out, "pathloss_exp = {:e}", self.pathloss_exp);
        let _ = writeln!(out, "ref_dist = {:e}", self.ref_dist);
        let _ = writeln!(out, "payload_bits = {:e}", self.payload_bits);
        let _ = writeln!(out, "f_min = {:e}", self.f_min);
        let _ = writeln!(out, "f_max = {:e}", self.f_max);
        let _ = writeln!(out, "mu = {:e}", self.mu);
        let _ = writeln!(out, "beta = {:e}", self.beta);
        let _ = writeln!(out, "rng_seed = {}", self.rng_seed);
        let _ = writeln!(out, "cell_radius = {:e}", self.cell_radius);
        let _ = writeln!(out, "fading_power = {}", self.fading_power);
        out
    }

    /// Short hash identifying the full scenario, embedded in artifacts and
    /// model checkpoints.
    pub fn hash_hex(&self) -> String {
        let digest = Sha256::digest(self.canonical_dump().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scenario_is_valid() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.device_count, 5);
        assert_eq!(cfg.positions.len(), 6);
        assert_eq!(cfg.positions[5], [0.0, 0.0]);
        assert!((cfg.tx_power - 0.1).abs() < 1e-15);
        assert!((cfg.mu - 0.5).abs() < 1e-15);
        assert!((cfg.beta - 1e-4).abs() < 1e-20);
    }

    #[test]
    fn positions_stay_inside_cell() {
        for seed in 0..20 {
            let cfg = ScenarioConfig::generate(8, seed);
            for i in 0..8 {
                let p = cfg.positions[i];
                assert!((p[0].powi(2) + p[1].powi(2)).sqrt() <= cfg.cell_radius + 1e-9);
            }
        }
    }

    #[test]
    fn empty_config_gives_defaults() {
        let cfg = ScenarioConfig::from_config_str("").unwrap();
        assert_eq!(cfg, ScenarioConfig::default());
    }

    #[test]
    fn bad_speed_bounds_reported_once() {
        let errs = ScenarioConfig::from_config_str("f_min = 2e9\n").unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].field, "f_min");
    }

    #[test]
    fn negative_bandwidth_reported() {
        let errs = ScenarioConfig::from_config_str("bandwidth = -1.0\n").unwrap_err();
        assert!(errs.iter().any(|e| e.field == "bandwidth"));
    }

    #[test]
    fn device_count_rescales_vectors() {
        let cfg = ScenarioConfig::from_config_str("device_count = 3\nsample_counts = 100,200,300\n").unwrap();
        assert_eq!(cfg.device_count, 3);
        assert_eq!(cfg.sample_counts, vec![100, 200, 300]);
        assert_eq!(cfg.cpu_coeff.len(), 3);
        assert_eq!(cfg.positions.len(), 4);
    }

    #[test]
    fn hash_changes_with_seed() {
        let a = ScenarioConfig::generate(5, 0);
        let b = ScenarioConfig::generate(5, 1);
        assert_ne!(a.hash_hex(), b.hash_hex());
        assert_eq!(a.hash_hex(), ScenarioConfig::generate(5, 0).hash_hex());
    }

    #[test]
    fn unknown_key_rejected() {
        let errs = ScenarioConfig::from_config_str("frobnication = 3\n").unwrap_err();
        assert_eq!(errs[0].field, "frobnication");
    }
}
