use super::{ModelError, ScenarioConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// One realization of the link gains from each device to every other node,
/// with the achievable rates derived from them.
///
/// Row `i` covers device `i`; column `j` covers all nodes including the
/// server at column `device_count`. The diagonal (a device to itself) holds
/// zeros and is never read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMatrix {
    pub device_count: usize,
    /// Linear gains, row-major `device_count x (device_count + 1)`.
    gains: Vec<f64>,
    /// Rates in bit/s, same shape as `gains`.
    rates: Vec<f64>,
    /// Seed this realization was drawn with.
    pub seed: u64,
}

impl ChannelMatrix {
    pub fn gain(&self, device: usize, node: usize) -> f64 {
        self.gains[device * (self.device_count + 1) + node]
    }

    pub fn rate(&self, device: usize, node: usize) -> f64 {
        self.rates[device * (self.device_count + 1) + node]
    }

    /// All rates out of `device`, indexed by target node.
    pub fn rates_from(&self, device: usize) -> &[f64] {
        let w = self.device_count + 1;
        &self.rates[device * w..(device + 1) * w]
    }

    pub fn gains_from(&self, device: usize) -> &[f64] {
        let w = self.device_count + 1;
        &self.gains[device * w..(device + 1) * w]
    }

    fn from_gains(config: &ScenarioConfig, gains: Vec<f64>, seed: u64) -> Self {
        let k = config.device_count;
        let mut rates = vec![0.0; k * (k + 1)];
        for i in 0..k {
            for j in 0..=k {
                if j != i {
                    rates[i * (k + 1) + j] =
                        link_rate(gains[i * (k + 1) + j], config.bandwidth[i], config.tx_power, config.noise);
                }
            }
        }
        Self {
            device_count: k,
            gains,
            rates,
            seed,
        }
    }
}

/// Achievable rate of a single link in bit/s: `w * log2(1 + P*H / sigma^2)`.
pub fn link_rate(gain: f64, bandwidth_hz: f64, tx_power: f64, noise: f64) -> f64 {
    bandwidth_hz * (1.0 + tx_power * gain / noise).log2()
}

/// Magnitude of one unit-variance circularly symmetric complex Gaussian draw
/// (Rayleigh with mean sqrt(pi)/2).
pub(crate) fn fading_magnitude<R: rand::Rng>(rng: &mut R) -> f64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    (0.5 * (re * re + im * im)).sqrt()
}

fn deterministic_gain(config: &ScenarioConfig, i: usize, j: usize) -> Result<f64, ModelError> {
    let d = config.distance(i, j);
    if d <= 0.0 {
        return Err(ModelError::DegenerateGeometry(i, j));
    }
    Ok(config.pathloss_const * (config.ref_dist / d).powf(config.pathloss_exp))
}

fn sample_with<F>(config: &ScenarioConfig, seed: u64, mut fading: F) -> Result<ChannelMatrix, ModelError>
where
    F: FnMut() -> f64,
{
    let k = config.device_count;
    if config.positions.len() != k + 1 {
        return Err(ModelError::InvalidConfig(format!(
            "expected {} positions, got {}",
            k + 1,
            config.positions.len()
        )));
    }
    let mut gains = vec![0.0; k * (k + 1)];
    for i in 0..k {
        for j in 0..=k {
            if j == i {
                continue;
            }
            let base = deterministic_gain(config, i, j)?;
            let h = fading();
            let h = if config.fading_power { h * h } else { h };
            gains[i * (k + 1) + j] = base * h;
        }
    }
    Ok(ChannelMatrix::from_gains(config, gains, seed))
}

/// Draws one channel realization: pathloss from the configured geometry and
/// independent Rayleigh fading per ordered pair. Deterministic for a fixed
/// `(config, seed)`.
pub fn sample_channels(config: &ScenarioConfig, seed: u64) -> Result<ChannelMatrix, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(config, seed, move || fading_magnitude(&mut rng))
}

/// Test hook: the same construction with `|h| = 1` on every link, leaving
/// only the deterministic pathloss.
pub fn sample_channels_unit_fading(config: &ScenarioConfig) -> Result<ChannelMatrix, ModelError> {
    sample_with(config, 0, || 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seed_identical_matrix() {
        let cfg = ScenarioConfig::default();
        let a = sample_channels(&cfg, 42).unwrap();
        let b = sample_channels(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_channels(&cfg, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unit_fading_at_reference_distance_gives_pathloss_const() {
        let mut cfg = ScenarioConfig::generate(1, 0);
        cfg.positions = vec![[1.0, 0.0], [0.0, 0.0]];
        let ch = sample_channels_unit_fading(&cfg).unwrap();
        assert!((ch.gain(0, 1) - cfg.pathloss_const).abs() < 1e-18);
    }

    #[test]
    fn rayleigh_mean_matches_closed_form() {
        // Monte-Carlo estimate of E|h| against sqrt(pi)/2 for unit-variance
        // complex Gaussian fading.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let mean = (0..n).map(|_| fading_magnitude(&mut rng)).sum::<f64>() / n as f64;
        let expected = std::f64::consts::PI.sqrt() / 2.0;
        assert!(
            (mean - expected).abs() < 0.01,
            "mean {mean} vs expected {expected}"
        );
    }

    #[test]
    fn coincident_positions_rejected() {
        let mut cfg = ScenarioConfig::generate(2, 0);
        cfg.positions = vec![[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]];
        match sample_channels(&cfg, 0) {
            Err(ModelError::DegenerateGeometry(_, _)) => {}
            other => panic!("expected degenerate geometry error, got {other:?}"),
        }
    }

    #[test]
    fn rate_law_reference_points() {
        // SNR = 1 doubles nothing: log2(2) = 1.
        assert!((link_rate(1e-8, 180e3, 0.1, 1e-9) - 180e3).abs() < 1e-6);
        // Zero gain carries nothing.
        assert_eq!(link_rate(0.0, 180e3, 0.1, 1e-9), 0.0);
        // SNR = 3: log2(4) = 2.
        assert!((link_rate(3e-8, 180e3, 0.1, 1e-9) - 360e3).abs() < 1e-6);
    }

    #[test]
    fn rate_monotone_in_gain_and_power() {
        let mut prev = 0.0;
        for g in [1e-10, 1e-9, 1e-8, 1e-7] {
            let r = link_rate(g, 180e3, 0.1, 1e-9);
            assert!(r > prev);
            prev = r;
        }
        let mut prev = 0.0;
        for p in [0.01, 0.1, 0.2, 0.4] {
            let r = link_rate(1e-8, 180e3, p, 1e-9);
            assert!(r > prev);
            prev = r;
        }
    }

    #[test]
    fn power_fading_squares_magnitude() {
        let mut cfg = ScenarioConfig::generate(2, 3);
        let amp = sample_channels(&cfg, 5).unwrap();
        cfg.fading_power = true;
        let pow = sample_channels(&cfg, 5).unwrap();
        // Same draws, squared: H_pow / base = (H_amp / base)^2.
        for i in 0..2 {
            for j in 0..=2 {
                if i == j {
                    continue;
                }
                let d = cfg.distance(i, j);
                let base = cfg.pathloss_const * (cfg.ref_dist / d).powf(cfg.pathloss_exp);
                let h_amp = amp.gain(i, j) / base;
                let h_pow = pow.gain(i, j) / base;
                assert!((h_pow - h_amp * h_amp).abs() < 1e-12 * h_pow.max(1.0));
            }
        }
    }
}
