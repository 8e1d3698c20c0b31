//! Ground-truth and baseline solvers: the exact optimum by exhaustive tree
//! enumeration at small device counts, and the two flat-star benchmarks
//! (fixed midpoint speeds, and convex-optimized speeds).
//!
//! With the topology fixed, the scheduling problem reduces to choosing
//! speeds. In the reciprocal variables `u_i = 1/f_i` the precedence
//! constraints and the latency epigraph are linear while the computation
//! energy `kappa * D * N / u^2` stays convex, so each per-topology problem is
//! one smooth convex solve.

use crate::convex::{self, guard, ConvexProgram, SmoothFn, SolveStatus, SolverOptions};
use crate::model::{self, round_cost, ChannelMatrix, RoundCost, ScenarioConfig, Schedule};
use crate::topology::{self, enumerate_all, Topology};
use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("no speed assignment in bounds satisfies the precedence constraints for this topology")]
    InfeasibleTopology,
    #[error(transparent)]
    Enumeration(#[from] topology::TopologyError),
    #[error(transparent)]
    Convex(#[from] convex::ConvexError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error("speed solve ended with status {0:?}")]
    SolverFailure(SolveStatus),
    #[error("every topology is infeasible under these channels")]
    AllInfeasible,
}

/// Convex objective in reciprocal speeds: total computation energy plus the
/// (constant) communication energy and the weighted latency epigraph
/// variable.
struct ReciprocalSpeedObjective {
    /// kappa_i * D_i * N per device.
    kappa_work: Vec<f64>,
    comm_energy: f64,
    mu: f64,
    tau: usize,
    /// Convexity floor for the reciprocal speeds.
    u_floor: f64,
    support: Vec<usize>,
}

impl SmoothFn for ReciprocalSpeedObjective {
    fn support(&self) -> &[usize] {
        &self.support
    }

    fn value(&self, x: &[f64]) -> f64 {
        let energy: f64 = self
            .kappa_work
            .iter()
            .enumerate()
            .map(|(i, kw)| kw * guard::reciprocal_sq(x[i], self.u_floor).0)
            .sum();
        energy + self.comm_energy + self.mu * x[self.tau]
    }

    fn add_gradient(&self, x: &[f64], grad: &mut [f64], scale: f64) {
        for (i, kw) in self.kappa_work.iter().enumerate() {
            grad[i] += scale * kw * guard::reciprocal_sq(x[i], self.u_floor).1;
        }
        grad[self.tau] += scale * self.mu;
    }

    fn add_hessian(&self, x: &[f64], hess: &mut DMatrix<f64>, scale: f64) {
        for (i, kw) in self.kappa_work.iter().enumerate() {
            hess[(i, i)] += scale * kw * guard::reciprocal_sq(x[i], self.u_floor).2;
        }
    }
}

/// Cheapest feasible computation time per device, children first: a parent
/// must compute at least as long as its slowest child needs to compute and
/// upload. Returns `None` when some device would have to exceed its slowest
/// allowed computation time (the topology is infeasible for every speed), or
/// when a required link is dead.
fn min_comp_times(
    topo: &Topology,
    channels: &ChannelMatrix,
    config: &ScenarioConfig,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let k = config.device_count;
    let mut comp = vec![0.0; k];
    let mut total = vec![0.0; k];
    for &i in &topo.aggregation_order() {
        let work = config.sample_counts[i] as f64 * config.flops_per_sample;
        let rate = channels.rate(i, topo.parent(i));
        if rate <= 0.0 {
            return None;
        }
        let child_total = topo.children(i).iter().map(|&c| total[c]).fold(0.0f64, f64::max);
        let required = (work / config.f_max).max(child_total);
        if required > work / config.f_min * (1.0 + 1e-12) {
            return None;
        }
        comp[i] = required;
        total[i] = required + config.payload_bits / rate;
    }
    Some((comp, total))
}

/// Optimal speeds for a fixed topology: minimizes the round objective over
/// `f` subject to the precedence constraints and the speed bounds. The
/// reported cost is re-evaluated exactly from the cost formulas at the
/// returned schedule.
pub fn inner_speed_opt(
    topo: &Topology,
    channels: &ChannelMatrix,
    config: &ScenarioConfig,
) -> Result<(Schedule, RoundCost), OracleError> {
    let k = config.device_count;
    let (min_comp, min_total) = min_comp_times(topo, channels, config).ok_or(OracleError::InfeasibleTopology)?;

    let tau = k;
    let n = k + 1;
    let work: Vec<f64> = (0..k)
        .map(|i| config.sample_counts[i] as f64 * config.flops_per_sample)
        .collect();
    let comm_time: Vec<f64> = (0..k)
        .map(|i| config.payload_bits / channels.rate(i, topo.parent(i)))
        .collect();
    let kappa_work: Vec<f64> = (0..k).map(|i| config.cpu_coeff[i] * work[i]).collect();
    let comm_energy: f64 = comm_time.iter().map(|t| config.tx_power * t).sum();

    let u_lo = 1.0 / config.f_max;
    let u_hi = 1.0 / config.f_min;
    let mut program = ConvexProgram::new(
        n,
        Box::new(ReciprocalSpeedObjective {
            kappa_work,
            comm_energy,
            mu: config.mu,
            tau,
            u_floor: 0.5 * u_lo,
            support: (0..n).collect(),
        }),
    );
    let tau_cap = 1.25
        * (0..k)
            .map(|i| work[i] * u_hi + comm_time[i])
            .fold(0.0f64, f64::max);
    for i in 0..k {
        program.add_box(i, u_lo, u_hi);
        // Latency epigraph: work_i * u_i + comm_i <= tau.
        program.add_linear(vec![(i, work[i]), (tau, -1.0)], comm_time[i]);
        // Precedence: finish computing and uploading before the parent
        // finishes computing.
        let p = topo.parent(i);
        if p < k {
            program.add_linear(vec![(i, work[i]), (p, -work[p])], comm_time[i]);
        }
    }
    program.add_box(tau, 0.0, tau_cap);

    let mut scale = vec![u_hi; n];
    scale[tau] = tau_cap.max(1e-12);
    program.var_scale = scale;

    // Hint from the cheapest feasible computation times.
    let mut hint: Vec<f64> = (0..k)
        .map(|i| (min_comp[i] / work[i]).clamp(u_lo * (1.0 + 1e-9), u_hi * (1.0 - 1e-9)))
        .collect();
    hint.push(min_total.iter().fold(0.0f64, |a, &b| a.max(b)) * 1.01 + 1e-12);
    program.initial = Some(hint);

    let sol = convex::solve_with(&program, &SolverOptions::with_tol(1e-10))?;
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => return Err(OracleError::InfeasibleTopology),
        SolveStatus::MaxIterations => {
            // Accept a feasible near-optimal point; reject anything invalid.
            if sol.kkt.primal_inequality > 1e-8 {
                return Err(OracleError::SolverFailure(sol.status));
            }
        }
    }

    let speeds: Vec<f64> = (0..k)
        .map(|i| (1.0 / sol.x[i]).clamp(config.f_min, config.f_max))
        .collect();
    let schedule = Schedule::new(topo.parents().to_vec(), speeds);
    let cost = round_cost(&schedule, channels, config)?;
    Ok((schedule, cost))
}

#[derive(Debug, Clone)]
pub struct BruteForceResult {
    pub schedule: Schedule,
    pub cost: RoundCost,
    pub topologies_total: usize,
    pub topologies_feasible: usize,
}

/// Exact minimum of the joint scheduling problem by enumerating every
/// aggregation tree (guarded at 7 devices) and optimizing speeds within each.
/// Infeasible topologies are skipped. Ties are broken toward the
/// lexicographically smallest parent array.
pub fn brute_force_solve(
    config: &ScenarioConfig,
    channels: &ChannelMatrix,
) -> Result<BruteForceResult, OracleError> {
    let k = config.device_count;
    let topologies: Vec<Topology> = enumerate_all(k, false)?.collect();
    let results: Vec<(Vec<usize>, Schedule, RoundCost)> = topologies
        .par_iter()
        .filter_map(|topo| {
            inner_speed_opt(topo, channels, config)
                .ok()
                .map(|(s, c)| (topo.parents().to_vec(), s, c))
        })
        .collect();
    let total = topologies.len();
    let feasible = results.len();
    let best = results
        .into_iter()
        .min_by(|a, b| {
            a.2.objective
                .partial_cmp(&b.2.objective)
                .unwrap()
                .then_with(|| a.0.cmp(&b.0))
        })
        .ok_or(OracleError::AllInfeasible)?;
    Ok(BruteForceResult {
        schedule: best.1,
        cost: best.2,
        topologies_total: total,
        topologies_feasible: feasible,
    })
}

/// Flat star with every speed at the midpoint of the allowed range.
pub fn flat_fixed_baseline(
    config: &ScenarioConfig,
    channels: &ChannelMatrix,
) -> Result<(Schedule, RoundCost), OracleError> {
    let k = config.device_count;
    let schedule = Schedule::new(vec![k; k], vec![config.mid_speed(); k]);
    let cost = round_cost(&schedule, channels, config)?;
    Ok((schedule, cost))
}

/// Flat star with convex-optimized speeds.
pub fn flat_opt_baseline(
    config: &ScenarioConfig,
    channels: &ChannelMatrix,
) -> Result<(Schedule, RoundCost), OracleError> {
    inner_speed_opt(&Topology::flat_star(config.device_count), channels, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_channels, sample_channels_unit_fading};

    /// 1-D golden-section minimizer for the single-device objective.
    fn golden_section<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> f64 {
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        for _ in 0..200 {
            if f(c) < f(d) {
                b = d;
                d = c;
                c = b - phi * (b - a);
            } else {
                a = c;
                c = d;
                d = a + phi * (b - a);
            }
            if (b - a).abs() < 1e-9 * b.abs().max(1.0) {
                break;
            }
        }
        0.5 * (a + b)
    }

    fn single_device_objective(cfg: &ScenarioConfig, rate: f64) -> impl Fn(f64) -> f64 + '_ {
        move |f: f64| {
            let work = cfg.sample_counts[0] as f64 * cfg.flops_per_sample;
            let comm = cfg.payload_bits / rate;
            cfg.cpu_coeff[0] * work * f * f + cfg.tx_power * comm + cfg.mu * (work / f + comm)
        }
    }

    #[test]
    fn single_device_matches_golden_section() {
        let cfg = ScenarioConfig::generate(1, 4);
        let ch = sample_channels(&cfg, 8).unwrap();
        let (schedule, cost) = inner_speed_opt(&Topology::flat_star(1), &ch, &cfg).unwrap();
        let obj = single_device_objective(&cfg, ch.rate(0, 1));
        let f_star = golden_section(&obj, cfg.f_min, cfg.f_max);
        assert!(
            (schedule.speeds[0] - f_star).abs() <= 1e-6 * f_star,
            "solver {} vs golden section {}",
            schedule.speeds[0],
            f_star
        );
        assert!((cost.objective - obj(f_star)).abs() <= 1e-6 * obj(f_star).abs());
    }

    #[test]
    fn flat_star_equals_flat_opt_baseline() {
        let cfg = ScenarioConfig::generate(4, 2);
        let ch = sample_channels(&cfg, 3).unwrap();
        let (s1, c1) = inner_speed_opt(&Topology::flat_star(4), &ch, &cfg).unwrap();
        let (s2, c2) = flat_opt_baseline(&cfg, &ch).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(c1.objective, c2.objective);
    }

    #[test]
    fn infeasible_chain_detected() {
        // Child must upload over a hopeless link: no parent speed can wait
        // long enough.
        let mut cfg = ScenarioConfig::generate(2, 0);
        cfg.positions = vec![[5.0, 0.0], [199.0, 0.0], [0.0, 0.0]];
        let ch = sample_channels_unit_fading(&cfg).unwrap();
        // 1 -> 0 -> server: device 1 is ~194 m from device 0.
        let topo = Topology::new(vec![2, 0]).unwrap();
        match inner_speed_opt(&topo, &ch, &cfg) {
            Err(OracleError::InfeasibleTopology) => {}
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn symmetric_geometry_prefers_flat_star() {
        // Equal distances and unit fading: relaying gains nothing.
        let mut cfg = ScenarioConfig::generate(2, 0);
        cfg.positions = vec![[100.0, 0.0], [-100.0, 0.0], [0.0, 0.0]];
        let ch = sample_channels_unit_fading(&cfg).unwrap();
        let result = brute_force_solve(&cfg, &ch).unwrap();
        assert_eq!(result.schedule.parents, vec![2, 2]);
        assert_eq!(result.topologies_total, 3);
    }

    #[test]
    fn weak_direct_link_routes_through_neighbor() {
        // Device 1 sits far from the server but near device 0: the optimum
        // relays 1 -> 0 -> server.
        let mut cfg = ScenarioConfig::generate(2, 0);
        cfg.positions = vec![[30.0, 0.0], [60.0, 0.0], [0.0, 0.0]];
        let ch = sample_channels_unit_fading(&cfg).unwrap();
        let result = brute_force_solve(&cfg, &ch).unwrap();
        assert_eq!(result.schedule.parents, vec![2, 0], "cost {:?}", result.cost.objective);
        // And the relayed optimum beats the flat baselines.
        let (_, flat) = flat_opt_baseline(&cfg, &ch).unwrap();
        assert!(result.cost.objective < flat.objective);
    }

    #[test]
    fn flat_opt_dominates_flat_fixed() {
        for seed in 0..100 {
            let cfg = ScenarioConfig::generate(3, seed);
            let ch = sample_channels(&cfg, seed ^ 0x5eed).unwrap();
            let (_, fixed) = flat_fixed_baseline(&cfg, &ch).unwrap();
            let (_, opt) = flat_opt_baseline(&cfg, &ch).unwrap();
            assert!(
                opt.objective <= fixed.objective + 1e-9,
                "seed {seed}: opt {} vs fixed {}",
                opt.objective,
                fixed.objective
            );
        }
    }

    #[test]
    fn zero_latency_weight_drives_speeds_to_minimum() {
        let mut cfg = ScenarioConfig::generate(3, 6);
        cfg.mu = 0.0;
        let ch = sample_channels(&cfg, 7).unwrap();
        let (schedule, _) = flat_opt_baseline(&cfg, &ch).unwrap();
        for &f in &schedule.speeds {
            assert!(
                (f - cfg.f_min) / (cfg.f_max - cfg.f_min) < 1e-4,
                "speed {f} did not fall to f_min"
            );
        }
    }

    #[test]
    fn brute_force_respects_enumeration_guard() {
        let cfg = ScenarioConfig::generate(8, 0);
        let ch = sample_channels(&cfg, 0).unwrap();
        assert!(matches!(
            brute_force_solve(&cfg, &ch),
            Err(OracleError::Enumeration(_))
        ));
    }

    #[test]
    fn brute_force_deterministic_across_runs() {
        let cfg = ScenarioConfig::generate(3, 12);
        let ch = sample_channels(&cfg, 13).unwrap();
        let a = brute_force_solve(&cfg, &ch).unwrap();
        let b = brute_force_solve(&cfg, &ch).unwrap();
        assert_eq!(a.schedule, b.schedule);
        assert_eq!(a.cost.objective, b.cost.objective);
    }
}
