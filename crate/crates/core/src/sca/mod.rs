//! Penalty-based successive convex approximation for the joint topology and
//! speed scheduling problem.
//!
//! The binary assignment is relaxed to `[0, 1]` and a penalty
//! `(1/beta) * sum I (1 - I)` pushes the relaxation back toward binary
//! values. Square-root slack variables turn the bilinear precedence
//! constraints into a difference-of-convex form whose concave pieces are
//! linearized at the previous iterate, giving one smooth convex subproblem
//! per iteration ([`subproblem`]).
//!
//! [`run`] executes the two-stage procedure: starting from the flat star with
//! midpoint speeds, it first iterates the penalty-free subproblem until the
//! objective settles (this lets assignment mass migrate to relays without
//! fighting the penalty), then iterates the penalized subproblem, rounds the
//! relaxed assignment, and repairs the result to a feasible schedule.
//!
//! Each subproblem has on the order of `3K^2` variables and constraints, so
//! one iteration costs a small polynomial in `K`; observed iteration counts
//! per stage are in the single digits.

mod subproblem;

pub(crate) use subproblem::build_subproblem;

/// Debug-only re-export used by the scratch example.
#[doc(hidden)]
pub fn state_from_solution_dbg(
    x: &[f64],
    config: &ScenarioConfig,
    channels: &ChannelMatrix,
    iteration: usize,
) -> SolverState {
    subproblem::state_from_solution(x, config, channels, iteration)
}

use crate::convex::{self, SolveStatus, SolverOptions};
use crate::model::{self, check_precedence, round_cost, ChannelMatrix, RoundCost, ScenarioConfig, Schedule};
use crate::oracle;
use crate::topology::{self, Topology};
use serde::Serialize;
use std::time::Instant;
use thiserror::Error;

/// Iterate of the relaxed problem: assignment, speeds, and the two slack
/// families (stored dense over all node columns; the server column of each
/// slack family is carried for completeness but only device-device entries
/// enter the subproblems).
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    /// K x (K+1) row-major, zero diagonal, rows summing to one.
    pub assignment: Vec<f64>,
    pub speeds: Vec<f64>,
    pub slack_comp: Vec<f64>,
    pub slack_comm: Vec<f64>,
    pub iteration: usize,
}

impl SolverState {
    pub fn device_count(&self) -> usize {
        self.speeds.len()
    }

    pub fn assign(&self, i: usize, j: usize) -> f64 {
        self.assignment[i * (self.speeds.len() + 1) + j]
    }

    pub(crate) fn slack_comp_at(&self, i: usize, j: usize) -> f64 {
        self.slack_comp[i * (self.speeds.len() + 1) + j]
    }

    pub(crate) fn slack_comm_at(&self, i: usize, j: usize) -> f64 {
        self.slack_comm[i * (self.speeds.len() + 1) + j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stage {
    Init,
    Penalized,
}

/// How far the rounding repair chain had to go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum RepairLevel {
    /// Rounded schedule was already valid and precedence-feasible.
    None,
    /// Speeds were re-optimized with the rounded topology fixed.
    SpeedResolve,
    /// Cycle members were reassigned to the server first.
    ReassignedToServer,
    /// Everything failed; flat star with optimized speeds.
    FlatFallback,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub stage: Stage,
    /// Optimal value of the iteration's subproblem.
    pub objective: f64,
    /// Exact penalty `(1/beta) sum I (1 - I)` at the new iterate.
    pub penalty_value: f64,
    /// Largest `min(I, 1 - I)` over the assignment.
    pub max_fractionality: f64,
    pub kkt_stationarity: f64,
    pub newton_iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverReport {
    pub beta: f64,
    pub iterations: Vec<IterationRecord>,
    pub init_converged: bool,
    pub penalized_converged: bool,
    pub penalized_iterations: usize,
    /// Fractionality of the relaxed assignment at the end of the penalized
    /// stage, before rounding.
    pub final_fractionality: f64,
    pub repair: RepairLevel,
    /// Exact round cost of the returned schedule.
    pub final_cost: RoundCost,
    pub wall_time_s: f64,
}

impl SolverReport {
    pub fn csv_header() -> &'static str {
        "iteration,stage,objective,penalty_value,max_fractionality,kkt_stationarity,newton_iterations"
    }

    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for r in &self.iterations {
            out.push_str(&format!(
                "{},{:?},{:e},{:e},{:e},{:e},{}\n",
                r.iteration, r.stage, r.objective, r.penalty_value, r.max_fractionality, r.kkt_stationarity,
                r.newton_iterations
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ScaOptions {
    /// Relative objective change that counts as stage convergence.
    pub rel_tol: f64,
    pub max_iterations_per_stage: usize,
    /// Duality-gap target for each subproblem solve.
    pub subproblem_tol: f64,
    /// Penalty parameter; defaults to the scenario's `beta`.
    pub beta: Option<f64>,
}

impl Default for ScaOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-5,
            max_iterations_per_stage: 30,
            subproblem_tol: 1e-8,
            beta: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScaError {
    #[error("subproblem infeasible at {stage:?} iteration {iteration}")]
    SubproblemInfeasible { stage: Stage, iteration: usize },
    #[error("subproblem failed at {stage:?} iteration {iteration}: {source}")]
    Subproblem {
        stage: Stage,
        iteration: usize,
        source: convex::ConvexError,
    },
    #[error("subproblem ended with status {status:?} and violated constraints at {stage:?} iteration {iteration}")]
    SubproblemStatus {
        stage: Stage,
        iteration: usize,
        status: SolveStatus,
    },
    #[error(transparent)]
    Model(#[from] model::ModelError),
}

/// Exact penalty value `(1/beta) sum_ij I (1 - I)`.
pub fn exact_penalty(assignment: &[f64], beta: f64) -> f64 {
    assignment.iter().map(|&v| v * (1.0 - v)).sum::<f64>() / beta
}

/// Largest distance of any assignment entry from the binary set.
pub fn max_fractionality(assignment: &[f64]) -> f64 {
    assignment
        .iter()
        .map(|&v| v.min(1.0 - v))
        .fold(0.0f64, f64::max)
}

/// Stage-1 initialization: flat star, midpoint speeds, slacks from the
/// defining substitutions `t^2 = I/f` and `s^2 = I / (sum I r)`.
pub fn init_stage1(config: &ScenarioConfig, channels: &ChannelMatrix) -> SolverState {
    let k = config.device_count;
    let mid = config.mid_speed();
    let mut assignment = vec![0.0; k * (k + 1)];
    let mut slack_comp = vec![0.0; k * (k + 1)];
    let mut slack_comm = vec![0.0; k * (k + 1)];
    for i in 0..k {
        assignment[i * (k + 1) + k] = 1.0;
        let r_eff = channels.rate(i, k).max(subproblem::RATE_FLOOR);
        for j in 0..=k {
            if j == i {
                continue;
            }
            let a = assignment[i * (k + 1) + j];
            slack_comp[i * (k + 1) + j] = (a / mid).sqrt();
            slack_comm[i * (k + 1) + j] = (a / r_eff).sqrt();
        }
    }
    SolverState {
        assignment,
        speeds: vec![mid; k],
        slack_comp,
        slack_comm,
        iteration: 0,
    }
}

/// Penalty-free subproblem expanded at `state` (initialization stage).
pub fn build_init_subproblem(
    state: &SolverState,
    config: &ScenarioConfig,
    channels: &ChannelMatrix,
) -> convex::ConvexProgram {
    build_subproblem(state, config, channels, None)
}

/// Penalized subproblem expanded at `state`.
pub fn build_penalized_subproblem(
    state: &SolverState,
    config: &ScenarioConfig,
    channels: &ChannelMatrix,
    beta: f64,
) -> convex::ConvexProgram {
    build_subproblem(state, config, channels, Some(beta))
}

fn run_stage(
    stage: Stage,
    state: &mut SolverState,
    records: &mut Vec<IterationRecord>,
    config: &ScenarioConfig,
    channels: &ChannelMatrix,
    beta: Option<f64>,
    options: &ScaOptions,
) -> Result<bool, ScaError> {
    let mut previous: Option<f64> = None;
    let solver_opts = SolverOptions::with_tol(options.subproblem_tol);
    for _ in 0..options.max_iterations_per_stage {
        let program = build_subproblem(state, config, channels, beta);
        let sol = convex::solve_with(&program, &solver_opts).map_err(|source| ScaError::Subproblem {
            stage,
            iteration: state.iteration,
            source,
        })?;
        match sol.status {
            SolveStatus::Optimal => {}
            SolveStatus::Infeasible => {
                return Err(ScaError::SubproblemInfeasible {
                    stage,
                    iteration: state.iteration,
                })
            }
            SolveStatus::MaxIterations => {
                if sol.kkt.primal_inequality > 1e-8 || sol.kkt.primal_equality > 1e-8 {
                    return Err(ScaError::SubproblemStatus {
                        stage,
                        iteration: state.iteration,
                        status: sol.status,
                    });
                }
            }
        }
        *state = subproblem::state_from_solution(&sol.x, config, channels, state.iteration + 1);
        let beta_for_penalty = beta.unwrap_or(config.beta);
        records.push(IterationRecord {
            iteration: state.iteration,
            stage,
            objective: sol.objective,
            penalty_value: exact_penalty(&state.assignment, beta_for_penalty),
            max_fractionality: max_fractionality(&state.assignment),
            kkt_stationarity: sol.kkt.stationarity,
            newton_iterations: sol.newton_iterations,
        });
        if let Some(prev) = previous {
            if (prev - sol.objective).abs() <= options.rel_tol * prev.abs().max(1.0) {
                return Ok(true);
            }
        }
        previous = Some(sol.objective);
    }
    Ok(false)
}

/// Runs the full two-stage procedure and returns the repaired schedule with
/// the per-iteration report. The reported final cost is re-evaluated exactly
/// from the cost formulas.
pub fn run(
    config: &ScenarioConfig,
    channels: &ChannelMatrix,
    options: &ScaOptions,
) -> Result<(Schedule, SolverReport), ScaError> {
    let started = Instant::now();
    let beta = options.beta.unwrap_or(config.beta);
    let mut state = init_stage1(config, channels);
    let mut records = Vec::new();

    // Record the starting point: the penalty-free objective at the flat
    // star with midpoint speeds (the fixed flat baseline cost).
    {
        let program = build_init_subproblem(&state, config, channels);
        let x = subproblem::pack_state(&state, config, channels, None);
        records.push(IterationRecord {
            iteration: 0,
            stage: Stage::Init,
            objective: program.objective.value(&x),
            penalty_value: exact_penalty(&state.assignment, beta),
            max_fractionality: max_fractionality(&state.assignment),
            kkt_stationarity: f64::NAN,
            newton_iterations: 0,
        });
    }

    let init_converged = run_stage(Stage::Init, &mut state, &mut records, config, channels, None, options)?;
    let penalized_start = records.len();
    let penalized_converged = run_stage(
        Stage::Penalized,
        &mut state,
        &mut records,
        config,
        channels,
        Some(beta),
        options,
    )?;
    let penalized_iterations = records.len() - penalized_start;
    let final_fractionality = max_fractionality(&state.assignment);

    let (schedule, repair) = round_and_repair(&state, config, channels);
    let final_cost = round_cost(&schedule, channels, config)?;

    let report = SolverReport {
        beta,
        iterations: records,
        init_converged,
        penalized_converged,
        penalized_iterations,
        final_fractionality,
        repair,
        final_cost,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((schedule, report))
}

/// Rounds each assignment row to its largest entry (ties prefer the server,
/// then the lowest node index) and repairs the result into a valid,
/// precedence-feasible schedule.
pub fn round_and_repair(
    state: &SolverState,
    config: &ScenarioConfig,
    channels: &ChannelMatrix,
) -> (Schedule, RepairLevel) {
    let k = config.device_count;
    let mut parents = Vec::with_capacity(k);
    for i in 0..k {
        let row: Vec<f64> = (0..=k).map(|j| state.assign(i, j)).collect();
        let best = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = (0..=k)
            .filter(|&j| j != i && row[j] >= best - 1e-12)
            .collect();
        let parent = if tied.contains(&k) { k } else { tied[0] };
        parents.push(parent);
    }
    let speeds: Vec<f64> = state
        .speeds
        .iter()
        .map(|&f| f.clamp(config.f_min, config.f_max))
        .collect();
    repair_schedule(parents, speeds, config, channels)
}

/// Fallback chain shared by rounding and by imitation inference: make the
/// topology a tree (reassigning devices that cannot reach the server), keep
/// the given speeds when they are precedence-feasible, otherwise re-optimize
/// the speeds with the topology fixed, and as a last resort fall back to the
/// flat star with optimized speeds.
pub(crate) fn repair_schedule(
    mut parents: Vec<usize>,
    speeds: Vec<f64>,
    config: &ScenarioConfig,
    channels: &ChannelMatrix,
) -> (Schedule, RepairLevel) {
    let k = config.device_count;
    let mut level = RepairLevel::None;

    if topology::validate(&parents).is_err() {
        // Walk each device toward the server; anything that cycles or runs
        // out of range goes straight to the server.
        let mut reaches = vec![false; k];
        for start in 0..k {
            let mut seen = vec![false; k];
            let mut node = start;
            let reached = loop {
                if node == k {
                    break true;
                }
                if node > k || seen[node] {
                    break false;
                }
                seen[node] = true;
                node = parents[node];
            };
            reaches[start] = reached;
        }
        for i in 0..k {
            if !reaches[i] || parents[i] == i {
                parents[i] = k;
            }
        }
        level = RepairLevel::ReassignedToServer;
        debug_assert!(topology::validate(&parents).is_ok());
    }

    let candidate = Schedule::new(parents.clone(), speeds);
    if let Ok(violations) = check_precedence(&candidate, channels, config) {
        if violations.is_empty() {
            return (candidate, level);
        }
    }

    // Keep the tree, re-solve speeds.
    if level == RepairLevel::None {
        level = RepairLevel::SpeedResolve;
    }
    let topo = Topology::new(parents).expect("repaired parents form a tree");
    if let Ok((schedule, _)) = oracle::inner_speed_opt(&topo, channels, config) {
        if let Ok(violations) = check_precedence(&schedule, channels, config) {
            if violations.is_empty() {
                return (schedule, level);
            }
        }
    }

    // Flat star always satisfies precedence (no device-device edges).
    let fallback = oracle::flat_opt_baseline(config, channels)
        .map(|(s, _)| s)
        .unwrap_or_else(|_| Schedule::new(vec![k; k], vec![config.mid_speed(); k]));
    (fallback, RepairLevel::FlatFallback)
}
