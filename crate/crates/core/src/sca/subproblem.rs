//! Convex subproblem construction for the penalty-based successive convex
//! approximation loop.
//!
//! Variables per subproblem (device count K): the relaxed assignment (one row
//! per device over all other nodes, diagonal excluded by construction), the
//! speeds, two families of square-root slack variables coupling assignment
//! mass to computation and communication time on every device-device pair,
//! and one epigraph scalar bounding the round latency.
//!
//! The concave pieces are replaced by first-order surrogates at the current
//! state: `-I^2` in the penalty, `-work/f_j` in the precedence budget, and
//! the quadratic-over-linear terms `-t^2/I`, `-s^2/I` in the slack couplings.
//! Each surrogate upper-bounds its original term everywhere and touches it at
//! the expansion point, which is what makes the outer loop descend.

use super::SolverState;
use crate::convex::{guard, ConvexProgram, SmoothFn};
use crate::model::{ChannelMatrix, ScenarioConfig};
use nalgebra::{DMatrix, DVector};

/// Floor applied to expansion-point assignment entries inside surrogate
/// denominators.
pub(crate) const EXPANSION_CLAMP: f64 = 1e-6;
/// Floor for effective-rate denominators in state bookkeeping.
pub(crate) const RATE_FLOOR: f64 = 1e-12;

/// Index bookkeeping for the flat variable vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct VarLayout {
    pub k: usize,
}

impl VarLayout {
    pub fn new(k: usize) -> Self {
        Self { k }
    }

    pub fn n(&self) -> usize {
        // assignment + speeds + two slack families + epigraph
        self.k * self.k + self.k + 2 * self.k * (self.k - 1) + 1
    }

    /// Assignment variable of device `i` toward node `j` (`j != i`,
    /// server = `k`).
    pub fn assign(&self, i: usize, j: usize) -> usize {
        debug_assert!(j != i && j <= self.k);
        i * self.k + if j < i { j } else { j - 1 }
    }

    /// Node targeted by column `pos` of device `i`'s assignment row.
    pub fn assign_node(&self, i: usize, pos: usize) -> usize {
        if pos < i {
            pos
        } else {
            pos + 1
        }
    }

    pub fn speed(&self, i: usize) -> usize {
        self.k * self.k + i
    }

    fn pair_pos(&self, i: usize, j: usize) -> usize {
        debug_assert!(i != j && i < self.k && j < self.k);
        i * (self.k - 1) + if j < i { j } else { j - 1 }
    }

    /// Computation-time slack for the device pair `(i, j)`.
    pub fn slack_comp(&self, i: usize, j: usize) -> usize {
        self.k * self.k + self.k + self.pair_pos(i, j)
    }

    /// Communication-time slack for the device pair `(i, j)`.
    pub fn slack_comm(&self, i: usize, j: usize) -> usize {
        self.k * self.k + self.k + self.k * (self.k - 1) + self.pair_pos(i, j)
    }

    pub fn tau(&self) -> usize {
        self.n() - 1
    }

    /// Variable indices of device `i`'s assignment row.
    pub fn row(&self, i: usize) -> std::ops::Range<usize> {
        i * self.k..(i + 1) * self.k
    }
}

/// Per-device rate vector aligned with the assignment row layout.
fn rates_flat(layout: &VarLayout, channels: &ChannelMatrix) -> Vec<f64> {
    let k = layout.k;
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for pos in 0..k {
            out[i * k + pos] = channels.rate(i, layout.assign_node(i, pos));
        }
    }
    out
}

fn raw_rate(layout: &VarLayout, rates: &[f64], x: &[f64], i: usize) -> f64 {
    let mut r = 0.0;
    for v in layout.row(i) {
        r += rates[v] * x[v];
    }
    r
}

/// Relaxed objective: computation energy, communication energy over the
/// mixed rates, the latency epigraph, and (when penalized) the linearized
/// binary-promoting penalty.
struct RelaxedObjective {
    layout: VarLayout,
    kappa_work: Vec<f64>,
    payload_power: f64,
    mu: f64,
    rates: Vec<f64>,
    /// Per-device convexity floor for the effective rate.
    rate_floor: Vec<f64>,
    /// `(coefficient per assignment var, constant)` of the linearized
    /// penalty; absent during the initialization stage.
    penalty: Option<(Vec<f64>, f64)>,
    support: Vec<usize>,
}

impl SmoothFn for RelaxedObjective {
    fn support(&self) -> &[usize] {
        &self.support
    }

    fn value(&self, x: &[f64]) -> f64 {
        let l = &self.layout;
        let mut v = self.mu * x[l.tau()];
        for i in 0..l.k {
            let f = x[l.speed(i)];
            v += self.kappa_work[i] * f * f;
            let (inv, _, _) = guard::reciprocal(raw_rate(l, &self.rates, x, i), self.rate_floor[i]);
            v += self.payload_power * inv;
        }
        if let Some((coef, constant)) = &self.penalty {
            v += constant;
            for (pos, c) in coef.iter().enumerate() {
                v += c * x[pos];
            }
        }
        v
    }

    fn add_gradient(&self, x: &[f64], grad: &mut [f64], scale: f64) {
        let l = &self.layout;
        grad[l.tau()] += scale * self.mu;
        for i in 0..l.k {
            let f = x[l.speed(i)];
            grad[l.speed(i)] += scale * 2.0 * self.kappa_work[i] * f;
            let (_, d1, _) = guard::reciprocal(raw_rate(l, &self.rates, x, i), self.rate_floor[i]);
            let factor = scale * self.payload_power * d1;
            for v in l.row(i) {
                grad[v] += factor * self.rates[v];
            }
        }
        if let Some((coef, _)) = &self.penalty {
            for (pos, c) in coef.iter().enumerate() {
                grad[pos] += scale * c;
            }
        }
    }

    fn add_hessian(&self, x: &[f64], hess: &mut DMatrix<f64>, scale: f64) {
        let l = &self.layout;
        for i in 0..l.k {
            let si = l.speed(i);
            hess[(si, si)] += scale * 2.0 * self.kappa_work[i];
            let (_, _, d2) = guard::reciprocal(raw_rate(l, &self.rates, x, i), self.rate_floor[i]);
            let factor = scale * self.payload_power * d2;
            for a in l.row(i) {
                let ra = self.rates[a];
                if ra == 0.0 {
                    continue;
                }
                for b in l.row(i) {
                    hess[(a, b)] += factor * ra * self.rates[b];
                }
            }
        }
    }
}

/// Per-device latency bound: `work/f + payload/R_i(I) - tau <= 0`.
struct LatencyEpigraph {
    layout: VarLayout,
    device: usize,
    work: f64,
    payload: f64,
    rates: Vec<f64>,
    rate_floor: f64,
    f_floor: f64,
    support: Vec<usize>,
}

impl SmoothFn for LatencyEpigraph {
    fn support(&self) -> &[usize] {
        &self.support
    }

    fn value(&self, x: &[f64]) -> f64 {
        let l = &self.layout;
        let (inv_f, _, _) = guard::reciprocal(x[l.speed(self.device)], self.f_floor);
        let (inv_r, _, _) = guard::reciprocal(raw_rate(l, &self.rates, x, self.device), self.rate_floor);
        self.work * inv_f + self.payload * inv_r - x[l.tau()]
    }

    fn add_gradient(&self, x: &[f64], grad: &mut [f64], scale: f64) {
        let l = &self.layout;
        let (_, df, _) = guard::reciprocal(x[l.speed(self.device)], self.f_floor);
        grad[l.speed(self.device)] += scale * self.work * df;
        grad[l.tau()] += -scale;
        let (_, dr, _) = guard::reciprocal(raw_rate(l, &self.rates, x, self.device), self.rate_floor);
        let factor = scale * self.payload * dr;
        for v in l.row(self.device) {
            grad[v] += factor * self.rates[v];
        }
    }

    fn add_hessian(&self, x: &[f64], hess: &mut DMatrix<f64>, scale: f64) {
        let l = &self.layout;
        let s = l.speed(self.device);
        let (_, _, ddf) = guard::reciprocal(x[s], self.f_floor);
        hess[(s, s)] += scale * self.work * ddf;
        let (_, _, ddr) = guard::reciprocal(raw_rate(l, &self.rates, x, self.device), self.rate_floor);
        let factor = scale * self.payload * ddr;
        for a in l.row(self.device) {
            let ra = self.rates[a];
            if ra == 0.0 {
                continue;
            }
            for b in l.row(self.device) {
                hess[(a, b)] += factor * ra * self.rates[b];
            }
        }
    }
}

/// Precedence budget for the pair `(i, j)`:
/// `work_i t^2 + payload s^2 + (work_j / fbar^2) f_j - 2 work_j / fbar <= 0`,
/// with the last two terms the surrogate of `-work_j / f_j`.
struct PrecedenceBudget {
    t_var: usize,
    s_var: usize,
    f_var: usize,
    work_i: f64,
    payload: f64,
    work_j: f64,
    f_bar: f64,
    support: [usize; 3],
}

impl SmoothFn for PrecedenceBudget {
    fn support(&self) -> &[usize] {
        &self.support
    }

    fn value(&self, x: &[f64]) -> f64 {
        let t = x[self.t_var];
        let s = x[self.s_var];
        self.work_i * t * t + self.payload * s * s + self.work_j * x[self.f_var] / (self.f_bar * self.f_bar)
            - 2.0 * self.work_j / self.f_bar
    }

    fn add_gradient(&self, x: &[f64], grad: &mut [f64], scale: f64) {
        grad[self.t_var] += scale * 2.0 * self.work_i * x[self.t_var];
        grad[self.s_var] += scale * 2.0 * self.payload * x[self.s_var];
        grad[self.f_var] += scale * self.work_j / (self.f_bar * self.f_bar);
    }

    fn add_hessian(&self, _x: &[f64], hess: &mut DMatrix<f64>, scale: f64) {
        hess[(self.t_var, self.t_var)] += scale * 2.0 * self.work_i;
        hess[(self.s_var, self.s_var)] += scale * 2.0 * self.payload;
    }
}

/// Computation-slack coupling for the pair `(i, j)`:
/// `1/f_i - 2 rho t + rho^2 I <= 0`, the surrogate of `1/f_i <= t^2 / I`.
struct CompSlackCoupling {
    f_var: usize,
    t_var: usize,
    i_var: usize,
    rho: f64,
    f_floor: f64,
    support: [usize; 3],
}

impl SmoothFn for CompSlackCoupling {
    fn support(&self) -> &[usize] {
        &self.support
    }

    fn value(&self, x: &[f64]) -> f64 {
        let (inv_f, _, _) = guard::reciprocal(x[self.f_var], self.f_floor);
        inv_f - 2.0 * self.rho * x[self.t_var] + self.rho * self.rho * x[self.i_var]
    }

    fn add_gradient(&self, x: &[f64], grad: &mut [f64], scale: f64) {
        let (_, df, _) = guard::reciprocal(x[self.f_var], self.f_floor);
        grad[self.f_var] += scale * df;
        grad[self.t_var] += -scale * 2.0 * self.rho;
        grad[self.i_var] += scale * self.rho * self.rho;
    }

    fn add_hessian(&self, x: &[f64], hess: &mut DMatrix<f64>, scale: f64) {
        let (_, _, ddf) = guard::reciprocal(x[self.f_var], self.f_floor);
        hess[(self.f_var, self.f_var)] += scale * ddf;
    }
}

/// Communication-slack coupling for the pair `(i, j)`:
/// `1/R_i(I) - 2 rho s + rho^2 I <= 0`, the surrogate of
/// `1/R_i <= s^2 / I`.
struct CommSlackCoupling {
    layout: VarLayout,
    device: usize,
    s_var: usize,
    i_var: usize,
    rho: f64,
    rates: Vec<f64>,
    rate_floor: f64,
    support: Vec<usize>,
}

impl SmoothFn for CommSlackCoupling {
    fn support(&self) -> &[usize] {
        &self.support
    }

    fn value(&self, x: &[f64]) -> f64 {
        let (inv_r, _, _) = guard::reciprocal(
            raw_rate(&self.layout, &self.rates, x, self.device),
            self.rate_floor,
        );
        inv_r - 2.0 * self.rho * x[self.s_var] + self.rho * self.rho * x[self.i_var]
    }

    fn add_gradient(&self, x: &[f64], grad: &mut [f64], scale: f64) {
        let l = &self.layout;
        let (_, dr, _) = guard::reciprocal(raw_rate(l, &self.rates, x, self.device), self.rate_floor);
        let factor = scale * dr;
        for v in l.row(self.device) {
            grad[v] += factor * self.rates[v];
        }
        grad[self.s_var] += -scale * 2.0 * self.rho;
        grad[self.i_var] += scale * self.rho * self.rho;
    }

    fn add_hessian(&self, x: &[f64], hess: &mut DMatrix<f64>, scale: f64) {
        let l = &self.layout;
        let (_, _, ddr) = guard::reciprocal(raw_rate(l, &self.rates, x, self.device), self.rate_floor);
        let factor = scale * ddr;
        for a in l.row(self.device) {
            let ra = self.rates[a];
            if ra == 0.0 {
                continue;
            }
            for b in l.row(self.device) {
                hess[(a, b)] += factor * ra * self.rates[b];
            }
        }
    }
}

/// Surrogate expansion coefficients derived from a state.
///
/// Assignment entries are floored at [`EXPANSION_CLAMP`] inside denominators;
/// slack values are floored at the value consistent with the floored
/// assignment so the slopes stay bounded and the surrogates remain valid
/// upper bounds.
pub(crate) struct Expansion {
    pub f_bar: Vec<f64>,
    /// rho for the computation slack of each device pair, indexed by
    /// `pair_pos`.
    pub rho_comp: Vec<f64>,
    pub rho_comm: Vec<f64>,
}

pub(crate) fn expansion(state: &SolverState, channels: &ChannelMatrix, config: &ScenarioConfig) -> Expansion {
    let k = config.device_count;
    let layout = VarLayout::new(k);
    let mut rho_comp = vec![0.0; k * (k - 1)];
    let mut rho_comm = vec![0.0; k * (k - 1)];
    for i in 0..k {
        let r_eff: f64 = (0..=k)
            .filter(|&j| j != i)
            .map(|j| channels.rate(i, j) * state.assign(i, j))
            .sum::<f64>()
            .max(RATE_FLOOR);
        for j in 0..k {
            if j == i {
                continue;
            }
            let pos = layout.pair_pos(i, j);
            let i_bar = state.assign(i, j).max(EXPANSION_CLAMP);
            let t_bar = state.slack_comp_at(i, j).max((i_bar / state.speeds[i]).sqrt());
            let s_bar = state.slack_comm_at(i, j).max((i_bar / r_eff).sqrt());
            rho_comp[pos] = t_bar / i_bar;
            rho_comm[pos] = s_bar / i_bar;
        }
    }
    Expansion {
        f_bar: state.speeds.clone(),
        rho_comp,
        rho_comm,
    }
}

/// Packs a state into the subproblem variable vector. `tau` defaults to the
/// exact worst-case device latency at the state.
pub(crate) fn pack_state(
    state: &SolverState,
    config: &ScenarioConfig,
    channels: &ChannelMatrix,
    tau: Option<f64>,
) -> Vec<f64> {
    let k = config.device_count;
    let layout = VarLayout::new(k);
    let mut x = vec![0.0; layout.n()];
    for i in 0..k {
        for j in 0..=k {
            if j != i {
                x[layout.assign(i, j)] = state.assign(i, j);
            }
        }
        x[layout.speed(i)] = state.speeds[i];
        for j in 0..k {
            if j != i {
                x[layout.slack_comp(i, j)] = state.slack_comp_at(i, j);
                x[layout.slack_comm(i, j)] = state.slack_comm_at(i, j);
            }
        }
    }
    x[layout.tau()] = tau.unwrap_or_else(|| worst_latency(state, config, channels));
    x
}

/// Worst relaxed device latency at a state: `max_i work_i/f_i + B/R_i`.
pub(crate) fn worst_latency(state: &SolverState, config: &ScenarioConfig, channels: &ChannelMatrix) -> f64 {
    let k = config.device_count;
    (0..k)
        .map(|i| {
            let work = config.sample_counts[i] as f64 * config.flops_per_sample;
            let r: f64 = (0..=k)
                .filter(|&j| j != i)
                .map(|j| channels.rate(i, j) * state.assign(i, j))
                .sum::<f64>()
                .max(RATE_FLOOR);
            work / state.speeds[i] + config.payload_bits / r
        })
        .fold(0.0f64, f64::max)
}

/// Builds the convex subproblem expanded at `state`. With `beta = None` the
/// penalty block is omitted (initialization stage); otherwise the linearized
/// penalty with parameter `beta` joins the objective.
pub(crate) fn build_subproblem(
    state: &SolverState,
    config: &ScenarioConfig,
    channels: &ChannelMatrix,
    beta: Option<f64>,
) -> ConvexProgram {
    let k = config.device_count;
    let layout = VarLayout::new(k);
    let n = layout.n();
    let rates = rates_flat(&layout, channels);
    let work: Vec<f64> = (0..k)
        .map(|i| config.sample_counts[i] as f64 * config.flops_per_sample)
        .collect();
    let kappa_work: Vec<f64> = (0..k).map(|i| config.cpu_coeff[i] * work[i]).collect();
    let exp = expansion(state, channels, config);
    // Convexity floors: far below anything a feasible point can reach.
    let f_floor = 0.5 * config.f_min;
    let rate_floor: Vec<f64> = (0..k)
        .map(|i| {
            let max_rate = (0..k).map(|pos| rates[i * k + pos]).fold(0.0f64, f64::max);
            (1e-9 * max_rate).max(RATE_FLOOR)
        })
        .collect();

    let penalty = beta.map(|b| {
        let mut coef = vec![0.0; k * k];
        let mut constant = 0.0;
        for i in 0..k {
            for j in 0..=k {
                if j == i {
                    continue;
                }
                let i_t = state.assign(i, j);
                coef[layout.assign(i, j)] = (1.0 - 2.0 * i_t) / b;
                constant += i_t * i_t / b;
            }
        }
        (coef, constant)
    });

    let mut program = ConvexProgram::new(
        n,
        Box::new(RelaxedObjective {
            layout,
            kappa_work,
            payload_power: config.payload_bits * config.tx_power,
            mu: config.mu,
            rates: rates.clone(),
            rate_floor: rate_floor.clone(),
            penalty,
            support: (0..n).collect(),
        }),
    );

    // Latency epigraph per device.
    for i in 0..k {
        let mut support: Vec<usize> = layout.row(i).collect();
        support.push(layout.speed(i));
        support.push(layout.tau());
        program.add_smooth(Box::new(LatencyEpigraph {
            layout,
            device: i,
            work: work[i],
            payload: config.payload_bits,
            rates: rates.clone(),
            rate_floor: rate_floor[i],
            f_floor,
            support,
        }));
    }

    // Pairwise constraints.
    for i in 0..k {
        for j in 0..k {
            if j == i {
                continue;
            }
            let pos = layout.pair_pos(i, j);
            let t_var = layout.slack_comp(i, j);
            let s_var = layout.slack_comm(i, j);
            let i_var = layout.assign(i, j);
            let f_i = layout.speed(i);
            let f_j = layout.speed(j);
            program.add_smooth(Box::new(PrecedenceBudget {
                t_var,
                s_var,
                f_var: f_j,
                work_i: work[i],
                payload: config.payload_bits,
                work_j: work[j],
                f_bar: exp.f_bar[j],
                support: [t_var, s_var, f_j],
            }));
            program.add_smooth(Box::new(CompSlackCoupling {
                f_var: f_i,
                t_var,
                i_var,
                rho: exp.rho_comp[pos],
                f_floor,
                support: [f_i, t_var, i_var],
            }));
            let mut support: Vec<usize> = layout.row(i).collect();
            support.push(s_var);
            program.add_smooth(Box::new(CommSlackCoupling {
                layout,
                device: i,
                s_var,
                i_var,
                rho: exp.rho_comm[pos],
                rates: rates.clone(),
                rate_floor: rate_floor[i],
                support,
            }));
        }
    }

    // At least one direct upload to the server. With a single device the
    // row-sum equality already pins its assignment to the server and the
    // inequality would leave no strict interior.
    if k > 1 {
        program.add_linear(
            (0..k).map(|i| (layout.assign(i, k), -1.0)).collect(),
            1.0,
        );
    }

    // Assignment entries are nonnegative; the upper bound of one is implied
    // by the row-sum equality.
    for v in 0..k * k {
        program.add_box(v, 0.0, f64::INFINITY);
    }
    for i in 0..k {
        program.add_box(layout.speed(i), config.f_min, config.f_max);
    }
    let tau_cap = 2.0
        * (0..k)
            .map(|i| {
                let r_min = (0..=k)
                    .filter(|&j| j != i)
                    .map(|j| channels.rate(i, j))
                    .filter(|&r| r > 0.0)
                    .fold(f64::INFINITY, f64::min);
                let comm_worst = if r_min.is_finite() {
                    config.payload_bits / r_min
                } else {
                    config.payload_bits / RATE_FLOOR
                };
                work[i] / config.f_min + comm_worst
            })
            .fold(0.0f64, f64::max);
    program.add_linear(vec![(layout.tau(), 1.0)], -tau_cap);

    // Row sums: each device's assignment mass is exactly one.
    let mut a = DMatrix::zeros(k, n);
    for i in 0..k {
        for v in layout.row(i) {
            a[(i, v)] = 1.0;
        }
    }
    program.equalities = Some((a, DVector::from_element(k, 1.0)));

    // Variable scales for Newton preconditioning.
    let mut scale = vec![1.0; n];
    for i in 0..k {
        scale[layout.speed(i)] = config.f_max;
    }
    let rate_typical = {
        let mut positive: Vec<f64> = rates.iter().copied().filter(|&r| r > 0.0).collect();
        if positive.is_empty() {
            1.0
        } else {
            positive.sort_by(|a, b| a.partial_cmp(b).unwrap());
            positive[positive.len() / 2]
        }
    };
    let t_typ = (1.0 / config.mid_speed()).sqrt();
    let s_typ = (1.0 / rate_typical).sqrt();
    for i in 0..k {
        for j in 0..k {
            if j != i {
                scale[layout.slack_comp(i, j)] = t_typ;
                scale[layout.slack_comm(i, j)] = s_typ;
            }
        }
    }
    scale[layout.tau()] = tau_cap * 0.5;
    program.var_scale = scale;

    // Hint: the state itself, slacks nudged inward so the expansion point's
    // active couplings do not start exactly on the boundary.
    let mut hint = pack_state(state, config, channels, None);
    for i in 0..k {
        for j in 0..k {
            if j != i {
                hint[layout.slack_comp(i, j)] *= 1.0 + 1e-7;
                hint[layout.slack_comm(i, j)] *= 1.0 + 1e-7;
            }
        }
    }
    hint[layout.tau()] = hint[layout.tau()] * (1.0 + 1e-6) + 1e-12;
    program.initial = Some(hint);

    program
}

/// Reads a subproblem solution back into a state (assignment clamped to
/// [0, 1], speeds clamped to bounds, server-column slacks refreshed from the
/// defining formulas).
pub(crate) fn state_from_solution(
    x: &[f64],
    config: &ScenarioConfig,
    channels: &ChannelMatrix,
    iteration: usize,
) -> SolverState {
    let k = config.device_count;
    let layout = VarLayout::new(k);
    let mut assignment = vec![0.0; k * (k + 1)];
    let mut speeds = vec![0.0; k];
    for i in 0..k {
        for j in 0..=k {
            if j != i {
                assignment[i * (k + 1) + j] = x[layout.assign(i, j)].clamp(0.0, 1.0);
            }
        }
        speeds[i] = x[layout.speed(i)].clamp(config.f_min, config.f_max);
    }
    let mut state = SolverState {
        assignment,
        speeds,
        slack_comp: vec![0.0; k * (k + 1)],
        slack_comm: vec![0.0; k * (k + 1)],
        iteration,
    };
    for i in 0..k {
        let r_eff: f64 = (0..=k)
            .filter(|&j| j != i)
            .map(|j| channels.rate(i, j) * state.assign(i, j))
            .sum::<f64>()
            .max(RATE_FLOOR);
        for j in 0..=k {
            if j == i {
                continue;
            }
            let (t, s) = if j < k {
                (x[layout.slack_comp(i, j)].max(0.0), x[layout.slack_comm(i, j)].max(0.0))
            } else {
                // Server column: keep the defining substitution.
                let a = state.assign(i, j);
                ((a / state.speeds[i]).sqrt(), (a / r_eff).sqrt())
            };
            state.slack_comp[i * (k + 1) + j] = t;
            state.slack_comm[i * (k + 1) + j] = s;
        }
    }
    state
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::fd;
    use crate::model::sample_channels;
    use crate::sca::init_stage1;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_indices_are_disjoint_and_dense() {
        for k in [1usize, 2, 3, 5] {
            let l = VarLayout::new(k);
            let mut seen = vec![false; l.n()];
            for i in 0..k {
                for j in 0..=k {
                    if j != i {
                        assert!(!seen[l.assign(i, j)]);
                        seen[l.assign(i, j)] = true;
                    }
                }
                assert!(!seen[l.speed(i)]);
                seen[l.speed(i)] = true;
                for j in 0..k {
                    if j != i {
                        for v in [l.slack_comp(i, j), l.slack_comm(i, j)] {
                            assert!(!seen[v]);
                            seen[v] = true;
                        }
                    }
                }
            }
            assert!(!seen[l.tau()]);
            seen[l.tau()] = true;
            assert!(seen.iter().all(|&b| b));
        }
    }

    /// Random strictly feasible state for gradient checks.
    fn random_state(config: &ScenarioConfig, channels: &ChannelMatrix, rng: &mut ChaCha8Rng) -> SolverState {
        let k = config.device_count;
        let mut assignment = vec![0.0; k * (k + 1)];
        for i in 0..k {
            let mut weights: Vec<f64> = (0..=k)
                .map(|j| if j == i { 0.0 } else { rng.random::<f64>() + 0.05 })
                .collect();
            let total: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= total;
            }
            for j in 0..=k {
                assignment[i * (k + 1) + j] = weights[j];
            }
        }
        let speeds: Vec<f64> = (0..k)
            .map(|_| config.f_min + (config.f_max - config.f_min) * (0.2 + 0.6 * rng.random::<f64>()))
            .collect();
        let mut state = SolverState {
            assignment,
            speeds,
            slack_comp: vec![0.0; k * (k + 1)],
            slack_comm: vec![0.0; k * (k + 1)],
            iteration: 0,
        };
        for i in 0..k {
            let r_eff: f64 = (0..=k)
                .filter(|&j| j != i)
                .map(|j| channels.rate(i, j) * state.assign(i, j))
                .sum::<f64>()
                .max(RATE_FLOOR);
            for j in 0..=k {
                if j == i {
                    continue;
                }
                let a = state.assign(i, j);
                state.slack_comp[i * (k + 1) + j] = (a / state.speeds[i]).sqrt() * 1.3;
                state.slack_comm[i * (k + 1) + j] = (a / r_eff).sqrt() * 1.3;
            }
        }
        state
    }

    #[test]
    fn all_subproblem_callbacks_match_finite_differences() {
        let config = ScenarioConfig::generate(3, 21);
        let channels = sample_channels(&config, 22).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked_points = 0;
        for _ in 0..10 {
            let state = random_state(&config, &channels, &mut rng);
            let program = build_subproblem(&state, &config, &channels, Some(config.beta));
            let x = pack_state(&state, &config, &channels, None);
            // Gradient checks are relative to each variable's magnitude;
            // speeds sit at 1e8-1e9 so use a tiny relative step.
            let err = fd::gradient_rel_error(program.objective.as_ref(), &x, 1e-7);
            assert!(err < 1e-5, "objective gradient off by {err}");
            for (idx, c) in program.constraints.iter().enumerate() {
                if let crate::convex::Constraint::Smooth(s) = c {
                    let err = fd::gradient_rel_error(s.as_ref(), &x, 1e-7);
                    assert!(err < 1e-5, "constraint {idx} gradient off by {err}");
                    checked_points += 1;
                }
            }
        }
        assert!(checked_points > 100);
    }

    #[test]
    fn budget_surrogate_exact_at_expansion_point() {
        // At the expansion point the linearized `-work/f_j` term equals the
        // original, so the constraint value reduces to the unlinearized
        // slack-budget form.
        let config = ScenarioConfig::generate(3, 4);
        let channels = sample_channels(&config, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let state = random_state(&config, &channels, &mut rng);
        let layout = VarLayout::new(3);
        let exp = expansion(&state, &channels, &config);
        let x = pack_state(&state, &config, &channels, None);
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let work_i = config.sample_counts[i] as f64 * config.flops_per_sample;
                let work_j = config.sample_counts[j] as f64 * config.flops_per_sample;
                let budget = PrecedenceBudget {
                    t_var: layout.slack_comp(i, j),
                    s_var: layout.slack_comm(i, j),
                    f_var: layout.speed(j),
                    work_i,
                    payload: config.payload_bits,
                    work_j,
                    f_bar: exp.f_bar[j],
                    support: [0, 0, 0],
                };
                let t = state.slack_comp_at(i, j);
                let s = state.slack_comm_at(i, j);
                let original = work_i * t * t + config.payload_bits * s * s - work_j / state.speeds[j];
                assert!((budget.value(&x) - original).abs() <= 1e-10 * original.abs().max(1.0));
            }
        }
    }

    #[test]
    fn slack_surrogates_majorize_original_terms() {
        // For any positive expansion point, the linearization of the
        // quadratic-over-linear terms upper-bounds them everywhere.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let i_exp: f64 = rng.random::<f64>().max(1e-6);
            let t_exp: f64 = rng.random::<f64>() + 1e-6;
            let rho = t_exp / i_exp;
            let i_new: f64 = rng.random::<f64>().max(1e-9);
            let t_new: f64 = rng.random::<f64>() + 1e-9;
            let surrogate = -2.0 * rho * t_new + rho * rho * i_new;
            let original = -t_new * t_new / i_new;
            assert!(surrogate >= original - 1e-12 * original.abs().max(1.0));
        }
    }

    #[test]
    fn penalty_surrogate_majorizes_and_matches_at_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let beta = 1e-4;
        for _ in 0..1000 {
            let i_exp: f64 = rng.random();
            let i_new: f64 = rng.random();
            // surrogate of I(1-I)/beta at i_exp, evaluated at i_new
            let surrogate = (i_new - 2.0 * i_exp * i_new + i_exp * i_exp) / beta;
            let exact = i_new * (1.0 - i_new) / beta;
            assert!(surrogate >= exact - 1e-9);
            let at_exp = (i_exp - 2.0 * i_exp * i_exp + i_exp * i_exp) / beta;
            assert!((at_exp - i_exp * (1.0 - i_exp) / beta).abs() < 1e-9);
        }
    }

    #[test]
    fn init_objective_equals_flat_fixed_cost() {
        let config = ScenarioConfig::generate(5, 3);
        let channels = sample_channels(&config, 6).unwrap();
        let state = init_stage1(&config, &channels);
        let program = build_subproblem(&state, &config, &channels, None);
        let x = pack_state(&state, &config, &channels, None);
        let (_, fixed) = crate::oracle::flat_fixed_baseline(&config, &channels).unwrap();
        let value = program.objective.value(&x);
        assert!(
            (value - fixed.objective).abs() <= 1e-9 * fixed.objective,
            "subproblem objective {value} vs flat-fixed {}",
            fixed.objective
        );
    }

    #[test]
    fn penalty_block_vanishes_at_binary_expansion() {
        let config = ScenarioConfig::generate(4, 3);
        let channels = sample_channels(&config, 6).unwrap();
        let state = init_stage1(&config, &channels); // binary flat star
        let with = build_subproblem(&state, &config, &channels, Some(config.beta));
        let without = build_subproblem(&state, &config, &channels, None);
        let x = pack_state(&state, &config, &channels, None);
        let diff = with.objective.value(&x) - without.objective.value(&x);
        assert!(diff.abs() < 1e-9, "penalty block contributed {diff}");
    }
}
