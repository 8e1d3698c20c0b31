//! Executes the federated round structure on desk-scale synthetic tasks:
//! local full-batch gradients, weighted tree aggregation, global updates,
//! the model-averaging variant, and the linear convergence-rate check for
//! strongly convex objectives.
//!
//! The synthetic tasks (ridge-regularized logistic regression and least
//! squares) are strongly convex and twice differentiable, so full-batch
//! gradient descent at step size `1/L` must contract the suboptimality by
//! `(1 - mu/L)` per round; [`check_linear_rate`] asserts exactly that against
//! a directly minimized reference.

use crate::model::{round_cost, ChannelMatrix, RoundCost, ScenarioConfig, Schedule};
use crate::oracle;
use crate::sca::{self, ScaOptions};
use crate::topology::Topology;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("rate check requires eta = 1/L (got eta = {eta:.6e}, 1/L = {inv_l:.6e})")]
    RateCheckPrecondition { eta: f64, inv_l: f64 },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Sca(#[from] sca::ScaError),
    #[error(transparent)]
    Oracle(#[from] oracle::OracleError),
    #[error(transparent)]
    Topology(#[from] crate::topology::TopologyViolation),
    #[error(transparent)]
    Imitation(#[from] crate::imitation::ImitationError),
}

/// Global model parameters at some round.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub w: Vec<f64>,
    pub round: usize,
}

impl GlobalModel {
    pub fn zeros(dim: usize) -> Self {
        Self { w: vec![0.0; dim], round: 0 }
    }
}

/// One device's training data: row-major features with one label per row.
#[derive(Debug, Clone)]
pub struct LocalDataset {
    pub features: DMatrix<f64>,
    pub labels: DVector<f64>,
}

impl LocalDataset {
    pub fn sample_count(&self) -> u64 {
        self.features.nrows() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskKind {
    /// Binary logistic loss with labels in {-1, +1} plus an L2 ridge.
    Logistic { ridge: f64 },
    /// Half squared error plus an L2 ridge.
    LeastSquares { ridge: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationMode {
    /// Devices share gradients; the server applies one descent step.
    Gradient,
    /// Devices share locally updated parameters; the server averages them.
    Model,
}

#[derive(Debug, Clone)]
pub struct TrainingConfig {
    pub task: TaskKind,
    pub learning_rate: f64,
    pub aggregation: AggregationMode,
    /// Strong-convexity modulus of every local objective.
    pub strong_convexity: f64,
    /// Smoothness bound on every local Hessian.
    pub smoothness: f64,
}

impl TrainingConfig {
    /// Derives the curvature bounds from the data and sets the step size to
    /// `1/L`.
    pub fn for_task(task: TaskKind, datasets: &[LocalDataset]) -> Self {
        let (mu, l) = curvature_bounds(task, datasets);
        Self {
            task,
            learning_rate: 1.0 / l,
            aggregation: AggregationMode::Gradient,
            strong_convexity: mu,
            smoothness: l,
        }
    }
}

/// Per-device extremes of the local Hessian spectrum: `mu` is the smallest
/// lower bound, `L` the largest upper bound over devices.
pub fn curvature_bounds(task: TaskKind, datasets: &[LocalDataset]) -> (f64, f64) {
    let mut mu = f64::INFINITY;
    let mut l = 0.0f64;
    for d in datasets {
        let n = d.features.nrows() as f64;
        let gram = d.features.transpose() * &d.features / n;
        let eig = gram.symmetric_eigen();
        let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        match task {
            TaskKind::Logistic { ridge } => {
                // Logistic curvature is at most 1/4 of the Gram spectrum and
                // at least zero.
                mu = mu.min(ridge);
                l = l.max(ridge + 0.25 * max);
            }
            TaskKind::LeastSquares { ridge } => {
                mu = mu.min(ridge + min.max(0.0));
                l = l.max(ridge + max);
            }
        }
    }
    (mu, l)
}

/// Synthetic datasets: standard normal features, labels from a hidden
/// parameter vector with noise (sign flips for the logistic task).
pub fn make_synthetic_datasets(
    task: TaskKind,
    sample_counts: &[u64],
    dim: usize,
    seed: u64,
) -> Vec<LocalDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    sample_counts
        .iter()
        .map(|&count| {
            let n = count as usize;
            let features = DMatrix::from_fn(n, dim, |_, _| StandardNormal.sample(&mut rng));
            let labels = DVector::from_fn(n, |r, _| {
                let noiseless: f64 = (0..dim).map(|c| features[(r, c)] * truth[c]).sum();
                match task {
                    TaskKind::Logistic { .. } => {
                        let flip: f64 = rng.random();
                        let sign = if noiseless >= 0.0 { 1.0 } else { -1.0 };
                        if flip < 0.1 {
                            -sign
                        } else {
                            sign
                        }
                    }
                    TaskKind::LeastSquares { .. } => {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        noiseless + 0.1 * noise
                    }
                }
            });
            LocalDataset { features, labels }
        })
        .collect()
}

/// Mean sample loss of one device, ridge included.
pub fn local_loss(w: &[f64], dataset: &LocalDataset, task: TaskKind) -> f64 {
    let n = dataset.features.nrows();
    let wv = DVector::from_column_slice(w);
    let z = &dataset.features * &wv;
    let data_term: f64 = match task {
        TaskKind::Logistic { .. } => (0..n)
            .map(|r| {
                let margin = dataset.labels[r] * z[r];
                // log(1 + exp(-margin)), stable for both signs
                if margin > 0.0 {
                    (-margin).exp().ln_1p()
                } else {
                    -margin + margin.exp().ln_1p()
                }
            })
            .sum::<f64>(),
        TaskKind::LeastSquares { .. } => (0..n).map(|r| 0.5 * (z[r] - dataset.labels[r]).powi(2)).sum(),
    };
    let ridge = match task {
        TaskKind::Logistic { ridge } | TaskKind::LeastSquares { ridge } => ridge,
    };
    data_term / n as f64 + 0.5 * ridge * wv.norm_squared()
}

/// Exact full-batch gradient of one device's mean loss.
pub fn local_gradient(w: &[f64], dataset: &LocalDataset, task: TaskKind) -> Result<Vec<f64>, SimError> {
    if dataset.features.ncols() != w.len() {
        return Err(SimError::Dimension(format!(
            "model has {} parameters, features have {} columns",
            w.len(),
            dataset.features.ncols()
        )));
    }
    let n = dataset.features.nrows();
    let wv = DVector::from_column_slice(w);
    let z = &dataset.features * &wv;
    let residual = match task {
        TaskKind::Logistic { .. } => DVector::from_fn(n, |r, _| {
            let y = dataset.labels[r];
            let margin = y * z[r];
            // d/dz log(1+exp(-y z)) = -y * sigmoid(-y z)
            -y / (1.0 + margin.exp())
        }),
        TaskKind::LeastSquares { .. } => DVector::from_fn(n, |r, _| z[r] - dataset.labels[r]),
    };
    let mut grad = dataset.features.transpose() * residual / n as f64;
    let ridge = match task {
        TaskKind::Logistic { ridge } | TaskKind::LeastSquares { ridge } => ridge,
    };
    grad += ridge * wv;
    Ok(grad.data.into())
}

/// Sample-weighted global loss over all devices.
pub fn global_loss(w: &[f64], datasets: &[LocalDataset], task: TaskKind) -> f64 {
    let total: u64 = datasets.iter().map(LocalDataset::sample_count).sum();
    datasets
        .iter()
        .map(|d| d.sample_count() as f64 * local_loss(w, d, task))
        .sum::<f64>()
        / total as f64
}

/// Folds per-device vectors up the tree: each node aggregates its children's
/// accumulated vectors with its own, weighted by accumulated sample counts,
/// and forwards the result. Returns the root aggregate and the total count.
///
/// For a valid tree this equals the flat sample-weighted mean; the
/// floating-point fold order is fixed by the traversal order so results are
/// reproducible bit for bit.
pub fn aggregate_tree(
    vectors: &[Vec<f64>],
    sample_counts: &[u64],
    topology: &Topology,
) -> Result<(Vec<f64>, u64), SimError> {
    let k = topology.device_count();
    if vectors.len() != k || sample_counts.len() != k {
        return Err(SimError::Dimension(format!(
            "{} vectors / {} counts for {k} devices",
            vectors.len(),
            sample_counts.len()
        )));
    }
    let dim = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(SimError::Dimension("ragged gradient vectors".into()));
    }
    // Accumulated (count, aggregate) per device, children folded first.
    let mut acc_count = vec![0u64; k];
    let mut acc_vec: Vec<Vec<f64>> = vec![Vec::new(); k];
    for &node in &topology.aggregation_order() {
        let mut count = sample_counts[node];
        let mut vec_acc: Vec<f64> = vectors[node]
            .iter()
            .map(|v| v * sample_counts[node] as f64)
            .collect();
        for child in topology.children(node) {
            count += acc_count[child];
            for (a, b) in vec_acc.iter_mut().zip(&acc_vec[child]) {
                *a += b * acc_count[child] as f64;
            }
        }
        acc_vec[node] = vec_acc.iter().map(|v| v / count as f64).collect();
        acc_count[node] = count;
    }
    // Server: aggregate its direct children (it holds no data).
    let mut total = 0u64;
    let mut result = vec![0.0; dim];
    for child in topology.children(topology.server()) {
        total += acc_count[child];
        for (a, b) in result.iter_mut().zip(&acc_vec[child]) {
            *a += b * acc_count[child] as f64;
        }
    }
    for v in &mut result {
        *v /= total as f64;
    }
    Ok((result, total))
}

/// Flat sample-weighted mean, the reference aggregation.
pub fn aggregate_flat(vectors: &[Vec<f64>], sample_counts: &[u64]) -> (Vec<f64>, u64) {
    let total: u64 = sample_counts.iter().sum();
    let dim = vectors.first().map_or(0, Vec::len);
    let mut out = vec![0.0; dim];
    for (v, &c) in vectors.iter().zip(sample_counts) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x * c as f64;
        }
    }
    for o in &mut out {
        *o /= total as f64;
    }
    (out, total)
}

/// One descent step `w <- w - eta * g`.
pub fn global_update(model: &GlobalModel, aggregate: &[f64], eta: f64) -> GlobalModel {
    GlobalModel {
        w: model.w.iter().zip(aggregate).map(|(w, g)| w - eta * g).collect(),
        round: model.round + 1,
    }
}

/// Where each round's schedule comes from.
pub enum ScheduleSource<'a> {
    /// The same schedule every round.
    Fixed(Schedule),
    /// Run the penalty-based solver on each round's channels.
    ScaPerRound(ScaOptions),
    /// Flat star with speeds re-optimized on each round's channels.
    FlatOptPerRound,
    /// Per-device neural networks inferring from each round's channels.
    Imitation(&'a crate::imitation::ImitationPolicy),
}

/// Stop criterion for a simulated run.
#[derive(Debug, Clone, Copy)]
pub enum RunLimit {
    Rounds(usize),
    /// Execute rounds while the accumulated latency stays within the budget.
    LatencyBudget(f64),
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TraceRow {
    pub round: usize,
    pub loss: f64,
    pub cumulative_latency: f64,
    pub cumulative_energy: f64,
    pub schedule_hash: String,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainingTrace {
    pub fn rounds_completed(&self) -> usize {
        self.rows.last().map_or(0, |r| r.round)
    }

    pub fn final_loss(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("round,loss,cumulative_latency_s,cumulative_energy_j,schedule_hash\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{}\n",
                r.round, r.loss, r.cumulative_latency, r.cumulative_energy, r.schedule_hash
            ));
        }
        out
    }
}

/// Runs federated rounds: per round, fresh channels are drawn from the seed
/// stream, a schedule is produced by `source`, local gradients are computed
/// and tree-aggregated, the model is updated, and the round's modeled cost
/// accrues. Row 0 records the initial loss.
pub fn run_rounds(
    config: &ScenarioConfig,
    channels_seed: u64,
    source: &ScheduleSource,
    training: &TrainingConfig,
    datasets: &[LocalDataset],
    initial: &GlobalModel,
    limit: RunLimit,
) -> Result<TrainingTrace, SimError> {
    if datasets.len() != config.device_count {
        return Err(SimError::Dimension(format!(
            "{} datasets for {} devices",
            datasets.len(),
            config.device_count
        )));
    }
    let counts: Vec<u64> = datasets.iter().map(LocalDataset::sample_count).collect();
    let mut seed_stream = ChaCha8Rng::seed_from_u64(channels_seed);
    let mut model = initial.clone();
    let mut cumulative_latency = 0.0;
    let mut cumulative_energy = 0.0;
    let mut rows = vec![TraceRow {
        round: 0,
        loss: global_loss(&model.w, datasets, training.task),
        cumulative_latency: 0.0,
        cumulative_energy: 0.0,
        schedule_hash: String::new(),
    }];

    loop {
        match limit {
            RunLimit::Rounds(n) if model.round >= n => break,
            _ => {}
        }
        let round_seed = seed_stream.random::<u64>();
        let channels: ChannelMatrix = crate::model::sample_channels(config, round_seed)?;
        let (schedule, cost): (Schedule, RoundCost) = match source {
            ScheduleSource::Fixed(s) => {
                let c = round_cost(s, &channels, config)?;
                (s.clone(), c)
            }
            ScheduleSource::ScaPerRound(opts) => {
                let (s, report) = sca::run(config, &channels, opts)?;
                (s, report.final_cost)
            }
            ScheduleSource::FlatOptPerRound => {
                let (s, c) = oracle::flat_opt_baseline(config, &channels)?;
                (s, c)
            }
            ScheduleSource::Imitation(policy) => {
                let (s, _) = crate::imitation::infer_schedule(&channels, policy, config)?;
                let c = round_cost(&s, &channels, config)?;
                (s, c)
            }
        };
        if let RunLimit::LatencyBudget(budget) = limit {
            if cumulative_latency + cost.latency_total > budget {
                break;
            }
        }

        let gradients: Vec<Vec<f64>> = match training.aggregation {
            AggregationMode::Gradient => datasets
                .iter()
                .map(|d| local_gradient(&model.w, d, training.task))
                .collect::<Result<_, _>>()?,
            AggregationMode::Model => datasets
                .iter()
                .map(|d| {
                    local_gradient(&model.w, d, training.task).map(|g| {
                        model
                            .w
                            .iter()
                            .zip(&g)
                            .map(|(w, gi)| w - training.learning_rate * gi)
                            .collect()
                    })
                })
                .collect::<Result<_, _>>()?,
        };
        let topology = Topology::new(schedule.parents.clone())?;
        let (aggregate, _total) = aggregate_tree(&gradients, &counts, &topology)?;
        model = match training.aggregation {
            AggregationMode::Gradient => global_update(&model, &aggregate, training.learning_rate),
            AggregationMode::Model => GlobalModel {
                w: aggregate,
                round: model.round + 1,
            },
        };
        cumulative_latency += cost.latency_total;
        cumulative_energy += cost.energy_total;
        rows.push(TraceRow {
            round: model.round,
            loss: global_loss(&model.w, datasets, training.task),
            cumulative_latency,
            cumulative_energy,
            schedule_hash: schedule.hash_hex(),
        });
    }
    Ok(TrainingTrace { rows })
}

/// High-precision minimizer of the global loss by Newton iterations.
pub fn minimize_global(datasets: &[LocalDataset], task: TaskKind, dim: usize) -> (Vec<f64>, f64) {
    let total: u64 = datasets.iter().map(LocalDataset::sample_count).sum();
    let mut w = DVector::zeros(dim);
    for _ in 0..200 {
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        for d in datasets {
            let n = d.features.nrows();
            let weight = n as f64 / total as f64;
            let z = &d.features * &w;
            let ridge = match task {
                TaskKind::Logistic { ridge } | TaskKind::LeastSquares { ridge } => ridge,
            };
            match task {
                TaskKind::Logistic { .. } => {
                    let residual = DVector::from_fn(n, |r, _| {
                        let y = d.labels[r];
                        -y / (1.0 + (y * z[r]).exp())
                    });
                    grad += weight * (d.features.transpose() * residual / n as f64 + ridge * &w);
                    let probs = DVector::from_fn(n, |r, _| {
                        let p = 1.0 / (1.0 + (-z[r]).exp());
                        p * (1.0 - p)
                    });
                    let scaled = DMatrix::from_fn(n, dim, |r, c| d.features[(r, c)] * probs[r]);
                    hess += weight
                        * (d.features.transpose() * scaled / n as f64 + ridge * DMatrix::identity(dim, dim));
                }
                TaskKind::LeastSquares { .. } => {
                    let residual = &z - &d.labels;
                    grad += weight * (d.features.transpose() * residual / n as f64 + ridge * &w);
                    hess += weight
                        * (d.features.transpose() * &d.features / n as f64 + ridge * DMatrix::identity(dim, dim));
                }
            }
        }
        if grad.amax() < 1e-14 {
            break;
        }
        let step = hess.lu().solve(&grad).expect("curvature is positive definite");
        w -= step;
    }
    let w_vec: Vec<f64> = w.data.into();
    let f_star = global_loss(&w_vec, datasets, task);
    (w_vec, f_star)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RateReport {
    /// Smallest slack of the bound across rounds (negative means violated).
    pub min_margin: f64,
    pub rounds_checked: usize,
    pub holds: bool,
}

/// Checks the per-round contraction `F(w_t) - F* <= (1 - mu/L)^t (F(w_0) - F*)`
/// with absolute slack `1e-9`, given a trace produced at step size `1/L`.
pub fn check_linear_rate(
    trace: &TrainingTrace,
    strong_convexity: f64,
    smoothness: f64,
    learning_rate: f64,
    f_star: f64,
) -> Result<RateReport, SimError> {
    let inv_l = 1.0 / smoothness;
    if (learning_rate - inv_l).abs() > 1e-12 * inv_l {
        return Err(SimError::RateCheckPrecondition {
            eta: learning_rate,
            inv_l,
        });
    }
    let contraction = 1.0 - strong_convexity / smoothness;
    let initial_gap = trace.rows[0].loss - f_star;
    let mut min_margin = f64::INFINITY;
    let mut holds = true;
    for row in &trace.rows {
        let bound = contraction.powi(row.round as i32) * initial_gap + 1e-9;
        let margin = bound - (row.loss - f_star);
        min_margin = min_margin.min(margin);
        if margin < 0.0 {
            holds = false;
        }
    }
    Ok(RateReport {
        min_margin,
        rounds_checked: trace.rows.len(),
        holds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::fd::numeric_gradient;
    use crate::topology::random_topology;

    fn tiny_datasets(task: TaskKind, k: usize, seed: u64) -> Vec<LocalDataset> {
        make_synthetic_datasets(task, &vec![40; k], 5, seed)
    }

    #[test]
    fn least_squares_gradient_zero_at_normal_equations() {
        let task = TaskKind::LeastSquares { ridge: 0.0 };
        let d = &tiny_datasets(task, 1, 3)[0];
        let gram = d.features.transpose() * &d.features;
        let rhs = d.features.transpose() * &d.labels;
        let w = gram.lu().solve(&rhs).unwrap();
        let w_vec: Vec<f64> = w.data.into();
        let g = local_gradient(&w_vec, d, task).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-10), "{g:?}");
    }

    #[test]
    fn logistic_single_sample_closed_form() {
        // One sample (x, y): grad = -y x sigmoid(-y w.x) + ridge w.
        let features = DMatrix::from_row_slice(1, 2, &[0.7, -1.2]);
        let labels = DVector::from_column_slice(&[1.0]);
        let d = LocalDataset { features, labels };
        let task = TaskKind::Logistic { ridge: 0.05 };
        let w = [0.3, 0.4];
        let z = 0.7 * 0.3 - 1.2 * 0.4;
        let s = 1.0 / (1.0 + z.exp());
        let expected = [-0.7 * s + 0.05 * 0.3, 1.2 * s + 0.05 * 0.4];
        let g = local_gradient(&w, &d, task).unwrap();
        for (a, b) in g.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for task in [TaskKind::Logistic { ridge: 0.1 }, TaskKind::LeastSquares { ridge: 0.1 }] {
            let d = &tiny_datasets(task, 1, 7)[0];
            let w = vec![0.2, -0.3, 0.5, 0.0, -0.1];
            let analytic = local_gradient(&w, d, task).unwrap();
            let loss = |w: &[f64]| local_loss(w, d, task);
            let indices: Vec<usize> = (0..5).collect();
            let numeric = numeric_gradient(&loss, &w, &indices, 1e-6);
            for (a, b) in analytic.iter().zip(&numeric) {
                assert!(
                    (a - b).abs() <= 1e-6 * b.abs().max(1.0),
                    "analytic {a} vs numeric {b}"
                );
            }
        }
    }

    #[test]
    fn tree_aggregate_two_level_reference() {
        // Node 0 holds 2 samples with gradient [1, 0]; its child holds 1
        // accumulated sample with aggregate [4, 3]: result [2, 1], count 3.
        let topo = Topology::new(vec![2, 0]).unwrap();
        let vectors = vec![vec![1.0, 0.0], vec![4.0, 3.0]];
        let counts = vec![2, 1];
        let (agg, total) = aggregate_tree(&vectors, &counts, &topo).unwrap();
        assert_eq!(total, 3);
        assert!((agg[0] - 2.0).abs() < 1e-15);
        assert!((agg[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn flat_star_equals_weighted_mean() {
        let topo = Topology::flat_star(3);
        let vectors = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![3.0, 3.0]];
        let counts = vec![5, 2, 3];
        let (tree, t1) = aggregate_tree(&vectors, &counts, &topo).unwrap();
        let (flat, t2) = aggregate_flat(&vectors, &counts);
        assert_eq!(t1, t2);
        for (a, b) in tree.iter().zip(&flat) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn random_trees_aggregate_exactly_like_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let k = rng.random_range(2..=10usize);
            let topo = random_topology(k, &mut rng);
            let dim = rng.random_range(1..=6usize);
            let vectors: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..dim).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
                .collect();
            let counts: Vec<u64> = (0..k).map(|_| rng.random_range(1..500u64)).collect();
            let (tree, t1) = aggregate_tree(&vectors, &counts, &topo).unwrap();
            let (flat, t2) = aggregate_flat(&vectors, &counts);
            assert_eq!(t1, t2, "total counts must agree exactly");
            for (a, b) in tree.iter().zip(&flat) {
                assert!(
                    (a - b).abs() <= 1e-9 * b.abs().max(1e-12),
                    "tree {a} vs flat {b} on {:?}",
                    topo.parents()
                );
            }
        }
    }

    #[test]
    fn sibling_fold_order_is_irrelevant() {
        // Permuting device indices (hence fold order at the root) leaves the
        // aggregate unchanged within f64 commutativity tolerance.
        let vectors = vec![vec![0.25], vec![-1.5], vec![3.75], vec![0.125]];
        let counts = vec![7, 11, 13, 17];
        let (a, _) = aggregate_tree(&vectors, &counts, &Topology::flat_star(4)).unwrap();
        let perm = [2usize, 0, 3, 1];
        let pv: Vec<Vec<f64>> = perm.iter().map(|&i| vectors[i].clone()).collect();
        let pc: Vec<u64> = perm.iter().map(|&i| counts[i]).collect();
        let (b, _) = aggregate_tree(&pv, &pc, &Topology::flat_star(4)).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_keeps_model() {
        let m = GlobalModel { w: vec![1.0, 2.0], round: 3 };
        let m2 = global_update(&m, &[0.0, 0.0], 0.5);
        assert_eq!(m2.w, m.w);
        assert_eq!(m2.round, 4);
    }

    #[test]
    fn isotropic_quadratic_converges_in_one_step() {
        // Identity features with zero labels give an isotropic quadratic:
        // mu = L, and one step at eta = 1/L lands on the optimum.
        let features = DMatrix::identity(2, 2);
        let labels = DVector::zeros(2);
        let d = LocalDataset { features, labels };
        let task = TaskKind::LeastSquares { ridge: 0.0 };
        let w0 = GlobalModel { w: vec![3.0, -4.0], round: 0 };
        let g = local_gradient(&w0.w, &d, task).unwrap();
        let (mu, l) = curvature_bounds(task, std::slice::from_ref(&d));
        assert!((mu - l).abs() < 1e-12);
        let m1 = global_update(&w0, &g, 1.0 / l);
        assert!(m1.w.iter().all(|v| v.abs() < 1e-12), "{:?}", m1.w);
    }

    #[test]
    fn gradient_and_model_averaging_paths_agree() {
        let task = TaskKind::LeastSquares { ridge: 0.2 };
        let datasets = tiny_datasets(task, 3, 11);
        let config = ScenarioConfig::generate(3, 8);
        let mut training = TrainingConfig::for_task(task, &datasets);
        let schedule = Schedule::new(vec![3, 3, 3], vec![5.5e8; 3]);
        let initial = GlobalModel::zeros(5);
        let a = run_rounds(
            &config,
            77,
            &ScheduleSource::Fixed(schedule.clone()),
            &training,
            &datasets,
            &initial,
            RunLimit::Rounds(20),
        )
        .unwrap();
        training.aggregation = AggregationMode::Model;
        let b = run_rounds(
            &config,
            77,
            &ScheduleSource::Fixed(schedule),
            &training,
            &datasets,
            &initial,
            RunLimit::Rounds(20),
        )
        .unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert!(
                (ra.loss - rb.loss).abs() <= 1e-12 * ra.loss.abs().max(1.0),
                "round {}: {} vs {}",
                ra.round,
                ra.loss,
                rb.loss
            );
        }
    }

    #[test]
    fn tree_and_flat_schedules_share_the_loss_trajectory() {
        let task = TaskKind::Logistic { ridge: 0.1 };
        let datasets = tiny_datasets(task, 3, 13);
        let mut config = ScenarioConfig::generate(3, 9);
        config.cell_radius = 20.0;
        config.regenerate_positions();
        let training = TrainingConfig::for_task(task, &datasets);
        let initial = GlobalModel::zeros(5);
        let flat = Schedule::new(vec![3, 3, 3], vec![5.5e8; 3]);
        // Chain 0 -> 1 -> 2 -> server with slowed parents.
        let tree = Schedule::new(vec![1, 2, 3], vec![9e8, 4e8, 2e8]);
        let a = run_rounds(
            &config,
            5,
            &ScheduleSource::Fixed(flat),
            &training,
            &datasets,
            &initial,
            RunLimit::Rounds(15),
        )
        .unwrap();
        let b = run_rounds(
            &config,
            5,
            &ScheduleSource::Fixed(tree),
            &training,
            &datasets,
            &initial,
            RunLimit::Rounds(15),
        )
        .unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert!((ra.loss - rb.loss).abs() <= 1e-9 * ra.loss.abs().max(1.0));
        }
        // Costs differ even though learning is identical.
        assert_ne!(
            a.rows.last().unwrap().cumulative_latency,
            b.rows.last().unwrap().cumulative_latency
        );
    }

    #[test]
    fn zero_rounds_trace_has_only_initial_loss() {
        let task = TaskKind::LeastSquares { ridge: 0.1 };
        let datasets = tiny_datasets(task, 2, 17);
        let config = ScenarioConfig::generate(2, 10);
        let training = TrainingConfig::for_task(task, &datasets);
        let schedule = Schedule::new(vec![2, 2], vec![5.5e8; 2]);
        let trace = run_rounds(
            &config,
            3,
            &ScheduleSource::Fixed(schedule),
            &training,
            &datasets,
            &GlobalModel::zeros(5),
            RunLimit::Rounds(0),
        )
        .unwrap();
        assert_eq!(trace.rows.len(), 1);
        assert_eq!(trace.rows[0].round, 0);
    }

    #[test]
    fn linear_rate_bound_holds_for_ridge_logistic() {
        let task = TaskKind::Logistic { ridge: 0.15 };
        let datasets = tiny_datasets(task, 3, 19);
        let config = ScenarioConfig::generate(3, 12);
        let training = TrainingConfig::for_task(task, &datasets);
        let schedule = Schedule::new(vec![3, 3, 3], vec![5.5e8; 3]);
        let trace = run_rounds(
            &config,
            9,
            &ScheduleSource::Fixed(schedule),
            &training,
            &datasets,
            &GlobalModel::zeros(5),
            RunLimit::Rounds(100),
        )
        .unwrap();
        let (_, f_star) = minimize_global(&datasets, task, 5);
        let report = check_linear_rate(
            &trace,
            training.strong_convexity,
            training.smoothness,
            training.learning_rate,
            f_star,
        )
        .unwrap();
        assert!(report.holds, "min margin {}", report.min_margin);
    }

    #[test]
    fn wrong_step_size_is_a_precondition_failure() {
        let trace = TrainingTrace {
            rows: vec![TraceRow {
                round: 0,
                loss: 1.0,
                cumulative_latency: 0.0,
                cumulative_energy: 0.0,
                schedule_hash: String::new(),
            }],
        };
        match check_linear_rate(&trace, 0.1, 1.0, 2.0, 0.0) {
            Err(SimError::RateCheckPrecondition { .. }) => {}
            other => panic!("expected precondition failure, got {other:?}"),
        }
    }
}
