//! Smooth convex programs and the log-barrier Newton solver used for every
//! scheduling subproblem and baseline in this crate.
//!
//! A [`ConvexProgram`] carries the objective and inequality constraints as
//! value/gradient/Hessian callbacks over a flat variable vector, plus linear
//! equalities and an optional starting hint. [`solve`] runs an
//! infeasible-start phase (a slack-minimizing barrier solve) when the hint is
//! not strictly feasible, then follows the central path with
//! equality-constrained Newton steps.
//!
//! Solves are deterministic: identical programs produce identical iterate
//! sequences. Callbacks must be pure. One solve is single-threaded; distinct
//! solves may run concurrently.

mod barrier;
pub mod fd;
pub mod guard;

pub use barrier::{solve, solve_with};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Twice-differentiable convex function of a subset of the variables.
///
/// `support` lists the variable indices the function actually touches;
/// gradient and Hessian writes are restricted to that set so barrier assembly
/// stays cheap when most constraints are local.
pub trait SmoothFn: Send + Sync {
    fn support(&self) -> &[usize];
    fn value(&self, x: &[f64]) -> f64;
    /// Adds `scale * gradient` into `grad` (dense, indexed by variable).
    fn add_gradient(&self, x: &[f64], grad: &mut [f64], scale: f64);
    /// Adds `scale * Hessian` into `hess`.
    fn add_hessian(&self, x: &[f64], hess: &mut DMatrix<f64>, scale: f64);
}

/// Sparse affine expression `sum_i coeff_i * x_i + constant`.
#[derive(Debug, Clone, Default)]
pub struct LinearExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinearExpr {
    pub fn new(terms: Vec<(usize, f64)>, constant: f64) -> Self {
        Self { terms, constant }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }
}

/// Inequality constraint `g(x) <= 0`.
pub enum Constraint {
    Linear(LinearExpr),
    Smooth(Box<dyn SmoothFn>),
}

impl Constraint {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Constraint::Linear(l) => l.value(x),
            Constraint::Smooth(s) => s.value(x),
        }
    }

    pub fn add_gradient(&self, x: &[f64], grad: &mut [f64], scale: f64) {
        match self {
            Constraint::Linear(l) => {
                for &(i, c) in &l.terms {
                    grad[i] += scale * c;
                }
            }
            Constraint::Smooth(s) => s.add_gradient(x, grad, scale),
        }
    }

    pub fn add_hessian(&self, x: &[f64], hess: &mut DMatrix<f64>, scale: f64) {
        match self {
            Constraint::Linear(_) => {}
            Constraint::Smooth(s) => s.add_hessian(x, hess, scale),
        }
    }

}

/// A smooth convex program over `n` variables.
pub struct ConvexProgram {
    pub n: usize,
    pub objective: Box<dyn SmoothFn>,
    pub constraints: Vec<Constraint>,
    /// Linear equalities `A x = b`; rows must be linearly independent.
    pub equalities: Option<(DMatrix<f64>, DVector<f64>)>,
    /// Per-variable magnitudes used to precondition the Newton systems.
    /// Purely numerical: callbacks always see physical values.
    pub var_scale: Vec<f64>,
    /// Starting hint; need not be feasible.
    pub initial: Option<Vec<f64>>,
}

impl ConvexProgram {
    pub fn new(n: usize, objective: Box<dyn SmoothFn>) -> Self {
        Self {
            n,
            objective,
            constraints: Vec::new(),
            equalities: None,
            var_scale: vec![1.0; n],
            initial: None,
        }
    }

    pub fn add_linear(&mut self, terms: Vec<(usize, f64)>, constant: f64) {
        self.constraints.push(Constraint::Linear(LinearExpr::new(terms, constant)));
    }

    pub fn add_smooth(&mut self, f: Box<dyn SmoothFn>) {
        self.constraints.push(Constraint::Smooth(f));
    }

    /// Box bounds `lo <= x_i <= hi`; infinite sides are skipped.
    pub fn add_box(&mut self, var: usize, lo: f64, hi: f64) {
        if lo.is_finite() {
            self.add_linear(vec![(var, -1.0)], lo);
        }
        if hi.is_finite() {
            self.add_linear(vec![(var, 1.0)], -hi);
        }
    }

    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|c| c.value(x))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Residuals of the first-order optimality system at a point.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct KktResidual {
    /// Euclidean norm of `grad f0 + sum lambda_k grad g_k + A^T nu`.
    pub stationarity: f64,
    /// Largest inequality violation, clamped at zero when feasible.
    pub primal_inequality: f64,
    /// Largest equality residual |A x - b|.
    pub primal_equality: f64,
    /// Largest |lambda_k * g_k(x)|.
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_inequality)
            .max(self.primal_equality)
            .max(self.complementarity)
    }
}

/// Stationarity/feasibility/complementarity of `(x, duals)` for `program`.
pub fn kkt_residual(
    program: &ConvexProgram,
    x: &[f64],
    duals_ineq: &[f64],
    duals_eq: &[f64],
) -> Result<KktResidual, ConvexError> {
    if x.len() != program.n || duals_ineq.len() != program.constraints.len() {
        return Err(ConvexError::Dimension);
    }
    let mut grad = vec![0.0; program.n];
    program.objective.add_gradient(x, &mut grad, 1.0);
    let mut primal_ineq: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    for (c, &lambda) in program.constraints.iter().zip(duals_ineq) {
        let g = c.value(x);
        primal_ineq = primal_ineq.max(g);
        complementarity = complementarity.max((lambda * g).abs());
        c.add_gradient(x, &mut grad, lambda);
    }
    let mut primal_eq: f64 = 0.0;
    if let Some((a, b)) = &program.equalities {
        if duals_eq.len() != a.nrows() {
            return Err(ConvexError::Dimension);
        }
        let xv = DVector::from_column_slice(x);
        let r = a * &xv - b;
        primal_eq = r.amax();
        let correction = a.transpose() * DVector::from_column_slice(duals_eq);
        for i in 0..program.n {
            grad[i] += correction[i];
        }
    }
    Ok(KktResidual {
        stationarity: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        primal_inequality: primal_ineq.max(0.0),
        primal_equality: primal_eq,
        complementarity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum SolveStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

/// One row of the optional iterate trace (dumped as CSV behind a debug flag).
#[derive(Debug, Clone, serde::Serialize)]
pub struct TraceRow {
    pub phase: u8,
    pub outer: usize,
    pub barrier_t: f64,
    pub objective: f64,
    pub gap: f64,
    pub newton_steps: usize,
}

#[derive(Debug, Clone)]
pub struct ConvexSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub kkt: KktResidual,
    pub duals_ineq: Vec<f64>,
    pub duals_eq: Vec<f64>,
    pub outer_iterations: usize,
    pub newton_iterations: usize,
    /// Objective after each centering step; non-increasing along the path.
    pub outer_objectives: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

impl ConvexSolution {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("phase,outer,barrier_t,objective,gap,newton_steps\n");
        for row in &self.trace {
            out.push_str(&format!(
                "{},{},{:e},{:e},{:e},{}\n",
                row.phase, row.outer, row.barrier_t, row.objective, row.gap, row.newton_steps
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Target duality gap (and KKT residual) at termination.
    pub tol: f64,
    pub barrier_t0: f64,
    pub barrier_mult: f64,
    /// Newton decrement threshold for each centering.
    pub newton_tol: f64,
    pub max_newton: usize,
    pub max_outer: usize,
    /// Armijo fraction and backtracking shrink factor.
    pub armijo: f64,
    pub backtrack: f64,
    /// Spot-check the objective and smooth-constraint Hessians for symmetry
    /// and positive semidefiniteness at the starting point.
    pub check_psd: bool,
    pub collect_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            barrier_t0: 1.0,
            barrier_mult: 20.0,
            newton_tol: 1e-10,
            max_newton: 80,
            max_outer: 60,
            armijo: 0.3,
            backtrack: 0.8,
            check_psd: false,
            collect_trace: false,
        }
    }
}

impl SolverOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

#[derive(Debug, Error)]
pub enum ConvexError {
    #[error("dimension mismatch between program and arguments")]
    Dimension,
    #[error("no strictly feasible point found (phase-one slack {0:.3e})")]
    Infeasible(f64),
    #[error("model error: {0}")]
    Model(String),
    #[error("Newton system could not be solved even with regularization")]
    Singular,
}

/// Dense quadratic `0.5 x^T Q x + c^T x + d` over all variables.
pub struct QuadraticObjective {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub d: f64,
    support: Vec<usize>,
}

impl QuadraticObjective {
    pub fn new(q: DMatrix<f64>, c: DVector<f64>, d: f64) -> Self {
        let support = (0..q.nrows()).collect();
        Self { q, c, d, support }
    }
}

impl SmoothFn for QuadraticObjective {
    fn support(&self) -> &[usize] {
        &self.support
    }

    fn value(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        0.5 * (&self.q * &xv).dot(&xv) + self.c.dot(&xv) + self.d
    }

    fn add_gradient(&self, x: &[f64], grad: &mut [f64], scale: f64) {
        let xv = DVector::from_column_slice(x);
        let g = &self.q * xv + &self.c;
        for i in 0..x.len() {
            grad[i] += scale * g[i];
        }
    }

    fn add_hessian(&self, _x: &[f64], hess: &mut DMatrix<f64>, scale: f64) {
        for i in 0..self.q.nrows() {
            for j in 0..self.q.ncols() {
                hess[(i, j)] += scale * self.q[(i, j)];
            }
        }
    }
}
