use super::*;
use nalgebra::{DMatrix, DVector};

/// Solves `program` to duality gap `tol`. See [`solve_with`].
pub fn solve(program: &ConvexProgram, tol: f64) -> Result<ConvexSolution, ConvexError> {
    solve_with(program, &SolverOptions::with_tol(tol))
}

/// Log-barrier interior-point solve with an infeasible-start phase.
///
/// The hint (or zero vector) is first projected onto the equalities. If it is
/// not strictly feasible for the inequalities, a slack-minimizing barrier
/// solve finds an interior point (constraints are normalized by their initial
/// magnitude so wildly different physical scales share one slack). The main
/// phase then follows the central path, multiplying the barrier parameter by
/// `barrier_mult` after each equality-constrained Newton centering, until the
/// duality-gap estimate `m / t` reaches `tol`.
pub fn solve_with(program: &ConvexProgram, opts: &SolverOptions) -> Result<ConvexSolution, ConvexError> {
    let n = program.n;
    if program.var_scale.len() != n {
        return Err(ConvexError::Dimension);
    }
    if let Some(x0) = &program.initial {
        if x0.len() != n {
            return Err(ConvexError::Dimension);
        }
    }
    if let Some((a, b)) = &program.equalities {
        if a.ncols() != n || a.nrows() != b.len() {
            return Err(ConvexError::Dimension);
        }
    }
    if opts.check_psd {
        spot_check_psd(program)?;
    }

    let mut x = program.initial.clone().unwrap_or_else(|| vec![0.0; n]);
    project_onto_equalities(program, &mut x)?;

    let mut trace = Vec::new();
    let mut newton_total = 0usize;
    let mut outer_total = 0usize;

    let strictly_feasible = program
        .constraints
        .iter()
        .all(|c| c.value(&x) < -1e-12 * constraint_scale(c, &x, &program.var_scale));
    if !strictly_feasible && !program.constraints.is_empty() {
        let feasible = phase_one(program, opts, &mut x, &mut trace, &mut newton_total, &mut outer_total)?;
        if !feasible {
            // Diagnostic solution: best point found, zero multipliers.
            let duals_ineq = vec![0.0; program.constraints.len()];
            let duals_eq = vec![0.0; program.equalities.as_ref().map_or(0, |(a, _)| a.nrows())];
            let kkt = kkt_residual(program, &x, &duals_ineq, &duals_eq)?;
            return Ok(ConvexSolution {
                objective: program.objective.value(&x),
                x,
                status: SolveStatus::Infeasible,
                kkt,
                duals_ineq,
                duals_eq,
                outer_iterations: outer_total,
                newton_iterations: newton_total,
                outer_objectives: Vec::new(),
                trace,
            });
        }
    }

    phase_two(program, opts, x, trace, newton_total, outer_total)
}

/// Characteristic magnitude of a constraint near `x`: the norm of its
/// gradient in scaled coordinates (how much the value moves per unit scaled
/// step), floored to keep divisions sane. Using the gradient rather than
/// `|g(x)|` keeps constraints that start exactly on their boundary from
/// being magnified arbitrarily during the slack phase.
fn constraint_scale(c: &Constraint, x: &[f64], var_scale: &[f64]) -> f64 {
    let mut grad = vec![0.0; x.len()];
    c.add_gradient(x, &mut grad, 1.0);
    let norm = grad
        .iter()
        .zip(var_scale)
        .map(|(g, s)| (g * s) * (g * s))
        .sum::<f64>()
        .sqrt();
    norm.max(c.value(x).abs()).max(1e-12)
}

/// Minimum-norm (in scaled coordinates) correction of `x` onto `A x = b`.
fn project_onto_equalities(program: &ConvexProgram, x: &mut [f64]) -> Result<(), ConvexError> {
    let Some((a, b)) = &program.equalities else { return Ok(()) };
    let p = a.nrows();
    if p == 0 {
        return Ok(());
    }
    let s2 = DVector::from_iterator(program.n, program.var_scale.iter().map(|s| s * s));
    let xv = DVector::from_column_slice(x);
    let residual = b - a * &xv;
    if residual.amax() == 0.0 {
        return Ok(());
    }
    // A S^2 A^T w = r, then x += S^2 A^T w.
    let mut asa = DMatrix::zeros(p, p);
    for r1 in 0..p {
        for r2 in 0..p {
            let mut acc = 0.0;
            for c in 0..program.n {
                acc += a[(r1, c)] * s2[c] * a[(r2, c)];
            }
            asa[(r1, r2)] = acc;
        }
    }
    let lu = asa.lu();
    let w = lu
        .solve(&residual)
        .ok_or(ConvexError::Model("equality rows are linearly dependent".into()))?;
    let correction = a.transpose() * w;
    for i in 0..program.n {
        x[i] += s2[i] * correction[i];
    }
    Ok(())
}

/// Internal view of a constraint during a barrier phase: the physical
/// constraint times `normalize`, minus the shared phase-one slack variable
/// when present.
struct BarrierConstraint<'a> {
    inner: &'a Constraint,
    normalize: f64,
    slack: Option<usize>,
}

impl BarrierConstraint<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let mut v = self.normalize * self.inner.value(x);
        if let Some(s) = self.slack {
            v -= x[s];
        }
        v
    }
}

enum BarrierObjective<'a> {
    External(&'a dyn SmoothFn),
    /// Minimize a single variable (the phase-one slack).
    Variable(usize),
}

impl BarrierObjective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        match self {
            BarrierObjective::External(f) => f.value(x),
            BarrierObjective::Variable(i) => x[*i],
        }
    }

    fn add_gradient(&self, x: &[f64], grad: &mut [f64], scale: f64) {
        match self {
            BarrierObjective::External(f) => f.add_gradient(x, grad, scale),
            BarrierObjective::Variable(i) => grad[*i] += scale,
        }
    }

    fn add_hessian(&self, x: &[f64], hess: &mut DMatrix<f64>, scale: f64) {
        if let BarrierObjective::External(f) = self {
            f.add_hessian(x, hess, scale);
        }
    }
}

struct CenterOutcome {
    newton_steps: usize,
    eq_duals: DVector<f64>,
    stalled: bool,
}

/// Equality-constrained Newton minimization of `t * obj + phi` where `phi` is
/// the log barrier of `constraints`. `x` must enter strictly feasible.
#[allow(clippy::too_many_arguments)]
fn center(
    x: &mut Vec<f64>,
    t: f64,
    obj: &BarrierObjective,
    constraints: &[BarrierConstraint],
    eq: Option<(&DMatrix<f64>, &DVector<f64>)>,
    scale: &[f64],
    opts: &SolverOptions,
    early_exit: &mut dyn FnMut(&[f64]) -> bool,
) -> Result<CenterOutcome, ConvexError> {
    let n = x.len();
    let p = eq.map_or(0, |(a, _)| a.nrows());
    let mut grad = vec![0.0; n];
    let mut scratch = Vec::new();
    let mut eq_duals = DVector::zeros(p);

    let psi = |x: &[f64]| -> f64 {
        let mut v = t * obj.value(x);
        for c in constraints {
            let g = c.value(x);
            if g >= 0.0 {
                return f64::INFINITY;
            }
            v -= (-g).ln();
        }
        v
    };

    for step in 0..opts.max_newton {
        if early_exit(x) {
            return Ok(CenterOutcome {
                newton_steps: step,
                eq_duals,
                stalled: false,
            });
        }

        // Assemble gradient and Hessian of psi in physical coordinates.
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut hess = DMatrix::zeros(n, n);
        obj.add_gradient(x, &mut grad, t);
        obj.add_hessian(x, &mut hess, t);
        for c in constraints {
            let g = c.value(x);
            debug_assert!(g < 0.0);
            let inv = 1.0 / (-g);
            c.inner.add_gradient(x, &mut grad, c.normalize * inv);
            if let Some(s) = c.slack {
                grad[s] -= inv;
            }
            c.inner.add_hessian(x, &mut hess, c.normalize * inv);
            add_barrier_outer(c, x, &mut hess, inv * inv, &mut scratch);
        }

        // Scale, append equality rows, solve the KKT system.
        let dim = n + p;
        let mut kkt = DMatrix::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                kkt[(i, j)] = hess[(i, j)] * scale[i] * scale[j];
            }
        }
        let mut rhs = DVector::zeros(dim);
        for i in 0..n {
            rhs[i] = -grad[i] * scale[i];
        }
        if let Some((a, b)) = eq {
            for r in 0..p {
                for jcol in 0..n {
                    let v = a[(r, jcol)] * scale[jcol];
                    kkt[(n + r, jcol)] = v;
                    kkt[(jcol, n + r)] = v;
                }
                let mut res = -b[r];
                for jcol in 0..n {
                    res += a[(r, jcol)] * x[jcol];
                }
                rhs[n + r] = -res;
            }
        }

        let mut reg = 0.0;
        let solution = loop {
            let mut m = kkt.clone();
            if reg > 0.0 {
                for i in 0..n {
                    m[(i, i)] += reg;
                }
            }
            match m.lu().solve(&rhs) {
                Some(sol) if sol.iter().all(|v| v.is_finite()) => break sol,
                _ => {
                    reg = if reg == 0.0 { 1e-12 } else { reg * 1e3 };
                    if reg > 1.0 {
                        return Err(ConvexError::Singular);
                    }
                }
            }
        };

        let dy = solution.rows(0, n).into_owned();
        for r in 0..p {
            eq_duals[r] = solution[n + r];
        }

        // Newton decrement in the scaled metric.
        let hdy = {
            let mut v = DVector::zeros(n);
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += kkt[(i, j)] * dy[j];
                }
                v[i] = acc;
            }
            v
        };
        let decrement_sq = dy.dot(&hdy).max(0.0);
        let eq_residual: f64 = (0..p).map(|r| rhs[n + r].abs()).fold(0.0, f64::max);
        if decrement_sq * 0.5 <= opts.newton_tol && eq_residual <= 1e-12 {
            return Ok(CenterOutcome {
                newton_steps: step,
                eq_duals,
                stalled: false,
            });
        }

        let dx: Vec<f64> = (0..n).map(|i| dy[i] * scale[i]).collect();
        let slope: f64 = grad.iter().zip(&dx).map(|(g, d)| g * d).sum();
        let psi_x = psi(x);
        if eq_residual <= 1e-12 {
            // A predicted decrease below the float resolution of the merit
            // value cannot be verified by any line search; the centering is
            // as converged as f64 allows.
            if slope >= 0.0 || slope.abs() <= 1e-13 * psi_x.abs().max(1.0) {
                return Ok(CenterOutcome {
                    newton_steps: step,
                    eq_duals,
                    stalled: false,
                });
            }
        }

        // Backtrack to strict feasibility first, then Armijo on psi.
        let mut alpha = 1.0;
        let mut trial = x.clone();
        let mut accepted = false;
        for _ in 0..120 {
            for i in 0..n {
                trial[i] = x[i] + alpha * dx[i];
            }
            let feasible = constraints.iter().all(|c| c.value(&trial) < 0.0);
            if feasible {
                let target = psi_x + opts.armijo * alpha * slope;
                if eq_residual > 1e-12 || psi(&trial) <= target {
                    accepted = true;
                    break;
                }
            }
            alpha *= opts.backtrack;
            if alpha < 1e-16 {
                break;
            }
        }
        if !accepted {
            return Ok(CenterOutcome {
                newton_steps: step,
                eq_duals,
                stalled: true,
            });
        }
        x.copy_from_slice(&trial);
    }

    Ok(CenterOutcome {
        newton_steps: opts.max_newton,
        eq_duals,
        stalled: false,
    })
}

/// Adds `scale * grad(g) grad(g)^T` for a barrier constraint, including the
/// slack column when present.
fn add_barrier_outer(
    c: &BarrierConstraint,
    x: &[f64],
    hess: &mut DMatrix<f64>,
    scale: f64,
    scratch: &mut Vec<f64>,
) {
    match (c.inner, c.slack) {
        (Constraint::Linear(l), None) => {
            for &(i, ci) in &l.terms {
                let ci = ci * c.normalize;
                for &(j, cj) in &l.terms {
                    hess[(i, j)] += scale * ci * cj * c.normalize;
                }
            }
        }
        _ => {
            scratch.clear();
            scratch.resize(x.len(), 0.0);
            c.inner.add_gradient(x, scratch, c.normalize);
            let mut support: Vec<usize> = match c.inner {
                Constraint::Linear(l) => l.terms.iter().map(|&(i, _)| i).collect(),
                Constraint::Smooth(s) => s.support().to_vec(),
            };
            if let Some(s) = c.slack {
                scratch[s] -= 1.0;
                support.push(s);
            }
            for &i in &support {
                let gi = scratch[i];
                if gi == 0.0 {
                    continue;
                }
                for &j in &support {
                    hess[(i, j)] += scale * gi * scratch[j];
                }
            }
        }
    }
}

/// Returns `Ok(true)` when `x` was moved to a strictly feasible point and
/// `Ok(false)` when the constraint set has no interior (best point is left in
/// `x` for diagnostics).
fn phase_one(
    program: &ConvexProgram,
    opts: &SolverOptions,
    x: &mut Vec<f64>,
    trace: &mut Vec<TraceRow>,
    newton_total: &mut usize,
    outer_total: &mut usize,
) -> Result<bool, ConvexError> {
    let n = program.n;
    let slack = n;
    let normalizers: Vec<f64> = program
        .constraints
        .iter()
        .map(|c| 1.0 / constraint_scale(c, x, &program.var_scale))
        .collect();
    let constraints: Vec<BarrierConstraint> = program
        .constraints
        .iter()
        .zip(&normalizers)
        .map(|(inner, &normalize)| BarrierConstraint {
            inner,
            normalize,
            slack: Some(slack),
        })
        .collect();

    let mut z = x.clone();
    let worst = constraints
        .iter()
        .map(|c| c.normalize * c.inner.value(x))
        .fold(f64::NEG_INFINITY, f64::max);
    z.push(worst + 1.0);

    let mut scale = program.var_scale.clone();
    scale.push(1.0);

    // Equalities gain a zero column for the slack.
    let eq_ext = program.equalities.as_ref().map(|(a, b)| {
        let mut a2 = DMatrix::zeros(a.nrows(), n + 1);
        a2.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
        (a2, b.clone())
    });

    let m = constraints.len() as f64;
    // Start with the slack objective dominant: centering weight t0 = 1 would
    // first drag the iterate toward the analytic center of the relaxed set,
    // far outside the region where the callbacks are well behaved.
    let mut t = (10.0 * m).max(opts.barrier_t0);
    let obj = BarrierObjective::Variable(slack);
    let margin = 1e-6;
    let mut stalls = 0usize;

    for outer in 0..opts.max_outer {
        let mut exit = |z: &[f64]| -> bool {
            program
                .constraints
                .iter()
                .zip(&normalizers)
                .all(|(c, &nz)| nz * c.value(z) <= -margin)
        };
        let outcome = center(
            &mut z,
            t,
            &obj,
            &constraints,
            eq_ext.as_ref().map(|(a, b)| (a, b)),
            &scale,
            opts,
            &mut exit,
        )?;
        *newton_total += outcome.newton_steps;
        *outer_total += 1;
        let gap = m / t;
        if opts.collect_trace {
            trace.push(TraceRow {
                phase: 1,
                outer,
                barrier_t: t,
                objective: z[slack],
                gap,
                newton_steps: outcome.newton_steps,
            });
        }
        let strictly_interior = program
            .constraints
            .iter()
            .zip(&normalizers)
            .all(|(c, &nz)| nz * c.value(&z) <= -margin);
        if strictly_interior {
            break;
        }
        // Declare infeasibility only from a converged positive slack; a
        // stalled centering is not evidence.
        if z[slack] > 0.0 && gap <= 1e-6 * z[slack] && !outcome.stalled {
            if std::env::var_os("FEDTOPO_DEBUG_PHASE1").is_some() {
                let mut vals: Vec<(usize, f64, f64)> = program
                    .constraints
                    .iter()
                    .zip(&normalizers)
                    .enumerate()
                    .map(|(i, (c, &nz))| (i, nz * c.value(&z), c.value(&z)))
                    .collect();
                vals.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
                eprintln!("[phase1] declared infeasible: slack {} gap {gap} t {t}", z[slack]);
                for (i, nv, pv) in vals.iter().take(6) {
                    eprintln!("[phase1]   #{i}: normalized {nv:.6e} physical {pv:.6e}");
                }
            }
            x.copy_from_slice(&z[..n]);
            return Ok(false);
        }
        stalls = if outcome.stalled { stalls + 1 } else { 0 };
        if gap < 1e-10 || stalls >= 2 {
            break;
        }
        t *= opts.barrier_mult;
    }

    let feasible = program.constraints.iter().all(|c| c.value(&z) < 0.0);
    x.copy_from_slice(&z[..n]);
    Ok(feasible)
}

fn phase_two(
    program: &ConvexProgram,
    opts: &SolverOptions,
    mut x: Vec<f64>,
    mut trace: Vec<TraceRow>,
    mut newton_total: usize,
    mut outer_total: usize,
) -> Result<ConvexSolution, ConvexError> {
    let constraints: Vec<BarrierConstraint> = program
        .constraints
        .iter()
        .map(|inner| BarrierConstraint {
            inner,
            normalize: 1.0,
            slack: None,
        })
        .collect();
    let m = constraints.len() as f64;
    let obj = BarrierObjective::External(program.objective.as_ref());
    let eq = program.equalities.as_ref().map(|(a, b)| (a, b));

    let mut t = opts.barrier_t0;
    let mut outer_objectives = Vec::new();
    let mut eq_duals = DVector::zeros(program.equalities.as_ref().map_or(0, |(a, _)| a.nrows()));
    let mut status = SolveStatus::MaxIterations;
    let mut never = |_: &[f64]| false;
    let mut stalls = 0usize;

    for outer in 0..opts.max_outer {
        let outcome = center(
            &mut x,
            t,
            &obj,
            &constraints,
            eq,
            &program.var_scale,
            opts,
            &mut never,
        )?;
        newton_total += outcome.newton_steps;
        outer_total += 1;
        eq_duals = outcome.eq_duals;
        let objective = program.objective.value(&x);
        outer_objectives.push(objective);
        let gap = if m > 0.0 { m / t } else { 0.0 };
        if opts.collect_trace {
            trace.push(TraceRow {
                phase: 2,
                outer,
                barrier_t: t,
                objective,
                gap,
                newton_steps: outcome.newton_steps,
            });
        }
        if gap <= opts.tol {
            status = SolveStatus::Optimal;
            break;
        }
        stalls = if outcome.stalled { stalls + 1 } else { 0 };
        if stalls >= 2 {
            // Two centerings in a row made no progress: numerical floor.
            status = SolveStatus::MaxIterations;
            break;
        }
        t *= opts.barrier_mult;
    }

    let duals_ineq: Vec<f64> = constraints
        .iter()
        .map(|c| {
            let g = c.inner.value(&x);
            if g < 0.0 {
                1.0 / (-t * g)
            } else {
                0.0
            }
        })
        .collect();
    let duals_eq: Vec<f64> = eq_duals.iter().map(|w| w / t).collect();
    let kkt = kkt_residual(program, &x, &duals_ineq, &duals_eq)?;
    if status == SolveStatus::Optimal && (kkt.primal_inequality > 1e-8 || kkt.primal_equality > 1e-8) {
        status = SolveStatus::MaxIterations;
    }

    Ok(ConvexSolution {
        objective: program.objective.value(&x),
        x,
        status,
        kkt,
        duals_ineq,
        duals_eq,
        outer_iterations: outer_total,
        newton_iterations: newton_total,
        outer_objectives,
        trace,
    })
}

/// Symmetry and positive-semidefiniteness spot check of the objective and
/// smooth-constraint Hessians at the starting hint.
fn spot_check_psd(program: &ConvexProgram) -> Result<(), ConvexError> {
    let x = program.initial.clone().unwrap_or_else(|| vec![0.0; program.n]);
    let check = |label: String, f: &dyn SmoothFn| -> Result<(), ConvexError> {
        let mut h = DMatrix::zeros(program.n, program.n);
        f.add_hessian(&x, &mut h, 1.0);
        let norm = h.amax().max(1.0);
        for i in 0..program.n {
            for j in 0..i {
                if (h[(i, j)] - h[(j, i)]).abs() > 1e-8 * norm {
                    return Err(ConvexError::Model(format!("{label}: Hessian not symmetric")));
                }
            }
        }
        let eig = h.symmetric_eigen();
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -1e-7 * norm {
            return Err(ConvexError::Model(format!(
                "{label}: Hessian has negative eigenvalue {min:.3e}"
            )));
        }
        Ok(())
    };
    check("objective".into(), program.objective.as_ref())?;
    for (k, c) in program.constraints.iter().enumerate() {
        if let Constraint::Smooth(s) = c {
            check(format!("constraint {k}"), s.as_ref())?;
        }
    }
    Ok(())
}
