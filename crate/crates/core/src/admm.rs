//! Sharing-form ADMM baseline for the fleet coordination problem.
//!
//! The buildings couple only through the zero-sum constraint on their share
//! vectors, so the method alternates a parallel proximal stage
//!
//! ```text
//! xi_i = argmin_{z in Z_i}  F_i(z) + lambda' z_s + rho/2 |z_s - s_i|^2
//! ```
//!
//! with the projection of the proposals onto the zero-sum family and a
//! gradient step on the price:
//!
//! ```text
//! s_i    <-  xi_i_s - mean_j(xi_j_s)
//! lambda <-  lambda + rho * mean_j(xi_j_s)
//! ```
//!
//! Termination, per-iteration message sizes and the trace schema match the
//! curvature-aware solver in the `aladin` module, so iteration counts of
//! the two methods compare one to one.
//!
//! Before iterating, each building's constraint rows over the inputs are
//! conditioned by a Ruiz equilibration restricted to its own decoupled
//! block: rows and columns are scaled by the inverse square roots of their
//! infinity norms until both are near one. The scaling is a change of input
//! variables only; share coordinates, and with them the fixed point and the
//! iterate path, are untouched, so its benefit is the numerical quality of
//! the inner solves.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::aladin::{
    active_set_difference, parallel_steps, stacked_mismatch, validate_fleet, LocalSolver, LocalStep,
};
use crate::problem::LocalProblem;
use crate::trace::{FleetSolution, IterRecord, SolveError, SolveTrace, SolverKind};

#[derive(Debug, Clone)]
pub struct AdmmConfig {
    /// Proximal weight on the share mismatch; must be positive.
    pub rho: f64,
    /// Termination tolerance on the stacked share mismatch.
    pub epsilon: f64,
    pub max_iter: usize,
    /// Equilibration sweeps per building; zero disables the preconditioner.
    pub ruiz_iters: usize,
    /// Equilibration stops early once every row and column norm is within
    /// this distance of one.
    pub ruiz_tol: f64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho: 1.0,
            epsilon: 1e-4,
            max_iter: 20_000,
            ruiz_iters: 10,
            ruiz_tol: 1e-3,
        }
    }
}

/// Share targets and price to resume from.
#[derive(Debug, Clone)]
pub struct AdmmState {
    /// Share target per building; the family sums to zero.
    pub s: Vec<DVector<f64>>,
    pub lambda: DVector<f64>,
}

/// Scales rows and columns of a constraint block by the inverse square
/// roots of their infinity norms until both are within `tol` of one or the
/// sweep budget runs out. Zero rows and columns keep scale one. Returns the
/// scaled matrix, the correspondingly scaled right-hand side and the
/// accumulated row and column scales; `E_scaled = R E C` and
/// `e_scaled = R e`, so `E u <= e` holds exactly when the scaled system
/// accepts `C^-1 u`.
pub fn ruiz_equilibrate(
    e_mat: &DMatrix<f64>,
    e_rhs: &DVector<f64>,
    iters: usize,
    tol: f64,
) -> (DMatrix<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
    let (m, n) = e_mat.shape();
    let mut scaled = e_mat.clone();
    let mut row_scale = DVector::from_element(m, 1.0);
    let mut col_scale = DVector::from_element(n, 1.0);

    for _ in 0..iters {
        let row_norms: Vec<f64> = (0..m).map(|i| scaled.row(i).amax()).collect();
        let col_norms: Vec<f64> = (0..n).map(|j| scaled.column(j).amax()).collect();
        let settled = row_norms
            .iter()
            .chain(col_norms.iter())
            .all(|&nrm| nrm == 0.0 || (nrm - 1.0).abs() <= tol);
        if settled {
            break;
        }
        let dr: Vec<f64> = row_norms
            .iter()
            .map(|&nrm| if nrm > 0.0 { nrm.sqrt().recip() } else { 1.0 })
            .collect();
        let dc: Vec<f64> = col_norms
            .iter()
            .map(|&nrm| if nrm > 0.0 { nrm.sqrt().recip() } else { 1.0 })
            .collect();
        for i in 0..m {
            for j in 0..n {
                scaled[(i, j)] *= dr[i] * dc[j];
            }
        }
        for i in 0..m {
            row_scale[i] *= dr[i];
        }
        for j in 0..n {
            col_scale[j] *= dc[j];
        }
    }

    let e_scaled = e_rhs.component_mul(&row_scale);
    (scaled, e_scaled, row_scale, col_scale)
}

/// Re-expresses a building's problem in equilibrated input coordinates
/// `u = diag(col_scale) * u_scaled`. Costs, price terms and coupling rows
/// follow the change of variables; shares and the penalty are untouched.
/// Returns the scaled problem and the column scales needed to map inputs
/// back. The prediction maps keep their original units, so the scaled
/// problem is meant for the solver loop, not for output reconstruction.
pub fn equilibrate_problem(
    problem: &LocalProblem,
    iters: usize,
    tol: f64,
) -> (LocalProblem, DVector<f64>) {
    let (ineq, ineq_rhs, _, col_scale) =
        ruiz_equilibrate(&problem.qp.ineq, &problem.qp.ineq_rhs, iters, tol);
    let mut scaled = problem.clone();
    scaled.qp.ineq = ineq;
    scaled.qp.ineq_rhs = ineq_rhs;
    let n_ut = problem.n_u_traj();
    for r in 0..n_ut {
        for c in 0..n_ut {
            scaled.qp.hess[(r, c)] *= col_scale[r] * col_scale[c];
        }
    }
    scaled.qp.lin.component_mul_assign(&col_scale);
    scaled.price_lin.component_mul_assign(&col_scale);
    for r in 0..scaled.coupling_mat.nrows() {
        for c in 0..n_ut {
            scaled.coupling_mat[(r, c)] *= col_scale[c];
        }
    }
    (scaled, col_scale)
}

/// Removes the mean from a family of share proposals, landing them on the
/// zero-sum subspace. Returns the projected family together with the mean,
/// which doubles as the direction of the price step.
pub fn project_shares(proposals: &[DVector<f64>]) -> (Vec<DVector<f64>>, DVector<f64>) {
    let n_s = proposals.first().map_or(0, |p| p.len());
    let mut mean = DVector::<f64>::zeros(n_s);
    for p in proposals {
        mean += p;
    }
    mean /= proposals.len().max(1) as f64;
    let projected = proposals.iter().map(|p| p - &mean).collect();
    (projected, mean)
}

/// Runs the projection-based loop until the share mismatch drops below the
/// tolerance. Starts from zero shares and price unless a state is provided.
pub fn solve(
    problems: &[LocalProblem],
    config: &AdmmConfig,
    init: Option<AdmmState>,
) -> Result<FleetSolution, SolveError> {
    assert!(config.rho > 0.0, "proximal weight must be positive");
    assert!(config.epsilon > 0.0, "termination tolerance must be positive");
    assert!(config.max_iter >= 1, "need at least one iteration");
    let n_s = validate_fleet(problems)?;
    let fleet = problems.len();

    let (mut s, mut lambda) = match init {
        Some(state) => {
            if state.s.len() != fleet || state.lambda.len() != n_s {
                return Err(SolveError::Qp(crate::qp::QpError::Dimension {
                    context: "resume state",
                    expected: fleet,
                    got: state.s.len(),
                }));
            }
            (state.s, state.lambda)
        }
        None => (
            (0..fleet).map(|_| DVector::zeros(n_s)).collect(),
            DVector::zeros(n_s),
        ),
    };

    let scaled: Vec<(LocalProblem, DVector<f64>)> = problems
        .iter()
        .map(|p| equilibrate_problem(p, config.ruiz_iters, config.ruiz_tol))
        .collect();
    let prox_weight = DMatrix::identity(n_s, n_s) * config.rho;
    let solvers = scaled
        .iter()
        .map(|(p, _)| LocalSolver::new(p, &prox_weight))
        .collect::<Result<Vec<_>, _>>()?;

    let bytes_up = (fleet * n_s * 8) as u64;
    let bytes_down = (n_s * 8) as u64;
    let mut trace = SolveTrace::new(SolverKind::Admm);
    let mut prev_active: Option<Vec<Vec<usize>>> = None;
    let mut last_steps: Vec<LocalStep> = Vec::new();

    for it in 1..=config.max_iter {
        let started = Instant::now();
        let steps = parallel_steps(&solvers, &s, &lambda)?;
        let residual_s = stacked_mismatch(&s, &steps);
        let active: Vec<Vec<usize>> = steps.iter().map(|st| st.active_set.clone()).collect();
        let active_set_changes = prev_active
            .as_ref()
            .map_or(0, |prev| active_set_difference(prev, &active));
        prev_active = Some(active);

        if residual_s <= config.epsilon {
            trace.records.push(IterRecord {
                iter: it,
                residual_s,
                lambda_delta: 0.0,
                active_set_changes,
                bytes_up,
                bytes_down,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
            return Ok(assemble(problems, &scaled, &steps, &lambda, trace));
        }

        let proposals: Vec<DVector<f64>> = steps.iter().map(|st| st.xi_s.clone()).collect();
        let (projected, mean) = project_shares(&proposals);
        s = projected;
        let price_step = &mean * config.rho;
        lambda += &price_step;

        trace.records.push(IterRecord {
            iter: it,
            residual_s,
            lambda_delta: price_step.norm(),
            active_set_changes,
            bytes_up,
            bytes_down,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        last_steps = steps;
    }

    let solution = assemble(problems, &scaled, &last_steps, &lambda, trace);
    Err(SolveError::MaxIterations(Box::new(solution)))
}

/// Maps the scaled input proposals back to original units and prices the
/// solution on the original problems.
fn assemble(
    problems: &[LocalProblem],
    scaled: &[(LocalProblem, DVector<f64>)],
    steps: &[LocalStep],
    lambda: &DVector<f64>,
    trace: SolveTrace,
) -> FleetSolution {
    let u: Vec<DVector<f64>> = steps
        .iter()
        .zip(scaled)
        .map(|(st, (_, col_scale))| st.xi_u.component_mul(col_scale))
        .collect();
    let s: Vec<DVector<f64>> = steps.iter().map(|st| st.xi_s.clone()).collect();
    let objective = problems
        .iter()
        .zip(&u)
        .zip(&s)
        .map(|((p, u_i), s_i)| p.objective(u_i, s_i))
        .sum();
    FleetSolution {
        u,
        s,
        lambda: lambda.clone(),
        objective,
        active_sets: steps.iter().map(|st| st.active_set.clone()).collect(),
        iterations: trace.iterations(),
        trace,
    }
}
