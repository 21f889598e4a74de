//! Curvature-aware consensus coordination of the building fleet.
//!
//! Each iteration runs two stages. In the parallel stage every building
//! solves its own augmented QP
//!
//! ```text
//! xi_i = argmin_{z in Z_i}  F_i(z) + lambda' z_s + 1/2 |z_s - s_i|^2_{Sigma_i}
//! ```
//!
//! against the current price `lambda` and its share target `s_i`. The
//! coordinator then solves a small equality-constrained QP over the shares
//! in closed form:
//!
//! ```text
//! Lambda      = sum_i Sigma_i^-1
//! delta       = 2 Lambda^-1 sum_i xi_i_s
//! s_i   <-      2 xi_i_s - s_i - Sigma_i^-1 delta
//! lambda <-     lambda + delta
//! ```
//!
//! which keeps `sum_i s_i = 0` at every iterate. The scheme terminates when
//! the stacked share mismatch `|s - xi_s|` falls below the tolerance.
//!
//! With `Sigma_i` set to the true curvature of building `i`'s share value
//! function (twice [`local_hessian`]'s matrix, see the `qp` module), one
//! full iteration lands exactly on the fleet optimum from anywhere inside
//! the optimal active-set region. [`warm_start`] exploits that between
//! receding-horizon steps: it shifts the previous optimum by one step and
//! refreshes every `Sigma_i` from the curvature there. The scalings stay
//! fixed across iterations of one solve.
//!
//! Communication per iteration is one share proposal (two floats per
//! horizon step) uploaded by each building and one price update of the same
//! length broadcast back; the scaling matrices travel once at setup. The
//! coordinator sums proposals in fixed building order, so results do not
//! depend on how the parallel stage is scheduled.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;

use crate::problem::LocalProblem;
use crate::qp::{self, eval_psi, local_hessian, QpError, QpFactor};
use crate::trace::{FleetSolution, IterRecord, SolveError, SolveTrace, SolverKind};

/// How the per-building scalings are chosen when a solve starts cold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaMode {
    /// Unit scaling for every building.
    Identity,
    /// Share-curvature scaling evaluated at the starting shares, the same
    /// choice [`warm_start`] makes; buildings whose starting shares are
    /// infeasible fall back to the unit scaling.
    ExactHessianWarmStart,
}

#[derive(Debug, Clone)]
pub struct AladinConfig {
    /// Termination tolerance on the stacked share mismatch.
    pub epsilon: f64,
    pub max_iter: usize,
    /// Scaling rule for cold starts.
    pub sigma_mode: SigmaMode,
}

impl Default for AladinConfig {
    fn default() -> Self {
        AladinConfig {
            epsilon: 1e-4,
            max_iter: 2000,
            sigma_mode: SigmaMode::Identity,
        }
    }
}

/// A symmetric positive definite scaling together with its inverse.
#[derive(Debug, Clone)]
pub struct Scaling {
    mat: DMatrix<f64>,
    inv: DMatrix<f64>,
}

impl Scaling {
    pub fn new(mat: DMatrix<f64>) -> Result<Self, QpError> {
        let mat = (&mat + &mat.transpose()) * 0.5;
        let inv = Cholesky::new(mat.clone())
            .ok_or(QpError::NotPositiveDefinite)?
            .inverse();
        Ok(Scaling { mat, inv })
    }

    pub fn identity(n: usize) -> Self {
        Scaling {
            mat: DMatrix::identity(n, n),
            inv: DMatrix::identity(n, n),
        }
    }

    pub fn mat(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn inv(&self) -> &DMatrix<f64> {
        &self.inv
    }
}

/// Coordinator-side iterate: share targets, price and scalings.
#[derive(Debug, Clone)]
pub struct ConsensusState {
    /// Share target per building; the family sums to zero.
    pub s: Vec<DVector<f64>>,
    /// Price on the zero-sum coupling.
    pub lambda: DVector<f64>,
    /// Scaling per building, fixed across iterations of one solve.
    pub sigma: Vec<Scaling>,
    pub iteration: usize,
}

impl ConsensusState {
    /// Zero shares and price; scalings per the configured mode.
    pub fn cold(problems: &[LocalProblem], mode: SigmaMode) -> Result<Self, QpError> {
        let n_s = problems.first().map_or(0, |p| p.n_s());
        let s: Vec<_> = problems.iter().map(|p| DVector::zeros(p.n_s())).collect();
        let sigma = match mode {
            SigmaMode::Identity => problems.iter().map(|p| Scaling::identity(p.n_s())).collect(),
            SigmaMode::ExactHessianWarmStart => curvature_scalings(problems, &s)?,
        };
        Ok(ConsensusState {
            s,
            lambda: DVector::zeros(n_s),
            sigma,
            iteration: 0,
        })
    }

    /// Componentwise sum of all share targets; zero up to roundoff.
    pub fn share_sum(&self) -> DVector<f64> {
        let n_s = self.lambda.len();
        let mut total = DVector::zeros(n_s);
        for s_i in &self.s {
            total += s_i;
        }
        total
    }
}

/// Result of one building's parallel stage.
#[derive(Debug, Clone)]
pub struct LocalStep {
    /// Input-trajectory part of the minimizer.
    pub xi_u: DVector<f64>,
    /// Share part of the minimizer.
    pub xi_s: DVector<f64>,
    /// Active rows in the building's `z`-row numbering.
    pub active_set: Vec<usize>,
    pub kkt_residual: f64,
}

/// Reusable per-building solver for the parallel stage: the constraint rows
/// and the factorization of the augmented quadratic depend only on the
/// problem and its scaling, not on the iterate.
pub(crate) struct LocalSolver {
    rows: DMatrix<f64>,
    rhs: DVector<f64>,
    lin_u: DVector<f64>,
    sigma: DMatrix<f64>,
    factor: QpFactor,
    n_ut: usize,
    n_s: usize,
}

impl LocalSolver {
    pub(crate) fn new(problem: &LocalProblem, sigma: &DMatrix<f64>) -> Result<Self, QpError> {
        let n_ut = problem.n_u_traj();
        let n_s = problem.n_s();
        if sigma.nrows() != n_s || sigma.ncols() != n_s {
            return Err(QpError::Dimension {
                context: "share scaling",
                expected: n_s,
                got: sigma.nrows(),
            });
        }
        let mut hess = problem.hess_z();
        for r in 0..n_s {
            for c in 0..n_s {
                hess[(n_ut + r, n_ut + c)] += 0.5 * sigma[(r, c)];
            }
        }
        let factor = QpFactor::new(&hess)?;
        let (rows, rhs) = problem.rows_z();
        let lin_u = &problem.qp.lin + &problem.price_lin * 0.5;
        Ok(LocalSolver {
            rows,
            rhs,
            lin_u,
            sigma: sigma.clone(),
            factor,
            n_ut,
            n_s,
        })
    }

    pub(crate) fn step(
        &self,
        s_i: &DVector<f64>,
        lambda: &DVector<f64>,
    ) -> Result<LocalStep, QpError> {
        let mut lin = DVector::<f64>::zeros(self.n_ut + self.n_s);
        lin.rows_mut(0, self.n_ut).copy_from(&self.lin_u);
        lin.rows_mut(self.n_ut, self.n_s)
            .copy_from(&((lambda - &self.sigma * s_i) * 0.5));
        let sol = qp::solve_with_factor(&self.factor, &lin, &self.rows, &self.rhs, None)?;
        Ok(LocalStep {
            xi_u: sol.z.rows(0, self.n_ut).clone_owned(),
            xi_s: sol.z.rows(self.n_ut, self.n_s).clone_owned(),
            active_set: sol.active_set,
            kkt_residual: sol.kkt_residual,
        })
    }
}

/// Solves one building's augmented QP against the current price and share
/// target.
pub fn local_step(
    problem: &LocalProblem,
    lambda: &DVector<f64>,
    s_i: &DVector<f64>,
    sigma_i: &Scaling,
) -> Result<LocalStep, QpError> {
    LocalSolver::new(problem, sigma_i.mat())?.step(s_i, lambda)
}

/// Output of the coordinator stage.
#[derive(Debug, Clone)]
pub struct ConsensusUpdate {
    pub s_plus: Vec<DVector<f64>>,
    pub delta_lambda: DVector<f64>,
}

/// Coordinator-side linear algebra, built once per solve.
struct ConsensusCache {
    lam: DMatrix<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
}

impl ConsensusCache {
    fn new(sigma: &[Scaling]) -> Self {
        let n_s = sigma.first().map_or(0, |s| s.mat.nrows());
        let mut lam = DMatrix::<f64>::zeros(n_s, n_s);
        for s in sigma {
            lam += &s.inv;
        }
        // The aggregated scaling inherits ill conditioning from the
        // curvature matrices; past 1e12 a direct factorization is no longer
        // trustworthy and an iterative solve takes over.
        let eig = SymmetricEigen::new(lam.clone());
        let max = eig.eigenvalues.amax();
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let chol = if min > 0.0 && max / min <= 1e12 {
            Cholesky::new(lam.clone())
        } else {
            None
        };
        ConsensusCache { lam, chol }
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.chol {
            Some(c) => c.solve(b),
            None => jacobi_cg(&self.lam, b),
        }
    }
}

/// Conjugate gradients with diagonal preconditioning; fallback path for
/// badly conditioned aggregated scalings.
fn jacobi_cg(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = b.len();
    let inv_diag = a.diagonal().map(|d| if d > 0.0 { 1.0 / d } else { 1.0 });
    let mut x = DVector::<f64>::zeros(n);
    let mut r = b.clone();
    let mut z = inv_diag.component_mul(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let tol = 1e-13 * b.norm().max(f64::MIN_POSITIVE);
    for _ in 0..8 * n.max(4) {
        if r.norm() <= tol {
            break;
        }
        let ap = a * &p;
        let denom = p.dot(&ap);
        if denom <= 0.0 {
            break;
        }
        let alpha = rz / denom;
        x += &p * alpha;
        r -= &ap * alpha;
        z = inv_diag.component_mul(&r);
        let rz_new = r.dot(&z);
        p = &z + &p * (rz_new / rz.max(f64::MIN_POSITIVE));
        rz = rz_new;
    }
    x
}

fn apply_consensus(
    cache: &ConsensusCache,
    xi_s: &[DVector<f64>],
    s: &[DVector<f64>],
    sigma: &[Scaling],
) -> ConsensusUpdate {
    let n_s = cache.lam.nrows();
    let fleet = xi_s.len();
    let mut sum_xi = DVector::<f64>::zeros(n_s);
    for xi in xi_s {
        sum_xi += xi;
    }
    let delta_lambda = cache.solve(&(&sum_xi * 2.0));

    let mut s_plus: Vec<DVector<f64>> = (0..fleet)
        .map(|i| &xi_s[i] * 2.0 - &s[i] - &sigma[i].inv * &delta_lambda)
        .collect();
    // Spread the roundoff so the zero-sum family stays exact over long runs.
    let mut drift = DVector::<f64>::zeros(n_s);
    for s_i in &s_plus {
        drift += s_i;
    }
    drift /= fleet as f64;
    for s_i in &mut s_plus {
        *s_i -= &drift;
    }
    ConsensusUpdate {
        s_plus,
        delta_lambda,
    }
}

/// Closed-form coordinator stage: new share targets and the price update.
///
/// Expects the current share family to sum to zero, which every previous
/// consensus step and every provided initializer guarantees.
pub fn consensus_step(
    xi_s: &[DVector<f64>],
    s: &[DVector<f64>],
    sigma: &[Scaling],
) -> ConsensusUpdate {
    apply_consensus(&ConsensusCache::new(sigma), xi_s, s, sigma)
}

fn curvature_scalings(
    problems: &[LocalProblem],
    s: &[DVector<f64>],
) -> Result<Vec<Scaling>, QpError> {
    problems
        .iter()
        .zip(s)
        .map(|(p, s_i)| match eval_psi(p, s_i) {
            Ok(psi) => Scaling::new(local_hessian(p, &psi) * 2.0),
            Err(QpError::Infeasible) => Ok(Scaling::identity(p.n_s())),
            Err(e) => Err(e),
        })
        .collect()
}

/// Shifts a converged `(s, lambda)` one horizon step, padding the tail with
/// zeros, and sets every scaling to the share curvature at the previous
/// optimum. When the active pattern carries over to the new window that
/// curvature is exact there too, which is what makes the restart finish in
/// one or two rounds. The zero-padded tail of the shifted shares is no
/// curvature probe: its rows sit in whatever piece contains the origin, not
/// the one the solution will land in, so the unshifted optimum is the right
/// evaluation point. Buildings whose previous shares are infeasible for the
/// new data keep the unit scaling.
pub fn warm_start(
    problems: &[LocalProblem],
    prev_s: &[DVector<f64>],
    prev_lambda: &DVector<f64>,
) -> Result<ConsensusState, QpError> {
    let sigma = curvature_scalings(problems, prev_s)?;
    let s: Vec<DVector<f64>> = prev_s.iter().map(|s_i| shift_block(s_i)).collect();
    let lambda = shift_block(prev_lambda);
    Ok(ConsensusState {
        s,
        lambda,
        sigma,
        iteration: 0,
    })
}

/// Drops the leading two-entry step block and pads the tail with zeros.
pub(crate) fn shift_block(v: &DVector<f64>) -> DVector<f64> {
    let n = v.len();
    let mut out = DVector::<f64>::zeros(n);
    if n > 2 {
        out.rows_mut(0, n - 2).copy_from(&v.rows(2, n - 2));
    }
    out
}

pub(crate) fn validate_fleet(problems: &[LocalProblem]) -> Result<usize, QpError> {
    let fleet = problems.len();
    if fleet == 0 {
        return Err(QpError::Dimension {
            context: "fleet",
            expected: 1,
            got: 0,
        });
    }
    let n_s = problems[0].n_s();
    for p in problems {
        if p.n_s() != n_s {
            return Err(QpError::Dimension {
                context: "share lengths",
                expected: n_s,
                got: p.n_s(),
            });
        }
        if p.fleet_size != fleet {
            return Err(QpError::Dimension {
                context: "fleet size",
                expected: fleet,
                got: p.fleet_size,
            });
        }
    }
    Ok(n_s)
}

fn check_state(state: &ConsensusState, problems: &[LocalProblem]) -> Result<(), QpError> {
    if state.s.len() != problems.len() || state.sigma.len() != problems.len() {
        return Err(QpError::Dimension {
            context: "state buildings",
            expected: problems.len(),
            got: state.s.len(),
        });
    }
    let n_s = problems[0].n_s();
    if state.lambda.len() != n_s {
        return Err(QpError::Dimension {
            context: "price length",
            expected: n_s,
            got: state.lambda.len(),
        });
    }
    Ok(())
}

pub(crate) fn stacked_mismatch(s: &[DVector<f64>], steps: &[LocalStep]) -> f64 {
    s.iter()
        .zip(steps)
        .map(|(s_i, st)| (s_i - &st.xi_s).norm_squared())
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn parallel_steps(
    solvers: &[LocalSolver],
    s: &[DVector<f64>],
    lambda: &DVector<f64>,
) -> Result<Vec<LocalStep>, QpError> {
    solvers
        .par_iter()
        .zip(s.par_iter())
        .map(|(solver, s_i)| solver.step(s_i, lambda))
        .collect()
}

fn fleet_solution(
    problems: &[LocalProblem],
    steps: &[LocalStep],
    lambda: &DVector<f64>,
    trace: SolveTrace,
) -> FleetSolution {
    let u: Vec<_> = steps.iter().map(|st| st.xi_u.clone()).collect();
    let s: Vec<_> = steps.iter().map(|st| st.xi_s.clone()).collect();
    let objective = problems
        .iter()
        .zip(steps)
        .map(|(p, st)| p.objective(&st.xi_u, &st.xi_s))
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

pub(crate) fn active_set_difference(prev: &[Vec<usize>], cur: &[Vec<usize>]) -> usize {
    prev.iter()
        .zip(cur)
        .map(|(a, b)| {
            let in_a = a.iter().filter(|j| !b.contains(j)).count();
            let in_b = b.iter().filter(|j| !a.contains(j)).count();
            in_a + in_b
        })
        .sum()
}

/// Runs the full coordination loop until the share mismatch drops below the
/// tolerance. Starts cold unless an initial state is provided.
pub fn solve(
    problems: &[LocalProblem],
    config: &AladinConfig,
    init: Option<ConsensusState>,
) -> Result<FleetSolution, SolveError> {
    assert!(config.epsilon > 0.0, "termination tolerance must be positive");
    assert!(config.max_iter >= 1, "need at least one iteration");
    let n_s = validate_fleet(problems)?;
    let mut state = match init {
        Some(st) => {
            check_state(&st, problems)?;
            st
        }
        None => ConsensusState::cold(problems, config.sigma_mode)?,
    };

    let solvers = problems
        .iter()
        .zip(&state.sigma)
        .map(|(p, sg)| LocalSolver::new(p, sg.mat()))
        .collect::<Result<Vec<_>, _>>()?;
    let cache = ConsensusCache::new(&state.sigma);

    let fleet = problems.len();
    let bytes_up = (fleet * n_s * 8) as u64;
    let bytes_down = (n_s * 8) as u64;

    let mut trace = SolveTrace::new(SolverKind::Aladin);
    let mut prev_active: Option<Vec<Vec<usize>>> = None;
    let mut last_steps: Vec<LocalStep> = Vec::new();

    for it in 1..=config.max_iter {
        let started = Instant::now();
        let steps = parallel_steps(&solvers, &state.s, &state.lambda)?;
        let residual_s = stacked_mismatch(&state.s, &steps);
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
            state.iteration += 1;
            return Ok(fleet_solution(problems, &steps, &state.lambda, trace));
        }

        let xi_s: Vec<_> = steps.iter().map(|st| st.xi_s.clone()).collect();
        let update = apply_consensus(&cache, &xi_s, &state.s, &state.sigma);
        state.s = update.s_plus;
        state.lambda += &update.delta_lambda;
        state.iteration += 1;
        debug_assert!(
            state.share_sum().amax() <= 1e-10,
            "share targets must stay a zero-sum family"
        );

        trace.records.push(IterRecord {
            iter: it,
            residual_s,
            lambda_delta: update.delta_lambda.norm(),
            active_set_changes,
            bytes_up,
            bytes_down,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        last_steps = steps;
    }

    let solution = fleet_solution(problems, &last_steps, &state.lambda, trace);
    Err(SolveError::MaxIterations(Box::new(solution)))
}

/// Building-and-coordinator state of the streaming variant, which runs one
/// coordination round per call instead of iterating to convergence.
#[derive(Debug, Clone)]
pub struct OnlineState {
    pub state: ConsensusState,
    /// Share proposals from the last parallel stage.
    pub xi_s: Vec<DVector<f64>>,
    /// Price update to apply at the next round.
    pub delta_lambda: DVector<f64>,
    /// Share mismatch observed at the last round.
    pub residual_s: f64,
}

impl OnlineState {
    /// Arms the recursion so the first round reduces to a plain parallel
    /// stage at the given state.
    pub fn start(state: ConsensusState) -> Self {
        let n_s = state.lambda.len();
        OnlineState {
            xi_s: state.s.clone(),
            delta_lambda: DVector::zeros(n_s),
            residual_s: f64::INFINITY,
            state,
        }
    }
}

/// One streaming round: applies the carried price update and share
/// reflection, runs the parallel stage at the updated state, and prepares
/// the next price update. Composing rounds reproduces the offline loop
/// exactly.
pub fn online_step(
    problems: &[LocalProblem],
    online: &OnlineState,
) -> Result<OnlineState, QpError> {
    validate_fleet(problems)?;
    check_state(&online.state, problems)?;
    let state = &online.state;
    let fleet = problems.len();

    let lambda = &state.lambda + &online.delta_lambda;
    let mut s: Vec<DVector<f64>> = (0..fleet)
        .map(|i| &online.xi_s[i] * 2.0 - &state.s[i] - &state.sigma[i].inv * &online.delta_lambda)
        .collect();
    let n_s = lambda.len();
    let mut drift = DVector::<f64>::zeros(n_s);
    for s_i in &s {
        drift += s_i;
    }
    drift /= fleet as f64;
    for s_i in &mut s {
        *s_i -= &drift;
    }

    let solvers = problems
        .iter()
        .zip(&state.sigma)
        .map(|(p, sg)| LocalSolver::new(p, sg.mat()))
        .collect::<Result<Vec<_>, _>>()?;
    let steps = parallel_steps(&solvers, &s, &lambda)?;
    let residual_s = stacked_mismatch(&s, &steps);
    let xi_s: Vec<_> = steps.iter().map(|st| st.xi_s.clone()).collect();

    let cache = ConsensusCache::new(&state.sigma);
    let mut sum_xi = DVector::<f64>::zeros(n_s);
    for xi in &xi_s {
        sum_xi += xi;
    }
    let delta_lambda = cache.solve(&(&sum_xi * 2.0));

    Ok(OnlineState {
        state: ConsensusState {
            s,
            lambda,
            sigma: state.sigma.clone(),
            iteration: state.iteration + 1,
        },
        xi_s,
        delta_lambda,
        residual_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{synth_building, BuildingKind, BuildingModel, CondensedQp, PredictionMaps};
    use crate::problem::{assemble_centralized, build_local, CouplingData};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    fn small_fleet(
        n: usize,
        fleet: usize,
        seed: u64,
        band: f64,
    ) -> (Vec<BuildingModel>, CouplingData, Vec<LocalProblem>) {
        let models: Vec<_> = (0..fleet)
            .map(|i| synth_building(BuildingKind::Small, seed + i as u64))
            .collect();
        let coupling = CouplingData::from_models(
            &models,
            DVector::from_element(n, 1.0),
            1.0 - band,
            1.0 + band,
            DVector::from_element(n, 1.0),
        )
        .unwrap();
        let problems: Vec<_> = models
            .iter()
            .enumerate()
            .map(|(i, m)| {
                build_local(
                    m,
                    &DVector::zeros(m.n_x()),
                    &vec![DVector::zeros(m.n_x()); n],
                    &coupling,
                    i,
                    0.1,
                )
                .unwrap()
            })
            .collect();
        (models, coupling, problems)
    }

    #[test]
    fn consensus_balanced_proposals_leave_the_price() {
        let sigma = vec![Scaling::identity(2), Scaling::identity(2)];
        let xi = vec![dvec(&[0.3, -0.1]), dvec(&[-0.3, 0.1])];
        let s = vec![dvec(&[0.2, 0.0]), dvec(&[-0.2, 0.0])];
        let update = consensus_step(&xi, &s, &sigma);
        assert!(update.delta_lambda.amax() <= 1e-14);
        assert_relative_eq!(update.s_plus[0], dvec(&[0.4, -0.2]), epsilon = 1e-12);
        assert_relative_eq!(update.s_plus[1], dvec(&[-0.4, 0.2]), epsilon = 1e-12);
    }

    #[test]
    fn consensus_matches_the_hand_worked_example() {
        let sigma = vec![
            Scaling::new(DMatrix::from_row_slice(1, 1, &[2.0])).unwrap(),
            Scaling::identity(1),
        ];
        let xi = vec![dvec(&[1.0]), dvec(&[2.0])];
        let s = vec![dvec(&[0.5]), dvec(&[-0.5])];
        let update = consensus_step(&xi, &s, &sigma);
        assert_relative_eq!(update.delta_lambda[0], 4.0, epsilon = 1e-12);
        assert_relative_eq!(update.s_plus[0][0], -0.5, epsilon = 1e-12);
        assert_relative_eq!(update.s_plus[1][0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn consensus_agrees_with_the_dense_stationarity_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let fleet = 3;
        let n_s = 4;
        for _ in 0..10 {
            let sigma: Vec<Scaling> = (0..fleet)
                .map(|_| {
                    let a = DMatrix::from_fn(n_s, n_s, |_, _| rng.random_range(-1.0..1.0));
                    Scaling::new(&a * a.transpose() + DMatrix::identity(n_s, n_s) * 0.3).unwrap()
                })
                .collect();
            let xi: Vec<DVector<f64>> = (0..fleet)
                .map(|_| DVector::from_fn(n_s, |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            let mut s: Vec<DVector<f64>> = (0..fleet - 1)
                .map(|_| DVector::from_fn(n_s, |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            let tail = -s.iter().fold(DVector::zeros(n_s), |acc, v| acc + v);
            s.push(tail);

            let update = consensus_step(&xi, &s, &sigma);

            // Reference: projection of the proposals onto the zero-sum
            // family in the metric of the scalings, solved densely.
            let dim = fleet * n_s + n_s;
            let mut kkt = DMatrix::<f64>::zeros(dim, dim);
            let mut rhs = DVector::<f64>::zeros(dim);
            for i in 0..fleet {
                kkt.view_mut((i * n_s, i * n_s), (n_s, n_s))
                    .copy_from(sigma[i].mat());
                kkt.view_mut((i * n_s, fleet * n_s), (n_s, n_s))
                    .copy_from(&DMatrix::identity(n_s, n_s));
                kkt.view_mut((fleet * n_s, i * n_s), (n_s, n_s))
                    .copy_from(&DMatrix::identity(n_s, n_s));
                rhs.rows_mut(i * n_s, n_s)
                    .copy_from(&(sigma[i].mat() * &xi[i]));
            }
            let sol = kkt.lu().solve(&rhs).unwrap();
            let nu = sol.rows(fleet * n_s, n_s).clone_owned();
            assert_relative_eq!(update.delta_lambda, &nu * 2.0, epsilon = 1e-10);
            for i in 0..fleet {
                let y = sol.rows(i * n_s, n_s).clone_owned();
                assert_relative_eq!(update.s_plus[i], &y * 2.0 - &s[i], epsilon = 1e-10);
            }

            let mut total = DVector::<f64>::zeros(n_s);
            for s_i in &update.s_plus {
                total += s_i;
            }
            assert!(total.amax() <= 1e-12);
        }
    }

    #[test]
    fn ill_conditioned_scalings_use_the_iterative_path() {
        let mut spread = DMatrix::<f64>::zeros(2, 2);
        spread[(0, 0)] = 1e-13;
        spread[(1, 1)] = 1.0;
        let sigma = vec![Scaling::new(spread).unwrap(), Scaling::identity(2)];
        let xi = vec![dvec(&[0.4, -0.2]), dvec(&[0.1, 0.3])];
        let s = vec![dvec(&[0.3, -0.3]), dvec(&[-0.3, 0.3])];
        let update = consensus_step(&xi, &s, &sigma);
        let lam = sigma[0].inv() + sigma[1].inv();
        let residual = &lam * &update.delta_lambda - (&xi[0] + &xi[1]) * 2.0;
        assert!(
            residual.amax() <= 1e-6 * (1.0 + update.delta_lambda.amax()),
            "iterative solve residual too large: {}",
            residual.amax()
        );
        let mut total = DVector::<f64>::zeros(2);
        for s_i in &update.s_plus {
            total += s_i;
        }
        assert!(total.amax() <= 1e-12);
    }

    /// Building whose inputs decouple from the shares entirely, making the
    /// parallel stage a closed-form proximal step on the shares.
    fn detached_share_problem(mu: f64) -> LocalProblem {
        let maps = PredictionMaps {
            a_stack: DMatrix::zeros(1, 1),
            b_u: DMatrix::zeros(1, 1),
            b_w: DMatrix::zeros(1, 1),
            c_blk: DMatrix::zeros(1, 1),
            d_blk: DMatrix::zeros(1, 1),
        };
        let qp = CondensedQp {
            hess: DMatrix::from_row_slice(1, 1, &[1.0]),
            lin: dvec(&[0.0]),
            ineq: DMatrix::zeros(0, 1),
            ineq_rhs: DVector::zeros(0),
            maps,
            horizon: 1,
            n_u: 1,
            n_y: 1,
        };
        LocalProblem {
            index: 0,
            fleet_size: 1,
            qp,
            coupling_mat: DMatrix::zeros(2, 1),
            coupling_rhs: dvec(&[10.0, 10.0]),
            price_lin: dvec(&[0.0]),
            mu,
        }
    }

    #[test]
    fn local_step_matches_the_scalar_proximal_formula() {
        let mu = 0.1;
        let problem = detached_share_problem(mu);
        let sigma = Scaling::identity(2);
        let lambda = dvec(&[1.0, 1.0]);
        let s = dvec(&[0.0, 0.0]);
        let step = local_step(&problem, &lambda, &s, &sigma).unwrap();
        // argmin mu x^2 + lambda x + (x - s)^2 / 2 = (s - lambda)/(2 mu + 1)
        let expected = -1.0 / 1.2;
        assert_relative_eq!(step.xi_s[0], expected, epsilon = 1e-9);
        assert_relative_eq!(step.xi_s[1], expected, epsilon = 1e-9);
        assert!(step.kkt_residual <= 1e-8);
    }

    #[test]
    fn local_step_with_zero_price_reproduces_the_decoupled_optimum() {
        let (_, _, problems) = small_fleet(3, 2, 60, 0.05);
        let p = &problems[0];
        let (rows, rhs) = p.rows_z();
        let alone = qp::solve_qp(&p.hess_z(), &p.lin_z(), &rows, &rhs, None).unwrap();
        let (u_star, s_star) = p.split_z(&alone.z);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DMatrix::from_fn(p.n_s(), p.n_s(), |_, _| rng.random_range(-0.5..0.5));
        let sigma = Scaling::new(&a * a.transpose() + DMatrix::identity(p.n_s(), p.n_s())).unwrap();
        let step = local_step(p, &DVector::zeros(p.n_s()), &s_star, &sigma).unwrap();
        assert_relative_eq!(step.xi_u, u_star, epsilon = 1e-8);
        assert_relative_eq!(step.xi_s, s_star, epsilon = 1e-8);
    }

    #[test]
    fn single_building_with_slack_band_converges_in_one_iteration() {
        let (_, _, problems) = small_fleet(3, 1, 80, 0.5);
        let config = AladinConfig {
            epsilon: 1e-8,
            ..AladinConfig::default()
        };
        let solution = solve(&problems, &config, None).unwrap();
        assert_eq!(solution.iterations, 1);
        assert!(solution.trace.final_residual().unwrap() <= 1e-8);
    }

    #[test]
    fn two_buildings_match_the_centralized_reference() {
        let (_, _, problems) = small_fleet(4, 2, 100, 0.02);
        let config = AladinConfig {
            epsilon: 1e-8,
            max_iter: 5000,
            sigma_mode: SigmaMode::Identity,
        };
        let solution = solve(&problems, &config, None).unwrap();
        let central = assemble_centralized(&problems).unwrap().solve().unwrap();

        for i in 0..2 {
            assert!(
                (&solution.u[i] - &central.u[i]).amax() <= 1e-6,
                "building {i} inputs differ by {}",
                (&solution.u[i] - &central.u[i]).amax()
            );
        }
        assert_relative_eq!(
            solution.objective,
            central.objective,
            epsilon = 1e-8,
            max_relative = 1e-6
        );
        assert!(
            (&solution.lambda - &central.lambda).amax() <= 1e-4,
            "price differs from the centralized multiplier by {}",
            (&solution.lambda - &central.lambda).amax()
        );
    }

    #[test]
    fn residuals_trend_downward() {
        let (_, _, problems) = small_fleet(4, 3, 140, 0.02);
        let config = AladinConfig {
            epsilon: 1e-7,
            max_iter: 5000,
            sigma_mode: SigmaMode::Identity,
        };
        let solution = solve(&problems, &config, None).unwrap();
        let residuals = solution.trace.residuals();
        assert!(residuals.last().unwrap() <= residuals.first().unwrap());
        let mut consecutive = 0;
        let mut worst = 0;
        for w in residuals.windows(2) {
            if w[1] > w[0] {
                consecutive += 1;
                worst = worst.max(consecutive);
            } else {
                consecutive = 0;
            }
        }
        assert!(worst <= 3, "{worst} consecutive residual increases");
    }

    #[test]
    fn zero_sum_holds_after_every_round() {
        let (_, _, problems) = small_fleet(3, 3, 160, 0.02);
        let mut state = ConsensusState::cold(&problems, SigmaMode::Identity).unwrap();
        for _ in 0..10 {
            let steps: Vec<LocalStep> = problems
                .iter()
                .zip(&state.s)
                .zip(&state.sigma)
                .map(|((p, s_i), sg)| local_step(p, &state.lambda, s_i, sg).unwrap())
                .collect();
            let xi_s: Vec<_> = steps.iter().map(|st| st.xi_s.clone()).collect();
            let update = consensus_step(&xi_s, &state.s, &state.sigma);
            state.s = update.s_plus;
            state.lambda += update.delta_lambda;
            assert!(state.share_sum().amax() <= 1e-10);
        }
    }

    #[test]
    fn warm_start_shifts_the_window_state() {
        let (_, _, problems) = small_fleet(4, 2, 100, 0.05);
        let s = vec![
            dvec(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]),
            dvec(&[-1.0, -2.0, -3.0, -4.0, -5.0, -6.0, -7.0, -8.0]),
        ];
        let lambda = dvec(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        let state = warm_start(&problems, &s, &lambda).unwrap();
        assert_relative_eq!(
            state.s[0],
            dvec(&[3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 0.0, 0.0]),
            epsilon = 1e-14
        );
        assert_relative_eq!(
            state.lambda,
            dvec(&[0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.0, 0.0]),
            epsilon = 1e-14
        );
        assert!(state.share_sum().amax() <= 1e-14);
        assert_eq!(state.sigma.len(), 2);
        // Building 0's previous shares relax every row, so its curvature is
        // the bare penalty; building 1's are infeasible and fall back to
        // the unit scaling.
        assert_relative_eq!(
            state.sigma[0].mat(),
            &(DMatrix::identity(8, 8) * 0.2),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            state.sigma[1].mat(),
            &DMatrix::identity(8, 8),
            epsilon = 1e-14
        );
    }

    #[test]
    fn curvature_scaled_restart_reconverges_within_two_iterations() {
        let (_, _, problems) = small_fleet(4, 2, 100, 0.02);
        let config = AladinConfig {
            epsilon: 1e-10,
            max_iter: 5000,
            sigma_mode: SigmaMode::Identity,
        };
        let first = solve(&problems, &config, None).unwrap();

        // Nudge the optimum without leaving its active-set region, keep the
        // price slightly stale, and scale by the share curvature there: the
        // first coordinator round lands back on the optimum exactly and the
        // second parallel round certifies it.
        let n_s = problems[0].n_s();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = DVector::from_fn(n_s, |_, _| rng.random_range(-1e-4..1e-4));
        let s = vec![&first.s[0] + &noise, &first.s[1] - &noise];
        let lambda = &first.lambda + DVector::from_element(n_s, 2e-4);
        let sigma = curvature_scalings(&problems, &s).unwrap();
        for sg in &sigma {
            assert!(
                (sg.mat() - DMatrix::identity(n_s, n_s)).amax() > 1e-12,
                "restart point must be feasible so the curvature is used"
            );
        }
        let state = ConsensusState {
            s,
            lambda,
            sigma,
            iteration: 0,
        };
        let warm_config = AladinConfig {
            epsilon: 1e-5,
            max_iter: 50,
            sigma_mode: SigmaMode::ExactHessianWarmStart,
        };
        let second = solve(&problems, &warm_config, Some(state)).unwrap();
        assert!(
            second.iterations <= 2,
            "curvature-scaled restart took {} iterations",
            second.iterations
        );
        for i in 0..2 {
            assert!((&second.u[i] - &first.u[i]).amax() <= 1e-6);
        }
    }

    #[test]
    fn online_rounds_match_the_offline_composition() {
        let (_, _, problems) = small_fleet(3, 2, 120, 0.02);
        let state = ConsensusState::cold(&problems, SigmaMode::Identity).unwrap();

        let mut online = OnlineState::start(state.clone());
        online = online_step(&problems, &online).unwrap();
        online = online_step(&problems, &online).unwrap();

        // Offline: parallel stage, coordinator stage, parallel stage.
        let steps1: Vec<LocalStep> = problems
            .iter()
            .zip(&state.s)
            .zip(&state.sigma)
            .map(|((p, s_i), sg)| local_step(p, &state.lambda, s_i, sg).unwrap())
            .collect();
        let xi1: Vec<_> = steps1.iter().map(|st| st.xi_s.clone()).collect();
        let update = consensus_step(&xi1, &state.s, &state.sigma);
        let lambda2 = &state.lambda + &update.delta_lambda;
        let steps2: Vec<LocalStep> = problems
            .iter()
            .zip(&update.s_plus)
            .zip(&state.sigma)
            .map(|((p, s_i), sg)| local_step(p, &lambda2, s_i, sg).unwrap())
            .collect();

        assert_relative_eq!(online.state.lambda, lambda2, epsilon = 1e-12);
        for i in 0..2 {
            assert_relative_eq!(online.state.s[i], update.s_plus[i], epsilon = 1e-12);
            assert_relative_eq!(online.xi_s[i], steps2[i].xi_s, epsilon = 1e-12);
        }
    }

    #[test]
    fn online_rounds_hold_still_at_the_optimum() {
        let (_, _, problems) = small_fleet(3, 2, 120, 0.02);
        let config = AladinConfig {
            epsilon: 1e-11,
            max_iter: 10000,
            sigma_mode: SigmaMode::Identity,
        };
        let solution = solve(&problems, &config, None).unwrap();

        let sigma: Vec<Scaling> = problems.iter().map(|p| Scaling::identity(p.n_s())).collect();
        let state = ConsensusState {
            s: solution.s.clone(),
            lambda: solution.lambda.clone(),
            sigma,
            iteration: 0,
        };
        let online = online_step(&problems, &OnlineState::start(state)).unwrap();
        for i in 0..2 {
            assert!(
                (&online.state.s[i] - &solution.s[i]).amax() <= 1e-10,
                "shares drifted by {}",
                (&online.state.s[i] - &solution.s[i]).amax()
            );
        }
        assert!(online.delta_lambda.amax() <= 1e-9);
        assert!(online.residual_s <= 1e-9);
    }

    #[test]
    fn byte_accounting_is_two_floats_per_step_each_way() {
        let (_, _, problems) = small_fleet(3, 2, 120, 0.05);
        let config = AladinConfig {
            epsilon: 1e-6,
            max_iter: 3000,
            sigma_mode: SigmaMode::Identity,
        };
        let solution = solve(&problems, &config, None).unwrap();
        for r in &solution.trace.records {
            assert_eq!(r.bytes_up, 2 * 6 * 8);
            assert_eq!(r.bytes_down, 6 * 8);
        }
    }
}
