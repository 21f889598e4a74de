//! Band-share reformulation of the fleet problem.
//!
//! The fleet couples only through the feeder voltage
//!
//! ```text
//! v_k = sum_i g_i (f_i . u_{i,k}) + vt_k,      v_lo <= v_k <= v_hi,
//! ```
//!
//! where `vt_k` is the predicted uncontrolled voltage. Splitting each band
//! residual evenly and introducing per-building shares `s_i` (two entries per
//! step, one for each side of the band) turns the band into decoupled rows
//!
//! ```text
//! (vt_k - v_hi)/M + g_i f_i.u_{i,k} - s_{i,k,hi} <= 0
//! (v_lo - vt_k)/M - g_i f_i.u_{i,k} - s_{i,k,lo} <= 0
//! ```
//!
//! plus one zero-sum constraint `sum_i s_i = 0` across the fleet. A building
//! is then a decoupled QP in `z_i = (u_i, s_i)` with cost
//!
//! ```text
//! F_i(z_i) = u_i' H_i u_i + 2 h_i' u_i + price' u_i + mu |s_i|^2,
//! ```
//!
//! the share regularization `mu > 0` making the fleet optimum unique in `s`
//! while leaving the input trajectories of the unregularized problem intact
//! up to a gap that shrinks linearly with `mu`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{BuildingModel, CondensedQp, ModelError};
use crate::qp::{self, QpError};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("share regularization mu must be positive, got {0}")]
    InvalidMu(f64),
    #[error("building index {index} out of range for a fleet of {fleet}")]
    BadIndex { index: usize, fleet: usize },
    #[error("voltage band is empty: v_lo {v_lo} > v_hi {v_hi}")]
    EmptyBand { v_lo: f64, v_hi: f64 },
}

/// Grid-side data shared by the fleet: per-building injection maps and
/// sensitivities, the uncontrolled voltage profile, the band and the price.
#[derive(Debug, Clone)]
pub struct CouplingData {
    /// Voltage sensitivity of each building (p.u. per power unit).
    pub g: Vec<f64>,
    /// Power-injection row map of each building.
    pub f: Vec<DVector<f64>>,
    /// Predicted uncontrolled voltage, one entry per horizon step.
    pub v_tilde: DVector<f64>,
    pub v_min: f64,
    pub v_max: f64,
    /// Energy price per horizon step, applied to each building's injection.
    pub price: DVector<f64>,
}

impl CouplingData {
    pub fn building_count(&self) -> usize {
        self.g.len()
    }

    pub fn horizon(&self) -> usize {
        self.v_tilde.len()
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        if self.f.len() != self.g.len() {
            return Err(ProblemError::Dimension {
                context: "coupling maps",
                expected: self.g.len(),
                got: self.f.len(),
            });
        }
        if self.price.len() != self.v_tilde.len() {
            return Err(ProblemError::Dimension {
                context: "price profile",
                expected: self.v_tilde.len(),
                got: self.price.len(),
            });
        }
        if self.v_min > self.v_max {
            return Err(ProblemError::EmptyBand {
                v_lo: self.v_min,
                v_hi: self.v_max,
            });
        }
        Ok(())
    }

    /// Collects `g` and `f` from a fleet of models.
    pub fn from_models(
        models: &[BuildingModel],
        v_tilde: DVector<f64>,
        v_min: f64,
        v_max: f64,
        price: DVector<f64>,
    ) -> Result<Self, ProblemError> {
        let data = CouplingData {
            g: models.iter().map(|m| m.g).collect(),
            f: models.iter().map(|m| m.f.clone()).collect(),
            v_tilde,
            v_min,
            v_max,
            price,
        };
        data.validate()?;
        Ok(data)
    }

    /// Feeder voltage at each step for the given fleet input trajectories.
    pub fn voltage(&self, u: &[DVector<f64>]) -> DVector<f64> {
        let n = self.horizon();
        let mut v = self.v_tilde.clone();
        for (i, u_i) in u.iter().enumerate() {
            let n_u = self.f[i].len();
            for k in 0..n {
                v[k] += self.g[i] * self.f[i].dot(&u_i.rows(k * n_u, n_u).clone_owned());
            }
        }
        v
    }
}

/// One building's decoupled problem over `z = (u, s)`.
///
/// Row layout of the feasible set `A_z z <= b_z`: first the `2N(n_y + n_u)`
/// stacked box rows of the condensed QP, then the `2N` band-share rows in
/// step order, upper side before lower side. Active-set indices used across
/// the crate refer to this layout.
#[derive(Debug, Clone)]
pub struct LocalProblem {
    /// Position of this building in the fleet.
    pub index: usize,
    /// Fleet size the share rows were built for.
    pub fleet_size: usize,
    pub qp: CondensedQp,
    /// `u`-coefficients of the band-share rows, `2N x (N n_u)`.
    pub coupling_mat: DMatrix<f64>,
    /// Offsets of the band-share rows.
    pub coupling_rhs: DVector<f64>,
    /// Gradient of the energy cost on the stacked inputs.
    pub price_lin: DVector<f64>,
    /// Share regularization weight.
    pub mu: f64,
}

impl LocalProblem {
    pub fn horizon(&self) -> usize {
        self.qp.horizon
    }

    /// Length of the share vector, two entries per step.
    pub fn n_s(&self) -> usize {
        2 * self.qp.horizon
    }

    /// Length of the stacked input trajectory.
    pub fn n_u_traj(&self) -> usize {
        self.qp.n_vars()
    }

    /// Total decision dimension of `z = (u, s)`.
    pub fn n_z(&self) -> usize {
        self.n_u_traj() + self.n_s()
    }

    /// Total inequality rows over `z`.
    pub fn n_rows(&self) -> usize {
        self.qp.n_rows() + self.n_s()
    }

    /// Cost of a `(u, s)` pair (constant term excluded).
    pub fn objective(&self, u: &DVector<f64>, s: &DVector<f64>) -> f64 {
        self.qp.cost(u) + self.price_lin.dot(u) + self.mu * s.norm_squared()
    }

    /// Quadratic coefficient matrix over `z` in the crate's `z' H z + 2 h' z`
    /// convention: block-diagonal of the condensed `H` and `mu I`.
    pub fn hess_z(&self) -> DMatrix<f64> {
        let (n_u, n_s) = (self.n_u_traj(), self.n_s());
        let mut hess = DMatrix::<f64>::zeros(n_u + n_s, n_u + n_s);
        hess.view_mut((0, 0), (n_u, n_u)).copy_from(&self.qp.hess);
        for j in 0..n_s {
            hess[(n_u + j, n_u + j)] = self.mu;
        }
        hess
    }

    /// Linear coefficient over `z` in the same convention.
    pub fn lin_z(&self) -> DVector<f64> {
        let (n_u, n_s) = (self.n_u_traj(), self.n_s());
        let mut lin = DVector::<f64>::zeros(n_u + n_s);
        lin.rows_mut(0, n_u)
            .copy_from(&(&self.qp.lin + &self.price_lin * 0.5));
        lin
    }

    /// Full inequality rows over `z`: `[E 0; C -I] z <= [e; d]`.
    pub fn rows_z(&self) -> (DMatrix<f64>, DVector<f64>) {
        let (n_u, n_s) = (self.n_u_traj(), self.n_s());
        let m_box = self.qp.n_rows();
        let mut a = DMatrix::<f64>::zeros(m_box + n_s, n_u + n_s);
        a.view_mut((0, 0), (m_box, n_u)).copy_from(&self.qp.ineq);
        a.view_mut((m_box, 0), (n_s, n_u))
            .copy_from(&self.coupling_mat);
        for j in 0..n_s {
            a[(m_box + j, n_u + j)] = -1.0;
        }
        let mut b = DVector::<f64>::zeros(m_box + n_s);
        b.rows_mut(0, m_box).copy_from(&self.qp.ineq_rhs);
        b.rows_mut(m_box, n_s).copy_from(&self.coupling_rhs);
        (a, b)
    }

    /// The smallest share vector compatible with a given input trajectory:
    /// `s >= share_floor(u)` componentwise is exactly the band-share rows.
    pub fn share_floor(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.coupling_mat * u - &self.coupling_rhs
    }

    /// Splits a stacked `z` into `(u, s)`.
    pub fn split_z(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (
            z.rows(0, self.n_u_traj()).clone_owned(),
            z.rows(self.n_u_traj(), self.n_s()).clone_owned(),
        )
    }

    /// True if `(u, s)` satisfies every row within `tol`.
    pub fn is_feasible(&self, u: &DVector<f64>, s: &DVector<f64>, tol: f64) -> bool {
        let box_slack = &self.qp.ineq_rhs - &self.qp.ineq * u;
        let share_slack = s - self.share_floor(u);
        box_slack.iter().all(|&v| v >= -tol) && share_slack.iter().all(|&v| v >= -tol)
    }
}

/// Builds building `index`'s decoupled problem for the given state and
/// disturbance window.
pub fn build_local(
    model: &BuildingModel,
    x_hat: &DVector<f64>,
    w: &[DVector<f64>],
    coupling: &CouplingData,
    index: usize,
    mu: f64,
) -> Result<LocalProblem, ProblemError> {
    coupling.validate()?;
    if mu <= 0.0 {
        return Err(ProblemError::InvalidMu(mu));
    }
    let fleet = coupling.building_count();
    if index >= fleet {
        return Err(ProblemError::BadIndex {
            index,
            fleet,
        });
    }
    let n = coupling.horizon();
    let qp = model.condense(x_hat, w, n)?;
    let n_u = model.n_u();
    if coupling.f[index].len() != n_u {
        return Err(ProblemError::Dimension {
            context: "injection map",
            expected: n_u,
            got: coupling.f[index].len(),
        });
    }

    let m = fleet as f64;
    let g_f = &coupling.f[index] * coupling.g[index];
    let mut coupling_mat = DMatrix::<f64>::zeros(2 * n, n * n_u);
    let mut coupling_rhs = DVector::<f64>::zeros(2 * n);
    for k in 0..n {
        for j in 0..n_u {
            coupling_mat[(2 * k, k * n_u + j)] = g_f[j];
            coupling_mat[(2 * k + 1, k * n_u + j)] = -g_f[j];
        }
        coupling_rhs[2 * k] = (coupling.v_max - coupling.v_tilde[k]) / m;
        coupling_rhs[2 * k + 1] = (coupling.v_tilde[k] - coupling.v_min) / m;
    }

    let mut price_lin = DVector::<f64>::zeros(n * n_u);
    for k in 0..n {
        for j in 0..n_u {
            price_lin[k * n_u + j] = coupling.price[k] * coupling.f[index][j];
        }
    }

    Ok(LocalProblem {
        index,
        fleet_size: fleet,
        qp,
        coupling_mat,
        coupling_rhs,
        price_lin,
        mu,
    })
}

/// Balanced band shares for given input trajectories: each building keeps
/// its own contribution minus the fleet average, so the shares sum to zero
/// and satisfy every share row exactly when the voltage stays in the band.
pub fn recover_s(u: &[DVector<f64>], coupling: &CouplingData) -> Vec<DVector<f64>> {
    let n = coupling.horizon();
    let fleet = coupling.building_count();
    let mut injections = vec![DVector::<f64>::zeros(n); fleet];
    for (i, u_i) in u.iter().enumerate() {
        let n_u = coupling.f[i].len();
        for k in 0..n {
            injections[i][k] =
                coupling.g[i] * coupling.f[i].dot(&u_i.rows(k * n_u, n_u).clone_owned());
        }
    }
    let mut mean = DVector::<f64>::zeros(n);
    for inj in &injections {
        mean += inj;
    }
    mean /= fleet as f64;

    (0..fleet)
        .map(|i| {
            let mut s = DVector::<f64>::zeros(2 * n);
            for k in 0..n {
                s[2 * k] = injections[i][k] - mean[k];
                s[2 * k + 1] = -injections[i][k] + mean[k];
            }
            s
        })
        .collect()
}

/// The fleet problem assembled as one QP over the stacked `(z_1, ..., z_M)`
/// with the zero-sum rows as explicit equality constraints. Serves as the
/// reference the distributed solvers are checked against.
#[derive(Debug, Clone)]
pub struct CentralizedProblem {
    pub hess: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub ineq: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub eq: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    /// Per-building `(n_u_traj, n_s)` in stacking order.
    pub layout: Vec<(usize, usize)>,
    /// Per-building row counts of the inequality blocks.
    pub row_layout: Vec<usize>,
}

/// Solution of the assembled fleet QP, split back per building.
#[derive(Debug, Clone)]
pub struct CentralizedSolution {
    pub u: Vec<DVector<f64>>,
    pub s: Vec<DVector<f64>>,
    /// Multiplier of the zero-sum rows in the convention
    /// `grad F_i(s_i) + lambda = 0` at the optimum.
    pub lambda: DVector<f64>,
    pub objective: f64,
    /// Active inequality rows per building, in local row numbering.
    pub active_sets: Vec<Vec<usize>>,
    pub kkt_residual: f64,
}

/// Stacks the decoupled problems into the centralized reference QP.
pub fn assemble_centralized(problems: &[LocalProblem]) -> Result<CentralizedProblem, ProblemError> {
    let fleet = problems.len();
    if fleet == 0 {
        return Err(ProblemError::Dimension {
            context: "fleet",
            expected: 1,
            got: 0,
        });
    }
    let n_s = problems[0].n_s();
    for p in problems {
        if p.n_s() != n_s {
            return Err(ProblemError::Dimension {
                context: "share lengths",
                expected: n_s,
                got: p.n_s(),
            });
        }
    }
    let n_total: usize = problems.iter().map(|p| p.n_z()).sum();
    let m_total: usize = problems.iter().map(|p| p.n_rows()).sum();

    let mut hess = DMatrix::<f64>::zeros(n_total, n_total);
    let mut lin = DVector::<f64>::zeros(n_total);
    let mut ineq = DMatrix::<f64>::zeros(m_total, n_total);
    let mut ineq_rhs = DVector::<f64>::zeros(m_total);
    let mut eq = DMatrix::<f64>::zeros(n_s, n_total);
    let eq_rhs = DVector::<f64>::zeros(n_s);

    let mut col = 0;
    let mut row = 0;
    let mut layout = Vec::with_capacity(fleet);
    let mut row_layout = Vec::with_capacity(fleet);
    for p in problems {
        let n_z = p.n_z();
        let m_z = p.n_rows();
        hess.view_mut((col, col), (n_z, n_z)).copy_from(&p.hess_z());
        lin.rows_mut(col, n_z).copy_from(&p.lin_z());
        let (a, b) = p.rows_z();
        ineq.view_mut((row, col), (m_z, n_z)).copy_from(&a);
        ineq_rhs.rows_mut(row, m_z).copy_from(&b);
        for j in 0..n_s {
            eq[(j, col + p.n_u_traj() + j)] = 1.0;
        }
        layout.push((p.n_u_traj(), p.n_s()));
        row_layout.push(m_z);
        col += n_z;
        row += m_z;
    }

    Ok(CentralizedProblem {
        hess,
        lin,
        ineq,
        ineq_rhs,
        eq,
        eq_rhs,
        layout,
        row_layout,
    })
}

impl CentralizedProblem {
    pub fn n_vars(&self) -> usize {
        self.hess.nrows()
    }

    pub fn n_ineq(&self) -> usize {
        self.ineq.nrows()
    }

    /// Solves the assembled QP and splits the result per building.
    pub fn solve(&self) -> Result<CentralizedSolution, QpError> {
        let sol = qp::solve_qp(
            &self.hess,
            &self.lin,
            &self.ineq,
            &self.ineq_rhs,
            Some((&self.eq, &self.eq_rhs)),
        )?;
        let mut u = Vec::with_capacity(self.layout.len());
        let mut s = Vec::with_capacity(self.layout.len());
        let mut active_sets = Vec::with_capacity(self.layout.len());
        let mut col = 0;
        let mut row = 0;
        for ((n_u, n_s), &m_z) in self.layout.iter().zip(self.row_layout.iter()) {
            u.push(sol.z.rows(col, *n_u).clone_owned());
            s.push(sol.z.rows(col + n_u, *n_s).clone_owned());
            active_sets.push(
                sol.active_set
                    .iter()
                    .filter(|&&j| j >= row && j < row + m_z)
                    .map(|&j| j - row)
                    .collect(),
            );
            col += n_u + n_s;
            row += m_z;
        }
        Ok(CentralizedSolution {
            u,
            s,
            lambda: sol.eq_duals.clone(),
            objective: sol.objective,
            active_sets,
            kkt_residual: sol.kkt_residual,
        })
    }
}

/// The fleet problem with the shares eliminated: one QP over the stacked
/// inputs with the voltage band imposed on the aggregate injection. Used as
/// the share-free reference (and as the exact `mu -> 0` limit).
#[derive(Debug, Clone)]
pub struct DirectProblem {
    pub hess: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub ineq: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub layout: Vec<usize>,
}

/// Assembles the share-free fleet QP from the same decoupled data.
pub fn assemble_direct(
    problems: &[LocalProblem],
    coupling: &CouplingData,
) -> Result<DirectProblem, ProblemError> {
    let fleet = problems.len();
    if fleet != coupling.building_count() {
        return Err(ProblemError::Dimension {
            context: "fleet size",
            expected: coupling.building_count(),
            got: fleet,
        });
    }
    let n = coupling.horizon();
    let n_total: usize = problems.iter().map(|p| p.n_u_traj()).sum();
    let m_box: usize = problems.iter().map(|p| p.qp.n_rows()).sum();

    let mut hess = DMatrix::<f64>::zeros(n_total, n_total);
    let mut lin = DVector::<f64>::zeros(n_total);
    let mut ineq = DMatrix::<f64>::zeros(m_box + 2 * n, n_total);
    let mut ineq_rhs = DVector::<f64>::zeros(m_box + 2 * n);

    let mut col = 0;
    let mut row = 0;
    let mut layout = Vec::with_capacity(fleet);
    for (i, p) in problems.iter().enumerate() {
        let n_u_traj = p.n_u_traj();
        let n_u = coupling.f[i].len();
        hess.view_mut((col, col), (n_u_traj, n_u_traj))
            .copy_from(&p.qp.hess);
        lin.rows_mut(col, n_u_traj)
            .copy_from(&(&p.qp.lin + &p.price_lin * 0.5));
        ineq.view_mut((row, col), (p.qp.n_rows(), n_u_traj))
            .copy_from(&p.qp.ineq);
        ineq_rhs
            .rows_mut(row, p.qp.n_rows())
            .copy_from(&p.qp.ineq_rhs);
        let g_f = &coupling.f[i] * coupling.g[i];
        for k in 0..n {
            for j in 0..n_u {
                ineq[(m_box + 2 * k, col + k * n_u + j)] = g_f[j];
                ineq[(m_box + 2 * k + 1, col + k * n_u + j)] = -g_f[j];
            }
        }
        layout.push(n_u_traj);
        col += n_u_traj;
        row += p.qp.n_rows();
    }
    for k in 0..n {
        ineq_rhs[m_box + 2 * k] = coupling.v_max - coupling.v_tilde[k];
        ineq_rhs[m_box + 2 * k + 1] = coupling.v_tilde[k] - coupling.v_min;
    }

    Ok(DirectProblem {
        hess,
        lin,
        ineq,
        ineq_rhs,
        layout,
    })
}

impl DirectProblem {
    /// Solves the share-free QP and splits the inputs per building.
    pub fn solve(&self) -> Result<(Vec<DVector<f64>>, f64), QpError> {
        let sol = qp::solve_qp(&self.hess, &self.lin, &self.ineq, &self.ineq_rhs, None)?;
        let mut u = Vec::with_capacity(self.layout.len());
        let mut col = 0;
        for &n_u_traj in &self.layout {
            u.push(sol.z.rows(col, n_u_traj).clone_owned());
            col += n_u_traj;
        }
        Ok((u, sol.objective))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{synth_building, BuildingKind};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn flat_coupling(
        models: &[BuildingModel],
        n: usize,
        v_min: f64,
        v_max: f64,
        v_tilde: f64,
        price: f64,
    ) -> CouplingData {
        CouplingData::from_models(
            models,
            DVector::from_element(n, v_tilde),
            v_min,
            v_max,
            DVector::from_element(n, price),
        )
        .unwrap()
    }

    fn small_fleet(n: usize, fleet: usize, seed: u64) -> (Vec<BuildingModel>, CouplingData) {
        let models: Vec<_> = (0..fleet)
            .map(|i| synth_building(BuildingKind::Small, seed + i as u64))
            .collect();
        let coupling = flat_coupling(&models, n, 0.95, 1.05, 1.0, 1.0);
        (models, coupling)
    }

    fn build_fleet(
        models: &[BuildingModel],
        coupling: &CouplingData,
        mu: f64,
    ) -> Vec<LocalProblem> {
        models
            .iter()
            .enumerate()
            .map(|(i, m)| {
                build_local(
                    m,
                    &DVector::zeros(m.n_x()),
                    &vec![DVector::zeros(m.n_x()); coupling.horizon()],
                    coupling,
                    i,
                    mu,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn dimensions_match_the_reference_fleet() {
        let n = 14;
        let large = synth_building(BuildingKind::Large, 1);
        let middle = synth_building(BuildingKind::Middle, 2);
        let small = synth_building(BuildingKind::Small, 3);
        let models = vec![large, middle, small];
        let coupling = flat_coupling(&models, n, 0.95, 1.05, 1.0, 1.0);
        let problems = build_fleet(&models, &coupling, 0.1);
        assert_eq!(problems[0].n_z(), 280);
        assert_eq!(problems[0].n_rows(), 1036);
        assert_eq!(problems[1].n_z(), 98);
        assert_eq!(problems[1].n_rows(), 308);
        assert_eq!(problems[2].n_z(), 70);
        assert_eq!(problems[2].n_rows(), 196);
    }

    #[test]
    fn recovered_shares_sum_to_zero_and_certify_the_band() {
        let n = 4;
        let (models, coupling) = small_fleet(n, 3, 50);
        let problems = build_fleet(&models, &coupling, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..40 {
            let u: Vec<_> = models
                .iter()
                .map(|m| DVector::from_fn(n * m.n_u(), |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            let shares = recover_s(&u, &coupling);

            let mut total = DVector::<f64>::zeros(2 * n);
            for s in &shares {
                total += s;
            }
            assert!(total.amax() <= 1e-12, "shares must sum to zero");

            let v = coupling.voltage(&u);
            let in_band = (0..n)
                .all(|k| v[k] >= coupling.v_min - 1e-12 && v[k] <= coupling.v_max + 1e-12);
            let rows_ok = problems
                .iter()
                .zip(shares.iter())
                .zip(u.iter())
                .all(|((p, s), u_i)| {
                    let slack = s - p.share_floor(u_i);
                    slack.iter().all(|&x| x >= -1e-12)
                });
            assert_eq!(in_band, rows_ok, "share rows must certify exactly the band");
        }
    }

    #[test]
    fn share_rows_place_coefficients_per_step() {
        let n = 3;
        let (models, coupling) = small_fleet(n, 2, 7);
        let p = &build_fleet(&models, &coupling, 0.1)[0];
        let n_u = models[0].n_u();
        let g_f = &coupling.f[0] * coupling.g[0];
        for k in 0..n {
            for j in 0..n_u {
                assert_relative_eq!(p.coupling_mat[(2 * k, k * n_u + j)], g_f[j]);
                assert_relative_eq!(p.coupling_mat[(2 * k + 1, k * n_u + j)], -g_f[j]);
            }
            assert_relative_eq!(
                p.coupling_rhs[2 * k],
                (coupling.v_max - coupling.v_tilde[k]) / 2.0
            );
            assert_relative_eq!(
                p.coupling_rhs[2 * k + 1],
                (coupling.v_tilde[k] - coupling.v_min) / 2.0
            );
        }
    }

    #[test]
    fn centralized_assembly_dimensions() {
        let n = 4;
        let (models, coupling) = small_fleet(n, 3, 21);
        let problems = build_fleet(&models, &coupling, 0.1);
        let central = assemble_centralized(&problems).unwrap();
        let n_z: usize = problems.iter().map(|p| p.n_z()).sum();
        let m: usize = problems.iter().map(|p| p.n_rows()).sum();
        assert_eq!(central.n_vars(), n_z);
        assert_eq!(central.n_ineq(), m);
        assert_eq!(central.eq.nrows(), 2 * n);
        // Each zero-sum row picks the same share coordinate of every building.
        for j in 0..2 * n {
            let row_sum: f64 = central.eq.row(j).iter().sum();
            assert_relative_eq!(row_sum, problems.len() as f64);
        }
    }

    #[test]
    fn build_local_rejects_bad_inputs() {
        let (models, coupling) = small_fleet(3, 2, 5);
        let w = vec![DVector::zeros(models[0].n_x()); 3];
        let x0 = DVector::zeros(models[0].n_x());
        assert!(matches!(
            build_local(&models[0], &x0, &w, &coupling, 0, 0.0),
            Err(ProblemError::InvalidMu(_))
        ));
        assert!(matches!(
            build_local(&models[0], &x0, &w, &coupling, 5, 0.1),
            Err(ProblemError::BadIndex { .. })
        ));
    }
}
