//! Dense strictly convex quadratic programming.
//!
//! Solves
//!
//! ```text
//! minimize    z' H z + 2 h' z
//! subject to  E z <= e,    A z = b
//! ```
//!
//! with the dual active-set method of Goldfarb and Idnani, starting from the
//! unconstrained minimizer and adding violated rows one at a time while
//! keeping dual feasibility. The factored inverse Cholesky basis is updated
//! by Givens rotations as rows enter and leave the working set, so each
//! added row costs a few matrix-vector products.
//!
//! Multipliers follow the stationarity convention
//!
//! ```text
//! 2 H z + 2 h + E' nu + A' lambda = 0,    nu >= 0,
//! ```
//!
//! matching the crate-wide quadratic form `z' H z + 2 h' z` whose gradient is
//! `2 H z + 2 h`. The reported objective excludes constant terms.
//!
//! The module also evaluates the share value function of a
//! [`LocalProblem`]: the building's optimal cost as a function of its band
//! shares. That function is piecewise quadratic; [`eval_psi`] returns its
//! value and exact gradient, and [`local_hessian`] returns the curvature of
//! the current piece in the crate's quadratic convention (the second
//! derivative of the value function is twice the returned matrix, just as
//! the second derivative of `z' H z` is `2 H`).

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::problem::LocalProblem;

/// Rows whose slack is at most this are reported as active.
pub const ACTIVE_SET_TOL: f64 = 1e-7;

/// Residual the solver aims for; solutions above it get a refinement pass.
const KKT_TARGET: f64 = 1e-10;

/// Relative pivot threshold deciding when a candidate row is dependent on
/// the working set.
const DEPENDENT_TOL: f64 = 1e-26;

/// Relative pivot threshold for pruning active rows when building the share
/// curvature.
const PIVOT_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("quadratic coefficient matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("iteration limit reached after {0} active-set changes")]
    MaxIterations(usize),
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Minimizer of a strictly convex QP together with its certificates.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Inequality multipliers, nonnegative.
    pub duals: DVector<f64>,
    /// Equality multipliers, free sign.
    pub eq_duals: DVector<f64>,
    /// Inequality rows with slack at most [`ACTIVE_SET_TOL`], ascending.
    pub active_set: Vec<usize>,
    /// `z' H z + 2 h' z` at the minimizer.
    pub objective: f64,
    /// Largest stationarity, feasibility, sign or complementarity violation.
    pub kkt_residual: f64,
    /// Number of rows added to the working set over the whole run.
    pub iterations: usize,
}

/// Reusable Cholesky data for a fixed quadratic coefficient matrix.
///
/// The distributed solvers call the QP repeatedly with the same `H` and a
/// changing linear term; factoring once and reusing the inverse transpose
/// basis skips the cubic setup cost on every call after the first.
#[derive(Debug, Clone)]
pub struct QpFactor {
    hess: DMatrix<f64>,
    /// Inverse transpose of the Cholesky factor of `2 H`, column major.
    inv_t: DMatrix<f64>,
}

impl QpFactor {
    pub fn new(hess: &DMatrix<f64>) -> Result<Self, QpError> {
        let n = hess.nrows();
        if hess.ncols() != n {
            return Err(QpError::Dimension {
                context: "quadratic coefficients",
                expected: n,
                got: hess.ncols(),
            });
        }
        let chol = Cholesky::new(hess * 2.0).ok_or(QpError::NotPositiveDefinite)?;
        let inv_l = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or(QpError::NotPositiveDefinite)?;
        Ok(QpFactor {
            hess: hess.clone(),
            inv_t: inv_l.transpose(),
        })
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hess
    }

    pub fn n(&self) -> usize {
        self.hess.nrows()
    }
}

/// Solves the QP, factoring the quadratic coefficients first.
pub fn solve_qp(
    hess: &DMatrix<f64>,
    lin: &DVector<f64>,
    ineq: &DMatrix<f64>,
    ineq_rhs: &DVector<f64>,
    eq: Option<(&DMatrix<f64>, &DVector<f64>)>,
) -> Result<QpSolution, QpError> {
    let factor = QpFactor::new(hess)?;
    solve_with_factor(&factor, lin, ineq, ineq_rhs, eq)
}

/// Solves the QP reusing an existing factorization of its quadratic part.
pub fn solve_with_factor(
    factor: &QpFactor,
    lin: &DVector<f64>,
    ineq: &DMatrix<f64>,
    ineq_rhs: &DVector<f64>,
    eq: Option<(&DMatrix<f64>, &DVector<f64>)>,
) -> Result<QpSolution, QpError> {
    let n = factor.n();
    check_dims(n, lin, ineq, ineq_rhs, eq)?;
    let p = eq.map_or(0, |(a, _)| a.nrows());
    let m = ineq.nrows();
    let q = p + m;

    // Constraint list with equality rows first.
    let mut rows = DMatrix::<f64>::zeros(q, n);
    let mut rhs = DVector::<f64>::zeros(q);
    if let Some((a, b)) = eq {
        rows.view_mut((0, 0), (p, n)).copy_from(a);
        rhs.rows_mut(0, p).copy_from(b);
    }
    if m > 0 {
        rows.view_mut((p, 0), (m, n)).copy_from(ineq);
        rhs.rows_mut(p, m).copy_from(ineq_rhs);
    }
    let row_norms: Vec<f64> = (0..q)
        .map(|j| rows.row(j).norm().max(f64::MIN_POSITIVE))
        .collect();

    // Unconstrained minimizer of z' H z + 2 h' z.
    let mut x = -(&factor.inv_t * (factor.inv_t.transpose() * (lin * 2.0)));

    let mut jmat: Vec<f64> = factor.inv_t.as_slice().to_vec();
    let mut rpack: Vec<f64> = Vec::with_capacity(n * (n + 1) / 2);
    let mut active: Vec<usize> = Vec::new();
    let mut direcs: Vec<f64> = Vec::new();
    let mut uv: Vec<f64> = Vec::new();
    let mut skip_eq = vec![false; p];

    let mut dv = vec![0.0; n];
    let mut zv = vec![0.0; n];
    let mut rv = vec![0.0; n];
    let mut a_row = vec![0.0; n];

    let max_adds = 50 * (n + q) + 100;
    let mut adds = 0usize;

    'outer: loop {
        let mut slacks = &rhs - &rows * &x;
        for &j in &active {
            slacks[j] = 0.0;
        }

        let mut iadd = q;
        let mut best_ratio = 0.0;
        for j in 0..q {
            if j < p && skip_eq[j] {
                continue;
            }
            let viol = if j < p { slacks[j].abs() } else { -slacks[j] };
            if viol <= 1e-11 * (1.0 + rhs[j].abs()) {
                continue;
            }
            let ratio = viol / row_norms[j];
            if ratio > best_ratio {
                best_ratio = ratio;
                iadd = j;
            }
        }
        if iadd == q {
            break 'outer;
        }

        adds += 1;
        if adds > max_adds {
            return Err(QpError::MaxIterations(adds));
        }

        let direc = slacks[iadd].signum();
        let mut slack = slacks[iadd];
        let mut u_enter = 0.0;
        for (dst, src) in a_row.iter_mut().zip(rows.row(iadd).iter()) {
            *dst = *src;
        }

        let mut inner_guard = 0usize;
        loop {
            inner_guard += 1;
            if inner_guard > 2 * (n + q) + 4 {
                return Err(QpError::MaxIterations(adds));
            }
            let na = active.len();

            for (i, di) in dv.iter_mut().enumerate() {
                *di = direc * dot_s(&jmat[i * n..(i + 1) * n], &a_row);
            }
            let d_sq = dot_s(&dv, &dv);
            let d2_sq = dot_s(&dv[na..], &dv[na..]);
            let dependent = d2_sq <= DEPENDENT_TOL * d_sq + f64::MIN_POSITIVE;

            // Largest dual step before a working-set inequality multiplier
            // would turn negative.
            let rv_cur = &mut rv[..na];
            rv_cur.copy_from_slice(&dv[..na]);
            for k in (0..na).rev() {
                let start = k * (k + 1) / 2;
                rv_cur[k] /= rpack[start + k];
                let (head, tail) = rv_cur.split_at_mut(k);
                axpy_s(-tail[0], &rpack[start..start + k], head);
            }
            let mut t1 = f64::INFINITY;
            let mut idel = usize::MAX;
            for (k, (&j, &u_k)) in active.iter().zip(uv.iter()).enumerate() {
                if j >= p && rv_cur[k] > 0.0 {
                    let t = u_k / rv_cur[k];
                    if t < t1 {
                        t1 = t;
                        idel = k;
                    }
                }
            }

            // Primal step bringing the entering row's slack to zero.
            let t2 = if dependent {
                f64::INFINITY
            } else {
                zv.fill(0.0);
                for i in na..n {
                    axpy_s(dv[i], &jmat[i * n..(i + 1) * n], &mut zv);
                }
                slack / dot_s(&zv, &a_row)
            };

            if t1 == f64::INFINITY && t2 == f64::INFINITY {
                if iadd < p && slack.abs() <= 1e-8 * (1.0 + rhs[iadd].abs()) {
                    // Consistent duplicate of rows already pinned; ignore it.
                    skip_eq[iadd] = true;
                    continue 'outer;
                }
                return Err(QpError::Infeasible);
            }

            let partial = t2 > t1;
            let step = t1.min(t2);
            if !dependent {
                axpy_s(step, &zv, x.as_mut_slice());
            }
            for (u_k, &r_k) in uv.iter_mut().zip(rv_cur.iter()) {
                *u_k -= step * r_k;
            }
            u_enter += step;

            if partial {
                let count = active.len();
                rotate_delete(idel + 1, &mut jmat, &mut rpack, n, count);
                active.remove(idel);
                direcs.remove(idel);
                uv.remove(idel);
                rpack.truncate((count - 1) * count / 2);
                slack = rhs[iadd] - dot_s(&a_row, x.as_slice());
            } else {
                active.push(iadd);
                direcs.push(direc);
                uv.push(u_enter);
                rotate_insert(active.len(), &mut dv, &mut jmat, n);
                rpack.extend_from_slice(&dv[..active.len()]);
                continue 'outer;
            }
        }
    }

    // Multipliers back in the crate convention.
    let mut duals = DVector::<f64>::zeros(m);
    let mut eq_duals = DVector::<f64>::zeros(p);
    for ((&j, &u_j), &direc) in active.iter().zip(uv.iter()).zip(direcs.iter()) {
        if j < p {
            eq_duals[j] = -direc * u_j;
        } else {
            duals[j - p] = u_j;
        }
    }

    let mut residual = kkt_measure(&factor.hess, lin, ineq, ineq_rhs, eq, &x, &duals, &eq_duals);
    if residual > KKT_TARGET && !active.is_empty() {
        if let Some((x_p, duals_p, eq_duals_p)) =
            polish(factor, lin, &rows, &rhs, p, m, &active)
        {
            let res_p = kkt_measure(
                &factor.hess,
                lin,
                ineq,
                ineq_rhs,
                eq,
                &x_p,
                &duals_p,
                &eq_duals_p,
            );
            if res_p < residual {
                x = x_p;
                duals = duals_p;
                eq_duals = eq_duals_p;
                residual = res_p;
            }
        }
    }

    let mut active_set = Vec::new();
    if m > 0 {
        let slack = ineq_rhs - ineq * &x;
        for j in 0..m {
            if slack[j] <= ACTIVE_SET_TOL {
                active_set.push(j);
            }
        }
    }
    let objective = (&factor.hess * &x).dot(&x) + 2.0 * lin.dot(&x);

    Ok(QpSolution {
        z: x,
        duals,
        eq_duals,
        active_set,
        objective,
        kkt_residual: residual,
        iterations: adds,
    })
}

fn check_dims(
    n: usize,
    lin: &DVector<f64>,
    ineq: &DMatrix<f64>,
    ineq_rhs: &DVector<f64>,
    eq: Option<(&DMatrix<f64>, &DVector<f64>)>,
) -> Result<(), QpError> {
    if lin.len() != n {
        return Err(QpError::Dimension {
            context: "linear coefficients",
            expected: n,
            got: lin.len(),
        });
    }
    if ineq.nrows() > 0 && ineq.ncols() != n {
        return Err(QpError::Dimension {
            context: "inequality columns",
            expected: n,
            got: ineq.ncols(),
        });
    }
    if ineq_rhs.len() != ineq.nrows() {
        return Err(QpError::Dimension {
            context: "inequality offsets",
            expected: ineq.nrows(),
            got: ineq_rhs.len(),
        });
    }
    if let Some((a, b)) = eq {
        if a.nrows() > 0 && a.ncols() != n {
            return Err(QpError::Dimension {
                context: "equality columns",
                expected: n,
                got: a.ncols(),
            });
        }
        if b.len() != a.nrows() {
            return Err(QpError::Dimension {
                context: "equality offsets",
                expected: a.nrows(),
                got: b.len(),
            });
        }
    }
    Ok(())
}

/// Re-solves the stationarity system on the final working set and keeps the
/// result when it lowers the residual.
fn polish(
    factor: &QpFactor,
    lin: &DVector<f64>,
    rows: &DMatrix<f64>,
    rhs: &DVector<f64>,
    p: usize,
    m: usize,
    active: &[usize],
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n = factor.n();
    let k = active.len();
    let mut kkt = DMatrix::<f64>::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&(&factor.hess * 2.0));
    for (r, &j) in active.iter().enumerate() {
        for c in 0..n {
            kkt[(n + r, c)] = rows[(j, c)];
            kkt[(c, n + r)] = rows[(j, c)];
        }
    }
    let mut b = DVector::<f64>::zeros(n + k);
    b.rows_mut(0, n).copy_from(&(lin * -2.0));
    for (r, &j) in active.iter().enumerate() {
        b[n + r] = rhs[j];
    }
    let lu = kkt.clone().lu();
    let mut sol = lu.solve(&b)?;
    let correction = lu.solve(&(&b - &kkt * &sol))?;
    sol += correction;

    let x = sol.rows(0, n).clone_owned();
    let mut duals = DVector::<f64>::zeros(m);
    let mut eq_duals = DVector::<f64>::zeros(p);
    for (r, &j) in active.iter().enumerate() {
        if j < p {
            eq_duals[j] = sol[n + r];
        } else {
            duals[j - p] = sol[n + r];
        }
    }
    Some((x, duals, eq_duals))
}

/// Largest violation of the optimality system in the crate's convention.
fn kkt_measure(
    hess: &DMatrix<f64>,
    lin: &DVector<f64>,
    ineq: &DMatrix<f64>,
    ineq_rhs: &DVector<f64>,
    eq: Option<(&DMatrix<f64>, &DVector<f64>)>,
    x: &DVector<f64>,
    duals: &DVector<f64>,
    eq_duals: &DVector<f64>,
) -> f64 {
    let mut grad = hess * x * 2.0 + lin * 2.0;
    if ineq.nrows() > 0 {
        grad += ineq.transpose() * duals;
    }
    if let Some((a, _)) = eq {
        if a.nrows() > 0 {
            grad += a.transpose() * eq_duals;
        }
    }
    let mut res = grad.amax();
    if ineq.nrows() > 0 {
        let slack = ineq_rhs - ineq * x;
        for j in 0..slack.len() {
            res = res.max(-slack[j]);
            res = res.max(-duals[j]);
            res = res.max((duals[j] * slack[j]).abs());
        }
    }
    if let Some((a, b)) = eq {
        if a.nrows() > 0 {
            res = res.max((b - a * x).amax());
        }
    }
    res
}

fn dot_s(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn axpy_s(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Adjacent columns `i - 1` and `i` of a column-major matrix.
fn two_cols(mat: &mut [f64], split: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    let (left, right) = mat.split_at_mut(split);
    (&mut left[split - len..], &mut right[..len])
}

/// Rotates `vec` so its entries beyond `count` vanish, applying the same
/// rotations to the columns of `mat` to keep the factored basis consistent.
fn rotate_insert(count: usize, vec: &mut [f64], mat: &mut [f64], n: usize) {
    for i in (count..n).rev() {
        if vec[i] == 0.0 {
            continue;
        }
        let (left, right) = two_cols(mat, i * n, n);
        if vec[i - 1] == 0.0 {
            vec[i - 1] = vec[i];
            left.swap_with_slice(right);
        } else {
            let h = vec[i - 1].hypot(vec[i]).copysign(vec[i - 1]);
            let gc = vec[i - 1] / h;
            let gs = vec[i] / h;
            let nu = vec[i] / (vec[i - 1] + h);
            vec[i - 1] = h;
            for (li, ri) in left.iter_mut().zip(right.iter_mut()) {
                let temp = gc * *li + gs * *ri;
                *ri = nu * (*li + temp) - *ri;
                *li = temp;
            }
        }
    }
}

/// Removes the working-set column at 1-based position `col` from the packed
/// upper-triangular factor, restoring triangularity by row rotations and
/// applying them to the columns of `mat`.
fn rotate_delete(col: usize, mat: &mut [f64], rpack: &mut [f64], n: usize, count: usize) {
    for i in col..count {
        let di = i * (i + 1) / 2;
        let l = di + i;
        if rpack[l] != 0.0 {
            let (left, right) = two_cols(mat, i * n, n);
            if rpack[l - 1] == 0.0 {
                let mut ind = l;
                for j in i + 1..=count {
                    rpack.swap(ind - 1, ind);
                    ind += j;
                }
                left.swap_with_slice(right);
            } else {
                let h = rpack[l - 1].hypot(rpack[l]).copysign(rpack[l - 1]);
                let gc = rpack[l - 1] / h;
                let gs = rpack[l] / h;
                let nu = rpack[l] / (rpack[l - 1] + h);
                let mut ind = l;
                for j in i + 1..=count {
                    let temp = gc * rpack[ind - 1] + gs * rpack[ind];
                    rpack[ind] = nu * (rpack[ind - 1] + temp) - rpack[ind];
                    rpack[ind - 1] = temp;
                    ind += j;
                }
                for (li, ri) in left.iter_mut().zip(right.iter_mut()) {
                    let temp = gc * *li + gs * *ri;
                    *ri = nu * (*li + temp) - *ri;
                    *li = temp;
                }
            }
        }
        let (left, right) = two_cols(rpack, di, i);
        left.swap_with_slice(right);
    }
}

/// Value and exact gradient of a building's share value function at `s`,
/// together with the minimizing input trajectory and the rows active there.
#[derive(Debug, Clone)]
pub struct PsiValue {
    /// Optimal cost at the given shares, regularization included.
    pub value: f64,
    /// Exact gradient with respect to the shares.
    pub gradient: DVector<f64>,
    /// Minimizing input trajectory.
    pub u: DVector<f64>,
    /// Active rows in the problem's `z`-row numbering (box rows first, then
    /// the band-share rows).
    pub active_set: Vec<usize>,
    /// Multipliers of every row in the same numbering.
    pub duals: DVector<f64>,
}

/// Evaluates the share value function: the optimal cost of the building's
/// input QP when its band shares are pinned at `s`.
///
/// The gradient is assembled from the band-share multipliers `omega` as
/// `2 mu s - omega`, which is exact wherever the active set is stable.
pub fn eval_psi(problem: &LocalProblem, s: &DVector<f64>) -> Result<PsiValue, QpError> {
    let n_s = problem.n_s();
    if s.len() != n_s {
        return Err(QpError::Dimension {
            context: "share vector",
            expected: n_s,
            got: s.len(),
        });
    }
    let n_ut = problem.n_u_traj();
    let m_box = problem.qp.n_rows();

    let mut rows = DMatrix::<f64>::zeros(m_box + n_s, n_ut);
    rows.view_mut((0, 0), (m_box, n_ut))
        .copy_from(&problem.qp.ineq);
    rows.view_mut((m_box, 0), (n_s, n_ut))
        .copy_from(&problem.coupling_mat);
    let mut rhs = DVector::<f64>::zeros(m_box + n_s);
    rhs.rows_mut(0, m_box).copy_from(&problem.qp.ineq_rhs);
    rhs.rows_mut(m_box, n_s)
        .copy_from(&(&problem.coupling_rhs + s));

    let lin = &problem.qp.lin + &problem.price_lin * 0.5;
    let sol = solve_qp(&problem.qp.hess, &lin, &rows, &rhs, None)?;

    let omega = sol.duals.rows(m_box, n_s).clone_owned();
    let gradient = s * (2.0 * problem.mu) - omega;
    let value = sol.objective + problem.mu * s.norm_squared();
    Ok(PsiValue {
        value,
        gradient,
        u: sol.z,
        active_set: sol.active_set,
        duals: sol.duals,
    })
}

/// Curvature of the share value function on its current piece, in the
/// crate's quadratic convention.
///
/// Active rows are taken from `psi` in order of decreasing multiplier and
/// pruned so their input-space parts stay linearly independent; the pinned
/// input subspace then shapes how the optimal cost reacts to share changes.
/// With no band-share row active the result is `mu I`.
pub fn local_hessian(problem: &LocalProblem, psi: &PsiValue) -> DMatrix<f64> {
    let n_ut = problem.n_u_traj();
    let n_s = problem.n_s();
    let m_box = problem.qp.n_rows();

    let mut cand = psi.active_set.clone();
    cand.sort_by(|&a, &b| {
        psi.duals[b]
            .partial_cmp(&psi.duals[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let u_row = |j: usize| -> DVector<f64> {
        if j < m_box {
            problem.qp.ineq.row(j).transpose()
        } else {
            problem.coupling_mat.row(j - m_box).transpose()
        }
    };

    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    for &j in &cand {
        let row = u_row(j);
        let norm_sq = row.norm_squared();
        if norm_sq <= f64::MIN_POSITIVE {
            continue;
        }
        let mut v = row;
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&v);
                v -= b * c;
            }
        }
        if v.norm_squared() > PIVOT_TOL * norm_sq {
            basis.push(&v / v.norm());
            kept.push(j);
        }
    }

    let mut curv = DMatrix::<f64>::identity(n_s, n_s) * problem.mu;
    if kept.is_empty() {
        return curv;
    }

    let k = kept.len();
    let mut p1 = DMatrix::<f64>::zeros(k, n_ut);
    let mut p2 = DMatrix::<f64>::zeros(k, n_s);
    for (r, &j) in kept.iter().enumerate() {
        p1.row_mut(r).copy_from(&u_row(j).transpose());
        if j >= m_box {
            p2[(r, j - m_box)] = -1.0;
        }
    }

    let chol = Cholesky::new(problem.qp.hess.clone())
        .expect("condensed cost matrices stay positive definite");
    let pivot = &p1 * chol.solve(&p1.transpose());
    let pivot = (&pivot + &pivot.transpose()) * 0.5;
    let mapped = match Cholesky::new(pivot.clone()) {
        Some(c) => c.solve(&p2),
        None => pivot
            .lu()
            .solve(&p2)
            .expect("pruned rows keep the pivot block invertible"),
    };
    curv += p2.transpose() * mapped;
    (&curv + &curv.transpose()) * 0.5
}
