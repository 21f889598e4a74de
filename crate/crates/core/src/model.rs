//! Building dynamics, cost data and dense condensing.
//!
//! A building is a discrete-time linear system
//!
//! ```text
//! x(k+1) = A x(k) + B u(k) + w(k)
//! y(k)   = C x(k) + D u(k)
//! ```
//!
//! with box bounds on inputs and outputs, a tracking cost on the outputs and
//! an effort cost on the inputs. [`BuildingModel::condense`] eliminates the
//! states over a horizon of `N` steps and returns the open-loop problem as a
//! strictly convex QP in the stacked input trajectory.
//!
//! Quadratic forms follow one convention throughout the crate: a cost written
//! with matrix `H` and vector `h` means `f(u) = u' H u + 2 h' u`, so the
//! gradient is `2 H u + 2 h` and the (true) Hessian is `2 H`. Constant terms
//! are dropped; reported objective values exclude them.
//!
//! Condensing pairs outputs one step ahead: stage `k` of the condensed cost
//! and of the output rows refers to `C x(k+1) + D u(k)`, the first output a
//! chosen input can still influence. [`BuildingModel::simulate_step`] in
//! contrast returns the instantaneous output `C x + D u` of the current
//! state.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0} must be positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("{0} has a lower bound above its upper bound")]
    EmptyBounds(&'static str),
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("disturbance file {path}: {reason}")]
    DisturbanceFile { path: String, reason: String },
}

/// Size class of a synthetic building; fixes the input/output dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuildingKind {
    Large,
    Middle,
    Small,
}

impl BuildingKind {
    /// `(n_x, n_u, n_y)` of the synthetic model for this class.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            BuildingKind::Large => (18, 18, 18),
            BuildingKind::Middle => (5, 5, 5),
            BuildingKind::Small => (3, 3, 3),
        }
    }
}

/// Linear building model with cost weights, comfort band and grid data.
///
/// `f` is the row map from an input vector to the building's net power
/// injection (kW); `g` converts that injection into a feeder voltage shift
/// (p.u. per kW). Both stay fixed over the horizon.
#[derive(Debug, Clone)]
pub struct BuildingModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// Output tracking weight, positive semidefinite `n_y x n_y`.
    pub q: DMatrix<f64>,
    /// Input effort weight, positive definite `n_u x n_u`.
    pub r: DMatrix<f64>,
    pub y_ref: DVector<f64>,
    pub y_min: DVector<f64>,
    pub y_max: DVector<f64>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    /// Power-injection row map (applied as `f . u_k`).
    pub f: DVector<f64>,
    /// Voltage sensitivity of the feeder to this building's injection.
    pub g: f64,
}

impl BuildingModel {
    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    /// Checks shapes, bound ordering and definiteness of the weights.
    pub fn validate(&self) -> Result<(), ModelError> {
        let (n_x, n_u, n_y) = (self.n_x(), self.n_u(), self.n_y());
        let expect = |context, expected, got| {
            if expected == got {
                Ok(())
            } else {
                Err(ModelError::Dimension {
                    context,
                    expected,
                    got,
                })
            }
        };
        expect("A columns", n_x, self.a.ncols())?;
        expect("B rows", n_x, self.b.nrows())?;
        expect("C columns", n_x, self.c.ncols())?;
        expect("D rows", n_y, self.d.nrows())?;
        expect("D columns", n_u, self.d.ncols())?;
        expect("Q rows", n_y, self.q.nrows())?;
        expect("Q columns", n_y, self.q.ncols())?;
        expect("R rows", n_u, self.r.nrows())?;
        expect("R columns", n_u, self.r.ncols())?;
        expect("y_ref", n_y, self.y_ref.len())?;
        expect("y_min", n_y, self.y_min.len())?;
        expect("y_max", n_y, self.y_max.len())?;
        expect("u_min", n_u, self.u_min.len())?;
        expect("u_max", n_u, self.u_max.len())?;
        expect("f", n_u, self.f.len())?;
        if self.y_min.iter().zip(self.y_max.iter()).any(|(lo, hi)| lo > hi) {
            return Err(ModelError::EmptyBounds("output band"));
        }
        if self.u_min.iter().zip(self.u_max.iter()).any(|(lo, hi)| lo > hi) {
            return Err(ModelError::EmptyBounds("input box"));
        }
        let sym_q = (&self.q + self.q.transpose()) * 0.5;
        let eig = sym_q.symmetric_eigenvalues();
        let max_eig = eig.iter().cloned().fold(0.0_f64, f64::max);
        if eig.iter().any(|&l| l < -1e-10 * max_eig.max(1.0)) {
            return Err(ModelError::NotPositiveDefinite("Q"));
        }
        let sym_r = (&self.r + self.r.transpose()) * 0.5;
        let eig_r = sym_r.symmetric_eigenvalues();
        let max_eig_r = eig_r.iter().cloned().fold(0.0_f64, f64::max);
        if eig_r.iter().any(|&l| l < -1e-10 * max_eig_r.max(1.0)) {
            return Err(ModelError::NotPositiveDefinite("R"));
        }
        Ok(())
    }

    /// One step of the plant: returns `(x_next, y)` with `y = C x + D u`.
    pub fn simulate_step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>), ModelError> {
        if x.len() != self.n_x() {
            return Err(ModelError::Dimension {
                context: "state",
                expected: self.n_x(),
                got: x.len(),
            });
        }
        if u.len() != self.n_u() {
            return Err(ModelError::Dimension {
                context: "input",
                expected: self.n_u(),
                got: u.len(),
            });
        }
        if w.len() != self.n_x() {
            return Err(ModelError::Dimension {
                context: "disturbance",
                expected: self.n_x(),
                got: w.len(),
            });
        }
        let x_next = &self.a * x + &self.b * u + w;
        let y = &self.c * x + &self.d * u;
        Ok((x_next, y))
    }

    /// Condenses the horizon-`N` open-loop problem into a dense QP over the
    /// stacked input trajectory `u = (u_0, ..., u_{N-1})`.
    ///
    /// `w` holds the predicted disturbances for the window, one vector per
    /// step. The result carries the cost pair `(H, h)`, the stacked
    /// input/output box as `E u <= e` and the prediction maps used to
    /// rebuild outputs from a trajectory.
    pub fn condense(
        &self,
        x_hat: &DVector<f64>,
        w: &[DVector<f64>],
        horizon: usize,
    ) -> Result<CondensedQp, ModelError> {
        self.validate()?;
        if horizon == 0 {
            return Err(ModelError::EmptyHorizon);
        }
        if x_hat.len() != self.n_x() {
            return Err(ModelError::Dimension {
                context: "initial state",
                expected: self.n_x(),
                got: x_hat.len(),
            });
        }
        if w.len() != horizon {
            return Err(ModelError::Dimension {
                context: "disturbance window",
                expected: horizon,
                got: w.len(),
            });
        }
        for step in w {
            if step.len() != self.n_x() {
                return Err(ModelError::Dimension {
                    context: "disturbance entry",
                    expected: self.n_x(),
                    got: step.len(),
                });
            }
        }

        let (n_x, n_u, n_y) = (self.n_x(), self.n_u(), self.n_y());
        let n = horizon;

        // Powers of A, then the stacked maps onto x_1..x_N.
        let mut a_pow = Vec::with_capacity(n + 1);
        a_pow.push(DMatrix::<f64>::identity(n_x, n_x));
        for k in 0..n {
            let next = &a_pow[k] * &self.a;
            a_pow.push(next);
        }

        let mut a_stack = DMatrix::<f64>::zeros(n * n_x, n_x);
        let mut b_u = DMatrix::<f64>::zeros(n * n_x, n * n_u);
        let mut b_w = DMatrix::<f64>::zeros(n * n_x, n * n_x);
        for t in 0..n {
            a_stack
                .view_mut((t * n_x, 0), (n_x, n_x))
                .copy_from(&a_pow[t + 1]);
            for j in 0..=t {
                let pow = &a_pow[t - j];
                b_u.view_mut((t * n_x, j * n_u), (n_x, n_u))
                    .copy_from(&(pow * &self.b));
                b_w.view_mut((t * n_x, j * n_x), (n_x, n_x)).copy_from(pow);
            }
        }

        let mut c_blk = DMatrix::<f64>::zeros(n * n_y, n * n_x);
        let mut d_blk = DMatrix::<f64>::zeros(n * n_y, n * n_u);
        for t in 0..n {
            c_blk
                .view_mut((t * n_y, t * n_x), (n_y, n_x))
                .copy_from(&self.c);
            d_blk
                .view_mut((t * n_y, t * n_u), (n_y, n_u))
                .copy_from(&self.d);
        }

        let mut q_blk = DMatrix::<f64>::zeros(n * n_y, n * n_y);
        let mut r_blk = DMatrix::<f64>::zeros(n * n_u, n * n_u);
        for t in 0..n {
            q_blk
                .view_mut((t * n_y, t * n_y), (n_y, n_y))
                .copy_from(&self.q);
            r_blk
                .view_mut((t * n_u, t * n_u), (n_u, n_u))
                .copy_from(&self.r);
        }

        let w_stacked = stack_steps(w);
        // Input-to-output map and the input-free output response.
        let gamma = &c_blk * &b_u + &d_blk;
        let free = &c_blk * (&a_stack * x_hat + &b_w * &w_stacked);
        let mut y_ref_stack = DVector::<f64>::zeros(n * n_y);
        let mut y_min_stack = DVector::<f64>::zeros(n * n_y);
        let mut y_max_stack = DVector::<f64>::zeros(n * n_y);
        let mut u_min_stack = DVector::<f64>::zeros(n * n_u);
        let mut u_max_stack = DVector::<f64>::zeros(n * n_u);
        for t in 0..n {
            y_ref_stack.rows_mut(t * n_y, n_y).copy_from(&self.y_ref);
            y_min_stack.rows_mut(t * n_y, n_y).copy_from(&self.y_min);
            y_max_stack.rows_mut(t * n_y, n_y).copy_from(&self.y_max);
            u_min_stack.rows_mut(t * n_u, n_u).copy_from(&self.u_min);
            u_max_stack.rows_mut(t * n_u, n_u).copy_from(&self.u_max);
        }

        let offset = &free - &y_ref_stack;
        let hess = {
            let m = gamma.transpose() * &q_blk * &gamma + &r_blk;
            (&m + m.transpose()) * 0.5
        };
        if nalgebra::Cholesky::new(hess.clone()).is_none() {
            return Err(ModelError::NotPositiveDefinite("condensed Hessian"));
        }
        let lin = gamma.transpose() * (&q_blk * &offset);

        // Stacked box: outputs from above and below, then the input box.
        let n_rows = 2 * n * (n_y + n_u);
        let n_cols = n * n_u;
        let mut ineq = DMatrix::<f64>::zeros(n_rows, n_cols);
        let mut ineq_rhs = DVector::<f64>::zeros(n_rows);
        ineq.view_mut((0, 0), (n * n_y, n_cols)).copy_from(&gamma);
        ineq_rhs
            .rows_mut(0, n * n_y)
            .copy_from(&(&y_max_stack - &free));
        ineq.view_mut((n * n_y, 0), (n * n_y, n_cols))
            .copy_from(&(-&gamma));
        ineq_rhs
            .rows_mut(n * n_y, n * n_y)
            .copy_from(&(&free - &y_min_stack));
        let eye = DMatrix::<f64>::identity(n_cols, n_cols);
        ineq.view_mut((2 * n * n_y, 0), (n_cols, n_cols)).copy_from(&eye);
        ineq_rhs.rows_mut(2 * n * n_y, n_cols).copy_from(&u_max_stack);
        ineq.view_mut((2 * n * n_y + n_cols, 0), (n_cols, n_cols))
            .copy_from(&(-&eye));
        ineq_rhs
            .rows_mut(2 * n * n_y + n_cols, n_cols)
            .copy_from(&(-&u_min_stack));

        Ok(CondensedQp {
            hess,
            lin,
            ineq,
            ineq_rhs,
            maps: PredictionMaps {
                a_stack,
                b_u,
                b_w,
                c_blk,
                d_blk,
            },
            horizon: n,
            n_u,
            n_y,
        })
    }
}

/// Stacks per-step vectors into one column vector.
pub fn stack_steps(steps: &[DVector<f64>]) -> DVector<f64> {
    let total: usize = steps.iter().map(|s| s.len()).sum();
    let mut out = DVector::<f64>::zeros(total);
    let mut at = 0;
    for s in steps {
        out.rows_mut(at, s.len()).copy_from(s);
        at += s.len();
    }
    out
}

/// Dense maps from `(x_hat, w, u)` to the stacked predicted state and output
/// trajectories.
#[derive(Debug, Clone)]
pub struct PredictionMaps {
    /// Maps the initial state onto `(x_1, ..., x_N)`.
    pub a_stack: DMatrix<f64>,
    /// Maps the stacked inputs onto the stacked states.
    pub b_u: DMatrix<f64>,
    /// Maps the stacked disturbances onto the stacked states.
    pub b_w: DMatrix<f64>,
    /// Block-diagonal output map.
    pub c_blk: DMatrix<f64>,
    /// Block-diagonal feedthrough.
    pub d_blk: DMatrix<f64>,
}

impl PredictionMaps {
    /// Stacked predicted outputs `(y at stage 0, ..., y at stage N-1)` where
    /// stage `k` pairs `x_{k+1}` with `u_k`.
    pub fn outputs(
        &self,
        x_hat: &DVector<f64>,
        w_stacked: &DVector<f64>,
        u: &DVector<f64>,
    ) -> DVector<f64> {
        &self.c_blk * (&self.a_stack * x_hat + &self.b_u * u + &self.b_w * w_stacked)
            + &self.d_blk * u
    }
}

/// Condensed open-loop problem of one building: minimize `u' H u + 2 h' u`
/// subject to `E u <= e`.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub hess: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub ineq: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub maps: PredictionMaps,
    pub horizon: usize,
    pub n_u: usize,
    pub n_y: usize,
}

impl CondensedQp {
    /// Number of decision variables, `N * n_u`.
    pub fn n_vars(&self) -> usize {
        self.horizon * self.n_u
    }

    /// Number of stacked box rows, `2 N (n_y + n_u)`.
    pub fn n_rows(&self) -> usize {
        self.ineq.nrows()
    }

    /// Condensed cost of a trajectory (constant term excluded).
    pub fn cost(&self, u: &DVector<f64>) -> f64 {
        (u.transpose() * &self.hess * u)[(0, 0)] + 2.0 * self.lin.dot(u)
    }
}

// Synthetic fleet recipe. The scales below keep instances feasible with
// margin and leave the band-share curvature moderate: power maps are a few
// percent per input channel and voltage sensitivities sit around 7 p.u. per
// power unit, so a 12-building fleet can move the feeder by a multiple of the
// band width while price incentives alone sag it by only a few hundredths.
const SPECTRAL_RADIUS: f64 = 0.9;
const INPUT_EFFORT: f64 = 0.1;
const OUTPUT_BAND: f64 = 1.0;
const INPUT_BOX: f64 = 1.0;
const POWER_MAP_SCALE: f64 = 0.02;

/// Deterministically generates a synthetic building of the given class.
///
/// All randomness flows through one ChaCha stream seeded from `seed`, so the
/// same `(kind, seed)` pair reproduces the same model on every platform.
pub fn synth_building(kind: BuildingKind, seed: u64) -> BuildingModel {
    let (n_x, n_u, n_y) = kind.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (n_x as f64).sqrt();
    let mut randn_matrix = |rows: usize, cols: usize, s: f64| {
        DMatrix::<f64>::from_fn(rows, cols, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            z * s
        })
    };

    let a_raw = randn_matrix(n_x, n_x, scale);
    let rho = a_raw
        .complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0_f64, f64::max);
    let a = if rho > 1e-12 {
        &a_raw * (SPECTRAL_RADIUS / rho)
    } else {
        a_raw
    };

    let b_raw = randn_matrix(n_x, n_u, scale);
    let c = randn_matrix(n_y, n_x, scale);

    // Normalize the steady-state gain so unit inputs drive O(1) outputs.
    let eye = DMatrix::<f64>::identity(n_x, n_x);
    let resolvent = (&eye - &a)
        .lu()
        .solve(&b_raw)
        .expect("I - A is invertible for spectral radius < 1");
    let gain = &c * resolvent;
    let sigma_max = gain.singular_values().max();
    let b = if sigma_max > 1e-12 {
        &b_raw / sigma_max
    } else {
        b_raw
    };

    let f = DVector::<f64>::from_fn(n_u, |_, _| {
        rng.random_range(0.5..1.5) * POWER_MAP_SCALE / (n_u as f64).sqrt()
    });
    let g = rng.random_range(6.0..9.0);

    BuildingModel {
        a,
        b,
        c,
        d: DMatrix::zeros(n_y, n_u),
        q: DMatrix::identity(n_y, n_y),
        r: DMatrix::identity(n_u, n_u) * INPUT_EFFORT,
        y_ref: DVector::zeros(n_y),
        y_min: DVector::from_element(n_y, -OUTPUT_BAND),
        y_max: DVector::from_element(n_y, OUTPUT_BAND),
        u_min: DVector::from_element(n_u, -INPUT_BOX),
        u_max: DVector::from_element(n_u, INPUT_BOX),
        f,
        g,
    }
}

/// Reads a per-building disturbance file with header `step,w_1,...,w_nw`.
///
/// Rows must carry consecutive step indices starting at 0; returns one
/// disturbance vector per step.
pub fn read_disturbance_csv(path: &str, n_w: usize) -> Result<Vec<DVector<f64>>, ModelError> {
    let fail = |reason: String| ModelError::DisturbanceFile {
        path: path.to_string(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| fail(e.to_string()))?;
    {
        let headers = reader.headers().map_err(|e| fail(e.to_string()))?;
        if headers.len() != n_w + 1 || headers.get(0) != Some("step") {
            return Err(fail(format!(
                "expected header step,w_1,...,w_{n_w}, got {} columns",
                headers.len()
            )));
        }
        for (idx, name) in headers.iter().skip(1).enumerate() {
            let expected = format!("w_{}", idx + 1);
            if name != expected {
                return Err(fail(format!("column {} named {name}, expected {expected}", idx + 1)));
            }
        }
    }
    let mut steps = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| fail(e.to_string()))?;
        if record.len() != n_w + 1 {
            return Err(fail(format!("row {row_idx} has {} fields", record.len())));
        }
        let step: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| fail(format!("row {row_idx}: bad step index {:?}", &record[0])))?;
        if step != row_idx {
            return Err(fail(format!("row {row_idx} carries step {step}, expected {row_idx}")));
        }
        let mut w = DVector::<f64>::zeros(n_w);
        for j in 0..n_w {
            w[j] = record[j + 1]
                .trim()
                .parse()
                .map_err(|_| fail(format!("row {row_idx}: bad value {:?}", &record[j + 1])))?;
        }
        steps.push(w);
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_model(a: f64, b: f64, c: f64, d: f64, q: f64, r: f64) -> BuildingModel {
        BuildingModel {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            c: DMatrix::from_element(1, 1, c),
            d: DMatrix::from_element(1, 1, d),
            q: DMatrix::from_element(1, 1, q),
            r: DMatrix::from_element(1, 1, r),
            y_ref: DVector::zeros(1),
            y_min: DVector::from_element(1, -100.0),
            y_max: DVector::from_element(1, 100.0),
            u_min: DVector::from_element(1, -100.0),
            u_max: DVector::from_element(1, 100.0),
            f: DVector::from_element(1, 1.0),
            g: 1.0,
        }
    }

    /// Independent reference: roll the recursion forward step by step and sum
    /// the stage costs with the one-step-ahead output pairing.
    fn rollout_cost(
        model: &BuildingModel,
        x_hat: &DVector<f64>,
        w: &[DVector<f64>],
        u: &[DVector<f64>],
    ) -> f64 {
        let mut x = x_hat.clone();
        let mut total = 0.0;
        for (u_k, w_k) in u.iter().zip(w.iter()) {
            let (x_next, _) = model.simulate_step(&x, u_k, w_k).unwrap();
            let y = &model.c * &x_next + &model.d * u_k;
            let dy = &y - &model.y_ref;
            total += (dy.transpose() * &model.q * &dy)[(0, 0)];
            total += (u_k.transpose() * &model.r * u_k)[(0, 0)];
            x = x_next;
        }
        total
    }

    #[test]
    fn simulate_step_applies_feedthrough() {
        let model = scalar_model(0.5, 1.0, 1.0, 0.5, 1.0, 1.0);
        let (x_next, y) = model
            .simulate_step(
                &DVector::from_element(1, 2.0),
                &DVector::from_element(1, 2.0),
                &DVector::from_element(1, 0.25),
            )
            .unwrap();
        assert_relative_eq!(x_next[0], 0.5 * 2.0 + 2.0 + 0.25);
        assert_relative_eq!(y[0], 1.0 * 2.0 + 0.5 * 2.0);
    }

    #[test]
    fn simulate_step_rejects_bad_dims() {
        let model = scalar_model(0.5, 1.0, 1.0, 0.0, 1.0, 1.0);
        let err = model
            .simulate_step(
                &DVector::zeros(2),
                &DVector::zeros(1),
                &DVector::zeros(1),
            )
            .unwrap_err();
        assert!(matches!(err, ModelError::Dimension { context: "state", .. }));
    }

    #[test]
    fn condense_single_step_with_unit_gain() {
        // A=0, B=1, C=1, D=0, Q=1, R=1, N=1: the only predicted output is
        // x_1 = u_0, so H = 1 + 1 and h = 0 at x_hat = 0.
        let model = scalar_model(0.0, 1.0, 1.0, 0.0, 1.0, 1.0);
        let qp = model
            .condense(&DVector::zeros(1), &[DVector::zeros(1)], 1)
            .unwrap();
        assert_relative_eq!(qp.hess[(0, 0)], 2.0);
        assert_relative_eq!(qp.lin[0], 0.0);
    }

    #[test]
    fn condense_matches_hand_expansion() {
        // A=0.5, B=1, C=1, D=0, Q=1, R=0, N=2, x_hat=1, w=0:
        //   x1 = 0.5 + u0, x2 = 0.25 + 0.5 u0 + u1
        // Expanding x1^2 + x2^2 by hand gives
        //   1.25 u0^2 + u1^2 + u0 u1 + 1.25 u0 + 0.5 u1 + const,
        // i.e. H = [[1.25, 0.5], [0.5, 1.0]], h = [0.625, 0.25].
        let model = scalar_model(0.5, 1.0, 1.0, 0.0, 1.0, 0.0);
        let w = vec![DVector::zeros(1), DVector::zeros(1)];
        let qp = model
            .condense(&DVector::from_element(1, 1.0), &w, 2)
            .unwrap();
        assert_relative_eq!(qp.hess[(0, 0)], 1.25, epsilon = 1e-12);
        assert_relative_eq!(qp.hess[(0, 1)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(qp.hess[(1, 0)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(qp.hess[(1, 1)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(qp.lin[0], 0.625, epsilon = 1e-12);
        assert_relative_eq!(qp.lin[1], 0.25, epsilon = 1e-12);

        // Cross-check the same numbers against central finite differences of
        // the rolled-out cost: gradient at 0 is 2h, curvature matches 2H.
        let cost_at = |u0: f64, u1: f64| {
            rollout_cost(
                &model,
                &DVector::from_element(1, 1.0),
                &w,
                &[DVector::from_element(1, u0), DVector::from_element(1, u1)],
            )
        };
        let eps = 1e-6;
        let g0 = (cost_at(eps, 0.0) - cost_at(-eps, 0.0)) / (2.0 * eps);
        let g1 = (cost_at(0.0, eps) - cost_at(0.0, -eps)) / (2.0 * eps);
        assert_relative_eq!(g0, 2.0 * 0.625, epsilon = 1e-8);
        assert_relative_eq!(g1, 2.0 * 0.25, epsilon = 1e-8);
    }

    #[test]
    fn condensed_cost_equals_rollout_on_random_trajectories() {
        for seed in 0..5u64 {
            let kind = match seed % 3 {
                0 => BuildingKind::Small,
                1 => BuildingKind::Middle,
                _ => BuildingKind::Large,
            };
            let model = synth_building(kind, 100 + seed);
            let n = 6;
            let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
            let x_hat = DVector::from_fn(model.n_x(), |_, _| rng.random_range(-0.5..0.5));
            let w: Vec<_> = (0..n)
                .map(|_| DVector::from_fn(model.n_x(), |_, _| rng.random_range(-0.02..0.02)))
                .collect();
            let qp = model.condense(&x_hat, &w, n).unwrap();
            for _ in 0..4 {
                let u_steps: Vec<_> = (0..n)
                    .map(|_| DVector::from_fn(model.n_u(), |_, _| rng.random_range(-1.0..1.0)))
                    .collect();
                let u = stack_steps(&u_steps);
                let condensed = qp.cost(&u);
                let reference = rollout_cost(&model, &x_hat, &w, &u_steps)
                    - rollout_cost(&model, &x_hat, &w, &vec![DVector::zeros(model.n_u()); n]);
                let scale = condensed.abs().max(1.0);
                assert!(
                    (condensed - reference).abs() <= 1e-10 * scale,
                    "condensed {condensed} vs rollout {reference}"
                );
            }
        }
    }

    #[test]
    fn stacked_box_rows_agree_with_simulated_bounds() {
        let model = synth_building(BuildingKind::Small, 11);
        let n = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x_hat = DVector::from_fn(model.n_x(), |_, _| rng.random_range(-0.2..0.2));
        let w: Vec<_> = (0..n)
            .map(|_| DVector::from_fn(model.n_x(), |_, _| rng.random_range(-0.02..0.02)))
            .collect();
        let qp = model.condense(&x_hat, &w, n).unwrap();
        let w_stacked = stack_steps(&w);
        for _ in 0..50 {
            let u = DVector::from_fn(qp.n_vars(), |_, _| rng.random_range(-1.5..1.5));
            let satisfied = {
                let slack = &qp.ineq_rhs - &qp.ineq * &u;
                slack.iter().all(|&v| v >= -1e-12)
            };
            let y = qp.maps.outputs(&x_hat, &w_stacked, &u);
            let mut inside = y
                .iter()
                .all(|&v| v >= model.y_min[0] - 1e-12 && v <= model.y_max[0] + 1e-12);
            inside &= u
                .iter()
                .all(|&v| v >= model.u_min[0] - 1e-12 && v <= model.u_max[0] + 1e-12);
            assert_eq!(satisfied, inside);
        }
    }

    #[test]
    fn synth_building_is_deterministic_and_stable() {
        let first = synth_building(BuildingKind::Middle, 42);
        let second = synth_building(BuildingKind::Middle, 42);
        assert_eq!(first.a, second.a);
        assert_eq!(first.b, second.b);
        assert_eq!(first.f, second.f);
        assert_eq!(first.g, second.g);
        let other = synth_building(BuildingKind::Middle, 43);
        assert_ne!(first.a, other.a);

        let rho = first
            .a
            .complex_eigenvalues()
            .iter()
            .map(|l| l.norm())
            .fold(0.0_f64, f64::max);
        assert_relative_eq!(rho, 0.9, epsilon = 1e-9);
        first.validate().unwrap();

        for kind in [BuildingKind::Large, BuildingKind::Middle, BuildingKind::Small] {
            let (n_x, n_u, n_y) = kind.dims();
            let m = synth_building(kind, 1);
            assert_eq!((m.n_x(), m.n_u(), m.n_y()), (n_x, n_u, n_y));
        }
    }

    #[test]
    fn disturbance_csv_roundtrip() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        let mut file = std::fs::File::create(&path).unwrap();
        writeln!(file, "step,w_1,w_2").unwrap();
        writeln!(file, "0,0.5,-0.25").unwrap();
        writeln!(file, "1,0.125,0.0").unwrap();
        drop(file);
        let steps = read_disturbance_csv(path.to_str().unwrap(), 2).unwrap();
        assert_eq!(steps.len(), 2);
        assert_relative_eq!(steps[0][0], 0.5);
        assert_relative_eq!(steps[0][1], -0.25);
        assert_relative_eq!(steps[1][0], 0.125);

        let err = read_disturbance_csv(path.to_str().unwrap(), 3).unwrap_err();
        assert!(matches!(err, ModelError::DisturbanceFile { .. }));
    }
}
