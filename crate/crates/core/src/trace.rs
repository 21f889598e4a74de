//! Convergence traces and communication accounting for the fleet solvers.
//!
//! Every coordination iteration appends one [`IterRecord`]: the consensus
//! residual, the price update magnitude, how much the fleet's active sets
//! changed, the bytes exchanged and the wall time. Traces serialize to CSV
//! with a fixed schema and fixed float formatting so byte-identical files
//! certify deterministic runs (wall time is the one column exempt from
//! that).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qp::QpError;

/// Which coordination method produced a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Aladin,
    Admm,
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolverKind::Aladin => write!(f, "aladin"),
            SolverKind::Admm => write!(f, "admm"),
        }
    }
}

/// One coordination iteration.
#[derive(Debug, Clone)]
pub struct IterRecord {
    /// Iteration number, starting at 1.
    pub iter: usize,
    /// Consensus residual: stacked 2-norm of the share mismatch.
    pub residual_s: f64,
    /// 2-norm of the price update applied this iteration.
    pub lambda_delta: f64,
    /// Symmetric difference of the fleet's active sets against the previous
    /// iteration; 0 on the first.
    pub active_set_changes: usize,
    /// Bytes sent from the buildings to the coordinator.
    pub bytes_up: u64,
    /// Bytes broadcast from the coordinator to the buildings.
    pub bytes_down: u64,
    /// Wall time of the iteration in milliseconds.
    pub wall_ms: f64,
}

/// Full iteration history of one coordination run.
#[derive(Debug, Clone)]
pub struct SolveTrace {
    pub solver: SolverKind,
    pub records: Vec<IterRecord>,
}

impl SolveTrace {
    pub fn new(solver: SolverKind) -> Self {
        SolveTrace {
            solver,
            records: Vec::new(),
        }
    }

    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn residuals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.residual_s).collect()
    }

    pub fn final_residual(&self) -> Option<f64> {
        self.records.last().map(|r| r.residual_s)
    }

    pub fn total_bytes_up(&self) -> u64 {
        self.records.iter().map(|r| r.bytes_up).sum()
    }

    pub fn total_bytes_down(&self) -> u64 {
        self.records.iter().map(|r| r.bytes_down).sum()
    }

    /// Writes the trace with the schema
    /// `iter,residual_s,lambda_delta,active_set_changes,bytes_up,bytes_down`.
    /// Floats use fixed scientific formatting. Wall times stay out of the
    /// file so identical runs emit identical bytes; read them from the
    /// records when profiling.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> std::io::Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(
            out,
            "iter,residual_s,lambda_delta,active_set_changes,bytes_up,bytes_down"
        )?;
        for r in &self.records {
            writeln!(
                out,
                "{},{:.12e},{:.12e},{},{},{}",
                r.iter, r.residual_s, r.lambda_delta, r.active_set_changes, r.bytes_up, r.bytes_down
            )?;
        }
        out.flush()
    }
}

/// Converged output of a coordination run.
#[derive(Debug, Clone)]
pub struct FleetSolution {
    /// Stacked input trajectory per building.
    pub u: Vec<DVector<f64>>,
    /// Band shares per building.
    pub s: Vec<DVector<f64>>,
    /// Consensus price on the zero-sum rows.
    pub lambda: DVector<f64>,
    /// Sum of the building objectives (constant terms excluded).
    pub objective: f64,
    /// Active rows of each building's final local solve, in its own
    /// `z`-row numbering.
    pub active_sets: Vec<Vec<usize>>,
    pub iterations: usize,
    pub trace: SolveTrace,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("no convergence within {} iterations (residual {:?})",
        .0.iterations, .0.trace.final_residual())]
    MaxIterations(Box<FleetSolution>),
}

/// Least-squares line through `(x, y)` pairs: `(slope, intercept, r2)`.
/// `None` when fewer than two points or degenerate abscissas.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy <= 0.0 {
        1.0
    } else {
        (sxy * sxy) / (sxx * syy)
    };
    Some((slope, intercept, r2))
}

/// Fits a geometric decay `r_k ~ C * rate^k` to the last `tail` positive
/// residuals by log-linear regression. Returns `(rate, r2)`, or `None` when
/// fewer than three usable points remain.
pub fn fit_geometric_rate(residuals: &[f64], tail: usize) -> Option<(f64, f64)> {
    let start = residuals.len().saturating_sub(tail);
    let pts: Vec<(f64, f64)> = residuals[start..]
        .iter()
        .enumerate()
        .filter(|(_, &r)| r > 0.0)
        .map(|(k, &r)| (k as f64, r.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let (slope, _, r2) = linear_fit(&xs, &ys)?;
    Some((slope.exp(), r2))
}
