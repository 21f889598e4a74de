//! Receding-horizon closed loop around the distributed solvers.
//!
//! At every sampling step the harness assembles the fleet's coordination
//! problems from the current building states, solves them with the
//! configured method, applies each building's first input block, and
//! propagates the states with the realized disturbances. From the second
//! step on, the solve starts from the previous optimum shifted one step:
//! both share targets and the price drop their leading block and zero-pad
//! the tail, and the curvature-aware solver additionally refreshes its
//! scalings at the shifted shares.
//!
//! Each step yields an [`MpcEpisode`] carrying the applied inputs, the
//! realized outputs and feeder voltage, the solver trace and the active-set
//! movement against the previous step. Episodes split into two regimes: if
//! the optimal active set moved by at most a small threshold the step is a
//! `CaseI` episode (the warm start pays off in full), otherwise `CaseII`.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::aladin::{self, active_set_difference, shift_block, AladinConfig};
use crate::admm::{self, AdmmConfig, AdmmState};
use crate::model::ModelError;
use crate::scenario::{Fleet, ScenarioError};
use crate::trace::{SolveError, SolveTrace, SolverKind};

#[derive(Debug, Error)]
pub enum MpcError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Problem(#[from] crate::problem::ProblemError),
    #[error(transparent)]
    Qp(#[from] crate::qp::QpError),
    #[error("solver failed at step {step} after {} completed episodes: {source}", episodes.len())]
    Solver {
        step: usize,
        source: SolveError,
        episodes: Vec<MpcEpisode>,
    },
    #[error("episode log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub solver: SolverKind,
    /// Closed-loop steps to run.
    pub steps: usize,
    /// Shift the previous optimum into the next solve; cold-starts every
    /// step when false.
    pub warm: bool,
    pub aladin: AladinConfig,
    pub admm: AdmmConfig,
    /// Largest active-set movement still classified as `CaseI`.
    pub case_threshold: usize,
}

impl MpcConfig {
    /// Solver choice plus run length, everything else at defaults with the
    /// given online tolerance.
    pub fn new(solver: SolverKind, steps: usize, epsilon: f64) -> Self {
        MpcConfig {
            solver,
            steps,
            warm: true,
            aladin: AladinConfig {
                epsilon,
                ..AladinConfig::default()
            },
            admm: AdmmConfig {
                epsilon,
                ..AdmmConfig::default()
            },
            case_threshold: 2,
        }
    }
}

/// One closed-loop step: what was applied, what the plant did, and how the
/// solver got there.
#[derive(Debug, Clone)]
pub struct MpcEpisode {
    pub step: usize,
    pub solver: SolverKind,
    /// First input block per building (kW).
    pub applied_u: Vec<DVector<f64>>,
    /// Outputs realized by the applied inputs (deg C).
    pub realized_y: Vec<DVector<f64>>,
    /// Feeder voltage realized by the applied inputs (p.u.).
    pub realized_v: f64,
    /// Active rows of each building's final local solve.
    pub active_sets: Vec<Vec<usize>>,
    /// Active-set movement against the previous episode; zero at the first.
    pub active_set_delta: usize,
    pub iterations: usize,
    pub objective: f64,
    pub trace: SolveTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeCase {
    CaseI,
    CaseII,
}

/// An episode is `CaseI` when the optimal active set moved by at most
/// `threshold` rows since the previous step.
pub fn classify_episode(
    current: &MpcEpisode,
    previous: &MpcEpisode,
    threshold: usize,
) -> EpisodeCase {
    let delta = active_set_difference(&previous.active_sets, &current.active_sets);
    if delta <= threshold {
        EpisodeCase::CaseI
    } else {
        EpisodeCase::CaseII
    }
}

/// Runs the closed loop from the fleet's initial states.
pub fn run_closed_loop(fleet: &Fleet, config: &MpcConfig) -> Result<Vec<MpcEpisode>, MpcError> {
    run_closed_loop_from(fleet, config, fleet.initial_states())
}

/// Runs the closed loop from the given building states.
pub fn run_closed_loop_from(
    fleet: &Fleet,
    config: &MpcConfig,
    mut x: Vec<DVector<f64>>,
) -> Result<Vec<MpcEpisode>, MpcError> {
    assert!(config.steps >= 1, "need at least one closed-loop step");
    let mismatch = fleet.scenario.mismatch;
    let mut episodes: Vec<MpcEpisode> = Vec::with_capacity(config.steps);
    let mut carry: Option<(Vec<DVector<f64>>, DVector<f64>)> = None;

    for t in 0..config.steps {
        let problems = fleet.problems(t, &x)?;
        let result = match config.solver {
            SolverKind::Aladin => {
                let init = match carry.take() {
                    Some((s, lambda)) if config.warm => {
                        Some(aladin::warm_start(&problems, &s, &lambda)?)
                    }
                    _ => None,
                };
                aladin::solve(&problems, &config.aladin, init)
            }
            SolverKind::Admm => {
                let init = match carry.take() {
                    Some((s, lambda)) if config.warm => Some(AdmmState {
                        s: s.iter().map(shift_block).collect(),
                        lambda: shift_block(&lambda),
                    }),
                    _ => None,
                };
                admm::solve(&problems, &config.admm, init)
            }
        };
        let solution = match result {
            Ok(sol) => sol,
            Err(source) => {
                return Err(MpcError::Solver {
                    step: t,
                    source,
                    episodes,
                })
            }
        };

        let coupling = fleet.coupling(t)?;
        let mut realized_v = coupling.v_tilde[0];
        let mut applied_u = Vec::with_capacity(fleet.fleet_size());
        let mut realized_y = Vec::with_capacity(fleet.fleet_size());
        for (i, model) in fleet.models.iter().enumerate() {
            let u0 = solution.u[i].rows(0, model.n_u()).clone_owned();
            realized_v += model.g * model.f.dot(&u0);
            let w_real = fleet.disturbance_window(i, t)[0].clone() * mismatch;
            let (x_next, _) = model.simulate_step(&x[i], &u0, &w_real)?;
            realized_y.push(&model.c * &x_next + &model.d * &u0);
            x[i] = x_next;
            applied_u.push(u0);
        }

        let active_set_delta = episodes
            .last()
            .map_or(0, |prev| active_set_difference(&prev.active_sets, &solution.active_sets));
        carry = Some((solution.s, solution.lambda));
        episodes.push(MpcEpisode {
            step: t,
            solver: config.solver,
            applied_u,
            realized_y,
            realized_v,
            active_sets: solution.active_sets,
            active_set_delta,
            iterations: solution.iterations,
            objective: solution.objective,
            trace: solution.trace,
        });
    }
    Ok(episodes)
}

#[derive(Serialize)]
struct EpisodeRecord<'a> {
    step: usize,
    solver: SolverKind,
    iterations: usize,
    objective: f64,
    realized_v: f64,
    active_set_delta: usize,
    applied_u: Vec<Vec<f64>>,
    realized_y: Vec<Vec<f64>>,
    trace_file: &'a str,
}

/// Writes one JSON record per episode to `episodes.jsonl` in `dir`, with
/// each record referencing its per-iteration trace CSV written alongside.
/// Returns the path of the record file.
pub fn write_episode_log<P: AsRef<Path>>(
    dir: P,
    episodes: &[MpcEpisode],
) -> Result<PathBuf, std::io::Error> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let log_path = dir.join("episodes.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    for episode in episodes {
        let trace_file = format!("trace_step{:03}_{}.csv", episode.step, episode.solver);
        episode.trace.write_csv(dir.join(&trace_file))?;
        let record = EpisodeRecord {
            step: episode.step,
            solver: episode.solver,
            iterations: episode.iterations,
            objective: episode.objective,
            realized_v: episode.realized_v,
            active_set_delta: episode.active_set_delta,
            applied_u: episode
                .applied_u
                .iter()
                .map(|u| u.iter().copied().collect())
                .collect(),
            realized_y: episode
                .realized_y
                .iter()
                .map(|y| y.iter().copied().collect())
                .collect(),
            trace_file: &trace_file,
        };
        serde_json::to_writer(&mut log, &record)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    Ok(log_path)
}
