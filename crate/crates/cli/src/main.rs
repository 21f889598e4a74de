//! Command-line front end: benchmark generation, solver comparisons,
//! penalty sweeps and closed-loop runs, all emitting CSV and JSONL files
//! ready for plotting. Every command writes a `manifest.json` describing
//! the run into its output directory; summaries avoid wall-clock columns so
//! reruns with the same seed produce byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;

use gridflex::aladin::{self, warm_start, AladinConfig, SigmaMode};
use gridflex::admm::{self, AdmmConfig, AdmmState};
use gridflex::mpc::{classify_episode, run_closed_loop, write_episode_log, EpisodeCase, MpcConfig};
use gridflex::problem::{assemble_centralized, assemble_direct};
use gridflex::scenario::{Fleet, Scenario};
use gridflex::trace::{FleetSolution, SolverKind};

#[derive(Parser)]
#[command(name = "gridflex", version, about = "Building-fleet coordination benchmarks")]
struct Cli {
    /// Worker threads for the parallel building solves; 0 runs them on a
    /// single thread for deterministic sequencing.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rebuild the 12-building reference mix, check its dimensions and run
    /// both solvers from cold and warm starts.
    BenchPaper {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve one window across a penalty grid and report the input gap to
    /// the penalty-free sharing solution.
    MuSweep {
        #[arg(long)]
        scenario: PathBuf,
        /// Comma-separated penalty values; must include 0.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 1e-3, 1e-2, 1e-1, 1.0])]
        grid: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the solvers on one scenario window and emit aligned residual
    /// traces plus an iteration summary.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        /// Comma-separated subset of {aladin, admm}.
        #[arg(long, value_delimiter = ',', default_value = "aladin,admm")]
        solvers: Vec<String>,
        /// Advance one closed-loop step first and compare the warm-started
        /// second solves instead of the cold ones.
        #[arg(long)]
        warm: bool,
        /// Override the scenario's online tolerance.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop receding-horizon run with episode logging.
    Mpc {
        #[arg(long)]
        scenario: PathBuf,
        /// Override the scenario's run length.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "aladin")]
        solver: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct RunManifest {
    version: String,
    command: String,
    scenario: Option<String>,
    solvers: Vec<String>,
    seed: Option<u64>,
    epsilon: f64,
    mu: f64,
    v_min: f64,
    v_max: f64,
    price: f64,
    out: String,
}

fn tool_version() -> String {
    format!("gridflex {}", env!("CARGO_PKG_VERSION"))
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(manifest)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn parse_solver(name: &str) -> Result<SolverKind> {
    match name {
        "aladin" => Ok(SolverKind::Aladin),
        "admm" => Ok(SolverKind::Admm),
        other => bail!("unknown solver {other:?}, expected aladin or admm"),
    }
}

fn main() -> Result<()> {
    env_logger::init();
    let cli = Cli::parse();
    let threads = if cli.workers == 0 { 1 } else { cli.workers };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring worker threads")?;

    match cli.command {
        Command::BenchPaper { seed, out } => cmd_bench_paper(seed, &out),
        Command::MuSweep {
            scenario,
            grid,
            out,
        } => cmd_mu_sweep(&scenario, &grid, &out),
        Command::Compare {
            scenario,
            solvers,
            warm,
            epsilon,
            out,
        } => cmd_compare(&scenario, &solvers, warm, epsilon, &out),
        Command::Mpc {
            scenario,
            steps,
            solver,
            out,
        } => cmd_mpc(&scenario, steps, &solver, &out),
    }
}

fn cmd_bench_paper(seed: u64, out: &Path) -> Result<()> {
    let scenario = Scenario::paper_mix(seed);
    let manifest = RunManifest {
        version: tool_version(),
        command: "bench-paper".into(),
        scenario: None,
        solvers: vec!["aladin".into(), "admm".into()],
        seed: Some(seed),
        epsilon: scenario.epsilon,
        mu: scenario.mu,
        v_min: scenario.v_min,
        v_max: scenario.v_max,
        price: scenario.price,
        out: out.display().to_string(),
    };
    write_manifest(out, &manifest)?;

    let fleet = Fleet::new(scenario.clone())?;
    let problems = fleet.problems(0, &fleet.initial_states())?;
    let vars: usize = problems.iter().map(|p| p.n_z()).sum();
    let rows: usize = problems.iter().map(|p| p.n_rows()).sum();
    if vars != 1456 || rows != 4816 {
        bail!("reference mix dimensions off: {vars} variables, {rows} inequality rows");
    }
    log::info!(
        "reference mix: {vars} variables, {rows} inequality rows, band [{}, {}] p.u., price {}",
        scenario.v_min,
        scenario.v_max,
        scenario.price
    );

    let ala_cfg = AladinConfig {
        epsilon: scenario.epsilon,
        ..AladinConfig::default()
    };
    let admm_cfg = AdmmConfig {
        epsilon: scenario.epsilon,
        ..AdmmConfig::default()
    };

    let ala_cold = aladin::solve(&problems, &ala_cfg, None)?;
    let admm_cold = admm::solve(&problems, &admm_cfg, None)?;

    // Warm starts as the online loop would produce them: apply the first
    // inputs, step the plants, shift the optimum and re-solve the next
    // window.
    let ala_warm = {
        let mut x = fleet.initial_states();
        advance(&fleet, &mut x, &ala_cold)?;
        let next = fleet.problems(1, &x)?;
        let state = warm_start(&next, &ala_cold.s, &ala_cold.lambda)?;
        let cfg = AladinConfig {
            sigma_mode: SigmaMode::ExactHessianWarmStart,
            ..ala_cfg.clone()
        };
        aladin::solve(&next, &cfg, Some(state))?
    };
    let admm_warm = {
        let mut x = fleet.initial_states();
        advance(&fleet, &mut x, &admm_cold)?;
        let next = fleet.problems(1, &x)?;
        let state = AdmmState {
            s: admm_cold.s.iter().map(shift_share).collect(),
            lambda: shift_share(&admm_cold.lambda),
        };
        admm::solve(&next, &admm_cfg, Some(state))?
    };

    let runs = [
        ("aladin", "cold", &ala_cold),
        ("aladin", "warm", &ala_warm),
        ("admm", "cold", &admm_cold),
        ("admm", "warm", &admm_warm),
    ];
    let mut summary = String::from("solver,start,iterations,final_residual,objective\n");
    for (solver, start, solution) in runs {
        solution
            .trace
            .write_csv(out.join(format!("trace_{solver}_{start}.csv")))?;
        summary.push_str(&format!(
            "{solver},{start},{},{:.12e},{:.12e}\n",
            solution.iterations,
            solution.trace.final_residual().unwrap_or(f64::NAN),
            solution.objective,
        ));
    }
    fs::write(out.join("summary.csv"), summary)?;
    println!(
        "bench-paper: {vars} vars / {rows} rows; aladin {} cold / {} warm, admm {} cold / {} warm iterations",
        ala_cold.iterations, ala_warm.iterations, admm_cold.iterations, admm_warm.iterations
    );
    Ok(())
}

/// Drops the leading step block of a share-length vector, zero-padding the
/// tail; the ADMM analogue of the curvature solver's warm shift.
fn shift_share(v: &DVector<f64>) -> DVector<f64> {
    let n = v.len();
    let mut out = DVector::zeros(n);
    if n > 2 {
        out.rows_mut(0, n - 2).copy_from(&v.rows(2, n - 2));
    }
    out
}

fn cmd_mu_sweep(scenario_path: &Path, grid: &[f64], out: &Path) -> Result<()> {
    if grid.is_empty() {
        bail!("penalty grid is empty");
    }
    if !grid.iter().any(|&m| m == 0.0) {
        bail!("penalty grid must include 0 as the reference point");
    }
    let scenario = Scenario::from_path(scenario_path)?;
    let manifest = RunManifest {
        version: tool_version(),
        command: "mu-sweep".into(),
        scenario: Some(scenario_path.display().to_string()),
        solvers: vec!["centralized".into()],
        seed: Some(scenario.seed),
        epsilon: scenario.epsilon,
        mu: scenario.mu,
        v_min: scenario.v_min,
        v_max: scenario.v_max,
        price: scenario.price,
        out: out.display().to_string(),
    };
    write_manifest(out, &manifest)?;

    let fleet = Fleet::new(scenario.clone())?;
    let x0 = fleet.initial_states();
    let (reference_u, _) = {
        let problems = fleet.problems(0, &x0)?;
        let coupling = fleet.coupling(0)?;
        assemble_direct(&problems, &coupling)?
            .solve()
            .context("penalty-free reference solve")?
    };

    let mut rows = String::from("mu,gap_inf_norm\n");
    for &mu in grid {
        let gap = if mu == 0.0 {
            Ok(0.0)
        } else {
            let mut tweaked = scenario.clone();
            tweaked.mu = mu;
            Fleet::new(tweaked)
                .map_err(anyhow::Error::from)
                .and_then(|f| f.problems(0, &x0).map_err(anyhow::Error::from))
                .and_then(|problems| {
                    let sol = assemble_centralized(&problems)?.solve()?;
                    let gap = sol
                        .u
                        .iter()
                        .zip(&reference_u)
                        .map(|(a, b)| (a - b).amax())
                        .fold(0.0_f64, f64::max);
                    Ok(gap)
                })
        };
        match gap {
            Ok(g) => rows.push_str(&format!("{mu:e},{g:.12e}\n")),
            Err(e) => {
                log::warn!("penalty {mu:e} failed: {e}");
                rows.push_str(&format!("{mu:e},NaN\n"));
            }
        }
    }
    fs::write(out.join("mu_sweep.csv"), &rows)?;
    print!("{rows}");
    Ok(())
}

fn cmd_compare(
    scenario_path: &Path,
    solvers: &[String],
    warm: bool,
    epsilon: Option<f64>,
    out: &Path,
) -> Result<()> {
    let scenario = Scenario::from_path(scenario_path)?;
    let epsilon = epsilon.unwrap_or(scenario.epsilon);
    for name in solvers {
        parse_solver(name)?;
    }
    let manifest = RunManifest {
        version: tool_version(),
        command: if warm {
            "compare --warm".into()
        } else {
            "compare".into()
        },
        scenario: Some(scenario_path.display().to_string()),
        solvers: solvers.to_vec(),
        seed: Some(scenario.seed),
        epsilon,
        mu: scenario.mu,
        v_min: scenario.v_min,
        v_max: scenario.v_max,
        price: scenario.price,
        out: out.display().to_string(),
    };
    write_manifest(out, &manifest)?;

    let fleet = Fleet::new(scenario.clone())?;
    let mut x = fleet.initial_states();
    let first = fleet.problems(0, &x)?;
    let ala_cfg = AladinConfig {
        epsilon,
        ..AladinConfig::default()
    };
    let admm_cfg = AdmmConfig {
        epsilon,
        ..AdmmConfig::default()
    };

    let mut results: Vec<(String, FleetSolution)> = Vec::new();
    if warm {
        // One closed-loop step with each solver, then compare the
        // warm-started second windows.
        for name in solvers {
            let solution = match name.as_str() {
                "aladin" => {
                    let cold = aladin::solve(&first, &ala_cfg, None)?;
                    advance(&fleet, &mut x, &cold)?;
                    let next = fleet.problems(1, &x)?;
                    let state = warm_start(&next, &cold.s, &cold.lambda)?;
                    let cfg = AladinConfig {
                        sigma_mode: SigmaMode::ExactHessianWarmStart,
                        ..ala_cfg.clone()
                    };
                    let sol = aladin::solve(&next, &cfg, Some(state))?;
                    x = fleet.initial_states();
                    sol
                }
                _ => {
                    let cold = admm::solve(&first, &admm_cfg, None)?;
                    advance(&fleet, &mut x, &cold)?;
                    let next = fleet.problems(1, &x)?;
                    let state = AdmmState {
                        s: cold.s.iter().map(shift_share).collect(),
                        lambda: shift_share(&cold.lambda),
                    };
                    let sol = admm::solve(&next, &admm_cfg, Some(state))?;
                    x = fleet.initial_states();
                    sol
                }
            };
            results.push((name.clone(), solution));
        }
    } else {
        for name in solvers {
            let solution = match name.as_str() {
                "aladin" => aladin::solve(&first, &ala_cfg, None)?,
                _ => admm::solve(&first, &admm_cfg, None)?,
            };
            results.push((name.clone(), solution));
        }
    }

    let mut summary = String::from("solver,iterations,final_residual\n");
    for (name, solution) in &results {
        solution
            .trace
            .write_csv(out.join(format!("residuals_{name}.csv")))?;
        summary.push_str(&format!(
            "{name},{},{:.12e}\n",
            solution.iterations,
            solution.trace.final_residual().unwrap_or(f64::NAN)
        ));
    }
    if let (Some(ala), Some(adm)) = (
        results.iter().find(|(n, _)| n == "aladin"),
        results.iter().find(|(n, _)| n == "admm"),
    ) {
        summary.push_str(&format!(
            "speedup,{:.3},\n",
            adm.1.iterations as f64 / ala.1.iterations as f64
        ));
    }
    fs::write(out.join("compare_summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

/// Applies a solution's first inputs and steps every building's state.
fn advance(fleet: &Fleet, x: &mut [DVector<f64>], solution: &FleetSolution) -> Result<()> {
    for (i, model) in fleet.models.iter().enumerate() {
        let u0 = solution.u[i].rows(0, model.n_u()).clone_owned();
        let w = fleet.disturbance_window(i, 0)[0].clone() * fleet.scenario.mismatch;
        let (x_next, _) = model.simulate_step(&x[i], &u0, &w)?;
        x[i] = x_next;
    }
    Ok(())
}

fn cmd_mpc(scenario_path: &Path, steps: Option<usize>, solver: &str, out: &Path) -> Result<()> {
    let scenario = Scenario::from_path(scenario_path)?;
    let solver = parse_solver(solver)?;
    let steps = steps.unwrap_or(scenario.steps);
    let manifest = RunManifest {
        version: tool_version(),
        command: "mpc".into(),
        scenario: Some(scenario_path.display().to_string()),
        solvers: vec![solver.to_string()],
        seed: Some(scenario.seed),
        epsilon: scenario.epsilon,
        mu: scenario.mu,
        v_min: scenario.v_min,
        v_max: scenario.v_max,
        price: scenario.price,
        out: out.display().to_string(),
    };
    write_manifest(out, &manifest)?;

    let fleet = Fleet::new(scenario.clone())?;
    let config = MpcConfig::new(solver, steps, scenario.epsilon);
    let episodes = match run_closed_loop(&fleet, &config) {
        Ok(episodes) => episodes,
        Err(gridflex::MpcError::Solver {
            step,
            source,
            episodes,
        }) => {
            write_episode_log(out, &episodes)?;
            bail!("solver failed at step {step}: {source} (partial log written)");
        }
        Err(e) => return Err(e.into()),
    };
    write_episode_log(out, &episodes)?;

    let mut per_step = String::from("step,iterations,active_set_delta,case\n");
    for (idx, episode) in episodes.iter().enumerate() {
        let case = if idx == 0 {
            "-".to_string()
        } else {
            match classify_episode(episode, &episodes[idx - 1], config.case_threshold) {
                EpisodeCase::CaseI => "I".to_string(),
                EpisodeCase::CaseII => "II".to_string(),
            }
        };
        per_step.push_str(&format!(
            "{},{},{},{case}\n",
            episode.step, episode.iterations, episode.active_set_delta
        ));
    }
    fs::write(out.join("iterations_per_step.csv"), &per_step)?;

    let mut counts: Vec<usize> = episodes.iter().map(|e| e.iterations).collect();
    counts.sort_unstable();
    let median = counts[counts.len() / 2];
    println!(
        "mpc: {} episodes with {solver}, median {median} iterations",
        episodes.len()
    );
    Ok(())
}
