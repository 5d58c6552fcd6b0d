//! Command-line front end: configuration ingestion, subcommand dispatch,
//! and result emission. Summaries are JSON; time series are CSV with 17
//! significant digits. Exit codes: 0 success, 2 validation failure,
//! 3 solver non-convergence, 4 I/O error, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use stackgame_core::aclm;
use stackgame_core::config::ConfigDocument;
use stackgame_core::error::Error as CoreError;
use stackgame_core::fbsde::{self, SolverParams, SystemKind};
use stackgame_core::lattice::Lattice;
use stackgame_core::model::{validate_spec, GameSpec};
use stackgame_core::oracle;
use stackgame_core::riccati;
use stackgame_core::simulate::{self, ProbeRole, SimConfig};

mod output;

#[derive(Parser)]
#[command(
    name = "stackgame",
    about = "Lattice, Riccati, and Monte Carlo solvers for constrained linear-quadratic leader-follower stochastic differential games",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategySource {
    Riccati,
    Lattice,
    Aclm,
}

#[derive(Parser)]
struct CommonArgs {
    /// Path to the JSON configuration document.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for emitted files (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Table format for solution exports.
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Override the simulation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of Euler steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the number of Monte Carlo paths.
    #[arg(long)]
    paths: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the standing assumptions and report every condition.
    Validate(CommonArgs),
    /// Solve the open-loop leader-follower system on the tree.
    SolveAol(CommonArgs),
    /// Solve the scalar closed-loop coefficient system.
    SolveAclm(CommonArgs),
    /// Integrate the backward Riccati equations and check the symmetrized
    /// route when applicable.
    Riccati(CommonArgs),
    /// Monte Carlo cost estimation under a computed strategy.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value = "riccati")]
        source: StrategySource,
    },
    /// First-order-condition residuals, perturbation probes, and the
    /// closed-loop stationarity report.
    Verify(CommonArgs),
    /// Side-by-side comparison against the brute-force solvers.
    OracleCompare(CommonArgs),
}

fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Validate(a) => run_validate(a),
        Command::SolveAol(a) => run_solve_aol(a),
        Command::SolveAclm(a) => run_solve_aclm(a),
        Command::Riccati(a) => run_riccati(a),
        Command::Simulate { common, source } => run_simulate(common, *source),
        Command::Verify(a) => run_verify(a),
        Command::OracleCompare(a) => run_oracle_compare(a),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            let (kind, code) = classify(&err);
            let payload = json!({"error": {"kind": kind, "message": err.to_string()}});
            eprintln!("{payload}");
            ExitCode::from(code)
        }
    }
}

/// Worker-thread cap from the environment; zero or unset means automatic.
fn configure_threads() {
    if let Ok(val) = std::env::var("STACKGAME_THREADS") {
        if let Ok(k) = val.trim().parse::<usize>() {
            if k > 0 {
                stackgame_core::configure_thread_pool(k);
            }
        }
    }
}

fn classify(err: &AppError) -> (&'static str, u8) {
    match err {
        AppError::Io(_) => ("io", 4),
        AppError::ValidationFailed => ("validation", 2),
        AppError::Core(CoreError::MalformedSpec(_)) => ("validation", 2),
        AppError::Core(CoreError::NotConverged { .. }) => ("not_converged", 3),
        AppError::Core(CoreError::BlowUp { .. }) => ("blow_up", 1),
        AppError::Core(_) => ("solver", 1),
    }
}

enum AppError {
    Io(std::io::Error),
    Core(CoreError),
    ValidationFailed,
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Io(e) => write!(f, "{e}"),
            AppError::Core(e) => write!(f, "{e}"),
            AppError::ValidationFailed => write!(f, "specification failed validation"),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Io(e)
    }
}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> Self {
        AppError::Core(e)
    }
}

type AppResult = Result<ExitCode, AppError>;

struct Loaded {
    doc: ConfigDocument,
    spec: GameSpec,
    params: SolverParams,
    sim: SimConfig,
}

fn load(args: &CommonArgs) -> Result<Loaded, AppError> {
    let text = std::fs::read_to_string(&args.config)?;
    let doc = ConfigDocument::from_json(&text)?;
    let spec = doc.to_game_spec()?;
    let params = doc.solver_params();
    let mut sim = doc.sim_config();
    if let Some(seed) = args.seed {
        sim.seed = seed;
    }
    if let Some(steps) = args.steps {
        sim.steps = steps;
    }
    if let Some(paths) = args.paths {
        sim.paths = paths;
    }
    std::fs::create_dir_all(&args.out)?;
    Ok(Loaded {
        doc,
        spec,
        params,
        sim,
    })
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<(), AppError> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value).expect("json serialization");
    text.push('\n');
    std::fs::write(&path, &text)?;
    println!("{text}");
    Ok(())
}

fn run_validate(args: &CommonArgs) -> AppResult {
    let loaded = load(args)?;
    let report = validate_spec(&loaded.spec)?;
    let value = serde_json::to_value(&report).expect("report serialization");
    write_json(&args.out, "validation.json", &value)?;
    if report.passed {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(AppError::ValidationFailed)
    }
}

fn require_valid(spec: &GameSpec) -> Result<(), AppError> {
    let report = validate_spec(spec)?;
    if !report.passed {
        let value = serde_json::to_value(&report).expect("report serialization");
        eprintln!("{value}");
        return Err(AppError::ValidationFailed);
    }
    Ok(())
}

/// Plain Picard first; on stall, retry with the configured homotopy ramp.
fn solve_leader_with_fallback(
    loaded: &Loaded,
    lat: &Lattice,
) -> Result<(fbsde::LeaderSystemSolution, &'static str), AppError> {
    match fbsde::solve_leader_system(&loaded.spec, lat, &loaded.params) {
        Ok(sol) => Ok((sol, "picard")),
        Err(CoreError::NotConverged { .. }) => {
            let steps = loaded.doc.solver.continuation_steps.max(1);
            let (sol, _report) = fbsde::solve_by_continuation(
                &loaded.spec,
                lat,
                SystemKind::Leader,
                steps,
                None,
                &loaded.params,
            )?;
            match sol {
                fbsde::ContinuationSolution::Leader(s) => Ok((*s, "continuation")),
                fbsde::ContinuationSolution::Follower(_) => unreachable!(),
            }
        }
        Err(e) => Err(e.into()),
    }
}

fn run_solve_aol(args: &CommonArgs) -> AppResult {
    let loaded = load(args)?;
    require_valid(&loaded.spec)?;
    let lat = Lattice::path_dependent(loaded.doc.solver.lattice_steps, loaded.spec.horizon)?;
    let (sol, method) = solve_leader_with_fallback(&loaded, &lat)?;
    let (j1, j2) = fbsde::discrete_costs(&loaded.spec, &lat, &sol.x, &sol.u, &sol.v);
    let report = fbsde::max_principle_residual(&loaded.spec, &lat, &sol, 32, loaded.sim.seed)?;

    match args.format {
        Format::Csv => {
            let csv = output::leader_solution_csv(&lat, &sol);
            std::fs::write(args.out.join("solution.csv"), csv)?;
        }
        Format::Json => {
            let rows = output::leader_solution_json(&lat, &sol);
            std::fs::write(
                args.out.join("solution.json"),
                serde_json::to_string_pretty(&rows).expect("rows"),
            )?;
        }
    }
    let summary = json!({
        "method": method,
        "lattice_steps": lat.n_steps(),
        "residual": sol.residual,
        "iterations": sol.iterations,
        "contraction_ratio": fbsde::fit_contraction_ratio(&sol.history),
        "costs": {"j1": j1, "j2": j2},
        "max_principle": report,
    });
    write_json(&args.out, "summary.json", &summary)?;
    Ok(ExitCode::SUCCESS)
}

fn run_solve_aclm(args: &CommonArgs) -> AppResult {
    let loaded = load(args)?;
    require_valid(&loaded.spec)?;
    let lat = Lattice::path_dependent(loaded.doc.solver.lattice_steps, loaded.spec.horizon)?;
    let sol = aclm::solve_aclm(&loaded.spec, &lat, loaded.doc.solver.k_gain, &loaded.params)?;
    let h3 = aclm::h3_stationarity_check(&loaded.spec, &lat, &sol, 1e-8);
    let reconstruction = aclm::reconstruction_residual(&loaded.spec, &lat, &sol);

    match args.format {
        Format::Csv => {
            let csv = output::aclm_solution_csv(&lat, &sol);
            std::fs::write(args.out.join("aclm.csv"), csv)?;
        }
        Format::Json => {
            let rows = output::aclm_solution_json(&lat, &sol);
            std::fs::write(
                args.out.join("aclm.json"),
                serde_json::to_string_pretty(&rows).expect("rows"),
            )?;
        }
    }
    let summary = json!({
        "residual": sol.residual,
        "iterations": sol.iterations,
        "k_gain": sol.k_gain,
        "reconstruction_residual": reconstruction,
        "h3": h3,
    });
    write_json(&args.out, "summary.json", &summary)?;
    Ok(ExitCode::SUCCESS)
}

fn run_riccati(args: &CommonArgs) -> AppResult {
    let loaded = load(args)?;
    require_valid(&loaded.spec)?;
    let aug = riccati::build_augmented(&loaded.spec)?;
    let grid = loaded.doc.solver.riccati_grid;
    let direct = riccati::solve_riccati(&aug, grid)?;
    std::fs::write(args.out.join("riccati.csv"), output::riccati_csv(&direct))?;

    let upsilon = if loaded.spec.n == 1 {
        match riccati::upsilon_transform(&loaded.spec) {
            Ok(ut) => {
                let (_barred, mapped) = riccati::solve_symmetrized_riccati(&ut, grid)?;
                let mut sup = 0.0f64;
                for (a, b) in mapped.r.iter().zip(direct.r.iter()) {
                    for (x, y) in a.iter().zip(b.iter()) {
                        sup = sup.max((x - y).abs());
                    }
                }
                json!({
                    "applicable": true,
                    "lambda": ut.lambda,
                    "mu": ut.mu,
                    "sup_error_vs_direct": sup,
                })
            }
            Err(e) => json!({"applicable": false, "reason": e.to_string()}),
        }
    } else {
        json!({"applicable": false, "reason": "transform is defined for one-dimensional state"})
    };

    // duality against the lattice solution on a small tree
    let duality = {
        let steps = loaded.doc.solver.lattice_steps.min(10);
        let lat = Lattice::path_dependent(steps, loaded.spec.horizon)?;
        match solve_leader_with_fallback(&loaded, &lat) {
            Ok((sol, _)) => {
                let err = output::duality_max_error(&loaded.spec, &lat, &sol, &direct);
                json!({"lattice_steps": steps, "duality_max_error": err})
            }
            Err(AppError::Core(e)) => json!({"skipped": e.to_string()}),
            Err(e) => return Err(e),
        }
    };

    let summary = json!({
        "grid_points": direct.times.len(),
        "terminal_weight_max": direct.r.last().map(|m| m.amax()),
        "initial_value_max": direct.r.first().map(|m| m.amax()),
        "upsilon": upsilon,
        "duality": duality,
    });
    write_json(&args.out, "summary.json", &summary)?;
    Ok(ExitCode::SUCCESS)
}

fn run_simulate(args: &CommonArgs, source: StrategySource) -> AppResult {
    let loaded = load(args)?;
    require_valid(&loaded.spec)?;
    let estimate = match source {
        StrategySource::Riccati => {
            let aug = riccati::build_augmented(&loaded.spec)?;
            let rsol = riccati::solve_riccati(&aug, loaded.doc.solver.riccati_grid)?;
            let law = simulate::RiccatiFeedbackLaw {
                spec: &loaded.spec,
                aug: &aug,
                riccati: &rsol,
            };
            simulate::simulate_costs(&law, loaded.spec.horizon, &loaded.sim)
        }
        StrategySource::Lattice => {
            let lat =
                Lattice::path_dependent(loaded.doc.solver.lattice_steps, loaded.spec.horizon)?;
            let (sol, _) = solve_leader_with_fallback(&loaded, &lat)?;
            let law = simulate::LatticeLookupLaw {
                spec: &loaded.spec,
                lat: &lat,
                x_nodes: &sol.x,
                u_nodes: &sol.u,
                v_nodes: &sol.v,
            };
            simulate::simulate_costs(&law, loaded.spec.horizon, &loaded.sim)
        }
        StrategySource::Aclm => {
            let lat =
                Lattice::path_dependent(loaded.doc.solver.lattice_steps, loaded.spec.horizon)?;
            let sol =
                aclm::solve_aclm(&loaded.spec, &lat, loaded.doc.solver.k_gain, &loaded.params)?;
            let profile = aclm::strategy_profile(&lat, &sol);
            let leader = aclm::AffineLeader::from_profile(&profile);
            aclm::simulate_affine_game(&loaded.spec, &leader, &loaded.sim)?
        }
    };
    let value = serde_json::to_value(&estimate).expect("estimate");
    write_json(&args.out, "estimate.json", &value)?;
    Ok(ExitCode::SUCCESS)
}

fn run_verify(args: &CommonArgs) -> AppResult {
    let loaded = load(args)?;
    require_valid(&loaded.spec)?;
    let lat = Lattice::path_dependent(loaded.doc.solver.lattice_steps, loaded.spec.horizon)?;
    let (sol, method) = solve_leader_with_fallback(&loaded, &lat)?;
    let mp = fbsde::max_principle_residual(&loaded.spec, &lat, &sol, 32, loaded.sim.seed)?;
    let follower_probe = simulate::perturbation_probe(
        &loaded.spec,
        &lat,
        &sol,
        ProbeRole::Follower,
        64,
        0.05,
        loaded.sim.seed,
        &loaded.params,
    )?;
    let leader_probe = simulate::perturbation_probe(
        &loaded.spec,
        &lat,
        &sol,
        ProbeRole::Leader,
        64,
        0.05,
        loaded.sim.seed.wrapping_add(1),
        &loaded.params,
    )?;
    let h3 = if loaded.spec.is_scalar()
        && matches!(
            loaded.spec.gamma2,
            stackgame_core::projection::ConstraintSet::FullSpace { .. }
        ) {
        match aclm::solve_aclm(&loaded.spec, &lat, loaded.doc.solver.k_gain, &loaded.params) {
            Ok(aclm_sol) => serde_json::to_value(aclm::h3_stationarity_check(
                &loaded.spec,
                &lat,
                &aclm_sol,
                1e-8,
            ))
            .expect("h3"),
            Err(e) => json!({"skipped": e.to_string()}),
        }
    } else {
        json!({"skipped": "closed-loop check needs a scalar game with an unconstrained follower"})
    };
    let probes_passed = follower_probe.passed && leader_probe.passed;
    let summary = json!({
        "method": method,
        "max_principle": mp,
        "follower_probe": follower_probe,
        "leader_probe": leader_probe,
        "probes_passed": probes_passed,
        "h3": h3,
    });
    write_json(&args.out, "verify.json", &summary)?;
    Ok(ExitCode::SUCCESS)
}

fn run_oracle_compare(args: &CommonArgs) -> AppResult {
    let loaded = load(args)?;
    require_valid(&loaded.spec)?;
    let lat = Lattice::path_dependent(loaded.doc.solver.lattice_steps, loaded.spec.horizon)?;
    let (sol, _) = solve_leader_with_fallback(&loaded, &lat)?;
    let warm = oracle::TreeControlVector::from_process(&lat, &sol.u);
    let leader_oracle = oracle::oracle_leader(&loaded.spec, &lat, 4, loaded.sim.seed, Some(&warm))?;
    let best = leader_oracle.best_restart();
    let picard_u = oracle::TreeControlVector::from_process(&lat, &sol.u);
    let picard_v = oracle::TreeControlVector::from_process(&lat, &sol.v);
    let follower_at_picard = oracle::oracle_follower(&loaded.spec, &lat, &picard_u, None)?;
    let (j1_picard, j2_picard) = oracle::evaluate_costs(&loaded.spec, &lat, &picard_u, &picard_v);
    let (j1_oracle, j2_oracle) =
        oracle::evaluate_costs(&loaded.spec, &lat, &best.controls, &best.follower);
    let summary = json!({
        "max_control_delta": {
            "u": best.controls.sup_distance(&picard_u),
            "v": follower_at_picard.controls.sup_distance(&picard_v),
        },
        "costs": {
            "picard": {"j1": j1_picard, "j2": j2_picard},
            "oracle": {"j1": j1_oracle, "j2": j2_oracle},
            "j1_delta": (j1_oracle - j1_picard).abs(),
        },
        "restarts": leader_oracle
            .restarts
            .iter()
            .map(|r| json!({
                "label": r.label,
                "cost": r.cost,
                "gradient_map_norm": r.gradient_map_norm,
                "iterations": r.iterations,
            }))
            .collect::<Vec<_>>(),
    });
    write_json(&args.out, "oracle_compare.json", &summary)?;
    Ok(ExitCode::SUCCESS)
}
