//! Command-line front end: load a model configuration, run one stage of
//! the pipeline (price, solve, policy, simulate, sweep, or the full
//! invariant check), and write plot-ready CSV files plus a run manifest.
//!
//! Exit codes: 0 success, 1 configuration/validation error, 2 numerical
//! error, 3 check-suite failure.

use clap::{Args, Parser, Subcommand};
use robustcredit::check::run_checks;
use robustcredit::hjb::{solve_all, SolveMethod};
use robustcredit::model::{load_model, DefaultState, MarketModel, ModelError};
use robustcredit::montecarlo::{
    martingale_diagnostics, simulate_paths, MeasureSpec, PolicyInput, SimConfig,
};
use robustcredit::output;
use robustcredit::policy::{value_function, PolicyTable};
use robustcredit::pricing::solve_prices;
use robustcredit::sweep::{run_sweep, SweepParam, SweepSpec};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "robustcredit",
    version,
    about = "Robust credit portfolio solver: contagion bond pricing, recursive HJB \
             value functions, worst-case policies, Monte Carlo verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Model configuration (UTF-8 JSON)
    #[arg(long)]
    config: PathBuf,
    /// Output directory for CSV files and the run manifest
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the configuration's grid step count
    #[arg(long)]
    grid_steps: Option<usize>,
}

#[derive(Args, Clone)]
struct MethodArg {
    /// HJB solver: direct | fixed | both
    #[arg(long, default_value = "both")]
    method: String,
}

impl MethodArg {
    fn parse(&self) -> Result<SolveMethod, String> {
        match self.method.as_str() {
            "direct" => Ok(SolveMethod::Direct),
            "fixed" => Ok(SolveMethod::FixedPoint),
            "both" => Ok(SolveMethod::Both),
            other => Err(format!(
                "unknown method {other:?}; use direct, fixed or both"
            )),
        }
    }
}

#[derive(Subcommand, Clone)]
enum Command {
    /// Solve the pre-default bond prices and write prices.csv
    Price {
        #[command(flatten)]
        common: Common,
    },
    /// Solve the HJB system and write solution.csv
    Solve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        method: MethodArg,
    },
    /// Solve everything and write policy.csv
    Policy {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        method: MethodArg,
    },
    /// Monte Carlo verification; writes mc_summary.csv
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        method: MethodArg,
        /// Number of simulated paths
        #[arg(long, default_value_t = 100_000)]
        paths: usize,
        /// RNG seed; identical seeds give bit-identical statistics
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Intensity tilt: reference | worst | custom:<x>
        #[arg(long, default_value = "worst")]
        measure: String,
        /// Initial wealth
        #[arg(long, default_value_t = 1.0)]
        v0: f64,
        /// Initial default state as a bitstring (default: all alive)
        #[arg(long)]
        state: Option<String>,
        /// Start time
        #[arg(long, default_value_t = 0.0)]
        t0: f64,
    },
    /// Comparative-statics sweep; writes sweep.csv
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        method: MethodArg,
        /// Swept scalar as <table>.<state>.<obligor>, e.g. penalty_mu.00.1
        #[arg(long)]
        param: String,
        /// Value axis lo:hi:count (inclusive), or a single value
        #[arg(long)]
        values: String,
        /// Tie the matching risk-neutral intensity to <factor> x the swept
        /// reference intensity
        #[arg(long)]
        tie_risk_neutral: Option<f64>,
        /// Observation state bitstring (default: all alive)
        #[arg(long)]
        obs_state: Option<String>,
    },
    /// Run the full invariant suite; exit 3 on any failure
    Check {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        method: MethodArg,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("ROBUSTCREDIT_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => {
                eprintln!("error: ROBUSTCREDIT_THREADS must be a positive integer");
                return ExitCode::from(EXIT_VALIDATION);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.exit)
        }
    }
}

struct CliError {
    exit: u8,
    message: String,
}

fn validation(message: impl Into<String>) -> CliError {
    CliError {
        exit: EXIT_VALIDATION,
        message: message.into(),
    }
}

fn numerical(message: impl Into<String>) -> CliError {
    CliError {
        exit: EXIT_NUMERICAL,
        message: message.into(),
    }
}

struct Run {
    model: MarketModel,
    grid_steps: usize,
    out_dir: PathBuf,
    config_hash: String,
    config_path: PathBuf,
}

fn prepare(common: &Common) -> Result<Run, CliError> {
    let raw = std::fs::read_to_string(&common.config)
        .map_err(|e| validation(format!("cannot read {}: {e}", common.config.display())))?;
    let model = load_model(&raw).map_err(|e| match e {
        ModelError::Schema(_) => validation(e.to_string()),
        _ => validation(e.to_string()),
    })?;
    for w in model.warnings() {
        eprintln!("warning: {w}");
    }
    let mut hasher = Sha256::new();
    hasher.update(raw.as_bytes());
    let config_hash = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    std::fs::create_dir_all(&common.out)
        .map_err(|e| validation(format!("cannot create {}: {e}", common.out.display())))?;
    let model = match common.grid_steps {
        Some(n) if n >= 1 => model.with_grid_steps(n),
        Some(_) => return Err(validation("grid_steps must be at least 1")),
        None => model,
    };
    Ok(Run {
        grid_steps: model.grid_steps(),
        model,
        out_dir: common.out.clone(),
        config_hash,
        config_path: common.config.clone(),
    })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| numerical(format!("cannot write {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_manifest(run: &Run, command_line: &str, extra: &[(&str, String)]) -> Result<(), CliError> {
    let mut manifest = String::new();
    manifest.push_str(&format!("config_sha256={}\n", run.config_hash));
    manifest.push_str(&format!("config_path={}\n", run.config_path.display()));
    manifest.push_str(&format!("grid_steps={}\n", run.grid_steps));
    manifest.push_str(&format!(
        "horizon={}\n",
        output::fmt_f64(run.model.horizon())
    ));
    manifest.push_str(&format!("obligors={}\n", run.model.n_obligors()));
    for (k, v) in extra {
        manifest.push_str(&format!("{k}={v}\n"));
    }
    manifest.push_str(&format!("command={command_line}\n"));
    manifest.push_str(&format!("version={}\n", env!("CARGO_PKG_VERSION")));
    write_file(&run.out_dir, "manifest.txt", &manifest)
}

fn parse_state(model: &MarketModel, s: &Option<String>) -> Result<DefaultState, CliError> {
    match s {
        None => Ok(DefaultState::all_alive(model.n_obligors())),
        Some(s) => {
            let z = DefaultState::from_bitstring(s).map_err(|e| validation(e.to_string()))?;
            if z.width() != model.n_obligors() {
                return Err(validation(format!(
                    "state {s} has width {}, model has {} obligors",
                    z.width(),
                    model.n_obligors()
                )));
            }
            Ok(z)
        }
    }
}

fn parse_values(spec: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [single] => {
            let v: f64 = single
                .parse()
                .map_err(|_| validation(format!("bad value {single:?}")))?;
            Ok(vec![v])
        }
        [lo, hi, count] => {
            let lo: f64 = lo
                .parse()
                .map_err(|_| validation(format!("bad lo {lo:?}")))?;
            let hi: f64 = hi
                .parse()
                .map_err(|_| validation(format!("bad hi {hi:?}")))?;
            let count: usize = count
                .parse()
                .map_err(|_| validation(format!("bad count {count:?}")))?;
            if count < 2 || !(hi > lo) {
                return Err(validation("values need lo < hi and count >= 2"));
            }
            Ok((0..count)
                .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
                .collect())
        }
        _ => Err(validation(format!(
            "values {spec:?} must be lo:hi:count or a single value"
        ))),
    }
}

fn parse_measure(s: &str) -> Result<MeasureSpec, CliError> {
    match s {
        "reference" => Ok(MeasureSpec::Reference),
        "worst" => Ok(MeasureSpec::WorstCase),
        custom if custom.starts_with("custom:") => {
            let v: f64 = custom["custom:".len()..]
                .parse()
                .map_err(|_| validation(format!("bad custom tilt in {s:?}")))?;
            Ok(MeasureSpec::Custom(v))
        }
        other => Err(validation(format!(
            "unknown measure {other:?}; use reference, worst or custom:<x>"
        ))),
    }
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Price { common } => {
            let run = prepare(&common)?;
            let grid = robustcredit::TimeGrid::new(run.model.horizon(), run.grid_steps);
            let prices = solve_prices(&run.model, grid).map_err(|e| numerical(e.to_string()))?;
            write_file(
                &run.out_dir,
                "prices.csv",
                &output::prices_csv(&run.model, &prices, grid),
            )?;
            write_manifest(
                &run,
                &format!("price --config {}", run.config_path.display()),
                &[("price_cross_gap", output::fmt_f64(prices.max_cross_gap()))],
            )?;
            Ok(ExitCode::SUCCESS)
        }

        Command::Solve { common, method } => {
            let run = prepare(&common)?;
            let method = method.parse().map_err(validation)?;
            let grid = robustcredit::TimeGrid::new(run.model.horizon(), run.grid_steps);
            let solution =
                solve_all(&run.model, grid, method).map_err(|e| numerical(e.to_string()))?;
            write_file(
                &run.out_dir,
                "solution.csv",
                &output::solution_csv(&run.model, &solution),
            )?;
            write_manifest(
                &run,
                &format!(
                    "solve --config {} --method {}",
                    run.config_path.display(),
                    method.label()
                ),
                &[("hjb_cross_gap", output::fmt_f64(solution.max_cross_gap()))],
            )?;
            Ok(ExitCode::SUCCESS)
        }

        Command::Policy { common, method } => {
            let run = prepare(&common)?;
            let method = method.parse().map_err(validation)?;
            let grid = robustcredit::TimeGrid::new(run.model.horizon(), run.grid_steps);
            let prices = solve_prices(&run.model, grid).map_err(|e| numerical(e.to_string()))?;
            let a1 = robustcredit::pricing::check_assumption_a1(&prices, &run.model, grid);
            if !a1.is_clean() {
                return Err(numerical(format!(
                    "depreciation matrix rank-deficient at {} grid points (min sigma {:.3e})",
                    a1.flags.len(),
                    a1.min_sigma
                )));
            }
            let solution =
                solve_all(&run.model, grid, method).map_err(|e| numerical(e.to_string()))?;
            let table = PolicyTable::compute(&run.model, &prices, &solution, grid)
                .map_err(|e| numerical(e.to_string()))?;
            write_file(
                &run.out_dir,
                "policy.csv",
                &output::policy_csv(&run.model, &table),
            )?;
            write_manifest(
                &run,
                &format!(
                    "policy --config {} --method {}",
                    run.config_path.display(),
                    method.label()
                ),
                &[(
                    "max_foc_residual",
                    output::fmt_f64(table.max_foc_residual()),
                )],
            )?;
            Ok(ExitCode::SUCCESS)
        }

        Command::Simulate {
            common,
            method,
            paths,
            seed,
            measure,
            v0,
            state,
            t0,
        } => {
            let run = prepare(&common)?;
            let method = method.parse().map_err(validation)?;
            let measure = parse_measure(&measure)?;
            let z0 = parse_state(&run.model, &state)?;
            let grid = robustcredit::TimeGrid::new(run.model.horizon(), run.grid_steps);
            let prices = solve_prices(&run.model, grid).map_err(|e| numerical(e.to_string()))?;
            let solution =
                solve_all(&run.model, grid, method).map_err(|e| numerical(e.to_string()))?;
            let table = PolicyTable::compute(&run.model, &prices, &solution, grid)
                .map_err(|e| numerical(e.to_string()))?;
            let sim = SimConfig {
                paths,
                seed,
                measure,
                v0,
                z0,
                t0,
            };
            let stats = simulate_paths(
                &run.model,
                &solution,
                &prices,
                &PolicyInput::Optimal(&table),
                &sim,
            )
            .map_err(|e| numerical(e.to_string()))?;

            let target = value_function(&solution, run.model.gamma(), t0, z0, v0)
                .map_err(|e| numerical(e.to_string()))?;
            let mut rows = vec![
                ("objective".to_string(), stats.objective, Some(target)),
                ("utility".to_string(), stats.utility, None),
                ("penalty".to_string(), stats.penalty, None),
            ];
            match measure {
                MeasureSpec::Reference => rows.push(("eta".into(), stats.eta, Some(1.0))),
                _ => rows.push(("eta".into(), stats.eta, None)),
            }
            rows.push(("log_eta".into(), stats.log_eta, None));

            // under the reference measure also report the compensated-jump
            // and η-martingale diagnostics
            if measure == MeasureSpec::Reference {
                let diag = martingale_diagnostics(&run.model, &solution, &prices, &sim)
                    .map_err(|e| numerical(e.to_string()))?;
                for (i, row) in diag.xi.iter().enumerate() {
                    for (c, s) in row.iter().enumerate() {
                        rows.push((
                            format!("xi_{}_t{:.2}", i + 1, diag.checkpoints[c]),
                            *s,
                            Some(0.0),
                        ));
                    }
                }
            }

            write_file(&run.out_dir, "mc_summary.csv", &output::mc_csv(&rows))?;
            println!(
                "objective {:.6} ± {:.6} vs U(v0)B(t0) = {:.6} (z = {:+.2}), \
                 mean defaults {:.4}",
                stats.objective.mean,
                stats.objective.std_error,
                target,
                stats.objective.z_score(target),
                stats.mean_defaults
            );
            write_manifest(
                &run,
                &format!(
                    "simulate --config {} --paths {paths} --seed {seed} --v0 {v0} --t0 {t0} \
                     --state {} --method {}",
                    run.config_path.display(),
                    z0.bitstring(),
                    method.label()
                ),
                &[(
                    "objective_z",
                    format!("{:+.3}", stats.objective.z_score(target)),
                )],
            )?;
            Ok(ExitCode::SUCCESS)
        }

        Command::Sweep {
            common,
            method,
            param,
            values,
            tie_risk_neutral,
            obs_state,
        } => {
            let run = prepare(&common)?;
            let method = method.parse().map_err(validation)?;
            let param = SweepParam::parse(&param, run.model.n_obligors())
                .map_err(|e| validation(e.to_string()))?;
            let values_vec = parse_values(&values)?;
            let obs = parse_state(&run.model, &obs_state)?;
            let spec = SweepSpec {
                param,
                values: values_vec,
                tie_risk_neutral,
                obs_state: obs,
                obs_time: 0.0,
                method,
            };
            let table = run_sweep(&run.model, &spec).map_err(|e| numerical(e.to_string()))?;
            let failures = table.rows.iter().filter(|r| r.error.is_some()).count();
            write_file(
                &run.out_dir,
                "sweep.csv",
                &output::sweep_csv(&run.model, &table),
            )?;
            write_manifest(
                &run,
                &format!(
                    "sweep --config {} --param {} --values {values} --method {}{}",
                    run.config_path.display(),
                    table.param_label,
                    method.label(),
                    tie_risk_neutral
                        .map(|f| format!(" --tie-risk-neutral {f}"))
                        .unwrap_or_default()
                ),
                &[
                    ("prices_reused", table.prices_reused.to_string()),
                    ("row_failures", failures.to_string()),
                ],
            )?;
            if failures > 0 {
                eprintln!("warning: {failures} sweep rows failed; see the error column");
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Check { common, method } => {
            let run = prepare(&common)?;
            let method = method.parse().map_err(validation)?;
            let grid = robustcredit::TimeGrid::new(run.model.horizon(), run.grid_steps);
            let report = run_checks(&run.model, grid, method);
            for o in &report.outcomes {
                println!(
                    "CHECK {}: {} — {}",
                    o.name,
                    if o.passed { "PASS" } else { "FAIL" },
                    o.detail
                );
            }
            write_manifest(
                &run,
                &format!(
                    "check --config {} --method {}",
                    run.config_path.display(),
                    method.label()
                ),
                &[("checks_passed", report.all_passed().to_string())],
            )?;
            if report.all_passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(EXIT_CHECK_FAILED))
            }
        }
    }
}
