use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cli_harness::{
    estimate, load_config, read_rows_csv, render_table, rows_to_csv, simulate, solve_analytic,
    summarize, trace, write_atomic, CliError, ExampleId, Resolved, RunConfig, SolverSpec,
};

#[derive(Parser)]
#[command(
    name = "fredholm-se",
    version,
    about = "Estimation via deep neural networks and Fredholm integral equations"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one replication and print a JSON report.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the replication sweep and write one CSV row per (rep, solver).
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV; overrides the config's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a simulation rows CSV per solver label.
    Report {
        rows: PathBuf,
        /// Also write the summary as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one replication (reps = 1) and write the optimizer trace CSV.
    Trace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve an analytic fixture and report loss and sup-norm error.
    Solve {
        /// Fixture name, e.g. analytic:degenerate.
        #[arg(long)]
        problem: String,
        /// "poly:<degree>", "neural", or "neural:<width>:<depth>".
        #[arg(long)]
        solver: String,
        /// Training steps (neural only).
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value_t = 64)]
        j1: usize,
        #[arg(long, default_value_t = 64)]
        j2: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Adam learning rate (neural only).
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
    },
}

fn parse_solver_flag(s: &str) -> Result<SolverSpec, CliError> {
    if let Some(d) = s.strip_prefix("poly:") {
        let degree = d.parse::<usize>().map_err(|_| {
            CliError::Config(format!("solver: invalid polynomial degree {d:?}"))
        })?;
        return Ok(SolverSpec::Polynomial { degree });
    }
    if s == "neural" {
        return Ok(SolverSpec::Neural { width: None, depth: None });
    }
    if let Some(rest) = s.strip_prefix("neural:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() == 2 {
            let width = parts[0].parse::<usize>().ok();
            let depth = parts[1].parse::<usize>().ok();
            if let (Some(w), Some(d)) = (width, depth) {
                return Ok(SolverSpec::Neural { width: Some(w), depth: Some(d) });
            }
        }
        return Err(CliError::Config(format!(
            "solver: expected neural:<width>:<depth>, got {s:?}"
        )));
    }
    Err(CliError::Config(format!(
        "solver: unknown value {s:?}; expected \"poly:<degree>\", \"neural\", or \
         \"neural:<width>:<depth>\""
    )))
}

fn emit(out: Option<PathBuf>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => {
            write_atomic(&path, text.as_bytes())?;
            println!("wrote {}", path.display());
            Ok(())
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Estimate { config, out } => {
            let resolved = load_config(&config)?.resolve()?;
            match resolved {
                Resolved::Sim(run) => {
                    let report = estimate(&run)?;
                    emit(out.or_else(|| run.out.clone()), &to_json(&report))
                }
                Resolved::Analytic(a) => {
                    let outcome = solve_analytic(&a)?;
                    emit(out.or_else(|| a.out.clone()), &to_json(&outcome))
                }
            }
        }
        Cmd::Simulate { config, out } => {
            let run = load_config(&config)?.resolve()?.into_sim("simulate")?;
            let out_path = out.or_else(|| run.out.clone()).ok_or_else(|| {
                CliError::Config(
                    "out: required for simulate (pass --out or set \"out\" in the config)".into(),
                )
            })?;
            let rows = simulate(&run)?;
            write_atomic(&out_path, rows_to_csv(&rows, run.q).as_bytes())?;
            println!("wrote {} rows to {}", rows.len(), out_path.display());
            Ok(())
        }
        Cmd::Report { rows, out } => {
            let (rows, q) = read_rows_csv(&rows)?;
            let summaries = summarize(&rows, q);
            print!("{}", render_table(&summaries));
            if let Some(path) = out {
                write_atomic(&path, to_json(&summaries).as_bytes())?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Cmd::Trace { config, out } => {
            let run = load_config(&config)?.resolve()?.into_sim("trace")?;
            let out_path = out.or_else(|| run.out.clone()).ok_or_else(|| {
                CliError::Config(
                    "out: required for trace (pass --out or set \"out\" in the config)".into(),
                )
            })?;
            let (csv, report) = trace(&run)?;
            write_atomic(&out_path, csv.as_bytes())?;
            println!(
                "wrote {} trace rows to {}; converged = {}",
                report.iterations,
                out_path.display(),
                report.converged
            );
            Ok(())
        }
        Cmd::Solve { problem, solver, steps, j1, j2, seed, lr } => {
            let example: ExampleId = problem
                .parse()
                .map_err(|e: String| CliError::Config(e.replace("example:", "problem:")))?;
            if !matches!(example, ExampleId::Analytic(_)) {
                return Err(CliError::Config(format!(
                    "problem: expected analytic:<id>, got \"{example}\""
                )));
            }
            let mut cfg = RunConfig::bare(example);
            cfg.solver = Some(parse_solver_flag(&solver)?);
            cfg.j1 = Some(j1);
            cfg.j2 = Some(j2);
            cfg.max_iter = Some(steps);
            cfg.base_seed = Some(seed);
            if matches!(cfg.solver, Some(SolverSpec::Neural { .. })) {
                cfg.lr_omega = Some(lr);
            }
            let Resolved::Analytic(a) = cfg.resolve()? else {
                unreachable!("analytic example resolves to the analytic arm");
            };
            let outcome = solve_analytic(&a)?;
            println!("problem {}", outcome.problem);
            println!("solver {}", outcome.solver);
            println!("loss_K {:e}", outcome.loss_k);
            println!("sup_error {:e}", outcome.sup_error);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code: u8 = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
