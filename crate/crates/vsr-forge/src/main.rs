use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vsr_forge::config::{Algorithm, Profile};
use vsr_forge::runner::{self, RunnerError};

#[derive(Parser)]
#[command(name = "vsr-forge", version, about = "Vertical symbolic regression over control-variable experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one discovery described by a JSON config file.
    Run {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Override the config file's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config file's profile (desk or full).
        #[arg(long)]
        profile: Option<Profile>,
        /// Worker threads; falls back to VSR_FORGE_WORKERS, then all cores.
        #[arg(long)]
        workers: Option<usize>,
        /// Directory for report.json and run_log.jsonl.
        #[arg(long, default_value = "vsr-out")]
        out: PathBuf,
        /// Dotted-path config override, e.g. --set vsr.k_trials=5. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run a built-in suite: every task under every seed, with an aggregate table.
    Bench {
        /// Suite name, e.g. sincos-2-1-1, xprod, lorenz.
        #[arg(long)]
        suite: String,
        /// vsr-dpg, vsr-gp, or gp.
        #[arg(long)]
        algorithm: Algorithm,
        #[arg(long, default_value = "desk")]
        profile: Profile,
        /// Comma-separated seed list.
        #[arg(long, default_value = "0")]
        seeds: String,
        /// Worker threads; falls back to VSR_FORGE_WORKERS, then all cores.
        #[arg(long)]
        workers: Option<usize>,
        /// Directory for report.json, report.csv and timings.json.
        #[arg(long, default_value = "vsr-out")]
        out: PathBuf,
    },
    /// Sample one control-variable batch from a task's data oracle.
    GenData {
        /// Task reference: suite name, suite/task-id, or a task JSON file.
        #[arg(long)]
        task: String,
        /// Variables to hold fixed across the batch, e.g. "x2,x3".
        #[arg(long)]
        ctrl: Option<String>,
        /// Rows to sample.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV; the metadata sidecar lands next to it.
        #[arg(long, default_value = "data.csv")]
        out: PathBuf,
    },
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, RunnerError> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse()
                .map_err(|_| RunnerError::Usage(format!("bad seed '{p}'")))
        })
        .collect()
}

fn dispatch(cmd: Command) -> Result<(), RunnerError> {
    match cmd {
        Command::Run {
            config,
            seed,
            profile,
            workers,
            out,
            set,
        } => {
            let arts = runner::cmd_run(&config, &set, seed, profile, workers, &out)?;
            let r = &arts.report;
            println!("task       {}", r["task_id"].as_str().unwrap_or("?"));
            println!("algorithm  {}", r["algorithm"].as_str().unwrap_or("?"));
            println!("best       {}", r["engine"]["best_expr_fitted"].as_str().unwrap_or("?"));
            println!("test nmse  {}", r["test"]["nmse"]);
            println!("test r^2   {}", r["test"]["r_squared"]);
            println!("recovered  {}", r["test"]["recovered"]);
            println!("report     {}", arts.report_path.display());
            println!("log        {}", arts.log_path.display());
            Ok(())
        }
        Command::Bench {
            suite,
            algorithm,
            profile,
            seeds,
            workers,
            out,
        } => {
            let seeds = parse_seeds(&seeds)?;
            let report = runner::cmd_bench(&suite, algorithm, profile, &seeds, workers, &out)?;
            print!("{}", runner::bench_table(&report));
            println!("artifacts  {}", out.display());
            Ok(())
        }
        Command::GenData {
            task,
            ctrl,
            n,
            seed,
            out,
        } => {
            let sidecar = runner::cmd_gen_data(&task, ctrl.as_deref(), n, seed, &out)?;
            println!("data       {}", out.display());
            println!("sidecar    {}", sidecar.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(runner::exit_code(&e) as u8)
        }
    }
}
