//! Command execution behind the CLI: single runs, benchmark sweeps, and
//! data generation. Everything artifact-shaped (reports, logs, CSV) goes
//! through here so the binary stays a flag parser.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

use crate::bench::{
    aggregate, builtin_suite, builtin_suite_names, evaluate_prediction, render_table, timings_json,
    to_csv, BenchError, BenchReport, BenchTask, TaskReport,
};
use crate::config::{
    engine_defaults, load_run_file, Algorithm, ConfigError, EngineConfig, Profile, ResolvedRun,
    TaskRef,
};
use crate::expr::Expr;
use crate::gp::{gp_search, vsr_gp_search, GpError};
use crate::oracle::ControlSpec;
use crate::util::derive_seed;
use crate::vsr::{run_vsr, VsrError, VsrReport};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("engine: {0}")]
    Engine(String),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<VsrError> for RunnerError {
    fn from(e: VsrError) -> RunnerError {
        RunnerError::Engine(e.to_string())
    }
}

impl From<GpError> for RunnerError {
    fn from(e: GpError) -> RunnerError {
        RunnerError::Engine(e.to_string())
    }
}

impl From<BenchError> for RunnerError {
    fn from(e: BenchError) -> RunnerError {
        RunnerError::Engine(e.to_string())
    }
}

/// 0 success, 1 runtime failure, 2 usage or config error.
pub fn exit_code(e: &RunnerError) -> i32 {
    match e {
        RunnerError::Usage(_) | RunnerError::Config(_) => 2,
        _ => 1,
    }
}

/// Seed stream tag for held-out test batches; disjoint from the engines'
/// internal tags.
const TAG_TEST: u64 = 40;

/// Effective worker count: the flag, else `VSR_FORGE_WORKERS`, else all
/// available cores. Sizes the global fit pool on first use; later calls in
/// the same process keep the existing pool.
pub fn init_workers(flag: Option<usize>) -> usize {
    let wanted = flag
        .or_else(|| {
            std::env::var("VSR_FORGE_WORKERS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .filter(|&w| w > 0);
    if let Some(w) = wanted {
        // Errors only when a pool already exists; that pool stays.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    rayon::current_num_threads()
}

fn write_file(path: &Path, body: &str) -> Result<(), RunnerError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|source| RunnerError::Io {
                path: dir.display().to_string(),
                source,
            })?;
        }
    }
    fs::write(path, body).map_err(|source| RunnerError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// What one engine invocation produced, engine differences flattened away.
pub struct EngineRun {
    pub best_expr: Expr,
    pub constants: Vec<f64>,
    /// Report in the shared schema (the policy loop's layout).
    pub report: VsrReport,
    /// JSON-lines progress log, one line per epoch or generation.
    pub log_lines: Vec<String>,
}

/// Runs the configured engine on the task's data source.
pub fn execute(run: &ResolvedRun) -> Result<EngineRun, RunnerError> {
    let source = run.task.data_source()?;
    match &run.engine {
        EngineConfig::VsrDpg(cfg) => {
            let out = run_vsr(&*source, cfg, run.seed)?;
            let best = out.best().expect("finished run has entries");
            let log_lines = out
                .epoch_logs()
                .map(|l| serde_json::to_string(l).expect("log serializes"))
                .collect();
            Ok(EngineRun {
                best_expr: best.expr.clone(),
                constants: best.constants.clone(),
                report: out.report(),
                log_lines,
            })
        }
        EngineConfig::VsrGp(cfg) => {
            let out = vsr_gp_search(&*source, cfg, run.seed)?;
            let best = out.best().expect("finished run has entries");
            let mut log_lines = Vec::new();
            for r in &out.rounds {
                for g in &r.generations {
                    let mut v = serde_json::to_value(g).expect("log serializes");
                    v["round"] = json!(r.round);
                    log_lines.push(v.to_string());
                }
            }
            Ok(EngineRun {
                best_expr: best.expr.clone(),
                constants: best.constants.clone(),
                report: out.report(),
                log_lines,
            })
        }
        EngineConfig::Gp(cfg) => {
            let out = gp_search(&*source, &run.task.operators, cfg, run.seed)?;
            let log_lines = out
                .history
                .iter()
                .map(|l| serde_json::to_string(l).expect("log serializes"))
                .collect();
            let best = out.best;
            let report = VsrReport {
                seed: run.seed,
                best_expr: best.expr.to_canonical_string(None),
                best_expr_fitted: best.expr.to_canonical_string(Some(&best.constants)),
                best_constants: best.constants.clone(),
                global_nmse: best.nmse,
                r_squared: 1.0 - best.nmse,
                rounds: Vec::new(),
            };
            Ok(EngineRun {
                best_expr: best.expr,
                constants: best.constants,
                report,
                log_lines,
            })
        }
    }
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub report: Value,
    pub report_path: PathBuf,
    pub log_path: PathBuf,
}

/// Executes one configured run end-to-end and writes `report.json` plus
/// `run_log.jsonl` under `out_dir`. The report is a pure function of the
/// config (seeds included), so repeat runs produce identical bytes.
pub fn cmd_run(
    cfg_path: &Path,
    sets: &[String],
    seed: Option<u64>,
    profile: Option<Profile>,
    workers: Option<usize>,
    out_dir: &Path,
) -> Result<RunArtifacts, RunnerError> {
    let file = load_run_file(cfg_path, sets, seed, profile)?;
    let run = file.resolve()?;
    init_workers(workers);
    let cell = run_cell(&run)?;
    let report = json!({
        "algorithm": run.algorithm.as_str(),
        "task_id": run.task.id,
        "n_vars": run.task.n_vars(),
        "out_of_grammar": run.task.out_of_grammar()?,
        "test": {
            "size": run.test_size,
            "nmse": cell.report_cell.nmse_test,
            "r_squared": cell.report_cell.r_squared,
            "recovered": cell.report_cell.recovered,
        },
        "engine": serde_json::to_value(&cell.engine_report).expect("report serializes"),
    });
    let report_path = out_dir.join("report.json");
    let log_path = out_dir.join("run_log.jsonl");
    let mut body = serde_json::to_string_pretty(&report).expect("report serializes");
    body.push('\n');
    write_file(&report_path, &body)?;
    let mut log = cell.log_lines.join("\n");
    if !log.is_empty() {
        log.push('\n');
    }
    write_file(&log_path, &log)?;
    Ok(RunArtifacts {
        report,
        report_path,
        log_path,
    })
}

struct CellOutcome {
    report_cell: TaskReport,
    engine_report: VsrReport,
    log_lines: Vec<String>,
}

/// One (task, algorithm, seed) execution plus held-out scoring.
fn run_cell(run: &ResolvedRun) -> Result<CellOutcome, RunnerError> {
    let started = Instant::now();
    let eng = execute(run)?;
    let wall_time_s = started.elapsed().as_secs_f64();
    let eval = evaluate_prediction(
        &run.task,
        &eng.best_expr,
        &eng.constants,
        run.test_size,
        derive_seed(run.seed, &[TAG_TEST]),
    )?;
    Ok(CellOutcome {
        report_cell: TaskReport {
            task_id: run.task.id.clone(),
            algorithm: run.algorithm.as_str().to_string(),
            seed: run.seed,
            best_expr: eng.report.best_expr.clone(),
            best_expr_fitted: eng.report.best_expr_fitted.clone(),
            nmse_test: eval.nmse,
            r_squared: eval.r_squared,
            recovered: Some(eval.recovered),
            completed: true,
            out_of_grammar: run.task.out_of_grammar()?,
            wall_time_s,
        },
        engine_report: eng.report,
        log_lines: eng.log_lines,
    })
}

fn failed_cell(task: &BenchTask, algorithm: Algorithm, seed: u64, wall_time_s: f64) -> TaskReport {
    TaskReport {
        task_id: task.id.clone(),
        algorithm: algorithm.as_str().to_string(),
        seed,
        best_expr: String::new(),
        best_expr_fitted: String::new(),
        nmse_test: f64::INFINITY,
        r_squared: f64::NEG_INFINITY,
        recovered: None,
        completed: false,
        out_of_grammar: task.out_of_grammar().unwrap_or(false),
        wall_time_s,
    }
}

/// Runs a whole suite: every task under every seed, cells in parallel.
/// Writes `report.json`, `report.csv` and `timings.json` under `out_dir`
/// and returns the aggregate report.
pub fn cmd_bench(
    suite_name: &str,
    algorithm: Algorithm,
    profile: Profile,
    seeds: &[u64],
    workers: Option<usize>,
    out_dir: &Path,
) -> Result<BenchReport, RunnerError> {
    if seeds.is_empty() {
        return Err(RunnerError::Usage("at least one seed is required".into()));
    }
    let suite = builtin_suite(suite_name).map_err(|_| {
        RunnerError::Usage(format!(
            "unknown suite '{suite_name}' (built-ins: {})",
            builtin_suite_names().join(", ")
        ))
    })?;
    init_workers(workers);
    let cells: Vec<(&BenchTask, u64)> = suite
        .tasks
        .iter()
        .flat_map(|t| seeds.iter().map(move |&s| (t, s)))
        .collect();
    let rows: Vec<TaskReport> = cells
        .par_iter()
        .map(|(task, seed)| {
            let run = ResolvedRun {
                algorithm,
                task: (*task).clone(),
                seed: *seed,
                test_size: 256,
                engine: engine_defaults(algorithm, profile, task.operators.clone()),
            };
            let started = Instant::now();
            run_cell(&run).map_or_else(
                |_| failed_cell(task, algorithm, *seed, started.elapsed().as_secs_f64()),
                |cell| cell.report_cell,
            )
        })
        .collect();
    let report = aggregate(&suite.name, algorithm.as_str(), rows);
    let mut body = serde_json::to_string_pretty(&report).expect("report serializes");
    body.push('\n');
    write_file(&out_dir.join("report.json"), &body)?;
    write_file(&out_dir.join("report.csv"), &to_csv(&report))?;
    write_file(&out_dir.join("timings.json"), &timings_json(&report))?;
    Ok(report)
}

/// Renders the aggregate table for the console.
pub fn bench_table(report: &BenchReport) -> String {
    render_table(report)
}

/// Parses "x2,x3" or "2,3" into variable indices.
fn parse_ctrl(spec: &str, n_vars: usize) -> Result<Vec<usize>, RunnerError> {
    let mut vars = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let digits = part.strip_prefix('x').unwrap_or(part);
        let idx: usize = digits
            .parse()
            .map_err(|_| RunnerError::Usage(format!("bad control variable '{part}'")))?;
        if idx >= n_vars {
            return Err(RunnerError::Usage(format!(
                "control variable x{idx} out of range for {n_vars} inputs"
            )));
        }
        vars.push(idx);
    }
    Ok(vars)
}

/// Samples one control-variable batch from a task's oracle and writes the
/// CSV plus its sidecar (`<out stem>.sidecar.json`).
pub fn cmd_gen_data(
    task_ref: &str,
    ctrl: Option<&str>,
    n: usize,
    seed: u64,
    out: &Path,
) -> Result<PathBuf, RunnerError> {
    if n == 0 {
        return Err(RunnerError::Usage("sample count must be positive".into()));
    }
    let task = TaskRef::parse(task_ref).resolve()?;
    let source = task.data_source()?;
    let ctrl = match ctrl {
        Some(spec) => ControlSpec::controlling(parse_ctrl(spec, task.n_vars())?),
        None => ControlSpec::free(),
    };
    let batch = source.sample(&ctrl, n, seed).map_err(BenchError::from)?;
    write_file(out, &batch.to_csv())?;
    let sidecar = out.with_extension("sidecar.json");
    write_file(&sidecar, &batch.sidecar_json())?;
    Ok(sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn write_cfg(dir: &Path, doc: &Value) -> PathBuf {
        let p = dir.join("run.json");
        fs::write(&p, serde_json::to_string_pretty(doc).unwrap()).unwrap();
        p
    }

    // A configuration small enough to finish in well under a second.
    fn tiny_gp_cfg() -> Value {
        json!({
            "algorithm": "gp",
            "task": {"suite": "xprod"},
            "seed": 3,
            "gp": {"pop_size": 16, "generations": 3, "data_batch_size": 64}
        })
    }

    #[test]
    fn run_writes_report_and_log_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_cfg(dir.path(), &tiny_gp_cfg());
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let a = cmd_run(&cfg, &[], None, None, Some(1), &out_a).unwrap();
        let b = cmd_run(&cfg, &[], None, None, Some(1), &out_b).unwrap();
        let bytes_a = fs::read(&a.report_path).unwrap();
        let bytes_b = fs::read(&b.report_path).unwrap();
        assert_eq!(bytes_a, bytes_b);
        assert_eq!(
            fs::read(&a.log_path).unwrap(),
            fs::read(&b.log_path).unwrap()
        );
        let v: Value = serde_json::from_slice(&bytes_a).unwrap();
        assert_eq!(v["algorithm"], json!("gp"));
        assert_eq!(v["task_id"], json!("xprod"));
        assert!(v["test"]["nmse"].is_number());
        assert!(v["engine"]["best_expr"].is_string());
        // A different seed changes the report.
        let out_c = dir.path().join("c");
        let c = cmd_run(&cfg, &[], Some(4), None, Some(1), &out_c).unwrap();
        assert_ne!(bytes_a, fs::read(&c.report_path).unwrap());
    }

    #[test]
    fn run_rejects_bad_configs_with_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_cfg(dir.path(), &json!({"algorithm": "gp"}));
        let err = cmd_run(&cfg, &[], None, None, Some(1), dir.path()).unwrap_err();
        assert_eq!(exit_code(&err), 2);

        let cfg = write_cfg(
            dir.path(),
            &json!({"algorithm": "gp", "task": {"suite": "xprod"}, "gp": {"pop_sizee": 4}}),
        );
        let err = cmd_run(&cfg, &[], None, None, Some(1), dir.path()).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(err.to_string().contains("pop_sizee"));
    }

    #[test]
    fn bench_runs_cells_and_aggregates() {
        let dir = tempfile::tempdir().unwrap();
        let report = cmd_bench(
            "xprod",
            Algorithm::Gp,
            Profile::Desk,
            &[0, 1],
            Some(1),
            dir.path(),
        )
        .unwrap();
        assert_eq!(report.tasks.len(), 2);
        assert_eq!(report.aggregates.total, 2);
        assert!(dir.path().join("report.json").exists());
        assert!(dir.path().join("report.csv").exists());
        assert!(dir.path().join("timings.json").exists());
        let table = bench_table(&report);
        assert!(table.contains("xprod"));

        let err = cmd_bench(
            "no-such",
            Algorithm::Gp,
            Profile::Desk,
            &[0],
            Some(1),
            dir.path(),
        )
        .unwrap_err();
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn gen_data_writes_csv_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data.csv");
        let sidecar = cmd_gen_data("xprod", Some("x2,x3"), 50, 9, &out).unwrap();
        let csv = fs::read_to_string(&out).unwrap();
        assert_eq!(csv.lines().count(), 51);
        let meta: Value = serde_json::from_str(&fs::read_to_string(&sidecar).unwrap()).unwrap();
        assert_eq!(meta["seed"], json!(9));

        // Controlled columns hold one value per batch.
        let mut cols: Vec<Vec<&str>> = vec![Vec::new(); 5];
        for line in csv.lines().skip(1) {
            for (i, cell) in line.split(',').enumerate() {
                cols[i].push(cell);
            }
        }
        for ctrl_col in [2, 3] {
            assert!(cols[ctrl_col].windows(2).all(|w| w[0] == w[1]));
        }
        assert!(cols[0].windows(2).any(|w| w[0] != w[1]));

        let err = cmd_gen_data("xprod", None, 0, 9, &out).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        let err = cmd_gen_data("xprod", Some("x9"), 5, 9, &out).unwrap_err();
        assert_eq!(exit_code(&err), 2);

        // Same seed, same bytes.
        let out2 = dir.path().join("data2.csv");
        cmd_gen_data("xprod", Some("x2,x3"), 50, 9, &out2).unwrap();
        assert_eq!(fs::read(&out).unwrap(), fs::read(&out2).unwrap());
    }
}
