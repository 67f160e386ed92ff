//! Task catalog and benchmark metrics: the algebraic families and ODE
//! systems used for evaluation, task file IO, fresh-data scoring of
//! predictions, and aggregation (median NMSE, recovery rate, R2-accuracy).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{structural_equal_mod_constants, BinOp, Expr, UnOp};
use crate::fit::{nmse, r_squared};
use crate::grammar::Operator;
use crate::oracle::{
    ControlSpec, DataSource, OdeFieldSource, OdeMode, OdeSystem, OracleError, OracleSpec,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("task {id}: {msg}")]
    Task { id: String, msg: String },
    #[error("unknown suite '{0}'")]
    UnknownSuite(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

fn task_err(id: &str, msg: impl Into<String>) -> BenchError {
    BenchError::Task {
        id: id.to_string(),
        msg: msg.into(),
    }
}

// ---------------------------------------------------------------------------
// Algebraic tasks

/// One regression task over a fixed ground-truth expression. The `expr`
/// field is canonical text so task files stay diffable; it must parse into
/// a literal-only tree (no open constants).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgebraicTask {
    pub id: String,
    pub expr: String,
    pub n_vars: usize,
    pub operators: Vec<Operator>,
    pub ranges: Vec<(f64, f64)>,
}

impl AlgebraicTask {
    pub fn ground_truth(&self) -> Result<Expr, BenchError> {
        let e = crate::expr::parse_expression(&self.expr)
            .map_err(|err| task_err(&self.id, err.to_string()))?;
        if e.open_constant_count() > 0 {
            return Err(task_err(&self.id, "ground truth has open constants"));
        }
        Ok(e)
    }

    pub fn oracle(&self) -> Result<OracleSpec, BenchError> {
        let truth = self.ground_truth()?;
        OracleSpec::new(truth, self.n_vars, self.ranges.clone(), 0.0).map_err(BenchError::from)
    }
}

/// Reads every `*.json` file under `dir` (sorted by file name) as one task
/// each. An empty directory is an empty catalog, with a warning on stderr.
pub fn load_catalog(dir: &Path) -> Result<Vec<AlgebraicTask>, BenchError> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|source| BenchError::Io {
            path: dir.display().to_string(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        eprintln!("warning: no task files in {}", dir.display());
    }
    let mut tasks = Vec::with_capacity(files.len());
    for path in files {
        let text = fs::read_to_string(&path).map_err(|source| BenchError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let task: AlgebraicTask = serde_json::from_str(&text)
            .map_err(|err| task_err(&path.display().to_string(), err.to_string()))?;
        // Fail at load time, not mid-benchmark.
        task.ground_truth()?;
        tasks.push(task);
    }
    Ok(tasks)
}

/// Writes one `<id>.json` per task.
pub fn save_catalog(tasks: &[AlgebraicTask], dir: &Path) -> Result<(), BenchError> {
    fs::create_dir_all(dir).map_err(|source| BenchError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    for t in tasks {
        let path = dir.join(format!("{}.json", t.id));
        let body = serde_json::to_string_pretty(t).expect("task serializes");
        fs::write(&path, body).map_err(|source| BenchError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Built-in algebraic catalogs

const TRIG_OPS: [Operator; 5] = [
    Operator::Add,
    Operator::Sub,
    Operator::Mul,
    Operator::Sin,
    Operator::Cos,
];

/// Sampling range for the trigonometric families. The sources of these
/// tasks publish expressions but not input distributions, so the range is
/// our convention, recorded in every task file.
const TRIG_RANGE: (f64, f64) = (-3.0, 3.0);

/// The fixed ten-expression suite over 2 variables, 1 single term and
/// 1 cross term.
pub fn sincos211_tasks() -> Vec<AlgebraicTask> {
    const EXPRS: [&str; 10] = [
        "-0.167*sin(x0)*cos(x1)+0.4467*cos(x0)-0.2736",
        "0.6738*x0-0.5057*sin(x0)*sin(x1)+0.8987",
        "-0.5784*x0*x1+0.556*cos(x1)+0.8266",
        "0.0882*x0-0.7944*sin(x0)*sin(x1)+0.4847",
        "-0.7262*sin(x1)*cos(x0)-0.006*cos(x1)-0.9218",
        "0.189*x0*x1-0.7125*cos(x1)-0.4207",
        "0.2589*x0*sin(x1)+0.1977*x1-0.7504",
        "-0.2729*x0*sin(x1)-0.7014*x1+0.3248",
        "-0.2582*x0-0.8355*x1*cos(x0)-0.5898",
        "0.1052*x0*x1+0.0321*x0-0.9554",
    ];
    EXPRS
        .iter()
        .enumerate()
        .map(|(i, e)| AlgebraicTask {
            id: format!("prog-{i}"),
            expr: (*e).to_string(),
            n_vars: 2,
            operators: TRIG_OPS.to_vec(),
            ranges: vec![TRIG_RANGE; 2],
        })
        .collect()
}

/// The 4-variable two-cross-product target from the worked examples.
pub fn xprod_task() -> AlgebraicTask {
    AlgebraicTask {
        id: "xprod".to_string(),
        expr: "x0*x2-x1*x3".to_string(),
        n_vars: 4,
        operators: vec![Operator::Add, Operator::Sub, Operator::Mul],
        ranges: vec![(-5.0, 5.0); 4],
    }
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// A term factor: the bare variable or a unary wrap of it, drawn uniformly
/// from what the operator menu allows.
fn wrap_var(var: usize, uns: &[Option<UnOp>], rng: &mut ChaCha8Rng) -> Expr {
    match uns[rng.gen_range(0..uns.len())] {
        None => Expr::var(var),
        Some(UnOp::Sin) => Expr::sin(Expr::var(var)),
        Some(UnOp::Cos) => Expr::cos(Expr::var(var)),
    }
}

/// Random tasks shaped like the fixed suites: `n_cross` two-variable cross
/// terms, `n_single` one-variable terms, plus an offset, all with uniform
/// (-1, 1) coefficients rounded to 4 decimals. Same seed, same task list.
pub fn generate_family(
    n_vars: usize,
    n_single: usize,
    n_cross: usize,
    operators: &[Operator],
    count: usize,
    seed: u64,
) -> Vec<AlgebraicTask> {
    assert!(n_vars >= 2, "cross terms need at least two variables");
    let mut uns: Vec<Option<UnOp>> = vec![None];
    if operators.contains(&Operator::Sin) {
        uns.push(Some(UnOp::Sin));
    }
    if operators.contains(&Operator::Cos) {
        uns.push(Some(UnOp::Cos));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|t| {
            let mut terms: Vec<Expr> = Vec::new();
            for _ in 0..n_cross {
                let i = rng.gen_range(0..n_vars);
                let j = (i + rng.gen_range(1..n_vars)) % n_vars;
                let coeff = round4(rng.gen_range(-1.0..1.0));
                let f = wrap_var(i, &uns, &mut rng);
                let g = wrap_var(j, &uns, &mut rng);
                terms.push(Expr::mul(Expr::lit(coeff), Expr::mul(f, g)));
            }
            for _ in 0..n_single {
                let i = rng.gen_range(0..n_vars);
                let coeff = round4(rng.gen_range(-1.0..1.0));
                let f = wrap_var(i, &uns, &mut rng);
                terms.push(Expr::mul(Expr::lit(coeff), f));
            }
            terms.push(Expr::lit(round4(rng.gen_range(-1.0..1.0))));
            let expr = terms
                .into_iter()
                .reduce(Expr::add)
                .expect("at least the offset term");
            AlgebraicTask {
                id: format!("prog-{t}"),
                expr: expr.to_canonical_string(None),
                n_vars,
                operators: operators.to_vec(),
                ranges: vec![TRIG_RANGE; n_vars],
            }
        })
        .collect()
}

/// The 11-term 5-variable expression embedded by the large-scale tasks.
pub fn large_scale_template() -> Expr {
    crate::expr::parse_expression(
        "-0.4156*x0*x1-0.1399*x2*cos(x1)+0.0438*x2+0.9508*x3*sin(x1)+0.2319*x3\
         -0.6808*x4*cos(x3)-0.4468*x4+0.0585*sin(x0)+0.6224*cos(x1)\
         -0.8638*cos(x2)*cos(x3)+0.959",
    )
    .expect("template parses")
}

fn relabel_vars(e: &Expr, map: &[usize]) -> Expr {
    match e {
        Expr::Var(i) => Expr::Var(map[*i]),
        Expr::Unary(op, c) => Expr::Unary(*op, Box::new(relabel_vars(c, map))),
        Expr::Binary(op, l, r) => Expr::Binary(
            *op,
            Box::new(relabel_vars(l, map)),
            Box::new(relabel_vars(r, map)),
        ),
        other => other.clone(),
    }
}

/// Tasks over `n_vars` total variables where only 5 contribute: each task
/// relabels the template's variables onto a random 5-subset. The search
/// still sees all `n_vars` inputs, so difficulty grows with `n_vars` while
/// the target complexity stays fixed.
pub fn large_scale_tasks(n_vars: usize, count: usize, seed: u64) -> Vec<AlgebraicTask> {
    assert!(n_vars >= 5, "the template uses 5 variables");
    let template = large_scale_template();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|t| {
            let mut all: Vec<usize> = (0..n_vars).collect();
            all.shuffle(&mut rng);
            let map = &all[..5];
            AlgebraicTask {
                id: format!("prog-{t}"),
                expr: relabel_vars(&template, map).to_canonical_string(None),
                n_vars,
                operators: TRIG_OPS.to_vec(),
                ranges: vec![TRIG_RANGE; n_vars],
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// ODE systems

/// Lorenz attractor with sigma=10, rho=28, beta=8/3.
pub fn lorenz() -> OdeSystem {
    let x = Expr::var;
    let fields = vec![
        Expr::mul(Expr::lit(10.0), Expr::sub(x(1), x(0))),
        Expr::sub(
            Expr::mul(x(0), Expr::sub(Expr::lit(28.0), x(2))),
            x(1),
        ),
        Expr::sub(
            Expr::mul(x(0), x(1)),
            Expr::mul(Expr::lit(8.0 / 3.0), x(2)),
        ),
    ];
    // State ranges chosen to cover the attractor; the source system gives
    // none.
    let ranges = vec![(-10.0, 10.0), (-10.0, 10.0), (0.0, 40.0)];
    let params = BTreeMap::from([
        ("sigma".to_string(), 10.0),
        ("rho".to_string(), 28.0),
        ("beta".to_string(), 8.0 / 3.0),
    ]);
    OdeSystem::new("lorenz", fields, ranges, params).expect("lorenz system is well formed")
}

/// Yeast glycolysis oscillations over 7 state variables. The two rational
/// terms carry the fixed exponent q=4 written out as products, since the
/// expression language has no power operator.
pub fn glycolysis() -> OdeSystem {
    let x = Expr::var;
    // 1 + (x5/K1)^4 with K1 = 0.52.
    let pow4 = || {
        let r = Expr::div(x(5), Expr::lit(0.52));
        Expr::mul(
            Expr::mul(r.clone(), r.clone()),
            Expr::mul(r.clone(), r),
        )
    };
    let denom = || Expr::add(Expr::lit(1.0), pow4());
    // k1*x0*x5 / (1 + (x5/K1)^4), the glucose consumption flux.
    let flux = |scale: f64| {
        Expr::div(
            Expr::mul(Expr::mul(Expr::lit(scale), x(0)), x(5)),
            denom(),
        )
    };
    // k2*x1*(N - x4)
    let v2 = || Expr::mul(Expr::mul(Expr::lit(6.0), x(1)), Expr::sub(Expr::lit(1.0), x(4)));
    // k3*x2*(A - x5), optionally doubled.
    let v3 = |scale: f64| {
        Expr::mul(
            Expr::mul(Expr::lit(scale), x(2)),
            Expr::sub(Expr::lit(4.0), x(5)),
        )
    };
    // k4*x3*x4
    let v4 = || Expr::mul(Expr::mul(Expr::lit(100.0), x(3)), x(4));
    // k6*x1*x4
    let v6 = || Expr::mul(Expr::mul(Expr::lit(12.0), x(1)), x(4));
    let fields = vec![
        Expr::sub(Expr::lit(2.5), flux(100.0)),
        Expr::sub(Expr::sub(flux(200.0), v2()), v6()),
        Expr::sub(v2(), v3(16.0)),
        Expr::sub(
            Expr::sub(v3(16.0), v4()),
            Expr::mul(Expr::lit(13.0), Expr::sub(x(3), x(6))),
        ),
        Expr::sub(Expr::sub(v2(), v4()), v6()),
        Expr::sub(
            Expr::add(flux(-200.0), v3(32.0)),
            Expr::mul(Expr::lit(1.28), x(5)),
        ),
        Expr::sub(
            Expr::mul(Expr::lit(1.3), Expr::sub(x(3), x(6))),
            Expr::mul(Expr::lit(1.8), x(6)),
        ),
    ];
    let ranges = vec![
        (0.15, 1.60),
        (0.19, 2.16),
        (0.04, 0.20),
        (0.10, 0.35),
        (0.08, 0.30),
        (0.14, 2.67),
        (0.05, 0.10),
    ];
    let params = BTreeMap::from([
        ("J0".to_string(), 2.5),
        ("k1".to_string(), 100.0),
        ("k2".to_string(), 6.0),
        ("k3".to_string(), 16.0),
        ("k4".to_string(), 100.0),
        ("k5".to_string(), 1.28),
        ("k6".to_string(), 12.0),
        ("K".to_string(), 1.8),
        ("kappa".to_string(), 13.0),
        ("q".to_string(), 4.0),
        ("K1".to_string(), 0.52),
        ("phi".to_string(), 0.1),
        ("N".to_string(), 1.0),
        ("A".to_string(), 4.0),
    ]);
    OdeSystem::new("glycolysis", fields, ranges, params).expect("glycolysis system is well formed")
}

/// Carbone-Veltri triadic MHD model. Damping and cross-helicity terms drop
/// out when their parameter is exactly zero, matching the published zero
/// parameterization.
pub fn mhd(nu: f64, mu: f64, sigma: f64) -> OdeSystem {
    let x = Expr::var;
    let pair = |scale: f64, a: usize, b: usize, c: usize, d: usize| {
        Expr::mul(
            Expr::lit(scale),
            Expr::sub(Expr::mul(x(a), x(b)), Expr::mul(x(c), x(d))),
        )
    };
    let plus_term = |coeff: f64, var: usize, rest: Expr| {
        if coeff == 0.0 {
            rest
        } else {
            Expr::add(Expr::mul(Expr::lit(coeff), x(var)), rest)
        }
    };
    let fields = vec![
        plus_term(-2.0 * nu, 0, pair(4.0, 1, 2, 4, 5)),
        plus_term(-5.0 * nu, 1, pair(-7.0, 0, 2, 3, 5)),
        plus_term(-9.0 * nu, 2, pair(3.0, 0, 1, 3, 4)),
        plus_term(-2.0 * mu, 4, pair(2.0, 5, 1, 2, 4)),
        plus_term(-5.0 * mu, 4, plus_term(sigma, 5, pair(5.0, 2, 3, 0, 5))),
        plus_term(-9.0 * mu, 5, plus_term(sigma, 4, pair(9.0, 4, 0, 1, 3))),
    ];
    let ranges = vec![(-1.0, 1.0); 6];
    let params = BTreeMap::from([
        ("nu".to_string(), nu),
        ("mu".to_string(), mu),
        ("sigma".to_string(), sigma),
    ]);
    OdeSystem::new("mhd", fields, ranges, params).expect("mhd system is well formed")
}

// ---------------------------------------------------------------------------
// Suites

/// How one benchmark task produces data.
#[derive(Debug, Clone)]
pub enum TaskSource {
    Algebraic(AlgebraicTask),
    Ode {
        system: OdeSystem,
        dim: usize,
        mode: OdeMode,
        fd_dt: f64,
    },
}

#[derive(Debug, Clone)]
pub struct BenchTask {
    pub id: String,
    pub operators: Vec<Operator>,
    pub source: TaskSource,
}

impl BenchTask {
    pub fn n_vars(&self) -> usize {
        match &self.source {
            TaskSource::Algebraic(t) => t.n_vars,
            TaskSource::Ode { system, .. } => system.dim,
        }
    }

    pub fn ground_truth(&self) -> Result<Expr, BenchError> {
        match &self.source {
            TaskSource::Algebraic(t) => t.ground_truth(),
            TaskSource::Ode { system, dim, .. } => Ok(system.fields[*dim].clone()),
        }
    }

    pub fn data_source(&self) -> Result<Box<dyn DataSource>, BenchError> {
        match &self.source {
            TaskSource::Algebraic(t) => Ok(Box::new(t.oracle()?)),
            TaskSource::Ode {
                system,
                dim,
                mode,
                fd_dt,
            } => {
                let mut src = OdeFieldSource::direct(system.clone(), *dim);
                src.mode = *mode;
                src.fd_dt = *fd_dt;
                Ok(Box::new(src))
            }
        }
    }

    /// True when the ground truth uses an operator the search menu lacks,
    /// so structural recovery is impossible by construction.
    pub fn out_of_grammar(&self) -> Result<bool, BenchError> {
        let truth = self.ground_truth()?;
        let mut outside = false;
        let ops = &self.operators;
        visit_ops(&truth, &mut |op| outside |= !ops.contains(&op));
        Ok(outside)
    }
}

fn visit_ops(e: &Expr, f: &mut impl FnMut(Operator)) {
    match e {
        Expr::Unary(op, c) => {
            f(match op {
                UnOp::Sin => Operator::Sin,
                UnOp::Cos => Operator::Cos,
            });
            visit_ops(c, f);
        }
        Expr::Binary(op, l, r) => {
            f(match op {
                BinOp::Add => Operator::Add,
                BinOp::Sub => Operator::Sub,
                BinOp::Mul => Operator::Mul,
                BinOp::Div => Operator::Div,
            });
            visit_ops(l, f);
            visit_ops(r, f);
        }
        _ => {}
    }
}

pub struct Suite {
    pub name: String,
    pub tasks: Vec<BenchTask>,
}

fn algebraic_suite(name: &str, tasks: Vec<AlgebraicTask>) -> Suite {
    Suite {
        name: name.to_string(),
        tasks: tasks
            .into_iter()
            .map(|t| BenchTask {
                id: t.id.clone(),
                operators: t.operators.clone(),
                source: TaskSource::Algebraic(t),
            })
            .collect(),
    }
}

fn ode_suite(name: &str, system: OdeSystem, operators: Vec<Operator>, mode: OdeMode) -> Suite {
    let tasks = (0..system.dim)
        .map(|dim| BenchTask {
            id: format!("dx{dim}"),
            operators: operators.clone(),
            source: TaskSource::Ode {
                system: system.clone(),
                dim,
                mode,
                fd_dt: 1e-3,
            },
        })
        .collect();
    Suite {
        name: name.to_string(),
        tasks,
    }
}

/// Seed baked into the generated built-in suites so every checkout sees the
/// same task files.
const BUILTIN_GEN_SEED: u64 = 7;

pub fn builtin_suite_names() -> &'static [&'static str] {
    &[
        "sincos-2-1-1",
        "sincos-3-2-2",
        "sincos-4-4-6",
        "sincos-5-5-5",
        "large-scale-10",
        "large-scale-20",
        "large-scale-30",
        "large-scale-40",
        "large-scale-50",
        "xprod",
        "lorenz",
        "lorenz-fd",
        "glycolysis",
        "mhd",
        "mhd-damped",
    ]
}

pub fn builtin_suite(name: &str) -> Result<Suite, BenchError> {
    let poly = vec![Operator::Add, Operator::Sub, Operator::Mul];
    let rational = vec![Operator::Add, Operator::Sub, Operator::Mul, Operator::Div];
    match name {
        "sincos-2-1-1" => Ok(algebraic_suite(name, sincos211_tasks())),
        "sincos-3-2-2" => Ok(algebraic_suite(
            name,
            generate_family(3, 2, 2, &TRIG_OPS, 10, BUILTIN_GEN_SEED),
        )),
        "sincos-4-4-6" => Ok(algebraic_suite(
            name,
            generate_family(4, 4, 6, &TRIG_OPS, 10, BUILTIN_GEN_SEED),
        )),
        "sincos-5-5-5" => Ok(algebraic_suite(
            name,
            generate_family(5, 5, 5, &TRIG_OPS, 10, BUILTIN_GEN_SEED),
        )),
        "xprod" => Ok(algebraic_suite(name, vec![xprod_task()])),
        "lorenz" => Ok(ode_suite(name, lorenz(), poly, OdeMode::Direct)),
        "lorenz-fd" => Ok(ode_suite(name, lorenz(), poly, OdeMode::FiniteDifference)),
        "glycolysis" => Ok(ode_suite(name, glycolysis(), rational, OdeMode::Direct)),
        "mhd" => Ok(ode_suite(name, mhd(0.0, 0.0, 0.0), poly, OdeMode::Direct)),
        "mhd-damped" => Ok(ode_suite(name, mhd(0.1, 0.2, 0.3), poly, OdeMode::Direct)),
        _ => match name.strip_prefix("large-scale-") {
            Some(n) => {
                let n: usize = n
                    .parse()
                    .map_err(|_| BenchError::UnknownSuite(name.to_string()))?;
                if ![10, 20, 30, 40, 50].contains(&n) {
                    return Err(BenchError::UnknownSuite(name.to_string()));
                }
                Ok(algebraic_suite(
                    name,
                    large_scale_tasks(n, 10, BUILTIN_GEN_SEED),
                ))
            }
            None => Err(BenchError::UnknownSuite(name.to_string())),
        },
    }
}

// ---------------------------------------------------------------------------
// Prediction scoring

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalOutcome {
    pub nmse: f64,
    pub r_squared: f64,
    pub recovered: bool,
}

/// Scores a fitted prediction on a fresh no-control batch drawn with `seed`.
/// `recovered` compares skeletons modulo constants against the ground truth.
pub fn evaluate_prediction(
    task: &BenchTask,
    predicted: &Expr,
    constants: &[f64],
    test_size: usize,
    seed: u64,
) -> Result<EvalOutcome, BenchError> {
    let source = task.data_source()?;
    let batch = source.sample(&ControlSpec::free(), test_size, seed)?;
    let pred = predicted
        .evaluate(constants, batch.x.view())
        .unwrap_or_else(|_| Array1::from_elem(batch.len(), f64::INFINITY));
    let e = nmse(pred.view(), batch.y.view());
    let truth = task.ground_truth()?;
    Ok(EvalOutcome {
        nmse: e,
        r_squared: r_squared(pred.view(), batch.y.view()),
        recovered: structural_equal_mod_constants(predicted, &truth),
    })
}

// ---------------------------------------------------------------------------
// Reports

/// One finished (task, algorithm, seed) cell. Wall time is observed, not
/// part of the deterministic report payload, so it serializes into the
/// separate timing sidecar instead.
#[derive(Debug, Clone, Serialize)]
pub struct TaskReport {
    pub task_id: String,
    pub algorithm: String,
    pub seed: u64,
    pub best_expr: String,
    pub best_expr_fitted: String,
    pub nmse_test: f64,
    pub r_squared: f64,
    /// None when the ground truth is unknown (external task files may omit
    /// it in spirit; built-ins always know it).
    pub recovered: Option<bool>,
    /// False when the engine failed; failed cells are excluded from medians
    /// and counted separately.
    pub completed: bool,
    /// True when the ground truth is unreachable with the task's operator
    /// menu, so `recovered` can never be true.
    pub out_of_grammar: bool,
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchAggregates {
    pub median_nmse: f64,
    /// Fraction of completed cells with recovered == true.
    pub recovery_rate: f64,
    /// Fraction of completed cells with R^2 above 0.9999.
    pub r2_accuracy: f64,
    pub completed: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub suite: String,
    pub algorithm: String,
    pub tasks: Vec<TaskReport>,
    pub aggregates: BenchAggregates,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

pub fn aggregate(suite: &str, algorithm: &str, tasks: Vec<TaskReport>) -> BenchReport {
    let done: Vec<&TaskReport> = tasks.iter().filter(|t| t.completed).collect();
    let nmses: Vec<f64> = done.iter().map(|t| t.nmse_test).collect();
    let n = done.len();
    let recovered = done
        .iter()
        .filter(|t| t.recovered == Some(true))
        .count();
    let accurate = done.iter().filter(|t| t.r_squared > 0.9999).count();
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    BenchReport {
        suite: suite.to_string(),
        algorithm: algorithm.to_string(),
        aggregates: BenchAggregates {
            median_nmse: median(&nmses),
            recovery_rate: frac(recovered),
            r2_accuracy: frac(accurate),
            completed: n,
            total: tasks.len(),
        },
        tasks,
    }
}

/// Plain-text table, one row per cell plus the aggregate line.
pub fn render_table(report: &BenchReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "suite {} | algorithm {}\n",
        report.suite, report.algorithm
    ));
    out.push_str(&format!(
        "{:<14} {:>6} {:>12} {:>10} {:>10} {:>9}\n",
        "task", "seed", "nmse", "r2", "recovered", "time_s"
    ));
    for t in &report.tasks {
        let rec = match (t.completed, t.recovered) {
            (false, _) => "failed",
            (true, Some(true)) => "yes",
            (true, Some(false)) => {
                if t.out_of_grammar {
                    "no*"
                } else {
                    "no"
                }
            }
            (true, None) => "-",
        };
        out.push_str(&format!(
            "{:<14} {:>6} {:>12.4e} {:>10.6} {:>10} {:>9.1}\n",
            t.task_id, t.seed, t.nmse_test, t.r_squared, rec, t.wall_time_s
        ));
    }
    let a = &report.aggregates;
    out.push_str(&format!(
        "median nmse {:.4e} | recovery {:.0}% | r2-accuracy {:.0}% | completed {}/{}\n",
        a.median_nmse,
        a.recovery_rate * 100.0,
        a.r2_accuracy * 100.0,
        a.completed,
        a.total
    ));
    if report.tasks.iter().any(|t| t.out_of_grammar) {
        out.push_str("* ground truth outside the task's operator menu\n");
    }
    out
}

/// CSV export of per-cell rows (includes wall time; not a deterministic
/// artifact).
pub fn to_csv(report: &BenchReport) -> String {
    let mut out = String::from(
        "task_id,algorithm,seed,nmse_test,r_squared,recovered,completed,out_of_grammar,wall_time_s,best_expr_fitted\n",
    );
    for t in &report.tasks {
        let rec = t.recovered.map_or(String::new(), |b| b.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},\"{}\"\n",
            t.task_id,
            t.algorithm,
            t.seed,
            t.nmse_test,
            t.r_squared,
            rec,
            t.completed,
            t.out_of_grammar,
            t.wall_time_s,
            t.best_expr_fitted.replace('"', "\"\""),
        ));
    }
    out
}

/// Wall times keyed by task id, written alongside the report so the report
/// itself stays byte-stable across repeated runs.
pub fn timings_json(report: &BenchReport) -> String {
    let map: BTreeMap<&str, f64> = report
        .tasks
        .iter()
        .map(|t| (t.task_id.as_str(), t.wall_time_s))
        .collect();
    serde_json::to_string_pretty(&map).expect("timings serialize")
}
