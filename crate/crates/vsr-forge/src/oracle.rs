//! Data oracles for control-variable experiments.
//!
//! An oracle wraps an unknown system (an algebraic ground truth or one
//! component of an ODE right-hand side) and answers batch queries: the
//! caller names which variables are controlled, the oracle draws one fresh
//! value per controlled variable, holds it fixed across the batch, samples
//! the free variables independently per row, and returns inputs plus noisy
//! outputs. Seeds fully determine a batch.

use crate::expr::{Expr, Program};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("ground truth must not contain open constants")]
    GroundTruthHasConstants,
    #[error("expected {expected} ranges, got {got}")]
    RangeCountMismatch { expected: usize, got: usize },
    #[error("range {index} is empty or not finite")]
    BadRange { index: usize },
    #[error("variable x{var} is out of range for a {n_vars}-variable oracle")]
    VarOutOfRange { var: usize, n_vars: usize },
    #[error("ground truth produced a non-finite output at row {row}")]
    NonFiniteOutput { row: usize },
    #[error("ODE component {dim} is out of range for a {n}-dimensional system")]
    BadComponent { dim: usize, n: usize },
    #[error("expression error: {0}")]
    Expr(#[from] crate::expr::ExprError),
}

/// Which variables an experiment holds fixed. Values are drawn per batch
/// unless pinned explicitly.
#[derive(Debug, Clone, Default)]
pub struct ControlSpec {
    pub controlled: BTreeSet<usize>,
    pub pinned: BTreeMap<usize, f64>,
}

impl ControlSpec {
    pub fn free() -> ControlSpec {
        ControlSpec::default()
    }

    pub fn controlling(vars: impl IntoIterator<Item = usize>) -> ControlSpec {
        ControlSpec {
            controlled: vars.into_iter().collect(),
            pinned: BTreeMap::new(),
        }
    }

    pub fn pin(mut self, var: usize, value: f64) -> ControlSpec {
        self.controlled.insert(var);
        self.pinned.insert(var, value);
        self
    }
}

/// One batch of experiment data. Row `i` of `x` pairs with `y[i]`;
/// controlled variables repeat their drawn value down the whole column.
#[derive(Debug, Clone)]
pub struct DataBatch {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub controlled: BTreeMap<usize, f64>,
    pub seed: u64,
}

impl DataBatch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_vars(&self) -> usize {
        self.x.ncols()
    }

    /// CSV with header `x0,...,x{n-1},y`, full-precision values.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for j in 0..self.n_vars() {
            s.push_str(&format!("x{j},"));
        }
        s.push_str("y\n");
        for (row, y) in self.x.outer_iter().zip(self.y.iter()) {
            for v in row.iter() {
                s.push_str(&format!("{v:?},"));
            }
            s.push_str(&format!("{y:?}\n"));
        }
        s
    }

    /// Sidecar metadata describing how the batch was drawn.
    pub fn sidecar_json(&self) -> String {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            controlled: BTreeMap<String, f64>,
            seed: u64,
            n_rows: usize,
            n_vars: usize,
            #[serde(skip_serializing_if = "Option::is_none")]
            note: Option<&'a str>,
        }
        let sc = Sidecar {
            controlled: self.controlled.iter().map(|(k, v)| (format!("x{k}"), *v)).collect(),
            seed: self.seed,
            n_rows: self.len(),
            n_vars: self.n_vars(),
            note: None,
        };
        serde_json::to_string_pretty(&sc).expect("sidecar serializes")
    }
}

/// An algebraic ground-truth oracle.
#[derive(Debug, Clone)]
pub struct OracleSpec {
    ground_truth: Expr,
    n_vars: usize,
    ranges: Vec<(f64, f64)>,
    noise_sd: f64,
}

impl OracleSpec {
    pub fn new(
        ground_truth: Expr,
        n_vars: usize,
        ranges: Vec<(f64, f64)>,
        noise_sd: f64,
    ) -> Result<OracleSpec, OracleError> {
        if ground_truth.open_constant_count() > 0 {
            return Err(OracleError::GroundTruthHasConstants);
        }
        if let Some(&v) = ground_truth.vars_used().last() {
            if v >= n_vars {
                return Err(OracleError::VarOutOfRange { var: v, n_vars });
            }
        }
        validate_ranges(&ranges, n_vars)?;
        Ok(OracleSpec {
            ground_truth,
            n_vars,
            ranges,
            noise_sd,
        })
    }

    pub fn ground_truth(&self) -> &Expr {
        &self.ground_truth
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }
}

fn validate_ranges(ranges: &[(f64, f64)], n_vars: usize) -> Result<(), OracleError> {
    if ranges.len() != n_vars {
        return Err(OracleError::RangeCountMismatch {
            expected: n_vars,
            got: ranges.len(),
        });
    }
    for (i, (lo, hi)) in ranges.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(OracleError::BadRange { index: i });
        }
    }
    Ok(())
}

/// Draws the input matrix for a batch. Draw order is fixed and documented:
/// first one value per controlled variable in ascending index order, then
/// the free entries row by row (variables ascending inside a row).
fn sample_inputs(
    n_vars: usize,
    ranges: &[(f64, f64)],
    ctrl: &ControlSpec,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f64>, BTreeMap<usize, f64>), OracleError> {
    for &v in &ctrl.controlled {
        if v >= n_vars {
            return Err(OracleError::VarOutOfRange { var: v, n_vars });
        }
    }
    let mut drawn = BTreeMap::new();
    for &v in &ctrl.controlled {
        let val = match ctrl.pinned.get(&v) {
            Some(&pv) => pv,
            None => rng.gen_range(ranges[v].0..ranges[v].1),
        };
        drawn.insert(v, val);
    }
    let mut x = Array2::zeros((n, n_vars));
    for i in 0..n {
        for j in 0..n_vars {
            x[[i, j]] = match drawn.get(&j) {
                Some(&v) => v,
                None => rng.gen_range(ranges[j].0..ranges[j].1),
            };
        }
    }
    Ok((x, drawn))
}

/// Samples one batch from an algebraic oracle.
pub fn sample_batch(
    spec: &OracleSpec,
    ctrl: &ControlSpec,
    n: usize,
    seed: u64,
) -> Result<DataBatch, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, controlled) = sample_inputs(spec.n_vars, &spec.ranges, ctrl, n, &mut rng)?;
    let prog = Program::compile(&spec.ground_truth);
    let mut y = Array1::zeros(n);
    let mut scratch = crate::expr::EvalScratch::default();
    prog.eval_into(&[], x.view(), &mut scratch, &mut y)?;
    if let Some(row) = y.iter().position(|v| !v.is_finite()) {
        return Err(OracleError::NonFiniteOutput { row });
    }
    if spec.noise_sd > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sd).expect("valid noise sd");
        for v in y.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(DataBatch {
        x,
        y,
        controlled,
        seed,
    })
}

/// Samples `k` batches with derived seeds `seed..seed+k`; each batch draws
/// its own controlled values, which is what makes trial-to-trial constant
/// variance informative.
pub fn sample_trials(
    spec: &OracleSpec,
    ctrl: &ControlSpec,
    k: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<DataBatch>, OracleError> {
    (0..k)
        .map(|i| sample_batch(spec, ctrl, n, seed.wrapping_add(i as u64)))
        .collect()
}

// ---------------------------------------------------------------------------
// ODE systems

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Rk4,
    Euler,
}

/// A first-order ODE system with per-dimension field expressions over the
/// state variables `x0..x{dim-1}`. Parameters are already substituted into
/// the fields; the map is kept for reporting.
#[derive(Debug, Clone)]
pub struct OdeSystem {
    pub name: String,
    pub dim: usize,
    pub fields: Vec<Expr>,
    pub ranges: Vec<(f64, f64)>,
    pub params: BTreeMap<String, f64>,
}

impl OdeSystem {
    pub fn new(
        name: impl Into<String>,
        fields: Vec<Expr>,
        ranges: Vec<(f64, f64)>,
        params: BTreeMap<String, f64>,
    ) -> Result<OdeSystem, OracleError> {
        let dim = fields.len();
        for f in &fields {
            if f.open_constant_count() > 0 {
                return Err(OracleError::GroundTruthHasConstants);
            }
            if let Some(&v) = f.vars_used().last() {
                if v >= dim {
                    return Err(OracleError::VarOutOfRange { var: v, n_vars: dim });
                }
            }
        }
        validate_ranges(&ranges, dim)?;
        Ok(OdeSystem {
            name: name.into(),
            dim,
            fields,
            ranges,
            params,
        })
    }

    fn compiled(&self) -> Vec<Program> {
        self.fields.iter().map(Program::compile).collect()
    }
}

fn eval_field(progs: &[Program], state: &[f64], out: &mut [f64]) {
    for (p, o) in progs.iter().zip(out.iter_mut()) {
        *o = p.eval_row(&[], state).expect("field arity checked at construction");
    }
}

fn euler_step(progs: &[Program], x: &[f64], dt: f64, k: &mut [Vec<f64>], next: &mut [f64]) {
    eval_field(progs, x, &mut k[0]);
    for i in 0..x.len() {
        next[i] = x[i] + dt * k[0][i];
    }
}

fn rk4_step(progs: &[Program], x: &[f64], dt: f64, k: &mut [Vec<f64>], next: &mut [f64]) {
    let d = x.len();
    eval_field(progs, x, &mut k[0]);
    for i in 0..d {
        next[i] = x[i] + 0.5 * dt * k[0][i];
    }
    let stage = next.to_vec();
    eval_field(progs, &stage, &mut k[1]);
    for i in 0..d {
        next[i] = x[i] + 0.5 * dt * k[1][i];
    }
    let stage = next.to_vec();
    eval_field(progs, &stage, &mut k[2]);
    for i in 0..d {
        next[i] = x[i] + dt * k[2][i];
    }
    let stage = next.to_vec();
    eval_field(progs, &stage, &mut k[3]);
    for i in 0..d {
        next[i] = x[i] + dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
    }
}

/// An integrated trajectory: `states` has one row per time point starting at
/// the initial condition (`steps + 1` rows when nothing overflows), and
/// `derivs[i] = (states[i+1] - states[i]) / dt`, the finite-difference
/// estimate of the derivative over step `i`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Array2<f64>,
    pub derivs: Array2<f64>,
    pub truncated: bool,
}

/// Integrates `steps` steps of size `dt` from `x0`. On a non-finite state
/// the trajectory truncates at the last finite row and is flagged.
pub fn simulate_trajectory(
    system: &OdeSystem,
    x0: &[f64],
    dt: f64,
    steps: usize,
    integrator: Integrator,
) -> Result<Trajectory, OracleError> {
    if x0.len() != system.dim {
        return Err(OracleError::RangeCountMismatch {
            expected: system.dim,
            got: x0.len(),
        });
    }
    let progs = system.compiled();
    let d = system.dim;
    let mut k = vec![vec![0.0; d]; 4];
    let mut states: Vec<f64> = Vec::with_capacity((steps + 1) * d);
    states.extend_from_slice(x0);
    let mut cur = x0.to_vec();
    let mut next = vec![0.0; d];
    let mut truncated = false;
    for _ in 0..steps {
        match integrator {
            Integrator::Rk4 => rk4_step(&progs, &cur, dt, &mut k, &mut next),
            Integrator::Euler => euler_step(&progs, &cur, dt, &mut k, &mut next),
        }
        if next.iter().any(|v| !v.is_finite()) {
            truncated = true;
            break;
        }
        states.extend_from_slice(&next);
        cur.copy_from_slice(&next);
    }
    let rows = states.len() / d;
    let states = Array2::from_shape_vec((rows, d), states).expect("trajectory shape");
    let mut derivs = Array2::zeros((rows.saturating_sub(1), d));
    for i in 0..rows.saturating_sub(1) {
        for j in 0..d {
            derivs[[i, j]] = (states[[i + 1, j]] - states[[i, j]]) / dt;
        }
    }
    Ok(Trajectory {
        states,
        derivs,
        truncated,
    })
}

/// Direct-evaluation regression batch for one ODE component: states are
/// sampled like algebraic inputs (controlled coordinates held fixed) and the
/// output is the exact field value.
pub fn ode_direct_batch(
    system: &OdeSystem,
    dim: usize,
    ctrl: &ControlSpec,
    n: usize,
    seed: u64,
) -> Result<DataBatch, OracleError> {
    if dim >= system.dim {
        return Err(OracleError::BadComponent {
            dim,
            n: system.dim,
        });
    }
    let spec = OracleSpec::new(system.fields[dim].clone(), system.dim, system.ranges.clone(), 0.0)?;
    sample_batch(&spec, ctrl, n, seed)
}

/// Finite-difference regression batch: per sampled state the system is
/// integrated one micro-step of size `dt` and the output is the forward
/// difference `(x(dt)[dim] - x(0)[dim]) / dt`. Controlled coordinates stay
/// exact in the inputs; the output carries the O(dt) discretization bias of
/// a measured derivative.
pub fn ode_fd_batch(
    system: &OdeSystem,
    dim: usize,
    ctrl: &ControlSpec,
    n: usize,
    seed: u64,
    dt: f64,
    integrator: Integrator,
) -> Result<DataBatch, OracleError> {
    if dim >= system.dim {
        return Err(OracleError::BadComponent {
            dim,
            n: system.dim,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, controlled) = sample_inputs(system.dim, &system.ranges, ctrl, n, &mut rng)?;
    let progs = system.compiled();
    let d = system.dim;
    let mut k = vec![vec![0.0; d]; 4];
    let mut next = vec![0.0; d];
    let mut y = Array1::zeros(n);
    let mut row = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            row[j] = x[[i, j]];
        }
        match integrator {
            Integrator::Rk4 => rk4_step(&progs, &row, dt, &mut k, &mut next),
            Integrator::Euler => euler_step(&progs, &row, dt, &mut k, &mut next),
        }
        y[i] = (next[dim] - row[dim]) / dt;
        if !y[i].is_finite() {
            return Err(OracleError::NonFiniteOutput { row: i });
        }
    }
    Ok(DataBatch {
        x,
        y,
        controlled,
        seed,
    })
}

// ---------------------------------------------------------------------------
// A uniform interface for the search engines

/// Anything the engines can query for control-variable batches.
pub trait DataSource: Sync {
    fn n_vars(&self) -> usize;
    fn ranges(&self) -> &[(f64, f64)];
    fn sample(&self, ctrl: &ControlSpec, n: usize, seed: u64) -> Result<DataBatch, OracleError>;
    /// The underlying truth, when known, for recovery checks.
    fn ground_truth(&self) -> Option<&Expr>;
}

impl DataSource for OracleSpec {
    fn n_vars(&self) -> usize {
        self.n_vars
    }

    fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }

    fn sample(&self, ctrl: &ControlSpec, n: usize, seed: u64) -> Result<DataBatch, OracleError> {
        sample_batch(self, ctrl, n, seed)
    }

    fn ground_truth(&self) -> Option<&Expr> {
        Some(&self.ground_truth)
    }
}

/// How ODE regression data is produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OdeMode {
    /// Evaluate the true field at sampled states.
    Direct,
    /// Integrate one micro-step per row and divide differences by dt.
    FiniteDifference,
}

/// One ODE component exposed as a regression data source.
pub struct OdeFieldSource {
    pub system: OdeSystem,
    pub dim: usize,
    pub mode: OdeMode,
    pub fd_dt: f64,
    pub integrator: Integrator,
}

impl OdeFieldSource {
    pub fn direct(system: OdeSystem, dim: usize) -> OdeFieldSource {
        OdeFieldSource {
            system,
            dim,
            mode: OdeMode::Direct,
            fd_dt: 1e-3,
            integrator: Integrator::Rk4,
        }
    }

    pub fn finite_difference(system: OdeSystem, dim: usize, dt: f64) -> OdeFieldSource {
        OdeFieldSource {
            system,
            dim,
            mode: OdeMode::FiniteDifference,
            fd_dt: dt,
            integrator: Integrator::Rk4,
        }
    }
}

impl DataSource for OdeFieldSource {
    fn n_vars(&self) -> usize {
        self.system.dim
    }

    fn ranges(&self) -> &[(f64, f64)] {
        &self.system.ranges
    }

    fn sample(&self, ctrl: &ControlSpec, n: usize, seed: u64) -> Result<DataBatch, OracleError> {
        match self.mode {
            OdeMode::Direct => ode_direct_batch(&self.system, self.dim, ctrl, n, seed),
            OdeMode::FiniteDifference => ode_fd_batch(
                &self.system,
                self.dim,
                ctrl,
                n,
                seed,
                self.fd_dt,
                self.integrator,
            ),
        }
    }

    fn ground_truth(&self) -> Option<&Expr> {
        Some(&self.system.fields[self.dim])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expression;

    fn sincos_prog0() -> OracleSpec {
        let gt = parse_expression("0.0-0.167*sin(x0)*cos(x1)+0.4467*cos(x0)-0.2736").unwrap();
        OracleSpec::new(gt, 2, vec![(-5.0, 5.0); 2], 0.0).unwrap()
    }

    #[test]
    fn ground_truth_value_at_origin() {
        let spec = sincos_prog0();
        let p = Program::compile(spec.ground_truth());
        let v = p.eval_row(&[], &[0.0, 0.0]).unwrap();
        assert!((v - 0.1731).abs() < 1e-12);
    }

    #[test]
    fn batches_are_reproducible_and_respect_control() {
        let spec = sincos_prog0();
        let ctrl = ControlSpec::controlling([1]);
        let a = sample_batch(&spec, &ctrl, 64, 9).unwrap();
        let b = sample_batch(&spec, &ctrl, 64, 9).unwrap();
        let c = sample_batch(&spec, &ctrl, 64, 10).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert_ne!(a.x, c.x);
        let v = a.controlled[&1];
        assert!(a.x.column(1).iter().all(|&u| u == v));
        // Free column varies.
        let col0 = a.x.column(0);
        assert!(col0.iter().any(|&u| u != col0[0]));
        // Outputs match the ground truth exactly (no noise).
        let want = spec.ground_truth().evaluate(&[], a.x.view()).unwrap();
        assert_eq!(a.y, want);
    }

    #[test]
    fn pinned_control_values_are_honored() {
        let spec = sincos_prog0();
        let ctrl = ControlSpec::free().pin(1, 0.52);
        let b = sample_batch(&spec, &ctrl, 8, 1).unwrap();
        assert!(b.x.column(1).iter().all(|&u| u == 0.52));
        assert_eq!(b.controlled[&1], 0.52);
    }

    #[test]
    fn trials_draw_distinct_control_values() {
        let spec = sincos_prog0();
        let ctrl = ControlSpec::controlling([1]);
        let trials = sample_trials(&spec, &ctrl, 10, 4, 100).unwrap();
        assert_eq!(trials.len(), 10);
        let mut values: Vec<f64> = trials.iter().map(|t| t.controlled[&1]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        assert_eq!(values.len(), 10);
    }

    #[test]
    fn noise_perturbs_outputs_only() {
        let gt = parse_expression("x0*2.0").unwrap();
        let clean = OracleSpec::new(gt.clone(), 1, vec![(-5.0, 5.0)], 0.0).unwrap();
        let noisy = OracleSpec::new(gt, 1, vec![(-5.0, 5.0)], 0.1).unwrap();
        let a = sample_batch(&clean, &ControlSpec::free(), 256, 3).unwrap();
        let b = sample_batch(&noisy, &ControlSpec::free(), 256, 3).unwrap();
        assert_eq!(a.x, b.x);
        let resid: Vec<f64> = (0..256).map(|i| b.y[i] - a.y[i]).collect();
        let mean = resid.iter().sum::<f64>() / 256.0;
        let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 256.0).sqrt();
        assert!(sd > 0.05 && sd < 0.2, "noise sd {sd} out of band");
    }

    #[test]
    fn csv_round_trip_shape() {
        let spec = sincos_prog0();
        let b = sample_batch(&spec, &ControlSpec::controlling([1]), 4, 0).unwrap();
        let csv = b.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "x0,x1,y");
        assert_eq!(lines.count(), 4);
        let sidecar = b.sidecar_json();
        assert!(sidecar.contains("\"x1\""));
        assert!(sidecar.contains("\"seed\": 0"));
    }

    fn decay() -> OdeSystem {
        OdeSystem::new(
            "decay",
            vec![parse_expression("(0.0-x0)").unwrap()],
            vec![(0.1, 2.0)],
            BTreeMap::new(),
        )
        .unwrap()
    }

    #[test]
    fn rk4_matches_exponential_decay() {
        let traj = simulate_trajectory(&decay(), &[1.0], 0.01, 100, Integrator::Rk4).unwrap();
        assert_eq!(traj.states.nrows(), 101);
        assert_eq!(traj.derivs.nrows(), 100);
        assert!(!traj.truncated);
        let x1 = traj.states[[100, 0]];
        assert!((x1 - (-1.0f64).exp()).abs() < 1e-6, "x(1) = {x1}");
        // Forward difference approximates the field to O(dt).
        assert!((traj.derivs[[0, 0]] + 1.0).abs() < 0.01);
    }

    #[test]
    fn euler_is_first_order() {
        let traj = simulate_trajectory(&decay(), &[1.0], 0.01, 100, Integrator::Euler).unwrap();
        let err = (traj.states[[100, 0]] - (-1.0f64).exp()).abs();
        assert!(err > 1e-6 && err < 5e-3, "euler error {err}");
    }

    #[test]
    fn blowup_truncates_and_flags() {
        let sys = OdeSystem::new(
            "blowup",
            vec![parse_expression("x0*x0").unwrap()],
            vec![(0.5, 2.0)],
            BTreeMap::new(),
        )
        .unwrap();
        let traj = simulate_trajectory(&sys, &[1.0], 0.01, 500, Integrator::Rk4).unwrap();
        assert!(traj.truncated);
        assert!(traj.states.nrows() < 501);
        assert!(traj.states.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn fd_batch_tracks_direct_batch_to_first_order() {
        let sys = OdeSystem::new(
            "linear2",
            vec![
                parse_expression("x1-x0").unwrap(),
                parse_expression("(0.0-0.5)*x1").unwrap(),
            ],
            vec![(-2.0, 2.0), (-2.0, 2.0)],
            BTreeMap::new(),
        )
        .unwrap();
        let ctrl = ControlSpec::controlling([1]);
        let direct = ode_direct_batch(&sys, 0, &ctrl, 32, 5).unwrap();
        let fd = ode_fd_batch(&sys, 0, &ctrl, 32, 5, 1e-3, Integrator::Rk4).unwrap();
        assert_eq!(direct.x, fd.x);
        for i in 0..32 {
            assert!((direct.y[i] - fd.y[i]).abs() < 5e-3);
        }
    }
}
