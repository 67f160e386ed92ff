//! Constant fitting and fit-quality metrics.
//!
//! Candidate expressions carry open constant slots; fitting chooses values
//! for them that minimize mean squared error on a batch. The optimizer is
//! BFGS with central-difference gradients and Armijo backtracking, restarted
//! from a few randomized points because trigonometric residual surfaces are
//! multimodal.

use crate::expr::{EvalScratch, Expr, Program};
use crate::oracle::DataBatch;
use crate::util::derive_seed;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub fn mean_squared_error(pred: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    let n = y.len().max(1) as f64;
    pred.iter()
        .zip(y.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

pub fn population_variance(y: ArrayView1<f64>) -> f64 {
    let n = y.len().max(1) as f64;
    let mean = y.sum() / n;
    y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Mean squared error normalized by the population variance of the target.
/// A constant target with a nonzero residual scores infinite.
pub fn nmse(pred: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    nmse_from_mse(mean_squared_error(pred, y), y)
}

fn nmse_from_mse(mse: f64, y: ArrayView1<f64>) -> f64 {
    let var = population_variance(y);
    if var > 0.0 {
        mse / var
    } else if mse == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Coefficient of determination against the mean predictor.
pub fn r_squared(pred: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    1.0 - nmse(pred, y)
}

/// Squashes NMSE into (0, 1]; non-finite error earns zero.
pub fn reward_from_nmse(nmse: f64) -> f64 {
    if !nmse.is_finite() {
        return 0.0;
    }
    1.0 / (1.0 + nmse)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    /// Random standard-normal starts tried after the deterministic all-ones
    /// start, so `restarts + 1` optimizer runs in total.
    pub restarts: usize,
    pub max_iters: usize,
    /// Stop when the gradient max-norm drops below this.
    pub grad_tol: f64,
    /// Relative step for central-difference gradients.
    pub grad_step: f64,
    /// Armijo sufficient-decrease coefficient.
    pub armijo_c: f64,
    pub backtrack_shrink: f64,
    pub max_backtracks: usize,
}

impl Default for FitOptions {
    fn default() -> FitOptions {
        FitOptions {
            restarts: 4,
            max_iters: 500,
            grad_tol: 1e-8,
            grad_step: 1e-6,
            armijo_c: 1e-4,
            backtrack_shrink: 0.5,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub constants: Vec<f64>,
    pub mse: f64,
    pub nmse: f64,
    pub converged: bool,
}

impl FitResult {
    pub fn r_squared(&self) -> f64 {
        1.0 - self.nmse
    }

    pub fn reward(&self) -> f64 {
        reward_from_nmse(self.nmse)
    }
}

/// MSE objective over a fixed batch with reusable evaluation buffers.
struct Objective<'a, 'b> {
    prog: Program,
    x: ArrayView2<'a, f64>,
    y: ArrayView1<'b, f64>,
    scratch: EvalScratch,
    pred: Array1<f64>,
}

impl Objective<'_, '_> {
    fn mse_at(&mut self, c: &[f64]) -> f64 {
        if self
            .prog
            .eval_into(c, self.x, &mut self.scratch, &mut self.pred)
            .is_err()
        {
            return f64::INFINITY;
        }
        let n = self.y.len() as f64;
        let mut acc = 0.0;
        for (p, t) in self.pred.iter().zip(self.y.iter()) {
            let d = p - t;
            acc += d * d;
        }
        let m = acc / n;
        if m.is_finite() {
            m
        } else {
            f64::INFINITY
        }
    }

    /// Central differences with a per-coordinate relative step. Returns false
    /// if any component comes out non-finite.
    fn gradient(&mut self, c: &mut [f64], step: f64, g: &mut [f64]) -> bool {
        for j in 0..c.len() {
            let h = step * (1.0 + c[j].abs());
            let orig = c[j];
            c[j] = orig + h;
            let fp = self.mse_at(c);
            c[j] = orig - h;
            let fm = self.mse_at(c);
            c[j] = orig;
            let d = (fp - fm) / (2.0 * h);
            if !d.is_finite() {
                return false;
            }
            g[j] = d;
        }
        true
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Inverse-Hessian update H' = (I - r s y')H(I - r y s') + r s s', r = 1/(s.y).
fn bfgs_update(h: &Array2<f64>, s: &[f64], yv: &[f64], sy: f64) -> Array2<f64> {
    let k = s.len();
    let rho = 1.0 / sy;
    let mut a = Array2::<f64>::eye(k);
    for i in 0..k {
        for j in 0..k {
            a[[i, j]] -= rho * s[i] * yv[j];
        }
    }
    let mut out = a.dot(h).dot(&a.t());
    for i in 0..k {
        for j in 0..k {
            out[[i, j]] += rho * s[i] * s[j];
        }
    }
    out
}

fn bfgs_run(obj: &mut Objective<'_, '_>, start: &[f64], opts: &FitOptions) -> (Vec<f64>, f64, bool) {
    let k = start.len();
    let mut c = start.to_vec();
    let mut f = obj.mse_at(&c);
    if !f.is_finite() {
        return (c, f64::INFINITY, false);
    }
    let mut g = vec![0.0; k];
    if !obj.gradient(&mut c, opts.grad_step, &mut g) {
        return (c, f, false);
    }
    let mut h_inv = Array2::<f64>::eye(k);
    let mut p = vec![0.0; k];
    let mut c_new = vec![0.0; k];
    let mut g_new = vec![0.0; k];
    let mut converged = false;
    for _ in 0..opts.max_iters {
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gmax < opts.grad_tol {
            converged = true;
            break;
        }
        for i in 0..k {
            p[i] = -(0..k).map(|j| h_inv[[i, j]] * g[j]).sum::<f64>();
        }
        let mut slope = dot(&p, &g);
        if !(slope < 0.0) {
            // The quasi-Newton model lost positive definiteness; fall back to
            // steepest descent with a fresh curvature estimate.
            h_inv = Array2::eye(k);
            for i in 0..k {
                p[i] = -g[i];
            }
            slope = dot(&p, &g);
            if !(slope < 0.0) {
                break;
            }
        }
        let mut t = 1.0;
        let mut f_new = f64::INFINITY;
        let mut accepted = false;
        for _ in 0..opts.max_backtracks {
            for i in 0..k {
                c_new[i] = c[i] + t * p[i];
            }
            f_new = obj.mse_at(&c_new);
            if f_new <= f + opts.armijo_c * t * slope {
                accepted = true;
                break;
            }
            t *= opts.backtrack_shrink;
        }
        if !accepted {
            break;
        }
        if !obj.gradient(&mut c_new, opts.grad_step, &mut g_new) {
            c.copy_from_slice(&c_new);
            f = f_new;
            break;
        }
        let mut s = vec![0.0; k];
        let mut yv = vec![0.0; k];
        for i in 0..k {
            s[i] = c_new[i] - c[i];
            yv[i] = g_new[i] - g[i];
        }
        let sy = dot(&s, &yv);
        if sy > 1e-12 {
            h_inv = bfgs_update(&h_inv, &s, &yv, sy);
        }
        c.copy_from_slice(&c_new);
        g.copy_from_slice(&g_new);
        f = f_new;
    }
    (c, f, converged)
}

/// Fits the expression's open constants to `(x, y)` by multi-start BFGS.
/// Start 0 is all ones; later starts draw from the standard normal. Stops
/// early once a start lands at numerically-zero error.
pub fn fit_constants(
    expr: &Expr,
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    opts: &FitOptions,
    seed: u64,
) -> FitResult {
    let k = expr.open_constant_count();
    let mut obj = Objective {
        prog: Program::compile(expr),
        x,
        y,
        scratch: EvalScratch::default(),
        pred: Array1::zeros(y.len()),
    };
    if k == 0 {
        let m = obj.mse_at(&[]);
        return FitResult {
            constants: Vec::new(),
            mse: m,
            nmse: nmse_from_mse(m, y),
            converged: true,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for r in 0..=opts.restarts {
        let start: Vec<f64> = if r == 0 {
            vec![1.0; k]
        } else {
            (0..k).map(|_| rng.sample(StandardNormal)).collect()
        };
        let (c, f, conv) = bfgs_run(&mut obj, &start, opts);
        let better = match &best {
            None => true,
            Some((_, bf, _)) => f < *bf,
        };
        if better {
            best = Some((c, f, conv));
        }
        if matches!(&best, Some((_, bf, _)) if *bf < 1e-14) {
            break;
        }
    }
    let (constants, m, converged) = best.expect("at least one start runs");
    FitResult {
        constants,
        mse: m,
        nmse: nmse_from_mse(m, y),
        converged,
    }
}

pub fn fit_batch(expr: &Expr, batch: &DataBatch, opts: &FitOptions, seed: u64) -> FitResult {
    fit_constants(expr, batch.x.view(), batch.y.view(), opts, seed)
}

/// Fits every candidate against the same batch on the rayon pool. Per-index
/// derived seeds and an order-preserving collect keep the output identical
/// whatever the worker count.
pub fn fit_population(
    exprs: &[Expr],
    batch: &DataBatch,
    opts: &FitOptions,
    base_seed: u64,
) -> Vec<FitResult> {
    exprs
        .par_iter()
        .enumerate()
        .map(|(i, e)| fit_batch(e, batch, opts, derive_seed(base_seed, &[i as u64])))
        .collect()
}

/// NMSE of an already-fitted expression on a fresh batch.
pub fn eval_nmse(expr: &Expr, constants: &[f64], batch: &DataBatch) -> f64 {
    let prog = Program::compile(expr);
    let mut scratch = EvalScratch::default();
    let mut pred = Array1::zeros(batch.len());
    if prog
        .eval_into(constants, batch.x.view(), &mut scratch, &mut pred)
        .is_err()
    {
        return f64::INFINITY;
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    nmse(pred.view(), batch.y.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expression;
    use crate::oracle::{sample_batch, ControlSpec, OracleSpec};
    use ndarray::array;

    #[test]
    fn metrics_match_hand_computed_values() {
        let y = array![1.0, 2.0, 3.0, 4.0];
        let pred = array![1.1, 1.9, 3.2, 3.9];
        assert!((population_variance(y.view()) - 1.25).abs() < 1e-15);
        assert!((mean_squared_error(pred.view(), y.view()) - 0.0175).abs() < 1e-15);
        assert!((nmse(pred.view(), y.view()) - 0.014).abs() < 1e-14);
        assert!((r_squared(pred.view(), y.view()) - 0.986).abs() < 1e-14);
        assert!((reward_from_nmse(0.014) - 1.0 / 1.014).abs() < 1e-15);
    }

    #[test]
    fn degenerate_metrics_are_safe() {
        let y = array![5.0, 5.0, 5.0];
        assert_eq!(nmse(array![5.0, 5.0, 5.0].view(), y.view()), 0.0);
        assert!(nmse(array![5.0, 5.0, 6.0].view(), y.view()).is_infinite());
        assert_eq!(reward_from_nmse(f64::INFINITY), 0.0);
        assert_eq!(reward_from_nmse(f64::NAN), 0.0);
        assert_eq!(reward_from_nmse(0.0), 1.0);
    }

    #[test]
    fn fits_linear_constants_exactly() {
        let xs: Vec<f64> = (0..32).map(|i| -2.0 + 4.0 * i as f64 / 31.0).collect();
        let x = Array2::from_shape_vec((32, 1), xs.clone()).unwrap();
        let y = Array1::from_iter(xs.iter().map(|v| 2.0 * v - 3.0));
        let expr = parse_expression("C1*x0+C2").unwrap();
        let fit = fit_constants(&expr, x.view(), y.view(), &FitOptions::default(), 7);
        assert!((fit.constants[0] - 2.0).abs() < 1e-6, "{:?}", fit.constants);
        assert!((fit.constants[1] + 3.0).abs() < 1e-6, "{:?}", fit.constants);
        assert!(fit.nmse < 1e-12);
        assert!(fit.reward() > 0.999_999);
    }

    #[test]
    fn recovers_phase_inside_a_trig_model() {
        let xs: Vec<f64> = (0..61).map(|i| -3.0 + 0.1 * i as f64).collect();
        let x = Array2::from_shape_vec((61, 1), xs.clone()).unwrap();
        let y = Array1::from_iter(xs.iter().map(|v| (v + 0.9).sin()));
        let expr = parse_expression("sin(x0+C1)").unwrap();
        let fit = fit_constants(&expr, x.view(), y.view(), &FitOptions::default(), 3);
        assert!(fit.nmse < 1e-10, "nmse {}", fit.nmse);
        let phase = fit.constants[0].rem_euclid(std::f64::consts::TAU);
        assert!((phase - 0.9).abs() < 1e-5, "phase {phase}");
    }

    #[test]
    fn hopeless_objective_reports_zero_reward() {
        let expr = parse_expression("C1/x0").unwrap();
        let x = array![[0.0], [0.0]];
        let y = array![1.0, 2.0];
        let fit = fit_constants(&expr, x.view(), y.view(), &FitOptions::default(), 1);
        assert!(fit.nmse.is_infinite());
        assert_eq!(fit.reward(), 0.0);
        assert!(!fit.converged);
    }

    #[test]
    fn constant_free_expressions_skip_the_optimizer() {
        let expr = parse_expression("x0*x0").unwrap();
        let x = array![[1.0], [2.0], [3.0]];
        let y = array![1.0, 4.0, 9.0];
        let fit = fit_constants(&expr, x.view(), y.view(), &FitOptions::default(), 0);
        assert!(fit.constants.is_empty());
        assert_eq!(fit.nmse, 0.0);
        assert_eq!(fit.reward(), 1.0);
    }

    #[test]
    fn population_fits_are_deterministic_and_match_serial() {
        let gt = parse_expression("sin(x0+0.9)").unwrap();
        let spec = OracleSpec::new(gt, 1, vec![(-3.0, 3.0)], 0.0).unwrap();
        let batch = sample_batch(&spec, &ControlSpec::free(), 48, 11).unwrap();
        let exprs = vec![
            parse_expression("C1*x0+C2").unwrap(),
            parse_expression("sin(x0+C1)").unwrap(),
            parse_expression("x0*x0").unwrap(),
        ];
        let opts = FitOptions::default();
        let a = fit_population(&exprs, &batch, &opts, 99);
        let b = fit_population(&exprs, &batch, &opts, 99);
        for (ra, rb) in a.iter().zip(b.iter()) {
            assert_eq!(ra.constants, rb.constants);
            assert_eq!(ra.mse.to_bits(), rb.mse.to_bits());
        }
        for (i, ra) in a.iter().enumerate() {
            let solo = fit_batch(&exprs[i], &batch, &opts, derive_seed(99, &[i as u64]));
            assert_eq!(ra.constants, solo.constants);
        }
        assert!(a[1].nmse < 1e-10);
    }

    #[test]
    fn eval_nmse_flags_nonfinite_predictions() {
        let expr = parse_expression("C1/x0").unwrap();
        let gt = parse_expression("x0").unwrap();
        let spec = OracleSpec::new(gt, 1, vec![(-1.0, 1.0)], 0.0).unwrap();
        let mut batch = sample_batch(&spec, &ControlSpec::free(), 8, 2).unwrap();
        batch.x[[0, 0]] = 0.0;
        assert!(eval_nmse(&expr, &[1.0], &batch).is_infinite());
    }
}
