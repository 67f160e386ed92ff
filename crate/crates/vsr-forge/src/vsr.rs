//! The vertical discovery loop.
//!
//! Discovery proceeds one variable per round. In round r the oracle controls
//! every variable not yet freed, so the target collapses to a reduced-form
//! equation over the freed ones; the policy net searches for that reduced
//! form. Fitting the round winner on several independently controlled trials
//! then splits its constants: values stable across trials are standalone
//! (real numbers, frozen as literals), varying ones are summary constants
//! (stand-ins for subexpressions of still-controlled variables) and re-open
//! as non-terminals in the next round's start symbol.

use crate::expr::{affine_in_constants, Expr};
use crate::fit::{fit_batch, reward_from_nmse, FitOptions, FitResult};
use crate::grammar::{
    build_grammar, make_start_symbol, reduce_to_start, rules_to_expression, ConstKind,
    GrammarError, Operator, SymbolString,
};
use crate::oracle::{ControlSpec, DataSource, OracleError};
use crate::policy::{
    reinforce_update, sample_rollouts, PolicyConfig, PolicyError, PolicyNet, TokenMask,
};
use crate::util::derive_seed;
use ndarray::s;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VsrError {
    #[error("bad config: {0}")]
    Config(String),
    #[error("constant classification needs at least 2 trials, got {got}")]
    TooFewTrials { got: usize },
    #[error("round produced no candidate expressions")]
    NoCandidate,
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
}

/// Which variables a round's grammar may mention in fresh subtrees. The
/// previously discovered structure always stays available through the start
/// symbol either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RoundVars {
    /// Only the newly freed variable (plus const).
    #[default]
    FreshOnly,
    /// Every variable freed so far.
    AllSeen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VsrConfig {
    pub operators: Vec<Operator>,
    /// Round order over variable indices; `None` means natural order.
    pub variable_order: Option<Vec<usize>>,
    /// Independent control-variable trials used to classify constants.
    pub k_trials: usize,
    /// A round is consistent when every trial NMSE stays at or below this.
    pub eps_fitness: f64,
    /// A constant is standalone when its fitted values' population variance
    /// across trials stays below this.
    pub eps_var: f64,
    pub data_batch_size: usize,
    /// Candidates with more open constants than this score zero reward.
    pub max_constants: usize,
    pub round_vars: RoundVars,
    /// NMSE at or below this counts as an exact fit; among exact fits the
    /// smallest expression wins the round, since reward alone cannot
    /// separate a clean reduced form from an overgrown one that nests it.
    pub solution_nmse: f64,
    /// Stop a round's training early once some candidate fits this well.
    pub early_stop_nmse: Option<f64>,
    /// Reuse the trained net across rounds when the vocabulary allows it;
    /// defaults to a fresh net per round.
    pub warm_start: bool,
    /// Network template; `vocab_size` is overwritten per round to match the
    /// round grammar.
    pub policy: PolicyConfig,
    /// Options for the per-candidate fits inside training epochs. Every
    /// distinct sampled skeleton is fitted once per epoch, so the profiles
    /// keep these cheap, like the genetic baselines do.
    pub fit: FitOptions,
    /// Options for the K classification trials and final refits, where a
    /// spurious optimizer failure would mislabel a constant; worth the
    /// extra restarts on the handful of fits involved.
    pub trial_fit: FitOptions,
}

impl VsrConfig {
    /// Small single-core profile; same algorithm as `full`.
    pub fn desk(operators: Vec<Operator>) -> VsrConfig {
        VsrConfig {
            operators,
            variable_order: None,
            k_trials: 10,
            eps_fitness: 1e-2,
            eps_var: 1e-3,
            data_batch_size: 256,
            max_constants: 20,
            round_vars: RoundVars::default(),
            solution_nmse: 1e-9,
            early_stop_nmse: Some(1e-10),
            warm_start: false,
            policy: PolicyConfig::desk(0),
            fit: FitOptions {
                restarts: 1,
                max_iters: 200,
                ..FitOptions::default()
            },
            trial_fit: FitOptions::default(),
        }
    }

    /// Profile matching the reference experiments (512-wide net, 1024
    /// samples per epoch, batch 1024).
    pub fn full(operators: Vec<Operator>) -> VsrConfig {
        VsrConfig {
            operators,
            variable_order: None,
            k_trials: 10,
            eps_fitness: 1e-2,
            eps_var: 1e-3,
            data_batch_size: 1024,
            max_constants: 20,
            round_vars: RoundVars::default(),
            solution_nmse: 1e-9,
            early_stop_nmse: None,
            warm_start: false,
            policy: PolicyConfig::full(0),
            fit: FitOptions {
                restarts: 1,
                max_iters: 200,
                ..FitOptions::default()
            },
            trial_fit: FitOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), VsrError> {
        if self.operators.is_empty() {
            return Err(VsrError::Config("operator set is empty".into()));
        }
        if self.k_trials < 2 {
            return Err(VsrError::Config("k_trials must be at least 2".into()));
        }
        if !(self.eps_fitness > 0.0) || !(self.eps_var > 0.0) {
            return Err(VsrError::Config("thresholds must be positive".into()));
        }
        if self.data_batch_size == 0 {
            return Err(VsrError::Config("data_batch_size must be positive".into()));
        }
        if !(self.solution_nmse > 0.0) {
            return Err(VsrError::Config("solution_nmse must be positive".into()));
        }
        if self.policy.samples_per_epoch == 0 || self.policy.epochs_per_round == 0 {
            return Err(VsrError::Config(
                "policy needs at least one sample and one epoch".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Consistent,
    Inconsistent,
}

/// Outcome of the K-trial constant analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub verdict: Verdict,
    pub kinds: Vec<ConstKind>,
    /// Per-constant mean of the fitted values across trials; the freeze
    /// value for standalone constants.
    pub values: Vec<f64>,
}

/// Splits an expression's constants by behaviour across `trials`, each an
/// independent fit of the same structure on freshly controlled data. If any
/// trial fits badly the round is inconsistent and every constant is summary.
pub fn classify_constants(
    e: &Expr,
    trials: &[FitResult],
    eps_fitness: f64,
    eps_var: f64,
) -> Result<Classification, VsrError> {
    if trials.len() < 2 {
        return Err(VsrError::TooFewTrials { got: trials.len() });
    }
    let m = e.open_constant_count();
    let k = trials.len() as f64;
    let consistent = trials.iter().all(|t| t.nmse <= eps_fitness);
    let mut kinds = Vec::with_capacity(m);
    let mut values = Vec::with_capacity(m);
    for j in 0..m {
        let mean = trials.iter().map(|t| t.constants[j]).sum::<f64>() / k;
        let var = trials
            .iter()
            .map(|t| (t.constants[j] - mean) * (t.constants[j] - mean))
            .sum::<f64>()
            / k;
        values.push(mean);
        kinds.push(if consistent && var < eps_var {
            ConstKind::Standalone
        } else {
            ConstKind::Summary
        });
    }
    Ok(Classification {
        verdict: if consistent {
            Verdict::Consistent
        } else {
            Verdict::Inconsistent
        },
        kinds,
        values,
    })
}

/// Candidate ranking over (error, affine-in-constants, node count) triples.
/// Among exact fits (error at or below `solved`) a skeleton affine in its
/// constants beats one that is not, then the smaller expression wins.
/// Factored forms like `C1*(x0-C2)` tie with `C1*x0+C2` on both error and
/// size, but their constants are products of the additive form's, and such
/// coupled summaries stop being expressible once a shared variable is freed;
/// affineness is the cheap test that separates the two. Otherwise lower
/// error wins; exact ties keep the earlier candidate.
pub(crate) fn better_candidate(
    new: (f64, bool, usize),
    old: (f64, bool, usize),
    solved: f64,
) -> bool {
    match (new.0 <= solved, old.0 <= solved) {
        (true, true) => {
            if new.1 != old.1 {
                return new.1;
            }
            new.2 < old.2 || (new.2 == old.2 && new.0 < old.0)
        }
        (true, false) => true,
        (false, true) => false,
        (false, false) => new.0 < old.0,
    }
}

/// One epoch's line in the run log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub round: usize,
    pub epoch: usize,
    pub best_nmse: f64,
    pub mean_reward: f64,
    pub best_expr: String,
}

/// Everything a round decided.
#[derive(Debug, Clone)]
pub struct RoundResult {
    pub round: usize,
    pub variable: usize,
    pub start: SymbolString,
    /// Winning skeleton with open constants.
    pub best_expr: Expr,
    /// Trial-mean values, aligned with the skeleton's constants.
    pub best_constants: Vec<f64>,
    /// Best control-data NMSE seen during training.
    pub round_nmse: f64,
    pub verdict: Verdict,
    pub kinds: Vec<ConstKind>,
    pub next_start: SymbolString,
    pub epochs: Vec<EpochLog>,
}

/// Inputs a round needs from the loop driver.
#[derive(Debug, Clone)]
pub struct RoundCtx {
    pub round: usize,
    pub start: SymbolString,
    pub new_var: usize,
    /// Variables freed so far, including `new_var`.
    pub seen: Vec<usize>,
    /// Variables the oracle still controls this round.
    pub controlled: BTreeSet<usize>,
}

// Seed stream tags; every random decision in a round derives from
// (round seed, tag, ...) so draws never alias across purposes.
const TAG_EPOCH_BATCH: u64 = 1;
const TAG_TRIAL_BATCH: u64 = 2;
const TAG_COMPLETION: u64 = 3;
const TAG_NET_INIT: u64 = 4;
const TAG_SAMPLING: u64 = 5;
const TAG_EPOCH_FIT: u64 = 6;
const TAG_TRIAL_FIT: u64 = 7;
const TAG_GLOBAL_BATCH: u64 = 8;
const TAG_GLOBAL_FIT: u64 = 9;
const TAG_ROUND: u64 = 10;

/// Runs one discovery round: train the policy on reduced-form data, pick the
/// best candidate, classify its constants over fresh trials, and emit the
/// next start symbol. `net_slot` carries a warm-started net between rounds
/// when the config asks for it.
pub fn run_round(
    source: &dyn DataSource,
    cfg: &VsrConfig,
    ctx: &RoundCtx,
    seed: u64,
    net_slot: &mut Option<PolicyNet>,
) -> Result<RoundResult, VsrError> {
    // A start symbol without holes is already a closed expression; nothing
    // to search or classify.
    if ctx.start.hole_count() == 0 {
        let e = ctx.start.to_expression()?;
        let batch = source.sample(
            &ControlSpec::controlling(ctx.controlled.iter().copied()),
            cfg.data_batch_size,
            derive_seed(seed, &[TAG_EPOCH_BATCH, 0]),
        )?;
        let f = fit_batch(&e, &batch, &cfg.trial_fit, derive_seed(seed, &[TAG_EPOCH_FIT, 0]));
        return Ok(RoundResult {
            round: ctx.round,
            variable: ctx.new_var,
            start: ctx.start.clone(),
            best_expr: e,
            best_constants: Vec::new(),
            round_nmse: f.nmse,
            verdict: Verdict::Consistent,
            kinds: Vec::new(),
            next_start: ctx.start.clone(),
            epochs: Vec::new(),
        });
    }

    let round_vocab: Vec<usize> = match cfg.round_vars {
        RoundVars::FreshOnly => vec![ctx.new_var],
        RoundVars::AllSeen => ctx.seen.clone(),
    };
    let grammar = build_grammar(&cfg.operators, &round_vocab, true);
    let mut pcfg = cfg.policy.clone();
    pcfg.vocab_size = grammar.len() + 1;
    let mut net = match net_slot.take() {
        Some(n) if cfg.warm_start && n.cfg == pcfg => n,
        _ => PolicyNet::init(pcfg.clone(), derive_seed(seed, &[TAG_NET_INIT])),
    };
    let mask = TokenMask::rules_only(&grammar);
    let ctrl = ControlSpec::controlling(ctx.controlled.iter().copied());

    let mut best: Option<(Expr, (f64, bool, usize))> = None;
    let mut epochs = Vec::new();
    for epoch in 0..pcfg.epochs_per_round {
        let ep = epoch as u64;
        let batch = source.sample(
            &ctrl,
            cfg.data_batch_size,
            derive_seed(seed, &[TAG_EPOCH_BATCH, ep]),
        )?;
        let rollouts = sample_rollouts(
            &net,
            &ctx.start,
            &grammar,
            pcfg.samples_per_epoch,
            derive_seed(seed, &[TAG_SAMPLING, ep]),
        )?;
        // Convert to expressions, then fit each distinct skeleton once: the
        // batch is shared inside an epoch, so duplicates earn equal reward.
        let exprs: Vec<Expr> = rollouts
            .iter()
            .enumerate()
            .map(|(lane, r)| {
                rules_to_expression(
                    &grammar,
                    &ctx.start,
                    &r.seq,
                    derive_seed(seed, &[TAG_COMPLETION, ep, lane as u64]),
                )
                .map(|(e, _)| e)
            })
            .collect::<Result<_, _>>()?;
        let mut unique: Vec<Expr> = Vec::new();
        let mut of: HashMap<String, usize> = HashMap::new();
        let map: Vec<usize> = exprs
            .iter()
            .map(|e| {
                let key = e.to_canonical_string(None);
                *of.entry(key).or_insert_with(|| {
                    unique.push(e.clone());
                    unique.len() - 1
                })
            })
            .collect();
        let fit_seed = derive_seed(seed, &[TAG_EPOCH_FIT, ep]);
        let fits: Vec<FitResult> = unique
            .par_iter()
            .enumerate()
            .map(|(i, e)| {
                if e.open_constant_count() > cfg.max_constants {
                    FitResult {
                        constants: Vec::new(),
                        mse: f64::INFINITY,
                        nmse: f64::INFINITY,
                        converged: false,
                    }
                } else {
                    fit_batch(e, &batch, &cfg.fit, derive_seed(fit_seed, &[i as u64]))
                }
            })
            .collect();
        let rewards: Vec<f64> = map.iter().map(|&u| reward_from_nmse(fits[u].nmse)).collect();
        let mean_reward = rewards.iter().sum::<f64>() / rewards.len().max(1) as f64;
        reinforce_update(&mut net, &rollouts, &rewards, &mask)?;

        // Affineness only matters (and only gets computed) for exact fits;
        // a handful of probe rows is enough to expose constant coupling.
        let probe = batch.x.slice(s![..batch.x.nrows().min(8), ..]);
        let mut epoch_best: Option<(usize, (f64, bool, usize))> = None;
        for (i, f) in fits.iter().enumerate() {
            let aff =
                f.nmse <= cfg.solution_nmse && affine_in_constants(&unique[i], probe.view());
            let c = (f.nmse, aff, unique[i].node_count());
            if epoch_best.map_or(true, |(_, b)| better_candidate(c, b, cfg.solution_nmse)) {
                epoch_best = Some((i, c));
            }
        }
        let (eb_idx, eb) = epoch_best.ok_or(VsrError::NoCandidate)?;
        epochs.push(EpochLog {
            round: ctx.round,
            epoch,
            best_nmse: eb.0,
            mean_reward,
            best_expr: unique[eb_idx].to_canonical_string(Some(&fits[eb_idx].constants)),
        });
        if best
            .as_ref()
            .map_or(true, |(_, b)| better_candidate(eb, *b, cfg.solution_nmse))
        {
            best = Some((unique[eb_idx].clone(), eb));
        }
        if let (Some(th), Some((_, (n, _, _)))) = (cfg.early_stop_nmse, best.as_ref()) {
            if *n <= th {
                break;
            }
        }
    }
    let (best_expr, (round_nmse, _, _)) = best.ok_or(VsrError::NoCandidate)?;
    debug_assert!(
        reduce_to_start(&best_expr, &ctx.start).is_some(),
        "round winner must extend the start symbol"
    );

    // Classification over fresh trials; skipped when there is nothing to
    // classify.
    let m = best_expr.open_constant_count();
    let (verdict, kinds, values) = if m == 0 {
        (Verdict::Consistent, Vec::new(), Vec::new())
    } else {
        let trials: Vec<FitResult> = (0..cfg.k_trials)
            .into_par_iter()
            .map(|k| {
                let kk = k as u64;
                let b = source.sample(
                    &ctrl,
                    cfg.data_batch_size,
                    derive_seed(seed, &[TAG_TRIAL_BATCH, kk]),
                )?;
                Ok(fit_batch(
                    &best_expr,
                    &b,
                    &cfg.trial_fit,
                    derive_seed(seed, &[TAG_TRIAL_FIT, kk]),
                ))
            })
            .collect::<Result<_, VsrError>>()?;
        let c = classify_constants(&best_expr, &trials, cfg.eps_fitness, cfg.eps_var)?;
        (c.verdict, c.kinds, c.values)
    };
    let next_start = make_start_symbol(&best_expr, &kinds, &values)?;
    if cfg.warm_start {
        *net_slot = Some(net);
    }
    Ok(RoundResult {
        round: ctx.round,
        variable: ctx.new_var,
        start: ctx.start.clone(),
        best_expr,
        best_constants: values,
        round_nmse,
        verdict,
        kinds,
        next_start,
        epochs,
    })
}

/// One archive entry: the round winner refitted on shared no-control data.
#[derive(Debug, Clone)]
pub struct HofEntry {
    pub round: usize,
    pub expr: Expr,
    pub constants: Vec<f64>,
    pub global_nmse: f64,
}

#[derive(Debug, Clone, Default)]
pub struct HallOfFame {
    pub entries: Vec<HofEntry>,
}

impl HallOfFame {
    /// Entry with the lowest global NMSE; earliest round wins ties.
    pub fn best(&self) -> Option<&HofEntry> {
        self.entries
            .iter()
            .min_by(|a, b| a.global_nmse.total_cmp(&b.global_nmse))
    }
}

#[derive(Debug, Clone)]
pub struct VsrRun {
    pub rounds: Vec<RoundResult>,
    pub hall: HallOfFame,
    pub seed: u64,
}

/// Serializable digest of a finished run.
#[derive(Debug, Clone, Serialize)]
pub struct RoundSummary {
    pub round: usize,
    pub variable: usize,
    pub start_symbol: String,
    pub best_expr: String,
    pub constants: Vec<f64>,
    pub kinds: Vec<ConstKind>,
    pub verdict: Verdict,
    pub nmse: f64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct VsrReport {
    pub seed: u64,
    pub best_expr: String,
    pub best_expr_fitted: String,
    pub best_constants: Vec<f64>,
    pub global_nmse: f64,
    pub r_squared: f64,
    pub rounds: Vec<RoundSummary>,
}

impl VsrRun {
    pub fn best(&self) -> Option<&HofEntry> {
        self.hall.best()
    }

    pub fn epoch_logs(&self) -> impl Iterator<Item = &EpochLog> {
        self.rounds.iter().flat_map(|r| r.epochs.iter())
    }

    pub fn report(&self) -> VsrReport {
        let best = self.best().expect("finished run has entries");
        VsrReport {
            seed: self.seed,
            best_expr: best.expr.to_canonical_string(None),
            best_expr_fitted: best.expr.to_canonical_string(Some(&best.constants)),
            best_constants: best.constants.clone(),
            global_nmse: best.global_nmse,
            r_squared: 1.0 - best.global_nmse,
            rounds: self
                .rounds
                .iter()
                .map(|r| RoundSummary {
                    round: r.round,
                    variable: r.variable,
                    start_symbol: r.start.to_string(),
                    best_expr: r.best_expr.to_canonical_string(None),
                    constants: r.best_constants.clone(),
                    kinds: r.kinds.clone(),
                    verdict: r.verdict,
                    nmse: r.round_nmse,
                    epochs_run: r.epochs.len(),
                })
                .collect(),
        }
    }
}

/// Runs the whole vertical loop: one round per variable in order, threading
/// the start symbol, and refitting each round winner on a shared no-control
/// batch for the hall of fame.
pub fn run_vsr(source: &dyn DataSource, cfg: &VsrConfig, seed: u64) -> Result<VsrRun, VsrError> {
    cfg.validate()?;
    let n = source.n_vars();
    let order: Vec<usize> = match &cfg.variable_order {
        Some(o) => {
            let mut sorted = o.clone();
            sorted.sort_unstable();
            if sorted != (0..n).collect::<Vec<_>>() {
                return Err(VsrError::Config(format!(
                    "variable_order must be a permutation of 0..{n}"
                )));
            }
            o.clone()
        }
        None => (0..n).collect(),
    };
    let global_batch = source.sample(
        &ControlSpec::free(),
        cfg.data_batch_size,
        derive_seed(seed, &[TAG_GLOBAL_BATCH]),
    )?;
    let mut start = SymbolString::atom();
    let mut rounds = Vec::with_capacity(n);
    let mut hall = HallOfFame::default();
    let mut net_slot: Option<PolicyNet> = None;
    for (r, &var) in order.iter().enumerate() {
        let ctx = RoundCtx {
            round: r,
            start: start.clone(),
            new_var: var,
            seen: order[..=r].to_vec(),
            controlled: order[r + 1..].iter().copied().collect(),
        };
        let round_seed = derive_seed(seed, &[TAG_ROUND, r as u64]);
        let res = run_round(source, cfg, &ctx, round_seed, &mut net_slot)?;
        let gfit = fit_batch(
            &res.best_expr,
            &global_batch,
            &cfg.trial_fit,
            derive_seed(seed, &[TAG_GLOBAL_FIT, r as u64]),
        );
        hall.entries.push(HofEntry {
            round: r,
            expr: res.best_expr.clone(),
            constants: gfit.constants,
            global_nmse: gfit.nmse,
        });
        start = res.next_start.clone();
        rounds.push(res);
    }
    Ok(VsrRun { rounds, hall, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_expression, structural_equal_mod_constants};
    use crate::oracle::OracleSpec;

    fn fr(nmse: f64, constants: Vec<f64>) -> FitResult {
        FitResult {
            mse: nmse,
            nmse,
            constants,
            converged: true,
        }
    }

    #[test]
    fn classification_splits_stable_and_tracking_constants() {
        let e = parse_expression("C1*x0+C2").unwrap();
        // C1 pinned at 3 across trials, C2 tracks the controlled value.
        let trials: Vec<FitResult> = [0.4, 1.7, -2.2, 0.9, 3.0]
            .iter()
            .map(|&v| fr(1e-9, vec![3.0 + 1e-4 * v, v]))
            .collect();
        let c = classify_constants(&e, &trials, 1e-2, 1e-3).unwrap();
        assert_eq!(c.verdict, Verdict::Consistent);
        assert_eq!(c.kinds, vec![ConstKind::Standalone, ConstKind::Summary]);
        assert!((c.values[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn one_bad_trial_makes_everything_summary() {
        let e = parse_expression("C1*x0+C2").unwrap();
        let mut trials: Vec<FitResult> =
            (0..5).map(|_| fr(1e-9, vec![3.0, 1.0])).collect();
        trials[3] = fr(0.5, vec![3.0, 1.0]);
        let c = classify_constants(&e, &trials, 1e-2, 1e-3).unwrap();
        assert_eq!(c.verdict, Verdict::Inconsistent);
        assert_eq!(c.kinds, vec![ConstKind::Summary, ConstKind::Summary]);
    }

    #[test]
    fn classification_ignores_trial_order() {
        let e = parse_expression("C1*x0+C2").unwrap();
        let trials: Vec<FitResult> = [0.4, 1.7, -2.2, 0.9]
            .iter()
            .map(|&v| fr(1e-9, vec![3.0, v]))
            .collect();
        let mut shuffled = trials.clone();
        shuffled.reverse();
        shuffled.swap(0, 1);
        let a = classify_constants(&e, &trials, 1e-2, 1e-3).unwrap();
        let b = classify_constants(&e, &shuffled, 1e-2, 1e-3).unwrap();
        assert_eq!(a.verdict, b.verdict);
        assert_eq!(a.kinds, b.kinds);
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            // Summation order may shift the mean by rounding dust only.
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn classification_needs_two_trials() {
        let e = parse_expression("C1").unwrap();
        let trials = vec![fr(0.0, vec![1.0])];
        assert!(matches!(
            classify_constants(&e, &trials, 1e-2, 1e-3),
            Err(VsrError::TooFewTrials { got: 1 })
        ));
    }

    /// Tiny-but-real config so loop tests stay fast on one core.
    fn smoke_cfg(operators: Vec<Operator>) -> VsrConfig {
        let mut cfg = VsrConfig::desk(operators);
        cfg.policy.hidden_dim = 32;
        cfg.policy.embed_dim = 32;
        cfg.policy.num_layers = 1;
        cfg.policy.samples_per_epoch = 128;
        cfg.policy.epochs_per_round = 10;
        cfg.policy.max_len = 12;
        cfg.data_batch_size = 128;
        cfg.k_trials = 5;
        cfg
    }

    #[test]
    fn round_one_learns_the_reduced_form_and_kinds() {
        // Truth 3*x0 + x1 with x1 controlled collapses to 3*x0 + C; the
        // coefficient should come back standalone and the offset summary.
        let gt = parse_expression("3.0*x0+x1").unwrap();
        let spec = OracleSpec::new(gt, 2, vec![(0.2, 4.0), (0.2, 4.0)], 0.0).unwrap();
        let cfg = smoke_cfg(vec![Operator::Add, Operator::Mul]);
        let ctx = RoundCtx {
            round: 0,
            start: SymbolString::atom(),
            new_var: 0,
            seen: vec![0],
            controlled: [1usize].into_iter().collect(),
        };
        let mut slot = None;
        let res = run_round(&spec, &cfg, &ctx, 60, &mut slot).unwrap();
        assert!(res.round_nmse < 1e-8, "round nmse {}", res.round_nmse);
        assert_eq!(res.verdict, Verdict::Consistent);
        let target = parse_expression("C1*x0+C2").unwrap();
        assert!(
            structural_equal_mod_constants(&res.best_expr, &target),
            "won {}",
            res.best_expr.to_canonical_string(None)
        );
        // One constant stable near 3, one tracking the controlled variable.
        let stable: Vec<_> = res
            .kinds
            .iter()
            .zip(&res.best_constants)
            .filter(|(k, _)| **k == ConstKind::Standalone)
            .collect();
        assert_eq!(stable.len(), 1, "kinds {:?}", res.kinds);
        assert!((stable[0].1 - 3.0).abs() < 1e-3);
    }

    #[test]
    fn degenerate_start_passes_through() {
        let gt = parse_expression("2.0*x0").unwrap();
        let spec = OracleSpec::new(gt, 1, vec![(0.5, 2.0)], 0.0).unwrap();
        let cfg = smoke_cfg(vec![Operator::Mul]);
        let closed = make_start_symbol(
            &parse_expression("2.0*x0").unwrap(),
            &[],
            &[],
        )
        .unwrap();
        assert_eq!(closed.hole_count(), 0);
        let ctx = RoundCtx {
            round: 1,
            start: closed.clone(),
            new_var: 0,
            seen: vec![0],
            controlled: BTreeSet::new(),
        };
        let mut slot = None;
        let res = run_round(&spec, &cfg, &ctx, 1, &mut slot).unwrap();
        assert_eq!(res.best_expr, parse_expression("2.0*x0").unwrap());
        assert!(res.epochs.is_empty());
        assert!(res.round_nmse < 1e-12);
        assert_eq!(res.next_start.to_string(), closed.to_string());
    }

    #[test]
    fn single_variable_run_recovers_a_line() {
        let gt = parse_expression("2.5*x0+1.3").unwrap();
        let spec = OracleSpec::new(gt.clone(), 1, vec![(-2.0, 2.0)], 0.0).unwrap();
        let cfg = smoke_cfg(vec![Operator::Add, Operator::Mul]);
        let run = run_vsr(&spec, &cfg, 17).unwrap();
        assert_eq!(run.rounds.len(), 1);
        let best = run.best().unwrap();
        assert!(best.global_nmse < 1e-8, "global nmse {}", best.global_nmse);
        assert!(structural_equal_mod_constants(&best.expr, &gt));
        let report = run.report();
        assert_eq!(report.rounds.len(), 1);
        assert!(serde_json::to_string(&report).unwrap().contains("best_expr"));
    }

    #[test]
    fn two_variable_run_threads_start_symbols() {
        let gt = parse_expression("3.0*x0+x1").unwrap();
        let spec = OracleSpec::new(gt.clone(), 2, vec![(0.2, 4.0), (0.2, 4.0)], 0.0).unwrap();
        let cfg = smoke_cfg(vec![Operator::Add, Operator::Mul]);
        let run = run_vsr(&spec, &cfg, 60).unwrap();
        assert_eq!(run.rounds.len(), 2);
        // Every round winner must extend the start it was given.
        for r in &run.rounds {
            assert!(reduce_to_start(&r.best_expr, &r.start).is_some());
        }
        // Round 2's start must carry round 1's structure.
        assert_eq!(run.rounds[1].start.to_string(), run.rounds[0].next_start.to_string());
        let best = run.best().unwrap();
        assert!(
            structural_equal_mod_constants(&best.expr, &gt),
            "recovered {}",
            best.expr.to_canonical_string(Some(&best.constants))
        );
        assert!(best.global_nmse < 1e-8);
    }

    #[test]
    fn config_validation_catches_misuse() {
        let mut cfg = VsrConfig::desk(vec![Operator::Add]);
        cfg.k_trials = 1;
        assert!(matches!(
            run_vsr(
                &OracleSpec::new(parse_expression("x0").unwrap(), 1, vec![(0.0, 1.0)], 0.0)
                    .unwrap(),
                &cfg,
                0
            ),
            Err(VsrError::Config(_))
        ));
        let cfg2 = VsrConfig::desk(vec![]);
        assert!(cfg2.validate().is_err());
    }
}
