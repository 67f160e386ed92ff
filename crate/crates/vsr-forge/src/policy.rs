//! Recurrent policy over grammar rules.
//!
//! A token embedding feeds a stack of LSTM layers whose top hidden state is
//! projected to one logit per vocabulary entry; a mask zeroes inactive
//! entries before the softmax. The vocabulary is the rule set of the current
//! grammar plus one reserved start-of-sequence token (the last id, never
//! sampled). Everything is implemented directly on `f64` arrays: forward,
//! backpropagation through time, and Adam, so training is bit-reproducible
//! from a seed.

use crate::grammar::{Grammar, SymbolString};
use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("all vocabulary entries are masked: empty action set")]
    EmptyActionSet,
    #[error("network vocabulary is {net} but the grammar needs {grammar}")]
    VocabMismatch { net: usize, grammar: usize },
    #[error("token {token} is out of range for vocabulary {vocab}")]
    BadToken { token: usize, vocab: usize },
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("rollout and reward counts differ: {rollouts} vs {rewards}")]
    RewardCount { rollouts: usize, rewards: usize },
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
}

/// Network and training-shape knobs. `samples_per_epoch` and
/// `epochs_per_round` live here because they size the sampling batches the
/// net was designed around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// Grammar rule count plus the reserved start token.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// Longest rule sequence sampled per rollout.
    pub max_len: usize,
    pub lr: f64,
    pub samples_per_epoch: usize,
    pub epochs_per_round: usize,
}

impl PolicyConfig {
    /// Full-size profile from the reference experiments.
    pub fn full(vocab_size: usize) -> PolicyConfig {
        PolicyConfig {
            vocab_size,
            embed_dim: 512,
            hidden_dim: 512,
            num_layers: 3,
            max_len: 20,
            lr: 0.009,
            samples_per_epoch: 1024,
            epochs_per_round: 30,
        }
    }

    /// Small profile that trains in seconds on one core; same algorithm.
    pub fn desk(vocab_size: usize) -> PolicyConfig {
        PolicyConfig {
            vocab_size,
            embed_dim: 64,
            hidden_dim: 64,
            num_layers: 2,
            max_len: 20,
            lr: 0.009,
            samples_per_epoch: 256,
            epochs_per_round: 20,
        }
    }

    pub fn start_token(&self) -> usize {
        self.vocab_size - 1
    }
}

/// Which vocabulary entries may be sampled. The start token is always
/// masked; rounds can additionally deactivate rules.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMask {
    active: Vec<bool>,
}

impl TokenMask {
    pub fn from_flags(active: Vec<bool>) -> TokenMask {
        TokenMask { active }
    }

    /// All grammar rules active, start token masked.
    pub fn rules_only(grammar: &Grammar) -> TokenMask {
        let mut active = vec![true; grammar.len() + 1];
        *active.last_mut().expect("vocab nonempty") = false;
        TokenMask { active }
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn is_active(&self, token: usize) -> bool {
        self.active.get(token).copied().unwrap_or(false)
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }
}

/// Gate order inside the stacked 4H rows: input, forget, cell, output.
#[derive(Debug, Clone)]
struct LstmLayer {
    w_x: Array2<f64>,
    w_h: Array2<f64>,
    b: Array1<f64>,
}

/// Hidden and cell state per layer; rows are independent lanes.
#[derive(Debug, Clone)]
pub struct LstmState {
    h: Vec<Array2<f64>>,
    c: Vec<Array2<f64>>,
}

impl LstmState {
    pub fn zeros(cfg: &PolicyConfig, lanes: usize) -> LstmState {
        LstmState {
            h: (0..cfg.num_layers)
                .map(|_| Array2::zeros((lanes, cfg.hidden_dim)))
                .collect(),
            c: (0..cfg.num_layers)
                .map(|_| Array2::zeros((lanes, cfg.hidden_dim)))
                .collect(),
        }
    }

    pub fn lanes(&self) -> usize {
        self.h.first().map_or(0, |h| h.nrows())
    }
}

#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    fn new(n: usize) -> AdamState {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One ascending step: params move along the bias-corrected moment
    /// direction.
    fn ascend(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t as i32);
        let c2 = 1.0 - B2.powi(self.t as i32);
        for j in 0..params.len() {
            self.m[j] = B1 * self.m[j] + (1.0 - B1) * grad[j];
            self.v[j] = B2 * self.v[j] + (1.0 - B2) * grad[j] * grad[j];
            params[j] += lr * (self.m[j] / c1) / ((self.v[j] / c2).sqrt() + EPS);
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub cfg: PolicyConfig,
    embedding: Array2<f64>,
    layers: Vec<LstmLayer>,
    w_out: Array2<f64>,
    b_out: Array1<f64>,
    adam: AdamState,
}

/// Per-parameter gradients in the same shapes as the net.
struct Grads {
    embedding: Array2<f64>,
    layers: Vec<LstmLayer>,
    w_out: Array2<f64>,
    b_out: Array1<f64>,
}

impl Grads {
    fn zeros(cfg: &PolicyConfig) -> Grads {
        let h = cfg.hidden_dim;
        Grads {
            embedding: Array2::zeros((cfg.vocab_size, cfg.embed_dim)),
            layers: (0..cfg.num_layers)
                .map(|l| {
                    let in_dim = if l == 0 { cfg.embed_dim } else { h };
                    LstmLayer {
                        w_x: Array2::zeros((4 * h, in_dim)),
                        w_h: Array2::zeros((4 * h, h)),
                        b: Array1::zeros(4 * h),
                    }
                })
                .collect(),
            w_out: Array2::zeros((cfg.vocab_size, h)),
            b_out: Array1::zeros(cfg.vocab_size),
        }
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.embedding.iter());
        for l in &self.layers {
            out.extend(l.w_x.iter());
            out.extend(l.w_h.iter());
            out.extend(l.b.iter());
        }
        out.extend(self.w_out.iter());
        out.extend(self.b_out.iter());
        out
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl PolicyNet {
    /// All parameters drawn uniform(-k, k), k = 1/sqrt(hidden). Draw order
    /// matches the flat layout, so a seed pins the whole net.
    pub fn init(cfg: PolicyConfig, seed: u64) -> PolicyNet {
        let mut net = PolicyNet::zeroed(cfg);
        let k = 1.0 / (net.cfg.hidden_dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flat = net.params_flat();
        for p in flat.iter_mut() {
            *p = rng.gen_range(-k..k);
        }
        net.set_params_flat(&flat).expect("own layout");
        net
    }

    /// Zero weights make every unmasked token equally likely; handy as a
    /// known starting point in tests.
    pub fn zeroed(cfg: PolicyConfig) -> PolicyNet {
        let h = cfg.hidden_dim;
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let in_dim = if l == 0 { cfg.embed_dim } else { h };
                LstmLayer {
                    w_x: Array2::zeros((4 * h, in_dim)),
                    w_h: Array2::zeros((4 * h, h)),
                    b: Array1::zeros(4 * h),
                }
            })
            .collect();
        let embedding = Array2::zeros((cfg.vocab_size, cfg.embed_dim));
        let w_out = Array2::zeros((cfg.vocab_size, h));
        let b_out = Array1::zeros(cfg.vocab_size);
        let n = param_count(&cfg);
        PolicyNet {
            cfg,
            embedding,
            layers,
            w_out,
            b_out,
            adam: AdamState::new(n),
        }
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.cfg)
    }

    /// Flat layout: embedding, then per layer w_x, w_h, b, then projection
    /// weight and bias, all row-major.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(self.embedding.iter());
        for l in &self.layers {
            out.extend(l.w_x.iter());
            out.extend(l.w_h.iter());
            out.extend(l.b.iter());
        }
        out.extend(self.w_out.iter());
        out.extend(self.b_out.iter());
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<(), PolicyError> {
        if flat.len() != self.param_count() {
            return Err(PolicyError::ParamCount {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        let fill2 = |a: &mut Array2<f64>, it: &mut dyn Iterator<Item = f64>| {
            for v in a.iter_mut() {
                *v = it.next().expect("length checked");
            }
        };
        fill2(&mut self.embedding, &mut it);
        for l in &mut self.layers {
            fill2(&mut l.w_x, &mut it);
            fill2(&mut l.w_h, &mut it);
            for v in l.b.iter_mut() {
                *v = it.next().expect("length checked");
            }
        }
        fill2(&mut self.w_out, &mut it);
        for v in self.b_out.iter_mut() {
            *v = it.next().expect("length checked");
        }
        Ok(())
    }

    /// One batched step: embeds `tokens`, updates the state in place, and
    /// writes the masked softmax into `probs` (lanes x vocab). With a tape,
    /// per-gate activations are recorded for backprop.
    fn step_batch(
        &self,
        tokens: &[usize],
        state: &mut LstmState,
        mask: &TokenMask,
        probs: &mut Array2<f64>,
        mut tape: Option<&mut TapeStep>,
    ) -> Result<(), PolicyError> {
        let n = tokens.len();
        let h = self.cfg.hidden_dim;
        let vocab = self.cfg.vocab_size;
        if mask.active_count() == 0 {
            return Err(PolicyError::EmptyActionSet);
        }
        let mut x = Array2::zeros((n, self.cfg.embed_dim));
        for (lane, &tok) in tokens.iter().enumerate() {
            if tok >= vocab {
                return Err(PolicyError::BadToken { token: tok, vocab });
            }
            x.row_mut(lane).assign(&self.embedding.row(tok));
        }
        if let Some(t) = tape.as_deref_mut() {
            t.tokens = tokens.to_vec();
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let mut gates = x.dot(&layer.w_x.t()) + state.h[l].dot(&layer.w_h.t());
            gates += &layer.b;
            let mut i_g = gates.slice(s![.., 0..h]).to_owned();
            let mut f_g = gates.slice(s![.., h..2 * h]).to_owned();
            let mut g_g = gates.slice(s![.., 2 * h..3 * h]).to_owned();
            let mut o_g = gates.slice(s![.., 3 * h..4 * h]).to_owned();
            i_g.mapv_inplace(sigmoid);
            f_g.mapv_inplace(sigmoid);
            g_g.mapv_inplace(f64::tanh);
            o_g.mapv_inplace(sigmoid);
            let c_new = &f_g * &state.c[l] + &i_g * &g_g;
            let tanh_c = c_new.mapv(f64::tanh);
            let h_new = &o_g * &tanh_c;
            if let Some(t) = tape.as_deref_mut() {
                t.layers.push(LayerTape {
                    i: i_g,
                    f: f_g,
                    g: g_g,
                    o: o_g,
                    tanh_c,
                    h: h_new.clone(),
                });
            }
            state.c[l] = c_new;
            state.h[l] = h_new.clone();
            x = h_new;
        }
        let mut logits = x.dot(&self.w_out.t());
        logits += &self.b_out;
        for lane in 0..n {
            masked_softmax_row(logits.row(lane).to_slice().expect("contiguous"), mask, probs.row_mut(lane).into_slice().expect("contiguous"));
        }
        if let Some(t) = tape {
            t.probs = probs.clone();
        }
        Ok(())
    }

    /// Single-lane distribution over the vocabulary after consuming `token`.
    /// Masked entries are exactly zero and the rest sum to one.
    pub fn forward_step(
        &self,
        token: usize,
        state: &mut LstmState,
        mask: &TokenMask,
    ) -> Result<Array1<f64>, PolicyError> {
        let mut probs = Array2::zeros((1, self.cfg.vocab_size));
        self.step_batch(&[token], state, mask, &mut probs, None)?;
        Ok(probs.row(0).to_owned())
    }

    pub fn to_checkpoint_json(&self) -> String {
        #[derive(Serialize)]
        struct Checkpoint<'a> {
            version: u32,
            config: &'a PolicyConfig,
            params: Vec<f64>,
        }
        serde_json::to_string(&Checkpoint {
            version: 1,
            config: &self.cfg,
            params: self.params_flat(),
        })
        .expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(s: &str) -> Result<PolicyNet, PolicyError> {
        #[derive(Deserialize)]
        struct Checkpoint {
            version: u32,
            config: PolicyConfig,
            params: Vec<f64>,
        }
        let ck: Checkpoint =
            serde_json::from_str(s).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        if ck.version != 1 {
            return Err(PolicyError::Checkpoint(format!(
                "unsupported version {}",
                ck.version
            )));
        }
        let mut net = PolicyNet::zeroed(ck.config);
        net.set_params_flat(&ck.params)?;
        Ok(net)
    }
}

fn param_count(cfg: &PolicyConfig) -> usize {
    let h = cfg.hidden_dim;
    let mut n = cfg.vocab_size * cfg.embed_dim;
    for l in 0..cfg.num_layers {
        let in_dim = if l == 0 { cfg.embed_dim } else { h };
        n += 4 * h * in_dim + 4 * h * h + 4 * h;
    }
    n + cfg.vocab_size * h + cfg.vocab_size
}

/// Softmax over active entries only; inactive entries get exactly 0.
fn masked_softmax_row(logits: &[f64], mask: &TokenMask, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (j, &z) in logits.iter().enumerate() {
        if mask.is_active(j) && z > max {
            max = z;
        }
    }
    let mut sum = 0.0;
    for (j, &z) in logits.iter().enumerate() {
        if mask.is_active(j) {
            let e = (z - max).exp();
            out[j] = e;
            sum += e;
        } else {
            out[j] = 0.0;
        }
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

// ---------------------------------------------------------------------------
// Sampling

/// One sampled rule sequence. `seq` holds only the used prefix: sampling
/// stops once the symbol string completes or the length cap is hit.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledRollout {
    pub seq: Vec<usize>,
    pub step_logprobs: Vec<f64>,
    pub total_logprob: f64,
    pub used_prefix: usize,
}

impl SampledRollout {
    fn empty() -> SampledRollout {
        SampledRollout {
            seq: Vec::new(),
            step_logprobs: Vec::new(),
            total_logprob: 0.0,
            used_prefix: 0,
        }
    }
}

/// Samples `n` rollouts in lockstep. The first input is the reserved start
/// token; each sampled rule feeds back as the next input. Lanes whose symbol
/// string completes stop sampling (and stop drawing randomness); draws are
/// made in lane order within a step, so a seed pins the whole batch.
pub fn sample_rollouts(
    net: &PolicyNet,
    start: &SymbolString,
    grammar: &Grammar,
    n: usize,
    seed: u64,
) -> Result<Vec<SampledRollout>, PolicyError> {
    let needed = grammar.len() + 1;
    if needed != net.cfg.vocab_size {
        return Err(PolicyError::VocabMismatch {
            net: net.cfg.vocab_size,
            grammar: needed,
        });
    }
    let mask = TokenMask::rules_only(grammar);
    sample_rollouts_masked(net, start, grammar, &mask, n, seed)
}

/// As `sample_rollouts` but with extra rules deactivated.
pub fn sample_rollouts_masked(
    net: &PolicyNet,
    start: &SymbolString,
    grammar: &Grammar,
    mask: &TokenMask,
    n: usize,
    seed: u64,
) -> Result<Vec<SampledRollout>, PolicyError> {
    if mask.active_count() == 0 {
        return Err(PolicyError::EmptyActionSet);
    }
    let mut rollouts = vec![SampledRollout::empty(); n];
    let start_holes = start.hole_count() as isize;
    if start_holes == 0 || n == 0 {
        return Ok(rollouts);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = LstmState::zeros(&net.cfg, n);
    let mut inputs = vec![net.cfg.start_token(); n];
    let mut holes = vec![start_holes; n];
    let mut probs = Array2::zeros((n, net.cfg.vocab_size));
    for _ in 0..net.cfg.max_len {
        if holes.iter().all(|&h| h <= 0) {
            break;
        }
        net.step_batch(&inputs, &mut state, mask, &mut probs, None)?;
        for lane in 0..n {
            if holes[lane] <= 0 {
                inputs[lane] = 0;
                continue;
            }
            let row = probs.row(lane);
            let u: f64 = rng.gen();
            let tok = sample_index(row.to_slice().expect("contiguous"), u);
            let lp = row[tok].ln();
            let r = &mut rollouts[lane];
            r.seq.push(tok);
            r.step_logprobs.push(lp);
            r.total_logprob += lp;
            holes[lane] += grammar.rule(tok).expect("sampled from active rules").hole_delta();
            inputs[lane] = tok;
        }
    }
    for r in rollouts.iter_mut() {
        r.used_prefix = r.seq.len();
    }
    Ok(rollouts)
}

/// Inverse-CDF draw over a probability row.
fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_active = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_active = j;
            if u < acc {
                return j;
            }
        }
    }
    // Rounding can leave acc a hair under 1; fall back to the last entry.
    last_active
}

/// Teacher-forced log-probability of a fixed sequence; a second forward pass
/// used by consistency checks and the finite-difference tests.
pub fn rollout_logprob(
    net: &PolicyNet,
    seq: &[usize],
    mask: &TokenMask,
) -> Result<f64, PolicyError> {
    let mut state = LstmState::zeros(&net.cfg, 1);
    let mut input = net.cfg.start_token();
    let mut total = 0.0;
    for &tok in seq {
        let probs = net.forward_step(input, &mut state, mask)?;
        total += probs[tok].ln();
        input = tok;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// REINFORCE

struct LayerTape {
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    tanh_c: Array2<f64>,
    h: Array2<f64>,
}

struct TapeStep {
    tokens: Vec<usize>,
    layers: Vec<LayerTape>,
    probs: Array2<f64>,
}

impl TapeStep {
    fn new() -> TapeStep {
        TapeStep {
            tokens: Vec::new(),
            layers: Vec::new(),
            probs: Array2::zeros((0, 0)),
        }
    }
}

/// Gradient of sum_i weights[i] * log p(seqs[i]) with respect to every
/// parameter, via teacher forcing and backprop through time. Also returns
/// the weighted log-probability itself.
fn weighted_logprob_grads(
    net: &PolicyNet,
    seqs: &[&[usize]],
    weights: &[f64],
    mask: &TokenMask,
) -> Result<(Grads, f64), PolicyError> {
    let n = seqs.len();
    let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut grads = Grads::zeros(&net.cfg);
    if steps == 0 || n == 0 {
        return Ok((grads, 0.0));
    }
    let h = net.cfg.hidden_dim;
    let vocab = net.cfg.vocab_size;
    let layers = net.cfg.num_layers;

    // Forward with tape.
    let mut state = LstmState::zeros(&net.cfg, n);
    let mut c_hist: Vec<Vec<Array2<f64>>> = Vec::with_capacity(steps);
    let mut tape: Vec<TapeStep> = Vec::with_capacity(steps);
    let mut probs = Array2::zeros((n, vocab));
    let mut objective = 0.0;
    for t in 0..steps {
        let tokens: Vec<usize> = (0..n)
            .map(|lane| {
                if t == 0 {
                    net.cfg.start_token()
                } else if t - 1 < seqs[lane].len() {
                    seqs[lane][t - 1]
                } else {
                    0
                }
            })
            .collect();
        let mut step = TapeStep::new();
        let c_prev: Vec<Array2<f64>> = state.c.clone();
        net.step_batch(&tokens, &mut state, mask, &mut probs, Some(&mut step))?;
        c_hist.push(c_prev);
        for (lane, seq) in seqs.iter().enumerate() {
            if t < seq.len() {
                objective += weights[lane] * step.probs[[lane, seq[t]]].ln();
            }
        }
        tape.push(step);
    }

    // dlogits per step: weight * (onehot(action) - p) on active entries.
    let mut dh_next: Vec<Array2<f64>> = (0..layers).map(|_| Array2::zeros((n, h))).collect();
    let mut dc_next: Vec<Array2<f64>> = (0..layers).map(|_| Array2::zeros((n, h))).collect();
    for t in (0..steps).rev() {
        let step = &tape[t];
        let mut dlogits = Array2::zeros((n, vocab));
        for (lane, seq) in seqs.iter().enumerate() {
            if t >= seq.len() || weights[lane] == 0.0 {
                continue;
            }
            let a = seq[t];
            let w = weights[lane];
            for v in 0..vocab {
                if mask.is_active(v) {
                    let ind = if v == a { 1.0 } else { 0.0 };
                    dlogits[[lane, v]] = w * (ind - step.probs[[lane, v]]);
                }
            }
        }
        // Projection.
        let h_top = &step.layers[layers - 1].h;
        grads.w_out = grads.w_out + dlogits.t().dot(h_top);
        grads.b_out = grads.b_out + dlogits.sum_axis(ndarray::Axis(0));
        let mut dh: Vec<Array2<f64>> = dh_next.clone();
        dh[layers - 1] = &dh[layers - 1] + &dlogits.dot(&net.w_out);
        for l in (0..layers).rev() {
            let lt = &step.layers[l];
            let c_prev = &c_hist[t][l];
            let h_prev: Array2<f64> = if t == 0 {
                Array2::zeros((n, h))
            } else {
                tape[t - 1].layers[l].h.clone()
            };
            let d_o = &dh[l] * &lt.tanh_c;
            let mut dc = &dh[l] * &lt.o;
            dc.zip_mut_with(&lt.tanh_c, |d, &tc| *d *= 1.0 - tc * tc);
            dc = dc + &dc_next[l];
            let d_i = &dc * &lt.g;
            let d_g = &dc * &lt.i;
            let d_f = &dc * c_prev;
            dc_next[l] = &dc * &lt.f;
            // Pre-activation gradients, stacked into (n x 4h).
            let mut dgates = Array2::zeros((n, 4 * h));
            {
                let mut di_pre = d_i.clone();
                di_pre.zip_mut_with(&lt.i, |d, &s| *d *= s * (1.0 - s));
                let mut df_pre = d_f.clone();
                df_pre.zip_mut_with(&lt.f, |d, &s| *d *= s * (1.0 - s));
                let mut dg_pre = d_g.clone();
                dg_pre.zip_mut_with(&lt.g, |d, &s| *d *= 1.0 - s * s);
                let mut do_pre = d_o.clone();
                do_pre.zip_mut_with(&lt.o, |d, &s| *d *= s * (1.0 - s));
                dgates.slice_mut(s![.., 0..h]).assign(&di_pre);
                dgates.slice_mut(s![.., h..2 * h]).assign(&df_pre);
                dgates.slice_mut(s![.., 2 * h..3 * h]).assign(&dg_pre);
                dgates.slice_mut(s![.., 3 * h..4 * h]).assign(&do_pre);
            }
            let x_t: Array2<f64> = if l == 0 {
                let mut x = Array2::zeros((n, net.cfg.embed_dim));
                for (lane, &tok) in step.tokens.iter().enumerate() {
                    x.row_mut(lane).assign(&net.embedding.row(tok));
                }
                x
            } else {
                step.layers[l - 1].h.clone()
            };
            grads.layers[l].w_x = &grads.layers[l].w_x + &dgates.t().dot(&x_t);
            grads.layers[l].w_h = &grads.layers[l].w_h + &dgates.t().dot(&h_prev);
            grads.layers[l].b = &grads.layers[l].b + &dgates.sum_axis(ndarray::Axis(0));
            let dx = dgates.dot(&net.layers[l].w_x);
            dh_next[l] = dgates.dot(&net.layers[l].w_h);
            if l > 0 {
                dh[l - 1] = &dh[l - 1] + &dx;
            } else {
                for (lane, &tok) in step.tokens.iter().enumerate() {
                    let mut row = grads.embedding.row_mut(tok);
                    row += &dx.row(lane);
                }
            }
        }
    }
    Ok((grads, objective))
}

/// Flat-vector variant for gradient tests.
pub fn logprob_gradient_flat(
    net: &PolicyNet,
    seqs: &[&[usize]],
    weights: &[f64],
    mask: &TokenMask,
) -> Result<(Vec<f64>, f64), PolicyError> {
    let (g, obj) = weighted_logprob_grads(net, seqs, weights, mask)?;
    Ok((g.flat(), obj))
}

#[derive(Debug, Clone)]
pub struct UpdateReport {
    /// Mean reward used as the baseline.
    pub baseline: f64,
    /// L2 norm of the policy gradient.
    pub grad_norm: f64,
    /// Weighted log-probability the step ascends.
    pub objective: f64,
    /// False when a non-finite gradient made the step a no-op.
    pub applied: bool,
}

/// One REINFORCE step: g = (1/N) sum_i (r_i - mean r) grad log p(tau_i),
/// applied with an ascending Adam update. A non-finite gradient skips the
/// update and reports it.
pub fn reinforce_update(
    net: &mut PolicyNet,
    rollouts: &[SampledRollout],
    rewards: &[f64],
    mask: &TokenMask,
) -> Result<UpdateReport, PolicyError> {
    if rollouts.len() != rewards.len() {
        return Err(PolicyError::RewardCount {
            rollouts: rollouts.len(),
            rewards: rewards.len(),
        });
    }
    let n = rollouts.len();
    if n == 0 {
        return Ok(UpdateReport {
            baseline: 0.0,
            grad_norm: 0.0,
            objective: 0.0,
            applied: true,
        });
    }
    let baseline = rewards.iter().sum::<f64>() / n as f64;
    if rewards.windows(2).all(|w| w[0] == w[1]) {
        // The baseline cancels every advantage exactly; stepping the
        // optimizer on rounding dust would still move parameters.
        return Ok(UpdateReport {
            baseline,
            grad_norm: 0.0,
            objective: 0.0,
            applied: true,
        });
    }
    let weights: Vec<f64> = rewards.iter().map(|r| (r - baseline) / n as f64).collect();
    let seqs: Vec<&[usize]> = rollouts.iter().map(|r| &r.seq[..r.used_prefix]).collect();
    let (grads, objective) = weighted_logprob_grads(net, &seqs, &weights, mask)?;
    let flat = grads.flat();
    let norm2: f64 = flat.iter().map(|g| g * g).sum();
    if !norm2.is_finite() {
        return Ok(UpdateReport {
            baseline,
            grad_norm: f64::INFINITY,
            objective,
            applied: false,
        });
    }
    let mut params = net.params_flat();
    net.adam.ascend(&mut params, &flat, net.cfg.lr);
    net.set_params_flat(&params)?;
    Ok(UpdateReport {
        baseline,
        grad_norm: norm2.sqrt(),
        objective,
        applied: true,
    })
}
