//! REINFORCE sanity check on a one-step bandit.
//!
//! A grammar whose start symbol resolves in a single rule choice turns the
//! policy network into a bandit: each arm is a production rule. Rewarding
//! one arm must drive its probability toward 1. Prints the probability
//! trajectory so the convergence is visible.

use vsr_forge::grammar::{build_grammar, Operator, SymbolString};
use vsr_forge::policy::{reinforce_update, sample_rollouts, PolicyConfig, PolicyNet, TokenMask};

fn main() {
    // Rules: (A+A), (A-A), A*A, x0, const. Terminal arms are 3 and 4.
    let g = build_grammar(&[Operator::Add, Operator::Sub, Operator::Mul], &[0], true);
    let target = 3; // pay out only for "A -> x0"

    let mut cfg = PolicyConfig::desk(g.len() + 1);
    cfg.max_len = 1;
    let mut net = PolicyNet::init(cfg, 0);
    let mask = TokenMask::rules_only(&g);
    let start = SymbolString::atom();

    println!("reward 1.0 for rule {target} ({}), 0.0 otherwise\n", g.rule(target).unwrap());
    for epoch in 0..60 {
        let rollouts = sample_rollouts(&net, &start, &g, 64, 1000 + epoch as u64).unwrap();
        let rewards: Vec<f64> = rollouts
            .iter()
            .map(|r| if r.seq[0] == target { 1.0 } else { 0.0 })
            .collect();
        let hits = rewards.iter().sum::<f64>() / rewards.len() as f64;
        if epoch % 10 == 0 {
            println!("epoch {epoch:>3}  p(target) ~ {hits:.3}");
        }
        reinforce_update(&mut net, &rollouts, &rewards, &mask).unwrap();
    }

    let check = sample_rollouts(&net, &start, &g, 1000, 999).unwrap();
    let p = check.iter().filter(|r| r.seq[0] == target).count() as f64 / 1000.0;
    println!("\nafter training  p(target) ~ {p:.3}");
}
