//! Vertical symbolic regression with a recurrent policy network.
//!
//! The crate discovers closed-form expressions (and ODE right-hand sides)
//! from data produced by control-variable experiments. The engine holds all
//! but one variable of the unknown system fixed, searches for a reduced-form
//! equation over the free variable, classifies the fitted constants into
//! standalone values and summaries of still-controlled variables, and then
//! re-opens the summary slots as search targets when the next variable is
//! released. Candidate structures are sampled as grammar-rule sequences from
//! a from-scratch LSTM policy trained with REINFORCE; open constants are
//! fitted per candidate with a quasi-Newton optimizer.
//!
//! Module map:
//!
//! * [`expr`] - expression trees, evaluation, parsing, structural comparison
//! * [`grammar`] - production rules, sentential forms, rule-sequence replay
//! * [`oracle`] - control-variable data oracles and ODE integration
//! * [`fit`] - constant fitting (BFGS) and error metrics
//! * [`policy`] - LSTM policy network, sampling, REINFORCE updates
//! * [`vsr`] - the vertical discovery loop (rounds over variables)
//! * [`gp`] - genetic-programming baselines, plain and vertical
//! * [`bench`] - task catalog, benchmark runner, aggregation
//! * [`config`] - run configuration, profiles, overrides
//! * [`runner`] - command entry points used by the thin CLI binary
//!
//! The `examples/` directory is the guided tour; each file exercises one
//! capability end to end (`cargo run --release -p vsr-forge --example
//! discover_xprod`).

pub mod bench;
pub mod config;
pub mod expr;
pub mod fit;
pub mod gp;
pub mod grammar;
pub mod oracle;
pub mod policy;
pub mod runner;
pub mod vsr;

pub(crate) mod util;
