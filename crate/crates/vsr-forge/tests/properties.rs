//! Randomized invariants over the grammar/expression/oracle layers.

use proptest::prelude::*;

use vsr_forge::expr::{parse_expression, structural_equal_mod_constants, BinOp, Expr};
use vsr_forge::fit::{fit_batch, FitOptions};
use vsr_forge::grammar::{
    build_grammar, make_start_symbol, reduce_to_start, rules_to_expression, ConstKind, Grammar,
    Operator, SymbolString,
};
use vsr_forge::oracle::{ControlSpec, DataSource, OracleSpec};

fn wide_grammar() -> Grammar {
    build_grammar(
        &[
            Operator::Add,
            Operator::Sub,
            Operator::Mul,
            Operator::Div,
            Operator::Sin,
            Operator::Cos,
        ],
        &[0, 1],
        true,
    )
}

fn replay(g: &Grammar, start: &SymbolString, seq: &[usize], seed: u64) -> (Expr, usize) {
    let seq: Vec<usize> = seq.iter().map(|i| i % g.len()).collect();
    rules_to_expression(g, start, &seq, seed).expect("single-sort grammar accepts any ids")
}

proptest! {
    // Whatever rule sequence is replayed from a start symbol, the resulting
    // expression still extends that start symbol, and collapsing it back
    // re-opens exactly the holes the start symbol had.
    #[test]
    fn replayed_sequences_extend_their_start(
        seq1 in proptest::collection::vec(0usize..64, 0..12),
        seq2 in proptest::collection::vec(0usize..64, 0..12),
        kinds_bits in proptest::collection::vec(any::<bool>(), 8),
        seed in any::<u64>(),
    ) {
        let g = wide_grammar();
        let (base, _) = replay(&g, &SymbolString::atom(), &seq1, seed);
        let m = base.open_constant_count();
        let kinds: Vec<ConstKind> = (0..m)
            .map(|j| if kinds_bits[j % kinds_bits.len()] { ConstKind::Summary } else { ConstKind::Standalone })
            .collect();
        let values = vec![0.5; m];
        let start = make_start_symbol(&base, &kinds, &values).unwrap();

        let (grown, _) = replay(&g, &start, &seq2, seed.wrapping_add(1));
        let collapsed = reduce_to_start(&grown, &start);
        prop_assert!(collapsed.is_some(), "grown expression no longer extends its start");
        prop_assert_eq!(collapsed.unwrap().open_constant_count(), start.hole_count());
    }

    // Replay is a pure function of (start, sequence, completion seed).
    #[test]
    fn replay_is_deterministic(
        seq in proptest::collection::vec(0usize..64, 0..10),
        seed in any::<u64>(),
    ) {
        let g = wide_grammar();
        let (a, used_a) = replay(&g, &SymbolString::atom(), &seq, seed);
        let (b, used_b) = replay(&g, &SymbolString::atom(), &seq, seed);
        prop_assert_eq!(used_a, used_b);
        prop_assert_eq!(a, b);
    }

    // Canonical strings parse back to the identical tree.
    #[test]
    fn canonical_strings_round_trip(
        seq in proptest::collection::vec(0usize..64, 0..14),
        seed in any::<u64>(),
    ) {
        let g = wide_grammar();
        let (e, _) = replay(&g, &SymbolString::atom(), &seq, seed);
        let back = parse_expression(&e.to_canonical_string(None)).unwrap();
        prop_assert_eq!(&back, &e);
        prop_assert!(structural_equal_mod_constants(&back, &e));
    }

    // Structural equality modulo constants is reflexive and blind to an
    // added exact-zero term.
    #[test]
    fn structural_equality_ignores_exact_zero_terms(
        seq in proptest::collection::vec(0usize..64, 0..12),
        seed in any::<u64>(),
    ) {
        let g = wide_grammar();
        let (e, _) = replay(&g, &SymbolString::atom(), &seq, seed);
        prop_assert!(structural_equal_mod_constants(&e, &e));
        let padded = Expr::Binary(BinOp::Add, Box::new(e.clone()), Box::new(Expr::Lit(0.0)));
        prop_assert!(structural_equal_mod_constants(&padded, &e));
    }

    // Controlled columns hold one value per batch and every sample stays in
    // its declared range.
    #[test]
    fn batches_respect_control_and_ranges(
        n in 2usize..40,
        ctrl_mask in proptest::collection::vec(any::<bool>(), 4),
        seed in any::<u64>(),
    ) {
        let truth = parse_expression("((x0*x2)-(x1*x3))").unwrap();
        let spec = OracleSpec::new(truth, 4, vec![(-5.0, 5.0); 4], 0.0).unwrap();
        let ctrl_vars: Vec<usize> = (0..4).filter(|&j| ctrl_mask[j]).collect();
        let batch = spec
            .sample(&ControlSpec::controlling(ctrl_vars.iter().copied()), n, seed)
            .unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..n).map(|i| batch.x[[i, j]]).collect();
            prop_assert!(col.iter().all(|v| (-5.0..=5.0).contains(v)));
            if ctrl_vars.contains(&j) {
                prop_assert!(col.windows(2).all(|w| w[0] == w[1]));
                prop_assert_eq!(batch.controlled.get(&j).copied(), Some(col[0]));
            }
        }
    }

    // Constant fitting is seed-deterministic.
    #[test]
    fn fitting_is_seed_deterministic(seed in any::<u64>()) {
        let truth = parse_expression("2.0*x0+1.0").unwrap();
        let spec = OracleSpec::new(truth, 1, vec![(-3.0, 3.0)], 0.0).unwrap();
        let batch = spec.sample(&ControlSpec::free(), 64, seed).unwrap();
        let skel = parse_expression("C1*x0+C2").unwrap();
        let a = fit_batch(&skel, &batch, &FitOptions::default(), seed);
        let b = fit_batch(&skel, &batch, &FitOptions::default(), seed);
        prop_assert_eq!(a.constants, b.constants);
        prop_assert_eq!(a.nmse.to_bits(), b.nmse.to_bits());
    }
}
