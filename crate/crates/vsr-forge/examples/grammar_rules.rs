//! Expressions as grammar-rule sequences.
//!
//! Builds a small arithmetic grammar, prints its production rules, replays a
//! rule sequence into an expression, and shows the round-trip in the other
//! direction: reducing a grown expression back onto the start symbol it came
//! from.

use vsr_forge::grammar::{
    build_grammar, make_start_symbol, reduce_to_start, rules_to_expression, ConstKind,
    Operator, SymbolString,
};

fn main() {
    let g = build_grammar(
        &[Operator::Add, Operator::Sub, Operator::Mul],
        &[1],
        true,
    );

    println!("rules over {{+, -, *}} with variable x1:");
    for r in g.rules() {
        println!("  {:>2}  {}", r.id(), r);
    }

    // Leftmost derivation of (x1*C1)-C2 from the bare start symbol.
    let seq = [1, 2, 3, 4, 4];
    let (expr, used) = rules_to_expression(&g, &SymbolString::atom(), &seq, 0).unwrap();
    println!("\nreplay {:?}", seq);
    println!("  -> {}   ({} rules consumed)", expr.to_canonical_string(None), used);

    // Suppose fitting labelled C1 a summary of a still-controlled variable
    // and C2 a standalone value of -0.5. The next round's start symbol keeps
    // the frozen literal and re-opens the summary slot as a hole.
    let start = make_start_symbol(
        &expr,
        &[ConstKind::Summary, ConstKind::Standalone],
        &[2.0, -0.5],
    )
    .unwrap();
    println!("\nnext-round start symbol: {} hole(s)", start.hole_count());

    // Grow the hole into x2*C and check the result still extends the start.
    let g2 = build_grammar(&[Operator::Add, Operator::Sub, Operator::Mul], &[2], true);
    let (grown, _) = rules_to_expression(&g2, &start, &[2, 3, 4], 0).unwrap();
    println!("grown:     {}", grown.to_canonical_string(None));
    let collapsed = reduce_to_start(&grown, &start).expect("grown extends start");
    println!("collapsed: {}", collapsed.to_canonical_string(None));
}
