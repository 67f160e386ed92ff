//! Context-free grammar over expressions with a single non-terminal `A`.
//!
//! A grammar is a flat list of production rules (`A -> (A+A)`, `A -> x1`,
//! `A -> const`, ...). Search operates on rule id sequences; this module
//! replays such sequences against a start symbol by always expanding the
//! leftmost non-terminal, and converts completed sentential forms into
//! [`Expr`] trees.
//!
//! A [`SymbolString`] keeps two synchronized views of a sentential form: the
//! literal token string (what rule splicing produces, useful for display and
//! logs) and a tree with holes (the structural truth used for conversion, so
//! expression building never depends on re-parsing a flat string).

use crate::expr::{BinOp, Expr, UnOp};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Operators a grammar may offer. The canonical ordering below also fixes
/// rule ids: binary operators first, then unary, then variables ascending,
/// then `const`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operator {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
    #[serde(rename = "*")]
    Mul,
    #[serde(rename = "/")]
    Div,
    #[serde(rename = "sin")]
    Sin,
    #[serde(rename = "cos")]
    Cos,
}

impl Operator {
    pub const CANONICAL_ORDER: [Operator; 6] = [
        Operator::Add,
        Operator::Sub,
        Operator::Mul,
        Operator::Div,
        Operator::Sin,
        Operator::Cos,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Operator::Add => "+",
            Operator::Sub => "-",
            Operator::Mul => "*",
            Operator::Div => "/",
            Operator::Sin => "sin",
            Operator::Cos => "cos",
        }
    }

    pub fn parse(s: &str) -> Option<Operator> {
        Operator::CANONICAL_ORDER.iter().copied().find(|o| o.as_str() == s)
    }
}

#[derive(Debug, Error)]
pub enum GrammarError {
    #[error("rule id {0} is out of range")]
    InvalidRuleId(usize),
    #[error("sentential form has no non-terminal to expand")]
    NoNonTerminal,
    #[error("sentential form is incomplete (holes remain)")]
    IncompleteForm,
    #[error("grammar has no terminal rules to complete the form with")]
    NoTerminalRules,
    #[error("expression has {expected} open constants but {got} kinds/values were supplied")]
    KindCountMismatch { expected: usize, got: usize },
}

/// How a fitted constant behaves across control trials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstKind {
    /// The same value in every trial: a true constant of the system.
    Standalone,
    /// Varies with the controlled variables: it summarizes a subexpression
    /// that still depends on them.
    Summary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RuleKind {
    Bin(BinOp),
    Un(UnOp),
    Var(usize),
    Const,
}

/// One production `A -> rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductionRule {
    id: usize,
    kind: RuleKind,
}

impl ProductionRule {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Number of non-terminals on the right-hand side.
    pub fn nonterminal_count(&self) -> usize {
        match self.kind {
            RuleKind::Bin(_) => 2,
            RuleKind::Un(_) => 1,
            RuleKind::Var(_) | RuleKind::Const => 0,
        }
    }

    /// Net change in open holes when the rule is applied.
    pub fn hole_delta(&self) -> isize {
        self.nonterminal_count() as isize - 1
    }

    pub fn is_terminal(&self) -> bool {
        self.nonterminal_count() == 0
    }

    fn rhs_tokens(&self) -> Vec<Sym> {
        match self.kind {
            RuleKind::Bin(op @ (BinOp::Add | BinOp::Sub)) => {
                vec![Sym::Lp, Sym::Nt, Sym::Op(op.symbol()), Sym::Nt, Sym::Rp]
            }
            RuleKind::Bin(op) => vec![Sym::Nt, Sym::Op(op.symbol()), Sym::Nt],
            RuleKind::Un(op) => vec![Sym::Fn(op), Sym::Lp, Sym::Nt, Sym::Rp],
            RuleKind::Var(i) => vec![Sym::Var(i)],
            RuleKind::Const => vec![Sym::ConstSym],
        }
    }

    fn template(&self) -> Node {
        match self.kind {
            RuleKind::Bin(op) => Node::Bin(op, Box::new(Node::Hole), Box::new(Node::Hole)),
            RuleKind::Un(op) => Node::Un(op, Box::new(Node::Hole)),
            RuleKind::Var(i) => Node::Var(i),
            RuleKind::Const => Node::Const,
        }
    }
}

impl std::fmt::Display for ProductionRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "A->")?;
        match self.kind {
            RuleKind::Const => write!(f, "const"),
            _ => {
                for t in self.rhs_tokens() {
                    write!(f, "{t}")?;
                }
                Ok(())
            }
        }
    }
}

/// Serialized grammar description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarSpec {
    pub operators: Vec<Operator>,
    pub variables: Vec<usize>,
    pub allow_const: bool,
}

#[derive(Debug, Clone)]
pub struct Grammar {
    rules: Vec<ProductionRule>,
    spec: GrammarSpec,
}

/// Builds the rule set for an operator set, free variables and optionally an
/// open-constant terminal. Duplicate operators and variables are ignored;
/// rule ids follow the canonical ordering.
pub fn build_grammar(operators: &[Operator], variables: &[usize], allow_const: bool) -> Grammar {
    let ops: Vec<Operator> = Operator::CANONICAL_ORDER
        .iter()
        .copied()
        .filter(|o| operators.contains(o))
        .collect();
    let mut vars: Vec<usize> = variables.to_vec();
    vars.sort_unstable();
    vars.dedup();

    let mut rules = Vec::new();
    let push = |kind: RuleKind, rules: &mut Vec<ProductionRule>| {
        let id = rules.len();
        rules.push(ProductionRule { id, kind });
    };
    for op in &ops {
        match op {
            Operator::Add => push(RuleKind::Bin(BinOp::Add), &mut rules),
            Operator::Sub => push(RuleKind::Bin(BinOp::Sub), &mut rules),
            Operator::Mul => push(RuleKind::Bin(BinOp::Mul), &mut rules),
            Operator::Div => push(RuleKind::Bin(BinOp::Div), &mut rules),
            Operator::Sin => push(RuleKind::Un(UnOp::Sin), &mut rules),
            Operator::Cos => push(RuleKind::Un(UnOp::Cos), &mut rules),
        }
    }
    for &v in &vars {
        push(RuleKind::Var(v), &mut rules);
    }
    if allow_const {
        push(RuleKind::Const, &mut rules);
    }
    Grammar {
        rules,
        spec: GrammarSpec {
            operators: ops,
            variables: vars,
            allow_const,
        },
    }
}

impl Grammar {
    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> &[ProductionRule] {
        &self.rules
    }

    pub fn rule(&self, id: usize) -> Result<&ProductionRule, GrammarError> {
        self.rules.get(id).ok_or(GrammarError::InvalidRuleId(id))
    }

    pub fn terminal_rules(&self) -> Vec<&ProductionRule> {
        self.rules.iter().filter(|r| r.is_terminal()).collect()
    }

    pub fn spec(&self) -> &GrammarSpec {
        &self.spec
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.spec).expect("grammar spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Grammar, serde_json::Error> {
        let spec: GrammarSpec = serde_json::from_str(s)?;
        Ok(build_grammar(&spec.operators, &spec.variables, spec.allow_const))
    }
}

// ---------------------------------------------------------------------------
// Sentential forms

/// One display token of a sentential form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sym {
    /// The non-terminal `A`.
    Nt,
    Lp,
    Rp,
    Op(char),
    Fn(UnOp),
    Var(usize),
    /// An open constant placeholder, displayed as `C`.
    ConstSym,
    /// A frozen literal value.
    Lit(f64),
}

impl std::fmt::Display for Sym {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Sym::Nt => write!(f, "A"),
            Sym::Lp => write!(f, "("),
            Sym::Rp => write!(f, ")"),
            Sym::Op(c) => write!(f, "{c}"),
            Sym::Fn(op) => write!(f, "{}", op.name()),
            Sym::Var(i) => write!(f, "x{i}"),
            Sym::ConstSym => write!(f, "C"),
            Sym::Lit(v) => write!(f, "{}", crate::expr::format_lit(*v)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Hole,
    Var(usize),
    Const,
    Lit(f64),
    Un(UnOp, Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
}

impl Node {
    fn hole_count(&self) -> usize {
        match self {
            Node::Hole => 1,
            Node::Var(_) | Node::Const | Node::Lit(_) => 0,
            Node::Un(_, c) => c.hole_count(),
            Node::Bin(_, l, r) => l.hole_count() + r.hole_count(),
        }
    }

    /// Replaces the leftmost hole by the template; returns false when the
    /// tree has no hole.
    fn fill_leftmost(&mut self, template: &Node) -> bool {
        match self {
            Node::Hole => {
                *self = template.clone();
                true
            }
            Node::Var(_) | Node::Const | Node::Lit(_) => false,
            Node::Un(_, c) => c.fill_leftmost(template),
            Node::Bin(_, l, r) => l.fill_leftmost(template) || r.fill_leftmost(template),
        }
    }

    fn to_expr(&self, next_slot: &mut usize) -> Result<Expr, GrammarError> {
        Ok(match self {
            Node::Hole => return Err(GrammarError::IncompleteForm),
            Node::Var(i) => Expr::Var(*i),
            Node::Const => {
                let s = *next_slot;
                *next_slot += 1;
                Expr::Const(s)
            }
            Node::Lit(v) => Expr::Lit(*v),
            Node::Un(op, c) => Expr::Unary(*op, Box::new(c.to_expr(next_slot)?)),
            Node::Bin(op, l, r) => Expr::Binary(
                *op,
                Box::new(l.to_expr(next_slot)?),
                Box::new(r.to_expr(next_slot)?),
            ),
        })
    }

    /// Precedence-aware token rendering; parentheses appear exactly where
    /// the structure requires them.
    fn render_tokens(&self, out: &mut Vec<Sym>) {
        self.render_prec(out, 0, false);
    }

    fn render_prec(&self, out: &mut Vec<Sym>, parent: u8, right_of_ordered: bool) {
        match self {
            Node::Hole => out.push(Sym::Nt),
            Node::Var(i) => out.push(Sym::Var(*i)),
            Node::Const => out.push(Sym::ConstSym),
            Node::Lit(v) => out.push(Sym::Lit(*v)),
            Node::Un(op, c) => {
                out.push(Sym::Fn(*op));
                out.push(Sym::Lp);
                c.render_prec(out, 0, false);
                out.push(Sym::Rp);
            }
            Node::Bin(op, l, r) => {
                let prec = op.precedence();
                let need = prec < parent || (prec == parent && right_of_ordered);
                if need {
                    out.push(Sym::Lp);
                }
                l.render_prec(out, prec, false);
                out.push(Sym::Op(op.symbol()));
                r.render_prec(out, prec, matches!(op, BinOp::Sub | BinOp::Div));
                if need {
                    out.push(Sym::Rp);
                }
            }
        }
    }
}

/// A sentential form: token view plus the structural tree with holes.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolString {
    tokens: Vec<Sym>,
    tree: Node,
}

impl SymbolString {
    /// The bare start symbol `A`.
    pub fn atom() -> SymbolString {
        SymbolString {
            tokens: vec![Sym::Nt],
            tree: Node::Hole,
        }
    }

    pub fn symbols(&self) -> &[Sym] {
        &self.tokens
    }

    /// Number of open non-terminals.
    pub fn hole_count(&self) -> usize {
        self.tree.hole_count()
    }

    pub fn is_complete(&self) -> bool {
        self.hole_count() == 0
    }

    /// Expands the leftmost non-terminal with `rule`. The token view splices
    /// the rule's right-hand side literally; the tree substitutes the rule
    /// template at the leftmost hole.
    pub fn expand_leftmost(&mut self, rule: &ProductionRule) -> Result<(), GrammarError> {
        let pos = self
            .tokens
            .iter()
            .position(|t| matches!(t, Sym::Nt))
            .ok_or(GrammarError::NoNonTerminal)?;
        if !self.tree.fill_leftmost(&rule.template()) {
            return Err(GrammarError::NoNonTerminal);
        }
        self.tokens.splice(pos..=pos, rule.rhs_tokens());
        Ok(())
    }

    /// Converts a complete form into an expression; open constants are
    /// numbered left to right.
    pub fn to_expression(&self) -> Result<Expr, GrammarError> {
        let mut slot = 0;
        self.tree.to_expr(&mut slot)
    }
}

impl std::fmt::Display for SymbolString {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for t in &self.tokens {
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Replays a rule sequence from `start`, expanding the leftmost
/// non-terminal each step. If the form completes early the remaining rules
/// are ignored; if rules run out first, the leftover non-terminals are
/// completed with terminal rules drawn uniformly from the seeded generator.
/// Returns the expression and the number of sequence rules consumed.
pub fn rules_to_expression(
    grammar: &Grammar,
    start: &SymbolString,
    seq: &[usize],
    completion_seed: u64,
) -> Result<(Expr, usize), GrammarError> {
    let mut form = start.clone();
    let mut used = 0;
    for &id in seq {
        if form.is_complete() {
            break;
        }
        form.expand_leftmost(grammar.rule(id)?)?;
        used += 1;
    }
    if !form.is_complete() {
        let terminals = grammar.terminal_rules();
        if terminals.is_empty() {
            return Err(GrammarError::NoTerminalRules);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(completion_seed);
        while !form.is_complete() {
            let pick = rng.gen_range(0..terminals.len());
            form.expand_leftmost(terminals[pick])?;
        }
    }
    Ok((form.to_expression()?, used))
}

/// Builds the next round's start symbol from a fitted expression: summary
/// constants re-open as non-terminals, standalone constants freeze to their
/// fitted values, everything else is copied.
pub fn make_start_symbol(
    e: &Expr,
    kinds: &[ConstKind],
    values: &[f64],
) -> Result<SymbolString, GrammarError> {
    let m = e.open_constant_count();
    if kinds.len() != m || values.len() != m {
        return Err(GrammarError::KindCountMismatch {
            expected: m,
            got: kinds.len().min(values.len()),
        });
    }
    fn go(e: &Expr, kinds: &[ConstKind], values: &[f64]) -> Node {
        match e {
            Expr::Var(i) => Node::Var(*i),
            Expr::Lit(v) => Node::Lit(*v),
            Expr::Const(j) => match kinds[*j] {
                ConstKind::Summary => Node::Hole,
                ConstKind::Standalone => Node::Lit(values[*j]),
            },
            Expr::Unary(op, c) => Node::Un(*op, Box::new(go(c, kinds, values))),
            Expr::Binary(op, l, r) => Node::Bin(
                *op,
                Box::new(go(l, kinds, values)),
                Box::new(go(r, kinds, values)),
            ),
        }
    }
    let tree = go(e, kinds, values);
    let mut tokens = Vec::new();
    tree.render_tokens(&mut tokens);
    Ok(SymbolString { tokens, tree })
}

/// Checks that `e` extends `start`: identical outside the holes, with each
/// hole matched by an arbitrary subtree. On success returns the collapsed
/// expression in which every hole-grown subtree is a fresh open constant
/// (frozen literals are compared bit for bit).
pub fn reduce_to_start(e: &Expr, start: &SymbolString) -> Option<Expr> {
    fn go(e: &Expr, n: &Node, slot: &mut usize) -> Option<Expr> {
        match (e, n) {
            (_, Node::Hole) => {
                let s = *slot;
                *slot += 1;
                Some(Expr::Const(s))
            }
            (Expr::Var(a), Node::Var(b)) if a == b => Some(Expr::Var(*a)),
            (Expr::Lit(a), Node::Lit(b)) if a.to_bits() == b.to_bits() => Some(Expr::Lit(*a)),
            (Expr::Unary(oa, ca), Node::Un(ob, cb)) if oa == ob => {
                Some(Expr::Unary(*oa, Box::new(go(ca, cb, slot)?)))
            }
            (Expr::Binary(oa, la, ra), Node::Bin(ob, lb, rb)) if oa == ob => Some(Expr::Binary(
                *oa,
                Box::new(go(la, lb, slot)?),
                Box::new(go(ra, rb, slot)?),
            )),
            _ => None,
        }
    }
    let mut slot = 0;
    go(e, &start.tree, &mut slot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expression;

    fn g_plus_minus_times(var: usize) -> Grammar {
        build_grammar(
            &[Operator::Add, Operator::Sub, Operator::Mul],
            &[var],
            true,
        )
    }

    #[test]
    fn grammar_rule_ordering_and_display() {
        let g = g_plus_minus_times(1);
        let shown: Vec<String> = g.rules().iter().map(|r| r.to_string()).collect();
        assert_eq!(
            shown,
            vec!["A->(A+A)", "A->(A-A)", "A->A*A", "A->x1", "A->const"]
        );
        let g8 = build_grammar(
            &[
                Operator::Sin,
                Operator::Cos,
                Operator::Add,
                Operator::Sub,
                Operator::Mul,
            ],
            &[0, 1],
            true,
        );
        assert_eq!(g8.len(), 8);
    }

    #[test]
    fn grammar_json_round_trip() {
        let g = g_plus_minus_times(1);
        let back = Grammar::from_json(&g.to_json()).unwrap();
        assert_eq!(back.len(), g.len());
        for (a, b) in back.rules().iter().zip(g.rules()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn expand_leftmost_splices_tokens() {
        let g = g_plus_minus_times(1);
        let mut s = SymbolString::atom();
        s.expand_leftmost(g.rule(1).unwrap()).unwrap();
        assert_eq!(s.to_string(), "(A-A)");
        assert_eq!(s.hole_count(), 2);
        let mut t = make_start_symbol(
            &parse_expression("((x1*C1)-C2)").unwrap(),
            &[ConstKind::Summary, ConstKind::Summary],
            &[0.0, 0.0],
        )
        .unwrap();
        assert_eq!(t.to_string(), "x1*A-A");
        t.expand_leftmost(g.rule(4).unwrap()).unwrap();
        assert_eq!(t.to_string(), "x1*C-A");
    }

    #[test]
    fn worked_conversion_from_bare_start() {
        let g = g_plus_minus_times(1);
        let (e, used) = rules_to_expression(&g, &SymbolString::atom(), &[1, 2, 3, 4, 4], 0).unwrap();
        assert_eq!(e.to_canonical_string(None), "((x1*C1)-C2)");
        assert_eq!(used, 5);
    }

    #[test]
    fn worked_conversion_from_reduced_start() {
        let g = g_plus_minus_times(2);
        let start = make_start_symbol(
            &parse_expression("((x1*C1)-C2)").unwrap(),
            &[ConstKind::Summary, ConstKind::Summary],
            &[0.0, 0.0],
        )
        .unwrap();
        let (e, used) = rules_to_expression(&g, &start, &[4, 2, 3, 4], 0).unwrap();
        assert_eq!(e.to_canonical_string(None), "((x1*C1)-(x2*C2))");
        assert_eq!(used, 4);
    }

    #[test]
    fn early_completion_ignores_leftover_rules() {
        let g = g_plus_minus_times(1);
        // x1 alone completes after one rule; the rest must be ignored.
        let (e, used) = rules_to_expression(&g, &SymbolString::atom(), &[3, 0, 0, 0], 7).unwrap();
        assert_eq!(e, Expr::Var(1));
        assert_eq!(used, 1);
    }

    #[test]
    fn exhausted_sequence_completes_with_seeded_terminals() {
        let g = g_plus_minus_times(1);
        let (a, used_a) = rules_to_expression(&g, &SymbolString::atom(), &[0], 42).unwrap();
        let (b, _) = rules_to_expression(&g, &SymbolString::atom(), &[0], 42).unwrap();
        let (c, _) = rules_to_expression(&g, &SymbolString::atom(), &[0], 43).unwrap();
        assert_eq!(used_a, 1);
        assert_eq!(a, b);
        assert!(a.open_constant_count() <= 2);
        // A different seed may complete differently; either way both leaves
        // are terminals of this grammar.
        for leaf in [&a, &c] {
            assert!(leaf.node_count() == 3);
        }
    }

    #[test]
    fn standalone_constants_freeze_as_literals() {
        let start = make_start_symbol(
            &parse_expression("((x1*C1)-C2)").unwrap(),
            &[ConstKind::Standalone, ConstKind::Standalone],
            &[3.0, 1.5],
        )
        .unwrap();
        assert_eq!(start.to_string(), "x1*3.0-1.5");
        assert_eq!(start.hole_count(), 0);
        assert_eq!(
            start.to_expression().unwrap().to_canonical_string(None),
            "((x1*3.0)-1.5)"
        );
    }

    #[test]
    fn reduce_to_start_collapses_grown_subtrees() {
        let g = build_grammar(
            &[Operator::Add, Operator::Sub, Operator::Mul, Operator::Cos],
            &[2],
            true,
        );
        let start = make_start_symbol(
            &parse_expression("((x1*C1)-C2)").unwrap(),
            &[ConstKind::Summary, ConstKind::Standalone],
            &[0.0, 1.5],
        )
        .unwrap();
        let (grown, _) = rules_to_expression(&g, &start, &[2, 4, 5], 0).unwrap();
        assert_eq!(grown.to_canonical_string(None), "((x1*(x2*C1))-1.5)");
        let collapsed = reduce_to_start(&grown, &start).unwrap();
        assert_eq!(collapsed.to_canonical_string(None), "((x1*C1)-1.5)");
        // A tree that tampers with frozen structure does not reduce.
        let bad = parse_expression("((x1*C1)+1.5)").unwrap();
        assert!(reduce_to_start(&bad, &start).is_none());
    }

    #[test]
    fn division_context_preserves_structure_through_expansion() {
        // Expanding the right side of a division with a product must nest
        // under the division, not re-associate.
        let g = build_grammar(&[Operator::Mul, Operator::Div], &[0], true);
        let start = make_start_symbol(
            &parse_expression("(x0/C1)").unwrap(),
            &[ConstKind::Summary],
            &[0.0],
        )
        .unwrap();
        let (e, _) = rules_to_expression(&g, &start, &[0, 2, 3], 0).unwrap();
        assert_eq!(e.to_canonical_string(None), "(x0/(x0*C1))");
    }
}
