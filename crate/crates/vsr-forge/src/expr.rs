//! Expression trees: construction, evaluation, parsing and comparison.
//!
//! An [`Expr`] is a tree over variables `x0, x1, ...`, open constant slots
//! `C1, C2, ...` and literal numbers. Open constants are the holes a fitter
//! assigns values to; literals are frozen numbers that came out of an
//! earlier round or a ground-truth definition. Evaluation is batched: every
//! node maps a row of inputs to one output value, and non-finite values
//! (division by zero, overflow) propagate through without panicking.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2};
use thiserror::Error;

/// Binary operators. Division is total: `x/0` follows IEEE semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }

    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    /// Precedence used for display: `*`,`/` bind tighter than `+`,`-`.
    pub(crate) fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
        }
    }
}

/// Unary operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnOp {
    Sin,
    Cos,
}

impl UnOp {
    pub fn name(self) -> &'static str {
        match self {
            UnOp::Sin => "sin",
            UnOp::Cos => "cos",
        }
    }

    #[inline]
    pub fn apply(self, a: f64) -> f64 {
        match self {
            UnOp::Sin => a.sin(),
            UnOp::Cos => a.cos(),
        }
    }
}

/// An expression tree.
///
/// Open constant slots are identified by contiguous ids `0..m-1`, numbered
/// left to right in the rendered infix form. `Const(0)` prints as `C1`.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Var(usize),
    Const(usize),
    Lit(f64),
    Unary(UnOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Error)]
pub enum ExprError {
    #[error("expression has {expected} open constants but {got} values were supplied")]
    ConstCountMismatch { expected: usize, got: usize },
    #[error("input has {got} columns but the expression references x{var}")]
    MissingVariable { var: usize, got: usize },
}

/// Handy constructors so ground truths can be built without parsing.
impl Expr {
    pub fn var(i: usize) -> Expr {
        Expr::Var(i)
    }

    pub fn lit(v: f64) -> Expr {
        Expr::Lit(v)
    }

    pub fn constant(slot: usize) -> Expr {
        Expr::Const(slot)
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        Expr::Binary(BinOp::Add, Box::new(a), Box::new(b))
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        Expr::Binary(BinOp::Sub, Box::new(a), Box::new(b))
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        Expr::Binary(BinOp::Mul, Box::new(a), Box::new(b))
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        Expr::Binary(BinOp::Div, Box::new(a), Box::new(b))
    }

    pub fn sin(a: Expr) -> Expr {
        Expr::Unary(UnOp::Sin, Box::new(a))
    }

    pub fn cos(a: Expr) -> Expr {
        Expr::Unary(UnOp::Cos, Box::new(a))
    }

    /// Number of open constant slots. Slot ids are kept contiguous by every
    /// constructor in this crate, so this is `max id + 1`.
    pub fn open_constant_count(&self) -> usize {
        let mut max: Option<usize> = None;
        self.visit(&mut |e| {
            if let Expr::Const(j) = e {
                max = Some(max.map_or(*j, |m: usize| m.max(*j)));
            }
        });
        max.map_or(0, |m| m + 1)
    }

    pub fn node_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Var(_) | Expr::Const(_) | Expr::Lit(_) => 1,
            Expr::Unary(_, c) => 1 + c.depth(),
            Expr::Binary(_, l, r) => 1 + l.depth().max(r.depth()),
        }
    }

    /// Sorted, deduplicated list of variable indices appearing in the tree.
    pub fn vars_used(&self) -> Vec<usize> {
        let mut vs = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Var(i) = e {
                vs.push(*i);
            }
        });
        vs.sort_unstable();
        vs.dedup();
        vs
    }

    pub fn contains_var(&self) -> bool {
        let mut found = false;
        self.visit(&mut |e| {
            if matches!(e, Expr::Var(_)) {
                found = true;
            }
        });
        found
    }

    fn visit(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Unary(_, c) => c.visit(f),
            Expr::Binary(_, l, r) => {
                l.visit(f);
                r.visit(f);
            }
            _ => {}
        }
    }

    /// Replaces every open constant by its value as a literal.
    pub fn substitute_constants(&self, consts: &[f64]) -> Result<Expr, ExprError> {
        let m = self.open_constant_count();
        if consts.len() != m {
            return Err(ExprError::ConstCountMismatch {
                expected: m,
                got: consts.len(),
            });
        }
        fn go(e: &Expr, c: &[f64]) -> Expr {
            match e {
                Expr::Const(j) => Expr::Lit(c[*j]),
                Expr::Unary(op, a) => Expr::Unary(*op, Box::new(go(a, c))),
                Expr::Binary(op, l, r) => {
                    Expr::Binary(*op, Box::new(go(l, c)), Box::new(go(r, c)))
                }
                other => other.clone(),
            }
        }
        Ok(go(self, consts))
    }

    /// Batched evaluation over the rows of `x` (one row per sample, one
    /// column per variable). Convenience wrapper around [`Program`]; hot
    /// paths should compile once and reuse the program.
    pub fn evaluate(&self, consts: &[f64], x: ArrayView2<f64>) -> Result<Array1<f64>, ExprError> {
        let prog = Program::compile(self);
        let mut out = Array1::zeros(x.nrows());
        let mut scratch = EvalScratch::default();
        prog.eval_into(consts, x, &mut scratch, &mut out)?;
        Ok(out)
    }

    /// Infix form with full parentheses around binary operations, e.g.
    /// `((x1*C1)-C2)`. With `consts` supplied, open constants render at six
    /// significant digits; literals always render at full precision so the
    /// string parses back to the identical tree.
    pub fn to_canonical_string(&self, consts: Option<&[f64]>) -> String {
        let mut s = String::new();
        self.render(&mut s, consts);
        s
    }

    fn render(&self, out: &mut String, consts: Option<&[f64]>) {
        match self {
            Expr::Var(i) => {
                out.push('x');
                out.push_str(&i.to_string());
            }
            Expr::Const(j) => match consts {
                Some(c) => out.push_str(&format_sig6(c[*j])),
                None => {
                    out.push('C');
                    out.push_str(&(j + 1).to_string());
                }
            },
            Expr::Lit(v) => out.push_str(&format_lit(*v)),
            Expr::Unary(op, c) => {
                out.push_str(op.name());
                out.push('(');
                c.render(out, consts);
                out.push(')');
            }
            Expr::Binary(op, l, r) => {
                out.push('(');
                l.render(out, consts);
                out.push(op.symbol());
                r.render(out, consts);
                out.push(')');
            }
        }
    }
}

impl std::fmt::Display for Expr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_canonical_string(None))
    }
}

/// Shortest representation that round-trips through the parser.
pub(crate) fn format_lit(v: f64) -> String {
    format!("{v:?}")
}

/// Six significant digits, plain decimal notation.
pub(crate) fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0.00000".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    let prec = (5 - exp).max(0) as usize;
    format!("{v:.prec$}")
}

// ---------------------------------------------------------------------------
// Compiled evaluation

#[derive(Debug, Clone)]
enum Instr {
    Var(usize),
    Const(usize),
    Lit(f64),
    Un(UnOp),
    Bin(BinOp),
}

/// Postfix program for repeated batched evaluation of one expression.
#[derive(Debug, Clone)]
pub struct Program {
    code: Vec<Instr>,
    max_stack: usize,
    n_consts: usize,
    max_var: Option<usize>,
}

/// Reusable buffers for [`Program::eval_into`]; keep one per worker.
#[derive(Default)]
pub struct EvalScratch {
    stack: Vec<Vec<f64>>,
}

impl Program {
    pub fn compile(e: &Expr) -> Program {
        fn emit(e: &Expr, code: &mut Vec<Instr>, depth: usize, max: &mut usize) {
            match e {
                Expr::Var(i) => code.push(Instr::Var(*i)),
                Expr::Const(j) => code.push(Instr::Const(*j)),
                Expr::Lit(v) => code.push(Instr::Lit(*v)),
                Expr::Unary(op, c) => {
                    emit(c, code, depth, max);
                    code.push(Instr::Un(*op));
                    return;
                }
                Expr::Binary(op, l, r) => {
                    emit(l, code, depth, max);
                    emit(r, code, depth + 1, max);
                    code.push(Instr::Bin(*op));
                    return;
                }
            }
            *max = (*max).max(depth + 1);
        }
        let mut code = Vec::with_capacity(e.node_count());
        let mut max_stack = 0;
        emit(e, &mut code, 0, &mut max_stack);
        Program {
            code,
            max_stack,
            n_consts: e.open_constant_count(),
            max_var: e.vars_used().last().copied(),
        }
    }

    pub fn n_consts(&self) -> usize {
        self.n_consts
    }

    /// Evaluates over the rows of `x` into `out` (resized to `x.nrows()`).
    pub fn eval_into(
        &self,
        consts: &[f64],
        x: ArrayView2<f64>,
        scratch: &mut EvalScratch,
        out: &mut Array1<f64>,
    ) -> Result<(), ExprError> {
        if consts.len() != self.n_consts {
            return Err(ExprError::ConstCountMismatch {
                expected: self.n_consts,
                got: consts.len(),
            });
        }
        if let Some(mv) = self.max_var {
            if mv >= x.ncols() {
                return Err(ExprError::MissingVariable {
                    var: mv,
                    got: x.ncols(),
                });
            }
        }
        let n = x.nrows();
        while scratch.stack.len() < self.max_stack {
            scratch.stack.push(Vec::new());
        }
        for buf in scratch.stack.iter_mut().take(self.max_stack) {
            buf.resize(n, 0.0);
        }
        let mut top = 0usize; // number of live stack slots
        for instr in &self.code {
            match instr {
                Instr::Var(j) => {
                    let buf = &mut scratch.stack[top];
                    for (dst, src) in buf.iter_mut().zip(x.column(*j)) {
                        *dst = *src;
                    }
                    top += 1;
                }
                Instr::Const(j) => {
                    scratch.stack[top].fill(consts[*j]);
                    top += 1;
                }
                Instr::Lit(v) => {
                    scratch.stack[top].fill(*v);
                    top += 1;
                }
                Instr::Un(op) => {
                    for v in scratch.stack[top - 1].iter_mut() {
                        *v = op.apply(*v);
                    }
                }
                Instr::Bin(op) => {
                    let (a, b) = scratch.stack.split_at_mut(top - 1);
                    let a = &mut a[top - 2];
                    let b = &b[0];
                    for (va, vb) in a.iter_mut().zip(b.iter()) {
                        *va = op.apply(*va, *vb);
                    }
                    top -= 1;
                }
            }
        }
        debug_assert_eq!(top, 1);
        if out.len() != n {
            *out = Array1::zeros(n);
        }
        for (dst, src) in out.iter_mut().zip(scratch.stack[0].iter()) {
            *dst = *src;
        }
        Ok(())
    }

    /// Single-row evaluation, for integrators and scalar checks.
    pub fn eval_row(&self, consts: &[f64], row: &[f64]) -> Result<f64, ExprError> {
        let x = Array2::from_shape_vec((1, row.len()), row.to_vec()).expect("row shape");
        let mut out = Array1::zeros(1);
        let mut scratch = EvalScratch::default();
        self.eval_into(consts, x.view(), &mut scratch, &mut out)?;
        Ok(out[0])
    }
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Debug, Error, PartialEq)]
#[error("parse error at byte {pos}: {msg}")]
pub struct ParseError {
    pub pos: usize,
    pub msg: String,
}

/// Parses the canonical infix syntax: variables `x<int>`, open constants
/// `C<int>`, decimal literals, `+ - * /`, `sin`, `cos`, parentheses and
/// `^<int>` powers (expanded into balanced products, constant-free base
/// only). Unary minus is accepted in front of numeric literals. Open
/// constant names map to slots in order of first appearance, so canonical
/// strings round-trip exactly.
pub fn parse_expression(src: &str) -> Result<Expr, ParseError> {
    let mut p = Parser {
        s: src.as_bytes(),
        pos: 0,
        const_names: Vec::new(),
    };
    let e = p.parse_sum()?;
    p.skip_ws();
    if p.pos != p.s.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
    const_names: Vec<String>,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: &str) -> ParseError {
        ParseError {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn parse_sum(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.parse_term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    e = Expr::add(e, self.parse_term()?);
                }
                Some(b'-') => {
                    self.pos += 1;
                    e = Expr::sub(e, self.parse_term()?);
                }
                _ => return Ok(e),
            }
        }
    }

    fn parse_term(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.parse_power()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    e = Expr::mul(e, self.parse_power()?);
                }
                Some(b'/') => {
                    self.pos += 1;
                    e = Expr::div(e, self.parse_power()?);
                }
                _ => return Ok(e),
            }
        }
    }

    fn parse_power(&mut self) -> Result<Expr, ParseError> {
        let base = self.parse_atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let n = self.parse_uint()?;
            if n == 0 || n > 8 {
                return Err(self.err("power exponent must be in 1..=8"));
            }
            if base.open_constant_count() > 0 {
                return Err(self.err("power base must not contain open constants"));
            }
            return Ok(balanced_power(&base, n));
        }
        Ok(base)
    }

    fn parse_atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.parse_sum()?;
                if !self.eat(b')') {
                    return Err(self.err("expected ')'"));
                }
                Ok(e)
            }
            Some(b'-') => {
                self.pos += 1;
                self.skip_ws();
                match self.s.get(self.pos) {
                    Some(c) if c.is_ascii_digit() || *c == b'.' => {
                        let v = self.parse_number()?;
                        Ok(Expr::Lit(-v))
                    }
                    _ => Err(self.err("unary minus is only allowed before a numeric literal")),
                }
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => Ok(Expr::Lit(self.parse_number()?)),
            Some(c) if c.is_ascii_alphabetic() => self.parse_ident(),
            _ => Err(self.err("expected an expression atom")),
        }
    }

    fn parse_ident(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_alphabetic() {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.s[start..self.pos]).unwrap();
        match name {
            "x" => Ok(Expr::Var(self.parse_uint()?)),
            "C" => {
                let _ = self.parse_uint()?;
                let full = std::str::from_utf8(&self.s[start..self.pos]).unwrap().to_string();
                let slot = match self.const_names.iter().position(|n| *n == full) {
                    Some(i) => i,
                    None => {
                        self.const_names.push(full);
                        self.const_names.len() - 1
                    }
                };
                Ok(Expr::Const(slot))
            }
            "sin" | "cos" => {
                if !self.eat(b'(') {
                    return Err(self.err("expected '(' after function name"));
                }
                let arg = self.parse_sum()?;
                if !self.eat(b')') {
                    return Err(self.err("expected ')'"));
                }
                Ok(match name {
                    "sin" => Expr::sin(arg),
                    _ => Expr::cos(arg),
                })
            }
            _ => Err(self.err("unknown identifier")),
        }
    }

    fn parse_uint(&mut self) -> Result<usize, ParseError> {
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected an integer"));
        }
        std::str::from_utf8(&self.s[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| self.err("integer out of range"))
    }

    fn parse_number(&mut self) -> Result<f64, ParseError> {
        let start = self.pos;
        while self.pos < self.s.len() && (self.s[self.pos].is_ascii_digit() || self.s[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < self.s.len() && (self.s[self.pos] == b'e' || self.s[self.pos] == b'E') {
            self.pos += 1;
            if self.pos < self.s.len() && (self.s[self.pos] == b'+' || self.s[self.pos] == b'-') {
                self.pos += 1;
            }
            while self.pos < self.s.len() && self.s[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        std::str::from_utf8(&self.s[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| self.err("malformed number"))
    }
}

fn balanced_power(base: &Expr, n: usize) -> Expr {
    if n == 1 {
        return base.clone();
    }
    let half = balanced_power(base, n / 2);
    if n % 2 == 0 {
        Expr::mul(half.clone(), half)
    } else {
        Expr::mul(half, base.clone())
    }
}

/// Numerically tests whether the expression is affine in its open constants
/// (no `Ci*Cj` interactions, no constants inside nonlinear operators) by
/// second differences over `probe` rows. Affine skeletons are the ones whose
/// summary constants can later be expanded independently of each other, so
/// the search prefers them among otherwise equal exact fits. Evaluation
/// failure counts as non-affine.
pub fn affine_in_constants(e: &Expr, probe: ArrayView2<f64>) -> bool {
    let m = e.open_constant_count();
    if m == 0 {
        return true;
    }
    let base = vec![0.5; m];
    let h = 0.75;
    let eval = |c: &[f64]| e.evaluate(c, probe).ok();
    let Some(f0) = eval(&base) else { return false };
    for i in 0..m {
        let mut ci = base.clone();
        ci[i] += h;
        let Some(fi) = eval(&ci) else { return false };
        for j in i..m {
            let mut cj = base.clone();
            cj[j] += h;
            let mut cij = ci.clone();
            cij[j] += h;
            let Some(fj) = eval(&cj) else { return false };
            let Some(fij) = eval(&cij) else { return false };
            for r in 0..probe.nrows() {
                let second = fij[r] - fi[r] - fj[r] + f0[r];
                let scale = f0[r]
                    .abs()
                    .max(fi[r].abs())
                    .max(fj[r].abs())
                    .max(fij[r].abs())
                    .max(1.0);
                if !(second.abs() <= 1e-9 * scale) {
                    return false;
                }
            }
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Structural comparison modulo constants

/// True when two trees denote the same structure up to the values of their
/// constants. See [`normal_key`] for the normalization rules; on top of
/// them, a coefficiented summand on one side matches a single summand of
/// either sign on the other, since the constant can take that sign
/// (`x0*x2 + (x1*x3)*C1` matches `x0*x2 - x1*x3`). Inside nonlinear
/// positions (`sin`, `cos`, structural division) comparison is by exact
/// normalized form.
pub fn structural_equal_mod_constants(a: &Expr, b: &Expr) -> bool {
    let ga = group_sum(&nf_sum(a));
    let gb = group_sum(&nf_sum(b));
    if ga.len() != gb.len() {
        return false;
    }
    ga.iter().zip(gb.iter()).all(|((ka, ca), (kb, cb))| {
        ka == kb
            && match (ca.coeffed, cb.coeffed) {
                (true, true) => true,
                (true, false) => cb.plus + cb.minus == 1,
                (false, true) => ca.plus + ca.minus == 1,
                (false, false) => ca == cb,
            }
    })
}

/// A canonical skeleton key. Matching keys mean two expressions denote the
/// same structure modulo constants; [`structural_equal_mod_constants`] is
/// slightly more tolerant than key equality (see there).
///
/// Normalization rules:
/// * `+`/`-` chains flatten into signed summand multisets, `*` chains into
///   factor multisets; both are sorted, which makes `+` and `*` commutative
///   and associative for the comparison.
/// * Products distribute over sums and sum numerators split over their
///   denominator, so the factored and expanded writings of one family
///   compare equal (`(C1+x0)*C2` matches `C1*x0+C2`).
/// * Any constant or literal leaf is a wildcard. A product absorbs constant
///   factors into an anonymous coefficient (`C1*x0*x2` matches `x0*x2`), and
///   division by a constant-only subtree folds into the coefficient too.
/// * All like summands merge when any of them carries a coefficient
///   (`C1*x0+C2*x0` matches `C3*x0`, `x0+C1*x0` too), since the constants
///   absorb the sum; the merged summand renders as `~key` and its sign is
///   absorbed as well. Without a coefficient the signed multiset is kept,
///   so `x0+x0` stays distinct from `C1*x0` and `x0*x2-x1*x3` from
///   `x0*x2+x1*x3`.
/// * Variable-free subtrees collapse to a single constant; an exact literal
///   zero summand vanishes.
/// * `sin`, `cos` and structural division recurse with the same rules.
pub fn normal_key(e: &Expr) -> String {
    render_sum(&nf_sum(e))
}

#[derive(Clone)]
struct NfProd {
    neg: bool,
    coeff: bool,
    factors: Vec<String>,
}

impl NfProd {
    fn atom(key: String) -> NfProd {
        NfProd {
            neg: false,
            coeff: false,
            factors: vec![key],
        }
    }

    fn pure_const(neg: bool) -> NfProd {
        NfProd {
            neg,
            coeff: true,
            factors: Vec::new(),
        }
    }

    fn key(&self) -> String {
        if self.factors.is_empty() {
            "#".to_string()
        } else {
            self.factors.join("*")
        }
    }
}

/// Signed occurrence counts of one summand key. When any occurrence carries
/// a free coefficient the whole group collapses into a single coefficiented
/// summand (`coeffed`), absorbing signs and copies: `x0 + C1*x0` is the
/// family `C*x0`.
#[derive(PartialEq, Eq, Debug)]
struct SignCounts {
    plus: usize,
    minus: usize,
    coeffed: bool,
}

fn group_sum(terms: &[NfProd]) -> BTreeMap<String, SignCounts> {
    let mut groups: BTreeMap<String, SignCounts> = BTreeMap::new();
    for t in terms {
        let g = groups.entry(t.key()).or_insert(SignCounts {
            plus: 0,
            minus: 0,
            coeffed: false,
        });
        if t.coeff {
            g.coeffed = true;
        } else if t.neg {
            g.minus += 1;
        } else {
            g.plus += 1;
        }
    }
    for g in groups.values_mut() {
        if g.coeffed {
            g.plus = 0;
            g.minus = 0;
        }
    }
    groups
}

fn render_sum(terms: &[NfProd]) -> String {
    let mut parts = Vec::new();
    for (key, g) in group_sum(terms) {
        if g.coeffed {
            parts.push(format!("~{key}"));
        } else {
            for _ in 0..g.plus {
                parts.push(format!("+{key}"));
            }
            for _ in 0..g.minus {
                parts.push(format!("-{key}"));
            }
        }
    }
    format!("S({})", parts.join(","))
}

/// Scalar value of a variable-free subtree: `None` when open constants make
/// the value unknown.
fn scalar_value(e: &Expr) -> Option<f64> {
    match e {
        Expr::Lit(v) => Some(*v),
        Expr::Const(_) => None,
        Expr::Var(_) => unreachable!("scalar_value called on a subtree with variables"),
        Expr::Unary(op, c) => scalar_value(c).map(|v| op.apply(v)),
        Expr::Binary(op, l, r) => match (scalar_value(l), scalar_value(r)) {
            (Some(a), Some(b)) => Some(op.apply(a, b)),
            _ => None,
        },
    }
}

fn nf_sum(e: &Expr) -> Vec<NfProd> {
    if !e.contains_var() {
        // Whole subtree is a constant; the sign survives only when the value
        // is a known literal, and an exact zero contributes nothing.
        return match scalar_value(e) {
            Some(v) if v == 0.0 => Vec::new(),
            v => vec![NfProd::pure_const(v.map_or(false, |x| x < 0.0))],
        };
    }
    match e {
        Expr::Var(i) => vec![NfProd::atom(format!("x{i}"))],
        Expr::Unary(op, c) => vec![NfProd::atom(format!("{}({})", op.name(), render_sum(&nf_sum(c))))],
        Expr::Binary(BinOp::Add, l, r) => {
            let mut s = nf_sum(l);
            s.extend(nf_sum(r));
            s
        }
        Expr::Binary(BinOp::Sub, l, r) => {
            let mut s = nf_sum(l);
            s.extend(nf_sum(r).into_iter().map(|mut t| {
                t.neg = !t.neg;
                t
            }));
            s
        }
        Expr::Binary(BinOp::Mul, l, r) => {
            // Distribute so factored and expanded forms share one key.
            let a = nf_sum(l);
            let b = nf_sum(r);
            let mut out = Vec::with_capacity(a.len() * b.len());
            for p in &a {
                for q in &b {
                    let mut factors = p.factors.clone();
                    factors.extend(q.factors.iter().cloned());
                    factors.sort();
                    out.push(NfProd {
                        neg: p.neg ^ q.neg,
                        coeff: p.coeff || q.coeff,
                        factors,
                    });
                }
            }
            out
        }
        Expr::Binary(BinOp::Div, l, r) => nf_div(l, r),
        Expr::Const(_) | Expr::Lit(_) => unreachable!("constant leaves handled above"),
    }
}

/// A sum used as one factor: either its single summand, or the whole sum
/// grouped into an opaque atom.
fn to_prod(mut sum: Vec<NfProd>) -> NfProd {
    if sum.len() == 1 {
        sum.pop().unwrap()
    } else {
        NfProd::atom(format!("({})", render_sum(&sum)))
    }
}

fn nf_div(l: &Expr, r: &Expr) -> Vec<NfProd> {
    let den = to_prod(nf_sum(r));
    if den.factors.is_empty() {
        // Division by a constant is just a coefficient on each summand.
        return nf_sum(l)
            .into_iter()
            .map(|mut t| {
                t.neg ^= den.neg;
                t.coeff = true;
                t
            })
            .collect();
    }
    // The numerator splits over the denominator; signs and coefficients
    // hoist out of both sides so that e.g. `x/(2*y)` and `C*x/y` compare
    // equal.
    nf_sum(l)
        .into_iter()
        .map(|num| NfProd {
            neg: num.neg ^ den.neg,
            coeff: num.coeff || den.coeff,
            factors: vec![format!("div({};{})", num.key(), den.key())],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn p(s: &str) -> Expr {
        parse_expression(s).unwrap()
    }

    #[test]
    fn evaluate_worked_example() {
        // x1*C1 - C2 at c = (2.0, 0.5) over three rows.
        let e = p("((x1*C1)-C2)");
        let x = array![[0.0, 1.0], [0.0, 2.0], [0.0, -1.0]];
        let y = e.evaluate(&[2.0, 0.5], x.view()).unwrap();
        assert_eq!(y.to_vec(), vec![1.5, 3.5, -2.5]);
    }

    #[test]
    fn evaluate_never_panics_on_division_by_zero() {
        let e = p("(x0/x1)");
        let x = array![[1.0, 0.0], [0.0, 0.0], [-3.0, 0.0]];
        let y = e.evaluate(&[], x.view()).unwrap();
        assert!(y[0].is_infinite() && y[0] > 0.0);
        assert!(y[1].is_nan());
        assert!(y[2].is_infinite() && y[2] < 0.0);
    }

    #[test]
    fn canonical_string_with_and_without_values() {
        let e = p("((x1*C1)-C2)");
        assert_eq!(e.to_canonical_string(None), "((x1*C1)-C2)");
        assert_eq!(
            e.to_canonical_string(Some(&[3.0, 1.5])),
            "((x1*3.00000)-1.50000)"
        );
    }

    #[test]
    fn sig6_formats_by_magnitude() {
        assert_eq!(format_sig6(3.0), "3.00000");
        assert_eq!(format_sig6(123.456), "123.456");
        assert_eq!(format_sig6(-0.05), "-0.0500000");
        assert_eq!(format_sig6(0.0), "0.00000");
    }

    #[test]
    fn parse_round_trips_canonical_strings() {
        for s in [
            "((x1*C1)-C2)",
            "(((0.1052*(x0*x1))+(0.0321*x0))-0.9554)",
            "sin((x0+cos(x1)))",
            "((x0/x1)*C1)",
        ] {
            let e = p(s);
            assert_eq!(e.to_canonical_string(None), s);
        }
    }

    #[test]
    fn parse_rejects_malformed_input() {
        assert!(parse_expression("x").is_err());
        assert!(parse_expression("(x0+").is_err());
        assert!(parse_expression("x0 x1").is_err());
        assert!(parse_expression("tan(x0)").is_err());
        assert!(parse_expression("-x0").is_err());
    }

    #[test]
    fn parse_desugars_powers_into_products() {
        let e = p("(x0/0.52)^4");
        let direct = {
            let t = Expr::div(Expr::var(0), Expr::lit(0.52));
            Expr::mul(Expr::mul(t.clone(), t.clone()), Expr::mul(t.clone(), t))
        };
        assert_eq!(e, direct);
    }

    #[test]
    fn open_constant_slots_follow_first_appearance() {
        let e = p("((C1*x0)+C2)");
        assert_eq!(e.open_constant_count(), 2);
        let r = p("((C2*x0)+C1)");
        // Names map in appearance order, so the trees coincide.
        assert_eq!(e, r);
    }

    #[test]
    fn structural_equality_pinned_cases() {
        // Commutative reordering with renamed constants: equal.
        assert!(structural_equal_mod_constants(
            &p("((x1*C1)-C2)"),
            &p("((C1*x1)-C2)")
        ));
        // Adding or subtracting an open constant is the same family; the
        // constant's sign is not observable.
        assert!(structural_equal_mod_constants(
            &p("((x1*C1)-C2)"),
            &p("((x1*C1)+C2)")
        ));
        // A coefficient carries the sign for its whole summand, so a fitted
        // C near -1 matches a plain subtraction.
        assert!(structural_equal_mod_constants(
            &p("((x0*(x2*C1))+((x1*x3)*C2))"),
            &p("((x0*x2)-(x1*x3))")
        ));
        // Ground truth against its re-parsed canonical string: equal.
        let gt = p("(((0.1052*(x0*x1))+(0.0321*x0))-0.9554)");
        let rt = p(&gt.to_canonical_string(None));
        assert!(structural_equal_mod_constants(&gt, &rt));
    }

    #[test]
    fn structural_equality_absorbs_coefficients_and_literal_signs() {
        // A fitted skeleton with unit coefficients matches the bare product.
        let fitted = p("((x0*(x2*1.0000002))-(x1*(x3*0.9999998)))");
        let truth = p("((x0*x2)-(x1*x3))");
        assert!(structural_equal_mod_constants(&fitted, &truth));
        // Subtracting a positive literal matches adding a negative one.
        assert!(structural_equal_mod_constants(
            &p("((x0*2.0)-0.27)"),
            &p("((x0*2.0)+(0.0-0.27))")
        ));
        // A sign flip on a coefficient-free term stays significant.
        assert!(!structural_equal_mod_constants(
            &p("((x0*x2)-(x1*x3))"),
            &p("((x1*x3)-(x0*x2))")
        ));
        // Multiplication groupings agree after flattening.
        assert!(structural_equal_mod_constants(
            &p("((0.1052*x0)*x1)"),
            &p("(x1*(x0*C1))")
        ));
    }

    #[test]
    fn structural_equality_distributes_and_merges_like_terms() {
        // The factored writing of a line is the same family as the expanded
        // one.
        assert!(structural_equal_mod_constants(
            &p("((C1+x0)*C2)"),
            &p("((C1*x0)+C2)")
        ));
        assert!(structural_equal_mod_constants(
            &p("((x0+(x1*C1))*3.0)"),
            &p("((3.0*x0)+x1)")
        ));
        // Numerators split over their denominator.
        assert!(structural_equal_mod_constants(
            &p("((x0+C1)/x1)"),
            &p("((x0/x1)+(C2/x1))")
        ));
        // Like terms with a free coefficient collapse into one.
        assert!(structural_equal_mod_constants(
            &p("(((C1*x0)+(C2*x0))+C3)"),
            &p("((C1*x0)+C2)")
        ));
        // Without any coefficient the multiset stays; x0+x0 is not C*x0.
        assert!(!structural_equal_mod_constants(&p("(x0+x0)"), &p("(C1*x0)")));
        // Distribution does not reach inside unary arguments' families.
        assert!(!structural_equal_mod_constants(
            &p("sin((x0+C1))"),
            &p("((sin(x0)*C1)+C2)")
        ));
        // Factored trig products match their expanded sum-of-products form.
        assert!(structural_equal_mod_constants(
            &p("(((sin(x0)*C1)+C2)*cos(x1))"),
            &p("(((sin(x0)*cos(x1))*C1)+(cos(x1)*C2))")
        ));
    }

    #[test]
    fn structural_equality_collapses_variable_free_subtrees() {
        assert!(structural_equal_mod_constants(
            &p("((x0*C1)+sin(C2))"),
            &p("((x0*0.5)+C1)")
        ));
        assert!(structural_equal_mod_constants(&p("(x0/2.5)"), &p("(x0*C1)")));
        assert!(!structural_equal_mod_constants(&p("(2.5/x0)"), &p("(x0*C1)")));
        assert!(structural_equal_mod_constants(&p("(2.5/x0)"), &p("(C1/x0)")));
    }

    #[test]
    fn affine_in_constants_separates_factored_skeletons() {
        let probe = array![[0.7, -1.3], [2.1, 0.4], [-0.9, 1.8], [1.5, -2.2]];
        for s in ["(x0*x1)", "((x0*C1)+C2)", "((x0*C1)-(x1*C2))", "(sin(x0)*C1)"] {
            assert!(affine_in_constants(&p(s), probe.view()), "{s}");
        }
        for s in ["(C1*(x0-C2))", "sin((x0*C1))", "((C1*C2)*x0)", "((x0*C1)/C2)"] {
            assert!(!affine_in_constants(&p(s), probe.view()), "{s}");
        }
    }

    #[test]
    fn substitute_constants_freezes_slots() {
        let e = p("((x0*C1)-C2)");
        let s = e.substitute_constants(&[2.0, 0.25]).unwrap();
        assert_eq!(s.to_canonical_string(None), "((x0*2.0)-0.25)");
        assert!(e.substitute_constants(&[1.0]).is_err());
    }

    #[test]
    fn program_matches_tree_evaluation() {
        let e = p("(((x0*C1)+sin((x1*x1)))/(cos(x0)+2.0))");
        let x = array![[0.3, -1.2], [2.0, 0.5], [-0.7, 3.0]];
        let prog = Program::compile(&e);
        let mut out = Array1::zeros(3);
        let mut scratch = EvalScratch::default();
        prog.eval_into(&[1.7], x.view(), &mut scratch, &mut out).unwrap();
        for (i, row) in x.outer_iter().enumerate() {
            let (a, b) = (row[0], row[1]);
            let want = (a * 1.7 + (b * b).sin()) / (a.cos() + 2.0);
            assert!((out[i] - want).abs() < 1e-15);
        }
    }
}
