//! A small arithmetic expression language for problem coefficients.
//!
//! Every coefficient of a problem (drift, volatility, generators, switching
//! costs, terminal data) is written in this language. The grammar is
//! conventional infix with `^` for power, whitespace-insensitive:
//!
//! * precedence: unary minus > `^` > `*` `/` > `+` `-`; all binary operators
//!   associate to the left (so `-x^2` is `(-x)^2` and `a^b^c` is `(a^b)^c`);
//! * variables: `t`, `x1..xk`, `y_<i>_<j>` (solution components), `z1..zd`
//!   (gradient components); indices are 1-based;
//! * functions (closed set): `abs`, `min`, `max`, `exp`, `log`, `sqrt`,
//!   `pow`, `pos` (positive part), `neg` (negative part), `sin`, `cos`.
//!
//! There is no conditional construct; piecewise functions are built from
//! `pos`/`neg`/`min`/`max`, which keeps evaluation total and Lipschitz.
//! Expressions are immutable after parsing and evaluation is reentrant.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::num;

/// A variable reference. Indices are 1-based, matching the surface syntax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Var {
    /// Time, `t`.
    T,
    /// State coordinate, `x1..xk`.
    X(usize),
    /// Solution component, `y_<i>_<j>`.
    Y(usize, usize),
    /// Gradient component, `z1..zd`.
    Z(usize),
}

impl Var {
    /// Canonical surface name of the variable.
    pub fn name(&self) -> String {
        match self {
            Var::T => "t".to_string(),
            Var::X(c) => format!("x{c}"),
            Var::Y(i, j) => format!("y_{i}_{j}"),
            Var::Z(r) => format!("z{r}"),
        }
    }
}

/// Built-in functions. `Min`, `Max` and `Pow` take two arguments, the rest
/// take one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Abs,
    Min,
    Max,
    Exp,
    Log,
    Sqrt,
    Pow,
    Pos,
    Neg,
    Sin,
    Cos,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "pow" => Func::Pow,
            "pos" => Func::Pos,
            "neg" => Func::Neg,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            _ => return None,
        })
    }

    fn name(&self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Pow => "pow",
            Func::Pos => "pos",
            Func::Neg => "neg",
            Func::Sin => "sin",
            Func::Cos => "cos",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Func::Min | Func::Max | Func::Pow => 2,
            _ => 1,
        }
    }
}

/// Binary operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

/// One node of the expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Number(f64),
    Variable(Var),
    Neg(Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// A parsed arithmetic expression.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    root: Node,
}

impl Expression {
    /// The root node of the tree.
    pub fn root(&self) -> &Node {
        &self.root
    }
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Parse failure with the byte position in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub pos: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    EmptySource,
    UnexpectedChar(char),
    UnexpectedToken(String),
    UnexpectedEnd,
    UnknownFunction(String),
    UnknownVariable(String),
    WrongArity { name: &'static str, expected: usize, got: usize },
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ParseErrorKind::EmptySource => write!(f, "empty expression"),
            ParseErrorKind::UnexpectedChar(c) => {
                write!(f, "unexpected character '{c}' at position {}", self.pos)
            }
            ParseErrorKind::UnexpectedToken(t) => {
                write!(f, "unexpected token '{t}' at position {}", self.pos)
            }
            ParseErrorKind::UnexpectedEnd => {
                write!(f, "unexpected end of expression at position {}", self.pos)
            }
            ParseErrorKind::UnknownFunction(n) => {
                write!(f, "unknown function '{n}' at position {}", self.pos)
            }
            ParseErrorKind::UnknownVariable(n) => write!(
                f,
                "unknown variable name pattern '{n}' at position {} \
                 (expected t, x<i>, y_<i>_<j> or z<i>)",
                self.pos
            ),
            ParseErrorKind::WrongArity { name, expected, got } => write!(
                f,
                "function '{name}' takes {expected} argument(s), got {got} (position {})",
                self.pos
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ParseError {}

/// Evaluation failure. Domain errors are reported instead of silently
/// producing NaN.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    Unbound(String),
    Domain { op: &'static str, arg: f64 },
    NonFinite { op: &'static str },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::Unbound(name) => write!(f, "unbound variable '{name}'"),
            EvalError::Domain { op, arg } => {
                write!(f, "domain error: {op}({arg}) is undefined")
            }
            EvalError::NonFinite { op } => write!(f, "'{op}' produced a NaN"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for EvalError {}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src: src.as_bytes(), pos: 0 }
    }

    fn tokens(mut self) -> Result<Vec<(usize, Tok)>, ParseError> {
        let mut out = Vec::new();
        loop {
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos >= self.src.len() {
                return Ok(out);
            }
            let start = self.pos;
            let c = self.src[self.pos] as char;
            let tok = match c {
                '+' => { self.pos += 1; Tok::Plus }
                '-' => { self.pos += 1; Tok::Minus }
                '*' => { self.pos += 1; Tok::Star }
                '/' => { self.pos += 1; Tok::Slash }
                '^' => { self.pos += 1; Tok::Caret }
                '(' => { self.pos += 1; Tok::LParen }
                ')' => { self.pos += 1; Tok::RParen }
                ',' => { self.pos += 1; Tok::Comma }
                '0'..='9' | '.' => self.number(start)?,
                'a'..='z' | 'A'..='Z' | '_' => self.ident(start),
                other => {
                    return Err(ParseError { pos: start, kind: ParseErrorKind::UnexpectedChar(other) })
                }
            };
            out.push((start, tok));
        }
    }

    fn number(&mut self, start: usize) -> Result<Tok, ParseError> {
        while self.pos < self.src.len() && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.') {
            self.pos += 1;
        }
        // optional exponent
        if self.pos < self.src.len() && (self.src[self.pos] == b'e' || self.src[self.pos] == b'E') {
            let mut probe = self.pos + 1;
            if probe < self.src.len() && (self.src[probe] == b'+' || self.src[probe] == b'-') {
                probe += 1;
            }
            if probe < self.src.len() && self.src[probe].is_ascii_digit() {
                self.pos = probe;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            }
        }
        let text = core::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        text.parse::<f64>()
            .map(Tok::Num)
            .map_err(|_| ParseError { pos: start, kind: ParseErrorKind::UnexpectedToken(text.to_string()) })
    }

    fn ident(&mut self, start: usize) -> Tok {
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        Tok::Ident(core::str::from_utf8(&self.src[start..self.pos]).expect("ascii").to_string())
    }
}

// ---------------------------------------------------------------------------
// Parser (Pratt, with binding powers encoding the precedence table)
// ---------------------------------------------------------------------------

// add/sub (1,2) < mul/div (3,4) < pow (5,6) < unary minus (7).
fn bin_bp(op: BinOp) -> (u8, u8) {
    match op {
        BinOp::Add | BinOp::Sub => (1, 2),
        BinOp::Mul | BinOp::Div => (3, 4),
        BinOp::Pow => (5, 6),
    }
}
const UNARY_BP: u8 = 7;

struct Parser {
    toks: Vec<(usize, Tok)>,
    idx: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&(usize, Tok)> {
        self.toks.get(self.idx)
    }

    fn next(&mut self) -> Option<(usize, Tok)> {
        let t = self.toks.get(self.idx).cloned();
        if t.is_some() {
            self.idx += 1;
        }
        t
    }

    fn expr(&mut self, min_bp: u8) -> Result<Node, ParseError> {
        let mut lhs = self.primary()?;
        loop {
            let op = match self.peek() {
                Some((_, Tok::Plus)) => BinOp::Add,
                Some((_, Tok::Minus)) => BinOp::Sub,
                Some((_, Tok::Star)) => BinOp::Mul,
                Some((_, Tok::Slash)) => BinOp::Div,
                Some((_, Tok::Caret)) => BinOp::Pow,
                _ => break,
            };
            let (lbp, rbp) = bin_bp(op);
            if lbp < min_bp {
                break;
            }
            self.next();
            let rhs = self.expr(rbp)?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn primary(&mut self) -> Result<Node, ParseError> {
        match self.next() {
            None => Err(ParseError { pos: self.end, kind: ParseErrorKind::UnexpectedEnd }),
            Some((_, Tok::Num(v))) => Ok(Node::Number(v)),
            Some((_, Tok::Minus)) => {
                let operand = self.expr(UNARY_BP)?;
                Ok(Node::Neg(Box::new(operand)))
            }
            Some((_, Tok::LParen)) => {
                let inner = self.expr(0)?;
                match self.next() {
                    Some((_, Tok::RParen)) => Ok(inner),
                    Some((p, t)) => Err(ParseError { pos: p, kind: ParseErrorKind::UnexpectedToken(tok_text(&t)) }),
                    None => Err(ParseError { pos: self.end, kind: ParseErrorKind::UnexpectedEnd }),
                }
            }
            Some((pos, Tok::Ident(name))) => {
                if matches!(self.peek(), Some((_, Tok::LParen))) {
                    self.next();
                    let func = Func::from_name(&name)
                        .ok_or(ParseError { pos, kind: ParseErrorKind::UnknownFunction(name.clone()) })?;
                    let mut args = Vec::new();
                    if matches!(self.peek(), Some((_, Tok::RParen))) {
                        self.next();
                    } else {
                        loop {
                            args.push(self.expr(0)?);
                            match self.next() {
                                Some((_, Tok::Comma)) => continue,
                                Some((_, Tok::RParen)) => break,
                                Some((p, t)) => {
                                    return Err(ParseError { pos: p, kind: ParseErrorKind::UnexpectedToken(tok_text(&t)) })
                                }
                                None => {
                                    return Err(ParseError { pos: self.end, kind: ParseErrorKind::UnexpectedEnd })
                                }
                            }
                        }
                    }
                    if args.len() != func.arity() {
                        return Err(ParseError {
                            pos,
                            kind: ParseErrorKind::WrongArity {
                                name: func.name(),
                                expected: func.arity(),
                                got: args.len(),
                            },
                        });
                    }
                    Ok(Node::Call(func, args))
                } else {
                    let var = parse_var(&name)
                        .ok_or(ParseError { pos, kind: ParseErrorKind::UnknownVariable(name.clone()) })?;
                    Ok(Node::Variable(var))
                }
            }
            Some((pos, t)) => Err(ParseError { pos, kind: ParseErrorKind::UnexpectedToken(tok_text(&t)) }),
        }
    }
}

fn tok_text(t: &Tok) -> String {
    match t {
        Tok::Num(v) => format!("{v}"),
        Tok::Ident(s) => s.clone(),
        Tok::Plus => "+".to_string(),
        Tok::Minus => "-".to_string(),
        Tok::Star => "*".to_string(),
        Tok::Slash => "/".to_string(),
        Tok::Caret => "^".to_string(),
        Tok::LParen => "(".to_string(),
        Tok::RParen => ")".to_string(),
        Tok::Comma => ",".to_string(),
    }
}

fn parse_var(name: &str) -> Option<Var> {
    if name == "t" {
        return Some(Var::T);
    }
    if let Some(rest) = name.strip_prefix("y_") {
        let mut parts = rest.split('_');
        let i = parse_index(parts.next()?)?;
        let j = parse_index(parts.next()?)?;
        if parts.next().is_some() {
            return None;
        }
        return Some(Var::Y(i, j));
    }
    if let Some(rest) = name.strip_prefix('x') {
        return parse_index(rest).map(Var::X);
    }
    if let Some(rest) = name.strip_prefix('z') {
        return parse_index(rest).map(Var::Z);
    }
    None
}

fn parse_index(s: &str) -> Option<usize> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let v: usize = s.parse().ok()?;
    if v >= 1 {
        Some(v)
    } else {
        None
    }
}

/// Parse source text into an [`Expression`].
pub fn parse(source: &str) -> Result<Expression, ParseError> {
    if source.trim().is_empty() {
        return Err(ParseError { pos: 0, kind: ParseErrorKind::EmptySource });
    }
    let toks = Lexer::new(source).tokens()?;
    let end = source.len();
    let mut p = Parser { toks, idx: 0, end };
    let root = p.expr(0)?;
    if let Some((pos, t)) = p.peek() {
        return Err(ParseError { pos: *pos, kind: ParseErrorKind::UnexpectedToken(tok_text(t)) });
    }
    Ok(Expression { root })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

fn apply_func(func: Func, a: f64, b: f64) -> Result<f64, EvalError> {
    let v = match func {
        Func::Abs => num::abs(a),
        Func::Min => a.min(b),
        Func::Max => a.max(b),
        Func::Exp => num::exp(a),
        Func::Log => {
            if a <= 0.0 {
                return Err(EvalError::Domain { op: "log", arg: a });
            }
            num::ln(a)
        }
        Func::Sqrt => {
            if a < 0.0 {
                return Err(EvalError::Domain { op: "sqrt", arg: a });
            }
            num::sqrt(a)
        }
        Func::Pow => {
            let v = num::pow(a, b);
            if v.is_nan() {
                return Err(EvalError::Domain { op: "pow", arg: a });
            }
            v
        }
        Func::Pos => num::pos(a),
        Func::Neg => num::neg(a),
        Func::Sin => num::sin(a),
        Func::Cos => num::cos(a),
    };
    if v.is_nan() {
        return Err(EvalError::NonFinite { op: func.name() });
    }
    Ok(v)
}

fn eval_node<L>(node: &Node, lookup: &L) -> Result<f64, EvalError>
where
    L: Fn(Var) -> Option<f64>,
{
    match node {
        Node::Number(v) => Ok(*v),
        Node::Variable(var) => lookup(*var).ok_or_else(|| EvalError::Unbound(var.name())),
        Node::Neg(inner) => Ok(-eval_node(inner, lookup)?),
        Node::Binary(op, lhs, rhs) => {
            let a = eval_node(lhs, lookup)?;
            let b = eval_node(rhs, lookup)?;
            let v = match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => a / b,
                BinOp::Pow => {
                    let v = num::pow(a, b);
                    if v.is_nan() {
                        return Err(EvalError::Domain { op: "pow", arg: a });
                    }
                    v
                }
            };
            if v.is_nan() {
                return Err(EvalError::NonFinite { op: bin_name(*op) });
            }
            Ok(v)
        }
        Node::Call(func, args) => {
            let a = eval_node(&args[0], lookup)?;
            let b = if args.len() > 1 { eval_node(&args[1], lookup)? } else { 0.0 };
            apply_func(*func, a, b)
        }
    }
}

fn bin_name(op: BinOp) -> &'static str {
    match op {
        BinOp::Add => "+",
        BinOp::Sub => "-",
        BinOp::Mul => "*",
        BinOp::Div => "/",
        BinOp::Pow => "^",
    }
}

/// Evaluate an expression under the given name bindings.
///
/// Every free variable must be bound; `log`/`sqrt`/`pow` outside their
/// domains are reported as errors rather than silently producing NaN.
pub fn eval(expr: &Expression, bindings: &BTreeMap<String, f64>) -> Result<f64, EvalError> {
    eval_node(&expr.root, &|var: Var| bindings.get(var.name().as_str()).copied())
}

/// The exact set of variable names referenced by the expression.
pub fn free_vars(expr: &Expression) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    collect_vars(&expr.root, &mut out);
    out
}

fn collect_vars(node: &Node, out: &mut BTreeSet<String>) {
    match node {
        Node::Number(_) => {}
        Node::Variable(v) => {
            out.insert(v.name());
        }
        Node::Neg(inner) => collect_vars(inner, out),
        Node::Binary(_, a, b) => {
            collect_vars(a, out);
            collect_vars(b, out);
        }
        Node::Call(_, args) => {
            for a in args {
                collect_vars(a, out);
            }
        }
    }
}

/// Typed variant of [`free_vars`].
pub fn free_var_refs(expr: &Expression) -> BTreeSet<Var> {
    let mut out = BTreeSet::new();
    collect_var_refs(&expr.root, &mut out);
    out
}

fn collect_var_refs(node: &Node, out: &mut BTreeSet<Var>) {
    match node {
        Node::Number(_) => {}
        Node::Variable(v) => {
            out.insert(*v);
        }
        Node::Neg(inner) => collect_var_refs(inner, out),
        Node::Binary(_, a, b) => {
            collect_var_refs(a, out);
            collect_var_refs(b, out);
        }
        Node::Call(_, args) => {
            for a in args {
                collect_var_refs(a, out);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Slot-compiled form (hot path used by the solvers)
// ---------------------------------------------------------------------------

/// An expression with variable references resolved to indices into a flat
/// environment buffer. Compiling once and evaluating against a slice avoids
/// name lookups in solver inner loops.
#[derive(Debug, Clone)]
pub struct CompiledExpr {
    root: CNode,
}

#[derive(Debug, Clone)]
enum CNode {
    Number(f64),
    Slot(usize),
    Neg(Box<CNode>),
    Binary(BinOp, Box<CNode>, Box<CNode>),
    Call(Func, Box<CNode>, Option<Box<CNode>>),
}

/// Raised when a variable reference cannot be mapped to an environment slot
/// (index out of range for the problem dimensions, or a variable class that
/// is not allowed in this coefficient).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BindError {
    pub var: String,
    pub context: &'static str,
}

impl fmt::Display for BindError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "variable '{}' is not available in {}", self.var, self.context)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for BindError {}

impl CompiledExpr {
    /// Resolve all variables through `slot`, failing on any `None`.
    pub fn compile<S>(expr: &Expression, context: &'static str, slot: S) -> Result<CompiledExpr, BindError>
    where
        S: Fn(Var) -> Option<usize> + Copy,
    {
        fn go<S>(node: &Node, context: &'static str, slot: S) -> Result<CNode, BindError>
        where
            S: Fn(Var) -> Option<usize> + Copy,
        {
            Ok(match node {
                Node::Number(v) => CNode::Number(*v),
                Node::Variable(var) => match slot(*var) {
                    Some(idx) => CNode::Slot(idx),
                    None => return Err(BindError { var: var.name(), context }),
                },
                Node::Neg(inner) => CNode::Neg(Box::new(go(inner, context, slot)?)),
                Node::Binary(op, a, b) => CNode::Binary(
                    *op,
                    Box::new(go(a, context, slot)?),
                    Box::new(go(b, context, slot)?),
                ),
                Node::Call(func, args) => {
                    let first = Box::new(go(&args[0], context, slot)?);
                    let second = match args.get(1) {
                        Some(a) => Some(Box::new(go(a, context, slot)?)),
                        None => None,
                    };
                    CNode::Call(*func, first, second)
                }
            })
        }
        Ok(CompiledExpr { root: go(&expr.root, context, slot)? })
    }

    /// Evaluate against a flat environment. Slots are trusted to be in range
    /// (guaranteed by `compile`).
    pub fn eval(&self, env: &[f64]) -> Result<f64, EvalError> {
        fn go(node: &CNode, env: &[f64]) -> Result<f64, EvalError> {
            match node {
                CNode::Number(v) => Ok(*v),
                CNode::Slot(idx) => Ok(env[*idx]),
                CNode::Neg(inner) => Ok(-go(inner, env)?),
                CNode::Binary(op, a, b) => {
                    let x = go(a, env)?;
                    let y = go(b, env)?;
                    let v = match op {
                        BinOp::Add => x + y,
                        BinOp::Sub => x - y,
                        BinOp::Mul => x * y,
                        BinOp::Div => x / y,
                        BinOp::Pow => {
                            let v = num::pow(x, y);
                            if v.is_nan() {
                                return Err(EvalError::Domain { op: "pow", arg: x });
                            }
                            v
                        }
                    };
                    if v.is_nan() {
                        return Err(EvalError::NonFinite { op: bin_name(*op) });
                    }
                    Ok(v)
                }
                CNode::Call(func, a, b) => {
                    let x = go(a, env)?;
                    let y = match b {
                        Some(b) => go(b, env)?,
                        None => 0.0,
                    };
                    apply_func(*func, x, y)
                }
            }
        }
        go(&self.root, env)
    }
}

// ---------------------------------------------------------------------------
// Pretty printing
// ---------------------------------------------------------------------------

fn node_prec(node: &Node) -> u8 {
    match node {
        Node::Number(_) | Node::Variable(_) | Node::Call(..) => 10,
        Node::Neg(_) => 7,
        Node::Binary(op, ..) => bin_bp(*op).0,
    }
}

fn fmt_node(node: &Node, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match node {
        Node::Number(v) => write!(f, "{v}"),
        Node::Variable(var) => write!(f, "{}", var.name()),
        Node::Neg(inner) => {
            write!(f, "-")?;
            // unary minus binds tighter than every binary operator
            if node_prec(inner) < UNARY_BP {
                write!(f, "(")?;
                fmt_node(inner, f)?;
                write!(f, ")")
            } else {
                fmt_node(inner, f)
            }
        }
        Node::Binary(op, lhs, rhs) => {
            let (lbp, rbp) = bin_bp(*op);
            if node_prec(lhs) < lbp {
                write!(f, "(")?;
                fmt_node(lhs, f)?;
                write!(f, ")")?;
            } else {
                fmt_node(lhs, f)?;
            }
            write!(f, " {} ", bin_name(*op))?;
            if node_prec(rhs) < rbp {
                write!(f, "(")?;
                fmt_node(rhs, f)?;
                write!(f, ")")
            } else {
                fmt_node(rhs, f)
            }
        }
        Node::Call(func, args) => {
            write!(f, "{}(", func.name())?;
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    write!(f, ", ")?;
                }
                fmt_node(a, f)?;
            }
            write!(f, ")")
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_node(&self.root, f)
    }
}
