//! Closed arithmetic expression language used by scenario documents.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr    := or
//! or      := and ( "||" and )*
//! and     := cmp ( "&&" cmp )*
//! cmp     := add ( ( "<" | "<=" | ">" | ">=" | "==" | "!=" ) add )?
//! add     := mul ( ( "+" | "-" ) mul )*
//! mul     := unary ( ( "*" | "/" ) unary )*
//! unary   := ( "-" | "!" ) unary | primary
//! primary := number | ident | ident "(" expr ( "," expr )* ")" | "(" expr ")"
//! ```
//!
//! Comparisons and logical operators yield `1.0` or `0.0`; any nonzero value
//! counts as true. Variables are `t`, `pi`, and indexed families such as
//! `phi1`, `u2`, `u0_1`, `eps1`, `theta1`, `omega1`, `v1`, `lambda1`, `xi1`,
//! `noise1`, `p1`, `start_phi1` (indices start at one).

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

pub const GRAMMAR_VERSION: u32 = 1;

/// Indexed variable families, zero-based internally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    Phi,
    U,
    U0,
    Eps,
    Theta,
    Omega,
    V,
    Lambda,
    Xi,
    Noise,
    P,
    /// State at the start of the current set.
    PhiStart,
}

impl Family {
    pub const ALL: [Family; 12] = [
        Family::Phi,
        Family::U,
        Family::U0,
        Family::Eps,
        Family::Theta,
        Family::Omega,
        Family::V,
        Family::Lambda,
        Family::Xi,
        Family::Noise,
        Family::P,
        Family::PhiStart,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Family::Phi => "phi",
            Family::U => "u",
            Family::U0 => "u0_",
            Family::Eps => "eps",
            Family::Theta => "theta",
            Family::Omega => "omega",
            Family::V => "v",
            Family::Lambda => "lambda",
            Family::Xi => "xi",
            Family::Noise => "noise",
            Family::P => "p",
            Family::PhiStart => "start_phi",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    Time,
    Indexed(Family, usize),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::Time => write!(f, "t"),
            Var::Indexed(fam, i) => write!(f, "{}{}", fam.prefix(), i + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Abs,
    Sqrt,
    Ln,
    Tanh,
    Floor,
    Min,
    Max,
    Clip,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "ln" => Func::Ln,
            "tanh" => Func::Tanh,
            "floor" => Func::Floor,
            "min" => Func::Min,
            "max" => Func::Max,
            "clip" => Func::Clip,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
            Func::Ln => "ln",
            Func::Tanh => "tanh",
            Func::Floor => "floor",
            Func::Min => "min",
            Func::Max => "max",
            Func::Clip => "clip",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            Func::Clip => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::And => "&&",
            BinOp::Or => "||",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Or => 1,
            BinOp::And => 2,
            BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge | BinOp::Eq | BinOp::Ne => 3,
            BinOp::Add | BinOp::Sub => 4,
            BinOp::Mul | BinOp::Div => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    /// Named scenario constant, kept by name for canonical printing.
    Const(String, f64),
    Var { var: Var, col: usize },
    Neg(Box<Node>),
    Not(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// Parse or scope-check failure, with a 1-based column into the source.
#[derive(Debug, Clone, PartialEq)]
pub struct ExprError {
    pub col: usize,
    pub message: String,
}

impl fmt::Display for ExprError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "column {}: {}", self.col, self.message)
    }
}

impl std::error::Error for ExprError {}

fn err<T>(col: usize, message: impl Into<String>) -> Result<T, ExprError> {
    Err(ExprError {
        col,
        message: message.into(),
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(&'static str),
    LParen,
    RParen,
    Comma,
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let col = i + 1;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && bytes.get(i + 1).is_some_and(|b| b.is_ascii_digit())) {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let value: f64 = text
                .parse()
                .map_err(|_| ExprError {
                    col,
                    message: format!("malformed number `{text}`"),
                })?;
            out.push((Tok::Num(value), col));
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(src[start..i].to_string()), col));
            continue;
        }
        let two = src.get(i..i + 2);
        let op2 = match two {
            Some("<=") => Some("<="),
            Some(">=") => Some(">="),
            Some("==") => Some("=="),
            Some("!=") => Some("!="),
            Some("&&") => Some("&&"),
            Some("||") => Some("||"),
            _ => None,
        };
        if let Some(op) = op2 {
            out.push((Tok::Op(op), col));
            i += 2;
            continue;
        }
        let tok = match c {
            '+' => Tok::Op("+"),
            '-' => Tok::Op("-"),
            '*' => Tok::Op("*"),
            '/' => Tok::Op("/"),
            '<' => Tok::Op("<"),
            '>' => Tok::Op(">"),
            '!' => Tok::Op("!"),
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            ',' => Tok::Comma,
            _ => return err(col, format!("unexpected character `{c}`")),
        };
        out.push((tok, col));
        i += 1;
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end_col: usize,
    constants: &'a BTreeMap<String, f64>,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map(|(_, c)| *c).unwrap_or(self.end_col)
    }

    fn eat_op(&mut self, ops: &[&'static str]) -> Option<&'static str> {
        if let Some(Tok::Op(op)) = self.peek() {
            if let Some(found) = ops.iter().find(|o| *o == op) {
                self.pos += 1;
                return Some(found);
            }
        }
        None
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ExprError> {
        if self.peek() == Some(&want) {
            self.pos += 1;
            Ok(())
        } else {
            err(self.col(), format!("expected {what}"))
        }
    }

    fn or(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.and()?;
        while self.eat_op(&["||"]).is_some() {
            let rhs = self.and()?;
            lhs = Node::Bin(BinOp::Or, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.cmp()?;
        while self.eat_op(&["&&"]).is_some() {
            let rhs = self.cmp()?;
            lhs = Node::Bin(BinOp::And, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn cmp(&mut self) -> Result<Node, ExprError> {
        let lhs = self.add()?;
        let op = match self.eat_op(&["<", "<=", ">", ">=", "==", "!="]) {
            Some("<") => BinOp::Lt,
            Some("<=") => BinOp::Le,
            Some(">") => BinOp::Gt,
            Some(">=") => BinOp::Ge,
            Some("==") => BinOp::Eq,
            Some("!=") => BinOp::Ne,
            _ => return Ok(lhs),
        };
        let rhs = self.add()?;
        Ok(Node::Bin(op, Box::new(lhs), Box::new(rhs)))
    }

    fn add(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.mul()?;
        while let Some(op) = self.eat_op(&["+", "-"]) {
            let rhs = self.mul()?;
            let op = if op == "+" { BinOp::Add } else { BinOp::Sub };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn mul(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.eat_op(&["*", "/"]) {
            let rhs = self.unary()?;
            let op = if op == "*" { BinOp::Mul } else { BinOp::Div };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        match self.eat_op(&["-", "!"]) {
            Some("-") => Ok(Node::Neg(Box::new(self.unary()?))),
            Some(_) => Ok(Node::Not(Box::new(self.unary()?))),
            None => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Node, ExprError> {
        let col = self.col();
        let Some((tok, _)) = self.toks.get(self.pos).cloned() else {
            return err(col, "unexpected end of expression");
        };
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(Node::Num(v)),
            Tok::LParen => {
                let inner = self.or()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                if self.peek() == Some(&Tok::LParen) {
                    let Some(func) = Func::from_name(&name) else {
                        return err(col, format!("unknown function `{name}`"));
                    };
                    self.pos += 1;
                    let mut args = vec![self.or()?];
                    while self.peek() == Some(&Tok::Comma) {
                        self.pos += 1;
                        args.push(self.or()?);
                    }
                    self.expect(Tok::RParen, "`)` or `,`")?;
                    if args.len() != func.arity() {
                        return err(
                            col,
                            format!("`{name}` takes {} argument(s), got {}", func.arity(), args.len()),
                        );
                    }
                    return Ok(Node::Call(func, args));
                }
                if let Some(value) = self.constants.get(&name) {
                    return Ok(Node::Const(name, *value));
                }
                if name == "pi" {
                    return Ok(Node::Const(name, std::f64::consts::PI));
                }
                match parse_var(&name) {
                    Some(var) => Ok(Node::Var { var, col }),
                    None => err(col, format!("undeclared variable `{name}`")),
                }
            }
            Tok::Op(op) => err(col, format!("unexpected operator `{op}`")),
            Tok::RParen => err(col, "unexpected `)`"),
            Tok::Comma => err(col, "unexpected `,`"),
        }
    }
}

fn parse_var(name: &str) -> Option<Var> {
    if name == "t" {
        return Some(Var::Time);
    }
    // Longest prefixes first so `u0_1` is not read as family `u`.
    let mut families = Family::ALL;
    families.sort_by_key(|f| std::cmp::Reverse(f.prefix().len()));
    for fam in families {
        if let Some(rest) = name.strip_prefix(fam.prefix()) {
            if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) || rest.starts_with('0') {
                continue;
            }
            let index: usize = rest.parse().ok()?;
            return Some(Var::Indexed(fam, index - 1));
        }
    }
    None
}

/// Values visible to an expression during evaluation. Families a context
/// does not provide stay empty; scope checking guarantees they are never read.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bindings<'a> {
    pub t: f64,
    pub phi: &'a [f64],
    pub u: &'a [f64],
    pub u0: &'a [f64],
    pub eps: &'a [f64],
    pub theta: &'a [f64],
    pub omega: &'a [f64],
    pub v: &'a [f64],
    pub lambda: &'a [f64],
    pub xi: &'a [f64],
    pub noise: &'a [f64],
    pub p: &'a [f64],
    pub phi_start: &'a [f64],
}

impl Bindings<'_> {
    fn get(&self, fam: Family, i: usize) -> f64 {
        let slice = match fam {
            Family::Phi => self.phi,
            Family::U => self.u,
            Family::U0 => self.u0,
            Family::Eps => self.eps,
            Family::Theta => self.theta,
            Family::Omega => self.omega,
            Family::V => self.v,
            Family::Lambda => self.lambda,
            Family::Xi => self.xi,
            Family::Noise => self.noise,
            Family::P => self.p,
            Family::PhiStart => self.phi_start,
        };
        slice[i]
    }
}

/// Which variables an expression context may read. Each family maps to the
/// allowed range of (zero-based, global) indices; indices are rebased so the
/// first allowed index reads element 0 of the bound slice.
#[derive(Debug, Clone, Default)]
pub struct Scope {
    pub time: bool,
    ranges: [Option<Range<usize>>; 12],
    context: String,
}

impl Scope {
    pub fn new(context: impl Into<String>) -> Self {
        Scope {
            context: context.into(),
            ..Default::default()
        }
    }

    pub fn with_time(mut self) -> Self {
        self.time = true;
        self
    }

    /// Allow `family` with indices `0..dim`.
    pub fn allow(self, fam: Family, dim: usize) -> Self {
        self.allow_range(fam, 0..dim)
    }

    pub fn allow_range(mut self, fam: Family, range: Range<usize>) -> Self {
        self.ranges[fam.slot()] = Some(range);
        self
    }

    pub fn range(&self, fam: Family) -> Option<&Range<usize>> {
        self.ranges[fam.slot()].as_ref()
    }
}

/// A parsed expression together with its source text.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    root: Node,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr, ExprError> {
        Self::parse_with(src, &BTreeMap::new())
    }

    /// Parse, resolving bare identifiers against named constants first.
    pub fn parse_with(src: &str, constants: &BTreeMap<String, f64>) -> Result<Expr, ExprError> {
        let toks = lex(src)?;
        if toks.is_empty() {
            return err(1, "empty expression");
        }
        let mut parser = Parser {
            toks,
            pos: 0,
            end_col: src.len() + 1,
            constants,
        };
        let root = parser.or()?;
        if parser.pos < parser.toks.len() {
            return err(parser.col(), "unexpected trailing input");
        }
        Ok(Expr { root })
    }

    /// Parse and scope-check in one go, returning an evaluable expression.
    pub fn compile(src: &str, constants: &BTreeMap<String, f64>, scope: &Scope) -> Result<Expr, ExprError> {
        Self::parse_with(src, constants)?.scoped(scope)
    }

    /// Check every variable against `scope` and rebase indices.
    pub fn scoped(mut self, scope: &Scope) -> Result<Expr, ExprError> {
        rebase(&mut self.root, scope)?;
        Ok(self)
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn eval(&self, b: &Bindings<'_>) -> f64 {
        eval(&self.root, b)
    }

    /// Zero-based indices read from `fam`, ascending.
    pub fn indices(&self, fam: Family) -> Vec<usize> {
        fn walk(n: &Node, fam: Family, out: &mut Vec<usize>) {
            match n {
                Node::Var {
                    var: Var::Indexed(f, i),
                    ..
                } if *f == fam => out.push(*i),
                Node::Neg(a) | Node::Not(a) => walk(a, fam, out),
                Node::Bin(_, a, b) => {
                    walk(a, fam, out);
                    walk(b, fam, out);
                }
                Node::Call(_, args) => args.iter().for_each(|a| walk(a, fam, out)),
                _ => {}
            }
        }
        let mut out = Vec::new();
        walk(&self.root, fam, &mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Largest zero-based index used per family, for arity inference.
    pub fn max_index(&self, fam: Family) -> Option<usize> {
        self.indices(fam).last().copied()
    }

    pub fn references(&self, fam: Family) -> bool {
        self.max_index(fam).is_some()
    }
}

fn rebase(n: &mut Node, scope: &Scope) -> Result<(), ExprError> {
    match n {
        Node::Var { var, col } => match var {
            Var::Time if scope.time => Ok(()),
            Var::Time => err(*col, format!("`t` is not available in {}", scope.context)),
            Var::Indexed(fam, i) => {
                let name = format!("{}{}", fam.prefix(), *i + 1);
                match scope.range(*fam) {
                    None => err(*col, format!("`{name}` is not available in {}", scope.context)),
                    Some(r) if !r.contains(i) => {
                        if r.is_empty() {
                            err(*col, format!("`{name}` is not available in {}", scope.context))
                        } else {
                            err(
                                *col,
                                format!(
                                    "`{name}` is out of range in {} (allowed {}{}..{}{})",
                                    scope.context,
                                    fam.prefix(),
                                    r.start + 1,
                                    fam.prefix(),
                                    r.end
                                ),
                            )
                        }
                    }
                    Some(r) => {
                        *i -= r.start;
                        Ok(())
                    }
                }
            }
        },
        Node::Neg(a) | Node::Not(a) => rebase(a, scope),
        Node::Bin(_, a, b) => {
            rebase(a, scope)?;
            rebase(b, scope)
        }
        Node::Call(_, args) => args.iter_mut().try_for_each(|a| rebase(a, scope)),
        Node::Num(_) | Node::Const(..) => Ok(()),
    }
}

fn truth(x: bool) -> f64 {
    if x {
        1.0
    } else {
        0.0
    }
}

fn eval(n: &Node, b: &Bindings<'_>) -> f64 {
    match n {
        Node::Num(v) | Node::Const(_, v) => *v,
        Node::Var { var: Var::Time, .. } => b.t,
        Node::Var {
            var: Var::Indexed(fam, i),
            ..
        } => b.get(*fam, *i),
        Node::Neg(a) => -eval(a, b),
        Node::Not(a) => truth(eval(a, b) == 0.0),
        Node::Bin(op, l, r) => {
            let x = eval(l, b);
            match op {
                BinOp::And => return truth(x != 0.0 && eval(r, b) != 0.0),
                BinOp::Or => return truth(x != 0.0 || eval(r, b) != 0.0),
                _ => {}
            }
            let y = eval(r, b);
            match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => x / y,
                BinOp::Lt => truth(x < y),
                BinOp::Le => truth(x <= y),
                BinOp::Gt => truth(x > y),
                BinOp::Ge => truth(x >= y),
                BinOp::Eq => truth(x == y),
                BinOp::Ne => truth(x != y),
                BinOp::And | BinOp::Or => unreachable!(),
            }
        }
        Node::Call(func, args) => {
            let a = eval(&args[0], b);
            match func {
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Exp => a.exp(),
                Func::Abs => a.abs(),
                Func::Sqrt => a.sqrt(),
                Func::Ln => a.ln(),
                Func::Tanh => a.tanh(),
                Func::Floor => a.floor(),
                Func::Min => a.min(eval(&args[1], b)),
                Func::Max => a.max(eval(&args[1], b)),
                Func::Clip => a.max(eval(&args[1], b)).min(eval(&args[2], b)),
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(f, &self.root)
    }
}

fn node_prec(n: &Node) -> u8 {
    match n {
        Node::Bin(op, ..) => op.precedence(),
        Node::Neg(_) | Node::Not(_) => 6,
        _ => 7,
    }
}

fn write_node(f: &mut fmt::Formatter<'_>, n: &Node) -> fmt::Result {
    match n {
        Node::Num(v) => write!(f, "{v:?}"),
        Node::Const(name, _) => write!(f, "{name}"),
        Node::Var { var, .. } => write!(f, "{var}"),
        Node::Neg(a) | Node::Not(a) => {
            f.write_str(if matches!(n, Node::Neg(_)) { "-" } else { "!" })?;
            write_child(f, a, node_prec(a) < 6)
        }
        Node::Bin(op, l, r) => {
            let p = op.precedence();
            let is_cmp = p == 3;
            write_child(f, l, node_prec(l) < p || (is_cmp && node_prec(l) == p))?;
            write!(f, " {} ", op.symbol())?;
            write_child(f, r, node_prec(r) <= p)
        }
        Node::Call(func, args) => {
            write!(f, "{}(", func.name())?;
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                write_node(f, a)?;
            }
            f.write_str(")")
        }
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, n: &Node, paren: bool) -> fmt::Result {
    if paren {
        f.write_str("(")?;
        write_node(f, n)?;
        f.write_str(")")
    } else {
        write_node(f, n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all_scope() -> Scope {
        let mut s = Scope::new("test").with_time();
        for fam in Family::ALL {
            s = s.allow(fam, 8);
        }
        s
    }

    fn eval_str(src: &str, b: &Bindings<'_>) -> f64 {
        Expr::compile(src, &BTreeMap::new(), &all_scope()).unwrap().eval(b)
    }

    #[test]
    fn hand_evaluated_example() {
        let b = Bindings {
            phi: &[0.0],
            u: &[2.0],
            theta: &[3.0],
            ..Default::default()
        };
        assert_eq!(eval_str("sin(phi1) + u1*theta1", &b), 6.0);
    }

    #[test]
    fn precedence_and_unary() {
        let b = Bindings::default();
        assert_eq!(eval_str("1 + 2 * 3", &b), 7.0);
        assert_eq!(eval_str("(1 + 2) * 3", &b), 9.0);
        assert_eq!(eval_str("-2 * -3", &b), 6.0);
        assert_eq!(eval_str("8 / 4 / 2", &b), 1.0);
        assert_eq!(eval_str("1 - 2 - 3", &b), -4.0);
        assert_eq!(eval_str("clip(5, -1, 1)", &b), 1.0);
        assert_eq!(eval_str("min(2, 3) + max(2, 3)", &b), 5.0);
        assert_eq!(eval_str("1 < 2 && 3 >= 3", &b), 1.0);
        assert_eq!(eval_str("!(1 < 2) || 0", &b), 0.0);
        assert_eq!(eval_str("1.5e-1 * 2E1", &b), 3.0);
    }

    #[test]
    fn u0_family_is_not_confused_with_u() {
        let b = Bindings {
            u: &[1.0, 2.0],
            u0: &[10.0, 20.0],
            ..Default::default()
        };
        assert_eq!(eval_str("u0_2 + u2", &b), 22.0);
    }

    #[test]
    fn undeclared_variable_reports_column() {
        let e = Expr::parse("phi1 + velocity").unwrap_err();
        assert_eq!(e.col, 8);
        assert!(e.message.contains("velocity"));
    }

    #[test]
    fn scope_rejects_hidden_families() {
        let scope = Scope::new("pure control").with_time().allow(Family::Phi, 1);
        let e = Expr::compile("phi1 + eps1", &BTreeMap::new(), &scope).unwrap_err();
        assert_eq!(e.col, 8);
        assert!(e.message.contains("pure control"));
        let e = Expr::compile("phi2", &BTreeMap::new(), &scope).unwrap_err();
        assert!(e.message.contains("out of range"));
    }

    #[test]
    fn scope_rebases_global_indices() {
        let scope = Scope::new("coupling of player 2").allow_range(Family::Eps, 1..2);
        let e = Expr::compile("3 * eps2", &BTreeMap::new(), &scope).unwrap();
        let b = Bindings {
            eps: &[0.5],
            ..Default::default()
        };
        assert_eq!(e.eval(&b), 1.5);
    }

    #[test]
    fn constants_resolve_and_print_by_name() {
        let mut c = BTreeMap::new();
        c.insert("a".to_string(), -1.0);
        let e = Expr::parse_with("a*phi1", &c).unwrap();
        assert_eq!(e.to_string(), "a * phi1");
    }

    #[test]
    fn malformed_inputs() {
        for src in ["", "1 +", "(1", "sin(1, 2)", "foo(1)", "1 $ 2", "1 < 2 < 3", "phi0"] {
            assert!(Expr::parse(src).is_err(), "{src} should fail");
        }
    }

    fn arb_src() -> impl Strategy<Value = String> {
        let leaf = prop_oneof![
            (0u32..100).prop_map(|n| format!("{}", n as f64 / 4.0)),
            (1usize..3).prop_map(|i| format!("phi{i}")),
            Just("t".to_string()),
        ];
        leaf.prop_recursive(4, 32, 3, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone(), prop::sample::select(vec!["+", "-", "*", "/", "<", "&&"]))
                    .prop_map(|(a, b, op)| format!("({a}) {op} ({b})")),
                inner.clone().prop_map(|a| format!("-({a})")),
                (inner.clone(), inner).prop_map(|(a, b)| format!("max({a}, {b})")),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_is_a_fixed_point(src in arb_src()) {
            let e = Expr::parse(&src).unwrap();
            let printed = e.to_string();
            let again = Expr::parse(&printed).unwrap();
            prop_assert_eq!(&again.to_string(), &printed);
            let b = Bindings { t: 0.7, phi: &[1.25, -0.5], ..Default::default() };
            let scope = all_scope();
            let x = e.scoped(&scope).unwrap().eval(&b);
            let y = again.scoped(&scope).unwrap().eval(&b);
            prop_assert!(x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()));
        }
    }
}
