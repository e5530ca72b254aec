//! A small Python-flavoured expression language.
//!
//! Used for parameter bindings (`${planes * 4}`), repeat counts, block-level
//! variables, conditional clauses and the dimension terms of shape contracts.
//! Evaluation follows Python semantics (floor division, sign of `%`) so that
//! a value computed here is the value the generated module computes at run
//! time.

use std::fmt;

use thiserror::Error;

/// A literal value.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
    List(Vec<Value>),
}

impl Value {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(v) => Some(*v as f64),
            Value::Float(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn type_of(&self) -> Ty {
        match self {
            Value::Int(_) => Ty::Int,
            Value::Float(_) => Ty::Float,
            Value::Bool(_) => Ty::Bool,
            Value::Str(_) => Ty::Str,
            Value::List(items) => {
                let mut elem = Ty::Any;
                for item in items {
                    elem = match elem.join(&item.type_of()) {
                        Some(t) => t,
                        None => Ty::Any,
                    };
                }
                Ty::List(Box::new(elem))
            }
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Int(v) => serde_json::Value::from(*v),
            Value::Float(v) => serde_json::Value::from(*v),
            Value::Bool(v) => serde_json::Value::from(*v),
            Value::Str(v) => serde_json::Value::from(v.as_str()),
            Value::List(items) => serde_json::Value::Array(items.iter().map(Value::to_json).collect()),
        }
    }

    pub fn from_json(value: &serde_json::Value) -> Option<Value> {
        match value {
            serde_json::Value::Bool(b) => Some(Value::Bool(*b)),
            serde_json::Value::Number(n) => {
                if let Some(i) = n.as_i64() {
                    Some(Value::Int(i))
                } else {
                    n.as_f64().map(Value::Float)
                }
            }
            serde_json::Value::String(s) => Some(Value::Str(s.clone())),
            serde_json::Value::Array(items) => items.iter().map(Value::from_json).collect::<Option<Vec<_>>>().map(Value::List),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_literal(f, self)
    }
}

/// Static type of an expression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ty {
    Int,
    Float,
    Bool,
    Str,
    List(Box<Ty>),
    /// Unconstrained (an empty list element, or an unknown binding).
    Any,
}

impl Ty {
    /// Least upper bound used for list elements and conditional branches.
    pub fn join(&self, other: &Ty) -> Option<Ty> {
        match (self, other) {
            (Ty::Any, t) | (t, Ty::Any) => Some(t.clone()),
            (a, b) if a == b => Some(a.clone()),
            (Ty::Int, Ty::Float) | (Ty::Float, Ty::Int) => Some(Ty::Float),
            (Ty::List(a), Ty::List(b)) => a.join(b).map(|t| Ty::List(Box::new(t))),
            _ => None,
        }
    }

    fn is_numeric(&self) -> bool {
        matches!(self, Ty::Int | Ty::Float | Ty::Any)
    }
}

impl fmt::Display for Ty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ty::Int => f.write_str("int"),
            Ty::Float => f.write_str("float"),
            Ty::Bool => f.write_str("bool"),
            Ty::Str => f.write_str("string"),
            Ty::List(t) => write!(f, "list[{t}]"),
            Ty::Any => f.write_str("any"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    FloorDiv,
    Mod,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
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
            BinOp::FloorDiv => "//",
            BinOp::Mod => "%",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::And => "and",
            BinOp::Or => "or",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Or => PREC_OR,
            BinOp::And => PREC_AND,
            BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => PREC_CMP,
            BinOp::Add | BinOp::Sub => PREC_ADD,
            BinOp::Mul | BinOp::Div | BinOp::FloorDiv | BinOp::Mod => PREC_MUL,
        }
    }

    fn is_comparison(self) -> bool {
        self.precedence() == PREC_CMP
    }
}

const PREC_TERNARY: u8 = 1;
const PREC_OR: u8 = 2;
const PREC_AND: u8 = 3;
const PREC_NOT: u8 = 4;
const PREC_CMP: u8 = 5;
const PREC_ADD: u8 = 6;
const PREC_MUL: u8 = 7;
const PREC_UNARY: u8 = 8;
const PREC_POSTFIX: u8 = 9;
const PREC_ATOM: u8 = 10;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Lit(Value),
    Name(String),
    Attr(Box<Expr>, String),
    Index(Box<Expr>, Box<Expr>),
    List(Vec<Expr>),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Cond {
        test: Box<Expr>,
        then: Box<Expr>,
        otherwise: Box<Expr>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message} at offset {offset}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("undefined name `{0}`")]
    Undefined(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("index {index} out of range for list of length {len}")]
    IndexOutOfRange { index: i64, len: usize },
    #[error("unsupported operand types for `{op}`: {left} and {right}")]
    Operands { op: &'static str, left: Ty, right: Ty },
    #[error("expected {expected}, found {found}")]
    Type { expected: &'static str, found: Ty },
    #[error("integer overflow")]
    Overflow,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TypeError {
    #[error("undefined name `{0}`")]
    Undefined(String),
    #[error("unsupported operand types for `{op}`: {left} and {right}")]
    Operands { op: &'static str, left: Ty, right: Ty },
    #[error("expected {expected}, found {found}")]
    Mismatch { expected: &'static str, found: Ty },
    #[error("branches of conditional expression have incompatible types {0} and {1}")]
    Branches(Ty, Ty),
}

/// Outcome of looking a name up during evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum Binding {
    Known(Value),
    /// Declared but its value is not known yet (a symbolic block parameter).
    Symbolic,
}

/// Name resolution for [`Expr::eval`].
pub trait Scope {
    /// `name` is either a plain identifier or a dotted path such as `props.stride`.
    fn lookup(&self, name: &str) -> Option<Binding>;
}

/// Name resolution for [`Expr::infer`].
pub trait TypeScope {
    fn type_of(&self, name: &str) -> Option<Ty>;
}

impl<F> Scope for F
where
    F: Fn(&str) -> Option<Binding>,
{
    fn lookup(&self, name: &str) -> Option<Binding> {
        self(name)
    }
}

impl Expr {
    pub fn parse(source: &str) -> Result<Expr, ParseError> {
        let tokens = lex(source)?;
        let mut parser = Parser { tokens, pos: 0, len: source.len() };
        let expr = parser.expr()?;
        match parser.peek() {
            None => Ok(expr),
            Some(tok) => Err(ParseError { offset: tok.offset, message: format!("unexpected `{}`", tok.kind) }),
        }
    }

    pub fn int(v: i64) -> Expr {
        Expr::Lit(Value::Int(v))
    }

    pub fn name(n: impl Into<String>) -> Expr {
        Expr::Name(n.into())
    }

    /// The literal this expression denotes, when it is one (lists of literals included).
    pub fn as_literal(&self) -> Option<Value> {
        match self {
            Expr::Lit(v) => Some(v.clone()),
            Expr::List(items) => items.iter().map(Expr::as_literal).collect::<Option<Vec<_>>>().map(Value::List),
            _ => None,
        }
    }

    pub fn from_literal(value: &Value) -> Expr {
        match value {
            Value::List(items) => Expr::List(items.iter().map(Expr::from_literal).collect()),
            other => Expr::Lit(other.clone()),
        }
    }

    /// Every free name, with `props.x` style paths reported whole.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_names(&mut out);
        out
    }

    fn collect_names(&self, out: &mut Vec<String>) {
        match self {
            Expr::Lit(_) => {}
            Expr::Name(n) => out.push(n.clone()),
            Expr::Attr(base, attr) => match dotted(base) {
                Some(prefix) => out.push(format!("{prefix}.{attr}")),
                None => base.collect_names(out),
            },
            Expr::Index(base, idx) => {
                base.collect_names(out);
                idx.collect_names(out);
            }
            Expr::List(items) => items.iter().for_each(|i| i.collect_names(out)),
            Expr::Unary(_, e) => e.collect_names(out),
            Expr::Binary(_, l, r) => {
                l.collect_names(out);
                r.collect_names(out);
            }
            Expr::Cond { test, then, otherwise } => {
                test.collect_names(out);
                then.collect_names(out);
                otherwise.collect_names(out);
            }
        }
    }

    /// Evaluates under `scope`. `Ok(None)` means the result depends on a
    /// symbolic binding.
    pub fn eval(&self, scope: &dyn Scope) -> Result<Option<Value>, EvalError> {
        match self {
            Expr::Lit(v) => Ok(Some(v.clone())),
            Expr::Name(n) => lookup(scope, n),
            Expr::Attr(base, attr) => match dotted(base) {
                Some(prefix) => lookup(scope, &format!("{prefix}.{attr}")),
                None => Err(EvalError::Undefined(attr.clone())),
            },
            Expr::Index(base, idx) => {
                let (Some(base), Some(idx)) = (base.eval(scope)?, idx.eval(scope)?) else {
                    return Ok(None);
                };
                index_value(&base, &idx).map(Some)
            }
            Expr::List(items) => {
                let mut out = Vec::with_capacity(items.len());
                for item in items {
                    match item.eval(scope)? {
                        Some(v) => out.push(v),
                        None => return Ok(None),
                    }
                }
                Ok(Some(Value::List(out)))
            }
            Expr::Unary(op, e) => {
                let Some(v) = e.eval(scope)? else { return Ok(None) };
                match (op, v) {
                    (UnaryOp::Neg, Value::Int(i)) => i.checked_neg().map(|i| Some(Value::Int(i))).ok_or(EvalError::Overflow),
                    (UnaryOp::Neg, Value::Float(f)) => Ok(Some(Value::Float(-f))),
                    (UnaryOp::Not, Value::Bool(b)) => Ok(Some(Value::Bool(!b))),
                    (UnaryOp::Neg, other) => Err(EvalError::Type { expected: "number", found: other.type_of() }),
                    (UnaryOp::Not, other) => Err(EvalError::Type { expected: "bool", found: other.type_of() }),
                }
            }
            Expr::Binary(op @ (BinOp::And | BinOp::Or), l, r) => {
                let left = l.eval(scope)?;
                if let Some(v) = &left {
                    let b = v.as_bool().ok_or_else(|| EvalError::Type { expected: "bool", found: v.type_of() })?;
                    // short-circuit decides without the right operand
                    if (*op == BinOp::And && !b) || (*op == BinOp::Or && b) {
                        return Ok(Some(Value::Bool(b)));
                    }
                }
                let right = r.eval(scope)?;
                if let Some(v) = &right {
                    let b = v.as_bool().ok_or_else(|| EvalError::Type { expected: "bool", found: v.type_of() })?;
                    if left.is_none() {
                        // `x and False` / `x or True` are decided regardless of x
                        if (*op == BinOp::And && !b) || (*op == BinOp::Or && b) {
                            return Ok(Some(Value::Bool(b)));
                        }
                        return Ok(None);
                    }
                    return Ok(Some(Value::Bool(b)));
                }
                Ok(None)
            }
            Expr::Binary(op, l, r) => {
                let (Some(a), Some(b)) = (l.eval(scope)?, r.eval(scope)?) else {
                    return Ok(None);
                };
                binary(*op, &a, &b).map(Some)
            }
            Expr::Cond { test, then, otherwise } => match test.eval(scope)? {
                Some(Value::Bool(true)) => then.eval(scope),
                Some(Value::Bool(false)) => otherwise.eval(scope),
                Some(other) => Err(EvalError::Type { expected: "bool", found: other.type_of() }),
                None => {
                    let (a, b) = (then.eval(scope)?, otherwise.eval(scope)?);
                    match (a, b) {
                        (Some(a), Some(b)) if a == b => Ok(Some(a)),
                        _ => Ok(None),
                    }
                }
            },
        }
    }

    /// Infers the static type of the expression.
    pub fn infer(&self, scope: &dyn TypeScope) -> Result<Ty, TypeError> {
        match self {
            Expr::Lit(v) => Ok(v.type_of()),
            Expr::Name(n) => scope.type_of(n).ok_or_else(|| TypeError::Undefined(n.clone())),
            Expr::Attr(base, attr) => {
                let path = match dotted(base) {
                    Some(prefix) => format!("{prefix}.{attr}"),
                    None => attr.clone(),
                };
                scope.type_of(&path).ok_or(TypeError::Undefined(path))
            }
            Expr::Index(base, idx) => {
                let idx_ty = idx.infer(scope)?;
                if !matches!(idx_ty, Ty::Int | Ty::Any) {
                    return Err(TypeError::Mismatch { expected: "int index", found: idx_ty });
                }
                match base.infer(scope)? {
                    Ty::List(elem) => Ok(*elem),
                    Ty::Any => Ok(Ty::Any),
                    other => Err(TypeError::Mismatch { expected: "list", found: other }),
                }
            }
            Expr::List(items) => {
                let mut elem = Ty::Any;
                for item in items {
                    let t = item.infer(scope)?;
                    elem = elem.join(&t).ok_or(TypeError::Mismatch { expected: "homogeneous list", found: t })?;
                }
                Ok(Ty::List(Box::new(elem)))
            }
            Expr::Unary(UnaryOp::Neg, e) => match e.infer(scope)? {
                t @ (Ty::Int | Ty::Float | Ty::Any) => Ok(t),
                other => Err(TypeError::Mismatch { expected: "number", found: other }),
            },
            Expr::Unary(UnaryOp::Not, e) => match e.infer(scope)? {
                Ty::Bool | Ty::Any => Ok(Ty::Bool),
                other => Err(TypeError::Mismatch { expected: "bool", found: other }),
            },
            Expr::Binary(op, l, r) => {
                let (a, b) = (l.infer(scope)?, r.infer(scope)?);
                binary_type(*op, a, b)
            }
            Expr::Cond { test, then, otherwise } => {
                match test.infer(scope)? {
                    Ty::Bool | Ty::Any => {}
                    other => return Err(TypeError::Mismatch { expected: "bool condition", found: other }),
                }
                let (a, b) = (then.infer(scope)?, otherwise.infer(scope)?);
                a.join(&b).ok_or(TypeError::Branches(a, b))
            }
        }
    }

    /// Renders the expression, mapping every free name (or dotted path) through `rename`.
    pub fn render_with(&self, rename: &dyn Fn(&str) -> String) -> String {
        let mut out = String::new();
        self.render_into(&mut out, 0, rename);
        out
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Lit(_) | Expr::Name(_) | Expr::List(_) => PREC_ATOM,
            Expr::Attr(..) | Expr::Index(..) => PREC_POSTFIX,
            Expr::Unary(UnaryOp::Neg, _) => PREC_UNARY,
            Expr::Unary(UnaryOp::Not, _) => PREC_NOT,
            Expr::Binary(op, ..) => op.precedence(),
            Expr::Cond { .. } => PREC_TERNARY,
        }
    }

    fn render_into(&self, out: &mut String, min_prec: u8, rename: &dyn Fn(&str) -> String) {
        let parens = self.precedence() < min_prec;
        if parens {
            out.push('(');
        }
        match self {
            Expr::Lit(v) => out.push_str(&v.to_string()),
            Expr::Name(n) => out.push_str(&rename(n)),
            Expr::Attr(base, attr) => match dotted(base) {
                Some(prefix) => out.push_str(&rename(&format!("{prefix}.{attr}"))),
                None => {
                    base.render_into(out, PREC_POSTFIX, rename);
                    out.push('.');
                    out.push_str(attr);
                }
            },
            Expr::Index(base, idx) => {
                base.render_into(out, PREC_POSTFIX, rename);
                out.push('[');
                idx.render_into(out, 0, rename);
                out.push(']');
            }
            Expr::List(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    item.render_into(out, 0, rename);
                }
                out.push(']');
            }
            Expr::Unary(UnaryOp::Neg, e) => {
                out.push('-');
                e.render_into(out, PREC_UNARY, rename);
            }
            Expr::Unary(UnaryOp::Not, e) => {
                out.push_str("not ");
                e.render_into(out, PREC_NOT, rename);
            }
            Expr::Binary(op, l, r) => {
                let p = op.precedence();
                // comparisons do not chain; both sides bind tighter
                let left_min = if op.is_comparison() { p + 1 } else { p };
                l.render_into(out, left_min, rename);
                out.push(' ');
                out.push_str(op.symbol());
                out.push(' ');
                r.render_into(out, p + 1, rename);
            }
            Expr::Cond { test, then, otherwise } => {
                then.render_into(out, PREC_OR, rename);
                out.push_str(" if ");
                test.render_into(out, PREC_OR, rename);
                out.push_str(" else ");
                otherwise.render_into(out, PREC_TERNARY, rename);
            }
        }
        if parens {
            out.push(')');
        }
    }

    /// True when rendering needs no surrounding parentheses to be used as a
    /// call argument or operand.
    pub fn is_atomic(&self) -> bool {
        self.precedence() >= PREC_POSTFIX || matches!(self, Expr::Lit(Value::Int(i)) if *i < 0)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render_with(&|n| n.to_string()))
    }
}

fn dotted(expr: &Expr) -> Option<String> {
    match expr {
        Expr::Name(n) => Some(n.clone()),
        Expr::Attr(base, attr) => dotted(base).map(|p| format!("{p}.{attr}")),
        _ => None,
    }
}

fn lookup(scope: &dyn Scope, name: &str) -> Result<Option<Value>, EvalError> {
    match scope.lookup(name) {
        Some(Binding::Known(v)) => Ok(Some(v)),
        Some(Binding::Symbolic) => Ok(None),
        None => Err(EvalError::Undefined(name.to_string())),
    }
}

fn index_value(base: &Value, idx: &Value) -> Result<Value, EvalError> {
    let Value::List(items) = base else {
        return Err(EvalError::Type { expected: "list", found: base.type_of() });
    };
    let Value::Int(i) = idx else {
        return Err(EvalError::Type { expected: "int index", found: idx.type_of() });
    };
    let len = items.len();
    let pos = if *i < 0 { len as i64 + i } else { *i };
    if pos < 0 || pos as usize >= len {
        return Err(EvalError::IndexOutOfRange { index: *i, len });
    }
    Ok(items[pos as usize].clone())
}

/// Python floor division on integers.
pub fn floor_div(a: i64, b: i64) -> Option<i64> {
    if b == 0 {
        return None;
    }
    let q = a.checked_div(b)?;
    if (a % b != 0) && ((a < 0) != (b < 0)) {
        Some(q - 1)
    } else {
        Some(q)
    }
}

/// Python modulo on integers (result takes the sign of the divisor).
pub fn floor_mod(a: i64, b: i64) -> Option<i64> {
    if b == 0 {
        return None;
    }
    let r = a.checked_rem(b)?;
    if r != 0 && ((r < 0) != (b < 0)) {
        Some(r + b)
    } else {
        Some(r)
    }
}

fn binary(op: BinOp, a: &Value, b: &Value) -> Result<Value, EvalError> {
    use Value::*;
    let operands = || EvalError::Operands { op: op.symbol(), left: a.type_of(), right: b.type_of() };
    match op {
        BinOp::Eq => return Ok(Bool(values_equal(a, b))),
        BinOp::Ne => return Ok(Bool(!values_equal(a, b))),
        BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
            let ord = match (a, b) {
                (Str(x), Str(y)) => x.partial_cmp(y),
                _ => match (a.as_f64(), b.as_f64()) {
                    (Some(x), Some(y)) if !matches!(a, Bool(_)) && !matches!(b, Bool(_)) => match (a, b) {
                        (Int(x), Int(y)) => x.partial_cmp(y),
                        _ => x.partial_cmp(&y),
                    },
                    _ => return Err(operands()),
                },
            };
            let ord = ord.ok_or_else(operands)?;
            let r = match op {
                BinOp::Lt => ord.is_lt(),
                BinOp::Le => ord.is_le(),
                BinOp::Gt => ord.is_gt(),
                _ => ord.is_ge(),
            };
            return Ok(Bool(r));
        }
        _ => {}
    }
    match (a, b) {
        (Int(x), Int(y)) => {
            let (x, y) = (*x, *y);
            let r = match op {
                BinOp::Add => x.checked_add(y),
                BinOp::Sub => x.checked_sub(y),
                BinOp::Mul => x.checked_mul(y),
                BinOp::Div => {
                    if y == 0 {
                        return Err(EvalError::DivisionByZero);
                    }
                    return Ok(Float(x as f64 / y as f64));
                }
                BinOp::FloorDiv => {
                    if y == 0 {
                        return Err(EvalError::DivisionByZero);
                    }
                    floor_div(x, y)
                }
                BinOp::Mod => {
                    if y == 0 {
                        return Err(EvalError::DivisionByZero);
                    }
                    floor_mod(x, y)
                }
                _ => return Err(operands()),
            };
            r.map(Int).ok_or(EvalError::Overflow)
        }
        (Int(_) | Float(_), Int(_) | Float(_)) => {
            let (x, y) = (a.as_f64().unwrap(), b.as_f64().unwrap());
            match op {
                BinOp::Add => Ok(Float(x + y)),
                BinOp::Sub => Ok(Float(x - y)),
                BinOp::Mul => Ok(Float(x * y)),
                BinOp::Div | BinOp::FloorDiv | BinOp::Mod if y == 0.0 => Err(EvalError::DivisionByZero),
                BinOp::Div => Ok(Float(x / y)),
                BinOp::FloorDiv => Ok(Float((x / y).floor())),
                BinOp::Mod => Ok(Float(x - y * (x / y).floor())),
                _ => Err(operands()),
            }
        }
        (Str(x), Str(y)) if op == BinOp::Add => Ok(Str(format!("{x}{y}"))),
        (List(x), List(y)) if op == BinOp::Add => Ok(List(x.iter().chain(y).cloned().collect())),
        _ => Err(operands()),
    }
}

fn values_equal(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Int(_) | Value::Float(_), Value::Int(_) | Value::Float(_)) => a.as_f64() == b.as_f64(),
        _ => a == b,
    }
}

fn binary_type(op: BinOp, a: Ty, b: Ty) -> Result<Ty, TypeError> {
    let operands = |a: Ty, b: Ty| TypeError::Operands { op: op.symbol(), left: a, right: b };
    match op {
        BinOp::And | BinOp::Or => match (&a, &b) {
            (Ty::Bool | Ty::Any, Ty::Bool | Ty::Any) => Ok(Ty::Bool),
            _ => Err(operands(a, b)),
        },
        BinOp::Eq | BinOp::Ne => Ok(Ty::Bool),
        BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
            if (a.is_numeric() && b.is_numeric()) || matches!((&a, &b), (Ty::Str | Ty::Any, Ty::Str | Ty::Any)) {
                Ok(Ty::Bool)
            } else {
                Err(operands(a, b))
            }
        }
        BinOp::Add => match (&a, &b) {
            (Ty::Str, Ty::Str) => Ok(Ty::Str),
            (Ty::List(_), Ty::List(_)) => a.join(&b).ok_or_else(|| operands(a.clone(), b.clone())),
            _ => numeric_result(op, a, b),
        },
        _ => numeric_result(op, a, b),
    }
}

fn numeric_result(op: BinOp, a: Ty, b: Ty) -> Result<Ty, TypeError> {
    if !a.is_numeric() || !b.is_numeric() {
        return Err(TypeError::Operands { op: op.symbol(), left: a, right: b });
    }
    if op == BinOp::Div {
        return Ok(Ty::Float);
    }
    Ok(match (a, b) {
        (Ty::Int, Ty::Int) => Ty::Int,
        (Ty::Float, _) | (_, Ty::Float) => Ty::Float,
        _ => Ty::Any,
    })
}

fn write_literal(f: &mut dyn fmt::Write, value: &Value) -> fmt::Result {
    match value {
        Value::Int(i) => write!(f, "{i}"),
        Value::Float(x) => {
            if x.is_finite() {
                // Debug always keeps a fractional part or exponent, both valid Python
                write!(f, "{x:?}")
            } else if x.is_nan() {
                f.write_str("float('nan')")
            } else if *x > 0.0 {
                f.write_str("float('inf')")
            } else {
                f.write_str("float('-inf')")
            }
        }
        Value::Bool(true) => f.write_str("True"),
        Value::Bool(false) => f.write_str("False"),
        Value::Str(s) => {
            f.write_char('\'')?;
            for c in s.chars() {
                match c {
                    '\\' => f.write_str("\\\\")?,
                    '\'' => f.write_str("\\'")?,
                    '\n' => f.write_str("\\n")?,
                    '\t' => f.write_str("\\t")?,
                    '\r' => f.write_str("\\r")?,
                    c => f.write_char(c)?,
                }
            }
            f.write_char('\'')
        }
        Value::List(items) => {
            f.write_char('[')?;
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                write_literal(f, item)?;
            }
            f.write_char(']')
        }
    }
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Int(i64),
    Float(f64),
    Str(String),
    Ident(String),
    Op(&'static str),
}

impl fmt::Display for TokKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokKind::Int(i) => write!(f, "{i}"),
            TokKind::Float(x) => write!(f, "{x}"),
            TokKind::Str(s) => write!(f, "{s:?}"),
            TokKind::Ident(s) => f.write_str(s),
            TokKind::Op(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokKind,
    offset: usize,
}

const OPERATORS: &[&str] = &["//", "==", "!=", "<=", ">=", "+", "-", "*", "/", "%", "<", ">", "(", ")", "[", "]", ",", "."];

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = src.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'_') {
                i += 1;
            }
            let mut is_float = false;
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                is_float = true;
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            } else if i < bytes.len() && bytes[i] == b'.' && !(i + 1 < bytes.len() && bytes[i + 1].is_ascii_alphabetic()) {
                // `1.` is a float in Python
                is_float = true;
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    is_float = true;
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = src[start..i].chars().filter(|c| *c != '_').collect();
            let kind = if is_float {
                TokKind::Float(text.parse().map_err(|_| ParseError { offset: start, message: format!("invalid number `{text}`") })?)
            } else {
                TokKind::Int(text.parse().map_err(|_| ParseError { offset: start, message: format!("integer `{text}` out of range") })?)
            };
            tokens.push(Token { kind, offset: start });
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            tokens.push(Token { kind: TokKind::Ident(src[start..i].to_string()), offset: start });
            continue;
        }
        if c == b'\'' || c == b'"' {
            let quote = c as char;
            let mut s = String::new();
            let mut chars = src[i + 1..].char_indices();
            let mut closed = None;
            while let Some((k, ch)) = chars.next() {
                match ch {
                    '\\' => match chars.next() {
                        Some((_, 'n')) => s.push('\n'),
                        Some((_, 't')) => s.push('\t'),
                        Some((_, 'r')) => s.push('\r'),
                        Some((_, other)) => s.push(other),
                        None => break,
                    },
                    ch if ch == quote => {
                        closed = Some(i + 1 + k + 1);
                        break;
                    }
                    ch => s.push(ch),
                }
            }
            let Some(end) = closed else {
                return Err(ParseError { offset: start, message: "unterminated string".into() });
            };
            tokens.push(Token { kind: TokKind::Str(s), offset: start });
            i = end;
            continue;
        }
        match OPERATORS.iter().find(|op| src[i..].starts_with(**op)) {
            Some(op) => {
                tokens.push(Token { kind: TokKind::Op(op), offset: start });
                i += op.len();
            }
            None => {
                let ch = src[i..].chars().next().unwrap_or('?');
                return Err(ParseError { offset: start, message: format!("unexpected character `{ch}`") });
            }
        }
    }
    Ok(tokens)
}

// ---------------------------------------------------------------------------
// Parser (recursive descent, Python precedence)

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn offset(&self) -> usize {
        self.peek().map(|t| t.offset).unwrap_or(self.len)
    }

    fn at_op(&self, op: &str) -> bool {
        matches!(self.peek(), Some(Token { kind: TokKind::Op(o), .. }) if *o == op)
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Token { kind: TokKind::Ident(s), .. }) if s == kw)
    }

    fn expect_op(&mut self, op: &str) -> Result<(), ParseError> {
        if self.at_op(op) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(format!("expected `{op}`")))
        }
    }

    fn error(&self, message: String) -> ParseError {
        let message = match self.peek() {
            Some(t) => format!("{message}, found `{}`", t.kind),
            None => format!("{message}, found end of input"),
        };
        ParseError { offset: self.offset(), message }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let then = self.or_expr()?;
        if self.at_keyword("if") {
            self.pos += 1;
            let test = self.or_expr()?;
            if !self.at_keyword("else") {
                return Err(self.error("expected `else`".into()));
            }
            self.pos += 1;
            let otherwise = self.expr()?;
            return Ok(Expr::Cond { test: Box::new(test), then: Box::new(then), otherwise: Box::new(otherwise) });
        }
        Ok(then)
    }

    fn or_expr(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.and_expr()?;
        while self.at_keyword("or") {
            self.pos += 1;
            let right = self.and_expr()?;
            left = Expr::Binary(BinOp::Or, Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn and_expr(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.not_expr()?;
        while self.at_keyword("and") {
            self.pos += 1;
            let right = self.not_expr()?;
            left = Expr::Binary(BinOp::And, Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn not_expr(&mut self) -> Result<Expr, ParseError> {
        if self.at_keyword("not") {
            self.pos += 1;
            let inner = self.not_expr()?;
            return Ok(Expr::Unary(UnaryOp::Not, Box::new(inner)));
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Expr, ParseError> {
        let left = self.arith()?;
        let op = match self.peek() {
            Some(Token { kind: TokKind::Op(o), .. }) => match *o {
                "==" => Some(BinOp::Eq),
                "!=" => Some(BinOp::Ne),
                "<" => Some(BinOp::Lt),
                "<=" => Some(BinOp::Le),
                ">" => Some(BinOp::Gt),
                ">=" => Some(BinOp::Ge),
                _ => None,
            },
            _ => None,
        };
        let Some(op) = op else { return Ok(left) };
        self.pos += 1;
        let right = self.arith()?;
        if matches!(self.peek(), Some(Token { kind: TokKind::Op("==" | "!=" | "<" | "<=" | ">" | ">="), .. })) {
            return Err(self.error("chained comparisons are not supported".into()));
        }
        Ok(Expr::Binary(op, Box::new(left), Box::new(right)))
    }

    fn arith(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.term()?;
        loop {
            let op = if self.at_op("+") {
                BinOp::Add
            } else if self.at_op("-") {
                BinOp::Sub
            } else {
                return Ok(left);
            };
            self.pos += 1;
            let right = self.term()?;
            left = Expr::Binary(op, Box::new(left), Box::new(right));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.factor()?;
        loop {
            let op = if self.at_op("*") {
                BinOp::Mul
            } else if self.at_op("//") {
                BinOp::FloorDiv
            } else if self.at_op("/") {
                BinOp::Div
            } else if self.at_op("%") {
                BinOp::Mod
            } else {
                return Ok(left);
            };
            self.pos += 1;
            let right = self.factor()?;
            left = Expr::Binary(op, Box::new(left), Box::new(right));
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        if self.at_op("-") {
            self.pos += 1;
            let inner = self.factor()?;
            return Ok(Expr::Unary(UnaryOp::Neg, Box::new(inner)));
        }
        if self.at_op("+") {
            self.pos += 1;
            return self.factor();
        }
        self.postfix()
    }

    fn postfix(&mut self) -> Result<Expr, ParseError> {
        let mut base = self.atom()?;
        loop {
            if self.at_op("[") {
                self.pos += 1;
                let idx = self.expr()?;
                self.expect_op("]")?;
                base = Expr::Index(Box::new(base), Box::new(idx));
            } else if self.at_op(".") {
                self.pos += 1;
                match self.peek().cloned() {
                    Some(Token { kind: TokKind::Ident(name), .. }) => {
                        self.pos += 1;
                        base = Expr::Attr(Box::new(base), name);
                    }
                    _ => return Err(self.error("expected attribute name".into())),
                }
            } else {
                return Ok(base);
            }
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let Some(tok) = self.peek().cloned() else {
            return Err(self.error("expected expression".into()));
        };
        match tok.kind {
            TokKind::Int(i) => {
                self.pos += 1;
                Ok(Expr::Lit(Value::Int(i)))
            }
            TokKind::Float(x) => {
                self.pos += 1;
                Ok(Expr::Lit(Value::Float(x)))
            }
            TokKind::Str(s) => {
                self.pos += 1;
                Ok(Expr::Lit(Value::Str(s)))
            }
            TokKind::Ident(name) => match name.as_str() {
                "True" | "true" => {
                    self.pos += 1;
                    Ok(Expr::Lit(Value::Bool(true)))
                }
                "False" | "false" => {
                    self.pos += 1;
                    Ok(Expr::Lit(Value::Bool(false)))
                }
                "if" | "else" | "and" | "or" | "not" => Err(self.error("expected expression".into())),
                _ => {
                    self.pos += 1;
                    Ok(Expr::Name(name))
                }
            },
            TokKind::Op("(") => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect_op(")")?;
                Ok(inner)
            }
            TokKind::Op("[") => {
                self.pos += 1;
                let mut items = Vec::new();
                if !self.at_op("]") {
                    loop {
                        items.push(self.expr()?);
                        if self.at_op(",") {
                            self.pos += 1;
                            if self.at_op("]") {
                                break;
                            }
                        } else {
                            break;
                        }
                    }
                }
                self.expect_op("]")?;
                Ok(Expr::List(items))
            }
            _ => Err(self.error("expected expression".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn env(pairs: &[(&str, Value)]) -> impl Fn(&str) -> Option<Binding> {
        let map: BTreeMap<String, Value> = pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        move |name: &str| map.get(name).cloned().map(Binding::Known)
    }

    fn eval_str(src: &str, scope: &dyn Scope) -> Option<Value> {
        Expr::parse(src).unwrap().eval(scope).unwrap()
    }

    #[test]
    fn python_floor_semantics() {
        let e = env(&[]);
        assert_eq!(eval_str("-7 // 2", &e), Some(Value::Int(-4)));
        assert_eq!(eval_str("7 // -2", &e), Some(Value::Int(-4)));
        assert_eq!(eval_str("-7 % 3", &e), Some(Value::Int(2)));
        assert_eq!(eval_str("7 / 2", &e), Some(Value::Float(3.5)));
        assert_eq!(eval_str("(224 + 2 * 3 - 7) // 2 + 1", &e), Some(Value::Int(112)));
    }

    #[test]
    fn precedence_and_ternary() {
        let e = env(&[("stride", Value::Int(2)), ("inplanes", Value::Int(64)), ("planes", Value::Int(64))]);
        assert_eq!(eval_str("stride != 1 or inplanes != planes * 4", &e), Some(Value::Bool(true)));
        assert_eq!(eval_str("1 if stride == 2 else 0", &e), Some(Value::Int(1)));
        assert_eq!(eval_str("not stride == 2", &e), Some(Value::Bool(false)));
        assert_eq!(eval_str("[3, 4, 6, 3][2]", &e), Some(Value::Int(6)));
        assert_eq!(eval_str("[3, 4, 6, 3][-1]", &e), Some(Value::Int(3)));
    }

    #[test]
    fn symbolic_values_propagate_and_short_circuit() {
        let scope = |name: &str| match name {
            "p" => Some(Binding::Symbolic),
            "t" => Some(Binding::Known(Value::Bool(true))),
            _ => None,
        };
        assert_eq!(eval_str("p * 4", &scope), None);
        assert_eq!(eval_str("t or p", &scope), Some(Value::Bool(true)));
        assert_eq!(eval_str("p and False", &scope), Some(Value::Bool(false)));
        assert_eq!(eval_str("p if t else 3", &scope), None);
        assert_eq!(eval_str("3 if t else p", &scope), Some(Value::Int(3)));
        assert_eq!(Expr::parse("q + 1").unwrap().eval(&scope), Err(EvalError::Undefined("q".into())));
    }

    #[test]
    fn dotted_names() {
        let e = env(&[("props.kernel_size", Value::Int(3))]);
        let expr = Expr::parse("props.kernel_size * 2").unwrap();
        assert_eq!(expr.names(), vec!["props.kernel_size".to_string()]);
        assert_eq!(expr.eval(&e).unwrap(), Some(Value::Int(6)));
    }

    #[test]
    fn rendering_minimal_parens() {
        let cases = [
            ("(a + b) * c", "(a + b) * c"),
            ("a + b * c", "a + b * c"),
            ("a - (b - c)", "a - (b - c)"),
            ("(a - b) - c", "a - b - c"),
            ("-(a + 1)", "-(a + 1)"),
            ("x if c else (y if d else z)", "x if c else y if d else z"),
            ("(x if c else y) + 1", "(x if c else y) + 1"),
            ("not (a and b)", "not (a and b)"),
            ("(a == b) == c", "(a == b) == c"),
            ("'it''s'", "'it'"),
        ];
        for (src, want) in &cases[..9] {
            assert_eq!(Expr::parse(src).unwrap().to_string(), *want, "{src}");
        }
        assert!(Expr::parse(cases[9].0).is_err());
    }

    #[test]
    fn render_renames_free_names() {
        let e = Expr::parse("inplanes if repeat_index == 0 else planes * 4").unwrap();
        let out = e.render_with(&|n| if n == "repeat_index" { n.to_string() } else { format!("self.{n}") });
        assert_eq!(out, "self.inplanes if repeat_index == 0 else self.planes * 4");
    }

    #[test]
    fn typing() {
        struct T;
        impl TypeScope for T {
            fn type_of(&self, name: &str) -> Option<Ty> {
                match name {
                    "n" => Some(Ty::Int),
                    "rate" => Some(Ty::Float),
                    "flag" => Some(Ty::Bool),
                    "layers" => Some(Ty::List(Box::new(Ty::Int))),
                    _ => None,
                }
            }
        }
        let ty = |s: &str| Expr::parse(s).unwrap().infer(&T);
        assert_eq!(ty("n * 4"), Ok(Ty::Int));
        assert_eq!(ty("n * rate"), Ok(Ty::Float));
        assert_eq!(ty("n / 2"), Ok(Ty::Float));
        assert_eq!(ty("layers[0]"), Ok(Ty::Int));
        assert_eq!(ty("n if flag else rate"), Ok(Ty::Float));
        assert!(matches!(ty("flag + 1"), Err(TypeError::Operands { .. })));
        assert!(matches!(ty("n and flag"), Err(TypeError::Operands { .. })));
        assert_eq!(ty("missing"), Err(TypeError::Undefined("missing".into())));
    }

    #[test]
    fn parse_errors() {
        for bad in ["", "1 +", "(1", "a if b", "1 < 2 < 3", "a.", "@", "'open"] {
            assert!(Expr::parse(bad).is_err(), "{bad}");
        }
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0i64..1000).prop_map(Expr::int),
            any::<bool>().prop_map(|b| Expr::Lit(Value::Bool(b))),
            (0u32..1000).prop_map(|x| Expr::Lit(Value::Float(x as f64 / 8.0))),
            "[a-z]{1,3}".prop_filter("keyword", |s| !matches!(s.as_str(), "if" | "or" | "and" | "not")).prop_map(Expr::Name),
            "[a-z ']{0,4}".prop_map(|s| Expr::Lit(Value::Str(s))),
        ];
        leaf.prop_recursive(4, 32, 4, |inner| {
            let ops = prop_oneof![
                Just(BinOp::Add),
                Just(BinOp::Sub),
                Just(BinOp::Mul),
                Just(BinOp::FloorDiv),
                Just(BinOp::Mod),
                Just(BinOp::Div),
                Just(BinOp::Eq),
                Just(BinOp::Lt),
                Just(BinOp::And),
                Just(BinOp::Or),
            ];
            prop_oneof![
                (ops, inner.clone(), inner.clone()).prop_map(|(op, l, r)| Expr::Binary(op, Box::new(l), Box::new(r))),
                inner.clone().prop_map(|e| Expr::Unary(UnaryOp::Neg, Box::new(e))),
                inner.clone().prop_map(|e| Expr::Unary(UnaryOp::Not, Box::new(e))),
                (inner.clone(), inner.clone(), inner.clone()).prop_map(|(t, a, b)| Expr::Cond {
                    test: Box::new(t),
                    then: Box::new(a),
                    otherwise: Box::new(b)
                }),
                (inner.clone(), inner.clone()).prop_map(|(b, i)| Expr::Index(Box::new(b), Box::new(i))),
                prop::collection::vec(inner.clone(), 0..3).prop_map(Expr::List),
                inner.prop_map(|b| Expr::Attr(Box::new(b), "x".into())),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_then_parse_is_identity(e in arb_expr()) {
            let printed = e.to_string();
            let reparsed = Expr::parse(&printed).map_err(|err| TestCaseError::fail(format!("{printed}: {err}")))?;
            prop_assert_eq!(reparsed, e);
        }
    }
}
