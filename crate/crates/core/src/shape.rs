//! Shape contracts: input patterns, output expressions and unification.
//!
//! Shapes flowing through a graph are only partially known. A block whose
//! inputs are symbolic yields dimensions that are [`Dim::Unknown`]; unknown
//! dimensions unify with anything and never produce a mismatch.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::expr::{floor_div, BinOp, Binding, Expr, Scope, UnaryOp, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dim {
    Known(u64),
    Unknown,
}

impl Dim {
    pub fn known(self) -> Option<u64> {
        match self {
            Dim::Known(v) => Some(v),
            Dim::Unknown => None,
        }
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Known(v) => write!(f, "{v}"),
            Dim::Unknown => f.write_str("?"),
        }
    }
}

/// The shape of a value in the graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Shape {
    /// Nothing is known, not even the rank.
    Unranked,
    Ranked(Vec<Dim>),
}

impl Shape {
    pub fn concrete(dims: &[u64]) -> Shape {
        Shape::Ranked(dims.iter().map(|d| Dim::Known(*d)).collect())
    }

    pub fn rank(&self) -> Option<usize> {
        match self {
            Shape::Unranked => None,
            Shape::Ranked(d) => Some(d.len()),
        }
    }

    /// All dimensions, when every one of them is known.
    pub fn as_concrete(&self) -> Option<Vec<u64>> {
        match self {
            Shape::Unranked => None,
            Shape::Ranked(d) => d.iter().map(|d| d.known()).collect(),
        }
    }

    pub fn is_fully_unknown(&self) -> bool {
        match self {
            Shape::Unranked => true,
            Shape::Ranked(d) => d.iter().all(|d| *d == Dim::Unknown),
        }
    }

    /// Whether two shapes may describe the same runtime tensor.
    pub fn compatible(&self, other: &Shape) -> bool {
        self.first_conflict(other).is_none()
    }

    /// The first definite disagreement between two shapes.
    pub fn first_conflict(&self, other: &Shape) -> Option<ShapeConflict> {
        match (self, other) {
            (Shape::Ranked(a), Shape::Ranked(b)) => {
                if a.len() != b.len() {
                    return Some(ShapeConflict::Rank(a.len(), b.len()));
                }
                a.iter().zip(b).enumerate().find_map(|(axis, (x, y))| match (x, y) {
                    (Dim::Known(x), Dim::Known(y)) if x != y => Some(ShapeConflict::Dim { axis, left: *x, right: *y }),
                    _ => None,
                })
            }
            _ => None,
        }
    }

    /// Combines two shapes known to describe the same tensor, keeping every
    /// dimension either side knows.
    pub fn refine(&self, other: &Shape) -> Shape {
        match (self, other) {
            (Shape::Unranked, s) | (s, Shape::Unranked) => s.clone(),
            (Shape::Ranked(a), Shape::Ranked(b)) if a.len() == b.len() => Shape::Ranked(
                a.iter()
                    .zip(b)
                    .map(|(x, y)| match (x, y) {
                        (Dim::Known(v), _) | (_, Dim::Known(v)) => Dim::Known(*v),
                        _ => Dim::Unknown,
                    })
                    .collect(),
            ),
            (a, _) => a.clone(),
        }
    }

    /// What is certain about a value that may be either of two shapes.
    pub fn common(&self, other: &Shape) -> Shape {
        match (self, other) {
            (Shape::Ranked(a), Shape::Ranked(b)) if a.len() == b.len() => {
                Shape::Ranked(a.iter().zip(b).map(|(x, y)| if x == y { *x } else { Dim::Unknown }).collect())
            }
            _ => Shape::Unranked,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Unranked => f.write_str("(?)"),
            Shape::Ranked(dims) => {
                f.write_str("(")?;
                for (i, d) in dims.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{d}")?;
                }
                if dims.len() == 1 {
                    f.write_str(",")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeConflict {
    Rank(usize, usize),
    Dim { axis: usize, left: u64, right: u64 },
}

/// One term of an input shape pattern.
#[derive(Debug, Clone, PartialEq)]
pub enum DimPattern {
    Literal(u64),
    Symbol(String),
    Wildcard,
    /// An expression over `props.<name>` and integers, e.g. `props.in_channels`.
    Param(Expr),
}

impl DimPattern {
    pub fn parse(text: &str) -> Result<DimPattern, String> {
        let t = text.trim();
        if t == "*" {
            return Ok(DimPattern::Wildcard);
        }
        if let Ok(v) = t.parse::<u64>() {
            return if v == 0 { Err("dimension literal must be positive".into()) } else { Ok(DimPattern::Literal(v)) };
        }
        if is_identifier(t) {
            return Ok(DimPattern::Symbol(t.to_string()));
        }
        let expr = Expr::parse(t).map_err(|e| e.to_string())?;
        check_param_expr(&expr, false, 0)?;
        Ok(DimPattern::Param(expr))
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            DimPattern::Literal(v) => serde_json::Value::from(*v),
            DimPattern::Symbol(s) => serde_json::Value::from(s.as_str()),
            DimPattern::Wildcard => serde_json::Value::from("*"),
            DimPattern::Param(e) => serde_json::Value::from(e.to_string()),
        }
    }
}

impl fmt::Display for DimPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DimPattern::Literal(v) => write!(f, "{v}"),
            DimPattern::Symbol(s) => f.write_str(s),
            DimPattern::Wildcard => f.write_str("*"),
            DimPattern::Param(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapePattern(pub Vec<DimPattern>);

impl ShapePattern {
    /// Substitutes parameter values into `props` terms. Terms whose value is
    /// not known become wildcards.
    pub fn resolve(&self, props: &dyn Scope) -> Result<Vec<ResolvedDim>, ShapeEvalError> {
        self.0
            .iter()
            .enumerate()
            .map(|(axis, term)| {
                Ok(match term {
                    DimPattern::Literal(v) => ResolvedDim::Literal(*v),
                    DimPattern::Symbol(s) => ResolvedDim::Symbol(s.clone()),
                    DimPattern::Wildcard => ResolvedDim::Wildcard,
                    DimPattern::Param(expr) => match eval_dim(expr, &[], props)? {
                        Some(v) if v > 0 => ResolvedDim::Literal(v as u64),
                        Some(v) => return Err(ShapeEvalError::NonPositive { axis, value: v }),
                        None => ResolvedDim::Wildcard,
                    },
                })
            })
            .collect()
    }

    /// The shape a value matching this pattern is known to have before any
    /// concrete input arrives (literals known, everything else unknown).
    pub fn symbolic_shape(&self, props: &dyn Scope) -> Shape {
        match self.resolve(props) {
            Ok(dims) => Shape::Ranked(
                dims.iter()
                    .map(|d| match d {
                        ResolvedDim::Literal(v) => Dim::Known(*v),
                        _ => Dim::Unknown,
                    })
                    .collect(),
            ),
            Err(_) => Shape::Ranked(vec![Dim::Unknown; self.0.len()]),
        }
    }
}

impl fmt::Display for ShapePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{d}")?;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResolvedDim {
    Literal(u64),
    Symbol(String),
    Wildcard,
}

impl fmt::Display for ResolvedDim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResolvedDim::Literal(v) => write!(f, "{v}"),
            ResolvedDim::Symbol(s) => f.write_str(s),
            ResolvedDim::Wildcard => f.write_str("*"),
        }
    }
}

/// Symbol assignments accumulated while unifying the inputs of one node.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ShapeBinding(BTreeMap<String, u64>);

impl ShapeBinding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, symbol: &str) -> Option<u64> {
        self.0.get(symbol).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl<const N: usize> From<[(&str, u64); N]> for ShapeBinding {
    fn from(pairs: [(&str, u64); N]) -> Self {
        ShapeBinding(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UnifyError {
    #[error("expected rank {expected}, found rank {found}")]
    Rank { expected: usize, found: usize },
    #[error("axis {axis}: expected {expected}, found {found}")]
    Dim { axis: usize, expected: String, found: u64 },
}

/// Matches a shape against a pattern, extending `binding`.
///
/// A symbol binds at its first known occurrence and must agree everywhere
/// after; `*` matches any single dimension; unknown dimensions match
/// anything and bind nothing.
pub fn unify_shapes(pattern: &[ResolvedDim], shape: &Shape, binding: &ShapeBinding) -> Result<ShapeBinding, UnifyError> {
    let mut out = binding.clone();
    let Shape::Ranked(dims) = shape else {
        return Ok(out);
    };
    if dims.len() != pattern.len() {
        return Err(UnifyError::Rank { expected: pattern.len(), found: dims.len() });
    }
    for (axis, (term, dim)) in pattern.iter().zip(dims).enumerate() {
        let Dim::Known(found) = *dim else { continue };
        match term {
            ResolvedDim::Wildcard => {}
            ResolvedDim::Literal(v) => {
                if *v != found {
                    return Err(UnifyError::Dim { axis, expected: v.to_string(), found });
                }
            }
            ResolvedDim::Symbol(s) => match out.0.get(s) {
                Some(bound) if *bound != found => {
                    return Err(UnifyError::Dim { axis, expected: format!("{s}={bound}"), found });
                }
                Some(_) => {}
                None => {
                    out.0.insert(s.clone(), found);
                }
            },
        }
    }
    Ok(out)
}

/// How one output's shape is computed.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputShape {
    /// Identical to the shape of the given input (`"in[k]"`).
    SameAs(usize),
    /// One expression per dimension over `in[i][j]`, `props.<name>` and integers.
    Dims(Vec<Expr>),
}

impl OutputShape {
    pub fn parse_same_as(text: &str) -> Option<usize> {
        let t = text.trim();
        let inner = t.strip_prefix("in[")?.strip_suffix(']')?;
        inner.trim().parse().ok()
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            OutputShape::SameAs(k) => serde_json::Value::from(format!("in[{k}]")),
            OutputShape::Dims(exprs) => serde_json::Value::Array(
                exprs
                    .iter()
                    .map(|e| match e {
                        Expr::Lit(Value::Int(v)) => serde_json::Value::from(*v),
                        other => serde_json::Value::from(other.to_string()),
                    })
                    .collect(),
            ),
        }
    }

    pub fn eval(&self, inputs: &[Shape], props: &dyn Scope) -> Result<Shape, ShapeEvalError> {
        match self {
            OutputShape::SameAs(k) => inputs.get(*k).cloned().ok_or(ShapeEvalError::NoSuchInput(*k)),
            OutputShape::Dims(exprs) => {
                let mut dims = Vec::with_capacity(exprs.len());
                for (axis, e) in exprs.iter().enumerate() {
                    dims.push(match eval_dim(e, inputs, props)? {
                        Some(v) if v > 0 => Dim::Known(v as u64),
                        Some(v) => return Err(ShapeEvalError::NonPositive { axis, value: v }),
                        None => Dim::Unknown,
                    });
                }
                Ok(Shape::Ranked(dims))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeEvalError {
    #[error("axis {axis} evaluates to {value}, dimensions must be positive")]
    NonPositive { axis: usize, value: i64 },
    #[error("division by zero in shape expression")]
    DivisionByZero,
    #[error("input {0} does not exist")]
    NoSuchInput(usize),
    #[error("input {input} has rank {rank}, axis {axis} does not exist")]
    NoSuchAxis { input: usize, axis: i64, rank: usize },
    #[error("parameter `{0}` is not an integer")]
    NotInteger(String),
    #[error("shape expression overflow")]
    Overflow,
    #[error("unsupported shape expression `{0}`")]
    Unsupported(String),
}

/// Evaluates one dimension expression. `Ok(None)` when it depends on an
/// unknown dimension or a symbolic parameter.
pub fn eval_dim(expr: &Expr, inputs: &[Shape], props: &dyn Scope) -> Result<Option<i64>, ShapeEvalError> {
    match expr {
        Expr::Lit(Value::Int(v)) => Ok(Some(*v)),
        Expr::Index(base, idx) => {
            if let (Expr::Index(inner, input), Expr::Lit(Value::Int(axis))) = (&**base, &**idx) {
                if let (Expr::Name(n), Expr::Lit(Value::Int(i))) = (&**inner, &**input) {
                    if n == "in" {
                        let shape = inputs.get(*i as usize).ok_or(ShapeEvalError::NoSuchInput(*i as usize))?;
                        return match shape {
                            Shape::Unranked => Ok(None),
                            Shape::Ranked(dims) => {
                                let pos = if *axis < 0 { dims.len() as i64 + axis } else { *axis };
                                if pos < 0 || pos as usize >= dims.len() {
                                    return Err(ShapeEvalError::NoSuchAxis { input: *i as usize, axis: *axis, rank: dims.len() });
                                }
                                Ok(dims[pos as usize].known().map(|v| v as i64))
                            }
                        };
                    }
                }
            }
            // props.list[k]
            let value = expr.eval(props).map_err(|_| ShapeEvalError::Unsupported(expr.to_string()))?;
            match value {
                None => Ok(None),
                Some(Value::Int(v)) => Ok(Some(v)),
                Some(_) => Err(ShapeEvalError::NotInteger(expr.to_string())),
            }
        }
        Expr::Attr(..) | Expr::Name(_) => match expr.eval(props) {
            Ok(Some(Value::Int(v))) => Ok(Some(v)),
            Ok(Some(_)) => Err(ShapeEvalError::NotInteger(expr.to_string())),
            Ok(None) => Ok(None),
            Err(_) => Err(ShapeEvalError::Unsupported(expr.to_string())),
        },
        Expr::Unary(UnaryOp::Neg, e) => Ok(match eval_dim(e, inputs, props)? {
            Some(v) => Some(v.checked_neg().ok_or(ShapeEvalError::Overflow)?),
            None => None,
        }),
        Expr::Binary(op @ (BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::FloorDiv), l, r) => {
            let (a, b) = (eval_dim(l, inputs, props)?, eval_dim(r, inputs, props)?);
            if *op == BinOp::FloorDiv && b == Some(0) {
                return Err(ShapeEvalError::DivisionByZero);
            }
            let (Some(a), Some(b)) = (a, b) else { return Ok(None) };
            let v = match op {
                BinOp::Add => a.checked_add(b),
                BinOp::Sub => a.checked_sub(b),
                BinOp::Mul => a.checked_mul(b),
                _ => floor_div(a, b),
            };
            v.map(Some).ok_or(ShapeEvalError::Overflow)
        }
        other => Err(ShapeEvalError::Unsupported(other.to_string())),
    }
}

/// Checks that a dimension expression only uses the shape mini-language:
/// integers, `+ - * //`, unary minus, `props.<name>` (optionally indexed by an
/// integer) and, when `allow_inputs`, `in[i][j]` with `i < input_count`.
pub fn check_param_expr(expr: &Expr, allow_inputs: bool, input_count: usize) -> Result<(), String> {
    match expr {
        Expr::Lit(Value::Int(_)) => Ok(()),
        Expr::Attr(base, _) if matches!(&**base, Expr::Name(n) if n == "props") => Ok(()),
        Expr::Index(base, idx) => {
            if let (Expr::Index(inner, input), Expr::Lit(Value::Int(_))) = (&**base, &**idx) {
                if let (Expr::Name(n), Expr::Lit(Value::Int(i))) = (&**inner, &**input) {
                    if n == "in" {
                        if !allow_inputs {
                            return Err("input shapes cannot be referenced here".into());
                        }
                        if *i < 0 || *i as usize >= input_count {
                            return Err(format!("`{expr}` refers to input {i}, component has {input_count}"));
                        }
                        return Ok(());
                    }
                }
            }
            match (&**base, &**idx) {
                (Expr::Attr(b, _), Expr::Lit(Value::Int(_))) if matches!(&**b, Expr::Name(n) if n == "props") => Ok(()),
                _ => Err(format!("unsupported shape term `{expr}`")),
            }
        }
        Expr::Unary(UnaryOp::Neg, e) => check_param_expr(e, allow_inputs, input_count),
        Expr::Binary(BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::FloorDiv, l, r) => {
            check_param_expr(l, allow_inputs, input_count)?;
            check_param_expr(r, allow_inputs, input_count)
        }
        other => Err(format!("unsupported shape term `{other}`")),
    }
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_') && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// A scope that knows nothing; every lookup fails.
pub struct NoProps;

impl Scope for NoProps {
    fn lookup(&self, _name: &str) -> Option<Binding> {
        None
    }
}
