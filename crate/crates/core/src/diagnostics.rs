//! Diagnostics and the validation report.
//!
//! Codes are a stable public contract:
//!
//! | code | severity | meaning |
//! |---|---|---|
//! | `GRAPH_CYCLE` | error | nodes form a cycle (all members listed) |
//! | `UNCONNECTED_INPUT` | error | an input port (or block output) has no incoming edge |
//! | `MISSING_JOIN_POLICY` | error | several edges enter one port without a join policy |
//! | `UNUSED_JOIN_POLICY` | warning | a join policy on a port with fewer than two edges |
//! | `DANGLING_OUTPUT` | warning | an output port feeds nothing; the value is computed and dropped |
//! | `UNRESOLVED_COMPONENT` | error | a node refers to a component that does not exist |
//! | `PARAM_MISSING` | error | a required parameter is not bound |
//! | `PARAM_UNKNOWN` | error | a binding names a parameter the component does not declare |
//! | `PARAM_TYPE` | error | a binding does not have the declared type |
//! | `PARAM_RANGE` | error | a binding violates min / max / one_of / shape constraints |
//! | `PARAM_EXPR` | error | a binding, repeat count, condition or local cannot be evaluated |
//! | `SHAPE_MISMATCH` | error | a dimension disagrees with a pattern or across a join |
//! | `SHAPE_RANK_MISMATCH` | error | ranks disagree |
//! | `SHAPE_EVAL` | error | an output shape expression fails or yields a non-positive dimension |
//! | `JOIN_AXIS` | error | a concat axis is out of range |
//! | `REPEAT_COUNT` | error | a repeat count is not a positive integer |
//! | `REPEAT_ARITY` | error | a repeated component has different input and output counts |
//! | `REPEAT_SHAPE` | error | a repeated component's output does not fit its own input |
//! | `BRANCH_SHAPE` | error | the two sides of a conditional node produce incompatible shapes |
//! | `BLOCK_CONTRACT` | error | a block's declared output shape disagrees with its graph |
//! | `VALIDATION_SKIPPED` | warning | a component has no output shape contract; downstream shapes are unknown |
//! | `NO_ENTRY_CONTENT` | warning | the project has no entry block or the entry block is empty |

use std::collections::BTreeMap;
use std::fmt;

use serde_json::{Map, Value as Json};

use crate::shape::{Dim, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Severity {
    Error,
    Warning,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Error => "error",
            Severity::Warning => "warning",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Location {
    /// Component id of the block; empty for project-level diagnostics.
    pub block: String,
    /// Node id, or `Input` / `Output` for the block's own ports.
    pub node: Option<String>,
    pub port: Option<usize>,
    pub param: Option<String>,
}

impl Location {
    pub fn block(block: impl Into<String>) -> Self {
        Self { block: block.into(), ..Default::default() }
    }

    pub fn node(mut self, node: impl Into<String>) -> Self {
        self.node = Some(node.into());
        self
    }

    pub fn port(mut self, port: usize) -> Self {
        self.port = Some(port);
        self
    }

    pub fn param(mut self, param: impl Into<String>) -> Self {
        self.param = Some(param.into());
        self
    }

    pub fn to_json(&self) -> Json {
        let mut m = Map::new();
        m.insert("block".into(), self.block.clone().into());
        if let Some(n) = &self.node {
            m.insert("node".into(), n.clone().into());
        }
        if let Some(p) = self.port {
            m.insert("port".into(), p.into());
        }
        if let Some(p) = &self.param {
            m.insert("param".into(), p.clone().into());
        }
        Json::Object(m)
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.block.is_empty() {
            f.write_str("project")?;
        } else {
            f.write_str(&self.block)?;
        }
        if let Some(n) = &self.node {
            write!(f, " node `{n}`")?;
        }
        if let Some(p) = self.port {
            write!(f, " port {p}")?;
        }
        if let Some(p) = &self.param {
            write!(f, " param `{p}`")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: &'static str,
    pub location: Location,
    pub message: String,
}

impl Diagnostic {
    pub fn error(code: &'static str, location: Location, message: impl Into<String>) -> Self {
        Self { severity: Severity::Error, code, location, message: message.into() }
    }

    pub fn warning(code: &'static str, location: Location, message: impl Into<String>) -> Self {
        Self { severity: Severity::Warning, code, location, message: message.into() }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }

    pub fn to_json(&self) -> Json {
        let mut m = Map::new();
        m.insert("severity".into(), self.severity.as_str().into());
        m.insert("code".into(), self.code.into());
        m.insert("location".into(), self.location.to_json());
        m.insert("message".into(), self.message.clone().into());
        Json::Object(m)
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}] {}: {}", self.severity.as_str(), self.code, self.location, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    /// Ordered by block, then topological node position, then port.
    pub diagnostics: Vec<Diagnostic>,
    /// Output shapes per block, where derivable.
    pub block_outputs: BTreeMap<String, Vec<Shape>>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        !self.diagnostics.iter().any(Diagnostic::is_error)
    }

    pub fn errors(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics.iter().filter(|d| d.is_error())
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics.iter().filter(|d| !d.is_error())
    }

    pub fn has_code(&self, code: &str) -> bool {
        self.diagnostics.iter().any(|d| d.code == code)
    }

    pub fn to_json(&self) -> Json {
        let mut m = Map::new();
        m.insert("format_version".into(), crate::document::FORMAT_VERSION.into());
        m.insert("passed".into(), self.passed().into());
        m.insert("error_count".into(), self.errors().count().into());
        m.insert("warning_count".into(), self.warnings().count().into());
        m.insert("diagnostics".into(), Json::Array(self.diagnostics.iter().map(Diagnostic::to_json).collect()));
        m.insert(
            "block_outputs".into(),
            Json::Object(self.block_outputs.iter().map(|(k, v)| (k.clone(), Json::Array(v.iter().map(shape_to_json).collect()))).collect()),
        );
        Json::Object(m)
    }

    /// Canonical serialized form; byte-identical for identical reports.
    pub fn to_canonical_string(&self) -> String {
        crate::document::to_canonical_string(&self.to_json())
    }

    pub fn render_human(&self) -> String {
        let mut out = String::new();
        for d in &self.diagnostics {
            out.push_str(&d.to_string());
            out.push('\n');
        }
        for (block, shapes) in &self.block_outputs {
            let list: Vec<String> = shapes.iter().map(|s| s.to_string()).collect();
            out.push_str(&format!("{block} -> {}\n", list.join(", ")));
        }
        let errors = self.errors().count();
        let warnings = self.warnings().count();
        out.push_str(&format!(
            "{}: {errors} error{}, {warnings} warning{}\n",
            if self.passed() { "PASS" } else { "FAIL" },
            if errors == 1 { "" } else { "s" },
            if warnings == 1 { "" } else { "s" }
        ));
        out
    }
}

/// `null` for unranked shapes, otherwise a list with `null` for unknown dims.
pub fn shape_to_json(s: &Shape) -> Json {
    match s {
        Shape::Unranked => Json::Null,
        Shape::Ranked(dims) => Json::Array(
            dims.iter()
                .map(|d| match d {
                    Dim::Known(v) => Json::from(*v),
                    Dim::Unknown => Json::Null,
                })
                .collect(),
        ),
    }
}
