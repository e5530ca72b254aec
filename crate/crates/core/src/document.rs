//! On-disk JSON documents for components, packages and projects.
//!
//! A project directory is handled as a [`DocumentSet`]: a map from relative
//! path to document. `.json` and `.lock` entries hold JSON values, anything
//! else (package docs) holds a JSON string with the raw text. The same map is
//! the request body format of the HTTP service, so there is a single schema.
//!
//! Serialization is canonical: keys sorted, two-space indentation, trailing
//! newline. Parsing is strict: unknown fields are rejected and every schema
//! error carries the file and the field path.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value as Json};
use thiserror::Error;

use crate::expr::{Expr, Value};
use crate::model::*;
use crate::codegen::python::is_usable_variable;
use crate::shape::{check_param_expr, is_identifier, DimPattern, OutputShape, ShapePattern};
use crate::template::{self, Token};

pub const FORMAT_VERSION: u64 = 1;
pub const PROJECT_MANIFEST: &str = "project.json";
pub const LOCKFILE: &str = "packages.lock";
pub const PACKAGE_MANIFEST: &str = "manifest.json";

pub type DocumentSet = BTreeMap<String, Json>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{file}: {path}: {message}")]
pub struct SchemaError {
    pub file: String,
    /// Dotted field path, e.g. `nodes[2].params.stride`; `$` for the whole document.
    pub path: String,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{file}: malformed document: {message}")]
    Parse { file: String, message: String },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("no {PROJECT_MANIFEST} in {0}")]
    MissingManifest(PathBuf),
    #[error("{file}: {path}: unresolved component `{reference}`")]
    Unresolved { file: String, path: String, reference: String },
    #[error("recursive block instantiation: {}", .cycle.join(" -> "))]
    RecursiveInstantiation { cycle: Vec<String> },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl LoadError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LoadError::Io { path: path.into(), source }
    }

    /// Stable code used by the CLI and the service.
    pub fn code(&self) -> &'static str {
        match self {
            LoadError::Parse { .. } => "PARSE_ERROR",
            LoadError::Schema(_) => "SCHEMA_ERROR",
            LoadError::MissingManifest(_) => "MISSING_MANIFEST",
            LoadError::Unresolved { .. } => "UNRESOLVED_COMPONENT",
            LoadError::RecursiveInstantiation { .. } => "RECURSIVE_INSTANTIATION",
            LoadError::Io { .. } => "IO_ERROR",
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, LoadError::Io { .. })
    }
}

// ---------------------------------------------------------------------------
// canonical text

/// Recursively sorts object keys so output does not depend on map ordering.
pub fn sort_keys(value: &Json) -> Json {
    match value {
        Json::Object(map) => {
            let mut entries: Vec<(&String, &Json)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.cmp(b.0));
            Json::Object(entries.into_iter().map(|(k, v)| (k.clone(), sort_keys(v))).collect())
        }
        Json::Array(items) => Json::Array(items.iter().map(sort_keys).collect()),
        other => other.clone(),
    }
}

pub fn to_canonical_string(value: &Json) -> String {
    let mut out = serde_json::to_string_pretty(&sort_keys(value)).expect("JSON values always serialize");
    out.push('\n');
    out
}

fn is_json_path(path: &str) -> bool {
    path.ends_with(".json") || path.ends_with(".lock")
}

/// Bytes of one entry of a document set as written to disk.
pub fn document_bytes(path: &str, doc: &Json) -> Vec<u8> {
    match (is_json_path(path), doc) {
        (false, Json::String(text)) => text.clone().into_bytes(),
        _ => to_canonical_string(doc).into_bytes(),
    }
}

pub fn parse_document(file: &str, text: &str) -> Result<Json, LoadError> {
    if is_json_path(file) {
        serde_json::from_str(text).map_err(|e| LoadError::Parse { file: file.to_string(), message: e.to_string() })
    } else {
        Ok(Json::String(text.to_string()))
    }
}

// ---------------------------------------------------------------------------
// strict reading helpers

struct Reader<'a> {
    file: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, path: &str, message: impl Into<String>) -> SchemaError {
        SchemaError { file: self.file.to_string(), path: path.to_string(), message: message.into() }
    }

    fn object<'v>(&self, v: &'v Json, path: &str, allowed: &[&str]) -> Result<&'v Map<String, Json>, SchemaError> {
        let map = v.as_object().ok_or_else(|| self.err(path, "expected an object"))?;
        if let Some(k) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(self.err(&join(path, k), "unknown field"));
        }
        Ok(map)
    }

    fn req<'v>(&self, map: &'v Map<String, Json>, path: &str, key: &str) -> Result<&'v Json, SchemaError> {
        map.get(key).ok_or_else(|| self.err(&join(path, key), "missing required field"))
    }

    fn string(&self, v: &Json, path: &str) -> Result<String, SchemaError> {
        v.as_str().map(str::to_string).ok_or_else(|| self.err(path, "expected a string"))
    }

    fn uint(&self, v: &Json, path: &str) -> Result<u64, SchemaError> {
        v.as_u64().ok_or_else(|| self.err(path, "expected a non-negative integer"))
    }

    fn bool(&self, v: &Json, path: &str) -> Result<bool, SchemaError> {
        v.as_bool().ok_or_else(|| self.err(path, "expected a boolean"))
    }

    fn array<'v>(&self, v: &'v Json, path: &str) -> Result<&'v Vec<Json>, SchemaError> {
        v.as_array().ok_or_else(|| self.err(path, "expected an array"))
    }

    fn strings(&self, v: &Json, path: &str) -> Result<Vec<String>, SchemaError> {
        self.array(v, path)?.iter().enumerate().map(|(i, s)| self.string(s, &index(path, i))).collect()
    }

    fn version(&self, map: &Map<String, Json>, path: &str) -> Result<(), SchemaError> {
        let v = self.uint(self.req(map, path, "format_version")?, &join(path, "format_version"))?;
        if v != FORMAT_VERSION {
            return Err(self.err(&join(path, "format_version"), format!("unsupported format version {v} (expected {FORMAT_VERSION})")));
        }
        Ok(())
    }

    fn literal(&self, v: &Json, path: &str) -> Result<Value, SchemaError> {
        if let Some(f) = v.as_f64() {
            if !f.is_finite() {
                return Err(self.err(path, "numbers must be finite"));
            }
        }
        Value::from_json(v).ok_or_else(|| self.err(path, "expected a literal (number, string, boolean or list)"))
    }

    /// A literal or a `"${expression}"` string.
    fn binding(&self, v: &Json, path: &str) -> Result<Expr, SchemaError> {
        if let Some(s) = v.as_str() {
            if let Some(inner) = s.strip_prefix("${").and_then(|r| r.strip_suffix('}')) {
                return Expr::parse(inner).map_err(|e| self.err(path, format!("invalid expression: {e}")));
            }
        }
        self.literal(v, path).map(|v| Expr::from_literal(&v))
    }
}

fn join(path: &str, key: &str) -> String {
    if path == "$" {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn index(path: &str, i: usize) -> String {
    if path == "$" {
        format!("[{i}]")
    } else {
        format!("{path}[{i}]")
    }
}

/// Inverse of [`Reader::binding`].
pub fn binding_to_json(expr: &Expr) -> Json {
    match expr.as_literal() {
        Some(Value::Str(s)) if s.starts_with("${") && s.ends_with('}') => Json::String(format!("${{{expr}}}")),
        Some(v) => v.to_json(),
        None => Json::String(format!("${{{expr}}}")),
    }
}

// ---------------------------------------------------------------------------
// shared component fields

fn read_params(r: &Reader, v: Option<&Json>, path: &str) -> Result<Vec<ParamSpec>, SchemaError> {
    let Some(v) = v else { return Ok(Vec::new()) };
    let mut out: Vec<ParamSpec> = Vec::new();
    for (i, item) in r.array(v, path)?.iter().enumerate() {
        let p = index(path, i);
        let m = r.object(item, &p, &["name", "type", "required", "default", "min", "max", "one_of", "shape", "description"])?;
        let name = r.string(r.req(m, &p, "name")?, &join(&p, "name"))?;
        if !is_identifier(&name) || name == "repeat_index" {
            return Err(r.err(&join(&p, "name"), format!("`{name}` is not a valid parameter name")));
        }
        if out.iter().any(|o| o.name == name) {
            return Err(r.err(&join(&p, "name"), format!("duplicate parameter `{name}`")));
        }
        let tname = r.string(r.req(m, &p, "type")?, &join(&p, "type"))?;
        let ptype = ParamType::parse(&tname).ok_or_else(|| r.err(&join(&p, "type"), format!("unknown parameter type `{tname}`")))?;
        let required = match m.get("required") {
            Some(b) => r.bool(b, &join(&p, "required"))?,
            None => false,
        };
        let lit = |key: &str| -> Result<Option<Value>, SchemaError> { m.get(key).map(|v| r.literal(v, &join(&p, key))).transpose() };
        let mut spec = ParamSpec::new(name, ptype);
        spec.required = required;
        spec.constraints.min = lit("min")?;
        spec.constraints.max = lit("max")?;
        for key in ["min", "max"] {
            let v = if key == "min" { &spec.constraints.min } else { &spec.constraints.max };
            if v.as_ref().is_some_and(|v| v.as_f64().is_none()) {
                return Err(r.err(&join(&p, key), "bound must be a number"));
            }
            if v.is_some() && matches!(ptype, ParamType::String | ParamType::Bool) {
                return Err(r.err(&join(&p, key), format!("bounds do not apply to {ptype} parameters")));
            }
        }
        if let Some(list) = m.get("one_of") {
            let lp = join(&p, "one_of");
            let mut options = Vec::new();
            for (j, o) in r.array(list, &lp)?.iter().enumerate() {
                let v = r.literal(o, &index(&lp, j))?;
                if !ptype.accepts_value(&v) {
                    return Err(r.err(&index(&lp, j), format!("{v} is not a valid {ptype}")));
                }
                options.push(v);
            }
            if options.is_empty() {
                return Err(r.err(&lp, "must list at least one value"));
            }
            spec.constraints.one_of = Some(options);
        }
        if let Some(s) = m.get("shape") {
            if !matches!(ptype, ParamType::Shape | ParamType::IntList) {
                return Err(r.err(&join(&p, "shape"), format!("shape constraints do not apply to {ptype} parameters")));
            }
            let pattern = read_pattern(r, s, &join(&p, "shape"))?;
            if pattern.0.iter().any(|d| matches!(d, DimPattern::Param(_))) {
                return Err(r.err(&join(&p, "shape"), "parameter shape constraints cannot refer to other parameters"));
            }
            spec.constraints.shape = Some(pattern);
        }
        if let Some(d) = m.get("description") {
            spec.description = Some(r.string(d, &join(&p, "description"))?);
        }
        if let Some(d) = m.get("default") {
            let dp = join(&p, "default");
            let v = r.literal(d, &dp)?;
            if !ptype.accepts_value(&v) {
                return Err(r.err(&dp, format!("{v} is not a valid {ptype}")));
            }
            let v = match (ptype, v) {
                (ParamType::Float, Value::Int(i)) => Value::Float(i as f64),
                (_, v) => v,
            };
            spec.constraints.check(&v).map_err(|e| r.err(&dp, e))?;
            spec.default = Some(v);
        }
        out.push(spec);
    }
    Ok(out)
}

fn params_to_json(params: &[ParamSpec]) -> Json {
    Json::Array(
        params
            .iter()
            .map(|p| {
                let mut m = Map::new();
                m.insert("name".into(), p.name.clone().into());
                m.insert("type".into(), p.ptype.as_str().into());
                m.insert("required".into(), p.required.into());
                if let Some(d) = &p.default {
                    m.insert("default".into(), d.to_json());
                }
                if let Some(v) = &p.constraints.min {
                    m.insert("min".into(), v.to_json());
                }
                if let Some(v) = &p.constraints.max {
                    m.insert("max".into(), v.to_json());
                }
                if let Some(o) = &p.constraints.one_of {
                    m.insert("one_of".into(), Json::Array(o.iter().map(Value::to_json).collect()));
                }
                if let Some(s) = &p.constraints.shape {
                    m.insert("shape".into(), pattern_to_json(s));
                }
                if let Some(d) = &p.description {
                    m.insert("description".into(), d.clone().into());
                }
                Json::Object(m)
            })
            .collect(),
    )
}

fn read_pattern(r: &Reader, v: &Json, path: &str) -> Result<ShapePattern, SchemaError> {
    let items = r.array(v, path)?;
    let mut dims = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let p = index(path, i);
        let text = match item {
            Json::Number(n) => n.to_string(),
            Json::String(s) => s.clone(),
            _ => return Err(r.err(&p, "expected an integer, a symbol, `*` or a parameter expression")),
        };
        dims.push(DimPattern::parse(&text).map_err(|e| r.err(&p, e))?);
    }
    Ok(ShapePattern(dims))
}

fn pattern_to_json(p: &ShapePattern) -> Json {
    Json::Array(p.0.iter().map(DimPattern::to_json).collect())
}

fn read_output_shape(r: &Reader, v: &Json, path: &str, input_count: usize) -> Result<OutputShape, SchemaError> {
    if let Some(s) = v.as_str() {
        let k = OutputShape::parse_same_as(s).ok_or_else(|| r.err(path, "expected `in[k]` or a list of dimension expressions"))?;
        if k >= input_count {
            return Err(r.err(path, format!("input {k} does not exist")));
        }
        return Ok(OutputShape::SameAs(k));
    }
    let mut exprs = Vec::new();
    for (i, item) in r.array(v, path)?.iter().enumerate() {
        let p = index(path, i);
        let e = match item {
            Json::Number(n) => Expr::parse(&n.to_string()),
            Json::String(s) => Expr::parse(s),
            _ => return Err(r.err(&p, "expected a dimension expression")),
        }
        .map_err(|e| r.err(&p, format!("invalid expression: {e}")))?;
        check_param_expr(&e, true, input_count).map_err(|m| r.err(&p, m))?;
        exprs.push(e);
    }
    Ok(OutputShape::Dims(exprs))
}

struct Contract {
    input_patterns: Option<Vec<ShapePattern>>,
    output_exprs: Option<Vec<OutputShape>>,
}

fn read_contract(r: &Reader, m: &Map<String, Json>, inputs: usize, outputs: usize, params: &[ParamSpec]) -> Result<Contract, SchemaError> {
    let input_patterns = match m.get("input_shapes") {
        None => None,
        Some(v) => {
            let items = r.array(v, "input_shapes")?;
            if items.len() != inputs {
                return Err(r.err("input_shapes", format!("expected {inputs} patterns (one per input), found {}", items.len())));
            }
            Some(items.iter().enumerate().map(|(i, p)| read_pattern(r, p, &index("input_shapes", i))).collect::<Result<Vec<_>, _>>()?)
        }
    };
    let output_exprs = match m.get("output_shapes") {
        None => None,
        Some(v) => {
            let items = r.array(v, "output_shapes")?;
            if items.len() != outputs {
                return Err(r.err("output_shapes", format!("expected {outputs} shapes (one per output), found {}", items.len())));
            }
            Some(items.iter().enumerate().map(|(i, e)| read_output_shape(r, e, &index("output_shapes", i), inputs)).collect::<Result<Vec<_>, _>>()?)
        }
    };
    let known = |name: &str, path: &str| -> Result<(), SchemaError> {
        match name.strip_prefix("props.") {
            Some(p) if params.iter().any(|s| s.name == p) => Ok(()),
            Some(p) => Err(r.err(path, format!("unknown parameter `{p}`"))),
            None if name == "in" => Ok(()),
            None => Err(r.err(path, format!("unknown name `{name}`"))),
        }
    };
    for (i, pat) in input_patterns.iter().flatten().enumerate() {
        for (j, d) in pat.0.iter().enumerate() {
            if let DimPattern::Param(e) = d {
                for n in e.names() {
                    known(&n, &index(&index("input_shapes", i), j))?;
                }
            }
        }
    }
    for (i, out) in output_exprs.iter().flatten().enumerate() {
        if let OutputShape::Dims(exprs) = out {
            for (j, e) in exprs.iter().enumerate() {
                for n in e.names() {
                    known(&n, &index(&index("output_shapes", i), j))?;
                }
            }
        }
    }
    Ok(Contract { input_patterns, output_exprs })
}

fn contract_to_json(m: &mut Map<String, Json>, patterns: &Option<Vec<ShapePattern>>, outputs: &Option<Vec<OutputShape>>) {
    if let Some(p) = patterns {
        m.insert("input_shapes".into(), Json::Array(p.iter().map(pattern_to_json).collect()));
    }
    if let Some(o) = outputs {
        m.insert("output_shapes".into(), Json::Array(o.iter().map(OutputShape::to_json).collect()));
    }
}

fn read_id(r: &Reader, m: &Map<String, Json>) -> Result<ComponentId, SchemaError> {
    let s = r.string(r.req(m, "$", "id")?, "id")?;
    s.parse().map_err(|e: String| r.err("id", e))
}

fn read_kind(r: &Reader, m: &Map<String, Json>, expected: &str) -> Result<(), SchemaError> {
    let kind = r.string(r.req(m, "$", "kind")?, "kind")?;
    if kind != expected {
        return Err(r.err("kind", format!("expected `{expected}`, found `{kind}`")));
    }
    Ok(())
}

fn read_count(r: &Reader, m: &Map<String, Json>, key: &str, min: u64) -> Result<usize, SchemaError> {
    let n = r.uint(r.req(m, "$", key)?, key)?;
    if n < min {
        return Err(r.err(key, format!("must be at least {min}")));
    }
    if n > 64 {
        return Err(r.err(key, "at most 64 ports are supported"));
    }
    Ok(n as usize)
}

// ---------------------------------------------------------------------------
// mutators

const MUTATOR_FIELDS: &[&str] =
    &["format_version", "kind", "id", "imports", "inputs", "outputs", "input_shapes", "output_shapes", "params", "init", "forward", "extra"];

fn check_template(r: &Reader, field: &str, text: &str, m: &Mutator) -> Result<(), SchemaError> {
    let tokens = template::tokens(text).map_err(|e| r.err(field, e.to_string()))?;
    for t in tokens {
        let bad = match &t {
            Token::Name | Token::RepeatIndex => None,
            Token::Input(k) if *k >= m.input_count => Some(format!("{t} refers to input {k}, the mutator has {} inputs", m.input_count)),
            Token::Output(k) if *k >= m.output_count => Some(format!("{t} refers to output {k}, the mutator has {} outputs", m.output_count)),
            Token::Prop(p) if !m.params.iter().any(|s| &s.name == p) => Some(format!("{t} refers to an undeclared parameter")),
            _ => None,
        };
        if let Some(msg) = bad {
            return Err(r.err(field, msg));
        }
    }
    Ok(())
}

pub fn mutator_from_json(file: &str, doc: &Json) -> Result<Mutator, SchemaError> {
    let r = Reader { file };
    let m = r.object(doc, "$", MUTATOR_FIELDS)?;
    r.version(m, "$")?;
    read_kind(&r, m, "mutator")?;
    let id = read_id(&r, m)?;
    let imports = match m.get("imports") {
        Some(v) => r.strings(v, "imports")?,
        None => Vec::new(),
    };
    for (i, imp) in imports.iter().enumerate() {
        if imp.trim().is_empty() || imp.contains('\n') {
            return Err(r.err(&index("imports", i), "imports must be single non-empty statements"));
        }
    }
    let input_count = read_count(&r, m, "inputs", 0)?;
    let output_count = read_count(&r, m, "outputs", 1)?;
    let params = read_params(&r, m.get("params"), "params")?;
    let contract = read_contract(&r, m, input_count, output_count, &params)?;
    let init_code = r.string(r.req(m, "$", "init")?, "init")?;
    let forward_code = r.string(r.req(m, "$", "forward")?, "forward")?;
    for (k, v) in [("init", &init_code), ("forward", &forward_code)] {
        if v.trim().is_empty() {
            return Err(r.err(k, "must not be empty"));
        }
    }
    let extra_code = m.get("extra").map(|v| r.string(v, "extra")).transpose()?;
    let mutator = Mutator {
        id,
        imports,
        input_count,
        output_count,
        input_patterns: contract.input_patterns,
        output_exprs: contract.output_exprs,
        params,
        init_code,
        forward_code,
        extra_code,
    };
    check_template(&r, "init", &mutator.init_code, &mutator)?;
    check_template(&r, "forward", &mutator.forward_code, &mutator)?;
    if let Some(extra) = &mutator.extra_code {
        let tokens = template::tokens(extra).map_err(|e| r.err("extra", e.to_string()))?;
        if let Some(t) = tokens.first() {
            return Err(r.err("extra", format!("{t} is not allowed in module-level code")));
        }
    }
    Ok(mutator)
}

pub fn mutator_to_json(m: &Mutator) -> Json {
    let mut o = Map::new();
    o.insert("format_version".into(), FORMAT_VERSION.into());
    o.insert("kind".into(), "mutator".into());
    o.insert("id".into(), m.id.to_string().into());
    o.insert("imports".into(), Json::Array(m.imports.iter().map(|s| Json::from(s.as_str())).collect()));
    o.insert("inputs".into(), m.input_count.into());
    o.insert("outputs".into(), m.output_count.into());
    contract_to_json(&mut o, &m.input_patterns, &m.output_exprs);
    o.insert("params".into(), params_to_json(&m.params));
    o.insert("init".into(), m.init_code.clone().into());
    o.insert("forward".into(), m.forward_code.clone().into());
    if let Some(e) = &m.extra_code {
        o.insert("extra".into(), e.clone().into());
    }
    Json::Object(o)
}

// ---------------------------------------------------------------------------
// blocks

const BLOCK_FIELDS: &[&str] =
    &["format_version", "kind", "id", "inputs", "outputs", "input_shapes", "output_shapes", "params", "locals", "nodes", "edges", "output_joins"];
const NODE_FIELDS: &[&str] = &["id", "component", "params", "repeat", "kind", "condition", "else_component", "else_params", "joins", "layout"];

fn read_bindings(r: &Reader, v: Option<&Json>, path: &str) -> Result<BTreeMap<String, Expr>, SchemaError> {
    let mut out = BTreeMap::new();
    let Some(v) = v else { return Ok(out) };
    let map = v.as_object().ok_or_else(|| r.err(path, "expected an object"))?;
    for (k, v) in map {
        let p = join(path, k);
        if !is_identifier(k) {
            return Err(r.err(&p, format!("`{k}` is not a valid parameter name")));
        }
        out.insert(k.clone(), r.binding(v, &p)?);
    }
    Ok(out)
}

fn bindings_to_json(b: &BTreeMap<String, Expr>) -> Json {
    Json::Object(b.iter().map(|(k, v)| (k.clone(), binding_to_json(v))).collect())
}

fn read_joins(r: &Reader, v: Option<&Json>, path: &str, ports: Option<usize>) -> Result<BTreeMap<usize, JoinPolicy>, SchemaError> {
    let mut out = BTreeMap::new();
    let Some(v) = v else { return Ok(out) };
    let map = v.as_object().ok_or_else(|| r.err(path, "expected an object keyed by input port"))?;
    for (k, v) in map {
        let p = join(path, k);
        let port: usize = k.parse().ok().filter(|_| k == "0" || !k.starts_with('0')).ok_or_else(|| r.err(&p, "keys must be port indices"))?;
        if ports.is_some_and(|n| port >= n) {
            return Err(r.err(&p, format!("port {port} does not exist")));
        }
        let m = r.object(v, &p, &["op", "axis"])?;
        let op = match r.string(r.req(m, &p, "op")?, &join(&p, "op"))?.as_str() {
            "add" => JoinOp::Add,
            "concat" => JoinOp::Concat,
            "multiply" => JoinOp::Multiply,
            other => return Err(r.err(&join(&p, "op"), format!("unknown join operation `{other}` (add, concat or multiply)"))),
        };
        let axis = match (op, m.get("axis")) {
            (JoinOp::Concat, Some(a)) => Some(a.as_i64().ok_or_else(|| r.err(&join(&p, "axis"), "expected an integer"))?),
            (JoinOp::Concat, None) => return Err(r.err(&join(&p, "axis"), "concat requires an axis")),
            (_, Some(_)) => return Err(r.err(&join(&p, "axis"), "axis applies to concat only")),
            (_, None) => None,
        };
        out.insert(port, JoinPolicy { op, axis });
    }
    Ok(out)
}

fn joins_to_json(j: &BTreeMap<usize, JoinPolicy>) -> Json {
    Json::Object(
        j.iter()
            .map(|(port, p)| {
                let mut m = Map::new();
                m.insert("op".into(), p.op.as_str().into());
                if let Some(a) = p.axis {
                    m.insert("axis".into(), a.into());
                }
                (port.to_string(), Json::Object(m))
            })
            .collect(),
    )
}

fn read_ref(r: &Reader, v: &Json, path: &str) -> Result<ComponentRef, SchemaError> {
    r.string(v, path)?.parse().map_err(|e: String| r.err(path, e))
}

fn read_node(r: &Reader, v: &Json, path: &str) -> Result<NodeInstance, SchemaError> {
    let m = r.object(v, path, NODE_FIELDS)?;
    let id = r.string(r.req(m, path, "id")?, &join(path, "id"))?;
    if !is_identifier(&id) || id == "Input" || id == "Output" {
        return Err(r.err(&join(path, "id"), format!("`{id}` is not a valid node id")));
    }
    let component = read_ref(r, r.req(m, path, "component")?, &join(path, "component"))?;
    let params = read_bindings(r, m.get("params"), &join(path, "params"))?;
    let repeat = match m.get("repeat") {
        None => None,
        Some(v) => {
            let p = join(path, "repeat");
            let e = r.binding(v, &p)?;
            if let Some(lit) = e.as_literal() {
                match lit.as_int() {
                    Some(n) if n >= 1 => {}
                    _ => return Err(r.err(&p, format!("repeat must be a positive integer, found {lit}"))),
                }
            }
            Some(e)
        }
    };
    let kind = match m.get("kind") {
        None => NodeKind::Normal,
        Some(k) => match r.string(k, &join(path, "kind"))?.as_str() {
            "normal" => NodeKind::Normal,
            "conditional" => NodeKind::Conditional,
            other => return Err(r.err(&join(path, "kind"), format!("unknown node kind `{other}`"))),
        },
    };
    let conditional = match kind {
        NodeKind::Normal => {
            for key in ["condition", "else_component", "else_params"] {
                if m.contains_key(key) {
                    return Err(r.err(&join(path, key), "only conditional nodes take this field"));
                }
            }
            None
        }
        NodeKind::Conditional => {
            let condition = r.binding(r.req(m, path, "condition")?, &join(path, "condition"))?;
            let else_component = read_ref(r, r.req(m, path, "else_component")?, &join(path, "else_component"))?;
            let else_params = read_bindings(r, m.get("else_params"), &join(path, "else_params"))?;
            if repeat.is_some() {
                return Err(r.err(&join(path, "repeat"), "conditional nodes cannot be repeated"));
            }
            Some(Conditional { condition, else_component, else_params })
        }
    };
    let joins = read_joins(r, m.get("joins"), &join(path, "joins"), None)?;
    let layout = match m.get("layout") {
        None => None,
        Some(l) => {
            let p = join(path, "layout");
            let lm = r.object(l, &p, &["x", "y"])?;
            let num = |k: &str| -> Result<f64, SchemaError> {
                r.req(lm, &p, k)?.as_f64().filter(|f| f.is_finite()).ok_or_else(|| r.err(&join(&p, k), "expected a number"))
            };
            Some(LayoutHint { x: num("x")?, y: num("y")? })
        }
    };
    Ok(NodeInstance { id, component, params, repeat, conditional, joins, layout })
}

fn node_to_json(n: &NodeInstance) -> Json {
    let mut m = Map::new();
    m.insert("id".into(), n.id.clone().into());
    m.insert("component".into(), n.component.to_string().into());
    m.insert("params".into(), bindings_to_json(&n.params));
    if let Some(r) = &n.repeat {
        m.insert("repeat".into(), binding_to_json(r));
    }
    if let Some(c) = &n.conditional {
        m.insert("kind".into(), "conditional".into());
        m.insert("condition".into(), binding_to_json(&c.condition));
        m.insert("else_component".into(), c.else_component.to_string().into());
        m.insert("else_params".into(), bindings_to_json(&c.else_params));
    }
    if !n.joins.is_empty() {
        m.insert("joins".into(), joins_to_json(&n.joins));
    }
    if let Some(l) = &n.layout {
        let mut lm = Map::new();
        lm.insert("x".into(), l.x.into());
        lm.insert("y".into(), l.y.into());
        m.insert("layout".into(), Json::Object(lm));
    }
    Json::Object(m)
}

fn read_edge(r: &Reader, v: &Json, path: &str) -> Result<Edge, SchemaError> {
    let m = r.object(v, path, &["from", "to", "branch"])?;
    let endpoint = |key: &str| -> Result<Endpoint, SchemaError> {
        let p = join(path, key);
        r.string(r.req(m, path, key)?, &p)?.parse().map_err(|e: String| r.err(&p, e))
    };
    let from = endpoint("from")?;
    let to = endpoint("to")?;
    if from.node == NodeRef::Output {
        return Err(r.err(&join(path, "from"), "edges cannot leave the Output node"));
    }
    if to.node == NodeRef::Input {
        return Err(r.err(&join(path, "to"), "edges cannot enter the Input node"));
    }
    let branch = match m.get("branch") {
        None => Branch::None,
        Some(b) => match r.string(b, &join(path, "branch"))?.as_str() {
            "true" => Branch::True,
            "false" => Branch::False,
            "none" => Branch::None,
            other => return Err(r.err(&join(path, "branch"), format!("unknown branch `{other}` (true or false)"))),
        },
    };
    Ok(Edge { from, to, branch })
}

fn edge_to_json(e: &Edge) -> Json {
    let mut m = Map::new();
    m.insert("from".into(), e.from.to_string().into());
    m.insert("to".into(), e.to.to_string().into());
    match e.branch {
        Branch::None => {}
        Branch::True => {
            m.insert("branch".into(), "true".into());
        }
        Branch::False => {
            m.insert("branch".into(), "false".into());
        }
    }
    Json::Object(m)
}

/// Parses a block document. With `reject_cycles` a cyclic edge set is a schema
/// error; otherwise cycles are left for validation to report.
pub fn block_from_json(file: &str, doc: &Json, reject_cycles: bool) -> Result<Block, SchemaError> {
    let r = Reader { file };
    let m = r.object(doc, "$", BLOCK_FIELDS)?;
    r.version(m, "$")?;
    read_kind(&r, m, "block")?;
    let id = read_id(&r, m)?;
    let input_count = read_count(&r, m, "inputs", 0)?;
    let output_count = read_count(&r, m, "outputs", 1)?;
    let params = read_params(&r, m.get("params"), "params")?;
    // block parameters and locals become Python variables of the generated class
    for (i, p) in params.iter().enumerate() {
        if !is_usable_variable(&p.name) {
            return Err(r.err(&join(&index("params", i), "name"), format!("`{}` is reserved in generated code", p.name)));
        }
    }
    let contract = read_contract(&r, m, input_count, output_count, &params)?;

    let mut locals: Vec<LocalVar> = Vec::new();
    if let Some(v) = m.get("locals") {
        for (i, item) in r.array(v, "locals")?.iter().enumerate() {
            let p = index("locals", i);
            let lm = r.object(item, &p, &["name", "value"])?;
            let name = r.string(r.req(lm, &p, "name")?, &join(&p, "name"))?;
            if !is_identifier(&name) || !is_usable_variable(&name) {
                return Err(r.err(&join(&p, "name"), format!("`{name}` is not a valid variable name")));
            }
            if params.iter().any(|s| s.name == name) || locals.iter().any(|l| l.name == name) {
                return Err(r.err(&join(&p, "name"), format!("`{name}` is already defined")));
            }
            let value = r.binding(r.req(lm, &p, "value")?, &join(&p, "value"))?;
            for n in value.names() {
                if !params.iter().any(|s| s.name == n) && !locals.iter().any(|l| l.name == n) {
                    return Err(r.err(&join(&p, "value"), format!("`{n}` is not a block parameter or an earlier variable")));
                }
            }
            locals.push(LocalVar { name, value });
        }
    }

    let mut nodes: Vec<NodeInstance> = Vec::new();
    if let Some(v) = m.get("nodes") {
        for (i, item) in r.array(v, "nodes")?.iter().enumerate() {
            let p = index("nodes", i);
            let node = read_node(&r, item, &p)?;
            if nodes.iter().any(|n| n.id == node.id) {
                return Err(r.err(&join(&p, "id"), format!("duplicate node id `{}`", node.id)));
            }
            nodes.push(node);
        }
    }

    let mut edges: Vec<Edge> = Vec::new();
    if let Some(v) = m.get("edges") {
        for (i, item) in r.array(v, "edges")?.iter().enumerate() {
            let p = index("edges", i);
            let edge = read_edge(&r, item, &p)?;
            for (key, ep) in [("from", &edge.from), ("to", &edge.to)] {
                let ok = match &ep.node {
                    NodeRef::Input => ep.port < input_count,
                    NodeRef::Output => ep.port < output_count,
                    NodeRef::Node(n) => nodes.iter().any(|x| &x.id == n),
                };
                if !ok {
                    let msg = match &ep.node {
                        NodeRef::Node(n) => format!("no node named `{n}`"),
                        _ => format!("port {} does not exist on {}", ep.port, ep.node),
                    };
                    return Err(r.err(&join(&p, key), msg));
                }
            }
            let into_conditional = matches!(&edge.to.node, NodeRef::Node(n) if nodes.iter().any(|x| &x.id == n && x.conditional.is_some()));
            match (into_conditional, edge.branch) {
                (true, Branch::None) => return Err(r.err(&join(&p, "branch"), "edges into a conditional node must name the true or false side")),
                (false, Branch::True | Branch::False) => {
                    return Err(r.err(&join(&p, "branch"), "only edges into a conditional node carry a branch"))
                }
                _ => {}
            }
            if edges.iter().any(|e| e == &edge) {
                return Err(r.err(&p, "duplicate edge"));
            }
            edges.push(edge);
        }
    }
    let output_joins = read_joins(&r, m.get("output_joins"), "output_joins", Some(output_count))?;

    let block = Block {
        id,
        input_count,
        output_count,
        input_patterns: contract.input_patterns,
        output_exprs: contract.output_exprs,
        params,
        locals,
        nodes,
        edges,
        output_joins,
    };
    if reject_cycles {
        if let Some(cycle) = crate::validate::graph::find_cycles(&block).into_iter().next() {
            return Err(r.err("edges", format!("edges form a cycle through {}", cycle.join(", "))));
        }
    }
    Ok(block)
}

pub fn block_to_json(b: &Block) -> Json {
    let mut o = Map::new();
    o.insert("format_version".into(), FORMAT_VERSION.into());
    o.insert("kind".into(), "block".into());
    o.insert("id".into(), b.id.to_string().into());
    o.insert("inputs".into(), b.input_count.into());
    o.insert("outputs".into(), b.output_count.into());
    contract_to_json(&mut o, &b.input_patterns, &b.output_exprs);
    o.insert("params".into(), params_to_json(&b.params));
    o.insert(
        "locals".into(),
        Json::Array(
            b.locals
                .iter()
                .map(|l| {
                    let mut m = Map::new();
                    m.insert("name".into(), l.name.clone().into());
                    m.insert("value".into(), binding_to_json(&l.value));
                    Json::Object(m)
                })
                .collect(),
        ),
    );
    o.insert("nodes".into(), Json::Array(b.nodes.iter().map(node_to_json).collect()));
    o.insert("edges".into(), Json::Array(b.edges.iter().map(edge_to_json).collect()));
    if !b.output_joins.is_empty() {
        o.insert("output_joins".into(), joins_to_json(&b.output_joins));
    }
    Json::Object(o)
}

pub fn component_from_json(file: &str, doc: &Json, reject_cycles: bool) -> Result<Component, SchemaError> {
    let kind = doc.get("kind").and_then(Json::as_str);
    match kind {
        Some("mutator") => mutator_from_json(file, doc).map(Component::Mutator),
        Some("block") => block_from_json(file, doc, reject_cycles).map(Component::Block),
        Some(other) => Err(SchemaError { file: file.into(), path: "kind".into(), message: format!("unknown component kind `{other}`") }),
        None if doc.is_object() => Err(SchemaError { file: file.into(), path: "kind".into(), message: "missing required field".into() }),
        None => Err(SchemaError { file: file.into(), path: "$".into(), message: "expected an object".into() }),
    }
}

pub fn component_to_json(c: &Component) -> Json {
    match c {
        Component::Mutator(m) => mutator_to_json(m),
        Component::Block(b) => block_to_json(b),
    }
}

/// Parses one component document. Block edges must form a DAG.
pub fn load_component(text: &str) -> Result<Component, LoadError> {
    let doc: Json = serde_json::from_str(text).map_err(|e| LoadError::Parse { file: "<component>".into(), message: e.to_string() })?;
    Ok(component_from_json("<component>", &doc, true)?)
}

pub fn component_file_name(id: &ComponentId) -> String {
    format!("{}__{}.json", id.namespace, id.name)
}

// ---------------------------------------------------------------------------
// packages

pub fn package_manifest_from_json(file: &str, doc: &Json) -> Result<PackageManifest, SchemaError> {
    let r = Reader { file };
    let m = r.object(doc, "$", &["format_version", "name", "version", "components", "docs", "weights", "dependencies"])?;
    r.version(m, "$")?;
    let name = r.string(r.req(m, "$", "name")?, "name")?;
    if !is_namespace(&name) {
        return Err(r.err("name", format!("`{name}` is not a valid package name")));
    }
    let vtext = r.string(r.req(m, "$", "version")?, "version")?;
    let version = semver::Version::parse(&vtext).map_err(|e| r.err("version", format!("invalid version `{vtext}`: {e}")))?;
    let mut components = Vec::new();
    for (i, c) in r.strings(r.req(m, "$", "components")?, "components")?.iter().enumerate() {
        let id: ComponentId = c.parse().map_err(|e: String| r.err(&index("components", i), e))?;
        if id.namespace != name {
            return Err(r.err(&index("components", i), format!("component `{id}` is not in the `{name}` namespace")));
        }
        if components.contains(&id) {
            return Err(r.err(&index("components", i), format!("duplicate component `{id}`")));
        }
        components.push(id);
    }
    let docs = m.get("docs").map(|d| r.string(d, "docs")).transpose()?;
    if let Some(d) = &docs {
        if d.is_empty() || d.contains('/') || d.contains('\\') || is_json_path(d) || d.starts_with('.') {
            return Err(r.err("docs", "docs must name a plain text file next to the manifest"));
        }
    }
    let mut weights = Vec::new();
    if let Some(w) = m.get("weights") {
        for (i, item) in r.array(w, "weights")?.iter().enumerate() {
            let p = index("weights", i);
            let wm = r.object(item, &p, &["dataset", "score", "url", "sha256"])?;
            let score = match wm.get("score") {
                None => None,
                Some(s) => Some(s.as_f64().filter(|f| f.is_finite()).ok_or_else(|| r.err(&join(&p, "score"), "expected a number"))?),
            };
            weights.push(WeightRecord {
                dataset: r.string(r.req(wm, &p, "dataset")?, &join(&p, "dataset"))?,
                score,
                url: r.string(r.req(wm, &p, "url")?, &join(&p, "url"))?,
                sha256: wm.get("sha256").map(|s| r.string(s, &join(&p, "sha256"))).transpose()?,
            });
        }
    }
    let mut dependencies = BTreeMap::new();
    if let Some(d) = m.get("dependencies") {
        let dm = d.as_object().ok_or_else(|| r.err("dependencies", "expected an object"))?;
        for (k, v) in dm {
            let p = join("dependencies", k);
            if !is_namespace(k) || k == &name {
                return Err(r.err(&p, format!("`{k}` is not a valid dependency")));
            }
            let text = r.string(v, &p)?;
            dependencies.insert(k.clone(), semver::VersionReq::parse(&text).map_err(|e| r.err(&p, format!("invalid requirement `{text}`: {e}")))?);
        }
    }
    Ok(PackageManifest { name, version, components, docs, weights, dependencies })
}

pub fn package_manifest_to_json(p: &PackageManifest) -> Json {
    let mut o = Map::new();
    o.insert("format_version".into(), FORMAT_VERSION.into());
    o.insert("name".into(), p.name.clone().into());
    o.insert("version".into(), p.version.to_string().into());
    o.insert("components".into(), Json::Array(p.components.iter().map(|c| Json::from(c.to_string())).collect()));
    if let Some(d) = &p.docs {
        o.insert("docs".into(), d.clone().into());
    }
    o.insert(
        "weights".into(),
        Json::Array(
            p.weights
                .iter()
                .map(|w| {
                    let mut m = Map::new();
                    m.insert("dataset".into(), w.dataset.clone().into());
                    if let Some(s) = w.score {
                        m.insert("score".into(), s.into());
                    }
                    m.insert("url".into(), w.url.clone().into());
                    if let Some(h) = &w.sha256 {
                        m.insert("sha256".into(), h.clone().into());
                    }
                    Json::Object(m)
                })
                .collect(),
        ),
    );
    o.insert("dependencies".into(), Json::Object(p.dependencies.iter().map(|(k, v)| (k.clone(), Json::from(v.to_string()))).collect()));
    Json::Object(o)
}

/// Reads a package from a document set rooted at the package directory.
pub fn package_from_documents(docs: &DocumentSet, label: &str) -> Result<VendoredPackage, LoadError> {
    let manifest_doc = docs.get(PACKAGE_MANIFEST).ok_or_else(|| SchemaError {
        file: format!("{label}/{PACKAGE_MANIFEST}"),
        path: "$".into(),
        message: "package manifest is missing".into(),
    })?;
    let manifest = package_manifest_from_json(&format!("{label}/{PACKAGE_MANIFEST}"), manifest_doc)?;
    let mut mutators = BTreeMap::new();
    let mut blocks = BTreeMap::new();
    let mut docs_text = None;
    for (path, doc) in docs {
        let file = format!("{label}/{path}");
        if path == PACKAGE_MANIFEST {
            continue;
        }
        if Some(path) == manifest.docs.as_ref() {
            docs_text = Some(doc.as_str().map(str::to_string).ok_or_else(|| SchemaError {
                file: file.clone(),
                path: "$".into(),
                message: "docs must be text".into(),
            })?);
            continue;
        }
        let c = match path.split_once('/') {
            Some(("mutators", rest)) if !rest.contains('/') && rest.ends_with(".json") => Component::Mutator(mutator_from_json(&file, doc)?),
            Some(("blocks", rest)) if !rest.contains('/') && rest.ends_with(".json") => Component::Block(block_from_json(&file, doc, true)?),
            _ => return Err(SchemaError { file, path: "$".into(), message: "unexpected file in package".into() }.into()),
        };
        if c.id().namespace != manifest.name {
            return Err(SchemaError { file, path: "id".into(), message: format!("component is not in the `{}` namespace", manifest.name) }.into());
        }
        if !manifest.components.contains(c.id()) {
            return Err(SchemaError { file, path: "id".into(), message: format!("`{}` is not listed in the package manifest", c.id()) }.into());
        }
        let dup = match c {
            Component::Mutator(m) => mutators.insert(m.id.clone(), m).is_some(),
            Component::Block(b) => blocks.insert(b.id.clone(), b).is_some(),
        };
        if dup {
            return Err(SchemaError { file, path: "id".into(), message: "duplicate component id".into() }.into());
        }
    }
    for id in &manifest.components {
        if !mutators.contains_key(id) && !blocks.contains_key(id) {
            return Err(SchemaError {
                file: format!("{label}/{PACKAGE_MANIFEST}"),
                path: "components".into(),
                message: format!("`{id}` has no component document"),
            }
            .into());
        }
    }
    if manifest.docs.is_some() && docs_text.is_none() {
        return Err(SchemaError { file: format!("{label}/{PACKAGE_MANIFEST}"), path: "docs".into(), message: "docs file is missing".into() }.into());
    }
    Ok(VendoredPackage { manifest, mutators, blocks, docs: docs_text })
}

pub fn package_to_documents(p: &VendoredPackage) -> DocumentSet {
    let mut out = DocumentSet::new();
    out.insert(PACKAGE_MANIFEST.into(), package_manifest_to_json(&p.manifest));
    for m in p.mutators.values() {
        out.insert(format!("mutators/{}", component_file_name(&m.id)), mutator_to_json(m));
    }
    for b in p.blocks.values() {
        out.insert(format!("blocks/{}", component_file_name(&b.id)), block_to_json(b));
    }
    if let (Some(name), Some(text)) = (&p.manifest.docs, &p.docs) {
        out.insert(name.clone(), Json::String(text.clone()));
    }
    out
}

pub fn lockfile_from_json(file: &str, doc: &Json) -> Result<Lockfile, SchemaError> {
    let r = Reader { file };
    let m = r.object(doc, "$", &["format_version", "packages"])?;
    r.version(m, "$")?;
    let mut entries: Vec<LockEntry> = Vec::new();
    for (i, item) in r.array(r.req(m, "$", "packages")?, "packages")?.iter().enumerate() {
        let p = index("packages", i);
        let em = r.object(item, &p, &["name", "version", "hash"])?;
        let name = r.string(r.req(em, &p, "name")?, &join(&p, "name"))?;
        let vtext = r.string(r.req(em, &p, "version")?, &join(&p, "version"))?;
        let version = semver::Version::parse(&vtext).map_err(|e| r.err(&join(&p, "version"), e.to_string()))?;
        let hash = r.string(r.req(em, &p, "hash")?, &join(&p, "hash"))?;
        if !hash.starts_with("sha256:") {
            return Err(r.err(&join(&p, "hash"), "expected a `sha256:` content hash"));
        }
        if entries.iter().any(|e| e.name == name) {
            return Err(r.err(&join(&p, "name"), format!("`{name}` is locked twice")));
        }
        entries.push(LockEntry { name, version, hash });
    }
    entries.sort();
    Ok(Lockfile { entries })
}

pub fn lockfile_to_json(l: &Lockfile) -> Json {
    let mut entries = l.entries.clone();
    entries.sort();
    let mut o = Map::new();
    o.insert("format_version".into(), FORMAT_VERSION.into());
    o.insert(
        "packages".into(),
        Json::Array(
            entries
                .iter()
                .map(|e| {
                    let mut m = Map::new();
                    m.insert("name".into(), e.name.clone().into());
                    m.insert("version".into(), e.version.to_string().into());
                    m.insert("hash".into(), e.hash.clone().into());
                    Json::Object(m)
                })
                .collect(),
        ),
    );
    Json::Object(o)
}

// ---------------------------------------------------------------------------
// projects

fn project_manifest_from_json(doc: &Json) -> Result<Project, SchemaError> {
    let r = Reader { file: PROJECT_MANIFEST };
    let m = r.object(doc, "$", &["format_version", "name", "entry_block", "requirements", "sample_inputs"])?;
    r.version(m, "$")?;
    let name = r.string(r.req(m, "$", "name")?, "name")?;
    if name.trim().is_empty() {
        return Err(r.err("name", "must not be empty"));
    }
    let mut project = Project::new(name);
    if let Some(e) = m.get("entry_block") {
        project.entry_block = Some(r.string(e, "entry_block")?.parse().map_err(|e: String| r.err("entry_block", e))?);
    }
    if let Some(req) = m.get("requirements") {
        let rm = req.as_object().ok_or_else(|| r.err("requirements", "expected an object"))?;
        for (k, v) in rm {
            let p = join("requirements", k);
            if !is_namespace(k) {
                return Err(r.err(&p, format!("`{k}` is not a valid package name")));
            }
            let text = r.string(v, &p)?;
            project.requirements.insert(k.clone(), semver::VersionReq::parse(&text).map_err(|e| r.err(&p, format!("invalid requirement `{text}`: {e}")))?);
        }
    }
    if let Some(s) = m.get("sample_inputs") {
        let mut shapes = Vec::new();
        for (i, item) in r.array(s, "sample_inputs")?.iter().enumerate() {
            let p = index("sample_inputs", i);
            let dims = r.array(item, &p)?;
            let mut shape = Vec::new();
            for (j, d) in dims.iter().enumerate() {
                match d.as_u64() {
                    Some(v) if v > 0 => shape.push(v),
                    _ => return Err(r.err(&index(&p, j), "expected a positive integer")),
                }
            }
            shapes.push(shape);
        }
        project.sample_inputs = Some(shapes);
    }
    Ok(project)
}

fn project_manifest_to_json(p: &Project) -> Json {
    let mut o = Map::new();
    o.insert("format_version".into(), FORMAT_VERSION.into());
    o.insert("name".into(), p.name.clone().into());
    if let Some(e) = &p.entry_block {
        o.insert("entry_block".into(), e.to_string().into());
    }
    o.insert("requirements".into(), Json::Object(p.requirements.iter().map(|(k, v)| (k.clone(), Json::from(v.to_string()))).collect()));
    if let Some(s) = &p.sample_inputs {
        o.insert("sample_inputs".into(), Json::Array(s.iter().map(|d| Json::Array(d.iter().map(|v| Json::from(*v)).collect())).collect()));
    }
    Json::Object(o)
}

/// Builds a project from its documents, resolving every component reference.
///
/// Graph-structure problems inside blocks (cycles, unconnected ports, missing
/// join policies) are left for validation to report.
pub fn project_from_documents(docs: &DocumentSet) -> Result<Project, LoadError> {
    let manifest = docs.get(PROJECT_MANIFEST).ok_or_else(|| SchemaError {
        file: PROJECT_MANIFEST.into(),
        path: "$".into(),
        message: "project manifest is missing".into(),
    })?;
    let mut project = project_manifest_from_json(manifest)?;

    let mut package_docs: BTreeMap<(String, String), DocumentSet> = BTreeMap::new();
    let mut lock_seen = false;
    for (path, doc) in docs {
        if path == PROJECT_MANIFEST {
            continue;
        }
        if path == LOCKFILE {
            project.lock = lockfile_from_json(LOCKFILE, doc)?;
            lock_seen = true;
            continue;
        }
        let parts: Vec<&str> = path.split('/').collect();
        match parts.as_slice() {
            ["mutators", f] if f.ends_with(".json") => {
                let m = mutator_from_json(path, doc)?;
                if project.mutators.contains_key(&m.id) || project.blocks.contains_key(&m.id) {
                    return Err(SchemaError { file: path.clone(), path: "id".into(), message: format!("duplicate component id `{}`", m.id) }.into());
                }
                project.add_mutator(m);
            }
            ["blocks", f] if f.ends_with(".json") => {
                let b = block_from_json(path, doc, false)?;
                if project.mutators.contains_key(&b.id) || project.blocks.contains_key(&b.id) {
                    return Err(SchemaError { file: path.clone(), path: "id".into(), message: format!("duplicate component id `{}`", b.id) }.into());
                }
                project.add_block(b);
            }
            ["packages", name, version, rest @ ..] if !rest.is_empty() => {
                package_docs.entry((name.to_string(), version.to_string())).or_default().insert(rest.join("/"), doc.clone());
            }
            _ => return Err(SchemaError { file: path.clone(), path: "$".into(), message: "unexpected file in project".into() }.into()),
        }
    }

    for ((name, version), set) in &package_docs {
        let label = format!("packages/{name}/{version}");
        let pkg = package_from_documents(set, &label)?;
        if &pkg.manifest.name != name || &pkg.manifest.version.to_string() != version {
            return Err(SchemaError {
                file: format!("{label}/{PACKAGE_MANIFEST}"),
                path: "$".into(),
                message: format!("manifest describes {} {}, not {name} {version}", pkg.manifest.name, pkg.manifest.version),
            }
            .into());
        }
        if project.packages.iter().any(|p| p.manifest.name == *name) {
            return Err(SchemaError { file: label, path: "$".into(), message: format!("package `{name}` is vendored twice") }.into());
        }
        match project.lock.get(name) {
            Some(e) if e.version == pkg.manifest.version => {
                let actual = crate::registry::documents_hash(set);
                if actual != e.hash {
                    return Err(SchemaError {
                        file: LOCKFILE.into(),
                        path: "packages".into(),
                        message: format!("vendored {name} {version} hashes to {actual}, the lockfile records {}", e.hash),
                    }
                    .into());
                }
            }
            _ => {
                return Err(SchemaError { file: LOCKFILE.into(), path: "packages".into(), message: format!("no lock entry for {name} {version}") }.into())
            }
        }
        project.packages.push(pkg);
    }
    if let Some(e) = project.lock.entries.iter().find(|e| !project.packages.iter().any(|p| p.manifest.name == e.name)) {
        return Err(SchemaError { file: LOCKFILE.into(), path: "packages".into(), message: format!("{} {} is locked but not vendored", e.name, e.version) }.into());
    }
    if !lock_seen && !package_docs.is_empty() {
        return Err(SchemaError { file: LOCKFILE.into(), path: "$".into(), message: "vendored packages require a lockfile".into() }.into());
    }
    for id in project.mutators.keys().chain(project.blocks.keys()) {
        if project.packages.iter().any(|p| p.manifest.name == id.namespace) {
            return Err(SchemaError {
                file: local_file(id, &project),
                path: "id".into(),
                message: format!("namespace `{}` belongs to a vendored package", id.namespace),
            }
            .into());
        }
    }

    resolve_references(&project)?;
    check_instantiation(&project)?;
    if let Some(entry) = &project.entry_block {
        let Some(block) = project.block(entry) else {
            return Err(LoadError::Unresolved { file: PROJECT_MANIFEST.into(), path: "entry_block".into(), reference: entry.to_string() });
        };
        if let Some(samples) = &project.sample_inputs {
            if samples.len() != block.input_count {
                return Err(SchemaError {
                    file: PROJECT_MANIFEST.into(),
                    path: "sample_inputs".into(),
                    message: format!("`{entry}` has {} inputs, {} sample shapes given", block.input_count, samples.len()),
                }
                .into());
            }
        }
    } else if project.sample_inputs.is_some() {
        return Err(SchemaError { file: PROJECT_MANIFEST.into(), path: "sample_inputs".into(), message: "sample inputs need an entry block".into() }.into());
    }
    Ok(project)
}

fn local_file(id: &ComponentId, project: &Project) -> String {
    let dir = if project.mutators.contains_key(id) { "mutators" } else { "blocks" };
    format!("{dir}/{}", component_file_name(id))
}

fn block_file(block: &Block, project: &Project) -> String {
    if project.blocks.contains_key(&block.id) {
        return local_file(&block.id, project);
    }
    let pkg = project.packages.iter().find(|p| p.blocks.contains_key(&block.id));
    match pkg {
        Some(p) => format!("packages/{}/{}/blocks/{}", p.manifest.name, p.manifest.version, component_file_name(&block.id)),
        None => component_file_name(&block.id),
    }
}

/// Every node reference must resolve, and edge ports must exist on the resolved component.
fn resolve_references(project: &Project) -> Result<(), LoadError> {
    for block in project.all_blocks() {
        let file = block_file(block, project);
        let r = Reader { file: &file };
        for (i, node) in block.nodes.iter().enumerate() {
            let p = index("nodes", i);
            let main = project.resolve(&node.component).ok_or_else(|| LoadError::Unresolved {
                file: file.clone(),
                path: join(&p, "component"),
                reference: node.component.to_string(),
            })?;
            if let Some(c) = &node.conditional {
                let other = project.resolve(&c.else_component).ok_or_else(|| LoadError::Unresolved {
                    file: file.clone(),
                    path: join(&p, "else_component"),
                    reference: c.else_component.to_string(),
                })?;
                if other.input_count() != main.input_count() || other.output_count() != main.output_count() {
                    return Err(r
                        .err(
                            &join(&p, "else_component"),
                            format!(
                                "branches must have the same ports: {} has {} in / {} out, {} has {} in / {} out",
                                main.id(),
                                main.input_count(),
                                main.output_count(),
                                other.id(),
                                other.input_count(),
                                other.output_count()
                            ),
                        )
                        .into());
                }
            }
            if let Some(port) = node.joins.keys().find(|k| **k >= main.input_count()) {
                return Err(r.err(&join(&join(&p, "joins"), &port.to_string()), format!("port {port} does not exist")).into());
            }
        }
        for (i, e) in block.edges.iter().enumerate() {
            let p = index("edges", i);
            for (key, ep, outgoing) in [("from", &e.from, true), ("to", &e.to, false)] {
                if let NodeRef::Node(n) = &ep.node {
                    let node = block.node(n).expect("edge endpoints were checked at parse time");
                    let def = project.resolve(&node.component).expect("resolved above");
                    let count = if outgoing { def.output_count() } else { def.input_count() };
                    if ep.port >= count {
                        let dir = if outgoing { "output" } else { "input" };
                        return Err(r.err(&join(&p, key), format!("`{n}` ({}) has no {dir} port {}", def.id(), ep.port)).into());
                    }
                }
            }
        }
    }
    Ok(())
}

/// The block-instantiation graph must be acyclic.
fn check_instantiation(project: &Project) -> Result<(), LoadError> {
    fn visit(project: &Project, id: &ComponentId, stack: &mut Vec<ComponentId>, done: &mut BTreeSet<ComponentId>) -> Result<(), LoadError> {
        if done.contains(id) {
            return Ok(());
        }
        if let Some(pos) = stack.iter().position(|s| s == id) {
            let mut cycle: Vec<String> = stack[pos..].iter().map(|c| c.to_string()).collect();
            cycle.push(id.to_string());
            return Err(LoadError::RecursiveInstantiation { cycle });
        }
        let Some(block) = project.block(id) else { return Ok(()) };
        stack.push(id.clone());
        for r in block.referenced_components() {
            if let Some(ComponentDef::Block(child)) = project.resolve(r) {
                visit(project, &child.id, stack, done)?;
            }
        }
        stack.pop();
        done.insert(id.clone());
        Ok(())
    }
    let mut done = BTreeSet::new();
    for block in project.all_blocks() {
        visit(project, &block.id, &mut Vec::new(), &mut done)?;
    }
    Ok(())
}

pub fn project_to_documents(p: &Project) -> DocumentSet {
    let mut out = DocumentSet::new();
    out.insert(PROJECT_MANIFEST.into(), project_manifest_to_json(p));
    for m in p.mutators.values() {
        out.insert(format!("mutators/{}", component_file_name(&m.id)), mutator_to_json(m));
    }
    for b in p.blocks.values() {
        out.insert(format!("blocks/{}", component_file_name(&b.id)), block_to_json(b));
    }
    if !p.lock.is_empty() || !p.packages.is_empty() {
        out.insert(LOCKFILE.into(), lockfile_to_json(&p.lock));
    }
    for pkg in &p.packages {
        for (path, doc) in package_to_documents(pkg) {
            out.insert(format!("packages/{}/{}/{path}", pkg.manifest.name, pkg.manifest.version), doc);
        }
    }
    out
}

/// The request body format of the service: `{"files": {path: document}}`.
pub fn documents_to_bundle(docs: &DocumentSet) -> Json {
    let mut o = Map::new();
    o.insert("files".into(), Json::Object(docs.iter().map(|(k, v)| (k.clone(), v.clone())).collect()));
    Json::Object(o)
}

pub fn documents_from_bundle(doc: &Json) -> Result<DocumentSet, LoadError> {
    let r = Reader { file: "<request>" };
    let m = r.object(doc, "$", &["files"])?;
    let files = r.req(m, "$", "files")?.as_object().ok_or_else(|| r.err("files", "expected an object"))?;
    let mut out = DocumentSet::new();
    for (path, v) in files {
        if !is_relative_path(path) {
            return Err(r.err(&join("files", path), "file paths must be relative and normalized").into());
        }
        if !is_json_path(path) && !v.is_string() {
            return Err(r.err(&join("files", path), "text files must be strings").into());
        }
        out.insert(path.clone(), v.clone());
    }
    Ok(out)
}

pub fn is_relative_path(path: &str) -> bool {
    !path.is_empty()
        && !path.starts_with('/')
        && !path.contains('\\')
        && path.split('/').all(|c| !c.is_empty() && c != "." && c != ".." && !c.starts_with(".tmp"))
}

// ---------------------------------------------------------------------------
// filesystem

fn is_managed(path: &str) -> bool {
    path == PROJECT_MANIFEST
        || path == LOCKFILE
        || path.starts_with("packages/")
        || (path.starts_with("mutators/") && path.ends_with(".json"))
        || (path.starts_with("blocks/") && path.ends_with(".json"))
}

/// Reads the managed files of a project directory.
pub fn read_project_documents(root: &Path) -> Result<DocumentSet, LoadError> {
    if !root.join(PROJECT_MANIFEST).is_file() {
        return Err(LoadError::MissingManifest(root.to_path_buf()));
    }
    let mut out = DocumentSet::new();
    for rel in list_files(root)? {
        if !is_managed(&rel) {
            continue;
        }
        let path = root.join(&rel);
        let text = fs::read_to_string(&path).map_err(|e| LoadError::io(&path, e))?;
        out.insert(rel.clone(), parse_document(&rel, &text)?);
    }
    Ok(out)
}

/// Relative paths of all regular files below `root`, sorted, `/`-separated.
pub fn list_files(root: &Path) -> Result<Vec<String>, LoadError> {
    fn walk(dir: &Path, prefix: &str, out: &mut Vec<String>) -> Result<(), LoadError> {
        let mut entries: Vec<_> = fs::read_dir(dir).map_err(|e| LoadError::io(dir, e))?.collect::<Result<_, _>>().map_err(|e| LoadError::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let name = entry.file_name().to_string_lossy().into_owned();
            let rel = if prefix.is_empty() { name.clone() } else { format!("{prefix}/{name}") };
            let ft = fs::metadata(entry.path()).map_err(|e| LoadError::io(entry.path(), e))?;
            if ft.is_dir() {
                walk(&entry.path(), &rel, out)?;
            } else if ft.is_file() {
                out.push(rel);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, "", &mut out)?;
    Ok(out)
}

pub fn load_project(root: &Path) -> Result<Project, LoadError> {
    project_from_documents(&read_project_documents(root)?)
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::Builder::new().prefix(".tmp-").tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Writes a document set into `root`, removing managed files that are no
/// longer part of it. Files the project format does not own are left alone.
pub fn write_documents(root: &Path, docs: &DocumentSet) -> Result<(), LoadError> {
    fs::create_dir_all(root).map_err(|e| LoadError::io(root, e))?;
    for (rel, doc) in docs {
        let path = root.join(rel);
        let bytes = document_bytes(rel, doc);
        if fs::read(&path).ok().as_deref() == Some(&bytes[..]) {
            continue;
        }
        write_atomic(&path, &bytes).map_err(|e| LoadError::io(&path, e))?;
    }
    for rel in list_files(root)? {
        if is_managed(&rel) && !docs.contains_key(&rel) {
            let path = root.join(&rel);
            fs::remove_file(&path).map_err(|e| LoadError::io(&path, e))?;
        }
    }
    for dir in ["packages", "mutators", "blocks"] {
        remove_empty_dirs(&root.join(dir)).map_err(|e| LoadError::io(root.join(dir), e))?;
    }
    Ok(())
}

fn remove_empty_dirs(dir: &Path) -> std::io::Result<bool> {
    if !dir.is_dir() {
        return Ok(false);
    }
    let mut empty = true;
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            if !remove_empty_dirs(&entry.path())? {
                empty = false;
            }
        } else {
            empty = false;
        }
    }
    if empty {
        fs::remove_dir(dir)?;
    }
    Ok(empty)
}

pub fn save_project(project: &Project, root: &Path) -> Result<(), LoadError> {
    write_documents(root, &project_to_documents(project))
}
