//! Components (mutators and blocks), their instances and the project that holds them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::expr::{Expr, Ty, Value};
use crate::shape::{is_identifier, OutputShape, ShapePattern};

/// `namespace/Name`. The namespace doubles as the package name for registry components.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ComponentId {
    pub namespace: String,
    pub name: String,
}

impl ComponentId {
    pub fn new(namespace: impl Into<String>, name: impl Into<String>) -> Self {
        Self { namespace: namespace.into(), name: name.into() }
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.namespace, self.name)
    }
}

impl FromStr for ComponentId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (ns, name) = s.split_once('/').ok_or_else(|| format!("component id `{s}` must have the form namespace/Name"))?;
        if !is_namespace(ns) {
            return Err(format!("invalid namespace `{ns}` (lowercase letters, digits, `_` and `-`)"));
        }
        if !is_identifier(name) {
            return Err(format!("invalid component name `{name}`"));
        }
        Ok(ComponentId::new(ns, name))
    }
}

pub fn is_namespace(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-')
}

/// A reference from a node to a component, optionally pinned to a package version range.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ComponentRef {
    pub id: ComponentId,
    pub version: Option<String>,
}

impl ComponentRef {
    pub fn to(id: ComponentId) -> Self {
        Self { id, version: None }
    }
}

impl fmt::Display for ComponentRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.version {
            Some(v) => write!(f, "{}@{v}", self.id),
            None => write!(f, "{}", self.id),
        }
    }
}

impl FromStr for ComponentRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('@') {
            Some((id, req)) => {
                semver::VersionReq::parse(req).map_err(|e| format!("invalid version requirement `{req}`: {e}"))?;
                Ok(ComponentRef { id: id.parse()?, version: Some(req.to_string()) })
            }
            None => Ok(ComponentRef { id: s.parse()?, version: None }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamType {
    Int,
    Float,
    String,
    Bool,
    IntList,
    /// A list of positive dimensions (the "matrix" parameters of the editor).
    Shape,
}

impl ParamType {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamType::Int => "int",
            ParamType::Float => "float",
            ParamType::String => "string",
            ParamType::Bool => "bool",
            ParamType::IntList => "int_list",
            ParamType::Shape => "shape",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "int" => ParamType::Int,
            "float" => ParamType::Float,
            "string" => ParamType::String,
            "bool" => ParamType::Bool,
            "int_list" => ParamType::IntList,
            "shape" => ParamType::Shape,
            _ => return None,
        })
    }

    pub fn ty(self) -> Ty {
        match self {
            ParamType::Int => Ty::Int,
            ParamType::Float => Ty::Float,
            ParamType::String => Ty::Str,
            ParamType::Bool => Ty::Bool,
            ParamType::IntList | ParamType::Shape => Ty::List(Box::new(Ty::Int)),
        }
    }

    /// Whether an expression of static type `ty` may be bound to a parameter of this type.
    pub fn accepts_type(self, ty: &Ty) -> bool {
        match (self, ty) {
            (_, Ty::Any) => true,
            (ParamType::Int, Ty::Int) => true,
            (ParamType::Float, Ty::Int | Ty::Float) => true,
            (ParamType::String, Ty::Str) => true,
            (ParamType::Bool, Ty::Bool) => true,
            (ParamType::IntList | ParamType::Shape, Ty::List(elem)) => matches!(**elem, Ty::Int | Ty::Any),
            _ => false,
        }
    }

    pub fn accepts_value(self, value: &Value) -> bool {
        match (self, value) {
            (ParamType::Shape, Value::List(items)) => items.iter().all(|v| matches!(v, Value::Int(i) if *i > 0)),
            _ => self.accepts_type(&value.type_of()),
        }
    }
}

impl fmt::Display for ParamType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Constraints {
    pub min: Option<Value>,
    pub max: Option<Value>,
    pub one_of: Option<Vec<Value>>,
    pub shape: Option<ShapePattern>,
}

impl Constraints {
    pub fn is_empty(&self) -> bool {
        self.min.is_none() && self.max.is_none() && self.one_of.is_none() && self.shape.is_none()
    }

    /// Checks a concrete value, returning a description of the first violation.
    /// Numeric bounds apply element-wise to lists.
    pub fn check(&self, value: &Value) -> Result<(), String> {
        let numbers: Vec<f64> = match value {
            Value::List(items) => items.iter().filter_map(Value::as_f64).collect(),
            v => v.as_f64().into_iter().collect(),
        };
        if let Some(min) = self.min.as_ref().and_then(Value::as_f64) {
            if let Some(bad) = numbers.iter().find(|x| **x < min) {
                return Err(format!("{} is below the minimum {}", fmt_num(*bad), self.min.as_ref().unwrap()));
            }
        }
        if let Some(max) = self.max.as_ref().and_then(Value::as_f64) {
            if let Some(bad) = numbers.iter().find(|x| **x > max) {
                return Err(format!("{} is above the maximum {}", fmt_num(*bad), self.max.as_ref().unwrap()));
            }
        }
        if let Some(options) = &self.one_of {
            if !options.iter().any(|o| o == value || (o.as_f64().is_some() && o.as_f64() == value.as_f64())) {
                let list: Vec<String> = options.iter().map(|o| o.to_string()).collect();
                return Err(format!("{value} is not one of [{}]", list.join(", ")));
            }
        }
        if let Some(pattern) = &self.shape {
            let Value::List(items) = value else {
                return Err(format!("{value} is not a shape"));
            };
            let dims: Option<Vec<u64>> = items.iter().map(|v| v.as_int().filter(|i| *i > 0).map(|i| i as u64)).collect();
            let Some(dims) = dims else {
                return Err(format!("{value} is not a shape of positive dimensions"));
            };
            let resolved = pattern.resolve(&crate::shape::NoProps).map_err(|e| e.to_string())?;
            crate::shape::unify_shapes(&resolved, &crate::shape::Shape::concrete(&dims), &Default::default())
                .map_err(|e| format!("{value} does not match {pattern}: {e}"))?;
        }
        Ok(())
    }
}

fn fmt_num(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub ptype: ParamType,
    pub required: bool,
    pub default: Option<Value>,
    pub constraints: Constraints,
    pub description: Option<String>,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, ptype: ParamType) -> Self {
        Self { name: name.into(), ptype, required: false, default: None, constraints: Constraints::default(), description: None }
    }

    pub fn required(mut self) -> Self {
        self.required = true;
        self
    }

    pub fn with_default(mut self, v: Value) -> Self {
        self.default = Some(v);
        self
    }

    pub fn with_min(mut self, v: Value) -> Self {
        self.constraints.min = Some(v);
        self
    }
}

/// A reusable code fragment with ports, parameters and an optional shape contract.
#[derive(Debug, Clone, PartialEq)]
pub struct Mutator {
    pub id: ComponentId,
    pub imports: Vec<String>,
    pub input_count: usize,
    pub output_count: usize,
    pub input_patterns: Option<Vec<ShapePattern>>,
    pub output_exprs: Option<Vec<OutputShape>>,
    pub params: Vec<ParamSpec>,
    pub init_code: String,
    pub forward_code: String,
    pub extra_code: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalVar {
    pub name: String,
    pub value: Expr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinOp {
    Add,
    Concat,
    Multiply,
}

impl JoinOp {
    pub fn as_str(self) -> &'static str {
        match self {
            JoinOp::Add => "add",
            JoinOp::Concat => "concat",
            JoinOp::Multiply => "multiply",
        }
    }
}

/// How several edges entering one input port are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JoinPolicy {
    pub op: JoinOp,
    /// Only for [`JoinOp::Concat`].
    pub axis: Option<i64>,
}

impl JoinPolicy {
    pub const ADD: JoinPolicy = JoinPolicy { op: JoinOp::Add, axis: None };
    pub const MULTIPLY: JoinPolicy = JoinPolicy { op: JoinOp::Multiply, axis: None };

    pub fn concat(axis: i64) -> Self {
        JoinPolicy { op: JoinOp::Concat, axis: Some(axis) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conditional {
    pub condition: Expr,
    pub else_component: ComponentRef,
    pub else_params: BTreeMap<String, Expr>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayoutHint {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Normal,
    Conditional,
}

/// A placed component inside a block.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeInstance {
    pub id: String,
    /// For conditional nodes, the branch taken when the condition holds.
    pub component: ComponentRef,
    pub params: BTreeMap<String, Expr>,
    /// `None` means a single instance.
    pub repeat: Option<Expr>,
    pub conditional: Option<Conditional>,
    pub joins: BTreeMap<usize, JoinPolicy>,
    pub layout: Option<LayoutHint>,
}

impl NodeInstance {
    pub fn new(id: impl Into<String>, component: ComponentId) -> Self {
        Self {
            id: id.into(),
            component: ComponentRef::to(component),
            params: BTreeMap::new(),
            repeat: None,
            conditional: None,
            joins: BTreeMap::new(),
            layout: None,
        }
    }

    pub fn with_param(mut self, name: &str, value: Expr) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    pub fn kind(&self) -> NodeKind {
        if self.conditional.is_some() {
            NodeKind::Conditional
        } else {
            NodeKind::Normal
        }
    }

    /// Literal repeat count, if the repeat is a literal (1 when absent).
    pub fn literal_repeat(&self) -> Option<i64> {
        match &self.repeat {
            None => Some(1),
            Some(e) => e.as_literal().and_then(|v| v.as_int()),
        }
    }
}

/// A node reference inside a block graph.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeRef {
    Input,
    Output,
    Node(String),
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeRef::Input => f.write_str("Input"),
            NodeRef::Output => f.write_str("Output"),
            NodeRef::Node(n) => f.write_str(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint {
    pub node: NodeRef,
    pub port: usize,
}

impl Endpoint {
    pub fn new(node: NodeRef, port: usize) -> Self {
        Self { node, port }
    }

    pub fn node(id: &str, port: usize) -> Self {
        Self { node: NodeRef::Node(id.to_string()), port }
    }

    pub fn input(port: usize) -> Self {
        Self { node: NodeRef::Input, port }
    }

    pub fn output(port: usize) -> Self {
        Self { node: NodeRef::Output, port }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.node, self.port)
    }
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (node, port) = match s.rsplit_once(':') {
            Some((n, p)) => (n, p.parse::<usize>().map_err(|_| format!("invalid port in `{s}`"))?),
            None => (s, 0),
        };
        let node = match node {
            "Input" => NodeRef::Input,
            "Output" => NodeRef::Output,
            n if is_identifier(n) => NodeRef::Node(n.to_string()),
            n => return Err(format!("invalid node reference `{n}`")),
        };
        Ok(Endpoint { node, port })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Branch {
    None,
    True,
    False,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub from: Endpoint,
    pub to: Endpoint,
    pub branch: Branch,
}

impl Edge {
    pub fn new(from: Endpoint, to: Endpoint) -> Self {
        Self { from, to, branch: Branch::None }
    }
}

/// A dataflow graph of component instances between the Input and Output nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub id: ComponentId,
    pub input_count: usize,
    pub output_count: usize,
    pub input_patterns: Option<Vec<ShapePattern>>,
    pub output_exprs: Option<Vec<OutputShape>>,
    pub params: Vec<ParamSpec>,
    pub locals: Vec<LocalVar>,
    pub nodes: Vec<NodeInstance>,
    pub edges: Vec<Edge>,
    /// Join policies for fan-in on the block's Output ports.
    pub output_joins: BTreeMap<usize, JoinPolicy>,
}

impl Block {
    pub fn new(id: ComponentId, input_count: usize, output_count: usize) -> Self {
        Self {
            id,
            input_count,
            output_count,
            input_patterns: None,
            output_exprs: None,
            params: Vec::new(),
            locals: Vec::new(),
            nodes: Vec::new(),
            edges: Vec::new(),
            output_joins: BTreeMap::new(),
        }
    }

    pub fn node(&self, id: &str) -> Option<&NodeInstance> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn connect(&mut self, from: Endpoint, to: Endpoint) {
        self.edges.push(Edge::new(from, to));
    }

    /// Edges entering `to`, optionally restricted to one branch side.
    pub fn incoming<'a>(&'a self, to: &'a Endpoint) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| &e.to == to)
    }

    pub fn join_policy(&self, target: &NodeRef, port: usize) -> Option<JoinPolicy> {
        match target {
            NodeRef::Output => self.output_joins.get(&port).copied(),
            NodeRef::Node(id) => self.node(id).and_then(|n| n.joins.get(&port).copied()),
            NodeRef::Input => None,
        }
    }

    /// Ids of blocks and mutators referenced by nodes, including else branches.
    pub fn referenced_components(&self) -> impl Iterator<Item = &ComponentRef> {
        self.nodes.iter().flat_map(|n| std::iter::once(&n.component).chain(n.conditional.as_ref().map(|c| &c.else_component)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Component {
    Mutator(Mutator),
    Block(Block),
}

impl Component {
    pub fn id(&self) -> &ComponentId {
        match self {
            Component::Mutator(m) => &m.id,
            Component::Block(b) => &b.id,
        }
    }
}

/// Borrowed view over either component kind.
#[derive(Debug, Clone, Copy)]
pub enum ComponentDef<'a> {
    Mutator(&'a Mutator),
    Block(&'a Block),
}

impl<'a> ComponentDef<'a> {
    pub fn id(&self) -> &'a ComponentId {
        match self {
            ComponentDef::Mutator(m) => &m.id,
            ComponentDef::Block(b) => &b.id,
        }
    }

    pub fn input_count(&self) -> usize {
        match self {
            ComponentDef::Mutator(m) => m.input_count,
            ComponentDef::Block(b) => b.input_count,
        }
    }

    pub fn output_count(&self) -> usize {
        match self {
            ComponentDef::Mutator(m) => m.output_count,
            ComponentDef::Block(b) => b.output_count,
        }
    }

    pub fn params(&self) -> &'a [ParamSpec] {
        match self {
            ComponentDef::Mutator(m) => &m.params,
            ComponentDef::Block(b) => &b.params,
        }
    }

    pub fn input_patterns(&self) -> Option<&'a [ShapePattern]> {
        match self {
            ComponentDef::Mutator(m) => m.input_patterns.as_deref(),
            ComponentDef::Block(b) => b.input_patterns.as_deref(),
        }
    }

    pub fn output_exprs(&self) -> Option<&'a [OutputShape]> {
        match self {
            ComponentDef::Mutator(m) => m.output_exprs.as_deref(),
            ComponentDef::Block(b) => b.output_exprs.as_deref(),
        }
    }
}

/// Metadata for published pretrained weights. Weights themselves are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRecord {
    pub dataset: String,
    pub score: Option<f64>,
    pub url: String,
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackageManifest {
    pub name: String,
    pub version: semver::Version,
    pub components: Vec<ComponentId>,
    pub docs: Option<String>,
    pub weights: Vec<WeightRecord>,
    pub dependencies: BTreeMap<String, semver::VersionReq>,
}

/// A registry package copied into a project.
#[derive(Debug, Clone, PartialEq)]
pub struct VendoredPackage {
    pub manifest: PackageManifest,
    pub mutators: BTreeMap<ComponentId, Mutator>,
    pub blocks: BTreeMap<ComponentId, Block>,
    pub docs: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct LockEntry {
    pub name: String,
    pub version: semver::Version,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Lockfile {
    pub entries: Vec<LockEntry>,
}

impl Lockfile {
    pub fn get(&self, name: &str) -> Option<&LockEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Project {
    pub name: String,
    pub entry_block: Option<ComponentId>,
    pub requirements: BTreeMap<String, semver::VersionReq>,
    /// Concrete shapes fed to the entry block during validation.
    pub sample_inputs: Option<Vec<Vec<u64>>>,
    pub mutators: BTreeMap<ComponentId, Mutator>,
    pub blocks: BTreeMap<ComponentId, Block>,
    pub packages: Vec<VendoredPackage>,
    pub lock: Lockfile,
}

impl Project {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            entry_block: None,
            requirements: BTreeMap::new(),
            sample_inputs: None,
            mutators: BTreeMap::new(),
            blocks: BTreeMap::new(),
            packages: Vec::new(),
            lock: Lockfile::default(),
        }
    }

    pub fn add_mutator(&mut self, m: Mutator) {
        self.mutators.insert(m.id.clone(), m);
    }

    pub fn add_block(&mut self, b: Block) {
        self.blocks.insert(b.id.clone(), b);
    }

    pub fn mutator(&self, id: &ComponentId) -> Option<&Mutator> {
        self.mutators.get(id).or_else(|| self.packages.iter().find_map(|p| p.mutators.get(id)))
    }

    pub fn block(&self, id: &ComponentId) -> Option<&Block> {
        self.blocks.get(id).or_else(|| self.packages.iter().find_map(|p| p.blocks.get(id)))
    }

    /// Resolves a reference against local components first, then vendored packages
    /// (honouring the reference's version requirement).
    pub fn resolve(&self, r: &ComponentRef) -> Option<ComponentDef<'_>> {
        if let Some(m) = self.mutators.get(&r.id) {
            return Some(ComponentDef::Mutator(m));
        }
        if let Some(b) = self.blocks.get(&r.id) {
            return Some(ComponentDef::Block(b));
        }
        let pkg = self.packages.iter().find(|p| p.manifest.name == r.id.namespace)?;
        if let Some(req) = &r.version {
            let req = semver::VersionReq::parse(req).ok()?;
            if !req.matches(&pkg.manifest.version) {
                return None;
            }
        }
        pkg.mutators
            .get(&r.id)
            .map(ComponentDef::Mutator)
            .or_else(|| pkg.blocks.get(&r.id).map(ComponentDef::Block))
    }

    /// Every block, local ones first, then vendored ones, each group sorted by id.
    pub fn all_blocks(&self) -> Vec<&Block> {
        let mut out: Vec<&Block> = self.blocks.values().collect();
        for p in &self.packages {
            out.extend(p.blocks.values());
        }
        out
    }
}
