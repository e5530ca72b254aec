//! PyTorch code generation: one `nn.Module` class per block.
//!
//! Blocks are emitted node by node in topological order. Every output port
//! gets its own value name (`x_<node>_<port>`), fan-in ports are joined into
//! `x_<node>_in<port>` first, and mutator templates are filled with those
//! names. Block parameters and locals are stored on the instance so forward
//! code (conditions, loop bounds, template props) can read them.

pub mod python;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use crate::diagnostics::ValidationReport;
use crate::expr::Expr;
use crate::model::{Block, Branch, ComponentDef, ComponentId, Endpoint, JoinOp, Mutator, NodeInstance, NodeRef, ParamSpec, Project};
use crate::template::{substitute_tokens, Token, TokenEnv};
use crate::validate::{topo_sort, validate_project};

use python::{call_lines, dedent, is_keyword, is_module_attr, normalize_import, snake_case, INDENT, MAX_LINE};

pub const INDEX_FILE: &str = "__init__.py";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedFile {
    pub path: String,
    pub content: String,
}

/// A block that cannot be turned into code at all.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct CodegenError {
    pub code: &'static str,
    pub block: String,
    pub node: Option<String>,
    pub message: String,
}

impl fmt::Display for CodegenError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: block {}", self.code, self.block)?;
        if let Some(n) = &self.node {
            write!(f, " node `{n}`")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl CodegenError {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "code": self.code, "block": self.block, "node": self.node, "message": self.message })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenerateError {
    #[error("validation failed with {} errors", .0.errors().count())]
    Invalid(ValidationReport),
    #[error("code generation failed: {}", .0.first().map(|e| e.to_string()).unwrap_or_default())]
    Codegen(Vec<CodegenError>),
}

/// Python module stem of every block in the project.
#[derive(Debug, Clone, Default)]
pub struct ModuleMap {
    modules: BTreeMap<ComponentId, String>,
}

impl ModuleMap {
    /// File stems are the snake-cased block name, prefixed with the namespace
    /// when two blocks would share a stem.
    pub fn new(project: &Project) -> Self {
        let blocks = project.all_blocks();
        let mut count: BTreeMap<String, usize> = BTreeMap::new();
        for b in &blocks {
            *count.entry(snake_case(&b.id.name)).or_default() += 1;
        }
        let mut modules = BTreeMap::new();
        for b in &blocks {
            let stem = snake_case(&b.id.name);
            let stem = if count[&stem] > 1 || stem == "__init__" { format!("{}_{stem}", b.id.namespace.replace('-', "_")) } else { stem };
            modules.insert(b.id.clone(), stem);
        }
        Self { modules }
    }

    pub fn stem(&self, id: &ComponentId) -> Option<&str> {
        self.modules.get(id).map(String::as_str)
    }

    pub fn path(&self, id: &ComponentId) -> Option<String> {
        self.stem(id).map(|s| format!("{s}.py"))
    }
}

/// Generates every block of the project plus the package index.
///
/// Without `force` a failing validation report is returned as the error.
/// With it, files are generated anyway and carry a warning header. Graph
/// defects that leave no meaningful program (cycles, unconnected inputs,
/// fan-in without a join policy) are errors either way.
pub fn generate_project(project: &Project, force: bool) -> Result<Vec<GeneratedFile>, GenerateError> {
    let report = validate_project(project);
    let error_count = report.errors().count();
    if error_count > 0 && !force {
        return Err(GenerateError::Invalid(report));
    }
    let warning = (error_count > 0).then(|| format!("# WARNING: forced generation; the project failed validation with {error_count} errors."));
    generate_files(project, warning.as_deref()).map_err(GenerateError::Codegen)
}

/// Generation without the validation gate.
pub fn generate_files(project: &Project, warning: Option<&str>) -> Result<Vec<GeneratedFile>, Vec<CodegenError>> {
    let modules = ModuleMap::new(project);
    let mut files = Vec::new();
    let mut errors = Vec::new();
    for block in project.all_blocks() {
        match generate_block(project, &modules, block, warning) {
            Ok(f) => files.push(f),
            Err(e) => errors.extend(e),
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    files.push(package_index(project, &modules, warning));
    Ok(files)
}

/// `__init__.py` importing every generated class.
pub fn package_index(project: &Project, modules: &ModuleMap, warning: Option<&str>) -> GeneratedFile {
    let mut entries: Vec<(String, &ComponentId)> = project.all_blocks().iter().map(|b| (modules.stem(&b.id).unwrap_or_default().to_string(), &b.id)).collect();
    entries.sort();
    let mut by_name: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, id) in &entries {
        *by_name.entry(id.name.as_str()).or_default() += 1;
    }
    let mut lines = vec![format!("# Generated by protoml from project {}. Do not edit.", project.name.replace('\n', " "))];
    lines.extend(warning.map(str::to_string));
    let mut exported = Vec::new();
    for (stem, id) in &entries {
        if by_name[id.name.as_str()] > 1 {
            let alias = namespaced_alias(id);
            lines.push(format!("from .{stem} import {} as {alias}", id.name));
            exported.push(alias);
        } else {
            lines.push(format!("from .{stem} import {}", id.name));
            exported.push(id.name.clone());
        }
    }
    lines.push(String::new());
    let all: Vec<String> = exported.iter().map(|n| python::string_literal(n)).collect();
    lines.push(format!("__all__ = [{}]", all.join(", ")));
    let mut content = lines.join("\n");
    content.push('\n');
    GeneratedFile { path: INDEX_FILE.to_string(), content }
}

fn namespaced_alias(id: &ComponentId) -> String {
    format!("{}_{}", id.namespace.replace('-', "_"), id.name)
}

/// Generates the module file of one block.
pub fn generate_block(project: &Project, modules: &ModuleMap, block: &Block, warning: Option<&str>) -> Result<GeneratedFile, Vec<CodegenError>> {
    let mut ctx = EmitContext::new(project, modules, block)?;
    let order = ctx.order.clone();
    for n in &order {
        match n {
            NodeRef::Input => {
                for k in 0..block.input_count {
                    ctx.values.insert(Endpoint::input(k), format!("input_{k}"));
                }
            }
            NodeRef::Node(id) => {
                let node = block.node(id).expect("topological order only lists block nodes");
                if let Err(e) = emit_node(&mut ctx, node) {
                    ctx.errors.push(e);
                }
            }
            NodeRef::Output => {}
        }
    }
    let mut outputs = Vec::new();
    for k in 0..block.output_count {
        match ctx.gather(&Endpoint::output(k), Branch::None, &format!("y_{k}"), 2) {
            Ok(v) => outputs.push(v),
            Err(e) => ctx.errors.push(e),
        }
    }
    if !ctx.errors.is_empty() {
        return Err(ctx.errors);
    }
    let path = modules.path(&block.id).expect("every block has a module");
    Ok(GeneratedFile { path, content: ctx.assemble(&outputs, warning) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Init,
    Forward,
}

/// Accumulated state while emitting one block.
pub struct EmitContext<'a> {
    project: &'a Project,
    block: &'a Block,
    order: Vec<NodeRef>,
    /// Block parameter or local -> attribute name on `self`.
    stored: BTreeMap<String, String>,
    /// Node id -> instance attribute name (substitutes `${name}`).
    instances: BTreeMap<String, String>,
    /// Child block id -> class name as imported into this file.
    classes: BTreeMap<ComponentId, String>,
    sibling_imports: BTreeSet<String>,
    values: HashMap<Endpoint, String>,
    imports: Vec<String>,
    seen_imports: BTreeSet<String>,
    extras: Vec<String>,
    seen_extras: BTreeSet<ComponentId>,
    init: Vec<String>,
    forward: Vec<String>,
    errors: Vec<CodegenError>,
}

impl<'a> EmitContext<'a> {
    fn new(project: &'a Project, modules: &ModuleMap, block: &'a Block) -> Result<Self, Vec<CodegenError>> {
        let err = |code, message: String| vec![CodegenError { code, block: block.id.to_string(), node: None, message }];
        let order = topo_sort(block).map_err(|cycle| err("CYCLE", format!("nodes form a cycle: {{{}}}", cycle.join(", "))))?;

        let mut used: BTreeSet<String> = BTreeSet::new();
        let mut stored = BTreeMap::new();
        for name in block.params.iter().map(|p| &p.name).chain(block.locals.iter().map(|l| &l.name)) {
            let mut attr = name.clone();
            while is_module_attr(&attr) || used.contains(&attr) {
                attr.push('_');
            }
            used.insert(attr.clone());
            stored.insert(name.clone(), attr);
        }

        let mut instances = BTreeMap::new();
        for node in &block.nodes {
            let conditional = node.conditional.is_some();
            let taken = |base: &str| {
                let candidates = if conditional { vec![format!("{base}_then"), format!("{base}_else")] } else { vec![base.to_string()] };
                candidates.iter().any(|c| used.contains(c) || is_module_attr(c) || is_keyword(c))
            };
            let mut ordinal = 0;
            let mut base = format!("{}_{ordinal}", node.id);
            while taken(&base) {
                ordinal += 1;
                base = format!("{}_{ordinal}", node.id);
            }
            if conditional {
                used.insert(format!("{base}_then"));
                used.insert(format!("{base}_else"));
            } else {
                used.insert(base.clone());
            }
            instances.insert(node.id.clone(), base);
        }

        // Child block classes, aliased when two share a name or collide with
        // a constructor variable or this block's own class.
        let mut children: BTreeMap<ComponentId, ()> = BTreeMap::new();
        for r in block.referenced_components() {
            if let Some(ComponentDef::Block(b)) = project.resolve(r) {
                children.insert(b.id.clone(), ());
            }
        }
        let mut by_name: BTreeMap<&str, usize> = BTreeMap::new();
        for id in children.keys() {
            *by_name.entry(id.name.as_str()).or_default() += 1;
        }
        let mut classes = BTreeMap::new();
        let mut sibling_imports = BTreeSet::new();
        for id in children.keys() {
            let clash = |n: &str| n == block.id.name || stored.contains_key(n) || n == "torch" || n == "nn";
            let mut alias = if by_name[id.name.as_str()] > 1 || clash(&id.name) { namespaced_alias(id) } else { id.name.clone() };
            while clash(&alias) {
                alias.push('_');
            }
            let Some(stem) = modules.stem(id) else {
                return Err(err("UNRESOLVED", format!("no module for block `{id}`")));
            };
            if alias == id.name {
                sibling_imports.insert(format!("from .{stem} import {}", id.name));
            } else {
                sibling_imports.insert(format!("from .{stem} import {} as {alias}", id.name));
            }
            classes.insert(id.clone(), alias);
        }

        Ok(Self {
            project,
            block,
            order,
            stored,
            instances,
            classes,
            sibling_imports,
            values: HashMap::new(),
            imports: Vec::new(),
            seen_imports: ["import torch", "import torch.nn as nn"].iter().map(|s| s.to_string()).collect(),
            extras: Vec::new(),
            seen_extras: BTreeSet::new(),
            init: Vec::new(),
            forward: Vec::new(),
            errors: Vec::new(),
        })
    }

    fn error(&self, code: &'static str, node: &str, message: impl Into<String>) -> CodegenError {
        CodegenError { code, block: self.block.id.to_string(), node: Some(node.to_string()), message: message.into() }
    }

    /// Python source of a binding expression. In `__init__` parameters and
    /// locals are plain variables; in `forward` they are read from `self`.
    fn render(&self, expr: &Expr, phase: Phase, in_loop: bool) -> String {
        expr.render_with(&|name: &str| {
            if name == "repeat_index" {
                return if in_loop { "repeat_index".to_string() } else { "0".to_string() };
            }
            match (phase, self.stored.get(name)) {
                (Phase::Forward, Some(attr)) => format!("self.{attr}"),
                _ => name.to_string(),
            }
        })
    }

    fn use_mutator(&mut self, m: &Mutator) {
        for imp in &m.imports {
            let key = normalize_import(imp);
            if !key.is_empty() && self.seen_imports.insert(key.clone()) {
                self.imports.push(key);
            }
        }
        if let Some(extra) = &m.extra_code {
            if self.seen_extras.insert(m.id.clone()) {
                let lines = dedent(extra);
                if !lines.is_empty() {
                    self.extras.push(lines.join("\n"));
                }
            }
        }
    }

    /// The value arriving at `target`, emitting a join statement for fan-in.
    fn gather(&mut self, target: &Endpoint, branch: Branch, join_name: &str, depth: usize) -> Result<String, CodegenError> {
        let sources: Vec<Endpoint> = self.block.incoming(target).filter(|e| e.branch == branch).map(|e| e.from.clone()).collect();
        let node = target.node.to_string();
        let mut names = Vec::new();
        for s in &sources {
            match self.values.get(s) {
                Some(v) => names.push(v.clone()),
                None => return Err(self.error("UNRESOLVED", &node, format!("no value for `{s}` feeding port {}", target.port))),
            }
        }
        match names.len() {
            0 => Err(self.error("UNCONNECTED_INPUT", &node, format!("input port {} has no incoming edge", target.port))),
            1 => Ok(names.pop().unwrap()),
            _ => {
                let Some(policy) = self.block.join_policy(&target.node, target.port) else {
                    return Err(self.error(
                        "JOIN_WITHOUT_POLICY",
                        &node,
                        format!("port {} has {} incoming edges and no join policy", target.port, names.len()),
                    ));
                };
                let list = names.join(", ");
                let value = match policy.op {
                    JoinOp::Add => format!("torch.stack([{list}]).sum(dim=0)"),
                    JoinOp::Multiply => format!("torch.stack([{list}]).prod(dim=0)"),
                    JoinOp::Concat => format!("torch.cat([{list}], dim={})", policy.axis.unwrap_or(1)),
                };
                self.forward.push(format!("{}{join_name} = {value}", INDENT.repeat(depth)));
                Ok(join_name.to_string())
            }
        }
    }

    fn assemble(&self, outputs: &[String], warning: Option<&str>) -> String {
        let block = self.block;
        let mut out = vec![format!("# Generated by protoml from {}. Do not edit.", block.id)];
        out.extend(warning.map(str::to_string));
        out.push("import torch".into());
        out.push("import torch.nn as nn".into());
        out.extend(self.imports.iter().cloned());
        out.extend(self.sibling_imports.iter().cloned());
        for extra in &self.extras {
            out.push(String::new());
            out.push(String::new());
            out.push(extra.clone());
        }
        out.push(String::new());
        out.push(String::new());
        out.push(format!("class {}(nn.Module):", block.id.name));

        out.extend(signature("__init__", &constructor_params(&block.params)));
        let pad = INDENT.repeat(2);
        out.push(format!("{pad}super().__init__()"));
        for p in &block.params {
            out.push(format!("{pad}self.{} = {}", self.stored[&p.name], p.name));
        }
        for l in &block.locals {
            out.push(format!("{pad}{} = {}", l.name, self.render(&l.value, Phase::Init, false)));
            out.push(format!("{pad}self.{} = {}", self.stored[&l.name], l.name));
        }
        out.extend(self.init.iter().cloned());

        out.push(String::new());
        let args: Vec<String> = (0..block.input_count).map(|k| format!("input_{k}")).collect();
        out.extend(signature("forward", &args));
        out.extend(self.forward.iter().cloned());
        out.push(format!("{pad}return {}", outputs.join(", ")));
        let mut text = out.join("\n");
        text.push('\n');
        text
    }
}

/// `def name(self, ...):`, one parameter per line when too long.
fn signature(name: &str, params: &[String]) -> Vec<String> {
    let single = format!("{INDENT}def {name}(self{}):", params.iter().map(|p| format!(", {p}")).collect::<String>());
    if single.len() <= MAX_LINE {
        return vec![single];
    }
    let mut lines = vec![format!("{INDENT}def {name}(")];
    lines.push(format!("{INDENT}{INDENT}self,"));
    lines.extend(params.iter().map(|p| format!("{INDENT}{INDENT}{p},")));
    lines.push(format!("{INDENT}):"));
    lines
}

/// Required parameters first (no default), then optional ones with their
/// default or `None`, each group in declaration order.
fn constructor_params(params: &[ParamSpec]) -> Vec<String> {
    let required = params.iter().filter(|p| p.required).map(|p| p.name.clone());
    let optional = params.iter().filter(|p| !p.required).map(|p| match &p.default {
        Some(v) => format!("{}={v}", p.name),
        None => format!("{}=None", p.name),
    });
    required.chain(optional).collect()
}

/// How a node's component is referenced from `forward` and `__init__`.
struct Instance<'d> {
    def: ComponentDef<'d>,
    params: &'d BTreeMap<String, Expr>,
    /// `${name}` replacement, e.g. `conv_0` or `conv_0[repeat_index]`.
    attr: String,
}

/// Emits the init and forward statements of one node.
pub fn emit_node(ctx: &mut EmitContext<'_>, node: &NodeInstance) -> Result<(), CodegenError> {
    let project = ctx.project;
    let base = ctx.instances[&node.id].clone();
    let resolve = |r| project.resolve(r).ok_or_else(|| ctx.error("UNRESOLVED", &node.id, format!("`{r}` does not resolve")));
    let def = resolve(&node.component)?;
    let outputs: Vec<String> = (0..def.output_count()).map(|k| format!("x_{}_{k}", node.id)).collect();

    if let Some(cond) = &node.conditional {
        let other = resolve(&cond.else_component)?;
        let sides = [
            (Instance { def, params: &node.params, attr: format!("{base}_then") }, Branch::True, "t"),
            (Instance { def: other, params: &cond.else_params, attr: format!("{base}_else") }, Branch::False, "f"),
        ];
        for (inst, _, _) in &sides {
            emit_init(ctx, &node.id, inst, false, 2)?;
        }
        ctx.forward.push(format!("{}if {}:", INDENT.repeat(2), ctx.render(&cond.condition, Phase::Forward, false)));
        for (i, (inst, branch, tag)) in sides.iter().enumerate() {
            if i == 1 {
                ctx.forward.push(format!("{}else:", INDENT.repeat(2)));
            }
            let before = ctx.forward.len();
            let mut inputs = Vec::new();
            for k in 0..inst.def.input_count() {
                inputs.push(ctx.gather(&Endpoint::node(&node.id, k), *branch, &format!("x_{}_in{k}_{tag}", node.id), 3)?);
            }
            emit_forward(ctx, &node.id, inst, &inputs, &outputs, false, 3)?;
            if ctx.forward.len() == before {
                ctx.forward.push(format!("{}pass", INDENT.repeat(3)));
            }
        }
        for (k, v) in outputs.into_iter().enumerate() {
            ctx.values.insert(Endpoint::node(&node.id, k), v);
        }
        return Ok(());
    }

    let mut inputs = Vec::new();
    for k in 0..def.input_count() {
        inputs.push(ctx.gather(&Endpoint::node(&node.id, k), Branch::None, &format!("x_{}_in{k}", node.id), 2)?);
    }

    match &node.repeat {
        None => {
            let inst = Instance { def, params: &node.params, attr: base };
            emit_init(ctx, &node.id, &inst, false, 2)?;
            emit_forward(ctx, &node.id, &inst, &inputs, &outputs, false, 2)?;
        }
        Some(count) => {
            if def.input_count() != def.output_count() {
                return Err(ctx.error(
                    "REPEAT_ARITY",
                    &node.id,
                    format!("`{}` has {} inputs and {} outputs, a repeated component needs as many of each", def.id(), def.input_count(), def.output_count()),
                ));
            }
            let pad = INDENT.repeat(2);
            let k_init = ctx.render(count, Phase::Init, false);
            let inst = Instance { def, params: &node.params, attr: format!("{base}[repeat_index]") };
            let before = ctx.init.len();
            emit_init(ctx, &node.id, &inst, true, 3)?;
            let body: Vec<String> = ctx.init.split_off(before);
            match def {
                ComponentDef::Block(_) => {
                    ctx.init.push(format!("{pad}self.{base} = nn.ModuleList()"));
                    ctx.init.push(format!("{pad}for repeat_index in range({k_init}):"));
                    ctx.init.extend(body);
                }
                ComponentDef::Mutator(_) if !body.is_empty() => {
                    ctx.init.push(format!("{pad}self.{base} = nn.ModuleList([nn.Identity() for _ in range({k_init})])"));
                    ctx.init.push(format!("{pad}for repeat_index in range({k_init}):"));
                    ctx.init.extend(body);
                }
                ComponentDef::Mutator(_) => {}
            }

            // Iteration i + 1 consumes the outputs of iteration i.
            for (input, output) in inputs.iter().zip(&outputs) {
                ctx.forward.push(format!("{pad}{output} = {input}"));
            }
            ctx.forward.push(format!("{pad}for repeat_index in range({}):", ctx.render(count, Phase::Forward, false)));
            let before = ctx.forward.len();
            let multi_line = matches!(def, ComponentDef::Mutator(m) if dedent(&m.forward_code).len() > 1);
            let loop_inputs: Vec<String> = if multi_line {
                (0..outputs.len()).map(|k| format!("x_{}_in{k}", node.id)).collect()
            } else {
                outputs.clone()
            };
            if multi_line {
                for (tmp, cur) in loop_inputs.iter().zip(&outputs) {
                    ctx.forward.push(format!("{}{tmp} = {cur}", INDENT.repeat(3)));
                }
            }
            emit_forward(ctx, &node.id, &inst, &loop_inputs, &outputs, true, 3)?;
            if ctx.forward.len() == before {
                ctx.forward.push(format!("{}pass", INDENT.repeat(3)));
            }
        }
    }
    for (k, v) in outputs.into_iter().enumerate() {
        ctx.values.insert(Endpoint::node(&node.id, k), v);
    }
    Ok(())
}

/// Token replacements for one mutator instance.
fn token_env(ctx: &EmitContext<'_>, m: &Mutator, inst: &Instance<'_>, inputs: &[String], outputs: &[String], phase: Phase, in_loop: bool) -> TokenEnv {
    let mut env = TokenEnv::new();
    env.insert(Token::Name, inst.attr.clone());
    env.insert(Token::RepeatIndex, if in_loop { "repeat_index".into() } else { "0".into() });
    for (k, v) in inputs.iter().enumerate() {
        env.insert(Token::Input(k), v.clone());
    }
    for (k, v) in outputs.iter().enumerate() {
        env.insert(Token::Output(k), v.clone());
    }
    for spec in &m.params {
        let text = match inst.params.get(&spec.name) {
            Some(e) if e.is_atomic() => ctx.render(e, phase, in_loop),
            Some(e) => format!("({})", ctx.render(e, phase, in_loop)),
            None => spec.default.as_ref().map(|v| v.to_string()).unwrap_or_else(|| "None".into()),
        };
        env.insert(Token::Prop(spec.name.clone()), text);
    }
    env
}

fn fill(ctx: &EmitContext<'_>, node: &str, template: &str, env: &TokenEnv, depth: usize) -> Result<Vec<String>, CodegenError> {
    let text = substitute_tokens(template, env).map_err(|e| ctx.error("UNKNOWN_TOKEN", node, e.to_string()))?;
    let pad = INDENT.repeat(depth);
    Ok(dedent(&text).into_iter().map(|l| if l.is_empty() { l } else { format!("{pad}{l}") }).collect())
}

fn emit_init(ctx: &mut EmitContext<'_>, node: &str, inst: &Instance<'_>, in_loop: bool, depth: usize) -> Result<(), CodegenError> {
    match inst.def {
        ComponentDef::Mutator(m) => {
            ctx.use_mutator(m);
            let env = token_env(ctx, m, inst, &[], &[], Phase::Init, in_loop);
            // init templates never see port tokens; the load-time check guarantees it
            let lines = fill(ctx, node, &m.init_code, &env, depth)?;
            ctx.init.extend(lines);
        }
        ComponentDef::Block(b) => {
            let class = ctx.classes[&b.id].clone();
            let kwargs: Vec<(String, String)> = b
                .params
                .iter()
                .filter_map(|p| inst.params.get(&p.name).map(|e| (p.name.clone(), ctx.render(e, Phase::Init, in_loop))))
                .collect();
            let lines = match inst.attr.strip_suffix("[repeat_index]") {
                Some(list) => call_lines(depth, &format!("self.{list}.append("), &class, &kwargs, ")"),
                None => call_lines(depth, &format!("self.{} = ", inst.attr), &class, &kwargs, ""),
            };
            ctx.init.extend(lines);
        }
    }
    Ok(())
}

fn emit_forward(
    ctx: &mut EmitContext<'_>,
    node: &str,
    inst: &Instance<'_>,
    inputs: &[String],
    outputs: &[String],
    in_loop: bool,
    depth: usize,
) -> Result<(), CodegenError> {
    match inst.def {
        ComponentDef::Mutator(m) => {
            let env = token_env(ctx, m, inst, inputs, outputs, Phase::Forward, in_loop);
            let lines = fill(ctx, node, &m.forward_code, &env, depth)?;
            ctx.forward.extend(lines);
        }
        ComponentDef::Block(_) => {
            ctx.forward.push(format!("{}{} = self.{}({})", INDENT.repeat(depth), outputs.join(", "), inst.attr, inputs.join(", ")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::load_component;
    use crate::model::{JoinPolicy, ParamType};

    const RELU: &str = r#"{
        "format_version": 1, "kind": "mutator", "id": "std/ReLU",
        "imports": ["import torch.nn as nn"], "inputs": 1, "outputs": 1,
        "input_shapes": [["*"]], "output_shapes": ["in[0]"],
        "init": "self.${name} = nn.ReLU()",
        "forward": "${output} = self.${name}(${input})"
    }"#;

    fn relu() -> Mutator {
        match load_component(RELU).unwrap() {
            crate::model::Component::Mutator(m) => m,
            _ => unreachable!(),
        }
    }

    fn project_with(blocks: Vec<Block>) -> Project {
        let mut p = Project::new("demo");
        p.add_mutator(relu());
        p.entry_block = blocks.first().map(|b| b.id.clone());
        for b in blocks {
            p.add_block(b);
        }
        p
    }

    fn generate(p: &Project, id: &ComponentId) -> String {
        let files = generate_files(p, None).unwrap();
        let path = ModuleMap::new(p).path(id).unwrap();
        files.into_iter().find(|f| f.path == path).unwrap().content
    }

    #[test]
    fn identity_block_returns_its_argument() {
        let mut b = Block::new(ComponentId::new("demo", "Passthrough"), 1, 1);
        b.connect(Endpoint::input(0), Endpoint::output(0));
        let p = project_with(vec![b.clone()]);
        let text = generate(&p, &b.id);
        assert!(text.contains("    def forward(self, input_0):\n        return input_0\n"), "{text}");
    }

    #[test]
    fn relu_block() {
        let mut b = Block::new(ComponentId::new("demo", "ReLUBlock"), 1, 1);
        b.nodes.push(NodeInstance::new("relu", ComponentId::new("std", "ReLU")));
        b.connect(Endpoint::input(0), Endpoint::node("relu", 0));
        b.connect(Endpoint::node("relu", 0), Endpoint::output(0));
        let p = project_with(vec![b.clone()]);
        let text = generate(&p, &b.id);
        let expected = "\
# Generated by protoml from demo/ReLUBlock. Do not edit.
import torch
import torch.nn as nn


class ReLUBlock(nn.Module):
    def __init__(self):
        super().__init__()
        self.relu_0 = nn.ReLU()

    def forward(self, input_0):
        x_relu_0 = self.relu_0(input_0)
        return x_relu_0
";
        assert_eq!(text, expected);
        assert_eq!(ModuleMap::new(&p).path(&b.id).unwrap(), "re_lu_block.py");
    }

    #[test]
    fn fan_in_add_then_call() {
        let mut b = Block::new(ComponentId::new("demo", "Residual"), 1, 1);
        b.nodes.push(NodeInstance::new("a", ComponentId::new("std", "ReLU")));
        let mut sum = NodeInstance::new("b", ComponentId::new("std", "ReLU"));
        sum.joins.insert(0, JoinPolicy::ADD);
        b.nodes.push(sum);
        b.connect(Endpoint::input(0), Endpoint::node("a", 0));
        b.connect(Endpoint::node("a", 0), Endpoint::node("b", 0));
        b.connect(Endpoint::input(0), Endpoint::node("b", 0));
        b.connect(Endpoint::node("b", 0), Endpoint::output(0));
        let p = project_with(vec![b.clone()]);
        let text = generate(&p, &b.id);
        assert!(text.contains("        x_b_in0 = torch.stack([x_a_0, input_0]).sum(dim=0)\n        x_b_0 = self.b_0(x_b_in0)\n"), "{text}");
    }

    #[test]
    fn missing_join_policy_is_a_hard_error() {
        let mut b = Block::new(ComponentId::new("demo", "Bad"), 1, 1);
        b.nodes.push(NodeInstance::new("a", ComponentId::new("std", "ReLU")));
        b.connect(Endpoint::input(0), Endpoint::node("a", 0));
        b.connect(Endpoint::input(0), Endpoint::node("a", 0));
        b.connect(Endpoint::node("a", 0), Endpoint::output(0));
        let p = project_with(vec![b]);
        let errs = generate_files(&p, None).unwrap_err();
        assert_eq!(errs[0].code, "JOIN_WITHOUT_POLICY");
        assert!(matches!(generate_project(&p, false), Err(GenerateError::Invalid(_))));
        assert!(matches!(generate_project(&p, true), Err(GenerateError::Codegen(_))));
    }

    #[test]
    fn repeated_mutator_and_block() {
        let mut inner = Block::new(ComponentId::new("demo", "Inner"), 1, 1);
        inner.params.push(ParamSpec::new("width", ParamType::Int).with_default(crate::expr::Value::Int(4)));
        inner.connect(Endpoint::input(0), Endpoint::output(0));

        let mut outer = Block::new(ComponentId::new("demo", "Outer"), 1, 1);
        outer.params.push(ParamSpec::new("depth", ParamType::Int).with_default(crate::expr::Value::Int(3)));
        let mut acts = NodeInstance::new("act", ComponentId::new("std", "ReLU"));
        acts.repeat = Some(Expr::name("depth"));
        outer.nodes.push(acts);
        let mut inners = NodeInstance::new("inner", inner.id.clone()).with_param("width", Expr::parse("repeat_index + 1").unwrap());
        inners.repeat = Some(Expr::int(2));
        outer.nodes.push(inners);
        outer.connect(Endpoint::input(0), Endpoint::node("act", 0));
        outer.connect(Endpoint::node("act", 0), Endpoint::node("inner", 0));
        outer.connect(Endpoint::node("inner", 0), Endpoint::output(0));
        let p = project_with(vec![outer.clone(), inner]);
        let text = generate(&p, &outer.id);
        let expected = "\
# Generated by protoml from demo/Outer. Do not edit.
import torch
import torch.nn as nn
from .inner import Inner


class Outer(nn.Module):
    def __init__(self, depth=3):
        super().__init__()
        self.depth = depth
        self.act_0 = nn.ModuleList([nn.Identity() for _ in range(depth)])
        for repeat_index in range(depth):
            self.act_0[repeat_index] = nn.ReLU()
        self.inner_0 = nn.ModuleList()
        for repeat_index in range(2):
            self.inner_0.append(Inner(width=repeat_index + 1))

    def forward(self, input_0):
        x_act_0 = input_0
        for repeat_index in range(self.depth):
            x_act_0 = self.act_0[repeat_index](x_act_0)
        x_inner_0 = x_act_0
        for repeat_index in range(2):
            x_inner_0 = self.inner_0[repeat_index](x_inner_0)
        return x_inner_0
";
        assert_eq!(text, expected);
    }

    #[test]
    fn conditional_constructs_both_branches() {
        let mut b = Block::new(ComponentId::new("demo", "Maybe"), 1, 1);
        b.params.push(ParamSpec::new("use_act", ParamType::Bool).with_default(crate::expr::Value::Bool(true)));
        let mut node = NodeInstance::new("gate", ComponentId::new("std", "ReLU"));
        node.conditional = Some(crate::model::Conditional {
            condition: Expr::name("use_act"),
            else_component: crate::model::ComponentRef::to(ComponentId::new("std", "ReLU")),
            else_params: BTreeMap::new(),
        });
        b.nodes.push(node);
        b.edges.push(crate::model::Edge { from: Endpoint::input(0), to: Endpoint::node("gate", 0), branch: Branch::True });
        b.edges.push(crate::model::Edge { from: Endpoint::input(0), to: Endpoint::node("gate", 0), branch: Branch::False });
        b.connect(Endpoint::node("gate", 0), Endpoint::output(0));
        let p = project_with(vec![b.clone()]);
        let text = generate(&p, &b.id);
        assert!(text.contains("        self.gate_0_then = nn.ReLU()\n        self.gate_0_else = nn.ReLU()\n"), "{text}");
        assert!(
            text.contains(
                "        if self.use_act:\n            x_gate_0 = self.gate_0_then(input_0)\n        else:\n            x_gate_0 = self.gate_0_else(input_0)\n"
            ),
            "{text}"
        );
    }

    #[test]
    fn stored_names_avoid_module_attributes() {
        let mut b = Block::new(ComponentId::new("demo", "Clash"), 1, 1);
        b.params.push(ParamSpec::new("training", ParamType::Bool).with_default(crate::expr::Value::Bool(false)));
        b.connect(Endpoint::input(0), Endpoint::output(0));
        let p = project_with(vec![b.clone()]);
        assert!(generate(&p, &b.id).contains("self.training_ = training\n"));
    }

    #[test]
    fn generation_is_deterministic_and_indexed() {
        let mut b = Block::new(ComponentId::new("demo", "Passthrough"), 2, 2);
        b.connect(Endpoint::input(0), Endpoint::output(1));
        b.connect(Endpoint::input(1), Endpoint::output(0));
        let p = project_with(vec![b]);
        let a = generate_files(&p, None).unwrap();
        assert_eq!(a, generate_files(&p, None).unwrap());
        assert_eq!(a.last().unwrap().path, INDEX_FILE);
        assert!(a.last().unwrap().content.contains("from .passthrough import Passthrough\n"));
        assert!(a[0].content.contains("return input_1, input_0\n"));
    }
}
