//! Symbolic shape propagation with skip-and-warn semantics.

use std::collections::{BTreeMap, HashMap};

use crate::diagnostics::{Diagnostic, Location};
use crate::expr::{Binding, Expr, Ty, Value};
use crate::model::{Block, Branch, ComponentDef, Endpoint, JoinOp, JoinPolicy, Mutator, NodeInstance, NodeRef, Project};
use crate::shape::{unify_shapes, Dim, OutputShape, Shape, ShapeConflict, ShapePattern, UnifyError};

use super::graph::topo_sort;
use super::params::{bind_params, Args, Env, Props};

const MAX_DEPTH: usize = 64;

/// Walks blocks node by node, recursing into block instances with their
/// concrete argument values.
pub struct Propagator<'p> {
    project: &'p Project,
    diags: Vec<Diagnostic>,
    memo: HashMap<String, Vec<Shape>>,
    depth: usize,
}

impl<'p> Propagator<'p> {
    pub fn new(project: &'p Project) -> Self {
        Self { project, diags: Vec::new(), memo: HashMap::new(), depth: 0 }
    }

    pub fn into_diagnostics(self) -> Vec<Diagnostic> {
        self.diags
    }

    /// Output shapes of `block` for the given arguments and input shapes.
    /// Missing inputs are treated as unknown.
    pub fn walk(&mut self, block: &Block, args: &Args, inputs: &[Shape]) -> Vec<Shape> {
        let unknown = vec![Shape::Unranked; block.output_count];
        let Ok(order) = topo_sort(block) else { return unknown };
        if self.depth >= MAX_DEPTH {
            return unknown;
        }
        let key = format!("{}|{args:?}|{inputs:?}", block.id);
        if let Some(hit) = self.memo.get(&key) {
            return hit.clone();
        }
        self.depth += 1;
        let env = Env::for_block(block, args, &mut self.diags);
        let mut values: HashMap<Endpoint, Shape> = HashMap::new();
        for k in 0..block.input_count {
            values.insert(Endpoint::input(k), inputs.get(k).cloned().unwrap_or(Shape::Unranked));
        }
        for n in &order {
            let NodeRef::Node(id) = n else { continue };
            let node = block.node(id).expect("topological order only lists block nodes");
            let outs = self.eval_node(block, &env, node, &values);
            for (k, s) in outs.into_iter().enumerate() {
                values.insert(Endpoint::node(id, k), s);
            }
        }
        let outputs: Vec<Shape> = (0..block.output_count).map(|k| self.gather(block, &values, &Endpoint::output(k), Branch::None)).collect();
        self.depth -= 1;
        self.memo.insert(key, outputs.clone());
        outputs
    }

    /// The value arriving at `target`, joining several edges per the port's policy.
    fn gather(&mut self, block: &Block, values: &HashMap<Endpoint, Shape>, target: &Endpoint, branch: Branch) -> Shape {
        let shapes: Vec<Shape> =
            block.incoming(target).filter(|e| e.branch == branch).map(|e| values.get(&e.from).cloned().unwrap_or(Shape::Unranked)).collect();
        match shapes.len() {
            0 => Shape::Unranked,
            1 => shapes.into_iter().next().unwrap(),
            _ => match block.join_policy(&target.node, target.port) {
                Some(policy) => {
                    let loc = Location::block(block.id.to_string()).node(target.node.to_string()).port(target.port);
                    let (shape, diag) = join_shapes(policy, &shapes);
                    if let Some((code, msg)) = diag {
                        self.diags.push(Diagnostic::error(code, loc, msg));
                    }
                    shape
                }
                None => Shape::Unranked,
            },
        }
    }

    fn eval_node(&mut self, block: &Block, env: &Env, node: &NodeInstance, values: &HashMap<Endpoint, Shape>) -> Vec<Shape> {
        let project = self.project;
        let loc = Location::block(block.id.to_string()).node(&node.id);
        let Some(def) = project.resolve(&node.component) else {
            return Vec::new();
        };
        let unknown = vec![Shape::Unranked; def.output_count()];

        if let Some(cond) = &node.conditional {
            let Some(other) = project.resolve(&cond.else_component) else { return unknown };
            let env0 = env.with_repeat_index(Some(0));
            let taken = self.eval_condition(&loc, &cond.condition, &env0);
            let true_in: Vec<Shape> =
                (0..def.input_count()).map(|k| self.gather(block, values, &Endpoint::node(&node.id, k), Branch::True)).collect();
            let false_in: Vec<Shape> =
                (0..other.input_count()).map(|k| self.gather(block, values, &Endpoint::node(&node.id, k), Branch::False)).collect();
            return match taken {
                Some(true) => self.instance(def, &loc, &node.params, &env0, &true_in, false),
                Some(false) => self.instance(other, &loc, &cond.else_params, &env0, &false_in, false),
                None => {
                    let t = self.instance(def, &loc, &node.params, &env0, &true_in, false);
                    let f = self.instance(other, &loc, &cond.else_params, &env0, &false_in, false);
                    t.iter()
                        .zip(&f)
                        .enumerate()
                        .map(|(k, (a, b))| {
                            if let Some(c) = a.first_conflict(b) {
                                self.diags.push(Diagnostic::error(
                                    "BRANCH_SHAPE",
                                    loc.clone().port(k),
                                    format!("output {k} is {a} on the true side and {b} on the false side ({})", describe_conflict(&c)),
                                ));
                            }
                            a.common(b)
                        })
                        .collect()
                }
            };
        }

        let inputs: Vec<Shape> = (0..def.input_count()).map(|k| self.gather(block, values, &Endpoint::node(&node.id, k), Branch::None)).collect();
        let Some(repeat) = &node.repeat else {
            return self.instance(def, &loc, &node.params, &env.with_repeat_index(Some(0)), &inputs, false);
        };
        if def.input_count() != def.output_count() {
            self.diags.push(Diagnostic::error(
                "REPEAT_ARITY",
                loc,
                format!("`{}` has {} inputs and {} outputs, a repeated component needs as many of each", def.id(), def.input_count(), def.output_count()),
            ));
            return unknown;
        }
        let count = match repeat.infer(env) {
            Ok(Ty::Int | Ty::Any) => match repeat.eval(env) {
                Ok(Some(Value::Int(k))) if k >= 1 => Some(k),
                Ok(Some(v)) => {
                    self.diags.push(Diagnostic::error("REPEAT_COUNT", loc, format!("repeat count `{repeat}` is {v}, it must be at least 1")));
                    return unknown;
                }
                Ok(None) => None,
                Err(e) => {
                    self.diags.push(Diagnostic::error("PARAM_EXPR", loc, format!("repeat count `{repeat}`: {e}")));
                    return unknown;
                }
            },
            Ok(ty) => {
                self.diags.push(Diagnostic::error("REPEAT_COUNT", loc, format!("repeat count `{repeat}` is {ty}, expected int")));
                return unknown;
            }
            Err(e) => {
                self.diags.push(Diagnostic::error("PARAM_EXPR", loc, format!("repeat count `{repeat}`: {e}")));
                return unknown;
            }
        };
        match count {
            Some(k) => {
                let mut cur = inputs;
                for i in 0..k {
                    cur = self.instance(def, &loc, &node.params, &env.with_repeat_index(Some(i)), &cur, i > 0);
                }
                cur
            }
            None => {
                // First iteration, then one iteration standing for every later index.
                let first = self.instance(def, &loc, &node.params, &env.with_repeat_index(Some(0)), &inputs, false);
                let later = self.instance(def, &loc, &node.params, &env.with_repeat_index(None), &first, true);
                first.iter().zip(&later).map(|(a, b)| a.common(b)).collect()
            }
        }
    }

    fn eval_condition(&mut self, loc: &Location, cond: &Expr, env: &Env) -> Option<bool> {
        match cond.infer(env) {
            Ok(Ty::Bool | Ty::Any) => {}
            Ok(ty) => {
                self.diags.push(Diagnostic::error("PARAM_TYPE", loc.clone(), format!("condition `{cond}` is {ty}, expected bool")));
                return None;
            }
            Err(e) => {
                self.diags.push(Diagnostic::error("PARAM_EXPR", loc.clone(), format!("condition `{cond}`: {e}")));
                return None;
            }
        }
        match cond.eval(env) {
            Ok(Some(Value::Bool(b))) => Some(b),
            Ok(Some(v)) => {
                self.diags.push(Diagnostic::error("PARAM_TYPE", loc.clone(), format!("condition `{cond}` evaluates to {v}, expected a boolean")));
                None
            }
            Ok(None) => None,
            Err(e) => {
                self.diags.push(Diagnostic::error("PARAM_EXPR", loc.clone(), format!("condition `{cond}`: {e}")));
                None
            }
        }
    }

    /// One evaluation of a component instance. `chained` marks repeat
    /// iterations after the first, whose inputs are the previous outputs.
    fn instance(&mut self, def: ComponentDef<'p>, loc: &Location, bindings: &BTreeMap<String, Expr>, env: &Env, inputs: &[Shape], chained: bool) -> Vec<Shape> {
        let (pd, args) = bind_params(loc, bindings, def.params(), env);
        self.diags.extend(pd);
        let unknown = vec![Shape::Unranked; def.output_count()];
        if let Some(patterns) = def.input_patterns() {
            if !self.check_inputs(loc, def, patterns, &args, inputs, chained) {
                if let ComponentDef::Mutator(m) = def {
                    if m.output_exprs.is_none() {
                        self.skipped(m, loc);
                    }
                }
                return unknown;
            }
        }
        match def {
            ComponentDef::Mutator(m) => self.mutator_outputs(m, loc, &args, inputs),
            ComponentDef::Block(b) => {
                let derived = self.walk(b, &args, inputs);
                let Some(declared) = &b.output_exprs else { return derived };
                let props = Props(&args);
                declared
                    .iter()
                    .zip(derived)
                    .enumerate()
                    .map(|(k, (expr, got))| match expr.eval(inputs, &props) {
                        Ok(want) => {
                            if let Some(c) = want.first_conflict(&got) {
                                self.diags.push(Diagnostic::error(
                                    "BLOCK_CONTRACT",
                                    Location::block(b.id.to_string()).node("Output").port(k),
                                    format!("declared output {k} is {want} but the graph produces {got} ({})", describe_conflict(&c)),
                                ));
                                want
                            } else {
                                want.refine(&got)
                            }
                        }
                        Err(e) => {
                            self.diags.push(Diagnostic::error("SHAPE_EVAL", loc.clone(), format!("output {k} of `{}`: {e}", b.id)));
                            Shape::Unranked
                        }
                    })
                    .collect()
            }
        }
    }

    fn check_inputs(&mut self, loc: &Location, def: ComponentDef<'_>, patterns: &[ShapePattern], args: &Args, inputs: &[Shape], chained: bool) -> bool {
        let props = Props(args);
        let mut binding = Default::default();
        for (k, (pattern, shape)) in patterns.iter().zip(inputs).enumerate() {
            let resolved = match pattern.resolve(&props) {
                Ok(r) => r,
                Err(e) => {
                    self.diags.push(Diagnostic::error("SHAPE_EVAL", loc.clone().port(k), format!("input pattern {pattern} of `{}`: {e}", def.id())));
                    return false;
                }
            };
            match unify_shapes(&resolved, shape, &binding) {
                Ok(b) => binding = b,
                Err(e) => {
                    let code = match (chained, &e) {
                        (true, _) => "REPEAT_SHAPE",
                        (false, UnifyError::Rank { .. }) => "SHAPE_RANK_MISMATCH",
                        (false, UnifyError::Dim { .. }) => "SHAPE_MISMATCH",
                    };
                    let shown: Vec<String> = resolved.iter().map(|d| d.to_string()).collect();
                    let prefix = if chained { "repeated output fed back as " } else { "" };
                    self.diags.push(Diagnostic::error(
                        code,
                        loc.clone().port(k),
                        format!("{prefix}input {k} of `{}` is {shape}, expected [{}]: {e}", def.id(), shown.join(", ")),
                    ));
                    return false;
                }
            }
        }
        true
    }

    /// Once per node, however many times a repeat evaluates it.
    fn skipped(&mut self, m: &Mutator, loc: &Location) {
        if self.diags.iter().any(|d| d.code == "VALIDATION_SKIPPED" && d.location == *loc) {
            return;
        }
        self.diags.push(Diagnostic::warning(
            "VALIDATION_SKIPPED",
            loc.clone(),
            format!("`{}` declares no output shapes; shapes after this node are not checked", m.id),
        ));
    }

    fn mutator_outputs(&mut self, m: &Mutator, loc: &Location, args: &Args, inputs: &[Shape]) -> Vec<Shape> {
        let Some(exprs) = &m.output_exprs else {
            self.skipped(m, loc);
            return vec![Shape::Unranked; m.output_count];
        };
        let props = Props(args);
        exprs
            .iter()
            .enumerate()
            .map(|(k, e)| match e.eval(inputs, &props) {
                Ok(s) => s,
                Err(err) => {
                    let shown = match e {
                        OutputShape::SameAs(i) => format!("in[{i}]"),
                        OutputShape::Dims(d) => format!("[{}]", d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")),
                    };
                    let ins: Vec<String> = inputs.iter().map(|s| s.to_string()).collect();
                    self.diags.push(Diagnostic::error(
                        "SHAPE_EVAL",
                        loc.clone(),
                        format!("output {k} of `{}` ({shown}) for inputs {}: {err}", m.id, ins.join(", ")),
                    ));
                    Shape::Unranked
                }
            })
            .collect()
    }
}

fn describe_conflict(c: &ShapeConflict) -> String {
    match c {
        ShapeConflict::Rank(a, b) => format!("rank {a} vs {b}"),
        ShapeConflict::Dim { axis, left, right } => format!("axis {axis}: {left} vs {right}"),
    }
}

/// Shape produced by a join, with the error code and message when the inputs
/// cannot be joined.
pub fn join_shapes(policy: JoinPolicy, shapes: &[Shape]) -> (Shape, Option<(&'static str, String)>) {
    let shown = || shapes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", ");
    match policy.op {
        JoinOp::Add | JoinOp::Multiply => {
            let mut acc = shapes[0].clone();
            for s in &shapes[1..] {
                if let Some(c) = acc.first_conflict(s) {
                    let code = if matches!(c, ShapeConflict::Rank(..)) { "SHAPE_RANK_MISMATCH" } else { "SHAPE_MISMATCH" };
                    return (Shape::Unranked, Some((code, format!("{} join needs identical shapes, got {} ({})", policy.op.as_str(), shown(), describe_conflict(&c)))));
                }
                acc = acc.refine(s);
            }
            (acc, None)
        }
        JoinOp::Concat => {
            let axis = policy.axis.unwrap_or(0);
            let ranked: Vec<&Vec<Dim>> = shapes
                .iter()
                .filter_map(|s| match s {
                    Shape::Ranked(d) => Some(d),
                    Shape::Unranked => None,
                })
                .collect();
            let Some(first) = ranked.first() else { return (Shape::Unranked, None) };
            let rank = first.len();
            if let Some(bad) = ranked.iter().find(|d| d.len() != rank) {
                return (
                    Shape::Unranked,
                    Some(("SHAPE_RANK_MISMATCH", format!("concat join needs equal ranks, got {} (rank {rank} vs {})", shown(), bad.len()))),
                );
            }
            let pos = if axis < 0 { axis + rank as i64 } else { axis };
            if pos < 0 || pos >= rank as i64 {
                return (Shape::Unranked, Some(("JOIN_AXIS", format!("concat axis {axis} is out of range for rank {rank}"))));
            }
            let pos = pos as usize;
            let mut dims = first.to_vec();
            for d in &ranked[1..] {
                for a in (0..rank).filter(|a| *a != pos) {
                    match (dims[a], d[a]) {
                        (Dim::Known(x), Dim::Known(y)) if x != y => {
                            return (
                                Shape::Unranked,
                                Some(("SHAPE_MISMATCH", format!("concat join on axis {axis} needs equal sizes elsewhere, got {} (axis {a}: {x} vs {y})", shown()))),
                            );
                        }
                        (Dim::Unknown, y) => dims[a] = y,
                        _ => {}
                    }
                }
            }
            let total: Option<u64> =
                if ranked.len() == shapes.len() { ranked.iter().map(|d| d[pos].known()).sum::<Option<u64>>() } else { None };
            dims[pos] = total.map(Dim::Known).unwrap_or(Dim::Unknown);
            (Shape::Ranked(dims), None)
        }
    }
}

/// Public form of one propagation run: output shapes of `block` and the
/// diagnostics raised on the way (unsorted).
pub fn propagate_shapes(project: &Project, block: &Block, input_shapes: &[Shape], args: &Args) -> (Vec<Shape>, Vec<Diagnostic>) {
    let mut p = Propagator::new(project);
    let outs = p.walk(block, args, input_shapes);
    (outs, p.into_diagnostics())
}

/// Arguments for validating a block on its own: every parameter symbolic.
pub fn symbolic_args(block: &Block) -> Args {
    block.params.iter().map(|p| (p.name.clone(), Binding::Symbolic)).collect()
}

/// Arguments taking each parameter's default, symbolic where there is none.
pub fn default_args(block: &Block) -> Args {
    block.params.iter().map(|p| (p.name.clone(), p.default.clone().map(Binding::Known).unwrap_or(Binding::Symbolic))).collect()
}

/// Input shapes assumed for a block validated on its own.
pub fn symbolic_inputs(block: &Block, args: &Args) -> Vec<Shape> {
    let props = Props(args);
    (0..block.input_count)
        .map(|k| match &block.input_patterns {
            Some(p) => p[k].symbolic_shape(&props),
            None => Shape::Unranked,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(d: &[u64]) -> Shape {
        Shape::concrete(d)
    }

    #[test]
    fn add_join_requires_identical_shapes() {
        let (out, d) = join_shapes(JoinPolicy::ADD, &[s(&[8, 64]), s(&[8, 64])]);
        assert_eq!((out, d), (s(&[8, 64]), None));
        let (_, d) = join_shapes(JoinPolicy::ADD, &[s(&[8, 64]), s(&[8, 32])]);
        assert_eq!(d.unwrap().0, "SHAPE_MISMATCH");
        let (_, d) = join_shapes(JoinPolicy::MULTIPLY, &[s(&[8, 64]), s(&[8, 64, 1])]);
        assert_eq!(d.unwrap().0, "SHAPE_RANK_MISMATCH");
    }

    #[test]
    fn concat_sums_the_axis() {
        let (out, d) = join_shapes(JoinPolicy::concat(1), &[s(&[8, 64]), s(&[8, 32])]);
        assert_eq!((out, d), (s(&[8, 96]), None));
        let (out, _) = join_shapes(JoinPolicy::concat(-1), &[s(&[8, 64]), Shape::Ranked(vec![Dim::Unknown, Dim::Known(2)])]);
        assert_eq!(out, s(&[8, 66]));
        let (_, d) = join_shapes(JoinPolicy::concat(0), &[s(&[8, 64]), s(&[8, 32])]);
        assert_eq!(d.unwrap().0, "SHAPE_MISMATCH");
        let (_, d) = join_shapes(JoinPolicy::concat(2), &[s(&[8, 64]), s(&[8, 32])]);
        assert_eq!(d.unwrap().0, "JOIN_AXIS");
        let (out, d) = join_shapes(JoinPolicy::concat(0), &[s(&[8, 64]), Shape::Unranked]);
        assert_eq!((out, d), (Shape::Ranked(vec![Dim::Unknown, Dim::Known(64)]), None));
    }
}
