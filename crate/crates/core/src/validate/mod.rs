//! Two-tier validation: parameter checks and shape propagation, on top of
//! structural graph checks.

pub mod graph;
pub mod params;
pub mod propagate;

use std::collections::{BTreeMap, BTreeSet};

use crate::diagnostics::{Diagnostic, Location, ValidationReport};
use crate::model::Project;
use crate::shape::{unify_shapes, Shape, UnifyError};

pub use graph::{check_graph, find_cycles, topo_sort};
pub use params::{bind_params, validate_params, Args, Env, Props};
pub use propagate::{default_args, join_shapes, propagate_shapes, symbolic_args, symbolic_inputs, Propagator};

/// Validates every block of the project.
///
/// The entry block is walked with its parameter defaults and the project's
/// sample inputs (symbolic inputs when there are none), recursing into every
/// block instance with concrete arguments. Every other block is also walked on
/// its own with symbolic parameters and inputs. Blocks with graph errors are
/// not propagated.
pub fn validate_project(project: &Project) -> ValidationReport {
    let mut diags: Vec<Diagnostic> = Vec::new();
    let blocks = project.all_blocks();
    let mut broken: BTreeSet<String> = BTreeSet::new();
    for b in &blocks {
        let d = check_graph(b, project);
        if d.iter().any(Diagnostic::is_error) {
            broken.insert(b.id.to_string());
        }
        diags.extend(d);
    }

    let mut report = ValidationReport::default();
    let mut prop = Propagator::new(project);
    let entry = project.entry_block.as_ref().and_then(|id| project.block(id));
    match entry {
        None => diags.push(Diagnostic::warning("NO_ENTRY_CONTENT", Location::default(), "the project has no entry block")),
        Some(b) if b.nodes.is_empty() && b.edges.is_empty() => {
            diags.push(Diagnostic::warning("NO_ENTRY_CONTENT", Location::block(b.id.to_string()), "the entry block is empty"))
        }
        Some(_) => {}
    }
    if let Some(b) = entry {
        if !broken.contains(&b.id.to_string()) {
            let args = default_args(b);
            let inputs = match &project.sample_inputs {
                Some(samples) => {
                    let shapes: Vec<Shape> = samples.iter().map(|d| Shape::concrete(d)).collect();
                    check_sample_inputs(b, &args, &shapes, &mut diags);
                    shapes
                }
                None => symbolic_inputs(b, &args),
            };
            let outs = prop.walk(b, &args, &inputs);
            report.block_outputs.insert(b.id.to_string(), outs);
        }
    }
    for b in &blocks {
        if Some(b.id.clone()) == entry.map(|e| e.id.clone()) || broken.contains(&b.id.to_string()) {
            continue;
        }
        let args = symbolic_args(b);
        let inputs = symbolic_inputs(b, &args);
        let outs = prop.walk(b, &args, &inputs);
        report.block_outputs.insert(b.id.to_string(), outs);
    }
    diags.extend(prop.into_diagnostics());
    report.diagnostics = order_diagnostics(project, diags);
    report
}

fn check_sample_inputs(block: &crate::model::Block, args: &Args, shapes: &[Shape], diags: &mut Vec<Diagnostic>) {
    let Some(patterns) = &block.input_patterns else { return };
    let props = Props(args);
    let mut binding = Default::default();
    for (k, (p, s)) in patterns.iter().zip(shapes).enumerate() {
        let Ok(resolved) = p.resolve(&props) else { continue };
        match unify_shapes(&resolved, s, &binding) {
            Ok(b) => binding = b,
            Err(e) => {
                let code = if matches!(e, UnifyError::Rank { .. }) { "SHAPE_RANK_MISMATCH" } else { "SHAPE_MISMATCH" };
                diags.push(Diagnostic::error(
                    code,
                    Location::block(block.id.to_string()).node("Input").port(k),
                    format!("sample input {k} is {s}, the block expects {p}: {e}"),
                ));
                return;
            }
        }
    }
}

/// Deduplicates and orders diagnostics by block, topological node position,
/// then port.
pub fn order_diagnostics(project: &Project, diags: Vec<Diagnostic>) -> Vec<Diagnostic> {
    let mut positions: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for b in project.all_blocks() {
        positions.insert(b.id.to_string(), graph::node_positions(b));
    }
    let unique: BTreeSet<Diagnostic> = diags.into_iter().collect();
    let mut out: Vec<Diagnostic> = unique.into_iter().collect();
    out.sort_by_cached_key(|d| {
        let pos = match &d.location.node {
            None => 0,
            Some(n) => positions.get(&d.location.block).and_then(|p| p.get(n)).copied().unwrap_or(usize::MAX),
        };
        (d.location.block.clone(), pos, d.location.port, d.location.param.clone(), d.severity, d.code, d.message.clone())
    });
    out
}
