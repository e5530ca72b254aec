mod common;

use common::load_sample;
use protoml_core::diagnostics::{Diagnostic, ValidationReport};
use protoml_core::document::{project_from_documents, DocumentSet, PROJECT_MANIFEST};
use protoml_core::expr::Expr;
use protoml_core::model::{ComponentId, Project};
use protoml_core::shape::{Dim, Shape};
use protoml_core::validate::validate_project;
use serde_json::{json, Value as Json};

fn linear() -> Json {
    json!({
        "format_version": 1, "kind": "mutator", "id": "t/Linear",
        "imports": ["import torch.nn as nn"], "inputs": 1, "outputs": 1,
        "params": [
            {"name": "in_features", "type": "int", "required": true, "min": 1},
            {"name": "out_features", "type": "int", "required": true, "min": 1}
        ],
        "input_shapes": [["N", "props.in_features"]],
        "output_shapes": [["in[0][0]", "props.out_features"]],
        "init": "self.${name} = nn.Linear(${props.in_features}, ${props.out_features})",
        "forward": "${output} = self.${name}(${input})"
    })
}

fn opaque() -> Json {
    json!({
        "format_version": 1, "kind": "mutator", "id": "t/Opaque",
        "inputs": 1, "outputs": 1,
        "init": "self.${name} = nn.Identity()",
        "forward": "${output} = self.${name}(${input})"
    })
}

fn lin(id: &str, i: i64, o: i64) -> Json {
    json!({ "id": id, "component": "t/Linear", "params": { "in_features": i, "out_features": o } })
}

fn project(sample: Option<Vec<u64>>, nodes: Vec<Json>, edges: &[(&str, &str)], extra: Option<(&str, Json)>) -> Project {
    let mut m = json!({ "format_version": 1, "name": "t", "entry_block": "t/Net" });
    if let Some(s) = sample {
        m["sample_inputs"] = json!([s]);
    }
    let mut d = DocumentSet::new();
    d.insert(PROJECT_MANIFEST.into(), m);
    d.insert("mutators/t__Linear.json".into(), linear());
    d.insert("mutators/t__Opaque.json".into(), opaque());
    let mut sink = linear();
    sink["id"] = json!("t/Sink");
    sink.as_object_mut().unwrap().remove("output_shapes");
    d.insert("mutators/t__Sink.json".into(), sink);
    let edges: Vec<Json> = edges.iter().map(|(f, t)| json!({ "from": f, "to": t })).collect();
    let mut block = json!({ "format_version": 1, "kind": "block", "id": "t/Net", "inputs": 1, "outputs": 1, "nodes": nodes, "edges": edges });
    if let Some((k, v)) = extra {
        block[k] = v;
    }
    d.insert("blocks/t__Net.json".into(), block);
    project_from_documents(&d).unwrap()
}

fn codes(r: &ValidationReport) -> Vec<&'static str> {
    r.diagnostics.iter().map(|d| d.code).collect()
}

fn only<'a>(r: &'a ValidationReport, code: &str) -> &'a Diagnostic {
    let found: Vec<_> = r.diagnostics.iter().filter(|d| d.code == code).collect();
    assert_eq!(found.len(), 1, "{}", r.render_human());
    found[0]
}

fn known(dims: &[u64]) -> Shape {
    Shape::Ranked(dims.iter().map(|d| Dim::Known(*d)).collect())
}

#[test]
fn linear_chain_has_no_graph_diagnostics() {
    let p = project(None, vec![lin("a", 4, 4)], &[("Input", "a"), ("a", "Output")], None);
    assert!(validate_project(&p).diagnostics.is_empty());
}

#[test]
fn two_node_cycle_is_reported_once_naming_both() {
    let p = project(None, vec![lin("a", 4, 4), lin("b", 4, 4)], &[("Input", "a"), ("a", "b"), ("b", "a"), ("b", "Output")], Some(("output_joins", json!({}))));
    let r = validate_project(&p);
    let d = only(&r, "GRAPH_CYCLE");
    assert!(d.message.contains('a') && d.message.contains('b'), "{d}");
    assert!(!r.passed());
}

#[test]
fn fan_in_without_a_join_policy() {
    let p = project(None, vec![lin("a", 4, 4), lin("b", 4, 4), lin("c", 4, 4)], &[("Input", "a"), ("Input", "b"), ("a", "c"), ("b", "c"), ("c", "Output")], None);
    let r = validate_project(&p);
    let d = only(&r, "MISSING_JOIN_POLICY");
    assert_eq!(d.location.node.as_deref(), Some("c"));
}

#[test]
fn compatible_chain_propagates_concrete_shapes() {
    let p = project(Some(vec![8, 32]), vec![lin("a", 32, 64), lin("b", 64, 10)], &[("Input", "a"), ("a", "b"), ("b", "Output")], None);
    let r = validate_project(&p);
    assert!(r.diagnostics.is_empty(), "{}", r.render_human());
    assert_eq!(r.block_outputs["t/Net"], vec![known(&[8, 10])]);
}

#[test]
fn contract_less_node_is_skipped_with_a_warning() {
    let nodes = vec![lin("a", 32, 64), json!({ "id": "mid", "component": "t/Opaque" }), lin("b", 7, 10)];
    let p = project(Some(vec![8, 32]), nodes, &[("Input", "a"), ("a", "mid"), ("mid", "b"), ("b", "Output")], None);
    let r = validate_project(&p);
    assert!(r.passed(), "{}", r.render_human());
    assert_eq!(codes(&r), ["VALIDATION_SKIPPED"]);
    assert_eq!(only(&r, "VALIDATION_SKIPPED").location.node.as_deref(), Some("mid"));
    // b's pattern still fixes the rank and the feature axis; the batch axis is lost
    assert_eq!(r.block_outputs["t/Net"], vec![Shape::Ranked(vec![Dim::Unknown, Dim::Known(10)])]);
}

#[test]
fn repeated_contract_less_node_warns_once() {
    let r = validate_project(&project(Some(vec![8, 64]), vec![json!({ "id": "mid", "component": "t/Opaque", "repeat": 3 })], &[("Input", "mid"), ("mid", "Output")], None));
    assert_eq!(codes(&r), ["VALIDATION_SKIPPED"]);
}

#[test]
fn contract_less_node_with_a_bad_input_still_warns() {
    let sink = json!({ "id": "sink", "component": "t/Sink", "params": { "in_features": 4, "out_features": 2 } });
    let r = validate_project(&project(Some(vec![8, 64]), vec![sink], &[("Input", "sink"), ("sink", "Output")], None));
    let mut got = codes(&r);
    got.sort();
    assert_eq!(got, ["SHAPE_MISMATCH", "VALIDATION_SKIPPED"]);
}

#[test]
fn add_join_of_unequal_shapes_is_a_mismatch() {
    let nodes = vec![lin("a", 16, 64), lin("b", 16, 32), json!({ "id": "c", "component": "t/Opaque", "joins": { "0": { "op": "add" } } })];
    let p = project(Some(vec![8, 16]), nodes, &[("Input", "a"), ("Input", "b"), ("a", "c"), ("b", "c"), ("c", "Output")], None);
    let r = validate_project(&p);
    let d = only(&r, "SHAPE_MISMATCH");
    assert_eq!(d.location.node.as_deref(), Some("c"));
    assert!(!r.passed());
}

#[test]
fn parameter_range_violation() {
    let p = project(None, vec![lin("a", 0, 4)], &[("Input", "a"), ("a", "Output")], None);
    let d = only(&validate_project(&p), "PARAM_RANGE").clone();
    assert_eq!(d.location.param.as_deref(), Some("in_features"));
}

#[test]
fn resnet_sample_validates_to_the_classifier_shape() {
    let r = validate_project(&load_sample("resnet50"));
    assert_eq!(r.errors().count(), 0, "{}", r.render_human());
    assert_eq!(r.block_outputs["resnet/Resnet"], vec![known(&[2, 1000])]);
}

/// The shortcut keeps full resolution while the main path downsamples.
fn broken_resnet() -> Project {
    let mut p = load_sample("resnet50");
    let b = p.blocks.get_mut(&ComponentId::new("resnet", "Bottleneck")).unwrap();
    let n = b.nodes.iter_mut().find(|n| n.id == "shortcut").unwrap();
    n.params.insert("stride".into(), Expr::int(1));
    p
}

#[test]
fn resnet_with_a_stride_mismatch_fails_at_the_skip_join() {
    let r = validate_project(&broken_resnet());
    assert!(!r.passed());
    let mismatches: Vec<_> = r.errors().filter(|d| d.code == "SHAPE_MISMATCH").collect();
    assert!(!mismatches.is_empty(), "{}", r.render_human());
    for d in mismatches {
        assert_eq!((d.location.block.as_str(), d.location.node.as_deref()), ("resnet/Bottleneck", Some("relu3")), "{d}");
    }
}

#[test]
fn empty_project_passes_with_a_warning() {
    let r = validate_project(&Project::new("empty"));
    assert!(r.passed());
    assert_eq!(codes(&r), ["NO_ENTRY_CONTENT"]);
}

#[test]
fn reports_are_canonical() {
    let p = load_sample("resnet50");
    let a = validate_project(&p).to_canonical_string();
    assert_eq!(a, validate_project(&p).to_canonical_string());
    let parsed: Json = serde_json::from_str(&a).unwrap();
    assert_eq!(parsed["passed"], json!(true));
}
