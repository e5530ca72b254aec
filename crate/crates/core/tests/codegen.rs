mod common;

use common::load_sample;
use protoml_core::codegen::{generate_project, GenerateError, INDEX_FILE};
use protoml_core::expr::Expr;
use protoml_core::model::ComponentId;

fn file<'a>(files: &'a [protoml_core::codegen::GeneratedFile], path: &str) -> &'a str {
    &files.iter().find(|f| f.path == path).unwrap_or_else(|| panic!("no {path}")).content
}

#[test]
fn resnet_generates_one_module_per_block() {
    let files = generate_project(&load_sample("resnet50"), false).unwrap();
    let paths: Vec<&str> = files.iter().map(|f| f.path.as_str()).collect();
    assert_eq!(paths, ["bottleneck.py", "resnet.py", "resnet_layer.py", INDEX_FILE]);
    assert!(file(&files, "resnet.py").contains("class Resnet(nn.Module):"));
    assert!(file(&files, "resnet.py").contains("from .resnet_layer import ResnetLayer\n"));
}

#[test]
fn resnet_layer_repeats_bottleneck_by_parameter() {
    let files = generate_project(&load_sample("resnet50"), false).unwrap();
    let layer = file(&files, "resnet_layer.py");
    assert!(layer.contains("        self.bottleneck_0 = nn.ModuleList()\n        for repeat_index in range(blocks):\n"), "{layer}");
    assert!(layer.contains("in_channels=in_channels if repeat_index == 0 else width * 4,"), "{layer}");
    assert!(
        layer.contains("        for repeat_index in range(self.blocks):\n            x_bottleneck_0 = self.bottleneck_0[repeat_index](x_bottleneck_0)\n"),
        "{layer}"
    );
}

#[test]
fn skip_connection_is_one_add_then_one_call() {
    let files = generate_project(&load_sample("resnet50"), false).unwrap();
    let b = file(&files, "bottleneck.py");
    assert!(
        b.contains("        x_relu3_in0 = torch.stack([x_bn3_0, x_shortcut_0]).sum(dim=0)\n        x_relu3_0 = self.relu3_0(x_relu3_in0)\n"),
        "{b}"
    );
}

#[test]
fn relu_only_block() {
    let files = generate_project(&load_sample("relu"), false).unwrap();
    let text = file(&files, "relu_block.py");
    assert!(text.contains("        self.relu_0 = nn.ReLU(inplace=False)\n"), "{text}");
    assert!(text.contains("    def forward(self, input_0):\n        x_relu_0 = self.relu_0(input_0)\n        return x_relu_0\n"), "{text}");
}

#[test]
fn conditional_sample_builds_both_branches() {
    let files = generate_project(&load_sample("gated"), false).unwrap();
    let text = file(&files, "gated.py");
    assert!(text.contains("self.mix_0_then = nn.Conv2d(channels, channels, kernel_size=3"), "{text}");
    assert!(text.contains("self.mix_0_else = nn.Conv2d(channels, channels, kernel_size=1"), "{text}");
    assert!(text.contains("        if self.wide:\n            x_mix_0 = self.mix_0_then(input_0)\n        else:\n            x_mix_0 = self.mix_0_else(input_0)\n"), "{text}");
}

#[test]
fn generation_is_byte_stable() {
    let p = load_sample("resnet50");
    assert_eq!(generate_project(&p, false).unwrap(), generate_project(&p, false).unwrap());
    let q = load_sample("resnet50");
    assert_eq!(generate_project(&p, false).unwrap(), generate_project(&q, false).unwrap());
}

fn broken() -> protoml_core::model::Project {
    let mut p = load_sample("resnet50");
    let b = p.blocks.get_mut(&ComponentId::new("resnet", "Bottleneck")).unwrap();
    b.nodes.iter_mut().find(|n| n.id == "shortcut").unwrap().params.insert("stride".into(), Expr::int(1));
    p
}

#[test]
fn failing_validation_blocks_generation_unless_forced() {
    let p = broken();
    match generate_project(&p, false) {
        Err(GenerateError::Invalid(r)) => assert!(r.has_code("SHAPE_MISMATCH")),
        other => panic!("expected a validation failure, got {other:?}"),
    }
    let files = generate_project(&p, true).unwrap();
    assert_eq!(files.len(), 4);
    for f in &files {
        let second = f.content.lines().nth(1).unwrap();
        assert!(second.starts_with("# WARNING: forced generation; the project failed validation with "), "{}: {second}", f.path);
    }
}
