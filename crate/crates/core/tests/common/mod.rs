#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use protoml_core::document::{load_project, to_canonical_string};
use protoml_core::model::Project;
use serde_json::{json, Value as Json};

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub fn std_package() -> PathBuf {
    repo_root().join("library/std")
}

pub fn sample(name: &str) -> PathBuf {
    repo_root().join("samples").join(name)
}

pub fn load_sample(name: &str) -> Project {
    load_project(&sample(name)).unwrap_or_else(|e| panic!("sample {name}: {e}"))
}

pub fn write_json(path: &Path, doc: &Json) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, to_canonical_string(doc)).unwrap();
}

/// A package with one pass-through mutator `<name>/Op` per entry of `ops`.
pub fn write_package(dir: &Path, name: &str, version: &str, deps: &BTreeMap<String, String>, ops: &[&str]) {
    let components: Vec<String> = ops.iter().map(|op| format!("{name}/{op}")).collect();
    write_json(
        &dir.join("manifest.json"),
        &json!({ "format_version": 1, "name": name, "version": version, "components": components, "dependencies": deps }),
    );
    for op in ops {
        write_json(
            &dir.join(format!("mutators/{name}__{op}.json")),
            &json!({
                "format_version": 1,
                "kind": "mutator",
                "id": format!("{name}/{op}"),
                "imports": ["import torch.nn as nn"],
                "inputs": 1,
                "outputs": 1,
                "output_shapes": ["in[0]"],
                "init": "self.${name} = nn.Identity()",
                "forward": "${output} = self.${name}(${input})"
            }),
        );
    }
}

/// Copies `src` to `dst` recursively.
pub fn copy_dir(src: &Path, dst: &Path) {
    fs::create_dir_all(dst).unwrap();
    for entry in fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let to = dst.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &to);
        } else {
            fs::copy(entry.path(), to).unwrap();
        }
    }
}

/// Every file below `root` with its bytes.
pub fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    protoml_core::document::list_files(root).unwrap().into_iter().map(|rel| {
        let bytes = fs::read(root.join(&rel)).unwrap();
        (rel, bytes)
    }).collect()
}
