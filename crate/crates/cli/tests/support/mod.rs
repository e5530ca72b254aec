#![allow(dead_code)]

//! Shared fixtures: the generated-code oracle, a seeded corpus of small
//! projects over the standard library, and a minimal HTTP client.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use protoml_core::codegen::GeneratedFile;
use protoml_core::document::{read_project_documents, write_documents, DocumentSet, LOCKFILE, PROJECT_MANIFEST};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value as Json};

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub fn sample(name: &str) -> PathBuf {
    repo_root().join("samples").join(name)
}

pub fn protoml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protoml")).args(args).output().expect("protoml runs")
}

pub fn protoml_env(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_protoml"));
    c.args(args);
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("protoml runs")
}

fn python() -> String {
    std::env::var("PYTHON").unwrap_or_else(|_| "python3".into())
}

/// Runs one oracle job; see `support/oracle.py`.
pub fn oracle(job: &Json) -> Result<Json, String> {
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/support/oracle.py");
    let mut child = Command::new(python())
        .arg(&script)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| format!("cannot start {}: {e}", python()))?;
    child.stdin.take().unwrap().write_all(job.to_string().as_bytes()).map_err(|e| e.to_string())?;
    let out = child.wait_with_output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("oracle failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| format!("oracle output: {e}"))
}

/// Writes generated files as the Python package `root/<package>`.
pub fn write_package(root: &Path, package: &str, files: &[GeneratedFile]) -> Vec<PathBuf> {
    let dir = root.join(package);
    fs::create_dir_all(&dir).unwrap();
    files
        .iter()
        .map(|f| {
            let p = dir.join(&f.path);
            fs::write(&p, &f.content).unwrap();
            p
        })
        .collect()
}

// ---------------------------------------------------------------------------
// corpus

/// A small project over the vendored standard library with one entry block `c/Net`.
#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub docs: DocumentSet,
    pub input: Vec<u64>,
    /// Nodes that neither start nor end the chain, candidates for stripping.
    pub middle: Vec<String>,
}

/// The vendored std package and its lock entry, taken from a sample.
fn std_vendored() -> DocumentSet {
    read_project_documents(&sample("relu")).unwrap().into_iter().filter(|(p, _)| p.starts_with("packages/") || p == LOCKFILE).collect()
}

#[derive(Clone)]
struct Value {
    from: String,
    rank: usize,
    /// Best guess at the concrete shape; only steers parameter choice.
    dims: Vec<i64>,
}

fn pick<T: Copy>(rng: &mut StdRng, xs: &[T]) -> T {
    xs[rng.random_range(0..xs.len())]
}

fn conv_out(x: i64, k: i64, s: i64, p: i64) -> i64 {
    (x + 2 * p - k).div_euclid(s) + 1
}

/// Seeded random projects. Four-dimensional stages (convolution, batch
/// norm, pooling) come first, optionally followed by a flatten and a
/// two-dimensional stage (linear layers). Parameters usually agree with the
/// incoming shape and sometimes do not, and joins combine earlier values,
/// so the corpus holds both passing and failing graphs.
pub fn corpus(seed: u64, count: usize) -> Vec<Case> {
    let mut rng = StdRng::seed_from_u64(seed);
    let vendored = std_vendored();
    (0..count).map(|i| case(&mut rng, &format!("c{i:03}"), &vendored)).collect()
}

fn case(rng: &mut StdRng, name: &str, vendored: &DocumentSet) -> Case {
    let input = vec![rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=9), rng.random_range(1..=9)];
    let mut values = vec![Value { from: "Input".into(), rank: 4, dims: input.iter().map(|&d| d as i64).collect() }];
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let len: usize = rng.random_range(2..=7);
    let right = |rng: &mut StdRng, good: i64| if rng.random_bool(0.85) { good.max(1) } else { rng.random_range(1..=5) };

    for n in 0..len {
        let id = format!("n{n}");
        let cur = values.last().unwrap().clone();
        let same_rank: Vec<usize> = (0..values.len() - 1).filter(|&j| values[j].rank == cur.rank).collect();
        let join = !same_rank.is_empty() && rng.random_bool(0.25);
        let mut node = json!({ "id": id });
        let mut dims = cur.dims.clone();
        let mut rank = cur.rank;

        if join {
            let other = values[pick(rng, &same_rank)].clone();
            let op = pick(rng, &["add", "multiply", "concat"]);
            let mut policy = json!({ "op": op });
            if op == "concat" {
                let axis = rng.random_range(-(rank as i64) - 1..=rank as i64);
                policy["axis"] = json!(axis);
                let a = axis.rem_euclid(rank as i64) as usize;
                if other.dims.len() == rank {
                    dims[a] += other.dims[a];
                }
            }
            node["component"] = json!(pick(rng, &["std/ReLU", "std/Tanh", "std/Identity"]));
            node["joins"] = json!({ "0": policy });
            edges.push(json!({ "from": other.from, "to": id }));
        } else if rank == 4 {
            match rng.random_range(0..9) {
                0 | 1 => {
                    let (k, s, p) = (pick(rng, &[1, 2, 3, 5]), pick(rng, &[1, 1, 2, 3]), pick(rng, &[0, 0, 1, 2]));
                    let out = rng.random_range(1..=5);
                    node["component"] = json!("std/Conv2d");
                    node["params"] = json!({ "in_channels": right(rng, dims[1]), "out_channels": out, "kernel_size": k, "stride": s, "padding": p, "bias": rng.random_bool(0.5) });
                    dims = vec![dims[0], out, conv_out(dims[2], k, s, p), conv_out(dims[3], k, s, p)];
                }
                2 => {
                    node["component"] = json!("std/BatchNorm2d");
                    node["params"] = json!({ "num_features": right(rng, dims[1]) });
                }
                3 => {
                    // padding beyond half the kernel is a constructor error the
                    // shape contract cannot express, so it is not generated
                    let k = pick(rng, &[1, 2, 3]);
                    let (s, p) = (pick(rng, &[1, 2, 3]), rng.random_range(0..=k / 2));
                    node["component"] = json!("std/MaxPool2d");
                    node["params"] = json!({ "kernel_size": k, "stride": s, "padding": p });
                    dims = vec![dims[0], dims[1], conv_out(dims[2], k, s, p), conv_out(dims[3], k, s, p)];
                }
                4 => {
                    let (a, b) = (rng.random_range(1..=4), rng.random_range(1..=4));
                    node["component"] = json!("std/AdaptiveAvgPool2d");
                    node["params"] = json!({ "output_size": [a, b] });
                    dims = vec![dims[0], dims[1], a, b];
                }
                5 => {
                    node["component"] = json!("std/Flatten");
                    dims = vec![dims[0], dims[1] * dims[2] * dims[3]];
                    rank = 2;
                }
                c => node["component"] = json!(["std/ReLU", "std/Tanh", "std/Identity"][c % 3]),
            }
        } else {
            match rng.random_range(0..5) {
                0 | 1 => {
                    let out = rng.random_range(1..=6);
                    node["component"] = json!("std/Linear");
                    node["params"] = json!({ "in_features": right(rng, dims[1]), "out_features": out, "bias": rng.random_bool(0.5) });
                    dims = vec![dims[0], out];
                }
                c => node["component"] = json!(["std/ReLU", "std/Tanh", "std/Identity"][c % 3]),
            }
        }
        edges.push(json!({ "from": cur.from, "to": id }));
        nodes.push(node);
        values.push(Value { from: id, rank, dims });
    }
    edges.push(json!({ "from": values.last().unwrap().from, "to": "Output" }));

    let mut docs = vendored.clone();
    docs.insert(
        PROJECT_MANIFEST.into(),
        json!({ "format_version": 1, "name": name, "entry_block": "c/Net", "requirements": { "std": "^0.1" }, "sample_inputs": [input] }),
    );
    docs.insert(
        "blocks/c__Net.json".into(),
        json!({ "format_version": 1, "kind": "block", "id": "c/Net", "inputs": 1, "outputs": 1, "nodes": nodes, "edges": edges }),
    );
    let middle = (1..len.saturating_sub(1)).map(|n| format!("n{n}")).collect();
    Case { name: name.to_string(), docs, input, middle }
}

/// `case` with `node` switched to a local copy of its mutator that has no
/// output shape contract.
pub fn strip_contract(case: &Case, node: &str) -> Case {
    let mut docs = case.docs.clone();
    let block = docs.get_mut("blocks/c__Net.json").unwrap();
    let n = block["nodes"].as_array_mut().unwrap().iter_mut().find(|n| n["id"] == node).unwrap();
    let component = n["component"].as_str().unwrap().to_string();
    let local = format!("c/{}Opaque", component.trim_start_matches("std/"));
    n["component"] = json!(local);
    let file = format!("packages/std/0.1.0/mutators/{}.json", component.replace('/', "__"));
    let mut m = docs[&file].clone();
    m["id"] = json!(local);
    m.as_object_mut().unwrap().remove("output_shapes");
    docs.insert(format!("mutators/{}.json", local.replace('/', "__")), m);
    Case { name: format!("{}_stripped_{node}", case.name), docs, input: case.input.clone(), middle: case.middle.clone() }
}

pub fn write_case(dir: &Path, case: &Case) {
    write_documents(dir, &case.docs).unwrap();
}

// ---------------------------------------------------------------------------
// HTTP

/// One HTTP/1.1 request over a fresh connection; returns status and body.
pub fn http(addr: &str, method: &str, path: &str, body: &[u8]) -> std::io::Result<(u16, Vec<u8>, BTreeMap<String, String>)> {
    let mut s = TcpStream::connect(addr)?;
    write!(s, "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", body.len())?;
    s.write_all(body)?;
    let mut raw = Vec::new();
    s.read_to_end(&mut raw)?;
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").ok_or_else(|| std::io::Error::other("no header terminator"))?;
    let head = String::from_utf8_lossy(&raw[..split]).into_owned();
    let mut lines = head.lines();
    let status = lines.next().and_then(|l| l.split_whitespace().nth(1)).and_then(|c| c.parse().ok()).unwrap_or(0);
    let headers: BTreeMap<String, String> =
        lines.filter_map(|l| l.split_once(':')).map(|(k, v)| (k.trim().to_ascii_lowercase(), v.trim().to_string())).collect();
    let mut payload = raw[split + 4..].to_vec();
    if headers.get("transfer-encoding").is_some_and(|v| v.eq_ignore_ascii_case("chunked")) {
        payload = dechunk(&payload);
    }
    Ok((status, payload, headers))
}

fn dechunk(mut data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    while let Some(eol) = data.windows(2).position(|w| w == b"\r\n") {
        let size = usize::from_str_radix(String::from_utf8_lossy(&data[..eol]).trim(), 16).unwrap_or(0);
        if size == 0 {
            break;
        }
        out.extend_from_slice(&data[eol + 2..eol + 2 + size]);
        data = &data[eol + 2 + size + 2..];
    }
    out
}

/// A running `protoml serve`, stopped on drop.
pub struct Server {
    child: std::process::Child,
    pub addr: String,
}

impl Server {
    pub fn start(workspace: &Path, registry: &Path) -> Server {
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let addr = format!("127.0.0.1:{port}");
        let child = Command::new(env!("CARGO_BIN_EXE_protoml"))
            .arg("serve")
            .env("PROTOML_ADDR", &addr)
            .env("PROTOML_WORKSPACE", workspace)
            .env("PROTOML_REGISTRY", registry)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        for _ in 0..200 {
            if TcpStream::connect(&addr).is_ok() {
                break;
            }
            std::thread::sleep(std::time::Duration::from_millis(25));
        }
        Server { child, addr }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
