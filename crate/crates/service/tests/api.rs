use std::path::{Path, PathBuf};

use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use protoml_core::document::{documents_to_bundle, read_project_documents, DocumentSet};
use protoml_service::{router, Config, REQUEST_ID};
use serde_json::{json, Value as Json};
use tower::ServiceExt;

fn sample(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../samples").join(name)
}

fn bundle(name: &str) -> String {
    documents_to_bundle(&read_project_documents(&sample(name)).unwrap()).to_string()
}

struct Env {
    _tmp: tempfile::TempDir,
    app: Router,
    workspace: PathBuf,
}

fn env() -> Env {
    let tmp = tempfile::tempdir().unwrap();
    let config = Config {
        addr: "127.0.0.1:0".parse().unwrap(),
        workspace: tmp.path().join("ws"),
        registry: tmp.path().join("reg"),
        allowed_origins: vec!["http://localhost:5173".into()],
    };
    let registry = protoml_core::registry::Registry::new(&config.registry);
    registry.publish(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../library/std")).unwrap();
    Env { app: router(&config), workspace: config.workspace.clone(), _tmp: tmp }
}

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    body: String,
}

impl Reply {
    fn json(&self) -> Json {
        serde_json::from_str(&self.body).unwrap_or_else(|e| panic!("{e}: {}", self.body))
    }
}

async fn send(app: &Router, req: Request<Body>) -> Reply {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let body = String::from_utf8(to_bytes(res.into_body(), usize::MAX).await.unwrap().to_vec()).unwrap();
    Reply { status, headers, body }
}

fn post(uri: &str, body: impl Into<String>) -> Request<Body> {
    Request::post(uri).header(header::CONTENT_TYPE, "application/json").body(Body::from(body.into())).unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn put(uri: &str, rev: Option<u64>, body: impl Into<String>) -> Request<Body> {
    let mut b = Request::put(uri).header(header::CONTENT_TYPE, "application/json");
    if let Some(r) = rev {
        b = b.header(header::IF_MATCH, format!("\"{r}\""));
    }
    b.body(Body::from(body.into())).unwrap()
}

#[tokio::test]
async fn valid_relu_project_passes() {
    let e = env();
    let r = send(&e.app, post("/api/validate", bundle("relu"))).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.body);
    assert_eq!(r.json()["passed"], json!(true));
    assert!(r.headers.contains_key(REQUEST_ID));
}

fn with_cycle() -> String {
    let mut docs: DocumentSet = read_project_documents(&sample("relu")).unwrap();
    let block = docs.get_mut("blocks/relu__ReluBlock.json").unwrap();
    block["nodes"] = json!([{ "id": "a", "component": "std/ReLU" }, { "id": "b", "component": "std/ReLU" }]);
    block["edges"] = json!([
        { "from": "Input", "to": "a" }, { "from": "b", "to": "a" }, { "from": "a", "to": "b" }, { "from": "b", "to": "Output" }
    ]);
    block["nodes"][0]["joins"] = json!({ "0": { "op": "add" } });
    documents_to_bundle(&docs).to_string()
}

#[tokio::test]
async fn cycle_is_unprocessable_with_graph_cycle() {
    let e = env();
    let r = send(&e.app, post("/api/validate", with_cycle())).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY, "{}", r.body);
    let codes: Vec<Json> = r.json()["diagnostics"].as_array().unwrap().iter().map(|d| d["code"].clone()).collect();
    assert!(codes.contains(&json!("GRAPH_CYCLE")), "{codes:?}");
}

#[tokio::test]
async fn truncated_body_is_bad_request() {
    let e = env();
    let full = bundle("relu");
    let r = send(&e.app, post("/api/validate", &full[..full.len() / 2])).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.json()["error"]["code"], json!("PARSE_ERROR"));
}

#[tokio::test]
async fn validation_is_a_pure_function_of_the_body() {
    let e = env();
    let a = send(&e.app, post("/api/validate", bundle("resnet50"))).await;
    let b = send(&e.app, post("/api/validate", bundle("resnet50"))).await;
    assert_eq!(a.status, StatusCode::OK);
    assert_eq!(a.body, b.body);
    assert_eq!(a.headers[REQUEST_ID], b.headers[REQUEST_ID]);
    let c = send(&e.app, Request::post("/api/validate").header(REQUEST_ID, "abc").body(Body::from(bundle("resnet50"))).unwrap()).await;
    assert_eq!(c.headers[REQUEST_ID], "abc");
    assert_eq!(c.body, a.body);
}

#[tokio::test]
async fn resnet_generates_three_modules() {
    let e = env();
    let r = send(&e.app, post("/api/generate", bundle("resnet50"))).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.body);
    let paths: Vec<String> = r.json()["files"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap().to_string()).collect();
    assert_eq!(paths, ["bottleneck.py", "resnet.py", "resnet_layer.py", "__init__.py"]);
}

fn broken_resnet() -> String {
    let mut docs = read_project_documents(&sample("resnet50")).unwrap();
    let b = docs.get_mut("blocks/resnet__Bottleneck.json").unwrap();
    let nodes = b["nodes"].as_array_mut().unwrap();
    let shortcut = nodes.iter_mut().find(|n| n["id"] == "shortcut").unwrap();
    shortcut["params"]["stride"] = json!(1);
    documents_to_bundle(&docs).to_string()
}

#[tokio::test]
async fn failing_project_is_refused_unless_forced() {
    let e = env();
    let r = send(&e.app, post("/api/generate", broken_resnet())).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.json()["passed"], json!(false));

    let r = send(&e.app, post("/api/generate?force=true", broken_resnet())).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.body);
    for f in r.json()["files"].as_array().unwrap() {
        assert!(f["content"].as_str().unwrap().contains("# WARNING: forced generation"), "{}", f["path"]);
    }
}

#[tokio::test]
async fn put_then_get_returns_the_same_documents() {
    let e = env();
    let body = bundle("gated");
    let r = send(&e.app, put("/api/projects/gated", None, body.clone())).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.body);
    assert_eq!(r.headers[header::ETAG], "\"1\"");
    let g = send(&e.app, get("/api/projects/gated")).await;
    assert_eq!(g.status, StatusCode::OK);
    assert_eq!(g.headers[header::ETAG], "\"1\"");
    let sent: Json = serde_json::from_str(&body).unwrap();
    assert_eq!(g.json(), sent);

    let l = send(&e.app, get("/api/projects")).await;
    assert_eq!(l.json(), json!({ "projects": [{ "id": "gated", "name": "gated", "revision": 1 }] }));
    // the stored project is an ordinary project directory
    assert!(read_project_documents(&e.workspace.join("gated")).is_ok());
}

#[tokio::test]
async fn concurrent_puts_on_one_revision_have_one_winner() {
    let e = env();
    send(&e.app, put("/api/projects/p", None, bundle("gated"))).await;
    let (a, b) = tokio::join!(send(&e.app, put("/api/projects/p", Some(1), bundle("relu"))), send(&e.app, put("/api/projects/p", Some(1), bundle("resnet50"))));
    let mut statuses = [a.status.as_u16(), b.status.as_u16()];
    statuses.sort();
    assert_eq!(statuses, [200, 409]);
    let loser = if a.status == StatusCode::CONFLICT { &a } else { &b };
    assert_eq!(loser.json()["error"]["code"], json!("STALE_REVISION"));
    assert_eq!(send(&e.app, get("/api/projects/p")).await.headers[header::ETAG], "\"2\"");
}

#[tokio::test]
async fn creating_over_an_existing_project_needs_its_revision() {
    let e = env();
    send(&e.app, put("/api/projects/p", None, bundle("gated"))).await;
    assert_eq!(send(&e.app, put("/api/projects/p", None, bundle("relu"))).await.status, StatusCode::CONFLICT);
    assert_eq!(send(&e.app, put("/api/projects/p", Some(7), bundle("relu"))).await.status, StatusCode::CONFLICT);
    assert_eq!(send(&e.app, put("/api/projects/p", Some(1), bundle("relu"))).await.status, StatusCode::OK);
}

#[tokio::test]
async fn unknown_project_is_not_found() {
    let e = env();
    assert_eq!(send(&e.app, get("/api/projects/nope")).await.status, StatusCode::NOT_FOUND);
    assert_eq!(send(&e.app, get("/api/projects/..")).await.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn schema_violations_are_not_stored() {
    let e = env();
    let r = send(&e.app, put("/api/projects/p", None, json!({ "files": { "project.json": { "name": 3 } } }).to_string())).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(send(&e.app, get("/api/projects/p")).await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn interrupted_put_leaves_the_previous_revision() {
    let e = env();
    send(&e.app, put("/api/projects/p", None, bundle("gated"))).await;
    // a put that died after staging its files but before the swap
    let staging = e.workspace.join(".revisions/p/.tmp-crash");
    protoml_core::document::write_documents(&staging, &read_project_documents(&sample("relu")).unwrap()).unwrap();
    let g = send(&e.app, get("/api/projects/p")).await;
    assert_eq!(g.json(), serde_json::from_str::<Json>(&bundle("gated")).unwrap());
    let r = send(&e.app, put("/api/projects/p", Some(1), bundle("relu"))).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(send(&e.app, get("/api/projects/p")).await.json(), serde_json::from_str::<Json>(&bundle("relu")).unwrap());
}

#[tokio::test]
async fn registry_is_listed_and_fetched() {
    let e = env();
    let l = send(&e.app, get("/api/registry/packages")).await;
    assert_eq!(l.json(), json!({ "packages": [{ "name": "std", "versions": ["0.1.0"] }] }));
    let p = send(&e.app, get("/api/registry/packages/std/0.1.0")).await;
    assert_eq!(p.status, StatusCode::OK);
    let body = p.json();
    assert!(body["hash"].as_str().unwrap().starts_with("sha256:"));
    assert!(body["files"]["mutators/std__ReLU.json"].is_object());
    assert_eq!(send(&e.app, get("/api/registry/packages/std/9.9.9")).await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn editor_origin_may_call_the_api() {
    let e = env();
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/api/validate")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let r = send(&e.app, req).await;
    assert_eq!(r.headers[header::ACCESS_CONTROL_ALLOW_ORIGIN], "http://localhost:5173");
    let r = send(&e.app, Request::get("/api/projects").header(header::ORIGIN, "http://evil.example").body(Body::empty()).unwrap()).await;
    assert!(!r.headers.contains_key(header::ACCESS_CONTROL_ALLOW_ORIGIN));
}
