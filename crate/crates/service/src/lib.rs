//! HTTP API for the block editor and other clients.
//!
//! Request and response bodies use the on-disk document schemas; a project
//! travels as `{"files": {path: document}}`. Every response carries an
//! `x-request-id` header, echoed from the request or derived from it.

pub mod api;
pub mod workspace;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::{to_bytes, Body, Bytes};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use protoml_core::document::{documents_from_bundle, documents_to_bundle, to_canonical_string};
use protoml_core::registry::{Registry, RegistryError};
use serde::Deserialize;
use serde_json::{json, Value as Json};
use sha2::{Digest, Sha256};
use tower_http::cors::{AllowOrigin, CorsLayer};

use api::{error_response, ApiResponse};
use workspace::{StoreError, Workspace};

pub const DEFAULT_ADDR: &str = "127.0.0.1:7878";
const BODY_LIMIT: usize = 64 << 20;
pub const REQUEST_ID: &str = "x-request-id";

#[derive(Debug, Clone)]
pub struct Config {
    pub addr: SocketAddr,
    pub workspace: PathBuf,
    pub registry: PathBuf,
    /// Origins allowed to make cross-origin requests; empty allows any.
    pub allowed_origins: Vec<String>,
}

/// `$HOME/.protoml/registry`, or `.protoml/registry` without a home directory.
pub fn default_registry() -> PathBuf {
    std::env::var_os("HOME").map(PathBuf::from).unwrap_or_default().join(".protoml").join("registry")
}

impl Config {
    /// Reads `PROTOML_ADDR`, `PROTOML_WORKSPACE`, `PROTOML_REGISTRY` and
    /// `PROTOML_ALLOWED_ORIGINS` (comma separated).
    pub fn from_env() -> Result<Self, String> {
        let addr = std::env::var("PROTOML_ADDR").unwrap_or_else(|_| DEFAULT_ADDR.to_string());
        Ok(Self {
            addr: addr.parse().map_err(|e| format!("PROTOML_ADDR `{addr}`: {e}"))?,
            workspace: std::env::var_os("PROTOML_WORKSPACE").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("workspace")),
            registry: std::env::var_os("PROTOML_REGISTRY").map(PathBuf::from).unwrap_or_else(default_registry),
            allowed_origins: std::env::var("PROTOML_ALLOWED_ORIGINS")
                .map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
                .unwrap_or_default(),
        })
    }
}

struct AppState {
    workspace: Workspace,
    registry: Registry,
}

type Shared = State<Arc<AppState>>;

pub fn router(config: &Config) -> Router {
    let state = Arc::new(AppState { workspace: Workspace::new(&config.workspace), registry: Registry::new(&config.registry) });
    let origins = if config.allowed_origins.is_empty() {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(config.allowed_origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    let cors = CorsLayer::new()
        .allow_origin(origins)
        .allow_methods([Method::GET, Method::POST, Method::PUT])
        .allow_headers([header::CONTENT_TYPE, header::IF_MATCH, header::HeaderName::from_static(REQUEST_ID)])
        .expose_headers([header::ETAG, header::HeaderName::from_static(REQUEST_ID)]);
    Router::new()
        .route("/api/validate", post(validate))
        .route("/api/generate", post(generate))
        .route("/api/projects", get(list_projects))
        .route("/api/projects/{id}", get(get_project).put(put_project))
        .route("/api/registry/packages", get(list_packages))
        .route("/api/registry/packages/{name}/{version}", get(get_package))
        .fallback(|| async { reply(error_response(404, "NOT_FOUND", "no such endpoint", Json::Null)) })
        .with_state(state)
        .layer(middleware::from_fn(request_id))
        .layer(cors)
}

pub async fn serve(config: Config) -> std::io::Result<()> {
    let app = router(&config);
    let listener = tokio::net::TcpListener::bind(config.addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).with_graceful_shutdown(async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}

/// Echoes the caller's request id or derives one from the request itself,
/// so a replayed request gets the same id.
async fn request_id(req: Request, next: Next) -> Response {
    let (parts, body) = req.into_parts();
    let bytes = match to_bytes(body, BODY_LIMIT).await {
        Ok(b) => b,
        Err(_) => return reply(error_response(413, "BODY_TOO_LARGE", "request body exceeds the size limit", Json::Null)),
    };
    let id = match parts.headers.get(REQUEST_ID).and_then(|v| v.to_str().ok()) {
        Some(v) if !v.is_empty() && v.len() <= 128 => v.to_string(),
        _ => {
            let mut h = Sha256::new();
            h.update(parts.method.as_str());
            h.update([0]);
            h.update(parts.uri.to_string());
            h.update([0]);
            h.update(&bytes);
            hex::encode(&h.finalize()[..8])
        }
    };
    let mut res = next.run(Request::from_parts(parts, Body::from(bytes))).await;
    if let Ok(v) = HeaderValue::from_str(&id) {
        res.headers_mut().insert(REQUEST_ID, v);
    }
    res
}

fn reply(r: ApiResponse) -> Response {
    let status = StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(header::CONTENT_TYPE, "application/json")], r.body).into_response()
}

fn internal(message: impl std::fmt::Display) -> Response {
    reply(error_response(500, "INTERNAL_ERROR", &message.to_string(), Json::Null))
}

async fn blocking<F: FnOnce() -> Response + Send + 'static>(f: F) -> Response {
    tokio::task::spawn_blocking(f).await.unwrap_or_else(internal)
}

async fn validate(body: Bytes) -> Response {
    blocking(move || reply(api::validate_request(&body))).await
}

#[derive(Deserialize)]
struct GenerateQuery {
    #[serde(default)]
    force: bool,
}

async fn generate(Query(q): Query<GenerateQuery>, body: Bytes) -> Response {
    blocking(move || reply(api::generate_request(&body, q.force))).await
}

fn store_error(e: StoreError) -> Response {
    match e {
        StoreError::InvalidId(id) => reply(error_response(400, "INVALID_ID", &format!("`{id}` is not a valid project id"), Json::Null)),
        StoreError::NotFound(id) => reply(error_response(404, "NOT_FOUND", &format!("no project `{id}`"), Json::Null)),
        StoreError::Stale { current } => {
            let mut r = reply(error_response(409, "STALE_REVISION", &format!("the project is at revision {current}"), json!({ "revision": current })));
            r.headers_mut().insert(header::ETAG, etag(current));
            r
        }
        StoreError::Invalid(e) => reply(api::load_error_response(&e)),
        StoreError::Io(e) => internal(e),
    }
}

fn etag(rev: u64) -> HeaderValue {
    HeaderValue::from_str(&format!("\"{rev}\"")).expect("digits are a valid header value")
}

async fn list_projects(State(s): Shared) -> Response {
    blocking(move || match s.workspace.list() {
        Ok(list) => {
            let items: Vec<Json> = list.iter().map(|p| json!({ "id": p.id, "name": p.name, "revision": p.revision })).collect();
            reply(ApiResponse { status: 200, body: to_canonical_string(&json!({ "projects": items })) })
        }
        Err(e) => store_error(e),
    })
    .await
}

async fn get_project(State(s): Shared, Path(id): Path<String>) -> Response {
    blocking(move || match s.workspace.get(&id) {
        Ok((rev, docs)) => {
            let mut r = reply(ApiResponse { status: 200, body: to_canonical_string(&documents_to_bundle(&docs)) });
            r.headers_mut().insert(header::ETAG, etag(rev));
            r
        }
        Err(e) => store_error(e),
    })
    .await
}

/// `If-Match: "<n>"` names the revision the edit is based on; omit it only
/// to create a project.
async fn put_project(State(s): Shared, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let base = match headers.get(header::IF_MATCH) {
        None => None,
        Some(v) => match v.to_str().ok().map(|t| t.trim().trim_matches('"')).and_then(|t| t.parse::<u64>().ok()) {
            Some(n) => Some(n),
            None => return reply(error_response(400, "INVALID_REVISION", "If-Match must be a quoted revision number", Json::Null)),
        },
    };
    blocking(move || {
        let doc: Json = match serde_json::from_slice(&body) {
            Ok(d) => d,
            Err(e) => return reply(error_response(400, "PARSE_ERROR", &format!("malformed request body: {e}"), Json::Null)),
        };
        let docs = match documents_from_bundle(&doc) {
            Ok(d) => d,
            Err(e) => return reply(api::load_error_response(&e)),
        };
        match s.workspace.put(&id, base, &docs) {
            Ok(rev) => {
                let mut r = reply(ApiResponse { status: 200, body: to_canonical_string(&json!({ "id": id, "revision": rev })) });
                r.headers_mut().insert(header::ETAG, etag(rev));
                r
            }
            Err(e) => store_error(e),
        }
    })
    .await
}

fn registry_error(e: RegistryError) -> Response {
    match e {
        RegistryError::NotFound { .. } => reply(error_response(404, e.code(), &e.to_string(), Json::Null)),
        e if e.is_io() => internal(e),
        e => reply(error_response(500, e.code(), &e.to_string(), Json::Null)),
    }
}

async fn list_packages(State(s): Shared) -> Response {
    blocking(move || {
        let names = match s.registry.package_names() {
            Ok(n) => n,
            Err(e) => return registry_error(e),
        };
        let mut items = Vec::new();
        for name in names {
            match s.registry.versions(&name) {
                Ok(vs) if !vs.is_empty() => items.push(json!({ "name": name, "versions": vs.iter().map(ToString::to_string).collect::<Vec<_>>() })),
                Ok(_) => {}
                Err(e) => return registry_error(e),
            }
        }
        reply(ApiResponse { status: 200, body: to_canonical_string(&json!({ "packages": items })) })
    })
    .await
}

async fn get_package(State(s): Shared, Path((name, version)): Path<(String, String)>) -> Response {
    blocking(move || {
        let Ok(v) = semver::Version::parse(&version) else {
            return reply(error_response(404, "PACKAGE_NOT_FOUND", &format!("`{version}` is not a version"), Json::Null));
        };
        if !protoml_core::model::is_namespace(&name) {
            return reply(error_response(404, "PACKAGE_NOT_FOUND", &format!("`{name}` is not a package name"), Json::Null));
        }
        match s.registry.package_documents(&name, &v) {
            Ok((docs, hash)) => {
                let mut body = documents_to_bundle(&docs);
                body["name"] = json!(name);
                body["version"] = json!(v.to_string());
                body["hash"] = json!(hash);
                reply(ApiResponse { status: 200, body: to_canonical_string(&body) })
            }
            Err(e) => registry_error(e),
        }
    })
    .await
}
