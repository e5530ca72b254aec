//! Request handling shared by the HTTP routes and the command line.
//!
//! Every function here is a pure function of its input: the same request
//! body always yields the same status and the same bytes.

use protoml_core::codegen::{generate_project, CodegenError, GenerateError, GeneratedFile};
use protoml_core::document::{documents_from_bundle, project_from_documents, to_canonical_string, DocumentSet, LoadError};
use protoml_core::validate::validate_project;
use serde_json::{json, Value as Json};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiResponse {
    pub status: u16,
    /// Canonical JSON text, newline-terminated.
    pub body: String,
}

impl ApiResponse {
    fn new(status: u16, body: &Json) -> Self {
        Self { status, body: to_canonical_string(body) }
    }
}

pub fn error_json(code: &str, message: &str, location: Json) -> Json {
    json!({ "error": { "code": code, "message": message, "location": location } })
}

pub fn error_response(status: u16, code: &str, message: &str, location: Json) -> ApiResponse {
    ApiResponse::new(status, &error_json(code, message, location))
}

fn load_error_location(e: &LoadError) -> Json {
    match e {
        LoadError::Parse { file, .. } => json!({ "file": file }),
        LoadError::Schema(s) => json!({ "file": s.file, "path": s.path }),
        LoadError::Unresolved { file, path, .. } => json!({ "file": file, "path": path }),
        LoadError::MissingManifest(_) | LoadError::RecursiveInstantiation { .. } | LoadError::Io { .. } => Json::Null,
    }
}

/// 400 for documents that do not form a project, 500 for I/O trouble.
pub fn load_error_response(e: &LoadError) -> ApiResponse {
    let status = if e.is_io() { 500 } else { 400 };
    error_response(status, e.code(), &e.to_string(), load_error_location(e))
}

fn parse_bundle(body: &[u8]) -> Result<DocumentSet, ApiResponse> {
    let doc: Json = serde_json::from_slice(body).map_err(|e| error_response(400, "PARSE_ERROR", &format!("malformed request body: {e}"), Json::Null))?;
    documents_from_bundle(&doc).map_err(|e| load_error_response(&e))
}

/// 200 with the report when validation passes, 422 with it when it fails.
pub fn validate_documents(docs: &DocumentSet) -> ApiResponse {
    let project = match project_from_documents(docs) {
        Ok(p) => p,
        Err(e) => return load_error_response(&e),
    };
    let report = validate_project(&project);
    ApiResponse { status: if report.passed() { 200 } else { 422 }, body: report.to_canonical_string() }
}

pub fn validate_request(body: &[u8]) -> ApiResponse {
    match parse_bundle(body) {
        Ok(docs) => validate_documents(&docs),
        Err(r) => r,
    }
}

pub fn files_json(files: &[GeneratedFile]) -> Json {
    json!({ "files": files.iter().map(|f| json!({ "path": f.path, "content": f.content })).collect::<Vec<_>>() })
}

fn codegen_error_response(errors: &[CodegenError]) -> ApiResponse {
    let message = errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
    let first = &errors[0];
    let mut body = error_json(first.code, &message, json!({ "block": first.block, "node": first.node }));
    body["errors"] = Json::Array(errors.iter().map(CodegenError::to_json).collect());
    ApiResponse::new(422, &body)
}

/// Generation result for a document set. A failing validation is 409 with
/// the report unless `force` is set; graph defects that leave nothing to
/// generate are 422.
pub fn generate_documents(docs: &DocumentSet, force: bool) -> Result<Vec<GeneratedFile>, ApiResponse> {
    let project = project_from_documents(docs).map_err(|e| load_error_response(&e))?;
    match generate_project(&project, force) {
        Ok(files) => Ok(files),
        Err(GenerateError::Invalid(report)) => Err(ApiResponse { status: 409, body: report.to_canonical_string() }),
        Err(GenerateError::Codegen(errors)) => Err(codegen_error_response(&errors)),
    }
}

pub fn generate_request(body: &[u8], force: bool) -> ApiResponse {
    let docs = match parse_bundle(body) {
        Ok(d) => d,
        Err(r) => return r,
    };
    match generate_documents(&docs, force) {
        Ok(files) => ApiResponse::new(200, &files_json(&files)),
        Err(r) => r,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn malformed_bodies_are_client_errors() {
        assert_eq!(validate_request(b"{\"files\": {").status, 400);
        assert_eq!(validate_request(b"[]").status, 400);
        let r = validate_request(b"{\"files\": {}}");
        assert_eq!(r.status, 400);
        assert!(r.body.contains("MISSING_MANIFEST") || r.body.contains("SCHEMA_ERROR"), "{}", r.body);
    }

    #[test]
    fn bodies_end_with_newline() {
        let r = error_response(404, "NOT_FOUND", "x", Json::Null);
        assert!(r.body.ends_with("}\n"));
    }
}
