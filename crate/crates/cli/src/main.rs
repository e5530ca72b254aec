//! `protoml`: validate, generate, scaffold and package projects.
//!
//! Exit status: 0 success, 1 validation or package failures, 2 usage and
//! parse errors, 3 I/O errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use protoml_core::codegen::GeneratedFile;
use protoml_core::document::{
    project_from_documents, project_to_documents, read_project_documents, write_documents, DocumentSet, LoadError, PROJECT_MANIFEST,
};
use protoml_core::model::{is_namespace, ComponentId, Project};
use protoml_core::registry::{Registry, RegistryError};
use protoml_core::validate::validate_project;
use protoml_service::api;
use serde_json::{json, Value as Json};

const OK: u8 = 0;
const FAILED: u8 = 1;
const USAGE: u8 = 2;
const IO: u8 = 3;

#[derive(Parser)]
#[command(name = "protoml", version, about = "Compose PyTorch networks from reusable components")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a project and print its validation report.
    Validate {
        project: PathBuf,
        /// Print the structured report instead of the human-readable one.
        #[arg(long)]
        json: bool,
    },
    /// Generate PyTorch modules for every block of a project.
    Generate {
        project: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Generate even when validation fails.
        #[arg(long)]
        force: bool,
    },
    /// Create a project directory with an empty entry block.
    New {
        name: String,
        /// Parent directory of the new project.
        #[arg(long, default_value = ".")]
        dir: PathBuf,
    },
    /// Publish packages and add them to projects.
    Pkg {
        #[command(subcommand)]
        command: PkgCommand,
        #[arg(long, env = "PROTOML_REGISTRY", global = true)]
        registry: Option<PathBuf>,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long, env = "PROTOML_ADDR", default_value = protoml_service::DEFAULT_ADDR)]
        addr: std::net::SocketAddr,
        #[arg(long, env = "PROTOML_WORKSPACE", default_value = "workspace")]
        workspace: PathBuf,
        #[arg(long, env = "PROTOML_REGISTRY")]
        registry: Option<PathBuf>,
        /// Origin allowed to call the API from a browser; repeatable. Any origin when omitted.
        #[arg(long = "allow-origin", env = "PROTOML_ALLOWED_ORIGINS", value_delimiter = ',')]
        allow_origin: Vec<String>,
    },
}

#[derive(Subcommand)]
enum PkgCommand {
    /// Copy a package directory into the registry as a new immutable version.
    Publish { dir: PathBuf },
    /// Require `<name>@<requirement>` and vendor the resolved packages.
    Add {
        spec: String,
        #[arg(long, default_value = ".")]
        project: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Validate { project, json } => validate(&project, json),
        Command::Generate { project, output, force } => generate(&project, &output, force),
        Command::New { name, dir } => new_project(&name, &dir),
        Command::Pkg { command, registry } => {
            let registry = Registry::new(registry.unwrap_or_else(protoml_service::default_registry));
            match command {
                PkgCommand::Publish { dir } => publish(&registry, &dir),
                PkgCommand::Add { spec, project } => add(&registry, &spec, &project),
            }
        }
        Command::Serve { addr, workspace, registry, allow_origin } => serve(protoml_service::Config {
            addr,
            workspace,
            registry: registry.unwrap_or_else(protoml_service::default_registry),
            allowed_origins: allow_origin,
        }),
    };
    ExitCode::from(code)
}

fn load_failure(e: &LoadError) -> u8 {
    eprintln!("error[{}]: {e}", e.code());
    if e.is_io() {
        IO
    } else {
        USAGE
    }
}

fn registry_failure(e: &RegistryError) -> u8 {
    eprintln!("error[{}]: {e}", e.code());
    match e {
        RegistryError::Load(l) if l.is_io() => IO,
        RegistryError::Load(_) => USAGE,
        _ => FAILED,
    }
}

fn validate(dir: &Path, as_json: bool) -> u8 {
    let docs = match read_project_documents(dir) {
        Ok(d) => d,
        Err(e) => {
            if as_json {
                print!("{}", api::load_error_response(&e).body);
            }
            return load_failure(&e);
        }
    };
    if as_json {
        // identical bytes to the service's POST /api/validate body
        let r = api::validate_documents(&docs);
        print!("{}", r.body);
        return match r.status {
            200 => OK,
            422 => FAILED,
            500 => IO,
            _ => USAGE,
        };
    }
    let project = match project_from_documents(&docs) {
        Ok(p) => p,
        Err(e) => return load_failure(&e),
    };
    let report = validate_project(&project);
    print!("{}", report.render_human());
    if report.passed() {
        OK
    } else {
        FAILED
    }
}

fn generate(dir: &Path, out: &Path, force: bool) -> u8 {
    let docs = match read_project_documents(dir) {
        Ok(d) => d,
        Err(e) => return load_failure(&e),
    };
    let files = match api::generate_documents(&docs, force) {
        Ok(f) => f,
        Err(r) => {
            let body: Json = serde_json::from_str(&r.body).unwrap_or(Json::Null);
            match r.status {
                409 => {
                    if let Ok(p) = project_from_documents(&docs) {
                        eprint!("{}", validate_project(&p).render_human());
                    }
                    eprintln!("error: validation failed; use --force to generate anyway");
                }
                _ => match body.get("errors").and_then(Json::as_array) {
                    Some(errors) => {
                        for e in errors {
                            eprintln!("error[{}]: {}", e["code"].as_str().unwrap_or_default(), e["message"].as_str().unwrap_or_default());
                        }
                    }
                    None => eprintln!("error: {}", body["error"]["message"].as_str().unwrap_or(&r.body)),
                },
            }
            return match r.status {
                409 | 422 => FAILED,
                500 => IO,
                _ => USAGE,
            };
        }
    };
    match write_output(out, &files) {
        Ok(()) => {
            for f in &files {
                println!("{}", out.join(&f.path).display());
            }
            OK
        }
        Err(e) => {
            eprintln!("error[IO_ERROR]: {}: {e}", out.display());
            IO
        }
    }
}

/// Replaces `out` with exactly `files`. The new tree is staged next to it
/// and renamed into place, so `out` is never partially written.
fn write_output(out: &Path, files: &[GeneratedFile]) -> std::io::Result<()> {
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let staging = tempfile::Builder::new().prefix(".tmp-").tempdir_in(&parent)?;
    for f in files {
        let path = staging.path().join(&f.path);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        let mut file = fs::File::create(&path)?;
        file.write_all(f.content.as_bytes())?;
        file.sync_all()?;
    }
    let old = if out.exists() {
        let old = tempfile::Builder::new().prefix(".tmp-old-").tempdir_in(&parent)?.keep();
        fs::remove_dir(&old)?;
        fs::rename(out, &old)?;
        Some(old)
    } else {
        None
    };
    fs::rename(staging.path(), out)?;
    let _ = staging.keep();
    if let Some(old) = old {
        fs::remove_dir_all(old)?;
    }
    Ok(())
}

fn namespace_for(name: &str) -> String {
    let mut ns: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    if !ns.starts_with(|c: char| c.is_ascii_lowercase()) {
        ns.insert(0, 'p');
    }
    ns
}

fn new_project(name: &str, parent: &Path) -> u8 {
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        eprintln!("error: `{name}` is not a usable project directory name");
        return USAGE;
    }
    let root = parent.join(name);
    if root.exists() {
        eprintln!("error: {} already exists", root.display());
        return USAGE;
    }
    let ns = namespace_for(name);
    debug_assert!(is_namespace(&ns));
    let entry = ComponentId::new(ns.clone(), "Main");
    let mut docs = DocumentSet::new();
    docs.insert(
        PROJECT_MANIFEST.into(),
        json!({ "format_version": 1, "name": name, "entry_block": entry.to_string(), "requirements": {} }),
    );
    docs.insert(
        format!("blocks/{ns}__Main.json"),
        json!({
            "format_version": 1,
            "kind": "block",
            "id": entry.to_string(),
            "inputs": 1,
            "outputs": 1,
            "nodes": [],
            "edges": [{ "from": "Input", "to": "Output" }]
        }),
    );
    if let Err(e) = project_from_documents(&docs) {
        // the scaffold is fixed; failing here is a bug, not user error
        eprintln!("error[{}]: scaffold rejected: {e}", e.code());
        return USAGE;
    }
    match write_documents(&root, &docs) {
        Ok(()) => {
            println!("created {}", root.display());
            OK
        }
        Err(e) => load_failure(&e),
    }
}

fn publish(registry: &Registry, dir: &Path) -> u8 {
    match registry.publish(dir) {
        Ok(rec) => {
            println!("published {} {} {}", rec.name, rec.version, rec.hash);
            OK
        }
        Err(e) => registry_failure(&e),
    }
}

fn split_spec(spec: &str) -> Result<(String, semver::VersionReq), String> {
    let (name, req) = spec.split_once('@').unwrap_or((spec, "*"));
    if !is_namespace(name) {
        return Err(format!("`{name}` is not a package name"));
    }
    let req = semver::VersionReq::parse(req).map_err(|e| format!("invalid requirement `{req}`: {e}"))?;
    Ok((name.to_string(), req))
}

/// Blocks are set aside while resolving so that references into packages
/// not vendored yet do not stop the project from loading.
fn add(registry: &Registry, spec: &str, dir: &Path) -> u8 {
    let (name, req) = match split_spec(spec) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return USAGE;
        }
    };
    let docs = match read_project_documents(dir) {
        Ok(d) => d,
        Err(e) => return load_failure(&e),
    };
    let (blocks, mut rest): (DocumentSet, DocumentSet) = docs.into_iter().partition(|(p, _)| p.starts_with("blocks/"));
    let manifest = rest.get(PROJECT_MANIFEST).cloned().unwrap_or(Json::Null);
    if let Some(m) = rest.get_mut(PROJECT_MANIFEST).and_then(Json::as_object_mut) {
        m.remove("entry_block");
        m.remove("sample_inputs");
    }
    let mut project: Project = match project_from_documents(&rest) {
        Ok(p) => p,
        Err(e) => return load_failure(&e),
    };
    for doc in blocks.values() {
        if let Some(ns) = doc.get("id").and_then(Json::as_str).and_then(|id| id.split_once('/')).map(|(ns, _)| ns) {
            if ns == name {
                return registry_failure(&RegistryError::NamespaceTaken(name));
            }
        }
    }
    project.requirements.insert(name, req);
    let resolution = match registry.resolve(&project.requirements) {
        Ok(r) => r,
        Err(e) => return registry_failure(&e),
    };
    if let Err(e) = registry.vendor(&mut project, &resolution) {
        return registry_failure(&e);
    }
    let mut out = project_to_documents(&project);
    out.extend(blocks);
    let mut manifest = manifest;
    manifest["requirements"] = json!(project.requirements.iter().map(|(k, v)| (k.clone(), Json::from(v.to_string()))).collect::<serde_json::Map<_, _>>());
    out.insert(PROJECT_MANIFEST.into(), manifest);
    if let Err(e) = project_from_documents(&out) {
        return load_failure(&e);
    }
    if let Err(e) = write_documents(dir, &out) {
        return load_failure(&e);
    }
    for e in &project.lock.entries {
        println!("{} {} {}", e.name, e.version, e.hash);
    }
    OK
}

fn serve(config: protoml_service::Config) -> u8 {
    let _ = tracing_subscriber::fmt().with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into())).try_init();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return IO;
        }
    };
    match runtime.block_on(protoml_service::serve(config)) {
        Ok(()) => OK,
        Err(e) => {
            eprintln!("error[IO_ERROR]: {e}");
            IO
        }
    }
}
