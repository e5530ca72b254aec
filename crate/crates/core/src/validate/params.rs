//! Parameter binding checks.

use std::collections::BTreeMap;

use crate::diagnostics::{Diagnostic, Location};
use crate::expr::{Binding, Expr, Scope, Ty, TypeScope, Value};
use crate::model::{Block, ParamSpec};

/// Names visible to binding expressions inside a block: its parameters, its
/// local variables and `repeat_index`.
#[derive(Debug, Clone, Default)]
pub struct Env {
    vars: BTreeMap<String, (Ty, Binding)>,
}

impl Env {
    pub fn insert(&mut self, name: impl Into<String>, ty: Ty, binding: Binding) {
        self.vars.insert(name.into(), (ty, binding));
    }

    pub fn get(&self, name: &str) -> Option<&Binding> {
        self.vars.get(name).map(|(_, b)| b)
    }

    /// Environment of `block` given argument values for its parameters.
    /// Parameters missing from `args` are symbolic. Local variables are
    /// evaluated in order; failures are reported and leave the local symbolic.
    pub fn for_block(block: &Block, args: &BTreeMap<String, Binding>, diags: &mut Vec<Diagnostic>) -> Env {
        let mut env = Env::default();
        for p in &block.params {
            env.insert(&p.name, p.ptype.ty(), args.get(&p.name).cloned().unwrap_or(Binding::Symbolic));
        }
        for local in &block.locals {
            let loc = Location::block(block.id.to_string()).param(&local.name);
            let ty = match local.value.infer(&env) {
                Ok(t) => t,
                Err(e) => {
                    diags.push(Diagnostic::error("PARAM_EXPR", loc, format!("variable `{}`: {e}", local.name)));
                    env.insert(&local.name, Ty::Any, Binding::Symbolic);
                    continue;
                }
            };
            let binding = match local.value.eval(&env) {
                Ok(Some(v)) => Binding::Known(v),
                Ok(None) => Binding::Symbolic,
                Err(e) => {
                    diags.push(Diagnostic::error("PARAM_EXPR", loc, format!("variable `{}`: {e}", local.name)));
                    Binding::Symbolic
                }
            };
            env.insert(&local.name, ty, binding);
        }
        env
    }

    /// Copy with `repeat_index` bound; `None` leaves it symbolic.
    pub fn with_repeat_index(&self, index: Option<i64>) -> Env {
        let mut env = self.clone();
        env.insert("repeat_index", Ty::Int, index.map(|i| Binding::Known(Value::Int(i))).unwrap_or(Binding::Symbolic));
        env
    }
}

impl Scope for Env {
    fn lookup(&self, name: &str) -> Option<Binding> {
        self.vars.get(name).map(|(_, b)| b.clone())
    }
}

impl TypeScope for Env {
    fn type_of(&self, name: &str) -> Option<Ty> {
        self.vars.get(name).map(|(t, _)| t.clone())
    }
}

/// Argument values of one component instance, keyed by parameter name.
pub type Args = BTreeMap<String, Binding>;

/// Checks `bindings` against `schema` and computes the instance's argument
/// values. Unbound optional parameters take their default, or stay symbolic
/// when there is none. Value checks on symbolic bindings are deferred.
pub fn bind_params(loc: &Location, bindings: &BTreeMap<String, Expr>, schema: &[ParamSpec], env: &Env) -> (Vec<Diagnostic>, Args) {
    let mut diags = Vec::new();
    let mut args = Args::new();
    for name in bindings.keys() {
        if !schema.iter().any(|s| &s.name == name) {
            diags.push(Diagnostic::error("PARAM_UNKNOWN", loc.clone().param(name), format!("no parameter named `{name}`")));
        }
    }
    for spec in schema {
        let ploc = loc.clone().param(&spec.name);
        let Some(expr) = bindings.get(&spec.name) else {
            if spec.required {
                diags.push(Diagnostic::error("PARAM_MISSING", ploc, format!("required {} parameter `{}` is not bound", spec.ptype, spec.name)));
                args.insert(spec.name.clone(), Binding::Symbolic);
            } else {
                args.insert(spec.name.clone(), spec.default.clone().map(Binding::Known).unwrap_or(Binding::Symbolic));
            }
            continue;
        };
        match expr.infer(env) {
            Ok(ty) if !spec.ptype.accepts_type(&ty) => {
                diags.push(Diagnostic::error("PARAM_TYPE", ploc, format!("`{}` expects {}, `{expr}` is {ty}", spec.name, spec.ptype)));
                args.insert(spec.name.clone(), Binding::Symbolic);
                continue;
            }
            Ok(_) => {}
            Err(e) => {
                diags.push(Diagnostic::error("PARAM_EXPR", ploc, format!("`{expr}`: {e}")));
                args.insert(spec.name.clone(), Binding::Symbolic);
                continue;
            }
        }
        match expr.eval(env) {
            Ok(Some(value)) => {
                if !spec.ptype.accepts_value(&value) {
                    diags.push(Diagnostic::error("PARAM_TYPE", ploc, format!("`{}` expects {}, got {value}", spec.name, spec.ptype)));
                    args.insert(spec.name.clone(), Binding::Symbolic);
                } else if let Err(msg) = spec.constraints.check(&value) {
                    diags.push(Diagnostic::error("PARAM_RANGE", ploc, format!("`{}`: {msg}", spec.name)));
                    args.insert(spec.name.clone(), Binding::Known(value));
                } else {
                    args.insert(spec.name.clone(), Binding::Known(value));
                }
            }
            Ok(None) => {
                args.insert(spec.name.clone(), Binding::Symbolic);
            }
            Err(e) => {
                diags.push(Diagnostic::error("PARAM_EXPR", ploc, format!("`{expr}`: {e}")));
                args.insert(spec.name.clone(), Binding::Symbolic);
            }
        }
    }
    (diags, args)
}

/// PARAM_MISSING, PARAM_UNKNOWN, PARAM_TYPE, PARAM_RANGE and PARAM_EXPR for one binding set.
pub fn validate_params(loc: &Location, bindings: &BTreeMap<String, Expr>, schema: &[ParamSpec], env: &Env) -> Vec<Diagnostic> {
    bind_params(loc, bindings, schema, env).0
}

/// Exposes argument values as `props.<name>` for shape contracts.
pub struct Props<'a>(pub &'a Args);

impl Scope for Props<'_> {
    fn lookup(&self, name: &str) -> Option<Binding> {
        self.0.get(name.strip_prefix("props.")?).cloned()
    }
}
