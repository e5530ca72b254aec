//! Component model, validation, code generation and package registry for
//! composing PyTorch networks out of reusable code-fragment components.

pub mod codegen;
pub mod diagnostics;
pub mod document;
pub mod expr;
pub mod model;
pub mod registry;
pub mod shape;
pub mod template;
pub mod validate;
