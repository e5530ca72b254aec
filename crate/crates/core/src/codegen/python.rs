//! Python source helpers: identifiers, naming and line layout.

pub const MAX_LINE: usize = 88;
pub const INDENT: &str = "    ";

const KEYWORDS: &[&str] = &[
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class", "continue", "def", "del", "elif", "else",
    "except", "finally", "for", "from", "global", "if", "import", "in", "is", "lambda", "nonlocal", "not", "or", "pass", "raise",
    "return", "try", "while", "with", "yield",
];

/// Names a block parameter or local variable may not take in generated code.
const SHADOWED: &[&str] = &["self", "super", "torch", "nn", "range", "repeat_index"];

/// Attributes of `nn.Module` (torch 2.x) that generated attribute names must not overwrite.
const MODULE_ATTRS: &[&str] = &[
    "T_destination", "_apply", "_backward_hooks", "_backward_pre_hooks", "_buffers", "_call_impl", "_compiled_call_impl",
    "_forward_hooks", "_forward_hooks_always_called", "_forward_hooks_with_kwargs", "_forward_pre_hooks",
    "_forward_pre_hooks_with_kwargs", "_get_backward_hooks", "_get_backward_pre_hooks", "_get_name",
    "_is_full_backward_hook", "_load_from_state_dict", "_load_state_dict_post_hooks", "_load_state_dict_pre_hooks",
    "_maybe_warn_non_full_backward_hook", "_modules", "_named_members", "_non_persistent_buffers_set", "_parameters",
    "_register_load_state_dict_pre_hook", "_register_state_dict_hook", "_replicate_for_data_parallel",
    "_save_to_state_dict", "_slow_forward", "_state_dict_hooks", "_state_dict_pre_hooks", "_version", "_wrapped_call_impl",
    "add_module", "apply", "bfloat16", "buffers", "call_super_init", "children", "compile", "cpu", "cuda", "double",
    "dump_patches", "eval", "extra_repr", "float", "forward", "get_buffer", "get_extra_state", "get_parameter",
    "get_submodule", "half", "ipu", "load_state_dict", "modules", "mtia", "named_buffers", "named_children",
    "named_modules", "named_parameters", "parameters", "register_backward_hook", "register_buffer", "register_forward_hook",
    "register_forward_pre_hook", "register_full_backward_hook", "register_full_backward_pre_hook",
    "register_load_state_dict_post_hook", "register_load_state_dict_pre_hook", "register_module", "register_parameter",
    "register_state_dict_post_hook", "register_state_dict_pre_hook", "requires_grad_", "set_extra_state", "set_submodule",
    "share_memory", "state_dict", "to", "to_empty", "train", "training", "type", "xpu", "zero_grad",
];

pub fn is_keyword(name: &str) -> bool {
    KEYWORDS.contains(&name)
}

/// Whether `name` can be a constructor argument / local variable of a generated class.
pub fn is_usable_variable(name: &str) -> bool {
    !is_keyword(name) && !SHADOWED.contains(&name) && !name.starts_with("__")
}

pub fn is_module_attr(name: &str) -> bool {
    MODULE_ATTRS.contains(&name) || name.starts_with("__")
}

/// `ResnetLayer` -> `resnet_layer`, `HTTPServer` -> `http_server`.
pub fn snake_case(name: &str) -> String {
    let chars: Vec<char> = name.chars().collect();
    let mut out = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_ascii_uppercase() {
            let prev = if i > 0 { Some(chars[i - 1]) } else { None };
            let next = chars.get(i + 1).copied();
            let boundary = match prev {
                Some(p) if p.is_ascii_lowercase() || p.is_ascii_digit() => true,
                Some(p) if p.is_ascii_uppercase() => next.is_some_and(|n| n.is_ascii_lowercase()),
                _ => false,
            };
            if boundary && !out.ends_with('_') {
                out.push('_');
            }
            out.push(c.to_ascii_lowercase());
        } else if c == '-' {
            out.push('_');
        } else {
            out.push(c);
        }
    }
    if is_keyword(&out) || out.is_empty() {
        out.push('_');
    }
    out
}

/// Python string literal for `s`.
pub fn string_literal(s: &str) -> String {
    let mut out = String::from("'");
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\'' => out.push_str("\\'"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('\'');
    out
}

/// `prefix + callee(k=v, ...) + suffix`, wrapped one argument per line when
/// the single-line form exceeds [`MAX_LINE`].
pub fn call_lines(indent: usize, prefix: &str, callee: &str, kwargs: &[(String, String)], suffix: &str) -> Vec<String> {
    let pad = INDENT.repeat(indent);
    let args: Vec<String> = kwargs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let single = format!("{pad}{prefix}{callee}({}){suffix}", args.join(", "));
    if single.len() <= MAX_LINE || args.is_empty() {
        return vec![single];
    }
    let mut lines = vec![format!("{pad}{prefix}{callee}(")];
    for a in args {
        lines.push(format!("{pad}{INDENT}{a},"));
    }
    lines.push(format!("{pad}){suffix}"));
    lines
}

/// Removes the common leading whitespace of all non-blank lines and trailing blank lines.
pub fn dedent(text: &str) -> Vec<String> {
    let lines: Vec<&str> = text.lines().collect();
    let common = lines.iter().filter(|l| !l.trim().is_empty()).map(|l| l.len() - l.trim_start().len()).min().unwrap_or(0);
    let mut out: Vec<String> = lines.iter().map(|l| if l.trim().is_empty() { String::new() } else { l[common..].trim_end().to_string() }).collect();
    while out.last().is_some_and(|l| l.is_empty()) {
        out.pop();
    }
    while out.first().is_some_and(|l| l.is_empty()) {
        out.remove(0);
    }
    out
}

/// Import statement with whitespace runs collapsed; the deduplication key.
pub fn normalize_import(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snake_names() {
        assert_eq!(snake_case("ResnetLayer"), "resnet_layer");
        assert_eq!(snake_case("Bottleneck"), "bottleneck");
        assert_eq!(snake_case("ReLUBlock"), "re_lu_block");
        assert_eq!(snake_case("ReLU"), "re_lu");
        assert_eq!(snake_case("HTTPServer"), "http_server");
        assert_eq!(snake_case("Conv2dBN"), "conv2d_bn");
        assert_eq!(snake_case("If"), "if_");
    }

    #[test]
    fn wrapping() {
        let short = call_lines(2, "self.a = ", "Foo", &[("x".into(), "1".into())], "");
        assert_eq!(short, ["        self.a = Foo(x=1)"]);
        let long: Vec<(String, String)> = (0..8).map(|i| (format!("argument_{i}"), format!("value_{i}"))).collect();
        let lines = call_lines(2, "self.a = ", "Foo", &long, "");
        assert_eq!(lines.len(), 10);
        assert_eq!(lines[0], "        self.a = Foo(");
        assert_eq!(lines[1], "            argument_0=value_0,");
        assert_eq!(lines[9], "        )");
    }

    #[test]
    fn dedent_keeps_relative_indentation() {
        assert_eq!(dedent("\n    if a:\n        b\n\n"), ["if a:", "    b"]);
    }
}
