//! `${token}` code templates.
//!
//! The token grammar is closed:
//!
//! | token | replaced with |
//! |---|---|
//! | `${name}` | the instance attribute chosen by the generator |
//! | `${input}`, `${input_<k>}` | the value wired into input port `k` (`${input}` is port 0) |
//! | `${output}`, `${output_<k>}` | the value produced on output port `k` |
//! | `${props.<param>}` | the bound parameter expression |
//! | `${repeat_index}` | the loop index of a repeated node (`0` when not repeated) |

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::shape::is_identifier;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Token {
    Name,
    Input(usize),
    Output(usize),
    Prop(String),
    RepeatIndex,
}

impl Token {
    pub fn parse(body: &str) -> Option<Token> {
        match body {
            "name" => return Some(Token::Name),
            "input" => return Some(Token::Input(0)),
            "output" => return Some(Token::Output(0)),
            "repeat_index" => return Some(Token::RepeatIndex),
            _ => {}
        }
        if let Some(p) = body.strip_prefix("props.") {
            return is_identifier(p).then(|| Token::Prop(p.to_string()));
        }
        let port = |rest: &str| -> Option<usize> {
            if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) || (rest.len() > 1 && rest.starts_with('0')) {
                return None;
            }
            rest.parse().ok()
        };
        if let Some(rest) = body.strip_prefix("input_") {
            return port(rest).map(Token::Input);
        }
        if let Some(rest) = body.strip_prefix("output_") {
            return port(rest).map(Token::Output);
        }
        None
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Name => f.write_str("${name}"),
            Token::Input(k) => write!(f, "${{input_{k}}}"),
            Token::Output(k) => write!(f, "${{output_{k}}}"),
            Token::Prop(p) => write!(f, "${{props.{p}}}"),
            Token::RepeatIndex => f.write_str("${repeat_index}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unterminated `${{` at byte {0}")]
    Unterminated(usize),
    #[error("UNKNOWN_TOKEN: `${{{token}}}` at byte {offset}")]
    UnknownToken { token: String, offset: usize },
    #[error("UNKNOWN_TOKEN: no replacement for {0}")]
    Unbound(Token),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment<'a> {
    Text(&'a str),
    Token(Token),
}

/// Splits a template into literal text and tokens.
pub fn scan(template: &str) -> Result<Vec<Segment<'_>>, TemplateError> {
    let mut out = Vec::new();
    let mut rest = template;
    let mut base = 0;
    while let Some(start) = rest.find("${") {
        if start > 0 {
            out.push(Segment::Text(&rest[..start]));
        }
        let after = &rest[start + 2..];
        let Some(end) = after.find('}') else {
            return Err(TemplateError::Unterminated(base + start));
        };
        let body = &after[..end];
        let token = Token::parse(body.trim()).ok_or_else(|| TemplateError::UnknownToken { token: body.to_string(), offset: base + start })?;
        out.push(Segment::Token(token));
        let consumed = start + 2 + end + 1;
        base += consumed;
        rest = &rest[consumed..];
    }
    if !rest.is_empty() {
        out.push(Segment::Text(rest));
    }
    Ok(out)
}

/// Every token in the template, in order of appearance.
pub fn tokens(template: &str) -> Result<Vec<Token>, TemplateError> {
    Ok(scan(template)?
        .into_iter()
        .filter_map(|s| match s {
            Segment::Token(t) => Some(t),
            Segment::Text(_) => None,
        })
        .collect())
}

pub type TokenEnv = BTreeMap<Token, String>;

/// Replaces every token in a single pass; replacement text is never rescanned.
pub fn substitute_tokens(template: &str, env: &TokenEnv) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    for seg in scan(template)? {
        match seg {
            Segment::Text(t) => out.push_str(t),
            Segment::Token(tok) => match env.get(&tok) {
                Some(replacement) => out.push_str(replacement),
                None => return Err(TemplateError::Unbound(tok)),
            },
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitutes_linear_init() {
        let env: TokenEnv = [
            (Token::Name, "fc_0".to_string()),
            (Token::Prop("in".into()), "512".to_string()),
            (Token::Prop("out".into()), "10".to_string()),
        ]
        .into();
        assert_eq!(substitute_tokens("self.${name} = Linear(${props.in}, ${props.out})", &env).unwrap(), "self.fc_0 = Linear(512, 10)");
    }

    #[test]
    fn no_tokens_is_identity() {
        let src = "x = {'a': 1}  # $ and { are fine";
        assert_eq!(substitute_tokens(src, &TokenEnv::new()).unwrap(), src);
    }

    #[test]
    fn relu_forward_wiring() {
        let env: TokenEnv = [
            (Token::Name, "relu_0".to_string()),
            (Token::Input(0), "x_conv_0".to_string()),
            (Token::Output(0), "x_relu_0".to_string()),
        ]
        .into();
        assert_eq!(substitute_tokens("${output} = self.${name}(${input})", &env).unwrap(), "x_relu_0 = self.relu_0(x_conv_0)");
    }

    #[test]
    fn replacements_are_not_rescanned() {
        let env: TokenEnv = [(Token::Name, "${repeat_index}".to_string())].into();
        assert_eq!(substitute_tokens("${name}", &env).unwrap(), "${repeat_index}");
    }

    #[test]
    fn grammar_is_closed() {
        assert_eq!(Token::parse("input_3"), Some(Token::Input(3)));
        assert_eq!(Token::parse("input"), Some(Token::Input(0)));
        assert_eq!(Token::parse("output_0"), Some(Token::Output(0)));
        for bad in ["inputs", "input_", "input_01", "props.", "props.a.b", "parameter", "token", "props"] {
            assert_eq!(Token::parse(bad), None, "{bad}");
        }
        assert!(matches!(scan("a ${oops} b"), Err(TemplateError::UnknownToken { offset: 2, .. })));
        assert_eq!(scan("a ${name"), Err(TemplateError::Unterminated(2)));
    }

    #[test]
    fn missing_replacement_is_an_error() {
        assert_eq!(substitute_tokens("${props.k}", &TokenEnv::new()), Err(TemplateError::Unbound(Token::Prop("k".into()))));
    }
}
