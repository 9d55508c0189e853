//! Double-brace prompt templates.
//!
//! ```text
//! {{name}}                    parameter
//! {{C.notes}}                 context lookup (dotted path)
//! {{> view a="lit" b=name}}   view include; argument values are literals or names
//! \{{  \}}                    literal braces
//! ```

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Text(String),
    Param(String),
    Context(Vec<String>),
    Include { view: String, args: Vec<(String, IncludeArg)> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IncludeArg {
    Literal(String),
    /// A parameter name or a `C.` path, resolved in the including scope.
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Template {
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("template syntax error at byte {offset}: {message}")]
pub struct TemplateSyntaxError {
    pub offset: usize,
    pub message: String,
}

fn syntax(offset: usize, message: impl Into<String>) -> TemplateSyntaxError {
    TemplateSyntaxError { offset, message: message.into() }
}

impl Template {
    pub fn parse(src: &str) -> Result<Self, TemplateSyntaxError> {
        let mut segments = Vec::new();
        let mut text = String::new();
        let mut i = 0;
        while i < src.len() {
            let rest = &src[i..];
            if rest.starts_with("\\{{") || rest.starts_with("\\}}") {
                text.push_str(&rest[1..3]);
                i += 3;
            } else if rest.starts_with("{{") {
                let Some(close) = rest[2..].find("}}") else {
                    return Err(syntax(i, "unclosed '{{'"));
                };
                let inner = &rest[2..2 + close];
                if inner.contains("{{") {
                    return Err(syntax(i, "nested '{{' inside placeholder"));
                }
                if !text.is_empty() {
                    segments.push(Segment::Text(std::mem::take(&mut text)));
                }
                segments.push(parse_placeholder(inner, i + 2)?);
                i += 2 + close + 2;
            } else if rest.starts_with("}}") {
                return Err(syntax(i, "unmatched '}}'"));
            } else {
                let ch = rest.chars().next().unwrap();
                text.push(ch);
                i += ch.len_utf8();
            }
        }
        if !text.is_empty() {
            segments.push(Segment::Text(text));
        }
        Ok(Template { segments })
    }

    /// Names of views included directly by this template, in body order.
    pub fn includes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for seg in &self.segments {
            if let Segment::Include { view, .. } = seg {
                if !out.contains(view) {
                    out.push(view.clone());
                }
            }
        }
        out
    }

    pub fn params(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Param(p) => Some(p.as_str()),
            _ => None,
        })
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_alphabetic() || c == '_')
        && chars.all(|c| c.is_alphanumeric() || c == '_')
}

fn parse_name(name: &str, offset: usize) -> Result<Segment, TemplateSyntaxError> {
    if let Some(path) = name.strip_prefix("C.") {
        let parts: Vec<String> = path.split('.').map(str::to_string).collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(syntax(offset, format!("malformed context path '{name}'")));
        }
        return Ok(Segment::Context(parts));
    }
    if !is_ident(name) {
        return Err(syntax(offset, format!("invalid placeholder name '{name}'")));
    }
    Ok(Segment::Param(name.to_string()))
}

fn parse_placeholder(inner: &str, offset: usize) -> Result<Segment, TemplateSyntaxError> {
    let trimmed = inner.trim();
    let Some(include) = trimmed.strip_prefix('>') else {
        return parse_name(trimmed, offset);
    };
    let mut rest = include.trim_start();
    let view_end = rest.find(char::is_whitespace).unwrap_or(rest.len());
    let view = &rest[..view_end];
    if !is_ident(view) {
        return Err(syntax(offset, format!("invalid view name '{view}'")));
    }
    rest = rest[view_end..].trim_start();
    let mut args = Vec::new();
    while !rest.is_empty() {
        let Some(eq) = rest.find('=') else {
            return Err(syntax(offset, "include argument must be name=value"));
        };
        let name = rest[..eq].trim();
        if !is_ident(name) {
            return Err(syntax(offset, format!("invalid argument name '{name}'")));
        }
        rest = rest[eq + 1..].trim_start();
        if let Some(body) = rest.strip_prefix('"') {
            let mut value = String::new();
            let mut chars = body.char_indices();
            let mut end = None;
            while let Some((idx, ch)) = chars.next() {
                match ch {
                    '\\' => match chars.next() {
                        Some((_, 'n')) => value.push('\n'),
                        Some((_, c)) => value.push(c),
                        None => break,
                    },
                    '"' => {
                        end = Some(idx);
                        break;
                    }
                    c => value.push(c),
                }
            }
            let Some(end) = end else {
                return Err(syntax(offset, "unterminated string in include"));
            };
            args.push((name.to_string(), IncludeArg::Literal(value)));
            rest = body[end + 1..].trim_start();
        } else {
            let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
            let value = &rest[..end];
            match parse_name(value, offset)? {
                Segment::Param(_) | Segment::Context(_) => {
                    args.push((name.to_string(), IncludeArg::Name(value.to_string())))
                }
                _ => unreachable!(),
            }
            rest = rest[end..].trim_start();
        }
    }
    Ok(Segment::Include { view: view.to_string(), args })
}

/// Escape literal braces so `text` parses back as a single text segment.
pub fn escape(text: &str) -> String {
    text.replace("{{", "\\{{").replace("}}", "\\}}")
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => f.write_str(&escape(t))?,
                Segment::Param(p) => write!(f, "{{{{{p}}}}}")?,
                Segment::Context(path) => write!(f, "{{{{C.{}}}}}", path.join("."))?,
                Segment::Include { view, args } => {
                    write!(f, "{{{{> {view}")?;
                    for (name, arg) in args {
                        match arg {
                            IncludeArg::Literal(v) => {
                                let q = v.replace('\\', "\\\\").replace('"', "\\\"");
                                write!(f, " {name}=\"{q}\"")?
                            }
                            IncludeArg::Name(n) => write!(f, " {name}={n}")?,
                        }
                    }
                    f.write_str("}}")?;
                }
            }
        }
        Ok(())
    }
}
