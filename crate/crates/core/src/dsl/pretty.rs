//! Canonical formatting: one op per line inside chains, two-space indent.

use std::fmt::Write;

use super::parser::{DECL_KEYWORDS, RESERVED};
use super::{Decl, DeclKind, Program};
use crate::algebra::{RefinerBody, SourceKind};
use crate::state::quote;
use crate::store::RefineMode;

/// Bare when it lexes as a plain identifier, quoted otherwise.
fn name(s: &str) -> String {
    let mut chars = s.chars();
    let ident = chars.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !RESERVED.contains(&s)
        && !DECL_KEYWORDS.contains(&s);
    if ident {
        s.to_string()
    } else {
        quote(s)
    }
}

pub fn pretty(program: &Program) -> String {
    let mut out = program.decls.iter().map(pretty_decl).collect::<Vec<_>>().join("\n");
    if !program.trailing_comments.is_empty() {
        out.push('\n');
        for c in &program.trailing_comments {
            let _ = writeln!(out, "#{c}");
        }
    }
    out
}

/// One declaration, terminated by a newline.
pub fn pretty_decl(decl: &Decl) -> String {
    let mut out = String::new();
    for c in &decl.comments {
        let _ = writeln!(out, "#{c}");
    }
    match &decl.kind {
        DeclKind::View(v) => {
            let _ = write!(out, "view {}", name(&v.name));
            if !v.params.is_empty() {
                let ps: Vec<String> = v
                    .params
                    .iter()
                    .map(|p| match &p.default {
                        Some(d) => format!("{}: {}", p.name, quote(d)),
                        None => p.name.clone(),
                    })
                    .collect();
                let _ = write!(out, " ({})", ps.join(", "));
            }
            if !v.tags.is_empty() {
                let ts: Vec<String> = v.tags.iter().map(|t| quote(t)).collect();
                let _ = write!(out, " tags [{}]", ts.join(", "));
            }
            let _ = write!(out, " {}", quote(&v.body));
        }
        DeclKind::Refiner(r) => {
            let _ = write!(out, "refiner {}", name(&r.id));
            if !r.params.is_empty() {
                let _ = write!(out, "({})", r.params.join(", "));
            }
            match r.mode {
                RefineMode::Manual => out.push_str(" manual"),
                RefineMode::Assisted => {
                    let _ = write!(out, " assisted(hint: {})", quote(r.hint.as_deref().unwrap_or("")));
                }
                RefineMode::Auto if r.signals.is_empty() => out.push_str(" auto"),
                RefineMode::Auto => {
                    let s: Vec<String> = r.signals.iter().map(|s| format!("signal: M[{}]", quote(s))).collect();
                    let _ = write!(out, " auto({})", s.join(", "));
                }
            }
            if let Some(k) = &r.key {
                let _ = write!(out, " key {}", quote(k));
            }
            let _ = match &r.body {
                RefinerBody::Text(t) => write!(out, " text {}", quote(t)),
                RefinerBody::Append(t) => write!(out, " append {}", quote(t)),
                RefinerBody::Template(t) => write!(out, " template {}", quote(t)),
                RefinerBody::Transform(t) => write!(out, " transform {}", t.name()),
            };
        }
        DeclKind::Source(s) => {
            let _ = write!(out, "source {}", name(&s.name));
            let _ = match &s.kind {
                SourceKind::Inline(v) => write!(out, " inline {}", quote(&v.to_string())),
                SourceKind::File(p) => write!(out, " file {}", quote(&p.to_string_lossy())),
            };
            if let Some(k) = &s.into {
                let _ = write!(out, " into {}", quote(k));
            }
        }
        DeclKind::Agent(a) => {
            let _ = write!(out, "agent {} = {}", name(&a.name), name(&a.target));
        }
        DeclKind::Prompt(p) => {
            let _ = write!(out, "prompt {}", name(&p.key));
            if !p.params.is_empty() {
                let ps: Vec<String> = p.params.iter().map(|(k, v)| format!("{k}: {}", quote(v))).collect();
                let _ = write!(out, " ({})", ps.join(", "));
            }
            let _ = write!(out, " {}", quote(&p.text));
        }
        DeclKind::Pipeline(p) => {
            let _ = write!(out, "{p}");
        }
    }
    out.push('\n');
    out
}
