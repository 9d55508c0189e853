//! Pipeline language: parser with span diagnostics, pretty-printer, validator
//! and lowering into a registry, a prompt store and runnable pipelines.
//!
//! ```text
//! program  := decl*
//! decl     := view | refiner | source | agent | prompt | pipeline
//! view     := "view" NAME ("(" IDENT (":" STR)? ,* ")")? ("tags" "[" STR,* "]")? STR
//! refiner  := "refiner" NAME ("(" IDENT,* ")")? mode ("key" STR)? body
//! mode     := "manual" | "assisted" "(" "hint" ":" STR ")" | "auto" ("(" ("signal" ":" M[STR]),* ")")?
//! body     := ("text" | "append" | "template") STR | "transform" IDENT
//! source   := "source" NAME ("inline" STR | "file" STR) ("into" STR)?
//! agent    := "agent" NAME "=" NAME
//! prompt   := "prompt" NAME ("(" IDENT ":" STR,* ")")? STR
//! pipeline := "pipeline" NAME "{" chain "}"
//! chain    := op ("->" op)*
//! op       := KIND "[" args "]" block?
//! ```
//!
//! `#` starts a line comment. The printer keeps whole-line comments that sit
//! between declarations and drops comments inside a declaration.

mod lexer;
mod lower;
mod parser;
mod pretty;
mod validate;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use crate::algebra::Span;
use crate::algebra::{Pipeline, RefinerSpec, SourceDef};
use crate::store::{ParamMap, ViewDef};

pub use lower::{lower, lower_onto, Lowered};
pub use parser::{parse, parse_chain};
pub use pretty::{pretty, pretty_decl};
pub use validate::validate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub span: Span,
    pub message: String,
    /// File the span points into, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

impl Diagnostic {
    pub fn error(span: Span, message: impl Into<String>) -> Self {
        Diagnostic { severity: Severity::Error, span, message: message.into(), file: None }
    }

    pub fn warning(span: Span, message: impl Into<String>) -> Self {
        Diagnostic { severity: Severity::Warning, span, message: message.into(), file: None }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }

    pub fn in_file(mut self, file: impl Into<String>) -> Self {
        self.file = Some(file.into());
        self
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        if let Some(file) = &self.file {
            write!(f, "{file}:")?;
        }
        write!(f, "{}:{}: {sev}: {}", self.span.line, self.span.col, self.message)
    }
}

/// A name bound to a built-in agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentBinding {
    pub name: String,
    pub target: String,
}

/// A prompt entry seeded into the store before any pipeline runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptDecl {
    pub key: String,
    pub params: ParamMap,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DeclKind {
    View(ViewDef),
    Refiner(RefinerSpec),
    Source(SourceDef),
    Agent(AgentBinding),
    Prompt(PromptDecl),
    Pipeline(Pipeline),
}

impl DeclKind {
    /// Namespace the declaration's name lives in.
    pub fn namespace(&self) -> &'static str {
        match self {
            DeclKind::View(_) => "view",
            DeclKind::Refiner(_) => "refiner",
            DeclKind::Source(_) => "source",
            DeclKind::Agent(_) => "agent",
            DeclKind::Prompt(_) => "prompt",
            DeclKind::Pipeline(_) => "pipeline",
        }
    }

    pub fn name(&self) -> &str {
        match self {
            DeclKind::View(v) => &v.name,
            DeclKind::Refiner(r) => &r.id,
            DeclKind::Source(s) => &s.name,
            DeclKind::Agent(a) => &a.name,
            DeclKind::Prompt(p) => &p.key,
            DeclKind::Pipeline(p) => &p.name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decl {
    pub kind: DeclKind,
    pub span: Span,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    /// Whole-line comments directly above the declaration, without the `#`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub comments: Vec<String>,
}

/// A reference to a declared name, recorded by the parser for diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NameRef {
    pub namespace: &'static str,
    pub name: String,
    pub span: Span,
}

/// A parsed program: declarations in source order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Program {
    pub decls: Vec<Decl>,
    /// Name references with their exact spans; not part of equality.
    #[serde(skip)]
    pub refs: Vec<NameRef>,
    /// Whole-line comments after the last declaration; not part of equality.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trailing_comments: Vec<String>,
}

impl PartialEq for Program {
    fn eq(&self, other: &Self) -> bool {
        self.decls == other.decls
    }
}

impl Program {
    /// Concatenates programs into one namespace.
    pub fn merge(programs: impl IntoIterator<Item = Program>) -> Program {
        let mut out = Program::default();
        for p in programs {
            out.decls.extend(p.decls);
            out.refs.extend(p.refs);
        }
        out
    }

    pub fn pipelines(&self) -> impl Iterator<Item = &Pipeline> {
        self.decls.iter().filter_map(|d| match &d.kind {
            DeclKind::Pipeline(p) => Some(p),
            _ => None,
        })
    }

    pub fn pipeline(&self, name: &str) -> Option<&Pipeline> {
        self.pipelines().find(|p| p.name == name)
    }

    /// Span of the first reference to `name` inside `within`, else `within`.
    pub(crate) fn ref_span(&self, namespace: &str, name: &str, within: Span) -> Span {
        self.refs
            .iter()
            .find(|r| r.namespace == namespace && r.name == name && r.span.start >= within.start && r.span.end <= within.end)
            .map_or(within, |r| r.span)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DslError {
    #[error("{}", render(.0))]
    Diagnostics(Vec<Diagnostic>),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn render(diags: &[Diagnostic]) -> String {
    diags.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n")
}

/// Parses one file. Relative source paths resolve against the file's directory.
pub fn parse_file(path: &Path) -> Result<Program, DslError> {
    let text = std::fs::read_to_string(path).map_err(|source| DslError::Io { path: path.to_path_buf(), source })?;
    let name = path.display().to_string();
    let mut program = parse(&text).map_err(|ds| DslError::Diagnostics(ds.into_iter().map(|d| d.in_file(&name)).collect()))?;
    let dir = path.parent().unwrap_or(Path::new(""));
    for d in &mut program.decls {
        d.file = Some(name.clone());
        if let DeclKind::Source(SourceDef { kind: crate::algebra::SourceKind::File(p), .. }) = &mut d.kind {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
    Ok(program)
}

/// Parses, merges and validates several files; warnings are returned alongside.
pub fn load_files(paths: &[PathBuf]) -> Result<(Program, Vec<Diagnostic>), DslError> {
    let mut programs = Vec::new();
    let mut errors = Vec::new();
    for p in paths {
        match parse_file(p) {
            Ok(prog) => programs.push(prog),
            Err(DslError::Diagnostics(ds)) => errors.extend(ds),
            Err(e) => return Err(e),
        }
    }
    if !errors.is_empty() {
        return Err(DslError::Diagnostics(errors));
    }
    let program = Program::merge(programs);
    let diags = validate(&program);
    if diags.iter().any(Diagnostic::is_error) {
        return Err(DslError::Diagnostics(diags));
    }
    Ok((program, diags))
}
