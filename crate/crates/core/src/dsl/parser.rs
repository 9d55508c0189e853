//! Recursive-descent parser. Errors recover at the next declaration keyword
//! that starts a line, so one pass reports every broken declaration.

use std::path::PathBuf;

use super::lexer::{lex, LineIndex, Tok, Token};
use super::{AgentBinding, Decl, DeclKind, Diagnostic, NameRef, Program, PromptDecl, Span};
use crate::algebra::{
    FuseRule, GenSpec, MergePolicy, Node, Op, Payload, Pipeline, RefinerBody, RefinerRef, RefinerSpec, SourceDef,
    SourceKind, SwitchArm, Transform,
};
use crate::state::{Atom, CmpOp, Condition, Literal};
use crate::store::{param, ParamMap, RefAction, RefineMode, ViewDef};

type PResult<T> = Result<T, Diagnostic>;

pub(crate) const DECL_KEYWORDS: &[&str] = &["view", "refiner", "source", "agent", "prompt", "pipeline"];
pub(crate) const OP_KINDS: &[&str] =
    &["RET", "GEN", "REF", "CHECK", "MERGE", "DELEGATE", "EXPAND", "RETRY", "MAP", "SWITCH", "VIEW", "DIFF", "FUSE"];
/// Words a bare condition flag may not use.
pub(crate) const RESERVED: &[&str] = &["and", "or", "not", "in", "true", "false", "else"];

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    refs: Vec<NameRef>,
    eof: Span,
}

/// Parses a whole program. Returns every diagnostic when any is found.
pub fn parse(text: &str) -> Result<Program, Vec<Diagnostic>> {
    let (toks, mut diags) = lex(text);
    let mut p = Parser::new(text, toks);
    let mut decls = Vec::new();
    while p.pos < p.toks.len() {
        match p.decl() {
            Ok(d) => decls.push(d),
            Err(e) => {
                diags.push(e);
                p.recover();
            }
        }
    }
    let trailing_comments = attach_comments(text, &mut decls);
    finish(diags, Program { decls, refs: p.refs, trailing_comments })
}

/// Attaches each whole-line comment outside every declaration to the next
/// declaration; returns those after the last one. Comments inside a
/// declaration are dropped.
fn attach_comments(text: &str, decls: &mut [Decl]) -> Vec<String> {
    let mut trailing = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len();
        let Some(body) = line.trim_start().strip_prefix('#') else { continue };
        if decls.iter().any(|d| d.span.start <= at && at < d.span.end) {
            continue;
        }
        let body = body.trim_end().to_string();
        match decls.iter_mut().find(|d| d.span.start > at) {
            Some(d) => d.comments.push(body),
            None => trailing.push(body),
        }
    }
    trailing
}

/// Parses a bare chain such as `RET["notes"] -> GEN["answer"]`.
pub fn parse_chain(text: &str) -> Result<Vec<Node>, Vec<Diagnostic>> {
    let (toks, mut diags) = lex(text);
    let mut p = Parser::new(text, toks);
    match p.chain().and_then(|nodes| match p.peek() {
        None => Ok(nodes),
        Some(_) => Err(p.unexpected("'->' or end of input")),
    }) {
        Ok(nodes) => finish(diags, nodes),
        Err(e) => {
            diags.push(e);
            Err(diags)
        }
    }
}

fn finish<T>(mut diags: Vec<Diagnostic>, value: T) -> Result<T, Vec<Diagnostic>> {
    if diags.is_empty() {
        Ok(value)
    } else {
        diags.sort_by_key(|d| d.span.start);
        Err(diags)
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(s) => format!("'{s}'"),
        Tok::Str(_) => "a string".into(),
        Tok::Num(n) => format!("number {n}"),
        Tok::Punct(p) => format!("'{p}'"),
    }
}

impl Parser {
    fn new(text: &str, toks: Vec<Token>) -> Self {
        let eof = LineIndex::new(text).span(text, text.len(), text.len());
        Parser { toks, pos: 0, refs: Vec::new(), eof }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn peek_at(&self, n: usize) -> Option<&Tok> {
        self.toks.get(self.pos + n).map(|t| &t.tok)
    }

    fn here(&self) -> Span {
        self.toks.get(self.pos).map_or(self.eof, |t| t.span)
    }

    /// Span from `start` through the last consumed token.
    fn since(&self, start: Span) -> Span {
        let end = self.pos.checked_sub(1).and_then(|i| self.toks.get(i)).map_or(start.end, |t| t.span.end);
        Span { end: end.max(start.start), ..start }
    }

    fn unexpected(&self, wanted: &str) -> Diagnostic {
        let found = self.peek().map_or("end of input".to_string(), describe);
        Diagnostic::error(self.here(), format!("expected {wanted}, found {found}"))
    }

    fn recover(&mut self) {
        self.pos += 1;
        while let Some(t) = self.toks.get(self.pos) {
            if t.line_start && matches!(&t.tok, Tok::Ident(s) if DECL_KEYWORDS.contains(&s.as_str())) {
                break;
            }
            self.pos += 1;
        }
    }

    fn is_punct(&self, p: &str) -> bool {
        matches!(self.peek(), Some(Tok::Punct(q)) if *q == p)
    }

    fn eat_punct(&mut self, p: &str) -> bool {
        let hit = self.is_punct(p);
        if hit {
            self.pos += 1;
        }
        hit
    }

    fn expect_punct(&mut self, p: &str) -> PResult<()> {
        if self.eat_punct(p) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("'{p}'")))
        }
    }

    fn is_ident(&self, s: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(i)) if i == s)
    }

    fn eat_ident(&mut self, s: &str) -> bool {
        let hit = self.is_ident(s);
        if hit {
            self.pos += 1;
        }
        hit
    }

    fn expect_ident(&mut self, s: &str) -> PResult<()> {
        if self.eat_ident(s) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("'{s}'")))
        }
    }

    fn ident(&mut self) -> PResult<(String, Span)> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let out = (s.clone(), self.here());
                self.pos += 1;
                Ok(out)
            }
            _ => Err(self.unexpected("an identifier")),
        }
    }

    fn string(&mut self) -> PResult<(String, Span)> {
        match self.peek() {
            Some(Tok::Str(s)) => {
                let out = (s.clone(), self.here());
                self.pos += 1;
                Ok(out)
            }
            _ => Err(self.unexpected("a string")),
        }
    }

    /// A string or a bare identifier.
    fn name(&mut self) -> PResult<(String, Span)> {
        match self.peek() {
            Some(Tok::Str(_)) => self.string(),
            Some(Tok::Ident(_)) => self.ident(),
            _ => Err(self.unexpected("a name")),
        }
    }

    fn number(&mut self) -> PResult<(f64, Span)> {
        match self.peek() {
            Some(Tok::Num(n)) => {
                let out = (*n, self.here());
                self.pos += 1;
                Ok(out)
            }
            _ => Err(self.unexpected("a number")),
        }
    }

    fn count(&mut self) -> PResult<u32> {
        let (n, span) = self.number()?;
        if n < 0.0 || n.fract() != 0.0 || n > u32::MAX as f64 {
            return Err(Diagnostic::error(span, format!("expected a nonnegative integer, found {n}")));
        }
        Ok(n as u32)
    }

    fn boolean(&mut self) -> PResult<bool> {
        if self.eat_ident("true") {
            Ok(true)
        } else if self.eat_ident("false") {
            Ok(false)
        } else {
            Err(self.unexpected("'true' or 'false'"))
        }
    }

    fn record(&mut self, namespace: &'static str, name: &str, span: Span) {
        self.refs.push(NameRef { namespace, name: name.to_string(), span });
    }

    /// `head[name]`, e.g. `P["answer"]` or `C["notes"]`.
    fn subscript(&mut self, head: &str) -> PResult<String> {
        if !(self.is_ident(head) && matches!(self.peek_at(1), Some(Tok::Punct("[")))) {
            return Err(self.unexpected(&format!("{head}[...]")));
        }
        self.pos += 2;
        let (name, _) = self.name()?;
        self.expect_punct("]")?;
        Ok(name)
    }

    /// Comma-separated items up to `close`, the opening delimiter already consumed.
    fn list<T>(&mut self, close: &str, mut item: impl FnMut(&mut Self) -> PResult<T>) -> PResult<Vec<T>> {
        let mut out = Vec::new();
        if self.eat_punct(close) {
            return Ok(out);
        }
        loop {
            out.push(item(self)?);
            if self.eat_punct(close) {
                return Ok(out);
            }
            self.expect_punct(",")?;
        }
    }

    /// Trailing `, key: value` arguments and the closing bracket.
    fn named_args(&mut self, kind: &str, allowed: Option<&[&str]>, mut f: impl FnMut(&mut Self, &str) -> PResult<()>) -> PResult<()> {
        let mut seen: Vec<String> = Vec::new();
        while self.eat_punct(",") {
            let (key, span) = self.ident()?;
            if let Some(allowed) = allowed {
                if !allowed.contains(&key.as_str()) {
                    return Err(Diagnostic::error(
                        span,
                        format!("unknown argument '{key}' for {kind}; expected one of: {}", allowed.join(", ")),
                    ));
                }
            }
            if seen.contains(&key) {
                return Err(Diagnostic::error(span, format!("duplicate argument '{key}' for {kind}")));
            }
            self.expect_punct(":")?;
            f(self, &key)?;
            seen.push(key);
        }
        self.expect_punct("]")
    }

    fn decl(&mut self) -> PResult<Decl> {
        let start = self.here();
        let kind = match self.peek() {
            Some(Tok::Ident(k)) if DECL_KEYWORDS.contains(&k.as_str()) => {
                let k = k.clone();
                self.pos += 1;
                match k.as_str() {
                    "view" => self.view()?,
                    "refiner" => self.refiner()?,
                    "source" => self.source()?,
                    "agent" => self.agent()?,
                    "prompt" => self.prompt()?,
                    _ => self.pipeline()?,
                }
            }
            _ => return Err(self.unexpected("a declaration (view, refiner, source, agent, prompt or pipeline)")),
        };
        Ok(Decl { kind, span: self.since(start), file: None, comments: Vec::new() })
    }

    fn view(&mut self) -> PResult<DeclKind> {
        let (name, _) = self.name()?;
        let mut params = Vec::new();
        if self.eat_punct("(") {
            params = self.list(")", |p| {
                let (n, _) = p.ident()?;
                let default = if p.eat_punct(":") { Some(p.string()?.0) } else { None };
                Ok(param(&n, default.as_deref()))
            })?;
        }
        let mut tags = Vec::new();
        if self.eat_ident("tags") {
            self.expect_punct("[")?;
            tags = self.list("]", |p| Ok(p.string()?.0))?;
        }
        let (body, span) = self.string()?;
        let view = ViewDef::new(name, params, body).map_err(|e| Diagnostic::error(span, e.to_string()))?;
        Ok(DeclKind::View(view.with_tags(tags)))
    }

    fn refiner(&mut self) -> PResult<DeclKind> {
        let (id, _) = self.name()?;
        let mut params = Vec::new();
        if self.eat_punct("(") {
            params = self.list(")", |p| Ok(p.ident()?.0))?;
        }
        let (mode_word, mode_span) = self.ident()?;
        let mut hint = None;
        let mut signals = Vec::new();
        let mode = match mode_word.as_str() {
            "manual" => RefineMode::Manual,
            "assisted" => {
                self.expect_punct("(")?;
                self.expect_ident("hint")?;
                self.expect_punct(":")?;
                hint = Some(self.string()?.0);
                self.expect_punct(")")?;
                RefineMode::Assisted
            }
            "auto" => {
                if self.eat_punct("(") {
                    signals = self.list(")", |p| {
                        p.expect_ident("signal")?;
                        p.expect_punct(":")?;
                        p.subscript("M")
                    })?;
                }
                RefineMode::Auto
            }
            other => {
                return Err(Diagnostic::error(mode_span, format!("expected a refinement mode (manual, assisted or auto), found '{other}'")))
            }
        };
        let key = if self.eat_ident("key") { Some(self.string()?.0) } else { None };
        let (body_word, body_span) = self.ident()?;
        let body = match body_word.as_str() {
            "text" => RefinerBody::Text(self.string()?.0),
            "append" => RefinerBody::Append(self.string()?.0),
            "template" => RefinerBody::Template(self.string()?.0),
            "transform" => {
                let (t, span) = self.ident()?;
                RefinerBody::Transform(
                    Transform::from_name(&t).ok_or_else(|| Diagnostic::error(span, format!("unknown transform '{t}'")))?,
                )
            }
            other => {
                return Err(Diagnostic::error(
                    body_span,
                    format!("expected a refiner body (text, append, template or transform), found '{other}'"),
                ))
            }
        };
        Ok(DeclKind::Refiner(RefinerSpec { id, mode, params, hint, signals, key, body }))
    }

    fn source(&mut self) -> PResult<DeclKind> {
        let (name, _) = self.name()?;
        let kind = if self.eat_ident("inline") {
            let (json, span) = self.string()?;
            SourceKind::Inline(
                serde_json::from_str(&json).map_err(|e| Diagnostic::error(span, format!("inline source is not JSON: {e}")))?,
            )
        } else if self.eat_ident("file") {
            SourceKind::File(PathBuf::from(self.string()?.0))
        } else {
            return Err(self.unexpected("'inline' or 'file'"));
        };
        let into = if self.eat_ident("into") { Some(self.string()?.0) } else { None };
        Ok(DeclKind::Source(SourceDef { name, kind, into }))
    }

    fn agent(&mut self) -> PResult<DeclKind> {
        let (name, _) = self.name()?;
        self.expect_punct("=")?;
        let (target, _) = self.name()?;
        Ok(DeclKind::Agent(AgentBinding { name, target }))
    }

    fn prompt(&mut self) -> PResult<DeclKind> {
        let (key, _) = self.name()?;
        let mut params = ParamMap::new();
        if self.eat_punct("(") {
            for (k, v) in self.list(")", |p| {
                let (k, _) = p.ident()?;
                p.expect_punct(":")?;
                Ok((k, p.string()?.0))
            })? {
                params.insert(k, v);
            }
        }
        let (text, _) = self.string()?;
        Ok(DeclKind::Prompt(PromptDecl { key, params, text }))
    }

    fn pipeline(&mut self) -> PResult<DeclKind> {
        let start = self.here();
        let (name, _) = self.name()?;
        let nodes = self.block()?;
        Ok(DeclKind::Pipeline(Pipeline { name, nodes, span: self.since(start) }))
    }

    fn block(&mut self) -> PResult<Vec<Node>> {
        self.expect_punct("{")?;
        if self.eat_punct("}") {
            return Ok(Vec::new());
        }
        let nodes = self.chain()?;
        if self.eat_punct("}") {
            Ok(nodes)
        } else {
            Err(self.unexpected("'->' or '}'"))
        }
    }

    fn chain(&mut self) -> PResult<Vec<Node>> {
        let mut nodes = vec![self.op()?];
        while self.eat_punct("->") {
            nodes.push(self.op()?);
        }
        Ok(nodes)
    }

    fn op(&mut self) -> PResult<Node> {
        let start = self.here();
        let kind = match self.peek() {
            Some(Tok::Ident(k)) if OP_KINDS.contains(&k.as_str()) => k.clone(),
            _ => return Err(self.unexpected(&format!("an operator ({})", OP_KINDS.join(", ")))),
        };
        self.pos += 1;
        self.expect_punct("[")?;
        let op = match kind.as_str() {
            "RET" => self.ret()?,
            "GEN" => self.gen()?,
            "REF" => self.refine()?,
            "CHECK" => self.check()?,
            "MERGE" => self.merge()?,
            "DELEGATE" => self.delegate()?,
            "EXPAND" => {
                let (key, _) = self.name()?;
                self.expect_punct(",")?;
                let (text, _) = self.string()?;
                self.expect_punct("]")?;
                Op::Expand { key, text }
            }
            "RETRY" => self.retry()?,
            "MAP" => {
                self.expect_punct("[")?;
                let keys = self.list("]", |p| Ok(p.name()?.0))?;
                self.expect_punct(",")?;
                let refiner = self.refiner_ref()?;
                self.expect_punct("]")?;
                Op::Map { keys, refiner }
            }
            "SWITCH" => self.switch()?,
            "VIEW" => {
                let (name, span) = self.name()?;
                self.record("view", &name, span);
                let mut key = None;
                self.named_args("VIEW", Some(&["key"]), |p, _| {
                    key = Some(p.string()?.0);
                    Ok(())
                })?;
                let args = self.view_args()?;
                Op::View { name, args, key }
            }
            "DIFF" => {
                let (left, _) = self.name()?;
                self.expect_punct(",")?;
                let (right, _) = self.name()?;
                self.expect_punct("]")?;
                Op::Diff { left, right }
            }
            _ => {
                let (rule, span) = self.string()?;
                let rule = FuseRule::from_name(&rule).ok_or_else(|| Diagnostic::error(span, format!("unknown fusion rule '{rule}'")))?;
                self.expect_punct("]")?;
                Op::Fuse { rule, body: self.block()? }
            }
        };
        Ok(Node { op, span: self.since(start) })
    }

    fn ret(&mut self) -> PResult<Op> {
        let (source, span) = self.name()?;
        self.record("source", &source, span);
        let mut prompt = None;
        let mut params = ParamMap::new();
        self.named_args("RET", None, |p, key| {
            if key == "prompt" {
                prompt = Some(p.subscript("P")?);
            } else {
                params.insert(key.to_string(), p.string()?.0);
            }
            Ok(())
        })?;
        Ok(Op::Ret { source, prompt, params })
    }

    fn gen(&mut self) -> PResult<Op> {
        let (label, _) = self.name()?;
        let mut g = GenSpec::new(label);
        self.named_args("GEN", Some(&["prompt", "over", "keep", "max_tokens"]), |p, key| {
            match key {
                "prompt" => g.prompt = Some(p.subscript("P")?),
                "over" => g.over = Some(p.subscript("C")?),
                "keep" => g.keep = Some(p.string()?.0),
                _ => g.max_tokens = Some(p.count()?),
            }
            Ok(())
        })?;
        Ok(Op::Gen(g))
    }

    fn refine(&mut self) -> PResult<Op> {
        let (word, span) = self.ident()?;
        let action = match word.as_str() {
            "CREATE" => RefAction::Create,
            "APPEND" => RefAction::Append,
            "UPDATE" => RefAction::Update,
            "MERGE" => RefAction::Merge,
            other => {
                return Err(Diagnostic::error(span, format!("expected CREATE, APPEND, UPDATE or MERGE, found '{other}'")))
            }
        };
        self.expect_punct(",")?;
        let refiner = self.refiner_ref()?;
        let mut key = None;
        let mut overwrite = false;
        self.named_args("REF", Some(&["key", "overwrite"]), |p, k| {
            match k {
                "key" => key = Some(p.name()?.0),
                _ => overwrite = p.boolean()?,
            }
            Ok(())
        })?;
        Ok(Op::Ref { action, refiner, key, overwrite })
    }

    fn refiner_ref(&mut self) -> PResult<RefinerRef> {
        match self.peek() {
            Some(Tok::Str(_)) => Ok(RefinerRef::Literal(self.string()?.0)),
            Some(Tok::Ident(v)) if v == "VIEW" && matches!(self.peek_at(1), Some(Tok::Punct("["))) => {
                self.pos += 2;
                let (name, span) = self.name()?;
                self.record("view", &name, span);
                self.expect_punct("]")?;
                Ok(RefinerRef::View { name, args: self.view_args()? })
            }
            Some(Tok::Ident(_)) => {
                let (id, span) = self.ident()?;
                self.record("refiner", &id, span);
                let args = if self.eat_punct("(") { self.list(")", |p| Ok(p.string()?.0))? } else { Vec::new() };
                Ok(RefinerRef::Named { id, args })
            }
            _ => Err(self.unexpected("a refiner, a string or VIEW[...]")),
        }
    }

    /// Optional `(name: "value", ...)` after a view reference.
    fn view_args(&mut self) -> PResult<ParamMap> {
        let mut args = ParamMap::new();
        if self.eat_punct("(") {
            for (k, span, v) in self.list(")", |p| {
                let (k, span) = p.ident()?;
                p.expect_punct(":")?;
                Ok((k, span, p.string()?.0))
            })? {
                if args.insert(k.clone(), v).is_some() {
                    return Err(Diagnostic::error(span, format!("duplicate view argument '{k}'")));
                }
            }
        }
        Ok(args)
    }

    fn check(&mut self) -> PResult<Op> {
        let cond = self.condition()?;
        let mut site = None;
        let mut counter = None;
        self.named_args("CHECK", Some(&["site", "counter"]), |p, k| {
            let v = Some(p.string()?.0);
            match k {
                "site" => site = v,
                _ => counter = v,
            }
            Ok(())
        })?;
        Ok(Op::Check { cond, body: self.block()?, site, counter })
    }

    fn merge(&mut self) -> PResult<Op> {
        let (left, _) = self.name()?;
        self.expect_punct(",")?;
        let (right, _) = self.name()?;
        let mut into = None;
        let mut policy = MergePolicy::default();
        self.named_args("MERGE", Some(&["into", "policy"]), |p, k| {
            match k {
                "into" => into = Some(p.name()?.0),
                _ => policy = p.policy()?,
            }
            Ok(())
        })?;
        Ok(Op::Merge { left, right, into, policy })
    }

    fn policy(&mut self) -> PResult<MergePolicy> {
        let (word, span) = self.ident()?;
        Ok(match word.as_str() {
            "pick_left" => MergePolicy::PickLeft,
            "pick_right" => MergePolicy::PickRight,
            "pick_by_metric" => {
                self.expect_punct("(")?;
                let (metric, _) = self.string()?;
                self.expect_punct(",")?;
                let higher_is_better = if self.eat_ident("higher") {
                    true
                } else if self.eat_ident("lower") {
                    false
                } else {
                    return Err(self.unexpected("'higher' or 'lower'"));
                };
                self.expect_punct(")")?;
                MergePolicy::PickByMetric { metric, higher_is_better }
            }
            "concat_sections" => {
                self.expect_punct("(")?;
                let (separator, _) = self.string()?;
                self.expect_punct(")")?;
                MergePolicy::ConcatSections { separator }
            }
            other => {
                return Err(Diagnostic::error(
                    span,
                    format!("unknown merge policy '{other}'; expected pick_left, pick_right, pick_by_metric or concat_sections"),
                ))
            }
        })
    }

    fn delegate(&mut self) -> PResult<Op> {
        let (agent, span) = self.name()?;
        self.record("agent", &agent, span);
        self.expect_punct(",")?;
        let payload = self.payload()?;
        self.expect_punct("]")?;
        if !self.eat_punct("->") {
            return Err(self.unexpected("'-> C[\"key\"]' naming where DELEGATE writes"));
        }
        let out = self.subscript("C")?;
        Ok(Op::Delegate { agent, payload, out })
    }

    fn payload(&mut self) -> PResult<Payload> {
        match self.peek() {
            Some(Tok::Str(_)) => Ok(Payload::Str(self.string()?.0)),
            Some(Tok::Num(_)) => Ok(Payload::Num(self.number()?.0)),
            Some(Tok::Punct("[")) => {
                self.pos += 1;
                Ok(Payload::List(self.list("]", Self::payload)?))
            }
            Some(Tok::Ident(h)) if h == "C" => Ok(Payload::Context(self.subscript("C")?)),
            Some(Tok::Ident(h)) if h == "P" => Ok(Payload::Prompt(self.subscript("P")?)),
            _ => Err(self.unexpected("a payload (C[...], P[...], a string, a number or a list)")),
        }
    }

    fn retry(&mut self) -> PResult<Op> {
        let op = self.op()?;
        self.expect_punct(",")?;
        let cond = self.condition()?;
        let mut refiner = None;
        let mut max_n = 1;
        self.named_args("RETRY", Some(&["refiner", "max_n"]), |p, k| {
            match k {
                "refiner" => refiner = Some(p.refiner_ref()?),
                _ => max_n = p.count()?,
            }
            Ok(())
        })?;
        Ok(Op::Retry { op: Box::new(op), cond, refiner, max_n })
    }

    fn switch(&mut self) -> PResult<Op> {
        let mut arms = Vec::new();
        let mut default = None;
        loop {
            if self.is_ident("else") {
                if default.is_some() {
                    return Err(Diagnostic::error(self.here(), "SWITCH has two else arms"));
                }
                self.pos += 1;
                self.expect_punct("->")?;
                default = Some(self.arm_body()?);
            } else {
                if default.is_some() {
                    return Err(Diagnostic::error(self.here(), "the else arm must come last in SWITCH"));
                }
                let guard = self.condition()?;
                self.expect_punct("->")?;
                arms.push(SwitchArm { guard, body: self.arm_body()? });
            }
            if !self.eat_punct(",") {
                break;
            }
        }
        if arms.is_empty() {
            return Err(Diagnostic::error(self.here(), "SWITCH needs at least one guarded arm"));
        }
        self.expect_punct("]")?;
        Ok(Op::Switch { arms, default })
    }

    fn arm_body(&mut self) -> PResult<Vec<Node>> {
        if self.is_punct("{") {
            self.block()
        } else {
            Ok(vec![self.op()?])
        }
    }

    fn condition(&mut self) -> PResult<Condition> {
        let mut c = self.cond_and()?;
        while self.eat_ident("or") {
            c = Condition::or(c, self.cond_and()?);
        }
        Ok(c)
    }

    fn cond_and(&mut self) -> PResult<Condition> {
        let mut c = self.cond_unary()?;
        while self.eat_ident("and") {
            c = Condition::and(c, self.cond_unary()?);
        }
        Ok(c)
    }

    fn cond_unary(&mut self) -> PResult<Condition> {
        if self.eat_ident("not") {
            return Ok(Condition::not(self.cond_unary()?));
        }
        if self.eat_punct("(") {
            let c = self.condition()?;
            self.expect_punct(")")?;
            return Ok(c);
        }
        let subscripted = matches!(self.peek_at(1), Some(Tok::Punct("[")));
        let atom = match self.peek() {
            Some(Tok::Ident(h)) if (h == "M" || h == "C") && subscripted => {
                let metric = h == "M";
                let key = self.subscript(if metric { "M" } else { "C" })?;
                let op = self.cmp()?;
                let value = self.literal()?;
                if metric {
                    Atom::Metric { key, op, value }
                } else {
                    Atom::Context { key, op, value }
                }
            }
            Some(Tok::Str(_)) => {
                let (key, _) = self.string()?;
                let negated = self.eat_ident("not");
                self.expect_ident("in")?;
                self.expect_ident("C")?;
                if negated {
                    Atom::NotInContext(key)
                } else {
                    Atom::InContext(key)
                }
            }
            Some(Tok::Ident(f)) if !RESERVED.contains(&f.as_str()) => Atom::Flag(self.ident()?.0),
            _ => return Err(self.unexpected("a condition")),
        };
        Ok(Condition::atom(atom))
    }

    fn cmp(&mut self) -> PResult<CmpOp> {
        let op = match self.peek() {
            Some(Tok::Punct("<")) => CmpOp::Lt,
            Some(Tok::Punct("<=")) => CmpOp::Le,
            Some(Tok::Punct(">")) => CmpOp::Gt,
            Some(Tok::Punct(">=")) => CmpOp::Ge,
            Some(Tok::Punct("==")) => CmpOp::Eq,
            Some(Tok::Punct("!=")) => CmpOp::Ne,
            _ => return Err(self.unexpected("a comparison (<, <=, >, >=, ==, !=)")),
        };
        self.pos += 1;
        Ok(op)
    }

    fn literal(&mut self) -> PResult<Literal> {
        match self.peek() {
            Some(Tok::Num(_)) => Ok(Literal::Num(self.number()?.0)),
            Some(Tok::Str(_)) => Ok(Literal::Str(self.string()?.0)),
            Some(Tok::Ident(b)) if b == "true" || b == "false" => Ok(Literal::Bool(self.boolean()?)),
            _ => Err(self.unexpected("a number, a string, true or false")),
        }
    }
}
