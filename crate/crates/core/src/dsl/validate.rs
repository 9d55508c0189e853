//! Static checks over a parsed program. Errors block execution; warnings do not.

use std::collections::{BTreeMap, BTreeSet};

use super::{Decl, DeclKind, Diagnostic, Program, Span};
use crate::algebra::registry::builtin_agent;
use crate::algebra::{
    merge_key, view_key, Node, Op, Payload, Pipeline, RefinerBody, RefinerRef, RefinerSpec, DEFAULT_RETRY_REFINER,
};
use crate::state::{Atom, Condition, Literal};
use crate::store::{PromptStore, RefAction, RefineMode, Template, ViewDef};

struct Names<'a> {
    views: BTreeMap<&'a str, &'a ViewDef>,
    refiners: BTreeMap<&'a str, &'a RefinerSpec>,
    sources: BTreeSet<&'a str>,
    agents: BTreeSet<&'a str>,
    prompts: BTreeSet<&'a str>,
}

/// Prompt keys that may exist at a program point, and whether a focus key is set.
#[derive(Clone, Default)]
struct Flow {
    keys: BTreeSet<String>,
    focus: bool,
}

pub fn validate(program: &Program) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut seen: BTreeSet<(&str, &str)> = BTreeSet::new();
    let mut names = Names {
        views: BTreeMap::new(),
        refiners: BTreeMap::new(),
        sources: BTreeSet::new(),
        agents: BTreeSet::new(),
        prompts: BTreeSet::new(),
    };
    for d in &program.decls {
        let before = diags.len();
        let ns = d.kind.namespace();
        if !seen.insert((ns, d.kind.name())) {
            diags.push(Diagnostic::error(d.span, format!("duplicate {ns} '{}'", d.kind.name())));
            tag_file(&mut diags[before..], d);
            continue;
        }
        match &d.kind {
            DeclKind::View(v) => {
                names.views.insert(&v.name, v);
            }
            DeclKind::Refiner(r) => {
                names.refiners.insert(&r.id, r);
                check_refiner(r, d.span, &mut diags);
            }
            DeclKind::Source(s) => {
                names.sources.insert(&s.name);
            }
            DeclKind::Agent(a) => {
                names.agents.insert(&a.name);
                if builtin_agent(&a.target).is_none() {
                    diags.push(Diagnostic::error(d.span, format!("agent '{}' binds unknown built-in '{}'", a.name, a.target)));
                }
            }
            DeclKind::Prompt(p) => {
                names.prompts.insert(&p.key);
                if let Err(e) = Template::parse(&p.text) {
                    diags.push(Diagnostic::error(d.span, format!("prompt '{}': {e}", p.key)));
                }
            }
            DeclKind::Pipeline(_) => {}
        }
        tag_file(&mut diags[before..], d);
    }
    check_views(program, &names, &mut diags);
    for d in &program.decls {
        if let DeclKind::Pipeline(p) = &d.kind {
            let before = diags.len();
            check_pipeline(program, &names, p, d.span, &mut diags);
            tag_file(&mut diags[before..], d);
        }
    }
    diags.sort_by_key(|d| (d.file.clone(), d.span.start));
    diags
}

fn tag_file(diags: &mut [Diagnostic], decl: &Decl) {
    if let Some(f) = &decl.file {
        for d in diags {
            d.file.get_or_insert_with(|| f.clone());
        }
    }
}

fn check_refiner(r: &RefinerSpec, span: Span, diags: &mut Vec<Diagnostic>) {
    if r.mode != RefineMode::Manual && matches!(r.body, RefinerBody::Append(_) | RefinerBody::Transform(_)) {
        diags.push(Diagnostic::error(
            span,
            format!("refiner '{}': {} refiners take a text or template instruction", r.id, r.mode.to_string().to_lowercase()),
        ));
    }
    let mut params = BTreeSet::new();
    for p in &r.params {
        if !params.insert(p) {
            diags.push(Diagnostic::error(span, format!("refiner '{}' repeats parameter '{p}'", r.id)));
        }
    }
}

/// Registers every view in a scratch store, which rejects cycles and bad includes.
fn check_views(program: &Program, names: &Names, diags: &mut Vec<Diagnostic>) {
    let views: Vec<ViewDef> = names.views.values().map(|v| (*v).clone()).collect();
    if let Err(e) = PromptStore::new().define_views(views) {
        let msg = e.to_string();
        let decl = program
            .decls
            .iter()
            .filter(|d| matches!(d.kind, DeclKind::View(_)))
            .find(|d| msg.contains(&format!("'{}'", d.kind.name())) || msg.contains(d.kind.name()));
        let mut diag = Diagnostic::error(decl.map(|d| d.span).unwrap_or_default(), msg);
        if let Some(d) = decl {
            tag_file(std::slice::from_mut(&mut diag), d);
        }
        diags.push(diag);
    }
}

struct Checker<'a> {
    program: &'a Program,
    names: &'a Names<'a>,
    diags: &'a mut Vec<Diagnostic>,
}

fn check_pipeline(program: &Program, names: &Names, p: &Pipeline, span: Span, diags: &mut Vec<Diagnostic>) {
    if p.nodes.is_empty() {
        diags.push(Diagnostic::error(span, format!("pipeline '{}' has no operators", p.name)));
        return;
    }
    let mut flow = Flow { keys: names.prompts.iter().map(|k| k.to_string()).collect(), focus: false };
    let mut c = Checker { program, names, diags };
    c.chain(&p.nodes, &mut flow);
}

impl Checker<'_> {
    fn error(&mut self, span: Span, msg: String) {
        self.diags.push(Diagnostic::error(span, msg));
    }

    fn warn(&mut self, span: Span, msg: String) {
        self.diags.push(Diagnostic::warning(span, msg));
    }

    fn chain(&mut self, nodes: &[Node], flow: &mut Flow) {
        for n in nodes {
            self.node(n, flow);
        }
    }

    fn uses(&mut self, key: &str, span: Span, flow: &Flow, what: &str) {
        let base = key.split('@').next().unwrap_or(key);
        if !flow.keys.contains(base) {
            self.warn(span, format!("{what} reads prompt '{key}' before any declaration, REF[CREATE] or VIEW defines it"));
        }
    }

    fn uses_focus(&mut self, span: Span, flow: &Flow, what: &str) {
        if !flow.focus {
            self.warn(span, format!("{what} names no prompt key and no earlier operator sets one"));
        }
    }

    fn cond(&mut self, c: &Condition, span: Span) {
        match c {
            Condition::Atom(Atom::Metric { key, value, .. }) if !matches!(value, Literal::Num(_)) => {
                self.error(span, format!("M[\"{key}\"] compares only against numbers, found {value}"));
            }
            Condition::Atom(_) => {}
            Condition::Not(a) => self.cond(a, span),
            Condition::And(a, b) | Condition::Or(a, b) => {
                self.cond(a, span);
                self.cond(b, span);
            }
        }
    }

    /// Resolves a refiner reference; returns the named spec when there is one.
    fn refiner(&mut self, r: &RefinerRef, span: Span) -> Option<&RefinerSpec> {
        match r {
            RefinerRef::Named { id, args } => {
                if id == DEFAULT_RETRY_REFINER {
                    return None;
                }
                let Some(spec) = self.names.refiners.get(id.as_str()).copied() else {
                    let at = self.program.ref_span("refiner", id, span);
                    self.error(at, format!("unknown refiner '{id}'"));
                    return None;
                };
                if args.len() != spec.params.len() {
                    let at = self.program.ref_span("refiner", id, span);
                    self.error(at, format!("refiner '{id}' takes {} argument(s), got {}", spec.params.len(), args.len()));
                }
                Some(spec)
            }
            RefinerRef::View { name, args } => {
                self.view(name, args, span);
                None
            }
            RefinerRef::Literal(_) => None,
        }
    }

    fn view(&mut self, name: &str, args: &crate::store::ParamMap, span: Span) {
        let Some(v) = self.names.views.get(name).copied() else {
            let at = self.program.ref_span("view", name, span);
            self.error(at, format!("unknown view '{name}'"));
            return;
        };
        for k in args.keys() {
            if !v.params.iter().any(|p| &p.name == k) {
                self.error(span, format!("view '{name}' has no parameter '{k}'"));
            }
        }
        for p in &v.params {
            if p.default.is_none() && !args.contains_key(&p.name) {
                self.error(span, format!("view '{name}' needs a value for parameter '{}'", p.name));
            }
        }
    }

    fn node(&mut self, n: &Node, flow: &mut Flow) {
        let span = n.span;
        match &n.op {
            Op::Ret { source, prompt, .. } => {
                if !self.names.sources.contains(source.as_str()) {
                    let at = self.program.ref_span("source", source, span);
                    self.error(at, format!("unknown source '{source}'"));
                }
                if let Some(k) = prompt {
                    self.uses(k, span, flow, "RET");
                }
            }
            Op::Gen(g) => match &g.prompt {
                Some(k) => self.uses(k, span, flow, &format!("GEN[\"{}\"]", g.label)),
                None => self.uses_focus(span, flow, &format!("GEN[\"{}\"]", g.label)),
            },
            Op::Ref { action, refiner, key, .. } => {
                let spec_key = self.refiner(refiner, span).and_then(|s| s.key.clone());
                let key = key.clone().or(spec_key);
                match (action, key) {
                    (RefAction::Create, Some(k)) => {
                        flow.keys.insert(k);
                    }
                    (RefAction::Create, None) => self.error(
                        span,
                        format!("REF[CREATE, {}] needs a key: pass key: or declare one on the refiner", refiner.id()),
                    ),
                    (_, Some(k)) => self.uses(&k, span, flow, "REF"),
                    (_, None) => self.uses_focus(span, flow, "REF"),
                }
                flow.focus = true;
            }
            Op::Check { cond, body, .. } => {
                self.cond(cond, span);
                self.chain(body, flow);
            }
            Op::Merge { left, right, into, .. } => {
                self.uses(left, span, flow, "MERGE");
                self.uses(right, span, flow, "MERGE");
                flow.keys.insert(into.clone().unwrap_or_else(|| merge_key(left, right)));
                flow.focus = true;
            }
            Op::Delegate { agent, payload, .. } => {
                if !self.names.agents.contains(agent.as_str()) && builtin_agent(agent).is_none() {
                    let at = self.program.ref_span("agent", agent, span);
                    self.error(at, format!("unknown agent '{agent}'"));
                }
                self.payload(payload, span, flow);
            }
            Op::Expand { key, .. } => {
                self.uses(key, span, flow, "EXPAND");
                flow.focus = true;
            }
            Op::Retry { op, cond, refiner, max_n } => {
                self.node(op, flow);
                self.cond(cond, span);
                if let Some(r) = refiner {
                    self.refiner(r, span);
                }
                if *max_n == 0 {
                    self.error(span, "RETRY max_n must be at least 1".into());
                }
            }
            Op::Map { keys, refiner } => {
                for k in keys {
                    self.uses(k, span, flow, "MAP");
                }
                self.refiner(refiner, span);
                flow.focus |= !keys.is_empty();
            }
            Op::Switch { arms, default } => {
                let mut seen = BTreeSet::new();
                for arm in arms {
                    self.cond(&arm.guard, span);
                    if !seen.insert(arm.guard.to_string()) {
                        self.warn(span, format!("SWITCH arm '{}' repeats an earlier guard and never fires", arm.guard));
                    }
                    self.chain(&arm.body, flow);
                }
                if let Some(d) = default {
                    self.chain(d, flow);
                }
            }
            Op::View { name, args, key } => {
                self.view(name, args, span);
                flow.keys.insert(key.clone().unwrap_or_else(|| view_key(name, args)));
                flow.focus = true;
            }
            Op::Diff { left, right } => {
                self.uses(left, span, flow, "DIFF");
                self.uses(right, span, flow, "DIFF");
            }
            Op::Fuse { body, .. } => self.chain(body, flow),
        }
    }

    fn payload(&mut self, p: &Payload, span: Span, flow: &Flow) {
        match p {
            Payload::Prompt(k) => self.uses(k, span, flow, "DELEGATE"),
            Payload::List(items) => items.iter().for_each(|i| self.payload(i, span, flow)),
            _ => {}
        }
    }
}
