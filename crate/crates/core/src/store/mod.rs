//! The prompt store: versioned prompt entries with hash-chained provenance,
//! parameterized views, rendering, diffing and replay.
//!
//! Every mutation goes through a [`Refinement`], which carries the already
//! resolved refiner output. A ref_log therefore replays offline and byte-exact.

mod diff;
mod entry;
pub mod template;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use diff::{diff_entries, line_edits, DiffReport, EditKind, LineEdit, ParamDelta};
pub use entry::{append_text, ParamMap, PromptEntry, RefAction, RefLogRecord, RefineMode, VersionHash};
pub use template::{IncludeArg, Segment, Template, TemplateSyntaxError};

use crate::state::{value_to_text, Context, Scope};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("prompt key '{0}' already exists")]
    DuplicateKey(String),
    #[error("unknown prompt key '{0}'")]
    UnknownKey(String),
    #[error(transparent)]
    TemplateSyntax(#[from] TemplateSyntaxError),
    #[error("unbound placeholder '{0}'")]
    UnboundPlaceholder(String),
    #[error("include cycle through views: {}", .0.join(" -> "))]
    IncludeCycle(Vec<String>),
    #[error("view include graph would become cyclic: {}", .0.join(" -> "))]
    CyclicInclude(Vec<String>),
    #[error("view '{view}' includes unknown view '{include}'")]
    UnknownInclude { view: String, include: String },
    #[error("view '{0}' is already defined")]
    DuplicateView(String),
    #[error("unknown view '{0}'")]
    UnknownView(String),
    #[error("view '{view}' has no parameter '{param}'")]
    UnknownViewParam { view: String, param: String },
    #[error("unknown prompt key or version '{0}'")]
    UnknownVersion(String),
    #[error("ref_log hash chain broken at record {index}")]
    BrokenHashChain { index: usize },
    #[error("ref_log must start with exactly one CREATE record")]
    MissingCreate,
    #[error("CREATE is only valid as the first ref_log record (found at {index})")]
    UnexpectedCreate { index: usize },
    #[error("action {0} cannot be applied to an existing entry")]
    InvalidAction(RefAction),
    #[error("metric '{0}' is not a finite number")]
    NonFiniteMetric(String),
    #[error("store file: {0}")]
    Io(#[from] std::io::Error),
    #[error("store file: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// A resolved refinement step, ready to be logged.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub mode: RefineMode,
    pub refiner_id: String,
    pub trigger: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    pub payload: String,
    pub params: Option<ParamMap>,
    pub parents: Vec<VersionHash>,
    pub sub_records: Vec<RefLogRecord>,
}

impl Refinement {
    pub fn new(mode: RefineMode, refiner_id: impl Into<String>, payload: impl Into<String>) -> Self {
        Refinement {
            mode,
            refiner_id: refiner_id.into(),
            trigger: None,
            metrics: BTreeMap::new(),
            payload: payload.into(),
            params: None,
            parents: Vec::new(),
            sub_records: Vec::new(),
        }
    }

    /// A manual refinement whose output is `text` verbatim.
    pub fn literal(text: impl Into<String>) -> Self {
        Self::new(RefineMode::Manual, "literal", text)
    }

    pub fn with_params(mut self, params: ParamMap) -> Self {
        self.params = Some(params);
        self
    }

    pub fn with_trigger(mut self, trigger: impl Into<String>) -> Self {
        self.trigger = Some(trigger.into());
        self
    }

    pub fn with_metrics(mut self, metrics: BTreeMap<String, f64>) -> Self {
        self.metrics = metrics;
        self
    }

    fn into_record(self, action: RefAction, pre: Option<VersionHash>, post: VersionHash) -> RefLogRecord {
        RefLogRecord {
            action,
            mode: self.mode,
            refiner_id: self.refiner_id,
            trigger: self.trigger,
            pre_version: pre,
            post_version: post,
            metrics_snapshot: self.metrics,
            payload: self.payload,
            params: self.params,
            parents: self.parents,
            sub_records: self.sub_records,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewParam {
    pub name: String,
    pub default: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewDef {
    pub name: String,
    pub params: Vec<ViewParam>,
    pub body: String,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    pub includes: Vec<String>,
}

impl ViewDef {
    /// Builds a view, deriving `includes` from the body.
    pub fn new(name: impl Into<String>, params: Vec<ViewParam>, body: impl Into<String>) -> Result<Self> {
        let body = body.into();
        let includes = Template::parse(&body)?.includes();
        Ok(ViewDef { name: name.into(), params, body, tags: BTreeSet::new(), includes })
    }

    pub fn with_tags<I, S>(mut self, tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.tags = tags.into_iter().map(Into::into).collect();
        self
    }

    fn has_param(&self, name: &str) -> bool {
        self.params.iter().any(|p| p.name == name)
    }
}

pub fn param(name: &str, default: Option<&str>) -> ViewParam {
    ViewParam { name: name.to_string(), default: default.map(str::to_string) }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptStore {
    entries: BTreeMap<String, PromptEntry>,
    views: BTreeMap<String, ViewDef>,
}

impl PromptStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &str) -> Option<&PromptEntry> {
        self.entries.get(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn entries(&self) -> impl Iterator<Item = &PromptEntry> {
        self.entries.values()
    }

    pub fn view(&self, name: &str) -> Option<&ViewDef> {
        self.views.get(name)
    }

    pub fn views(&self) -> impl Iterator<Item = &ViewDef> {
        self.views.values()
    }

    pub fn tag(&mut self, key: &str, tag: impl Into<String>) -> Result<()> {
        let e = self.entries.get_mut(key).ok_or_else(|| StoreError::UnknownKey(key.to_string()))?;
        e.tags.insert(tag.into());
        Ok(())
    }

    /// Creates `key` with a manual CREATE record.
    pub fn create_entry(&mut self, key: &str, text: &str, params: ParamMap, mode: RefineMode) -> Result<&PromptEntry> {
        self.create(key, Refinement::new(mode, "literal", text).with_params(params), false)
    }

    /// Creates `key`. With `overwrite`, an existing entry receives an UPDATE instead.
    pub fn create(&mut self, key: &str, refinement: Refinement, overwrite: bool) -> Result<&PromptEntry> {
        if self.entries.contains_key(key) {
            if !overwrite {
                return Err(StoreError::DuplicateKey(key.to_string()));
            }
            let mut r = refinement;
            if r.params.is_none() {
                r.params = Some(ParamMap::new());
            }
            return self.apply_ref(key, RefAction::Update, r);
        }
        check_metrics(&refinement.metrics)?;
        Template::parse(&refinement.payload)?;
        let text = refinement.payload.clone();
        let params = refinement.params.clone().unwrap_or_default();
        let version = VersionHash::of(&text, &params);
        let record = refinement.into_record(RefAction::Create, None, version.clone());
        let entry = PromptEntry {
            key: key.to_string(),
            text,
            params,
            tags: BTreeSet::new(),
            version,
            ref_log: vec![record],
        };
        Ok(self.entries.entry(key.to_string()).or_insert(entry))
    }

    /// Appends one record to `key`. Nothing changes when validation fails.
    pub fn apply_ref(&mut self, key: &str, action: RefAction, refinement: Refinement) -> Result<&PromptEntry> {
        if action == RefAction::Create {
            return Err(StoreError::InvalidAction(action));
        }
        check_metrics(&refinement.metrics)?;
        let entry = self.entries.get_mut(key).ok_or_else(|| StoreError::UnknownKey(key.to_string()))?;
        let mut text = entry.text.clone();
        let mut params = entry.params.clone();
        let pre = entry.version.clone();
        let probe = refinement.clone().into_record(action, Some(pre.clone()), pre.clone());
        entry::apply_record(&mut text, &mut params, &probe);
        Template::parse(&text)?;
        let post = VersionHash::of(&text, &params);
        entry.ref_log.push(refinement.into_record(action, Some(pre), post.clone()));
        entry.text = text;
        entry.params = params;
        entry.version = post;
        Ok(entry)
    }

    /// Rolls `key` forward to the content of a historical `version` via a new UPDATE record.
    pub fn rollback(&mut self, key: &str, version: &VersionHash) -> Result<&PromptEntry> {
        let entry = self.entries.get(key).ok_or_else(|| StoreError::UnknownKey(key.to_string()))?;
        let idx = entry
            .ref_log
            .iter()
            .position(|r| &r.post_version == version)
            .ok_or_else(|| StoreError::UnknownVersion(version.to_string()))?;
        let old = replay_log(key, &entry.ref_log[..=idx])?;
        let r = Refinement::new(RefineMode::Manual, "rollback", old.text).with_params(old.params);
        self.apply_ref(key, RefAction::Update, r)
    }

    /// Resolves a key (current entry) or a version digest (reconstructed by replay).
    pub fn resolve(&self, key_or_version: &str) -> Result<PromptEntry> {
        if let Some(e) = self.entries.get(key_or_version) {
            return Ok(e.clone());
        }
        for e in self.entries.values() {
            if let Some(i) = e.ref_log.iter().position(|r| r.post_version.as_str() == key_or_version) {
                let mut old = replay_log(&e.key, &e.ref_log[..=i])?;
                old.tags = e.tags.clone();
                return Ok(old);
            }
        }
        Err(StoreError::UnknownVersion(key_or_version.to_string()))
    }

    pub fn diff_prompts(&self, left: &str, right: &str) -> Result<DiffReport> {
        let l = self.resolve(left)?;
        let r = self.resolve(right)?;
        Ok(diff::diff_entries(&l, &r))
    }

    pub fn define_view(&mut self, view: ViewDef) -> Result<()> {
        self.define_views(vec![view])
    }

    /// Registers views atomically; includes may reference each other within the batch.
    pub fn define_views(&mut self, views: Vec<ViewDef>) -> Result<()> {
        let mut batch: BTreeMap<String, ViewDef> = BTreeMap::new();
        for mut v in views {
            if self.views.contains_key(&v.name) || batch.contains_key(&v.name) {
                return Err(StoreError::DuplicateView(v.name));
            }
            let tpl = Template::parse(&v.body)?;
            v.includes = tpl.includes();
            for p in tpl.params() {
                if !v.has_param(p) {
                    return Err(StoreError::UnknownViewParam { view: v.name.clone(), param: p.to_string() });
                }
            }
            batch.insert(v.name.clone(), v);
        }
        let lookup = |name: &str| batch.get(name).or_else(|| self.views.get(name));
        for v in batch.values() {
            let tpl = Template::parse(&v.body)?;
            for seg in &tpl.segments {
                if let Segment::Include { view, args } = seg {
                    let Some(target) = lookup(view) else {
                        return Err(StoreError::UnknownInclude { view: v.name.clone(), include: view.clone() });
                    };
                    for (name, arg) in args {
                        if !target.has_param(name) {
                            return Err(StoreError::UnknownViewParam { view: view.clone(), param: name.clone() });
                        }
                        if let IncludeArg::Name(n) = arg {
                            if !n.starts_with("C.") && !v.has_param(n) {
                                return Err(StoreError::UnknownViewParam { view: v.name.clone(), param: n.clone() });
                            }
                        }
                    }
                }
            }
        }
        // DFS over the combined graph from every new view.
        for start in batch.keys() {
            let mut path = vec![start.clone()];
            if let Some(cycle) = find_cycle(&lookup, &mut path) {
                return Err(StoreError::CyclicInclude(cycle));
            }
        }
        self.views.extend(batch);
        Ok(())
    }

    /// Renders `entry` against `ctx`. Arguments override the entry's parameter defaults.
    pub fn render(&self, entry: &PromptEntry, ctx: &Context, args: &ParamMap) -> Result<String> {
        self.render_in(entry, &Scope::new(ctx), args)
    }

    pub fn render_in(&self, entry: &PromptEntry, scope: &Scope<'_>, args: &ParamMap) -> Result<String> {
        let tpl = Template::parse(&entry.text)?;
        let mut bindings = entry.params.clone();
        bindings.extend(args.iter().map(|(k, v)| (k.clone(), v.clone())));
        let mut out = String::new();
        self.render_template(&tpl, &bindings, scope, &mut Vec::new(), &mut out)?;
        Ok(out)
    }

    /// Renders a registered view with explicit arguments.
    pub fn render_view(&self, name: &str, args: &ParamMap, scope: &Scope<'_>) -> Result<String> {
        let view = self.views.get(name).ok_or_else(|| StoreError::UnknownView(name.to_string()))?;
        let mut bindings = ParamMap::new();
        for p in &view.params {
            if let Some(v) = args.get(&p.name).or(p.default.as_ref()) {
                bindings.insert(p.name.clone(), v.clone());
            }
        }
        if let Some(extra) = args.keys().find(|k| !view.has_param(k)) {
            return Err(StoreError::UnknownViewParam { view: name.to_string(), param: extra.clone() });
        }
        let tpl = Template::parse(&view.body)?;
        let mut out = String::new();
        self.render_template(&tpl, &bindings, scope, &mut vec![name.to_string()], &mut out)?;
        Ok(out)
    }

    fn render_template(
        &self,
        tpl: &Template,
        bindings: &ParamMap,
        scope: &Scope<'_>,
        stack: &mut Vec<String>,
        out: &mut String,
    ) -> Result<()> {
        for seg in &tpl.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Param(p) => {
                    out.push_str(bindings.get(p).ok_or_else(|| StoreError::UnboundPlaceholder(p.clone()))?)
                }
                Segment::Context(path) => {
                    let v = scope
                        .lookup(path)
                        .ok_or_else(|| StoreError::UnboundPlaceholder(format!("C.{}", path.join("."))))?;
                    out.push_str(&value_to_text(v));
                }
                Segment::Include { view, args } => {
                    if stack.contains(view) {
                        let mut cycle = stack.clone();
                        cycle.push(view.clone());
                        return Err(StoreError::IncludeCycle(cycle));
                    }
                    let def = self.views.get(view).ok_or_else(|| StoreError::UnknownInclude {
                        view: stack.last().cloned().unwrap_or_default(),
                        include: view.clone(),
                    })?;
                    let mut inner = ParamMap::new();
                    for p in &def.params {
                        if let Some(d) = &p.default {
                            inner.insert(p.name.clone(), d.clone());
                        }
                    }
                    for (name, arg) in args {
                        if !def.has_param(name) {
                            return Err(StoreError::UnknownViewParam { view: view.clone(), param: name.clone() });
                        }
                        let value = match arg {
                            IncludeArg::Literal(v) => v.clone(),
                            IncludeArg::Name(n) => match n.strip_prefix("C.") {
                                Some(path) => {
                                    let path: Vec<String> = path.split('.').map(str::to_string).collect();
                                    value_to_text(
                                        scope.lookup(&path).ok_or_else(|| StoreError::UnboundPlaceholder(n.clone()))?,
                                    )
                                }
                                None => bindings.get(n).cloned().ok_or_else(|| StoreError::UnboundPlaceholder(n.clone()))?,
                            },
                        };
                        inner.insert(name.clone(), value);
                    }
                    let body = Template::parse(&def.body)?;
                    stack.push(view.clone());
                    self.render_template(&body, &inner, scope, stack, out)?;
                    stack.pop();
                }
            }
        }
        Ok(())
    }

    /// Canonical JSON document: `{"entries": {...}, "views": {...}}`.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("store serializes");
        s.push('\n');
        s
    }

    /// Parses a store document and verifies every entry's hash chain and the view graph.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: PromptStore = serde_json::from_str(text)?;
        let mut store = PromptStore { entries: BTreeMap::new(), views: BTreeMap::new() };
        for (key, e) in raw.entries {
            let replayed = replay_log(&key, &e.ref_log)?;
            if replayed.version != e.version || replayed.text != e.text || replayed.params != e.params {
                return Err(StoreError::BrokenHashChain { index: e.ref_log.len().saturating_sub(1) });
            }
            store.entries.insert(key, e);
        }
        store.define_views(raw.views.into_values().collect())?;
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks every entry's version against its content and its ref_log.
    pub fn verify(&self) -> Result<()> {
        for e in self.entries.values() {
            let r = replay_log(&e.key, &e.ref_log)?;
            if r.version != e.version || e.compute_version() != e.version {
                return Err(StoreError::BrokenHashChain { index: e.ref_log.len() - 1 });
            }
        }
        Ok(())
    }
}

fn check_metrics(m: &BTreeMap<String, f64>) -> Result<()> {
    match m.iter().find(|(_, v)| !v.is_finite()) {
        Some((k, _)) => Err(StoreError::NonFiniteMetric(k.clone())),
        None => Ok(()),
    }
}

fn find_cycle<'a, F>(lookup: &F, path: &mut Vec<String>) -> Option<Vec<String>>
where
    F: Fn(&str) -> Option<&'a ViewDef>,
{
    let current = path.last()?.clone();
    let view = lookup(&current)?;
    for inc in &view.includes {
        if let Some(pos) = path.iter().position(|p| p == inc) {
            let mut cycle = path[pos..].to_vec();
            cycle.push(inc.clone());
            return Some(cycle);
        }
        path.push(inc.clone());
        if let Some(c) = find_cycle(lookup, path) {
            return Some(c);
        }
        path.pop();
    }
    None
}

/// Rebuilds an entry from its ref_log alone, checking the hash chain record by record.
pub fn replay_log(key: &str, records: &[RefLogRecord]) -> Result<PromptEntry> {
    let first = records.first().ok_or(StoreError::MissingCreate)?;
    if first.action != RefAction::Create || first.pre_version.is_some() {
        return Err(StoreError::MissingCreate);
    }
    let mut text = String::new();
    let mut params = ParamMap::new();
    let mut version: Option<VersionHash> = None;
    for (index, rec) in records.iter().enumerate() {
        if index > 0 && rec.action == RefAction::Create {
            return Err(StoreError::UnexpectedCreate { index });
        }
        if rec.pre_version != version {
            return Err(StoreError::BrokenHashChain { index });
        }
        entry::apply_record(&mut text, &mut params, rec);
        let post = VersionHash::of(&text, &params);
        if post != rec.post_version {
            return Err(StoreError::BrokenHashChain { index });
        }
        version = Some(post);
    }
    Ok(PromptEntry {
        key: key.to_string(),
        text,
        params,
        tags: BTreeSet::new(),
        version: version.expect("at least one record"),
        ref_log: records.to_vec(),
    })
}
