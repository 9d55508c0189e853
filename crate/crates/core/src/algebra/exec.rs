//! The interpreter: every operator maps an `ExecState` to an `ExecState`.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use serde_json::Value;
use sha2::{Digest, Sha256};

use super::ast::{FuseRule, GenSpec, MergePolicy, Node, Op, Payload, Pipeline, RefinerRef};
use super::registry::{Registry, RefinerBody, RefinerSpec, DEFAULT_RETRY_REFINER, DIFF_AGENT};
use super::report::{Event, RunOptions, RunReport, StateDelta, TraceRecord};
use super::AlgebraError;
use crate::backend::mock::{section_marker, split_labelled, split_sections, FUSED_CONTRACT, HINT_HEADER, INPUT_MARKER, PROMPT_HEADER, SIGNALS_HEADER};
use crate::backend::{BackendHandle, BackendRequest, BackendResponse};
use crate::state::{CmpOp, Condition, ExecState, Scope};
use crate::store::template::escape;
use crate::store::{ParamMap, PromptEntry, RefAction, RefineMode, Refinement};
use crate::tokenize::count_tokens;

type Result<T, E = AlgebraError> = std::result::Result<T, E>;

/// Key under which `VIEW[name](args)` materializes when no key is bound.
pub fn view_key(name: &str, args: &ParamMap) -> String {
    let digest = Sha256::digest(serde_json::to_string(args).expect("args serialize").as_bytes());
    format!("view:{name}:{}", &hex::encode(digest)[..8])
}

/// Stable short id of a SWITCH node, used in its marker keys.
pub fn switch_id(node: &Node) -> String {
    let digest = Sha256::digest(node.to_string().as_bytes());
    format!("switch:{}", &hex::encode(digest)[..8])
}

pub fn diff_key(left: &str, right: &str) -> String {
    format!("diff:{left}:{right}")
}

pub fn merge_key(left: &str, right: &str) -> String {
    format!("merge:{left}:{right}")
}

/// Action a RETRY refinement takes: the named refiner's default, else UPDATE.
pub fn retry_action(reg: &Registry, refiner: &RefinerRef) -> RefAction {
    match refiner {
        RefinerRef::Named { id, .. } => reg.refiners.get(id).map_or(RefAction::Update, RefinerSpec::default_action),
        _ => RefAction::Update,
    }
}

/// Label RETRY uses for its markers: the GEN label, else the operator kind.
pub fn retry_label(op: &Node) -> String {
    match &op.op {
        Op::Gen(g) => g.label.clone(),
        other => other.kind().to_lowercase(),
    }
}

/// Prompt key a RETRY refines: the one its GEN reads.
pub fn retry_prompt_key(op: &Node) -> Option<String> {
    match &op.op {
        Op::Gen(g) => g.prompt.clone(),
        _ => None,
    }
}

/// The guard of SWITCH arm `i`: the arm fires only while no earlier arm has.
pub fn switch_guard(flag: &str, guard: Option<&Condition>) -> Condition {
    let free = Condition::not(Condition::metric(flag, CmpOp::Eq, 1.0));
    match guard {
        Some(g) => Condition::and(free, g.clone()),
        None => free,
    }
}

/// Aggregated usage of one GEN site.
#[derive(Debug, Clone, Copy, Default)]
struct Usage {
    calls: u64,
    confidence_sum: f64,
    latency: f64,
    prompt: u64,
    cached: u64,
    completion: u64,
}

impl Usage {
    fn add(&mut self, r: &BackendResponse) {
        self.calls += 1;
        self.confidence_sum += r.confidence;
        self.latency += r.latency_s;
        self.prompt += r.usage.prompt_tokens;
        self.cached += r.usage.cached_prefix_tokens;
        self.completion += r.usage.completion_tokens;
    }

    fn confidence(&self) -> f64 {
        if self.calls == 0 {
            0.0
        } else {
            self.confidence_sum / self.calls as f64
        }
    }
}

pub(crate) struct Engine<'a> {
    reg: &'a Registry,
    backend: &'a BackendHandle,
    events: Vec<Event>,
    trace: Vec<TraceRecord>,
    /// Enclosing CHECK conditions, innermost last.
    triggers: Vec<Condition>,
    depth: usize,
    check_invariants: bool,
    keep_existing: bool,
    log: Option<std::io::BufWriter<std::fs::File>>,
}

impl<'a> Engine<'a> {
    pub(crate) fn new(reg: &'a Registry, backend: &'a BackendHandle) -> Self {
        Engine {
            reg,
            backend,
            events: Vec::new(),
            trace: Vec::new(),
            triggers: Vec::new(),
            depth: 0,
            check_invariants: false,
            keep_existing: false,
            log: None,
        }
    }

    pub(crate) fn exec_chain(&mut self, st: &mut ExecState, nodes: &[Node]) -> Result<()> {
        for n in nodes {
            self.exec(st, n)?;
        }
        Ok(())
    }

    pub(crate) fn exec(&mut self, st: &mut ExecState, node: &Node) -> Result<()> {
        let start = Instant::now();
        let before = Snapshot::of(st);
        let index = self.events.len();
        self.events.push(Event {
            index,
            depth: self.depth,
            op: node.kind().to_string(),
            summary: summary(node),
            duration_ms: 0.0,
            delta: StateDelta::default(),
            error: None,
        });
        self.depth += 1;
        let result = self.dispatch(st, node).and_then(|()| {
            if self.check_invariants {
                st.validate().map_err(|e| AlgebraError::Invariant(e.to_string()))?;
                st.store.verify().map_err(|e| AlgebraError::Invariant(e.to_string()))?;
            }
            Ok(())
        });
        self.depth -= 1;
        let ev = &mut self.events[index];
        ev.duration_ms = start.elapsed().as_secs_f64() * 1e3;
        ev.delta = before.delta(st);
        if let Err(e) = &result {
            ev.error = Some(e.to_string());
        } else if let Some(k) = ev.delta.metrics.iter().find(|k| k.starts_with("error:")) {
            ev.error = Some(format!("soft failure recorded as M[\"{k}\"]"));
        }
        if let Some(log) = &mut self.log {
            let line = serde_json::to_string(&self.events[index]).expect("event serializes");
            writeln!(log, "{line}").map_err(|e| AlgebraError::Log(e.to_string()))?;
        }
        result
    }

    fn dispatch(&mut self, st: &mut ExecState, node: &Node) -> Result<()> {
        match &node.op {
            Op::Ret { source, prompt, params } => self.ret(st, source, prompt.as_deref(), params),
            Op::Gen(g) => self.gen(st, g),
            Op::Ref { action, refiner, key, overwrite } => self.refine(st, *action, refiner, key.as_deref(), *overwrite),
            Op::Check { cond, body, site, counter } => self.check(st, cond, body, site.as_deref(), counter.as_deref()),
            Op::Merge { left, right, into, policy } => self.merge(st, left, right, into.as_deref(), policy),
            Op::Delegate { agent, payload, out } => self.delegate(st, agent, payload, out),
            Op::Expand { key, text } => {
                self.refine(st, RefAction::Append, &RefinerRef::Literal(text.clone()), Some(key), false)
            }
            Op::Retry { op, cond, refiner, max_n } => self.retry(st, op, cond, refiner.as_ref(), *max_n),
            Op::Map { keys, refiner } => {
                for k in keys {
                    self.refine(st, RefAction::Update, refiner, Some(k), false)?;
                }
                Ok(())
            }
            Op::Switch { arms, default } => {
                let id = switch_id(node);
                for (i, arm) in arms.iter().enumerate() {
                    let guard = switch_guard(&id, Some(&arm.guard));
                    self.check(st, &guard, &arm.body, Some(&format!("{id}#{i}")), Some(&id))?;
                }
                if let Some(d) = default {
                    self.check(st, &switch_guard(&id, None), d, Some(&format!("{id}#else")), Some(&id))?;
                }
                Ok(())
            }
            Op::View { name, args, key } => {
                let key = key.clone().unwrap_or_else(|| view_key(name, args));
                let r = RefinerRef::View { name: name.clone(), args: args.clone() };
                self.refine(st, RefAction::Create, &r, Some(&key), true)
            }
            Op::Diff { left, right } => {
                let report = st.store.diff_prompts(left, right)?;
                st.context.insert(diff_key(left, right), serde_json::to_value(report).expect("diff serializes"));
                st.set_metric(format!("latency:{DIFF_AGENT}"), 0.0);
                Ok(())
            }
            Op::Fuse { rule, body } => self.fuse(st, *rule, body),
        }
    }

    fn ret(&mut self, st: &mut ExecState, source: &str, prompt: Option<&str>, params: &ParamMap) -> Result<()> {
        let def = self.reg.sources.get(source).ok_or_else(|| AlgebraError::UnknownSource(source.into()))?;
        let query = match prompt {
            Some(k) => {
                let entry = prompt_entry(st, k)?;
                Some(st.store.render(&entry, &st.context, params)?)
            }
            None => None,
        };
        let value = def
            .retrieve(query.as_deref())
            .map_err(|message| AlgebraError::Retrieval { name: source.into(), message })?;
        let items = match &value {
            Value::Array(a) => a.len(),
            Value::Null => 0,
            _ => 1,
        };
        st.context.insert(def.target().to_string(), value);
        st.set_metric(format!("ret_items:{source}"), items as f64);
        st.set_metric(format!("ret_latency:{source}"), 0.0);
        Ok(())
    }

    fn complete(&self, label: &str, prompt: String, entry: &PromptEntry, max_tokens: Option<u32>) -> Result<BackendResponse, crate::backend::BackendError> {
        let mut req = BackendRequest::new(label, prompt);
        req.max_tokens = max_tokens;
        req.cache_keys = vec![format!("prompt:{}", entry.key), format!("version:{}", entry.version)];
        if let Some(view) = entry.key.strip_prefix("view:").and_then(|r| r.split(':').next()) {
            req.cache_keys.push(format!("view:{view}"));
        }
        self.backend.complete(&req)
    }

    fn gen(&mut self, st: &mut ExecState, g: &GenSpec) -> Result<()> {
        let key = gen_key(st, g)?;
        let entry = prompt_entry(st, &key)?;
        let mut usage = Usage::default();
        let output = match &g.over {
            None => {
                let prompt = st.store.render(&entry, &st.context, &ParamMap::new())?;
                match self.complete(&g.label, prompt, &entry, g.max_tokens) {
                    Ok(r) => {
                        usage.add(&r);
                        Value::String(r.text)
                    }
                    Err(e) => return soft_failure(st, &g.label, e),
                }
            }
            Some(stream) => {
                let items = stream_items(st, &g.label, stream)?;
                let mut out = Vec::new();
                for item in &items {
                    let prompt = st.store.render_in(&entry, &Scope::new(&st.context).with_item(item), &ParamMap::new())?;
                    let r = match self.complete(&g.label, prompt, &entry, g.max_tokens) {
                        Ok(r) => r,
                        Err(e) => return soft_failure(st, &g.label, e),
                    };
                    usage.add(&r);
                    match &g.keep {
                        None => out.push(mapped(item, r.text)),
                        Some(k) if label_matches(&r.text, k) => out.push(item.clone()),
                        Some(_) => {}
                    }
                }
                if g.keep.is_some() && !items.is_empty() {
                    st.set_metric(format!("selectivity:{}", g.label), out.len() as f64 / items.len() as f64);
                }
                st.set_metric(format!("items:{}", g.label), items.len() as f64);
                Value::Array(out)
            }
        };
        st.context.insert(g.label.clone(), output);
        self.record_gen(st, &g.label, &entry, &usage);
        Ok(())
    }

    fn record_gen(&mut self, st: &mut ExecState, label: &str, entry: &PromptEntry, u: &Usage) {
        let conf = u.confidence();
        for suffix in [String::new(), format!(":{label}")] {
            st.set_metric(format!("confidence{suffix}"), conf);
            st.set_metric(format!("latency{suffix}"), u.latency);
            st.set_metric(format!("prompt_tokens{suffix}"), u.prompt as f64);
            st.set_metric(format!("cached_prefix_tokens{suffix}"), u.cached as f64);
            st.set_metric(format!("completion_tokens{suffix}"), u.completion as f64);
        }
        st.set_metric(format!("confidence@{}", entry.key), conf);
        self.trace.push(TraceRecord::Gen {
            label: label.to_string(),
            prompt_key: entry.key.clone(),
            prompt_version: entry.version.clone(),
            calls: u.calls,
            confidence: conf,
            prompt_tokens: u.prompt,
            cached_prefix_tokens: u.cached,
            completion_tokens: u.completion,
            latency_s: u.latency,
        });
    }

    fn resolve_refiner(&self, id: &str, args: &[String]) -> Result<&'a RefinerSpec> {
        let spec = self.reg.refiners.get(id).ok_or_else(|| AlgebraError::UnknownRefiner(id.into()))?;
        if spec.params.len() != args.len() {
            return Err(AlgebraError::RefinerArity { id: id.into(), expected: spec.params.len(), got: args.len() });
        }
        Ok(spec)
    }

    fn refine(
        &mut self,
        st: &mut ExecState,
        action: RefAction,
        refiner: &RefinerRef,
        key: Option<&str>,
        overwrite: bool,
    ) -> Result<()> {
        let spec = match refiner {
            RefinerRef::Named { id, args } => Some((self.resolve_refiner(id, args)?, args)),
            _ => None,
        };
        let key = key
            .map(str::to_string)
            .or_else(|| spec.and_then(|(s, _)| s.key.clone()))
            .or_else(|| if action == RefAction::Create { None } else { st.focus.clone() })
            .ok_or_else(|| AlgebraError::MissingKey(format!("REF[{action}, {}]", refiner.id())))?;
        let current = st.store.get(&key).cloned();
        if action != RefAction::Create && current.is_none() {
            return Err(AlgebraError::Store(crate::store::StoreError::UnknownKey(key)));
        }
        if action == RefAction::Create && !overwrite && current.is_some() && self.keep_existing {
            st.focus = Some(key);
            return Ok(());
        }
        let current_text = current.as_ref().map(|e| e.text.clone()).unwrap_or_default();
        let mut mode = RefineMode::Manual;
        let mut params = None;
        let payload = match refiner {
            RefinerRef::Literal(t) => t.clone(),
            RefinerRef::View { name, args } => escape(&st.store.render_view(name, args, &Scope::new(&st.context))?),
            RefinerRef::Named { .. } => {
                let (spec, args) = spec.expect("named refiner resolved");
                mode = spec.mode;
                if !spec.params.is_empty() {
                    let bound: ParamMap = spec.params.iter().cloned().zip(args.iter().cloned()).collect();
                    let mut merged = current.as_ref().map(|e| e.params.clone()).unwrap_or_default();
                    merged.extend(bound);
                    params = Some(merged);
                }
                match (&spec.mode, &spec.body) {
                    (RefineMode::Manual, RefinerBody::Transform(t)) => t.apply(&current_text),
                    (RefineMode::Manual, RefinerBody::Text(t) | RefinerBody::Append(t) | RefinerBody::Template(t)) => t.clone(),
                    _ => {
                        let meta = meta_prompt(spec, &current_text, st);
                        let req = BackendRequest::new(format!("refine:{}", spec.id), meta);
                        match self.backend.complete(&req) {
                            Ok(r) => {
                                st.set_metric(format!("latency:refine:{}", spec.id), r.latency_s);
                                r.text.trim().to_string()
                            }
                            Err(e) => return soft_failure(st, &format!("refine:{}", spec.id), e),
                        }
                    }
                }
            }
        };
        let trigger = self.triggers.last();
        let mut keys: Vec<String> = vec!["confidence".into()];
        if let Some((s, _)) = spec {
            keys.extend(s.signals.iter().cloned());
        }
        if let Some(t) = trigger {
            keys.extend(t.metric_keys());
        }
        let metrics: BTreeMap<String, f64> =
            keys.into_iter().filter_map(|k| st.metadata.get(&k).map(|v| (k, *v))).collect();
        let mut r = Refinement::new(mode, refiner.id(), payload).with_metrics(metrics);
        r.params = params;
        r.trigger = trigger.map(|t| t.to_string());
        let result = if action == RefAction::Create {
            st.store.create(&key, r, overwrite).map(|e| e.clone())
        } else {
            st.store.apply_ref(&key, action, r).map(|e| e.clone())
        };
        let entry = match result {
            Ok(e) => e,
            // Backend output that is not a valid template is a refiner failure.
            Err(crate::store::StoreError::TemplateSyntax(e)) if mode != RefineMode::Manual => {
                st.set_metric(format!("error:refine:{}", refiner.id()), 1.0);
                log::warn!("refiner {} produced an invalid template: {e}", refiner.id());
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        st.focus = Some(key.clone());
        let last = entry.ref_log.last().expect("entry has records");
        self.trace.push(TraceRecord::Ref {
            key,
            refiner_id: last.refiner_id.clone(),
            mode: last.mode,
            action: last.action,
            trigger: last.trigger.clone(),
            pre_version: last.pre_version.clone(),
            post_version: last.post_version.clone(),
            token_delta: count_tokens(&entry.text) as i64 - count_tokens(&current_text) as i64,
        });
        Ok(())
    }

    fn check(
        &mut self,
        st: &mut ExecState,
        cond: &Condition,
        body: &[Node],
        site: Option<&str>,
        counter: Option<&str>,
    ) -> Result<()> {
        let fired = cond.eval(st)?;
        let site = site.map(str::to_string).unwrap_or_else(|| cond.to_string());
        st.set_metric(format!("check_fired:{site}"), if fired { 1.0 } else { 0.0 });
        if let Some(c) = counter {
            st.add_metric(c, if fired { 1.0 } else { 0.0 });
        }
        if fired {
            self.triggers.push(cond.clone());
            let r = self.exec_chain(st, body);
            self.triggers.pop();
            r?;
        }
        Ok(())
    }

    fn retry(&mut self, st: &mut ExecState, op: &Node, cond: &Condition, refiner: Option<&RefinerRef>, max_n: u32) -> Result<()> {
        self.exec(st, op)?;
        let label = retry_label(op);
        let key = retry_prompt_key(op);
        let default = RefinerRef::named(DEFAULT_RETRY_REFINER);
        let refiner = refiner.unwrap_or(&default);
        let counter = format!("retries:{label}");
        for i in 0..max_n {
            let fired = cond.eval(st)?;
            st.set_metric(format!("check_fired:retry:{label}#{i}"), if fired { 1.0 } else { 0.0 });
            st.add_metric(counter.clone(), if fired { 1.0 } else { 0.0 });
            if fired {
                self.triggers.push(cond.clone());
                let action = self.retry_action(refiner);
                let r = self
                    .refine(st, action, refiner, key.as_deref(), false)
                    .and_then(|()| self.exec(st, op));
                self.triggers.pop();
                r?;
            }
        }
        Ok(())
    }

    fn retry_action(&self, refiner: &RefinerRef) -> RefAction {
        retry_action(self.reg, refiner)
    }

    fn merge(&mut self, st: &mut ExecState, left: &str, right: &str, into: Option<&str>, policy: &MergePolicy) -> Result<()> {
        let l = prompt_entry(st, left)?;
        let r = prompt_entry(st, right)?;
        let (text, params, policy_name) = match policy {
            MergePolicy::PickLeft => (l.text.clone(), l.params.clone(), "pick_left".to_string()),
            MergePolicy::PickRight => (r.text.clone(), r.params.clone(), "pick_right".to_string()),
            MergePolicy::PickByMetric { metric, higher_is_better } => {
                let lm = st.metadata.get(&format!("{metric}@{left}")).copied();
                let rm = st.metadata.get(&format!("{metric}@{right}")).copied();
                let right_wins = match (lm, rm) {
                    (Some(a), Some(b)) => {
                        if *higher_is_better {
                            b > a
                        } else {
                            b < a
                        }
                    }
                    (None, Some(_)) => true,
                    _ => false,
                };
                let pick = if right_wins { &r } else { &l };
                (pick.text.clone(), pick.params.clone(), format!("pick_by_metric:{metric}"))
            }
            MergePolicy::ConcatSections { separator } => {
                let mut params = r.params.clone();
                params.extend(l.params.clone());
                (format!("{}{separator}{}", l.text, r.text), params, "concat_sections".to_string())
            }
        };
        let out = into.map(str::to_string).unwrap_or_else(|| merge_key(left, right));
        let refiner_id = format!("merge:{policy_name}");
        if !st.store.contains(&out) {
            st.store.create(&out, Refinement::new(RefineMode::Manual, refiner_id.clone(), ""), false)?;
        }
        let mut rec = Refinement::new(RefineMode::Manual, refiner_id, text).with_params(params);
        rec.parents = vec![l.version.clone(), r.version.clone()];
        rec.trigger = self.triggers.last().map(|t| t.to_string());
        let entry = st.store.apply_ref(&out, RefAction::Merge, rec)?.clone();
        st.focus = Some(out.clone());
        let last = entry.ref_log.last().expect("merge record");
        self.trace.push(TraceRecord::Ref {
            key: out,
            refiner_id: last.refiner_id.clone(),
            mode: last.mode,
            action: last.action,
            trigger: last.trigger.clone(),
            pre_version: last.pre_version.clone(),
            post_version: last.post_version.clone(),
            token_delta: 0,
        });
        Ok(())
    }

    fn delegate(&mut self, st: &mut ExecState, agent: &str, payload: &Payload, out: &str) -> Result<()> {
        let a = self.reg.agents.get(agent).ok_or_else(|| AlgebraError::UnknownAgent(agent.into()))?;
        let value = resolve_payload(st, payload)?;
        match a.call(&value) {
            Ok(o) => {
                st.context.insert(out.to_string(), o.value);
                st.set_metric(format!("latency:{agent}"), o.latency_s);
            }
            Err(msg) => {
                log::warn!("agent {agent} failed: {msg}");
                st.set_metric(format!("error:{agent}"), 1.0);
            }
        }
        Ok(())
    }

    fn fuse(&mut self, st: &mut ExecState, rule: FuseRule, body: &[Node]) -> Result<()> {
        match rule {
            FuseRule::MapFilter | FuseRule::FilterMap => {
                let [Node { op: Op::Gen(a), .. }, Node { op: Op::Gen(b), .. }] = body else {
                    return Err(AlgebraError::FuseShape(format!("{} needs two GENs", rule.name())));
                };
                self.fuse_stream(st, rule, a, b)
            }
            FuseRule::Sections => {
                let gens: Vec<&GenSpec> = body
                    .iter()
                    .map(|n| match &n.op {
                        Op::Gen(g) if g.over.is_none() => Ok(g),
                        _ => Err(AlgebraError::FuseShape("sections fuse plain GENs only".into())),
                    })
                    .collect::<Result<_>>()?;
                self.fuse_sections(st, &gens)
            }
            FuseRule::RefChain => self.fuse_refs(st, body),
        }
    }

    fn fuse_stream(&mut self, st: &mut ExecState, rule: FuseRule, a: &GenSpec, b: &GenSpec) -> Result<()> {
        let (map, filter) = if rule == FuseRule::MapFilter { (a, b) } else { (b, a) };
        let keep = filter.keep.clone().ok_or_else(|| AlgebraError::FuseShape("filter GEN lacks keep".into()))?;
        if map.keep.is_some() || b.over.as_deref() != Some(a.label.as_str()) {
            return Err(AlgebraError::FuseShape("second GEN must stream over the first GEN's output".into()));
        }
        let stream = a.over.clone().ok_or_else(|| AlgebraError::FuseShape("first GEN must stream".into()))?;
        let ea = prompt_entry(st, &gen_key(st, a)?)?;
        let eb = prompt_entry(st, &gen_key(st, b)?)?;
        let items = stream_items(st, &a.label, &stream)?;
        let label = format!("{}+{}", a.label, b.label);
        let mut usage = Usage::default();
        let (mut mapped_all, mut kept_orig, mut kept_mapped) = (Vec::new(), Vec::new(), Vec::new());
        for item in &items {
            let scope = Scope::new(&st.context).with_item(item);
            let pa = st.store.render_in(&ea, &scope, &ParamMap::new())?;
            let pb = st.store.render_in(&eb, &scope, &ParamMap::new())?;
            let (ia, data) = split_input(&pa).ok_or_else(|| AlgebraError::FusedOutput {
                label: a.label.clone(),
                detail: format!("prompt has no '{INPUT_MARKER}' marker"),
            })?;
            let (ib, _) = split_input(&pb).ok_or_else(|| AlgebraError::FusedOutput {
                label: b.label.clone(),
                detail: format!("prompt has no '{INPUT_MARKER}' marker"),
            })?;
            let prompt = format!("{}\n{}\n{FUSED_CONTRACT}\n{INPUT_MARKER} {}", ia.trim_end(), ib.trim_end(), data.trim());
            let r = match self.complete(&label, prompt, &ea, a.max_tokens) {
                Ok(r) => r,
                Err(e) => return soft_failure(st, &label, e),
            };
            usage.add(&r);
            let (text, lbl) = split_labelled(&r.text).ok_or_else(|| AlgebraError::FusedOutput {
                label: label.clone(),
                detail: "response lacks a final LABEL line".into(),
            })?;
            let m = mapped(item, text);
            if label_matches(&lbl, &keep) {
                kept_orig.push(item.clone());
                kept_mapped.push(m.clone());
            }
            mapped_all.push(m);
        }
        if !items.is_empty() {
            st.set_metric(format!("selectivity:{}", filter.label), kept_orig.len() as f64 / items.len() as f64);
        }
        st.set_metric(format!("items:{label}"), items.len() as f64);
        if rule == FuseRule::MapFilter {
            st.context.insert(a.label.clone(), Value::Array(mapped_all));
            st.context.insert(b.label.clone(), Value::Array(kept_mapped));
        } else {
            st.context.insert(a.label.clone(), Value::Array(kept_orig));
            st.context.insert(b.label.clone(), Value::Array(kept_mapped));
        }
        self.record_gen(st, &label, &ea, &usage);
        Ok(())
    }

    fn fuse_sections(&mut self, st: &mut ExecState, gens: &[&GenSpec]) -> Result<()> {
        let mut prompt = String::new();
        let mut first = None;
        for g in gens {
            let e = prompt_entry(st, &gen_key(st, g)?)?;
            prompt.push_str(&section_marker(&g.label));
            prompt.push('\n');
            prompt.push_str(&st.store.render(&e, &st.context, &ParamMap::new())?);
            prompt.push('\n');
            first.get_or_insert(e);
        }
        let entry = first.ok_or_else(|| AlgebraError::FuseShape("empty sections fuse".into()))?;
        let label = gens.iter().map(|g| g.label.as_str()).collect::<Vec<_>>().join("+");
        let r = match self.complete(&label, prompt, &entry, None) {
            Ok(r) => r,
            Err(e) => return soft_failure(st, &label, e),
        };
        let sections: BTreeMap<String, String> = split_sections(&r.text).into_iter().collect();
        for g in gens {
            let text = sections.get(&g.label).ok_or_else(|| AlgebraError::FusedOutput {
                label: label.clone(),
                detail: format!("no section for '{}'", g.label),
            })?;
            st.context.insert(g.label.clone(), Value::String(text.clone()));
        }
        let mut u = Usage::default();
        u.add(&r);
        self.record_gen(st, &label, &entry, &u);
        Ok(())
    }

    fn fuse_refs(&mut self, st: &mut ExecState, body: &[Node]) -> Result<()> {
        let mut keys = Vec::new();
        for n in body {
            match &n.op {
                Op::Ref { action, key, .. } if *action != RefAction::Create => keys.push(key.clone()),
                _ => return Err(AlgebraError::FuseShape("ref_chain fuses non-CREATE REFs only".into())),
            }
        }
        let key = keys[0].clone().or_else(|| st.focus.clone()).ok_or_else(|| AlgebraError::MissingKey("FUSE[\"ref_chain\"]".into()))?;
        if keys.iter().any(|k| k.as_deref().is_some_and(|k| k != key)) {
            return Err(AlgebraError::FuseShape("ref_chain REFs must target one key".into()));
        }
        let before = prompt_entry(st, &key)?;
        let mut scratch = st.clone();
        let trace_len = self.trace.len();
        for n in body {
            if let Op::Ref { action, refiner, .. } = &n.op {
                self.refine(&mut scratch, *action, refiner, Some(&key), false)?;
            }
        }
        self.trace.truncate(trace_len);
        let after = prompt_entry(&scratch, &key)?;
        st.metadata = scratch.metadata;
        let subs = after.ref_log[before.ref_log.len()..].to_vec();
        if subs.is_empty() {
            return Ok(());
        }
        let mode = subs.iter().map(|r| r.mode).find(|m| *m != RefineMode::Manual).unwrap_or(RefineMode::Manual);
        let id = format!("chain:{}", subs.iter().map(|r| r.refiner_id.as_str()).collect::<Vec<_>>().join("+"));
        let mut rec = Refinement::new(mode, id, after.text.clone()).with_params(after.params.clone());
        rec.trigger = self.triggers.last().map(|t| t.to_string());
        rec.metrics = subs[0].metrics_snapshot.clone();
        rec.sub_records = subs;
        let entry = st.store.apply_ref(&key, RefAction::Update, rec)?.clone();
        st.focus = Some(key.clone());
        let last = entry.ref_log.last().expect("record");
        self.trace.push(TraceRecord::Ref {
            key,
            refiner_id: last.refiner_id.clone(),
            mode: last.mode,
            action: last.action,
            trigger: last.trigger.clone(),
            pre_version: last.pre_version.clone(),
            post_version: last.post_version.clone(),
            token_delta: count_tokens(&entry.text) as i64 - count_tokens(&before.text) as i64,
        });
        Ok(())
    }
}

fn soft_failure(st: &mut ExecState, label: &str, e: crate::backend::BackendError) -> Result<()> {
    log::warn!("{label}: {e}");
    st.set_metric(format!("error:{label}"), 1.0);
    Ok(())
}

fn prompt_entry(st: &ExecState, key: &str) -> Result<PromptEntry> {
    st.store
        .get(key)
        .cloned()
        .ok_or_else(|| AlgebraError::Store(crate::store::StoreError::UnknownKey(key.into())))
}

fn gen_key(st: &ExecState, g: &GenSpec) -> Result<String> {
    g.prompt.clone().or_else(|| st.focus.clone()).ok_or_else(|| AlgebraError::NoPrompt(g.label.clone()))
}

fn stream_items(st: &ExecState, label: &str, stream: &str) -> Result<Vec<Value>> {
    match st.context.get(stream) {
        Some(Value::Array(items)) => Ok(items.clone()),
        Some(other) => Err(AlgebraError::BadStream { label: label.into(), detail: format!("C[\"{stream}\"] is {other}, not a list") }),
        None => Err(AlgebraError::BadStream { label: label.into(), detail: format!("C[\"{stream}\"] is absent") }),
    }
}

/// Object items keep their fields and take the output as `text`; other items become the output.
fn mapped(item: &Value, text: String) -> Value {
    match item {
        Value::Object(m) => {
            let mut m = m.clone();
            m.insert("text".into(), Value::String(text));
            Value::Object(m)
        }
        _ => Value::String(text),
    }
}

fn label_matches(output: &str, keep: &str) -> bool {
    output.trim().eq_ignore_ascii_case(keep.trim())
}

/// Splits a rendered prompt at its last input marker into (instruction, data).
fn split_input(prompt: &str) -> Option<(&str, &str)> {
    let i = prompt.rfind(INPUT_MARKER)?;
    Some((&prompt[..i], &prompt[i + INPUT_MARKER.len()..]))
}

fn meta_prompt(spec: &RefinerSpec, current: &str, st: &ExecState) -> String {
    let instruction = match &spec.body {
        RefinerBody::Text(t) | RefinerBody::Append(t) | RefinerBody::Template(t) => t.as_str(),
        RefinerBody::Transform(_) => "",
    };
    let mut out = String::new();
    if !instruction.is_empty() {
        out.push_str(instruction);
        out.push('\n');
    }
    out.push_str(PROMPT_HEADER);
    out.push('\n');
    out.push_str(current);
    out.push('\n');
    match spec.mode {
        RefineMode::Assisted => {
            out.push_str(HINT_HEADER);
            out.push('\n');
            out.push_str(spec.hint.as_deref().unwrap_or(""));
        }
        _ => {
            out.push_str(SIGNALS_HEADER);
            for s in &spec.signals {
                match st.metadata.get(s) {
                    Some(v) => out.push_str(&format!("\n{s}={v}")),
                    None => out.push_str(&format!("\n{s}=absent")),
                }
            }
        }
    }
    out
}

fn resolve_payload(st: &ExecState, p: &Payload) -> Result<Value> {
    Ok(match p {
        Payload::Context(k) => st
            .context
            .get(k)
            .cloned()
            .ok_or_else(|| AlgebraError::Payload(format!("C[\"{k}\"] is absent")))?,
        Payload::Prompt(k) => serde_json::to_value(st.store.resolve(k)?).expect("entry serializes"),
        Payload::Str(s) => Value::String(s.clone()),
        Payload::Num(n) => serde_json::Number::from_f64(*n)
            .map(Value::Number)
            .ok_or_else(|| AlgebraError::Payload("non-finite number".into()))?,
        Payload::List(items) => Value::Array(items.iter().map(|i| resolve_payload(st, i)).collect::<Result<_>>()?),
    })
}

fn summary(node: &Node) -> String {
    let s = node.to_string();
    match s.lines().next() {
        Some(first) if s.contains('\n') => format!("{first} ..."),
        _ => s,
    }
}

/// Cheap fingerprint of a state for computing deltas.
struct Snapshot {
    prompts: BTreeMap<String, String>,
    context: BTreeMap<String, u64>,
    metrics: BTreeMap<String, f64>,
}

fn value_fingerprint(v: &Value) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    v.to_string().hash(&mut h);
    h.finish()
}

impl Snapshot {
    fn of(st: &ExecState) -> Self {
        Snapshot {
            prompts: st.store.entries().map(|e| (e.key.clone(), e.version.0.clone())).collect(),
            context: st.context.iter().map(|(k, v)| (k.clone(), value_fingerprint(v))).collect(),
            metrics: st.metadata.clone(),
        }
    }

    fn delta(&self, st: &ExecState) -> StateDelta {
        let after = Snapshot::of(st);
        fn changed<V: PartialEq>(a: &BTreeMap<String, V>, b: &BTreeMap<String, V>) -> Vec<String> {
            let mut keys: Vec<String> = b.iter().filter(|(k, v)| a.get(*k) != Some(*v)).map(|(k, _)| k.clone()).collect();
            keys.extend(a.keys().filter(|k| !b.contains_key(*k)).cloned());
            keys.sort();
            keys
        }
        StateDelta {
            prompts: changed(&self.prompts, &after.prompts),
            context: changed(&self.context, &after.context),
            metrics: changed(&self.metrics, &after.metrics),
        }
    }
}

/// Runs a pipeline. Operator errors end the run early and are reported in
/// `RunReport::error` alongside the partial event log.
pub fn run_pipeline(
    pipeline: &Pipeline,
    initial: ExecState,
    backend: &BackendHandle,
    registry: &Registry,
    options: &RunOptions,
) -> Result<RunReport> {
    if pipeline.nodes.is_empty() {
        return Err(AlgebraError::EmptyPipeline(pipeline.name.clone()));
    }
    let mut engine = Engine::new(registry, backend);
    engine.check_invariants = options.check_invariants || cfg!(debug_assertions);
    engine.keep_existing = options.keep_existing;
    if let Some(p) = &options.log_path {
        let f = std::fs::File::create(p).map_err(|e| AlgebraError::Log(e.to_string()))?;
        engine.log = Some(std::io::BufWriter::new(f));
    }
    let original_store = options.shadow.then(|| initial.store.clone());
    let mut state = initial;
    let stats_before = backend.stats();
    let result = engine.exec_chain(&mut state, &pipeline.nodes);
    if let Some(log) = &mut engine.log {
        log.flush().map_err(|e| AlgebraError::Log(e.to_string()))?;
    }
    if let Some(store) = original_store {
        state.store = store;
    }
    let after = backend.stats();
    let cache = crate::backend::CacheStats {
        requests: after.requests - stats_before.requests,
        hit_requests: after.hit_requests - stats_before.hit_requests,
        prompt_tokens: after.prompt_tokens - stats_before.prompt_tokens,
        cached_tokens: after.cached_tokens - stats_before.cached_tokens,
    };
    Ok(RunReport {
        pipeline: pipeline.name.clone(),
        shadow: options.shadow,
        state,
        events: engine.events,
        trace: engine.trace,
        rewrites: Vec::new(),
        cache,
        error: result.err().map(|e| e.to_string()),
    })
}

/// Executes nodes directly on a state, without a report. Errors propagate.
pub fn execute(nodes: &[Node], state: &mut ExecState, backend: &BackendHandle, registry: &Registry) -> Result<()> {
    let mut engine = Engine::new(registry, backend);
    engine.check_invariants = cfg!(debug_assertions);
    engine.exec_chain(state, nodes)
}
