//! Operator tree shared by the parser, the interpreter and the planner.

use std::fmt::{self, Write};

use serde::{Deserialize, Serialize};

use crate::state::{quote, Condition};
use crate::store::{ParamMap, RefAction};

/// Byte range plus 1-based line and column of its start.
///
/// Spans never take part in equality, so trees compare structurally.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub line: usize,
    pub col: usize,
}

impl PartialEq for Span {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub op: Op,
    #[serde(default, skip_serializing)]
    pub span: Span,
}

impl Node {
    pub fn new(op: Op) -> Self {
        Node { op, span: Span::default() }
    }

    pub fn kind(&self) -> &'static str {
        self.op.kind()
    }

    /// Whether the node is built only from the six core operators.
    pub fn is_core(&self) -> bool {
        match &self.op {
            Op::Check { body, .. } => body.iter().all(Node::is_core),
            Op::Ret { .. } | Op::Gen(_) | Op::Ref { .. } | Op::Merge { .. } | Op::Delegate { .. } => true,
            _ => false,
        }
    }
}

impl From<Op> for Node {
    fn from(op: Op) -> Self {
        Node::new(op)
    }
}

/// One GEN site.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GenSpec {
    /// Output key in C.
    pub label: String,
    /// Prompt key; the current focus when absent.
    pub prompt: Option<String>,
    /// Stream key in C; the prompt is rendered once per item bound as `C.item`.
    pub over: Option<String>,
    /// Turns a per-item GEN into a filter keeping items whose output equals this label.
    pub keep: Option<String>,
    pub max_tokens: Option<u32>,
}

impl GenSpec {
    pub fn new(label: impl Into<String>) -> Self {
        GenSpec { label: label.into(), ..Default::default() }
    }

    pub fn prompt(mut self, key: impl Into<String>) -> Self {
        self.prompt = Some(key.into());
        self
    }

    pub fn over(mut self, stream: impl Into<String>) -> Self {
        self.over = Some(stream.into());
        self
    }

    pub fn keep(mut self, label: impl Into<String>) -> Self {
        self.keep = Some(label.into());
        self
    }
}

/// How a REF obtains its transformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RefinerRef {
    /// A registered refiner, with positional arguments bound to its parameters.
    Named { id: String, args: Vec<String> },
    /// Literal text, e.g. `REF[APPEND, "Focus on dosage."]`.
    Literal(String),
    /// Materializes a rendered view.
    View { name: String, args: ParamMap },
}

impl RefinerRef {
    pub fn named(id: impl Into<String>) -> Self {
        RefinerRef::Named { id: id.into(), args: Vec::new() }
    }

    pub fn id(&self) -> String {
        match self {
            RefinerRef::Named { id, .. } => id.clone(),
            RefinerRef::Literal(_) => "literal".into(),
            RefinerRef::View { name, .. } => format!("view:{name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MergePolicy {
    PickLeft,
    PickRight,
    /// Reads `M["<metric>@<key>"]` for each side; absent on both sides picks left, ties pick left.
    PickByMetric { metric: String, higher_is_better: bool },
    ConcatSections { separator: String },
}

impl Default for MergePolicy {
    fn default() -> Self {
        MergePolicy::PickByMetric { metric: "confidence".into(), higher_is_better: true }
    }
}

/// A DELEGATE payload, resolved against the state before the agent sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Context(String),
    /// The resolved prompt entry (key or historical version) as JSON.
    Prompt(String),
    Str(String),
    Num(f64),
    List(Vec<Payload>),
}

/// Which fusion rule produced a `FUSE` node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FuseRule {
    /// Per-item map GEN then filter GEN over its output.
    MapFilter,
    /// Per-item filter GEN then map GEN over the kept items.
    FilterMap,
    /// Plain GENs answered in one sectioned call.
    Sections,
    /// Consecutive REFs on one key applied as one composite record.
    RefChain,
}

impl FuseRule {
    pub fn name(self) -> &'static str {
        match self {
            FuseRule::MapFilter => "map_filter",
            FuseRule::FilterMap => "filter_map",
            FuseRule::Sections => "sections",
            FuseRule::RefChain => "ref_chain",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [FuseRule::MapFilter, FuseRule::FilterMap, FuseRule::Sections, FuseRule::RefChain]
            .into_iter()
            .find(|r| r.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchArm {
    pub guard: Condition,
    pub body: Vec<Node>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Op {
    Ret { source: String, prompt: Option<String>, params: ParamMap },
    Gen(GenSpec),
    Ref { action: RefAction, refiner: RefinerRef, key: Option<String>, overwrite: bool },
    Check { cond: Condition, body: Vec<Node>, site: Option<String>, counter: Option<String> },
    Merge { left: String, right: String, into: Option<String>, policy: MergePolicy },
    Delegate { agent: String, payload: Payload, out: String },
    Expand { key: String, text: String },
    Retry { op: Box<Node>, cond: Condition, refiner: Option<RefinerRef>, max_n: u32 },
    Map { keys: Vec<String>, refiner: RefinerRef },
    Switch { arms: Vec<SwitchArm>, default: Option<Vec<Node>> },
    View { name: String, args: ParamMap, key: Option<String> },
    Diff { left: String, right: String },
    Fuse { rule: FuseRule, body: Vec<Node> },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Ret { .. } => "RET",
            Op::Gen(_) => "GEN",
            Op::Ref { .. } => "REF",
            Op::Check { .. } => "CHECK",
            Op::Merge { .. } => "MERGE",
            Op::Delegate { .. } => "DELEGATE",
            Op::Expand { .. } => "EXPAND",
            Op::Retry { .. } => "RETRY",
            Op::Map { .. } => "MAP",
            Op::Switch { .. } => "SWITCH",
            Op::View { .. } => "VIEW",
            Op::Diff { .. } => "DIFF",
            Op::Fuse { .. } => "FUSE",
        }
    }

    /// Whether the canonical form fits on one line.
    fn is_inline(&self) -> bool {
        match self {
            Op::Check { .. } | Op::Fuse { .. } => false,
            Op::Switch { arms, default } => {
                default.is_none() && arms.len() == 1 && arms[0].body.len() == 1 && arms[0].body[0].op.is_inline()
            }
            Op::Retry { op, .. } => op.op.is_inline(),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub name: String,
    pub nodes: Vec<Node>,
    #[serde(default, skip_serializing)]
    pub span: Span,
}

impl Pipeline {
    pub fn new(name: impl Into<String>, nodes: Vec<Node>) -> Self {
        Pipeline { name: name.into(), nodes, span: Span::default() }
    }
}

fn num(n: f64) -> String {
    format!("{n}")
}

fn write_refiner(out: &mut String, r: &RefinerRef) {
    match r {
        RefinerRef::Named { id, args } => {
            out.push_str(id);
            if !args.is_empty() {
                let a: Vec<String> = args.iter().map(|a| quote(a)).collect();
                let _ = write!(out, "({})", a.join(", "));
            }
        }
        RefinerRef::Literal(t) => out.push_str(&quote(t)),
        RefinerRef::View { name, args } => {
            let _ = write!(out, "VIEW[{}]", quote(name));
            write_view_args(out, args);
        }
    }
}

fn write_view_args(out: &mut String, args: &ParamMap) {
    if !args.is_empty() {
        let a: Vec<String> = args.iter().map(|(k, v)| format!("{k}: {}", quote(v))).collect();
        let _ = write!(out, " ({})", a.join(", "));
    }
}

fn write_payload(out: &mut String, p: &Payload) {
    match p {
        Payload::Context(k) => {
            let _ = write!(out, "C[{}]", quote(k));
        }
        Payload::Prompt(k) => {
            let _ = write!(out, "P[{}]", quote(k));
        }
        Payload::Str(s) => out.push_str(&quote(s)),
        Payload::Num(n) => out.push_str(&num(*n)),
        Payload::List(items) => {
            out.push('[');
            for (i, it) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_payload(out, it);
            }
            out.push(']');
        }
    }
}

fn write_policy(out: &mut String, p: &MergePolicy) {
    match p {
        MergePolicy::PickLeft => out.push_str("pick_left"),
        MergePolicy::PickRight => out.push_str("pick_right"),
        MergePolicy::PickByMetric { metric, higher_is_better } => {
            let dir = if *higher_is_better { "higher" } else { "lower" };
            let _ = write!(out, "pick_by_metric({}, {dir})", quote(metric));
        }
        MergePolicy::ConcatSections { separator } => {
            let _ = write!(out, "concat_sections({})", quote(separator));
        }
    }
}

/// Writes a chain, one op per line, each line prefixed by `indent` spaces.
pub(crate) fn write_chain(out: &mut String, nodes: &[Node], indent: usize) {
    for (i, n) in nodes.iter().enumerate() {
        out.push_str(&" ".repeat(indent));
        write_node(out, n, indent);
        if i + 1 < nodes.len() {
            out.push_str(" ->");
        }
        out.push('\n');
    }
}

fn write_block(out: &mut String, body: &[Node], indent: usize) {
    out.push_str(" {\n");
    write_chain(out, body, indent + 2);
    out.push_str(&" ".repeat(indent));
    out.push('}');
}

/// Canonical text of one node. Multi-line forms indent nested lines relative to `indent`.
pub(crate) fn write_node(out: &mut String, node: &Node, indent: usize) {
    let op = &node.op;
    out.push_str(op.kind());
    out.push('[');
    match op {
        Op::Ret { source, prompt, params } => {
            out.push_str(&quote(source));
            if let Some(p) = prompt {
                let _ = write!(out, ", prompt: P[{}]", quote(p));
            }
            for (k, v) in params {
                let _ = write!(out, ", {k}: {}", quote(v));
            }
            out.push(']');
        }
        Op::Gen(g) => {
            out.push_str(&quote(&g.label));
            if let Some(p) = &g.prompt {
                let _ = write!(out, ", prompt: P[{}]", quote(p));
            }
            if let Some(s) = &g.over {
                let _ = write!(out, ", over: C[{}]", quote(s));
            }
            if let Some(k) = &g.keep {
                let _ = write!(out, ", keep: {}", quote(k));
            }
            if let Some(m) = g.max_tokens {
                let _ = write!(out, ", max_tokens: {m}");
            }
            out.push(']');
        }
        Op::Ref { action, refiner, key, overwrite } => {
            let _ = write!(out, "{action}, ");
            write_refiner(out, refiner);
            if let Some(k) = key {
                let _ = write!(out, ", key: {}", quote(k));
            }
            if *overwrite {
                out.push_str(", overwrite: true");
            }
            out.push(']');
        }
        Op::Check { cond, body, site, counter } => {
            let _ = write!(out, "{cond}");
            if let Some(s) = site {
                let _ = write!(out, ", site: {}", quote(s));
            }
            if let Some(c) = counter {
                let _ = write!(out, ", counter: {}", quote(c));
            }
            out.push(']');
            write_block(out, body, indent);
        }
        Op::Merge { left, right, into, policy } => {
            let _ = write!(out, "{}, {}", quote(left), quote(right));
            if let Some(k) = into {
                let _ = write!(out, ", into: {}", quote(k));
            }
            if *policy != MergePolicy::default() {
                out.push_str(", policy: ");
                write_policy(out, policy);
            }
            out.push(']');
        }
        Op::Delegate { agent, payload, out: sink } => {
            let _ = write!(out, "{}, ", quote(agent));
            write_payload(out, payload);
            let _ = write!(out, "] -> C[{}]", quote(sink));
        }
        Op::Expand { key, text } => {
            let _ = write!(out, "{}, {}]", quote(key), quote(text));
        }
        Op::Retry { op, cond, refiner, max_n } => {
            write_node(out, op, indent);
            let _ = write!(out, ", {cond}");
            if let Some(r) = refiner {
                out.push_str(", refiner: ");
                write_refiner(out, r);
            }
            if *max_n != 1 {
                let _ = write!(out, ", max_n: {max_n}");
            }
            out.push(']');
        }
        Op::Map { keys, refiner } => {
            let k: Vec<String> = keys.iter().map(|k| quote(k)).collect();
            let _ = write!(out, "[{}], ", k.join(", "));
            write_refiner(out, refiner);
            out.push(']');
        }
        Op::Switch { arms, default } => {
            if op.is_inline() {
                let _ = write!(out, "{} -> ", arms[0].guard);
                write_node(out, &arms[0].body[0], indent);
                out.push(']');
            } else {
                out.push('\n');
                let inner = indent + 2;
                let mut items: Vec<(String, &Vec<Node>)> =
                    arms.iter().map(|a| (a.guard.to_string(), &a.body)).collect();
                if let Some(d) = default {
                    items.push(("else".into(), d));
                }
                let n = items.len();
                for (i, (guard, body)) in items.into_iter().enumerate() {
                    out.push_str(&" ".repeat(inner));
                    let _ = write!(out, "{guard} ->");
                    if body.len() == 1 && body[0].op.is_inline() {
                        out.push(' ');
                        write_node(out, &body[0], inner);
                    } else {
                        write_block(out, body, inner);
                    }
                    if i + 1 < n {
                        out.push(',');
                    }
                    out.push('\n');
                }
                out.push_str(&" ".repeat(indent));
                out.push(']');
            }
        }
        Op::View { name, args, key } => {
            out.push_str(&quote(name));
            if let Some(k) = key {
                let _ = write!(out, ", key: {}", quote(k));
            }
            out.push(']');
            write_view_args(out, args);
        }
        Op::Diff { left, right } => {
            let _ = write!(out, "{}, {}]", quote(left), quote(right));
        }
        Op::Fuse { rule, body } => {
            let _ = write!(out, "{}]", quote(rule.name()));
            write_block(out, body, indent);
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        write_node(&mut s, self, 0);
        f.write_str(&s)
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = format!("pipeline {} {{\n", quote(&self.name));
        write_chain(&mut s, &self.nodes, 2);
        s.push('}');
        f.write_str(&s)
    }
}
