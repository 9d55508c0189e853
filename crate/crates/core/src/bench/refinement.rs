use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::BenchError;
use crate::algebra::{
    run_pipeline, GenSpec, Node, Op, Pipeline, RefinerBody, RefinerRef, RefinerSpec, Registry, RunOptions, RunReport,
    TraceRecord,
};
use crate::backend::corpus::generate;
use crate::backend::{BackendHandle, PrefixCache};
use crate::config::Config;
use crate::state::ExecState;
use crate::store::{ParamMap, PromptStore, RefAction, RefineMode, ViewDef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementBenchConfig {
    /// Cache block size for this suite; hits shorter than one block count as misses.
    pub block_size: usize,
    pub manual_fragment: String,
    pub assisted_hint: String,
    pub objective: String,
    /// Also score predictions against the corpus labels.
    pub report_f1: bool,
}

impl Default for RefinementBenchConfig {
    fn default() -> Self {
        RefinementBenchConfig {
            block_size: 16,
            manual_fragment: "Answer with one lowercase word.".into(),
            assisted_hint: "answer with a single lowercase word".into(),
            objective: "Classify the sentiment of the tweet as positive or negative.".into(),
            report_f1: false,
        }
    }
}

/// Shared scaffold of the view-based strategies: a long, stable instruction
/// followed by the item.
pub const BASE_VIEW: &str = "\
You are annotating short posts written by students about their school day. \
Each post mentions a subject such as a class, a quiz, the cafeteria, a bus ride or a club, \
and may contain a user handle, a hashtag or a link. Ignore handles, hashtags and links. \
Decide how the author feels about the day they describe. \
Consider only the feeling the author states, not the subject itself, since a subject that is \
usually dreaded can still be described warmly and a usually pleasant one can still be described \
with frustration. When the wording is mixed, weigh the strongest feeling word. \
Classify the sentiment of the post as positive or negative. \
Reply with exactly one of the two labels and nothing else: no punctuation, no explanation, \
no quotation marks and no extra whitespace. \
Do not restate the post. Do not add a preamble. Do not apologize. \
If the post is empty or unreadable, reply with the label that best fits whatever words remain. \
The answer is parsed by a program that expects the bare label.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// A fresh tweet-first prompt per item; no view.
    Static,
    /// Per item, an AUTO refiner rewrites a tweet-first draft; no view.
    Agentic,
    /// View plus one literal APPEND.
    Manual,
    /// View plus one ASSISTED UPDATE with a hint.
    Assisted,
    /// View plus one AUTO UPDATE driven by the objective.
    Auto,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Static, Strategy::Agentic, Strategy::Manual, Strategy::Assisted, Strategy::Auto];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Static => "Static Prompt",
            Strategy::Agentic => "Agentic Rewrite",
            Strategy::Manual => "Manual Refinement",
            Strategy::Assisted => "Assisted Refinement",
            Strategy::Auto => "Auto Refinement",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRow {
    pub strategy: Strategy,
    pub name: String,
    /// Simulated latency of every backend call, refinements included.
    pub time_s: f64,
    /// Static time over this time.
    pub speedup: f64,
    /// Token-weighted over GEN calls.
    pub cache_hit: f64,
    /// Share of GEN calls with any cached prefix.
    pub request_hit: f64,
    pub gen_calls: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementSuite {
    pub rows: Vec<RefinementRow>,
}

impl RefinementSuite {
    pub fn row(&self, s: Strategy) -> Option<&RefinementRow> {
        self.rows.iter().find(|r| r.strategy == s)
    }

    pub fn to_csv(&self) -> Result<String, BenchError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["strategy", "time_s", "speedup", "cache_hit", "request_hit", "gen_calls", "f1"])?;
        for r in &self.rows {
            w.write_record([
                r.name.clone(),
                format!("{:.4}", r.time_s),
                format!("{:.3}", r.speedup),
                format!("{:.4}", r.cache_hit),
                format!("{:.4}", r.request_hit),
                r.gen_calls.to_string(),
                r.f1.map(|f| format!("{f:.3}")).unwrap_or_default(),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<22}{:>10}{:>10}{:>12}\n", "strategy", "time (s)", "speedup", "cache hit");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<22}{:>10.2}{:>10.2}{:>11.1}%\n",
                r.name,
                r.time_s,
                r.speedup,
                r.cache_hit * 100.0
            ));
        }
        out
    }
}

const TASK_KEY: &str = "task";
const ANSWER: &str = "answer";

/// The full instruction placed after the item, so no two items share a prefix.
fn tweet_first(objective: &str) -> String {
    format!("{{{{C.item.text}}}}\n{BASE_VIEW}\n{objective}\nInput: {{{{C.item.text}}}}")
}

fn refine(action: RefAction, refiner: RefinerRef, key: &str) -> Node {
    Op::Ref { action, refiner, key: Some(key.into()), overwrite: false }.into()
}

fn registry(cfg: &RefinementBenchConfig) -> Registry {
    let mut r = Registry::new();
    r.add_refiner(RefinerSpec::manual("manual_fragment", RefinerBody::Append(cfg.manual_fragment.clone())));
    r.add_refiner(RefinerSpec::assisted("assisted_hint", "", cfg.assisted_hint.clone()));
    r.add_refiner(RefinerSpec::auto("auto_objective", cfg.objective.clone(), vec!["confidence".into()]));
    // Rewrites the whole prompt from signals alone, with no scaffold to keep.
    r.add_refiner(RefinerSpec::auto("agentic_rewrite", "", Vec::new()));
    r
}

/// Pipeline run once before the items, and the one run per item.
fn plan(strategy: Strategy, cfg: &RefinementBenchConfig, item: usize) -> (Option<Pipeline>, Pipeline) {
    let gen = |key: &str| Node::from(Op::Gen(GenSpec::new(ANSWER).prompt(key)));
    let view: Node = Op::View { name: "classify".into(), args: ParamMap::new(), key: Some(TASK_KEY.into()) }.into();
    // The view holds the stable scaffold; the item slot is appended as a live placeholder.
    let slot: Node = Op::Expand { key: TASK_KEY.into(), text: "Input: {{C.item.text}}".into() }.into();
    let setup = |r: Node| Some(Pipeline::new("setup", vec![view.clone(), slot.clone(), r]));
    match strategy {
        Strategy::Static => (None, Pipeline::new("static", vec![gen("static")])),
        Strategy::Agentic => {
            let key = format!("agentic:{item}");
            let draft = RefinerRef::Literal(tweet_first(&cfg.objective));
            (
                None,
                Pipeline::new(
                    "agentic",
                    vec![
                        refine(RefAction::Create, draft, &key),
                        refine(RefAction::Update, RefinerRef::named("agentic_rewrite"), &key),
                        gen(&key),
                    ],
                ),
            )
        }
        Strategy::Manual => (
            setup(refine(RefAction::Append, RefinerRef::named("manual_fragment"), TASK_KEY)),
            Pipeline::new("manual", vec![gen(TASK_KEY)]),
        ),
        Strategy::Assisted => (
            setup(refine(RefAction::Update, RefinerRef::named("assisted_hint"), TASK_KEY)),
            Pipeline::new("assisted", vec![gen(TASK_KEY)]),
        ),
        Strategy::Auto => (
            setup(refine(RefAction::Update, RefinerRef::named("auto_objective"), TASK_KEY)),
            Pipeline::new("auto", vec![gen(TASK_KEY)]),
        ),
    }
}

fn initial_state(cfg: &RefinementBenchConfig) -> Result<ExecState, BenchError> {
    let mut store = PromptStore::new();
    store.define_view(ViewDef::new("classify", Vec::new(), BASE_VIEW)?)?;
    store.create_entry("static", &tweet_first(&cfg.objective), ParamMap::new(), RefineMode::Manual)?;
    Ok(ExecState::new(store))
}

#[derive(Default)]
struct Tally {
    time_s: f64,
    prompt: u64,
    cached: u64,
    calls: u64,
    hit_calls: u64,
}

impl Tally {
    fn add(&mut self, r: &RunReport) {
        for t in &r.trace {
            if let TraceRecord::Gen { calls, prompt_tokens, cached_prefix_tokens, latency_s, .. } = t {
                self.time_s += latency_s;
                self.prompt += prompt_tokens;
                self.cached += cached_prefix_tokens;
                self.calls += calls;
                self.hit_calls += u64::from(*cached_prefix_tokens > 0);
            }
        }
    }
}

fn f1(predicted: &[String], gold: &[&str], positive: &str) -> f64 {
    let (mut tp, mut fp, mut fne) = (0.0, 0.0, 0.0);
    for (p, g) in predicted.iter().zip(gold) {
        let p = p.trim().eq_ignore_ascii_case(positive);
        let g = *g == positive;
        match (p, g) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fne += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fne)
    }
}

fn run_strategy(config: &Config, strategy: Strategy, corpus: &[Value]) -> Result<(Tally, Vec<String>), BenchError> {
    let cfg = &config.refinement;
    let cache = PrefixCache::new(config.cache.capacity_tokens).with_block_size(cfg.block_size.max(1));
    let backend = BackendHandle::boxed(config.backend.build(config.cost)?, cache);
    let reg = registry(cfg);
    let mut state = initial_state(cfg)?;
    let mut tally = Tally::default();
    let mut predictions = Vec::new();
    let go = |p: &Pipeline, st: ExecState, tally: &mut Tally| -> Result<ExecState, BenchError> {
        let r = run_pipeline(p, st, &backend, &reg, &RunOptions::default())?;
        if let Some(e) = &r.error {
            return Err(BenchError::RunFailed(p.name.clone(), e.clone()));
        }
        tally.add(&r);
        tally.time_s += r.state.metadata.iter().filter(|(k, _)| k.starts_with("latency:refine:")).map(|(_, v)| v).sum::<f64>();
        Ok(r.state)
    };
    if let (Some(setup), _) = plan(strategy, cfg, 0) {
        state = go(&setup, state, &mut tally)?;
    }
    for (i, item) in corpus.iter().enumerate() {
        state.context.insert("item".into(), item.clone());
        state.metadata.retain(|k, _| !k.starts_with("latency:refine:"));
        let (_, per_item) = plan(strategy, cfg, i);
        state = go(&per_item, state, &mut tally)?;
        predictions.push(state.context.get(ANSWER).and_then(Value::as_str).unwrap_or_default().to_string());
    }
    Ok((tally, predictions))
}

/// Runs the five strategies over the configured corpus, each on a fresh cache.
pub fn refinement_suite(config: &Config) -> Result<RefinementSuite, BenchError> {
    let corpus = generate(&config.corpus);
    let gold: Vec<&str> = corpus.iter().map(|t| t["label"].as_str().unwrap_or_default()).collect();
    let mut rows = Vec::new();
    for s in Strategy::ALL {
        let (t, predictions) = run_strategy(config, s, &corpus)?;
        rows.push(RefinementRow {
            strategy: s,
            name: s.name().into(),
            time_s: t.time_s,
            speedup: 0.0,
            cache_hit: if t.prompt == 0 { 0.0 } else { t.cached as f64 / t.prompt as f64 },
            request_hit: if t.calls == 0 { 0.0 } else { t.hit_calls as f64 / t.calls as f64 },
            gen_calls: t.calls,
            f1: config.refinement.report_f1.then(|| f1(&predictions, &gold, "negative")),
        });
    }
    let base = rows[0].time_s;
    for r in &mut rows {
        r.speedup = if r.time_s > 0.0 { base / r.time_s } else { 0.0 };
    }
    Ok(RefinementSuite { rows })
}
