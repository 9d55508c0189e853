use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::BenchError;
use crate::algebra::{run_pipeline, FuseRule, GenSpec, Node, Op, Pipeline, Registry, RunOptions, RunReport, TraceRecord};
use crate::backend::corpus::{generate, CorpusSpec};
use crate::config::Config;
use crate::planner::{
    calibrate, estimate_cost, CalibrationError, CostModel, GainRow, GainTable, PlanStats, PlanStatsError,
};
use crate::state::ExecState;
use crate::store::{ParamMap, PromptStore, RefineMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionBenchConfig {
    pub selectivities: Vec<f64>,
    pub map_instruction: String,
    pub filter_instruction: String,
    /// Label the filter keeps.
    pub keep: String,
    /// Also score each run's keep decisions against the corpus labels.
    pub report_accuracy: bool,
}

impl Default for FusionBenchConfig {
    fn default() -> Self {
        FusionBenchConfig {
            selectivities: crate::planner::SELECTIVITIES.to_vec(),
            map_instruction: "Clean up and summarize the tweet in at most 5 words.".into(),
            filter_instruction: "Classify the sentiment of the tweet as positive or negative.".into(),
            keep: "negative".into(),
            report_accuracy: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOrder {
    MapFilter,
    FilterMap,
}

impl FusionOrder {
    pub fn name(self) -> &'static str {
        match self {
            FusionOrder::MapFilter => "map_filter",
            FusionOrder::FilterMap => "filter_map",
        }
    }
}

pub const MAP_LABEL: &str = "summary";
pub const FILTER_LABEL: &str = "kept";
const STREAM: &str = "tweets";

/// The sequential and fused pipelines of one order.
pub fn fusion_pipelines(order: FusionOrder, keep: &str) -> (Pipeline, Pipeline) {
    let (first, second, rule) = match order {
        FusionOrder::MapFilter => (
            GenSpec::new(MAP_LABEL).prompt("map").over(STREAM),
            GenSpec::new(FILTER_LABEL).prompt("filter").over(MAP_LABEL).keep(keep),
            FuseRule::MapFilter,
        ),
        FusionOrder::FilterMap => (
            GenSpec::new(FILTER_LABEL).prompt("filter").over(STREAM).keep(keep),
            GenSpec::new(MAP_LABEL).prompt("map").over(FILTER_LABEL),
            FuseRule::FilterMap,
        ),
    };
    let body: Vec<Node> = vec![Op::Gen(first).into(), Op::Gen(second).into()];
    let name = order.name();
    (
        Pipeline::new(format!("{name}_sequential"), body.clone()),
        Pipeline::new(format!("{name}_fused"), vec![Op::Fuse { rule, body }.into()]),
    )
}

fn initial_state(cfg: &FusionBenchConfig, corpus: &[Value]) -> Result<ExecState, BenchError> {
    let mut store = PromptStore::new();
    let task = |instruction: &str| format!("{instruction}\nInput: {{{{C.item.text}}}}");
    store.create_entry("map", &task(&cfg.map_instruction), ParamMap::new(), RefineMode::Manual)?;
    store.create_entry("filter", &task(&cfg.filter_instruction), ParamMap::new(), RefineMode::Manual)?;
    let mut st = ExecState::new(store);
    st.context.insert(STREAM.into(), Value::Array(corpus.to_vec()));
    Ok(st)
}

/// Runs one plan on a fresh cache.
pub fn run_fusion_plan(config: &Config, corpus: &[Value], pipeline: &Pipeline) -> Result<RunReport, BenchError> {
    let backend = config.backend_handle()?;
    let state = initial_state(&config.fusion, corpus)?;
    let report = run_pipeline(pipeline, state, &backend, &Registry::new(), &RunOptions::default())?;
    match &report.error {
        Some(e) => Err(BenchError::RunFailed(pipeline.name.clone(), e.clone())),
        None => Ok(report),
    }
}

/// Token statistics measured at one selectivity; independent of the cost model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionProfile {
    pub selectivity: f64,
    /// Per order: (sequential pipeline, fused pipeline, stats of both).
    pub plans: Vec<(FusionOrder, Pipeline, Pipeline, PlanStats)>,
}

fn corpus_at(config: &Config, s: f64) -> Vec<Value> {
    generate(&CorpusSpec { negative_fraction: s, ..config.corpus })
}

fn profile(config: &Config, s: f64, reports: &mut Vec<(FusionOrder, bool, RunReport)>) -> Result<FusionProfile, BenchError> {
    let corpus = corpus_at(config, s);
    let mut plans = Vec::new();
    for order in [FusionOrder::MapFilter, FusionOrder::FilterMap] {
        let (seq, fused) = fusion_pipelines(order, &config.fusion.keep);
        let rs = run_fusion_plan(config, &corpus, &seq)?;
        let rf = run_fusion_plan(config, &corpus, &fused)?;
        let mut stats = PlanStats { n_items: corpus.len() as f64, ..PlanStats::default() };
        stats.observe(&[rs.clone(), rf.clone()]);
        plans.push((order, seq, fused, stats));
        reports.push((order, false, rs));
        reports.push((order, true, rf));
    }
    Ok(FusionProfile { selectivity: s, plans })
}

/// Measures token statistics at every configured selectivity.
pub fn fusion_profiles(config: &Config) -> Result<Vec<FusionProfile>, BenchError> {
    config.fusion.selectivities.iter().map(|&s| profile(config, s, &mut Vec::new())).collect()
}

/// Estimated fused gain per order and selectivity under `model`.
pub fn gain_table(profiles: &[FusionProfile], model: &CostModel) -> Result<GainTable, PlanStatsError> {
    let mut rows = Vec::new();
    for p in profiles {
        let mut row = GainRow { selectivity: p.selectivity, map_filter: 0.0, filter_map: 0.0 };
        for (order, seq, fused, stats) in &p.plans {
            let gain = 1.0 - estimate_cost(fused, stats, model)? / estimate_cost(seq, stats, model)?;
            match order {
                FusionOrder::MapFilter => row.map_filter = gain,
                FusionOrder::FilterMap => row.filter_map = gain,
            }
        }
        rows.push(row);
    }
    Ok(GainTable { rows })
}

/// Calibrates the cost model against the profiles of `config`.
pub fn calibrate_default(config: &Config) -> Result<CostModel, BenchError> {
    let profiles = fusion_profiles(config)?;
    calibrate(&config.calibration, |m| gain_table(&profiles, m)).map_err(|e| match e {
        CalibrationError::CalibrationFailed => BenchError::RunFailed("calibration".into(), e.to_string()),
        CalibrationError::Evaluation(m) => BenchError::RunFailed("calibration".into(), m),
    })
}

/// One simulated run of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionRow {
    pub order: FusionOrder,
    pub selectivity: f64,
    pub plan: String,
    /// Sum of simulated call latencies.
    pub latency_s: f64,
    pub calls: u64,
    pub prompt_tokens: u64,
    pub cached_tokens: u64,
    pub completion_tokens: u64,
    pub kept: usize,
    /// Share of items whose keep decision matches the gold label.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSuite {
    pub rows: Vec<FusionRow>,
    /// Gains computed from the simulated latencies.
    pub gains: GainTable,
    /// Violations of the target gain pattern; empty when it holds.
    pub violations: Vec<String>,
}

impl FusionSuite {
    pub fn to_csv(&self) -> Result<String, BenchError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
    }

    /// Gain matrix: one line per order, one column per selectivity.
    pub fn to_table(&self) -> String {
        let mut out = String::from("fusion      ");
        for r in &self.gains.rows {
            out.push_str(&format!("{:>9}", format!("{:.0}%", r.selectivity * 100.0)));
        }
        for (name, pick) in [("map→filter", 0), ("filter→map", 1)] {
            out.push_str(&format!("\n{name:<12}"));
            for r in &self.gains.rows {
                let g = if pick == 0 { r.map_filter } else { r.filter_map };
                out.push_str(&format!("{:>9}", format!("{:.2}%", g * 100.0)));
            }
        }
        out.push('\n');
        out
    }
}

/// Share of corpus items kept exactly when their label is `keep`; kept items carry their ids.
fn keep_accuracy(corpus: &[Value], keep: &str, r: &RunReport) -> f64 {
    let kept: std::collections::BTreeSet<String> = r
        .state
        .context
        .get(FILTER_LABEL)
        .and_then(Value::as_array)
        .map(|items| items.iter().filter_map(|t| t.get("id")).map(Value::to_string).collect())
        .unwrap_or_default();
    if corpus.is_empty() {
        return 1.0;
    }
    let right = corpus.iter().filter(|t| kept.contains(&t["id"].to_string()) == (t["label"] == keep)).count();
    right as f64 / corpus.len() as f64
}

fn row(order: FusionOrder, s: f64, fused: bool, r: &RunReport) -> FusionRow {
    let mut out = FusionRow {
        order,
        selectivity: s,
        plan: if fused { "fused" } else { "sequential" }.into(),
        latency_s: 0.0,
        calls: 0,
        prompt_tokens: 0,
        cached_tokens: 0,
        completion_tokens: 0,
        kept: r.state.context.get(FILTER_LABEL).and_then(Value::as_array).map_or(0, Vec::len),
        accuracy: None,
    };
    for t in &r.trace {
        if let TraceRecord::Gen { calls, prompt_tokens, cached_prefix_tokens, completion_tokens, latency_s, .. } = t {
            out.latency_s += latency_s;
            out.calls += calls;
            out.prompt_tokens += prompt_tokens;
            out.cached_tokens += cached_prefix_tokens;
            out.completion_tokens += completion_tokens;
        }
    }
    out
}

/// Sweeps selectivity for both orders, sequential against fused.
pub fn fusion_suite(config: &Config) -> Result<FusionSuite, BenchError> {
    let mut rows = Vec::new();
    let mut gains = Vec::new();
    for &s in &config.fusion.selectivities {
        let mut reports = Vec::new();
        profile(config, s, &mut reports)?;
        let corpus = config.fusion.report_accuracy.then(|| corpus_at(config, s));
        let mut g = GainRow { selectivity: s, map_filter: 0.0, filter_map: 0.0 };
        for order in [FusionOrder::MapFilter, FusionOrder::FilterMap] {
            let latency = |fused: bool| {
                reports.iter().find(|(o, f, _)| *o == order && *f == fused).map(|(_, _, r)| FusionRow {
                    accuracy: corpus.as_deref().map(|c| keep_accuracy(c, &config.fusion.keep, r)),
                    ..row(order, s, fused, r)
                })
            };
            let (seq, fused) = (latency(false).expect("ran"), latency(true).expect("ran"));
            let gain = 1.0 - fused.latency_s / seq.latency_s;
            match order {
                FusionOrder::MapFilter => g.map_filter = gain,
                FusionOrder::FilterMap => g.filter_map = gain,
            }
            rows.push(seq);
            rows.push(fused);
        }
        gains.push(g);
    }
    let gains = GainTable { rows: gains };
    let violations = crate::planner::check_gain_table(&gains);
    Ok(FusionSuite { rows, gains, violations })
}
