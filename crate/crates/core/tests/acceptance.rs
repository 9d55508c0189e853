//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails. Each criterion also has a wall-clock
//! budget; exceeding it is a failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use spear::algebra::*;
use spear::backend::corpus::CorpusSpec;
use spear::backend::{BackendHandle, PrefixCache};
use spear::bench::{
    calibrate_default, fusion_pipelines, fusion_suite, refinement_suite, run_fusion_plan, FusionOrder, Strategy,
    FILTER_LABEL, MAP_LABEL,
};
use spear::config::Config;
use spear::dsl::{self, parse, pretty};
use spear::planner::{apply_fusion, enumerate_plans, estimate_cost, plan_refinements, CostModel, SELECTIVITIES};
use spear::state::{Atom, CmpOp, Condition, ExecState};
use spear::store::{param, replay_log, ParamMap, PromptStore, RefAction, RefineMode, Refinement, ViewDef};
use spear::tokenize::tokenize;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn programs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../programs")
}

// ---------------------------------------------------------------- 1

fn seed_state() -> ExecState {
    let mut store = PromptStore::new();
    for (k, t) in [
        ("qa", "Answer the question about school.\nInput: {{C.topic}}"),
        ("alt", "Explain with specific evidence.\nInput: {{C.topic}}"),
    ] {
        store.create_entry(k, t, ParamMap::new(), RefineMode::Manual).expect("seed entry");
    }
    store
        .define_view(ViewDef::new("tone", vec![param("style", Some("plain"))], "Write in a {{style}} tone.").expect("view"))
        .expect("define view");
    let mut st = ExecState::new(store);
    st.context.insert("topic".into(), json!("the math quiz was awful"));
    st
}

fn seed_registry() -> Registry {
    let mut r = Registry::new();
    r.add_refiner(RefinerSpec::manual("cite", RefinerBody::Append("Cite the evidence.".into())));
    r.add_refiner(RefinerSpec::manual("norm", RefinerBody::Transform(Transform::Normalize)));
    r.add_refiner(RefinerSpec::assisted("helper", "Rewrite the prompt.", "add a rationale"));
    r
}

const KEYS: [&str; 2] = ["qa", "alt"];
const LABELS: [&str; 3] = ["a", "b", "c"];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("nonempty")
}

fn random_gen(rng: &mut ChaCha8Rng) -> Node {
    Op::Gen(GenSpec::new(pick(rng, &LABELS)).prompt(pick(rng, &KEYS))).into()
}

fn random_cond(rng: &mut ChaCha8Rng) -> Condition {
    match rng.gen_range(0..3) {
        0 => Condition::metric("confidence", CmpOp::Lt, rng.gen_range(0.0..1.0)),
        1 => Condition::metric("confidence", CmpOp::Ge, rng.gen_range(0.0..1.0)),
        _ => Condition::atom(Atom::InContext(pick(rng, &LABELS).into())),
    }
}

fn random_refiner(rng: &mut ChaCha8Rng) -> RefinerRef {
    RefinerRef::named(pick(rng, &["cite", "norm", "helper"]))
}

fn random_derived(rng: &mut ChaCha8Rng, depth: usize) -> Node {
    let body = |rng: &mut ChaCha8Rng| -> Vec<Node> {
        (0..rng.gen_range(1..=2))
            .map(|_| if depth < 2 && rng.gen_bool(0.4) { random_derived(rng, depth + 1) } else { random_gen(rng) })
            .collect()
    };
    match rng.gen_range(0..6) {
        0 => Op::Expand { key: pick(rng, &KEYS).into(), text: pick(rng, &["Be brief.", "Use bullet points."]).into() }.into(),
        1 => {
            let mut keys: Vec<String> = KEYS.iter().map(|k| k.to_string()).collect();
            keys.truncate(rng.gen_range(1..=2));
            Op::Map { keys, refiner: random_refiner(rng) }.into()
        }
        2 => {
            let mut args = ParamMap::new();
            if rng.gen_bool(0.5) {
                args.insert("style".into(), pick(rng, &["formal", "casual"]).into());
            }
            Op::View { name: "tone".into(), args, key: None }.into()
        }
        3 => Op::Diff { left: pick(rng, &KEYS).into(), right: pick(rng, &KEYS).into() }.into(),
        4 => Op::Retry {
            op: Box::new(random_gen(rng)),
            cond: random_cond(rng),
            refiner: rng.gen_bool(0.6).then(|| random_refiner(rng)),
            max_n: rng.gen_range(1..=3),
        }
        .into(),
        _ => {
            let arms = (0..rng.gen_range(1..=3)).map(|_| SwitchArm { guard: random_cond(rng), body: body(rng) }).collect();
            let default = rng.gen_bool(0.5).then(|| body(rng));
            Op::Switch { arms, default }.into()
        }
    }
}

fn random_pipeline(seed: u64) -> Pipeline {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=5);
    let mut nodes: Vec<Node> = (0..n)
        .map(|_| if rng.gen_bool(0.6) { random_derived(&mut rng, 0) } else { random_gen(&mut rng) })
        .collect();
    if nodes.iter().all(Node::is_core) {
        nodes.push(random_derived(&mut rng, 0));
    }
    Pipeline::new(format!("case_{seed}"), nodes)
}

fn final_state(p: &Pipeline, reg: &Registry) -> Result<(Option<String>, String), String> {
    let r = run_pipeline(p, seed_state(), &BackendHandle::mock(), reg, &RunOptions::default()).map_err(|e| e.to_string())?;
    Ok((r.error, r.state.canonical_json()))
}

fn algebra_equivalence() -> Outcome {
    let reg = seed_registry();
    let mut failed_runs = 0;
    for seed in 0..500u64 {
        let native = random_pipeline(seed);
        let core = desugar_pipeline(&native, &reg).map_err(|e| format!("case {seed}: {e}"))?;
        ensure(core.nodes.iter().all(Node::is_core), || format!("case {seed}: desugared form has derived nodes"))?;
        let a = final_state(&native, &reg)?;
        let b = final_state(&core, &reg)?;
        ensure(a == b, || format!("case {seed}: states differ for {}", native.nodes[0]))?;
        failed_runs += usize::from(a.0.is_some());
    }
    Ok(format!("500 pipelines byte-identical ({failed_runs} ended in the same operator error)"))
}

// ---------------------------------------------------------------- 2

fn replay_determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let words = ["alpha", "beta", "gamma", "delta", "\n", "{{x}}", "evidence", "risk"];
    let text = |rng: &mut ChaCha8Rng| -> String {
        (0..rng.gen_range(0..8)).map(|_| *words.choose(rng).expect("nonempty")).collect::<Vec<_>>().join(" ")
    };
    for case in 0..1000 {
        let mut s = PromptStore::new();
        let mut params = ParamMap::new();
        params.insert("x".into(), text(&mut rng));
        s.create_entry("k", &text(&mut rng), params, RefineMode::Manual).map_err(|e| e.to_string())?;
        s.create_entry("other", &text(&mut rng), ParamMap::new(), RefineMode::Manual).map_err(|e| e.to_string())?;
        for _ in 0..rng.gen_range(0..10) {
            let action = *[RefAction::Append, RefAction::Update, RefAction::Merge].choose(&mut rng).expect("nonempty");
            let mode = *[RefineMode::Manual, RefineMode::Assisted, RefineMode::Auto].choose(&mut rng).expect("nonempty");
            let mut r = Refinement::new(mode, "f", text(&mut rng));
            if action == RefAction::Merge {
                r.parents = vec![s.get("other").expect("other").version.clone()];
            }
            if rng.gen_bool(0.2) {
                let mut p = ParamMap::new();
                p.insert("x".into(), text(&mut rng));
                r.params = Some(p);
            }
            s.apply_ref("k", action, r).map_err(|e| format!("case {case}: {e}"))?;
        }
        let live = s.get("k").expect("k");
        let replayed = replay_log("k", &live.ref_log).map_err(|e| format!("case {case}: {e}"))?;
        ensure(replayed.version == live.version, || format!("case {case}: digest mismatch"))?;
        ensure(replayed.text == live.text && replayed.params == live.params, || format!("case {case}: content mismatch"))?;
    }
    Ok("1000/1000 sequences replay to the live digest".into())
}

// ---------------------------------------------------------------- 3

fn fusion_semantics() -> Outcome {
    let mut config = Config::default();
    config.corpus = CorpusSpec { size: 1000, negative_fraction: 0.5, ..config.corpus };
    let corpus = spear::backend::corpus::generate(&config.corpus);
    let mut kept_counts = Vec::new();
    for order in [FusionOrder::MapFilter, FusionOrder::FilterMap] {
        let (seq, fused) = fusion_pipelines(order, &config.fusion.keep);
        let a = run_fusion_plan(&config, &corpus, &seq).map_err(|e| e.to_string())?;
        let b = run_fusion_plan(&config, &corpus, &fused).map_err(|e| e.to_string())?;
        for label in [FILTER_LABEL, MAP_LABEL] {
            let (x, y) = (a.state.context.get(label), b.state.context.get(label));
            ensure(x.is_some() && x == y, || format!("{}: `{label}` differs between plans", order.name()))?;
        }
        let kept = a.state.context[FILTER_LABEL].as_array().map_or(0, Vec::len);
        ensure(kept > 0, || format!("{}: nothing kept", order.name()))?;
        kept_counts.push(kept);
    }
    Ok(format!("1000 items, kept sets and summaries identical (kept {} / {})", kept_counts[0], kept_counts[1]))
}

// ---------------------------------------------------------------- 4

fn selectivity_pattern() -> Outcome {
    let mut config = Config::default();
    config.corpus.size = 1000;
    let model: CostModel = calibrate_default(&config).map_err(|e| e.to_string())?;
    config.cost = model;
    let suite = fusion_suite(&config).map_err(|e| e.to_string())?;
    let rows = &suite.gains.rows;
    ensure(rows.len() == SELECTIVITIES.len(), || "missing selectivities".into())?;
    let at = |s: f64| rows.iter().find(|r| (r.selectivity - s).abs() < 1e-9).expect("swept selectivity");
    for r in rows {
        ensure((0.15..=0.30).contains(&r.map_filter), || {
            format!("map→filter gain {:.2}% at s={} outside [15%, 30%]", r.map_filter * 100.0, r.selectivity)
        })?;
    }
    ensure(at(0.1).filter_map < 0.0, || format!("filter→map gain at 10% is {:.2}%", at(0.1).filter_map * 100.0))?;
    ensure(at(0.3).filter_map <= 0.0 && at(0.5).filter_map > 0.0, || {
        format!(
            "filter→map zero crossing not in (30%, 50%]: {:.2}% → {:.2}%",
            at(0.3).filter_map * 100.0,
            at(0.5).filter_map * 100.0
        )
    })?;
    ensure(at(1.0).filter_map > 0.15, || format!("filter→map gain at 100% is {:.2}%", at(1.0).filter_map * 100.0))?;
    for w in rows.windows(2) {
        ensure(w[1].filter_map >= w[0].filter_map, || {
            format!("filter→map gain decreases between s={} and s={}", w[0].selectivity, w[1].selectivity)
        })?;
    }
    let fmt = |f: fn(&spear::planner::GainRow) -> f64| {
        rows.iter().map(|r| format!("{:.1}", f(r) * 100.0)).collect::<Vec<_>>().join("/")
    };
    Ok(format!("map→filter {}%, filter→map {}%", fmt(|r| r.map_filter), fmt(|r| r.filter_map)))
}

// ---------------------------------------------------------------- 5

fn refinement_cache_hits() -> Outcome {
    let suite = refinement_suite(&Config::default()).map_err(|e| e.to_string())?;
    let hit = |s: Strategy| suite.row(s).map(|r| r.cache_hit).ok_or_else(|| format!("no row for {}", s.name()));
    for s in [Strategy::Static, Strategy::Agentic] {
        let h = hit(s)?;
        ensure(h == 0.0, || format!("{} cache hit {h:.4}, expected 0", s.name()))?;
    }
    for s in [Strategy::Manual, Strategy::Assisted, Strategy::Auto] {
        let h = hit(s)?;
        ensure(h >= 0.80, || format!("{} cache hit {h:.4} < 0.80", s.name()))?;
    }
    let shown: Vec<String> = Strategy::ALL.iter().map(|s| format!("{:.3}", hit(*s).unwrap_or(f64::NAN))).collect();
    Ok(format!("cache hit static/agentic/manual/assisted/auto = {}", shown.join("/")))
}

// ---------------------------------------------------------------- 6

fn planner_optimality() -> Outcome {
    let m = CostModel::default();
    let mut checked = 0;
    for seed in 0..500u64 {
        let (p, st) = common::plan_case(seed, 4);
        if common::gen_sites(&p.nodes) > 4 {
            continue;
        }
        let plan = apply_fusion(&p, &st, &m).map_err(|e| e.to_string())?;
        let best = enumerate_plans(&p, &st, &m)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|q| estimate_cost(q, &st, &m).expect("estimable"))
            .fold(f64::INFINITY, f64::min);
        ensure(plan.estimated_cost_s <= best, || {
            format!("seed {seed}: chosen {} > best {}", plan.estimated_cost_s, best)
        })?;
        checked += 1;
    }
    Ok(format!("{checked} pipelines, chosen plan attains the enumerated minimum"))
}

// ---------------------------------------------------------------- 7

fn refinement_budget_oracle() -> Outcome {
    let m = CostModel::default();
    for seed in 0..100u64 {
        let n = (seed % 11) as usize;
        let (specs, table, budget) = common::refinement_case(seed, n);
        let plan = plan_refinements(&specs, &table, &budget, &m);
        let best = common::best_subset_gain(&specs, &table, &budget, &m);
        ensure(plan.total_gain == best, || format!("seed {seed} (n={n}): planner {} vs best {}", plan.total_gain, best))?;
    }
    Ok("100 tables with n ≤ 10, objective equals brute force".into())
}

// ---------------------------------------------------------------- 8

fn dsl_round_trip() -> Outcome {
    let mut files: Vec<PathBuf> = std::fs::read_dir(programs_dir())
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "spear"))
        .collect();
    files.sort();
    let mut pipelines = 0;
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|e| e.to_string())?;
        let ast = parse(&text).map_err(|d| format!("{}: {}", f.display(), d[0]))?;
        let again = parse(&pretty(&ast)).map_err(|d| format!("{} reprinted: {}", f.display(), d[0]))?;
        ensure(again == ast, || format!("{}: round trip changed the program", f.display()))?;
        let count = ast.pipelines().count();
        let expected = match f.file_name().and_then(|n| n.to_str()) {
            Some("table1.spear") => Some(5),
            Some("table2.spear") => Some(6),
            _ => None,
        };
        if let Some(e) = expected {
            ensure(count == e, || format!("{}: {count} pipelines, expected {e}", f.display()))?;
        }
        pipelines += count;
    }
    ensure(files.len() >= 3, || "shipped programs missing".into())?;
    Ok(format!("{} programs, {pipelines} pipelines", files.len()))
}

// ---------------------------------------------------------------- 9

fn lcp_oracle(cached: &[Vec<String>], q: &[String]) -> usize {
    cached.iter().map(|c| c.iter().zip(q).take_while(|(a, b)| a == b).count()).max().unwrap_or(0)
}

fn prefix_cache_suite() -> Outcome {
    let mut c = PrefixCache::new(10_000);
    let prompt = tokenize("Summarize the patient's medication history and highlight any use of Enoxaparin.");
    ensure(c.lookup_and_insert(&prompt, &[]).hit == 0, || "cold call hit".into())?;
    ensure(c.lookup_and_insert(&prompt, &[]).hit == prompt.len(), || "repeat is not a full hit".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let vocab = ["the", "notes", "dose", "risk", "cite", "evidence", "\n", "."];
    let mut cached: Vec<Vec<String>> = Vec::new();
    let mut c = PrefixCache::new(1_000_000);
    for i in 0..200 {
        let base: Vec<String> = match cached.choose(&mut rng) {
            Some(b) if rng.gen_bool(0.7) => b.clone(),
            _ => (0..rng.gen_range(1..20)).map(|_| vocab.choose(&mut rng).expect("nonempty").to_string()).collect(),
        };
        let mut grown = base.clone();
        grown.extend((0..rng.gen_range(0..6)).map(|_| vocab.choose(&mut rng).expect("nonempty").to_string()));
        let expected = lcp_oracle(&cached, &grown);
        let got = c.lookup_and_insert(&grown, &[]).hit;
        ensure(got == expected, || format!("query {i}: hit {got}, oracle {expected}"))?;
        cached.push(grown);
    }

    let mut c = PrefixCache::new(6);
    let (a, b, d) = (tokenize("a1 a2 a3"), tokenize("b1 b2 b3"), tokenize("d1 d2 d3"));
    c.insert(&a, &[]);
    c.insert(&b, &[]);
    ensure(c.lookup(&a).hit == 3, || "a not cached".into())?;
    c.insert(&d, &[]);
    ensure(c.lookup(&b).hit == 0, || "least recently used entry survived".into())?;
    ensure(c.lookup(&a).hit == 3 && c.lookup(&d).hit == 3, || "recent entries evicted".into())?;
    ensure(c.len() <= c.capacity(), || "capacity exceeded".into())?;
    Ok("cold, repeat, 200 append-delta queries and LRU order all match".into())
}

// ---------------------------------------------------------------- 10

/// The store left behind by running every Enoxaparin pipeline in turn.
fn example_store() -> Result<PromptStore, String> {
    let (program, _) = dsl::load_files(&[programs_dir().join("enoxaparin.spear")]).map_err(|e| e.to_string())?;
    let lowered = dsl::lower(&program).map_err(|e| e.to_string())?;
    let backend = BackendHandle::mock();
    let options = RunOptions { keep_existing: true, ..RunOptions::default() };
    let mut store = lowered.store.clone();
    for p in lowered.pipelines.values() {
        let r = run_pipeline(p, ExecState::new(store), &backend, &lowered.registry, &options).map_err(|e| e.to_string())?;
        ensure(r.succeeded(), || format!("{}: {:?}", p.name, r.error))?;
        store = r.state.store;
    }
    Ok(store)
}

fn store_integrity() -> Outcome {
    let store = example_store()?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (first, second) = (dir.path().join("a.json"), dir.path().join("b.json"));
    store.save(&first).map_err(|e| e.to_string())?;
    PromptStore::load(&first).map_err(|e| e.to_string())?.save(&second).map_err(|e| e.to_string())?;
    let (x, y) = (std::fs::read(&first).map_err(|e| e.to_string())?, std::fs::read(&second).map_err(|e| e.to_string())?);
    ensure(x == y, || "export → import → export changed the file".into())?;
    let mut n = 0;
    for e in store.entries() {
        let d = store.diff_prompts(&e.key, &e.key).map_err(|e| e.to_string())?;
        ensure(d.is_empty(), || format!("self-diff of {} is not empty", e.key))?;
        n += 1;
    }
    ensure(n > 0, || "example store is empty".into())?;
    Ok(format!("{n} entries, {} bytes round-trip identically", x.len()))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(&str, u64, fn() -> Outcome); 10] = [
        ("algebra equivalence", 60, algebra_equivalence),
        ("replay determinism", 30, replay_determinism),
        ("fusion semantics preservation", 60, fusion_semantics),
        ("selectivity gain pattern", 60, selectivity_pattern),
        ("refinement cache-hit directionality", 60, refinement_cache_hits),
        ("planner optimality oracle", 30, planner_optimality),
        ("refinement budget oracle", 30, refinement_budget_oracle),
        ("DSL round trip", 5, dsl_round_trip),
        ("prefix cache suite", 5, prefix_cache_suite),
        ("store integrity", 5, store_integrity),
    ];
    let mut failures = 0;
    for (i, (name, budget, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|detail| {
            if elapsed < Duration::from_secs(budget) {
                Ok(detail)
            } else {
                Err(format!("took {:.1} s, budget {budget} s", elapsed.as_secs_f64()))
            }
        });
        let secs = elapsed.as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.2} s < {budget} s]", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL {:>2} {name}: {why} [{secs:.2} s]", i + 1);
            }
        }
    }
    println!("{} of 10 criteria passed", 10 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
