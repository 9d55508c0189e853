mod common;

use proptest::prelude::*;
use spear::algebra::{FuseRule, GenSpec, Node, Op, Pipeline, RefinerRef, RefinerSpec, RefinerBody};
use spear::meta::{RefinerStats, StatsTable};
use spear::planner::*;
use spear::state::{CmpOp, Condition};
use spear::store::{param, ParamMap, RefAction, RefineMode, ViewDef};

fn model() -> CostModel {
    CostModel::default()
}

fn pair(map_first: bool) -> Pipeline {
    let nodes: Vec<Node> = if map_first {
        vec![
            Op::Gen(GenSpec::new("m").prompt("pm").over("t")).into(),
            Op::Gen(GenSpec::new("f").prompt("pf").over("m").keep("negative")).into(),
        ]
    } else {
        vec![
            Op::Gen(GenSpec::new("f").prompt("pf").over("t").keep("negative")).into(),
            Op::Gen(GenSpec::new("m").prompt("pm").over("f")).into(),
        ]
    };
    Pipeline::new("p", nodes)
}

fn stats(s: f64) -> PlanStats {
    PlanStats { n_items: 100.0, ..PlanStats::default() }
        .with_site("m", OpStats::new(26.0, 15.0, 5.0))
        .with_site("f", OpStats::new(25.0, 14.0, 1.0))
        .with_selectivity("f", s)
}

#[test]
fn sequential_costs_follow_the_per_item_formulas() {
    let m = model();
    let st = stats(0.3);
    let (cm, cf) = (st.op("m").unwrap().cost(&m), st.op("f").unwrap().cost(&m));
    let mf = estimate_cost(&pair(true), &st, &m).unwrap();
    let fm = estimate_cost(&pair(false), &st, &m).unwrap();
    assert!((mf - 100.0 * (cm + cf)).abs() < 1e-9);
    assert!((fm - 100.0 * (cf + 0.3 * cm)).abs() < 1e-9);
}

#[test]
fn symmetric_costs_agree_at_full_selectivity() {
    let st = PlanStats { n_items: 10.0, ..PlanStats::default() }
        .with_site("m", OpStats::new(20.0, 5.0, 3.0))
        .with_site("f", OpStats::new(20.0, 5.0, 3.0))
        .with_selectivity("f", 1.0);
    let a = estimate_cost(&pair(true), &st, &model()).unwrap();
    let b = estimate_cost(&pair(false), &st, &model()).unwrap();
    assert!((a - b).abs() < 1e-9);
}

#[test]
fn missing_stats_are_an_error_only_without_defaults() {
    let st = PlanStats { use_defaults: false, ..PlanStats::default() };
    assert!(matches!(estimate_cost(&pair(true), &st, &model()), Err(PlanStatsError::MissingStats(_))));
    assert!(estimate_cost(&pair(true), &PlanStats::default(), &model()).is_ok());
}

#[test]
fn map_filter_fuses_at_every_selectivity() {
    for s in SELECTIVITIES {
        let plan = apply_fusion(&pair(true), &stats(s), &model()).unwrap();
        assert!(matches!(plan.pipeline.nodes[0].op, Op::Fuse { rule: FuseRule::MapFilter, .. }), "s={s}");
        assert_eq!(plan.rewrites[0].rule, MAP_FILTER_FUSE);
        assert!(plan.rewrites[0].gain_s > 0.0);
    }
}

#[test]
fn filter_map_fusion_is_selectivity_aware() {
    let low = apply_fusion(&pair(false), &stats(0.1), &model()).unwrap();
    assert_eq!(low.pipeline, pair(false));
    assert!(low.rewrites.is_empty());
    let high = apply_fusion(&pair(false), &stats(1.0), &model()).unwrap();
    assert_eq!(high.rewrites[0].rule, FILTER_MAP_FUSE);
}

#[test]
fn gens_on_different_views_separated_by_check_stay_put() {
    let g = |l: &str, v: &str| Node::from(Op::Gen(GenSpec::new(l).prompt(format!("view:{v}:0"))));
    let check = Op::Check {
        cond: Condition::metric("confidence", CmpOp::Lt, 0.5),
        body: vec![Op::Expand { key: "k".into(), text: "x".into() }.into()],
        site: None,
        counter: None,
    };
    let p = Pipeline::new("p", vec![g("a", "x"), check.into(), g("b", "y")]);
    let plan = apply_fusion(&p, &PlanStats::default(), &model()).unwrap();
    assert_eq!(plan.pipeline, p);
}

#[test]
fn same_view_gens_fuse_into_sections() {
    let g = |l: &str| Node::from(Op::Gen(GenSpec::new(l).prompt("view:notes:0")));
    let p = Pipeline::new("p", vec![g("a"), g("b"), g("c")]);
    let slow = CostModel { base_latency_s: 1.0, ..model() };
    let plan = apply_fusion(&p, &PlanStats::default(), &slow).unwrap();
    assert_eq!(plan.pipeline.nodes.len(), 1);
    assert_eq!(plan.rewrites[0].rule, GEN_GEN_FUSE);
    assert_eq!(plan.rewrites[0].site, "a+b+c");
    // Section markers outweigh one saved call at the default base latency.
    assert!(apply_fusion(&p, &PlanStats::default(), &model()).unwrap().rewrites.is_empty());
}

#[test]
fn ref_chains_on_one_key_fuse() {
    let r = |id: &str| Node::from(Op::Ref { action: RefAction::Append, refiner: RefinerRef::named(id), key: Some("k".into()), overwrite: false });
    let p = Pipeline::new("p", vec![r("a"), r("b")]);
    let plan = apply_fusion(&p, &PlanStats::default(), &model()).unwrap();
    assert!(matches!(plan.pipeline.nodes[0].op, Op::Fuse { rule: FuseRule::RefChain, .. }));
    assert_eq!(plan.rewrites[0].gain_s, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fusion_plan_is_optimal_among_reachable_plans(seed in any::<u64>()) {
        let (p, st) = common::plan_case(seed, 4);
        let m = model();
        let plan = apply_fusion(&p, &st, &m).unwrap();
        let best = enumerate_plans(&p, &st, &m)
            .unwrap()
            .iter()
            .map(|q| estimate_cost(q, &st, &m).unwrap())
            .fold(f64::INFINITY, f64::min);
        prop_assert!(plan.estimated_cost_s <= best, "{} > {}", plan.estimated_cost_s, best);
        prop_assert!(plan.estimated_cost_s <= estimate_cost(&p, &st, &m).unwrap() + 1e-9);
    }

    #[test]
    fn filter_map_gain_is_monotone_in_selectivity(a in 0.0..1.0f64, b in 0.0..1.0f64, base in 0.0..1.0f64, u in 0.0..0.01f64, r in 0.0..1.0f64) {
        let m = CostModel { base_latency_s: base, uncached_prompt_token_cost_s: u, cached_prompt_token_cost_s: u * r, completion_token_cost_s: 0.02 };
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let gain = |s: f64| {
            let st = stats(s);
            let fused = Pipeline::new("f", vec![Op::Fuse { rule: FuseRule::FilterMap, body: pair(false).nodes }.into()]);
            1.0 - estimate_cost(&fused, &st, &m).unwrap() / estimate_cost(&pair(false), &st, &m).unwrap()
        };
        prop_assert!(gain(lo) <= gain(hi) + 1e-12);
    }

    #[test]
    fn refinement_plan_matches_best_subset(seed in any::<u64>(), n in 0usize..=10) {
        let (specs, table, budget) = common::refinement_case(seed, n);
        let m = model();
        let plan = plan_refinements(&specs, &table, &budget, &m);
        prop_assert!(plan.total_tokens <= budget.max_tokens && plan.total_latency_s <= budget.max_latency_s || plan.order.is_empty());
        let best = common::best_subset_gain(&specs, &table, &budget, &m);
        prop_assert_eq!(plan.total_gain, best);
    }
}

fn row(id: &str, gain: f64, tokens: f64) -> RefinerStats {
    RefinerStats {
        refiner_id: id.into(),
        mode: RefineMode::Manual,
        n_applied: 3,
        mean_confidence_delta: gain,
        mean_token_delta: tokens,
        retry_follow_rate: 0.0,
    }
}

#[test]
fn cheaper_of_equal_refiners_comes_first() {
    let specs = vec![
        RefinerSpec::manual("a_costly", RefinerBody::Text("x".into())),
        RefinerSpec::manual("b_cheap", RefinerBody::Text("y".into())),
    ];
    let table = StatsTable { rows: vec![row("a_costly", 0.1, 30.0), row("b_cheap", 0.1, 5.0)], ..Default::default() };
    let plan = plan_refinements(&specs, &table, &Budget { max_tokens: 100.0, max_latency_s: 10.0 }, &model());
    assert_eq!(plan.order, vec!["b_cheap", "a_costly"]);
    let tight = plan_refinements(&specs, &table, &Budget { max_tokens: 1.0, max_latency_s: 10.0 }, &model());
    assert!(tight.order.is_empty());
    let empty = plan_refinements(&specs, &table, &Budget { max_tokens: 0.0, max_latency_s: 0.0 }, &model());
    assert!(empty.order.is_empty());
}

fn view(name: &str, tags: &[&str], body: &str) -> ViewDef {
    ViewDef::new(name, vec![param("patient", Some("the patient"))], body).unwrap().with_tags(tags.iter().copied())
}

#[test]
fn view_selection_prefers_matching_then_cheaper_then_name() {
    let views = vec![
        view("discharge_summary", &["discharge"], "Summarize the discharge of {{patient}} emphasizing medications."),
        view("radiology_report", &["radiology"], "Read the imaging."),
        view("nursing_note", &["nursing"], "Note."),
    ];
    assert_eq!(select_view(&["discharge"], &views, &ParamMap::new()).unwrap().name, "discharge_summary");
    assert!(matches!(select_view(&["billing"], &views, &ParamMap::new()), Err(ViewSelectError::NoCandidateView(_))));
    let tie = vec![view("zeta", &["t"], "Same size."), view("alpha", &["t"], "Same size.")];
    assert_eq!(select_view(&["t"], &tie, &ParamMap::new()).unwrap().name, "alpha");
    let pick = vec![view("long", &["t"], "A much longer body with many words."), view("short", &["t"], "Short.")];
    assert_eq!(select_view(&["t"], &pick, &ParamMap::new()).unwrap().name, "short");
}

#[test]
fn degenerate_caching_is_flagged() {
    let table = GainTable {
        rows: SELECTIVITIES
            .iter()
            .map(|&s| {
                let m = CostModel { cached_prompt_token_cost_s: 0.0085, ..CostModel::default() };
                let st = stats(s);
                let g = |p: &Pipeline, rule| {
                    let fused = Pipeline::new("f", vec![Op::Fuse { rule, body: p.nodes.clone() }.into()]);
                    1.0 - estimate_cost(&fused, &st, &m).unwrap() / estimate_cost(p, &st, &m).unwrap()
                };
                GainRow { selectivity: s, map_filter: g(&pair(true), FuseRule::MapFilter), filter_map: g(&pair(false), FuseRule::FilterMap) }
            })
            .collect(),
    };
    assert!(!check_gain_table(&table).is_empty());
}
