use serde_json::json;
use spear::algebra::*;
use spear::backend::BackendHandle;
use spear::state::{CmpOp, Condition, ExecState};
use spear::store::{param, ParamMap, PromptStore, RefAction, RefineMode, ViewDef};

const MAP: &str = "Clean up and summarize the tweet in at most 5 words.\nInput: {{C.item.text}}";
const FILTER: &str = "Classify the sentiment of the tweet as positive or negative.\nInput: {{C.item.text}}";

fn state() -> ExecState {
    let mut store = PromptStore::new();
    store.create_entry("qa", "Answer the question about school.", ParamMap::new(), RefineMode::Manual).unwrap();
    store.create_entry("alt", "Explain with specific evidence.", ParamMap::new(), RefineMode::Manual).unwrap();
    store.create_entry("map", MAP, ParamMap::new(), RefineMode::Manual).unwrap();
    store.create_entry("filter", FILTER, ParamMap::new(), RefineMode::Manual).unwrap();
    store
        .define_view(ViewDef::new("tone", vec![param("style", Some("plain"))], "Write in a {{style}} tone.").unwrap())
        .unwrap();
    let mut st = ExecState::new(store);
    st.context.insert(
        "tweets".into(),
        json!([
            {"id": 0, "text": "@a great day in math class"},
            {"id": 1, "text": "@b awful day in gym class"},
            {"id": 2, "text": "@c boring day in homework https://t.co/x"},
        ]),
    );
    st
}

fn registry() -> Registry {
    let mut r = Registry::new();
    r.add_refiner(RefinerSpec::manual("cite", RefinerBody::Append("Cite the evidence.".into())));
    r.add_refiner(RefinerSpec::manual("norm", RefinerBody::Transform(Transform::Normalize)));
    r.add_refiner(RefinerSpec::manual("say", RefinerBody::Template("Say {{what}}.".into())).with_params(&["what"]));
    r.add_refiner(RefinerSpec::assisted("helper", "Rewrite the prompt.", "add a rationale"));
    r.add_source(SourceDef::inline("notes", json!(["school notes", "math notes"])));
    r
}

fn gen(label: &str, key: &str) -> Node {
    Op::Gen(GenSpec::new(label).prompt(key)).into()
}

fn low_conf() -> Condition {
    Condition::metric("confidence", CmpOp::Lt, 0.9)
}

fn run(nodes: Vec<Node>) -> RunReport {
    let report = run_pipeline(&Pipeline::new("t", nodes), state(), &BackendHandle::mock(), &registry(), &RunOptions::checked())
        .unwrap();
    assert!(report.succeeded(), "{:?}", report.error);
    report
}

/// Native and desugared execution end in byte-identical states.
fn assert_equivalent(node: Node) {
    let native = run(vec![gen("a0", "qa"), node.clone()]);
    let core = desugar(&node, &registry()).unwrap();
    assert!(core.iter().all(Node::is_core));
    let mut nodes = vec![gen("a0", "qa")];
    nodes.extend(core);
    let lowered = run(nodes);
    assert_eq!(native.state.canonical_json(), lowered.state.canonical_json(), "{node}");
}

#[test]
fn gen_writes_output_and_metrics() {
    let r = run(vec![gen("a0", "qa")]);
    assert!(r.state.context["a0"].as_str().unwrap().starts_with("ANSWER:"));
    for k in ["confidence", "confidence:a0", "latency:a0", "prompt_tokens:a0", "confidence@qa"] {
        assert!(r.state.metadata.contains_key(k), "{k}");
    }
    assert_eq!(cache_hit_rate(&r).unwrap(), 0.0);
}

#[test]
fn check_records_trigger_on_refinement() {
    let body = vec![Node::new(Op::Ref {
        action: RefAction::Append,
        refiner: RefinerRef::named("cite"),
        key: Some("qa".into()),
        overwrite: false,
    })];
    let r = run(vec![gen("a0", "qa"), Op::Check { cond: low_conf(), body, site: None, counter: None }.into()]);
    let e = r.state.store.get("qa").unwrap();
    let last = e.ref_log.last().unwrap();
    assert_eq!(last.trigger.as_deref(), Some(low_conf().to_string().as_str()));
    assert!(last.metrics_snapshot.contains_key("confidence"));
    assert!(e.text.ends_with("\nCite the evidence."));
    assert_eq!(r.state.metadata[&format!("check_fired:{}", low_conf())], 1.0);
    assert_eq!(r.events.iter().filter(|e| e.depth == 1).count(), 1);
}

#[test]
fn assisted_refiner_calls_backend() {
    let r = run(vec![Op::Ref {
        action: RefAction::Update,
        refiner: RefinerRef::named("helper"),
        key: Some("qa".into()),
        overwrite: false,
    }
    .into()]);
    let text = &r.state.store.get("qa").unwrap().text;
    assert_eq!(text, "REFINED: add a rationale | Answer the question about school.");
    assert_eq!(r.state.focus.as_deref(), Some("qa"));
}

#[test]
fn refiner_arity_is_checked() {
    let node: Node = Op::Ref {
        action: RefAction::Update,
        refiner: RefinerRef::Named { id: "say".into(), args: vec![] },
        key: Some("qa".into()),
        overwrite: false,
    }
    .into();
    let r = run_pipeline(&Pipeline::new("t", vec![node]), state(), &BackendHandle::mock(), &registry(), &RunOptions::default())
        .unwrap();
    assert!(r.error.unwrap().contains("takes 1 argument"));
    assert_eq!(r.events.len(), 1);
}

#[test]
fn unknown_agent_is_hard_failure_and_keeps_partial_events() {
    let nodes = vec![
        gen("a0", "qa"),
        Op::Delegate { agent: "nope".into(), payload: Payload::Str("x".into()), out: "o".into() }.into(),
        gen("a1", "qa"),
    ];
    let r = run_pipeline(&Pipeline::new("t", nodes), state(), &BackendHandle::mock(), &registry(), &RunOptions::default())
        .unwrap();
    assert!(!r.succeeded());
    assert_eq!(r.events.len(), 2);
    assert!(r.state.context.contains_key("a0"));
}

#[test]
fn empty_pipeline_is_rejected() {
    let e = run_pipeline(&Pipeline::new("t", vec![]), state(), &BackendHandle::mock(), &registry(), &RunOptions::default());
    assert!(matches!(e, Err(AlgebraError::EmptyPipeline(_))));
}

#[test]
fn shadow_mode_discards_prompt_writes() {
    let node: Node = Op::Expand { key: "qa".into(), text: "More.".into() }.into();
    let opts = RunOptions { shadow: true, ..Default::default() };
    let before = state();
    let r = run_pipeline(&Pipeline::new("t", vec![node]), before.clone(), &BackendHandle::mock(), &registry(), &opts).unwrap();
    assert_eq!(r.state.store, before.store);
    assert_eq!(r.trace.len(), 1);
}

#[test]
fn merge_picks_higher_confidence() {
    let r = run(vec![
        gen("a0", "qa"),
        gen("a1", "alt"),
        Op::Merge { left: "qa".into(), right: "alt".into(), into: None, policy: MergePolicy::default() }.into(),
    ]);
    let m = r.state.store.get(&merge_key("qa", "alt")).unwrap();
    let (cq, ca) = (r.state.metadata["confidence@qa"], r.state.metadata["confidence@alt"]);
    let expected = if ca > cq { "Explain with specific evidence." } else { "Answer the question about school." };
    assert_eq!(m.text, expected);
    assert_eq!(m.ref_log.last().unwrap().parents.len(), 2);
}

#[test]
fn delegate_list_payload() {
    let r = run(vec![
        gen("a0", "qa"),
        Op::Delegate {
            agent: "evidence_overlap".into(),
            payload: Payload::List(vec![Payload::Context("a0".into()), Payload::Str("question school".into())]),
            out: "overlap".into(),
        }
        .into(),
    ]);
    assert!(r.state.context["overlap"].as_f64().unwrap() > 0.0);
    assert_eq!(r.state.metadata["latency:evidence_overlap"], 0.0);
}

#[test]
fn ret_filters_by_rendered_query() {
    let r = run(vec![Op::Ret { source: "notes".into(), prompt: Some("alt".into()), params: ParamMap::new() }.into()]);
    assert_eq!(r.state.context["notes"], json!([]));
    let r = run(vec![Op::Ret { source: "notes".into(), prompt: None, params: ParamMap::new() }.into()]);
    assert_eq!(r.state.metadata["ret_items:notes"], 2.0);
}

#[test]
fn stream_filter_keeps_matching_items() {
    let r = run(vec![Op::Gen(GenSpec::new("neg").prompt("filter").over("tweets").keep("negative")).into()]);
    let kept = r.state.context["neg"].as_array().unwrap();
    assert_eq!(kept.iter().map(|t| t["id"].as_i64().unwrap()).collect::<Vec<_>>(), vec![1, 2]);
    assert!((r.state.metadata["selectivity:neg"] - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn fused_map_filter_matches_unfused_outputs() {
    let m = Node::from(Op::Gen(GenSpec::new("clean").prompt("map").over("tweets")));
    let f = Node::from(Op::Gen(GenSpec::new("neg").prompt("filter").over("clean").keep("negative")));
    let plain = run(vec![m.clone(), f.clone()]);
    let fused = run(vec![Op::Fuse { rule: FuseRule::MapFilter, body: vec![m, f] }.into()]);
    for k in ["clean", "neg"] {
        assert_eq!(plain.state.context[k], fused.state.context[k], "{k}");
    }
    assert_eq!(plain.state.metadata["selectivity:neg"], fused.state.metadata["selectivity:neg"]);
    assert_eq!(fused.trace.len(), 1);
}

#[test]
fn ref_chain_logs_one_record_with_sub_records() {
    let r = |id: &str, action| Node::from(Op::Ref { action, refiner: RefinerRef::named(id), key: Some("qa".into()), overwrite: false });
    let body = vec![r("cite", RefAction::Append), r("norm", RefAction::Update)];
    let fused = run(vec![Op::Fuse { rule: FuseRule::RefChain, body: body.clone() }.into()]);
    let plain = run(body);
    let (fe, pe) = (fused.state.store.get("qa").unwrap(), plain.state.store.get("qa").unwrap());
    assert_eq!(fe.text, pe.text);
    assert_eq!(fe.ref_log.len(), 2);
    let last = fe.ref_log.last().unwrap();
    assert_eq!(last.refiner_id, "chain:cite+norm");
    assert_eq!(last.sub_records.len(), 2);
}

#[test]
fn fuse_has_no_core_equivalent() {
    let n: Node = Op::Fuse { rule: FuseRule::Sections, body: vec![gen("a", "qa")] }.into();
    assert!(matches!(desugar(&n, &registry()), Err(AlgebraError::NotDerived(_))));
}

#[test]
fn derived_operators_match_their_core_rewrites() {
    assert_equivalent(Op::Expand { key: "qa".into(), text: "Be brief.".into() }.into());
    assert_equivalent(Op::Map { keys: vec!["qa".into(), "alt".into()], refiner: RefinerRef::named("norm") }.into());
    let mut args = ParamMap::new();
    args.insert("style".into(), "formal".into());
    assert_equivalent(Op::View { name: "tone".into(), args, key: None }.into());
    assert_equivalent(Op::Diff { left: "qa".into(), right: "alt".into() }.into());
    assert_equivalent(
        Op::Retry { op: Box::new(gen("a1", "qa")), cond: low_conf(), refiner: None, max_n: 2 }.into(),
    );
    assert_equivalent(
        Op::Retry { op: Box::new(gen("a1", "qa")), cond: low_conf(), refiner: Some(RefinerRef::named("cite")), max_n: 3 }
            .into(),
    );
    assert_equivalent(
        Op::Switch {
            arms: vec![
                SwitchArm { guard: Condition::metric("confidence", CmpOp::Gt, 2.0), body: vec![gen("x", "alt")] },
                SwitchArm { guard: low_conf(), body: vec![Op::Expand { key: "alt".into(), text: "Hm.".into() }.into()] },
            ],
            default: Some(vec![gen("y", "qa")]),
        }
        .into(),
    );
}

#[test]
fn view_materializes_escaped_text() {
    let r = run(vec![Op::View { name: "tone".into(), args: ParamMap::new(), key: Some("v".into()) }.into()]);
    assert_eq!(r.state.store.get("v").unwrap().text, "Write in a plain tone.");
}

#[test]
fn event_log_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let opts = RunOptions { log_path: Some(path.clone()), ..Default::default() };
    run_pipeline(&Pipeline::new("t", vec![gen("a", "qa")]), state(), &BackendHandle::mock(), &registry(), &opts).unwrap();
    let lines = std::fs::read_to_string(path).unwrap();
    assert_eq!(lines.lines().count(), 1);
    let ev: Event = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(ev.op, "GEN");
}
