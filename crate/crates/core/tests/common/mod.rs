//! Random case generators shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spear::algebra::{GenSpec, Node, Op, Pipeline, RefinerRef, RefinerSpec, RefinerBody};
use spear::meta::{RefinerStats, StatsTable};
use spear::planner::{Budget, CostModel, OpStats, PlanStats, RefinementCost};
use spear::state::{CmpOp, Condition};
use spear::store::{RefAction, RefineMode};

fn op_stats(rng: &mut ChaCha8Rng) -> OpStats {
    let prompt = rng.gen_range(5.0..300.0_f64).round();
    let cached = (prompt * rng.gen_range(0.0..1.0_f64)).round();
    OpStats::new(prompt, cached, rng.gen_range(1.0..40.0_f64).round())
}

/// A pipeline with at most `max_gens` GEN sites built from fusable patterns,
/// plus statistics for every site.
pub fn plan_case(seed: u64, max_gens: usize) -> (Pipeline, PlanStats) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = PlanStats { n_items: rng.gen_range(1..500) as f64, ..PlanStats::default() };
    stats.check_fire_prob = rng.gen_range(0.0..1.0);
    let mut gens = 0;
    let mut next = 0;
    let mut label = |prefix: &str| {
        next += 1;
        format!("{prefix}{next}")
    };
    let mut chain = |rng: &mut ChaCha8Rng, stats: &mut PlanStats, gens: &mut usize, budget: usize| -> Vec<Node> {
        let mut nodes = Vec::new();
        for _ in 0..rng.gen_range(1..5) {
            match rng.gen_range(0..5) {
                0 | 1 if *gens + 2 <= budget => {
                    let (a, b) = (label("s"), label("s"));
                    let stream = if rng.gen_bool(0.5) { "items".to_string() } else { label("c") };
                    let map_first = rng.gen_bool(0.5);
                    let (ga, gb) = if map_first {
                        (GenSpec::new(&a).prompt("pm").over(&stream), GenSpec::new(&b).prompt("pf").over(&a).keep("negative"))
                    } else {
                        (GenSpec::new(&a).prompt("pf").over(&stream).keep("negative"), GenSpec::new(&b).prompt("pm").over(&a))
                    };
                    for l in [&a, &b] {
                        *stats = std::mem::take(stats).with_site(l.clone(), op_stats(rng));
                    }
                    let filter = if map_first { &b } else { &a };
                    *stats = std::mem::take(stats).with_selectivity(filter.clone(), rng.gen_range(0.0..=1.0));
                    if rng.gen_bool(0.3) {
                        let fused = OpStats::fused_pair(&stats.op(&a).unwrap(), &stats.op(&b).unwrap());
                        *stats = std::mem::take(stats).with_site(format!("{a}+{b}"), fused);
                    }
                    nodes.push(Op::Gen(ga).into());
                    nodes.push(Op::Gen(gb).into());
                    *gens += 2;
                }
                2 if *gens < budget => {
                    let l = label("g");
                    let view = ["a", "b"].choose(rng).unwrap();
                    *stats = std::mem::take(stats).with_site(l.clone(), op_stats(rng));
                    nodes.push(Op::Gen(GenSpec::new(l).prompt(format!("view:{view}:0"))).into());
                    *gens += 1;
                }
                3 => {
                    let key = ["k0", "k1"].choose(rng).unwrap().to_string();
                    let action = if rng.gen_bool(0.5) { RefAction::Append } else { RefAction::Update };
                    let id = ["r0", "r1", "r2"].choose(rng).unwrap().to_string();
                    if rng.gen_bool(0.5) {
                        *stats = std::mem::take(stats).with_site(format!("refine:{id}"), op_stats(rng));
                    }
                    nodes.push(
                        Op::Ref { action, refiner: RefinerRef::named(id), key: Some(key), overwrite: false }.into(),
                    );
                }
                _ => {}
            }
        }
        nodes
    };
    let mut nodes = chain(&mut rng, &mut stats, &mut gens, max_gens);
    if gens < max_gens && rng.gen_bool(0.5) {
        let body = chain(&mut rng, &mut stats, &mut gens, max_gens);
        if !body.is_empty() {
            let cond = Condition::metric("confidence", CmpOp::Lt, 0.7);
            nodes.insert(rng.gen_range(0..=nodes.len()), Op::Check { cond, body, site: None, counter: None }.into());
        }
    }
    if nodes.is_empty() {
        nodes.push(Op::Gen(GenSpec::new("only").prompt("p")).into());
    }
    (Pipeline::new(format!("case{seed}"), nodes), stats)
}

pub fn gen_sites(nodes: &[Node]) -> usize {
    nodes
        .iter()
        .map(|n| match &n.op {
            Op::Gen(_) => 1,
            Op::Check { body, .. } => gen_sites(body),
            Op::Fuse { body, .. } => gen_sites(body),
            _ => 0,
        })
        .sum()
}

/// Candidates, their measured statistics and a budget.
pub fn refinement_case(seed: u64, n: usize) -> (Vec<RefinerSpec>, StatsTable, Budget) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::new();
    let mut rows = Vec::new();
    for i in 0..n {
        let id = format!("f{i}");
        let mode = *[RefineMode::Manual, RefineMode::Assisted, RefineMode::Auto].choose(&mut rng).unwrap();
        let mut spec = RefinerSpec::manual(&id, RefinerBody::Text("x".into()));
        spec.mode = mode;
        specs.push(spec);
        if rng.gen_bool(0.9) {
            rows.push(RefinerStats {
                refiner_id: id,
                mode,
                n_applied: rng.gen_range(1..10),
                mean_confidence_delta: rng.gen_range(-0.1..0.4),
                mean_token_delta: rng.gen_range(-5.0..60.0),
                retry_follow_rate: 0.0,
            });
        }
    }
    let budget = Budget { max_tokens: rng.gen_range(0.0..200.0), max_latency_s: rng.gen_range(0.0..1.5) };
    (specs, StatsTable { rows, ..Default::default() }, budget)
}

/// Best total gain over every subset that fits the budget.
pub fn best_subset_gain(specs: &[RefinerSpec], stats: &StatsTable, budget: &Budget, model: &CostModel) -> f64 {
    let items: Vec<(f64, RefinementCost)> = specs
        .iter()
        .filter_map(|s| {
            let r = stats.get(&s.id)?;
            (r.mean_confidence_delta > 0.0)
                .then(|| (r.mean_confidence_delta, RefinementCost::estimate(s.mode, r.mean_token_delta, model)))
        })
        .collect();
    if budget.max_tokens <= 0.0 && budget.max_latency_s <= 0.0 {
        return 0.0;
    }
    let mut best = 0.0_f64;
    for mask in 0u32..(1 << items.len()) {
        let (mut g, mut t, mut l) = (0.0, 0.0, 0.0);
        for (i, (gain, cost)) in items.iter().enumerate() {
            if mask & (1 << i) != 0 {
                g += gain;
                t += cost.tokens;
                l += cost.latency_s;
            }
        }
        if t <= budget.max_tokens && l <= budget.max_latency_s {
            best = best.max(g);
        }
    }
    best
}
