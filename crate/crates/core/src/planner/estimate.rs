use std::collections::BTreeMap;

use super::stats::{PlanStats, PlanStatsError};
use super::CostModel;
use crate::algebra::{FuseRule, GenSpec, Node, Op, Pipeline, RefinerRef};

/// Expected number of items in each context stream produced so far.
pub(crate) type Streams = BTreeMap<String, f64>;

/// Expected latency in seconds of running `pipeline` once.
///
/// Per-item stages cost one call per input item: Map→Filter costs
/// `n·(c(map) + c(filter))`, Filter→Map `n·c(filter) + s·n·c(map)` and a fused
/// pair `n·c(fused)`. A CHECK body is weighted by `check_fire_prob`. REF costs
/// the stats of site `refine:<id>` when present and nothing otherwise.
pub fn estimate_cost(pipeline: &Pipeline, stats: &PlanStats, model: &CostModel) -> Result<f64, PlanStatsError> {
    chain_cost(&pipeline.nodes, stats, model, &mut Streams::new())
}

pub(crate) fn chain_cost(nodes: &[Node], stats: &PlanStats, model: &CostModel, streams: &mut Streams) -> Result<f64, PlanStatsError> {
    let mut total = 0.0;
    for n in nodes {
        match &n.op {
            // A fused refinement chain costs exactly its parts, summed as if unfused.
            Op::Fuse { rule: FuseRule::RefChain, body } => {
                for b in body {
                    total += node_cost(b, stats, model, streams)?;
                }
            }
            _ => total += node_cost(n, stats, model, streams)?,
        }
    }
    Ok(total)
}

fn count(streams: &Streams, stats: &PlanStats, key: &str) -> f64 {
    streams.get(key).copied().unwrap_or(stats.n_items)
}

fn gen_cost(g: &GenSpec, stats: &PlanStats, model: &CostModel, streams: &mut Streams) -> Result<f64, PlanStatsError> {
    let per_call = stats.op(&g.label)?.cost(model);
    Ok(match &g.over {
        None => per_call,
        Some(s) => {
            let n = count(streams, stats, s);
            let out = if g.keep.is_some() { n * stats.selectivity(&g.label) } else { n };
            streams.insert(g.label.clone(), out);
            n * per_call
        }
    })
}

fn ref_cost(refiner: &RefinerRef, stats: &PlanStats, model: &CostModel) -> f64 {
    match refiner {
        RefinerRef::Named { id, .. } => stats.sites.get(&format!("refine:{id}")).map_or(0.0, |s| s.op.cost(model)),
        _ => 0.0,
    }
}

/// Cost of one node given the stream sizes before it; updates `streams`.
pub(crate) fn node_cost(node: &Node, stats: &PlanStats, model: &CostModel, streams: &mut Streams) -> Result<f64, PlanStatsError> {
    let p = stats.check_fire_prob;
    Ok(match &node.op {
        Op::Gen(g) => gen_cost(g, stats, model, streams)?,
        Op::Ref { refiner, .. } => ref_cost(refiner, stats, model),
        Op::Map { keys, refiner } => keys.len() as f64 * ref_cost(refiner, stats, model),
        Op::Check { body, .. } => p * chain_cost(body, stats, model, &mut streams.clone())?,
        Op::Retry { op, refiner, max_n, .. } => {
            let once = node_cost(op, stats, model, streams)?;
            let r = refiner.as_ref().map_or(0.0, |r| ref_cost(r, stats, model));
            once + *max_n as f64 * p * (r + once)
        }
        Op::Switch { arms, default } => {
            let mut total = 0.0;
            let mut none_yet = 1.0;
            for arm in arms {
                total += none_yet * p * chain_cost(&arm.body, stats, model, &mut streams.clone())?;
                none_yet *= 1.0 - p;
            }
            if let Some(d) = default {
                total += none_yet * chain_cost(d, stats, model, &mut streams.clone())?;
            }
            total
        }
        Op::Fuse { rule, body } => fuse_cost(*rule, body, stats, model, streams)?,
        Op::Ret { .. } | Op::Merge { .. } | Op::Delegate { .. } | Op::Expand { .. } | Op::View { .. } | Op::Diff { .. } => {
            0.0
        }
    })
}

fn fuse_cost(rule: FuseRule, body: &[Node], stats: &PlanStats, model: &CostModel, streams: &mut Streams) -> Result<f64, PlanStatsError> {
    let gens: Vec<&GenSpec> = body
        .iter()
        .filter_map(|n| match &n.op {
            Op::Gen(g) => Some(g),
            _ => None,
        })
        .collect();
    Ok(match (rule, gens.as_slice()) {
        (FuseRule::MapFilter | FuseRule::FilterMap, [a, b]) => {
            let n = a.over.as_deref().map_or(1.0, |s| count(streams, stats, s));
            let per_call = stats.fused_pair(&a.label, &b.label)?.cost(model);
            if rule == FuseRule::MapFilter {
                streams.insert(a.label.clone(), n);
                streams.insert(b.label.clone(), n * stats.selectivity(&b.label));
            } else {
                let kept = n * stats.selectivity(&a.label);
                streams.insert(a.label.clone(), kept);
                streams.insert(b.label.clone(), kept);
            }
            n * per_call
        }
        (FuseRule::Sections, _) => {
            let labels: Vec<&str> = gens.iter().map(|g| g.label.as_str()).collect();
            stats.sections(&labels)?.cost(model)
        }
        // Chained refinements keep their calls; a malformed body costs its parts.
        _ => chain_cost(body, stats, model, streams)?,
    })
}
