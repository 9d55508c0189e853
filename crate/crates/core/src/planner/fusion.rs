use serde::{Deserialize, Serialize};

use super::estimate::{chain_cost, node_cost, Streams};
use super::stats::{PlanStats, PlanStatsError};
use super::{AppliedRewrite, CostModel};
use crate::algebra::{FuseRule, GenSpec, Node, Op, Pipeline, SwitchArm};
use crate::store::RefAction;

/// A rewritten pipeline and the rewrites that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub pipeline: Pipeline,
    pub rewrites: Vec<AppliedRewrite>,
    pub estimated_cost_s: f64,
}

pub const MAP_FILTER_FUSE: &str = "map_filter_fuse";
pub const FILTER_MAP_FUSE: &str = "filter_map_fuse";
pub const GEN_GEN_FUSE: &str = "gen_gen_fuse";
pub const REF_CHAIN_FUSE: &str = "ref_chain_fuse";

fn as_gen(n: &Node) -> Option<&GenSpec> {
    match &n.op {
        Op::Gen(g) => Some(g),
        _ => None,
    }
}

/// View a GEN renders: from the stats, else from a `view:<name>:` prompt key.
fn base_view<'a>(g: &'a GenSpec, stats: &'a PlanStats) -> Option<&'a str> {
    stats
        .base_view(&g.label)
        .or_else(|| g.prompt.as_deref().and_then(|k| k.strip_prefix("view:")).and_then(|r| r.split(':').next()))
}

/// A fused replacement for `len` nodes starting at some position.
struct Fusion {
    node: Node,
    len: usize,
    rewrite: AppliedRewrite,
    cost: f64,
}

/// Every fusion whose side conditions hold at position `i`.
fn fusions(nodes: &[Node], i: usize, stats: &PlanStats, model: &CostModel, before: &Streams) -> Result<Vec<Fusion>, PlanStatsError> {
    let mut out = Vec::new();
    let mut consider = |rule: &str, fuse: FuseRule, len: usize, site: String, strict: bool| -> Result<(), PlanStatsError> {
        let body = nodes[i..i + len].to_vec();
        let plain = chain_cost(&body, stats, model, &mut before.clone())?;
        let node = Node::new(Op::Fuse { rule: fuse, body });
        let cost = node_cost(&node, stats, model, &mut before.clone())?;
        let gain = plain - cost;
        let admit = if strict { gain > tolerance(plain) } else { gain >= -tolerance(plain) };
        if admit {
            out.push(Fusion { node, len, rewrite: AppliedRewrite { rule: rule.into(), site, gain_s: gain.max(0.0) }, cost });
        }
        Ok(())
    };
    if let (Some(a), Some(b)) = (as_gen(&nodes[i]), nodes.get(i + 1).and_then(as_gen)) {
        let chained = a.over.is_some() && b.over.as_deref() == Some(a.label.as_str());
        let site = format!("{}+{}", a.label, b.label);
        if chained && a.keep.is_none() && b.keep.is_some() {
            consider(MAP_FILTER_FUSE, FuseRule::MapFilter, 2, site.clone(), true)?;
        }
        if chained && a.keep.is_some() && b.keep.is_none() {
            consider(FILTER_MAP_FUSE, FuseRule::FilterMap, 2, site, true)?;
        }
    }
    if let Some(view) = as_gen(&nodes[i]).filter(|g| g.over.is_none()).and_then(|g| base_view(g, stats)) {
        let mut j = i + 1;
        while nodes.get(j).and_then(as_gen).is_some_and(|g| g.over.is_none() && base_view(g, stats) == Some(view)) {
            j += 1;
            let labels: Vec<&str> = nodes[i..j].iter().filter_map(as_gen).map(|g| g.label.as_str()).collect();
            consider(GEN_GEN_FUSE, FuseRule::Sections, j - i, labels.join("+"), true)?;
        }
    }
    if let Op::Ref { action, key: Some(key), .. } = &nodes[i].op {
        if *action != RefAction::Create {
            let mut j = i + 1;
            while matches!(&nodes.get(j).map(|n| &n.op), Some(Op::Ref { action, key: Some(k), .. }) if *action != RefAction::Create && k == key)
            {
                j += 1;
                consider(REF_CHAIN_FUSE, FuseRule::RefChain, j - i, format!("ref:{key}"), false)?;
            }
        }
    }
    Ok(out)
}

fn tolerance(scale: f64) -> f64 {
    1e-9 * scale.abs().max(1.0)
}

/// Stream sizes before each node of the chain; rewrites never change them.
fn stream_states(nodes: &[Node], stats: &PlanStats, model: &CostModel) -> Result<Vec<Streams>, PlanStatsError> {
    let mut s = Streams::new();
    let mut out = Vec::with_capacity(nodes.len() + 1);
    for n in nodes {
        out.push(s.clone());
        node_cost(n, stats, model, &mut s)?;
    }
    out.push(s);
    Ok(out)
}

/// Rewrites nested chains of a single node.
fn optimize_node(node: &Node, stats: &PlanStats, model: &CostModel, log: &mut Vec<AppliedRewrite>) -> Result<Node, PlanStatsError> {
    let op = match &node.op {
        Op::Check { cond, body, site, counter } => Op::Check {
            cond: cond.clone(),
            body: optimize_chain(body, stats, model, log)?,
            site: site.clone(),
            counter: counter.clone(),
        },
        Op::Switch { arms, default } => Op::Switch {
            arms: arms
                .iter()
                .map(|a| Ok(SwitchArm { guard: a.guard.clone(), body: optimize_chain(&a.body, stats, model, log)? }))
                .collect::<Result<_, PlanStatsError>>()?,
            default: default.as_ref().map(|d| optimize_chain(d, stats, model, log)).transpose()?,
        },
        other => other.clone(),
    };
    Ok(Node { op, span: node.span.clone() })
}

/// Minimum-cost segmentation of a chain by dynamic programming. Segment costs
/// depend only on the stream sizes at their start, which fusion preserves, so
/// the optimum is exact. Ties go to the segmentation that fuses more nodes.
fn optimize_chain(nodes: &[Node], stats: &PlanStats, model: &CostModel, log: &mut Vec<AppliedRewrite>) -> Result<Vec<Node>, PlanStatsError> {
    let states = stream_states(nodes, stats, model)?;
    let n = nodes.len();
    // best[i] = (cost of nodes[i..], chosen node, its length, rewrites inside it)
    let mut best: Vec<Option<(f64, Node, usize, Vec<AppliedRewrite>)>> = vec![None; n + 1];
    let rest = |best: &Vec<Option<(f64, Node, usize, Vec<AppliedRewrite>)>>, j: usize| best[j].as_ref().map_or(0.0, |b| b.0);
    for i in (0..n).rev() {
        let mut inner = Vec::new();
        let single = optimize_node(&nodes[i], stats, model, &mut inner)?;
        let c = node_cost(&single, stats, model, &mut states[i].clone())? + rest(&best, i + 1);
        let mut choice = (c, single, 1, inner);
        for f in fusions(nodes, i, stats, model, &states[i])? {
            let c = f.cost + rest(&best, i + f.len);
            let tol = tolerance(choice.0);
            if c < choice.0 - tol || (c <= choice.0 + tol && f.len > choice.2) {
                choice = (c, f.node, f.len, vec![f.rewrite]);
            }
        }
        best[i] = Some(choice);
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let (_, node, len, rewrites) = best[i].clone().expect("filled");
        log.extend(rewrites);
        out.push(node);
        i += len;
    }
    Ok(out)
}

/// Applies the cheapest combination of fusion rewrites.
///
/// Map→Filter, Filter→Map and same-view GEN fusions apply only when they cut
/// the estimated cost; REF chains on one key fuse whenever they do not raise it.
pub fn apply_fusion(pipeline: &Pipeline, stats: &PlanStats, model: &CostModel) -> Result<Plan, PlanStatsError> {
    let mut rewrites = Vec::new();
    let nodes = optimize_chain(&pipeline.nodes, stats, model, &mut rewrites)?;
    let pipeline = Pipeline { name: pipeline.name.clone(), nodes, span: pipeline.span.clone() };
    let estimated_cost_s = super::estimate_cost(&pipeline, stats, model)?;
    Ok(Plan { pipeline, rewrites, estimated_cost_s })
}

fn node_variants(node: &Node, stats: &PlanStats, model: &CostModel) -> Result<Vec<Node>, PlanStatsError> {
    Ok(match &node.op {
        Op::Check { cond, body, site, counter } => chain_variants(body, stats, model)?
            .into_iter()
            .map(|b| {
                Node::new(Op::Check { cond: cond.clone(), body: b, site: site.clone(), counter: counter.clone() })
            })
            .collect(),
        Op::Switch { arms, default } => {
            let mut acc: Vec<Vec<SwitchArm>> = vec![Vec::new()];
            for a in arms {
                let vs = chain_variants(&a.body, stats, model)?;
                acc = acc
                    .into_iter()
                    .flat_map(|prefix| {
                        vs.iter().map(move |b| {
                            let mut p = prefix.clone();
                            p.push(SwitchArm { guard: a.guard.clone(), body: b.clone() });
                            p
                        })
                    })
                    .collect();
            }
            let defaults: Vec<Option<Vec<Node>>> = match default {
                Some(d) => chain_variants(d, stats, model)?.into_iter().map(Some).collect(),
                None => vec![None],
            };
            acc.into_iter()
                .flat_map(|arms| defaults.iter().map(move |d| Node::new(Op::Switch { arms: arms.clone(), default: d.clone() })))
                .collect()
        }
        _ => vec![node.clone()],
    })
}

fn chain_variants(nodes: &[Node], stats: &PlanStats, model: &CostModel) -> Result<Vec<Vec<Node>>, PlanStatsError> {
    let states = stream_states(nodes, stats, model)?;
    // tails[i] = every rewrite of nodes[i..]
    let mut tails: Vec<Vec<Vec<Node>>> = vec![Vec::new(); nodes.len() + 1];
    tails[nodes.len()] = vec![Vec::new()];
    for i in (0..nodes.len()).rev() {
        let mut heads: Vec<(Node, usize)> = node_variants(&nodes[i], stats, model)?.into_iter().map(|n| (n, 1)).collect();
        heads.extend(fusions(nodes, i, stats, model, &states[i])?.into_iter().map(|f| (f.node, f.len)));
        let mut all = Vec::new();
        for (head, len) in heads {
            for tail in &tails[i + len] {
                let mut v = vec![head.clone()];
                v.extend(tail.iter().cloned());
                all.push(v);
            }
        }
        tails[i] = all;
    }
    Ok(std::mem::take(&mut tails[0]))
}

/// Every plan reachable by applying admissible rewrites, the identity included.
/// Exponential; meant as an oracle for small pipelines.
pub fn enumerate_plans(pipeline: &Pipeline, stats: &PlanStats, model: &CostModel) -> Result<Vec<Pipeline>, PlanStatsError> {
    Ok(chain_variants(&pipeline.nodes, stats, model)?
        .into_iter()
        .map(|nodes| Pipeline { name: pipeline.name.clone(), nodes, span: pipeline.span.clone() })
        .collect())
}
