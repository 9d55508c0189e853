//! Rewrites derived operators into the six core operators.
//!
//! Invariant: running `desugar_all(nodes)` yields the same final state as
//! running `nodes` natively, given the same backend responses.

use super::ast::{Node, Op, Payload, Pipeline, RefinerRef};
use super::exec::{diff_key, retry_action, retry_label, retry_prompt_key, switch_guard, switch_id, view_key};
use super::registry::{Registry, DEFAULT_RETRY_REFINER, DIFF_AGENT};
use super::AlgebraError;
use crate::store::RefAction;

fn reference(action: RefAction, refiner: RefinerRef, key: Option<String>, overwrite: bool) -> Node {
    Node::new(Op::Ref { action, refiner, key, overwrite })
}

fn check(cond: crate::state::Condition, body: Vec<Node>, site: String, counter: Option<String>) -> Node {
    Node::new(Op::Check { cond, body, site: Some(site), counter })
}

/// Rewrites one node into core operators, recursing into nested chains.
pub fn desugar(node: &Node, reg: &Registry) -> Result<Vec<Node>, AlgebraError> {
    Ok(match &node.op {
        Op::Ret { .. } | Op::Gen(_) | Op::Ref { .. } | Op::Merge { .. } | Op::Delegate { .. } => vec![node.clone()],
        Op::Check { cond, body, site, counter } => vec![Node::new(Op::Check {
            cond: cond.clone(),
            body: desugar_all(body, reg)?,
            site: site.clone(),
            counter: counter.clone(),
        })],
        Op::Expand { key, text } => {
            vec![reference(RefAction::Append, RefinerRef::Literal(text.clone()), Some(key.clone()), false)]
        }
        Op::Map { keys, refiner } => {
            keys.iter().map(|k| reference(RefAction::Update, refiner.clone(), Some(k.clone()), false)).collect()
        }
        Op::View { name, args, key } => {
            let key = key.clone().unwrap_or_else(|| view_key(name, args));
            vec![reference(
                RefAction::Create,
                RefinerRef::View { name: name.clone(), args: args.clone() },
                Some(key),
                true,
            )]
        }
        Op::Diff { left, right } => vec![Node::new(Op::Delegate {
            agent: DIFF_AGENT.into(),
            payload: Payload::List(vec![Payload::Prompt(left.clone()), Payload::Prompt(right.clone())]),
            out: diff_key(left, right),
        })],
        Op::Retry { op, cond, refiner, max_n } => {
            let inner = desugar(op, reg)?;
            let refiner = refiner.clone().unwrap_or_else(|| RefinerRef::named(DEFAULT_RETRY_REFINER));
            let action = retry_action(reg, &refiner);
            let label = retry_label(op);
            let key = retry_prompt_key(op);
            let mut out = inner.clone();
            for i in 0..*max_n {
                let mut body = vec![reference(action, refiner.clone(), key.clone(), false)];
                body.extend(inner.iter().cloned());
                out.push(check(cond.clone(), body, format!("retry:{label}#{i}"), Some(format!("retries:{label}"))));
            }
            out
        }
        Op::Switch { arms, default } => {
            let id = switch_id(node);
            let mut out = Vec::new();
            for (i, arm) in arms.iter().enumerate() {
                out.push(check(
                    switch_guard(&id, Some(&arm.guard)),
                    desugar_all(&arm.body, reg)?,
                    format!("{id}#{i}"),
                    Some(id.clone()),
                ));
            }
            if let Some(d) = default {
                out.push(check(switch_guard(&id, None), desugar_all(d, reg)?, format!("{id}#else"), Some(id.clone())));
            }
            out
        }
        Op::Fuse { rule, .. } => return Err(AlgebraError::NotDerived(format!("FUSE[\"{}\"]", rule.name()))),
    })
}

pub fn desugar_all(nodes: &[Node], reg: &Registry) -> Result<Vec<Node>, AlgebraError> {
    let mut out = Vec::new();
    for n in nodes {
        out.extend(desugar(n, reg)?);
    }
    Ok(out)
}

pub fn desugar_pipeline(p: &Pipeline, reg: &Registry) -> Result<Pipeline, AlgebraError> {
    Ok(Pipeline { name: p.name.clone(), nodes: desugar_all(&p.nodes, reg)?, span: p.span.clone() })
}
