use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::CostModel;
use crate::algebra::RefinerSpec;
use crate::meta::StatsTable;
use crate::store::RefineMode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub max_tokens: f64,
    pub max_latency_s: f64,
}

impl Budget {
    fn is_empty(&self) -> bool {
        self.max_tokens <= 0.0 && self.max_latency_s <= 0.0
    }
}

/// Estimated price of applying one refiner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementCost {
    /// Tokens the refinement adds to the prompt, never negative.
    pub tokens: f64,
    /// One backend call for LLM-resolved modes, plus the added tokens on the next GEN.
    pub latency_s: f64,
}

impl RefinementCost {
    pub fn estimate(mode: RefineMode, mean_token_delta: f64, model: &CostModel) -> Self {
        let tokens = mean_token_delta.max(0.0);
        let call = if mode == RefineMode::Manual { 0.0 } else { model.base_latency_s };
        RefinementCost { tokens, latency_s: call + tokens * model.uncached_prompt_token_cost_s }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementPlan {
    /// Chosen refiner ids, best gain per second first.
    pub order: Vec<String>,
    pub total_gain: f64,
    pub total_tokens: f64,
    pub total_latency_s: f64,
}

struct Candidate {
    /// Position among the input candidates; subset totals are summed in this order.
    pos: usize,
    id: String,
    gain: f64,
    cost: RefinementCost,
}

impl Candidate {
    /// Descending gain per second of latency; free refiners come first; then id.
    fn rank(&self, other: &Candidate) -> Ordering {
        let ratio = |c: &Candidate| if c.cost.latency_s > 0.0 { c.gain / c.cost.latency_s } else { f64::INFINITY };
        ratio(other).total_cmp(&ratio(self)).then_with(|| self.id.cmp(&other.id))
    }
}

/// Picks the subset of refiners with the highest total mean confidence gain
/// whose summed estimated tokens and latency fit the budget.
///
/// Refiners without statistics or without a positive mean gain are skipped.
/// The search is exact branch and bound over candidates in rank order; the
/// result is listed in that order.
pub fn plan_refinements(candidates: &[RefinerSpec], stats: &StatsTable, budget: &Budget, model: &CostModel) -> RefinementPlan {
    let mut cands: Vec<Candidate> = candidates
        .iter()
        .enumerate()
        .filter_map(|(pos, spec)| {
            let row = stats.get(&spec.id)?;
            (row.mean_confidence_delta > 0.0).then(|| Candidate {
                pos,
                id: spec.id.clone(),
                gain: row.mean_confidence_delta,
                cost: RefinementCost::estimate(spec.mode, row.mean_token_delta, model),
            })
        })
        .collect();
    cands.sort_by(|a, b| a.rank(b));
    cands.dedup_by(|a, b| a.id == b.id);
    let mut chosen = Vec::new();
    if !budget.is_empty() {
        let mut suffix = vec![0.0; cands.len() + 1];
        for i in (0..cands.len()).rev() {
            suffix[i] = suffix[i + 1] + cands[i].gain;
        }
        let mut search = Search { cands: &cands, suffix, budget, best: (0.0, Vec::new()), current: Vec::new() };
        search.run(0, 0.0);
        chosen = search.best.1;
    }
    let totals = Totals::of(&cands, &chosen);
    RefinementPlan {
        order: chosen.iter().map(|&i| cands[i].id.clone()).collect(),
        total_gain: totals.gain,
        total_tokens: totals.tokens,
        total_latency_s: totals.latency_s,
    }
}

/// Sums over a subset, taken in input order so that every subset has exactly
/// one floating-point total regardless of the order it was built in.
struct Totals {
    gain: f64,
    tokens: f64,
    latency_s: f64,
}

impl Totals {
    fn of(cands: &[Candidate], subset: &[usize]) -> Totals {
        let mut members: Vec<&Candidate> = subset.iter().map(|&i| &cands[i]).collect();
        members.sort_by_key(|c| c.pos);
        let mut t = Totals { gain: 0.0, tokens: 0.0, latency_s: 0.0 };
        for c in members {
            t.gain += c.gain;
            t.tokens += c.cost.tokens;
            t.latency_s += c.cost.latency_s;
        }
        t
    }
}

struct Search<'a> {
    cands: &'a [Candidate],
    /// suffix[i] = total gain of candidates i.. (an upper bound on what remains).
    suffix: Vec<f64>,
    budget: &'a Budget,
    best: (f64, Vec<usize>),
    current: Vec<usize>,
}

impl Search<'_> {
    /// `gain` is the canonical total of `current`.
    fn run(&mut self, i: usize, gain: f64) {
        if gain > self.best.0 {
            self.best = (gain, self.current.clone());
        }
        // The bound is inexact by rounding, so prune only with a margin.
        let slack = 1e-9 * (1.0 + self.best.0.abs());
        if i == self.cands.len() || gain + self.suffix[i] + slack < self.best.0 {
            return;
        }
        self.current.push(i);
        let with = Totals::of(self.cands, &self.current);
        if with.tokens <= self.budget.max_tokens && with.latency_s <= self.budget.max_latency_s {
            self.run(i + 1, with.gain);
        }
        self.current.pop();
        self.run(i + 1, gain);
    }
}
