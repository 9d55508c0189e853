//! Analytics over refinement histories: refiner effectiveness, recommendation
//! and per-prompt history rows.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::algebra::TraceRecord;
use crate::store::{append_text, PromptEntry, RefAction, RefineMode};
use crate::tokenize::count_tokens;

/// Minimum number of measured applications before a refiner is recommended.
pub const DEFAULT_MIN_SUPPORT: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerStats {
    pub refiner_id: String,
    pub mode: RefineMode,
    /// Measured applications; always at least 1 for emitted rows.
    pub n_applied: usize,
    pub mean_confidence_delta: f64,
    pub mean_token_delta: f64,
    /// Share of applications followed by another triggered refinement of the same prompt.
    pub retry_follow_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsTable {
    /// Sorted by mean confidence delta, descending; ties by id.
    pub rows: Vec<RefinerStats>,
    /// Same statistics restricted to each canonical trigger string.
    pub by_trigger: BTreeMap<String, Vec<RefinerStats>>,
    /// Applications lacking a GEN before or after them, per refiner.
    pub unmeasured: BTreeMap<String, usize>,
}

impl StatsTable {
    pub fn get(&self, refiner_id: &str) -> Option<&RefinerStats> {
        self.rows.iter().find(|r| r.refiner_id == refiner_id)
    }
}

#[derive(Default)]
struct Acc {
    mode: Option<RefineMode>,
    n: usize,
    conf: f64,
    tokens: f64,
    followed: usize,
}

impl Acc {
    fn add(&mut self, mode: RefineMode, conf: f64, tokens: i64, followed: bool) {
        self.mode.get_or_insert(mode);
        self.n += 1;
        self.conf += conf;
        self.tokens += tokens as f64;
        self.followed += usize::from(followed);
    }
}

fn finish(accs: BTreeMap<String, Acc>) -> Vec<RefinerStats> {
    let mut rows: Vec<RefinerStats> = accs
        .into_iter()
        .filter(|(_, a)| a.n > 0)
        .map(|(id, a)| RefinerStats {
            refiner_id: id,
            mode: a.mode.expect("set with n"),
            n_applied: a.n,
            mean_confidence_delta: a.conf / a.n as f64,
            mean_token_delta: a.tokens / a.n as f64,
            retry_follow_rate: a.followed as f64 / a.n as f64,
        })
        .collect();
    rows.sort_by(|a, b| {
        b.mean_confidence_delta.total_cmp(&a.mean_confidence_delta).then_with(|| a.refiner_id.cmp(&b.refiner_id))
    });
    rows
}

/// Folds run traces into per-refiner statistics.
///
/// The confidence delta of a refinement of prompt `k` is the confidence of the
/// first GEN after it minus that of the last GEN before it, where the earlier
/// GEN read `k` and the later one carries the same label.
pub fn refiner_stats<'a, I>(traces: I) -> StatsTable
where
    I: IntoIterator<Item = &'a [TraceRecord]>,
{
    let mut all: BTreeMap<String, Acc> = BTreeMap::new();
    let mut per_trigger: BTreeMap<String, BTreeMap<String, Acc>> = BTreeMap::new();
    let mut unmeasured: BTreeMap<String, usize> = BTreeMap::new();
    for trace in traces {
        for (i, rec) in trace.iter().enumerate() {
            let TraceRecord::Ref { key, refiner_id, mode, trigger, token_delta, .. } = rec else {
                continue;
            };
            let before = trace[..i].iter().rev().find_map(|t| match t {
                TraceRecord::Gen { label, prompt_key, confidence, .. } if prompt_key == key => Some((label, *confidence)),
                _ => None,
            });
            let after = before.and_then(|(lbl, _)| {
                trace[i + 1..].iter().find_map(|t| match t {
                    TraceRecord::Gen { label, confidence, .. } if label == lbl => Some(*confidence),
                    _ => None,
                })
            });
            let (Some((_, pre)), Some(post)) = (before, after) else {
                *unmeasured.entry(refiner_id.clone()).or_default() += 1;
                continue;
            };
            let followed = trace[i + 1..]
                .iter()
                .any(|t| matches!(t, TraceRecord::Ref { key: k, trigger: Some(_), .. } if k == key));
            all.entry(refiner_id.clone()).or_default().add(*mode, post - pre, *token_delta, followed);
            if let Some(t) = trigger {
                per_trigger
                    .entry(t.clone())
                    .or_default()
                    .entry(refiner_id.clone())
                    .or_default()
                    .add(*mode, post - pre, *token_delta, followed);
            }
        }
    }
    StatsTable {
        rows: finish(all),
        by_trigger: per_trigger.into_iter().map(|(t, a)| (t, finish(a))).collect(),
        unmeasured,
    }
}

/// Best refiner historically applied under `trigger` (canonical string match)
/// with at least `min_support` measured applications.
pub fn recommend_refiner(table: &StatsTable, trigger: &str, min_support: usize) -> Option<String> {
    table
        .by_trigger
        .get(trigger)?
        .iter()
        .filter(|r| r.n_applied >= min_support)
        .max_by(|a, b| {
            a.mean_confidence_delta.total_cmp(&b.mean_confidence_delta).then_with(|| b.refiner_id.cmp(&a.refiner_id))
        })
        .map(|r| r.refiner_id.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub index: usize,
    pub action: RefAction,
    pub mode: RefineMode,
    pub refiner_id: String,
    pub trigger: Option<String>,
    /// Change in token count of the prompt text made by this step.
    pub size_delta: i64,
    pub metrics: BTreeMap<String, f64>,
}

/// One row per ref_log record, in log order.
pub fn history_trace(entry: &PromptEntry) -> Vec<HistoryRow> {
    let mut text = String::new();
    entry
        .ref_log
        .iter()
        .enumerate()
        .map(|(index, r)| {
            let next = match r.action {
                RefAction::Append => append_text(&text, &r.payload),
                _ => r.payload.clone(),
            };
            let size_delta = count_tokens(&next) as i64 - count_tokens(&text) as i64;
            text = next;
            HistoryRow {
                index,
                action: r.action,
                mode: r.mode,
                refiner_id: r.refiner_id.clone(),
                trigger: r.trigger.clone(),
                size_delta,
                metrics: r.metrics_snapshot.clone(),
            }
        })
        .collect()
}

pub const STATS_CSV_HEADER: [&str; 6] =
    ["refiner_id", "mode", "n_applied", "mean_confidence_delta", "mean_token_delta", "retry_follow_rate"];

pub fn stats_to_json(table: &StatsTable) -> String {
    serde_json::to_string_pretty(table).expect("stats serialize")
}

/// Writes the overall rows as CSV with a fixed header.
pub fn stats_to_csv<W: Write>(rows: &[RefinerStats], out: W) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(STATS_CSV_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::VersionHash;

    fn gen(label: &str, key: &str, confidence: f64) -> TraceRecord {
        TraceRecord::Gen {
            label: label.into(),
            prompt_key: key.into(),
            prompt_version: VersionHash("0".repeat(16)),
            calls: 1,
            confidence,
            prompt_tokens: 10,
            cached_prefix_tokens: 0,
            completion_tokens: 1,
            latency_s: 0.1,
        }
    }

    fn refine(id: &str, key: &str, trigger: Option<&str>, token_delta: i64) -> TraceRecord {
        TraceRecord::Ref {
            key: key.into(),
            refiner_id: id.into(),
            mode: RefineMode::Auto,
            action: RefAction::Update,
            trigger: trigger.map(str::to_string),
            pre_version: None,
            post_version: VersionHash("1".repeat(16)),
            token_delta,
        }
    }

    const T: &str = "M[\"confidence\"] < 0.7";

    fn fixture() -> Vec<Vec<TraceRecord>> {
        (0..3)
            .map(|_| {
                vec![
                    gen("a", "p", 0.5),
                    refine("f_good", "p", Some(T), 4),
                    gen("a", "p", 0.7),
                    refine("f_bad", "p", Some(T), 2),
                    gen("a", "p", 0.6),
                ]
            })
            .collect()
    }

    #[test]
    fn ranks_refiners_by_mean_delta() {
        let f = fixture();
        let t = refiner_stats(f.iter().map(Vec::as_slice));
        assert_eq!(t.rows[0].refiner_id, "f_good");
        assert!((t.rows[0].mean_confidence_delta - 0.2).abs() < 1e-12);
        assert!((t.rows[1].mean_confidence_delta + 0.1).abs() < 1e-12);
        assert_eq!(t.rows[0].retry_follow_rate, 1.0);
        assert_eq!(t.rows[1].retry_follow_rate, 0.0);
        assert_eq!(t, refiner_stats(f.iter().map(Vec::as_slice)));
    }

    #[test]
    fn unmeasured_refinements_are_bucketed() {
        let trace = vec![refine("f", "p", None, 1), gen("a", "p", 0.5)];
        let t = refiner_stats([trace.as_slice()]);
        assert!(t.rows.is_empty());
        assert_eq!(t.unmeasured["f"], 1);
    }

    #[test]
    fn recommendation_requires_support() {
        let f = fixture();
        let t = refiner_stats(f.iter().map(Vec::as_slice));
        assert_eq!(recommend_refiner(&t, T, 3).as_deref(), Some("f_good"));
        assert_eq!(recommend_refiner(&t, T, 4), None);
        assert_eq!(recommend_refiner(&t, "other", 1), None);
    }

    #[test]
    fn csv_has_stable_header() {
        let f = fixture();
        let t = refiner_stats(f.iter().map(Vec::as_slice));
        let mut buf = Vec::new();
        stats_to_csv(&t.rows, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("refiner_id,mode,n_applied,mean_confidence_delta,mean_token_delta,retry_follow_rate\n"));
    }
}
