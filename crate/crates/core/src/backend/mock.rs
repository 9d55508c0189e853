//! Deterministic rule-based backend.
//!
//! The response is a pure function of the prompt text. The rules understand
//! the prompt shapes the runtime produces: plain tasks, fused map/filter
//! prompts, sectioned multi-GEN prompts and meta-refinement prompts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tokenize::tokenize;

/// Line that opens the current prompt text in a meta-refinement request.
pub const PROMPT_HEADER: &str = "### PROMPT";
/// Line that opens the user hint in a meta-refinement request.
pub const HINT_HEADER: &str = "### HINT";
/// Line that opens the metric signals in a meta-refinement request.
pub const SIGNALS_HEADER: &str = "### SIGNALS";
/// Prefix of the final line of a fused map/filter response.
pub const LABEL_PREFIX: &str = "LABEL: ";
/// Output contract appended to fused map/filter instructions.
pub const FUSED_CONTRACT: &str =
    "Reply with the processed text, then a final line of the form LABEL: <label>.";
/// Marker that precedes the data in a task prompt.
pub const INPUT_MARKER: &str = "Input:";

pub fn section_marker(label: &str) -> String {
    format!("=== SECTION {label} ===")
}

fn parse_section_marker(line: &str) -> Option<&str> {
    line.trim().strip_prefix("=== SECTION ")?.strip_suffix(" ===")
}

/// Splits a sectioned response into `(label, body)` pairs.
pub fn split_sections(text: &str) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for line in text.lines() {
        if let Some(label) = parse_section_marker(line) {
            out.push((label.to_string(), String::new()));
        } else if let Some((_, body)) = out.last_mut() {
            if !body.is_empty() {
                body.push('\n');
            }
            body.push_str(line);
        }
    }
    for (_, body) in &mut out {
        *body = body.trim().to_string();
    }
    out
}

/// Splits a fused map/filter response into `(text, label)`.
pub fn split_labelled(text: &str) -> Option<(String, String)> {
    let trimmed = text.trim_end();
    let (body, last) = match trimmed.rfind('\n') {
        Some(i) => (&trimmed[..i], &trimmed[i + 1..]),
        None => ("", trimmed),
    };
    let label = last.trim().strip_prefix(LABEL_PREFIX)?;
    Some((body.trim().to_string(), label.trim().to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sentiment {
    /// Sum of lexicon weights over the tokens.
    pub score: f64,
    /// `|score| / (1 + |score|)`.
    pub confidence: f64,
}

impl Sentiment {
    pub fn label(&self) -> &'static str {
        if self.score < 0.0 {
            "negative"
        } else {
            "positive"
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockRuleSet {
    pub lexicon: BTreeMap<String, f64>,
    /// Word limit for summaries when the instruction names none.
    pub summary_words: usize,
    pub map_keywords: Vec<String>,
    pub filter_keywords: Vec<String>,
}

const POSITIVE: &[&str] = &[
    "love", "great", "happy", "awesome", "good", "fun", "excited", "best", "amazing", "enjoy",
    "glad", "nice", "proud", "win", "won", "thanks", "improved", "stable", "recovered",
];
const NEGATIVE: &[&str] = &[
    "hate", "awful", "sad", "terrible", "bad", "worst", "boring", "angry", "tired", "sick",
    "fail", "failed", "stressed", "annoying", "miss", "cancelled", "late", "lost", "pain", "bleeding",
];
/// Words that make an instruction more specific; they raise confidence mildly.
const GROUNDING: &[&str] = &["evidence", "specific", "rationale", "cite", "reasoning", "explain", "risk"];

impl Default for MockRuleSet {
    fn default() -> Self {
        let mut lexicon = BTreeMap::new();
        for w in POSITIVE {
            lexicon.insert(w.to_string(), 1.0);
        }
        for w in NEGATIVE {
            lexicon.insert(w.to_string(), -1.0);
        }
        for w in GROUNDING {
            lexicon.insert(w.to_string(), 0.5);
        }
        MockRuleSet {
            lexicon,
            summary_words: 12,
            map_keywords: vec!["summarize".into(), "summary".into(), "clean".into()],
            filter_keywords: vec!["sentiment".into()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Task {
    Map,
    Filter,
}

impl MockRuleSet {
    pub fn sentiment_of(&self, text: &str) -> Sentiment {
        let score: f64 = tokenize(text).iter().filter_map(|t| self.lexicon.get(t)).sum();
        let x = score.abs();
        Sentiment { score, confidence: x / (1.0 + x) }
    }

    /// The response text for `prompt`.
    pub fn respond(&self, prompt: &str) -> String {
        if let Some(meta) = self.meta_refine(prompt) {
            return meta;
        }
        if prompt.lines().any(|l| parse_section_marker(l).is_some()) {
            let mut out = String::new();
            for (label, body) in split_sections(prompt) {
                out.push_str(&section_marker(&label));
                out.push('\n');
                out.push_str(&self.respond_task(&body));
                out.push('\n');
            }
            return out;
        }
        self.respond_task(prompt)
    }

    /// Confidence the mock reports for `prompt`.
    pub fn confidence(&self, prompt: &str) -> f64 {
        self.sentiment_of(prompt).confidence
    }

    fn meta_refine(&self, prompt: &str) -> Option<String> {
        let sections = header_sections(prompt);
        let original = sections.get(PROMPT_HEADER)?;
        let hint = match sections.get(HINT_HEADER) {
            Some(h) if !h.trim().is_empty() => h.trim().to_string(),
            _ => sections.get("").map(|s| s.trim().to_string()).unwrap_or_default(),
        };
        Some(format!("REFINED: {hint} | {original}"))
    }

    fn respond_task(&self, prompt: &str) -> String {
        let (instruction, input) = match prompt.rfind(INPUT_MARKER) {
            Some(i) => (&prompt[..i], prompt[i + INPUT_MARKER.len()..].trim()),
            None => (prompt, prompt.trim()),
        };
        let lower = instruction.to_lowercase();
        let first = |keys: &[String]| keys.iter().filter_map(|k| lower.find(k.as_str())).min();
        let words = word_limit(&lower).unwrap_or(self.summary_words);
        let mut tasks: Vec<(usize, Task)> = Vec::new();
        if let Some(p) = first(&self.map_keywords) {
            tasks.push((p, Task::Map));
        }
        if let Some(p) = first(&self.filter_keywords) {
            tasks.push((p, Task::Filter));
        }
        tasks.sort();
        match tasks.as_slice() {
            [] => format!("ANSWER: {}", summarize(input, words)),
            [(_, Task::Map)] => summarize(input, words),
            [(_, Task::Filter)] => self.sentiment_of(input).label().to_string(),
            [(_, Task::Map), (_, Task::Filter)] => {
                let s = summarize(input, words);
                let l = self.sentiment_of(&s).label();
                format!("{s}\n{LABEL_PREFIX}{l}")
            }
            _ => {
                let l = self.sentiment_of(input).label();
                let s = summarize(input, words);
                format!("{s}\n{LABEL_PREFIX}{l}")
            }
        }
    }
}

/// Text under each `### NAME` header line; text before the first header is keyed by "".
fn header_sections(prompt: &str) -> BTreeMap<&'static str, String> {
    let mut out: BTreeMap<&'static str, String> = BTreeMap::new();
    let mut current: &'static str = "";
    for line in prompt.lines() {
        let header = [PROMPT_HEADER, HINT_HEADER, SIGNALS_HEADER].into_iter().find(|h| line.trim_end() == *h);
        if let Some(h) = header {
            current = h;
            out.entry(h).or_default();
            continue;
        }
        let body = out.entry(current).or_default();
        if !body.is_empty() {
            body.push('\n');
        }
        body.push_str(line);
    }
    out
}

/// `N` from "at most N words".
fn word_limit(instruction: &str) -> Option<usize> {
    let i = instruction.find("at most ")?;
    let rest = &instruction[i + "at most ".len()..];
    let n: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    let tail = rest[n.len()..].trim_start();
    if tail.starts_with("word") {
        n.parse().ok()
    } else {
        None
    }
}

/// Drops handles and links, lowercases, and keeps the first `words` words.
pub fn summarize(input: &str, words: usize) -> String {
    let kept: Vec<String> = input
        .split_whitespace()
        .filter(|w| !w.starts_with('@') && !w.starts_with("http"))
        .take(words)
        .map(|w| w.to_lowercase())
        .collect();
    if kept.is_empty() {
        "(empty)".to_string()
    } else {
        kept.join(" ")
    }
}
