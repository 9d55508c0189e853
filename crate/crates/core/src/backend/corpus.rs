//! Seeded synthetic tweet corpus about school life.
//!
//! Every tweet opens with a unique `@userN` handle and carries its sentiment
//! word as its first word after the handle, so the mock labels it as intended both
//! before and after summarization.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub size: usize,
    /// Fraction of tweets labelled negative; the count is rounded to nearest.
    pub negative_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec { size: 100, negative_fraction: 0.5, seed: 7 }
    }
}

const SUBJECTS: &[&str] = &[
    "math class", "the chemistry lab", "homework", "recess", "the cafeteria", "our teacher",
    "the bus ride", "gym class", "the history quiz", "band practice", "the library", "group project",
];
const POSITIVE: &[&str] = &["great", "awesome", "fun", "amazing", "good", "nice", "happy"];
const NEGATIVE: &[&str] = &["awful", "terrible", "boring", "bad", "annoying", "sad", "tired"];
const FILLERS: &[&str] = &["today", "this week", "honestly", "again", "lol", "for real", "this morning"];
const TAGS: &[&str] = &["#school", "#classof2025", "#studentlife", ""];

/// One tweet per item: `{"id", "text", "label"}`.
pub fn generate(spec: &CorpusSpec) -> Vec<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let negatives = (spec.size as f64 * spec.negative_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut labels: Vec<bool> = (0..spec.size).map(|i| i < negatives).collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, negative)| {
            let subject = SUBJECTS.choose(&mut rng).expect("nonempty");
            let word = if negative { NEGATIVE } else { POSITIVE }.choose(&mut rng).expect("nonempty");
            let filler = FILLERS.choose(&mut rng).expect("nonempty");
            let tag = TAGS.choose(&mut rng).expect("nonempty");
            let mut text = format!("@user{i} {word} day in {subject} {filler} {tag}");
            if rng.gen_bool(0.3) {
                text = format!("{} https://t.co/{:06x}", text.trim_end(), rng.gen::<u32>() & 0xff_ffff);
            }
            json!({
                "id": i,
                "text": text.trim_end(),
                "label": if negative { "negative" } else { "positive" },
            })
        })
        .collect()
}
