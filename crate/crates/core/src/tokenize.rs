//! The one tokenizer shared by the prefix cache, the cost model and the mock backend.
//!
//! Text is lowercased and split into maximal runs of alphanumeric characters;
//! every other non-whitespace character is a token of its own. Whitespace only
//! separates. This is an approximation of a subword tokenizer, chosen because it
//! is bit-exact on every platform.

/// Tokenize `text` into lowercase tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.extend(std::iter::once(ch.to_lowercase().collect::<String>()));
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Number of tokens in `text`.
pub fn count_tokens(text: &str) -> usize {
    tokenize(text).len()
}
