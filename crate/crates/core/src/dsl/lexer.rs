//! Tokens of the pipeline language. Never panics; bad input becomes diagnostics.

use super::{Diagnostic, Span};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Tok {
    Ident(String),
    Str(String),
    Num(f64),
    /// One of `[ ] { } ( ) , : = < > <= >= == != ->`.
    Punct(&'static str),
}

#[derive(Debug, Clone)]
pub(crate) struct Token {
    pub tok: Tok,
    pub span: Span,
    /// Whether no other token precedes this one on its line.
    pub line_start: bool,
}

/// Byte offset to 1-based line and character column.
pub(crate) struct LineIndex {
    starts: Vec<usize>,
}

impl LineIndex {
    pub fn new(text: &str) -> Self {
        let mut starts = vec![0];
        starts.extend(text.match_indices('\n').map(|(i, _)| i + 1));
        LineIndex { starts }
    }

    pub fn span(&self, text: &str, start: usize, end: usize) -> Span {
        let line = self.starts.partition_point(|&s| s <= start);
        let line_start = self.starts[line - 1];
        let col = text.get(line_start..start).map_or(1, |s| s.chars().count() + 1);
        Span { start, end, line, col }
    }
}

const PUNCT: &[&str] = &["->", "<=", ">=", "==", "!=", "[", "]", "{", "}", "(", ")", ",", ":", "=", "<", ">"];

pub(crate) fn lex(text: &str) -> (Vec<Token>, Vec<Diagnostic>) {
    let idx = LineIndex::new(text);
    let mut toks = Vec::new();
    let mut diags = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    let mut line_start = true;
    while i < bytes.len() {
        let c = text[i..].chars().next().expect("in bounds");
        let start = i;
        if c == '\n' {
            line_start = true;
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            i += c.len_utf8();
            continue;
        }
        if c == '#' {
            i = text[i..].find('\n').map_or(bytes.len(), |n| i + n);
            continue;
        }
        let tok = if c.is_ascii_alphabetic() || c == '_' {
            let end = text[i..].find(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_')).map_or(bytes.len(), |n| i + n);
            i = end;
            Some(Tok::Ident(text[start..end].to_string()))
        } else if c == '"' {
            let (s, end, err) = lex_string(text, i);
            i = end;
            if let Some((at, msg)) = err {
                diags.push(Diagnostic::error(idx.span(text, at, end.max(at + 1).min(text.len())), msg));
            }
            Some(Tok::Str(s))
        } else if c.is_ascii_digit() || (c == '-' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            let end = number_end(bytes, i);
            i = end;
            match text[start..end].parse::<f64>() {
                Ok(n) if n.is_finite() => Some(Tok::Num(n)),
                _ => {
                    diags.push(Diagnostic::error(idx.span(text, start, end), format!("bad number '{}'", &text[start..end])));
                    None
                }
            }
        } else if let Some(p) = PUNCT.iter().find(|p| text[i..].starts_with(**p)) {
            i += p.len();
            Some(Tok::Punct(p))
        } else {
            i += c.len_utf8();
            diags.push(Diagnostic::error(idx.span(text, start, i), format!("unexpected character '{c}'")));
            None
        };
        if let Some(tok) = tok {
            toks.push(Token { tok, span: idx.span(text, start, i), line_start });
            line_start = false;
        }
    }
    (toks, diags)
}

fn number_end(bytes: &[u8], mut i: usize) -> usize {
    if bytes[i] == b'-' {
        i += 1;
    }
    let digits = |i: &mut usize| {
        while bytes.get(*i).is_some_and(u8::is_ascii_digit) {
            *i += 1;
        }
    };
    digits(&mut i);
    if bytes.get(i) == Some(&b'.') && bytes.get(i + 1).is_some_and(u8::is_ascii_digit) {
        i += 1;
        digits(&mut i);
    }
    if matches!(bytes.get(i), Some(b'e' | b'E')) {
        let mut j = i + 1;
        if matches!(bytes.get(j), Some(b'+' | b'-')) {
            j += 1;
        }
        if bytes.get(j).is_some_and(u8::is_ascii_digit) {
            i = j;
            digits(&mut i);
        }
    }
    i
}

/// Reads a quoted string starting at `start`; returns its value, the end offset and any error.
fn lex_string(text: &str, start: usize) -> (String, usize, Option<(usize, String)>) {
    let mut out = String::new();
    let mut chars = text[start + 1..].char_indices();
    while let Some((off, c)) = chars.next() {
        let at = start + 1 + off;
        match c {
            '"' => return (out, at + 1, None),
            '\n' => return (out, at, Some((start, "unterminated string".into()))),
            '\\' => match chars.next() {
                Some((_, 'n')) => out.push('\n'),
                Some((_, 't')) => out.push('\t'),
                Some((_, '"')) => out.push('"'),
                Some((_, '\\')) => out.push('\\'),
                Some((o, other)) => {
                    let end = start + 1 + o + other.len_utf8();
                    let rest = lex_string_tail(text, end);
                    return (out, rest, Some((at, format!("unknown escape '\\{other}'"))));
                }
                None => break,
            },
            c => out.push(c),
        }
    }
    (out, text.len(), Some((start, "unterminated string".into())))
}

/// End of a string after an error: the closing quote or end of line.
fn lex_string_tail(text: &str, from: usize) -> usize {
    let mut escaped = false;
    for (o, c) in text[from..].char_indices() {
        match c {
            '\n' => return from + o,
            '"' if !escaped => return from + o + 1,
            '\\' => escaped = !escaped,
            _ => escaped = false,
        }
    }
    text.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(s: &str) -> Vec<Tok> {
        lex(s).0.into_iter().map(|t| t.tok).collect()
    }

    #[test]
    fn arrows_numbers_and_strings() {
        assert_eq!(
            kinds(r#"M["c"] < -0.7 -> "a\"b" # tail"#),
            vec![
                Tok::Ident("M".into()),
                Tok::Punct("["),
                Tok::Str("c".into()),
                Tok::Punct("]"),
                Tok::Punct("<"),
                Tok::Num(-0.7),
                Tok::Punct("->"),
                Tok::Str("a\"b".into()),
            ]
        );
    }

    #[test]
    fn errors_do_not_stop_lexing() {
        let (toks, diags) = lex("a @ \"open\nb \"x\\q\" c");
        assert_eq!(diags.len(), 3);
        assert!(matches!(toks.last().map(|t| &t.tok), Some(Tok::Ident(c)) if c == "c"));
    }

    #[test]
    fn spans_carry_line_and_char_column() {
        let (toks, _) = lex("\"é\" x\n  y");
        assert_eq!((toks[0].span.line, toks[0].span.col), (1, 1));
        assert_eq!((toks[1].span.line, toks[1].span.col), (1, 5));
        assert_eq!((toks[2].span.line, toks[2].span.col, toks[2].line_start), (2, 3, true));
    }
}
