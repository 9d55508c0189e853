use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::entry::{PromptEntry, VersionHash};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditKind {
    Insert,
    Delete,
}

/// One changed line. `left_line`/`right_line` are 0-based positions in the
/// respective texts; for an insert `left_line` is where it lands in the left text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineEdit {
    pub kind: EditKind,
    pub left_line: usize,
    pub right_line: usize,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamDelta {
    pub added: BTreeMap<String, String>,
    pub removed: BTreeMap<String, String>,
    /// name -> (left, right)
    pub changed: BTreeMap<String, (String, String)>,
}

impl ParamDelta {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.changed.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffReport {
    pub left_version: VersionHash,
    pub right_version: VersionHash,
    pub edits: Vec<LineEdit>,
    /// Index of the first differing ref_log record; `None` when the logs are identical.
    pub divergence: Option<usize>,
    pub params: ParamDelta,
}

impl DiffReport {
    pub fn is_empty(&self) -> bool {
        self.edits.is_empty() && self.divergence.is_none() && self.params.is_empty()
    }
}

/// LCS-based line edit script turning `left` into `right`.
pub fn line_edits(left: &str, right: &str) -> Vec<LineEdit> {
    let a: Vec<&str> = left.lines().collect();
    let b: Vec<&str> = right.lines().collect();
    let (n, m) = (a.len(), b.len());
    // lcs[i][j] = LCS length of a[i..], b[j..]
    let mut lcs = vec![vec![0u32; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i][j] = if a[i] == b[j] {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }
    let mut edits = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        if i < n && j < m && a[i] == b[j] {
            i += 1;
            j += 1;
        } else if j < m && (i == n || lcs[i][j + 1] >= lcs[i + 1][j]) {
            edits.push(LineEdit { kind: EditKind::Insert, left_line: i, right_line: j, text: b[j].to_string() });
            j += 1;
        } else {
            edits.push(LineEdit { kind: EditKind::Delete, left_line: i, right_line: j, text: a[i].to_string() });
            i += 1;
        }
    }
    edits
}

pub fn diff_entries(left: &PromptEntry, right: &PromptEntry) -> DiffReport {
    let divergence = left
        .ref_log
        .iter()
        .zip(&right.ref_log)
        .position(|(l, r)| l != r)
        .or_else(|| {
            (left.ref_log.len() != right.ref_log.len())
                .then(|| left.ref_log.len().min(right.ref_log.len()))
        });
    let mut params = ParamDelta::default();
    for (k, v) in &left.params {
        match right.params.get(k) {
            None => {
                params.removed.insert(k.clone(), v.clone());
            }
            Some(w) if w != v => {
                params.changed.insert(k.clone(), (v.clone(), w.clone()));
            }
            _ => {}
        }
    }
    for (k, v) in &right.params {
        if !left.params.contains_key(k) {
            params.added.insert(k.clone(), v.clone());
        }
    }
    DiffReport {
        left_version: left.version.clone(),
        right_version: right.version.clone(),
        edits: line_edits(&left.text, &right.text),
        divergence,
        params,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_texts_have_no_edits() {
        assert!(line_edits("a\nb", "a\nb").is_empty());
    }

    #[test]
    fn append_is_pure_insertion() {
        let e = line_edits("a\nb", "a\nb\nc");
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].kind, EditKind::Insert);
        assert_eq!(e[0].text, "c");
        assert_eq!(e[0].right_line, 2);
    }

    #[test]
    fn swap_roles_is_symmetric() {
        let l = "x\ny\nz";
        let r = "x\nq\nz\nw";
        let fwd = line_edits(l, r);
        let back = line_edits(r, l);
        let ins = |v: &[LineEdit], k| v.iter().filter(|e| e.kind == k).map(|e| e.text.clone()).collect::<Vec<_>>();
        assert_eq!(ins(&fwd, EditKind::Insert), ins(&back, EditKind::Delete));
        assert_eq!(ins(&fwd, EditKind::Delete), ins(&back, EditKind::Insert));
    }
}
