use std::collections::BTreeSet;

use crate::store::{ViewDef, ParamMap};
use crate::tokenize::count_tokens;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ViewSelectError {
    #[error("no view carries any of the tags {0:?}")]
    NoCandidateView(Vec<String>),
}

/// Estimated prompt size of a view: its body with parameters bound to their
/// defaults (or to `args`), includes counted at their own estimated size.
fn view_tokens(view: &ViewDef, views: &[ViewDef], args: &ParamMap, depth: usize) -> usize {
    let mut text = view.body.clone();
    for p in &view.params {
        let value = args.get(&p.name).or(p.default.as_ref()).map(String::as_str).unwrap_or("");
        text = text.replace(&format!("{{{{{}}}}}", p.name), value);
    }
    let nested: usize = if depth < 8 {
        view.includes
            .iter()
            .filter_map(|name| views.iter().find(|v| &v.name == name))
            .map(|v| view_tokens(v, views, &ParamMap::new(), depth + 1))
            .sum()
    } else {
        0
    };
    count_tokens(&text) + nested
}

/// The view sharing a tag with the task whose interpolated body is smallest;
/// ties go to the lexicographically first name.
pub fn select_view<'a>(task_tags: &[&str], views: &'a [ViewDef], args: &ParamMap) -> Result<&'a ViewDef, ViewSelectError> {
    let tags: BTreeSet<&str> = task_tags.iter().copied().collect();
    views
        .iter()
        .filter(|v| v.tags.iter().any(|t| tags.contains(t.as_str())))
        .min_by(|a, b| {
            view_tokens(a, views, args, 0).cmp(&view_tokens(b, views, args, 0)).then_with(|| a.name.cmp(&b.name))
        })
        .ok_or_else(|| ViewSelectError::NoCandidateView(task_tags.iter().map(|s| s.to_string()).collect()))
}
