//! Label normalization and the small tokenizers shared across modules.

use std::collections::BTreeSet;

/// Canonical form used for every label equality test: Unicode case fold,
/// trim, and collapse of internal whitespace runs to a single space.
pub fn canonical_label(s: &str) -> String {
    let folded = caseless::default_case_fold_str(s);
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn labels_equal(a: &str, b: &str) -> bool {
    canonical_label(a) == canonical_label(b)
}

/// Case-folded alphanumeric tokens. Any non-alphanumeric character splits.
pub fn alnum_tokens(s: &str) -> Vec<String> {
    caseless::default_case_fold_str(s)
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn token_set(s: &str) -> BTreeSet<String> {
    alnum_tokens(s).into_iter().collect()
}

/// Jaccard similarity of two token sets; two empty sets score zero.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Case-folded token with leading and trailing punctuation removed.
pub fn strip_token(token: &str) -> String {
    caseless::default_case_fold_str(token.trim_matches(|c: char| !c.is_alphanumeric()))
}

/// Whitespace tokenization with byte spans into the source string.
pub fn whitespace_spans(s: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in s.char_indices() {
        if c.is_whitespace() {
            if let Some(st) = start.take() {
                spans.push((st, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(st) = start {
        spans.push((st, s.len()));
    }
    spans
}
