//! Text normalization and token utilities used by descriptions, matching,
//! and the lexical mock similarity.

use std::collections::BTreeSet;

/// Lowercase, trim, and collapse runs of whitespace to single spaces.
pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Normalize an open-vocabulary predicate: lowercase, spaces to underscores.
pub fn normalize_predicate(p: &str) -> String {
    normalize_ws(p).replace(' ', "_")
}

/// Split into lowercase alphanumeric tokens.
pub fn tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token set (deduplicated) of `s`.
pub fn token_set(s: &str) -> BTreeSet<String> {
    tokens(s).into_iter().collect()
}

/// Jaccard overlap of the lowercase token sets of two strings.
/// Both empty => 1.0 (identical), one empty => 0.0.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let sa = token_set(a);
    let sb = token_set(b);
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Rough token estimate for context-limit guards: one token per four
/// characters, rounded up.
pub fn estimate_tokens(s: &str) -> usize {
    s.len().div_ceil(4)
}
