//! Heuristic tokenization used for all length metrics and budget math.
//!
//! A token is either a maximal run of alphanumeric characters or a single
//! non-whitespace, non-alphanumeric character. Whitespace separates tokens
//! and is never counted. The rule is deterministic and cheap, which keeps
//! document-length metrics and context-budget arithmetic reproducible
//! offline; a model-specific tokenizer can be substituted through the
//! [`Tokenizer`] trait wherever counts feed into budgets.

/// Counting interface so a model-specific tokenizer can replace the
/// heuristic rule without touching budget math.
pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// The default segmentation rule.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicTokenizer;

impl Tokenizer for HeuristicTokenizer {
    fn count(&self, text: &str) -> usize {
        token_count(text)
    }
}

/// Count tokens under the heuristic segmentation rule.
pub fn token_count(text: &str) -> usize {
    let mut count = 0usize;
    let mut in_run = false;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if !in_run {
                count += 1;
                in_run = true;
            }
        } else {
            in_run = false;
            if !ch.is_whitespace() {
                count += 1;
            }
        }
    }
    count
}

/// Truncate `text` to at most `cap` tokens, cutting at a token boundary.
///
/// Returns the prefix and whether anything was cut off.
pub fn truncate_to_tokens(text: &str, cap: usize) -> (&str, bool) {
    let mut count = 0usize;
    let mut in_run = false;
    for (idx, ch) in text.char_indices() {
        let starts_token = if ch.is_alphanumeric() {
            let starts = !in_run;
            in_run = true;
            starts
        } else {
            in_run = false;
            !ch.is_whitespace()
        };
        if starts_token {
            if count == cap {
                return (&text[..idx], true);
            }
            count += 1;
        }
    }
    (text, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_string_has_no_tokens() {
        assert_eq!(token_count(""), 0);
        assert_eq!(token_count("   \n\t "), 0);
    }

    #[test]
    fn punctuation_splits_alphanumeric_runs() {
        // REF, -, 12345, ok
        assert_eq!(token_count("REF-12345 ok"), 4);
    }

    #[test]
    fn each_symbol_is_its_own_token() {
        // <, ID, >, 42, <, /, ID, >
        assert_eq!(token_count("<ID>42</ID>"), 8);
    }

    #[test]
    fn truncation_respects_the_cap() {
        let (prefix, cut) = truncate_to_tokens("REF-12345 ok", 3);
        assert_eq!(prefix, "REF-12345 ");
        assert!(cut);
        assert_eq!(token_count(prefix), 3);

        let (all, cut) = truncate_to_tokens("REF-12345 ok", 100);
        assert_eq!(all, "REF-12345 ok");
        assert!(!cut);
    }

    #[test]
    fn truncation_to_zero_is_empty() {
        let (prefix, cut) = truncate_to_tokens("abc", 0);
        assert_eq!(prefix, "");
        assert!(cut);
    }

    proptest! {
        // count(a + " " + b) = count(a) + count(b) for non-empty a, b
        #[test]
        fn additive_over_whitespace_joins(a in "\\PC{1,40}", b in "\\PC{1,40}") {
            let joined = format!("{a} {b}");
            prop_assert_eq!(token_count(&joined), token_count(&a) + token_count(&b));
        }

        #[test]
        fn truncated_prefix_counts_at_most_cap(text in "\\PC{0,200}", cap in 0usize..50) {
            let (prefix, _) = truncate_to_tokens(&text, cap);
            prop_assert!(token_count(prefix) <= cap);
        }
    }
}
