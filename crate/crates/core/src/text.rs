//! Shared text normalization.
//!
//! Two recipes are used throughout the crate and must stay in sync with the
//! contracts that reference them:
//!
//! * [`tokenize`] — retrieval and sequence scoring both operate on
//!   lowercased, punctuation-stripped whitespace tokens.
//! * [`normalize_answer`] — exact-match comparison additionally removes the
//!   articles "a", "an", "the" and collapses whitespace.

/// Lowercase, strip non-alphanumeric characters, split on whitespace.
///
/// Tokens that are empty after stripping (pure punctuation) are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|word| {
            let token: String = word
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(|c| c.to_lowercase())
                .collect();
            (!token.is_empty()).then_some(token)
        })
        .collect()
}

/// Canonical form used for exact-match equality and candidate dedup:
/// lowercase, strip punctuation, drop article tokens, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    tokenize(text)
        .into_iter()
        .filter(|t| !matches!(t.as_str(), "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_lowercases_and_strips_punctuation() {
        assert_eq!(tokenize("James Cameron."), vec!["james", "cameron"]);
        assert_eq!(
            tokenize("  Who   directed Avatar? "),
            vec!["who", "directed", "avatar"]
        );
        assert_eq!(tokenize("self-driving"), vec!["selfdriving"]);
    }

    #[test]
    fn tokenize_drops_pure_punctuation() {
        assert_eq!(tokenize("?! ... --"), Vec::<String>::new());
        assert_eq!(tokenize(""), Vec::<String>::new());
    }

    #[test]
    fn normalize_removes_articles() {
        assert_eq!(normalize_answer("the James Cameron"), "james cameron");
        assert_eq!(normalize_answer("An   apple"), "apple");
        // Articles are removed token-wise, not inside words.
        assert_eq!(normalize_answer("theater"), "theater");
    }

    #[test]
    fn normalize_collapses_whitespace() {
        assert_eq!(normalize_answer(" james \t cameron \n"), "james cameron");
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,60}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once);
        }

        #[test]
        fn tokens_are_lowercase_alphanumeric(s in "\\PC{0,60}") {
            for t in tokenize(&s) {
                prop_assert!(!t.is_empty());
                prop_assert!(t.chars().all(|c| c.is_alphanumeric()));
                // Lowercasing is a fixed point (letters without a lowercase
                // mapping pass through unchanged).
                prop_assert_eq!(t.to_lowercase(), t.clone());
            }
        }
    }
}
