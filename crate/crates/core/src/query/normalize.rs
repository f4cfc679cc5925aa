use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

/// Folds text into index/query tokens.
///
/// NFC, lowercase, strip diacritics (via NFD), split on every character that
/// is not a letter or digit. No stemming, no stop words.
pub fn normalize(text: &str) -> Vec<String> {
    let lowered: String = text.nfc().collect::<String>().to_lowercase();
    let stripped: String = lowered.nfd().filter(|c| !is_combining_mark(*c)).collect();
    stripped
        .split(|c: char| !c.is_alphanumeric())
        .filter(|piece| !piece.is_empty())
        .map(|piece| piece.nfc().collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn folds_french_text() {
        assert_eq!(normalize("Réseau étendu"), vec!["reseau", "etendu"]);
        assert_eq!(normalize("Über  façade"), vec!["uber", "facade"]);
    }

    #[test]
    fn empty_and_separator_only() {
        assert!(normalize("").is_empty());
        assert!(normalize(" -- ,. ").is_empty());
    }

    #[test]
    fn splits_on_punctuation() {
        assert_eq!(normalize("v2.1-beta"), vec!["v2", "1", "beta"]);
        assert_eq!(normalize("l'envoyer"), vec!["l", "envoyer"]);
    }

    #[test]
    fn decomposed_input_matches_composed() {
        assert_eq!(normalize("e\u{301}te\u{301}"), normalize("été"));
    }

    proptest! {
        #[test]
        fn tokens_are_folded_and_idempotent(s in "\\PC{0,40}") {
            for token in normalize(&s) {
                prop_assert!(!token.is_empty());
                prop_assert!(token.chars().all(char::is_alphanumeric));
                prop_assert_eq!(normalize(&token), vec![token.clone()]);
            }
        }
    }
}
