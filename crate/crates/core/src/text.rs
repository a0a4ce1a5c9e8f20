//! Canonical text form used for answer matching and keyword overlap.

/// Lowercase, punctuation replaced by spaces, whitespace collapsed.
pub fn normalize(text: &str) -> String {
    let mapped: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalized words.
pub fn words(text: &str) -> Vec<String> {
    normalize(text)
        .split(' ')
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "can", "could", "did", "do", "does", "for",
    "from", "has", "have", "how", "in", "is", "it", "its", "of", "on", "or", "seen", "shown",
    "that", "the", "their", "there", "these", "this", "to", "was", "were", "what", "when",
    "where", "which", "who", "whom", "why", "with", "wrong",
];

/// Interrogatives dropped when turning a question into a caption.
pub const INTERROGATIVES: &[&str] = &[
    "what", "which", "where", "when", "who", "whom", "whose", "why", "how", "is", "are", "does",
    "do", "did", "can", "could",
];

pub fn is_stopword(word: &str) -> bool {
    STOPWORDS.contains(&word)
}

/// Normalized words that are not stopwords.
pub fn content_words(text: &str) -> Vec<String> {
    words(text).into_iter().filter(|w| !is_stopword(w)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_strips_case_and_punctuation() {
        assert_eq!(normalize("  Yes. "), "yes");
        assert_eq!(normalize("Posterior-Anterior   VIEW"), "posterior anterior view");
        assert_eq!(normalize("?!"), "");
    }

    #[test]
    fn content_words_drop_stopwords() {
        assert_eq!(content_words("What is wrong with the lung?"), ["lung"]);
    }
}
