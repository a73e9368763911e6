//! Tokenizers shared across the crate.
//!
//! Two flavours exist. [`words`] is the bag-of-words tokenizer used by the
//! encoder and all metrics: lowercase, drop ASCII punctuation, split on
//! whitespace. Underscores are kept because event names (`dog_bark`) use them.
//!
//! [`decoder_tokens`] keeps punctuation as standalone tokens so the decoder can
//! see caption boundaries inside a prompt.

fn is_stripped(c: char) -> bool {
    c.is_ascii_punctuation() && c != '_'
}

/// Lowercase, strip ASCII punctuation (except `_`), split on whitespace.
pub fn words(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !is_stripped(*c))
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Lowercase and split on whitespace, emitting each punctuation character as
/// its own token.
pub fn decoder_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars().flat_map(char::to_lowercase) {
            if is_stripped(c) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            } else {
                word.push(c);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Joins decoder tokens back into text: words separated by single spaces,
/// punctuation glued to the preceding word.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let tok = tok.as_ref();
        let glue = tok.chars().count() == 1 && tok.chars().all(is_stripped);
        if !out.is_empty() && !glue {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}
