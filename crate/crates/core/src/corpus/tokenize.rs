/// Lowercases, splits on whitespace, then splits every character that is
/// not alphanumeric, `_`, or an apostrophe between two alphanumerics into
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    for chunk in lower.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut word = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let intra_apostrophe = c == '\''
                && i > 0
                && i + 1 < chars.len()
                && chars[i - 1].is_alphanumeric()
                && chars[i + 1].is_alphanumeric();
            if c.is_alphanumeric() || c == '_' || intra_apostrophe {
                word.push(c);
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn question_with_spaced_punctuation() {
        assert_eq!(
            tokenize("What is your name ?"),
            toks(&["what", "is", "your", "name", "?"])
        );
    }

    #[test]
    fn empty_and_blank() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \t\n ").is_empty());
    }

    #[test]
    fn contractions_and_attached_punctuation() {
        assert_eq!(tokenize("Hi. I'm Sam!"), toks(&["hi", ".", "i'm", "sam", "!"]));
    }

    #[test]
    fn quotes_and_hyphens_split() {
        assert_eq!(
            tokenize("Say 'goodbye' thirty-five"),
            toks(&["say", "'", "goodbye", "'", "thirty", "-", "five"])
        );
        assert_eq!(tokenize("Manny..."), toks(&["manny", ".", ".", "."]));
        assert_eq!(tokenize("human_immunodeficiency_virus"), toks(&["human_immunodeficiency_virus"]));
    }

    proptest! {
        #[test]
        fn idempotent_on_joined_output(text in "[a-zA-Z0-9 _'.,!?;:\\-\"()]{0,60}") {
            let once = tokenize(&text);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn tokens_are_lowercase_and_non_blank(text in "\\PC{0,40}") {
            for t in tokenize(&text) {
                prop_assert!(!t.is_empty());
                prop_assert!(!t.chars().any(char::is_whitespace));
                prop_assert_eq!(t.to_lowercase(), t.clone());
            }
        }
    }
}
