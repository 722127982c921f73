use std::collections::HashSet;
use std::io::BufRead;

use super::{read_text_line, tokenize, CorpusError, Result};

/// A set of multi-word phrases that are collapsed into single
/// underscore-joined tokens, e.g. `human immunodeficiency virus` becomes
/// `human_immunodeficiency_virus`.
#[derive(Debug, Clone, Default)]
pub struct TermLexicon {
    phrases: HashSet<Vec<String>>,
    longest: usize,
}

impl TermLexicon {
    /// Builds a lexicon from phrases. Each phrase is tokenized with the
    /// corpus tokenizer and must yield at least two tokens.
    pub fn new<S: AsRef<str>>(phrases: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut lexicon = Self::default();
        for (i, phrase) in phrases.into_iter().enumerate() {
            lexicon.insert(phrase.as_ref(), i + 1)?;
        }
        Ok(lexicon)
    }

    /// One phrase per line; blank lines and `#` comments are ignored.
    pub fn from_reader(mut reader: impl BufRead) -> Result<Self> {
        let mut lexicon = Self::default();
        let mut buf = Vec::new();
        let mut line_no = 0;
        while let Some(line) = read_text_line(&mut reader, &mut buf)? {
            line_no += 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            lexicon.insert(trimmed, line_no)?;
        }
        Ok(lexicon)
    }

    fn insert(&mut self, phrase: &str, line: usize) -> Result<()> {
        let tokens = tokenize(phrase);
        if tokens.len() < 2 {
            return Err(CorpusError::Format {
                line,
                message: format!("lexicon phrase {phrase:?} has fewer than two tokens"),
            });
        }
        self.longest = self.longest.max(tokens.len());
        self.phrases.insert(tokens);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    /// Single left-to-right pass; at each position the longest matching
    /// phrase wins and matches never overlap.
    pub fn merge(&self, tokens: &[String]) -> Vec<String> {
        let mut out = Vec::with_capacity(tokens.len());
        let mut i = 0;
        while i < tokens.len() {
            let max = self.longest.min(tokens.len() - i);
            let matched = (2..=max).rev().find(|&n| self.phrases.contains(&tokens[i..i + n]));
            match matched {
                Some(n) => {
                    out.push(tokens[i..i + n].join("_"));
                    i += n;
                }
                None => {
                    out.push(tokens[i].clone());
                    i += 1;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn merges_known_term() {
        let lex = TermLexicon::new(["human immunodeficiency virus"]).unwrap();
        assert_eq!(
            lex.merge(&toks(&["human", "immunodeficiency", "virus"])),
            toks(&["human_immunodeficiency_virus"])
        );
    }

    #[test]
    fn no_match_is_identity() {
        let lex = TermLexicon::new(["new york"]).unwrap();
        let input = toks(&["old", "york", "new"]);
        assert_eq!(lex.merge(&input), input);
    }

    #[test]
    fn longest_match_wins() {
        let lex = TermLexicon::new(["new york", "new york city"]).unwrap();
        assert_eq!(lex.merge(&toks(&["new", "york", "city"])), toks(&["new_york_city"]));
        assert_eq!(
            lex.merge(&toks(&["new", "york", "new", "york", "city", "!"])),
            toks(&["new_york", "new_york_city", "!"])
        );
    }

    #[test]
    fn reader_skips_comments_and_rejects_single_words() {
        let lex = TermLexicon::from_reader("# terms\n\nNew York\n".as_bytes()).unwrap();
        assert_eq!(lex.len(), 1);
        let err = TermLexicon::from_reader("new york\nvirus\n".as_bytes()).unwrap_err();
        assert!(matches!(err, CorpusError::Format { line: 2, .. }));
    }

    proptest! {
        #[test]
        fn merging_only_replaces_interior_spaces(
            words in proptest::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..20)
        ) {
            let lex = TermLexicon::new(["a b", "a b c", "c d"]).unwrap();
            let input = toks(&words);
            let merged = lex.merge(&input);
            prop_assert_eq!(merged.join(" ").replace('_', " "), input.join(" "));
        }
    }
}
