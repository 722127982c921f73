use std::collections::HashMap;
use std::io::{BufRead, Write};

use super::{read_text_line, CorpusError, QaPair, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const GO: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

/// Reserved tokens occupying ids 0..=3, in id order.
pub const SPECIALS: [&str; 4] = ["<pad>", "<go>", "<eos>", "<unk>"];

/// Bijective token/id map. Ids are dense and the four specials always come
/// first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Validates and indexes a full token list (specials included).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(CorpusError::InvalidVocab(format!(
                "first entries must be {SPECIALS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, token) in tokens.iter().enumerate() {
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(CorpusError::InvalidVocab(format!("bad token {token:?} at id {id}")));
            }
            if index.insert(token.clone(), id).is_some() {
                return Err(CorpusError::InvalidVocab(format!("duplicate token {token:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// The specials only.
    pub fn specials_only() -> Self {
        Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).collect())
            .expect("specials form a valid vocabulary")
    }

    /// Counts tokens on both sides of every pair, keeps those seen at least
    /// `min_count` times, orders them by descending count then
    /// lexicographically, and truncates so the total size (specials
    /// included) is at most `max_size`.
    pub fn build(pairs: &[QaPair], min_count: usize, max_size: usize) -> Result<Self> {
        if min_count < 1 {
            return Err(CorpusError::InvalidArgument("min_count must be at least 1".into()));
        }
        if max_size < SPECIALS.len() {
            return Err(CorpusError::InvalidArgument(format!(
                "max_size must be at least {}",
                SPECIALS.len()
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for pair in pairs {
            for token in pair.question.iter().chain(&pair.answer) {
                *counts.entry(token.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && !SPECIALS.contains(&t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - SPECIALS.len());

        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or `<unk>` when absent.
    pub fn id(&self, token: &str) -> TokenId {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `vocab.txt`: one token per line, line number is the id.
    pub fn read_from(mut reader: impl BufRead) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut buf = Vec::new();
        while let Some(line) = read_text_line(&mut reader, &mut buf)? {
            tokens.push(line);
        }
        // Tolerate a trailing blank line left by editors.
        while tokens.last().is_some_and(|t| t.is_empty()) {
            tokens.pop();
        }
        Self::from_tokens(tokens)
    }

    pub fn write_to(&self, mut writer: impl Write) -> Result<()> {
        for token in &self.tokens {
            writeln!(writer, "{token}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(q: &[&str], a: &[&str]) -> QaPair {
        QaPair::new(
            q.iter().map(|s| s.to_string()).collect(),
            a.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    fn counted_corpus() -> Vec<QaPair> {
        // hi:5, there:2, rare:1
        vec![
            pair(&["hi", "there"], &["hi"]),
            pair(&["hi"], &["hi", "there"]),
            pair(&["hi"], &["rare"]),
        ]
    }

    #[test]
    fn ordering_and_min_count() {
        let vocab = Vocabulary::build(&counted_corpus(), 2, 100).unwrap();
        assert_eq!(vocab.tokens(), ["<pad>", "<go>", "<eos>", "<unk>", "hi", "there"]);
    }

    #[test]
    fn truncation_keeps_specials() {
        let vocab = Vocabulary::build(&counted_corpus(), 2, 5).unwrap();
        assert_eq!(vocab.tokens(), ["<pad>", "<go>", "<eos>", "<unk>", "hi"]);
    }

    #[test]
    fn empty_corpus_gives_specials() {
        let vocab = Vocabulary::build(&[], 1, 100).unwrap();
        assert_eq!(vocab, Vocabulary::specials_only());
        assert_eq!(vocab.len(), 4);
    }

    #[test]
    fn ties_break_lexicographically() {
        let vocab = Vocabulary::build(&[pair(&["b", "a"], &["c"])], 1, 100).unwrap();
        assert_eq!(&vocab.tokens()[4..], ["a", "b", "c"]);
    }

    #[test]
    fn lookup_miss_is_unk() {
        let vocab = Vocabulary::build(&counted_corpus(), 1, 100).unwrap();
        assert_eq!(vocab.id("zebra"), UNK);
        assert_eq!(vocab.id("<go>"), GO);
        assert_eq!(vocab.token(PAD), Some("<pad>"));
    }

    #[test]
    fn rejects_bad_token_lists() {
        assert!(Vocabulary::from_tokens(vec!["<go>".into()]).is_err());
        let mut dup: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        dup.extend(["x".into(), "x".into()]);
        assert!(Vocabulary::from_tokens(dup).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let vocab = Vocabulary::build(&counted_corpus(), 1, 100).unwrap();
        let mut buf = Vec::new();
        vocab.write_to(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("<pad>\n<go>\n<eos>\n<unk>\n"));
        assert_eq!(Vocabulary::read_from(buf.as_slice()).unwrap(), vocab);
    }

    proptest! {
        #[test]
        fn ids_are_dense_and_invert(words in proptest::collection::vec("[a-e]{1,3}", 1..40), max_size in 4usize..30) {
            let pairs: Vec<QaPair> = words.chunks(2).filter(|c| c.len() == 2)
                .map(|c| QaPair::new(vec![c[0].clone()], vec![c[1].clone()]).unwrap()).collect();
            let vocab = Vocabulary::build(&pairs, 1, max_size).unwrap();
            prop_assert!(vocab.len() <= max_size);
            for (id, token) in vocab.tokens().iter().enumerate() {
                prop_assert_eq!(vocab.get(token), Some(id));
                prop_assert_eq!(vocab.token(id), Some(token.as_str()));
            }
        }
    }
}
