use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CorpusError, QaPair, Result, TokenId, Vocabulary, EOS, GO, PAD, UNK};

/// One pair as id sequences laid out for teacher forcing.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodedExample {
    pub source: Vec<TokenId>,
    /// `<go>` followed by the answer ids.
    pub decoder_input: Vec<TokenId>,
    /// The answer ids followed by `<eos>`.
    pub decoder_target: Vec<TokenId>,
    pub mask: Vec<u8>,
}

impl EncodedExample {
    pub fn target_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// Supervised target ids without the closing `<eos>`.
    pub fn answer_ids(&self) -> &[TokenId] {
        &self.decoder_target[..self.target_tokens().saturating_sub(1)]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    SourceTooLong { len: usize, max_len: usize },
    TargetTooLong { len: usize, max_len: usize },
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::SourceTooLong { len, max_len } => {
                write!(f, "source too long ({len} > {max_len})")
            }
            Rejection::TargetTooLong { len, max_len } => {
                write!(f, "target too long ({len} > {max_len})")
            }
        }
    }
}

/// Maps tokens to ids; returns whether any token fell back to `<unk>`.
pub fn encode_tokens(tokens: &[String], vocab: &Vocabulary) -> (Vec<TokenId>, bool) {
    let ids: Vec<TokenId> = tokens.iter().map(|t| vocab.id(t)).collect();
    let unk = ids.contains(&UNK);
    (ids, unk)
}

pub fn encode_example(
    pair: &QaPair,
    vocab: &Vocabulary,
    max_len: usize,
) -> std::result::Result<EncodedExample, Rejection> {
    if pair.question.len() > max_len {
        return Err(Rejection::SourceTooLong {
            len: pair.question.len(),
            max_len,
        });
    }
    if pair.answer.len() > max_len {
        return Err(Rejection::TargetTooLong {
            len: pair.answer.len(),
            max_len,
        });
    }
    let (source, _) = encode_tokens(&pair.question, vocab);
    let (answer, _) = encode_tokens(&pair.answer, vocab);
    let mut decoder_input = Vec::with_capacity(answer.len() + 1);
    decoder_input.push(GO);
    decoder_input.extend(&answer);
    let mut decoder_target = answer;
    decoder_target.push(EOS);
    let mask = vec![1; decoder_target.len()];
    Ok(EncodedExample {
        source,
        decoder_input,
        decoder_target,
        mask,
    })
}

/// A chunk of examples padded to common source and target lengths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Position of each example in the slice handed to [`make_batches`].
    pub indices: Vec<usize>,
    pub examples: Vec<EncodedExample>,
    pub source_lengths: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn target_tokens(&self) -> usize {
        self.examples.iter().map(EncodedExample::target_tokens).sum()
    }

    fn pad(indices: Vec<usize>, examples: &[EncodedExample]) -> Self {
        let chosen: Vec<&EncodedExample> = indices.iter().map(|&i| &examples[i]).collect();
        let src_len = chosen.iter().map(|e| e.source.len()).max().unwrap_or(0);
        let tgt_len = chosen.iter().map(|e| e.decoder_target.len()).max().unwrap_or(0);
        let source_lengths = chosen.iter().map(|e| e.source.len()).collect();
        let examples = chosen
            .into_iter()
            .map(|e| {
                let mut padded = e.clone();
                padded.source.resize(src_len, PAD);
                padded.decoder_input.resize(tgt_len, PAD);
                padded.decoder_target.resize(tgt_len, PAD);
                padded.mask.resize(tgt_len, 0);
                padded
            })
            .collect();
        Self {
            indices,
            examples,
            source_lengths,
        }
    }
}

/// Optionally shuffles (seeded Fisher-Yates), then cuts consecutive chunks
/// of `batch_size`; the final chunk may be smaller.
pub fn make_batches(
    examples: &[EncodedExample],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if examples.is_empty() {
        return Err(CorpusError::InvalidArgument("cannot batch an empty example list".into()));
    }
    if batch_size == 0 {
        return Err(CorpusError::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order
        .chunks(batch_size)
        .map(|chunk| Batch::pad(chunk.to_vec(), examples))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        let pairs = [QaPair::from_text("hi", "hello").unwrap()];
        Vocabulary::build(&pairs, 1, 100).unwrap()
    }

    fn example(src: usize, tgt: usize) -> EncodedExample {
        let answer: Vec<TokenId> = (0..tgt).map(|i| 4 + i).collect();
        EncodedExample {
            source: (0..src).map(|i| 4 + i).collect(),
            decoder_input: std::iter::once(GO).chain(answer.iter().copied()).collect(),
            decoder_target: answer.iter().copied().chain(std::iter::once(EOS)).collect(),
            mask: vec![1; tgt + 1],
        }
    }

    #[test]
    fn definitional_layout() {
        let v = vocab();
        let enc = encode_example(&QaPair::from_text("hi", "hello").unwrap(), &v, 10).unwrap();
        let (hi, hello) = (v.id("hi"), v.id("hello"));
        assert_eq!(enc.source, vec![hi]);
        assert_eq!(enc.decoder_input, vec![GO, hello]);
        assert_eq!(enc.decoder_target, vec![hello, EOS]);
        assert_eq!(enc.mask, vec![1, 1]);
    }

    #[test]
    fn overlong_question_rejected() {
        let pair = QaPair::from_text("a b c d e f g h i j k", "ok").unwrap();
        let rejection = encode_example(&pair, &vocab(), 10).unwrap_err();
        assert_eq!(rejection, Rejection::SourceTooLong { len: 11, max_len: 10 });
        assert!(rejection.to_string().starts_with("source too long"));
        let pair = QaPair::from_text("ok", "a b c").unwrap();
        assert!(matches!(encode_example(&pair, &vocab(), 2), Err(Rejection::TargetTooLong { .. })));
    }

    #[test]
    fn oov_maps_to_unk() {
        let enc = encode_example(&QaPair::from_text("zebra hi", "hello").unwrap(), &vocab(), 10).unwrap();
        assert_eq!(enc.source[0], UNK);
        let (_, unk) = encode_tokens(&["zebra".to_string()], &vocab());
        assert!(unk);
    }

    #[test]
    fn batch_sizes_for_1050_examples() {
        let examples: Vec<_> = (0..1050).map(|i| example(1 + i % 5, 1 + i % 3)).collect();
        let batches = make_batches(&examples, 100, Some(7)).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Batch::len).collect();
        assert_eq!(sizes.len(), 11);
        assert!(sizes[..10].iter().all(|&s| s == 100));
        assert_eq!(sizes[10], 50);
    }

    #[test]
    fn single_example_is_unchanged() {
        let ex = example(3, 2);
        let batches = make_batches(std::slice::from_ref(&ex), 100, None).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].examples, vec![ex]);
        assert_eq!(batches[0].source_lengths, vec![3]);
    }

    #[test]
    fn seeded_shuffle_is_deterministic() {
        let examples: Vec<_> = (0..50).map(|i| example(1 + i % 4, 1)).collect();
        let a = make_batches(&examples, 8, Some(42)).unwrap();
        let b = make_batches(&examples, 8, Some(42)).unwrap();
        let c = make_batches(&examples, 8, Some(43)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn empty_input_errors() {
        assert!(make_batches(&[], 4, None).is_err());
    }

    proptest! {
        #[test]
        fn batches_partition_and_pad_consistently(
            shapes in proptest::collection::vec((1usize..8, 1usize..8), 1..60),
            batch_size in 1usize..16,
            seed in proptest::option::of(any::<u64>()),
        ) {
            let examples: Vec<_> = shapes.iter().map(|&(s, t)| example(s, t)).collect();
            let batches = make_batches(&examples, batch_size, seed).unwrap();
            let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..examples.len()).collect::<Vec<_>>());
            for batch in &batches {
                let src = batch.examples[0].source.len();
                let tgt = batch.examples[0].decoder_target.len();
                for (k, ex) in batch.examples.iter().enumerate() {
                    let original = &examples[batch.indices[k]];
                    prop_assert_eq!(ex.source.len(), src);
                    prop_assert_eq!(ex.decoder_input.len(), tgt);
                    prop_assert_eq!(ex.mask.len(), tgt);
                    prop_assert!(batch.source_lengths[k] <= src);
                    prop_assert_eq!(&ex.source[..batch.source_lengths[k]], &original.source[..]);
                    for i in 0..tgt {
                        prop_assert_eq!(ex.mask[i] == 1, ex.decoder_target[i] != PAD);
                        if i + 1 < original.decoder_target.len() {
                            prop_assert_eq!(ex.decoder_target[i], ex.decoder_input[i + 1]);
                        }
                    }
                }
            }
        }
    }
}
