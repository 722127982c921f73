//! Dialog corpus preprocessing: parsing raw corpora into question/answer
//! pairs, tokenization, multi-word term merging, vocabulary construction,
//! example encoding and padded batching.

mod batch;
mod embeddings;
mod parse;
mod synthetic;
mod terms;
mod tokenize;
mod vocab;

use std::io;

use thiserror::Error;

pub use batch::{encode_example, encode_tokens, make_batches, Batch, EncodedExample, Rejection};
pub use embeddings::{load_pretrained_embeddings, PretrainedEmbeddings};
pub use parse::{parse_cornell, parse_tsv, write_tsv, ParsedCorpus, QaPair, CORNELL_SEPARATOR};
pub use synthetic::{copy_pairs, copy_token};
pub use terms::TermLexicon;
pub use tokenize::tokenize;
pub use vocab::{TokenId, Vocabulary, EOS, GO, PAD, SPECIALS, UNK};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("empty corpus: no question/answer pairs could be parsed")]
    EmptyCorpus,
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Reads one line as text. Valid UTF-8 is taken as is; anything else is
/// decoded as Latin-1, which is how the movie-dialog releases are encoded.
pub(crate) fn read_text_line(reader: &mut impl io::BufRead, buf: &mut Vec<u8>) -> io::Result<Option<String>> {
    buf.clear();
    if reader.read_until(b'\n', buf)? == 0 {
        return Ok(None);
    }
    while matches!(buf.last(), Some(b'\n' | b'\r')) {
        buf.pop();
    }
    let text = match std::str::from_utf8(buf) {
        Ok(s) => s.to_owned(),
        Err(_) => buf.iter().map(|&b| b as char).collect(),
    };
    Ok(Some(text))
}
