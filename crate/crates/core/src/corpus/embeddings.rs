use std::collections::BTreeMap;
use std::io::BufRead;

use super::{read_text_line, CorpusError, Result, TokenId, Vocabulary};

/// Vectors read from a `token v1 .. vD` text file, restricted to tokens in
/// the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedEmbeddings {
    pub dim: usize,
    pub rows: BTreeMap<TokenId, Vec<f64>>,
}

impl PretrainedEmbeddings {
    pub fn coverage(&self) -> usize {
        self.rows.len()
    }
}

/// Loads word2vec/GloVe-style text vectors. Every non-blank line must carry
/// exactly `dim` numbers; the first occurrence of a token wins.
pub fn load_pretrained_embeddings(
    mut reader: impl BufRead,
    vocab: &Vocabulary,
    dim: usize,
) -> Result<PretrainedEmbeddings> {
    let mut rows = BTreeMap::new();
    let mut buf = Vec::new();
    let mut line_no = 0;
    while let Some(line) = read_text_line(&mut reader, &mut buf)? {
        line_no += 1;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| CorpusError::Format {
                    line: line_no,
                    message: format!("not a number: {f:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(CorpusError::Format {
                line: line_no,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CorpusError::Format {
                line: line_no,
                message: "non-finite value".into(),
            });
        }
        if let Some(id) = vocab.get(token) {
            rows.entry(id).or_insert(values);
        }
    }
    Ok(PretrainedEmbeddings { dim, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::QaPair;

    fn vocab() -> Vocabulary {
        Vocabulary::build(&[QaPair::from_text("hi", "there").unwrap()], 1, 100).unwrap()
    }

    #[test]
    fn covers_known_tokens_only() {
        let v = vocab();
        let emb = load_pretrained_embeddings("hi 0.5 -1.25 3\nunseen 1 2 3\n".as_bytes(), &v, 3).unwrap();
        assert_eq!(emb.coverage(), 1);
        assert_eq!(emb.rows[&v.id("hi")], vec![0.5, -1.25, 3.0]);
    }

    #[test]
    fn empty_file_has_no_coverage() {
        assert_eq!(load_pretrained_embeddings("".as_bytes(), &vocab(), 3).unwrap().coverage(), 0);
    }

    #[test]
    fn short_row_reports_line() {
        let err = load_pretrained_embeddings("hi 1 2 3\nthere 1 2\n".as_bytes(), &vocab(), 3).unwrap_err();
        assert!(matches!(err, CorpusError::Format { line: 2, .. }), "{err}");
    }
}
