//! Question answering over a trained model, the line-oriented REPL, and
//! held-out evaluation.

use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::corpus::{encode_tokens, make_batches, tokenize, EncodedExample, TermLexicon, TokenId, Vocabulary, UNK};
use crate::parallel::Execution;
use crate::seq2seq::{decode_greedy, encode, forward_loss, Checkpoint, Hyper, ModelError, ModelParams};
use crate::tensor::Real;

pub const DEFAULT_MAX_LEN: usize = 10;

/// Rendering of `<unk>` in generated answers.
pub const UNK_TEXT: &str = "unk";

const CLOSING_PUNCTUATION: [char; 6] = ['.', ',', '!', '?', ';', ':'];

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("vocabulary has {vocab} tokens but the model expects {model}")]
    VocabMismatch { vocab: usize, model: usize },
    #[error("max_len and max_steps must be at least 1")]
    InvalidLimits,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerResult {
    pub answer_text: String,
    pub answer_tokens: Vec<String>,
    pub terminated: bool,
    pub unk_in_question: bool,
}

/// Joins tokens into display text: no space before closing punctuation,
/// underscores in merged terms become spaces, and the first alphabetic
/// character is upper-cased.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let word = tok.as_ref().split('_').filter(|s| !s.is_empty()).collect::<Vec<_>>().join(" ");
        if word.is_empty() {
            continue;
        }
        let attach = word.starts_with(CLOSING_PUNCTUATION);
        if !out.is_empty() && !attach {
            out.push(' ');
        }
        out.push_str(&word);
    }
    capitalize_first_alphabetic(&out)
}

fn capitalize_first_alphabetic(text: &str) -> String {
    let Some((pos, c)) = text.char_indices().find(|(_, c)| c.is_alphabetic()) else {
        return text.to_string();
    };
    let mut upper = c.to_uppercase();
    match (upper.next(), upper.next()) {
        (Some(u), None) => {
            let mut out = String::with_capacity(text.len() + 2);
            out.push_str(&text[..pos]);
            out.push(u);
            out.push_str(&text[pos + c.len_utf8()..]);
            out
        }
        _ => text.to_string(),
    }
}

/// Answers one question. Questions longer than `max_len` tokens are
/// truncated; at most `max_steps` answer tokens are generated.
pub fn answer<T: Real>(
    question: &str,
    params: &ModelParams<T>,
    vocab: &Vocabulary,
    lexicon: Option<&TermLexicon>,
    max_len: usize,
    max_steps: usize,
) -> Result<AnswerResult> {
    if max_len == 0 || max_steps == 0 {
        return Err(InferenceError::InvalidLimits);
    }
    if vocab.len() != params.hyper.vocab_size {
        return Err(InferenceError::VocabMismatch {
            vocab: vocab.len(),
            model: params.hyper.vocab_size,
        });
    }
    let mut tokens = tokenize(question);
    if tokens.is_empty() {
        return Err(InferenceError::EmptyQuestion);
    }
    if let Some(lex) = lexicon {
        tokens = lex.merge(&tokens);
    }
    let (mut ids, unk_in_question) = encode_tokens(&tokens, vocab);
    ids.truncate(max_len);
    let state = encode(&ids, ids.len(), params)?;
    let (out, terminated) = decode_greedy(&state, params, max_steps)?;
    let answer_tokens: Vec<String> = out.iter().map(|&id| render_token(id, vocab)).collect();
    Ok(AnswerResult {
        answer_text: detokenize(&answer_tokens),
        answer_tokens,
        terminated,
        unk_in_question,
    })
}

fn render_token(id: TokenId, vocab: &Vocabulary) -> String {
    if id == UNK {
        UNK_TEXT.to_string()
    } else {
        vocab.token(id).unwrap_or(UNK_TEXT).to_string()
    }
}

/// A loaded model ready to answer questions. Immutable once built, so it
/// can be shared across threads.
#[derive(Debug, Clone)]
pub struct Engine {
    params: ModelParams<f32>,
    vocab: Vocabulary,
    lexicon: Option<TermLexicon>,
    max_len: usize,
    max_steps: usize,
}

impl Engine {
    pub fn new(params: ModelParams<f32>, vocab: Vocabulary) -> Result<Self> {
        params.validate()?;
        if vocab.len() != params.hyper.vocab_size {
            return Err(InferenceError::VocabMismatch {
                vocab: vocab.len(),
                model: params.hyper.vocab_size,
            });
        }
        Ok(Self {
            params,
            vocab,
            lexicon: None,
            max_len: DEFAULT_MAX_LEN,
            max_steps: DEFAULT_MAX_LEN,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        Self::new(ck.params, ck.vocab)
    }

    pub fn with_lexicon(mut self, lexicon: TermLexicon) -> Self {
        self.lexicon = Some(lexicon);
        self
    }

    pub fn with_limits(mut self, max_len: usize, max_steps: usize) -> Result<Self> {
        if max_len == 0 || max_steps == 0 {
            return Err(InferenceError::InvalidLimits);
        }
        self.max_len = max_len;
        self.max_steps = max_steps;
        Ok(self)
    }

    pub fn answer(&self, question: &str) -> Result<AnswerResult> {
        answer(
            question,
            &self.params,
            &self.vocab,
            self.lexicon.as_ref(),
            self.max_len,
            self.max_steps,
        )
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn hyper(&self) -> Hyper {
        self.params.hyper
    }
}

/// Reads questions line by line until EOF or `/quit`, writing `Q: `
/// prompts and `A: ` answers. Blank lines only re-prompt. Returns the
/// number of questions answered.
pub fn repl<R: BufRead, W: Write>(engine: &Engine, input: R, mut output: W) -> io::Result<usize> {
    let mut answered = 0;
    let mut lines = input.lines();
    loop {
        write!(output, "Q: ")?;
        output.flush()?;
        let Some(line) = lines.next().transpose()? else {
            writeln!(output)?;
            break;
        };
        let line = line.trim();
        if line == "/quit" {
            break;
        }
        if line.is_empty() {
            continue;
        }
        match engine.answer(line) {
            Ok(result) => writeln!(output, "A: {}", result.answer_text)?,
            Err(InferenceError::EmptyQuestion) => continue,
            Err(e) => return Err(io::Error::other(e)),
        }
        answered += 1;
    }
    Ok(answered)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub examples: usize,
    pub tokens: usize,
    pub mean_loss: f64,
    pub perplexity: f64,
    /// Fraction of examples whose greedy decode reproduces the answer
    /// exactly and then stops.
    pub exact_match: f64,
}

/// Whether greedy decoding of `example.source` yields exactly its answer
/// followed by `<eos>`.
pub fn greedy_exact<T: Real>(example: &EncodedExample, params: &ModelParams<T>) -> Result<bool> {
    let answer = example.answer_ids();
    let state = encode(&example.source, example.source.len(), params)?;
    let (out, terminated) = decode_greedy(&state, params, answer.len() + 1)?;
    Ok(terminated && out == answer)
}

/// Token-weighted mean loss, perplexity and greedy exact-match rate.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    examples: &[EncodedExample],
    batch_size: usize,
    exec: Execution,
) -> Result<EvalReport> {
    let batches = make_batches(examples, batch_size.max(1), None)
        .map_err(|e| ModelError::Contract(e.to_string()))?;
    let mut total = 0.0;
    let mut tokens = 0;
    for batch in &batches {
        let (sum, n) = forward_loss(batch, params, exec)?;
        total += sum.as_f64();
        tokens += n;
    }
    let hits = exec.map(examples, |ex| greedy_exact(ex, params));
    let mut correct = 0;
    for hit in hits {
        correct += usize::from(hit?);
    }
    let mean_loss = total / tokens as f64;
    Ok(EvalReport {
        examples: examples.len(),
        tokens,
        mean_loss,
        perplexity: mean_loss.exp(),
        exact_match: correct as f64 / examples.len() as f64,
    })
}
