//! Sequence-to-sequence question answering over dialog corpora.
//!
//! The pipeline runs [`corpus`] preprocessing into a vocabulary and padded
//! batches, trains the LSTM encoder-decoder in [`seq2seq`] with the loop in
//! [`trainer`], and answers free-text questions through [`inference`].
//! [`gradcheck`] verifies every hand-written backward rule against central
//! finite differences.

pub mod corpus;
pub mod gradcheck;
pub mod inference;
pub mod parallel;
pub mod seq2seq;
pub mod tensor;
pub mod trainer;

pub use parallel::Execution;
pub use tensor::{Real, Tensor};
