//! LSTM encoder-decoder with a shared word embedding.
//!
//! The encoder and decoder are separate stacks of LSTM layers. The encoder
//! reads the question and hands its final `(h, c)` per layer to the decoder,
//! which is teacher-forced during training and fed its own argmax at
//! inference. Logits come from an affine projection of the top decoder
//! layer. All backward rules are written by hand.

mod checkpoint;
mod lstm;
mod model;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PretrainedEmbeddings;
use crate::tensor::{Real, Tensor, TensorError};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, MAGIC, VERSION};
pub use lstm::{lstm_cell_backward, lstm_cell_forward, CellGrads};
pub use model::{
    decode_greedy, decode_train, embedding_backward, embedding_lookup, encode, forward_backward,
    forward_backward_with, forward_loss, sequence_loss, sequence_loss_backward,
};
pub(crate) use model::{decode_backward, decode_cached, encode_backward, encode_cached};

/// Uniform init range for all weight matrices.
pub const INIT_SCALE: f64 = 0.08;
/// Initial value of the forget-gate bias slice.
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("non-finite loss")]
    NonFiniteLoss,
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyper {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub num_layers: usize,
}

impl Hyper {
    pub fn new(vocab_size: usize, embed_dim: usize, hidden: usize, num_layers: usize) -> Self {
        Self {
            vocab_size,
            embed_dim,
            hidden,
            num_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 || self.embed_dim < 1 || self.hidden < 1 || self.num_layers < 1 {
            return Err(ModelError::Contract(format!(
                "need V >= 5, E >= 1, H >= 1, layers >= 1; got {self:?}"
            )));
        }
        Ok(())
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embed_dim
        } else {
            self.hidden
        }
    }
}

/// Weights of one LSTM layer. Gate blocks are stacked in the order
/// input, forget, cell candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer<T> {
    /// `[4H × D_in]`
    pub w: Tensor<T>,
    /// `[4H × H]`
    pub u: Tensor<T>,
    /// `[4H]`
    pub b: Tensor<T>,
}

impl<T: Real> LstmLayer<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w: Tensor::zeros(&[4 * hidden, input]),
            u: Tensor::zeros(&[4 * hidden, hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.cols()
    }

    pub fn input(&self) -> usize {
        self.w.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub hyper: Hyper,
    /// `[V × E]`, shared by encoder and decoder.
    pub embedding: Tensor<T>,
    pub encoder: Vec<LstmLayer<T>>,
    pub decoder: Vec<LstmLayer<T>>,
    /// `[V × H]`
    pub projection_w: Tensor<T>,
    /// `[V]`
    pub projection_b: Tensor<T>,
}

/// Gradients mirror the parameter layout.
pub type Gradients<T> = ModelParams<T>;

impl<T: Real> ModelParams<T> {
    pub fn zeros(hyper: Hyper) -> Self {
        let layers = |h: &Hyper| -> Vec<LstmLayer<T>> {
            (0..h.num_layers)
                .map(|l| LstmLayer::zeros(h.layer_input(l), h.hidden))
                .collect()
        };
        Self {
            hyper,
            embedding: Tensor::zeros(&[hyper.vocab_size, hyper.embed_dim]),
            encoder: layers(&hyper),
            decoder: layers(&hyper),
            projection_w: Tensor::zeros(&[hyper.vocab_size, hyper.hidden]),
            projection_b: Tensor::zeros(&[hyper.vocab_size]),
        }
    }

    /// Seeded initialisation: weights uniform in `±INIT_SCALE`, biases zero
    /// except the forget-gate slices which start at `FORGET_BIAS`.
    /// Pretrained rows overwrite their embedding rows.
    pub fn init(hyper: Hyper, seed: u64, pretrained: Option<&PretrainedEmbeddings>) -> Result<Self> {
        hyper.validate()?;
        let mut params = Self::zeros(hyper);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |t: &mut Tensor<T>| {
            for v in t.data_mut() {
                *v = T::of(rng.random_range(-INIT_SCALE..INIT_SCALE));
            }
        };
        fill(&mut params.embedding);
        for layer in params.encoder.iter_mut().chain(params.decoder.iter_mut()) {
            fill(&mut layer.w);
            fill(&mut layer.u);
            let h = hyper.hidden;
            layer.b.data_mut()[h..2 * h].fill(T::of(FORGET_BIAS));
        }
        fill(&mut params.projection_w);

        if let Some(pre) = pretrained {
            for (&id, row) in &pre.rows {
                if row.len() != hyper.embed_dim {
                    return Err(ModelError::Format(format!(
                        "pretrained row for id {id} has width {}, expected {}",
                        row.len(),
                        hyper.embed_dim
                    )));
                }
                if id >= hyper.vocab_size {
                    return Err(ModelError::TokenOutOfRange {
                        id,
                        vocab_size: hyper.vocab_size,
                    });
                }
                for (dst, &src) in params.embedding.row_mut(id).iter_mut().zip(row) {
                    *dst = T::of(src);
                }
            }
        }
        Ok(params)
    }

    /// Rebuilds parameters from tensors in canonical order.
    pub fn from_tensors(hyper: Hyper, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let mut params = Self::zeros(hyper);
        let names = Self::tensor_names(&hyper);
        if tensors.len() != names.len() {
            return Err(ModelError::Contract(format!(
                "expected {} tensors, got {}",
                names.len(),
                tensors.len()
            )));
        }
        for ((slot, t), name) in params.tensors_mut().into_iter().zip(tensors).zip(names) {
            if slot.shape() != t.shape() {
                return Err(ModelError::Contract(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.hyper)
    }

    /// Canonical tensor names in checkpoint order.
    pub fn tensor_names(hyper: &Hyper) -> Vec<String> {
        let mut names = vec!["embedding".to_string()];
        for side in ["encoder", "decoder"] {
            for l in 0..hyper.num_layers {
                for part in ["w", "u", "b"] {
                    names.push(format!("{side}.{l}.{part}"));
                }
            }
        }
        names.push("projection.w".into());
        names.push("projection.b".into());
        names
    }

    /// Every tensor in canonical order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.embedding];
        for layer in self.encoder.iter().chain(&self.decoder) {
            out.extend([&layer.w, &layer.u, &layer.b]);
        }
        out.push(&self.projection_w);
        out.push(&self.projection_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        for layer in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.extend([&mut layer.w, &mut layer.u, &mut layer.b]);
        }
        out.push(&mut self.projection_w);
        out.push(&mut self.projection_b);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        Self::tensor_names(&self.hyper).into_iter().zip(self.tensors()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Order-sensitive hash of every parameter's bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for t in self.tensors() {
            t.shape().hash(&mut hasher);
            for v in t.data() {
                v.as_f64().to_bits().hash(&mut hasher);
            }
        }
        hasher.finish()
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Self, alpha: T) -> Result<()> {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.add_scaled(src, alpha)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let layer = |l: &LstmLayer<T>| LstmLayer {
            w: l.w.cast(),
            u: l.u.cast(),
            b: l.b.cast(),
        };
        ModelParams {
            hyper: self.hyper,
            embedding: self.embedding.cast(),
            encoder: self.encoder.iter().map(layer).collect(),
            decoder: self.decoder.iter().map(layer).collect(),
            projection_w: self.projection_w.cast(),
            projection_b: self.projection_b.cast(),
        }
    }

    /// Checks every tensor shape against `hyper`.
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let expected = Self::zeros(self.hyper);
        for ((name, got), want) in self.named_tensors().into_iter().zip(expected.tensors()) {
            if got.shape() != want.shape() {
                return Err(ModelError::Contract(format!(
                    "{name}: shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        if self.encoder.len() != self.hyper.num_layers || self.decoder.len() != self.hyper.num_layers {
            return Err(ModelError::Contract("layer count disagrees with hyper".into()));
        }
        Ok(())
    }
}

/// Hidden and cell vectors of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
}

/// One `(h, c)` pair per layer; the encoder's final value is the fixed-size
/// summary of the question.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub layers: Vec<LayerState<T>>,
}

impl<T: Real> LstmState<T> {
    pub fn zeros(num_layers: usize, hidden: usize) -> Self {
        Self {
            layers: (0..num_layers)
                .map(|_| LayerState {
                    h: vec![T::zero(); hidden],
                    c: vec![T::zero(); hidden],
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.h.iter().chain(&l.c).all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PretrainedEmbeddings;
    use std::collections::BTreeMap;

    fn hyper() -> Hyper {
        Hyper::new(7, 4, 3, 2)
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = ModelParams::<f32>::init(hyper(), 11, None).unwrap();
        let b = ModelParams::<f32>::init(hyper(), 11, None).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::<f32>::init(hyper(), 12, None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn biases_zero_except_forget_slice() {
        let p = ModelParams::<f64>::init(hyper(), 1, None).unwrap();
        let h = p.hyper.hidden;
        for layer in p.encoder.iter().chain(&p.decoder) {
            let b = layer.b.data();
            assert!(b[..h].iter().all(|&v| v == 0.0));
            assert!(b[h..2 * h].iter().all(|&v| v == 1.0));
            assert!(b[2 * h..].iter().all(|&v| v == 0.0));
        }
        assert!(p.projection_b.data().iter().all(|&v| v == 0.0));
        for t in [&p.embedding, &p.projection_w, &p.encoder[1].u] {
            assert!(t.data().iter().all(|v| v.abs() < INIT_SCALE));
        }
    }

    #[test]
    fn layer_shapes_follow_hyper() {
        let p = ModelParams::<f32>::zeros(Hyper::new(9, 5, 3, 2));
        assert_eq!(p.encoder[0].w.shape(), &[12, 5]);
        assert_eq!(p.encoder[1].w.shape(), &[12, 3]);
        assert_eq!(p.decoder[1].u.shape(), &[12, 3]);
        assert_eq!(p.projection_w.shape(), &[9, 3]);
        assert_eq!(p.tensors().len(), ModelParams::<f32>::tensor_names(&p.hyper).len());
        p.validate().unwrap();
    }

    #[test]
    fn pretrained_rows_overwrite_embedding() {
        let mut rows = BTreeMap::new();
        rows.insert(5, vec![0.5, -0.5, 0.25, 1.0]);
        let pre = PretrainedEmbeddings { dim: 4, rows };
        let p = ModelParams::<f64>::init(hyper(), 3, Some(&pre)).unwrap();
        assert_eq!(p.embedding.row(5), &[0.5, -0.5, 0.25, 1.0]);

        let mut rows = BTreeMap::new();
        rows.insert(5, vec![0.5, -0.5]);
        let bad = PretrainedEmbeddings { dim: 2, rows };
        assert!(matches!(
            ModelParams::<f64>::init(hyper(), 3, Some(&bad)),
            Err(ModelError::Format(_))
        ));
    }

    #[test]
    fn rejects_tiny_vocab() {
        assert!(ModelParams::<f32>::init(Hyper::new(4, 2, 2, 2), 0, None).is_err());
    }
}
