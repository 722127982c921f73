//! Binary checkpoint format (`.sqac`).
//!
//! ```text
//! magic      4 bytes   "SQAC"
//! version    u32 LE    currently 1
//! header_len u64 LE
//! header     UTF-8 JSON: hyper, vocabulary, tensor manifest
//! payload    f32 LE values, tensors back to back in manifest order
//! ```
//!
//! Manifest order is fixed: embedding, encoder layers (w, u, b each),
//! decoder layers, projection w, projection b. Offsets are relative to the
//! start of the payload.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Hyper, ModelParams};
use crate::corpus::{CorpusError, Vocabulary};
use crate::tensor::{Real, Tensor};

pub const MAGIC: [u8; 4] = *b"SQAC";
pub const VERSION: u32 = 1;

const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint")]
    NotCheckpoint,
    #[error("unsupported version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint vocabulary invalid: {0}")]
    Vocab(#[from] CorpusError),
    #[error("checkpoint does not describe a valid model: {0}")]
    Model(#[from] super::ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    hyper: Hyper,
    vocab: Vec<String>,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

/// A loaded checkpoint. Parameters come back in `f32`, the storage
/// precision.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub vocab: Vocabulary,
    pub hyper: Hyper,
}

fn encode_checkpoint<T: Real>(params: &ModelParams<T>, vocab: &Vocabulary) -> Result<Vec<u8>, CheckpointError> {
    params.validate()?;
    if vocab.len() != params.hyper.vocab_size {
        return Err(CheckpointError::Corrupt(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            params.hyper.vocab_size
        )));
    }
    let mut offset = 0u64;
    let mut tensors = Vec::new();
    for (name, t) in params.named_tensors() {
        let length = (t.len() * 4) as u64;
        tensors.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            length,
        });
        offset += length;
    }
    let header = Header {
        hyper: params.hyper,
        vocab: vocab.tokens().to_vec(),
        tensors,
    };
    let header = serde_json::to_vec(&header).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

    let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in params.tensors() {
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes a checkpoint. `f64` parameters are rounded to `f32`. The file is
/// written to a sibling temp path and renamed into place.
pub fn save_checkpoint<T: Real>(params: &ModelParams<T>, vocab: &Vocabulary, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(params, vocab)?;
    let tmp = path.with_extension("sqac.tmp");
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}

fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(CheckpointError::NotCheckpoint);
    }
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::Corrupt("truncated preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(PREAMBLE))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| CheckpointError::Corrupt("header extends past end of file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
    let payload = &bytes[header_end..];

    let hyper = header.hyper;
    hyper.validate()?;
    let vocab = Vocabulary::from_tokens(header.vocab)?;
    if vocab.len() != hyper.vocab_size {
        return Err(CheckpointError::Corrupt(format!(
            "vocabulary has {} tokens, header says {}",
            vocab.len(),
            hyper.vocab_size
        )));
    }

    let mut params = ModelParams::<f32>::zeros(hyper);
    let names = ModelParams::<f32>::tensor_names(&hyper);
    if header.tensors.len() != names.len() {
        return Err(CheckpointError::Corrupt(format!(
            "manifest lists {} tensors, expected {}",
            header.tensors.len(),
            names.len()
        )));
    }
    let mut expected_offset = 0u64;
    for ((entry, name), slot) in header.tensors.iter().zip(&names).zip(params.tensors_mut()) {
        if &entry.name != name || entry.shape != slot.shape() {
            return Err(CheckpointError::Corrupt(format!(
                "manifest entry {:?} {:?} does not match expected {name:?} {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        if entry.offset != expected_offset || entry.length != (slot.len() * 4) as u64 {
            return Err(CheckpointError::Corrupt(format!("bad offset or length for {name}")));
        }
        let start = entry.offset as usize;
        let end = start + entry.length as usize;
        let raw = payload
            .get(start..end)
            .ok_or_else(|| CheckpointError::Corrupt(format!("payload truncated inside {name}")))?;
        for (dst, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        expected_offset += entry.length;
    }
    if payload.len() as u64 != expected_offset {
        return Err(CheckpointError::Corrupt(format!(
            "payload is {} bytes, manifest describes {expected_offset}",
            payload.len()
        )));
    }
    Ok(Checkpoint { params, vocab, hyper })
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params
            .named_tensors()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::QaPair;

    fn fixture() -> (ModelParams<f32>, Vocabulary) {
        let pairs = [QaPair::from_text("hi there", "hello you").unwrap()];
        let vocab = Vocabulary::build(&pairs, 1, 100).unwrap();
        let params = ModelParams::init(Hyper::new(vocab.len(), 5, 4, 2), 9, None).unwrap();
        (params, vocab)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (params, vocab) = fixture();
        let bytes = encode_checkpoint(&params, &vocab).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.vocab, vocab);
        assert_eq!(ck.hyper, params.hyper);
        for (a, b) in ck.params.tensors().iter().zip(params.tensors()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(ck.tensor("projection.b").unwrap().shape(), &[vocab.len()]);
    }

    #[test]
    fn preamble_layout() {
        let (params, vocab) = fixture();
        let bytes = encode_checkpoint(&params, &vocab).unwrap();
        assert_eq!(&bytes[..4], b"SQAC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        assert_eq!(header["tensors"][0]["name"], "embedding");
        assert_eq!(header["tensors"][1]["name"], "encoder.0.w");
        let payload = bytes.len() - 16 - header_len;
        assert_eq!(payload, params.num_parameters() * 4);
    }

    #[test]
    fn wrong_magic() {
        let (params, vocab) = fixture();
        let mut bytes = encode_checkpoint(&params, &vocab).unwrap();
        bytes[0] = b'X';
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, CheckpointError::NotCheckpoint));
        assert_eq!(err.to_string(), "not a checkpoint");
    }

    #[test]
    fn wrong_version() {
        let (params, vocab) = fixture();
        let mut bytes = encode_checkpoint(&params, &vocab).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, CheckpointError::UnsupportedVersion(2)));
        assert!(err.to_string().starts_with("unsupported version"));
    }

    #[test]
    fn truncated_or_padded_payload() {
        let (params, vocab) = fixture();
        let bytes = encode_checkpoint(&params, &vocab).unwrap();
        let err = decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, CheckpointError::Corrupt(_)), "{err}");
        let mut longer = bytes.clone();
        longer.extend([0, 0, 0, 0]);
        assert!(matches!(decode_checkpoint(&longer), Err(CheckpointError::Corrupt(_))));
        assert!(matches!(decode_checkpoint(&bytes[..20]), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn file_round_trip() {
        let (params, vocab) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sqac");
        save_checkpoint(&params, &vocab, &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.params, params);
    }
}
