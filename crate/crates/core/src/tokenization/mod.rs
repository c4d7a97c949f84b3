//! Bytes, a small BPE subword tokenizer, boundary masks and suffix lookup.

mod bpe;
mod mask;
mod suffix;

pub use bpe::{train_bpe, BpeTraining, SubwordVocab};
pub use mask::BoundaryMask;
pub use suffix::SuffixIndex;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TokenizationError {
    #[error("empty input")]
    Empty,
    #[error("invalid UTF-8 at byte {0}")]
    InvalidUtf8(usize),
    #[error("token id {id} out of range for vocabulary of {len}")]
    UnknownId { id: u32, len: usize },
    #[error("vocabulary file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("bad run-length mask: {0}")]
    BadMask(String),
}

/// A document as raw bytes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ByteSeq {
    pub bytes: Vec<u8>,
    pub doc_id: Option<String>,
}

impl ByteSeq {
    pub fn new(bytes: Vec<u8>) -> Self {
        Self {
            bytes,
            doc_id: None,
        }
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// UTF-8 byte image of a non-empty string.
pub fn utf8_to_bytes(text: &str) -> Result<ByteSeq, TokenizationError> {
    if text.is_empty() {
        return Err(TokenizationError::Empty);
    }
    Ok(ByteSeq::new(text.as_bytes().to_vec()))
}

/// Validates raw input as UTF-8 before it becomes a [`ByteSeq`].
pub fn bytes_from_utf8(raw: &[u8]) -> Result<ByteSeq, TokenizationError> {
    match std::str::from_utf8(raw) {
        Ok(s) => utf8_to_bytes(s),
        Err(e) => Err(TokenizationError::InvalidUtf8(e.valid_up_to())),
    }
}

/// Boundary mask of the canonical tokenization: true where a token ends.
pub fn subword_boundary_mask(vocab: &SubwordVocab, x: &[u8]) -> BoundaryMask {
    let ids = vocab.encode(x);
    let mut flags = vec![false; x.len()];
    let mut pos = 0;
    for id in ids {
        pos += vocab.token_bytes(id).len();
        flags[pos - 1] = true;
    }
    BoundaryMask::new(flags)
}
