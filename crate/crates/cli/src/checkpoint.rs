//! Binary checkpoint files. All integers are little-endian.
//!
//! ```text
//! magic        8 bytes   "BLFTCKPT"
//! version      u32       FORMAT_VERSION
//! header_len   u32       then header_len bytes of UTF-8 `key = value` lines
//! vocab_len    u32       then vocab_len bytes of subword vocabulary text
//! count        u32       number of tensors, in name order
//! per tensor:
//!   name_len   u16       then name_len bytes of UTF-8 name
//!   dtype      u8        1 = f64
//!   rank       u8        then rank x u64 dimensions
//!   data       8 x numel bytes, f64 bit patterns
//! checksum     32 bytes  SHA-256 of every preceding byte
//! ```

use std::path::Path;

use bytelift_core::model::ParamStore;
use bytelift_core::numerics::Tensor;
use bytelift_core::tokenization::SubwordVocab;
use sha2::{Digest, Sha256};

use crate::config::{parse_kv, ConfigError, RunConfig};

pub const MAGIC: &[u8; 8] = b"BLFTCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint not found: {0}")]
    NotFound(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint header: {0}")]
    Config(#[from] ConfigError),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Subword teacher.
    Teacher,
    /// Byte-level model.
    Byte,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Teacher => "teacher",
            Kind::Byte => "byte",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    /// Optimizer steps behind these weights.
    pub step: usize,
    pub config: RunConfig,
    pub vocab: SubwordVocab,
    pub params: ParamStore,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| CheckpointError::Format(format!("{what} too large")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);
        let header = format!(
            "checkpoint.kind = {}\ncheckpoint.step = {}\n{}",
            self.kind.name(),
            self.step,
            self.config.to_text()
        );
        put_u32(&mut buf, len_u32(header.len(), "header")?);
        buf.extend_from_slice(header.as_bytes());
        let vocab = self.vocab.to_text();
        put_u32(&mut buf, len_u32(vocab.len(), "vocabulary")?);
        buf.extend_from_slice(vocab.as_bytes());
        put_u32(&mut buf, len_u32(self.params.len(), "tensor count")?);
        for (name, t) in self.params.iter() {
            let n = u16::try_from(name.len())
                .map_err(|_| CheckpointError::Format(format!("name {name} too long")))?;
            buf.extend_from_slice(&n.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(DTYPE_F64);
            let rank = u8::try_from(t.shape().len())
                .map_err(|_| CheckpointError::Format("rank too large".into()))?;
            buf.push(rank);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 {
            return Err(if bytes.starts_with(&MAGIC[..bytes.len().min(8)]) {
                CheckpointError::Truncated
            } else {
                CheckpointError::BadMagic
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        if structural_len(bytes).map_or(true, |n| n + 32 > bytes.len()) {
            return Err(CheckpointError::Truncated);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 12 };
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| CheckpointError::Format("header is not UTF-8".into()))?;
        let vocab_len = r.u32()? as usize;
        let vocab_text = std::str::from_utf8(r.take(vocab_len)?)
            .map_err(|_| CheckpointError::Format("vocabulary is not UTF-8".into()))?;
        let vocab = SubwordVocab::from_text(vocab_text)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;

        let mut kind = None;
        let mut step = 0;
        let mut config = RunConfig::default();
        for (k, v) in parse_kv(header)? {
            match k.as_str() {
                "checkpoint.kind" => {
                    kind = Some(match v.as_str() {
                        "teacher" => Kind::Teacher,
                        "byte" => Kind::Byte,
                        _ => return Err(CheckpointError::Format(format!("unknown kind {v:?}"))),
                    })
                }
                "checkpoint.step" => {
                    step = v
                        .parse()
                        .map_err(|_| CheckpointError::Format(format!("bad step {v:?}")))?
                }
                _ => config.set(&k, &v)?,
            }
        }
        let kind =
            kind.ok_or_else(|| CheckpointError::Format("header lacks checkpoint.kind".into()))?;

        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            if r.u8()? != DTYPE_F64 {
                return Err(CheckpointError::Format(format!(
                    "unsupported dtype for {name}"
                )));
            }
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Format(format!("shape of {name} overflows")))?;
            let raw = r.take(numel.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
            if params.contains(&name) {
                return Err(CheckpointError::Format(format!("duplicate tensor {name}")));
            }
            params.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Format(
                "trailing bytes after tensors".into(),
            ));
        }
        Ok(Self {
            kind,
            step,
            config,
            vocab,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| {
            if source.kind() == std::io::ErrorKind::NotFound {
                CheckpointError::NotFound(path.display().to_string())
            } else {
                CheckpointError::Io {
                    path: path.display().to_string(),
                    source,
                }
            }
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Length of everything before the checksum, from the length fields alone;
/// `None` when the bytes run out first.
fn structural_len(bytes: &[u8]) -> Option<usize> {
    let mut r = Reader {
        buf: bytes,
        pos: 12,
    };
    let h = r.u32().ok()? as usize;
    r.take(h).ok()?;
    let v = r.u32().ok()? as usize;
    r.take(v).ok()?;
    for _ in 0..r.u32().ok()? {
        let n = r.u16().ok()? as usize;
        r.take(n + 1).ok()?;
        let rank = r.u8().ok()? as usize;
        let mut numel = 1usize;
        for _ in 0..rank {
            numel = numel.checked_mul(r.u64().ok()? as usize)?;
        }
        r.take(numel.checked_mul(8)?).ok()?;
    }
    Some(r.pos)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
