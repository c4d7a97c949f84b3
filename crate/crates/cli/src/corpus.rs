//! Loading text corpora and splitting them into training and held-out sets.
//!
//! A corpus path may be a directory (every `.txt` file is one document and
//! every `.jsonl` file holds one document per line), a single `.jsonl` file
//! or any other single file, which is read as one document. JSON records
//! carry a `"text"` string and optionally `"split": "train" | "held_out"`;
//! records without a split are assigned one by a seeded shuffle.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("corpus not found: {0}")]
    NotFound(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Record {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("corpus {0} has no documents")]
    Empty(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
}

/// One input record as stored in `.jsonl` files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// Where each document came from and where it went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source: String,
    /// 1-based line for `.jsonl` records, 0 for whole files.
    pub line: usize,
    pub bytes: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub held_out_fraction: f64,
    pub train_docs: usize,
    pub held_out_docs: usize,
    pub train_bytes: usize,
    pub held_out_bytes: usize,
    /// Training documents first, each split in training order.
    pub documents: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Vec<u8>>,
    pub held_out: Vec<Vec<u8>>,
    pub manifest: Manifest,
}

struct Doc {
    entry: ManifestEntry,
    text: Vec<u8>,
    split: Option<Split>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn is_jsonl(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "jsonl")
}

fn read_file(path: &Path, out: &mut Vec<Doc>) -> Result<(), CorpusError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let source = path.display().to_string();
    if !is_jsonl(path) {
        out.push(Doc {
            entry: ManifestEntry {
                source,
                line: 0,
                bytes: bytes.len(),
                split: Split::Train,
            },
            text: bytes,
            split: None,
        });
        return Ok(());
    }
    let text = String::from_utf8(bytes).map_err(|_| CorpusError::Record {
        path: source.clone(),
        line: 0,
        msg: "file is not UTF-8".into(),
    })?;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(line).map_err(|e| CorpusError::Record {
            path: source.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(Doc {
            entry: ManifestEntry {
                source: source.clone(),
                line: i + 1,
                bytes: r.text.len(),
                split: Split::Train,
            },
            text: r.text.into_bytes(),
            split: r.split,
        });
    }
    Ok(())
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        let wanted = p.extension().is_some_and(|e| e == "txt" || e == "jsonl");
        if p.is_file() && wanted {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

impl Corpus {
    /// Reads `path`, drops empty documents and splits the rest. The result
    /// depends only on the file contents, `held_out_fraction` and `seed`.
    pub fn load(path: &Path, held_out_fraction: f64, seed: u64) -> Result<Self, CorpusError> {
        if !path.exists() {
            return Err(CorpusError::NotFound(path.display().to_string()));
        }
        let files = if path.is_dir() {
            list_dir(path)?
        } else {
            vec![path.to_path_buf()]
        };
        let mut docs = Vec::new();
        for f in &files {
            read_file(f, &mut docs)?;
        }
        docs.retain(|d| !d.text.is_empty());
        if docs.is_empty() {
            return Err(CorpusError::Empty(path.display().to_string()));
        }
        Ok(Self::split(docs, held_out_fraction, seed))
    }

    fn split(docs: Vec<Doc>, held_out_fraction: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut tagged, mut untagged): (Vec<Doc>, Vec<Doc>) =
            docs.into_iter().partition(|d| d.split.is_some());
        untagged.shuffle(&mut rng);
        let n_held = (untagged.len() as f64 * held_out_fraction).round() as usize;
        for (i, d) in untagged.iter_mut().enumerate() {
            d.split = Some(if i < n_held {
                Split::HeldOut
            } else {
                Split::Train
            });
        }
        tagged.append(&mut untagged);

        let (mut train, mut held_out) = (Vec::new(), Vec::new());
        let (mut train_entries, mut held_entries) = (Vec::new(), Vec::new());
        for mut d in tagged {
            let split = d.split.expect("assigned above");
            d.entry.split = split;
            match split {
                Split::Train => {
                    train.push(d.text);
                    train_entries.push(d.entry);
                }
                Split::HeldOut => {
                    held_out.push(d.text);
                    held_entries.push(d.entry);
                }
            }
        }
        let manifest = Manifest {
            seed,
            held_out_fraction,
            train_docs: train.len(),
            held_out_docs: held_out.len(),
            train_bytes: train.iter().map(Vec::len).sum(),
            held_out_bytes: held_out.iter().map(Vec::len).sum(),
            documents: train_entries.into_iter().chain(held_entries).collect(),
        };
        Self {
            train,
            held_out,
            manifest,
        }
    }

    pub fn docs(&self, split: Split) -> &[Vec<u8>] {
        match split {
            Split::Train => &self.train,
            Split::HeldOut => &self.held_out,
        }
    }

    pub fn write_manifest(&self, path: &Path) -> Result<(), CorpusError> {
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(path, json + "\n").map_err(io_err(path))
    }
}

/// Writes records as JSON lines.
pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}
