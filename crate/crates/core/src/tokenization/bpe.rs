use std::collections::HashMap;
use std::fmt::Write as _;

use super::TokenizationError;

/// Byte-level BPE vocabulary.
///
/// Ids `0..256` are the single bytes, `256 + r` is the token created by merge
/// rank `r`, and the last id is the BOS special (no bytes).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocab {
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
}

/// Result of [`train_bpe`]; `truncated` is set when the corpus ran out of
/// repeated pairs before reaching the requested size.
#[derive(Debug, Clone)]
pub struct BpeTraining {
    pub vocab: SubwordVocab,
    pub truncated: bool,
}

const HEADER: &str = "# bytelift-vocab v1";

impl SubwordVocab {
    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self, TokenizationError> {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::new();
        for (r, &(a, b)) in merges.iter().enumerate() {
            let len = tokens.len();
            if a as usize >= len || b as usize >= len {
                return Err(TokenizationError::UnknownId { id: a.max(b), len });
            }
            let mut t = tokens[a as usize].clone();
            t.extend_from_slice(&tokens[b as usize]);
            if ranks.insert((a, b), r as u32).is_some() {
                return Err(TokenizationError::Parse {
                    line: r,
                    msg: "duplicate merge".into(),
                });
            }
            tokens.push(t);
        }
        Ok(Self {
            tokens,
            merges,
            ranks,
        })
    }

    /// Vocabulary with only the 256 byte tokens and BOS.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("no merges")
    }

    /// Total ids including BOS.
    pub fn len(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bos(&self) -> u32 {
        self.tokens.len() as u32
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Byte string of a token; empty for BOS.
    pub fn token_bytes(&self, id: u32) -> &[u8] {
        self.tokens
            .get(id as usize)
            .map(|t| t.as_slice())
            .unwrap_or(&[])
    }

    /// Non-special tokens with their ids.
    pub fn iter_tokens(&self) -> impl Iterator<Item = (u32, &[u8])> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (i as u32, t.as_slice()))
    }

    /// Canonical encoding: repeatedly merge every non-overlapping occurrence
    /// (left to right) of the lowest-rank adjacent pair.
    pub fn encode(&self, x: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = x.iter().map(|&b| b as u32).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            ids = replace_pair(&ids, pair, 256 + rank);
        }
        ids
    }

    /// Concatenated bytes; BOS contributes nothing.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>, TokenizationError> {
        let mut out = Vec::new();
        for &id in ids {
            if id as usize > self.tokens.len() {
                return Err(TokenizationError::UnknownId {
                    id,
                    len: self.len(),
                });
            }
            out.extend_from_slice(self.token_bytes(id));
        }
        Ok(out)
    }

    /// Text form: a header line, then one line per id.
    ///
    /// ```text
    /// # bytelift-vocab v1 merges=<M>
    /// <id> <hex bytes> byte
    /// <id> <hex bytes> merge <rank> <left id> <right id>
    /// <id> - bos
    /// ```
    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER} merges={}\n", self.merges.len());
        for (id, t) in self.tokens.iter().enumerate() {
            let hex: String = t.iter().map(|b| format!("{b:02x}")).collect();
            if id < 256 {
                writeln!(s, "{id} {hex} byte").unwrap();
            } else {
                let r = id - 256;
                let (a, b) = self.merges[r];
                writeln!(s, "{id} {hex} merge {r} {a} {b}").unwrap();
            }
        }
        writeln!(s, "{} - bos", self.bos()).unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizationError> {
        let err = |line: usize, msg: &str| TokenizationError::Parse {
            line: line + 1,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(0, "missing header"))?;
        if !header.starts_with(HEADER) {
            return Err(err(0, "bad header"));
        }
        let mut merges = Vec::new();
        let mut hexes = Vec::new();
        let mut saw_bos = false;
        for (ln, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let id: usize = f[0].parse().map_err(|_| err(ln, "bad id"))?;
            match f.get(2).copied() {
                Some("byte") if id < 256 && id == hexes.len() => hexes.push(f[1].to_string()),
                Some("merge") if f.len() == 6 && id == hexes.len() => {
                    let p = |s: &str| s.parse::<u32>().map_err(|_| err(ln, "bad merge field"));
                    if p(f[3])? as usize != id - 256 {
                        return Err(err(ln, "rank does not match id"));
                    }
                    merges.push((p(f[4])?, p(f[5])?));
                    hexes.push(f[1].to_string());
                }
                Some("bos") if id == hexes.len() => saw_bos = true,
                _ => return Err(err(ln, "unexpected entry")),
            }
        }
        if hexes.len() < 256 || !saw_bos {
            return Err(err(0, "incomplete vocabulary"));
        }
        let vocab = Self::from_merges(merges)?;
        for (id, hex) in hexes.iter().enumerate() {
            let want: String = vocab.tokens[id]
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect();
            if &want != hex {
                return Err(err(id + 1, "token bytes do not match merges"));
            }
        }
        Ok(vocab)
    }
}

fn replace_pair(ids: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Corpus-level BPE up to `vocab_size` ids (256 bytes + merges + BOS).
///
/// Adjacent pairs are counted with overlap; the most frequent pair wins, ties
/// going to the lower left id and then the lower right id. Training stops early
/// once no pair occurs at least twice.
pub fn train_bpe<D: AsRef<[u8]>>(corpus: &[D], vocab_size: usize) -> BpeTraining {
    let target = vocab_size.saturating_sub(257);
    let mut docs: Vec<Vec<u32>> = corpus
        .iter()
        .map(|d| d.as_ref().iter().map(|&b| b as u32).collect())
        .collect();
    let mut merges = Vec::with_capacity(target);
    let mut truncated = false;
    let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
    while merges.len() < target {
        counts.clear();
        for d in &docs {
            for w in d.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
        let best = counts
            .iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            .map(|(&p, &c)| (p, c));
        match best {
            Some((pair, c)) if c >= 2 => {
                let new_id = 256 + merges.len() as u32;
                for d in docs.iter_mut() {
                    *d = replace_pair(d, pair, new_id);
                }
                merges.push(pair);
            }
            _ => {
                truncated = true;
                break;
            }
        }
    }
    BpeTraining {
        vocab: SubwordVocab::from_merges(merges).expect("merges reference existing ids"),
        truncated,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_only_layout() {
        let v = train_bpe::<&[u8]>(&[], 256).vocab;
        assert_eq!(v.merges().len(), 0);
        assert_eq!(v.bos(), 256);
        assert_eq!(v.len(), 257);
    }

    #[test]
    fn text_round_trip() {
        let v = train_bpe(&[b"the cat sat on the mat with the hat".as_slice()], 270).vocab;
        let back = SubwordVocab::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn text_rejects_tampered_bytes() {
        let v = train_bpe(&[b"abababab".as_slice()], 258).vocab;
        let t = v.to_text().replace("256 6162 merge", "256 6163 merge");
        assert!(SubwordVocab::from_text(&t).is_err());
    }
}
