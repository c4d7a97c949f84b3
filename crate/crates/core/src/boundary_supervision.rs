//! Supervision masks that coarsen subword boundaries to a target number of
//! bytes per patch.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use crate::tokenization::BoundaryMask;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SupervisionError {
    #[error("this merge strategy needs an auxiliary language model")]
    MissingAuxLm,
    #[error("auxiliary model returned {got} scores for {expected} patches")]
    ScoreCount { expected: usize, got: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("auxiliary model failed: {0}")]
    Aux(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MergeKind {
    Subword,
    Bpe,
    Entropy,
    CrossEntropy,
}

impl std::str::FromStr for MergeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "subword" => Ok(Self::Subword),
            "bpe" => Ok(Self::Bpe),
            "entropy" => Ok(Self::Entropy),
            "xent" | "cross-entropy" => Ok(Self::CrossEntropy),
            _ => Err(format!(
                "unknown merge strategy {s:?} (subword|bpe|entropy|xent)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeStrategy {
    pub kind: MergeKind,
    /// Target bytes per patch.
    pub target: f64,
}

/// Scores of one subword token under an auxiliary LM, in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchScore {
    /// Entropy of the predictive distribution the token was drawn from.
    pub entropy: f64,
    /// `-log p(token | prefix)`.
    pub cross_entropy: f64,
}

/// Anything that can score the patches of a subword mask.
///
/// Patch `i` of `mask` is scored by the distribution that predicts it from the
/// preceding patches.
pub trait AuxLm {
    fn patch_scores(
        &self,
        x: &[u8],
        mask: &BoundaryMask,
    ) -> Result<Vec<PatchScore>, SupervisionError>;
}

fn compression(bytes: usize, patches: usize) -> f64 {
    bytes as f64 / patches as f64
}

fn needs_more(bytes: usize, patches: usize, t: f64) -> bool {
    patches > 1 && compression(bytes, patches) < t
}

/// Per-document BPE over patch contents.
///
/// Each round counts adjacent patch pairs by content, picks the most frequent
/// (ties: earliest first occurrence) and merges all of its non-overlapping
/// occurrences left to right. Stops once bytes per patch reaches `t` or one
/// patch is left.
pub fn merge_bpe_per_example(mask: &BoundaryMask, x: &[u8], t: f64) -> BoundaryMask {
    let n = x.len();
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for (i, &f) in mask.flags.iter().enumerate() {
        if f || i + 1 == n {
            spans.push((start, i + 1));
            start = i + 1;
        }
    }
    while needs_more(n, spans.len(), t) {
        let mut counts: HashMap<(&[u8], &[u8]), (usize, usize)> = HashMap::new();
        for (i, w) in spans.windows(2).enumerate() {
            let key = (&x[w[0].0..w[0].1], &x[w[1].0..w[1].1]);
            counts.entry(key).or_insert((0, i)).0 += 1;
        }
        let (&(a, b), _) = counts
            .iter()
            .max_by(|(_, (ca, fa)), (_, (cb, fb))| ca.cmp(cb).then(fb.cmp(fa)))
            .expect("at least two patches");
        let mut next = Vec::with_capacity(spans.len());
        let mut i = 0;
        while i < spans.len() {
            if i + 1 < spans.len()
                && &x[spans[i].0..spans[i].1] == a
                && &x[spans[i + 1].0..spans[i + 1].1] == b
            {
                next.push((spans[i].0, spans[i + 1].1));
                i += 2;
            } else {
                next.push(spans[i]);
                i += 1;
            }
        }
        spans = next;
    }
    let mut flags = vec![false; n];
    for (_, e) in spans {
        flags[e - 1] = true;
    }
    BoundaryMask::new(flags)
}

#[derive(PartialEq)]
struct Candidate {
    sum: f64,
    left: usize,
    right: usize,
    left_ver: u32,
    right_ver: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // Max-heap order: smallest sum first, then leftmost.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .sum
            .total_cmp(&self.sum)
            .then_with(|| other.left.cmp(&self.left))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Greedily merges the adjacent patch pair with the smallest summed score
/// (ties: leftmost) until bytes per patch reaches `t`. A merged patch scores
/// the sum of its parts.
pub fn merge_by_scores(
    mask: &BoundaryMask,
    scores: &[f64],
    t: f64,
) -> Result<BoundaryMask, SupervisionError> {
    let ends = mask.ends();
    let n = mask.len();
    let mut ends = ends;
    if ends.last() != Some(&(n.wrapping_sub(1))) && n > 0 {
        ends.push(n - 1);
    }
    let p = ends.len();
    if scores.len() != p {
        return Err(SupervisionError::ScoreCount {
            expected: p,
            got: scores.len(),
        });
    }
    let mut score = scores.to_vec();
    let mut alive = vec![true; p];
    let mut ver = vec![0u32; p];
    let mut prev: Vec<Option<usize>> = (0..p).map(|i| i.checked_sub(1)).collect();
    let mut next: Vec<Option<usize>> = (0..p).map(|i| (i + 1 < p).then_some(i + 1)).collect();
    let mut heap: BinaryHeap<Candidate> = (0..p.saturating_sub(1))
        .map(|i| Candidate {
            sum: score[i] + score[i + 1],
            left: i,
            right: i + 1,
            left_ver: 0,
            right_ver: 0,
        })
        .collect();
    let mut patches = p;
    while needs_more(n, patches, t) {
        let Some(c) = heap.pop() else { break };
        if !alive[c.left]
            || !alive[c.right]
            || ver[c.left] != c.left_ver
            || ver[c.right] != c.right_ver
        {
            continue;
        }
        let (l, r) = (c.left, c.right);
        score[l] += score[r];
        alive[r] = false;
        ver[l] += 1;
        next[l] = next[r];
        if let Some(nn) = next[r] {
            prev[nn] = Some(l);
        }
        patches -= 1;
        if let Some(pl) = prev[l] {
            heap.push(Candidate {
                sum: score[pl] + score[l],
                left: pl,
                right: l,
                left_ver: ver[pl],
                right_ver: ver[l],
            });
        }
        if let Some(nl) = next[l] {
            heap.push(Candidate {
                sum: score[l] + score[nl],
                left: l,
                right: nl,
                left_ver: ver[l],
                right_ver: ver[nl],
            });
        }
    }
    // A surviving patch ends where its last absorbed patch ended.
    let mut flags = vec![false; n];
    let mut i = Some(0);
    while let Some(cur) = i {
        let end_idx = next[cur].map(|nx| nx - 1).unwrap_or(p - 1);
        flags[ends[end_idx]] = true;
        i = next[cur];
    }
    Ok(BoundaryMask::new(flags))
}

/// Entropy-guided merging.
pub fn merge_entropy(
    mask: &BoundaryMask,
    x: &[u8],
    t: f64,
    aux: Option<&dyn AuxLm>,
) -> Result<BoundaryMask, SupervisionError> {
    let scores = aux
        .ok_or(SupervisionError::MissingAuxLm)?
        .patch_scores(x, mask)?;
    let s: Vec<f64> = scores.iter().map(|s| s.entropy).collect();
    merge_by_scores(mask, &s, t)
}

/// Cross-entropy-guided merging.
pub fn merge_cross_entropy(
    mask: &BoundaryMask,
    x: &[u8],
    t: f64,
    aux: Option<&dyn AuxLm>,
) -> Result<BoundaryMask, SupervisionError> {
    let scores = aux
        .ok_or(SupervisionError::MissingAuxLm)?
        .patch_scores(x, mask)?;
    let s: Vec<f64> = scores.iter().map(|s| s.cross_entropy).collect();
    merge_by_scores(mask, &s, t)
}

/// Applies `strategy` to a subword mask.
pub fn supervision_mask(
    strategy: &MergeStrategy,
    subword: &BoundaryMask,
    x: &[u8],
    aux: Option<&dyn AuxLm>,
) -> Result<BoundaryMask, SupervisionError> {
    match strategy.kind {
        MergeKind::Subword => Ok(subword.clone()),
        MergeKind::Bpe => Ok(merge_bpe_per_example(subword, x, strategy.target)),
        MergeKind::Entropy => merge_entropy(subword, x, strategy.target, aux),
        MergeKind::CrossEntropy => merge_cross_entropy(subword, x, strategy.target, aux),
    }
}

/// Total bytes over total patches.
pub fn attained_compression<'m>(
    masks: impl IntoIterator<Item = &'m BoundaryMask>,
) -> Result<f64, SupervisionError> {
    let (mut bytes, mut patches) = (0usize, 0usize);
    for m in masks {
        bytes += m.len();
        patches += m.popcount();
    }
    if bytes == 0 || patches == 0 {
        return Err(SupervisionError::EmptyCorpus);
    }
    Ok(compression(bytes, patches))
}
