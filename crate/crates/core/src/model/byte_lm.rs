//! Byte-level model: local encoder, boundary predictor, pooling into the
//! global model, depooling and the local decoder with its fused head.
//!
//! Sequences are prefixed with a BOS pseudo-byte at position 0, which also
//! closes a pseudo-patch. Byte `i` of the document sits at position `i + 1`.

use super::layers::{global_forward, global_layers, mlstm_stack, norm, Bound, KvCache, LocalState};
use super::{ModelConfig, ModelError, BOS_BYTE};
use crate::numerics::{Graph, Tensor, Var};
use crate::tokenization::{BoundaryMask, SuffixIndex};

/// Guard for the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryMode {
    /// Position `t` is scored from `ê_{t+1}` and `ê_t`.
    NonCausal,
    /// Position `t` is scored from `ê_t` and `ê_{t-1}`.
    Causal,
}

/// Where the depooled patch states come from.
#[derive(Debug, Clone, Copy)]
pub enum GlobalSource<'t> {
    /// Run the global model on the pooled encoder states.
    Pooled,
    /// Use fixed per-patch states (one row per patch including BOS); the
    /// encoder states enter the depool projection without gradient.
    Fixed(&'t Tensor),
}

#[derive(Debug, Clone)]
pub struct ByteLmOutput {
    /// Encoder states, `[n + 1, d]`.
    pub e_hat: Var,
    /// Boundary probabilities for bytes `0..n-1` (the last byte is forced);
    /// `None` for single-byte inputs.
    pub scores: Option<Var>,
    /// Byte-level mask used for pooling, final boundary included.
    pub mask: BoundaryMask,
    /// Patch end positions in the BOS-prefixed sequence.
    pub ends: Vec<usize>,
    /// Pooled patch states, `[patches, d]`.
    pub pooled: Var,
    /// Global outputs per patch; absent when the source was fixed.
    pub h_hat: Option<Var>,
    pub z: Var,
    pub z_hat: Var,
    /// Fused log-probabilities for bytes `0..n`, `[n, 512]`.
    pub logp: Var,
}

/// End positions in the BOS-prefixed sequence for a byte-level mask: the BOS
/// pseudo-patch, every flagged byte, and the final byte.
pub fn pool_ends(mask: &BoundaryMask) -> Vec<usize> {
    let n = mask.len();
    let mut ends = vec![0];
    ends.extend(
        mask.flags
            .iter()
            .enumerate()
            .filter(|&(i, &f)| f || i + 1 == n)
            .map(|(i, _)| i + 1),
    );
    ends
}

/// Thresholds boundary probabilities for bytes `0..n-1` and forces a boundary
/// after the last byte.
pub fn predicted_mask(scores: &[f64], n: usize, threshold: f64) -> BoundaryMask {
    let mut flags: Vec<bool> = scores
        .iter()
        .take(n.saturating_sub(1))
        .map(|&p| p > threshold)
        .collect();
    flags.resize(n.saturating_sub(1), false);
    if n > 0 {
        flags.push(true);
    }
    BoundaryMask::new(flags)
}

/// Fused target for byte `i`: the byte plus whether a patch ends there.
pub fn fused_targets(x: &[u8], mask: &BoundaryMask) -> Vec<usize> {
    let n = x.len();
    x.iter()
        .enumerate()
        .map(|(i, &b)| b as usize + if mask.flags[i] || i + 1 == n { 256 } else { 0 })
        .collect()
}

/// Gathers the encoder state at each patch end.
pub fn pool_last(g: &mut Graph, e_hat: Var, ends: &[usize]) -> Result<Var, ModelError> {
    if ends.is_empty() {
        return Err(ModelError::EmptyMask);
    }
    Ok(g.gather_rows(e_hat, ends)?)
}

/// Index into `[start_vector; h_hat]` for each position: 0 before the first
/// patch end, else one plus the last patch whose end is at or before it.
pub fn depool_index(len: usize, ends: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    let mut k = 0;
    for j in 0..len {
        while k < ends.len() && ends[k] <= j {
            k += 1;
        }
        out.push(k);
    }
    out
}

/// `z_j = W_depool ê_j + ĥ_{k(j)}`, with the start vector standing in for
/// `ĥ` before the first patch closes.
pub fn depool(
    g: &mut Graph,
    b: &Bound,
    e_hat: Var,
    h_hat: Var,
    ends: &[usize],
) -> Result<Var, ModelError> {
    let len = g.value(e_hat).rows();
    let d = g.value(e_hat).cols();
    let start = g.reshape(b.get("start_vector")?, &[1, d])?;
    let table = g.concat_rows(&[start, h_hat])?;
    let ctx = g.gather_rows(table, &depool_index(len, ends))?;
    let proj = g.matmul(e_hat, b.get("depool_proj")?)?;
    Ok(g.add(proj, ctx)?)
}

/// Boundary probabilities `½(1 − cos(W_q a, W_k b))` for the free positions
/// `1..len-1` of a BOS-prefixed sequence of `len` rows.
pub fn boundary_scores(
    g: &mut Graph,
    b: &Bound,
    e_hat: Var,
    mode: BoundaryMode,
) -> Result<Option<Var>, ModelError> {
    let len = g.value(e_hat).rows();
    if len < 3 {
        return Ok(None);
    }
    let free = len - 2;
    // Row r of (later, earlier) is the pair (ê_{r+1}, ê_r).
    let (later_start, earlier_start) = match mode {
        BoundaryMode::NonCausal => (2, 1),
        BoundaryMode::Causal => (1, 0),
    };
    let later = g.slice_rows(e_hat, later_start, free)?;
    let earlier = g.slice_rows(e_hat, earlier_start, free)?;
    let q = g.matmul(later, b.get("boundary.wq")?)?;
    let k = g.matmul(earlier, b.get("boundary.wk")?)?;
    let cos = g.row_cosine(q, k, COSINE_EPS)?;
    let neg = g.scale(cos, -0.5)?;
    Ok(Some(g.add_scalar(neg, 0.5)?))
}

/// Fused log-probabilities from decoder states.
pub fn lm_head(g: &mut Graph, cfg: &ModelConfig, b: &Bound, z_hat: Var) -> Result<Var, ModelError> {
    let zn = norm(g, b, "lm_head.norm", z_hat, cfg.norm_eps)?;
    let logits = g.matmul(zn, b.get("lm_head.weight")?)?;
    let logits = g.add_row(logits, b.get("lm_head.bias")?)?;
    Ok(g.log_softmax_rows(logits)?)
}

/// Byte model bound to its suffix lookup.
#[derive(Clone, Copy)]
pub struct ByteLm<'a> {
    pub cfg: &'a ModelConfig,
    pub suffix: &'a SuffixIndex,
    /// Subword id used for the BOS position's suffix embedding.
    pub bos_token: u32,
}

impl<'a> ByteLm<'a> {
    pub fn new(cfg: &'a ModelConfig, suffix: &'a SuffixIndex, bos_token: u32) -> Self {
        Self {
            cfg,
            suffix,
            bos_token,
        }
    }

    /// Embeddings of the BOS-prefixed sequence, or of positions `from..` of it.
    pub fn embed(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: &[u8],
        from: usize,
    ) -> Result<Var, ModelError> {
        let len = x.len() + 1;
        if from >= len {
            return Err(ModelError::Input(format!(
                "embedding start {from} past length {len}"
            )));
        }
        let mut bytes = Vec::with_capacity(len - from);
        let mut subs = Vec::with_capacity(len - from);
        for p in from..len {
            if p == 0 {
                bytes.push(BOS_BYTE);
                subs.push(self.bos_token as usize);
            } else {
                bytes.push(x[p - 1] as usize);
                subs.push(self.suffix.longest_suffix_token(x, p - 1) as usize);
            }
        }
        let eb = g.gather_rows(b.get("byte_embed")?, &bytes)?;
        let es = g.gather_rows(b.get("subword_embed")?, &subs)?;
        Ok(g.add(eb, es)?)
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        b: &Bound,
        e: Var,
        state: Option<&mut LocalState>,
    ) -> Result<Var, ModelError> {
        mlstm_stack(g, self.cfg, b, "encoder", self.cfg.encoder_layers, e, state)
    }

    pub fn decode(
        &self,
        g: &mut Graph,
        b: &Bound,
        z: Var,
        state: Option<&mut LocalState>,
    ) -> Result<Var, ModelError> {
        mlstm_stack(g, self.cfg, b, "decoder", self.cfg.decoder_layers, z, state)
    }

    /// Global model over patches starting at patch `offset`.
    pub fn global(
        &self,
        g: &mut Graph,
        b: &Bound,
        pooled: Var,
        offset: usize,
        cache: Option<&mut KvCache>,
    ) -> Result<Var, ModelError> {
        Ok(global_forward(g, self.cfg, b, pooled, offset, cache)?.1)
    }

    /// Residual stream after the first `n` global layers.
    pub fn global_probe(
        &self,
        g: &mut Graph,
        b: &Bound,
        pooled: Var,
        n: usize,
    ) -> Result<Var, ModelError> {
        Ok(*global_layers(g, self.cfg, b, pooled, n, 0, None)?
            .last()
            .expect("non-empty"))
    }

    /// Teacher-forced pass over `x`. Patches follow `mask` (over the bytes of
    /// `x`) when given, else the thresholded boundary scores; a boundary after
    /// the last byte is always added.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: &[u8],
        mask: Option<&BoundaryMask>,
        mode: BoundaryMode,
        source: GlobalSource,
    ) -> Result<ByteLmOutput, ModelError> {
        let n = x.len();
        if n == 0 {
            return Err(ModelError::Input("empty document".into()));
        }
        if let Some(m) = mask {
            if m.len() != n {
                return Err(ModelError::Input(format!(
                    "mask length {} for {n} bytes",
                    m.len()
                )));
            }
        }
        let e = self.embed(g, b, x, 0)?;
        let e_hat = self.encode(g, b, e, None)?;
        let scores = boundary_scores(g, b, e_hat, mode)?;
        let mask = match mask {
            Some(m) => {
                let mut m = m.clone();
                m.flags[n - 1] = true;
                m
            }
            None => {
                let s = scores
                    .map(|s| g.value(s).data().to_vec())
                    .unwrap_or_default();
                predicted_mask(&s, n, self.cfg.boundary_threshold)
            }
        };
        let ends = pool_ends(&mask);
        let pooled = pool_last(g, e_hat, &ends)?;
        let (h_hat, z) = match source {
            GlobalSource::Pooled => {
                let h_hat = self.global(g, b, pooled, 0, None)?;
                (Some(h_hat), depool(g, b, e_hat, h_hat, &ends)?)
            }
            GlobalSource::Fixed(t) => {
                if t.rows() != ends.len() {
                    return Err(ModelError::Input(format!(
                        "{} fixed patch states for {} patches",
                        t.rows(),
                        ends.len()
                    )));
                }
                let h = g.constant(t.clone());
                let e_stop = g.detach(e_hat);
                (None, depool(g, b, e_stop, h, &ends)?)
            }
        };
        let z_rows = g.slice_rows(z, 0, n)?;
        let z_hat = self.decode(g, b, z_rows, None)?;
        let logp = lm_head(g, self.cfg, b, z_hat)?;
        Ok(ByteLmOutput {
            e_hat,
            scores,
            mask,
            ends,
            pooled,
            h_hat,
            z,
            z_hat,
            logp,
        })
    }
}
