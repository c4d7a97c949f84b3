use super::layers::{global_forward, Bound};
use super::{ModelConfig, ModelError, ParamStore};
use crate::boundary_supervision::{AuxLm, PatchScore, SupervisionError};
use crate::numerics::{Graph, Tensor, Var};
use crate::tokenization::{BoundaryMask, SubwordVocab};

/// Subword LM: token embeddings, the global transformer and an output head.
#[derive(Clone, Copy)]
pub struct SubwordLm<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamStore,
    pub vocab: &'a SubwordVocab,
}

/// Frozen teacher quantities for one document.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutputs {
    /// BOS followed by the token ids.
    pub ids: Vec<u32>,
    /// Residual streams entering each global layer, plus the last layer's
    /// output; entry 0 is the embeddings.
    pub hidden: Vec<Tensor>,
    /// Final-layer states, one row per id.
    pub z: Tensor,
    /// Next-token log-probabilities, one row per id.
    pub logp: Tensor,
}

impl TeacherOutputs {
    /// `log p(token i | tokens < i)` for every real token.
    pub fn token_logprobs(&self) -> Vec<f64> {
        (1..self.ids.len())
            .map(|i| self.logp.at(i - 1, self.ids[i] as usize))
            .collect()
    }
}

impl<'a> SubwordLm<'a> {
    pub fn new(
        cfg: &'a ModelConfig,
        params: &'a ParamStore,
        vocab: &'a SubwordVocab,
    ) -> Result<Self, ModelError> {
        if vocab.len() != cfg.subword_vocab {
            return Err(ModelError::Config(format!(
                "vocabulary has {} ids but the model expects {}",
                vocab.len(),
                cfg.subword_vocab
            )));
        }
        Ok(Self { cfg, params, vocab })
    }

    /// Graph forward over BOS-prefixed ids: (hidden streams, z, log-probs).
    pub fn forward_graph(
        g: &mut Graph,
        cfg: &ModelConfig,
        b: &Bound,
        ids: &[u32],
    ) -> Result<(Vec<Var>, Var, Var), ModelError> {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let e = g.gather_rows(b.get("embed")?, &idx)?;
        let (hidden, z) = global_forward(g, cfg, b, e, 0, None)?;
        let logits = g.matmul(z, b.get("head")?)?;
        let logp = g.log_softmax_rows(logits)?;
        Ok((hidden, z, logp))
    }

    /// Mean next-token NLL of `ids` (BOS-prefixed) on `g`.
    pub fn nll_graph(
        g: &mut Graph,
        cfg: &ModelConfig,
        b: &Bound,
        ids: &[u32],
    ) -> Result<Var, ModelError> {
        if ids.len() < 2 {
            return Err(ModelError::Input(
                "need at least one token after BOS".into(),
            ));
        }
        let (_, _, logp) = Self::forward_graph(g, cfg, b, &ids[..ids.len() - 1])?;
        let v = g.value(logp).cols();
        let col = g.reshape(logp, &[(ids.len() - 1) * v, 1])?;
        let picks: Vec<usize> = (1..ids.len())
            .map(|i| (i - 1) * v + ids[i] as usize)
            .collect();
        let picked = g.gather_rows(col, &picks)?;
        let mean = g.mean_all(picked)?;
        Ok(g.neg(mean)?)
    }

    pub fn outputs_for_ids(&self, ids: Vec<u32>) -> Result<TeacherOutputs, ModelError> {
        let mut g = Graph::no_grad();
        let b = Bound::bind(&mut g, self.params, |_| false);
        let (hidden, z, logp) = Self::forward_graph(&mut g, self.cfg, &b, &ids)?;
        Ok(TeacherOutputs {
            hidden: hidden.iter().map(|&h| g.value(h).clone()).collect(),
            z: g.value(z).clone(),
            logp: g.value(logp).clone(),
            ids,
        })
    }

    /// Teacher pass over the canonical tokenization of `x`.
    pub fn outputs(&self, x: &[u8]) -> Result<TeacherOutputs, ModelError> {
        let mut ids = vec![self.vocab.bos()];
        ids.extend(self.vocab.encode(x));
        self.outputs_for_ids(ids)
    }
}

impl AuxLm for SubwordLm<'_> {
    fn patch_scores(
        &self,
        x: &[u8],
        mask: &BoundaryMask,
    ) -> Result<Vec<PatchScore>, SupervisionError> {
        let out = self
            .outputs(x)
            .map_err(|e| SupervisionError::Aux(e.to_string()))?;
        let lens: Vec<usize> = out.ids[1..]
            .iter()
            .map(|&t| self.vocab.token_bytes(t).len())
            .collect();
        if lens != mask.patch_lengths() {
            return Err(SupervisionError::Aux(
                "mask is not the canonical tokenization of the document".into(),
            ));
        }
        Ok((1..out.ids.len())
            .map(|i| {
                let row = out.logp.row(i - 1);
                PatchScore {
                    entropy: -row.iter().map(|&lp| lp.exp() * lp).sum::<f64>(),
                    cross_entropy: -row[out.ids[i] as usize],
                }
            })
            .collect())
    }
}
