use super::losses::{loss_ce, patch_spans, pick, segment_sums};
use super::{map_docs, prepare_docs, Result};
use crate::model::{
    boundary_scores, depool, fused_targets, lm_head, pool_ends, Bound, BoundaryMode, ByteLm,
    GlobalSource, ModelConfig, ParamStore, SubwordLm,
};
use crate::numerics::Graph;
use crate::tokenization::{subword_boundary_mask, SubwordVocab, SuffixIndex};

/// Held-out metrics of a byte model run with its own predicted boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalReport {
    pub docs: usize,
    pub bytes: usize,
    pub patches: usize,
    /// Summed next-symbol negative log-likelihood, in nats.
    pub nll: f64,
    /// Scored positions whose predicted boundary differs from the subword mask.
    pub boundary_errors: usize,
    pub boundary_positions: usize,
}

impl EvalReport {
    pub fn ce_per_byte(&self) -> f64 {
        self.nll / self.bytes.max(1) as f64
    }

    pub fn bits_per_byte(&self) -> f64 {
        self.ce_per_byte() / std::f64::consts::LN_2
    }

    pub fn compression(&self) -> f64 {
        self.bytes as f64 / self.patches.max(1) as f64
    }

    pub fn boundary_error_rate(&self) -> f64 {
        self.boundary_errors as f64 / self.boundary_positions.max(1) as f64
    }
}

fn count_errors(scores: &[f64], target: &[bool], threshold: f64) -> usize {
    scores
        .iter()
        .zip(target)
        .filter(|(&p, &t)| (p > threshold) != t)
        .count()
}

/// Cross-entropy per byte (through [`loss_ce`]), boundary error against the
/// subword mask and attained compression, with boundaries predicted by the
/// model itself.
pub fn evaluate<D: AsRef<[u8]> + Sync>(
    cfg: &ModelConfig,
    params: &ParamStore,
    vocab: &SubwordVocab,
    docs: &[D],
    max_bytes: usize,
    mode: BoundaryMode,
) -> Result<EvalReport> {
    let suffix = SuffixIndex::new(vocab);
    let model = ByteLm::new(cfg, &suffix, vocab.bos());
    let docs = prepare_docs(docs, max_bytes);
    let outs = map_docs(&docs, |x| -> Result<EvalReport> {
        let mut g = Graph::no_grad();
        let b = Bound::bind(&mut g, params, |_| false);
        let out = model.forward(&mut g, &b, x, None, mode, GlobalSource::Pooled)?;
        let ce = loss_ce(&mut g, out.logp, &fused_targets(x, &out.mask))?;
        let sub = subword_boundary_mask(vocab, x);
        let (errors, positions) = match out.scores {
            Some(s) => {
                let p = g.value(s).data();
                (count_errors(p, &sub.flags, cfg.boundary_threshold), p.len())
            }
            None => (0, 0),
        };
        Ok(EvalReport {
            docs: 1,
            bytes: x.len(),
            patches: out.mask.popcount(),
            nll: g.value(ce).item() * x.len() as f64,
            boundary_errors: errors,
            boundary_positions: positions,
        })
    });
    let mut total = EvalReport::default();
    for r in outs {
        let r = r?;
        total.docs += r.docs;
        total.bytes += r.bytes;
        total.patches += r.patches;
        total.nll += r.nll;
        total.boundary_errors += r.boundary_errors;
        total.boundary_positions += r.boundary_positions;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoundaryReport {
    pub errors: usize,
    pub positions: usize,
}

impl BoundaryReport {
    pub fn rate(&self) -> f64 {
        self.errors as f64 / self.positions.max(1) as f64
    }
}

/// Boundary error of the predictor alone against the subword mask; runs only
/// the embedding, encoder and boundary head.
pub fn boundary_error<D: AsRef<[u8]> + Sync>(
    cfg: &ModelConfig,
    params: &ParamStore,
    vocab: &SubwordVocab,
    docs: &[D],
    max_bytes: usize,
    mode: BoundaryMode,
) -> Result<BoundaryReport> {
    let suffix = SuffixIndex::new(vocab);
    let model = ByteLm::new(cfg, &suffix, vocab.bos());
    let docs = prepare_docs(docs, max_bytes);
    let outs = map_docs(&docs, |x| -> Result<BoundaryReport> {
        let mut g = Graph::no_grad();
        let b = Bound::bind(&mut g, params, |_| false);
        let e = model.embed(&mut g, &b, x, 0)?;
        let e_hat = model.encode(&mut g, &b, e, None)?;
        let Some(s) = boundary_scores(&mut g, &b, e_hat, mode)? else {
            return Ok(BoundaryReport::default());
        };
        let sub = subword_boundary_mask(vocab, x);
        let p = g.value(s).data();
        Ok(BoundaryReport {
            errors: count_errors(p, &sub.flags, cfg.boundary_threshold),
            positions: p.len(),
        })
    });
    let mut total = BoundaryReport::default();
    for r in outs {
        let r = r?;
        total.errors += r.errors;
        total.positions += r.positions;
    }
    Ok(total)
}

/// Patch states used when comparing student and teacher likelihoods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapSource {
    /// The byte model's own global pass over patches pooled at subword ends.
    Pooled,
    /// The teacher's final-layer states, as wired during stage 1.
    TeacherStates,
}

/// Mean absolute difference between the student's per-patch log-likelihood
/// and the teacher's per-token log-likelihood, pooling at subword ends.
/// Returns the mean and the number of patches compared.
pub fn distill_gap<D: AsRef<[u8]> + Sync>(
    cfg: &ModelConfig,
    params: &ParamStore,
    teacher: &ParamStore,
    vocab: &SubwordVocab,
    docs: &[D],
    max_bytes: usize,
    source: GapSource,
) -> Result<(f64, usize)> {
    let suffix = SuffixIndex::new(vocab);
    let model = ByteLm::new(cfg, &suffix, vocab.bos());
    let lm = SubwordLm::new(cfg, teacher, vocab)?;
    let docs = prepare_docs(docs, max_bytes);
    let outs = map_docs(&docs, |x| -> Result<(f64, usize)> {
        let sub = subword_boundary_mask(vocab, x);
        let t_out = lm.outputs(x)?;
        let mut g = Graph::no_grad();
        let b = Bound::bind(&mut g, params, |_| false);
        let logp = match source {
            GapSource::Pooled => {
                model
                    .forward(
                        &mut g,
                        &b,
                        x,
                        Some(&sub),
                        BoundaryMode::NonCausal,
                        GlobalSource::Pooled,
                    )?
                    .logp
            }
            GapSource::TeacherStates => {
                let e = model.embed(&mut g, &b, x, 0)?;
                let e_hat = model.encode(&mut g, &b, e, None)?;
                let h = g.constant(t_out.z.clone());
                let z = depool(&mut g, &b, e_hat, h, &pool_ends(&sub))?;
                let z = g.slice_rows(z, 0, x.len())?;
                let z_hat = model.decode(&mut g, &b, z, None)?;
                lm_head(&mut g, cfg, &b, z_hat)?
            }
        };
        let picked = pick(&mut g, logp, &fused_targets(x, &sub))?;
        let student = segment_sums(&mut g, picked, &patch_spans(&pool_ends(&sub)))?;
        let teacher_lp = t_out.token_logprobs();
        let abs: f64 = g
            .value(student)
            .data()
            .iter()
            .zip(&teacher_lp)
            .map(|(s, t)| (s - t).abs())
            .sum();
        Ok((abs, teacher_lp.len()))
    });
    let (mut sum, mut count) = (0.0, 0);
    for r in outs {
        let (s, c) = r?;
        sum += s;
        count += c;
    }
    Ok((sum / count.max(1) as f64, count))
}

/// Teacher bits per byte: summed token negative log-likelihood over bytes.
pub fn teacher_bpb<D: AsRef<[u8]> + Sync>(
    cfg: &ModelConfig,
    teacher: &ParamStore,
    vocab: &SubwordVocab,
    docs: &[D],
    max_bytes: usize,
) -> Result<f64> {
    let lm = SubwordLm::new(cfg, teacher, vocab)?;
    let docs = prepare_docs(docs, max_bytes);
    let outs = map_docs(&docs, |x| -> Result<(f64, usize)> {
        let out = lm.outputs(x)?;
        Ok((-out.token_logprobs().iter().sum::<f64>(), x.len()))
    });
    let (mut nll, mut bytes) = (0.0, 0);
    for r in outs {
        let (a, b) = r?;
        nll += a;
        bytes += b;
    }
    Ok(nll / bytes.max(1) as f64 / std::f64::consts::LN_2)
}
