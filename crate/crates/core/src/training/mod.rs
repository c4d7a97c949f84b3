//! Teacher training, distillation into the byte model (stage 1) and
//! end-to-end training with coarsened boundaries (stage 2).

mod eval;
mod losses;
mod parallel;

pub use eval::{
    boundary_error, distill_gap, evaluate, teacher_bpb, BoundaryReport, EvalReport, GapSource,
};
pub use losses::{
    f_temp_bce, f_temp_bce_graph, loss_boundary, loss_ce, loss_distill, loss_encoder, patch_spans,
    pick, segment_sums, PROB_EPS,
};
#[cfg(feature = "parallel")]
pub use parallel::map_docs_parallel;
pub use parallel::{map_docs, map_docs_sequential};

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boundary_supervision::{
    supervision_mask, AuxLm, MergeKind, MergeStrategy, SupervisionError,
};
use crate::model::{
    boundary_scores, depool, fused_targets, lm_head, pool_ends, pool_last, Bound, BoundaryMode,
    ByteLm, GlobalSource, ModelConfig, ModelError, ParamStore, SubwordLm,
};
use crate::numerics::{
    adamw_step, AdamW, AdamWState, Graph, NumericsError, ParamUpdate, Tensor, Var,
};
use crate::tokenization::{subword_boundary_mask, BoundaryMask, SubwordVocab, SuffixIndex};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Supervision(#[from] SupervisionError),
    #[error("no training documents")]
    EmptyCorpus,
    #[error("invalid training configuration: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, TrainingError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub boundary: f64,
    pub encoder: f64,
    pub distill: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            boundary: 4.0,
            encoder: 1.0,
            distill: 1.0,
            ce: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_boundary: f64,
    pub l_encoder: f64,
    pub l_distill: f64,
    pub l_ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.l_boundary += s * o.l_boundary;
        self.l_encoder += s * o.l_encoder;
        self.l_distill += s * o.l_distill;
        self.l_ce += s * o.l_ce;
        self.total += s * o.total;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub max_bytes: usize,
    pub warmup_steps: usize,
    /// Peak learning rate of the global group.
    pub lr: f64,
    /// Local-group learning rate as a multiple of `lr`.
    pub local_lr_mult: f64,
    pub optimizer: AdamW,
    pub merge: MergeStrategy,
    pub weights: LossWeights,
    pub tau: f64,
    pub seed: u64,
    pub boundary_mode: BoundaryMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::One,
            steps: 1000,
            batch_size: 8,
            max_bytes: 256,
            warmup_steps: 100,
            lr: 1e-3,
            local_lr_mult: 2.0,
            optimizer: AdamW::default(),
            merge: MergeStrategy {
                kind: MergeKind::Subword,
                target: 1.0,
            },
            weights: LossWeights::default(),
            tau: 5.0,
            seed: 0,
            boundary_mode: BoundaryMode::NonCausal,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainingError::Config(m.to_string()));
        if self.batch_size == 0 || self.max_bytes == 0 {
            return bad("batch_size and max_bytes must be positive");
        }
        if !(self.lr >= 0.0 && self.local_lr_mult >= 0.0 && self.tau > 0.0) {
            return bad("lr, local_lr_mult must be non-negative and tau positive");
        }
        let w = self.weights;
        if [w.boundary, w.encoder, w.distill, w.ce]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }
}

/// Linear warmup to `peak` over `warmup` steps, then linear decay to zero at
/// `total`. A warmup longer than the run is simply cut off.
pub fn lr_at(peak: f64, warmup: usize, total: usize, step: usize) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    peak * (total - step) as f64 / span
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: LossBreakdown,
    /// Fraction of scored byte positions whose thresholded boundary matches
    /// the supervision mask.
    pub boundary_acc: f64,
    /// Bytes per patch under the mask used for pooling.
    pub compression: f64,
    pub lr_global: f64,
    pub lr_local: f64,
    pub grad_norm: f64,
}

/// Truncates documents to `max_bytes` and drops empty ones.
pub fn prepare_docs<D: AsRef<[u8]>>(docs: &[D], max_bytes: usize) -> Vec<Vec<u8>> {
    docs.iter()
        .map(|d| {
            let d = d.as_ref();
            d[..d.len().min(max_bytes)].to_vec()
        })
        .filter(|d| !d.is_empty())
        .collect()
}

fn decays(name: &str, t: &Tensor) -> bool {
    t.shape().len() == 2 && !matches!(name, "byte_embed" | "subword_embed" | "embed")
}

struct DocOut {
    loss: LossBreakdown,
    grads: Vec<Tensor>,
    boundary_hits: usize,
    boundary_total: usize,
    bytes: usize,
    patches: usize,
}

fn collect_grads(
    g: &Graph,
    b: &Bound,
    loss: Var,
    names: &[String],
    store: &ParamStore,
) -> Result<Vec<Tensor>> {
    let mut grads = g.backward(loss)?;
    names
        .iter()
        .map(|n| {
            let v = b.get(n)?;
            Ok(grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(store.get(n).map(|t| t.shape()).unwrap_or(&[0]))))
        })
        .collect()
}

fn boundary_hits(
    g: &Graph,
    scores: Option<Var>,
    target: &BoundaryMask,
    threshold: f64,
) -> (usize, usize) {
    let Some(s) = scores else { return (0, 0) };
    let p = g.value(s).data();
    let hits = p
        .iter()
        .zip(&target.flags)
        .filter(|(&p, &t)| (p > threshold) == t)
        .count();
    (hits, p.len())
}

/// Weighted sum of the terms with non-zero weight.
fn weighted(g: &mut Graph, terms: &[(f64, Option<Var>)]) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for &(w, v) in terms {
        let Some(v) = v else { continue };
        if w == 0.0 {
            continue;
        }
        let s = g.scale(v, w)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total)
}

struct Ctx<'a> {
    cfg: &'a ModelConfig,
    train: &'a TrainConfig,
    params: &'a ParamStore,
    trainable: &'a [String],
    trainable_set: &'a HashSet<String>,
    teacher: SubwordLm<'a>,
    suffix: &'a SuffixIndex,
}

impl Ctx<'_> {
    fn model(&self) -> ByteLm<'_> {
        ByteLm::new(self.cfg, self.suffix, self.teacher.vocab.bos())
    }

    fn stage1_doc(&self, x: &[u8]) -> Result<DocOut> {
        let cfg = self.cfg;
        let w = self.train.weights;
        let n = x.len();
        let sub = subword_boundary_mask(self.teacher.vocab, x);
        let t_out = self.teacher.outputs(x)?;
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, self.params, |name| {
            self.trainable_set.contains(name)
        });
        let m = self.model();
        let e = m.embed(&mut g, &b, x, 0)?;
        let e_hat = m.encode(&mut g, &b, e, None)?;
        let scores = boundary_scores(&mut g, &b, e_hat, self.train.boundary_mode)?;
        let ends = pool_ends(&sub);
        let pooled = pool_last(&mut g, e_hat, &ends)?;
        let l_b = match scores {
            Some(s) => Some(loss_boundary(&mut g, s, &sub.flags[..n - 1])?),
            None => None,
        };
        let probe = m.global_probe(&mut g, &b, pooled, cfg.n_probe)?;
        let l_e = loss_encoder(&mut g, probe, &t_out.hidden[cfg.n_probe])?;
        let (mut l_d, mut l_ce) = (None, None);
        if w.distill > 0.0 || w.ce > 0.0 {
            let h = g.constant(t_out.z.clone());
            let e_stop = g.detach(e_hat);
            let z = depool(&mut g, &b, e_stop, h, &ends)?;
            let z = g.slice_rows(z, 0, n)?;
            let z_hat = m.decode(&mut g, &b, z, None)?;
            let logp = lm_head(&mut g, cfg, &b, z_hat)?;
            let targets = fused_targets(x, &sub);
            l_ce = Some(loss_ce(&mut g, logp, &targets)?);
            let spans = patch_spans(&ends);
            l_d = Some(
                loss_distill(
                    &mut g,
                    logp,
                    &targets,
                    &spans,
                    &t_out.token_logprobs(),
                    self.train.tau,
                )?
                .0,
            );
        }
        let total = weighted(
            &mut g,
            &[
                (w.boundary, l_b),
                (w.encoder, Some(l_e)),
                (w.distill, l_d),
                (w.ce, l_ce),
            ],
        )?;
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let loss = LossBreakdown {
            l_boundary: val(l_b),
            l_encoder: val(Some(l_e)),
            l_distill: val(l_d),
            l_ce: val(l_ce),
            total: val(total),
        };
        let grads = match total {
            Some(t) => collect_grads(&g, &b, t, self.trainable, self.params)?,
            None => self.zero_grads()?,
        };
        let (hits, counted) = boundary_hits(&g, scores, &sub, cfg.boundary_threshold);
        Ok(DocOut {
            loss,
            grads,
            boundary_hits: hits,
            boundary_total: counted,
            bytes: n,
            patches: sub.popcount(),
        })
    }

    fn stage2_doc(&self, x: &[u8], sup: &BoundaryMask) -> Result<DocOut> {
        let w = self.train.weights;
        let n = x.len();
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, self.params, |name| {
            self.trainable_set.contains(name)
        });
        let m = self.model();
        let out = m.forward(
            &mut g,
            &b,
            x,
            None,
            self.train.boundary_mode,
            GlobalSource::Pooled,
        )?;
        let l_b = match out.scores {
            Some(s) => Some(loss_boundary(&mut g, s, &sup.flags[..n - 1])?),
            None => None,
        };
        let targets = fused_targets(x, &out.mask);
        let l_ce = loss_ce(&mut g, out.logp, &targets)?;
        let total = weighted(&mut g, &[(w.boundary, l_b), (w.ce, Some(l_ce))])?;
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let loss = LossBreakdown {
            l_boundary: val(l_b),
            l_ce: val(Some(l_ce)),
            total: val(total),
            ..Default::default()
        };
        let grads = match total {
            Some(t) => collect_grads(&g, &b, t, self.trainable, self.params)?,
            None => self.zero_grads()?,
        };
        let (hits, counted) = boundary_hits(&g, out.scores, sup, self.cfg.boundary_threshold);
        Ok(DocOut {
            loss,
            grads,
            boundary_hits: hits,
            boundary_total: counted,
            bytes: n,
            patches: out.mask.popcount(),
        })
    }

    fn zero_grads(&self) -> Result<Vec<Tensor>> {
        self.trainable
            .iter()
            .map(|n| Ok(Tensor::zeros(self.params.get(n)?.shape())))
            .collect()
    }
}

/// Optimizer state and data order for a byte-model run.
pub struct Trainer<'a> {
    pub cfg: &'a ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
    teacher_params: &'a ParamStore,
    vocab: &'a SubwordVocab,
    suffix: SuffixIndex,
    docs: Vec<Vec<u8>>,
    supervision: Vec<BoundaryMask>,
    trainable: Vec<String>,
    trainable_set: HashSet<String>,
    opt: AdamWState,
    rng: ChaCha8Rng,
    pub step: usize,
}

impl<'a> Trainer<'a> {
    /// Stage 1 freezes the global model; stage 2 trains everything.
    pub fn new<D: AsRef<[u8]>>(
        cfg: &'a ModelConfig,
        train: TrainConfig,
        params: ParamStore,
        teacher_params: &'a ParamStore,
        vocab: &'a SubwordVocab,
        docs: &[D],
    ) -> Result<Self> {
        train.validate()?;
        cfg.validate()?;
        let docs = prepare_docs(docs, train.max_bytes);
        if docs.is_empty() {
            return Err(TrainingError::EmptyCorpus);
        }
        let teacher = SubwordLm::new(cfg, teacher_params, vocab)?;
        let supervision = match train.stage {
            Stage::One => Vec::new(),
            Stage::Two => {
                let aux: Option<&dyn AuxLm> = match train.merge.kind {
                    MergeKind::Entropy | MergeKind::CrossEntropy => Some(&teacher),
                    _ => None,
                };
                docs.iter()
                    .map(|x| {
                        let sub = subword_boundary_mask(vocab, x);
                        supervision_mask(&train.merge, &sub, x, aux)
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()?
            }
        };
        let trainable: Vec<String> = params
            .names()
            .filter(|n| train.stage == Stage::Two || !n.starts_with("global."))
            .map(str::to_string)
            .collect();
        let opt = AdamWState::new(trainable.iter().map(|n| params.get(n).expect("listed")));
        Ok(Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(train.seed),
            train,
            trainable_set: trainable.iter().cloned().collect(),
            trainable,
            params,
            teacher_params,
            vocab,
            suffix: SuffixIndex::new(vocab),
            docs,
            supervision,
            opt,
            step: 0,
        })
    }

    pub fn trainable_names(&self) -> &[String] {
        &self.trainable
    }

    pub fn suffix_index(&self) -> &SuffixIndex {
        &self.suffix
    }

    /// Supervision masks of the (truncated) training documents; empty in stage 1.
    pub fn supervision(&self) -> &[BoundaryMask] {
        &self.supervision
    }

    fn lrs(&self) -> (f64, f64) {
        let t = &self.train;
        let base = lr_at(t.lr, t.warmup_steps, t.steps, self.step + 1);
        (base, base * t.local_lr_mult)
    }

    /// One optimizer step on a freshly sampled batch.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let batch: Vec<usize> = (0..self.train.batch_size)
            .map(|_| self.rng.gen_range(0..self.docs.len()))
            .collect();
        let ctx = Ctx {
            cfg: self.cfg,
            train: &self.train,
            params: &self.params,
            trainable: &self.trainable,
            trainable_set: &self.trainable_set,
            teacher: SubwordLm::new(self.cfg, self.teacher_params, self.vocab)?,
            suffix: &self.suffix,
        };
        let outs = map_docs(&batch, |&i| match self.train.stage {
            Stage::One => ctx.stage1_doc(&self.docs[i]),
            Stage::Two => ctx.stage2_doc(&self.docs[i], &self.supervision[i]),
        });
        let scale = 1.0 / batch.len() as f64;
        let mut loss = LossBreakdown::default();
        let mut grads: Vec<Tensor> = Vec::new();
        let (mut hits, mut counted, mut bytes, mut patches) = (0, 0, 0, 0);
        for out in outs {
            let out = out?;
            loss.add_scaled(&out.loss, scale);
            if grads.is_empty() {
                grads = out.grads;
                grads.iter_mut().for_each(|g| g.scale_assign(scale));
            } else {
                for (acc, g) in grads.iter_mut().zip(&out.grads) {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * v;
                    }
                }
            }
            hits += out.boundary_hits;
            counted += out.boundary_total;
            bytes += out.bytes;
            patches += out.patches;
        }
        let (lr_global, lr_local) = self.lrs();
        let updates: Vec<ParamUpdate> = self
            .trainable
            .iter()
            .map(|n| {
                let t = self.params.get(n).expect("listed");
                ParamUpdate {
                    lr: if n.starts_with("global.") {
                        lr_global
                    } else {
                        lr_local
                    },
                    decay: decays(n, t),
                }
            })
            .collect();
        let set = &self.trainable_set;
        let mut targets: Vec<&mut Tensor> = self
            .params
            .iter_mut()
            .filter(|(n, _)| set.contains(*n))
            .map(|(_, t)| t)
            .collect();
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let grad_norm = adamw_step(
            &self.train.optimizer,
            &mut self.opt,
            &mut targets,
            &grad_refs,
            &updates,
        )?;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            loss,
            boundary_acc: if counted == 0 {
                1.0
            } else {
                hits as f64 / counted as f64
            },
            compression: bytes as f64 / patches.max(1) as f64,
            lr_global,
            lr_local,
            grad_norm,
        })
    }

    /// Runs the remaining steps, reporting each one.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepMetrics)) -> Result<()> {
        while self.step < self.train.steps {
            let m = self.step()?;
            on_step(&m);
        }
        Ok(())
    }
}

/// Next-token training of the subword teacher.
pub struct TeacherTrainer<'a> {
    pub cfg: &'a ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
    ids: Vec<Vec<u32>>,
    names: Vec<String>,
    opt: AdamWState,
    rng: ChaCha8Rng,
    pub step: usize,
}

impl<'a> TeacherTrainer<'a> {
    pub fn new<D: AsRef<[u8]>>(
        cfg: &'a ModelConfig,
        train: TrainConfig,
        params: ParamStore,
        vocab: &SubwordVocab,
        docs: &[D],
    ) -> Result<Self> {
        train.validate()?;
        SubwordLm::new(cfg, &params, vocab)?;
        let ids: Vec<Vec<u32>> = prepare_docs(docs, train.max_bytes)
            .iter()
            .map(|d| {
                let mut ids = vec![vocab.bos()];
                ids.extend(vocab.encode(d));
                ids
            })
            .collect();
        if ids.is_empty() {
            return Err(TrainingError::EmptyCorpus);
        }
        let names: Vec<String> = params.names().map(str::to_string).collect();
        let opt = AdamWState::new(params.iter().map(|(_, t)| t));
        Ok(Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(train.seed),
            train,
            params,
            ids,
            names,
            opt,
            step: 0,
        })
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let batch: Vec<usize> = (0..self.train.batch_size)
            .map(|_| self.rng.gen_range(0..self.ids.len()))
            .collect();
        let (cfg, params, names) = (self.cfg, &self.params, &self.names);
        let outs = map_docs(&batch, |&i| -> Result<(f64, Vec<Tensor>)> {
            let mut g = Graph::new();
            let b = Bound::bind(&mut g, params, |_| true);
            let loss = SubwordLm::nll_graph(&mut g, cfg, &b, &self.ids[i])?;
            let v = g.value(loss).item();
            Ok((v, collect_grads(&g, &b, loss, names, params)?))
        });
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        let mut grads: Vec<Tensor> = names
            .iter()
            .map(|n| Tensor::zeros(params.get(n).expect("listed").shape()))
            .collect();
        for out in outs {
            let (v, gs) = out?;
            total += scale * v;
            for (acc, g) in grads.iter_mut().zip(&gs) {
                for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * x;
                }
            }
        }
        let t = &self.train;
        let lr = lr_at(t.lr, t.warmup_steps, t.steps, self.step + 1);
        let updates: Vec<ParamUpdate> = self
            .params
            .iter()
            .map(|(n, t)| ParamUpdate {
                lr,
                decay: decays(n, t),
            })
            .collect();
        let mut targets: Vec<&mut Tensor> = self.params.iter_mut().map(|(_, t)| t).collect();
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let grad_norm = adamw_step(
            &self.train.optimizer,
            &mut self.opt,
            &mut targets,
            &grad_refs,
            &updates,
        )?;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            loss: LossBreakdown {
                l_ce: total,
                total,
                ..Default::default()
            },
            boundary_acc: 1.0,
            compression: 1.0,
            lr_global: lr,
            lr_local: lr,
            grad_norm,
        })
    }

    pub fn run(&mut self, mut on_step: impl FnMut(&StepMetrics)) -> Result<()> {
        while self.step < self.train.steps {
            let m = self.step()?;
            on_step(&m);
        }
        Ok(())
    }
}
