//! Prefill with the boundary predictor, then byte-by-byte decoding where the
//! fused head decides both the next byte and whether it closes a patch.

mod sampler;

pub use sampler::{sample, SamplerConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{
    boundary_scores, depool, lm_head, pool_ends, pool_last, predicted_mask, Bound, BoundaryMode,
    ByteLm, FusedSymbol, KvCache, LocalState, ModelError, ParamStore, FUSED_VOCAB,
};
use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::tokenization::BoundaryMask;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InferenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("non-finite logits")]
    NonFinite,
    #[error("invalid generation settings: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, InferenceError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateConfig {
    pub max_bytes: usize,
    /// Generation stops after emitting this byte, which is not returned.
    pub end_of_text: Option<u8>,
    /// A patch is closed once it holds this many bytes.
    pub max_patch_bytes: usize,
    /// Boundary predictor variant used for the prompt.
    pub prefill_mode: BoundaryMode,
    pub sampler: SamplerConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            max_bytes: 256,
            end_of_text: Some(0),
            max_patch_bytes: 64,
            prefill_mode: BoundaryMode::NonCausal,
            sampler: SamplerConfig::default(),
        }
    }
}

/// Everything needed to continue one generation stream.
#[derive(Debug, Clone)]
pub struct DecodeState {
    /// Prompt and generated bytes so far.
    pub bytes: Vec<u8>,
    /// Patch mask over `bytes`; generated bytes carry their emitted bit.
    pub mask: BoundaryMask,
    pub encoder: LocalState,
    pub decoder: LocalState,
    pub cache: KvCache,
    /// Bytes of the currently open patch.
    pub pending: Vec<u8>,
    /// Global output of the last closed patch, `[1, d]`.
    h_last: Tensor,
    /// Fused log-probabilities for the next byte.
    logp: Vec<f64>,
    /// Global-model steps taken after prefill.
    pub global_steps: usize,
    rng: ChaCha8Rng,
    max_patch_bytes: usize,
}

impl DecodeState {
    /// Fused log-probabilities predicting the next byte.
    pub fn next_logp(&self) -> &[f64] {
        &self.logp
    }

    /// Closed patches, counting the BOS pseudo-patch.
    pub fn closed_patches(&self) -> usize {
        self.cache.len()
    }
}

/// Incremental decoder over shared read-only parameters.
#[derive(Clone, Copy)]
pub struct Generator<'a> {
    pub model: ByteLm<'a>,
    pub params: &'a ParamStore,
}

fn last_row(g: &Graph, v: Var) -> Vec<f64> {
    let t = g.value(v);
    t.row(t.rows() - 1).to_vec()
}

impl<'a> Generator<'a> {
    pub fn new(model: ByteLm<'a>, params: &'a ParamStore) -> Self {
        Self { model, params }
    }

    /// Runs the prompt: boundaries from the predictor in `mode` with the last
    /// byte closing a patch, the global model over every closed patch, and
    /// both local stacks up to the position that predicts the next byte.
    pub fn prefill(
        &self,
        prompt: &[u8],
        mode: BoundaryMode,
        max_patch_bytes: usize,
        seed: u64,
    ) -> Result<DecodeState> {
        let n = prompt.len();
        if n == 0 {
            return Err(InferenceError::EmptyPrompt);
        }
        if max_patch_bytes == 0 {
            return Err(InferenceError::Config(
                "max_patch_bytes must be positive".into(),
            ));
        }
        let cfg = self.model.cfg;
        let mut g = Graph::no_grad();
        let b = Bound::bind(&mut g, self.params, |_| false);
        let mut encoder = LocalState::empty(cfg, cfg.encoder_layers);
        let mut decoder = LocalState::empty(cfg, cfg.decoder_layers);
        let mut cache = KvCache::new(cfg);
        let e = self.model.embed(&mut g, &b, prompt, 0)?;
        let e_hat = self.model.encode(&mut g, &b, e, Some(&mut encoder))?;
        let scores = boundary_scores(&mut g, &b, e_hat, mode)?;
        let s = scores
            .map(|s| g.value(s).data().to_vec())
            .unwrap_or_default();
        let mask = predicted_mask(&s, n, cfg.boundary_threshold);
        let ends = pool_ends(&mask);
        let pooled = pool_last(&mut g, e_hat, &ends)?;
        let h_hat = self.model.global(&mut g, &b, pooled, 0, Some(&mut cache))?;
        let z = depool(&mut g, &b, e_hat, h_hat, &ends)?;
        let z_hat = self.model.decode(&mut g, &b, z, Some(&mut decoder))?;
        let logp = lm_head(&mut g, cfg, &b, z_hat)?;
        let logp = last_row(&g, logp);
        if logp.iter().any(|v| !v.is_finite()) {
            return Err(InferenceError::NonFinite);
        }
        let h_last = Tensor::matrix(1, cfg.d, last_row(&g, h_hat));
        Ok(DecodeState {
            bytes: prompt.to_vec(),
            mask,
            encoder,
            decoder,
            cache,
            pending: Vec::new(),
            h_last,
            logp,
            global_steps: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            max_patch_bytes,
        })
    }

    /// Appends `symbol` as the next byte and advances every stack. A patch is
    /// also closed when it reaches the byte cap. Returns the symbol actually
    /// applied.
    pub fn advance(&self, state: &mut DecodeState, symbol: FusedSymbol) -> Result<FusedSymbol> {
        let cfg = self.model.cfg;
        if symbol.0 as usize >= FUSED_VOCAB {
            return Err(
                ModelError::Input(format!("fused symbol {} out of range", symbol.0)).into(),
            );
        }
        let byte = symbol.byte();
        let close = symbol.has_boundary() || state.pending.len() + 1 >= state.max_patch_bytes;
        let mut g = Graph::no_grad();
        let b = Bound::bind(&mut g, self.params, |_| false);
        state.bytes.push(byte);
        state.mask.flags.push(close);
        let pos = state.bytes.len();
        let e = self.model.embed(&mut g, &b, &state.bytes, pos)?;
        let e_hat = self.model.encode(&mut g, &b, e, Some(&mut state.encoder))?;
        if close {
            let offset = state.cache.len();
            let h = self
                .model
                .global(&mut g, &b, e_hat, offset, Some(&mut state.cache))?;
            state.h_last = g.value(h).clone();
            state.pending.clear();
            state.global_steps += 1;
        } else {
            state.pending.push(byte);
        }
        let h = g.constant(state.h_last.clone());
        let z = depool(&mut g, &b, e_hat, h, &[0])?;
        let z_hat = self.model.decode(&mut g, &b, z, Some(&mut state.decoder))?;
        let logp = lm_head(&mut g, cfg, &b, z_hat)?;
        state.logp = last_row(&g, logp);
        if state.logp.iter().any(|v| !v.is_finite()) {
            return Err(InferenceError::NonFinite);
        }
        Ok(FusedSymbol::new(byte, close))
    }

    /// Samples the next fused symbol and applies it.
    pub fn decode_step(
        &self,
        state: &mut DecodeState,
        sampler: &SamplerConfig,
    ) -> Result<FusedSymbol> {
        sampler.validate()?;
        let symbol = sample(&state.logp, sampler, &mut state.rng);
        self.advance(state, symbol)
    }

    /// Generated bytes only, stopping at `max_bytes` or after the end-of-text
    /// byte (which is dropped).
    pub fn generate(&self, prompt: &[u8], cfg: &GenerateConfig) -> Result<Vec<u8>> {
        cfg.sampler.validate()?;
        if cfg.max_bytes == 0 {
            return Ok(Vec::new());
        }
        let mut state = self.prefill(
            prompt,
            cfg.prefill_mode,
            cfg.max_patch_bytes,
            cfg.sampler.seed,
        )?;
        let mut out = Vec::new();
        while out.len() < cfg.max_bytes {
            let s = self.decode_step(&mut state, &cfg.sampler)?;
            if Some(s.byte()) == cfg.end_of_text {
                break;
            }
            out.push(s.byte());
        }
        Ok(out)
    }
}

/// Share of byte sequences that decode as UTF-8.
pub fn utf8_valid_rate<B: AsRef<[u8]>>(outputs: &[B]) -> f64 {
    if outputs.is_empty() {
        return 1.0;
    }
    let ok = outputs
        .iter()
        .filter(|o| std::str::from_utf8(o.as_ref()).is_ok())
        .count();
    ok as f64 / outputs.len() as f64
}
