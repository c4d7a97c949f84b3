use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError, BOS_BYTE, FUSED_VOCAB};
use crate::numerics::Tensor;

/// Component a parameter belongs to, derived from its name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    ByteEmbed,
    SubwordEmbed,
    Encoder,
    Boundary,
    Global,
    DepoolProj,
    Decoder,
    LmHead,
    StartVector,
    /// Teacher input embeddings.
    TokenEmbed,
    /// Teacher output projection.
    TokenHead,
}

impl Component {
    pub fn of(name: &str) -> Option<Self> {
        let head = name.split('.').next()?;
        Some(match head {
            "byte_embed" => Self::ByteEmbed,
            "subword_embed" => Self::SubwordEmbed,
            "encoder" => Self::Encoder,
            "boundary" => Self::Boundary,
            "global" => Self::Global,
            "depool_proj" => Self::DepoolProj,
            "decoder" => Self::Decoder,
            "lm_head" => Self::LmHead,
            "start_vector" => Self::StartVector,
            "embed" => Self::TokenEmbed,
            "head" => Self::TokenHead,
            _ => return None,
        })
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, ModelError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|k| k.as_str())
    }

    /// Names in `component`, in name order.
    pub fn names_in(&self, component: Component) -> Vec<String> {
        self.names()
            .filter(|n| Component::of(n) == Some(component))
            .map(str::to_string)
            .collect()
    }

    pub fn num_params(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.iter()
            .filter(|(n, _)| filter(n))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| dist.sample(&mut self.rng)).collect(),
        )
        .expect("shape")
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
        self.normal(&[fan_in, fan_out], gain / (fan_in as f64).sqrt())
    }
}

fn ffn(p: &mut ParamStore, init: &mut Init, prefix: &str, d: usize, hidden: usize, out_gain: f64) {
    p.insert(format!("{prefix}ffn_norm"), Tensor::full(&[d], 1.0));
    p.insert(format!("{prefix}ffn_w1"), init.linear(d, hidden, 1.0));
    p.insert(format!("{prefix}ffn_w3"), init.linear(d, hidden, 1.0));
    p.insert(format!("{prefix}ffn_w2"), init.linear(hidden, d, out_gain));
}

fn global_layers(p: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) {
    let d = cfg.d;
    let inner = cfg.global.heads * cfg.global.head_dim;
    let out_gain = 1.0 / (2.0 * cfg.global.layers as f64).sqrt();
    for l in 0..cfg.global.layers {
        let pre = format!("global.{l}.");
        p.insert(format!("{pre}attn_norm"), Tensor::full(&[d], 1.0));
        p.insert(format!("{pre}wq"), init.linear(d, inner, 1.0));
        p.insert(format!("{pre}wk"), init.linear(d, inner, 1.0));
        p.insert(format!("{pre}wv"), init.linear(d, inner, 1.0));
        p.insert(format!("{pre}wo"), init.linear(inner, d, out_gain));
        ffn(p, init, &pre, d, cfg.ffn_hidden(), out_gain);
    }
    p.insert("global.final_norm", Tensor::full(&[d], 1.0));
}

fn mlstm_layers(
    p: &mut ParamStore,
    init: &mut Init,
    cfg: &ModelConfig,
    stack: &str,
    layers: usize,
) {
    let d = cfg.d;
    let m = &cfg.mlstm;
    let (h, qk, v) = (m.heads, m.heads * m.qk_dim, m.heads * m.v_dim);
    let out_gain = 1.0 / (2.0 * layers.max(1) as f64).sqrt();
    for l in 0..layers {
        let pre = format!("{stack}.{l}.");
        p.insert(format!("{pre}norm"), Tensor::full(&[d], 1.0));
        p.insert(format!("{pre}wq"), init.linear(d, qk, 1.0));
        p.insert(format!("{pre}wk"), init.linear(d, qk, 1.0));
        p.insert(format!("{pre}wv"), init.linear(d, v, 1.0));
        p.insert(format!("{pre}wo_gate"), init.linear(d, v, 1.0));
        p.insert(format!("{pre}w_gates"), init.linear(d, 2 * h, 0.1));
        // Input gates start nearly shut; forget gates start mostly open with a
        // spread of time scales across heads.
        let mut bias = vec![m.input_gate_bias_init; h];
        bias.extend((0..h).map(|i| 3.0 + 3.0 * i as f64 / (h.max(2) - 1) as f64));
        p.insert(format!("{pre}b_gates"), Tensor::vector(bias));
        p.insert(format!("{pre}head_norm"), Tensor::full(&[v], 1.0));
        p.insert(format!("{pre}w_out"), init.linear(v, d, out_gain));
        ffn(p, init, &pre, d, cfg.ffn_hidden(), out_gain);
    }
}

/// Random subword teacher: token embeddings, global transformer, output head.
pub fn init_teacher(cfg: &ModelConfig, seed: u64) -> Result<ParamStore, ModelError> {
    cfg.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut p = ParamStore::new();
    p.insert("embed", init.normal(&[cfg.subword_vocab, cfg.d], 1.0));
    global_layers(&mut p, &mut init, cfg);
    p.insert("head", init.linear(cfg.d, cfg.subword_vocab, 1.0));
    Ok(p)
}

/// Byte-level model around a teacher's global transformer.
///
/// The global tensors are copied from `teacher`. The subword-suffix table is
/// copied from the teacher's input embeddings unless `fresh_suffix_embed` is
/// set, in which case it starts at zero.
pub fn init_byte_lm(
    cfg: &ModelConfig,
    teacher: &ParamStore,
    fresh_suffix_embed: bool,
    seed: u64,
) -> Result<ParamStore, ModelError> {
    cfg.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let d = cfg.d;
    let mut p = ParamStore::new();
    p.insert("byte_embed", init.normal(&[BOS_BYTE + 1, d], 1.0));
    let embed = teacher.get("embed")?;
    if embed.shape() != [cfg.subword_vocab, d] {
        return Err(ModelError::Config(format!(
            "teacher embeddings {:?} do not match vocab {} x d {}",
            embed.shape(),
            cfg.subword_vocab,
            d
        )));
    }
    p.insert(
        "subword_embed",
        if fresh_suffix_embed {
            Tensor::zeros(embed.shape())
        } else {
            embed.clone()
        },
    );
    mlstm_layers(&mut p, &mut init, cfg, "encoder", cfg.encoder_layers);
    p.insert("boundary.wq", init.linear(d, d, 1.0));
    p.insert("boundary.wk", init.linear(d, d, 1.0));
    for (name, t) in teacher.iter() {
        if name.starts_with("global.") {
            p.insert(name, t.clone());
        }
    }
    p.insert("depool_proj", Tensor::zeros(&[d, d]));
    p.insert("start_vector", Tensor::zeros(&[d]));
    mlstm_layers(&mut p, &mut init, cfg, "decoder", cfg.decoder_layers);
    p.insert("lm_head.norm", Tensor::full(&[d], 1.0));
    p.insert("lm_head.weight", init.linear(d, FUSED_VOCAB, 0.1));
    p.insert("lm_head.bias", Tensor::zeros(&[FUSED_VOCAB]));
    Ok(p)
}
