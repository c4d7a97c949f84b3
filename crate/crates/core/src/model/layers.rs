use std::collections::HashMap;

use super::{ModelConfig, ModelError, ParamStore};
use crate::numerics::{Graph, MlstmState, Tensor, Var};

/// Parameters of a [`ParamStore`] placed on a graph.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Binds every tensor by reference; names for which `trainable` holds
    /// become differentiable leaves, the rest constants.
    pub fn bind<'a>(
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    g.param_ref(t)
                } else {
                    g.constant_ref(t)
                };
                (name.to_string(), v)
            })
            .collect();
        Self { vars }
    }

    /// Binding from explicit pairs, for graphs built over copies.
    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Recurrent state of one mLSTM stack, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalState {
    pub layers: Vec<MlstmState>,
}

impl LocalState {
    pub fn empty(cfg: &ModelConfig, layers: usize) -> Self {
        let m = &cfg.mlstm;
        Self {
            layers: (0..layers)
                .map(|_| MlstmState::empty(m.heads, m.qk_dim, m.v_dim))
                .collect(),
        }
    }
}

/// Keys and values of the global model, one `[patches, d]` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub k: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        let inner = cfg.global.heads * cfg.global.head_dim;
        let empty = || {
            (0..cfg.global.layers)
                .map(|_| Tensor::zeros(&[0, inner]))
                .collect()
        };
        Self {
            k: empty(),
            v: empty(),
        }
    }

    /// Number of cached patches.
    pub fn len(&self) -> usize {
        self.k.first().map_or(0, |t| t.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn norm(
    g: &mut Graph,
    b: &Bound,
    name: &str,
    x: Var,
    eps: f64,
) -> Result<Var, ModelError> {
    let d = g.value(x).cols();
    let n = g.rmsnorm(x, d, eps)?;
    Ok(g.mul_row(n, b.get(name)?)?)
}

fn linear(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var, ModelError> {
    Ok(g.matmul(x, b.get(name)?)?)
}

/// Pre-norm SwiGLU feed-forward added residually.
fn ffn(g: &mut Graph, cfg: &ModelConfig, b: &Bound, pre: &str, x: Var) -> Result<Var, ModelError> {
    let xn = norm(g, b, &format!("{pre}ffn_norm"), x, cfg.norm_eps)?;
    let a = linear(g, b, &format!("{pre}ffn_w1"), xn)?;
    let a = g.silu(a)?;
    let c = linear(g, b, &format!("{pre}ffn_w3"), xn)?;
    let h = g.mul(a, c)?;
    let y = linear(g, b, &format!("{pre}ffn_w2"), h)?;
    Ok(g.add(x, y)?)
}

/// One mLSTM layer plus FFN. Returns the output rows and the carried state.
pub(crate) fn mlstm_block(
    g: &mut Graph,
    cfg: &ModelConfig,
    b: &Bound,
    pre: &str,
    x: Var,
    state: Option<&MlstmState>,
) -> Result<(Var, MlstmState), ModelError> {
    let m = &cfg.mlstm;
    let xn = norm(g, b, &format!("{pre}norm"), x, cfg.norm_eps)?;
    let q = linear(g, b, &format!("{pre}wq"), xn)?;
    let k = linear(g, b, &format!("{pre}wk"), xn)?;
    let k = g.scale(k, 1.0 / (m.qk_dim as f64).sqrt())?;
    let v = linear(g, b, &format!("{pre}wv"), xn)?;
    let o = linear(g, b, &format!("{pre}wo_gate"), xn)?;
    let o = g.sigmoid(o)?;
    let gates = linear(g, b, &format!("{pre}w_gates"), xn)?;
    let gates = g.add_row(gates, b.get(&format!("{pre}b_gates"))?)?;
    let gates = g.soft_cap(gates, m.gate_soft_cap)?;
    let ig = g.slice_cols(gates, 0, m.heads)?;
    let fg = g.slice_cols(gates, m.heads, m.heads)?;
    let (h, next) = g.mlstm(q, k, v, ig, fg, m.heads, state)?;
    let hn = g.rmsnorm(h, m.v_dim, cfg.norm_eps)?;
    let hn = g.mul_row(hn, b.get(&format!("{pre}head_norm"))?)?;
    let gated = g.mul(o, hn)?;
    let y = linear(g, b, &format!("{pre}w_out"), gated)?;
    let x = g.add(x, y)?;
    Ok((ffn(g, cfg, b, pre, x)?, next))
}

/// Runs the `stack` ("encoder" or "decoder") over `x`, updating `state` in place
/// when given.
pub(crate) fn mlstm_stack(
    g: &mut Graph,
    cfg: &ModelConfig,
    b: &Bound,
    stack: &str,
    layers: usize,
    mut x: Var,
    mut state: Option<&mut LocalState>,
) -> Result<Var, ModelError> {
    for l in 0..layers {
        let prev = state.as_deref().map(|s| &s.layers[l]);
        let (y, next) = mlstm_block(g, cfg, b, &format!("{stack}.{l}."), x, prev)?;
        if let Some(s) = state.as_deref_mut() {
            s.layers[l] = next;
        }
        x = y;
    }
    Ok(x)
}

/// One pre-norm attention layer over patch rows starting at patch index
/// `offset`. With a cache, the new keys and values are appended to it.
fn attention_block(
    g: &mut Graph,
    cfg: &ModelConfig,
    b: &Bound,
    l: usize,
    x: Var,
    offset: usize,
    cache: Option<&mut KvCache>,
) -> Result<Var, ModelError> {
    let gc = &cfg.global;
    let pre = format!("global.{l}.");
    let xn = norm(g, b, &format!("{pre}attn_norm"), x, cfg.norm_eps)?;
    let q = linear(g, b, &format!("{pre}wq"), xn)?;
    let q = g.rope(q, gc.heads, gc.head_dim, offset, gc.rope_base)?;
    let k = linear(g, b, &format!("{pre}wk"), xn)?;
    let mut k = g.rope(k, gc.heads, gc.head_dim, offset, gc.rope_base)?;
    let mut v = linear(g, b, &format!("{pre}wv"), xn)?;
    if let Some(c) = cache {
        if c.k[l].rows() != offset {
            return Err(ModelError::Input(format!(
                "kv cache holds {} patches but offset is {offset}",
                c.k[l].rows()
            )));
        }
        let ck = g.constant(c.k[l].clone());
        let cv = g.constant(c.v[l].clone());
        k = g.concat_rows(&[ck, k])?;
        v = g.concat_rows(&[cv, v])?;
        c.k[l] = g.value(k).clone();
        c.v[l] = g.value(v).clone();
    }
    let scale = 1.0 / (gc.head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(gc.heads);
    for h in 0..gc.heads {
        let qh = g.slice_cols(q, h * gc.head_dim, gc.head_dim)?;
        let kh = g.slice_cols(k, h * gc.head_dim, gc.head_dim)?;
        let vh = g.slice_cols(v, h * gc.head_dim, gc.head_dim)?;
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, scale)?;
        let p = g.causal_softmax(s)?;
        heads.push(g.matmul(p, vh)?);
    }
    let o = g.concat_cols(&heads)?;
    let y = linear(g, b, &format!("{pre}wo"), o)?;
    let x = g.add(x, y)?;
    ffn(g, cfg, b, &pre, x)
}

/// Residual streams of the first `layers` global layers: entry `i` is the
/// input to layer `i`, so the result has `layers + 1` entries.
pub(crate) fn global_layers(
    g: &mut Graph,
    cfg: &ModelConfig,
    b: &Bound,
    h: Var,
    layers: usize,
    offset: usize,
    mut cache: Option<&mut KvCache>,
) -> Result<Vec<Var>, ModelError> {
    let mut out = vec![h];
    for l in 0..layers {
        let x = *out.last().expect("non-empty");
        out.push(attention_block(
            g,
            cfg,
            b,
            l,
            x,
            offset,
            cache.as_deref_mut(),
        )?);
    }
    Ok(out)
}

/// Full global model with its final norm.
pub(crate) fn global_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    b: &Bound,
    h: Var,
    offset: usize,
    cache: Option<&mut KvCache>,
) -> Result<(Vec<Var>, Var), ModelError> {
    let hidden = global_layers(g, cfg, b, h, cfg.global.layers, offset, cache)?;
    let last = *hidden.last().expect("non-empty");
    let out = norm(g, b, "global.final_norm", last, cfg.norm_eps)?;
    Ok((hidden, out))
}
