//! Transferring post-training to a byte model by weight differences, plus
//! the diagnostics that say whether that is likely to work.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::model::{Component, ModelConfig, ModelError, ParamStore, SubwordLm};
use crate::numerics::Tensor;
use crate::tokenization::SubwordVocab;
use crate::training::prepare_docs;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MergeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("parameter {0} missing from one of the checkpoints")]
    MissingName(String),
    #[error("shape mismatch for {name}: {lhs:?} vs {rhs:?}")]
    Shape {
        name: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

type Result<T> = std::result::Result<T, MergeError>;

/// Teacher tensors replaced when resetting embeddings: the input table and
/// the output projection.
pub const EMBEDDING_NAMES: [&str; 2] = ["embed", "head"];

fn is_global(name: &str) -> bool {
    Component::of(name) == Some(Component::Global)
}

fn check_shape(name: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MergeError::Shape {
            name: name.to_string(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `posttrained − base` over the global-model tensors only.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDelta {
    pub tensors: BTreeMap<String, Tensor>,
}

impl WeightDelta {
    pub fn between(base: &ParamStore, posttrained: &ParamStore) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, b) in base.iter().filter(|(n, _)| is_global(n)) {
            let p = posttrained
                .get(name)
                .map_err(|_| MergeError::MissingName(name.to_string()))?;
            check_shape(name, b, p)?;
            let d: Vec<f64> = p.data().iter().zip(b.data()).map(|(p, b)| p - b).collect();
            tensors.insert(
                name.to_string(),
                Tensor::new(b.shape().to_vec(), d).expect("same shape"),
            );
        }
        if let Some(extra) = posttrained
            .names()
            .find(|n| is_global(n) && !base.contains(n))
        {
            return Err(MergeError::MissingName(extra.to_string()));
        }
        Ok(Self { tensors })
    }

    /// Adds `sign · delta` to the matching tensors of `target`; every other
    /// tensor is copied unchanged.
    pub fn apply(&self, target: &ParamStore, sign: f64) -> Result<ParamStore> {
        for (name, d) in &self.tensors {
            let t = target
                .get(name)
                .map_err(|_| MergeError::MissingName(name.clone()))?;
            check_shape(name, t, d)?;
        }
        if let Some(extra) = target
            .names()
            .find(|n| is_global(n) && !self.tensors.contains_key(*n))
        {
            return Err(MergeError::MissingName(extra.to_string()));
        }
        let mut out = target.clone();
        for (name, d) in &self.tensors {
            let t = out.get_mut(name)?;
            for (x, dx) in t.data_mut().iter_mut().zip(d.data()) {
                *x += sign * dx;
            }
        }
        Ok(out)
    }
}

/// Byte model with its global model moved by `posttrained − base`.
pub fn task_arithmetic_merge(
    byte_lm: &ParamStore,
    base: &ParamStore,
    posttrained: &ParamStore,
) -> Result<ParamStore> {
    WeightDelta::between(base, posttrained)?.apply(byte_lm, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResetReport {
    /// Token cross-entropy of the post-trained model.
    pub ce_posttrained: f64,
    /// The same with its embeddings replaced by the base model's.
    pub ce_reset: f64,
}

impl ResetReport {
    /// `ce_reset / ce_posttrained`.
    pub fn ratio(&self) -> f64 {
        self.ce_reset / self.ce_posttrained
    }
}

fn token_ce<D: AsRef<[u8]> + Sync>(
    cfg: &ModelConfig,
    params: &ParamStore,
    vocab: &SubwordVocab,
    docs: &[D],
    max_bytes: usize,
) -> Result<f64> {
    let lm = SubwordLm::new(cfg, params, vocab)?;
    let (mut nll, mut tokens) = (0.0, 0usize);
    for x in prepare_docs(docs, max_bytes) {
        let lp = lm.outputs(&x)?.token_logprobs();
        nll -= lp.iter().sum::<f64>();
        tokens += lp.len();
    }
    if tokens == 0 {
        return Err(MergeError::Degenerate(
            "evaluation corpus has no tokens".into(),
        ));
    }
    Ok(nll / tokens as f64)
}

/// Whether the post-trained teacher still works with the base embeddings.
pub fn reset_embeddings_check<D: AsRef<[u8]> + Sync>(
    cfg: &ModelConfig,
    vocab: &SubwordVocab,
    base: &ParamStore,
    posttrained: &ParamStore,
    docs: &[D],
    max_bytes: usize,
) -> Result<ResetReport> {
    let mut reset = posttrained.clone();
    for name in EMBEDDING_NAMES {
        let b = base
            .get(name)
            .map_err(|_| MergeError::MissingName(name.into()))?;
        let p = reset
            .get_mut(name)
            .map_err(|_| MergeError::MissingName(name.into()))?;
        check_shape(name, b, p)?;
        *p = b.clone();
    }
    Ok(ResetReport {
        ce_posttrained: token_ce(cfg, posttrained, vocab, docs, max_bytes)?,
        ce_reset: token_ce(cfg, &reset, vocab, docs, max_bytes)?,
    })
}

/// Explained variance of the singular values of a matrix, largest first.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    /// `σ_i² / Σ σ_j²`.
    pub ratios: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl SpectrumReport {
    /// One tab-separated line per singular value, with a header.
    pub fn to_table(&self) -> String {
        let mut s = String::from("index\tsingular_value\tratio\tcumulative\n");
        for i in 0..self.ratios.len() {
            s.push_str(&format!(
                "{i}\t{:.10e}\t{:.10e}\t{:.10e}\n",
                self.singular_values[i], self.ratios[i], self.cumulative[i]
            ));
        }
        s
    }

    /// Smallest number of singular values explaining at least `share` of the
    /// variance.
    pub fn rank_for(&self, share: f64) -> usize {
        self.cumulative
            .iter()
            .position(|&c| c >= share)
            .map_or(self.cumulative.len(), |i| i + 1)
    }
}

pub fn spectrum_report(m: &Tensor) -> Result<SpectrumReport> {
    if m.numel() == 0 || m.shape().len() != 2 {
        return Err(MergeError::Degenerate(format!(
            "need a non-empty matrix, got {:?}",
            m.shape()
        )));
    }
    if m.data().iter().any(|v| !v.is_finite()) {
        return Err(MergeError::Degenerate(
            "matrix has non-finite entries".into(),
        ));
    }
    let mat = DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let svd = mat
        .try_svd(false, false, f64::EPSILON, 10_000)
        .ok_or_else(|| MergeError::Degenerate("SVD did not converge".into()))?;
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sv.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(MergeError::Degenerate("zero matrix".into()));
    }
    let ratios: Vec<f64> = sv.iter().map(|s| s * s / total).collect();
    let cumulative = ratios
        .iter()
        .scan(0.0, |acc, r| {
            *acc += r;
            Some(*acc)
        })
        .collect();
    Ok(SpectrumReport {
        singular_values: sv,
        ratios,
        cumulative,
    })
}
