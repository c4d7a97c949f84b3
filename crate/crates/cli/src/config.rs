//! Flat `section.key = value` configuration. Layers apply in order: built-in
//! defaults, the header of a checkpoint being continued, `--config`, then
//! command-line flags.

use std::str::FromStr;

use bytelift_core::boundary_supervision::{MergeKind, MergeStrategy};
use bytelift_core::inference::{GenerateConfig, SamplerConfig};
use bytelift_core::model::{BoundaryMode, ModelConfig};
use bytelift_core::training::{Stage, TrainConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {msg}")]
    BadValue {
        key: String,
        value: String,
        msg: String,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped
/// and `[section]` headers prefix the keys that follow.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            });
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        let key = if section.is_empty() {
            k.to_string()
        } else {
            format!("{section}.{k}")
        };
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        msg: e.to_string(),
    })
}

fn mode_name(m: BoundaryMode) -> &'static str {
    match m {
        BoundaryMode::NonCausal => "noncausal",
        BoundaryMode::Causal => "causal",
    }
}

fn parse_mode(key: &str, v: &str) -> Result<BoundaryMode, ConfigError> {
    match v {
        "noncausal" | "non-causal" => Ok(BoundaryMode::NonCausal),
        "causal" => Ok(BoundaryMode::Causal),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: v.into(),
            msg: "expected noncausal or causal".into(),
        }),
    }
}

pub fn merge_name(k: MergeKind) -> &'static str {
    match k {
        MergeKind::Subword => "subword",
        MergeKind::Bpe => "bpe",
        MergeKind::Entropy => "entropy",
        MergeKind::CrossEntropy => "xent",
    }
}

/// Data preparation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub vocab_size: usize,
    /// Training documents used to fit the subword vocabulary.
    pub bpe_docs: usize,
    pub held_out_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub teacher: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub sample: GenerateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig {
            decoder_layers: 2,
            ..ModelConfig::default()
        };
        let teacher = TrainConfig {
            steps: 3000,
            batch_size: 16,
            max_bytes: 256,
            warmup_steps: 100,
            lr: 3e-3,
            local_lr_mult: 1.0,
            ..TrainConfig::default()
        };
        let stage1 = TrainConfig {
            steps: 2500,
            batch_size: 8,
            max_bytes: 256,
            warmup_steps: 100,
            lr: 1e-3,
            local_lr_mult: 2.0,
            ..TrainConfig::default()
        };
        let stage2 = TrainConfig {
            stage: Stage::Two,
            steps: 1500,
            batch_size: 8,
            max_bytes: 256,
            warmup_steps: 100,
            lr: 2e-4,
            local_lr_mult: 2.0,
            merge: MergeStrategy {
                kind: MergeKind::Subword,
                target: 1.0,
            },
            ..TrainConfig::default()
        };
        Self {
            seed: 0,
            model,
            data: DataConfig {
                vocab_size: 512,
                bpe_docs: 3000,
                held_out_fraction: 0.05,
            },
            teacher,
            stage1,
            stage2,
            sample: GenerateConfig {
                max_bytes: 256,
                ..GenerateConfig::default()
            },
        }
    }
}

fn train_entries(prefix: &str, t: &TrainConfig, out: &mut Vec<(String, String)>) {
    let mut put = |k: &str, v: String| out.push((format!("{prefix}.{k}"), v));
    put("steps", t.steps.to_string());
    put("batch_size", t.batch_size.to_string());
    put("max_bytes", t.max_bytes.to_string());
    put("warmup_steps", t.warmup_steps.to_string());
    put("lr", t.lr.to_string());
    put("local_lr_mult", t.local_lr_mult.to_string());
    put("tau", t.tau.to_string());
    put("weight_boundary", t.weights.boundary.to_string());
    put("weight_encoder", t.weights.encoder.to_string());
    put("weight_distill", t.weights.distill.to_string());
    put("weight_ce", t.weights.ce.to_string());
    put("beta1", t.optimizer.beta1.to_string());
    put("beta2", t.optimizer.beta2.to_string());
    put("eps", t.optimizer.eps.to_string());
    put("weight_decay", t.optimizer.weight_decay.to_string());
    put("grad_clip", t.optimizer.grad_clip.to_string());
    put("merge_strategy", merge_name(t.merge.kind).to_string());
    put("target_compression", t.merge.target.to_string());
}

fn set_train(t: &mut TrainConfig, field: &str, key: &str, v: &str) -> Result<(), ConfigError> {
    match field {
        "steps" => t.steps = parse(key, v)?,
        "batch_size" => t.batch_size = parse(key, v)?,
        "max_bytes" => t.max_bytes = parse(key, v)?,
        "warmup_steps" => t.warmup_steps = parse(key, v)?,
        "lr" => t.lr = parse(key, v)?,
        "local_lr_mult" => t.local_lr_mult = parse(key, v)?,
        "tau" => t.tau = parse(key, v)?,
        "weight_boundary" => t.weights.boundary = parse(key, v)?,
        "weight_encoder" => t.weights.encoder = parse(key, v)?,
        "weight_distill" => t.weights.distill = parse(key, v)?,
        "weight_ce" => t.weights.ce = parse(key, v)?,
        "beta1" => t.optimizer.beta1 = parse(key, v)?,
        "beta2" => t.optimizer.beta2 = parse(key, v)?,
        "eps" => t.optimizer.eps = parse(key, v)?,
        "weight_decay" => t.optimizer.weight_decay = parse(key, v)?,
        "grad_clip" => t.optimizer.grad_clip = parse(key, v)?,
        "merge_strategy" => t.merge.kind = parse(key, v)?,
        "target_compression" => t.merge.target = parse(key, v)?,
        _ => return Err(ConfigError::UnknownKey(key.to_string())),
    }
    Ok(())
}

impl RunConfig {
    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let s = &self.sample;
        let mut out: Vec<(String, String)> = vec![
            ("run.seed".into(), self.seed.to_string()),
            ("model.d".into(), m.d.to_string()),
            ("model.encoder_layers".into(), m.encoder_layers.to_string()),
            ("model.decoder_layers".into(), m.decoder_layers.to_string()),
            ("model.mlstm_heads".into(), m.mlstm.heads.to_string()),
            ("model.mlstm_qk_dim".into(), m.mlstm.qk_dim.to_string()),
            ("model.mlstm_v_dim".into(), m.mlstm.v_dim.to_string()),
            (
                "model.gate_soft_cap".into(),
                m.mlstm.gate_soft_cap.to_string(),
            ),
            (
                "model.input_gate_bias_init".into(),
                m.mlstm.input_gate_bias_init.to_string(),
            ),
            ("model.ffn_expansion".into(), m.ffn_expansion.to_string()),
            ("model.global_layers".into(), m.global.layers.to_string()),
            ("model.global_heads".into(), m.global.heads.to_string()),
            (
                "model.global_head_dim".into(),
                m.global.head_dim.to_string(),
            ),
            ("model.rope_base".into(), m.global.rope_base.to_string()),
            ("model.subword_vocab".into(), m.subword_vocab.to_string()),
            ("model.n_probe".into(), m.n_probe.to_string()),
            (
                "model.boundary_threshold".into(),
                m.boundary_threshold.to_string(),
            ),
            ("model.norm_eps".into(), m.norm_eps.to_string()),
            (
                "model.boundary_mode".into(),
                mode_name(self.stage1.boundary_mode).to_string(),
            ),
            ("data.vocab_size".into(), self.data.vocab_size.to_string()),
            ("data.bpe_docs".into(), self.data.bpe_docs.to_string()),
            (
                "data.held_out_fraction".into(),
                self.data.held_out_fraction.to_string(),
            ),
        ];
        train_entries("teacher", &self.teacher, &mut out);
        train_entries("stage1", &self.stage1, &mut out);
        train_entries("stage2", &self.stage2, &mut out);
        out.extend([
            (
                "sample.temperature".into(),
                s.sampler.temperature.to_string(),
            ),
            ("sample.top_p".into(), s.sampler.top_p.to_string()),
            ("sample.max_bytes".into(), s.max_bytes.to_string()),
            (
                "sample.max_patch_bytes".into(),
                s.max_patch_bytes.to_string(),
            ),
            (
                "sample.end_of_text".into(),
                s.end_of_text.map_or("none".to_string(), |b| b.to_string()),
            ),
        ]);
        out
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        let m = &mut self.model;
        match (section, field) {
            ("run", "seed") => self.seed = parse(key, v)?,
            ("model", "d") => m.d = parse(key, v)?,
            ("model", "encoder_layers") => m.encoder_layers = parse(key, v)?,
            ("model", "decoder_layers") => m.decoder_layers = parse(key, v)?,
            ("model", "mlstm_heads") => m.mlstm.heads = parse(key, v)?,
            ("model", "mlstm_qk_dim") => m.mlstm.qk_dim = parse(key, v)?,
            ("model", "mlstm_v_dim") => m.mlstm.v_dim = parse(key, v)?,
            ("model", "gate_soft_cap") => m.mlstm.gate_soft_cap = parse(key, v)?,
            ("model", "input_gate_bias_init") => m.mlstm.input_gate_bias_init = parse(key, v)?,
            ("model", "ffn_expansion") => m.ffn_expansion = parse(key, v)?,
            ("model", "global_layers") => m.global.layers = parse(key, v)?,
            ("model", "global_heads") => m.global.heads = parse(key, v)?,
            ("model", "global_head_dim") => m.global.head_dim = parse(key, v)?,
            ("model", "rope_base") => m.global.rope_base = parse(key, v)?,
            ("model", "subword_vocab") => m.subword_vocab = parse(key, v)?,
            ("model", "n_probe") => m.n_probe = parse(key, v)?,
            ("model", "boundary_threshold") => m.boundary_threshold = parse(key, v)?,
            ("model", "norm_eps") => m.norm_eps = parse(key, v)?,
            ("model", "boundary_mode") => {
                let mode = parse_mode(key, v)?;
                self.stage1.boundary_mode = mode;
                self.stage2.boundary_mode = mode;
                self.sample.prefill_mode = mode;
            }
            ("data", "vocab_size") => self.data.vocab_size = parse(key, v)?,
            ("data", "bpe_docs") => self.data.bpe_docs = parse(key, v)?,
            ("data", "held_out_fraction") => self.data.held_out_fraction = parse(key, v)?,
            ("teacher", f) => set_train(&mut self.teacher, f, key, v)?,
            ("stage1", f) => set_train(&mut self.stage1, f, key, v)?,
            ("stage2", f) => set_train(&mut self.stage2, f, key, v)?,
            ("sample", "temperature") => self.sample.sampler.temperature = parse(key, v)?,
            ("sample", "top_p") => self.sample.sampler.top_p = parse(key, v)?,
            ("sample", "max_bytes") => self.sample.max_bytes = parse(key, v)?,
            ("sample", "max_patch_bytes") => self.sample.max_patch_bytes = parse(key, v)?,
            ("sample", "end_of_text") => {
                self.sample.end_of_text = if v == "none" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<(), ConfigError> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply(&parse_kv(text)?)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| bad(&e))?;
        for t in [&self.teacher, &self.stage1, &self.stage2] {
            t.validate().map_err(|e| bad(&e))?;
        }
        self.sample.sampler.validate().map_err(|e| bad(&e))?;
        if self.data.vocab_size <= 256 {
            return Err(ConfigError::Invalid(
                "data.vocab_size must exceed 256".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.data.held_out_fraction) {
            return Err(ConfigError::Invalid(
                "data.held_out_fraction must be in [0, 1)".into(),
            ));
        }
        if self.sample.max_patch_bytes == 0 {
            return Err(ConfigError::Invalid(
                "sample.max_patch_bytes must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Sampler settings carrying the run seed.
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.seed,
            ..self.sample.sampler
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_exact() {
        let mut c = RunConfig::default();
        c.stage1.lr = 0.1 + 0.2;
        c.sample.end_of_text = None;
        c.set("model.boundary_mode", "causal").unwrap();
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn sections_prefix_keys_and_comments_are_ignored() {
        let kv =
            parse_kv("# top\n[stage2]\nlr = 0.5 # peak\n\n[model]\nd=64\nrun.seed=3\n").unwrap();
        assert_eq!(
            kv,
            vec![
                ("stage2.lr".to_string(), "0.5".to_string()),
                ("model.d".to_string(), "64".to_string()),
                ("model.run.seed".to_string(), "3".to_string()),
            ]
        );
    }

    #[test]
    fn errors_name_the_problem() {
        assert!(matches!(
            parse_kv("novalue"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        let mut c = RunConfig::default();
        assert!(matches!(
            c.set("model.width", "3"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            c.set("model.d", "wide"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            c.set("stage2.merge_strategy", "zip"),
            Err(ConfigError::BadValue { .. })
        ));
        c.set("model.d", "30").unwrap();
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));
        assert!(RunConfig::default().validate().is_ok());
    }
}
