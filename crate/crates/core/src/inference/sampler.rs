use rand::Rng;

use super::InferenceError;
use crate::model::FusedSymbol;
use crate::numerics::softmax_in_place;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Zero means greedy decoding.
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.6,
            top_p: 0.6,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(InferenceError::Config(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(InferenceError::Config(format!(
                "top_p {} must be in (0, 1]",
                self.top_p
            )));
        }
        Ok(())
    }
}

/// Lowest index among the maxima.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Draws a fused symbol from log-probabilities (or logits) over the 512
/// fused symbols: temperature scaling, then nucleus truncation to the
/// smallest set of most likely symbols holding at least `top_p` of the mass.
pub fn sample(logits: &[f64], cfg: &SamplerConfig, rng: &mut impl Rng) -> FusedSymbol {
    if cfg.temperature == 0.0 {
        return FusedSymbol(argmax(logits) as u16);
    }
    let mut p: Vec<f64> = logits.iter().map(|v| v / cfg.temperature).collect();
    softmax_in_place(&mut p);
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        mass += p[i];
        kept += 1;
        if mass >= cfg.top_p {
            break;
        }
    }
    let nucleus = &order[..kept];
    let total: f64 = nucleus.iter().map(|&i| p[i]).sum();
    let mut u = rng.gen::<f64>() * total;
    for &i in nucleus {
        u -= p[i];
        if u < 0.0 {
            return FusedSymbol(i as u16);
        }
    }
    FusedSymbol(*nucleus.last().expect("non-empty nucleus") as u16)
}
