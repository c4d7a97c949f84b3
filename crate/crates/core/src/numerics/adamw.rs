use super::{NumericsError, Tensor};

/// Optimizer constants. Defaults follow the usual LM recipe: betas (0.9, 0.95),
/// decoupled weight decay 0.1 and global-norm clipping at 0.5.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 0.5,
        }
    }
}

/// Moments for one list of parameters, in the same order as the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamWState {
    pub fn new<'t>(params: impl IntoIterator<Item = &'t Tensor>) -> Self {
        let m: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// Per-parameter update settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamUpdate {
    pub lr: f64,
    /// Whether decoupled weight decay applies (off for gains and biases).
    pub decay: bool,
}

/// Global-norm gradient clipping followed by one AdamW update.
///
/// Returns the gradient norm measured before clipping.
pub fn adamw_step(
    cfg: &AdamW,
    state: &mut AdamWState,
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    updates: &[ParamUpdate],
) -> Result<f64, NumericsError> {
    if params.len() != grads.len() || params.len() != updates.len() || params.len() != state.m.len()
    {
        return Err(NumericsError::Invalid(format!(
            "adamw: {} params, {} grads, {} settings, {} moments",
            params.len(),
            grads.len(),
            updates.len(),
            state.m.len()
        )));
    }
    let mut sq = 0.0;
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "adamw",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(NumericsError::NonFinite {
                op: "adamw gradient",
            });
        }
        sq += g.sum_sq();
    }
    let norm = sq.sqrt();
    let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (i, p) in params.iter_mut().enumerate() {
        let ParamUpdate { lr, decay } = updates[i];
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let decay = if decay { lr * cfg.weight_decay } else { 0.0 };
        for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            let g = g * clip;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= decay * *w;
            *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_without_decay_leaves_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let g = Tensor::zeros(&[2]);
        let mut st = AdamWState::new([&p]);
        let cfg = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        adamw_step(
            &cfg,
            &mut st,
            &mut [&mut p],
            &[&g],
            &[ParamUpdate {
                lr: 1e-3,
                decay: true,
            }],
        )
        .unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn clipping_scales_gradient() {
        // Norm 10 clipped to 0.5 is a 0.05 scale; the first moment shows it.
        let mut p = Tensor::vector(vec![0.0, 0.0]);
        let g = Tensor::vector(vec![6.0, 8.0]);
        let mut st = AdamWState::new([&p]);
        let cfg = AdamW::default();
        let norm = adamw_step(
            &cfg,
            &mut st,
            &mut [&mut p],
            &[&g],
            &[ParamUpdate {
                lr: 1e-3,
                decay: true,
            }],
        )
        .unwrap();
        assert_eq!(norm, 10.0);
        let m = st.m[0].data();
        assert!((m[0] - 0.1 * 6.0 * 0.05).abs() < 1e-15);
        assert!((m[1] - 0.1 * 8.0 * 0.05).abs() < 1e-15);
    }

    #[test]
    fn scalar_step_matches_hand_rolled() {
        let (p0, g, lr, b1, b2, eps, wd) = (1.5_f64, 0.3_f64, 1e-3, 0.9, 0.95, 1e-8, 0.1);
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1);
        let vhat = v / (1.0 - b2);
        let after_decay = p0 - lr * wd * p0;
        let expected = after_decay - lr * mhat / (vhat.sqrt() + eps);

        let mut p = Tensor::scalar(p0);
        let gt = Tensor::scalar(g);
        let mut st = AdamWState::new([&p]);
        let cfg = AdamW {
            grad_clip: 0.0,
            ..AdamW::default()
        };
        adamw_step(
            &cfg,
            &mut st,
            &mut [&mut p],
            &[&gt],
            &[ParamUpdate { lr, decay: true }],
        )
        .unwrap();
        assert!(
            (p.item() - expected).abs() < 1e-15,
            "{} vs {expected}",
            p.item()
        );
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(f64::NAN);
        let mut st = AdamWState::new([&p]);
        let r = adamw_step(
            &AdamW::default(),
            &mut st,
            &mut [&mut p],
            &[&g],
            &[ParamUpdate {
                lr: 1.0,
                decay: false,
            }],
        );
        assert!(matches!(r, Err(NumericsError::NonFinite { .. })));
    }
}
