//! Adam with global-norm gradient clipping.

use thiserror::Error;

use super::layers::ParamSet;
use super::tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter `{0}`; update rejected")]
    NonFiniteGradient(String),
    #[error("gradient count {got} does not match parameter count {want}")]
    GradientCountMismatch { got: usize, want: usize },
    #[error("gradient shape {got:?} does not match parameter `{name}` shape {want:?}")]
    GradientShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm ceiling.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            clip: 100.0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// One optimizer update: clip gradients to the configured global norm, then
/// apply bias-corrected Adam per parameter. On any non-finite gradient the
/// parameters are left untouched.
pub fn adam_step<R: Real>(
    params: &mut ParamSet<R>,
    grads: &[Tensor<R>],
    cfg: &AdamConfig,
) -> Result<(), OptimError> {
    if grads.len() != params.len() {
        return Err(OptimError::GradientCountMismatch {
            got: grads.len(),
            want: params.len(),
        });
    }
    let mut sq_norm = 0.0f64;
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(OptimError::GradientShapeMismatch {
                name: p.name.clone(),
                got: g.shape().to_vec(),
                want: p.value.shape().to_vec(),
            });
        }
        for &x in g.data() {
            if !x.is_finite() {
                return Err(OptimError::NonFiniteGradient(p.name.clone()));
            }
            let xf = x.to_f64();
            sq_norm += xf * xf;
        }
    }
    let norm = sq_norm.sqrt();
    let scale = if norm > cfg.clip { cfg.clip / norm } else { 1.0 };
    let scale_r = R::from_f64(scale);

    let b1 = R::from_f64(cfg.beta1);
    let b2 = R::from_f64(cfg.beta2);
    let one = R::ONE;
    let eps = R::from_f64(cfg.eps);

    for (p, g) in params.iter_mut().zip(grads) {
        p.step += 1;
        let t = p.step as i32;
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let lr = R::from_f64(cfg.lr);
        for i in 0..g.len() {
            let gi = g.data()[i] * scale_r;
            let m = b1 * p.m.data()[i] + (one - b1) * gi;
            let v = b2 * p.v.data()[i] + (one - b2) * gi * gi;
            p.m.data_mut()[i] = m;
            p.v.data_mut()[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            p.value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
