use serde::{Deserialize, Serialize};

use crate::autodiff::clip_global_norm;
use crate::error::{Error, Result};
use crate::optim::{Algorithm, OptimizerConfig};
use crate::tensor::{real, ParameterSet, Real};

fn pairs<'a, T: Real>(
    params: &'a mut ParameterSet<T>,
    grads: &'a ParameterSet<T>,
) -> Result<impl Iterator<Item = (&'a mut T, T)>> {
    params.check_aligned(grads)?;
    Ok(params.flat_values_mut().zip(grads.flat_values().copied()))
}

/// `theta -= lr * g`.
pub fn sgd_update<T: Real>(params: &mut ParameterSet<T>, grads: &ParameterSet<T>, lr: T) -> Result<()> {
    for (p, g) in pairs(params, grads)? {
        *p -= lr * g;
    }
    Ok(())
}

/// `G += g^2; theta -= lr * g / sqrt(G + eps)`.
pub fn adagrad_update<T: Real>(
    params: &mut ParameterSet<T>,
    grads: &ParameterSet<T>,
    sum_sq: &mut ParameterSet<T>,
    lr: T,
    eps: T,
) -> Result<()> {
    params.check_aligned(sum_sq)?;
    for ((p, g), acc) in pairs(params, grads)?.zip(sum_sq.flat_values_mut()) {
        *acc += g * g;
        *p -= lr * g / (*acc + eps).sqrt();
    }
    Ok(())
}

/// Decayed averages of squared gradients and squared updates:
///
/// ```text
/// Eg  = d Eg + (1 - d) g^2
/// u   = g sqrt(Eu + eps) / sqrt(Eg + eps)
/// theta -= lr * u
/// Eu  = d Eu + (1 - d) u^2
/// ```
pub fn adadelta_update<T: Real>(
    params: &mut ParameterSet<T>,
    grads: &ParameterSet<T>,
    avg_sq_grad: &mut ParameterSet<T>,
    avg_sq_update: &mut ParameterSet<T>,
    lr: T,
    decay: T,
    eps: T,
) -> Result<()> {
    params.check_aligned(avg_sq_grad)?;
    params.check_aligned(avg_sq_update)?;
    let keep = T::one() - decay;
    for (((p, g), eg), eu) in pairs(params, grads)?
        .zip(avg_sq_grad.flat_values_mut())
        .zip(avg_sq_update.flat_values_mut())
    {
        *eg = decay * *eg + keep * g * g;
        let u = g * (*eu + eps).sqrt() / (*eg + eps).sqrt();
        *p -= lr * u;
        *eu = decay * *eu + keep * u * u;
    }
    Ok(())
}

/// Adam with bias correction; `step` is incremented before use.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Real>(
    params: &mut ParameterSet<T>,
    grads: &ParameterSet<T>,
    m: &mut ParameterSet<T>,
    v: &mut ParameterSet<T>,
    step: &mut u64,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
) -> Result<()> {
    params.check_aligned(m)?;
    params.check_aligned(v)?;
    *step += 1;
    let t = *step as i32;
    let c1 = T::one() - beta1.powi(t);
    let c2 = T::one() - beta2.powi(t);
    for (((p, g), mi), vi) in pairs(params, grads)?.zip(m.flat_values_mut()).zip(v.flat_values_mut()) {
        *mi = beta1 * *mi + (T::one() - beta1) * g;
        *vi = beta2 * *vi + (T::one() - beta2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Per-algorithm accumulators of the gradient optimizers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "lowercase")]
pub enum GradientState<T> {
    Sgd,
    Adagrad {
        sum_sq: ParameterSet<T>,
    },
    Adadelta {
        avg_sq_grad: ParameterSet<T>,
        avg_sq_update: ParameterSet<T>,
    },
    Adam {
        m: ParameterSet<T>,
        v: ParameterSet<T>,
        step: u64,
    },
}

impl<T: Real> GradientState<T> {
    /// Zeroed state shaped like `params`.
    pub fn new(algorithm: Algorithm, params: &ParameterSet<T>) -> Result<Self> {
        Ok(match algorithm {
            Algorithm::Sgd => GradientState::Sgd,
            Algorithm::Adagrad => GradientState::Adagrad {
                sum_sq: params.zeros_like(),
            },
            Algorithm::Adadelta => GradientState::Adadelta {
                avg_sq_grad: params.zeros_like(),
                avg_sq_update: params.zeros_like(),
            },
            Algorithm::Adam => GradientState::Adam {
                m: params.zeros_like(),
                v: params.zeros_like(),
                step: 0,
            },
            other => {
                return Err(Error::Config(format!("{other} is not a gradient optimizer")));
            }
        })
    }

    pub fn algorithm(&self) -> Algorithm {
        match self {
            GradientState::Sgd => Algorithm::Sgd,
            GradientState::Adagrad { .. } => Algorithm::Adagrad,
            GradientState::Adadelta { .. } => Algorithm::Adadelta,
            GradientState::Adam { .. } => Algorithm::Adam,
        }
    }

    /// Clips `grads` to `cfg.clip_norm` (when positive) and applies one
    /// update. Non-finite gradients are rejected before anything changes.
    /// Returns the gradient norm before clipping.
    pub fn step(
        &mut self,
        cfg: &OptimizerConfig,
        params: &mut ParameterSet<T>,
        mut grads: ParameterSet<T>,
    ) -> Result<T> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let norm = if cfg.clip_norm > 0.0 {
            clip_global_norm(&mut grads, real(cfg.clip_norm))
        } else {
            grads.l2_norm()
        };
        let lr = real(cfg.learning_rate);
        match self {
            GradientState::Sgd => sgd_update(params, &grads, lr)?,
            GradientState::Adagrad { sum_sq } => adagrad_update(params, &grads, sum_sq, lr, real(cfg.adagrad_eps))?,
            GradientState::Adadelta {
                avg_sq_grad,
                avg_sq_update,
            } => adadelta_update(
                params,
                &grads,
                avg_sq_grad,
                avg_sq_update,
                lr,
                real(cfg.adadelta_decay),
                real(cfg.adadelta_eps),
            )?,
            GradientState::Adam { m, v, step } => adam_update(
                params,
                &grads,
                m,
                v,
                step,
                lr,
                real(cfg.adam_beta1),
                real(cfg.adam_beta2),
                real(cfg.adam_eps),
            )?,
        }
        Ok(norm)
    }
}
