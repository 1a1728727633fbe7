use serde::{Deserialize, Serialize};

use crate::autodiff::clip_global_norm;
use crate::error::{Error, Result};
use crate::model::NmtModel;
use crate::tensor::{real, ParameterSet, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaConfig {
    pub learning_rate: f64,
    /// Aggressiveness.
    pub c: f64,
    /// Cap on inner iterations.
    pub k_max: usize,
    /// Global norm cap for the margin gradient; 0 disables clipping.
    pub clip_norm: f64,
    /// PPAS only: rescale the displacement only when it is longer than `c`
    /// instead of always rescaling it to length `c`.
    pub true_projection: bool,
}

impl PaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.c > 0.0) || self.k_max == 0 {
            return Err(Error::Config(format!(
                "passive-aggressive config needs lr > 0, C > 0, k_max >= 1 (got lr {}, C {}, k_max {})",
                self.learning_rate, self.c, self.k_max
            )));
        }
        Ok(())
    }
}

/// The margin `l(theta) = log p(hyp | x) - log p(ref | x)` as a function of
/// the parameters, with the hypothesis held fixed. Positive means the
/// reference is less probable than the hypothesis.
pub trait PaObjective<T: Real> {
    fn margin(&mut self, params: &ParameterSet<T>) -> Result<T>;
    fn margin_and_grad(&mut self, params: &ParameterSet<T>) -> Result<(T, ParameterSet<T>)>;
}

/// The margin of one post-edited sentence under an NMT model.
pub struct SentenceMargin<'a, T: Real> {
    pub model: &'a NmtModel<T>,
    pub src: &'a [usize],
    pub reference: &'a [usize],
    pub hypothesis: &'a [usize],
}

impl<T: Real> PaObjective<T> for SentenceMargin<'_, T> {
    fn margin(&mut self, params: &ParameterSet<T>) -> Result<T> {
        self.model.margin_at(params, self.src, self.reference, self.hypothesis)
    }

    fn margin_and_grad(&mut self, params: &ParameterSet<T>) -> Result<(T, ParameterSet<T>)> {
        self.model
            .margin_and_grad_at(params, self.src, self.reference, self.hypothesis)
    }
}

/// What one passive-aggressive update did.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PaOutcome {
    /// The margin was not positive at the anchor; nothing changed.
    pub passive: bool,
    /// Margin evaluations after the anchor.
    pub iterations: usize,
    pub initial_margin: f64,
    pub final_margin: f64,
    /// `F` at the anchor and at the returned parameters (PAS only; PPAS
    /// reports the hinge term `max(0, l)` it descends on).
    pub initial_objective: f64,
    pub final_objective: f64,
    /// The step size was halved after an increase of the objective.
    pub halved: bool,
    /// L2 norm of the applied displacement over all parameters.
    pub displacement_norm: f64,
    /// Set when a non-finite value stopped the update; parameters are then
    /// left unchanged.
    pub aborted: Option<String>,
}

fn sq_dist_f64<T: Real>(a: &ParameterSet<T>, b: &ParameterSet<T>) -> f64 {
    a.flat_values()
        .zip(b.flat_values())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

/// `F(theta) = 0.5 * |theta - anchor|^2 + C * max(0, margin)`.
pub fn pa_objective<T: Real>(anchor: &ParameterSet<T>, params: &ParameterSet<T>, margin: f64, c: f64) -> f64 {
    0.5 * sq_dist_f64(anchor, params) + c * margin.max(0.0)
}

fn finite_eval<T: Real>(value: T, grad: Option<&ParameterSet<T>>) -> std::result::Result<(), String> {
    if !value.is_finite() {
        return Err(format!("margin is {value}"));
    }
    if grad.is_some_and(|g| !g.is_finite()) {
        return Err("margin gradient has non-finite entries".into());
    }
    Ok(())
}

fn clip<T: Real>(grad: &mut ParameterSet<T>, cfg: &PaConfig) {
    if cfg.clip_norm > 0.0 {
        clip_global_norm(grad, real(cfg.clip_norm));
    }
}

/// Shared opening of both variants: margin at the anchor, passivity and
/// abort handling. `Err(outcome)` is returned when the update ends there.
fn open<T: Real>(
    params: &ParameterSet<T>,
    objective: &mut impl PaObjective<T>,
    cfg: &PaConfig,
) -> Result<std::result::Result<(T, ParameterSet<T>), PaOutcome>> {
    cfg.validate()?;
    let (l0, g0) = objective.margin_and_grad(params)?;
    let mut out = PaOutcome {
        initial_margin: l0.as_f64(),
        final_margin: l0.as_f64(),
        ..Default::default()
    };
    if let Err(msg) = finite_eval(l0, Some(&g0)) {
        out.aborted = Some(msg);
        return Ok(Err(out));
    }
    if l0 <= T::zero() {
        out.passive = true;
        return Ok(Err(out));
    }
    Ok(Ok((l0, g0)))
}

/// Subgradient descent on `F` from the anchor `params`:
/// `theta <- theta - lr * ((theta - anchor) + C [l > 0] grad l)`, stopping
/// once the margin is no longer positive or after `k_max` evaluations.
///
/// A step that increases `F` is retried once with half the step size for
/// the rest of the update; a second increase ends the loop. Accepted steps
/// never increase `F`, so the returned point is the best one visited.
pub fn pas_update<T: Real>(
    params: &mut ParameterSet<T>,
    objective: &mut impl PaObjective<T>,
    cfg: &PaConfig,
) -> Result<PaOutcome> {
    let (l0, g0) = match open(params, objective, cfg)? {
        Ok(v) => v,
        Err(mut done) => {
            done.initial_objective = cfg.c * done.initial_margin.max(0.0);
            done.final_objective = done.initial_objective;
            return Ok(done);
        }
    };
    let c = cfg.c;
    let anchor = params.clone();
    let mut out = PaOutcome {
        initial_margin: l0.as_f64(),
        initial_objective: c * l0.as_f64(),
        ..Default::default()
    };
    let mut lr = cfg.learning_rate;
    let mut theta = anchor.clone();
    let mut margin = l0;
    let mut grad = g0;
    clip(&mut grad, cfg);
    let mut f = out.initial_objective;

    while out.iterations < cfg.k_max && margin > T::zero() {
        let mut candidate = theta.clone();
        // (theta - anchor) + C grad, then step
        for ((x, &a), &g) in candidate
            .flat_values_mut()
            .zip(anchor.flat_values())
            .zip(grad.flat_values())
        {
            let sub = (*x - a) + real::<T>(c) * g;
            *x -= real::<T>(lr) * sub;
        }
        out.iterations += 1;
        let last = out.iterations == cfg.k_max;
        let (lc, gc) = if last {
            (objective.margin(&candidate)?, None)
        } else {
            let (l, g) = objective.margin_and_grad(&candidate)?;
            (l, Some(g))
        };
        if let Err(msg) = finite_eval(lc, gc.as_ref()) {
            out.aborted = Some(msg);
            out.final_margin = out.initial_margin;
            out.final_objective = out.initial_objective;
            return Ok(out);
        }
        let fc = pa_objective(&anchor, &candidate, lc.as_f64(), c);
        if fc > f {
            if out.halved {
                break;
            }
            out.halved = true;
            lr *= 0.5;
            continue;
        }
        theta = candidate;
        margin = lc;
        f = fc;
        match gc {
            Some(mut g) => {
                clip(&mut g, cfg);
                grad = g;
            }
            None => break,
        }
    }

    out.final_margin = margin.as_f64();
    out.final_objective = f;
    out.displacement_norm = sq_dist_f64(&anchor, &theta).sqrt();
    *params = theta;
    Ok(out)
}

/// Subgradient descent on `max(0, l)` alone, then the total displacement is
/// rescaled to length C (or, with `true_projection`, shortened to C only
/// when longer). A zero displacement stays zero.
pub fn ppas_update<T: Real>(
    params: &mut ParameterSet<T>,
    objective: &mut impl PaObjective<T>,
    cfg: &PaConfig,
) -> Result<PaOutcome> {
    let (l0, g0) = match open(params, objective, cfg)? {
        Ok(v) => v,
        Err(mut done) => {
            done.initial_objective = done.initial_margin.max(0.0);
            done.final_objective = done.initial_objective;
            return Ok(done);
        }
    };
    let anchor = params.clone();
    let mut out = PaOutcome {
        initial_margin: l0.as_f64(),
        initial_objective: l0.as_f64(),
        ..Default::default()
    };
    let lr: T = real(cfg.learning_rate);
    let mut theta = anchor.clone();
    let mut grad = g0;
    loop {
        clip(&mut grad, cfg);
        theta.axpy(-lr, &grad);
        out.iterations += 1;
        if out.iterations == cfg.k_max {
            let l = objective.margin(&theta)?;
            if let Err(msg) = finite_eval(l, None) {
                return Ok(abort(out, msg));
            }
            break;
        }
        let (l, g) = objective.margin_and_grad(&theta)?;
        if let Err(msg) = finite_eval(l, Some(&g)) {
            return Ok(abort(out, msg));
        }
        if l <= T::zero() {
            break;
        }
        grad = g;
    }

    let raw = sq_dist_f64(&anchor, &theta).sqrt();
    if raw == 0.0 {
        out.final_margin = out.initial_margin;
        out.final_objective = out.initial_objective;
        return Ok(out);
    }
    let scale = if cfg.true_projection && raw <= cfg.c {
        1.0
    } else {
        cfg.c / raw
    };
    let mut updated = anchor.clone();
    for ((u, &t), &a) in updated
        .flat_values_mut()
        .zip(theta.flat_values())
        .zip(anchor.flat_values())
    {
        // anchor + scale * (theta - anchor), with the difference in f64
        *u = real(a.as_f64() + scale * (t.as_f64() - a.as_f64()));
    }
    let final_margin = objective.margin(&updated)?;
    if let Err(msg) = finite_eval(final_margin, None) {
        return Ok(abort(out, msg));
    }
    out.final_margin = final_margin.as_f64();
    out.final_objective = out.final_margin.max(0.0);
    out.displacement_norm = sq_dist_f64(&anchor, &updated).sqrt();
    *params = updated;
    Ok(out)
}

fn abort(mut out: PaOutcome, msg: String) -> PaOutcome {
    out.aborted = Some(msg);
    out.final_margin = out.initial_margin;
    out.final_objective = out.initial_objective;
    out
}
