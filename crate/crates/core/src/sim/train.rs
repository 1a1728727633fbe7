use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{SentencePair, TextPair};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, bleu_stats, Smoothing};
use crate::model::{apply_weight_noise, NmtModel};
use crate::optim::{Algorithm, GradientState, OptimizerConfig};
use crate::sim::Pipeline;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    /// Hard cap on single-sample updates.
    pub max_updates: usize,
    /// Dev BLEU is computed every this many updates.
    pub eval_every: usize,
    /// Stop once this many updates pass without a new best dev BLEU.
    pub patience: usize,
    /// Dev sentences decoded per evaluation; 0 means all.
    pub dev_limit: usize,
    /// Beam used for dev decoding.
    pub eval_beam_size: usize,
    /// Standard deviation of the weight noise applied while computing each
    /// gradient; the stored weights stay clean.
    pub weight_noise_sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut optimizer = OptimizerConfig::new(Algorithm::Adadelta);
        optimizer.learning_rate = 1.0;
        Self {
            optimizer,
            max_updates: 100_000,
            eval_every: 1000,
            patience: 10_000,
            dev_limit: 0,
            eval_beam_size: 1,
            weight_noise_sigma: 0.01,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.optimizer.algorithm.is_passive_aggressive() || self.optimizer.algorithm == Algorithm::None {
            return Err(Error::Config(format!(
                "offline training needs a gradient optimizer, got {}",
                self.optimizer.algorithm
            )));
        }
        if self.eval_every == 0 || self.eval_beam_size == 0 {
            return Err(Error::Config("eval_every and eval_beam_size must be at least 1".into()));
        }
        if !(self.weight_noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "weight noise must be nonnegative, got {}",
                self.weight_noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub update: usize,
    pub dev_bleu: f64,
    /// Add-one smoothed dev BLEU, the model-selection score.
    pub dev_score: f64,
    /// Mean negative log-likelihood over the updates since the previous
    /// evaluation.
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<T: Real> {
    /// Parameters at the best dev evaluation.
    pub model: NmtModel<T>,
    /// Smoothed dev BLEU of `model`.
    pub best_dev_score: f64,
    pub best_update: usize,
    pub updates: usize,
    pub evals: Vec<EvalPoint>,
    /// A non-finite loss or gradient ended training early.
    pub diverged: bool,
}

/// Strict and smoothed dev BLEU.
fn dev_bleu<T: Real>(
    model: &NmtModel<T>,
    pipeline: &Pipeline,
    dev: &[SentencePair],
    refs: &[Vec<String>],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let max_len = model.config.max_output_length;
    let hyps = dev
        .iter()
        .map(|p| {
            let h = if cfg.eval_beam_size == 1 {
                model.greedy(&p.src, max_len)?
            } else {
                model.beam_search(&p.src, cfg.eval_beam_size, max_len)?
            };
            Ok(pipeline.decode_target(&h.tokens))
        })
        .collect::<Result<Vec<_>>>()?;
    let total = aggregate(&bleu_stats(&hyps, refs)?);
    Ok((total.bleu(Smoothing::None), total.bleu(Smoothing::AddOne)))
}

/// Single-sample maximum-likelihood training with clipping, transient
/// weight noise and early stopping on smoothed dev BLEU. Starts from `model`.
pub fn train_offline<T: Real>(
    model: &NmtModel<T>,
    pipeline: &Pipeline,
    train: &[TextPair],
    dev: &[TextPair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    if dev.is_empty() {
        return Err(Error::Empty("development corpus"));
    }
    let train = pipeline.encode_all(train)?;
    let dev_limit = if cfg.dev_limit == 0 {
        dev.len()
    } else {
        cfg.dev_limit.min(dev.len())
    };
    let dev_pairs = pipeline.encode_all(&dev[..dev_limit])?;
    let dev_refs: Vec<Vec<String>> = dev[..dev_limit].iter().map(|p| p.tgt.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = model.clone();
    let mut state = GradientState::new(cfg.optimizer.algorithm, &current.params)?;
    let mut best = current.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_update = 0;
    let mut evals = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut window_loss = 0.0;
    let mut window_n = 0usize;
    let mut updates = 0;
    let mut diverged = false;

    while updates < cfg.max_updates {
        if order.is_empty() {
            order = (0..train.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let pair = &train[order.pop().expect("refilled above")];
        let scored = if cfg.weight_noise_sigma > 0.0 {
            let noisy = apply_weight_noise(
                &current.params,
                cfg.weight_noise_sigma,
                cfg.seed.wrapping_add(updates as u64),
            )?;
            current.with_params(noisy).log_prob_and_grad(&pair.src, &pair.tgt)
        } else {
            current.log_prob_and_grad(&pair.src, &pair.tgt)
        };
        let (log_prob, mut grads) = scored?;
        if !log_prob.is_finite() {
            warn!("non-finite loss at update {updates}; stopping");
            diverged = true;
            break;
        }
        grads.scale(-T::one());
        let before = current.params.clone();
        match state.step(&cfg.optimizer, &mut current.params, grads) {
            Ok(_) if current.params.is_finite() => {}
            Ok(_) | Err(Error::NonFinite(_)) => {
                warn!("non-finite update at {updates}; stopping");
                current.params = before;
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
        updates += 1;
        window_loss -= log_prob.as_f64();
        window_n += 1;

        let last = updates == cfg.max_updates;
        if updates % cfg.eval_every == 0 || last {
            let (b, score) = dev_bleu(&current, pipeline, &dev_pairs, &dev_refs, cfg)?;
            let train_loss = window_loss / window_n.max(1) as f64;
            info!("update {updates}: loss {train_loss:.4} dev BLEU {b:.2} (smoothed {score:.2})");
            evals.push(EvalPoint {
                update: updates,
                dev_bleu: b,
                dev_score: score,
                train_loss,
            });
            window_loss = 0.0;
            window_n = 0;
            if score > best_score {
                best_score = score;
                best_update = updates;
                best = current.clone();
            }
            if updates - best_update >= cfg.patience {
                break;
            }
        }
    }
    if evals.is_empty() {
        // diverged before the first evaluation: fall back to the last
        // finite parameters
        best = current;
        best_score = dev_bleu(&best, pipeline, &dev_pairs, &dev_refs, cfg)?.1;
        best_update = updates;
    }
    Ok(TrainOutcome {
        model: best,
        best_dev_score: best_score,
        best_update,
        updates,
        evals,
        diverged,
    })
}
