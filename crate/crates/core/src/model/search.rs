use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::network::{self, DecoderState, ParamVars};
use crate::model::NmtModel;
use crate::tensor::Real;
use crate::vocab::{BOS, EOS, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis<T> {
    /// Target indices; ends with the end-of-sentence token unless truncated.
    pub tokens: Vec<usize>,
    pub log_prob: T,
    /// No hypothesis finished within the length limit; this is the best
    /// partial one.
    pub truncated: bool,
}

struct Live<T> {
    tokens: Vec<usize>,
    /// Running sum of negative log-probabilities, accumulated in the same
    /// order as forced scoring so both agree bit-for-bit.
    cost: T,
    state: DecoderState,
}

/// Tokens the decoder may emit. Padding and start-of-sentence never are.
fn emittable(token: usize) -> bool {
    token != PAD && token != BOS
}

/// Shared decoder expansions keyed by target prefix, so searching the same
/// source at several widths only pays once per distinct prefix.
struct Expander<'m, T: Real> {
    model: &'m NmtModel<T>,
    g: Graph<T>,
    pv: ParamVars,
    enc: network::Encoded,
    cache: HashMap<Vec<usize>, (DecoderState, Vec<T>)>,
}

impl<'m, T: Real> Expander<'m, T> {
    fn new(model: &'m NmtModel<T>, src: &[usize]) -> Result<Self> {
        let mut g = Graph::new();
        let pv = ParamVars::register(&mut g, &model.params, false);
        let enc = network::encode(&mut g, &pv, &model.config, src)?;
        Ok(Self {
            model,
            g,
            pv,
            enc,
            cache: HashMap::new(),
        })
    }

    /// Next decoder state and log-distribution after `tokens`, whose own
    /// state is `state`.
    fn expand(&mut self, tokens: &[usize], state: &DecoderState) -> Result<&(DecoderState, Vec<T>)> {
        if !self.cache.contains_key(tokens) {
            let prev = tokens.last().copied().unwrap_or(BOS);
            let (ctx, _) = network::attend(&mut self.g, &self.pv, &self.enc, state.hidden)?;
            let (next, logits) = network::decode_step(&mut self.g, &self.pv, prev, state, ctx)?;
            let lp = self.g.log_softmax(logits)?;
            let lp = self.g.value(lp)?.to_vec();
            self.cache.insert(tokens.to_vec(), (next, lp));
        }
        Ok(&self.cache[tokens])
    }

    /// One beam search of fixed width with a shrinking beam: every step keeps
    /// the best `width - finished` expansions, and expansions ending in
    /// end-of-sentence leave the beam as finished hypotheses.
    fn search(&mut self, beam_size: usize, max_len: usize) -> Result<Hypothesis<T>> {
        let vocab = self.model.config.tgt_vocab_size;
        let mut live = vec![Live {
            tokens: Vec::new(),
            cost: T::zero(),
            state: self.enc.init,
        }];
        let mut finished: Vec<(Vec<usize>, T)> = Vec::new();

        for _ in 0..max_len {
            let width = beam_size - finished.len();
            if width == 0 || live.is_empty() {
                break;
            }
            // (cost, parent, token)
            let mut candidates: Vec<(T, usize, usize)> = Vec::with_capacity(live.len() * vocab);
            let mut next_states = Vec::with_capacity(live.len());
            for (parent, hyp) in live.iter().enumerate() {
                let (next, lp) = self.expand(&hyp.tokens, &hyp.state)?;
                candidates.extend(
                    lp.iter()
                        .enumerate()
                        .filter(|&(tok, _)| emittable(tok))
                        .map(|(tok, &l)| (hyp.cost + (-l), parent, tok)),
                );
                next_states.push(*next);
            }
            candidates.sort_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .unwrap_or(Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let mut next_live = Vec::with_capacity(width);
            for &(cost, parent, tok) in candidates.iter().take(width) {
                let mut tokens = live[parent].tokens.clone();
                tokens.push(tok);
                if tok == EOS {
                    finished.push((tokens, cost));
                } else {
                    next_live.push(Live {
                        tokens,
                        cost,
                        state: next_states[parent],
                    });
                }
            }
            live = next_live;

            // Extending a live hypothesis can only add cost, so once a finished
            // one beats every live one the answer is fixed.
            if let (Some(best_done), Some(best_live)) = (
                min_cost(finished.iter().map(|f| f.1)),
                min_cost(live.iter().map(|l| l.cost)),
            ) {
                if best_done <= best_live {
                    break;
                }
            }
        }

        let best_finished = finished
            .into_iter()
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal));
        if let Some((tokens, cost)) = best_finished {
            return Ok(Hypothesis {
                tokens,
                log_prob: -cost,
                truncated: false,
            });
        }
        let best = live
            .into_iter()
            .min_by(|a, b| a.cost.partial_cmp(&b.cost).unwrap_or(Ordering::Equal))
            .expect("beam never empties without a finished hypothesis");
        Ok(Hypothesis {
            tokens: best.tokens,
            log_prob: -best.cost,
            truncated: true,
        })
    }
}

/// Finished beats truncated, then higher score; ties keep `a`.
fn better<T: Real>(a: Hypothesis<T>, b: Hypothesis<T>) -> Hypothesis<T> {
    match (a.truncated, b.truncated) {
        (true, false) => b,
        (false, true) => a,
        _ if b.log_prob > a.log_prob => b,
        _ => a,
    }
}

/// Best result over every beam width from 1 to `beam_size`. A single
/// fixed-width beam can lose to a narrower one; taking the best over all
/// widths makes the score nondecreasing in `beam_size`. Expansions are
/// shared across widths. Scores are raw summed log-probabilities (no length
/// normalization).
pub(crate) fn beam_search<T: Real>(
    model: &NmtModel<T>,
    src: &[usize],
    beam_size: usize,
    max_len: usize,
) -> Result<Hypothesis<T>> {
    if beam_size == 0 {
        return Err(Error::Config("beam_size must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Config("max_output_length must be at least 1".into()));
    }
    let mut ex = Expander::new(model, src)?;
    let mut best = ex.search(1, max_len)?;
    for width in 2..=beam_size {
        best = better(best, ex.search(width, max_len)?);
    }
    Ok(best)
}

fn min_cost<T: Real>(it: impl Iterator<Item = T>) -> Option<T> {
    it.fold(None, |acc, c| match acc {
        None => Some(c),
        Some(m) => Some(if c < m { c } else { m }),
    })
}

/// Argmax decoding: at every step take the most probable emittable token,
/// lowest index on ties.
pub(crate) fn greedy<T: Real>(model: &NmtModel<T>, src: &[usize], max_len: usize) -> Result<Hypothesis<T>> {
    let mut g = Graph::new();
    let pv = ParamVars::register(&mut g, &model.params, false);
    let enc = network::encode(&mut g, &pv, &model.config, src)?;
    let mut state = enc.init;
    let mut tokens = Vec::new();
    let mut cost = T::zero();
    for _ in 0..max_len {
        let prev = tokens.last().copied().unwrap_or(BOS);
        let (ctx, _) = network::attend(&mut g, &pv, &enc, state.hidden)?;
        let (next, logits) = network::decode_step(&mut g, &pv, prev, &state, ctx)?;
        let lp = g.log_softmax(logits)?;
        let lp = g.value(lp)?;
        let (tok, &l) = lp
            .iter()
            .enumerate()
            .filter(|&(t, _)| emittable(t))
            .fold(None, |best: Option<(usize, &T)>, cur| match best {
                Some(b) if *b.1 >= *cur.1 => Some(b),
                _ => Some(cur),
            })
            .expect("vocabulary has emittable tokens");
        cost += -l;
        tokens.push(tok);
        state = next;
        if tok == EOS {
            return Ok(Hypothesis {
                tokens,
                log_prob: -cost,
                truncated: false,
            });
        }
    }
    Ok(Hypothesis {
        tokens,
        log_prob: -cost,
        truncated: true,
    })
}
