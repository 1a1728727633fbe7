//! Attentional encoder-decoder: bidirectional LSTM encoder, additive
//! attention, LSTM decoder fed with the previous word and the context, and a
//! deep output layer over the target vocabulary.

mod checkpoint;
mod network;
mod search;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::{real, ParameterSet, Real, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use network::{DecoderState, Encoded, ParamVars};
pub use search::Hypothesis;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub deep_output_dim: usize,
    pub weight_noise_sigma: f64,
    pub beam_size: usize,
    pub max_output_length: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            src_vocab_size: 1000,
            tgt_vocab_size: 1000,
            embedding_dim: 64,
            hidden_dim: 64,
            attention_dim: 64,
            deep_output_dim: 64,
            weight_noise_sigma: 0.01,
            beam_size: 6,
            max_output_length: 50,
        }
    }
}

impl ModelConfig {
    /// Small configuration with every width set to `dim`.
    pub fn tiny(src_vocab_size: usize, tgt_vocab_size: usize, dim: usize) -> Self {
        Self {
            src_vocab_size,
            tgt_vocab_size,
            embedding_dim: dim,
            hidden_dim: dim,
            attention_dim: dim,
            deep_output_dim: dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("src_vocab_size", self.src_vocab_size),
            ("tgt_vocab_size", self.tgt_vocab_size),
            ("embedding_dim", self.embedding_dim),
            ("hidden_dim", self.hidden_dim),
            ("attention_dim", self.attention_dim),
            ("deep_output_dim", self.deep_output_dim),
            ("beam_size", self.beam_size),
            ("max_output_length", self.max_output_length),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.weight_noise_sigma >= 0.0) {
            return Err(Error::Config("weight_noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (e, h, a, d) = (
            self.embedding_dim,
            self.hidden_dim,
            self.attention_dim,
            self.deep_output_dim,
        );
        vec![
            ("src_embedding", vec![self.src_vocab_size, e]),
            ("tgt_embedding", vec![self.tgt_vocab_size, e]),
            ("enc_fwd_w", vec![e + h, 4 * h]),
            ("enc_fwd_b", vec![4 * h]),
            ("enc_bwd_w", vec![e + h, 4 * h]),
            ("enc_bwd_b", vec![4 * h]),
            ("dec_init_w", vec![2 * h, h]),
            ("dec_init_b", vec![h]),
            ("att_ann_w", vec![2 * h, a]),
            ("att_dec_w", vec![h, a]),
            ("att_b", vec![a]),
            ("att_v", vec![a]),
            ("dec_w", vec![e + 2 * h + h, 4 * h]),
            ("dec_b", vec![4 * h]),
            ("deep_w", vec![h + 2 * h + e, d]),
            ("deep_b", vec![d]),
            ("out_w", vec![d, self.tgt_vocab_size]),
            ("out_b", vec![self.tgt_vocab_size]),
        ]
    }
}

/// Positions of each parameter inside the model's [`ParameterSet`].
pub(crate) mod slot {
    pub const SRC_EMB: usize = 0;
    pub const TGT_EMB: usize = 1;
    pub const ENC_FWD_W: usize = 2;
    pub const ENC_FWD_B: usize = 3;
    pub const ENC_BWD_W: usize = 4;
    pub const ENC_BWD_B: usize = 5;
    pub const INIT_W: usize = 6;
    pub const INIT_B: usize = 7;
    pub const ATT_ANN_W: usize = 8;
    pub const ATT_DEC_W: usize = 9;
    pub const ATT_B: usize = 10;
    pub const ATT_V: usize = 11;
    pub const DEC_W: usize = 12;
    pub const DEC_B: usize = 13;
    pub const DEEP_W: usize = 14;
    pub const DEEP_B: usize = 15;
    pub const OUT_W: usize = 16;
    pub const OUT_B: usize = 17;
}

pub const INIT_RANGE: f64 = 0.08;

#[derive(Clone, Debug, PartialEq)]
pub struct NmtModel<T: Real> {
    pub config: ModelConfig,
    pub params: ParameterSet<T>,
}

impl<T: Real> NmtModel<T> {
    /// Uniform `[-0.08, 0.08]` initialization, forget-gate biases set to 1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for (name, shape) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let values = if name.ends_with("_b") {
                vec![T::zero(); n]
            } else {
                (0..n)
                    .map(|_| real(rng.random_range(-INIT_RANGE..=INIT_RANGE)))
                    .collect()
            };
            params.push(name, Tensor::new(shape, values)?);
        }
        let h = config.hidden_dim;
        for s in [slot::ENC_FWD_B, slot::ENC_BWD_B, slot::DEC_B] {
            params.get_mut(s).values_mut()[h..2 * h].fill(T::one());
        }
        Ok(Self { config, params })
    }

    /// Every parameter zero; the output distribution is then uniform.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        for (name, shape) in config.parameter_shapes() {
            params.push(name, Tensor::zeros(shape));
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParameterSet<T>) -> Result<Self> {
        config.validate()?;
        let expected = Self::zeros(config.clone())?;
        expected.params.check_aligned(&params)?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> NmtModel<U> {
        NmtModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn with_params(&self, params: ParameterSet<T>) -> Self {
        Self {
            config: self.config.clone(),
            params,
        }
    }

    fn check_source(&self, src: &[usize]) -> Result<()> {
        if src.is_empty() {
            return Err(Error::Empty("source sentence"));
        }
        check_vocab("source", src, self.config.src_vocab_size)
    }

    fn check_target(&self, tgt: &[usize]) -> Result<()> {
        if tgt.is_empty() {
            return Err(Error::Empty("target sentence"));
        }
        check_vocab("target", tgt, self.config.tgt_vocab_size)
    }

    /// Source annotations, one `2 * hidden_dim` vector per token.
    pub fn encode(&self, src: &[usize]) -> Result<Vec<Vec<T>>> {
        self.check_source(src)?;
        let mut g = Graph::new();
        let pv = ParamVars::register(&mut g, &self.params, false);
        let enc = network::encode(&mut g, &pv, &self.config, src)?;
        let flat = g.value(enc.annotations)?;
        Ok(flat.chunks(2 * self.config.hidden_dim).map(<[T]>::to_vec).collect())
    }

    /// Context vector and attention weights for a decoder hidden state.
    pub fn attend(&self, annotations: &[Vec<T>], decoder_hidden: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        if annotations.is_empty() {
            return Err(Error::Empty("annotations"));
        }
        let mut g = Graph::new();
        let pv = ParamVars::register(&mut g, &self.params, false);
        let enc = network::encoded_from_rows(&mut g, &pv, annotations)?;
        let h = g.vector(decoder_hidden.to_vec());
        let (ctx, alpha) = network::attend(&mut g, &pv, &enc, h)?;
        Ok((g.value(ctx)?.to_vec(), g.value(alpha)?.to_vec()))
    }

    /// One decoder step. `state` is `(hidden, cell)`; returns the next state
    /// and the distribution over the target vocabulary.
    pub fn decode_step(
        &self,
        prev_token: usize,
        state: (&[T], &[T]),
        context: &[T],
    ) -> Result<((Vec<T>, Vec<T>), Vec<T>)> {
        check_vocab("target", &[prev_token], self.config.tgt_vocab_size)?;
        let mut g = Graph::new();
        let pv = ParamVars::register(&mut g, &self.params, false);
        let st = DecoderState {
            hidden: g.vector(state.0.to_vec()),
            cell: g.vector(state.1.to_vec()),
        };
        let ctx = g.vector(context.to_vec());
        let (next, logits) = network::decode_step(&mut g, &pv, prev_token, &st, ctx)?;
        let dist = g.softmax(logits)?;
        Ok((
            (g.value(next.hidden)?.to_vec(), g.value(next.cell)?.to_vec()),
            g.value(dist)?.to_vec(),
        ))
    }

    /// Initial decoder state for a source sentence, as `(hidden, cell)`.
    pub fn initial_state(&self, src: &[usize]) -> Result<(Vec<T>, Vec<T>)> {
        self.check_source(src)?;
        let mut g = Graph::new();
        let pv = ParamVars::register(&mut g, &self.params, false);
        let enc = network::encode(&mut g, &pv, &self.config, src)?;
        Ok((g.value(enc.init.hidden)?.to_vec(), g.value(enc.init.cell)?.to_vec()))
    }

    /// `sum_i log p(tgt_i | tgt_<i, src)` under forced decoding. `tgt` is
    /// expected to end in the end-of-sentence token.
    pub fn sentence_log_prob(&self, src: &[usize], tgt: &[usize]) -> Result<T> {
        self.check_source(src)?;
        self.check_target(tgt)?;
        let mut g = Graph::new();
        let pv = ParamVars::register(&mut g, &self.params, false);
        let enc = network::encode(&mut g, &pv, &self.config, src)?;
        let lp = network::forced_log_prob(&mut g, &pv, &enc, tgt)?;
        g.scalar(lp)
    }

    /// Log-probability of `tgt` and its gradient with respect to every
    /// parameter.
    pub fn log_prob_and_grad(&self, src: &[usize], tgt: &[usize]) -> Result<(T, ParameterSet<T>)> {
        self.check_source(src)?;
        self.check_target(tgt)?;
        let mut g = Graph::new();
        let pv = ParamVars::register(&mut g, &self.params, true);
        let enc = network::encode(&mut g, &pv, &self.config, src)?;
        let lp = network::forced_log_prob(&mut g, &pv, &enc, tgt)?;
        g.backward(lp)?;
        let value = g.scalar(lp)?;
        Ok((value, pv.gradients(&g, &self.params)?))
    }

    /// `log p(hyp | src) - log p(reference | src)` and its gradient, sharing
    /// one encoder pass.
    pub fn margin_and_grad(&self, src: &[usize], reference: &[usize], hyp: &[usize]) -> Result<(T, ParameterSet<T>)> {
        self.margin_and_grad_at(&self.params, src, reference, hyp)
    }

    /// Same quantity as [`Self::margin_and_grad`] without the backward pass.
    pub fn margin(&self, src: &[usize], reference: &[usize], hyp: &[usize]) -> Result<T> {
        self.margin_at(&self.params, src, reference, hyp)
    }

    /// [`Self::margin_and_grad`] evaluated at `params` instead of the model's
    /// own parameters; `params` must be aligned with them.
    pub fn margin_and_grad_at(
        &self,
        params: &ParameterSet<T>,
        src: &[usize],
        reference: &[usize],
        hyp: &[usize],
    ) -> Result<(T, ParameterSet<T>)> {
        self.check_margin_inputs(params, src, reference, hyp)?;
        let mut g = Graph::new();
        let pv = ParamVars::register(&mut g, params, true);
        let enc = network::encode(&mut g, &pv, &self.config, src)?;
        let lh = network::forced_log_prob(&mut g, &pv, &enc, hyp)?;
        let lr = network::forced_log_prob(&mut g, &pv, &enc, reference)?;
        let margin = g.sub(lh, lr)?;
        g.backward(margin)?;
        let value = g.scalar(margin)?;
        Ok((value, pv.gradients(&g, params)?))
    }

    pub fn margin_at(&self, params: &ParameterSet<T>, src: &[usize], reference: &[usize], hyp: &[usize]) -> Result<T> {
        self.check_margin_inputs(params, src, reference, hyp)?;
        let mut g = Graph::new();
        let pv = ParamVars::register(&mut g, params, false);
        let enc = network::encode(&mut g, &pv, &self.config, src)?;
        let lh = network::forced_log_prob(&mut g, &pv, &enc, hyp)?;
        let lr = network::forced_log_prob(&mut g, &pv, &enc, reference)?;
        Ok(g.scalar(lh)? - g.scalar(lr)?)
    }

    fn check_margin_inputs(
        &self,
        params: &ParameterSet<T>,
        src: &[usize],
        reference: &[usize],
        hyp: &[usize],
    ) -> Result<()> {
        self.params.check_aligned(params)?;
        self.check_source(src)?;
        self.check_target(reference)?;
        self.check_target(hyp)
    }

    pub fn beam_search(&self, src: &[usize], beam_size: usize, max_output_length: usize) -> Result<Hypothesis<T>> {
        self.check_source(src)?;
        search::beam_search(self, src, beam_size, max_output_length)
    }

    /// Beam search with the configured beam size and length limit.
    pub fn translate(&self, src: &[usize]) -> Result<Hypothesis<T>> {
        self.beam_search(src, self.config.beam_size, self.config.max_output_length)
    }

    pub fn greedy(&self, src: &[usize], max_output_length: usize) -> Result<Hypothesis<T>> {
        self.check_source(src)?;
        search::greedy(self, src, max_output_length)
    }
}

fn check_vocab(what: &'static str, ids: &[usize], size: usize) -> Result<()> {
    match ids.iter().find(|&&i| i >= size) {
        Some(&index) => Err(Error::Vocabulary { what, index, size }),
        None => Ok(()),
    }
}

/// Copy of `params` with independent `N(0, sigma^2)` noise on every weight.
pub fn apply_weight_noise<T: Real>(params: &ParameterSet<T>, sigma: f64, seed: u64) -> Result<ParameterSet<T>> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma must be nonnegative, got {sigma}")));
    }
    let mut out = params.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in out.flat_values_mut() {
        *v += real::<T>(normal.sample(&mut rng));
    }
    Ok(out)
}
