use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::model::{slot, ModelConfig};
use crate::tensor::{real, ParameterSet, Real};
use crate::vocab::BOS;

/// Graph handles for every model parameter.
pub struct ParamVars {
    vars: Vec<Var>,
    hidden: usize,
}

impl ParamVars {
    /// Copies `params` into `g`. Untracked registration is for inference.
    pub fn register<T: Real>(g: &mut Graph<T>, params: &ParameterSet<T>, tracked: bool) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|t| if tracked { g.param(t) } else { g.constant(t) })
            .collect();
        // dec_init_b has shape [hidden]
        let hidden = params.get(slot::INIT_B).len();
        Self { vars, hidden }
    }

    #[inline]
    pub fn var(&self, slot: usize) -> Var {
        self.vars[slot]
    }

    /// Collects the gradient of each parameter after a backward pass;
    /// parameters the loss did not reach get zeros.
    pub fn gradients<T: Real>(&self, g: &Graph<T>, like: &ParameterSet<T>) -> Result<ParameterSet<T>> {
        let mut out = like.zeros_like();
        for (t, &v) in out.tensors_mut().iter_mut().zip(&self.vars) {
            if let Some(grad) = g.grad(v)? {
                t.values_mut().copy_from_slice(grad);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub hidden: Var,
    pub cell: Var,
}

/// Encoder output: annotation matrix `[n, 2H]`, its attention projection
/// `[n, A]`, and the initial decoder state.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub annotations: Var,
    pub projected: Var,
    pub init: DecoderState,
    pub len: usize,
}

/// Standard LSTM cell (input, forget, output gates; no peepholes). Gate
/// pre-activations are laid out `[i | f | o | g]`.
fn lstm_cell<T: Real>(
    g: &mut Graph<T>,
    w: Var,
    b: Var,
    hidden: usize,
    input: Var,
    state: DecoderState,
) -> Result<DecoderState> {
    let x = g.concat(&[input, state.hidden])?;
    let z = g.matmul(x, w)?;
    let z = g.add(z, b)?;
    let i = g.slice(z, 0, hidden)?;
    let i = g.sigmoid(i)?;
    let f = g.slice(z, hidden, hidden)?;
    let f = g.sigmoid(f)?;
    let o = g.slice(z, 2 * hidden, hidden)?;
    let o = g.sigmoid(o)?;
    let u = g.slice(z, 3 * hidden, hidden)?;
    let u = g.tanh(u)?;
    let keep = g.mul(f, state.cell)?;
    let write = g.mul(i, u)?;
    let cell = g.add(keep, write)?;
    let squashed = g.tanh(cell)?;
    let hidden = g.mul(o, squashed)?;
    Ok(DecoderState { hidden, cell })
}

fn zero_state<T: Real>(g: &mut Graph<T>, hidden: usize) -> DecoderState {
    DecoderState {
        hidden: g.vector(vec![T::zero(); hidden]),
        cell: g.vector(vec![T::zero(); hidden]),
    }
}

pub fn encode<T: Real>(g: &mut Graph<T>, pv: &ParamVars, cfg: &ModelConfig, src: &[usize]) -> Result<Encoded> {
    let h = cfg.hidden_dim;
    let emb = pv.var(slot::SRC_EMB);
    let inputs = src
        .iter()
        .map(|&id| g.embedding_row(emb, id))
        .collect::<Result<Vec<_>>>()?;

    let mut fwd = Vec::with_capacity(src.len());
    let mut st = zero_state(g, h);
    for &x in &inputs {
        st = lstm_cell(g, pv.var(slot::ENC_FWD_W), pv.var(slot::ENC_FWD_B), h, x, st)?;
        fwd.push(st.hidden);
    }
    let mut bwd = vec![st.hidden; src.len()];
    let mut st = zero_state(g, h);
    for (i, &x) in inputs.iter().enumerate().rev() {
        st = lstm_cell(g, pv.var(slot::ENC_BWD_W), pv.var(slot::ENC_BWD_B), h, x, st)?;
        bwd[i] = st.hidden;
    }
    let rows = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| g.concat(&[f, b]))
        .collect::<Result<Vec<_>>>()?;
    let annotations = g.stack(&rows)?;
    finish_encoding(g, pv, annotations, src.len())
}

/// Rebuilds an [`Encoded`] from precomputed annotation rows.
pub fn encoded_from_rows<T: Real>(g: &mut Graph<T>, pv: &ParamVars, rows: &[Vec<T>]) -> Result<Encoded> {
    let vars: Vec<Var> = rows.iter().map(|r| g.vector(r.clone())).collect();
    let annotations = g.stack(&vars)?;
    finish_encoding(g, pv, annotations, rows.len())
}

fn finish_encoding<T: Real>(g: &mut Graph<T>, pv: &ParamVars, annotations: Var, len: usize) -> Result<Encoded> {
    let projected = g.matmul(annotations, pv.var(slot::ATT_ANN_W))?;
    let mean_w = g.vector(vec![T::one() / real::<T>(len as f64); len]);
    let mean = g.matmul(mean_w, annotations)?;
    let init = g.matmul(mean, pv.var(slot::INIT_W))?;
    let init = g.add(init, pv.var(slot::INIT_B))?;
    let hidden = g.tanh(init)?;
    let cell = g.vector(vec![T::zero(); pv.hidden]);
    Ok(Encoded {
        annotations,
        projected,
        init: DecoderState { hidden, cell },
        len,
    })
}

/// Additive attention: `e_i = v . tanh(U a_i + W s + b)`, `alpha =
/// softmax(e)`, context `= sum_i alpha_i a_i`.
pub fn attend<T: Real>(g: &mut Graph<T>, pv: &ParamVars, enc: &Encoded, hidden: Var) -> Result<(Var, Var)> {
    let q = g.matmul(hidden, pv.var(slot::ATT_DEC_W))?;
    let q = g.add(q, pv.var(slot::ATT_B))?;
    let pre = g.add_bias(enc.projected, q)?;
    let act = g.tanh(pre)?;
    let scores = g.matmul(act, pv.var(slot::ATT_V))?;
    let alpha = g.softmax(scores)?;
    let context = g.matmul(alpha, enc.annotations)?;
    Ok((context, alpha))
}

/// Decoder LSTM step on `[embedding(prev); context]`, followed by the deep
/// output `tanh(W [s; c; embedding(prev)] + b)` and the readout. Returns the
/// new state and the unnormalized logits.
pub fn decode_step<T: Real>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    prev_token: usize,
    state: &DecoderState,
    context: Var,
) -> Result<(DecoderState, Var)> {
    let e = g.embedding_row(pv.var(slot::TGT_EMB), prev_token)?;
    let input = g.concat(&[e, context])?;
    let next = lstm_cell(g, pv.var(slot::DEC_W), pv.var(slot::DEC_B), pv.hidden, input, *state)?;
    let deep_in = g.concat(&[next.hidden, context, e])?;
    let deep = g.matmul(deep_in, pv.var(slot::DEEP_W))?;
    let deep = g.add(deep, pv.var(slot::DEEP_B))?;
    let deep = g.tanh(deep)?;
    let logits = g.matmul(deep, pv.var(slot::OUT_W))?;
    let logits = g.add(logits, pv.var(slot::OUT_B))?;
    Ok((next, logits))
}

/// Scalar `sum_i log p(tgt_i | tgt_<i, src)`.
pub fn forced_log_prob<T: Real>(g: &mut Graph<T>, pv: &ParamVars, enc: &Encoded, tgt: &[usize]) -> Result<Var> {
    let mut state = enc.init;
    let mut prev = BOS;
    let mut total: Option<Var> = None;
    for &y in tgt {
        let (ctx, _) = attend(g, pv, enc, state.hidden)?;
        let (next, logits) = decode_step(g, pv, prev, &state, ctx)?;
        let nll = g.cross_entropy(logits, y)?;
        total = Some(match total {
            None => nll,
            Some(t) => g.add(t, nll)?,
        });
        state = next;
        prev = y;
    }
    let nll = total.expect("non-empty target");
    g.scale(nll, -T::one())
}
