//! Independent oracles shared by the integration suites: central finite
//! differences, exhaustive sequence enumeration, brute-force search.
#![allow(dead_code)]

use olnmt::autodiff::{Graph, Var};
use olnmt::model::{ModelConfig, NmtModel};
use olnmt::vocab::{EOS, UNK};
use olnmt::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;
/// Near-zero gradients are compared against this floor rather than their own
/// magnitude.
pub const FD_FLOOR: f64 = 1e-3;

pub type Rng8 = ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Central differences of a scalar function of a flat vector.
pub fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + h;
            let up = f(&work);
            work[i] = orig - h;
            let down = f(&work);
            work[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

pub type OpBuilder = dyn Fn(&mut Graph<f64>, &[Var]) -> olnmt::Result<Var>;

/// Analytic vs numeric gradient of `sum(w * op(inputs))` with a fixed random
/// weighting `w`, over every entry of every input. Returns the worst relative
/// error.
pub fn check_op(build: &OpBuilder, inputs: &[Tensor<f64>], seed: u64) -> f64 {
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t)).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).unwrap().len()
    };
    let mut r = rng(seed ^ 0x5eed);
    let weights: Vec<f64> = (0..probe).map(|_| r.random_range(-1.0..1.0)).collect();

    let loss_of = |g: &mut Graph<f64>, vars: &[Var]| -> Var {
        let out = build(g, vars).unwrap();
        let shape = g.shape(out).unwrap().to_vec();
        if shape.is_empty() {
            return g.scale(out, weights[0]).unwrap();
        }
        let w = g.constant(&Tensor::new(shape, weights.clone()).unwrap());
        let prod = g.mul(out, w).unwrap();
        g.sum(prod).unwrap()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let loss = loss_of(&mut g, &vars);
    g.backward(loss).unwrap();
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match g.grad(*v).unwrap() {
            Some(gr) => analytic.extend_from_slice(gr),
            None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }

    let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.values().iter().copied()).collect();
    let f = |x: &[f64]| -> f64 {
        let mut g = Graph::new();
        let mut off = 0;
        let vars: Vec<Var> = inputs
            .iter()
            .zip(&sizes)
            .map(|(t, &n)| {
                let v = g.constant(&Tensor::new(t.shape().to_vec(), x[off..off + n].to_vec()).unwrap());
                off += n;
                v
            })
            .collect();
        let loss = loss_of(&mut g, &vars);
        g.scalar(loss).unwrap()
    };
    let numeric = numeric_grad(&f, &flat, FD_STEP);
    max_rel_err(&analytic, &numeric)
}

/// Random model with a deterministic seed.
pub fn random_model(src_vocab: usize, tgt_vocab: usize, dim: usize, seed: u64) -> NmtModel<f64> {
    NmtModel::new(ModelConfig::tiny(src_vocab, tgt_vocab, dim), seed).unwrap()
}

/// Like [`random_model`] but with weights spread wider so output
/// distributions are far from uniform.
pub fn peaked_model(src_vocab: usize, tgt_vocab: usize, dim: usize, scale: f64, seed: u64) -> NmtModel<f64> {
    let mut m = random_model(src_vocab, tgt_vocab, dim, seed);
    let mut r = rng(seed.wrapping_mul(31) + 7);
    for v in m.params.flat_values_mut() {
        *v = r.random_range(-scale..scale);
    }
    m
}

/// Tokens the decoder may emit (everything but padding and start).
pub fn emittable(tgt_vocab: usize) -> Vec<usize> {
    std::iter::once(EOS).chain(UNK..tgt_vocab).collect()
}

/// Every finished target sequence (ending in end-of-sentence) of length at
/// most `max_len` over `tokens`.
pub fn finished_sequences(tokens: &[usize], max_len: usize) -> Vec<Vec<usize>> {
    let body: Vec<usize> = tokens.iter().copied().filter(|&t| t != EOS).collect();
    let mut out = Vec::new();
    let mut prefixes: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in &prefixes {
            let mut done = p.clone();
            done.push(EOS);
            out.push(done);
            for &t in &body {
                let mut q = p.clone();
                q.push(t);
                next.push(q);
            }
        }
        prefixes = next;
    }
    out
}

/// Every unfinished prefix of exactly `len` tokens (no end-of-sentence).
pub fn open_prefixes(tokens: &[usize], len: usize) -> Vec<Vec<usize>> {
    let body: Vec<usize> = tokens.iter().copied().filter(|&t| t != EOS).collect();
    let mut prefixes: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..len {
        prefixes = prefixes
            .iter()
            .flat_map(|p| {
                body.iter().map(move |&t| {
                    let mut q = p.clone();
                    q.push(t);
                    q
                })
            })
            .collect();
    }
    prefixes
}

/// Exhaustive argmax over finished sequences; ties go to the first sequence
/// in enumeration order.
pub fn brute_force_best(model: &NmtModel<f64>, src: &[usize], max_len: usize) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for seq in finished_sequences(&emittable(model.config.tgt_vocab_size), max_len) {
        let lp = model.sentence_log_prob(src, &seq).unwrap();
        if best.as_ref().is_none_or(|b| lp > b.1) {
            best = Some((seq, lp));
        }
    }
    best.unwrap()
}
