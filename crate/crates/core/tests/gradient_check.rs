mod common;

use common::*;
use olnmt::autodiff::{Graph, Var};
use olnmt::model::{ModelConfig, NmtModel};
use olnmt::vocab::EOS;
use olnmt::Tensor;
use rand::Rng;

const TRIALS: u64 = 100;

fn rand_tensor(r: &mut impl Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn run(name: &str, make: impl Fn(&mut common::Rng8) -> (Vec<Tensor<f64>>, Box<OpBuilder>)) {
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for trial in 0..TRIALS {
        let mut r = rng(trial * 7919 + name.len() as u64);
        let (inputs, build) = make(&mut r);
        let err = check_op(build.as_ref(), &inputs, trial);
        worst = worst.max(err);
        if err >= FD_TOL {
            failures += 1;
        }
    }
    assert_eq!(
        failures, 0,
        "{name}: {failures}/{TRIALS} trials over tolerance, worst {worst:e}"
    );
}

fn dims(r: &mut impl Rng) -> (usize, usize, usize) {
    (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5))
}

#[test]
fn matmul_gradients() {
    run("matmul", |r| {
        let (m, k, n) = dims(r);
        (
            vec![
                rand_tensor(r, vec![m, k], -1.0, 1.0),
                rand_tensor(r, vec![k, n], -1.0, 1.0),
            ],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.matmul(v[0], v[1])),
        )
    });
    run("matvec", |r| {
        let (m, k, _) = dims(r);
        (
            vec![
                rand_tensor(r, vec![m, k], -1.0, 1.0),
                rand_tensor(r, vec![k], -1.0, 1.0),
            ],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.matmul(v[0], v[1])),
        )
    });
    run("vecmat", |r| {
        let (_, k, n) = dims(r);
        (
            vec![
                rand_tensor(r, vec![k], -1.0, 1.0),
                rand_tensor(r, vec![k, n], -1.0, 1.0),
            ],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.matmul(v[0], v[1])),
        )
    });
}

#[test]
fn elementwise_gradients() {
    type Bin = fn(&mut Graph<f64>, Var, Var) -> olnmt::Result<Var>;
    let binaries: [(&str, Bin); 3] = [("add", Graph::add), ("sub", Graph::sub), ("mul", Graph::mul)];
    for (name, op) in binaries {
        run(name, move |r| {
            let (m, n, _) = dims(r);
            (
                vec![
                    rand_tensor(r, vec![m, n], -1.0, 1.0),
                    rand_tensor(r, vec![m, n], -1.0, 1.0),
                ],
                Box::new(move |g: &mut Graph<f64>, v: &[Var]| op(g, v[0], v[1])),
            )
        });
    }
    type Un = fn(&mut Graph<f64>, Var) -> olnmt::Result<Var>;
    let unaries: [(&str, Un, f64, f64); 6] = [
        ("tanh", Graph::tanh, -2.0, 2.0),
        ("sigmoid", Graph::sigmoid, -3.0, 3.0),
        ("exp", Graph::exp, -1.0, 1.0),
        ("log", Graph::log, 0.5, 2.0),
        ("softmax", Graph::softmax, -2.0, 2.0),
        ("log_softmax", Graph::log_softmax, -2.0, 2.0),
    ];
    for (name, op, lo, hi) in unaries {
        run(name, move |r| {
            let (m, n, _) = dims(r);
            (
                vec![rand_tensor(r, vec![m, n + 1], lo, hi)],
                Box::new(move |g: &mut Graph<f64>, v: &[Var]| op(g, v[0])),
            )
        });
    }
    run("scale", |r| {
        let c = r.random_range(-2.0..2.0);
        (
            vec![rand_tensor(r, vec![3], -1.0, 1.0)],
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| g.scale(v[0], c)),
        )
    });
    run("sum", |r| {
        let (m, n, _) = dims(r);
        (
            vec![rand_tensor(r, vec![m, n], -1.0, 1.0)],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.sum(v[0])),
        )
    });
}

#[test]
fn structural_gradients() {
    run("add_bias", |r| {
        let (m, n, _) = dims(r);
        (
            vec![
                rand_tensor(r, vec![m, n], -1.0, 1.0),
                rand_tensor(r, vec![n], -1.0, 1.0),
            ],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.add_bias(v[0], v[1])),
        )
    });
    run("concat", |r| {
        let (a, b, c) = dims(r);
        (
            vec![
                rand_tensor(r, vec![a], -1.0, 1.0),
                rand_tensor(r, vec![b], -1.0, 1.0),
                rand_tensor(r, vec![c], -1.0, 1.0),
            ],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.concat(v)),
        )
    });
    run("stack", |r| {
        let (_, n, _) = dims(r);
        (
            vec![rand_tensor(r, vec![n], -1.0, 1.0), rand_tensor(r, vec![n], -1.0, 1.0)],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.stack(v)),
        )
    });
    run("slice", |r| {
        let n = r.random_range(2..8);
        let start = r.random_range(0..n - 1);
        let len = r.random_range(1..=n - start);
        (
            vec![rand_tensor(r, vec![n], -1.0, 1.0)],
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| g.slice(v[0], start, len)),
        )
    });
    run("embedding_lookup", |r| {
        let (vocab, dim, len) = dims(r);
        let ids: Vec<usize> = (0..len).map(|_| r.random_range(0..vocab)).collect();
        (
            vec![rand_tensor(r, vec![vocab, dim], -1.0, 1.0)],
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| g.embedding_lookup(v[0], &ids)),
        )
    });
    run("pick", |r| {
        let n = r.random_range(1..6);
        let i = r.random_range(0..n);
        (
            vec![rand_tensor(r, vec![n], -1.0, 1.0)],
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| g.pick(v[0], i)),
        )
    });
    run("cross_entropy", |r| {
        let n = r.random_range(1..8);
        let t = r.random_range(0..n);
        (
            vec![rand_tensor(r, vec![n], -3.0, 3.0)],
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| g.cross_entropy(v[0], t)),
        )
    });
}

#[test]
fn softmax_regression_weight_gradient() {
    // loss = cross_entropy(W x, y); every W entry against finite differences
    run("softmax_regression", |r| {
        let (k, n, _) = dims(r);
        let n = n + 1;
        let x = rand_tensor(r, vec![k], -1.0, 1.0);
        let y = r.random_range(0..n);
        (
            vec![rand_tensor(r, vec![k, n], -1.0, 1.0)],
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let xv = g.constant(&x);
                let logits = g.matmul(xv, v[0])?;
                g.cross_entropy(logits, y)
            }),
        )
    });
}

#[test]
fn fan_out_sums_contributions() {
    let mut g = Graph::<f64>::new();
    let x = g.param(&Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().unwrap(), &[2.0, -4.0, 1.0]);
}

#[test]
fn softmax_rows_are_distributions() {
    let mut r = rng(99);
    for _ in 0..100 {
        let (m, n, _) = dims(&mut r);
        let t = rand_tensor(&mut r, vec![m, n], -30.0, 30.0);
        let mut g = Graph::new();
        let x = g.constant(&t);
        let s = g.softmax(x).unwrap();
        for row in g.value(s).unwrap().chunks(n) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

/// Analytic gradient of `sentence_log_prob` against central differences over
/// every model parameter.
pub fn model_gradient_error(model: &NmtModel<f64>, src: &[usize], tgt: &[usize]) -> f64 {
    let (_, grads) = model.log_prob_and_grad(src, tgt).unwrap();
    let flat = model.params.to_flat();
    let f = |x: &[f64]| {
        let mut m = model.clone();
        for (p, &v) in m.params.flat_values_mut().zip(x) {
            *p = v;
        }
        m.sentence_log_prob(src, tgt).unwrap()
    };
    let numeric = numeric_grad(&f, &flat, FD_STEP);
    max_rel_err(&grads.to_flat(), &numeric)
}

#[test]
fn sentence_log_prob_matches_finite_differences() {
    let mut cfg = ModelConfig::tiny(12, 12, 8);
    cfg.hidden_dim = 8;
    for seed in 0..3 {
        let model = peaked_model(12, 12, 8, 0.5, seed);
        let model = NmtModel::from_parts(cfg.clone(), model.params).unwrap();
        let src = [4, 7, 11, 5];
        let tgt = [6, 9, 4, EOS];
        let err = model_gradient_error(&model, &src, &tgt);
        assert!(err < FD_TOL, "seed {seed}: max relative error {err:e}");
    }
}
