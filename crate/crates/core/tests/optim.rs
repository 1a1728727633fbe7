mod common;

use common::*;
use olnmt::config::KeyValues;
use olnmt::model::NmtModel;
use olnmt::optim::*;
use olnmt::vocab::EOS;
use olnmt::{ParameterSet, Tensor};
use rand::Rng;

const EXACT: f64 = 1e-10;

fn scalar(x: f64) -> ParameterSet<f64> {
    let mut p = ParameterSet::new();
    p.push("w", Tensor::new(vec![1], vec![x]).unwrap());
    p
}

fn value(p: &ParameterSet<f64>) -> f64 {
    p.get(0).values()[0]
}

/// Runs `grads` through a fresh optimizer and returns the parameter after
/// each step.
fn trajectory(cfg: &OptimizerConfig, start: f64, grads: &[f64]) -> Vec<f64> {
    let mut p = scalar(start);
    let mut state = GradientState::new(cfg.algorithm, &p).unwrap();
    grads
        .iter()
        .map(|&g| {
            state.step(cfg, &mut p, scalar(g)).unwrap();
            value(&p)
        })
        .collect()
}

#[test]
fn sgd_steps_by_hand() {
    let cfg = OptimizerConfig::new(Algorithm::Sgd);
    assert_eq!(cfg.learning_rate, 1e-3);
    let t = trajectory(&cfg, 1.0, &[0.5, 0.5, 0.0]);
    assert!((t[0] - 0.9995).abs() < EXACT);
    assert!((t[1] - 0.999).abs() < EXACT);
    assert_eq!(t[2], t[1]);
}

#[test]
fn adagrad_steps_by_hand() {
    let cfg = OptimizerConfig::new(Algorithm::Adagrad);
    assert_eq!(cfg.learning_rate, 1e-4);
    let t = trajectory(&cfg, 0.0, &[1.0, 1.0]);
    let d1 = -1e-4 / (1.0f64 + 1e-8).sqrt();
    let d2 = -1e-4 / (2.0f64 + 1e-8).sqrt();
    assert!((t[0] - d1).abs() < EXACT);
    assert!((t[1] - t[0] - d2).abs() < EXACT);
    assert!((d2 - -1e-4 / 2f64.sqrt()).abs() < 1e-12);

    let mut p = scalar(3.0);
    let mut st = GradientState::new(Algorithm::Adagrad, &p).unwrap();
    for _ in 0..5 {
        st.step(&cfg, &mut p, scalar(0.0)).unwrap();
    }
    assert_eq!(value(&p), 3.0);
    match st {
        GradientState::Adagrad { sum_sq } => assert_eq!(value(&sum_sq), 0.0),
        _ => unreachable!(),
    }
}

#[test]
fn adadelta_steps_by_hand() {
    let cfg = OptimizerConfig::new(Algorithm::Adadelta);
    assert_eq!(
        (cfg.learning_rate, cfg.adadelta_decay, cfg.adadelta_eps),
        (0.1, 0.95, 1e-6)
    );
    let t = trajectory(&cfg, 0.0, &[1.0, 1.0]);
    let eps: f64 = 1e-6;
    let u1 = eps.sqrt() / (0.05 + eps).sqrt();
    assert!((t[0] - -0.1 * u1).abs() < EXACT);
    let eu1: f64 = 0.05 * u1 * u1;
    let eg2: f64 = 0.95 * 0.05 + 0.05;
    let u2 = (eu1 + eps).sqrt() / (eg2 + eps).sqrt();
    assert!((t[1] - t[0] - -0.1 * u2).abs() < EXACT);

    // zero gradient: no movement, accumulators only decay
    let mut p = scalar(0.0);
    let mut st = GradientState::new(Algorithm::Adadelta, &p).unwrap();
    st.step(&cfg, &mut p, scalar(1.0)).unwrap();
    let before = value(&p);
    st.step(&cfg, &mut p, scalar(0.0)).unwrap();
    assert_eq!(value(&p), before);
    match st {
        GradientState::Adadelta {
            avg_sq_grad,
            avg_sq_update,
        } => {
            assert!((value(&avg_sq_grad) - 0.95 * 0.05).abs() < EXACT);
            assert!((value(&avg_sq_update) - 0.95 * eu1).abs() < EXACT);
        }
        _ => unreachable!(),
    }
}

#[test]
fn adam_steps_by_hand() {
    let cfg = OptimizerConfig::new(Algorithm::Adam);
    assert_eq!(
        (cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
        (1e-3, 0.9, 0.999, 1e-8)
    );
    let t = trajectory(&cfg, 0.0, &[0.5, -0.25]);
    assert!((t[0] - -1e-3 * 0.5 / (0.5 + 1e-8)).abs() < EXACT);
    let m = 0.9 * 0.05 + 0.1 * -0.25;
    let v = 0.999 * 0.00025 + 0.001 * 0.0625;
    let m_hat = m / (1.0 - 0.81);
    let v_hat: f64 = v / (1.0 - 0.998001);
    assert!((t[1] - t[0] - -1e-3 * m_hat / (v_hat.sqrt() + 1e-8)).abs() < EXACT);

    // first step is about -lr * sign(g) whatever the magnitude
    for g in [1e-3, 0.7, -0.2] {
        let t = trajectory(&cfg, 0.0, &[g]);
        assert!((t[0] + 1e-3 * g.signum()).abs() < 1e-7, "{g}");
    }
    let t = trajectory(&cfg, 2.0, &[0.0; 4]);
    assert!(t.iter().all(|&x| x == 2.0));
}

#[test]
fn adam_step_counter_increments() {
    let cfg = OptimizerConfig::new(Algorithm::Adam);
    let mut p = scalar(0.0);
    let mut st = GradientState::new(Algorithm::Adam, &p).unwrap();
    for expected in 1..=3u64 {
        st.step(&cfg, &mut p, scalar(0.1)).unwrap();
        match &st {
            GradientState::Adam { step, .. } => assert_eq!(*step, expected),
            _ => unreachable!(),
        }
    }
}

#[test]
fn table_hyperparameters_load_from_config() {
    let expected = [
        ("sgd", 1e-3, None),
        ("adagrad", 1e-4, None),
        ("adadelta", 1e-1, None),
        ("adam", 1e-3, None),
        ("pas", 1.0, Some(1e-2)),
        ("ppas", 1e-2, Some(1e-2)),
    ];
    for (name, lr, c) in expected {
        let kv = KeyValues::parse(&format!("optimizer = {name}\n")).unwrap();
        let cfg = OptimizerConfig::from_key_values(&kv).unwrap();
        assert_eq!(cfg.algorithm.name(), name);
        assert_eq!(cfg.learning_rate, lr, "{name}");
        if let Some(c) = c {
            assert_eq!(cfg.c, c, "{name}");
        }
        assert_eq!(cfg.k_max, 10);
        assert_eq!(cfg.clip_norm, 1.0);
    }
    let kv = KeyValues::parse("optimizer = pas\nlr = 0.5\nC = 1e-3\nk_max = 4\n").unwrap();
    let cfg = OptimizerConfig::from_key_values(&kv).unwrap();
    assert_eq!((cfg.learning_rate, cfg.c, cfg.k_max), (0.5, 1e-3, 4));
}

#[test]
fn state_serialization_round_trips() {
    let mut r = rng(2);
    for alg in [Algorithm::Sgd, Algorithm::Adagrad, Algorithm::Adadelta, Algorithm::Adam] {
        let cfg = OptimizerConfig::new(alg);
        let m = random_model(8, 8, 3, 1);
        let mut p = m.params.clone();
        let mut st = GradientState::new(alg, &p).unwrap();
        for _ in 0..3 {
            let mut g = p.zeros_like();
            for v in g.flat_values_mut() {
                *v = r.random_range(-0.1..0.1);
            }
            st.step(&cfg, &mut p, g).unwrap();
        }
        let json = serde_json::to_string(&st).unwrap();
        let back: GradientState<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, st, "{alg}");
    }
}

#[test]
fn gradient_optimizers_solve_a_quadratic() {
    let target = [0.3, -0.2, 0.5, 0.1, -0.4];
    let mut r = rng(11);
    let dir: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    let start: Vec<f64> = target.iter().zip(&dir).map(|(t, d)| t + d / norm).collect();
    for (alg, lr) in [
        (Algorithm::Sgd, 1e-2),
        (Algorithm::Adagrad, 1e-1),
        (Algorithm::Adadelta, 1.0),
        (Algorithm::Adam, 1e-2),
    ] {
        let mut cfg = OptimizerConfig::new(alg);
        cfg.learning_rate = lr;
        let mut p = ParameterSet::new();
        p.push("w", Tensor::new(vec![5], start.clone()).unwrap());
        let mut st = GradientState::new(alg, &p).unwrap();
        let mut steps = 0;
        let dist = |p: &ParameterSet<f64>| {
            p.get(0)
                .values()
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        while dist(&p) > 1e-3 && steps < 10_000 {
            let mut g = p.clone();
            for (gi, t) in g.get_mut(0).values_mut().iter_mut().zip(&target) {
                *gi -= t;
            }
            st.step(&cfg, &mut p, g).unwrap();
            steps += 1;
        }
        assert!(dist(&p) <= 1e-3, "{alg}: distance {} after {steps} steps", dist(&p));
    }
}

/// `l(theta) = a * theta + b` on a single scalar parameter.
struct Linear {
    a: f64,
    b: f64,
}

impl PaObjective<f64> for Linear {
    fn margin(&mut self, p: &ParameterSet<f64>) -> olnmt::Result<f64> {
        Ok(self.a * value(p) + self.b)
    }
    fn margin_and_grad(&mut self, p: &ParameterSet<f64>) -> olnmt::Result<(f64, ParameterSet<f64>)> {
        Ok((self.margin(p)?, scalar(self.a)))
    }
}

fn grid_minimizer(theta0: f64, a: f64, b: f64, c: f64) -> f64 {
    let f = |t: f64| 0.5 * (t - theta0) * (t - theta0) + c * (a * t + b).max(0.0);
    let n = 200_000;
    (0..=n)
        .map(|i| theta0 - 1.0 + 2.0 * i as f64 / n as f64)
        .min_by(|x, y| f(*x).partial_cmp(&f(*y)).unwrap())
        .unwrap()
}

#[test]
fn pas_matches_grid_search_on_a_linear_margin() {
    let mut r = rng(21);
    let mut kinks = 0;
    for _ in 0..60 {
        let theta0 = r.random_range(-1.0..1.0);
        let a = r.random_range(0.5..2.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
        // margin at the anchor: sometimes below C|a|^2 so the kink is the optimum
        let l0 = if r.random_bool(0.5) {
            r.random_range(1e-4..0.02)
        } else {
            r.random_range(0.05..1.0)
        };
        let b = l0 - a * theta0;
        let c = 1e-2;
        let cfg = PaConfig {
            learning_rate: 0.02,
            c,
            k_max: 2000,
            clip_norm: 0.0,
            true_projection: false,
        };
        let mut p = scalar(theta0);
        let out = pas_update(&mut p, &mut Linear { a, b }, &cfg).unwrap();
        let oracle = grid_minimizer(theta0, a, b, c);
        if a * oracle + b <= 1e-4 {
            kinks += 1;
        }
        assert!(
            (value(&p) - oracle).abs() < 1e-3,
            "theta0 {theta0} a {a} b {b}: {} vs {oracle}",
            value(&p)
        );
        assert!(out.final_objective <= out.initial_objective);
    }
    assert!(kinks > 5 && kinks < 55, "both regimes exercised ({kinks} kinks)");
}

#[test]
fn pas_single_unit_step_reaches_unconstrained_minimizer() {
    // with lr 1 the first step lands on theta0 - C a exactly
    let cfg = OptimizerConfig::new(Algorithm::Pas).pa_config();
    let mut p = scalar(0.25);
    let out = pas_update(&mut p, &mut Linear { a: 0.5, b: 3.0 }, &cfg).unwrap();
    assert_eq!(value(&p), 0.25 - 1e-2 * 0.5);
    assert!(!out.passive && out.final_margin > 0.0);
}

#[test]
fn ppas_scalar_displacement_has_length_c() {
    let cfg = OptimizerConfig::new(Algorithm::Ppas).pa_config();
    for (a, b) in [(0.5, 1.0), (-3.0, 0.2), (2.0, 1e-4)] {
        let mut p = scalar(0.1);
        ppas_update(&mut p, &mut Linear { a, b: b - a * 0.1 }, &cfg).unwrap();
        assert!((value(&p) - (0.1 - 1e-2 * f64::signum(a))).abs() < 1e-15);
    }
    // the true projection keeps a short step instead of stretching it
    let mut cfg = cfg;
    cfg.true_projection = true;
    cfg.learning_rate = 1e-4;
    cfg.k_max = 1;
    let mut p = scalar(0.0);
    let out = ppas_update(&mut p, &mut Linear { a: 1.0, b: 1.0 }, &cfg).unwrap();
    assert!((value(&p) - -1e-4).abs() < 1e-15);
    assert!((out.displacement_norm - 1e-4).abs() < 1e-15);
}

struct Broken;

impl PaObjective<f64> for Broken {
    fn margin(&mut self, _: &ParameterSet<f64>) -> olnmt::Result<f64> {
        Ok(f64::NAN)
    }
    fn margin_and_grad(&mut self, _: &ParameterSet<f64>) -> olnmt::Result<(f64, ParameterSet<f64>)> {
        Ok((1.0, scalar(f64::INFINITY)))
    }
}

#[test]
fn non_finite_values_abort_without_change() {
    for ppas in [false, true] {
        let cfg = OptimizerConfig::new(if ppas { Algorithm::Ppas } else { Algorithm::Pas }).pa_config();
        let mut p = scalar(0.5);
        let out = if ppas {
            ppas_update(&mut p, &mut Broken, &cfg)
        } else {
            pas_update(&mut p, &mut Broken, &cfg)
        }
        .unwrap();
        assert!(out.aborted.is_some());
        assert_eq!(value(&p), 0.5);
    }
}

/// A random NMT model, a source, its beam output and a random reference.
struct Instance {
    model: NmtModel<f64>,
    src: Vec<usize>,
    hyp: Vec<usize>,
    reference: Vec<usize>,
}

fn instance(seed: u64) -> Instance {
    let mut r = rng(seed + 1000);
    let model = peaked_model(12, 10, 6, 0.5, seed);
    let src: Vec<usize> = (0..r.random_range(2..6)).map(|_| r.random_range(4..12)).collect();
    let hyp = model.beam_search(&src, 3, 8).unwrap().tokens;
    let mut reference: Vec<usize> = (0..r.random_range(1..6)).map(|_| r.random_range(4..10)).collect();
    reference.push(EOS);
    Instance {
        model,
        src,
        hyp,
        reference,
    }
}

#[test]
fn margin_matches_enumerated_scores() {
    // 3 real words; forced scores rebuilt from decode_step products
    let m = peaked_model(8, 7, 5, 1.0, 3);
    let src = [4, 6, 5];
    let step_score = |tgt: &[usize]| -> f64 {
        let ann = m.encode(&src).unwrap();
        let (mut h, mut c) = m.initial_state(&src).unwrap();
        let mut prev = olnmt::vocab::BOS;
        let mut total = 1.0;
        for &y in tgt {
            let (ctx, _) = m.attend(&ann, &h).unwrap();
            let ((nh, nc), dist) = m.decode_step(prev, (&h, &c), &ctx).unwrap();
            total *= dist[y];
            h = nh;
            c = nc;
            prev = y;
        }
        total.ln()
    };
    let seqs = finished_sequences(&emittable(7), 3);
    for hyp in seqs.iter().step_by(7) {
        for reference in seqs.iter().step_by(11) {
            let l = m.margin(&src, reference, hyp).unwrap();
            assert!((l - (step_score(hyp) - step_score(reference))).abs() < 1e-6);
        }
    }
    assert_eq!(m.margin(&src, &[4, EOS], &[4, EOS]).unwrap(), 0.0);
}

#[test]
fn passive_when_margin_is_not_positive() {
    let mut passive = 0;
    for seed in 0..40 {
        let inst = instance(seed);
        // hypothesis against itself (margin 0) and the beam output used as
        // the reference for a random hypothesis (usually margin < 0)
        for (reference, hyp) in [(&inst.hyp, &inst.hyp), (&inst.hyp, &inst.reference)] {
            let l = inst.model.margin(&inst.src, reference, hyp).unwrap();
            if l > 0.0 {
                continue;
            }
            for alg in [Algorithm::Pas, Algorithm::Ppas] {
                let cfg = OptimizerConfig::new(alg).pa_config();
                let mut p = inst.model.params.clone();
                let mut obj = SentenceMargin {
                    model: &inst.model,
                    src: &inst.src,
                    reference,
                    hypothesis: hyp,
                };
                let out = if alg == Algorithm::Pas {
                    pas_update(&mut p, &mut obj, &cfg)
                } else {
                    ppas_update(&mut p, &mut obj, &cfg)
                }
                .unwrap();
                assert!(out.passive);
                assert_eq!(p, inst.model.params, "bit-identical parameters");
                passive += 1;
            }
        }
    }
    assert!(passive >= 80);
}

#[test]
fn pas_never_increases_the_objective() {
    let cfg = OptimizerConfig::new(Algorithm::Pas).pa_config();
    let mut violated = 0;
    let mut decreased = 0;
    for seed in 0..100 {
        let inst = instance(seed);
        let mut p = inst.model.params.clone();
        let mut obj = SentenceMargin {
            model: &inst.model,
            src: &inst.src,
            reference: &inst.reference,
            hypothesis: &inst.hyp,
        };
        let out = pas_update(&mut p, &mut obj, &cfg).unwrap();
        if out.passive {
            continue;
        }
        violated += 1;
        let f_new = pa_objective(
            &inst.model.params,
            &p,
            inst.model.margin_at(&p, &inst.src, &inst.reference, &inst.hyp).unwrap(),
            cfg.c,
        );
        assert!(f_new <= out.initial_objective + 1e-15, "seed {seed}");
        if out.final_margin < out.initial_margin {
            decreased += 1;
        }
    }
    assert!(violated >= 50);
    assert!(decreased * 10 >= violated * 9, "{decreased}/{violated}");
}

#[test]
fn ppas_displacement_norm_is_c() {
    let cfg = OptimizerConfig::new(Algorithm::Ppas).pa_config();
    let mut checked = 0;
    for seed in 0..50 {
        let inst = instance(seed);
        let mut p = inst.model.params.clone();
        let mut obj = SentenceMargin {
            model: &inst.model,
            src: &inst.src,
            reference: &inst.reference,
            hypothesis: &inst.hyp,
        };
        let out = ppas_update(&mut p, &mut obj, &cfg).unwrap();
        let norm = p.distance(&inst.model.params);
        if out.passive {
            assert_eq!(norm, 0.0);
        } else {
            assert!((norm - cfg.c).abs() / cfg.c < 1e-6, "seed {seed}: {norm}");
            checked += 1;
        }
    }
    assert!(checked >= 25);
}
