mod common;

use common::*;
use olnmt::model::{apply_weight_noise, NmtModel};
use olnmt::vocab::{BOS, EOS};
use rand::Rng;

fn random_source(r: &mut impl Rng, vocab: usize, max_len: usize) -> Vec<usize> {
    let n = r.random_range(1..=max_len);
    (0..n).map(|_| r.random_range(4..vocab)).collect()
}

#[test]
fn probability_mass_is_conserved_by_enumeration() {
    // 3 real words plus the 4 specials; every token may follow every prefix
    let tgt_vocab = 7;
    let all: Vec<usize> = (0..tgt_vocab).collect();
    for seed in 0..5 {
        let m = peaked_model(8, tgt_vocab, 6, 1.0, seed);
        let src = [4, 5, 6];
        for max_len in 1..=2 {
            let finished: f64 = finished_sequences(&all, max_len)
                .iter()
                .map(|s| m.sentence_log_prob(&src, s).unwrap().exp())
                .sum();
            assert!(finished <= 1.0 + 1e-12);
            let open: f64 = open_prefixes(&all, max_len)
                .iter()
                .map(|s| m.sentence_log_prob(&src, s).unwrap().exp())
                .sum();
            assert!(
                (finished + open - 1.0).abs() < 1e-12,
                "seed {seed} len {max_len}: {finished} + {open}"
            );
        }
    }
}

#[test]
fn decode_step_agrees_with_forced_scoring() {
    let m = random_model(10, 9, 6, 4);
    let src = [4, 8, 6];
    let tgt = [5, 7, EOS];
    let ann = m.encode(&src).unwrap();
    let (mut h, mut c) = m.initial_state(&src).unwrap();
    let mut prev = BOS;
    let mut total = 0.0;
    for &y in &tgt {
        let (ctx, _) = m.attend(&ann, &h).unwrap();
        let ((nh, nc), dist) = m.decode_step(prev, (&h, &c), &ctx).unwrap();
        assert!(dist.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        total += dist[y].ln();
        h = nh;
        c = nc;
        prev = y;
    }
    let forced = m.sentence_log_prob(&src, &tgt).unwrap();
    assert!((total - forced).abs() < 1e-10, "{total} vs {forced}");
}

#[test]
fn context_is_explicit_weighted_sum() {
    let mut r = rng(17);
    let m = peaked_model(10, 9, 6, 0.5, 2);
    for _ in 0..20 {
        let ann: Vec<Vec<f64>> = (0..r.random_range(1..6))
            .map(|_| (0..12).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let h: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let (ctx, alpha) = m.attend(&ann, &h).unwrap();
        assert!(alpha.iter().all(|&a| a >= 0.0));
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for k in 0..12 {
            let direct: f64 = alpha.iter().zip(&ann).map(|(a, row)| a * row[k]).sum();
            assert!((ctx[k] - direct).abs() < 1e-6);
        }
    }
}

#[test]
fn attention_weights_form_distributions_during_decoding() {
    let m = peaked_model(10, 9, 6, 1.0, 8);
    let mut r = rng(5);
    for _ in 0..10 {
        let src = random_source(&mut r, 10, 7);
        let ann = m.encode(&src).unwrap();
        let (mut h, mut c) = m.initial_state(&src).unwrap();
        for step in 0..6 {
            let (ctx, alpha) = m.attend(&ann, &h).unwrap();
            assert!(alpha.iter().all(|&a| a >= 0.0));
            assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let ((nh, nc), _) = m.decode_step(4 + step % 5, (&h, &c), &ctx).unwrap();
            h = nh;
            c = nc;
        }
    }
}

#[test]
fn greedy_matches_beam_of_one_and_stepwise_max() {
    let mut r = rng(3);
    for seed in 0..30 {
        let m = peaked_model(12, 10, 6, 0.8, seed);
        let src = random_source(&mut r, 12, 6);
        let greedy = m.greedy(&src, 8).unwrap();
        let beam = m.beam_search(&src, 1, 8).unwrap();
        assert_eq!(greedy, beam, "seed {seed}");
        if !greedy.truncated {
            let forced = m.sentence_log_prob(&src, &greedy.tokens).unwrap();
            assert!((forced - greedy.log_prob).abs() < 1e-10);
        }
    }
}

#[test]
fn beam_log_prob_equals_forced_score() {
    let mut r = rng(4);
    for seed in 0..20 {
        let m: NmtModel<f32> = peaked_model(12, 10, 8, 0.6, seed).cast();
        let src = random_source(&mut r, 12, 6);
        let hyp = m.beam_search(&src, 6, 10).unwrap();
        let forced = m.sentence_log_prob(&src, &hyp.tokens).unwrap();
        assert!((forced - hyp.log_prob).abs() < 1e-5, "{forced} vs {}", hyp.log_prob);
        assert!(hyp.log_prob <= 0.0 && !hyp.tokens.is_empty());
    }
}

#[test]
fn exhaustive_oracle_on_tiny_vocab() {
    let mut r = rng(6);
    for seed in 0..30 {
        // three real words: 4 specials + 3
        let m = peaked_model(8, 7, 6, 1.5, seed);
        let src = random_source(&mut r, 8, 4);
        let (best, lp) = brute_force_best(&m, &src, 3);
        // (3 words + unk + eos)^3 covers every prefix
        let hyp = m.beam_search(&src, 125, 3).unwrap();
        assert!(!hyp.truncated);
        assert_eq!(hyp.tokens, best, "seed {seed}");
        assert!((hyp.log_prob - lp).abs() < 1e-10);
    }
}

#[test]
fn wider_beam_never_scores_lower_than_greedy() {
    let mut r = rng(8);
    for seed in 0..30 {
        let m = peaked_model(12, 10, 6, 1.0, seed);
        let src = random_source(&mut r, 12, 6);
        let b1 = m.beam_search(&src, 1, 12).unwrap();
        let b6 = m.beam_search(&src, 6, 12).unwrap();
        if !b1.truncated {
            assert!(b6.log_prob >= b1.log_prob, "seed {seed}");
        }
    }
}

#[test]
fn gradient_reaches_every_parameter_group() {
    let m = peaked_model(10, 9, 6, 0.5, 12);
    let (_, grads) = m.log_prob_and_grad(&[4, 5, 6, 7], &[5, 6, EOS]).unwrap();
    for (name, t) in grads.iter() {
        assert!(t.values().iter().any(|&v| v != 0.0), "{name} received no gradient");
    }
}

#[test]
fn weight_noise_has_requested_mean() {
    let m: NmtModel<f64> = random_model(6, 6, 2, 0);
    let original = m.params.get(0).values()[0];
    let sigma = 0.01;
    let n = 100_000u64;
    let mut sum = 0.0;
    for seed in 0..n {
        // only the first coordinate matters; small model keeps this cheap
        sum += apply_weight_noise(&m.params, sigma, seed).unwrap().get(0).values()[0];
    }
    let mean = sum / n as f64;
    assert!(
        (mean - original).abs() < 3.0 * sigma / (n as f64).sqrt(),
        "{mean} vs {original}"
    );
}

#[test]
fn beam_score_is_nondecreasing_in_width() {
    let mut r = rng(1);
    for seed in 0..200 {
        for (tgt_vocab, scale, dim) in [(7, 1.5, 6), (10, 1.0, 6), (14, 2.0, 8)] {
            let m = peaked_model(12, tgt_vocab, dim, scale, seed);
            let src = random_source(&mut r, 12, 5);
            let mut prev: Option<olnmt::model::Hypothesis<f64>> = None;
            for beam in 1..=8 {
                let h = m.beam_search(&src, beam, 6).unwrap();
                if let Some(p) = &prev {
                    assert!(
                        p.truncated || !h.truncated,
                        "seed {seed} beam {beam} lost its finished hypothesis"
                    );
                    if p.truncated == h.truncated {
                        assert!(
                            h.log_prob >= p.log_prob,
                            "seed {seed} beam {beam}: {} < {}",
                            h.log_prob,
                            p.log_prob
                        );
                    }
                }
                prev = Some(h);
            }
        }
    }
}
